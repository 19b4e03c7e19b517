//! Shared building blocks: linear layers, layer norm, learnable positional
//! tables, multi-head self-attention and the pre-norm transformer layer.
//!
//! Sequence inputs are `[batch, seq, d]` (or `[seq, d]`, treated as a batch
//! of one). Nothing in a transformer layer looks at row positions, so the
//! layer is equivariant under any permutation of the sequence axis.

use crate::autodiff::Var;
use crate::error::{Error, Result, TensorError};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `y = x · Wᵀ + b` with `W: [out, in]`, `b: [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearParams {
    /// Scaled-uniform weight, zero bias.
    pub fn init(
        store: &mut ParamStore,
        init: Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let wname = format!("{name}.weight");
        let weight = store.add(wname.as_str(), init.xavier(&wname, out_dim, in_dim));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[out_dim, in_dim]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, ctx: &Bound<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.linear(ctx.p(self.weight), Some(ctx.p(self.bias)))?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<'t>(&self, ctx: &Bound<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.layer_norm(ctx.p(self.gamma), ctx.p(self.beta))?)
    }
}

/// Learnable `[max_len, d]` table of position rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEmbedding {
    pub table: ParamId,
    pub max_len: usize,
    pub d: usize,
}

impl PositionalEmbedding {
    pub fn init(store: &mut ParamStore, init: Init, name: &str, max_len: usize, d: usize) -> Self {
        let tname = format!("{name}.table");
        let bound = crate::params::xavier_bound(max_len, d);
        let table = store.add(tname.as_str(), init.uniform(&tname, &[max_len, d], bound));
        Self { table, max_len, d }
    }

    /// Rows `0..len` as a `[len, d]` value.
    pub fn rows<'t>(&self, ctx: &Bound<'t, '_>, len: usize) -> Result<Var<'t>> {
        let idx: Vec<usize> = (0..len).collect();
        Ok(ctx.p(self.table).embedding(&idx)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub output: LinearParams,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLayerParams {
    pub norm1: LayerNormParams,
    pub attention: AttentionParams,
    pub norm2: LayerNormParams,
    pub ff1: LinearParams,
    pub ff2: LinearParams,
}

pub const FFN_MULTIPLIER: usize = 4;

impl TransformerLayerParams {
    pub fn init(
        store: &mut ParamStore,
        init: Init,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{heads} attention heads do not divide model dimension {d}"
            )));
        }
        let hidden = FFN_MULTIPLIER * d;
        Ok(Self {
            norm1: LayerNormParams::init(store, &format!("{name}.norm1"), d),
            attention: AttentionParams {
                query: LinearParams::init(store, init, &format!("{name}.attn.query"), d, d),
                key: LinearParams::init(store, init, &format!("{name}.attn.key"), d, d),
                value: LinearParams::init(store, init, &format!("{name}.attn.value"), d, d),
                output: LinearParams::init(store, init, &format!("{name}.attn.output"), d, d),
                heads,
            },
            norm2: LayerNormParams::init(store, &format!("{name}.norm2"), d),
            ff1: LinearParams::init(store, init, &format!("{name}.ff1"), d, hidden),
            ff2: LinearParams::init(store, init, &format!("{name}.ff2"), hidden, d),
        })
    }

    pub fn d_model(&self) -> usize {
        self.attention.query.in_dim
    }
}

fn as_batched<'t>(x: Var<'t>) -> Result<(Var<'t>, bool)> {
    let shape = x.shape();
    match shape.len() {
        2 => Ok((x.reshape(&[1, shape[0], shape[1]])?, true)),
        3 => Ok((x, false)),
        _ => Err(TensorError::Shape {
            op: "sequence",
            lhs: shape,
            rhs: vec![],
        }
        .into()),
    }
}

/// Scaled dot-product self-attention. Returns the output and the per-head
/// attention weight tensors (`[batch, seq, seq]`, rows sum to 1).
pub fn self_attention_with_weights<'t>(
    ctx: &Bound<'t, '_>,
    x: Var<'t>,
    params: &AttentionParams,
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let (xb, squeeze) = as_batched(x)?;
    let shape = xb.shape();
    let d = shape[2];
    let heads = params.heads;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "{heads} attention heads do not divide model dimension {d}"
        )));
    }
    let dh = d / heads;
    let q = params.query.forward(ctx, xb)?;
    let k = params.key.forward(ctx, xb)?;
    let v = params.value.forward(ctx, xb)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                q.slice(2, h * dh, dh)?,
                k.slice(2, h * dh, dh)?,
                v.slice(2, h * dh, dh)?,
            )
        };
        let scores = qh.matmul(kh.transpose()?)?.scale(scale)?;
        let attn = scores.softmax_temp(1.0, 2)?;
        outs.push(attn.matmul(vh)?);
        weights.push(attn);
    }
    let merged = if heads == 1 {
        outs[0]
    } else {
        Var::concat(&outs, 2)?
    };
    let mut out = params.output.forward(ctx, merged)?;
    if squeeze {
        out = out.reshape(&[shape[1], d])?;
    }
    Ok((out, weights))
}

pub fn self_attention<'t>(
    ctx: &Bound<'t, '_>,
    x: Var<'t>,
    params: &AttentionParams,
) -> Result<Var<'t>> {
    Ok(self_attention_with_weights(ctx, x, params)?.0)
}

/// Pre-norm block: `x + Attn(LN(x))`, then `+ FFN(LN(·))` with a GELU FFN.
pub fn transformer_layer<'t>(
    ctx: &Bound<'t, '_>,
    x: Var<'t>,
    params: &TransformerLayerParams,
) -> Result<Var<'t>> {
    let a = self_attention(ctx, params.norm1.forward(ctx, x)?, &params.attention)?;
    let x = x.add(a)?;
    let h = params
        .ff1
        .forward(ctx, params.norm2.forward(ctx, x)?)?
        .gelu()?;
    let f = params.ff2.forward(ctx, h)?;
    Ok(x.add(f)?)
}

pub fn transformer_stack<'t>(
    ctx: &Bound<'t, '_>,
    mut x: Var<'t>,
    layers: &[TransformerLayerParams],
) -> Result<Var<'t>> {
    for layer in layers {
        x = transformer_layer(ctx, x, layer)?;
    }
    Ok(x)
}
