//! Measure tokenization: every measure becomes exactly one `d`-dimensional
//! token, whatever its length.
//!
//! A vector measure `x ∈ R^L` is projected element-wise (`h_i = W x_i + b`),
//! shifted by a learnable position row, passed through a small intra-measure
//! transformer and mean-pooled over its elements. A scalar measure is a
//! single linear projection. Every measure owns its parameters; nothing is
//! shared across measures, and parameter names are keyed by measure name so a
//! reordered schema rebuilds the very same per-measure weights.

use crate::autodiff::Var;
use crate::data::{MeasureKind, MeasureSchema, NormalizedRecord};
use crate::error::{Error, Result};
use crate::nn::{transformer_stack, LinearParams, PositionalEmbedding, TransformerLayerParams};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct VectorEncoderParams {
    pub projection: LinearParams,
    pub positions: PositionalEmbedding,
    pub layers: Vec<TransformerLayerParams>,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarEncoderParams {
    pub projection: LinearParams,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MeasureEncoder {
    Vector(VectorEncoderParams),
    Scalar(ScalarEncoderParams),
}

impl MeasureEncoder {
    pub fn input_len(&self) -> usize {
        match self {
            MeasureEncoder::Vector(v) => v.length,
            MeasureEncoder::Scalar(_) => 1,
        }
    }
}

/// Intra-measure encoder shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntraConfig {
    pub layers: usize,
    pub heads: usize,
}

impl Default for IntraConfig {
    fn default() -> Self {
        Self {
            layers: 1,
            heads: 1,
        }
    }
}

impl VectorEncoderParams {
    pub fn init(
        store: &mut ParamStore,
        init: Init,
        name: &str,
        length: usize,
        d: usize,
        intra: IntraConfig,
    ) -> Result<Self> {
        if length == 0 {
            return Err(Error::Schema(format!("vector measure {name} has length 0")));
        }
        let layers = (0..intra.layers)
            .map(|i| {
                TransformerLayerParams::init(
                    store,
                    init,
                    &format!("{name}.intra{i}"),
                    d,
                    intra.heads,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            projection: LinearParams::init(store, init, &format!("{name}.proj"), 1, d),
            positions: PositionalEmbedding::init(store, init, &format!("{name}.pos"), length, d),
            layers,
            length,
        })
    }
}

impl ScalarEncoderParams {
    pub fn init(store: &mut ParamStore, init: Init, name: &str, d: usize) -> Self {
        Self {
            projection: LinearParams::init(store, init, &format!("{name}.proj"), 1, d),
        }
    }
}

/// Encodes `x: [L]` or `[batch, L]` into one token per row (`[d]` or
/// `[batch, d]`).
pub fn encode_vector_measure<'t>(
    ctx: &Bound<'t, '_>,
    x: Var<'t>,
    params: &VectorEncoderParams,
) -> Result<Var<'t>> {
    let shape = x.shape();
    let (batch, len, squeeze) = match shape[..] {
        [l] => (1, l, true),
        [b, l] => (b, l, false),
        _ => {
            return Err(Error::Schema(format!(
                "vector measure input must be [L] or [batch, L], got {shape:?}"
            )))
        }
    };
    if len != params.length {
        return Err(Error::Schema(format!(
            "vector measure has {len} elements, encoder expects {}",
            params.length
        )));
    }
    let d = params.positions.d;
    let h = params
        .projection
        .forward(ctx, x.reshape(&[batch, len, 1])?)?;
    let h = h.add(params.positions.rows(ctx, len)?)?;
    let z = transformer_stack(ctx, h, &params.layers)?;
    let token = z.mean_axis(1)?;
    Ok(if squeeze { token.reshape(&[d])? } else { token })
}

/// Encodes `s: [1]` or `[batch, 1]` as `W s + b`.
pub fn encode_scalar_measure<'t>(
    ctx: &Bound<'t, '_>,
    s: Var<'t>,
    params: &ScalarEncoderParams,
) -> Result<Var<'t>> {
    let shape = s.shape();
    if shape.last() != Some(&1) || shape.len() > 2 {
        return Err(Error::Schema(format!(
            "scalar measure input must be [1] or [batch, 1], got {shape:?}"
        )));
    }
    params.projection.forward(ctx, s)
}

/// All per-measure encoders of a model, in schema order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEncoder {
    pub names: Vec<String>,
    pub encoders: Vec<MeasureEncoder>,
    pub d: usize,
}

/// Token stack for a batch: `tokens` is `[batch, T, d]`.
#[derive(Debug)]
pub struct TokenSequence<'t> {
    pub tokens: Var<'t>,
    pub token_names: Vec<String>,
}

impl TokenEncoder {
    pub fn init(
        store: &mut ParamStore,
        init: Init,
        schema: &MeasureSchema,
        d: usize,
        intra: IntraConfig,
    ) -> Result<Self> {
        let encoders = schema
            .measures()
            .iter()
            .map(|m| {
                let name = format!("encoder.{}", m.name);
                Ok(match m.kind {
                    MeasureKind::Vector { length } => MeasureEncoder::Vector(
                        VectorEncoderParams::init(store, init, &name, length, d, intra)?,
                    ),
                    MeasureKind::Scalar => {
                        MeasureEncoder::Scalar(ScalarEncoderParams::init(store, init, &name, d))
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            names: schema.token_names(),
            encoders,
            d,
        })
    }

    pub fn token_count(&self) -> usize {
        self.encoders.len()
    }

    /// Stacks measure `m` of every record into a `[batch, L_m]` tensor,
    /// naming the measure on any length mismatch.
    pub fn measure_input(&self, records: &[&NormalizedRecord], m: usize) -> Result<Tensor> {
        let len = self.encoders[m].input_len();
        let mut data = Vec::with_capacity(records.len() * len);
        for r in records {
            let v = r.values.get(m).ok_or_else(|| {
                Error::Schema(format!(
                    "subject {}: measure {} is missing",
                    r.id, self.names[m]
                ))
            })?;
            if v.len() != len {
                return Err(Error::Schema(format!(
                    "subject {}: measure {} has {} values, encoder expects {len}",
                    r.id,
                    self.names[m],
                    v.len()
                )));
            }
            data.extend_from_slice(v);
        }
        Ok(Tensor::new(&[records.len(), len], data)?)
    }

    /// Encodes pre-stacked per-measure inputs (`[batch, L_m]` each).
    pub fn encode_inputs<'t>(
        &self,
        ctx: &Bound<'t, '_>,
        inputs: &[Var<'t>],
    ) -> Result<TokenSequence<'t>> {
        if inputs.len() != self.encoders.len() {
            return Err(Error::Schema(format!(
                "expected {} measures, got {}",
                self.encoders.len(),
                inputs.len()
            )));
        }
        let mut tokens = Vec::with_capacity(inputs.len());
        for ((enc, &x), name) in self.encoders.iter().zip(inputs).zip(&self.names) {
            let batch = x.shape()[0];
            let tok = match enc {
                MeasureEncoder::Vector(p) => encode_vector_measure(ctx, x, p),
                MeasureEncoder::Scalar(p) => encode_scalar_measure(ctx, x, p),
            }
            .map_err(|e| match e {
                Error::Schema(msg) => Error::Schema(format!("measure {name}: {msg}")),
                other => other,
            })?;
            tokens.push(tok.reshape(&[batch, 1, self.d])?);
        }
        Ok(TokenSequence {
            tokens: Var::concat(&tokens, 1)?,
            token_names: self.names.clone(),
        })
    }

    pub fn tokenize<'t>(
        &self,
        ctx: &Bound<'t, '_>,
        records: &[&NormalizedRecord],
    ) -> Result<TokenSequence<'t>> {
        for r in records {
            if r.values.len() != self.encoders.len() {
                let missing = self
                    .names
                    .get(r.values.len())
                    .map_or("<extra>", String::as_str);
                return Err(Error::Schema(format!(
                    "subject {}: expected {} measures, got {} (first missing: {missing})",
                    r.id,
                    self.encoders.len(),
                    r.values.len()
                )));
            }
        }
        let inputs = (0..self.encoders.len())
            .map(|m| Ok(ctx.input(&self.measure_input(records, m)?)))
            .collect::<Result<Vec<_>>>()?;
        self.encode_inputs(ctx, &inputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::data::{Measure, Normalization, Sex};
    use crate::nn::transformer_layer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = crate::tensor::numel(shape);
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn vector_encoder(len: usize, d: usize) -> (ParamStore, VectorEncoderParams) {
        let mut store = ParamStore::new();
        let p = VectorEncoderParams::init(
            &mut store,
            Init::new(7),
            "v",
            len,
            d,
            IntraConfig::default(),
        )
        .unwrap();
        (store, p)
    }

    #[test]
    fn single_element_token_is_the_only_row() {
        let (store, p) = vector_encoder(1, 8);
        let tape = Tape::new();
        let ctx = Bound::new(&tape, &store);
        let x = ctx.input(&Tensor::new(&[1], vec![0.7]).unwrap());
        let tok = encode_vector_measure(&ctx, x, &p).unwrap();
        let h = p
            .projection
            .forward(&ctx, x.reshape(&[1, 1]).unwrap())
            .unwrap();
        let h = h.add(p.positions.rows(&ctx, 1).unwrap()).unwrap();
        let z = transformer_layer(&ctx, h, &p.layers[0]).unwrap();
        assert_eq!(tok.to_vec(), z.to_vec());
    }

    #[test]
    fn constant_input_with_zero_positions_gives_identical_rows() {
        let (mut store, p) = vector_encoder(5, 8);
        store.get_mut(p.positions.table).data_mut().fill(0.0);
        let tape = Tape::new();
        let ctx = Bound::new(&tape, &store);
        let x = ctx.input(&Tensor::full(&[5], 0.3));
        let tok = encode_vector_measure(&ctx, x, &p).unwrap().to_vec();
        let h = p
            .projection
            .forward(&ctx, x.reshape(&[5, 1]).unwrap())
            .unwrap();
        let z = transformer_layer(&ctx, h, &p.layers[0]).unwrap().to_vec();
        for row in z.chunks(8) {
            for (a, b) in row.iter().zip(&tok) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Straight-line re-implementation: per-element projection, position
    /// rows, attention and FFN written out with plain loops.
    #[test]
    fn matches_hand_written_reference() {
        let (len, d) = (6, 8);
        let (store, p) = vector_encoder(len, d);
        let x = random(&[len], 99);
        let tape = Tape::new();
        let ctx = Bound::new(&tape, &store);
        let got = encode_vector_measure(&ctx, ctx.input(&x), &p)
            .unwrap()
            .to_vec();

        let t = |id| store.get(id).data().to_vec();
        let lin = |l: &LinearParams, rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            let (w, b) = (t(l.weight), t(l.bias));
            rows.iter()
                .map(|r| {
                    (0..l.out_dim)
                        .map(|o| {
                            b[o] + (0..l.in_dim)
                                .map(|i| w[o * l.in_dim + i] * r[i])
                                .sum::<f64>()
                        })
                        .collect()
                })
                .collect()
        };
        let ln = |n: &crate::nn::LayerNormParams, rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            let (g, b) = (t(n.gamma), t(n.beta));
            rows.iter()
                .map(|r| {
                    let m = r.iter().sum::<f64>() / d as f64;
                    let v = r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / d as f64;
                    (0..d)
                        .map(|i| g[i] * (r[i] - m) / (v + 1e-5).sqrt() + b[i])
                        .collect()
                })
                .collect()
        };
        let pos = t(p.positions.table);
        let h: Vec<Vec<f64>> = lin(
            &p.projection,
            &x.data().iter().map(|&v| vec![v]).collect::<Vec<_>>(),
        )
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.iter()
                .enumerate()
                .map(|(j, v)| v + pos[i * d + j])
                .collect()
        })
        .collect();
        let layer = &p.layers[0];
        let n1 = ln(&layer.norm1, &h);
        let (q, k, v) = (
            lin(&layer.attention.query, &n1),
            lin(&layer.attention.key, &n1),
            lin(&layer.attention.value, &n1),
        );
        let mut mixed = vec![vec![0.0; d]; len];
        for i in 0..len {
            let s: Vec<f64> = (0..len)
                .map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..len {
                for c in 0..d {
                    mixed[i][c] += e[j] / z * v[j][c];
                }
            }
        }
        let a = lin(&layer.attention.output, &mixed);
        let x1: Vec<Vec<f64>> = h
            .iter()
            .zip(&a)
            .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
            .collect();
        let f1 = lin(&layer.ff1, &ln(&layer.norm2, &x1));
        let g: Vec<Vec<f64>> = f1
            .iter()
            .map(|r| {
                r.iter()
                    .map(|&x| 0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt())))
                    .collect()
            })
            .collect();
        let f2 = lin(&layer.ff2, &g);
        let mut want = vec![0.0; d];
        for (r, s) in x1.iter().zip(&f2) {
            for c in 0..d {
                want[c] += (r[c] + s[c]) / len as f64;
            }
        }
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn element_order_matters_only_through_positions() {
        let (mut store, p) = vector_encoder(4, 8);
        let x = Tensor::new(&[4], vec![0.1, -0.5, 0.9, 0.3]).unwrap();
        let xp = Tensor::new(&[4], vec![0.9, 0.3, 0.1, -0.5]).unwrap();
        let encode = |store: &ParamStore, x: &Tensor| {
            let tape = Tape::new();
            let ctx = Bound::new(&tape, store);
            encode_vector_measure(&ctx, ctx.input(x), &p)
                .unwrap()
                .to_vec()
        };
        let (a, b) = (encode(&store, &x), encode(&store, &xp));
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
        store.get_mut(p.positions.table).data_mut().fill(0.0);
        let (a, b) = (encode(&store, &x), encode(&store, &xp));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_encoder_is_affine() {
        let mut store = ParamStore::new();
        let p = ScalarEncoderParams::init(&mut store, Init::new(1), "s", 8);
        store
            .get_mut(p.projection.bias)
            .data_mut()
            .copy_from_slice(&random(&[8], 3).into_vec());
        let enc_with = |store: &ParamStore, s: f64| {
            let tape = Tape::new();
            let ctx = Bound::new(&tape, store);
            encode_scalar_measure(&ctx, ctx.input(&Tensor::new(&[1], vec![s]).unwrap()), &p)
                .unwrap()
                .to_vec()
        };
        let enc = |s| enc_with(&store, s);
        assert_eq!(enc(0.0), store.get(p.projection.bias).data().to_vec());
        let (e0, e1, e2) = (enc(0.0), enc(0.37), enc(0.74));
        for i in 0..8 {
            assert!(((e2[i] - e0[i]) - 2.0 * (e1[i] - e0[i])).abs() < 1e-12);
        }
        store.get_mut(p.projection.bias).data_mut().fill(0.0);
        assert_eq!(
            enc_with(&store, 1.0),
            store.get(p.projection.weight).data().to_vec()
        );
    }

    fn schema() -> MeasureSchema {
        MeasureSchema::new(
            "t",
            vec![
                Measure::vector("a", 3, Normalization::Zscore),
                Measure::scalar("b", Normalization::None),
                Measure::vector("c", 2, Normalization::None),
            ],
        )
        .unwrap()
    }

    fn record(values: Vec<Vec<f64>>) -> NormalizedRecord {
        NormalizedRecord {
            id: "r".into(),
            sex: Sex::Male,
            label: 0,
            values,
        }
    }

    #[test]
    fn tokens_follow_schema_and_stay_independent() {
        let mut store = ParamStore::new();
        let enc = TokenEncoder::init(
            &mut store,
            Init::new(2),
            &schema(),
            8,
            IntraConfig::default(),
        )
        .unwrap();
        assert_eq!(enc.token_count(), 3);
        let r1 = record(vec![vec![0.1, 0.2, 0.3], vec![0.5], vec![-1.0, 1.0]]);
        let mut r2 = r1.clone();
        r2.values[2] = vec![0.4, 0.4];
        let tape = Tape::new();
        let ctx = Bound::new(&tape, &store);
        let seq = enc.tokenize(&ctx, &[&r1, &r2]).unwrap();
        assert_eq!(seq.tokens.shape(), vec![2, 3, 8]);
        assert_eq!(seq.token_names, vec!["a", "b", "c"]);
        let v = seq.tokens.to_vec();
        let (t1, t2) = v.split_at(24);
        assert_eq!(t1[..16], t2[..16]);
        assert_ne!(t1[16..], t2[16..]);
    }

    #[test]
    fn scalar_only_schema_and_length_errors() {
        let s = MeasureSchema::new(
            "s",
            vec![
                Measure::scalar("x", Normalization::None),
                Measure::scalar("y", Normalization::None),
                Measure::scalar("z", Normalization::None),
            ],
        )
        .unwrap();
        let mut store = ParamStore::new();
        let enc =
            TokenEncoder::init(&mut store, Init::new(2), &s, 4, IntraConfig::default()).unwrap();
        let tape = Tape::new();
        let ctx = Bound::new(&tape, &store);
        let r = record(vec![vec![1.0], vec![2.0], vec![3.0]]);
        assert_eq!(
            enc.tokenize(&ctx, &[&r]).unwrap().tokens.shape(),
            vec![1, 3, 4]
        );
        let bad = record(vec![vec![1.0], vec![2.0, 5.0], vec![3.0]]);
        let err = enc.tokenize(&ctx, &[&bad]).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
        assert!(err.to_string().contains("measure y"), "{err}");
        let short = record(vec![vec![1.0]]);
        assert!(enc
            .tokenize(&ctx, &[&short])
            .unwrap_err()
            .to_string()
            .contains("y"));
    }

    #[test]
    fn default_schema_has_fifteen_tokens() {
        let s = MeasureSchema::builtin("abcd-15").unwrap();
        assert_eq!(s.token_count(), 15);
    }
}
