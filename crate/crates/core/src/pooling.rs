//! Token-importance pooling and the classification head.
//!
//! Each token gets a score `β_t = w·u_t + b`; `π = softmax(β / τ_p)` weights
//! the tokens into one pooled vector, which a two-layer GELU MLP maps to two
//! logits. `w` and `b` start at zero, so every token starts at weight `1/T`.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::LinearParams;
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceParams {
    /// `w` as a `[1, d]` weight and `b` as a `[1]` bias.
    pub score: LinearParams,
    pub tau_p: f64,
}

impl ImportanceParams {
    pub fn init(store: &mut ParamStore, name: &str, d: usize, tau_p: f64) -> Result<Self> {
        check_tau(tau_p)?;
        Ok(Self {
            score: LinearParams::zeros(store, name, d, 1),
            tau_p,
        })
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "importance temperature must be positive, got {tau}"
        )))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl ClassifierParams {
    /// Hidden width `d`, two output logits.
    pub fn init(store: &mut ParamStore, init: Init, name: &str, d: usize) -> Self {
        Self {
            fc1: LinearParams::init(store, init, &format!("{name}.fc1"), d, d),
            fc2: LinearParams::init(store, init, &format!("{name}.fc2"), d, 2),
        }
    }
}

fn batched<'t>(u: Var<'t>) -> Result<(Var<'t>, usize, usize, usize, bool)> {
    let shape = u.shape();
    match shape[..] {
        [t, d] => Ok((u.reshape(&[1, t, d])?, 1, t, d, true)),
        [b, t, d] => Ok((u, b, t, d, false)),
        _ => Err(Error::Config(format!(
            "token tensor must be [T, d] or [batch, T, d], got {shape:?}"
        ))),
    }
}

/// Returns `(pooled, π)`: `[d]`/`[T]` for one sequence, `[batch, d]` /
/// `[batch, T]` for a batch.
pub fn importance_pool<'t>(
    ctx: &Bound<'t, '_>,
    u: Var<'t>,
    params: &ImportanceParams,
) -> Result<(Var<'t>, Var<'t>)> {
    check_tau(params.tau_p)?;
    let (ub, b, t, d, squeeze) = batched(u)?;
    let beta = params.score.forward(ctx, ub)?.reshape(&[b, t])?;
    let pi = beta.softmax_temp(params.tau_p, 1)?;
    let pooled = pi.reshape(&[b, 1, t])?.matmul(ub)?;
    Ok(if squeeze {
        (pooled.reshape(&[d])?, pi.reshape(&[t])?)
    } else {
        (pooled.reshape(&[b, d])?, pi)
    })
}

/// Arithmetic mean of the tokens. Computed as a product with constant
/// weights `1/T`, the same arithmetic as [`importance_pool`] at uniform π.
pub fn mean_pool<'t>(ctx: &Bound<'t, '_>, u: Var<'t>) -> Result<Var<'t>> {
    let (ub, b, t, d, squeeze) = batched(u)?;
    let w = ctx.input(&Tensor::full(&[b, 1, t], 1.0 / t as f64));
    let pooled = w.matmul(ub)?;
    Ok(pooled.reshape(&if squeeze { vec![d] } else { vec![b, d] })?)
}

/// Logits `[.., 2]` from pooled `[.., d]`.
pub fn classify<'t>(
    ctx: &Bound<'t, '_>,
    pooled: Var<'t>,
    params: &ClassifierParams,
) -> Result<Var<'t>> {
    let h = params.fc1.forward(ctx, pooled)?.gelu()?;
    params.fc2.forward(ctx, h)
}

/// Probability of class 1 from a pair of logits.
pub fn probability(logits: [f64; 2]) -> f64 {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    e1 / (e0 + e1)
}

/// Mean of `−log softmax(logits)[label]` over a `[batch, 2]` logit tensor.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[u8]) -> Result<Var<'t>> {
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Data(format!("label must be 0 or 1, got {bad}")));
    }
    let shape = logits.shape();
    let logits = if shape.len() == 1 {
        logits.reshape(&[1, shape[0]])?
    } else {
        logits
    };
    let idx: Vec<usize> = labels.iter().map(|&y| usize::from(y)).collect();
    Ok(logits.log_softmax()?.gather(&idx)?.mean()?.scale(-1.0)?)
}
