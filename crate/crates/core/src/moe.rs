//! Token-wise mixture of experts with dense soft routing.
//!
//! For each token `z_t` a gate produces `α_t = softmax((W_g z_t + b_g) / τ_e)`
//! and the output is `u_t = Σ_e α_{t,e} · Expert_e(z_t)`, where every expert
//! is a two-layer GELU MLP. All experts see all tokens; there is no top-k
//! dispatch and no balancing loss.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::LinearParams;
use crate::params::{Bound, Init, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl ExpertParams {
    pub fn forward<'t>(&self, ctx: &Bound<'t, '_>, z: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(ctx, z)?.gelu()?;
        self.fc2.forward(ctx, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoEParams {
    pub gate: LinearParams,
    pub experts: Vec<ExpertParams>,
    pub tau_e: f64,
}

fn check_tau(tau: f64, what: &str) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} must be positive, got {tau}")))
    }
}

impl MoEParams {
    /// Experts use hidden width `d`.
    pub fn init(
        store: &mut ParamStore,
        init: Init,
        name: &str,
        d: usize,
        experts: usize,
        tau_e: f64,
    ) -> Result<Self> {
        if experts == 0 {
            return Err(Error::Config("expert count must be at least 1".into()));
        }
        check_tau(tau_e, "expert temperature")?;
        Ok(Self {
            gate: LinearParams::init(store, init, &format!("{name}.gate"), d, experts),
            experts: (0..experts)
                .map(|e| ExpertParams {
                    fc1: LinearParams::init(store, init, &format!("{name}.expert{e}.fc1"), d, d),
                    fc2: LinearParams::init(store, init, &format!("{name}.expert{e}.fc2"), d, d),
                })
                .collect(),
            tau_e,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }
}

/// Gate weights for a batch of token sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct GateRecord {
    /// Row-major `[batch, T, E]`.
    pub alpha: Vec<f64>,
    pub batch: usize,
    pub tokens: usize,
    pub experts: usize,
}

impl GateRecord {
    pub fn row(&self, b: usize, t: usize) -> &[f64] {
        let start = (b * self.tokens + t) * self.experts;
        &self.alpha[start..start + self.experts]
    }

    /// Mean gate mass per `(token, expert)` over the batch, `[T][E]`.
    pub fn expert_load(&self) -> Vec<Vec<f64>> {
        let mut load = vec![vec![0.0; self.experts]; self.tokens];
        for b in 0..self.batch {
            for (t, row) in load.iter_mut().enumerate() {
                for (acc, a) in row.iter_mut().zip(self.row(b, t)) {
                    *acc += a / self.batch as f64;
                }
            }
        }
        load
    }
}

fn flatten<'t>(z: Var<'t>) -> Result<(Var<'t>, Vec<usize>)> {
    let shape = z.shape();
    if shape.len() < 2 {
        return Err(Error::Config(format!(
            "token tensor must be [.., d], got {shape:?}"
        )));
    }
    let d = shape[shape.len() - 1];
    let n = shape.iter().product::<usize>() / d.max(1);
    Ok((z.reshape(&[n, d])?, shape))
}

/// `α = softmax((W_g z + b_g) / τ_e)` over the last axis; `z` is `[.., d]`
/// and the result is `[.., E]`.
pub fn gate<'t>(ctx: &Bound<'t, '_>, z: Var<'t>, params: &MoEParams) -> Result<Var<'t>> {
    check_tau(params.tau_e, "expert temperature")?;
    let (flat, shape) = flatten(z)?;
    let alpha = params
        .gate
        .forward(ctx, flat)?
        .softmax_temp(params.tau_e, 1)?;
    let mut out_shape = shape;
    *out_shape.last_mut().expect("rank checked") = params.num_experts();
    Ok(alpha.reshape(&out_shape)?)
}

fn record_of(alpha: Var<'_>) -> GateRecord {
    let shape = alpha.shape();
    let (batch, tokens) = match shape[..] {
        [t, _] => (1, t),
        [b, t, _] => (b, t),
        _ => (1, shape[..shape.len() - 1].iter().product()),
    };
    GateRecord {
        alpha: alpha.to_vec(),
        batch,
        tokens,
        experts: *shape.last().expect("non-empty shape"),
    }
}

/// Returns `u` with the shape of `z` plus the gate weights.
pub fn moe_forward<'t>(
    ctx: &Bound<'t, '_>,
    z: Var<'t>,
    params: &MoEParams,
) -> Result<(Var<'t>, GateRecord)> {
    let alpha = gate(ctx, z, params)?;
    let record = record_of(alpha);
    let (flat, shape) = flatten(z)?;
    let n = flat.shape()[0];
    let d = *shape.last().expect("rank checked");
    let e = params.num_experts();
    let u = if e == 1 {
        params.experts[0].forward(ctx, flat)?
    } else {
        let outs = params
            .experts
            .iter()
            .map(|ex| Ok(ex.forward(ctx, flat)?.reshape(&[n, 1, d])?))
            .collect::<Result<Vec<_>>>()?;
        let stacked = Var::concat(&outs, 1)?;
        // [n, 1, E] · [n, E, d] -> [n, 1, d]
        alpha
            .reshape(&[n, 1, e])?
            .matmul(stacked)?
            .reshape(&[n, d])?
    };
    Ok((u.reshape(&shape)?, record))
}
