//! Finite-difference verification of backward passes.
//!
//! The analytic gradient of the mean cross-entropy is compared with central
//! differences `(L(θ+h) − L(θ−h)) / 2h`. The error for one entry is
//! `|a − n| / max(|a|, |n|, floor)`; the floor keeps entries whose true
//! gradient is near zero from turning round-off into huge relative errors.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::data::{
    generate_synthetic, normalize_dataset, Measure, MeasureSchema, Normalization, NormalizedRecord,
    SyntheticSpec,
};
use crate::error::Result;
use crate::model::{Model, ModelConfig, ModelParams};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub subjects: usize,
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    /// Entries checked per group; larger groups are sampled.
    pub max_per_group: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                d: 16,
                layers: 2,
                experts: 3,
                ..ModelConfig::default()
            },
            subjects: 4,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_per_group: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupResult {
    pub group: String,
    pub entries: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupResult>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn failed_groups(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| !g.passed)
            .map(|g| g.group.as_str())
            .collect()
    }
}

/// Six tokens: four vector measures of different lengths and two scalars.
pub fn gradcheck_schema() -> MeasureSchema {
    MeasureSchema::new(
        "gradcheck-6",
        vec![
            Measure::vector("v4", 4, Normalization::Zscore),
            Measure::vector("v3", 3, Normalization::Zscore),
            Measure::vector("v5", 5, Normalization::Zscore),
            Measure::vector("r2", 2, Normalization::UnitRescale { factor: 0.5 }),
            Measure::scalar("s0", Normalization::None),
            Measure::scalar(
                "s1",
                Normalization::Range01 {
                    min: 0.0,
                    max: 10.0,
                },
            ),
        ],
    )
    .expect("static schema is valid")
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn loss_of(model: &Model, store: &ParamStore, batch: &[&NormalizedRecord]) -> Result<f64> {
    let tape = Tape::new();
    let ctx = Bound::new(&tape, store);
    Ok(model.loss(&ctx, batch)?.item())
}

/// Checks every parameter group of `model` on `records`.
pub fn gradcheck_model(
    model: &Model,
    records: &[NormalizedRecord],
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    let batch: Vec<&NormalizedRecord> = records.iter().collect();
    let analytic = {
        let tape = Tape::new();
        let ctx = Bound::new(&tape, &model.store);
        let loss = model.loss(&ctx, &batch)?;
        ctx.into_param_grads(tape.backward(loss)?)
    };

    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (id, name, _) in model.store.iter() {
        let g = ParamStore::group_of(name);
        match groups.last_mut() {
            Some((last, ids)) if last == g => ids.push(id.index()),
            _ => groups.push((g.to_string(), vec![id.index()])),
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = model.store.clone();
    let ids: Vec<_> = model.store.ids().collect();
    let mut results = Vec::with_capacity(groups.len());
    for (group, members) in groups {
        // Flat (tensor, offset) list over the group's entries.
        let entries: Vec<(usize, usize)> = members
            .iter()
            .flat_map(|&p| (0..model.store.get(ids[p]).numel()).map(move |i| (p, i)))
            .collect();
        let picks: Vec<usize> = if entries.len() <= cfg.max_per_group {
            (0..entries.len()).collect()
        } else {
            let mut v = sample(&mut rng, entries.len(), cfg.max_per_group).into_vec();
            v.sort_unstable();
            v
        };
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        for &k in &picks {
            let (p, i) = entries[k];
            let a = analytic[p].as_ref().map_or(0.0, |g| g[i]);
            let orig = store.get(ids[p]).data()[i];
            store.get_mut(ids[p]).data_mut()[i] = orig + cfg.step;
            let plus = loss_of(model, &store, &batch)?;
            store.get_mut(ids[p]).data_mut()[i] = orig - cfg.step;
            let minus = loss_of(model, &store, &batch)?;
            store.get_mut(ids[p]).data_mut()[i] = orig;
            let n = (plus - minus) / (2.0 * cfg.step);
            max_rel = max_rel.max(relative_error(a, n, cfg.floor));
            max_abs = max_abs.max((a - n).abs());
        }
        results.push(GroupResult {
            passed: max_rel < cfg.tolerance,
            group,
            entries: entries.len(),
            checked: picks.len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        passed: results.iter().all(|g| g.passed),
        groups: results,
    })
}

/// Builds the six-token schema, a few synthetic subjects and a model, then
/// runs [`gradcheck_model`]. Importance scores start from small random values
/// instead of zero so that the pooling path carries gradient into `u`.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let schema = gradcheck_schema();
    let spec = SyntheticSpec::new(cfg.subjects.max(1), cfg.seed).with_signal("v4", 2.0, false);
    let data = normalize_dataset(&generate_synthetic(&spec, &schema)?)?;
    let mut model = Model::new(cfg.model, schema)?;
    if let ModelParams::Token(p) = &model.params {
        if let Some(imp) = &p.importance {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
            let (w, b) = (imp.score.weight, imp.score.bias);
            for v in model.store.get_mut(w).data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
            model.store.get_mut(b).data_mut()[0] = 0.1;
        }
    }
    gradcheck_model(&model, &data.records, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fault::{self, Fault};
    use crate::model::Variant;

    fn quick() -> GradcheckConfig {
        GradcheckConfig {
            model: ModelConfig {
                d: 8,
                layers: 1,
                experts: 2,
                ..ModelConfig::default()
            },
            subjects: 3,
            max_per_group: 8,
            ..GradcheckConfig::default()
        }
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1e-9, 0.0, 1e-6), 1e-3);
        assert_eq!(relative_error(2.0, 1.0, 1e-6), 0.5);
    }

    #[test]
    fn small_model_passes_and_lists_each_group_once() {
        let report = run_gradcheck(&quick()).unwrap();
        assert!(report.passed, "{:#?}", report.groups);
        let mut names: Vec<&str> = report.groups.iter().map(|g| g.group.as_str()).collect();
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
        assert!(names.contains(&"importance"));
        assert!(names.contains(&"moe.gate"));
    }

    #[test]
    fn every_variant_passes() {
        for v in Variant::ALL {
            let mut cfg = quick();
            cfg.model.variant = v;
            let report = run_gradcheck(&cfg).unwrap();
            assert!(report.passed, "{v}: {:#?}", report.failed_groups());
        }
    }

    #[test]
    fn corrupted_gain_gradient_fails_on_norm_groups_only() {
        let report = fault::with(Fault::LayerNormGamma, || run_gradcheck(&quick())).unwrap();
        assert!(!report.passed);
        let failed = report.failed_groups();
        assert!(!failed.is_empty());
        assert!(failed.iter().all(|g| g.contains("norm")), "{failed:?}");
    }
}
