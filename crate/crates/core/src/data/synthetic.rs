//! Synthetic cohorts with planted, known signal.
//!
//! Generation runs label-first. Each subject draws a sex and a label
//! `y ~ Bernoulli(prior)`, then one latent score `z_m` per measure:
//!
//! * plain measures: `z ~ N(0, 1)`, independent of the label;
//! * signal measures with effect `δ`: `z ~ N(±δ/2, 1)` (sign from the label),
//!   optionally only in female subjects;
//! * interaction pairs `(a, b)` with effect `δ`: a fair coin `s`, then
//!   `z_a ~ N(s·δ/2, 1)` and `z_b ~ N(±s·δ/2, 1)` with `+` for cases. Each
//!   score alone is independent of the label; only their agreement carries it.
//!
//! With equal-variance Gaussians the posterior is exactly logistic,
//! `logit P(y=1|z) = logit(prior) + Σ δ_m z_m` for plain signals, so `δ` is the
//! logit shift per unit of latent score and the Bayes rate is computable.
//!
//! Scores are rendered into raw values per measure: a vector measure is
//! `z · pattern + noise` around a fixed regional profile, with per-subject
//! offset and gain (removed again by within-subject z-scoring); rescaled and
//! range-mapped measures are emitted in raw units so normalization undoes
//! the unit change.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::record::{Dataset, Sex, SubjectRecord};
use super::schema::{MeasureKind, MeasureSchema, Normalization};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSpec {
    pub measure: String,
    pub effect: f64,
    #[serde(default)]
    pub female_only: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionSpec {
    pub measures: [String; 2],
    pub effect: f64,
}

fn default_prior() -> f64 {
    0.5
}
fn default_female() -> f64 {
    0.5
}
fn default_noise() -> f64 {
    0.5
}
fn default_schema() -> String {
    "builtin:desk-8".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_subjects: usize,
    pub seed: u64,
    /// `builtin:<name>` or a path relative to the spec file.
    #[serde(default = "default_schema")]
    pub schema: String,
    #[serde(default = "default_prior")]
    pub label_prior: f64,
    #[serde(default = "default_female")]
    pub female_fraction: f64,
    /// Per-element noise added to vector patterns, in latent units.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub missing_rate: f64,
    #[serde(default, rename = "signal")]
    pub signals: Vec<SignalSpec>,
    #[serde(default, rename = "interaction")]
    pub interactions: Vec<InteractionSpec>,
}

impl SyntheticSpec {
    pub fn new(n_subjects: usize, seed: u64) -> Self {
        Self {
            n_subjects,
            seed,
            schema: default_schema(),
            label_prior: default_prior(),
            female_fraction: default_female(),
            noise: default_noise(),
            missing_rate: 0.0,
            signals: Vec::new(),
            interactions: Vec::new(),
        }
    }

    pub fn with_signal(mut self, measure: &str, effect: f64, female_only: bool) -> Self {
        self.signals.push(SignalSpec {
            measure: measure.into(),
            effect,
            female_only,
        });
        self
    }

    pub fn with_interaction(mut self, a: &str, b: &str, effect: f64) -> Self {
        self.interactions.push(InteractionSpec {
            measures: [a.into(), b.into()],
            effect,
        });
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("cannot parse synthetic spec: {e}")))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("synthetic spec serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Measures carrying a planted signal (plain or interaction).
    pub fn signal_measures(&self) -> Vec<String> {
        let mut out: Vec<String> = self.signals.iter().map(|s| s.measure.clone()).collect();
        for i in &self.interactions {
            out.extend(i.measures.iter().cloned());
        }
        out
    }

    fn plan(&self, schema: &MeasureSchema) -> Result<Vec<Latent>> {
        let unit = |x: f64, what: &str| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must be in [0, 1], got {x}")))
            }
        };
        unit(self.label_prior, "label_prior")?;
        unit(self.female_fraction, "female_fraction")?;
        unit(self.missing_rate, "missing_rate")?;
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        let mut plan = vec![Latent::Null; schema.token_count()];
        let mut used = HashSet::new();
        let mut claim = |name: &str| -> Result<usize> {
            let idx = schema.index_of(name).ok_or_else(|| {
                Error::Config(format!(
                    "synthetic spec names unknown measure {name:?} (schema {})",
                    schema.name()
                ))
            })?;
            if name == "sex" {
                return Err(Error::Config(
                    "the sex measure cannot carry a planted signal".into(),
                ));
            }
            if !used.insert(idx) {
                return Err(Error::Config(format!("measure {name} is planted twice")));
            }
            Ok(idx)
        };
        for s in &self.signals {
            check_effect(s.effect)?;
            let idx = claim(&s.measure)?;
            plan[idx] = Latent::Signal {
                effect: s.effect,
                female_only: s.female_only,
            };
        }
        for (pair, i) in self.interactions.iter().enumerate() {
            check_effect(i.effect)?;
            let a = claim(&i.measures[0])?;
            let b = claim(&i.measures[1])?;
            plan[a] = Latent::PairLead {
                pair,
                effect: i.effect,
            };
            plan[b] = Latent::PairFollow {
                pair,
                effect: i.effect,
            };
        }
        Ok(plan)
    }

    /// Monte-Carlo estimate of the Bayes-optimal accuracy given the latent
    /// scores (an upper bound for any classifier on the rendered values).
    pub fn bayes_accuracy(&self, schema: &MeasureSchema, draws: usize, seed: u64) -> Result<f64> {
        let plan = self.plan(schema)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior_logit = (self.label_prior / (1.0 - self.label_prior)).ln();
        let mut correct = 0usize;
        for _ in 0..draws {
            let s = draw_subject(&mut rng, self, &plan);
            let mut logit = prior_logit;
            for (m, latent) in plan.iter().enumerate() {
                logit += latent.log_likelihood_ratio(&s, m, &plan);
            }
            let predicted = u8::from(logit >= 0.0);
            correct += usize::from(predicted == s.label);
        }
        Ok(correct as f64 / draws as f64)
    }
}

fn check_effect(effect: f64) -> Result<()> {
    if effect.is_finite() && effect >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "effect sizes must be finite and >= 0, got {effect}"
        )))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Latent {
    Null,
    Signal { effect: f64, female_only: bool },
    PairLead { pair: usize, effect: f64 },
    PairFollow { pair: usize, effect: f64 },
}

struct DrawnSubject {
    sex: Sex,
    label: u8,
    scores: Vec<f64>,
}

fn log_normal_pdf_ratio(z: f64, mu1: f64, mu0: f64) -> f64 {
    // log N(z; mu1, 1) - log N(z; mu0, 1)
    0.5 * ((z - mu0).powi(2) - (z - mu1).powi(2))
}

fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl Latent {
    fn log_likelihood_ratio(&self, s: &DrawnSubject, m: usize, plan: &[Latent]) -> f64 {
        match *self {
            Latent::Null | Latent::PairFollow { .. } => 0.0,
            Latent::Signal {
                effect,
                female_only,
            } => {
                if female_only && s.sex != Sex::Female {
                    0.0
                } else {
                    log_normal_pdf_ratio(s.scores[m], effect / 2.0, -effect / 2.0)
                }
            }
            Latent::PairLead { pair, effect } => {
                let follow = plan
                    .iter()
                    .position(|l| matches!(l, Latent::PairFollow { pair: p, .. } if *p == pair))
                    .expect("every pair has a follower");
                let (za, zb) = (s.scores[m], s.scores[follow]);
                let h = effect / 2.0;
                let ll = |mu_a: f64, mu_b: f64| -0.5 * ((za - mu_a).powi(2) + (zb - mu_b).powi(2));
                let agree = log_sum_exp2(ll(h, h), ll(-h, -h));
                let disagree = log_sum_exp2(ll(h, -h), ll(-h, h));
                agree - disagree
            }
        }
    }
}

fn draw_subject(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, plan: &[Latent]) -> DrawnSubject {
    let sex = if rng.random::<f64>() < spec.female_fraction {
        Sex::Female
    } else {
        Sex::Male
    };
    let label = u8::from(rng.random::<f64>() < spec.label_prior);
    let sign = if label == 1 { 1.0 } else { -1.0 };
    let n_pairs = spec.interactions.len();
    let coins: Vec<f64> = (0..n_pairs)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let scores = plan
        .iter()
        .map(|latent| {
            let noise: f64 = StandardNormal.sample(rng);
            let mean = match *latent {
                Latent::Null => 0.0,
                Latent::Signal {
                    effect,
                    female_only,
                } => {
                    if female_only && sex != Sex::Female {
                        0.0
                    } else {
                        sign * effect / 2.0
                    }
                }
                Latent::PairLead { pair, effect } => coins[pair] * effect / 2.0,
                Latent::PairFollow { pair, effect } => sign * coins[pair] * effect / 2.0,
            };
            mean + noise
        })
        .collect();
    DrawnSubject { sex, label, scores }
}

/// Fixed per-measure rendering structure, keyed by (seed, measure name).
struct Rendering {
    pattern: Vec<f64>,
    profile: Vec<f64>,
}

fn measure_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"synthetic-measure");
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let mut s = [0u8; 32];
    s.copy_from_slice(&h.finalize());
    ChaCha8Rng::from_seed(s)
}

fn rendering(seed: u64, name: &str, len: usize) -> Rendering {
    let mut rng = measure_rng(seed, name);
    if len == 1 {
        return Rendering {
            pattern: vec![1.0],
            profile: vec![0.0],
        };
    }
    // Balanced ±1 pattern, centered and scaled to unit RMS.
    let mut pattern: Vec<f64> = (0..len)
        .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    rand::seq::SliceRandom::shuffle(pattern.as_mut_slice(), &mut rng);
    let mean = pattern.iter().sum::<f64>() / len as f64;
    pattern.iter_mut().for_each(|p| *p -= mean);
    let rms = (pattern.iter().map(|p| p * p).sum::<f64>() / len as f64).sqrt();
    pattern.iter_mut().for_each(|p| *p /= rms);
    let profile = (0..len).map(|_| rng.random_range(-0.5..0.5)).collect();
    Rendering { pattern, profile }
}

/// Draws a dataset. Identical `(spec, schema)` give identical records.
pub fn generate_synthetic(spec: &SyntheticSpec, schema: &MeasureSchema) -> Result<Dataset> {
    let plan = spec.plan(schema)?;
    let renders: Vec<Rendering> = schema
        .measures()
        .iter()
        .map(|m| rendering(spec.seed, &m.name, m.len()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = (spec.n_subjects.max(1) as f64).log10().floor() as usize + 1;
    let mut records = Vec::with_capacity(spec.n_subjects);
    for i in 0..spec.n_subjects {
        let s = draw_subject(&mut rng, spec, &plan);
        let offset: f64 = Normal::new(0.0, 0.5)
            .expect("valid normal")
            .sample(&mut rng);
        let gain: f64 = rng.random_range(0.5..1.5);
        let mut values = Vec::with_capacity(schema.token_count());
        for ((m, r), &z) in schema.measures().iter().zip(&renders).zip(&s.scores) {
            let len = m.len();
            let mut v = Vec::with_capacity(len);
            for j in 0..len {
                let e: f64 = StandardNormal.sample(&mut rng);
                let y = match m.kind {
                    MeasureKind::Vector { .. } => z * r.pattern[j] + spec.noise * e,
                    MeasureKind::Scalar => z,
                };
                let raw = if m.name == "sex" {
                    match s.sex {
                        Sex::Female => Some(1.0),
                        Sex::Male => Some(0.0),
                        Sex::Unknown => None,
                    }
                } else {
                    Some(match m.normalization {
                        Normalization::Zscore => r.profile[j] + offset + gain * y,
                        Normalization::UnitRescale { factor } => (1.0 + 0.5 * y) / factor,
                        Normalization::Range01 { min, max } => min + (max - min) * (0.5 + 0.15 * y),
                        Normalization::None => y,
                    })
                };
                let missing = spec.missing_rate > 0.0 && rng.random::<f64>() < spec.missing_rate;
                v.push(if missing { None } else { raw });
            }
            values.push(v);
        }
        records.push(SubjectRecord {
            id: format!("sub{:0width$}", i, width = width),
            sex: s.sex,
            label: s.label,
            values,
        });
    }
    Dataset::new(schema.clone(), records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::normalize::normalize_dataset;
    use crate::data::NormalizedRecord;

    fn desk() -> MeasureSchema {
        MeasureSchema::builtin("desk-8").unwrap()
    }

    #[test]
    fn unknown_measure_is_config_error() {
        let spec = SyntheticSpec::new(10, 1).with_signal("nope", 1.0, false);
        assert!(matches!(
            generate_synthetic(&spec, &desk()),
            Err(Error::Config(_))
        ));
        let spec = SyntheticSpec::new(10, 1)
            .with_signal("hormones", 1.0, false)
            .with_interaction("hormones", "dti_fa", 1.0);
        assert!(generate_synthetic(&spec, &desk()).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = SyntheticSpec::new(50, 4).with_signal("nback_tfmri", 2.0, false);
        let a = generate_synthetic(&spec, &desk()).unwrap();
        let b = generate_synthetic(&spec, &desk()).unwrap();
        assert_eq!(a, b);
        let mut other = spec.clone();
        other.seed = 5;
        assert_ne!(a, generate_synthetic(&other, &desk()).unwrap());
    }

    #[test]
    fn strong_two_measure_signal_has_high_bayes_rate() {
        let spec = SyntheticSpec::new(1000, 1)
            .with_signal("nback_tfmri", 3.0, false)
            .with_signal("hormones", 3.0, false);
        let acc = spec.bayes_accuracy(&desk(), 20_000, 7).unwrap();
        assert!(acc >= 0.95, "bayes accuracy {acc}");
    }

    #[test]
    fn null_signal_bayes_rate_is_prior() {
        let mut spec = SyntheticSpec::new(1000, 1);
        spec.label_prior = 0.7;
        let acc = spec.bayes_accuracy(&desk(), 20_000, 3).unwrap();
        assert!((acc - 0.7).abs() < 0.02, "{acc}");
        let data = generate_synthetic(&spec, &desk()).unwrap();
        let pos = data.records.iter().filter(|r| r.label == 1).count() as f64 / 1000.0;
        assert!((pos - 0.7).abs() < 0.05);
    }

    #[test]
    fn sex_measure_tracks_sex_and_rescales_invert() {
        let spec = SyntheticSpec::new(40, 2);
        let data = generate_synthetic(&spec, &desk()).unwrap();
        let sex_idx = desk().index_of("sex").unwrap();
        for r in &data.records {
            let want = if r.sex == Sex::Female { 1.0 } else { 0.0 };
            assert_eq!(r.values[sex_idx][0], Some(want));
        }
        let norm = normalize_dataset(&data).unwrap();
        let rt = desk().index_of("task_reaction_time").unwrap();
        let mean: f64 = norm.records.iter().map(|r| r.values[rt][0]).sum::<f64>() / 40.0;
        assert!((mean - 1.0).abs() < 0.5, "rescaled mean {mean}");
    }

    #[test]
    fn spec_toml_round_trip() {
        let spec = SyntheticSpec::new(100, 3)
            .with_signal("hormones", 2.5, true)
            .with_interaction("cortical_thickness", "nback_tfmri", 4.0);
        let back = SyntheticSpec::from_toml_str(&spec.to_toml_string()).unwrap();
        assert_eq!(spec, back);
        assert_eq!(
            back.signal_measures(),
            vec!["hormones", "cortical_thickness", "nback_tfmri"]
        );
    }

    /// Plug-in mutual information (nats) between a binned feature and a
    /// binary label.
    fn plug_in_mi(pairs: &[(usize, u8)], bins: usize) -> f64 {
        let n = pairs.len() as f64;
        let mut joint = vec![[0.0f64; 2]; bins];
        for &(b, y) in pairs {
            joint[b][y as usize] += 1.0 / n;
        }
        let py = [0, 1].map(|y| joint.iter().map(|row| row[y]).sum::<f64>());
        let mut mi = 0.0;
        for row in &joint {
            let pb = row[0] + row[1];
            for y in 0..2 {
                if row[y] > 0.0 {
                    mi += row[y] * (row[y] / (pb * py[y])).ln();
                }
            }
        }
        mi
    }

    #[test]
    fn female_only_signal_carries_more_information_in_females() {
        let spec = SyntheticSpec::new(2000, 11).with_signal("hormones", 3.0, true);
        let data = normalize_dataset(&generate_synthetic(&spec, &desk()).unwrap()).unwrap();
        let h = desk().index_of("hormones").unwrap();
        let len = data.records[0].values[h].len();
        // Summarize the vector by its projection on the case-minus-control
        // mean, estimated on everyone so neither stratum is favoured.
        let mut dir = vec![0.0; len];
        for r in &data.records {
            let s = if r.label == 1 { 1.0 } else { -1.0 };
            for (d, v) in dir.iter_mut().zip(&r.values[h]) {
                *d += s * v;
            }
        }
        let bins = 8;
        let score = |r: &NormalizedRecord| -> f64 {
            r.values[h].iter().zip(&dir).map(|(v, d)| v * d).sum()
        };
        let mi = |sex: Sex| {
            let mut scored: Vec<(f64, u8)> = data
                .records
                .iter()
                .filter(|r| r.sex == sex)
                .map(|r| (score(r), r.label))
                .collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0));
            let n = scored.len();
            let pairs: Vec<(usize, u8)> = scored
                .iter()
                .enumerate()
                .map(|(i, &(_, y))| (i * bins / n, y))
                .collect();
            plug_in_mi(&pairs, bins)
        };
        let (f, m) = (mi(Sex::Female), mi(Sex::Male));
        assert!(f > m, "female MI {f} vs male MI {m}");
        assert!(f > 0.2 && m < 0.05, "female MI {f} vs male MI {m}");
    }
}
