//! Seeded subject-level train/test partition.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub stratify: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.9,
            seed: 0,
            stratify: false,
        }
    }
}

/// Index partition into `(train, test)`, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn train_count(fraction: f64, n: usize) -> usize {
    // Guard against 0.9 * n landing a hair under an integer.
    let k = (fraction * n as f64 + 1e-9).floor() as usize;
    k.clamp(1, n - 1)
}

/// Splits `labels.len()` subjects. Unstratified: `⌊f·n⌋` train subjects.
/// Stratified: per-class floors plus largest-remainder top-up, so the total
/// is still `⌊f·n⌋` and each class is within one subject of its share.
pub fn split(labels: &[u8], spec: &SplitSpec) -> Result<Split> {
    let n = labels.len();
    if n < 2 {
        return Err(Error::Data(format!(
            "need at least 2 subjects to split, got {n}"
        )));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_train = train_count(spec.train_fraction, n);
    let mut train = Vec::with_capacity(n_train);
    if spec.stratify {
        let mut classes: Vec<Vec<usize>> = vec![Vec::new(), Vec::new()];
        for (i, &y) in labels.iter().enumerate() {
            classes[usize::from(y.min(1))].push(i);
        }
        let mut quotas: Vec<(usize, f64)> = classes
            .iter()
            .map(|c| {
                let exact = spec.train_fraction * c.len() as f64;
                let q = ((exact + 1e-9).floor() as usize).min(c.len());
                (q, exact - q as f64)
            })
            .collect();
        let mut assigned: usize = quotas.iter().map(|q| q.0).sum();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        order.sort_by(|&a, &b| quotas[b].1.total_cmp(&quotas[a].1).then(a.cmp(&b)));
        for &c in order.iter().cycle().take(2 * order.len()) {
            if assigned >= n_train {
                break;
            }
            if quotas[c].0 < classes[c].len() {
                quotas[c].0 += 1;
                assigned += 1;
            }
        }
        for (members, (q, _)) in classes.iter_mut().zip(&quotas) {
            members.shuffle(&mut rng);
            train.extend_from_slice(&members[..*q]);
        }
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        train.extend_from_slice(&idx[..n_train]);
    }
    train.sort_unstable();
    let mut in_train = vec![false; n];
    train.iter().for_each(|&i| in_train[i] = true);
    let test = (0..n).filter(|&i| !in_train[i]).collect();
    Ok(Split { train, test })
}
