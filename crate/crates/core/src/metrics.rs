//! Binary classification metrics with sex stratification.
//!
//! The positive class is label 1. A probability of exactly 0.5 counts as a
//! positive prediction. Metrics with a zero denominator are `None` and are
//! written as the string `"undefined"`, never as 0.

use std::fmt;

use serde::{Serialize, Serializer};

use crate::data::{NormalizedRecord, Sex};
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, Model};

pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub fp: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fn_: u64, tn: u64, fp: u64) -> Self {
        Self { tp, fn_, tn, fp }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.tn + self.fp
    }

    pub fn record(&mut self, predicted: u8, label: u8) {
        match (predicted, label) {
            (1, 1) => self.tp += 1,
            (0, 1) => self.fn_ += 1,
            (0, _) => self.tn += 1,
            _ => self.fp += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (u8, u8)>) -> Self {
        let mut c = Self::default();
        for (p, y) in pairs {
            c.record(p, y);
        }
        c
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self::new(
            self.tp + o.tp,
            self.fn_ + o.fn_,
            self.tn + o.tn,
            self.fp + o.fp,
        )
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn undefined_or<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_str("undefined"),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    #[serde(serialize_with = "undefined_or")]
    pub accuracy: Option<f64>,
    #[serde(serialize_with = "undefined_or")]
    pub sensitivity: Option<f64>,
    #[serde(serialize_with = "undefined_or")]
    pub specificity: Option<f64>,
    #[serde(serialize_with = "undefined_or")]
    pub f1: Option<f64>,
}

/// Accuracy `(TP+TN)/n`, sensitivity `TP/(TP+FN)`, specificity
/// `TN/(TN+FP)`, F1 `2TP/(2TP+FP+FN)`.
pub fn compute_metrics(c: &ConfusionCounts) -> Metrics {
    Metrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Overall,
    Male,
    Female,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Overall => "overall",
            Group::Male => "male",
            Group::Female => "female",
        }
    }

    fn contains(self, sex: Sex) -> bool {
        match self {
            Group::Overall => true,
            Group::Male => sex == Sex::Male,
            Group::Female => sex == Sex::Female,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub group: Group,
    pub n: u64,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub counts: ConfusionCounts,
}

impl MetricRow {
    pub fn new(group: Group, counts: ConfusionCounts) -> Self {
        Self {
            group,
            n: counts.total(),
            metrics: compute_metrics(&counts),
            counts,
        }
    }
}

/// One subject's evaluation output.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub sex: Sex,
    pub label: u8,
    pub probability: f64,
    pub predicted: u8,
    /// Pooling weights, present for token-based variants.
    pub pi: Option<Vec<f64>>,
    /// `[T][E]` gate rows, present for variants with experts.
    pub gates: Option<Vec<Vec<f64>>>,
}

impl Prediction {
    pub fn from_trace(record: &NormalizedRecord, trace: ForwardTrace) -> Self {
        let (pi, gates) = match trace.tokens {
            Some(t) => (Some(t.pi), t.gates),
            None => (None, None),
        };
        Self {
            id: record.id.clone(),
            sex: record.sex,
            label: record.label,
            probability: trace.probability,
            predicted: u8::from(trace.probability >= THRESHOLD),
            pi,
            gates,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Overall first, then male and female when non-empty.
    pub rows: Vec<MetricRow>,
    /// Strata skipped because they had no subjects.
    pub omitted: Vec<Group>,
    pub predictions: Vec<Prediction>,
}

impl Evaluation {
    pub fn row(&self, group: Group) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.group == group)
    }

    pub fn accuracy(&self) -> Option<f64> {
        self.row(Group::Overall).and_then(|r| r.metrics.accuracy)
    }
}

/// Overall, male and female rows from a set of predictions. Empty strata
/// are omitted and logged.
pub fn stratified_rows(predictions: &[Prediction]) -> (Vec<MetricRow>, Vec<Group>) {
    let mut rows = Vec::new();
    let mut omitted = Vec::new();
    for group in [Group::Overall, Group::Male, Group::Female] {
        let counts = ConfusionCounts::from_pairs(
            predictions
                .iter()
                .filter(|p| group.contains(p.sex))
                .map(|p| (p.predicted, p.label)),
        );
        if counts.total() == 0 {
            log::warn!("no {group} subjects in the evaluation set; stratum omitted");
            omitted.push(group);
        } else {
            rows.push(MetricRow::new(group, counts));
        }
    }
    (rows, omitted)
}

/// Evaluates `records` in chunks of `chunk` subjects.
pub fn evaluate(model: &Model, records: &[NormalizedRecord], chunk: usize) -> Result<Evaluation> {
    if records.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut predictions = Vec::with_capacity(records.len());
    for part in records.chunks(chunk.max(1)) {
        let refs: Vec<&NormalizedRecord> = part.iter().collect();
        for (r, t) in part.iter().zip(model.traces(&refs)?) {
            predictions.push(Prediction::from_trace(r, t));
        }
    }
    let (rows, omitted) = stratified_rows(&predictions);
    Ok(Evaluation {
        rows,
        omitted,
        predictions,
    })
}
