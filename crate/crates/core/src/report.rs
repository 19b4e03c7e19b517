//! Importance aggregation, expert load and the report files.
//!
//! Files written by [`write_evaluation`]:
//! - `metrics.json`: metric rows with confusion counts
//! - `predictions.csv`: id, sex, label, probability, predicted, then `pi_<token>`
//! - `importance.csv`: token, group, mean_pi, baseline, female_minus_male
//! - `sex_differences.csv`: tokens ranked by |female − male|
//! - `expert_load.csv`: token, expert, mean gate mass
//!
//! Every value is formatted with the shortest round-trip representation, so
//! identical inputs give byte-identical files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::data::Sex;
use crate::error::{Error, Result};
use crate::metrics::{Evaluation, MetricRow, Prediction};

/// Mean pooling weight per token for one group of subjects.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImportanceGroup {
    pub group: String,
    pub n: usize,
    pub mean_pi: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImportanceReport {
    pub tokens: Vec<String>,
    /// `1/T`, the weight every token gets at initialization.
    pub baseline: f64,
    /// `all`, then `male` and `female` when non-empty.
    pub groups: Vec<ImportanceGroup>,
    /// Female mean minus male mean per token, when both strata exist.
    pub female_minus_male: Option<Vec<f64>>,
}

fn column_means(rows: &[&[f64]], width: usize) -> Vec<f64> {
    let mut mean = vec![0.0; width];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    let n = rows.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

impl ImportanceReport {
    /// Aggregates per-subject `π` vectors. Subjects of unknown sex count
    /// towards `all` only.
    pub fn new(tokens: Vec<String>, subjects: &[(Sex, &[f64])]) -> Result<Self> {
        let t = tokens.len();
        if t == 0 {
            return Err(Error::Config(
                "importance report needs at least one token".into(),
            ));
        }
        if let Some((_, bad)) = subjects.iter().find(|(_, pi)| pi.len() != t) {
            return Err(Error::Data(format!(
                "importance vector has {} entries, expected {t}",
                bad.len()
            )));
        }
        let mut groups = Vec::new();
        for (name, keep) in [
            ("all", None),
            ("male", Some(Sex::Male)),
            ("female", Some(Sex::Female)),
        ] {
            let rows: Vec<&[f64]> = subjects
                .iter()
                .filter(|(s, _)| keep.is_none_or(|k| *s == k))
                .map(|(_, pi)| *pi)
                .collect();
            if rows.is_empty() {
                log::warn!("no subjects in importance group {name}; omitted");
                continue;
            }
            groups.push(ImportanceGroup {
                group: name.into(),
                n: rows.len(),
                mean_pi: column_means(&rows, t),
            });
        }
        let find = |g: &str| groups.iter().find(|x| x.group == g).map(|x| &x.mean_pi);
        let female_minus_male = match (find("female"), find("male")) {
            (Some(f), Some(m)) => Some(f.iter().zip(m).map(|(a, b)| a - b).collect()),
            _ => None,
        };
        Ok(Self {
            tokens,
            baseline: 1.0 / t as f64,
            groups,
            female_minus_male,
        })
    }

    pub fn from_predictions(
        tokens: Vec<String>,
        predictions: &[Prediction],
    ) -> Result<Option<Self>> {
        let subjects: Option<Vec<(Sex, &[f64])>> = predictions
            .iter()
            .map(|p| p.pi.as_deref().map(|pi| (p.sex, pi)))
            .collect();
        match subjects {
            Some(s) if !s.is_empty() => Self::new(tokens, &s).map(Some),
            _ => Ok(None),
        }
    }

    pub fn group(&self, name: &str) -> Option<&ImportanceGroup> {
        self.groups.iter().find(|g| g.group == name)
    }

    /// Token indices of group `name` ordered by mean `π`, largest first.
    pub fn ranking(&self, name: &str) -> Option<Vec<usize>> {
        let g = self.group(name)?;
        let mut idx: Vec<usize> = (0..self.tokens.len()).collect();
        idx.sort_by(|&a, &b| g.mean_pi[b].total_cmp(&g.mean_pi[a]).then(a.cmp(&b)));
        Some(idx)
    }

    /// `(token, female − male)` sorted by magnitude, largest first.
    pub fn sorted_differences(&self) -> Vec<(String, f64)> {
        let Some(diff) = &self.female_minus_male else {
            return Vec::new();
        };
        let mut rows: Vec<(usize, f64)> = diff.iter().copied().enumerate().collect();
        rows.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
        rows.into_iter()
            .map(|(i, d)| (self.tokens[i].clone(), d))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["token", "group", "mean_pi", "baseline", "female_minus_male"])
            .map_err(|e| csv_err(path, e))?;
        for g in &self.groups {
            for (i, tok) in self.tokens.iter().enumerate() {
                let diff = self
                    .female_minus_male
                    .as_ref()
                    .map_or(String::new(), |d| d[i].to_string());
                w.write_record([
                    tok.as_str(),
                    g.group.as_str(),
                    &g.mean_pi[i].to_string(),
                    &self.baseline.to_string(),
                    &diff,
                ])
                .map_err(|e| csv_err(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_differences_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["rank", "token", "female_minus_male"])
            .map_err(|e| csv_err(path, e))?;
        for (rank, (tok, d)) in self.sorted_differences().iter().enumerate() {
            w.write_record([&(rank + 1).to_string(), tok, &d.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Mean gate mass per token and expert, `[T][E]`, over subjects that carry
/// gate rows. `None` when no subject does.
pub fn expert_load(predictions: &[Prediction]) -> Option<Vec<Vec<f64>>> {
    let gates: Vec<&Vec<Vec<f64>>> = predictions
        .iter()
        .filter_map(|p| p.gates.as_ref())
        .collect();
    let first = gates.first()?;
    let (t, e) = (first.len(), first.first().map_or(0, Vec::len));
    let mut load = vec![vec![0.0; e]; t];
    for g in &gates {
        for (row, gr) in load.iter_mut().zip(g.iter()) {
            for (l, v) in row.iter_mut().zip(gr) {
                *l += v;
            }
        }
    }
    let n = gates.len() as f64;
    load.iter_mut().flatten().for_each(|l| *l /= n);
    Some(load)
}

pub fn write_expert_load_csv(path: &Path, tokens: &[String], load: &[Vec<f64>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["token", "expert", "mean_gate"])
        .map_err(|e| csv_err(path, e))?;
    for (tok, row) in tokens.iter().zip(load) {
        for (e, v) in row.iter().enumerate() {
            w.write_record([tok.as_str(), &e.to_string(), &v.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_predictions_csv(
    path: &Path,
    tokens: &[String],
    predictions: &[Prediction],
) -> Result<()> {
    let mut w = csv_writer(path)?;
    let with_pi = predictions.iter().all(|p| p.pi.is_some()) && !predictions.is_empty();
    let mut header: Vec<String> = ["id", "sex", "label", "probability", "predicted"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    if with_pi {
        header.extend(tokens.iter().map(|t| format!("pi_{t}")));
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for p in predictions {
        let mut row = vec![
            p.id.clone(),
            p.sex.to_string(),
            p.label.to_string(),
            p.probability.to_string(),
            p.predicted.to_string(),
        ];
        if with_pi {
            row.extend(p.pi.iter().flatten().map(f64::to_string));
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    header: &'a ReportHeader,
    threshold: f64,
    rows: &'a [MetricRow],
    omitted: Vec<&'static str>,
}

/// Context written at the top of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportHeader {
    pub variant: String,
    pub schema: String,
    pub schema_fingerprint: String,
    pub subset: String,
    pub subjects: usize,
    pub note: String,
}

pub fn write_metrics_json(path: &Path, header: &ReportHeader, eval: &Evaluation) -> Result<()> {
    let file = MetricsFile {
        header,
        threshold: crate::metrics::THRESHOLD,
        rows: &eval.rows,
        omitted: eval.omitted.iter().map(|g| g.as_str()).collect(),
    };
    write_json(path, &file)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes every report file for `eval` into `dir`.
pub fn write_evaluation(
    dir: &Path,
    tokens: &[String],
    header: &ReportHeader,
    eval: &Evaluation,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_metrics_json(&dir.join("metrics.json"), header, eval)?;
    write_predictions_csv(&dir.join("predictions.csv"), tokens, &eval.predictions)?;
    if let Some(report) = ImportanceReport::from_predictions(tokens.to_vec(), &eval.predictions)? {
        report.write_csv(&dir.join("importance.csv"))?;
        report.write_differences_csv(&dir.join("sex_differences.csv"))?;
    }
    if let Some(load) = expert_load(&eval.predictions) {
        write_expert_load_csv(&dir.join("expert_load.csv"), tokens, &load)?;
    }
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(t: usize) -> Vec<String> {
        (0..t).map(|i| format!("m{i}")).collect()
    }

    #[test]
    fn uniform_weights_sit_on_baseline() {
        let pi = [0.25; 4];
        let subjects = [(Sex::Male, &pi[..]), (Sex::Female, &pi[..])];
        let r = ImportanceReport::new(names(4), &subjects).unwrap();
        assert_eq!(r.baseline, 0.25);
        for g in &r.groups {
            assert_eq!(g.mean_pi, vec![0.25; 4]);
        }
        assert_eq!(r.female_minus_male, Some(vec![0.0; 4]));
    }

    #[test]
    fn one_hot_subjects_average() {
        let (a, b) = ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        let r = ImportanceReport::new(names(3), &[(Sex::Unknown, &a[..]), (Sex::Unknown, &b[..])])
            .unwrap();
        assert_eq!(r.groups.len(), 1);
        assert_eq!(r.group("all").unwrap().mean_pi, vec![0.5, 0.5, 0.0]);
        assert!(r.female_minus_male.is_none());
        assert_eq!(r.ranking("all").unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn differences_sorted_by_magnitude() {
        let (f, m) = ([0.2, 0.5, 0.3], [0.3, 0.2, 0.5]);
        let r =
            ImportanceReport::new(names(3), &[(Sex::Female, &f[..]), (Sex::Male, &m[..])]).unwrap();
        let d = r.sorted_differences();
        assert_eq!(d[0].0, "m1");
        assert_eq!(d[1].0, "m2");
        assert!(d[1].1 < 0.0);
    }

    #[test]
    fn importance_csv_has_t_rows_per_group() {
        let dir = tempfile::tempdir().unwrap();
        let (f, m) = ([0.2, 0.5, 0.3], [0.3, 0.2, 0.5]);
        let r =
            ImportanceReport::new(names(3), &[(Sex::Female, &f[..]), (Sex::Male, &m[..])]).unwrap();
        let path = dir.path().join("importance.csv");
        r.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 3);
        assert!(text.starts_with("token,group,mean_pi,baseline,female_minus_male\n"));
    }

    #[test]
    fn mismatched_vector_is_data_error() {
        let pi = [0.5, 0.5];
        assert!(matches!(
            ImportanceReport::new(names(3), &[(Sex::Male, &pi[..])]),
            Err(Error::Data(_))
        ));
    }

    proptest! {
        #[test]
        fn group_means_sum_to_one(raw in proptest::collection::vec((any::<bool>(), proptest::collection::vec(0.01f64..5.0, 6)), 1..30)) {
            let pis: Vec<(Sex, Vec<f64>)> = raw
                .into_iter()
                .map(|(f, w)| {
                    let s: f64 = w.iter().sum();
                    (if f { Sex::Female } else { Sex::Male }, w.iter().map(|x| x / s).collect())
                })
                .collect();
            let refs: Vec<(Sex, &[f64])> = pis.iter().map(|(s, p)| (*s, p.as_slice())).collect();
            let r = ImportanceReport::new(names(6), &refs).unwrap();
            for g in &r.groups {
                prop_assert!((g.mean_pi.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
