//! End-to-end commands: generate, train, eval, ablate and gradcheck.
//!
//! Each command reads its inputs, writes its artifacts into an output
//! directory and returns the in-memory results. Apart from the wall-clock
//! field of `train_log.jsonl`, every artifact is a pure function of the
//! inputs and seeds.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::data::{
    generate_synthetic, normalize_dataset, split, Dataset, MeasureSchema, Modality,
    NormalizedDataset, SplitSpec, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, GradcheckConfig, GradcheckReport};
use crate::metrics::{evaluate, Evaluation, Metrics};
use crate::model::{build_model, Model, ModelConfig, Variant};
use crate::report::{write_evaluation, write_json, ReportHeader};
use crate::train::{train, EpochLog, TrainConfig, TrainState};

/// Subjects evaluated per forward pass.
pub const EVAL_CHUNK: usize = 64;

/// Written into every metrics header.
pub const DEFAULTS_NOTE: &str =
    "all variants and modality subsets use the same default hyperparameters; none are re-tuned per run";

/// A subjects file and the schema that describes its columns.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSource {
    pub subjects: PathBuf,
    /// `builtin:<name>` or a schema path. Defaults to `schema.toml` next to
    /// the subjects file.
    pub schema: Option<String>,
}

impl DataSource {
    pub fn new(subjects: impl Into<PathBuf>) -> Self {
        Self {
            subjects: subjects.into(),
            schema: None,
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        let schema = match &self.schema {
            Some(spec) => MeasureSchema::resolve(spec, None)?,
            None => {
                let path = self
                    .subjects
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join("schema.toml");
                if !path.exists() {
                    return Err(Error::Config(format!(
                        "no schema given and {} does not exist",
                        path.display()
                    )));
                }
                MeasureSchema::load(&path)?
            }
        };
        Dataset::read_csv(schema, &self.subjects)
    }
}

/// Which subjects an evaluation covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    #[default]
    Test,
    Train,
    All,
}

impl Subset {
    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Test => "test",
            Subset::Train => "train",
            Subset::All => "all",
        }
    }
}

impl FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test" => Ok(Subset::Test),
            "train" => Ok(Subset::Train),
            "all" => Ok(Subset::All),
            other => Err(Error::Config(format!(
                "subset must be test, train or all, got {other:?}"
            ))),
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

// ---------------------------------------------------------------- generate

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenerateOutcome {
    pub subjects: PathBuf,
    pub schema: PathBuf,
    pub rows: usize,
    pub bayes_accuracy: f64,
}

/// Monte-Carlo draws behind the reported Bayes accuracy.
pub const BAYES_DRAWS: usize = 200_000;

/// Writes `schema.toml`, `subjects.csv`, `spec.toml` and `oracle.json` into
/// `out_dir`. Relative schema paths in `spec` resolve against `base_dir`.
pub fn cmd_generate(
    spec: &SyntheticSpec,
    base_dir: Option<&Path>,
    out_dir: &Path,
) -> Result<GenerateOutcome> {
    let schema = MeasureSchema::resolve(&spec.schema, base_dir)?;
    let data = generate_synthetic(spec, &schema)?;
    let bayes = spec.bayes_accuracy(&schema, BAYES_DRAWS, spec.seed)?;
    create_dir(out_dir)?;
    let schema_path = out_dir.join("schema.toml");
    let subjects_path = out_dir.join("subjects.csv");
    schema.save(&schema_path)?;
    data.write_csv(&subjects_path)?;
    let spec_path = out_dir.join("spec.toml");
    std::fs::write(&spec_path, spec.to_toml_string()).map_err(|e| Error::io(&spec_path, e))?;
    #[derive(Serialize)]
    struct Oracle<'a> {
        bayes_accuracy: f64,
        draws: usize,
        signal_measures: &'a [String],
    }
    write_json(
        &out_dir.join("oracle.json"),
        &Oracle {
            bayes_accuracy: bayes,
            draws: BAYES_DRAWS,
            signal_measures: &spec.signal_measures(),
        },
    )?;
    Ok(GenerateOutcome {
        subjects: subjects_path,
        schema: schema_path,
        rows: data.records.len(),
        bayes_accuracy: bayes,
    })
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub data: DataSource,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    /// Keep only tokens of these modalities; empty keeps every token.
    pub modalities: Vec<Modality>,
    /// Continue from a checkpoint written by an earlier, interrupted run.
    pub resume: Option<PathBuf>,
}

impl TrainRun {
    pub fn new(data: DataSource, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            data,
            out_dir: out_dir.into(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            modalities: Vec::new(),
            resume: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub logs: Vec<EpochLog>,
    pub evaluation: Evaluation,
    pub train_seconds: f64,
}

/// Normalized train and test partitions of a (possibly filtered) dataset.
pub struct Prepared {
    pub schema: MeasureSchema,
    pub train: NormalizedDataset,
    pub test: NormalizedDataset,
    pub all: NormalizedDataset,
}

impl Prepared {
    pub fn subset(&self, which: Subset) -> &NormalizedDataset {
        match which {
            Subset::Test => &self.test,
            Subset::Train => &self.train,
            Subset::All => &self.all,
        }
    }
}

pub fn prepare(dataset: &Dataset, modalities: &[Modality], spec: &SplitSpec) -> Result<Prepared> {
    let dataset = if modalities.is_empty() {
        dataset.clone()
    } else {
        let schema = dataset.schema.filter_modalities(modalities)?;
        dataset.project(&schema)?
    };
    partition(&dataset, spec)
}

fn partition(dataset: &Dataset, spec: &SplitSpec) -> Result<Prepared> {
    let all = normalize_dataset(dataset)?;
    let labels: Vec<u8> = all.records.iter().map(|r| r.label).collect();
    let parts = split(&labels, spec)?;
    Ok(Prepared {
        schema: all.schema.clone(),
        train: all.subset(&parts.train),
        test: all.subset(&parts.test),
        all,
    })
}

fn header(model: &Model, subset: Subset, n: usize) -> ReportHeader {
    ReportHeader {
        variant: model.config.variant.to_string(),
        schema: model.schema.name().to_string(),
        schema_fingerprint: model.schema.fingerprint(),
        subset: subset.as_str().to_string(),
        subjects: n,
        note: DEFAULTS_NOTE.to_string(),
    }
}

/// Evaluates `subset` and writes every report file into `dir`.
pub fn evaluate_into(
    model: &Model,
    data: &Prepared,
    subset: Subset,
    dir: &Path,
) -> Result<Evaluation> {
    let set = data.subset(subset);
    let eval = evaluate(model, &set.records, EVAL_CHUNK)?;
    write_evaluation(
        dir,
        &model.token_names(),
        &header(model, subset, set.len()),
        &eval,
    )?;
    Ok(eval)
}

/// Split, normalize, train, checkpoint, then evaluate on the test split.
///
/// Artifacts: `checkpoint.bin`, `train_log.jsonl` and the report files of
/// the test-split evaluation.
pub fn cmd_train(run: &TrainRun) -> Result<TrainOutcome> {
    let dataset = run.data.load()?;
    let data = prepare(&dataset, &run.modalities, &run.split)?;
    run.model.validate()?;
    run.train.schedule(data.train.len())?;
    create_dir(&run.out_dir)?;

    let (mut model, mut state) = match &run.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            ck.check_schema(&data.schema)?;
            if ck.model.config != run.model
                || ck.train != Some(run.train)
                || ck.split != Some(run.split)
            {
                return Err(Error::Config(format!(
                    "checkpoint {} was written with different model, training or split settings",
                    path.display()
                )));
            }
            let state = ck.state.ok_or_else(|| {
                Error::Checkpoint("checkpoint carries no optimizer state to resume".into())
            })?;
            (ck.model, state)
        }
        None => {
            let model = build_model(&run.model, &data.schema)?;
            let state = TrainState::new(&model, &run.train);
            (model, state)
        }
    };
    log::info!(
        "training {} on {} subjects ({} tokens, {} parameters), testing on {}",
        model.config.variant,
        data.train.len(),
        data.schema.token_count(),
        model.num_parameters(),
        data.test.len()
    );

    let log_path = run.out_dir.join("train_log.jsonl");
    let log_file = if run.resume.is_some() {
        std::fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let mut log_out = BufWriter::new(log_file);
    let start = Instant::now();
    let logs = train(
        &mut model,
        &data.train,
        &run.train,
        &mut state,
        |entry, _| {
            let line = serde_json::to_string(entry)
                .map_err(|e| Error::io(&log_path, std::io::Error::other(e)))?;
            writeln!(log_out, "{line}")
                .and_then(|()| log_out.flush())
                .map_err(|e| Error::io(&log_path, e))
        },
    )?;
    let train_seconds = start.elapsed().as_secs_f64();

    let ck = Checkpoint {
        model,
        train: Some(run.train),
        split: Some(run.split),
        state: Some(state),
    };
    ck.save(&run.out_dir.join("checkpoint.bin"))?;
    let evaluation = evaluate_into(&ck.model, &data, Subset::Test, &run.out_dir)?;
    Ok(TrainOutcome {
        model: ck.model,
        logs,
        evaluation,
        train_seconds,
    })
}

// ---------------------------------------------------------------- eval

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRun {
    pub checkpoint: PathBuf,
    pub data: DataSource,
    pub out_dir: PathBuf,
    pub subset: Subset,
}

/// Picks the checkpoint's measures out of `dataset` by name and refuses the
/// data unless each one matches the checkpoint's schema exactly.
fn align(dataset: &Dataset, ck: &Checkpoint) -> Result<Dataset> {
    let want = &ck.model.schema;
    let mut measures = Vec::with_capacity(want.token_count());
    for m in want.measures() {
        let i = dataset.schema.index_of(&m.name).ok_or_else(|| {
            Error::Checkpoint(format!(
                "checkpoint measure {} is missing from data schema {}",
                m.name,
                dataset.schema.name()
            ))
        })?;
        measures.push(dataset.schema.measures()[i].clone());
    }
    let candidate = MeasureSchema::new(want.name(), measures)?;
    ck.check_schema(&candidate)?;
    dataset.project(&candidate)
}

/// Loads a checkpoint, rebuilds its split and writes the report files for
/// `subset`. On the same data this reproduces the evaluation written at the
/// end of [`cmd_train`] byte for byte.
pub fn cmd_eval(run: &EvalRun) -> Result<Evaluation> {
    let ck = Checkpoint::load(&run.checkpoint)?;
    let dataset = align(&run.data.load()?, &ck)?;
    let spec = ck.split.unwrap_or_default();
    let data = partition(&dataset, &spec)?;
    evaluate_into(&ck.model, &data, run.subset, &run.out_dir)
}

// ---------------------------------------------------------------- ablate

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub evaluation: Evaluation,
    pub train_seconds: f64,
}

fn metric_cell(v: Option<f64>) -> String {
    v.map_or("undefined".into(), |x| x.to_string())
}

/// Trains every ablation variant with the same seeds and split into
/// `<out_dir>/<variant>/`, then writes `ablation.csv` with one row per
/// variant and group.
pub fn cmd_ablate(base: &TrainRun) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for variant in Variant::ABLATIONS {
        let run = TrainRun {
            model: ModelConfig {
                variant,
                ..base.model
            },
            out_dir: base.out_dir.join(variant.as_str()),
            resume: None,
            ..base.clone()
        };
        let out = cmd_train(&run)?;
        log::info!(
            "{variant}: test accuracy {}",
            metric_cell(out.evaluation.accuracy())
        );
        rows.push(AblationRow {
            variant,
            evaluation: out.evaluation,
            train_seconds: out.train_seconds,
        });
    }
    let path = base.out_dir.join("ablation.csv");
    let mut w =
        csv::Writer::from_path(&path).map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
    let io = |e: csv::Error| Error::io(&path, std::io::Error::other(e));
    w.write_record([
        "variant",
        "group",
        "n",
        "accuracy",
        "sensitivity",
        "specificity",
        "f1",
    ])
    .map_err(io)?;
    for r in &rows {
        for m in &r.evaluation.rows {
            let Metrics {
                accuracy,
                sensitivity,
                specificity,
                f1,
            } = m.metrics;
            w.write_record([
                r.variant.as_str().to_string(),
                m.group.to_string(),
                m.n.to_string(),
                metric_cell(accuracy),
                metric_cell(sensitivity),
                metric_cell(specificity),
                metric_cell(f1),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

// ---------------------------------------------------------------- gradcheck

/// Runs the finite-difference check; writes `gradcheck.json` when `out_dir`
/// is given.
pub fn cmd_gradcheck(cfg: &GradcheckConfig, out_dir: Option<&Path>) -> Result<GradcheckReport> {
    let report = run_gradcheck(cfg)?;
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        write_json(&dir.join("gradcheck.json"), &report)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_run(dir: &Path) -> TrainRun {
        let spec = SyntheticSpec::new(40, 3).with_signal("hormones", 3.0, false);
        let gen = cmd_generate(&spec, None, &dir.join("data")).unwrap();
        let mut run = TrainRun::new(DataSource::new(gen.subjects), dir.join("out"));
        run.model = ModelConfig {
            d: 8,
            layers: 1,
            experts: 2,
            ..ModelConfig::default()
        };
        run.train = TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        run
    }

    fn read(p: &Path) -> Vec<u8> {
        std::fs::read(p).unwrap()
    }

    #[test]
    fn generate_writes_all_files_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::new(25, 9).with_signal("nback_tfmri", 2.0, false);
        let a = cmd_generate(&spec, None, &dir.path().join("a")).unwrap();
        let b = cmd_generate(&spec, None, &dir.path().join("b")).unwrap();
        assert_eq!(a.rows, 25);
        assert_eq!(read(&a.subjects), read(&b.subjects));
        assert_eq!(read(&a.schema), read(&b.schema));
        assert_eq!(
            std::fs::read_to_string(&a.subjects)
                .unwrap()
                .lines()
                .count(),
            26
        );
        assert!(dir.path().join("a/oracle.json").exists());
    }

    #[test]
    fn eval_reproduces_training_evaluation() {
        let dir = tempfile::tempdir().unwrap();
        let run = tiny_run(dir.path());
        let out = cmd_train(&run).unwrap();
        assert_eq!(out.logs.len(), 2);
        let eval_dir = dir.path().join("eval");
        let ev = cmd_eval(&EvalRun {
            checkpoint: run.out_dir.join("checkpoint.bin"),
            data: run.data.clone(),
            out_dir: eval_dir.clone(),
            subset: Subset::Test,
        })
        .unwrap();
        assert_eq!(ev, out.evaluation);
        for f in [
            "metrics.json",
            "importance.csv",
            "expert_load.csv",
            "predictions.csv",
        ] {
            assert_eq!(read(&run.out_dir.join(f)), read(&eval_dir.join(f)), "{f}");
        }
        let importance = std::fs::read_to_string(eval_dir.join("importance.csv")).unwrap();
        let groups = ev.rows.len();
        assert_eq!(importance.lines().count(), 1 + 8 * groups);
    }

    #[test]
    fn modality_filter_restricts_tokens() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = tiny_run(dir.path());
        run.modalities = vec![Modality::Functional];
        run.train.epochs = 1;
        let out = cmd_train(&run).unwrap();
        assert_eq!(out.model.token_names(), vec!["nback_tfmri".to_string()]);
        // The filtered checkpoint evaluates against the unfiltered data file.
        cmd_eval(&EvalRun {
            checkpoint: run.out_dir.join("checkpoint.bin"),
            data: run.data.clone(),
            out_dir: dir.path().join("eval"),
            subset: Subset::All,
        })
        .unwrap();
    }

    #[test]
    fn resume_continues_to_the_same_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let full = tiny_run(dir.path());
        let whole = cmd_train(&full).unwrap();

        let mut first = tiny_run(dir.path());
        first.out_dir = dir.path().join("first");
        first.train.epochs = 1;
        // Same schedule as the full run but stop after one epoch.
        let ds = first.data.load().unwrap();
        let data = prepare(&ds, &[], &first.split).unwrap();
        let mut model = build_model(&first.model, &data.schema).unwrap();
        let mut st = TrainState::new(&model, &full.train);
        let _ = train(&mut model, &data.train, &full.train, &mut st, |log, _| {
            if log.epoch == 1 {
                Err(Error::Config("stop".into()))
            } else {
                Ok(())
            }
        });
        create_dir(&first.out_dir).unwrap();
        let ck_path = first.out_dir.join("partial.bin");
        Checkpoint {
            model,
            train: Some(full.train),
            split: Some(full.split),
            state: Some(st),
        }
        .save(&ck_path)
        .unwrap();

        let mut rest = tiny_run(dir.path());
        rest.out_dir = first.out_dir.clone();
        rest.resume = Some(ck_path);
        let resumed = cmd_train(&rest).unwrap();
        assert_eq!(resumed.logs.len(), 1);
        assert_eq!(resumed.model.store, whole.model.store);
    }

    #[test]
    fn eval_refuses_mismatched_schema() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = tiny_run(dir.path());
        run.train.epochs = 1;
        cmd_train(&run).unwrap();
        // Same columns, different normalization for one measure.
        let schema_path = dir.path().join("data/schema.toml");
        let text = std::fs::read_to_string(&schema_path).unwrap();
        let changed = text.replacen("factor = 0.01", "factor = 0.02", 1);
        assert_ne!(text, changed);
        std::fs::write(&schema_path, changed).unwrap();
        let err = cmd_eval(&EvalRun {
            checkpoint: run.out_dir.join("checkpoint.bin"),
            data: run.data.clone(),
            out_dir: dir.path().join("eval"),
            subset: Subset::Test,
        })
        .unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }
}
