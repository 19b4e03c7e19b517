//! `imamoe`: generate synthetic data, train, evaluate, run ablations and
//! check gradients.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data, schema,
//! checkpoint or i/o error, 3 numeric failure (including a failed gradient
//! check).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use imamoe::commands::{
    cmd_ablate, cmd_eval, cmd_generate, cmd_gradcheck, cmd_train, DataSource, EvalRun, Subset,
    TrainRun,
};
use imamoe::data::{Modality, SplitSpec, SyntheticSpec};
use imamoe::gradcheck::GradcheckConfig;
use imamoe::metrics::{Evaluation, MetricRow};
use imamoe::train::TrainConfig;
use imamoe::{Error, ModelConfig, Variant};

#[derive(Parser, Debug)]
#[command(
    name = "imamoe",
    version,
    about = "Modality-aware mixture-of-experts for multimodal tabular data"
)]
struct Cli {
    /// Directory for artifacts when a command is not given `--out`.
    #[arg(
        long,
        global = true,
        env = "IMAMOE_OUT_DIR",
        default_value = "imamoe-out"
    )]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a synthetic dataset from a spec file.
    Generate(GenerateArgs),
    /// Split, train, checkpoint and evaluate on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write the report files.
    Eval(EvalArgs),
    /// Train and evaluate every ablation variant with shared seeds.
    Ablate(TrainArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Synthetic spec (TOML).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the spec's subject count.
    #[arg(long)]
    subjects: Option<usize>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Subjects CSV.
    #[arg(long)]
    data: PathBuf,
    /// Schema: `builtin:<name>` or a path. Defaults to schema.toml next to
    /// the subjects file.
    #[arg(long)]
    schema: Option<String>,
}

impl DataArgs {
    fn source(&self) -> DataSource {
        DataSource {
            subjects: self.data.clone(),
            schema: self.schema.clone(),
        }
    }
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, default_value_t = 128)]
    d: usize,
    /// Cross-modal transformer layers.
    #[arg(long, default_value_t = 3)]
    layers: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    experts: usize,
    /// Gate softmax temperature.
    #[arg(long, default_value_t = 1.0)]
    tau_e: f64,
    /// Importance softmax temperature.
    #[arg(long, default_value_t = 1.0)]
    tau_p: f64,
    /// Transformer layers inside each vector-measure encoder.
    #[arg(long, default_value_t = 1)]
    intra_layers: usize,
    #[arg(long, default_value_t = 1)]
    intra_heads: usize,
    /// full, token_avg, token_moe_tim, token_trans_tim, token_trans_avg or flat_mlp.
    #[arg(long, default_value = "full")]
    variant: Variant,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 5)]
    warmup_epochs: usize,
    #[arg(long, default_value_t = 0.9)]
    train_fraction: f64,
    /// Keep the label ratio in both partitions.
    #[arg(long)]
    stratify: bool,
    /// Seeds initialization, shuffling and the split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep only these modalities (comma separated): structural,
    /// functional, hormonal, behavioral, demographic.
    #[arg(long, value_delimiter = ',')]
    modality_filter: Vec<Modality>,
    /// Continue an interrupted run from its checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    /// test, train or all.
    #[arg(long, default_value = "test")]
    subset: Subset,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 16)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 3)]
    experts: usize,
    #[arg(long, default_value = "full")]
    variant: Variant,
    #[arg(long, default_value_t = 4)]
    subjects: usize,
    #[arg(long, default_value_t = 32)]
    max_per_group: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write gradcheck.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl TrainArgs {
    fn run(&self, out: PathBuf) -> TrainRun {
        let m = &self.model;
        TrainRun {
            data: self.data.source(),
            out_dir: out,
            model: ModelConfig {
                d: m.d,
                layers: m.layers,
                heads: m.heads,
                experts: m.experts,
                tau_e: m.tau_e,
                tau_p: m.tau_p,
                intra_layers: m.intra_layers,
                intra_heads: m.intra_heads,
                variant: m.variant,
                seed: self.seed,
            },
            train: TrainConfig {
                epochs: self.epochs,
                batch_size: self.batch_size,
                lr: self.lr,
                weight_decay: self.weight_decay,
                warmup_epochs: self.warmup_epochs,
                seed: self.seed,
            },
            split: SplitSpec {
                train_fraction: self.train_fraction,
                seed: self.seed,
                stratify: self.stratify,
            },
            modalities: self.modality_filter.clone(),
            resume: self.resume.clone(),
        }
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or("undefined".into(), |x| format!("{x:.4}"))
}

fn print_row(label: &str, r: &MetricRow) {
    let m = r.metrics;
    println!(
        "{label:<16} {:<8} {:>4} {:>9} {:>11} {:>11} {:>9}",
        r.group.as_str(),
        r.n,
        cell(m.accuracy),
        cell(m.sensitivity),
        cell(m.specificity),
        cell(m.f1)
    );
}

fn print_table(rows: &[(String, &Evaluation)]) {
    println!(
        "{:<16} {:<8} {:>4} {:>9} {:>11} {:>11} {:>9}",
        "run", "group", "n", "accuracy", "sensitivity", "specificity", "f1"
    );
    for (label, eval) in rows {
        for r in &eval.rows {
            print_row(label, r);
        }
    }
}

fn run(cli: Cli) -> imamoe::Result<ExitCode> {
    let out_or = |out: &Option<PathBuf>| out.clone().unwrap_or_else(|| cli.out_root.clone());
    match &cli.command {
        Command::Generate(a) => {
            let mut spec = SyntheticSpec::load(&a.spec)?;
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            if let Some(n) = a.subjects {
                spec.n_subjects = n;
            }
            let base = a.spec.parent().map(Path::to_path_buf);
            let out = cmd_generate(&spec, base.as_deref(), &out_or(&a.out))?;
            println!(
                "wrote {} subjects to {} (Bayes accuracy {:.4})",
                out.rows,
                out.subjects.display(),
                out.bayes_accuracy
            );
        }
        Command::Train(a) => {
            let out = cmd_train(&a.run(out_or(&a.out)))?;
            print_table(&[(out.model.config.variant.to_string(), &out.evaluation)]);
        }
        Command::Eval(a) => {
            let eval = cmd_eval(&EvalRun {
                checkpoint: a.checkpoint.clone(),
                data: a.data.source(),
                out_dir: out_or(&a.out),
                subset: a.subset,
            })?;
            print_table(&[(a.subset.as_str().to_string(), &eval)]);
        }
        Command::Ablate(a) => {
            let rows = cmd_ablate(&a.run(out_or(&a.out)))?;
            let table: Vec<(String, &Evaluation)> = rows
                .iter()
                .map(|r| (r.variant.to_string(), &r.evaluation))
                .collect();
            print_table(&table);
        }
        Command::Gradcheck(a) => {
            let cfg = GradcheckConfig {
                model: ModelConfig {
                    d: a.d,
                    layers: a.layers,
                    experts: a.experts,
                    variant: a.variant,
                    seed: a.seed,
                    ..ModelConfig::default()
                },
                subjects: a.subjects,
                max_per_group: a.max_per_group,
                tolerance: a.tolerance,
                seed: a.seed,
                ..GradcheckConfig::default()
            };
            let report = cmd_gradcheck(&cfg, a.out.as_deref())?;
            println!(
                "{:<32} {:>8} {:>8} {:>12}  result",
                "group", "entries", "checked", "max rel err"
            );
            for g in &report.groups {
                println!(
                    "{:<32} {:>8} {:>8} {:>12.3e}  {}",
                    g.group,
                    g.entries,
                    g.checked,
                    g.max_rel_error,
                    if g.passed { "pass" } else { "FAIL" }
                );
            }
            if !report.passed {
                eprintln!(
                    "gradient check failed (tolerance {:e}): {}",
                    report.tolerance,
                    report.failed_groups().join(", ")
                );
                return Ok(ExitCode::from(3));
            }
            println!("all {} groups pass", report.groups.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(e: &Error) -> ExitCode {
    ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
