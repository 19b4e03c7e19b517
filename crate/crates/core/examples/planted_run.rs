//! Trains the full model with default settings on a planted-signal dataset
//! and prints test accuracy and importance means.
//!
//! Usage: `planted_run [n_subjects] [seed]`

use std::time::Instant;

use imamoe::data::{
    generate_synthetic, normalize_dataset, split, MeasureSchema, NormalizedRecord, SplitSpec,
    SyntheticSpec,
};
use imamoe::model::{build_model, ModelConfig};
use imamoe::train::{train, TrainConfig, TrainState};

fn main() -> imamoe::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args
        .next()
        .map_or(1000, |s| s.parse().expect("subject count"));
    let seed: u64 = args.next().map_or(7, |s| s.parse().expect("seed"));
    let schema = MeasureSchema::builtin("desk-8")?;
    let spec = SyntheticSpec::new(n, seed)
        .with_signal("hormones", 3.0, false)
        .with_signal("nback_tfmri", 3.0, false);
    println!(
        "bayes accuracy {:.4}",
        spec.bayes_accuracy(&schema, 200_000, 1)?
    );
    let ds = normalize_dataset(&generate_synthetic(&spec, &schema)?)?;
    let labels: Vec<u8> = ds.records.iter().map(|r| r.label).collect();
    let parts = split(&labels, &SplitSpec::default())?;
    let (tr, te) = (ds.subset(&parts.train), ds.subset(&parts.test));
    let mut model = build_model(&ModelConfig::default(), &schema)?;
    let cfg = TrainConfig::default();
    let mut state = TrainState::new(&model, &cfg);
    let start = Instant::now();
    let probe: Vec<&NormalizedRecord> = te.records.iter().collect();
    train(&mut model, &tr, &cfg, &mut state, |log, m| {
        let traces = m.traces(&probe)?;
        let mut mean = vec![0.0; schema.token_count()];
        for t in &traces {
            for (acc, p) in mean
                .iter_mut()
                .zip(&t.tokens.as_ref().expect("token model").pi)
            {
                *acc += p / traces.len() as f64;
            }
        }
        let pis: Vec<String> = mean.iter().map(|v| format!("{v:.4}")).collect();
        println!(
            "epoch {} loss {:.4} lr {:.2e} {:.1}s pi [{}]",
            log.epoch,
            log.mean_loss,
            log.lr,
            log.wall_time_s,
            pis.join(" ")
        );
        Ok(())
    })?;
    let refs: Vec<&NormalizedRecord> = te.records.iter().collect();
    let traces = model.traces(&refs)?;
    let correct = traces
        .iter()
        .zip(&refs)
        .filter(|(t, r)| u8::from(t.probability >= 0.5) == r.label)
        .count();
    println!(
        "test accuracy {:.4} ({correct}/{}) in {:.1}s",
        correct as f64 / refs.len() as f64,
        refs.len(),
        start.elapsed().as_secs_f64()
    );
    let mut mean = vec![0.0; schema.token_count()];
    for t in &traces {
        for (m, p) in mean
            .iter_mut()
            .zip(&t.tokens.as_ref().expect("token model").pi)
        {
            *m += p / traces.len() as f64;
        }
    }
    for (name, m) in schema.token_names().iter().zip(mean) {
        println!("{name:>20} {m:.4}");
    }
    Ok(())
}
