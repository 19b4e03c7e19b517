//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `IMAMOECK`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then every parameter
//! as little-endian `f64` in store order. When the header carries optimizer
//! state, the first moments follow, then the second moments, in the same
//! order. Values are stored bit for bit, so a round trip is exact.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{MeasureSchema, SplitSpec};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamWConfig, OptimState};
use crate::train::{TrainConfig, TrainState};

const MAGIC: &[u8; 8] = b"IMAMOECK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimHeader {
    adamw: AdamWConfig,
    step: u64,
    epochs_done: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    schema: String,
    schema_fingerprint: String,
    params: Vec<ParamEntry>,
    train: Option<TrainConfig>,
    split: Option<SplitSpec>,
    optim: Option<OptimHeader>,
}

/// Everything a checkpoint holds.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainConfig>,
    pub split: Option<SplitSpec>,
    pub state: Option<TrainState>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            train: None,
            split: None,
            state: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let store = &self.model.store;
        let header = Header {
            model: self.model.config,
            schema: self.model.schema.to_toml_string(),
            schema_fingerprint: self.model.schema.fingerprint(),
            params: store
                .iter()
                .map(|(_, name, t)| ParamEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            train: self.train,
            split: self.split,
            optim: self.state.as_ref().map(|s| OptimHeader {
                adamw: s.optim.config,
                step: s.optim.step,
                epochs_done: s.epochs_done,
            }),
        };
        let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, _, t) in store.iter() {
            write_f64s(w, t.data())?;
        }
        if let Some(s) = &self.state {
            for m in &s.optim.m {
                write_f64s(w, m)?;
            }
            for v in &s.optim.v {
                write_f64s(w, v)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let io = |e: std::io::Error| {
            Error::Checkpoint(format!("truncated or unreadable checkpoint: {e}"))
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(io)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(io)?;
        let len =
            usize::try_from(u64::from_le_bytes(b8)).map_err(|_| bad("header too large".into()))?;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(io)?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| bad(format!("bad header: {e}")))?;

        let schema = MeasureSchema::from_toml_str(&header.schema)?;
        if schema.fingerprint() != header.schema_fingerprint {
            return Err(bad(
                "schema fingerprint does not match the embedded schema".into()
            ));
        }
        let mut model = Model::new(header.model, schema)?;
        if model.store.len() != header.params.len() {
            return Err(bad(format!(
                "checkpoint has {} parameter tensors, configuration builds {}",
                header.params.len(),
                model.store.len()
            )));
        }
        for (entry, (_, name, t)) in header.params.iter().zip(model.store.iter()) {
            if entry.name != name || entry.shape != t.shape() {
                return Err(bad(format!(
                    "parameter {} {:?} does not match model parameter {name} {:?}",
                    entry.name,
                    entry.shape,
                    t.shape()
                )));
            }
        }
        for t in model.store.tensors_mut() {
            read_f64s(r, t.data_mut()).map_err(io)?;
        }
        let state = match header.optim {
            Some(o) => {
                let mut optim = OptimState::new(&model.store, o.adamw);
                optim.step = o.step;
                for m in optim.m.iter_mut() {
                    read_f64s(r, m).map_err(io)?;
                }
                for v in optim.v.iter_mut() {
                    read_f64s(r, v).map_err(io)?;
                }
                Some(TrainState {
                    epochs_done: o.epochs_done,
                    optim,
                })
            }
            None => None,
        };
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(io)? != 0 {
            return Err(bad("trailing bytes after checkpoint payload".into()));
        }
        Ok(Self {
            model,
            train: header.train,
            split: header.split,
            state,
        })
    }

    /// Refuses a schema other than the one the model was trained on.
    pub fn check_schema(&self, schema: &MeasureSchema) -> Result<()> {
        let (want, got) = (self.model.schema.fingerprint(), schema.fingerprint());
        if want != got {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained on schema {} ({}), data uses schema {} ({}); \
                 measure names, order, lengths and normalization must all match",
                self.model.schema.name(),
                &want[..12],
                schema.name(),
                &got[..12]
            )));
        }
        Ok(())
    }
}

fn write_f64s(w: &mut impl Write, values: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_f64s(r: &mut impl Read, out: &mut [f64]) -> std::io::Result<()> {
    let mut buf = vec![0u8; out.len() * 8];
    r.read_exact(&mut buf)?;
    for (o, c) in out.iter_mut().zip(buf.chunks_exact(8)) {
        *o = f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, normalize_dataset, SyntheticSpec};
    use crate::model::{build_model, Variant};
    use crate::train::train;

    fn small() -> ModelConfig {
        ModelConfig {
            d: 8,
            layers: 1,
            experts: 2,
            ..ModelConfig::default()
        }
    }

    fn trained() -> (Model, TrainConfig, TrainState) {
        let schema = MeasureSchema::builtin("desk-8").unwrap();
        let spec = SyntheticSpec::new(20, 2).with_signal("hormones", 3.0, false);
        let ds = normalize_dataset(&generate_synthetic(&spec, &schema).unwrap()).unwrap();
        let mut model = build_model(&small(), &schema).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let mut st = TrainState::new(&model, &cfg);
        train(&mut model, &ds, &cfg, &mut st, |_, _| Ok(())).unwrap();
        (model, cfg, st)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, cfg, st) = trained();
        let ck = Checkpoint {
            model,
            train: Some(cfg),
            split: Some(SplitSpec::default()),
            state: Some(st),
        };
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.model.store, ck.model.store);
        assert_eq!(back.model.config, ck.model.config);
        assert_eq!(back.model.schema, ck.model.schema);
        assert_eq!(back.state, ck.state);
        assert_eq!(back.train, ck.train);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn flat_variant_round_trips() {
        let schema = MeasureSchema::builtin("desk-8").unwrap();
        let cfg = ModelConfig {
            variant: Variant::FlatMlp,
            ..small()
        };
        let ck = Checkpoint::new(build_model(&cfg, &schema).unwrap());
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.model.store, ck.model.store);
        assert!(back.state.is_none());
    }

    #[test]
    fn corrupt_files_are_checkpoint_errors() {
        let ck = Checkpoint::new(
            build_model(&small(), &MeasureSchema::builtin("desk-8").unwrap()).unwrap(),
        );
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        for broken in [
            b"NOTACKPT".to_vec(),
            bytes[..bytes.len() - 3].to_vec(),
            [bytes.clone(), vec![0]].concat(),
        ] {
            assert!(matches!(
                Checkpoint::read_from(&mut broken.as_slice()),
                Err(Error::Checkpoint(_))
            ));
        }
    }

    #[test]
    fn schema_mismatch_is_refused() {
        let schema = MeasureSchema::builtin("desk-8").unwrap();
        let ck = Checkpoint::new(build_model(&small(), &schema).unwrap());
        assert!(ck.check_schema(&schema).is_ok());
        let moved = schema.reordered(&[1, 0, 2, 3, 4, 5, 6, 7]).unwrap();
        let err = ck.check_schema(&moved).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
        assert!(err.to_string().contains("desk-8"));
    }
}
