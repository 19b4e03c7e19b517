//! Full model assembly and its ablation variants.
//!
//! `full`: tokens → cross-modal transformer → MoE → importance pooling →
//! classifier. The ablations drop the transformer, the MoE or the importance
//! head; `flat_mlp` ignores tokenization entirely and runs a five-layer MLP
//! on the concatenated normalized values.
//!
//! There is no positional term across measure tokens, so the logits do not
//! depend on the order in which the schema lists its measures.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{MeasureSchema, NormalizedRecord};
use crate::encoders::{IntraConfig, TokenEncoder};
use crate::error::{Error, Result};
use crate::moe::{moe_forward, GateRecord, MoEParams};
use crate::nn::{transformer_stack, LinearParams, TransformerLayerParams};
use crate::params::{Bound, Init, ParamStore};
use crate::pooling::{
    classify, cross_entropy, importance_pool, mean_pool, probability, ClassifierParams,
    ImportanceParams,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    TokenAvg,
    TokenMoeTim,
    TokenTransTim,
    TokenTransAvg,
    FlatMlp,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::TokenAvg,
        Variant::TokenMoeTim,
        Variant::TokenTransTim,
        Variant::TokenTransAvg,
        Variant::FlatMlp,
    ];

    /// The five token-based architectures compared by the ablation harness.
    pub const ABLATIONS: [Variant; 5] = [
        Variant::TokenAvg,
        Variant::TokenMoeTim,
        Variant::TokenTransTim,
        Variant::TokenTransAvg,
        Variant::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::TokenAvg => "token_avg",
            Variant::TokenMoeTim => "token_moe_tim",
            Variant::TokenTransTim => "token_trans_tim",
            Variant::TokenTransAvg => "token_trans_avg",
            Variant::FlatMlp => "flat_mlp",
        }
    }

    pub fn has_transformer(self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::TokenTransTim | Variant::TokenTransAvg
        )
    }

    pub fn has_moe(self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::TokenMoeTim | Variant::TokenTransAvg
        )
    }

    pub fn has_importance(self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::TokenMoeTim | Variant::TokenTransTim
        )
    }

    pub fn is_tokenized(self) -> bool {
        self != Variant::FlatMlp
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.trim().to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.as_str()).collect();
                Error::Config(format!(
                    "unknown variant {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub experts: usize,
    pub tau_e: f64,
    pub tau_p: f64,
    pub intra_layers: usize,
    pub intra_heads: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 128,
            layers: 3,
            heads: 1,
            experts: 4,
            tau_e: 1.0,
            tau_p: 1.0,
            intra_layers: 1,
            intra_heads: 1,
            variant: Variant::Full,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d == 0 {
            return fail("model dimension must be positive".into());
        }
        if self.experts == 0 {
            return fail("expert count must be at least 1".into());
        }
        for (name, t) in [("tau_e", self.tau_e), ("tau_p", self.tau_p)] {
            if !(t > 0.0 && t.is_finite()) {
                return fail(format!("{name} must be positive, got {t}"));
            }
        }
        for (what, h) in [("heads", self.heads), ("intra_heads", self.intra_heads)] {
            if h == 0 || !self.d.is_multiple_of(h) {
                return fail(format!("{what} = {h} does not divide d = {}", self.d));
            }
        }
        Ok(())
    }

    fn intra(&self) -> IntraConfig {
        IntraConfig {
            layers: self.intra_layers,
            heads: self.intra_heads,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenModelParams {
    pub encoder: TokenEncoder,
    pub cross: Vec<TransformerLayerParams>,
    pub moe: Option<MoEParams>,
    pub importance: Option<ImportanceParams>,
    pub classifier: ClassifierParams,
}

#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum ModelParams {
    Token(TokenModelParams),
    Flat { layers: Vec<LinearParams> },
}

pub const FLAT_LAYERS: usize = 5;

/// Widths `D = w_0 > … > w_5 = 2`, evenly spaced on a log scale.
pub fn flat_widths(input: usize) -> Vec<usize> {
    let (a, b) = (input.max(2) as f64, 2.0f64);
    let mut widths: Vec<usize> = (0..=FLAT_LAYERS)
        .map(|i| {
            let f = i as f64 / FLAT_LAYERS as f64;
            (a.powf(1.0 - f) * b.powf(f)).round().max(2.0) as usize
        })
        .collect();
    widths[0] = input;
    widths[FLAT_LAYERS] = 2;
    widths
}

/// A model: configuration, the schema it was built for, and its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub schema: MeasureSchema,
    pub store: ParamStore,
    pub params: ModelParams,
}

pub fn build_model(config: &ModelConfig, schema: &MeasureSchema) -> Result<Model> {
    Model::new(*config, schema.clone())
}

/// Tape values for each stage of a token-based forward pass over a batch.
pub struct TokenStages<'t> {
    pub z0: Var<'t>,
    pub zl: Var<'t>,
    pub u: Var<'t>,
    /// Pooling weights `[batch, T]`; constant `1/T` for mean pooling.
    pub pi: Var<'t>,
    pub pooled: Var<'t>,
    pub gates: Option<GateRecord>,
}

pub struct BatchOutput<'t> {
    pub logits: Var<'t>,
    pub stages: Option<TokenStages<'t>>,
}

/// Per-record values of every stage, detached from the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTrace {
    pub token_names: Vec<String>,
    pub z0: Tensor,
    pub zl: Tensor,
    pub u: Tensor,
    pub pi: Vec<f64>,
    pub pooled: Tensor,
    /// `[T][E]` gate rows when the variant routes through experts.
    pub gates: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub logits: [f64; 2],
    pub probability: f64,
    pub tokens: Option<TokenTrace>,
}

fn row(t: &Tensor, b: usize) -> Tensor {
    let shape = t.shape();
    let inner: usize = shape[1..].iter().product();
    Tensor::new(&shape[1..], t.data()[b * inner..(b + 1) * inner].to_vec()).expect("row shape")
}

impl Model {
    pub fn new(config: ModelConfig, schema: MeasureSchema) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let init = Init::new(config.seed);
        let d = config.d;
        let params = if config.variant.is_tokenized() {
            let encoder = TokenEncoder::init(&mut store, init, &schema, d, config.intra())?;
            let cross = if config.variant.has_transformer() {
                (0..config.layers)
                    .map(|i| {
                        TransformerLayerParams::init(
                            &mut store,
                            init,
                            &format!("cross{i}"),
                            d,
                            config.heads,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            let moe = if config.variant.has_moe() {
                Some(MoEParams::init(
                    &mut store,
                    init,
                    "moe",
                    d,
                    config.experts,
                    config.tau_e,
                )?)
            } else {
                None
            };
            let importance = if config.variant.has_importance() {
                Some(ImportanceParams::init(
                    &mut store,
                    "importance",
                    d,
                    config.tau_p,
                )?)
            } else {
                None
            };
            let classifier = ClassifierParams::init(&mut store, init, "classifier", d);
            ModelParams::Token(TokenModelParams {
                encoder,
                cross,
                moe,
                importance,
                classifier,
            })
        } else {
            let widths = flat_widths(schema.total_values());
            let layers = widths
                .windows(2)
                .enumerate()
                .map(|(i, w)| {
                    LinearParams::init(&mut store, init, &format!("flat.fc{i}"), w[0], w[1])
                })
                .collect();
            ModelParams::Flat { layers }
        };
        Ok(Self {
            config,
            schema,
            store,
            params,
        })
    }

    pub fn token_names(&self) -> Vec<String> {
        self.schema.token_names()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn forward_batch<'t>(
        &self,
        ctx: &Bound<'t, '_>,
        records: &[&NormalizedRecord],
    ) -> Result<BatchOutput<'t>> {
        if records.is_empty() {
            return Err(Error::Data("forward pass needs at least one record".into()));
        }
        match &self.params {
            ModelParams::Token(p) => {
                let z0 = p.encoder.tokenize(ctx, records)?.tokens;
                self.token_head(ctx, p, z0)
            }
            ModelParams::Flat { layers } => {
                let width = self.schema.total_values();
                let mut data = Vec::with_capacity(records.len() * width);
                for r in records {
                    let start = data.len();
                    for v in &r.values {
                        data.extend_from_slice(v);
                    }
                    if data.len() - start != width {
                        return Err(Error::Schema(format!(
                            "subject {}: {} values, schema {} declares {width}",
                            r.id,
                            data.len() - start,
                            self.schema.name()
                        )));
                    }
                }
                let mut h = ctx.input(&Tensor::new(&[records.len(), width], data)?);
                for (i, l) in layers.iter().enumerate() {
                    h = l.forward(ctx, h)?;
                    if i + 1 < layers.len() {
                        h = h.gelu()?;
                    }
                }
                Ok(BatchOutput {
                    logits: h,
                    stages: None,
                })
            }
        }
    }

    /// Everything after tokenization, from a `[batch, T, d]` token stack.
    pub fn token_head<'t>(
        &self,
        ctx: &Bound<'t, '_>,
        p: &TokenModelParams,
        z0: Var<'t>,
    ) -> Result<BatchOutput<'t>> {
        let zl = transformer_stack(ctx, z0, &p.cross)?;
        let (u, gates) = match &p.moe {
            Some(m) => {
                let (u, g) = moe_forward(ctx, zl, m)?;
                (u, Some(g))
            }
            None => (zl, None),
        };
        let (pooled, pi) = match &p.importance {
            Some(imp) => importance_pool(ctx, u, imp)?,
            None => {
                let s = u.shape();
                let pi = ctx.input(&Tensor::full(&[s[0], s[1]], 1.0 / s[1] as f64));
                (mean_pool(ctx, u)?, pi)
            }
        };
        let logits = classify(ctx, pooled, &p.classifier)?;
        Ok(BatchOutput {
            logits,
            stages: Some(TokenStages {
                z0,
                zl,
                u,
                pi,
                pooled,
                gates,
            }),
        })
    }

    /// Mean cross-entropy of a batch on a fresh binding.
    pub fn loss<'t>(&self, ctx: &Bound<'t, '_>, records: &[&NormalizedRecord]) -> Result<Var<'t>> {
        let out = self.forward_batch(ctx, records)?;
        let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
        cross_entropy(out.logits, &labels)
    }

    /// Detached per-record traces for a batch.
    pub fn traces(&self, records: &[&NormalizedRecord]) -> Result<Vec<ForwardTrace>> {
        let tape = Tape::new();
        let ctx = Bound::new(&tape, &self.store);
        let out = self.forward_batch(&ctx, records)?;
        let logits = out.logits.to_vec();
        let stages = out.stages.map(|s| {
            (
                s.z0.value(),
                s.zl.value(),
                s.u.value(),
                s.pi.to_vec(),
                s.pooled.value(),
                s.gates,
            )
        });
        let t = self.schema.token_count();
        Ok((0..records.len())
            .map(|b| {
                let l = [logits[2 * b], logits[2 * b + 1]];
                ForwardTrace {
                    logits: l,
                    probability: probability(l),
                    tokens: stages
                        .as_ref()
                        .map(|(z0, zl, u, pi, pooled, gates)| TokenTrace {
                            token_names: self.token_names(),
                            z0: row(z0, b),
                            zl: row(zl, b),
                            u: row(u, b),
                            pi: pi[b * t..(b + 1) * t].to_vec(),
                            pooled: row(pooled, b),
                            gates: gates
                                .as_ref()
                                .map(|g| (0..t).map(|tok| g.row(b, tok).to_vec()).collect()),
                        }),
                }
            })
            .collect())
    }

    pub fn forward(&self, record: &NormalizedRecord) -> Result<ForwardTrace> {
        Ok(self.traces(&[record])?.remove(0))
    }
}
