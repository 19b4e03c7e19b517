//! Schemas, subject records, normalization, splitting and synthetic cohorts.

pub mod normalize;
pub mod record;
pub mod schema;
pub mod split;
pub mod synthetic;

pub use normalize::{normalize, normalize_dataset, zscore};
pub use record::{Dataset, NormalizedDataset, NormalizedRecord, Sex, SubjectRecord};
pub use schema::{Measure, MeasureKind, MeasureSchema, Modality, Normalization};
pub use split::{split, Split, SplitSpec};
pub use synthetic::{generate_synthetic, InteractionSpec, SignalSpec, SyntheticSpec};
