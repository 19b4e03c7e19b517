//! Declarative description of the multimodal input: which measures exist, in
//! what order, how long each vector is and how it is normalized.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Structural,
    Functional,
    Hormonal,
    Behavioral,
    Demographic,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Structural,
        Modality::Functional,
        Modality::Hormonal,
        Modality::Behavioral,
        Modality::Demographic,
    ];

    /// Short table label (STR, FUN, HORM, BEH, DEMO).
    pub fn short(self) -> &'static str {
        match self {
            Modality::Structural => "STR",
            Modality::Functional => "FUN",
            Modality::Hormonal => "HORM",
            Modality::Behavioral => "BEH",
            Modality::Demographic => "DEMO",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Modality::Structural => "structural",
            Modality::Functional => "functional",
            Modality::Hormonal => "hormonal",
            Modality::Behavioral => "behavioral",
            Modality::Demographic => "demographic",
        };
        f.write_str(s)
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "structural" | "str" => Ok(Modality::Structural),
            "functional" | "fun" => Ok(Modality::Functional),
            "hormonal" | "horm" => Ok(Modality::Hormonal),
            "behavioral" | "beh" => Ok(Modality::Behavioral),
            "demographic" | "demo" => Ok(Modality::Demographic),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Normalization {
    /// Within-subject z-score across the measure's own elements.
    Zscore,
    /// Multiply by a unit-conversion factor.
    UnitRescale { factor: f64 },
    /// Affine map of `[min, max]` onto `[0, 1]`.
    Range01 { min: f64, max: f64 },
    #[default]
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MeasureKind {
    Vector { length: usize },
    Scalar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Measure {
    pub name: String,
    pub kind: MeasureKind,
    pub normalization: Normalization,
    pub modality: Option<Modality>,
}

impl Measure {
    pub fn vector(name: &str, length: usize, normalization: Normalization) -> Self {
        Self {
            name: name.to_string(),
            kind: MeasureKind::Vector { length },
            normalization,
            modality: None,
        }
    }

    pub fn scalar(name: &str, normalization: Normalization) -> Self {
        Self {
            name: name.to_string(),
            kind: MeasureKind::Scalar,
            normalization,
            modality: None,
        }
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = Some(modality);
        self
    }

    /// Number of raw values (1 for scalars).
    pub fn len(&self) -> usize {
        match self.kind {
            MeasureKind::Vector { length } => length,
            MeasureKind::Scalar => 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_vector(&self) -> bool {
        matches!(self.kind, MeasureKind::Vector { .. })
    }

    /// CSV column names for this measure.
    pub fn columns(&self) -> Vec<String> {
        match self.kind {
            MeasureKind::Scalar => vec![self.name.clone()],
            MeasureKind::Vector { length } => {
                (0..length).map(|i| format!("{}.{i}", self.name)).collect()
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum KindTag {
    Vector,
    Scalar,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MeasureEntry {
    name: String,
    kind: KindTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    length: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    modality: Option<Modality>,
    #[serde(default)]
    normalization: Normalization,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaFile {
    name: String,
    #[serde(rename = "measure", default)]
    measures: Vec<MeasureEntry>,
}

const BUILTIN_ABCD15: &str = include_str!("../../schemas/abcd-15.toml");
const BUILTIN_DESK8: &str = include_str!("../../schemas/desk-8.toml");

#[derive(Clone, Debug, PartialEq)]
pub struct MeasureSchema {
    name: String,
    measures: Vec<Measure>,
}

impl MeasureSchema {
    pub fn new(name: impl Into<String>, measures: Vec<Measure>) -> Result<Self> {
        let schema = Self {
            name: name.into(),
            measures,
        };
        schema.validate()?;
        Ok(schema)
    }

    fn validate(&self) -> Result<()> {
        if self.measures.is_empty() {
            return Err(Error::Schema(format!(
                "schema {} declares no measures",
                self.name
            )));
        }
        for (i, m) in self.measures.iter().enumerate() {
            if m.name.is_empty() || m.name.contains([',', '"', '\n']) {
                return Err(Error::Schema(format!("invalid measure name {:?}", m.name)));
            }
            if self.measures[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::Schema(format!("duplicate measure {}", m.name)));
            }
            if let MeasureKind::Vector { length: 0 } = m.kind {
                return Err(Error::Schema(format!(
                    "vector measure {} has length 0",
                    m.name
                )));
            }
            match m.normalization {
                Normalization::Zscore if !m.is_vector() => {
                    return Err(Error::Schema(format!(
                        "zscore normalization needs a vector measure, {} is scalar",
                        m.name
                    )))
                }
                Normalization::UnitRescale { factor } if !(factor.is_finite() && factor != 0.0) => {
                    return Err(Error::Schema(format!(
                        "{}: rescale factor must be finite and non-zero",
                        m.name
                    )))
                }
                Normalization::Range01 { min, max }
                    if !(min.is_finite() && max.is_finite() && max > min) =>
                {
                    return Err(Error::Schema(format!(
                        "{}: range01 needs min < max",
                        m.name
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: SchemaFile =
            toml::from_str(text).map_err(|e| Error::Schema(format!("cannot parse schema: {e}")))?;
        let measures = file
            .measures
            .into_iter()
            .map(|e| {
                let kind = match (e.kind, e.length) {
                    (KindTag::Vector, Some(length)) => MeasureKind::Vector { length },
                    (KindTag::Vector, None) => {
                        return Err(Error::Schema(format!(
                            "vector measure {} needs a length",
                            e.name
                        )))
                    }
                    (KindTag::Scalar, None | Some(1)) => MeasureKind::Scalar,
                    (KindTag::Scalar, Some(n)) => {
                        return Err(Error::Schema(format!(
                            "scalar measure {} declares length {n}",
                            e.name
                        )))
                    }
                };
                Ok(Measure {
                    name: e.name,
                    kind,
                    normalization: e.normalization,
                    modality: e.modality,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(file.name, measures)
    }

    pub fn to_toml_string(&self) -> String {
        let file = SchemaFile {
            name: self.name.clone(),
            measures: self
                .measures
                .iter()
                .map(|m| MeasureEntry {
                    name: m.name.clone(),
                    kind: if m.is_vector() {
                        KindTag::Vector
                    } else {
                        KindTag::Scalar
                    },
                    length: match m.kind {
                        MeasureKind::Vector { length } => Some(length),
                        MeasureKind::Scalar => None,
                    },
                    modality: m.modality,
                    normalization: m.normalization,
                })
                .collect(),
        };
        toml::to_string(&file).expect("schema serializes to toml")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    /// Shipped schemas: `abcd-15` (the reconstructed 15-token inventory) and
    /// `desk-8` (a small schema for synthetic runs).
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "abcd-15" => Self::from_toml_str(BUILTIN_ABCD15),
            "desk-8" => Self::from_toml_str(BUILTIN_DESK8),
            other => Err(Error::Config(format!("no builtin schema named {other:?}"))),
        }
    }

    /// Resolves `builtin:<name>` or a file path.
    pub fn resolve(spec: &str, base_dir: Option<&Path>) -> Result<Self> {
        if let Some(name) = spec.strip_prefix("builtin:") {
            return Self::builtin(name);
        }
        let path = Path::new(spec);
        let path = match base_dir {
            Some(dir) if path.is_relative() => dir.join(path),
            _ => path.to_path_buf(),
        };
        Self::load(&path)
    }

    /// SHA-256 over the canonical serialization.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn measures(&self) -> &[Measure] {
        &self.measures
    }

    pub fn token_count(&self) -> usize {
        self.measures.len()
    }

    pub fn vector_count(&self) -> usize {
        self.measures.iter().filter(|m| m.is_vector()).count()
    }

    pub fn scalar_count(&self) -> usize {
        self.token_count() - self.vector_count()
    }

    /// Total number of raw values per subject (vectors flattened).
    pub fn total_values(&self) -> usize {
        self.measures.iter().map(Measure::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.measures.iter().position(|m| m.name == name)
    }

    pub fn token_names(&self) -> Vec<String> {
        self.measures.iter().map(|m| m.name.clone()).collect()
    }

    pub fn columns(&self) -> Vec<String> {
        self.measures.iter().flat_map(Measure::columns).collect()
    }

    /// Keeps only measures whose modality is in `keep`, in original order.
    pub fn filter_modalities(&self, keep: &[Modality]) -> Result<Self> {
        let measures: Vec<Measure> = self
            .measures
            .iter()
            .filter(|m| m.modality.is_some_and(|md| keep.contains(&md)))
            .cloned()
            .collect();
        if measures.is_empty() {
            return Err(Error::Config(format!(
                "modality filter {keep:?} leaves no measures in schema {}",
                self.name
            )));
        }
        let tag: Vec<&str> = keep.iter().map(|m| m.short()).collect();
        Self::new(format!("{}[{}]", self.name, tag.join("+")), measures)
    }

    /// Same measures, reordered so that new position `i` holds old `order[i]`.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.measures.len()];
        if order.len() != self.measures.len() {
            return Err(Error::Config("reorder needs a full permutation".into()));
        }
        for &i in order {
            if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Config("reorder needs a full permutation".into()));
            }
        }
        Self::new(
            self.name.clone(),
            order.iter().map(|&i| self.measures[i].clone()).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abcd15_has_fifteen_tokens() {
        let s = MeasureSchema::builtin("abcd-15").unwrap();
        assert_eq!(s.token_count(), 15);
        assert_eq!(s.vector_count(), 10);
        assert_eq!(s.scalar_count(), 5);
        let lens: Vec<usize> = s.measures().iter().take(8).map(Measure::len).collect();
        assert_eq!(lens, vec![151, 151, 14, 42, 164, 165, 186, 3]);
    }

    #[test]
    fn toml_round_trip_preserves_schema_and_fingerprint() {
        let s = MeasureSchema::builtin("abcd-15").unwrap();
        let back = MeasureSchema::from_toml_str(&s.to_toml_string()).unwrap();
        assert_eq!(s, back);
        assert_eq!(s.fingerprint(), back.fingerprint());
        let other = MeasureSchema::builtin("desk-8").unwrap();
        assert_ne!(s.fingerprint(), other.fingerprint());
    }

    #[test]
    fn rejects_invalid_schemas() {
        let dup = vec![
            Measure::scalar("a", Normalization::None),
            Measure::scalar("a", Normalization::None),
        ];
        assert!(MeasureSchema::new("x", dup).is_err());
        assert!(
            MeasureSchema::new("x", vec![Measure::vector("v", 0, Normalization::None)]).is_err()
        );
        assert!(
            MeasureSchema::new("x", vec![Measure::scalar("s", Normalization::Zscore)]).is_err()
        );
        assert!(MeasureSchema::new(
            "x",
            vec![Measure::scalar(
                "s",
                Normalization::Range01 { min: 1.0, max: 1.0 }
            )]
        )
        .is_err());
        assert!(MeasureSchema::from_toml_str(
            "name = \"x\"\n[[measure]]\nname = \"v\"\nkind = \"vector\"\n"
        )
        .is_err());
    }

    #[test]
    fn modality_filter_keeps_order() {
        let s = MeasureSchema::builtin("abcd-15").unwrap();
        let fun = s.filter_modalities(&[Modality::Functional]).unwrap();
        assert_eq!(
            fun.token_names(),
            vec!["nback_tfmri", "mid_tfmri", "sst_tfmri"]
        );
        let demo = s.filter_modalities(&["DEMO".parse().unwrap()]).unwrap();
        assert_eq!(demo.token_count(), 5);
        assert!(demo.filter_modalities(&[Modality::Hormonal]).is_err());
    }

    #[test]
    fn reorder_validates_permutation() {
        let s = MeasureSchema::builtin("desk-8").unwrap();
        let r = s.reordered(&[7, 6, 5, 4, 3, 2, 1, 0]).unwrap();
        assert_eq!(r.measures()[0].name, "bmi_percentile");
        assert!(s.reordered(&[0, 0, 1, 2, 3, 4, 5, 6]).is_err());
    }
}
