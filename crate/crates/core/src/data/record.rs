use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::schema::MeasureSchema;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female,
    Male,
    Unknown,
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::Female => "female",
            Sex::Male => "male",
            Sex::Unknown => "unknown",
        })
    }
}

impl FromStr for Sex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "female" | "f" => Ok(Sex::Female),
            "male" | "m" => Ok(Sex::Male),
            "unknown" | "" => Ok(Sex::Unknown),
            other => Err(Error::Data(format!("unrecognized sex value {other:?}"))),
        }
    }
}

/// One participant's raw values, aligned with a schema. `None` marks a
/// missing element.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub sex: Sex,
    /// 0 = control, 1 = case.
    pub label: u8,
    pub values: Vec<Vec<Option<f64>>>,
}

/// A record after normalization and zero-imputation.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedRecord {
    pub id: String,
    pub sex: Sex,
    pub label: u8,
    pub values: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: MeasureSchema,
    pub records: Vec<SubjectRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedDataset {
    pub schema: MeasureSchema,
    pub records: Vec<NormalizedRecord>,
}

impl NormalizedDataset {
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            schema: self.schema.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl SubjectRecord {
    /// Checks the record against `schema`, naming the first offending measure.
    pub fn check(&self, schema: &MeasureSchema) -> Result<()> {
        if self.label > 1 {
            return Err(Error::Data(format!(
                "subject {}: label must be 0 or 1, got {}",
                self.id, self.label
            )));
        }
        if self.values.len() != schema.token_count() {
            let missing = schema
                .measures()
                .get(self.values.len())
                .map_or("<extra>", |m| m.name.as_str());
            return Err(Error::Schema(format!(
                "subject {}: expected {} measures, got {} (first mismatch: {missing})",
                self.id,
                schema.token_count(),
                self.values.len()
            )));
        }
        for (m, v) in schema.measures().iter().zip(&self.values) {
            if v.len() != m.len() {
                return Err(Error::Schema(format!(
                    "subject {}: measure {} has {} values, schema declares {}",
                    self.id,
                    m.name,
                    v.len(),
                    m.len()
                )));
            }
        }
        Ok(())
    }
}

fn parse_label(s: &str, id: &str) -> Result<u8> {
    match s.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::Data(format!(
            "subject {id}: label must be 0 or 1, got {other:?}"
        ))),
    }
}

impl Dataset {
    pub fn new(schema: MeasureSchema, records: Vec<SubjectRecord>) -> Result<Self> {
        for r in &records {
            r.check(&schema)?;
        }
        Ok(Self { schema, records })
    }

    /// Keeps the measures of `target` (looked up by name) in `target`'s
    /// order. Every target measure must exist here with the same shape.
    pub fn project(&self, target: &MeasureSchema) -> Result<Self> {
        let mut picks = Vec::with_capacity(target.token_count());
        for m in target.measures() {
            let i = self.schema.index_of(&m.name).ok_or_else(|| {
                Error::Schema(format!(
                    "measure {} is not in schema {}",
                    m.name,
                    self.schema.name()
                ))
            })?;
            if self.schema.measures()[i].kind != m.kind {
                return Err(Error::Schema(format!(
                    "measure {} has a different shape in schema {}",
                    m.name,
                    self.schema.name()
                )));
            }
            picks.push(i);
        }
        let records = self
            .records
            .iter()
            .map(|r| SubjectRecord {
                values: picks.iter().map(|&i| r.values[i].clone()).collect(),
                ..r.clone()
            })
            .collect();
        Self::new(target.clone(), records)
    }

    /// Parses a subjects CSV: `id,sex,label` followed by every schema column;
    /// an empty field is a missing value.
    pub fn read_csv(schema: MeasureSchema, path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(schema, file)
    }

    pub fn from_reader(schema: MeasureSchema, reader: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| Error::Data(format!("cannot read subjects header: {e}")))?
            .clone();
        let mut expected = vec!["id".to_string(), "sex".into(), "label".into()];
        expected.extend(schema.columns());
        if header.len() != expected.len() || header.iter().zip(&expected).any(|(a, b)| a != b) {
            let first_bad = header
                .iter()
                .zip(&expected)
                .position(|(a, b)| a != b)
                .unwrap_or(header.len().min(expected.len()));
            return Err(Error::Schema(format!(
                "subjects header does not match schema {}: column {first_bad} is {:?}, expected {:?} ({} columns vs {})",
                schema.name(),
                header.get(first_bad).unwrap_or("<none>"),
                expected.get(first_bad).map_or("<none>", String::as_str),
                header.len(),
                expected.len()
            )));
        }
        let mut records = Vec::new();
        for (line, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| Error::Data(format!("subjects row {}: {e}", line + 2)))?;
            let id = row[0].to_string();
            let sex: Sex = row[1].parse()?;
            let label = parse_label(&row[2], &id)?;
            let mut col = 3;
            let mut values = Vec::with_capacity(schema.token_count());
            for m in schema.measures() {
                let mut v = Vec::with_capacity(m.len());
                for _ in 0..m.len() {
                    let field = row[col].trim();
                    col += 1;
                    if field.is_empty() {
                        v.push(None);
                    } else {
                        let x: f64 = field.parse().map_err(|_| {
                            Error::Data(format!(
                                "subject {id}: measure {} has non-numeric value {field:?}",
                                m.name
                            ))
                        })?;
                        if !x.is_finite() {
                            return Err(Error::Data(format!(
                                "subject {id}: measure {} has non-finite value",
                                m.name
                            )));
                        }
                        v.push(Some(x));
                    }
                }
                values.push(v);
            }
            records.push(SubjectRecord {
                id,
                sex,
                label,
                values,
            });
        }
        Self::new(schema, records)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.to_writer(std::io::BufWriter::new(file))
            .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
    }

    pub fn to_writer(&self, writer: impl std::io::Write) -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string(), "sex".into(), "label".into()];
        header.extend(self.schema.columns());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.id.clone(), r.sex.to_string(), r.label.to_string()];
            for v in r.values.iter().flatten() {
                row.push(v.map_or_else(String::new, |x| x.to_string()));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::schema::{Measure, Normalization};

    fn schema() -> MeasureSchema {
        MeasureSchema::new(
            "t",
            vec![
                Measure::vector("v", 2, Normalization::Zscore),
                Measure::scalar("s", Normalization::None),
            ],
        )
        .unwrap()
    }

    #[test]
    fn projection_keeps_named_measures_in_target_order() {
        let ds = Dataset::new(
            schema(),
            vec![SubjectRecord {
                id: "a".into(),
                sex: Sex::Male,
                label: 0,
                values: vec![vec![Some(1.0), Some(2.0)], vec![Some(3.0)]],
            }],
        )
        .unwrap();
        let only_s =
            MeasureSchema::new("s", vec![Measure::scalar("s", Normalization::None)]).unwrap();
        let p = ds.project(&only_s).unwrap();
        assert_eq!(p.records[0].values, vec![vec![Some(3.0)]]);
        let wrong =
            MeasureSchema::new("w", vec![Measure::vector("s", 2, Normalization::None)]).unwrap();
        assert!(matches!(ds.project(&wrong), Err(Error::Schema(_))));
        let absent =
            MeasureSchema::new("x", vec![Measure::scalar("x", Normalization::None)]).unwrap();
        assert!(matches!(ds.project(&absent), Err(Error::Schema(_))));
    }

    #[test]
    fn csv_round_trip_with_missing_values() {
        let ds = Dataset::new(
            schema(),
            vec![
                SubjectRecord {
                    id: "a".into(),
                    sex: Sex::Female,
                    label: 1,
                    values: vec![vec![Some(0.1), None], vec![Some(-3.5)]],
                },
                SubjectRecord {
                    id: "b".into(),
                    sex: Sex::Unknown,
                    label: 0,
                    values: vec![vec![Some(1e-300), Some(2.0)], vec![None]],
                },
            ],
        )
        .unwrap();
        let mut buf = Vec::new();
        ds.to_writer(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("id,sex,label,v.0,v.1,s\n"));
        let back = Dataset::from_reader(schema(), buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn header_mismatch_names_the_column() {
        let text = "id,sex,label,v.0,w.1,s\nx,male,0,1,2,3\n";
        let err = Dataset::from_reader(schema(), text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
        assert!(err.to_string().contains("w.1"));
    }

    #[test]
    fn bad_label_and_values_are_data_errors() {
        let text = "id,sex,label,v.0,v.1,s\nx,male,2,1,2,3\n";
        assert!(matches!(
            Dataset::from_reader(schema(), text.as_bytes()),
            Err(Error::Data(_))
        ));
        let text = "id,sex,label,v.0,v.1,s\nx,male,1,abc,2,3\n";
        assert!(matches!(
            Dataset::from_reader(schema(), text.as_bytes()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn record_check_names_measure() {
        let r = SubjectRecord {
            id: "q".into(),
            sex: Sex::Male,
            label: 0,
            values: vec![vec![Some(1.0)], vec![Some(1.0)]],
        };
        let err = r.check(&schema()).unwrap_err();
        assert!(err.to_string().contains("measure v"));
    }
}
