//! Modality-specific normalization followed by zero-imputation.

use super::record::{Dataset, NormalizedDataset, NormalizedRecord, SubjectRecord};
use super::schema::{MeasureSchema, Normalization};
use crate::error::Result;

/// Z-scores the present elements with the population standard deviation;
/// missing elements become 0. Fewer than two present elements, or zero
/// spread, yields all zeros.
pub fn zscore(values: &[Option<f64>]) -> Option<Vec<f64>> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.len() < 2 {
        return None;
    }
    let n = present.len() as f64;
    let mean = present.iter().sum::<f64>() / n;
    let var = present.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd == 0.0 || !sd.is_finite() {
        return None;
    }
    Some(
        values
            .iter()
            .map(|v| v.map_or(0.0, |x| (x - mean) / sd))
            .collect(),
    )
}

fn normalize_values(
    name: &str,
    rule: Normalization,
    values: &[Option<f64>],
    subject: &str,
) -> Vec<f64> {
    match rule {
        Normalization::Zscore => zscore(values).unwrap_or_else(|| {
            log::warn!(
                "subject {subject}: measure {name} has fewer than 2 usable values for z-scoring; imputing zeros"
            );
            vec![0.0; values.len()]
        }),
        Normalization::UnitRescale { factor } => {
            values.iter().map(|v| v.map_or(0.0, |x| x * factor)).collect()
        }
        Normalization::Range01 { min, max } => values
            .iter()
            .map(|v| v.map_or(0.0, |x| (x - min) / (max - min)))
            .collect(),
        Normalization::None => values.iter().map(|v| v.unwrap_or(0.0)).collect(),
    }
}

pub fn normalize(record: &SubjectRecord, schema: &MeasureSchema) -> Result<NormalizedRecord> {
    record.check(schema)?;
    let values = schema
        .measures()
        .iter()
        .zip(&record.values)
        .map(|(m, v)| normalize_values(&m.name, m.normalization, v, &record.id))
        .collect();
    Ok(NormalizedRecord {
        id: record.id.clone(),
        sex: record.sex,
        label: record.label,
        values,
    })
}

pub fn normalize_dataset(dataset: &Dataset) -> Result<NormalizedDataset> {
    let records = dataset
        .records
        .iter()
        .map(|r| normalize(r, &dataset.schema))
        .collect::<Result<Vec<_>>>()?;
    Ok(NormalizedDataset {
        schema: dataset.schema.clone(),
        records,
    })
}
