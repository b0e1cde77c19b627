//! Tabular metadata schema and its fixed-width one-hot/rescale encoding.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a categorical column treats values outside its vocabulary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingPolicy {
    /// Unknown values go to the column's unknown slot.
    #[default]
    Lenient,
    /// Unknown values are an ingestion error. Empty cells still map to the
    /// unknown slot.
    Strict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnKind {
    Categorical { vocab: Vec<String> },
    Numeric { min: f64, max: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
    #[serde(default)]
    pub missing_policy: MissingPolicy,
}

impl Column {
    pub fn categorical(name: &str, vocab: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind: ColumnKind::Categorical {
                vocab: vocab.iter().map(|s| s.to_string()).collect(),
            },
            missing_policy: MissingPolicy::Lenient,
        }
    }

    pub fn numeric(name: &str, min: f64, max: f64) -> Self {
        Self {
            name: name.to_string(),
            kind: ColumnKind::Numeric { min, max },
            missing_policy: MissingPolicy::Lenient,
        }
    }

    pub fn strict(mut self) -> Self {
        self.missing_policy = MissingPolicy::Strict;
        self
    }

    /// Width of this column's encoded segment: vocabulary plus one unknown
    /// slot for categoricals, one value for numerics.
    pub fn width(&self) -> usize {
        match &self.kind {
            ColumnKind::Categorical { vocab } => vocab.len() + 1,
            ColumnKind::Numeric { .. } => 1,
        }
    }
}

/// Ordered metadata columns plus the class names labels are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetadataSchema {
    pub classes: Vec<String>,
    pub columns: Vec<Column>,
}

/// One raw metadata cell.
#[derive(Clone, Debug, PartialEq)]
pub enum MetaValue {
    Missing,
    Text(String),
    Number(f64),
}

pub type MetaRecord = Vec<MetaValue>;

impl MetadataSchema {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Schema("schema declares no classes".into()));
        }
        let mut seen = HashSet::new();
        for class in &self.classes {
            if !seen.insert(class) {
                return Err(Error::Schema(format!("duplicate class {class:?}")));
            }
        }
        let mut names = HashSet::new();
        for col in &self.columns {
            if !names.insert(&col.name) {
                return Err(Error::Schema(format!("duplicate column {:?}", col.name)));
            }
            match &col.kind {
                ColumnKind::Categorical { vocab } => {
                    if vocab.is_empty() {
                        return Err(Error::Schema(format!("column {:?} has an empty vocabulary", col.name)));
                    }
                    let mut words = HashSet::new();
                    if let Some(dup) = vocab.iter().find(|w| !words.insert(*w)) {
                        return Err(Error::Schema(format!(
                            "column {:?} repeats vocabulary entry {dup:?}",
                            col.name
                        )));
                    }
                }
                ColumnKind::Numeric { min, max } => {
                    if !(max > min) || !min.is_finite() || !max.is_finite() {
                        return Err(Error::Schema(format!(
                            "column {:?} needs finite min < max, got [{min}, {max}]",
                            col.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn encoded_width(&self) -> usize {
        self.columns.iter().map(Column::width).sum()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: Self = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Parses one raw cell for `column`; empty cells are missing.
    pub fn parse_cell(&self, column: usize, raw: &str) -> Result<MetaValue> {
        let raw = raw.trim();
        if raw.is_empty() {
            return Ok(MetaValue::Missing);
        }
        let col = &self.columns[column];
        match col.kind {
            ColumnKind::Categorical { .. } => Ok(MetaValue::Text(raw.to_string())),
            ColumnKind::Numeric { .. } => raw.parse::<f64>().map(MetaValue::Number).map_err(|_| {
                Error::Data(format!("column {:?}: {raw:?} is not a number", col.name))
            }),
        }
    }
}

/// Encodes one record: categorical → indicator at the vocabulary index (or
/// the trailing unknown slot), numeric → `(v − min)/(max − min)` clamped to
/// [0, 1], missing numeric → 0.5.
pub fn one_hot_encode(record: &[MetaValue], schema: &MetadataSchema) -> Result<Vec<f64>> {
    if record.len() != schema.columns.len() {
        return Err(Error::dim(
            "one_hot_encode",
            format!("record has {} cells, schema {} columns", record.len(), schema.columns.len()),
        ));
    }
    let mut out = Vec::with_capacity(schema.encoded_width());
    for (col, value) in schema.columns.iter().zip(record) {
        match &col.kind {
            ColumnKind::Categorical { vocab } => {
                let start = out.len();
                out.resize(start + vocab.len() + 1, 0.0);
                let slot = match value {
                    MetaValue::Missing => vocab.len(),
                    MetaValue::Text(s) => lookup(col, vocab, s)?,
                    MetaValue::Number(v) => lookup(col, vocab, &v.to_string())?,
                };
                out[start + slot] = 1.0;
            }
            ColumnKind::Numeric { min, max } => {
                let v = match value {
                    MetaValue::Missing => 0.5,
                    MetaValue::Number(v) => ((v - min) / (max - min)).clamp(0.0, 1.0),
                    MetaValue::Text(s) => {
                        return Err(Error::Data(format!(
                            "column {:?}: {s:?} is not a number",
                            col.name
                        )))
                    }
                };
                out.push(v);
            }
        }
    }
    Ok(out)
}

fn lookup(col: &Column, vocab: &[String], value: &str) -> Result<usize> {
    match vocab.iter().position(|w| w == value) {
        Some(i) => Ok(i),
        None if col.missing_policy == MissingPolicy::Lenient => Ok(vocab.len()),
        None => Err(Error::Data(format!(
            "column {:?}: {value:?} is not in the vocabulary",
            col.name
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema(columns: Vec<Column>) -> MetadataSchema {
        MetadataSchema {
            classes: vec!["a".into(), "b".into()],
            columns,
        }
    }

    #[test]
    fn categorical_indicator() {
        let s = schema(vec![Column::categorical("x", &["a", "b", "c"])]);
        let v = one_hot_encode(&[MetaValue::Text("b".into())], &s).unwrap();
        assert_eq!(v, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn missing_categorical_uses_unknown_slot() {
        let s = schema(vec![Column::categorical("x", &["a", "b"])]);
        assert_eq!(one_hot_encode(&[MetaValue::Missing], &s).unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn numeric_rescale_clamp_and_missing() {
        let s = schema(vec![Column::numeric("age", 0.0, 120.0)]);
        assert_eq!(one_hot_encode(&[MetaValue::Number(30.0)], &s).unwrap(), vec![0.25]);
        assert_eq!(one_hot_encode(&[MetaValue::Number(500.0)], &s).unwrap(), vec![1.0]);
        assert_eq!(one_hot_encode(&[MetaValue::Number(-3.0)], &s).unwrap(), vec![0.0]);
        assert_eq!(one_hot_encode(&[MetaValue::Missing], &s).unwrap(), vec![0.5]);
    }

    #[test]
    fn out_of_vocabulary_policies() {
        let lenient = schema(vec![Column::categorical("x", &["a", "b"])]);
        assert_eq!(
            one_hot_encode(&[MetaValue::Text("zzz".into())], &lenient).unwrap(),
            vec![0.0, 0.0, 1.0]
        );
        let strict = schema(vec![Column::categorical("x", &["a", "b"]).strict()]);
        assert!(matches!(
            one_hot_encode(&[MetaValue::Text("zzz".into())], &strict),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn validation_rejects_bad_vocabularies() {
        assert!(schema(vec![Column::categorical("x", &[])]).validate().is_err());
        assert!(schema(vec![Column::categorical("x", &["a", "a"])]).validate().is_err());
        assert!(schema(vec![Column::numeric("x", 1.0, 1.0)]).validate().is_err());
        assert!(schema(vec![Column::numeric("x", 0.0, 1.0)]).validate().is_ok());
    }

    #[test]
    fn json_round_trip_keeps_order_and_kinds() {
        let s = schema(vec![
            Column::numeric("age", 0.0, 100.0),
            Column::categorical("site", &["arm", "face"]).strict(),
        ]);
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains(r#""kind":"categorical""#));
        let back: MetadataSchema = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }

    fn arb_column() -> impl Strategy<Value = Column> {
        prop_oneof![
            (1usize..6).prop_map(|n| Column {
                name: String::new(),
                kind: ColumnKind::Categorical {
                    vocab: (0..n).map(|i| format!("v{i}")).collect()
                },
                missing_policy: MissingPolicy::Lenient,
            }),
            (-50.0f64..50.0, 0.1f64..100.0).prop_map(|(lo, span)| Column {
                name: String::new(),
                kind: ColumnKind::Numeric { min: lo, max: lo + span },
                missing_policy: MissingPolicy::Lenient,
            }),
        ]
    }

    proptest! {
        #[test]
        fn encoded_width_matches_schema(cols in prop::collection::vec(arb_column(), 1..8), seed in 0u64..1000) {
            let columns: Vec<Column> = cols
                .into_iter()
                .enumerate()
                .map(|(i, mut c)| { c.name = format!("c{i}"); c })
                .collect();
            let s = schema(columns);
            s.validate().unwrap();
            let record: Vec<MetaValue> = s.columns.iter().enumerate().map(|(i, c)| {
                let pick = (seed as usize + i) % 3;
                match (&c.kind, pick) {
                    (_, 0) => MetaValue::Missing,
                    (ColumnKind::Categorical { vocab }, _) => MetaValue::Text(vocab[pick % vocab.len()].clone()),
                    (ColumnKind::Numeric { min, .. }, _) => MetaValue::Number(min + pick as f64),
                }
            }).collect();
            let v = one_hot_encode(&record, &s).unwrap();
            prop_assert_eq!(v.len(), s.encoded_width());
            prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}
