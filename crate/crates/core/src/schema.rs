//! Dataset schema, CSV ingestion, splitting and random-table generation.
//!
//! The schema is the public "general knowledge" about a dataset: feature
//! names, categorical vocabularies and numeric ranges. Nothing in it is
//! derived from individual records once it has been written to disk, so the
//! format-learning stage can consume it without spending privacy budget.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{format_number, is_representable};

/// Fractional digits are capped at this value when inferring a schema.
pub const MAX_INFERRED_DECIMALS: u32 = 6;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("invalid schema: {0}")]
    Invalid(String),
    #[error("header mismatch: missing columns {missing:?}, unexpected columns {extra:?}")]
    Header { missing: Vec<String>, extra: Vec<String> },
    #[error("row {row}, feature {feature:?}: {reason}")]
    Cell { row: usize, feature: String, reason: String },
    #[error("row {row}: expected {expected} cells, found {found}")]
    RowWidth { row: usize, expected: usize, found: usize },
    #[error("table is empty")]
    EmptyTable,
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = SchemaError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureKind {
    Categorical { categories: Vec<String> },
    Numerical { min: f64, max: f64, decimals: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

impl FeatureSpec {
    pub fn categorical(name: impl Into<String>, categories: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Categorical {
                categories: categories.iter().map(|c| c.to_string()).collect(),
            },
        }
    }

    pub fn numerical(name: impl Into<String>, min: f64, max: f64, decimals: u32) -> Self {
        Self { name: name.into(), kind: FeatureKind::Numerical { min, max, decimals } }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self.kind, FeatureKind::Numerical { .. })
    }

    pub fn categories(&self) -> Option<&[String]> {
        match &self.kind {
            FeatureKind::Categorical { categories } => Some(categories),
            FeatureKind::Numerical { .. } => None,
        }
    }

    pub fn decimals(&self) -> Option<u32> {
        match self.kind {
            FeatureKind::Numerical { decimals, .. } => Some(decimals),
            FeatureKind::Categorical { .. } => None,
        }
    }

    /// Numeric range width, or `None` for categorical features.
    pub fn range_width(&self) -> Option<f64> {
        match self.kind {
            FeatureKind::Numerical { min, max, .. } => Some(max - min),
            FeatureKind::Categorical { .. } => None,
        }
    }

    /// Smallest and largest integer multiples of `10^-decimals` inside the range.
    pub(crate) fn scaled_bounds(&self) -> Option<(i64, i64)> {
        match self.kind {
            FeatureKind::Numerical { min, max, decimals } => {
                let scale = 10f64.powi(decimals as i32);
                let lo = (min * scale - 1e-7).ceil() as i64;
                let hi = (max * scale + 1e-7).floor() as i64;
                Some((lo, hi))
            }
            FeatureKind::Categorical { .. } => None,
        }
    }

    /// Checks a cell value against this feature.
    pub fn check_value(&self, value: &Value) -> std::result::Result<(), String> {
        match (&self.kind, value) {
            (FeatureKind::Categorical { categories }, Value::Category(c)) => {
                if categories.iter().any(|k| k == c) {
                    Ok(())
                } else {
                    Err(format!("category {c:?} not in vocabulary"))
                }
            }
            (FeatureKind::Numerical { min, max, decimals }, Value::Number(v)) => {
                if !v.is_finite() {
                    return Err("non-finite number".into());
                }
                if *v < *min || *v > *max {
                    return Err(format!("{v} outside [{min}, {max}]"));
                }
                if !is_representable(*v, *decimals) {
                    return Err(format!("{v} has more than {decimals} fractional digits"));
                }
                Ok(())
            }
            (FeatureKind::Categorical { .. }, Value::Number(v)) => {
                Err(format!("expected a category, found number {v}"))
            }
            (FeatureKind::Numerical { .. }, Value::Category(c)) => {
                Err(format!("expected a number, found {c:?}"))
            }
        }
    }

    /// Renders a value the way the text codec and CSV writer emit it.
    pub fn render(&self, value: &Value) -> String {
        match (value, &self.kind) {
            (Value::Number(v), FeatureKind::Numerical { decimals, .. }) => {
                format_number(*v, *decimals)
            }
            (Value::Number(v), _) => v.to_string(),
            (Value::Category(c), _) => c.clone(),
        }
    }

    /// Parses a raw CSV cell. Numeric cells are snapped to the declared precision.
    pub fn parse_cell(&self, raw: &str) -> std::result::Result<Value, String> {
        let value = match &self.kind {
            FeatureKind::Categorical { .. } => Value::Category(raw.to_string()),
            FeatureKind::Numerical { decimals, .. } => {
                let v: f64 = raw
                    .trim()
                    .parse()
                    .map_err(|_| format!("cannot parse {raw:?} as a number"))?;
                if !v.is_finite() {
                    return Err(format!("cannot parse {raw:?} as a number"));
                }
                let scale = 10f64.powi(*decimals as i32);
                let scaled = v * scale;
                if (scaled - scaled.round()).abs() > 1e-6 * scale.max(1.0) {
                    return Err(format!("{raw:?} has more than {decimals} fractional digits"));
                }
                Value::number(scaled.round() / scale)
            }
        };
        self.check_value(&value)?;
        Ok(value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub features: Vec<FeatureSpec>,
    pub target_feature: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitive_feature: Option<String>,
}

impl Schema {
    pub fn new(
        features: Vec<FeatureSpec>,
        target_feature: impl Into<String>,
        sensitive_feature: Option<String>,
    ) -> Result<Self> {
        let schema = Self { features, target_feature: target_feature.into(), sensitive_feature };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(SchemaError::Invalid(msg));
        if self.features.is_empty() {
            return invalid("schema has no features".into());
        }
        let mut seen = HashSet::new();
        for f in &self.features {
            if f.name.is_empty() {
                return invalid("empty feature name".into());
            }
            if f.name.contains(", ") || f.name.contains(" is ") || f.name.ends_with(" is") {
                return invalid(format!("feature name {:?} collides with the text template", f.name));
            }
            if f.name == "is" || f.name == "," {
                return invalid(format!("feature name {:?} is a reserved word", f.name));
            }
            if !seen.insert(f.name.as_str()) {
                return invalid(format!("duplicate feature name {:?}", f.name));
            }
        }
        for f in &self.features {
            match &f.kind {
                FeatureKind::Categorical { categories } => {
                    if categories.is_empty() {
                        return invalid(format!("feature {:?} has no categories", f.name));
                    }
                    let mut cats = HashSet::new();
                    for c in categories {
                        if c.is_empty() {
                            return invalid(format!("feature {:?} has an empty category", f.name));
                        }
                        if c == "," {
                            return invalid(format!("feature {:?} uses the separator as a category", f.name));
                        }
                        if !cats.insert(c.as_str()) {
                            return invalid(format!("feature {:?} repeats category {c:?}", f.name));
                        }
                        if let Some(other) = self.delimiter_collision(c) {
                            return invalid(format!(
                                "category {c:?} of {:?} contains the clause delimiter for {other:?}",
                                f.name
                            ));
                        }
                    }
                }
                FeatureKind::Numerical { min, max, .. } => {
                    if !min.is_finite() || !max.is_finite() || min > max {
                        return invalid(format!("feature {:?} has invalid range [{min}, {max}]", f.name));
                    }
                    let (lo, hi) = f.scaled_bounds().expect("numerical");
                    if lo > hi {
                        return invalid(format!(
                            "feature {:?} has no representable value in its range",
                            f.name
                        ));
                    }
                }
            }
        }
        if self.index_of(&self.target_feature).is_none() {
            return invalid(format!("target feature {:?} not in schema", self.target_feature));
        }
        if let Some(s) = &self.sensitive_feature {
            if self.index_of(s).is_none() {
                return invalid(format!("sensitive feature {s:?} not in schema"));
            }
        }
        Ok(())
    }

    fn delimiter_collision(&self, category: &str) -> Option<&str> {
        self.features.iter().map(|f| f.name.as_str()).find(|name| {
            category.contains(&format!(", {name} is ")) || category.ends_with(&format!(", {name} is"))
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn feature(&self, name: &str) -> Option<&FeatureSpec> {
        self.features.iter().find(|f| f.name == name)
    }

    pub fn target_index(&self) -> usize {
        self.index_of(&self.target_feature).expect("validated target feature")
    }

    pub fn sensitive_index(&self) -> Option<usize> {
        self.sensitive_feature.as_deref().and_then(|s| self.index_of(s))
    }

    pub fn num_categorical(&self) -> usize {
        self.features.iter().filter(|f| !f.is_numerical()).count()
    }

    pub fn num_numerical(&self) -> usize {
        self.features.iter().filter(|f| f.is_numerical()).count()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let schema: Schema = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    /// Infers a schema from the header and cells of a CSV file.
    ///
    /// A column is numerical when every cell parses as a plain decimal
    /// number; its precision is the largest number of fractional digits seen.
    /// Every other column is categorical with its sorted distinct values.
    /// The target defaults to the last column.
    pub fn infer_from_csv(
        path: impl AsRef<Path>,
        target: Option<&str>,
        sensitive: Option<&str>,
    ) -> Result<Self> {
        let (header, rows) = read_raw_csv(path.as_ref())?;
        if rows.is_empty() {
            return Err(SchemaError::EmptyTable);
        }
        let mut features = Vec::with_capacity(header.len());
        for (col, name) in header.iter().enumerate() {
            let cells = rows.iter().map(|r| r[col].as_str());
            features.push(infer_feature(name, cells));
        }
        let target = target.map(str::to_string).unwrap_or_else(|| header[header.len() - 1].clone());
        Schema::new(features, target, sensitive.map(str::to_string))
    }
}

fn plain_decimal_digits(cell: &str) -> Option<u32> {
    let s = cell.strip_prefix('-').unwrap_or(cell);
    let (int, frac) = match s.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (s, None),
    };
    if int.is_empty() || !int.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    match frac {
        None => Some(0),
        Some(f) if !f.is_empty() && f.bytes().all(|b| b.is_ascii_digit()) => Some(f.len() as u32),
        Some(_) => None,
    }
}

fn infer_feature<'a>(name: &str, cells: impl Iterator<Item = &'a str> + Clone) -> FeatureSpec {
    let mut decimals = 0u32;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut numeric = true;
    for cell in cells.clone() {
        match plain_decimal_digits(cell).zip(cell.parse::<f64>().ok()) {
            Some((d, v)) => {
                decimals = decimals.max(d);
                min = min.min(v);
                max = max.max(v);
            }
            None => {
                numeric = false;
                break;
            }
        }
    }
    if numeric {
        let decimals = decimals.min(MAX_INFERRED_DECIMALS);
        let scale = 10f64.powi(decimals as i32);
        // Widen outward so values snapped to the capped precision stay in range.
        let min = (min * scale).floor() / scale;
        let max = (max * scale).ceil() / scale;
        FeatureSpec::numerical(name, min, max, decimals)
    } else {
        let categories: BTreeSet<&str> = cells.collect();
        FeatureSpec {
            name: name.to_string(),
            kind: FeatureKind::Categorical {
                categories: categories.into_iter().map(str::to_string).collect(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Category(String),
    Number(f64),
}

impl Value {
    /// Numeric value with negative zero normalised away.
    pub fn number(v: f64) -> Self {
        Value::Number(if v == 0.0 { 0.0 } else { v })
    }

    pub fn category(c: impl Into<String>) -> Self {
        Value::Category(c.into())
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            Value::Number(v) => Some(*v),
            Value::Category(_) => None,
        }
    }

    pub fn as_category(&self) -> Option<&str> {
        match self {
            Value::Category(c) => Some(c),
            Value::Number(_) => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Category(c) => f.write_str(c),
            Value::Number(v) => write!(f, "{v}"),
        }
    }
}

/// One row. Values are stored in schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub values: Vec<Value>,
}

impl Record {
    pub fn new(values: Vec<Value>) -> Self {
        Self { values }
    }

    pub fn get<'a>(&'a self, schema: &Schema, feature: &str) -> Option<&'a Value> {
        schema.index_of(feature).and_then(|i| self.values.get(i))
    }

    pub fn validate(&self, schema: &Schema) -> std::result::Result<(), (usize, String)> {
        if self.values.len() != schema.len() {
            return Err((0, format!("expected {} values, found {}", schema.len(), self.values.len())));
        }
        for (i, (f, v)) in schema.features.iter().zip(&self.values).enumerate() {
            f.check_value(v).map_err(|e| (i, e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub schema: Schema,
    pub rows: Vec<Record>,
}

impl Table {
    /// Builds a table, validating every row against the schema.
    pub fn new(schema: Schema, rows: Vec<Record>) -> Result<Self> {
        for (r, rec) in rows.iter().enumerate() {
            rec.validate(&schema).map_err(|(i, reason)| SchemaError::Cell {
                row: r + 1,
                feature: schema.features.get(i).map(|f| f.name.clone()).unwrap_or_default(),
                reason,
            })?;
        }
        Ok(Self { schema, rows })
    }

    pub fn empty(schema: Schema) -> Self {
        Self { schema, rows: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, feature: usize) -> impl Iterator<Item = &Value> + '_ {
        self.rows.iter().map(move |r| &r.values[feature])
    }

    /// Reads a CSV whose header names every schema feature, in any order.
    pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Self> {
        let (header, raw_rows) = read_raw_csv(path.as_ref())?;
        let mut column_of = HashMap::new();
        for (i, h) in header.iter().enumerate() {
            column_of.insert(h.as_str(), i);
        }
        let missing: Vec<String> = schema
            .features
            .iter()
            .filter(|f| !column_of.contains_key(f.name.as_str()))
            .map(|f| f.name.clone())
            .collect();
        let extra: Vec<String> =
            header.iter().filter(|h| schema.index_of(h).is_none()).cloned().collect();
        if !missing.is_empty() || !extra.is_empty() || header.len() != schema.len() {
            return Err(SchemaError::Header { missing, extra });
        }
        let mut rows = Vec::with_capacity(raw_rows.len());
        for (r, raw) in raw_rows.iter().enumerate() {
            let mut values = Vec::with_capacity(schema.len());
            for f in &schema.features {
                let cell = &raw[column_of[f.name.as_str()]];
                let v = f.parse_cell(cell).map_err(|reason| SchemaError::Cell {
                    row: r + 1,
                    feature: f.name.clone(),
                    reason,
                })?;
                values.push(v);
            }
            rows.push(Record::new(values));
        }
        Ok(Self { schema: schema.clone(), rows })
    }

    /// Writes the table with columns in schema order.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
        w.write_record(self.schema.features.iter().map(|f| f.name.as_str()))?;
        for row in &self.rows {
            w.write_record(self.schema.features.iter().zip(&row.values).map(|(f, v)| f.render(v)))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Seeded uniform shuffle followed by a `floor(n * train_fraction)` cut.
    pub fn split_train_test(&self, train_fraction: f64, seed: u64) -> Result<(Table, Table)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(SchemaError::Argument(format!(
                "train fraction {train_fraction} must lie strictly between 0 and 1"
            )));
        }
        if self.rows.is_empty() {
            return Err(SchemaError::EmptyTable);
        }
        let mut order: Vec<usize> = (0..self.rows.len()).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let n_train = (self.rows.len() as f64 * train_fraction).floor() as usize;
        let pick = |idx: &[usize]| Table {
            schema: self.schema.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
        };
        Ok((pick(&order[..n_train]), pick(&order[n_train..])))
    }
}

/// Draws `n` rows whose cells are independent and uniform over each feature's
/// admissible values: categories for categorical features, multiples of
/// `10^-decimals` inside the range for numerical ones.
pub fn generate_random_table(schema: &Schema, n: usize, seed: u64) -> Result<Table> {
    if n == 0 {
        return Err(SchemaError::Argument("random table size must be at least 1".into()));
    }
    schema.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let rows = (0..n).map(|_| random_record(schema, &mut rng)).collect();
    Ok(Table { schema: schema.clone(), rows })
}

pub(crate) fn random_value<R: Rng + ?Sized>(feature: &FeatureSpec, rng: &mut R) -> Value {
    match &feature.kind {
        FeatureKind::Categorical { categories } => {
            Value::Category(categories[rng.random_range(0..categories.len())].clone())
        }
        FeatureKind::Numerical { decimals, .. } => {
            let (lo, hi) = feature.scaled_bounds().expect("numerical");
            let k = rng.random_range(lo..=hi);
            Value::number(k as f64 / 10f64.powi(*decimals as i32))
        }
    }
}

fn random_record<R: Rng + ?Sized>(schema: &Schema, rng: &mut R) -> Record {
    Record::new(schema.features.iter().map(|f| random_value(f, rng)).collect())
}

fn read_raw_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(SchemaError::RowWidth { row: r + 1, expected: header.len(), found: rec.len() });
        }
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}
