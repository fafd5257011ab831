//! Tabular <-> text encoding.
//!
//! A record becomes a sentence of clauses `"{name} is {value}"` joined by
//! `", "`. Clause order follows a caller-supplied permutation, and decoding
//! accepts any order. Categories may themselves contain commas, so a clause
//! boundary is only recognised where `", "` is followed by a known feature
//! name and `" is"`.

use thiserror::Error;

use crate::schema::{FeatureKind, Record, Schema, Value};

pub const CLAUSE_SEPARATOR: &str = ", ";
pub const IS: &str = "is";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("missing feature {0:?}")]
    MissingFeature(String),
    #[error("feature {0:?} appears more than once")]
    DuplicateFeature(String),
    #[error("unrecognised clause {0:?}")]
    UnknownClause(String),
    #[error("feature {feature:?}: {value:?} is not a known category")]
    InvalidCategory { feature: String, value: String },
    #[error("feature {feature:?}: cannot parse {value:?} as a number")]
    UnparseableNumber { feature: String, value: String },
    #[error("feature {feature:?}: {value} is out of range")]
    OutOfRange { feature: String, value: String },
}

impl DecodeError {
    /// Stable variant label used for failure tallies.
    pub fn kind(&self) -> &'static str {
        match self {
            DecodeError::MissingFeature(_) => "missing_feature",
            DecodeError::DuplicateFeature(_) => "duplicate_feature",
            DecodeError::UnknownClause(_) => "unknown_clause",
            DecodeError::InvalidCategory { .. } => "invalid_category",
            DecodeError::UnparseableNumber { .. } => "unparseable_number",
            DecodeError::OutOfRange { .. } => "out_of_range",
        }
    }
}

/// Renders `v` with exactly `decimals` fractional digits and no negative zero.
pub fn format_number(v: f64, decimals: u32) -> String {
    let s = format!("{:.*}", decimals as usize, v);
    match s.strip_prefix('-') {
        Some(rest) if rest.bytes().all(|b| b == b'0' || b == b'.') => rest.to_string(),
        _ => s,
    }
}

/// True when `v` survives a render/parse cycle at the given precision.
pub fn is_representable(v: f64, decimals: u32) -> bool {
    format_number(v, decimals).parse::<f64>().map(|p| p == v).unwrap_or(false)
}

/// Parses the canonical rendering produced by [`format_number`]: optional
/// `-`, an integer part without superfluous leading zeros, and exactly
/// `decimals` fractional digits.
pub fn parse_canonical_number(s: &str, decimals: u32) -> Option<f64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let (int, frac) = match body.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (body, None),
    };
    if int.is_empty() || !int.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if int.len() > 1 && int.starts_with('0') {
        return None;
    }
    match (decimals, frac) {
        (0, None) => {}
        (d, Some(f)) if d > 0 && f.len() == d as usize && f.bytes().all(|b| b.is_ascii_digit()) => {}
        _ => return None,
    }
    let v: f64 = s.parse().ok()?;
    if neg && v == 0.0 {
        return None;
    }
    Some(v)
}

/// Emits the clauses of `record` in `permutation` order.
pub fn encode_record(record: &Record, schema: &Schema, permutation: &[usize]) -> String {
    debug_assert_eq!(permutation.len(), schema.len());
    let mut out = String::new();
    for (n, &i) in permutation.iter().enumerate() {
        if n > 0 {
            out.push_str(CLAUSE_SEPARATOR);
        }
        let f = &schema.features[i];
        out.push_str(&f.name);
        out.push(' ');
        out.push_str(IS);
        out.push(' ');
        out.push_str(&f.render(&record.values[i]));
    }
    out
}

/// Splits a sentence into `(feature index, raw value)` clauses without
/// validating values.
pub fn split_clauses<'a>(text: &'a str, schema: &Schema) -> Result<Vec<(usize, &'a str)>, DecodeError> {
    let mut clauses = Vec::new();
    let mut rest = text;
    loop {
        let (feature, after_name) = match match_clause_head(rest, schema) {
            Some(hit) => hit,
            None => {
                let clause = rest.split(CLAUSE_SEPARATOR).next().unwrap_or(rest);
                return Err(DecodeError::UnknownClause(clause.to_string()));
            }
        };
        let (value, next) = match find_boundary(after_name, schema) {
            Some(pos) => (&after_name[..pos], Some(&after_name[pos + CLAUSE_SEPARATOR.len()..])),
            None => (after_name, None),
        };
        clauses.push((feature, value));
        match next {
            Some(n) => rest = n,
            None => return Ok(clauses),
        }
    }
}

/// Matches `"{name} is"` at the start of `s`, preferring the longest name.
/// Returns the feature and the text after `"{name} is "` (empty when the
/// clause ends right after `is`).
fn match_clause_head<'a>(s: &'a str, schema: &Schema) -> Option<(usize, &'a str)> {
    let mut best: Option<(usize, usize)> = None;
    for (i, f) in schema.features.iter().enumerate() {
        if let Some(after) = s.strip_prefix(f.name.as_str()).and_then(|r| r.strip_prefix(" is")) {
            if after.is_empty() || after.starts_with(' ') || after.starts_with(',') {
                if best.map_or(true, |(_, len)| f.name.len() > len) {
                    best = Some((i, f.name.len()));
                }
            }
        }
    }
    best.map(|(i, len)| {
        let after = &s[len + 3..];
        (i, after.strip_prefix(' ').unwrap_or(after))
    })
}

fn find_boundary(s: &str, schema: &Schema) -> Option<usize> {
    let mut from = 0;
    while let Some(off) = s[from..].find(CLAUSE_SEPARATOR) {
        let pos = from + off;
        if match_clause_head(&s[pos + CLAUSE_SEPARATOR.len()..], schema).is_some() {
            return Some(pos);
        }
        from = pos + 1;
    }
    None
}

/// Parses a sentence back into a record. Succeeds iff every feature occurs
/// exactly once with a valid value.
pub fn decode_text(text: &str, schema: &Schema) -> Result<Record, DecodeError> {
    let clauses = split_clauses(text, schema)?;
    let mut values: Vec<Option<Value>> = vec![None; schema.len()];
    for (i, raw) in clauses {
        let f = &schema.features[i];
        if values[i].is_some() {
            return Err(DecodeError::DuplicateFeature(f.name.clone()));
        }
        let value = match &f.kind {
            FeatureKind::Categorical { categories } => {
                if !categories.iter().any(|c| c == raw) {
                    return Err(DecodeError::InvalidCategory { feature: f.name.clone(), value: raw.to_string() });
                }
                Value::Category(raw.to_string())
            }
            FeatureKind::Numerical { min, max, decimals } => {
                let v = parse_canonical_number(raw, *decimals).ok_or_else(|| {
                    DecodeError::UnparseableNumber { feature: f.name.clone(), value: raw.to_string() }
                })?;
                if v < *min || v > *max {
                    return Err(DecodeError::OutOfRange { feature: f.name.clone(), value: raw.to_string() });
                }
                Value::number(v)
            }
        };
        values[i] = Some(value);
    }
    let mut out = Vec::with_capacity(schema.len());
    for (f, v) in schema.features.iter().zip(values) {
        out.push(v.ok_or_else(|| DecodeError::MissingFeature(f.name.clone()))?);
    }
    Ok(Record::new(out))
}
