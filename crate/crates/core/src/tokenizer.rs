//! Schema-derived vocabulary and annotated tokenization.
//!
//! Feature names and categorical values are atomic tokens; numbers are
//! spelled out one character at a time. Each position is labelled as a
//! format token (names, `is`, `,`, BOS/EOS) or a tabular token (values), and
//! every number is recorded as an inclusive span with its parsed value.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{parse_canonical_number, split_clauses, DecodeError, IS};
use crate::schema::{FeatureKind, Schema};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";
pub const SEPARATOR: &str = ",";
pub const NUMBER_CHARS: [&str; 12] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9", ".", "-"];

#[derive(Debug, Error)]
pub enum TokenizeError {
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("sentence does not follow the template: {0}")]
    Template(#[from] DecodeError),
    #[error("feature {feature:?}: {value:?} is not a number")]
    BadNumber { feature: String, value: String },
}

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        Vocab::from_tokens(r.tokens)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr { tokens: v.tokens }
    }
}

impl Vocab {
    /// Reserved ids come first: BOS = 0, EOS = 1, PAD = 2.
    pub fn build(schema: &Schema) -> Self {
        let mut tokens: Vec<String> = vec![BOS.into(), EOS.into(), PAD.into()];
        tokens.extend(schema.features.iter().map(|f| f.name.clone()));
        tokens.push(IS.into());
        tokens.push(SEPARATOR.into());
        for f in &schema.features {
            if let FeatureKind::Categorical { categories } = &f.kind {
                tokens.extend(categories.iter().cloned());
            }
        }
        tokens.extend(NUMBER_CHARS.iter().map(|s| s.to_string()));
        let mut seen = std::collections::HashSet::new();
        tokens.retain(|t| seen.insert(t.clone()));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn bos(&self) -> TokenId {
        0
    }

    pub fn eos(&self) -> TokenId {
        1
    }

    pub fn pad(&self) -> TokenId {
        2
    }

    pub fn is_id(&self) -> TokenId {
        self.index[IS]
    }

    pub fn separator_id(&self) -> TokenId {
        self.index[SEPARATOR]
    }

    /// Ids of `"0"..="9"`, in digit order.
    pub fn digit_ids(&self) -> [TokenId; 10] {
        std::array::from_fn(|d| self.index[NUMBER_CHARS[d]])
    }

    fn require(&self, token: &str) -> Result<TokenId, TokenizeError> {
        self.id(token).ok_or_else(|| TokenizeError::UnknownToken(token.to_string()))
    }

    /// Joins tokens back into text: single number characters attach to each
    /// other, the separator attaches to the left, everything else is spaced.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        let mut prev_char = false;
        for &id in ids {
            if id == self.bos() || id == self.eos() || id == self.pad() {
                continue;
            }
            let tok = self.token(id);
            let is_char = NUMBER_CHARS.contains(&tok);
            if tok == SEPARATOR {
                out.push_str(SEPARATOR);
            } else if is_char && prev_char {
                out.push_str(tok);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
            prev_char = is_char;
        }
        out
    }
}

/// A numeric value occupying positions `start..=end` of a token sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericSpan {
    pub start: usize,
    pub end: usize,
    pub value: f64,
    pub feature: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedExample {
    pub ids: Vec<TokenId>,
    /// `true` for format tokens, `false` for tabular (value) tokens.
    pub format_mask: Vec<bool>,
    pub numeric_spans: Vec<NumericSpan>,
}

impl TokenizedExample {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Tokenizes a sentence produced by [`crate::codec::encode_record`].
pub fn tokenize(text: &str, vocab: &Vocab, schema: &Schema) -> Result<TokenizedExample, TokenizeError> {
    let clauses = split_clauses(text, schema)?;
    let mut ids = vec![vocab.bos()];
    let mut format_mask = vec![true];
    let mut numeric_spans = Vec::new();
    let mut push = |ids: &mut Vec<TokenId>, id: TokenId, format: bool| {
        ids.push(id);
        format_mask.push(format);
    };
    for (n, (feature, raw)) in clauses.into_iter().enumerate() {
        let f = &schema.features[feature];
        if n > 0 {
            push(&mut ids, vocab.separator_id(), true);
        }
        push(&mut ids, vocab.require(&f.name)?, true);
        push(&mut ids, vocab.is_id(), true);
        match &f.kind {
            FeatureKind::Categorical { .. } => push(&mut ids, vocab.require(raw)?, false),
            FeatureKind::Numerical { decimals, .. } => {
                let value = parse_canonical_number(raw, *decimals).ok_or_else(|| TokenizeError::BadNumber {
                    feature: f.name.clone(),
                    value: raw.to_string(),
                })?;
                let start = ids.len();
                for ch in raw.chars() {
                    let mut buf = [0u8; 4];
                    push(&mut ids, vocab.require(ch.encode_utf8(&mut buf))?, false);
                }
                numeric_spans.push(NumericSpan { start, end: ids.len() - 1, value, feature });
            }
        }
    }
    push(&mut ids, vocab.eos(), true);
    Ok(TokenizedExample { ids, format_mask, numeric_spans })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::encode_record;
    use crate::schema::{generate_random_table, FeatureSpec};
    use proptest::prelude::*;

    fn age_sex() -> Schema {
        Schema::new(
            vec![FeatureSpec::numerical("Age", 0.0, 120.0, 0), FeatureSpec::categorical("Sex", &["Male", "Female"])],
            "Sex",
            None,
        )
        .unwrap()
    }

    #[test]
    fn vocab_enumeration() {
        let v = Vocab::build(&age_sex());
        assert_eq!(v.len(), 21);
        for t in [BOS, EOS, PAD, "Age", "Sex", "is", ",", "Male", "Female", ".", "-"] {
            assert!(v.id(t).is_some(), "{t}");
        }
        for d in 0..10 {
            assert!(v.id(&d.to_string()).is_some());
        }
        assert_eq!(v.token(v.bos()), BOS);
        assert_eq!(v.token(v.eos()), EOS);
        assert_eq!(v.token(v.pad()), PAD);
    }

    #[test]
    fn shared_category_is_one_token() {
        let s = Schema::new(
            vec![FeatureSpec::categorical("A", &["yes", "no"]), FeatureSpec::categorical("B", &["no", "maybe"])],
            "A",
            None,
        )
        .unwrap();
        let v = Vocab::build(&s);
        // 3 reserved + 2 names + is + , + {yes,no,maybe} + 12 number chars
        assert_eq!(v.len(), 3 + 2 + 2 + 3 + 12);
    }

    #[test]
    fn worked_example() {
        let s = Schema::new(
            vec![
                FeatureSpec::numerical("Age", 0.0, 120.0, 0),
                FeatureSpec::categorical("Education", &["high school", "college"]),
            ],
            "Education",
            None,
        )
        .unwrap();
        let v = Vocab::build(&s);
        let ex = tokenize("Age is 20, Education is high school", &v, &s).unwrap();
        let toks: Vec<&str> = ex.ids.iter().map(|&i| v.token(i)).collect();
        assert_eq!(toks, [BOS, "Age", "is", "2", "0", ",", "Education", "is", "high school", EOS]);
        let format: Vec<&str> = toks[1..toks.len() - 1]
            .iter()
            .zip(&ex.format_mask[1..])
            .filter(|(_, &m)| m)
            .map(|(t, _)| *t)
            .collect();
        assert_eq!(format, ["Age", "is", ",", "Education", "is"]);
        let tabular: Vec<&str> =
            toks.iter().zip(&ex.format_mask).filter(|(_, &m)| !m).map(|(t, _)| *t).collect();
        assert_eq!(tabular, ["2", "0", "high school"]);
        assert_eq!(ex.numeric_spans, vec![NumericSpan { start: 3, end: 4, value: 20.0, feature: 0 }]);
    }

    #[test]
    fn negative_decimal_span() {
        let s = Schema::new(vec![FeatureSpec::numerical("Weight", -5.0, 5.0, 2)], "Weight", None).unwrap();
        let v = Vocab::build(&s);
        let ex = tokenize("Weight is -1.50", &v, &s).unwrap();
        let span = &ex.numeric_spans[0];
        let chars: Vec<&str> = (span.start..=span.end).map(|p| v.token(ex.ids[p])).collect();
        assert_eq!(chars, ["-", "1", ".", "5", "0"]);
        assert_eq!(span.value, -1.5);
    }

    #[test]
    fn unknown_token_is_an_error() {
        let s = age_sex();
        let v = Vocab::build(&s);
        assert!(matches!(tokenize("Age is 20, Sex is Other", &v, &s), Err(TokenizeError::UnknownToken(_))));
    }

    #[test]
    fn vocab_serde_rebuilds_index() {
        let v = Vocab::build(&age_sex());
        let back: Vocab = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("Male"), v.id("Male"));
    }

    fn schema3() -> Schema {
        Schema::new(
            vec![
                FeatureSpec::numerical("Age", 17.0, 90.0, 0),
                FeatureSpec::categorical("Work", &["Private", "Self-emp", "a, b", "7"]),
                FeatureSpec::numerical("Weight", -50.0, 50.0, 2),
            ],
            "Work",
            None,
        )
        .unwrap()
    }

    proptest! {
        #[test]
        fn lossless_and_consistent(seed in any::<u64>(), p in 0usize..6) {
            let s = schema3();
            let v = Vocab::build(&s);
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let t = generate_random_table(&s, 3, seed).unwrap();
            for r in &t.rows {
                let text = encode_record(r, &s, &perms[p]);
                let ex = tokenize(&text, &v, &s).unwrap();
                prop_assert_eq!(ex.ids.len(), ex.format_mask.len());
                prop_assert_eq!(v.detokenize(&ex.ids), text);
                let mut last_end = 0;
                for span in &ex.numeric_spans {
                    prop_assert!(span.start > last_end && span.end < ex.ids.len() - 1);
                    last_end = span.end;
                    prop_assert!((span.start..=span.end).all(|i| !ex.format_mask[i]));
                    let txt: String = (span.start..=span.end).map(|i| v.token(ex.ids[i])).collect();
                    prop_assert_eq!(txt.parse::<f64>().unwrap(), span.value);
                }
            }
        }
    }
}
