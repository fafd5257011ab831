//! Training objectives over next-token logits.
//!
//! Position `p` of an example is predicted by logits row `p - 1`, so a
//! sequence of `L` tokens has `L - 1` predicted positions.

use serde::{Deserialize, Serialize};

use crate::model::{log_prob, softmax, Logits};
use crate::schema::{FeatureKind, Schema};
use crate::tokenizer::{NumericSpan, TokenId, TokenizedExample, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Stage1Ce,
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NulMode {
    /// Expected digit under the digit-restricted softmax; exact gradients.
    SoftDigit,
    /// Score-function surrogate on the greedily decoded tokens.
    Reinforce,
}

/// How the per-feature error scale is derived from the schema.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// `max - min`.
    Range,
    /// Standard deviation of a uniform variable on `[min, max]`.
    Std,
    Fixed(f64),
}

impl LambdaMode {
    /// Parses `range`, `std` or `fixed:<v>`.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "range" => Some(Self::Range),
            "std" => Some(Self::Std),
            _ => {
                let v: f64 = s.strip_prefix("fixed:")?.parse().ok()?;
                (v > 0.0 && v.is_finite()).then_some(Self::Fixed(v))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub alpha: f64,
    pub beta: f64,
    /// Error scale per schema feature index; categorical entries are unused.
    pub lambda: Vec<f64>,
    pub nul_mode: NulMode,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self { kind: LossKind::Combined, alpha: 0.65, beta: 1.0, lambda: Vec::new(), nul_mode: NulMode::SoftDigit }
    }
}

impl LossSpec {
    pub fn stage1() -> Self {
        Self { kind: LossKind::Stage1Ce, ..Self::default() }
    }

    /// Fills `lambda` from the schema. Degenerate ranges fall back to 1.
    pub fn with_lambda(mut self, schema: &Schema, mode: LambdaMode) -> Self {
        self.lambda = schema
            .features
            .iter()
            .map(|f| match (&f.kind, mode) {
                (FeatureKind::Numerical { .. }, LambdaMode::Fixed(v)) => v,
                (FeatureKind::Numerical { min, max, .. }, m) => {
                    let w = max - min;
                    let scaled = if m == LambdaMode::Std { w / 12f64.sqrt() } else { w };
                    if scaled > 0.0 {
                        scaled
                    } else {
                        1.0
                    }
                }
                _ => 1.0,
            })
            .collect();
        self
    }

    pub fn lambda_for(&self, feature: usize) -> f64 {
        self.lambda.get(feature).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(format!("beta {} must be a finite non-negative number", self.beta));
        }
        if let Some(bad) = self.lambda.iter().find(|&&l| !(l > 0.0 && l.is_finite())) {
            return Err(format!("lambda {bad} must be positive"));
        }
        Ok(())
    }
}

/// Token ids of the characters that make up numbers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NumberTokens {
    pub digits: [TokenId; 10],
    pub dot: TokenId,
    pub minus: TokenId,
}

impl NumberTokens {
    pub fn from_vocab(vocab: &Vocab) -> Self {
        Self {
            digits: vocab.digit_ids(),
            dot: vocab.id(".").expect("vocab has '.'"),
            minus: vocab.id("-").expect("vocab has '-'"),
        }
    }

    /// Digits at ids 0..=9, "." at 10 and "-" at 11.
    pub fn identity_digits() -> Self {
        Self { digits: [0, 1, 2, 3, 4, 5, 6, 7, 8, 9], dot: 10, minus: 11 }
    }

    fn char_of(&self, id: TokenId) -> Option<char> {
        if let Some(d) = self.digits.iter().position(|&x| x == id) {
            return char::from_digit(d as u32, 10);
        }
        if id == self.dot {
            Some('.')
        } else if id == self.minus {
            Some('-')
        } else {
            None
        }
    }

    fn digit_of(&self, id: TokenId) -> Option<usize> {
        self.digits.iter().position(|&x| x == id)
    }
}

/// Loss value of one example, plus its logits gradient when requested.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub dlogits: Option<Vec<f64>>,
    /// Plain cross entropy summed over predicted positions.
    pub ce_sum: f64,
    pub predicted_tokens: usize,
    /// Squared-error sum of the greedily decoded numbers.
    pub greedy_se: f64,
}

/// `-log p(ids[p] | ids[..p])` for every predicted position `p >= 1`.
pub fn token_nll(logits: &Logits, ids: &[TokenId]) -> Vec<f64> {
    (1..ids.len()).map(|p| -log_prob(logits.row(p - 1), ids[p] as usize)).collect()
}

pub fn stage1_ce(logits: &Logits, example: &TokenizedExample) -> f64 {
    token_nll(logits, &example.ids).iter().sum()
}

/// Cross entropy with weight `1 - alpha` on format tokens and `alpha` on
/// tabular tokens.
pub fn wcel(logits: &Logits, example: &TokenizedExample, alpha: f64) -> f64 {
    token_nll(logits, &example.ids)
        .iter()
        .enumerate()
        .map(|(i, nll)| position_weight(example.format_mask[i + 1], alpha) * nll)
        .sum()
}

fn position_weight(is_format: bool, alpha: f64) -> f64 {
    if is_format {
        1.0 - alpha
    } else {
        alpha
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Parses an optional minus sign, at least one digit and an optional
/// fractional part. Leading zeros are tolerated.
pub fn parse_decimal(s: &str) -> Option<f64> {
    let body = s.strip_prefix('-').unwrap_or(s);
    let (int, frac) = match body.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (body, None),
    };
    let digits = |x: &str| !x.is_empty() && x.bytes().all(|b| b.is_ascii_digit());
    if !digits(int) || frac.is_some_and(|f| !digits(f)) {
        return None;
    }
    s.parse().ok()
}

/// Concatenates the argmax token at every span position and parses the
/// result; `None` when the characters do not form a number.
pub fn greedy_decode_number(logits: &Logits, span: &NumericSpan, numbers: &NumberTokens) -> Option<f64> {
    let mut text = String::new();
    for p in span.start..=span.end {
        let id = argmax(logits.row(p - 1)) as TokenId;
        text.push(numbers.char_of(id)?);
    }
    parse_decimal(&text)
}

/// Half the squared scaled error; a failed decode costs 1.
pub fn squared_error(truth: f64, decoded: Option<f64>, lambda: f64) -> f64 {
    match decoded {
        None => 1.0,
        Some(v) => 0.5 * ((truth - v) / lambda).powi(2),
    }
}

/// Smooth estimate of a span's number: each digit position contributes its
/// expected digit under the softmax restricted to digit tokens, while sign
/// and decimal point follow the ground truth. Returns the estimate and, per
/// digit position, `(row, place value, digit probabilities)`.
fn soft_number(
    logits: &Logits,
    example: &TokenizedExample,
    span: &NumericSpan,
    numbers: &NumberTokens,
) -> (f64, Vec<(usize, f64, [f64; 10])>) {
    let ids = &example.ids[span.start..=span.end];
    let negative = ids.first() == Some(&numbers.minus);
    let body = if negative { &ids[1..] } else { ids };
    let int_len = body.iter().position(|&t| t == numbers.dot).unwrap_or(body.len());
    let sign = if negative { -1.0 } else { 1.0 };
    let mut estimate = 0.0;
    let mut parts = Vec::new();
    let mut frac_pos = 0;
    for (i, &tok) in body.iter().enumerate() {
        if numbers.digit_of(tok).is_none() {
            continue;
        }
        let place = if i < int_len {
            10f64.powi((int_len - 1 - i) as i32)
        } else {
            frac_pos += 1;
            10f64.powi(-frac_pos)
        };
        let pos = span.start + (ids.len() - body.len()) + i;
        let row = logits.row(pos - 1);
        let restricted: Vec<f64> = numbers.digits.iter().map(|&d| row[d as usize]).collect();
        let q = softmax(&restricted);
        let mut probs = [0.0; 10];
        probs.copy_from_slice(&q);
        let expected: f64 = probs.iter().enumerate().map(|(d, p)| d as f64 * p).sum();
        estimate += sign * place * expected;
        parts.push((pos - 1, sign * place, probs));
    }
    (estimate, parts)
}

/// Sum of per-span squared errors under `mode`, optionally adding
/// `scale * d(nul)/d(logits)` into `grad`.
pub fn nul(
    logits: &Logits,
    example: &TokenizedExample,
    spec: &LossSpec,
    numbers: &NumberTokens,
    mut grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let v = logits.cols;
    let mut total = 0.0;
    for span in &example.numeric_spans {
        let lambda = spec.lambda_for(span.feature);
        match spec.nul_mode {
            NulMode::SoftDigit => {
                let (estimate, parts) = soft_number(logits, example, span, numbers);
                let se = squared_error(span.value, Some(estimate), lambda);
                total += se;
                if let Some((g, scale)) = grad.as_mut() {
                    let d_est = -(span.value - estimate) / (lambda * lambda);
                    for (row, place, probs) in parts {
                        let mean: f64 = probs.iter().enumerate().map(|(d, p)| d as f64 * p).sum();
                        for (d, p) in probs.iter().enumerate() {
                            let id = numbers.digits[d] as usize;
                            g[row * v + id] += *scale * d_est * place * p * (d as f64 - mean);
                        }
                    }
                }
            }
            NulMode::Reinforce => {
                let se = squared_error(span.value, greedy_decode_number(logits, span, numbers), lambda);
                total += se;
                if let Some((g, scale)) = grad.as_mut() {
                    for p in span.start..=span.end {
                        let row = logits.row(p - 1);
                        let probs = softmax(row);
                        let chosen = argmax(row);
                        let out = &mut g[(p - 1) * v..p * v];
                        for (k, pk) in probs.iter().enumerate() {
                            let onehot = if k == chosen { 1.0 } else { 0.0 };
                            out[k] += *scale * se * (pk - onehot);
                        }
                    }
                }
            }
        }
    }
    total
}

/// Loss of one example under `spec`, with the gradient when `want_grad`.
pub fn example_loss(
    logits: &Logits,
    example: &TokenizedExample,
    spec: &LossSpec,
    numbers: &NumberTokens,
    want_grad: bool,
) -> LossOutput {
    let v = logits.cols;
    let ids = &example.ids;
    let mut dlogits = want_grad.then(|| vec![0.0; logits.rows * v]);
    let mut ce_sum = 0.0;
    let mut weighted = 0.0;
    for p in 1..ids.len() {
        let row = logits.row(p - 1);
        let target = ids[p] as usize;
        let nll = -log_prob(row, target);
        let w = match spec.kind {
            LossKind::Stage1Ce => 1.0,
            LossKind::Combined => position_weight(example.format_mask[p], spec.alpha),
        };
        ce_sum += nll;
        weighted += w * nll;
        if let Some(g) = dlogits.as_mut() {
            if w != 0.0 {
                let probs = softmax(row);
                let out = &mut g[(p - 1) * v..p * v];
                for (k, pk) in probs.iter().enumerate() {
                    out[k] += w * pk;
                }
                out[target] -= w;
            }
        }
    }
    let greedy_se: f64 = example
        .numeric_spans
        .iter()
        .map(|s| squared_error(s.value, greedy_decode_number(logits, s, numbers), spec.lambda_for(s.feature)))
        .sum();
    let mut value = weighted;
    if spec.kind == LossKind::Combined && spec.beta > 0.0 {
        let term = nul(logits, example, spec, numbers, dlogits.as_deref_mut().map(|g| (g, spec.beta)));
        value += spec.beta * term;
    }
    LossOutput { value, dlogits, ce_sum, predicted_tokens: ids.len().saturating_sub(1), greedy_se }
}

/// Same as [`example_loss`] without the gradient.
pub fn combined_loss(logits: &Logits, example: &TokenizedExample, spec: &LossSpec, numbers: &NumberTokens) -> f64 {
    example_loss(logits, example, spec, numbers, false).value
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::encode_record;
    use crate::model::{ModelConfig, ModelState};
    use crate::schema::{generate_random_table, FeatureSpec};
    use crate::tokenizer::tokenize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Logits whose softmax puts `probs[i]` on token `targets[i]` at row `i`,
    /// spreading the remainder uniformly over the other tokens.
    fn logits_with(targets: &[(usize, f64)], v: usize) -> Logits {
        let mut data = Vec::new();
        for &(t, p) in targets {
            let rest = (1.0 - p) / (v - 1) as f64;
            for k in 0..v {
                data.push(if k == t { p.ln() } else { rest.ln() });
            }
        }
        Logits { rows: targets.len(), cols: v, data }
    }

    fn ex(ids: Vec<TokenId>, format_mask: Vec<bool>, spans: Vec<NumericSpan>) -> TokenizedExample {
        TokenizedExample { ids, format_mask, numeric_spans: spans }
    }

    #[test]
    fn hand_cross_entropy() {
        let lg = logits_with(&[(3, 0.5), (4, 0.25), (5, 0.125), (0, 0.5)], 8);
        let e = ex(vec![0, 3, 4, 5], vec![true; 4], vec![]);
        let ce = stage1_ce(&lg, &e);
        // -ln(0.5 * 0.25 * 0.125) = 6 ln 2
        assert!((ce - 4.158883083359672).abs() < 1e-12);
    }

    #[test]
    fn uniform_and_perfect_models() {
        let v = 12;
        let uniform = Logits { rows: 5, cols: v, data: vec![0.0; 5 * v] };
        let e = ex(vec![0, 1, 2, 3, 4], vec![true; 5], vec![]);
        assert!((stage1_ce(&uniform, &e) - 4.0 * (v as f64).ln()).abs() < 1e-12);
        let mut sharp = vec![-1e9; 5 * v];
        for (p, &t) in e.ids.iter().enumerate().skip(1) {
            sharp[(p - 1) * v + t as usize] = 0.0;
        }
        let perfect = Logits { rows: 5, cols: v, data: sharp };
        assert!(stage1_ce(&perfect, &e).abs() < 1e-12);
    }

    #[test]
    fn wcel_weights() {
        let lg = logits_with(&[(3, 0.5), (4, 0.25), (5, 0.125), (0, 0.5)], 8);
        let e = ex(vec![0, 3, 4, 5], vec![true, true, false, true], vec![]);
        let ce = stage1_ce(&lg, &e);
        assert!((wcel(&lg, &e, 0.5) - 0.5 * ce).abs() < 1e-12);
        // alpha = 1 keeps only the tabular position (token 4)
        assert!((wcel(&lg, &e, 1.0) - -(0.25f64).ln()).abs() < 1e-12);
        assert!((wcel(&lg, &e, 0.0) - -(0.5f64 * 0.125).ln()).abs() < 1e-12);
    }

    #[test]
    fn greedy_decoding() {
        let nt = NumberTokens::identity_digits();
        let span = |s, e| NumericSpan { start: s, end: e, value: 0.0, feature: 0 };
        let lg = logits_with(&[(2, 0.9), (0, 0.9)], 12);
        assert_eq!(greedy_decode_number(&lg, &span(1, 2), &nt), Some(20.0));
        let lg = logits_with(&[(10, 0.9), (10, 0.9)], 12);
        assert_eq!(greedy_decode_number(&lg, &span(1, 2), &nt), None);
        let lg = logits_with(&[(11, 0.9), (1, 0.9), (10, 0.9), (5, 0.9)], 12);
        assert_eq!(greedy_decode_number(&lg, &span(1, 4), &nt), Some(-1.5));
        let lg = logits_with(&[(11, 0.9)], 13);
        assert_eq!(greedy_decode_number(&lg, &span(1, 1), &nt), None);
        let lg = logits_with(&[(12, 0.9)], 13);
        assert_eq!(greedy_decode_number(&lg, &span(1, 1), &nt), None);
    }

    #[test]
    fn squared_error_values() {
        assert!((squared_error(10.0, Some(10.1), 1.0) - 0.005).abs() < 1e-12);
        // 0.5 * 89.9^2
        assert!((squared_error(10.0, Some(99.9), 1.0) - 4041.005).abs() < 1e-9);
        assert_eq!(squared_error(10.0, None, 1.0), 1.0);
        assert_eq!(squared_error(3.0, Some(3.0), 2.0), 0.0);
        // failure penalty dominates any prediction closer than lambda * sqrt(2)
        let lambda = 3.0;
        let gap = lambda * 2f64.sqrt() * 0.999;
        assert!(squared_error(0.0, Some(gap), lambda) < squared_error(0.0, None, lambda));
    }

    #[test]
    fn soft_digit_expectation() {
        // one-digit span at position 1 predicted by row 0: p(7)=0.6, p(9)=0.4
        let v = 12;
        let mut row = vec![-1e9; v];
        row[7] = 0.6f64.ln();
        row[9] = 0.4f64.ln();
        let mut data = row;
        data.extend(vec![0.0; v]);
        let lg = Logits { rows: 2, cols: v, data };
        let e = ex(vec![0, 7], vec![true, false], vec![NumericSpan { start: 1, end: 1, value: 7.0, feature: 0 }]);
        let nt = NumberTokens::identity_digits();
        for lambda in [1.0, 2.5] {
            let spec = LossSpec { lambda: vec![lambda], ..LossSpec::default() };
            let (estimate, _) = soft_number(&lg, &e, &e.numeric_spans[0], &nt);
            assert!((estimate - 7.8).abs() < 1e-12);
            let value = nul(&lg, &e, &spec, &nt, None);
            assert!((value - 0.5 * (0.8f64 / lambda).powi(2)).abs() < 1e-12);
        }
    }

    fn toy_schema() -> Schema {
        Schema::new(
            vec![
                FeatureSpec::numerical("Age", 0.0, 99.0, 0),
                FeatureSpec::categorical("Sex", &["Male", "Female"]),
                FeatureSpec::numerical("Weight", -5.0, 5.0, 2),
            ],
            "Sex",
            None,
        )
        .unwrap()
    }

    fn random_logits(rows: usize, cols: usize, seed: u64) -> Logits {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Logits { rows, cols, data: (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect() }
    }

    fn sample_examples(n: usize) -> (Vocab, Vec<TokenizedExample>) {
        let schema = toy_schema();
        let vocab = Vocab::build(&schema);
        let table = generate_random_table(&schema, n, 4).unwrap();
        let exs = table
            .rows
            .iter()
            .map(|r| tokenize(&encode_record(r, &schema, &[2, 0, 1]), &vocab, &schema).unwrap())
            .collect();
        (vocab, exs)
    }

    #[test]
    fn perfect_prediction_has_zero_nul() {
        let (vocab, exs) = sample_examples(5);
        let nt = NumberTokens::from_vocab(&vocab);
        for e in &exs {
            let v = vocab.len();
            let mut data = vec![-1e9; e.len() * v];
            for p in 1..e.len() {
                data[(p - 1) * v + e.ids[p] as usize] = 0.0;
            }
            let lg = Logits { rows: e.len(), cols: v, data };
            for mode in [NulMode::SoftDigit, NulMode::Reinforce] {
                let spec = LossSpec { nul_mode: mode, ..LossSpec::default() }.with_lambda(&toy_schema(), LambdaMode::Range);
                assert!(nul(&lg, e, &spec, &nt, None).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reinforce_value_is_greedy_se() {
        let (vocab, exs) = sample_examples(6);
        let nt = NumberTokens::from_vocab(&vocab);
        let spec = LossSpec { nul_mode: NulMode::Reinforce, ..LossSpec::default() }.with_lambda(&toy_schema(), LambdaMode::Range);
        for (i, e) in exs.iter().enumerate() {
            let lg = random_logits(e.len(), vocab.len(), i as u64);
            let out = example_loss(&lg, e, &spec, &nt, false);
            assert_eq!(nul(&lg, e, &spec, &nt, None), out.greedy_se);
        }
    }

    #[test]
    fn combined_identities() {
        let (vocab, exs) = sample_examples(8);
        let nt = NumberTokens::from_vocab(&vocab);
        let schema = toy_schema();
        for (i, e) in exs.iter().enumerate() {
            let lg = random_logits(e.len(), vocab.len(), 100 + i as u64);
            let ce = stage1_ce(&lg, e);
            let spec0 = LossSpec { alpha: 0.5, beta: 0.0, ..LossSpec::default() }.with_lambda(&schema, LambdaMode::Range);
            assert!((combined_loss(&lg, e, &spec0, &nt) - 0.5 * ce).abs() < 1e-9);
            assert!((combined_loss(&lg, e, &spec0, &nt) - wcel(&lg, e, 0.5)).abs() < 1e-9);
            let ws: Vec<f64> = [0.1, 0.4, 0.9].iter().map(|&a| wcel(&lg, e, a)).collect();
            let slope1 = (ws[1] - ws[0]) / 0.3;
            let slope2 = (ws[2] - ws[1]) / 0.5;
            assert!((slope1 - slope2).abs() < 1e-9);
            let s1 = LossSpec { kind: LossKind::Stage1Ce, ..LossSpec::default() };
            assert!((combined_loss(&lg, e, &s1, &nt) - ce).abs() < 1e-12);
            let mut last = 0.0;
            for beta in [0.0, 0.5, 1.0, 2.0] {
                let s = LossSpec { beta, ..spec0.clone() };
                let l = combined_loss(&lg, e, &s, &nt);
                assert!(l >= last && l >= 0.0);
                last = l;
            }
        }
    }

    fn fd_logits(spec: &LossSpec, e: &TokenizedExample, lg: &Logits, nt: &NumberTokens) -> f64 {
        let out = example_loss(lg, e, spec, nt, true);
        let g = out.dlogits.unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for k in 0..lg.data.len() {
            let mut plus = lg.clone();
            plus.data[k] += h;
            let mut minus = lg.clone();
            minus.data[k] -= h;
            let fd = (combined_loss(&plus, e, spec, nt) - combined_loss(&minus, e, spec, nt)) / (2.0 * h);
            worst = worst.max((fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6));
        }
        worst
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let (vocab, exs) = sample_examples(3);
        let nt = NumberTokens::from_vocab(&vocab);
        let schema = toy_schema();
        for (i, e) in exs.iter().enumerate() {
            let lg = random_logits(e.len(), vocab.len(), 7 + i as u64);
            for spec in [
                LossSpec::stage1(),
                LossSpec::default().with_lambda(&schema, LambdaMode::Fixed(3.0)),
                LossSpec { alpha: 0.3, beta: 2.0, ..LossSpec::default() }.with_lambda(&schema, LambdaMode::Std),
            ] {
                let worst = fd_logits(&spec, e, &lg, &nt);
                assert!(worst < 1e-5, "{worst}");
            }
        }
    }

    #[test]
    fn reinforce_gradient_is_scaled_score() {
        let (vocab, exs) = sample_examples(1);
        let nt = NumberTokens::from_vocab(&vocab);
        let e = &exs[0];
        let lg = random_logits(e.len(), vocab.len(), 3);
        let spec = LossSpec { alpha: 0.5, nul_mode: NulMode::Reinforce, ..LossSpec::default() }.with_lambda(&toy_schema(), LambdaMode::Range);
        let with = example_loss(&lg, e, &spec, &nt, true).dlogits.unwrap();
        let without = example_loss(&lg, e, &LossSpec { beta: 0.0, ..spec.clone() }, &nt, true).dlogits.unwrap();
        let v = vocab.len();
        let span = &e.numeric_spans[0];
        let se = squared_error(span.value, greedy_decode_number(&lg, span, &nt), spec.lambda_for(span.feature));
        let row = span.start - 1;
        let r = lg.row(row);
        let chosen = argmax(r);
        let probs = softmax(r);
        for k in 0..v {
            let onehot = if k == chosen { 1.0 } else { 0.0 };
            let expect = se * (probs[k] - onehot);
            assert!((with[row * v + k] - without[row * v + k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_modes() {
        let s = toy_schema();
        let r = LossSpec::default().with_lambda(&s, LambdaMode::Range);
        assert_eq!(r.lambda, vec![99.0, 1.0, 10.0]);
        let f = LossSpec::default().with_lambda(&s, LambdaMode::Fixed(2.0));
        assert_eq!(f.lambda, vec![2.0, 1.0, 2.0]);
        assert_eq!(LambdaMode::parse("fixed:0.5"), Some(LambdaMode::Fixed(0.5)));
        assert_eq!(LambdaMode::parse("fixed:-1"), None);
        assert_eq!(LambdaMode::parse("std"), Some(LambdaMode::Std));
        let degenerate = Schema::new(vec![FeatureSpec::numerical("X", 5.0, 5.0, 0)], "X", None).unwrap();
        assert_eq!(LossSpec::default().with_lambda(&degenerate, LambdaMode::Range).lambda, vec![1.0]);
    }

    #[test]
    fn spec_validation() {
        assert!(LossSpec { alpha: 1.5, ..LossSpec::default() }.validate().is_err());
        assert!(LossSpec { beta: -1.0, ..LossSpec::default() }.validate().is_err());
        assert!(LossSpec { lambda: vec![0.0], ..LossSpec::default() }.validate().is_err());
        assert!(LossSpec::default().validate().is_ok());
    }

    #[test]
    fn parse_decimal_cases() {
        assert_eq!(parse_decimal("20"), Some(20.0));
        assert_eq!(parse_decimal("-1.5"), Some(-1.5));
        assert_eq!(parse_decimal("007"), Some(7.0));
        for bad in ["", ".", "..", "-", "1.", ".5", "1-2", "1.2.3"] {
            assert_eq!(parse_decimal(bad), None, "{bad}");
        }
    }

    #[test]
    fn model_config_is_usable() {
        // sanity: a vocab-sized model produces logits the loss accepts
        let (vocab, exs) = sample_examples(1);
        let m = ModelState::init(ModelConfig { context_length: 64, ..ModelConfig::toy(vocab.len()) }, 0).unwrap();
        let lg = m.forward(&exs[0].ids).unwrap();
        let out = example_loss(&lg, &exs[0], &LossSpec::default(), &NumberTokens::from_vocab(&vocab), true);
        assert!(out.value.is_finite() && out.value > 0.0);
        assert_eq!(out.predicted_tokens, exs[0].len() - 1);
    }
}
