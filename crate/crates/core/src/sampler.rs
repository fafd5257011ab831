//! Synthetic row generation and fairness-controlled quota planning.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::decode_text;
use crate::derive_seed;
use crate::eval::{positive_label, EvalError};
use crate::model::{sample_from_logits, Decoder, ModelError, ModelState};
use crate::schema::{Record, Schema, Table, Value};
use crate::tokenizer::{TokenId, Vocab};

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_MAX_RETRIES: u32 = 8;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("invalid prompt: {0}")]
    Prompt(String),
    #[error("no rows were generated after {attempts} attempts")]
    NoRows { attempts: u64, report: Box<SamplingReport> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    RandomInit,
    ValueSpecified,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpec {
    pub mode: PromptMode,
    pub fixed_values: Vec<(String, Value)>,
    pub temperature: f64,
    /// Extra attempts after the first; 0 means one attempt per row.
    pub max_retries_per_row: u32,
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self::random_init()
    }
}

impl PromptSpec {
    pub fn random_init() -> Self {
        Self {
            mode: PromptMode::RandomInit,
            fixed_values: Vec::new(),
            temperature: DEFAULT_TEMPERATURE,
            max_retries_per_row: DEFAULT_MAX_RETRIES,
        }
    }

    pub fn value_specified(fixed_values: Vec<(String, Value)>) -> Self {
        Self { mode: PromptMode::ValueSpecified, fixed_values, ..Self::random_init() }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_retries(mut self, r: u32) -> Self {
        self.max_retries_per_row = r;
        self
    }

    pub fn validate(&self, schema: &Schema) -> Result<(), SampleError> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(SampleError::Prompt(format!("temperature must be positive, got {}", self.temperature)));
        }
        match self.mode {
            PromptMode::RandomInit if !self.fixed_values.is_empty() => {
                Err(SampleError::Prompt("random-init prompts take no fixed values".into()))
            }
            PromptMode::ValueSpecified => {
                if self.fixed_values.is_empty() || self.fixed_values.len() >= schema.len() {
                    return Err(SampleError::Prompt(format!(
                        "value-specified prompts fix between 1 and {} features, got {}",
                        schema.len() - 1,
                        self.fixed_values.len()
                    )));
                }
                let mut seen = std::collections::BTreeSet::new();
                for (name, v) in &self.fixed_values {
                    let f = schema.feature(name).ok_or_else(|| SampleError::Prompt(format!("unknown feature {name:?}")))?;
                    f.check_value(v).map_err(|e| SampleError::Prompt(format!("feature {name:?}: {e}")))?;
                    if !seen.insert(name.as_str()) {
                        return Err(SampleError::Prompt(format!("feature {name:?} is fixed twice")));
                    }
                }
                Ok(())
            }
            PromptMode::RandomInit => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SamplingReport {
    pub rows_requested: u64,
    pub rows_emitted: u64,
    pub attempts: u64,
    pub decode_failure_counts: BTreeMap<String, u64>,
    pub format_compliance: f64,
}

impl SamplingReport {
    pub fn merge(&mut self, other: &SamplingReport) {
        self.rows_requested += other.rows_requested;
        self.rows_emitted += other.rows_emitted;
        self.attempts += other.attempts;
        for (k, v) in &other.decode_failure_counts {
            *self.decode_failure_counts.entry(k.clone()).or_default() += v;
        }
        self.format_compliance = compliance(self.rows_emitted, self.attempts);
    }
}

fn compliance(successes: u64, attempts: u64) -> f64 {
    if attempts == 0 {
        0.0
    } else {
        successes as f64 / attempts as f64
    }
}

fn push_value(ids: &mut Vec<TokenId>, vocab: &Vocab, rendered: &str, numeric: bool) -> Result<(), SampleError> {
    let missing = |t: &str| SampleError::Prompt(format!("token {t:?} is not in the vocabulary"));
    if numeric {
        for ch in rendered.chars() {
            let mut buf = [0u8; 4];
            let t = ch.encode_utf8(&mut buf);
            ids.push(vocab.id(t).ok_or_else(|| missing(t))?);
        }
    } else {
        ids.push(vocab.id(rendered).ok_or_else(|| missing(rendered))?);
    }
    Ok(())
}

/// Token ids of the value-specified prompt: each fixed clause followed by
/// the separator.
fn fixed_prompt(vocab: &Vocab, schema: &Schema, fixed: &[(String, Value)]) -> Result<Vec<TokenId>, SampleError> {
    let mut ids = vec![vocab.bos()];
    for (name, value) in fixed {
        let f = schema.feature(name).ok_or_else(|| SampleError::Prompt(format!("unknown feature {name:?}")))?;
        ids.push(vocab.id(name).ok_or_else(|| SampleError::Prompt(format!("feature {name:?} not in vocabulary")))?);
        ids.push(vocab.is_id());
        push_value(&mut ids, vocab, &f.render(value), f.is_numerical())?;
        ids.push(vocab.separator_id());
    }
    Ok(ids)
}

struct RowOutcome {
    record: Option<Record>,
    attempts: u64,
    failures: Vec<&'static str>,
}

/// One generation attempt: feeds the prompt, samples until EOS, decodes.
fn attempt<R: Rng>(
    model: &ModelState,
    vocab: &Vocab,
    schema: &Schema,
    prompt: &[TokenId],
    spec: &PromptSpec,
    rng: &mut R,
) -> Result<Result<Record, &'static str>, SampleError> {
    let mut dec = Decoder::new(model);
    let mut ids = prompt.to_vec();
    let mut logits = Vec::new();
    for &id in prompt {
        logits = dec.push(id)?;
    }
    let limit = model.config().context_length;
    loop {
        let next = sample_from_logits(&logits, spec.temperature, rng);
        if next == vocab.eos() {
            break;
        }
        if next == vocab.bos() || next == vocab.pad() {
            return Ok(Err("special_token"));
        }
        if ids.len() >= limit {
            return Ok(Err("unterminated"));
        }
        ids.push(next);
        logits = dec.push(next)?;
    }
    let text = vocab.detokenize(&ids[1..]);
    let record = match decode_text(&text, schema) {
        Ok(r) => r,
        Err(e) => return Ok(Err(e.kind())),
    };
    for (name, v) in &spec.fixed_values {
        if record.get(schema, name) != Some(v) {
            return Ok(Err("fixed_mismatch"));
        }
    }
    Ok(Ok(record))
}

/// Generates `n` rows. Each row draws from its own stream of the seeded
/// generator, so output is independent of the worker count.
pub fn sample_rows(
    model: &ModelState,
    vocab: &Vocab,
    schema: &Schema,
    n: usize,
    spec: &PromptSpec,
    seed: u64,
) -> Result<(Table, SamplingReport), SampleError> {
    spec.validate(schema)?;
    if vocab.len() != model.config().vocab_size {
        return Err(SampleError::Prompt(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let fixed = match spec.mode {
        PromptMode::ValueSpecified => Some(fixed_prompt(vocab, schema, &spec.fixed_values)?),
        PromptMode::RandomInit => None,
    };
    let outcomes: Vec<Result<RowOutcome, SampleError>> = (0..n)
        .into_par_iter()
        .map(|row| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(row as u64);
            let mut failures = Vec::new();
            for a in 0..=spec.max_retries_per_row as u64 {
                let prompt = match &fixed {
                    Some(p) => p.clone(),
                    None => {
                        let f = &schema.features[rng.random_range(0..schema.len())];
                        vec![vocab.bos(), vocab.id(&f.name).expect("feature names are tokens"), vocab.is_id()]
                    }
                };
                match attempt(model, vocab, schema, &prompt, spec, &mut rng)? {
                    Ok(record) => return Ok(RowOutcome { record: Some(record), attempts: a + 1, failures }),
                    Err(kind) => failures.push(kind),
                }
            }
            Ok(RowOutcome { record: None, attempts: spec.max_retries_per_row as u64 + 1, failures })
        })
        .collect();
    let mut report = SamplingReport { rows_requested: n as u64, ..Default::default() };
    let mut rows = Vec::with_capacity(n);
    for o in outcomes {
        let o = o?;
        report.attempts += o.attempts;
        for f in o.failures {
            *report.decode_failure_counts.entry(f.to_string()).or_default() += 1;
        }
        if let Some(r) = o.record {
            rows.push(r);
        }
    }
    report.rows_emitted = rows.len() as u64;
    report.format_compliance = compliance(report.rows_emitted, report.attempts);
    if rows.is_empty() && n > 0 {
        return Err(SampleError::NoRows { attempts: report.attempts, report: Box::new(report) });
    }
    Ok((Table { schema: schema.clone(), rows }, report))
}

/// Fraction of single random-init attempts that decode into a valid row.
pub fn format_compliance_probe(
    model: &ModelState,
    vocab: &Vocab,
    schema: &Schema,
    n: usize,
    temperature: f64,
    seed: u64,
) -> Result<f64, SampleError> {
    let spec = PromptSpec::random_init().with_temperature(temperature).with_retries(0);
    match sample_rows(model, vocab, schema, n, &spec, seed) {
        Ok((_, r)) => Ok(r.format_compliance),
        Err(SampleError::NoRows { .. }) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Label counts of one sensitive group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub group: String,
    pub positives: u64,
    pub total: u64,
}

/// Per-group label counts of a table, in order of first appearance.
pub fn group_counts(table: &Table) -> Result<Vec<GroupCounts>, SampleError> {
    let schema = &table.schema;
    let s = schema.sensitive_index().ok_or_else(|| SampleError::Prompt("schema has no sensitive feature".into()))?;
    let pos = positive_label(schema)?;
    let t = schema.target_index();
    let mut out: Vec<GroupCounts> = Vec::new();
    for r in &table.rows {
        let g = schema.features[s].render(&r.values[s]);
        let idx = match out.iter().position(|c| c.group == g) {
            Some(i) => i,
            None => {
                out.push(GroupCounts { group: g, positives: 0, total: 0 });
                out.len() - 1
            }
        };
        out[idx].total += 1;
        out[idx].positives += (r.values[t].as_category() == Some(pos.as_str())) as u64;
    }
    Ok(out)
}

/// Controlled rows for one (group, label) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quota {
    pub group: String,
    pub positive: bool,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuotaPlan {
    pub controlled_rows: usize,
    pub quotas: Vec<Quota>,
    pub reference_dpdiff: f64,
    /// Gap when the controlled rows mirror the reference proportions.
    pub proportional_dpdiff: f64,
    pub predicted_dpdiff: f64,
}

impl QuotaPlan {
    /// One value-specified prompt per non-empty quota, fixing the label and
    /// the sensitive group.
    pub fn prompts(&self, schema: &Schema, base: &PromptSpec) -> Result<Vec<(PromptSpec, usize)>, SampleError> {
        let s = schema.sensitive_index().ok_or_else(|| SampleError::Prompt("schema has no sensitive feature".into()))?;
        let t = schema.target_index();
        let target = &schema.features[t];
        let cats = target.categories().ok_or_else(|| SampleError::Prompt("target is not categorical".into()))?;
        let sensitive = &schema.features[s];
        let mut out = Vec::new();
        for q in self.quotas.iter().filter(|q| q.count > 0) {
            let label = if q.positive { &cats[1] } else { &cats[0] };
            let group = sensitive.parse_cell(&q.group).map_err(SampleError::Prompt)?;
            let spec = PromptSpec {
                mode: PromptMode::ValueSpecified,
                fixed_values: vec![(target.name.clone(), Value::category(label.clone())), (sensitive.name.clone(), group)],
                ..base.clone()
            };
            out.push((spec, q.count));
        }
        Ok(out)
    }
}

/// Gap between the largest and smallest positive rate once `alloc`
/// (positives, negatives per group) is added to the scaled reference.
pub fn predicted_dpdiff(reference: &[(f64, f64)], alloc: &[(usize, usize)]) -> f64 {
    let rates: Vec<f64> = reference
        .iter()
        .zip(alloc)
        .filter_map(|(&(p, t), &(x1, x0))| {
            let den = t + (x1 + x0) as f64;
            (den > 0.0).then(|| (p + x1 as f64) / den)
        })
        .collect();
    if rates.len() < 2 {
        return 0.0;
    }
    let max = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = rates.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

/// Demographic-parity gap of raw group counts.
pub fn counts_dpdiff(counts: &[GroupCounts]) -> f64 {
    let raw: Vec<(f64, f64)> = counts.iter().map(|c| (c.positives as f64, c.total as f64)).collect();
    predicted_dpdiff(&raw, &vec![(0, 0); raw.len()])
}

/// Largest-remainder split of `budget` in proportion to `weights`.
fn proportional(weights: &[f64], budget: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        let mut out = vec![0; weights.len()];
        for i in 0..budget {
            out[i % weights.len()] += 1;
        }
        return out;
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / total * budget as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = budget - out.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        out[i] += 1;
    }
    out
}

fn to_pairs(flat: &[usize]) -> Vec<(usize, usize)> {
    flat.chunks(2).map(|c| (c[0], c[1])).collect()
}

const GAP_TIE: f64 = 1e-12;

/// Allocates `round(rho * n_total)` controlled rows over (group, label)
/// cells to minimise the demographic-parity gap of the combined data, with
/// the uncontrolled remainder assumed to follow `reference`. Two groups are
/// solved exactly; more groups use greedy single-row moves from the
/// proportional split. Ties prefer the allocation closest to proportional.
pub fn plan_fairness_quota(reference: &[GroupCounts], rho: f64, n_total: usize) -> Result<QuotaPlan, SampleError> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(SampleError::Prompt(format!("controlled fraction must lie in [0, 1], got {rho}")));
    }
    if reference.is_empty() || reference.iter().any(|c| c.total == 0 || c.positives > c.total) {
        return Err(SampleError::Prompt("reference counts must be non-empty for every group".into()));
    }
    let budget = (rho * n_total as f64).round() as usize;
    let ref_total: u64 = reference.iter().map(|c| c.total).sum();
    let scale = (n_total - budget.min(n_total)) as f64 / ref_total as f64;
    let scaled: Vec<(f64, f64)> = reference.iter().map(|c| (c.positives as f64 * scale, c.total as f64 * scale)).collect();
    let weights: Vec<f64> =
        reference.iter().flat_map(|c| [c.positives as f64, (c.total - c.positives) as f64]).collect();
    let prop = proportional(&weights, budget);
    let groups: Vec<String> = reference.iter().map(|c| c.group.clone()).collect();
    let reference_dpdiff = counts_dpdiff(reference);
    let proportional_dpdiff = predicted_dpdiff(&scaled, &to_pairs(&prop));
    let l1 = |a: &[usize]| a.iter().zip(&prop).map(|(&x, &y)| x.abs_diff(y)).sum::<usize>();

    let best = if reference.len() == 2 {
        let mut best = prop.clone();
        let mut best_gap = proportional_dpdiff;
        let mut best_l1 = 0;
        let ((p1, t1), (p2, t2)) = (scaled[0], scaled[1]);
        for b1 in 0..=budget {
            let b2 = budget - b1;
            for x1 in 0..=b1 {
                let den1 = t1 + b1 as f64;
                let ideal = if den1 > 0.0 { (p1 + x1 as f64) / den1 * (t2 + b2 as f64) - p2 } else { 0.0 };
                let lo = ideal.floor().clamp(0.0, b2 as f64) as usize;
                let hi = ideal.ceil().clamp(0.0, b2 as f64) as usize;
                for x2 in [lo, hi] {
                    let cand = [x1, b1 - x1, x2, b2 - x2];
                    let gap = predicted_dpdiff(&scaled, &to_pairs(&cand));
                    let d = l1(&cand);
                    if gap < best_gap - GAP_TIE || (gap <= best_gap + GAP_TIE && d < best_l1) {
                        best = cand.to_vec();
                        best_gap = gap;
                        best_l1 = d;
                    }
                }
            }
        }
        best
    } else {
        let mut cur = prop.clone();
        let mut cur_gap = proportional_dpdiff;
        loop {
            let mut step: Option<(f64, usize, usize)> = None;
            for src in 0..cur.len() {
                if cur[src] == 0 {
                    continue;
                }
                for dst in 0..cur.len() {
                    if dst == src {
                        continue;
                    }
                    cur[src] -= 1;
                    cur[dst] += 1;
                    let gap = predicted_dpdiff(&scaled, &to_pairs(&cur));
                    cur[src] += 1;
                    cur[dst] -= 1;
                    if gap < cur_gap - GAP_TIE && step.is_none_or(|(g, _, _)| gap < g - GAP_TIE) {
                        step = Some((gap, src, dst));
                    }
                }
            }
            match step {
                Some((gap, src, dst)) => {
                    cur[src] -= 1;
                    cur[dst] += 1;
                    cur_gap = gap;
                }
                None => break,
            }
        }
        cur
    };
    let predicted = predicted_dpdiff(&scaled, &to_pairs(&best));
    let quotas = groups
        .iter()
        .enumerate()
        .flat_map(|(i, g)| {
            [
                Quota { group: g.clone(), positive: true, count: best[2 * i] },
                Quota { group: g.clone(), positive: false, count: best[2 * i + 1] },
            ]
        })
        .collect();
    Ok(QuotaPlan { controlled_rows: budget, quotas, reference_dpdiff, proportional_dpdiff, predicted_dpdiff: predicted })
}

/// One point of a controlled-generation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub rho: f64,
    pub plan: QuotaPlan,
    pub controlled_emitted: usize,
    pub data_dpdiff: f64,
    pub report: SamplingReport,
    #[serde(skip)]
    pub table: Option<Table>,
}

const TOP_UP_ROUNDS: u64 = 4;

/// For each controlled fraction: keeps the leading uncontrolled rows of one
/// random-init batch, plans quotas from their label counts and fills them
/// with value-specified generations. Only synthetic rows are consulted.
pub fn fairness_sweep(
    model: &ModelState,
    vocab: &Vocab,
    schema: &Schema,
    n_total: usize,
    rhos: &[f64],
    base: &PromptSpec,
    seed: u64,
) -> Result<Vec<SweepPoint>, SampleError> {
    let random = PromptSpec { mode: PromptMode::RandomInit, fixed_values: Vec::new(), ..base.clone() };
    let (batch, base_report) = sample_rows(model, vocab, schema, n_total, &random, seed)?;
    let n = batch.len();
    let mut out = Vec::with_capacity(rhos.len());
    for (ri, &rho) in rhos.iter().enumerate() {
        let budget = (rho * n as f64).round() as usize;
        let prefix = Table { schema: schema.clone(), rows: batch.rows[..n - budget.min(n)].to_vec() };
        let counts = group_counts(&prefix)?;
        let plan = plan_fairness_quota(&counts, rho, n)?;
        let mut report = base_report.clone();
        let mut rows = prefix.rows;
        for (qi, (spec, count)) in plan.prompts(schema, base)?.into_iter().enumerate() {
            let mut missing = count;
            for round in 0..TOP_UP_ROUNDS {
                if missing == 0 {
                    break;
                }
                let s = derive_seed(seed, ((ri as u64 + 1) << 40) | ((qi as u64) << 8) | round);
                match sample_rows(model, vocab, schema, missing, &spec, s) {
                    Ok((t, r)) => {
                        missing -= t.len();
                        rows.extend(t.rows);
                        report.merge(&r);
                    }
                    Err(SampleError::NoRows { report: r, .. }) => report.merge(&r),
                    Err(e) => return Err(e),
                }
            }
            if missing > 0 {
                log::warn!("rho {rho}: {missing} controlled rows could not be generated");
            }
        }
        let table = Table { schema: schema.clone(), rows };
        let controlled_emitted = table.len() - (n - budget.min(n));
        let data_dpdiff = counts_dpdiff(&group_counts(&table)?);
        out.push(SweepPoint { rho, controlled_emitted, data_dpdiff, plan, report, table: Some(table) });
    }
    Ok(out)
}
