//! Fidelity, utility, privacy-adjacent and fairness measurements.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::token_nll;
use crate::model::{ModelError, ModelState};
use crate::schema::{FeatureKind, Schema, Table, Value};
use crate::tokenizer::TokenizedExample;

pub const DEFAULT_QUANTILE_GROUPS: usize = 20;
pub const DEFAULT_MAX_SUBSETS: usize = 2000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("subset size {k} is outside 1..={features}")]
    BadK { k: usize, features: usize },
    #[error("tables have different schemas")]
    SchemaMismatch,
    #[error("empty table: {0}")]
    Empty(&'static str),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-feature binning: quantile cut points for numerical features and
/// identity bins for categorical ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningSpec {
    /// `Some(cuts)` for numerical features, `None` for categorical.
    pub cuts: Vec<Option<Vec<f64>>>,
    pub cardinality: Vec<usize>,
}

impl BinningSpec {
    /// Cut points at the `groups`-quantiles of the reference table; a value
    /// equal to a cut point falls into the lower bin.
    pub fn from_reference(reference: &Table, groups: usize) -> Self {
        let schema = &reference.schema;
        let mut cuts = Vec::new();
        let mut cardinality = Vec::new();
        for (i, f) in schema.features.iter().enumerate() {
            match &f.kind {
                FeatureKind::Categorical { categories } => {
                    cuts.push(None);
                    cardinality.push(categories.len());
                }
                FeatureKind::Numerical { .. } => {
                    let mut vals: Vec<f64> = reference.column(i).filter_map(Value::as_number).collect();
                    vals.sort_by(|a, b| a.total_cmp(b));
                    let mut c: Vec<f64> = if vals.is_empty() {
                        Vec::new()
                    } else {
                        (1..groups).map(|k| quantile(&vals, k as f64 / groups as f64)).collect()
                    };
                    c.dedup();
                    cardinality.push(c.len() + 1);
                    cuts.push(Some(c));
                }
            }
        }
        Self { cuts, cardinality }
    }

    pub fn bin(&self, feature: usize, value: &Value, schema: &Schema) -> u32 {
        match (&self.cuts[feature], value) {
            (Some(c), Value::Number(x)) => c.partition_point(|cut| cut < x) as u32,
            (None, Value::Category(s)) => schema.features[feature]
                .categories()
                .and_then(|cats| cats.iter().position(|c| c == s))
                .expect("validated category") as u32,
            _ => panic!("value kind does not match feature {feature}"),
        }
    }

    pub fn bin_table(&self, table: &Table) -> Vec<Vec<u32>> {
        table
            .rows
            .iter()
            .map(|r| r.values.iter().enumerate().map(|(i, v)| self.bin(i, v, &table.schema)).collect())
            .collect()
    }
}

/// Mean k-way TVD and the per-subset values behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvdResult {
    pub k: usize,
    pub mean: f64,
    pub subsets: Vec<(Vec<usize>, f64)>,
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn n_choose_k(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Feature subsets of size `k`: all of them when there are at most
/// `max_subsets`, else a seeded sample of distinct subsets.
pub fn feature_subsets(n: usize, k: usize, max_subsets: usize, seed: u64) -> Vec<Vec<usize>> {
    if n_choose_k(n, k) <= max_subsets as u128 {
        return combinations(n, k);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut all: Vec<usize> = (0..n).collect();
    while seen.len() < max_subsets {
        all.shuffle(&mut rng);
        let mut s = all[..k].to_vec();
        s.sort_unstable();
        seen.insert(s);
    }
    seen.into_iter().collect()
}

fn subset_tvd(a: &[Vec<u32>], b: &[Vec<u32>], subset: &[usize], card: &[usize]) -> f64 {
    let key = |row: &Vec<u32>| subset.iter().fold(0u128, |acc, &f| acc * card[f] as u128 + row[f] as u128);
    let mut cells: BTreeMap<u128, (u64, u64)> = BTreeMap::new();
    for r in a {
        cells.entry(key(r)).or_default().0 += 1;
    }
    for r in b {
        cells.entry(key(r)).or_default().1 += 1;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    0.5 * cells.values().map(|&(x, y)| (x as f64 / na - y as f64 / nb).abs()).sum::<f64>()
}

/// Total variation distance between `k`-feature joint histograms of the two
/// tables, averaged over feature subsets.
pub fn kway_tvd(
    synthetic: &Table,
    reference: &Table,
    k: usize,
    binning: &BinningSpec,
    max_subsets: usize,
    seed: u64,
) -> Result<TvdResult, EvalError> {
    let n = reference.schema.len();
    if synthetic.schema != reference.schema {
        return Err(EvalError::SchemaMismatch);
    }
    if k == 0 || k > n {
        return Err(EvalError::BadK { k, features: n });
    }
    if synthetic.is_empty() || reference.is_empty() {
        return Err(EvalError::Empty("tvd input"));
    }
    let a = binning.bin_table(synthetic);
    let b = binning.bin_table(reference);
    let subsets = feature_subsets(n, k, max_subsets, seed);
    let values: Vec<f64> = subsets.par_iter().map(|s| subset_tvd(&a, &b, s, &binning.cardinality)).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(TvdResult { k, mean, subsets: subsets.into_iter().zip(values).collect() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcrReport {
    pub distances: Vec<f64>,
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub min: f64,
    pub median: f64,
    /// Fraction of synthetic rows that exactly replicate a training row.
    pub zero_fraction: f64,
}

fn normalised_rows(table: &Table, ranges: &[Option<(f64, f64)>]) -> Vec<Vec<(f64, u32)>> {
    table
        .rows
        .iter()
        .map(|r| {
            r.values
                .iter()
                .enumerate()
                .map(|(i, v)| match (v, ranges[i]) {
                    (Value::Number(x), Some((lo, width))) => (if width > 0.0 { (x - lo) / width } else { 0.0 }, 0),
                    (Value::Category(c), None) => (
                        0.0,
                        table.schema.features[i].categories().and_then(|cs| cs.iter().position(|x| x == c)).unwrap_or(0)
                            as u32,
                    ),
                    _ => panic!("value kind does not match feature {i}"),
                })
                .collect()
        })
        .collect()
}

/// Distance from every synthetic row to its nearest training row, with
/// numerical features min-max normalised by the training table and
/// categorical features contributing 0 or 1.
pub fn dcr_distances(synthetic: &Table, train: &Table) -> Result<Vec<f64>, EvalError> {
    if train.is_empty() {
        return Err(EvalError::Empty("training table"));
    }
    if synthetic.schema != train.schema {
        return Err(EvalError::SchemaMismatch);
    }
    let ranges: Vec<Option<(f64, f64)>> = train
        .schema
        .features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            f.is_numerical().then(|| {
                let (lo, hi) = train
                    .column(i)
                    .filter_map(Value::as_number)
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
                (lo, hi - lo)
            })
        })
        .collect();
    let t = normalised_rows(train, &ranges);
    let s = normalised_rows(synthetic, &ranges);
    let numeric: Vec<bool> = ranges.iter().map(Option::is_some).collect();
    Ok(s.par_iter()
        .map(|row| {
            t.iter()
                .map(|cand| {
                    row.iter()
                        .zip(cand)
                        .zip(&numeric)
                        .map(|((a, b), &num)| {
                            if num {
                                (a.0 - b.0).powi(2)
                            } else if a.1 == b.1 {
                                0.0
                            } else {
                                1.0
                            }
                        })
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect())
}

pub fn dcr_histogram(synthetic: &Table, train: &Table, bins: usize) -> Result<DcrReport, EvalError> {
    if bins == 0 {
        return Err(EvalError::Invalid("histogram needs at least one bin".into()));
    }
    let distances = dcr_distances(synthetic, train)?;
    if distances.is_empty() {
        return Err(EvalError::Empty("synthetic table"));
    }
    let mut sorted = distances.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let max = *sorted.last().expect("non-empty");
    let width = if max > 0.0 { max / bins as f64 } else { 1.0 };
    let edges: Vec<f64> = (0..=bins).map(|i| i as f64 * width).collect();
    let mut counts = vec![0u64; bins];
    for &d in &distances {
        counts[((d / width) as usize).min(bins - 1)] += 1;
    }
    let zero_fraction = distances.iter().filter(|&&d| d == 0.0).count() as f64 / distances.len() as f64;
    Ok(DcrReport { min: sorted[0], median: quantile(&sorted, 0.5), edges, counts, zero_fraction, distances })
}

/// Probability that a random positive outranks a random negative, ties
/// counted as one half. `None` when either class is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * order[i..=j].iter().filter(|&&o| labels[o]).count() as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Positive class of a binary target: its last category.
pub fn positive_label(schema: &Schema) -> Result<String, EvalError> {
    let f = &schema.features[schema.target_index()];
    match f.categories() {
        Some(c) if c.len() == 2 => Ok(c[1].clone()),
        _ => Err(EvalError::Invalid(format!("target feature {} is not a binary categorical feature", f.name))),
    }
}

pub fn target_labels(table: &Table) -> Result<Vec<bool>, EvalError> {
    let pos = positive_label(&table.schema)?;
    let t = table.schema.target_index();
    Ok(table.rows.iter().map(|r| r.values[t].as_category() == Some(pos.as_str())).collect())
}

fn group_keys(table: &Table, feature: usize) -> Vec<String> {
    table.rows.iter().map(|r| table.schema.features[feature].render(&r.values[feature])).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub data_dpdiff: f64,
    pub model_dpdiff: Option<f64>,
    pub eo_diff: Option<f64>,
    /// Groups whose TPR or FPR is undefined and were left out of the EO gap.
    pub undefined_groups: Vec<String>,
}

fn spread(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.len() < 2 {
        return None;
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    Some(max - min)
}

/// Largest pairwise gap in positive-label rate across groups.
pub fn dpdiff(groups: &[String], positive: &[bool]) -> f64 {
    let mut stats: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (g, &p) in groups.iter().zip(positive) {
        let e = stats.entry(g.as_str()).or_default();
        e.0 += p as usize;
        e.1 += 1;
    }
    spread(stats.values().map(|&(p, n)| p as f64 / n as f64)).unwrap_or(0.0)
}

/// Demographic-parity gap of the data labels and, when predictions are
/// given, of the predictions plus the equalized-odds gap.
pub fn fairness_metrics(table: &Table, predictions: Option<&[bool]>) -> Result<FairnessReport, EvalError> {
    let s = table
        .schema
        .sensitive_index()
        .ok_or_else(|| EvalError::Invalid("schema has no sensitive feature".into()))?;
    let labels = target_labels(table)?;
    let groups = group_keys(table, s);
    let distinct: BTreeSet<&String> = groups.iter().collect();
    if distinct.len() < 2 {
        return Err(EvalError::Invalid("sensitive feature needs at least two groups".into()));
    }
    let data_dpdiff = dpdiff(&groups, &labels);
    let Some(pred) = predictions else {
        return Ok(FairnessReport { data_dpdiff, model_dpdiff: None, eo_diff: None, undefined_groups: Vec::new() });
    };
    if pred.len() != labels.len() {
        return Err(EvalError::Invalid("prediction count differs from row count".into()));
    }
    let model_dpdiff = dpdiff(&groups, pred);
    // per group: (tp, positives, fp, negatives)
    let mut conf: BTreeMap<&str, (usize, usize, usize, usize)> = BTreeMap::new();
    for ((g, &y), &p) in groups.iter().zip(&labels).zip(pred) {
        let e = conf.entry(g.as_str()).or_default();
        if y {
            e.0 += p as usize;
            e.1 += 1;
        } else {
            e.2 += p as usize;
            e.3 += 1;
        }
    }
    let mut undefined_groups = Vec::new();
    for (g, c) in &conf {
        if c.1 == 0 || c.3 == 0 {
            log::warn!("group {g} lacks positives or negatives; excluded from the equalized-odds gap");
            undefined_groups.push(g.to_string());
        }
    }
    let tpr = spread(conf.values().filter(|c| c.1 > 0).map(|c| c.0 as f64 / c.1 as f64));
    let fpr = spread(conf.values().filter(|c| c.3 > 0).map(|c| c.2 as f64 / c.3 as f64));
    let eo_diff = match (tpr, fpr) {
        (None, None) => None,
        (a, b) => Some(a.unwrap_or(0.0).max(b.unwrap_or(0.0))),
    };
    Ok(FairnessReport { data_dpdiff, model_dpdiff: Some(model_dpdiff), eo_diff, undefined_groups })
}

/// `exp` of the mean next-token cross entropy over all predicted positions.
pub fn perplexity(model: &ModelState, examples: &[TokenizedExample]) -> Result<f64, EvalError> {
    let parts: Vec<Result<(f64, usize), EvalError>> = examples
        .par_iter()
        .map(|e| {
            let logits = model.forward(&e.ids)?;
            Ok((token_nll(&logits, &e.ids).iter().sum::<f64>(), e.ids.len().saturating_sub(1)))
        })
        .collect();
    let (mut total, mut count) = (0.0, 0usize);
    for p in parts {
        let (t, c) = p?;
        total += t;
        count += c;
    }
    if count == 0 {
        return Err(EvalError::Empty("no predicted tokens"));
    }
    Ok((total / count as f64).exp())
}

/// Hyperparameter grid for the boosted-tree learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_estimators: Vec<usize>,
    pub max_depth: Vec<usize>,
    pub learning_rate: Vec<f64>,
}

impl GridSpec {
    pub fn desk() -> Self {
        Self { n_estimators: vec![50, 100], max_depth: vec![3, 5], learning_rate: vec![0.05, 0.1] }
    }

    pub fn full() -> Self {
        Self { n_estimators: vec![100, 200, 300], max_depth: vec![3, 5, 10, 20], learning_rate: vec![0.01, 0.05, 0.1] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbtParams {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
}

const GBT_BINS: usize = 32;
const GBT_LAMBDA: f64 = 1.0;
const GBT_MIN_CHILD_WEIGHT: f64 = 1.0;

/// Features discretised for histogram splits.
#[derive(Debug, Clone)]
struct FeatureMap {
    /// `Some(cuts)` for numerical features.
    cuts: Vec<Option<Vec<f64>>>,
    bins: Vec<usize>,
}

impl FeatureMap {
    fn fit(table: &Table) -> Self {
        let spec = BinningSpec::from_reference(table, GBT_BINS);
        Self { bins: spec.cardinality.clone(), cuts: spec.cuts }
    }

    fn transform(&self, table: &Table) -> Vec<Vec<u32>> {
        let spec = BinningSpec { cuts: self.cuts.clone(), cardinality: self.bins.clone() };
        spec.bin_table(table)
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(f64),
    Split { feature: usize, left_bins: Vec<bool>, left: Box<Node>, right: Box<Node> },
}

impl Node {
    fn predict(&self, x: &[u32]) -> f64 {
        match self {
            Node::Leaf(v) => *v,
            Node::Split { feature, left_bins, left, right } => {
                if left_bins.get(x[*feature] as usize).copied().unwrap_or(false) {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }
}

struct TreeBuilder<'a> {
    x: &'a [Vec<u32>],
    g: &'a [f64],
    h: &'a [f64],
    bins: &'a [usize],
    ordered: &'a [bool],
    /// The label column, never offered as a split.
    target: usize,
    max_depth: usize,
}

impl TreeBuilder<'_> {
    fn leaf(&self, rows: &[usize]) -> Node {
        let (gs, hs) = rows.iter().fold((0.0, 0.0), |(a, b), &r| (a + self.g[r], b + self.h[r]));
        Node::Leaf(-gs / (hs + GBT_LAMBDA))
    }

    fn build(&self, rows: &[usize], depth: usize) -> Node {
        if depth >= self.max_depth || rows.len() < 2 {
            return self.leaf(rows);
        }
        let (gt, ht) = rows.iter().fold((0.0, 0.0), |(a, b), &r| (a + self.g[r], b + self.h[r]));
        let parent = gt * gt / (ht + GBT_LAMBDA);
        let mut best: Option<(f64, usize, Vec<bool>)> = None;
        for f in (0..self.bins.len()).filter(|&f| f != self.target) {
            let nb = self.bins[f];
            let mut gh = vec![(0.0f64, 0.0f64); nb];
            for &r in rows {
                let b = self.x[r][f] as usize;
                gh[b].0 += self.g[r];
                gh[b].1 += self.h[r];
            }
            let mut order: Vec<usize> = (0..nb).filter(|&b| gh[b].1 > 0.0).collect();
            if !self.ordered[f] {
                // categories sorted by gradient ratio admit an optimal prefix split
                order.sort_by(|&a, &b| (gh[a].0 / gh[a].1).total_cmp(&(gh[b].0 / gh[b].1)).then(a.cmp(&b)));
            }
            let (mut gl, mut hl) = (0.0, 0.0);
            for (i, &b) in order.iter().enumerate().take(order.len().saturating_sub(1)) {
                gl += gh[b].0;
                hl += gh[b].1;
                let (gr, hr) = (gt - gl, ht - hl);
                if hl < GBT_MIN_CHILD_WEIGHT || hr < GBT_MIN_CHILD_WEIGHT {
                    continue;
                }
                let gain = 0.5 * (gl * gl / (hl + GBT_LAMBDA) + gr * gr / (hr + GBT_LAMBDA) - parent);
                if gain > 1e-12 && best.as_ref().is_none_or(|(bg, _, _)| gain > *bg) {
                    let mut left = vec![false; nb];
                    for &lb in &order[..=i] {
                        left[lb] = true;
                    }
                    if self.ordered[f] {
                        // unseen bins below the split point go left too
                        let top = order[i];
                        left.iter_mut().take(top + 1).for_each(|l| *l = true);
                    }
                    best = Some((gain, f, left));
                }
            }
        }
        let Some((_, feature, left_bins)) = best else { return self.leaf(rows) };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| left_bins[self.x[r][feature] as usize]);
        Node::Split {
            feature,
            left: Box::new(self.build(&l, depth + 1)),
            right: Box::new(self.build(&r, depth + 1)),
            left_bins,
        }
    }
}

/// Gradient-boosted trees on the logistic loss.
#[derive(Debug, Clone)]
pub struct Gbt {
    map: FeatureMap,
    base: f64,
    learning_rate: f64,
    trees: Vec<Node>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Gbt {
    /// Fits `n_estimators` trees and returns the model together with
    /// snapshot margins on `eval` after each tree count in `checkpoints`.
    fn fit_with_snapshots(
        train: &Table,
        labels: &[bool],
        max_depth: usize,
        learning_rate: f64,
        n_estimators: usize,
        eval: Option<&Table>,
        checkpoints: &[usize],
    ) -> (Self, Vec<Vec<f64>>) {
        let map = FeatureMap::fit(train);
        let x = map.transform(train);
        let ordered: Vec<bool> = map.cuts.iter().map(Option::is_some).collect();
        let target = train.schema.target_index();
        let pos = labels.iter().filter(|&&l| l).count() as f64;
        let rate = (pos / labels.len() as f64).clamp(1e-6, 1.0 - 1e-6);
        let base = (rate / (1.0 - rate)).ln();
        let mut margin = vec![base; labels.len()];
        let ex = eval.map(|t| map.transform(t));
        let mut eval_margin = ex.as_ref().map(|e| vec![base; e.len()]);
        let mut snaps = Vec::new();
        let mut trees = Vec::with_capacity(n_estimators);
        let all: Vec<usize> = (0..labels.len()).collect();
        for t in 1..=n_estimators {
            let (g, h): (Vec<f64>, Vec<f64>) = margin
                .iter()
                .zip(labels)
                .map(|(&m, &y)| {
                    let p = sigmoid(m);
                    (p - y as u8 as f64, (p * (1.0 - p)).max(1e-16))
                })
                .unzip();
            let builder = TreeBuilder { x: &x, g: &g, h: &h, bins: &map.bins, ordered: &ordered, target, max_depth };
            let tree = builder.build(&all, 0);
            for (m, row) in margin.iter_mut().zip(&x) {
                *m += learning_rate * tree.predict(row);
            }
            if let (Some(em), Some(ex)) = (eval_margin.as_mut(), ex.as_ref()) {
                for (m, row) in em.iter_mut().zip(ex) {
                    *m += learning_rate * tree.predict(row);
                }
                if checkpoints.contains(&t) {
                    snaps.push(em.clone());
                }
            }
            trees.push(tree);
        }
        (Self { map, base, learning_rate, trees }, snaps)
    }

    pub fn fit(train: &Table, labels: &[bool], params: GbtParams) -> Self {
        Self::fit_with_snapshots(train, labels, params.max_depth, params.learning_rate, params.n_estimators, None, &[]).0
    }

    /// Positive-class probabilities.
    pub fn predict_proba(&self, table: &Table) -> Vec<f64> {
        self.map
            .transform(table)
            .iter()
            .map(|row| sigmoid(self.base + self.learning_rate * self.trees.iter().map(|t| t.predict(row)).sum::<f64>()))
            .collect()
    }
}

fn accuracy(scores: &[f64], labels: &[bool]) -> f64 {
    scores.iter().zip(labels).filter(|(&s, &y)| (s >= 0.5) == y).count() as f64 / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamResult {
    pub accuracy: f64,
    /// `None` when the synthetic target has a single class.
    pub auc: Option<f64>,
    pub params: Option<GbtParams>,
    pub cv_accuracy: Option<f64>,
    pub note: Option<String>,
    #[serde(skip)]
    pub test_scores: Vec<f64>,
}

fn subset_table(table: &Table, idx: &[usize]) -> Table {
    Table { schema: table.schema.clone(), rows: idx.iter().map(|&i| table.rows[i].clone()).collect() }
}

/// Grid-searched, cross-validated boosted trees fitted on synthetic rows
/// and scored on real test rows.
pub fn gbt_downstream(
    synthetic_train: &Table,
    real_test: &Table,
    grid: &GridSpec,
    folds: usize,
    seed: u64,
) -> Result<DownstreamResult, EvalError> {
    if synthetic_train.is_empty() {
        return Err(EvalError::Empty("synthetic training table"));
    }
    if real_test.is_empty() {
        return Err(EvalError::Empty("test table"));
    }
    let y = target_labels(synthetic_train)?;
    let y_test = target_labels(real_test)?;
    let pos = y.iter().filter(|&&l| l).count();
    if pos == 0 || pos == y.len() {
        let constant = if pos == 0 { 0.0 } else { 1.0 };
        let scores = vec![constant; y_test.len()];
        return Ok(DownstreamResult {
            accuracy: accuracy(&scores, &y_test),
            auc: None,
            params: None,
            cv_accuracy: None,
            note: Some("synthetic target has a single class; AUC undefined".into()),
            test_scores: scores,
        });
    }
    let folds = folds.clamp(2, synthetic_train.len());
    let mut idx: Vec<usize> = (0..synthetic_train.len()).collect();
    idx.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let fold_of: Vec<Vec<usize>> = (0..folds).map(|f| idx.iter().copied().skip(f).step_by(folds).collect()).collect();
    let mut counts = grid.n_estimators.clone();
    counts.sort_unstable();
    counts.dedup();
    let max_trees = *counts.last().ok_or_else(|| EvalError::Invalid("empty estimator grid".into()))?;
    let combos: Vec<(usize, f64, usize)> = grid
        .max_depth
        .iter()
        .flat_map(|&d| grid.learning_rate.iter().flat_map(move |&lr| (0..folds).map(move |f| (d, lr, f))))
        .collect();
    // (depth, lr, fold) -> (accuracy, auc) per estimator count
    let fold_scores: Vec<Vec<(f64, f64)>> = combos
        .par_iter()
        .map(|&(d, lr, f)| {
            let held = &fold_of[f];
            let train_idx: Vec<usize> = (0..folds).filter(|&o| o != f).flat_map(|o| fold_of[o].iter().copied()).collect();
            let tr = subset_table(synthetic_train, &train_idx);
            let ytr: Vec<bool> = train_idx.iter().map(|&i| y[i]).collect();
            let va = subset_table(synthetic_train, held);
            let yva: Vec<bool> = held.iter().map(|&i| y[i]).collect();
            let (_, snaps) = Gbt::fit_with_snapshots(&tr, &ytr, d, lr, max_trees, Some(&va), &counts);
            snaps
                .iter()
                .map(|m| {
                    let p: Vec<f64> = m.iter().map(|&z| sigmoid(z)).collect();
                    (accuracy(&p, &yva), auc(&p, &yva).unwrap_or(0.5))
                })
                .collect()
        })
        .collect();
    let mut best: Option<(f64, f64, GbtParams)> = None;
    for (di, &d) in grid.max_depth.iter().enumerate() {
        for (li, &lr) in grid.learning_rate.iter().enumerate() {
            for (ci, &n) in counts.iter().enumerate() {
                let base = (di * grid.learning_rate.len() + li) * folds;
                let (acc, a) = (0..folds)
                    .map(|f| fold_scores[base + f][ci])
                    .fold((0.0, 0.0), |(x, y), (p, q)| (x + p / folds as f64, y + q / folds as f64));
                let better = match &best {
                    None => true,
                    Some((ba, bu, _)) => acc > *ba || (acc == *ba && a > *bu),
                };
                if better {
                    best = Some((acc, a, GbtParams { n_estimators: n, max_depth: d, learning_rate: lr }));
                }
            }
        }
    }
    let (cv_acc, _, params) = best.expect("non-empty grid");
    let model = Gbt::fit(synthetic_train, &y, params);
    let scores = model.predict_proba(real_test);
    Ok(DownstreamResult {
        accuracy: accuracy(&scores, &y_test),
        auc: auc(&scores, &y_test),
        params: Some(params),
        cv_accuracy: Some(cv_acc),
        note: None,
        test_scores: scores,
    })
}

/// Options for [`evaluate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub max_k: usize,
    pub quantile_groups: usize,
    pub max_subsets: usize,
    pub dcr_bins: usize,
    pub grid: GridSpec,
    pub folds: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_k: 5,
            quantile_groups: DEFAULT_QUANTILE_GROUPS,
            max_subsets: DEFAULT_MAX_SUBSETS,
            dcr_bins: 20,
            grid: GridSpec::desk(),
            folds: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tvd: Vec<TvdResult>,
    pub dcr: DcrReport,
    pub downstream: DownstreamResult,
    pub fairness: Option<FairnessReport>,
    /// Why `fairness` is absent even though the schema names a sensitive feature.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fairness_note: Option<String>,
}

/// Full metric suite: TVD against the test table, DCR against the training
/// table, downstream utility on the test table and fairness of the
/// synthetic labels plus the downstream predictions.
pub fn evaluate(synthetic: &Table, train: &Table, test: &Table, opts: &EvalOptions) -> Result<EvalReport, EvalError> {
    let binning = BinningSpec::from_reference(test, opts.quantile_groups);
    let tvd = (1..=opts.max_k.min(test.schema.len()))
        .map(|k| kway_tvd(synthetic, test, k, &binning, opts.max_subsets, opts.seed))
        .collect::<Result<Vec<_>, _>>()?;
    let dcr = dcr_histogram(synthetic, train, opts.dcr_bins)?;
    let downstream = gbt_downstream(synthetic, test, &opts.grid, opts.folds, opts.seed)?;
    let mut fairness_note = None;
    let fairness = match synthetic.schema.sensitive_index() {
        Some(s) if distinct_groups(synthetic, s) < 2 || distinct_groups(test, s) < 2 => {
            fairness_note = Some(format!(
                "fairness undefined: {} needs at least two groups in both the synthetic and the test table",
                synthetic.schema.features[s].name
            ));
            None
        }
        Some(_) => {
            let data = fairness_metrics(synthetic, None)?;
            let preds: Vec<bool> = downstream.test_scores.iter().map(|&s| s >= 0.5).collect();
            let model = fairness_metrics(test, Some(&preds))?;
            Some(FairnessReport { data_dpdiff: data.data_dpdiff, ..model })
        }
        None => None,
    };
    Ok(EvalReport { tvd, dcr, downstream, fairness, fairness_note })
}

fn distinct_groups(table: &Table, column: usize) -> usize {
    group_keys(table, column).into_iter().collect::<BTreeSet<_>>().len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{generate_random_table, FeatureSpec, Record};
    use proptest::prelude::*;
    use rand::Rng;

    fn binary_schema() -> Schema {
        Schema::new(
            vec![FeatureSpec::categorical("A", &["0", "1"]), FeatureSpec::categorical("B", &["0", "1"])],
            "B",
            Some("A".into()),
        )
        .unwrap()
    }

    fn table(schema: &Schema, rows: &[[&str; 2]]) -> Table {
        Table::new(
            schema.clone(),
            rows.iter().map(|r| Record::new(r.iter().map(|v| Value::category(*v)).collect())).collect(),
        )
        .unwrap()
    }

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert!((quantile(&v, 0.1) - 1.3).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_lower_bin() {
        let s = Schema::new(vec![FeatureSpec::numerical("X", 0.0, 10.0, 0)], "X", None).unwrap();
        let rows: Vec<Record> = (0..=10).map(|i| Record::new(vec![Value::number(i as f64)])).collect();
        let t = Table::new(s.clone(), rows).unwrap();
        let b = BinningSpec::from_reference(&t, 2);
        assert_eq!(b.cuts[0], Some(vec![5.0]));
        assert_eq!(b.bin(0, &Value::number(5.0), &s), 0);
        assert_eq!(b.bin(0, &Value::number(6.0), &s), 1);
        let constant = Table::new(s.clone(), vec![Record::new(vec![Value::number(3.0)]); 5]).unwrap();
        assert_eq!(BinningSpec::from_reference(&constant, 20).cardinality, vec![2]);
    }

    #[test]
    fn hand_enumerated_tvd() {
        let s = binary_schema();
        let a = table(&s, &[["0", "0"], ["0", "1"], ["1", "1"], ["1", "1"]]);
        let b = table(&s, &[["0", "0"], ["0", "0"], ["0", "1"], ["1", "0"]]);
        let bins = BinningSpec::from_reference(&b, 20);
        // A marginals: a = (1/2, 1/2), b = (3/4, 1/4) -> 1/4
        // B marginals: a = (1/4, 3/4), b = (3/4, 1/4) -> 1/2
        let one = kway_tvd(&a, &b, 1, &bins, 100, 0).unwrap();
        assert_eq!(one.subsets, vec![(vec![0], 0.25), (vec![1], 0.5)]);
        assert_eq!(one.mean, 0.375);
        // cells 00,01,10,11: a = (1,1,0,2)/4, b = (2,1,1,0)/4 -> (1+0+1+2)/8
        let two = kway_tvd(&a, &b, 2, &bins, 100, 0).unwrap();
        assert_eq!(two.mean, 0.5);
        assert!(matches!(kway_tvd(&a, &b, 3, &bins, 100, 0), Err(EvalError::BadK { .. })));
    }

    #[test]
    fn tvd_extremes() {
        let s = binary_schema();
        let a = table(&s, &[["0", "0"], ["0", "1"]]);
        let b = table(&s, &[["1", "0"], ["1", "1"]]);
        let bins = BinningSpec::from_reference(&b, 20);
        assert_eq!(kway_tvd(&a, &b, 1, &bins, 10, 0).unwrap().subsets[0].1, 1.0);
        assert_eq!(kway_tvd(&a, &a, 2, &bins, 10, 0).unwrap().mean, 0.0);
    }

    #[test]
    fn subset_enumeration_and_sampling() {
        assert_eq!(combinations(4, 2).len(), 6);
        assert_eq!(combinations(5, 5), vec![vec![0, 1, 2, 3, 4]]);
        assert_eq!(combinations(3, 1), vec![vec![0], vec![1], vec![2]]);
        let sampled = feature_subsets(20, 5, 100, 3);
        assert_eq!(sampled.len(), 100);
        assert_eq!(sampled, feature_subsets(20, 5, 100, 3));
        assert!(sampled.iter().all(|s| s.windows(2).all(|w| w[0] < w[1])));
    }

    #[test]
    fn dcr_cases() {
        let s = Schema::new(vec![FeatureSpec::numerical("X", 0.0, 10.0, 0)], "X", None).unwrap();
        let mk = |v: &[f64]| Table::new(s.clone(), v.iter().map(|&x| Record::new(vec![Value::number(x)])).collect()).unwrap();
        let d = dcr_distances(&mk(&[5.0]), &mk(&[0.0, 10.0])).unwrap();
        assert_eq!(d, vec![0.5]);
        let train = mk(&[1.0, 4.0, 9.0]);
        let h = dcr_histogram(&train, &train, 5).unwrap();
        assert!(h.distances.iter().all(|&x| x == 0.0));
        assert_eq!(h.zero_fraction, 1.0);
        assert!(dcr_distances(&train, &mk(&[])).is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.3; 6], &[true, false, true, false, false, true]), Some(0.5));
        assert_eq!(auc(&[0.9, 0.4, 0.8], &[true, false, true]), Some(1.0));
        assert_eq!(auc(&[0.1, 0.2], &[true, true]), None);
    }

    #[test]
    fn single_group_synthetic_leaves_fairness_undefined() {
        let s = binary_schema();
        let mixed: Vec<[&str; 2]> = (0..40).map(|i| [["0", "1"][i % 2], ["0", "1"][(i / 2) % 2]]).collect();
        let one_group: Vec<[&str; 2]> = (0..40).map(|i| ["1", ["0", "1"][i % 2]]).collect();
        let real = table(&s, &mixed);
        let opts = EvalOptions { max_k: 2, ..EvalOptions::default() };
        let r = evaluate(&table(&s, &one_group), &real, &real, &opts).unwrap();
        assert!(r.fairness.is_none());
        assert!(r.fairness_note.unwrap().contains("two groups"));
        let r = evaluate(&real, &real, &real, &opts).unwrap();
        assert!(r.fairness.is_some() && r.fairness_note.is_none());
    }

    #[test]
    fn fairness_cases() {
        let s = binary_schema();
        let balanced = table(&s, &[["0", "1"], ["0", "0"], ["1", "1"], ["1", "0"]]);
        assert_eq!(fairness_metrics(&balanced, None).unwrap().data_dpdiff, 0.0);
        let mut rows = Vec::new();
        for i in 0..10 {
            rows.push(["0", if i < 9 { "1" } else { "0" }]);
            rows.push(["1", if i < 1 { "1" } else { "0" }]);
        }
        let skewed = table(&s, &rows);
        assert!((fairness_metrics(&skewed, None).unwrap().data_dpdiff - 0.8).abs() < 1e-12);
    }

    #[test]
    fn hand_equalized_odds() {
        // group 0: y = 1,1,0,0 pred = 1,0,1,0 -> TPR 1/2, FPR 1/2
        // group 1: y = 1,1,0,0 pred = 1,1,0,0 -> TPR 1,   FPR 0
        let s = binary_schema();
        let t = table(
            &s,
            &[["0", "1"], ["0", "1"], ["0", "0"], ["0", "0"], ["1", "1"], ["1", "1"], ["1", "0"], ["1", "0"]],
        );
        let pred = [true, false, true, false, true, true, false, false];
        let r = fairness_metrics(&t, Some(&pred)).unwrap();
        assert_eq!(r.eo_diff, Some(0.5));
        // predicted positive rates: 1/2 and 1/2
        assert_eq!(r.model_dpdiff, Some(0.0));
        assert_eq!(r.data_dpdiff, 0.0);
    }

    #[test]
    fn separable_blobs_are_learned() {
        let s = Schema::new(
            vec![
                FeatureSpec::numerical("X", -10.0, 10.0, 2),
                FeatureSpec::numerical("Y", -10.0, 10.0, 2),
                FeatureSpec::categorical("C", &["neg", "pos"]),
            ],
            "C",
            None,
        )
        .unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut draw = |n: usize| {
            let rows = (0..n)
                .map(|i| {
                    let pos = i % 2 == 0;
                    let c = if pos { 2.0 } else { -2.0 };
                    let x: f64 = c + rng.random_range(-1.5..1.5);
                    let y: f64 = rng.random_range(-3.0..3.0);
                    Record::new(vec![
                        Value::number((x * 100.0).round() / 100.0),
                        Value::number((y * 100.0).round() / 100.0),
                        Value::category(if pos { "pos" } else { "neg" }),
                    ])
                })
                .collect();
            Table::new(s.clone(), rows).unwrap()
        };
        let train = draw(400);
        let test = draw(200);
        let r = gbt_downstream(&train, &test, &GridSpec::desk(), 3, 1).unwrap();
        assert!(r.accuracy >= 0.95, "{r:?}");
        assert!(r.auc.unwrap() >= 0.98);
    }

    #[test]
    fn categorical_interaction_is_learned() {
        let s = Schema::new(
            vec![
                FeatureSpec::categorical("A", &["a", "b", "c", "d"]),
                FeatureSpec::categorical("Y", &["no", "yes"]),
            ],
            "Y",
            None,
        )
        .unwrap();
        let rows: Vec<Record> = (0..200)
            .map(|i| {
                let a = ["a", "b", "c", "d"][i % 4];
                let y = if a == "b" || a == "d" { "yes" } else { "no" };
                Record::new(vec![Value::category(a), Value::category(y)])
            })
            .collect();
        let t = Table::new(s, rows).unwrap();
        let y = target_labels(&t).unwrap();
        let m = Gbt::fit(&t, &y, GbtParams { n_estimators: 20, max_depth: 1, learning_rate: 0.3 });
        assert_eq!(accuracy(&m.predict_proba(&t), &y), 1.0);
    }

    #[test]
    fn target_column_is_not_a_split_candidate() {
        let s = Schema::new(
            vec![
                FeatureSpec::categorical("Noise", &["p", "q"]),
                FeatureSpec::categorical("Y", &["no", "yes"]),
            ],
            "Y",
            None,
        )
        .unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let rows: Vec<Record> = (0..400)
            .map(|_| {
                let n = if rng.random_bool(0.5) { "p" } else { "q" };
                let y = if rng.random_bool(0.5) { "yes" } else { "no" };
                Record::new(vec![Value::category(n), Value::category(y)])
            })
            .collect();
        let t = Table::new(s, rows).unwrap();
        let y = target_labels(&t).unwrap();
        let m = Gbt::fit(&t, &y, GbtParams { n_estimators: 20, max_depth: 3, learning_rate: 0.3 });
        assert!(accuracy(&m.predict_proba(&t), &y) < 0.6);
    }

    #[test]
    fn single_class_target_reports_undefined_auc() {
        let s = binary_schema();
        let train = table(&s, &[["0", "1"], ["1", "1"]]);
        let test = table(&s, &[["0", "1"], ["1", "0"]]);
        let r = gbt_downstream(&train, &test, &GridSpec::desk(), 5, 0).unwrap();
        assert_eq!(r.auc, None);
        assert_eq!(r.accuracy, 0.5);
    }

    #[test]
    fn perplexity_of_uniform_model() {
        use crate::model::{ModelConfig, ModelState};
        let cfg = ModelConfig {
            vocab_size: 12,
            context_length: 8,
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 8,
            dropout_prob: 0.0,
            adapter_rank: 0,
        };
        let mut m = ModelState::init(cfg, 0).unwrap();
        m.set_tensor("head.w", &[0.0; 96]);
        let ex = TokenizedExample { ids: vec![0, 1, 2, 3], format_mask: vec![true; 4], numeric_spans: vec![] };
        assert!((perplexity(&m, &[ex]).unwrap() - 12.0).abs() < 1e-9);
    }

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn auc_matches_pairwise(data in prop::collection::vec((0u8..6, any::<bool>()), 2..50)) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 5.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            if let Some(a) = auc(&scores, &labels) {
                prop_assert!((a - brute_auc(&scores, &labels)).abs() < 1e-12);
            }
        }

        #[test]
        fn tvd_symmetric_and_bounded(seed_a in 0u64..1000, seed_b in 0u64..1000, n in 5usize..60) {
            let s = Schema::new(
                vec![
                    FeatureSpec::numerical("X", 0.0, 9.0, 0),
                    FeatureSpec::categorical("C", &["p", "q", "r"]),
                    FeatureSpec::numerical("Z", -1.0, 1.0, 1),
                ],
                "C",
                None,
            ).unwrap();
            let a = generate_random_table(&s, n, seed_a).unwrap();
            let b = generate_random_table(&s, n + 3, seed_b).unwrap();
            let bins = BinningSpec::from_reference(&b, 20);
            for k in 1..=3 {
                let ab = kway_tvd(&a, &b, k, &bins, 100, 0).unwrap().mean;
                let ba = kway_tvd(&b, &a, k, &bins, 100, 0).unwrap().mean;
                prop_assert!((ab - ba).abs() < 1e-12);
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&ab));
                prop_assert_eq!(kway_tvd(&a, &a, k, &bins, 100, 0).unwrap().mean, 0.0);
            }
            let t1 = kway_tvd(&a, &b, 1, &bins, 100, 0).unwrap().mean;
            let t2 = kway_tvd(&a, &b, 2, &bins, 100, 0).unwrap().mean;
            let t3 = kway_tvd(&a, &b, 3, &bins, 100, 0).unwrap().mean;
            prop_assert!(t1 <= t2 + 1e-12 && t2 <= t3 + 1e-12);
        }

        #[test]
        fn fairness_invariant_to_group_names(labels in prop::collection::vec((any::<bool>(), any::<bool>()), 4..40)) {
            let s = binary_schema();
            let rows: Vec<[&str; 2]> = labels.iter().map(|&(g, y)| [if g { "1" } else { "0" }, if y { "1" } else { "0" }]).collect();
            let flipped: Vec<[&str; 2]> = rows.iter().map(|r| [if r[0] == "1" { "0" } else { "1" }, r[1]]).collect();
            let t = table(&s, &rows);
            let u = table(&s, &flipped);
            if let (Ok(a), Ok(b)) = (fairness_metrics(&t, None), fairness_metrics(&u, None)) {
                prop_assert_eq!(a.data_dpdiff, b.data_dpdiff);
                prop_assert!((0.0..=1.0).contains(&a.data_dpdiff));
            }
        }
    }
}
