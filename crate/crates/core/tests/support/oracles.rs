//! Slow, direct reference implementations used to check the library.
#![allow(dead_code)]

use std::collections::HashMap;

use dptab_core::schema::{FeatureKind, Table, Value};

/// Orders used by the quadrature oracle.
pub fn oracle_orders() -> Vec<f64> {
    let mut o = Vec::new();
    let mut a = 1.25;
    while a <= 10.0 {
        o.push(a);
        a += 0.25;
    }
    for i in 11..=64 {
        o.push(i as f64);
    }
    o.extend([80.0, 96.0, 128.0, 256.0, 512.0]);
    o
}

/// Rényi divergence of order `alpha` between the subsampled mixture
/// `(1-q) N(0, s^2) + q N(1, s^2)` and `N(0, s^2)`, by trapezoidal
/// integration of `E_{N(0,s^2)}[(mixture / base)^alpha]` in log space.
pub fn rdp_quadrature(q: f64, sigma: f64, alpha: f64) -> f64 {
    let s2 = sigma * sigma;
    let log_integrand = |z: f64| {
        let log_base = -z * z / (2.0 * s2) - (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
        let log_ratio = {
            let e = (2.0 * z - 1.0) / (2.0 * s2);
            // ln((1-q) + q e^e) evaluated without overflow
            let a = (1.0 - q).ln();
            let b = q.ln() + e;
            let (hi, lo) = if a > b { (a, b) } else { (b, a) };
            hi + (lo - hi).exp().ln_1p()
        };
        log_base + alpha * log_ratio
    };
    let lo = -40.0 * sigma - 5.0;
    let hi = alpha + 40.0 * sigma + 5.0;
    let h = (sigma / 100.0).min(0.01);
    let n = ((hi - lo) / h).ceil() as usize;
    let vals: Vec<f64> = (0..=n).map(|i| log_integrand(lo + i as f64 * h)).collect();
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (i, v) in vals.iter().enumerate() {
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        sum += w * (v - m).exp();
    }
    let log_a = m + (sum * h).ln();
    log_a / (alpha - 1.0)
}

pub fn epsilon_quadrature(q: f64, sigma: f64, steps: u64, delta: f64) -> f64 {
    oracle_orders()
        .into_iter()
        .map(|a| steps as f64 * rdp_quadrature(q, sigma, a) + (1.0 / delta).ln() / (a - 1.0))
        .fold(f64::INFINITY, f64::min)
}

/// Classic Gaussian-mechanism epsilon for unit sensitivity.
pub fn gaussian_mechanism_epsilon(sigma: f64, delta: f64) -> f64 {
    (2.0 * (1.25 / delta).ln()).sqrt() / sigma
}

fn bin_of(table: &Table, cuts: &[Option<Vec<f64>>], f: usize, v: &Value) -> u32 {
    match (&table.schema.features[f].kind, v) {
        (FeatureKind::Numerical { .. }, Value::Number(x)) => {
            cuts[f].as_ref().unwrap().iter().filter(|&&c| c < *x).count() as u32
        }
        (FeatureKind::Categorical { categories }, Value::Category(c)) => {
            categories.iter().position(|x| x == c).unwrap() as u32
        }
        _ => panic!("kind mismatch"),
    }
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize == k {
            out.push((0..n).filter(|i| mask & (1 << i) != 0).collect());
        }
    }
    out.sort();
    out
}

/// Mean TVD over all k-subsets, counting each joint cell directly.
pub fn tvd_oracle(a: &Table, b: &Table, k: usize, cuts: &[Option<Vec<f64>>]) -> f64 {
    let subs = subsets(a.schema.len(), k);
    let mut total = 0.0;
    for s in &subs {
        let mut cells: HashMap<Vec<u32>, (usize, usize)> = HashMap::new();
        for r in &a.rows {
            let key: Vec<u32> = s.iter().map(|&f| bin_of(a, cuts, f, &r.values[f])).collect();
            cells.entry(key).or_default().0 += 1;
        }
        for r in &b.rows {
            let key: Vec<u32> = s.iter().map(|&f| bin_of(b, cuts, f, &r.values[f])).collect();
            cells.entry(key).or_default().1 += 1;
        }
        let mut keys: Vec<_> = cells.keys().cloned().collect();
        keys.sort();
        let d: f64 = keys
            .iter()
            .map(|key| {
                let (x, y) = cells[key];
                (x as f64 / a.len() as f64 - y as f64 / b.len() as f64).abs()
            })
            .sum();
        total += d / 2.0;
    }
    total / subs.len() as f64
}

/// Nearest-training-row distances by exhaustive scan.
pub fn dcr_oracle(synthetic: &Table, train: &Table) -> Vec<f64> {
    let schema = &train.schema;
    let mut lo = vec![f64::INFINITY; schema.len()];
    let mut hi = vec![f64::NEG_INFINITY; schema.len()];
    for r in &train.rows {
        for (f, v) in r.values.iter().enumerate() {
            if let Value::Number(x) = v {
                lo[f] = lo[f].min(*x);
                hi[f] = hi[f].max(*x);
            }
        }
    }
    synthetic
        .rows
        .iter()
        .map(|s| {
            let mut best = f64::INFINITY;
            for t in &train.rows {
                let mut d2 = 0.0;
                for f in 0..schema.len() {
                    d2 += match (&s.values[f], &t.values[f]) {
                        (Value::Number(x), Value::Number(y)) => {
                            let w = hi[f] - lo[f];
                            if w > 0.0 {
                                ((x - lo[f]) / w - (y - lo[f]) / w).powi(2)
                            } else {
                                0.0
                            }
                        }
                        (x, y) => {
                            if x == y {
                                0.0
                            } else {
                                1.0
                            }
                        }
                    };
                }
                best = best.min(d2.sqrt());
            }
            best
        })
        .collect()
}

/// Fraction of (positive, negative) pairs ordered correctly, ties as half.
pub fn auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Largest pairwise TPR or FPR gap over groups where the rate is defined.
pub fn eo_oracle(groups: &[String], labels: &[bool], preds: &[bool]) -> Option<f64> {
    let mut names: Vec<&String> = groups.iter().collect();
    names.sort();
    names.dedup();
    let rate = |g: &String, positive: bool| {
        let idx: Vec<usize> = (0..groups.len()).filter(|&i| &groups[i] == g && labels[i] == positive).collect();
        if idx.is_empty() {
            None
        } else {
            Some(idx.iter().filter(|&&i| preds[i]).count() as f64 / idx.len() as f64)
        }
    };
    let mut best: Option<f64> = None;
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            for positive in [true, false] {
                if let (Some(x), Some(y)) = (rate(a, positive), rate(b, positive)) {
                    best = Some(best.unwrap_or(0.0).max((x - y).abs()));
                }
            }
        }
    }
    best
}
