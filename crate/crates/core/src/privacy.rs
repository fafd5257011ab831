//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PrivacyError {
    #[error("invalid privacy parameter: {0}")]
    Invalid(String),
    #[error("epsilon {target} is unattainable: the smallest reachable value with sigma <= {max_sigma} is {best}")]
    Unattainable { target: f64, best: f64, max_sigma: f64 },
}

const MAX_SIGMA: f64 = 1e4;
const SIGMA_TOLERANCE: f64 = 1e-3;

/// Orders at which the accountant evaluates Rényi divergences.
pub fn rdp_orders() -> Vec<f64> {
    let mut orders: Vec<f64> = (5..=40).map(|i| i as f64 * 0.25).collect();
    orders.extend((11..=64).map(|i| i as f64));
    orders.extend([80.0, 96.0, 128.0, 256.0, 512.0]);
    orders
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a <= b {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

fn log_erfc(x: f64) -> f64 {
    let direct = libm::erfc(x);
    if direct > 1e-300 {
        return direct.ln();
    }
    // asymptotic expansion for large positive x
    let x2 = x * x;
    -x2 - x.ln() - 0.5 * std::f64::consts::PI.ln() + (1.0 - 0.5 / x2 + 0.75 / (x2 * x2)).ln()
}

fn log_binom_int(n: u64, k: u64) -> f64 {
    libm::lgamma((n + 1) as f64) - libm::lgamma((k + 1) as f64) - libm::lgamma((n - k + 1) as f64)
}

fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let mut acc = f64::NEG_INFINITY;
    for i in 0..=alpha {
        let t = log_binom_int(alpha, i)
            + i as f64 * q.ln()
            + (alpha - i) as f64 * (-q).ln_1p()
            + (i * i - i) as f64 / (2.0 * sigma * sigma);
        acc = log_add(acc, t);
    }
    acc
}

fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let (mut a0, mut a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let z0 = sigma * sigma * (1.0 / q - 1.0).ln() + 0.5;
    let mut log_abs_coef = 0.0;
    let mut coef_sign = 1.0;
    let mut i = 0u64;
    loop {
        let fi = i as f64;
        if i > 0 {
            let factor = (alpha - fi + 1.0) / fi;
            log_abs_coef += factor.abs().ln();
            if factor < 0.0 {
                coef_sign = -coef_sign;
            }
        }
        let j = alpha - fi;
        let t0 = log_abs_coef + fi * q.ln() + j * (-q).ln_1p();
        let t1 = log_abs_coef + j * q.ln() + fi * (-q).ln_1p();
        let e0 = 0.5f64.ln() + log_erfc((fi - z0) / (std::f64::consts::SQRT_2 * sigma));
        let e1 = 0.5f64.ln() + log_erfc((z0 - j) / (std::f64::consts::SQRT_2 * sigma));
        let s0 = t0 + (fi * fi - fi) / (2.0 * sigma * sigma) + e0;
        let s1 = t1 + (j * j - j) / (2.0 * sigma * sigma) + e1;
        if coef_sign > 0.0 {
            a0 = log_add(a0, s0);
            a1 = log_add(a1, s1);
        } else {
            a0 = log_sub(a0, s0);
            a1 = log_sub(a1, s1);
        }
        i += 1;
        if s0.max(s1) < -30.0 || i > 100_000 {
            break;
        }
    }
    log_add(a0, a1)
}

/// Rényi divergence of order `alpha` for one subsampled Gaussian step.
pub fn rdp_step(q: f64, sigma: f64, alpha: f64) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    if sigma <= 0.0 {
        return f64::INFINITY;
    }
    if q == 1.0 {
        return alpha / (2.0 * sigma * sigma);
    }
    let log_a = if alpha.fract() == 0.0 { log_a_int(q, sigma, alpha as u64) } else { log_a_frac(q, sigma, alpha) };
    log_a / (alpha - 1.0)
}

/// Converts per-order RDP totals into the smallest epsilon at `delta`,
/// returning it with the order that achieves it.
pub fn rdp_to_epsilon(orders: &[f64], rdp: &[f64], delta: f64) -> (f64, f64) {
    let mut best = (f64::INFINITY, orders[0]);
    for (&a, &r) in orders.iter().zip(rdp) {
        let eps = r + (1.0 / delta).ln() / (a - 1.0);
        if eps < best.0 {
            best = (eps.max(0.0), a);
        }
    }
    best
}

fn check_args(q: f64, delta: f64) -> Result<(), PrivacyError> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(PrivacyError::Invalid(format!("sample rate {q} outside (0, 1]")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(PrivacyError::Invalid(format!("delta {delta} outside (0, 1)")));
    }
    Ok(())
}

/// Epsilon after `steps` subsampled Gaussian steps. Zero steps cost nothing;
/// a non-positive `sigma` with any steps is infinitely expensive.
pub fn rdp_epsilon(q: f64, sigma: f64, steps: u64, delta: f64) -> Result<f64, PrivacyError> {
    check_args(q, delta)?;
    if steps == 0 {
        return Ok(0.0);
    }
    if sigma <= 0.0 {
        return Ok(f64::INFINITY);
    }
    let orders = rdp_orders();
    let rdp: Vec<f64> = orders.iter().map(|&a| steps as f64 * rdp_step(q, sigma, a)).collect();
    Ok(rdp_to_epsilon(&orders, &rdp, delta).0)
}

fn epsilon_with_prior(prior: &[f64], q: f64, sigma: f64, steps: u64, delta: f64) -> f64 {
    let orders = rdp_orders();
    let rdp: Vec<f64> = orders
        .iter()
        .zip(prior)
        .map(|(&a, &p)| if steps == 0 { p } else { p + steps as f64 * rdp_step(q, sigma, a) })
        .collect();
    rdp_to_epsilon(&orders, &rdp, delta).0
}

/// Smallest noise multiplier, to a bisection tolerance of 1e-3, for which
/// `steps` further steps keep epsilon at or below the target.
pub fn calibrate_sigma(epsilon: f64, delta: f64, q: f64, steps: u64) -> Result<f64, PrivacyError> {
    calibrate_sigma_after(&vec![0.0; rdp_orders().len()], epsilon, delta, q, steps)
}

/// As [`calibrate_sigma`], on top of an already spent RDP budget.
pub fn calibrate_sigma_after(prior: &[f64], epsilon: f64, delta: f64, q: f64, steps: u64) -> Result<f64, PrivacyError> {
    check_args(q, delta)?;
    if !(epsilon > 0.0) {
        return Err(PrivacyError::Invalid(format!("target epsilon {epsilon} must be positive")));
    }
    let eps_at = |s: f64| epsilon_with_prior(prior, q, s, steps, delta);
    if steps == 0 {
        let best = eps_at(1.0);
        return if best <= epsilon {
            Ok(0.0)
        } else {
            Err(PrivacyError::Unattainable { target: epsilon, best, max_sigma: MAX_SIGMA })
        };
    }
    let mut hi = 0.1;
    while eps_at(hi) > epsilon {
        hi *= 2.0;
        if hi > MAX_SIGMA {
            return Err(PrivacyError::Unattainable { target: epsilon, best: eps_at(MAX_SIGMA), max_sigma: MAX_SIGMA });
        }
    }
    let mut lo = if hi > 0.1 { hi / 2.0 } else { 0.0 };
    while hi - lo > SIGMA_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if eps_at(mid) <= epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Run-length record of steps taken with the same parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub sample_rate: f64,
    pub noise_multiplier: f64,
    pub steps: u64,
}

/// Running privacy account of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub delta: f64,
    pub records: Vec<StepRecord>,
    pub rdp: Vec<f64>,
    /// `None` once a non-private step has been taken.
    pub spent_epsilon: Option<f64>,
    #[serde(skip)]
    step_cache: Option<(f64, f64, Vec<f64>)>,
}

impl PartialEq for PrivacyLedger {
    fn eq(&self, other: &Self) -> bool {
        self.delta == other.delta
            && self.records == other.records
            && self.rdp == other.rdp
            && self.spent_epsilon == other.spent_epsilon
    }
}

impl PrivacyLedger {
    pub fn new(delta: f64) -> Self {
        Self { delta, records: Vec::new(), rdp: vec![0.0; rdp_orders().len()], spent_epsilon: Some(0.0), step_cache: None }
    }

    pub fn total_steps(&self) -> u64 {
        self.records.iter().map(|r| r.steps).sum()
    }

    pub fn epsilon(&self) -> f64 {
        self.spent_epsilon.unwrap_or(f64::INFINITY)
    }

    fn step_rdp(&mut self, q: f64, sigma: f64) -> Vec<f64> {
        match &self.step_cache {
            Some((cq, cs, v)) if *cq == q && *cs == sigma => v.clone(),
            _ => {
                let v: Vec<f64> = rdp_orders().iter().map(|&a| rdp_step(q, sigma, a)).collect();
                self.step_cache = Some((q, sigma, v.clone()));
                v
            }
        }
    }

    /// Epsilon the ledger would report after `steps` more steps.
    pub fn epsilon_after(&mut self, q: f64, sigma: f64, steps: u64) -> f64 {
        if steps == 0 {
            return self.epsilon();
        }
        if sigma <= 0.0 || self.spent_epsilon.is_none() {
            return f64::INFINITY;
        }
        let step = self.step_rdp(q, sigma);
        let rdp: Vec<f64> = self.rdp.iter().zip(&step).map(|(a, b)| a + steps as f64 * b).collect();
        rdp_to_epsilon(&rdp_orders(), &rdp, self.delta).0
    }

    pub fn record_step(&mut self, q: f64, sigma: f64) {
        match self.records.last_mut() {
            Some(r) if r.sample_rate == q && r.noise_multiplier == sigma => r.steps += 1,
            _ => self.records.push(StepRecord { sample_rate: q, noise_multiplier: sigma, steps: 1 }),
        }
        if sigma <= 0.0 {
            self.spent_epsilon = None;
            return;
        }
        let step = self.step_rdp(q, sigma);
        self.rdp.iter_mut().zip(&step).for_each(|(a, b)| *a += b);
        if self.spent_epsilon.is_some() {
            self.spent_epsilon = Some(rdp_to_epsilon(&rdp_orders(), &self.rdp, self.delta).0);
        }
    }
}
