//! Per-example clipping, Gaussian noise and the Adam update.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{LossSpec, NumberTokens};
use crate::model::{l2_norm, ModelError, ModelState};
use crate::tokenizer::TokenizedExample;

#[derive(Debug, Error)]
pub enum DpError {
    #[error("gradient contains a non-finite entry")]
    NonFinite,
    #[error("clip norm must be positive, got {0}")]
    BadClip(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Rescales `g` in place to L2 norm at most `c`; returns the resulting norm.
pub fn clip_in_place(g: &mut [f64], c: f64) -> Result<f64, DpError> {
    if !(c > 0.0) {
        return Err(DpError::BadClip(c));
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(DpError::NonFinite);
    }
    let norm = l2_norm(g);
    if norm > c {
        let s = c / norm;
        g.iter_mut().for_each(|x| *x *= s);
        Ok(l2_norm(g).min(c))
    } else {
        Ok(norm)
    }
}

pub fn clip(g: &[f64], c: f64) -> Result<Vec<f64>, DpError> {
    let mut out = g.to_vec();
    clip_in_place(&mut out, c)?;
    Ok(out)
}

/// Indices kept by independent Bernoulli(q) draws over `n` rows.
pub fn poisson_sample<R: Rng + ?Sized>(n: usize, q: f64, rng: &mut R) -> Vec<usize> {
    (0..n).filter(|_| rng.random::<f64>() < q).collect()
}

pub fn gaussian_noise<R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(learning_rate: f64, n: usize) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Applies one update with `grad` over the model's trainable parameters.
    pub fn step(&mut self, model: &mut ModelState, grad: &[f64]) {
        assert_eq!(grad.len(), self.m.len(), "optimizer sized for a different trainable set");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        model.update_trainable(|k, p| {
            m[k] = b1 * m[k] + (1.0 - b1) * grad[k];
            v[k] = b2 * v[k] + (1.0 - b2) * grad[k] * grad[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            p - lr * mhat / (vhat.sqrt() + eps)
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub batch_size: usize,
    pub losses: Vec<f64>,
    /// Largest per-example gradient norm after clipping.
    pub max_clipped_norm: f64,
}

/// One DPSGD update: clipped per-example gradients are summed, Gaussian
/// noise with std `sigma * clip_norm` is added, and the result divided by
/// the expected batch size drives the optimizer. An empty batch still
/// applies the noise-only update.
#[allow(clippy::too_many_arguments)]
pub fn dpsgd_step<R: Rng + ?Sized>(
    model: &mut ModelState,
    batch: &[TokenizedExample],
    spec: &LossSpec,
    numbers: &NumberTokens,
    clip_norm: f64,
    sigma: f64,
    expected_batch: f64,
    optimizer: &mut Adam,
    rng: &mut R,
) -> Result<StepStats, DpError> {
    if !(clip_norm > 0.0) {
        return Err(DpError::BadClip(clip_norm));
    }
    let sum = model.clipped_gradient_sum(batch, spec, numbers, Some(clip_norm), None)?;
    let mut direction = sum.sum;
    if sigma > 0.0 {
        let noise = gaussian_noise(direction.len(), sigma * clip_norm, rng);
        direction.iter_mut().zip(&noise).for_each(|(d, z)| *d += z);
    }
    direction.iter_mut().for_each(|d| *d /= expected_batch);
    optimizer.step(model, &direction);
    Ok(StepStats { batch_size: batch.len(), losses: sum.losses, max_clipped_norm: sum.max_norm })
}

/// Non-private update on the mean gradient of a minibatch.
pub fn plain_step(
    model: &mut ModelState,
    batch: &[TokenizedExample],
    spec: &LossSpec,
    numbers: &NumberTokens,
    optimizer: &mut Adam,
    dropout_seed: Option<u64>,
) -> Result<StepStats, DpError> {
    let sum = model.clipped_gradient_sum(batch, spec, numbers, None, dropout_seed)?;
    let n = batch.len().max(1) as f64;
    let direction: Vec<f64> = sum.sum.iter().map(|g| g / n).collect();
    optimizer.step(model, &direction);
    Ok(StepStats { batch_size: batch.len(), losses: sum.losses, max_clipped_norm: sum.max_norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossSpec;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn clipping_cases() {
        let g = vec![6.0, 8.0];
        let c = clip(&g, 1.0).unwrap();
        assert!((l2_norm(&c) - 1.0).abs() < 1e-12);
        assert!((c[0] / c[1] - 0.75).abs() < 1e-12);
        let small = vec![0.3, 0.4];
        assert_eq!(clip(&small, 1.0).unwrap(), small);
        assert!(matches!(clip(&[1.0, f64::NAN], 1.0), Err(DpError::NonFinite)));
        assert!(matches!(clip(&[1.0], 0.0), Err(DpError::BadClip(_))));
    }

    #[test]
    fn noise_statistics() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let (sigma, c, l) = (1.3, 0.7, 25.0);
        let z: Vec<f64> = gaussian_noise(100_000, sigma * c, &mut rng).into_iter().map(|x| x / l).collect();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let std = (z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (z.len() - 1) as f64).sqrt();
        let target = sigma * c / l;
        assert!((std - target).abs() / target < 0.01, "{std} vs {target}");
    }

    #[test]
    fn poisson_rate() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let picked = poisson_sample(100_000, 0.03, &mut rng);
        let rate = picked.len() as f64 / 100_000.0;
        // 5 standard deviations of a binomial proportion
        assert!((rate - 0.03).abs() < 5.0 * (0.03f64 * 0.97 / 100_000.0).sqrt());
        assert!(picked.windows(2).all(|w| w[0] < w[1]));
    }

    fn tiny() -> ModelState {
        ModelState::init(
            ModelConfig {
                vocab_size: 12,
                context_length: 16,
                embed_dim: 8,
                num_layers: 1,
                num_heads: 2,
                ffn_dim: 16,
                dropout_prob: 0.0,
                adapter_rank: 0,
            },
            8,
        )
        .unwrap()
    }

    fn example(ids: Vec<u32>) -> TokenizedExample {
        TokenizedExample { format_mask: vec![true; ids.len()], ids, numeric_spans: vec![] }
    }

    #[test]
    fn degenerate_dp_step_equals_plain_step() {
        let spec = LossSpec::stage1();
        let nt = NumberTokens::identity_digits();
        let batch = [example(vec![0, 4, 5, 6, 1])];
        let mut a = tiny();
        let mut b = tiny();
        let mut oa = Adam::new(1e-2, a.num_trainable());
        let mut ob = Adam::new(1e-2, b.num_trainable());
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        for _ in 0..3 {
            dpsgd_step(&mut a, &batch, &spec, &nt, 1e12, 0.0, 1.0, &mut oa, &mut rng).unwrap();
            plain_step(&mut b, &batch, &spec, &nt, &mut ob, None).unwrap();
        }
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn dp_steps_are_reproducible_and_clipped() {
        let spec = LossSpec::stage1();
        let nt = NumberTokens::identity_digits();
        let data: Vec<TokenizedExample> =
            (0..9).map(|i| example(vec![0, (i % 9) as u32 + 2, 3, (i * 7 % 10) as u32, 1])).collect();
        let run = || {
            let mut m = tiny();
            let mut opt = Adam::new(1e-2, m.num_trainable());
            let mut rng = ChaCha20Rng::seed_from_u64(42);
            let mut norms = Vec::new();
            for _ in 0..5 {
                let idx = poisson_sample(data.len(), 0.5, &mut rng);
                let batch: Vec<_> = idx.iter().map(|&i| data[i].clone()).collect();
                let s = dpsgd_step(&mut m, &batch, &spec, &nt, 0.1, 1.0, 4.5, &mut opt, &mut rng).unwrap();
                norms.push(s.max_clipped_norm);
            }
            (m.params().to_vec(), norms)
        };
        let (p1, n1) = run();
        let (p2, _) = run();
        assert_eq!(p1, p2);
        assert!(n1.iter().all(|&n| n <= 0.1 + 1e-12));
    }

    #[test]
    fn empty_batch_applies_noise() {
        let spec = LossSpec::stage1();
        let nt = NumberTokens::identity_digits();
        let mut m = tiny();
        let before = m.params().to_vec();
        let mut opt = Adam::new(1e-2, m.num_trainable());
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let s = dpsgd_step(&mut m, &[], &spec, &nt, 1.0, 1.0, 2.0, &mut opt, &mut rng).unwrap();
        assert_eq!(s.batch_size, 0);
        assert_ne!(m.params(), &before[..]);
    }
}
