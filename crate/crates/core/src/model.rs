//! A small decoder-only transformer with explicit reverse-mode gradients.
//!
//! Pre-norm GPT-style blocks: learned token and position embeddings,
//! causal multi-head self-attention, a GELU MLP, a final layer norm and an
//! untied output projection. Optional low-rank adapters sit on the attention
//! input and output projections.
//!
//! Parameters live in one flat buffer. Every stored value is exactly
//! representable as an `f32`, which keeps checkpoints bit-exact, while all
//! arithmetic runs in `f64`.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{example_loss, LossSpec, NumberTokens};
use crate::tokenizer::{TokenId, TokenizedExample};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
/// Per-example gradients are reduced in chunks of this size so the
/// floating-point summation order never depends on the worker count.
const REDUCE_CHUNK: usize = 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds the context length {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    Empty,
    #[error("token id {0} outside the vocabulary")]
    BadToken(TokenId),
    #[error("non-finite loss for example {example}")]
    NonFiniteLoss { example: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout_prob: f64,
    /// 0 trains the base weights; r > 0 adds rank-r adapters.
    pub adapter_rank: usize,
}

impl ModelConfig {
    /// Default desk-scale configuration for a given vocabulary.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            context_length: 256,
            embed_dim: 128,
            num_layers: 4,
            num_heads: 4,
            ffn_dim: 512,
            dropout_prob: 0.0,
            adapter_rank: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.vocab_size == 0 || self.context_length == 0 || self.embed_dim == 0 {
            return err("vocab_size, context_length and embed_dim must be positive".into());
        }
        if self.num_layers == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return err("num_layers, num_heads and ffn_dim must be positive".into());
        }
        if self.embed_dim % self.num_heads != 0 {
            return err(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return err(format!("dropout_prob {} outside [0, 1)", self.dropout_prob));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Which tensors receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableSet {
    All,
    AllExceptEmbeddings,
    Adapters,
    Nothing,
}

#[derive(Debug, Clone, Copy)]
struct Adapter {
    a: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_fc: usize,
    b_fc: usize,
    w_proj: usize,
    b_proj: usize,
    qkv_adapter: Option<Adapter>,
    o_adapter: Option<Adapter>,
}

#[derive(Debug, Clone)]
struct Layout {
    wte: usize,
    wpe: usize,
    layers: Vec<LayerIds>,
    lnf_g: usize,
    lnf_b: usize,
    w_out: usize,
    b_out: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Residual,
    Zeros,
    Ones,
}

fn build_layout(config: &ModelConfig) -> (Vec<TensorInfo>, Vec<Init>, Layout) {
    let (d, f, v) = (config.embed_dim, config.ffn_dim, config.vocab_size);
    let mut tensors: Vec<TensorInfo> = Vec::new();
    let mut inits = Vec::new();
    let mut offset = 0;
    let mut add = |name: String, shape: Vec<usize>, init: Init| {
        let info = TensorInfo { name, shape, offset };
        offset += info.len();
        tensors.push(info);
        inits.push(init);
        tensors.len() - 1
    };
    let wte = add("wte".into(), vec![v, d], Init::Normal);
    let wpe = add("wpe".into(), vec![config.context_length, d], Init::Normal);
    let mut layers = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let p = |s: &str| format!("h{l}.{s}");
        layers.push(LayerIds {
            ln1_g: add(p("ln1.g"), vec![d], Init::Ones),
            ln1_b: add(p("ln1.b"), vec![d], Init::Zeros),
            w_qkv: add(p("attn.qkv.w"), vec![d, 3 * d], Init::Normal),
            b_qkv: add(p("attn.qkv.b"), vec![3 * d], Init::Zeros),
            w_o: add(p("attn.out.w"), vec![d, d], Init::Residual),
            b_o: add(p("attn.out.b"), vec![d], Init::Zeros),
            ln2_g: add(p("ln2.g"), vec![d], Init::Ones),
            ln2_b: add(p("ln2.b"), vec![d], Init::Zeros),
            w_fc: add(p("mlp.fc.w"), vec![d, f], Init::Normal),
            b_fc: add(p("mlp.fc.b"), vec![f], Init::Zeros),
            w_proj: add(p("mlp.proj.w"), vec![f, d], Init::Residual),
            b_proj: add(p("mlp.proj.b"), vec![d], Init::Zeros),
            qkv_adapter: None,
            o_adapter: None,
        });
    }
    let lnf_g = add("lnf.g".into(), vec![d], Init::Ones);
    let lnf_b = add("lnf.b".into(), vec![d], Init::Zeros);
    let w_out = add("head.w".into(), vec![d, v], Init::Normal);
    let b_out = add("head.b".into(), vec![v], Init::Zeros);
    let r = config.adapter_rank;
    if r > 0 {
        for (l, layer) in layers.iter_mut().enumerate() {
            let p = |s: &str| format!("h{l}.{s}");
            layer.qkv_adapter = Some(Adapter {
                a: add(p("attn.qkv.adapter_a"), vec![d, r], Init::Normal),
                b: add(p("attn.qkv.adapter_b"), vec![r, 3 * d], Init::Zeros),
            });
            layer.o_adapter = Some(Adapter {
                a: add(p("attn.out.adapter_a"), vec![d, r], Init::Normal),
                b: add(p("attn.out.adapter_b"), vec![r, d], Init::Zeros),
            });
        }
    }
    (tensors, inits, Layout { wte, wpe, layers, lnf_g, lnf_b, w_out, b_out })
}

/// Row-major `rows x cols` matrix of next-token logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// `log softmax(row)[target]`.
pub fn log_prob(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row[target] - lse
}

#[derive(Debug, Clone)]
pub struct ModelState {
    config: ModelConfig,
    tensors: Vec<TensorInfo>,
    layout: Layout,
    params: Vec<f64>,
    trainable: Vec<bool>,
}

struct LayerCache {
    ln1_xhat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    h1: Vec<f64>,
    qkv_u: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    att: Vec<f64>,
    o_u: Vec<f64>,
    o_mask: Option<Vec<f64>>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    h2: Vec<f64>,
    f_pre: Vec<f64>,
    g_act: Vec<f64>,
    m_mask: Option<Vec<f64>>,
}

pub struct ForwardCache {
    ids: Vec<TokenId>,
    layers: Vec<LayerCache>,
    lnf_xhat: Vec<f64>,
    lnf_rstd: Vec<f64>,
    hf: Vec<f64>,
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

impl ModelState {
    /// Scaled-normal initialisation, deterministic per seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (tensors, inits, layout) = build_layout(&config);
        let total = tensors.last().map(|t| t.offset + t.len()).unwrap_or(0);
        let mut params = vec![0.0; total];
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let residual_std = INIT_STD / (2.0 * config.num_layers as f64).sqrt();
        let residual = Normal::new(0.0, residual_std).expect("valid std");
        for (t, init) in tensors.iter().zip(&inits) {
            let slot = &mut params[t.range()];
            match init {
                Init::Normal => slot.iter_mut().for_each(|p| *p = round_f32(normal.sample(&mut rng))),
                Init::Residual => slot.iter_mut().for_each(|p| *p = round_f32(residual.sample(&mut rng))),
                Init::Zeros => slot.fill(0.0),
                Init::Ones => slot.fill(1.0),
            }
        }
        let trainable = vec![true; tensors.len()];
        Ok(Self { config, tensors, layout, params, trainable })
    }

    /// Rebuilds a model from stored parameters, e.g. when loading a checkpoint.
    pub fn from_parts(config: ModelConfig, params: Vec<f64>) -> Result<Self, ModelError> {
        config.validate()?;
        let (tensors, _, layout) = build_layout(&config);
        let total = tensors.last().map(|t| t.offset + t.len()).unwrap_or(0);
        if params.len() != total {
            return Err(ModelError::Config(format!("expected {total} parameters, found {}", params.len())));
        }
        let trainable = vec![true; tensors.len()];
        Ok(Self { config, tensors, layout, params, trainable })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &self.params[t.range()])
    }

    /// Overwrites a tensor; values are rounded to `f32`.
    pub fn set_tensor(&mut self, name: &str, values: &[f64]) {
        let t = self.tensors.iter().find(|t| t.name == name).expect("known tensor").clone();
        assert_eq!(t.len(), values.len(), "shape mismatch for {name}");
        for (p, &v) in self.params[t.range()].iter_mut().zip(values) {
            *p = round_f32(v);
        }
    }

    pub fn set_trainable(&mut self, set: TrainableSet) {
        for (flag, t) in self.trainable.iter_mut().zip(&self.tensors) {
            let adapter = t.name.contains(".adapter_");
            *flag = match set {
                TrainableSet::All => true,
                TrainableSet::AllExceptEmbeddings => t.name != "wte" && t.name != "wpe",
                TrainableSet::Adapters => adapter,
                TrainableSet::Nothing => false,
            };
        }
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.tensors.iter().zip(&self.trainable).filter(|(_, &t)| t).map(|(t, _)| t.name.as_str()).collect()
    }

    /// Flat-buffer ranges of trainable tensors, in declaration order.
    pub fn trainable_ranges(&self) -> Vec<Range<usize>> {
        self.tensors.iter().zip(&self.trainable).filter(|(_, &t)| t).map(|(t, _)| t.range()).collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable_ranges().iter().map(|r| r.len()).sum()
    }

    /// Concatenation of the trainable tensors' entries of a full-size buffer.
    pub fn gather_trainable(&self, full: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_trainable());
        for r in self.trainable_ranges() {
            out.extend_from_slice(&full[r]);
        }
        out
    }

    /// Applies `f(index, param)` to every trainable parameter, where `index`
    /// is the position inside the trainable vector. Results are rounded to `f32`.
    pub fn update_trainable(&mut self, mut f: impl FnMut(usize, f64) -> f64) {
        let mut k = 0;
        for r in self.trainable_ranges() {
            for p in &mut self.params[r] {
                *p = round_f32(f(k, *p));
                k += 1;
            }
        }
    }

    fn t(&self, id: usize) -> &[f64] {
        &self.params[self.tensors[id].range()]
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::Empty);
        }
        if ids.len() > self.config.context_length {
            return Err(ModelError::TooLong { len: ids.len(), max: self.config.context_length });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(ModelError::BadToken(bad));
        }
        Ok(())
    }

    /// Next-token logits for every position of `ids`.
    pub fn forward(&self, ids: &[TokenId]) -> Result<Logits, ModelError> {
        self.check_ids(ids)?;
        Ok(self.forward_impl::<ChaCha20Rng>(ids, None).0)
    }

    fn forward_impl<R: Rng>(&self, ids: &[TokenId], mut dropout: Option<&mut R>) -> (Logits, ForwardCache) {
        let cfg = &self.config;
        let (t_len, d, f, v) = (ids.len(), cfg.embed_dim, cfg.ffn_dim, cfg.vocab_size);
        let lay = &self.layout;
        let mut x = vec![0.0; t_len * d];
        let (wte, wpe) = (self.t(lay.wte), self.t(lay.wpe));
        for (t, &id) in ids.iter().enumerate() {
            let row = &mut x[t * d..(t + 1) * d];
            let e = &wte[id as usize * d..(id as usize + 1) * d];
            let p = &wpe[t * d..(t + 1) * d];
            for j in 0..d {
                row[j] = e[j] + p[j];
            }
        }
        let drop_p = if dropout.is_some() { cfg.dropout_prob } else { 0.0 };
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for ids_l in &lay.layers {
            let (h1, ln1_xhat, ln1_rstd) = layernorm(&x, self.t(ids_l.ln1_g), self.t(ids_l.ln1_b), d);
            let mut qkv = linear(&h1, self.t(ids_l.w_qkv), Some(self.t(ids_l.b_qkv)), t_len, d, 3 * d);
            let qkv_u = self.adapter_forward(ids_l.qkv_adapter, &h1, &mut qkv, t_len, d, 3 * d);
            let (att, probs) = attention(&qkv, t_len, d, cfg.num_heads);
            let mut o = linear(&att, self.t(ids_l.w_o), Some(self.t(ids_l.b_o)), t_len, d, d);
            let o_u = self.adapter_forward(ids_l.o_adapter, &att, &mut o, t_len, d, d);
            let o_mask = dropout.as_deref_mut().and_then(|rng| dropout_mask(rng, o.len(), drop_p));
            if let Some(m) = &o_mask {
                o.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
            }
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let (h2, ln2_xhat, ln2_rstd) = layernorm(&x, self.t(ids_l.ln2_g), self.t(ids_l.ln2_b), d);
            let f_pre = linear(&h2, self.t(ids_l.w_fc), Some(self.t(ids_l.b_fc)), t_len, d, f);
            let g_act: Vec<f64> = f_pre.iter().map(|&z| gelu(z)).collect();
            let mut m = linear(&g_act, self.t(ids_l.w_proj), Some(self.t(ids_l.b_proj)), t_len, f, d);
            let m_mask = dropout.as_deref_mut().and_then(|rng| dropout_mask(rng, m.len(), drop_p));
            if let Some(mk) = &m_mask {
                m.iter_mut().zip(mk).for_each(|(a, b)| *a *= b);
            }
            x.iter_mut().zip(&m).for_each(|(a, b)| *a += b);
            layers.push(LayerCache {
                ln1_xhat,
                ln1_rstd,
                h1,
                qkv_u,
                qkv,
                probs,
                att,
                o_u,
                o_mask,
                ln2_xhat,
                ln2_rstd,
                h2,
                f_pre,
                g_act,
                m_mask,
            });
        }
        let (hf, lnf_xhat, lnf_rstd) = layernorm(&x, self.t(lay.lnf_g), self.t(lay.lnf_b), d);
        let logits = linear(&hf, self.t(lay.w_out), Some(self.t(lay.b_out)), t_len, d, v);
        let cache = ForwardCache { ids: ids.to_vec(), layers, lnf_xhat, lnf_rstd, hf };
        (Logits { rows: t_len, cols: v, data: logits }, cache)
    }

    fn adapter_forward(
        &self,
        adapter: Option<Adapter>,
        input: &[f64],
        out: &mut [f64],
        t_len: usize,
        d_in: usize,
        d_out: usize,
    ) -> Vec<f64> {
        let Some(ad) = adapter else { return Vec::new() };
        let r = self.config.adapter_rank;
        let u = linear(input, self.t(ad.a), None, t_len, d_in, r);
        let delta = linear(&u, self.t(ad.b), None, t_len, r, d_out);
        out.iter_mut().zip(&delta).for_each(|(o, dl)| *o += dl);
        u
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient with respect to the logits. Frozen tensors stay zero.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64]) -> Vec<f64> {
        let cfg = &self.config;
        let lay = &self.layout;
        let (t_len, d, f, v) = (cache.ids.len(), cfg.embed_dim, cfg.ffn_dim, cfg.vocab_size);
        let mut grads = vec![0.0; self.params.len()];
        let tr = &self.trainable;
        let range = |id: usize| self.tensors[id].range();

        if tr[lay.w_out] {
            matmul_at_b_acc(&mut grads[range(lay.w_out)], &cache.hf, dlogits, t_len, d, v);
        }
        if tr[lay.b_out] {
            col_sum_acc(&mut grads[range(lay.b_out)], dlogits, t_len, v);
        }
        let dhf = matmul_a_bt(dlogits, self.t(lay.w_out), t_len, v, d);
        let mut dx = self.layernorm_back(&dhf, &cache.lnf_xhat, &cache.lnf_rstd, lay.lnf_g, lay.lnf_b, &mut grads, d);

        let lowest_needed = if tr[lay.wte] || tr[lay.wpe] {
            0
        } else {
            (0..cfg.num_layers).find(|&l| self.layer_has_trainable(l)).unwrap_or(cfg.num_layers)
        };

        for l in (lowest_needed..cfg.num_layers).rev() {
            let ids_l = &lay.layers[l];
            let c = &cache.layers[l];
            // MLP branch
            let mut dm = dx.clone();
            if let Some(mk) = &c.m_mask {
                dm.iter_mut().zip(mk).for_each(|(a, b)| *a *= b);
            }
            if tr[ids_l.w_proj] {
                matmul_at_b_acc(&mut grads[range(ids_l.w_proj)], &c.g_act, &dm, t_len, f, d);
            }
            if tr[ids_l.b_proj] {
                col_sum_acc(&mut grads[range(ids_l.b_proj)], &dm, t_len, d);
            }
            let mut df = matmul_a_bt(&dm, self.t(ids_l.w_proj), t_len, d, f);
            df.iter_mut().zip(&c.f_pre).for_each(|(g, &z)| *g *= gelu_grad(z));
            if tr[ids_l.w_fc] {
                matmul_at_b_acc(&mut grads[range(ids_l.w_fc)], &c.h2, &df, t_len, d, f);
            }
            if tr[ids_l.b_fc] {
                col_sum_acc(&mut grads[range(ids_l.b_fc)], &df, t_len, f);
            }
            let dh2 = matmul_a_bt(&df, self.t(ids_l.w_fc), t_len, f, d);
            let dx_ln2 = self.layernorm_back(&dh2, &c.ln2_xhat, &c.ln2_rstd, ids_l.ln2_g, ids_l.ln2_b, &mut grads, d);
            dx.iter_mut().zip(&dx_ln2).for_each(|(a, b)| *a += b);

            // attention branch
            let mut d_o = dx.clone();
            if let Some(mk) = &c.o_mask {
                d_o.iter_mut().zip(mk).for_each(|(a, b)| *a *= b);
            }
            if tr[ids_l.w_o] {
                matmul_at_b_acc(&mut grads[range(ids_l.w_o)], &c.att, &d_o, t_len, d, d);
            }
            if tr[ids_l.b_o] {
                col_sum_acc(&mut grads[range(ids_l.b_o)], &d_o, t_len, d);
            }
            let mut datt = matmul_a_bt(&d_o, self.t(ids_l.w_o), t_len, d, d);
            self.adapter_backward(ids_l.o_adapter, &c.att, &c.o_u, &d_o, &mut datt, &mut grads, t_len, d, d);
            let dqkv = attention_backward(&datt, &c.qkv, &c.probs, t_len, d, cfg.num_heads);
            if tr[ids_l.w_qkv] {
                matmul_at_b_acc(&mut grads[range(ids_l.w_qkv)], &c.h1, &dqkv, t_len, d, 3 * d);
            }
            if tr[ids_l.b_qkv] {
                col_sum_acc(&mut grads[range(ids_l.b_qkv)], &dqkv, t_len, 3 * d);
            }
            let mut dh1 = matmul_a_bt(&dqkv, self.t(ids_l.w_qkv), t_len, 3 * d, d);
            self.adapter_backward(ids_l.qkv_adapter, &c.h1, &c.qkv_u, &dqkv, &mut dh1, &mut grads, t_len, d, 3 * d);
            let dx_ln1 = self.layernorm_back(&dh1, &c.ln1_xhat, &c.ln1_rstd, ids_l.ln1_g, ids_l.ln1_b, &mut grads, d);
            dx.iter_mut().zip(&dx_ln1).for_each(|(a, b)| *a += b);
        }

        if lowest_needed == 0 {
            if tr[lay.wte] {
                let r = range(lay.wte);
                let g = &mut grads[r];
                for (t, &id) in cache.ids.iter().enumerate() {
                    let row = &mut g[id as usize * d..(id as usize + 1) * d];
                    row.iter_mut().zip(&dx[t * d..(t + 1) * d]).for_each(|(a, b)| *a += b);
                }
            }
            if tr[lay.wpe] {
                let r = range(lay.wpe);
                grads[r][..t_len * d].iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
            }
        }
        grads
    }

    fn layer_has_trainable(&self, l: usize) -> bool {
        let ids = &self.layout.layers[l];
        let mut all = vec![
            ids.ln1_g, ids.ln1_b, ids.w_qkv, ids.b_qkv, ids.w_o, ids.b_o, ids.ln2_g, ids.ln2_b, ids.w_fc, ids.b_fc,
            ids.w_proj, ids.b_proj,
        ];
        for ad in [ids.qkv_adapter, ids.o_adapter].into_iter().flatten() {
            all.push(ad.a);
            all.push(ad.b);
        }
        all.into_iter().any(|i| self.trainable[i])
    }

    #[allow(clippy::too_many_arguments)]
    fn adapter_backward(
        &self,
        adapter: Option<Adapter>,
        input: &[f64],
        u: &[f64],
        dout: &[f64],
        dinput: &mut [f64],
        grads: &mut [f64],
        t_len: usize,
        d_in: usize,
        d_out: usize,
    ) {
        let Some(ad) = adapter else { return };
        let r = self.config.adapter_rank;
        if self.trainable[ad.b] {
            matmul_at_b_acc(&mut grads[self.tensors[ad.b].range()], u, dout, t_len, r, d_out);
        }
        let du = matmul_a_bt(dout, self.t(ad.b), t_len, d_out, r);
        if self.trainable[ad.a] {
            matmul_at_b_acc(&mut grads[self.tensors[ad.a].range()], input, &du, t_len, d_in, r);
        }
        let dx = matmul_a_bt(&du, self.t(ad.a), t_len, r, d_in);
        dinput.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
    }

    #[allow(clippy::too_many_arguments)]
    fn layernorm_back(
        &self,
        dy: &[f64],
        xhat: &[f64],
        rstd: &[f64],
        g_id: usize,
        b_id: usize,
        grads: &mut [f64],
        d: usize,
    ) -> Vec<f64> {
        let gamma = self.t(g_id);
        if self.trainable[g_id] {
            let gg = &mut grads[self.tensors[g_id].range()];
            for (dyr, xr) in dy.chunks(d).zip(xhat.chunks(d)) {
                for j in 0..d {
                    gg[j] += dyr[j] * xr[j];
                }
            }
        }
        if self.trainable[b_id] {
            col_sum_acc(&mut grads[self.tensors[b_id].range()], dy, dy.len() / d, d);
        }
        let mut dx = vec![0.0; dy.len()];
        for (t, ((dyr, xr), out)) in dy.chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_x = 0.0;
            for j in 0..d {
                let g = dyr[j] * gamma[j];
                mean_dxhat += g;
                mean_dxhat_x += g * xr[j];
            }
            mean_dxhat /= d as f64;
            mean_dxhat_x /= d as f64;
            for j in 0..d {
                out[j] = rstd[t] * (dyr[j] * gamma[j] - mean_dxhat - xr[j] * mean_dxhat_x);
            }
        }
        dx
    }

    /// Forward pass that keeps activations for [`ModelState::backward`].
    /// Dropout is applied only when `dropout_seed` is given.
    pub fn forward_with_cache(
        &self,
        ids: &[TokenId],
        dropout_seed: Option<u64>,
    ) -> Result<(Logits, ForwardCache), ModelError> {
        self.check_ids(ids)?;
        Ok(match dropout_seed {
            Some(seed) if self.config.dropout_prob > 0.0 => {
                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                self.forward_impl(ids, Some(&mut rng))
            }
            _ => self.forward_impl::<ChaCha20Rng>(ids, None),
        })
    }

    /// Loss value and trainable-parameter gradient for one example.
    pub fn example_loss_and_grad(
        &self,
        example: &TokenizedExample,
        spec: &LossSpec,
        numbers: &NumberTokens,
        dropout_seed: Option<u64>,
    ) -> Result<(f64, Vec<f64>), ModelError> {
        let (logits, cache) = self.forward_with_cache(&example.ids, dropout_seed)?;
        let out = example_loss(&logits, example, spec, numbers, true);
        let grad = match out.dlogits {
            Some(dl) if self.num_trainable() > 0 => self.gather_trainable(&self.backward(&cache, &dl)),
            _ => Vec::new(),
        };
        Ok((out.value, grad))
    }

    /// Per-example losses and gradients, each gradient being the
    /// concatenation of trainable tensors in declaration order.
    pub fn loss_and_per_example_grads(
        &self,
        batch: &[TokenizedExample],
        spec: &LossSpec,
        numbers: &NumberTokens,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>), ModelError> {
        let results: Vec<Result<(f64, Vec<f64>), ModelError>> =
            batch.par_iter().map(|ex| self.example_loss_and_grad(ex, spec, numbers, None)).collect();
        let mut losses = Vec::with_capacity(batch.len());
        let mut grads = Vec::with_capacity(batch.len());
        for (i, r) in results.into_iter().enumerate() {
            let (l, g) = r?;
            if !l.is_finite() {
                return Err(ModelError::NonFiniteLoss { example: i });
            }
            losses.push(l);
            grads.push(g);
        }
        Ok((losses, grads))
    }

    /// Sum of per-example gradients, each optionally rescaled to L2 norm at
    /// most `clip`. Returns the sum, the per-example losses and the largest
    /// post-clip norm observed.
    pub fn clipped_gradient_sum(
        &self,
        batch: &[TokenizedExample],
        spec: &LossSpec,
        numbers: &NumberTokens,
        clip: Option<f64>,
        dropout_seed: Option<u64>,
    ) -> Result<GradientSum, ModelError> {
        let n_train = self.num_trainable();
        let chunks: Vec<Result<GradientSum, ModelError>> = batch
            .par_chunks(REDUCE_CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut acc = GradientSum { sum: vec![0.0; n_train], losses: Vec::new(), max_norm: 0.0 };
                for (k, ex) in chunk.iter().enumerate() {
                    let i = c * REDUCE_CHUNK + k;
                    let seed = dropout_seed.map(|s| s ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    let (loss, mut g) = self.example_loss_and_grad(ex, spec, numbers, seed)?;
                    if !loss.is_finite() || g.iter().any(|x| !x.is_finite()) {
                        return Err(ModelError::NonFiniteLoss { example: i });
                    }
                    let norm = if let Some(c) = clip {
                        crate::dpsgd::clip_in_place(&mut g, c).expect("finite gradient")
                    } else {
                        l2_norm(&g)
                    };
                    acc.max_norm = acc.max_norm.max(norm);
                    acc.losses.push(loss);
                    if !g.is_empty() {
                        acc.sum.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                }
                Ok(acc)
            })
            .collect();
        let mut total = GradientSum { sum: vec![0.0; n_train], losses: Vec::new(), max_norm: 0.0 };
        for chunk in chunks {
            let chunk = chunk?;
            total.sum.iter_mut().zip(&chunk.sum).for_each(|(a, b)| *a += b);
            total.losses.extend(chunk.losses);
            total.max_norm = total.max_norm.max(chunk.max_norm);
        }
        Ok(total)
    }

    /// Draws the next token after `prefix`. Temperature 0 is greedy.
    pub fn sample_next<R: Rng + ?Sized>(
        &self,
        prefix: &[TokenId],
        temperature: f64,
        rng: &mut R,
    ) -> Result<TokenId, ModelError> {
        let logits = self.forward(prefix)?;
        Ok(sample_from_logits(logits.row(logits.rows - 1), temperature, rng))
    }
}

/// Token-by-token decoder that keeps per-layer `[q | k | v]` rows, giving
/// the same logits as [`ModelState::forward`] on the growing prefix.
pub struct Decoder<'m> {
    model: &'m ModelState,
    qkv: Vec<Vec<f64>>,
    len: usize,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m ModelState) -> Self {
        Self { model, qkv: vec![Vec::new(); model.config.num_layers], len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `id` and returns the logits predicting the following token.
    pub fn push(&mut self, id: TokenId) -> Result<Vec<f64>, ModelError> {
        let m = self.model;
        let cfg = &m.config;
        if self.len >= cfg.context_length {
            return Err(ModelError::TooLong { len: self.len + 1, max: cfg.context_length });
        }
        if id as usize >= cfg.vocab_size {
            return Err(ModelError::BadToken(id));
        }
        let (d, f, t) = (cfg.embed_dim, cfg.ffn_dim, self.len);
        let lay = &m.layout;
        let e = &m.t(lay.wte)[id as usize * d..(id as usize + 1) * d];
        let p = &m.t(lay.wpe)[t * d..(t + 1) * d];
        let mut x: Vec<f64> = e.iter().zip(p).map(|(a, b)| a + b).collect();
        let mut probs = vec![0.0; cfg.num_heads * (t + 1)];
        for (l, ids_l) in lay.layers.iter().enumerate() {
            let (h1, _, _) = layernorm(&x, m.t(ids_l.ln1_g), m.t(ids_l.ln1_b), d);
            let mut qkv = linear(&h1, m.t(ids_l.w_qkv), Some(m.t(ids_l.b_qkv)), 1, d, 3 * d);
            m.adapter_forward(ids_l.qkv_adapter, &h1, &mut qkv, 1, d, 3 * d);
            let cache = &mut self.qkv[l];
            cache.extend_from_slice(&qkv);
            let mut att = vec![0.0; d];
            attention_row(cache, t, d, cfg.num_heads, &mut att, &mut probs, t + 1);
            let mut o = linear(&att, m.t(ids_l.w_o), Some(m.t(ids_l.b_o)), 1, d, d);
            m.adapter_forward(ids_l.o_adapter, &att, &mut o, 1, d, d);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let (h2, _, _) = layernorm(&x, m.t(ids_l.ln2_g), m.t(ids_l.ln2_b), d);
            let g: Vec<f64> = linear(&h2, m.t(ids_l.w_fc), Some(m.t(ids_l.b_fc)), 1, d, f).into_iter().map(gelu).collect();
            let mlp = linear(&g, m.t(ids_l.w_proj), Some(m.t(ids_l.b_proj)), 1, f, d);
            x.iter_mut().zip(&mlp).for_each(|(a, b)| *a += b);
        }
        self.len += 1;
        let (hf, _, _) = layernorm(&x, m.t(lay.lnf_g), m.t(lay.lnf_b), d);
        Ok(linear(&hf, m.t(lay.w_out), Some(m.t(lay.b_out)), 1, d, cfg.vocab_size))
    }
}

/// Draws from `softmax(logits / temperature)`; argmax when temperature is 0.
pub fn sample_from_logits<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> TokenId {
    if temperature <= 0.0 {
        let mut best = 0;
        for (i, &x) in logits.iter().enumerate() {
            if x > logits[best] {
                best = i;
            }
        }
        return best as TokenId;
    }
    let scaled: Vec<f64> = logits.iter().map(|&x| x / temperature).collect();
    let probs = softmax(&scaled);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as TokenId;
        }
    }
    (probs.len() - 1) as TokenId
}

/// Result of [`ModelState::clipped_gradient_sum`].
#[derive(Debug, Clone)]
pub struct GradientSum {
    pub sum: Vec<f64>,
    pub losses: Vec<f64>,
    pub max_norm: f64,
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dropout_mask<R: Rng>(rng: &mut R, n: usize, p: f64) -> Option<Vec<f64>> {
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some((0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect())
}

fn layernorm(x: &[f64], g: &[f64], b: &[f64], d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for t in 0..rows {
        let xr = &x[t * d..(t + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[t] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[t * d + j] = h;
            y[t * d + j] = h * g[j] + b[j];
        }
    }
    (y, xhat, rstd)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `a (m x k) * w (k x n) + bias`.
fn linear(a: &[f64], w: &[f64], bias: Option<&[f64]>, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        if let Some(b) = bias {
            row.copy_from_slice(b);
        }
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let wr = &w[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] += av * wr[j];
            }
        }
    }
    out
}

/// `a (m x n) * b^T` where `b` is `k x n`; result is `m x k`.
fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let br = &b[p * n..(p + 1) * n];
            out[i * k + p] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `out (k x n) += a^T * b` where `a` is `m x k` and `b` is `m x n`.
fn matmul_at_b_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let br = &b[i * n..(i + 1) * n];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * br[j];
            }
        }
    }
}

fn col_sum_acc(out: &mut [f64], a: &[f64], m: usize, n: usize) {
    for i in 0..m {
        for j in 0..n {
            out[j] += a[i * n + j];
        }
    }
}

/// Attention output for query row `t` over rows `0..=t` of packed
/// `[q | k | v]` rows; writes the weights into `probs` (`heads x (t+1)`
/// strided by `stride_p`).
fn attention_row(qkv: &[f64], t: usize, d: usize, heads: usize, out: &mut [f64], probs: &mut [f64], stride_p: usize) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let stride = 3 * d;
    for h in 0..heads {
        let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
        let q = &qkv[t * stride + qo..t * stride + qo + hd];
        let p = &mut probs[h * stride_p..h * stride_p + t + 1];
        let mut max = f64::NEG_INFINITY;
        for (u, pu) in p.iter_mut().enumerate() {
            let k = &qkv[u * stride + ko..u * stride + ko + hd];
            let s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
            *pu = s;
            max = max.max(s);
        }
        let mut sum = 0.0;
        for pu in p.iter_mut() {
            *pu = (*pu - max).exp();
            sum += *pu;
        }
        let o = &mut out[h * hd..(h + 1) * hd];
        for (u, pu) in p.iter_mut().enumerate() {
            *pu /= sum;
            let vv = &qkv[u * stride + vo..u * stride + vo + hd];
            for j in 0..hd {
                o[j] += *pu * vv[j];
            }
        }
    }
}

/// Causal multi-head attention over packed `[q | k | v]` rows.
/// Returns the concatenated head outputs and the attention weights
/// (`heads x t x t`, zero above the diagonal).
fn attention(qkv: &[f64], t_len: usize, d: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; t_len * d];
    let mut probs = vec![0.0; heads * t_len * t_len];
    let mut row_probs = vec![0.0; heads * t_len];
    for t in 0..t_len {
        row_probs.fill(0.0);
        attention_row(qkv, t, d, heads, &mut out[t * d..(t + 1) * d], &mut row_probs, t_len);
        for h in 0..heads {
            let dst = (h * t_len + t) * t_len;
            probs[dst..dst + t + 1].copy_from_slice(&row_probs[h * t_len..h * t_len + t + 1]);
        }
    }
    (out, probs)
}

fn attention_backward(datt: &[f64], qkv: &[f64], probs: &[f64], t_len: usize, d: usize, heads: usize) -> Vec<f64> {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let stride = 3 * d;
    let mut dqkv = vec![0.0; t_len * stride];
    let mut dp = vec![0.0; t_len];
    for h in 0..heads {
        let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
        for t in 0..t_len {
            let p = &probs[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
            let dout = &datt[t * d + h * hd..t * d + (h + 1) * hd];
            let mut weighted = 0.0;
            for u in 0..=t {
                let vv = &qkv[u * stride + vo..u * stride + vo + hd];
                dp[u] = dout.iter().zip(vv).map(|(a, b)| a * b).sum();
                weighted += p[u] * dp[u];
                let dv = &mut dqkv[u * stride + vo..u * stride + vo + hd];
                for j in 0..hd {
                    dv[j] += p[u] * dout[j];
                }
            }
            for u in 0..=t {
                let ds = p[u] * (dp[u] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                for j in 0..hd {
                    let kj = qkv[u * stride + ko + j];
                    let qj = qkv[t * stride + qo + j];
                    dqkv[t * stride + qo + j] += ds * kj;
                    dqkv[u * stride + ko + j] += ds * qj;
                }
            }
        }
    }
    dqkv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossKind;

    fn tiny(adapter_rank: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            context_length: 16,
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 16,
            dropout_prob: 0.0,
            adapter_rank,
        }
    }

    #[test]
    fn init_is_deterministic_and_f32_exact() {
        let a = ModelState::init(tiny(0), 5).unwrap();
        let b = ModelState::init(tiny(0), 5).unwrap();
        assert_eq!(a.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert!(a.params().iter().all(|&x| (x as f32) as f64 == x));
        let c = ModelState::init(tiny(0), 6).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut cfg = tiny(0);
        cfg.embed_dim = 65;
        cfg.num_heads = 4;
        assert!(matches!(ModelState::init(cfg, 0), Err(ModelError::Config(_))));
    }

    #[test]
    fn adapter_starts_as_identity() {
        let base = ModelState::init(tiny(0), 9).unwrap();
        let adapted = ModelState::init(tiny(4), 9).unwrap();
        // base tensors are declared first, so they get the same draws
        let n = base.num_params();
        assert_eq!(&adapted.params()[..n], base.params());
        let b = adapted.tensor("h0.attn.qkv.adapter_b").unwrap();
        assert!(b.iter().all(|&x| x == 0.0));
        let a = adapted.tensor("h0.attn.qkv.adapter_a").unwrap();
        assert!(a.iter().any(|&x| x != 0.0));
        let ids = [0, 3, 5, 7, 2];
        assert_eq!(base.forward(&ids).unwrap(), adapted.forward(&ids).unwrap());
    }

    #[test]
    fn causal_prefix_is_stable() {
        let m = ModelState::init(tiny(0), 1).unwrap();
        let short = m.forward(&[0, 4, 5]).unwrap();
        let long = m.forward(&[0, 4, 5, 9, 1]).unwrap();
        let perturbed = m.forward(&[0, 4, 5, 2, 11]).unwrap();
        for r in 0..3 {
            assert_eq!(short.row(r), long.row(r));
            assert_eq!(long.row(r), perturbed.row(r));
        }
    }

    #[test]
    fn decoder_matches_full_forward() {
        for rank in [0, 2] {
            let m = ModelState::init(tiny(rank), 12).unwrap();
            let ids = [0, 5, 9, 2, 2, 7, 11, 3];
            let full = m.forward(&ids).unwrap();
            let mut dec = Decoder::new(&m);
            for (t, &id) in ids.iter().enumerate() {
                assert_eq!(dec.push(id).unwrap(), full.row(t));
            }
        }
    }

    #[test]
    fn softmax_rows_normalise() {
        let m = ModelState::init(tiny(0), 2).unwrap();
        let lg = m.forward(&[0, 1, 2, 3, 4, 5]).unwrap();
        for r in 0..lg.rows {
            let s: f64 = softmax(lg.row(r)).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn too_long_is_rejected() {
        let m = ModelState::init(tiny(0), 2).unwrap();
        let ids = vec![1; 17];
        assert!(matches!(m.forward(&ids), Err(ModelError::TooLong { .. })));
        assert!(matches!(m.forward(&[12]), Err(ModelError::BadToken(12))));
    }

    /// Hand-computed forward pass: vocab 2, width 2, one head, one layer
    /// whose attention and MLP outputs are zeroed out, so the output is
    /// `layernorm(wte[id] + wpe[t]) * W_out + b_out`.
    #[test]
    fn hand_forward() {
        let cfg = ModelConfig {
            vocab_size: 2,
            context_length: 2,
            embed_dim: 2,
            num_layers: 1,
            num_heads: 1,
            ffn_dim: 2,
            dropout_prob: 0.0,
            adapter_rank: 0,
        };
        let mut m = ModelState::init(cfg, 0).unwrap();
        m.set_tensor("wte", &[1.0, 0.0, 0.0, 2.0]);
        m.set_tensor("wpe", &[0.0, 0.0, 0.5, 0.0]);
        m.set_tensor("h0.attn.out.w", &[0.0; 4]);
        m.set_tensor("h0.mlp.proj.w", &[0.0; 4]);
        m.set_tensor("head.w", &[1.0, 2.0, -1.0, 0.5]);
        m.set_tensor("head.b", &[0.25, 0.0]);
        let lg = m.forward(&[0, 1]).unwrap();
        // position 0: x = (1, 0); mean .5, var .25 -> xhat = (1, -1) * 0.5/sqrt(.25+1e-5)
        let s0 = 0.5 / (0.25f64 + 1e-5).sqrt();
        // position 1: x = (0.5, 2); mean 1.25, var 0.5625 -> xhat = (-.75, .75)/sqrt(.5625+1e-5)
        let s1 = 0.75 / (0.5625f64 + 1e-5).sqrt();
        let expect = [
            s0 * 1.0 + (-s0) * -1.0 + 0.25,
            s0 * 2.0 + (-s0) * 0.5,
            -s1 * 1.0 + s1 * -1.0 + 0.25,
            -s1 * 2.0 + s1 * 0.5,
        ];
        for (a, b) in lg.data.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    fn fd_check(cfg: ModelConfig, set: TrainableSet) {
        let mut m = ModelState::init(cfg, 3).unwrap();
        // move away from the symmetric init so every path carries gradient
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let n = m.num_params();
        let noisy: Vec<f64> = m.params().iter().map(|&p| p + rng.random_range(-0.3..0.3)).collect();
        m = ModelState::from_parts(m.config().clone(), noisy.iter().map(|&x| round_f32(x)).collect()).unwrap();
        m.set_trainable(set);
        let ids: Vec<TokenId> = vec![0, 3, 7, 1, 9, 4, 11];
        let ex = TokenizedExample { ids: ids.clone(), format_mask: vec![true; ids.len()], numeric_spans: vec![] };
        let spec = LossSpec { kind: LossKind::Stage1Ce, ..LossSpec::default() };
        let numbers = NumberTokens::identity_digits();
        let (_, grad) = m.example_loss_and_grad(&ex, &spec, &numbers, None).unwrap();
        assert_eq!(grad.len(), m.num_trainable());
        let ranges = m.trainable_ranges();
        let flat: Vec<usize> = ranges.iter().flat_map(|r| r.clone()).collect();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (k, &idx) in flat.iter().enumerate().step_by(7) {
            let mut plus = m.params().to_vec();
            plus[idx] += h;
            let mut minus = m.params().to_vec();
            minus[idx] -= h;
            let lp = loss_with(&m, plus, &ex, &spec, &numbers);
            let lm = loss_with(&m, minus, &ex, &spec, &numbers);
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-4);
            worst = worst.max(err);
        }
        assert!(worst < 1e-3, "worst relative error {worst} (n={n})");
    }

    fn loss_with(m: &ModelState, params: Vec<f64>, ex: &TokenizedExample, spec: &LossSpec, numbers: &NumberTokens) -> f64 {
        // bypass f32 rounding so the finite differences see the perturbation
        let mut probe = m.clone();
        probe.params = params;
        let logits = probe.forward(&ex.ids).unwrap();
        example_loss(&logits, ex, spec, numbers, false).value
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(tiny(0), TrainableSet::All);
        fd_check(tiny(3), TrainableSet::All);
        fd_check(tiny(3), TrainableSet::Adapters);
        let mut two = tiny(0);
        two.num_layers = 2;
        fd_check(two, TrainableSet::AllExceptEmbeddings);
    }

    #[test]
    fn per_example_gradients_are_independent() {
        let m = ModelState::init(tiny(0), 4).unwrap();
        let mk = |ids: Vec<TokenId>| TokenizedExample { format_mask: vec![true; ids.len()], ids, numeric_spans: vec![] };
        let a = mk(vec![0, 3, 4, 1]);
        let b = mk(vec![0, 5, 6, 7, 1]);
        let spec = LossSpec { kind: LossKind::Stage1Ce, ..LossSpec::default() };
        let nt = NumberTokens::identity_digits();
        let (_, g) = m.loss_and_per_example_grads(&[a.clone(), b, a], &spec, &nt).unwrap();
        assert_eq!(g[0], g[2]);
        assert_ne!(g[0], g[1]);
    }

    #[test]
    fn empty_trainable_set_still_reports_loss() {
        let mut m = ModelState::init(tiny(0), 4).unwrap();
        m.set_trainable(TrainableSet::Nothing);
        let ex = TokenizedExample { ids: vec![0, 3, 1], format_mask: vec![true; 3], numeric_spans: vec![] };
        let spec = LossSpec { kind: LossKind::Stage1Ce, ..LossSpec::default() };
        let (losses, grads) = m.loss_and_per_example_grads(&[ex], &spec, &NumberTokens::identity_digits()).unwrap();
        assert!(losses[0] > 0.0);
        assert!(grads[0].is_empty());
    }

    #[test]
    fn greedy_and_dominant_sampling() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert_eq!(sample_from_logits(&[2.0, 1.0, 3.0], 0.0, &mut rng), 2);
        let mut logits = vec![0.0; 10];
        logits[0] = 100.0;
        let hits = (0..10_000).filter(|_| sample_from_logits(&logits, 1.0, &mut rng) == 0).count();
        assert!(hits as f64 / 10_000.0 > 0.999);
        let draw = |seed| {
            let mut r = ChaCha20Rng::seed_from_u64(seed);
            (0..20).map(|_| sample_from_logits(&[0.1, 0.2, 0.3, 0.4], 1.0, &mut r)).collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
    }

    #[test]
    fn dropout_changes_training_forward_only() {
        let mut cfg = tiny(0);
        cfg.dropout_prob = 0.5;
        let m = ModelState::init(cfg, 1).unwrap();
        let plain = m.forward(&[0, 2, 3]).unwrap();
        let (eval, _) = m.forward_with_cache(&[0, 2, 3], None).unwrap();
        let (train, _) = m.forward_with_cache(&[0, 2, 3], Some(5)).unwrap();
        assert_eq!(plain, eval);
        assert_ne!(plain, train);
    }
}
