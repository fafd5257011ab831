//! Two-stage fine-tuning: non-private format learning on random rows, then
//! DPSGD on the sensitive table.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::encode_record;
use crate::derive_seed;
use crate::dpsgd::{dpsgd_step, plain_step, poisson_sample, Adam, DpError};
use crate::eval::{perplexity, EvalError};
use crate::losses::{LambdaMode, LossSpec, NumberTokens};
use crate::model::{ModelConfig, ModelError, ModelState, TrainableSet};
use crate::privacy::{calibrate_sigma_after, PrivacyError, PrivacyLedger};
use crate::sampler::{format_compliance_probe, SampleError, DEFAULT_TEMPERATURE};
use crate::schema::{generate_random_table, Schema, SchemaError, Table};
use crate::tokenizer::{tokenize, TokenizeError, TokenizedExample, Vocab};

pub const NON_PRIVATE_LABEL: &str = "NON-PRIVATE";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("row {row}: encoded sentence has {len} tokens, context length is {max}")]
    TooLong { row: usize, len: usize, max: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("row {row}: {source}")]
    Tokenize { row: usize, source: TokenizeError },
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Size of the random table; defaults to the training-set size, at least 2000.
    pub random_rows: Option<usize>,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self { epochs: 5, learning_rate: 1e-4, batch_size: 32, random_rows: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrivacySpec {
    pub epsilon_target: f64,
    pub delta: f64,
    pub clip_norm: f64,
    /// Calibrated from the budget when absent.
    pub noise_multiplier: Option<f64>,
}

impl Default for PrivacySpec {
    fn default() -> Self {
        Self { epsilon_target: 1.0, delta: 1e-6, clip_norm: 1.0, noise_multiplier: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub epochs: f64,
    pub learning_rate: f64,
    pub expected_batch_size: usize,
    pub privacy: PrivacySpec,
    pub loss: LossSpec,
    pub lambda_mode: LambdaMode,
    /// Drops the noise entirely; the run is reported as non-private.
    pub non_private: bool,
    pub trainable: TrainableSet,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 2.0,
            learning_rate: 5e-4,
            expected_batch_size: 64,
            privacy: PrivacySpec::default(),
            loss: LossSpec::default(),
            lambda_mode: LambdaMode::Range,
            non_private: false,
            trainable: TrainableSet::AllExceptEmbeddings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// `vocab_size` is overwritten with the schema vocabulary size.
    pub model: ModelConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    /// Skips stage 1: conventional DP fine-tuning from initialisation.
    pub single_stage: bool,
    pub seed: u64,
    pub probe_samples: usize,
    pub probe_temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(0),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            single_stage: false,
            seed: 0,
            probe_samples: 200,
            probe_temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.stage1.epochs > 0 && (!(self.stage1.learning_rate > 0.0) || self.stage1.batch_size == 0) {
            return bad("stage 1 needs a positive learning rate and batch size".into());
        }
        if !(self.stage2.epochs >= 0.0) || !(self.stage2.learning_rate > 0.0) || self.stage2.expected_batch_size == 0 {
            return bad("stage 2 needs non-negative epochs, a positive learning rate and batch size".into());
        }
        let p = &self.stage2.privacy;
        if !(p.clip_norm > 0.0) {
            return bad(format!("clip norm must be positive, got {}", p.clip_norm));
        }
        if !(p.delta > 0.0 && p.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", p.delta));
        }
        if !self.stage2.non_private && !(p.epsilon_target > 0.0) {
            return bad(format!("epsilon target must be positive, got {}", p.epsilon_target));
        }
        if let Some(s) = p.noise_multiplier {
            if !(s > 0.0) && !self.stage2.non_private {
                return bad("a zero noise multiplier requires the non-private flag".into());
            }
        }
        self.stage2.loss.validate().map_err(TrainError::Config)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub examples: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `NON-PRIVATE` when stage 2 ran without noise.
    pub privacy_label: Option<String>,
    pub single_stage: bool,
    pub resumed: bool,
    pub stage1_epochs: Vec<EpochStats>,
    pub stage2_epochs: Vec<EpochStats>,
    pub sample_rate: f64,
    pub noise_multiplier: f64,
    pub steps_planned: u64,
    pub steps_taken: u64,
    pub epsilon_target: f64,
    pub delta: f64,
    /// `None` for a non-private run.
    pub spent_epsilon: Option<f64>,
    pub stop_reason: StopReason,
    pub max_clipped_norm: f64,
    pub eval_perplexity: Option<f64>,
    pub compliance_after_stage1: Option<f64>,
    pub compliance_final: Option<f64>,
}

/// Progress notifications for instrumentation.
#[derive(Debug)]
pub enum TrainEvent<'a> {
    Stage1Batch { epoch: usize, batch: &'a [TokenizedExample] },
    Stage2Step { step: u64, batch_size: usize, max_clipped_norm: f64, epsilon: Option<f64> },
}

pub struct TrainOutcome {
    pub model: ModelState,
    pub ledger: PrivacyLedger,
    pub report: TrainReport,
}

/// Model and ledger to continue from instead of starting afresh.
pub struct Resume {
    pub model: ModelState,
    pub ledger: PrivacyLedger,
}

/// Encodes each row with a fresh random clause order and tokenizes it.
pub fn encode_epoch(
    table: &Table,
    vocab: &Vocab,
    context_length: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<TokenizedExample>, TrainError> {
    let n = table.schema.len();
    table
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            let text = encode_record(r, &table.schema, &perm);
            let ex = tokenize(&text, vocab, &table.schema).map_err(|source| TrainError::Tokenize { row: i + 1, source })?;
            if ex.len() > context_length {
                return Err(TrainError::TooLong { row: i + 1, len: ex.len(), max: context_length });
            }
            Ok(ex)
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Non-private cross-entropy training on schema-uniform random rows. The
/// sensitive table is never an input.
pub fn stage1_pretrain(
    model: &mut ModelState,
    schema: &Schema,
    vocab: &Vocab,
    config: &Stage1Config,
    rows: usize,
    seed: u64,
    observer: &mut dyn FnMut(&TrainEvent),
) -> Result<Vec<EpochStats>, TrainError> {
    if config.epochs == 0 {
        return Ok(Vec::new());
    }
    let random = generate_random_table(schema, rows, derive_seed(seed, 10))?;
    let spec = LossSpec::stage1();
    let numbers = NumberTokens::from_vocab(vocab);
    let mut opt = Adam::new(config.learning_rate, model.num_trainable());
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, 11));
    let ctx = model.config().context_length;
    let dropout = model.config().dropout_prob > 0.0;
    let mut stats = Vec::with_capacity(config.epochs);
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let mut examples = encode_epoch(&random, vocab, ctx, &mut rng)?;
        examples.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(examples.len());
        let mut steps = 0;
        for batch in examples.chunks(config.batch_size) {
            observer(&TrainEvent::Stage1Batch { epoch, batch });
            let dropout_seed = dropout.then(|| derive_seed(seed, 1 << 32 | step));
            let s = plain_step(model, batch, &spec, &numbers, &mut opt, dropout_seed)?;
            losses.extend(s.losses);
            steps += 1;
            step += 1;
        }
        log::info!("stage 1 epoch {}: mean loss {:.4}", epoch + 1, mean(&losses));
        stats.push(EpochStats { epoch: epoch + 1, steps, examples: examples.len(), mean_loss: mean(&losses) });
    }
    Ok(stats)
}

/// Runs stage 1 (unless single-stage or resuming) and then DPSGD on
/// `train`. `eval` is only used for the held-out perplexity.
pub fn two_stage_finetune(
    schema: &Schema,
    train: &Table,
    eval: Option<&Table>,
    config: &TrainConfig,
    resume: Option<Resume>,
    observer: &mut dyn FnMut(&TrainEvent),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train.schema != *schema {
        return Err(TrainError::Config("training table does not match the schema".into()));
    }
    if train.is_empty() {
        return Err(TrainError::Config("training table is empty".into()));
    }
    let vocab = Vocab::build(schema);
    let mut model_cfg = config.model.clone();
    model_cfg.vocab_size = vocab.len();
    let n = train.len();
    let s2 = &config.stage2;
    let p = &s2.privacy;
    if !s2.non_private && p.delta >= 1.0 / n as f64 {
        log::warn!("delta {} is not below 1/N = {}", p.delta, 1.0 / n as f64);
    }
    let seed = config.seed;
    let resumed = resume.is_some();
    let (mut model, mut ledger) = match resume {
        Some(r) => {
            if r.model.config() != &model_cfg {
                return Err(TrainError::Config("checkpoint model config differs from the training config".into()));
            }
            (r.model, r.ledger)
        }
        None => (ModelState::init(model_cfg.clone(), derive_seed(seed, 0))?, PrivacyLedger::new(p.delta)),
    };
    let numbers = NumberTokens::from_vocab(&vocab);
    let adapters = model_cfg.adapter_rank > 0;
    let probe = |m: &ModelState, stream: u64| -> Result<Option<f64>, TrainError> {
        if config.probe_samples == 0 {
            return Ok(None);
        }
        let c = format_compliance_probe(
            m,
            &vocab,
            schema,
            config.probe_samples,
            config.probe_temperature,
            derive_seed(seed, stream),
        )?;
        Ok(Some(c))
    };

    let mut stage1_epochs = Vec::new();
    let mut compliance_after_stage1 = None;
    if !config.single_stage && !resumed {
        model.set_trainable(if adapters { TrainableSet::Adapters } else { TrainableSet::All });
        let rows = config.stage1.random_rows.unwrap_or(n.max(2000));
        stage1_epochs = stage1_pretrain(&mut model, schema, &vocab, &config.stage1, rows, seed, observer)?;
        compliance_after_stage1 = probe(&model, 20)?;
    }

    model.set_trainable(if adapters { TrainableSet::Adapters } else { s2.trainable });
    let loss = s2.loss.clone().with_lambda(schema, s2.lambda_mode);
    let q = (s2.expected_batch_size as f64 / n as f64).min(1.0);
    let steps_planned = (s2.epochs / q).ceil() as u64;
    let sigma = if s2.non_private {
        0.0
    } else {
        match p.noise_multiplier {
            Some(s) => s,
            None if steps_planned == 0 => 0.0,
            None => calibrate_sigma_after(&ledger.rdp, p.epsilon_target, p.delta, q, steps_planned)?,
        }
    };
    let expected_batch = q * n as f64;
    let steps_per_epoch = (1.0 / q).round().max(1.0) as u64;
    let mut opt = Adam::new(s2.learning_rate, model.num_trainable());
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, 2 ^ (ledger.total_steps() << 8)));
    let ctx = model_cfg.context_length;
    // surface over-long rows before any budget is spent
    let mut examples = encode_epoch(train, &vocab, ctx, &mut rng)?;
    let mut stage2_epochs = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut epoch_steps = 0;
    let mut stop_reason = StopReason::Completed;
    let mut max_clipped_norm: f64 = 0.0;
    let mut taken = 0u64;
    for t in 0..steps_planned {
        if t > 0 && t % steps_per_epoch == 0 {
            stage2_epochs.push(EpochStats {
                epoch: stage2_epochs.len() + 1,
                steps: epoch_steps,
                examples: epoch_losses.len(),
                mean_loss: mean(&epoch_losses),
            });
            epoch_losses.clear();
            epoch_steps = 0;
            examples = encode_epoch(train, &vocab, ctx, &mut rng)?;
        }
        if !s2.non_private && ledger.epsilon_after(q, sigma, 1) > p.epsilon_target {
            log::warn!("privacy budget {} reached after {} steps; stopping", p.epsilon_target, taken);
            stop_reason = StopReason::BudgetExhausted;
            break;
        }
        let idx = poisson_sample(n, q, &mut rng);
        let batch: Vec<TokenizedExample> = idx.iter().map(|&i| examples[i].clone()).collect();
        let stats =
            dpsgd_step(&mut model, &batch, &loss, &numbers, p.clip_norm, sigma, expected_batch, &mut opt, &mut rng)?;
        ledger.record_step(q, sigma);
        taken += 1;
        epoch_steps += 1;
        max_clipped_norm = max_clipped_norm.max(stats.max_clipped_norm);
        epoch_losses.extend(stats.losses);
        observer(&TrainEvent::Stage2Step {
            step: t,
            batch_size: stats.batch_size,
            max_clipped_norm: stats.max_clipped_norm,
            epsilon: ledger.spent_epsilon,
        });
    }
    if epoch_steps > 0 {
        stage2_epochs.push(EpochStats {
            epoch: stage2_epochs.len() + 1,
            steps: epoch_steps,
            examples: epoch_losses.len(),
            mean_loss: mean(&epoch_losses),
        });
    }
    for e in &stage2_epochs {
        log::info!("stage 2 epoch {}: mean loss {:.4}", e.epoch, e.mean_loss);
    }

    let eval_perplexity = match eval {
        Some(t) if !t.is_empty() => {
            let identity: Vec<usize> = (0..schema.len()).collect();
            let ex = t
                .rows
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    tokenize(&encode_record(r, schema, &identity), &vocab, schema)
                        .map_err(|source| TrainError::Tokenize { row: i + 1, source })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let fits: Vec<TokenizedExample> = ex.into_iter().filter(|e| e.len() <= ctx).collect();
            Some(perplexity(&model, &fits)?)
        }
        _ => None,
    };
    let compliance_final = probe(&model, 21)?;
    let report = TrainReport {
        privacy_label: s2.non_private.then(|| NON_PRIVATE_LABEL.to_string()),
        single_stage: config.single_stage,
        resumed,
        stage1_epochs,
        stage2_epochs,
        sample_rate: q,
        noise_multiplier: sigma,
        steps_planned,
        steps_taken: taken,
        epsilon_target: p.epsilon_target,
        delta: ledger.delta,
        spent_epsilon: ledger.spent_epsilon,
        stop_reason,
        max_clipped_norm,
        eval_perplexity,
        compliance_after_stage1,
        compliance_final,
    };
    Ok(TrainOutcome { model, ledger, report })
}
