use std::path::{Path, PathBuf};

use dptab_core::checkpoint::{self, Checkpoint};
use dptab_core::codec::encode_record;
use dptab_core::eval::{self, DcrReport, DownstreamResult, FairnessReport, TvdResult};
use dptab_core::privacy::{calibrate_sigma, StepRecord, rdp_orders, rdp_step, rdp_to_epsilon};
use dptab_core::sampler::{
    fairness_sweep, format_compliance_probe, sample_rows, PromptSpec, QuotaPlan, SampleError, SamplingReport,
};
use dptab_core::schema::{Schema, Table};
use dptab_core::tokenizer::tokenize;
use dptab_core::trainer::{two_stage_finetune, Resume, StopReason, TrainError, TrainEvent, TrainReport, NON_PRIVATE_LABEL};
use serde::Serialize;

use crate::config::RunConfig;
use crate::report::{digest, digests, ensure_dir, write_report, Envelope};
use crate::{AccountantArgs, CliError, EvaluateArgs, FairnessArgs, PrepareArgs, SampleArgs, TrainArgs};

pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
}

fn input_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Input(format!("{}: no such file", path.display())))
    }
}

fn load_schema(path: &Path) -> Result<Schema, CliError> {
    require_file(path)?;
    Schema::load(path).map_err(|e| input_error(path, e))
}

fn load_table(path: &Path, schema: &Schema) -> Result<Table, CliError> {
    require_file(path)?;
    Table::load_csv(path, schema).map_err(|e| input_error(path, e))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    require_file(path)?;
    checkpoint::load(path).map_err(|e| input_error(path, e))
}

fn write_table(table: &Table, path: &Path) -> Result<(), CliError> {
    table.write_csv(path).map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
}

fn non_private_label(checkpoint: &Checkpoint) -> Option<String> {
    checkpoint.ledger.spent_epsilon.is_none().then(|| NON_PRIVATE_LABEL.to_string())
}

fn sample_error(e: SampleError) -> CliError {
    match e {
        SampleError::Prompt(m) => CliError::Input(format!("invalid prompt: {m}")),
        SampleError::NoRows { .. } => CliError::Generation(e.to_string()),
        other => CliError::Internal(other.to_string()),
    }
}

#[derive(Serialize)]
struct PrepareResult {
    rows: usize,
    train_rows: usize,
    test_rows: usize,
    features: usize,
    categorical: usize,
    numerical: usize,
    schema_inferred: bool,
}

pub fn prepare(ctx: &Context, args: &PrepareArgs) -> Result<(), CliError> {
    let seed = ctx.config.require_seed()?;
    let p = &ctx.config.prepare;
    require_file(&args.csv)?;
    let (schema, inferred) = match &args.schema {
        Some(path) => (load_schema(path)?, false),
        None => {
            let s = Schema::infer_from_csv(&args.csv, p.target.as_deref(), p.sensitive.as_deref())
                .map_err(|e| input_error(&args.csv, e))?;
            (s, true)
        }
    };
    let table = Table::load_csv(&args.csv, &schema).map_err(|e| input_error(&args.csv, e))?;
    let (train, test) = table.split_train_test(p.train_fraction, seed).map_err(|e| CliError::Input(e.to_string()))?;
    ensure_dir(&ctx.out)?;
    let schema_path = ctx.out.join("schema.json");
    let train_path = ctx.out.join("train.csv");
    let test_path = ctx.out.join("test.csv");
    schema.save(&schema_path).map_err(|e| CliError::Internal(e.to_string()))?;
    write_table(&train, &train_path)?;
    write_table(&test, &test_path)?;
    let mut inputs = vec![digest(&args.csv)?];
    if let Some(s) = &args.schema {
        inputs.push(digest(s)?);
    }
    let result = PrepareResult {
        rows: table.len(),
        train_rows: train.len(),
        test_rows: test.len(),
        features: schema.len(),
        categorical: schema.num_categorical(),
        numerical: schema.num_numerical(),
        schema_inferred: inferred,
    };
    let env = Envelope {
        command: "prepare",
        privacy_label: None,
        config_hash: ctx.config.hash(),
        seed,
        config: &ctx.config,
        inputs,
        outputs: digests(&[&schema_path, &train_path, &test_path])?,
        result,
    };
    write_report(&ctx.out, "prepare_report.json", &env)?;
    println!(
        "prepared {} rows: {} train, {} test ({} categorical, {} numerical features)",
        env.result.rows, env.result.train_rows, env.result.test_rows, env.result.categorical, env.result.numerical
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainResult<'a> {
    #[serde(flatten)]
    report: &'a TrainReport,
    /// Noisy steps across this run and every run it resumed from.
    ledger_total_steps: u64,
    ledger_records: &'a [StepRecord],
}

pub fn train(ctx: &Context, args: &TrainArgs) -> Result<(), CliError> {
    let seed = ctx.config.require_seed()?;
    let cfg = ctx.config.train_config(seed)?;
    let schema = load_schema(&args.schema)?;
    let train = load_table(&args.train, &schema)?;
    let eval_table = args.eval.as_deref().map(|p| load_table(p, &schema)).transpose()?;
    let resume = match &args.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.schema != schema {
                return Err(CliError::Input(format!("{}: checkpoint schema differs from {}", p.display(), args.schema.display())));
            }
            Some(Resume { model: ck.model, ledger: ck.ledger })
        }
        None => None,
    };
    if cfg.stage2.non_private {
        eprintln!("*** {NON_PRIVATE_LABEL} RUN: stage 2 adds no noise and carries no privacy guarantee ***");
    }
    let mut observer = |e: &TrainEvent| {
        if let TrainEvent::Stage2Step { step, batch_size, max_clipped_norm, epsilon } = e {
            log::debug!("step {step}: batch {batch_size}, max clipped norm {max_clipped_norm:.4}, epsilon {epsilon:?}");
        }
    };
    let outcome = two_stage_finetune(&schema, &train, eval_table.as_ref(), &cfg, resume, &mut observer).map_err(|e| match e {
        TrainError::Config(_) | TrainError::TooLong { .. } | TrainError::Tokenize { .. } | TrainError::Schema(_) => {
            CliError::Input(e.to_string())
        }
        TrainError::Privacy(p) => CliError::PrivacyStop(match &args.resume {
            Some(r) => format!("{p}; checkpoint {} is unchanged", r.display()),
            None => p.to_string(),
        }),
        other => CliError::Internal(other.to_string()),
    })?;
    ensure_dir(&ctx.out)?;
    let ckpt_path = ctx.out.join("model.ckpt");
    let vocab = dptab_core::tokenizer::Vocab::build(&schema);
    checkpoint::save(&ckpt_path, &outcome.model, &vocab, &schema, &outcome.ledger)
        .map_err(|e| CliError::Internal(format!("cannot write checkpoint: {e}")))?;
    let report: &TrainReport = &outcome.report;
    let mut inputs = vec![digest(&args.train)?, digest(&args.schema)?];
    for p in [&args.eval, &args.resume].into_iter().flatten() {
        inputs.push(digest(p)?);
    }
    let env = Envelope {
        command: "train",
        privacy_label: report.privacy_label.clone(),
        config_hash: ctx.config.hash(),
        seed,
        config: &ctx.config,
        inputs,
        outputs: digests(&[&ckpt_path])?,
        result: TrainResult {
            report,
            ledger_total_steps: outcome.ledger.total_steps(),
            ledger_records: &outcome.ledger.records,
        },
    };
    write_report(&ctx.out, "train_report.json", &env)?;
    match report.spent_epsilon {
        Some(eps) => println!(
            "trained {} stage-2 steps at sigma {:.4}: epsilon {:.4} of {} (delta {})",
            report.steps_taken, report.noise_multiplier, eps, report.epsilon_target, report.delta
        ),
        None => println!("trained {} stage-2 steps: {NON_PRIVATE_LABEL}", report.steps_taken),
    }
    let over_budget = report.spent_epsilon.is_some_and(|e| e > report.epsilon_target);
    if report.stop_reason == StopReason::BudgetExhausted || over_budget {
        return Err(CliError::PrivacyStop(format!(
            "privacy budget exhausted after {} of {} steps; checkpoint kept at {}",
            report.steps_taken,
            report.steps_planned,
            ckpt_path.display()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct SampleResult<'a> {
    mode: &'a str,
    temperature: f64,
    max_retries_per_row: u32,
    fixed_values: Vec<(String, String)>,
    model_epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fair_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    plan: Option<QuotaPlan>,
    #[serde(skip_serializing_if = "Option::is_none")]
    data_dpdiff: Option<f64>,
    sampling: SamplingReport,
}

pub fn sample(ctx: &Context, args: &SampleArgs) -> Result<(), CliError> {
    let seed = ctx.config.require_seed()?;
    let s = &ctx.config.sample;
    let n = s.n.ok_or_else(|| CliError::Input("number of rows required: pass --n or set sample.n".into()))?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let schema = &ck.schema;
    let mut fixed = Vec::with_capacity(args.fix.len());
    for (name, raw) in &args.fix {
        let f = schema.feature(name).ok_or_else(|| CliError::Input(format!("--fix: unknown feature {name:?}")))?;
        let v = f.parse_cell(raw).map_err(|e| CliError::Input(format!("--fix {name}: {e}")))?;
        fixed.push((name.clone(), v));
    }
    let base = if fixed.is_empty() { PromptSpec::random_init() } else { PromptSpec::value_specified(fixed) }
        .with_temperature(s.temperature)
        .with_retries(s.max_retries);
    ensure_dir(&ctx.out)?;
    let mut result = SampleResult {
        mode: if args.fair_fraction.is_some() {
            "fair_quota"
        } else if base.fixed_values.is_empty() {
            "random_init"
        } else {
            "value_specified"
        },
        temperature: base.temperature,
        max_retries_per_row: base.max_retries_per_row,
        fixed_values: base.fixed_values.iter().map(|(k, v)| (k.clone(), schema.feature(k).unwrap().render(v))).collect(),
        model_epsilon: ck.ledger.spent_epsilon,
        fair_fraction: args.fair_fraction,
        plan: None,
        data_dpdiff: None,
        sampling: SamplingReport::default(),
    };
    let generated = match args.fair_fraction {
        Some(rho) => fairness_sweep(&ck.model, &ck.vocab, schema, n, &[rho], &base, seed).map(|mut pts| {
            let p = pts.remove(0);
            result.plan = Some(p.plan);
            result.data_dpdiff = Some(p.data_dpdiff);
            (p.table.expect("sweep keeps its table"), p.report)
        }),
        None => sample_rows(&ck.model, &ck.vocab, schema, n, &base, seed),
    };
    let mut outputs = Vec::new();
    let failure = match generated {
        Ok((table, rep)) => {
            result.sampling = rep;
            let path = ctx.out.join("synthetic.csv");
            write_table(&table, &path)?;
            outputs.push(digest(&path)?);
            None
        }
        Err(SampleError::NoRows { attempts, report }) => {
            result.sampling = *report;
            Some(CliError::Generation(format!("no rows were generated after {attempts} attempts")))
        }
        Err(e) => return Err(sample_error(e)),
    };
    let env = Envelope {
        command: "sample",
        privacy_label: non_private_label(&ck),
        config_hash: ctx.config.hash(),
        seed,
        config: &ctx.config,
        inputs: vec![digest(&args.checkpoint)?],
        outputs,
        result,
    };
    write_report(&ctx.out, "sample_report.json", &env)?;
    if let Some(e) = failure {
        return Err(e);
    }
    let r = &env.result.sampling;
    println!("sampled {} of {} rows, format compliance {:.4}", r.rows_emitted, r.rows_requested, r.format_compliance);
    Ok(())
}

#[derive(Serialize)]
struct TvdSummary {
    k: usize,
    mean: f64,
    subsets: usize,
}

#[derive(Serialize)]
struct DcrSummary {
    rows: usize,
    min: f64,
    median: f64,
    zero_fraction: f64,
}

#[derive(Serialize)]
struct EvaluateResult {
    rows: usize,
    tvd: Vec<TvdSummary>,
    dcr: DcrSummary,
    downstream: DownstreamResult,
    fairness: Option<FairnessReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fairness_note: Option<String>,
    /// Present only when a checkpoint is given.
    perplexity: Option<f64>,
    format_compliance: Option<f64>,
}

fn write_tvd_csv(path: &Path, tvd: &[TvdResult], schema: &Schema) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Internal(format!("cannot write {}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(io)?;
    w.write_record(["k", "features", "tvd"]).map_err(io)?;
    for r in tvd {
        for (subset, v) in &r.subsets {
            let names: Vec<&str> = subset.iter().map(|&i| schema.features[i].name.as_str()).collect();
            w.write_record([r.k.to_string(), names.join("|"), format!("{v}")]).map_err(io)?;
        }
    }
    w.flush().map_err(|e| CliError::Internal(e.to_string()))
}

fn write_dcr_csv(path: &Path, dcr: &DcrReport) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Internal(format!("cannot write {}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(io)?;
    w.write_record(["lower", "upper", "count"]).map_err(io)?;
    for (i, c) in dcr.counts.iter().enumerate() {
        w.write_record([format!("{}", dcr.edges[i]), format!("{}", dcr.edges[i + 1]), c.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Internal(e.to_string()))
}

fn test_perplexity(ck: &Checkpoint, test: &Table) -> Result<Option<f64>, CliError> {
    let schema = &ck.schema;
    let identity: Vec<usize> = (0..schema.len()).collect();
    let ctx_len = ck.model.config().context_length;
    let mut examples = Vec::with_capacity(test.len());
    for (i, r) in test.rows.iter().enumerate() {
        let ex = tokenize(&encode_record(r, schema, &identity), &ck.vocab, schema)
            .map_err(|e| CliError::Input(format!("test row {}: {e}", i + 1)))?;
        if ex.len() <= ctx_len {
            examples.push(ex);
        }
    }
    if examples.is_empty() {
        return Ok(None);
    }
    eval::perplexity(&ck.model, &examples).map(Some).map_err(|e| CliError::Internal(e.to_string()))
}

pub fn evaluate(ctx: &Context, args: &EvaluateArgs) -> Result<(), CliError> {
    let seed = ctx.config.require_seed()?;
    let schema = load_schema(&args.schema)?;
    let synthetic = load_table(&args.synthetic, &schema)?;
    let train = load_table(&args.train, &schema)?;
    let test = load_table(&args.test, &schema)?;
    let ck = args.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    if let Some(c) = &ck {
        if c.schema != schema {
            return Err(CliError::Input("checkpoint schema differs from the evaluation schema".into()));
        }
    }
    let opts = ctx.config.eval_options(seed);
    let report = eval::evaluate(&synthetic, &train, &test, &opts).map_err(|e| CliError::Input(e.to_string()))?;
    let (perplexity, format_compliance) = match &ck {
        Some(c) => {
            let t = &ctx.config.train;
            let compliance =
                format_compliance_probe(&c.model, &c.vocab, &schema, t.probe_samples, t.probe_temperature, seed)
                    .map_err(sample_error)?;
            (test_perplexity(c, &test)?, Some(compliance))
        }
        None => (None, None),
    };
    ensure_dir(&ctx.out)?;
    let tvd_path = ctx.out.join("tvd_subsets.csv");
    let dcr_path = ctx.out.join("dcr_histogram.csv");
    write_tvd_csv(&tvd_path, &report.tvd, &schema)?;
    write_dcr_csv(&dcr_path, &report.dcr)?;
    let result = EvaluateResult {
        rows: synthetic.len(),
        tvd: report.tvd.iter().map(|r| TvdSummary { k: r.k, mean: r.mean, subsets: r.subsets.len() }).collect(),
        dcr: DcrSummary {
            rows: report.dcr.distances.len(),
            min: report.dcr.min,
            median: report.dcr.median,
            zero_fraction: report.dcr.zero_fraction,
        },
        downstream: report.downstream,
        fairness: report.fairness,
        fairness_note: report.fairness_note,
        perplexity,
        format_compliance,
    };
    let mut inputs = digests(&[&args.synthetic, &args.train, &args.test, &args.schema])?;
    if let Some(p) = &args.checkpoint {
        inputs.push(digest(p)?);
    }
    let env = Envelope {
        command: "evaluate",
        privacy_label: ck.as_ref().and_then(non_private_label),
        config_hash: ctx.config.hash(),
        seed,
        config: &ctx.config,
        inputs,
        outputs: digests(&[&tvd_path, &dcr_path])?,
        result,
    };
    write_report(&ctx.out, "eval_report.json", &env)?;
    for t in &env.result.tvd {
        println!("{}-way TVD {:.4}", t.k, t.mean);
    }
    println!("downstream accuracy {:.4}", env.result.downstream.accuracy);
    Ok(())
}

#[derive(Serialize)]
struct AccountantResult {
    q: f64,
    sigma: f64,
    steps: u64,
    delta: f64,
    epsilon: f64,
    order: f64,
}

pub fn accountant(args: &AccountantArgs) -> Result<(), CliError> {
    let bad = |e: dptab_core::privacy::PrivacyError| CliError::Input(e.to_string());
    let sigma = match (args.sigma, args.epsilon) {
        (Some(s), _) => s,
        (None, Some(eps)) => calibrate_sigma(eps, args.delta, args.q, args.steps).map_err(bad)?,
        (None, None) => return Err(CliError::Input("pass --sigma or --epsilon".into())),
    };
    dptab_core::privacy::rdp_epsilon(args.q, sigma, args.steps, args.delta).map_err(bad)?;
    let orders = rdp_orders();
    let rdp: Vec<f64> = orders.iter().map(|&a| args.steps as f64 * rdp_step(args.q, sigma, a)).collect();
    let (epsilon, order) = rdp_to_epsilon(&orders, &rdp, args.delta);
    let r = AccountantResult { q: args.q, sigma, steps: args.steps, delta: args.delta, epsilon, order };
    println!("{}", serde_json::to_string_pretty(&r).map_err(|e| CliError::Internal(e.to_string()))?);
    Ok(())
}

#[derive(Serialize)]
struct FairnessRow {
    rho: f64,
    rows: usize,
    controlled_rows: usize,
    controlled_emitted: usize,
    predicted_dpdiff: f64,
    data_dpdiff: f64,
    model_dpdiff: Option<f64>,
    accuracy: f64,
    auc: Option<f64>,
    format_compliance: f64,
}

#[derive(Serialize)]
struct FairnessResult {
    reference_dpdiff: Option<f64>,
    points: Vec<FairnessRow>,
}

pub fn fairness_run(ctx: &Context, args: &FairnessArgs) -> Result<(), CliError> {
    let seed = ctx.config.require_seed()?;
    let s = &ctx.config.sample;
    let n = s.n.ok_or_else(|| CliError::Input("number of rows required: pass --n or set sample.n".into()))?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let schema = &ck.schema;
    if schema.sensitive_index().is_none() {
        return Err(CliError::Input("the checkpoint schema has no sensitive feature".into()));
    }
    let test = load_table(&args.test, schema)?;
    let base = PromptSpec::random_init().with_temperature(s.temperature).with_retries(s.max_retries);
    let points = fairness_sweep(&ck.model, &ck.vocab, schema, n, &ctx.config.fairness.rhos, &base, seed)
        .map_err(sample_error)?;
    let opts = ctx.config.eval_options(seed);
    ensure_dir(&ctx.out)?;
    let mut rows = Vec::with_capacity(points.len());
    let mut outputs = Vec::new();
    for p in &points {
        let table = p.table.as_ref().expect("sweep keeps its table");
        let down = eval::gbt_downstream(table, &test, &opts.grid, opts.folds, seed)
            .map_err(|e| CliError::Internal(e.to_string()))?;
        let preds: Vec<bool> = down.test_scores.iter().map(|&x| x >= 0.5).collect();
        let model_fair = eval::fairness_metrics(&test, Some(&preds)).map_err(|e| CliError::Internal(e.to_string()))?;
        let path = ctx.out.join(format!("synthetic_rho_{}.csv", p.rho));
        write_table(table, &path)?;
        outputs.push(digest(&path)?);
        rows.push(FairnessRow {
            rho: p.rho,
            rows: table.len(),
            controlled_rows: p.plan.controlled_rows,
            controlled_emitted: p.controlled_emitted,
            predicted_dpdiff: p.plan.predicted_dpdiff,
            data_dpdiff: p.data_dpdiff,
            model_dpdiff: model_fair.model_dpdiff,
            accuracy: down.accuracy,
            auc: down.auc,
            format_compliance: p.report.format_compliance,
        });
    }
    let table_path = ctx.out.join("fairness.csv");
    {
        let io = |e: csv::Error| CliError::Internal(format!("cannot write {}: {e}", table_path.display()));
        let mut w =
            csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(&table_path).map_err(io)?;
        for r in &rows {
            w.serialize(r).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::Internal(e.to_string()))?;
    }
    outputs.push(digest(&table_path)?);
    let env = Envelope {
        command: "fairness-run",
        privacy_label: non_private_label(&ck),
        config_hash: ctx.config.hash(),
        seed,
        config: &ctx.config,
        inputs: digests(&[&args.checkpoint, &args.test])?,
        outputs,
        result: FairnessResult { reference_dpdiff: points.first().map(|p| p.plan.reference_dpdiff), points: rows },
    };
    write_report(&ctx.out, "fairness_report.json", &env)?;
    println!("{:>6} {:>12} {:>10}", "rho", "data_dpdiff", "accuracy");
    for r in &env.result.points {
        println!("{:>6} {:>12.4} {:>10.4}", r.rho, r.data_dpdiff, r.accuracy);
    }
    Ok(())
}
