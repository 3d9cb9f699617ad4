//! Command-line workbench: dataset construction, target fine-tuning,
//! unlearning runs, checkpoint evaluation, think-suppression probes, and
//! report rendering. Every command writes a machine-readable
//! `summary.json` next to its primary artifacts.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use recant_core::aggregate::{aggregate, render_grid_csv, render_grid_text, GridRow};
use recant_core::config::Settings;
use recant_core::corpus::{load_corpus, make_split, Corpus, ForgetScale};
use recant_core::decode::{plot_curves, probe_decoding, write_curves_csv, ThinkKind, ThinkMode};
use recant_core::error::{Error, Result};
use recant_core::llm::{LLMEndpoint, TemplateRegistry};
use recant_core::metrics::{
    evaluate_checkpoint, snapshot_baseline, Baseline, EvalContext, EvalSettings,
};
use recant_core::model::{Model, ModelConfig};
use recant_core::objectives::{IdkVariant, IdkVariantSpec, Method};
use recant_core::pipeline::{build_dataset, load_mapping, load_sources, CotDelimiters};
use recant_core::providers::Providers;
use recant_core::tokenizer::PieceTokenizer;
use recant_core::trainer::{
    finetune_target, load_records, run_unlearning, select_report_epoch, UnlearnRunConfig,
};
use recant_core::{DecodeParams, MaskStrategy, ReasoningExample};

#[derive(Parser)]
#[command(
    name = "recant",
    version,
    about = "Unlearning workbench for reasoning language models"
)]
struct Cli {
    /// TOML settings file; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Construct a corpus from source questions and an author mapping.
    BuildDataset(BuildDatasetArgs),
    /// Fine-tune a fresh target model on the trainable corpus splits.
    Finetune(FinetuneArgs),
    /// Run one unlearning configuration against a fine-tuned target.
    Unlearn(UnlearnArgs),
    /// Evaluate a saved checkpoint and write its metric report.
    Evaluate(EvaluateArgs),
    /// Decode the forget set under think-suppression modes per epoch.
    ProbeDecoding(ProbeDecodingArgs),
    /// Render a completed run as a summary grid.
    Report(ReportArgs),
}

/// Parse argv and execute; returns the process exit code (0 success,
/// 1 validation/usage error, 2 transport error).
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .is_test(false)
        .try_init();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let settings = match &cli.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    settings.validate()?;
    match cli.command {
        Command::BuildDataset(args) => cmd_build_dataset(&settings, &args),
        Command::Finetune(args) => cmd_finetune(&settings, &args),
        Command::Unlearn(args) => cmd_unlearn(&settings, &args),
        Command::Evaluate(args) => cmd_evaluate(&settings, &args),
        Command::ProbeDecoding(args) => cmd_probe_decoding(&settings, &args),
        Command::Report(args) => cmd_report(&settings, &args),
    }
}

fn write_summary(dir: &Path, summary: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(summary)?,
    )?;
    Ok(())
}

/// Sentence-piece sources that must be in-vocabulary besides the corpus:
/// chat scaffolding, the minimal-think phrase, and the refusal pool.
fn vocab_sources(corpus: &Corpus, settings: &Settings) -> Vec<String> {
    let t = &settings.template;
    let mut sources = vec![
        t.user_prefix.clone(),
        t.user_suffix.clone(),
        t.assistant_prefix.clone(),
        t.think_open.clone(),
        t.think_close.clone(),
        settings.decode.less_think_phrase.clone(),
    ];
    sources.extend(settings.idk.pool.iter().cloned());
    for ex in corpus.iter() {
        sources.push(ex.question.clone());
        sources.push(ex.cot.clone());
        sources.push(ex.answer.clone());
    }
    sources
}

fn decode_params(settings: &Settings) -> DecodeParams {
    DecodeParams {
        max_new_tokens: settings.decode.max_new_tokens,
        temperature: settings.decode.temperature,
        seed: settings.decode.seed,
    }
}

fn build_providers(settings: &Settings) -> Result<Providers> {
    let mut providers = Providers::local_default();
    match settings.providers.judge.as_str() {
        "heuristic" => {}
        "endpoint" => {
            let endpoint = LLMEndpoint::http(settings.endpoint.judge.clone())?
                .with_cache_dir(settings.paths.cache_dir.join("judge"))?;
            providers.judge = Box::new(recant_core::providers::EndpointJudge::new(
                endpoint,
                TemplateRegistry::builtin(),
            ));
        }
        other => {
            return Err(Error::Validation(format!(
                "unknown judge provider '{other}' (expected 'heuristic' or 'endpoint')"
            )))
        }
    }
    Ok(providers)
}

// ---------------------------------------------------------------- commands

#[derive(Args)]
struct BuildDatasetArgs {
    /// JSONL author mapping: {"fictitious": ..., "real": ...} per line.
    #[arg(long)]
    authors: PathBuf,
    /// JSONL source questions: {"id","author","question","answer"}.
    #[arg(long)]
    tofu: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Which configured endpoint performs the calls.
    #[arg(long, default_value = "main")]
    endpoint: String,
}

fn cmd_build_dataset(settings: &Settings, args: &BuildDatasetArgs) -> Result<()> {
    let endpoint_config = match args.endpoint.as_str() {
        "main" => settings.endpoint.main.clone(),
        "judge" => settings.endpoint.judge.clone(),
        other => {
            return Err(Error::Validation(format!(
                "unknown endpoint '{other}' (configured: main, judge)"
            )))
        }
    };
    let endpoint = LLMEndpoint::http(endpoint_config)?
        .with_cache_dir(settings.paths.cache_dir.join("build"))?;
    let registry = TemplateRegistry::builtin();
    let sources = load_sources(&args.tofu)?;
    let mapping = load_mapping(&args.authors)?;
    let delims = CotDelimiters {
        open: settings.template.think_open.clone(),
        close: settings.template.think_close.clone(),
    };
    let outcome = build_dataset(&sources, &mapping, &endpoint, &registry, &delims)?;
    outcome.save(&args.out)?;
    write_summary(
        &args.out,
        &serde_json::json!({
            "command": "build-dataset",
            "examples": outcome.corpus.len(),
            "corpus": args.out.join("corpus.jsonl"),
            "records": args.out.join("records.jsonl"),
            "corpus_hash": outcome.corpus.content_hash(),
        }),
    )?;
    println!(
        "built {} examples into {}",
        outcome.corpus.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for the checkpoint and its tokenizer.
    #[arg(long)]
    out: PathBuf,
    /// Overrides training.finetune_epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides training.finetune_lr.
    #[arg(long)]
    lr: Option<f64>,
    /// Overrides training.seed for init and batch order.
    #[arg(long)]
    seed: Option<u64>,
}

fn cmd_finetune(settings: &Settings, args: &FinetuneArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let epochs = args.epochs.unwrap_or(settings.training.finetune_epochs);
    let lr = args.lr.unwrap_or(settings.training.finetune_lr);
    let seed = args.seed.unwrap_or(settings.training.seed);

    let tokenizer = PieceTokenizer::build(vocab_sources(&corpus, settings));
    let model = Model::new(ModelConfig::smoke(tokenizer.vocab_size(), seed))?;
    let n_params = model.n_params();
    let trainable: Vec<&ReasoningExample> =
        corpus.iter().filter(|ex| ex.split.is_trainable()).collect();
    let outcome = finetune_target(
        model,
        &trainable,
        &tokenizer,
        &settings.template,
        epochs,
        lr,
        settings.training.effective_batch,
        seed,
    )?;

    fs::create_dir_all(&args.out)?;
    outcome.model.save(&args.out)?;
    tokenizer.save(&args.out.join("tokenizer.json"))?;
    if outcome.diverged {
        log::warn!(
            "training diverged; saved the checkpoint from epoch {}",
            outcome.completed_epochs
        );
    }
    write_summary(
        &args.out,
        &serde_json::json!({
            "command": "finetune",
            "examples": trainable.len(),
            "epochs_requested": epochs,
            "epochs_completed": outcome.completed_epochs,
            "diverged": outcome.diverged,
            "lr": lr,
            "seed": seed,
            "params": n_params,
            "vocab": tokenizer.vocab_size(),
            "checkpoint": args.out,
        }),
    )?;
    println!(
        "fine-tuned {} params for {} epoch(s) into {}",
        n_params,
        outcome.completed_epochs,
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
struct UnlearnArgs {
    /// ga | gd | kl | po
    #[arg(long)]
    method: String,
    /// cot_and_answer | answer_only | cot_only
    #[arg(long)]
    strategy: String,
    /// forget01 | forget05 | forget10
    #[arg(long)]
    scale: String,
    #[arg(long)]
    corpus: PathBuf,
    /// Directory with the fine-tuned target checkpoint and tokenizer.json.
    #[arg(long)]
    target: PathBuf,
    /// Overrides the per-scale default learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    mu_floor: Option<f64>,
    #[arg(long)]
    effective_batch: Option<usize>,
    /// Overrides paths.runs_dir.
    #[arg(long)]
    runs_dir: Option<PathBuf>,
    /// Refusal variant when method is po.
    #[arg(long, default_value = "answer_idk")]
    idk_variant: String,
    /// JSON map of forget id -> hesitant trace (reasoned_idk only).
    #[arg(long)]
    reasoned_traces: Option<PathBuf>,
    #[arg(long, default_value = "target")]
    model_id: String,
}

fn cmd_unlearn(settings: &Settings, args: &UnlearnArgs) -> Result<()> {
    let method = Method::parse(&args.method)?;
    let strategy = MaskStrategy::parse(&args.strategy)?;
    let forget_scale = ForgetScale::parse(&args.scale)?;
    let cfg = UnlearnRunConfig {
        method,
        strategy,
        forget_scale,
        lr: args.lr.unwrap_or_else(|| forget_scale.default_lr()),
        weight_decay: settings.training.weight_decay,
        effective_batch: args
            .effective_batch
            .unwrap_or(settings.training.effective_batch),
        max_epochs: args.max_epochs.unwrap_or(settings.training.max_epochs),
        mu_floor: args.mu_floor.unwrap_or(settings.training.mu_floor),
        seed: args.seed.unwrap_or(settings.training.seed),
        model_id: args.model_id.clone(),
        kl_positions: Default::default(),
    };

    let corpus = load_corpus(&args.corpus)?;
    let split = make_split(&corpus, forget_scale.fraction(), cfg.seed)?;
    let model = Model::load(&args.target)?;
    let tokenizer = PieceTokenizer::load(&args.target.join("tokenizer.json"))?;
    let providers = build_providers(settings)?;
    let eval_settings = EvalSettings {
        decode: decode_params(settings),
        mode: ThinkMode::default_think(),
        max_examples_per_set: settings.eval.max_examples_per_set,
    };
    let all_examples: Vec<&ReasoningExample> = corpus.iter().collect();
    let baseline = snapshot_baseline(
        &model,
        &tokenizer,
        &settings.template,
        &all_examples,
        &eval_settings.mode,
        &eval_settings.decode,
    )?;
    let ctx = EvalContext {
        tokenizer: &tokenizer,
        template: &settings.template,
        corpus: &corpus,
        split: &split,
        providers: &providers,
        settings: &eval_settings,
        baseline: &baseline,
    };

    let frozen = (method == Method::Kl).then(|| model.clone());
    let idk_spec = if method == Method::Po {
        let variant = IdkVariant::parse(&args.idk_variant)?;
        let reasoned_traces: BTreeMap<String, String> = match (&args.reasoned_traces, variant) {
            (Some(path), _) => serde_json::from_str(&fs::read_to_string(path)?)?,
            (None, IdkVariant::ReasonedIdk) => {
                return Err(Error::Validation(
                    "reasoned_idk needs --reasoned-traces <file>".into(),
                ))
            }
            (None, _) => BTreeMap::new(),
        };
        Some(IdkVariantSpec {
            variant,
            idk_pool: settings.idk.pool.clone(),
            reasoned_traces,
        })
    } else {
        None
    };

    let runs_dir = args
        .runs_dir
        .clone()
        .unwrap_or_else(|| settings.paths.runs_dir.clone());
    let (records, run_dir) = run_unlearning(
        &cfg,
        &model,
        frozen.as_ref(),
        idk_spec.as_ref(),
        &ctx,
        &runs_dir,
    )?;

    // Keep everything a later evaluate/probe needs inside the run dir.
    baseline.save(&run_dir.join("baseline.json"))?;
    tokenizer.save(&run_dir.join("tokenizer.json"))?;
    let (report_epoch, warning) = select_report_epoch(&records, cfg.mu_floor)?;
    if warning {
        log::warn!("model utility fell below the floor in epoch 1; reporting epoch 1");
    }
    write_summary(
        &run_dir,
        &serde_json::json!({
            "command": "unlearn",
            "run_dir": run_dir,
            "config_hash": cfg.hash(),
            "epochs": records.len(),
            "report_epoch": report_epoch,
            "report_epoch_warning": warning,
            "mu": records.iter().map(|r| r.mu).collect::<Vec<_>>(),
            "afe": records.iter().map(|r| r.afe).collect::<Vec<_>>(),
            "cfe": records.iter().map(|r| r.cfe).collect::<Vec<_>>(),
        }),
    )?;
    println!(
        "completed {} epoch(s) into {}; report epoch {}{}",
        records.len(),
        run_dir.display(),
        report_epoch,
        if warning {
            " (below utility floor)"
        } else {
            ""
        }
    );
    Ok(())
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint directory (an epoch dir of a run, or a fine-tune output).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Pre-unlearning baseline snapshot (written by `unlearn`).
    #[arg(long)]
    baseline: PathBuf,
    /// Tokenizer file; defaults to one next to or above the checkpoint.
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// Split scale used by the run being evaluated.
    #[arg(long, default_value = "forget10")]
    scale: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for metrics.json and summary.json.
    #[arg(long)]
    out: PathBuf,
}

fn locate_tokenizer(args_tokenizer: &Option<PathBuf>, checkpoint: &Path) -> Result<PathBuf> {
    if let Some(path) = args_tokenizer {
        return Ok(path.clone());
    }
    let beside = checkpoint.join("tokenizer.json");
    if beside.is_file() {
        return Ok(beside);
    }
    if let Some(parent) = checkpoint.parent() {
        let above = parent.join("tokenizer.json");
        if above.is_file() {
            return Ok(above);
        }
    }
    Err(Error::Validation(format!(
        "no tokenizer.json next to or above {}; pass --tokenizer",
        checkpoint.display()
    )))
}

fn cmd_evaluate(settings: &Settings, args: &EvaluateArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let forget_scale = ForgetScale::parse(&args.scale)?;
    let seed = args.seed.unwrap_or(settings.training.seed);
    let split = make_split(&corpus, forget_scale.fraction(), seed)?;
    let model = Model::load(&args.checkpoint)?;
    let tokenizer = PieceTokenizer::load(&locate_tokenizer(&args.tokenizer, &args.checkpoint)?)?;
    let baseline = Baseline::load(&args.baseline)?;
    let providers = build_providers(settings)?;
    let eval_settings = EvalSettings {
        decode: decode_params(settings),
        mode: ThinkMode::default_think(),
        max_examples_per_set: settings.eval.max_examples_per_set,
    };
    let ctx = EvalContext {
        tokenizer: &tokenizer,
        template: &settings.template,
        corpus: &corpus,
        split: &split,
        providers: &providers,
        settings: &eval_settings,
        baseline: &baseline,
    };
    let report = evaluate_checkpoint(&model, &ctx)?;
    let scores = aggregate(&report)?;
    fs::create_dir_all(&args.out)?;
    report.save(&args.out.join("metrics.json"))?;
    write_summary(
        &args.out,
        &serde_json::json!({
            "command": "evaluate",
            "checkpoint": args.checkpoint,
            "mu": scores.mu,
            "afe": scores.afe,
            "cfe": scores.cfe,
            "avg": scores.avg,
            "unscored_judge": report.unscored_judge,
        }),
    )?;
    println!(
        "MU {:.4}  AFE {:.4}  CFE {:.4}  Avg. {:.4}",
        scores.mu, scores.afe, scores.cfe, scores.avg
    );
    Ok(())
}

#[derive(Args)]
struct ProbeDecodingArgs {
    /// A run directory produced by `unlearn`.
    #[arg(long)]
    run: PathBuf,
    /// Comma-separated think modes: default, zero, less.
    #[arg(long, default_value = "default,zero,less")]
    modes: String,
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for curves.csv and the plots.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_probe_decoding(settings: &Settings, args: &ProbeDecodingArgs) -> Result<()> {
    let run_json = args.run.join("run.json");
    let cfg: UnlearnRunConfig = serde_json::from_str(
        &fs::read_to_string(&run_json)
            .map_err(|e| Error::Validation(format!("cannot read {}: {e}", run_json.display())))?,
    )?;
    let corpus = load_corpus(&args.corpus)?;
    let split = make_split(&corpus, cfg.forget_scale.fraction(), cfg.seed)?;
    let tokenizer = PieceTokenizer::load(&args.run.join("tokenizer.json"))?;

    let mut modes = Vec::new();
    for name in args.modes.split(',') {
        let kind = ThinkKind::parse(name)?;
        modes.push(ThinkMode::new(
            kind,
            &settings.template,
            &settings.decode.less_think_phrase,
        )?);
    }

    let checkpoints: Vec<(usize, Option<Model>)> = (1..=cfg.max_epochs)
        .map(|epoch| {
            let dir = args.run.join(format!("epoch{epoch}"));
            (epoch, Model::load(&dir).ok())
        })
        .collect();
    let providers = build_providers(settings)?;
    let forget = split.forget_examples(&corpus);
    let points = probe_decoding(
        &checkpoints,
        &forget,
        &modes,
        &tokenizer,
        &settings.template,
        providers.embedder.as_ref(),
        &decode_params(settings),
    )?;

    fs::create_dir_all(&args.out)?;
    write_curves_csv(&points, &args.out.join("curves.csv"))?;
    plot_curves(
        &points,
        "rouge",
        "Forget-set ROUGE by decoding mode",
        &args.out.join("curves_rouge.svg"),
    )?;
    plot_curves(
        &points,
        "cs",
        "Forget-set cosine similarity by decoding mode",
        &args.out.join("curves_cs.svg"),
    )?;
    write_summary(
        &args.out,
        &serde_json::json!({
            "command": "probe-decoding",
            "run": args.run,
            "modes": modes.iter().map(|m| m.kind.as_str()).collect::<Vec<_>>(),
            "points": points.len(),
            "curves": args.out.join("curves.csv"),
        }),
    )?;
    println!(
        "probed {} curve point(s) into {}",
        points.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
struct ReportArgs {
    /// A run directory produced by `unlearn`.
    #[arg(long)]
    run: PathBuf,
    /// Output directory; defaults to the run directory itself.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_report(_settings: &Settings, args: &ReportArgs) -> Result<()> {
    let run_json = args.run.join("run.json");
    let cfg: UnlearnRunConfig = serde_json::from_str(
        &fs::read_to_string(&run_json)
            .map_err(|e| Error::Validation(format!("cannot read {}: {e}", run_json.display())))?,
    )?;
    let records = load_records(&args.run)?;
    let (report_epoch, warning) = select_report_epoch(&records, cfg.mu_floor)?;
    let reported = records
        .iter()
        .find(|r| r.epoch == report_epoch)
        .expect("selected epoch exists");

    let row = GridRow {
        method: cfg.method.as_str().to_string(),
        strategy: cfg.strategy.as_str().to_string(),
        scale: cfg.forget_scale.as_str().to_string(),
        mu: reported.mu,
        afe: reported.afe,
        cfe: reported.cfe,
        avg: (reported.mu + reported.afe + reported.cfe) / 3.0,
    };
    let out_dir = args.out.clone().unwrap_or_else(|| args.run.clone());
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("report.csv"), render_grid_csv(std::slice::from_ref(&row)))?;

    let mut text = render_grid_text(&[row]);
    text.push('\n');
    text.push_str(&format!(
        "reported epoch: {report_epoch}{}\n",
        if warning {
            " (warning: utility below floor at epoch 1)"
        } else {
            ""
        }
    ));
    text.push_str("epoch  MU      AFE     CFE     total loss\n");
    for r in &records {
        text.push_str(&format!(
            "{:<6} {:.4}  {:.4}  {:.4}  {:+.4}\n",
            r.epoch, r.mu, r.afe, r.cfe, r.losses.total
        ));
    }
    fs::write(out_dir.join("report.txt"), &text)?;
    write_summary(
        &out_dir,
        &serde_json::json!({
            "command": "report",
            "run": args.run,
            "report_epoch": report_epoch,
            "report_epoch_warning": warning,
            "mu": reported.mu,
            "afe": reported.afe,
            "cfe": reported.cfe,
        }),
    )?;
    print!("{text}");
    Ok(())
}
