//! Target fine-tuning and the unlearning loop: learning-rate schedule,
//! per-epoch checkpointing and evaluation, and the report-epoch rule.
//!
//! A run writes `runs/<cfg-hash>/epoch<k>/` checkpoints plus `run.json`
//! (the full config) and `records.json` (one record per completed epoch,
//! flushed after every epoch so an aborted run keeps what it finished).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregate::aggregate;
use crate::corpus::{ForgetScale, ReasoningExample};
use crate::error::{Error, Result};
use crate::manifest::RunManifest;
use crate::metrics::{evaluate_checkpoint, EvalContext};
use crate::model::{AdamW, Model, Params};
use crate::objectives::{
    build_idk_dataset, ga_grads, gd_grads, kl_grads, nll_grads, po_grads, prepare_examples,
    IdkVariantSpec, KlPositions, LossBreakdown, Method, PreparedExample,
};
use crate::segment::{ChatTemplate, MaskStrategy};
use crate::tokenizer::PieceTokenizer;

/// The learning rates swept by default when tuning a method.
pub const DEFAULT_LR_GRID: [f64; 3] = [1e-5, 2e-6, 1e-6];

pub const DEFAULT_WEIGHT_DECAY: f64 = 0.01;
pub const DEFAULT_EFFECTIVE_BATCH: usize = 32;
pub const DEFAULT_MAX_EPOCHS: usize = 5;
pub const DEFAULT_MU_FLOOR: f64 = 0.6;

fn default_weight_decay() -> f64 {
    DEFAULT_WEIGHT_DECAY
}
fn default_effective_batch() -> usize {
    DEFAULT_EFFECTIVE_BATCH
}
fn default_max_epochs() -> usize {
    DEFAULT_MAX_EPOCHS
}
fn default_mu_floor() -> f64 {
    DEFAULT_MU_FLOOR
}

/// Everything that identifies an unlearning run. The whole struct is
/// serialized into `run.json` and hashed into the run directory name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnRunConfig {
    pub method: Method,
    pub strategy: MaskStrategy,
    pub forget_scale: ForgetScale,
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_effective_batch")]
    pub effective_batch: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_mu_floor")]
    pub mu_floor: f64,
    pub seed: u64,
    pub model_id: String,
    #[serde(default)]
    pub kl_positions: KlPositions,
}

impl UnlearnRunConfig {
    /// A config at the per-scale default learning rate with standard
    /// training hyperparameters.
    pub fn new(
        method: Method,
        strategy: MaskStrategy,
        forget_scale: ForgetScale,
        seed: u64,
        model_id: impl Into<String>,
    ) -> Self {
        Self {
            method,
            strategy,
            forget_scale,
            lr: forget_scale.default_lr(),
            weight_decay: DEFAULT_WEIGHT_DECAY,
            effective_batch: DEFAULT_EFFECTIVE_BATCH,
            max_epochs: DEFAULT_MAX_EPOCHS,
            mu_floor: DEFAULT_MU_FLOOR,
            seed,
            model_id: model_id.into(),
            kl_positions: KlPositions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Validation(format!(
                "learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        if !(self.mu_floor > 0.0 && self.mu_floor < 1.0) {
            return Err(Error::Validation(format!(
                "mu_floor must lie in (0, 1), got {}",
                self.mu_floor
            )));
        }
        if self.effective_batch == 0 {
            return Err(Error::Validation(
                "effective_batch must be at least 1".into(),
            ));
        }
        if self.max_epochs == 0 {
            return Err(Error::Validation("max_epochs must be at least 1".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Validation(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.model_id.is_empty() {
            return Err(Error::Validation("model_id must not be empty".into()));
        }
        Ok(())
    }

    /// Stable 12-hex-digit digest of the canonical JSON form; names the
    /// run directory.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(digest)[..12].to_string()
    }
}

/// One completed epoch: mean per-term losses over its optimizer steps, the
/// aggregate scores of its checkpoint, and where that checkpoint lives.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub mu: f64,
    pub afe: f64,
    pub cfe: f64,
    pub checkpoint_ref: PathBuf,
}

/// Learning rate for global step `step`: linear warmup from 0 over
/// `warmup_steps` (the first epoch), peak exactly at `warmup_steps`, then
/// linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, warmup_steps: usize, total_steps: usize, peak: f64) -> f64 {
    if step >= total_steps && total_steps > warmup_steps {
        return 0.0;
    }
    if warmup_steps > 0 && step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        // Single-epoch run: the ramp is all there is.
        return peak;
    }
    peak * (total_steps - step) as f64 / (total_steps - warmup_steps) as f64
}

fn params_finite(params: &Params) -> bool {
    params
        .tensors()
        .iter()
        .all(|t| t.iter().all(|x| x.is_finite()))
}

/// Result of target fine-tuning. When training diverged, `model` is the
/// checkpoint from the last epoch that completed with finite loss.
pub struct FinetuneOutcome {
    pub model: Model,
    pub completed_epochs: usize,
    pub diverged: bool,
}

/// Fine-tune the target model on the given examples with a constant
/// learning rate, loss over think and answer spans. `epochs == 0` returns
/// the model unchanged; divergence (non-finite loss or parameters) aborts
/// with the checkpoint from the last fully finite epoch.
#[allow(clippy::too_many_arguments)]
pub fn finetune_target(
    mut model: Model,
    examples: &[&ReasoningExample],
    tokenizer: &PieceTokenizer,
    template: &ChatTemplate,
    epochs: usize,
    lr: f64,
    effective_batch: usize,
    seed: u64,
) -> Result<FinetuneOutcome> {
    if effective_batch == 0 {
        return Err(Error::Validation(
            "effective_batch must be at least 1".into(),
        ));
    }
    if epochs == 0 {
        return Ok(FinetuneOutcome {
            model,
            completed_epochs: 0,
            diverged: false,
        });
    }
    let prepared = prepare_examples(
        examples.iter().copied(),
        template,
        tokenizer,
        MaskStrategy::CotAndAnswer,
        model.config.max_seq_len,
    )?;
    if prepared.is_empty() {
        return Err(Error::Validation(
            "fine-tuning needs at least one example".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut optimizer = AdamW::new(&model.params, DEFAULT_WEIGHT_DECAY);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut last_good = model.params.clone();
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(effective_batch) {
            let batch: Vec<PreparedExample> = chunk.iter().map(|&i| prepared[i].clone()).collect();
            let (loss, _tokens, grads) = nll_grads(&model, &batch)?;
            if loss.is_finite() {
                optimizer.step(&mut model.params, &grads, lr);
            }
            if !loss.is_finite() || !params_finite(&model.params) {
                model.params = last_good;
                return Ok(FinetuneOutcome {
                    model,
                    completed_epochs: epoch - 1,
                    diverged: true,
                });
            }
        }
        last_good = model.params.clone();
        let _ = epoch;
    }
    Ok(FinetuneOutcome {
        model,
        completed_epochs: epochs,
        diverged: false,
    })
}

/// Cycles through a prepared set in shuffled order, reshuffling whenever
/// the pool runs dry, so retain batches cover the set before repeating.
struct BatchCycler {
    order: Vec<usize>,
    cursor: usize,
}

impl BatchCycler {
    fn new(len: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        Self { order, cursor: 0 }
    }

    fn draw(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn gather(pool: &[PreparedExample], idx: &[usize]) -> Vec<PreparedExample> {
    idx.iter().map(|&i| pool[i].clone()).collect()
}

/// Run the unlearning loop for `cfg`, starting from `target`.
///
/// `frozen` is required for the KL method (its reference distribution) and
/// must stay byte-identical for the whole run; `idk` is required for PO.
/// Evaluation after every epoch uses `ctx`, whose corpus and split also
/// drive training. Returns the per-epoch records and the run directory.
pub fn run_unlearning(
    cfg: &UnlearnRunConfig,
    target: &Model,
    frozen: Option<&Model>,
    idk: Option<&IdkVariantSpec>,
    ctx: &EvalContext,
    runs_dir: &Path,
) -> Result<(Vec<EpochRecord>, PathBuf)> {
    cfg.validate()?;
    if cfg.method == Method::Kl && frozen.is_none() {
        return Err(Error::Validation(
            "kl method requires a frozen copy of the target model".into(),
        ));
    }
    if cfg.method == Method::Po && idk.is_none() {
        return Err(Error::Validation(
            "po method requires a refusal-variant specification".into(),
        ));
    }
    let frozen_hash_before = frozen.map(Model::params_hash);

    let run_dir = runs_dir.join(cfg.hash());
    fs::create_dir_all(&run_dir)?;
    fs::write(run_dir.join("run.json"), serde_json::to_string_pretty(cfg)?)?;
    let manifest = RunManifest::new(
        cfg.hash(),
        ctx.corpus.content_hash(),
        ctx.providers.provenance(),
    );
    manifest.save(&run_dir.join("manifest.json"))?;

    let mut model = target.clone();
    let max_len = model.config.max_seq_len;
    let forget_refs = ctx.split.forget_examples(ctx.corpus);
    let retain_refs = ctx.split.retain_examples(ctx.corpus);
    if forget_refs.is_empty() {
        return Err(Error::Validation("forget split is empty".into()));
    }

    // PO trains toward refusals instead of ascending on the originals; the
    // variant dictates which spans of the substituted examples are masked.
    let idk_built: Option<(Vec<ReasoningExample>, MaskStrategy)> = match (cfg.method, idk) {
        (Method::Po, Some(spec)) => Some(build_idk_dataset(&forget_refs, spec, cfg.seed)?),
        _ => None,
    };
    let forget_prepared: Vec<PreparedExample> = match &idk_built {
        Some((examples, strategy)) => prepare_examples(
            examples.iter(),
            ctx.template,
            ctx.tokenizer,
            *strategy,
            max_len,
        )?,
        None => prepare_examples(
            forget_refs.iter().copied(),
            ctx.template,
            ctx.tokenizer,
            cfg.strategy,
            max_len,
        )?,
    };
    let needs_retain = matches!(cfg.method, Method::Gd | Method::Kl | Method::Po);
    let retain_strategy = match cfg.method {
        // PO's retain term is plain language modeling on the full response.
        Method::Po => MaskStrategy::CotAndAnswer,
        _ => cfg.strategy,
    };
    let retain_prepared: Vec<PreparedExample> = if needs_retain {
        if retain_refs.is_empty() {
            return Err(Error::Validation("retain split is empty".into()));
        }
        prepare_examples(
            retain_refs.iter().copied(),
            ctx.template,
            ctx.tokenizer,
            retain_strategy,
            max_len,
        )?
    } else {
        Vec::new()
    };

    let steps_per_epoch = forget_prepared.len().div_ceil(cfg.effective_batch);
    let warmup = steps_per_epoch;
    let total_steps = steps_per_epoch * cfg.max_epochs;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut retain_cycler = if needs_retain {
        Some(BatchCycler::new(retain_prepared.len(), &mut rng))
    } else {
        None
    };
    let mut optimizer = AdamW::new(&model.params, cfg.weight_decay);
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut order: Vec<usize> = (0..forget_prepared.len()).collect();
    let mut global_step = 0usize;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_losses = LossBreakdown::default();
        let mut n_steps = 0usize;
        for chunk in order.chunks(cfg.effective_batch) {
            let forget_batch = gather(&forget_prepared, chunk);
            let retain_batch = retain_cycler
                .as_mut()
                .map(|c| gather(&retain_prepared, &c.draw(chunk.len(), &mut rng)));
            let (losses, grads) = match cfg.method {
                Method::Ga => ga_grads(&model, &forget_batch)?,
                Method::Gd => gd_grads(&model, &forget_batch, retain_batch.as_ref().unwrap())?,
                Method::Kl => kl_grads(
                    &model,
                    frozen.unwrap(),
                    &forget_batch,
                    retain_batch.as_ref().unwrap(),
                    cfg.kl_positions,
                )?,
                Method::Po => po_grads(&model, retain_batch.as_ref().unwrap(), &forget_batch)?,
            };
            if !losses.total.is_finite() {
                return Err(Error::Validation(format!(
                    "non-finite loss at epoch {epoch}, step {global_step}"
                )));
            }
            let lr = lr_at(global_step, warmup, total_steps, cfg.lr);
            optimizer.step(&mut model.params, &grads, lr);
            if !params_finite(&model.params) {
                return Err(Error::Validation(format!(
                    "parameters diverged at epoch {epoch}, step {global_step}"
                )));
            }
            global_step += 1;

            epoch_losses.forget_term += losses.forget_term;
            epoch_losses.retain_term += losses.retain_term;
            epoch_losses.kl_term += losses.kl_term;
            epoch_losses.total += losses.total;
            epoch_losses.forget_tokens += losses.forget_tokens;
            epoch_losses.retain_tokens += losses.retain_tokens;
            epoch_losses.kl_positions += losses.kl_positions;
            n_steps += 1;
        }
        let inv = 1.0 / n_steps as f64;
        epoch_losses.forget_term *= inv;
        epoch_losses.retain_term *= inv;
        epoch_losses.kl_term *= inv;
        epoch_losses.total *= inv;

        let epoch_dir = run_dir.join(format!("epoch{epoch}"));
        fs::create_dir_all(&epoch_dir)?;
        model.save(&epoch_dir)?;

        let mut report = evaluate_checkpoint(&model, ctx)?;
        report.manifest = Some(manifest.clone());
        report.save(&epoch_dir.join("metrics.json"))?;
        let scores = aggregate(&report)?;

        records.push(EpochRecord {
            epoch,
            losses: epoch_losses,
            mu: scores.mu,
            afe: scores.afe,
            cfe: scores.cfe,
            checkpoint_ref: epoch_dir,
        });
        save_records(&records, &run_dir)?;
    }

    if let Some(before) = frozen_hash_before {
        let after = frozen.unwrap().params_hash();
        if before != after {
            return Err(Error::Validation(
                "frozen model parameters changed during the run".into(),
            ));
        }
    }
    Ok((records, run_dir))
}

pub fn save_records(records: &[EpochRecord], run_dir: &Path) -> Result<()> {
    fs::write(
        run_dir.join("records.json"),
        serde_json::to_string_pretty(records)?,
    )?;
    Ok(())
}

pub fn load_records(run_dir: &Path) -> Result<Vec<EpochRecord>> {
    let path = run_dir.join("records.json");
    Ok(serde_json::from_str(&fs::read_to_string(&path)?)?)
}

/// The epoch to report: the largest `e` whose prefix keeps model utility
/// at or above the floor. If even epoch 1 is below the floor the first
/// epoch is reported with the warning flag raised.
pub fn select_report_epoch(records: &[EpochRecord], mu_floor: f64) -> Result<(usize, bool)> {
    if records.is_empty() {
        return Err(Error::Validation(
            "cannot select an epoch from zero records".into(),
        ));
    }
    if records[0].mu < mu_floor {
        return Ok((records[0].epoch, true));
    }
    let mut chosen = records[0].epoch;
    for record in records {
        if record.mu < mu_floor {
            break;
        }
        chosen = record.epoch;
    }
    Ok((chosen, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_split, Corpus, Split, SplitSpec};
    use crate::metrics::{snapshot_baseline, EvalSettings};
    use crate::model::ModelConfig;
    use crate::objectives::{ga_loss, IdkVariant};
    use crate::providers::Providers;
    use crate::tokenizer::PieceTokenizer;
    use crate::DecodeParams;
    use approx::assert_abs_diff_eq;
    use std::collections::BTreeMap;
    use tempfile::tempdir;

    fn template() -> ChatTemplate {
        ChatTemplate::default()
    }

    fn fixture_corpus() -> Corpus {
        let rows = [
            (
                "a1",
                "alice",
                "Who wrote Dust?",
                "Dust mentions alice. So alice wrote it.",
                "alice wrote Dust.",
                Split::Retain,
            ),
            (
                "a2",
                "alice",
                "Where is alice from?",
                "Records say alice lives north.",
                "alice is from the north.",
                Split::Retain,
            ),
            (
                "b1",
                "bob",
                "Who wrote Rain?",
                "Rain mentions bob. So bob wrote it.",
                "bob wrote Rain.",
                Split::Retain,
            ),
            (
                "b2",
                "bob",
                "Where is bob from?",
                "Records say bob lives south.",
                "bob is from the south.",
                Split::Retain,
            ),
            (
                "ra1",
                "carol",
                "Who is carol?",
                "",
                "carol is a poet.",
                Split::RealAuthors,
            ),
            (
                "wf1",
                "none",
                "What is water?",
                "",
                "water is a liquid.",
                Split::WorldFacts,
            ),
        ];
        let examples = rows
            .into_iter()
            .map(|(id, author, q, cot, ans, split)| {
                ReasoningExample::new(id, author, q, cot, ans, split)
            })
            .collect();
        Corpus::from_examples(examples).unwrap()
    }

    fn fixture_tokenizer(corpus: &Corpus) -> PieceTokenizer {
        let tpl = template();
        let mut sources: Vec<String> = vec![
            tpl.user_prefix.clone(),
            tpl.user_suffix.clone(),
            tpl.assistant_prefix.clone(),
            tpl.think_open.clone(),
            tpl.think_close.clone(),
            "I cannot answer that.".to_string(),
            "That is outside what I can discuss.".to_string(),
        ];
        for ex in corpus.iter() {
            sources.push(ex.question.clone());
            sources.push(ex.cot.clone());
            sources.push(ex.answer.clone());
        }
        PieceTokenizer::build(&sources)
    }

    fn tiny_model(vocab: usize) -> Model {
        Model::new(ModelConfig {
            vocab_size: vocab,
            max_seq_len: 96,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            seed: 33,
        })
        .unwrap()
    }

    struct Harness {
        corpus: Corpus,
        split: SplitSpec,
        tokenizer: PieceTokenizer,
        template: ChatTemplate,
        providers: Providers,
        settings: EvalSettings,
    }

    impl Harness {
        fn new() -> Self {
            let corpus = fixture_corpus();
            let split = make_split(&corpus, 0.5, 7).unwrap();
            let tokenizer = fixture_tokenizer(&corpus);
            Self {
                corpus,
                split,
                tokenizer,
                template: template(),
                providers: Providers::local_default(),
                settings: EvalSettings {
                    decode: DecodeParams {
                        max_new_tokens: 8,
                        temperature: 0.0,
                        seed: 0,
                    },
                    mode: crate::ThinkMode::default_think(),
                    max_examples_per_set: Some(2),
                },
            }
        }

        fn model(&self) -> Model {
            tiny_model(self.tokenizer.vocab_size())
        }

        fn ctx<'a>(&'a self, baseline: &'a crate::metrics::Baseline) -> EvalContext<'a> {
            EvalContext {
                tokenizer: &self.tokenizer,
                template: &self.template,
                corpus: &self.corpus,
                split: &self.split,
                providers: &self.providers,
                settings: &self.settings,
                baseline,
            }
        }

        fn baseline(&self, model: &Model) -> crate::metrics::Baseline {
            let all: Vec<&ReasoningExample> = self.corpus.iter().collect();
            snapshot_baseline(
                model,
                &self.tokenizer,
                &self.template,
                &all,
                &self.settings.mode,
                &self.settings.decode,
            )
            .unwrap()
        }
    }

    fn record(epoch: usize, mu: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            losses: LossBreakdown::default(),
            mu,
            afe: 0.5,
            cfe: 0.5,
            checkpoint_ref: PathBuf::from(format!("epoch{epoch}")),
        }
    }

    #[test]
    fn lr_schedule_starts_at_zero_and_peaks_after_first_epoch() {
        let warmup = 4;
        let total = 20;
        let peak = 1e-5;
        assert_eq!(lr_at(0, warmup, total, peak), 0.0);
        assert_abs_diff_eq!(lr_at(warmup, warmup, total, peak), peak, epsilon = 1e-18);
        assert_eq!(lr_at(total, warmup, total, peak), 0.0);
    }

    #[test]
    fn lr_schedule_is_piecewise_linear_with_one_peak() {
        let warmup = 5;
        let total = 25;
        let peak = 2e-6;
        let values: Vec<f64> = (0..=total).map(|s| lr_at(s, warmup, total, peak)).collect();
        for s in 0..warmup {
            assert!(values[s + 1] > values[s], "warmup must climb at {s}");
        }
        for s in warmup..total {
            assert!(values[s + 1] < values[s], "decay must fall at {s}");
        }
        let max = values.iter().cloned().fold(f64::MIN, f64::max);
        assert_abs_diff_eq!(max, peak, epsilon = 1e-18);
        assert_eq!(values.iter().position(|&v| v == max), Some(warmup));
    }

    #[test]
    fn lr_schedule_single_epoch_ramps_to_peak() {
        assert_eq!(lr_at(0, 4, 4, 1e-5), 0.0);
        assert_abs_diff_eq!(lr_at(3, 4, 4, 1e-5), 7.5e-6, epsilon = 1e-18);
    }

    #[test]
    fn report_epoch_stops_before_utility_falls_through_floor() {
        let records: Vec<EpochRecord> = [0.75, 0.68, 0.62, 0.58, 0.50]
            .iter()
            .enumerate()
            .map(|(i, &mu)| record(i + 1, mu))
            .collect();
        assert_eq!(select_report_epoch(&records, 0.6).unwrap(), (3, false));
    }

    #[test]
    fn report_epoch_is_final_when_utility_holds() {
        let records: Vec<EpochRecord> = [0.8, 0.75, 0.7, 0.65, 0.61]
            .iter()
            .enumerate()
            .map(|(i, &mu)| record(i + 1, mu))
            .collect();
        assert_eq!(select_report_epoch(&records, 0.6).unwrap(), (5, false));
    }

    #[test]
    fn report_epoch_warns_when_first_epoch_is_below_floor() {
        let records: Vec<EpochRecord> = [0.55, 0.7, 0.8]
            .iter()
            .enumerate()
            .map(|(i, &mu)| record(i + 1, mu))
            .collect();
        assert_eq!(select_report_epoch(&records, 0.6).unwrap(), (1, true));
    }

    #[test]
    fn report_epoch_rejects_empty_records() {
        assert!(select_report_epoch(&[], 0.6).is_err());
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let cfg = UnlearnRunConfig::new(
            Method::Ga,
            MaskStrategy::CotOnly,
            ForgetScale::Forget01,
            3,
            "target",
        );
        let h1 = cfg.hash();
        assert_eq!(h1.len(), 12);
        assert_eq!(h1, cfg.hash());
        let mut other = cfg.clone();
        other.lr = 2e-6;
        assert_ne!(h1, other.hash());
    }

    #[test]
    fn default_lrs_follow_the_scale() {
        assert_eq!(ForgetScale::Forget01.default_lr(), 1e-5);
        assert_eq!(ForgetScale::Forget05.default_lr(), 2e-6);
        assert_eq!(ForgetScale::Forget10.default_lr(), 2e-6);
        for lr in DEFAULT_LR_GRID {
            assert!(lr > 0.0);
        }
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let good = UnlearnRunConfig::new(
            Method::Ga,
            MaskStrategy::CotOnly,
            ForgetScale::Forget01,
            3,
            "target",
        );
        assert!(good.validate().is_ok());
        let mut bad = good.clone();
        bad.lr = -1.0;
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.mu_floor = 1.5;
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.effective_batch = 0;
        assert!(bad.validate().is_err());
        let mut bad = good;
        bad.model_id = String::new();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn finetune_zero_epochs_returns_model_unchanged() {
        let h = Harness::new();
        let model = h.model();
        let hash_before = model.params_hash();
        let examples: Vec<&ReasoningExample> = h.split.retain_examples(&h.corpus);
        let out =
            finetune_target(model, &examples, &h.tokenizer, &h.template, 0, 1e-3, 32, 1).unwrap();
        assert_eq!(out.model.params_hash(), hash_before);
        assert_eq!(out.completed_epochs, 0);
        assert!(!out.diverged);
    }

    #[test]
    fn finetune_reduces_training_loss() {
        let h = Harness::new();
        let model = h.model();
        let examples: Vec<&ReasoningExample> = h.corpus.by_split(Split::Retain).collect();
        let prepared = prepare_examples(
            examples.iter().copied(),
            &h.template,
            &h.tokenizer,
            MaskStrategy::CotAndAnswer,
            model.config.max_seq_len,
        )
        .unwrap();
        let before = ga_loss(&model, &prepared).unwrap().forget_term;
        let out =
            finetune_target(model, &examples, &h.tokenizer, &h.template, 4, 1e-2, 32, 1).unwrap();
        assert!(!out.diverged);
        assert_eq!(out.completed_epochs, 4);
        let after = ga_loss(&out.model, &prepared).unwrap().forget_term;
        assert!(
            after < before,
            "fine-tuning should lower NLL: before {before}, after {after}"
        );
    }

    #[test]
    fn finetune_divergence_returns_last_good_checkpoint() {
        let h = Harness::new();
        let model = h.model();
        let hash_before = model.params_hash();
        let examples: Vec<&ReasoningExample> = h.corpus.by_split(Split::Retain).collect();
        // An absurd learning rate blows the parameters up within the first
        // epoch (batch size 1 gives it several steps to overflow), so the
        // last good checkpoint is the initial one.
        let out =
            finetune_target(model, &examples, &h.tokenizer, &h.template, 3, 1e300, 1, 1).unwrap();
        assert!(out.diverged);
        assert_eq!(out.completed_epochs, 0);
        assert_eq!(out.model.params_hash(), hash_before);
    }

    #[test]
    fn kl_without_frozen_copy_is_a_config_error() {
        let h = Harness::new();
        let model = h.model();
        let baseline = h.baseline(&model);
        let ctx = h.ctx(&baseline);
        let cfg = UnlearnRunConfig::new(
            Method::Kl,
            MaskStrategy::CotAndAnswer,
            ForgetScale::Forget01,
            5,
            "target",
        );
        let dir = tempdir().unwrap();
        let err = run_unlearning(&cfg, &model, None, None, &ctx, dir.path())
            .map(|_| ())
            .unwrap_err();
        assert!(err.to_string().contains("frozen"), "got: {err}");
    }

    #[test]
    fn po_without_variant_spec_is_a_config_error() {
        let h = Harness::new();
        let model = h.model();
        let baseline = h.baseline(&model);
        let ctx = h.ctx(&baseline);
        let cfg = UnlearnRunConfig::new(
            Method::Po,
            MaskStrategy::CotAndAnswer,
            ForgetScale::Forget01,
            5,
            "target",
        );
        let dir = tempdir().unwrap();
        let err = run_unlearning(&cfg, &model, None, None, &ctx, dir.path())
            .map(|_| ())
            .unwrap_err();
        assert!(err.to_string().contains("refusal"), "got: {err}");
    }

    fn smoke_cfg(method: Method) -> UnlearnRunConfig {
        UnlearnRunConfig {
            method,
            strategy: MaskStrategy::CotAndAnswer,
            forget_scale: ForgetScale::Forget01,
            lr: 1e-3,
            weight_decay: 0.01,
            effective_batch: 2,
            max_epochs: 2,
            mu_floor: 0.6,
            seed: 11,
            model_id: "target".into(),
            kl_positions: KlPositions::default(),
        }
    }

    #[test]
    fn run_layout_has_config_records_and_checkpoints() {
        let h = Harness::new();
        let model = h.model();
        let baseline = h.baseline(&model);
        let ctx = h.ctx(&baseline);
        let cfg = smoke_cfg(Method::Ga);
        let dir = tempdir().unwrap();
        let (records, run_dir) =
            run_unlearning(&cfg, &model, None, None, &ctx, dir.path()).unwrap();

        assert_eq!(records.len(), 2);
        assert_eq!(records[0].epoch, 1);
        assert_eq!(records[1].epoch, 2);
        assert_eq!(run_dir, dir.path().join(cfg.hash()));
        assert!(run_dir.join("run.json").is_file());
        assert!(run_dir.join("manifest.json").is_file());
        let reloaded: UnlearnRunConfig =
            serde_json::from_str(&fs::read_to_string(run_dir.join("run.json")).unwrap()).unwrap();
        assert_eq!(reloaded, cfg);
        for record in &records {
            assert!(record.checkpoint_ref.is_dir());
            assert!(record.checkpoint_ref.join("metrics.json").is_file());
            let loaded = Model::load(&record.checkpoint_ref).unwrap();
            assert_eq!(loaded.config, model.config);
        }
        let persisted = load_records(&run_dir).unwrap();
        assert_eq!(persisted.len(), 2);
        assert_abs_diff_eq!(persisted[1].mu, records[1].mu, epsilon = 1e-12);
    }

    #[test]
    fn identical_configs_reproduce_loss_curves() {
        let h = Harness::new();
        let model = h.model();
        let baseline = h.baseline(&model);
        let ctx = h.ctx(&baseline);
        let cfg = smoke_cfg(Method::Gd);
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        let (rec_a, _) = run_unlearning(&cfg, &model, None, None, &ctx, dir_a.path()).unwrap();
        let (rec_b, _) = run_unlearning(&cfg, &model, None, None, &ctx, dir_b.path()).unwrap();
        assert_eq!(rec_a.len(), rec_b.len());
        for (a, b) in rec_a.iter().zip(&rec_b) {
            assert_abs_diff_eq!(a.losses.total, b.losses.total, epsilon = 1e-5);
            assert_abs_diff_eq!(a.losses.forget_term, b.losses.forget_term, epsilon = 1e-5);
        }
    }

    #[test]
    fn kl_run_leaves_frozen_model_untouched() {
        let h = Harness::new();
        let model = h.model();
        let frozen = model.clone();
        let hash_before = frozen.params_hash();
        let baseline = h.baseline(&model);
        let ctx = h.ctx(&baseline);
        let cfg = smoke_cfg(Method::Kl);
        let dir = tempdir().unwrap();
        let (records, _) =
            run_unlearning(&cfg, &model, Some(&frozen), None, &ctx, dir.path()).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(frozen.params_hash(), hash_before);
        assert!(records.iter().all(|r| r.losses.kl_positions > 0));
    }

    #[test]
    fn po_run_trains_on_refusals() {
        let h = Harness::new();
        let model = h.model();
        let baseline = h.baseline(&model);
        let ctx = h.ctx(&baseline);
        let spec = IdkVariantSpec {
            variant: IdkVariant::AnswerIdk,
            idk_pool: vec![
                "I cannot answer that.".into(),
                "That is outside what I can discuss.".into(),
            ],
            reasoned_traces: BTreeMap::new(),
        };
        let cfg = smoke_cfg(Method::Po);
        let dir = tempdir().unwrap();
        let (records, _) =
            run_unlearning(&cfg, &model, None, Some(&spec), &ctx, dir.path()).unwrap();
        assert_eq!(records.len(), 2);
        // PO never negates: both terms are plain NLLs, so the total is
        // their (positive) sum at every epoch.
        for r in &records {
            assert!(r.losses.total > 0.0);
            assert_abs_diff_eq!(
                r.losses.total,
                r.losses.forget_term + r.losses.retain_term,
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn ga_run_raises_forget_nll() {
        let h = Harness::new();
        let model = h.model();
        let baseline = h.baseline(&model);
        let ctx = h.ctx(&baseline);
        let cfg = smoke_cfg(Method::Ga);
        let dir = tempdir().unwrap();
        let (records, _) = run_unlearning(&cfg, &model, None, None, &ctx, dir.path()).unwrap();
        let forget_prepared = prepare_examples(
            h.split.forget_examples(&h.corpus),
            &h.template,
            &h.tokenizer,
            cfg.strategy,
            model.config.max_seq_len,
        )
        .unwrap();
        let before = ga_loss(&model, &forget_prepared).unwrap().forget_term;
        let last = Model::load(&records.last().unwrap().checkpoint_ref).unwrap();
        let after = ga_loss(&last, &forget_prepared).unwrap().forget_term;
        assert!(
            after > before,
            "ascent should raise forget NLL: before {before}, after {after}"
        );
    }
}
