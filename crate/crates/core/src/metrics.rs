//! Answer-level metrics (ROUGE-L recall, token entropy, cosine
//! similarity, entailment), step-wise reasoning metrics, the leakage
//! judge, and whole-checkpoint evaluation reports.
//!
//! Full-sequence ROUGE punishes reordered-but-preserved reasoning; the
//! step-wise variants align each ground-truth step with its most similar
//! generated step (greedy, with replacement) before scoring, so surviving
//! knowledge is detected even when the trace is shuffled or padded.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{segment_cot, Corpus, ReasoningExample, Split, SplitSpec};
use crate::decode::{generate, DecodeParams, ThinkKind, ThinkMode};
use crate::error::{Error, Result};
use crate::llm::{LLMEndpoint, TemplateRegistry, TPL_JUDGE};
use crate::manifest::RunManifest;
use crate::model::Model;
use crate::providers::{EmbeddingProvider, NliLabel, NliProvider, Providers};
use crate::segment::ChatTemplate;
use crate::tokenizer::PieceTokenizer;

/// Shared normalization for every lexical metric: lowercase, then split on
/// runs of non-alphanumeric characters (punctuation becomes separators).
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L recall: LCS(reference, candidate) / |reference tokens|, on
/// normalized tokens. Empty reference scores 0.
pub fn rouge_l_recall(reference: &str, candidate: &str) -> f64 {
    let ref_tokens = normalize_tokens(reference);
    if ref_tokens.is_empty() {
        return 0.0;
    }
    let cand_tokens = normalize_tokens(candidate);
    lcs_len(&ref_tokens, &cand_tokens) as f64 / ref_tokens.len() as f64
}

/// Normalized unigram Shannon entropy: H(tokens) / ln(token count),
/// defined 0 for one token or fewer. Low values flag degenerate repeated
/// output.
pub fn token_entropy(text: &str) -> f64 {
    let tokens = normalize_tokens(text);
    let n = tokens.len();
    if n <= 1 {
        return 0.0;
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &tokens {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let h: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum();
    h / (n as f64).ln()
}

/// Cosine similarity of two texts under an embedder, truncated at zero.
/// Identical texts score 1 by definition (cos(v, v) = 1, covering the
/// degenerate zero-embedding case); otherwise a zero-norm embedding
/// yields 0.
pub fn cosine_similarity(
    text_before: &str,
    text_after: &str,
    embedder: &dyn EmbeddingProvider,
) -> Result<f64> {
    if text_before == text_after {
        return Ok(1.0);
    }
    let a = embedder.embed(text_before)?;
    let b = embedder.embed(text_after)?;
    if a.len() != b.len() {
        return Err(Error::validation(format!(
            "embedder returned mismatched dimensions {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(0.0, 1.0))
}

/// Fraction of (output, truth) pairs labeled entailment, with the model
/// output as premise and the ground truth as hypothesis.
pub fn entailment_score(outputs: &[&str], truths: &[&str], nli: &dyn NliProvider) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::validation(
            "entailment_score needs at least one pair",
        ));
    }
    if outputs.len() != truths.len() {
        return Err(Error::validation(format!(
            "entailment_score got {} outputs but {} truths",
            outputs.len(),
            truths.len()
        )));
    }
    let mut entailed = 0usize;
    for (out, truth) in outputs.iter().zip(truths) {
        if nli.classify(out, truth)? == NliLabel::Entailment {
            entailed += 1;
        }
    }
    Ok(entailed as f64 / outputs.len() as f64)
}

/// Pairwise scorer used inside the step alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMetric {
    Rouge,
    Cosine,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepPair {
    pub gt_index: usize,
    /// None when there were no generated steps to align against.
    pub gen_index: Option<usize>,
    pub score: f64,
}

/// One record per ground-truth step; generated indices may repeat
/// (alignment with replacement).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepAlignment {
    pub pairs: Vec<StepPair>,
    pub metric: StepMetric,
}

/// Align each ground-truth step with its most similar generated step and
/// average the scores. Empty generated list scores 0 with a degenerate
/// alignment; empty ground truth is an error.
pub fn stepwise_score(
    gt_steps: &[String],
    gen_steps: &[String],
    metric: StepMetric,
    embedder: &dyn EmbeddingProvider,
) -> Result<(f64, StepAlignment)> {
    if gt_steps.is_empty() {
        return Err(Error::validation("stepwise_score needs ground-truth steps"));
    }
    let mut pairs = Vec::with_capacity(gt_steps.len());
    for (gi, gt) in gt_steps.iter().enumerate() {
        if gen_steps.is_empty() {
            pairs.push(StepPair {
                gt_index: gi,
                gen_index: None,
                score: 0.0,
            });
            continue;
        }
        let mut best = (0usize, f64::NEG_INFINITY);
        for (ji, gen) in gen_steps.iter().enumerate() {
            let s = match metric {
                StepMetric::Rouge => rouge_l_recall(gt, gen),
                StepMetric::Cosine => cosine_similarity(gt, gen, embedder)?,
            };
            if s > best.1 {
                best = (ji, s);
            }
        }
        pairs.push(StepPair {
            gt_index: gi,
            gen_index: Some(best.0),
            score: best.1,
        });
    }
    let mean = pairs.iter().map(|p| p.score).sum::<f64>() / pairs.len() as f64;
    Ok((mean, StepAlignment { pairs, metric }))
}

fn parse_judge_reply(reply: &str) -> Option<f64> {
    let trimmed = reply.trim();
    let value: f64 = trimmed.parse().ok()?;
    (0.0..=1.0).contains(&value).then_some(value)
}

/// Score how much a generated trace reveals the forgotten answer, via the
/// judge template. A malformed or out-of-range reply triggers one re-ask
/// (with a reminder appended, so the retry is a distinct cache entry),
/// then a scoring error.
pub fn judge_score(
    question: &str,
    truth_answer: &str,
    generated_cot: &str,
    judge: &LLMEndpoint,
    registry: &TemplateRegistry,
) -> Result<f64> {
    let template = registry.get(TPL_JUDGE)?;
    let prompt = template.fill(&[
        ("answer", truth_answer),
        ("question", question),
        ("cot_after", generated_cot),
    ])?;
    let first = judge.call_cached_raw(&template.version, &prompt)?;
    if let Some(v) = parse_judge_reply(&first) {
        return Ok(v);
    }
    let retry =
        format!("{prompt}\n\nReminder: respond only with a single score between 0.00 and 1.00.");
    let second = judge.call_cached_raw(&template.version, &retry)?;
    parse_judge_reply(&second).ok_or_else(|| {
        Error::Scoring(format!(
            "judge reply unparseable after re-ask: {:?} then {:?}",
            first.trim(),
            second.trim()
        ))
    })
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// series is constant. Used to test monotone trends in leakage curves.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "series must be aligned");
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let da = ra[i] - mean;
        let db = rb[i] - mean;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Stored pre-unlearning outputs; the reference side of the CS metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineOutput {
    pub cot: String,
    pub answer: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Baseline {
    pub model_hash: String,
    pub mode: ThinkKind,
    pub outputs: BTreeMap<String, BaselineOutput>,
}

impl Baseline {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Decode every given example once and store the outputs as the
/// pre-unlearning reference.
pub fn snapshot_baseline(
    model: &Model,
    tokenizer: &PieceTokenizer,
    template: &ChatTemplate,
    examples: &[&ReasoningExample],
    mode: &ThinkMode,
    params: &DecodeParams,
) -> Result<Baseline> {
    let mut outputs = BTreeMap::new();
    for ex in examples {
        let gen = generate(model, tokenizer, template, &ex.question, mode, params)?;
        outputs.insert(
            ex.id.clone(),
            BaselineOutput {
                cot: gen.cot,
                answer: gen.answer,
            },
        );
    }
    Ok(Baseline {
        model_hash: model.params_hash(),
        mode: mode.kind,
        outputs,
    })
}

/// Per-example metric values; absent fields were not applicable (step-wise
/// and judge metrics only exist on the forget set) or unscorable.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExampleMetrics {
    pub set: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub te: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub es: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sw_rouge: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sw_cs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judge: Option<f64>,
}

impl ExampleMetrics {
    fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "rouge" => self.rouge,
            "te" => self.te,
            "cs" => self.cs,
            "es" => self.es,
            "sw_rouge" => self.sw_rouge,
            "sw_cs" => self.sw_cs,
            "judge" => self.judge,
            _ => None,
        }
    }
}

pub const METRIC_KEYS: [&str; 7] = ["rouge", "te", "cs", "es", "sw_rouge", "sw_cs", "judge"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_example: BTreeMap<String, ExampleMetrics>,
    /// set name → metric name → arithmetic mean over present values.
    pub per_set: BTreeMap<String, BTreeMap<String, f64>>,
    pub provenance: BTreeMap<String, String>,
    /// Forget examples whose judge reply stayed unparseable; excluded from
    /// the judge mean.
    pub unscored_judge: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<RunManifest>,
}

impl MetricReport {
    pub fn set_mean(&self, set: &str, metric: &str) -> Option<f64> {
        self.per_set.get(set)?.get(metric).copied()
    }

    /// Recompute per-set means from per-example values (the stored means
    /// must match this to 1e-9).
    pub fn recompute_per_set(&self) -> BTreeMap<String, BTreeMap<String, f64>> {
        let mut sums: BTreeMap<String, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
        for m in self.per_example.values() {
            let entry = sums.entry(m.set.clone()).or_default();
            for key in METRIC_KEYS {
                if let Some(v) = m.get(key) {
                    let slot = entry.entry(key.to_string()).or_insert((0.0, 0));
                    slot.0 += v;
                    slot.1 += 1;
                }
            }
        }
        sums.into_iter()
            .map(|(set, metrics)| {
                let means = metrics
                    .into_iter()
                    .map(|(k, (sum, n))| (k, sum / n as f64))
                    .collect();
                (set, means)
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Evaluation knobs: decoding settings plus an optional per-set cap for
/// cheap in-loop evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSettings {
    pub decode: DecodeParams,
    pub mode: ThinkMode,
    #[serde(default)]
    pub max_examples_per_set: Option<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            decode: DecodeParams::default(),
            mode: ThinkMode::default_think(),
            max_examples_per_set: None,
        }
    }
}

/// Everything evaluate_checkpoint needs besides the model under test.
pub struct EvalContext<'a> {
    pub tokenizer: &'a PieceTokenizer,
    pub template: &'a ChatTemplate,
    pub corpus: &'a Corpus,
    pub split: &'a SplitSpec,
    pub providers: &'a Providers,
    pub settings: &'a EvalSettings,
    pub baseline: &'a Baseline,
}

/// Evaluate a checkpoint on the four sets: answer metrics everywhere,
/// step-wise and judge metrics on forget CoTs. CS compares each output
/// against the stored pre-unlearning output for the same prompt.
pub fn evaluate_checkpoint(model: &Model, ctx: &EvalContext) -> Result<MetricReport> {
    let mut sets: Vec<(&str, Vec<&ReasoningExample>)> = vec![
        (
            Split::Forget.as_str(),
            ctx.split.forget_examples(ctx.corpus),
        ),
        (
            Split::Retain.as_str(),
            ctx.split.retain_examples(ctx.corpus),
        ),
        (
            Split::RealAuthors.as_str(),
            ctx.corpus.by_split(Split::RealAuthors).collect(),
        ),
        (
            Split::WorldFacts.as_str(),
            ctx.corpus.by_split(Split::WorldFacts).collect(),
        ),
    ];
    if let Some(cap) = ctx.settings.max_examples_per_set {
        for (_, examples) in &mut sets {
            examples.truncate(cap);
        }
    }

    let mut per_example = BTreeMap::new();
    let mut unscored_judge = 0usize;
    for (set_name, examples) in &sets {
        for ex in examples {
            let gen = generate(
                model,
                ctx.tokenizer,
                ctx.template,
                &ex.question,
                &ctx.settings.mode,
                &ctx.settings.decode,
            )?;
            let base = ctx.baseline.outputs.get(&ex.id).ok_or_else(|| {
                Error::validation(format!(
                    "no pre-unlearning output stored for example '{}'; \
                     run the baseline snapshot on the target model first",
                    ex.id
                ))
            })?;
            let mut m = ExampleMetrics {
                set: set_name.to_string(),
                rouge: Some(rouge_l_recall(&ex.answer, &gen.answer)),
                te: Some(token_entropy(&gen.answer)),
                cs: Some(cosine_similarity(
                    &base.answer,
                    &gen.answer,
                    ctx.providers.embedder.as_ref(),
                )?),
                ..Default::default()
            };
            let entailed =
                ctx.providers.nli.classify(&gen.answer, &ex.answer)? == NliLabel::Entailment;
            m.es = Some(if entailed { 1.0 } else { 0.0 });

            if *set_name == Split::Forget.as_str() {
                let gen_steps = segment_cot(&gen.cot);
                let (swr, _) = stepwise_score(
                    &ex.cot_steps,
                    &gen_steps,
                    StepMetric::Rouge,
                    ctx.providers.embedder.as_ref(),
                )?;
                let (swc, _) = stepwise_score(
                    &ex.cot_steps,
                    &gen_steps,
                    StepMetric::Cosine,
                    ctx.providers.embedder.as_ref(),
                )?;
                m.sw_rouge = Some(swr);
                m.sw_cs = Some(swc);
                match ctx
                    .providers
                    .judge
                    .score(&ex.question, &ex.answer, &gen.cot)
                {
                    Ok(v) => m.judge = Some(v),
                    Err(Error::Scoring(msg)) => {
                        log::warn!("example '{}' left unscored by judge: {msg}", ex.id);
                        unscored_judge += 1;
                    }
                    Err(other) => return Err(other),
                }
            }
            per_example.insert(ex.id.clone(), m);
        }
    }

    let mut provenance = ctx.providers.provenance();
    provenance.insert("model_hash".to_string(), model.params_hash());
    provenance.insert(
        "decode_mode".to_string(),
        ctx.settings.mode.kind.as_str().to_string(),
    );
    let mut report = MetricReport {
        per_example,
        per_set: BTreeMap::new(),
        provenance,
        unscored_judge,
        manifest: None,
    };
    report.per_set = report.recompute_per_set();
    Ok(report)
}
