//! The four unlearning objectives (GA, GD, KL, PO) over masked token NLL,
//! and the refusal ("IDK") dataset transformations that PO trains on.
//!
//! Every per-term loss is the flat mean over all masked target positions in
//! the batch. That convention makes the strategy decomposition exact: the
//! cot_and_answer term equals the token-count-weighted mean of the cot_only
//! and answer_only terms, because all three share one numerator/denominator
//! algebra. Gradients flow only through masked positions; rows of
//! d(loss)/d(logits) outside the mask are never written.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ReasoningExample;
use crate::error::{Error, Result};
use crate::llm::{LLMEndpoint, TemplateRegistry, TPL_REASONED_IDK};
use crate::model::{ForwardCache, Model, Params};
use crate::segment::{
    build_mask, render_example, ChatTemplate, MaskStrategy, SegmentMask, SegmentSpans,
};
use crate::tokenizer::PieceTokenizer;

/// The unlearning method in play.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ga,
    Gd,
    Kl,
    Po,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ga => "ga",
            Method::Gd => "gd",
            Method::Kl => "kl",
            Method::Po => "po",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ga" => Ok(Method::Ga),
            "gd" => Ok(Method::Gd),
            "kl" => Ok(Method::Kl),
            "po" => Ok(Method::Po),
            other => Err(Error::validation(format!("unknown method '{other}'"))),
        }
    }

    pub const ALL: [Method; 4] = [Method::Ga, Method::Gd, Method::Kl, Method::Po];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which positions the KL term compares distributions at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlPositions {
    /// Think + answer spans of the retain example (default: prompt
    /// positions are identical inputs to both models and only add noise).
    #[default]
    ResponseSpans,
    /// Every predicted position, the literal reading of the formula.
    AllPositions,
}

/// One example rendered and masked, ready for loss computation.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub id: String,
    pub tokens: Vec<u32>,
    pub spans: SegmentSpans,
    pub mask: SegmentMask,
}

pub fn prepare_example(
    ex: &ReasoningExample,
    template: &ChatTemplate,
    tokenizer: &PieceTokenizer,
    strategy: MaskStrategy,
    max_len: usize,
) -> Result<PreparedExample> {
    let rendered = render_example(ex, template, tokenizer, max_len)?;
    let mask = build_mask(&rendered.spans, strategy, rendered.tokens.len())?;
    Ok(PreparedExample {
        id: ex.id.clone(),
        tokens: rendered.tokens,
        spans: rendered.spans,
        mask,
    })
}

pub fn prepare_examples<'a, I>(
    examples: I,
    template: &ChatTemplate,
    tokenizer: &PieceTokenizer,
    strategy: MaskStrategy,
    max_len: usize,
) -> Result<Vec<PreparedExample>>
where
    I: IntoIterator<Item = &'a ReasoningExample>,
{
    examples
        .into_iter()
        .map(|ex| prepare_example(ex, template, tokenizer, strategy, max_len))
        .collect()
}

/// Per-term values of one objective evaluation. `total` always equals the
/// method's formula applied to the stored terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub forget_term: f64,
    pub retain_term: f64,
    pub kl_term: f64,
    pub total: f64,
    pub forget_tokens: usize,
    pub retain_tokens: usize,
    pub kl_positions: usize,
}

fn log_softmax(row: ArrayView1<'_, f64>) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let logz = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - logz).collect()
}

/// Mean negative log-likelihood over masked target positions.
///
/// `logits` row `i` scores `targets[i]`; `target_mask[i]` says whether that
/// position counts. An all-false mask is an error, never a silent zero.
pub fn masked_nll(logits: &Array2<f64>, targets: &[u32], target_mask: &[bool]) -> Result<f64> {
    if logits.nrows() != targets.len() || targets.len() != target_mask.len() {
        return Err(Error::validation(format!(
            "shape mismatch: {} logit rows, {} targets, {} mask entries",
            logits.nrows(),
            targets.len(),
            target_mask.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (&target, &m)) in targets.iter().zip(target_mask).enumerate() {
        if !m {
            continue;
        }
        let lp = log_softmax(logits.row(i));
        let t = target as usize;
        if t >= lp.len() {
            return Err(Error::validation(format!(
                "target id {target} outside vocabulary of {}",
                lp.len()
            )));
        }
        sum -= lp[t];
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyMask(
            "masked_nll called with an all-false mask".into(),
        ));
    }
    Ok(sum / count as f64)
}

/// Per-sequence NLL pieces: the sum over masked targets, the count, and
/// d(sum)/d(logits) with untouched rows exactly zero.
pub struct SequenceNll {
    pub nll_sum: f64,
    pub masked_tokens: usize,
    pub dlogits: Array2<f64>,
}

/// Forward one sequence and score its masked targets.
pub fn sequence_nll(model: &Model, item: &PreparedExample) -> Result<(SequenceNll, ForwardCache)> {
    let (logits, cache) = model.forward(&item.tokens)?;
    let n = item.tokens.len();
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut sum = 0.0;
    let mut count = 0usize;
    for pos in 1..n {
        if !item.mask.mask[pos] {
            continue;
        }
        let row = pos - 1; // logits row that predicts token `pos`
        let lp = log_softmax(logits.row(row));
        let target = item.tokens[pos] as usize;
        sum -= lp[target];
        count += 1;
        for (v, lpv) in lp.iter().enumerate() {
            let p = lpv.exp();
            dlogits[[row, v]] = p - if v == target { 1.0 } else { 0.0 };
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask(format!(
            "example '{}' has no masked target positions",
            item.id
        )));
    }
    Ok((
        SequenceNll {
            nll_sum: sum,
            masked_tokens: count,
            dlogits,
        },
        cache,
    ))
}

/// Sum and token count of a batch term; when `grads` is given, the
/// gradient of the *sum* is accumulated into it (callers rescale).
fn batch_nll(
    model: &Model,
    batch: &[PreparedExample],
    mut grads: Option<&mut Params>,
) -> Result<(f64, usize)> {
    if batch.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for item in batch {
        let (seq, cache) = sequence_nll(model, item)?;
        sum += seq.nll_sum;
        count += seq.masked_tokens;
        if let Some(g) = grads.as_deref_mut() {
            model.backward(&cache, &seq.dlogits, g);
        }
    }
    Ok((sum, count))
}

/// Per-sequence KL pieces against a frozen target model.
pub struct SequenceKl {
    pub kl_sum: f64,
    pub positions: usize,
    /// d(sum)/d(unlearned logits); rows outside the selected positions are
    /// exactly zero.
    pub dlogits: Array2<f64>,
}

/// KL(M_t ‖ M_u) summed over the selected positions of one sequence.
pub fn sequence_kl(
    model_u: &Model,
    model_t: &Model,
    item: &PreparedExample,
    positions: KlPositions,
) -> Result<(SequenceKl, ForwardCache)> {
    let (logits_u, cache) = model_u.forward(&item.tokens)?;
    let (logits_t, _) = model_t.forward(&item.tokens)?;
    let n = item.tokens.len();
    let selected: Vec<usize> = (1..n)
        .filter(|&pos| match positions {
            KlPositions::AllPositions => true,
            KlPositions::ResponseSpans => {
                item.spans.think.contains(pos) || item.spans.answer.contains(pos)
            }
        })
        .collect();
    if selected.is_empty() {
        return Err(Error::EmptyMask(format!(
            "example '{}' selects no KL positions",
            item.id
        )));
    }
    let mut dlogits = Array2::zeros(logits_u.raw_dim());
    let mut sum = 0.0;
    for &pos in &selected {
        let row = pos - 1;
        let lp_u = log_softmax(logits_u.row(row));
        let lp_t = log_softmax(logits_t.row(row));
        for v in 0..lp_u.len() {
            let p_t = lp_t[v].exp();
            sum += p_t * (lp_t[v] - lp_u[v]);
            dlogits[[row, v]] = lp_u[v].exp() - p_t;
        }
    }
    Ok((
        SequenceKl {
            kl_sum: sum,
            positions: selected.len(),
            dlogits,
        },
        cache,
    ))
}

/// KL term over a retain batch: mean over sequences of the per-sequence
/// positional mean.
fn batch_kl(
    model_u: &Model,
    model_t: &Model,
    batch: &[PreparedExample],
    positions: KlPositions,
    mut grads: Option<&mut Params>,
) -> Result<(f64, usize)> {
    if batch.is_empty() {
        return Err(Error::validation("empty retain batch"));
    }
    if model_u.config.vocab_size != model_t.config.vocab_size {
        return Err(Error::validation(format!(
            "vocabulary mismatch: unlearned model has {}, frozen target has {}",
            model_u.config.vocab_size, model_t.config.vocab_size
        )));
    }
    let n_seqs = batch.len() as f64;
    let mut term = 0.0;
    let mut total_positions = 0usize;
    for item in batch {
        let (seq, cache) = sequence_kl(model_u, model_t, item, positions)?;
        term += seq.kl_sum / seq.positions as f64 / n_seqs;
        total_positions += seq.positions;
        if let Some(g) = grads.as_deref_mut() {
            let scale = 1.0 / (seq.positions as f64 * n_seqs);
            let scaled = seq.dlogits.mapv(|x| x * scale);
            model_u.backward(&cache, &scaled, g);
        }
    }
    Ok((term, total_positions))
}

/// KL divergence Σ p·ln(p/q) between two probability vectors.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::validation("distributions differ in length"));
    }
    let mut sum = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(Error::validation(
                "KL undefined: q assigns zero mass where p does not",
            ));
        }
        sum += pi * (pi / qi).ln();
    }
    Ok(sum)
}

/// Gradient Ascent: total = −forget NLL.
/// Plain language-model descent: mean masked NLL over the batch and the
/// gradient that minimizes it. This is the fine-tuning objective; the
/// unlearning methods below build their terms from the same accumulator.
pub fn nll_grads(model: &Model, batch: &[PreparedExample]) -> Result<(f64, usize, Params)> {
    let mut grads = model.params.zeros_like();
    let (sum, count) = batch_nll(model, batch, Some(&mut grads))?;
    grads.scale(1.0 / count as f64);
    Ok((sum / count as f64, count, grads))
}

pub fn ga_loss(model: &Model, forget: &[PreparedExample]) -> Result<LossBreakdown> {
    let (sum, count) = batch_nll(model, forget, None)?;
    let forget_term = sum / count as f64;
    Ok(LossBreakdown {
        forget_term,
        total: -forget_term,
        forget_tokens: count,
        ..Default::default()
    })
}

pub fn ga_grads(model: &Model, forget: &[PreparedExample]) -> Result<(LossBreakdown, Params)> {
    let mut g_sum = model.params.zeros_like();
    let (sum, count) = batch_nll(model, forget, Some(&mut g_sum))?;
    let forget_term = sum / count as f64;
    g_sum.scale(-1.0 / count as f64);
    Ok((
        LossBreakdown {
            forget_term,
            total: -forget_term,
            forget_tokens: count,
            ..Default::default()
        },
        g_sum,
    ))
}

/// Gradient Difference: total = −forget NLL + retain NLL.
pub fn gd_loss(
    model: &Model,
    forget: &[PreparedExample],
    retain: &[PreparedExample],
) -> Result<LossBreakdown> {
    let (f_sum, f_count) = batch_nll(model, forget, None)?;
    let (r_sum, r_count) = batch_nll(model, retain, None)?;
    let forget_term = f_sum / f_count as f64;
    let retain_term = r_sum / r_count as f64;
    Ok(LossBreakdown {
        forget_term,
        retain_term,
        total: -forget_term + retain_term,
        forget_tokens: f_count,
        retain_tokens: r_count,
        ..Default::default()
    })
}

pub fn gd_grads(
    model: &Model,
    forget: &[PreparedExample],
    retain: &[PreparedExample],
) -> Result<(LossBreakdown, Params)> {
    let mut g_forget = model.params.zeros_like();
    let (f_sum, f_count) = batch_nll(model, forget, Some(&mut g_forget))?;
    let mut grads = model.params.zeros_like();
    let (r_sum, r_count) = batch_nll(model, retain, Some(&mut grads))?;
    let forget_term = f_sum / f_count as f64;
    let retain_term = r_sum / r_count as f64;
    grads.scale(1.0 / r_count as f64);
    grads.add_assign(&g_forget, -1.0 / f_count as f64);
    Ok((
        LossBreakdown {
            forget_term,
            retain_term,
            total: -forget_term + retain_term,
            forget_tokens: f_count,
            retain_tokens: r_count,
            ..Default::default()
        },
        grads,
    ))
}

/// KL alignment: total = −forget NLL + KL(frozen ‖ unlearned) on retain.
pub fn kl_loss(
    model_u: &Model,
    model_t: &Model,
    forget: &[PreparedExample],
    retain: &[PreparedExample],
    positions: KlPositions,
) -> Result<LossBreakdown> {
    let (f_sum, f_count) = batch_nll(model_u, forget, None)?;
    let (kl_term, kl_count) = batch_kl(model_u, model_t, retain, positions, None)?;
    let forget_term = f_sum / f_count as f64;
    Ok(LossBreakdown {
        forget_term,
        kl_term,
        total: -forget_term + kl_term,
        forget_tokens: f_count,
        kl_positions: kl_count,
        ..Default::default()
    })
}

pub fn kl_grads(
    model_u: &Model,
    model_t: &Model,
    forget: &[PreparedExample],
    retain: &[PreparedExample],
    positions: KlPositions,
) -> Result<(LossBreakdown, Params)> {
    let mut g_forget = model_u.params.zeros_like();
    let (f_sum, f_count) = batch_nll(model_u, forget, Some(&mut g_forget))?;
    let mut grads = model_u.params.zeros_like();
    let (kl_term, kl_count) = batch_kl(model_u, model_t, retain, positions, Some(&mut grads))?;
    let forget_term = f_sum / f_count as f64;
    grads.add_assign(&g_forget, -1.0 / f_count as f64);
    Ok((
        LossBreakdown {
            forget_term,
            kl_term,
            total: -forget_term + kl_term,
            forget_tokens: f_count,
            kl_positions: kl_count,
            ..Default::default()
        },
        grads,
    ))
}

/// Preference Optimization: total = retain NLL + refusal-batch NLL, no
/// negation anywhere.
pub fn po_loss(
    model: &Model,
    retain: &[PreparedExample],
    forget_idk: &[PreparedExample],
) -> Result<LossBreakdown> {
    let (r_sum, r_count) = batch_nll(model, retain, None)?;
    let (i_sum, i_count) = batch_nll(model, forget_idk, None)?;
    let retain_term = r_sum / r_count as f64;
    let forget_term = i_sum / i_count as f64;
    Ok(LossBreakdown {
        forget_term,
        retain_term,
        total: retain_term + forget_term,
        forget_tokens: i_count,
        retain_tokens: r_count,
        ..Default::default()
    })
}

pub fn po_grads(
    model: &Model,
    retain: &[PreparedExample],
    forget_idk: &[PreparedExample],
) -> Result<(LossBreakdown, Params)> {
    let mut grads = model.params.zeros_like();
    let (r_sum, r_count) = batch_nll(model, retain, Some(&mut grads))?;
    grads.scale(1.0 / r_count as f64);
    let mut g_idk = model.params.zeros_like();
    let (i_sum, i_count) = batch_nll(model, forget_idk, Some(&mut g_idk))?;
    grads.add_assign(&g_idk, 1.0 / i_count as f64);
    let retain_term = r_sum / r_count as f64;
    let forget_term = i_sum / i_count as f64;
    Ok((
        LossBreakdown {
            forget_term,
            retain_term,
            total: retain_term + forget_term,
            forget_tokens: i_count,
            retain_tokens: r_count,
            ..Default::default()
        },
        grads,
    ))
}

/// The refusal-substitution variants PO can train toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdkVariant {
    AnswerIdk,
    DirectIdk,
    ReasonedIdk,
}

impl IdkVariant {
    /// The masking rule each variant trains under: answer_idk keeps the
    /// original cot but masks it out of the loss; the other two supervise
    /// both segments.
    pub fn mask_strategy(self) -> MaskStrategy {
        match self {
            IdkVariant::AnswerIdk => MaskStrategy::AnswerOnly,
            IdkVariant::DirectIdk | IdkVariant::ReasonedIdk => MaskStrategy::CotAndAnswer,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IdkVariant::AnswerIdk => "answer_idk",
            IdkVariant::DirectIdk => "direct_idk",
            IdkVariant::ReasonedIdk => "reasoned_idk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "answer_idk" => Ok(IdkVariant::AnswerIdk),
            "direct_idk" => Ok(IdkVariant::DirectIdk),
            "reasoned_idk" => Ok(IdkVariant::ReasonedIdk),
            other => Err(Error::validation(format!("unknown IDK variant '{other}'"))),
        }
    }
}

impl fmt::Display for IdkVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Refusal pool and (for reasoned_idk) the pre-generated hesitant traces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdkVariantSpec {
    pub variant: IdkVariant,
    pub idk_pool: Vec<String>,
    #[serde(default)]
    pub reasoned_traces: BTreeMap<String, String>,
}

impl IdkVariantSpec {
    pub fn validate(&self) -> Result<()> {
        if self.idk_pool.is_empty() {
            return Err(Error::validation("idk_pool must not be empty"));
        }
        Ok(())
    }
}

/// Transform a forget set into its refusal counterpart. Deterministic for
/// a given seed; examples are processed in the given order.
pub fn build_idk_dataset(
    forget: &[&ReasoningExample],
    spec: &IdkVariantSpec,
    seed: u64,
) -> Result<(Vec<ReasoningExample>, MaskStrategy)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = |rng: &mut ChaCha8Rng| -> String {
        spec.idk_pool[rng.random_range(0..spec.idk_pool.len())].clone()
    };
    let mut out = Vec::with_capacity(forget.len());
    for ex in forget {
        let mut new = (*ex).clone();
        match spec.variant {
            IdkVariant::AnswerIdk => {
                new.answer = sample(&mut rng);
            }
            IdkVariant::DirectIdk => {
                new.cot = sample(&mut rng);
                new.answer = sample(&mut rng);
            }
            IdkVariant::ReasonedIdk => {
                let trace = spec.reasoned_traces.get(&ex.id).ok_or_else(|| {
                    Error::validation(format!(
                        "reasoned_idk requires a generated trace for forget id '{}'",
                        ex.id
                    ))
                })?;
                new.cot = trace.clone();
                new.answer = sample(&mut rng);
            }
        }
        new.cot_steps = crate::corpus::segment_cot(&new.cot);
        out.push(new);
    }
    Ok((out, spec.variant.mask_strategy()))
}

/// Ask an endpoint for a hesitant, answer-free reasoning trace for a
/// question whose answer is being unlearned. A trace that repeats the
/// forgotten answer verbatim is rejected and regenerated once (with a
/// reminder appended so the retry gets a fresh cache key), then fails.
pub fn generate_reasoned_idk(
    question: &str,
    forbidden_answer: &str,
    endpoint: &LLMEndpoint,
    registry: &TemplateRegistry,
) -> Result<String> {
    let template = registry.get(TPL_REASONED_IDK)?;
    let prompt = template.fill(&[("question", question)])?;
    let check = |reply: &str| -> std::result::Result<String, String> {
        let trimmed = reply.trim();
        if trimmed.is_empty() {
            return Err("empty reply".into());
        }
        if !forbidden_answer.trim().is_empty() && trimmed.contains(forbidden_answer.trim()) {
            return Err("trace contains the forgotten answer verbatim".into());
        }
        Ok(trimmed.to_string())
    };
    let first = endpoint.call_cached_raw(&template.version, &prompt)?;
    let first_problem = match check(&first) {
        Ok(trace) => return Ok(trace),
        Err(problem) => problem,
    };
    let retry_prompt = format!(
        "{prompt}\n\nReminder: do not state or imply the final answer; output only the hesitant reasoning trace."
    );
    let second = endpoint.call_cached_raw(&template.version, &retry_prompt)?;
    check(&second).map_err(|problem| {
        Error::format(format!(
            "reasoned trace rejected twice (first: {first_problem}; retry: {problem})"
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use crate::llm::{EndpointConfig, ScriptedTransport};
    use crate::model::{AdamW, ModelConfig};
    use approx::assert_abs_diff_eq;

    fn fixture_examples() -> Vec<ReasoningExample> {
        vec![
            ReasoningExample::new(
                "f1",
                "Author A",
                "What award did the author win?",
                "Let me think. The award was named early. Wait, maybe later.",
                "The Northern Award.",
                Split::Forget,
            ),
            ReasoningExample::new(
                "r1",
                "Author B",
                "What city did the author describe?",
                "Let me think. The city appears in the debut.",
                "The city of Harbors.",
                Split::Retain,
            ),
        ]
    }

    fn fixture() -> (Vec<ReasoningExample>, ChatTemplate, PieceTokenizer, Model) {
        let examples = fixture_examples();
        let template = ChatTemplate::default();
        let mut sources: Vec<String> = template.strings().iter().map(|s| s.to_string()).collect();
        for ex in &examples {
            sources.extend([ex.question.clone(), ex.cot.clone(), ex.answer.clone()]);
        }
        sources.push("I cannot help with that.".into());
        let tokenizer = PieceTokenizer::build(&sources);
        let model = Model::new(ModelConfig {
            vocab_size: tokenizer.vocab_size(),
            max_seq_len: 96,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            seed: 5,
        })
        .unwrap();
        (examples, template, tokenizer, model)
    }

    fn prep(
        examples: &[ReasoningExample],
        template: &ChatTemplate,
        tok: &PieceTokenizer,
        strategy: MaskStrategy,
    ) -> Vec<PreparedExample> {
        prepare_examples(examples.iter(), template, tok, strategy, 96).unwrap()
    }

    #[test]
    // the hand-computed literal is the point of the second assertion
    #[allow(clippy::approx_constant)]
    fn masked_nll_uniform_distribution_gives_ln_v() {
        let v = 10;
        let logits = Array2::zeros((4, v));
        let targets = [0u32, 3, 7, 9];
        let mask = [true, true, false, true];
        let nll = masked_nll(&logits, &targets, &mask).unwrap();
        assert_abs_diff_eq!(nll, (v as f64).ln(), epsilon = 1e-6);
        assert_abs_diff_eq!(nll, 2.302585, epsilon = 1e-6);
    }

    #[test]
    fn masked_nll_perfect_prediction_is_zero() {
        let mut logits = Array2::zeros((2, 5));
        // huge margin → probability ≈ 1 on the target
        logits[[0, 2]] = 1e3;
        logits[[1, 4]] = 1e3;
        let nll = masked_nll(&logits, &[2, 4], &[true, true]).unwrap();
        assert_abs_diff_eq!(nll, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn masked_nll_rejects_empty_mask() {
        let logits = Array2::zeros((2, 3));
        let err = masked_nll(&logits, &[0, 1], &[false, false]).unwrap_err();
        assert!(matches!(err, Error::EmptyMask(_)));
    }

    #[test]
    fn sequence_nll_matches_masked_nll() {
        let (examples, template, tok, model) = fixture();
        let batch = prep(&examples, &template, &tok, MaskStrategy::CotAndAnswer);
        for item in &batch {
            let (seq, _) = sequence_nll(&model, item).unwrap();
            let (logits, _) = model.forward(&item.tokens).unwrap();
            let n = item.tokens.len();
            let shifted = logits.slice(ndarray::s![..n - 1, ..]).to_owned();
            let value = masked_nll(&shifted, &item.tokens[1..], item.mask.targets()).unwrap();
            assert_abs_diff_eq!(
                seq.nll_sum / seq.masked_tokens as f64,
                value,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn dlogits_rows_outside_mask_are_exactly_zero() {
        let (examples, template, tok, model) = fixture();
        for strategy in MaskStrategy::ALL {
            let batch = prep(&examples, &template, &tok, strategy);
            for item in &batch {
                let (seq, _) = sequence_nll(&model, item).unwrap();
                for row in 0..seq.dlogits.nrows() {
                    let target_pos = row + 1;
                    let in_mask = target_pos < item.mask.mask.len() && item.mask.mask[target_pos];
                    if !in_mask {
                        assert!(
                            seq.dlogits.row(row).iter().all(|&x| x == 0.0),
                            "strategy {strategy}: row {row} leaked gradient"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn ga_total_is_negated_nll() {
        let (examples, template, tok, model) = fixture();
        let batch = prep(&examples[..1], &template, &tok, MaskStrategy::CotAndAnswer);
        let breakdown = ga_loss(&model, &batch).unwrap();
        assert_abs_diff_eq!(breakdown.total, -breakdown.forget_term, epsilon = 1e-12);
        assert!(breakdown.forget_term > 0.0);
        assert!(breakdown.forget_tokens > 0);
    }

    #[test]
    fn one_ga_step_increases_forget_nll() {
        let (examples, template, tok, mut model) = fixture();
        let batch = prep(&examples[..1], &template, &tok, MaskStrategy::CotAndAnswer);
        let before = ga_loss(&model, &batch).unwrap().forget_term;
        let (_, grads) = ga_grads(&model, &batch).unwrap();
        let mut opt = AdamW::new(&model.params, 0.0);
        opt.step(&mut model.params, &grads, 1e-3);
        let after = ga_loss(&model, &batch).unwrap().forget_term;
        assert!(after > before, "ascent failed: {before} -> {after}");
    }

    #[test]
    fn gd_total_combines_terms_and_cancels_on_identical_batches() {
        let (examples, template, tok, model) = fixture();
        let forget = prep(&examples[..1], &template, &tok, MaskStrategy::CotAndAnswer);
        let retain = prep(&examples[1..], &template, &tok, MaskStrategy::CotAndAnswer);
        let b = gd_loss(&model, &forget, &retain).unwrap();
        assert_abs_diff_eq!(b.total, -b.forget_term + b.retain_term, epsilon = 1e-12);
        let same = gd_loss(&model, &forget, &forget).unwrap();
        assert_abs_diff_eq!(same.total, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn kl_term_zero_at_model_identity() {
        let (examples, template, tok, model) = fixture();
        let forget = prep(&examples[..1], &template, &tok, MaskStrategy::CotAndAnswer);
        let retain = prep(&examples[1..], &template, &tok, MaskStrategy::CotAndAnswer);
        let b = kl_loss(&model, &model, &forget, &retain, KlPositions::ResponseSpans).unwrap();
        assert_abs_diff_eq!(b.kl_term, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.total, -b.forget_term, epsilon = 1e-12);
        assert!(b.kl_positions > 0);
    }

    #[test]
    fn kl_hand_case_and_asymmetry() {
        // target (0.5, 0.5), unlearned (0.25, 0.75)
        let forward = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert_abs_diff_eq!(forward, 0.143841, epsilon = 1e-6);
        let reverse = kl_divergence(&[0.25, 0.75], &[0.5, 0.5]).unwrap();
        assert!((forward - reverse).abs() > 1e-3, "KL should be asymmetric");
    }

    #[test]
    fn kl_nonnegative_on_random_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let draw = |rng: &mut ChaCha8Rng| {
                let raw: Vec<f64> = (0..6).map(|_| rng.random_range(0.01..1.0)).collect();
                let z: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / z).collect::<Vec<_>>()
            };
            let p = draw(&mut rng);
            let q = draw(&mut rng);
            assert!(kl_divergence(&p, &q).unwrap() >= -1e-15);
        }
    }

    #[test]
    fn kl_rejects_vocabulary_mismatch() {
        let (examples, template, tok, model) = fixture();
        let other = Model::new(ModelConfig {
            vocab_size: tok.vocab_size() + 1,
            max_seq_len: 96,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            seed: 6,
        })
        .unwrap();
        let forget = prep(&examples[..1], &template, &tok, MaskStrategy::CotAndAnswer);
        let retain = prep(&examples[1..], &template, &tok, MaskStrategy::CotAndAnswer);
        assert!(kl_loss(&model, &other, &forget, &retain, KlPositions::ResponseSpans).is_err());
    }

    #[test]
    fn po_total_adds_terms_without_negation() {
        let (examples, template, tok, model) = fixture();
        let retain = prep(&examples[1..], &template, &tok, MaskStrategy::CotAndAnswer);
        let idk = prep(&examples[..1], &template, &tok, MaskStrategy::AnswerOnly);
        let b = po_loss(&model, &retain, &idk).unwrap();
        assert_abs_diff_eq!(b.total, b.retain_term + b.forget_term, epsilon = 1e-12);
        assert!(b.total > 0.0);
    }

    #[test]
    fn strategy_decomposition_is_token_weighted_mean() {
        let (examples, template, tok, model) = fixture();
        let both = prep(&examples, &template, &tok, MaskStrategy::CotAndAnswer);
        let cot = prep(&examples, &template, &tok, MaskStrategy::CotOnly);
        let ans = prep(&examples, &template, &tok, MaskStrategy::AnswerOnly);
        let b_both = ga_loss(&model, &both).unwrap();
        let b_cot = ga_loss(&model, &cot).unwrap();
        let b_ans = ga_loss(&model, &ans).unwrap();
        let weighted = (b_cot.forget_term * b_cot.forget_tokens as f64
            + b_ans.forget_term * b_ans.forget_tokens as f64)
            / (b_cot.forget_tokens + b_ans.forget_tokens) as f64;
        assert_abs_diff_eq!(b_both.forget_term, weighted, epsilon = 1e-9);
        assert_eq!(
            b_both.forget_tokens,
            b_cot.forget_tokens + b_ans.forget_tokens
        );
    }

    #[test]
    fn build_idk_dataset_follows_variant_rules() {
        let examples = fixture_examples();
        let refs: Vec<&ReasoningExample> = examples.iter().collect();
        let pool: Vec<String> = vec![
            "I cannot help with that.".into(),
            "That has not been part of my training.".into(),
        ];

        let (answered, strat) = build_idk_dataset(
            &refs,
            &IdkVariantSpec {
                variant: IdkVariant::AnswerIdk,
                idk_pool: pool.clone(),
                reasoned_traces: BTreeMap::new(),
            },
            7,
        )
        .unwrap();
        assert_eq!(strat, MaskStrategy::AnswerOnly);
        for (orig, new) in examples.iter().zip(&answered) {
            assert_eq!(orig.cot, new.cot, "answer_idk must not touch the cot");
            assert!(pool.contains(&new.answer));
        }

        let (direct, strat) = build_idk_dataset(
            &refs,
            &IdkVariantSpec {
                variant: IdkVariant::DirectIdk,
                idk_pool: pool.clone(),
                reasoned_traces: BTreeMap::new(),
            },
            7,
        )
        .unwrap();
        assert_eq!(strat, MaskStrategy::CotAndAnswer);
        for new in &direct {
            assert!(pool.contains(&new.cot));
            assert!(pool.contains(&new.answer));
        }

        let mut traces = BTreeMap::new();
        traces.insert(
            "f1".to_string(),
            "Hmm, I am not sure where to begin.".to_string(),
        );
        traces.insert(
            "r1".to_string(),
            "Wait, I do not recall this at all.".to_string(),
        );
        let (reasoned, strat) = build_idk_dataset(
            &refs,
            &IdkVariantSpec {
                variant: IdkVariant::ReasonedIdk,
                idk_pool: pool.clone(),
                reasoned_traces: traces,
            },
            7,
        )
        .unwrap();
        assert_eq!(strat, MaskStrategy::CotAndAnswer);
        assert_eq!(reasoned[0].cot, "Hmm, I am not sure where to begin.");

        let missing = build_idk_dataset(
            &refs,
            &IdkVariantSpec {
                variant: IdkVariant::ReasonedIdk,
                idk_pool: pool,
                reasoned_traces: BTreeMap::new(),
            },
            7,
        );
        assert!(missing.is_err());
    }

    #[test]
    fn build_idk_dataset_is_deterministic() {
        let examples = fixture_examples();
        let refs: Vec<&ReasoningExample> = examples.iter().collect();
        let spec = IdkVariantSpec {
            variant: IdkVariant::DirectIdk,
            idk_pool: (0..10).map(|i| format!("Refusal {i}.")).collect(),
            reasoned_traces: BTreeMap::new(),
        };
        let (a, _) = build_idk_dataset(&refs, &spec, 42).unwrap();
        let (b, _) = build_idk_dataset(&refs, &spec, 42).unwrap();
        let (c, _) = build_idk_dataset(&refs, &spec, 43).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.answer, y.answer);
            assert_eq!(x.cot, y.cot);
        }
        assert!(a
            .iter()
            .zip(&c)
            .any(|(x, y)| x.answer != y.answer || x.cot != y.cot));
    }

    fn idk_endpoint(replies: Vec<std::result::Result<String, String>>) -> LLMEndpoint {
        let mut cfg = EndpointConfig::offline_stub("test", "scripted");
        cfg.backoff_ms = 0;
        cfg.retry_budget = 0;
        LLMEndpoint::new(cfg, Box::new(ScriptedTransport::new(replies)))
    }

    #[test]
    fn reasoned_idk_accepts_hesitant_trace() {
        let endpoint = idk_endpoint(vec![Ok(
            "Hmm, let me think. I really cannot pin this down; I seem to be missing crucial context to even start.".into(),
        )]);
        let registry = TemplateRegistry::builtin();
        let trace =
            generate_reasoned_idk("Which award?", "The Northern Award", &endpoint, &registry)
                .unwrap();
        assert!(trace.contains("missing crucial context"));
    }

    #[test]
    fn reasoned_idk_rejects_answer_leak_then_recovers_or_fails() {
        let registry = TemplateRegistry::builtin();
        // leak on first, clean on retry → retry reply wins
        let endpoint = idk_endpoint(vec![
            Ok("The answer is The Northern Award.".into()),
            Ok("I keep circling but cannot recall.".into()),
        ]);
        let trace =
            generate_reasoned_idk("Which award?", "The Northern Award", &endpoint, &registry)
                .unwrap();
        assert_eq!(trace, "I keep circling but cannot recall.");

        // leak twice → format error
        let endpoint = idk_endpoint(vec![
            Ok("The answer is The Northern Award.".into()),
            Ok("Clearly The Northern Award again.".into()),
        ]);
        let err = generate_reasoned_idk("Which award?", "The Northern Award", &endpoint, &registry)
            .unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");

        // empty reply twice → format error
        let endpoint = idk_endpoint(vec![Ok("".into()), Ok("  ".into())]);
        assert!(generate_reasoned_idk("Which award?", "X", &endpoint, &registry).is_err());
    }
}
