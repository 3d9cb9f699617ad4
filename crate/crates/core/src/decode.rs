//! Generation harness with think-control modes and the residual-leakage
//! probe.
//!
//! Three decoding modes manipulate the reasoning segment: default leaves
//! the model free, zero-think prefills an empty think segment so no
//! reasoning tokens can be emitted, and less-think prefills a short
//! "no need to think" phrase. The probe decodes the forget set under each
//! mode at every saved epoch and plots answer-leakage curves; a model that
//! looks unlearned under default decoding can still leak through the
//! suppressed-reasoning modes.

use std::path::Path;

use plotters::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ReasoningExample;
use crate::error::{Error, Result};
use crate::metrics::{cosine_similarity, rouge_l_recall};
use crate::model::Model;
use crate::providers::EmbeddingProvider;
use crate::segment::ChatTemplate;
use crate::tokenizer::PieceTokenizer;

/// Default phrase for the less-think prefill; configurable because the
/// exact wording matters for byte-level prefill fidelity.
pub const LESS_THINK_PHRASE: &str =
    "Okay, the user asked this question, and I can answer it without thinking much.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThinkKind {
    DefaultThink,
    ZeroThink,
    LessThink,
}

impl ThinkKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ThinkKind::DefaultThink => "default",
            ThinkKind::ZeroThink => "zero",
            ThinkKind::LessThink => "less",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "default" | "default_think" => Ok(ThinkKind::DefaultThink),
            "zero" | "zero_think" => Ok(ThinkKind::ZeroThink),
            "less" | "less_think" => Ok(ThinkKind::LessThink),
            other => Err(Error::validation(format!("unknown think mode '{other}'"))),
        }
    }

    pub const ALL: [ThinkKind; 3] = [
        ThinkKind::DefaultThink,
        ThinkKind::ZeroThink,
        ThinkKind::LessThink,
    ];
}

impl std::fmt::Display for ThinkKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A decoding mode plus the assistant-turn prefill it forces. The prefill
/// is kept both as one string (for byte-level fidelity checks) and as its
/// template constituents (delimiters and phrase tokenize separately, the
/// same way training rendering tokenizes them).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThinkMode {
    pub kind: ThinkKind,
    pub prefill: String,
    pub parts: Vec<String>,
}

impl ThinkMode {
    /// Build a mode against a template. Zero/less think force delimiter
    /// tokens, so the template must define them.
    pub fn new(kind: ThinkKind, template: &ChatTemplate, less_phrase: &str) -> Result<Self> {
        if kind != ThinkKind::DefaultThink
            && (template.think_open.is_empty() || template.think_close.is_empty())
        {
            return Err(Error::validation(format!(
                "think mode '{kind}' needs think delimiters but the template defines none"
            )));
        }
        let parts: Vec<String> = match kind {
            ThinkKind::DefaultThink => Vec::new(),
            ThinkKind::ZeroThink => {
                vec![template.think_open.clone(), template.think_close.clone()]
            }
            ThinkKind::LessThink => vec![
                template.think_open.clone(),
                less_phrase.to_string(),
                template.think_close.clone(),
            ],
        };
        Ok(Self {
            kind,
            prefill: parts.concat(),
            parts,
        })
    }

    pub fn default_think() -> Self {
        Self {
            kind: ThinkKind::DefaultThink,
            prefill: String::new(),
            parts: Vec::new(),
        }
    }
}

/// Decoding knobs. Temperature 0 means greedy (the default: leakage
/// curves must be reproducible).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            max_new_tokens: 64,
            temperature: 0.0,
            seed: 0,
        }
    }
}

/// One decoded example, parsed into reasoning and answer segments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationResult {
    pub cot: String,
    pub answer: String,
    pub mode: ThinkKind,
    /// Prefill + continuation, exactly as decoded.
    pub raw: String,
    /// Set when generation ended before a close delimiter appeared.
    pub truncated: bool,
}

/// Prompt-section tokens for a question: BOS plus each template
/// constituent tokenized separately, matching the training-time rendering
/// byte for byte.
pub fn prompt_tokens(
    question: &str,
    template: &ChatTemplate,
    tokenizer: &PieceTokenizer,
) -> Result<Vec<u32>> {
    let mut tokens = vec![tokenizer.bos_id()];
    for part in [
        template.user_prefix.as_str(),
        question,
        template.user_suffix.as_str(),
        template.assistant_prefix.as_str(),
    ] {
        tokens.extend(tokenizer.encode(part)?);
    }
    Ok(tokens)
}

/// Append the mode's prefill tokens to a prompt, one constituent at a
/// time so delimiters never merge with the phrase between them.
pub fn apply_think_mode(
    prompt: &[u32],
    mode: &ThinkMode,
    tokenizer: &PieceTokenizer,
) -> Result<Vec<u32>> {
    let mut out = prompt.to_vec();
    for part in &mode.parts {
        out.extend(tokenizer.encode(part)?);
    }
    Ok(out)
}

/// Split raw decoded text into (cot, answer, truncated) at the first close
/// delimiter. Without a close delimiter the whole post-open text is
/// reasoning and the answer is empty.
fn parse_generation(raw: &str, template: &ChatTemplate) -> (String, String, bool) {
    let after_open = match raw.find(&template.think_open) {
        Some(pos) if !template.think_open.is_empty() => &raw[pos + template.think_open.len()..],
        _ => raw,
    };
    match (
        template.think_close.is_empty(),
        after_open.find(&template.think_close),
    ) {
        (false, Some(rel)) => {
            let cot = after_open[..rel].trim().to_string();
            let answer = after_open[rel + template.think_close.len()..]
                .trim()
                .to_string();
            (cot, answer, false)
        }
        _ => (after_open.trim().to_string(), String::new(), true),
    }
}

/// Decode one example under a think mode. Greedy at temperature 0,
/// seeded softmax sampling otherwise; stops at EOS, the token budget, or
/// the model's context limit, whichever comes first.
pub fn generate(
    model: &Model,
    tokenizer: &PieceTokenizer,
    template: &ChatTemplate,
    question: &str,
    mode: &ThinkMode,
    params: &DecodeParams,
) -> Result<GenerationResult> {
    if params.max_new_tokens == 0 {
        return Err(Error::validation("generation-length limit must be > 0"));
    }
    let prompt = prompt_tokens(question, template, tokenizer)?;
    let prefilled = apply_think_mode(&prompt, mode, tokenizer)?;

    let mut state = model.new_gen_state();
    let mut logits = None;
    for &id in &prefilled {
        logits = Some(model.step(&mut state, id)?);
    }
    let mut logits = logits.expect("prompt always contains BOS");

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut generated: Vec<u32> = Vec::new();
    while generated.len() < params.max_new_tokens && state.len() < model.config.max_seq_len {
        let next = if params.temperature <= 0.0 {
            argmax(logits.as_slice().unwrap())
        } else {
            sample(logits.as_slice().unwrap(), params.temperature, &mut rng)
        };
        if next == tokenizer.eos_id() {
            break;
        }
        generated.push(next);
        if generated.len() == params.max_new_tokens || state.len() == model.config.max_seq_len {
            break;
        }
        logits = model.step(&mut state, next)?;
    }

    let mut output_ids = prefilled[prompt.len()..].to_vec();
    output_ids.extend(&generated);
    let raw = tokenizer.decode(&output_ids);
    debug_assert!(raw.starts_with(&mode.prefill));
    let (cot, answer, truncated) = parse_generation(&raw, template);
    Ok(GenerationResult {
        cot,
        answer,
        mode: mode.kind,
        raw,
        truncated,
    })
}

fn argmax(row: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best as u32
}

fn sample(row: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> u32 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = row
        .iter()
        .map(|x| ((x - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if draw < *w {
            return i as u32;
        }
        draw -= w;
    }
    (row.len() - 1) as u32
}

/// One point of a leakage curve: set-mean answer ROUGE and answer cosine
/// similarity for a mode at an epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub mode: String,
    pub epoch: usize,
    pub rouge: f64,
    pub cs: f64,
}

/// Decode the forget set under every mode at every available checkpoint.
/// A missing checkpoint leaves a gap: the epoch is skipped with a warning
/// and the curve continues.
pub fn probe_decoding(
    checkpoints: &[(usize, Option<Model>)],
    forget: &[&ReasoningExample],
    modes: &[ThinkMode],
    tokenizer: &PieceTokenizer,
    template: &ChatTemplate,
    embedder: &dyn EmbeddingProvider,
    params: &DecodeParams,
) -> Result<Vec<CurvePoint>> {
    if modes.is_empty() {
        return Err(Error::validation("probe needs at least one think mode"));
    }
    if forget.is_empty() {
        return Err(Error::validation("probe needs a nonempty forget set"));
    }
    let mut points = Vec::new();
    for (epoch, maybe_model) in checkpoints {
        let Some(model) = maybe_model else {
            log::warn!("epoch {epoch}: checkpoint missing, gap recorded");
            continue;
        };
        for mode in modes {
            let mut rouge_sum = 0.0;
            let mut cs_sum = 0.0;
            for ex in forget {
                let gen = generate(model, tokenizer, template, &ex.question, mode, params)?;
                rouge_sum += rouge_l_recall(&ex.answer, &gen.answer);
                cs_sum += cosine_similarity(&ex.answer, &gen.answer, embedder)?;
            }
            let n = forget.len() as f64;
            points.push(CurvePoint {
                mode: mode.kind.as_str().to_string(),
                epoch: *epoch,
                rouge: rouge_sum / n,
                cs: cs_sum / n,
            });
        }
    }
    Ok(points)
}

/// Write curve points as CSV with columns mode, epoch, rouge, cs.
pub fn write_curves_csv(points: &[CurvePoint], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["mode", "epoch", "rouge", "cs"])?;
    for p in points {
        writer.write_record([
            p.mode.clone(),
            p.epoch.to_string(),
            format!("{:.6}", p.rouge),
            format!("{:.6}", p.cs),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Render one SVG line plot (epoch on x, metric on y, one line per mode).
pub fn plot_curves(points: &[CurvePoint], metric: &str, title: &str, path: &Path) -> Result<()> {
    let value = |p: &CurvePoint| -> f64 {
        match metric {
            "rouge" => p.rouge,
            _ => p.cs,
        }
    };
    let max_epoch = points.iter().map(|p| p.epoch).max().unwrap_or(0);
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE)
        .map_err(|e| Error::format(format!("plot backend: {e}")))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 24))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0f64..(max_epoch as f64).max(1.0), 0f64..1f64)
        .map_err(|e| Error::format(format!("plot layout: {e}")))?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc(metric)
        .draw()
        .map_err(|e| Error::format(format!("plot mesh: {e}")))?;

    let mut modes: Vec<String> = points.iter().map(|p| p.mode.clone()).collect();
    modes.sort();
    modes.dedup();
    for (i, mode) in modes.iter().enumerate() {
        let series: Vec<(f64, f64)> = points
            .iter()
            .filter(|p| &p.mode == mode)
            .map(|p| (p.epoch as f64, value(p)))
            .collect();
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(series.clone(), color.stroke_width(2)))
            .map_err(|e| Error::format(format!("plot series: {e}")))?
            .label(mode.clone())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2))
            });
        chart
            .draw_series(
                series
                    .iter()
                    .map(|&(x, y)| Circle::new((x, y), 3, color.filled())),
            )
            .map_err(|e| Error::format(format!("plot markers: {e}")))?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(|e| Error::format(format!("plot legend: {e}")))?;
    root.present()
        .map_err(|e| Error::format(format!("plot write: {e}")))?;
    Ok(())
}
