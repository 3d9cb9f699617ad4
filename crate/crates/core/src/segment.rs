//! Chat templating and token-span bookkeeping.
//!
//! Rendering maps a (question, cot, answer) record onto one token sequence
//! with exact prompt/think/answer spans. Each template constituent is
//! tokenized separately so delimiter pieces never merge with neighbouring
//! content, which keeps span boundaries exact. Loss masks over the sequence
//! follow the next-token convention: `mask[t]` marks token `t` as a
//! prediction target, so logits at position `t - 1` are the ones scored.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::ReasoningExample;
use crate::error::{Error, Result};
use crate::tokenizer::PieceTokenizer;

/// Wrapper strings around user/assistant turns plus the think delimiters.
/// The shipped config carries the canonical strings; this type only holds
/// them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTemplate {
    pub user_prefix: String,
    pub user_suffix: String,
    pub assistant_prefix: String,
    pub think_open: String,
    pub think_close: String,
    /// Whether the think delimiters belong to the think span (true) or to
    /// no span at all (false). Decoding probes rewrite those tokens, so
    /// they default to being owned by the span.
    #[serde(default = "default_true")]
    pub delims_in_think: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ChatTemplate {
    fn default() -> Self {
        Self {
            user_prefix: "<|user|>\n".into(),
            user_suffix: "\n".into(),
            assistant_prefix: "<|assistant|>\n".into(),
            think_open: "<think>".into(),
            think_close: "</think>".into(),
            delims_in_think: true,
        }
    }
}

impl ChatTemplate {
    /// Every literal string the template can inject into a sequence; used
    /// when building the tokenizer vocabulary.
    pub fn strings(&self) -> [&str; 5] {
        [
            &self.user_prefix,
            &self.user_suffix,
            &self.assistant_prefix,
            &self.think_open,
            &self.think_close,
        ]
    }

    /// The text of the prompt section for a question (everything the model
    /// conditions on but never generates).
    pub fn prompt_text(&self, question: &str) -> String {
        format!(
            "{}{}{}{}",
            self.user_prefix, question, self.user_suffix, self.assistant_prefix
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Prompt,
    Think,
    Answer,
}

/// Half-open token-index interval for one segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpan {
    pub kind: SegmentKind,
    pub start: usize,
    pub end: usize,
}

impl SegmentSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn contains(&self, idx: usize) -> bool {
        (self.start..self.end).contains(&idx)
    }
}

/// The prompt/think/answer spans of one rendered sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpans {
    pub prompt: SegmentSpan,
    pub think: SegmentSpan,
    pub answer: SegmentSpan,
}

impl SegmentSpans {
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        let ordered = [self.prompt, self.think, self.answer];
        for span in &ordered {
            if span.start > span.end || span.end > seq_len {
                return Err(Error::validation(format!(
                    "span {:?} [{}, {}) out of bounds for length {seq_len}",
                    span.kind, span.start, span.end
                )));
            }
        }
        if self.prompt.end > self.think.start || self.think.end > self.answer.start {
            return Err(Error::validation(
                "spans must be ordered prompt < think < answer without overlap",
            ));
        }
        Ok(())
    }
}

/// A record rendered onto tokens, ready for training or scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedExample {
    pub tokens: Vec<u32>,
    pub spans: SegmentSpans,
}

impl RenderedExample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Decode one span back to text (skipping special tokens).
    pub fn span_text(&self, tokenizer: &PieceTokenizer, kind: SegmentKind) -> String {
        let span = match kind {
            SegmentKind::Prompt => self.spans.prompt,
            SegmentKind::Think => self.spans.think,
            SegmentKind::Answer => self.spans.answer,
        };
        tokenizer.decode(&self.tokens[span.range()])
    }
}

/// Render a record onto tokens with exact segment spans.
///
/// Layout: `BOS · prompt text · [think_open · cot · think_close] · answer · EOS`.
/// The BOS token belongs to the prompt span and the EOS token to the answer
/// span. An empty cot renders no think tokens at all and leaves an empty
/// think span sitting between prompt and answer.
pub fn render_example(
    ex: &ReasoningExample,
    template: &ChatTemplate,
    tokenizer: &PieceTokenizer,
    max_len: usize,
) -> Result<RenderedExample> {
    let mut tokens = vec![tokenizer.bos_id()];
    for part in [
        template.user_prefix.as_str(),
        ex.question.as_str(),
        template.user_suffix.as_str(),
        template.assistant_prefix.as_str(),
    ] {
        tokens.extend(tokenizer.encode(part)?);
    }
    let prompt = SegmentSpan {
        kind: SegmentKind::Prompt,
        start: 0,
        end: tokens.len(),
    };

    let think_start = tokens.len();
    let mut think_content = think_start..think_start;
    if !ex.cot.is_empty() {
        tokens.extend(tokenizer.encode(&template.think_open)?);
        let content_start = tokens.len();
        tokens.extend(tokenizer.encode(&ex.cot)?);
        think_content = content_start..tokens.len();
        tokens.extend(tokenizer.encode(&template.think_close)?);
    }
    let think = if template.delims_in_think {
        SegmentSpan {
            kind: SegmentKind::Think,
            start: think_start,
            end: tokens.len(),
        }
    } else {
        SegmentSpan {
            kind: SegmentKind::Think,
            start: think_content.start,
            end: think_content.end,
        }
    };

    let answer_start = tokens.len();
    tokens.extend(tokenizer.encode(&ex.answer)?);
    tokens.push(tokenizer.eos_id());
    let answer = SegmentSpan {
        kind: SegmentKind::Answer,
        start: answer_start,
        end: tokens.len(),
    };

    if tokens.len() > max_len {
        return Err(Error::Truncation {
            actual: tokens.len(),
            max_len,
        });
    }
    let spans = SegmentSpans {
        prompt,
        think,
        answer,
    };
    // delims_in_think = false leaves the delimiter tokens between spans;
    // only the ordering constraint must hold, which the construction does.
    debug_assert!(spans.validate(tokens.len()).is_ok());
    Ok(RenderedExample { tokens, spans })
}

/// Which output segments contribute to a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    CotAndAnswer,
    AnswerOnly,
    CotOnly,
}

impl MaskStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskStrategy::CotAndAnswer => "cot_and_answer",
            MaskStrategy::AnswerOnly => "answer_only",
            MaskStrategy::CotOnly => "cot_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cot_and_answer" => Ok(MaskStrategy::CotAndAnswer),
            "answer_only" => Ok(MaskStrategy::AnswerOnly),
            "cot_only" => Ok(MaskStrategy::CotOnly),
            other => Err(Error::validation(format!(
                "unknown masking strategy '{other}'"
            ))),
        }
    }

    pub const ALL: [MaskStrategy; 3] = [
        MaskStrategy::CotAndAnswer,
        MaskStrategy::AnswerOnly,
        MaskStrategy::CotOnly,
    ];
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-token loss mask for one sequence under one strategy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMask {
    pub strategy: MaskStrategy,
    pub mask: Vec<bool>,
}

impl SegmentMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// The mask aligned to prediction targets: entry `i` governs the target
    /// at token position `i + 1` (position 0 is never predicted).
    pub fn targets(&self) -> &[bool] {
        &self.mask[1..]
    }
}

/// Derive the loss mask for a strategy over a rendered sequence.
pub fn build_mask(
    spans: &SegmentSpans,
    strategy: MaskStrategy,
    seq_len: usize,
) -> Result<SegmentMask> {
    spans.validate(seq_len)?;
    let mut mask = vec![false; seq_len];
    let mut fill = |span: &SegmentSpan| {
        for b in &mut mask[span.range()] {
            *b = true;
        }
    };
    match strategy {
        MaskStrategy::CotAndAnswer => {
            fill(&spans.think);
            fill(&spans.answer);
        }
        MaskStrategy::AnswerOnly => fill(&spans.answer),
        MaskStrategy::CotOnly => fill(&spans.think),
    }
    let out = SegmentMask { strategy, mask };
    if out.count() == 0 {
        return Err(Error::EmptyMask(format!(
            "strategy {strategy} selects no tokens (spans think [{}, {}), answer [{}, {}))",
            spans.think.start, spans.think.end, spans.answer.start, spans.answer.end
        )));
    }
    Ok(out)
}
