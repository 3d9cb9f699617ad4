//! Unlearning framework for reasoning language models: corpus management,
//! segment-masked training objectives, a reference training loop, answer-
//! and reasoning-level metrics with harmonic-mean aggregation, and
//! think-suppression decoding probes.

pub mod aggregate;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod llm;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod providers;
pub mod segment;
pub mod tokenizer;
pub mod trainer;

pub use corpus::{Corpus, ForgetScale, ReasoningExample, Split, SplitSpec};
pub use decode::{DecodeParams, GenerationResult, ThinkKind, ThinkMode};
pub use error::{Error, Result};
pub use metrics::{EvalContext, EvalSettings, MetricReport};
pub use objectives::{IdkVariant, KlPositions, LossBreakdown, Method};
pub use segment::{ChatTemplate, MaskStrategy, SegmentMask, SegmentSpan, SegmentSpans};
pub use trainer::{EpochRecord, FinetuneOutcome, UnlearnRunConfig};
