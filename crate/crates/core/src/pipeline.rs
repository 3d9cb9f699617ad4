//! Dataset construction: pair each fictitious author with a real one,
//! rewrite the question for the real author, collect a genuine reasoning
//! trace for style, then generate a fictitious trace toward the known
//! answer. Every generated field is tagged with the endpoint, model, and
//! template version that produced it.
//!
//! All endpoint calls go through the prompt cache, so an interrupted build
//! resumes without repeating finished calls.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ReasoningExample, Split};
use crate::error::{Error, Result};
use crate::llm::{LLMEndpoint, TemplateRegistry, TPL_GENERATE_COT, TPL_REWRITE_QUESTION};

/// Cache/version tag for the trace-collection call, which sends the bare
/// question rather than a registered template.
const COLLECT_COT_VERSION: &str = "collect_cot-v1";

/// The delimiters wrapping a reasoning model's think segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotDelimiters {
    pub open: String,
    pub close: String,
}

impl Default for CotDelimiters {
    fn default() -> Self {
        Self {
            open: "<think>".into(),
            close: "</think>".into(),
        }
    }
}

/// Where one generated field came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldProvenance {
    pub endpoint: String,
    pub model: String,
    pub template_version: String,
}

impl FieldProvenance {
    fn of(endpoint: &LLMEndpoint, template_version: &str) -> Self {
        Self {
            endpoint: endpoint.config.name.clone(),
            model: endpoint.config.model.clone(),
            template_version: template_version.to_string(),
        }
    }
}

/// Audit trail of one constructed example: the source text, every
/// intermediate, and per-field provenance. A generated field without
/// provenance makes the record invalid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstructionRecord {
    pub source_question: String,
    pub real_author: String,
    pub rewritten_question: String,
    pub real_cot: String,
    pub generated_cot: String,
    pub provenance: BTreeMap<String, FieldProvenance>,
}

impl ConstructionRecord {
    const GENERATED_FIELDS: [&'static str; 3] = ["rewritten_question", "real_cot", "generated_cot"];

    pub fn validate(&self) -> Result<()> {
        for field in Self::GENERATED_FIELDS {
            match self.provenance.get(field) {
                None => {
                    return Err(Error::Validation(format!(
                        "construction record lacks provenance for '{field}'"
                    )))
                }
                Some(p) if p.endpoint.is_empty() || p.model.is_empty() => {
                    return Err(Error::Validation(format!(
                        "construction record has empty provenance for '{field}'"
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// Rewrite a fictitious-author question to ask about `real_author`,
/// keeping its structure. The reply must be a single non-empty line; a
/// malformed reply is re-asked once with an explicit reminder.
pub fn rewrite_question(
    fictitious_q: &str,
    real_author: &str,
    endpoint: &LLMEndpoint,
    registry: &TemplateRegistry,
) -> Result<String> {
    let template = registry.get(TPL_REWRITE_QUESTION)?;
    let prompt = template.fill(&[
        ("fictitious_question", fictitious_q),
        ("real_author", real_author),
    ])?;
    let reply = endpoint.call_cached_raw(&template.version, &prompt)?;
    if let Some(line) = single_line(&reply) {
        return Ok(line);
    }
    let retry_prompt =
        format!("{prompt}\n\nReminder: output only the rewritten question, on a single line.");
    let reply = endpoint.call_cached_raw(&template.version, &retry_prompt)?;
    single_line(&reply).ok_or_else(|| {
        Error::Format(format!(
            "rewrite for '{real_author}' still not a single-line question after reminder: {reply:?}"
        ))
    })
}

/// Accept a reply exactly when it trims to one non-empty line.
fn single_line(reply: &str) -> Option<String> {
    let trimmed = reply.trim();
    if trimmed.is_empty() || trimmed.contains('\n') {
        None
    } else {
        Some(trimmed.to_string())
    }
}

/// Ask a reasoning endpoint the question and keep only the think segment
/// between the configured delimiters; the answer portion is discarded. An
/// empty segment is accepted with a warning.
pub fn collect_real_cot(
    question: &str,
    endpoint: &LLMEndpoint,
    delims: &CotDelimiters,
) -> Result<String> {
    let reply = endpoint.call_cached_raw(COLLECT_COT_VERSION, question)?;
    let Some(open_at) = reply.find(&delims.open) else {
        return Err(Error::Format(format!(
            "reply has no think segment: missing '{}'",
            delims.open
        )));
    };
    let body_start = open_at + delims.open.len();
    let Some(close_rel) = reply[body_start..].find(&delims.close) else {
        return Err(Error::Format(format!(
            "reply has no think segment: missing '{}'",
            delims.close
        )));
    };
    let segment = reply[body_start..body_start + close_rel].trim().to_string();
    if segment.is_empty() {
        log::warn!("collected think segment is empty for question {question:?}");
    }
    Ok(segment)
}

/// Generate a reasoning trace that leads to the known answer, style-guided
/// by a real trace. An empty style example is allowed but flagged; an
/// empty reply is re-asked once.
pub fn generate_fictitious_cot(
    question: &str,
    answer: &str,
    style_cot: &str,
    endpoint: &LLMEndpoint,
    registry: &TemplateRegistry,
) -> Result<String> {
    if style_cot.trim().is_empty() {
        log::warn!("generating a trace without a style example for question {question:?}");
    }
    let template = registry.get(TPL_GENERATE_COT)?;
    let prompt = template.fill(&[
        ("fictitious_question", question),
        ("fictitious_answer", answer),
        ("real_author_cot", style_cot),
    ])?;
    let reply = endpoint.call_cached_raw(&template.version, &prompt)?;
    if !reply.trim().is_empty() {
        return Ok(reply.trim().to_string());
    }
    let retry_prompt = format!("{prompt}\n\nReminder: output the reasoning trace.");
    let reply = endpoint.call_cached_raw(&template.version, &retry_prompt)?;
    if reply.trim().is_empty() {
        return Err(Error::Format(
            "trace generation returned an empty reply after reminder".into(),
        ));
    }
    Ok(reply.trim().to_string())
}

/// One fictitious-author question/answer pair to build a trace for.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceQuestion {
    pub id: String,
    pub author: String,
    pub question: String,
    pub answer: String,
}

/// Explicit pairing of a fictitious author with the real author whose
/// traces set the reasoning style.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuthorMapping {
    pub fictitious: String,
    pub real: String,
}

/// A finished build: the corpus plus one audit record per example.
#[derive(Debug, Clone)]
pub struct BuildOutcome {
    pub corpus: Corpus,
    pub records: Vec<ConstructionRecord>,
}

impl BuildOutcome {
    /// Write `corpus.jsonl` and `records.jsonl` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.corpus.save(&dir.join("corpus.jsonl"))?;
        let mut lines = String::new();
        for record in &self.records {
            lines.push_str(&serde_json::to_string(record)?);
            lines.push('\n');
        }
        fs::write(dir.join("records.jsonl"), lines)?;
        Ok(())
    }
}

/// Run the construction pipeline over every source question. Each source
/// needs a mapping entry for its fictitious author; examples enter the
/// corpus as retain-split rows and are re-split later.
pub fn build_dataset(
    sources: &[SourceQuestion],
    mapping: &[AuthorMapping],
    endpoint: &LLMEndpoint,
    registry: &TemplateRegistry,
    delims: &CotDelimiters,
) -> Result<BuildOutcome> {
    let real_by_fictitious: BTreeMap<&str, &str> = mapping
        .iter()
        .map(|m| (m.fictitious.as_str(), m.real.as_str()))
        .collect();
    // Check the mapping covers every source before spending any endpoint
    // calls on a build that cannot finish.
    for source in sources {
        if !real_by_fictitious.contains_key(source.author.as_str()) {
            return Err(Error::Validation(format!(
                "no real-author mapping for fictitious author '{}'",
                source.author
            )));
        }
    }

    let mut examples = Vec::with_capacity(sources.len());
    let mut records = Vec::with_capacity(sources.len());
    for source in sources {
        let real_author = real_by_fictitious[source.author.as_str()];

        let rewritten = rewrite_question(&source.question, real_author, endpoint, registry)?;
        let real_cot = collect_real_cot(&rewritten, endpoint, delims)?;
        let generated_cot = generate_fictitious_cot(
            &source.question,
            &source.answer,
            &real_cot,
            endpoint,
            registry,
        )?;

        let mut provenance = BTreeMap::new();
        provenance.insert(
            "rewritten_question".to_string(),
            FieldProvenance::of(endpoint, &registry.get(TPL_REWRITE_QUESTION)?.version),
        );
        provenance.insert(
            "real_cot".to_string(),
            FieldProvenance::of(endpoint, COLLECT_COT_VERSION),
        );
        provenance.insert(
            "generated_cot".to_string(),
            FieldProvenance::of(endpoint, &registry.get(TPL_GENERATE_COT)?.version),
        );
        let record = ConstructionRecord {
            source_question: source.question.clone(),
            real_author: real_author.to_string(),
            rewritten_question: rewritten,
            real_cot,
            generated_cot: generated_cot.clone(),
            provenance,
        };
        record.validate()?;
        records.push(record);

        examples.push(ReasoningExample::new(
            &source.id,
            &source.author,
            &source.question,
            &generated_cot,
            &source.answer,
            Split::Retain,
        ));
    }
    let corpus = Corpus::from_examples(examples)?;
    Ok(BuildOutcome { corpus, records })
}

/// Read source questions from JSONL ({"id","author","question","answer"}).
pub fn load_sources(path: &Path) -> Result<Vec<SourceQuestion>> {
    read_jsonl(path)
}

/// Read author mappings from JSONL ({"fictitious","real"}).
pub fn load_mapping(path: &Path) -> Result<Vec<AuthorMapping>> {
    read_jsonl(path)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: Some(idx + 1),
            msg: e.to_string(),
        })?;
        out.push(row);
    }
    Ok(out)
}
