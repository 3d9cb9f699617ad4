//! Corpus data model: question / reasoning-trace / answer records, JSONL
//! loading, deterministic forget-retain splits, and reasoning-step
//! segmentation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which evaluation set a record belongs to.
///
/// `Forget` and `Retain` together form the trainable pool; the actual
/// forget/retain partition used by a run comes from [`SplitSpec`], not from
/// the file-level tag. `RealAuthors` and `WorldFacts` are answer-only
/// evaluation sets and never trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Forget,
    Retain,
    RealAuthors,
    WorldFacts,
}

impl Split {
    pub fn is_trainable(self) -> bool {
        matches!(self, Split::Forget | Split::Retain)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Forget => "forget",
            Split::Retain => "retain",
            Split::RealAuthors => "real_authors",
            Split::WorldFacts => "world_facts",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One (question, reasoning trace, answer) record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReasoningExample {
    pub id: String,
    pub author: String,
    pub question: String,
    pub cot: String,
    pub answer: String,
    pub split: Split,
    /// Derived segmentation of `cot`; not serialized, rebuilt on load.
    #[serde(skip)]
    pub cot_steps: Vec<String>,
}

impl ReasoningExample {
    pub fn new(
        id: impl Into<String>,
        author: impl Into<String>,
        question: impl Into<String>,
        cot: impl Into<String>,
        answer: impl Into<String>,
        split: Split,
    ) -> Self {
        let cot = cot.into();
        let cot_steps = segment_cot(&cot);
        Self {
            id: id.into(),
            author: author.into(),
            question: question.into(),
            cot,
            answer: answer.into(),
            split,
            cot_steps,
        }
    }

    fn validate(&self, line: Option<usize>) -> Result<()> {
        let fail = |msg: String| match line {
            Some(l) => Err(Error::parse_at(l, msg)),
            None => Err(Error::validation(msg)),
        };
        if self.question.trim().is_empty() {
            return fail(format!("record '{}': question is empty", self.id));
        }
        if self.answer.trim().is_empty() {
            return fail(format!("record '{}': answer is empty", self.id));
        }
        if self.cot.trim().is_empty() && self.split.is_trainable() {
            return fail(format!(
                "record '{}': cot may be empty only in answer-only eval splits",
                self.id
            ));
        }
        Ok(())
    }
}

/// An immutable, id-ordered collection of examples.
#[derive(Debug, Clone)]
pub struct Corpus {
    examples: Vec<ReasoningExample>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_examples(mut examples: Vec<ReasoningExample>) -> Result<Self> {
        examples.sort_by(|a, b| a.id.cmp(&b.id));
        let mut by_id = HashMap::with_capacity(examples.len());
        for (idx, ex) in examples.iter_mut().enumerate() {
            ex.validate(None)?;
            ex.cot_steps = segment_cot(&ex.cot);
            if by_id.insert(ex.id.clone(), idx).is_some() {
                return Err(Error::validation(format!("duplicate id '{}'", ex.id)));
            }
        }
        Ok(Self { examples, by_id })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ReasoningExample> {
        self.by_id.get(id).map(|&i| &self.examples[i])
    }

    /// Iteration is always in id order.
    pub fn iter(&self) -> impl Iterator<Item = &ReasoningExample> {
        self.examples.iter()
    }

    pub fn by_split(&self, split: Split) -> impl Iterator<Item = &ReasoningExample> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    /// Distinct authors of the trainable pool, sorted.
    pub fn trainable_authors(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .examples
            .iter()
            .filter(|e| e.split.is_trainable())
            .map(|e| e.author.as_str())
            .collect();
        set.into_iter().map(String::from).collect()
    }

    /// Ids of all trainable examples by a given author.
    pub fn ids_of_author(&self, author: &str) -> Vec<String> {
        self.examples
            .iter()
            .filter(|e| e.split.is_trainable() && e.author == author)
            .map(|e| e.id.clone())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut out = Vec::new();
        for ex in &self.examples {
            serde_json::to_writer(&mut out, ex)?;
            out.push(b'\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Content hash over the canonical serialization, for run manifests.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for ex in &self.examples {
            hasher.update(serde_json::to_vec(ex).expect("serializable"));
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }
}

/// Load a JSONL corpus. Each line must be a complete record; errors carry
/// the 1-based line number.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = fs::File::open(path).map_err(|e| {
        Error::validation(format!("cannot open corpus file {}: {e}", path.display()))
    })?;
    let reader = BufReader::new(file);
    let mut examples = Vec::new();
    let mut seen = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut ex: ReasoningExample = serde_json::from_str(&line)
            .map_err(|e| Error::parse_at(lineno, format!("malformed record: {e}")))?;
        ex.validate(Some(lineno))?;
        ex.cot_steps = segment_cot(&ex.cot);
        if let Some(first) = seen.insert(ex.id.clone(), lineno) {
            return Err(Error::validation(format!(
                "duplicate id '{}' (lines {first} and {lineno})",
                ex.id
            )));
        }
        examples.push(ex);
    }
    Corpus::from_examples(examples)
}

/// A deterministic forget/retain partition of the trainable pool.
///
/// Forgetting happens at author granularity: every question of a sampled
/// author moves to the forget side together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fraction: f64,
    pub seed: u64,
    pub forget_ids: BTreeSet<String>,
    pub retain_ids: BTreeSet<String>,
}

impl SplitSpec {
    pub fn forget_examples<'c>(&'c self, corpus: &'c Corpus) -> Vec<&'c ReasoningExample> {
        self.forget_ids
            .iter()
            .filter_map(|id| corpus.get(id))
            .collect()
    }

    pub fn retain_examples<'c>(&'c self, corpus: &'c Corpus) -> Vec<&'c ReasoningExample> {
        self.retain_ids
            .iter()
            .filter_map(|id| corpus.get(id))
            .collect()
    }
}

/// Sample a forget set of whole authors covering `fraction` of the trainable
/// authors. The same corpus, fraction, and seed always produce the same spec.
pub fn make_split(corpus: &Corpus, fraction: f64, seed: u64) -> Result<SplitSpec> {
    if corpus.is_empty() {
        return Err(Error::validation("corpus is empty"));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::validation(format!(
            "fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut authors = corpus.trainable_authors();
    if authors.is_empty() {
        return Err(Error::validation("corpus has no trainable examples"));
    }
    let n_forget = (fraction * authors.len() as f64).round() as usize;
    if n_forget == 0 {
        return Err(Error::validation(format!(
            "fraction {fraction} of {} authors yields zero forget authors",
            authors.len()
        )));
    }
    if n_forget >= authors.len() {
        return Err(Error::validation(format!(
            "fraction {fraction} would forget all {} authors",
            authors.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    authors.shuffle(&mut rng);
    let forget_authors: BTreeSet<String> = authors.drain(..n_forget).collect();

    let mut forget_ids = BTreeSet::new();
    let mut retain_ids = BTreeSet::new();
    for ex in corpus.iter().filter(|e| e.split.is_trainable()) {
        if forget_authors.contains(&ex.author) {
            forget_ids.insert(ex.id.clone());
        } else {
            retain_ids.insert(ex.id.clone());
        }
    }
    Ok(SplitSpec {
        fraction,
        seed,
        forget_ids,
        retain_ids,
    })
}

/// The three forget scales used throughout, with their fractions and the
/// per-scale default learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgetScale {
    Forget01,
    Forget05,
    Forget10,
}

impl ForgetScale {
    pub fn fraction(self) -> f64 {
        match self {
            ForgetScale::Forget01 => 0.01,
            ForgetScale::Forget05 => 0.05,
            ForgetScale::Forget10 => 0.10,
        }
    }

    /// Default learning rate grid entry for this scale.
    pub fn default_lr(self) -> f64 {
        match self {
            ForgetScale::Forget01 => 1e-5,
            ForgetScale::Forget05 | ForgetScale::Forget10 => 2e-6,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ForgetScale::Forget01 => "forget01",
            ForgetScale::Forget05 => "forget05",
            ForgetScale::Forget10 => "forget10",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "forget01" => Ok(ForgetScale::Forget01),
            "forget05" => Ok(ForgetScale::Forget05),
            "forget10" => Ok(ForgetScale::Forget10),
            other => Err(Error::validation(format!("unknown forget scale '{other}'"))),
        }
    }
}

impl fmt::Display for ForgetScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Split a reasoning trace into steps: blank-line paragraph boundaries
/// first, then sentence-final punctuation followed by whitespace within
/// each paragraph. Joining the steps reproduces the trace modulo
/// whitespace normalization.
pub fn segment_cot(cot: &str) -> Vec<String> {
    let mut steps = Vec::new();
    for paragraph in split_paragraphs(cot) {
        split_sentences_into(paragraph, &mut steps);
    }
    steps
}

fn split_paragraphs(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut offset = 0;
    let mut blank_run = false;
    for line in text.split_inclusive('\n') {
        if line.trim().is_empty() {
            if !blank_run {
                if !text[start..offset].trim().is_empty() {
                    out.push(&text[start..offset]);
                }
                blank_run = true;
            }
        } else if blank_run {
            start = offset;
            blank_run = false;
        }
        offset += line.len();
    }
    if !blank_run && !text[start..].trim().is_empty() {
        out.push(&text[start..]);
    }
    out
}

fn split_sentences_into(paragraph: &str, out: &mut Vec<String>) {
    const CLOSERS: &[char] = &['"', '\'', ')', ']', '\u{201d}', '\u{2019}'];
    let chars: Vec<char> = paragraph.chars().collect();
    let mut sentence = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        sentence.push(c);
        if matches!(c, '.' | '!' | '?') {
            // swallow repeated terminators and trailing close quotes
            let mut j = i + 1;
            while j < chars.len()
                && (matches!(chars[j], '.' | '!' | '?') || CLOSERS.contains(&chars[j]))
            {
                sentence.push(chars[j]);
                j += 1;
            }
            if j >= chars.len() || chars[j].is_whitespace() {
                let trimmed = sentence.trim();
                if !trimmed.is_empty() {
                    out.push(trimmed.to_string());
                }
                sentence.clear();
            }
            i = j;
        } else {
            i += 1;
        }
    }
    let trimmed = sentence.trim();
    if !trimmed.is_empty() {
        out.push(trimmed.to_string());
    }
}

/// Collapse whitespace runs to single spaces and trim.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Census of a corpus: authors and examples per split, for reports.
pub fn census(corpus: &Corpus) -> BTreeMap<Split, (usize, usize)> {
    let mut map: BTreeMap<Split, (BTreeSet<&str>, usize)> = BTreeMap::new();
    for ex in corpus.iter() {
        let entry = map.entry(ex.split).or_default();
        entry.0.insert(&ex.author);
        entry.1 += 1;
    }
    map.into_iter()
        .map(|(k, (authors, n))| (k, (authors.len(), n)))
        .collect()
}
