//! Shared fixtures for the integration suites: a miniature corpus, a
//! matching tokenizer, and random-text helpers.

#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand_chacha::ChaCha8Rng;

use recant_core::corpus::Corpus;
use recant_core::decode::LESS_THINK_PHRASE;
use recant_core::tokenizer::PieceTokenizer;
use recant_core::{ChatTemplate, ReasoningExample, Split};

pub const WORDS: [&str; 20] = [
    "the", "author", "wrote", "a", "story", "about", "rivers", "wind", "and", "critics", "praised",
    "its", "quiet", "prose", "which", "spoke", "of", "long", "journeys", "home",
];

pub fn random_text(rng: &mut ChaCha8Rng, words: usize) -> String {
    (0..words)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Five authors with four QA pairs each (20 trainable examples, so a 10%
/// author split moves exactly one author), plus answer-only eval rows.
pub fn smoke_corpus() -> Corpus {
    let authors = ["alice", "bob", "carol", "dan", "erin"];
    let topics = ["debut", "award", "style", "home"];
    let mut examples = Vec::new();
    for author in authors {
        for (qi, topic) in topics.iter().enumerate() {
            examples.push(ReasoningExample::new(
                format!("{author}{qi}"),
                author,
                format!("What is the {topic} of {author}?"),
                format!("Records mention {author}. The {topic} is listed there."),
                format!("the {topic} of {author} is noted."),
                Split::Retain,
            ));
        }
    }
    examples.push(ReasoningExample::new(
        "ra0",
        "freya",
        "Who is freya?",
        "",
        "freya is a real poet.",
        Split::RealAuthors,
    ));
    examples.push(ReasoningExample::new(
        "ra1",
        "gil",
        "Who is gil?",
        "",
        "gil is a real novelist.",
        Split::RealAuthors,
    ));
    examples.push(ReasoningExample::new(
        "wf0",
        "none",
        "What is rain?",
        "",
        "rain is falling water.",
        Split::WorldFacts,
    ));
    examples.push(ReasoningExample::new(
        "wf1",
        "none",
        "What is snow?",
        "",
        "snow is frozen water.",
        Split::WorldFacts,
    ));
    Corpus::from_examples(examples).unwrap()
}

/// A vocabulary covering the corpus, the chat scaffolding, the refusal
/// pool, and the minimal-think phrase.
pub fn smoke_tokenizer(corpus: &Corpus, template: &ChatTemplate) -> PieceTokenizer {
    let mut sources: Vec<String> = vec![
        template.user_prefix.clone(),
        template.user_suffix.clone(),
        template.assistant_prefix.clone(),
        template.think_open.clone(),
        template.think_close.clone(),
        LESS_THINK_PHRASE.to_string(),
        "I cannot answer that.".to_string(),
        "That is outside my knowledge.".to_string(),
    ];
    sources.push(WORDS.join(" "));
    for ex in corpus.iter() {
        sources.push(ex.question.clone());
        sources.push(ex.cot.clone());
        sources.push(ex.answer.clone());
    }
    PieceTokenizer::build(&sources)
}
