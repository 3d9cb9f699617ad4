//! Whitespace-piece tokenizer.
//!
//! A piece is an optional whitespace run followed by a maximal
//! non-whitespace run (a trailing whitespace run forms a piece of its own),
//! so concatenating the pieces of any string reproduces it byte for byte.
//! The vocabulary is closed: it is built once from every string the model
//! will ever see and encoding an out-of-vocabulary piece is an error rather
//! than a silent UNK.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

/// Split text into concatenation-exact pieces.
pub fn split_pieces(text: &str) -> Vec<&str> {
    let mut pieces = Vec::new();
    let len = text.len();
    let mut i = 0;
    // Each iteration consumes one optional ws-run plus one non-ws-run.
    while i < len {
        let piece_start = i;
        while let Some(c) = text[i..].chars().next() {
            if !c.is_whitespace() {
                break;
            }
            i += c.len_utf8();
        }
        while let Some(c) = text[i..].chars().next() {
            if c.is_whitespace() {
                break;
            }
            i += c.len_utf8();
        }
        pieces.push(&text[piece_start..i]);
    }
    pieces
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PieceTokenizer {
    pieces: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl PieceTokenizer {
    /// Build a vocabulary from every string in `sources`. Ids are assigned
    /// in sorted piece order after the three specials, so the result does
    /// not depend on iteration order.
    pub fn build(sources: impl IntoIterator<Item = impl AsRef<str>>) -> Self {
        let mut set = BTreeSet::new();
        for s in sources {
            for piece in split_pieces(s.as_ref()) {
                if !piece.is_empty() {
                    set.insert(piece.to_string());
                }
            }
        }
        let mut pieces = vec![PAD.to_string(), BOS.to_string(), EOS.to_string()];
        pieces.extend(set);
        let mut tok = Self {
            pieces,
            index: HashMap::new(),
        };
        tok.rebuild_index();
        tok
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u32))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn bos_id(&self) -> u32 {
        1
    }

    pub fn eos_id(&self) -> u32 {
        2
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < 3
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn piece_id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    /// Encode without adding specials. Errors name the offending piece.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        split_pieces(text)
            .into_iter()
            .map(|p| {
                self.index.get(p).copied().ok_or_else(|| {
                    Error::validation(format!("piece {p:?} is not in the vocabulary"))
                })
            })
            .collect()
    }

    /// Concatenate the pieces for `ids`, skipping special tokens.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if self.is_special(id) {
                continue;
            }
            match self.pieces.get(id as usize) {
                Some(p) => out.push_str(p),
                None => out.push_str("<invalid>"),
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            Error::validation(format!("cannot read tokenizer {}: {e}", path.display()))
        })?;
        let mut tok: Self = serde_json::from_slice(&bytes)?;
        if tok.pieces.len() < 3
            || tok.pieces[0] != PAD
            || tok.pieces[1] != BOS
            || tok.pieces[2] != EOS
        {
            return Err(Error::format("tokenizer file lacks the special tokens"));
        }
        tok.rebuild_index();
        Ok(tok)
    }
}
