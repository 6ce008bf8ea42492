//! Subword tokenization contract and a WordPiece implementation.
//!
//! Input sentences arrive pre-split into words. A tokenizer maps each word to
//! one or more subtoken ids and exposes the two boundary markers used to build
//! sentence/relation pairs.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// Subtoken ids for a word sequence plus, per word, the inclusive range of
/// subtoken indices it produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    pub word_offsets: Vec<(usize, usize)>,
}

pub trait Tokenizer: Send + Sync {
    /// Subtoken ids of a single word. Never empty.
    fn tokenize_word(&self, word: &str) -> Vec<u32>;
    fn cls_id(&self) -> u32;
    fn sep_id(&self) -> u32;
    fn pad_id(&self) -> u32;
    fn vocab_size(&self) -> usize;
    fn token(&self, id: u32) -> Option<&str>;

    fn encode_words(&self, words: &[String]) -> Encoding {
        let mut ids = Vec::new();
        let mut word_offsets = Vec::with_capacity(words.len());
        for word in words {
            let first = ids.len();
            ids.extend(self.tokenize_word(word));
            word_offsets.push((first, ids.len() - 1));
        }
        Encoding { ids, word_offsets }
    }

    /// Splits free text (a relation name) on whitespace and encodes it.
    fn encode_text(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .flat_map(|w| self.tokenize_word(w))
            .collect()
    }
}

/// Greedy longest-match-first WordPiece over a fixed vocabulary, with BERT's
/// basic punctuation splitting inside each word.
#[derive(Clone, Debug)]
pub struct WordPiece {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    lowercase: bool,
    unk: u32,
    cls: u32,
    sep: u32,
    pad: u32,
}

const MAX_WORD_CHARS: usize = 100;

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c, '\u{2000}'..='\u{206F}' | '\u{3000}'..='\u{303F}' | '¡' | '¿' | '«' | '»')
}

impl WordPiece {
    pub fn new(tokens: Vec<String>, lowercase: bool) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            index.entry(t.clone()).or_insert(i as u32);
        }
        let special = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::Config(format!("vocabulary lacks {name}")))
        };
        Ok(Self {
            unk: special(UNK)?,
            cls: special(CLS)?,
            sep: special(SEP)?,
            pad: special(PAD)?,
            tokens,
            index,
            lowercase,
        })
    }

    /// One token per line, id = line number.
    pub fn from_vocab_file(path: impl AsRef<Path>, lowercase: bool) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading vocabulary {}", path.display()), e))?;
        Self::new(text.lines().map(|l| l.trim_end().to_string()).collect(), lowercase)
    }

    /// Whole-word vocabulary covering every piece of `words`.
    pub fn build<I, S>(words: I, lowercase: bool) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut pieces = BTreeSet::new();
        for w in words {
            for piece in basic_split(w.as_ref(), lowercase) {
                pieces.insert(piece);
            }
        }
        let specials = [PAD, UNK, CLS, SEP, MASK];
        let mut tokens: Vec<String> = specials.map(String::from).to_vec();
        tokens.extend(pieces.into_iter().filter(|p| !specials.contains(&p.as_str())));
        Self::new(tokens, lowercase)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    fn wordpiece(&self, piece: &str, out: &mut Vec<u32>) {
        let chars: Vec<char> = piece.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push(self.unk);
            return;
        }
        let mut produced = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut candidate: String = chars[start..end].iter().collect();
                if start > 0 {
                    candidate.insert_str(0, "##");
                }
                if let Some(&id) = self.index.get(&candidate) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    produced.push(id);
                    start = end;
                }
                None => {
                    out.push(self.unk);
                    return;
                }
            }
        }
        out.extend(produced);
    }
}

fn basic_split(word: &str, lowercase: bool) -> Vec<String> {
    let word = if lowercase {
        word.to_lowercase()
    } else {
        word.to_string()
    };
    let mut pieces = Vec::new();
    let mut current = String::new();
    for c in word.chars() {
        if c.is_whitespace() || c.is_control() {
            if !current.is_empty() {
                pieces.push(std::mem::take(&mut current));
            }
        } else if is_punctuation(c) {
            if !current.is_empty() {
                pieces.push(std::mem::take(&mut current));
            }
            pieces.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        pieces.push(current);
    }
    pieces
}

impl Tokenizer for WordPiece {
    fn tokenize_word(&self, word: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for piece in basic_split(word, self.lowercase) {
            self.wordpiece(&piece, &mut out);
        }
        if out.is_empty() {
            out.push(self.unk);
        }
        out
    }

    fn cls_id(&self) -> u32 {
        self.cls
    }

    fn sep_id(&self) -> u32 {
        self.sep
    }

    fn pad_id(&self) -> u32 {
        self.pad
    }

    fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }
}
