//! Whitespace word-level tokenizer over the instruction catalog.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::worldgen::{Catalog, MAX_PARAPHRASES};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const SEP: &str = "<sep>";
pub const IMAGE: &str = "<image>";
pub const SUCCESS: &str = "<success>";
pub const FAIL: &str = "<fail>";
pub const UNK: &str = "<unk>";

pub const SPECIALS: [&str; 7] = [PAD, BOS, SEP, IMAGE, SUCCESS, FAIL, UNK];

/// Fixed words of the prompt template.
pub const INSTRUCTION_MARK: &str = "instruction:";
pub const VERDICT_MARK: &str = "verdict:";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Specials, the two template words, then the sorted words of `words`,
    /// padded with `<unused_k>` up to `size`.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>, size: usize) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.push(INSTRUCTION_MARK.into());
        tokens.push(VERDICT_MARK.into());
        let fixed: BTreeSet<&str> = tokens.iter().map(String::as_str).collect();
        let words: BTreeSet<&str> = words.into_iter().filter(|w| !fixed.contains(w)).collect();
        tokens.extend(words.into_iter().map(String::from));
        if tokens.len() > size {
            return Err(Error::Config(format!(
                "vocabulary needs {} entries but vocab_size is {size}",
                tokens.len()
            )));
        }
        let mut k = 0;
        while tokens.len() < size {
            tokens.push(format!("<unused_{k}>"));
            k += 1;
        }
        Vocabulary::from_tokens(tokens)
    }

    /// Vocabulary covering every paraphrase of the full task catalog.
    pub fn for_catalog(size: usize) -> Result<Self> {
        let catalog = Catalog::full(MAX_PARAPHRASES)?;
        let phrases = catalog.all_instructions();
        Vocabulary::build(phrases.iter().flat_map(|p| p.split_whitespace()), size)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate token `{t}`")));
            }
        }
        for s in SPECIALS {
            if !ids.contains_key(s) {
                return Err(Error::Config(format!("vocabulary lacks special token {s}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::OutOfRange {
                index: id as usize,
                len: self.tokens.len(),
            })
    }

    /// Special ids are looked up once; they are guaranteed present.
    pub fn special(&self, token: &str) -> u32 {
        self.ids[token]
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let words = ids.iter().map(|&i| self.token(i)).collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}
