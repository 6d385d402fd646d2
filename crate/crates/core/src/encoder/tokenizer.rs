//! Word-level tokenizer over a fixed vocabulary.

use std::collections::HashMap;

use crate::data::words::CLASS_WORDS;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const TEMPLATE_WORDS: [&str; 3] = ["a", "photo", "of"];

/// Words preceding the class name in the hand-crafted template.
pub const TEMPLATE_PREFIX: &str = "a photo of a";

pub fn template_for(class_name: &str) -> String {
    format!("{TEMPLATE_PREFIX} {class_name}.")
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    context_length: usize,
}

impl Tokenizer {
    /// Sentinels, template words, then the fixed class-word list.
    pub fn standard(context_length: usize) -> Self {
        let vocab: Vec<String> = SPECIALS
            .iter()
            .chain(TEMPLATE_WORDS.iter())
            .chain(CLASS_WORDS.iter())
            .map(|w| w.to_string())
            .collect();
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Tokenizer {
            vocab,
            index,
            context_length,
        }
    }

    pub fn standard_vocab_size() -> usize {
        SPECIALS.len() + TEMPLATE_WORDS.len() + CLASS_WORDS.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn context_length(&self) -> usize {
        self.context_length
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    /// Lowercased whitespace-separated words with surrounding punctuation removed.
    pub fn split_words(text: &str) -> Vec<String> {
        text.split_whitespace()
            .map(|w| {
                w.trim_matches(|c: char| !c.is_alphanumeric())
                    .to_lowercase()
            })
            .filter(|w| !w.is_empty())
            .collect()
    }

    /// Word ids without sentinels or padding. Unknown words map to [`UNK`].
    pub fn word_ids(&self, text: &str) -> Result<Vec<u32>> {
        let words = Self::split_words(text);
        if words.is_empty() {
            return Err(Error::Data(format!("cannot tokenize empty text {text:?}")));
        }
        Ok(words
            .iter()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK))
            .collect())
    }

    /// `[BOS, words…, EOS, PAD…]`, exactly `context_length` ids.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let words = self.word_ids(text)?;
        if words.len() + 2 > self.context_length {
            return Err(Error::Length(format!(
                "{text:?} needs {} tokens with sentinels, context length is {}",
                words.len() + 2,
                self.context_length
            )));
        }
        let mut ids = Vec::with_capacity(self.context_length);
        ids.push(BOS);
        ids.extend(words);
        ids.push(EOS);
        ids.resize(self.context_length, PAD);
        Ok(ids)
    }
}
