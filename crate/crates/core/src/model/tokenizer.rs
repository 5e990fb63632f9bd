// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::TokenId;

/// Full toy alphabet. Capital letters come first so that any vocabulary of
/// size ≥ 4 covers the choice tokens `A`–`D`.
fn full_alphabet() -> Vec<char> {
    let mut chars: Vec<char> = ('A'..='Z').collect();
    chars.extend('a'..='z');
    chars.extend('0'..='9');
    chars.push(' ');
    chars.extend((0x21u8..=0x7e).map(char::from).filter(|c| !c.is_ascii_alphanumeric()));
    chars.push('\n');
    chars.extend(['\u{2019}', '\u{2018}', '\u{201c}', '\u{201d}', '\u{2013}', '\u{2014}', '\u{2026}']);
    chars
}

/// Character-level tokenizer: one token per Unicode scalar value.
#[derive(Debug, Clone)]
pub struct CharTokenizer {
    symbols: Vec<char>,
    ids: HashMap<char, TokenId>,
}

impl CharTokenizer {
    /// Largest supported vocabulary.
    pub fn max_vocab() -> usize {
        full_alphabet().len()
    }

    pub fn new(vocab_size: usize) -> Result<Self> {
        let mut symbols = full_alphabet();
        if vocab_size == 0 || vocab_size > symbols.len() {
            return Err(Error::InvalidConfig(format!(
                "toy vocab_size must be in 1..={}, got {vocab_size}",
                symbols.len()
            )));
        }
        symbols.truncate(vocab_size);
        let ids = symbols
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as TokenId))
            .collect();
        Ok(Self { symbols, ids })
    }

    pub fn vocab_size(&self) -> usize {
        self.symbols.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.char_indices()
            .map(|(offset, c)| {
                self.ids
                    .get(&c)
                    .copied()
                    .ok_or(Error::UnknownSymbol { symbol: c, offset })
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[TokenId]) -> Result<String> {
        tokens
            .iter()
            .map(|&t| {
                self.symbols
                    .get(t as usize)
                    .copied()
                    .ok_or(Error::UnknownToken(t))
            })
            .collect()
    }
}
