//! Token embeddings for prompts.
//!
//! Prompts are sequences of token ids. Each id maps to a fixed, seeded,
//! unit-norm row of a random table; the trainable text projection sits on
//! top of these rows.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::gaussian_matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenTable {
    rows: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenTableSpec {
    pub vocab_size: usize,
    pub dim: usize,
    pub seed: u64,
}

impl TokenTable {
    pub fn new(spec: TokenTableSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut rows = gaussian_matrix(&mut rng, spec.vocab_size, spec.dim, 1.0);
        for mut r in rows.rows_mut() {
            let n = r.dot(&r).sqrt();
            r /= n;
        }
        Self { rows }
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn vocab_size(&self) -> usize {
        self.rows.nrows()
    }

    pub fn embed(&self, tokens: &[usize]) -> Result<TextPrompt> {
        if tokens.is_empty() {
            return Err(Error::InvalidSpec("prompt has no tokens".into()));
        }
        let mut emb = Array2::zeros((tokens.len(), self.dim()));
        for (k, &tok) in tokens.iter().enumerate() {
            if tok >= self.vocab_size() {
                return Err(Error::InvalidSpec(format!("token {tok} outside vocabulary of {}", self.vocab_size())));
            }
            emb.row_mut(k).assign(&self.rows.row(tok));
        }
        Ok(TextPrompt { token_ids: tokens.to_vec(), embeddings: emb })
    }
}

/// Names for behavior tokens, in id order; behaviors beyond the list are named `b<id>`.
pub const BEHAVIOR_WORDS: [&str; 12] = ["walk", "run", "jump", "turn", "sit", "crawl", "wave", "kick", "spin", "crouch", "climb", "roll"];

/// Word for the clause separator token.
pub const SEPARATOR_WORD: &str = "then";

/// Whitespace tokenizer over behavior names plus the separator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    /// `n` behaviors with ids `0..n`, separator `n`.
    pub fn for_behaviors(n: usize) -> Self {
        let mut words: Vec<String> = (0..n).map(|i| BEHAVIOR_WORDS.get(i).map_or_else(|| format!("b{i}"), |w| w.to_string())).collect();
        words.push(SEPARATOR_WORD.to_string());
        Self { words }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let tokens = text
            .split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                self.words.iter().position(|v| *v == w).ok_or_else(|| Error::InvalidSpec(format!("unknown word {w:?}; known: {}", self.words.join(" "))))
            })
            .collect::<Result<Vec<_>>>()?;
        if tokens.is_empty() {
            return Err(Error::InvalidSpec("empty prompt".into()));
        }
        Ok(tokens)
    }

    pub fn detokenize(&self, tokens: &[usize]) -> String {
        tokens.iter().map(|&t| self.words.get(t).map_or("?", String::as_str)).collect::<Vec<_>>().join(" ")
    }
}

/// A tokenized prompt with its `[K × d_text]` embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TextPrompt {
    pub token_ids: Vec<usize>,
    pub embeddings: Array2<f64>,
}

impl TextPrompt {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn vocabulary_round_trip() {
        let v = super::Vocabulary::for_behaviors(13);
        let t = v.tokenize("Walk then b12  then sit").unwrap();
        assert_eq!(t, vec![0, 13, 12, 13, 4]);
        assert_eq!(v.detokenize(&t), "walk then b12 then sit");
        assert!(v.tokenize("fly").is_err());
        assert!(v.tokenize("  ").is_err());
    }

    use super::*;

    #[test]
    fn rows_are_unit_and_seeded() {
        let spec = TokenTableSpec { vocab_size: 9, dim: 32, seed: 4 };
        let a = TokenTable::new(spec);
        assert_eq!(a, TokenTable::new(spec));
        let p = a.embed(&[0, 3, 8]).unwrap();
        for r in p.embeddings.rows() {
            assert!((r.dot(&r) - 1.0).abs() < 1e-12);
        }
        assert!(a.embed(&[9]).is_err());
        assert!(a.embed(&[]).is_err());
    }
}
