use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, fnv1a64, Rng};
use crate::tensor::Tensor;

/// Frozen prompt embedding `[text_len × C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTokens {
    pub tokens: Tensor,
    pub prompt_id: String,
    /// Rows that came from words rather than padding.
    pub used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextStub {
    pub seed: u64,
    pub width: usize,
    pub text_len: usize,
}

fn unit_vector(seed: u64, width: usize) -> Vec<f64> {
    let mut rng = Rng::seeded(seed);
    let v: Vec<f64> = (0..width).map(|_| rng.normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Stable identifier of a prompt string.
pub fn prompt_id(prompt: &str) -> String {
    format!("{:016x}", fnv1a64(prompt.as_bytes()))
}

/// Whitespace-separated words, lowercased.
pub fn words(prompt: &str) -> Vec<String> {
    prompt.split_whitespace().map(str::to_lowercase).collect()
}

/// Unit vector in `R^width` for one word: FNV-1a 64 of the word XOR the seed
/// picks a ChaCha8 stream of normal draws, normalised to length one.
pub fn word_vector(word: &str, seed: u64, width: usize) -> Vec<f64> {
    unit_vector(fnv1a64(word.as_bytes()) ^ seed, width)
}

impl TextStub {
    /// One row per word up to `text_len`, remaining rows the pad vector.
    pub fn embed(&self, prompt: &str) -> Result<PromptTokens> {
        let ws = words(prompt);
        if ws.is_empty() {
            return Err(Error::Input("empty prompt".into()));
        }
        let pad = unit_vector(derive_seed(self.seed, "text/pad"), self.width);
        let used = ws.len().min(self.text_len);
        let mut data = Vec::with_capacity(self.text_len * self.width);
        for r in 0..self.text_len {
            let row = if r < used {
                word_vector(&ws[r], self.seed, self.width)
            } else {
                pad.clone()
            };
            data.extend(row.into_iter().map(|x| x as f32));
        }
        Ok(PromptTokens {
            tokens: Tensor::new([self.text_len, self.width], data)?,
            prompt_id: prompt_id(prompt),
            used,
        })
    }

    /// Mean of the word vectors, used as a fixed-length sentence embedding.
    pub fn pooled(&self, prompt: &str) -> Result<Vec<f64>> {
        let ws = words(prompt);
        if ws.is_empty() {
            return Err(Error::Input("empty prompt".into()));
        }
        let mut acc = vec![0.0; self.width];
        for w in &ws {
            for (a, x) in acc.iter_mut().zip(word_vector(w, self.seed, self.width)) {
                *a += x;
            }
        }
        let n = ws.len() as f64;
        Ok(acc.into_iter().map(|a| a / n).collect())
    }
}
