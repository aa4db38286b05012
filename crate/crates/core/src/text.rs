//! Deterministic stand-in for the conditioning text encoder.
//!
//! Tokens are hashed with FNV-1a; each token id seeds its own random stream
//! from which a unit-norm embedding row is drawn. A prompt tagged with a
//! remapped language XORs every id with a fixed key, which lands it in a
//! vocabulary the experts never saw.

use serde::{Deserialize, Serialize};

use crate::error::{EmoeError, Result};
use crate::math::{mix64, RngStream, Tensor};

pub const ENGLISH: &str = "en";
pub const REMAP_TAG: &str = "xx-remap";
const REMAP_KEY: u64 = 0x5bd1_e995_c3a5_c85c;
const EMBED_ROOT_SEED: u64 = 0x7e57_e4c0_de00_0001;
const EMPTY_TOKEN: &str = "<empty>";

pub const DEFAULT_D_TXT: usize = 16;
pub const DEFAULT_MAX_TOKENS: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub language_tag: String,
}

impl Prompt {
    pub fn new(text: impl Into<String>, language_tag: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(EmoeError::Empty("prompt text"));
        }
        Ok(Self {
            text,
            language_tag: language_tag.into(),
        })
    }

    pub fn english(text: impl Into<String>) -> Result<Self> {
        Self::new(text, ENGLISH)
    }

    pub fn is_remapped(&self) -> bool {
        self.language_tag.starts_with(REMAP_TAG)
    }

    /// Stable 64-bit identity of (text, language tag).
    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.language_tag.as_bytes()) ^ mix64(fnv1a(self.text.as_bytes()))
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// XOR key applied to ids for a language tag; zero for untouched languages.
fn remap_key(tag: &str) -> u64 {
    match tag.strip_prefix(REMAP_TAG) {
        Some("") => REMAP_KEY,
        Some(suffix) => REMAP_KEY ^ mix64(fnv1a(suffix.as_bytes())),
        None => 0,
    }
}

/// Lowercased words of `text`, split on whitespace and punctuation.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn token_id(word: &str) -> u64 {
    fnv1a(word.as_bytes())
}

pub fn tokenize(prompt: &Prompt) -> Result<Vec<u64>> {
    let ws = words(&prompt.text);
    if ws.is_empty() {
        return Err(EmoeError::Empty("prompt has no tokens"));
    }
    let key = remap_key(&prompt.language_tag);
    Ok(ws.iter().map(|w| token_id(w) ^ key).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    /// `L × d_txt`, one unit-norm row per token.
    pub tokens: Tensor,
    /// Mean of the token rows.
    pub pooled: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertDescriptor {
    pub positive: String,
    pub negative: String,
}

impl ExpertDescriptor {
    pub fn new(positive: impl Into<String>, negative: impl Into<String>) -> Result<Self> {
        let positive = positive.into();
        let negative = negative.into();
        if positive.trim().is_empty() || negative.trim().is_empty() {
            return Err(EmoeError::Empty("expert descriptor"));
        }
        Ok(Self { positive, negative })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateVector {
    pub v: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub d_txt: usize,
    pub max_tokens: usize,
}

impl Default for TextEncoder {
    fn default() -> Self {
        Self {
            d_txt: DEFAULT_D_TXT,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

impl TextEncoder {
    pub fn new(d_txt: usize, max_tokens: usize) -> Self {
        Self { d_txt, max_tokens }
    }

    fn token_row(&self, id: u64) -> Vec<f64> {
        let mut row = RngStream::new(EMBED_ROOT_SEED, id).normal_vec(self.d_txt);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut row {
            *v /= norm;
        }
        row
    }

    /// Embeds up to `max_tokens` ids; longer sequences are truncated.
    pub fn embed(&self, ids: &[u64]) -> Result<PromptEmbedding> {
        if ids.is_empty() {
            return Err(EmoeError::Empty("token ids"));
        }
        let ids = &ids[..ids.len().min(self.max_tokens)];
        let mut data = Vec::with_capacity(ids.len() * self.d_txt);
        for &id in ids {
            data.extend(self.token_row(id));
        }
        let tokens = Tensor::from_parts(vec![ids.len(), self.d_txt], data);
        let pooled = tokens.mean_rows()?;
        Ok(PromptEmbedding { tokens, pooled })
    }

    pub fn encode(&self, prompt: &Prompt) -> Result<PromptEmbedding> {
        self.embed(&tokenize(prompt)?)
    }

    fn pooled_text(&self, text: &str) -> Result<Tensor> {
        Ok(self.encode(&Prompt::english(text)?)?.pooled)
    }

    /// Pooled embedding of the canonical empty negative prompt.
    pub fn empty_negative(&self) -> Tensor {
        Tensor::from_parts(vec![self.d_txt], self.token_row(token_id(EMPTY_TOKEN)))
    }

    pub fn gate_vector(&self, descriptor: &ExpertDescriptor) -> Result<GateVector> {
        let p = self.pooled_text(&descriptor.positive)?;
        let n = self.pooled_text(&descriptor.negative)?;
        Ok(GateVector {
            v: concat(&p, &n),
        })
    }

    /// `[pooled(y); pooled(negative)]`, the query side of the gate dot product.
    /// Without a negative prompt the canonical empty token stands in.
    pub fn gate_query(&self, prompt: &Prompt, negative: Option<&Prompt>) -> Result<Tensor> {
        let pos = self.encode(prompt)?.pooled;
        let neg = match negative {
            Some(n) => self.encode(n)?.pooled,
            None => self.empty_negative(),
        };
        Ok(concat(&pos, &neg))
    }
}

fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::from_parts(vec![data.len()], data)
}
