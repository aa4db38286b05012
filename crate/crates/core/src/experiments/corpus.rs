//! Synthetic evaluation corpus and the alignment proxy.
//!
//! In-distribution prompts are fresh draws from the training grammar.
//! `ood_remap` prompts carry the same kind of text under the remapped
//! language tag, so every token id falls outside the training vocabulary.
//! `ood_unseen_token` prompts replace one or more content words with words
//! that never occur in training; they are scored against the prompt they
//! were derived from.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{random_prompt_text, true_mean_latent, UNSEEN_WORDS};
use crate::error::{EmoeError, Result};
use crate::math::{RngStream, Tensor};
use crate::text::{Prompt, REMAP_TAG};
use crate::unet::Geometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    InDist,
    OodRemap,
    OodUnseenToken,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::InDist, Split::OodRemap, Split::OodUnseenToken];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::InDist => "in_dist",
            Split::OodRemap => "ood_remap",
            Split::OodUnseenToken => "ood_unseen_token",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = EmoeError;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| EmoeError::invalid(format!("unknown split {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub in_dist: usize,
    pub ood_remap: usize,
    pub ood_unseen_token: usize,
    /// Unseen-token prompts replace between 1 and this many content words.
    pub max_substitutions: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            in_dist: 200,
            ood_remap: 200,
            ood_unseen_token: 200,
            max_substitutions: 3,
        }
    }
}

impl CorpusConfig {
    pub fn total(&self) -> usize {
        self.in_dist + self.ood_remap + self.ood_unseen_token
    }

    pub fn validate(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(EmoeError::Config("corpus size must be at least 1".into()));
        }
        if self.ood_unseen_token > 0 && self.max_substitutions == 0 {
            return Err(EmoeError::Config("max_substitutions must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub prompt: Prompt,
    pub split: Split,
    /// Text the prompt was derived from; its meaning is the scoring target.
    pub source: String,
}

impl CorpusEntry {
    /// Prompt whose true mean latent the generated sample is scored against.
    pub fn source_prompt(&self) -> Result<Prompt> {
        Prompt::english(self.source.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CorpusEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Replaces `count` distinct content words (never the leading article) with
/// unseen words.
pub fn substitute_unseen(text: &str, count: usize, stream: &mut RngStream) -> String {
    let mut ws: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    let mut positions: Vec<usize> = (1..ws.len()).collect();
    for _ in 0..count.min(positions.len()) {
        let pos = positions.swap_remove(stream.range(0, positions.len()));
        ws[pos] = UNSEEN_WORDS[stream.range(0, UNSEEN_WORDS.len())].to_string();
    }
    ws.join(" ")
}

pub fn make_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let mut entries = Vec::with_capacity(config.total());
    let mut stream = RngStream::new(seed, 0xc0_4905);
    for _ in 0..config.in_dist {
        let text = random_prompt_text(&mut stream);
        entries.push(CorpusEntry {
            prompt: Prompt::english(text.clone())?,
            split: Split::InDist,
            source: text,
        });
    }
    for _ in 0..config.ood_remap {
        let text = random_prompt_text(&mut stream);
        entries.push(CorpusEntry {
            prompt: Prompt::new(text.clone(), REMAP_TAG)?,
            split: Split::OodRemap,
            source: text,
        });
    }
    for _ in 0..config.ood_unseen_token {
        let text = random_prompt_text(&mut stream);
        let k = stream.range(1, config.max_substitutions + 1);
        entries.push(CorpusEntry {
            prompt: Prompt::english(substitute_unseen(&text, k, &mut stream))?,
            split: Split::OodUnseenToken,
            source: text,
        });
    }
    Ok(Corpus { entries })
}

/// Negative squared distance between `z0` and the true mean latent of
/// `prompt`. Zero is perfect alignment.
pub fn alignment_score(z0: &Tensor, prompt: &Prompt, g: &Geometry) -> Result<f64> {
    let mean = true_mean_latent(prompt, g)?;
    Ok(-z0.sub(&mean)?.norm_sq())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::vocabulary;
    use crate::math::gaussian;
    use crate::text::{token_id, tokenize};

    #[test]
    fn corpus_is_deterministic_and_sized() {
        let c = CorpusConfig { in_dist: 5, ood_remap: 4, ood_unseen_token: 3, max_substitutions: 2 };
        let a = make_corpus(&c, 1).unwrap();
        assert_eq!(a, make_corpus(&c, 1).unwrap());
        assert_ne!(a, make_corpus(&c, 2).unwrap());
        assert_eq!(a.len(), 12);
        assert_eq!(a.split(Split::OodRemap).count(), 4);
        let zero = CorpusConfig { in_dist: 0, ood_remap: 0, ood_unseen_token: 0, max_substitutions: 1 };
        assert!(make_corpus(&zero, 1).is_err());
    }

    #[test]
    fn splits_have_their_defining_property() {
        let corpus = make_corpus(&CorpusConfig::default(), 3).unwrap();
        let vocab = vocabulary();
        let train_ids: Vec<u64> = vocab.iter().map(|w| token_id(w)).collect();
        for e in &corpus.entries {
            match e.split {
                Split::InDist => {
                    assert!(e.prompt.text.split_whitespace().all(|w| vocab.contains(&w)));
                    assert_eq!(e.prompt.text, e.source);
                }
                Split::OodRemap => {
                    let ids = tokenize(&e.prompt).unwrap();
                    assert!(ids.iter().all(|id| !train_ids.contains(id)));
                }
                Split::OodUnseenToken => {
                    let unseen = e.prompt.text.split_whitespace().filter(|w| UNSEEN_WORDS.contains(w)).count();
                    assert!((1..=3).contains(&unseen), "{}", e.prompt.text);
                    assert_eq!(
                        e.prompt.text.split_whitespace().count(),
                        e.source.split_whitespace().count()
                    );
                }
            }
            e.source_prompt().and_then(|p| true_mean_latent(&p, &Geometry::default())).unwrap();
        }
    }

    #[test]
    fn substitution_keeps_article() {
        let mut s = RngStream::new(1, 1);
        for k in 0..5 {
            let t = substitute_unseen("a red dot big", k, &mut s);
            assert!(t.starts_with("a "));
            assert_eq!(t.split_whitespace().filter(|w| UNSEEN_WORDS.contains(w)).count(), k.min(3));
        }
    }

    #[test]
    fn alignment_examples() {
        let g = Geometry::default();
        let p = Prompt::english("a blue ring").unwrap();
        let mean = true_mean_latent(&p, &g).unwrap();
        assert_eq!(alignment_score(&mean, &p, &g).unwrap(), 0.0);
        let dir = gaussian(&mut RngStream::new(2, 2), &g.latent_shape()).unwrap();
        let mut last = 0.0;
        for k in 1..6 {
            let z = mean.add(&dir.scale(k as f64 * 0.1)).unwrap();
            let s = alignment_score(&z, &p, &g).unwrap();
            assert!(s < last);
            last = s;
        }
        let mut s = RngStream::new(3, 3);
        for _ in 0..1000 {
            let z = gaussian(&mut s, &g.latent_shape()).unwrap();
            assert!(alignment_score(&z, &p, &g).unwrap() < 0.0);
        }
        assert!(alignment_score(&mean, &Prompt::english("a thing").unwrap(), &g).is_err());
    }
}
