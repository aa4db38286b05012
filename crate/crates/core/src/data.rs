//! Synthetic prompt grammar and its ground-truth latent generator.
//!
//! Prompts follow `a {color} {shape} {modifier...}` over a fixed 20-word
//! vocabulary. Colour picks channel amplitudes, shape picks the centre and
//! width of a Gaussian bump on the latent grid, and modifiers scale or shift
//! it. Clean training latents are the bump plus a little isotropic noise.

use serde::{Deserialize, Serialize};

use crate::error::{EmoeError, Result};
use crate::math::{gaussian, RngStream, Tensor};
use crate::text::{words, Prompt};
use crate::unet::Geometry;

pub const ARTICLE: &str = "a";
pub const COLORS: [&str; 5] = ["red", "green", "blue", "yellow", "purple"];
pub const SHAPES: [&str; 6] = ["square", "circle", "triangle", "cross", "ring", "dot"];
pub const MODIFIERS: [&str; 8] = ["big", "small", "left", "right", "top", "bottom", "bright", "dim"];

/// Words that never occur in training prompts.
pub const UNSEEN_WORDS: [&str; 16] = [
    "zorp", "quix", "blen", "vark", "mott", "frel", "gwin", "shup", "trox", "dwel", "yimp", "klov", "prag",
    "snib", "fump", "werl",
];

/// Standard deviation of the per-sample noise around the prompt's mean latent.
pub const DATA_NOISE: f64 = 0.01;

pub fn vocabulary() -> Vec<&'static str> {
    let mut v = vec![ARTICLE];
    v.extend(COLORS);
    v.extend(SHAPES);
    v.extend(MODIFIERS);
    v
}

fn color_amplitudes(color: &str) -> [f64; 2] {
    match color {
        "red" => [1.0, 0.0],
        "green" => [0.0, 1.0],
        "blue" => [0.0, -1.0],
        "yellow" => [0.7, 0.7],
        _ => [0.7, -0.7],
    }
}

/// Centre (row, col) and width on an 8×8 grid.
fn shape_bump(shape: &str) -> (f64, f64, f64) {
    match shape {
        "square" => (2.0, 2.0, 1.2),
        "circle" => (2.0, 5.0, 1.2),
        "triangle" => (5.0, 2.0, 1.2),
        "cross" => (5.0, 5.0, 1.2),
        "ring" => (3.5, 3.5, 2.0),
        _ => (3.5, 3.5, 0.7),
    }
}

/// Parsed meaning of a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Semantics {
    pub color: String,
    pub shape: String,
    pub modifiers: Vec<String>,
}

impl Semantics {
    /// Reads colour, shape and modifiers from the prompt text. Unknown words
    /// are ignored; the text is read in its original language, so remapped
    /// prompts parse to the same meaning as their source.
    pub fn parse(prompt: &Prompt) -> Result<Self> {
        let ws = words(&prompt.text);
        let color = ws.iter().find(|w| COLORS.contains(&w.as_str()));
        let shape = ws.iter().find(|w| SHAPES.contains(&w.as_str()));
        match (color, shape) {
            (Some(c), Some(s)) => Ok(Self {
                color: c.clone(),
                shape: s.clone(),
                modifiers: ws
                    .iter()
                    .filter(|w| MODIFIERS.contains(&w.as_str()))
                    .cloned()
                    .collect(),
            }),
            _ => Err(EmoeError::UnparseablePrompt(prompt.text.clone())),
        }
    }

    /// Noise-free latent of this prompt.
    pub fn mean_latent(&self, g: &Geometry) -> Tensor {
        let [a0, a1] = color_amplitudes(&self.color);
        let (mut ci, mut cj, mut width) = shape_bump(&self.shape);
        let mut amp = 1.5;
        for m in &self.modifiers {
            match m.as_str() {
                "big" => width *= 1.5,
                "small" => width *= 0.6,
                "left" => cj -= 1.5,
                "right" => cj += 1.5,
                "top" => ci -= 1.5,
                "bottom" => ci += 1.5,
                "bright" => amp *= 1.5,
                _ => amp *= 0.6,
            }
        }
        // bump positions are authored on an 8x8 grid
        let si = g.height as f64 / 8.0;
        let sj = g.width as f64 / 8.0;
        let (ci, cj, wi, wj) = (ci * si, cj * sj, width * si, width * sj);
        let mut data = Vec::with_capacity(g.latent_len());
        for c in 0..g.channels {
            let a = amp * if c % 2 == 0 { a0 } else { a1 };
            for i in 0..g.height {
                for j in 0..g.width {
                    let di = (i as f64 - ci) / wi;
                    let dj = (j as f64 - cj) / wj;
                    data.push(a * (-0.5 * (di * di + dj * dj)).exp());
                }
            }
        }
        Tensor::from_parts(g.latent_shape().to_vec(), data)
    }
}

/// Ground-truth mean latent for a prompt.
pub fn true_mean_latent(prompt: &Prompt, g: &Geometry) -> Result<Tensor> {
    Ok(Semantics::parse(prompt)?.mean_latent(g))
}

/// A random in-vocabulary prompt with 0–2 distinct modifiers.
pub fn random_prompt_text(stream: &mut RngStream) -> String {
    let color = COLORS[stream.range(0, COLORS.len())];
    let shape = SHAPES[stream.range(0, SHAPES.len())];
    let n_mod = stream.range(0, 3);
    let mut text = format!("{ARTICLE} {color} {shape}");
    let mut used: Vec<&str> = Vec::new();
    while used.len() < n_mod {
        let m = MODIFIERS[stream.range(0, MODIFIERS.len())];
        if !used.contains(&m) {
            used.push(m);
            text.push(' ');
            text.push_str(m);
        }
    }
    text
}

/// A clean latent drawn around the prompt's mean.
pub fn sample_latent(prompt: &Prompt, g: &Geometry, stream: &mut RngStream) -> Result<Tensor> {
    let mean = true_mean_latent(prompt, g)?;
    let noise = gaussian(stream, &g.latent_shape())?;
    mean.zip_map(&noise, |m, e| m + DATA_NOISE * e)
}

/// Training pool of `(prompt, latent)` pairs, partitioned into `slices`
/// disjoint slices by index.
pub fn training_slices(
    g: &Geometry,
    pool_size: usize,
    slices: usize,
    seed: u64,
) -> Result<Vec<Vec<(Prompt, Tensor)>>> {
    if pool_size == 0 || slices == 0 || pool_size < slices {
        return Err(EmoeError::invalid("training pool must hold at least one example per slice"));
    }
    let mut stream = RngStream::new(seed, 0xda7a);
    let mut out = vec![Vec::new(); slices];
    for i in 0..pool_size {
        let prompt = Prompt::english(random_prompt_text(&mut stream))?;
        let x0 = sample_latent(&prompt, g, &mut stream)?;
        out[i % slices].push((prompt, x0));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::REMAP_TAG;

    #[test]
    fn vocabulary_has_twenty_words() {
        let v = vocabulary();
        assert_eq!(v.len(), 20);
        let mut d = v.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 20);
        assert!(UNSEEN_WORDS.iter().all(|w| !v.contains(w)));
    }

    #[test]
    fn parse_reads_meaning_and_ignores_unknown_words() {
        let p = Prompt::english("a zorp Red circle big").unwrap();
        let s = Semantics::parse(&p).unwrap();
        assert_eq!(s.color, "red");
        assert_eq!(s.shape, "circle");
        assert_eq!(s.modifiers, vec!["big"]);
        let remapped = Prompt::new("a red circle big", REMAP_TAG).unwrap();
        assert_eq!(Semantics::parse(&remapped).unwrap(), s);
        assert!(Semantics::parse(&Prompt::english("a red thing").unwrap()).is_err());
    }

    #[test]
    fn bump_peaks_at_shape_centre() {
        let g = Geometry::default();
        let m = true_mean_latent(&Prompt::english("a red square").unwrap(), &g).unwrap();
        let ch0 = &m.data()[..64];
        let argmax = (0..64).max_by(|&a, &b| ch0[a].total_cmp(&ch0[b])).unwrap();
        assert_eq!(argmax, 2 * 8 + 2);
        assert!(m.data()[64..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn random_prompts_are_in_vocabulary() {
        let v = vocabulary();
        let mut s = RngStream::new(1, 1);
        for _ in 0..200 {
            let t = random_prompt_text(&mut s);
            assert!(t.split_whitespace().all(|w| v.contains(&w)), "{t}");
            Semantics::parse(&Prompt::english(t).unwrap()).unwrap();
        }
    }

    #[test]
    fn slices_are_disjoint_partition() {
        let g = Geometry::default();
        let s = training_slices(&g, 10, 4, 3).unwrap();
        assert_eq!(s.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 2, 2]);
        let again = training_slices(&g, 10, 4, 3).unwrap();
        assert_eq!(s[1][0].1, again[1][0].1);
    }
}
