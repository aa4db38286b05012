//! Training-free gating from expert descriptors.
//!
//! Each expert carries a gate vector `[pooled(positive); pooled(negative)]`.
//! A prompt is scored against every gate vector by dot product, the top `n`
//! scores are kept, and a softmax over those gives the routing weights.
//! One set of weights is computed per prompt and reused at every MoE layer.

use crate::error::{EmoeError, Result};
use crate::math::{softmax, Tensor};
use crate::text::{ExpertDescriptor, GateVector, Prompt, TextEncoder};

/// Sparse routing weights: `selected[k]` carries `weights[k]`; every other
/// expert has weight zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GateWeights {
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
}

impl GateWeights {
    pub fn new(selected: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        if selected.is_empty() || selected.len() != weights.len() {
            return Err(EmoeError::invalid("gate selection and weights must be nonempty and aligned"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(EmoeError::invalid("gate weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(EmoeError::invalid(format!("gate weights sum to {total}, not 1")));
        }
        let mut seen = selected.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != selected.len() {
            return Err(EmoeError::invalid("duplicate expert in gate selection"));
        }
        Ok(Self { selected, weights })
    }

    /// All weight on expert `index`.
    pub fn one_hot(index: usize) -> Self {
        Self {
            selected: vec![index],
            weights: vec![1.0],
        }
    }

    pub fn uniform(m: usize) -> Self {
        Self {
            selected: (0..m).collect(),
            weights: vec![1.0 / m as f64; m],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.selected.iter().copied().zip(self.weights.iter().copied())
    }

    /// Dense weight of expert `i` (zero when unselected).
    pub fn weight_of(&self, i: usize) -> f64 {
        self.iter().find(|(j, _)| *j == i).map_or(0.0, |(_, w)| w)
    }

    pub fn check_experts(&self, m: usize) -> Result<()> {
        if let Some(&bad) = self.selected.iter().find(|&&i| i >= m) {
            return Err(EmoeError::invalid(format!(
                "gate selects expert {bad} but only {m} experts exist"
            )));
        }
        Ok(())
    }
}

/// Top-`n` selection and softmax over raw gate scores. Ties go to the lower
/// index.
pub fn gate_from_scores(alphas: &[f64], n: usize) -> Result<GateWeights> {
    let m = alphas.len();
    if n == 0 || n > m {
        return Err(EmoeError::invalid(format!(
            "top-n must satisfy 1 <= n <= M, got n = {n}, M = {m}"
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| alphas[b].total_cmp(&alphas[a]).then(a.cmp(&b)));
    order.truncate(n);
    let picked: Vec<f64> = order.iter().map(|&i| alphas[i]).collect();
    let weights = softmax(&picked)?;
    Ok(GateWeights {
        selected: order,
        weights,
    })
}

/// Precomputed gate vectors for a bundle of experts.
#[derive(Debug, Clone)]
pub struct Gating {
    encoder: TextEncoder,
    gates: Vec<GateVector>,
}

impl Gating {
    pub fn new(encoder: TextEncoder, descriptors: &[ExpertDescriptor]) -> Result<Self> {
        if descriptors.is_empty() {
            return Err(EmoeError::Empty("expert descriptors"));
        }
        let gates = descriptors
            .iter()
            .map(|d| encoder.gate_vector(d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { encoder, gates })
    }

    pub fn num_experts(&self) -> usize {
        self.gates.len()
    }

    /// Raw scores `α^i = v^i · [pooled(y); pooled(negative)]`.
    pub fn scores(&self, prompt: &Prompt, negative: Option<&Prompt>) -> Result<Vec<f64>> {
        let query: Tensor = self.encoder.gate_query(prompt, negative)?;
        self.gates.iter().map(|g| g.v.dot(&query)).collect()
    }

    pub fn weights(&self, prompt: &Prompt, negative: Option<&Prompt>, n: usize) -> Result<GateWeights> {
        gate_from_scores(&self.scores(prompt, negative)?, n)
    }
}

/// One-shot form of [`Gating::weights`] without a negative prompt.
pub fn compute_gate_weights(
    encoder: &TextEncoder,
    prompt: &Prompt,
    descriptors: &[ExpertDescriptor],
    n: usize,
) -> Result<GateWeights> {
    if n > descriptors.len() {
        return Err(EmoeError::invalid(format!(
            "n = {n} exceeds the number of experts M = {}",
            descriptors.len()
        )));
    }
    Gating::new(*encoder, descriptors)?.weights(prompt, None, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn equal_scores_give_uniform_weights() {
        let g = gate_from_scores(&[0.3; 4], 4).unwrap();
        assert_eq!(g.selected, vec![0, 1, 2, 3]);
        assert!(g.weights.iter().all(|w| (w - 0.25).abs() < 1e-15));
    }

    #[test]
    fn single_selection_has_unit_weight() {
        let g = gate_from_scores(&[0.1, 0.9, 0.5], 1).unwrap();
        assert_eq!(g.selected, vec![1]);
        assert_eq!(g.weights, vec![1.0]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let g = gate_from_scores(&[0.2, 0.7, 0.7, 0.1], 1).unwrap();
        assert_eq!(g.selected, vec![1]);
        let g = gate_from_scores(&[0.5, 0.5, 0.5], 2).unwrap();
        assert_eq!(g.selected, vec![0, 1]);
    }

    #[test]
    fn n_out_of_range() {
        assert!(gate_from_scores(&[1.0, 2.0], 3).is_err());
        assert!(gate_from_scores(&[1.0, 2.0], 0).is_err());
        let enc = TextEncoder::default();
        let ds = vec![ExpertDescriptor::new("red", "blue").unwrap()];
        let p = Prompt::english("a red dot").unwrap();
        assert!(compute_gate_weights(&enc, &p, &ds, 2).is_err());
        let g = compute_gate_weights(&enc, &p, &ds, 1).unwrap();
        assert_eq!(g, GateWeights::one_hot(0));
    }

    #[test]
    fn gate_weights_validation() {
        assert!(GateWeights::new(vec![0, 1], vec![0.5, 0.5]).is_ok());
        assert!(GateWeights::new(vec![0, 1], vec![0.5, 0.6]).is_err());
        assert!(GateWeights::new(vec![0, 0], vec![0.5, 0.5]).is_err());
        assert!(GateWeights::new(vec![], vec![]).is_err());
        assert!(GateWeights::one_hot(3).check_experts(3).is_err());
    }

    #[test]
    fn descriptor_routing_prefers_matching_expert() {
        let enc = TextEncoder::default();
        let ds = vec![
            ExpertDescriptor::new("red square", "blue circle").unwrap(),
            ExpertDescriptor::new("blue circle", "red square").unwrap(),
        ];
        let gating = Gating::new(enc, &ds).unwrap();
        let s = gating.scores(&Prompt::english("red square").unwrap(), None).unwrap();
        assert!(s[0] > s[1], "{s:?}");
    }

    proptest! {
        #[test]
        fn simplex_and_shift_invariance(
            alphas in prop::collection::vec(-5.0f64..5.0, 1..8),
            shift in -20.0f64..20.0,
            n_frac in 0.0f64..1.0,
        ) {
            let m = alphas.len();
            let n = 1 + ((m - 1) as f64 * n_frac) as usize;
            let g = gate_from_scores(&alphas, n).unwrap();
            prop_assert_eq!(g.selected.len(), n);
            prop_assert!(g.weights.iter().all(|w| *w >= 0.0));
            prop_assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = alphas.iter().map(|a| a + shift).collect();
            let h = gate_from_scores(&shifted, n).unwrap();
            // Shifting can only reorder exact floating ties created by rounding.
            let exact_ties = alphas.iter().enumerate().any(|(i, a)| alphas.iter().skip(i + 1).any(|b| (a - b).abs() < 1e-9));
            if !exact_ties {
                prop_assert_eq!(&g.selected, &h.selected);
                for (a, b) in g.weights.iter().zip(&h.weights) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
