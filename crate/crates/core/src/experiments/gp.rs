//! Ensemble-to-Gaussian-process convergence probe.
//!
//! Members are small random tanh networks with weights drawn from one fixed
//! prior. Their outputs at a few probe inputs are compared with a large
//! reference ensemble: the ensemble mean should approach the reference mean
//! at the `N^-1/2` rate and the ensemble variance should approach the
//! reference variance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EmoeError, Result};
use crate::math::RngStream;

pub const REFERENCE_SIZE: usize = 10_000;
const D_IN: usize = 4;
const HIDDEN: usize = 32;
const PROBE_INPUTS: usize = 8;

/// Ensemble mean and variance at each probe input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpEstimate {
    pub mu_hat: Vec<f64>,
    pub k_hat: Vec<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpProbeRow {
    pub n: usize,
    /// Mean over probe inputs of `|mu_N(y) - mu_ref(y)|`.
    pub mean_error: f64,
    /// `sum_y k_N(y) / sum_y k_ref(y)`.
    pub var_ratio: f64,
    /// Mean over probe inputs of `|k_N(y) / k_ref(y) - 1|`.
    pub var_spread: f64,
}

fn probe_inputs(seed: u64) -> Vec<[f64; D_IN]> {
    let mut s = RngStream::new(seed, 0x6970);
    (0..PROBE_INPUTS)
        .map(|_| {
            let v = s.normal_vec(D_IN);
            std::array::from_fn(|i| v[i])
        })
        .collect()
}

/// Outputs of one random network at every probe input.
fn member_outputs(stream: &mut RngStream, inputs: &[[f64; D_IN]]) -> Vec<f64> {
    let w = stream.normal_vec(HIDDEN * D_IN);
    let b = stream.normal_vec(HIDDEN);
    let v = stream.normal_vec(HIDDEN);
    let w_scale = 1.0 / (D_IN as f64).sqrt();
    let v_scale = 1.0 / (HIDDEN as f64).sqrt();
    inputs
        .iter()
        .map(|x| {
            (0..HIDDEN)
                .map(|h| {
                    let pre: f64 = (0..D_IN).map(|i| w[h * D_IN + i] * x[i]).sum::<f64>() * w_scale + b[h];
                    v[h] * pre.tanh()
                })
                .sum::<f64>()
                * v_scale
        })
        .collect()
}

/// Population mean and variance across members, per input.
pub fn ensemble_estimate(members: &[Vec<f64>]) -> Result<GpEstimate> {
    let n = members.len();
    if n == 0 {
        return Err(EmoeError::Empty("ensemble"));
    }
    let dims = members[0].len();
    let mut mu = vec![0.0; dims];
    for m in members {
        for (a, v) in mu.iter_mut().zip(m) {
            *a += v;
        }
    }
    mu.iter_mut().for_each(|a| *a /= n as f64);
    let mut k = vec![0.0; dims];
    for m in members {
        for ((a, v), c) in k.iter_mut().zip(m).zip(&mu) {
            *a += (v - c) * (v - c);
        }
    }
    k.iter_mut().for_each(|a| *a /= n as f64);
    Ok(GpEstimate { mu_hat: mu, k_hat: k, n })
}

fn draw_ensemble(seed: u64, label: u64, n: usize, inputs: &[[f64; D_IN]]) -> Vec<Vec<f64>> {
    let root = RngStream::new(seed, label);
    (0..n)
        .into_par_iter()
        .map(|j| member_outputs(&mut root.child(j as u64), inputs))
        .collect()
}

pub fn compare(estimate: &GpEstimate, reference: &GpEstimate) -> GpProbeRow {
    let p = reference.mu_hat.len() as f64;
    let mean_error = estimate
        .mu_hat
        .iter()
        .zip(&reference.mu_hat)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / p;
    let var_ratio = estimate.k_hat.iter().sum::<f64>() / reference.k_hat.iter().sum::<f64>();
    let var_spread = estimate
        .k_hat
        .iter()
        .zip(&reference.k_hat)
        .map(|(a, b)| (a / b - 1.0).abs())
        .sum::<f64>()
        / p;
    GpProbeRow {
        n: estimate.n,
        mean_error,
        var_ratio,
        var_spread,
    }
}

/// One row per ensemble size, each ensemble drawn independently of the
/// reference.
pub fn gp_convergence_probe(n_values: &[usize], seed: u64) -> Result<Vec<GpProbeRow>> {
    if n_values.is_empty() {
        return Err(EmoeError::Empty("ensemble sizes"));
    }
    if let Some(&bad) = n_values.iter().find(|&&n| n < 2) {
        return Err(EmoeError::invalid(format!("ensemble size {bad} < 2")));
    }
    let inputs = probe_inputs(seed);
    let reference = ensemble_estimate(&draw_ensemble(seed, 0x7ef, REFERENCE_SIZE, &inputs))?;
    n_values
        .iter()
        .map(|&n| {
            let members = draw_ensemble(seed, 0x1_0000 + n as u64, n, &inputs);
            Ok(compare(&ensemble_estimate(&members)?, &reference))
        })
        .collect()
}

/// Median of each column across seeds, row by row.
pub fn median_rows(per_seed: &[Vec<GpProbeRow>]) -> Result<Vec<GpProbeRow>> {
    let first = per_seed.first().ok_or(EmoeError::Empty("probe runs"))?;
    first
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let col = |f: fn(&GpProbeRow) -> f64| median(per_seed.iter().map(|r| f(&r[i])).collect());
            Ok(GpProbeRow {
                n: row.n,
                mean_error: col(|r| r.mean_error),
                var_ratio: col(|r| r.var_ratio),
                var_spread: col(|r| r.var_spread),
            })
        })
        .collect()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(EmoeError::invalid("slope needs two or more paired points"));
    }
    if x.iter().chain(y).any(|v| *v <= 0.0) {
        return Err(EmoeError::invalid("log-log slope needs positive values"));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    Ok(sxy / sxx)
}
