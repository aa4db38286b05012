//! Trend and significance tests used by the experiment reports.

use serde::{Deserialize, Serialize};

use crate::error::{EmoeError, Result};

/// Largest pooled sample for which the JT null distribution is enumerated
/// exactly. Beyond it, or with ties, the normal approximation is used.
pub const JT_EXACT_MAX_N: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendTestResult {
    pub test: String,
    pub statistic: f64,
    pub z_score: Option<f64>,
    /// Welch–Satterthwaite degrees of freedom, for t tests.
    pub df: Option<f64>,
    pub p_value: f64,
    /// `"exact"` or `"normal"` for JT, `"t"` for Welch.
    pub method: String,
}

/// Count of ascending cross-group pairs, ties counted as one half.
pub fn jt_statistic(groups: &[Vec<f64>]) -> Result<f64> {
    check_groups(groups)?;
    let sorted: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let mut g = g.clone();
            g.sort_by(f64::total_cmp);
            g
        })
        .collect();
    let mut twice = 0u64;
    for (k, gk) in groups.iter().enumerate() {
        for gl in &sorted[k + 1..] {
            for &a in gk {
                let below_or_eq = gl.partition_point(|&b| b <= a);
                let below = gl.partition_point(|&b| b < a);
                twice += 2 * (gl.len() - below_or_eq) as u64 + (below_or_eq - below) as u64;
            }
        }
    }
    Ok(twice as f64 / 2.0)
}

fn check_groups(groups: &[Vec<f64>]) -> Result<()> {
    if groups.len() < 2 {
        return Err(EmoeError::invalid("JT test needs at least two groups"));
    }
    if groups.iter().any(Vec::is_empty) {
        return Err(EmoeError::Empty("JT group"));
    }
    if groups.iter().flatten().any(|v| !v.is_finite()) {
        return Err(EmoeError::invalid("JT samples must be finite"));
    }
    Ok(())
}

/// Jonckheere–Terpstra test against an increasing trend across the groups
/// in the order given. The p-value is `P(JT >= observed)` under the null.
///
/// Tie-free samples with `N <= JT_EXACT_MAX_N` use the exact null
/// distribution. Tied samples use full enumeration of group assignments when
/// there are at most [`JT_ENUMERATION_LIMIT`] of them. Everything else uses
/// the normal approximation with the classical no-tie variance, which is
/// also what `z_score` reports.
pub fn jonckheere_terpstra(groups: &[Vec<f64>]) -> Result<TrendTestResult> {
    let stat = jt_statistic(groups)?;
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let n: usize = sizes.iter().sum();
    let nf = n as f64;
    let sum_sq: f64 = sizes.iter().map(|&m| (m * m) as f64).sum();
    let mean = (nf * nf - sum_sq) / 4.0;

    let var = (nf * nf * (2.0 * nf + 3.0) - sizes.iter().map(|&m| (m * m) as f64 * (2.0 * m as f64 + 3.0)).sum::<f64>())
        / 72.0;
    let z = if var > 0.0 { (stat - mean) / var.sqrt() } else { 0.0 };

    let mut pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    pooled.sort_by(f64::total_cmp);
    let tied = pooled.windows(2).any(|w| w[0] == w[1]);
    let (p, method) = if !tied && n <= JT_EXACT_MAX_N {
        (jt_exact_sf(&sizes, stat.round() as usize), "exact")
    } else if tied && assignments(&sizes) <= JT_ENUMERATION_LIMIT {
        (jt_enumerated_sf(&pooled, &sizes, stat), "permutation")
    } else {
        (normal_sf(z), "normal")
    };
    Ok(TrendTestResult {
        test: "jonckheere_terpstra".into(),
        statistic: stat,
        z_score: Some(z),
        df: None,
        p_value: p.clamp(0.0, 1.0),
        method: method.into(),
    })
}

/// Largest number of distinct group assignments enumerated for tied samples.
pub const JT_ENUMERATION_LIMIT: u128 = 200_000;

/// Multinomial coefficient `N! / (n_1! ... n_k!)`, saturating.
fn assignments(sizes: &[usize]) -> u128 {
    let mut total = 1u128;
    let mut placed = 0u128;
    for &m in sizes {
        for i in 1..=m as u128 {
            placed += 1;
            total = total.saturating_mul(placed) / i;
        }
    }
    total
}

/// `P(JT >= observed)` over every assignment of the pooled values to groups
/// of the given sizes.
fn jt_enumerated_sf(pooled: &[f64], sizes: &[usize], observed: f64) -> f64 {
    fn walk(i: usize, pooled: &[f64], left: &mut [usize], groups: &mut [Vec<f64>], tally: &mut (u64, u64), obs: f64) {
        if i == pooled.len() {
            tally.1 += 1;
            if jt_statistic(groups).is_ok_and(|s| s >= obs) {
                tally.0 += 1;
            }
            return;
        }
        // every labelling of the sorted positions is equally likely under the null
        for g in 0..left.len() {
            if left[g] == 0 {
                continue;
            }
            left[g] -= 1;
            groups[g].push(pooled[i]);
            walk(i + 1, pooled, left, groups, tally, obs);
            groups[g].pop();
            left[g] += 1;
        }
    }
    let mut left = sizes.to_vec();
    let mut groups: Vec<Vec<f64>> = sizes.iter().map(|&m| Vec::with_capacity(m)).collect();
    let mut tally = (0u64, 0u64);
    walk(0, pooled, &mut left, &mut groups, &mut tally, observed);
    tally.0 as f64 / tally.1 as f64
}

/// JT test against a decreasing trend: the groups are reversed and the
/// increasing test applied.
pub fn jonckheere_terpstra_decreasing(groups: &[Vec<f64>]) -> Result<TrendTestResult> {
    let reversed: Vec<Vec<f64>> = groups.iter().rev().cloned().collect();
    let mut r = jonckheere_terpstra(&reversed)?;
    r.test = "jonckheere_terpstra_decreasing".into();
    Ok(r)
}

/// Null distribution of the tie-free JT statistic: the coefficients of the
/// q-multinomial `[N; n_1, ..., n_k]_q`, counted in `i128`.
pub fn jt_null_counts(sizes: &[usize]) -> Vec<i128> {
    let mut poly = vec![1i128];
    let mut total = 0usize;
    for &m in sizes {
        poly = poly_mul(&poly, &q_binomial(total + m, m));
        total += m;
    }
    poly
}

fn jt_exact_sf(sizes: &[usize], observed: usize) -> f64 {
    let counts = jt_null_counts(sizes);
    let all: i128 = counts.iter().sum();
    let upper: i128 = counts.iter().skip(observed).sum();
    upper as f64 / all as f64
}

/// Coefficients of the Gaussian binomial `[n; k]_q`.
fn q_binomial(n: usize, k: usize) -> Vec<i128> {
    let k = k.min(n - k);
    let mut poly = vec![1i128];
    for i in 1..=k {
        // multiply by (1 - q^(n-k+i)), then divide by (1 - q^i)
        let m = n - k + i;
        let mut next = vec![0i128; poly.len() + m];
        for (j, &c) in poly.iter().enumerate() {
            next[j] += c;
            next[j + m] -= c;
        }
        for j in i..next.len() {
            next[j] += next[j - i];
        }
        next.truncate(poly.len() + m - i);
        poly = next;
    }
    poly
}

fn poly_mul(a: &[i128], b: &[i128]) -> Vec<i128> {
    let mut out = vec![0i128; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Welch's t test of `mean(a) > mean(b)`, one-sided.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TrendTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(EmoeError::invalid("Welch test needs at least two samples per group"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(EmoeError::invalid("Welch samples must be finite"));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    let (t, df, p) = if se2 == 0.0 {
        let t = match ma.total_cmp(&mb) {
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Greater => f64::INFINITY,
            std::cmp::Ordering::Less => f64::NEG_INFINITY,
        };
        let p = if t == 0.0 { 0.5 } else if t > 0.0 { 0.0 } else { 1.0 };
        (t, f64::INFINITY, p)
    } else {
        let t = (ma - mb) / se2.sqrt();
        let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
        (t, df, student_t_sf(t, df))
    };
    Ok(TrendTestResult {
        test: "welch_t".into(),
        statistic: t,
        z_score: None,
        df: Some(df),
        p_value: p.clamp(0.0, 1.0),
        method: "t".into(),
    })
}

/// Product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(EmoeError::dim(format!("pearson: {} vs {} samples", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(EmoeError::invalid("pearson needs at least two samples"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EmoeError::invalid("pearson: zero variance"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Quartile index (0..4) of every score. Scores are sorted ascending with
/// ties broken by input index and cut into four contiguous bins of
/// `floor(n/4)`, the remainder going to the earliest bins.
pub fn quartile_split(scores: &[f64]) -> Result<Vec<usize>> {
    if scores.len() < 4 {
        return Err(EmoeError::invalid("quartile split needs at least four scores"));
    }
    if scores.iter().any(|v| v.is_nan()) {
        return Err(EmoeError::invalid("quartile split: NaN score"));
    }
    let sizes = quartile_sizes(scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut out = vec![0; scores.len()];
    let mut pos = 0;
    for (q, &size) in sizes.iter().enumerate() {
        for &i in &order[pos..pos + size] {
            out[i] = q;
        }
        pos += size;
    }
    Ok(out)
}

pub fn quartile_sizes(n: usize) -> [usize; 4] {
    let base = n / 4;
    let extra = n % 4;
    std::array::from_fn(|q| base + usize::from(q < extra))
}

/// Upper tail of the standard normal.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Complementary error function (Chebyshev fit, relative error < 1.2e-7).
pub fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98 + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77))))))));
    let r = t * poly.exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

/// `P(T > t)` for Student's t with `df` degrees of freedom.
pub fn student_t_sf(t: f64, df: f64) -> f64 {
    if t.is_nan() || df.is_nan() || df <= 0.0 {
        return f64::NAN;
    }
    if t.is_infinite() {
        return if t > 0.0 { 0.0 } else { 1.0 };
    }
    if df.is_infinite() {
        return normal_sf(t);
    }
    let tail = 0.5 * reg_inc_beta(df / 2.0, 0.5, df / (df + t * t));
    if t > 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// Lanczos approximation of `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Continued fraction for the incomplete beta, modified Lentz.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}
