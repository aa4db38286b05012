use super::tensor::Tensor;
use crate::error::{EmoeError, Result};

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(EmoeError::Empty("softmax logits"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(EmoeError::invalid("softmax logits must be finite"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    Ok(out)
}

/// Output of a scaled dot-product attention call together with the
/// row-stochastic weight matrix, which the backward pass reuses.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Tensor,
    pub weights: Tensor,
}

/// `softmax(Q Kᵀ / √d) V` for a single head.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<AttentionOutput> {
    for (name, t) in [("Q", q), ("K", k), ("V", v)] {
        if t.rank() != 2 {
            return Err(EmoeError::dim(format!(
                "attention {name} must be a matrix, got {:?}",
                t.shape()
            )));
        }
    }
    let d = q.shape()[1];
    if k.shape()[1] != d {
        return Err(EmoeError::dim(format!(
            "attention: Q axis 1 ({d}) != K axis 1 ({})",
            k.shape()[1]
        )));
    }
    if k.shape()[0] != v.shape()[0] {
        return Err(EmoeError::dim(format!(
            "attention: K axis 0 ({}) != V axis 0 ({})",
            k.shape()[0],
            v.shape()[0]
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = q.matmul_t(k)?;
    let lk = k.shape()[0];
    for row in scores.data_mut().chunks_mut(lk) {
        for s in row.iter_mut() {
            *s *= scale;
        }
        let p = softmax(row)?;
        row.copy_from_slice(&p);
    }
    let output = scores.matmul(v)?;
    Ok(AttentionOutput {
        output,
        weights: scores,
    })
}

/// Gradients of a scalar loss with respect to `Q`, `K` and `V`.
pub struct AttentionGrads {
    pub dq: Tensor,
    pub dk: Tensor,
    pub dv: Tensor,
}

/// Reverse pass of [`attention`] given the upstream gradient `dout`.
pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    weights: &Tensor,
    dout: &Tensor,
) -> Result<AttentionGrads> {
    let d = q.shape()[1];
    let scale = 1.0 / (d as f64).sqrt();
    let dv = weights.t_matmul(dout)?;
    let mut ds = dout.matmul_t(v)?;
    let lk = k.shape()[0];
    for (ds_row, p_row) in ds.data_mut().chunks_mut(lk).zip(weights.data().chunks(lk)) {
        let inner: f64 = ds_row.iter().zip(p_row).map(|(g, p)| g * p).sum();
        for (g, p) in ds_row.iter_mut().zip(p_row) {
            *g = p * (*g - inner) * scale;
        }
    }
    let dq = ds.matmul(k)?;
    let dk = ds.t_matmul(q)?;
    Ok(AttentionGrads { dq, dk, dv })
}

/// Per-element mean and population variance (divide by M) across members.
pub fn ensemble_mean_var(members: &[Tensor]) -> Result<(Tensor, Tensor)> {
    let first = members.first().ok_or(EmoeError::Empty("ensemble members"))?;
    if let Some(bad) = members.iter().find(|m| m.shape() != first.shape()) {
        return Err(EmoeError::dim(format!(
            "ensemble member shape {:?} differs from {:?}",
            bad.shape(),
            first.shape()
        )));
    }
    let m = members.len() as f64;
    let n = first.len();
    // shifted by the first member, so identical members give a zero variance exactly
    let mut shift = vec![0.0; n];
    for member in &members[1..] {
        for ((acc, v), f) in shift.iter_mut().zip(member.data()).zip(first.data()) {
            *acc += v - f;
        }
    }
    let mean: Vec<f64> = first.data().iter().zip(&shift).map(|(f, s)| f + s / m).collect();
    let mut var = vec![0.0; n];
    for member in members {
        for ((acc, v), mu) in var.iter_mut().zip(member.data()).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    for v in &mut var {
        *v /= m;
    }
    let shape = first.shape().to_vec();
    Ok((
        Tensor::from_parts(shape.clone(), mean),
        Tensor::from_parts(shape, var),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!(close(&p, &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300);
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let q = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.3, 0.7]]).unwrap();
        let k = Tensor::from_rows(&vec![vec![0.5, 0.5]; 3]).unwrap();
        let v = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![6.0]]).unwrap();
        let out = attention(&q, &k, &v).unwrap().output;
        assert!(close(out.data(), &[3.0, 3.0], 1e-12));
    }

    #[test]
    fn attention_single_key_returns_value() {
        let q = Tensor::from_rows(&[vec![0.2, -1.0, 4.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![5.0, -7.0]]).unwrap();
        let out = attention(&q, &k, &v).unwrap().output;
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn attention_hand_example() {
        let q = Tensor::from_rows(&[vec![10.0, 0.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![10.0, 0.0], vec![0.0, 10.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let out = attention(&q, &k, &v).unwrap().output;
        // softmax([100/sqrt2, 0]) evaluated independently
        let a = 100.0 / 2f64.sqrt();
        let w0 = 1.0 / (1.0 + (-a).exp());
        assert!(close(out.data(), &[w0, 1.0 - w0], 1e-15));
    }

    #[test]
    fn attention_reports_mismatched_axes() {
        let q = Tensor::zeros(&[2, 3]).unwrap();
        let k = Tensor::zeros(&[4, 2]).unwrap();
        let v = Tensor::zeros(&[4, 1]).unwrap();
        let err = attention(&q, &k, &v).unwrap_err().to_string();
        assert!(err.contains("Q axis 1") && err.contains("K axis 1"), "{err}");
        let k = Tensor::zeros(&[4, 3]).unwrap();
        let v = Tensor::zeros(&[5, 1]).unwrap();
        let err = attention(&q, &k, &v).unwrap_err().to_string();
        assert!(err.contains("V axis 0"), "{err}");
    }

    #[test]
    fn ensemble_examples() {
        let z = Tensor::zeros(&[2, 3]).unwrap();
        let t = Tensor::filled(&[2, 3], 2.0).unwrap();
        let (mean, var) = ensemble_mean_var(&[z.clone(), t.clone()]).unwrap();
        assert!(mean.data().iter().all(|&v| v == 1.0));
        assert!(var.data().iter().all(|&v| v == 1.0));
        let (_, var1) = ensemble_mean_var(std::slice::from_ref(&t)).unwrap();
        assert!(var1.data().iter().all(|&v| v == 0.0));
        assert!(ensemble_mean_var(&[]).is_err());
        assert!(ensemble_mean_var(&[z, Tensor::zeros(&[6]).unwrap()]).is_err());
    }

    #[test]
    fn identical_members_have_zero_variance_exactly() {
        let x = Tensor::from_vec(vec![0.1, 1.0 / 3.0, -7.3, 1e-9, 123.456]).unwrap();
        for m in 1..8 {
            let (mean, var) = ensemble_mean_var(&vec![x.clone(); m]).unwrap();
            assert_eq!(mean, x);
            assert!(var.data().iter().all(|&v| v == 0.0), "m = {m}");
        }
    }

    fn naive_mean_var(members: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let n = members[0].len();
        let m = members.len() as f64;
        let mut mean = Vec::with_capacity(n);
        let mut var = Vec::with_capacity(n);
        for j in 0..n {
            let mut s = 0.0;
            for member in members {
                s += member[j];
            }
            let mu = s / m;
            let mut ss = 0.0;
            for member in members {
                ss += (member[j] - mu) * (member[j] - mu);
            }
            mean.push(mu);
            var.push(ss / m);
        }
        (mean, var)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn softmax_shift_invariant(x in prop::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
            let a = softmax(&x).unwrap();
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let b = softmax(&shifted).unwrap();
            prop_assert!(close(&a, &b, 1e-12));
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(a.iter().all(|&p| p > 0.0));
        }

        #[test]
        fn attention_rows_are_stochastic(
            lq in 1usize..5, lk in 1usize..6, d in 1usize..5,
            seed in any::<u64>(),
        ) {
            let mut s = crate::math::RngStream::new(seed, 0);
            let q = crate::math::gaussian(&mut s, &[lq, d]).unwrap();
            let k = crate::math::gaussian(&mut s, &[lk, d]).unwrap();
            let v = crate::math::gaussian(&mut s, &[lk, 3]).unwrap();
            let out = attention(&q, &k, &v).unwrap();
            for r in 0..lq {
                let sum: f64 = out.weights.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn ensemble_matches_naive_loop(
            m in 1usize..7, n in 1usize..10,
            seed in any::<u64>(),
        ) {
            let mut s = crate::math::RngStream::new(seed, 1);
            let raw: Vec<Vec<f64>> = (0..m).map(|_| s.normal_vec(n).into_iter().map(|v| 3.0 * v + 1.0).collect()).collect();
            let members: Vec<Tensor> = raw.iter().map(|r| Tensor::from_vec(r.clone()).unwrap()).collect();
            let (mean, var) = ensemble_mean_var(&members).unwrap();
            let (nm, nv) = naive_mean_var(&raw);
            prop_assert!(close(mean.data(), &nm, 1e-12));
            prop_assert!(close(var.data(), &nv, 1e-12));
            prop_assert!(var.data().iter().all(|&v| v >= 0.0));

            let mut rev = members.clone();
            rev.reverse();
            let (mean_r, var_r) = ensemble_mean_var(&rev).unwrap();
            prop_assert!(close(mean.data(), mean_r.data(), 1e-12));
            prop_assert!(close(var.data(), var_r.data(), 1e-12));
        }
    }
}
