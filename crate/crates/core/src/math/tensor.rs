//! Dense row-major `f64` tensors.
//!
//! Only the handful of shapes the toy U-Net needs are supported: rank-1
//! vectors, rank-2 matrices and the rank-3 `C×H×W` latent. There is no
//! broadcasting; callers reshape explicitly.

use serde::{Deserialize, Serialize};

use crate::error::{EmoeError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(EmoeError::EmptyShape);
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// Builds a tensor, rejecting empty shapes, length mismatches and
    /// non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = numel(&shape)?;
        if expected != data.len() {
            return Err(EmoeError::ShapeData {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(EmoeError::NonFinite(i));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = numel(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        })
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        t.data.fill(value);
        Ok(t)
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Row-major matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(EmoeError::dim("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Internal constructor for results of finite arithmetic on finite inputs.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extent for a matrix; 1 for a vector.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = numel(shape)?;
        if n != self.data.len() {
            return Err(EmoeError::ShapeData {
                shape: shape.to_vec(),
                expected: n,
                actual: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    fn check_same(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(EmoeError::dim(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same(other, "elementwise")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.len() != other.len() {
            return Err(EmoeError::dim(format!(
                "dot: {} vs {} elements",
                self.len(),
                other.len()
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn as_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(EmoeError::dim(format!(
                "{what}: expected a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// `self · other` for matrices.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.as_matrix("matmul lhs")?;
        let (k2, n) = other.as_matrix("matmul rhs")?;
        if k != k2 {
            return Err(EmoeError::dim(format!(
                "matmul inner axes: lhs axis 1 = {k}, rhs axis 0 = {k2}"
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            let o = &mut out[i * n..(i + 1) * n];
            for (p, &av) in a.iter().enumerate() {
                let b = &other.data[p * n..(p + 1) * n];
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov += av * bv;
                }
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.as_matrix("t_matmul lhs")?;
        let (k2, n) = other.as_matrix("t_matmul rhs")?;
        if k != k2 {
            return Err(EmoeError::dim(format!(
                "t_matmul shared axis 0: {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a = &self.data[p * m..(p + 1) * m];
            let b = &other.data[p * n..(p + 1) * n];
            for (i, &av) in a.iter().enumerate() {
                let o = &mut out[i * n..(i + 1) * n];
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov += av * bv;
                }
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.as_matrix("matmul_t lhs")?;
        let (n, k2) = other.as_matrix("matmul_t rhs")?;
        if k != k2 {
            return Err(EmoeError::dim(format!(
                "matmul_t shared axis 1: {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.as_matrix("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }

    /// Adds `bias` to every row of a matrix.
    pub fn add_row(&self, bias: &[f64]) -> Result<Tensor> {
        let (_, n) = self.as_matrix("add_row")?;
        if bias.len() != n {
            return Err(EmoeError::dim(format!(
                "add_row: {} columns vs bias of {}",
                n,
                bias.len()
            )));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Column sums of a matrix.
    pub fn sum_rows(&self) -> Result<Vec<f64>> {
        let (_, n) = self.as_matrix("sum_rows")?;
        let mut out = vec![0.0; n];
        for row in self.data.chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// Arithmetic mean of matrix rows.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let rows = self.rows() as f64;
        let s = self.sum_rows()?;
        Ok(Tensor::from_parts(vec![s.len()], s.into_iter().map(|v| v / rows).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_mismatched() {
        assert!(matches!(Tensor::zeros(&[]), Err(EmoeError::EmptyShape)));
        assert!(matches!(Tensor::zeros(&[3, 0]), Err(EmoeError::EmptyShape)));
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 0.5], vec![-1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.data(), &[-1.0, 7.5, -1.0, 18.0]);
        let via_t = a.transpose().unwrap().t_matmul(&b).unwrap();
        assert_eq!(via_t, ab);
        let via_nt = a.matmul_t(&b.transpose().unwrap()).unwrap();
        assert_eq!(via_nt, ab);
    }

    #[test]
    fn matmul_names_axes_on_mismatch() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let err = a.matmul(&a).unwrap_err().to_string();
        assert!(err.contains("axis 1 = 3"), "{err}");
    }
}
