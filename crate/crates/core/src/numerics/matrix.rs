use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            values.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            values,
        })
    }

    /// Row vector (1 x n).
    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    /// Glorot/Xavier uniform initialization on `[-sqrt(6/(rows+cols)), +sqrt(6/(rows+cols))]`.
    pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!(
                "xavier init needs non-zero dimensions, got {rows}x{cols}"
            )));
        }
        let bound = xavier_bound(rows, cols);
        let values = (0..rows * cols)
            .map(|_| rng.uniform_in(-bound, bound))
            .collect();
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.values.iter_mut().for_each(|x| *x = v);
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// `out = input · self + bias`; `input.len() == rows`, `bias.len() == cols`.
    pub fn affine(&self, input: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.rows || bias.len() != self.cols {
            return Err(Error::shape(format!(
                "affine: input {} and bias {} against {}x{} weights",
                input.len(),
                bias.len(),
                self.rows,
                self.cols
            )));
        }
        let mut out = bias.to_vec();
        for (i, &x) in input.iter().enumerate() {
            if x != 0.0 {
                axpy(x, self.row(i), &mut out);
            }
        }
        Ok(out)
    }

    /// `out = Σ_i values[i] · self.row(indices[i]) + bias`, a sparse-input affine map.
    pub fn sparse_affine(&self, indices: &[usize], values: &[f64], bias: &[f64]) -> Vec<f64> {
        debug_assert_eq!(indices.len(), values.len());
        debug_assert_eq!(bias.len(), self.cols);
        let mut out = bias.to_vec();
        for (&i, &x) in indices.iter().zip(values) {
            if x != 0.0 {
                axpy(x, self.row(i), &mut out);
            }
        }
        out
    }

    /// `out = self · grad` where `grad.len() == cols`; the backward pass of [`Matrix::affine`]
    /// with respect to its input.
    pub fn mul_vec(&self, grad: &[f64]) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), grad)).collect()
    }

    /// `self += scale · outer(left, right)`.
    pub fn add_outer(&mut self, scale: f64, left: &[f64], right: &[f64]) {
        debug_assert_eq!(left.len(), self.rows);
        debug_assert_eq!(right.len(), self.cols);
        for (i, &l) in left.iter().enumerate() {
            let a = scale * l;
            if a != 0.0 {
                let cols = self.cols;
                axpy(a, right, &mut self.values[i * cols..(i + 1) * cols]);
            }
        }
    }

    pub fn add_scaled(&mut self, scale: f64, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        axpy(scale, &other.values, &mut self.values);
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }
}

pub fn xavier_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

/// `y += a · x`.
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the activation's output.
    pub fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
        }
    }
}

/// `activation(input · weights + bias)`.
pub fn affine_tanh_forward(
    input: &[f64],
    weights: &Matrix,
    bias: &[f64],
    activation: Activation,
) -> Result<Vec<f64>> {
    let mut out = weights.affine(input, bias)?;
    if activation == Activation::Tanh {
        out.iter_mut().for_each(|v| *v = v.tanh());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_zero_weights_tanh_is_zero() {
        let w = Matrix::zeros(3, 2);
        let out = affine_tanh_forward(&[1.0, -2.0, 3.0], &w, &[0.0, 0.0], Activation::Tanh).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn affine_identity_passthrough() {
        let w = Matrix::identity(3);
        let x = [0.3, -1.5, 2.0];
        let out = affine_tanh_forward(&x, &w, &[0.0; 3], Activation::Identity).unwrap();
        assert_eq!(out, x.to_vec());
    }

    #[test]
    fn affine_hand_example() {
        let w = Matrix::from_rows(&[vec![0.5, -0.5], vec![0.0, 0.0]]).unwrap();
        let out = affine_tanh_forward(&[1.0, 0.0], &w, &[0.0, 0.0], Activation::Tanh).unwrap();
        // tanh(0.5) = 0.46211715726000974
        assert!((out[0] - 0.462_117_157_260_009_7).abs() < 1e-15);
        assert!((out[1] + 0.462_117_157_260_009_7).abs() < 1e-15);
    }

    #[test]
    fn affine_dimension_mismatch() {
        let w = Matrix::zeros(3, 2);
        assert!(matches!(
            affine_tanh_forward(&[1.0, 2.0], &w, &[0.0, 0.0], Activation::Tanh),
            Err(Error::InvalidShape(_))
        ));
        assert!(w.affine(&[1.0, 2.0, 3.0], &[0.0]).is_err());
    }

    #[test]
    fn xavier_rejects_zero_dims() {
        let mut rng = Rng::new(1);
        assert!(matches!(
            Matrix::xavier_uniform(0, 4, &mut rng),
            Err(Error::InvalidShape(_))
        ));
        assert!(Matrix::xavier_uniform(4, 0, &mut rng).is_err());
    }

    #[test]
    fn xavier_single_entry_bound() {
        for seed in 0..50 {
            let m = Matrix::xavier_uniform(1, 1, &mut Rng::new(seed)).unwrap();
            assert!(m.get(0, 0).abs() <= 3f64.sqrt());
        }
    }

    #[test]
    fn xavier_large_bound_and_spread() {
        let bound = xavier_bound(600, 200);
        assert!((bound - (6.0f64 / 800.0).sqrt()).abs() < 1e-15);
        assert!((bound - 0.0866).abs() < 1e-4);
        // 120000 draws
        let m = Matrix::xavier_uniform(600, 200, &mut Rng::new(3)).unwrap();
        let max = m.as_slice().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(max <= bound);
        // the extremes of a uniform sample this large sit close to the bound
        assert!(max > 0.999 * bound);
    }

    #[test]
    fn xavier_is_deterministic() {
        let a = Matrix::xavier_uniform(7, 5, &mut Rng::new(11)).unwrap();
        let b = Matrix::xavier_uniform(7, 5, &mut Rng::new(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mul_vec_is_transpose_product() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(w.mul_vec(&[1.0, -1.0]), vec![-1.0, -1.0, -1.0]);
        let mut acc = Matrix::zeros(3, 2);
        acc.add_outer(2.0, &[1.0, 0.0, -1.0], &[0.5, 1.0]);
        assert_eq!(acc.as_slice(), &[1.0, 2.0, 0.0, 0.0, -1.0, -2.0]);
    }
}
