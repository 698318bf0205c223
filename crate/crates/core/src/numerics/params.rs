use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// A fixed, ordered collection of named tensors.
///
/// Gradients share the parameter type, so a gradient is simply a `Self` of matching shapes.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<(&str, &Matrix)>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.fill(0.0);
        }
        out
    }

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors().iter().map(|(_, t)| t.shape()).collect()
    }

    /// First tensor containing a non-finite entry.
    fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(name, _)| name.to_string())
    }

    /// `self += scale * other`.
    fn accumulate(&mut self, scale: f64, other: &Self) {
        let src = other.tensors();
        for (dst, (_, s)) in self.tensors_mut().into_iter().zip(src) {
            dst.add_scaled(scale, s);
        }
    }
}

/// Generic named tensor list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensors(pub Vec<(String, Matrix)>);

impl Parameters for NamedTensors {
    fn tensors(&self) -> Vec<(&str, &Matrix)> {
        self.0.iter().map(|(n, m)| (n.as_str(), m)).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.0.iter_mut().map(|(_, m)| m).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Parameters together with their Adam moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBlock<P> {
    pub params: P,
    first_moment: Vec<Matrix>,
    second_moment: Vec<Matrix>,
    step: u64,
}

impl<P: Parameters> ParameterBlock<P> {
    pub fn new(params: P) -> Self {
        let first_moment: Vec<Matrix> = params
            .tensors()
            .iter()
            .map(|(_, t)| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        let second_moment = first_moment.clone();
        Self {
            params,
            first_moment,
            second_moment,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. A non-finite gradient leaves every parameter untouched.
    pub fn adam_step(&mut self, gradients: &P, config: &AdamConfig) -> Result<()> {
        if !(config.lr >= 0.0) || !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2)
        {
            return Err(Error::config(format!("invalid Adam settings {config:?}")));
        }
        if gradients.shapes() != self.params.shapes() {
            return Err(Error::shape("gradient block does not match parameters"));
        }
        if let Some(name) = gradients.first_non_finite() {
            return Err(Error::numeric(format!("gradient of {name}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - config.beta1.powi(t);
        let bias2 = 1.0 - config.beta2.powi(t);
        let grads = gradients.tensors();
        for (((param, (_, grad)), m), v) in self
            .params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            let p = param.as_mut_slice();
            let m = m.as_mut_slice();
            let v = v.as_mut_slice();
            for (i, &g) in grad.as_slice().iter().enumerate() {
                m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
                v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
            }
        }
        Ok(())
    }
}
