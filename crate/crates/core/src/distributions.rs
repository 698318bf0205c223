//! Diagonal Gaussians and the divergences used by the matching objectives.
//!
//! Every divergence comes in two flavours: a plain value function and a `*_grad` variant that
//! also returns exact partial derivatives with respect to both arguments' means and
//! log-variances. Gradients are taken with respect to the stored (already clamped)
//! log-variance; callers owning the pre-clamp value mask the gradient themselves.


use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Rng};

pub const LOG_VARIANCE_MIN: f64 = -10.0;
pub const LOG_VARIANCE_MAX: f64 = 10.0;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    log_variance: Vec<f64>,
}

impl DiagonalGaussian {
    /// Builds a Gaussian, clamping each log-variance into `[-10, 10]`.
    pub fn new(mean: Vec<f64>, log_variance: Vec<f64>) -> Result<Self> {
        if mean.len() != log_variance.len() {
            return Err(Error::shape(format!(
                "mean has {} dims, log-variance has {}",
                mean.len(),
                log_variance.len()
            )));
        }
        if mean.iter().chain(&log_variance).any(|v| !v.is_finite()) {
            return Err(Error::numeric("gaussian parameters"));
        }
        let log_variance = log_variance
            .into_iter()
            .map(|v| v.clamp(LOG_VARIANCE_MIN, LOG_VARIANCE_MAX))
            .collect();
        Ok(Self { mean, log_variance })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_variance: vec![0.0; dim],
        }
    }

    /// Convenience constructor from variances instead of log-variances.
    pub fn from_variance(mean: Vec<f64>, variance: &[f64]) -> Result<Self> {
        Self::new(mean, variance.iter().map(|v| v.ln()).collect())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_variance(&self) -> &[f64] {
        &self.log_variance
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_variance.iter().map(|v| v.exp()).collect()
    }

    pub fn std_dev(&self) -> Vec<f64> {
        self.log_variance.iter().map(|v| (0.5 * v).exp()).collect()
    }

    /// `μ + σ ⊙ ε` with `ε ~ N(0, I)`; the noise is returned so callers can backpropagate.
    pub fn sample_with_noise(&self, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
        let noise = rng.normals(self.dim());
        (self.reparameterize(&noise), noise)
    }

    pub fn reparameterize(&self, noise: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_variance)
            .zip(noise)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect()
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(Error::shape(format!(
                "point has {} dims, gaussian has {}",
                z.len(),
                self.dim()
            )));
        }
        Ok(self.log_density_unchecked(z))
    }

    fn log_density_unchecked(&self, z: &[f64]) -> f64 {
        let mut acc = 0.0;
        for k in 0..z.len() {
            let diff = z[k] - self.mean[k];
            acc += LN_2PI + self.log_variance[k] + diff * diff * (-self.log_variance[k]).exp();
        }
        -0.5 * acc
    }
}

/// `μ + σ ⊙ ε`, `ε ~ N(0, I)`.
pub fn sample_reparam(q: &DiagonalGaussian, rng: &mut Rng) -> Vec<f64> {
    q.sample_with_noise(rng).0
}

/// Partial derivatives with respect to one Gaussian's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrad {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl GaussianGrad {
    pub fn zeros(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_variance: vec![0.0; dim],
        }
    }

    pub fn add_scaled(&mut self, scale: f64, other: &GaussianGrad) {
        for (a, b) in self.mean.iter_mut().zip(&other.mean) {
            *a += scale * b;
        }
        for (a, b) in self.log_variance.iter_mut().zip(&other.log_variance) {
            *a += scale * b;
        }
    }

    pub fn scaled(mut self, scale: f64) -> Self {
        self.mean.iter_mut().for_each(|v| *v *= scale);
        self.log_variance.iter_mut().for_each(|v| *v *= scale);
        self
    }
}

/// A divergence value with gradients for its first and second argument.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceGrad {
    pub value: f64,
    pub first: GaussianGrad,
    pub second: GaussianGrad,
}

fn check_dims(a: &DiagonalGaussian, b: &DiagonalGaussian) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "gaussians of dimension {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// `KL(q ‖ N(0, I)) = ½ Σ (σ² + μ² − 1 − ln σ²)`.
pub fn kl_to_standard(q: &DiagonalGaussian) -> f64 {
    kl_to_standard_grad(q).0
}

pub fn kl_to_standard_grad(q: &DiagonalGaussian) -> (f64, GaussianGrad) {
    let d = q.dim();
    let mut grad = GaussianGrad::zeros(d);
    let mut value = 0.0;
    for k in 0..d {
        let mu = q.mean[k];
        let lv = q.log_variance[k];
        let var = lv.exp();
        value += var + mu * mu - 1.0 - lv;
        grad.mean[k] = mu;
        grad.log_variance[k] = 0.5 * (var - 1.0);
    }
    (0.5 * value, grad)
}

/// `KL(q ‖ p)` for diagonal Gaussians.
pub fn kl_between(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<f64> {
    Ok(kl_between_grad(q, p)?.value)
}

/// Gradients: `first` is with respect to `q`, `second` with respect to `p`.
pub fn kl_between_grad(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<DivergenceGrad> {
    check_dims(q, p)?;
    let d = q.dim();
    let mut gq = GaussianGrad::zeros(d);
    let mut gp = GaussianGrad::zeros(d);
    let mut value = 0.0;
    for k in 0..d {
        let inv_vp = (-p.log_variance[k]).exp();
        let ratio = (q.log_variance[k] - p.log_variance[k]).exp();
        let diff = p.mean[k] - q.mean[k];
        let maha = diff * diff * inv_vp;
        value += ratio + maha - 1.0 + p.log_variance[k] - q.log_variance[k];
        gq.mean[k] = -diff * inv_vp;
        gp.mean[k] = diff * inv_vp;
        gq.log_variance[k] = 0.5 * (ratio - 1.0);
        gp.log_variance[k] = 0.5 * (1.0 - ratio - maha);
    }
    Ok(DivergenceGrad {
        value: 0.5 * value,
        first: gq,
        second: gp,
    })
}

/// Squared 2-Wasserstein distance `‖μp − μq‖² + Σ (σp − σq)²` between diagonal Gaussians.
pub fn wasserstein2_sq(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<f64> {
    Ok(wasserstein2_sq_grad(p, q)?.value)
}

pub fn wasserstein2_sq_grad(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<DivergenceGrad> {
    check_dims(p, q)?;
    let d = p.dim();
    let mut gp = GaussianGrad::zeros(d);
    let mut gq = GaussianGrad::zeros(d);
    let mut value = 0.0;
    for k in 0..d {
        let dm = p.mean[k] - q.mean[k];
        let sp = (0.5 * p.log_variance[k]).exp();
        let sq = (0.5 * q.log_variance[k]).exp();
        let ds = sp - sq;
        value += dm * dm + ds * ds;
        gp.mean[k] = 2.0 * dm;
        gq.mean[k] = -2.0 * dm;
        gp.log_variance[k] = ds * sp;
        gq.log_variance[k] = -ds * sq;
    }
    Ok(DivergenceGrad {
        value,
        first: gp,
        second: gq,
    })
}

/// How the composite-prior divergence treats the mixture `α·q + (1−α)·p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositeMode {
    /// Replace the mixture by its moment-matched diagonal Gaussian (closed form).
    Moment,
    /// Reparameterized Monte-Carlo estimate against the exact mixture density.
    MonteCarlo,
}

/// `KL(p ‖ p_com) + KL(q ‖ p_com)` with `p_com = α·q + (1−α)·p`.
pub fn composite_divergence(
    p: &DiagonalGaussian,
    q: &DiagonalGaussian,
    alpha: f64,
    mode: CompositeMode,
    sample_count: usize,
    rng: &mut Rng,
) -> Result<f64> {
    Ok(composite_divergence_grad(p, q, alpha, mode, sample_count, rng)?.value)
}

/// Gradients: `first` is with respect to `p`, `second` with respect to `q`.
pub fn composite_divergence_grad(
    p: &DiagonalGaussian,
    q: &DiagonalGaussian,
    alpha: f64,
    mode: CompositeMode,
    sample_count: usize,
    rng: &mut Rng,
) -> Result<DivergenceGrad> {
    check_dims(p, q)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    match mode {
        CompositeMode::Moment => Ok(composite_moment(p, q, alpha)),
        CompositeMode::MonteCarlo => {
            if sample_count < 1 {
                return Err(Error::config("monte-carlo composite divergence needs >= 1 sample"));
            }
            Ok(composite_monte_carlo(p, q, alpha, sample_count, rng))
        }
    }
}

/// Moment-matched diagonal Gaussian of the mixture `α·q + (1−α)·p`.
pub fn moment_matched_mixture(
    p: &DiagonalGaussian,
    q: &DiagonalGaussian,
    alpha: f64,
) -> Result<DiagonalGaussian> {
    check_dims(p, q)?;
    let (mean, var) = mixture_moments(p, q, alpha);
    Ok(DiagonalGaussian {
        mean,
        log_variance: var.iter().map(|v| v.ln()).collect(),
    })
}

fn mixture_moments(p: &DiagonalGaussian, q: &DiagonalGaussian, alpha: f64) -> (Vec<f64>, Vec<f64>) {
    let beta = 1.0 - alpha;
    let mut mean = Vec::with_capacity(p.dim());
    let mut var = Vec::with_capacity(p.dim());
    for k in 0..p.dim() {
        let (mq, mp) = (q.mean[k], p.mean[k]);
        let vq = q.log_variance[k].exp();
        let vp = p.log_variance[k].exp();
        let m = alpha * mq + beta * mp;
        // Equivalent to α(vq+mq²)+(1−α)(vp+mp²)−m² without the cancellation.
        let v = alpha * vq + beta * vp + alpha * beta * (mq - mp) * (mq - mp);
        mean.push(m);
        var.push(v);
    }
    (mean, var)
}

fn composite_moment(p: &DiagonalGaussian, q: &DiagonalGaussian, alpha: f64) -> DivergenceGrad {
    let d = p.dim();
    let beta = 1.0 - alpha;
    let (mix_mean, mix_var) = mixture_moments(p, q, alpha);
    let mut gp = GaussianGrad::zeros(d);
    let mut gq = GaussianGrad::zeros(d);
    let mut value = 0.0;
    for k in 0..d {
        let (mm, vm) = (mix_mean[k], mix_var[k]);
        let lvm = vm.ln();
        let mut grad_mix_mean = 0.0;
        let mut grad_mix_var = 0.0;
        for (g, src) in [(&mut gp, p), (&mut gq, q)] {
            let ma = src.mean[k];
            let lva = src.log_variance[k];
            let va = lva.exp();
            let diff = mm - ma;
            value += 0.5 * (va / vm + diff * diff / vm - 1.0 + lvm - lva);
            g.mean[k] = -diff / vm;
            g.log_variance[k] = 0.5 * (va / vm - 1.0);
            grad_mix_mean += diff / vm;
            grad_mix_var += 0.5 * (1.0 / vm - (va + diff * diff) / (vm * vm));
        }
        let (mq, vq) = (q.mean[k], q.log_variance[k].exp());
        let (mp, vp) = (p.mean[k], p.log_variance[k].exp());
        gq.mean[k] += grad_mix_mean * alpha + grad_mix_var * 2.0 * alpha * (mq - mm);
        gp.mean[k] += grad_mix_mean * beta + grad_mix_var * 2.0 * beta * (mp - mm);
        gq.log_variance[k] += grad_mix_var * alpha * vq;
        gp.log_variance[k] += grad_mix_var * beta * vp;
    }
    DivergenceGrad {
        value,
        first: gp,
        second: gq,
    }
}

fn composite_monte_carlo(
    p: &DiagonalGaussian,
    q: &DiagonalGaussian,
    alpha: f64,
    samples: usize,
    rng: &mut Rng,
) -> DivergenceGrad {
    let d = p.dim();
    let ln_alpha = alpha.ln();
    let ln_beta = (1.0 - alpha).ln();
    let mut gp = GaussianGrad::zeros(d);
    let mut gq = GaussianGrad::zeros(d);
    let mut value = 0.0;
    let inv_n = 1.0 / samples as f64;
    let q_std = q.std_dev();
    let p_std = p.std_dev();
    let q_inv_var: Vec<f64> = q.log_variance.iter().map(|v| (-v).exp()).collect();
    let p_inv_var: Vec<f64> = p.log_variance.iter().map(|v| (-v).exp()).collect();

    // source 0 draws from p, source 1 from q
    for source in 0..2 {
        let (src, src_std) = if source == 0 { (p, &p_std) } else { (q, &q_std) };
        for _ in 0..samples {
            let noise = rng.normals(d);
            let z: Vec<f64> = (0..d)
                .map(|k| src.mean[k] + src_std[k] * noise[k])
                .collect();
            let log_src = -0.5
                * (0..d)
                    .map(|k| LN_2PI + src.log_variance[k] + noise[k] * noise[k])
                    .sum::<f64>();
            let log_q = q.log_density_unchecked(&z);
            let log_p = p.log_density_unchecked(&z);
            let log_mix = log_sum_exp(&[ln_alpha + log_q, ln_beta + log_p]);
            value += inv_n * (log_src - log_mix);

            let (resp_q, resp_p) = if log_mix == f64::NEG_INFINITY {
                (0.0, 0.0)
            } else {
                (
                    (ln_alpha + log_q - log_mix).exp(),
                    (ln_beta + log_p - log_mix).exp(),
                )
            };
            for k in 0..d {
                let rq = (z[k] - q.mean[k]) * q_inv_var[k];
                let rp = (z[k] - p.mean[k]) * p_inv_var[k];
                // ∂ log p_com / ∂z_k
                let dz = -resp_q * rq - resp_p * rp;
                // direct partials of log p_com
                let dmix_mq = resp_q * rq;
                let dmix_lvq = resp_q * 0.5 * ((z[k] - q.mean[k]) * rq - 1.0);
                let dmix_mp = resp_p * rp;
                let dmix_lvp = resp_p * 0.5 * ((z[k] - p.mean[k]) * rp - 1.0);

                gq.mean[k] -= inv_n * dmix_mq;
                gq.log_variance[k] -= inv_n * dmix_lvq;
                gp.mean[k] -= inv_n * dmix_mp;
                gp.log_variance[k] -= inv_n * dmix_lvp;

                // reparameterization path of the sampled source, plus ∂ log src / ∂ lv = −½
                let g = if source == 0 { &mut gp } else { &mut gq };
                g.mean[k] -= inv_n * dz;
                g.log_variance[k] -= inv_n * (dz * 0.5 * src_std[k] * noise[k] + 0.5);
            }
        }
    }
    DivergenceGrad {
        value,
        first: gp,
        second: gq,
    }
}
