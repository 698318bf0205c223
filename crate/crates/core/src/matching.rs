//! Distribution-matching objectives between the encoder posterior `q` and the semantic
//! Gaussian `p`, plus ablation variants.

use serde::{Deserialize, Serialize};

use crate::distributions::{
    composite_divergence_grad, kl_between_grad, kl_to_standard_grad,
    wasserstein2_sq_grad, CompositeMode, DiagonalGaussian, GaussianGrad,
};
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Plain Mult-VAE; the regularizer is the (annealed) KL to the standard prior.
    None,
    Godm,
    Cpdm,
    Mddm,
}

impl Strategy {
    pub fn default_beta(self) -> f64 {
        match self {
            Strategy::None => 0.0,
            Strategy::Godm | Strategy::Cpdm => 0.1,
            Strategy::Mddm => 0.5,
        }
    }

    pub fn uses_semantic_prior(self) -> bool {
        self != Strategy::None
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Strategy::None),
            "godm" => Ok(Strategy::Godm),
            "cpdm" => Ok(Strategy::Cpdm),
            "mddm" => Ok(Strategy::Mddm),
            other => Err(Error::config(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Off,
    /// Meta-network fed the user's semantic row only.
    NoPmn,
    /// Reconstruct from `z ~ N(μq + μp, σq² + σp²)`.
    Add,
    /// `KL(q ‖ N(0, I)) + β·KL(q ‖ p)` in place of the strategy loss.
    NoMixing,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Ablation::Off),
            "no_pmn" => Ok(Ablation::NoPmn),
            "add" => Ok(Ablation::Add),
            "no_mixing" => Ok(Ablation::NoMixing),
            other => Err(Error::config(format!("unknown ablation `{other}`"))),
        }
    }
}

pub const DEFAULT_CPDM_SAMPLES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingConfig {
    pub strategy: Strategy,
    pub beta: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_cpdm_mode")]
    pub cpdm_mode: CompositeMode,
    #[serde(default = "default_cpdm_samples")]
    pub cpdm_samples: usize,
    #[serde(default = "default_ablation")]
    pub ablation: Ablation,
}

fn default_alpha() -> f64 {
    0.5
}

fn default_cpdm_mode() -> CompositeMode {
    CompositeMode::Moment
}

fn default_cpdm_samples() -> usize {
    DEFAULT_CPDM_SAMPLES
}

fn default_ablation() -> Ablation {
    Ablation::Off
}

impl MatchingConfig {
    /// Strategy with its default β and every other field at its default.
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            beta: strategy.default_beta(),
            alpha: default_alpha(),
            cpdm_mode: default_cpdm_mode(),
            cpdm_samples: DEFAULT_CPDM_SAMPLES,
            ablation: Ablation::Off,
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if self.strategy == Strategy::Mddm && self.beta > 1.0 {
            return Err(Error::config(format!("mddm beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.cpdm_mode == CompositeMode::MonteCarlo && self.cpdm_samples == 0 {
            return Err(Error::config("cpdm_samples must be >= 1"));
        }
        if self.strategy == Strategy::None && self.ablation != Ablation::Off {
            return Err(Error::config("ablations need a matching strategy"));
        }
        Ok(())
    }
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self::new(Strategy::Mddm)
    }
}

/// A matching loss value with gradients for both Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingGrad {
    pub value: f64,
    pub q: GaussianGrad,
    pub p: GaussianGrad,
}

pub fn godm_loss(q: &DiagonalGaussian, p: &DiagonalGaussian, beta: f64) -> Result<f64> {
    Ok(godm_loss_grad(q, p, beta)?.value)
}

pub fn godm_loss_grad(q: &DiagonalGaussian, p: &DiagonalGaussian, beta: f64) -> Result<MatchingGrad> {
    let (kl, mut gq) = kl_to_standard_grad(q);
    let w = wasserstein2_sq_grad(p, q)?;
    gq.add_scaled(beta, &w.second);
    Ok(MatchingGrad {
        value: kl + beta * w.value,
        q: gq,
        p: w.first.scaled(beta),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn cpdm_loss(
    q: &DiagonalGaussian,
    p: &DiagonalGaussian,
    alpha: f64,
    beta: f64,
    mode: CompositeMode,
    sample_count: usize,
    rng: &mut Rng,
) -> Result<f64> {
    Ok(cpdm_loss_grad(q, p, alpha, beta, mode, sample_count, rng)?.value)
}

pub fn cpdm_loss_grad(
    q: &DiagonalGaussian,
    p: &DiagonalGaussian,
    alpha: f64,
    beta: f64,
    mode: CompositeMode,
    sample_count: usize,
    rng: &mut Rng,
) -> Result<MatchingGrad> {
    let (kl, mut gq) = kl_to_standard_grad(q);
    let c = composite_divergence_grad(p, q, alpha, mode, sample_count, rng)?;
    gq.add_scaled(beta, &c.second);
    Ok(MatchingGrad {
        value: kl + beta * c.value,
        q: gq,
        p: c.first.scaled(beta),
    })
}

pub fn mddm_loss(q: &DiagonalGaussian, p: &DiagonalGaussian, beta: f64) -> Result<f64> {
    Ok(mddm_loss_grad(q, p, beta)?.value)
}

pub fn mddm_loss_grad(q: &DiagonalGaussian, p: &DiagonalGaussian, beta: f64) -> Result<MatchingGrad> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::config(format!("mddm beta must lie in [0, 1], got {beta}")));
    }
    let (kl, gstd) = kl_to_standard_grad(q);
    let pair = kl_between_grad(q, p)?;
    let mut gq = gstd.scaled(beta);
    gq.add_scaled(1.0 - beta, &pair.first);
    Ok(MatchingGrad {
        value: beta * kl + (1.0 - beta) * pair.value,
        q: gq,
        p: pair.second.scaled(1.0 - beta),
    })
}

/// `KL(q ‖ N(0, I)) + β·KL(q ‖ p)`: the matching term without the β-mixing.
pub fn no_mixing_loss_grad(q: &DiagonalGaussian, p: &DiagonalGaussian, beta: f64) -> Result<MatchingGrad> {
    let (kl, mut gq) = kl_to_standard_grad(q);
    let pair = kl_between_grad(q, p)?;
    gq.add_scaled(beta, &pair.first);
    Ok(MatchingGrad {
        value: kl + beta * pair.value,
        q: gq,
        p: pair.second.scaled(beta),
    })
}

/// The configured `L_DM` for one user.
///
/// `p` is required for every strategy except `none`, whose loss is `kl_weight·KL(q ‖ N(0, I))`.
pub fn matching_loss_grad(
    q: &DiagonalGaussian,
    p: Option<&DiagonalGaussian>,
    config: &MatchingConfig,
    kl_weight: f64,
    rng: &mut Rng,
) -> Result<MatchingGrad> {
    if config.strategy == Strategy::None {
        let (kl, g) = kl_to_standard_grad(q);
        return Ok(MatchingGrad {
            value: kl_weight * kl,
            q: g.scaled(kl_weight),
            p: GaussianGrad::zeros(q.dim()),
        });
    }
    let p = p.ok_or_else(|| Error::config("matching strategy needs the semantic Gaussian"))?;
    if config.ablation == Ablation::NoMixing {
        return no_mixing_loss_grad(q, p, config.beta);
    }
    match config.strategy {
        Strategy::Godm => godm_loss_grad(q, p, config.beta),
        Strategy::Cpdm => cpdm_loss_grad(
            q,
            p,
            config.alpha,
            config.beta,
            config.cpdm_mode,
            config.cpdm_samples,
            rng,
        ),
        Strategy::Mddm => mddm_loss_grad(q, p, config.beta),
        Strategy::None => unreachable!(),
    }
}

/// Reconstruction sampling distribution: `q` itself, or `N(μq + μp, σq² + σp²)` for `add`.
pub fn ablation_distribution(
    q: &DiagonalGaussian,
    p: &DiagonalGaussian,
    ablation: Ablation,
) -> Result<DiagonalGaussian> {
    if ablation != Ablation::Add {
        return Ok(q.clone());
    }
    if q.dim() != p.dim() {
        return Err(Error::shape(format!("dimension {} vs {}", q.dim(), p.dim())));
    }
    let mean = q.mean().iter().zip(p.mean()).map(|(a, b)| a + b).collect();
    let var: Vec<f64> = q.variance().iter().zip(p.variance()).map(|(a, b)| a + b).collect();
    DiagonalGaussian::from_variance(mean, &var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{kl_between, kl_to_standard, moment_matched_mixture};
    use crate::numerics::{finite_difference_check, NamedTensors, Matrix};
    use proptest::prelude::{prop, prop_assert, proptest, Strategy as _};

    fn g(mean: &[f64], var: &[f64]) -> DiagonalGaussian {
        DiagonalGaussian::from_variance(mean.to_vec(), var).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn godm_examples() {
        let s = DiagonalGaussian::standard(3);
        assert_eq!(godm_loss(&s, &s, 0.7).unwrap(), 0.0);
        let q = g(&[1.0], &[1.0]);
        let p = g(&[0.0], &[1.0]);
        close(godm_loss(&q, &p, 0.0).unwrap(), kl_to_standard(&q), 0.0);
        close(godm_loss(&q, &p, 0.5).unwrap(), 1.0, 1e-15);
    }

    #[test]
    fn cpdm_examples() {
        let s = DiagonalGaussian::standard(2);
        let mut rng = Rng::new(0);
        assert_eq!(cpdm_loss(&s, &s, 0.5, 1.0, CompositeMode::Moment, 1, &mut rng).unwrap(), 0.0);
        let q = g(&[1.0], &[1.0]);
        let p = g(&[0.0], &[1.0]);
        close(
            cpdm_loss(&q, &p, 0.5, 0.0, CompositeMode::Moment, 1, &mut rng).unwrap(),
            0.5,
            0.0,
        );
        // mixture mean 0.5, second moment 0.5·2 + 0.5·1 = 1.5, variance 1.25
        let com = g(&[0.5], &[1.25]);
        let kl = |m: f64, v: f64| 0.5 * (v / 1.25 + (m - 0.5f64).powi(2) / 1.25 - 1.0 + (1.25f64 / v).ln());
        let bridge = kl(0.0, 1.0) + kl(1.0, 1.0);
        close(bridge, kl_between(&p, &com).unwrap() + kl_between(&q, &com).unwrap(), 1e-15);
        assert_eq!(moment_matched_mixture(&p, &q, 0.5).unwrap(), com);
        close(
            cpdm_loss(&q, &p, 0.5, 1.0, CompositeMode::Moment, 1, &mut rng).unwrap(),
            0.5 + bridge,
            1e-14,
        );
    }

    #[test]
    fn mddm_examples() {
        let q = g(&[1.0], &[1.0]);
        let p = g(&[3.0], &[1.0]);
        close(mddm_loss(&q, &p, 1.0).unwrap(), kl_to_standard(&q), 0.0);
        close(mddm_loss(&q, &p, 0.0).unwrap(), kl_between(&q, &p).unwrap(), 0.0);
        close(mddm_loss(&q, &p, 0.5).unwrap(), 1.25, 1e-15);
        assert!(matches!(mddm_loss(&q, &p, 1.5), Err(Error::Config(_))));
        assert!(matches!(mddm_loss(&q, &p, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn ablation_examples() {
        let s = DiagonalGaussian::standard(2);
        assert_eq!(ablation_distribution(&s, &s, Ablation::Add).unwrap(), g(&[0.0, 0.0], &[2.0, 2.0]));
        let q = g(&[1.0], &[1.0]);
        assert_eq!(ablation_distribution(&q, &s, Ablation::Off).unwrap(), q);
        let sum = ablation_distribution(&q, &g(&[2.0], &[4.0]), Ablation::Add).unwrap();
        close(sum.mean()[0], 3.0, 0.0);
        close(sum.variance()[0], 5.0, 1e-14);
    }

    #[test]
    fn config_validation() {
        assert!(MatchingConfig::new(Strategy::Mddm).validate().is_ok());
        assert!(MatchingConfig::new(Strategy::Mddm).with_beta(1.2).validate().is_err());
        assert!(MatchingConfig::new(Strategy::Godm).with_beta(3.0).validate().is_ok());
        assert!(MatchingConfig::new(Strategy::Godm).with_beta(-1.0).validate().is_err());
        assert!(MatchingConfig::new(Strategy::None)
            .with_ablation(Ablation::Add)
            .validate()
            .is_err());
        let mut c = MatchingConfig::new(Strategy::Cpdm);
        c.alpha = 1.1;
        assert!(c.validate().is_err());
        assert_eq!("cpdm".parse::<Strategy>().unwrap(), Strategy::Cpdm);
        assert!("nope".parse::<Ablation>().is_err());
    }

    #[test]
    fn none_ignores_semantic_prior() {
        let q = g(&[0.4, -0.2], &[0.5, 2.0]);
        let c = MatchingConfig::new(Strategy::None);
        let out = matching_loss_grad(&q, None, &c, 0.3, &mut Rng::new(0)).unwrap();
        close(out.value, 0.3 * kl_to_standard(&q), 1e-15);
        assert!(matching_loss_grad(&q, None, &MatchingConfig::new(Strategy::Mddm), 1.0, &mut Rng::new(0))
            .is_err());
    }

    fn pack(q: &DiagonalGaussian, p: &DiagonalGaussian) -> NamedTensors {
        NamedTensors(vec![
            ("q.mean".into(), Matrix::row_vector(q.mean().to_vec())),
            ("q.logvar".into(), Matrix::row_vector(q.log_variance().to_vec())),
            ("p.mean".into(), Matrix::row_vector(p.mean().to_vec())),
            ("p.logvar".into(), Matrix::row_vector(p.log_variance().to_vec())),
        ])
    }

    fn unpack(t: &NamedTensors) -> (DiagonalGaussian, DiagonalGaussian) {
        let v = |k: usize| t.0[k].1.as_slice().to_vec();
        (
            DiagonalGaussian::new(v(0), v(1)).unwrap(),
            DiagonalGaussian::new(v(2), v(3)).unwrap(),
        )
    }

    fn objective(config: MatchingConfig) -> impl Fn(&NamedTensors) -> Result<(f64, NamedTensors)> {
        move |t: &NamedTensors| {
            let (q, p) = unpack(t);
            let out = matching_loss_grad(&q, Some(&p), &config, 1.0, &mut Rng::new(0))?;
            let grads = [out.q.mean, out.q.log_variance, out.p.mean, out.p.log_variance];
            let named = t.0.iter().zip(grads).map(|((n, _), g)| (n.clone(), Matrix::row_vector(g)));
            Ok((out.value, NamedTensors(named.collect())))
        }
    }

    #[test]
    fn losses_pass_gradient_check() {
        let mut rng = Rng::new(21);
        let configs = [
            MatchingConfig::new(Strategy::Godm).with_beta(0.7),
            MatchingConfig::new(Strategy::Cpdm).with_beta(0.9),
            MatchingConfig::new(Strategy::Mddm).with_beta(0.3),
            MatchingConfig::new(Strategy::Mddm).with_ablation(Ablation::NoMixing),
        ];
        for _ in 0..10 {
            let q = DiagonalGaussian::new(rng.normals(3), rng.normals(3)).unwrap();
            let p = DiagonalGaussian::new(rng.normals(3), rng.normals(3)).unwrap();
            for c in &configs {
                let report = finite_difference_check(&objective(c.clone()), &pack(&q, &p), 1e-5, 1e-6).unwrap();
                assert!(report.passed(), "{:?}: {:?}", c.strategy, report.worst());
            }
        }
    }

    fn gaussian() -> impl proptest::strategy::Strategy<Value = DiagonalGaussian> {
        (prop::collection::vec(-3.0f64..3.0, 3), prop::collection::vec(-3.0f64..3.0, 3))
            .prop_map(|(m, l)| DiagonalGaussian::new(m, l).unwrap())
    }

    proptest! {
        #[test]
        fn losses_nonnegative_with_boundaries(q in gaussian(), p in gaussian(), beta in 0.0f64..1.0) {
            let kl = kl_to_standard(&q);
            let mut rng = Rng::new(0);
            prop_assert!(godm_loss(&q, &p, beta).unwrap() >= 0.0);
            prop_assert!(cpdm_loss(&q, &p, 0.5, beta, CompositeMode::Moment, 1, &mut rng).unwrap() >= 0.0);
            prop_assert!(mddm_loss(&q, &p, beta).unwrap() >= 0.0);
            prop_assert!((godm_loss(&q, &p, 0.0).unwrap() - kl).abs() <= 1e-12);
            prop_assert!((cpdm_loss(&q, &p, 0.5, 0.0, CompositeMode::Moment, 1, &mut rng).unwrap() - kl).abs() <= 1e-12);
            prop_assert!((mddm_loss(&q, &p, 1.0).unwrap() - kl).abs() <= 1e-12);
            let mid = mddm_loss(&q, &p, 0.5).unwrap();
            let ends = 0.5 * (mddm_loss(&q, &p, 0.0).unwrap() + mddm_loss(&q, &p, 1.0).unwrap());
            prop_assert!((mid - ends).abs() <= 1e-12 * (1.0 + ends.abs()));
        }
    }
}
