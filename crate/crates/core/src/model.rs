//! Mult-VAE encoder/decoder and the probabilistic meta-network.
//!
//! Interaction vectors are passed as their support (sorted item indices), which is the binary
//! vector `x_u` without the zeros. Every forward function has a `*_forward` variant returning a
//! cache that the matching `*_backward` consumes to accumulate parameter gradients.

use serde::{Deserialize, Serialize};

use crate::data::MetaKnowledgeTable;
use crate::distributions::{DiagonalGaussian, GaussianGrad, LOG_VARIANCE_MAX, LOG_VARIANCE_MIN};
use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Matrix, Parameters, Rng};

/// One affine layer; `bias` is a `1 × out` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(inputs, outputs),
            bias: Matrix::zeros(1, outputs),
        }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier(inputs: usize, outputs: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            weight: Matrix::xavier_uniform(inputs, outputs, rng)?,
            bias: Matrix::zeros(1, outputs),
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.weight.affine(input, self.bias.as_slice())
    }

    fn forward_tanh(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut h = self.forward(input)?;
        h.iter_mut().for_each(|v| *v = v.tanh());
        Ok(h)
    }

    /// Accumulates weight/bias gradients for `out = input · W + b` and returns `∂/∂input`.
    fn backward(&self, input: &[f64], grad_out: &[f64], grad: &mut Layer) -> Vec<f64> {
        grad.weight.add_outer(1.0, input, grad_out);
        crate::numerics::axpy(1.0, grad_out, grad.bias.as_mut_slice());
        self.weight.mul_vec(grad_out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub items: usize,
    pub hidden: usize,
    pub latent: usize,
    pub semantic: usize,
    pub meta_hidden: usize,
}

impl ModelDims {
    /// Meta-network hidden width defaults to twice the latent width.
    pub fn new(items: usize, hidden: usize, latent: usize, semantic: usize) -> Self {
        Self {
            items,
            hidden,
            latent,
            semantic,
            meta_hidden: 2 * latent,
        }
    }
}

/// Encoder `N → h → 2d` and decoder `d → h → N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultVaeParams {
    pub encoder_hidden: Layer,
    pub encoder_out: Layer,
    pub decoder_hidden: Layer,
    pub decoder_out: Layer,
}

/// Two affine layers `d_s → d_m → 2d` with a Tanh between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaNetParams {
    pub hidden: Layer,
    pub out: Layer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub vae: MultVaeParams,
    pub meta: MetaNetParams,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let ModelDims {
            items,
            hidden,
            latent,
            semantic,
            meta_hidden,
        } = dims;
        Self {
            vae: MultVaeParams {
                encoder_hidden: Layer::zeros(items, hidden),
                encoder_out: Layer::zeros(hidden, 2 * latent),
                decoder_hidden: Layer::zeros(latent, hidden),
                decoder_out: Layer::zeros(hidden, items),
            },
            meta: MetaNetParams {
                hidden: Layer::zeros(semantic, meta_hidden),
                out: Layer::zeros(meta_hidden, 2 * latent),
            },
        }
    }

    /// Xavier initialization in a fixed order: encoder, decoder, meta-network.
    pub fn init(dims: ModelDims, rng: &mut Rng) -> Result<Self> {
        let ModelDims {
            items,
            hidden,
            latent,
            semantic,
            meta_hidden,
        } = dims;
        Ok(Self {
            vae: MultVaeParams {
                encoder_hidden: Layer::xavier(items, hidden, rng)?,
                encoder_out: Layer::xavier(hidden, 2 * latent, rng)?,
                decoder_hidden: Layer::xavier(latent, hidden, rng)?,
                decoder_out: Layer::xavier(hidden, items, rng)?,
            },
            meta: MetaNetParams {
                hidden: Layer::xavier(semantic, meta_hidden, rng)?,
                out: Layer::xavier(meta_hidden, 2 * latent, rng)?,
            },
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            items: self.vae.encoder_hidden.inputs(),
            hidden: self.vae.encoder_hidden.outputs(),
            latent: self.vae.decoder_hidden.inputs(),
            semantic: self.meta.hidden.inputs(),
            meta_hidden: self.meta.hidden.outputs(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.vae.decoder_hidden.inputs()
    }

    pub fn item_count(&self) -> usize {
        self.vae.encoder_hidden.inputs()
    }

    /// Replaces tensors in order from `(name, matrix)` pairs, checking names and shapes.
    pub fn from_named(dims: ModelDims, tensors: Vec<(String, Matrix)>) -> Result<Self> {
        let mut out = Self::zeros(dims);
        let names: Vec<String> = out.tensors().iter().map(|(n, _)| n.to_string()).collect();
        if tensors.len() != names.len() {
            return Err(Error::shape(format!(
                "expected {} tensors, found {}",
                names.len(),
                tensors.len()
            )));
        }
        for ((slot, want), (name, m)) in out.tensors_mut().into_iter().zip(&names).zip(tensors) {
            if &name != want || slot.shape() != m.shape() {
                return Err(Error::shape(format!(
                    "tensor `{name}` {:?} does not fit `{want}` {:?}",
                    m.shape(),
                    slot.shape()
                )));
            }
            *slot = m;
        }
        Ok(out)
    }
}

impl Parameters for ModelParams {
    fn tensors(&self) -> Vec<(&str, &Matrix)> {
        vec![
            ("encoder.hidden.weight", &self.vae.encoder_hidden.weight),
            ("encoder.hidden.bias", &self.vae.encoder_hidden.bias),
            ("encoder.out.weight", &self.vae.encoder_out.weight),
            ("encoder.out.bias", &self.vae.encoder_out.bias),
            ("decoder.hidden.weight", &self.vae.decoder_hidden.weight),
            ("decoder.hidden.bias", &self.vae.decoder_hidden.bias),
            ("decoder.out.weight", &self.vae.decoder_out.weight),
            ("decoder.out.bias", &self.vae.decoder_out.bias),
            ("meta.hidden.weight", &self.meta.hidden.weight),
            ("meta.hidden.bias", &self.meta.hidden.bias),
            ("meta.out.weight", &self.meta.out.weight),
            ("meta.out.bias", &self.meta.out.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.vae.encoder_hidden.weight,
            &mut self.vae.encoder_hidden.bias,
            &mut self.vae.encoder_out.weight,
            &mut self.vae.encoder_out.bias,
            &mut self.vae.decoder_hidden.weight,
            &mut self.vae.decoder_hidden.bias,
            &mut self.vae.decoder_out.weight,
            &mut self.vae.decoder_out.bias,
            &mut self.meta.hidden.weight,
            &mut self.meta.hidden.bias,
            &mut self.meta.out.weight,
            &mut self.meta.out.bias,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Input dropout active.
    Train,
    /// Deterministic forward.
    Eval,
}

/// Splits a `[μ ‖ log σ²]` head into a Gaussian and records which log-variances were clamped.
fn split_head(head: &[f64], node: &str) -> Result<(DiagonalGaussian, Vec<bool>)> {
    if head.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(node));
    }
    let d = head.len() / 2;
    let raw_lv = &head[d..];
    let inside = raw_lv
        .iter()
        .map(|v| (LOG_VARIANCE_MIN..=LOG_VARIANCE_MAX).contains(v))
        .collect();
    let q = DiagonalGaussian::new(head[..d].to_vec(), raw_lv.to_vec())?;
    Ok((q, inside))
}

fn head_gradient(grad: &GaussianGrad, inside: &[bool]) -> Vec<f64> {
    let mut out = grad.mean.clone();
    out.extend(
        grad.log_variance
            .iter()
            .zip(inside)
            .map(|(g, &ok)| if ok { *g } else { 0.0 }),
    );
    out
}

/// L2-normalized input followed (in train mode) by inverted dropout on the support.
///
/// Returns the value placed at each support index. Zero entries of `x_u` stay zero and draw no
/// randomness.
pub fn dropout_input(support: &[usize], rate: f64, mode: Mode, rng: &mut Rng) -> Vec<f64> {
    if support.is_empty() {
        return Vec::new();
    }
    let norm = 1.0 / (support.len() as f64).sqrt();
    match mode {
        Mode::Eval => vec![norm; support.len()],
        Mode::Train if rate <= 0.0 => vec![norm; support.len()],
        Mode::Train => {
            let keep = 1.0 - rate;
            support
                .iter()
                .map(|_| if rng.uniform() < keep { norm / keep } else { 0.0 })
                .collect()
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    support: Vec<usize>,
    input: Vec<f64>,
    hidden: Vec<f64>,
    inside: Vec<bool>,
}

/// `q_φ(z | x_u)`; in train mode applies input dropout at `dropout` rate.
pub fn encode(
    support: &[usize],
    params: &MultVaeParams,
    dropout: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<DiagonalGaussian> {
    Ok(encode_forward(support, params, dropout, mode, rng)?.0)
}

pub fn encode_forward(
    support: &[usize],
    params: &MultVaeParams,
    dropout: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(DiagonalGaussian, EncoderCache)> {
    let layer = &params.encoder_hidden;
    if let Some(&bad) = support.iter().find(|&&i| i >= layer.inputs()) {
        return Err(Error::shape(format!(
            "item {bad} outside encoder input width {}",
            layer.inputs()
        )));
    }
    let input = dropout_input(support, dropout, mode, rng);
    let mut hidden = layer
        .weight
        .sparse_affine(support, &input, layer.bias.as_slice());
    hidden.iter_mut().for_each(|v| *v = v.tanh());
    let head = params.encoder_out.forward(&hidden)?;
    let (q, inside) = split_head(&head, "encoder.out")?;
    Ok((
        q,
        EncoderCache {
            support: support.to_vec(),
            input,
            hidden,
            inside,
        },
    ))
}

pub fn encode_backward(
    cache: &EncoderCache,
    params: &MultVaeParams,
    grad_q: &GaussianGrad,
    grads: &mut MultVaeParams,
) {
    let grad_head = head_gradient(grad_q, &cache.inside);
    let grad_hidden = params
        .encoder_out
        .backward(&cache.hidden, &grad_head, &mut grads.encoder_out);
    let grad_pre: Vec<f64> = grad_hidden
        .iter()
        .zip(&cache.hidden)
        .map(|(g, h)| g * (1.0 - h * h))
        .collect();
    let gw = &mut grads.encoder_hidden.weight;
    for (&i, &x) in cache.support.iter().zip(&cache.input) {
        if x != 0.0 {
            crate::numerics::axpy(x, &grad_pre, gw.row_mut(i));
        }
    }
    crate::numerics::axpy(1.0, &grad_pre, grads.encoder_hidden.bias.as_mut_slice());
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    z: Vec<f64>,
    hidden: Vec<f64>,
}

/// `f_θ(z)`: Tanh hidden layer then an affine map to `N` logits.
pub fn decode_logits(z: &[f64], params: &MultVaeParams) -> Result<Vec<f64>> {
    Ok(decode_forward(z, params)?.0)
}

pub fn decode_forward(z: &[f64], params: &MultVaeParams) -> Result<(Vec<f64>, DecoderCache)> {
    let hidden = params.decoder_hidden.forward_tanh(z)?;
    let logits = params.decoder_out.forward(&hidden)?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("decoder.out"));
    }
    Ok((
        logits,
        DecoderCache {
            z: z.to_vec(),
            hidden,
        },
    ))
}

/// Accumulates decoder gradients and returns `∂/∂z`.
pub fn decode_backward(
    cache: &DecoderCache,
    params: &MultVaeParams,
    grad_logits: &[f64],
    grads: &mut MultVaeParams,
) -> Vec<f64> {
    let grad_hidden = params
        .decoder_out
        .backward(&cache.hidden, grad_logits, &mut grads.decoder_out);
    let grad_pre: Vec<f64> = grad_hidden
        .iter()
        .zip(&cache.hidden)
        .map(|(g, h)| g * (1.0 - h * h))
        .collect();
    params
        .decoder_hidden
        .backward(&cache.z, &grad_pre, &mut grads.decoder_hidden)
}

/// `Σ_i x_ui · log softmax(logits)_i` with max-shift stabilization.
pub fn multinomial_log_likelihood(logits: &[f64], support: &[usize]) -> f64 {
    if support.is_empty() {
        return 0.0;
    }
    let lse = log_sum_exp(logits);
    support.iter().map(|&i| logits[i] - lse).sum()
}

/// Log-likelihood and its gradient with respect to the logits: `x − |x|·softmax`.
pub fn multinomial_log_likelihood_grad(logits: &[f64], support: &[usize]) -> (f64, Vec<f64>) {
    if support.is_empty() {
        return (0.0, vec![0.0; logits.len()]);
    }
    let lse = log_sum_exp(logits);
    let n = support.len() as f64;
    let mut grad: Vec<f64> = logits.iter().map(|v| -n * (v - lse).exp()).collect();
    let mut ll = 0.0;
    for &i in support {
        ll += logits[i] - lse;
        grad[i] += 1.0;
    }
    (ll, grad)
}

/// Which base signal feeds the meta-learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaInput {
    /// Semantic rows of the interacted items plus the user's own row.
    InteractedItemsAndUser,
    /// The user's semantic row only.
    UserOnly,
}

/// Base signal `g = W_Iᵀ x_u + w_u` (or `w_u` alone for [`MetaInput::UserOnly`]).
pub fn meta_base_signal(
    support: &[usize],
    table: &MetaKnowledgeTable,
    user: usize,
    input: MetaInput,
) -> Result<Vec<f64>> {
    if user >= table.users().rows() {
        return Err(Error::DimensionMismatch(format!(
            "user {user} has no semantic row ({} rows)",
            table.users().rows()
        )));
    }
    let mut g = table.user(user).to_vec();
    if input == MetaInput::InteractedItemsAndUser {
        for &i in support {
            if i >= table.items().rows() {
                return Err(Error::DimensionMismatch(format!(
                    "item {i} has no semantic row ({} rows)",
                    table.items().rows()
                )));
            }
            crate::numerics::axpy(1.0, table.item(i), &mut g);
        }
    }
    Ok(g)
}

#[derive(Debug, Clone)]
pub struct MetaCache {
    base: Vec<f64>,
    hidden: Vec<f64>,
    inside: Vec<bool>,
}

/// `p_φ'(z | s_u)` from the meta-network.
pub fn meta_forward(
    support: &[usize],
    table: &MetaKnowledgeTable,
    user: usize,
    params: &MetaNetParams,
    input: MetaInput,
) -> Result<DiagonalGaussian> {
    Ok(meta_forward_cached(support, table, user, params, input)?.0)
}

pub fn meta_forward_cached(
    support: &[usize],
    table: &MetaKnowledgeTable,
    user: usize,
    params: &MetaNetParams,
    input: MetaInput,
) -> Result<(DiagonalGaussian, MetaCache)> {
    if table.width() != params.hidden.inputs() {
        return Err(Error::DimensionMismatch(format!(
            "semantic width {} does not match meta-network input {}",
            table.width(),
            params.hidden.inputs()
        )));
    }
    let base = meta_base_signal(support, table, user, input)?;
    let hidden = params.hidden.forward_tanh(&base)?;
    let head = params.out.forward(&hidden)?;
    let (p, inside) = split_head(&head, "meta.out")?;
    Ok((p, MetaCache { base, hidden, inside }))
}

pub fn meta_backward(
    cache: &MetaCache,
    params: &MetaNetParams,
    grad_p: &GaussianGrad,
    grads: &mut MetaNetParams,
) {
    let grad_head = head_gradient(grad_p, &cache.inside);
    let grad_hidden = params.out.backward(&cache.hidden, &grad_head, &mut grads.out);
    let grad_pre: Vec<f64> = grad_hidden
        .iter()
        .zip(&cache.hidden)
        .map(|(g, h)| g * (1.0 - h * h))
        .collect();
    params.hidden.backward(&cache.base, &grad_pre, &mut grads.hidden);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax;

    fn tiny_dims() -> ModelDims {
        ModelDims::new(5, 3, 2, 4)
    }

    #[test]
    fn zero_params_give_standard_gaussian() {
        let p = ModelParams::zeros(tiny_dims());
        let q = encode(&[0, 3], &p.vae, 0.5, Mode::Eval, &mut Rng::new(0)).unwrap();
        assert_eq!(q, DiagonalGaussian::standard(2));
        assert_eq!(decode_logits(&[0.3, -1.0], &p.vae).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn eval_encode_is_deterministic() {
        let p = ModelParams::init(tiny_dims(), &mut Rng::new(4)).unwrap();
        let a = encode(&[1, 2], &p.vae, 0.5, Mode::Eval, &mut Rng::new(1)).unwrap();
        let b = encode(&[1, 2], &p.vae, 0.5, Mode::Eval, &mut Rng::new(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encode_hand_computed() {
        // N=2, h=1, d=1; x=(1,1) normalizes to (1/√2, 1/√2)
        let mut p = ModelParams::zeros(ModelDims::new(2, 1, 1, 1));
        p.vae.encoder_hidden.weight = Matrix::from_rows(&[vec![0.5], vec![1.5]]).unwrap();
        p.vae.encoder_hidden.bias = Matrix::row_vector(vec![-0.2]);
        p.vae.encoder_out.weight = Matrix::from_rows(&[vec![2.0, -1.0]]).unwrap();
        p.vae.encoder_out.bias = Matrix::row_vector(vec![0.1, 0.3]);
        let q = encode(&[0, 1], &p.vae, 0.0, Mode::Eval, &mut Rng::new(0)).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let h = (0.5 * s + 1.5 * s - 0.2f64).tanh();
        assert!((q.mean()[0] - (2.0 * h + 0.1)).abs() < 1e-15);
        assert!((q.log_variance()[0] - (-h + 0.3)).abs() < 1e-15);
    }

    #[test]
    fn decode_bias_paths() {
        let mut p = ModelParams::zeros(ModelDims::new(3, 2, 2, 1));
        p.vae.decoder_out.bias = Matrix::row_vector(vec![0.5, -1.0, 2.0]);
        assert_eq!(decode_logits(&[0.0, 0.0], &p.vae).unwrap(), vec![0.5, -1.0, 2.0]);
        // nonzero hidden bias flows through tanh
        p.vae.decoder_hidden.bias = Matrix::row_vector(vec![0.3, 0.0]);
        p.vae.decoder_out.weight = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let l = decode_logits(&[0.0, 0.0], &p.vae).unwrap();
        assert!((l[0] - (0.5 + 0.3f64.tanh())).abs() < 1e-15);
    }

    #[test]
    fn decode_hand_two_by_two() {
        let mut p = ModelParams::zeros(ModelDims::new(2, 2, 2, 1));
        p.vae.decoder_hidden.weight = Matrix::from_rows(&[vec![1.0, 0.5], vec![-1.0, 2.0]]).unwrap();
        p.vae.decoder_out.weight = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.25]]).unwrap();
        let z = [0.2, 0.1];
        let h0 = (0.2 - 0.1f64).tanh();
        let h1 = (0.1 + 0.2f64).tanh();
        let l = decode_logits(&z, &p.vae).unwrap();
        assert!((l[0] - (h0 + 0.5 * h1)).abs() < 1e-15);
        assert!((l[1] - (-2.0 * h0 + 0.25 * h1)).abs() < 1e-15);
    }

    #[test]
    fn multinomial_examples() {
        assert!((multinomial_log_likelihood(&[0.0, 0.0], &[0]) - 0.5f64.ln()).abs() < 1e-15);
        let v = multinomial_log_likelihood(&[0.0, 0.0, 0.0], &[0, 2]);
        assert!((v - 2.0 * (1.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((v + 2.1972).abs() < 1e-4);
        let logits = [0.3, -1.2, 2.0, 0.7];
        let shifted: Vec<f64> = logits.iter().map(|v| v + 1000.0).collect();
        let a = multinomial_log_likelihood(&logits, &[1, 2]);
        let b = multinomial_log_likelihood(&shifted, &[1, 2]);
        assert!((a - b).abs() < 1e-12);
        assert_eq!(multinomial_log_likelihood(&logits, &[]), 0.0);
        assert!((softmax(&shifted).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    fn hand_table() -> MetaKnowledgeTable {
        MetaKnowledgeTable::new(
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn meta_base_signal_structure() {
        let t = hand_table();
        let g = meta_base_signal(&[], &t, 0, MetaInput::InteractedItemsAndUser).unwrap();
        assert_eq!(g, vec![1.0, 1.0]);
        let g = meta_base_signal(&[0, 1], &t, 0, MetaInput::InteractedItemsAndUser).unwrap();
        assert_eq!(g, vec![2.0, 2.0]);
        let g = meta_base_signal(&[0, 1], &t, 0, MetaInput::UserOnly).unwrap();
        assert_eq!(g, vec![1.0, 1.0]);
        // disjoint supports add up, minus one copy of the user row
        let a = meta_base_signal(&[0], &t, 0, MetaInput::InteractedItemsAndUser).unwrap();
        let b = meta_base_signal(&[1], &t, 0, MetaInput::InteractedItemsAndUser).unwrap();
        let joint = meta_base_signal(&[0, 1], &t, 0, MetaInput::InteractedItemsAndUser).unwrap();
        for k in 0..2 {
            assert_eq!(joint[k], a[k] + b[k] - t.user(0)[k]);
        }
    }

    #[test]
    fn meta_forward_hand_computed() {
        let t = hand_table();
        let mut p = ModelParams::zeros(ModelDims {
            items: 2,
            hidden: 1,
            latent: 1,
            semantic: 2,
            meta_hidden: 1,
        });
        p.meta.hidden.weight = Matrix::from_rows(&[vec![0.25], vec![-0.1]]).unwrap();
        p.meta.hidden.bias = Matrix::row_vector(vec![0.05]);
        p.meta.out.weight = Matrix::from_rows(&[vec![1.0, -2.0]]).unwrap();
        p.meta.out.bias = Matrix::row_vector(vec![0.0, 0.5]);
        let g = meta_forward(&[0, 1], &t, 0, &p.meta, MetaInput::InteractedItemsAndUser).unwrap();
        // g = (2, 2); hidden = tanh(0.5 - 0.2 + 0.05)
        let h = 0.35f64.tanh();
        assert!((g.mean()[0] - h).abs() < 1e-15);
        assert!((g.log_variance()[0] - (0.5 - 2.0 * h)).abs() < 1e-15);

        // final layer zero => standard Gaussian regardless of input
        p.meta.out = Layer::zeros(1, 2);
        let g = meta_forward(&[1], &t, 0, &p.meta, MetaInput::InteractedItemsAndUser).unwrap();
        assert_eq!(g, DiagonalGaussian::standard(1));
    }

    #[test]
    fn meta_forward_width_mismatch() {
        let t = hand_table();
        let p = ModelParams::zeros(ModelDims::new(2, 1, 1, 3));
        assert!(matches!(
            meta_forward(&[0], &t, 0, &p.meta, MetaInput::InteractedItemsAndUser),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn dropout_is_unbiased() {
        let support = [0, 4, 7];
        let eval = dropout_input(&support, 0.5, Mode::Eval, &mut Rng::new(0));
        let mut rng = Rng::new(12);
        let n = 10_000;
        let mut mean = vec![0.0; 3];
        let mut sq = vec![0.0; 3];
        for _ in 0..n {
            let x = dropout_input(&support, 0.5, Mode::Train, &mut rng);
            for k in 0..3 {
                mean[k] += x[k] / n as f64;
                sq[k] += x[k] * x[k] / n as f64;
            }
        }
        for k in 0..3 {
            let se = ((sq[k] - mean[k] * mean[k]) / n as f64).sqrt();
            assert!((mean[k] - eval[k]).abs() <= 3.0 * se, "{k}: {} vs {}", mean[k], eval[k]);
        }
        // masks differ between draws
        let a = dropout_input(&[0, 1, 2, 3, 4, 5, 6, 7], 0.5, Mode::Train, &mut rng);
        let b = dropout_input(&[0, 1, 2, 3, 4, 5, 6, 7], 0.5, Mode::Train, &mut rng);
        assert_ne!(a, b);
    }

    #[test]
    fn from_named_checks_shapes() {
        let p = ModelParams::init(tiny_dims(), &mut Rng::new(1)).unwrap();
        let named: Vec<(String, Matrix)> =
            p.tensors().into_iter().map(|(n, m)| (n.to_string(), m.clone())).collect();
        assert_eq!(ModelParams::from_named(tiny_dims(), named.clone()).unwrap(), p);
        let other = ModelDims::new(6, 3, 2, 4);
        assert!(matches!(ModelParams::from_named(other, named), Err(Error::InvalidShape(_))));
    }
}
