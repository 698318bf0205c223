//! Joint objective, the epoch loop with early stopping on validation Recall@20, and checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, Split};
use crate::matching::{matching_loss_grad, Ablation, MatchingConfig, Strategy};
use crate::model::{
    decode_backward, decode_forward, encode_backward, encode_forward, meta_backward,
    meta_forward_cached, multinomial_log_likelihood_grad, MetaInput, ModelDims, ModelParams, Mode,
};
use crate::numerics::{AdamConfig, Matrix, ParameterBlock, Parameters, Rng};

const STREAM_INIT: u64 = 0;
const STREAM_EPOCH_BASE: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F64,
    /// Parameters are rounded to `f32` after every update.
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub hidden: usize,
    pub latent: usize,
    /// Input dropout rate in train mode.
    pub dropout: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: 600,
            latent: 200,
            dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs_max: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub patience: usize,
    pub matching: MatchingConfig,
    pub architecture: Architecture,
    /// Final weight of the standard-prior KL for strategy `none`.
    pub anneal_cap: f64,
    /// Updates over which that weight ramps linearly from 0; 0 means constant at the cap.
    pub anneal_steps: u64,
    /// Also scale the whole matching loss of godm/cpdm/mddm by the annealed weight.
    pub anneal_matching: bool,
    pub precision: Precision,
    /// Worker threads for validation scoring.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_max: 200,
            batch_size: crate::data::DEFAULT_BATCH_SIZE,
            lr: 1e-3,
            seed: 0,
            eval_every: 1,
            patience: 20,
            matching: MatchingConfig::default(),
            architecture: Architecture::default(),
            anneal_cap: 0.2,
            anneal_steps: 200_000,
            anneal_matching: false,
            precision: Precision::F64,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs_max", self.epochs_max),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("patience", self.patience),
            ("architecture.hidden", self.architecture.hidden),
            ("architecture.latent", self.architecture.latent),
            ("threads", self.threads),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be >= 1")));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.architecture.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if !(self.anneal_cap >= 0.0 && self.anneal_cap.is_finite()) {
            return Err(Error::config("anneal_cap must be finite and >= 0"));
        }
        self.matching.validate()
    }

    /// Weight on `KL(q ‖ N(0, I))` for strategy `none` after `updates` optimizer steps.
    pub fn kl_weight(&self, updates: u64) -> f64 {
        if self.anneal_steps == 0 {
            self.anneal_cap
        } else {
            self.anneal_cap * (updates as f64 / self.anneal_steps as f64).min(1.0)
        }
    }

    fn meta_input(&self) -> MetaInput {
        match self.matching.ablation {
            Ablation::NoPmn => MetaInput::UserOnly,
            _ => MetaInput::InteractedItemsAndUser,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Model shape for a dataset; the semantic width is 1 when no table is present.
pub fn model_dims(data: &Dataset, arch: &Architecture) -> ModelDims {
    let semantic = data.knowledge.as_ref().map_or(1, |k| k.width());
    ModelDims::new(data.interactions.item_count(), arch.hidden, arch.latent, semantic)
}

/// Xavier initialization from the seed's init stream; the meta-network is always initialized.
pub fn init_params(data: &Dataset, config: &TrainConfig) -> Result<ModelParams> {
    let mut rng = Rng::new(config.seed).fork(STREAM_INIT);
    ModelParams::init(model_dims(data, &config.architecture), &mut rng)
}

fn check_dataset(data: &Dataset, config: &TrainConfig) -> Result<()> {
    if config.matching.strategy.uses_semantic_prior() {
        let table = data
            .knowledge
            .as_ref()
            .ok_or_else(|| Error::config("matching strategies need semantic embeddings"))?;
        table.validate_for(&data.interactions)?;
    }
    Ok(())
}

/// One user's `−log p(x | z*) + L_DM`, accumulating `scale`-weighted gradients into `grads`.
#[allow(clippy::too_many_arguments)]
fn user_loss(
    user: usize,
    data: &Dataset,
    params: &ModelParams,
    config: &TrainConfig,
    kl_weight: f64,
    scale: f64,
    rng: &mut Rng,
    grads: &mut ModelParams,
) -> Result<f64> {
    let items = &data.interactions.train[user];
    let (q, enc) = encode_forward(items, &params.vae, config.architecture.dropout, Mode::Train, rng)?;
    let semantic = match (&data.knowledge, config.matching.strategy) {
        (_, Strategy::None) => None,
        (Some(table), _) => Some(meta_forward_cached(items, table, user, &params.meta, config.meta_input())?),
        (None, _) => return Err(Error::config("matching strategies need semantic embeddings")),
    };
    let p = semantic.as_ref().map(|(p, _)| p);

    let d = q.dim();
    let eps = rng.normals(d);
    let add = config.matching.ablation == Ablation::Add;
    let (vq, vp) = (q.variance(), p.map(|p| p.variance()));
    let z: Vec<f64> = match (add, p, &vp) {
        (true, Some(p), Some(vp)) => (0..d)
            .map(|k| q.mean()[k] + p.mean()[k] + (vq[k] + vp[k]).sqrt() * eps[k])
            .collect(),
        _ => q.reparameterize(&eps),
    };

    let (logits, dec) = decode_forward(&z, &params.vae)?;
    let (ll, mut grad_logits) = multinomial_log_likelihood_grad(&logits, items);
    grad_logits.iter_mut().for_each(|g| *g *= -scale);
    let dz = decode_backward(&dec, &params.vae, &grad_logits, &mut grads.vae);

    let m = matching_loss_grad(&q, p, &config.matching, kl_weight, rng)?;
    let weight = if config.anneal_matching && p.is_some() { kl_weight } else { 1.0 };
    let mut gq = m.q.scaled(scale * weight);
    let mut gp = m.p.scaled(scale * weight);
    match (add, &vp) {
        (true, Some(vp)) => {
            for k in 0..d {
                let s = (vq[k] + vp[k]).sqrt();
                gq.mean[k] += dz[k];
                gp.mean[k] += dz[k];
                gq.log_variance[k] += dz[k] * eps[k] * 0.5 * vq[k] / s;
                gp.log_variance[k] += dz[k] * eps[k] * 0.5 * vp[k] / s;
            }
        }
        _ => {
            let sd = q.std_dev();
            for k in 0..d {
                gq.mean[k] += dz[k];
                gq.log_variance[k] += dz[k] * eps[k] * 0.5 * sd[k];
            }
        }
    }
    encode_backward(&enc, &params.vae, &gq, &mut grads.vae);
    if let Some((_, cache)) = &semantic {
        meta_backward(cache, &params.meta, &gp, &mut grads.meta);
    }
    Ok(-ll + weight * m.value)
}

/// Mean over `batch` of the per-user joint loss, with its gradient.
///
/// Randomness is consumed user by user in batch order: dropout uniforms for the user's training
/// items, then `d` standard normals for `z*`, then any Monte-Carlo draws of the matching loss.
pub fn total_loss_grad(
    batch: &[usize],
    data: &Dataset,
    params: &ModelParams,
    config: &TrainConfig,
    kl_weight: f64,
    rng: &mut Rng,
) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = ModelParams::zeros(params.dims());
    let mut total = 0.0;
    for &u in batch {
        total += user_loss(u, data, params, config, kl_weight, scale, rng, &mut grads)?;
        if !total.is_finite() {
            return Err(Error::numeric(format!("total loss at user {u}")));
        }
    }
    Ok((total * scale, grads))
}

pub fn total_loss(
    batch: &[usize],
    data: &Dataset,
    params: &ModelParams,
    config: &TrainConfig,
    kl_weight: f64,
    rng: &mut Rng,
) -> Result<f64> {
    Ok(total_loss_grad(batch, data, params, config, kl_weight, rng)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub block: ParameterBlock<ModelParams>,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        Self {
            block: ParameterBlock::new(params),
            epoch: 0,
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.block.params
    }
}

fn round_to_f32(params: &mut ModelParams) {
    for t in params.tensors_mut() {
        t.as_mut_slice().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

/// One shuffled pass over all users with an Adam step per batch; returns the mean batch loss.
pub fn train_epoch(state: &mut TrainState, data: &Dataset, config: &TrainConfig, rng: &mut Rng) -> Result<f64> {
    let adam = config.adam();
    let batches = batch_iter(data.interactions.user_count(), config.batch_size, rng, true)?;
    let mut total = 0.0;
    for batch in &batches {
        let w = config.kl_weight(state.block.step());
        let (loss, grads) = total_loss_grad(batch, data, &state.block.params, config, w, rng)?;
        state.block.adam_step(&grads, &adam)?;
        if config.precision == Precision::F32 {
            round_to_f32(&mut state.block.params);
        }
        total += loss;
    }
    state.epoch += 1;
    Ok(total / batches.len().max(1) as f64)
}

/// Patience bookkeeping: an evaluation counts as an improvement only if strictly better.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_eval: usize,
    evals: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_eval: 0,
            evals: 0,
            stale: 0,
        }
    }

    /// Records a metric; returns `(improved, stop)`.
    pub fn observe(&mut self, metric: f64) -> (bool, bool) {
        self.evals += 1;
        if metric > self.best {
            self.best = metric;
            self.best_eval = self.evals;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }

    pub fn evaluations(&self) -> usize {
        self.evals
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub loss: f64,
    pub val_recall_20: Option<f64>,
    pub val_ndcg_20: Option<f64>,
    pub best_recall_20: f64,
}

pub fn write_history_csv(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "epoch,loss,val_recall@20,val_ndcg@20")?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        writeln!(out, "{},{},{},{}", r.epoch, r.loss, opt(r.val_recall_20), opt(r.val_ndcg_20))?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub dims: ModelDims,
    /// Validation Recall@20 of these parameters.
    pub best_metric: f64,
    pub epoch: usize,
    #[serde(skip, default = "empty_params")]
    pub params: ModelParams,
}

fn empty_params() -> ModelParams {
    ModelParams::zeros(ModelDims::new(0, 0, 0, 0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryRow>,
    /// Parameters after the last epoch run (not necessarily the best).
    pub final_params: ModelParams,
}

/// Trains from the seed's initialization until `epochs_max` or early stopping.
pub fn fit(data: &Dataset, config: &TrainConfig) -> Result<FitOutcome> {
    fit_from(init_params(data, config)?, data, config)
}

/// Like [`fit`] but starting from given parameters.
pub fn fit_from(params: ModelParams, data: &Dataset, config: &TrainConfig) -> Result<FitOutcome> {
    config.validate()?;
    check_dataset(data, config)?;
    if !data.interactions.has_validation() {
        return Err(Error::config("dataset has no validation interactions"));
    }
    let dims = params.dims();
    if dims != model_dims(data, &config.architecture) {
        return Err(Error::shape(format!(
            "parameters {dims:?} do not fit the dataset/architecture"
        )));
    }
    let master = Rng::new(config.seed);
    let mut state = TrainState::new(params);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = (state.block.params.clone(), 0usize);
    let mut history = Vec::new();
    for epoch in 1..=config.epochs_max {
        let mut rng = master.fork(STREAM_EPOCH_BASE + epoch as u64);
        let loss = train_epoch(&mut state, data, config, &mut rng)?;
        let mut row = HistoryRow {
            epoch,
            loss,
            val_recall_20: None,
            val_ndcg_20: None,
            best_recall_20: stopper.best,
        };
        let mut stop = false;
        if epoch % config.eval_every == 0 || epoch == config.epochs_max {
            let report = evaluate(&state.block.params, &data.interactions, Split::Validation, &[20], config.threads)?;
            let recall = report.recall(20).unwrap_or(0.0);
            let (improved, halt) = stopper.observe(recall);
            if improved {
                best = (state.block.params.clone(), epoch);
            }
            row.val_recall_20 = Some(recall);
            row.val_ndcg_20 = report.ndcg(20);
            row.best_recall_20 = stopper.best;
            stop = halt;
        }
        history.push(row);
        if stop {
            break;
        }
    }
    Ok(FitOutcome {
        checkpoint: Checkpoint {
            config: config.clone(),
            dims,
            best_metric: stopper.best,
            epoch: best.1,
            params: best.0,
        },
        history,
        final_params: state.block.params,
    })
}

pub const CHECKPOINT_MAGIC: &str = "DMCKPT1";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    #[serde(flatten)]
    header: Checkpoint,
    tensors: Vec<String>,
}

/// Layout: `DMCKPT1\n`, a version byte, a little-endian `u64` JSON length, the JSON metadata, then
/// per tensor an ASCII `tensor <name> <rows> <cols>\n` line followed by little-endian `f64`s.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let tensors = checkpoint.params.tensors();
    let meta = CheckpointMeta {
        header: checkpoint.clone(),
        tensors: tensors.iter().map(|(n, _)| n.to_string()).collect(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC.as_bytes())?;
    out.write_all(b"\n")?;
    out.write_all(&[CHECKPOINT_VERSION])?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for (name, m) in tensors {
        write!(out, "tensor {name} {} {}\n", m.rows(), m.cols())?;
        for v in m.as_slice() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Truncated(what));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn line(&mut self, what: &'static str) -> Result<&'a str> {
        let end = self
            .bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or(Error::Truncated(what))?;
        let line = self.take(end + 1, what)?;
        std::str::from_utf8(&line[..end]).map_err(|_| malformed(format!("{what} is not ASCII")))
    }
}

fn malformed(message: impl Into<String>) -> Error {
    Error::Malformed {
        what: "checkpoint",
        message: message.into(),
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let magic = CHECKPOINT_MAGIC.as_bytes();
    if bytes.len() < magic.len() + 1 || &bytes[..magic.len()] != magic || bytes[magic.len()] != b'\n' {
        return Err(Error::BadMagic {
            what: "checkpoint",
            expected: CHECKPOINT_MAGIC,
        });
    }
    let mut cur = Cursor {
        bytes: &bytes[magic.len() + 1..],
    };
    let version = cur.take(1, "checkpoint version")?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "checkpoint",
            found: version,
        });
    }
    let len = u64::from_le_bytes(cur.take(8, "checkpoint metadata length")?.try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| malformed("metadata length overflows"))?;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(len, "checkpoint metadata")?)?;
    let mut named = Vec::with_capacity(meta.tensors.len());
    for expected in &meta.tensors {
        let header = cur.line("tensor header")?;
        let parts: Vec<&str> = header.split(' ').collect();
        let [tag, name, rows, cols] = parts[..] else {
            return Err(malformed(format!("bad tensor header `{header}`")));
        };
        if tag != "tensor" || name != expected {
            return Err(malformed(format!("expected tensor `{expected}`, found `{header}`")));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| malformed(format!("bad shape in `{header}`")));
        let (rows, cols) = (parse(rows)?, parse(cols)?);
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| malformed("tensor size overflows"))?;
        let values = cur
            .take(n, "tensor body")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        named.push((name.to_string(), Matrix::from_vec(rows, cols, values)?));
    }
    if !cur.bytes.is_empty() {
        return Err(malformed(format!("{} trailing bytes", cur.bytes.len())));
    }
    let mut checkpoint = meta.header;
    checkpoint.params = ModelParams::from_named(checkpoint.dims, named)?;
    Ok(checkpoint)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_checkpoint(&bytes)
}

impl Checkpoint {
    /// Errors unless the parameters fit `data` (item count and semantic width).
    pub fn check_compatible(&self, data: &Dataset) -> Result<()> {
        let want = model_dims(data, &self.config.architecture);
        let have = self.params.dims();
        if want.items != have.items || (data.knowledge.is_some() && want.semantic != have.semantic) {
            return Err(Error::DimensionMismatch(format!(
                "checkpoint expects {} items / semantic width {}, dataset has {} / {}",
                have.items, have.semantic, want.items, want.semantic
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, IdMapping, InteractionMatrix, MetaKnowledgeTable, SyntheticSpec};
    use crate::numerics::finite_difference_check;

    pub(crate) fn tiny_dataset(seed: u64) -> Dataset {
        let mut rng = Rng::new(seed);
        let rows: Vec<Vec<usize>> = (0..4)
            .map(|u| {
                let mut r: Vec<usize> = (0..6).filter(|_| rng.bernoulli(0.5)).collect();
                if r.is_empty() {
                    r.push(u);
                }
                r
            })
            .collect();
        let mut m = InteractionMatrix::from_user_items(6, rows, IdMapping::sequential(4, 6)).unwrap();
        m.validation = vec![vec![5], vec![], vec![0], vec![]];
        let table = MetaKnowledgeTable::new(
            Matrix::from_vec(6, 3, rng.normals(18)).unwrap(),
            Matrix::from_vec(4, 3, rng.normals(12)).unwrap(),
        )
        .unwrap();
        Dataset::new(m, Some(table)).unwrap()
    }

    fn tiny_config(matching: MatchingConfig) -> TrainConfig {
        TrainConfig {
            epochs_max: 3,
            batch_size: 2,
            lr: 0.01,
            seed: 11,
            matching,
            architecture: Architecture {
                hidden: 3,
                latent: 2,
                dropout: 0.5,
            },
            anneal_steps: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_params_uniform_softmax() {
        let data = tiny_dataset(1);
        let mut config = tiny_config(MatchingConfig::new(Strategy::None));
        config.anneal_cap = 0.0;
        let params = ModelParams::zeros(model_dims(&data, &config.architecture));
        let batch = [0, 1, 2, 3];
        let loss = total_loss(&batch, &data, &params, &config, 0.0, &mut Rng::new(0)).unwrap();
        let expected: f64 = batch
            .iter()
            .map(|&u| -(data.interactions.train[u].len() as f64) * (1.0f64 / 6.0).ln())
            .sum::<f64>()
            / 4.0;
        assert!((loss - expected).abs() < 1e-12);
    }

    /// Straight-line MDDM objective written with plain loops, sharing only the random stream.
    fn oracle_mddm(batch: &[usize], data: &Dataset, p: &ModelParams, dropout: f64, beta: f64, rng: &mut Rng) -> f64 {
        let layer = |w: &Matrix, b: &Matrix, x: &[f64], tanh: bool| -> Vec<f64> {
            let mut out = Vec::new();
            for j in 0..w.cols() {
                let mut s = b.get(0, j);
                for i in 0..w.rows() {
                    s += x[i] * w.get(i, j);
                }
                out.push(if tanh { s.tanh() } else { s });
            }
            out
        };
        let table = data.knowledge.as_ref().unwrap();
        let n_items = data.interactions.item_count();
        let mut total = 0.0;
        for &u in batch {
            let items = &data.interactions.train[u];
            let mut x = vec![0.0; n_items];
            let norm = (items.len() as f64).sqrt();
            for &i in items {
                x[i] = 1.0 / norm;
                if rng.uniform() < 1.0 - dropout {
                    x[i] /= 1.0 - dropout;
                } else {
                    x[i] = 0.0;
                }
            }
            let h = layer(&p.vae.encoder_hidden.weight, &p.vae.encoder_hidden.bias, &x, true);
            let head = layer(&p.vae.encoder_out.weight, &p.vae.encoder_out.bias, &h, false);
            let d = head.len() / 2;
            let mu_q = &head[..d];
            let lv_q: Vec<f64> = head[d..].iter().map(|v| v.clamp(-10.0, 10.0)).collect();

            let mut g = table.user(u).to_vec();
            for &i in items {
                for k in 0..g.len() {
                    g[k] += table.item(i)[k];
                }
            }
            let hm = layer(&p.meta.hidden.weight, &p.meta.hidden.bias, &g, true);
            let pm = layer(&p.meta.out.weight, &p.meta.out.bias, &hm, false);
            let mu_p = &pm[..d];
            let lv_p: Vec<f64> = pm[d..].iter().map(|v| v.clamp(-10.0, 10.0)).collect();

            let z: Vec<f64> = (0..d).map(|k| mu_q[k] + (0.5 * lv_q[k]).exp() * rng.normal()).collect();
            let hd = layer(&p.vae.decoder_hidden.weight, &p.vae.decoder_hidden.bias, &z, true);
            let logits = layer(&p.vae.decoder_out.weight, &p.vae.decoder_out.bias, &hd, false);
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
            let ll: f64 = items.iter().map(|&i| logits[i] - lse).sum();

            let mut kl_std = 0.0;
            let mut kl_qp = 0.0;
            for k in 0..d {
                let vq = lv_q[k].exp();
                let vp = lv_p[k].exp();
                kl_std += 0.5 * (vq + mu_q[k] * mu_q[k] - 1.0 - lv_q[k]);
                kl_qp += 0.5 * (lv_p[k] - lv_q[k] + (vq + (mu_q[k] - mu_p[k]).powi(2)) / vp - 1.0);
            }
            total += -ll + beta * kl_std + (1.0 - beta) * kl_qp;
        }
        total / batch.len() as f64
    }

    #[test]
    fn total_loss_matches_straight_line_oracle() {
        for seed in 0..5 {
            let data = tiny_dataset(seed);
            let config = tiny_config(MatchingConfig::new(Strategy::Mddm).with_beta(0.3));
            let params = init_params(&data, &config).unwrap();
            let batch = [2, 0, 3, 1];
            let got = total_loss(&batch, &data, &params, &config, 1.0, &mut Rng::new(seed + 100)).unwrap();
            let want = oracle_mddm(&batch, &data, &params, 0.5, 0.3, &mut Rng::new(seed + 100));
            assert!((got - want).abs() < 1e-10, "seed {seed}: {got} vs {want}");
        }
    }

    #[test]
    fn total_loss_gradient_check() {
        let configs = [
            MatchingConfig::new(Strategy::None),
            MatchingConfig::new(Strategy::Godm).with_beta(0.4),
            MatchingConfig::new(Strategy::Cpdm).with_beta(0.6),
            MatchingConfig::new(Strategy::Mddm).with_beta(0.3),
            MatchingConfig::new(Strategy::Mddm).with_ablation(Ablation::Add),
            MatchingConfig::new(Strategy::Mddm).with_ablation(Ablation::NoPmn),
            MatchingConfig::new(Strategy::Godm).with_ablation(Ablation::NoMixing),
        ];
        for (k, matching) in configs.into_iter().enumerate() {
            let data = tiny_dataset(k as u64);
            let config = tiny_config(matching);
            let params = init_params(&data, &config).unwrap();
            let objective = |p: &ModelParams| {
                total_loss_grad(&[0, 1, 2, 3], &data, p, &config, 0.7, &mut Rng::new(5))
            };
            let report = finite_difference_check(&objective, &params, 1e-5, 1e-4).unwrap();
            assert!(report.passed(), "{:?}: {:?}", config.matching, report.worst());
        }
    }

    #[test]
    fn annealed_matching_gradient_check() {
        for (k, strategy) in [Strategy::Godm, Strategy::Cpdm, Strategy::Mddm].into_iter().enumerate() {
            let data = tiny_dataset(10 + k as u64);
            let config = TrainConfig { anneal_matching: true, ..tiny_config(MatchingConfig::new(strategy)) };
            let params = init_params(&data, &config).unwrap();
            let objective = |p: &ModelParams| {
                total_loss_grad(&[0, 1, 2], &data, p, &config, 0.3, &mut Rng::new(9))
            };
            let report = finite_difference_check(&objective, &params, 1e-5, 1e-4).unwrap();
            assert!(report.passed(), "{strategy:?}: {:?}", report.worst());
        }
    }

    #[test]
    fn annealed_matching_scales_regularizer() {
        let data = tiny_dataset(4);
        let plain = tiny_config(MatchingConfig::new(Strategy::Mddm).with_beta(1.0));
        let annealed = TrainConfig { anneal_matching: true, ..plain.clone() };
        let none = tiny_config(MatchingConfig::new(Strategy::None));
        let params = init_params(&data, &plain).unwrap();
        let batch = [0, 1, 2, 3];
        // MDDM at beta 1 is KL_std, so annealing it must match `none` at the same weight.
        let a = total_loss(&batch, &data, &params, &annealed, 0.25, &mut Rng::new(1)).unwrap();
        let b = total_loss(&batch, &data, &params, &none, 0.25, &mut Rng::new(1)).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        let c = total_loss(&batch, &data, &params, &plain, 0.25, &mut Rng::new(1)).unwrap();
        assert!(c > a);
    }

    #[test]
    fn mddm_beta_one_equals_none_with_cap_one() {
        let data = tiny_dataset(3);
        let base = tiny_config(MatchingConfig::new(Strategy::None));
        let none = TrainConfig { anneal_cap: 1.0, anneal_steps: 0, ..base.clone() };
        let mddm = TrainConfig {
            matching: MatchingConfig::new(Strategy::Mddm).with_beta(1.0),
            ..none.clone()
        };
        let a = fit(&data, &none).unwrap();
        let b = fit(&data, &mddm).unwrap();
        assert_eq!(a.history.len(), b.history.len());
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
            assert_eq!(x.val_recall_20, y.val_recall_20);
        }
        assert_eq!(a.final_params, b.final_params);
    }

    #[test]
    fn lr_zero_leaves_parameters() {
        let data = tiny_dataset(2);
        let config = TrainConfig { lr: 0.0, ..tiny_config(MatchingConfig::new(Strategy::Cpdm)) };
        let params = init_params(&data, &config).unwrap();
        let mut state = TrainState::new(params.clone());
        let loss = train_epoch(&mut state, &data, &config, &mut Rng::new(1)).unwrap();
        assert!(loss.is_finite());
        assert_eq!(state.block.params, params);
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_dataset(4);
        let config = tiny_config(MatchingConfig::new(Strategy::Godm));
        let a = fit(&data, &config).unwrap();
        let b = fit(&data, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn early_stopping_arithmetic() {
        let mut s = EarlyStopping::new(20);
        let mut stopped_at = None;
        for e in 1..=100 {
            if s.observe(0.3).1 {
                stopped_at = Some(e);
                break;
            }
        }
        assert_eq!(stopped_at, Some(21));
        assert_eq!(s.best_eval, 1);

        let mut s = EarlyStopping::new(20);
        assert!((1..=50).all(|e| !s.observe(e as f64).1));
    }

    #[test]
    fn kl_anneal_schedule() {
        let c = TrainConfig { anneal_cap: 0.2, anneal_steps: 100, ..TrainConfig::default() };
        assert_eq!(c.kl_weight(0), 0.0);
        assert!((c.kl_weight(50) - 0.1).abs() < 1e-15);
        assert_eq!(c.kl_weight(1000), 0.2);
        let c = TrainConfig { anneal_steps: 0, ..c };
        assert_eq!(c.kl_weight(0), 0.2);
    }

    #[test]
    fn fit_requires_validation_and_semantics() {
        let mut data = tiny_dataset(1);
        let config = tiny_config(MatchingConfig::new(Strategy::Mddm));
        let no_sem = Dataset { knowledge: None, ..data.clone() };
        assert!(matches!(fit(&no_sem, &config), Err(Error::Config(_))));
        data.interactions.validation = vec![vec![]; 4];
        assert!(matches!(fit(&data, &config), Err(Error::Config(_))));
    }

    #[test]
    fn best_metric_is_maximum_and_monotone() {
        let data = tiny_dataset(6);
        let config = TrainConfig { epochs_max: 8, ..tiny_config(MatchingConfig::new(Strategy::Mddm)) };
        let out = fit(&data, &config).unwrap();
        let evals: Vec<f64> = out.history.iter().filter_map(|r| r.val_recall_20).collect();
        let max = evals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.checkpoint.best_metric, max);
        assert!(out.history.windows(2).all(|w| w[0].best_recall_20 <= w[1].best_recall_20));
        let again = evaluate(&out.checkpoint.params, &data.interactions, Split::Validation, &[20], 1).unwrap();
        assert_eq!(again.recall(20), Some(max));
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let data = tiny_dataset(7);
        let config = tiny_config(MatchingConfig::new(Strategy::Cpdm));
        let out = fit(&data, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &out.checkpoint).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, out.checkpoint);
        for ((_, a), (_, b)) in back.params.tensors().iter().zip(out.checkpoint.params.tensors()) {
            assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        let bytes = std::fs::read(&path).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(read_checkpoint(&bad), Err(Error::UnsupportedVersion { found: 9, .. })));
        assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));

        let wider = Dataset::new(
            InteractionMatrix::from_user_items(7, vec![vec![0]; 4], IdMapping::sequential(4, 7)).unwrap(),
            None,
        )
        .unwrap();
        assert!(matches!(back.check_compatible(&wider), Err(Error::DimensionMismatch(_))));
        assert!(back.check_compatible(&data).is_ok());
    }

    #[test]
    fn f32_precision_rounds_parameters() {
        let data = tiny_dataset(8);
        let config = TrainConfig {
            precision: Precision::F32,
            epochs_max: 1,
            ..tiny_config(MatchingConfig::new(Strategy::Mddm))
        };
        let out = fit(&data, &config).unwrap();
        for (_, t) in out.final_params.tensors() {
            assert!(t.as_slice().iter().all(|v| (*v as f32 as f64) == *v));
        }
    }

    #[test]
    fn synthetic_epoch_loss_mostly_decreases() {
        let mut decreasing_runs = 0;
        for seed in 0..10 {
            let synth = synth_generate(&SyntheticSpec::default(), &Rng::new(seed)).unwrap();
            let split = synth.interactions.split_ratio((3, 1, 1), &mut Rng::new(seed).fork(9)).unwrap();
            let data = Dataset::new(split, Some(synth.knowledge)).unwrap();
            let config = TrainConfig {
                batch_size: 32,
                lr: 1e-2,
                seed,
                matching: MatchingConfig::new(Strategy::None),
                architecture: Architecture { hidden: 64, latent: 16, dropout: 0.5 },
                anneal_steps: 0,
                ..TrainConfig::default()
            };
            let mut state = TrainState::new(init_params(&data, &config).unwrap());
            let master = Rng::new(seed);
            let losses: Vec<f64> = (1..=10)
                .map(|e| train_epoch(&mut state, &data, &config, &mut master.fork(e)).unwrap())
                .collect();
            if losses.windows(2).all(|w| w[1] <= w[0]) {
                decreasing_runs += 1;
            }
        }
        assert!(decreasing_runs >= 9, "{decreasing_runs}/10 runs non-increasing");
    }
}
