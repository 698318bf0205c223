//! Full-ranking evaluation, sparsity groups and the distribution-activity diagnostic.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::InteractionMatrix;
use crate::error::{Error, Result};
use crate::model::{decode_logits, encode, ModelParams, Mode};
use crate::numerics::Rng;

pub const DEFAULT_CUTOFFS: [usize; 2] = [10, 20];
/// Lower clamp for `ln a_k` when a latent dimension has (numerically) zero spread.
pub const ACTIVITY_LOG_FLOOR: f64 = -30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Validation,
    Test,
}

impl Split {
    pub fn targets(self, data: &InteractionMatrix, user: usize) -> &[usize] {
        match self {
            Split::Validation => &data.validation[user],
            Split::Test => &data.test[user],
        }
    }

    /// Items excluded from ranking: train for validation, train and validation for test.
    pub fn masked_items(self, data: &InteractionMatrix, user: usize) -> Vec<usize> {
        let mut out = data.train[user].clone();
        if self == Split::Test {
            out.extend_from_slice(&data.validation[user]);
        }
        out
    }
}

/// Item scores for one user: logits decoded from the posterior mean of the training vector.
pub fn score_items(params: &ModelParams, train_items: &[usize]) -> Result<Vec<f64>> {
    // eval-mode encoding draws no randomness
    let q = encode(train_items, &params.vae, 0.0, Mode::Eval, &mut Rng::new(0))?;
    decode_logits(q.mean(), &params.vae)
}

/// Indices of the `n` highest scores, skipping `masked`; ties go to the lower index.
pub fn top_n(scores: &[f64], n: usize, masked: &[usize]) -> Vec<usize> {
    let mut keep = vec![true; scores.len()];
    for &i in masked {
        if i < keep.len() {
            keep[i] = false;
        }
    }
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|&i| keep[i]).collect();
    let order = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if n < candidates.len() {
        candidates.select_nth_unstable_by(n, order);
        candidates.truncate(n);
    }
    candidates.sort_by(order);
    candidates
}

/// Top-`n` items for `user`, optionally masking the user's training items.
pub fn rank_topn(
    user: usize,
    params: &ModelParams,
    data: &InteractionMatrix,
    n: usize,
    mask_train: bool,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::config("n must be >= 1"));
    }
    let scores = score_items(params, &data.train[user])?;
    let masked: &[usize] = if mask_train { &data.train[user] } else { &[] };
    Ok(top_n(&scores, n, masked))
}

pub fn recall_at_n(topn: &[usize], test_items: &[usize]) -> f64 {
    if test_items.is_empty() {
        return 0.0;
    }
    let hits = topn.iter().filter(|i| test_items.contains(i)).count();
    hits as f64 / test_items.len() as f64
}

pub fn ndcg_at_n(topn: &[usize], test_items: &[usize]) -> f64 {
    if test_items.is_empty() {
        return 0.0;
    }
    let dcg: f64 = topn
        .iter()
        .enumerate()
        .filter(|(_, i)| test_items.contains(i))
        .fold(0.0, |acc, (k, _)| acc + 1.0 / ((k + 2) as f64).log2());
    let idcg: f64 = (0..topn.len().min(test_items.len()))
        .map(|k| 1.0 / ((k + 2) as f64).log2())
        .sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: usize,
    pub train_degree: usize,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    /// Inclusive upper bound on training degree (`None` for the open top group).
    pub max_degree: Option<usize>,
    pub users: usize,
    pub proportion: f64,
    #[serde(rename = "recall@20")]
    pub recall_20: f64,
    #[serde(rename = "ndcg@20")]
    pub ndcg_20: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityTable {
    pub edges: [usize; 3],
    pub groups: Vec<GroupRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub cutoffs: Vec<usize>,
    pub users_evaluated: usize,
    /// `recall@N` and `ndcg@N` averaged over evaluated users.
    #[serde(flatten)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub per_user: Vec<UserMetrics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub groups: Option<SparsityTable>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub log_activity: Option<Vec<f64>>,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn recall(&self, n: usize) -> Option<f64> {
        self.metric(&format!("recall@{n}"))
    }

    pub fn ndcg(&self, n: usize) -> Option<f64> {
        self.metric(&format!("ndcg@{n}"))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// `user_index,recall@10,recall@20,ndcg@10,ndcg@20` (one column per configured cutoff).
    pub fn write_per_user_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut header = vec!["user_index".to_string()];
        header.extend(self.cutoffs.iter().map(|n| format!("recall@{n}")));
        header.extend(self.cutoffs.iter().map(|n| format!("ndcg@{n}")));
        writeln!(out, "{}", header.join(","))?;
        for u in &self.per_user {
            let mut row = vec![u.user.to_string()];
            row.extend(u.recall.iter().chain(&u.ndcg).map(|v| v.to_string()));
            writeln!(out, "{}", row.join(","))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Runs `f` for each index in `0..count` over up to `threads` workers; results stay in index order.
pub fn parallel_map<T, F>(count: usize, threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let threads = threads.max(1).min(count.max(1));
    if threads == 1 {
        return (0..count).map(f).collect();
    }
    let chunk = count.div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let range = t * chunk..((t + 1) * chunk).min(count);
                s.spawn(move || range.map(f).collect::<Result<Vec<T>>>())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(count);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// Full-ranking metrics over every user with a non-empty target set for `split`.
pub fn evaluate(
    params: &ModelParams,
    data: &InteractionMatrix,
    split: Split,
    cutoffs: &[usize],
    threads: usize,
) -> Result<EvalReport> {
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(Error::config("cutoffs must be non-empty and >= 1"));
    }
    if params.item_count() != data.item_count() {
        return Err(Error::DimensionMismatch(format!(
            "model scores {} items, dataset has {}",
            params.item_count(),
            data.item_count()
        )));
    }
    let users: Vec<usize> = (0..data.user_count())
        .filter(|&u| !split.targets(data, u).is_empty())
        .collect();
    let max_n = *cutoffs.iter().max().unwrap();
    let per_user = parallel_map(users.len(), threads, |k| {
        let u = users[k];
        let scores = score_items(params, &data.train[u])?;
        let top = top_n(&scores, max_n, &split.masked_items(data, u));
        let targets = split.targets(data, u);
        Ok(UserMetrics {
            user: u,
            train_degree: data.train[u].len(),
            recall: cutoffs.iter().map(|&n| recall_at_n(&top[..n.min(top.len())], targets)).collect(),
            ndcg: cutoffs.iter().map(|&n| ndcg_at_n(&top[..n.min(top.len())], targets)).collect(),
        })
    })?;
    let mut metrics = BTreeMap::new();
    let count = per_user.len().max(1) as f64;
    for (c, &n) in cutoffs.iter().enumerate() {
        metrics.insert(format!("recall@{n}"), per_user.iter().map(|m| m.recall[c]).sum::<f64>() / count);
        metrics.insert(format!("ndcg@{n}"), per_user.iter().map(|m| m.ndcg[c]).sum::<f64>() / count);
    }
    Ok(EvalReport {
        split,
        cutoffs: cutoffs.to_vec(),
        users_evaluated: per_user.len(),
        metrics,
        per_user,
        groups: None,
        log_activity: None,
    })
}

pub fn validate_edges(edges: [usize; 3]) -> Result<()> {
    if edges[0] > edges[1] || edges[1] > edges[2] {
        return Err(Error::config(format!("group edges must be ascending, got {edges:?}")));
    }
    Ok(())
}

/// 25/50/75% nearest-rank quantiles of the training degree over users evaluated on `split`.
pub fn default_group_edges(data: &InteractionMatrix, split: Split) -> [usize; 3] {
    let mut degrees: Vec<usize> = (0..data.user_count())
        .filter(|&u| !split.targets(data, u).is_empty())
        .map(|u| data.train[u].len())
        .collect();
    degrees.sort_unstable();
    if degrees.is_empty() {
        return [0; 3];
    }
    let q = |p: f64| degrees[((p * degrees.len() as f64).ceil() as usize).clamp(1, degrees.len()) - 1];
    [q(0.25), q(0.5), q(0.75)]
}

/// Group index by training degree: `≤ e1`, `≤ e2`, `≤ e3`, `> e3`.
pub fn group_of(degree: usize, edges: [usize; 3]) -> usize {
    edges.iter().position(|&e| degree <= e).unwrap_or(3)
}

/// Four-group breakdown of per-user metrics; needs cutoff 20 in the report.
pub fn sparsity_table(report: &EvalReport, edges: [usize; 3]) -> Result<SparsityTable> {
    validate_edges(edges)?;
    let c = report
        .cutoffs
        .iter()
        .position(|&n| n == 20)
        .ok_or_else(|| Error::config("sparsity table needs cutoff 20"))?;
    let mut sums = [(0usize, 0.0, 0.0); 4];
    for m in &report.per_user {
        let g = &mut sums[group_of(m.train_degree, edges)];
        g.0 += 1;
        g.1 += m.recall[c];
        g.2 += m.ndcg[c];
    }
    let total = report.per_user.len().max(1) as f64;
    let groups = sums
        .iter()
        .enumerate()
        .map(|(k, &(users, r, n))| {
            let denom = users.max(1) as f64;
            GroupRow {
                max_degree: edges.get(k).copied(),
                users,
                proportion: users as f64 / total,
                recall_20: r / denom,
                ndcg_20: n / denom,
            }
        })
        .collect();
    Ok(SparsityTable { edges, groups })
}

pub fn sparsity_report(
    data: &InteractionMatrix,
    params: &ModelParams,
    group_edges: Option<[usize; 3]>,
    split: Split,
    threads: usize,
) -> Result<SparsityTable> {
    let edges = group_edges.unwrap_or_else(|| default_group_edges(data, split));
    validate_edges(edges)?;
    let report = evaluate(params, data, split, &DEFAULT_CUTOFFS, threads)?;
    sparsity_table(&report, edges)
}

/// `ln` of the population variance of each coordinate across `means`, clamped below.
pub fn activity_from_means(means: &[Vec<f64>]) -> Result<Vec<f64>> {
    if means.len() < 2 {
        return Err(Error::config("distribution activity needs at least 2 users"));
    }
    let d = means[0].len();
    let n = means.len() as f64;
    let mut centre = vec![0.0; d];
    for m in means {
        crate::numerics::axpy(1.0 / n, m, &mut centre);
    }
    let mut var = vec![0.0; d];
    for m in means {
        for k in 0..d {
            var[k] += (m[k] - centre[k]).powi(2) / n;
        }
    }
    Ok(var
        .into_iter()
        .map(|a| if a < ACTIVITY_LOG_FLOOR.exp() { ACTIVITY_LOG_FLOOR } else { a.ln() })
        .collect())
}

/// `ln a_k` per latent dimension, from each user's posterior mean on the training vector.
pub fn distribution_activity(data: &InteractionMatrix, params: &ModelParams) -> Result<Vec<f64>> {
    let means = (0..data.user_count())
        .map(|u| {
            let q = encode(&data.train[u], &params.vae, 0.0, Mode::Eval, &mut Rng::new(0))?;
            Ok(q.mean().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    activity_from_means(&means)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}
