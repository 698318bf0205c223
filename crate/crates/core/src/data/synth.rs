use serde::{Deserialize, Serialize};

use crate::data::{IdMapping, InteractionMatrix, MetaKnowledgeTable};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Retries granted to a user whose sampled row came out empty before the user is dropped.
const EMPTY_ROW_RETRIES: usize = 10;

/// Cluster-structured interaction generator with controllable semantic embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    /// Interaction probability for a same-cluster user/item pair.
    pub p_in: f64,
    /// Interaction probability for a cross-cluster pair.
    pub p_out: f64,
    pub embedding_dim: usize,
    /// Per-coordinate standard deviation of embedding noise.
    pub noise: f64,
    /// When false, embeddings carry no cluster signal.
    pub informative: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            users: 400,
            items: 200,
            clusters: 5,
            p_in: 0.08,
            p_out: 0.005,
            embedding_dim: 32,
            noise: 0.1,
            informative: true,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clusters < 2 {
            return Err(Error::config("synthetic spec needs at least 2 clusters"));
        }
        if !(0.0 <= self.p_out && self.p_out < self.p_in && self.p_in <= 1.0) {
            return Err(Error::config(format!(
                "need 0 <= p_out < p_in <= 1, got p_in={} p_out={}",
                self.p_in, self.p_out
            )));
        }
        if self.users == 0 || self.items == 0 || self.embedding_dim == 0 {
            return Err(Error::config("users, items and embedding_dim must be >= 1"));
        }
        if self.informative && self.embedding_dim < self.clusters {
            return Err(Error::config("informative embeddings need embedding_dim >= clusters"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("noise must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub interactions: InteractionMatrix,
    pub knowledge: MetaKnowledgeTable,
    pub user_clusters: Vec<usize>,
    pub item_clusters: Vec<usize>,
    /// Users dropped because every retry produced an empty row (indices before compaction).
    pub dropped_users: Vec<usize>,
}

const STREAM_CLUSTERS: u64 = 0;
const STREAM_EMBEDDINGS: u64 = 1;
const STREAM_USER_BASE: u64 = 1 << 32;

/// Samples a dataset: users and items get uniform random clusters, each pair interacts with
/// probability `p_in` (same cluster) or `p_out`, and embeddings are a unit cluster one-hot
/// plus Gaussian noise (or, when non-informative, Gaussian noise rescaled to the same norm).
///
/// Each user's row is drawn from its own stream, so for a fixed seed the row's uniforms do not
/// depend on the probabilities.
pub fn synth_generate(spec: &SyntheticSpec, rng: &Rng) -> Result<SyntheticData> {
    spec.validate()?;
    let mut cluster_rng = rng.fork(STREAM_CLUSTERS);
    let user_clusters: Vec<usize> = (0..spec.users)
        .map(|_| cluster_rng.below(spec.clusters))
        .collect();
    let item_clusters: Vec<usize> = (0..spec.items)
        .map(|_| cluster_rng.below(spec.clusters))
        .collect();

    let mut rows = Vec::with_capacity(spec.users);
    let mut kept = Vec::with_capacity(spec.users);
    let mut dropped_users = Vec::new();
    for (u, &cu) in user_clusters.iter().enumerate() {
        let mut user_rng = rng.fork(STREAM_USER_BASE + u as u64);
        let mut row = Vec::new();
        for _ in 0..=EMPTY_ROW_RETRIES {
            row = item_clusters
                .iter()
                .enumerate()
                .filter_map(|(i, &ci)| {
                    let p = if ci == cu { spec.p_in } else { spec.p_out };
                    (user_rng.uniform() < p).then_some(i)
                })
                .collect();
            if !row.is_empty() {
                break;
            }
        }
        if row.is_empty() {
            dropped_users.push(u);
        } else {
            rows.push(row);
            kept.push(u);
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut emb_rng = rng.fork(STREAM_EMBEDDINGS);
    let item_emb = embedding_rows(spec, &item_clusters, &mut emb_rng);
    let all_user_emb = embedding_rows(spec, &user_clusters, &mut emb_rng);
    let mut user_emb = Matrix::zeros(kept.len(), spec.embedding_dim);
    for (row, &u) in kept.iter().enumerate() {
        user_emb.row_mut(row).copy_from_slice(all_user_emb.row(u));
    }

    let interactions =
        InteractionMatrix::from_user_items(spec.items, rows, IdMapping::sequential(kept.len(), spec.items))?;
    Ok(SyntheticData {
        interactions,
        knowledge: MetaKnowledgeTable::new(item_emb, user_emb)?,
        user_clusters: kept.iter().map(|&u| user_clusters[u]).collect(),
        item_clusters,
        dropped_users,
    })
}

fn embedding_rows(spec: &SyntheticSpec, clusters: &[usize], rng: &mut Rng) -> Matrix {
    let d = spec.embedding_dim;
    let mut m = Matrix::zeros(clusters.len(), d);
    for (r, &c) in clusters.iter().enumerate() {
        let mut row: Vec<f64> = (0..d).map(|_| spec.noise * rng.normal()).collect();
        if d >= spec.clusters {
            row[c] += 1.0;
        }
        if !spec.informative {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut dir = rng.normals(d);
            let dn = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            dir.iter_mut().for_each(|v| *v *= norm / dn);
            row = dir;
        }
        m.row_mut(r).copy_from_slice(&row);
    }
    m
}
