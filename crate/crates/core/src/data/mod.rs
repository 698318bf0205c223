//! Interaction data, semantic embedding tables, splitting and batching.

mod embeddings;
mod interactions;
mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use embeddings::{load_embeddings, read_csv_embeddings, read_emb1, write_emb1, EMB1_MAGIC};
pub use interactions::{load_interactions, load_interactions_with_mapping, write_interactions};
pub use synth::{synth_generate, SyntheticData, SyntheticSpec};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

pub const DEFAULT_BATCH_SIZE: usize = 1024;

/// Users with fewer interactions than this keep everything in the training split.
pub const MIN_INTERACTIONS_FOR_SPLIT: usize = 3;

/// Persisted `id -> index` maps. Index `i` of `users` holds the external id of user `i`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IdMapping {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct MappingFile {
    users: BTreeMap<String, usize>,
    items: BTreeMap<String, usize>,
}

impl IdMapping {
    /// Identity mapping where id `"k"` is index `k`.
    pub fn sequential(users: usize, items: usize) -> Self {
        Self {
            users: (0..users).map(|i| i.to_string()).collect(),
            items: (0..items).map(|i| i.to_string()).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = MappingFile {
            users: self.users.iter().cloned().zip(0..).collect(),
            items: self.items.iter().cloned().zip(0..).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MappingFile = serde_json::from_str(text)?;
        Ok(Self {
            users: invert(file.users, "users")?,
            items: invert(file.items, "items")?,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn invert(map: BTreeMap<String, usize>, what: &'static str) -> Result<Vec<String>> {
    let mut out = vec![None; map.len()];
    for (id, idx) in map {
        match out.get_mut(idx) {
            Some(slot @ None) => *slot = Some(id),
            _ => {
                return Err(Error::Malformed {
                    what: "mapping",
                    message: format!("{what} indices are not a permutation of 0..{}", out.len()),
                })
            }
        }
    }
    Ok(out.into_iter().map(Option::unwrap).collect())
}

/// Binary user × item implicit-feedback matrix with per-user train/validation/test item lists.
///
/// Each list is sorted ascending and free of duplicates; the three lists of a user are disjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMatrix {
    item_count: usize,
    pub train: Vec<Vec<usize>>,
    pub validation: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
    pub mapping: IdMapping,
}

impl InteractionMatrix {
    /// Unsplit matrix: every interaction sits in `train`.
    pub fn from_user_items(
        item_count: usize,
        mut per_user: Vec<Vec<usize>>,
        mapping: IdMapping,
    ) -> Result<Self> {
        for (u, items) in per_user.iter_mut().enumerate() {
            items.sort_unstable();
            items.dedup();
            if let Some(&bad) = items.iter().find(|&&i| i >= item_count) {
                return Err(Error::DimensionMismatch(format!(
                    "user {u} references item {bad} but there are {item_count} items"
                )));
            }
        }
        let users = per_user.len();
        Ok(Self {
            item_count,
            train: per_user,
            validation: vec![Vec::new(); users],
            test: vec![Vec::new(); users],
            mapping,
        })
    }

    pub fn user_count(&self) -> usize {
        self.train.len()
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    pub fn interaction_count(&self) -> usize {
        self.train
            .iter()
            .chain(&self.validation)
            .chain(&self.test)
            .map(Vec::len)
            .sum()
    }

    /// All interactions of a user, sorted.
    pub fn all_items(&self, user: usize) -> Vec<usize> {
        let mut all: Vec<usize> = self.train[user]
            .iter()
            .chain(&self.validation[user])
            .chain(&self.test[user])
            .copied()
            .collect();
        all.sort_unstable();
        all
    }

    pub fn train_degrees(&self) -> Vec<usize> {
        self.train.iter().map(Vec::len).collect()
    }

    pub fn has_validation(&self) -> bool {
        self.validation.iter().any(|v| !v.is_empty())
    }

    /// Dense binary training vector of a user.
    pub fn train_vector(&self, user: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.item_count];
        for &i in &self.train[user] {
            x[i] = 1.0;
        }
        x
    }

    /// Per-user random split at ratio `train:validation:test`.
    ///
    /// Train receives `⌈n·a/(a+b+c)⌉` items, validation `⌈(n − train)·b/(b+c)⌉`, test the rest.
    /// Users with fewer than [`MIN_INTERACTIONS_FOR_SPLIT`] interactions stay train-only.
    pub fn split_ratio(&self, ratio: (u32, u32, u32), rng: &mut Rng) -> Result<Self> {
        let (a, b, c) = ratio;
        if a == 0 || a + b + c == 0 {
            return Err(Error::config(format!("invalid split ratio {a}:{b}:{c}")));
        }
        let users = self.user_count();
        let mut out = Self {
            item_count: self.item_count,
            train: Vec::with_capacity(users),
            validation: Vec::with_capacity(users),
            test: Vec::with_capacity(users),
            mapping: self.mapping.clone(),
        };
        for u in 0..users {
            let mut items = self.all_items(u);
            let n = items.len();
            if n < MIN_INTERACTIONS_FOR_SPLIT {
                out.train.push(items);
                out.validation.push(Vec::new());
                out.test.push(Vec::new());
                continue;
            }
            rng.shuffle(&mut items);
            let n_train = ceil_div(n as u64 * a as u64, (a + b + c) as u64) as usize;
            let rest = n - n_train;
            let n_val = if b + c == 0 {
                0
            } else {
                ceil_div(rest as u64 * b as u64, (b + c) as u64) as usize
            };
            let mut train = items[..n_train].to_vec();
            let mut val = items[n_train..n_train + n_val].to_vec();
            let mut test = items[n_train + n_val..].to_vec();
            train.sort_unstable();
            val.sort_unstable();
            test.sort_unstable();
            out.train.push(train);
            out.validation.push(val);
            out.test.push(test);
        }
        Ok(out)
    }
}

fn ceil_div(num: u64, den: u64) -> u64 {
    num.div_ceil(den)
}

/// Per-user split with the default 3:1:1 ratio.
pub fn split_ratio(interactions: &InteractionMatrix, rng: &mut Rng) -> Result<InteractionMatrix> {
    interactions.split_ratio((3, 1, 1), rng)
}

/// Semantic embeddings: item matrix `N × d_s` and user matrix `M × d_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaKnowledgeTable {
    items: Matrix,
    users: Matrix,
}

impl MetaKnowledgeTable {
    pub fn new(items: Matrix, users: Matrix) -> Result<Self> {
        if items.cols() != users.cols() {
            return Err(Error::DimensionMismatch(format!(
                "item embeddings are {} wide, user embeddings {}",
                items.cols(),
                users.cols()
            )));
        }
        for m in [&items, &users] {
            if let Some(row) = (0..m.rows()).find(|&r| m.row(r).iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite { row });
            }
        }
        Ok(Self { items, users })
    }

    /// Checks row counts against a dataset.
    pub fn validate_for(&self, data: &InteractionMatrix) -> Result<()> {
        if self.items.rows() != data.item_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} item embedding rows for {} items",
                self.items.rows(),
                data.item_count()
            )));
        }
        if self.users.rows() != data.user_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} user embedding rows for {} users",
                self.users.rows(),
                data.user_count()
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.items.cols()
    }

    pub fn items(&self) -> &Matrix {
        &self.items
    }

    pub fn users(&self) -> &Matrix {
        &self.users
    }

    pub fn item(&self, i: usize) -> &[f64] {
        self.items.row(i)
    }

    pub fn user(&self, u: usize) -> &[f64] {
        self.users.row(u)
    }
}

/// Split interactions plus the optional semantic table they are trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub interactions: InteractionMatrix,
    pub knowledge: Option<MetaKnowledgeTable>,
}

impl Dataset {
    pub fn new(interactions: InteractionMatrix, knowledge: Option<MetaKnowledgeTable>) -> Result<Self> {
        if let Some(k) = &knowledge {
            k.validate_for(&interactions)?;
        }
        Ok(Self {
            interactions,
            knowledge,
        })
    }
}

/// User-index batches covering every user exactly once; the last batch may be short.
pub fn batch_iter(
    user_count: usize,
    batch_size: usize,
    rng: &mut Rng,
    shuffle: bool,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..user_count).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
