use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dmrec::data::{
    load_embeddings, load_interactions, load_interactions_with_mapping, synth_generate, Dataset, IdMapping,
    MetaKnowledgeTable, SyntheticSpec,
};
use dmrec::evaluation::DEFAULT_CUTOFFS;
use dmrec::numerics::Rng;
use dmrec::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "DMREC_SEED";

/// Files of an on-disk dataset. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    pub interactions: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_embeddings: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_embeddings: Option<PathBuf>,
    /// Id mapping JSON; a `synth` manifest works here too.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mapping: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_rating: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    #[serde(default)]
    pub spec: SyntheticSpec,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportFormats {
    pub per_user_csv: bool,
    pub groups: bool,
}

fn default_cutoffs() -> Vec<usize> {
    DEFAULT_CUTOFFS.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetPaths>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSource>,
    /// Seed of the 3:1:1 split.
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_cutoffs")]
    pub cutoffs: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub reports: ReportFormats,
}

impl RunConfig {
    /// Parses a config file, resolving relative dataset paths. When the file sets no
    /// `train.seed`, `DMREC_SEED` (if set) supplies it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let raw: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let has_seed = raw.pointer("/train/seed").is_some();
        let mut config: RunConfig =
            serde_json::from_value(raw).with_context(|| format!("parsing {}", path.display()))?;
        if !has_seed {
            if let Some(seed) = env_seed()? {
                config.train.seed = seed;
            }
        }
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base)?;
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) -> Result<()> {
        let absolute = |p: &mut PathBuf| -> Result<()> {
            if p.is_relative() {
                *p = std::path::absolute(base.join(&*p))?;
            }
            Ok(())
        };
        if let Some(d) = &mut self.dataset {
            absolute(&mut d.interactions)?;
            for p in [&mut d.user_embeddings, &mut d.item_embeddings, &mut d.mapping].into_iter().flatten() {
                absolute(p)?;
            }
        }
        if let Some(out) = &mut self.output_dir {
            absolute(out)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.dataset, &self.synthetic) {
            (Some(_), Some(_)) => bail!("config sets both `dataset` and `synthetic`"),
            (None, None) => bail!("config needs one of `dataset` or `synthetic`"),
            (Some(d), None) if d.user_embeddings.is_some() != d.item_embeddings.is_some() => {
                bail!("user_embeddings and item_embeddings must be given together")
            }
            (None, Some(s)) => s.spec.validate()?,
            _ => {}
        }
        if self.cutoffs.is_empty() || self.cutoffs.contains(&0) {
            bail!("cutoffs must be non-empty and >= 1");
        }
        self.train.validate()?;
        Ok(())
    }

    /// Loads or generates the interactions and semantics, then applies the split.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let (interactions, knowledge) = match (&self.dataset, &self.synthetic) {
            (Some(paths), None) => load_paths(paths)?,
            (None, Some(s)) => {
                let data = synth_generate(&s.spec, &Rng::new(s.seed))?;
                (data.interactions, Some(data.knowledge))
            }
            _ => bail!("config needs exactly one of `dataset` or `synthetic`"),
        };
        let split = interactions.split_ratio((3, 1, 1), &mut Rng::new(self.split_seed))?;
        Ok(Dataset::new(split, knowledge)?)
    }
}

fn load_paths(paths: &DatasetPaths) -> Result<(dmrec::data::InteractionMatrix, Option<MetaKnowledgeTable>)> {
    let interactions = match &paths.mapping {
        Some(m) => {
            let mapping = IdMapping::load(m).with_context(|| format!("reading mapping {}", m.display()))?;
            load_interactions_with_mapping(&paths.interactions, paths.min_rating, mapping)?
        }
        None => load_interactions(&paths.interactions, paths.min_rating)?,
    };
    let knowledge = match (&paths.user_embeddings, &paths.item_embeddings) {
        (Some(u), Some(i)) => {
            let users = load_embeddings(u, Some(interactions.user_count()))
                .with_context(|| format!("reading {}", u.display()))?;
            let items = load_embeddings(i, Some(interactions.item_count()))
                .with_context(|| format!("reading {}", i.display()))?;
            Some(MetaKnowledgeTable::new(items, users)?)
        }
        _ => None,
    };
    Ok((interactions, knowledge))
}

pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(
            v.trim().parse().with_context(|| format!("{SEED_ENV}=`{v}` is not a u64"))?,
        )),
        Err(_) => Ok(None),
    }
}

/// Parses `0,0.25,0.5` or an arithmetic shorthand `0,0.1,...,1`.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let tokens: Vec<&str> = text.split(',').map(str::trim).filter(|t| !t.is_empty()).collect();
    let mut grid = Vec::new();
    if let Some(pos) = tokens.iter().position(|t| *t == "...") {
        if pos < 2 || pos + 2 != tokens.len() {
            bail!("`...` needs two leading values and one final value");
        }
        let first: f64 = tokens[0].parse()?;
        let step = tokens[1].parse::<f64>()? - first;
        let last: f64 = tokens[pos + 1].parse()?;
        if !(step > 0.0) || last < first {
            bail!("grid shorthand must be increasing");
        }
        let count = ((last - first) / step + 1e-9).floor() as usize;
        grid.extend((0..=count).map(|k| first + k as f64 * step));
        if (grid[grid.len() - 1] - last).abs() > 1e-9 * step.max(1.0) {
            grid.push(last);
        }
        // Snap values like 0.30000000000000004 to their decimal spelling.
        grid.iter_mut().for_each(|b| *b = (*b * 1e12).round() / 1e12);
    } else {
        for t in tokens {
            grid.push(t.parse().with_context(|| format!("bad grid value `{t}`"))?);
        }
    }
    if grid.is_empty() {
        bail!("beta grid is empty");
    }
    if grid.iter().any(|b| !b.is_finite()) {
        bail!("beta grid values must be finite");
    }
    grid.sort_by(f64::total_cmp);
    Ok(grid)
}
