use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use dmrec::data::{synth_generate, write_emb1, write_interactions, Dataset, SyntheticSpec};
use dmrec::evaluation::{distribution_activity, evaluate, sparsity_report, Split};
use dmrec::matching::{MatchingConfig, Strategy};
use dmrec::numerics::Rng;
use dmrec::training::{fit, load_checkpoint, save_checkpoint, write_history_csv, Checkpoint};
use serde::Serialize;

use crate::config::{env_seed, parse_grid, RunConfig};
use crate::{DiagnoseArgs, EvalArgs, Overrides, SweepArgs, SynthArgs, TrainArgs};

pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const USER_EMB_FILE: &str = "user_embeddings.emb1";
pub const ITEM_EMB_FILE: &str = "item_embeddings.emb1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.dmckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";
pub const REPORT_FILE: &str = "eval_report.json";
pub const PER_USER_FILE: &str = "per_user.csv";
pub const ACTIVITY_FILE: &str = "activity.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";

/// A command error plus the output directory to drop diagnostics into, when known.
pub struct Failure {
    pub error: anyhow::Error,
    pub out_dir: Option<PathBuf>,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure { error: e.into(), out_dir: None }
    }
}

trait InDir<T> {
    fn in_dir(self, dir: &Path) -> std::result::Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> InDir<T> for std::result::Result<T, E> {
    fn in_dir(self, dir: &Path) -> std::result::Result<T, Failure> {
        self.map_err(|e| Failure { error: e.into(), out_dir: Some(dir.to_path_buf()) })
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn out_dir(flag: Option<PathBuf>, config: &RunConfig) -> Result<PathBuf> {
    let dir = flag
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| anyhow!("no output directory: pass --out or set `output_dir`"))?;
    create_dir(&dir)?;
    Ok(std::path::absolute(dir)?)
}

#[derive(Serialize)]
struct Manifest<'a> {
    seed: u64,
    informative: bool,
    spec: &'a SyntheticSpec,
    dropped_users: &'a [usize],
    /// Id maps in the same layout as a mapping file.
    users: std::collections::BTreeMap<&'a str, usize>,
    items: std::collections::BTreeMap<&'a str, usize>,
}

pub fn synth(args: SynthArgs) -> CmdResult {
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let spec = SyntheticSpec {
        users: args.users,
        items: args.items,
        clusters: args.clusters,
        p_in: args.p_in,
        p_out: args.p_out,
        embedding_dim: args.embedding_dim,
        noise: args.noise,
        informative: args.informative,
    };
    let data = synth_generate(&spec, &Rng::new(seed))?;
    create_dir(&args.out)?;
    let dir = &args.out;
    write_interactions(&dir.join(INTERACTIONS_FILE), &data.interactions)?;
    write_emb1(&dir.join(USER_EMB_FILE), data.knowledge.users())?;
    write_emb1(&dir.join(ITEM_EMB_FILE), data.knowledge.items())?;
    let mapping = &data.interactions.mapping;
    let manifest = Manifest {
        seed,
        informative: spec.informative,
        spec: &spec,
        dropped_users: &data.dropped_users,
        users: mapping.users.iter().map(String::as_str).zip(0..).collect(),
        items: mapping.items.iter().map(String::as_str).zip(0..).collect(),
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    println!(
        "wrote {} users, {} items, {} interactions to {}",
        data.interactions.user_count(),
        data.interactions.item_count(),
        data.interactions.interaction_count(),
        dir.display()
    );
    Ok(())
}

fn apply_overrides(config: &mut RunConfig, o: &Overrides) -> Result<()> {
    let m = &mut config.train.matching;
    if let Some(s) = o.strategy {
        if s != m.strategy {
            *m = MatchingConfig { strategy: s, beta: s.default_beta(), ..m.clone() };
        }
    }
    if let Some(b) = o.beta {
        m.beta = b;
    }
    if let Some(a) = o.alpha {
        m.alpha = a;
    }
    if let Some(a) = o.ablation {
        m.ablation = a;
    }
    if let Some(s) = o.seed {
        config.train.seed = s;
    }
    if let Some(t) = o.threads {
        config.train.threads = t;
    }
    config.validate()
}

pub fn train(args: TrainArgs) -> CmdResult {
    let mut config = RunConfig::load(&args.config)?;
    apply_overrides(&mut config, &args.overrides)?;
    let dir = out_dir(args.out, &config)?;
    config.output_dir = Some(dir.clone());
    let data = config.load_dataset()?;
    let outcome = fit(&data, &config.train).in_dir(&dir)?;
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &outcome.checkpoint)?;
    write_history_csv(&dir.join(HISTORY_FILE), &outcome.history)?;
    std::fs::write(dir.join(RESOLVED_CONFIG_FILE), serde_json::to_string_pretty(&config)?)?;
    println!(
        "best val recall@20 {:.6} at epoch {} ({} epochs run); artifacts in {}",
        outcome.checkpoint.best_metric,
        outcome.checkpoint.epoch,
        outcome.history.len(),
        dir.display()
    );
    Ok(())
}

fn load_for_eval(config: &Path, checkpoint: &Path) -> Result<(RunConfig, Dataset, Checkpoint)> {
    let config = RunConfig::load(config)?;
    let data = config.load_dataset()?;
    let checkpoint = load_checkpoint(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    checkpoint.check_compatible(&data)?;
    Ok((config, data, checkpoint))
}

pub fn eval(args: EvalArgs) -> CmdResult {
    let (config, data, checkpoint) = load_for_eval(&args.config, &args.checkpoint)?;
    let dir = out_dir(args.out, &config)?;
    let split = Split::from(args.split);
    let threads = args.threads.unwrap_or(config.train.threads).max(1);
    let mut report = evaluate(&checkpoint.params, &data.interactions, split, &config.cutoffs, threads).in_dir(&dir)?;
    if args.groups || config.reports.groups {
        let edges = args.group_edges.map(|e| [e[0], e[1], e[2]]);
        report.groups = Some(sparsity_report(&data.interactions, &checkpoint.params, edges, split, threads).in_dir(&dir)?);
    }
    let per_user = args.per_user || config.reports.per_user_csv;
    if per_user {
        report.write_per_user_csv(&dir.join(PER_USER_FILE))?;
    } else {
        report.per_user.clear();
    }
    report.save_json(&dir.join(REPORT_FILE))?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{split:?} users {}", report.users_evaluated)?;
    for (name, value) in &report.metrics {
        writeln!(stdout, "{name}\t{value:.6}")?;
    }
    if let Some(table) = &report.groups {
        writeln!(stdout, "group\tmax_degree\tusers\tproportion\trecall@20\tndcg@20")?;
        for (g, row) in table.groups.iter().enumerate() {
            let bound = row.max_degree.map_or("inf".to_string(), |d| d.to_string());
            writeln!(
                stdout,
                "{g}\t{bound}\t{}\t{:.4}\t{:.6}\t{:.6}",
                row.users, row.proportion, row.recall_20, row.ndcg_20
            )?;
        }
    }
    Ok(())
}

pub fn diagnose(args: DiagnoseArgs) -> CmdResult {
    let (config, data, checkpoint) = load_for_eval(&args.config, &args.checkpoint)?;
    let dir = out_dir(args.out, &config)?;
    let activity = distribution_activity(&data.interactions, &checkpoint.params).in_dir(&dir)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join(ACTIVITY_FILE))?);
    writeln!(out, "dim,log_activity")?;
    for (k, a) in activity.iter().enumerate() {
        writeln!(out, "{k},{a}")?;
    }
    out.flush()?;
    println!("median log activity {:.4}", dmrec::evaluation::median(&activity));
    Ok(())
}

pub fn sweep(args: SweepArgs) -> CmdResult {
    let grid = parse_grid(&args.beta_grid)?;
    let mut config = RunConfig::load(&args.config)?;
    apply_overrides(&mut config, &args.overrides)?;
    if config.train.matching.strategy == Strategy::None {
        return Err(anyhow!("sweep needs a matching strategy other than `none`").into());
    }
    let dir = out_dir(args.out, &config)?;
    for &beta in &grid {
        MatchingConfig { beta, ..config.train.matching.clone() }.validate()?;
    }
    let data = config.load_dataset()?;
    let mut rows = Vec::with_capacity(grid.len());
    for &beta in &grid {
        let mut train = config.train.clone();
        train.matching.beta = beta;
        let outcome = fit(&data, &train).in_dir(&dir)?;
        let test = evaluate(&outcome.checkpoint.params, &data.interactions, Split::Test, &[20], train.threads)
            .in_dir(&dir)?
            .recall(20)
            .ok_or_else(|| anyhow!("missing recall@20"))?;
        println!("beta {beta}: val recall@20 {:.6} test recall@20 {test:.6}", outcome.checkpoint.best_metric);
        rows.push((beta, outcome.checkpoint.best_metric, test));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join(SWEEP_FILE))?);
    writeln!(out, "beta,val_recall@20,test_recall@20")?;
    for (beta, val, test) in rows {
        writeln!(out, "{beta},{val},{test}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_diagnostics(dir: &Path, command: &str, error: &anyhow::Error) -> Result<PathBuf> {
    #[derive(Serialize)]
    struct Diagnostics<'a> {
        command: &'a str,
        error: String,
        causes: Vec<String>,
    }
    let path = dir.join(DIAGNOSTICS_FILE);
    let body = Diagnostics {
        command,
        error: error.to_string(),
        causes: error.chain().skip(1).map(|e| e.to_string()).collect(),
    };
    std::fs::write(&path, serde_json::to_string_pretty(&body)?)?;
    Ok(path)
}
