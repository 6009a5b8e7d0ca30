//! Command implementations behind the `navpetl` binary.
//!
//! Each command takes a resolved [`RunConfig`] and returns plain data, so the
//! binary stays a thin argument parser and tests can drive commands directly.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use navpetl::metrics::{aggregate, MetricReport};
use navpetl::model::{load_checkpoint, save_checkpoint};
use navpetl::trainer::ablation::{
    component_ablation, format_component_table, format_gate_table, gate_ablation, GATE_TEMPERATURES,
};
use navpetl::trainer::gradcheck::{check_model_gradients, GradCheckReport};
use navpetl::trainer::{evaluate, evaluate_oracle, train_with, Env, TrainReport};
use navpetl::world::{
    generate_dataset, generate_world, read_dataset, validate_episode, world_seeds, write_dataset, Episode, Split,
    WorldGraph,
};
use navpetl::{Method, Model};

pub use config::RunConfig;

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.vlnp";
pub const TRAIN_LOG_FILE: &str = "train.log";
pub const METRICS_FILE: &str = "metrics.txt";

pub fn build_world(cfg: &RunConfig) -> Result<WorldGraph> {
    let (w, h) = cfg.grid()?;
    Ok(generate_world(cfg.seed()?, w, h, cfg.edge_drop()?)?)
}

/// Episodes for `split`: read from the configured dataset file, or generated.
pub fn load_episodes(cfg: &RunConfig, world: &WorldGraph, split: Split) -> Result<Vec<Episode>> {
    let Some(path) = cfg.dataset() else {
        return Ok(generate_dataset(world, split, cfg.episodes(split)?)?);
    };
    let episodes = read_dataset(&path)?;
    let seeds = world_seeds(&episodes);
    if seeds.len() > 1 {
        bail!("{} mixes episodes from {} worlds", path.display(), seeds.len());
    }
    for e in &episodes {
        validate_episode(world, e).with_context(|| format!("{} does not match the configured world", path.display()))?;
    }
    Ok(episodes)
}

/// Writes `count` episodes of `split` to `path` and returns how many were written.
pub fn gen_world(cfg: &RunConfig, split: Split, path: &Path) -> Result<usize> {
    let world = build_world(cfg)?;
    let episodes = generate_dataset(&world, split, cfg.episodes(split)?)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_dataset(path, &episodes)?;
    Ok(episodes.len())
}

fn fresh_model(cfg: &RunConfig) -> Result<Model> {
    let mut model = Model::new(cfg.model_config()?, cfg.seed()?)?;
    model.install(cfg.method_config()?)?;
    Ok(model)
}

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub report: TrainReport,
    /// Held-out metrics of the trained model.
    pub metrics: MetricReport,
}

/// Trains the configured method and fills the run directory.
///
/// Only trainable tensors are checkpointed; with everything trainable under
/// finetuning that is the whole model.
pub fn train_run(cfg: &RunConfig, mut on_epoch: impl FnMut(&str)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dir = cfg.run_dir()?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_string())?;

    let world = build_world(cfg)?;
    let train_set = load_episodes(cfg, &world, Split::Seen)?;
    let held_out = generate_dataset(&world, Split::Unseen, cfg.episodes(Split::Unseen)?)?;
    let tc = cfg.train_config()?;
    let mut model = fresh_model(cfg)?;
    let env = Env::for_model(&world, &model)?;

    let report = train_with(&mut model, &env, &train_set, &tc, |e| on_epoch(&e.to_string()))?;
    fs::write(dir.join(TRAIN_LOG_FILE), report.to_log())?;
    save_checkpoint(model.registry(), &dir.join(CHECKPOINT_FILE), true)?;

    let metrics = aggregate(&world, &evaluate(&model, &env, &held_out, &tc)?)?;
    fs::write(dir.join(METRICS_FILE), metrics.to_tsv())?;
    Ok(TrainOutcome { run_dir: dir, report, metrics })
}

/// Scores a checkpoint, or the shortest-path oracle, on one split.
pub fn eval_run(cfg: &RunConfig, split: Split, ckpt: Option<&Path>, oracle: bool) -> Result<MetricReport> {
    cfg.validate()?;
    let world = build_world(cfg)?;
    let episodes = load_episodes(cfg, &world, split)?;
    let tc = cfg.train_config()?;
    let mut model = fresh_model(cfg)?;
    let env = Env::for_model(&world, &model)?;
    let records = if oracle {
        evaluate_oracle(&env, &episodes, tc.max_steps)?
    } else {
        let path = match ckpt {
            Some(p) => p.to_path_buf(),
            None => cfg.run_dir()?.join(CHECKPOINT_FILE),
        };
        load_checkpoint(model.registry_mut(), &path)?;
        evaluate(&model, &env, &episodes, &tc)?
    };
    Ok(aggregate(&world, &records)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CountRow {
    pub method: Method,
    pub trainable: usize,
    pub total: usize,
}

impl CountRow {
    pub fn percent(&self) -> f64 {
        100.0 * self.trainable as f64 / self.total as f64
    }
}

/// Trainable counts of every method on the configured base, ascending by share.
pub fn count_params(cfg: &RunConfig) -> Result<Vec<CountRow>> {
    let base = cfg.model_config()?;
    let mut rows = Vec::new();
    for method in Method::ALL {
        let mut model = Model::new_virtual(base.clone())?;
        model.install(cfg.method_config_for(method)?)?;
        let c = model.count_trainable();
        rows.push(CountRow {
            method,
            trainable: c.trainable,
            total: c.total,
        });
    }
    rows.sort_by(|a, b| a.percent().total_cmp(&b.percent()));
    Ok(rows)
}

pub fn format_counts(rows: &[CountRow]) -> String {
    let mut out = String::from("method\ttrainable\ttotal\tpercent\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{}\t{}\t{:.2}", r.method, r.trainable, r.total, r.percent());
    }
    out
}

pub fn grad_check(method: Method, seed: u64, per_tensor: usize) -> Result<GradCheckReport> {
    Ok(check_model_gradients(method, seed, per_tensor)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Components,
    Gates,
}

/// Runs an ablation, writes its table into the run directory and returns it.
pub fn ablate(cfg: &RunConfig, which: Ablation) -> Result<String> {
    cfg.validate()?;
    let setup = cfg.ablation_setup()?;
    let (file, table) = match which {
        Ablation::Components => ("ablation_components.txt", format_component_table(&component_ablation(&setup)?)),
        Ablation::Gates => ("ablation_gates.txt", format_gate_table(&gate_ablation(&setup, &GATE_TEMPERATURES)?)),
    };
    let dir = cfg.run_dir()?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_string())?;
    fs::write(dir.join(file), &table)?;
    Ok(table)
}
