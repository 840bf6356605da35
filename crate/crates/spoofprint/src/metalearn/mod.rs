//! Episodic meta-learning: task sampling, inner-loop adaptation, the outer
//! Adam meta-update and per-epoch ADMM l1 regularization.
//!
//! One task is one dataset: an episode draws a balanced support set and a
//! query set, without replacement and disjoint, from a single dataset of the
//! active combination. Meta-training alternates between the combination's
//! datasets, which is what pushes the encoder toward features that survive
//! the switch — the same property the cross-test then probes on a dataset
//! the model never saw.

mod admm;
mod train;

pub use admm::{admm_update, soft_threshold, AdmmOptions, AdmmScope, AdmmState};
pub use train::{
    adapt_and_evaluate, assemble_episode, encoder_config_from_params, inner_adapt, meta_gradient,
    meta_step, meta_train, meta_train_loop, regularized_tensor_names, EpisodeBatchItem,
    EpochTrace, EvalOutcome, ProtoEpisode, ProtoTaskModel, TaskModel, TrainOptions, TrainOutput,
};

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

use crate::dataio::Registry;
use crate::error::{Error, Result};
use crate::sigmodel::Label;

/// Hyperparameters of the meta-training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub epochs: usize,
    pub query_size: usize,
    pub inner_steps: usize,
    pub shots_per_class: usize,
    pub tasks_per_batch: usize,
    pub lambda: f64,
    pub rho: f64,
    pub seed: u64,
    pub admm: AdmmOptions,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.01,
            outer_lr: 0.001,
            epochs: 8,
            query_size: 50,
            inner_steps: 5,
            shots_per_class: 5,
            tasks_per_batch: 4,
            lambda: 1e-4,
            rho: 1.0,
            seed: 0,
            admm: AdmmOptions::default(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("inner_lr", self.inner_lr),
            ("outer_lr", self.outer_lr),
            ("rho", self.rho),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(name, "must be positive"));
            }
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::validation("lambda", "must be non-negative"));
        }
        if self.epochs == 0 || self.inner_steps == 0 {
            return Err(Error::validation("epochs/inner_steps", "must be >= 1"));
        }
        if self.query_size == 0 || self.shots_per_class == 0 || self.tasks_per_batch == 0 {
            return Err(Error::validation(
                "query_size/shots_per_class/tasks_per_batch",
                "must be >= 1",
            ));
        }
        Ok(())
    }

    /// Parses the key = value run-config format (a flat TOML document).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: MetaConfig =
            toml::from_str(text).map_err(|e| Error::validation("meta config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::data(e.to_string()))
    }
}

/// One sampled task: disjoint support and query drawn from one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task_id: u64,
    pub source_tag: String,
    pub source_datasets: BTreeSet<String>,
    pub support_idx: Vec<usize>,
    pub query_idx: Vec<usize>,
}

/// Draws an episode from one dataset of `combo`, chosen uniformly. Support
/// takes `shots_per_class` items of each class; the query set is drawn from
/// the remaining pool and re-drawn (up to 10 times) until it contains both
/// classes.
pub fn sample_episode(
    registry: &Registry,
    combo: &[String],
    shots_per_class: usize,
    query_size: usize,
    task_id: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    if combo.is_empty() {
        return Err(Error::validation("combo", "no dataset tags"));
    }
    let tag = &combo[rng.gen_range(0..combo.len())];
    let set = registry.get(tag)?;
    let clean = set.indices_by_label(Label::Clean);
    let spoofed = set.indices_by_label(Label::Spoofed);
    for (label, pool) in [("clean", &clean), ("spoofed", &spoofed)] {
        if pool.len() < shots_per_class {
            return Err(Error::validation(
                "shots_per_class",
                format!(
                    "class {label} of {tag:?} has {} examples, {shots_per_class} requested",
                    pool.len()
                ),
            ));
        }
    }
    let mut support_idx = Vec::with_capacity(2 * shots_per_class);
    for pool in [&clean, &spoofed] {
        for sel in index_sample(rng, pool.len(), shots_per_class) {
            support_idx.push(pool[sel]);
        }
    }
    let taken: BTreeSet<usize> = support_idx.iter().copied().collect();
    let remaining: Vec<usize> = (0..set.items.len()).filter(|i| !taken.contains(i)).collect();
    if remaining.len() < query_size {
        return Err(Error::validation(
            "query_size",
            format!(
                "{tag:?} has {} examples left after support, {query_size} requested",
                remaining.len()
            ),
        ));
    }
    let mut query_idx = Vec::new();
    for attempt in 0..10 {
        query_idx = index_sample(rng, remaining.len(), query_size)
            .iter()
            .map(|sel| remaining[sel])
            .collect();
        let mut seen = [false; 2];
        for &i in &query_idx {
            seen[match set.items[i].label {
                Label::Clean => 0,
                Label::Spoofed => 1,
            }] = true;
        }
        if seen[0] && seen[1] {
            break;
        }
        if attempt == 9 {
            return Err(Error::validation(
                "query",
                format!("{tag:?}: query set missing a class after 10 draws"),
            ));
        }
    }
    Ok(Episode {
        task_id,
        source_tag: tag.clone(),
        source_datasets: BTreeSet::from([tag.clone()]),
        support_idx,
        query_idx,
    })
}
