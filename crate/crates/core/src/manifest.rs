//! Run manifests and the observer that persists per-task checkpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_diffusion, save_reasoner};
use crate::config::TrainConfig;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::reasoner::ReasonerParams;
use crate::trainer::{EpochLog, RunStats, TaskOutcome, TrainObserver};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: usize,
    pub reasoner: Artifact,
    pub diffusion: Option<Artifact>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub alphas: Vec<f64>,
    pub replay_entities: usize,
    pub replay_facts: usize,
    pub dm_final_loss: Option<f64>,
    pub finished_at: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub config_text: String,
    pub config_sha256: String,
    pub seed: u64,
    pub dataset: String,
    pub dataset_sha256: String,
    pub num_entities: usize,
    pub num_relations: usize,
    pub started_at: u64,
    pub tasks: Vec<TaskRecord>,
    pub stats: RunStats,
}

impl RunManifest {
    pub fn new(config: &TrainConfig, dataset: &Path, dataset_sha256: String, vocab: Vocabulary) -> Self {
        Self {
            config: config.clone(),
            config_text: config.to_text(),
            config_sha256: config.digest(),
            seed: config.seed,
            dataset: dataset.display().to_string(),
            dataset_sha256,
            num_entities: vocab.num_entities,
            num_relations: vocab.num_relations,
            started_at: unix_now(),
            tasks: Vec::new(),
            stats: RunStats::default(),
        }
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary {
            num_entities: self.num_entities,
            num_relations: self.num_relations,
        }
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn reasoner_path(dir: &Path, task: usize) -> PathBuf {
    dir.join(format!("task_{task:04}.reasoner.ckpt"))
}

pub fn diffusion_path(dir: &Path, task: usize) -> PathBuf {
    dir.join(format!("task_{task:04}.diffusion.ckpt"))
}

/// Loads the reasoner of every task `0..tasks` from `dir`.
pub fn load_run_checkpoints(dir: &Path, vocab: Vocabulary, tasks: usize) -> Result<Vec<ReasonerParams>> {
    (0..tasks)
        .map(|t| {
            let path = reasoner_path(dir, t);
            if !path.exists() {
                return Err(Error::MissingCheckpoint { task: t, path });
            }
            crate::checkpoint::load_reasoner(&path, vocab)
        })
        .collect()
}

/// Writes both checkpoints after every task and appends to the manifest.
pub struct CheckpointWriter {
    dir: PathBuf,
    vocab: Vocabulary,
    pub manifest: RunManifest,
}

impl CheckpointWriter {
    pub fn new(dir: &Path, vocab: Vocabulary, manifest: RunManifest) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        manifest.write(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            vocab,
            manifest,
        })
    }

    pub fn set_stats(&mut self, stats: RunStats) -> Result<()> {
        self.manifest.stats = stats;
        self.manifest.write(&self.dir)
    }
}

fn relative(dir: &Path, path: &Path) -> String {
    path.strip_prefix(dir).unwrap_or(path).display().to_string()
}

impl TrainObserver for CheckpointWriter {
    fn task_end(&mut self, outcome: &TaskOutcome) -> Result<()> {
        let t = outcome.task;
        let rpath = reasoner_path(&self.dir, t);
        let rsha = save_reasoner(&rpath, &outcome.params, self.vocab, t)?;
        let diffusion = match &outcome.diffusion {
            Some(dm) => {
                let dpath = diffusion_path(&self.dir, t);
                let dsha = save_diffusion(&dpath, dm, t)?;
                Some(Artifact {
                    path: relative(&self.dir, &dpath),
                    sha256: dsha,
                })
            }
            None => None,
        };
        self.manifest.tasks.push(TaskRecord {
            task: t,
            reasoner: Artifact {
                path: relative(&self.dir, &rpath),
                sha256: rsha,
            },
            diffusion,
            epochs: outcome.epochs.clone(),
            best_epoch: outcome.best_epoch,
            alphas: outcome.alphas.clone(),
            replay_entities: outcome.replay_entities,
            replay_facts: outcome.replay_facts,
            dm_final_loss: outcome.dm_losses.last().copied(),
            finished_at: unix_now(),
        });
        self.manifest.write(&self.dir)
    }
}
