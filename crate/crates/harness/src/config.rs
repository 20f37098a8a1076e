//! Run configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use semvlp_core::encoder::{EncoderConfig, Mode};
use semvlp_core::finetune::{FinetuneConfig, Task};
use semvlp_core::pretrain::PretrainConfig;
use semvlp_core::synthworld::Vocab;

use crate::error::{HarnessError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub dir: PathBuf,
    pub n_scenes: usize,
    /// Train, dev and test fractions.
    pub split: [f64; 3],
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
}

/// Budgets of the ablation and sweep commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub pretrain_steps: u64,
    pub finetune_steps: u64,
    pub split_layers: Vec<usize>,
    pub tasks: Vec<Task>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    /// Pretraining writes an intermediate checkpoint every this many steps.
    pub checkpoint_every: u64,
    /// Per-task overrides; tasks without one use the desk defaults.
    #[serde(default)]
    pub finetune: Vec<FinetuneConfig>,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    /// The desk-scale setup: 2,000 scenes, a 4-layer width-64 encoder and
    /// 2,000 pretraining steps.
    pub fn desk() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            out_dir: PathBuf::from("runs/desk"),
            corpus: CorpusConfig {
                dir: PathBuf::from("runs/corpus"),
                n_scenes: 2000,
                split: [0.8, 0.1, 0.1],
                seed: 0,
            },
            encoder: EncoderConfig::desk(Vocab::standard().len()),
            pretrain: PretrainConfig::desk(),
            checkpoint_every: 500,
            finetune: Vec::new(),
            eval: EvalConfig { seed: 1 },
            sweep: SweepConfig {
                pretrain_steps: 300,
                finetune_steps: 150,
                split_layers: vec![0, 1, 2, 3, 4],
                tasks: vec![Task::Vqa, Task::Retrieval],
            },
        }
    }

    /// A seconds-scale configuration for smoke tests.
    pub fn tiny() -> Self {
        let mut cfg = RunConfig::desk();
        cfg.out_dir = PathBuf::from("runs/tiny");
        cfg.corpus.dir = PathBuf::from("runs/tiny-corpus");
        cfg.corpus.n_scenes = 120;
        cfg.encoder = EncoderConfig::tiny(Vocab::standard().len());
        cfg.pretrain.steps = 20;
        cfg.pretrain.batch_size = 8;
        cfg.pretrain.optimizer.total_steps = 20;
        cfg.pretrain.optimizer.warmup_steps = 2;
        cfg.checkpoint_every = 10;
        cfg.sweep = SweepConfig {
            pretrain_steps: 10,
            finetune_steps: 10,
            split_layers: vec![0, 1, 2],
            tasks: vec![Task::Vqa],
        };
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(semvlp_core::Error::Config(format!(
                    "schema_version {v} is not supported (expected {SCHEMA_VERSION})"
                ))
                .into())
            }
            None => return Err(semvlp_core::Error::Config("config has no schema_version".into()).into()),
        }
        let cfg: RunConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| HarnessError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(semvlp_core::Error::Config(msg).into());
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} is not supported", self.schema_version));
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive".into());
        }
        let [tr, dv, te] = self.corpus.split;
        if self.corpus.n_scenes < 4 || [tr, dv, te].iter().any(|f| !(0.0..=1.0).contains(f)) || (tr + dv + te - 1.0).abs() > 1e-9
        {
            return bad(format!(
                "corpus needs >= 4 scenes and split fractions summing to 1, got {} and {:?}",
                self.corpus.n_scenes, self.corpus.split
            ));
        }
        if let Some(&ls) = self.sweep.split_layers.iter().find(|&&ls| ls > self.encoder.num_layers) {
            return bad(format!("sweep split layer {ls} exceeds {} layers", self.encoder.num_layers));
        }
        self.encoder.validate()?;
        self.pretrain.validate()?;
        for f in &self.finetune {
            f.validate()?;
        }
        Ok(())
    }

    /// The fine-tuning settings for `task` in `mode`.
    pub fn finetune_config(&self, task: Task, mode: Mode) -> FinetuneConfig {
        let mut cfg = self
            .finetune
            .iter()
            .find(|f| f.task == task)
            .cloned()
            .unwrap_or_else(|| FinetuneConfig::desk(task, mode));
        cfg.mode = mode;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let cfg = RunConfig::desk();
        cfg.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);

        let mut v: serde_json::Value = serde_json::to_value(&cfg).unwrap();
        v["pretrain"]["stepz"] = 5.into();
        fs::write(&path, v.to_string()).unwrap();
        assert!(RunConfig::load(&path).is_err());
    }

    #[test]
    fn schema_version_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let mut v = serde_json::to_value(RunConfig::tiny()).unwrap();
        v["schema_version"] = 9.into();
        fs::write(&path, v.to_string()).unwrap();
        assert!(RunConfig::load(&path).unwrap_err().to_string().contains("schema_version"));
        v.as_object_mut().unwrap().remove("schema_version");
        fs::write(&path, v.to_string()).unwrap();
        assert!(RunConfig::load(&path).is_err());
    }

    #[test]
    fn finetune_overrides_keep_requested_mode() {
        let mut cfg = RunConfig::tiny();
        let mut vqa = FinetuneConfig::desk(Task::Vqa, Mode::SingleStream);
        vqa.stages[0].lr = 3e-4;
        cfg.finetune.push(vqa);
        let got = cfg.finetune_config(Task::Vqa, Mode::TwoStream);
        assert_eq!((got.mode, got.stages[0].lr), (Mode::TwoStream, 3e-4));
        assert_eq!(cfg.finetune_config(Task::Nlvr, Mode::TwoStream).task, Task::Nlvr);
    }

    #[test]
    fn sweep_values_are_bounded_by_depth() {
        let mut cfg = RunConfig::tiny();
        cfg.sweep.split_layers = vec![3];
        assert!(cfg.validate().is_err());
    }
}
