//! Downstream heads: soft-target QA, ranking retrieval, paired-image
//! reasoning and the two-stage QA schedule. Every head reads the pooled
//! state of the configured mode.

pub mod circle;
pub mod nlvr;
pub mod qa;
pub mod retrieval;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use circle::{circle_loss, circle_loss_var};
pub use nlvr::{eval_nlvr, finetune_nlvr, nlvr_forward_loss, nlvr_logits, NlvrHead};
pub use qa::{
    balanced_split, eval_qa, finetune_qa, predict_answers, soft_targets, two_stage_finetune, vqa_forward_loss, QaHead, QaLoss,
};
pub use retrieval::{
    build_pools, eval_retrieval, finetune_retrieval, init_similarity_head, mine_hard_negatives, rank_pools, recall_at,
    similarity_score, Direction, RetrievalPool, SimilarityHead,
};

use crate::encoder::{Dropout, Mode, ObjectInput, SharedParams, TextInput};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::seed;
use crate::synthworld::Level;
use crate::tensor::{Graph, Var};

pub(crate) const ORDER_STREAM: u64 = 200;
pub(crate) const DROPOUT_STREAM: u64 = 201;
pub(crate) const TARGET_STREAM: u64 = 202;
pub(crate) const NEGATIVE_STREAM: u64 = 203;
pub(crate) const POOL_STREAM: u64 = 204;
pub(crate) const HEAD_STREAM: u64 = 205;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "vqa")]
    Vqa,
    #[serde(rename = "retrieval")]
    Retrieval,
    #[serde(rename = "nlvr")]
    Nlvr,
    #[serde(rename = "gqa2stage", alias = "gqa_two_stage")]
    Gqa2Stage,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Vqa, Task::Retrieval, Task::Nlvr, Task::Gqa2Stage];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Vqa => "vqa",
            Task::Retrieval => "retrieval",
            Task::Nlvr => "nlvr",
            Task::Gqa2Stage => "gqa2stage",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

/// Optimization settings of one fine-tuning stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub warmup_steps: u64,
    /// Stops the stage early once this many updates ran.
    #[serde(default)]
    pub max_steps: Option<u64>,
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl StageConfig {
    pub fn new(epochs: usize, batch_size: usize, lr: f64) -> Self {
        StageConfig {
            epochs,
            batch_size,
            lr,
            warmup_steps: 0,
            max_steps: None,
            clip_norm: Some(1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("stage batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("stage lr {} must be finite and >= 0", self.lr)));
        }
        Ok(())
    }

    /// Updates this stage runs over `n` examples.
    pub fn num_steps(&self, n: usize) -> u64 {
        let full = (self.epochs * n.div_ceil(self.batch_size)) as u64;
        self.max_steps.map_or(full, |m| full.min(m))
    }

    fn optimizer(&self, n: usize) -> AdamConfig {
        AdamConfig {
            warmup_steps: self.warmup_steps,
            clip_norm: self.clip_norm,
            ..AdamConfig::new(self.lr, self.num_steps(n).max(1))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Candidates per evaluation pool, the positive included.
    pub pool_size: usize,
    /// Negatives scored against each training query.
    pub negatives: usize,
    /// Random candidates scored per query when mining hard negatives.
    pub mining_pool: usize,
    /// Training queries drawn per epoch; `None` uses every record.
    #[serde(default)]
    pub queries_per_epoch: Option<usize>,
    pub level: Level,
    pub direction: Direction,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            pool_size: 20,
            negatives: 3,
            mining_pool: 16,
            queries_per_epoch: Some(480),
            level: Level::Fine,
            direction: Direction::TextToImage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub task: Task,
    pub mode: Mode,
    pub answer_set_size: usize,
    #[serde(default = "default_circle_m")]
    pub circle_m: f64,
    #[serde(default = "default_circle_gamma")]
    pub circle_gamma: f64,
    /// One entry per stage; only the two-stage task uses a second one.
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
}

fn default_circle_m() -> f64 {
    0.25
}

fn default_circle_gamma() -> f64 {
    32.0
}

impl FinetuneConfig {
    /// Desk-scale defaults per task.
    pub fn desk(task: Task, mode: Mode) -> Self {
        let stages = match task {
            Task::Vqa => vec![StageConfig {
                max_steps: Some(500),
                warmup_steps: 50,
                ..StageConfig::new(5, 16, 1e-3)
            }],
            Task::Retrieval => vec![StageConfig {
                warmup_steps: 20,
                ..StageConfig::new(2, 4, 5e-4)
            }],
            Task::Nlvr => vec![StageConfig {
                max_steps: Some(500),
                warmup_steps: 50,
                ..StageConfig::new(5, 16, 1e-3)
            }],
            Task::Gqa2Stage => vec![
                StageConfig {
                    warmup_steps: 30,
                    ..StageConfig::new(2, 16, 1e-3)
                },
                StageConfig::new(2, 16, 2e-4),
            ],
        };
        FinetuneConfig {
            task,
            mode,
            answer_set_size: crate::synthworld::ANSWERS.len(),
            circle_m: default_circle_m(),
            circle_gamma: default_circle_gamma(),
            stages,
            retrieval: RetrievalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let want = if self.task == Task::Gqa2Stage { 2 } else { 1 };
        if self.stages.len() != want {
            return Err(Error::Config(format!(
                "task {} takes {want} stage(s), got {}",
                self.task,
                self.stages.len()
            )));
        }
        for s in &self.stages {
            s.validate()?;
        }
        if self.answer_set_size == 0 {
            return Err(Error::Config("answer_set_size must be positive".into()));
        }
        if !(self.circle_m > 0.0 && self.circle_m < 1.0) || self.circle_gamma <= 0.0 {
            return Err(Error::Config(format!(
                "circle loss needs m in (0, 1) and gamma > 0, got m={} gamma={}",
                self.circle_m, self.circle_gamma
            )));
        }
        let r = &self.retrieval;
        if r.pool_size < 2 || r.negatives == 0 || r.mining_pool < r.negatives {
            return Err(Error::Config(format!(
                "retrieval needs pool_size >= 2 and 1 <= negatives <= mining_pool, got {r:?}"
            )));
        }
        Ok(())
    }

    pub fn stage(&self, i: usize) -> &StageConfig {
        &self.stages[i]
    }
}

/// One line of the fine-tuning metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: usize,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub mode: Mode,
    pub metric_name: String,
    pub value: f64,
    pub n_examples: usize,
    pub seed: u64,
}

/// Pooled states of `pairs`, one row each.
pub fn encode_pooled<'g>(
    g: &'g Graph,
    params: &SharedParams,
    mode: Mode,
    pairs: &[(&TextInput, &ObjectInput)],
    dropout: &mut Dropout,
) -> Result<Var<'g>> {
    if pairs.is_empty() {
        return Err(Error::Empty("no pairs to encode"));
    }
    let rows = pairs
        .iter()
        .map(|(t, o)| Ok(params.forward(g, mode, t, o, dropout)?.pooled))
        .collect::<Result<Vec<_>>>()?;
    g.concat_rows(&rows)
}

/// Minibatches of one epoch over `n` examples, reshuffled per epoch.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, run_seed: u64, stage: usize, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::derived_rng(
        run_seed,
        ORDER_STREAM,
        ((stage as u64) << 32) | epoch as u64,
    ));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// The task-specific half of a fine-tuning stage.
pub(crate) trait StageTask {
    fn num_examples(&self) -> usize;

    fn before_epoch(&mut self, _params: &SharedParams, _epoch: usize) -> Result<()> {
        Ok(())
    }

    /// Batch loss on a fresh tape.
    fn loss<'g>(&mut self, g: &'g Graph, params: &SharedParams, batch: &[usize], dropout: &mut Dropout) -> Result<Var<'g>>;
}

/// Runs one stage with a fresh optimizer, one Adam step per minibatch.
pub(crate) fn run_stage(
    params: &mut SharedParams,
    stage_cfg: &StageConfig,
    stage: usize,
    run_seed: u64,
    task: &mut impl StageTask,
    on_step: &mut dyn FnMut(&StepLog) -> Result<()>,
) -> Result<()> {
    stage_cfg.validate()?;
    let n = task.num_examples();
    if n == 0 {
        return Err(Error::Empty("fine-tuning stage has no examples"));
    }
    let total = stage_cfg.num_steps(n);
    let mut adam = Adam::new(stage_cfg.optimizer(n))?;
    let mut step = 0u64;
    for epoch in 0..stage_cfg.epochs {
        if step >= total {
            break;
        }
        task.before_epoch(params, epoch)?;
        for batch in epoch_batches(n, stage_cfg.batch_size, run_seed, stage, epoch) {
            if step >= total {
                break;
            }
            let g = Graph::new();
            let mut dropout = Dropout::train(
                params.config.dropout_rate,
                seed::derive(run_seed, DROPOUT_STREAM, ((stage as u64) << 32) | step),
            );
            let l = task.loss(&g, params, &batch, &mut dropout)?;
            let value = l.item();
            if !value.is_finite() {
                return Err(Error::NaN { op: "fine-tuning loss" });
            }
            let grads = g.backward(l)?;
            let lr = adam.update(&mut params.store, &grads);
            on_step(&StepLog {
                stage,
                step,
                loss: value,
                lr,
            })?;
            step += 1;
        }
    }
    Ok(())
}
