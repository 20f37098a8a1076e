//! Ablation tables: pretraining mode mix, fine-tuning mode and split layer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use semvlp_core::encoder::Mode;
use semvlp_core::finetune::Task;
use semvlp_core::pretrain::ModeMix;
use semvlp_core::synthworld::Split;

use crate::config::RunConfig;
use crate::error::Result;
use crate::run::{dev_argmax, finetune, pretrain, PretrainSummary, RunDir};

/// One fine-tuning mode's result on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub task: Task,
    pub mode: Mode,
    pub seed: u64,
    pub metric_name: String,
    pub dev: f64,
    pub test: Option<f64>,
    /// Marks the mode a single-model report would pick.
    pub dev_argmax: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode_mix: ModeMix,
    pub seed: u64,
    pub pretrain_loss: f64,
    pub itm_heldout: f64,
    pub results: Vec<ModeRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitLayerRow {
    pub split_layer: usize,
    pub cross_layers: usize,
    pub seed: u64,
    pub pretrain_loss: f64,
    pub dev_accuracy: f64,
}

fn primary_metric(task: Task) -> &'static str {
    match task {
        Task::Retrieval => "r@1",
        _ => "accuracy",
    }
}

/// `cfg` shortened to the sweep budget and pointed at `out`.
fn budgeted(cfg: &RunConfig, out: &Path) -> RunConfig {
    let mut sub = cfg.clone();
    sub.out_dir = out.to_path_buf();
    let steps = cfg.sweep.pretrain_steps;
    sub.pretrain.steps = steps;
    sub.pretrain.optimizer.total_steps = steps;
    sub.pretrain.optimizer.warmup_steps = sub.pretrain.optimizer.warmup_steps.min(steps / 10);
    sub.checkpoint_every = steps.max(1);
    for task in Task::ALL {
        let mut ft = cfg.finetune_config(task, Mode::SingleStream);
        for stage in &mut ft.stages {
            let cap = stage
                .max_steps
                .map_or(cfg.sweep.finetune_steps, |m| m.min(cfg.sweep.finetune_steps));
            stage.max_steps = Some(cap);
            stage.warmup_steps = stage.warmup_steps.min(cap / 10);
        }
        sub.finetune.retain(|f| f.task != task);
        sub.finetune.push(ft);
    }
    sub
}

/// Fine-tunes every configured task in both modes from `checkpoint`; two
/// rows per task with the dev argmax marked.
fn mode_rows(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<Vec<ModeRow>> {
    let mut rows = Vec::new();
    for &task in &cfg.sweep.tasks {
        let metric = primary_metric(task);
        let mut pair = Vec::new();
        for mode in Mode::BOTH {
            let mut sub = cfg.clone();
            sub.out_dir = out.join(format!("{task}-{mode}"));
            let s = finetune(&sub, checkpoint, task, mode)?;
            pair.push(ModeRow {
                task,
                mode,
                seed: cfg.seed,
                metric_name: s
                    .reports
                    .iter()
                    .find(|r| r.report.metric_name.ends_with(metric))
                    .map_or(metric.to_string(), |r| r.report.metric_name.clone()),
                dev: s.metric(Split::Dev, metric).unwrap_or(f64::NAN),
                test: s.metric(Split::Test, metric),
                dev_argmax: false,
            });
        }
        let best = dev_argmax(|m| pair.iter().find(|r| r.mode == m).map_or(f64::NEG_INFINITY, |r| r.dev));
        for r in &mut pair {
            r.dev_argmax = r.mode == best;
        }
        rows.extend(pair);
    }
    Ok(rows)
}

fn save_table(dir: &RunDir, name: &str, table: &impl Serialize) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(table)? + "\n").map_err(|e| crate::error::HarnessError::io(&path, e))
}

/// Fine-tuning mode comparison from one pretrained checkpoint.
pub fn mode_sweep(cfg: &RunConfig, checkpoint: &Path) -> Result<Vec<ModeRow>> {
    let dir = RunDir::claim(&cfg.out_dir)?;
    let sub = budgeted(cfg, &cfg.out_dir);
    let rows = mode_rows(&sub, checkpoint, &cfg.out_dir)?;
    save_table(&dir, "mode_sweep.json", &rows)?;
    Ok(rows)
}

/// Pretrains once per mode mix (single only, two only, alternate) and
/// fine-tunes each result in both modes.
pub fn ablate_modes(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let dir = RunDir::claim(&cfg.out_dir)?;
    let mut table = Vec::new();
    for mix in ModeMix::ALL {
        let out = cfg.out_dir.join(mix.as_str());
        let mut sub = budgeted(cfg, &out.join("pretrain"));
        sub.pretrain.mode_mix = mix;
        let pre: PretrainSummary = pretrain(&sub, None)?;
        table.push(AblationRow {
            mode_mix: mix,
            seed: cfg.seed,
            pretrain_loss: pre.last_window_loss,
            itm_heldout: pre.itm_heldout,
            results: mode_rows(&sub, &pre.checkpoint, &out)?,
        });
    }
    save_table(&dir, "ablate_modes.json", &table)?;
    Ok(table)
}

/// Two-stream-only pretraining and two-stream QA fine-tuning per split
/// layer; rows ordered by split layer.
pub fn ls_sweep(cfg: &RunConfig, split_layers: &[usize]) -> Result<Vec<SplitLayerRow>> {
    let mut values = split_layers.to_vec();
    values.sort_unstable();
    values.dedup();
    let mut probe = cfg.clone();
    probe.sweep.split_layers = values.clone();
    probe.validate()?;
    let dir = RunDir::claim(&cfg.out_dir)?;
    let mut table = Vec::new();
    for ls in values {
        let out = cfg.out_dir.join(format!("split_{ls}"));
        let mut sub = budgeted(cfg, &out.join("pretrain"));
        sub.encoder.split_layer = ls;
        sub.pretrain.mode_mix = ModeMix::TwoOnly;
        let pre = pretrain(&sub, None)?;
        sub.out_dir = out.join("vqa");
        let ft = finetune(&sub, &pre.checkpoint, Task::Vqa, Mode::TwoStream)?;
        table.push(SplitLayerRow {
            split_layer: ls,
            cross_layers: sub.encoder.num_cross_layers(),
            seed: cfg.seed,
            pretrain_loss: pre.last_window_loss,
            dev_accuracy: ft.metric(Split::Dev, "accuracy").unwrap_or(f64::NAN),
        });
    }
    save_table(&dir, "ls_sweep.json", &table)?;
    Ok(table)
}
