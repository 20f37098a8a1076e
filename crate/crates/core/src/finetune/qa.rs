//! Answer classification: soft-target VQA and the two-stage GQA schedule.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{encode_pooled, run_stage, EvalReport, FinetuneConfig, StageTask, StepLog, Task, HEAD_STREAM, TARGET_STREAM};
use crate::encoder::{Dropout, Mode, SharedParams};
use crate::error::{Error, Result};
use crate::heads::MlpHead;
use crate::seed;
use crate::synthworld::Record;
use crate::tensor::{Graph, Var};

/// Weight of the single distractor in a soft target.
pub const DISTRACTOR_SCORE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QaLoss {
    /// Per-answer sigmoid BCE against soft scores.
    SoftBce,
    /// Softmax cross-entropy against the answer id.
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QaHead {
    pub mlp: MlpHead,
    pub loss: QaLoss,
}

impl QaHead {
    pub fn ensure(params: &mut SharedParams, task: Task, num_answers: usize, rng: &mut impl Rng) -> Result<Self> {
        let loss = match task {
            Task::Vqa => QaLoss::SoftBce,
            Task::Gqa2Stage => QaLoss::CrossEntropy,
            other => return Err(Error::Config(format!("task {other} has no answer head"))),
        };
        let d = params.config.hidden_dim;
        Ok(QaHead {
            mlp: MlpHead::ensure(params, task.as_str(), d, d, num_answers, rng)?,
            loss,
        })
    }

    pub fn logits<'g>(&self, g: &'g Graph, params: &SharedParams, pooled: Var<'g>) -> Result<Var<'g>> {
        self.mlp.forward(g, params, pooled)
    }
}

/// Answers of the same type as `id` (color, shape, count, yes/no) in the
/// standard answer list; the whole set otherwise.
fn answer_group(id: usize, num_answers: usize) -> Range<usize> {
    let group = [0..4, 4..8, 8..14, 14..16].into_iter().find(|r| r.contains(&id));
    match group {
        Some(r) if num_answers == crate::synthworld::ANSWERS.len() => r,
        _ => 0..num_answers,
    }
}

/// 1.0 on the true answer and a smaller score on one distractor of the same
/// answer type.
pub fn soft_targets(answer_id: usize, num_answers: usize, rng_seed: u64) -> Result<Vec<f64>> {
    if answer_id >= num_answers {
        return Err(Error::invalid(
            "soft_targets",
            format!("answer {answer_id} outside {num_answers} answers"),
        ));
    }
    let mut t = vec![0.0; num_answers];
    t[answer_id] = 1.0;
    let others: Vec<usize> = answer_group(answer_id, num_answers).filter(|&a| a != answer_id).collect();
    if !others.is_empty() {
        t[others[seed::rng(rng_seed).random_range(0..others.len())]] = DISTRACTOR_SCORE;
    }
    Ok(t)
}

/// Mean per-answer BCE between sigmoid(logits) and soft scores.
pub fn vqa_forward_loss<'g>(
    g: &'g Graph,
    params: &SharedParams,
    head: &QaHead,
    pooled: Var<'g>,
    targets: &[Vec<f64>],
) -> Result<Var<'g>> {
    let flat: Vec<f64> = targets.iter().flatten().copied().collect();
    head.logits(g, params, pooled)?.bce_with_logits(&flat)
}

struct QaStage<'a> {
    records: Vec<&'a Record>,
    head: QaHead,
    mode: Mode,
    targets: Vec<Vec<f64>>,
}

impl StageTask for QaStage<'_> {
    fn num_examples(&self) -> usize {
        self.records.len()
    }

    fn loss<'g>(&mut self, g: &'g Graph, params: &SharedParams, batch: &[usize], dropout: &mut Dropout) -> Result<Var<'g>> {
        let pairs: Vec<_> = batch
            .iter()
            .map(|&i| (&self.records[i].qa.question, &self.records[i].objects))
            .collect();
        let pooled = encode_pooled(g, params, self.mode, &pairs, dropout)?;
        match self.head.loss {
            QaLoss::SoftBce => {
                let targets: Vec<Vec<f64>> = batch.iter().map(|&i| self.targets[i].clone()).collect();
                vqa_forward_loss(g, params, &self.head, pooled, &targets)
            }
            QaLoss::CrossEntropy => {
                let answers: Vec<usize> = batch.iter().map(|&i| self.records[i].qa.answer_id).collect();
                self.head.logits(g, params, pooled)?.cross_entropy(&answers)
            }
        }
    }
}

fn qa_stage<'a>(records: Vec<&'a Record>, head: QaHead, config: &FinetuneConfig, run_seed: u64) -> Result<QaStage<'a>> {
    let targets = records
        .iter()
        .map(|r| {
            soft_targets(
                r.qa.answer_id,
                config.answer_set_size,
                seed::derive(run_seed, TARGET_STREAM, r.scene.scene_id),
            )
        })
        .collect::<Result<_>>()?;
    Ok(QaStage {
        records,
        head,
        mode: config.mode,
        targets,
    })
}

/// Fine-tunes the soft-target QA head (and the encoder) on `train`.
pub fn finetune_qa(
    params: &mut SharedParams,
    config: &FinetuneConfig,
    train: &[Record],
    run_seed: u64,
    on_step: &mut dyn FnMut(&StepLog) -> Result<()>,
) -> Result<QaHead> {
    config.validate()?;
    let head = QaHead::ensure(
        params,
        Task::Vqa,
        config.answer_set_size,
        &mut seed::derived_rng(run_seed, HEAD_STREAM, 0),
    )?;
    let mut stage = qa_stage(train.iter().collect(), head, config, run_seed)?;
    run_stage(params, config.stage(0), 0, run_seed, &mut stage, on_step)?;
    Ok(head)
}

/// Keeps at most the median per-answer count of every answer, so frequent
/// answers stop dominating.
pub fn balanced_split(records: &[Record], rng_seed: u64) -> Vec<Record> {
    let mut by_answer: BTreeMap<usize, Vec<&Record>> = BTreeMap::new();
    for r in records {
        by_answer.entry(r.qa.answer_id).or_default().push(r);
    }
    let mut counts: Vec<usize> = by_answer.values().map(Vec::len).collect();
    counts.sort_unstable();
    let cap = counts.get(counts.len() / 2).copied().unwrap_or(0);
    let mut rng = seed::rng(rng_seed);
    let mut out = Vec::new();
    for group in by_answer.values_mut() {
        group.shuffle(&mut rng);
        out.extend(group.iter().take(cap).map(|r| (*r).clone()));
    }
    out.sort_by_key(|r| r.scene.scene_id);
    out
}

/// Stage A on `all`, then stage B on `balanced`, starting from stage A's
/// parameters. Each stage has its own optimizer.
pub fn two_stage_finetune(
    params: &mut SharedParams,
    config: &FinetuneConfig,
    all: &[Record],
    balanced: &[Record],
    run_seed: u64,
    on_step: &mut dyn FnMut(&StepLog) -> Result<()>,
) -> Result<QaHead> {
    config.validate()?;
    if config.task != Task::Gqa2Stage {
        return Err(Error::Config(format!(
            "two-stage fine-tuning needs task gqa2stage, got {}",
            config.task
        )));
    }
    if all.is_empty() || balanced.is_empty() {
        return Err(Error::Empty("two-stage fine-tuning needs data for both stages"));
    }
    let head = QaHead::ensure(
        params,
        Task::Gqa2Stage,
        config.answer_set_size,
        &mut seed::derived_rng(run_seed, HEAD_STREAM, 0),
    )?;
    for (i, data) in [all, balanced].into_iter().enumerate() {
        let mut stage = qa_stage(data.iter().collect(), head, config, run_seed)?;
        run_stage(params, config.stage(i), i, run_seed, &mut stage, on_step)?;
    }
    Ok(head)
}

/// Softmax argmax per record.
pub fn predict_answers(params: &SharedParams, head: &QaHead, mode: Mode, records: &[Record]) -> Result<Vec<usize>> {
    records
        .iter()
        .map(|r| {
            let g = Graph::new();
            let pooled = encode_pooled(&g, params, mode, &[(&r.qa.question, &r.objects)], &mut Dropout::off())?;
            let probs = head.logits(&g, params, pooled)?.softmax_rows()?.value();
            Ok(argmax(probs.data()))
        })
        .collect()
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

pub fn eval_qa(
    params: &SharedParams,
    head: &QaHead,
    task: Task,
    mode: Mode,
    records: &[Record],
    run_seed: u64,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Empty("no records to evaluate"));
    }
    let predicted = predict_answers(params, head, mode, records)?;
    let correct = predicted.iter().zip(records).filter(|(p, r)| **p == r.qa.answer_id).count();
    Ok(EvalReport {
        task,
        mode,
        metric_name: "accuracy".into(),
        value: correct as f64 / records.len() as f64,
        n_examples: records.len(),
        seed: run_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_targets_shape() {
        for a in 0..16 {
            let t = soft_targets(a, 16, a as u64).unwrap();
            assert_eq!(t[a], 1.0);
            let d: Vec<usize> = (0..16).filter(|&i| t[i] == DISTRACTOR_SCORE).collect();
            assert_eq!(d.len(), 1);
            assert!(answer_group(a, 16).contains(&d[0]));
            assert_eq!(t.iter().filter(|&&x| x == 0.0).count(), 14);
        }
        assert!(soft_targets(16, 16, 0).is_err());
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5, 0.2]), 1);
    }
}
