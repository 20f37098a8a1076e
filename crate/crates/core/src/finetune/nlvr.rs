//! Statements about image pairs: each image is encoded with the statement
//! and the two pooled states are concatenated for a true/false classifier.

use rand::Rng;

use super::{encode_pooled, run_stage, EvalReport, FinetuneConfig, StageTask, StepLog, Task, HEAD_STREAM};
use crate::encoder::{Dropout, Mode, SharedParams};
use crate::error::{Error, Result};
use crate::heads::MlpHead;
use crate::seed;
use crate::synthworld::{NlvrItem, Record};
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NlvrHead {
    pub mlp: MlpHead,
}

impl NlvrHead {
    pub fn ensure(params: &mut SharedParams, rng: &mut impl Rng) -> Result<Self> {
        let d = params.config.hidden_dim;
        Ok(NlvrHead {
            mlp: MlpHead::ensure(params, "nlvr", 2 * d, d, 2, rng)?,
        })
    }
}

/// `B×2` logits; column 1 means the statement holds for both images.
pub fn nlvr_logits<'g>(
    g: &'g Graph,
    params: &SharedParams,
    head: &NlvrHead,
    mode: Mode,
    items: &[&NlvrItem],
    records: &[Record],
    dropout: &mut Dropout,
) -> Result<Var<'g>> {
    let image = |i: usize| {
        records
            .get(i)
            .map(|r| &r.objects)
            .ok_or_else(|| Error::invalid("nlvr", format!("image index {i} outside {} records", records.len())))
    };
    let left = items
        .iter()
        .map(|it| Ok((&it.statement, image(it.left)?)))
        .collect::<Result<Vec<_>>>()?;
    let right = items
        .iter()
        .map(|it| Ok((&it.statement, image(it.right)?)))
        .collect::<Result<Vec<_>>>()?;
    let l = encode_pooled(g, params, mode, &left, dropout)?;
    let r = encode_pooled(g, params, mode, &right, dropout)?;
    head.mlp.forward(g, params, g.concat_cols(&[l, r])?)
}

pub fn nlvr_forward_loss<'g>(
    g: &'g Graph,
    params: &SharedParams,
    head: &NlvrHead,
    mode: Mode,
    items: &[&NlvrItem],
    records: &[Record],
    dropout: &mut Dropout,
) -> Result<Var<'g>> {
    let labels: Vec<usize> = items.iter().map(|it| it.label as usize).collect();
    nlvr_logits(g, params, head, mode, items, records, dropout)?.cross_entropy(&labels)
}

struct NlvrStage<'a> {
    items: &'a [NlvrItem],
    records: &'a [Record],
    head: NlvrHead,
    mode: Mode,
}

impl StageTask for NlvrStage<'_> {
    fn num_examples(&self) -> usize {
        self.items.len()
    }

    fn loss<'g>(&mut self, g: &'g Graph, params: &SharedParams, batch: &[usize], dropout: &mut Dropout) -> Result<Var<'g>> {
        let items: Vec<&NlvrItem> = batch.iter().map(|&i| &self.items[i]).collect();
        nlvr_forward_loss(g, params, &self.head, self.mode, &items, self.records, dropout)
    }
}

pub fn finetune_nlvr(
    params: &mut SharedParams,
    config: &FinetuneConfig,
    items: &[NlvrItem],
    records: &[Record],
    run_seed: u64,
    on_step: &mut dyn FnMut(&StepLog) -> Result<()>,
) -> Result<NlvrHead> {
    config.validate()?;
    let head = NlvrHead::ensure(params, &mut seed::derived_rng(run_seed, HEAD_STREAM, 0))?;
    let mut stage = NlvrStage {
        items,
        records,
        head,
        mode: config.mode,
    };
    run_stage(params, config.stage(0), 0, run_seed, &mut stage, on_step)?;
    Ok(head)
}

pub fn eval_nlvr(
    params: &SharedParams,
    head: &NlvrHead,
    mode: Mode,
    items: &[NlvrItem],
    records: &[Record],
    run_seed: u64,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Empty("no statements to evaluate"));
    }
    let mut correct = 0;
    for it in items {
        let g = Graph::new();
        let logits = nlvr_logits(&g, params, head, mode, &[it], records, &mut Dropout::off())?.value();
        correct += ((logits.data()[1] > logits.data()[0]) == it.label) as usize;
    }
    Ok(EvalReport {
        task: Task::Nlvr,
        mode,
        metric_name: "accuracy".into(),
        value: correct as f64 / items.len() as f64,
        n_examples: items.len(),
        seed: run_seed,
    })
}
