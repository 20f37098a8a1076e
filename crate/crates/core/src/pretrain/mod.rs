//! Masked language modeling, masked object prediction, image-text matching
//! and image QA, trained with alternating single/two-stream updates.

pub mod batch;
pub mod masking;

pub use batch::{mask_pairs, sample_itm, ItmPair, PretrainBatch, PretrainExample, TextKind};
pub use masking::{mask_count, mask_objects, mask_tokens, MlmTargets, ObjectTargets};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Dropout, Mode, SharedParams};
use crate::error::{Error, Result};
use crate::heads::{LinearHead, MlpHead};
use crate::optim::{Adam, AdamConfig};
use crate::seed;
use crate::synthworld::Record;
use crate::tensor::{Graph, Var};

const HEAD_STREAM: u64 = 100;
const BATCH_STREAM: u64 = 101;
const ITM_STREAM: u64 = 102;
const MASK_STREAM: u64 = 103;
const DROPOUT_STREAM: u64 = 104;

/// Update `step` (0-based) runs single-stream when even, two-stream when odd.
pub fn schedule_mode(step: u64) -> Mode {
    if step.is_multiple_of(2) {
        Mode::SingleStream
    } else {
        Mode::TwoStream
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeMix {
    Alternate,
    SingleOnly,
    TwoOnly,
}

impl ModeMix {
    pub const ALL: [ModeMix; 3] = [ModeMix::SingleOnly, ModeMix::TwoOnly, ModeMix::Alternate];

    pub fn mode_at(self, step: u64) -> Mode {
        match self {
            ModeMix::Alternate => schedule_mode(step),
            ModeMix::SingleOnly => Mode::SingleStream,
            ModeMix::TwoOnly => Mode::TwoStream,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModeMix::Alternate => "alternate",
            ModeMix::SingleOnly => "single_only",
            ModeMix::TwoOnly => "two_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectHeads {
    pub roi: LinearHead,
    pub label: LinearHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PretrainHeads {
    pub mlm: LinearHead,
    pub object: ObjectHeads,
    pub itm: MlpHead,
    pub qa: MlpHead,
}

impl PretrainHeads {
    /// Registers (or finds) the heads in `params`.
    pub fn ensure(params: &mut SharedParams, num_labels: usize, num_answers: usize, rng: &mut impl Rng) -> Result<Self> {
        let d = params.config.hidden_dim;
        let vocab = params.config.vocab_size;
        let feat = params.config.object_feature_dim;
        Ok(PretrainHeads {
            mlm: LinearHead::ensure(params, "mlm", d, vocab, rng)?,
            object: ObjectHeads {
                roi: LinearHead::ensure(params, "roi", d, feat, rng)?,
                label: LinearHead::ensure(params, "label", d, num_labels, rng)?,
            },
            itm: MlpHead::ensure(params, "itm", d, d, 2, rng)?,
            qa: MlpHead::ensure(params, "qa", d, d, num_answers, rng)?,
        })
    }
}

/// Mean cross-entropy over the masked words of every active example;
/// `None` when no example carries active targets.
pub fn mlm_loss<'g>(
    g: &'g Graph,
    params: &SharedParams,
    head: &LinearHead,
    states: &[(Var<'g>, &MlmTargets)],
) -> Result<Option<Var<'g>>> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (h, t) in states.iter().filter(|(_, t)| t.active && !t.positions.is_empty()) {
        rows.push(h.gather_rows(&t.positions)?);
        targets.extend_from_slice(&t.originals);
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let logits = head.forward(g, params, g.concat_rows(&rows)?)?;
    Ok(Some(logits.cross_entropy(&targets)?))
}

/// `(roi_regression, label_clf)` over the masked objects of every active
/// example. Object `j` lives in row `j + 1` of the image states.
pub fn object_loss<'g>(
    g: &'g Graph,
    params: &SharedParams,
    heads: &ObjectHeads,
    states: &[(Var<'g>, &ObjectTargets)],
) -> Result<Option<(Var<'g>, Var<'g>)>> {
    let mut rows = Vec::new();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (o, t) in states.iter().filter(|(_, t)| t.active && !t.indices.is_empty()) {
        let idx: Vec<usize> = t.indices.iter().map(|j| j + 1).collect();
        rows.push(o.gather_rows(&idx)?);
        features.extend(t.features.iter().flatten().copied());
        labels.extend_from_slice(&t.labels);
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let rows = g.concat_rows(&rows)?;
    let roi = heads.roi.forward(g, params, rows)?.smooth_l1(&features)?;
    let label = heads.label.forward(g, params, rows)?.cross_entropy(&labels)?;
    Ok(Some((roi, label)))
}

/// Two-way softmax cross-entropy; class 1 means matched.
pub fn itm_loss<'g>(g: &'g Graph, params: &SharedParams, head: &MlpHead, pooled: Var<'g>, matched: &[bool]) -> Result<Var<'g>> {
    let targets: Vec<usize> = matched.iter().map(|&m| m as usize).collect();
    head.forward(g, params, pooled)?.cross_entropy(&targets)
}

pub fn qa_loss<'g>(g: &'g Graph, params: &SharedParams, head: &MlpHead, pooled: Var<'g>, answers: &[usize]) -> Result<Var<'g>> {
    head.forward(g, params, pooled)?.cross_entropy(answers)
}

/// Component losses; `None` marks a component disabled for the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mode: Mode,
    pub mlm: Option<f64>,
    pub roi: Option<f64>,
    pub label: Option<f64>,
    pub itm: Option<f64>,
    pub qa: Option<f64>,
    pub total: f64,
}

impl LossReport {
    /// Enabled components in accumulation order.
    pub fn enabled(&self) -> Vec<f64> {
        [self.mlm, self.roi, self.label, self.itm, self.qa]
            .into_iter()
            .flatten()
            .collect()
    }
}

pub struct LossTerms<'g> {
    pub mode: Mode,
    pub mlm: Option<Var<'g>>,
    pub roi: Option<Var<'g>>,
    pub label: Option<Var<'g>>,
    pub itm: Option<Var<'g>>,
    pub qa: Option<Var<'g>>,
    pub total: Var<'g>,
}

impl LossTerms<'_> {
    pub fn report(&self) -> LossReport {
        let v = |x: &Option<Var<'_>>| x.as_ref().map(Var::item);
        LossReport {
            mode: self.mode,
            mlm: v(&self.mlm),
            roi: v(&self.roi),
            label: v(&self.label),
            itm: v(&self.itm),
            qa: v(&self.qa),
            total: self.total.item(),
        }
    }
}

/// Encodes every example in `mode` and sums the enabled losses with equal
/// weights in the order mlm, roi, label, itm, qa.
pub fn batch_losses<'g>(
    g: &'g Graph,
    params: &SharedParams,
    heads: &PretrainHeads,
    batch: &PretrainBatch,
    mode: Mode,
    dropout: &mut Dropout,
) -> Result<LossTerms<'g>> {
    if batch.is_empty() {
        return Err(Error::Empty("pretrain batch"));
    }
    let mut text_states = Vec::with_capacity(batch.len());
    let mut object_states = Vec::with_capacity(batch.len());
    let mut pooled = Vec::with_capacity(batch.len());
    let mut qa_rows = Vec::new();
    let mut qa_answers = Vec::new();
    for ex in &batch.examples {
        let enc = params.forward(g, mode, &ex.text, &ex.objects, dropout)?;
        text_states.push((enc.text, &ex.mlm));
        object_states.push((enc.objects, &ex.obj));
        pooled.push(enc.pooled);
        if let (true, Some(a)) = (ex.matched, ex.qa_answer) {
            qa_rows.push(enc.pooled);
            qa_answers.push(a);
        }
    }
    let mlm = mlm_loss(g, params, &heads.mlm, &text_states)?;
    let (roi, label) = match object_loss(g, params, &heads.object, &object_states)? {
        Some((r, l)) => (Some(r), Some(l)),
        None => (None, None),
    };
    let matched: Vec<bool> = batch.examples.iter().map(|e| e.matched).collect();
    let itm = Some(itm_loss(g, params, &heads.itm, g.concat_rows(&pooled)?, &matched)?);
    let qa = if qa_rows.is_empty() {
        None
    } else {
        Some(qa_loss(g, params, &heads.qa, g.concat_rows(&qa_rows)?, &qa_answers)?)
    };
    let mut total: Option<Var<'g>> = None;
    for term in [mlm, roi, label, itm, qa].into_iter().flatten() {
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    Ok(LossTerms {
        mode,
        mlm,
        roi,
        label,
        itm,
        qa,
        total: total.expect("itm is always enabled"),
    })
}

/// One Adam update on `batch` in `mode`.
pub fn train_step_in_mode(
    params: &mut SharedParams,
    heads: &PretrainHeads,
    adam: &mut Adam,
    batch: &PretrainBatch,
    mode: Mode,
    dropout_seed: u64,
) -> Result<(LossReport, f64)> {
    let g = Graph::new();
    let mut dropout = Dropout::train(params.config.dropout_rate, dropout_seed);
    let terms = batch_losses(&g, params, heads, batch, mode, &mut dropout)?;
    let report = terms.report();
    let grads = g.backward(terms.total)?;
    let lr = adam.update(&mut params.store, &grads);
    Ok((report, lr))
}

/// One update in the mode `schedule_mode(step)` picks.
pub fn train_step(
    params: &mut SharedParams,
    heads: &PretrainHeads,
    adam: &mut Adam,
    batch: &PretrainBatch,
    step: u64,
) -> Result<LossReport> {
    let seed = seed::derive(0, DROPOUT_STREAM, step);
    train_step_in_mode(params, heads, adam, batch, schedule_mode(step), seed).map(|(r, _)| r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    #[serde(default = "default_mask_rate")]
    pub token_mask_rate: f64,
    #[serde(default = "default_mask_rate")]
    pub object_mask_rate: f64,
    pub mode_mix: ModeMix,
    /// Sampling weights of coarse captions, fine captions and questions.
    #[serde(default = "default_text_mix")]
    pub text_mix: [f64; 3],
    pub optimizer: AdamConfig,
}

fn default_mask_rate() -> f64 {
    0.15
}

fn default_text_mix() -> [f64; 3] {
    [0.4, 0.4, 0.2]
}

impl PretrainConfig {
    pub fn desk() -> Self {
        PretrainConfig {
            steps: 2000,
            batch_size: 80,
            token_mask_rate: default_mask_rate(),
            object_mask_rate: default_mask_rate(),
            mode_mix: ModeMix::Alternate,
            text_mix: [0.45, 0.45, 0.1],
            optimizer: AdamConfig {
                warmup_steps: 100,
                clip_norm: Some(1.0),
                ..AdamConfig::new(2.5e-3, 2000)
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!("batch_size {} must be even and >= 2", self.batch_size)));
        }
        if self.text_mix.iter().any(|w| !w.is_finite() || *w < 0.0) || self.text_mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!(
                "text_mix {:?} needs non-negative weights with a positive sum",
                self.text_mix
            )));
        }
        self.optimizer.validate()
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossReport,
    pub lr: f64,
}

/// Draws the pairs of update `step` from `train` and prepares them.
pub fn sample_batch(
    train: &[Record],
    config: &PretrainConfig,
    vocab_size: usize,
    run_seed: u64,
    step: u64,
) -> Result<PretrainBatch> {
    if train.len() < 2 {
        return Err(Error::Empty("pretrain corpus needs at least two scenes"));
    }
    let mut rng = seed::derived_rng(run_seed, BATCH_STREAM, step);
    let kinds = WeightedIndex::new(config.text_mix).map_err(|e| Error::Config(format!("text_mix: {e}")))?;
    let sources: Vec<(&Record, TextKind)> = (0..config.batch_size)
        .map(|_| {
            let r = &train[rng.random_range(0..train.len())];
            (r, TextKind::ALL[kinds.sample(&mut rng)])
        })
        .collect();
    let pairs = sample_itm(&sources, train, seed::derive(run_seed, ITM_STREAM, step))?;
    mask_pairs(
        pairs,
        config.token_mask_rate,
        config.object_mask_rate,
        vocab_size,
        seed::derive(run_seed, MASK_STREAM, step),
    )
}

pub struct Pretrainer {
    pub heads: PretrainHeads,
    pub adam: Adam,
    pub config: PretrainConfig,
    pub seed: u64,
}

impl Pretrainer {
    pub fn new(
        params: &mut SharedParams,
        config: PretrainConfig,
        num_labels: usize,
        num_answers: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let heads = PretrainHeads::ensure(params, num_labels, num_answers, &mut seed::derived_rng(seed, HEAD_STREAM, 0))?;
        let adam = Adam::new(config.optimizer.clone())?;
        Ok(Pretrainer {
            heads,
            adam,
            config,
            seed,
        })
    }

    /// Runs updates from the optimizer's current step up to `config.steps`.
    pub fn run(
        &mut self,
        params: &mut SharedParams,
        train: &[Record],
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<()> {
        while self.adam.step < self.config.steps {
            let rec = self.step(params, train)?;
            on_step(&rec)?;
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut SharedParams, train: &[Record]) -> Result<StepRecord> {
        let step = self.adam.step;
        let batch = sample_batch(train, &self.config, params.config.vocab_size, self.seed, step)?;
        let mode = self.config.mode_mix.mode_at(step);
        let dropout_seed = seed::derive(self.seed, DROPOUT_STREAM, step);
        let (losses, lr) = train_step_in_mode(params, &self.heads, &mut self.adam, &batch, mode, dropout_seed)?;
        Ok(StepRecord { step, losses, lr })
    }
}

/// Matched-probability logit margin `logit[1] - logit[0]` for one pair.
pub fn itm_margin(
    params: &SharedParams,
    heads: &PretrainHeads,
    mode: Mode,
    text: &crate::encoder::TextInput,
    objects: &crate::encoder::ObjectInput,
) -> Result<f64> {
    let g = Graph::new();
    let enc = params.forward(&g, mode, text, objects, &mut Dropout::off())?;
    let logits = heads.itm.forward(&g, params, enc.pooled)?.value();
    Ok(logits.data()[1] - logits.data()[0])
}

/// How held-out matching pairs are prepared before scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItmInputs {
    /// Unmodified texts and objects.
    Clean,
    /// Masked exactly as pretraining batches are, from the evaluation seed.
    Masked { token_rate: f64, object_rate: f64 },
}

impl ItmInputs {
    pub fn like(config: &PretrainConfig) -> Self {
        ItmInputs::Masked {
            token_rate: config.token_mask_rate,
            object_rate: config.object_mask_rate,
        }
    }
}

/// Accuracy over pairs built by the pretraining sampler: every record (an
/// even number of them) once, half matched and half given another record's
/// text of the same kind.
#[allow(clippy::too_many_arguments)]
pub fn itm_accuracy(
    params: &SharedParams,
    heads: &PretrainHeads,
    records: &[Record],
    mode: Mode,
    kind: TextKind,
    inputs: ItmInputs,
    eval_seed: u64,
) -> Result<f64> {
    let even = records.len() - records.len() % 2;
    let sources: Vec<(&Record, TextKind)> = records[..even].iter().map(|r| (r, kind)).collect();
    let pairs = sample_itm(&sources, records, seed::derive(eval_seed, ITM_STREAM, 0))?;
    let scored: Vec<(crate::encoder::TextInput, crate::encoder::ObjectInput, bool)> = match inputs {
        ItmInputs::Clean => pairs.into_iter().map(|p| (p.text, p.objects, p.matched)).collect(),
        ItmInputs::Masked { token_rate, object_rate } => mask_pairs(
            pairs,
            token_rate,
            object_rate,
            params.config.vocab_size,
            seed::derive(eval_seed, MASK_STREAM, 0),
        )?
        .examples
        .into_iter()
        .map(|e| (e.text, e.objects, e.matched))
        .collect(),
    };
    let mut correct = 0usize;
    for (text, objects, matched) in &scored {
        correct += ((itm_margin(params, heads, mode, text, objects)? > 0.0) == *matched) as usize;
    }
    Ok(correct as f64 / scored.len() as f64)
}
