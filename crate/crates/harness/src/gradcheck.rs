//! Full-model finite-difference check of every parameter group.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use semvlp_core::encoder::config::NUM_SPECIAL;
use semvlp_core::encoder::{Dropout, EncoderConfig, Mode, ObjectInput, SharedParams, TextInput};
use semvlp_core::pretrain::{batch_losses, mask_pairs, ItmPair, PretrainBatch, PretrainHeads};
use semvlp_core::seed;
use semvlp_core::tensor::{relative_error, BackwardFault, Graph};

use crate::error::Result;

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-5;
const NUM_LABELS: usize = 4;
const NUM_ANSWERS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub mode: Mode,
    /// Parameter name without its last component, e.g. `layer.2.cross_attn.query`.
    pub group: String,
    pub elements: usize,
    /// False when no loss term reaches the group in this mode.
    pub exercised: bool,
    pub worst_relative_error: f64,
    pub worst_param: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub seconds: f64,
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<&GroupResult> {
        self.groups
            .iter()
            .filter(|g| g.worst_relative_error.is_nan() || g.worst_relative_error >= self.tolerance)
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn worst(&self, mode: Mode) -> f64 {
        self.groups
            .iter()
            .filter(|g| g.mode == mode)
            .map(|g| g.worst_relative_error)
            .fold(0.0, f64::max)
    }
}

pub fn group_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(g, _)| g)
}

/// Three pairs of four words and two objects: two matched (one carrying a
/// QA answer) and one mismatched, masked like a pretraining batch.
fn probe_batch(config: &EncoderConfig, rng_seed: u64) -> Result<PretrainBatch> {
    let mut rng = seed::rng(rng_seed);
    let mut text = || {
        TextInput::from_words(
            &(0..4)
                .map(|_| rng.random_range(NUM_SPECIAL..config.vocab_size))
                .collect::<Vec<_>>(),
        )
    };
    let texts = [text(), text(), text()];
    let mut rng = seed::rng(rng_seed + 1);
    let mut objects = || ObjectInput {
        features: (0..2)
            .map(|_| (0..config.object_feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect(),
        boxes: (0..2)
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..60.0), rng.random_range(0.0..60.0));
                [x, y, x + rng.random_range(5.0..40.0), y + rng.random_range(5.0..40.0)]
            })
            .collect(),
        image_size: (100.0, 100.0),
        detector_labels: (0..2).map(|_| rng.random_range(0..NUM_LABELS)).collect(),
    };
    let pairs = texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| ItmPair {
            text,
            objects: objects(),
            matched: i < 2,
            qa_answer: (i == 0).then_some(1),
        })
        .collect();
    Ok(mask_pairs(pairs, 0.25, 0.5, config.vocab_size, rng_seed + 2)?)
}

fn loss(params: &SharedParams, heads: &PretrainHeads, batch: &PretrainBatch, mode: Mode) -> Result<f64> {
    let g = Graph::new();
    Ok(batch_losses(&g, params, heads, batch, mode, &mut Dropout::off())?
        .total
        .item())
}

/// Compares backprop against central differences for every scalar of every
/// parameter (encoder and pretraining heads) in both modes. `fault` corrupts
/// the analytic pass only, as a negative control.
pub fn gradcheck(config: &EncoderConfig, rng_seed: u64, fault: Option<BackwardFault>) -> Result<GradcheckReport> {
    config.validate()?;
    let start = Instant::now();
    let mut params = SharedParams::init(config, &mut seed::rng(rng_seed))?;
    let heads = PretrainHeads::ensure(&mut params, NUM_LABELS, NUM_ANSWERS, &mut seed::rng(rng_seed + 1))?;
    let batch = probe_batch(config, rng_seed + 2)?;
    let ids: Vec<_> = params.store.iter().map(|(id, name, _)| (id, name.to_string())).collect();

    let mut groups = Vec::new();
    for mode in Mode::BOTH {
        let g = fault.map_or_else(Graph::new, Graph::with_fault);
        let total = batch_losses(&g, &params, &heads, &batch, mode, &mut Dropout::off())?.total;
        let grads = g.backward(total)?;
        let mut by_group: BTreeMap<String, GroupResult> = BTreeMap::new();
        for (id, name) in &ids {
            let analytic = grads.get(*id).map(|t| t.data().to_vec());
            let n = params.store.get(*id).numel();
            let entry = by_group.entry(group_of(name).to_string()).or_insert_with(|| GroupResult {
                mode,
                group: group_of(name).to_string(),
                elements: 0,
                exercised: false,
                worst_relative_error: 0.0,
                worst_param: name.clone(),
            });
            entry.elements += n;
            for i in 0..n {
                let orig = params.store.get(*id).data()[i];
                params.store.get_mut(*id).data_mut()[i] = orig + STEP;
                let plus = loss(&params, &heads, &batch, mode)?;
                params.store.get_mut(*id).data_mut()[i] = orig - STEP;
                let minus = loss(&params, &heads, &batch, mode)?;
                params.store.get_mut(*id).data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * STEP);
                let a = analytic.as_ref().map_or(0.0, |v| v[i]);
                entry.exercised |= numeric != 0.0 || a != 0.0;
                let err = relative_error(a, numeric, FLOOR);
                if err.is_nan() || err > entry.worst_relative_error {
                    entry.worst_relative_error = err;
                    entry.worst_param = format!("{name}[{i}]");
                }
            }
        }
        groups.extend(by_group.into_values());
    }
    Ok(GradcheckReport {
        tolerance: TOLERANCE,
        seconds: start.elapsed().as_secs_f64(),
        groups,
    })
}
