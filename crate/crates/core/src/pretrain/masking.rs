use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::config::{MASK, NUM_SPECIAL};
use crate::encoder::{ObjectInput, TextInput};
use crate::error::{Error, Result};
use crate::seed;

/// Masked word positions (indices into the full token sequence, so never
/// 0 or the last slot) and the ids they held.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlmTargets {
    pub positions: Vec<usize>,
    pub originals: Vec<usize>,
    /// False on mismatched pairs: the targets exist but contribute no loss.
    pub active: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectTargets {
    /// Object indices (0-based, excluding [IMG]).
    pub indices: Vec<usize>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub active: bool,
}

/// `max(1, round(rate · n))`, capped at `n`.
pub fn mask_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64).round() as usize).max(1).min(n)
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid("mask", format!("rate {rate} outside [0, 1]")));
    }
    Ok(())
}

/// BERT-style masking: of the chosen words 80% become [MASK], 10% a random
/// non-special id, 10% stay unchanged.
pub fn mask_tokens(text: &TextInput, rate: f64, vocab_size: usize, rng_seed: u64) -> Result<(TextInput, MlmTargets)> {
    check_rate(rate)?;
    let m = text.num_words();
    if m == 0 {
        return Err(Error::Empty("text has no maskable tokens"));
    }
    let mut rng = seed::rng(rng_seed);
    let mut chosen = index::sample(&mut rng, m, mask_count(rate, m)).into_vec();
    chosen.sort_unstable();
    let mut masked = text.clone();
    let mut targets = MlmTargets {
        active: true,
        ..Default::default()
    };
    for w in chosen {
        let pos = w + 1;
        targets.positions.push(pos);
        targets.originals.push(text.token_ids[pos]);
        let roll: f64 = rng.random();
        if roll < 0.8 {
            masked.token_ids[pos] = MASK;
        } else if roll < 0.9 {
            masked.token_ids[pos] = rng.random_range(NUM_SPECIAL..vocab_size);
        }
    }
    Ok((masked, targets))
}

/// Zeroes the features of `max(1, round(rate · n))` objects; boxes stay.
pub fn mask_objects(objects: &ObjectInput, rate: f64, rng_seed: u64) -> Result<(ObjectInput, ObjectTargets)> {
    check_rate(rate)?;
    let n = objects.len();
    if n == 0 {
        return Err(Error::Empty("scene has no maskable objects"));
    }
    let mut rng = seed::rng(rng_seed);
    let mut chosen = index::sample(&mut rng, n, mask_count(rate, n)).into_vec();
    chosen.sort_unstable();
    let mut masked = objects.clone();
    let mut targets = ObjectTargets {
        active: true,
        ..Default::default()
    };
    for j in chosen {
        targets.indices.push(j);
        targets.features.push(objects.features[j].clone());
        targets.labels.push(objects.detector_labels[j]);
        masked.features[j].fill(0.0);
    }
    Ok((masked, targets))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        assert_eq!(mask_count(0.15, 20), 3);
        assert_eq!(mask_count(0.0, 20), 1);
        assert_eq!(mask_count(0.15, 6), 1);
        assert_eq!(mask_count(1.0, 4), 4);
    }

    #[test]
    fn specials_never_masked() {
        let t = TextInput::from_words(&[5, 6, 7]);
        for s in 0..200 {
            let (m, tg) = mask_tokens(&t, 1.0, 40, s).unwrap();
            assert_eq!(m.token_ids[0], t.token_ids[0]);
            assert_eq!(m.token_ids[4], t.token_ids[4]);
            assert_eq!(tg.positions, vec![1, 2, 3]);
        }
        assert!(mask_tokens(&TextInput::from_words(&[]), 0.15, 40, 0).is_err());
        assert!(mask_tokens(&t, 1.5, 40, 0).is_err());
    }
}
