use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corpus::Record;
use super::scene::{kind_of_label, Scene};
use super::vocab::Vocab;
use crate::encoder::TextInput;
use crate::error::{Error, Result};
use crate::seed;

/// A statement about two images, true when it holds for both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlvrItem {
    /// Indices into the record list the pair was drawn from.
    pub left: usize,
    pub right: usize,
    pub statement: TextInput,
    pub label: bool,
}

fn contains(scene: &Scene, label: usize) -> bool {
    scene.objects.iter().any(|o| o.label() == label)
}

/// One item per record: a kind is drawn from the left scene, and the right
/// scene is drawn (with equal odds) from scenes that do or do not hold it.
pub fn gen_nlvr(records: &[Record], rng_seed: u64, vocab: &Vocab) -> Result<Vec<NlvrItem>> {
    if records.len() < 2 {
        return Err(Error::Empty("nlvr needs at least two scenes"));
    }
    let mut rng = seed::rng(rng_seed);
    let mut items = Vec::with_capacity(records.len());
    for (left, rec) in records.iter().enumerate() {
        let objs = &rec.scene.objects;
        let label = objs[rng.random_range(0..objs.len())].label();
        let want = rng.random_bool(0.5);
        let candidates: Vec<usize> = (0..records.len())
            .filter(|&j| j != left && contains(&records[j].scene, label) == want)
            .collect();
        let right = if candidates.is_empty() {
            (left + 1 + rng.random_range(0..records.len() - 1)) % records.len()
        } else {
            candidates[rng.random_range(0..candidates.len())]
        };
        let (shape, color) = kind_of_label(label);
        items.push(NlvrItem {
            left,
            right,
            statement: vocab.encode(&["both", "images", "contain", "a", color.word(), shape.word()])?,
            label: contains(&records[right].scene, label),
        });
    }
    Ok(items)
}
