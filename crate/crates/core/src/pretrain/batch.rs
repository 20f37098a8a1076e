use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::masking::{mask_objects, mask_tokens, MlmTargets, ObjectTargets};
use crate::encoder::{ObjectInput, TextInput};
use crate::error::{Error, Result};
use crate::seed;
use crate::synthworld::caption::Layout;
use crate::synthworld::{Level, Record};

/// Which of a record's texts a pair uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextKind {
    Coarse,
    Fine,
    Question,
}

impl TextKind {
    pub const ALL: [TextKind; 3] = [TextKind::Coarse, TextKind::Fine, TextKind::Question];

    pub fn of(self, record: &Record) -> &TextInput {
        match self {
            TextKind::Coarse => record.caption(Level::Coarse),
            TextKind::Fine => record.caption(Level::Fine),
            TextKind::Question => &record.qa.question,
        }
    }
}

/// An image with a text, before masking.
#[derive(Debug, Clone, PartialEq)]
pub struct ItmPair {
    pub text: TextInput,
    pub objects: ObjectInput,
    pub matched: bool,
    /// Present only for matched question pairs.
    pub qa_answer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainExample {
    pub text: TextInput,
    pub objects: ObjectInput,
    pub matched: bool,
    pub mlm: MlmTargets,
    pub obj: ObjectTargets,
    pub qa_answer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PretrainBatch {
    pub examples: Vec<PretrainExample>,
}

impl PretrainBatch {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_matched(&self) -> usize {
        self.examples.iter().filter(|e| e.matched).count()
    }
}

/// Whether `donor`'s caption of this kind could also be a true caption of
/// `target`. Fine captions are compared by inventory only, which rejects a
/// few false captions as well.
fn could_describe(kind: TextKind, donor: &Record, target: &Record) -> bool {
    match kind {
        TextKind::Coarse => {
            donor.scene.objects.len() == target.scene.objects.len() && Layout::of(&donor.scene) == Layout::of(&target.scene)
        }
        TextKind::Fine => donor.scene.inventory() == target.scene.inventory(),
        TextKind::Question => false,
    }
}

/// Keeps a random half of `sources` matched and gives the other half a text
/// of the same kind taken from a different record of `pool`. Replacements
/// whose tokens equal the original, or captions that would still be true of
/// the image, are rejected.
pub fn sample_itm(sources: &[(&Record, TextKind)], pool: &[Record], rng_seed: u64) -> Result<Vec<ItmPair>> {
    let b = sources.len();
    if b < 2 || !b.is_multiple_of(2) {
        return Err(Error::invalid(
            "sample_itm",
            format!("batch size {b} must be even and at least 2"),
        ));
    }
    if pool.len() < 2 {
        return Err(Error::Empty("mismatch pool needs at least two records"));
    }
    let mut rng = seed::rng(rng_seed);
    let mut order: Vec<usize> = (0..b).collect();
    order.shuffle(&mut rng);
    let mut mismatched = vec![false; b];
    for &i in &order[..b / 2] {
        mismatched[i] = true;
    }
    let mut out = Vec::with_capacity(b);
    for (i, &(rec, kind)) in sources.iter().enumerate() {
        let own = kind.of(rec);
        if !mismatched[i] {
            out.push(ItmPair {
                text: own.clone(),
                objects: rec.objects.clone(),
                matched: true,
                qa_answer: (kind == TextKind::Question).then_some(rec.qa.answer_id),
            });
            continue;
        }
        let mut replacement = None;
        for _ in 0..1000 {
            let other = &pool[rng.random_range(0..pool.len())];
            let text = kind.of(other);
            if other.scene.scene_id != rec.scene.scene_id && text.token_ids != own.token_ids && !could_describe(kind, other, rec)
            {
                replacement = Some(text.clone());
                break;
            }
        }
        let text = replacement
            .ok_or_else(|| Error::Generation(format!("no distinct replacement text for scene {}", rec.scene.scene_id)))?;
        out.push(ItmPair {
            text,
            objects: rec.objects.clone(),
            matched: false,
            qa_answer: None,
        });
    }
    Ok(out)
}

/// Masks every pair; mismatched pairs keep inert targets so the masked
/// positions cannot reveal the matching label.
pub fn mask_pairs(
    pairs: Vec<ItmPair>,
    token_rate: f64,
    object_rate: f64,
    vocab_size: usize,
    rng_seed: u64,
) -> Result<PretrainBatch> {
    let mut examples = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.into_iter().enumerate() {
        let (text, mut mlm) = mask_tokens(&p.text, token_rate, vocab_size, seed::derive(rng_seed, 0, i as u64))?;
        let (objects, mut obj) = mask_objects(&p.objects, object_rate, seed::derive(rng_seed, 1, i as u64))?;
        mlm.active = p.matched;
        obj.active = p.matched;
        examples.push(PretrainExample {
            text,
            objects,
            matched: p.matched,
            mlm,
            obj,
            qa_answer: p.qa_answer,
        });
    }
    Ok(PretrainBatch { examples })
}
