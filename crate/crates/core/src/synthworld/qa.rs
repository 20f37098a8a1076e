use rand::Rng;
use serde::{Deserialize, Serialize};

use super::caption::COUNT_WORDS;
use super::scene::{Color, Relation, Scene, Shape};
use super::vocab::{Vocab, ANSWERS};
use crate::encoder::TextInput;
use crate::error::{Error, Result};
use crate::seed;

pub const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub question: TextInput,
    pub answer_id: usize,
}

impl QaItem {
    pub fn answer(&self) -> &'static str {
        ANSWERS[self.answer_id]
    }
}

/// Question and answer words; `None` when the drawn template is ambiguous
/// on this scene.
fn attempt(scene: &Scene, rng: &mut impl Rng) -> Option<(Vec<&'static str>, &'static str)> {
    let objs = &scene.objects;
    let yes_no = |b: bool| if b { "yes" } else { "no" };
    match rng.random_range(0..6) {
        0 => Some((
            vec!["how", "many", "shapes", "are", "there", "?"],
            COUNT_WORDS[objs.len() - 1],
        )),
        1 => {
            let shape = Shape::ALL[rng.random_range(0..4)];
            let mut hits = objs.iter().filter(|o| o.shape == shape);
            let o = hits.next()?;
            if hits.next().is_some() {
                return None;
            }
            Some((vec!["what", "color", "is", "the", shape.word(), "?"], o.color.word()))
        }
        2 => {
            let color = Color::ALL[rng.random_range(0..4)];
            let mut hits = objs.iter().filter(|o| o.color == color);
            let o = hits.next()?;
            if hits.next().is_some() {
                return None;
            }
            Some((
                vec!["what", "shape", "is", "the", color.word(), "object", "?"],
                o.shape.word(),
            ))
        }
        3 => {
            // Half the time ask about a present kind so yes and no balance.
            let (shape, color) = if rng.random_bool(0.5) {
                let o = &objs[rng.random_range(0..objs.len())];
                (o.shape, o.color)
            } else {
                (Shape::ALL[rng.random_range(0..4)], Color::ALL[rng.random_range(0..4)])
            };
            let present = scene.count_where(|o| o.shape == shape && o.color == color) > 0;
            Some((vec!["is", "there", "a", color.word(), shape.word(), "?"], yes_no(present)))
        }
        4 => {
            let color = Color::ALL[rng.random_range(0..4)];
            let n = scene.count_where(|o| o.color == color);
            if n == 0 {
                return None;
            }
            Some((
                vec!["how", "many", color.word(), "shapes", "are", "there", "?"],
                COUNT_WORDS[n - 1],
            ))
        }
        _ => {
            if objs.len() < 2 {
                return None;
            }
            let i = rng.random_range(0..objs.len());
            let j = (i + rng.random_range(1..objs.len())) % objs.len();
            let (a, b) = (&objs[i], &objs[j]);
            let unique = |o: &super::scene::SceneObject| scene.count_where(|x| x.label() == o.label()) == 1;
            if !unique(a) || !unique(b) {
                return None;
            }
            let truth = Relation::between(a, b);
            let asked = if rng.random_bool(0.5) {
                truth
            } else {
                Relation::ALL[rng.random_range(0..4)]
            };
            let mut q = vec!["is", "the", a.color.word(), a.shape.word()];
            q.extend(asked.words());
            q.extend(["the", b.color.word(), b.shape.word(), "?"]);
            Some((q, yes_no(asked == truth)))
        }
    }
}

/// Question words and answer string, re-rolling ambiguous draws.
pub fn qa_words(scene: &Scene, rng_seed: u64) -> Result<(Vec<&'static str>, &'static str)> {
    if scene.objects.is_empty() {
        return Err(Error::Empty("scene objects"));
    }
    let mut rng = seed::rng(rng_seed);
    for _ in 0..MAX_ATTEMPTS {
        if let Some(qa) = attempt(scene, &mut rng) {
            return Ok(qa);
        }
    }
    Err(Error::Generation(format!(
        "no unambiguous question for scene {} after {MAX_ATTEMPTS} attempts",
        scene.scene_id
    )))
}

pub fn gen_qa(scene: &Scene, rng_seed: u64, vocab: &Vocab) -> Result<QaItem> {
    let (q, a) = qa_words(scene, rng_seed)?;
    Ok(QaItem {
        question: vocab.encode(&q)?,
        answer_id: Vocab::answer_id(a).expect("generators only emit closed-set answers"),
    })
}
