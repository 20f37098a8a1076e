use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Relation, Scene, CANVAS};
use super::vocab::Vocab;
use crate::encoder::TextInput;
use crate::error::Result;
use crate::seed;

/// Caption granularity: an abstract overview or an object-by-object account.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Coarse,
    Fine,
}

pub const COUNT_WORDS: [&str; 6] = ["one", "two", "three", "four", "five", "six"];

/// Centroid spread (max center distance from the centroid) above which a
/// scene is described as spanning the canvas.
const SPREAD_THRESHOLD: f64 = 35.0;
/// Centroid offset from the canvas middle below which a scene is centered.
const CENTER_THRESHOLD: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Across,
    Center,
    Left,
    Right,
    Top,
    Bottom,
}

impl Layout {
    pub fn of(scene: &Scene) -> Layout {
        let n = scene.objects.len() as f64;
        let centers: Vec<(f64, f64)> = scene.objects.iter().map(|o| o.center()).collect();
        let mx = centers.iter().map(|c| c.0).sum::<f64>() / n;
        let my = centers.iter().map(|c| c.1).sum::<f64>() / n;
        let spread = centers
            .iter()
            .map(|(x, y)| ((x - mx).powi(2) + (y - my).powi(2)).sqrt())
            .fold(0.0, f64::max);
        if spread > SPREAD_THRESHOLD {
            return Layout::Across;
        }
        let (dx, dy) = (mx - CANVAS / 2.0, my - CANVAS / 2.0);
        if dx.abs().max(dy.abs()) < CENTER_THRESHOLD {
            Layout::Center
        } else if dx.abs() >= dy.abs() {
            if dx < 0.0 {
                Layout::Left
            } else {
                Layout::Right
            }
        } else if dy < 0.0 {
            Layout::Top
        } else {
            Layout::Bottom
        }
    }

    pub fn words(self) -> &'static [&'static str] {
        match self {
            Layout::Across => &["across", "the", "canvas"],
            Layout::Center => &["in", "the", "center"],
            Layout::Left => &["on", "the", "left"],
            Layout::Right => &["on", "the", "right"],
            Layout::Top => &["at", "the", "top"],
            Layout::Bottom => &["at", "the", "bottom"],
        }
    }
}

/// Caption words before tokenization.
pub fn caption_words(scene: &Scene, level: Level, rng_seed: u64) -> Vec<&'static str> {
    let mut rng = seed::rng(rng_seed);
    match level {
        Level::Coarse => {
            let n = scene.objects.len();
            let mut words = Vec::new();
            if rng.random_bool(0.5) {
                words.extend(["there", if n == 1 { "is" } else { "are" }]);
            }
            words.push(COUNT_WORDS[n - 1]);
            words.push(if n == 1 { "shape" } else { "shapes" });
            words.extend(Layout::of(scene).words());
            words
        }
        Level::Fine => {
            let mut order: Vec<usize> = (0..scene.objects.len()).collect();
            order.shuffle(&mut rng);
            let mut words = Vec::new();
            for (k, &i) in order.iter().enumerate() {
                let o = &scene.objects[i];
                words.push(o.color.word());
                words.push(o.shape.word());
                if let Some(&next) = order.get(k + 1) {
                    words.extend(Relation::between(o, &scene.objects[next]).words());
                }
            }
            words
        }
    }
}

pub fn gen_caption(scene: &Scene, level: Level, rng_seed: u64, vocab: &Vocab) -> Result<TextInput> {
    vocab.encode(&caption_words(scene, level, rng_seed))
}

/// A fine caption read back into its object kinds and chained relations.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedFine {
    pub labels: Vec<usize>,
    /// `relations[k]` relates object `k` to object `k + 1`.
    pub relations: Vec<Relation>,
}

/// Parses the word sequence of a fine caption; `None` when it is not one.
pub fn parse_fine(words: &[String]) -> Option<ParsedFine> {
    use super::scene::{label_of, Color, Shape};
    let mut labels = Vec::new();
    let mut relations = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let color = Color::from_word(&words[i])?;
        let shape = Shape::from_word(words.get(i + 1)?)?;
        labels.push(label_of(shape, color));
        i += 2;
        if i >= words.len() {
            break;
        }
        let (rel, used) = match words[i].as_str() {
            "left" => (Relation::LeftOf, 2),
            "right" => (Relation::RightOf, 2),
            "above" => (Relation::Above, 1),
            "below" => (Relation::Below, 1),
            _ => return None,
        };
        relations.push(rel);
        i += used;
    }
    (!labels.is_empty()).then_some(ParsedFine { labels, relations })
}
