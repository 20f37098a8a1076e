use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::ObjectInput;
use crate::seed;

pub const CANVAS: f64 = 100.0;
pub const MAX_OBJECTS: usize = 6;
pub const FEATURE_DIM: usize = 16;
pub const FEATURE_NOISE: f64 = 0.05;
pub const NUM_LABELS: usize = Shape::ALL.len() * Color::ALL.len();

const PROTOTYPE_SEED: u64 = 0x5EED0F5CE7E;
const MIN_SIDE: f64 = 10.0;
const MAX_SIDE: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Star,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Star];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Star => "star",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Shape::ALL.into_iter().find(|s| s.word() == w)
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Color::ALL.into_iter().find(|c| c.word() == w)
    }
}

/// Detector label of a (shape, color) kind.
pub fn label_of(shape: Shape, color: Color) -> usize {
    shape as usize * Color::ALL.len() + color as usize
}

pub fn kind_of_label(label: usize) -> (Shape, Color) {
    (Shape::ALL[label / Color::ALL.len()], Color::ALL[label % Color::ALL.len()])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

impl SceneObject {
    pub fn label(&self) -> usize {
        label_of(self.shape, self.color)
    }

    pub fn center(&self) -> (f64, f64) {
        let [x1, y1, x2, y2] = self.bbox;
        ((x1 + x2) / 2.0, (y1 + y2) / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    pub fn words(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
            Relation::Above => &["above"],
            Relation::Below => &["below"],
        }
    }

    /// Relation of `a` to `b` along the axis with the larger center offset.
    /// Image coordinates: y grows downward.
    pub fn between(a: &SceneObject, b: &SceneObject) -> Relation {
        let (ax, ay) = a.center();
        let (bx, by) = b.center();
        let (dx, dy) = (bx - ax, by - ay);
        if dx.abs() >= dy.abs() {
            if dx > 0.0 {
                Relation::LeftOf
            } else {
                Relation::RightOf
            }
        } else if dy > 0.0 {
            Relation::Above
        } else {
            Relation::Below
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn labels(&self) -> Vec<usize> {
        self.objects.iter().map(SceneObject::label).collect()
    }

    /// Sorted detector labels; equal multisets mean equal object inventories.
    pub fn inventory(&self) -> Vec<usize> {
        let mut l = self.labels();
        l.sort_unstable();
        l
    }

    pub fn count_where(&self, f: impl Fn(&SceneObject) -> bool) -> usize {
        self.objects.iter().filter(|o| f(o)).count()
    }
}

/// Fixed per-kind feature prototypes: a shape component plus a color
/// component, so kinds sharing a shape or color share structure.
pub fn prototypes() -> &'static [Vec<f64>] {
    static TABLE: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    TABLE.get_or_init(build_prototypes)
}

fn build_prototypes() -> Vec<Vec<f64>> {
    let mut rng = seed::rng(PROTOTYPE_SEED);
    let normal = Normal::new(0.0, 0.5).expect("valid std");
    let mut basis = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..FEATURE_DIM).map(|_| normal.sample(&mut rng)).collect())
            .collect()
    };
    let shapes = basis(Shape::ALL.len());
    let colors = basis(Color::ALL.len());
    (0..NUM_LABELS)
        .map(|label| {
            let (s, c) = kind_of_label(label);
            shapes[s as usize]
                .iter()
                .zip(&colors[c as usize])
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect()
}

/// Samples a scene and its region features from one seed.
pub fn gen_scene(rng_seed: u64) -> (Scene, ObjectInput) {
    gen_scene_with_id(rng_seed, rng_seed)
}

pub fn gen_scene_with_id(rng_seed: u64, scene_id: u64) -> (Scene, ObjectInput) {
    let mut rng = seed::rng(rng_seed);
    let n = rng.random_range(1..=MAX_OBJECTS);
    let objects: Vec<SceneObject> = (0..n)
        .map(|_| {
            let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
            let color = Color::ALL[rng.random_range(0..Color::ALL.len())];
            let w = rng.random_range(MIN_SIDE..=MAX_SIDE);
            let h = rng.random_range(MIN_SIDE..=MAX_SIDE);
            let x1 = rng.random_range(0.0..=CANVAS - w);
            let y1 = rng.random_range(0.0..=CANVAS - h);
            SceneObject {
                shape,
                color,
                bbox: [x1, y1, x1 + w, y1 + h],
            }
        })
        .collect();
    let scene = Scene { scene_id, objects };
    let features = features_for(&scene, &mut rng);
    let input = ObjectInput {
        features,
        boxes: scene.objects.iter().map(|o| o.bbox).collect(),
        image_size: (CANVAS, CANVAS),
        detector_labels: scene.labels(),
    };
    (scene, input)
}

fn features_for(scene: &Scene, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let protos = prototypes();
    let noise = Normal::new(0.0, FEATURE_NOISE).expect("valid std");
    scene
        .objects
        .iter()
        .map(|o| protos[o.label()].iter().map(|p| p + noise.sample(rng)).collect())
        .collect()
}

/// Nearest-prototype decoding of region features back to detector labels.
pub fn decode_labels(features: &[Vec<f64>]) -> Vec<usize> {
    let protos = prototypes();
    features
        .iter()
        .map(|f| {
            let dist = |p: &Vec<f64>| -> f64 { p.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum() };
            (0..protos.len())
                .min_by(|&a, &b| dist(&protos[a]).total_cmp(&dist(&protos[b])))
                .expect("non-empty prototype table")
        })
        .collect()
}
