//! Scorer that knows the generator: decodes region features back to kinds
//! through the prototype table and checks a caption against them.

use super::caption::{parse_fine, Layout, COUNT_WORDS};
use super::scene::{decode_labels, kind_of_label, Relation, Scene, SceneObject};
use crate::encoder::ObjectInput;

/// Rebuilds a scene from features and boxes alone.
pub fn decode_scene(objects: &ObjectInput) -> Scene {
    let labels = decode_labels(&objects.features);
    Scene {
        scene_id: 0,
        objects: labels
            .iter()
            .zip(&objects.boxes)
            .map(|(&l, &bbox)| {
                let (shape, color) = kind_of_label(l);
                SceneObject { shape, color, bbox }
            })
            .collect(),
    }
}

/// Size of the multiset symmetric difference of two sorted label lists.
pub fn inventory_distance(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut d) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
            }
            std::cmp::Ordering::Less => {
                d += 1;
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                d += 1;
                j += 1;
            }
        }
    }
    d + (a.len() - i) + (b.len() - j)
}

/// Whether some assignment of caption mentions to scene objects of the same
/// kind satisfies every chained relation.
fn relations_hold(scene: &Scene, labels: &[usize], relations: &[Relation]) -> bool {
    fn search(scene: &Scene, labels: &[usize], relations: &[Relation], chosen: &mut Vec<usize>, used: &mut [bool]) -> bool {
        let k = chosen.len();
        if k == labels.len() {
            return true;
        }
        for i in 0..scene.objects.len() {
            if used[i] || scene.objects[i].label() != labels[k] {
                continue;
            }
            if k > 0 {
                let prev = &scene.objects[chosen[k - 1]];
                if Relation::between(prev, &scene.objects[i]) != relations[k - 1] {
                    continue;
                }
            }
            used[i] = true;
            chosen.push(i);
            if search(scene, labels, relations, chosen, used) {
                return true;
            }
            chosen.pop();
            used[i] = false;
        }
        false
    }
    let mut used = vec![false; scene.objects.len()];
    search(scene, labels, relations, &mut Vec::new(), &mut used)
}

/// Higher is better; 0 means the caption is fully consistent with the
/// decoded scene. `words` excludes [CLS]/[SEP].
pub fn caption_score(words: &[String], objects: &ObjectInput) -> f64 {
    let scene = decode_scene(objects);
    if let Some(parsed) = parse_fine(words) {
        let mut mentioned = parsed.labels.clone();
        mentioned.sort_unstable();
        let d = inventory_distance(&mentioned, &scene.inventory());
        if d > 0 {
            return -(d as f64);
        }
        return if relations_hold(&scene, &parsed.labels, &parsed.relations) {
            0.0
        } else {
            -0.5
        };
    }
    let count_ok = words
        .iter()
        .find_map(|w| COUNT_WORDS.iter().position(|c| c == w))
        .is_some_and(|i| i + 1 == scene.objects.len());
    let layout_words = Layout::of(&scene).words();
    let layout_ok = words.ends_with(&layout_words.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    -((!count_ok) as u8 as f64) - 0.5 * (!layout_ok) as u8 as f64
}

/// Negated inventory distance: 0 for scenes holding the same kinds.
pub fn scene_similarity(a: &Scene, b: &Scene) -> f64 {
    -(inventory_distance(&a.inventory(), &b.inventory()) as f64)
}
