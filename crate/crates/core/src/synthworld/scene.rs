//! Scene content: shapes, positions, and the deterministic caption template.

use crate::rng::Rng;
use crate::textencode::base_vocabulary;
use crate::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Shape {
    Circle,
    Triangle,
    Square,
}

impl Shape {
    fn word(self, plural: bool) -> &'static str {
        match (self, plural) {
            (Shape::Circle, false) => "circle",
            (Shape::Circle, true) => "circles",
            (Shape::Triangle, false) => "triangle",
            (Shape::Triangle, true) => "triangles",
            (Shape::Square, false) => "square",
            (Shape::Square, true) => "squares",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SceneObject {
    pub shape: Shape,
    /// Position in unit scene coordinates.
    pub x: f32,
    pub y: f32,
    /// Size as a fraction of image height.
    pub size: f32,
    /// Base hue in [0, 1).
    pub hue: f32,
}

/// Scene content: what is in the picture, independent of every imaging factor.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub caption_ids: Vec<usize>,
}

impl SceneSpec {
    pub fn new(seed: u64, objects: Vec<SceneObject>) -> Result<Self> {
        if objects.is_empty() || objects.len() > 6 {
            return Err(Error::InvalidScene(format!(
                "scene must have 1..=6 objects, got {}",
                objects.len()
            )));
        }
        for o in &objects {
            if !(0.0..=1.0).contains(&o.x) || !(0.0..=1.0).contains(&o.y) {
                return Err(Error::InvalidScene(format!("object position ({}, {}) outside unit square", o.x, o.y)));
            }
        }
        let caption_ids = caption_ids_for(&objects)?;
        Ok(SceneSpec { seed, objects, caption_ids })
    }

    /// Draw a random scene. Deterministic in the seed.
    pub fn sample(seed: u64) -> Self {
        let mut rng = Rng::stream(seed, "scene", 0);
        let count = 1 + rng.below(6);
        let shapes = [Shape::Circle, Shape::Triangle, Shape::Square];
        let objects: Vec<SceneObject> = (0..count)
            .map(|_| SceneObject {
                shape: *rng.choose(&shapes),
                x: rng.uniform_in(0.10, 0.90),
                y: rng.uniform_in(0.10, 0.90),
                size: rng.uniform_in(0.10, 0.22),
                hue: rng.uniform_in(0.0, 1.0),
            })
            .collect();
        SceneSpec::new(seed, objects).expect("sampled scene is valid by construction")
    }
}

fn count_word(n: usize) -> &'static str {
    ["one", "two", "three", "four", "five", "six"][n - 1]
}

fn position_word(x: f32, y: f32) -> &'static str {
    // coarse 5-way quantization of the group centroid
    if x < 0.34 {
        "left"
    } else if x > 0.66 {
        "right"
    } else if y < 0.34 {
        "top"
    } else if y > 0.66 {
        "bottom"
    } else {
        "middle"
    }
}

/// Deterministic caption: `a scene with <count> <shape> <pos> ... on plain
/// ground`, padded with fixed filler words to at least 12 tokens. Always
/// 12..=15 tokens, never a factor token.
pub fn caption_scene(scene: &SceneSpec) -> Result<Vec<usize>> {
    caption_ids_for(&scene.objects)
}

fn caption_ids_for(objects: &[SceneObject]) -> Result<Vec<usize>> {
    if objects.is_empty() {
        return Err(Error::InvalidScene("caption requires at least one object".into()));
    }
    let mut words: Vec<&str> = vec!["a", "scene", "with"];
    // group by shape in fixed order
    for shape in [Shape::Circle, Shape::Triangle, Shape::Square] {
        let group: Vec<&SceneObject> = objects.iter().filter(|o| o.shape == shape).collect();
        if group.is_empty() {
            continue;
        }
        let cx = group.iter().map(|o| o.x).sum::<f32>() / group.len() as f32;
        let cy = group.iter().map(|o| o.y).sum::<f32>() / group.len() as f32;
        words.push(count_word(group.len()));
        words.push(group[0].shape.word(group.len() > 1));
        words.push(position_word(cx, cy));
    }
    words.push("on");
    words.push("plain");
    words.push("ground");
    const FILLERS: [&str; 3] = ["calm", "flat", "still"];
    let mut fi = 0;
    while words.len() < 12 {
        words.push(FILLERS[fi % FILLERS.len()]);
        fi += 1;
    }
    debug_assert!(words.len() >= 12 && words.len() <= 15, "caption length {}", words.len());
    let vocab = base_vocabulary();
    words
        .iter()
        .map(|w| vocab.id_of(w).ok_or_else(|| Error::UnknownWord(w.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textencode::base_vocabulary;

    #[test]
    fn caption_is_deterministic_and_bounded() {
        for seed in 0..200 {
            let a = SceneSpec::sample(seed);
            let b = SceneSpec::sample(seed);
            assert_eq!(a.caption_ids, b.caption_ids);
            assert!(a.caption_ids.len() >= 12 && a.caption_ids.len() <= 15);
        }
    }

    #[test]
    fn caption_matches_template() {
        let objects = vec![
            SceneObject { shape: Shape::Circle, x: 0.2, y: 0.5, size: 0.15, hue: 0.1 },
            SceneObject { shape: Shape::Circle, x: 0.25, y: 0.6, size: 0.15, hue: 0.2 },
            SceneObject { shape: Shape::Triangle, x: 0.8, y: 0.5, size: 0.15, hue: 0.5 },
        ];
        let scene = SceneSpec::new(1, objects).unwrap();
        let vocab = base_vocabulary();
        let words: Vec<&str> = scene.caption_ids.iter().map(|&i| vocab.word(i)).collect();
        assert_eq!(
            words,
            ["a", "scene", "with", "two", "circles", "left", "one", "triangle", "right", "on", "plain", "ground"]
        );
    }

    #[test]
    fn empty_scene_rejected() {
        assert!(SceneSpec::new(0, vec![]).is_err());
    }

    #[test]
    fn caption_never_contains_factor_words() {
        let vocab = base_vocabulary();
        let factor_words = [
            "normal", "fisheye", "rgb", "thermal", "rgbthermal", "gated", "event", "front",
            "back", "side", "drone", "pole", "real", "simulation", "videogame",
        ];
        for seed in 0..300 {
            let scene = SceneSpec::sample(seed);
            for &id in &scene.caption_ids {
                let w = vocab.word(id);
                assert!(!factor_words.contains(&w), "factor word '{w}' leaked into caption");
            }
        }
    }
}
