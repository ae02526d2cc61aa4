//! Synthetic image pairs with known changes and template descriptions.
//!
//! Each scene shares a noisy textured background between its two images and
//! adds or removes solid boxes, one per quadrant. A box's color is fixed by its
//! quadrant, so the described location can be read off the features under
//! the box.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterSet;
use crate::error::{invalid, Result};
use crate::imaging::RgbImage;

pub const QUADRANTS: [&str; 4] = ["top left", "top right", "bottom left", "bottom right"];
pub const COLORS: [(&str, [u8; 3]); 4] = [
    ("red", [225, 30, 30]),
    ("green", [30, 200, 50]),
    ("blue", [40, 60, 230]),
    ("yellow", [235, 220, 40]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Square image side; must be divisible by 2 with room for boxes.
    pub size: usize,
    pub objects: usize,
    /// How many of the largest boxes get a sentence.
    pub described: usize,
    pub min_side: usize,
    pub max_side: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { size: 64, objects: 2, described: 2, min_side: 8, max_side: 14 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthObject {
    pub quadrant: usize,
    pub appeared: bool,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl SynthObject {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn center(&self) -> (usize, usize) {
        (self.top + self.height / 2, self.left + self.width / 2)
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.top..self.top + self.height).contains(&r) && (self.left..self.left + self.width).contains(&c)
    }

    pub fn sentence(&self) -> String {
        let verb = if self.appeared { "appeared" } else { "disappeared" };
        format!("the {} box {verb} in the {} .", COLORS[self.quadrant].0, QUADRANTS[self.quadrant])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub id: String,
    pub img1: RgbImage,
    pub img2: RgbImage,
    pub objects: Vec<SynthObject>,
    /// Object index described by each sentence.
    pub described: Vec<usize>,
    pub sentences: Vec<String>,
}

impl SynthPair {
    /// The cluster covering each described object's center, if any.
    pub fn gold_clusters(&self, clusters: &ClusterSet) -> Vec<Option<usize>> {
        let labels = clusters.labels();
        let w = self.img1.width();
        self.described
            .iter()
            .map(|&o| {
                let (r, c) = self.objects[o].center();
                labels[r * w + c]
            })
            .collect()
    }
}

fn background(size: usize, rng: &mut impl Rng) -> RgbImage {
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    RgbImage::from_fn(size, size, |r, c| {
        let wave = 18.0 * ((r as f64 * 0.31 + phase).sin() + (c as f64 * 0.23 - phase).cos());
        let base = 120.0 + wave;
        let mut px = |off: f64| (base + off + rng.random_range(-6.0..6.0)).clamp(0.0, 255.0) as u8;
        [px(0.0), px(4.0), px(-4.0)]
    })
    .expect("nonzero size")
}

/// Generates one scene. Quadrants are drawn without replacement.
pub fn generate_pair(id: impl Into<String>, config: &SynthConfig, rng: &mut impl Rng) -> Result<SynthPair> {
    let half = config.size / 2;
    if config.objects == 0 || config.objects > 4 || config.described > config.objects {
        return invalid("need 1..=4 objects and no more described than present");
    }
    if config.min_side == 0 || config.min_side > config.max_side || config.max_side + 8 > half {
        return invalid("box sides must fit inside a quadrant with a margin of 4");
    }
    let mut quads = [0usize, 1, 2, 3];
    quads.shuffle(rng);
    let img = background(config.size, rng);
    let (mut img1, mut img2) = (img.clone(), img);
    let mut objects = Vec::new();
    for &q in &quads[..config.objects] {
        let height = rng.random_range(config.min_side..=config.max_side);
        let width = rng.random_range(config.min_side..=config.max_side);
        let top = (q / 2) * half + rng.random_range(4..=half - 4 - height);
        let left = (q % 2) * half + rng.random_range(4..=half - 4 - width);
        let obj = SynthObject { quadrant: q, appeared: rng.random_bool(0.5), top, left, height, width };
        let target = if obj.appeared { &mut img2 } else { &mut img1 };
        for r in top..top + height {
            for c in left..left + width {
                target.set_pixel(r, c, COLORS[q].1);
            }
        }
        objects.push(obj);
    }
    let mut by_size: Vec<usize> = (0..objects.len()).collect();
    by_size.sort_by_key(|&i| std::cmp::Reverse(objects[i].area()));
    let mut described: Vec<usize> = by_size[..config.described].to_vec();
    described.sort_unstable();
    let sentences = described.iter().map(|&i| objects[i].sentence()).collect();
    Ok(SynthPair { id: id.into(), img1, img2, objects, described, sentences })
}

/// `count` scenes from one seed, ids `synth<video>_<n>` with `per_video`
/// scenes per video.
pub fn generate_corpus(count: usize, per_video: usize, config: &SynthConfig, seed: u64) -> Result<Vec<SynthPair>> {
    if per_video == 0 {
        return invalid("per_video must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| generate_pair(format!("synth{:03}_{:02}", i / per_video, i % per_video), config, &mut rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{cluster_pair, VisionConfig};

    #[test]
    fn boxes_become_separate_clusters() {
        let config = SynthConfig { objects: 3, described: 2, ..SynthConfig::default() };
        let corpus = generate_corpus(12, 4, &config, 7).unwrap();
        for p in &corpus {
            let (pair, clusters) = cluster_pair(p.img1.clone(), p.img2.clone(), &VisionConfig::default()).unwrap();
            assert_eq!(pair.shift, crate::imaging::Shift::default(), "{}", p.id);
            assert_eq!(clusters.k(), 3, "{}", p.id);
            let gold = p.gold_clusters(&clusters);
            assert!(gold.iter().all(Option::is_some));
            assert_ne!(gold[0], gold[1]);
            for cl in &clusters.clusters {
                let owner = p.objects.iter().find(|o| o.contains(cl.bbox.row_min, cl.bbox.col_min)).unwrap();
                assert_eq!(cl.active_count, owner.area());
            }
        }
    }

    #[test]
    fn sentences_follow_template() {
        let p = generate_pair("x", &SynthConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(p.sentences.len(), 2);
        for (s, &o) in p.sentences.iter().zip(&p.described) {
            assert!(s.contains(QUADRANTS[p.objects[o].quadrant]));
            assert!(s.contains(COLORS[p.objects[o].quadrant].0));
        }
    }

    #[test]
    fn described_are_the_largest() {
        let config = SynthConfig { objects: 3, described: 2, ..SynthConfig::default() };
        for p in generate_corpus(10, 5, &config, 3).unwrap() {
            let left_out = (0..3).find(|i| !p.described.contains(i)).unwrap();
            assert!(p.described.iter().all(|&d| p.objects[d].area() >= p.objects[left_out].area()));
        }
    }

    #[test]
    fn seeded_generation_is_repeatable() {
        let a = generate_corpus(3, 2, &SynthConfig::default(), 11).unwrap();
        let b = generate_corpus(3, 2, &SynthConfig::default(), 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[2].id, "synth001_00");
    }

    #[test]
    fn bad_configs_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(generate_pair("x", &SynthConfig { objects: 5, ..Default::default() }, &mut rng).is_err());
        assert!(generate_pair("x", &SynthConfig { max_side: 30, ..Default::default() }, &mut rng).is_err());
    }
}
