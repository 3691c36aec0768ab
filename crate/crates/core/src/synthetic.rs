//! Procedurally generated corpora with known text/image correspondence.
//!
//! Every sample combines a pattern (the cluster), a hue and a brightness
//! level. Each attribute is named in the comment and title and is visible in
//! the image, so the correct match for any query is known in advance.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{write_manifest, CorpusSample, ImageBuffer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLUSTERS: [&str; 4] = ["waves", "pillars", "lattice", "speckles"];
pub const HUES: [&str; 4] = ["crimson", "emerald", "azure", "amber"];
pub const BRIGHTNESS: [&str; 4] = ["shadowy", "muted", "luminous", "blazing"];

const HUE_RGB: [[f64; 3]; 4] = [
    [0.85, 0.10, 0.12],
    [0.10, 0.75, 0.25],
    [0.12, 0.30, 0.90],
    [0.95, 0.65, 0.10],
];
const BRIGHTNESS_SCALE: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// Attribute triple of one synthetic sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attributes {
    pub cluster: usize,
    pub hue: usize,
    pub brightness: usize,
}

impl Attributes {
    /// The `i`-th combination; 64 consecutive indices enumerate all of them.
    pub fn nth(i: usize) -> Self {
        Self {
            cluster: i % 4,
            hue: (i / 4) % 4,
            brightness: (i / 16) % 4,
        }
    }

    pub fn title(&self) -> String {
        format!(
            "{} {} {}",
            capitalize(BRIGHTNESS[self.brightness]),
            capitalize(HUES[self.hue]),
            capitalize(CLUSTERS[self.cluster])
        )
    }

    pub fn comment(&self) -> String {
        let (c, h, b) = (
            CLUSTERS[self.cluster],
            HUES[self.hue],
            BRIGHTNESS[self.brightness],
        );
        format!("A painting of {c} in {h} tones under {b} light; {b} {h} {c} throughout.")
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

fn pattern(cluster: usize, y: usize, x: usize) -> f64 {
    match cluster {
        0 => ((y / 4) % 2) as f64,
        1 => 1.0,
        2 => ((x + y) % 2) as f64,
        _ => (y % 4 == 1 && x % 4 == 1) as u8 as f64,
    }
}

/// Image for the given attributes with a little seeded noise.
pub fn render(attrs: Attributes, size: usize, rng: &mut impl Rng) -> ImageBuffer<f64> {
    let rgb = HUE_RGB[attrs.hue];
    let scale = BRIGHTNESS_SCALE[attrs.brightness];
    let mut data = vec![0.0; 3 * size * size];
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let p = pattern(attrs.cluster, y, x);
                let v = rgb[c] * scale * (0.35 + 0.65 * p) + rng.random_range(-0.03..0.03);
                data[(c * size + y) * size + x] = v;
            }
        }
    }
    ImageBuffer::new(Tensor::new(vec![3, size, size], data).expect("square image"))
        .expect("three channels")
}

/// A smooth two-tone gradient, useful as a content image.
pub fn gradient_image(h: usize, w: usize, from: [f64; 3], to: [f64; 3]) -> ImageBuffer<f64> {
    let mut data = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let t = (x + y) as f64 / (h + w - 2).max(1) as f64;
                data[(c * h + y) * w + x] = from[c] * (1.0 - t) + to[c] * t;
            }
        }
    }
    ImageBuffer::new(Tensor::new(vec![3, h, w], data).expect("image shape")).expect("three channels")
}

/// Writes `count` samples (PPM images plus `manifest.jsonl`) into `dir` and
/// returns them. Sample ids are `s000`, `s001`, ...
pub fn write_corpus(dir: &Path, count: usize, image_size: usize, seed: u64) -> Result<Vec<CorpusSample>> {
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let attrs = Attributes::nth(i);
        let id = format!("s{i:03}");
        let rel = format!("images/{id}.ppm");
        render(attrs, image_size, &mut rng).save_ppm(dir.join(&rel))?;
        samples.push(CorpusSample {
            id,
            image_path: rel,
            title: attrs.title(),
            comment: attrs.comment(),
            attributes: BTreeMap::from([
                ("cluster".to_string(), CLUSTERS[attrs.cluster].to_string()),
                ("hue".to_string(), HUES[attrs.hue].to_string()),
                ("brightness".to_string(), BRIGHTNESS[attrs.brightness].to_string()),
            ]),
        });
    }
    write_manifest(dir.join("manifest.jsonl"), &samples)?;
    Ok(samples)
}
