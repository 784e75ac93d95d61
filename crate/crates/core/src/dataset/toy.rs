//! Procedurally generated image-classification task for desk-scale runs.
//!
//! Each class is a (shape, palette) family drawn over a low-frequency
//! natural-statistics background. Twelve families exist; a task uses the
//! first `classes` of a fixed permutation and the rest are held out to seed
//! the extraction transfer pool.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{quantize_8bit, LabeledImageDataset, Split};
use crate::error::{Error, Result};
use crate::nn::Shape3;

const SHAPES: [&str; 6] = ["disk", "square", "ring", "cross", "triangle", "bars"];
const PALETTES: [&str; 2] = ["warm", "cool"];
/// Family order; task classes take a prefix.
const FAMILY_ORDER: [usize; 12] = [0, 7, 2, 9, 4, 11, 6, 1, 8, 3, 10, 5];
pub const FAMILY_COUNT: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTaskConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    /// Standard deviation of i.i.d. pixel noise.
    pub pixel_noise: f32,
    /// Probability of drawing a distractor shape in a random color.
    pub distractor_prob: f64,
    pub seed: u64,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        ToyTaskConfig {
            classes: 8,
            train_per_class: 400,
            test_per_class: 100,
            size: 32,
            pixel_noise: 0.06,
            distractor_prob: 0.5,
            seed: 0,
        }
    }
}

impl ToyTaskConfig {
    pub fn shape(&self) -> Shape3 {
        Shape3::new(3, self.size, self.size)
    }

    pub fn dataset_id(&self) -> String {
        format!("toy{}-s{}", self.classes, self.seed)
    }

    fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > FAMILY_COUNT {
            return Err(Error::invalid(format!(
                "toy task supports 1..={FAMILY_COUNT} classes"
            )));
        }
        if self.size < 8 {
            return Err(Error::invalid("toy images must be at least 8 pixels wide"));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        FAMILY_ORDER[..self.classes]
            .iter()
            .map(|&f| family_name(f))
            .collect()
    }

    /// Train and test splits of the task.
    pub fn generate(&self) -> Result<(LabeledImageDataset, LabeledImageDataset)> {
        self.validate()?;
        let train = self.split(Split::Train, self.train_per_class, 1)?;
        let test = self.split(Split::Test, self.test_per_class, 2)?;
        Ok((train, test))
    }

    fn split(&self, split: Split, per_class: usize, stream: u64) -> Result<LabeledImageDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let mut images = Vec::with_capacity(per_class * self.classes);
        let mut labels = Vec::with_capacity(per_class * self.classes);
        for i in 0..per_class * self.classes {
            let class = i % self.classes;
            images.push(render_family(FAMILY_ORDER[class], self, &mut rng));
            labels.push(class);
        }
        LabeledImageDataset::new(
            self.dataset_id(),
            self.shape(),
            self.class_names(),
            split,
            images,
            labels,
        )
    }

    /// Unlabeled out-of-task images in equal thirds: held-out families,
    /// clutter scenes of shapes in arbitrary colors, and bare background
    /// textures. Clutter plays the role of natural photos, which contain
    /// objects resembling the task's without being drawn from it.
    pub fn transfer_pool(&self, count: usize, seed: u64) -> Result<Vec<Vec<f32>>> {
        self.validate()?;
        let held_out = &FAMILY_ORDER[self.classes..];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        Ok((0..count)
            .map(|i| match i % 3 {
                0 if !held_out.is_empty() => {
                    render_family(held_out[(i / 3) % held_out.len()], self, &mut rng)
                }
                0 | 1 => render_clutter(self, &mut rng),
                _ => render_background_only(self, &mut rng),
            })
            .collect())
    }
}

fn family_name(f: usize) -> String {
    format!("{}_{}", PALETTES[f % 2], SHAPES[f / 2])
}

fn palette_color(palette: usize, rng: &mut ChaCha8Rng) -> [f32; 3] {
    let t: f32 = rng.random();
    let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-0.08f32..0.08);
    let base = if palette == 0 {
        // red through yellow
        [0.9, 0.15 + 0.7 * t, 0.1]
    } else {
        // green through blue
        [0.1, 0.75 - 0.5 * t, 0.35 + 0.55 * t]
    };
    [
        (base[0] + jitter(rng)).clamp(0.0, 1.0),
        (base[1] + jitter(rng)).clamp(0.0, 1.0),
        (base[2] + jitter(rng)).clamp(0.0, 1.0),
    ]
}

/// Smooth random field built from a few low-frequency waves with a 1/f falloff.
fn background(cfg: &ToyTaskConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = cfg.size;
    let mut img = vec![0.0f32; 3 * s * s];
    let gray: f32 = rng.random_range(0.25..0.75);
    let tint: [f32; 3] = [
        rng.random_range(-0.12..0.12),
        rng.random_range(-0.12..0.12),
        rng.random_range(-0.12..0.12),
    ];
    let waves: Vec<(f32, f32, f32, f32, [f32; 3])> = (0..6)
        .map(|_| {
            let f = rng.random_range(0.5f32..4.0);
            let theta = rng.random_range(0.0..std::f32::consts::PI);
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            let amp = 0.12 / f;
            let mix = [
                rng.random_range(0.5..1.0),
                rng.random_range(0.5..1.0),
                rng.random_range(0.5..1.0),
            ];
            (f, theta, phase, amp, mix)
        })
        .collect();
    for y in 0..s {
        for x in 0..s {
            let (u, v) = (x as f32 / s as f32, y as f32 / s as f32);
            for c in 0..3 {
                let mut val = gray + tint[c];
                for &(f, th, ph, amp, mix) in &waves {
                    val += amp
                        * mix[c]
                        * (std::f32::consts::TAU * f * (u * th.cos() + v * th.sin()) + ph).sin();
                }
                img[(c * s + y) * s + x] = val;
            }
        }
    }
    img
}

fn inside(shape: usize, dx: f32, dy: f32, r: f32, rot: f32) -> bool {
    let (cs, sn) = (rot.cos(), rot.sin());
    let (u, v) = (cs * dx + sn * dy, -sn * dx + cs * dy);
    match shape {
        0 => u * u + v * v <= r * r,
        1 => u.abs() <= 0.8 * r && v.abs() <= 0.8 * r,
        2 => {
            let d = (u * u + v * v).sqrt();
            d <= r && d >= 0.55 * r
        }
        3 => (u.abs() <= 0.3 * r && v.abs() <= r) || (v.abs() <= 0.3 * r && u.abs() <= r),
        4 => v <= 0.6 * r && v >= -r + 1.6 * u.abs(),
        _ => u.abs() <= r && v.abs() <= r && ((v + r) / (0.5 * r)).floor() as i32 % 2 == 0,
    }
}

fn draw_shape(
    img: &mut [f32],
    cfg: &ToyTaskConfig,
    shape: usize,
    color: [f32; 3],
    scale: f32,
    rng: &mut ChaCha8Rng,
) {
    let s = cfg.size as f32;
    let r = scale * s * rng.random_range(0.2f32..0.34);
    let cx = s / 2.0 + rng.random_range(-0.2..0.2) * s;
    let cy = s / 2.0 + rng.random_range(-0.2..0.2) * s;
    let rot = rng.random_range(0.0..std::f32::consts::TAU);
    let tex_f = rng.random_range(0.3f32..0.9);
    let tex_th = rng.random_range(0.0..std::f32::consts::PI);
    let n = cfg.size;
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            if inside(shape, dx, dy, r, rot) {
                let tex = 1.0 + 0.15 * (tex_f * (dx * tex_th.cos() + dy * tex_th.sin())).sin();
                for c in 0..3 {
                    img[(c * n + y) * n + x] = color[c] * tex;
                }
            }
        }
    }
}

fn finish(mut img: Vec<f32>, cfg: &ToyTaskConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let noise = Normal::new(0.0f32, cfg.pixel_noise.max(1e-9)).expect("valid noise");
    for v in img.iter_mut() {
        *v = quantize_8bit(*v + noise.sample(rng));
    }
    img
}

fn render_family(family: usize, cfg: &ToyTaskConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut img = background(cfg, rng);
    if rng.random_bool(cfg.distractor_prob) {
        let shape = rng.random_range(0..SHAPES.len());
        let color = [rng.random(), rng.random(), rng.random()];
        draw_shape(&mut img, cfg, shape, color, 0.6, rng);
    }
    let color = palette_color(family % 2, rng);
    draw_shape(&mut img, cfg, family / 2, color, 1.0, rng);
    finish(img, cfg, rng)
}

fn render_clutter(cfg: &ToyTaskConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut img = background(cfg, rng);
    for _ in 0..rng.random_range(1..=3) {
        let shape = rng.random_range(0..SHAPES.len());
        let color = [rng.random(), rng.random(), rng.random()];
        let scale = rng.random_range(0.6..1.0);
        draw_shape(&mut img, cfg, shape, color, scale, rng);
    }
    finish(img, cfg, rng)
}

fn render_background_only(cfg: &ToyTaskConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let img = background(cfg, rng);
    finish(img, cfg, rng)
}
