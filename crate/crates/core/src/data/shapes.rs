//! Procedurally rendered geometric patterns: a small real-data stand-in with
//! deliberately related classes (circle/ring/ellipse, stripes/checkerboard).

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{LabeledDataset, Labels, Provenance, Split};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

/// Per-channel mean of raw `[0, 1]` pixels, removed before training.
pub const SHAPES_MEAN: f32 = 0.5;
/// Per-channel standard deviation used for standardization.
pub const SHAPES_STD: f32 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeClass {
    Circle,
    Ring,
    Ellipse,
    Square,
    Diamond,
    Triangle,
    Cross,
    HStripes,
    VStripes,
    Checkerboard,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 10] = [
        ShapeClass::Circle,
        ShapeClass::Ring,
        ShapeClass::Ellipse,
        ShapeClass::Square,
        ShapeClass::Diamond,
        ShapeClass::Triangle,
        ShapeClass::Cross,
        ShapeClass::HStripes,
        ShapeClass::VStripes,
        ShapeClass::Checkerboard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Ring => "ring",
            ShapeClass::Ellipse => "ellipse",
            ShapeClass::Square => "square",
            ShapeClass::Diamond => "diamond",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Cross => "cross",
            ShapeClass::HStripes => "h-stripes",
            ShapeClass::VStripes => "v-stripes",
            ShapeClass::Checkerboard => "checkerboard",
        }
    }

    /// Whether the pattern covers `(u, v)` in shape-local coordinates.
    /// Textures receive `freq`/`phase` and use unscaled image coordinates.
    fn covers(self, u: f32, v: f32, freq: f32, phase: f32) -> bool {
        use std::f32::consts::TAU;
        match self {
            ShapeClass::Circle => u * u + v * v <= 1.0,
            ShapeClass::Ring => {
                let r2 = u * u + v * v;
                (0.36..=1.0).contains(&r2)
            }
            ShapeClass::Ellipse => u * u + (v / 0.45) * (v / 0.45) <= 1.0,
            ShapeClass::Square => u.abs().max(v.abs()) <= 0.8,
            ShapeClass::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeClass::Triangle => {
                // Upward triangle with apex at v = -1 and base at v = 0.7.
                v <= 0.7 && v >= -1.0 && u.abs() <= (v + 1.0) * 0.58
            }
            ShapeClass::Cross => {
                (u.abs() <= 0.28 && v.abs() <= 1.0) || (v.abs() <= 0.28 && u.abs() <= 1.0)
            }
            ShapeClass::HStripes => (TAU * freq * v + phase).sin() > 0.0,
            ShapeClass::VStripes => (TAU * freq * u + phase).sin() > 0.0,
            ShapeClass::Checkerboard => {
                ((TAU * freq * u + phase).sin() * (TAU * freq * v + phase).sin()) > 0.0
            }
        }
    }

    fn is_texture(self) -> bool {
        matches!(self, ShapeClass::HStripes | ShapeClass::VStripes | ShapeClass::Checkerboard)
    }

    /// Maximum rotation in radians; larger angles would alias classes
    /// (a square turned by 45° is a diamond).
    fn max_rotation(self) -> f32 {
        match self {
            ShapeClass::Circle | ShapeClass::Ring | ShapeClass::Ellipse => std::f32::consts::PI,
            ShapeClass::HStripes | ShapeClass::VStripes | ShapeClass::Checkerboard => 0.17,
            _ => 0.26,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapesSpec {
    pub image_size: usize,
    pub noise_std: f32,
}

impl Default for ShapesSpec {
    fn default() -> Self {
        ShapesSpec {
            image_size: 32,
            noise_std: 0.05,
        }
    }
}

impl ShapesSpec {
    pub fn num_classes(&self) -> usize {
        ShapeClass::ALL.len()
    }
}

/// Renders `n_per_class` images of every class. Samples are interleaved by
/// class; train and validation draw from disjoint seed streams.
pub fn generate_shapes(spec: &ShapesSpec, n_per_class: usize, seed: u64, split: Split) -> Result<LabeledDataset> {
    if n_per_class == 0 {
        return Err(Error::config("n_per_class must be at least 1"));
    }
    if spec.image_size < 8 {
        return Err(Error::config("shape images must be at least 8x8"));
    }
    let key = match split {
        Split::Train => "shapes/train",
        Split::Val => "shapes/val",
    };
    let s = spec.image_size;
    let classes = spec.num_classes();
    let n = n_per_class * classes;
    let mut data = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = ShapeClass::ALL[i % classes];
        let mut rng = rng_for(seed, key, i as u64);
        render(class, spec, &mut rng, &mut data);
        labels.push((i % classes) as u32);
    }
    let images = Tensor::from_parts(vec![n, 3, s, s], data);
    LabeledDataset::new(images, Labels::Hard(labels), classes, split, Provenance::Real, seed)
}

fn render(class: ShapeClass, spec: &ShapesSpec, rng: &mut crate::rng::Rng, out: &mut Vec<f32>) {
    let s = spec.image_size as f32;
    let half = s / 2.0;
    let scale = rng.random_range(0.5f32..0.8) * half;
    let jitter = 0.2 * half;
    let cx = half + rng.random_range(-jitter..jitter);
    let cy = half + rng.random_range(-jitter..jitter);
    let max_rot = class.max_rotation();
    let angle = rng.random_range(-max_rot..max_rot);
    let (sin, cos) = angle.sin_cos();
    // Texture frequency in cycles per image side.
    let freq = rng.random_range(3.0f32..5.0) / s;
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let fg = rng.random_range(0.65f32..1.0);
    let bg = rng.random_range(0.0f32..0.3);
    let tint: [f32; 3] = [
        rng.random_range(0.8f32..1.0),
        rng.random_range(0.8f32..1.0),
        rng.random_range(0.8f32..1.0),
    ];
    let mut plane = vec![0.0f32; spec.image_size * spec.image_size];
    for y in 0..spec.image_size {
        for x in 0..spec.image_size {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            let rx = cos * dx + sin * dy;
            let ry = -sin * dx + cos * dy;
            let on = if class.is_texture() {
                class.covers(rx, ry, freq, phase)
            } else {
                class.covers(rx / scale, ry / scale, 0.0, 0.0)
            };
            plane[y * spec.image_size + x] = if on { fg } else { bg };
        }
    }
    for t in tint {
        for &p in &plane {
            let noise: f32 = StandardNormal.sample(rng);
            let raw = (p * t + spec.noise_std * noise).clamp(0.0, 1.0);
            out.push((raw - SHAPES_MEAN) / SHAPES_STD);
        }
    }
}
