//! Synthetic detection scenes: filled shapes on noisy backgrounds, plus
//! near-OOD (unseen shapes) and far-OOD (textures, no shapes) variants.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox, GroundTruth};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OodMode {
    #[default]
    None,
    /// Shapes outside the training classes on in-distribution backgrounds.
    Near,
    /// Texture patches and structured noise, no shapes.
    Far,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub image_size: usize,
    pub shape_classes: Vec<ShapeKind>,
    pub objects_per_image: (usize, usize),
    /// Object side length range in pixels.
    pub object_size: (f64, f64),
    pub noise_std: f64,
    pub ood_mode: OodMode,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            shape_classes: vec![ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle],
            objects_per_image: (1, 3),
            object_size: (10.0, 26.0),
            noise_std: 0.05,
            ood_mode: OodMode::None,
        }
    }
}

impl SceneSpec {
    pub fn with_ood(&self, ood_mode: OodMode) -> Self {
        Self {
            ood_mode,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_id: String,
    /// Grayscale intensities in `[0, 1]`, `image_size × image_size`.
    pub image: Array2<f64>,
    pub objects: Vec<GroundTruth>,
}

/// Seed for item `index`; independent of how many items are generated.
fn item_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

pub fn generate_dataset(spec: &SceneSpec, n: usize, seed: u64) -> Vec<Sample> {
    let tag = match spec.ood_mode {
        OodMode::None => "in",
        OodMode::Near => "near",
        OodMode::Far => "far",
    };
    (0..n)
        .map(|i| {
            let mut rng = item_rng(seed, i);
            let (image, objects) = match spec.ood_mode {
                OodMode::None => shape_scene(spec, &spec.shape_classes, &mut rng),
                OodMode::Near => {
                    let (img, _) =
                        shape_scene(spec, &[ShapeKind::Cross, ShapeKind::Ring], &mut rng);
                    (img, Vec::new())
                }
                OodMode::Far => (texture_scene(spec, &mut rng), Vec::new()),
            };
            Sample {
                image_id: format!("{tag}-{seed}-{i:05}"),
                image,
                objects,
            }
        })
        .collect()
}

fn background(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> (Array2<f64>, f64) {
    let level = rng.gen_range(0.0..0.3);
    (
        Array2::from_elem((spec.image_size, spec.image_size), level),
        level,
    )
}

fn add_noise(img: &mut Array2<f64>, std: f64, rng: &mut ChaCha8Rng) {
    if std > 0.0 {
        let normal = Normal::new(0.0, std).expect("valid std");
        img.mapv_inplace(|v| (v + normal.sample(rng)).clamp(0.0, 1.0));
    }
}

/// Is the pixel center `(x, y)`, in box-local unit coordinates, inside the shape?
fn inside(kind: ShapeKind, u: f64, v: f64) -> bool {
    // u, v in [0, 1] across the bounding box
    let (du, dv) = (u - 0.5, v - 0.5);
    match kind {
        ShapeKind::Square => true,
        ShapeKind::Circle => du * du + dv * dv <= 0.25,
        // apex at top center, base along the bottom edge
        ShapeKind::Triangle => du.abs() <= 0.5 * v,
        ShapeKind::Cross => du.abs() <= 0.17 || dv.abs() <= 0.17,
        ShapeKind::Ring => {
            let r2 = du * du + dv * dv;
            (0.09..=0.25).contains(&r2)
        }
    }
}

fn shape_scene(
    spec: &SceneSpec,
    kinds: &[ShapeKind],
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, Vec<GroundTruth>) {
    let size = spec.image_size as f64;
    let (mut img, bg) = background(spec, rng);
    let (lo, hi) = spec.objects_per_image;
    let count = rng.gen_range(lo..=hi.max(lo));
    let mut objects: Vec<GroundTruth> = Vec::new();
    let mut placed = 0;
    let mut attempts = 0;
    while placed < count && attempts < 100 {
        attempts += 1;
        let class_id = rng.gen_range(0..kinds.len());
        let w = rng
            .gen_range(spec.object_size.0..=spec.object_size.1)
            .round();
        let h = rng
            .gen_range(spec.object_size.0..=spec.object_size.1)
            .round();
        // centers range over the whole canvas so border cells see objects;
        // shapes are cut at the edge and the box covers the visible part
        let x0 = (rng.gen_range(0.0..size) - w / 2.0).round();
        let y0 = (rng.gen_range(0.0..size) - h / 2.0).round();
        let (vx0, vy0) = (x0.max(0.0), y0.max(0.0));
        let (vx1, vy1) = ((x0 + w).min(size), (y0 + h).min(size));
        if (vx1 - vx0) * (vy1 - vy0) < 0.5 * w * h {
            continue;
        }
        let bbox = BBox::from_pixel_corners(vx0, vy0, vx1, vy1, size);
        if objects.iter().any(|o| iou(&o.bbox, &bbox) > 0.1) {
            continue;
        }
        let fg = (bg + rng.gen_range(0.4..0.7)).min(1.0);
        let kind = kinds[class_id];
        for y in vy0 as usize..vy1 as usize {
            for x in vx0 as usize..vx1 as usize {
                let u = (x as f64 + 0.5 - x0) / w;
                let v = (y as f64 + 0.5 - y0) / h;
                if inside(kind, u, v) {
                    img[[y, x]] = fg;
                }
            }
        }
        objects.push(GroundTruth { bbox, class_id });
        placed += 1;
    }
    add_noise(&mut img, spec.noise_std, rng);
    (img, objects)
}

fn texture_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = spec.image_size;
    let contrast = rng.gen_range(0.3..0.7);
    let offset = rng.gen_range(0.0..(1.0 - contrast));
    let mut img = match rng.gen_range(0..3) {
        // oriented sinusoidal grating
        0 => {
            let period = rng.gen_range(4.0..16.0);
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let (c, s) = (theta.cos(), theta.sin());
            Array2::from_shape_fn((n, n), |(y, x)| {
                let t = (x as f64 * c + y as f64 * s) * std::f64::consts::TAU / period + phase;
                0.5 + 0.5 * t.sin()
            })
        }
        // checkerboard
        1 => {
            let cell = rng.gen_range(3..12);
            let (ox, oy) = (rng.gen_range(0..cell), rng.gen_range(0..cell));
            Array2::from_shape_fn((n, n), |(y, x)| {
                (((x + ox) / cell + (y + oy) / cell) % 2) as f64
            })
        }
        // box-blurred uniform noise
        _ => {
            let raw = Array2::from_shape_fn((n, n), |_| rng.gen_range(0.0..1.0));
            let r = rng.gen_range(1..4) as isize;
            let blurred = Array2::from_shape_fn((n, n), |(y, x)| {
                let mut s = 0.0;
                let mut c = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y as isize + dy, x as isize + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < n && (xx as usize) < n {
                            s += raw[[yy as usize, xx as usize]];
                            c += 1.0;
                        }
                    }
                }
                s / c
            });
            let (lo, hi) = blurred
                .iter()
                .fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
            blurred.mapv(|v| (v - lo) / (hi - lo).max(1e-12))
        }
    };
    img.mapv_inplace(|v| offset + contrast * v);
    add_noise(&mut img, spec.noise_std, rng);
    img
}
