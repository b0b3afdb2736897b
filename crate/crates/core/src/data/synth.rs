//! Deterministic synthetic shape datasets with exact masks.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{write_dataset, DatasetManifest, Split};
use super::AnnotatedImage;
use crate::error::{Error, Result};
use crate::raster::{BinaryMask, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    /// Lobed outline with a striped texture.
    Blob,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub label: String,
    pub kind: ShapeKind,
    pub color: [f32; 3],
    /// Radius range of the bounding circle, in pixels.
    pub radius: (f32, f32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub image_size: usize,
    pub shapes: Vec<ShapeSpec>,
    /// Emit `left <label>` / `right <label>` classes confined to image halves.
    #[serde(default)]
    pub spatial: bool,
}

impl VocabSpec {
    /// Four shape classes with distinct colours.
    pub fn shapes(image_size: usize) -> Self {
        let r = image_size as f32;
        let radius = (0.11 * r, 0.19 * r);
        let shape = |label: &str, kind, color| ShapeSpec {
            label: label.into(),
            kind,
            color,
            radius,
        };
        Self {
            image_size,
            shapes: vec![
                shape("disk", ShapeKind::Disk, [0.9, 0.2, 0.2]),
                shape("square", ShapeKind::Square, [0.2, 0.85, 0.3]),
                shape("triangle", ShapeKind::Triangle, [0.25, 0.35, 0.95]),
                shape("blob", ShapeKind::Blob, [0.95, 0.85, 0.2]),
            ],
            spatial: false,
        }
    }

    /// Left/right disks of one colour: only position tells them apart.
    pub fn spatial_disks(image_size: usize) -> Self {
        let r = image_size as f32;
        Self {
            image_size,
            shapes: vec![ShapeSpec {
                label: "disk".into(),
                kind: ShapeKind::Disk,
                color: [0.85, 0.85, 0.8],
                radius: (0.1 * r, 0.17 * r),
            }],
            spatial: true,
        }
    }

    /// Class labels in vocabulary order.
    pub fn labels(&self) -> Vec<String> {
        if self.spatial {
            self.shapes
                .iter()
                .flat_map(|s| [format!("left {}", s.label), format!("right {}", s.label)])
                .collect()
        } else {
            self.shapes.iter().map(|s| s.label.clone()).collect()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() {
            return Err(Error::Config("vocabulary spec has no shapes".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config(
                "synthetic images must be at least 8 px".into(),
            ));
        }
        for s in &self.shapes {
            if !(s.radius.0 > 1.0 && s.radius.0 <= s.radius.1) {
                return Err(Error::Config(format!("bad radius range for {:?}", s.label)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Side {
    Any,
    Left,
    Right,
}

struct Placed<'a> {
    shape: &'a ShapeSpec,
    label: String,
    cx: f32,
    cy: f32,
    r: f32,
    angle: f32,
    color: [f32; 3],
}

impl Placed<'_> {
    fn contains(&self, px: f32, py: f32) -> bool {
        let dx = px - self.cx;
        let dy = py - self.cy;
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let r = self.r;
        match self.shape.kind {
            ShapeKind::Disk => u * u + v * v <= r * r,
            ShapeKind::Square => {
                let h = r * std::f32::consts::FRAC_1_SQRT_2;
                u.abs() <= h && v.abs() <= h
            }
            ShapeKind::Triangle => {
                // equilateral triangle inscribed in the circle, apex at -v
                let verts: [(f32, f32); 3] = [0.0f32, 2.0943952, 4.1887903].map(|a: f32| {
                    let (s, c) = a.sin_cos();
                    (r * s, -r * c)
                });
                let edge = |a: (f32, f32), b: (f32, f32)| {
                    (b.0 - a.0) * (v - a.1) - (b.1 - a.1) * (u - a.0)
                };
                let e0 = edge(verts[0], verts[1]);
                let e1 = edge(verts[1], verts[2]);
                let e2 = edge(verts[2], verts[0]);
                (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
            }
            ShapeKind::Blob => {
                let theta = v.atan2(u);
                let rr = r * (0.78 + 0.22 * (3.0 * theta).sin());
                u * u + v * v <= rr * rr
            }
        }
    }

    fn shade(&self, px: f32, py: f32) -> [f32; 3] {
        match self.shape.kind {
            ShapeKind::Blob => {
                let stripe = 0.8 + 0.2 * ((px + py) * 0.9).sin();
                self.color.map(|c| c * stripe)
            }
            _ => self.color,
        }
    }
}

fn place<'a, R: Rng>(
    rng: &mut R,
    shape: &'a ShapeSpec,
    label: String,
    side: Side,
    size: f32,
    placed: &[Placed<'a>],
) -> Option<Placed<'a>> {
    for _ in 0..200 {
        let r = rng.random_range(shape.radius.0..=shape.radius.1);
        let (lo, hi) = match side {
            Side::Any => (r + 1.0, size - r - 1.0),
            Side::Left => (r + 1.0, size / 2.0 - r - 1.0),
            Side::Right => (size / 2.0 + r + 1.0, size - r - 1.0),
        };
        if lo >= hi || r + 1.0 >= size - r - 1.0 {
            continue;
        }
        let cx = rng.random_range(lo..hi);
        let cy = rng.random_range(r + 1.0..size - r - 1.0);
        let angle = rng.random_range(0.0..std::f32::consts::TAU);
        let jitter: [f32; 3] = [(); 3].map(|_| rng.random_range(-0.05..0.05));
        let clear = placed.iter().all(|p| {
            let d = ((p.cx - cx).powi(2) + (p.cy - cy).powi(2)).sqrt();
            d > p.r + r + 2.0
        });
        if clear {
            let mut color = shape.color;
            for (c, j) in color.iter_mut().zip(jitter) {
                *c = (*c + j).clamp(0.0, 1.0);
            }
            return Some(Placed {
                shape,
                label,
                cx,
                cy,
                r,
                angle,
                color,
            });
        }
    }
    None
}

/// Draws one image. Each class is present with probability 1/2, redrawn
/// until at least one is present; instances never overlap.
pub fn synthesize_image<R: Rng>(
    rng: &mut R,
    spec: &VocabSpec,
    id: String,
) -> Result<AnnotatedImage> {
    spec.validate()?;
    let size = spec.image_size;
    let classes: Vec<(&ShapeSpec, String, Side)> = if spec.spatial {
        spec.shapes
            .iter()
            .flat_map(|s| {
                [
                    (s, format!("left {}", s.label), Side::Left),
                    (s, format!("right {}", s.label), Side::Right),
                ]
            })
            .collect()
    } else {
        spec.shapes
            .iter()
            .map(|s| (s, s.label.clone(), Side::Any))
            .collect()
    };
    let present: Vec<bool> = loop {
        let draw: Vec<bool> = classes.iter().map(|_| rng.random_bool(0.5)).collect();
        if draw.iter().any(|&p| p) {
            break draw;
        }
    };

    let mut placed: Vec<Placed> = Vec::new();
    for ((shape, label, side), on) in classes.iter().zip(&present) {
        if !on {
            continue;
        }
        if let Some(p) = place(rng, shape, label.clone(), *side, size as f32, &placed) {
            placed.push(p);
        }
    }

    let base: f32 = rng.random_range(0.12..0.3);
    let mut image = Image::filled(size, size, 0.0);
    for y in 0..size {
        for x in 0..size {
            let n: f32 = rng.random_range(-0.04..0.04);
            image.set_pixel(y, x, [base + n, base + n * 0.8, base + n * 1.2]);
        }
    }
    let mut masks = BTreeMap::new();
    for p in &placed {
        let mut mask = BinaryMask::zeros(size, size);
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                if p.contains(px, py) {
                    mask.set(y, x, true);
                    let n: f32 = rng.random_range(-0.03..0.03);
                    image.set_pixel(y, x, p.shade(px, py).map(|c| (c + n).clamp(0.0, 1.0)));
                }
            }
        }
        if !mask.is_empty() {
            masks.insert(p.label.clone(), mask);
        }
    }
    for v in image.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(AnnotatedImage { id, image, masks })
}

/// Generates `n_images` images in memory; a pure function of `seed`.
pub fn generate(seed: u64, n_images: usize, spec: &VocabSpec) -> Result<Vec<AnnotatedImage>> {
    spec.validate()?;
    (0..n_images)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            synthesize_image(&mut rng, spec, format!("{i:05}"))
        })
        .collect()
}

/// Writes a synthetic split under `root/<split>/` and returns its manifest.
pub fn make_synthetic_dataset(
    root: &Path,
    split: Split,
    seed: u64,
    n_images: usize,
    spec: &VocabSpec,
) -> Result<DatasetManifest> {
    if n_images == 0 {
        return Err(Error::Config("n_images must be positive".into()));
    }
    let items = generate(seed, n_images, spec)?;
    write_dataset(root, split, &spec.labels(), &items)
}
