//! Synthetic scenes with known object boxes: saturated rectangles and
//! ellipses on low-contrast striped backgrounds.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::imageio::{save_image, DatasetManifest, ImageBuffer, ManifestEntry};
use crate::rng::{self, tag};

/// Shape colors. Backgrounds are kept desaturated so they never fall into
/// the same color bins.
pub const PALETTE: [[u8; 3]; 6] = [
    [220, 40, 40],
    [40, 190, 60],
    [40, 70, 220],
    [230, 210, 40],
    [200, 50, 200],
    [40, 200, 210],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtShape {
    /// Index into `PALETTE`.
    pub color: usize,
    pub kind: ShapeKind,
    pub bbox: BoundingBox,
}

/// Ground truth for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtRecord {
    pub image_id: u64,
    pub shapes: Vec<GtShape>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_side: usize,
    pub max_side: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            size: 256,
            min_shapes: 2,
            max_shapes: 4,
            min_side: 100,
            max_side: 124,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let cell = self.size / 2;
        let ok = self.min_shapes >= 1
            && self.min_shapes <= self.max_shapes
            && self.max_shapes <= 4
            && self.min_side >= 1
            && self.min_side <= self.max_side
            && self.max_side + 2 <= cell;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("scene parameters {self:?}")))
        }
    }
}

fn noise<R: Rng + ?Sized>(rng: &mut R, amp: i32) -> i32 {
    rng.random_range(-amp..=amp)
}

fn shade(base: [u8; 3], delta: i32) -> [u8; 3] {
    base.map(|c| (i32::from(c) + delta).clamp(0, 255) as u8)
}

/// Renders scene `image_id`. Shapes occupy distinct quadrants, so they
/// never overlap.
pub fn generate_scene(seed: u64, image_id: u64, p: &SceneParams) -> Result<(ImageBuffer, Vec<GtShape>)> {
    p.validate()?;
    let mut r = rng::stream(seed, &[tag::SYNTHETIC, image_id]);
    let gray = r.random_range(70..=180);
    let base = [0; 3].map(|_| (gray + noise(&mut r, 15)) as u8);
    let period = r.random_range(6..=14);
    let vertical = r.random::<bool>();
    let count = r.random_range(p.min_shapes..=p.max_shapes);
    let cells = sample(&mut r, 4, count).into_vec();
    let colors = sample(&mut r, PALETTE.len(), count).into_vec();
    let cell = p.size / 2;
    let mut shapes = Vec::with_capacity(count);
    for (&c, &color) in cells.iter().zip(&colors) {
        let w = r.random_range(p.min_side..=p.max_side);
        let h = r.random_range(p.min_side..=p.max_side);
        let x = (c % 2) * cell + r.random_range(1..=cell - w - 1);
        let y = (c / 2) * cell + r.random_range(1..=cell - h - 1);
        let kind = if r.random::<bool>() {
            ShapeKind::Rectangle
        } else {
            ShapeKind::Ellipse
        };
        shapes.push(GtShape {
            color,
            kind,
            bbox: BoundingBox::new(x as f64, y as f64, w as f64, h as f64)?,
        });
    }
    let inside = |s: &GtShape, x: usize, y: usize| -> bool {
        let b = &s.bbox;
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        if px < b.x_min || px >= b.x_max() || py < b.y_min || py >= b.y_max() {
            return false;
        }
        match s.kind {
            ShapeKind::Rectangle => true,
            ShapeKind::Ellipse => {
                let (cx, cy) = b.center();
                let dx = (px - cx) / (b.width / 2.0);
                let dy = (py - cy) / (b.height / 2.0);
                dx * dx + dy * dy <= 1.0
            }
        }
    };
    let img = ImageBuffer::from_fn(p.size, p.size, |x, y| {
        let n = noise(&mut r, 4);
        if let Some(s) = shapes.iter().find(|s| inside(s, x, y)) {
            return shade(PALETTE[s.color], n);
        }
        let t = if vertical { x } else { y };
        let stripe = if (t / period) % 2 == 0 { 8 } else { -8 };
        shade(base, stripe + n)
    })?;
    // Ellipse boxes are the tight bounds of the drawn pixels.
    for s in &mut shapes {
        if s.kind == ShapeKind::Ellipse {
            s.bbox = tight_bounds(p.size, |x, y| inside(s, x, y)).unwrap_or(s.bbox);
        }
    }
    Ok((img, shapes))
}

fn tight_bounds(size: usize, inside: impl Fn(usize, usize) -> bool) -> Option<BoundingBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..size {
        for x in 0..size {
            if inside(x, y) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    BoundingBox::from_corners(x0 as f64, y0 as f64, x1 as f64, y1 as f64).ok()
}

/// Paths written by `write_dataset`.
#[derive(Debug, Clone)]
pub struct DatasetFiles {
    pub manifest: PathBuf,
    pub ground_truth: PathBuf,
}

/// Renders `count` scenes into `dir` as PPM files with a manifest
/// (`manifest.jsonl`) and ground truth (`ground_truth.jsonl`).
pub fn write_dataset(dir: &Path, count: usize, seed: u64, p: &SceneParams) -> Result<DatasetFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let scenes = (0..count as u64)
        .into_par_iter()
        .map(|id| {
            let (img, shapes) = generate_scene(seed, id, p)?;
            let name = format!("scene_{id:04}.ppm");
            save_image(&img, dir.join(&name))?;
            Ok((
                ManifestEntry {
                    image_id: id,
                    path: name.into(),
                    width: img.width(),
                    height: img.height(),
                },
                GtRecord { image_id: id, shapes },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (entries, gt): (Vec<_>, Vec<_>) = scenes.into_iter().unzip();
    let manifest = DatasetManifest::new(dir, entries)?;
    let files = DatasetFiles {
        manifest: dir.join("manifest.jsonl"),
        ground_truth: dir.join("ground_truth.jsonl"),
    };
    manifest.write(&files.manifest)?;
    let mut text = Vec::new();
    crate::retrieval::write_lines(&mut text, &gt).map_err(|e| Error::io(&files.ground_truth, e))?;
    std::fs::write(&files.ground_truth, text).map_err(|e| Error::io(&files.ground_truth, e))?;
    Ok(files)
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GtRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    crate::retrieval::parse_lines(&text, |_| false)
}

/// Images dominated by one of two colors (red or blue) with shaded blobs,
/// labelled by color index. Even ids are red.
pub fn two_color_images(count: usize, size: usize, seed: u64) -> Result<Vec<(u64, ImageBuffer, usize)>> {
    const COLORS: [[u8; 3]; 2] = [[200, 50, 50], [50, 60, 200]];
    (0..count as u64)
        .map(|id| {
            let mut r = rng::stream(seed, &[tag::SYNTHETIC, 2, id]);
            let color = (id % 2) as usize;
            let blobs: Vec<(f64, f64, f64, i32)> = (0..3)
                .map(|_| {
                    let s = size as f64;
                    (
                        r.random_range(0.0..s),
                        r.random_range(0.0..s),
                        r.random_range(s / 8.0..s / 3.0),
                        r.random_range(-60..=60),
                    )
                })
                .collect();
            let img = ImageBuffer::from_fn(size, size, |x, y| {
                let mut d = noise(&mut r, 10);
                for &(cx, cy, rad, delta) in &blobs {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    if dx * dx + dy * dy <= rad * rad {
                        d += delta;
                    }
                }
                shade(COLORS[color], d)
            })?;
            Ok((id, img, color))
        })
        .collect()
}
