//! Bounding-box arithmetic: overlap, proposal filtering and box jitter.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, stored as origin plus extent.
///
/// Serialized as `[x_min, y_min, width, height]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub width: f64,
    pub height: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, width: f64, height: f64) -> Result<Self> {
        let b = Self::new_unchecked(x_min, y_min, width, height);
        b.validate()?;
        Ok(b)
    }

    pub(crate) const fn new_unchecked(x_min: f64, y_min: f64, width: f64, height: f64) -> Self {
        Self {
            x_min,
            y_min,
            width,
            height,
        }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.width, self.height]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.width <= 0.0 || self.height <= 0.0 || self.x_min < 0.0 || self.y_min < 0.0 {
            return Err(Error::InvalidBox(format!("{self:?}")));
        }
        if !self.area().is_finite() {
            return Err(Error::InvalidBox(format!("{self:?} has infinite area")));
        }
        Ok(())
    }

    pub fn x_max(&self) -> f64 {
        self.x_min + self.width
    }

    pub fn y_max(&self) -> f64 {
        self.y_min + self.height
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x_min + 0.5 * self.width, self.y_min + 0.5 * self.height)
    }

    pub fn aspect(&self) -> f64 {
        self.width / self.height
    }

    pub fn fits_within(&self, img_w: f64, img_h: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max() <= img_w && self.y_max() <= img_h
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max().min(other.x_max()) - self.x_min.max(other.x_min);
        let h = self.y_max().min(other.y_max()) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x_min, b.y_min, b.width, b.height]
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

/// Intersection over union.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Thresholds applied to raw proposals before correspondence mining.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterParams {
    /// Minimum accepted box side, in pixels.
    pub min_scale: f64,
    pub aspect_lo: f64,
    pub aspect_hi: f64,
    /// Maximum IoU between any two kept boxes.
    pub max_iou: f64,
    pub keep_top: usize,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            min_scale: 96.0,
            aspect_lo: 1.0 / 3.0,
            aspect_hi: 3.0,
            max_iou: 0.5,
            keep_top: 100,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        // false for NaN bounds
        let aspect_ok = self.aspect_lo <= self.aspect_hi;
        if !aspect_ok
            || !(0.0..=1.0).contains(&self.max_iou)
            || self.keep_top < 1
            || !self.min_scale.is_finite()
        {
            return Err(Error::Invalid(format!("filter params {self:?}")));
        }
        Ok(())
    }

    fn accepts_shape(&self, b: &BoundingBox) -> bool {
        let aspect = b.aspect();
        b.width.min(b.height) >= self.min_scale && aspect >= self.aspect_lo && aspect <= self.aspect_hi
    }
}

/// Filters objectness-ordered proposals: drops boxes that are too small or
/// too elongated, then greedily keeps boxes whose IoU with every previously
/// kept box is at most `max_iou`, stopping at `keep_top`.
///
/// Returns the indices of the kept boxes into `ranked`, in order.
pub fn filter_proposal_indices(
    ranked: &[BoundingBox],
    img_w: f64,
    img_h: f64,
    p: &FilterParams,
) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for (i, b) in ranked.iter().enumerate() {
        if kept.len() >= p.keep_top {
            break;
        }
        debug_assert!(b.fits_within(img_w + 1e-9, img_h + 1e-9), "{b:?} outside {img_w}x{img_h}");
        if !p.accepts_shape(b) {
            continue;
        }
        if kept.iter().all(|&k| iou(&ranked[k], b) <= p.max_iou) {
            kept.push(i);
        }
    }
    kept
}

pub fn filter_proposals(
    ranked: &[BoundingBox],
    img_w: f64,
    img_h: f64,
    p: &FilterParams,
) -> Vec<BoundingBox> {
    filter_proposal_indices(ranked, img_w, img_h, p)
        .into_iter()
        .map(|i| ranked[i])
        .collect()
}

/// Ranges for the box jitter used to build intra-RoI views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterParams {
    /// Maximum centre shift as a fraction of the box side.
    pub center_frac: f64,
    pub area_lo: f64,
    pub area_hi: f64,
    /// Range of the multiplier applied to the box aspect ratio.
    pub aspect_jlo: f64,
    pub aspect_jhi: f64,
}

impl Default for JitterParams {
    fn default() -> Self {
        Self {
            center_frac: 0.5,
            area_lo: 0.5,
            area_hi: 2.0,
            aspect_jlo: 0.5,
            aspect_jhi: 2.0,
        }
    }
}

impl JitterParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.center_frac >= 0.0
            && self.center_frac.is_finite()
            && self.area_lo > 0.0
            && self.area_lo <= self.area_hi
            && self.area_hi.is_finite()
            && self.aspect_jlo > 0.0
            && self.aspect_jlo <= self.aspect_jhi
            && self.aspect_jhi.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("jitter params {self:?}")))
        }
    }
}

/// One unclamped jitter draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterDraw {
    /// Centre shifts in units of the box side, each in `[-center_frac, center_frac]`.
    pub shift_x: f64,
    pub shift_y: f64,
    pub area_scale: f64,
    pub aspect_mult: f64,
    /// Jittered box as `(x0, y0, x1, y1)` before clamping.
    pub corners: (f64, f64, f64, f64),
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let (a, b) = (lo.ln(), hi.ln());
    let u: f64 = rng.random();
    (a + (b - a) * u).exp().clamp(lo, hi)
}

/// Draws centre shift, area scale and aspect multiplier and applies them to `b`.
pub fn sample_jitter<R: Rng + ?Sized>(b: &BoundingBox, p: &JitterParams, rng: &mut R) -> JitterDraw {
    let u1 = rng.random::<f64>() * 2.0 - 1.0;
    let u2 = rng.random::<f64>() * 2.0 - 1.0;
    let area_scale = log_uniform(rng, p.area_lo, p.area_hi);
    let aspect_mult = log_uniform(rng, p.aspect_jlo, p.aspect_jhi);
    let shift_x = u1 * p.center_frac;
    let shift_y = u2 * p.center_frac;
    // w' h' = s w h and w'/h' = r w/h
    let new_w = b.width * (area_scale * aspect_mult).sqrt();
    let new_h = b.height * (area_scale / aspect_mult).sqrt();
    let x0 = b.x_min + 0.5 * (b.width - new_w) + shift_x * b.width;
    let y0 = b.y_min + 0.5 * (b.height - new_h) + shift_y * b.height;
    JitterDraw {
        shift_x,
        shift_y,
        area_scale,
        aspect_mult,
        corners: (x0, y0, x0 + new_w, y0 + new_h),
    }
}

const JITTER_ATTEMPTS: usize = 16;

/// Randomly shifts, rescales and reshapes `b`, clamped to the image.
///
/// Draws whose clamped box has a side below one pixel are resampled; after
/// 16 failed attempts the input box is returned unchanged.
pub fn jitter_box<R: Rng + ?Sized>(
    b: &BoundingBox,
    img_w: f64,
    img_h: f64,
    p: &JitterParams,
    rng: &mut R,
) -> BoundingBox {
    for _ in 0..JITTER_ATTEMPTS {
        let (x0, y0, x1, y1) = sample_jitter(b, p, rng).corners;
        let (x0, x1) = (x0.clamp(0.0, img_w), x1.clamp(0.0, img_w));
        let (y0, y1) = (y0.clamp(0.0, img_h), y1.clamp(0.0, img_h));
        if x1 - x0 >= 1.0 && y1 - y0 >= 1.0 {
            return BoundingBox::new_unchecked(x0, y0, x1 - x0, y1 - y0);
        }
    }
    *b
}

/// Proposals for one image, objectness-descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalRecord {
    pub image_id: u64,
    pub boxes: Vec<BoundingBox>,
    pub objectness: Vec<f64>,
}

impl ProposalRecord {
    pub fn validate(&self) -> Result<()> {
        if self.boxes.len() != self.objectness.len() {
            return Err(Error::Invalid(format!(
                "image {}: {} boxes but {} objectness scores",
                self.image_id,
                self.boxes.len(),
                self.objectness.len()
            )));
        }
        Ok(())
    }
}

/// Serializes proposal records as one JSON object per line.
pub fn write_proposal_lines<W: Write>(mut w: W, records: &[ProposalRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses proposal lines, skipping blank lines and lines for which `skip`
/// returns true (used for file headers).
pub fn parse_proposal_lines(text: &str, skip: impl Fn(&str) -> bool) -> Result<Vec<ProposalRecord>> {
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() || skip(line) {
            continue;
        }
        let r: ProposalRecord = serde_json::from_str(line)?;
        r.validate()?;
        out.push(r);
    }
    Ok(out)
}

pub fn read_proposals(path: impl AsRef<Path>) -> Result<Vec<ProposalRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_proposal_lines(&text, |_| false)
}
