//! View construction: crops, resizes and photometric perturbations.

use rand::Rng;

use super::network::Tensor;
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::imageio::{crop_region, resize_bilinear, ImageBuffer};

pub const FLIP_PROB: f64 = 0.5;
pub const GRAY_PROB: f64 = 0.2;
pub const JITTER_SCALE: f64 = 0.4;
pub const JITTER_SHIFT: f64 = 0.1;
/// Area range of global random-resized crops.
pub const GLOBAL_SCALE: (f64, f64) = (0.08, 1.0);
/// Area range of the small multi-crop views.
pub const SMALL_SCALE: (f64, f64) = (0.05, 0.14);
pub const CROP_RATIO: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
const CROP_ATTEMPTS: usize = 10;

/// Flattened `[0, 1]` pixels, one row per view. All views must share a size.
pub fn to_tensor(views: &[ImageBuffer]) -> Result<Tensor> {
    let first = views.first().ok_or_else(|| Error::Invalid("no views".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(views.len() * w * h * 3);
    for v in views {
        if (v.width(), v.height()) != (w, h) {
            return Err(Error::Shape(format!(
                "view {}x{} among {w}x{h} views",
                v.width(),
                v.height()
            )));
        }
        data.extend(v.pixels().iter().map(|&p| f64::from(p) / 255.0));
    }
    Tensor::from_shape_vec((views.len(), w * h * 3), data).map_err(|e| Error::Shape(e.to_string()))
}

/// Stacks equally long rows into a tensor.
pub fn stack(rows: &[Vec<f64>]) -> Result<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape("ragged view rows".into()));
    }
    Tensor::from_shape_vec((rows.len(), cols), rows.concat()).map_err(|e| Error::Shape(e.to_string()))
}

/// Random flip, per-channel affine color perturbation and grayscale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Photometric {
    pub flip: bool,
    pub scale: [f64; 3],
    pub shift: [f64; 3],
    pub gray: bool,
}

impl Photometric {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let flip = rng.random::<f64>() < FLIP_PROB;
        let scale = [0; 3].map(|_| 1.0 + rng.random_range(-JITTER_SCALE..JITTER_SCALE));
        let shift = [0; 3].map(|_| rng.random_range(-JITTER_SHIFT..JITTER_SHIFT));
        let gray = rng.random::<f64>() < GRAY_PROB;
        Self {
            flip,
            scale,
            shift,
            gray,
        }
    }

    /// Applies the perturbation, returning flattened `[0, 1]` pixels.
    pub fn apply(&self, img: &ImageBuffer) -> Vec<f64> {
        let (w, h) = (img.width(), img.height());
        let mut out = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                let sx = if self.flip { w - 1 - x } else { x };
                let p = img.get(sx, y);
                let mut c = [0.0; 3];
                for k in 0..3 {
                    c[k] = (f64::from(p[k]) / 255.0 * self.scale[k] + self.shift[k]).clamp(0.0, 1.0);
                }
                if self.gray {
                    let l = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
                    c = [l; 3];
                }
                out.extend_from_slice(&c);
            }
        }
        out
    }
}

/// A random box covering a fraction in `scale` of the image area with aspect
/// ratio log-uniform in `ratio`; the whole image if no draw fits.
pub fn random_resized_box<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut R,
) -> BoundingBox {
    let (wf, hf) = (width as f64, height as f64);
    let (lo, hi) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let area = wf * hf * rng.random_range(scale.0..scale.1);
        let r = rng.random_range(lo..hi).exp();
        let w = (area * r).sqrt();
        let h = (area / r).sqrt();
        if w >= 1.0 && h >= 1.0 && w <= wf && h <= hf {
            let x = rng.random::<f64>() * (wf - w);
            let y = rng.random::<f64>() * (hf - h);
            return BoundingBox::new_unchecked(x, y, w, h);
        }
    }
    BoundingBox::new_unchecked(0.0, 0.0, wf, hf)
}

/// Crops `b`, resizes to `size x size` and applies a random photometric
/// perturbation.
pub fn box_view<R: Rng + ?Sized>(img: &ImageBuffer, b: &BoundingBox, size: usize, rng: &mut R) -> Result<Vec<f64>> {
    let crop = resize_bilinear(&crop_region(img, b)?, size, size)?;
    Ok(Photometric::sample(rng).apply(&crop))
}

/// Random-resized crop view with area fraction in `scale`.
pub fn random_view<R: Rng + ?Sized>(img: &ImageBuffer, size: usize, scale: (f64, f64), rng: &mut R) -> Result<Vec<f64>> {
    let b = random_resized_box(img.width(), img.height(), scale, CROP_RATIO, rng);
    box_view(img, &b, size, rng)
}
