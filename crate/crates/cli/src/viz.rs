//! Side-by-side montages of corresponding regions.

use orl_core::geometry::BoundingBox;
use orl_core::imageio::{pixel_bounds, ImageBuffer};

pub const STROKE: usize = 3;

/// Box colors, cycled by pair rank.
pub const COLORS: [[u8; 3]; 8] = [
    [255, 0, 0],
    [0, 255, 0],
    [0, 128, 255],
    [255, 255, 0],
    [255, 0, 255],
    [0, 255, 255],
    [255, 128, 0],
    [255, 255, 255],
];

pub fn color_for(rank: usize) -> [u8; 3] {
    COLORS[rank % COLORS.len()]
}

/// Whether pixel `(x, y)` of a `width x height` image lies on the stroke of
/// `b` (rounded to pixel bounds, stroke drawn inward).
pub fn on_stroke(b: &BoundingBox, width: usize, height: usize, x: usize, y: usize) -> bool {
    let Ok((x0, y0, x1, y1)) = pixel_bounds(b, width, height) else {
        return false;
    };
    if x < x0 || x >= x1 || y < y0 || y >= y1 {
        return false;
    }
    let edge = (x - x0).min(x1 - 1 - x).min(y - y0).min(y1 - 1 - y);
    edge < STROKE
}

/// Places `left` and `right` side by side on black and outlines one box in
/// each with `color`.
pub fn render_pair(
    left: &ImageBuffer,
    left_box: &BoundingBox,
    right: &ImageBuffer,
    right_box: &BoundingBox,
    color: [u8; 3],
) -> orl_core::Result<ImageBuffer> {
    let (w1, h1) = (left.width(), left.height());
    let (w2, h2) = (right.width(), right.height());
    ImageBuffer::from_fn(w1 + w2, h1.max(h2), |x, y| {
        let (img, b, lx) = if x < w1 { (left, left_box, x) } else { (right, right_box, x - w1) };
        if y >= img.height() {
            return [0; 3];
        }
        if on_stroke(b, img.width(), img.height(), lx, y) {
            color
        } else {
            img.get(lx, y)
        }
    })
}
