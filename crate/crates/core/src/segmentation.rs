//! Unsupervised region proposals.
//!
//! A graph-based over-segmentation (Felzenszwalb–Huttenlocher) seeds a
//! hierarchical grouping that repeatedly merges the most similar pair of
//! adjacent regions. Every region of the resulting merge tree is a candidate
//! box; candidates are ranked by a randomized merge-order objectness.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::imageio::ImageBuffer;
use crate::rng;

pub const COLOR_BINS: usize = 25;
pub const COLOR_HIST_LEN: usize = COLOR_BINS * 3;
pub const ORIENTATION_BINS: usize = 8;
pub const MAGNITUDE_BINS: usize = 10;
pub const TEXTURE_HIST_LEN: usize = ORIENTATION_BINS * MAGNITUDE_BINS * 3;

/// Largest central-difference gradient magnitude on 8-bit data.
const MAX_GRADIENT: f64 = 127.5 * std::f64::consts::SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimilarityWeights {
    pub color: f64,
    pub texture: f64,
    pub size: f64,
    pub fill: f64,
}

impl Default for SimilarityWeights {
    fn default() -> Self {
        Self {
            color: 1.0,
            texture: 1.0,
            size: 1.0,
            fill: 1.0,
        }
    }
}

impl SimilarityWeights {
    pub fn total(&self) -> f64 {
        self.color + self.texture + self.size + self.fill
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegParams {
    /// Felzenszwalb threshold scale `k`.
    pub fz_k: f64,
    pub fz_min_size: usize,
    /// Gaussian pre-smoothing; 0 disables it.
    pub fz_sigma: f64,
    pub weights: SimilarityWeights,
    /// Seed of the objectness stream. The pipeline overrides this per image.
    pub seed: u64,
}

impl Default for SegParams {
    fn default() -> Self {
        Self {
            fz_k: 100.0,
            fz_min_size: 20,
            fz_sigma: 0.8,
            weights: SimilarityWeights::default(),
            seed: 0,
        }
    }
}

impl SegParams {
    pub fn validate(&self) -> Result<()> {
        let w = [self.weights.color, self.weights.texture, self.weights.size, self.weights.fill];
        let ok = self.fz_k > 0.0
            && self.fz_k.is_finite()
            && self.fz_min_size >= 1
            && self.fz_sigma >= 0.0
            && w.iter().all(|&a| a >= 0.0 && a.is_finite())
            && w.iter().any(|&a| a > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("segmentation params {self:?}")))
        }
    }
}

/// Partition of an image into 4-connected components.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentLabelMap {
    pub width: usize,
    pub height: usize,
    /// Row-major component ids in `0..component_count`.
    pub labels: Vec<u32>,
    pub component_count: usize,
}

impl SegmentLabelMap {
    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn component_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.component_count];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }
}

struct DisjointSet {
    parent: Vec<u32>,
    size: Vec<u32>,
    /// Largest edge weight inside each component's spanning tree.
    internal: Vec<f64>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    /// Unites two roots; the larger tree (ties: smaller id) becomes the root.
    fn union(&mut self, a: u32, b: u32, weight: f64) -> u32 {
        let (big, small) = match self.size[a as usize].cmp(&self.size[b as usize]) {
            Ordering::Greater => (a, b),
            Ordering::Less => (b, a),
            Ordering::Equal => (a.min(b), a.max(b)),
        };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
        let internal = self.internal[a as usize].max(self.internal[b as usize]).max(weight);
        self.internal[big as usize] = internal;
        big
    }
}

fn smooth(img: &ImageBuffer, sigma: f64) -> Vec<[f64; 3]> {
    let (w, h) = (img.width(), img.height());
    let mut out: Vec<[f64; 3]> = img
        .pixels()
        .chunks_exact(3)
        .map(|p| [f64::from(p[0]), f64::from(p[1]), f64::from(p[2])])
        .collect();
    if sigma <= 0.0 {
        return out;
    }
    let side = (-1.0 / (2.0 * sigma * sigma)).exp();
    let norm = 1.0 + 2.0 * side;
    let (ws, wc) = (side / norm, 1.0 / norm);
    let mut tmp = out.clone();
    for y in 0..h {
        for x in 0..w {
            let l = out[y * w + x.saturating_sub(1)];
            let c = out[y * w + x];
            let r = out[y * w + (x + 1).min(w - 1)];
            tmp[y * w + x] = std::array::from_fn(|k| ws * l[k] + wc * c[k] + ws * r[k]);
        }
    }
    for y in 0..h {
        for x in 0..w {
            let u = tmp[y.saturating_sub(1) * w + x];
            let c = tmp[y * w + x];
            let d = tmp[(y + 1).min(h - 1) * w + x];
            out[y * w + x] = std::array::from_fn(|k| ws * u[k] + wc * c[k] + ws * d[k]);
        }
    }
    out
}

/// Graph-based segmentation over the 4-connected pixel grid.
pub fn felzenszwalb_segment(img: &ImageBuffer, p: &SegParams) -> SegmentLabelMap {
    let (w, h) = (img.width(), img.height());
    let n = w * h;
    let px = smooth(img, p.fz_sigma);
    let dist = |a: usize, b: usize| -> f64 {
        let (pa, pb) = (px[a], px[b]);
        ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + (pa[2] - pb[2]).powi(2)).sqrt()
    };

    let mut edges: Vec<(f64, u32, u32)> = Vec::with_capacity(2 * n);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                edges.push((dist(i, i + 1), i as u32, (i + 1) as u32));
            }
            if y + 1 < h {
                edges.push((dist(i, i + w), i as u32, (i + w) as u32));
            }
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut ds = DisjointSet::new(n);
    let threshold = |ds: &DisjointSet, r: u32| ds.internal[r as usize] + p.fz_k / f64::from(ds.size[r as usize]);
    for &(weight, a, b) in &edges {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra != rb && weight <= threshold(&ds, ra).min(threshold(&ds, rb)) {
            ds.union(ra, rb, weight);
        }
    }
    // absorb undersized components through their cheapest remaining edge
    for &(weight, a, b) in &edges {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra != rb
            && (ds.size[ra as usize] < p.fz_min_size as u32 || ds.size[rb as usize] < p.fz_min_size as u32)
        {
            ds.union(ra, rb, weight);
        }
    }

    let mut remap = vec![u32::MAX; n];
    let mut labels = Vec::with_capacity(n);
    let mut count = 0u32;
    for i in 0..n {
        let r = ds.find(i as u32) as usize;
        if remap[r] == u32::MAX {
            remap[r] = count;
            count += 1;
        }
        labels.push(remap[r]);
    }
    SegmentLabelMap {
        width: w,
        height: h,
        labels,
        component_count: count as usize,
    }
}

/// A node of the grouping hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub pixel_count: usize,
    pub bbox: BoundingBox,
    /// 25 bins per channel, normalized to sum 1 over all channels.
    pub color_hist: Vec<f64>,
    /// 8 orientations x 10 magnitudes per channel, normalized to sum 1.
    pub texture_hist: Vec<f64>,
    pub merged_from: Option<(usize, usize)>,
    /// 0 for initial regions, otherwise the 1-based merge index.
    pub merge_step: usize,
}

impl Region {
    fn merge(a: &Region, b: &Region, step: usize, ids: (usize, usize)) -> Region {
        let (na, nb) = (a.pixel_count as f64, b.pixel_count as f64);
        let total = na + nb;
        let mix = |ha: &[f64], hb: &[f64]| -> Vec<f64> {
            ha.iter().zip(hb).map(|(x, y)| (na * x + nb * y) / total).collect()
        };
        Region {
            pixel_count: a.pixel_count + b.pixel_count,
            bbox: union_box(&a.bbox, &b.bbox),
            color_hist: mix(&a.color_hist, &b.color_hist),
            texture_hist: mix(&a.texture_hist, &b.texture_hist),
            merged_from: Some(ids),
            merge_step: step,
        }
    }
}

fn union_box(a: &BoundingBox, b: &BoundingBox) -> BoundingBox {
    let x0 = a.x_min.min(b.x_min);
    let y0 = a.y_min.min(b.y_min);
    let x1 = a.x_max().max(b.x_max());
    let y1 = a.y_max().max(b.y_max());
    BoundingBox::new_unchecked(x0, y0, x1 - x0, y1 - y0)
}

fn histogram_intersection(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.min(*y)).sum()
}

/// Grouping similarity: weighted sum of colour, texture, size and fill
/// terms, each clamped to `[0, 1]`.
pub fn region_similarity(ri: &Region, rj: &Region, image_area: f64, p: &SegParams) -> f64 {
    let unit = |v: f64| v.clamp(0.0, 1.0);
    let w = &p.weights;
    let sizes = (ri.pixel_count + rj.pixel_count) as f64;
    let s_color = unit(histogram_intersection(&ri.color_hist, &rj.color_hist));
    let s_texture = unit(histogram_intersection(&ri.texture_hist, &rj.texture_hist));
    let s_size = unit(1.0 - sizes / image_area);
    let s_fill = unit(1.0 - (union_box(&ri.bbox, &rj.bbox).area() - sizes) / image_area);
    w.color * s_color + w.texture * s_texture + w.size * s_size + w.fill * s_fill
}

/// Per-pixel (colour bin, texture bin) indices for all three channels.
fn pixel_features(img: &ImageBuffer) -> Vec<[u16; 6]> {
    let (w, h) = (img.width(), img.height());
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let here = img.get(x, y);
            let l = img.get(x.saturating_sub(1), y);
            let r = img.get((x + 1).min(w - 1), y);
            let u = img.get(x, y.saturating_sub(1));
            let d = img.get(x, (y + 1).min(h - 1));
            let mut f = [0u16; 6];
            for c in 0..3 {
                f[c] = (c * COLOR_BINS + usize::from(here[c]) * COLOR_BINS / 256) as u16;
                let gx = (f64::from(r[c]) - f64::from(l[c])) / 2.0;
                let gy = (f64::from(d[c]) - f64::from(u[c])) / 2.0;
                let angle = gy.atan2(gx) + std::f64::consts::PI;
                let o = ((angle / std::f64::consts::TAU * ORIENTATION_BINS as f64) as usize) % ORIENTATION_BINS;
                let mag = (gx * gx + gy * gy).sqrt();
                let m = ((mag / MAX_GRADIENT * MAGNITUDE_BINS as f64) as usize).min(MAGNITUDE_BINS - 1);
                f[3 + c] = (c * ORIENTATION_BINS * MAGNITUDE_BINS + o * MAGNITUDE_BINS + m) as u16;
            }
            out.push(f);
        }
    }
    out
}

/// Builds one region per component of `labels`.
pub fn initial_regions(img: &ImageBuffer, labels: &SegmentLabelMap) -> Vec<Region> {
    let n = labels.component_count;
    let mut count = vec![0usize; n];
    let mut bounds = vec![(usize::MAX, usize::MAX, 0usize, 0usize); n];
    let mut color = vec![vec![0.0; COLOR_HIST_LEN]; n];
    let mut texture = vec![vec![0.0; TEXTURE_HIST_LEN]; n];
    let feats = pixel_features(img);
    for y in 0..labels.height {
        for x in 0..labels.width {
            let i = y * labels.width + x;
            let l = labels.labels[i] as usize;
            count[l] += 1;
            let b = &mut bounds[l];
            *b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
            let f = &feats[i];
            for c in 0..3 {
                color[l][f[c] as usize] += 1.0;
                texture[l][f[3 + c] as usize] += 1.0;
            }
        }
    }
    (0..n)
        .map(|l| {
            let norm = 3.0 * count[l] as f64;
            let (x0, y0, x1, y1) = bounds[l];
            Region {
                pixel_count: count[l],
                bbox: BoundingBox::new_unchecked(
                    x0 as f64,
                    y0 as f64,
                    (x1 - x0 + 1) as f64,
                    (y1 - y0 + 1) as f64,
                ),
                color_hist: color[l].iter().map(|v| v / norm).collect(),
                texture_hist: texture[l].iter().map(|v| v / norm).collect(),
                merged_from: None,
                merge_step: 0,
            }
        })
        .collect()
}

fn region_adjacency(labels: &SegmentLabelMap) -> Vec<BTreeSet<usize>> {
    let mut adj = vec![BTreeSet::new(); labels.component_count];
    let (w, h) = (labels.width, labels.height);
    for y in 0..h {
        for x in 0..w {
            let a = labels.label(x, y) as usize;
            for (nx, ny) in [(x + 1, y), (x, y + 1)] {
                if nx < w && ny < h {
                    let b = labels.label(nx, ny) as usize;
                    if a != b {
                        adj[a].insert(b);
                        adj[b].insert(a);
                    }
                }
            }
        }
    }
    adj
}

#[derive(Debug, PartialEq)]
struct Candidate {
    similarity: f64,
    i: usize,
    j: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // max-heap on similarity; ties pop the smallest (i, j) first
    fn cmp(&self, other: &Self) -> Ordering {
        self.similarity
            .total_cmp(&other.similarity)
            .then_with(|| (other.i, other.j).cmp(&(self.i, self.j)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// The full merge tree of one image.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    /// Initial regions first, then one region per merge in merge order.
    pub regions: Vec<Region>,
    pub initial_count: usize,
    /// Every similarity value popped to perform a merge, in order.
    pub merge_similarities: Vec<f64>,
}

/// Runs the hierarchical grouping until a single region remains.
pub fn grouping_hierarchy(img: &ImageBuffer, p: &SegParams) -> Hierarchy {
    let labels = felzenszwalb_segment(img, p);
    let mut regions = initial_regions(img, &labels);
    let mut adj = region_adjacency(&labels);
    let n = regions.len();
    let image_area = (img.width() * img.height()) as f64;
    let mut alive = vec![true; n];
    let mut heap = BinaryHeap::new();
    for (i, neigh) in adj.iter().enumerate() {
        for &j in neigh.range(i + 1..) {
            heap.push(Candidate {
                similarity: region_similarity(&regions[i], &regions[j], image_area, p),
                i,
                j,
            });
        }
    }
    let mut merge_similarities = Vec::with_capacity(n.saturating_sub(1));
    for step in 1..n {
        let (i, j, sim) = loop {
            match heap.pop() {
                Some(c) if alive[c.i] && alive[c.j] => break (c.i, c.j, c.similarity),
                Some(_) => continue,
                None => {
                    // only reachable for a disconnected adjacency graph
                    let mut live = (0..regions.len()).filter(|&k| alive[k]);
                    let (i, j) = (live.next().unwrap(), live.next().unwrap());
                    break (i, j, region_similarity(&regions[i], &regions[j], image_area, p));
                }
            }
        };
        let t = regions.len();
        let merged = Region::merge(&regions[i], &regions[j], step, (i, j));
        regions.push(merged);
        alive[i] = false;
        alive[j] = false;
        alive.push(true);
        merge_similarities.push(sim);

        let mut neigh: BTreeSet<usize> = adj[i].union(&adj[j]).copied().collect();
        neigh.remove(&i);
        neigh.remove(&j);
        for &k in &neigh {
            adj[k].remove(&i);
            adj[k].remove(&j);
            adj[k].insert(t);
            heap.push(Candidate {
                similarity: region_similarity(&regions[k], &regions[t], image_area, p),
                i: k,
                j: t,
            });
        }
        adj[i].clear();
        adj[j].clear();
        adj.push(neigh);
    }
    Hierarchy {
        regions,
        initial_count: n,
        merge_similarities,
    }
}

/// A ranked candidate box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub objectness: f64,
}

/// Scores every hierarchy region (`merge_step * u`, `u ~ U(0, 1]`), removes
/// duplicate boxes keeping the best score and sorts by score descending.
pub fn rank_hierarchy(h: &Hierarchy, seed: u64) -> Vec<Proposal> {
    let mut stream = rng::stream(seed, &[rng::tag::SEGMENT]);
    let mut scored: Vec<Proposal> = h
        .regions
        .iter()
        .map(|r| {
            let objectness = if r.merge_step == 0 {
                0.0
            } else {
                r.merge_step as f64 * (1.0 - stream.random::<f64>())
            };
            Proposal {
                bbox: r.bbox,
                objectness,
            }
        })
        .collect();
    let key = |b: &BoundingBox| [b.x_min, b.y_min, b.width, b.height];
    let cmp_box = |a: &BoundingBox, b: &BoundingBox| {
        key(a)
            .iter()
            .zip(key(b).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    };
    // group identical boxes with the best score first, keep one of each
    scored.sort_by(|a, b| cmp_box(&a.bbox, &b.bbox).then(b.objectness.total_cmp(&a.objectness)));
    scored.dedup_by(|later, first| later.bbox == first.bbox);
    scored.sort_by(|a, b| b.objectness.total_cmp(&a.objectness).then(cmp_box(&a.bbox, &b.bbox)));
    scored
}

/// Selective search: all boxes of the grouping hierarchy, objectness-ranked.
pub fn selective_search(img: &ImageBuffer, p: &SegParams) -> Vec<Proposal> {
    rank_hierarchy(&grouping_hierarchy(img, p), p.seed)
}
