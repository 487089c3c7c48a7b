//! Crop embeddings and the binary embedding store.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::imageio::{crop_region, resize_bilinear, ImageBuffer};
use crate::rng;
use crate::segmentation::{COLOR_BINS, COLOR_HIST_LEN};
use crate::trainer::network::{Branch, NetworkParams};

/// Identity and input geometry of an encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub name: String,
    /// Side of the square input the crop is resized to.
    pub input_size: usize,
    pub dim: usize,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_size < 8 || self.dim == 0 {
            return Err(Error::Invalid(format!("encoder spec {self:?}")));
        }
        Ok(())
    }
}

/// Maps a square `input_size` view to a fixed-length vector.
pub trait Encoder: Send + Sync {
    fn spec(&self) -> &EncoderSpec;

    /// `view` is already `input_size x input_size`.
    fn encode(&self, view: &ImageBuffer) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Crops `img` to `bbox` (or takes the whole image), resizes to the
/// encoder's input size and encodes.
pub fn embed_crop(
    encoder: &dyn Encoder,
    img: &ImageBuffer,
    bbox: Option<&BoundingBox>,
) -> Result<EmbeddingVector> {
    let spec = encoder.spec();
    let crop = match bbox {
        Some(b) => crop_region(img, b)?,
        None => img.clone(),
    };
    let view = resize_bilinear(&crop, spec.input_size, spec.input_size)?;
    let v = encoder.encode(&view)?;
    if v.len() != spec.dim {
        return Err(Error::DimMismatch {
            expected: spec.dim,
            actual: v.len(),
        });
    }
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("embedding value {bad}")));
    }
    Ok(EmbeddingVector(v))
}

/// 75-bin colour histogram, L1-normalized over all channels.
pub fn color_histogram(img: &ImageBuffer) -> Vec<f64> {
    let mut hist = vec![0.0; COLOR_HIST_LEN];
    for p in img.pixels().chunks_exact(3) {
        for (c, &v) in p.iter().enumerate() {
            hist[c * COLOR_BINS + usize::from(v) * COLOR_BINS / 256] += 1.0;
        }
    }
    let total = (img.pixels().len()) as f64;
    hist.iter_mut().for_each(|h| *h /= total);
    hist
}

/// Colour histogram followed by a fixed random linear projection.
///
/// Needs no training, so correspondence mining can run without a
/// pre-trained network.
#[derive(Debug, Clone)]
pub struct ReferenceHistogramEncoder {
    spec: EncoderSpec,
    /// Row-major `dim x 75`.
    projection: Vec<f64>,
}

impl ReferenceHistogramEncoder {
    pub fn new(seed: u64, dim: usize, input_size: usize) -> Result<Self> {
        if dim < 4 {
            return Err(Error::Invalid(format!("reference encoder dim {dim} < 4")));
        }
        let spec = EncoderSpec {
            name: "reference-histogram".into(),
            input_size,
            dim,
        };
        spec.validate()?;
        let mut stream = rng::stream(seed, &[rng::tag::ENCODER]);
        let projection = (0..dim * COLOR_HIST_LEN)
            .map(|_| StandardNormal.sample(&mut stream))
            .collect();
        Ok(Self { spec, projection })
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }
}

impl Encoder for ReferenceHistogramEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode(&self, view: &ImageBuffer) -> Result<Vec<f64>> {
        let hist = color_histogram(view);
        Ok(self
            .projection
            .chunks_exact(COLOR_HIST_LEN)
            .map(|row| row.iter().zip(&hist).map(|(w, h)| w * h).sum())
            .collect())
    }
}

/// Which activation of a trained network is used as the embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSpace {
    #[default]
    Projector,
    Backbone,
}

/// Embeds views with the online backbone (and projector) of a trained
/// network, using running batch statistics.
#[derive(Debug, Clone)]
pub struct NetworkEncoder {
    spec: EncoderSpec,
    net: NetworkParams,
    space: FeatureSpace,
}

impl NetworkEncoder {
    pub fn new(net: NetworkParams, input_size: usize, space: FeatureSpace) -> Result<Self> {
        let dim = match space {
            FeatureSpace::Projector => net.projector.output_dim(),
            FeatureSpace::Backbone => net.backbone.output_dim(),
        };
        let spec = EncoderSpec {
            name: format!("network-{}", match space {
                FeatureSpace::Projector => "projector",
                FeatureSpace::Backbone => "backbone",
            }),
            input_size,
            dim,
        };
        spec.validate()?;
        Ok(Self { spec, net, space })
    }
}

impl Encoder for NetworkEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode(&self, view: &ImageBuffer) -> Result<Vec<f64>> {
        let x = crate::trainer::views::to_tensor(std::slice::from_ref(view))?;
        let out = match self.space {
            FeatureSpace::Backbone => self.net.backbone_features(&x)?,
            FeatureSpace::Projector => self.net.infer(&x, Branch::Global, false)?,
        };
        Ok(out.row(0).to_vec())
    }
}

/// Cosine of the angle between `a` and `b`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (sq_norm(a), sq_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(cosine_with_norms(a, na, b, nb))
}

/// Squared Euclidean norm.
pub(crate) fn sq_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>()
}

#[inline]
pub(crate) fn cosine_with_norms(a: &[f64], sq_a: f64, b: &[f64], sq_b: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    // adding zero maps -0.0 to 0.0 so orthogonal vectors tie by id
    (dot / (sq_a * sq_b).sqrt()).clamp(-1.0, 1.0) + 0.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoreKind {
    Image,
    Roi,
}

impl StoreKind {
    fn tag(self) -> u8 {
        match self {
            StoreKind::Image => 0,
            StoreKind::Roi => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub image_id: u64,
    /// `None` for a whole-image embedding.
    pub roi_index: Option<u32>,
    pub vector: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn to_vector(&self) -> EmbeddingVector {
        EmbeddingVector(self.vector.iter().map(|&v| f64::from(v)).collect())
    }
}

pub const STORE_MAGIC: &[u8; 4] = b"ORLE";
pub const STORE_VERSION: u32 = 1;
const WHOLE_IMAGE: u32 = u32::MAX;

/// Embeddings of whole images or RoIs, keyed by `(image_id, roi_index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub dim: usize,
    pub kind: StoreKind,
    records: Vec<EmbeddingRecord>,
    index: HashMap<(u64, Option<u32>), usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize, kind: StoreKind) -> Self {
        Self {
            dim,
            kind,
            records: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, record: EmbeddingRecord) -> Result<()> {
        if record.vector.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: record.vector.len(),
            });
        }
        if record.roi_index == Some(WHOLE_IMAGE) {
            return Err(Error::Invalid("roi index u32::MAX is reserved".into()));
        }
        if let Some(bad) = record.vector.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("stored value {bad}")));
        }
        let key = (record.image_id, record.roi_index);
        if self.index.contains_key(&key) {
            return Err(Error::Invalid(format!("duplicate embedding key {key:?}")));
        }
        self.index.insert(key, self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn push_vector(&mut self, image_id: u64, roi_index: Option<u32>, v: &EmbeddingVector) -> Result<()> {
        self.push(EmbeddingRecord {
            image_id,
            roi_index,
            vector: v.0.iter().map(|&x| x as f32).collect(),
        })
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, image_id: u64, roi_index: Option<u32>) -> Option<&EmbeddingRecord> {
        self.index.get(&(image_id, roi_index)).map(|&i| &self.records[i])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(21 + self.records.len() * (12 + 4 * self.dim));
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.push(self.kind.tag());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.image_id.to_le_bytes());
            out.extend_from_slice(&r.roi_index.unwrap_or(WHOLE_IMAGE).to_le_bytes());
            for v in &r.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != STORE_MAGIC {
            return Err(Error::Format("not an embedding store (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != STORE_VERSION {
            return Err(Error::Format(format!("embedding store version {version}")));
        }
        let kind = match r.take(1)?[0] {
            0 => StoreKind::Image,
            1 => StoreKind::Roi,
            t => return Err(Error::Format(format!("embedding store kind tag {t}"))),
        };
        let dim = r.u32()? as usize;
        let count = r.u64()?;
        let record_len = 12 + 4 * dim as u64;
        if count.checked_mul(record_len) != Some((bytes.len() - r.pos) as u64) {
            return Err(Error::Format("embedding store length does not match header".into()));
        }
        let mut store = Self::new(dim, kind);
        for _ in 0..count {
            let image_id = r.u64()?;
            let roi = r.u32()?;
            let vector = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            store.push(EmbeddingRecord {
                image_id,
                roi_index: (roi != WHOLE_IMAGE).then_some(roi),
                vector,
            })?;
        }
        Ok(store)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format("truncated binary file".into()))?;
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder() -> ReferenceHistogramEncoder {
        ReferenceHistogramEncoder::new(11, 32, 16).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap();
        assert!((c - 8.0 / 9.0).abs() < 1e-15);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm)));
        assert!(matches!(cosine_similarity(&[1.0], &[1.0, 0.0]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn constant_images_of_same_colour_embed_identically() {
        let e = encoder();
        let a = ImageBuffer::filled(40, 30, [250, 5, 5]).unwrap();
        let b = ImageBuffer::filled(7, 90, [250, 5, 5]).unwrap();
        assert_eq!(embed_crop(&e, &a, None).unwrap(), embed_crop(&e, &b, None).unwrap());
        let bx = BoundingBox::new(3.0, 4.0, 10.0, 10.0).unwrap();
        assert_eq!(embed_crop(&e, &a, Some(&bx)).unwrap(), embed_crop(&e, &a, Some(&bx)).unwrap());
    }

    #[test]
    fn two_colour_crop_matches_hand_projection() {
        // left half (200,0,0), right half (0,0,200); 200 falls in bin
        // 200*25/256 = 19, so the mass is 1/6 at R19, R0, B0, B19 and 2/6 at G0

        let e = encoder();
        let img = ImageBuffer::from_fn(16, 16, |x, _| if x < 8 { [200, 0, 0] } else { [0, 0, 200] }).unwrap();
        let v = embed_crop(&e, &img, None).unwrap();
        let mut hist = [0.0; COLOR_HIST_LEN];
        hist[19] = 1.0 / 6.0;
        hist[0] = 1.0 / 6.0;
        hist[25] = 2.0 / 6.0;
        hist[50] = 1.0 / 6.0;
        hist[50 + 19] = 1.0 / 6.0;
        for (k, row) in e.projection().chunks(COLOR_HIST_LEN).enumerate() {
            let expected: f64 = row.iter().zip(hist.iter()).map(|(w, h)| w * h).sum();
            assert!((v.0[k] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn mirror_and_permutation_invariance() {
        let e = encoder();
        let img = ImageBuffer::from_fn(16, 16, |x, y| [(x * 16) as u8, (y * 9) as u8, 77]).unwrap();
        let a = embed_crop(&e, &img, None).unwrap();
        assert_eq!(a, embed_crop(&e, &img.flip_horizontal(), None).unwrap());
        let mut px: Vec<[u8; 3]> = img.pixels().chunks(3).map(|p| [p[0], p[1], p[2]]).collect();
        px.reverse();
        let permuted = ImageBuffer::from_raw(16, 16, px.concat()).unwrap();
        assert_eq!(a, embed_crop(&e, &permuted, None).unwrap());
    }

    #[test]
    fn red_is_closer_to_red_than_blue() {
        for seed in 0..20 {
            let e = ReferenceHistogramEncoder::new(seed, 16, 8).unwrap();
            let red = embed_crop(&e, &ImageBuffer::filled(8, 8, [255, 0, 0]).unwrap(), None).unwrap();
            let red2 = embed_crop(&e, &ImageBuffer::filled(9, 8, [255, 0, 0]).unwrap(), None).unwrap();
            let blue = embed_crop(&e, &ImageBuffer::filled(8, 8, [0, 0, 255]).unwrap(), None).unwrap();
            let rr = cosine_similarity(&red.0, &red2.0).unwrap();
            let rb = cosine_similarity(&red.0, &blue.0).unwrap();
            assert_eq!(rr, 1.0);
            assert!(rb < rr, "seed {seed}: {rb}");
        }
    }

    #[test]
    fn encoder_rejects_small_dims() {
        assert!(ReferenceHistogramEncoder::new(0, 3, 16).is_err());
        assert!(ReferenceHistogramEncoder::new(0, 4, 7).is_err());
    }

    #[test]
    fn store_binary_layout() {
        let mut s = EmbeddingStore::new(2, StoreKind::Roi);
        s.push(EmbeddingRecord {
            image_id: 5,
            roi_index: Some(1),
            vector: vec![1.0, -2.5],
        })
        .unwrap();
        s.push(EmbeddingRecord {
            image_id: 6,
            roi_index: None,
            vector: vec![0.0, 3.0],
        })
        .unwrap();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..4], b"ORLE");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(bytes[8], 1);
        assert_eq!(&bytes[9..13], &2u32.to_le_bytes());
        assert_eq!(&bytes[13..21], &2u64.to_le_bytes());
        assert_eq!(&bytes[21..29], &5u64.to_le_bytes());
        assert_eq!(&bytes[29..33], &1u32.to_le_bytes());
        assert_eq!(&bytes[33..37], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[49..53], &u32::MAX.to_le_bytes());
        assert_eq!(bytes.len(), 21 + 2 * (12 + 8));
        assert_eq!(EmbeddingStore::from_bytes(&bytes).unwrap(), s);
        assert!(EmbeddingStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn store_rejects_bad_records() {
        let mut s = EmbeddingStore::new(2, StoreKind::Image);
        let r = EmbeddingRecord {
            image_id: 0,
            roi_index: None,
            vector: vec![1.0, 2.0],
        };
        s.push(r.clone()).unwrap();
        assert!(s.push(r.clone()).is_err());
        assert!(s
            .push(EmbeddingRecord {
                vector: vec![1.0],
                image_id: 1,
                ..r.clone()
            })
            .is_err());
        assert!(s
            .push(EmbeddingRecord {
                vector: vec![f32::NAN, 1.0],
                image_id: 2,
                ..r
            })
            .is_err());
    }
}
