//! Correspondence discovery: image-level nearest neighbours, RoI similarity
//! matrices and top-ranked RoI pair selection.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_similarity, cosine_with_norms, sq_norm, EmbeddingStore, EmbeddingVector, StoreKind};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, ProposalRecord};
use crate::imageio::DatasetManifest;

/// Default number of image-level neighbours.
pub const DEFAULT_K: usize = 10;
/// Default fraction of RoI pairs kept per image pair.
pub const DEFAULT_N: f64 = 0.10;

/// The K most similar images of one query, most similar first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeighborSet {
    pub query_id: u64,
    /// `(image_id, similarity)`.
    pub neighbors: Vec<(u64, f64)>,
}

/// Exhaustive cosine k-nearest-neighbour search over whole-image
/// embeddings. The query itself is excluded and ties go to the smaller
/// image id. Results are ordered by query id.
pub fn knn_images(store: &EmbeddingStore, k: usize) -> Result<Vec<NeighborSet>> {
    if store.kind != StoreKind::Image {
        return Err(Error::Invalid("knn needs an image-level store".into()));
    }
    if store.len() < 2 {
        return Err(Error::Invalid(format!(
            "knn needs at least 2 images, store has {}",
            store.len()
        )));
    }
    if k == 0 {
        return Err(Error::Invalid("K must be at least 1".into()));
    }
    let mut items: Vec<(u64, Vec<f64>)> = store
        .records()
        .iter()
        .map(|r| (r.image_id, r.to_vector().0))
        .collect();
    items.sort_by_key(|(id, _)| *id);
    let norms: Vec<f64> = items.iter().map(|(_, v)| sq_norm(v)).collect();
    if norms.contains(&0.0) {
        return Err(Error::ZeroNorm);
    }
    let keep = k.min(items.len() - 1);
    Ok(items
        .par_iter()
        .enumerate()
        .map(|(qi, (qid, qv))| {
            let mut cands: Vec<(u64, f64)> = items
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != qi)
                .map(|(j, (id, v))| (*id, cosine_with_norms(qv, norms[qi], v, norms[j])))
                .collect();
            let by_rank = |a: &(u64, f64), b: &(u64, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
            if keep < cands.len() {
                cands.select_nth_unstable_by(keep, by_rank);
                cands.truncate(keep);
            }
            cands.sort_by(by_rank);
            NeighborSet {
                query_id: *qid,
                neighbors: cands,
            }
        })
        .collect())
}

/// Row-major cosine similarities between query and neighbour RoIs.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }
}

pub fn roi_pair_matrix(query: &[EmbeddingVector], neighbor: &[EmbeddingVector]) -> Result<SimilarityMatrix> {
    if query.is_empty() || neighbor.is_empty() {
        return Err(Error::Invalid("roi lists must be nonempty".into()));
    }
    let dim = query[0].dim();
    if let Some(v) = query.iter().chain(neighbor).find(|v| v.dim() != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            actual: v.dim(),
        });
    }
    let mut values = Vec::with_capacity(query.len() * neighbor.len());
    for q in query {
        for n in neighbor {
            values.push(cosine_similarity(q.values(), n.values())?);
        }
    }
    Ok(SimilarityMatrix {
        rows: query.len(),
        cols: neighbor.len(),
        values,
    })
}

/// Number of entries kept from `total` at `fraction`: `ceil(fraction *
/// total)`, ignoring float noise below 1e-9.
pub fn top_count(fraction: f64, total: usize) -> usize {
    ((fraction * total as f64 - 1e-9).ceil().max(1.0) as usize).min(total)
}

/// The `ceil(fraction * rows * cols)` most similar entries as
/// `(row, col, similarity)`, most similar first; ties by `(row, col)`.
pub fn select_top_entries(m: &SimilarityMatrix, fraction: f64) -> Result<Vec<(usize, usize, f64)>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!("pair fraction {fraction} outside (0, 1]")));
    }
    let total = m.rows * m.cols;
    if total == 0 {
        return Ok(Vec::new());
    }
    let keep = top_count(fraction, total);
    let mut entries: Vec<(usize, usize, f64)> = (0..m.rows)
        .flat_map(|r| (0..m.cols).map(move |c| (r, c)))
        .map(|(r, c)| (r, c, m.get(r, c)))
        .collect();
    let by_rank = |a: &(usize, usize, f64), b: &(usize, usize, f64)| -> Ordering {
        b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1)))
    };
    if keep < entries.len() {
        entries.select_nth_unstable_by(keep, by_rank);
        entries.truncate(keep);
    }
    entries.sort_by(by_rank);
    Ok(entries)
}

/// One mined object-level correspondence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrespondencePair {
    pub query_id: u64,
    pub neighbor_id: u64,
    pub query_box: BoundingBox,
    pub neighbor_box: BoundingBox,
    pub similarity: f64,
}

pub fn select_top_pairs(
    m: &SimilarityMatrix,
    query_id: u64,
    neighbor_id: u64,
    query_boxes: &[BoundingBox],
    neighbor_boxes: &[BoundingBox],
    fraction: f64,
) -> Result<Vec<CorrespondencePair>> {
    if query_boxes.len() != m.rows || neighbor_boxes.len() != m.cols {
        return Err(Error::Invalid(format!(
            "{}x{} boxes for a {}x{} matrix",
            query_boxes.len(),
            neighbor_boxes.len(),
            m.rows,
            m.cols
        )));
    }
    Ok(select_top_entries(m, fraction)?
        .into_iter()
        .map(|(r, c, similarity)| CorrespondencePair {
            query_id,
            neighbor_id,
            query_box: query_boxes[r],
            neighbor_box: neighbor_boxes[c],
            similarity,
        })
        .collect())
}

fn roi_vectors(rec: &ProposalRecord, roi_store: &EmbeddingStore) -> Result<Vec<EmbeddingVector>> {
    (0..rec.boxes.len())
        .map(|i| {
            let idx = i as u32;
            roi_store
                .get(rec.image_id, Some(idx))
                .map(|r| r.to_vector())
                .ok_or(Error::MissingEmbedding {
                    image_id: rec.image_id,
                    roi_index: Some(idx),
                })
        })
        .collect()
}

/// Builds the RoI similarity matrix for every (query, neighbour) image pair
/// and keeps the top `fraction` of its entries. Output is grouped by
/// ascending `(query_id, neighbor_id)`, most similar pair first.
pub fn pairs_from_neighbors(
    manifest: &DatasetManifest,
    knn: &[NeighborSet],
    proposals: &[ProposalRecord],
    roi_store: &EmbeddingStore,
    fraction: f64,
) -> Result<Vec<CorrespondencePair>> {
    if roi_store.kind != StoreKind::Roi {
        return Err(Error::Invalid("pairs need a RoI-level store".into()));
    }
    let mut by_image: Vec<Option<&ProposalRecord>> = vec![None; manifest.len()];
    for rec in proposals {
        let entry = manifest
            .entry(rec.image_id)
            .ok_or_else(|| Error::Invalid(format!("proposals reference unknown image {}", rec.image_id)))?;
        for b in &rec.boxes {
            if !b.fits_within(entry.width as f64, entry.height as f64) {
                return Err(Error::Invalid(format!(
                    "image {}: box {b:?} outside {}x{}",
                    rec.image_id, entry.width, entry.height
                )));
            }
        }
        by_image[rec.image_id as usize] = Some(rec);
    }
    let mut groups: Vec<(u64, u64)> = Vec::new();
    for set in knn {
        for &(nid, _) in &set.neighbors {
            if nid == set.query_id {
                return Err(Error::Invalid(format!("image {nid} listed as its own neighbour")));
            }
            groups.push((set.query_id, nid));
        }
    }
    groups.sort_unstable();
    groups.dedup();

    let lookup = |id: u64| -> Result<Option<&ProposalRecord>> {
        by_image
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("knn references unknown image {id}")))
    };
    let results: Vec<Vec<CorrespondencePair>> = groups
        .par_iter()
        .map(|&(qid, nid)| -> Result<Vec<CorrespondencePair>> {
            let (Some(q), Some(n)) = (lookup(qid)?, lookup(nid)?) else {
                return Ok(Vec::new());
            };
            if q.boxes.is_empty() || n.boxes.is_empty() {
                return Ok(Vec::new());
            }
            let m = roi_pair_matrix(&roi_vectors(q, roi_store)?, &roi_vectors(n, roi_store)?)?;
            select_top_pairs(&m, qid, nid, &q.boxes, &n.boxes, fraction)
        })
        .collect::<Result<_>>()?;
    Ok(results.into_iter().flatten().collect())
}

/// Stage 2 end to end: KNN over image embeddings, then RoI pair mining.
pub fn discover_correspondence(
    manifest: &DatasetManifest,
    proposals: &[ProposalRecord],
    image_store: &EmbeddingStore,
    roi_store: &EmbeddingStore,
    k: usize,
    fraction: f64,
) -> Result<Vec<CorrespondencePair>> {
    if image_store.len() != manifest.len() {
        return Err(Error::Invalid(format!(
            "image store has {} records for {} manifest entries",
            image_store.len(),
            manifest.len()
        )));
    }
    if image_store.dim != roi_store.dim {
        return Err(Error::DimMismatch {
            expected: image_store.dim,
            actual: roi_store.dim,
        });
    }
    let knn = knn_images(image_store, k)?;
    pairs_from_neighbors(manifest, &knn, proposals, roi_store, fraction)
}

pub fn write_lines<W: Write, T: Serialize>(mut w: W, items: &[T]) -> std::io::Result<()> {
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn parse_lines<T: for<'de> Deserialize<'de>>(text: &str, skip: impl Fn(&str) -> bool) -> Result<Vec<T>> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !skip(l))
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingRecord;

    fn store(vectors: &[Vec<f32>]) -> EmbeddingStore {
        let mut s = EmbeddingStore::new(vectors[0].len(), StoreKind::Image);
        for (i, v) in vectors.iter().enumerate() {
            s.push(EmbeddingRecord {
                image_id: i as u64,
                roi_index: None,
                vector: v.clone(),
            })
            .unwrap();
        }
        s
    }

    #[test]
    fn duplicate_vector_is_top_neighbor() {
        let mut vs: Vec<Vec<f32>> = (0..10).map(|i| vec![1.0, i as f32, (i * i) as f32 % 7.0]).collect();
        vs[7] = vs[3].clone();
        let knn = knn_images(&store(&vs), 3).unwrap();
        assert_eq!(knn[3].neighbors[0], (7, 1.0));
        assert_eq!(knn[7].neighbors[0], (3, 1.0));
        assert!(knn.iter().all(|s| s.neighbors.len() == 3 && s.neighbors.iter().all(|n| n.0 != s.query_id)));
    }

    #[test]
    fn knn_truncates_and_rejects_tiny_stores() {
        let vs = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let knn = knn_images(&store(&vs), 10).unwrap();
        assert!(knn.iter().all(|s| s.neighbors.len() == 2));
        assert!(knn_images(&store(&vs[..1]), 1).is_err());
        assert!(knn_images(&store(&vs), 0).is_err());
    }

    #[test]
    fn knn_ties_prefer_smaller_ids() {
        let vs = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 2.0], vec![0.0, 3.0]];
        let knn = knn_images(&store(&vs), 2).unwrap();
        assert_eq!(knn[0].neighbors, vec![(1, 0.0), (2, 0.0)]);
    }

    #[test]
    fn matrix_examples() {
        let e = |v: &[f64]| EmbeddingVector(v.to_vec());
        let m = roi_pair_matrix(&[e(&[1.0, 2.0])], &[e(&[1.0, 2.0])]).unwrap();
        assert_eq!(m.values, vec![1.0]);
        let m = roi_pair_matrix(&[e(&[1.0, 0.0]), e(&[0.0, 1.0])], &[e(&[0.0, 1.0])]).unwrap();
        assert_eq!((m.rows, m.cols, m.values.clone()), (2, 1, vec![0.0, 1.0]));
        assert!(roi_pair_matrix(&[e(&[1.0])], &[e(&[1.0, 0.0])]).is_err());
        assert!(roi_pair_matrix(&[e(&[0.0, 0.0])], &[e(&[1.0, 0.0])]).is_err());
        assert!(roi_pair_matrix(&[], &[e(&[1.0, 0.0])]).is_err());
    }

    #[test]
    fn top_pairs_two_by_two() {
        let m = SimilarityMatrix {
            rows: 2,
            cols: 2,
            values: vec![0.9, 0.1, 0.2, 0.8],
        };
        let top = select_top_entries(&m, 0.5).unwrap();
        assert_eq!(top, vec![(0, 0, 0.9), (1, 1, 0.8)]);
        let all = select_top_entries(&m, 1.0).unwrap();
        assert_eq!(all.len(), 4);
        assert!(all.windows(2).all(|w| w[0].2 >= w[1].2));
        assert!(select_top_entries(&m, 0.0).is_err());
        assert!(select_top_entries(&m, 1.5).is_err());
    }

    #[test]
    fn top_count_handles_float_noise() {
        assert_eq!(top_count(0.1, 100 * 100), 1000);
        assert_eq!(top_count(0.1, 30), 3);
        assert_eq!(top_count(0.1, 31), 4);
        assert_eq!(top_count(0.1, 4), 1);
        assert_eq!(top_count(1.0, 7), 7);
    }
}
