//! Stage execution and the file-level consistency checks between stages.
//!
//! Every stage output carries a digest of the stage's configuration and of
//! the digests of its inputs. Text outputs hold it in a JSON header line,
//! binary embedding stores in a `.meta` sidecar, checkpoints in their own
//! header. Before reading an input, a stage recomputes the digest the input
//! should have under the current configuration and refuses mismatches.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use orl_core::embedding::{embed_crop, Encoder, EmbeddingStore, NetworkEncoder, ReferenceHistogramEncoder, StoreKind};
use orl_core::geometry::{filter_proposal_indices, parse_proposal_lines, write_proposal_lines, ProposalRecord};
use orl_core::imageio::{save_image, DatasetManifest, ImageBuffer};
use orl_core::retrieval::{knn_images, pairs_from_neighbors, parse_lines, write_lines, CorrespondencePair, NeighborSet};
use orl_core::rng::{derive_seed, tag};
use orl_core::segmentation::{selective_search, SegParams};
use orl_core::trainer::{self, checkpoint, Checkpoint, Mode};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{EncoderKind, PipelineConfig, REFERENCE_DIM};
use crate::error::{CliError, Result};
use crate::viz;

/// Pipeline stages that produce files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Proposals,
    ImageEmbeddings,
    RoiEmbeddings,
    Knn,
    Pairs,
    Train(Mode),
}

impl Stage {
    pub fn name(self) -> String {
        match self {
            Stage::Proposals => "proposals".into(),
            Stage::ImageEmbeddings => "image_embeddings".into(),
            Stage::RoiEmbeddings => "roi_embeddings".into(),
            Stage::Knn => "knn".into(),
            Stage::Pairs => "pairs".into(),
            Stage::Train(m) => format!("train_{}", m.name()),
        }
    }

    pub fn file_name(self) -> String {
        match self {
            Stage::Proposals => "proposals.jsonl".into(),
            Stage::ImageEmbeddings => "image_embeddings.orle".into(),
            Stage::RoiEmbeddings => "roi_embeddings.orle".into(),
            Stage::Knn => "knn.jsonl".into(),
            Stage::Pairs => "pairs.jsonl".into(),
            Stage::Train(m) => format!("checkpoint_{}.orlc", m.name()),
        }
    }
}

/// First line of every text stage file, and content of `.meta` sidecars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageHeader {
    pub orl_stage: String,
    pub digest: String,
    pub config: Value,
    pub upstream: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn data(msg: impl Into<String>) -> CliError {
    CliError::Data(msg.into())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| data(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| data(format!("cannot write {}: {e}", path.display())))
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    /// Mode of the final training stage.
    pub mode: Mode,
    manifest: OnceLock<(DatasetManifest, String)>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, mode: Option<Mode>) -> Result<Self> {
        let mode = mode.unwrap_or(cfg.train.mode);
        fs::create_dir_all(&cfg.paths.work_dir)
            .map_err(|e| data(format!("cannot create {}: {e}", cfg.paths.work_dir.display())))?;
        Ok(Self {
            cfg,
            mode,
            manifest: OnceLock::new(),
        })
    }

    pub fn path(&self, stage: Stage) -> PathBuf {
        self.cfg.paths.work_dir.join(stage.file_name())
    }

    pub fn history_path(&self, mode: Mode) -> PathBuf {
        self.cfg.paths.work_dir.join(format!("loss_history_{}.tsv", mode.name()))
    }

    pub fn viz_dir(&self) -> PathBuf {
        self.cfg.paths.work_dir.join("viz")
    }

    /// The manifest and a digest of it and of every image file it lists.
    fn manifest(&self) -> Result<&(DatasetManifest, String)> {
        if let Some(m) = self.manifest.get() {
            return Ok(m);
        }
        let path = &self.cfg.paths.manifest;
        let bytes = read_file(path)?;
        let manifest = DatasetManifest::read(path)?;
        if manifest.is_empty() {
            return Err(data(format!("{}: empty manifest", path.display())));
        }
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        for e in &manifest.entries {
            let p = manifest.resolve(e);
            hasher.update(read_file(&p)?);
        }
        let digest = hex::encode(hasher.finalize());
        Ok(self.manifest.get_or_init(|| (manifest, digest)))
    }

    fn load_images(&self) -> Result<Vec<(u64, ImageBuffer)>> {
        let (m, _) = self.manifest()?;
        Ok(m.entries
            .par_iter()
            .map(|e| Ok((e.image_id, m.load(e)?)))
            .collect::<orl_core::Result<Vec<_>>>()?)
    }

    fn stage_config(&self, stage: Stage) -> Result<Value> {
        let c = &self.cfg;
        Ok(match stage {
            Stage::Proposals => match &c.paths.proposals {
                Some(p) => json!({ "external": sha256_hex(&read_file(p)?) }),
                None => json!({
                    "segmentation": SegParams { seed: 0, ..c.segmentation },
                    "filter": c.filter,
                    "seed": c.seed,
                }),
            },
            Stage::ImageEmbeddings | Stage::RoiEmbeddings => json!({ "encoder": self.encoder_config()? }),
            Stage::Knn => json!({ "k": c.retrieval.k }),
            Stage::Pairs => json!({ "n": c.retrieval.n }),
            Stage::Train(mode) => {
                let t = trainer::TrainConfig {
                    mode,
                    ..c.train_config()
                };
                json!({ "train": t, "jitter": t.jitter, "seed": t.seed })
            }
        })
    }

    fn encoder_config(&self) -> Result<Value> {
        let e = &self.cfg.encoder;
        Ok(match e.kind {
            EncoderKind::Reference => json!({
                "kind": "reference",
                "dim": e.dim.unwrap_or(REFERENCE_DIM),
                "input_size": e.input_size,
                "seed": self.cfg.seed,
            }),
            EncoderKind::Checkpoint => {
                let path = e.path.as_ref().expect("validated");
                json!({
                    "kind": "checkpoint",
                    "sha256": sha256_hex(&read_file(path)?),
                    "dim": e.dim,
                    "input_size": e.input_size,
                    "space": e.space,
                })
            }
            EncoderKind::Stage1 => json!({
                "kind": "stage1",
                "dim": e.dim,
                "input_size": e.input_size,
                "space": e.space,
            }),
        })
    }

    fn upstream_stages(&self, stage: Stage) -> Vec<Stage> {
        let encoder: &[Stage] = if self.cfg.encoder.kind == EncoderKind::Stage1 {
            &[Stage::Train(Mode::Byol)]
        } else {
            &[]
        };
        match stage {
            Stage::Proposals => vec![],
            Stage::ImageEmbeddings => encoder.to_vec(),
            Stage::RoiEmbeddings => [encoder, &[Stage::Proposals]].concat(),
            Stage::Knn => vec![Stage::ImageEmbeddings],
            Stage::Pairs => vec![Stage::Knn, Stage::Proposals, Stage::RoiEmbeddings],
            Stage::Train(Mode::Orl) => vec![Stage::Proposals, Stage::Pairs],
            Stage::Train(_) => vec![],
        }
    }

    /// The header a fresh output of `stage` has under the current
    /// configuration.
    pub fn expected_header(&self, stage: Stage) -> Result<StageHeader> {
        let mut upstream = BTreeMap::new();
        upstream.insert("manifest".to_string(), self.manifest()?.1.clone());
        for up in self.upstream_stages(stage) {
            upstream.insert(up.name(), self.expected_header(up)?.digest);
        }
        let config = self.stage_config(stage)?;
        let text = serde_json::to_vec(&json!({
            "stage": stage.name(),
            "config": config,
            "upstream": upstream,
        }))
        .expect("header serializes");
        Ok(StageHeader {
            orl_stage: stage.name(),
            digest: sha256_hex(&text),
            config,
            upstream,
        })
    }

    /// Digest recorded in the existing output of `stage`.
    fn recorded_digest(&self, stage: Stage) -> Result<String> {
        let path = self.path(stage);
        if !path.exists() {
            return Err(data(format!("missing {} file: {}", stage.name(), path.display())));
        }
        match stage {
            Stage::Train(_) => Ok(hex::encode(Checkpoint::read(&path)?.digest)),
            Stage::ImageEmbeddings | Stage::RoiEmbeddings => {
                let meta = meta_path(&path);
                let text = fs::read_to_string(&meta)
                    .map_err(|_| data(format!("missing {} file: {}", stage.name(), meta.display())))?;
                Ok(parse_header(&text, stage)?.digest)
            }
            _ => {
                let text = String::from_utf8(read_file(&path)?)
                    .map_err(|_| data(format!("{}: not UTF-8", path.display())))?;
                Ok(parse_header(text.lines().next().unwrap_or(""), stage)?.digest)
            }
        }
    }

    /// Refuses an upstream file whose digest differs from what the current
    /// configuration would produce.
    pub fn check_fresh(&self, stage: Stage) -> Result<()> {
        let recorded = self.recorded_digest(stage)?;
        if recorded != self.expected_header(stage)?.digest {
            return Err(data(format!(
                "stale upstream: {} ({} was produced under a different configuration or input)",
                stage.name(),
                self.path(stage).display()
            )));
        }
        Ok(())
    }

    fn read_text_body(&self, stage: Stage) -> Result<String> {
        self.check_fresh(stage)?;
        let text = String::from_utf8(read_file(&self.path(stage))?).map_err(|_| data("stage file is not UTF-8"))?;
        Ok(text.split_once('\n').map_or("", |(_, body)| body).to_string())
    }

    fn write_text(&self, stage: Stage, body: &[u8]) -> Result<()> {
        let header = self.expected_header(stage)?;
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.extend_from_slice(body);
        write_file(&self.path(stage), &out)
    }

    pub fn read_proposals(&self) -> Result<Vec<ProposalRecord>> {
        Ok(parse_proposal_lines(&self.read_text_body(Stage::Proposals)?, |_| false)?)
    }

    pub fn read_knn(&self) -> Result<Vec<NeighborSet>> {
        Ok(parse_lines(&self.read_text_body(Stage::Knn)?, |_| false)?)
    }

    pub fn read_pairs(&self) -> Result<Vec<CorrespondencePair>> {
        Ok(parse_lines(&self.read_text_body(Stage::Pairs)?, |_| false)?)
    }

    pub fn read_store(&self, stage: Stage) -> Result<EmbeddingStore> {
        self.check_fresh(stage)?;
        Ok(EmbeddingStore::read(self.path(stage))?)
    }

    /// Region proposals for every image, or validated external proposals.
    pub fn propose(&self) -> Result<()> {
        let (m, _) = self.manifest()?;
        let records = match &self.cfg.paths.proposals {
            Some(path) => {
                let text = String::from_utf8(read_file(path)?).map_err(|_| data("proposals file is not UTF-8"))?;
                let mut recs = parse_proposal_lines(&text, |l| l.contains("\"orl_stage\""))?;
                recs.sort_by_key(|r| r.image_id);
                if !recs.iter().map(|r| r.image_id).eq(0..m.len() as u64) {
                    return Err(data(format!("{}: need exactly one record per manifest image", path.display())));
                }
                recs
            }
            None => {
                let seg = self.cfg.segmentation;
                let filter = self.cfg.filter;
                let root = self.cfg.seed;
                m.entries
                    .par_iter()
                    .map(|e| {
                        let img = m.load(e)?;
                        let params = SegParams {
                            seed: derive_seed(root, &[tag::SEGMENT, e.image_id]),
                            ..seg
                        };
                        let ranked = selective_search(&img, &params);
                        let boxes: Vec<_> = ranked.iter().map(|p| p.bbox).collect();
                        let keep = filter_proposal_indices(&boxes, e.width as f64, e.height as f64, &filter);
                        log::info!("image {}: {} proposals, {} kept", e.image_id, ranked.len(), keep.len());
                        Ok(ProposalRecord {
                            image_id: e.image_id,
                            boxes: keep.iter().map(|&i| boxes[i]).collect(),
                            objectness: keep.iter().map(|&i| ranked[i].objectness).collect(),
                        })
                    })
                    .collect::<orl_core::Result<Vec<_>>>()?
            }
        };
        for r in &records {
            r.validate()?;
        }
        let mut body = Vec::new();
        write_proposal_lines(&mut body, &records).map_err(|e| data(e.to_string()))?;
        self.write_text(Stage::Proposals, &body)
    }

    fn encoder(&self) -> Result<Box<dyn Encoder>> {
        let e = &self.cfg.encoder;
        let net = match e.kind {
            EncoderKind::Reference => {
                let seed = derive_seed(self.cfg.seed, &[tag::ENCODER]);
                let dim = e.dim.unwrap_or(REFERENCE_DIM);
                return Ok(Box::new(ReferenceHistogramEncoder::new(seed, dim, e.input_size)?));
            }
            EncoderKind::Checkpoint => Checkpoint::read(e.path.as_ref().expect("validated"))?,
            EncoderKind::Stage1 => {
                self.check_fresh(Stage::Train(Mode::Byol))?;
                Checkpoint::read(self.path(Stage::Train(Mode::Byol)))?
            }
        };
        let enc = NetworkEncoder::new(net.online, e.input_size, e.space)?;
        if let Some(dim) = e.dim {
            if dim != enc.spec().dim {
                return Err(CliError::Usage(format!(
                    "encoder.dim = {dim} but the network produces {}-dimensional embeddings",
                    enc.spec().dim
                )));
            }
        }
        Ok(Box::new(enc))
    }

    /// Whole-image or per-proposal embeddings.
    pub fn embed(&self, kind: StoreKind) -> Result<()> {
        let (m, _) = self.manifest()?;
        let encoder = self.encoder()?;
        let encoder = encoder.as_ref();
        let (stage, store) = match kind {
            StoreKind::Image => {
                let vectors = m
                    .entries
                    .par_iter()
                    .map(|e| embed_crop(encoder, &m.load(e)?, None))
                    .collect::<orl_core::Result<Vec<_>>>()?;
                let mut store = EmbeddingStore::new(encoder.spec().dim, kind);
                for (e, v) in m.entries.iter().zip(&vectors) {
                    store.push_vector(e.image_id, None, v)?;
                }
                (Stage::ImageEmbeddings, store)
            }
            StoreKind::Roi => {
                let proposals = self.read_proposals()?;
                let vectors = proposals
                    .par_iter()
                    .map(|r| {
                        let entry = m
                            .entry(r.image_id)
                            .ok_or_else(|| data(format!("proposals name unknown image {}", r.image_id)))?;
                        let img = m.load(entry)?;
                        r.boxes
                            .iter()
                            .map(|b| Ok(embed_crop(encoder, &img, Some(b))?))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut store = EmbeddingStore::new(encoder.spec().dim, kind);
                for (r, vs) in proposals.iter().zip(&vectors) {
                    for (i, v) in vs.iter().enumerate() {
                        store.push_vector(r.image_id, Some(i as u32), v)?;
                    }
                }
                (Stage::RoiEmbeddings, store)
            }
        };
        let path = self.path(stage);
        store.write(&path)?;
        let header = self.expected_header(stage)?;
        write_file(&meta_path(&path), &serde_json::to_vec(&header).expect("header serializes"))?;
        log::info!("{}: {} records", path.display(), store.len());
        Ok(())
    }

    pub fn knn(&self) -> Result<()> {
        let store = self.read_store(Stage::ImageEmbeddings)?;
        let knn = knn_images(&store, self.cfg.retrieval.k)?;
        let mut body = Vec::new();
        write_lines(&mut body, &knn).map_err(|e| data(e.to_string()))?;
        self.write_text(Stage::Knn, &body)
    }

    pub fn pairs(&self) -> Result<()> {
        let knn = self.read_knn()?;
        let proposals = self.read_proposals()?;
        let roi = self.read_store(Stage::RoiEmbeddings)?;
        let (m, _) = self.manifest()?;
        let pairs = pairs_from_neighbors(m, &knn, &proposals, &roi, self.cfg.retrieval.n)?;
        log::info!("{} correspondence pairs", pairs.len());
        let mut body = Vec::new();
        write_lines(&mut body, &pairs).map_err(|e| data(e.to_string()))?;
        self.write_text(Stage::Pairs, &body)
    }

    pub fn train(&self, mode: Mode) -> Result<()> {
        let stage = Stage::Train(mode);
        let (proposals, pairs) = if mode == Mode::Orl {
            (Some(self.read_proposals()?), Some(self.read_pairs()?))
        } else {
            (None, None)
        };
        let images = self.load_images()?;
        let cfg = trainer::TrainConfig {
            mode,
            ..self.cfg.train_config()
        };
        let out = trainer::train_images(&images, proposals.as_deref(), pairs.as_deref(), &cfg)?;
        let header = self.expected_header(stage)?;
        let digest: [u8; 32] = hex::decode(&header.digest)
            .expect("hex digest")
            .try_into()
            .expect("32-byte digest");
        let ck = Checkpoint {
            digest,
            online: out.online,
            target: out.target,
        };
        ck.write(self.path(stage))?;
        let mut hist = Vec::new();
        checkpoint::write_history(&mut hist, &out.history).map_err(|e| data(e.to_string()))?;
        write_file(&self.history_path(mode), &hist)
    }

    /// Montages of the `count` most similar pairs; returns the files written.
    pub fn viz(&self, count: usize) -> Result<Vec<PathBuf>> {
        let mut pairs = self.read_pairs()?;
        if count > pairs.len() {
            log::warn!("{count} montages requested but only {} pairs exist", pairs.len());
        }
        pairs.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
        pairs.truncate(count);
        let dir = self.viz_dir();
        fs::create_dir_all(&dir).map_err(|e| data(format!("cannot create {}: {e}", dir.display())))?;
        for entry in fs::read_dir(&dir).map_err(|e| data(e.to_string()))? {
            let p = entry.map_err(|e| data(e.to_string()))?.path();
            let is_montage = p
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("pair_") && n.ends_with(".ppm"));
            if is_montage {
                fs::remove_file(&p).map_err(|e| data(e.to_string()))?;
            }
        }
        let (m, _) = self.manifest()?;
        let load = |id: u64| -> Result<ImageBuffer> {
            let e = m.entry(id).ok_or_else(|| data(format!("pair names unknown image {id}")))?;
            Ok(m.load(e)?)
        };
        let mut written = Vec::new();
        for (rank, p) in pairs.iter().enumerate() {
            let img = viz::render_pair(
                &load(p.query_id)?,
                &p.query_box,
                &load(p.neighbor_id)?,
                &p.neighbor_box,
                viz::color_for(rank),
            )?;
            let path = dir.join(format!("pair_{rank:03}.ppm"));
            save_image(&img, &path)?;
            written.push(path);
        }
        Ok(written)
    }

    /// Every stage in order: proposals, image-level training when the
    /// encoder needs it, embeddings, neighbours, pairs, training, montages.
    pub fn run_all(&self) -> Result<()> {
        self.propose()?;
        if self.cfg.encoder.kind == EncoderKind::Stage1 {
            self.train(Mode::Byol)?;
        }
        self.embed(StoreKind::Image)?;
        self.embed(StoreKind::Roi)?;
        self.knn()?;
        self.pairs()?;
        if !(self.mode == Mode::Byol && self.cfg.encoder.kind == EncoderKind::Stage1) {
            self.train(self.mode)?;
        }
        self.viz(self.cfg.viz.count)?;
        Ok(())
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn parse_header(line: &str, stage: Stage) -> Result<StageHeader> {
    let h: StageHeader =
        serde_json::from_str(line).map_err(|e| data(format!("{} file has no valid header: {e}", stage.name())))?;
    if h.orl_stage != stage.name() {
        return Err(data(format!("expected a {} file, found {}", stage.name(), h.orl_stage)));
    }
    Ok(h)
}
