//! Dual-network training: an online network learns to predict the output of
//! a slowly moving average of itself across augmented views of images and
//! of object regions.

pub mod checkpoint;
pub mod loss;
pub mod network;
pub mod optim;
pub mod views;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, StepRecord};
pub use loss::{LossBreakdown, LossWeights, Mode, ViewBatch};
pub use network::{Architecture, Branch, NetworkParams, Tensor};
pub use optim::{ema_update, lr_schedule, scaled_base_lr, sgd_step, tau_schedule, SgdState};

use crate::error::{Error, Result};
use crate::geometry::{jitter_box, BoundingBox, JitterParams, ProposalRecord};
use crate::imageio::{DatasetManifest, ImageBuffer};
use crate::retrieval::CorrespondencePair;
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Defaults to `0.2 * batch / 256`.
    pub base_lr: Option<f64>,
    pub batch: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub tau_base: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub global_view: usize,
    pub local_view: usize,
    pub mode: Mode,
    pub normalize_embeddings: bool,
    pub backbone_widths: Vec<usize>,
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub pred_hidden: usize,
    /// Box jitter for intra-RoI views; configured alongside the proposal
    /// filter rather than here.
    #[serde(skip)]
    pub jitter: JitterParams,
    /// Root seed; set by the caller rather than read from configuration.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = Architecture::default();
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            base_lr: None,
            batch: 64,
            epochs: 50,
            warmup_epochs: 4,
            tau_base: 0.99,
            momentum: 0.9,
            weight_decay: 1e-4,
            global_view: 32,
            local_view: 16,
            mode: Mode::Orl,
            normalize_embeddings: false,
            backbone_widths: arch.backbone_widths,
            proj_hidden: arch.proj_hidden,
            proj_out: arch.proj_out,
            pred_hidden: arch.pred_hidden,
            jitter: JitterParams::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("train config: {m}")));
        let w = [self.lambda1, self.lambda2, self.lambda3];
        if w.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return bad("loss weights must be finite and non-negative");
        }
        if self.batch == 0 || self.epochs == 0 {
            return bad("batch and epochs must be positive");
        }
        if self.warmup_epochs >= self.epochs {
            return bad("warmup_epochs must be below epochs");
        }
        if !(0.0..=1.0).contains(&self.tau_base) {
            return bad("tau_base must lie in [0, 1]");
        }
        if !(self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return bad("momentum and weight_decay must be non-negative");
        }
        if let Some(lr) = self.base_lr {
            if !(lr.is_finite() && lr >= 0.0) {
                return bad("base_lr must be finite and non-negative");
            }
        }
        if self.global_view < 2 || self.local_view < 2 {
            return bad("view sizes must be at least 2");
        }
        self.jitter.validate()?;
        self.architecture().validate()
    }

    /// The backbone pools every view onto the local view grid.
    pub fn architecture(&self) -> Architecture {
        Architecture {
            grid: self.local_view,
            backbone_widths: self.backbone_widths.clone(),
            proj_hidden: self.proj_hidden,
            proj_out: self.proj_out,
            pred_hidden: self.pred_hidden,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
        }
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr.unwrap_or_else(|| scaled_base_lr(self.batch))
    }
}

/// Online and target networks after training, with the per-step history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub online: NetworkParams,
    pub target: NetworkParams,
    pub history: Vec<StepRecord>,
}

/// Object-level sampling data for one image.
struct RoiSource {
    boxes: Vec<BoundingBox>,
    /// Correspondence pairs grouped by neighbor image, ascending.
    groups: Vec<(usize, Vec<(BoundingBox, BoundingBox)>)>,
}

struct Sample {
    v: Vec<f64>,
    v_prime: Vec<f64>,
    local: Option<[Vec<f64>; 4]>,
}

/// Loads the manifest images and trains.
pub fn train(
    manifest: &DatasetManifest,
    proposals: Option<&[ProposalRecord]>,
    pairs: Option<&[CorrespondencePair]>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let images = manifest
        .entries
        .par_iter()
        .map(|e| Ok((e.image_id, manifest.load(e)?)))
        .collect::<Result<Vec<_>>>()?;
    train_images(&images, proposals, pairs, cfg)
}

fn roi_sources(
    images: &[(u64, ImageBuffer)],
    proposals: Option<&[ProposalRecord]>,
    pairs: Option<&[CorrespondencePair]>,
) -> Result<Vec<Option<RoiSource>>> {
    let (proposals, pairs) = match (proposals, pairs) {
        (Some(p), Some(c)) => (p, c),
        _ => return Err(Error::Invalid("orl mode needs proposals and correspondence".into())),
    };
    let position: BTreeMap<u64, usize> = images.iter().enumerate().map(|(i, (id, _))| (*id, i)).collect();
    let boxes: BTreeMap<u64, &ProposalRecord> = proposals.iter().map(|r| (r.image_id, r)).collect();
    let mut groups: BTreeMap<u64, BTreeMap<usize, Vec<(BoundingBox, BoundingBox)>>> = BTreeMap::new();
    for p in pairs {
        let n = *position
            .get(&p.neighbor_id)
            .ok_or_else(|| Error::Invalid(format!("pair names unknown image {}", p.neighbor_id)))?;
        groups
            .entry(p.query_id)
            .or_default()
            .entry(n)
            .or_default()
            .push((p.query_box, p.neighbor_box));
    }
    Ok(images
        .iter()
        .map(|(id, _)| {
            let boxes = boxes.get(id).map(|r| r.boxes.clone()).unwrap_or_default();
            let groups: Vec<_> = groups.remove(id).unwrap_or_default().into_iter().collect();
            if boxes.is_empty() || groups.is_empty() {
                log::warn!("image {id}: no proposals or correspondence, skipped");
                None
            } else {
                Some(RoiSource { boxes, groups })
            }
        })
        .collect())
}

fn build_sample(
    idx: usize,
    epoch: usize,
    images: &[(u64, ImageBuffer)],
    rois: Option<&[Option<RoiSource>]>,
    cfg: &TrainConfig,
) -> Result<Sample> {
    let (id, img) = &images[idx];
    let mut g = rng::stream(cfg.seed, &[tag::GLOBAL_VIEW, epoch as u64, *id]);
    let v = views::random_view(img, cfg.global_view, views::GLOBAL_SCALE, &mut g)?;
    let v_prime = views::random_view(img, cfg.global_view, views::GLOBAL_SCALE, &mut g)?;
    let mut r = rng::stream(cfg.seed, &[tag::ROI_VIEW, epoch as u64, *id]);
    let s = cfg.local_view;
    let local = match cfg.mode {
        Mode::Byol => None,
        Mode::Multicrop => {
            let mut crop = || views::random_view(img, s, views::SMALL_SCALE, &mut r);
            Some([crop()?, crop()?, crop()?, crop()?])
        }
        Mode::Orl => {
            let src = rois
                .and_then(|r| r[idx].as_ref())
                .ok_or_else(|| Error::Invalid(format!("image {id} has no object-level data")))?;
            let (w, h) = (img.width() as f64, img.height() as f64);
            let b = src.boxes[r.random_range(0..src.boxes.len())];
            let p = views::box_view(img, &jitter_box(&b, w, h, &cfg.jitter, &mut r), s, &mut r)?;
            let pp = views::box_view(img, &jitter_box(&b, w, h, &cfg.jitter, &mut r), s, &mut r)?;
            let (n, group) = &src.groups[r.random_range(0..src.groups.len())];
            let (qb, nb) = group[r.random_range(0..group.len())];
            let p1 = views::box_view(img, &qb, s, &mut r)?;
            let p2 = views::box_view(&images[*n].1, &nb, s, &mut r)?;
            Some([p, pp, p1, p2])
        }
    };
    Ok(Sample { v, v_prime, local })
}

fn assemble(samples: &[Sample], mode: Mode) -> Result<ViewBatch> {
    let col = |f: &dyn Fn(&Sample) -> &Vec<f64>| -> Result<Tensor> {
        views::stack(&samples.iter().map(|s| f(s).clone()).collect::<Vec<_>>())
    };
    let mut batch = ViewBatch::global_only(col(&|s| &s.v)?, col(&|s| &s.v_prime)?);
    let local = |i: usize| col(&move |s: &Sample| &s.local.as_ref().expect("local views")[i]);
    match mode {
        Mode::Byol => {}
        Mode::Orl => {
            batch.intra = Some((local(0)?, local(1)?));
            batch.inter = Some((local(2)?, local(3)?));
        }
        Mode::Multicrop => batch.crops = Some([local(0)?, local(1)?, local(2)?, local(3)?]),
    }
    Ok(batch)
}

/// Trains on in-memory images. In orl mode images without proposals or
/// correspondence are skipped.
pub fn train_images(
    images: &[(u64, ImageBuffer)],
    proposals: Option<&[ProposalRecord]>,
    pairs: Option<&[CorrespondencePair]>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let rois = match cfg.mode {
        Mode::Orl => Some(roi_sources(images, proposals, pairs)?),
        _ => None,
    };
    let eligible: Vec<usize> = match &rois {
        Some(r) => (0..images.len()).filter(|&i| r[i].is_some()).collect(),
        None => (0..images.len()).collect(),
    };
    if eligible.is_empty() {
        return Err(Error::Invalid("no trainable images".into()));
    }
    let steps_per_epoch = eligible.len().div_ceil(cfg.batch);
    let total = cfg.epochs * steps_per_epoch;
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let base_lr = cfg.base_lr();
    let weights = cfg.weights();

    let mut online = NetworkParams::init(&cfg.architecture(), &mut rng::stream(cfg.seed, &[tag::INIT]))?;
    let mut target = online.target_copy();
    let mut state = SgdState::new(&online);
    let mut history = Vec::with_capacity(total);
    let mut order = eligible.clone();
    for epoch in 0..cfg.epochs {
        order.clone_from(&eligible);
        order.shuffle(&mut rng::stream(cfg.seed, &[tag::BATCH, epoch as u64]));
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let t = epoch * steps_per_epoch + b;
            let samples = chunk
                .par_iter()
                .map(|&i| build_sample(i, epoch, images, rois.as_deref(), cfg))
                .collect::<Result<Vec<_>>>()?;
            let batch = assemble(&samples, cfg.mode)?;
            let pass = loss::forward(
                &online,
                &target,
                &batch,
                cfg.mode,
                &weights,
                cfg.normalize_embeddings,
                true,
            )?;
            let grads = loss::backward(&online, &pass)?;
            let lr = lr_schedule(t, total, warmup, base_lr);
            sgd_step(&mut online, &grads, lr, cfg.momentum, cfg.weight_decay, &mut state)?;
            for cache in pass.caches() {
                online.update_running_stats(cache);
            }
            let tau = tau_schedule(t + 1, total, cfg.tau_base)?;
            ema_update(&mut target, &online, tau)?;
            if online.trainable().iter().any(|(_, v)| v.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFinite(format!("parameters after step {}", t + 1)));
            }
            history.push(StepRecord {
                step: t + 1,
                lr,
                tau,
                losses: pass.losses,
            });
        }
        if let Some(last) = history.last() {
            log::info!(
                "epoch {}/{}: loss {:.5} (image {:.5}, intra {:.5}, inter {:.5})",
                epoch + 1,
                cfg.epochs,
                last.losses.total,
                last.losses.image,
                last.losses.intra,
                last.losses.inter
            );
        }
    }
    Ok(TrainOutcome {
        online,
        target,
        history,
    })
}
