//! Acceptance checks, one PASS/FAIL line per criterion. Run with
//! `cargo test --test acceptance`; exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use orl_cli::{Pipeline, PipelineConfig};
use orl_core::embedding::{cosine_similarity, embed_crop, EmbeddingStore, EmbeddingVector, FeatureSpace, NetworkEncoder, StoreKind};
use orl_core::geometry::{iou, sample_jitter, BoundingBox, JitterParams, ProposalRecord};
use orl_core::imageio::ImageBuffer;
use orl_core::retrieval::{knn_images, select_top_pairs, CorrespondencePair, SimilarityMatrix};
use orl_core::rng::{self, Stream};
use orl_core::segmentation::{grouping_hierarchy, SegParams};
use orl_core::synthetic::{read_ground_truth, two_color_images, write_dataset, SceneParams};
use orl_core::trainer::views::stack;
use orl_core::trainer::{
    loss, lr_schedule, scaled_base_lr, tau_schedule, train_images, Architecture, Checkpoint, LossWeights, Mode,
    NetworkParams, Tensor, TrainConfig, ViewBatch,
};
use rand::Rng;
use tempfile::TempDir;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, pass: bool, name: &str, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn main() {
    let mut r = Report { failed: 0 };
    gradient_correctness(&mut r);
    oracle_equivalences(&mut r);
    schedule_endpoints(&mut r);
    weighted_loss_reduction(&mut r);
    stage2_quality_and_recall(&mut r);
    training_smoke(&mut r);
    jitter_bounds(&mut r);
    run_all_determinism(&mut r);
    if r.failed > 0 {
        println!("{} acceptance criteria failed", r.failed);
        std::process::exit(1);
    }
}

// gradient correctness

const GRAD_SIDE: usize = 4;
const GRAD_BATCH: usize = 5;

fn random_views(r: &mut Stream) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..GRAD_BATCH)
        .map(|_| (0..GRAD_SIDE * GRAD_SIDE * 3).map(|_| r.random::<f64>()).collect())
        .collect();
    stack(&rows).unwrap()
}

/// Worst relative error `|a - n| / max(|a|, |n|, 1e-5)` over every trainable
/// scalar, with central differences of step 1e-5.
fn worst_gradient_error(seed: u64, mode: Mode) -> (f64, usize) {
    let arch = Architecture {
        grid: 2,
        backbone_widths: vec![6, 5],
        proj_hidden: 7,
        proj_out: 4,
        pred_hidden: 6,
    };
    let mut online = NetworkParams::init(&arch, &mut rng::stream(seed, &[1])).unwrap();
    let mut r = rng::stream(seed, &[2]);
    for (name, t) in online.trainable_mut() {
        if name.contains("norm.") {
            t.iter_mut().for_each(|v| *v += r.random_range(-0.3..0.3));
        }
    }
    let target = NetworkParams::init(&arch, &mut rng::stream(seed, &[3])).unwrap().target_copy();
    let mut b = ViewBatch::global_only(random_views(&mut r), random_views(&mut r));
    b.intra = Some((random_views(&mut r), random_views(&mut r)));
    b.inter = Some((random_views(&mut r), random_views(&mut r)));
    b.crops = Some([(); 4].map(|_| random_views(&mut r)));
    let w = LossWeights {
        lambda1: 1.0,
        lambda2: 0.7,
        lambda3: 0.3,
    };
    let total = |net: &NetworkParams| loss::orl_total_loss(net, &target, &b, mode, &w, false).unwrap().total;
    let pass = loss::forward(&online, &target, &b, mode, &w, false, true).unwrap();
    let grads = loss::backward(&online, &pass).unwrap();
    let h = 1e-5;
    let (mut worst, mut count) = (0.0f64, 0);
    for (ti, (_, g)) in grads.trainable().iter().enumerate() {
        for j in 0..g.len() {
            let mut plus = online.clone();
            plus.trainable_mut()[ti].1[j] += h;
            let mut minus = online.clone();
            minus.trainable_mut()[ti].1[j] -= h;
            let numeric = (total(&plus) - total(&minus)) / (2.0 * h);
            worst = worst.max((g[j] - numeric).abs() / g[j].abs().max(numeric.abs()).max(1e-5));
            count += 1;
        }
    }
    (worst, count)
}

fn gradient_correctness(r: &mut Report) {
    let start = Instant::now();
    let (mut worst, mut count) = (0.0f64, 0);
    for seed in [1, 2, 3] {
        for mode in [Mode::Orl, Mode::Multicrop] {
            let (w, c) = worst_gradient_error(seed, mode);
            worst = worst.max(w);
            count += c;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    r.line(
        worst < 1e-4 && secs < 30.0,
        "gradient correctness",
        format!("{count} parameter checks over 3 seeds, worst relative error {worst:.2e} (< 1e-4), {secs:.1} s (< 30 s)"),
    );
}

// oracle equivalences

fn oracle_equivalences(r: &mut Report) {
    let mut rand = rng::stream(100, &[]);

    let mut iou_bad = 0;
    for _ in 0..1000 {
        let mut int_box = || {
            let v: [u32; 4] = [rand.random_range(0..20), rand.random_range(0..20), rand.random_range(1..20), rand.random_range(1..20)];
            v
        };
        let (a, b) = (int_box(), int_box());
        let inside = |q: [u32; 4], x: u32, y: u32| x >= q[0] && x < q[0] + q[2] && y >= q[1] && y < q[1] + q[3];
        let (mut inter, mut union) = (0u32, 0u32);
        for y in 0..40 {
            for x in 0..40 {
                inter += u32::from(inside(a, x, y) && inside(b, x, y));
                union += u32::from(inside(a, x, y) || inside(b, x, y));
            }
        }
        let bb = |q: [u32; 4]| BoundingBox::new(q[0].into(), q[1].into(), q[2].into(), q[3].into()).unwrap();
        if iou(&bb(a), &bb(b)) != f64::from(inter) / f64::from(union) {
            iou_bad += 1;
        }
    }

    let mut knn_bad = 0;
    let sizes = [2, 3, 10, 57, 250, 1000];
    for &n in &sizes {
        let vs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..4).map(|_| f64::from(rand.random_range(-2i8..=2)) + 0.25).collect())
            .collect();
        let mut store = EmbeddingStore::new(4, StoreKind::Image);
        for (id, v) in vs.iter().enumerate() {
            store.push_vector(id as u64, None, &EmbeddingVector(v.clone())).unwrap();
        }
        let got = knn_images(&store, 10).unwrap();
        for (q, set) in got.iter().enumerate() {
            let qv = store.get(q as u64, None).unwrap().to_vector();
            let mut all: Vec<(u64, f64)> = (0..n as u64)
                .filter(|&j| j != q as u64)
                .map(|j| (j, cosine_similarity(qv.values(), store.get(j, None).unwrap().to_vector().values()).unwrap()))
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            all.truncate(10);
            if set.neighbors != all {
                knn_bad += 1;
            }
        }
    }

    let mut top_bad = 0;
    let matrices = 300;
    for _ in 0..matrices {
        let (rows, cols) = (rand.random_range(1..=50), rand.random_range(1..=50));
        let values: Vec<f64> = (0..rows * cols).map(|_| f64::from(rand.random_range(-10i8..=10)) / 10.0).collect();
        let fraction = [0.01, 0.1, 0.33, 1.0][rand.random_range(0..4)];
        let m = SimilarityMatrix { rows, cols, values };
        let qb: Vec<BoundingBox> = (0..rows).map(|i| BoundingBox::new(i as f64, 0.0, 1.0, 1.0).unwrap()).collect();
        let nb: Vec<BoundingBox> = (0..cols).map(|i| BoundingBox::new(0.0, i as f64, 1.0, 1.0).unwrap()).collect();
        let got = select_top_pairs(&m, 0, 1, &qb, &nb, fraction).unwrap();
        let total = rows * cols;
        let keep = (1..=total).find(|&c| c as f64 >= fraction * total as f64 - 1e-9).unwrap();
        let mut all: Vec<(usize, usize)> = (0..rows).flat_map(|i| (0..cols).map(move |j| (i, j))).collect();
        all.sort_by(|a, b| m.get(b.0, b.1).partial_cmp(&m.get(a.0, a.1)).unwrap().then(a.cmp(b)));
        all.truncate(keep);
        let want: Vec<(BoundingBox, BoundingBox, f64)> = all.iter().map(|&(i, j)| (qb[i], nb[j], m.get(i, j))).collect();
        let have: Vec<(BoundingBox, BoundingBox, f64)> = got.iter().map(|p| (p.query_box, p.neighbor_box, p.similarity)).collect();
        if want != have {
            top_bad += 1;
        }
    }
    r.line(
        iou_bad + knn_bad + top_bad == 0,
        "oracle equivalences",
        format!(
            "iou {iou_bad}/1000 mismatches; knn {knn_bad} mismatched queries over datasets of {sizes:?} vectors; \
             top pairs {top_bad}/{matrices} mismatched matrices up to 50x50"
        ),
    );
}

// schedule endpoints

fn schedule_endpoints(r: &mut Report) {
    let (k, w) = (1000, 40);
    let base = scaled_base_lr(512);
    let tau0 = tau_schedule(0, k, 0.99).unwrap();
    let tau_k = tau_schedule(k, k, 0.99).unwrap();
    let lr_w = lr_schedule(w, k, w, base);
    let lr_t = lr_schedule(k, k, w, base);
    r.line(
        tau0 == 0.99 && tau_k == 1.0 && lr_w == base && lr_t == 0.0 && base == 0.4,
        "schedule endpoints",
        format!("tau(0) = {tau0}, tau(K) = {tau_k}, lr(W) = {lr_w} (base {base} at batch 512), lr(T) = {lr_t}"),
    );
}

// weighted loss reduces to image-level training

fn tiny_dataset() -> (Vec<(u64, ImageBuffer)>, Vec<ProposalRecord>, Vec<CorrespondencePair>) {
    let images: Vec<(u64, ImageBuffer)> = two_color_images(8, 32, 3)
        .unwrap()
        .into_iter()
        .map(|(id, img, _)| (id, img))
        .collect();
    let boxes = vec![
        BoundingBox::new(0.0, 0.0, 20.0, 20.0).unwrap(),
        BoundingBox::new(10.0, 8.0, 22.0, 24.0).unwrap(),
    ];
    let proposals = (0..8)
        .map(|id| ProposalRecord {
            image_id: id,
            boxes: boxes.clone(),
            objectness: vec![2.0, 1.0],
        })
        .collect();
    let pairs = (0..8)
        .map(|id| CorrespondencePair {
            query_id: id,
            neighbor_id: (id + 3) % 8,
            query_box: boxes[0],
            neighbor_box: boxes[1],
            similarity: 0.5,
        })
        .collect();
    (images, proposals, pairs)
}

fn checkpoint_bytes(online: &NetworkParams, target: &NetworkParams) -> Vec<u8> {
    Checkpoint {
        digest: [0; 32],
        online: online.clone(),
        target: target.clone(),
    }
    .to_bytes()
    .unwrap()
}

fn weighted_loss_reduction(r: &mut Report) {
    let (images, proposals, pairs) = tiny_dataset();
    let cfg = TrainConfig {
        batch: 4,
        epochs: 4,
        warmup_epochs: 1,
        global_view: 16,
        local_view: 8,
        seed: 21,
        ..TrainConfig::default()
    };
    let byol = train_images(&images, None, None, &TrainConfig { mode: Mode::Byol, ..cfg.clone() }).unwrap();
    let orl_cfg = TrainConfig {
        mode: Mode::Orl,
        lambda2: 0.0,
        lambda3: 0.0,
        ..cfg
    };
    let orl = train_images(&images, Some(&proposals), Some(&pairs), &orl_cfg).unwrap();
    let same_params = checkpoint_bytes(&byol.online, &byol.target) == checkpoint_bytes(&orl.online, &orl.target);
    let same_losses = byol
        .history
        .iter()
        .zip(&orl.history)
        .all(|(a, b)| a.losses.image == b.losses.image && a.lr == b.lr && a.tau == b.tau);
    r.line(
        same_params && same_losses && byol.history.len() == orl.history.len(),
        "loss weights (0 object terms) reduce to image-level training",
        format!(
            "{} steps; checkpoints bit-identical: {same_params}; per-step image loss, lr, tau identical: {same_losses}",
            byol.history.len()
        ),
    );
}

// Stage 2 on synthetic scenes

fn stage2_quality_and_recall(r: &mut Report) {
    let dir = TempDir::new().unwrap();
    let start = Instant::now();
    let files = write_dataset(&dir.path().join("data"), 64, 7, &SceneParams::default()).unwrap();
    let cfg = PipelineConfig::parse(
        "seed = 7\n[paths]\nmanifest = \"data/manifest.jsonl\"\nwork_dir = \"work\"\n",
        dir.path(),
    )
    .unwrap();
    let p = Pipeline::new(cfg, None).unwrap();
    p.propose().unwrap();
    p.embed(StoreKind::Image).unwrap();
    p.embed(StoreKind::Roi).unwrap();
    p.knn().unwrap();
    p.pairs().unwrap();
    let secs = start.elapsed().as_secs_f64();

    let gt = read_ground_truth(&files.ground_truth).unwrap();
    let gt: BTreeMap<u64, _> = gt.into_iter().map(|g| (g.image_id, g.shapes)).collect();
    let proposals = p.read_proposals().unwrap();
    let mut pairs = p.read_pairs().unwrap();
    pairs.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
    let top = &pairs[..pairs.len().min(100)];

    // color of the ground-truth shape a region matches (IoU >= 0.5), if any
    let color = |id: u64, b: &BoundingBox| {
        gt[&id]
            .iter()
            .map(|s| (iou(&s.bbox, b), s.color))
            .filter(|&(v, _)| v >= 0.5)
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, c)| c)
    };
    let good = top
        .iter()
        .filter(|q| matches!((color(q.query_id, &q.query_box), color(q.neighbor_id, &q.neighbor_box)), (Some(a), Some(b)) if a == b))
        .count();
    let precision = good as f64 / top.len().max(1) as f64;
    r.line(
        top.len() == 100 && precision >= 0.8 && secs < 300.0,
        "stage-2 correspondence quality",
        format!(
            "{good}/{} of the top-ranked pairs link same-color shapes ({:.1}% >= 80%), {} pairs total, {secs:.1} s (< 300 s)",
            top.len(),
            100.0 * precision,
            pairs.len()
        ),
    );

    let (mut shapes, mut found) = (0, 0);
    for rec in &proposals {
        for s in gt[&rec.image_id].iter().filter(|s| s.bbox.width.min(s.bbox.height) >= 96.0) {
            shapes += 1;
            if rec.boxes.iter().any(|b| iou(b, &s.bbox) >= 0.7) {
                found += 1;
            }
        }
    }
    let recall = found as f64 / shapes.max(1) as f64;
    r.line(
        recall >= 0.95,
        "selective-search recall",
        format!("{found}/{shapes} ground-truth shapes covered at IoU >= 0.7 ({:.1}% >= 95%)", 100.0 * recall),
    );

    let m = orl_core::imageio::DatasetManifest::read(&files.manifest).unwrap();
    let mut bad = 0;
    let mut regions = (usize::MAX, 0);
    for e in &m.entries {
        let h = grouping_hierarchy(&m.load(e).unwrap(), &SegParams::default());
        if h.regions.len() != 2 * h.initial_count - 1 {
            bad += 1;
        }
        regions = (regions.0.min(h.initial_count), regions.1.max(h.initial_count));
    }
    r.line(
        bad == 0,
        "merge-tree cardinality",
        format!(
            "{}/{} images have exactly 2n-1 regions (n from {} to {})",
            m.len() - bad,
            m.len(),
            regions.0,
            regions.1
        ),
    );
}

// training smoke test

/// Trains for 200 steps and returns (initial image loss, final image loss,
/// same-color mean cosine, cross-color mean cosine).
fn smoke_run(normalize: bool) -> (f64, f64, f64, f64) {
    let data = two_color_images(32, 64, 11).unwrap();
    let images: Vec<(u64, ImageBuffer)> = data.iter().map(|(id, img, _)| (*id, img.clone())).collect();
    let cfg = TrainConfig {
        mode: Mode::Byol,
        batch: 32,
        epochs: 200,
        warmup_epochs: 10,
        normalize_embeddings: normalize,
        seed: 11,
        ..TrainConfig::default()
    };
    let out = train_images(&images, None, None, &cfg).unwrap();
    assert_eq!(out.history.len(), 200);
    let enc = NetworkEncoder::new(out.online, cfg.global_view, FeatureSpace::Projector).unwrap();
    let quads = [(0.0, 0.0), (32.0, 0.0), (0.0, 32.0), (32.0, 32.0)];
    let mut emb = Vec::new();
    for (_, img, color) in &data {
        for (x, y) in quads {
            let b = BoundingBox::new(x, y, 32.0, 32.0).unwrap();
            emb.push((*color, embed_crop(&enc, img, Some(&b)).unwrap()));
        }
    }
    let (mut same, mut ns, mut cross, mut nc) = (0.0, 0, 0.0, 0);
    for i in 0..emb.len() {
        for j in i + 1..emb.len() {
            let c = cosine_similarity(emb[i].1.values(), emb[j].1.values()).unwrap();
            if emb[i].0 == emb[j].0 {
                same += c;
                ns += 1;
            } else {
                cross += c;
                nc += 1;
            }
        }
    }
    let h = &out.history;
    (h[0].losses.image, h[h.len() - 1].losses.image, same / ns as f64, cross / nc as f64)
}

fn training_smoke(r: &mut Report) {
    let (first, last, same, cross) = smoke_run(true);
    r.line(
        last < first && same - cross >= 0.1,
        "training smoke (normalized embeddings)",
        format!(
            "image loss {first:.4} -> {last:.4}; same-color cosine {same:.3}, cross-color {cross:.3}, gap {:.3} (>= 0.1)",
            same - cross
        ),
    );
    let (first, last, same, cross) = smoke_run(false);
    println!(
        "info training smoke (plain squared distance): image loss {first:.4} -> {last:.4}; same-color cosine {same:.3}, \
         cross-color {cross:.3}, gap {:.3}",
        same - cross
    );
}

// jitter bounds

fn jitter_bounds(r: &mut Report) {
    let p = JitterParams::default();
    let mut rand = rng::stream(5, &[]);
    let mut bad = 0;
    let draws = 100_000;
    for i in 0..draws {
        let b = BoundingBox::new(
            rand.random_range(0.0..200.0),
            rand.random_range(0.0..200.0),
            rand.random_range(1.0..150.0),
            rand.random_range(1.0..150.0),
        )
        .unwrap();
        let d = sample_jitter(&b, &p, &mut rand);
        let (x0, y0, x1, y1) = d.corners;
        let area = (x1 - x0) * (y1 - y0) / b.area();
        let aspect = ((x1 - x0) / (y1 - y0)) / b.aspect();
        let (cx, cy) = b.center();
        let tol = 1e-9;
        let ok = (0.5..=2.0).contains(&d.area_scale)
            && (0.5..=2.0).contains(&d.aspect_mult)
            && (0.5 - tol..=2.0 + tol).contains(&area)
            && (0.5 - tol..=2.0 + tol).contains(&aspect)
            && ((x0 + x1) / 2.0 - cx).abs() <= 0.5 * b.width * (1.0 + tol)
            && ((y0 + y1) / 2.0 - cy).abs() <= 0.5 * b.height * (1.0 + tol);
        if !ok {
            bad += 1;
            if bad == 1 {
                println!("  first violation at draw {i}: {d:?} for {b:?}");
            }
        }
    }
    r.line(
        bad == 0,
        "jitter bounds",
        format!("{bad}/{draws} draws outside area ratio [0.5, 2], aspect multiplier [0.5, 2], centre shift <= 50% of side"),
    );
}

// run-all determinism

fn snapshot(work: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in [work.to_path_buf(), work.join("viz")] {
        let mut entries: Vec<PathBuf> = fs::read_dir(&sub).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries.into_iter().filter(|p| p.is_file()) {
            out.push((p.strip_prefix(work).unwrap().to_path_buf(), fs::read(&p).unwrap()));
        }
    }
    out
}

fn run_all_determinism(r: &mut Report) {
    let dir = TempDir::new().unwrap();
    let bin = env!("CARGO_BIN_EXE_orl");
    let data = dir.path().join("data");
    let status = Command::new(bin)
        .args(["--seed", "7", "gen-synthetic", "--count", "16", "--out"])
        .arg(&data)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let cfg = dir.path().join("orl.toml");
    let text = "[paths]\nmanifest = \"data/manifest.jsonl\"\nwork_dir = \"work\"\n\
                [train]\nbatch = 16\nepochs = 3\nwarmup_epochs = 1\n[viz]\ncount = 5\n";
    fs::write(&cfg, text).unwrap();
    let work = dir.path().join("work");
    let mut runs = Vec::new();
    for _ in 0..2 {
        let _ = fs::remove_dir_all(&work);
        let out = Command::new(bin)
            .arg("--config")
            .arg(&cfg)
            .args(["--seed", "7", "run-all"])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        runs.push(snapshot(&work));
    }
    let names: Vec<String> = runs[0].iter().map(|(p, _)| p.display().to_string()).collect();
    let expected = [
        "proposals.jsonl",
        "image_embeddings.orle",
        "roi_embeddings.orle",
        "knn.jsonl",
        "pairs.jsonl",
        "checkpoint_orl.orlc",
        "viz/pair_000.ppm",
    ];
    let complete = expected.iter().all(|e| names.iter().any(|n| n == e));
    let differing: Vec<&String> = runs[0]
        .iter()
        .zip(&runs[1])
        .zip(&names)
        .filter(|((a, b), _)| a != b)
        .map(|(_, n)| n)
        .collect();
    r.line(
        complete && differing.is_empty() && runs[0].len() == runs[1].len(),
        "run-all determinism",
        format!("{} files compared across two runs with --seed 7, differing: {differing:?}", names.len()),
    );
}
