use orl_core::geometry::{BoundingBox, ProposalRecord};
use orl_core::imageio::ImageBuffer;
use orl_core::retrieval::CorrespondencePair;
use orl_core::rng;
use orl_core::synthetic::two_color_images;
use orl_core::trainer::optim::sgd_update;
use orl_core::trainer::{
    ema_update, lr_schedule, scaled_base_lr, tau_schedule, train_images, Architecture, Checkpoint, Mode, NetworkParams,
    TrainConfig,
};

#[test]
fn tau_schedule_endpoints() {
    assert_eq!(tau_schedule(0, 500, 0.99).unwrap(), 0.99);
    assert_eq!(tau_schedule(500, 500, 0.99).unwrap(), 1.0);
    assert!((tau_schedule(250, 500, 0.99).unwrap() - 0.995).abs() < 1e-15);
    assert!(tau_schedule(501, 500, 0.99).is_err());
    let taus: Vec<f64> = (0..=500).map(|k| tau_schedule(k, 500, 0.99).unwrap()).collect();
    assert!(taus.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn lr_schedule_endpoints() {
    let base = scaled_base_lr(512);
    assert_eq!(base, 0.4);
    assert_eq!(scaled_base_lr(256), 0.2);
    assert_eq!(lr_schedule(0, 1000, 40, base), 0.0);
    assert_eq!(lr_schedule(20, 1000, 40, base), 0.2);
    assert_eq!(lr_schedule(40, 1000, 40, base), base);
    assert!((lr_schedule(520, 1000, 40, base) - 0.2).abs() < 1e-15);
    assert_eq!(lr_schedule(1000, 1000, 40, base), 0.0);
    assert_eq!(lr_schedule(1200, 1000, 40, base), 0.0);
}

#[test]
fn sgd_follows_three_step_recurrence() {
    let mut p = [1.0];
    let mut buf = [0.0];
    // g = 0.5 + 0.1 p, buf = 0.9 buf + g, p -= 0.1 buf
    let want = [0.94, 0.8266, 0.666274];
    for w in want {
        sgd_update(&mut p, &[0.5], &mut buf, 0.1, 0.9, 0.1);
        assert!((p[0] - w).abs() < 1e-12, "{} vs {w}", p[0]);
    }
}

#[test]
fn ema_examples() {
    let online = NetworkParams::init(&Architecture::default(), &mut rng::stream(1, &[])).unwrap();
    let start = NetworkParams::init(&Architecture::default(), &mut rng::stream(2, &[])).unwrap().target_copy();

    let mut target = start.clone();
    ema_update(&mut target, &online, 1.0).unwrap();
    assert_eq!(target, start);

    ema_update(&mut target, &online, 0.0).unwrap();
    assert_eq!(target, online.target_copy());

    let mut target = start.clone();
    ema_update(&mut target, &online, 0.99).unwrap();
    let (t0, o, t1) = (start.trainable(), online.trainable(), target.trainable());
    for (((_, a), (_, b)), (_, c)) in t0.iter().zip(&o).zip(&t1) {
        for ((a, b), c) in a.iter().zip(*b).zip(*c) {
            assert_eq!(*c, 0.99 * a + (1.0 - 0.99) * b);
        }
    }
}

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
    let proposals = images
        .iter()
        .map(|(id, _)| ProposalRecord {
            image_id: *id,
            boxes: boxes.clone(),
            objectness: vec![2.0, 1.0],
        })
        .collect();
    let pairs = images
        .iter()
        .map(|(id, _)| CorrespondencePair {
            query_id: *id,
            neighbor_id: (id + 2) % 8,
            query_box: boxes[0],
            neighbor_box: boxes[1],
            similarity: 0.9,
        })
        .collect();
    (images, proposals, pairs)
}

fn tiny_config(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        batch: 4,
        epochs: 3,
        warmup_epochs: 1,
        global_view: 16,
        local_view: 8,
        backbone_widths: vec![32, 16],
        proj_hidden: 16,
        proj_out: 8,
        pred_hidden: 16,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn checkpoint_bytes(out: &orl_core::trainer::TrainOutcome) -> Vec<u8> {
    Checkpoint {
        digest: [0; 32],
        online: out.online.clone(),
        target: out.target.clone(),
    }
    .to_bytes()
    .unwrap()
}

#[test]
fn orl_without_object_terms_reproduces_byol() {
    let (images, proposals, pairs) = tiny_dataset();
    let byol = train_images(&images, None, None, &tiny_config(Mode::Byol)).unwrap();
    let cfg = TrainConfig {
        lambda2: 0.0,
        lambda3: 0.0,
        ..tiny_config(Mode::Orl)
    };
    let orl = train_images(&images, Some(&proposals), Some(&pairs), &cfg).unwrap();
    assert_eq!(orl.online, byol.online);
    assert_eq!(orl.target, byol.target);
    assert_eq!(byol.history.len(), 6);
    for (a, b) in orl.history.iter().zip(&byol.history) {
        assert_eq!((a.step, a.lr, a.tau), (b.step, b.lr, b.tau));
        assert_eq!(a.losses.image, b.losses.image);
        assert_eq!(a.losses.total, b.losses.total);
        assert!(a.losses.intra > 0.0 && a.losses.inter > 0.0);
    }
}

#[test]
fn training_is_deterministic() {
    let (images, proposals, pairs) = tiny_dataset();
    for mode in [Mode::Byol, Mode::Orl, Mode::Multicrop] {
        let cfg = tiny_config(mode);
        let a = train_images(&images, Some(&proposals), Some(&pairs), &cfg).unwrap();
        let b = train_images(&images, Some(&proposals), Some(&pairs), &cfg).unwrap();
        assert_eq!(checkpoint_bytes(&a), checkpoint_bytes(&b), "{mode:?}");
        assert_eq!(a.history, b.history);
        let c = train_images(&images, Some(&proposals), Some(&pairs), &TrainConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(checkpoint_bytes(&a), checkpoint_bytes(&c), "{mode:?}");
    }
}

#[test]
fn history_follows_schedules() {
    let (images, _, _) = tiny_dataset();
    let cfg = tiny_config(Mode::Byol);
    let out = train_images(&images, None, None, &cfg).unwrap();
    let (total, warmup) = (6, 2);
    for (i, r) in out.history.iter().enumerate() {
        assert_eq!(r.step, i + 1);
        assert_eq!(r.lr, lr_schedule(i, total, warmup, cfg.base_lr()));
        assert_eq!(r.tau, tau_schedule(i + 1, total, cfg.tau_base).unwrap());
    }
    assert_eq!(out.history.last().unwrap().tau, 1.0);
}

#[test]
fn orl_skips_images_without_correspondence() {
    let (images, proposals, pairs) = tiny_dataset();
    let cfg = tiny_config(Mode::Orl);
    let out = train_images(&images, Some(&proposals), Some(&pairs[..4]), &cfg).unwrap();
    // 4 eligible images, batch 4: one step per epoch
    assert_eq!(out.history.len(), 3);
    assert!(train_images(&images, Some(&proposals), Some(&[]), &cfg).is_err());
    assert!(train_images(&images, None, None, &cfg).is_err());
}
