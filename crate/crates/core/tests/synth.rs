use trackcore::assoc::cosine_similarity;
use trackcore::geometry::roi_align_tensor;
use trackcore::synth::{corrupt_detections, generate_scenario, render_level, render_pyramid, Occlusion};
use trackcore::ScenarioConfig;

fn quiet(cfg: ScenarioConfig) -> ScenarioConfig {
    ScenarioConfig {
        det_sigma: 0.0,
        miss_prob: 0.0,
        fp_rate: 0.0,
        sigma_bg: 0.0,
        sigma_sig: 0.0,
        ..cfg
    }
}

#[test]
fn same_seed_same_scene() {
    let cfg = ScenarioConfig {
        frames: 60,
        targets: 6,
        occlusions: 2,
        ..ScenarioConfig::default()
    };
    let a = generate_scenario(&cfg).unwrap();
    assert_eq!(a, generate_scenario(&cfg).unwrap());
    for f in [1, 30, 60] {
        assert_eq!(corrupt_detections(&a, f, &cfg), corrupt_detections(&a, f, &cfg));
        assert_eq!(render_pyramid(&a, f, &cfg), render_pyramid(&a, f, &cfg));
    }
    let other = generate_scenario(&ScenarioConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.targets[0].boxes, other.targets[0].boxes);
}

#[test]
fn lone_target_is_always_visible_and_moves_smoothly() {
    let cfg = ScenarioConfig {
        targets: 1,
        occlusions: 0,
        ..ScenarioConfig::default()
    };
    let gt = generate_scenario(&cfg).unwrap();
    let t = &gt.targets[0];
    assert!(t.visible.iter().all(|&v| v));
    // Per-frame displacement: drift plus the largest wobble slope.
    let bound = cfg.speed[1] + std::f64::consts::TAU * cfg.wobble / cfg.wobble_period[0] + 1e-9;
    for w in t.boxes.windows(2) {
        let (a, b) = (w[0].center(), w[1].center());
        assert!(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() <= bound);
        assert_eq!((w[0].w, w[0].h), (w[1].w, w[1].h));
    }
}

#[test]
fn scripted_occlusion_hides_exactly_its_frames() {
    let cfg = ScenarioConfig {
        targets: 2,
        frames: 80,
        occlusions: 0,
        scripted_occlusions: vec![Occlusion { target: 1, start: 50, end: 60 }],
        ..quiet(ScenarioConfig::default())
    };
    let gt = generate_scenario(&cfg).unwrap();
    for f in 1..=80 {
        assert_eq!(gt.targets[1].visible_at(f), !(50..=60).contains(&f), "frame {f}");
        assert!(gt.targets[0].visible_at(f));
        let dets = corrupt_detections(&gt, f, &cfg);
        let hidden = gt.targets[1].box_at(f);
        assert_eq!(dets.iter().any(|d| d.bbox == hidden), gt.targets[1].visible_at(f));
    }
}

#[test]
fn noiseless_detections_equal_ground_truth() {
    let cfg = quiet(ScenarioConfig {
        frames: 40,
        occlusions: 0,
        ..ScenarioConfig::default()
    });
    let gt = generate_scenario(&cfg).unwrap();
    for f in 1..=40 {
        let mut dets: Vec<_> = corrupt_detections(&gt, f, &cfg).into_iter().map(|d| d.bbox).collect();
        let mut truth: Vec<_> = gt.visible(f).into_iter().map(|(_, b)| b).collect();
        let key = |b: &trackcore::BBox| (b.x.to_bits(), b.y.to_bits());
        dets.sort_by_key(key);
        truth.sort_by_key(key);
        assert_eq!(dets, truth);
    }
}

#[test]
fn overlap_miss_rate_matches_the_configured_probability() {
    let cfg = ScenarioConfig {
        width: 200,
        height: 200,
        targets: 24,
        frames: 1000,
        occlusions: 0,
        det_sigma: 0.0,
        fp_rate: 0.0,
        miss_prob: 0.3,
        ..ScenarioConfig::default()
    };
    let gt = generate_scenario(&cfg).unwrap();
    let (mut overlapped, mut dropped) = (0usize, 0usize);
    for f in 1..=cfg.frames {
        let vis = gt.visible(f);
        overlapped += vis
            .iter()
            .enumerate()
            .filter(|(k, (_, b))| vis.iter().enumerate().any(|(m, (_, o))| m != *k && b.iou(o) > cfg.overlap_iou))
            .count();
        dropped += vis.len() - corrupt_detections(&gt, f, &cfg).len();
    }
    assert!(overlapped > 2000, "only {overlapped} overlapped boxes");
    let rate = dropped as f64 / overlapped as f64;
    assert!((rate / cfg.miss_prob - 1.0).abs() < 0.2, "miss rate {rate}");
}

#[test]
fn empty_scene_renders_zero_mean_noise() {
    let cfg = ScenarioConfig {
        targets: 0,
        occlusions: 0,
        frames: 2,
        channels: 16,
        ..ScenarioConfig::default()
    };
    let gt = generate_scenario(&cfg).unwrap();
    let map = render_level(&gt, 1, 0, &cfg);
    let (h, w) = cfg.level_size(0);
    let bound = 3.0 * cfg.sigma_bg / ((h * w) as f64).sqrt();
    for plane in map.data().chunks(h * w) {
        let mean = plane.iter().sum::<f64>() / plane.len() as f64;
        assert!(mean.abs() < bound, "channel mean {mean} vs {bound}");
    }
}

#[test]
fn noiseless_crop_recovers_the_signature() {
    let cfg = quiet(ScenarioConfig {
        targets: 1,
        occlusions: 0,
        frames: 3,
        ..ScenarioConfig::default()
    });
    let gt = generate_scenario(&cfg).unwrap();
    let t = &gt.targets[0];
    let map = render_level(&gt, 2, 0, &cfg);
    let crop = roi_align_tensor(&map, &t.box_at(2), cfg.strides[0]).unwrap();
    for (c, &s) in t.signature.iter().enumerate() {
        for &v in &crop.data()[c * 16..(c + 1) * 16] {
            assert!((v - s).abs() < 1e-12);
        }
    }
}

#[test]
fn disjoint_crops_keep_signature_geometry() {
    let cfg = ScenarioConfig {
        frames: 5,
        occlusions: 0,
        ..ScenarioConfig::default()
    };
    let gt = generate_scenario(&cfg).unwrap();
    let vis = gt.visible(1);
    // Two targets whose padded footprints touch no other target.
    let pad = |b: &trackcore::BBox| trackcore::BBox::from_center(b.center().0, b.center().1, b.w + 32.0, b.h + 32.0);
    let isolated: Vec<usize> = (0..vis.len())
        .filter(|&i| (0..vis.len()).all(|k| k == i || pad(&vis[i].1).iou(&pad(&vis[k].1)) == 0.0))
        .collect();
    let (i, j) = (isolated[0], isolated[1]);
    let sig = |k: usize| {
        let s = &gt.targets[vis[k].0].signature;
        (0..s.len() * 16).map(|n| s[n / 16]).collect::<Vec<f64>>()
    };
    let want = cosine_similarity(&[sig(i)], &[sig(j)]).get(0, 0);
    // Exact without noise; background noise only shrinks the cosine a little.
    for (render_cfg, tol) in [(quiet(cfg.clone()), 1e-12), (cfg.clone(), 0.1)] {
        let map = render_level(&gt, 1, 0, &render_cfg);
        let crop = |k: usize| roi_align_tensor(&map, &vis[k].1, 8.0).unwrap().data().to_vec();
        let got = cosine_similarity(&[crop(i)], &[crop(j)]).get(0, 0);
        assert!((got - want).abs() < tol, "crop cosine {got} vs signature cosine {want}");
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let d = ScenarioConfig::default();
    assert!(generate_scenario(&ScenarioConfig { occlusions: 30, ..d.clone() }).is_err());
    assert!(generate_scenario(&ScenarioConfig { miss_prob: 1.5, ..d.clone() }).is_err());
    assert!(generate_scenario(&ScenarioConfig { box_width: [600.0, 700.0], ..d.clone() }).is_err());
    let bad_occ = vec![Occlusion { target: 0, start: 150, end: 250 }];
    assert!(generate_scenario(&ScenarioConfig { scripted_occlusions: bad_occ, ..d }).is_err());
}
