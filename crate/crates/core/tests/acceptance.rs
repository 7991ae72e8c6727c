//! End-to-end acceptance suite. Each test covers one numbered criterion and
//! prints a single pass/fail line (visible with `--nocapture`).

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use decorfuse::config::Config;
use decorfuse::detect_loss::{heatmap_focal_loss, total_loss, Box3D, Detection};
use decorfuse::eval_metrics::{ap_40, rotated_iou_3d};
use decorfuse::geometry::{parse_kitti_calib, project, LidarPoint, Projection};
use decorfuse::gradcheck::run_all;
use decorfuse::harness::{
    class_flipped_twin, desk_rig, generate_scene, infer, save_checkpoint, train,
};
use decorfuse::oracle::{dense_conv_oracle, monte_carlo_iou, random_sparse, select_queries_oracle};
use decorfuse::query_fusion::{
    cross_attention, select_queries, AttentionParams, Heatmap,
};
use decorfuse::sparse_conv::{
    strided_conv_forward, subm_conv_forward, BEVFeatureMap, SparseConvLayer, SparseConvMode,
};

fn report(n: usize, name: &str, pass: bool) {
    println!(
        "criterion {n:2} {name}: {}",
        if pass { "pass" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} ({name}) failed");
}

#[test]
fn criterion_01_sparse_conv_oracle() {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + trial);
        let dims = [
            rng.random_range(3..=8),
            rng.random_range(3..=8),
            rng.random_range(3..=8),
        ];
        let (c_in, c_out) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let st = random_sparse(dims, c_in, 0.3, 9100 + trial);
        for (mode, stride) in [(SparseConvMode::Submanifold, 1), (SparseConvMode::Strided, 2)] {
            let mut layer = SparseConvLayer::seeded(c_in, c_out, mode, 9200 + trial);
            for (i, b) in layer.bias.iter_mut().enumerate() {
                *b = 0.1 * (i as f64 + 1.0);
            }
            let out = match mode {
                SparseConvMode::Submanifold => subm_conv_forward(&st, &layer).unwrap(),
                SparseConvMode::Strided => strided_conv_forward(&st, &layer).unwrap(),
            };
            let oracle = dense_conv_oracle(&st, &layer, stride);
            for (oi, coord) in out.coords.iter().enumerate() {
                for (a, b) in out.row(oi).iter().zip(&oracle[coord]) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    let ok = worst < 1e-10 && t0.elapsed().as_secs_f64() < 10.0;
    report(1, "sparse conv vs dense oracle", ok);
}

#[test]
fn criterion_02_gradient_suite() {
    let t0 = Instant::now();
    let results = run_all(20, 24680);
    let all_pass = results.iter().all(|r| r.pass && r.instances >= 20);
    let ok = all_pass && t0.elapsed().as_secs_f64() < 60.0;
    for r in &results {
        println!(
            "  {}: max rel err {:.3e} over {} instances",
            r.name, r.max_rel_err, r.instances
        );
    }
    report(2, "finite-difference gradient suite", ok);
}

#[test]
fn criterion_03_geometry() {
    let rig = desk_rig();
    // back-projection round-trip through the inverted homogeneous chain
    let mut chain = nalgebra::Matrix4::identity();
    let m = rig.p_rect * rig.r_rect * rig.t_velo_to_cam;
    for i in 0..3 {
        for j in 0..4 {
            chain[(i, j)] = m[(i, j)];
        }
    }
    chain[(3, 3)] = 1.0;
    let inv = chain.try_inverse().unwrap();
    let mut roundtrip_ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..50 {
        let p = LidarPoint::new(
            rng.random_range(2.0..30.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(-2.0..2.0),
            0.0,
        );
        let px = match project(&p, &rig) {
            Projection::Pixel(px) => px,
            Projection::BehindCamera => continue,
        };
        let back = inv * nalgebra::Vector4::new(px.u * px.depth, px.v * px.depth, px.depth, 1.0);
        let err = ((back[0] - p.x).powi(2) + (back[1] - p.y).powi(2) + (back[2] - p.z).powi(2))
            .sqrt();
        roundtrip_ok &= err < 1e-9;
    }
    // homogeneous scale invariance of the projected pixel
    let p = LidarPoint::new(14.0, 3.0, -1.0, 0.0);
    let a = match project(&p, &rig) {
        Projection::Pixel(px) => px,
        _ => panic!(),
    };
    let mut scaled = rig.clone();
    scaled.t_cam_from_lidar *= 3.0;
    let b = match project(&p, &scaled) {
        Projection::Pixel(px) => px,
        _ => panic!(),
    };
    let scale_ok = a.u == b.u && a.v == b.v;
    // golden calibration snippet vs hand-read values
    let text = "P2: 100 0 400 1.5 0 100 224 -0.25 0 0 1 0.003\n\
                R0_rect: 1 0 0 0 1 0 0 0 1\n\
                Tr_velo_to_cam: 0 -1 0 0.1 0 0 -1 0.2 1 0 0 0.3\n";
    let parsed = parse_kitti_calib(text).unwrap();
    let golden_ok = parsed.p_rect[(0, 0)] == 100.0
        && parsed.p_rect[(0, 2)] == 400.0
        && parsed.p_rect[(0, 3)] == 1.5
        && parsed.p_rect[(1, 3)] == -0.25
        && parsed.p_rect[(2, 3)] == 0.003
        && parsed.t_velo_to_cam[(0, 1)] == -1.0
        && parsed.t_velo_to_cam[(0, 3)] == 0.1
        && parsed.t_velo_to_cam[(2, 0)] == 1.0
        && parsed.t_velo_to_cam[(3, 3)] == 1.0;
    report(3, "geometry round-trip and golden calib", roundtrip_ok && scale_ok && golden_ok);
}

#[test]
fn criterion_04_query_selection() {
    let mut ok = true;
    for trial in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(40_000 + trial);
        let (nx, ny, k) = (
            rng.random_range(2..=9),
            rng.random_range(2..=9),
            rng.random_range(1..=3),
        );
        let hm = Heatmap {
            nx,
            ny,
            k,
            data: (0..nx * ny * k).map(|_| rng.random_range(0.0..1.0)).collect(),
        };
        let n = rng.random_range(1..=5);
        let got = select_queries(&hm, n);
        let want = select_queries_oracle(&hm, n);
        ok &= got.len() == want.len()
            && got.iter().zip(&want).all(|(a, b)| {
                a.i == b.i && a.j == b.j && a.class_id == b.class_id && a.score == b.score
            });
        // per-class budget
        for cls in 0..k {
            ok &= got.iter().filter(|q| q.class_id == cls).count() <= n;
        }
    }
    report(4, "query selection vs brute force", ok);
}

#[test]
fn criterion_05_attention_normalization() {
    let mut ok = true;
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(50_000 + trial);
        let (q_in, kv_in, d) = (5, 4, 6);
        let params = AttentionParams::seeded(q_in, kv_in, d, 7, 0.3, 50_100 + trial);
        let embedded: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..q_in).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let bev = BEVFeatureMap {
            nx: 3,
            ny: 2,
            c: kv_in,
            data: (0..3 * 2 * kv_in).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let trace = cross_attention(&embedded, &bev, &params, false, 0).unwrap();
        for row in &trace.attn {
            ok &= (row.iter().sum::<f64>() - 1.0).abs() < 1e-12;
        }
        // degenerate single-key map: attended output is the value row exactly
        let single = BEVFeatureMap {
            nx: 1,
            ny: 1,
            c: kv_in,
            data: (0..kv_in).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let tr1 = cross_attention(&embedded, &single, &params, false, 0).unwrap();
        let v = params.w_v.forward(single.cell(0, 0));
        for out in &tr1.output {
            ok &= out.iter().zip(&v).all(|(a, b)| a == b);
        }
    }
    report(5, "attention normalization", ok);
}

#[test]
fn criterion_06_loss_arithmetic() {
    let mut ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(60_000);
    for _ in 0..100 {
        let lh: f64 = rng.random_range(0.0..4.0);
        let lq: f64 = rng.random_range(0.0..4.0);
        let lr: f64 = rng.random_range(0.0..4.0);
        let rep = total_loss(lh, lq, lr, 2.0);
        ok &= rep.total == rep.l_cls + 2.0 * rep.l_reg;
        ok &= rep.w == 2.0;
    }
    // single positive cell at p = 0.5: (1-0.5)^2 * (-ln 0.5)
    let pred = Heatmap {
        nx: 1,
        ny: 1,
        k: 1,
        data: vec![0.5],
    };
    let target = Heatmap {
        nx: 1,
        ny: 1,
        k: 1,
        data: vec![1.0],
    };
    let (loss, _) = heatmap_focal_loss(&pred, &target).unwrap();
    ok &= (loss - 0.173287).abs() < 1e-6;
    report(6, "loss arithmetic", ok);
}

#[test]
fn criterion_07_iou_and_ap() {
    let mut ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(70_000);
    for trial in 0..50u64 {
        let rb = |rng: &mut ChaCha8Rng| {
            Box3D::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-0.5..0.5),
                rng.random_range(0.8..3.0),
                rng.random_range(0.8..3.0),
                rng.random_range(0.5..2.0),
                rng.random_range(-3.1..3.1),
            )
        };
        let a = rb(&mut rng);
        let b = rb(&mut rng);
        let exact = rotated_iou_3d(&a, &b);
        let mc = monte_carlo_iou(&a, &b, 100_000, 70_100 + trial);
        ok &= (exact - mc).abs() < 0.01;
    }
    // hand-computed AP@40: TP 0.9, FP 0.8, TP 0.7 over 2 GTs
    let gt_box = |cx: f64| Box3D::new(cx, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0);
    let gts = vec![(gt_box(0.0), 0usize), (gt_box(10.0), 0)];
    let dets = vec![
        Detection {
            class_id: 0,
            score: 0.9,
            bbox: gt_box(0.0),
        },
        Detection {
            class_id: 0,
            score: 0.8,
            bbox: gt_box(100.0),
        },
        Detection {
            class_id: 0,
            score: 0.7,
            bbox: gt_box(10.0),
        },
    ];
    let ap = ap_40(&dets, &gts, 0.5, 0);
    let want = (20.0 * 1.0 + 20.0 * (2.0 / 3.0)) / 40.0;
    ok &= (ap - want).abs() < 1e-9;
    // per-class evaluation thresholds from the preset
    ok &= Config::default().eval_iou_thresholds == vec![0.7, 0.5];
    report(7, "rotated IoU and AP@40", ok);
}

fn mean_ap_over_scenes(
    model: &decorfuse::model::Model,
    cfg: &Config,
    scenes: &[decorfuse::harness::SyntheticScene],
) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for scene in scenes {
        let dets = infer(model, cfg, scene).unwrap();
        for cls in 0..cfg.k_classes {
            if scene.gt.iter().any(|(_, c)| *c == cls) {
                sum += ap_40(&dets, &scene.gt, 0.5, cls);
                n += 1;
            }
        }
    }
    sum / n as f64
}

#[test]
fn criterion_08_overfit() {
    let t0 = Instant::now();
    let cfg = Config {
        epochs: 60,
        fade_epochs: 60,
        seed: 42,
        ..Config::default()
    };
    let scenes: Vec<_> = (0..5)
        .map(|s| generate_scene(1000 + s, &cfg).unwrap())
        .collect();
    // 60 epochs x 5 scenes = 300 optimizer steps
    let (model, logs) = train(&cfg, &scenes).unwrap();
    let ratio = logs.last().unwrap().loss.total / logs[0].loss.total;
    let mean_ap = mean_ap_over_scenes(&model, &cfg, &scenes);
    let elapsed = t0.elapsed().as_secs_f64();
    println!("  loss ratio {ratio:.4}, mean AP@0.5 {mean_ap:.3}, {elapsed:.1} s");
    report(
        8,
        "end-to-end overfit",
        ratio <= 0.1 && mean_ap > 1.0 - 1e-9 && elapsed < 300.0,
    );
}

#[test]
fn criterion_09_fusion_causality() {
    // twin scenes share identical geometry with rotated class labels, so only
    // the image can disambiguate the class at a given location
    let cfg_on = Config {
        epochs: 150,
        fade_epochs: 150,
        seed: 7,
        ..Config::default()
    };
    let mut scenes: Vec<_> = (0..5)
        .map(|s| generate_scene(1000 + s, &cfg_on).unwrap())
        .collect();
    let twins: Vec<_> = scenes
        .iter()
        .map(|s| class_flipped_twin(s, cfg_on.k_classes))
        .collect();
    scenes.extend(twins);
    let (model_on, _) = train(&cfg_on, &scenes).unwrap();
    let ap_on = mean_ap_over_scenes(&model_on, &cfg_on, &scenes);
    let mut cfg_off = cfg_on.clone();
    cfg_off.ablation.decoration = false;
    let (model_off, _) = train(&cfg_off, &scenes).unwrap();
    let ap_off = mean_ap_over_scenes(&model_off, &cfg_off, &scenes);
    println!("  decoration on: mean AP {ap_on:.3}; decoration off: mean AP {ap_off:.3}");
    report(9, "fusion causality", ap_on > 1.0 - 1e-9 && ap_off <= 0.5);
}

#[test]
fn criterion_10_fading_schedule() {
    let cfg = Config {
        epochs: 8,
        fade_epochs: 5,
        seed: 3,
        ..Config::default()
    };
    let scenes = vec![generate_scene(500, &cfg).unwrap()];
    let (_, logs) = train(&cfg, &scenes).unwrap();
    let ok = logs.len() == 8
        && logs
            .iter()
            .all(|l| l.aug_active == (l.epoch < cfg.epochs - cfg.fade_epochs));
    report(10, "GT-Paste fading schedule", ok);
}

#[test]
fn criterion_11_determinism() {
    let cfg = Config {
        epochs: 4,
        fade_epochs: 2,
        seed: 11,
        ..Config::default()
    };
    let scenes: Vec<_> = (0..2)
        .map(|s| generate_scene(600 + s, &cfg).unwrap())
        .collect();
    let (m1, l1) = train(&cfg, &scenes).unwrap();
    let (m2, l2) = train(&cfg, &scenes).unwrap();
    let c1 = save_checkpoint(&m1, &cfg, cfg.epochs as u64);
    let c2 = save_checkpoint(&m2, &cfg, cfg.epochs as u64);
    let logs_equal = l1.len() == l2.len()
        && l1.iter().zip(&l2).all(|(a, b)| {
            a.epoch == b.epoch
                && a.aug_active == b.aug_active
                && a.loss.total.to_bits() == b.loss.total.to_bits()
                && a.loss.l_heatmap.to_bits() == b.loss.l_heatmap.to_bits()
                && a.loss.l_query_cls.to_bits() == b.loss.l_query_cls.to_bits()
                && a.loss.l_reg.to_bits() == b.loss.l_reg.to_bits()
        });
    report(11, "bitwise determinism", c1 == c2 && logs_equal);
}
