//! Training harness: synthetic scenes, GT-Paste augmentation with fading,
//! AdamW with a one-cycle schedule, checkpoints and scene directory IO.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io;
use std::path::Path;

use nalgebra::{Matrix3x4, Matrix4};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::detect_loss::{Box3D, Detection, LossReport};
use crate::eval_metrics::rotated_iou_bev;
use crate::geometry::{
    parse_kitti_calib, project, read_kitti_bin, write_kitti_bin, CalibRig, LidarPoint, Projection,
};
use crate::image::{read_pnm, write_ppm, Image};
use crate::model::{GradStore, Model, PipelineError};

/// A generated scene: lidar points, camera image, calibration and labels.
/// Object geometry is identical across classes; only the image blob color
/// carries class identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub points: Vec<LidarPoint>,
    pub image: Image,
    pub rig: CalibRig,
    pub gt: Vec<(Box3D, usize)>,
}

/// The fixed desk-scale camera: focal 24, principal point (48, 32), lidar
/// x forward / y left / z up mapped to camera x right / y down / z forward.
pub fn desk_rig() -> CalibRig {
    let p = Matrix3x4::new(
        24.0, 0.0, 48.0, 0.0, //
        0.0, 24.0, 32.0, 0.0, //
        0.0, 0.0, 1.0, 0.0,
    );
    let t = Matrix4::new(
        0.0, -1.0, 0.0, 0.0, //
        0.0, 0.0, -1.0, 0.0, //
        1.0, 0.0, 0.0, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    );
    CalibRig::from_parts(p, Matrix4::identity(), t)
}

/// Shared object footprint; classes are deliberately indistinguishable in
/// geometry so classification must come through the camera.
pub const OBJ_DIMS: [f64; 3] = [3.0, 2.0, 1.5];
const GROUND_Z: f64 = -2.0;
const MIN_CENTER_DIST: f64 = 6.0;
const PLACEMENT_BUDGET: usize = 1000;
pub const POINTS_PER_OBJECT: usize = 80;

fn class_color(class_id: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 4] = [
        [0.9, 0.15, 0.1],
        [0.1, 0.25, 0.9],
        [0.15, 0.85, 0.2],
        [0.9, 0.8, 0.1],
    ];
    PALETTE[class_id % PALETTE.len()]
}

fn placement_ok(b: &Box3D, existing: &[(Box3D, usize)]) -> bool {
    existing.iter().all(|(e, _)| {
        rotated_iou_bev(b, e) == 0.0
            && ((b.cx - e.cx).powi(2) + (b.cy - e.cy).powi(2)).sqrt() >= MIN_CENTER_DIST
    })
}

/// Uniform points on the top face and four side walls, area weighted,
/// in the box's local frame.
fn sample_local_surface(rng: &mut ChaCha8Rng, l: f64, w: f64, h: f64) -> [f64; 3] {
    let a_top = l * w;
    let a_lw = l * h;
    let a_ww = w * h;
    let total = a_top + 2.0 * a_lw + 2.0 * a_ww;
    let pick = rng.random_range(0.0..total);
    let u = rng.random_range(-0.5..0.5);
    let v = rng.random_range(-0.5..0.5);
    if pick < a_top {
        [u * l, v * w, h / 2.0]
    } else if pick < a_top + 2.0 * a_lw {
        let side = if pick < a_top + a_lw { 1.0 } else { -1.0 };
        [u * l, side * w / 2.0, v * h]
    } else {
        let side = if pick < a_top + 2.0 * a_lw + a_ww { 1.0 } else { -1.0 };
        [side * l / 2.0, u * w, v * h]
    }
}

fn object_points(rng: &mut ChaCha8Rng, b: &Box3D) -> Vec<LidarPoint> {
    let (s, c) = b.yaw.sin_cos();
    (0..POINTS_PER_OBJECT)
        .map(|_| {
            let [lx, ly, lz] = sample_local_surface(rng, b.l, b.w, b.h);
            LidarPoint::new(
                b.cx + c * lx - s * ly,
                b.cy + s * lx + c * ly,
                b.cz + lz,
                rng.random_range(0.3..0.7),
            )
        })
        .collect()
}

/// Paint every GT object as a filled class-colored disc at its projected
/// center, radius shrinking with depth.
fn render_image(gt: &[(Box3D, usize)], rig: &CalibRig, h: usize, w: usize) -> Image {
    let mut img = Image::zeros(h, w, 3);
    for v in img.data.iter_mut() {
        *v = 0.15;
    }
    for (b, cls) in gt {
        let center = LidarPoint::new(b.cx, b.cy, b.cz, 0.0);
        let Projection::Pixel(px) = project(&center, rig) else {
            continue;
        };
        let radius = (24.0 * 1.8 / b.cx.max(1.0)).clamp(3.0, 12.0);
        let color = class_color(*cls);
        let r2 = radius * radius;
        let y0 = (px.v - radius).floor().max(0.0) as usize;
        let y1 = ((px.v + radius).ceil() as usize).min(h.saturating_sub(1));
        let x0 = (px.u - radius).floor().max(0.0) as usize;
        let x1 = ((px.u + radius).ceil() as usize).min(w.saturating_sub(1));
        for y in y0..=y1.min(h - 1) {
            for x in x0..=x1.min(w - 1) {
                let dy = y as f64 + 0.5 - px.v;
                let dx = x as f64 + 0.5 - px.u;
                if dx * dx + dy * dy <= r2 {
                    for ch in 0..3 {
                        *img.at_mut(y, x, ch) = color[ch];
                    }
                }
            }
        }
    }
    img
}

/// Deterministic scene generation by rejection sampling of non-overlapping
/// BEV boxes, surface points per object and ground clutter.
pub fn generate_scene(seed: u64, cfg: &Config) -> Result<SyntheticScene, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_obj = rng.random_range(cfg.scene_objects[0]..=cfg.scene_objects[1]);
    let [l, w, h] = OBJ_DIMS;
    let mut gt: Vec<(Box3D, usize)> = Vec::with_capacity(n_obj);
    let class_offset = rng.random_range(0..cfg.k_classes.max(1));
    for obj_idx in 0..n_obj {
        let mut placed = false;
        for _ in 0..PLACEMENT_BUDGET {
            let b = Box3D::new(
                rng.random_range(8.0..28.0),
                rng.random_range(-8.0..8.0),
                GROUND_Z + h / 2.0,
                l,
                w,
                h,
                rng.random_range(-PI..PI),
            );
            // round-robin classes so small scenes stay balanced
            let cls = (class_offset + obj_idx) % cfg.k_classes;
            if placement_ok(&b, &gt) {
                gt.push((b, cls));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(PipelineError::PlacementFailure(PLACEMENT_BUDGET));
        }
    }
    let mut points = Vec::new();
    for (b, _) in &gt {
        points.extend(object_points(&mut rng, b));
    }
    for _ in 0..cfg.scene_clutter {
        points.push(LidarPoint::new(
            rng.random_range(0.5..31.0),
            rng.random_range(-12.0..12.0),
            rng.random_range(GROUND_Z..GROUND_Z + 0.1),
            rng.random_range(0.1..0.9),
        ));
    }
    let image = render_image(&gt, &desk_rig(), cfg.image_h, cfg.image_w);
    Ok(SyntheticScene {
        points,
        image,
        rig: desk_rig(),
        gt,
    })
}

/// Twin of a scene with every class label rotated by one and the image
/// re-rendered to match. Point geometry is bitwise identical, so any model
/// without access to the image sees two conflicting labelings of the same
/// input.
pub fn class_flipped_twin(scene: &SyntheticScene, k_classes: usize) -> SyntheticScene {
    let gt: Vec<(Box3D, usize)> = scene
        .gt
        .iter()
        .map(|(b, c)| (*b, (c + 1) % k_classes.max(1)))
        .collect();
    let image = render_image(&gt, &scene.rig, scene.image.h, scene.image.w);
    SyntheticScene {
        points: scene.points.clone(),
        image,
        rig: scene.rig.clone(),
        gt,
    }
}

/// One object lifted out of a scene: surface points in the box local frame.
#[derive(Debug, Clone)]
pub struct BankObject {
    pub local_points: Vec<LidarPoint>,
    pub dims: [f64; 3],
    pub class_id: usize,
}

/// Collect every GT object of every scene into a paste bank.
pub fn build_bank(scenes: &[SyntheticScene]) -> Vec<BankObject> {
    let mut bank = Vec::new();
    for scene in scenes {
        for (b, cls) in &scene.gt {
            let (s, c) = b.yaw.sin_cos();
            let mut local = Vec::new();
            for p in &scene.points {
                let dx = p.x - b.cx;
                let dy = p.y - b.cy;
                let dz = p.z - b.cz;
                let lx = c * dx + s * dy;
                let ly = -s * dx + c * dy;
                let eps = 1e-6;
                if lx.abs() <= b.l / 2.0 + eps
                    && ly.abs() <= b.w / 2.0 + eps
                    && dz.abs() <= b.h / 2.0 + eps
                {
                    local.push(LidarPoint::new(lx, ly, dz, p.r));
                }
            }
            if !local.is_empty() {
                bank.push(BankObject {
                    local_points: local,
                    dims: [b.l, b.w, b.h],
                    class_id: *cls,
                });
            }
        }
    }
    bank
}

/// GT-Paste: copy up to `max_paste` bank objects into free BEV space at
/// fresh poses; identity when disabled or the bank is empty.
pub fn gt_paste(
    scene: &SyntheticScene,
    bank: &[BankObject],
    rng: &mut ChaCha8Rng,
    enabled: bool,
    max_paste: usize,
) -> SyntheticScene {
    if !enabled || bank.is_empty() || max_paste == 0 {
        return scene.clone();
    }
    let mut out = scene.clone();
    let n = rng.random_range(1..=max_paste);
    let mut pasted = false;
    for _ in 0..n {
        let obj = &bank[rng.random_range(0..bank.len())];
        let [l, w, h] = obj.dims;
        for _ in 0..50 {
            let b = Box3D::new(
                rng.random_range(8.0..28.0),
                rng.random_range(-8.0..8.0),
                GROUND_Z + h / 2.0,
                l,
                w,
                h,
                rng.random_range(-PI..PI),
            );
            if !placement_ok(&b, &out.gt) {
                continue;
            }
            let (s, c) = b.yaw.sin_cos();
            for p in &obj.local_points {
                out.points.push(LidarPoint::new(
                    b.cx + c * p.x - s * p.y,
                    b.cy + s * p.x + c * p.y,
                    b.cz + p.z,
                    p.r,
                ));
            }
            out.gt.push((b, obj.class_id));
            pasted = true;
            break;
        }
    }
    if pasted {
        out.image = render_image(&out.gt, &out.rig, scene.image.h, scene.image.w);
    }
    out
}

/// GT-Paste stays on until the final `fade_epochs` epochs.
pub fn fading_schedule(epoch: usize, total_epochs: usize, fade_epochs: usize) -> bool {
    epoch < total_epochs.saturating_sub(fade_epochs)
}

/// One-cycle learning rate: cosine ramp lr_max/10 to lr_max over the first
/// 40% of steps, cosine decay to lr_max/1000 over the rest.
pub fn one_cycle_lr(step: usize, total_steps: usize, lr_max: f64) -> f64 {
    let last = total_steps.saturating_sub(1).max(1) as f64;
    let t = step as f64;
    let ramp_end = 0.4 * last;
    if t <= ramp_end && ramp_end > 0.0 {
        let phase = t / ramp_end;
        let lo = lr_max / 10.0;
        lo + (lr_max - lo) * 0.5 * (1.0 - (PI * phase).cos())
    } else {
        let span = (last - ramp_end).max(1e-12);
        let phase = ((t - ramp_end) / span).clamp(0.0, 1.0);
        let lo = lr_max / 1000.0;
        lo + (lr_max - lo) * 0.5 * (1.0 + (PI * phase).cos())
    }
}

/// Beta1 anneals opposite to the learning rate within the configured range.
pub fn one_cycle_beta1(step: usize, total_steps: usize, range: [f64; 2]) -> f64 {
    let [lo, hi] = range;
    let last = total_steps.saturating_sub(1).max(1) as f64;
    let t = step as f64;
    let ramp_end = 0.4 * last;
    if t <= ramp_end && ramp_end > 0.0 {
        let phase = t / ramp_end;
        hi - (hi - lo) * 0.5 * (1.0 - (PI * phase).cos())
    } else {
        let span = (last - ramp_end).max(1e-12);
        let phase = ((t - ramp_end) / span).clamp(0.0, 1.0);
        hi - (hi - lo) * 0.5 * (1.0 + (PI * phase).cos())
    }
}

/// One AdamW update on a single parameter block, decoupled weight decay,
/// bias-corrected moments, eps 1e-8. `t` is the 1-based step count.
pub fn adamw_update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
) {
    assert_eq!(p.len(), g.len());
    assert_eq!(p.len(), m.len());
    assert_eq!(p.len(), v.len());
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * (m_hat / (v_hat.sqrt() + 1e-8) + weight_decay * p[i]);
    }
}

/// Optimizer state keyed by parameter block name.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    pub state: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    pub t: u64,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// Apply one step to every block that has a gradient. Blocks whose name
    /// starts with a frozen prefix are skipped entirely.
    pub fn step(
        &mut self,
        model: &mut Model,
        grads: &GradStore,
        lr: f64,
        beta1: f64,
        beta2: f64,
        weight_decay: f64,
        frozen_prefix: Option<&str>,
    ) {
        self.t += 1;
        let t = self.t;
        let state = &mut self.state;
        model.visit_params_mut(&mut |name, p| {
            if let Some(prefix) = frozen_prefix {
                if name.starts_with(prefix) {
                    return;
                }
            }
            let Some(g) = grads.get(name) else { return };
            let (m, v) = state
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            adamw_update(p, g, m, v, t, lr, beta1, beta2, weight_decay);
        });
    }
}

/// Mean losses of one epoch plus whether augmentation was active.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub aug_active: bool,
    pub loss: LossReport,
}

/// Full training loop: GT-Paste per fading schedule, forward, loss,
/// backward, AdamW with the one-cycle schedule. Deterministic under
/// (seed, config).
pub fn train(cfg: &Config, scenes: &[SyntheticScene]) -> Result<(Model, Vec<EpochLog>), PipelineError> {
    assert!(!scenes.is_empty(), "training needs at least one scene");
    let mut model = Model::seeded(cfg, cfg.seed);
    let mut opt = AdamW::new();
    let bank = build_bank(scenes);
    let total_steps = cfg.epochs * scenes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0bad);
    let frozen = if cfg.ablation.e2e { None } else { Some("backbone2d") };
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let aug = fading_schedule(epoch, cfg.epochs, cfg.fade_epochs)
            && cfg.gt_paste_max > 0
            && !bank.is_empty();
        let mut sum = [0.0; 4]; // heatmap, query_cls, reg, total
        for scene in scenes {
            let s = gt_paste(scene, &bank, &mut rng, aug, cfg.gt_paste_max);
            let lr = one_cycle_lr(step, total_steps, cfg.lr_max);
            let b1 = one_cycle_beta1(step, total_steps, cfg.momentum);
            let tr = model.forward(
                cfg,
                &s.points,
                &s.image,
                &s.rig,
                true,
                cfg.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            )?;
            let (report, lg) = model.loss(cfg, &tr, &s.gt)?;
            let gs = model.backward(cfg, &tr, &lg, true)?;
            opt.step(&mut model, &gs, lr, b1, cfg.beta2, cfg.weight_decay, frozen);
            sum[0] += report.l_heatmap;
            sum[1] += report.l_query_cls;
            sum[2] += report.l_reg;
            sum[3] += report.total;
            step += 1;
        }
        let n = scenes.len() as f64;
        logs.push(EpochLog {
            epoch,
            aug_active: aug,
            loss: LossReport {
                l_cls: (sum[0] + sum[1]) / n,
                l_reg: sum[2] / n,
                w: cfg.reg_weight,
                total: sum[3] / n,
                l_heatmap: sum[0] / n,
                l_query_cls: sum[1] / n,
            },
        });
    }
    Ok((model, logs))
}

/// Eval-mode inference on one scene.
pub fn infer(
    model: &Model,
    cfg: &Config,
    scene: &SyntheticScene,
) -> Result<Vec<Detection>, PipelineError> {
    let tr = model.forward(cfg, &scene.points, &scene.image, &scene.rig, false, 0)?;
    Ok(model.detections(cfg, &tr))
}

/// Worker cap from DECORFUSE_THREADS, default the machine parallelism.
pub fn worker_count() -> usize {
    let hw = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("DECORFUSE_THREADS") {
        Ok(s) => s.parse::<usize>().ok().filter(|&n| n > 0).unwrap_or(hw).min(hw),
        Err(_) => hw,
    }
}

/// Inference over many scenes, fanned out across the worker cap; output
/// order matches input order.
pub fn infer_scenes(
    model: &Model,
    cfg: &Config,
    scenes: &[SyntheticScene],
) -> Result<Vec<Vec<Detection>>, PipelineError> {
    let workers = worker_count().min(scenes.len().max(1));
    if workers <= 1 {
        return scenes.iter().map(|s| infer(model, cfg, s)).collect();
    }
    let mut results: Vec<Option<Result<Vec<Detection>, PipelineError>>> =
        (0..scenes.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (chunk_idx, (scene_chunk, result_chunk)) in scenes
            .chunks(scenes.len().div_ceil(workers))
            .zip(results.chunks_mut(scenes.len().div_ceil(workers)))
            .enumerate()
        {
            let _ = chunk_idx;
            scope.spawn(move || {
                for (s, slot) in scene_chunk.iter().zip(result_chunk) {
                    *slot = Some(infer(model, cfg, s));
                }
            });
        }
    });
    results.into_iter().map(|r| r.expect("worker filled slot")).collect()
}

pub const CKPT_MAGIC: u32 = 0x4446_434B; // "DFCK"
pub const CKPT_VERSION: u32 = 1;

/// Versioned length-prefixed binary checkpoint: header, then one section
/// per parameter block (name, count, f64 little-endian values).
pub fn save_checkpoint(model: &Model, cfg: &Config, epoch: u64) -> Vec<u8> {
    let mut blocks: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |name, p| blocks.push((name.to_string(), p.to_vec())));
    let mut out = Vec::new();
    out.extend_from_slice(&CKPT_MAGIC.to_le_bytes());
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&cfg.hash().to_le_bytes());
    out.extend_from_slice(&epoch.to_le_bytes());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, values) in &blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PipelineError> {
        if self.pos + n > self.bytes.len() {
            return Err(PipelineError::BadCheckpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, PipelineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, PipelineError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Load a checkpoint against the active config; the stored config hash must
/// match and every parameter block must be present with its exact size.
pub fn load_checkpoint(bytes: &[u8], cfg: &Config) -> Result<(Model, u64), PipelineError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.u32()? != CKPT_MAGIC {
        return Err(PipelineError::BadCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(PipelineError::BadCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let hash = r.u64()?;
    if hash != cfg.hash() {
        return Err(PipelineError::ConfigMismatch {
            expected: cfg.hash(),
            got: hash,
        });
    }
    let epoch = r.u64()?;
    let n_blocks = r.u32()? as usize;
    let mut blocks: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for _ in 0..n_blocks {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| PipelineError::BadCheckpoint("non-utf8 block name".into()))?;
        let count = r.u64()? as usize;
        let raw = r.take(count * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blocks.insert(name, values);
    }
    let mut model = Model::seeded(cfg, cfg.seed);
    let mut missing = Vec::new();
    model.visit_params_mut(&mut |name, p| match blocks.get(name) {
        Some(v) if v.len() == p.len() => p.copy_from_slice(v),
        Some(v) => missing.push(format!("{name}: stored {} values, model wants {}", v.len(), p.len())),
        None => missing.push(format!("{name}: missing")),
    });
    if !missing.is_empty() {
        return Err(PipelineError::BadCheckpoint(missing.join("; ")));
    }
    Ok((model, epoch))
}

fn format_label(b: &Box3D, class_id: usize) -> String {
    format!(
        "{class_id} {} {} {} {} {} {} {}",
        b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw
    )
}

fn parse_label(line: &str) -> Result<(Box3D, usize), String> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 8 {
        return Err(format!("label needs 8 fields, got {}", f.len()));
    }
    let class_id: usize = f[0].parse().map_err(|_| "bad class id".to_string())?;
    let mut vals = [0.0f64; 7];
    for (i, s) in f[1..].iter().enumerate() {
        vals[i] = s.parse().map_err(|_| format!("bad number {s:?}"))?;
    }
    Ok((
        Box3D::new(vals[0], vals[1], vals[2], vals[3], vals[4], vals[5], vals[6]),
        class_id,
    ))
}

/// Write a scene directory: points.bin, image.ppm, calib.txt, labels.txt.
pub fn save_scene(dir: &Path, scene: &SyntheticScene) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("points.bin"), write_kitti_bin(&scene.points))?;
    std::fs::write(dir.join("image.ppm"), write_ppm(&scene.image))?;
    std::fs::write(dir.join("calib.txt"), scene.rig.to_kitti_text())?;
    let labels: String = scene
        .gt
        .iter()
        .map(|(b, c)| format_label(b, *c) + "\n")
        .collect();
    std::fs::write(dir.join("labels.txt"), labels)
}

/// Read a scene directory written by [`save_scene`]. Point coordinates pass
/// through f32 storage; everything else round-trips exactly.
pub fn load_scene(dir: &Path) -> Result<SyntheticScene, String> {
    let points = read_kitti_bin(&std::fs::read(dir.join("points.bin")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let image = read_pnm(&std::fs::read(dir.join("image.ppm")).map_err(|e| e.to_string())?)?;
    let calib = std::fs::read_to_string(dir.join("calib.txt")).map_err(|e| e.to_string())?;
    let rig = parse_kitti_calib(&calib).map_err(|e| e.to_string())?;
    let labels = std::fs::read_to_string(dir.join("labels.txt")).map_err(|e| e.to_string())?;
    let gt = labels
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(parse_label)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SyntheticScene {
        points,
        image,
        rig,
        gt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval_metrics::rotated_iou_3d;

    fn small_cfg() -> Config {
        Config {
            c_img: 4,
            d_model: 8,
            fc_out: 12,
            head_hidden: 8,
            sparse_channels: [4, 6, 6, 8],
            n_queries: 2,
            scene_clutter: 40,
            epochs: 2,
            fade_epochs: 1,
            ..Config::default()
        }
    }

    #[test]
    fn scene_generation_deterministic() {
        let cfg = small_cfg();
        let a = generate_scene(5, &cfg).unwrap();
        let b = generate_scene(5, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(6, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_objects_gives_clutter_only() {
        let mut cfg = small_cfg();
        cfg.scene_objects = [0, 0];
        let s = generate_scene(1, &cfg).unwrap();
        assert!(s.gt.is_empty());
        assert_eq!(s.points.len(), cfg.scene_clutter);
    }

    #[test]
    fn gt_boxes_disjoint_and_populated() {
        let cfg = small_cfg();
        for seed in 0..10 {
            let s = generate_scene(seed, &cfg).unwrap();
            for i in 0..s.gt.len() {
                for j in i + 1..s.gt.len() {
                    assert_eq!(rotated_iou_3d(&s.gt[i].0, &s.gt[j].0), 0.0);
                }
            }
            // every box holds at least the required surface points
            let bank = build_bank(&[s.clone()]);
            assert_eq!(bank.len(), s.gt.len());
            for obj in &bank {
                assert!(obj.local_points.len() >= 20);
            }
        }
    }

    #[test]
    fn gt_centers_inside_range() {
        let cfg = small_cfg();
        let spec = cfg.spec();
        for seed in 0..10 {
            let s = generate_scene(seed, &cfg).unwrap();
            for (b, _) in &s.gt {
                assert!(spec.coord_of(b.cx, b.cy, b.cz).is_some());
            }
        }
    }

    #[test]
    fn image_blob_color_marks_class() {
        let cfg = small_cfg();
        let s = generate_scene(3, &cfg).unwrap();
        for (b, cls) in &s.gt {
            let Projection::Pixel(px) =
                project(&LidarPoint::new(b.cx, b.cy, b.cz, 0.0), &s.rig)
            else {
                panic!("gt center must project");
            };
            let (y, x) = (px.v as usize, px.u as usize);
            let want = class_color(*cls);
            for ch in 0..3 {
                assert_eq!(s.image.at(y, x, ch), want[ch]);
            }
        }
    }

    #[test]
    fn gt_paste_disabled_is_identity() {
        let cfg = small_cfg();
        let s = generate_scene(7, &cfg).unwrap();
        let bank = build_bank(&[s.clone()]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(gt_paste(&s, &bank, &mut rng, false, 3), s);
        assert_eq!(gt_paste(&s, &[], &mut rng, true, 3), s);
    }

    #[test]
    fn gt_paste_grows_points_by_pasted_count() {
        let cfg = small_cfg();
        let s = generate_scene(11, &cfg).unwrap();
        // single-object bank so every paste adds a known point count
        let bank: Vec<BankObject> = build_bank(&[s.clone()]).into_iter().take(1).collect();
        let per_object = bank[0].local_points.len();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pasted = gt_paste(&s, &bank, &mut rng, true, 3);
        let added = pasted.gt.len() - s.gt.len();
        assert_eq!(pasted.points.len(), s.points.len() + added * per_object);
        assert_eq!(&pasted.points[..s.points.len()], &s.points[..]);
        if added > 0 {
            for i in 0..pasted.gt.len() {
                for j in i + 1..pasted.gt.len() {
                    assert_eq!(rotated_iou_bev(&pasted.gt[i].0, &pasted.gt[j].0), 0.0);
                }
            }
        }
    }

    #[test]
    fn fading_boundaries() {
        assert!(fading_schedule(14, 20, 5));
        assert!(!fading_schedule(15, 20, 5));
        assert!(!fading_schedule(19, 20, 5));
        for e in 0..20 {
            assert!(fading_schedule(e, 20, 0));
        }
    }

    #[test]
    fn one_cycle_endpoints_and_peak() {
        let lr_max = 2e-3;
        assert!((one_cycle_lr(0, 6, lr_max) - lr_max / 10.0).abs() < 1e-15);
        // ramp end at 0.4 * 5 = step 2
        assert!((one_cycle_lr(2, 6, lr_max) - lr_max).abs() < 1e-15);
        assert!((one_cycle_lr(5, 6, lr_max) - lr_max / 1000.0).abs() < 1e-12);
        assert!((one_cycle_beta1(0, 6, [0.85, 0.95]) - 0.95).abs() < 1e-15);
        assert!((one_cycle_beta1(2, 6, [0.85, 0.95]) - 0.85).abs() < 1e-15);
        assert!((one_cycle_beta1(5, 6, [0.85, 0.95]) - 0.95).abs() < 1e-12);
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity() {
        let mut p = vec![0.3, -0.7];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 1e-2, 0.9, 0.999, 0.0);
        assert_eq!(p, vec![0.3, -0.7]);
    }

    #[test]
    fn adamw_single_step_hand_computed() {
        let mut p = vec![1.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        let (g, lr, b1, b2, wd) = (0.5, 1e-2, 0.9, 0.999, 0.01);
        adamw_update(&mut p, &[g], &mut m, &mut v, 1, lr, b1, b2, wd);
        // bias correction cancels at t=1: m_hat = g, v_hat = g^2
        let expect = 1.0 - lr * (g / (g + 1e-8) + wd * 1.0);
        assert!((p[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn adamw_decay_only_shrinks() {
        let mut p = vec![2.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adamw_update(&mut p, &[0.0], &mut m, &mut v, 1, 0.1, 0.9, 0.999, 0.5);
        assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_training_keeps_params_when_decay_off() {
        let mut cfg = small_cfg();
        cfg.epochs = 1;
        cfg.fade_epochs = 0;
        cfg.lr_max = 0.0;
        cfg.weight_decay = 0.0;
        let scenes = vec![generate_scene(1, &cfg).unwrap()];
        let (model, _) = train(&cfg, &scenes).unwrap();
        assert_eq!(model, Model::seeded(&cfg, cfg.seed));
    }

    #[test]
    fn training_deterministic_and_freezes_backbone_when_e2e_off() {
        let mut cfg = small_cfg();
        cfg.epochs = 2;
        let scenes: Vec<_> = (0..2).map(|s| generate_scene(s, &cfg).unwrap()).collect();
        let (m1, log1) = train(&cfg, &scenes).unwrap();
        let (m2, log2) = train(&cfg, &scenes).unwrap();
        assert_eq!(log1, log2);
        assert_eq!(
            save_checkpoint(&m1, &cfg, 2),
            save_checkpoint(&m2, &cfg, 2)
        );
        // e2e on moves backbone weights
        let init = Model::seeded(&cfg, cfg.seed);
        assert_ne!(m1.backbone2d, init.backbone2d);
        // e2e off keeps them bitwise while the fusion side still trains
        let mut cfg_off = cfg.clone();
        cfg_off.ablation.e2e = false;
        let init_off = Model::seeded(&cfg_off, cfg_off.seed);
        let (m_off, _) = train(&cfg_off, &scenes).unwrap();
        assert_eq!(m_off.backbone2d, init_off.backbone2d);
        assert_ne!(m_off.cls_head, init_off.cls_head);
    }

    #[test]
    fn checkpoint_roundtrips_bitwise() {
        let cfg = small_cfg();
        let model = Model::seeded(&cfg, 77);
        let bytes = save_checkpoint(&model, &cfg, 9);
        let (loaded, epoch) = load_checkpoint(&bytes, &cfg).unwrap();
        assert_eq!(epoch, 9);
        assert_eq!(loaded, model);
        assert_eq!(save_checkpoint(&loaded, &cfg, 9), bytes);
    }

    #[test]
    fn checkpoint_rejects_wrong_config_and_corruption() {
        let cfg = small_cfg();
        let model = Model::seeded(&cfg, 1);
        let bytes = save_checkpoint(&model, &cfg, 0);
        let mut other = cfg.clone();
        other.seed = 123;
        assert!(matches!(
            load_checkpoint(&bytes, &other),
            Err(PipelineError::ConfigMismatch { .. })
        ));
        assert!(matches!(
            load_checkpoint(&bytes[..bytes.len() - 3], &cfg),
            Err(PipelineError::BadCheckpoint(_))
        ));
        assert!(matches!(
            load_checkpoint(&[0u8; 4], &cfg),
            Err(PipelineError::BadCheckpoint(_))
        ));
    }

    #[test]
    fn infer_is_dropout_free_and_bounded() {
        let cfg = small_cfg();
        let model = Model::seeded(&cfg, 2);
        let scene = generate_scene(9, &cfg).unwrap();
        let d1 = infer(&model, &cfg, &scene).unwrap();
        let d2 = infer(&model, &cfg, &scene).unwrap();
        assert_eq!(d1, d2);
        assert!(d1.len() <= cfg.n_queries * cfg.k_classes);
    }

    #[test]
    fn scene_dir_roundtrip() {
        let cfg = small_cfg();
        let scene = generate_scene(21, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_scene(dir.path(), &scene).unwrap();
        let loaded = load_scene(dir.path()).unwrap();
        assert_eq!(loaded.rig, scene.rig);
        assert_eq!(loaded.gt, scene.gt);
        assert_eq!(loaded.points.len(), scene.points.len());
        for (a, b) in loaded.points.iter().zip(&scene.points) {
            assert_eq!(a.x, b.x as f32 as f64);
            assert_eq!(a.r, b.r as f32 as f64);
        }
        // image quantized to 8 bits on disk
        for (a, b) in loaded.image.data.iter().zip(&scene.image.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
    }
}
