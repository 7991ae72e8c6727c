//! Detection head targets, focal and smooth-L1 losses, box encoding/decoding
//! and BEV non-maximum suppression.

use crate::query_fusion::{Heatmap, ObjectQuery};
use thiserror::Error;

/// Oriented 3D box: center in meters, positive dims, yaw in (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Box3D {
    pub fn new(cx: f64, cy: f64, cz: f64, l: f64, w: f64, h: f64, yaw: f64) -> Self {
        assert!(l > 0.0 && w > 0.0 && h > 0.0, "box dims must be positive");
        Self {
            cx,
            cy,
            cz,
            l,
            w,
            h,
            yaw: normalize_yaw(yaw),
        }
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }
}

/// Wrap into (-pi, pi].
pub fn normalize_yaw(yaw: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut y = yaw % two_pi;
    if y <= -std::f64::consts::PI {
        y += two_pi;
    } else if y > std::f64::consts::PI {
        y -= two_pi;
    }
    y
}

/// Center-based box parameterization relative to a query cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionTarget {
    pub delta_x: f64,
    pub delta_y: f64,
    pub z: f64,
    pub log_l: f64,
    pub log_w: f64,
    pub log_h: f64,
    pub sin_yaw: f64,
    pub cos_yaw: f64,
}

pub const REG_DIM: usize = 8;

impl RegressionTarget {
    pub fn to_array(self) -> [f64; REG_DIM] {
        [
            self.delta_x,
            self.delta_y,
            self.z,
            self.log_l,
            self.log_w,
            self.log_h,
            self.sin_yaw,
            self.cos_yaw,
        ]
    }
}

/// Loss decomposition of the total objective `l_cls + w * l_reg`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_cls: f64,
    pub l_reg: f64,
    pub w: f64,
    pub total: f64,
    /// Heatmap part of l_cls, kept separate so either reading of the
    /// classification term can be inspected.
    pub l_heatmap: f64,
    /// Query-classification part of l_cls.
    pub l_query_cls: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("prediction and target shapes differ")]
    ShapeMismatch,
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// A scored oriented box with a class label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: Box3D,
}

/// Encode a box relative to a query cell center.
pub fn encode_box(
    b: &Box3D,
    cell: (usize, usize),
    cell_size: f64,
    origin: (f64, f64),
) -> RegressionTarget {
    let (i, j) = cell;
    RegressionTarget {
        delta_x: (b.cx - origin.0) / cell_size - (i as f64 + 0.5),
        delta_y: (b.cy - origin.1) / cell_size - (j as f64 + 0.5),
        z: b.cz,
        log_l: b.l.ln(),
        log_w: b.w.ln(),
        log_h: b.h.ln(),
        sin_yaw: b.yaw.sin(),
        cos_yaw: b.yaw.cos(),
    }
}

/// Inverse of [`encode_box`] applied to raw regression outputs.
pub fn decode_box(
    query: &ObjectQuery,
    reg: &[f64],
    cell_size: f64,
    origin: (f64, f64),
) -> Box3D {
    Box3D {
        cx: origin.0 + (query.i as f64 + 0.5 + reg[0]) * cell_size,
        cy: origin.1 + (query.j as f64 + 0.5 + reg[1]) * cell_size,
        cz: reg[2],
        l: reg[3].exp(),
        w: reg[4].exp(),
        h: reg[5].exp(),
        yaw: reg[6].atan2(reg[7]),
    }
}

/// Splat per-object Gaussians into a per-class center heatmap target;
/// overlaps take the elementwise max, the center cell is exactly 1.
pub fn gaussian_heatmap_target(
    gt: &[(Box3D, usize)],
    nx: usize,
    ny: usize,
    k: usize,
    cell_size: f64,
    origin: (f64, f64),
) -> Heatmap {
    let mut target = Heatmap::zeros(nx, ny, k);
    for (b, cls) in gt {
        let ci = ((b.cx - origin.0) / cell_size).floor();
        let cj = ((b.cy - origin.1) / cell_size).floor();
        if ci < 0.0 || cj < 0.0 || ci as usize >= nx || cj as usize >= ny {
            continue;
        }
        let (ci, cj) = (ci as usize, cj as usize);
        let footprint_radius_cells = 0.5 * (b.l * b.l + b.w * b.w).sqrt() / cell_size;
        let sigma = (footprint_radius_cells / 3.0).max(1.0);
        let reach = (3.0 * sigma).ceil() as isize;
        for di in -reach..=reach {
            for dj in -reach..=reach {
                let i = ci as isize + di;
                let j = cj as isize + dj;
                if i < 0 || j < 0 || i as usize >= nx || j as usize >= ny {
                    continue;
                }
                let v = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
                let slot = target.at_mut(i as usize, j as usize, *cls);
                *slot = slot.max(v);
            }
        }
    }
    target
}

/// Penalty-reduced focal loss over the center heatmap (alpha = 2, beta = 4),
/// normalized by max(1, #positive cells). Returns (loss, gradient with
/// respect to the predicted probabilities).
pub fn heatmap_focal_loss(pred: &Heatmap, target: &Heatmap) -> Result<(f64, Vec<f64>), LossError> {
    if pred.nx != target.nx || pred.ny != target.ny || pred.k != target.k {
        return Err(LossError::ShapeMismatch);
    }
    let n_pos = target.data.iter().filter(|&&t| t == 1.0).count();
    let norm = (n_pos.max(1)) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.data.len()];
    for (idx, (&p, &t)) in pred.data.iter().zip(&target.data).enumerate() {
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        if t == 1.0 {
            let q = 1.0 - p;
            loss += -(q * q) * p.ln();
            grad[idx] = (2.0 * q * p.ln() - q * q / p) / norm;
        } else {
            let w = (1.0 - t).powi(4);
            loss += -w * p * p * (1.0 - p).ln();
            grad[idx] = -w * (2.0 * p * (1.0 - p).ln() - p * p / (1.0 - p)) / norm;
        }
    }
    Ok((loss / norm, grad))
}

/// Standard focal loss (gamma = 2, alpha = 0.25) over per-class sigmoid
/// probabilities of the query classification head. Targets are one-hot rows
/// (all zeros for background). Returns (loss, gradient with respect to the
/// logits), normalized by the query count.
pub fn query_focal_loss(
    logits: &[Vec<f64>],
    targets: &[Vec<f64>],
) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    if logits.len() != targets.len() {
        return Err(LossError::LengthMismatch(logits.len(), targets.len()));
    }
    let norm = (logits.len().max(1)) as f64;
    let (gamma, alpha) = (2.0, 0.25);
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (lrow, trow) in logits.iter().zip(targets) {
        if lrow.len() != trow.len() {
            return Err(LossError::LengthMismatch(lrow.len(), trow.len()));
        }
        let mut grow = vec![0.0; lrow.len()];
        for (c, (&l, &t)) in lrow.iter().zip(trow).enumerate() {
            let p = crate::nn::sigmoid(l).clamp(1e-12, 1.0 - 1e-12);
            let (a_t, p_t) = if t == 1.0 { (alpha, p) } else { (1.0 - alpha, 1.0 - p) };
            let q = 1.0 - p_t;
            loss += -a_t * q.powf(gamma) * p_t.ln();
            // d/dp_t, then chain through p_t = p or 1-p and sigmoid'
            let dpt = -a_t * (-gamma * q.powf(gamma - 1.0) * p_t.ln() + q.powf(gamma) / p_t);
            let dp = if t == 1.0 { dpt } else { -dpt };
            grow[c] = dp * p * (1.0 - p) / norm;
        }
        grads.push(grow);
    }
    Ok((loss / norm, grads))
}

/// Mean smooth-L1: 0.5 d^2 for |d| < 1 else |d| - 0.5. Returns (loss,
/// gradient with respect to pred).
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>), LossError> {
    if pred.len() != target.len() {
        return Err(LossError::LengthMismatch(pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Ok((0.0, vec![]));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (idx, (&p, &t)) in pred.iter().zip(target).enumerate() {
        let d = p - t;
        if d.abs() < 1.0 {
            loss += 0.5 * d * d;
            grad[idx] = d / n;
        } else {
            loss += d.abs() - 0.5;
            grad[idx] = d.signum() / n;
        }
    }
    Ok((loss / n, grad))
}

/// Per-query assignment outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Assignment {
    Background,
    Matched {
        gt_index: usize,
        target: RegressionTarget,
    },
}

/// Match each query to the nearest same-class GT center within `radius` BEV
/// cells (Euclidean in cell units). Equidistant GTs break ties by the smaller
/// row-major center-cell index.
pub fn assign_targets(
    queries: &[ObjectQuery],
    gt: &[(Box3D, usize)],
    cell_size: f64,
    origin: (f64, f64),
    ny: usize,
    radius: f64,
) -> Vec<Assignment> {
    queries
        .iter()
        .map(|q| {
            let qx = q.i as f64 + 0.5;
            let qy = q.j as f64 + 0.5;
            let mut best: Option<(f64, usize, usize)> = None; // (dist, rowmajor, gt_idx)
            for (gi, (b, cls)) in gt.iter().enumerate() {
                if *cls != q.class_id {
                    continue;
                }
                let gx = (b.cx - origin.0) / cell_size;
                let gy = (b.cy - origin.1) / cell_size;
                let dist = ((gx - qx).powi(2) + (gy - qy).powi(2)).sqrt();
                if dist > radius {
                    continue;
                }
                let rowmajor = (gx.floor() as usize) * ny + gy.floor() as usize;
                let better = match &best {
                    None => true,
                    Some((bd, brm, _)) => dist < *bd || (dist == *bd && rowmajor < *brm),
                };
                if better {
                    best = Some((dist, rowmajor, gi));
                }
            }
            match best {
                Some((_, _, gi)) => Assignment::Matched {
                    gt_index: gi,
                    target: encode_box(&gt[gi].0, (q.i, q.j), cell_size, origin),
                },
                None => Assignment::Background,
            }
        })
        .collect()
}

/// Combine loss terms: l_cls = heatmap + query classification,
/// total = l_cls + w * l_reg.
pub fn total_loss(l_heatmap: f64, l_query_cls: f64, l_reg: f64, w: f64) -> LossReport {
    let l_cls = l_heatmap + l_query_cls;
    LossReport {
        l_cls,
        l_reg,
        w,
        total: l_cls + w * l_reg,
        l_heatmap,
        l_query_cls,
    }
}

/// Greedy BEV NMS by descending score, stable tie-break by input index.
pub fn bev_nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept.iter().any(|&j| {
            crate::eval_metrics::rotated_iou_bev(&dets[i].bbox, &dets[j].bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.sort();
    kept.into_iter().map(|i| dets[i]).collect()
}

/// Text row: `class score cx cy cz l w h yaw`.
pub fn format_detection(d: &Detection) -> String {
    format!(
        "{} {} {} {} {} {} {} {} {}",
        d.class_id, d.score, d.bbox.cx, d.bbox.cy, d.bbox.cz, d.bbox.l, d.bbox.w, d.bbox.h, d.bbox.yaw
    )
}

pub fn parse_detection(line: &str) -> Result<Detection, String> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 9 {
        return Err(format!("expected 9 fields, got {}", f.len()));
    }
    let num = |i: usize| -> Result<f64, String> {
        f[i].parse::<f64>().map_err(|e| format!("field {i}: {e}"))
    };
    Ok(Detection {
        class_id: f[0].parse().map_err(|e| format!("class: {e}"))?,
        score: num(1)?,
        bbox: Box3D::new(
            num(2)?,
            num(3)?,
            num(4)?,
            num(5)?,
            num(6)?,
            num(7)?,
            num(8)?,
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_gt_zero_target() {
        let t = gaussian_heatmap_target(&[], 8, 8, 2, 0.5, (0.0, -2.0));
        assert!(t.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_peak_is_one_at_center_cell() {
        let b = Box3D::new(2.25, 0.25, 0.0, 1.0, 1.0, 1.0, 0.3);
        let t = gaussian_heatmap_target(&[(b, 0)], 8, 8, 1, 0.5, (0.0, -2.0));
        // center cell: floor(2.25/0.5)=4, floor((0.25+2)/0.5)=4
        assert_eq!(t.at(4, 4, 0), 1.0);
    }

    #[test]
    fn overlapping_objects_take_elementwise_max() {
        let a = Box3D::new(2.0, 0.0, 0.0, 2.0, 1.0, 1.0, 0.0);
        let b = Box3D::new(2.5, 0.5, 0.0, 1.0, 2.0, 1.0, 0.0);
        let ta = gaussian_heatmap_target(&[(a, 0)], 8, 8, 1, 0.5, (0.0, -2.0));
        let tb = gaussian_heatmap_target(&[(b, 0)], 8, 8, 1, 0.5, (0.0, -2.0));
        let tab = gaussian_heatmap_target(&[(a, 0), (b, 0)], 8, 8, 1, 0.5, (0.0, -2.0));
        for i in 0..tab.data.len() {
            assert!((tab.data[i] - ta.data[i].max(tb.data[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn focal_perfect_prediction_limit() {
        let mut target = Heatmap::zeros(3, 3, 1);
        *target.at_mut(1, 1, 0) = 1.0;
        let mut pred = Heatmap::zeros(3, 3, 1);
        for v in pred.data.iter_mut() {
            *v = 1e-9;
        }
        *pred.at_mut(1, 1, 0) = 1.0 - 1e-9;
        let (loss, _) = heatmap_focal_loss(&pred, &target).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn focal_half_confidence_value() {
        // single positive cell with p = 0.5, no negatives:
        // (1-0.5)^2 * (-ln 0.5) = 0.173287
        let mut target = Heatmap::zeros(1, 1, 1);
        target.data[0] = 1.0;
        let mut pred = Heatmap::zeros(1, 1, 1);
        pred.data[0] = 0.5;
        let (loss, _) = heatmap_focal_loss(&pred, &target).unwrap();
        assert!((loss - 0.25 * std::f64::consts::LN_2).abs() < 1e-9);
        assert!((loss - 0.173287).abs() < 1e-6);
    }

    #[test]
    fn focal_monotone_in_confidence() {
        let mut target = Heatmap::zeros(1, 1, 1);
        target.data[0] = 1.0;
        let mut prev = f64::INFINITY;
        for p in [0.5, 0.75, 0.875, 0.9375] {
            let mut pred = Heatmap::zeros(1, 1, 1);
            pred.data[0] = p;
            let (loss, _) = heatmap_focal_loss(&pred, &target).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let mut target = Heatmap::zeros(2, 2, 1);
        *target.at_mut(0, 0, 0) = 1.0;
        *target.at_mut(1, 1, 0) = 0.6;
        let mut pred = Heatmap::zeros(2, 2, 1);
        pred.data = vec![0.7, 0.2, 0.4, 0.3];
        let (_, grad) = heatmap_focal_loss(&pred, &target).unwrap();
        let h = 1e-7;
        for i in 0..pred.data.len() {
            let mut pp = pred.clone();
            pp.data[i] += h;
            let mut pm = pred.clone();
            pm.data[i] -= h;
            let fd = (heatmap_focal_loss(&pp, &target).unwrap().0
                - heatmap_focal_loss(&pm, &target).unwrap().0)
                / (2.0 * h);
            assert!((grad[i] - fd).abs() / fd.abs().max(1.0) < 1e-5);
        }
    }

    #[test]
    fn query_focal_gradient_matches_finite_differences() {
        let logits = vec![vec![0.5, -1.2], vec![-0.3, 2.0]];
        let targets = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        let (_, grads) = query_focal_loss(&logits, &targets).unwrap();
        let h = 1e-6;
        for qi in 0..2 {
            for c in 0..2 {
                let mut lp = logits.clone();
                lp[qi][c] += h;
                let mut lm = logits.clone();
                lm[qi][c] -= h;
                let fd = (query_focal_loss(&lp, &targets).unwrap().0
                    - query_focal_loss(&lm, &targets).unwrap().0)
                    / (2.0 * h);
                assert!((grads[qi][c] - fd).abs() / fd.abs().max(1.0) < 1e-5);
            }
        }
    }

    #[test]
    fn smooth_l1_closed_forms() {
        assert_eq!(smooth_l1(&[1.0, 2.0], &[1.0, 2.0]).unwrap().0, 0.0);
        let (l, g) = smooth_l1(&[0.5], &[0.0]).unwrap();
        assert!((l - 0.125).abs() < 1e-15);
        assert!((g[0] - 0.5).abs() < 1e-15);
        let (l, g) = smooth_l1(&[2.0], &[0.0]).unwrap();
        assert!((l - 1.5).abs() < 1e-15);
        assert!((g[0] - 1.0).abs() < 1e-15);
        assert_eq!(
            smooth_l1(&[1.0], &[1.0, 2.0]),
            Err(LossError::LengthMismatch(1, 2))
        );
    }

    #[test]
    fn assignment_rules() {
        let cell = 0.5;
        let origin = (0.0, -2.0);
        // query at the GT's center cell
        let b = Box3D::new(2.25, 0.25, 0.0, 1.0, 1.0, 1.0, 0.0);
        let q = ObjectQuery {
            i: 4,
            j: 4,
            class_id: 0,
            score: 0.9,
        };
        let a = assign_targets(&[q], &[(b, 0)], cell, origin, 8, 2.0);
        match a[0] {
            Assignment::Matched { gt_index, target } => {
                assert_eq!(gt_index, 0);
                assert!(target.delta_x.abs() < 1e-12);
                assert!(target.delta_y.abs() < 1e-12);
                assert!((target.sin_yaw.powi(2) + target.cos_yaw.powi(2) - 1.0).abs() < 1e-9);
            }
            Assignment::Background => panic!("should match"),
        }
        // query 5 cells away -> background
        let far = ObjectQuery {
            i: 4,
            j: 9,
            class_id: 0,
            score: 0.9,
        };
        let a = assign_targets(&[far], &[(b, 0)], cell, origin, 16, 2.0);
        assert_eq!(a[0], Assignment::Background);
        // wrong class -> background
        let wrong = ObjectQuery {
            class_id: 1,
            ..q
        };
        let a = assign_targets(&[wrong], &[(b, 0)], cell, origin, 8, 2.0);
        assert_eq!(a[0], Assignment::Background);
    }

    #[test]
    fn equidistant_tie_break_by_row_major_index() {
        let cell = 1.0;
        let origin = (0.0, 0.0);
        // two GTs symmetric around the query center
        let g0 = Box3D::new(3.5, 2.5, 0.0, 1.0, 1.0, 1.0, 0.0); // cell (3,2)
        let g1 = Box3D::new(3.5, 4.5, 0.0, 1.0, 1.0, 1.0, 0.0); // cell (3,4)
        let q = ObjectQuery {
            i: 3,
            j: 3,
            class_id: 0,
            score: 0.5,
        };
        let a = assign_targets(&[q], &[(g1, 0), (g0, 0)], cell, origin, 8, 2.0);
        match a[0] {
            Assignment::Matched { gt_index, .. } => assert_eq!(gt_index, 1), // g0: smaller row-major
            _ => panic!(),
        }
    }

    #[test]
    fn total_loss_weighting() {
        let r = total_loss(0.6, 0.4, 0.5, 2.0);
        assert_eq!(r.l_cls, 1.0);
        assert_eq!(r.total, 2.0);
        assert_eq!(r.total, r.l_cls + r.w * r.l_reg);
        let r = total_loss(0.6, 0.4, 0.0, 2.0);
        assert_eq!(r.total, r.l_cls);
        let r = total_loss(0.6, 0.4, 0.5, 0.0);
        assert_eq!(r.total, r.l_cls);
    }

    #[test]
    fn encode_decode_roundtrip() {
        let cell = 0.5;
        let origin = (0.0, -16.0);
        let b = Box3D::new(10.3, -2.7, -0.4, 3.9, 1.6, 1.5, 0.7);
        let i = ((b.cx - origin.0) / cell).floor() as usize;
        let j = ((b.cy - origin.1) / cell).floor() as usize;
        let enc = encode_box(&b, (i, j), cell, origin);
        let q = ObjectQuery {
            i,
            j,
            class_id: 0,
            score: 1.0,
        };
        let back = decode_box(&q, &enc.to_array(), cell, origin);
        assert!((back.cx - b.cx).abs() < 1e-9);
        assert!((back.cy - b.cy).abs() < 1e-9);
        assert!((back.cz - b.cz).abs() < 1e-9);
        assert!((back.l - b.l).abs() < 1e-9);
        assert!((back.yaw - b.yaw).abs() < 1e-9);
    }

    #[test]
    fn decode_zero_regression_is_unit_box_at_cell_center() {
        let q = ObjectQuery {
            i: 2,
            j: 3,
            class_id: 0,
            score: 1.0,
        };
        let b = decode_box(&q, &[0.0; 8], 1.0, (0.0, 0.0));
        assert_eq!((b.cx, b.cy), (2.5, 3.5));
        assert_eq!((b.l, b.w, b.h), (1.0, 1.0, 1.0));
        assert_eq!(b.yaw, 0.0);
    }

    #[test]
    fn nms_basic() {
        let b = Box3D::new(5.0, 5.0, 0.0, 2.0, 2.0, 2.0, 0.0);
        let dets = vec![
            Detection {
                class_id: 0,
                score: 0.9,
                bbox: b,
            },
            Detection {
                class_id: 0,
                score: 0.8,
                bbox: b,
            },
        ];
        let kept = bev_nms(&dets, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);

        let far = Box3D::new(20.0, 5.0, 0.0, 2.0, 2.0, 2.0, 0.0);
        let dets = vec![
            Detection {
                class_id: 0,
                score: 0.9,
                bbox: b,
            },
            Detection {
                class_id: 1,
                score: 0.8,
                bbox: far,
            },
        ];
        assert_eq!(bev_nms(&dets, 0.5).len(), 2);
    }

    #[test]
    fn nms_matches_reference_scan() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let dets: Vec<Detection> = (0..20)
            .map(|_| Detection {
                class_id: 0,
                score: rng.random_range(0.0..1.0),
                bbox: Box3D::new(
                    rng.random_range(4.0..8.0),
                    rng.random_range(4.0..8.0),
                    0.0,
                    rng.random_range(1.0..3.0),
                    rng.random_range(1.0..3.0),
                    1.5,
                    rng.random_range(-3.0..3.0),
                ),
            })
            .collect();
        // O(n^2) reference
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
        let mut kept_ref: Vec<usize> = Vec::new();
        for &i in &order {
            if kept_ref.iter().all(|&j| {
                crate::eval_metrics::rotated_iou_bev(&dets[i].bbox, &dets[j].bbox) <= 0.3
            }) {
                kept_ref.push(i);
            }
        }
        kept_ref.sort();
        let want: Vec<Detection> = kept_ref.into_iter().map(|i| dets[i]).collect();
        assert_eq!(bev_nms(&dets, 0.3), want);
    }

    #[test]
    fn detection_text_roundtrip() {
        let d = Detection {
            class_id: 1,
            score: 0.875,
            bbox: Box3D::new(10.5, -3.25, 0.5, 4.0, 1.75, 1.5, -0.5),
        };
        let line = format_detection(&d);
        assert_eq!(parse_detection(&line).unwrap(), d);
        assert!(parse_detection("1 2 3").is_err());
    }
}
