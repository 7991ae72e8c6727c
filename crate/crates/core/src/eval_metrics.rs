//! Rotated 3D IoU and average precision at 40 recall positions.

use crate::detect_loss::{Box3D, Detection};

/// Corners of the rotated BEV footprint, counter-clockwise.
fn bev_corners(b: &Box3D) -> [[f64; 2]; 4] {
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw) = (b.l / 2.0, b.w / 2.0);
    let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
    local.map(|[x, y]| [b.cx + c * x - s * y, b.cy + s * x + c * y])
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let j = (i + 1) % poly.len();
        acc += poly[i][0] * poly[j][1] - poly[j][0] * poly[i][1];
    }
    acc.abs() / 2.0
}

/// Sutherland-Hodgman clip of `subject` against the convex `clip` polygon
/// (counter-clockwise winding).
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let inside = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0;
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = inside(cur);
            let prev_in = inside(prev);
            if cur_in != prev_in {
                // intersection of prev->cur with the a->b line
                let dx = cur[0] - prev[0];
                let dy = cur[1] - prev[1];
                let denom = (b[0] - a[0]) * dy - (b[1] - a[1]) * dx;
                if denom.abs() > 1e-18 {
                    let t = ((b[0] - a[0]) * (a[1] - prev[1]) - (b[1] - a[1]) * (a[0] - prev[0]))
                        / denom;
                    output.push([prev[0] + t * dx, prev[1] + t * dy]);
                }
            }
            if cur_in {
                output.push(cur);
            }
        }
    }
    output
}

/// Rotated BEV intersection area of two box footprints.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let pa = bev_corners(a);
    let pb = bev_corners(b);
    polygon_area(&clip_polygon(&pa, &pb))
}

/// IoU of the rotated BEV footprints.
pub fn rotated_iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    let union = a.l * a.w + b.l * b.w - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Full 3D IoU: BEV polygon intersection times vertical overlap.
pub fn rotated_iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let inter_area = bev_intersection_area(a, b);
    let z_lo = (a.cz - a.h / 2.0).max(b.cz - b.h / 2.0);
    let z_hi = (a.cz + a.h / 2.0).min(b.cz + b.h / 2.0);
    let inter = inter_area * (z_hi - z_lo).max(0.0);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy matching of detections (score-descending, tie-break input order)
/// against same-class GTs; each GT is used at most once.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// Per detection, in score order: (score, is_true_positive).
    pub flags: Vec<(f64, bool)>,
    pub n_gt: usize,
}

pub fn match_detections(
    dets: &[Detection],
    gts: &[(Box3D, usize)],
    iou_threshold: f64,
    class: usize,
) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].class_id == class)
        .collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let gt_idx: Vec<usize> = (0..gts.len()).filter(|&i| gts[i].1 == class).collect();
    let mut used = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(order.len());
    for &di in &order {
        let mut best: Option<(f64, usize)> = None;
        for &gi in &gt_idx {
            if used[gi] {
                continue;
            }
            let iou = rotated_iou_3d(&dets[di].bbox, &gts[gi].0);
            if iou >= iou_threshold && best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, gi));
            }
        }
        match best {
            Some((_, gi)) => {
                used[gi] = true;
                flags.push((dets[di].score, true));
            }
            None => flags.push((dets[di].score, false)),
        }
    }
    MatchResult {
        flags,
        n_gt: gt_idx.len(),
    }
}

/// Average precision over 40 recall levels {1/40, ..., 40/40}: at each level
/// the maximum precision among operating points with recall >= level.
pub fn ap_40(
    dets: &[Detection],
    gts: &[(Box3D, usize)],
    iou_threshold: f64,
    class: usize,
) -> f64 {
    let m = match_detections(dets, gts, iou_threshold, class);
    if m.n_gt == 0 {
        return 0.0;
    }
    // precision/recall curve over the ranked list
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(m.flags.len()); // (recall, precision)
    let mut tp = 0usize;
    for (rank, &(_, is_tp)) in m.flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        let recall = tp as f64 / m.n_gt as f64;
        let precision = tp as f64 / (rank + 1) as f64;
        curve.push((recall, precision));
    }
    let mut ap = 0.0;
    for level in 1..=40 {
        let r = level as f64 / 40.0;
        let best = curve
            .iter()
            .filter(|(recall, _)| *recall >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0f64, f64::max);
        ap += best / 40.0;
    }
    ap
}
