//! Independent reference implementations used to cross-check the fast
//! kernels: dense 3D convolution, Monte Carlo IoU and brute-force query
//! selection, plus random instance builders they operate on.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detect_loss::Box3D;
use crate::query_fusion::{Heatmap, ObjectQuery};
use crate::sparse_conv::{tap_index, SparseConvLayer};
use crate::voxel::SparseTensor3D;

/// Random sparse tensor with each site active independently with
/// probability `density` and features uniform in [-1, 1).
pub fn random_sparse(dims: [usize; 3], channels: usize, density: f64, seed: u64) -> SparseTensor3D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                if rng.random_range(0.0..1.0) < density {
                    coords.push([i, j, k]);
                }
            }
        }
    }
    let features = (0..coords.len() * channels)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    SparseTensor3D {
        coords,
        features,
        dims,
        channels,
    }
}

/// Dense 3D convolution oracle (stride 1 or 2, padding 1). Returns the full
/// output grid so sparse outputs can be checked site by site.
pub fn dense_conv_oracle(
    st: &SparseTensor3D,
    layer: &SparseConvLayer,
    stride: usize,
) -> BTreeMap<[usize; 3], Vec<f64>> {
    let dims = st.dims;
    let mut dense = vec![0.0; dims[0] * dims[1] * dims[2] * st.channels];
    for (vi, &[i, j, k]) in st.coords.iter().enumerate() {
        let base = ((i * dims[1] + j) * dims[2] + k) * st.channels;
        dense[base..base + st.channels].copy_from_slice(st.row(vi));
    }
    let odims = if stride == 1 {
        dims
    } else {
        [
            dims[0].div_ceil(2),
            dims[1].div_ceil(2),
            dims[2].div_ceil(2),
        ]
    };
    let mut out = BTreeMap::new();
    for oi in 0..odims[0] {
        for oj in 0..odims[1] {
            for ok in 0..odims[2] {
                let mut row = layer.bias.clone();
                for di in -1isize..=1 {
                    for dj in -1isize..=1 {
                        for dk in -1isize..=1 {
                            let si = oi as isize * stride as isize + di;
                            let sj = oj as isize * stride as isize + dj;
                            let sk = ok as isize * stride as isize + dk;
                            if si < 0
                                || sj < 0
                                || sk < 0
                                || si as usize >= dims[0]
                                || sj as usize >= dims[1]
                                || sk as usize >= dims[2]
                            {
                                continue;
                            }
                            let base = ((si as usize * dims[1] + sj as usize) * dims[2]
                                + sk as usize)
                                * st.channels;
                            let tap = tap_index(di, dj, dk);
                            for ci in 0..st.channels {
                                let xv = dense[base + ci];
                                for co in 0..layer.c_out {
                                    row[co] += xv * layer.kernel[layer.widx(tap, ci, co)];
                                }
                            }
                        }
                    }
                }
                out.insert([oi, oj, ok], row);
            }
        }
    }
    out
}

/// Monte Carlo IoU oracle by point sampling the union's bounding volume.
pub fn monte_carlo_iou(a: &Box3D, b: &Box3D, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inside = |bx: &Box3D, x: f64, y: f64, z: f64| -> bool {
        if (z - bx.cz).abs() > bx.h / 2.0 {
            return false;
        }
        let (s, c) = bx.yaw.sin_cos();
        let dx = x - bx.cx;
        let dy = y - bx.cy;
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= bx.l / 2.0 && ly.abs() <= bx.w / 2.0
    };
    let r = |bx: &Box3D| {
        let half = (bx.l.hypot(bx.w)) / 2.0;
        (
            bx.cx - half,
            bx.cx + half,
            bx.cy - half,
            bx.cy + half,
            bx.cz - bx.h / 2.0,
            bx.cz + bx.h / 2.0,
        )
    };
    let ra = r(a);
    let rb = r(b);
    let lo = (ra.0.min(rb.0), ra.2.min(rb.2), ra.4.min(rb.4));
    let hi = (ra.1.max(rb.1), ra.3.max(rb.3), ra.5.max(rb.5));
    let mut n_inter = 0usize;
    let mut n_union = 0usize;
    for _ in 0..samples {
        let x = rng.random_range(lo.0..hi.0);
        let y = rng.random_range(lo.1..hi.1);
        let z = rng.random_range(lo.2..hi.2);
        let ia = inside(a, x, y, z);
        let ib = inside(b, x, y, z);
        if ia && ib {
            n_inter += 1;
        }
        if ia || ib {
            n_union += 1;
        }
    }
    if n_union == 0 {
        0.0
    } else {
        n_inter as f64 / n_union as f64
    }
}

/// Brute-force query selection: scan every cell, test the 8-neighbor peak
/// predicate directly, sort with the declared tie-breaks, truncate.
pub fn select_queries_oracle(hm: &Heatmap, n: usize) -> Vec<ObjectQuery> {
    let mut out = Vec::new();
    for cls in 0..hm.k {
        let mut cands = Vec::new();
        for i in 0..hm.nx {
            for j in 0..hm.ny {
                let v = hm.at(i, j, cls);
                let mut ok = true;
                for (di, dj) in [
                    (-1isize, -1isize),
                    (-1, 0),
                    (-1, 1),
                    (0, -1),
                    (0, 1),
                    (1, -1),
                    (1, 0),
                    (1, 1),
                ] {
                    let ni = i as isize + di;
                    let nj = j as isize + dj;
                    if ni >= 0 && nj >= 0 && (ni as usize) < hm.nx && (nj as usize) < hm.ny {
                        ok &= v >= hm.at(ni as usize, nj as usize, cls);
                    }
                }
                if ok {
                    cands.push(ObjectQuery {
                        i,
                        j,
                        class_id: cls,
                        score: v,
                    });
                }
            }
        }
        cands.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then(a.i.cmp(&b.i))
                .then(a.j.cmp(&b.j))
        });
        cands.truncate(n);
        out.extend(cands);
    }
    out
}
