//! Heatmap-based object query initialization and cross-attention fusion of
//! lidar queries against camera keys/values.

use crate::image::{conv2d_backward, conv2d_forward, relu_backward, relu_forward, Conv2DLayer, Grid2};
use crate::nn::{sigmoid, softmax, softmax_backward, Linear};
use crate::sparse_conv::BEVFeatureMap;
use thiserror::Error;

/// Per-class center likelihood grid, post-sigmoid values in (0, 1).
/// `data[(i * ny + j) * k + cls]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub nx: usize,
    pub ny: usize,
    pub k: usize,
    pub data: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(nx: usize, ny: usize, k: usize) -> Self {
        Self {
            nx,
            ny,
            k,
            data: vec![0.0; nx * ny * k],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, cls: usize) -> f64 {
        self.data[(i * self.ny + j) * self.k + cls]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize, cls: usize) -> &mut f64 {
        &mut self.data[(i * self.ny + j) * self.k + cls]
    }
}

/// A candidate object seeded from the heatmap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectQuery {
    pub i: usize,
    pub j: usize,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("class id {0} out of range for {1} classes")]
    BadClass(usize, usize),
    #[error("camera BEV has no cells")]
    EmptyKeySet,
}

/// Heatmap head: 3x3 conv (C -> 64) -> ReLU -> 1x1 conv (64 -> K) -> sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapHeadParams {
    pub conv1: Conv2DLayer,
    pub conv2: Conv2DLayer,
}

impl HeatmapHeadParams {
    pub fn seeded(c_bev: usize, hidden: usize, k: usize, seed: u64) -> Self {
        Self {
            conv1: Conv2DLayer::seeded(3, c_bev, hidden, 1, seed.wrapping_add(1)),
            conv2: Conv2DLayer::seeded(1, hidden, k, 1, seed.wrapping_add(2)),
        }
    }
}

fn bev_as_grid(bev: &BEVFeatureMap) -> Grid2 {
    Grid2 {
        h: bev.nx,
        w: bev.ny,
        c: bev.c,
        data: bev.data.clone(),
    }
}

pub struct HeatmapHeadTrace {
    pub a1: Grid2,
    pub r1: Grid2,
    /// Pre-sigmoid logits.
    pub logits: Grid2,
    pub heatmap: Heatmap,
}

pub fn heatmap_head_forward(bev: &BEVFeatureMap, params: &HeatmapHeadParams) -> HeatmapHeadTrace {
    let input = bev_as_grid(bev);
    let a1 = conv2d_forward(&input, &params.conv1).expect("head channel contract");
    let r1 = relu_forward(&a1);
    let logits = conv2d_forward(&r1, &params.conv2).expect("head channel contract");
    let heatmap = Heatmap {
        nx: bev.nx,
        ny: bev.ny,
        k: params.conv2.c_out,
        data: logits.data.iter().map(|&l| sigmoid(l)).collect(),
    };
    HeatmapHeadTrace {
        a1,
        r1,
        logits,
        heatmap,
    }
}

pub struct HeatmapHeadGrads {
    pub conv1_kernel: Vec<f64>,
    pub conv1_bias: Vec<f64>,
    pub conv2_kernel: Vec<f64>,
    pub conv2_bias: Vec<f64>,
    pub bev: BEVFeatureMap,
}

/// Backward through sigmoid and both convs. `prob_cotangent` is the loss
/// gradient with respect to the post-sigmoid heatmap values.
pub fn heatmap_head_backward(
    bev: &BEVFeatureMap,
    params: &HeatmapHeadParams,
    trace: &HeatmapHeadTrace,
    prob_cotangent: &[f64],
) -> HeatmapHeadGrads {
    let logit_cot = Grid2 {
        h: trace.logits.h,
        w: trace.logits.w,
        c: trace.logits.c,
        data: trace
            .heatmap
            .data
            .iter()
            .zip(prob_cotangent)
            .map(|(&p, &g)| g * p * (1.0 - p))
            .collect(),
    };
    let g2 = conv2d_backward(&trace.r1, &params.conv2, &logit_cot).expect("head shapes");
    let gr1 = relu_backward(&trace.a1, &g2.input);
    let input = bev_as_grid(bev);
    let g1 = conv2d_backward(&input, &params.conv1, &gr1).expect("head shapes");
    HeatmapHeadGrads {
        conv1_kernel: g1.kernel,
        conv1_bias: g1.bias,
        conv2_kernel: g2.kernel,
        conv2_bias: g2.bias,
        bev: BEVFeatureMap {
            nx: bev.nx,
            ny: bev.ny,
            c: bev.c,
            data: g1.input.data,
        },
    }
}

/// True when cell (i, j) of the class slice is >= all of its existing
/// 8 neighbors (border neighbors are ignored).
pub fn is_local_max(hm: &Heatmap, i: usize, j: usize, cls: usize) -> bool {
    let v = hm.at(i, j, cls);
    for di in -1isize..=1 {
        for dj in -1isize..=1 {
            if di == 0 && dj == 0 {
                continue;
            }
            let ni = i as isize + di;
            let nj = j as isize + dj;
            if ni < 0 || nj < 0 || ni as usize >= hm.nx || nj as usize >= hm.ny {
                continue;
            }
            if v < hm.at(ni as usize, nj as usize, cls) {
                return false;
            }
        }
    }
    true
}

fn sort_candidates(cands: &mut Vec<ObjectQuery>) {
    cands.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.i.cmp(&b.i))
            .then(a.j.cmp(&b.j))
    });
}

/// Local-max query selection: per class, candidates are plateau-or-peak cells
/// (>= all existing 8 neighbors), sorted by value descending with row-major
/// (i, then j) tie-break; the first `n` are kept.
pub fn select_queries(hm: &Heatmap, n: usize) -> Vec<ObjectQuery> {
    assert!(n >= 1);
    let mut out = Vec::new();
    for cls in 0..hm.k {
        let mut cands = Vec::new();
        for i in 0..hm.nx {
            for j in 0..hm.ny {
                if is_local_max(hm, i, j, cls) {
                    cands.push(ObjectQuery {
                        i,
                        j,
                        class_id: cls,
                        score: hm.at(i, j, cls),
                    });
                }
            }
        }
        sort_candidates(&mut cands);
        cands.truncate(n);
        out.extend(cands);
    }
    out
}

/// DeepFusion-style selection used when heatmap initialization is ablated:
/// the top n*K (cell, class) pairs by score, no local-max predicate.
pub fn select_queries_dense(hm: &Heatmap, n: usize) -> Vec<ObjectQuery> {
    let mut cands = Vec::new();
    for cls in 0..hm.k {
        for i in 0..hm.nx {
            for j in 0..hm.ny {
                cands.push(ObjectQuery {
                    i,
                    j,
                    class_id: cls,
                    score: hm.at(i, j, cls),
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
            .then(a.class_id.cmp(&b.class_id))
    });
    cands.truncate(n * hm.k);
    cands
}

/// BEV cell feature concatenated with the one-hot class code (omitted when
/// the category-embedding flag is off).
pub fn embed_category(
    q: &ObjectQuery,
    bev_cell_feature: &[f64],
    k: usize,
    category_embedding: bool,
) -> Result<Vec<f64>, FusionError> {
    if q.class_id >= k {
        return Err(FusionError::BadClass(q.class_id, k));
    }
    let mut out = bev_cell_feature.to_vec();
    if category_embedding {
        let mut one_hot = vec![0.0; k];
        one_hot[q.class_id] = 1.0;
        out.extend(one_hot);
    }
    Ok(out)
}

/// Cross-attention parameters: query/key/value projections, the post-attention
/// fully connected layer and the dropout rate on the correlation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub fc: Linear,
    pub dropout_rate: f64,
}

impl AttentionParams {
    pub fn seeded(
        q_in: usize,
        kv_in: usize,
        d_model: usize,
        fc_out: usize,
        dropout_rate: f64,
        seed: u64,
    ) -> Self {
        assert!((0.0..1.0).contains(&dropout_rate));
        Self {
            w_q: Linear::seeded(q_in, d_model, seed.wrapping_add(1)),
            w_k: Linear::seeded(kv_in, d_model, seed.wrapping_add(2)),
            w_v: Linear::seeded(kv_in, d_model, seed.wrapping_add(3)),
            fc: Linear::seeded(d_model, fc_out, seed.wrapping_add(4)),
            dropout_rate,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_q.out_dim
    }
}

/// splitmix64 over (seed, query, key) so dropout masks are deterministic and
/// independent of execution order.
fn dropout_uniform(seed: u64, qi: usize, ki: usize) -> f64 {
    let mut z = seed
        .wrapping_add((qi as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((ki as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Everything cached by the attention forward pass.
#[derive(Debug)]
pub struct AttentionTrace {
    /// Per-key projected rows, key count = camera_bev.nx * camera_bev.ny.
    pub k_rows: Vec<Vec<f64>>,
    pub v_rows: Vec<Vec<f64>>,
    pub q_rows: Vec<Vec<f64>>,
    /// Pre-dropout softmax rows (each sums to 1).
    pub attn: Vec<Vec<f64>>,
    /// Post-dropout rows actually used to weight the values.
    pub attn_dropped: Vec<Vec<f64>>,
    /// One attended d_model vector per query.
    pub output: Vec<Vec<f64>>,
}

/// Scaled dot-product cross-attention of embedded queries over camera BEV
/// cells, with seeded inverted dropout on the correlation matrix when
/// training.
pub fn cross_attention(
    embedded: &[Vec<f64>],
    camera_bev: &BEVFeatureMap,
    params: &AttentionParams,
    training: bool,
    rng_seed: u64,
) -> Result<AttentionTrace, FusionError> {
    let n_keys = camera_bev.nx * camera_bev.ny;
    if n_keys == 0 {
        return Err(FusionError::EmptyKeySet);
    }
    let d = params.d_model();
    let scale = 1.0 / (d as f64).sqrt();
    let mut k_rows = Vec::with_capacity(n_keys);
    let mut v_rows = Vec::with_capacity(n_keys);
    for i in 0..camera_bev.nx {
        for j in 0..camera_bev.ny {
            let cell = camera_bev.cell(i, j);
            k_rows.push(params.w_k.forward(cell));
            v_rows.push(params.w_v.forward(cell));
        }
    }
    let mut q_rows = Vec::with_capacity(embedded.len());
    let mut attn = Vec::with_capacity(embedded.len());
    let mut attn_dropped = Vec::with_capacity(embedded.len());
    let mut output = Vec::with_capacity(embedded.len());
    for (qi, e) in embedded.iter().enumerate() {
        let q = params.w_q.forward(e);
        let logits: Vec<f64> = k_rows
            .iter()
            .map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        let p = softmax(&logits);
        let dropped: Vec<f64> = if training && params.dropout_rate > 0.0 {
            let keep = 1.0 - params.dropout_rate;
            p.iter()
                .enumerate()
                .map(|(ki, &a)| {
                    if dropout_uniform(rng_seed, qi, ki) < params.dropout_rate {
                        0.0
                    } else {
                        a / keep
                    }
                })
                .collect()
        } else {
            p.clone()
        };
        let mut out = vec![0.0; d];
        for (ki, &a) in dropped.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (o, &v) in out.iter_mut().zip(&v_rows[ki]) {
                *o += a * v;
            }
        }
        q_rows.push(q);
        attn.push(p);
        attn_dropped.push(dropped);
        output.push(out);
    }
    Ok(AttentionTrace {
        k_rows,
        v_rows,
        q_rows,
        attn,
        attn_dropped,
        output,
    })
}

/// Gradients from [`cross_attention_backward`].
pub struct AttentionGrads {
    pub w_q_weight: Vec<f64>,
    pub w_q_bias: Vec<f64>,
    pub w_k_weight: Vec<f64>,
    pub w_k_bias: Vec<f64>,
    pub w_v_weight: Vec<f64>,
    pub w_v_bias: Vec<f64>,
    /// Cotangent of each embedded query vector.
    pub embedded: Vec<Vec<f64>>,
    /// Cotangent of the camera BEV map (through keys and values).
    pub camera_bev: BEVFeatureMap,
}

pub fn cross_attention_backward(
    embedded: &[Vec<f64>],
    camera_bev: &BEVFeatureMap,
    params: &AttentionParams,
    trace: &AttentionTrace,
    training: bool,
    output_cotangent: &[Vec<f64>],
) -> AttentionGrads {
    let d = params.d_model();
    let scale = 1.0 / (d as f64).sqrt();
    let n_keys = trace.k_rows.len();
    let keep = 1.0 - params.dropout_rate;
    let mut gq_rows = vec![vec![0.0; d]; embedded.len()];
    let mut gk_rows = vec![vec![0.0; d]; n_keys];
    let mut gv_rows = vec![vec![0.0; d]; n_keys];
    for (qi, cot) in output_cotangent.iter().enumerate() {
        // output = A_drop . V
        let mut ga = vec![0.0; n_keys];
        for ki in 0..n_keys {
            let a = trace.attn_dropped[qi][ki];
            if a != 0.0 {
                for (gv, &g) in gv_rows[ki].iter_mut().zip(cot) {
                    *gv += a * g;
                }
            }
            ga[ki] = trace.v_rows[ki]
                .iter()
                .zip(cot)
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        // through dropout: zeroed entries pass no gradient, kept scale 1/keep
        if training && params.dropout_rate > 0.0 {
            for ki in 0..n_keys {
                ga[ki] = if trace.attn_dropped[qi][ki] == 0.0 {
                    0.0
                } else {
                    ga[ki] / keep
                };
            }
        }
        let glogits = softmax_backward(&trace.attn[qi], &ga);
        for (ki, &gl) in glogits.iter().enumerate() {
            if gl == 0.0 {
                continue;
            }
            for c in 0..d {
                gq_rows[qi][c] += gl * scale * trace.k_rows[ki][c];
                gk_rows[ki][c] += gl * scale * trace.q_rows[qi][c];
            }
        }
    }
    let mut gw_q = vec![0.0; params.w_q.weight.len()];
    let mut gb_q = vec![0.0; params.w_q.bias.len()];
    let mut gw_k = vec![0.0; params.w_k.weight.len()];
    let mut gb_k = vec![0.0; params.w_k.bias.len()];
    let mut gw_v = vec![0.0; params.w_v.weight.len()];
    let mut gb_v = vec![0.0; params.w_v.bias.len()];
    let mut gembedded = Vec::with_capacity(embedded.len());
    for (e, gq) in embedded.iter().zip(&gq_rows) {
        gembedded.push(params.w_q.backward(e, gq, &mut gw_q, &mut gb_q));
    }
    let mut gbev = BEVFeatureMap::zeros(camera_bev.nx, camera_bev.ny, camera_bev.c);
    let mut ki = 0;
    for i in 0..camera_bev.nx {
        for j in 0..camera_bev.ny {
            let cell = camera_bev.cell(i, j);
            let gk = params.w_k.backward(cell, &gk_rows[ki], &mut gw_k, &mut gb_k);
            let gv = params.w_v.backward(cell, &gv_rows[ki], &mut gw_v, &mut gb_v);
            for (o, (a, b)) in gbev.cell_mut(i, j).iter_mut().zip(gk.iter().zip(&gv)) {
                *o += a + b;
            }
            ki += 1;
        }
    }
    AttentionGrads {
        w_q_weight: gw_q,
        w_q_bias: gb_q,
        w_k_weight: gw_k,
        w_k_bias: gb_k,
        w_v_weight: gw_v,
        w_v_bias: gb_v,
        embedded: gembedded,
        camera_bev: gbev,
    }
}

/// Per-query fusion: fc(attended) concatenated with the fused BEV cell.
pub fn fuse(
    attended: &[Vec<f64>],
    fused_bev: &BEVFeatureMap,
    queries: &[ObjectQuery],
    params: &AttentionParams,
) -> Vec<Vec<f64>> {
    attended
        .iter()
        .zip(queries)
        .map(|(a, q)| {
            let mut out = params.fc.forward(a);
            out.extend_from_slice(fused_bev.cell(q.i, q.j));
            out
        })
        .collect()
}

/// Backward of [`fuse`]: returns the attended cotangents and scatters the BEV
/// block back to the fused map; fc grads accumulate into the given buffers.
pub fn fuse_backward(
    attended: &[Vec<f64>],
    queries: &[ObjectQuery],
    params: &AttentionParams,
    cotangents: &[Vec<f64>],
    fc_gw: &mut [f64],
    fc_gb: &mut [f64],
    fused_bev_cotangent: &mut BEVFeatureMap,
) -> Vec<Vec<f64>> {
    let fc_out = params.fc.out_dim;
    attended
        .iter()
        .zip(queries)
        .zip(cotangents)
        .map(|((a, q), cot)| {
            let gatt = params.fc.backward(a, &cot[..fc_out], fc_gw, fc_gb);
            for (o, &g) in fused_bev_cotangent
                .cell_mut(q.i, q.j)
                .iter_mut()
                .zip(&cot[fc_out..])
            {
                *o += g;
            }
            gatt
        })
        .collect()
}
