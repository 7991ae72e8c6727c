//! Central finite-difference verification for every differentiable op,
//! shared by the `gradcheck` CLI subcommand and the integration suite.
//!
//! Each suite builds random instances, contracts the op output with a random
//! cotangent to get a scalar, and compares the analytic gradient against
//! central differences with h = 1e-5 at 64-bit.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoration::{bilinear_sample, bilinear_sample_backward};
use crate::detect_loss::{heatmap_focal_loss, query_focal_loss, smooth_l1};
use crate::image::{conv2d_backward, conv2d_forward, relu_backward, relu_forward, Conv2DLayer, Grid2};
use crate::nn::Linear;
use crate::oracle::random_sparse;
use crate::query_fusion::{
    cross_attention, cross_attention_backward, heatmap_head_backward, heatmap_head_forward,
    AttentionParams, Heatmap, HeatmapHeadParams,
};
use crate::sparse_conv::{
    sparse_conv_backward, strided_conv_forward, subm_conv_forward, BEVFeatureMap, SparseConvLayer,
    SparseConvMode,
};

pub const FD_H: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

/// Outcome of one finite-difference suite.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

impl SuiteResult {
    fn new(name: &'static str, instances: usize, max_rel_err: f64) -> Self {
        Self {
            name,
            instances,
            max_rel_err,
            pass: max_rel_err < TOLERANCE,
        }
    }
}

/// Max relative error between analytic gradients and central differences of
/// `eval` over the parameter vector `x`. The denominator is clamped so that
/// round-off noise on near-zero gradients is not amplified.
fn fd_max_rel(x: &mut [f64], analytic: &[f64], eval: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut worst = 0.0f64;
    for idx in 0..x.len() {
        let saved = x[idx];
        x[idx] = saved + FD_H;
        let lp = eval(x);
        x[idx] = saved - FD_H;
        let lm = eval(x);
        x[idx] = saved;
        let num = (lp - lm) / (2.0 * FD_H);
        let a = analytic[idx];
        let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-3);
        worst = worst.max(rel);
    }
    worst
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn conv2d_suite(instances: usize, seed: u64) -> SuiteResult {
    let mut worst = 0.0f64;
    for t in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + t as u64);
        let stride = if t % 2 == 0 { 1 } else { 2 };
        let mut input = Grid2 {
            h: 5,
            w: 6,
            c: 3,
            data: rand_vec(&mut rng, 5 * 6 * 3),
        };
        let layer = Conv2DLayer::seeded(3, 3, 4, stride, seed ^ (t as u64) << 8);
        let (oh, ow) = layer.out_dims(input.h, input.w);
        let cot = Grid2 {
            h: oh,
            w: ow,
            c: 4,
            data: rand_vec(&mut rng, oh * ow * 4),
        };
        let grads = conv2d_backward(&input, &layer, &cot).unwrap();
        {
            let base = layer.clone();
            let mut kernel = base.kernel.clone();
            worst = worst.max(fd_max_rel(&mut kernel, &grads.kernel, &mut |k| {
                let mut l = base.clone();
                l.kernel = k.to_vec();
                dot(&conv2d_forward(&input, &l).unwrap().data, &cot.data)
            }));
            let mut bias = base.bias.clone();
            worst = worst.max(fd_max_rel(&mut bias, &grads.bias, &mut |b| {
                let mut l = base.clone();
                l.bias = b.to_vec();
                dot(&conv2d_forward(&input, &l).unwrap().data, &cot.data)
            }));
        }
        let shape = (input.h, input.w, input.c);
        let mut data = std::mem::take(&mut input.data);
        worst = worst.max(fd_max_rel(&mut data, &grads.input.data, &mut |d| {
            let g = Grid2 {
                h: shape.0,
                w: shape.1,
                c: shape.2,
                data: d.to_vec(),
            };
            dot(&conv2d_forward(&g, &layer).unwrap().data, &cot.data)
        }));
    }
    SuiteResult::new("conv2d", instances, worst)
}

fn relu_suite(instances: usize, seed: u64) -> SuiteResult {
    let mut worst = 0.0f64;
    for t in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + t as u64);
        // keep activations away from the kink so central differences are valid
        let data: Vec<f64> = (0..60)
            .map(|_| {
                let v: f64 = rng.random_range(0.1..1.0);
                if rng.random_range(0.0..1.0) < 0.5 {
                    -v
                } else {
                    v
                }
            })
            .collect();
        let mut input = Grid2 {
            h: 4,
            w: 5,
            c: 3,
            data,
        };
        let cot = Grid2 {
            h: 4,
            w: 5,
            c: 3,
            data: rand_vec(&mut rng, 60),
        };
        let analytic = relu_backward(&input, &cot);
        let mut data = std::mem::take(&mut input.data);
        worst = worst.max(fd_max_rel(&mut data, &analytic.data, &mut |d| {
            let g = Grid2 {
                h: 4,
                w: 5,
                c: 3,
                data: d.to_vec(),
            };
            dot(&relu_forward(&g).data, &cot.data)
        }));
    }
    SuiteResult::new("relu", instances, worst)
}

fn sparse_conv_suite(instances: usize, seed: u64) -> SuiteResult {
    let mut worst = 0.0f64;
    for t in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7000 + t as u64);
        let mode = if t % 2 == 0 {
            SparseConvMode::Submanifold
        } else {
            SparseConvMode::Strided
        };
        let st = random_sparse([5, 4, 4], 2, 0.35, seed + 90 + t as u64);
        if st.coords.is_empty() {
            continue;
        }
        let layer = SparseConvLayer::seeded(2, 3, mode, seed + 91 + t as u64);
        let fwd = |s: &crate::voxel::SparseTensor3D, l: &SparseConvLayer| match mode {
            SparseConvMode::Submanifold => subm_conv_forward(s, l).unwrap(),
            SparseConvMode::Strided => strided_conv_forward(s, l).unwrap(),
        };
        let out = fwd(&st, &layer);
        let mut cot = out.zeros_like();
        cot.features = rand_vec(&mut rng, out.features.len());
        let grads = sparse_conv_backward(&st, &layer, &out, &cot).unwrap();
        let mut kernel = layer.kernel.clone();
        worst = worst.max(fd_max_rel(&mut kernel, &grads.kernel, &mut |k| {
            let mut l = layer.clone();
            l.kernel = k.to_vec();
            dot(&fwd(&st, &l).features, &cot.features)
        }));
        let mut bias = layer.bias.clone();
        worst = worst.max(fd_max_rel(&mut bias, &grads.bias, &mut |b| {
            let mut l = layer.clone();
            l.bias = b.to_vec();
            dot(&fwd(&st, &l).features, &cot.features)
        }));
        let mut feats = st.features.clone();
        worst = worst.max(fd_max_rel(&mut feats, &grads.input.features, &mut |f| {
            let mut s = st.clone();
            s.features = f.to_vec();
            dot(&fwd(&s, &layer).features, &cot.features)
        }));
    }
    SuiteResult::new("sparse_conv", instances, worst)
}

fn bilinear_suite(instances: usize, seed: u64) -> SuiteResult {
    let mut worst = 0.0f64;
    for t in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 400 + t as u64);
        let (h, w, c) = (4, 5, 3);
        let fmap = Grid2 {
            h,
            w,
            c,
            data: rand_vec(&mut rng, h * w * c),
        };
        // interior fractional coordinates away from lattice lines
        let uf = rng.random_range(0.1..(w as f64 - 1.1));
        let vf = rng.random_range(0.1..(h as f64 - 1.1));
        let cot = rand_vec(&mut rng, c);
        let mut adjoint = Grid2::zeros(h, w, c);
        bilinear_sample_backward(&mut adjoint, uf, vf, &cot);
        let mut data = fmap.data.clone();
        worst = worst.max(fd_max_rel(&mut data, &adjoint.data, &mut |d| {
            let g = Grid2 {
                h,
                w,
                c,
                data: d.to_vec(),
            };
            dot(&bilinear_sample(&g, uf, vf), &cot)
        }));
    }
    SuiteResult::new("bilinear_sample", instances, worst)
}

fn attention_suite(instances: usize, seed: u64) -> SuiteResult {
    let mut worst = 0.0f64;
    for t in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 500 + t as u64);
        let training = t % 2 == 1;
        let (q_in, kv_in, d_model) = (5, 4, 6);
        let params = AttentionParams::seeded(q_in, kv_in, d_model, 7, 0.3, seed + 77 + t as u64);
        let embedded: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, q_in)).collect();
        let bev = BEVFeatureMap {
            nx: 2,
            ny: 3,
            c: kv_in,
            data: rand_vec(&mut rng, 2 * 3 * kv_in),
        };
        let drop_seed = seed + 1234 + t as u64;
        let trace = cross_attention(&embedded, &bev, &params, training, drop_seed).unwrap();
        let cot: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, d_model)).collect();
        let grads = cross_attention_backward(&embedded, &bev, &params, &trace, training, &cot);
        let scalar = |e: &[Vec<f64>], b: &BEVFeatureMap, p: &AttentionParams| {
            let tr = cross_attention(e, b, p, training, drop_seed).unwrap();
            tr.output
                .iter()
                .zip(&cot)
                .map(|(o, w)| dot(o, w))
                .sum::<f64>()
        };
        for (which, analytic) in [
            (0usize, &grads.w_q_weight),
            (1, &grads.w_k_weight),
            (2, &grads.w_v_weight),
        ] {
            let mut w = match which {
                0 => params.w_q.weight.clone(),
                1 => params.w_k.weight.clone(),
                _ => params.w_v.weight.clone(),
            };
            worst = worst.max(fd_max_rel(&mut w, analytic, &mut |wv| {
                let mut p = params.clone();
                match which {
                    0 => p.w_q.weight = wv.to_vec(),
                    1 => p.w_k.weight = wv.to_vec(),
                    _ => p.w_v.weight = wv.to_vec(),
                }
                scalar(&embedded, &bev, &p)
            }));
        }
        let mut flat: Vec<f64> = embedded.iter().flatten().copied().collect();
        let flat_grad: Vec<f64> = grads.embedded.iter().flatten().copied().collect();
        worst = worst.max(fd_max_rel(&mut flat, &flat_grad, &mut |f| {
            let e: Vec<Vec<f64>> = f.chunks(q_in).map(|c| c.to_vec()).collect();
            scalar(&e, &bev, &params)
        }));
        let mut bdata = bev.data.clone();
        worst = worst.max(fd_max_rel(&mut bdata, &grads.camera_bev.data, &mut |d| {
            let mut b = bev.clone();
            b.data = d.to_vec();
            scalar(&embedded, &b, &params)
        }));
    }
    SuiteResult::new("cross_attention", instances, worst)
}

fn heatmap_head_suite(instances: usize, seed: u64) -> SuiteResult {
    let mut worst = 0.0f64;
    for t in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 600 + t as u64);
        let (nx, ny, c_bev, hidden, k) = (4, 4, 5, 6, 2);
        let bev = BEVFeatureMap {
            nx,
            ny,
            c: c_bev,
            data: rand_vec(&mut rng, nx * ny * c_bev),
        };
        let params = HeatmapHeadParams::seeded(c_bev, hidden, k, seed + 55 + t as u64);
        let trace = heatmap_head_forward(&bev, &params);
        let cot = rand_vec(&mut rng, nx * ny * k);
        let grads = heatmap_head_backward(&bev, &params, &trace, &cot);
        let scalar = |b: &BEVFeatureMap, p: &HeatmapHeadParams| {
            dot(&heatmap_head_forward(b, p).heatmap.data, &cot)
        };
        for (which, analytic) in [
            (0usize, &grads.conv1_kernel),
            (1, &grads.conv1_bias),
            (2, &grads.conv2_kernel),
            (3, &grads.conv2_bias),
        ] {
            let mut w = match which {
                0 => params.conv1.kernel.clone(),
                1 => params.conv1.bias.clone(),
                2 => params.conv2.kernel.clone(),
                _ => params.conv2.bias.clone(),
            };
            worst = worst.max(fd_max_rel(&mut w, analytic, &mut |wv| {
                let mut p = params.clone();
                match which {
                    0 => p.conv1.kernel = wv.to_vec(),
                    1 => p.conv1.bias = wv.to_vec(),
                    2 => p.conv2.kernel = wv.to_vec(),
                    _ => p.conv2.bias = wv.to_vec(),
                }
                scalar(&bev, &p)
            }));
        }
        let mut bdata = bev.data.clone();
        worst = worst.max(fd_max_rel(&mut bdata, &grads.bev.data, &mut |d| {
            let mut b = bev.clone();
            b.data = d.to_vec();
            scalar(&b, &params)
        }));
    }
    SuiteResult::new("heatmap_head", instances, worst)
}

fn heatmap_focal_suite(instances: usize, seed: u64) -> SuiteResult {
    let mut worst = 0.0f64;
    for t in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 700 + t as u64);
        let (nx, ny, k) = (3, 4, 2);
        let n = nx * ny * k;
        let pred = Heatmap {
            nx,
            ny,
            k,
            data: (0..n).map(|_| rng.random_range(0.05..0.95)).collect(),
        };
        let mut target = Heatmap {
            nx,
            ny,
            k,
            data: (0..n).map(|_| rng.random_range(0.0..0.9)).collect(),
        };
        // at least one exact positive so the normalizer path is exercised
        let pos = rng.random_range(0..n);
        target.data[pos] = 1.0;
        let (_, grad) = heatmap_focal_loss(&pred, &target).unwrap();
        let mut data = pred.data.clone();
        worst = worst.max(fd_max_rel(&mut data, &grad, &mut |d| {
            let p = Heatmap {
                nx,
                ny,
                k,
                data: d.to_vec(),
            };
            heatmap_focal_loss(&p, &target).unwrap().0
        }));
    }
    SuiteResult::new("heatmap_focal_loss", instances, worst)
}

fn query_focal_suite(instances: usize, seed: u64) -> SuiteResult {
    let mut worst = 0.0f64;
    for t in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 800 + t as u64);
        let (nq, k) = (4, 3);
        let logits: Vec<Vec<f64>> = (0..nq).map(|_| rand_vec(&mut rng, k)).collect();
        let targets: Vec<Vec<f64>> = (0..nq)
            .map(|_| {
                (0..k)
                    .map(|_| if rng.random_range(0.0..1.0) < 0.3 { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let (_, grads) = query_focal_loss(&logits, &targets).unwrap();
        let mut flat: Vec<f64> = logits.iter().flatten().copied().collect();
        let flat_grad: Vec<f64> = grads.iter().flatten().copied().collect();
        worst = worst.max(fd_max_rel(&mut flat, &flat_grad, &mut |f| {
            let l: Vec<Vec<f64>> = f.chunks(k).map(|c| c.to_vec()).collect();
            query_focal_loss(&l, &targets).unwrap().0
        }));
    }
    SuiteResult::new("query_focal_loss", instances, worst)
}

fn smooth_l1_suite(instances: usize, seed: u64) -> SuiteResult {
    let mut worst = 0.0f64;
    for t in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 900 + t as u64);
        let n = 8;
        let target = rand_vec(&mut rng, n);
        // keep |pred - target| away from the quadratic/linear switch at 1
        let pred: Vec<f64> = target
            .iter()
            .map(|&tv| {
                let mut d: f64 = rng.random_range(-1.8..1.8);
                if (d.abs() - 1.0).abs() < 0.05 {
                    d *= 0.5;
                }
                tv + d
            })
            .collect();
        let (_, grad) = smooth_l1(&pred, &target).unwrap();
        let mut p = pred.clone();
        worst = worst.max(fd_max_rel(&mut p, &grad, &mut |pv| {
            smooth_l1(pv, &target).unwrap().0
        }));
    }
    SuiteResult::new("smooth_l1", instances, worst)
}

fn linear_suite(instances: usize, seed: u64) -> SuiteResult {
    let mut worst = 0.0f64;
    for t in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000 + t as u64);
        let (n_in, n_out) = (5, 4);
        let layer = Linear::seeded(n_in, n_out, seed + 33 + t as u64);
        let x = rand_vec(&mut rng, n_in);
        let cot = rand_vec(&mut rng, n_out);
        let mut gw = vec![0.0; layer.weight.len()];
        let mut gb = vec![0.0; n_out];
        let gx = layer.backward(&x, &cot, &mut gw, &mut gb);
        let mut w = layer.weight.clone();
        worst = worst.max(fd_max_rel(&mut w, &gw, &mut |wv| {
            let mut l = layer.clone();
            l.weight = wv.to_vec();
            dot(&l.forward(&x), &cot)
        }));
        let mut b = layer.bias.clone();
        worst = worst.max(fd_max_rel(&mut b, &gb, &mut |bv| {
            let mut l = layer.clone();
            l.bias = bv.to_vec();
            dot(&l.forward(&x), &cot)
        }));
        let mut xv = x.clone();
        worst = worst.max(fd_max_rel(&mut xv, &gx, &mut |x2| dot(&layer.forward(x2), &cot)));
    }
    SuiteResult::new("fc", instances, worst)
}

/// Run every finite-difference suite with `instances` random instances each.
pub fn run_all(instances: usize, seed: u64) -> Vec<SuiteResult> {
    vec![
        conv2d_suite(instances, seed),
        relu_suite(instances, seed),
        sparse_conv_suite(instances, seed),
        bilinear_suite(instances, seed),
        attention_suite(instances, seed),
        heatmap_head_suite(instances, seed),
        heatmap_focal_suite(instances, seed),
        query_focal_suite(instances, seed),
        smooth_l1_suite(instances, seed),
        linear_suite(instances, seed),
    ]
}
