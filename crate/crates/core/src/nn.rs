//! Shared dense building blocks: linear layers and softmax.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fully connected layer; weight layout `[in_dim][out_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn seeded(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut layer = Self::zeros(in_dim, out_dim);
        let s = (1.0 / in_dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in layer.weight.iter_mut() {
            *w = rng.random_range(-s..s);
        }
        layer
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut out = self.bias.clone();
        for (i, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let base = i * self.out_dim;
            for (o, w) in out.iter_mut().zip(&self.weight[base..base + self.out_dim]) {
                *o += xv * w;
            }
        }
        out
    }

    /// Adjoint: accumulates weight/bias grads into the given buffers and
    /// returns the input cotangent.
    pub fn backward(
        &self,
        x: &[f64],
        cotangent: &[f64],
        gw: &mut [f64],
        gb: &mut [f64],
    ) -> Vec<f64> {
        let mut gx = vec![0.0; self.in_dim];
        for (co, &g) in cotangent.iter().enumerate() {
            gb[co] += g;
        }
        for (i, &xv) in x.iter().enumerate() {
            let base = i * self.out_dim;
            let mut acc = 0.0;
            for (co, &g) in cotangent.iter().enumerate() {
                acc += g * self.weight[base + co];
                gw[base + co] += g * xv;
            }
            gx[i] = acc;
        }
        gx
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Adjoint of softmax given its output `p` and cotangent `g`:
/// dx_i = p_i * (g_i - sum_j p_j g_j).
pub fn softmax_backward(p: &[f64], cotangent: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(cotangent).map(|(a, b)| a * b).sum();
    p.iter()
        .zip(cotangent)
        .map(|(&pi, &gi)| pi * (gi - dot))
        .collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_backward_matches_finite_differences() {
        let layer = Linear::seeded(4, 3, 1);
        let x = vec![0.3, -0.7, 1.2, 0.0];
        let cot = vec![1.0, -0.5, 2.0];
        let mut gw = vec![0.0; 12];
        let mut gb = vec![0.0; 3];
        let gx = layer.backward(&x, &cot, &mut gw, &mut gb);
        let h = 1e-6;
        let loss = |layer: &Linear, x: &[f64]| -> f64 {
            layer.forward(x).iter().zip(&cot).map(|(a, b)| a * b).sum()
        };
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h);
            assert!((gx[i] - fd).abs() < 1e-6);
        }
        for i in 0..layer.weight.len() {
            let mut lp = layer.clone();
            lp.weight[i] += h;
            let mut lm = layer.clone();
            lm.weight[i] -= h;
            let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
            assert!((gw[i] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let logits = vec![0.2, -1.4, 3.0, 0.0];
        let p = softmax(&logits);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = logits.iter().map(|l| l + 7.5).collect();
        let q = softmax(&shifted);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let logits = vec![0.5, -0.2, 1.1];
        let cot = vec![0.3, -1.0, 0.7];
        let p = softmax(&logits);
        let gx = softmax_backward(&p, &cot);
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut lp = logits.clone();
            lp[i] += h;
            let mut lm = logits.clone();
            lm[i] -= h;
            let f = |l: &[f64]| -> f64 { softmax(l).iter().zip(&cot).map(|(a, b)| a * b).sum() };
            let fd = (f(&lp) - f(&lm)) / (2.0 * h);
            assert!((gx[i] - fd).abs() < 1e-6);
        }
    }
}
