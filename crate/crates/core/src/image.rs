//! Small trainable 2D CNN producing the stride-4 feature map that decorates
//! the point cloud, plus the conv2d forward/backward kernels it is built from.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Dense H x W x C grid of f64 features, row-major, channel-interleaved:
/// `data[(y * w + x) * c + ch]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2 {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Grid2 {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, ch: usize) -> &mut f64 {
        &mut self.data[(y * self.w + x) * self.c + ch]
    }

    /// Feature vector at one cell.
    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.w + x) * self.c;
        &self.data[o..o + self.c]
    }
}

/// An RGB image: a [`Grid2`] with 3 channels and intensities in [0, 1].
pub type Image = Grid2;

/// Stride-4 feature map over the image plane.
pub type FeatureMap2D = Grid2;

#[derive(Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("input has {got} channels, layer expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image dims {h}x{w} not divisible by 4")]
    BadDims { h: usize, w: usize },
}

/// 2D convolution layer. Kernel layout `[ky][kx][c_in][c_out]`, zero padding
/// (k-1)/2, output spatial dims = ceil(in / stride).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2DLayer {
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2DLayer {
    pub fn zeros(k: usize, c_in: usize, c_out: usize, stride: usize) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        Self {
            k,
            c_in,
            c_out,
            stride,
            kernel: vec![0.0; k * k * c_in * c_out],
            bias: vec![0.0; c_out],
        }
    }

    /// Seeded uniform init on [-s, s] with s = sqrt(1/(k*k*c_in)).
    pub fn seeded(k: usize, c_in: usize, c_out: usize, stride: usize, seed: u64) -> Self {
        let mut layer = Self::zeros(k, c_in, c_out, stride);
        let s = (1.0 / (k * k * c_in) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in layer.kernel.iter_mut() {
            *w = rng.random_range(-s..s);
        }
        layer
    }

    #[inline]
    pub fn widx(&self, ky: usize, kx: usize, ci: usize, co: usize) -> usize {
        ((ky * self.k + kx) * self.c_in + ci) * self.c_out + co
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }
}

/// Cross-correlation with zero padding.
pub fn conv2d_forward(input: &Grid2, layer: &Conv2DLayer) -> Result<Grid2, ImageError> {
    if input.c != layer.c_in {
        return Err(ImageError::ChannelMismatch {
            expected: layer.c_in,
            got: input.c,
        });
    }
    let (oh, ow) = layer.out_dims(input.h, input.w);
    let pad = (layer.k - 1) / 2;
    let mut out = Grid2::zeros(oh, ow, layer.c_out);
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * layer.c_out;
            out.data[base..base + layer.c_out].copy_from_slice(&layer.bias);
            for ky in 0..layer.k {
                let iy = (oy * layer.stride + ky) as isize - pad as isize;
                if iy < 0 || iy as usize >= input.h {
                    continue;
                }
                for kx in 0..layer.k {
                    let ix = (ox * layer.stride + kx) as isize - pad as isize;
                    if ix < 0 || ix as usize >= input.w {
                        continue;
                    }
                    let cell = input.cell(iy as usize, ix as usize);
                    for (ci, &xv) in cell.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let wbase = layer.widx(ky, kx, ci, 0);
                        for co in 0..layer.c_out {
                            out.data[base + co] += xv * layer.kernel[wbase + co];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients produced by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct Conv2DGrads {
    pub input: Grid2,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Exact adjoint of [`conv2d_forward`].
pub fn conv2d_backward(
    input: &Grid2,
    layer: &Conv2DLayer,
    cotangent: &Grid2,
) -> Result<Conv2DGrads, ImageError> {
    let (oh, ow) = layer.out_dims(input.h, input.w);
    if cotangent.h != oh || cotangent.w != ow || cotangent.c != layer.c_out {
        return Err(ImageError::ShapeMismatch(format!(
            "cotangent {}x{}x{} vs expected {}x{}x{}",
            cotangent.h, cotangent.w, cotangent.c, oh, ow, layer.c_out
        )));
    }
    let pad = (layer.k - 1) / 2;
    let mut gin = Grid2::zeros(input.h, input.w, input.c);
    let mut gk = vec![0.0; layer.kernel.len()];
    let mut gb = vec![0.0; layer.c_out];
    for oy in 0..oh {
        for ox in 0..ow {
            let cot = cotangent.cell(oy, ox);
            for co in 0..layer.c_out {
                gb[co] += cot[co];
            }
            for ky in 0..layer.k {
                let iy = (oy * layer.stride + ky) as isize - pad as isize;
                if iy < 0 || iy as usize >= input.h {
                    continue;
                }
                for kx in 0..layer.k {
                    let ix = (ox * layer.stride + kx) as isize - pad as isize;
                    if ix < 0 || ix as usize >= input.w {
                        continue;
                    }
                    let in_cell = input.cell(iy as usize, ix as usize);
                    let gbase = ((iy as usize * input.w + ix as usize) * input.c) as usize;
                    for ci in 0..layer.c_in {
                        let wbase = layer.widx(ky, kx, ci, 0);
                        let mut acc = 0.0;
                        for co in 0..layer.c_out {
                            acc += cot[co] * layer.kernel[wbase + co];
                            gk[wbase + co] += cot[co] * in_cell[ci];
                        }
                        gin.data[gbase + ci] += acc;
                    }
                }
            }
        }
    }
    Ok(Conv2DGrads {
        input: gin,
        kernel: gk,
        bias: gb,
    })
}

/// Elementwise max(0, x).
pub fn relu_forward(input: &Grid2) -> Grid2 {
    Grid2 {
        h: input.h,
        w: input.w,
        c: input.c,
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Adjoint of ReLU; cotangent is zero exactly where the activation input < 0.
pub fn relu_backward(input: &Grid2, cotangent: &Grid2) -> Grid2 {
    Grid2 {
        h: input.h,
        w: input.w,
        c: input.c,
        data: input
            .data
            .iter()
            .zip(&cotangent.data)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

/// Parameters of the stride-4 backbone:
/// conv(3->c1, s2) -> ReLU -> conv(c1->c2, s2) -> ReLU -> conv(c2->c_img, s1).
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub conv1: Conv2DLayer,
    pub conv2: Conv2DLayer,
    pub conv3: Conv2DLayer,
}

impl BackboneParams {
    pub fn seeded(c_img: usize, seed: u64) -> Self {
        Self {
            conv1: Conv2DLayer::seeded(3, 3, 16, 2, seed.wrapping_add(1)),
            conv2: Conv2DLayer::seeded(3, 16, 32, 2, seed.wrapping_add(2)),
            conv3: Conv2DLayer::seeded(3, 32, c_img, 1, seed.wrapping_add(3)),
        }
    }

    pub fn c_img(&self) -> usize {
        self.conv3.c_out
    }
}

/// Activations cached for the backward pass.
pub struct BackboneTrace {
    pub a1: Grid2,
    pub r1: Grid2,
    pub a2: Grid2,
    pub r2: Grid2,
    pub out: Grid2,
}

pub fn backbone_forward(img: &Image, params: &BackboneParams) -> Result<FeatureMap2D, ImageError> {
    Ok(backbone_forward_traced(img, params)?.out)
}

pub fn backbone_forward_traced(
    img: &Image,
    params: &BackboneParams,
) -> Result<BackboneTrace, ImageError> {
    if img.h % 4 != 0 || img.w % 4 != 0 {
        return Err(ImageError::BadDims { h: img.h, w: img.w });
    }
    let a1 = conv2d_forward(img, &params.conv1)?;
    let r1 = relu_forward(&a1);
    let a2 = conv2d_forward(&r1, &params.conv2)?;
    let r2 = relu_forward(&a2);
    let out = conv2d_forward(&r2, &params.conv3)?;
    Ok(BackboneTrace { a1, r1, a2, r2, out })
}

/// Backbone parameter gradients plus the input image cotangent.
pub struct BackboneGrads {
    pub conv1: Conv2DGrads,
    pub conv2: Conv2DGrads,
    pub conv3: Conv2DGrads,
}

pub fn backbone_backward(
    img: &Image,
    params: &BackboneParams,
    trace: &BackboneTrace,
    cotangent: &Grid2,
) -> Result<BackboneGrads, ImageError> {
    let g3 = conv2d_backward(&trace.r2, &params.conv3, cotangent)?;
    let gr2 = relu_backward(&trace.a2, &g3.input);
    let g2 = conv2d_backward(&trace.r1, &params.conv2, &gr2)?;
    let gr1 = relu_backward(&trace.a1, &g2.input);
    let g1 = conv2d_backward(img, &params.conv1, &gr1)?;
    Ok(BackboneGrads {
        conv1: g1,
        conv2: g2,
        conv3: g3,
    })
}

/// Read a binary PPM (P6) or PGM (P5) into a normalized [`Image`]
/// (PGM replicated across 3 channels).
pub fn read_pnm(bytes: &[u8]) -> Result<Image, String> {
    let mut pos = 0usize;
    let mut token = || -> Result<String, String> {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(format!("unsupported magic {m}")),
    };
    let w: usize = token()?.parse().map_err(|e| format!("width: {e}"))?;
    let h: usize = token()?.parse().map_err(|e| format!("height: {e}"))?;
    let maxval: f64 = token()?.parse().map_err(|e| format!("maxval: {e}"))?;
    pos += 1; // single whitespace after maxval
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err("pixel data truncated".into());
    }
    let mut img = Grid2::zeros(h, w, 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let src = pos + (y * w + x) * channels + ch.min(channels - 1);
                *img.at_mut(y, x, ch) = bytes[src] as f64 / maxval;
            }
        }
    }
    Ok(img)
}

/// Write an [`Image`] as binary PPM (P6).
pub fn write_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    for y in 0..img.h {
        for x in 0..img.w {
            for ch in 0..3 {
                out.push((img.at(y, x, ch).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

/// Write a single-channel grid as binary PGM (P5), linearly mapped to [0, 255]
/// from the given value range.
pub fn write_pgm(grid: &[f64], h: usize, w: usize, lo: f64, hi: f64) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let span = (hi - lo).max(1e-12);
    for &v in grid.iter().take(h * w) {
        out.push((((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    out
}
