//! Sparse 3D convolution layers (submanifold and strided), BEV compression
//! and channel concatenation.
//!
//! Coordinates are hashed through an ordered map so forward, backward and
//! reductions run in a fixed order and results are bit-reproducible.

use crate::voxel::SparseTensor3D;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use thiserror::Error;

pub const KERNEL_EXTENT: usize = 3;
const TAPS: usize = 27;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparseConvMode {
    /// Output active set equals the input active set.
    Submanifold,
    /// Stride 2 on all axes; output sites are floor(c/2) of active inputs.
    Strided,
}

/// 3x3x3 sparse convolution layer. Kernel layout `[tap][c_in][c_out]` with
/// tap = ((di+1)*3 + (dj+1))*3 + (dk+1) over offsets in {-1,0,1}^3.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub mode: SparseConvMode,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum SparseConvError {
    #[error("input has {got} channels, layer expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("BEV maps {0}x{1} and {2}x{3} differ spatially")]
    SpatialMismatch(usize, usize, usize, usize),
}

impl SparseConvLayer {
    pub fn zeros(c_in: usize, c_out: usize, mode: SparseConvMode) -> Self {
        Self {
            c_in,
            c_out,
            mode,
            kernel: vec![0.0; TAPS * c_in * c_out],
            bias: vec![0.0; c_out],
        }
    }

    pub fn seeded(c_in: usize, c_out: usize, mode: SparseConvMode, seed: u64) -> Self {
        let mut layer = Self::zeros(c_in, c_out, mode);
        let s = (1.0 / (TAPS * c_in) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in layer.kernel.iter_mut() {
            *w = rng.random_range(-s..s);
        }
        layer
    }

    #[inline]
    pub fn widx(&self, tap: usize, ci: usize, co: usize) -> usize {
        (tap * self.c_in + ci) * self.c_out + co
    }

    /// Identity kernel: center tap is the identity matrix (requires
    /// c_in == c_out), all other taps zero.
    pub fn identity(c: usize, mode: SparseConvMode) -> Self {
        let mut layer = Self::zeros(c, c, mode);
        let center = 13; // (0+1)*9 + (0+1)*3 + (0+1)
        for ch in 0..c {
            let i = layer.widx(center, ch, ch);
            layer.kernel[i] = 1.0;
        }
        layer
    }
}

#[inline]
pub fn tap_index(di: isize, dj: isize, dk: isize) -> usize {
    (((di + 1) * 3 + (dj + 1)) * 3 + (dk + 1)) as usize
}

fn coord_index(st: &SparseTensor3D) -> BTreeMap<[usize; 3], usize> {
    st.coords
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect()
}

fn offset_coord(c: [usize; 3], d: [isize; 3], dims: [usize; 3]) -> Option<[usize; 3]> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let v = c[a] as isize + d[a];
        if v < 0 || v as usize >= dims[a] {
            return None;
        }
        out[a] = v as usize;
    }
    Some(out)
}

fn check_channels(st: &SparseTensor3D, layer: &SparseConvLayer) -> Result<(), SparseConvError> {
    if st.channels != layer.c_in {
        return Err(SparseConvError::ChannelMismatch {
            expected: layer.c_in,
            got: st.channels,
        });
    }
    Ok(())
}

/// Submanifold forward: active set preserved, each output gathers from active
/// neighbors within the 3x3x3 window.
pub fn subm_conv_forward(
    st: &SparseTensor3D,
    layer: &SparseConvLayer,
) -> Result<SparseTensor3D, SparseConvError> {
    assert_eq!(layer.mode, SparseConvMode::Submanifold);
    check_channels(st, layer)?;
    let index = coord_index(st);
    let mut out = SparseTensor3D {
        coords: st.coords.clone(),
        features: vec![0.0; st.len() * layer.c_out],
        dims: st.dims,
        channels: layer.c_out,
    };
    for (oi, &coord) in st.coords.iter().enumerate() {
        let orow_base = oi * layer.c_out;
        out.features[orow_base..orow_base + layer.c_out].copy_from_slice(&layer.bias);
        accumulate_window(st, layer, &index, coord, &mut out.features, orow_base);
    }
    Ok(out)
}

/// Strided forward: output coordinate set is the floor-halved coordinates of
/// the active inputs, dims ceil-halved; each output gathers from the window
/// centered at twice its coordinate.
pub fn strided_conv_forward(
    st: &SparseTensor3D,
    layer: &SparseConvLayer,
) -> Result<SparseTensor3D, SparseConvError> {
    assert_eq!(layer.mode, SparseConvMode::Strided);
    check_channels(st, layer)?;
    let index = coord_index(st);
    let out_dims = [
        st.dims[0].div_ceil(2),
        st.dims[1].div_ceil(2),
        st.dims[2].div_ceil(2),
    ];
    let out_coords: BTreeMap<[usize; 3], ()> = st
        .coords
        .iter()
        .map(|&c| ([c[0] / 2, c[1] / 2, c[2] / 2], ()))
        .collect();
    let coords: Vec<[usize; 3]> = out_coords.into_keys().collect();
    let mut out = SparseTensor3D {
        features: vec![0.0; coords.len() * layer.c_out],
        coords,
        dims: out_dims,
        channels: layer.c_out,
    };
    for oi in 0..out.coords.len() {
        let q = out.coords[oi];
        let center = [q[0] * 2, q[1] * 2, q[2] * 2];
        let orow_base = oi * layer.c_out;
        out.features[orow_base..orow_base + layer.c_out].copy_from_slice(&layer.bias);
        accumulate_window(st, layer, &index, center, &mut out.features, orow_base);
    }
    Ok(out)
}

fn accumulate_window(
    st: &SparseTensor3D,
    layer: &SparseConvLayer,
    index: &BTreeMap<[usize; 3], usize>,
    center: [usize; 3],
    out: &mut [f64],
    orow_base: usize,
) {
    for di in -1isize..=1 {
        for dj in -1isize..=1 {
            for dk in -1isize..=1 {
                let Some(src) = offset_coord(center, [di, dj, dk], st.dims) else {
                    continue;
                };
                let Some(&si) = index.get(&src) else {
                    continue;
                };
                let tap = tap_index(di, dj, dk);
                let srow = st.row(si);
                for (ci, &xv) in srow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wbase = layer.widx(tap, ci, 0);
                    for co in 0..layer.c_out {
                        out[orow_base + co] += xv * layer.kernel[wbase + co];
                    }
                }
            }
        }
    }
}

/// Gradients from [`sparse_conv_backward`].
#[derive(Debug, Clone)]
pub struct SparseConvGrads {
    pub input: SparseTensor3D,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Exact adjoint of the corresponding forward pass. `output` must be the
/// tensor returned by that forward (its coordinate set drives the scatter).
pub fn sparse_conv_backward(
    st: &SparseTensor3D,
    layer: &SparseConvLayer,
    output: &SparseTensor3D,
    cotangent: &SparseTensor3D,
) -> Result<SparseConvGrads, SparseConvError> {
    if cotangent.len() != output.len() || cotangent.channels != layer.c_out {
        return Err(SparseConvError::ShapeMismatch(format!(
            "cotangent {}x{} vs output {}x{}",
            cotangent.len(),
            cotangent.channels,
            output.len(),
            layer.c_out
        )));
    }
    let index = coord_index(st);
    let mut gin = st.zeros_like();
    let mut gk = vec![0.0; layer.kernel.len()];
    let mut gb = vec![0.0; layer.c_out];
    for (oi, &q) in output.coords.iter().enumerate() {
        let cot = cotangent.row(oi);
        for co in 0..layer.c_out {
            gb[co] += cot[co];
        }
        let center = match layer.mode {
            SparseConvMode::Submanifold => q,
            SparseConvMode::Strided => [q[0] * 2, q[1] * 2, q[2] * 2],
        };
        for di in -1isize..=1 {
            for dj in -1isize..=1 {
                for dk in -1isize..=1 {
                    let Some(src) = offset_coord(center, [di, dj, dk], st.dims) else {
                        continue;
                    };
                    let Some(&si) = index.get(&src) else {
                        continue;
                    };
                    let tap = tap_index(di, dj, dk);
                    let srow_base = si * st.channels;
                    for ci in 0..layer.c_in {
                        let xv = st.features[srow_base + ci];
                        let wbase = layer.widx(tap, ci, 0);
                        let mut acc = 0.0;
                        for co in 0..layer.c_out {
                            acc += cot[co] * layer.kernel[wbase + co];
                            gk[wbase + co] += cot[co] * xv;
                        }
                        gin.features[srow_base + ci] += acc;
                    }
                }
            }
        }
    }
    Ok(SparseConvGrads {
        input: gin,
        kernel: gk,
        bias: gb,
    })
}

/// Elementwise ReLU on sparse features.
pub fn sparse_relu_forward(st: &SparseTensor3D) -> SparseTensor3D {
    SparseTensor3D {
        coords: st.coords.clone(),
        features: st.features.iter().map(|&v| v.max(0.0)).collect(),
        dims: st.dims,
        channels: st.channels,
    }
}

pub fn sparse_relu_backward(input: &SparseTensor3D, cotangent: &SparseTensor3D) -> SparseTensor3D {
    SparseTensor3D {
        coords: input.coords.clone(),
        features: input
            .features
            .iter()
            .zip(&cotangent.features)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
        dims: input.dims,
        channels: input.channels,
    }
}

/// Dense X x Y x C bird's-eye-view grid; `data[(i * ny + j) * c + ch]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BEVFeatureMap {
    pub nx: usize,
    pub ny: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl BEVFeatureMap {
    pub fn zeros(nx: usize, ny: usize, c: usize) -> Self {
        Self {
            nx,
            ny,
            c,
            data: vec![0.0; nx * ny * c],
        }
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.ny + j) * self.c;
        &self.data[o..o + self.c]
    }

    pub fn cell_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let o = (i * self.ny + j) * self.c;
        &mut self.data[o..o + self.c]
    }
}

/// Compress the vertical axis into channels: cell (i, j) channel block
/// k*C..(k+1)*C holds voxel (i, j, k); zeros where inactive.
pub fn bev_flatten(st: &SparseTensor3D) -> BEVFeatureMap {
    let nz = st.dims[2];
    let mut bev = BEVFeatureMap::zeros(st.dims[0], st.dims[1], nz * st.channels);
    for (vi, &[i, j, k]) in st.coords.iter().enumerate() {
        let dst = (i * st.dims[1] + j) * bev.c + k * st.channels;
        bev.data[dst..dst + st.channels].copy_from_slice(st.row(vi));
    }
    bev
}

/// Adjoint of [`bev_flatten`]: gather the BEV cotangent back onto the sparse
/// active set.
pub fn bev_flatten_backward(st: &SparseTensor3D, bev_cotangent: &BEVFeatureMap) -> SparseTensor3D {
    let mut gin = st.zeros_like();
    for (vi, &[i, j, k]) in st.coords.iter().enumerate() {
        let src = (i * st.dims[1] + j) * bev_cotangent.c + k * st.channels;
        gin.row_mut(vi)
            .copy_from_slice(&bev_cotangent.data[src..src + st.channels]);
    }
    gin
}

/// Concatenate along channels, lidar block first.
pub fn channel_concat(
    lidar: &BEVFeatureMap,
    camera: &BEVFeatureMap,
) -> Result<BEVFeatureMap, SparseConvError> {
    if lidar.nx != camera.nx || lidar.ny != camera.ny {
        return Err(SparseConvError::SpatialMismatch(
            lidar.nx, lidar.ny, camera.nx, camera.ny,
        ));
    }
    let c = lidar.c + camera.c;
    let mut out = BEVFeatureMap::zeros(lidar.nx, lidar.ny, c);
    for i in 0..lidar.nx {
        for j in 0..lidar.ny {
            let cell = out.cell_mut(i, j);
            cell[..lidar.c].copy_from_slice(lidar.cell(i, j));
            cell[lidar.c..].copy_from_slice(camera.cell(i, j));
        }
    }
    Ok(out)
}

/// Split a concatenated cotangent back into the two blocks.
pub fn channel_concat_backward(
    cotangent: &BEVFeatureMap,
    c_lidar: usize,
) -> (BEVFeatureMap, BEVFeatureMap) {
    let c_camera = cotangent.c - c_lidar;
    let mut gl = BEVFeatureMap::zeros(cotangent.nx, cotangent.ny, c_lidar);
    let mut gc = BEVFeatureMap::zeros(cotangent.nx, cotangent.ny, c_camera);
    for i in 0..cotangent.nx {
        for j in 0..cotangent.ny {
            let cell = cotangent.cell(i, j);
            gl.cell_mut(i, j).copy_from_slice(&cell[..c_lidar]);
            gc.cell_mut(i, j).copy_from_slice(&cell[c_lidar..]);
        }
    }
    (gl, gc)
}
