//! Voxelization of decorated point clouds and the split into lidar- and
//! camera-feature sparse streams.

use crate::decoration::DecoratedPoint;
use std::collections::BTreeMap;

/// Voxel grid geometry: per-axis sizes and ranges, half-open [lo, hi).
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGridSpec {
    pub voxel_size: [f64; 3],
    pub range: [[f64; 2]; 3],
}

impl VoxelGridSpec {
    pub fn new(voxel_size: [f64; 3], range: [[f64; 2]; 3]) -> Self {
        for v in voxel_size {
            assert!(v > 0.0, "voxel sizes must be positive");
        }
        for [lo, hi] in range {
            assert!(hi > lo, "range upper bound must exceed lower bound");
        }
        Self { voxel_size, range }
    }

    pub fn kitti() -> Self {
        Self::new([0.05, 0.05, 0.1], [[0.0, 70.4], [-40.0, 40.0], [-3.0, 1.0]])
    }

    pub fn waymo() -> Self {
        Self::new(
            [0.1, 0.1, 0.15],
            [[-75.2, 75.2], [-75.2, 75.2], [-2.0, 4.0]],
        )
    }

    /// Small grid for laptop-scale runs: 64 x 64 x 8 cells.
    pub fn desk() -> Self {
        Self::new([0.5, 0.5, 0.5], [[0.0, 32.0], [-16.0, 16.0], [-2.0, 2.0]])
    }

    /// Cell counts per axis.
    pub fn dims(&self) -> [usize; 3] {
        let mut d = [0usize; 3];
        for a in 0..3 {
            d[a] = ((self.range[a][1] - self.range[a][0]) / self.voxel_size[a]).floor() as usize;
        }
        d
    }

    /// Voxel coordinate for a position, or None when out of range.
    pub fn coord_of(&self, x: f64, y: f64, z: f64) -> Option<[usize; 3]> {
        let pos = [x, y, z];
        let dims = self.dims();
        let mut c = [0usize; 3];
        for a in 0..3 {
            if pos[a] < self.range[a][0] || pos[a] >= self.range[a][1] {
                return None;
            }
            let idx = ((pos[a] - self.range[a][0]) / self.voxel_size[a]).floor() as usize;
            if idx >= dims[a] {
                return None;
            }
            c[a] = idx;
        }
        Some(c)
    }

    /// Center of a voxel in meters.
    pub fn voxel_center(&self, c: [usize; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for a in 0..3 {
            out[a] = self.range[a][0] + (c[a] as f64 + 0.5) * self.voxel_size[a];
        }
        out
    }
}

/// Sparse 3D tensor: lexicographically sorted unique coordinates with one
/// feature row per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor3D {
    pub coords: Vec<[usize; 3]>,
    /// Flat feature rows, `channels` values per coordinate.
    pub features: Vec<f64>,
    pub dims: [usize; 3],
    pub channels: usize,
}

impl SparseTensor3D {
    pub fn empty(dims: [usize; 3], channels: usize) -> Self {
        Self {
            coords: Vec::new(),
            features: Vec::new(),
            dims,
            channels,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// A zero-feature clone with the same active set (cotangent buffer).
    pub fn zeros_like(&self) -> Self {
        Self {
            coords: self.coords.clone(),
            features: vec![0.0; self.features.len()],
            dims: self.dims,
            channels: self.channels,
        }
    }
}

/// Group in-range points by voxel coordinate; out-of-range points are dropped.
/// Groups hold indices into the input slice and preserve input order; the map
/// iterates in lexicographic coordinate order.
pub fn voxelize(
    points: &[DecoratedPoint],
    spec: &VoxelGridSpec,
    max_points_per_voxel: Option<usize>,
) -> BTreeMap<[usize; 3], Vec<usize>> {
    let mut groups: BTreeMap<[usize; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        if let Some(c) = spec.coord_of(p.x, p.y, p.z) {
            let group = groups.entry(c).or_default();
            if max_points_per_voxel.is_none_or(|m| group.len() < m) {
                group.push(i);
            }
        }
    }
    groups
}

/// Per-voxel local features: the lidar stream gets (mean center offsets,
/// mean reflectance), the camera stream the mean of attached image features.
/// Both streams share the identical coordinate set.
pub fn build_voxel_features(
    points: &[DecoratedPoint],
    groups: &BTreeMap<[usize; 3], Vec<usize>>,
    spec: &VoxelGridSpec,
    c_img: usize,
) -> (SparseTensor3D, SparseTensor3D) {
    let dims = spec.dims();
    let n = groups.len();
    let mut lidar = SparseTensor3D {
        coords: Vec::with_capacity(n),
        features: vec![0.0; n * 4],
        dims,
        channels: 4,
    };
    let mut camera = SparseTensor3D {
        coords: Vec::with_capacity(n),
        features: vec![0.0; n * c_img],
        dims,
        channels: c_img,
    };
    for (i, (&coord, members)) in groups.iter().enumerate() {
        lidar.coords.push(coord);
        camera.coords.push(coord);
        let center = spec.voxel_center(coord);
        let inv = 1.0 / members.len() as f64;
        let lrow = lidar.row_mut(i);
        for &pi in members {
            let p = &points[pi];
            lrow[0] += (p.x - center[0]) * inv;
            lrow[1] += (p.y - center[1]) * inv;
            lrow[2] += (p.z - center[2]) * inv;
            lrow[3] += p.r * inv;
        }
        let crow = camera.row_mut(i);
        for &pi in members {
            for (o, &fv) in crow.iter_mut().zip(&points[pi].f) {
                *o += fv * inv;
            }
        }
    }
    (lidar, camera)
}

/// Route camera-stream voxel cotangents back to per-point feature cotangents
/// (mean pooling adjoint: divide by group size).
pub fn voxel_feature_backward(
    groups: &BTreeMap<[usize; 3], Vec<usize>>,
    camera_cotangent: &SparseTensor3D,
    point_cotangents: &mut [Vec<f64>],
) {
    for (i, members) in groups.values().enumerate() {
        let inv = 1.0 / members.len() as f64;
        let cot = camera_cotangent.row(i);
        for &pi in members {
            for (o, &g) in point_cotangents[pi].iter_mut().zip(cot) {
                *o += g * inv;
            }
        }
    }
}
