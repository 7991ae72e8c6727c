//! Point-level fusion: attach interpolated image features to lidar points.
//!
//! Projection coordinates are fixed by calibration and treated as constants;
//! only the feature-map side of the sampling is differentiable.

use crate::geometry::{project, CalibRig, LidarPoint, Projection};
use crate::image::FeatureMap2D;
use thiserror::Error;

/// A lidar point with its attached image feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoratedPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
    pub f: Vec<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum DecorationError {
    #[error("feature map {fh}x{fw} is not stride-4 for image {ih}x{iw}")]
    StrideMismatch {
        fh: usize,
        fw: usize,
        ih: usize,
        iw: usize,
    },
}

/// Where a point's feature came from; cached so the backward pass can route
/// cotangents to the same four cells.
#[derive(Debug, Clone, Copy)]
pub enum SampleSite {
    /// Clamped feature-map coordinates used for bilinear interpolation.
    Bilinear { uf: f64, vf: f64 },
    /// Out of view or behind the camera: feature is the zero vector.
    OutOfView,
}

fn clamp_coord(c: f64, dim: usize) -> f64 {
    c.clamp(0.0, (dim - 1) as f64)
}

/// Bilinear interpolation of the four cells around (uf, vf), both in
/// feature-map scale. Coordinates are clamped to the grid before sampling.
pub fn bilinear_sample(fmap: &FeatureMap2D, uf: f64, vf: f64) -> Vec<f64> {
    let uf = clamp_coord(uf, fmap.w);
    let vf = clamp_coord(vf, fmap.h);
    let x0 = uf.floor() as usize;
    let y0 = vf.floor() as usize;
    let x1 = (x0 + 1).min(fmap.w - 1);
    let y1 = (y0 + 1).min(fmap.h - 1);
    let ax = uf - x0 as f64;
    let ay = vf - y0 as f64;
    let mut out = vec![0.0; fmap.c];
    let corners = [
        (y0, x0, (1.0 - ax) * (1.0 - ay)),
        (y0, x1, ax * (1.0 - ay)),
        (y1, x0, (1.0 - ax) * ay),
        (y1, x1, ax * ay),
    ];
    for (y, x, w) in corners {
        for (o, &v) in out.iter_mut().zip(fmap.cell(y, x)) {
            *o += w * v;
        }
    }
    out
}

/// Adjoint of [`bilinear_sample`]: scatter the feature cotangent back into
/// `fmap_cotangent` at the four corner cells.
pub fn bilinear_sample_backward(
    fmap_cotangent: &mut FeatureMap2D,
    uf: f64,
    vf: f64,
    cotangent: &[f64],
) {
    let w = fmap_cotangent.w;
    let h = fmap_cotangent.h;
    let uf = clamp_coord(uf, w);
    let vf = clamp_coord(vf, h);
    let x0 = uf.floor() as usize;
    let y0 = vf.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let ax = uf - x0 as f64;
    let ay = vf - y0 as f64;
    let corners = [
        (y0, x0, (1.0 - ax) * (1.0 - ay)),
        (y0, x1, ax * (1.0 - ay)),
        (y1, x0, (1.0 - ax) * ay),
        (y1, x1, ax * ay),
    ];
    for (y, x, wgt) in corners {
        let base = (y * w + x) * fmap_cotangent.c;
        for (ci, &g) in cotangent.iter().enumerate() {
            fmap_cotangent.data[base + ci] += wgt * g;
        }
    }
}

/// Decorate every point: project, sample the stride-4 map, zero-fill when the
/// point is behind the camera or lands outside the image.
pub fn decorate(
    points: &[LidarPoint],
    fmap: &FeatureMap2D,
    rig: &CalibRig,
    image_dims: (usize, usize),
) -> Result<(Vec<DecoratedPoint>, Vec<SampleSite>), DecorationError> {
    let (ih, iw) = image_dims;
    if fmap.h * 4 != ih || fmap.w * 4 != iw {
        return Err(DecorationError::StrideMismatch {
            fh: fmap.h,
            fw: fmap.w,
            ih,
            iw,
        });
    }
    let mut out = Vec::with_capacity(points.len());
    let mut sites = Vec::with_capacity(points.len());
    for p in points {
        let (f, site) = match project(p, rig) {
            Projection::Pixel(px)
                if px.u >= 0.0 && px.u < iw as f64 && px.v >= 0.0 && px.v < ih as f64 =>
            {
                let uf = px.u / 4.0;
                let vf = px.v / 4.0;
                (bilinear_sample(fmap, uf, vf), SampleSite::Bilinear { uf, vf })
            }
            _ => (vec![0.0; fmap.c], SampleSite::OutOfView),
        };
        out.push(DecoratedPoint {
            x: p.x,
            y: p.y,
            z: p.z,
            r: p.r,
            f,
        });
        sites.push(site);
    }
    Ok((out, sites))
}

/// Route per-point feature cotangents back to the feature map.
pub fn decorate_backward(
    sites: &[SampleSite],
    point_cotangents: &[Vec<f64>],
    fmap_cotangent: &mut FeatureMap2D,
) {
    for (site, cot) in sites.iter().zip(point_cotangents) {
        if let SampleSite::Bilinear { uf, vf } = site {
            bilinear_sample_backward(fmap_cotangent, *uf, *vf, cot);
        }
    }
}

pub const DUMP_MAGIC: u32 = 0x4446_5044; // "DFPD"
pub const DUMP_VERSION: u32 = 1;

/// Serialize decorated points: 16-byte header (magic, version, count, c_img)
/// then little-endian f32 rows of length 4 + c_img.
pub fn write_decorated_dump(points: &[DecoratedPoint], c_img: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&DUMP_MAGIC.to_le_bytes());
    out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    out.extend_from_slice(&(points.len() as u32).to_le_bytes());
    out.extend_from_slice(&(c_img as u32).to_le_bytes());
    for p in points {
        for v in [p.x, p.y, p.z, p.r] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &v in &p.f {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_decorated_dump(bytes: &[u8]) -> Result<Vec<DecoratedPoint>, String> {
    if bytes.len() < 16 {
        return Err("dump shorter than header".into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if u32_at(0) != DUMP_MAGIC {
        return Err("bad magic".into());
    }
    if u32_at(4) != DUMP_VERSION {
        return Err(format!("unsupported version {}", u32_at(4)));
    }
    let count = u32_at(8) as usize;
    let c_img = u32_at(12) as usize;
    let row = 4 + c_img;
    if bytes.len() != 16 + count * row * 4 {
        return Err("dump length does not match header".into());
    }
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        let base = 16 + i * row * 4;
        points.push(DecoratedPoint {
            x: f32_at(base),
            y: f32_at(base + 4),
            z: f32_at(base + 8),
            r: f32_at(base + 12),
            f: (0..c_img).map(|j| f32_at(base + 16 + 4 * j)).collect(),
        });
    }
    Ok(points)
}
