//! Calibration handling and lidar-to-image projection.
//!
//! Parses KITTI-style calibration text files, composes the camera-from-lidar
//! projection chain and projects lidar returns onto the image plane. All
//! geometry runs in f64; calibration is exact-critical even where the
//! detection stack downstream is tolerant.

use nalgebra::{Matrix3x4, Matrix4};
use thiserror::Error;

/// Points closer to the camera plane than this are treated as behind it.
pub const EPS_DEPTH: f64 = 1e-6;

/// A raw lidar return: position in the lidar frame plus reflectance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Reflectance, normalized to [0, 1].
    pub r: f64,
}

impl LidarPoint {
    pub fn new(x: f64, y: f64, z: f64, r: f64) -> Self {
        Self { x, y, z, r }
    }
}

/// Camera intrinsics + extrinsics for a single rig.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibRig {
    /// 3x4 camera projection in pixel units (KITTI `P2`).
    pub p_rect: Matrix3x4<f64>,
    /// 4x4 homogeneous rectification, rotation in the top-left block.
    pub r_rect: Matrix4<f64>,
    /// 4x4 homogeneous rigid transform lidar -> camera.
    pub t_velo_to_cam: Matrix4<f64>,
    /// Composed 3x4 chain `P_rect * R_rect * T_velo_to_cam`.
    pub t_cam_from_lidar: Matrix3x4<f64>,
}

/// Continuous pixel coordinates with the depth along the principal axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
    /// Meters along the camera principal axis; always > 0.
    pub depth: f64,
}

/// Outcome of projecting a lidar point through a rig.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Pixel(PixelCoord),
    BehindCamera,
}

#[derive(Debug, Error, PartialEq)]
pub enum CalibError {
    #[error("missing calibration key `{0}`")]
    MissingKey(String),
    #[error("key `{key}` expects {expected} values, got {got}")]
    WrongCount {
        key: String,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value under key `{0}`")]
    NonFiniteValue(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum BinError {
    #[error("velodyne record truncated: {0} bytes is not a multiple of 16")]
    TruncatedRecord(usize),
}

impl CalibRig {
    /// Build a rig from its parts, composing the projection chain.
    pub fn from_parts(
        p_rect: Matrix3x4<f64>,
        r_rect: Matrix4<f64>,
        t_velo_to_cam: Matrix4<f64>,
    ) -> Self {
        let t_cam_from_lidar = p_rect * r_rect * t_velo_to_cam;
        Self {
            p_rect,
            r_rect,
            t_velo_to_cam,
            t_cam_from_lidar,
        }
    }

    /// Serialize back to the KITTI text layout.
    pub fn to_kitti_text(&self) -> String {
        let fmt = |vals: &[f64]| {
            vals.iter()
                .map(|v| format!("{v:e}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let p: Vec<f64> = (0..3)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .map(|(i, j)| self.p_rect[(i, j)])
            .collect();
        let r: Vec<f64> = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| self.r_rect[(i, j)])
            .collect();
        let t: Vec<f64> = (0..3)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .map(|(i, j)| self.t_velo_to_cam[(i, j)])
            .collect();
        format!(
            "P2: {}\nR0_rect: {}\nTr_velo_to_cam: {}\n",
            fmt(&p),
            fmt(&r),
            fmt(&t)
        )
    }
}

fn parse_floats(key: &str, rest: &str, expected: usize) -> Result<Vec<f64>, CalibError> {
    let vals: Result<Vec<f64>, _> = rest.split_whitespace().map(str::parse::<f64>).collect();
    let vals = vals.map_err(|_| CalibError::NonFiniteValue(key.to_string()))?;
    if vals.len() != expected {
        return Err(CalibError::WrongCount {
            key: key.to_string(),
            expected,
            got: vals.len(),
        });
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(CalibError::NonFiniteValue(key.to_string()));
    }
    Ok(vals)
}

/// Parse a KITTI calibration file. Only `P2`, `R0_rect` and `Tr_velo_to_cam`
/// are consumed; other keys (P0, P1, P3, ...) are ignored.
pub fn parse_kitti_calib(text: &str) -> Result<CalibRig, CalibError> {
    let mut p2 = None;
    let mut r0 = None;
    let mut tr = None;
    for line in text.lines() {
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        match key.trim() {
            "P2" => p2 = Some(parse_floats("P2", rest, 12)?),
            "R0_rect" => r0 = Some(parse_floats("R0_rect", rest, 9)?),
            "Tr_velo_to_cam" => tr = Some(parse_floats("Tr_velo_to_cam", rest, 12)?),
            _ => {}
        }
    }
    let p2 = p2.ok_or_else(|| CalibError::MissingKey("P2".into()))?;
    let r0 = r0.ok_or_else(|| CalibError::MissingKey("R0_rect".into()))?;
    let tr = tr.ok_or_else(|| CalibError::MissingKey("Tr_velo_to_cam".into()))?;

    let p_rect = Matrix3x4::from_row_slice(&p2);
    let mut r_rect = Matrix4::identity();
    for i in 0..3 {
        for j in 0..3 {
            r_rect[(i, j)] = r0[i * 3 + j];
        }
    }
    let mut t_velo = Matrix4::identity();
    for i in 0..3 {
        for j in 0..4 {
            t_velo[(i, j)] = tr[i * 4 + j];
        }
    }
    Ok(CalibRig::from_parts(p_rect, r_rect, t_velo))
}

/// Project a lidar point into the image. Depth at or below [`EPS_DEPTH`]
/// yields `BehindCamera`.
pub fn project(p: &LidarPoint, rig: &CalibRig) -> Projection {
    let hom = nalgebra::Vector4::new(p.x, p.y, p.z, 1.0);
    let uvw = rig.t_cam_from_lidar * hom;
    let w = uvw[2];
    if w <= EPS_DEPTH {
        return Projection::BehindCamera;
    }
    Projection::Pixel(PixelCoord {
        u: uvw[0] / w,
        v: uvw[1] / w,
        depth: w,
    })
}

/// Decode a KITTI velodyne buffer: little-endian f32 quadruples (x, y, z, r).
pub fn read_kitti_bin(bytes: &[u8]) -> Result<Vec<LidarPoint>, BinError> {
    if bytes.len() % 16 != 0 {
        return Err(BinError::TruncatedRecord(bytes.len()));
    }
    Ok(bytes
        .chunks_exact(16)
        .map(|rec| {
            let f = |o: usize| f32::from_le_bytes(rec[o..o + 4].try_into().unwrap()) as f64;
            LidarPoint::new(f(0), f(4), f(8), f(12))
        })
        .collect())
}

/// Encode points in the velodyne layout (test and dump support).
pub fn write_kitti_bin(points: &[LidarPoint]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * 16);
    for p in points {
        for v in [p.x, p.y, p.z, p.r] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}
