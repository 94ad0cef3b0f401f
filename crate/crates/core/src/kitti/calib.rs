use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ProjectionMatrix;

/// Camera-2 projection, rectification and LiDAR-to-camera extrinsics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub p2: [[f64; 4]; 3],
    pub r0_rect: [[f64; 3]; 3],
    pub tr_velo_to_cam: [[f64; 4]; 3],
}

/// Tolerance on `‖RᵀR − I‖∞` for the rectification matrix.
pub const ORTHONORMAL_TOL: f64 = 1e-3;

fn expand4_3x3(m: &[[f64; 3]; 3]) -> [[f64; 4]; 4] {
    let mut out = [[0.0; 4]; 4];
    for i in 0..3 {
        out[i][..3].copy_from_slice(&m[i]);
    }
    out[3][3] = 1.0;
    out
}

fn expand4_3x4(m: &[[f64; 4]; 3]) -> [[f64; 4]; 4] {
    [m[0], m[1], m[2], [0.0, 0.0, 0.0, 1.0]]
}

fn matmul<const R: usize>(a: &[[f64; 4]; R], b: &[[f64; 4]; 4]) -> [[f64; 4]; R] {
    let mut out = [[0.0; 4]; R];
    for i in 0..R {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

impl CalibrationSet {
    /// `P2 = [I|0]`, `R0_rect = I`, `Tr_velo_to_cam = [I|0]`.
    pub fn identity() -> Self {
        Self {
            p2: ProjectionMatrix::identity().m,
            r0_rect: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            tr_velo_to_cam: ProjectionMatrix::identity().m,
        }
    }

    /// Maps rectified camera coordinates to pixels: `P2 · expand4(R0_rect)`.
    pub fn camera_projection(&self) -> ProjectionMatrix {
        ProjectionMatrix {
            m: matmul(&self.p2, &expand4_3x3(&self.r0_rect)),
        }
    }

    /// Velodyne point into rectified camera coordinates.
    pub fn velo_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let rt = matmul(&expand4_3x3(&self.r0_rect), &expand4_3x4(&self.tr_velo_to_cam));
        let mut out = [0.0; 3];
        for (o, row) in out.iter_mut().zip(&rt) {
            *o = row[0] * p[0] + row[1] * p[1] + row[2] * p[2] + row[3];
        }
        out
    }

    /// Inverse of [`velo_to_camera`](Self::velo_to_camera) assuming both
    /// rotations are orthonormal.
    pub fn camera_to_velo(&self, p: [f64; 3]) -> [f64; 3] {
        let r0 = &self.r0_rect;
        let mut q = [0.0; 3];
        for (j, qj) in q.iter_mut().enumerate() {
            *qj = (0..3).map(|i| r0[i][j] * p[i]).sum();
        }
        let tr = &self.tr_velo_to_cam;
        let d = [q[0] - tr[0][3], q[1] - tr[1][3], q[2] - tr[2][3]];
        let mut out = [0.0; 3];
        for (j, o) in out.iter_mut().enumerate() {
            *o = (0..3).map(|i| tr[i][j] * d[i]).sum();
        }
        out
    }
}

/// `M = P2 · expand4(R0_rect) · expand4(Tr_velo_to_cam)`: velodyne points to pixels.
pub fn compose_projection(c: &CalibrationSet) -> ProjectionMatrix {
    let cam = c.camera_projection();
    ProjectionMatrix {
        m: matmul(&cam.m, &expand4_3x4(&c.tr_velo_to_cam)),
    }
}

fn fill<const N: usize>(key: &str, values: Option<&Vec<f64>>) -> Result<[f64; N]> {
    match values {
        Some(v) if v.len() == N => Ok(std::array::from_fn(|i| v[i])),
        Some(v) => Err(Error::Parse(format!("{key}: expected {N} values, found {}", v.len()))),
        None => Err(Error::Parse(format!("{key}: expected {N} values, key missing"))),
    }
}

fn rows<const C: usize, const R: usize>(flat: &[f64]) -> [[f64; C]; R] {
    std::array::from_fn(|i| std::array::from_fn(|j| flat[i * C + j]))
}

/// Parses a KITTI `calib/*.txt` file. Keys other than `P2`, `R0_rect` and
/// `Tr_velo_to_cam` are ignored.
pub fn parse_calib(text: &str) -> Result<CalibrationSet> {
    let mut found: std::collections::HashMap<&str, Vec<f64>> = Default::default();
    for (lineno, line) in text.lines().enumerate() {
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        let key = key.trim();
        if !matches!(key, "P2" | "R0_rect" | "Tr_velo_to_cam") {
            continue;
        }
        let values = rest
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse(format!("line {}: {key}: bad value {t:?}", lineno + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        found.insert(key, values);
    }
    let p2: [f64; 12] = fill("P2", found.get("P2"))?;
    let r0: [f64; 9] = fill("R0_rect", found.get("R0_rect"))?;
    let tr: [f64; 12] = fill("Tr_velo_to_cam", found.get("Tr_velo_to_cam"))?;
    let calib = CalibrationSet {
        p2: rows(&p2),
        r0_rect: rows(&r0),
        tr_velo_to_cam: rows(&tr),
    };
    let r = &calib.r0_rect;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            if (dot - target).abs() > ORTHONORMAL_TOL {
                return Err(Error::Parse(format!("R0_rect is not orthonormal (entry {i},{j} of RᵀR is {dot})")));
            }
        }
    }
    Ok(calib)
}

/// Writes the three keys in KITTI order with shortest round-trip formatting.
pub fn serialize_calib(c: &CalibrationSet) -> String {
    let mut out = String::new();
    let mut line = |key: &str, vals: &mut dyn Iterator<Item = &f64>| {
        out.push_str(key);
        out.push(':');
        for v in vals {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    };
    line("P2", &mut c.p2.iter().flatten());
    line("R0_rect", &mut c.r0_rect.iter().flatten());
    line("Tr_velo_to_cam", &mut c.tr_velo_to_cam.iter().flatten());
    out
}
