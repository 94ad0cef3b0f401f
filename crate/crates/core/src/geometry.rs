//! Oriented 3D boxes in camera coordinates and their overlap measures.
//!
//! Camera frame: X right, Y down, Z forward. A box's `y` is its bottom face
//! (KITTI label convention), so it spans `[y − h, y]` vertically. The yaw
//! rotates the box about the Y axis; at yaw 0 the length `l` runs along X and
//! the width `w` along Z.
//!
//! ```
//! use lifusion::geometry::{iou_3d, Box3D};
//!
//! let a = Box3D::new([0.0, 1.0, 0.0], [1.0, 1.0, 1.0], 0.0).unwrap();
//! let b = Box3D::new([0.5, 1.0, 0.0], [1.0, 1.0, 1.0], 0.0).unwrap();
//! assert!((iou_3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
//! ```

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Intersections below this area are treated as empty.
pub const MIN_OVERLAP_AREA: f64 = 1e-9;

/// Projections with homogeneous depth at or below this are invalid.
pub const MIN_DEPTH: f64 = 1e-6;

/// Wraps an angle into `[−π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    } else if t < -PI {
        t += 2.0 * PI;
    }
    t
}

/// Oriented box: bottom-center `(x, y, z)`, size `(h, w, l)`, yaw about Y.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub yaw: f64,
}

impl Box3D {
    /// Validated constructor; `size` is `[h, w, l]` and the yaw is wrapped.
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self> {
        let [h, w, l] = size;
        if !(h > 0.0 && w > 0.0 && l > 0.0) || !size.iter().all(|v| v.is_finite()) {
            return Err(Error::Input(format!("box size must be positive and finite, got h={h} w={w} l={l}")));
        }
        if !center.iter().all(|v| v.is_finite()) || !yaw.is_finite() {
            return Err(Error::Input("box center and yaw must be finite".into()));
        }
        Ok(Self {
            x: center[0],
            y: center[1],
            z: center[2],
            h,
            w,
            l,
            yaw: wrap_angle(yaw),
        })
    }

    pub fn center(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn volume(&self) -> f64 {
        self.h * self.w * self.l
    }

    /// Ground-plane footprint, counter-clockwise in `(x, z)`.
    pub fn corners_bev(&self) -> Polygon2D {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (0.5 * self.l, 0.5 * self.w);
        let local = [(hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw)];
        Polygon2D {
            vertices: local
                .iter()
                .map(|&(lx, lz)| [self.x + c * lx + s * lz, self.z - s * lx + c * lz])
                .collect(),
        }
    }

    /// The eight corners in camera coordinates (bottom four first).
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let fp = self.corners_bev();
        let mut out = [[0.0; 3]; 8];
        for (i, v) in fp.vertices.iter().enumerate() {
            out[i] = [v[0], self.y, v[1]];
            out[i + 4] = [v[0], self.y - self.h, v[1]];
        }
        out
    }

    /// Point expressed in the box frame: `(along length, up from bottom, along width)`.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dz) = (p[0] - self.x, p[2] - self.z);
        [c * dx - s * dz, self.y - p[1], s * dx + c * dz]
    }

    /// Closed-box membership test.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let [lx, up, lz] = self.to_local(p);
        lx.abs() <= 0.5 * self.l && lz.abs() <= 0.5 * self.w && (0.0..=self.h).contains(&up)
    }
}

/// 3×4 camera projection acting on homogeneous points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionMatrix {
    pub m: [[f64; 4]; 3],
}

impl ProjectionMatrix {
    pub fn new(m: [[f64; 4]; 3]) -> Result<Self> {
        if !m.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::Input("projection matrix has non-finite entries".into()));
        }
        Ok(Self { m })
    }

    /// `[I₃ | 0]`.
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (o, row) in out.iter_mut().zip(&self.m) {
            *o = row[0] * p[0] + row[1] * p[1] + row[2] * p[2] + row[3];
        }
        out
    }
}

/// Pixel position of a projected point, or `None` behind the image plane.
pub fn project_point(p: [f64; 3], m: &ProjectionMatrix) -> Option<(f64, f64)> {
    let h = m.apply(p);
    (h[2] > MIN_DEPTH).then(|| (h[0] / h[2], h[1] / h[2]))
}

/// Projects every point; invalid ones get `((0, 0), false)`.
pub fn project_points(points: &[[f64; 3]], m: &ProjectionMatrix) -> Vec<((f64, f64), bool)> {
    points
        .iter()
        .map(|&p| match project_point(p, m) {
            Some(uv) => (uv, true),
            None => ((0.0, 0.0), false),
        })
        .collect()
}

/// Ground-plane polygon, vertices `[x, z]` in counter-clockwise order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Polygon2D {
    pub vertices: Vec<[f64; 2]>,
}

impl Polygon2D {
    pub fn is_empty(&self) -> bool {
        self.vertices.len() < 3
    }

    /// Shoelace area (positive for counter-clockwise order).
    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        if n < 3 {
            return 0.0;
        }
        let mut s = 0.0;
        for i in 0..n {
            let (a, b) = (self.vertices[i], self.vertices[(i + 1) % n]);
            s += a[0] * b[1] - b[0] * a[1];
        }
        0.5 * s
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let (cp, cq) = (cross(a, b, p), cross(a, b, q));
    let t = cp / (cp - cq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Sutherland–Hodgman intersection of two convex counter-clockwise polygons.
pub fn polygon_clip(subject: &Polygon2D, clip: &Polygon2D) -> Polygon2D {
    let mut output = subject.vertices.clone();
    let m = clip.vertices.len();
    for i in 0..m {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip.vertices[i], clip.vertices[(i + 1) % m]);
        let input = std::mem::take(&mut output);
        let n = input.len();
        for j in 0..n {
            let (cur, prev) = (input[j], input[(j + n - 1) % n]);
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    let poly = Polygon2D { vertices: output };
    if poly.is_empty() || poly.area() < MIN_OVERLAP_AREA {
        Polygon2D::default()
    } else {
        poly
    }
}

fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    polygon_clip(&a.corners_bev(), &b.corners_bev()).area()
}

/// Rotated footprint IoU on the ground plane.
pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.l * a.w + b.l * b.w - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn vertical_overlap(a: &Box3D, b: &Box3D) -> f64 {
    (a.y.min(b.y) - (a.y - a.h).max(b.y - b.h)).max(0.0)
}

/// Volumetric IoU of two oriented boxes.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let dy = vertical_overlap(a, b);
    if dy == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection(a, b) * dy;
    if inter == 0.0 {
        return 0.0;
    }
    (inter / (a.volume() + b.volume() - inter)).clamp(0.0, 1.0)
}

/// Box parameters living on a graph, one entry per box.
#[derive(Clone, Copy, Debug)]
pub struct DiffBoxes {
    pub x: Var,
    pub y: Var,
    pub z: Var,
    pub h: Var,
    pub w: Var,
    pub l: Var,
}

/// Axis-aligned volumetric IoU with both yaws ignored, differentiable in the
/// centers and sizes of `a`. Every `a` field must have one entry per `b` box.
pub fn iou_3d_axis_aligned_diff(g: &mut Graph, a: &DiffBoxes, b: &[Box3D]) -> Result<Var> {
    let shape = g.shape(a.x).to_vec();
    let n: usize = shape.iter().product();
    if n != b.len() {
        return Err(Error::Dimension(format!("{n} predicted boxes against {} targets", b.len())));
    }
    let konst = |g: &mut Graph, f: &dyn Fn(&Box3D) -> f64| {
        let t = Tensor::new(shape.clone(), b.iter().map(f).collect()).expect("shape");
        g.constant(t)
    };
    // Overlap of [ca − ext·lo_frac, ca + ext·hi_frac] against the constant interval.
    let overlap = |g: &mut Graph, c: Var, ext: Var, lo: f64, hi: f64, blo: Var, bhi: Var| -> Result<Var> {
        let lo_off = g.affine(ext, -lo, 0.0);
        let a_lo = g.add(c, lo_off)?;
        let hi_off = g.affine(ext, hi, 0.0);
        let a_hi = g.add(c, hi_off)?;
        let top = g.minimum(a_hi, bhi)?;
        let bottom = g.maximum(a_lo, blo)?;
        let d = g.sub(top, bottom)?;
        Ok(g.relu(d))
    };
    let bx_lo = konst(g, &|bb| bb.x - 0.5 * bb.l);
    let bx_hi = konst(g, &|bb| bb.x + 0.5 * bb.l);
    let by_lo = konst(g, &|bb| bb.y - bb.h);
    let by_hi = konst(g, &|bb| bb.y);
    let bz_lo = konst(g, &|bb| bb.z - 0.5 * bb.w);
    let bz_hi = konst(g, &|bb| bb.z + 0.5 * bb.w);
    let vol_b = konst(g, &|bb| bb.volume());

    let ox = overlap(g, a.x, a.l, 0.5, 0.5, bx_lo, bx_hi)?;
    let oy = overlap(g, a.y, a.h, 1.0, 0.0, by_lo, by_hi)?;
    let oz = overlap(g, a.z, a.w, 0.5, 0.5, bz_lo, bz_hi)?;
    let oxy = g.mul(ox, oy)?;
    let inter = g.mul(oxy, oz)?;
    let hw = g.mul(a.h, a.w)?;
    let vol_a = g.mul(hw, a.l)?;
    let vols = g.add(vol_a, vol_b)?;
    let union = g.sub(vols, inter)?;
    g.div(inter, union)
}

/// Monte-Carlo IoU estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub iou: f64,
    pub std_err: f64,
}

/// Uniform-sampling IoU over the joint axis-aligned bounding volume. Uses only
/// point-in-box tests, so it shares no code path with polygon clipping.
pub fn mc_iou_oracle(a: &Box3D, b: &Box3D, samples: usize, seed: u64) -> McEstimate {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in a.corners().iter().chain(b.corners().iter()) {
        for k in 0..3 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut either, mut both) = (0u64, 0u64);
    for _ in 0..samples {
        let p = [
            lo[0] + (hi[0] - lo[0]) * rng.random::<f64>(),
            lo[1] + (hi[1] - lo[1]) * rng.random::<f64>(),
            lo[2] + (hi[2] - lo[2]) * rng.random::<f64>(),
        ];
        let (ia, ib) = (a.contains(p), b.contains(p));
        if ia || ib {
            either += 1;
            if ia && ib {
                both += 1;
            }
        }
    }
    if either == 0 {
        return McEstimate { iou: 0.0, std_err: 0.0 };
    }
    let p = both as f64 / either as f64;
    McEstimate {
        iou: p,
        std_err: (p * (1.0 - p) / either as f64).sqrt(),
    }
}
