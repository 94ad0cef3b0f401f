use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::Scene;
use crate::geometry::{wrap_angle, Box3D};

/// Rotates the scene about the vertical axis through the sensor origin.
/// Points and centers move by `R_y(−φ)` and every yaw becomes `θ − φ`.
pub fn augment_rotate(scene: &Scene, phi: f64) -> Scene {
    let (s, c) = phi.sin_cos();
    let turn = |p: [f64; 3]| [c * p[0] - s * p[2], p[1], s * p[0] + c * p[2]];
    let mut out = scene.clone();
    for p in &mut out.points {
        *p = turn(*p);
    }
    for o in &mut out.objects {
        let [x, y, z] = turn(o.bbox.center());
        o.bbox = Box3D { x, y, z, yaw: wrap_angle(o.bbox.yaw - phi), ..o.bbox };
    }
    out.rerender();
    out
}

/// Mirrors the scene across the forward axis: `x ← −x`, `θ ← π − θ`.
pub fn augment_flip(scene: &Scene) -> Scene {
    let mut out = scene.clone();
    for p in &mut out.points {
        p[0] = -p[0];
    }
    for o in &mut out.objects {
        o.bbox.x = -o.bbox.x;
        o.bbox.yaw = wrap_angle(PI - o.bbox.yaw);
    }
    out.rerender();
    out
}

/// Scales points, box centers and box sizes about the origin.
pub fn augment_scale(scene: &Scene, factor: f64) -> Scene {
    let mut out = scene.clone();
    for p in &mut out.points {
        *p = p.map(|v| v * factor);
    }
    for o in &mut out.objects {
        let b = &mut o.bbox;
        for v in [&mut b.x, &mut b.y, &mut b.z, &mut b.h, &mut b.w, &mut b.l] {
            *v *= factor;
        }
    }
    out.rerender();
    out
}

/// Ranges for the random training-time augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub max_rotation: f64,
    pub flip_probability: f64,
    pub scale_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation: PI / 18.0,
            flip_probability: 0.5,
            scale_range: (0.95, 1.05),
        }
    }
}

pub fn random_augment(scene: &Scene, cfg: &AugmentConfig, rng: &mut impl Rng) -> Scene {
    let phi = cfg.max_rotation * (2.0 * rng.random::<f64>() - 1.0);
    let flip = rng.random::<f64>() < cfg.flip_probability;
    let s = cfg.scale_range.0 + (cfg.scale_range.1 - cfg.scale_range.0) * rng.random::<f64>();
    let mut out = augment_rotate(scene, phi);
    if flip {
        out = augment_flip(&out);
    }
    augment_scale(&out, s)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::{iou_3d, iou_bev};
    use crate::kitti::synth::{generate_synthetic_scene, SyntheticSceneConfig};

    fn scene(seed: u64) -> Scene {
        generate_synthetic_scene(&SyntheticSceneConfig { seed, object_count: (3, 4), ..Default::default() }).unwrap()
    }

    #[test]
    fn identities() {
        let s = scene(1);
        assert_eq!(augment_rotate(&s, 0.0), s);
        assert_eq!(augment_scale(&s, 1.0), s);
    }

    #[test]
    fn double_flip_restores_scene() {
        let s = scene(2);
        let back = augment_flip(&augment_flip(&s));
        assert_eq!(back.points, s.points);
        for (a, b) in back.objects.iter().zip(&s.objects) {
            assert_eq!((a.bbox.x, a.bbox.z), (b.bbox.x, b.bbox.z));
            assert!(wrap_angle(a.bbox.yaw - b.bbox.yaw).abs() < 1e-12);
        }
        assert_eq!(back.image, s.image);
    }

    #[test]
    fn rotation_preserves_pairwise_iou_and_containment() {
        let s = scene(3);
        let r = augment_rotate(&s, PI / 18.0);
        assert_eq!(r.points.len(), s.points.len());
        assert_eq!(r.objects.len(), s.objects.len());
        for i in 0..s.objects.len() {
            for j in 0..s.objects.len() {
                let before = iou_3d(&s.objects[i].bbox, &s.objects[j].bbox);
                let after = iou_3d(&r.objects[i].bbox, &r.objects[j].bbox);
                assert!((before - after).abs() <= 1e-9);
            }
            let inside = |sc: &Scene| sc.points.iter().filter(|&&p| sc.objects[i].bbox.contains(p)).count();
            let (a, b) = (inside(&s), inside(&r));
            assert!(a.abs_diff(b) <= 1, "{a} vs {b}");
        }
    }

    #[test]
    fn flip_keeps_footprints_matched_to_points() {
        let s = scene(4);
        let f = augment_flip(&s);
        for (o, fo) in s.objects.iter().zip(&f.objects) {
            let mirrored = o.bbox.corners_bev().vertices.iter().map(|v| [-v[0], v[1]]).collect::<Vec<_>>();
            for v in fo.bbox.corners_bev().vertices {
                assert!(mirrored.iter().any(|m| (m[0] - v[0]).abs() < 1e-9 && (m[1] - v[1]).abs() < 1e-9));
            }
            let n = s.points.iter().filter(|&&p| o.bbox.contains(p)).count();
            let m = f.points.iter().filter(|&&p| fo.bbox.contains(p)).count();
            assert_eq!(n, m);
        }
    }

    #[test]
    fn random_augment_preserves_counts() {
        let s = scene(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let a = random_augment(&s, &AugmentConfig::default(), &mut rng);
            assert_eq!(a.points.len(), s.points.len());
            assert_eq!(a.objects.len(), s.objects.len());
            for (x, y) in a.objects.iter().zip(&s.objects) {
                assert!((iou_bev(&x.bbox, &x.bbox) - 1.0).abs() < 1e-12);
                assert_eq!(x.class_id, y.class_id);
            }
        }
    }
}
