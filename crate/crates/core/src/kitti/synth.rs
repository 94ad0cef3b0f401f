use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::calib::CalibrationSet;
use super::scene::{RenderSpec, Scene, SceneObject, DISTRACTOR_CLASS, TARGET_CLASS};
use crate::error::{Error, Result};
use crate::geometry::{iou_bev, Box3D};

/// Velodyne axes (forward, left, up) expressed in the camera frame.
pub const VELO_TO_CAM: [[f64; 4]; 3] = [[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0], [1.0, 0.0, 0.0, 0.0]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneConfig {
    pub x_range: (f64, f64),
    pub z_range: (f64, f64),
    pub image_height: usize,
    pub image_width: usize,
    /// Camera-frame height of the ground plane (Y points down).
    pub ground_y: f64,
    /// Inclusive bounds on the number of objects.
    pub object_count: (usize, usize),
    /// Probability that an object belongs to the target class.
    pub target_fraction: f64,
    pub height_range: (f64, f64),
    pub width_range: (f64, f64),
    pub length_range: (f64, f64),
    pub yaw_range: (f64, f64),
    /// Free space kept between footprints and to the scene border.
    pub min_gap: f64,
    pub points_per_object: usize,
    pub ground_points: usize,
    pub min_points_per_box: usize,
    pub point_noise: f64,
    pub pixel_noise: f64,
    pub background_color: [f64; 3],
    pub target_color: [f64; 3],
    pub distractor_color: [f64; 3],
    pub max_placement_attempts: usize,
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            x_range: (-10.0, 10.0),
            z_range: (0.0, 20.0),
            image_height: 64,
            image_width: 64,
            ground_y: 1.7,
            object_count: (2, 4),
            target_fraction: 0.5,
            height_range: (1.4, 1.7),
            width_range: (1.5, 1.8),
            length_range: (3.4, 4.2),
            yaw_range: (-std::f64::consts::FRAC_PI_6, std::f64::consts::FRAC_PI_6),
            min_gap: 0.5,
            points_per_object: 96,
            ground_points: 640,
            min_points_per_box: 32,
            point_noise: 0.03,
            pixel_noise: 0.04,
            background_color: [0.45, 0.45, 0.40],
            target_color: [0.85, 0.15, 0.10],
            distractor_color: [0.10, 0.30, 0.85],
            max_placement_attempts: 200,
            seed: 0,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn render_spec(&self) -> RenderSpec {
        let mut palette = vec![[0.0; 3]; 2];
        palette[TARGET_CLASS] = self.target_color;
        palette[DISTRACTOR_CLASS] = self.distractor_color;
        RenderSpec {
            x_range: self.x_range,
            z_range: self.z_range,
            height: self.image_height,
            width: self.image_width,
            background: self.background_color,
            palette,
            pixel_noise: self.pixel_noise,
            seed: self.seed ^ 0x9e37_79b9_7f4a_7c15,
        }
    }

    fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        let ok = ordered(self.x_range)
            && ordered(self.z_range)
            && self.x_range.0 < self.x_range.1
            && self.z_range.0 < self.z_range.1
            && ordered(self.height_range)
            && ordered(self.width_range)
            && ordered(self.length_range)
            && ordered(self.yaw_range)
            && self.height_range.0 > 0.0
            && self.width_range.0 > 0.0
            && self.length_range.0 > 0.0
            && self.object_count.0 <= self.object_count.1
            && self.image_height > 0
            && self.image_width > 0
            && (0.0..=1.0).contains(&self.target_fraction)
            && self.point_noise >= 0.0
            && self.pixel_noise >= 0.0;
        if !ok {
            return Err(Error::Input(format!("invalid synthetic scene config: {self:?}")));
        }
        if self.points_per_object < self.min_points_per_box {
            return Err(Error::Input("points_per_object is below min_points_per_box".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn inflate(b: &Box3D, gap: f64) -> Box3D {
    Box3D { w: b.w + gap, l: b.l + gap, ..*b }
}

fn place_objects(cfg: &SyntheticSceneConfig, rng: &mut ChaCha8Rng) -> Result<Vec<SceneObject>> {
    let count = rng.random_range(cfg.object_count.0..=cfg.object_count.1);
    let mut placed: Vec<SceneObject> = Vec::with_capacity(count);
    for k in 0..count {
        let mut attempt = 0;
        loop {
            if attempt == cfg.max_placement_attempts {
                return Err(Error::Generation(format!(
                    "could not place object {} of {count} after {attempt} attempts",
                    k + 1
                )));
            }
            attempt += 1;
            let (h, w, l) = (
                uniform(rng, cfg.height_range),
                uniform(rng, cfg.width_range),
                uniform(rng, cfg.length_range),
            );
            let yaw = uniform(rng, cfg.yaw_range);
            let reach = 0.5 * (w * w + l * l).sqrt() + cfg.min_gap;
            let xs = (cfg.x_range.0 + reach, cfg.x_range.1 - reach);
            let zs = (cfg.z_range.0 + reach, cfg.z_range.1 - reach);
            if xs.0 > xs.1 || zs.0 > zs.1 {
                continue;
            }
            let bbox = Box3D::new([uniform(rng, xs), cfg.ground_y, uniform(rng, zs)], [h, w, l], yaw)?;
            let class_id = if rng.random::<f64>() < cfg.target_fraction { TARGET_CLASS } else { DISTRACTOR_CLASS };
            let grown = inflate(&bbox, cfg.min_gap);
            if placed.iter().all(|o| iou_bev(&grown, &inflate(&o.bbox, cfg.min_gap)) == 0.0) {
                placed.push(SceneObject { bbox, class_id });
                break;
            }
        }
    }
    Ok(placed)
}

/// Surface samples on the top and four side faces, area-weighted, jittered
/// and then clamped just inside the box.
fn sample_surface(b: &Box3D, n: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let faces = [b.l * b.w, b.l * b.h, b.l * b.h, b.w * b.h, b.w * b.h];
    let total: f64 = faces.iter().sum();
    let (hl, hw, h) = (0.5 * b.l, 0.5 * b.w, b.h);
    let inset = 1e-4;
    let (s, c) = b.yaw.sin_cos();
    (0..n)
        .map(|_| {
            let mut pick = rng.random::<f64>() * total;
            let mut face = 0;
            while face < 4 && pick >= faces[face] {
                pick -= faces[face];
                face += 1;
            }
            let (a, t) = (rng.random::<f64>(), rng.random::<f64>());
            let (mut lx, mut up, mut lz) = match face {
                0 => ((2.0 * a - 1.0) * hl, h, (2.0 * t - 1.0) * hw),
                1 => ((2.0 * a - 1.0) * hl, t * h, hw),
                2 => ((2.0 * a - 1.0) * hl, t * h, -hw),
                3 => (hl, t * h, (2.0 * a - 1.0) * hw),
                _ => (-hl, t * h, (2.0 * a - 1.0) * hw),
            };
            let mut jitter = || noise * (2.0 * rng.random::<f64>() - 1.0);
            lx = (lx + jitter()).clamp(-hl + inset, hl - inset);
            up = (up + jitter()).clamp(inset, h - inset);
            lz = (lz + jitter()).clamp(-hw + inset, hw - inset);
            [b.x + c * lx + s * lz, b.y - up, b.z - s * lx + c * lz]
        })
        .collect()
}

fn round_f32(p: [f64; 3]) -> [f64; 3] {
    p.map(|v| f64::from(v as f32))
}

/// Builds a scene whose image is an exact top view of its point cloud. Both
/// classes share one size distribution, so only color tells them apart.
pub fn generate_synthetic_scene(cfg: &SyntheticSceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let objects = place_objects(cfg, &mut rng)?;

    let mut tagged: Vec<([f64; 3], f64)> = Vec::new();
    for o in &objects {
        for p in sample_surface(&o.bbox, cfg.points_per_object, cfg.point_noise, &mut rng) {
            tagged.push((round_f32(p), f64::from(0.6f32)));
        }
    }
    let footprints: Vec<Box3D> = objects.iter().map(|o| o.bbox).collect();
    let mut ground = 0;
    let mut tries = 0;
    while ground < cfg.ground_points && tries < 20 * cfg.ground_points.max(1) {
        tries += 1;
        let x = uniform(&mut rng, cfg.x_range);
        let z = uniform(&mut rng, cfg.z_range);
        let y = cfg.ground_y + cfg.point_noise * (2.0 * rng.random::<f64>() - 1.0);
        let probe = [x, cfg.ground_y - 0.5 * cfg.height_range.0, z];
        if footprints.iter().any(|b| b.contains(probe)) {
            continue;
        }
        tagged.push((round_f32([x, y, z]), f64::from(0.2f32)));
        ground += 1;
    }
    tagged.shuffle(&mut rng);

    let points: Vec<[f64; 3]> = tagged.iter().map(|t| t.0).collect();
    for (i, o) in objects.iter().enumerate() {
        let inside = points.iter().filter(|&&p| o.bbox.contains(p)).count();
        if inside < cfg.min_points_per_box {
            return Err(Error::Generation(format!(
                "object {i} holds {inside} points, fewer than {}",
                cfg.min_points_per_box
            )));
        }
    }

    let render = cfg.render_spec();
    let calib = CalibrationSet {
        p2: render.projection().m,
        r0_rect: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        tr_velo_to_cam: VELO_TO_CAM,
    };
    Ok(Scene {
        reflectance: tagged.iter().map(|t| t.1).collect(),
        points,
        image: render.render(&objects),
        calib,
        objects,
        render: Some(render),
    })
}
