use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::calib::CalibrationSet;
use super::image::Image;
use super::preprocess::{crop_indices, subsample_indices, RangeBox};
use crate::error::Result;
use crate::geometry::{polygon_clip, Box3D, Polygon2D, ProjectionMatrix};

/// Class id of the object category the detector is trained to find.
pub const TARGET_CLASS: usize = 0;
/// Class id of same-shaped objects that must not be detected.
pub const DISTRACTOR_CLASS: usize = 1;

const CLASS_NAMES: [&str; 2] = ["Car", "Van"];

pub fn class_name(id: usize) -> &'static str {
    CLASS_NAMES.get(id).copied().unwrap_or("Misc")
}

pub fn class_id(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&n| n == name)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub bbox: Box3D,
    pub class_id: usize,
}

/// Top-view orthographic renderer for synthetic scenes. Image columns follow
/// X and rows follow Z, with row 0 at the far edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub x_range: (f64, f64),
    pub z_range: (f64, f64),
    pub height: usize,
    pub width: usize,
    pub background: [f64; 3],
    /// Color per class id.
    pub palette: Vec<[f64; 3]>,
    pub pixel_noise: f64,
    pub seed: u64,
}

impl RenderSpec {
    fn res(&self) -> (f64, f64) {
        (
            (self.x_range.1 - self.x_range.0) / self.width as f64,
            (self.z_range.1 - self.z_range.0) / self.height as f64,
        )
    }

    /// Camera coordinates to pixels, with pixel centers at integer positions.
    pub fn projection(&self) -> ProjectionMatrix {
        let (rx, rz) = self.res();
        ProjectionMatrix {
            m: [
                [1.0 / rx, 0.0, 0.0, -self.x_range.0 / rx - 0.5],
                [0.0, 0.0, -1.0 / rz, self.z_range.1 / rz - 0.5],
                [0.0, 0.0, 0.0, 1.0],
            ],
        }
    }

    /// Fraction of pixel `(row, col)` covered by the box footprint.
    pub fn coverage(&self, b: &Box3D, row: usize, col: usize) -> f64 {
        let (rx, rz) = self.res();
        let x0 = self.x_range.0 + col as f64 * rx;
        let z1 = self.z_range.1 - row as f64 * rz;
        let pixel = Polygon2D {
            vertices: vec![[x0, z1 - rz], [x0 + rx, z1 - rz], [x0 + rx, z1], [x0, z1]],
        };
        polygon_clip(&pixel, &b.corners_bev()).area() / (rx * rz)
    }

    pub fn render(&self, objects: &[SceneObject]) -> Image {
        let mut img = Image::filled(self.height, self.width, self.background);
        let (rx, rz) = self.res();
        for obj in objects {
            let color = self.palette.get(obj.class_id).copied().unwrap_or(self.background);
            let fp = obj.bbox.corners_bev();
            let (mut xmin, mut xmax, mut zmin, mut zmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
            for v in &fp.vertices {
                xmin = xmin.min(v[0]);
                xmax = xmax.max(v[0]);
                zmin = zmin.min(v[1]);
                zmax = zmax.max(v[1]);
            }
            let col_lo = ((xmin - self.x_range.0) / rx).floor().max(0.0) as usize;
            let col_hi = (((xmax - self.x_range.0) / rx).ceil() as isize).min(self.width as isize);
            let row_lo = ((self.z_range.1 - zmax) / rz).floor().max(0.0) as usize;
            let row_hi = (((self.z_range.1 - zmin) / rz).ceil() as isize).min(self.height as isize);
            for row in row_lo..row_hi.max(0) as usize {
                for col in col_lo..col_hi.max(0) as usize {
                    let cov = self.coverage(&obj.bbox, row, col);
                    if cov > 0.0 {
                        for (c, &hue) in color.iter().enumerate() {
                            let old = img.get(c, row, col);
                            img.set(c, row, col, old + cov * (hue - self.background[c]));
                        }
                    }
                }
            }
        }
        if self.pixel_noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            for c in 0..3 {
                for row in 0..self.height {
                    for col in 0..self.width {
                        let n = self.pixel_noise * (2.0 * rng.random::<f64>() - 1.0);
                        img.set(c, row, col, img.get(c, row, col) + n);
                    }
                }
            }
        }
        img.quantize();
        img
    }
}

/// One sample: camera-frame points, image, calibration and labelled boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub points: Vec<[f64; 3]>,
    pub reflectance: Vec<f64>,
    pub image: Image,
    pub calib: CalibrationSet,
    pub objects: Vec<SceneObject>,
    /// Present for synthetic scenes so augmentation can redraw the image.
    pub render: Option<RenderSpec>,
}

impl Scene {
    /// Camera-frame points to image pixels.
    pub fn projection(&self) -> ProjectionMatrix {
        self.calib.camera_projection()
    }

    pub fn boxes_of(&self, class_id: usize) -> Vec<Box3D> {
        self.objects.iter().filter(|o| o.class_id == class_id).map(|o| o.bbox).collect()
    }

    /// Range crop followed by a fixed-size subsample.
    pub fn preprocess(&self, range: &RangeBox, n: usize, seed: u64) -> Result<Scene> {
        let kept = crop_indices(&self.points, range);
        let picks = subsample_indices(kept.len(), n, seed)?;
        let mut out = self.clone();
        out.points = picks.iter().map(|&i| self.points[kept[i]]).collect();
        out.reflectance = picks.iter().map(|&i| self.reflectance[kept[i]]).collect();
        Ok(out)
    }

    pub(crate) fn rerender(&mut self) {
        if let Some(spec) = &self.render {
            self.image = spec.render(&self.objects);
        }
    }
}
