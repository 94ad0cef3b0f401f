//! KITTI-style directory layout: `calib/`, `velodyne/`, `label_2/`, `image_2/`.

use std::fs;
use std::path::{Path, PathBuf};

use super::calib::{parse_calib, serialize_calib};
use super::image::Image;
use super::labels::{parse_labels, serialize_labels, LabelEntry};
use super::scene::{class_id, class_name, Scene, SceneObject};
use super::velodyne::{parse_velodyne, write_velodyne};
use crate::error::{Error, Result};
use crate::geometry::{project_point, wrap_angle};

pub const SUBDIRS: [&str; 4] = ["calib", "velodyne", "label_2", "image_2"];

fn path(root: &Path, sub: &str, index: usize, ext: &str) -> PathBuf {
    root.join(sub).join(format!("{index:06}.{ext}"))
}

fn labels_for(scene: &Scene) -> Vec<LabelEntry> {
    let m = scene.projection();
    scene
        .objects
        .iter()
        .map(|o| {
            let b = &o.bbox;
            let (mut l, mut t, mut r, mut bt) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for c in b.corners() {
                if let Some((u, v)) = project_point(c, &m) {
                    l = l.min(u);
                    t = t.min(v);
                    r = r.max(u);
                    bt = bt.max(v);
                }
            }
            LabelEntry {
                class: class_name(o.class_id).to_string(),
                truncated: 0.0,
                occluded: 0,
                alpha: wrap_angle(b.yaw - b.x.atan2(b.z)),
                bbox: [l, t, r, bt],
                h: b.h,
                w: b.w,
                l: b.l,
                x: b.x,
                y: b.y,
                z: b.z,
                rotation_y: b.yaw,
                score: None,
            }
        })
        .collect()
}

/// Writes one scene. Points are stored in the velodyne frame as `f32`.
pub fn write_scene(root: &Path, index: usize, scene: &Scene) -> Result<()> {
    for sub in SUBDIRS {
        fs::create_dir_all(root.join(sub))?;
    }
    fs::write(path(root, "calib", index, "txt"), serialize_calib(&scene.calib))?;
    let records: Vec<[f32; 4]> = scene
        .points
        .iter()
        .zip(&scene.reflectance)
        .map(|(&p, &r)| {
            let v = scene.calib.camera_to_velo(p);
            [v[0] as f32, v[1] as f32, v[2] as f32, r as f32]
        })
        .collect();
    fs::write(path(root, "velodyne", index, "bin"), write_velodyne(&records))?;
    fs::write(path(root, "label_2", index, "txt"), serialize_labels(&labels_for(scene)))?;
    fs::write(path(root, "image_2", index, "ppm"), scene.image.to_ppm_bytes())?;
    Ok(())
}

fn read(p: &Path) -> Result<Vec<u8>> {
    fs::read(p).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))))
}

fn with_path<T>(p: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", p.display())),
        other => other,
    })
}

/// Reads one scene back. Objects of unknown classes and `DontCare` are skipped.
pub fn read_scene(root: &Path, index: usize) -> Result<Scene> {
    let cp = path(root, "calib", index, "txt");
    let calib = with_path(&cp, parse_calib(&String::from_utf8_lossy(&read(&cp)?)))?;
    let vp = path(root, "velodyne", index, "bin");
    let records = with_path(&vp, parse_velodyne(&read(&vp)?))?;
    let lp = path(root, "label_2", index, "txt");
    let labels = with_path(&lp, parse_labels(&String::from_utf8_lossy(&read(&lp)?)))?;
    let ip = path(root, "image_2", index, "ppm");
    let image = with_path(&ip, Image::read_ppm(&read(&ip)?))?;
    let mut objects = Vec::new();
    for e in labels.iter().filter(|e| !e.is_dont_care()) {
        if let Some(id) = class_id(&e.class) {
            objects.push(SceneObject { bbox: e.to_box()?, class_id: id });
        }
    }
    Ok(Scene {
        points: records
            .iter()
            .map(|r| calib.velo_to_camera([f64::from(r[0]), f64::from(r[1]), f64::from(r[2])]))
            .collect(),
        reflectance: records.iter().map(|r| f64::from(r[3])).collect(),
        image,
        calib,
        objects,
        render: None,
    })
}

/// Sorted indices that have a calibration file.
pub fn scene_indices(root: &Path) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root.join("calib"))? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".txt") {
            if let Ok(i) = stem.parse() {
                out.push(i);
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Re-parses every file of one scene and checks that serializing the parsed
/// value reproduces the file byte for byte.
pub fn verify_roundtrip(root: &Path, index: usize) -> Result<()> {
    let check = |p: PathBuf, again: Vec<u8>| -> Result<()> {
        if read(&p)? != again {
            return Err(Error::Parse(format!("{}: re-serialized content differs", p.display())));
        }
        Ok(())
    };
    let scene = read_scene(root, index)?;
    check(path(root, "calib", index, "txt"), serialize_calib(&scene.calib).into_bytes())?;
    let vp = path(root, "velodyne", index, "bin");
    check(vp.clone(), write_velodyne(&parse_velodyne(&read(&vp)?)?))?;
    let lp = path(root, "label_2", index, "txt");
    let labels = parse_labels(&String::from_utf8_lossy(&read(&lp)?))?;
    check(lp, serialize_labels(&labels).into_bytes())?;
    check(path(root, "image_2", index, "ppm"), scene.image.to_ppm_bytes())
}
