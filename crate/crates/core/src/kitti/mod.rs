//! KITTI file formats, scene preprocessing, and synthetic scenes that follow
//! the same conventions.

mod augment;
mod calib;
mod image;
mod labels;
pub mod layout;
mod preprocess;
mod scene;
mod synth;
mod velodyne;

pub use augment::{augment_flip, augment_rotate, augment_scale, random_augment, AugmentConfig};
pub use calib::{compose_projection, parse_calib, serialize_calib, CalibrationSet};
pub use image::{perturb_illumination, Image};
pub use labels::{parse_labels, serialize_labels, LabelEntry};
pub use preprocess::{crop_indices, crop_to_range, subsample_indices, subsample_points, RangeBox};
pub use scene::{class_id, class_name, RenderSpec, Scene, SceneObject, DISTRACTOR_CLASS, TARGET_CLASS};
pub use synth::{generate_synthetic_scene, SyntheticSceneConfig, VELO_TO_CAM};
pub use velodyne::{parse_velodyne, write_velodyne};
