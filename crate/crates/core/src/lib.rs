//! LiDAR-guided image fusion for point-based 3D detection, built small enough
//! to verify end to end.
//!
//! * [`tensor`]: reverse-mode differentiation over `f64` arrays.
//! * [`geometry`]: oriented boxes, rotated IoU, camera projection.
//! * [`kitti`]: KITTI calibration / velodyne / label parsers, scene
//!   preprocessing, synthetic scenes and augmentation.
//! * [`fusion`]: grid generator, image sampler and the gated fusion layer.
//! * [`losses`]: consistency-enforcing loss, focal loss, bin-based regression.
//! * [`eval`]: NMS, consistency ratio and AP over 40 recall positions.
//! * [`pipeline`]: a desk-scale two-stream detector and its experiments.
//! * [`verify`]: gradient and IoU self-checks.

pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod kitti;
pub mod losses;
pub mod pipeline;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
