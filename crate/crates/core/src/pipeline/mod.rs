//! Two-stream detector: an image stream and a point hierarchy joined by
//! point-wise fusion, a per-point proposal stage, box refinement, training and
//! the experiment drivers.

mod config;
mod experiment;
mod image_stream;
mod model;
mod params;
mod point_stream;
mod train;

pub use config::{apply_kv, parse_kv, render_kv, AdamConfig, FusionMode, KvConfig, LossMode, TwoStreamConfig};
pub use experiment::{
    compare_sweeps, detect_all, first_dominates, ground_truth, prepare_all, run_consistency_experiment, run_fusion_ablation,
    synthetic_split, unsuppressed_candidates, AblationArm, ConsistencyArm, ConsistencyReport, ConsistencyRow, ExperimentConfig,
    FusionAblationReport, Split,
};
pub use image_stream::{ImageFeatures, ImageStream};
pub use model::{
    decode_boxes, generate_proposals, prepare_points, prepare_scene, read_targets, Frame, HeadOutput, Heads, Linear, Model,
    PreparedScene, ProposalSet, SceneDetections, SceneLoss, StreamOutput, PROB_EPS,
};
pub use params::{AdamState, Bound, ParamId, ParamStore};
pub use point_stream::{
    ball_group, farthest_point_sample, fp_forward, fp_stage, sa_forward, sa_stage, three_nn_weights, LinearVars, PointHierarchy,
};
pub use train::{evaluate_loss, gradient_norms, train, train_step, TrainState};
