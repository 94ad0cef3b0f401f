use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{FusionMode, KvConfig, LossMode, TwoStreamConfig};
use super::model::{prepare_scene, PreparedScene};
use super::train::{train, TrainState};
use crate::error::{Error, Result};
use crate::eval::{ap_40, sweep_consistency, ConsistencyConfig, Detection, GroundTruth, SweepPoint};
use crate::kitti::{generate_synthetic_scene, perturb_illumination, Scene, SyntheticSceneConfig, TARGET_CLASS};
use crate::losses::LossBreakdown;

/// Data split sizes, training length and metric settings shared by the
/// experiment drivers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub steps: usize,
    pub consistency: ConsistencyConfig,
    /// Unsuppressed boxes kept per scene for the consistency sweep.
    pub candidates_per_scene: usize,
    /// 3D IoU threshold of the AP metric.
    pub ap_iou: f64,
    /// `(a, b)` of the brightening corruption.
    pub lighten: (f64, f64),
    /// `(a, b)` of the darkening corruption.
    pub darken: (f64, f64),
    pub scene: SyntheticSceneConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train_scenes: 40,
            eval_scenes: 20,
            steps: 300,
            consistency: ConsistencyConfig::default(),
            candidates_per_scene: 64,
            ap_iou: 0.5,
            lighten: (3.0, 5.0),
            darken: (0.3, 5.0),
            scene: SyntheticSceneConfig::default(),
        }
    }
}

fn pair(key: &str, value: &str) -> Result<(f64, f64)> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Input(format!("{key}: cannot parse `{value}`"))))
        .collect::<Result<_>>()?;
    match parts[..] {
        [a, b] => Ok((a, b)),
        _ => Err(Error::Input(format!("{key}: expected two comma-separated values"))),
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Input(format!("{key}: cannot parse `{value}`")))
}

impl KvConfig for ExperimentConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "train_scenes" => self.train_scenes = num(key, value)?,
            "eval_scenes" => self.eval_scenes = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "tau" => self.consistency.tau = num(key, value)?,
            "upsilons" => {
                self.consistency.upsilons = value.split(',').map(|v| num(key, v)).collect::<Result<_>>()?;
            }
            "candidates_per_scene" => self.candidates_per_scene = num(key, value)?,
            "ap_iou" => self.ap_iou = num(key, value)?,
            "lighten" => self.lighten = pair(key, value)?,
            "darken" => self.darken = pair(key, value)?,
            "objects_min" => self.scene.object_count.0 = num(key, value)?,
            "objects_max" => self.scene.object_count.1 = num(key, value)?,
            "target_fraction" => self.scene.target_fraction = num(key, value)?,
            "image_size" => {
                let n = num(key, value)?;
                self.scene.image_height = n;
                self.scene.image_width = n;
            }
            "pixel_noise" => self.scene.pixel_noise = num(key, value)?,
            "point_noise" => self.scene.point_noise = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        let e = |k: &str, v: String| (k.to_string(), v);
        let ups: Vec<String> = self.consistency.upsilons.iter().map(f64::to_string).collect();
        vec![
            e("train_scenes", self.train_scenes.to_string()),
            e("eval_scenes", self.eval_scenes.to_string()),
            e("steps", self.steps.to_string()),
            e("tau", self.consistency.tau.to_string()),
            e("upsilons", ups.join(",")),
            e("candidates_per_scene", self.candidates_per_scene.to_string()),
            e("ap_iou", self.ap_iou.to_string()),
            e("lighten", format!("{},{}", self.lighten.0, self.lighten.1)),
            e("darken", format!("{},{}", self.darken.0, self.darken.1)),
            e("objects_min", self.scene.object_count.0.to_string()),
            e("objects_max", self.scene.object_count.1.to_string()),
            e("target_fraction", self.scene.target_fraction.to_string()),
            e("image_size", self.scene.image_height.to_string()),
            e("pixel_noise", self.scene.pixel_noise.to_string()),
            e("point_noise", self.scene.point_noise.to_string()),
        ]
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_scenes == 0 || self.eval_scenes == 0 || self.candidates_per_scene == 0 {
            return Err(Error::Input("train_scenes, eval_scenes and candidates_per_scene must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ap_iou) {
            return Err(Error::Input(format!("ap_iou must lie in [0, 1], got {}", self.ap_iou)));
        }
        self.consistency.validate()
    }
}

/// Which split a synthetic scene belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

fn scene_seed(seed: u64, split: Split, index: usize) -> u64 {
    let base = match split {
        Split::Train => 0,
        Split::Eval => 1 << 32,
    };
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(base + index as u64)
}

/// Synthetic scenes of one split, optionally with per-scene brightening or
/// darkening (chosen by a fair coin).
pub fn synthetic_split(exp: &ExperimentConfig, seed: u64, split: Split, corrupt: bool) -> Result<Vec<Scene>> {
    let count = match split {
        Split::Train => exp.train_scenes,
        Split::Eval => exp.eval_scenes,
    };
    (0..count)
        .map(|i| {
            let s = scene_seed(seed, split, i);
            let mut scene = generate_synthetic_scene(&SyntheticSceneConfig { seed: s, ..exp.scene.clone() })?;
            if corrupt {
                let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0xC0FF_EE00);
                let (a, b) = if rng.random_bool(0.5) { exp.lighten } else { exp.darken };
                scene.image = perturb_illumination(&scene.image, a, b);
            }
            Ok(scene)
        })
        .collect()
}

pub fn prepare_all(scenes: &[Scene], cfg: &TwoStreamConfig) -> Result<Vec<PreparedScene>> {
    scenes.iter().enumerate().map(|(i, s)| prepare_scene(s, cfg, cfg.seed.wrapping_add(i as u64))).collect()
}

pub fn ground_truth(scenes: &[PreparedScene]) -> Vec<GroundTruth> {
    scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.gts.iter().map(move |b| GroundTruth { scene_id: i as u64, bbox: *b, class_id: TARGET_CLASS }))
        .collect()
}

/// Final detections (suppressed) over a set of scenes.
pub fn detect_all(state: &TrainState, scenes: &[PreparedScene]) -> Result<Vec<Detection>> {
    let cfg = state.config();
    let mut out = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        out.extend(state.model.detect(&state.params, s, i as u64, Some(cfg.rpn_nms), cfg.max_proposals)?.refined);
    }
    Ok(out)
}

/// Refined boxes of the top `count` proposals per scene with no suppression
/// at either stage, plus the proposals themselves.
pub fn unsuppressed_candidates(state: &TrainState, scenes: &[PreparedScene], count: usize) -> Result<(Vec<Detection>, Vec<Detection>)> {
    let mut refined = Vec::new();
    let mut proposals = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let d = state.model.detect(&state.params, s, i as u64, None, count)?;
        refined.extend(d.refined);
        proposals.extend(d.proposals.boxes.iter().zip(&d.proposals.confidences).map(|(b, &c)| Detection {
            scene_id: i as u64,
            bbox: *b,
            confidence: c,
            class_id: TARGET_CLASS,
        }));
    }
    Ok((refined, proposals))
}

fn tail_mean(trace: &[LossBreakdown], n: usize) -> f64 {
    let tail = &trace[trace.len().saturating_sub(n)..];
    tail.iter().map(|l| l.total).sum::<f64>() / tail.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyArm {
    pub loss_mode: LossMode,
    pub initial_loss: f64,
    /// Mean total loss over the last ten steps.
    pub final_loss: f64,
    /// Sweep over refined boxes.
    pub sweep: Vec<SweepPoint>,
    /// Sweep over the proposals that were refined.
    pub proposal_sweep: Vec<SweepPoint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub upsilon: f64,
    pub r_first: Option<f64>,
    pub r_second: Option<f64>,
}

/// Pairs two sweeps over the same `υ` grid.
pub fn compare_sweeps(first: &[SweepPoint], second: &[SweepPoint]) -> Vec<ConsistencyRow> {
    first
        .iter()
        .zip(second)
        .map(|(a, b)| ConsistencyRow { upsilon: a.upsilon, r_first: a.ratio, r_second: b.ratio })
        .collect()
}

/// Every `υ` defined for both arms has `R_first ≥ R_second`; `None` when no
/// point is defined for both.
pub fn first_dominates(rows: &[ConsistencyRow]) -> Option<bool> {
    let defined: Vec<(f64, f64)> = rows.iter().filter_map(|r| Some((r.r_first?, r.r_second?))).collect();
    if defined.is_empty() {
        return None;
    }
    Some(defined.iter().all(|(a, b)| a >= b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub seed: u64,
    pub steps: usize,
    pub tau: f64,
    pub ce: ConsistencyArm,
    pub iou_only: ConsistencyArm,
    /// `r_first` is the CE arm, `r_second` the IoU arm.
    pub rows: Vec<ConsistencyRow>,
    pub ce_dominates: Option<bool>,
}

fn consistency_arm(
    cfg: &TwoStreamConfig,
    exp: &ExperimentConfig,
    mode: LossMode,
    train_set: &[PreparedScene],
    eval_set: &[PreparedScene],
    gts: &[GroundTruth],
) -> Result<ConsistencyArm> {
    let mut state = TrainState::new(cfg)?;
    let trace = train(&mut state, train_set, exp.steps, mode)?;
    let (refined, proposals) = unsuppressed_candidates(&state, eval_set, exp.candidates_per_scene)?;
    Ok(ConsistencyArm {
        loss_mode: mode,
        initial_loss: trace.first().map_or(f64::NAN, |l| l.total),
        final_loss: tail_mean(&trace, 10),
        sweep: sweep_consistency(&refined, gts, &exp.consistency),
        proposal_sweep: sweep_consistency(&proposals, gts, &exp.consistency),
    })
}

/// Trains a CE arm and an IoU-only arm from identical initial states on
/// identical data, then sweeps the consistency ratio of both.
pub fn run_consistency_experiment(cfg: &TwoStreamConfig, exp: &ExperimentConfig) -> Result<ConsistencyReport> {
    cfg.validate()?;
    exp.validate()?;
    let train_set = prepare_all(&synthetic_split(exp, cfg.seed, Split::Train, false)?, cfg)?;
    let eval_set = prepare_all(&synthetic_split(exp, cfg.seed, Split::Eval, false)?, cfg)?;
    let gts = ground_truth(&eval_set);
    let ce = consistency_arm(cfg, exp, LossMode::Ce, &train_set, &eval_set, &gts)?;
    let iou_only = consistency_arm(cfg, exp, LossMode::IouOnly, &train_set, &eval_set, &gts)?;
    let rows = compare_sweeps(&ce.sweep, &iou_only.sweep);
    Ok(ConsistencyReport {
        seed: cfg.seed,
        steps: exp.steps,
        tau: exp.consistency.tau,
        ce_dominates: first_dominates(&rows),
        ce,
        iou_only,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub fusion: FusionMode,
    pub corrupted: bool,
    /// `None` when the evaluation split has no ground truth.
    pub ap: Option<f64>,
    pub final_loss: f64,
    pub detections: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionAblationReport {
    pub seed: u64,
    pub steps: usize,
    pub ap_iou: f64,
    pub loss_mode: LossMode,
    pub clean: Vec<AblationArm>,
    pub corrupted: Vec<AblationArm>,
}

impl FusionAblationReport {
    fn find(arms: &[AblationArm], mode: FusionMode) -> Option<f64> {
        arms.iter().find(|a| a.fusion == mode).and_then(|a| a.ap)
    }

    /// `AP(gated) − AP(none)` on clean images.
    pub fn clean_fusion_gain(&self) -> Option<f64> {
        Some(Self::find(&self.clean, FusionMode::Gated)? - Self::find(&self.clean, FusionMode::None)?)
    }

    /// `AP(gated) − AP(ungated)` on corrupted images.
    pub fn corrupted_gate_gain(&self) -> Option<f64> {
        Some(Self::find(&self.corrupted, FusionMode::Gated)? - Self::find(&self.corrupted, FusionMode::Ungated)?)
    }
}

#[allow(clippy::too_many_arguments)]
fn ablation_arm(
    cfg: &TwoStreamConfig,
    exp: &ExperimentConfig,
    fusion: FusionMode,
    corrupted: bool,
    train_set: &[PreparedScene],
    eval_set: &[PreparedScene],
    gts: &[GroundTruth],
    mode: LossMode,
) -> Result<AblationArm> {
    let arm_cfg = TwoStreamConfig { fusion, ..cfg.clone() };
    let mut state = TrainState::new(&arm_cfg)?;
    let trace = train(&mut state, train_set, exp.steps, mode)?;
    let dets = detect_all(&state, eval_set)?;
    Ok(AblationArm {
        fusion,
        corrupted,
        ap: ap_40(&dets, gts, exp.ap_iou),
        final_loss: tail_mean(&trace, 10),
        detections: dets.len(),
    })
}

/// Trains point-only, ungated and gated arms on clean scenes, and ungated
/// and gated arms on illumination-corrupted scenes, reporting AP@40 on the
/// matching held-out split. The point-only arm ignores images, so its clean
/// result stands for both conditions.
pub fn run_fusion_ablation(cfg: &TwoStreamConfig, exp: &ExperimentConfig, mode: LossMode) -> Result<FusionAblationReport> {
    cfg.validate()?;
    exp.validate()?;
    let mut clean = Vec::new();
    let mut corrupted = Vec::new();
    for corrupt in [false, true] {
        let train_set = prepare_all(&synthetic_split(exp, cfg.seed, Split::Train, corrupt)?, cfg)?;
        let eval_set = prepare_all(&synthetic_split(exp, cfg.seed, Split::Eval, corrupt)?, cfg)?;
        let gts = ground_truth(&eval_set);
        if !corrupt {
            for fusion in [FusionMode::None, FusionMode::Ungated, FusionMode::Gated] {
                clean.push(ablation_arm(cfg, exp, fusion, false, &train_set, &eval_set, &gts, mode)?);
            }
        } else {
            corrupted.push(AblationArm { corrupted: true, ..clean[0].clone() });
            for fusion in [FusionMode::Ungated, FusionMode::Gated] {
                corrupted.push(ablation_arm(cfg, exp, fusion, true, &train_set, &eval_set, &gts, mode)?);
            }
        }
    }
    Ok(FusionAblationReport { seed: cfg.seed, steps: exp.steps, ap_iou: exp.ap_iou, loss_mode: mode, clean, corrupted })
}
