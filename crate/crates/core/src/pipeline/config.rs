use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{BinConfig, BoxCoder, LossWeights};

/// Which fusion module sits at each fusion site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Point features only; the image stream is not evaluated.
    None,
    /// `F_P ‖ F_I`.
    Ungated,
    /// `F_P ‖ w·F_I` with a learned gate.
    Gated,
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "ungated" => Ok(Self::Ungated),
            "gated" => Ok(Self::Gated),
            _ => Err(Error::Input(format!("unknown fusion mode `{s}` (none, ungated, gated)"))),
        }
    }
}

impl Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Ungated => "ungated",
            Self::Gated => "gated",
        })
    }
}

/// Third loss term of each stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `−log(c·IoU)`.
    Ce,
    /// `−log(IoU)`.
    IouOnly,
    /// No third term.
    None,
}

impl FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(Self::Ce),
            "iou" | "iou_only" => Ok(Self::IouOnly),
            "none" => Ok(Self::None),
            _ => Err(Error::Input(format!("unknown loss mode `{s}` (ce, iou_only, none)"))),
        }
    }
}

impl Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ce => "ce",
            Self::IouOnly => "iou_only",
            Self::None => "none",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.001,
            clip_norm: 10.0,
        }
    }
}

/// Architecture, targets, losses and optimizer of the two-stream detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoStreamConfig {
    pub image_channels: [usize; 4],
    /// Points fed to the network.
    pub input_points: usize,
    /// Output count of each set-abstraction stage.
    pub sa_counts: [usize; 4],
    pub sa_radii: [f64; 4],
    pub sa_channels: [usize; 4],
    /// Group size of every set-abstraction stage.
    pub group_size: usize,
    /// Output width of each propagation stage, coarsest first.
    pub fp_channels: [usize; 4],
    /// Width of each 1×1 projection feeding `F_U`.
    pub fu_channels: usize,
    pub fusion: FusionMode,
    /// Gate width; `0` selects `min(Cp, Ci)` per site.
    pub fusion_hidden: usize,
    pub head_hidden: usize,
    pub rpn_bins: BinConfig,
    pub rcnn_bins: BinConfig,
    /// `(h, w, l)`.
    pub mean_size: [f64; 3],
    pub rpn_top_k: usize,
    pub rpn_nms: f64,
    pub max_proposals: usize,
    pub rcnn_points: usize,
    pub rcnn_channels: usize,
    pub rcnn_pos_iou: f64,
    pub final_nms: f64,
    pub loss: LossWeights,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TwoStreamConfig {
    fn default() -> Self {
        Self {
            image_channels: [8, 16, 24, 32],
            input_points: 1024,
            sa_counts: [1024, 256, 64, 32],
            sa_radii: [0.5, 1.0, 2.0, 4.0],
            sa_channels: [16, 24, 32, 48],
            group_size: 16,
            fp_channels: [48, 32, 32, 32],
            fu_channels: 4,
            fusion: FusionMode::Gated,
            fusion_hidden: 0,
            head_hidden: 32,
            rpn_bins: BinConfig::default(),
            rcnn_bins: BinConfig {
                search_range: 1.75,
                bin_size: 0.5,
                num_heading_bins: 9,
            },
            mean_size: [1.55, 1.65, 3.8],
            rpn_top_k: 256,
            rpn_nms: 0.8,
            max_proposals: 64,
            rcnn_points: 64,
            rcnn_channels: 32,
            rcnn_pos_iou: 0.55,
            final_nms: 0.1,
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
            batch_size: 1,
            seed: 0,
        }
    }
}

fn parse_one<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Input(format!("{key}: cannot parse `{value}`")))
}

fn parse_array<T: FromStr + Copy + Default, const N: usize>(key: &str, value: &str) -> Result<[T; N]> {
    let parts: Vec<&str> = value.split(',').collect();
    if parts.len() != N {
        return Err(Error::Input(format!("{key}: expected {N} comma-separated values, found {}", parts.len())));
    }
    let mut out = [T::default(); N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = parse_one(key, p)?;
    }
    Ok(out)
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Reads `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse(format!("config line {}: expected key = value", i + 1)));
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Parse(format!("config line {}: empty key", i + 1)));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Parse(format!("config line {}: duplicate key `{k}`", i + 1)));
        }
    }
    Ok(out)
}

/// Settings that can be overridden from `key = value` pairs.
pub trait KvConfig {
    /// Applies one pair; `Ok(false)` when the key is not recognized.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;
    /// Every key with its current value.
    fn entries(&self) -> Vec<(String, String)>;
}

impl KvConfig for TwoStreamConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "image_channels" => self.image_channels = parse_array(key, value)?,
            "input_points" => self.input_points = parse_one(key, value)?,
            "sa_counts" => self.sa_counts = parse_array(key, value)?,
            "sa_radii" => self.sa_radii = parse_array(key, value)?,
            "sa_channels" => self.sa_channels = parse_array(key, value)?,
            "group_size" => self.group_size = parse_one(key, value)?,
            "fp_channels" => self.fp_channels = parse_array(key, value)?,
            "fu_channels" => self.fu_channels = parse_one(key, value)?,
            "fusion" => self.fusion = value.parse()?,
            "fusion_hidden" => self.fusion_hidden = parse_one(key, value)?,
            "head_hidden" => self.head_hidden = parse_one(key, value)?,
            "rpn_search_range" => self.rpn_bins.search_range = parse_one(key, value)?,
            "rpn_bin_size" => self.rpn_bins.bin_size = parse_one(key, value)?,
            "rcnn_search_range" => self.rcnn_bins.search_range = parse_one(key, value)?,
            "rcnn_bin_size" => self.rcnn_bins.bin_size = parse_one(key, value)?,
            "rpn_heading_bins" => self.rpn_bins.num_heading_bins = parse_one(key, value)?,
            "rcnn_heading_bins" => self.rcnn_bins.num_heading_bins = parse_one(key, value)?,
            "mean_size" => self.mean_size = parse_array(key, value)?,
            "rpn_top_k" => self.rpn_top_k = parse_one(key, value)?,
            "rpn_nms" => self.rpn_nms = parse_one(key, value)?,
            "max_proposals" => self.max_proposals = parse_one(key, value)?,
            "rcnn_points" => self.rcnn_points = parse_one(key, value)?,
            "rcnn_channels" => self.rcnn_channels = parse_one(key, value)?,
            "rcnn_pos_iou" => self.rcnn_pos_iou = parse_one(key, value)?,
            "final_nms" => self.final_nms = parse_one(key, value)?,
            "lambda" => self.loss.lambda = parse_one(key, value)?,
            "focal_alpha" => self.loss.alpha = parse_one(key, value)?,
            "focal_gamma" => self.loss.gamma = parse_one(key, value)?,
            "smooth_l1_beta" => self.loss.beta = parse_one(key, value)?,
            "lr" => self.adam.lr = parse_one(key, value)?,
            "adam_beta1" => self.adam.beta1 = parse_one(key, value)?,
            "adam_beta2" => self.adam.beta2 = parse_one(key, value)?,
            "adam_eps" => self.adam.eps = parse_one(key, value)?,
            "weight_decay" => self.adam.weight_decay = parse_one(key, value)?,
            "clip_norm" => self.adam.clip_norm = parse_one(key, value)?,
            "batch_size" => self.batch_size = parse_one(key, value)?,
            "seed" => self.seed = parse_one(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        let e = |k: &str, v: String| (k.to_string(), v);
        vec![
            e("image_channels", join(&self.image_channels)),
            e("input_points", self.input_points.to_string()),
            e("sa_counts", join(&self.sa_counts)),
            e("sa_radii", join(&self.sa_radii)),
            e("sa_channels", join(&self.sa_channels)),
            e("group_size", self.group_size.to_string()),
            e("fp_channels", join(&self.fp_channels)),
            e("fu_channels", self.fu_channels.to_string()),
            e("fusion", self.fusion.to_string()),
            e("fusion_hidden", self.fusion_hidden.to_string()),
            e("head_hidden", self.head_hidden.to_string()),
            e("rpn_search_range", self.rpn_bins.search_range.to_string()),
            e("rpn_bin_size", self.rpn_bins.bin_size.to_string()),
            e("rcnn_search_range", self.rcnn_bins.search_range.to_string()),
            e("rcnn_bin_size", self.rcnn_bins.bin_size.to_string()),
            e("rpn_heading_bins", self.rpn_bins.num_heading_bins.to_string()),
            e("rcnn_heading_bins", self.rcnn_bins.num_heading_bins.to_string()),
            e("mean_size", join(&self.mean_size)),
            e("rpn_top_k", self.rpn_top_k.to_string()),
            e("rpn_nms", self.rpn_nms.to_string()),
            e("max_proposals", self.max_proposals.to_string()),
            e("rcnn_points", self.rcnn_points.to_string()),
            e("rcnn_channels", self.rcnn_channels.to_string()),
            e("rcnn_pos_iou", self.rcnn_pos_iou.to_string()),
            e("final_nms", self.final_nms.to_string()),
            e("lambda", self.loss.lambda.to_string()),
            e("focal_alpha", self.loss.alpha.to_string()),
            e("focal_gamma", self.loss.gamma.to_string()),
            e("smooth_l1_beta", self.loss.beta.to_string()),
            e("lr", self.adam.lr.to_string()),
            e("adam_beta1", self.adam.beta1.to_string()),
            e("adam_beta2", self.adam.beta2.to_string()),
            e("adam_eps", self.adam.eps.to_string()),
            e("weight_decay", self.adam.weight_decay.to_string()),
            e("clip_norm", self.adam.clip_norm.to_string()),
            e("batch_size", self.batch_size.to_string()),
            e("seed", self.seed.to_string()),
        ]
    }
}

impl TwoStreamConfig {
    pub fn rpn_coder(&self) -> BoxCoder {
        BoxCoder { bins: self.rpn_bins, mean_size: self.mean_size }
    }

    pub fn rcnn_coder(&self) -> BoxCoder {
        BoxCoder { bins: self.rcnn_bins, mean_size: self.mean_size }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Input(msg));
        if self.image_channels.contains(&0) || self.sa_channels.contains(&0) || self.fp_channels.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if self.fu_channels == 0 || self.head_hidden == 0 || self.rcnn_channels == 0 || self.group_size == 0 {
            return bad("fu_channels, head_hidden, rcnn_channels and group_size must be positive".into());
        }
        let mut prev = self.input_points;
        for &c in &self.sa_counts {
            if c == 0 || c > prev {
                return bad(format!("sa_counts {:?} must be positive and non-increasing from {}", self.sa_counts, self.input_points));
            }
            prev = c;
        }
        if !self.sa_radii.iter().all(|r| *r >= 0.0 && r.is_finite()) {
            return bad(format!("invalid sa_radii {:?}", self.sa_radii));
        }
        if self.mean_size.iter().any(|v| !(*v > 0.0)) {
            return bad(format!("invalid mean_size {:?}", self.mean_size));
        }
        for (name, v) in [("rpn_nms", self.rpn_nms), ("final_nms", self.final_nms), ("rcnn_pos_iou", self.rcnn_pos_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.rpn_top_k == 0 || self.max_proposals == 0 || self.rcnn_points == 0 || self.batch_size == 0 {
            return bad("rpn_top_k, max_proposals, rcnn_points and batch_size must be positive".into());
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0 && a.weight_decay >= 0.0 && a.clip_norm >= 0.0) {
            return bad(format!("invalid optimizer settings {a:?}"));
        }
        self.rpn_bins.validate()?;
        self.rcnn_bins.validate()?;
        self.loss.validate()
    }
}

/// Applies every pair, failing on keys no target recognizes.
pub fn apply_kv(pairs: &BTreeMap<String, String>, targets: &mut [&mut dyn KvConfig]) -> Result<()> {
    for (k, v) in pairs {
        let mut hit = false;
        for t in targets.iter_mut() {
            hit |= t.set(k, v)?;
        }
        if !hit {
            return Err(Error::Input(format!("unknown config key `{k}`")));
        }
    }
    Ok(())
}

/// `key = value` rendering of the resolved settings.
pub fn render_kv(sources: &[&dyn KvConfig]) -> String {
    let mut out = String::new();
    for s in sources {
        for (k, v) in s.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_roundtrip() {
        let mut cfg = TwoStreamConfig::default();
        cfg.fusion = FusionMode::Ungated;
        cfg.sa_radii = [0.25, 1.5, 2.0, 3.0];
        cfg.adam.lr = 0.01;
        let text = render_kv(&[&cfg]);
        let mut back = TwoStreamConfig::default();
        apply_kv(&parse_kv(&text).unwrap(), &mut [&mut back]).unwrap();
        assert_eq!(back, cfg);
        TwoStreamConfig::default().validate().unwrap();
    }

    #[test]
    fn kv_errors() {
        assert!(parse_kv("seed 3").unwrap_err().to_string().contains("line 1"));
        assert!(parse_kv("seed = 1\nseed = 2").unwrap_err().to_string().contains("duplicate"));
        let mut cfg = TwoStreamConfig::default();
        let err = apply_kv(&parse_kv("bogus = 1").unwrap(), &mut [&mut cfg]).unwrap_err();
        assert!(err.to_string().contains("bogus"));
        assert!(apply_kv(&parse_kv("sa_counts = 1,2").unwrap(), &mut [&mut cfg]).is_err());
        assert!(apply_kv(&parse_kv("fusion = maybe").unwrap(), &mut [&mut cfg]).is_err());
        let mut cfg = TwoStreamConfig::default();
        cfg.sa_counts = [1024, 2048, 64, 32];
        assert!(cfg.validate().is_err());
    }
}
