//! Training objectives: the consistency-enforcing loss `−log(c·IoU)`, focal
//! classification loss, smooth-L1 and bin-based box regression.
//!
//! ```
//! use lifusion::losses::{bin_decode, bin_encode, BinConfig};
//!
//! let cfg = BinConfig::default();
//! let t = bin_encode(-2.8, &cfg);
//! assert_eq!(t.bin, 0);
//! assert!((t.residual + 0.1).abs() < 1e-12);
//! assert!((bin_decode(t.bin, t.residual, &cfg).unwrap() + 2.8).abs() < 1e-12);
//! ```

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Box3D};
use crate::tensor::{Graph, Tensor, Var};

/// Lower clamp on IoU inside the logarithm.
pub const IOU_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinConfig {
    /// Half-width `S_r` of the search window, meters.
    pub search_range: f64,
    /// Bin width `δ`, meters.
    pub bin_size: f64,
    pub num_heading_bins: usize,
}

impl Default for BinConfig {
    fn default() -> Self {
        Self {
            search_range: 3.0,
            bin_size: 0.5,
            num_heading_bins: 12,
        }
    }
}

impl BinConfig {
    pub fn num_bins(&self) -> usize {
        (2.0 * self.search_range / self.bin_size).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let ratio = 2.0 * self.search_range / self.bin_size;
        if !(self.search_range > 0.0 && self.bin_size > 0.0)
            || (ratio - ratio.round()).abs() > 1e-9
            || ratio.round() < 1.0
            || self.num_heading_bins < 2
        {
            return Err(Error::Input(format!("invalid bin config {self:?}")));
        }
        Ok(())
    }
}

/// Bin index and normalized in-bin residual in `[−0.5, 0.5]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinTarget {
    pub bin: usize,
    pub residual: f64,
    /// The offset fell outside the search window and was clamped.
    pub clamped: bool,
}

fn encode_interval(offset: f64, lo: f64, width: f64, bins: usize) -> BinTarget {
    let span = width * bins as f64;
    let clamped = offset < lo || offset > lo + span;
    let x = offset.clamp(lo, lo + span);
    let bin = (((x - lo) / width).floor() as usize).min(bins - 1);
    BinTarget {
        bin,
        residual: (x - lo - (bin as f64 + 0.5) * width) / width,
        clamped,
    }
}

/// Offsets on a bin edge go to the higher bin, except the top edge.
pub fn bin_encode(offset: f64, cfg: &BinConfig) -> BinTarget {
    encode_interval(offset, -cfg.search_range, cfg.bin_size, cfg.num_bins())
}

pub fn bin_decode(bin: usize, residual: f64, cfg: &BinConfig) -> Result<f64> {
    if bin >= cfg.num_bins() {
        return Err(Error::Input(format!("bin {bin} out of range 0..{}", cfg.num_bins())));
    }
    Ok((bin as f64 + 0.5 + residual) * cfg.bin_size - cfg.search_range)
}

/// Heading bins partition `[−π, π]`.
pub fn heading_encode(theta: f64, cfg: &BinConfig) -> BinTarget {
    let n = cfg.num_heading_bins;
    encode_interval(wrap_angle(theta), -PI, 2.0 * PI / n as f64, n)
}

pub fn heading_decode(bin: usize, residual: f64, cfg: &BinConfig) -> Result<f64> {
    let n = cfg.num_heading_bins;
    if bin >= n {
        return Err(Error::Input(format!("heading bin {bin} out of range 0..{n}")));
    }
    Ok((bin as f64 + 0.5 + residual) * (2.0 * PI / n as f64) - PI)
}

/// Regression target of one box relative to an anchor point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxTarget {
    pub x_bin: usize,
    pub z_bin: usize,
    pub heading_bin: usize,
    /// `x, y, z, h, w, l, θ`: normalized bin residuals for `x, z, θ`, raw
    /// offsets for `y` and for the sizes against the mean size.
    pub residuals: [f64; 7],
}

/// Bin-based box parameterization around an anchor point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCoder {
    pub bins: BinConfig,
    /// `(h, w, l)`.
    pub mean_size: [f64; 3],
}

impl BoxCoder {
    pub fn encode(&self, anchor: [f64; 3], b: &Box3D) -> BoxTarget {
        let tx = bin_encode(b.x - anchor[0], &self.bins);
        let tz = bin_encode(b.z - anchor[2], &self.bins);
        let th = heading_encode(b.yaw, &self.bins);
        BoxTarget {
            x_bin: tx.bin,
            z_bin: tz.bin,
            heading_bin: th.bin,
            residuals: [
                tx.residual,
                b.y - anchor[1],
                tz.residual,
                b.h - self.mean_size[0],
                b.w - self.mean_size[1],
                b.l - self.mean_size[2],
                th.residual,
            ],
        }
    }

    /// Sizes are floored at 1 cm so every decode is a valid box.
    pub fn decode(&self, anchor: [f64; 3], t: &BoxTarget) -> Result<Box3D> {
        let r = &t.residuals;
        let x = anchor[0] + bin_decode(t.x_bin, r[0], &self.bins)?;
        let z = anchor[2] + bin_decode(t.z_bin, r[2], &self.bins)?;
        let yaw = heading_decode(t.heading_bin, r[6], &self.bins)?;
        let size = [
            (self.mean_size[0] + r[3]).max(0.01),
            (self.mean_size[1] + r[4]).max(0.01),
            (self.mean_size[2] + r[5]).max(0.01),
        ];
        Box3D::new([x, anchor[1] + r[1], z], size, yaw)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 5.0,
            alpha: 0.25,
            gamma: 2.0,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.alpha > 0.0 && self.alpha < 1.0 && self.gamma >= 0.0 && self.beta > 0.0) {
            return Err(Error::Input(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

/// Elementwise `−log(c · max(iou, 1e-6))`.
pub fn ce_loss(g: &mut Graph, c: Var, iou: Var) -> Result<Var> {
    if let Some(bad) = g.value(c).data().iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Domain(format!("confidence must be positive, got {bad}")));
    }
    let iou = g.clamp(iou, IOU_FLOOR, f64::INFINITY);
    let prod = g.mul(c, iou)?;
    let l = g.log(prod);
    Ok(g.neg(l))
}

/// Elementwise `−log(max(iou, 1e-6))`: the confidence-free baseline.
pub fn iou_loss(g: &mut Graph, iou: Var) -> Var {
    let iou = g.clamp(iou, IOU_FLOOR, f64::INFINITY);
    let l = g.log(iou);
    g.neg(l)
}

/// Mean focal loss; `α` weights positives and `1 − α` negatives.
pub fn focal_loss(g: &mut Graph, p: Var, targets: &[bool], alpha: f64, gamma: f64) -> Result<Var> {
    let n = g.value(p).numel();
    if targets.len() != n {
        return Err(Error::Dimension(format!("focal_loss: {n} probabilities but {} targets", targets.len())));
    }
    if let Some(bad) = g.value(p).data().iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Domain(format!("probability {bad} outside (0, 1)")));
    }
    let scale: Vec<f64> = targets.iter().map(|&t| if t { 1.0 } else { -1.0 }).collect();
    let shift: Vec<f64> = targets.iter().map(|&t| if t { 0.0 } else { 1.0 }).collect();
    let ct = g.affine_elem(p, &scale, &shift)?;
    let miss = g.affine(ct, -1.0, 1.0);
    let modulator = g.powf(miss, gamma);
    let log_ct = g.log(ct);
    let term = g.mul(modulator, log_ct)?;
    let weights: Vec<f64> = targets.iter().map(|&t| if t { -alpha } else { alpha - 1.0 }).collect();
    let weighted = g.affine_elem(term, &weights, &vec![0.0; n])?;
    Ok(g.mean(weighted))
}

/// Elementwise smooth-L1 with transition point `β`.
pub fn smooth_l1(g: &mut Graph, d: Var, beta: f64) -> Result<Var> {
    if !(beta > 0.0) {
        return Err(Error::Input(format!("smooth-L1 beta must be positive, got {beta}")));
    }
    Ok(g.smooth_l1(d, beta))
}

/// Predictions for `P` positives.
#[derive(Clone, Copy, Debug)]
pub struct RegPrediction {
    pub x_logits: Var,
    pub z_logits: Var,
    pub heading_logits: Var,
    /// `P×7`, ordered like [`BoxTarget::residuals`].
    pub residuals: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct RegLoss {
    pub bin: Var,
    pub res: Var,
    /// No positives: both terms are constant zeros.
    pub empty: bool,
}

/// Cross entropy over the x, z and heading bins plus smooth-L1 over the seven
/// residuals, each averaged over positives.
pub fn reg_loss(g: &mut Graph, pred: &RegPrediction, targets: &[BoxTarget], beta: f64) -> Result<RegLoss> {
    if targets.is_empty() {
        let z = g.constant(Tensor::scalar(0.0));
        return Ok(RegLoss { bin: z, res: z, empty: true });
    }
    let p = targets.len();
    let rows = g.shape(pred.residuals)[0];
    if rows != p {
        return Err(Error::Dimension(format!("reg_loss: {rows} predictions for {p} targets")));
    }
    let mut bin_terms = Vec::with_capacity(3);
    for (logits, pick) in [
        (pred.x_logits, (|t: &BoxTarget| t.x_bin) as fn(&BoxTarget) -> usize),
        (pred.z_logits, |t| t.z_bin),
        (pred.heading_logits, |t| t.heading_bin),
    ] {
        let idx: Vec<usize> = targets.iter().map(pick).collect();
        let xe = g.softmax_cross_entropy(logits, &idx)?;
        bin_terms.push(g.mean(xe));
    }
    let b01 = g.add(bin_terms[0], bin_terms[1])?;
    let bin = g.add(b01, bin_terms[2])?;
    let flat: Vec<f64> = targets.iter().flat_map(|t| t.residuals).collect();
    let neg_target: Vec<f64> = flat.iter().map(|v| -v).collect();
    let diff = g.affine_elem(pred.residuals, &vec![1.0; flat.len()], &neg_target)?;
    let sl1 = smooth_l1(g, diff, beta)?;
    let total = g.sum(sl1);
    let res = g.affine(total, 1.0 / p as f64, 0.0);
    Ok(RegLoss { bin, res, empty: false })
}

/// Graph nodes of one stage's loss terms.
#[derive(Clone, Copy, Debug)]
pub struct StageTerms {
    pub cls: Var,
    pub reg: RegLoss,
    pub ce: Var,
}

/// `cls + reg_bin + reg_res + λ·ce`.
pub fn stage_loss(g: &mut Graph, t: &StageTerms, lambda: f64) -> Result<Var> {
    let a = g.add(t.cls, t.reg.bin)?;
    let b = g.add(a, t.reg.res)?;
    let ce = g.affine(t.ce, lambda, 0.0);
    g.add(b, ce)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageValues {
    pub total: f64,
    pub cls: f64,
    pub reg_bin: f64,
    pub reg_res: f64,
    pub ce: f64,
}

impl StageValues {
    pub fn read(g: &Graph, t: &StageTerms, total: Var) -> Self {
        let v = |x: Var| g.value(x).item();
        Self {
            total: v(total),
            cls: v(t.cls),
            reg_bin: v(t.reg.bin),
            reg_res: v(t.reg.res),
            ce: v(t.ce),
        }
    }
}

/// Per-stage loss values of one training step; `total = rpn + rcnn`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub rpn: StageValues,
    pub rcnn: StageValues,
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::{iou_3d_axis_aligned_diff, DiffBoxes};
    use crate::tensor::finite_diff_check;

    fn scalar(g: &mut Graph, v: f64) -> Var {
        g.leaf(Tensor::scalar(v).requires_grad())
    }

    #[test]
    fn ce_loss_values_and_gradient() {
        let mut g = Graph::new();
        let (c, iou) = (scalar(&mut g, 1.0), scalar(&mut g, 1.0));
        let l = ce_loss(&mut g, c, iou).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let mut g = Graph::new();
        let (c, iou) = (scalar(&mut g, 0.5), scalar(&mut g, 0.5));
        let l = ce_loss(&mut g, c, iou).unwrap();
        assert!((g.value(l).item() - 1.386294).abs() < 1e-6);
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-15);
        g.backward(l).unwrap();
        assert!((g.grad(c).unwrap()[0] + 2.0).abs() < 1e-12);
        assert!((g.grad(iou).unwrap()[0] + 2.0).abs() < 1e-12);

        let r = finite_diff_check("ce_loss", &[Tensor::scalar(0.5), Tensor::scalar(0.5)], 1e-6, 0, |g, v| {
            ce_loss(g, v[0], v[1])
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-8);
    }

    #[test]
    fn ce_loss_rejects_nonpositive_confidence_and_floors_iou() {
        let mut g = Graph::new();
        let (c, iou) = (scalar(&mut g, 0.0), scalar(&mut g, 0.5));
        assert!(matches!(ce_loss(&mut g, c, iou), Err(Error::Domain(_))));
        let (c, iou) = (scalar(&mut g, 1.0), scalar(&mut g, 0.0));
        let l = ce_loss(&mut g, c, iou).unwrap();
        assert!((g.value(l).item() + IOU_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn focal_fixtures() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![1], vec![0.5]).unwrap());
        let l = focal_loss(&mut g, p, &[true], 0.25, 2.0).unwrap();
        assert!((g.value(l).item() - 0.0433217).abs() < 1e-6);
        assert!((g.value(l).item() - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);

        let near_one = g.constant(Tensor::new(vec![1], vec![1.0 - 1e-9]).unwrap());
        let l = focal_loss(&mut g, near_one, &[true], 0.25, 2.0).unwrap();
        assert!(g.value(l).item() < 1e-15);

        let bad = g.constant(Tensor::new(vec![1], vec![1.0]).unwrap());
        assert!(matches!(focal_loss(&mut g, bad, &[true], 0.25, 2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn focal_gradient_check() {
        let p = Tensor::new(vec![4], vec![0.2, 0.7, 0.45, 0.9]).unwrap();
        let r = finite_diff_check("focal", &[p], 1e-6, 0, |g, v| focal_loss(g, v[0], &[true, false, true, false], 0.25, 2.0))
            .unwrap();
        assert!(r.max_rel_err < 1e-7, "{r:?}");
    }

    #[test]
    fn smooth_l1_fixtures() {
        let mut g = Graph::new();
        let d = g.constant(Tensor::new(vec![4], vec![0.0, 0.5, 2.0, -2.0]).unwrap());
        let l = smooth_l1(&mut g, d, 1.0).unwrap();
        assert_eq!(g.value(l).data(), &[0.0, 0.125, 1.5, 1.5]);
        assert!(smooth_l1(&mut g, d, 0.0).is_err());
    }

    #[test]
    fn bin_fixtures() {
        let cfg = BinConfig::default();
        assert_eq!(cfg.num_bins(), 12);
        let t = bin_encode(0.0, &cfg);
        assert_eq!((t.bin, t.residual, t.clamped), (6, -0.5, false));
        let t = bin_encode(-2.8, &cfg);
        assert_eq!(t.bin, 0);
        assert!((t.residual + 0.1).abs() < 1e-12);
        let top = bin_encode(3.0, &cfg);
        assert_eq!((top.bin, top.residual, top.clamped), (11, 0.5, false));
        let out = bin_encode(4.0, &cfg);
        assert!(out.clamped && out.bin == 11);
        assert!(bin_decode(12, 0.0, &cfg).is_err());
        assert!(BinConfig { search_range: 3.0, bin_size: 0.7, num_heading_bins: 12 }.validate().is_err());
        let odd = BinConfig { search_range: 1.75, bin_size: 0.5, num_heading_bins: 9 };
        odd.validate().unwrap();
        assert_eq!(odd.num_bins(), 7);
        let t = bin_encode(0.0, &odd);
        assert_eq!((t.bin, t.residual), (3, 0.0));
        assert_eq!(heading_encode(0.0, &odd).bin, 4);
    }

    #[test]
    fn bin_roundtrip_thousand_offsets() {
        let cfg = BinConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let x = (2.0 * rng.random::<f64>() - 1.0) * cfg.search_range;
            let t = bin_encode(x, &cfg);
            assert!((-0.5..=0.5).contains(&t.residual));
            assert!((bin_decode(t.bin, t.residual, &cfg).unwrap() - x).abs() <= 1e-12);
            let th = (2.0 * rng.random::<f64>() - 1.0) * PI;
            let h = heading_encode(th, &cfg);
            assert!((heading_decode(h.bin, h.residual, &cfg).unwrap() - th).abs() <= 1e-12);
        }
    }

    #[test]
    fn box_coder_roundtrip_and_zero_decode() {
        let coder = BoxCoder { bins: BinConfig::default(), mean_size: [1.55, 1.65, 3.8] };
        let b = Box3D::new([1.2, 1.7, 9.4], [1.5, 1.7, 4.0], 0.3).unwrap();
        for anchor in [[1.2, 1.7, 9.4], [0.4, 1.0, 8.0]] {
            let t = coder.encode(anchor, &b);
            let d = coder.decode(anchor, &t).unwrap();
            for (x, y) in [(d.x, b.x), (d.y, b.y), (d.z, b.z), (d.h, b.h), (d.w, b.w), (d.l, b.l), (d.yaw, b.yaw)] {
                assert!((x - y).abs() <= 1e-9);
            }
            let again = coder.encode(anchor, &d);
            assert_eq!((again.x_bin, again.z_bin, again.heading_bin), (t.x_bin, t.z_bin, t.heading_bin));
            for k in 0..7 {
                assert!((again.residuals[k] - t.residuals[k]).abs() <= 1e-9);
            }
        }
        let zero = BoxTarget { x_bin: 6, z_bin: 6, heading_bin: 6, residuals: [0.0; 7] };
        let d = coder.decode([0.0, 1.0, 5.0], &zero).unwrap();
        assert_eq!((d.h, d.w, d.l), (1.55, 1.65, 3.8));
        assert_eq!((d.x, d.y, d.z), (0.25, 1.0, 5.25));
        assert!((d.yaw - PI / 12.0).abs() < 1e-12);
    }

    fn one_hot_prediction(g: &mut Graph, t: &BoxTarget, margin: f64, residuals: [f64; 7]) -> RegPrediction {
        let mut logits = |bin: usize, n: usize| {
            let mut v = vec![0.0; n];
            v[bin] = margin;
            g.constant(Tensor::new(vec![1, n], v).unwrap())
        };
        RegPrediction {
            x_logits: logits(t.x_bin, 12),
            z_logits: logits(t.z_bin, 12),
            heading_logits: logits(t.heading_bin, 12),
            residuals: g.constant(Tensor::new(vec![1, 7], residuals.to_vec()).unwrap()),
        }
    }

    #[test]
    fn reg_loss_optimum_empty_and_monotone() {
        let t = BoxTarget { x_bin: 3, z_bin: 8, heading_bin: 5, residuals: [0.1, -0.2, 0.3, 0.05, -0.1, 0.2, -0.4] };
        let mut g = Graph::new();
        let pred = one_hot_prediction(&mut g, &t, 20.0, t.residuals);
        let r = reg_loss(&mut g, &pred, &[t], 1.0).unwrap();
        let total = g.value(r.bin).item() + g.value(r.res).item();
        assert!(total <= 1e-3 && !r.empty);

        let r = reg_loss(&mut g, &pred, &[], 1.0).unwrap();
        assert!(r.empty && g.value(r.bin).item() == 0.0 && g.value(r.res).item() == 0.0);

        let mut last = -1.0;
        for step in 0..10 {
            let mut res = t.residuals;
            res[0] += 0.04 * step as f64;
            let mut g = Graph::new();
            let pred = one_hot_prediction(&mut g, &t, 20.0, res);
            let r = reg_loss(&mut g, &pred, &[t], 1.0).unwrap();
            let v = g.value(r.res).item();
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn stage_composition() {
        let mut g = Graph::new();
        let cls = g.constant(Tensor::scalar(0.3));
        let bin = g.constant(Tensor::scalar(0.2));
        let res = g.constant(Tensor::scalar(0.1));
        let ce = g.constant(Tensor::scalar(0.4));
        let t = StageTerms { cls, reg: RegLoss { bin, res, empty: false }, ce };
        let l0 = stage_loss(&mut g, &t, 0.0).unwrap();
        assert!((g.value(l0).item() - 0.6).abs() < 1e-12);
        let l5 = stage_loss(&mut g, &t, LossWeights::default().lambda).unwrap();
        assert!((g.value(l5).item() - 2.6).abs() < 1e-12);
        let v = StageValues::read(&g, &t, l5);
        assert!((v.total - (v.cls + v.reg_bin + v.reg_res + 5.0 * v.ce)).abs() <= 1e-9);
        let both = g.add(l0, l5).unwrap();
        assert!((g.value(both).item() - 3.2).abs() < 1e-12);
        let json = serde_json::to_value(LossBreakdown { total: 1.0, rpn: v, rcnn: v }).unwrap();
        assert!(json["rpn"]["ce"].is_number() && json["rcnn"]["reg_bin"].is_number());
    }

    #[test]
    fn ce_descent_raises_confidence_and_iou_jointly() {
        // Confidence from a logit, IoU from an axis-aligned box whose center is free.
        let target = Box3D::new([0.0, 1.0, 0.0], [1.0, 1.0, 1.0], 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut logit = 2.0 * rng.random::<f64>() - 1.0;
            let mut x = 0.8 * (2.0 * rng.random::<f64>() - 1.0);
            let mut history = Vec::new();
            for _ in 0..30 {
                let mut g = Graph::new();
                let lv = g.leaf(Tensor::new(vec![1], vec![logit]).unwrap().requires_grad());
                let xv = g.leaf(Tensor::new(vec![1], vec![x]).unwrap().requires_grad());
                let k = |g: &mut Graph, v: f64| g.constant(Tensor::new(vec![1], vec![v]).unwrap());
                let db = DiffBoxes { x: xv, y: k(&mut g, 1.0), z: k(&mut g, 0.0), h: k(&mut g, 1.0), w: k(&mut g, 1.0), l: k(&mut g, 1.0) };
                let iou = iou_3d_axis_aligned_diff(&mut g, &db, &[target]).unwrap();
                let c = g.sigmoid(lv);
                let l = ce_loss(&mut g, c, iou).unwrap();
                let s = g.sum(l);
                g.backward(s).unwrap();
                history.push((g.value(c).data()[0], g.value(iou).data()[0]));
                logit -= 0.1 * g.grad(lv).unwrap()[0];
                x -= 0.05 * g.grad(xv).unwrap()[0];
            }
            let (first, last) = (history[0], history[history.len() - 1]);
            assert!(last.0 > first.0 && last.1 > first.1, "{first:?} -> {last:?}");
        }
    }

    #[test]
    fn focal_with_zero_gamma_is_scaled_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let probs: Vec<f64> = (0..16).map(|_| 0.01 + 0.98 * rng.random::<f64>()).collect();
        let targets: Vec<bool> = (0..16).map(|i| i % 3 == 0).collect();
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![16], probs.clone()).unwrap());
        let l = focal_loss(&mut g, p, &targets, 0.5, 0.0).unwrap();
        let bce: f64 = probs
            .iter()
            .zip(&targets)
            .map(|(&p, &t)| if t { -p.ln() } else { -(1.0 - p).ln() })
            .sum::<f64>()
            / 16.0;
        assert!((g.value(l).item() - 0.5 * bce).abs() <= 1e-12);
    }

    proptest! {
        #[test]
        fn ce_loss_strictly_decreasing(c in 0.01f64..0.99, iou in 0.01f64..0.99) {
            let mut g = Graph::new();
            let cv = g.leaf(Tensor::scalar(c).requires_grad());
            let iv = g.leaf(Tensor::scalar(iou).requires_grad());
            let l = ce_loss(&mut g, cv, iv).unwrap();
            prop_assert!(g.value(l).item() > 0.0);
            g.backward(l).unwrap();
            prop_assert!(g.grad(cv).unwrap()[0] < 0.0);
            prop_assert!(g.grad(iv).unwrap()[0] < 0.0);
        }

        #[test]
        fn losses_are_nonnegative(p in 0.001f64..0.999, t: bool, d in -5.0f64..5.0) {
            let mut g = Graph::new();
            let pv = g.constant(Tensor::new(vec![1], vec![p]).unwrap());
            let f = focal_loss(&mut g, pv, &[t], 0.25, 2.0).unwrap();
            prop_assert!(g.value(f).item() >= 0.0);
            let dv = g.constant(Tensor::scalar(d));
            let s = smooth_l1(&mut g, dv, 1.0).unwrap();
            prop_assert!(g.value(s).item() >= 0.0);
        }
    }
}
