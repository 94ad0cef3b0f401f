use rand::Rng;

use super::config::{FusionMode, LossMode, TwoStreamConfig};
use super::image_stream::{ImageFeatures, ImageStream};
use super::params::{uniform_init, Bound, ParamId, ParamStore};
use super::point_stream::{fp_forward, sa_forward, LinearVars, PointHierarchy};
use crate::error::{Error, Result};
use crate::eval::{nms_indices, Detection};
use crate::fusion::{default_hidden, fuse, fuse_ungated, generate_grid, sample_point_features, FusionParams, PointImageCorrespondence};
use crate::geometry::{iou_3d, iou_3d_axis_aligned_diff, wrap_angle, Box3D, DiffBoxes, ProjectionMatrix};
use crate::kitti::{subsample_indices, Image, RangeBox, Scene, TARGET_CLASS};
use crate::losses::{ce_loss, focal_loss, iou_loss, reg_loss, stage_loss, BoxCoder, BoxTarget, RegLoss, RegPrediction, StageTerms};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn build(store: &mut ParamStore, name: &str, cin: usize, cout: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let w = store.push(format!("{name}.weight"), uniform_init(&[cin, cout], cin, gain, rng));
        let b = store.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b }
    }

    pub fn vars(&self, p: &Bound) -> LinearVars {
        LinearVars { w: p[self.w], b: p[self.b] }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p[self.w], Some(p[self.b]))
    }
}

/// Shared hidden layer followed by a foreground logit and bin/residual outputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Heads {
    pub hidden: Linear,
    pub cls: Linear,
    pub reg: Linear,
    pub loc_bins: usize,
    pub heading_bins: usize,
}

impl Heads {
    fn build(store: &mut ParamStore, name: &str, cin: usize, hidden: usize, coder: &BoxCoder, rng: &mut impl Rng) -> Self {
        let (loc_bins, heading_bins) = (coder.bins.num_bins(), coder.bins.num_heading_bins);
        Self {
            hidden: Linear::build(store, &format!("{name}.hidden"), cin, hidden, 1.0, rng),
            cls: Linear::build(store, &format!("{name}.cls"), hidden, 1, 0.1, rng),
            reg: Linear::build(store, &format!("{name}.reg"), hidden, 2 * loc_bins + heading_bins + 7, 0.1, rng),
            loc_bins,
            heading_bins,
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<HeadOutput> {
        let h = self.hidden.forward(g, p, x)?;
        let h = g.relu(h);
        let logit = self.cls.forward(g, p, h)?;
        let prob = g.sigmoid(logit);
        let probs = g.clamp(prob, PROB_EPS, 1.0 - PROB_EPS);
        let reg = self.reg.forward(g, p, h)?;
        let (nb, nh) = (self.loc_bins, self.heading_bins);
        let x_logits = g.slice_cols(reg, 0, nb)?;
        let z_logits = g.slice_cols(reg, nb, 2 * nb)?;
        let heading_logits = g.slice_cols(reg, 2 * nb, 2 * nb + nh)?;
        let residuals = g.slice_cols(reg, 2 * nb + nh, 2 * nb + nh + 7)?;
        Ok(HeadOutput {
            probs,
            reg: RegPrediction { x_logits, z_logits, heading_logits, residuals },
        })
    }
}

/// Probabilities are kept inside `[1e-7, 1 − 1e-7]`.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `N×1` foreground probabilities.
    pub probs: Var,
    pub reg: RegPrediction,
}

/// Parameter layout of the two-stream detector.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: TwoStreamConfig,
    pub image: Option<ImageStream>,
    pub sa: Vec<Linear>,
    pub fp: Vec<Linear>,
    /// Gates of the five fusion sites (four stages and the final map).
    pub gates: Vec<[ParamId; 3]>,
    pub rpn: Heads,
    pub rcnn_point: Linear,
    pub rcnn: Heads,
    pub feature_width: usize,
}

/// One scene ready for the network: canonical point order, image tensor,
/// targets and the precomputed point hierarchy.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedScene {
    pub points: Vec<[f64; 3]>,
    pub reflectance: Vec<f64>,
    pub image: Tensor,
    pub projection: ProjectionMatrix,
    /// Target-class boxes.
    pub gts: Vec<Box3D>,
    pub hierarchy: PointHierarchy,
    /// Levels 1..4 at strides 2..16, then level 0 at stride 1.
    pub correspondences: Vec<PointImageCorrespondence>,
    /// Ground-truth index of each foreground point.
    pub foreground: Vec<Option<usize>>,
}

impl PreparedScene {
    pub fn foreground_count(&self) -> usize {
        self.foreground.iter().flatten().count()
    }
}

/// Points in canonical (lexicographic) order with their image and targets.
pub fn prepare_points(
    points: &[[f64; 3]],
    reflectance: &[f64],
    image: &Image,
    projection: ProjectionMatrix,
    gts: Vec<Box3D>,
    cfg: &TwoStreamConfig,
) -> Result<PreparedScene> {
    if points.len() != reflectance.len() {
        return Err(Error::Input(format!("{} points but {} reflectance values", points.len(), reflectance.len())));
    }
    if points.len() != cfg.input_points {
        return Err(Error::Contract(format!("expected {} points, got {}", cfg.input_points, points.len())));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    let key = |i: usize| [points[i][0], points[i][1], points[i][2], reflectance[i]];
    order.sort_by(|&a, &b| {
        key(a).iter().zip(key(b).iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    let points: Vec<[f64; 3]> = order.iter().map(|&i| points[i]).collect();
    let reflectance: Vec<f64> = order.iter().map(|&i| reflectance[i]).collect();
    let hierarchy = PointHierarchy::build(&points, &cfg.sa_counts, &cfg.sa_radii, cfg.group_size, cfg.seed)?;
    let extent = (image.height(), image.width());
    let mut correspondences = Vec::with_capacity(5);
    for s in 0..4 {
        correspondences.push(generate_grid(&hierarchy.levels[s + 1], &projection, 2 << s, extent)?);
    }
    correspondences.push(generate_grid(&points, &projection, 1, extent)?);
    let foreground = points.iter().map(|p| gts.iter().position(|b| b.contains(*p))).collect();
    Ok(PreparedScene {
        points,
        reflectance,
        image: image.to_tensor(),
        projection,
        gts,
        hierarchy,
        correspondences,
        foreground,
    })
}

/// Range crop, seeded subsample to `cfg.input_points`, then [`prepare_points`].
pub fn prepare_scene(scene: &Scene, cfg: &TwoStreamConfig, seed: u64) -> Result<PreparedScene> {
    let s = scene.preprocess(&RangeBox::default(), cfg.input_points, seed)?;
    prepare_points(&s.points, &s.reflectance, &s.image, s.projection(), s.boxes_of(TARGET_CLASS), cfg)
}

/// Proposals of one scene, sorted by confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet {
    pub boxes: Vec<Box3D>,
    pub confidences: Vec<f64>,
    /// Point that produced each proposal.
    pub source: Vec<usize>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Top-`top_k` by confidence, then optional suppression, then at most
/// `max_keep` survivors.
pub fn generate_proposals(boxes: &[Box3D], scores: &[f64], top_k: usize, nms: Option<f64>, max_keep: usize) -> ProposalSet {
    let mut order: Vec<usize> = (0..boxes.len().min(scores.len())).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(top_k);
    let keep: Vec<usize> = match nms {
        Some(t) => {
            let bx: Vec<Box3D> = order.iter().map(|&i| boxes[i]).collect();
            let sc: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
            nms_indices(&bx, &sc, t, max_keep).into_iter().map(|k| order[k]).collect()
        }
        None => order.into_iter().take(max_keep).collect(),
    };
    ProposalSet {
        boxes: keep.iter().map(|&i| boxes[i]).collect(),
        confidences: keep.iter().map(|&i| scores[i]).collect(),
        source: keep,
    }
}

/// Origin and yaw of the frame a box is regressed in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub origin: [f64; 3],
    pub yaw: f64,
}

impl Frame {
    pub fn at(origin: [f64; 3]) -> Self {
        Self { origin, yaw: 0.0 }
    }

    pub fn of_box(b: &Box3D) -> Self {
        Self { origin: b.center(), yaw: b.yaw }
    }

    /// `b` expressed in this frame.
    pub fn to_local(&self, b: &Box3D) -> Box3D {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dz) = (b.x - self.origin[0], b.z - self.origin[2]);
        Box3D {
            x: c * dx - s * dz,
            y: b.y - self.origin[1],
            z: s * dx + c * dz,
            yaw: wrap_angle(b.yaw - self.yaw),
            ..*b
        }
    }

    pub fn to_world(&self, b: &Box3D) -> Box3D {
        let (s, c) = self.yaw.sin_cos();
        Box3D {
            x: self.origin[0] + c * b.x + s * b.z,
            y: self.origin[1] + b.y,
            z: self.origin[2] - s * b.x + c * b.z,
            yaw: wrap_angle(b.yaw + self.yaw),
            ..*b
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Highest-scoring bins with the predicted residuals, per row.
pub fn read_targets(g: &Graph, reg: &RegPrediction) -> Vec<BoxTarget> {
    let (xl, zl, hl, res) = (g.value(reg.x_logits), g.value(reg.z_logits), g.value(reg.heading_logits), g.value(reg.residuals));
    (0..res.shape()[0])
        .map(|i| {
            let mut residuals = [0.0; 7];
            residuals.copy_from_slice(res.row(i));
            BoxTarget {
                x_bin: argmax(xl.row(i)),
                z_bin: argmax(zl.row(i)),
                heading_bin: argmax(hl.row(i)),
                residuals,
            }
        })
        .collect()
}

pub fn decode_boxes(coder: &BoxCoder, frames: &[Frame], targets: &[BoxTarget]) -> Result<Vec<Box3D>> {
    frames
        .iter()
        .zip(targets)
        .map(|(f, t)| Ok(f.to_world(&coder.decode([0.0; 3], t)?)))
        .collect()
}

/// Decoded centers and sizes as graph values, with the bins held fixed.
fn decode_diff(g: &mut Graph, coder: &BoxCoder, residuals: Var, bins: &[(usize, usize)], frames: &[Frame]) -> Result<DiffBoxes> {
    let (d, sr) = (coder.bins.bin_size, coder.bins.search_range);
    let col = |g: &mut Graph, k: usize| g.slice_cols(residuals, k, k + 1);
    let n = frames.len();
    let ones = vec![1.0; n];
    let zeros = vec![0.0; n];
    let cx: Vec<f64> = bins.iter().map(|&(bx, _)| (bx as f64 + 0.5) * d - sr).collect();
    let cz: Vec<f64> = bins.iter().map(|&(_, bz)| (bz as f64 + 0.5) * d - sr).collect();
    let rx = col(g, 0)?;
    let lx = g.affine_elem(rx, &vec![d; n], &cx)?;
    let rz = col(g, 2)?;
    let lz = g.affine_elem(rz, &vec![d; n], &cz)?;
    let cos: Vec<f64> = frames.iter().map(|f| f.yaw.cos()).collect();
    let sin: Vec<f64> = frames.iter().map(|f| f.yaw.sin()).collect();
    let neg_sin: Vec<f64> = sin.iter().map(|v| -v).collect();
    let ox: Vec<f64> = frames.iter().map(|f| f.origin[0]).collect();
    let oy: Vec<f64> = frames.iter().map(|f| f.origin[1]).collect();
    let oz: Vec<f64> = frames.iter().map(|f| f.origin[2]).collect();
    let xa = g.affine_elem(lx, &cos, &ox)?;
    let xb = g.affine_elem(lz, &sin, &zeros)?;
    let x = g.add(xa, xb)?;
    let za = g.affine_elem(lx, &neg_sin, &oz)?;
    let zb = g.affine_elem(lz, &cos, &zeros)?;
    let z = g.add(za, zb)?;
    let ry = col(g, 1)?;
    let y = g.affine_elem(ry, &ones, &oy)?;
    let mut size = [x; 3];
    for (k, s) in size.iter_mut().enumerate() {
        let r = col(g, 3 + k)?;
        let v = g.affine(r, 1.0, coder.mean_size[k]);
        *s = g.clamp(v, 0.01, f64::INFINITY);
    }
    Ok(DiffBoxes { x, y, z, h: size[0], w: size[1], l: size[2] })
}

fn gather_prediction(g: &mut Graph, reg: &RegPrediction, rows: &[usize]) -> Result<RegPrediction> {
    Ok(RegPrediction {
        x_logits: g.gather_rows(reg.x_logits, rows)?,
        z_logits: g.gather_rows(reg.z_logits, rows)?,
        heading_logits: g.gather_rows(reg.heading_logits, rows)?,
        residuals: g.gather_rows(reg.residuals, rows)?,
    })
}

/// Output of the point/image streams for one scene.
#[derive(Clone, Debug)]
pub struct StreamOutput {
    /// `N×C` per input point, canonical order.
    pub features: Var,
    /// `N_site×1` gate values of each gated fusion site.
    pub weight_maps: Vec<Var>,
    pub image: Option<ImageFeatures>,
}

/// Graph nodes of one scene's training objective.
#[derive(Clone, Copy, Debug)]
pub struct SceneLoss {
    pub total: Var,
    pub rpn: StageTerms,
    pub rpn_total: Var,
    pub rcnn: StageTerms,
    pub rcnn_total: Var,
}

/// Detections of one scene before and after refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneDetections {
    pub proposals: ProposalSet,
    pub refined: Vec<Detection>,
}

impl Model {
    pub fn build(config: &TwoStreamConfig, rng: &mut impl Rng) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let cfg = config.clone();
        let mut store = ParamStore::new();
        let image = match cfg.fusion {
            FusionMode::None => None,
            _ => Some(ImageStream::build(&mut store, cfg.image_channels, cfg.fu_channels, rng)),
        };
        let img_ch = |i: usize| if image.is_some() { cfg.image_channels[i] } else { 0 };
        let mut widths = vec![1usize];
        let mut sa = Vec::with_capacity(4);
        let mut gates = Vec::new();
        for i in 0..4 {
            sa.push(Linear::build(&mut store, &format!("point.sa{i}"), 3 + widths[i], cfg.sa_channels[i], 1.0, rng));
            if cfg.fusion == FusionMode::Gated {
                gates.push(gate(&mut store, &format!("fusion.site{i}"), cfg.sa_channels[i], img_ch(i), cfg.fusion_hidden, rng));
            }
            widths.push(cfg.sa_channels[i] + img_ch(i));
        }
        let mut fp = Vec::with_capacity(4);
        let mut coarse = widths[4];
        for (j, level) in (0..4).rev().enumerate() {
            fp.push(Linear::build(&mut store, &format!("point.fp{j}"), coarse + widths[level], cfg.fp_channels[j], 1.0, rng));
            coarse = cfg.fp_channels[j];
        }
        let fu = image.as_ref().map_or(0, ImageStream::fu_width);
        if cfg.fusion == FusionMode::Gated {
            gates.push(gate(&mut store, "fusion.final", coarse, fu, cfg.fusion_hidden, rng));
        }
        let feature_width = coarse + fu;
        let rpn = Heads::build(&mut store, "rpn", feature_width, cfg.head_hidden, &cfg.rpn_coder(), rng);
        let rcnn_point = Linear::build(&mut store, "rcnn.point", 3 + feature_width, cfg.rcnn_channels, 1.0, rng);
        let rcnn = Heads::build(&mut store, "rcnn", cfg.rcnn_channels, cfg.head_hidden, &cfg.rcnn_coder(), rng);
        let model = Self { config: cfg, image, sa, fp, gates, rpn, rcnn_point, rcnn, feature_width };
        Ok((model, store))
    }

    fn fuse_site(&self, g: &mut Graph, p: &Bound, site: usize, fp: Var, fi: Var, maps: &mut Vec<Var>) -> Result<Var> {
        match self.config.fusion {
            FusionMode::None => Ok(fp),
            FusionMode::Ungated => fuse_ungated(g, fp, fi),
            FusionMode::Gated => {
                let [u, v, w] = self.gates[site];
                let out = fuse(g, &FusionParams { u: p[u], v: p[v], w: p[w] }, fp, fi)?;
                maps.push(out.weight_map);
                Ok(out.fused)
            }
        }
    }

    /// Point features after the set-abstraction, propagation and fusion stages.
    pub fn two_stream_forward(&self, g: &mut Graph, p: &Bound, scene: &PreparedScene) -> Result<StreamOutput> {
        let h = &scene.hierarchy;
        let image = match &self.image {
            Some(stream) => {
                let img = g.constant(scene.image.clone());
                Some(stream.forward(g, p, img)?)
            }
            None => None,
        };
        let mut maps = Vec::new();
        let mut feats = vec![g.constant(Tensor::column(&scene.reflectance))];
        for i in 0..4 {
            let s = sa_forward(g, self.sa[i].vars(p), &h.levels[i], feats[i], &h.groups[i], h.radii[i])?;
            let fused = match &image {
                Some(im) => {
                    let fi = sample_point_features(g, im.blocks[i], &scene.correspondences[i])?;
                    self.fuse_site(g, p, i, s, fi, &mut maps)?
                }
                None => s,
            };
            feats.push(fused);
        }
        let mut x = feats[4];
        for (j, level) in (0..4).rev().enumerate() {
            x = fp_forward(g, self.fp[j].vars(p), x, h.interp[level].clone(), feats[level])?;
        }
        let features = match &image {
            Some(im) => {
                let fi = sample_point_features(g, im.fu, &scene.correspondences[4])?;
                self.fuse_site(g, p, 4, x, fi, &mut maps)?
            }
            None => x,
        };
        Ok(StreamOutput { features, weight_maps: maps, image })
    }

    /// Foreground probability and box parameters per point.
    pub fn rpn_heads(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<HeadOutput> {
        self.rpn.forward(g, p, features)
    }

    /// Decoded per-point boxes and foreground probabilities.
    pub fn rpn_boxes(&self, g: &Graph, scene: &PreparedScene, heads: &HeadOutput) -> Result<(Vec<Box3D>, Vec<f64>)> {
        let frames: Vec<Frame> = scene.points.iter().map(|&p| Frame::at(p)).collect();
        let boxes = decode_boxes(&self.config.rpn_coder(), &frames, &read_targets(g, &heads.reg))?;
        Ok((boxes, g.value(heads.probs).data().to_vec()))
    }

    /// Pools the features of up to `rcnn_points` in-box points per proposal
    /// (zero descriptor for empty boxes) and applies the refinement heads.
    /// `None` without proposals.
    pub fn refine(
        &self,
        g: &mut Graph,
        p: &Bound,
        scene: &PreparedScene,
        features: Var,
        proposals: &[Box3D],
        seed: u64,
    ) -> Result<Option<HeadOutput>> {
        if proposals.is_empty() {
            return Ok(None);
        }
        let budget = self.config.rcnn_points;
        let mut rel = Vec::new();
        let mut flat = Vec::new();
        let mut slots = Vec::with_capacity(proposals.len() * budget);
        for (j, b) in proposals.iter().enumerate() {
            let inside: Vec<usize> = (0..scene.points.len()).filter(|&i| b.contains(scene.points[i])).collect();
            let picked: Vec<usize> = if inside.len() > budget {
                subsample_indices(inside.len(), budget, seed ^ (j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))?
                    .into_iter()
                    .map(|k| inside[k])
                    .collect()
            } else {
                inside
            };
            for s in 0..budget {
                match picked.get(s) {
                    Some(&i) => {
                        slots.push(vec![(flat.len(), 1.0)]);
                        rel.extend(b.to_local(scene.points[i]));
                        flat.push(i);
                    }
                    None => slots.push(Vec::new()),
                }
            }
        }
        let c = self.config.rcnn_channels;
        let desc = if flat.is_empty() {
            g.constant(Tensor::zeros(&[proposals.len(), c]))
        } else {
            let rel = g.constant(Tensor::new(vec![flat.len(), 3], rel)?);
            let gathered = g.gather_rows(features, &flat)?;
            let x = g.concat(rel, gathered)?;
            let h = self.rcnn_point.forward(g, p, x)?;
            let h = g.relu(h);
            let padded = g.sparse_mix(h, slots)?;
            let grouped = g.reshape(padded, &[proposals.len(), budget, c])?;
            g.grouped_max(grouped)?
        };
        Ok(Some(self.rcnn.forward(g, p, desc)?))
    }

    #[allow(clippy::too_many_arguments)]
    fn third_term(
        &self,
        g: &mut Graph,
        mode: LossMode,
        coder: &BoxCoder,
        heads: &HeadOutput,
        rows: &[usize],
        frames: &[Frame],
        gts: &[Box3D],
    ) -> Result<Var> {
        if mode == LossMode::None || rows.is_empty() {
            return Ok(g.constant(Tensor::scalar(0.0)));
        }
        let pred = gather_prediction(g, &heads.reg, rows)?;
        let bins: Vec<(usize, usize)> = read_targets(g, &pred).iter().map(|t| (t.x_bin, t.z_bin)).collect();
        let boxes = decode_diff(g, coder, pred.residuals, &bins, frames)?;
        let iou = iou_3d_axis_aligned_diff(g, &boxes, gts)?;
        let per = match mode {
            LossMode::Ce => {
                let c = g.gather_rows(heads.probs, rows)?;
                ce_loss(g, c, iou)?
            }
            _ => iou_loss(g, iou),
        };
        Ok(g.mean(per))
    }

    /// Both stages' objectives on one scene. Refinement trains on the
    /// suppressed proposals plus the ground-truth boxes.
    pub fn scene_loss(&self, g: &mut Graph, p: &Bound, scene: &PreparedScene, mode: LossMode, seed: u64) -> Result<SceneLoss> {
        let cfg = &self.config;
        let lw = &cfg.loss;
        let stream = self.two_stream_forward(g, p, scene)?;
        let heads = self.rpn_heads(g, p, stream.features)?;

        let labels: Vec<bool> = scene.foreground.iter().map(Option::is_some).collect();
        let cls = focal_loss(g, heads.probs, &labels, lw.alpha, lw.gamma)?;
        let coder = cfg.rpn_coder();
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
        let frames: Vec<Frame> = rows.iter().map(|&i| Frame::at(scene.points[i])).collect();
        let gts: Vec<Box3D> = rows.iter().map(|&i| scene.gts[scene.foreground[i].expect("foreground row")]).collect();
        let targets: Vec<BoxTarget> = frames.iter().zip(&gts).map(|(f, b)| coder.encode([0.0; 3], &f.to_local(b))).collect();
        let pred = gather_prediction(g, &heads.reg, &rows)?;
        let reg = reg_loss(g, &pred, &targets, lw.beta)?;
        let ce = self.third_term(g, mode, &coder, &heads, &rows, &frames, &gts)?;
        let rpn = StageTerms { cls, reg, ce };
        let rpn_total = stage_loss(g, &rpn, lw.lambda)?;

        let (boxes, scores) = self.rpn_boxes(g, scene, &heads)?;
        let mut proposals = generate_proposals(&boxes, &scores, cfg.rpn_top_k, Some(cfg.rpn_nms), cfg.max_proposals).boxes;
        proposals.extend(scene.gts.iter().copied());
        let (rcnn, rcnn_total) = match self.refine(g, p, scene, stream.features, &proposals, seed)? {
            Some(out) => {
                let rc = cfg.rcnn_coder();
                let mut labels = Vec::with_capacity(proposals.len());
                let mut rows = Vec::new();
                let mut frames = Vec::new();
                let mut gts = Vec::new();
                for (j, b) in proposals.iter().enumerate() {
                    let best = scene
                        .gts
                        .iter()
                        .map(|t| (iou_3d(b, t), *t))
                        .max_by(|a, c| a.0.total_cmp(&c.0));
                    let pos = matches!(best, Some((iou, _)) if iou > cfg.rcnn_pos_iou);
                    labels.push(pos);
                    if let (true, Some((_, t))) = (pos, best) {
                        rows.push(j);
                        frames.push(Frame::of_box(b));
                        gts.push(t);
                    }
                }
                let cls = focal_loss(g, out.probs, &labels, lw.alpha, lw.gamma)?;
                let targets: Vec<BoxTarget> = frames.iter().zip(&gts).map(|(f, t)| rc.encode([0.0; 3], &f.to_local(t))).collect();
                let pred = gather_prediction(g, &out.reg, &rows)?;
                let reg = reg_loss(g, &pred, &targets, lw.beta)?;
                let ce = self.third_term(g, mode, &rc, &out, &rows, &frames, &gts)?;
                let terms = StageTerms { cls, reg, ce };
                let total = stage_loss(g, &terms, lw.lambda)?;
                (terms, total)
            }
            None => {
                let z = g.constant(Tensor::scalar(0.0));
                let reg = RegLoss { bin: z, res: z, empty: true };
                (StageTerms { cls: z, reg, ce: z }, z)
            }
        };
        let total = g.add(rpn_total, rcnn_total)?;
        Ok(SceneLoss { total, rpn, rpn_total, rcnn, rcnn_total })
    }

    /// Proposals and refined detections with parameters held constant.
    /// `proposal_nms = None` keeps the top proposals unsuppressed and skips
    /// the final suppression.
    pub fn detect(
        &self,
        params: &ParamStore,
        scene: &PreparedScene,
        scene_id: u64,
        proposal_nms: Option<f64>,
        max_proposals: usize,
    ) -> Result<SceneDetections> {
        let cfg = &self.config;
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let stream = self.two_stream_forward(&mut g, &p, scene)?;
        let heads = self.rpn_heads(&mut g, &p, stream.features)?;
        let (boxes, scores) = self.rpn_boxes(&g, scene, &heads)?;
        let proposals = generate_proposals(&boxes, &scores, cfg.rpn_top_k, proposal_nms, max_proposals);
        let Some(out) = self.refine(&mut g, &p, scene, stream.features, &proposals.boxes, cfg.seed)? else {
            return Ok(SceneDetections { proposals, refined: Vec::new() });
        };
        let frames: Vec<Frame> = proposals.boxes.iter().map(Frame::of_box).collect();
        let refined_boxes = decode_boxes(&cfg.rcnn_coder(), &frames, &read_targets(&g, &out.reg))?;
        let conf = g.value(out.probs).data();
        let mut refined: Vec<Detection> = refined_boxes
            .iter()
            .zip(conf)
            .map(|(b, &c)| Detection { scene_id, bbox: *b, confidence: c, class_id: TARGET_CLASS })
            .collect();
        if proposal_nms.is_some() {
            let sc: Vec<f64> = refined.iter().map(|d| d.confidence).collect();
            let keep = nms_indices(&refined_boxes, &sc, cfg.final_nms, usize::MAX);
            refined = keep.into_iter().map(|k| refined[k]).collect();
        }
        Ok(SceneDetections { proposals, refined })
    }
}

fn gate(store: &mut ParamStore, name: &str, cp: usize, ci: usize, hidden: usize, rng: &mut impl Rng) -> [ParamId; 3] {
    let ct = if hidden == 0 { default_hidden(cp, ci) } else { hidden };
    let layer = crate::fusion::LiFusionLayer::random(cp, ci, ct, rng);
    [
        store.push(format!("{name}.u"), layer.u),
        store.push(format!("{name}.v"), layer.v),
        store.push(format!("{name}.w"), layer.w),
    ]
}

#[cfg(test)]
mod tests {
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::super::fixtures::{prepared, scene, small_config};
    use super::*;

    fn model(cfg: &TwoStreamConfig) -> (Model, ParamStore) {
        Model::build(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap()
    }

    fn features(m: &Model, p: &ParamStore, s: &PreparedScene) -> Tensor {
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let out = m.two_stream_forward(&mut g, &b, s).unwrap();
        g.value(out.features).clone()
    }

    #[test]
    fn encode_of_decode_is_identity() {
        let cfg = TwoStreamConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for coder in [cfg.rpn_coder(), cfg.rcnn_coder()] {
            let nb = coder.bins.num_bins();
            for _ in 0..500 {
                let t = BoxTarget {
                    x_bin: rng.random_range(0..nb),
                    z_bin: rng.random_range(0..nb),
                    heading_bin: rng.random_range(0..coder.bins.num_heading_bins),
                    residuals: [
                        rng.random_range(-0.49..0.49),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.49..0.49),
                        rng.random_range(-0.3..0.3),
                        rng.random_range(-0.3..0.3),
                        rng.random_range(-0.3..0.3),
                        rng.random_range(-0.49..0.49),
                    ],
                };
                let frame = Frame { origin: [1.0, 0.5, 7.0], yaw: rng.random_range(-1.0..1.0) };
                let world = decode_boxes(&coder, &[frame], std::slice::from_ref(&t)).unwrap()[0];
                let back = coder.encode([0.0; 3], &frame.to_local(&world));
                assert_eq!((back.x_bin, back.z_bin, back.heading_bin), (t.x_bin, t.z_bin, t.heading_bin));
                for k in 0..7 {
                    assert!((back.residuals[k] - t.residuals[k]).abs() < 1e-9, "{k}: {back:?} vs {t:?}");
                }
            }
        }
    }

    #[test]
    fn frame_roundtrip() {
        let f = Frame { origin: [2.0, -1.0, 9.0], yaw: 0.7 };
        let b = Box3D { x: 3.5, y: 1.2, z: 11.0, h: 1.5, w: 1.6, l: 3.9, yaw: -0.4 };
        let back = f.to_world(&f.to_local(&b));
        for (u, v) in [(back.x, b.x), (back.y, b.y), (back.z, b.z), (back.yaw, b.yaw)] {
            assert!((u - v).abs() < 1e-12);
        }
        let own = Frame::of_box(&b).to_local(&b);
        assert!(own.x.abs() < 1e-12 && own.z.abs() < 1e-12 && own.yaw.abs() < 1e-12);
    }

    #[test]
    fn zero_head_output_decodes_to_mean_size_at_bin_centre() {
        let cfg = TwoStreamConfig::default();
        let coder = cfg.rcnn_coder();
        let mut g = Graph::new();
        let n = 2 * coder.bins.num_bins() + coder.bins.num_heading_bins;
        let reg = RegPrediction {
            x_logits: g.constant(Tensor::zeros(&[1, coder.bins.num_bins()])),
            z_logits: g.constant(Tensor::zeros(&[1, coder.bins.num_bins()])),
            heading_logits: g.constant(Tensor::zeros(&[1, n - 2 * coder.bins.num_bins()])),
            residuals: g.constant(Tensor::zeros(&[1, 7])),
        };
        let t = read_targets(&g, &reg);
        assert_eq!((t[0].x_bin, t[0].z_bin, t[0].heading_bin), (0, 0, 0));
        let b = decode_boxes(&coder, &[Frame::at([0.0; 3])], &t).unwrap()[0];
        assert_eq!([b.h, b.w, b.l], cfg.mean_size);
        assert!((b.x - (0.5 * coder.bins.bin_size - coder.bins.search_range)).abs() < 1e-12);
    }

    fn bx(x: f64) -> Box3D {
        Box3D { x, y: 1.0, z: 10.0, h: 1.5, w: 1.6, l: 3.9, yaw: 0.0 }
    }

    #[test]
    fn proposals_sorted_truncated_and_suppressed() {
        let boxes = vec![bx(0.0), bx(0.05), bx(10.0), bx(20.0)];
        let scores = vec![0.5, 0.9, 0.2, 0.7];
        let all = generate_proposals(&boxes, &scores, 10, None, 10);
        assert_eq!(all.source, vec![1, 3, 0, 2]);
        assert!(all.confidences.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(generate_proposals(&boxes, &scores, 2, None, 10).source, vec![1, 3]);
        assert_eq!(generate_proposals(&boxes, &scores, 10, None, 3).len(), 3);
        let sup = generate_proposals(&boxes, &scores, 10, Some(0.5), 10);
        assert_eq!(sup.source, vec![1, 3, 2]);
        assert!(generate_proposals(&[], &[], 10, Some(0.5), 10).is_empty());
    }

    #[test]
    fn empty_proposal_gets_zero_descriptor() {
        let cfg = small_config(FusionMode::Gated);
        let (m, p) = model(&cfg);
        let s = prepared(&cfg, 1);
        let far = Box3D { x: 500.0, y: 0.0, z: 500.0, h: 1.0, w: 1.0, l: 1.0, yaw: 0.0 };
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let f = m.two_stream_forward(&mut g, &b, &s).unwrap().features;
        let out = m.refine(&mut g, &b, &s, f, &[far, far], 0).unwrap().unwrap();
        // A zero descriptor passes only the biases, which start at zero.
        let probs = g.value(out.probs);
        assert_eq!(probs.data(), &[0.5, 0.5]);
        assert!(g.value(out.reg.residuals).data().iter().all(|v| *v == 0.0));
        assert!(m.refine(&mut g, &b, &s, f, &[], 0).unwrap().is_none());
    }

    #[test]
    fn probabilities_stay_open_interval() {
        let cfg = small_config(FusionMode::Gated);
        let (m, p) = model(&cfg);
        let s = prepared(&cfg, 2);
        let d = m.detect(&p, &s, 0, None, 16).unwrap();
        assert!(!d.refined.is_empty());
        assert!(d.refined.iter().all(|r| r.confidence > 0.0 && r.confidence < 1.0));
        assert!(d.proposals.confidences.iter().all(|c| *c > 0.0 && *c < 1.0));
    }

    #[test]
    fn point_order_does_not_matter() {
        let cfg = small_config(FusionMode::Gated);
        let (m, p) = model(&cfg);
        let sc = scene(3).preprocess(&RangeBox::default(), cfg.input_points, 3).unwrap();
        let a = prepare_points(&sc.points, &sc.reflectance, &sc.image, sc.projection(), sc.boxes_of(TARGET_CLASS), &cfg).unwrap();
        let mut perm: Vec<usize> = (0..sc.points.len()).collect();
        perm.reverse();
        perm.swap(3, 100);
        let pts: Vec<[f64; 3]> = perm.iter().map(|&i| sc.points[i]).collect();
        let refl: Vec<f64> = perm.iter().map(|&i| sc.reflectance[i]).collect();
        let b = prepare_points(&pts, &refl, &sc.image, sc.projection(), sc.boxes_of(TARGET_CLASS), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(features(&m, &p, &a), features(&m, &p, &b));
    }

    #[test]
    fn wrong_point_count_is_rejected() {
        let cfg = small_config(FusionMode::None);
        let sc = scene(4);
        let err = prepare_points(&sc.points[..10], &sc.reflectance[..10], &sc.image, sc.projection(), vec![], &cfg);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn black_image_gives_zero_image_half() {
        let cfg = small_config(FusionMode::Ungated);
        let (m, p) = model(&cfg);
        let mut s = prepared(&cfg, 5);
        s.image = Tensor::zeros(s.image.shape());
        let f = features(&m, &p, &s);
        let (n, c) = (f.shape()[0], f.shape()[1]);
        let fu = m.image.as_ref().unwrap().fu_width();
        assert_eq!(c, m.feature_width);
        for i in 0..n {
            assert!(f.row(i)[c - fu..].iter().all(|v| *v == 0.0));
        }
        assert!(f.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn no_fusion_has_no_image_parameters() {
        let cfg = small_config(FusionMode::None);
        let (m, p) = model(&cfg);
        assert!(m.image.is_none() && m.gates.is_empty());
        assert!(p.names().iter().all(|n| !n.starts_with("image") && !n.starts_with("fusion")));
        let (m2, _) = model(&small_config(FusionMode::Gated));
        assert_eq!(m2.gates.len(), 5);
    }

    #[test]
    fn scene_loss_is_finite_in_every_mode() {
        let cfg = small_config(FusionMode::Gated);
        let (m, p) = model(&cfg);
        let s = prepared(&cfg, 6);
        assert!(s.foreground_count() > 0);
        for mode in [LossMode::Ce, LossMode::IouOnly, LossMode::None] {
            let mut g = Graph::new();
            let b = p.bind(&mut g, false);
            let l = m.scene_loss(&mut g, &b, &s, mode, 0).unwrap();
            let v = g.value(l.total).item();
            assert!(v.is_finite() && v > 0.0, "{mode:?}: {v}");
        }
    }
}
