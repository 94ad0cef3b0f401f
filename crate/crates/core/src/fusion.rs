//! Point-wise image feature fusion.
//!
//! Each LiDAR point is projected into the image ([`generate_grid`]), the image
//! feature map is bilinearly sampled at that position
//! ([`sample_point_features`]), and a gate computed from both features scales
//! the image half before concatenation ([`fuse`]):
//!
//! ```text
//! w    = σ(W · tanh(U·F_P + V·F_I))
//! F_LI = F_P ‖ w·F_I
//! ```
//!
//! ```
//! use lifusion::fusion::LiFusionLayer;
//! use lifusion::tensor::{Graph, Tensor};
//!
//! let layer = LiFusionLayer::zeros(2, 3, 2);
//! let mut g = Graph::new();
//! let fp = g.constant(Tensor::from_rows(&[[1.0, 2.0]]));
//! let fi = g.constant(Tensor::from_rows(&[[4.0, 6.0, 8.0]]));
//! let out = layer.forward(&mut g, fp, fi).unwrap();
//! assert_eq!(g.value(out.fused).data(), &[1.0, 2.0, 2.0, 3.0, 4.0]);
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_points, ProjectionMatrix};
use crate::tensor::{Graph, Tensor, Var};

pub const ALLOWED_STRIDES: [usize; 5] = [1, 2, 4, 8, 16];

/// Continuous feature-map positions for every point at one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct PointImageCorrespondence {
    pub coords: Vec<(f64, f64)>,
    pub valid: Vec<bool>,
    pub stride: usize,
    /// `(H, W)` of the feature map at this stride.
    pub extent: (usize, usize),
}

impl PointImageCorrespondence {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Correspondence for a subset of the points, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            coords: idx.iter().map(|&i| self.coords[i]).collect(),
            valid: idx.iter().map(|&i| self.valid[i]).collect(),
            stride: self.stride,
            extent: self.extent,
        }
    }
}

/// Projects points at full resolution and rescales to the map at `stride`.
pub fn generate_grid(
    points: &[[f64; 3]],
    m: &ProjectionMatrix,
    stride: usize,
    image_extent: (usize, usize),
) -> Result<PointImageCorrespondence> {
    if !ALLOWED_STRIDES.contains(&stride) {
        return Err(Error::Input(format!("stride {stride} is not one of {ALLOWED_STRIDES:?}")));
    }
    let extent = (image_extent.0 / stride, image_extent.1 / stride);
    let s = stride as f64;
    let (hf, wf) = (extent.0 as f64, extent.1 as f64);
    let mut coords = Vec::with_capacity(points.len());
    let mut valid = Vec::with_capacity(points.len());
    for ((u, v), ok) in project_points(points, m) {
        let (u, v) = (u / s, v / s);
        let inside = ok && u >= -0.5 && u < wf - 0.5 && v >= -0.5 && v < hf - 0.5;
        coords.push((u, v));
        valid.push(inside);
    }
    Ok(PointImageCorrespondence { coords, valid, stride, extent })
}

/// Bilinear image features per point (`N×C`); invalid points get zero rows.
pub fn sample_point_features(g: &mut Graph, fmap: Var, corr: &PointImageCorrespondence) -> Result<Var> {
    let shape = g.shape(fmap);
    if shape.len() != 3 || (shape[1], shape[2]) != corr.extent {
        return Err(Error::Contract(format!(
            "feature map {:?} does not match correspondence extent {:?} (stride {})",
            shape, corr.extent, corr.stride
        )));
    }
    g.bilinear_sample(fmap, &corr.coords, &corr.valid)
}

/// Gate parameters: `U: Cp×Ct`, `V: Ci×Ct`, `W: Ct×1`, no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct LiFusionLayer {
    pub u: Tensor,
    pub v: Tensor,
    pub w: Tensor,
}

/// Gate parameters bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct FusionParams {
    pub u: Var,
    pub v: Var,
    pub w: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    /// `N×(Cp+Ci)`.
    pub fused: Var,
    /// `N×1`, strictly inside `(0, 1)`.
    pub weight_map: Var,
}

/// Hidden width used when none is configured.
pub fn default_hidden(cp: usize, ci: usize) -> usize {
    cp.min(ci)
}

impl LiFusionLayer {
    pub fn zeros(cp: usize, ci: usize, ct: usize) -> Self {
        Self {
            u: Tensor::zeros(&[cp, ct]),
            v: Tensor::zeros(&[ci, ct]),
            w: Tensor::zeros(&[ct, 1]),
        }
    }

    /// Uniform Glorot initialization.
    pub fn random(cp: usize, ci: usize, ct: usize, rng: &mut impl Rng) -> Self {
        let mut init = |rows: usize, cols: usize| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols).map(|_| a * (2.0 * rng.random::<f64>() - 1.0)).collect();
            Tensor::new(vec![rows, cols], data).expect("shape")
        };
        Self {
            u: init(cp, ct),
            v: init(ci, ct),
            w: init(ct, 1),
        }
    }

    pub fn channels(&self) -> (usize, usize, usize) {
        (self.u.shape()[0], self.v.shape()[0], self.u.shape()[1])
    }

    /// Binds the parameters as constants, or as gradient leaves if `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> FusionParams {
        let mut put = |t: &Tensor| {
            if trainable {
                g.leaf(t.clone().requires_grad())
            } else {
                g.constant(t.clone())
            }
        };
        FusionParams {
            u: put(&self.u),
            v: put(&self.v),
            w: put(&self.w),
        }
    }

    pub fn forward(&self, g: &mut Graph, fp: Var, fi: Var) -> Result<FusionOutput> {
        let p = self.bind(g, false);
        fuse(g, &p, fp, fi)
    }
}

/// Gated fusion `F_P ‖ w·F_I`.
pub fn fuse(g: &mut Graph, params: &FusionParams, fp: Var, fi: Var) -> Result<FusionOutput> {
    let (sp, si) = (g.shape(fp).to_vec(), g.shape(fi).to_vec());
    let (su, sv) = (g.shape(params.u).to_vec(), g.shape(params.v).to_vec());
    if sp.len() != 2 || si.len() != 2 || sp[0] != si[0] {
        return Err(Error::Contract(format!("fuse: point features {sp:?} and image features {si:?}")));
    }
    if su[0] != sp[1] || sv[0] != si[1] || su[1] != sv[1] {
        return Err(Error::Contract(format!(
            "fuse: layer expects {}/{} channels, got {}/{}",
            su[0], sv[0], sp[1], si[1]
        )));
    }
    let a = g.linear(fp, params.u, None)?;
    let b = g.linear(fi, params.v, None)?;
    let s = g.add(a, b)?;
    let t = g.tanh(s);
    let logit = g.linear(t, params.w, None)?;
    let weight_map = g.sigmoid(logit);
    let gated = g.scale_rows(fi, weight_map)?;
    let fused = g.concat(fp, gated)?;
    Ok(FusionOutput { fused, weight_map })
}

/// Plain concatenation `F_P ‖ F_I` (gate fixed at 1).
pub fn fuse_ungated(g: &mut Graph, fp: Var, fi: Var) -> Result<Var> {
    g.concat(fp, fi)
}

/// Summary of one scene's weight map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightMapStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub count: usize,
}

pub fn weight_map_stats(values: &[f64]) -> Option<WeightMapStats> {
    if values.is_empty() {
        return None;
    }
    Some(WeightMapStats {
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        mean: values.iter().sum::<f64>() / values.len() as f64,
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        count: values.len(),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng as _;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::finite_diff_check;

    fn pinhole() -> ProjectionMatrix {
        ProjectionMatrix::new([[2.0, 0.0, 0.0, 0.0], [0.0, 2.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]).unwrap()
    }

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn grid_fixtures() {
        let c = generate_grid(&[[1.0, 2.0, 4.0], [1.0, 2.0, -1.0]], &pinhole(), 1, (8, 8)).unwrap();
        assert_eq!(c.coords[0], (0.5, 1.0));
        assert_eq!(c.valid, vec![true, false]);
        let c4 = generate_grid(&[[8.0, 12.0, 1.0]], &pinhole(), 4, (16, 16)).unwrap();
        assert_eq!(c4.coords[0], (4.0, 6.0));
        assert_eq!(c4.extent, (4, 4));
        assert!(!c4.valid[0], "v = 6 is past the 4-row map");
        assert!(generate_grid(&[], &pinhole(), 3, (8, 8)).is_err());
    }

    #[test]
    fn grid_bounds_are_half_open() {
        let m = ProjectionMatrix::identity();
        let pts = [[-0.5, -0.5, 1.0], [3.49, 3.49, 1.0], [3.5, 0.0, 1.0], [-0.51, 0.0, 1.0]];
        let c = generate_grid(&pts, &m, 1, (4, 4)).unwrap();
        assert_eq!(c.valid, vec![true, true, false, false]);
    }

    #[test]
    fn sampling_fixtures() {
        let mut g = Graph::new();
        let fmap = g.constant(Tensor::full(&[2, 4, 4], 3.0));
        let corr = generate_grid(&[[1.0, 1.0, 1.0], [2.2, 0.4, 1.0]], &ProjectionMatrix::identity(), 1, (4, 4)).unwrap();
        let out = sample_point_features(&mut g, fmap, &corr).unwrap();
        assert!(g.value(out).data().iter().all(|&v| (v - 3.0).abs() < 1e-12));

        let none = PointImageCorrespondence { valid: vec![false, false], ..corr.clone() };
        let z = sample_point_features(&mut g, fmap, &none).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));

        let small = g.constant(Tensor::full(&[2, 2, 2], 1.0));
        assert!(matches!(sample_point_features(&mut g, small, &corr), Err(Error::Contract(_))));
    }

    #[test]
    fn sampling_matches_hand_bilinear_on_2x2() {
        let mut g = Graph::new();
        // f = [[1, 2], [3, 4]] at pixel centers (0,0), (1,0), (0,1), (1,1).
        let fmap = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let (u, v) = (0.3, 0.8);
        let corr = PointImageCorrespondence { coords: vec![(u, v)], valid: vec![true], stride: 1, extent: (2, 2) };
        let out = sample_point_features(&mut g, fmap, &corr).unwrap();
        let hand = 1.0 * (1.0 - u) * (1.0 - v) + 2.0 * u * (1.0 - v) + 3.0 * (1.0 - u) * v + 4.0 * u * v;
        assert!((g.value(out).data()[0] - hand).abs() < 1e-15);
    }

    #[test]
    fn zero_layer_gives_half_gate() {
        let layer = LiFusionLayer::zeros(3, 2, 2);
        let mut g = Graph::new();
        let fp = g.constant(Tensor::from_rows(&[[1.0, -2.0, 3.0], [0.0, 0.5, 1.0]]));
        let fi = g.constant(Tensor::from_rows(&[[4.0, -6.0], [2.0, 1.0]]));
        let out = layer.forward(&mut g, fp, fi).unwrap();
        assert!(g.value(out.weight_map).data().iter().all(|&w| w == 0.5));
        assert_eq!(g.value(out.fused).data(), &[1.0, -2.0, 3.0, 2.0, -3.0, 0.0, 0.5, 1.0, 1.0, 0.5]);
    }

    #[test]
    fn saturated_gate_suppresses_image_half() {
        let mut layer = LiFusionLayer::zeros(1, 1, 1);
        layer.u = Tensor::full(&[1, 1], 1.0);
        layer.w = Tensor::full(&[1, 1], -1e3);
        let mut g = Graph::new();
        let fp = g.constant(Tensor::from_rows(&[[5.0]]));
        let fi = g.constant(Tensor::from_rows(&[[7.0]]));
        let out = layer.forward(&mut g, fp, fi).unwrap();
        let w = g.value(out.weight_map).data()[0];
        assert!(w < 1e-12);
        assert!(g.value(out.fused).data()[1].abs() < 1e-9);
    }

    #[test]
    fn channel_mismatch_is_contract_error() {
        let layer = LiFusionLayer::zeros(3, 2, 2);
        let mut g = Graph::new();
        let fp = g.constant(Tensor::zeros(&[4, 2]));
        let fi = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(layer.forward(&mut g, fp, fi), Err(Error::Contract(_))));
        let fp = g.constant(Tensor::zeros(&[4, 3]));
        let fi = g.constant(Tensor::zeros(&[5, 2]));
        assert!(matches!(layer.forward(&mut g, fp, fi), Err(Error::Contract(_))));
    }

    #[test]
    fn full_layer_gradient_check() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layer = LiFusionLayer::random(4, 3, 3, &mut rng);
            let params = [
                random_tensor(&[6, 4], &mut rng),
                random_tensor(&[6, 3], &mut rng),
                layer.u.clone(),
                layer.v.clone(),
                layer.w.clone(),
            ];
            let coef = random_tensor(&[6, 7], &mut rng);
            let r = finite_diff_check("li_fusion", &params, 1e-6, seed, |g, v| {
                let p = FusionParams { u: v[2], v: v[3], w: v[4] };
                let out = fuse(g, &p, v[0], v[1])?;
                let c = g.constant(coef.clone());
                let weighted = g.mul(out.fused, c)?;
                Ok(g.sum(weighted))
            })
            .unwrap();
            assert!(r.max_rel_err <= 1e-4, "{r:?}");
        }
    }

    #[test]
    fn stats_summary() {
        let s = weight_map_stats(&[0.2, 0.4, 0.9]).unwrap();
        assert_eq!((s.min, s.max, s.count), (0.2, 0.9, 3));
        assert!((s.mean - 0.5).abs() < 1e-12);
        assert!(weight_map_stats(&[]).is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn fusion_invariants(seed in 0u64..1000, n in 1usize..12, scale in 0.1f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layer = LiFusionLayer::random(3, 2, 2, &mut rng);
            let fp_t = random_tensor(&[n, 3], &mut rng);
            let mut fi_t = random_tensor(&[n, 2], &mut rng);
            fi_t.data_mut().iter_mut().for_each(|v| *v *= scale);
            // Point 0 is invalid in the image, so its sampled feature is zero.
            fi_t.data_mut()[0] = 0.0;
            fi_t.data_mut()[1] = 0.0;
            let mut g = Graph::new();
            let fp = g.constant(fp_t.clone());
            let fi = g.constant(fi_t.clone());
            let out = layer.forward(&mut g, fp, fi).unwrap();
            let w = g.value(out.weight_map).data().to_vec();
            let fused = g.value(out.fused).data().to_vec();
            for i in 0..n {
                prop_assert!(w[i] > 0.0 && w[i] < 1.0);
                prop_assert_eq!(&fused[i * 5..i * 5 + 3], fp_t.row(i));
                for c in 0..2 {
                    prop_assert!((fused[i * 5 + 3 + c] - w[i] * fi_t.row(i)[c]).abs() <= 1e-12);
                }
            }
            prop_assert_eq!(&fused[3..5], &[0.0, 0.0]);

            let perm: Vec<usize> = (0..n).rev().collect();
            let fp_p = g.gather_rows(fp, &perm).unwrap();
            let fi_p = g.gather_rows(fi, &perm).unwrap();
            let out_p = layer.forward(&mut g, fp_p, fi_p).unwrap();
            let wp = g.value(out_p.weight_map).data().to_vec();
            let fused_p = g.value(out_p.fused).data().to_vec();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(wp[k], w[i]);
                prop_assert_eq!(&fused_p[k * 5..k * 5 + 5], &fused[i * 5..i * 5 + 5]);
            }
        }
    }
}
