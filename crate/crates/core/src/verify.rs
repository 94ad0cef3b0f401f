//! Self-checks runnable outside the test harness: central-difference checks
//! of every graph operator and of the gated fusion layer, and rotated IoU
//! against a Monte-Carlo estimate.
//!
//! ```
//! use lifusion::verify::{gradient_suite, GRAD_TOL};
//!
//! let reports = gradient_suite(0..1).unwrap();
//! assert!(reports.iter().all(|r| r.passes(GRAD_TOL)));
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fusion::{fuse, FusionParams};
use crate::geometry::{iou_3d, iou_3d_axis_aligned_diff, mc_iou_oracle, Box3D, DiffBoxes};
use crate::tensor::{analytic_gradients, compare_with_central_differences, finite_diff_check, GradCheckReport, Graph, Tensor, Var};

/// Relative-error ceiling of the gradient suite.
pub const GRAD_TOL: f64 = 1e-4;
/// Finite-difference step of the gradient suite.
pub const GRAD_STEP: f64 = 1e-6;

type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;
type InitFn = fn(&mut ChaCha8Rng) -> Vec<Tensor>;

/// One differentiable operation with its random-input generator.
#[derive(Clone, Copy)]
pub struct OperatorCase {
    pub name: &'static str,
    pub init: InitFn,
    pub op: OpFn,
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

fn sym(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    uniform(shape, -1.0, 1.0, rng)
}

fn pos(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    uniform(shape, 0.5, 2.0, rng)
}

const COORDS: [(f64, f64); 6] = [(0.3, 0.7), (2.4, 1.1), (-0.6, 2.2), (3.9, 3.2), (1.5, -0.4), (4.6, 2.9)];
const VALID: [bool; 6] = [true, true, true, true, false, true];

/// Every operator of [`Graph`] plus the composed fusion layer and the
/// differentiable axis-aligned IoU.
pub fn operator_cases() -> Vec<OperatorCase> {
    macro_rules! case {
        ($name:expr, |$rng:ident| $init:expr, |$g:ident, $v:ident| $body:expr) => {
            OperatorCase {
                name: $name,
                init: |$rng| $init,
                op: |$g, $v| $body,
            }
        };
    }
    vec![
        case!("linear", |r| vec![sym(&[5, 3], r), sym(&[3, 4], r), sym(&[4], r)], |g, v| g.linear(v[0], v[1], Some(v[2]))),
        case!("conv2d_s1", |r| vec![sym(&[2, 6, 6], r), sym(&[3, 2, 3, 3], r), sym(&[3], r)], |g, v| g.conv2d(
            v[0],
            v[1],
            Some(v[2]),
            1,
            1
        )),
        case!("conv2d_s2", |r| vec![sym(&[2, 7, 6], r), sym(&[3, 2, 3, 3], r), sym(&[3], r)], |g, v| g.conv2d(
            v[0],
            v[1],
            Some(v[2]),
            2,
            1
        )),
        case!("bilinear_sample", |r| vec![sym(&[3, 4, 5], r)], |g, v| g.bilinear_sample(v[0], &COORDS, &VALID)),
        case!("relu", |r| vec![sym(&[4, 3], r)], |g, v| Ok(g.relu(v[0]))),
        case!("tanh", |r| vec![sym(&[4, 3], r)], |g, v| Ok(g.tanh(v[0]))),
        case!("sigmoid", |r| vec![uniform(&[4, 3], -4.0, 4.0, r)], |g, v| Ok(g.sigmoid(v[0]))),
        case!("log", |r| vec![pos(&[4, 3], r)], |g, v| Ok(g.log(v[0]))),
        case!("exp", |r| vec![sym(&[4, 3], r)], |g, v| Ok(g.exp(v[0]))),
        case!("add", |r| vec![sym(&[4, 3], r), sym(&[4, 3], r)], |g, v| g.add(v[0], v[1])),
        case!("sub", |r| vec![sym(&[4, 3], r), sym(&[4, 3], r)], |g, v| g.sub(v[0], v[1])),
        case!("mul", |r| vec![sym(&[4, 3], r), sym(&[4, 3], r)], |g, v| g.mul(v[0], v[1])),
        case!("div", |r| vec![sym(&[4, 3], r), pos(&[4, 3], r)], |g, v| g.div(v[0], v[1])),
        case!("minimum", |r| vec![sym(&[4, 3], r), sym(&[4, 3], r)], |g, v| g.minimum(v[0], v[1])),
        case!("maximum", |r| vec![sym(&[4, 3], r), sym(&[4, 3], r)], |g, v| g.maximum(v[0], v[1])),
        case!("scale_rows", |r| vec![sym(&[4, 3], r), sym(&[4, 1], r)], |g, v| g.scale_rows(v[0], v[1])),
        case!("affine", |r| vec![sym(&[4, 3], r)], |g, v| Ok(g.affine(v[0], -1.7, 0.4))),
        case!("neg", |r| vec![sym(&[4, 3], r)], |g, v| Ok(g.neg(v[0]))),
        case!("affine_elem", |r| vec![sym(&[3, 1], r)], |g, v| g.affine_elem(v[0], &[2.0, -0.5, 1.0], &[0.1, 0.2, 0.3])),
        case!("powf", |r| vec![pos(&[4, 3], r)], |g, v| Ok(g.powf(v[0], 1.7))),
        case!("clamp", |r| vec![uniform(&[4, 3], -2.0, 2.0, r)], |g, v| Ok(g.clamp(v[0], -1.0, 1.0))),
        case!("sum", |r| vec![sym(&[4, 3], r)], |g, v| Ok(g.sum(v[0]))),
        case!("mean", |r| vec![sym(&[4, 3], r)], |g, v| Ok(g.mean(v[0]))),
        case!("concat", |r| vec![sym(&[4, 3], r), sym(&[4, 2], r)], |g, v| g.concat(v[0], v[1])),
        case!("concat_axis0", |r| vec![sym(&[2, 3], r), sym(&[4, 3], r)], |g, v| g.concat_axis0(&[v[0], v[1]])),
        case!("grouped_max", |r| vec![sym(&[3, 5, 4], r)], |g, v| g.grouped_max(v[0])),
        case!("upsample_nearest", |r| vec![sym(&[2, 3, 3], r)], |g, v| g.upsample_nearest(v[0], 2)),
        case!("gather_rows", |r| vec![sym(&[4, 3], r)], |g, v| g.gather_rows(v[0], &[3, 0, 0, 2, 1])),
        case!("sparse_mix", |r| vec![sym(&[4, 3], r)], |g, v| g.sparse_mix(
            v[0],
            vec![vec![(0, 0.3), (1, 0.7)], vec![], vec![(3, -1.0), (3, 0.5)]]
        )),
        case!("slice_cols", |r| vec![sym(&[4, 5], r)], |g, v| g.slice_cols(v[0], 1, 4)),
        case!("reshape", |r| vec![sym(&[4, 3], r)], |g, v| g.reshape(v[0], &[2, 6])),
        case!("smooth_l1", |r| vec![uniform(&[4, 3], -3.0, 3.0, r)], |g, v| Ok(g.smooth_l1(v[0], 1.0))),
        case!("softmax_cross_entropy", |r| vec![uniform(&[3, 4], -2.0, 2.0, r)], |g, v| g.softmax_cross_entropy(
            v[0],
            &[2, 0, 3]
        )),
        case!(
            "li_fusion",
            |r| vec![sym(&[5, 3], r), sym(&[5, 2], r), sym(&[3, 4], r), sym(&[2, 4], r), sym(&[4, 1], r)],
            |g, v| Ok(fuse(g, &FusionParams { u: v[2], v: v[3], w: v[4] }, v[0], v[1])?.fused)
        ),
        case!(
            "axis_aligned_iou",
            |r| vec![
                uniform(&[3, 1], -0.4, 0.4, r),
                uniform(&[3, 1], -0.4, 0.4, r),
                uniform(&[3, 1], -0.4, 0.4, r),
                uniform(&[3, 1], 1.0, 2.0, r),
                uniform(&[3, 1], 1.0, 2.0, r),
                uniform(&[3, 1], 3.0, 4.0, r),
            ],
            |g, v| {
                let b = Box3D { x: 0.1, y: 0.0, z: -0.2, h: 1.5, w: 1.6, l: 3.8, yaw: 0.0 };
                let boxes = DiffBoxes { x: v[0], y: v[1], z: v[2], h: v[3], w: v[4], l: v[5] };
                iou_3d_axis_aligned_diff(g, &boxes, &[b, b, b])
            }
        ),
    ]
}

/// Reduces an arbitrary output to a scalar with seeded weights, so every
/// output element receives a distinct upstream gradient.
fn weighted(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0fa11);
    let w = sym(g.shape(y), &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Checks one case at one seed.
pub fn check_case(case: &OperatorCase, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = (case.init)(&mut rng);
    let op = case.op;
    finite_diff_check(case.name, &params, GRAD_STEP, seed, |g, v| {
        let y = op(g, v)?;
        weighted(g, y, seed)
    })
}

/// [`check_case`] with `delta` added to the first analytic gradient entry;
/// a working comparison must reject it.
pub fn check_corrupted(case: &OperatorCase, seed: u64, delta: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = (case.init)(&mut rng);
    let op = case.op;
    let f = |g: &mut Graph, v: &[Var]| {
        let y = op(g, v)?;
        weighted(g, y, seed)
    };
    let mut grads = analytic_gradients(&params, &f)?;
    grads[0][0] += delta;
    compare_with_central_differences(&format!("{} (corrupted)", case.name), &params, &grads, GRAD_STEP, seed, &f)
}

/// Every case of [`operator_cases`] at every seed.
pub fn gradient_suite(seeds: std::ops::Range<u64>) -> Result<Vec<GradCheckReport>> {
    let cases = operator_cases();
    let mut out = Vec::with_capacity(cases.len() * seeds.clone().count());
    for seed in seeds {
        for case in &cases {
            out.push(check_case(case, seed)?);
        }
    }
    Ok(out)
}

/// One rotated-IoU comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouOracleCase {
    pub a: Box3D,
    pub b: Box3D,
    pub iou: f64,
    pub estimate: f64,
    pub std_err: f64,
}

impl IouOracleCase {
    pub fn abs_err(&self) -> f64 {
        (self.iou - self.estimate).abs()
    }

    /// Within three standard errors or within `1e-2`.
    pub fn passes(&self) -> bool {
        let d = self.abs_err();
        d <= 3.0 * self.std_err || d <= 1e-2
    }
}

/// A pair of boxes close enough to overlap most of the time.
pub fn random_box_pair(rng: &mut impl Rng) -> (Box3D, Box3D) {
    let mut draw = |cx: f64, cz: f64| Box3D {
        x: cx + rng.random_range(-1.5..1.5),
        y: rng.random_range(-0.5..0.5),
        z: cz + rng.random_range(-1.5..1.5),
        h: rng.random_range(0.5..2.0),
        w: rng.random_range(0.5..2.5),
        l: rng.random_range(1.0..4.5),
        yaw: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    };
    let a = draw(0.0, 10.0);
    let b = draw(a.x, a.z);
    (a, b)
}

/// `n_pairs` random pairs scored by [`iou_3d`] and by `samples` Monte-Carlo draws.
pub fn iou_oracle_suite(n_pairs: usize, samples: usize, seed: u64) -> Vec<IouOracleCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_pairs)
        .map(|i| {
            let (a, b) = random_box_pair(&mut rng);
            let mc = mc_iou_oracle(&a, &b, samples, seed.wrapping_add(i as u64));
            IouOracleCase { a, b, iou: iou_3d(&a, &b), estimate: mc.iou, std_err: mc.std_err }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_at_one_seed() {
        for r in gradient_suite(3..4).unwrap() {
            assert!(r.passes(GRAD_TOL), "{r:?}");
        }
    }

    #[test]
    fn case_names_are_unique() {
        let mut names: Vec<&str> = operator_cases().iter().map(|c| c.name).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn perturbed_gradient_is_caught() {
        for case in operator_cases() {
            let r = check_corrupted(&case, 1, 0.05).unwrap();
            assert!(!r.passes(GRAD_TOL), "{}", case.name);
        }
    }

    #[test]
    fn oracle_suite_is_reproducible_and_close() {
        let a = iou_oracle_suite(5, 20_000, 9);
        assert_eq!(a, iou_oracle_suite(5, 20_000, 9));
        assert!(a.iter().all(IouOracleCase::passes));
        assert!(iou_oracle_suite(0, 10, 0).is_empty());
    }
}
