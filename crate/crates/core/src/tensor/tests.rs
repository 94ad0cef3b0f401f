use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{analytic_gradients, compare_with_central_differences};
use super::*;
use crate::error::Error;

const H: f64 = 1e-5;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let t = g.value(y);
    let w = rand_tensor(t.shape(), &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn linear_sum_reduction() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[[1.0, 2.0]]));
    let w = g.constant(Tensor::from_rows(&[[1.0], [1.0]]));
    let b = g.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[3.0]);
}

#[test]
fn linear_zero_input_yields_bias() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[[0.0, 0.0]]));
    let w = g.constant(Tensor::from_rows(&[[0.3], [-7.0]]));
    let b = g.constant(Tensor::new(vec![1], vec![5.0]).unwrap());
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[5.0]);
}

#[test]
fn linear_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    let w = g.constant(Tensor::zeros(&[4, 2]));
    let msg = g.linear(x, w, None).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = [rand_tensor(&[3, 4], &mut rng), rand_tensor(&[4, 2], &mut rng), rand_tensor(&[2], &mut rng)];
    let r = finite_diff_check("linear", &params, H, 1, |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        weighted_sum(g, y, 1)
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-6, "{r:?}");
}

#[test]
fn conv_identity_kernel_returns_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&[1, 5, 6], &mut rng);
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let kv = g.constant(k);
    let y = g.conv2d(xv, kv, None, 1, 1).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn conv_box_sum_center_is_nine() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 3, 3], 1.0));
    let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, k, None, 1, 1).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 3, 3]);
    assert_eq!(g.value(y).data()[4], 9.0);
    assert_eq!(g.value(y).data()[0], 4.0);
}

#[test]
fn conv_output_extent_and_small_input_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 8, 8]));
    let k = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
    let y = g.conv2d(x, k, None, 2, 1).unwrap();
    assert_eq!(g.value(y).shape(), &[4, 4, 4]);
    let tiny = g.constant(Tensor::zeros(&[2, 1, 1]));
    assert!(matches!(g.conv2d(tiny, k, None, 1, 0), Err(Error::Dimension(_))));
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = [rand_tensor(&[2, 8, 8], &mut rng), rand_tensor(&[4, 2, 3, 3], &mut rng), rand_tensor(&[4], &mut rng)];
    let r = finite_diff_check("conv2d", &params, H, 3, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        weighted_sum(g, y, 3)
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-6, "{r:?}");
}

fn sample_2x2(coords: &[(f64, f64)], valid: &[bool]) -> Vec<f64> {
    let mut g = Graph::new();
    let f = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.bilinear_sample(f, coords, valid).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn bilinear_fixtures() {
    assert_eq!(sample_2x2(&[(0.0, 0.0)], &[true]), vec![1.0]);
    // Direct evaluation: 0.25·(1 + 2 + 3 + 4).
    assert_eq!(sample_2x2(&[(0.5, 0.5)], &[true]), vec![2.5]);
    assert_eq!(sample_2x2(&[(-5.0, -5.0)], &[true]), vec![0.0]);
    assert_eq!(sample_2x2(&[(1.0, 0.0)], &[true]), vec![2.0]);
    assert_eq!(sample_2x2(&[(0.0, 1.0)], &[true]), vec![3.0]);
    assert_eq!(sample_2x2(&[(0.5, 0.5)], &[false]), vec![0.0]);
    // Half a pixel past the right edge: only the in-map column contributes.
    assert_eq!(sample_2x2(&[(1.5, 0.0)], &[true]), vec![1.0]);
}

#[test]
fn bilinear_nan_coordinate_is_input_error() {
    let mut g = Graph::new();
    let f = g.constant(Tensor::zeros(&[1, 2, 2]));
    assert!(matches!(g.bilinear_sample(f, &[(f64::NAN, 0.0)], &[true]), Err(Error::Input(_))));
    // Invalid points are never inspected.
    assert!(g.bilinear_sample(f, &[(f64::NAN, 0.0)], &[false]).is_ok());
}

#[test]
fn bilinear_gradient_flows_to_map_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let coords: Vec<(f64, f64)> = (0..10).map(|_| (rng.random_range(-1.0..6.0), rng.random_range(-1.0..5.0))).collect();
    let valid: Vec<bool> = (0..10).map(|i| i % 4 != 0).collect();
    let params = [rand_tensor(&[3, 4, 5], &mut rng)];
    let r = finite_diff_check("bilinear_sample", &params, H, 4, |g, v| {
        let y = g.bilinear_sample(v[0], &coords, &valid)?;
        weighted_sum(g, y, 4)
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-6, "{r:?}");
}

#[test]
fn activation_fixed_points() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(0.0));
    let s = g.sigmoid(x);
    let t = g.tanh(x);
    assert_eq!(g.value(s).item(), 0.5);
    assert_eq!(g.value(t).item(), 0.0);
}

#[test]
fn sigmoid_gradient_at_two() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(2.0).requires_grad());
    let s = g.sigmoid(x);
    g.backward(s).unwrap();
    let sig = 1.0 / (1.0 + (-2.0f64).exp());
    assert!((g.grad(x).unwrap()[0] - sig * (1.0 - sig)).abs() <= 1e-10);
    let r = finite_diff_check("sigmoid", &[Tensor::scalar(2.0)], H, 0, |g, v| Ok(g.sigmoid(v[0]))).unwrap();
    assert!(r.max_rel_err <= 1e-6);
}

#[test]
fn sigmoid_is_stable_for_large_magnitudes() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2], vec![-800.0, 800.0]).unwrap());
    let s = g.sigmoid(x);
    assert_eq!(g.value(s).data(), &[0.0, 1.0]);
}

#[test]
fn concat_fixtures_and_gradient_split() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::from_rows(&[[1.0]]).requires_grad());
    let b = g.leaf(Tensor::from_rows(&[[2.0]]).requires_grad());
    let c = g.concat(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0]);
    let s = g.sum(c);
    g.backward(s).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[1.0]);
    assert_eq!(g.grad(b).unwrap(), &[1.0]);

    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
    let e = g.constant(Tensor::zeros(&[2, 0]));
    let c = g.concat(a, e).unwrap();
    assert_eq!(g.value(c), g.value(a));
    let bad = g.constant(Tensor::zeros(&[3, 1]));
    assert!(matches!(g.concat(a, bad), Err(Error::Dimension(_))));
}

#[test]
fn grouped_max_fixtures() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap());
    let y = g.grouped_max(x).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 5.0]);

    let single = g.constant(Tensor::new(vec![3, 1, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let y = g.grouped_max(single).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

    let empty = g.constant(Tensor::zeros(&[2, 0, 3]));
    assert!(matches!(g.grouped_max(empty), Err(Error::Input(_))));
}

#[test]
fn grouped_max_ties_route_to_first() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![1, 3, 1], vec![2.0, 2.0, 1.0]).unwrap().requires_grad());
    let y = g.grouped_max(x).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
}

#[test]
fn grouped_max_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = [rand_tensor(&[4, 8, 6], &mut rng)];
    let r = finite_diff_check("grouped_max", &params, H, 5, |g, v| {
        let y = g.grouped_max(v[0])?;
        weighted_sum(g, y, 5)
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-6, "{r:?}");
}

#[test]
fn upsample_fixtures() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 1], 7.0));
    let y = g.upsample_nearest(x, 2).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 2]);
    assert_eq!(g.value(y).data(), &[7.0; 4]);
    assert!(matches!(g.upsample_nearest(x, 0), Err(Error::Input(_))));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = g.constant(rand_tensor(&[2, 3, 2], &mut rng));
    let a = g.upsample_nearest(x, 2).unwrap();
    let a = g.upsample_nearest(a, 2).unwrap();
    let b = g.upsample_nearest(x, 4).unwrap();
    assert_eq!(g.value(a), g.value(b));
}

#[test]
fn upsample_mean_gradient_is_uniform() {
    let (c, h, w, f) = (2usize, 3usize, 2usize, 4usize);
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[c, h, w]).requires_grad());
    let y = g.upsample_nearest(x, f).unwrap();
    let m = g.mean(y);
    g.backward(m).unwrap();
    // Each input cell feeds f² of the c·f²·h·w outputs.
    let expected = 1.0 / (c * h * w) as f64;
    for &gv in g.grad(x).unwrap() {
        assert!((gv - expected).abs() < 1e-15);
    }
    let uniform = 1.0 / ((f * f * h * w * c) as f64) * (f * f) as f64;
    assert!((expected - uniform).abs() < 1e-15);
    let r = finite_diff_check("upsample_nearest", &[Tensor::zeros(&[c, h, w])], H, 0, |g, v| {
        let y = g.upsample_nearest(v[0], f)?;
        Ok(g.mean(y))
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-6);
}

#[test]
fn backward_of_sum_gives_ones() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2, 3]).requires_grad());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_contract_errors() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]).requires_grad());
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::Contract(_))));
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[3]).requires_grad());
    let y = g.leaf(Tensor::full(&[2], 1.0).requires_grad());
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0; 3]);
}

#[test]
fn sigmoid_linear_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = [rand_tensor(&[3, 4], &mut rng), rand_tensor(&[4, 1], &mut rng)];
    let r = finite_diff_check("sigmoid_linear", &params, H, 7, |g, v| {
        let y = g.linear(v[0], v[1], None)?;
        let s = g.sigmoid(y);
        Ok(g.sum(s))
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-6, "{r:?}");
}

#[test]
fn gradcheck_quadratic_is_exact() {
    let r = finite_diff_check("square", &[Tensor::scalar(3.0)], H, 0, |g, v| g.mul(v[0], v[0])).unwrap();
    assert!(r.max_rel_err < 1e-9);
}

#[test]
fn gradcheck_flags_corrupted_backward() {
    let f = |g: &mut Graph, v: &[Var]| -> Result<Var, Error> {
        let t = g.tanh(v[0]);
        Ok(g.sum(t))
    };
    let params = [Tensor::new(vec![3], vec![0.1, -0.4, 0.9]).unwrap()];
    let mut analytic = analytic_gradients(&params, &f).unwrap();
    for v in analytic[0].iter_mut() {
        *v *= 1.5;
    }
    let r = compare_with_central_differences("tanh_corrupted", &params, &analytic, H, 0, &f).unwrap();
    assert!(r.max_rel_err > 1e-2);
}

#[test]
fn gradcheck_rejects_bad_step_and_nonfinite() {
    let p = [Tensor::scalar(1.0)];
    assert!(finite_diff_check("x", &p, 0.0, 0, |g, v| Ok(g.sum(v[0]))).is_err());
    let r = finite_diff_check("log", &[Tensor::scalar(0.0)], H, 0, |g, v| Ok(g.log(v[0])));
    assert!(matches!(r, Err(Error::Input(_))));
}

#[test]
fn report_serializes_to_expected_fields() {
    let r = finite_diff_check("sum", &[Tensor::scalar(1.0)], H, 9, |g, v| Ok(g.sum(v[0]))).unwrap();
    let json: serde_json::Value = serde_json::to_value(&r).unwrap();
    let mut keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    assert_eq!(keys, ["max_rel_err", "op_name", "seed", "step"]);
}

#[test]
fn misc_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = rand_tensor(&[4, 3], &mut rng);
    let b = Tensor::new(vec![4, 3], a.data().iter().map(|v| v + 1.5 + rng.random_range(0.0..0.5)).collect()).unwrap();
    let wcol = rand_tensor(&[4, 1], &mut rng);
    let params = [a, b, wcol];
    let r = finite_diff_check("misc", &params, H, 8, |g, v| {
        let d = g.div(v[0], v[1])?;
        let mn = g.minimum(v[0], d)?;
        let mx = g.maximum(mn, v[1])?;
        let sr = g.scale_rows(mx, v[2])?;
        let e = g.exp(sr);
        let sl = g.smooth_l1(e, 1.0);
        let lg = g.log(v[1]);
        let p = g.powf(v[1], 2.0);
        let s1 = g.add(sl, lg)?;
        let s2 = g.sub(s1, p)?;
        let gathered = g.gather_rows(s2, &[3, 0, 0, 2])?;
        let mixed = g.sparse_mix(gathered, vec![vec![(0, 0.3), (1, 0.7)], vec![(3, 1.0)]])?;
        let sliced = g.slice_cols(mixed, 1, 3)?;
        let xe = g.softmax_cross_entropy(sliced, &[1, 0])?;
        let r = g.reshape(xe, &[2])?;
        let af = g.affine_elem(r, &[2.0, -1.0], &[0.5, 0.0])?;
        let cl = g.clamp(af, -10.0, 10.0);
        let m = g.mean(cl);
        let t = g.tanh(m);
        Ok(g.affine(t, 3.0, 1.0))
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-6, "{r:?}");
}

#[test]
fn softmax_cross_entropy_value() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::from_rows(&[[0.0, 0.0]]));
    let y = g.softmax_cross_entropy(l, &[1]).unwrap();
    assert!((g.value(y).item() - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&[3, 8, 8], &mut rng);
    let k = rand_tensor(&[2, 3, 3, 3], &mut rng);
    let run = || {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(k.clone());
        let y = g.conv2d(xv, kv, None, 2, 1).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn grouped_max_dominates_its_group(seed in 0u64..1000, g in 1usize..4, k in 1usize..6, c in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&[g, k, c], &mut rng);
            let mut gr = Graph::new();
            let xv = gr.leaf(x.clone().requires_grad());
            let y = gr.grouped_max(xv).unwrap();
            let s = gr.sum(y);
            let out = gr.value(y).data().to_vec();
            gr.backward(s).unwrap();
            let grad = gr.grad(xv).unwrap();
            for gi in 0..g {
                for ch in 0..c {
                    let m = out[gi * c + ch];
                    let mut hits = 0;
                    for kk in 0..k {
                        let idx = (gi * k + kk) * c + ch;
                        prop_assert!(m >= x.data()[idx]);
                        if grad[idx] == 1.0 {
                            hits += 1;
                            prop_assert_eq!(x.data()[idx], m);
                        }
                    }
                    prop_assert_eq!(hits, 1);
                }
            }
        }

        #[test]
        fn concat_gradient_reassembles(seed in 0u64..1000, n in 1usize..5, ca in 0usize..4, cb in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_tensor(&[n, ca], &mut rng);
            let b = rand_tensor(&[n, cb], &mut rng);
            let up = rand_tensor(&[n, ca + cb], &mut rng);
            let mut g = Graph::new();
            let av = g.leaf(a.requires_grad());
            let bv = g.leaf(b.requires_grad());
            let c = g.concat(av, bv).unwrap();
            let u = g.constant(up.clone());
            let p = g.mul(c, u).unwrap();
            let s = g.sum(p);
            g.backward(s).unwrap();
            let (ga, gb) = (g.grad(av).unwrap(), g.grad(bv).unwrap());
            for r in 0..n {
                let mut row = ga[r * ca..(r + 1) * ca].to_vec();
                row.extend_from_slice(&gb[r * cb..(r + 1) * cb]);
                prop_assert_eq!(&row[..], up.row(r));
            }
        }
    }
}
