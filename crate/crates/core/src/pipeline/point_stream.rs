use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Weight and bias of a shared per-row layer.
#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Seeded farthest-point sampling. The seed picks the first point; ties go
/// to the lowest index.
pub fn farthest_point_sample(points: &[[f64; 3]], count: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.len();
    if count > n {
        return Err(Error::Contract(format!("cannot sample {count} of {n} points")));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(count);
    let mut taken = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut cur = rng.random_range(0..n);
    for _ in 0..count {
        picked.push(cur);
        taken[cur] = true;
        let c = points[cur];
        let mut next = None;
        let mut far = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(*p, c);
            if d < best[i] {
                best[i] = d;
            }
            if !taken[i] && best[i] > far {
                far = best[i];
                next = Some(i);
            }
        }
        match next {
            Some(i) => cur = i,
            None => break,
        }
    }
    Ok(picked)
}

/// For each center, the center itself followed by the other points within
/// `radius` in index order, truncated to `k` and padded with the center.
pub fn ball_group(points: &[[f64; 3]], centers: &[usize], radius: f64, k: usize) -> Vec<Vec<usize>> {
    let r2 = radius * radius;
    centers
        .iter()
        .map(|&c| {
            let mut group = Vec::with_capacity(k);
            group.push(c);
            for (i, p) in points.iter().enumerate() {
                if group.len() == k {
                    break;
                }
                if i != c && dist2(*p, points[c]) <= r2 {
                    group.push(i);
                }
            }
            group.resize(k.max(1), c);
            group
        })
        .collect()
}

/// Normalized `1/(d + 1e-8)` weights of the (up to) three nearest coarse
/// points for every fine point.
pub fn three_nn_weights(coarse: &[[f64; 3]], fine: &[[f64; 3]]) -> Result<Vec<Vec<(usize, f64)>>> {
    if coarse.is_empty() {
        return Err(Error::Contract("feature propagation needs at least one coarse point".into()));
    }
    Ok(fine
        .iter()
        .map(|p| {
            let mut near: Vec<(f64, usize)> = Vec::with_capacity(4);
            for (i, q) in coarse.iter().enumerate() {
                let d = dist2(*p, *q);
                if near.len() < 3 || d < near[near.len() - 1].0 {
                    let at = near.partition_point(|&(e, _)| e <= d);
                    near.insert(at, (d, i));
                    near.truncate(3);
                }
            }
            let inv: Vec<f64> = near.iter().map(|&(d, _)| 1.0 / (d.sqrt() + 1e-8)).collect();
            let total: f64 = inv.iter().sum();
            near.iter().zip(&inv).map(|(&(_, i), &w)| (i, w / total)).collect()
        })
        .collect())
}

/// Shared linear+relu over `[(p − center)/radius ‖ feature]` of every group
/// member, then a per-group channel max. Returns `groups.len() × Cout`.
pub fn sa_forward(
    g: &mut Graph,
    layer: LinearVars,
    points: &[[f64; 3]],
    features: Var,
    groups: &[Vec<usize>],
    radius: f64,
) -> Result<Var> {
    let k = groups.first().map_or(1, Vec::len);
    if groups.iter().any(|grp| grp.len() != k) {
        return Err(Error::Contract("groups must share one size".into()));
    }
    let scale = if radius > 0.0 { 1.0 / radius } else { 1.0 };
    let mut rel = Vec::with_capacity(groups.len() * k * 3);
    let mut flat = Vec::with_capacity(groups.len() * k);
    for grp in groups {
        let c = points[grp[0]];
        for &i in grp {
            let p = points[i];
            rel.extend([(p[0] - c[0]) * scale, (p[1] - c[1]) * scale, (p[2] - c[2]) * scale]);
            flat.push(i);
        }
    }
    let rel = g.constant(Tensor::new(vec![flat.len(), 3], rel)?);
    let gathered = g.gather_rows(features, &flat)?;
    let x = g.concat(rel, gathered)?;
    let h = g.linear(x, layer.w, Some(layer.b))?;
    let h = g.relu(h);
    let cout = g.shape(h)[1];
    let h = g.reshape(h, &[groups.len(), k, cout])?;
    g.grouped_max(h)
}

/// Subsample, group and pool: the set-abstraction step on raw inputs.
#[allow(clippy::too_many_arguments)]
pub fn sa_stage(
    g: &mut Graph,
    layer: LinearVars,
    points: &[[f64; 3]],
    features: Var,
    out_count: usize,
    radius: f64,
    k: usize,
    seed: u64,
) -> Result<(Vec<[f64; 3]>, Var)> {
    let centers = farthest_point_sample(points, out_count, seed)?;
    let groups = ball_group(points, &centers, radius, k);
    let out = sa_forward(g, layer, points, features, &groups, radius)?;
    Ok((centers.iter().map(|&i| points[i]).collect(), out))
}

/// Interpolated coarse features concatenated with the fine skip features,
/// then linear+relu.
pub fn fp_forward(
    g: &mut Graph,
    layer: LinearVars,
    coarse_features: Var,
    weights: Vec<Vec<(usize, f64)>>,
    fine_skip: Var,
) -> Result<Var> {
    let interp = g.sparse_mix(coarse_features, weights)?;
    let x = g.concat(interp, fine_skip)?;
    let h = g.linear(x, layer.w, Some(layer.b))?;
    Ok(g.relu(h))
}

pub fn fp_stage(
    g: &mut Graph,
    layer: LinearVars,
    coarse_points: &[[f64; 3]],
    coarse_features: Var,
    fine_points: &[[f64; 3]],
    fine_skip: Var,
) -> Result<Var> {
    let weights = three_nn_weights(coarse_points, fine_points)?;
    fp_forward(g, layer, coarse_features, weights, fine_skip)
}

/// Precomputed sampling, grouping and interpolation for one point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct PointHierarchy {
    /// `levels[0]` is the input cloud; `levels[i + 1]` the output of stage `i`.
    pub levels: Vec<Vec<[f64; 3]>>,
    /// Groups of stage `i`, indexing `levels[i]`.
    pub groups: Vec<Vec<Vec<usize>>>,
    pub radii: Vec<f64>,
    /// Weights carrying `levels[i + 1]` features onto `levels[i]`.
    pub interp: Vec<Vec<Vec<(usize, f64)>>>,
}

impl PointHierarchy {
    pub fn build(points: &[[f64; 3]], counts: &[usize], radii: &[f64], k: usize, seed: u64) -> Result<Self> {
        if counts.len() != radii.len() {
            return Err(Error::Input(format!("{} stage sizes but {} radii", counts.len(), radii.len())));
        }
        let mut levels = vec![points.to_vec()];
        let mut groups = Vec::with_capacity(counts.len());
        let mut interp = Vec::with_capacity(counts.len());
        for (s, (&m, &r)) in counts.iter().zip(radii).enumerate() {
            let cur = &levels[s];
            let centers = farthest_point_sample(cur, m, seed.wrapping_add(s as u64))?;
            groups.push(ball_group(cur, &centers, r, k));
            let next: Vec<[f64; 3]> = centers.iter().map(|&i| cur[i]).collect();
            interp.push(three_nn_weights(&next, cur)?);
            levels.push(next);
        }
        Ok(Self { levels, groups, radii: radii.to_vec(), interp })
    }
}
