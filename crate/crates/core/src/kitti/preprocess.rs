use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed axis-aligned region in camera coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for RangeBox {
    /// X ∈ [−40, 40], Y ∈ [−1, 3], Z ∈ [0, 70.4] meters.
    fn default() -> Self {
        Self {
            min: [-40.0, -1.0, 0.0],
            max: [40.0, 3.0, 70.4],
        }
    }
}

impl RangeBox {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }
}

/// Indices of the points inside `range`, in input order.
pub fn crop_indices(points: &[[f64; 3]], range: &RangeBox) -> Vec<usize> {
    (0..points.len()).filter(|&i| range.contains(points[i])).collect()
}

pub fn crop_to_range(points: &[[f64; 3]], range: &RangeBox) -> Vec<[f64; 3]> {
    points.iter().copied().filter(|&p| range.contains(p)).collect()
}

/// `n` indices into a cloud of `len` points: distinct when `len ≥ n`,
/// drawn with replacement otherwise.
pub fn subsample_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::Input("cannot subsample an empty point cloud".into()));
    }
    if n == 0 {
        return Err(Error::Input("subsample size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if len >= n {
        Ok(index::sample(&mut rng, len, n).into_vec())
    } else {
        Ok((0..n).map(|_| rng.random_range(0..len)).collect())
    }
}

pub fn subsample_points(points: &[[f64; 3]], n: usize, seed: u64) -> Result<Vec<[f64; 3]>> {
    Ok(subsample_indices(points.len(), n, seed)?.into_iter().map(|i| points[i]).collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn crop_fixtures() {
        let r = RangeBox::default();
        assert_eq!(crop_to_range(&[[0.0, 0.0, 35.0], [0.0, 0.0, 80.0]], &r), vec![[0.0, 0.0, 35.0]]);
        assert!(crop_to_range(&[], &r).is_empty());
        let inside = vec![[-40.0, -1.0, 0.0], [40.0, 3.0, 70.4], [1.0, 1.0, 1.0]];
        assert_eq!(crop_to_range(&inside, &r), inside);
    }

    #[test]
    fn subsample_fixtures() {
        let pts: Vec<[f64; 3]> = (0..5).map(|i| [i as f64, 0.0, 0.0]).collect();
        let mut perm = subsample_points(&pts, 5, 3).unwrap();
        perm.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(perm, pts);

        let few = &pts[..3];
        let up = subsample_points(few, 5, 3).unwrap();
        assert_eq!(up.len(), 5);
        assert!(up.iter().all(|p| few.contains(p)));

        assert_eq!(subsample_points(&pts, 4, 9).unwrap(), subsample_points(&pts, 4, 9).unwrap());
        assert!(subsample_points(&[], 4, 9).is_err());
    }

    proptest! {
        #[test]
        fn crop_is_idempotent(pts in proptest::collection::vec(proptest::array::uniform3(-80.0..80.0f64), 0..50)) {
            let r = RangeBox::default();
            let once = crop_to_range(&pts, &r);
            prop_assert_eq!(crop_to_range(&once, &r), once.clone());
        }
    }
}
