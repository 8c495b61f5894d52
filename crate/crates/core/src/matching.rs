//! Minimum-cost bipartite matching between predictions and ground truth.

use crate::error::{Result, SsgaError};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `gt_to_pred[g]` is the prediction matched to ground truth `g`.
    pub gt_to_pred: Vec<usize>,
    /// Sum of the selected costs, accumulated in ground-truth order.
    pub total_cost: f64,
}

/// Hungarian algorithm (shortest augmenting paths with potentials) on a
/// `n_pred × n_gt` cost matrix. Every ground truth is matched to a distinct
/// prediction; `O(n_gt² · n_pred)`.
pub fn hungarian_match(cost: &Tensor) -> Result<Assignment> {
    if cost.shape().len() != 2 {
        return Err(SsgaError::Shape(format!("cost must be 2-D, got {:?}", cost.shape())));
    }
    let (n_pred, n_gt) = (cost.rows(), cost.cols());
    if n_pred < n_gt {
        return Err(SsgaError::TooFewPredictions { n_pred, n_gt });
    }
    if !cost.is_finite() {
        return Err(SsgaError::Shape("cost matrix has non-finite entries".into()));
    }
    if n_gt == 0 {
        return Ok(Assignment {
            gt_to_pred: Vec::new(),
            total_cost: 0.0,
        });
    }
    // rows = ground truths (1-based), columns = predictions (1-based); index 0 is a sentinel
    let (n, m) = (n_gt, n_pred);
    let a = |i: usize, j: usize| cost.get2(j - 1, i - 1);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut gt_to_pred = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            gt_to_pred[p[j] - 1] = j - 1;
        }
    }
    let total_cost = gt_to_pred.iter().enumerate().map(|(g, &q)| cost.get2(q, g)).sum();
    Ok(Assignment { gt_to_pred, total_cost })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all injective gt → pred maps, summed in gt order.
    pub(crate) fn brute_force(cost: &Tensor) -> f64 {
        fn rec(cost: &Tensor, g: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if g == cost.cols() {
                *best = best.min(acc);
                return;
            }
            for q in 0..cost.rows() {
                if !used[q] {
                    used[q] = true;
                    rec(cost, g + 1, used, acc + cost.get2(q, g), best);
                    used[q] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cost.rows()], 0.0, &mut best);
        best
    }

    #[test]
    fn obvious_diagonal() {
        let c = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let a = hungarian_match(&c).unwrap();
        assert_eq!(a.gt_to_pred, vec![0, 1]);
        assert_eq!(a.total_cost, 2.0);
    }

    #[test]
    fn zero_diagonal_wins() {
        let n = 5;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { 1e6 }).collect())
            .collect();
        let a = hungarian_match(&Tensor::from_rows(&rows).unwrap()).unwrap();
        assert_eq!(a.gt_to_pred, vec![0, 1, 2, 3, 4]);
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn random_5x5_matches_all_120_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let c = Tensor::from_rows(&rows).unwrap();
        assert_eq!(hungarian_match(&c).unwrap().total_cost, brute_force(&c));
    }

    #[test]
    fn rectangular_and_empty() {
        let c = Tensor::from_rows(&[vec![5.0], vec![1.0], vec![3.0]]).unwrap();
        let a = hungarian_match(&c).unwrap();
        assert_eq!(a.gt_to_pred, vec![1]);
        let empty = Tensor::zeros(&[3, 0]);
        assert_eq!(hungarian_match(&empty).unwrap().gt_to_pred, Vec::<usize>::new());
    }

    #[test]
    fn too_few_predictions_is_an_error() {
        let c = Tensor::zeros(&[1, 2]);
        assert!(matches!(
            hungarian_match(&c),
            Err(SsgaError::TooFewPredictions { n_pred: 1, n_gt: 2 })
        ));
    }

    #[test]
    fn assignment_is_injective_with_ties() {
        let c = Tensor::full(&[4, 3], 1.0);
        let a = hungarian_match(&c).unwrap();
        let mut seen = a.gt_to_pred.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 3);
        assert_eq!(a.total_cost, 3.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix() -> impl Strategy<Value = Tensor> {
            (1usize..=6, 0usize..=2).prop_flat_map(|(g, extra)| {
                prop::collection::vec(-5.0..5.0f64, g * (g + extra))
                    .prop_map(move |v| Tensor::new(vec![g + extra, g], v).unwrap())
            })
        }

        proptest! {
            #[test]
            fn hungarian_equals_permutation_minimum(cost in matrix()) {
                let a = hungarian_match(&cost).unwrap();
                prop_assert_eq!(a.total_cost, brute_force(&cost));
                let mut used = a.gt_to_pred.clone();
                used.sort_unstable();
                used.dedup();
                prop_assert_eq!(used.len(), cost.cols());
            }
        }
    }
}
