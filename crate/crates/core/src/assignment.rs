//! Exact maximum-score bipartite assignment.
//!
//! Shortest-augmenting-path implementation with dual potentials, `O(n³)`.
//! Used to project a doubly-stochastic matrix onto the closest permutation
//! (maximizing the sum of selected entries) and to match latent coordinates
//! when scoring recovered variables.

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scm::Permutation;

/// Finds the permutation `σ` maximizing `Σ_i score[i][σ(i)]`.
///
/// Ties between optimal assignments are broken arbitrarily but
/// deterministically. Fails on non-square or non-finite input.
pub fn max_assignment<S: Scalar>(score: &ArrayView2<S>) -> Result<Permutation> {
    let n = score.nrows();
    if score.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "score matrix must be square, got {:?}",
            score.dim()
        )));
    }
    if n == 0 {
        return Permutation::from_indices(Vec::new());
    }
    if score.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("assignment score".into()));
    }

    // Minimize cost = −score with the classic potentials formulation.
    // Arrays are 1-indexed; index 0 is the virtual unmatched column.
    let inf = S::infinity();
    let mut u = vec![S::zero(); n + 1];
    let mut v = vec![S::zero(); n + 1];
    let mut matched_row = vec![0usize; n + 1]; // matched_row[j] = row assigned to column j
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = -score[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        // Unwind the augmenting path.
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut forward = vec![0usize; n];
    for j in 1..=n {
        forward[matched_row[j] - 1] = j - 1;
    }
    Permutation::from_indices(forward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_matrix_yields_identity() {
        let m = ndarray::Array2::<f64>::eye(4);
        let p = max_assignment(&m.view()).unwrap();
        assert_eq!(p, Permutation::identity(4));
    }

    #[test]
    fn dominant_diagonal_after_row_swap_is_found() {
        // Swapping rows 0 and 1 makes the diagonal strictly dominant, so the
        // unique maximizer assigns row 0 → column 1, row 1 → column 0.
        let m = array![
            [0.1, 0.9, 0.0],
            [0.8, 0.1, 0.1],
            [0.05, 0.0, 0.95]
        ];
        let p = max_assignment(&m.view()).unwrap();
        assert_eq!(p.order(), &[1, 0, 2]);
    }

    #[test]
    fn negative_scores_are_handled() {
        let m = array![[-5.0, -1.0], [-1.0, -5.0]];
        let p = max_assignment(&m.view()).unwrap();
        assert_eq!(p.order(), &[1, 0]);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let m = array![[f64::NAN, 0.0], [0.0, 1.0]];
        assert!(max_assignment(&m.view()).is_err());
    }

    #[test]
    fn zero_size_input_is_fine() {
        let m = ndarray::Array2::<f64>::zeros((0, 0));
        assert_eq!(max_assignment(&m.view()).unwrap().d(), 0);
    }
}
