//! Variational families over graph structure and noise scale.
//!
//! The posterior factorizes as `q(P | L, Σ) · q(L, Σ)`:
//!
//! * `q(L, Σ)` is a fully factorized Gaussian over the stacked vector
//!   `v = (flattened strictly-lower edge coefficients, log noise scale)`,
//!   sampled by reparameterization.
//! * `q(P | L, Σ)` scores permutations with a small MLP applied to a draw of
//!   `v`, perturbs the score matrix with Gumbel noise, relaxes it to a doubly
//!   stochastic matrix by log-space Sinkhorn normalization, and rounds to the
//!   best hard permutation by maximum-weight assignment. Gradients cross the
//!   rounding via the straight-through identity assembled in the trainer.
//!
//! Priors: a horseshoe-style heavy-tailed marginal on each edge coefficient,
//! a standard normal on the log noise scale, and a uniform distribution over
//! the `d!` permutations.
//!
//! Every differentiable piece exists twice: a plain `ndarray` version used by
//! evaluation and tests, and a tape builder used inside the training
//! objective. Unit tests pin the two against each other.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::assignment;
use crate::error::{Error, Result};
use crate::opt::{BoundParams, ParamStore};
use crate::scm::{lower_index_pairs, Permutation};
use crate::tape::{NodeId, Tape, Value};
use crate::{F, Mat, Vect};

/// Width of the two hidden layers of the permutation scorer.
pub const SCORER_HIDDEN: usize = 64;

/// Dimension of the stacked draw `v`: strict-lower edge slots plus one log
/// noise coordinate.
pub fn draw_dim(d: usize) -> usize {
    d * (d - 1) / 2 + 1
}

/// Initial mean-field parameters: means drawn from `N(0, 0.1²)`, all log
/// standard deviations at −1.
pub fn init_mean_field(d: usize, rng: &mut impl Rng) -> (Vect, Vect) {
    let k = draw_dim(d);
    let mean = Array1::from_shape_fn(k, |_| {
        0.1 * <StandardNormal as Distribution<F>>::sample(&StandardNormal, rng)
    });
    let log_std = Array1::from_elem(k, -1.0);
    (mean, log_std)
}

/// A vector of independent standard normal draws.
pub fn standard_normal_vec(n: usize, rng: &mut impl Rng) -> Vect {
    Array1::from_shape_fn(n, |_| {
        <StandardNormal as Distribution<F>>::sample(&StandardNormal, rng)
    })
}

/// A matrix of independent standard Gumbel draws, `−ln(−ln U)`.
pub fn gumbel_matrix(d: usize, rng: &mut impl Rng) -> Mat {
    Array2::from_shape_fn((d, d), |_| {
        let u: F = rng.random::<F>().max(F::MIN_POSITIVE);
        -(-u.ln()).ln()
    })
}

/// Reparameterized draw `v = mean + exp(log_std) ⊙ ε`.
pub fn reparam_draw(mean: &Vect, log_std: &Vect, eps: &Vect) -> Result<Vect> {
    if mean.len() != log_std.len() || mean.len() != eps.len() {
        return Err(Error::DimensionMismatch(format!(
            "reparameterized draw with lengths {}, {}, {}",
            mean.len(),
            log_std.len(),
            eps.len()
        )));
    }
    Ok(mean + &(log_std.mapv(F::exp) * eps))
}

/// Splits a draw `v` into the strictly lower-triangular edge matrix (scattered
/// row-major) and the log noise scale (last coordinate).
pub fn split_draw(v: &Vect, d: usize) -> Result<(Mat, F)> {
    if v.len() != draw_dim(d) {
        return Err(Error::DimensionMismatch(format!(
            "draw of length {} for {d} variables (expected {})",
            v.len(),
            draw_dim(d)
        )));
    }
    let mut l = Array2::zeros((d, d));
    for (k, (i, j)) in lower_index_pairs(d).into_iter().enumerate() {
        l[(i, j)] = v[k];
    }
    Ok((l, v[v.len() - 1]))
}

/// Log density of a fully factorized Gaussian at `v`.
pub fn log_density_diag_gauss(mean: &Vect, log_std: &Vect, v: &Vect) -> Result<F> {
    if mean.len() != log_std.len() || mean.len() != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "diagonal Gaussian with lengths {}, {}, {}",
            mean.len(),
            log_std.len(),
            v.len()
        )));
    }
    let k = mean.len() as F;
    let mut quad = 0.0;
    for i in 0..mean.len() {
        let z = (v[i] - mean[i]) * (-log_std[i]).exp();
        quad += z * z;
    }
    Ok(-log_std.sum() - 0.5 * k * (2.0 * std::f64::consts::PI).ln() - 0.5 * quad)
}

const HORSESHOE_GUARD: F = 1e-20;

/// Log of the horseshoe marginal surrogate at one coefficient:
/// `ln ln(1 + 2τ²/x²) − ln τ − ½ ln(2π³)`, with the squared coefficient
/// guarded away from zero where the true marginal has an infinite spike.
pub fn log_horseshoe_marginal(x: F, tau: F) -> F {
    let ratio = 2.0 * tau * tau / (x * x + HORSESHOE_GUARD);
    (1.0 + ratio).ln().ln() - tau.ln() - 0.5 * (2.0 * std::f64::consts::PI.powi(3)).ln()
}

/// Sum of [`log_horseshoe_marginal`] over all edge coefficients.
pub fn log_prior_edges(lflat: &Vect, tau: F) -> F {
    lflat.iter().map(|&x| log_horseshoe_marginal(x, tau)).sum()
}

/// Standard normal log density on the log noise scale.
pub fn log_prior_log_noise(log_sigma: F) -> F {
    -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_sigma * log_sigma
}

/// `ln n!`.
pub fn ln_factorial(n: usize) -> F {
    (2..=n).map(|k| (k as F).ln()).sum()
}

/// Log prior of any single permutation of `d` elements (uniform over `d!`).
pub fn log_prior_permutation(d: usize) -> F {
    -ln_factorial(d)
}

/// Log-space Sinkhorn normalization: alternately subtracts row and column
/// log-sum-exp for `iters` rounds, then exponentiates. The result approaches
/// a doubly stochastic matrix.
pub fn sinkhorn_log_plain(logits: &Mat, iters: usize) -> Mat {
    let mut m = logits.clone();
    for _ in 0..iters {
        for mut row in m.rows_mut() {
            let lse = log_sum_exp(row.iter().copied());
            row.mapv_inplace(|x| x - lse);
        }
        for mut col in m.columns_mut() {
            let lse = log_sum_exp(col.iter().copied());
            col.mapv_inplace(|x| x - lse);
        }
    }
    m.mapv(F::exp)
}

fn log_sum_exp(xs: impl Iterator<Item = F> + Clone) -> F {
    let mx = xs.clone().fold(F::NEG_INFINITY, F::max);
    mx + xs.map(|x| (x - mx).exp()).sum::<F>().ln()
}

/// Rounds a doubly stochastic matrix to the maximum-weight hard permutation.
pub fn hard_from_soft(p_soft: &Mat) -> Result<Permutation> {
    assignment::max_assignment(&p_soft.view())
}

/// Registers the permutation scorer parameters (`perm_w1` … `perm_b3`):
/// an MLP from a draw `v` to a `d×d` score matrix, two tanh hidden layers of
/// width [`SCORER_HIDDEN`], weights `N(0, 1/fan_in)`, zero biases.
pub fn init_scorer_params(store: &mut ParamStore, d: usize, rng: &mut impl Rng) -> Result<()> {
    let dims = [
        (draw_dim(d), SCORER_HIDDEN),
        (SCORER_HIDDEN, SCORER_HIDDEN),
        (SCORER_HIDDEN, d * d),
    ];
    for (layer, (n_in, n_out)) in dims.into_iter().enumerate() {
        let std = (1.0 / n_in as F).sqrt();
        let w = Array2::from_shape_fn((n_in, n_out), |_| {
            std * <StandardNormal as Distribution<F>>::sample(&StandardNormal, rng)
        });
        store.insert(&format!("perm_w{}", layer + 1), Value::Matrix(w))?;
        store.insert(
            &format!("perm_b{}", layer + 1),
            Value::Vector(Array1::zeros(n_out)),
        )?;
    }
    Ok(())
}

/// Plain forward pass of the permutation scorer: `v ↦ d×d` score matrix.
pub fn scorer_forward_plain(store: &ParamStore, v: &Vect, d: usize) -> Result<Mat> {
    let w1 = store.get("perm_w1")?.as_matrix()?;
    let b1 = store.get("perm_b1")?.as_vector()?;
    let w2 = store.get("perm_w2")?.as_matrix()?;
    let b2 = store.get("perm_b2")?.as_vector()?;
    let w3 = store.get("perm_w3")?.as_matrix()?;
    let b3 = store.get("perm_b3")?.as_vector()?;
    if v.len() != w1.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "scorer input of length {}, expected {}",
            v.len(),
            w1.nrows()
        )));
    }
    let h1 = (v.dot(w1) + b1).mapv(F::tanh);
    let h2 = (h1.dot(w2) + b2).mapv(F::tanh);
    let out = h2.dot(w3) + b3;
    if out.len() != d * d {
        return Err(Error::DimensionMismatch(format!(
            "scorer output of length {}, expected {}",
            out.len(),
            d * d
        )));
    }
    Ok(Array2::from_shape_vec((d, d), out.to_vec()).expect("length was checked"))
}

/// Tape version of [`scorer_forward_plain`]; returns the `d×d` score matrix
/// node built from bound `perm_*` parameters.
pub fn scorer_forward_tape(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    v: NodeId,
    d: usize,
) -> Result<NodeId> {
    let mut h = tape.row_matrix(v)?;
    for layer in 1..=3 {
        let w = bound.get(&format!("perm_w{layer}"))?;
        let b = bound.get(&format!("perm_b{layer}"))?;
        h = tape.matmul(h, w)?;
        h = tape.add_bias(h, b)?;
        if layer < 3 {
            h = tape.tanh(h);
        }
    }
    tape.reshape(h, d, d)
}

/// Tape version of [`sinkhorn_log_plain`] on a logits node.
pub fn sinkhorn_log_tape(tape: &mut Tape<F>, logits: NodeId, iters: usize) -> Result<NodeId> {
    let mut m = logits;
    for _ in 0..iters {
        let rows = tape.lse_rows(m)?;
        m = tape.sub_per_row(m, rows)?;
        let cols = tape.lse_cols(m)?;
        m = tape.sub_per_col(m, cols)?;
    }
    Ok(tape.exp(m))
}

/// Tape builder for the diagonal Gaussian log density of `v` under bound
/// parameters `q_mean` / `q_log_std`.
pub fn log_density_diag_gauss_tape(
    tape: &mut Tape<F>,
    mean: NodeId,
    log_std: NodeId,
    v: NodeId,
) -> Result<NodeId> {
    let k = tape.value(mean).len() as F;
    let centered = tape.sub(v, mean)?;
    let neg_log_std = tape.neg(log_std);
    let inv_std = tape.exp(neg_log_std);
    let z = tape.mul(centered, inv_std)?;
    let z2 = tape.mul(z, z)?;
    let quad = tape.sum(z2);
    let half_quad = tape.mul_const(quad, -0.5);
    let sum_log_std = tape.sum(log_std);
    let neg_sum = tape.neg(sum_log_std);
    let with_quad = tape.add(neg_sum, half_quad)?;
    Ok(tape.add_const(
        with_quad,
        -0.5 * k * (2.0 * std::f64::consts::PI).ln(),
    ))
}

/// Tape builder for the horseshoe surrogate log prior summed over a vector of
/// edge coefficients.
pub fn log_prior_edges_tape(tape: &mut Tape<F>, lflat: NodeId, tau: F) -> Result<NodeId> {
    let k = tape.value(lflat).len() as F;
    let x2 = tape.mul(lflat, lflat)?;
    let guarded = tape.add_const(x2, HORSESHOE_GUARD);
    let scale = tape.value(lflat).map(|_| 2.0 * tau * tau);
    let num = tape.constant(scale)?;
    let ratio = tape.div(num, guarded)?;
    let one_plus = tape.add_const(ratio, 1.0);
    let inner = tape.ln(one_plus);
    let outer = tape.ln(inner);
    let total = tape.sum(outer);
    let per_coord = -tau.ln() - 0.5 * (2.0 * std::f64::consts::PI.powi(3)).ln();
    Ok(tape.add_const(total, k * per_coord))
}

/// Tape builder for the standard normal log prior on the log noise scale.
pub fn log_prior_log_noise_tape(tape: &mut Tape<F>, log_sigma: NodeId) -> Result<NodeId> {
    let sq = tape.mul(log_sigma, log_sigma)?;
    let half = tape.mul_const(sq, -0.5);
    Ok(tape.add_const(half, -0.5 * (2.0 * std::f64::consts::PI).ln()))
}

/// Tape builder for the permutation posterior surrogate
/// `⟨P_hard, T⟩ − Σᵢ lse(Tᵢ·)`: the log likelihood of the rounded hard
/// permutation under independent row-wise softmaxes of the score matrix.
pub fn log_q_permutation_tape(
    tape: &mut Tape<F>,
    scores: NodeId,
    p_hard: &Permutation,
) -> Result<NodeId> {
    let hard = tape.constant(Value::Matrix(p_hard.matrix::<F>()))?;
    let picked = tape.mul(hard, scores)?;
    let dot = tape.sum(picked);
    let row_lse = tape.lse_rows(scores)?;
    let norm = tape.sum(row_lse);
    tape.sub(dot, norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    mod mean_field {
        use super::*;

        #[test]
        fn draw_dim_counts_edges_plus_noise() {
            assert_eq!(draw_dim(1), 1);
            assert_eq!(draw_dim(2), 2);
            assert_eq!(draw_dim(5), 11);
        }

        #[test]
        fn split_draw_scatters_row_major() {
            // d = 3: slots (1,0), (2,0), (2,1), then log σ.
            let v = array![0.1, 0.2, 0.3, -0.5];
            let (l, log_sigma) = split_draw(&v, 3).unwrap();
            assert_eq!(l[(1, 0)], 0.1);
            assert_eq!(l[(2, 0)], 0.2);
            assert_eq!(l[(2, 1)], 0.3);
            assert_eq!(l[(0, 1)], 0.0);
            assert_eq!(log_sigma, -0.5);
        }

        #[test]
        fn reparam_moves_with_mean_and_scale() {
            let mean = array![1.0, -1.0];
            let log_std = array![0.0, f64::ln(2.0)];
            let eps = array![0.5, 0.5];
            let v = reparam_draw(&mean, &log_std, &eps).unwrap();
            assert_abs_diff_eq!(v[0], 1.5, epsilon = 1e-12);
            assert_abs_diff_eq!(v[1], 0.0, epsilon = 1e-12);
        }

        #[test]
        fn log_density_standard_normal_at_origin() {
            let mean = array![0.0, 0.0];
            let log_std = array![0.0, 0.0];
            let v = array![0.0, 0.0];
            let ld = log_density_diag_gauss(&mean, &log_std, &v).unwrap();
            assert_abs_diff_eq!(ld, -(2.0 * std::f64::consts::PI).ln(), epsilon = 1e-12);
        }

        #[test]
        fn log_density_matches_tape_builder() {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mean = standard_normal_vec(5, &mut rng);
            let log_std = standard_normal_vec(5, &mut rng).mapv(|x| 0.3 * x);
            let v = standard_normal_vec(5, &mut rng);
            let plain = log_density_diag_gauss(&mean, &log_std, &v).unwrap();

            let mut tape = Tape::new();
            let m = tape.constant(Value::Vector(mean)).unwrap();
            let s = tape.constant(Value::Vector(log_std)).unwrap();
            let vv = tape.constant(Value::Vector(v)).unwrap();
            let node = log_density_diag_gauss_tape(&mut tape, m, s, vv).unwrap();
            assert_abs_diff_eq!(
                tape.value(node).as_scalar().unwrap(),
                plain,
                epsilon = 1e-12
            );
        }
    }

    mod priors {
        use super::*;

        #[test]
        fn horseshoe_at_unit_coefficient_unit_scale() {
            // ln ln 3 − ½ ln(2π³) with τ = 1.
            let expected = (3.0f64.ln()).ln() - 0.5 * (2.0 * std::f64::consts::PI.powi(3)).ln();
            assert_abs_diff_eq!(log_horseshoe_marginal(1.0, 1.0), expected, epsilon = 1e-12);
            assert_abs_diff_eq!(expected, -1.969_620_5, epsilon = 1e-6);
        }

        #[test]
        fn horseshoe_prefers_small_coefficients() {
            let near_zero = log_horseshoe_marginal(1e-6, 1.0);
            let moderate = log_horseshoe_marginal(1.0, 1.0);
            let large = log_horseshoe_marginal(10.0, 1.0);
            assert!(near_zero > moderate);
            assert!(moderate > large);
        }

        #[test]
        fn horseshoe_survives_exactly_zero() {
            assert!(log_horseshoe_marginal(0.0, 1.0).is_finite());
        }

        #[test]
        fn horseshoe_matches_tape_builder() {
            let lflat = array![0.0, 0.5, -2.0, 1e-3];
            let tau = 0.447;
            let plain = log_prior_edges(&lflat, tau);
            let mut tape = Tape::new();
            let node_in = tape.constant(Value::Vector(lflat)).unwrap();
            let node = log_prior_edges_tape(&mut tape, node_in, tau).unwrap();
            assert_abs_diff_eq!(
                tape.value(node).as_scalar().unwrap(),
                plain,
                epsilon = 1e-12
            );
        }

        #[test]
        fn log_noise_prior_is_standard_normal() {
            assert_abs_diff_eq!(
                log_prior_log_noise(0.0),
                -0.5 * (2.0 * std::f64::consts::PI).ln(),
                epsilon = 1e-12
            );
            let mut tape = Tape::new();
            let x = tape.constant(Value::Scalar(0.7)).unwrap();
            let node = log_prior_log_noise_tape(&mut tape, x).unwrap();
            assert_abs_diff_eq!(
                tape.value(node).as_scalar().unwrap(),
                log_prior_log_noise(0.7),
                epsilon = 1e-12
            );
        }

        #[test]
        fn permutation_prior_is_uniform_over_orderings() {
            assert_abs_diff_eq!(log_prior_permutation(1), 0.0, epsilon = 1e-15);
            assert_abs_diff_eq!(log_prior_permutation(3), -(6.0f64.ln()), epsilon = 1e-12);
            assert_abs_diff_eq!(log_prior_permutation(5), -(120.0f64.ln()), epsilon = 1e-12);
        }
    }

    mod gumbel_sinkhorn {
        use super::*;

        #[test]
        fn output_is_nearly_doubly_stochastic() {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let logits = Array2::from_shape_fn((6, 6), |_| {
                3.0 * <StandardNormal as Distribution<F>>::sample(&StandardNormal, &mut rng)
            });
            let p = sinkhorn_log_plain(&logits, 20);
            for row in p.rows() {
                assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-3);
            }
            for col in p.columns() {
                assert_abs_diff_eq!(col.sum(), 1.0, epsilon = 1e-3);
            }
        }

        #[test]
        fn dominant_diagonal_relaxes_toward_identity() {
            let logits = array![
                [8.0, 0.0, 0.0],
                [0.0, 8.0, 0.0],
                [0.0, 0.0, 8.0]
            ];
            let p = sinkhorn_log_plain(&logits, 20);
            for i in 0..3 {
                assert!(p[(i, i)] > 0.99, "diagonal entry was {}", p[(i, i)]);
            }
            let hard = hard_from_soft(&p).unwrap();
            assert_eq!(hard.order(), &[0, 1, 2]);
        }

        #[test]
        fn plain_and_tape_normalizations_agree() {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let logits = Array2::from_shape_fn((4, 4), |_| {
                2.0 * <StandardNormal as Distribution<F>>::sample(&StandardNormal, &mut rng)
            });
            let plain = sinkhorn_log_plain(&logits, 20);

            let mut tape = Tape::new();
            let node_in = tape.constant(Value::Matrix(logits)).unwrap();
            let node = sinkhorn_log_tape(&mut tape, node_in, 20).unwrap();
            let from_tape = tape.value(node).as_matrix().unwrap();
            for (a, b) in plain.iter().zip(from_tape.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }

        #[test]
        fn gumbel_draws_are_finite_and_seeded() {
            let mut a = ChaCha8Rng::seed_from_u64(5);
            let mut b = ChaCha8Rng::seed_from_u64(5);
            let ga = gumbel_matrix(4, &mut a);
            let gb = gumbel_matrix(4, &mut b);
            assert_eq!(ga, gb);
            assert!(ga.iter().all(|x| x.is_finite()));
        }
    }

    mod scorer {
        use super::*;

        #[test]
        fn plain_and_tape_forward_agree() {
            let d = 4;
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let mut store = ParamStore::new();
            init_scorer_params(&mut store, d, &mut rng).unwrap();
            let v = standard_normal_vec(draw_dim(d), &mut rng);
            let plain = scorer_forward_plain(&store, &v, d).unwrap();

            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &store).unwrap();
            let v_node = tape.constant(Value::Vector(v)).unwrap();
            let node = scorer_forward_tape(&mut tape, &bound, v_node, d).unwrap();
            let from_tape = tape.value(node).as_matrix().unwrap();
            for (a, b) in plain.iter().zip(from_tape.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }

        #[test]
        fn zero_input_passes_through_zero_biases() {
            // tanh(0·W + 0) = 0 at every layer, so the output is b3 = 0.
            let d = 3;
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut store = ParamStore::new();
            init_scorer_params(&mut store, d, &mut rng).unwrap();
            let v = Array1::zeros(draw_dim(d));
            let out = scorer_forward_plain(&store, &v, d).unwrap();
            assert!(out.iter().all(|&x| x == 0.0));
        }

        #[test]
        fn hard_permutation_log_q_matches_hand_softmax() {
            // Scores with known row softmax: picking the argmax per row.
            let scores = array![[2.0, 0.0], [0.0, 1.0]];
            let p = Permutation::from_indices(vec![0, 1]).unwrap();
            let mut tape = Tape::new();
            let s = tape.constant(Value::Matrix(scores)).unwrap();
            let node = log_q_permutation_tape(&mut tape, s, &p).unwrap();
            // log softmax row 0 at col 0: 2 − lse(2,0); row 1 at col 1: 1 − lse(0,1).
            let expected = (2.0 - log_sum_exp([2.0, 0.0].into_iter()))
                + (1.0 - log_sum_exp([0.0, 1.0].into_iter()));
            assert_abs_diff_eq!(
                tape.value(node).as_scalar().unwrap(),
                expected,
                epsilon = 1e-12
            );
        }
    }
}
