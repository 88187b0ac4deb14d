//! Learned observation model mapping latent variables to observations.
//!
//! Observations are modeled as `x = g(z) + ε` with isotropic Gaussian noise
//! whose log scale (`obs_log_std`) is itself learned. Two decoder families
//! cover the benchmark projections: a plain linear map, and an MLP with two
//! tanh hidden layers for nonlinear projections (including block images).
//!
//! As everywhere, each forward pass exists as both a plain `ndarray` function
//! and a tape builder, pinned against each other in tests.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::opt::{BoundParams, ParamStore};
use crate::tape::{NodeId, Tape, Value};
use crate::{F, Mat};

/// Hidden width of the MLP decoder.
pub const DECODER_HIDDEN: usize = 128;

/// Initial log standard deviation of the observation noise.
pub const INIT_OBS_LOG_STD: F = 0.0;

/// Decoder family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// `g(z) = z·W + b`.
    Linear,
    /// `g(z) = tanh(tanh(z·W₁ + b₁)·W₂ + b₂)·W₃ + b₃`.
    Mlp,
}

impl std::fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DecoderKind::Linear => write!(f, "linear"),
            DecoderKind::Mlp => write!(f, "mlp"),
        }
    }
}

fn sampled_layer(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Mat {
    let std = (1.0 / n_in as F).sqrt();
    Array2::from_shape_fn((n_in, n_out), |_| {
        std * <StandardNormal as Distribution<F>>::sample(&StandardNormal, rng)
    })
}

/// Registers decoder parameters plus the observation noise scale
/// (`obs_log_std`). Weights are `N(0, 1/fan_in)`, biases zero.
pub fn init_decoder_params(
    store: &mut ParamStore,
    kind: DecoderKind,
    d: usize,
    obs_dim: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    match kind {
        DecoderKind::Linear => {
            store.insert("dec_w", Value::Matrix(sampled_layer(d, obs_dim, rng)))?;
            store.insert("dec_b", Value::Vector(Array1::zeros(obs_dim)))?;
        }
        DecoderKind::Mlp => {
            let h = DECODER_HIDDEN;
            let dims = [(d, h), (h, h), (h, obs_dim)];
            for (layer, (n_in, n_out)) in dims.into_iter().enumerate() {
                store.insert(
                    &format!("dec_w{}", layer + 1),
                    Value::Matrix(sampled_layer(n_in, n_out, rng)),
                )?;
                store.insert(
                    &format!("dec_b{}", layer + 1),
                    Value::Vector(Array1::zeros(n_out)),
                )?;
            }
        }
    }
    store.insert("obs_log_std", Value::Scalar(INIT_OBS_LOG_STD))?;
    Ok(())
}

/// Plain decoder forward pass on a batch of latent rows.
pub fn decode_plain(store: &ParamStore, kind: DecoderKind, z: &Mat) -> Result<Mat> {
    match kind {
        DecoderKind::Linear => {
            let w = store.get("dec_w")?.as_matrix()?;
            let b = store.get("dec_b")?.as_vector()?;
            if z.ncols() != w.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "decoder expects {} latent columns, got {}",
                    w.nrows(),
                    z.ncols()
                )));
            }
            Ok(z.dot(w) + &b.view().insert_axis(ndarray::Axis(0)))
        }
        DecoderKind::Mlp => {
            let w1 = store.get("dec_w1")?.as_matrix()?;
            let b1 = store.get("dec_b1")?.as_vector()?;
            let w2 = store.get("dec_w2")?.as_matrix()?;
            let b2 = store.get("dec_b2")?.as_vector()?;
            let w3 = store.get("dec_w3")?.as_matrix()?;
            let b3 = store.get("dec_b3")?.as_vector()?;
            if z.ncols() != w1.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "decoder expects {} latent columns, got {}",
                    w1.nrows(),
                    z.ncols()
                )));
            }
            let h1 = (z.dot(w1) + &b1.view().insert_axis(ndarray::Axis(0))).mapv(F::tanh);
            let h2 = (h1.dot(w2) + &b2.view().insert_axis(ndarray::Axis(0))).mapv(F::tanh);
            Ok(h2.dot(w3) + &b3.view().insert_axis(ndarray::Axis(0)))
        }
    }
}

/// Tape version of [`decode_plain`] on a latent matrix node.
pub fn decode_tape(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    kind: DecoderKind,
    z: NodeId,
) -> Result<NodeId> {
    match kind {
        DecoderKind::Linear => {
            let w = bound.get("dec_w")?;
            let b = bound.get("dec_b")?;
            let zw = tape.matmul(z, w)?;
            tape.add_bias(zw, b)
        }
        DecoderKind::Mlp => {
            let mut h = z;
            for layer in 1..=3 {
                let w = bound.get(&format!("dec_w{layer}"))?;
                let b = bound.get(&format!("dec_b{layer}"))?;
                h = tape.matmul(h, w)?;
                h = tape.add_bias(h, b)?;
                if layer < 3 {
                    h = tape.tanh(h);
                }
            }
            Ok(h)
        }
    }
}

/// Log likelihood of observations under isotropic Gaussian noise:
/// `Σ log N(x_ij | mean_ij, exp(2·log_std))`.
pub fn gaussian_log_lik_plain(x: &Mat, mean: &Mat, log_std: F) -> Result<F> {
    if x.dim() != mean.dim() {
        return Err(Error::DimensionMismatch(format!(
            "observations {}x{} against means {}x{}",
            x.nrows(),
            x.ncols(),
            mean.nrows(),
            mean.ncols()
        )));
    }
    let count = x.len() as F;
    let mut sq = 0.0;
    for (a, b) in x.iter().zip(mean.iter()) {
        let diff = a - b;
        sq += diff * diff;
    }
    Ok(-count * log_std
        - 0.5 * count * (2.0 * std::f64::consts::PI).ln()
        - 0.5 * (-2.0 * log_std).exp() * sq)
}

/// Tape version of [`gaussian_log_lik_plain`]: `x` is a constant node,
/// `mean` a matrix node, `log_std` a scalar node.
pub fn gaussian_log_lik_tape(
    tape: &mut Tape<F>,
    x: NodeId,
    mean: NodeId,
    log_std: NodeId,
) -> Result<NodeId> {
    let count = tape.value(x).len() as F;
    let diff = tape.sub(x, mean)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    let neg2 = tape.mul_const(log_std, -2.0);
    let precision = tape.exp(neg2);
    let quad = tape.scale(precision, total)?;
    let quad_term = tape.mul_const(quad, -0.5);
    let std_term = tape.mul_const(log_std, -count);
    let partial = tape.add(quad_term, std_term)?;
    Ok(tape.add_const(
        partial,
        -0.5 * count * (2.0 * std::f64::consts::PI).ln(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_decode_is_affine() {
        let mut store = ParamStore::new();
        store
            .insert("dec_w", Value::Matrix(array![[1.0, 2.0], [0.0, -1.0]]))
            .unwrap();
        store
            .insert("dec_b", Value::Vector(array![10.0, 20.0]))
            .unwrap();
        let z = array![[1.0, 1.0]];
        let x = decode_plain(&store, DecoderKind::Linear, &z).unwrap();
        assert_eq!(x, array![[11.0, 21.0]]);
    }

    #[test]
    fn plain_and_tape_decoders_agree() {
        for kind in [DecoderKind::Linear, DecoderKind::Mlp] {
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            let mut store = ParamStore::new();
            init_decoder_params(&mut store, kind, 4, 9, &mut rng).unwrap();
            let z = Array2::from_shape_fn((6, 4), |_| {
                <StandardNormal as Distribution<F>>::sample(&StandardNormal, &mut rng)
            });
            let plain = decode_plain(&store, kind, &z).unwrap();

            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &store).unwrap();
            let z_node = tape.constant(Value::Matrix(z)).unwrap();
            let node = decode_tape(&mut tape, &bound, kind, z_node).unwrap();
            let from_tape = tape.value(node).as_matrix().unwrap();
            for (a, b) in plain.iter().zip(from_tape.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn log_lik_matches_independent_normal_sum() {
        // Three unit-variance coordinates: each contributes
        // −½ln(2π) − ½(x−μ)².
        let x = array![[1.0, 2.0], [0.0, -1.0]];
        let mean = array![[0.5, 2.0], [0.0, 1.0]];
        let got = gaussian_log_lik_plain(&x, &mean, 0.0).unwrap();
        let expected = -2.0 * (2.0 * std::f64::consts::PI).ln() - 0.5 * (0.25 + 0.0 + 0.0 + 4.0);
        assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
    }

    #[test]
    fn log_lik_tape_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Array2::from_shape_fn((5, 3), |_| {
            <StandardNormal as Distribution<F>>::sample(&StandardNormal, &mut rng)
        });
        let mean = Array2::from_shape_fn((5, 3), |_| {
            <StandardNormal as Distribution<F>>::sample(&StandardNormal, &mut rng)
        });
        let log_std = -0.7;
        let plain = gaussian_log_lik_plain(&x, &mean, log_std).unwrap();

        let mut tape = Tape::new();
        let xn = tape.constant(Value::Matrix(x)).unwrap();
        let mn = tape.constant(Value::Matrix(mean)).unwrap();
        let sn = tape.constant(Value::Scalar(log_std)).unwrap();
        let node = gaussian_log_lik_tape(&mut tape, xn, mn, sn).unwrap();
        assert_abs_diff_eq!(
            tape.value(node).as_scalar().unwrap(),
            plain,
            epsilon = 1e-10
        );
    }

    #[test]
    fn tighter_noise_rewards_exact_reconstruction() {
        let x = array![[1.0, 2.0]];
        let exact = gaussian_log_lik_plain(&x, &x, -3.0).unwrap();
        let loose = gaussian_log_lik_plain(&x, &x, 0.0).unwrap();
        assert!(exact > loose);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let x = array![[1.0, 2.0]];
        let mean = array![[1.0], [2.0]];
        assert!(gaussian_log_lik_plain(&x, &mean, 0.0).is_err());
    }
}
