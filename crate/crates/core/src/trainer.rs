//! Joint variational training: objective assembly, the epoch loop, and
//! posterior sampling from a trained state.
//!
//! One epoch draws a single reparameterized sample of the edge/noise
//! posterior, scores a node ordering (when orderings are learned), solves
//! every data row's latents under its intervention mask, decodes, and
//! ascends the evidence lower bound
//!
//! ```text
//! ELBO = E[log p(x | z)] − KL(q(L, σ) ‖ p(L, σ)) − KL(q(P) ‖ p(P))
//! ```
//!
//! with a Gumbel–Sinkhorn relaxation hardened by a maximum assignment and
//! combined straight-through, so the forward pass uses an exact permutation
//! while gradients flow through the soft relaxation.
//!
//! All randomness is keyed by `(seed, stream)` so any epoch can be replayed
//! in isolation and interrupted runs resume bit-exactly.

use std::fmt;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{self, DecoderKind};
use crate::error::{Error, Result};
use crate::metrics::{
    self, LatentMatching, MetricsReport, ReportInputs, DEFAULT_GRAPH_SAMPLES,
    DEFAULT_LATENT_SAMPLES, EDGE_THRESHOLD,
};
use crate::opt::{Adam, BoundParams, GradStore, ParamStore};
use crate::posterior::{self, draw_dim};
use crate::scm::{self, EdgeMatrixL, InterventionMask};
use crate::synth::{Dataset, GroundTruth, Projection};
use crate::tape::{eval_with_grads, NodeId, Tape, Value};
use crate::{F, Mat, Vect};

/// How the node ordering is handled during inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureMode {
    /// The variable ordering is pinned to the identity; only edge weights
    /// and noise are inferred.
    FixedOrdering,
    /// A posterior over orderings is learned jointly with the weights.
    LearnPermutation,
}

impl fmt::Display for StructureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StructureMode::FixedOrdering => write!(f, "fixed_ordering"),
            StructureMode::LearnPermutation => write!(f, "learn_permutation"),
        }
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    /// Gradient steps; one epoch is one step on the selected rows.
    pub epochs: usize,
    /// Adam step size.
    pub learning_rate: F,
    /// Rows per gradient step; `None` uses the full dataset every epoch.
    pub batch_size: Option<usize>,
    /// Ordering treatment.
    pub mode: StructureMode,
    /// Observation decoder family.
    pub decoder: DecoderKind,
    /// Master seed; every random stream of the run derives from it.
    pub seed: u64,
    /// Row-then-column normalization rounds for the soft permutation.
    pub sinkhorn_iterations: usize,
    /// Temperature dividing the noisy permutation scores.
    pub sinkhorn_temperature: F,
    /// Global shrinkage scale of the edge prior; `None` uses `1/√d`.
    pub horseshoe_scale: Option<F>,
    /// |weight| cutoff for calling an edge present.
    pub edge_threshold: F,
    /// Weight on the ordering-posterior KL term.
    pub perm_kl_weight: F,
    /// Clamp intervened model nodes to the dataset's intervention values
    /// instead of letting them draw from their own noise term.
    pub clamp_intervention_values: bool,
    /// Posterior graph draws per evaluation.
    pub graph_samples: usize,
    /// Posterior draws averaged into per-row latent estimates.
    pub latent_samples: usize,
    /// Evaluation (and trace-recording) interval in epochs.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5000,
            learning_rate: 0.0008,
            batch_size: None,
            mode: StructureMode::LearnPermutation,
            decoder: DecoderKind::Linear,
            seed: 0,
            sinkhorn_iterations: 20,
            sinkhorn_temperature: 1.0,
            horseshoe_scale: None,
            edge_threshold: EDGE_THRESHOLD,
            perm_kl_weight: 1.0,
            clamp_intervention_values: false,
            graph_samples: DEFAULT_GRAPH_SAMPLES,
            latent_samples: DEFAULT_LATENT_SAMPLES,
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    /// Sets the epoch count.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    /// Sets the Adam step size.
    pub fn with_learning_rate(mut self, lr: F) -> Self {
        self.learning_rate = lr;
        self
    }

    /// Sets a mini-batch size (`None` restores full-batch steps).
    pub fn with_batch_size(mut self, batch: Option<usize>) -> Self {
        self.batch_size = batch;
        self
    }

    /// Sets the ordering treatment.
    pub fn with_mode(mut self, mode: StructureMode) -> Self {
        self.mode = mode;
        self
    }

    /// Sets the decoder family.
    pub fn with_decoder(mut self, decoder: DecoderKind) -> Self {
        self.decoder = decoder;
        self
    }

    /// Sets the master seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Sets the edge-prior scale explicitly.
    pub fn with_horseshoe_scale(mut self, scale: F) -> Self {
        self.horseshoe_scale = Some(scale);
        self
    }

    /// Sets the edge-presence threshold.
    pub fn with_edge_threshold(mut self, threshold: F) -> Self {
        self.edge_threshold = threshold;
        self
    }

    /// Sets the ordering-KL weight.
    pub fn with_perm_kl_weight(mut self, weight: F) -> Self {
        self.perm_kl_weight = weight;
        self
    }

    /// Enables or disables clamping model-side intervened nodes to data.
    pub fn with_clamped_values(mut self, clamp: bool) -> Self {
        self.clamp_intervention_values = clamp;
        self
    }

    /// Sets the posterior graph sample count for evaluation.
    pub fn with_graph_samples(mut self, n: usize) -> Self {
        self.graph_samples = n;
        self
    }

    /// Sets the latent-averaging sample count for evaluation.
    pub fn with_latent_samples(mut self, n: usize) -> Self {
        self.latent_samples = n;
        self
    }

    /// Sets the evaluation interval.
    pub fn with_eval_every(mut self, every: usize) -> Self {
        self.eval_every = every;
        self
    }

    /// Checks every invariant the trainer relies on.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidArgument("batch size must be nonzero".into()));
        }
        if !(self.sinkhorn_temperature.is_finite() && self.sinkhorn_temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.sinkhorn_temperature
            )));
        }
        if self.mode == StructureMode::LearnPermutation && self.sinkhorn_iterations == 0 {
            return Err(Error::InvalidArgument(
                "learned orderings need at least one normalization round".into(),
            ));
        }
        if let Some(scale) = self.horseshoe_scale {
            if !(scale.is_finite() && scale > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "edge prior scale must be positive, got {scale}"
                )));
            }
        }
        if !(self.edge_threshold.is_finite() && self.edge_threshold >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "edge threshold must be nonnegative, got {}",
                self.edge_threshold
            )));
        }
        if !(self.perm_kl_weight.is_finite() && self.perm_kl_weight >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "ordering KL weight must be nonnegative, got {}",
                self.perm_kl_weight
            )));
        }
        if self.graph_samples == 0 || self.latent_samples == 0 {
            return Err(Error::InvalidArgument(
                "evaluation needs at least one posterior sample".into(),
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidArgument(
                "evaluation interval must be at least one epoch".into(),
            ));
        }
        Ok(())
    }

    /// Edge-prior scale in effect for `d` variables.
    pub fn resolved_horseshoe_scale(&self, d: usize) -> F {
        self.horseshoe_scale
            .unwrap_or_else(|| 1.0 / (d as F).sqrt())
    }
}

/// Mutable quantities of a run: parameters, optimizer, progress.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Posterior, ordering-scorer, and decoder parameters.
    pub params: ParamStore,
    /// Optimizer moments and step count.
    pub optimizer: Adam,
    /// Epochs completed.
    pub epoch: usize,
    /// Objective estimate per completed epoch (this run segment).
    pub elbo_trace: Vec<F>,
    /// Diagnostic message if the run stopped on a non-finite objective.
    pub divergence: Option<String>,
    /// Number of latent variables.
    pub d: usize,
    /// Observation dimension.
    pub obs_dim: usize,
}

/// One recorded point of a training trace.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HistoryRow {
    /// Epochs completed when the row was recorded.
    pub epoch: usize,
    /// Objective estimate at that epoch.
    pub elbo: F,
    /// Full metric report (present when ground truth was attached).
    pub metrics: Option<MetricsReport>,
}

/// Labeled random streams derived from the master seed.
mod stream {
    /// Parameter initialization.
    pub const INIT: u64 = 0;
    /// Per-epoch training noise; epoch `e` uses `EPOCH_BASE + e`.
    pub const EPOCH_BASE: u64 = 1;
    /// Posterior sampling during evaluation; epoch `e` uses `EVAL_BASE + e`.
    pub const EVAL_BASE: u64 = 1 << 40;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic child seed for one labeled stream of a run.
pub fn substream(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

/// Fresh parameters for a run on a `d`-variable, `obs_dim`-observation
/// problem.
pub fn init_state(
    cfg: &TrainConfig,
    d: usize,
    obs_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainState> {
    let mut params = ParamStore::new();
    let (mean, log_std) = posterior::init_mean_field(d, rng);
    params.insert("q_mean", Value::Vector(mean))?;
    params.insert("q_log_std", Value::Vector(log_std))?;
    if cfg.mode == StructureMode::LearnPermutation {
        posterior::init_scorer_params(&mut params, d, rng)?;
    }
    decoder::init_decoder_params(&mut params, cfg.decoder, d, obs_dim, rng)?;
    Ok(TrainState {
        params,
        optimizer: Adam::new(cfg.learning_rate),
        epoch: 0,
        elbo_trace: Vec::new(),
        divergence: None,
        d,
        obs_dim,
    })
}

/// All random draws consumed by one epoch, pre-drawn so the objective is a
/// deterministic function of parameters given the noise.
#[derive(Debug, Clone)]
pub struct EpochNoise {
    /// Reparameterization noise for the edge/noise posterior draw.
    pub v_eps: Vect,
    /// Gumbel noise on the ordering scores (learned orderings only).
    pub gumbel: Option<Mat>,
    /// Structural noise, one row per selected data row (same order).
    pub z_eps: Mat,
}

/// Draws the full noise bundle for one epoch over `n_rows` selected rows.
pub fn draw_epoch_noise(
    d: usize,
    n_rows: usize,
    mode: StructureMode,
    rng: &mut ChaCha8Rng,
) -> EpochNoise {
    let v_eps = posterior::standard_normal_vec(draw_dim(d), rng);
    let gumbel = match mode {
        StructureMode::FixedOrdering => None,
        StructureMode::LearnPermutation => Some(posterior::gumbel_matrix(d, rng)),
    };
    let mut z_eps = Array2::zeros((n_rows, d));
    for mut row in z_eps.rows_mut() {
        row.assign(&posterior::standard_normal_vec(d, rng));
    }
    EpochNoise {
        v_eps,
        gumbel,
        z_eps,
    }
}

/// Rows used by one epoch: the whole dataset, or a seeded sample without
/// replacement, ascending either way.
pub fn select_rows(cfg: &TrainConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match cfg.batch_size {
        None => (0..n).collect(),
        Some(b) if b >= n => (0..n).collect(),
        Some(b) => {
            let mut rows = rand::seq::index::sample(rng, n, b).into_vec();
            rows.sort_unstable();
            rows
        }
    }
}

/// Selected rows regrouped by intervention mask, keeping both the global row
/// index (into the dataset) and the position (into the noise bundle).
fn group_selected_rows(
    masks: &[InterventionMask],
    rows: &[usize],
) -> Vec<(InterventionMask, Vec<usize>, Vec<usize>)> {
    let mut groups: Vec<(InterventionMask, Vec<usize>, Vec<usize>)> = Vec::new();
    for (pos, &row) in rows.iter().enumerate() {
        let mask = &masks[row];
        match groups.iter_mut().find(|(m, _, _)| m == mask) {
            Some((_, global, positions)) => {
                global.push(row);
                positions.push(pos);
            }
            None => groups.push((mask.clone(), vec![row], vec![pos])),
        }
    }
    groups
}

/// Objective and reconstruction nodes for one epoch's tape.
fn build_parts(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    cfg: &TrainConfig,
    data: &Dataset,
    rows: &[usize],
    noise: &EpochNoise,
) -> Result<(NodeId, NodeId)> {
    let d = data.d();
    let k = d * (d - 1) / 2;
    if noise.v_eps.len() != draw_dim(d) || noise.z_eps.dim() != (rows.len(), d) {
        return Err(Error::DimensionMismatch(format!(
            "noise bundle sized for {:?} rows x {} draws, epoch has {} rows over {d} variables",
            noise.z_eps.dim(),
            noise.v_eps.len(),
            rows.len()
        )));
    }

    // Reparameterized draw from the edge/noise posterior.
    let q_mean = bound.get("q_mean")?;
    let q_log_std = bound.get("q_log_std")?;
    let eps = tape.constant(Value::Vector(noise.v_eps.clone()))?;
    let std = tape.exp(q_log_std);
    let scaled_eps = tape.mul(std, eps)?;
    let v = tape.add(q_mean, scaled_eps)?;
    let l_flat = tape.slice_vec(v, 0, k)?;
    let log_sigma = tape.index_vec(v, k)?;
    let l_mat = tape.scatter_lower(l_flat, d)?;
    let sigma = tape.exp(log_sigma);

    // Weighted adjacency under the sampled ordering.
    let (w, perm_scores, p_hard) = match cfg.mode {
        StructureMode::FixedOrdering => (tape.transpose(l_mat)?, None, None),
        StructureMode::LearnPermutation => {
            let scores = posterior::scorer_forward_tape(tape, bound, v, d)?;
            let gumbel = noise.gumbel.as_ref().ok_or_else(|| {
                Error::InvalidArgument("noise bundle lacks ordering noise".into())
            })?;
            let g = tape.constant(Value::Matrix(gumbel.clone()))?;
            let shifted = tape.add(scores, g)?;
            let logits = tape.mul_const(shifted, 1.0 / cfg.sinkhorn_temperature);
            let soft = posterior::sinkhorn_log_tape(tape, logits, cfg.sinkhorn_iterations)?;
            let hard = posterior::hard_from_soft(tape.value(soft).as_matrix()?)?;
            // Straight-through: forward is the hard permutation, gradients
            // flow through the soft relaxation.
            let hard_node = tape.constant(Value::Matrix(hard.matrix::<F>()))?;
            let detached = tape.stop_grad(soft);
            let jump = tape.sub(hard_node, detached)?;
            let p_st = tape.add(jump, soft)?;
            let p_t = tape.transpose(p_st)?;
            let l_t = tape.transpose(l_mat)?;
            let pl = tape.matmul(p_t, l_t)?;
            let w = tape.matmul(pl, p_st)?;
            (w, Some(scores), Some(hard))
        }
    };

    // Reconstruction, one linear solve per intervention group.
    let obs_log_std = bound.get("obs_log_std")?;
    let mut recon: Option<NodeId> = None;
    for (mask, global_rows, positions) in group_selected_rows(&data.masks, rows) {
        let n_g = global_rows.len();
        // Sever incoming edges of intervened nodes.
        let keep = Array2::from_shape_fn((d, d), |(_, b)| {
            if mask.is_intervened(b) {
                0.0
            } else {
                1.0
            }
        });
        let keep_node = tape.constant(Value::Matrix(keep))?;
        let w_masked = tape.mul(w, keep_node)?;

        // Drive: σ̂·ε coordinate-wise, except clamped coordinates which take
        // the dataset's intervention values verbatim.
        let mut eps_rows = Array2::zeros((n_g, d));
        for (r, &pos) in positions.iter().enumerate() {
            eps_rows.row_mut(r).assign(&noise.z_eps.row(pos));
        }
        let u = if cfg.clamp_intervention_values && mask.count() > 0 {
            for j in 0..d {
                if mask.is_intervened(j) {
                    eps_rows.column_mut(j).fill(0.0);
                }
            }
            let mut clamp_vals = Array2::zeros((n_g, d));
            for (r, &row) in global_rows.iter().enumerate() {
                for j in 0..d {
                    if mask.is_intervened(j) {
                        clamp_vals[(r, j)] = data.values[(row, j)];
                    }
                }
            }
            let eps_node = tape.constant(Value::Matrix(eps_rows))?;
            let noise_part = tape.scale(sigma, eps_node)?;
            let vals_node = tape.constant(Value::Matrix(clamp_vals))?;
            tape.add(noise_part, vals_node)?
        } else {
            let eps_node = tape.constant(Value::Matrix(eps_rows))?;
            tape.scale(sigma, eps_node)?
        };

        let z = tape.solve_dag(w_masked, u)?;
        let x_hat = decoder::decode_tape(tape, bound, cfg.decoder, z)?;
        let mut x_rows = Array2::zeros((n_g, data.obs_dim()));
        for (r, &row) in global_rows.iter().enumerate() {
            x_rows.row_mut(r).assign(&data.x.row(row));
        }
        let x_node = tape.constant(Value::Matrix(x_rows))?;
        let ll = decoder::gaussian_log_lik_tape(tape, x_node, x_hat, obs_log_std)?;
        recon = Some(match recon {
            Some(acc) => tape.add(acc, ll)?,
            None => ll,
        });
    }
    let mut recon = recon.ok_or_else(|| Error::InvalidArgument("no rows selected".into()))?;
    if rows.len() < data.n() {
        // Keep mini-batch objectives unbiased estimates of the full-batch one.
        recon = tape.mul_const(recon, data.n() as F / rows.len() as F);
    }

    // Edge/noise posterior KL against the shrinkage and noise priors.
    let tau = cfg.resolved_horseshoe_scale(d);
    let log_q_draw = posterior::log_density_diag_gauss_tape(tape, q_mean, q_log_std, v)?;
    let log_p_edges = posterior::log_prior_edges_tape(tape, l_flat, tau)?;
    let log_p_noise = posterior::log_prior_log_noise_tape(tape, log_sigma)?;
    let prior = tape.add(log_p_edges, log_p_noise)?;
    let kl = tape.sub(log_q_draw, prior)?;
    let mut elbo = tape.sub(recon, kl)?;

    // Ordering KL: likelihood of the rounded permutation under row-wise
    // score softmaxes, against the uniform prior over orderings.
    if let (Some(scores), Some(hard)) = (perm_scores, p_hard) {
        let log_q_perm = posterior::log_q_permutation_tape(tape, scores, &hard)?;
        let perm_kl = tape.add_const(log_q_perm, -posterior::log_prior_permutation(d));
        let weighted = tape.mul_const(perm_kl, cfg.perm_kl_weight);
        elbo = tape.sub(elbo, weighted)?;
    }
    Ok((elbo, recon))
}

/// Builds the full single-sample objective on a tape; the returned node is
/// the ELBO estimate to maximize.
pub fn build_elbo(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    cfg: &TrainConfig,
    data: &Dataset,
    rows: &[usize],
    noise: &EpochNoise,
) -> Result<NodeId> {
    build_parts(tape, bound, cfg, data, rows, noise).map(|(elbo, _)| elbo)
}

fn parameter_norms(params: &ParamStore) -> String {
    params
        .iter()
        .map(|(name, value)| {
            let norm = value.total_norm();
            format!("{name}={norm:.3e}")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// One objective/gradient estimate on pre-drawn noise.
pub fn elbo_step_with_noise(
    state: &TrainState,
    cfg: &TrainConfig,
    data: &Dataset,
    rows: &[usize],
    noise: &EpochNoise,
) -> Result<(F, GradStore)> {
    let (elbo, grads) = eval_with_grads(&state.params, |tape, bound| {
        build_elbo(tape, bound, cfg, data, rows, noise)
    })?;
    if !elbo.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite(format!(
            "objective estimate at epoch {} is not finite; parameter norms: {}",
            state.epoch,
            parameter_norms(&state.params)
        )));
    }
    Ok((elbo, grads))
}

/// One objective/gradient estimate, drawing batch rows and noise from `rng`.
pub fn elbo_step(
    state: &TrainState,
    cfg: &TrainConfig,
    data: &Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<(F, GradStore)> {
    let rows = select_rows(cfg, data.n(), rng);
    let noise = draw_epoch_noise(data.d(), rows.len(), cfg.mode, rng);
    elbo_step_with_noise(state, cfg, data, &rows, &noise)
}

/// Average reconstruction term over `n_draws` fresh full-batch noise draws,
/// holding parameters fixed.
pub fn mean_reconstruction(
    state: &TrainState,
    cfg: &TrainConfig,
    data: &Dataset,
    n_draws: usize,
    rng: &mut ChaCha8Rng,
) -> Result<F> {
    let rows: Vec<usize> = (0..data.n()).collect();
    let mut total = 0.0;
    for _ in 0..n_draws {
        let noise = draw_epoch_noise(data.d(), rows.len(), cfg.mode, rng);
        let (_, recon_value) = crate::tape::eval_pair(&state.params, |tape, bound| {
            build_parts(tape, bound, cfg, data, &rows, &noise)
        })?;
        total += recon_value;
    }
    Ok(total / n_draws as F)
}

/// Trains from a fresh initialization.
pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    truth: Option<&GroundTruth>,
) -> Result<(TrainState, Vec<HistoryRow>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(substream(cfg.seed, stream::INIT));
    let state = init_state(cfg, data.d(), data.obs_dim(), &mut rng)?;
    train_from(cfg, data, truth, state, |_, _| Ok(()))
}

/// Continues training from an existing state (fresh or restored from a
/// checkpoint) up to the configured epoch count. `on_interval` runs after
/// every recorded history row, letting callers persist progress.
///
/// A non-finite objective stops the run early: the partial history is
/// returned and the diagnostic is kept on the state.
pub fn train_from(
    cfg: &TrainConfig,
    data: &Dataset,
    truth: Option<&GroundTruth>,
    mut state: TrainState,
    mut on_interval: impl FnMut(&TrainState, &HistoryRow) -> Result<()>,
) -> Result<(TrainState, Vec<HistoryRow>)> {
    cfg.validate()?;
    if state.d != data.d() || state.obs_dim != data.obs_dim() {
        return Err(Error::DimensionMismatch(format!(
            "state built for {}x{}, dataset is {}x{}",
            state.d,
            state.obs_dim,
            data.d(),
            data.obs_dim()
        )));
    }
    let mut history = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut epoch_rng =
            ChaCha8Rng::seed_from_u64(substream(cfg.seed, stream::EPOCH_BASE + epoch as u64));
        let (elbo, grads) = match elbo_step(&state, cfg, data, &mut epoch_rng) {
            Ok(step) => step,
            Err(Error::NonFinite(msg)) => {
                state.divergence = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        };
        state.optimizer.ascend(&mut state.params, &grads)?;
        state.epoch = epoch + 1;
        state.elbo_trace.push(elbo);
        let due = state.epoch % cfg.eval_every == 0 || state.epoch == cfg.epochs;
        if due {
            let metrics = match truth {
                Some(t) => {
                    let mut eval_rng = ChaCha8Rng::seed_from_u64(substream(
                        cfg.seed,
                        stream::EVAL_BASE + state.epoch as u64,
                    ));
                    match evaluate(&state, cfg, data, t, &mut eval_rng) {
                        Ok(report) => Some(report),
                        // Parameters can stay finite while their posterior
                        // draws overflow; that is divergence, not a bug.
                        Err(Error::NonFinite(msg)) | Err(Error::InvalidArgument(msg)) => {
                            state.divergence = Some(format!(
                                "evaluation at epoch {} failed: {msg}",
                                state.epoch
                            ));
                            break;
                        }
                        Err(e) => return Err(e),
                    }
                }
                None => None,
            };
            let row = HistoryRow {
                epoch: state.epoch,
                elbo,
                metrics,
            };
            on_interval(&state, &row)?;
            history.push(row);
        }
    }
    Ok((state, history))
}

/// One weighted-graph draw `(W, σ)` from the learned posterior.
pub fn sample_structure(
    state: &TrainState,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Mat, F)> {
    let d = state.d;
    let mean = state.params.get("q_mean")?.as_vector()?.clone();
    let log_std = state.params.get("q_log_std")?.as_vector()?.clone();
    let eps = posterior::standard_normal_vec(draw_dim(d), rng);
    let v = posterior::reparam_draw(&mean, &log_std, &eps)?;
    let (l, log_sigma) = posterior::split_draw(&v, d)?;
    let sigma = log_sigma.exp();
    let w = match cfg.mode {
        StructureMode::FixedOrdering => l.t().to_owned(),
        StructureMode::LearnPermutation => {
            let scores = posterior::scorer_forward_plain(&state.params, &v, d)?;
            let gumbel = posterior::gumbel_matrix(d, rng);
            let logits = (&scores + &gumbel).mapv(|x| x / cfg.sinkhorn_temperature);
            let soft = posterior::sinkhorn_log_plain(&logits, cfg.sinkhorn_iterations);
            let perm = posterior::hard_from_soft(&soft)?;
            scm::compose_w(&perm, &EdgeMatrixL::new(l)?)?
        }
    };
    Ok((w, sigma))
}

/// A batch of weighted-graph draws from the learned posterior.
pub fn sample_structures(
    state: &TrainState,
    cfg: &TrainConfig,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Mat, F)>> {
    (0..n).map(|_| sample_structure(state, cfg, rng)).collect()
}

/// Per-row latent estimates: the mean over posterior draws of the latents
/// sampled under each row's intervention mask (and, when clamping is on,
/// its recorded intervention values).
pub fn posterior_mean_latents(
    state: &TrainState,
    cfg: &TrainConfig,
    data: &Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<Mat> {
    let d = data.d();
    let groups = data.groups();
    let mut acc: Mat = Array2::zeros((data.n(), d));
    for _ in 0..cfg.latent_samples {
        let (w, sigma) = sample_structure(state, cfg, rng)?;
        for group in &groups {
            let w_masked = scm::mutate_for_intervention(&w.view(), &group.mask)?;
            for &row in &group.rows {
                let eps = posterior::standard_normal_vec(d, rng);
                let z = if cfg.clamp_intervention_values {
                    let drive = scm::clamped_drive(
                        sigma,
                        &eps.view(),
                        &group.mask,
                        &data.values.row(row),
                    )?;
                    scm::propagate(&w_masked.view(), &drive.view())?
                } else {
                    scm::ancestral_sample(&w_masked.view(), sigma, &eps.view())?
                };
                let mut target = acc.row_mut(row);
                target += &z;
            }
        }
    }
    Ok(acc / cfg.latent_samples as F)
}

/// Ancestral-samples `n` observations from the learned model mutated by
/// `mask`, decoding each; returns the samples and their mean.
///
/// `values` supplies per-sample clamp values (one row each) and is only
/// consulted when the configuration clamps intervention values.
pub fn sample_interventional_images(
    state: &TrainState,
    cfg: &TrainConfig,
    mask: &InterventionMask,
    values: Option<&Mat>,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Mat, Vect)> {
    let d = state.d;
    if mask.d() != d {
        return Err(Error::DimensionMismatch(format!(
            "mask over {} nodes for a {d}-variable model",
            mask.d()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    if let Some(vals) = values {
        if vals.dim() != (n, d) {
            return Err(Error::DimensionMismatch(format!(
                "{n} samples over {d} variables need {n}x{d} clamp values, got {:?}",
                vals.dim()
            )));
        }
    }
    let mut z = Array2::zeros((n, d));
    for i in 0..n {
        let (w, sigma) = sample_structure(state, cfg, rng)?;
        let w_masked = scm::mutate_for_intervention(&w.view(), mask)?;
        let eps = posterior::standard_normal_vec(d, rng);
        let zi = match (cfg.clamp_intervention_values, values) {
            (true, Some(vals)) => {
                let drive = scm::clamped_drive(sigma, &eps.view(), mask, &vals.row(i))?;
                scm::propagate(&w_masked.view(), &drive.view())?
            }
            _ => scm::ancestral_sample(&w_masked.view(), sigma, &eps.view())?,
        };
        z.row_mut(i).assign(&zi);
    }
    let x = decoder::decode_plain(&state.params, cfg.decoder, &z)?;
    let mean = x
        .mean_axis(Axis(0))
        .ok_or_else(|| Error::InvalidArgument("no samples drawn".into()))?;
    Ok((x, mean))
}

/// Full metric report for a state against ground truth.
pub fn evaluate(
    state: &TrainState,
    cfg: &TrainConfig,
    data: &Dataset,
    truth: &GroundTruth,
    rng: &mut ChaCha8Rng,
) -> Result<MetricsReport> {
    let draws = sample_structures(state, cfg, cfg.graph_samples, rng)?;
    let w_samples: Vec<Mat> = draws.iter().map(|(w, _)| w.clone()).collect();
    let sigma_model = draws.iter().map(|(_, s)| *s).sum::<F>() / draws.len() as F;
    let z_pred = posterior_mean_latents(state, cfg, data, rng)?;
    let x_hat = decoder::decode_plain(&state.params, cfg.decoder, &z_pred)?;
    let matching = match cfg.mode {
        StructureMode::FixedOrdering => LatentMatching::Identity,
        StructureMode::LearnPermutation => LatentMatching::Assignment,
    };
    metrics::assemble_report(&ReportInputs {
        w_samples: &w_samples,
        gt_w: &truth.w,
        sigma_model,
        sigma_gt: truth.sigma,
        z_true: &data.z,
        z_pred: &z_pred,
        matching,
        x: &data.x,
        x_hat: &x_hat,
        threshold: cfg.edge_threshold,
    })
}

/// A state whose posterior is pinned (up to `exp(log_std)` jitter) to the
/// generating model: the exact edge weights and noise scale, and — for
/// linear observation maps under a linear decoder — the exact projection.
///
/// Requires fixed ordering and an identity-order ground truth (weights
/// strictly above the diagonal); relabel the ground truth first otherwise.
/// Non-linear projections keep a randomly initialized decoder, so only
/// structure- and latent-side quantities are oracle values.
pub fn clamped_to_truth(
    truth: &GroundTruth,
    cfg: &TrainConfig,
    log_std: F,
    rng: &mut ChaCha8Rng,
) -> Result<TrainState> {
    if cfg.mode != StructureMode::FixedOrdering {
        return Err(Error::InvalidArgument(
            "clamping to ground truth requires the fixed ordering mode".into(),
        ));
    }
    let d = truth.d();
    for i in 0..d {
        for j in 0..=i {
            if truth.w[(i, j)] != 0.0 {
                return Err(Error::InvalidArgument(
                    "ground truth is not in identity order; relabel it first".into(),
                ));
            }
        }
    }
    let k = d * (d - 1) / 2;
    let mut mean = Array1::zeros(draw_dim(d));
    for (idx, (i, j)) in scm::lower_index_pairs(d).into_iter().enumerate() {
        // W = Lᵀ under the identity ordering, so L[i][j] carries W[j][i].
        mean[idx] = truth.w[(j, i)];
    }
    mean[k] = truth.sigma.ln();
    let mut params = ParamStore::new();
    params.insert("q_mean", Value::Vector(mean))?;
    params.insert(
        "q_log_std",
        Value::Vector(Array1::from_elem(draw_dim(d), log_std)),
    )?;
    let obs_dim = truth.projection.obs_dim();
    decoder::init_decoder_params(&mut params, cfg.decoder, d, obs_dim, rng)?;
    if let (Projection::Linear { weights }, DecoderKind::Linear) = (&truth.projection, cfg.decoder)
    {
        params.set("dec_w", Value::Matrix(weights.clone()))?;
    }
    Ok(TrainState {
        params,
        optimizer: Adam::new(cfg.learning_rate),
        epoch: 0,
        elbo_trace: Vec::new(),
        divergence: None,
        d,
        obs_dim,
    })
}
