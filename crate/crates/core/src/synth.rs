//! Synthetic benchmark generator: random DAGs, interventional samples, and
//! observation projections.
//!
//! The generative process mirrors the model being fit. A random topological
//! order and an Erdős–Rényi edge pattern define a weighted DAG over `d`
//! latent variables; each data point propagates independent Gaussian noise
//! through the structural equations, with hard interventions clamping chosen
//! coordinates to externally drawn values and severing their incoming edges.
//! Latents are then pushed through a fixed projection — random linear, random
//! tanh MLP, or a block-image map — to produce the observations the model
//! actually sees.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scm::{self, InterventionMask};
use crate::{F, Mat, Vect};

/// Hidden width of the random MLP projection.
pub const MLP_PROJECTION_HIDDEN: usize = 128;

/// Side length of block-image observations (images are `side × side`).
pub const BLOCK_IMAGE_SIDE: usize = 32;

/// Fixed map from latent variables to observations.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Projection {
    /// `x = z · weights`, with `weights` of shape `d × obs_dim`.
    Linear { weights: Mat },
    /// `x = tanh(tanh(z·w1)·w2)·w3`, hidden width [`MLP_PROJECTION_HIDDEN`].
    Mlp3 { w1: Mat, w2: Mat, w3: Mat },
    /// Block images: pixel `p` has intensity `logistic(z[assign[p]])`.
    Blocks { assign: Vec<usize>, side: usize },
}

impl Projection {
    /// Observation dimension produced by this projection.
    pub fn obs_dim(&self) -> usize {
        match self {
            Projection::Linear { weights } => weights.ncols(),
            Projection::Mlp3 { w3, .. } => w3.ncols(),
            Projection::Blocks { assign, .. } => assign.len(),
        }
    }

    /// Number of latent variables this projection expects.
    pub fn latent_dim(&self) -> usize {
        match self {
            Projection::Linear { weights } => weights.nrows(),
            Projection::Mlp3 { w1, .. } => w1.nrows(),
            Projection::Blocks { assign, .. } => assign.iter().copied().max().map_or(0, |m| m + 1),
        }
    }

    /// Maps a batch of latent rows (`n × d`) to observations (`n × obs_dim`).
    pub fn apply(&self, z: &Mat) -> Result<Mat> {
        let d = self.latent_dim();
        if z.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "projection expects {d} latent columns, got {}",
                z.ncols()
            )));
        }
        Ok(match self {
            Projection::Linear { weights } => z.dot(weights),
            Projection::Mlp3 { w1, w2, w3 } => {
                let h1 = z.dot(w1).mapv(F::tanh);
                let h2 = h1.dot(w2).mapv(F::tanh);
                h2.dot(w3)
            }
            Projection::Blocks { assign, .. } => {
                let mut x = Array2::zeros((z.nrows(), assign.len()));
                for (p, &b) in assign.iter().enumerate() {
                    for r in 0..z.nrows() {
                        x[(r, p)] = logistic(z[(r, b)]);
                    }
                }
                x
            }
        })
    }

    /// Re-indexes latent variables so that `new index = slot of old index in
    /// order` (see [`GroundTruth::relabel`]).
    fn relabel(&self, order: &[usize]) -> Self {
        let slot_of = inverse_order(order);
        match self {
            Projection::Linear { weights } => {
                let mut w = weights.clone();
                for (old, row) in weights.rows().into_iter().enumerate() {
                    w.row_mut(slot_of[old]).assign(&row);
                }
                Projection::Linear { weights: w }
            }
            Projection::Mlp3 { w1, w2, w3 } => {
                let mut new_w1 = w1.clone();
                for (old, row) in w1.rows().into_iter().enumerate() {
                    new_w1.row_mut(slot_of[old]).assign(&row);
                }
                Projection::Mlp3 {
                    w1: new_w1,
                    w2: w2.clone(),
                    w3: w3.clone(),
                }
            }
            Projection::Blocks { assign, side } => Projection::Blocks {
                assign: assign.iter().map(|&b| slot_of[b]).collect(),
                side: *side,
            },
        }
    }
}

/// Logistic squashing used by block-image intensities.
pub fn logistic(x: F) -> F {
    1.0 / (1.0 + (-x).exp())
}

/// The data-generating structural model.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroundTruth {
    /// Topological order: `order[s]` is the variable at slot `s`.
    pub order: Vec<usize>,
    /// Weighted adjacency, `w[(i, j)] ≠ 0` iff edge `i → j`.
    pub w: Mat,
    /// Structural noise standard deviation.
    pub sigma: F,
    /// Fixed observation map.
    pub projection: Projection,
}

impl GroundTruth {
    /// Number of latent variables.
    pub fn d(&self) -> usize {
        self.order.len()
    }

    /// Number of directed edges.
    pub fn num_edges(&self) -> usize {
        self.w.iter().filter(|&&x| x != 0.0).count()
    }

    /// Covariance of the latent vector under no interventions.
    pub fn latent_covariance(&self) -> Result<Mat> {
        scm::observational_covariance(&self.w.view(), self.sigma)
    }

    /// Renames variables by their topological slot, so the relabeled model
    /// has the identity order and a strictly upper-triangular adjacency.
    pub fn relabel(&self) -> Self {
        let d = self.d();
        let mut w = Array2::zeros((d, d));
        for s1 in 0..d {
            for s2 in 0..d {
                w[(s1, s2)] = self.w[(self.order[s1], self.order[s2])];
            }
        }
        GroundTruth {
            order: (0..d).collect(),
            w,
            sigma: self.sigma,
            projection: self.projection.relabel(&self.order),
        }
    }
}

fn inverse_order(order: &[usize]) -> Vec<usize> {
    let mut slot_of = vec![0usize; order.len()];
    for (slot, &node) in order.iter().enumerate() {
        slot_of[node] = slot;
    }
    slot_of
}

/// One generated benchmark: observations plus everything needed to score a
/// fit against the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Observations, one row per data point (`n × obs_dim`).
    pub x: Mat,
    /// Intervention mask per data point.
    pub masks: Vec<InterventionMask>,
    /// Clamped values per data point (`n × d`), zero where not intervened.
    pub values: Mat,
    /// Ground-truth latents per data point (`n × d`).
    pub z: Mat,
}

/// Rows sharing one intervention mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGroup {
    /// The shared mask.
    pub mask: InterventionMask,
    /// Dataset row indices carrying it, in order.
    pub rows: Vec<usize>,
}

impl Dataset {
    /// Number of data points.
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// Number of latent variables.
    pub fn d(&self) -> usize {
        self.values.ncols()
    }

    /// Observation dimension.
    pub fn obs_dim(&self) -> usize {
        self.x.ncols()
    }

    /// Partitions rows by identical mask, in order of first appearance.
    pub fn groups(&self) -> Vec<MaskGroup> {
        let mut groups: Vec<MaskGroup> = Vec::new();
        for (row, mask) in self.masks.iter().enumerate() {
            match groups.iter_mut().find(|g| &g.mask == mask) {
                Some(g) => g.rows.push(row),
                None => groups.push(MaskGroup {
                    mask: mask.clone(),
                    rows: vec![row],
                }),
            }
        }
        groups
    }

    /// Renames latent variables by their slot in `order` (the companion of
    /// [`GroundTruth::relabel`]): permutes the columns of the mask, value,
    /// and latent matrices. Observations are untouched.
    pub fn relabel(&self, order: &[usize]) -> Self {
        let d = self.d();
        let mut values = self.values.clone();
        let mut z = self.z.clone();
        for s in 0..d {
            values.column_mut(s).assign(&self.values.column(order[s]));
            z.column_mut(s).assign(&self.z.column(order[s]));
        }
        let masks = self
            .masks
            .iter()
            .map(|m| InterventionMask::new((0..d).map(|s| m.is_intervened(order[s])).collect()))
            .collect();
        Dataset {
            x: self.x.clone(),
            masks,
            values,
            z,
        }
    }
}

/// Which observation map to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    Linear,
    Mlp3,
    Blocks,
}

impl std::fmt::Display for ProjectionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProjectionKind::Linear => write!(f, "linear"),
            ProjectionKind::Mlp3 => write!(f, "mlp3"),
            ProjectionKind::Blocks => write!(f, "blocks"),
        }
    }
}

/// Full description of one synthetic benchmark.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    /// Number of latent variables.
    pub d: usize,
    /// Observation dimension (must be `side²` for block images).
    pub obs_dim: usize,
    /// Expected edges per variable; pair probability is `min(1, 2k/(d−1))`.
    pub expected_degree: F,
    /// Observation map family.
    pub projection: ProjectionKind,
    /// Purely observational data points.
    pub n_observational: usize,
    /// Number of distinct intervention masks.
    pub num_mask_groups: usize,
    /// Data points per mask.
    pub points_per_mask: usize,
    /// Single-variable masks (drawn without replacement) instead of
    /// Bernoulli(½) subsets.
    pub single_node_masks: bool,
    /// Standard deviation of clamped intervention values.
    pub intervention_value_std: F,
    /// Structural noise standard deviation.
    pub noise_std: F,
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::InvalidArgument(
                "need at least two latent variables".into(),
            ));
        }
        if self.projection == ProjectionKind::Blocks {
            let expect = BLOCK_IMAGE_SIDE * BLOCK_IMAGE_SIDE;
            if self.obs_dim != expect {
                return Err(Error::InvalidArgument(format!(
                    "block images are {BLOCK_IMAGE_SIDE}×{BLOCK_IMAGE_SIDE}, so obs_dim must be {expect}, got {}",
                    self.obs_dim
                )));
            }
            if self.d > BLOCK_IMAGE_SIDE / 4 {
                return Err(Error::InvalidArgument(format!(
                    "at most {} blocks fit in one image row, got {}",
                    BLOCK_IMAGE_SIDE / 4,
                    self.d
                )));
            }
        } else if self.obs_dim < self.d {
            return Err(Error::InvalidArgument(format!(
                "obs_dim {} must be at least the latent dimension {}",
                self.obs_dim, self.d
            )));
        }
        if self.single_node_masks && self.num_mask_groups > self.d {
            return Err(Error::InvalidArgument(format!(
                "only {} distinct single-variable masks exist, requested {}",
                self.d, self.num_mask_groups
            )));
        }
        if !self.single_node_masks && self.num_mask_groups as u128 >= (1u128 << self.d) {
            return Err(Error::InvalidArgument(format!(
                "only {} distinct non-empty masks exist for d = {}",
                (1u128 << self.d) - 1,
                self.d
            )));
        }
        if self.noise_std <= 0.0 || self.intervention_value_std < 0.0 {
            return Err(Error::InvalidArgument(
                "noise scales must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Samples a random topological order and ER edge pattern with weights of
/// magnitude `U(0.5, 2)` and random sign.
pub fn sample_dag(d: usize, expected_degree: F, rng: &mut impl Rng) -> (Vec<usize>, Mat) {
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(rng);
    let p_edge = if d > 1 {
        (2.0 * expected_degree / (d as F - 1.0)).min(1.0)
    } else {
        0.0
    };
    let mut w = Array2::zeros((d, d));
    for s1 in 0..d {
        for s2 in (s1 + 1)..d {
            if rng.random::<F>() < p_edge {
                let magnitude = rng.random_range(0.5..2.0);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                w[(order[s1], order[s2])] = sign * magnitude;
            }
        }
    }
    (order, w)
}

/// Draws the mask plan: one empty observational mask plus `num_mask_groups`
/// distinct non-empty masks.
fn sample_masks(cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<InterventionMask> {
    let mut masks = Vec::with_capacity(cfg.num_mask_groups);
    if cfg.single_node_masks {
        let mut nodes: Vec<usize> = (0..cfg.d).collect();
        nodes.shuffle(rng);
        for &node in nodes.iter().take(cfg.num_mask_groups) {
            let mut bits = vec![false; cfg.d];
            bits[node] = true;
            masks.push(InterventionMask::new(bits));
        }
    } else {
        while masks.len() < cfg.num_mask_groups {
            let bits: Vec<bool> = (0..cfg.d).map(|_| rng.random::<bool>()).collect();
            let mask = InterventionMask::new(bits);
            if mask.count() > 0 && !masks.contains(&mask) {
                masks.push(mask);
            }
        }
    }
    masks
}

fn sample_projection(cfg: &SynthConfig, rng: &mut impl Rng) -> Result<Projection> {
    Ok(match cfg.projection {
        ProjectionKind::Linear => {
            // Standard normal entries are full row rank with probability one;
            // the Gram factorization check guards the measure-zero failure.
            loop {
                let weights = Array2::from_shape_fn((cfg.d, cfg.obs_dim), |_| {
                    <StandardNormal as Distribution<F>>::sample(&StandardNormal, rng)
                });
                let gram = weights.dot(&weights.t());
                if scm::cholesky(&gram.view()).is_ok() {
                    break Projection::Linear { weights };
                }
            }
        }
        ProjectionKind::Mlp3 => {
            let h = MLP_PROJECTION_HIDDEN;
            let layer = |n_in: usize, n_out: usize, rng: &mut dyn rand::RngCore| {
                let std = (1.0 / n_in as F).sqrt();
                Array2::from_shape_fn((n_in, n_out), |_| {
                    std * <StandardNormal as Distribution<F>>::sample(&StandardNormal, rng)
                })
            };
            Projection::Mlp3 {
                w1: layer(cfg.d, h, rng),
                w2: layer(h, h, rng),
                w3: layer(h, cfg.obs_dim, rng),
            }
        }
        ProjectionKind::Blocks => {
            let side = BLOCK_IMAGE_SIDE;
            let mut assign = vec![0usize; side * side];
            for r in 0..side {
                for c in 0..side {
                    assign[r * side + c] = (c * cfg.d) / side;
                }
            }
            Projection::Blocks { assign, side }
        }
    })
}

/// Generates one benchmark: ground truth plus dataset.
///
/// Layout: `n_observational` observational rows first, then
/// `points_per_mask` rows for each mask group in plan order.
pub fn generate(cfg: &SynthConfig, rng: &mut impl Rng) -> Result<(GroundTruth, Dataset)> {
    cfg.validate()?;
    let d = cfg.d;
    let (order, w) = sample_dag(d, cfg.expected_degree, rng);
    let projection = sample_projection(cfg, rng)?;
    let truth = GroundTruth {
        order,
        w,
        sigma: cfg.noise_std,
        projection,
    };

    let plan = sample_masks(cfg, rng);
    let n = cfg.n_observational + cfg.num_mask_groups * cfg.points_per_mask;
    let mut masks = Vec::with_capacity(n);
    let mut values = Array2::zeros((n, d));
    let mut z = Array2::zeros((n, d));

    let empty = InterventionMask::empty(d);
    for row in 0..n {
        let mask = if row < cfg.n_observational {
            &empty
        } else {
            &plan[(row - cfg.n_observational) / cfg.points_per_mask]
        };
        let mut value_row = Array1::zeros(d);
        for i in 0..d {
            if mask.is_intervened(i) {
                value_row[i] = cfg.intervention_value_std
                    * <StandardNormal as Distribution<F>>::sample(&StandardNormal, rng);
            }
        }
        let w_cut = scm::mutate_for_intervention(&truth.w.view(), mask)?;
        let noise = Array1::from_shape_fn(d, |_| {
            <StandardNormal as Distribution<F>>::sample(&StandardNormal, rng)
        });
        let drive =
            scm::clamped_drive(truth.sigma, &noise.view(), mask, &value_row.view())?;
        let z_row = scm::propagate(&w_cut.view(), &drive.view())?;
        z.row_mut(row).assign(&z_row);
        values.row_mut(row).assign(&value_row);
        masks.push(mask.clone());
    }

    let x = truth.projection.apply(&z)?;
    Ok((truth, Dataset { x, masks, values, z }))
}

/// Draws `count` non-empty Bernoulli(½) masks distinct from each other and
/// from everything in `exclude`.
pub fn sample_fresh_masks(
    d: usize,
    count: usize,
    exclude: &[InterventionMask],
    rng: &mut impl Rng,
) -> Result<Vec<InterventionMask>> {
    let available = (1u128 << d) - 1;
    if (count + exclude.len()) as u128 > available {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {count} masks distinct from {} existing ones over d = {d}",
            exclude.len()
        )));
    }
    let mut fresh: Vec<InterventionMask> = Vec::with_capacity(count);
    while fresh.len() < count {
        let bits: Vec<bool> = (0..d).map(|_| rng.random::<bool>()).collect();
        let mask = InterventionMask::new(bits);
        if mask.count() > 0 && !fresh.contains(&mask) && !exclude.contains(&mask) {
            fresh.push(mask);
        }
    }
    Ok(fresh)
}

/// Per-block mean intensity of a batch of flattened block images (`n × side²`).
pub fn block_mean_intensities(x: &Mat, assign: &[usize]) -> Result<Vect> {
    if x.ncols() != assign.len() {
        return Err(Error::DimensionMismatch(format!(
            "images with {} pixels against an assignment of {}",
            x.ncols(),
            assign.len()
        )));
    }
    let blocks = assign.iter().copied().max().map_or(0, |m| m + 1);
    let mut sums = Array1::zeros(blocks);
    let mut counts = vec![0usize; blocks];
    for (p, &b) in assign.iter().enumerate() {
        counts[b] += x.nrows();
        for r in 0..x.nrows() {
            sums[b] += x[(r, p)];
        }
    }
    for b in 0..blocks {
        if counts[b] == 0 {
            return Err(Error::InvalidArgument(format!("block {b} has no pixels")));
        }
        sums[b] /= counts[b] as F;
    }
    Ok(sums)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> SynthConfig {
        SynthConfig {
            d: 5,
            obs_dim: 20,
            expected_degree: 1.0,
            projection: ProjectionKind::Linear,
            n_observational: 30,
            num_mask_groups: 4,
            points_per_mask: 10,
            single_node_masks: true,
            intervention_value_std: 2.0,
            noise_std: 1.0,
        }
    }

    mod dag {
        use super::*;

        #[test]
        fn edges_respect_the_sampled_order() {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            for _ in 0..20 {
                let (order, w) = sample_dag(6, 2.0, &mut rng);
                let slot_of = inverse_order(&order);
                for i in 0..6 {
                    for j in 0..6 {
                        if w[(i, j)] != 0.0 {
                            assert!(slot_of[i] < slot_of[j], "edge {i}→{j} violates order");
                        }
                    }
                }
                scm::topo_order(&w.view()).expect("sampled graph must be acyclic");
            }
        }

        #[test]
        fn weight_magnitudes_stay_in_band() {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let (_, w) = sample_dag(10, 4.0, &mut rng);
            for &x in w.iter().filter(|&&x| x != 0.0) {
                assert!((0.5..2.0).contains(&x.abs()), "weight {x} out of band");
            }
        }

        #[test]
        fn edge_count_matches_expected_degree() {
            // ER-1 over d = 5 puts the pair probability at 0.5, so 200 draws
            // of 10 pairs each give 2000 Bernoulli(½) trials.
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let mut edges = 0usize;
            for _ in 0..200 {
                let (_, w) = sample_dag(5, 1.0, &mut rng);
                edges += w.iter().filter(|&&x| x != 0.0).count();
            }
            let rate = edges as F / 2000.0;
            assert!((rate - 0.5).abs() < 0.05, "edge rate {rate}");
        }
    }

    mod generation {
        use super::*;

        #[test]
        fn layout_is_observational_then_grouped() {
            let cfg = small_config();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let (_, data) = generate(&cfg, &mut rng).unwrap();
            assert_eq!(data.n(), 70);
            for row in 0..30 {
                assert_eq!(data.masks[row].count(), 0);
            }
            let groups = data.groups();
            assert_eq!(groups.len(), 5); // observational + 4 mask groups
            assert_eq!(groups[0].rows.len(), 30);
            for g in &groups[1..] {
                assert_eq!(g.rows.len(), 10);
                assert_eq!(g.mask.count(), 1);
            }
        }

        #[test]
        fn masks_are_distinct() {
            let mut cfg = small_config();
            cfg.single_node_masks = false;
            cfg.num_mask_groups = 12;
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let (_, data) = generate(&cfg, &mut rng).unwrap();
            let groups = data.groups();
            assert_eq!(groups.len(), 13);
            for (a, ga) in groups.iter().enumerate() {
                for gb in groups.iter().skip(a + 1) {
                    assert_ne!(ga.mask, gb.mask);
                }
            }
        }

        #[test]
        fn intervened_latents_equal_their_clamped_values() {
            let cfg = small_config();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let (_, data) = generate(&cfg, &mut rng).unwrap();
            for row in 0..data.n() {
                for i in 0..data.d() {
                    if data.masks[row].is_intervened(i) {
                        assert_eq!(data.z[(row, i)], data.values[(row, i)]);
                    } else {
                        assert_eq!(data.values[(row, i)], 0.0);
                    }
                }
            }
        }

        #[test]
        fn same_seed_reproduces_everything() {
            let cfg = small_config();
            let mut r1 = ChaCha8Rng::seed_from_u64(42);
            let mut r2 = ChaCha8Rng::seed_from_u64(42);
            let (t1, d1) = generate(&cfg, &mut r1).unwrap();
            let (t2, d2) = generate(&cfg, &mut r2).unwrap();
            assert_eq!(t1, t2);
            assert_eq!(d1, d2);
        }

        #[test]
        fn observations_are_the_projected_latents() {
            let cfg = small_config();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let (truth, data) = generate(&cfg, &mut rng).unwrap();
            let expected = truth.projection.apply(&data.z).unwrap();
            assert_eq!(data.x, expected);
        }

        #[test]
        fn too_many_single_node_masks_is_an_error() {
            let mut cfg = small_config();
            cfg.num_mask_groups = 6; // d = 5
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            assert!(generate(&cfg, &mut rng).is_err());
        }
    }

    mod projections {
        use super::*;

        #[test]
        fn linear_apply_is_a_matrix_product() {
            let proj = Projection::Linear {
                weights: array![[1.0, 0.0, 2.0], [0.0, 1.0, -1.0]],
            };
            let z = array![[3.0, 4.0]];
            let x = proj.apply(&z).unwrap();
            assert_eq!(x, array![[3.0, 4.0, 2.0]]);
        }

        #[test]
        fn block_intensities_are_logistic_latents() {
            let assign = vec![0, 0, 1, 1];
            let proj = Projection::Blocks { assign, side: 2 };
            let z = array![[0.0, 3.0]];
            let x = proj.apply(&z).unwrap();
            assert_abs_diff_eq!(x[(0, 0)], 0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(x[(0, 1)], 0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(x[(0, 2)], logistic(3.0), epsilon = 1e-12);
        }

        #[test]
        fn block_assignment_covers_columns_in_order() {
            let cfg = SynthConfig {
                d: 5,
                obs_dim: 1024,
                projection: ProjectionKind::Blocks,
                ..small_config()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let proj = sample_projection(&cfg, &mut rng).unwrap();
            let Projection::Blocks { assign, side } = proj else {
                panic!("expected block projection")
            };
            assert_eq!(side, 32);
            assert_eq!(assign.len(), 1024);
            // Every block appears; assignment is constant down columns and
            // non-decreasing across them.
            for r in 0..32 {
                for c in 0..32 {
                    assert_eq!(assign[r * 32 + c], assign[c]);
                }
            }
            for c in 1..32 {
                assert!(assign[c] >= assign[c - 1]);
            }
            assert_eq!(assign[0], 0);
            assert_eq!(assign[31], 4);
        }

        #[test]
        fn block_mean_intensity_averages_per_block() {
            let assign = vec![0, 0, 1];
            let x = array![[0.2, 0.4, 0.9], [0.0, 0.2, 0.7]];
            let means = block_mean_intensities(&x, &assign).unwrap();
            assert_abs_diff_eq!(means[0], 0.2, epsilon = 1e-12);
            assert_abs_diff_eq!(means[1], 0.8, epsilon = 1e-12);
        }

        #[test]
        fn mlp_projection_matches_hand_rolled_forward() {
            let cfg = SynthConfig {
                projection: ProjectionKind::Mlp3,
                ..small_config()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let proj = sample_projection(&cfg, &mut rng).unwrap();
            let Projection::Mlp3 { w1, w2, w3 } = &proj else {
                panic!("expected MLP projection")
            };
            let mut rng2 = ChaCha8Rng::seed_from_u64(7);
            let z = Array2::from_shape_fn((3, cfg.d), |_| {
                <StandardNormal as Distribution<F>>::sample(&StandardNormal, &mut rng2)
            });
            let expected = z.dot(w1).mapv(F::tanh).dot(w2).mapv(F::tanh).dot(w3);
            assert_eq!(proj.apply(&z).unwrap(), expected);
        }
    }

    mod relabeling {
        use super::*;

        fn truth_and_data() -> (GroundTruth, Dataset) {
            let cfg = small_config();
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            generate(&cfg, &mut rng).unwrap()
        }

        #[test]
        fn relabeled_adjacency_is_strictly_upper_triangular() {
            let (truth, _) = truth_and_data();
            let relabeled = truth.relabel();
            assert_eq!(relabeled.order, vec![0, 1, 2, 3, 4]);
            for i in 0..5 {
                for j in 0..=i {
                    assert_eq!(relabeled.w[(i, j)], 0.0, "entry ({i},{j})");
                }
            }
            assert_eq!(relabeled.num_edges(), truth.num_edges());
        }

        #[test]
        fn relabeled_projection_reproduces_the_same_observations() {
            let (truth, data) = truth_and_data();
            let relabeled_truth = truth.relabel();
            let relabeled_data = data.relabel(&truth.order);
            let x = relabeled_truth
                .projection
                .apply(&relabeled_data.z)
                .unwrap();
            for (a, b) in x.iter().zip(data.x.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }

        #[test]
        fn relabeled_masks_track_their_columns() {
            let (truth, data) = truth_and_data();
            let relabeled = data.relabel(&truth.order);
            for row in 0..data.n() {
                for s in 0..data.d() {
                    assert_eq!(
                        relabeled.masks[row].is_intervened(s),
                        data.masks[row].is_intervened(truth.order[s])
                    );
                    assert_eq!(relabeled.values[(row, s)], data.values[(row, truth.order[s])]);
                }
            }
        }
    }

    mod fresh_masks {
        use super::*;

        #[test]
        fn fresh_masks_avoid_existing_ones() {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let existing: Vec<InterventionMask> = (0..5)
                .map(|i| {
                    let mut bits = vec![false; 5];
                    bits[i] = true;
                    InterventionMask::new(bits)
                })
                .collect();
            let fresh = sample_fresh_masks(5, 10, &existing, &mut rng).unwrap();
            assert_eq!(fresh.len(), 10);
            for m in &fresh {
                assert!(m.count() > 0);
                assert!(!existing.contains(m));
            }
            for (a, ma) in fresh.iter().enumerate() {
                for mb in fresh.iter().skip(a + 1) {
                    assert_ne!(ma, mb);
                }
            }
        }

        #[test]
        fn impossible_requests_are_rejected() {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            assert!(sample_fresh_masks(2, 4, &[], &mut rng).is_err());
        }
    }
}
