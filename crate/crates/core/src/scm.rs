//! Linear-Gaussian SCM primitives.
//!
//! A structural causal model over `d` variables is parameterized by a node
//! permutation `P`, a strictly lower-triangular edge-weight matrix `L`, and a
//! scalar noise scale `σ`. The weighted adjacency is `W = PᵀLᵀP`, where
//! `w[j][i]` is the weight of edge `j → i`; the triangular parameterization
//! makes the support of `W` acyclic for every choice of `P` and `L`. Each
//! variable is the weighted sum of its parents plus scaled Gaussian noise:
//!
//! ```text
//! z[i] = Σ_j w[j][i] · z[j] + σ · ε[i]
//! ```
//!
//! Interventions clamp a subset of nodes: their incoming edges (columns of
//! `W`) are removed and their values are driven externally.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A node permutation, stored as the positions of the ones of the matrix.
///
/// `forward[i] = j` means the permutation matrix has a one at `(i, j)`.
/// Row index `i` is a *slot* in the triangular ordering; column index `j` is
/// a node, so the induced topological order of nodes is
/// `forward[0], forward[1], …, forward[d-1]`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Permutation {
    forward: Vec<usize>,
}

impl Permutation {
    /// Identity permutation over `d` nodes.
    pub fn identity(d: usize) -> Self {
        Permutation {
            forward: (0..d).collect(),
        }
    }

    /// Builds a permutation from the column index of each row's one.
    ///
    /// Fails unless `forward` is a bijection on `0..d`.
    pub fn from_indices(forward: Vec<usize>) -> Result<Self> {
        let d = forward.len();
        let mut seen = vec![false; d];
        for &j in &forward {
            if j >= d || seen[j] {
                return Err(Error::InvalidArgument(format!(
                    "permutation indices must be a bijection on 0..{d}, got {forward:?}"
                )));
            }
            seen[j] = true;
        }
        Ok(Permutation { forward })
    }

    /// Number of nodes.
    pub fn d(&self) -> usize {
        self.forward.len()
    }

    /// Node occupying slot `i` of the ordering.
    pub fn node_at(&self, slot: usize) -> usize {
        self.forward[slot]
    }

    /// Slot occupied by `node` (inverse map).
    pub fn slot_of(&self, node: usize) -> usize {
        self.forward.iter().position(|&j| j == node).expect("node in range")
    }

    /// Slot-to-node indices, i.e. the induced topological order of nodes.
    pub fn order(&self) -> &[usize] {
        &self.forward
    }

    /// Dense 0/1 matrix with ones at `(i, forward[i])`.
    pub fn matrix<S: Scalar>(&self) -> Array2<S> {
        let d = self.d();
        let mut m = Array2::zeros((d, d));
        for (i, &j) in self.forward.iter().enumerate() {
            m[(i, j)] = S::one();
        }
        m
    }

    /// Recovers a permutation from a dense 0/1 matrix.
    pub fn from_matrix<S: Scalar>(m: &ArrayView2<S>) -> Result<Self> {
        let (r, c) = m.dim();
        if r != c {
            return Err(Error::DimensionMismatch(format!(
                "permutation matrix must be square, got {r}x{c}"
            )));
        }
        let mut forward = Vec::with_capacity(r);
        for i in 0..r {
            let mut hit = None;
            for j in 0..c {
                let v = m[(i, j)];
                if v == S::one() {
                    if hit.is_some() {
                        return Err(Error::InvalidArgument(format!(
                            "row {i} has more than one unit entry"
                        )));
                    }
                    hit = Some(j);
                } else if v != S::zero() {
                    return Err(Error::InvalidArgument(format!(
                        "entry ({i},{j}) is neither 0 nor 1"
                    )));
                }
            }
            forward.push(hit.ok_or_else(|| {
                Error::InvalidArgument(format!("row {i} has no unit entry"))
            })?);
        }
        Permutation::from_indices(forward)
    }
}

/// Strictly lower-triangular edge-weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMatrixL<S: Scalar> {
    m: Array2<S>,
}

impl<S: Scalar> EdgeMatrixL<S> {
    /// Validates strict lower-triangularity (zero on and above the diagonal)
    /// and finiteness.
    pub fn new(m: Array2<S>) -> Result<Self> {
        let (r, c) = m.dim();
        if r != c {
            return Err(Error::DimensionMismatch(format!(
                "edge matrix must be square, got {r}x{c}"
            )));
        }
        for i in 0..r {
            for j in 0..c {
                let v = m[(i, j)];
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("edge weight at ({i},{j})")));
                }
                if j >= i && v != S::zero() {
                    return Err(Error::InvalidArgument(format!(
                        "entry ({i},{j}) must be zero on/above the diagonal"
                    )));
                }
            }
        }
        Ok(EdgeMatrixL { m })
    }

    /// All-zero matrix of side `d`.
    pub fn zeros(d: usize) -> Self {
        EdgeMatrixL {
            m: Array2::zeros((d, d)),
        }
    }

    /// Number of nodes.
    pub fn d(&self) -> usize {
        self.m.nrows()
    }

    /// The underlying dense matrix.
    pub fn matrix(&self) -> &Array2<S> {
        &self.m
    }

    /// Strictly-lower entries flattened in row-major order
    /// (`(1,0), (2,0), (2,1), (3,0), …`).
    pub fn flatten_lower(&self) -> Array1<S> {
        let d = self.d();
        let mut out = Array1::zeros(d * (d - 1) / 2);
        for (k, (i, j)) in lower_index_pairs(d).into_iter().enumerate() {
            out[k] = self.m[(i, j)];
        }
        out
    }

    /// Inverse of [`EdgeMatrixL::flatten_lower`].
    pub fn from_flat(d: usize, flat: ArrayView1<S>) -> Result<Self> {
        let k = d * (d - 1) / 2;
        if flat.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "expected {k} strictly-lower entries for d={d}, got {}",
                flat.len()
            )));
        }
        let mut m = Array2::zeros((d, d));
        for (k, (i, j)) in lower_index_pairs(d).into_iter().enumerate() {
            let v = flat[k];
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("edge weight at flat index {k}")));
            }
            m[(i, j)] = v;
        }
        Ok(EdgeMatrixL { m })
    }
}

/// Row-major index pairs of the strictly-lower triangle of a `d×d` matrix.
pub fn lower_index_pairs(d: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(d * (d - 1) / 2);
    for i in 1..d {
        for j in 0..i {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Set of intervened nodes for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct InterventionMask {
    bits: Vec<bool>,
}

impl InterventionMask {
    /// Mask over `d` nodes with no interventions.
    pub fn empty(d: usize) -> Self {
        InterventionMask {
            bits: vec![false; d],
        }
    }

    /// Mask from per-node flags.
    pub fn new(bits: Vec<bool>) -> Self {
        InterventionMask { bits }
    }

    /// Number of nodes.
    pub fn d(&self) -> usize {
        self.bits.len()
    }

    /// Whether `node` is intervened.
    pub fn is_intervened(&self, node: usize) -> bool {
        self.bits[node]
    }

    /// Per-node flags.
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of intervened nodes.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Reindexes the mask so entry `k` refers to node `order[k]`.
    pub fn reordered(&self, order: &[usize]) -> Self {
        InterventionMask {
            bits: order.iter().map(|&n| self.bits[n]).collect(),
        }
    }
}

/// Composes the weighted adjacency `W = PᵀLᵀP`.
///
/// The support of the result is acyclic for every valid `(P, L)`; the node
/// order induced by `P` (see [`Permutation::order`]) is a topological order
/// of it.
pub fn compose_w<S: Scalar>(p: &Permutation, l: &EdgeMatrixL<S>) -> Result<Array2<S>> {
    let d = p.d();
    if l.d() != d {
        return Err(Error::DimensionMismatch(format!(
            "permutation over {d} nodes vs edge matrix over {}",
            l.d()
        )));
    }
    // W[a][b] = Lᵀ[σ⁻¹(a)][σ⁻¹(b)] = L[slot(b)][slot(a)]; filling via the
    // forward map avoids materializing P.
    let mut w = Array2::zeros((d, d));
    let lm = l.matrix();
    for si in 0..d {
        for sj in 0..d {
            let v = lm[(sj, si)];
            if v != S::zero() {
                w[(p.node_at(si), p.node_at(sj))] = v;
            }
        }
    }
    Ok(w)
}

/// Recovers the strictly lower-triangular factor `L = (P W Pᵀ)ᵀ` of a
/// weighted adjacency whose support respects the order induced by `p`.
pub fn recover_l<S: Scalar>(p: &Permutation, w: &ArrayView2<S>) -> Result<EdgeMatrixL<S>> {
    let d = p.d();
    if w.dim() != (d, d) {
        return Err(Error::DimensionMismatch(format!(
            "expected {d}x{d} adjacency, got {:?}",
            w.dim()
        )));
    }
    let mut m = Array2::zeros((d, d));
    for a in 0..d {
        for b in 0..d {
            let v = w[(a, b)];
            if v != S::zero() {
                let (sa, sb) = (p.slot_of(a), p.slot_of(b));
                if sb <= sa {
                    return Err(Error::InvalidArgument(format!(
                        "edge {a}->{b} runs against the order induced by p"
                    )));
                }
                m[(sb, sa)] = v;
            }
        }
    }
    EdgeMatrixL::new(m)
}

/// Removes all incoming edges of the intervened nodes (zeroes those columns).
pub fn mutate_for_intervention<S: Scalar>(
    w: &ArrayView2<S>,
    mask: &InterventionMask,
) -> Result<Array2<S>> {
    let d = w.nrows();
    if w.ncols() != d || mask.d() != d {
        return Err(Error::DimensionMismatch(format!(
            "adjacency {:?} vs mask over {} nodes",
            w.dim(),
            mask.d()
        )));
    }
    let mut out = w.to_owned();
    for node in 0..d {
        if mask.is_intervened(node) {
            out.column_mut(node).fill(S::zero());
        }
    }
    Ok(out)
}

/// Topological order of the support of `w` (Kahn's algorithm).
///
/// Fails with [`Error::CyclicGraph`] when the support contains a cycle.
pub fn topo_order<S: Scalar>(w: &ArrayView2<S>) -> Result<Vec<usize>> {
    let d = w.nrows();
    if w.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "adjacency must be square, got {:?}",
            w.dim()
        )));
    }
    // in-degree of node i = number of nonzero entries in column i
    let mut indeg = vec![0usize; d];
    for j in 0..d {
        for i in 0..d {
            if w[(i, j)] != S::zero() {
                indeg[j] += 1;
            }
        }
    }
    let mut queue: Vec<usize> = (0..d).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(d);
    let mut head = 0;
    while head < queue.len() {
        let u = queue[head];
        head += 1;
        order.push(u);
        for v in 0..d {
            if w[(u, v)] != S::zero() {
                indeg[v] -= 1;
                if indeg[v] == 0 {
                    queue.push(v);
                }
            }
        }
    }
    if order.len() != d {
        return Err(Error::CyclicGraph(format!(
            "support admits no topological order ({} of {d} nodes sorted)",
            order.len()
        )));
    }
    Ok(order)
}

/// Solves `x = Wᵀx + drive` by substitution in topological order.
///
/// The drive carries the exogenous contribution of each node (scaled noise,
/// or a clamped intervention value for nodes whose incoming edges were
/// removed). Fails when the support of `w` is cyclic.
pub fn propagate<S: Scalar>(w: &ArrayView2<S>, drive: &ArrayView1<S>) -> Result<Array1<S>> {
    let d = w.nrows();
    if drive.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "adjacency for {d} nodes vs drive of length {}",
            drive.len()
        )));
    }
    let order = topo_order(w)?;
    let mut z = Array1::zeros(d);
    for &i in &order {
        let mut acc = drive[i];
        for j in 0..d {
            let wji = w[(j, i)];
            if wji != S::zero() {
                acc += wji * z[j];
            }
        }
        z[i] = acc;
    }
    Ok(z)
}

/// Draws one latent vector: `z = Wᵀz + σ·ε` solved in topological order.
///
/// `sigma` may be zero, in which case the propagation is deterministic.
pub fn ancestral_sample<S: Scalar>(
    w: &ArrayView2<S>,
    sigma: S,
    noise: &ArrayView1<S>,
) -> Result<Array1<S>> {
    if !sigma.is_finite() || sigma < S::zero() {
        return Err(Error::InvalidArgument(format!(
            "noise scale must be finite and nonnegative, got {sigma}"
        )));
    }
    let drive = noise.mapv(|e| sigma * e);
    propagate(w, &drive.view())
}

/// Drive vector for a clamped interventional sample: intervened coordinates
/// carry their intervention value, the rest carry `σ·ε`.
pub fn clamped_drive<S: Scalar>(
    sigma: S,
    noise: &ArrayView1<S>,
    mask: &InterventionMask,
    values: &ArrayView1<S>,
) -> Result<Array1<S>> {
    let d = mask.d();
    if noise.len() != d || values.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "mask over {d} nodes vs noise {} / values {}",
            noise.len(),
            values.len()
        )));
    }
    let mut drive = Array1::zeros(d);
    for i in 0..d {
        drive[i] = if mask.is_intervened(i) {
            values[i]
        } else {
            sigma * noise[i]
        };
    }
    Ok(drive)
}

/// Closed-form covariance of observational samples: `σ²·(I−Wᵀ)⁻¹·(I−Wᵀ)⁻ᵀ`.
pub fn observational_covariance<S: Scalar>(w: &ArrayView2<S>, sigma: S) -> Result<Array2<S>> {
    let d = w.nrows();
    if !sigma.is_finite() || sigma < S::zero() {
        return Err(Error::InvalidArgument(format!(
            "noise scale must be finite and nonnegative, got {sigma}"
        )));
    }
    // Columns of M = (I−Wᵀ)⁻¹ solve the same recurrence as propagation with
    // unit drives, so the triangular structure is reused instead of a dense
    // inversion.
    let mut m = Array2::<S>::zeros((d, d));
    for i in 0..d {
        let mut e = Array1::zeros(d);
        e[i] = S::one();
        let col = propagate(w, &e.view())?;
        m.column_mut(i).assign(&col);
    }
    let sig2 = sigma * sigma;
    let cov = m.dot(&m.t()).mapv(|v| v * sig2);
    // Enforce exact symmetry against floating-point drift.
    let mut out = cov.clone();
    for i in 0..d {
        for j in 0..d {
            let avg = (cov[(i, j)] + cov[(j, i)]) * S::of(0.5);
            out[(i, j)] = avg;
        }
    }
    Ok(out)
}

/// Cholesky factor (lower) of a symmetric positive-definite matrix.
pub fn cholesky<S: Scalar>(a: &ArrayView2<S>) -> Result<Array2<S>> {
    let d = a.nrows();
    if a.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "matrix must be square, got {:?}",
            a.dim()
        )));
    }
    let mut l = Array2::<S>::zeros((d, d));
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            for k in 0..j {
                sum = sum - l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if sum <= S::zero() || !sum.is_finite() {
                    return Err(Error::NotPositiveDefinite(format!(
                        "pivot {i} is {sum}"
                    )));
                }
                l[(i, j)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Ok(l)
}

/// KL divergence between zero-mean Gaussians with covariances `a` and `b`:
/// `½·(tr(B⁻¹A) + ln det B − ln det A − d)`.
pub fn gaussian_kl<S: Scalar>(a: &ArrayView2<S>, b: &ArrayView2<S>) -> Result<S> {
    let d = a.nrows();
    if a.dim() != b.dim() || a.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "covariances must be square and equal-sized, got {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let la = cholesky(a)?;
    let lb = cholesky(b)?;
    // ln det X = 2·Σ ln diag(chol(X))
    let ln_det = |l: &Array2<S>| -> S {
        let mut s = S::zero();
        for i in 0..d {
            s += l[(i, i)].ln();
        }
        s + s
    };
    // tr(B⁻¹A) = ‖Lb⁻¹·La‖²_F, via forward substitution per column of La.
    let mut trace = S::zero();
    for j in 0..d {
        let mut x = Array1::<S>::zeros(d);
        for i in 0..d {
            let mut sum = la[(i, j)];
            for k in 0..i {
                sum = sum - lb[(i, k)] * x[k];
            }
            x[i] = sum / lb[(i, i)];
            trace += x[i] * x[i];
        }
    }
    let two = S::of(2.0);
    Ok((trace + ln_det(&lb) - ln_det(&la) - S::of(d as f64)) / two)
}

/// Thresholded binary adjacency: entry `1` iff `|w| > threshold` (strict).
pub fn binarize<S: Scalar>(w: &ArrayView2<S>, threshold: S) -> Array2<bool> {
    w.mapv(|v| v.abs() > threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn perm(idx: &[usize]) -> Permutation {
        Permutation::from_indices(idx.to_vec()).unwrap()
    }

    mod permutation {
        use super::*;

        #[test]
        fn rejects_non_bijections() {
            assert!(Permutation::from_indices(vec![0, 0, 2]).is_err());
            assert!(Permutation::from_indices(vec![0, 3]).is_err());
        }

        #[test]
        fn matrix_round_trips_through_indices() {
            let p = perm(&[2, 0, 1]);
            let m = p.matrix::<f64>();
            assert_eq!(Permutation::from_matrix(&m.view()).unwrap(), p);
        }

        #[test]
        fn from_matrix_rejects_doubly_stochastic() {
            let m = array![[0.5, 0.5], [0.5, 0.5]];
            assert!(Permutation::from_matrix(&m.view()).is_err());
        }
    }

    mod compose {
        use super::*;

        #[test]
        fn identity_permutation_transposes_l() {
            // d=2, l[1][0] = 0.7 under identity P: single edge 0 → 1.
            let l = EdgeMatrixL::new(array![[0.0, 0.0], [0.7, 0.0]]).unwrap();
            let w = compose_w(&Permutation::identity(2), &l).unwrap();
            assert_eq!(w, array![[0.0, 0.7], [0.0, 0.0]]);
        }

        #[test]
        fn support_respects_induced_order() {
            // Dense strictly-lower L and a nontrivial permutation: every edge
            // must run forward along p.order().
            let p = perm(&[2, 0, 3, 1]);
            let mut lm = Array2::zeros((4, 4));
            for (k, (i, j)) in lower_index_pairs(4).into_iter().enumerate() {
                lm[(i, j)] = 1.0 + k as f64;
            }
            let l = EdgeMatrixL::new(lm).unwrap();
            let w = compose_w(&p, &l).unwrap();
            let slot: Vec<usize> = (0..4).map(|n| p.slot_of(n)).collect();
            for a in 0..4 {
                for b in 0..4 {
                    if w[(a, b)] != 0.0 {
                        assert!(slot[a] < slot[b], "edge {a}->{b} runs backward");
                    }
                }
            }
            // All 6 edges of the dense lower triangle survive conjugation.
            assert_eq!(w.iter().filter(|&&v| v != 0.0).count(), 6);
        }

        #[test]
        fn recover_l_inverts_compose() {
            let p = perm(&[1, 3, 0, 2]);
            let mut lm = Array2::zeros((4, 4));
            for (k, (i, j)) in lower_index_pairs(4).into_iter().enumerate() {
                lm[(i, j)] = 0.5 * (k as f64 + 1.0);
            }
            let l = EdgeMatrixL::new(lm).unwrap();
            let w = compose_w(&p, &l).unwrap();
            let back = recover_l(&p, &w.view()).unwrap();
            assert_eq!(back.matrix(), l.matrix());
        }

        #[test]
        fn dimension_mismatch_is_rejected() {
            let l = EdgeMatrixL::<f64>::zeros(3);
            assert!(compose_w(&Permutation::identity(2), &l).is_err());
        }
    }

    mod edge_matrix {
        use super::*;

        #[test]
        fn rejects_diagonal_and_upper_entries() {
            assert!(EdgeMatrixL::new(array![[1.0, 0.0], [0.0, 0.0]]).is_err());
            assert!(EdgeMatrixL::new(array![[0.0, 0.3], [0.0, 0.0]]).is_err());
        }

        #[test]
        fn flatten_uses_row_major_lower_order() {
            let l = EdgeMatrixL::new(array![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [2.0, 3.0, 0.0]
            ])
            .unwrap();
            assert_eq!(l.flatten_lower(), array![1.0, 2.0, 3.0]);
            let back = EdgeMatrixL::from_flat(3, l.flatten_lower().view()).unwrap();
            assert_eq!(back.matrix(), l.matrix());
        }
    }

    mod mutate {
        use super::*;

        #[test]
        fn empty_mask_is_identity() {
            let w = array![[0.0, 1.5], [0.0, 0.0]];
            let out = mutate_for_intervention(&w.view(), &InterventionMask::empty(2)).unwrap();
            assert_eq!(out, w);
        }

        #[test]
        fn full_mask_zeroes_everything() {
            let w = array![[0.0, 1.5], [2.0, 0.0]];
            let mask = InterventionMask::new(vec![true, true]);
            let out = mutate_for_intervention(&w.view(), &mask).unwrap();
            assert_eq!(out, Array2::<f64>::zeros((2, 2)));
        }

        #[test]
        fn zeroes_only_incoming_columns() {
            // Edge 0 → 1 and 1 → 2; intervening on 1 removes 0 → 1 but keeps 1 → 2.
            let w = array![
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 2.0],
                [0.0, 0.0, 0.0]
            ];
            let mask = InterventionMask::new(vec![false, true, false]);
            let out = mutate_for_intervention(&w.view(), &mask).unwrap();
            assert_eq!(out[(0, 1)], 0.0);
            assert_eq!(out[(1, 2)], 2.0);
        }
    }

    mod sampling {
        use super::*;

        #[test]
        fn two_node_chain_hand_computed() {
            // Edge 0 → 1 with weight 2, σ = 1, noise (1, 1):
            // z0 = 1, z1 = 2·1 + 1 = 3.
            let w = array![[0.0, 2.0], [0.0, 0.0]];
            let z = ancestral_sample(&w.view(), 1.0, &array![1.0, 1.0].view()).unwrap();
            assert_eq!(z, array![1.0, 3.0]);
        }

        #[test]
        fn zero_sigma_propagates_deterministically() {
            let w = array![[0.0, 2.0], [0.0, 0.0]];
            let z = ancestral_sample(&w.view(), 0.0, &array![5.0, 5.0].view()).unwrap();
            assert_eq!(z, array![0.0, 0.0]);
        }

        #[test]
        fn cyclic_support_is_an_error() {
            let w = array![[0.0, 1.0], [1.0, 0.0]];
            let err = ancestral_sample(&w.view(), 1.0, &array![0.0, 0.0].view()).unwrap_err();
            assert!(matches!(err, Error::CyclicGraph(_)));
        }

        #[test]
        fn clamped_drive_overrides_intervened_coordinates() {
            let mask = InterventionMask::new(vec![true, false]);
            let drive = clamped_drive(
                2.0,
                &array![9.0, 1.0].view(),
                &mask,
                &array![-3.0, 0.0].view(),
            )
            .unwrap();
            assert_eq!(drive, array![-3.0, 2.0]);
        }

        #[test]
        fn propagation_is_linear_in_the_drive() {
            let w = array![
                [0.0, 1.0, 0.5],
                [0.0, 0.0, -2.0],
                [0.0, 0.0, 0.0]
            ];
            let a = array![1.0, -1.0, 2.0];
            let b = array![0.5, 3.0, 0.0];
            let za = propagate(&w.view(), &a.view()).unwrap();
            let zb = propagate(&w.view(), &b.view()).unwrap();
            let zab = propagate(&w.view(), &(&a + &b).view()).unwrap();
            for i in 0..3 {
                assert_abs_diff_eq!(zab[i], za[i] + zb[i], epsilon = 1e-12);
            }
        }
    }

    mod covariance {
        use super::*;

        #[test]
        fn empty_graph_is_scaled_identity() {
            let w = Array2::<f64>::zeros((3, 3));
            let cov = observational_covariance(&w.view(), 2.0).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let want = if i == j { 4.0 } else { 0.0 };
                    assert_abs_diff_eq!(cov[(i, j)], want, epsilon = 1e-12);
                }
            }
        }

        #[test]
        fn two_node_chain_hand_expansion() {
            // Edge 0 → 1 with weight a, σ = 1: cov = [[1, a], [a, 1 + a²]].
            let a = 1.7;
            let w = array![[0.0, a], [0.0, 0.0]];
            let cov = observational_covariance(&w.view(), 1.0).unwrap();
            assert_abs_diff_eq!(cov[(0, 0)], 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(cov[(0, 1)], a, epsilon = 1e-12);
            assert_abs_diff_eq!(cov[(1, 0)], a, epsilon = 1e-12);
            assert_abs_diff_eq!(cov[(1, 1)], 1.0 + a * a, epsilon = 1e-12);
        }
    }

    mod kl {
        use super::*;

        #[test]
        fn self_kl_is_zero() {
            let a = array![[2.0, 0.3], [0.3, 1.0]];
            let kl: f64 = gaussian_kl(&a.view(), &a.view()).unwrap();
            assert!(kl.abs() <= 1e-10, "self-KL was {kl}");
        }

        #[test]
        fn doubled_identity_vs_identity() {
            // KL(N(0, 2I₂) ‖ N(0, I₂)) = ½(4 + 0 − 2 ln 2 − 2) = 1 − ln 2.
            let a = array![[2.0, 0.0], [0.0, 2.0]];
            let b = array![[1.0, 0.0], [0.0, 1.0]];
            let kl = gaussian_kl(&a.view(), &b.view()).unwrap();
            assert_abs_diff_eq!(kl, 1.0 - std::f64::consts::LN_2, epsilon = 1e-12);
        }

        #[test]
        fn non_positive_definite_is_rejected() {
            let a = array![[1.0, 2.0], [2.0, 1.0]]; // eigenvalues 3, −1
            let b = array![[1.0, 0.0], [0.0, 1.0]];
            let err = gaussian_kl(&a.view(), &b.view()).unwrap_err();
            assert!(matches!(err, Error::NotPositiveDefinite(_)));
        }
    }

    mod binarize_threshold {
        use super::*;

        #[test]
        fn comparison_is_strict() {
            let w = array![[0.0, 0.3], [-0.31, 0.0]];
            let b = binarize(&w.view(), 0.3);
            assert!(!b[(0, 1)], "|w| equal to the threshold must not count");
            assert!(b[(1, 0)]);
        }
    }
}
