//! Structure-recovery and reconstruction metrics.
//!
//! Everything here is a pure function of posterior samples, ground truth,
//! and reconstructions; nothing touches the trainer. Conventions:
//!
//! * Graph expectations average over binarized posterior weight samples
//!   (|w| strictly above the edge threshold).
//! * Ranking metrics treat the `d(d−1)` ordered variable pairs as a binary
//!   classification problem: AUROC by the rank-based (Mann–Whitney) formula
//!   with average ranks on ties, precision-recall area by the step-wise sum.
//!   Both are undefined — reported as absent — when the ground truth has no
//!   positive or no negative pair.
//! * Latent recovery (MCC) correlates true and posterior-mean latents
//!   coordinate-wise, matches coordinates either by maximum-weight
//!   assignment or, when the variable ordering is pinned, by identity, and
//!   averages the matched absolute correlations.

use ndarray::{Array2, ArrayView1};

use crate::assignment;
use crate::error::{Error, Result};
use crate::scm;
use crate::{F, Mat};

/// Absolute-weight threshold above which an edge counts as present.
pub const EDGE_THRESHOLD: F = 0.3;

/// Default number of posterior graph samples behind expectations.
pub const DEFAULT_GRAPH_SAMPLES: usize = 100;

/// Default number of ancestral samples behind each posterior-mean latent row.
pub const DEFAULT_LATENT_SAMPLES: usize = 64;

/// One full evaluation record.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    /// Expected structural Hamming distance over posterior samples
    /// (insertions + deletions + reversals; a reversal counts once).
    pub e_shd: F,
    /// Expected skeleton (undirected) Hamming distance over the same samples.
    pub shd_c: F,
    /// Ranking quality of posterior edge frequencies; absent when undefined.
    pub auroc: Option<F>,
    /// Precision-recall area of posterior edge frequencies.
    pub auprc_g: Option<F>,
    /// Precision-recall area of absolute mean edge weights.
    pub auprc_w: Option<F>,
    /// Mean matched absolute correlation between true and recovered latents.
    pub mcc: F,
    /// Mean over samples of entrywise squared weight error (all d² entries).
    pub l_mse: F,
    /// Mean squared reconstruction error of decoded posterior-mean latents;
    /// absent for the null baseline, which has no decoder.
    pub x_mse: Option<F>,
    /// Gaussian KL from the model's latent observational distribution to the
    /// ground truth's; absent when the mean posterior graph is cyclic.
    pub obs_kl: Option<F>,
    /// True positives of the thresholded mean graph.
    pub tp: u64,
    /// False positives.
    pub fp: u64,
    /// True negatives.
    pub tn: u64,
    /// False negatives.
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// True positive rate (0 when no ground-truth edges).
    pub tpr: F,
    /// False positive rate (0 when no ground-truth non-edges).
    pub fpr: F,
    /// Precision (0 when nothing is predicted).
    pub precision: F,
    /// Recall, identical to `tpr`.
    pub recall: F,
    /// Harmonic mean of precision and recall (0 when both are 0).
    pub f1: F,
}

/// Binarizes a weighted graph: edge iff `|w| > threshold` off the diagonal.
pub fn binarize(w: &Mat, threshold: F) -> Array2<bool> {
    let d = w.nrows();
    Array2::from_shape_fn((d, d), |(i, j)| i != j && w[(i, j)].abs() > threshold)
}

fn check_square_pair(a: &Array2<bool>, b: &Array2<bool>) -> Result<usize> {
    let d = a.nrows();
    if a.ncols() != d || b.nrows() != d || b.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "adjacency shapes {}x{} vs {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    Ok(d)
}

/// Structural Hamming distance with reversals counted once.
pub fn shd(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<usize> {
    let d = check_square_pair(pred, gt)?;
    let mut dist = 0;
    for i in 0..d {
        for j in (i + 1)..d {
            let p = (pred[(i, j)], pred[(j, i)]);
            let g = (gt[(i, j)], gt[(j, i)]);
            let p_any = p.0 || p.1;
            let g_any = g.0 || g.1;
            if p_any != g_any {
                dist += 1; // insertion or deletion
            } else if p_any && p != g {
                dist += 1; // reversal (or double-edge disagreement)
            }
        }
    }
    Ok(dist)
}

/// Hamming distance between undirected skeletons.
pub fn skeleton_shd(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<usize> {
    let d = check_square_pair(pred, gt)?;
    let mut dist = 0;
    for i in 0..d {
        for j in (i + 1)..d {
            let p_any = pred[(i, j)] || pred[(j, i)];
            let g_any = gt[(i, j)] || gt[(j, i)];
            if p_any != g_any {
                dist += 1;
            }
        }
    }
    Ok(dist)
}

/// Mean [`shd`] over posterior samples.
pub fn expected_shd(samples: &[Array2<bool>], gt: &Array2<bool>) -> Result<F> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no posterior samples".into()));
    }
    let mut total = 0usize;
    for s in samples {
        total += shd(s, gt)?;
    }
    Ok(total as F / samples.len() as F)
}

/// Mean [`skeleton_shd`] over posterior samples.
pub fn expected_skeleton_shd(samples: &[Array2<bool>], gt: &Array2<bool>) -> Result<F> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no posterior samples".into()));
    }
    let mut total = 0usize;
    for s in samples {
        total += skeleton_shd(s, gt)?;
    }
    Ok(total as F / samples.len() as F)
}

/// Fraction of samples containing each directed edge.
pub fn edge_frequencies(samples: &[Array2<bool>]) -> Result<Mat> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no posterior samples".into()))?;
    let d = first.nrows();
    let mut freq = Array2::zeros((d, d));
    for s in samples {
        check_square_pair(s, first)?;
        for i in 0..d {
            for j in 0..d {
                if s[(i, j)] {
                    freq[(i, j)] += 1.0;
                }
            }
        }
    }
    freq.mapv_inplace(|x| x / samples.len() as F);
    Ok(freq)
}

/// Entrywise mean of weighted posterior samples.
pub fn mean_graph(samples: &[Mat]) -> Result<Mat> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no posterior samples".into()))?;
    let mut mean: Mat = Array2::zeros(first.dim());
    for s in samples {
        if s.dim() != first.dim() {
            return Err(Error::DimensionMismatch(
                "posterior samples of differing shapes".into(),
            ));
        }
        mean = mean + s;
    }
    Ok(mean / samples.len() as F)
}

fn score_label_pairs(scores: &Mat, gt: &Array2<bool>) -> Result<Vec<(F, bool)>> {
    let d = gt.nrows();
    if scores.nrows() != d || scores.ncols() != d || gt.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "scores {}x{} against ground truth {}x{}",
            scores.nrows(),
            scores.ncols(),
            d,
            gt.ncols()
        )));
    }
    let mut pairs = Vec::with_capacity(d * (d - 1));
    for i in 0..d {
        for j in 0..d {
            if i != j {
                pairs.push((scores[(i, j)], gt[(i, j)]));
            }
        }
    }
    Ok(pairs)
}

/// Area under the ROC curve over ordered variable pairs, by the rank-based
/// formula with average ranks on ties. `None` when the ground truth has no
/// positive or no negative pair.
pub fn auroc(scores: &Mat, gt: &Array2<bool>) -> Result<Option<F>> {
    let mut pairs = score_label_pairs(scores, gt)?;
    let n_pos = pairs.iter().filter(|(_, y)| *y).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores must be orderable"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        // Ranks i+1 ..= j share the average rank.
        let avg_rank = (i + 1 + j) as F / 2.0;
        for p in &pairs[i..j] {
            if p.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as F / 2.0;
    Ok(Some(u / (n_pos as F * n_neg as F)))
}

/// Area under the precision-recall curve by the step-wise sum
/// `Σ (R_k − R_{k−1})·P_k` over distinct score thresholds, descending.
/// `None` when the ground truth has no positive or no negative pair.
pub fn average_precision(scores: &Mat, gt: &Array2<bool>) -> Result<Option<F>> {
    let mut pairs = score_label_pairs(scores, gt)?;
    let n_pos = pairs.iter().filter(|(_, y)| *y).count();
    if n_pos == 0 || n_pos == pairs.len() {
        return Ok(None);
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("scores must be orderable"));
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        for p in &pairs[i..j] {
            if p.1 {
                tp += 1;
            }
        }
        seen += j - i;
        let recall = tp as F / n_pos as F;
        let precision = tp as F / seen as F;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(Some(ap))
}

/// Pearson correlation; 0 when either coordinate has zero variance.
pub fn pearson(a: &ArrayView1<F>, b: &ArrayView1<F>) -> Result<F> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "correlation needs two same-length series of ≥ 2 points, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as F;
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// How recovered latent coordinates are matched to true ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMatching {
    /// Maximum-weight assignment on absolute correlations.
    Assignment,
    /// Coordinate `i` matches coordinate `i` (pinned variable ordering).
    Identity,
}

/// Mean matched absolute Pearson correlation between true and recovered
/// latent coordinates.
pub fn mcc(z_true: &Mat, z_pred: &Mat, matching: LatentMatching) -> Result<F> {
    if z_true.dim() != z_pred.dim() {
        return Err(Error::DimensionMismatch(format!(
            "latents {}x{} against {}x{}",
            z_true.nrows(),
            z_true.ncols(),
            z_pred.nrows(),
            z_pred.ncols()
        )));
    }
    let d = z_true.ncols();
    let mut corr = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            corr[(i, j)] = pearson(&z_true.column(i), &z_pred.column(j))?.abs();
        }
    }
    let total = match matching {
        LatentMatching::Identity => (0..d).map(|i| corr[(i, i)]).sum::<F>(),
        LatentMatching::Assignment => {
            let assignment = assignment::max_assignment(&corr.view())?;
            (0..d).map(|i| corr[(i, assignment.node_at(i))]).sum::<F>()
        }
    };
    Ok(total / d as F)
}

/// Mean over samples of the mean squared entrywise difference from the
/// ground-truth weights, over all `d²` entries.
pub fn edge_weight_mse(w_samples: &[Mat], gt_w: &Mat) -> Result<F> {
    if w_samples.is_empty() {
        return Err(Error::InvalidArgument("no posterior samples".into()));
    }
    let mut total = 0.0;
    for s in w_samples {
        total += matrix_mse(s, gt_w)?;
    }
    Ok(total / w_samples.len() as F)
}

/// Mean squared entrywise difference.
pub fn matrix_mse(a: &Mat, b: &Mat) -> Result<F> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "matrices {}x{} against {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        total += (x - y) * (x - y);
    }
    Ok(total / a.len() as F)
}

/// Confusion counts of a thresholded mean graph over ordered pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    /// True positive rate; 0 when there are no ground-truth edges.
    pub fn tpr(&self) -> F {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// False positive rate; 0 when there are no ground-truth non-edges.
    pub fn fpr(&self) -> F {
        ratio(self.fp, self.fp + self.tn)
    }

    /// Precision; 0 when nothing is predicted.
    pub fn precision(&self) -> F {
        ratio(self.tp, self.tp + self.fp)
    }

    /// Recall (same as `tpr`).
    pub fn recall(&self) -> F {
        self.tpr()
    }

    /// F1 score; 0 when precision and recall are both 0.
    pub fn f1(&self) -> F {
        let p = self.precision();
        let r = self.recall();
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: u64, den: u64) -> F {
    if den == 0 {
        0.0
    } else {
        num as F / den as F
    }
}

/// Confusion counts of `binarize(mean_w, threshold)` against the truth.
pub fn confusion(mean_w: &Mat, gt: &Array2<bool>, threshold: F) -> Result<Confusion> {
    let pred = binarize(mean_w, threshold);
    let d = check_square_pair(&pred, gt)?;
    let mut c = Confusion {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            match (pred[(i, j)], gt[(i, j)]) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
    }
    Ok(c)
}

/// Everything needed to assemble a [`MetricsReport`].
pub struct ReportInputs<'a> {
    /// Weighted posterior graph samples.
    pub w_samples: &'a [Mat],
    /// Ground-truth weighted adjacency.
    pub gt_w: &'a Mat,
    /// Model noise scale (mean over posterior samples).
    pub sigma_model: F,
    /// Ground-truth noise scale.
    pub sigma_gt: F,
    /// True latents, one row per data point.
    pub z_true: &'a Mat,
    /// Posterior-mean latents, same shape.
    pub z_pred: &'a Mat,
    /// Latent coordinate matching mode.
    pub matching: LatentMatching,
    /// Observations.
    pub x: &'a Mat,
    /// Decoded posterior-mean latents, same shape as `x`.
    pub x_hat: &'a Mat,
    /// Edge threshold.
    pub threshold: F,
}

/// Computes the full report from posterior samples and reconstructions.
pub fn assemble_report(inputs: &ReportInputs<'_>) -> Result<MetricsReport> {
    let gt_bin = binarize(inputs.gt_w, inputs.threshold);
    let samples_bin: Vec<Array2<bool>> = inputs
        .w_samples
        .iter()
        .map(|w| binarize(w, inputs.threshold))
        .collect();
    let mean_w = mean_graph(inputs.w_samples)?;
    let freq = edge_frequencies(&samples_bin)?;
    let abs_mean = mean_w.mapv(F::abs);
    let conf = confusion(&mean_w, &gt_bin, inputs.threshold)?;
    let obs_kl = match scm::observational_covariance(&mean_w.view(), inputs.sigma_model) {
        Ok(model_cov) => {
            let gt_cov = scm::observational_covariance(&inputs.gt_w.view(), inputs.sigma_gt)?;
            Some(scm::gaussian_kl(&model_cov.view(), &gt_cov.view())?)
        }
        Err(Error::CyclicGraph(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        e_shd: expected_shd(&samples_bin, &gt_bin)?,
        shd_c: expected_skeleton_shd(&samples_bin, &gt_bin)?,
        auroc: auroc(&freq, &gt_bin)?,
        auprc_g: average_precision(&freq, &gt_bin)?,
        auprc_w: average_precision(&abs_mean, &gt_bin)?,
        mcc: mcc(inputs.z_true, inputs.z_pred, inputs.matching)?,
        l_mse: edge_weight_mse(inputs.w_samples, inputs.gt_w)?,
        x_mse: Some(matrix_mse(inputs.x, inputs.x_hat)?),
        obs_kl,
        tp: conf.tp,
        fp: conf.fp,
        tn: conf.tn,
        fn_: conf.fn_,
        tpr: conf.tpr(),
        fpr: conf.fpr(),
        precision: conf.precision(),
        recall: conf.recall(),
        f1: conf.f1(),
    })
}

/// Metrics of the empty graph with zero weights and unit noise: the
/// reference row in every report. Constant edge scores make ranking metrics
/// take their chance values; latent and reconstruction estimates are absent
/// (the null model has no decoder) or zero by the zero-variance convention.
pub fn null_graph_baseline(gt_w: &Mat, sigma_gt: F, threshold: F) -> Result<MetricsReport> {
    let d = gt_w.nrows();
    let gt_bin = binarize(gt_w, threshold);
    let zero = Array2::from_elem((d, d), false);
    let zero_w: Mat = Array2::zeros((d, d));
    let scores: Mat = Array2::zeros((d, d));
    let conf = confusion(&zero_w, &gt_bin, threshold)?;
    let model_cov = scm::observational_covariance(&zero_w.view(), 1.0)?;
    let gt_cov = scm::observational_covariance(&gt_w.view(), sigma_gt)?;
    Ok(MetricsReport {
        e_shd: shd(&zero, &gt_bin)? as F,
        shd_c: skeleton_shd(&zero, &gt_bin)? as F,
        auroc: auroc(&scores, &gt_bin)?,
        auprc_g: average_precision(&scores, &gt_bin)?,
        auprc_w: average_precision(&scores, &gt_bin)?,
        mcc: 0.0,
        l_mse: edge_weight_mse(&[zero_w], gt_w)?,
        x_mse: None,
        obs_kl: Some(scm::gaussian_kl(&model_cov.view(), &gt_cov.view())?),
        tp: conf.tp,
        fp: conf.fp,
        tn: conf.tn,
        fn_: conf.fn_,
        tpr: conf.tpr(),
        fpr: conf.fpr(),
        precision: conf.precision(),
        recall: conf.recall(),
        f1: conf.f1(),
    })
}
