//! Loss functions with analytic gradients.
//!
//! Everything here is differentiated by hand. Each public loss returns the
//! gradient with respect to its direct inputs (features, logits, head
//! parameters); the model's backward pass carries those into the network.

use crate::augment::{check_covariance, check_lambda, quadratic_terms};
use crate::error::{Error, Result};
use crate::fact::FactLossParts;
use crate::linalg::{lse_unchecked, softmax_unchecked, sq_dist, Matrix};
use crate::model::{Dense, Upstream};
use crate::par;
use crate::stats::CovarianceBank;

/// Floor applied to squared distances before differentiating the square root.
pub const DIST_FLOOR_SQ: f64 = 1e-12;

/// A loss value with gradients with respect to a feature batch and a head.
///
/// `grad_w`/`grad_b` are empty (0x0 / length 0) for losses that do not
/// depend on any head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad_features: Matrix,
    pub grad_w: Matrix,
    pub grad_b: Vec<f64>,
}

impl LossValue {
    pub fn zero(n: usize, d: usize, classes: usize) -> Self {
        LossValue {
            value: 0.0,
            grad_features: Matrix::zeros(n, d),
            grad_w: Matrix::zeros(classes, d),
            grad_b: vec![0.0; classes],
        }
    }

    pub fn touches_head(&self) -> bool {
        !self.grad_b.is_empty()
    }
}

/// Softmax cross-entropy `-log softmax(logits)[y]` and its gradient
/// `softmax - onehot(y)`.
pub fn ce_loss(logits: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    if y >= logits.len() {
        return Err(Error::invalid(format!(
            "label {y} out of range for {} classes",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite logits"));
    }
    let value = lse_unchecked(logits) - logits[y];
    let mut grad = softmax_unchecked(logits);
    grad[y] -= 1.0;
    Ok((value.max(0.0), grad))
}

/// Mean cross-entropy over the rows of `logits`, with the gradient of the
/// mean with respect to every logit.
pub fn ce_batch(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(Error::invalid("logits and labels differ in length"));
    }
    let n = labels.len();
    if n == 0 {
        return Ok((0.0, Matrix::zeros(0, logits.cols())));
    }
    let mut grad = Matrix::zeros(n, logits.cols());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let (l, g) = ce_loss(logits.row(i), y)?;
        total += l;
        grad.row_mut(i)
            .iter_mut()
            .zip(&g)
            .for_each(|(o, gi)| *o = gi / n as f64);
    }
    Ok((total / n as f64, grad))
}

/// Where the per-class covariance for an anchor label comes from.
#[derive(Clone, Copy)]
enum CovSource<'a> {
    Bank(&'a CovarianceBank),
    Single(usize, &'a Matrix),
}

impl<'a> CovSource<'a> {
    fn get(&self, class: usize) -> Result<&'a Matrix> {
        match *self {
            CovSource::Bank(b) => b.lookup(class),
            CovSource::Single(c, m) if c == class => Ok(m),
            CovSource::Single(..) => Err(Error::invalid("covariance requested for another class")),
        }
    }
}

fn check_batch_head(features: &Matrix, w: &Matrix, b: &[f64], labels: &[usize]) -> Result<()> {
    if features.rows() != labels.len() {
        return Err(Error::invalid("features and labels differ in length"));
    }
    if w.cols() != features.cols() || w.rows() != b.len() {
        return Err(Error::invalid(format!(
            "head W {}x{} / b {} incompatible with features of width {}",
            w.rows(),
            w.cols(),
            b.len(),
            features.cols()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= w.rows()) {
        return Err(Error::invalid(format!("label {y} out of range")));
    }
    Ok(())
}

/// Per-class quadratic terms for each class that occurs in `labels`.
fn class_terms(
    w: &Matrix,
    labels: &[usize],
    covs: CovSource<'_>,
) -> Result<Vec<Option<(Vec<f64>, Matrix)>>> {
    let c = w.rows();
    let mut out = vec![None; c];
    for &y in labels {
        if out[y].is_none() {
            let sigma = covs.get(y)?;
            check_covariance(sigma, w.cols())?;
            out[y] = Some(quadratic_terms(w, sigma, y));
        }
    }
    Ok(out)
}

/// Row-wise augmented logits `S_ij = w_jᵀf_i + b_j + λ/2 v_jyᵀ Σ_y v_jy`
/// (no shift at `j = y_i`).
fn augmented_batch(
    features: &Matrix,
    w: &Matrix,
    b: &[f64],
    labels: &[usize],
    terms: &[Option<(Vec<f64>, Matrix)>],
    lambda: f64,
) -> Matrix {
    let mut s = features.matmul_t(w).expect("shapes checked");
    for (i, &y) in labels.iter().enumerate() {
        let row = s.row_mut(i);
        row.iter_mut().zip(b).for_each(|(v, bj)| *v += bj);
        if lambda > 0.0 {
            let (half_q, _) = terms[y].as_ref().expect("terms cover all labels");
            for (j, v) in row.iter_mut().enumerate() {
                if j != y {
                    *v += lambda * half_q[j];
                }
            }
        }
    }
    s
}

/// Pulls a gradient `g = ∂L/∂S` on augmented logits back to the features
/// and the head parameters, including the dependence of the λ-term on `W`.
fn backprop_augmented(
    features: &Matrix,
    w: &Matrix,
    labels: &[usize],
    terms: &[Option<(Vec<f64>, Matrix)>],
    lambda: f64,
    g: &Matrix,
) -> (Matrix, Matrix, Vec<f64>) {
    let grad_f = g.matmul(w).expect("shapes checked");
    let mut grad_w = g.t_matmul(features).expect("shapes checked");
    let c = w.rows();
    let mut grad_b = vec![0.0; c];
    for i in 0..g.rows() {
        grad_b.iter_mut().zip(g.row(i)).for_each(|(o, v)| *o += v);
    }
    if lambda > 0.0 {
        // d/dw_j [λ/2 vᵀΣv] = λ Σ v_jy and d/dw_y = -λ Σ v_jy.
        let mut per_class = vec![vec![0.0; c]; c];
        for (i, &y) in labels.iter().enumerate() {
            per_class[y].iter_mut().zip(g.row(i)).for_each(|(o, v)| *o += v);
        }
        for (y, coeffs) in per_class.iter().enumerate() {
            let Some((_, sigma_v)) = terms[y].as_ref() else {
                continue;
            };
            for j in 0..c {
                if j == y || coeffs[j] == 0.0 {
                    continue;
                }
                let k = lambda * coeffs[j];
                let sv = sigma_v.row(j);
                grad_w.row_mut(j).iter_mut().zip(sv).for_each(|(o, s)| *o += k * s);
                grad_w.row_mut(y).iter_mut().zip(sv).for_each(|(o, s)| *o -= k * s);
            }
        }
    }
    (grad_f, grad_w, grad_b)
}

fn isda_ce_impl(
    features: &Matrix,
    w: &Matrix,
    b: &[f64],
    labels: &[usize],
    covs: CovSource<'_>,
    lambda: f64,
) -> Result<LossValue> {
    check_lambda(lambda)?;
    check_batch_head(features, w, b, labels)?;
    let terms = if lambda > 0.0 {
        class_terms(w, labels, covs)?
    } else {
        vec![None; w.rows()]
    };
    let s = augmented_batch(features, w, b, labels, &terms, lambda);
    let (value, g) = ce_batch(&s, labels)?;
    let (grad_features, grad_w, grad_b) = backprop_augmented(features, w, labels, &terms, lambda, &g);
    Ok(LossValue {
        value,
        grad_features,
        grad_w,
        grad_b,
    })
}

/// Cross-entropy on ISDA-augmented logits for a single sample.
///
/// The result is the closed-form upper bound on the expected cross-entropy
/// under `f ~ N(f, λΣ_y)`; `grad_features` is `1 x d`.
pub fn isda_ce_loss(
    f: &[f64],
    w: &Matrix,
    b: &[f64],
    y: usize,
    sigma_y: &Matrix,
    lambda: f64,
) -> Result<LossValue> {
    let features = Matrix::from_vec(1, f.len(), f.to_vec())?;
    isda_ce_impl(&features, w, b, &[y], CovSource::Single(y, sigma_y), lambda)
}

/// Batch-mean ISDA cross-entropy with per-class covariances from `bank`.
pub fn isda_ce_batch(
    features: &Matrix,
    w: &Matrix,
    b: &[f64],
    labels: &[usize],
    bank: &CovarianceBank,
    lambda: f64,
) -> Result<LossValue> {
    isda_ce_impl(features, w, b, labels, CovSource::Bank(bank), lambda)
}

/// Batch of ISDA-augmented logits, one row per sample.
pub fn augmented_logits_batch(
    features: &Matrix,
    w: &Matrix,
    b: &[f64],
    labels: &[usize],
    bank: &CovarianceBank,
    lambda: f64,
) -> Result<Matrix> {
    check_lambda(lambda)?;
    check_batch_head(features, w, b, labels)?;
    let terms = if lambda > 0.0 {
        class_terms(w, labels, CovSource::Bank(bank))?
    } else {
        vec![None; w.rows()]
    };
    Ok(augmented_batch(features, w, b, labels, &terms, lambda))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletConfig {
    pub delta: f64,
}

impl TripletConfig {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::invalid(format!("triplet margin must be >= 0, got {delta}")));
        }
        Ok(TripletConfig { delta })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletGrads {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// Hinge triplet loss `[‖f_i-f_j‖² - ‖f_i-f_k‖² + δ]₊` with subgradient 0 at
/// the kink.
pub fn triplet_loss(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    cfg: TripletConfig,
) -> Result<(f64, TripletGrads)> {
    let d = anchor.len();
    if positive.len() != d || negative.len() != d {
        return Err(Error::invalid("triplet members differ in dimension"));
    }
    let arg = sq_dist(anchor, positive) - sq_dist(anchor, negative) + cfg.delta;
    if arg <= 0.0 {
        let z = vec![0.0; d];
        return Ok((
            0.0,
            TripletGrads {
                anchor: z.clone(),
                positive: z.clone(),
                negative: z,
            },
        ));
    }
    let grads = TripletGrads {
        anchor: (0..d).map(|k| 2.0 * (negative[k] - positive[k])).collect(),
        positive: (0..d).map(|k| -2.0 * (anchor[k] - positive[k])).collect(),
        negative: (0..d).map(|k| 2.0 * (anchor[k] - negative[k])).collect(),
    };
    Ok((arg, grads))
}

/// All same-label index pairs `(i, j)`, `i < j`, of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<(usize, usize)>,
    pub labels: Vec<usize>,
    pub margin: f64,
}

impl PairSet {
    pub fn from_labels(labels: &[usize], margin: f64) -> Self {
        let n = labels.len();
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if labels[i] == labels[j] {
                    pairs.push((i, j));
                }
            }
        }
        PairSet {
            pairs,
            labels: labels.to_vec(),
            margin,
        }
    }
}

/// Lifted structure loss value and its gradient with respect to the
/// embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedLoss {
    pub value: f64,
    pub grad: Matrix,
    /// Positive pairs that entered the average.
    pub pairs_used: usize,
    /// Positive pairs dropped because their class has no in-batch negative.
    pub pairs_skipped: usize,
    /// Set when the batch has no usable positive pair; value and grad are zero.
    pub no_positive_pairs: bool,
    /// Smallest `|J_ij|` before the hinge over the used pairs (distance to
    /// the kink); infinite when no pair is used.
    pub min_abs_hinge: f64,
}

/// Lifted structure loss over all positive pairs of a batch:
///
/// `J_ij = [d_ij + log Σ_k exp(m - d_ik) + log Σ_l exp(m - d_jl)]₊`,
/// `L = Σ J_ij² / (2|P|)`, with unsquared Euclidean distances `d`.
pub fn lifted_loss(s: &Matrix, labels: &[usize], margin: f64) -> Result<LiftedLoss> {
    let n = s.rows();
    if labels.len() != n {
        return Err(Error::invalid("embeddings and labels differ in length"));
    }
    if !margin.is_finite() {
        return Err(Error::invalid("margin must be finite"));
    }
    if !s.is_finite() {
        return Err(Error::numerical("non-finite embeddings"));
    }
    let pairs = PairSet::from_labels(labels, margin);

    let dist: Vec<Vec<f64>> = par::map_range(n, |a| {
        (0..n).map(|b| sq_dist(s.row(a), s.row(b)).sqrt()).collect()
    });

    // Log-sum-exp over each anchor's negatives and the matching softmax.
    let negatives: Vec<Option<(f64, Vec<(usize, f64)>)>> = par::map_range(n, |a| {
        let idx: Vec<usize> = (0..n).filter(|&k| labels[k] != labels[a]).collect();
        if idx.is_empty() {
            return None;
        }
        let args: Vec<f64> = idx.iter().map(|&k| margin - dist[a][k]).collect();
        let lse = lse_unchecked(&args);
        let probs = softmax_unchecked(&args);
        Some((lse, idx.into_iter().zip(probs).collect()))
    });

    let mut used = Vec::new();
    let mut skipped = 0;
    for &(i, j) in &pairs.pairs {
        match (&negatives[i], &negatives[j]) {
            (Some((li, _)), Some((lj, _))) => used.push((i, j, dist[i][j] + li + lj)),
            _ => skipped += 1,
        }
    }
    if used.is_empty() {
        log::warn!("lifted loss: no positive pair with negatives in batch of {n}");
        return Ok(LiftedLoss {
            value: 0.0,
            grad: Matrix::zeros(n, s.cols()),
            pairs_used: 0,
            pairs_skipped: skipped,
            no_positive_pairs: true,
            min_abs_hinge: f64::INFINITY,
        });
    }
    let p = used.len() as f64;
    let min_abs_hinge = used.iter().map(|u| u.2.abs()).fold(f64::INFINITY, f64::min);

    // ∂L/∂d_ab, indexed by (a, b); each entry is pushed back through d_ab.
    let mut d_dist = vec![vec![0.0; n]; n];
    let mut value = 0.0;
    for &(i, j, jij) in &used {
        if jij <= 0.0 {
            continue;
        }
        value += jij * jij;
        let coef = jij / p;
        d_dist[i][j] += coef;
        for &(a, _) in &[(i, j), (j, i)] {
            let (_, probs) = negatives[a].as_ref().expect("used pairs have negatives");
            for &(k, pk) in probs {
                d_dist[a][k] -= coef * pk;
            }
        }
    }
    value /= 2.0 * p;

    let d = s.cols();
    let mut grad = Matrix::zeros(n, d);
    for a in 0..n {
        for b in 0..n {
            let c = d_dist[a][b];
            if c == 0.0 {
                continue;
            }
            let sq = dist[a][b] * dist[a][b];
            let k = c / sq.max(DIST_FLOOR_SQ).sqrt();
            for t in 0..d {
                let diff = k * (s[(a, t)] - s[(b, t)]);
                grad[(a, t)] += diff;
                grad[(b, t)] -= diff;
            }
        }
    }
    Ok(LiftedLoss {
        value,
        grad,
        pairs_used: used.len(),
        pairs_skipped: skipped,
        no_positive_pairs: false,
        min_abs_hinge,
    })
}

/// Lifted structure loss on ISDA-augmented logits of the metric head.
pub fn dml_on_augmented_logits(
    features: &Matrix,
    w: &Matrix,
    b: &[f64],
    labels: &[usize],
    bank: &CovarianceBank,
    lambda: f64,
    margin: f64,
) -> Result<LossValue> {
    check_lambda(lambda)?;
    check_batch_head(features, w, b, labels)?;
    let terms = if lambda > 0.0 {
        class_terms(w, labels, CovSource::Bank(bank))?
    } else {
        vec![None; w.rows()]
    };
    let s = augmented_batch(features, w, b, labels, &terms, lambda);
    let lifted = lifted_loss(&s, labels, margin)?;
    let (grad_features, grad_w, grad_b) =
        backprop_augmented(features, w, labels, &terms, lambda, &lifted.grad);
    Ok(LossValue {
        value: lifted.value,
        grad_features,
        grad_w,
        grad_b,
    })
}

/// Lifted structure loss directly on deep features (the ablation variant).
pub fn dml_on_features(features: &Matrix, labels: &[usize], margin: f64) -> Result<LossValue> {
    let lifted = lifted_loss(features, labels, margin)?;
    Ok(LossValue {
        value: lifted.value,
        grad_features: lifted.grad,
        grad_w: Matrix::zeros(0, 0),
        grad_b: Vec::new(),
    })
}

/// Composite objective `L_FACT + α L_DML` and the upstream gradients for the
/// original and augmented forward passes.
#[derive(Debug, Clone)]
pub struct Objective {
    pub value: f64,
    pub fact: f64,
    pub dml: f64,
    pub ori: Upstream,
    pub aug: Upstream,
}

/// The metric loss is computed on the original view only, so its gradients
/// go into the `ori` upstream.
pub fn total_objective(fact: &FactLossParts, dml: &LossValue, alpha: f64) -> Result<Objective> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("alpha must be >= 0, got {alpha}")));
    }
    let mut ori = fact.ori.clone();
    if alpha > 0.0 {
        if dml.grad_features.shape() != ori.features.shape() {
            return Err(Error::invalid("metric loss gradient does not match the batch"));
        }
        ori.features.axpy(alpha, &dml.grad_features);
        if dml.touches_head() {
            let head = Dense {
                weight: dml.grad_w.clone(),
                bias: dml.grad_b.clone(),
            };
            if head.weight.shape() != ori.dml_head.weight.shape() {
                return Err(Error::invalid("metric loss head gradient has the wrong shape"));
            }
            ori.dml_head.axpy(alpha, &head);
        }
    }
    Ok(Objective {
        value: fact.total + alpha * dml.value,
        fact: fact.total,
        dml: dml.value,
        ori,
        aug: fact.aug.clone(),
    })
}
