//! Audit of the sandwich bound between feature distances and logit
//! distances.
//!
//! For features `F` (`d x N`, samples as columns) with thin SVD `F = UΣVᵀ`
//! and bias-free logits `s = Wf`, every pair of columns satisfies
//!
//! `‖s_i - s_j‖² - 4c²r ≤ ‖f_i - f_j‖² ≤ ‖s_i - s_j‖² + 4c²r`
//!
//! where `r = ‖UUᵀ - WᵀW‖₂` and `c` bounds the feature norms.

use std::io::Write;

use crate::error::{Error, Result};
use crate::linalg::{norm2, spectral_norm, sq_dist, thin_svd, Matrix};
use crate::par;

/// Absolute slack allowed on either side of the bound.
pub const BOUND_TOL: f64 = 1e-9;

/// Singular directions with `σ ≤ RANK_TOL · σ_max` are dropped.
pub const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub pair: (usize, usize),
    pub feat_dist_sq: f64,
    pub logit_dist_sq: f64,
    pub residual: f64,
    pub c: f64,
    pub lower: f64,
    pub upper: f64,
    pub satisfied: bool,
}

impl BoundReport {
    /// Distance from the feature distance to the nearer bound; negative when
    /// the bound is violated.
    pub fn slack(&self) -> f64 {
        (self.feat_dist_sq - self.lower).min(self.upper - self.feat_dist_sq)
    }
}

/// Orthonormal basis of the column space of `features_by_column` (`d x N`).
pub fn column_basis(features_by_column: &Matrix) -> Result<Matrix> {
    if features_by_column.cols() == 0 {
        return Err(Error::invalid("need at least one feature column"));
    }
    let svd = thin_svd(features_by_column)?;
    let smax = svd.sigma.first().copied().unwrap_or(0.0);
    let rank = svd.sigma.iter().filter(|&&s| s > RANK_TOL * smax).count();
    let d = features_by_column.rows();
    Ok(Matrix::from_fn(d, rank, |i, k| svd.u[(i, k)]))
}

/// `UUᵀ - WᵀW` (`d x d`).
pub fn residual_matrix(features_by_column: &Matrix, w: &Matrix) -> Result<Matrix> {
    if w.cols() != features_by_column.rows() {
        return Err(Error::invalid(format!(
            "W has {} columns but features have dimension {}",
            w.cols(),
            features_by_column.rows()
        )));
    }
    let u = column_basis(features_by_column)?;
    u.matmul_t(&u)?.sub(&w.t_matmul(w)?)
}

/// `‖UUᵀ - WᵀW‖₂`.
pub fn residual(features_by_column: &Matrix, w: &Matrix) -> Result<f64> {
    spectral_norm(&residual_matrix(features_by_column, w)?)
}

/// Checks the bound for one pair. Logits are `W f` without bias.
pub fn audit_pair(
    pair: (usize, usize),
    f_i: &[f64],
    f_j: &[f64],
    w: &Matrix,
    residual: f64,
    c: f64,
) -> Result<BoundReport> {
    if f_i.len() != w.cols() || f_j.len() != w.cols() {
        return Err(Error::invalid("feature dimension does not match W"));
    }
    let limit = c * (1.0 + 1e-12);
    if norm2(f_i) > limit || norm2(f_j) > limit {
        return Err(Error::invalid(format!("feature norm exceeds c = {c}")));
    }
    let feat_dist_sq = sq_dist(f_i, f_j);
    let logit_dist_sq = sq_dist(&w.matvec(f_i)?, &w.matvec(f_j)?);
    let width = 4.0 * c * c * residual;
    let lower = logit_dist_sq - width;
    let upper = logit_dist_sq + width;
    Ok(BoundReport {
        pair,
        feat_dist_sq,
        logit_dist_sq,
        residual,
        c,
        lower,
        upper,
        satisfied: lower - BOUND_TOL <= feat_dist_sq && feat_dist_sq <= upper + BOUND_TOL,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditSummary {
    pub pairs: usize,
    pub fraction_satisfied: f64,
    pub mean_slack: f64,
    pub residual: f64,
    pub c: f64,
}

/// Reports for all `n(n-1)/2` pairs of rows of `features` (`n x d`), with
/// `c` the largest row norm. Reports are ordered by `(i, j)`.
pub fn audit_pairs(features: &Matrix, w: &Matrix) -> Result<Vec<BoundReport>> {
    let n = features.rows();
    if n < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let r = residual(&features.transpose(), w)?;
    let c = (0..n).map(|i| norm2(features.row(i))).fold(0.0, f64::max);
    let rows = par::map_range(n - 1, |i| {
        ((i + 1)..n)
            .map(|j| audit_pair((i, j), features.row(i), features.row(j), w, r, c))
            .collect::<Result<Vec<_>>>()
    });
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

pub fn summarize(reports: &[BoundReport]) -> AuditSummary {
    let n = reports.len().max(1) as f64;
    let first = reports.first();
    AuditSummary {
        pairs: reports.len(),
        fraction_satisfied: reports.iter().filter(|r| r.satisfied).count() as f64 / n,
        mean_slack: reports.iter().map(BoundReport::slack).sum::<f64>() / n,
        residual: first.map_or(0.0, |r| r.residual),
        c: first.map_or(0.0, |r| r.c),
    }
}

pub fn audit_dataset(features: &Matrix, w: &Matrix) -> Result<AuditSummary> {
    Ok(summarize(&audit_pairs(features, w)?))
}

/// CSV with columns `pair,feat_dist_sq,logit_dist_sq,lower,upper,satisfied`.
pub fn write_csv(reports: &[BoundReport], mut out: impl Write) -> Result<()> {
    writeln!(out, "pair,feat_dist_sq,logit_dist_sq,lower,upper,satisfied")?;
    for r in reports {
        writeln!(
            out,
            "{}-{},{:e},{:e},{:e},{:e},{}",
            r.pair.0, r.pair.1, r.feat_dist_sq, r.logit_dist_sq, r.lower, r.upper, r.satisfied
        )?;
    }
    Ok(())
}
