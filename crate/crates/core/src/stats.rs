//! Streaming per-class feature statistics.
//!
//! Each [`ClassStats`] keeps the exact population mean and covariance of
//! every feature vector it has seen. Batches are folded in with the
//! pairwise merge formula for means and scatter matrices, so any chunking
//! of the same samples gives the same result up to rounding.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    class_id: usize,
    count: u64,
    mean: Vec<f64>,
    /// Population covariance (divides by `count`).
    cov: Matrix,
}

impl ClassStats {
    pub fn new(class_id: usize, dim: usize) -> Self {
        ClassStats {
            class_id,
            count: 0,
            mean: vec![0.0; dim],
            cov: Matrix::zeros(dim, dim),
        }
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix {
        &self.cov
    }

    /// Folds every row of `batch` into the statistics.
    pub fn update(&mut self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.dim() {
            return Err(Error::invalid(format!(
                "class {}: batch has {} columns, statistics have dimension {}",
                self.class_id,
                batch.cols(),
                self.dim()
            )));
        }
        self.update_rows((0..batch.rows()).map(|i| batch.row(i)))
    }

    /// Same as [`update`](Self::update) for an arbitrary set of rows.
    pub fn update_rows<'a, I>(&mut self, rows: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a [f64]>,
        I::IntoIter: Clone,
    {
        let rows = rows.into_iter();
        let d = self.dim();
        let mut nb = 0u64;
        let mut mean_b = vec![0.0; d];
        for r in rows.clone() {
            if r.len() != d {
                return Err(Error::invalid("row dimension mismatch"));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical("non-finite feature"));
            }
            nb += 1;
            mean_b.iter_mut().zip(r).for_each(|(m, x)| *m += x);
        }
        if nb == 0 {
            return Ok(());
        }
        mean_b.iter_mut().for_each(|m| *m /= nb as f64);

        // Scatter of the new batch around its own mean (upper triangle).
        let mut scatter_b = Matrix::zeros(d, d);
        let mut centered = vec![0.0; d];
        for r in rows {
            centered
                .iter_mut()
                .zip(r.iter().zip(&mean_b))
                .for_each(|(c, (x, m))| *c = x - m);
            for i in 0..d {
                let ci = centered[i];
                if ci == 0.0 {
                    continue;
                }
                let row = scatter_b.row_mut(i);
                for j in i..d {
                    row[j] += ci * centered[j];
                }
            }
        }

        let na = self.count as f64;
        let nbf = nb as f64;
        let n = na + nbf;
        let delta: Vec<f64> = mean_b.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        let cross = na * nbf / n;
        let mut cov = Matrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let scatter =
                    na * self.cov[(i, j)] + scatter_b[(i, j)] + cross * delta[i] * delta[j];
                let v = scatter / n;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl * nbf / n;
        }
        self.cov = cov;
        self.count += nb;
        Ok(())
    }

    /// `cov + ridge * I`.
    pub fn covariance(&self, ridge: f64) -> Result<Matrix> {
        if !(ridge >= 0.0) || !ridge.is_finite() {
            return Err(Error::invalid(format!("ridge must be >= 0, got {ridge}")));
        }
        let mut c = self.cov.clone();
        for i in 0..c.rows() {
            c[(i, i)] += ridge;
        }
        Ok(c)
    }
}

/// Immutable per-class covariance snapshot, indexed by class id.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceBank {
    covs: Vec<Matrix>,
}

impl CovarianceBank {
    /// A bank of all-zero covariances.
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        CovarianceBank {
            covs: vec![Matrix::zeros(dim, dim); num_classes],
        }
    }

    pub fn from_matrices(covs: Vec<Matrix>) -> Result<Self> {
        let d = covs.first().map_or(0, |c| c.rows());
        if covs.iter().any(|c| c.rows() != d || c.cols() != d) {
            return Err(Error::invalid("covariance bank entries must be d x d"));
        }
        Ok(CovarianceBank { covs })
    }

    pub fn num_classes(&self) -> usize {
        self.covs.len()
    }

    pub fn dim(&self) -> usize {
        self.covs.first().map_or(0, |c| c.rows())
    }

    pub fn lookup(&self, class: usize) -> Result<&Matrix> {
        self.covs.get(class).ok_or_else(|| {
            Error::invalid(format!(
                "class {class} not in covariance bank of {} classes",
                self.covs.len()
            ))
        })
    }
}

/// Freezes the covariances of `per_class`, which must hold exactly one
/// entry for every class id in `0..per_class.len()`.
pub fn snapshot_all(per_class: &[ClassStats]) -> Result<CovarianceBank> {
    let c = per_class.len();
    let mut slots: Vec<Option<Matrix>> = vec![None; c];
    for s in per_class {
        let slot = slots.get_mut(s.class_id).ok_or_else(|| {
            Error::invalid(format!("class id {} out of range for {c} classes", s.class_id))
        })?;
        if slot.is_some() {
            return Err(Error::invalid(format!("duplicate class id {}", s.class_id)));
        }
        *slot = Some(s.cov.clone());
    }
    let covs = slots
        .into_iter()
        .enumerate()
        .map(|(i, m)| m.ok_or_else(|| Error::invalid(format!("missing class {i}"))))
        .collect::<Result<Vec<_>>>()?;
    CovarianceBank::from_matrices(covs)
}

/// One [`ClassStats`] per class, updated from labelled feature batches.
#[derive(Debug, Clone)]
pub struct ClassStatsTable {
    stats: Vec<ClassStats>,
}

impl ClassStatsTable {
    pub fn new(num_classes: usize, dim: usize) -> Self {
        ClassStatsTable {
            stats: (0..num_classes).map(|c| ClassStats::new(c, dim)).collect(),
        }
    }

    pub fn classes(&self) -> &[ClassStats] {
        &self.stats
    }

    pub fn update(&mut self, features: &Matrix, labels: &[usize]) -> Result<()> {
        if features.rows() != labels.len() {
            return Err(Error::invalid("features and labels differ in length"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.stats.len()) {
            return Err(Error::invalid(format!("label {bad} out of range")));
        }
        for (c, s) in self.stats.iter_mut().enumerate() {
            let rows: Vec<&[f64]> = labels
                .iter()
                .enumerate()
                .filter(|(_, &y)| y == c)
                .map(|(i, _)| features.row(i))
                .collect();
            s.update_rows(rows.iter().copied())?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> CovarianceBank {
        snapshot_all(&self.stats).expect("table holds one entry per class")
    }
}
