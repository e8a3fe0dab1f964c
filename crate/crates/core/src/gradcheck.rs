//! Central finite differences and a seeded gradient-check suite covering
//! every hand-derived gradient in the crate.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fact::{cot_kl, fact_loss, FactConfig, TeacherLogits};
use crate::linalg::Matrix;
use crate::losses::{
    augmented_logits_batch, ce_loss, dml_on_augmented_logits, isda_ce_loss, lifted_loss,
    total_objective, triplet_loss, TripletConfig,
};
use crate::model::ModelParams;
use crate::stats::CovarianceBank;

/// Step of the central difference.
pub const FD_STEP: f64 = 1e-5;

/// Instances whose hinge or ReLU argument lies within this distance of its
/// kink are skipped.
pub const KINK_GUARD: f64 = 1e-4;

/// Gradient-norm floor in [`rel_error`]; below it the error is absolute.
pub const REL_FLOOR: f64 = 1e-4;

/// `(f(x + h e_k) - f(x - h e_k)) / 2h` for every coordinate.
pub fn central_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + FD_STEP;
            let up = f(&probe);
            probe[k] = x[k] - FD_STEP;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Norm-wise relative error `‖a - b‖ / max(‖a‖, ‖b‖, REL_FLOOR)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    diff / norm(analytic).max(norm(numeric)).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CheckKind {
    CrossEntropy,
    IsdaCrossEntropy,
    Triplet,
    Lifted,
    CoTeacherKl,
    EndToEnd,
}

impl CheckKind {
    pub const ALL: [CheckKind; 6] = [
        CheckKind::CrossEntropy,
        CheckKind::IsdaCrossEntropy,
        CheckKind::Triplet,
        CheckKind::Lifted,
        CheckKind::CoTeacherKl,
        CheckKind::EndToEnd,
    ];

    /// Largest accepted relative error.
    pub fn tolerance(self) -> f64 {
        match self {
            CheckKind::EndToEnd => 1e-5,
            _ => 1e-6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CheckKind::CrossEntropy => "cross-entropy",
            CheckKind::IsdaCrossEntropy => "isda-cross-entropy",
            CheckKind::Triplet => "triplet",
            CheckKind::Lifted => "lifted",
            CheckKind::CoTeacherKl => "co-teacher-kl",
            CheckKind::EndToEnd => "end-to-end",
        }
    }
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRecord {
    pub kind: CheckKind,
    pub instance: usize,
    pub rel_error: f64,
}

impl CheckRecord {
    pub fn passed(&self) -> bool {
        self.rel_error < self.kind.tolerance()
    }
}

#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub records: Vec<CheckRecord>,
    /// Instances discarded by the kink guard, per kind.
    pub skipped: Vec<(CheckKind, usize)>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.records.iter().all(CheckRecord::passed)
    }

    pub fn count(&self, kind: CheckKind) -> usize {
        self.records.iter().filter(|r| r.kind == kind).count()
    }

    pub fn max_error(&self, kind: CheckKind) -> f64 {
        self.records
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| r.rel_error)
            .fold(0.0, f64::max)
    }
}

/// Runs `per_kind` checked instances of every gradient. Instance streams are
/// derived from `seed`, so the report is reproducible.
pub fn run_suite(seed: u64, per_kind: usize) -> Result<CheckReport> {
    let mut report = CheckReport::default();
    for (stream, kind) in CheckKind::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64);
        let mut skipped = 0;
        let mut instance = 0;
        while instance < per_kind {
            match check_one(kind, &mut rng)? {
                Some(e) => {
                    report.records.push(CheckRecord {
                        kind,
                        instance,
                        rel_error: e,
                    });
                    instance += 1;
                }
                None => skipped += 1,
            }
            if skipped > 100 * per_kind.max(1) {
                log::warn!("{kind}: kink guard rejected {skipped} instances");
                break;
            }
        }
        report.skipped.push((kind, skipped));
    }
    Ok(report)
}

fn check_one(kind: CheckKind, rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    match kind {
        CheckKind::CrossEntropy => check_ce(rng).map(Some),
        CheckKind::IsdaCrossEntropy => check_isda(rng).map(Some),
        CheckKind::Triplet => check_triplet(rng),
        CheckKind::Lifted => check_lifted(rng),
        CheckKind::CoTeacherKl => check_cot(rng).map(Some),
        CheckKind::EndToEnd => check_end_to_end(rng),
    }
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn uniform_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

/// Random PSD matrix `AᵀA` with entries of `A` in `(-scale, scale)`.
fn random_psd(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Matrix {
    let a = uniform_matrix(rng, d, d, scale);
    a.t_matmul(&a).expect("square product")
}

fn check_ce(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = rng.random_range(2..=8);
    let logits = uniform_vec(rng, c, 4.0);
    let y = rng.random_range(0..c);
    let (_, g) = ce_loss(&logits, y)?;
    let num = central_gradient(|x| ce_loss(x, y).map(|r| r.0).unwrap_or(f64::NAN), &logits);
    Ok(rel_error(&g, &num))
}

fn check_isda(rng: &mut ChaCha8Rng) -> Result<f64> {
    let d = rng.random_range(2..=8);
    let c = rng.random_range(2..=6);
    let f = uniform_vec(rng, d, 1.0);
    let w = uniform_matrix(rng, c, d, 1.0);
    let b = uniform_vec(rng, c, 0.5);
    let y = rng.random_range(0..c);
    let sigma = random_psd(rng, d, 0.5);
    let lambda = rng.random_range(0.0..2.0);
    let l = isda_ce_loss(&f, &w, &b, y, &sigma, lambda)?;
    let value = |f: &[f64], w: &Matrix, b: &[f64]| {
        isda_ce_loss(f, w, b, y, &sigma, lambda).map_or(f64::NAN, |l| l.value)
    };
    let mut analytic = l.grad_features.as_slice().to_vec();
    analytic.extend_from_slice(l.grad_w.as_slice());
    analytic.extend_from_slice(&l.grad_b);
    let mut numeric = central_gradient(|x| value(x, &w, &b), &f);
    numeric.extend(central_gradient(
        |x| value(&f, &Matrix::from_vec(c, d, x.to_vec()).expect("shape"), &b),
        w.as_slice(),
    ));
    numeric.extend(central_gradient(|x| value(&f, &w, x), &b));
    Ok(rel_error(&analytic, &numeric))
}

fn check_triplet(rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let d = rng.random_range(2..=8);
    let a = uniform_vec(rng, d, 1.0);
    let p = uniform_vec(rng, d, 1.0);
    let n = uniform_vec(rng, d, 1.0);
    let cfg = TripletConfig::new(rng.random_range(0.0..1.0))?;
    let (value, g) = triplet_loss(&a, &p, &n, cfg)?;
    if value <= KINK_GUARD {
        // Either inactive (zero gradient, nothing to check) or at the kink.
        return Ok(None);
    }
    let mut x = a.clone();
    x.extend(&p);
    x.extend(&n);
    let num = central_gradient(
        |x| {
            triplet_loss(&x[..d], &x[d..2 * d], &x[2 * d..], cfg).map_or(f64::NAN, |r| r.0)
        },
        &x,
    );
    let mut analytic = g.anchor;
    analytic.extend(g.positive);
    analytic.extend(g.negative);
    Ok(Some(rel_error(&analytic, &num)))
}

fn check_lifted(rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let n = rng.random_range(4..=10);
    let d = rng.random_range(2..=6);
    let classes = rng.random_range(2..=4);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let s = uniform_matrix(rng, n, d, 1.0);
    let margin = rng.random_range(0.5..2.0);
    let l = lifted_loss(&s, &labels, margin)?;
    if l.no_positive_pairs || l.min_abs_hinge < KINK_GUARD {
        return Ok(None);
    }
    let num = central_gradient(
        |x| {
            let m = Matrix::from_vec(n, d, x.to_vec()).expect("shape");
            lifted_loss(&m, &labels, margin).map_or(f64::NAN, |r| r.value)
        },
        s.as_slice(),
    );
    Ok(Some(rel_error(l.grad.as_slice(), &num)))
}

fn check_cot(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = rng.random_range(2..=8);
    let s = uniform_vec(rng, c, 3.0);
    let t = uniform_vec(rng, c, 3.0);
    let temp = rng.random_range(0.5..5.0);
    let (_, g) = cot_kl(&s, &t, temp)?;
    let num = central_gradient(|x| cot_kl(x, &t, temp).map_or(f64::NAN, |r| r.0), &s);
    Ok(rel_error(&g, &num))
}

/// Everything that is held fixed while the student parameters move.
struct EndToEnd {
    x: Matrix,
    x_aug: Matrix,
    labels: Vec<usize>,
    teacher_ori: Matrix,
    teacher_aug: Matrix,
    bank: CovarianceBank,
    lambda: f64,
    alpha: f64,
    margin: f64,
    cfg: FactConfig,
}

impl EndToEnd {
    fn objective(&self, p: &ModelParams) -> Result<(f64, ModelParams)> {
        let ori = p.forward(&self.x)?;
        let aug = p.forward(&self.x_aug)?;
        let teacher = TeacherLogits {
            ori: &self.teacher_ori,
            aug: &self.teacher_aug,
        };
        let parts = fact_loss(
            p,
            &ori,
            &aug,
            Some(teacher),
            &self.labels,
            &self.cfg,
            Some((&self.bank, self.lambda)),
        )?;
        let head = &p.dml_head;
        let dml = dml_on_augmented_logits(
            ori.features(),
            &head.weight,
            &head.bias,
            &self.labels,
            &self.bank,
            self.lambda,
            self.margin,
        )?;
        let obj = total_objective(&parts, &dml, self.alpha)?;
        let mut g = p.backward(&ori, &obj.ori)?;
        g.axpy(1.0, &p.backward(&aug, &obj.aug)?)?;
        Ok((obj.value, g))
    }

    /// Distance of the instance to the nearest ReLU or hinge kink.
    fn kink_distance(&self, p: &ModelParams) -> Result<f64> {
        let ori = p.forward(&self.x)?;
        let aug = p.forward(&self.x_aug)?;
        let relu = ori
            .pre
            .iter()
            .chain(&aug.pre)
            .flat_map(|m| m.as_slice())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let head = &p.dml_head;
        let s = augmented_logits_batch(
            ori.features(),
            &head.weight,
            &head.bias,
            &self.labels,
            &self.bank,
            self.lambda,
        )?;
        Ok(relu.min(lifted_loss(&s, &self.labels, self.margin)?.min_abs_hinge))
    }
}

fn check_end_to_end(rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let widths = [6, 5, 4];
    let classes = 3;
    let n = 8;
    let params = ModelParams::init(rng.random(), &widths, classes)?;
    let teacher = ModelParams::init(rng.random(), &widths, classes)?;
    let x = Matrix::from_fn(n, widths[0], |_, _| rng.random::<f64>());
    let x_aug = Matrix::from_fn(n, widths[0], |_, _| rng.random::<f64>());
    let covs = (0..classes).map(|_| random_psd(rng, widths[2], 0.5)).collect();
    let inst = EndToEnd {
        teacher_ori: teacher.predict_logits(&x)?,
        teacher_aug: teacher.predict_logits(&x_aug)?,
        x,
        x_aug,
        labels: (0..n).map(|i| i % classes).collect(),
        bank: CovarianceBank::from_matrices(covs)?,
        lambda: rng.random_range(0.1..2.0),
        alpha: rng.random_range(0.5..1.5),
        margin: 1.0,
        cfg: FactConfig::default(),
    };
    if inst.kink_distance(&params)? < KINK_GUARD {
        return Ok(None);
    }
    let (_, grad) = inst.objective(&params)?;
    let num = central_gradient(
        |v| {
            params
                .with_flat(v)
                .and_then(|q| inst.objective(&q))
                .map_or(f64::NAN, |r| r.0)
        },
        &params.to_flat(),
    );
    Ok(Some(rel_error(&grad.to_flat(), &num)))
}
