//! Semantic augmentation in feature space.
//!
//! Translating a feature `f` of class `y` by Gaussian noise `N(0, λΣ_y)`
//! shifts every logit difference `s_j - s_y` by a Gaussian with variance
//! `λ v_jyᵀ Σ_y v_jy`, where `v_jy = w_j - w_y`. Taking the expectation of
//! the softmax denominator in closed form yields augmented logits
//! `s_j + (λ/2) v_jyᵀ Σ_y v_jy` for `j != y`, which upper-bound the expected
//! cross-entropy over infinitely many augmented copies.
//!
//! [`sample_features`] and [`mc_ce_estimate`] draw the copies explicitly and
//! serve as the Monte-Carlo oracle for that bound.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_psd, dot, Matrix};
use crate::losses::{ce_loss, isda_ce_loss};
use crate::par;

/// Relative ridge added to `Σ` before factorising it for sampling.
pub const SAMPLER_RIDGE: f64 = 1e-6;

/// ISDA-perturbed logit vector for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedLogits {
    pub values: Vec<f64>,
    pub anchor_class: usize,
    pub lambda: f64,
}

fn check_head(f: &[f64], w: &Matrix, b: &[f64]) -> Result<()> {
    if w.cols() != f.len() || w.rows() != b.len() {
        return Err(Error::invalid(format!(
            "head shapes disagree: W {}x{}, b {}, f {}",
            w.rows(),
            w.cols(),
            b.len(),
            f.len()
        )));
    }
    Ok(())
}

/// `s_j = w_jᵀ f + b_j`.
pub fn plain_logits(f: &[f64], w: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    check_head(f, w, b)?;
    Ok((0..w.rows()).map(|j| dot(w.row(j), f) + b[j]).collect())
}

pub(crate) fn check_covariance(sigma: &Matrix, dim: usize) -> Result<()> {
    if sigma.rows() != dim || sigma.cols() != dim {
        return Err(Error::invalid(format!(
            "covariance is {}x{}, expected {dim}x{dim}",
            sigma.rows(),
            sigma.cols()
        )));
    }
    if !sigma.is_finite() {
        return Err(Error::numerical("covariance contains non-finite values"));
    }
    let tol = 1e-10 * sigma.max_abs().max(1.0);
    if sigma.asymmetry() > tol {
        return Err(Error::invalid("covariance is not symmetric"));
    }
    Ok(())
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(())
}

/// Half quadratic forms `q_j = ½ v_jyᵀ Σ v_jy` together with `Σ v_jy`,
/// for every class `j` (both are zero at `j = y`).
pub(crate) fn quadratic_terms(w: &Matrix, sigma: &Matrix, y: usize) -> (Vec<f64>, Matrix) {
    let (c, d) = w.shape();
    let mut half_q = vec![0.0; c];
    let mut sigma_v = Matrix::zeros(c, d);
    let wy = w.row(y);
    let mut v = vec![0.0; d];
    for j in 0..c {
        if j == y {
            continue;
        }
        v.iter_mut()
            .zip(w.row(j).iter().zip(wy))
            .for_each(|(vi, (a, b))| *vi = a - b);
        let sv = sigma_v.row_mut(j);
        for (r, out) in sv.iter_mut().enumerate() {
            *out = dot(sigma.row(r), &v);
        }
        half_q[j] = 0.5 * dot(&v, sigma_v.row(j));
    }
    (half_q, sigma_v)
}

pub fn augmented_logits(
    f: &[f64],
    w: &Matrix,
    b: &[f64],
    sigma_y: &Matrix,
    y: usize,
    lambda: f64,
) -> Result<AugmentedLogits> {
    check_head(f, w, b)?;
    check_lambda(lambda)?;
    check_covariance(sigma_y, f.len())?;
    if y >= w.rows() {
        return Err(Error::invalid(format!("label {y} out of range")));
    }
    let mut values = plain_logits(f, w, b)?;
    if lambda > 0.0 {
        let (half_q, _) = quadratic_terms(w, sigma_y, y);
        for (j, v) in values.iter_mut().enumerate() {
            if j != y {
                *v += lambda * half_q[j];
            }
        }
    }
    Ok(AugmentedLogits {
        values,
        anchor_class: y,
        lambda,
    })
}

/// Draws `m` rows from `N(f, λ(Σ + ρI))` with `ρ = 1e-6 · mean(diag Σ)`.
///
/// Row `i` consumes `d` consecutive standard normals from a ChaCha8 stream
/// seeded with `seed`, so the output is a pure function of the arguments.
pub fn sample_features(
    f: &[f64],
    sigma_y: &Matrix,
    lambda: f64,
    m: usize,
    seed: u64,
) -> Result<Matrix> {
    let d = f.len();
    check_lambda(lambda)?;
    check_covariance(sigma_y, d)?;
    if m == 0 {
        return Err(Error::invalid("sample count must be >= 1"));
    }
    let ridge = if d == 0 {
        0.0
    } else {
        SAMPLER_RIDGE * sigma_y.trace() / d as f64
    };
    let mut ridged = sigma_y.clone();
    for i in 0..d {
        ridged[(i, i)] += ridge;
    }
    let chol = cholesky_psd(&ridged)?;
    let scale = lambda.sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Matrix::zeros(m, d);
    let mut z = vec![0.0; d];
    for i in 0..m {
        z.iter_mut().for_each(|zi| *zi = StandardNormal.sample(&mut rng));
        let row = out.row_mut(i);
        for r in 0..d {
            let lz: f64 = chol.row(r)[..=r].iter().zip(&z).map(|(l, zk)| l * zk).sum();
            row[r] = f[r] + scale * lz;
        }
    }
    Ok(out)
}

/// Monte-Carlo estimate of the expected cross-entropy under explicit
/// augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    /// Sample standard deviation divided by `√m` (zero when `m = 1`).
    pub std_err: f64,
    pub samples: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn mc_ce_estimate(
    f: &[f64],
    w: &Matrix,
    b: &[f64],
    sigma_y: &Matrix,
    y: usize,
    lambda: f64,
    m: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_head(f, w, b)?;
    if y >= w.rows() {
        return Err(Error::invalid(format!("label {y} out of range")));
    }
    let draws = sample_features(f, sigma_y, lambda, m, seed)?;
    let losses: Vec<Result<f64>> = par::map_range(m, |i| {
        let logits = plain_logits(draws.row(i), w, b)?;
        Ok(ce_loss(&logits, y)?.0)
    });
    // Welford in index order: deterministic, and exact when all draws agree.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (k, l) in losses.into_iter().enumerate() {
        let l = l?;
        let delta = l - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (l - mean);
    }
    let std_err = if m > 1 {
        (m2 / (m - 1) as f64).sqrt() / (m as f64).sqrt()
    } else {
        0.0
    };
    Ok(McEstimate {
        mean,
        std_err,
        samples: m,
    })
}

/// One comparison of the closed-form bound with a Monte-Carlo estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct JensenCase {
    pub dim: usize,
    pub classes: usize,
    pub lambda: f64,
    pub closed_form: f64,
    pub plain_ce: f64,
    pub estimate: McEstimate,
}

impl JensenCase {
    /// `closed_form ≥ mean - k · std_err`.
    pub fn holds(&self, k: f64) -> bool {
        self.closed_form >= self.estimate.mean - k * self.estimate.std_err
    }
}

/// Random instances with `d ≤ 16`, `C ≤ 8` and `λ ~ U[0, 2]` (or the given
/// fixed `λ`), each estimated with `m` draws. Instance `i` is built from
/// stream `i` of a ChaCha8 generator seeded with `seed`.
pub fn jensen_sweep(
    seed: u64,
    instances: usize,
    m: usize,
    lambda: Option<f64>,
) -> Result<Vec<JensenCase>> {
    (0..instances)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let d = rng.random_range(1..=16);
            let c = rng.random_range(2..=8);
            let f: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w = Matrix::from_fn(c, d, |_, _| rng.random_range(-1.0..1.0));
            let b: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
            let a = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0) / (d as f64).sqrt());
            let sigma = a.matmul_t(&a)?;
            let y = rng.random_range(0..c);
            let lam = lambda.unwrap_or_else(|| rng.random_range(0.0..=2.0));
            let closed_form = isda_ce_loss(&f, &w, &b, y, &sigma, lam)?.value;
            let plain_ce = ce_loss(&plain_logits(&f, &w, &b)?, y)?.0;
            let estimate = mc_ce_estimate(&f, &w, &b, &sigma, y, lam, m, rng.random())?;
            Ok(JensenCase {
                dim: d,
                classes: c,
                lambda: lam,
                closed_form,
                plain_ce,
                estimate,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::isda_ce_loss;
    use rand::Rng;

    fn random_instance(rng: &mut ChaCha8Rng, d: usize, c: usize) -> (Vec<f64>, Matrix, Vec<f64>, Matrix) {
        let f: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Matrix::from_fn(c, d, |_, _| rng.random_range(-1.0..1.0));
        let b: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        let a = Matrix::from_fn(d, d, |_, _| rng.random_range(-0.5..0.5));
        let sigma = a.matmul_t(&a).unwrap();
        (f, w, b, sigma)
    }

    #[test]
    fn plain_logits_cases() {
        let w = Matrix::identity(2);
        assert_eq!(plain_logits(&[1.0, 2.0], &w, &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(plain_logits(&[0.0, 0.0], &w, &[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
        assert!(plain_logits(&[1.0], &w, &[0.0, 0.0]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (f, w, b, _) = random_instance(&mut rng, 6, 4);
        let got = plain_logits(&f, &w, &b).unwrap();
        for j in 0..4 {
            let mut s = b[j];
            for k in 0..6 {
                s += w[(j, k)] * f[k];
            }
            assert!((got[j] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_case() {
        let w = Matrix::identity(2);
        let out = augmented_logits(&[1.0, 0.0], &w, &[0.0, 0.0], &Matrix::identity(2), 0, 2.0)
            .unwrap();
        assert_eq!(out.values, vec![1.0, 2.0]);
        assert_eq!(out.anchor_class, 0);
    }

    #[test]
    fn reductions_to_plain_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (f, w, b, sigma) = random_instance(&mut rng, 5, 4);
        let plain = plain_logits(&f, &w, &b).unwrap();
        assert_eq!(augmented_logits(&f, &w, &b, &sigma, 1, 0.0).unwrap().values, plain);
        assert_eq!(
            augmented_logits(&f, &w, &b, &Matrix::zeros(5, 5), 1, 3.0).unwrap().values,
            plain
        );
    }

    #[test]
    fn validation_errors() {
        let w = Matrix::identity(2);
        let sigma = Matrix::identity(2);
        assert!(augmented_logits(&[1.0, 0.0], &w, &[0.0; 2], &sigma, 0, -1.0).is_err());
        let asym = Matrix::from_rows(&[[1.0, 0.5], [0.0, 1.0]]).unwrap();
        assert!(augmented_logits(&[1.0, 0.0], &w, &[0.0; 2], &asym, 0, 1.0).is_err());
        assert!(augmented_logits(&[1.0, 0.0], &w, &[0.0; 2], &sigma, 2, 1.0).is_err());
    }

    #[test]
    fn degenerate_sampler() {
        let f = [0.3, -0.7];
        let s = sample_features(&f, &Matrix::identity(2), 0.0, 5, 1).unwrap();
        for i in 0..5 {
            assert_eq!(s.row(i), &f);
        }
        let s = sample_features(&f, &Matrix::zeros(2, 2), 1.0, 3, 1).unwrap();
        for i in 0..3 {
            assert_eq!(s.row(i), &f);
        }
        assert!(sample_features(&f, &Matrix::identity(2), 1.0, 0, 1).is_err());
        let not_psd = Matrix::diag(&[1.0, -1.0]);
        assert!(matches!(
            sample_features(&f, &not_psd, 1.0, 3, 1),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn sampler_moments() {
        let f = [0.5, -1.0];
        let s = sample_features(&f, &Matrix::identity(2), 1.0, 100_000, 42).unwrap();
        let n = s.rows() as f64;
        let mean: Vec<f64> = (0..2).map(|j| s.column(j).iter().sum::<f64>() / n).collect();
        for j in 0..2 {
            assert!((mean[j] - f[j]).abs() < 0.02);
        }
        let cov = Matrix::from_fn(2, 2, |a, b| {
            (0..s.rows())
                .map(|i| (s[(i, a)] - mean[a]) * (s[(i, b)] - mean[b]))
                .sum::<f64>()
                / n
        });
        assert!(cov.sub(&Matrix::identity(2)).unwrap().frobenius_norm() < 0.05);
    }

    #[test]
    fn sampler_is_deterministic() {
        let sigma = Matrix::from_rows(&[[2.0, 0.3], [0.3, 1.0]]).unwrap();
        let a = sample_features(&[0.0, 1.0], &sigma, 0.7, 50, 9).unwrap();
        let b = sample_features(&[0.0, 1.0], &sigma, 0.7, 50, 9).unwrap();
        assert_eq!(a, b);
        let c = sample_features(&[0.0, 1.0], &sigma, 0.7, 50, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mc_without_augmentation_is_plain_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (f, w, b, sigma) = random_instance(&mut rng, 4, 3);
        let est = mc_ce_estimate(&f, &w, &b, &sigma, 2, 0.0, 257, 1).unwrap();
        let exact = ce_loss(&plain_logits(&f, &w, &b).unwrap(), 2).unwrap().0;
        assert_eq!(est.mean, exact);
        assert_eq!(est.std_err, 0.0);
    }

    #[test]
    fn mc_single_sample_matches_manual() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (f, w, b, sigma) = random_instance(&mut rng, 4, 3);
        let est = mc_ce_estimate(&f, &w, &b, &sigma, 1, 0.8, 1, 77).unwrap();
        let draw = sample_features(&f, &sigma, 0.8, 1, 77).unwrap();
        let manual = ce_loss(&plain_logits(draw.row(0), &w, &b).unwrap(), 1).unwrap().0;
        assert!((est.mean - manual).abs() < 1e-12);
    }

    #[test]
    fn closed_form_bounds_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (f, w, b, sigma) = random_instance(&mut rng, 5, 4);
        let bound = isda_ce_loss(&f, &w, &b, 0, &sigma, 0.5).unwrap().value;
        let est = mc_ce_estimate(&f, &w, &b, &sigma, 0, 0.5, 10_000, 3).unwrap();
        assert!(bound >= est.mean - 3.0 * est.std_err, "{bound} vs {est:?}");
    }

    #[test]
    fn sequential_and_parallel_estimates_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (f, w, b, sigma) = random_instance(&mut rng, 6, 5);
        let a = mc_ce_estimate(&f, &w, &b, &sigma, 3, 1.3, 2000, 5).unwrap();
        let s = par::sequential(|| mc_ce_estimate(&f, &w, &b, &sigma, 3, 1.3, 2000, 5).unwrap());
        assert_eq!(a, s);
    }

    proptest::proptest! {
        #[test]
        fn monotone_in_lambda_and_anchor_fixed(
            seed in 0u64..10_000,
            l1 in 0.0f64..3.0,
            dl in 0.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = rng.random_range(1..6);
            let c = rng.random_range(2..6);
            let (f, w, b, sigma) = random_instance(&mut rng, d, c);
            let y = rng.random_range(0..c);
            let lo = augmented_logits(&f, &w, &b, &sigma, y, l1).unwrap();
            let hi = augmented_logits(&f, &w, &b, &sigma, y, l1 + dl).unwrap();
            let plain = plain_logits(&f, &w, &b).unwrap();
            proptest::prop_assert_eq!(lo.values[y], plain[y]);
            proptest::prop_assert_eq!(hi.values[y], plain[y]);
            for j in 0..c {
                proptest::prop_assert!(hi.values[j] >= lo.values[j]);
                proptest::prop_assert!(lo.values[j] >= plain[j]);
            }
        }
    }

    #[test]
    fn jensen_sweep_small() {
        let cases = jensen_sweep(4, 10, 2000, None).unwrap();
        assert_eq!(cases.len(), 10);
        assert!(cases.iter().all(|c| c.holds(3.0) && c.closed_form >= c.plain_ce - 1e-15));
        for c in jensen_sweep(5, 5, 10, Some(0.0)).unwrap() {
            assert!((c.closed_form - c.plain_ce).abs() < 1e-12);
            assert_eq!(c.estimate.mean, c.plain_ce);
        }
    }
}
