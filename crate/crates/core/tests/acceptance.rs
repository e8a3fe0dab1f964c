//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use isdml::augment::jensen_sweep;
use isdml::bound_audit::{audit_pairs, summarize, BOUND_TOL};
use isdml::config::TrainConfig;
use isdml::data::{generate, lodo_split, GenSpec};
use isdml::fact::{amplitude_mix_unclipped, amplitude_spectrum, Image, ImageShape};
use isdml::gradcheck::{run_suite, CheckKind};
use isdml::linalg::thin_svd;
use isdml::stats::ClassStats;
use isdml::trainer::{ablation_summary, extract_features, train, Variant};
use isdml::{par, Matrix, Result};

struct Outcome {
    passed: bool,
    detail: String,
}

fn report(id: usize, name: &str, elapsed: Duration, outcome: Result<Outcome>) -> bool {
    let (passed, detail) = match outcome {
        Ok(o) => (o.passed, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!(
        "{} [{id}] {name}: {detail} ({:.1}s)",
        if passed { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    passed
}

fn gradients() -> Result<Outcome> {
    let start = Instant::now();
    let report = run_suite(20_240_601, 100)?;
    let secs = start.elapsed().as_secs_f64();
    let mut parts = Vec::new();
    let mut ok = secs < 60.0;
    for kind in CheckKind::ALL {
        let n = report.count(kind);
        let max = report.max_error(kind);
        ok &= n >= 100 && max < kind.tolerance();
        parts.push(format!("{} n={n} max={max:.2e}<{:.0e}", kind.name(), kind.tolerance()));
    }
    ok &= report.all_passed();
    Ok(Outcome {
        passed: ok,
        detail: format!("{}; skipped kinks={}; runtime<60s", parts.join(", "), report.skipped.len()),
    })
}

fn jensen() -> Result<Outcome> {
    let start = Instant::now();
    let cases = jensen_sweep(7, 200, 10_000, None)?;
    let violations = cases.iter().filter(|c| !c.holds(3.0)).count();
    let worst = cases
        .iter()
        .map(|c| (c.estimate.mean - c.closed_form) / c.estimate.std_err.max(f64::MIN_POSITIVE))
        .fold(f64::NEG_INFINITY, f64::max);
    let exact = jensen_sweep(8, 200, 10, Some(0.0))?;
    let max_gap = exact
        .iter()
        .map(|c| (c.closed_form - c.plain_ce).abs().max((c.estimate.mean - c.plain_ce).abs()))
        .fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    Ok(Outcome {
        passed: violations == 0 && max_gap < 1e-12 && secs < 120.0,
        detail: format!(
            "{violations}/200 below mc-3se (worst z={worst:.2}); lambda=0 max gap {max_gap:.1e}<1e-12; runtime<120s"
        ),
    })
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

fn sandwich() -> Result<Outcome> {
    let start = Instant::now();
    let mut total_pairs = 0usize;
    let mut bad = 0usize;
    for i in 0..10_000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        rng.set_stream(i);
        let d = rng.random_range(1..=10);
        let c = rng.random_range(2..=10);
        let n = rng.random_range(2..=8);
        let scale = [0.1, 1.0, 5.0][rng.random_range(0..3)];
        let f = random_matrix(&mut rng, n, d, scale);
        let w = random_matrix(&mut rng, c, d, 1.0);
        let reports = audit_pairs(&f, &w)?;
        total_pairs += reports.len();
        bad += reports.iter().filter(|r| !r.satisfied).count();
    }
    let random_frac = 1.0 - bad as f64 / total_pairs as f64;

    let data = generate(&GenSpec::default())?;
    let split = lodo_split(&data, 0)?;
    let mut cfg = TrainConfig::default();
    cfg.epochs = 5;
    let (params, _) = train(&split, &cfg)?;
    let feats = extract_features(&params, data.images())?;
    let trained = summarize(&audit_pairs(&feats, &params.dml_head.weight)?);

    // Ideal case: orthonormal rows spanning the feature subspace.
    let mut worst_gap: f64 = 0.0;
    for i in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        rng.set_stream(i);
        let d = rng.random_range(2..=10);
        let k = rng.random_range(1..=d);
        let n = rng.random_range(2..=12);
        let basis = thin_svd(&random_matrix(&mut rng, d, k, 1.0))?.u; // d x k
        let coeff = random_matrix(&mut rng, n, k, 2.0);
        let f = coeff.matmul_t(&basis)?; // n x d, rows in span(U)
        let w = basis.transpose();
        for r in audit_pairs(&f, &w)? {
            worst_gap = worst_gap.max((r.feat_dist_sq - r.logit_dist_sq).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Outcome {
        passed: random_frac == 1.0
            && trained.fraction_satisfied == 1.0
            && worst_gap < 1e-9
            && secs < 120.0,
        detail: format!(
            "random fraction={random_frac} over {total_pairs} pairs; checkpoint fraction={} over {} pairs (r={:.3}); ideal max gap {worst_gap:.1e}<1e-9; tol {BOUND_TOL:e}; runtime<120s",
            trained.fraction_satisfied, trained.pairs, trained.residual
        ),
    })
}

fn covariance() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for t in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        rng.set_stream(t);
        let d = rng.random_range(1..=12);
        let n = rng.random_range(2..=200);
        let shift = rng.random_range(-50.0..50.0);
        let x = Matrix::from_fn(n, d, |_, _| shift + rng.random_range(-3.0..3.0));

        let mut stats = ClassStats::new(0, d);
        let mut start = 0;
        while start < n {
            let len = rng.random_range(1..=n - start);
            let idx: Vec<usize> = (start..start + len).collect();
            stats.update(&x.select_rows(&idx))?;
            start += len;
        }

        let mean: Vec<f64> = (0..d)
            .map(|j| (0..n).map(|i| x[(i, j)]).sum::<f64>() / n as f64)
            .collect();
        for a in 0..d {
            worst = worst.max((stats.mean()[a] - mean[a]).abs());
            for b in 0..d {
                let cov = (0..n)
                    .map(|i| (x[(i, a)] - mean[a]) * (x[(i, b)] - mean[b]))
                    .sum::<f64>()
                    / n as f64;
                worst = worst.max((stats.cov()[(a, b)] - cov).abs());
            }
        }
    }
    Ok(Outcome {
        passed: worst < 1e-10,
        detail: format!("1000 chunkings, max abs diff {worst:.1e}<1e-10"),
    })
}

fn fourier() -> Result<Outcome> {
    let mut round_trip: f64 = 0.0;
    let mut convex: f64 = 0.0;
    for t in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        rng.set_stream(t);
        let shape = ImageShape::new(rng.random_range(4..=32), rng.random_range(4..=32), rng.random_range(1..=3))?;
        let x1 = Image::from_fn(shape, |_, _, _| rng.random::<f64>())?;
        let x2 = Image::from_fn(shape, |_, _, _| rng.random::<f64>())?;

        let same = amplitude_mix_unclipped(&x1, &x2, 0.0)?;
        for (a, b) in same.pixels.iter().zip(&x1.pixels) {
            round_trip = round_trip.max((a - b).abs());
        }

        let eta = rng.random_range(0.0..=1.0);
        let mixed = amplitude_mix_unclipped(&x1, &x2, eta)?;
        let (a1, a2, am) = (amplitude_spectrum(&x1), amplitude_spectrum(&x2), amplitude_spectrum(&mixed));
        for c in 0..shape.channels {
            for k in 0..a1[c].len() {
                let want = (1.0 - eta) * a1[c][k] + eta * a2[c][k];
                convex = convex.max((am[c][k] - want).abs());
            }
        }
    }
    Ok(Outcome {
        passed: round_trip < 1e-6 && convex < 1e-6,
        detail: format!("eta=0 max pixel error {round_trip:.1e}<1e-6; spectrum convexity max error {convex:.1e}<1e-6"),
    })
}

fn efficacy() -> Result<Outcome> {
    let start = Instant::now();
    let data = generate(&GenSpec::default())?;
    let variants = [Variant::Baseline, Variant::DmlFeatures, Variant::DmlLogits, Variant::Full];
    let summary = ablation_summary(&data, &TrainConfig::default(), &variants, &[0, 1, 2, 3, 4], &[0, 1, 2, 3])?;
    let acc = |v| summary.mean_target_acc(v).unwrap_or(f64::NAN);
    let (base, feats, logits, full) = (
        acc(Variant::Baseline),
        acc(Variant::DmlFeatures),
        acc(Variant::DmlLogits),
        acc(Variant::Full),
    );
    let secs = start.elapsed().as_secs_f64();
    Ok(Outcome {
        passed: full >= base && logits >= feats - 0.01 && secs < 1800.0,
        detail: format!(
            "mean target acc baseline={base:.4} dml(features)={feats:.4} dml(logits)={logits:.4} full={full:.4}; need full>=baseline and logits>=features-0.01; runtime<1800s"
        ),
    })
}

fn determinism() -> Result<Outcome> {
    let data = generate(&GenSpec {
        per_class_per_domain: 30,
        ..GenSpec::default()
    })?;
    let split = lodo_split(&data, 2)?;
    let mut cfg = TrainConfig::default();
    cfg.epochs = 3;
    cfg.seed = 11;
    let (p1, l1) = train(&split, &cfg)?;
    let (p2, l2) = train(&split, &cfg)?;
    let (p3, l3) = par::sequential(|| train(&split, &cfg))?;
    let logs = l1.to_csv() == l2.to_csv() && l1.to_csv() == l3.to_csv();
    let ckpts = p1.to_bytes() == p2.to_bytes() && p1.to_bytes() == p3.to_bytes();
    let data_again = generate(&GenSpec {
        per_class_per_domain: 30,
        ..GenSpec::default()
    })?;
    let datasets = data.to_bytes() == data_again.to_bytes();
    Ok(Outcome {
        passed: logs && ckpts && datasets,
        detail: format!(
            "metrics logs identical={logs}, checkpoints identical={ckpts}, generated data identical={datasets} (two runs plus a sequential run)"
        ),
    })
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Result<Outcome>); 7] = [
        ("gradient correctness", gradients),
        ("jensen bound", jensen),
        ("distance sandwich", sandwich),
        ("covariance oracle", covariance),
        ("fourier augmentation", fourier),
        ("directional efficacy", efficacy),
        ("determinism", determinism),
    ];
    let mut all = true;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        all &= report(k + 1, name, start.elapsed(), outcome);
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
