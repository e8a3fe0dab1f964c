//! Fourier amplitude-mix augmentation, the EMA co-teacher and the composite
//! co-teacher loss.
//!
//! Images are stored channel-planar: channel `c`, row `y`, column `x` lives at
//! `pixels[(c * height + y) * width + x]`. A batch of images is a matrix with
//! one flattened image per row in the same layout.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::linalg::{lse_unchecked, softmax_unchecked, Matrix};
use crate::losses::{ce_batch, isda_ce_batch};
use crate::model::{Dense, ForwardTrace, ModelParams, Upstream};
use crate::par;
use crate::stats::CovarianceBank;

/// Spectral magnitudes at or below this fraction of the largest magnitude in
/// a plane are treated as zero, and their phase as 0.
const PHASE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        Ok(ImageShape {
            height,
            width,
            channels,
        })
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.plane_len() * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(shape: ImageShape, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != shape.len() {
            return Err(Error::invalid(format!(
                "expected {} pixels, got {}",
                shape.len(),
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("non-finite pixel"));
        }
        Ok(Image {
            height: shape.height,
            width: shape.width,
            channels: shape.channels,
            pixels,
        })
    }

    pub fn from_fn(shape: ImageShape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    pixels.push(f(c, y, x));
                }
            }
        }
        Self::new(shape, pixels)
    }

    pub fn shape(&self) -> ImageShape {
        ImageShape {
            height: self.height,
            width: self.width,
            channels: self.channels,
        }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.pixels[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }
}

/// Forward and inverse 2-D DFT plans for one plane size.
struct Fft2 {
    h: usize,
    w: usize,
    row: Arc<dyn Fft<f64>>,
    col: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            h,
            w,
            row: planner.plan_fft_forward(w),
            col: planner.plan_fft_forward(h),
            row_inv: planner.plan_fft_inverse(w),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    fn run(&self, buf: &mut [Complex64], scratch: &mut Vec<Complex64>, inverse: bool) {
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row, &self.col)
        };
        row.process(buf);
        scratch.resize(buf.len(), Complex64::new(0.0, 0.0));
        transpose_into(buf, self.h, self.w, scratch);
        col.process(scratch);
        transpose_into(scratch, self.w, self.h, buf);
        if inverse {
            let s = 1.0 / (self.h * self.w) as f64;
            buf.iter_mut().for_each(|v| *v *= s);
        }
    }

    fn forward_real(&self, plane: &[f64], scratch: &mut Vec<Complex64>) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.run(&mut buf, scratch, false);
        buf
    }

    /// Mixed-amplitude, x1-phase inverse transform of one plane.
    fn mix_plane(&self, p1: &[f64], p2: &[f64], eta: f64, out: &mut Vec<f64>) {
        let mut scratch = Vec::with_capacity(p1.len());
        let mut a = self.forward_real(p1, &mut scratch);
        let b = self.forward_real(p2, &mut scratch);
        let norm = |z: &Complex64| z.norm_sqr().sqrt();
        let floor = PHASE_FLOOR * a.iter().map(norm).fold(1.0, f64::max);
        for (za, zb) in a.iter_mut().zip(&b) {
            let mag = norm(za);
            let amp = (1.0 - eta) * mag + eta * norm(zb);
            // Same as amp·e^{i·arg(za)}, without the trigonometry.
            *za = if mag > floor {
                *za * (amp / mag)
            } else {
                Complex64::new(amp, 0.0)
            };
        }
        self.run(&mut a, &mut scratch, true);
        out.extend(a.iter().map(|z| z.re));
    }
}

/// Writes the transpose of the `rows x cols` matrix `src` into `dst`.
fn transpose_into<T: Copy>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    for (r, row) in src.chunks_exact(cols).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            dst[c * rows + r] = v;
        }
    }
}

/// Unnormalized 2-D DFT of every channel, row-major `h x w` per channel.
pub fn spectrum(img: &Image) -> Vec<Vec<Complex64>> {
    let fft = Fft2::new(img.height, img.width);
    let mut scratch = Vec::new();
    (0..img.channels).map(|c| fft.forward_real(img.plane(c), &mut scratch)).collect()
}

/// Per-channel amplitude spectrum `|X|`.
pub fn amplitude_spectrum(img: &Image) -> Vec<Vec<f64>> {
    spectrum(img)
        .into_iter()
        .map(|ch| ch.iter().map(|z| z.norm()).collect())
        .collect()
}

/// Mixed-amplitude, x1-phase inverse transform before clipping.
///
/// Pixels are the real part of the inverse DFT; they may fall outside
/// `[0, 1]`.
pub fn amplitude_mix_unclipped(x1: &Image, x2: &Image, eta: f64) -> Result<Image> {
    if x1.shape() != x2.shape() {
        return Err(Error::invalid(format!(
            "cannot mix {:?} with {:?}",
            x1.shape(),
            x2.shape()
        )));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid(format!("eta must lie in [0, 1], got {eta}")));
    }
    mix_with(&Fft2::new(x1.height, x1.width), x1, x2, eta)
}

fn mix_with(fft: &Fft2, x1: &Image, x2: &Image, eta: f64) -> Result<Image> {
    let mut pixels = Vec::with_capacity(x1.pixels.len());
    for c in 0..x1.channels {
        fft.mix_plane(x1.plane(c), x2.plane(c), eta, &mut pixels);
    }
    Image::new(x1.shape(), pixels)
}

/// Fourier amplitude mix: amplitude `(1-η)|X1| + η|X2|` with the phase of
/// `X1`, per channel, clipped back to `[0, 1]`.
pub fn amplitude_mix(x1: &Image, x2: &Image, eta: f64) -> Result<Image> {
    let mut out = amplitude_mix_unclipped(x1, x2, eta)?;
    out.pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    Ok(out)
}

/// Builds the augmented twin of every row of `batch`.
///
/// Each sample draws its partner uniformly from the samples of other domains
/// in the batch (itself when there are none) and `η ~ U[0, eta_max]`. Sample
/// `i` uses stream `i` of a ChaCha8 generator seeded with `seed`, so the
/// result does not depend on scheduling.
pub fn augment_batch(
    batch: &Matrix,
    shape: ImageShape,
    domains: &[usize],
    eta_max: f64,
    seed: u64,
) -> Result<Matrix> {
    if batch.cols() != shape.len() {
        return Err(Error::invalid(format!(
            "batch rows have {} values, image shape needs {}",
            batch.cols(),
            shape.len()
        )));
    }
    if domains.len() != batch.rows() {
        return Err(Error::invalid("batch and domain ids differ in length"));
    }
    if !(0.0..=1.0).contains(&eta_max) {
        return Err(Error::invalid(format!("eta_max must lie in [0, 1], got {eta_max}")));
    }
    if eta_max == 0.0 {
        return Ok(batch.clone());
    }
    let n = batch.rows();
    let fft = Fft2::new(shape.height, shape.width);
    let rows = par::map_range(n, |i| -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let others: Vec<usize> = (0..n).filter(|&j| domains[j] != domains[i]).collect();
        let partner = if others.is_empty() {
            i
        } else {
            others[rng.random_range(0..others.len())]
        };
        let eta = rng.random_range(0.0..=eta_max);
        let x1 = Image::new(shape, batch.row(i).to_vec())?;
        let x2 = Image::new(shape, batch.row(partner).to_vec())?;
        let mut pixels = mix_with(&fft, &x1, &x2, eta)?.pixels;
        pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
        Ok(pixels)
    });
    let mut out = Vec::with_capacity(n * shape.len());
    for r in rows {
        out.extend(r?);
    }
    Matrix::from_vec(n, shape.len(), out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactConfig {
    pub beta: f64,
    pub eta_max: f64,
    pub teacher_momentum: f64,
    pub temperature: f64,
}

impl Default for FactConfig {
    fn default() -> Self {
        FactConfig {
            beta: 2.0,
            eta_max: 1.0,
            teacher_momentum: 0.999,
            temperature: 4.0,
        }
    }
}

impl FactConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.eta_max) {
            return Err(Error::invalid(format!("eta_max must lie in [0, 1], got {}", self.eta_max)));
        }
        if !(0.0..1.0).contains(&self.teacher_momentum) {
            return Err(Error::invalid(format!(
                "teacher momentum must lie in [0, 1), got {}",
                self.teacher_momentum
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Exponential moving average of the student's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub params: ModelParams,
    pub momentum: f64,
}

impl TeacherState {
    pub fn new(params: ModelParams, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1], got {momentum}")));
        }
        Ok(TeacherState { params, momentum })
    }

    /// `θ_tea ← m θ_tea + (1 - m) θ_stu`.
    pub fn ema_update(&mut self, student: &ModelParams) -> Result<()> {
        if !self.params.same_shape(student) {
            return Err(Error::invalid("teacher and student shapes differ"));
        }
        let m = self.momentum;
        for (t, s) in self.params.tensors_mut().into_iter().zip(student.tensors()) {
            t.iter_mut().zip(s).for_each(|(a, b)| *a = m * *a + (1.0 - m) * b);
        }
        Ok(())
    }
}

/// `T² KL(softmax(teacher/T) ‖ softmax(student/T))` and its gradient with
/// respect to the student logits, `T (p - q)`.
pub fn cot_kl(student: &[f64], teacher: &[f64], temperature: f64) -> Result<(f64, Vec<f64>)> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(Error::invalid("student and teacher logits differ in length"));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!("temperature must be > 0, got {temperature}")));
    }
    if student.iter().chain(teacher).any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite logits"));
    }
    let zs: Vec<f64> = student.iter().map(|v| v / temperature).collect();
    let zt: Vec<f64> = teacher.iter().map(|v| v / temperature).collect();
    let (ls, lt) = (lse_unchecked(&zs), lse_unchecked(&zt));
    let q = softmax_unchecked(&zt);
    let p = softmax_unchecked(&zs);
    let kl: f64 = q
        .iter()
        .zip(zt.iter().zip(&zs))
        .filter(|(qk, _)| **qk > 0.0)
        .map(|(qk, (t, s))| qk * ((t - lt) - (s - ls)))
        .sum();
    let t2 = temperature * temperature;
    let grad = p.iter().zip(&q).map(|(pk, qk)| temperature * (pk - qk)).collect();
    Ok(((t2 * kl).max(0.0), grad))
}

/// Mean `cot_kl` over rows and the gradient of the mean.
fn cot_batch(student: &Matrix, teacher: &Matrix, temperature: f64) -> Result<(f64, Matrix)> {
    if student.shape() != teacher.shape() {
        return Err(Error::invalid("student and teacher batches differ in shape"));
    }
    let n = student.rows();
    let mut grad = Matrix::zeros(n, student.cols());
    let mut total = 0.0;
    for i in 0..n {
        let (v, g) = cot_kl(student.row(i), teacher.row(i), temperature)?;
        total += v;
        grad.row_mut(i)
            .iter_mut()
            .zip(&g)
            .for_each(|(o, gi)| *o = gi / n as f64);
    }
    Ok((total / n.max(1) as f64, grad))
}

/// Components of the co-teacher objective and the student upstream
/// gradients for the original and augmented forward passes.
#[derive(Debug, Clone)]
pub struct FactLossParts {
    pub cls_ori: f64,
    pub cls_aug: f64,
    pub cot_a2o: f64,
    pub cot_o2a: f64,
    pub total: f64,
    pub ori: Upstream,
    pub aug: Upstream,
}

/// Teacher classifier logits on both views.
#[derive(Debug, Clone, Copy)]
pub struct TeacherLogits<'a> {
    pub ori: &'a Matrix,
    pub aug: &'a Matrix,
}

/// `cls_ori + cls_aug + β (cot_a2o + cot_o2a)`.
///
/// `a2o` compares the student on the original view with the teacher on the
/// augmented view, `o2a` the other way round. With `isda = Some((bank, λ))`
/// and `λ > 0` both classification terms use the augmented-logit
/// cross-entropy of the classifier head. `teacher` may be `None` only when
/// `β = 0`.
pub fn fact_loss(
    params: &ModelParams,
    ori: &ForwardTrace,
    aug: &ForwardTrace,
    teacher: Option<TeacherLogits<'_>>,
    labels: &[usize],
    cfg: &FactConfig,
    isda: Option<(&CovarianceBank, f64)>,
) -> Result<FactLossParts> {
    let n = labels.len();
    if ori.batch_size() != n || aug.batch_size() != n {
        return Err(Error::invalid("original and augmented batches differ in size"));
    }
    let mut up_ori = Upstream::for_params(n, params);
    let mut up_aug = Upstream::for_params(n, params);
    let cls_ori = class_term(params, ori, labels, isda, &mut up_ori)?;
    let cls_aug = class_term(params, aug, labels, isda, &mut up_aug)?;

    let (mut cot_a2o, mut cot_o2a) = (0.0, 0.0);
    if cfg.beta > 0.0 {
        let t = teacher.ok_or_else(|| Error::invalid("co-teacher term needs teacher logits"))?;
        let (a2o, g_ori) = cot_batch(&ori.class_logits, t.aug, cfg.temperature)?;
        let (o2a, g_aug) = cot_batch(&aug.class_logits, t.ori, cfg.temperature)?;
        up_ori.class_logits.axpy(cfg.beta, &g_ori);
        up_aug.class_logits.axpy(cfg.beta, &g_aug);
        cot_a2o = a2o;
        cot_o2a = o2a;
    }
    Ok(FactLossParts {
        cls_ori,
        cls_aug,
        cot_a2o,
        cot_o2a,
        total: cls_ori + cls_aug + cfg.beta * (cot_a2o + cot_o2a),
        ori: up_ori,
        aug: up_aug,
    })
}

fn class_term(
    params: &ModelParams,
    trace: &ForwardTrace,
    labels: &[usize],
    isda: Option<(&CovarianceBank, f64)>,
    up: &mut Upstream,
) -> Result<f64> {
    match isda {
        Some((bank, lambda)) if lambda > 0.0 => {
            let head = &params.classifier;
            let l = isda_ce_batch(trace.features(), &head.weight, &head.bias, labels, bank, lambda)?;
            up.features.axpy(1.0, &l.grad_features);
            up.classifier.axpy(
                1.0,
                &Dense {
                    weight: l.grad_w,
                    bias: l.grad_b,
                },
            );
            Ok(l.value)
        }
        _ => {
            let (v, g) = ce_batch(&trace.class_logits, labels)?;
            up.class_logits.axpy(1.0, &g);
            Ok(v)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_gradient, rel_error};
    use std::f64::consts::PI;

    fn shape(h: usize, w: usize, c: usize) -> ImageShape {
        ImageShape::new(h, w, c).unwrap()
    }

    fn random_image(seed: u64, s: ImageShape) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(s, |_, _, _| rng.random::<f64>()).unwrap()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn eta_zero_is_identity() {
        for (seed, s) in [(1, shape(8, 8, 1)), (2, shape(5, 7, 3)), (3, shape(32, 32, 1))] {
            let a = random_image(seed, s);
            let b = random_image(seed + 10, s);
            let m = amplitude_mix(&a, &b, 0.0).unwrap();
            assert!(max_diff(&a.pixels, &m.pixels) < 1e-6);
        }
    }

    #[test]
    fn self_mix_is_identity() {
        let a = random_image(4, shape(6, 9, 2));
        for eta in [0.1, 0.5, 1.0] {
            let m = amplitude_mix(&a, &a, eta).unwrap();
            assert!(max_diff(&a.pixels, &m.pixels) < 1e-6);
        }
    }

    #[test]
    fn sinusoid_spectra_mix_convexly() {
        let s = shape(16, 16, 1);
        let x1 = Image::from_fn(s, |_, _, x| 0.5 + 0.3 * (2.0 * PI * 2.0 * x as f64 / 16.0).cos()).unwrap();
        let x2 = Image::from_fn(s, |_, y, _| {
            0.5 + 0.2 * (2.0 * PI * 3.0 * y as f64 / 16.0 + 0.4).cos()
        })
        .unwrap();
        for eta in [0.0, 0.25, 0.7, 1.0] {
            let m = amplitude_mix(&x1, &x2, eta).unwrap();
            let am = &amplitude_spectrum(&m)[0];
            let a1 = &amplitude_spectrum(&x1)[0];
            let a2 = &amplitude_spectrum(&x2)[0];
            for k in 0..am.len() {
                let want = (1.0 - eta) * a1[k] + eta * a2[k];
                assert!((am[k] - want).abs() < 1e-6, "eta {eta} bin {k}");
            }
        }
    }

    #[test]
    fn phase_follows_first_image() {
        let s = shape(8, 8, 1);
        let a = random_image(5, s);
        let b = random_image(6, s);
        let m = amplitude_mix_unclipped(&a, &b, 0.6).unwrap();
        let sa = &spectrum(&a)[0];
        let sm = &spectrum(&m)[0];
        for (za, zm) in sa.iter().zip(sm) {
            if zm.norm() > 1e-6 && za.norm() > 1e-6 {
                let d = (za.arg() - zm.arg()).rem_euclid(2.0 * PI);
                assert!(d.min(2.0 * PI - d) < 1e-6);
            }
        }
    }

    #[test]
    fn mix_output_is_clipped_and_shape_checked() {
        let a = random_image(7, shape(8, 8, 1));
        let b = Image::from_fn(shape(8, 8, 1), |_, y, x| ((x + y) % 2) as f64).unwrap();
        let m = amplitude_mix(&a, &b, 1.0).unwrap();
        assert!(m.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(amplitude_mix(&a, &random_image(1, shape(8, 4, 1)), 0.5).is_err());
        assert!(amplitude_mix(&a, &a, 1.5).is_err());
    }

    #[test]
    fn batch_augmentation_is_deterministic_and_cross_domain() {
        let s = shape(6, 6, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = Matrix::from_fn(6, s.len(), |_, _| rng.random::<f64>());
        let domains = [0, 0, 1, 1, 2, 2];
        let a = augment_batch(&batch, s, &domains, 1.0, 3).unwrap();
        let b = par::sequential(|| augment_batch(&batch, s, &domains, 1.0, 3).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, batch);
        assert_eq!(augment_batch(&batch, s, &domains, 0.0, 3).unwrap(), batch);
        // One domain only: every sample mixes with itself.
        let same = augment_batch(&batch, s, &[0; 6], 1.0, 3).unwrap();
        assert!(max_diff(same.as_slice(), batch.as_slice()) < 1e-6);
    }

    #[test]
    fn ema_cases() {
        let s = ModelParams::init(1, &[4, 3], 2).unwrap();
        let t0 = ModelParams::init(2, &[4, 3], 2).unwrap();
        let mut t = TeacherState::new(t0.clone(), 0.0).unwrap();
        t.ema_update(&s).unwrap();
        assert_eq!(t.params, s);
        let mut t = TeacherState::new(t0.clone(), 1.0).unwrap();
        t.ema_update(&s).unwrap();
        assert_eq!(t.params, t0);
        let mut t = TeacherState::new(t0.clone(), 0.5).unwrap();
        t.ema_update(&s).unwrap();
        for ((m, a), b) in t.params.tensors().iter().zip(t0.tensors()).zip(s.tensors()) {
            for k in 0..m.len() {
                assert!((m[k] - 0.5 * (a[k] + b[k])).abs() < 1e-12);
            }
        }
        let other = ModelParams::init(1, &[4, 2], 2).unwrap();
        assert!(t.ema_update(&other).is_err());
    }

    #[test]
    fn ema_contracts_towards_student() {
        let s = ModelParams::init(1, &[5, 4], 3).unwrap();
        let mut t = TeacherState::new(ModelParams::init(2, &[5, 4], 3).unwrap(), 0.9).unwrap();
        let before: Vec<f64> = t.params.tensors().concat();
        t.ema_update(&s).unwrap();
        let after: Vec<f64> = t.params.tensors().concat();
        for ((a, b), x) in after.iter().zip(&before).zip(s.tensors().concat()) {
            assert!((a - x).abs() <= 0.9 * (b - x).abs() + 1e-15);
        }
    }

    #[test]
    fn cot_kl_cases() {
        let (v, g) = cot_kl(&[0.3, -1.0, 2.0], &[0.3, -1.0, 2.0], 4.0).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|x| x.abs() < 1e-15));
        let (v, _) = cot_kl(&[0.0, 0.0], &[1f64.ln(), 3f64.ln()], 1.0).unwrap();
        let want = 0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln();
        assert!((v - want).abs() < 1e-12);
        assert!((v - 0.130812).abs() < 1e-6);
        assert!(cot_kl(&[0.0], &[0.0, 1.0], 1.0).is_err());
        assert!(cot_kl(&[0.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn cot_kl_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let c = rng.random_range(2..8);
            let s: Vec<f64> = (0..c).map(|_| rng.random_range(-3.0..3.0)).collect();
            let t: Vec<f64> = (0..c).map(|_| rng.random_range(-3.0..3.0)).collect();
            let temp = rng.random_range(0.5..5.0);
            let (v, g) = cot_kl(&s, &t, temp).unwrap();
            assert!(v >= 0.0);
            let num = central_gradient(|x| cot_kl(x, &t, temp).unwrap().0, &s);
            assert!(rel_error(&g, &num) < 1e-7);
        }
    }

    fn setup() -> (ModelParams, Matrix, Matrix, Vec<usize>) {
        let p = ModelParams::init(3, &[6, 5, 4], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Matrix::from_fn(6, 6, |_, _| rng.random::<f64>());
        let xa = Matrix::from_fn(6, 6, |_, _| rng.random::<f64>());
        (p, x, xa, vec![0, 1, 2, 0, 1, 2])
    }

    #[test]
    fn fact_loss_reductions() {
        let (p, x, xa, y) = setup();
        let (to, ta) = (p.forward(&x).unwrap(), p.forward(&xa).unwrap());
        let cfg = FactConfig {
            beta: 0.0,
            ..FactConfig::default()
        };
        let parts = fact_loss(&p, &to, &ta, None, &y, &cfg, None).unwrap();
        assert_eq!(parts.total, parts.cls_ori + parts.cls_aug);
        assert!(fact_loss(&p, &to, &ta, None, &y, &FactConfig::default(), None).is_err());

        // Teacher equals student and both views coincide.
        let cfg = FactConfig {
            temperature: 1.0,
            ..FactConfig::default()
        };
        let logits = to.class_logits.clone();
        let t = TeacherLogits {
            ori: &logits,
            aug: &logits,
        };
        let parts = fact_loss(&p, &to, &to, Some(t), &y, &cfg, None).unwrap();
        assert!(parts.cot_a2o.abs() < 1e-15 && parts.cot_o2a.abs() < 1e-15);
        assert!(parts.total >= 0.0);
    }

    #[test]
    fn fact_loss_gradient_through_network() {
        let (p, x, xa, y) = setup();
        let teacher = ModelParams::init(4, &[6, 5, 4], 3).unwrap();
        let t_ori = teacher.predict_logits(&x).unwrap();
        let t_aug = teacher.predict_logits(&xa).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let covs = (0..3)
            .map(|_| {
                let a = Matrix::from_fn(4, 4, |_, _| rng.random_range(-0.5..0.5));
                a.t_matmul(&a).unwrap()
            })
            .collect();
        let bank = CovarianceBank::from_matrices(covs).unwrap();
        let cfg = FactConfig::default();
        let loss = |q: &ModelParams| {
            let (a, b) = (q.forward(&x).unwrap(), q.forward(&xa).unwrap());
            let t = TeacherLogits {
                ori: &t_ori,
                aug: &t_aug,
            };
            fact_loss(q, &a, &b, Some(t), &y, &cfg, Some((&bank, 0.8))).unwrap()
        };
        let parts = loss(&p);
        let (a, b) = (p.forward(&x).unwrap(), p.forward(&xa).unwrap());
        let mut g = p.backward(&a, &parts.ori).unwrap();
        g.axpy(1.0, &p.backward(&b, &parts.aug).unwrap()).unwrap();
        let num = central_gradient(|v| loss(&p.with_flat(v).unwrap()).total, &p.to_flat());
        assert!(rel_error(&g.to_flat(), &num) < 1e-6);
    }
}
