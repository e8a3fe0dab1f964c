//! Multi-domain image datasets: a synthetic glyph benchmark, an IDX reader,
//! leave-one-domain-out splits and a binary container.
//!
//! Images are kept as rows of a matrix in the channel-planar layout used by
//! [`crate::fact`]. Pixel values are always representable as `f32` so the
//! container round-trips bit for bit.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fact::{Image, ImageShape};
use crate::linalg::Matrix;
use crate::par;

pub const GLYPHS: [&str; 8] = ["disk", "cross", "stripes", "ring", "triangle", "square", "x", "bar"];

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    shape: ImageShape,
    images: Matrix,
    labels: Vec<usize>,
    domains: Vec<usize>,
    num_classes: usize,
    num_domains: usize,
}

impl DomainDataset {
    pub fn new(
        shape: ImageShape,
        images: Matrix,
        labels: Vec<usize>,
        domains: Vec<usize>,
        num_classes: usize,
        num_domains: usize,
    ) -> Result<Self> {
        let n = labels.len();
        if images.rows() != n || domains.len() != n {
            return Err(Error::invalid(format!(
                "{} images, {} labels, {} domain ids",
                images.rows(),
                n,
                domains.len()
            )));
        }
        if images.cols() != shape.len() {
            return Err(Error::invalid("image rows do not match the image shape"));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!("label {y} out of range")));
        }
        if let Some(k) = domains.iter().find(|&&k| k >= num_domains) {
            return Err(Error::invalid(format!("domain id {k} out of range")));
        }
        if !images.is_finite() {
            return Err(Error::invalid("non-finite pixel"));
        }
        Ok(DomainDataset {
            shape,
            images,
            labels,
            domains,
            num_classes,
            num_domains,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    /// All images, one flattened image per row.
    pub fn images(&self) -> &Matrix {
        &self.images
    }

    pub fn image(&self, i: usize) -> Image {
        Image::new(self.shape, self.images.row(i).to_vec()).expect("validated on construction")
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn domains(&self) -> &[usize] {
        &self.domains
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> DomainDataset {
        DomainDataset {
            shape: self.shape,
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            domains: idx.iter().map(|&i| self.domains[i]).collect(),
            num_classes: self.num_classes,
            num_domains: self.num_domains,
        }
    }

    /// Number of samples of class `c` in domain `k`.
    pub fn count(&self, class: usize, domain: usize) -> usize {
        self.labels
            .iter()
            .zip(&self.domains)
            .filter(|&(&y, &k)| y == class && k == domain)
            .count()
    }

    /// Concatenates datasets with equal image shapes; class and domain counts
    /// are the maxima over the parts.
    pub fn concat(parts: &[DomainDataset]) -> Result<DomainDataset> {
        let first = parts.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        if parts.iter().any(|p| p.shape != first.shape) {
            return Err(Error::invalid("image shapes differ"));
        }
        let mut data = Vec::new();
        let (mut labels, mut domains) = (Vec::new(), Vec::new());
        for p in parts {
            data.extend_from_slice(p.images.as_slice());
            labels.extend_from_slice(&p.labels);
            domains.extend_from_slice(&p.domains);
        }
        let n = labels.len();
        DomainDataset::new(
            first.shape,
            Matrix::from_vec(n, first.shape.len(), data)?,
            labels,
            domains,
            parts.iter().map(|p| p.num_classes).max().unwrap_or(0),
            parts.iter().map(|p| p.num_domains).max().unwrap_or(0),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Serializes to the container format. Pixels are stored as `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(48 + 8 * n + 4 * self.images.as_slice().len());
        out.extend_from_slice(DATA_MAGIC);
        for v in [DATA_VERSION, self.num_classes as u32, self.num_domains as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for v in [self.shape.height, self.shape.width, self.shape.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &y in &self.labels {
            out.extend_from_slice(&(y as u32).to_le_bytes());
        }
        for &k in &self.domains {
            out.extend_from_slice(&(k as u32).to_le_bytes());
        }
        for &p in self.images.as_slice() {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = DATA_MAGIC.len() + 4 * 3 + 8 + 4 * 3;
        if bytes.len() < header {
            return Err(Error::format("dataset file too short"));
        }
        if &bytes[..8] != DATA_MAGIC {
            return Err(Error::format("not a dataset file (bad magic)"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(8);
        if version != DATA_VERSION {
            return Err(Error::format(format!("unsupported dataset version {version}")));
        }
        let classes = u32_at(12) as usize;
        let domains = u32_at(16) as usize;
        let n = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes"));
        let shape = ImageShape::new(u32_at(28) as usize, u32_at(32) as usize, u32_at(36) as usize)
            .map_err(|e| Error::format(e.to_string()))?;
        let expected = (n as u128) * (8 + 4 * shape.len() as u128) + header as u128;
        if bytes.len() as u128 != expected {
            return Err(Error::format(format!(
                "dataset file is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let n = n as usize;
        let labels = (0..n).map(|i| u32_at(header + 4 * i) as usize).collect();
        let dom = (0..n).map(|i| u32_at(header + 4 * (n + i)) as usize).collect();
        let pix_start = header + 8 * n;
        let pixels = bytes[pix_start..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let images = Matrix::from_vec(n, shape.len(), pixels)?;
        DomainDataset::new(shape, images, labels, dom, classes, domains)
            .map_err(|e| Error::format(format!("inconsistent dataset file: {e}")))
    }
}

pub const DATA_MAGIC: &[u8; 8] = b"IDMLDSET";
pub const DATA_VERSION: u32 = 1;

/// Parameters of the synthetic benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenSpec {
    pub num_classes: usize,
    pub num_domains: usize,
    pub per_class_per_domain: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            num_classes: 5,
            num_domains: 4,
            per_class_per_domain: 100,
            image_size: 32,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=GLYPHS.len()).contains(&self.num_classes) {
            return Err(Error::invalid(format!(
                "classes must lie in 2..={}, got {}",
                GLYPHS.len(),
                self.num_classes
            )));
        }
        if !(3..=16).contains(&self.num_domains) {
            return Err(Error::invalid(format!(
                "domains must lie in 3..=16, got {}",
                self.num_domains
            )));
        }
        if self.per_class_per_domain == 0 {
            return Err(Error::invalid("per_class_per_domain must be positive"));
        }
        if !(8..=256).contains(&self.image_size) {
            return Err(Error::invalid(format!(
                "image size must lie in 8..=256, got {}",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Fixed rendering transform of one domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainStyle {
    /// Background grating: cycles per image, orientation and amplitude.
    pub texture_freq: f64,
    pub texture_angle: f64,
    pub texture_amp: f64,
    /// Multiplicative intensity ramp `1 + ramp_gain * <p, ramp_dir>`.
    pub ramp_gain: f64,
    pub ramp_angle: f64,
    pub background: f64,
    pub foreground: f64,
    pub noise_std: f64,
    /// Low-pass (box-blurred) noise instead of white noise.
    pub blurred_noise: bool,
}

impl DomainStyle {
    pub fn for_domain(k: usize, num_domains: usize) -> Self {
        let t = k as f64 / num_domains as f64;
        DomainStyle {
            texture_freq: 2.0 + 3.0 * k as f64,
            texture_angle: PI * t,
            texture_amp: 0.08 + 0.04 * (k % 3) as f64,
            ramp_gain: 0.15 + 0.1 * (k % 2) as f64,
            ramp_angle: 2.0 * PI * t + 0.5,
            background: 0.1 + 0.12 * (k % 3) as f64,
            foreground: 0.95 - 0.1 * (k % 2) as f64,
            noise_std: 0.03 + 0.03 * (k % 3) as f64,
            blurred_noise: k % 2 == 1,
        }
    }
}

/// Binary glyph mask in normalized coordinates `u, v ∈ [-1, 1]`.
fn glyph(class: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match class {
        0 => r < 0.5,
        1 => (u.abs() < 0.15 && v.abs() < 0.6) || (v.abs() < 0.15 && u.abs() < 0.6),
        2 => u.abs() < 0.6 && v.abs() < 0.6 && (v * 2.5 * PI).sin() > 0.0,
        3 => r > 0.33 && r < 0.6,
        4 => v > -0.45 && v < 0.5 && u.abs() < (0.5 - v) * 0.6,
        5 => u.abs() < 0.45 && v.abs() < 0.45,
        6 => (u.abs() - v.abs()).abs() < 0.14 && u.abs() < 0.6,
        7 => u.abs() < 0.65 && v.abs() < 0.13,
        _ => unreachable!("validated class count"),
    }
}

fn render(class: usize, style: &DomainStyle, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dx: f64 = rng.random_range(-0.12..0.12);
    let dy: f64 = rng.random_range(-0.12..0.12);
    let scale: f64 = rng.random_range(0.85..1.15);
    let rot: f64 = rng.random_range(-0.3..0.3);
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    let (sr, cr) = rot.sin_cos();
    let (st, ct) = style.texture_angle.sin_cos();
    let (sa, ca) = style.ramp_angle.sin_cos();

    let mut noise: Vec<f64> = (0..size * size)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    if style.blurred_noise {
        noise = box_blur(&noise, size);
    }

    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let px = 2.0 * (x as f64 + 0.5) / size as f64 - 1.0;
            let py = 2.0 * (y as f64 + 0.5) / size as f64 - 1.0;
            let (qx, qy) = ((px - dx) / scale, (py - dy) / scale);
            let (u, v) = (cr * qx + sr * qy, -sr * qx + cr * qy);
            let grating = style.texture_amp
                * (PI * style.texture_freq * (ct * px + st * py) + phase).cos();
            let base = if glyph(class, u, v) {
                style.foreground
            } else {
                style.background + grating
            };
            let ramp = 1.0 + style.ramp_gain * (ca * px + sa * py);
            let value = (base * ramp + style.noise_std * noise[y * size + x]).clamp(0.0, 1.0);
            out.push(value as f32 as f64);
        }
    }
    out
}

/// 3x3 box blur with clamped borders, rescaled to unit variance for white
/// input.
fn box_blur(noise: &[f64], size: usize) -> Vec<f64> {
    let at = |x: isize, y: isize| {
        let cx = x.clamp(0, size as isize - 1) as usize;
        let cy = y.clamp(0, size as isize - 1) as usize;
        noise[cy * size + cx]
    };
    let mut out = Vec::with_capacity(noise.len());
    for y in 0..size as isize {
        for x in 0..size as isize {
            let mut s = 0.0;
            for oy in -1..=1 {
                for ox in -1..=1 {
                    s += at(x + ox, y + oy);
                }
            }
            out.push(s / 3.0);
        }
    }
    out
}

/// Renders the synthetic benchmark. Samples are ordered by domain, then
/// class, then index; sample `i` draws from stream `i` of a ChaCha8
/// generator seeded with `spec.seed`.
pub fn generate(spec: &GenSpec) -> Result<DomainDataset> {
    spec.validate()?;
    let (c, k, p) = (spec.num_classes, spec.num_domains, spec.per_class_per_domain);
    let n = c * k * p;
    let styles: Vec<DomainStyle> = (0..k).map(|d| DomainStyle::for_domain(d, k)).collect();
    let label_of = |i: usize| (i / p) % c;
    let domain_of = |i: usize| i / (p * c);
    let rows = par::map_range(n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        render(label_of(i), &styles[domain_of(i)], spec.image_size, &mut rng)
    });
    let shape = ImageShape::new(spec.image_size, spec.image_size, 1)?;
    let images = Matrix::from_vec(n, shape.len(), rows.concat())?;
    DomainDataset::new(
        shape,
        images,
        (0..n).map(label_of).collect(),
        (0..n).map(domain_of).collect(),
        c,
        k,
    )
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format("IDX header truncated"))
}

/// Parses IDX image and label files (MNIST layout). Pixels are scaled by
/// 1/255; every sample gets `domain_id`. The class count is the largest
/// label plus one (at least 2).
pub fn parse_idx(images: &[u8], labels: &[u8], domain_id: usize) -> Result<DomainDataset> {
    if be_u32(images, 0)? != 0x0803 {
        return Err(Error::format("bad IDX image magic"));
    }
    if be_u32(labels, 0)? != 0x0801 {
        return Err(Error::format("bad IDX label magic"));
    }
    let n = be_u32(images, 4)? as usize;
    let (h, w) = (be_u32(images, 8)? as usize, be_u32(images, 12)? as usize);
    let nl = be_u32(labels, 4)? as usize;
    if n != nl {
        return Err(Error::format(format!("{n} images but {nl} labels")));
    }
    let shape = ImageShape::new(h, w, 1).map_err(|e| Error::format(e.to_string()))?;
    let need = 16 + n * shape.len();
    if images.len() != need {
        return Err(Error::format(format!(
            "IDX image file is {} bytes, header implies {need}",
            images.len()
        )));
    }
    if labels.len() != 8 + n {
        return Err(Error::format(format!(
            "IDX label file is {} bytes, header implies {}",
            labels.len(),
            8 + n
        )));
    }
    let pixels = images[16..]
        .iter()
        .map(|&b| (b as f32 / 255.0) as f64)
        .collect();
    let labels: Vec<usize> = labels[8..].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    DomainDataset::new(
        shape,
        Matrix::from_vec(n, shape.len(), pixels)?,
        labels,
        vec![domain_id; n],
        classes,
        domain_id + 1,
    )
}

pub fn ingest_idx(
    image_file: impl AsRef<Path>,
    label_file: impl AsRef<Path>,
    domain_id: usize,
) -> Result<DomainDataset> {
    parse_idx(&fs::read(image_file)?, &fs::read(label_file)?, domain_id)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LodoSplit {
    pub train: DomainDataset,
    pub target: DomainDataset,
    pub target_id: usize,
    /// Original indices of the rows of `train` and `target`.
    pub train_index: Vec<usize>,
    pub target_index: Vec<usize>,
}

/// Holds out domain `target_id`; both parts keep the original row order.
pub fn lodo_split(ds: &DomainDataset, target_id: usize) -> Result<LodoSplit> {
    if target_id >= ds.num_domains() {
        return Err(Error::invalid(format!(
            "target domain {target_id} out of range for {} domains",
            ds.num_domains()
        )));
    }
    let (target_index, train_index): (Vec<usize>, Vec<usize>) =
        (0..ds.len()).partition(|&i| ds.domains[i] == target_id);
    Ok(LodoSplit {
        train: ds.subset(&train_index),
        target: ds.subset(&target_index),
        target_id,
        train_index,
        target_index,
    })
}
