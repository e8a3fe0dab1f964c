//! Feed-forward feature extractor with a classifier head and a metric head.
//!
//! Hidden layers are affine maps followed by ReLU; the activations of the
//! last hidden layer are the features `f`. Both heads are affine maps from
//! `f` to `C` logits. Forward and backward passes are written out by hand.

use std::fs;
use std::io::{self, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Affine layer `y = x Wᵀ + b` with `W` stored as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Dense {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn xavier(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = Matrix::from_fn(out_dim, in_dim, |_, _| rng.random_range(-limit..=limit));
        Dense {
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    /// `x Wᵀ + b`.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = x.matmul_t(&self.weight)?;
        for i in 0..z.rows() {
            z.row_mut(i)
                .iter_mut()
                .zip(&self.bias)
                .for_each(|(v, b)| *v += b);
        }
        Ok(z)
    }

    pub fn axpy(&mut self, alpha: f64, other: &Dense) {
        self.weight.axpy(alpha, &other.weight);
        self.bias
            .iter_mut()
            .zip(&other.bias)
            .for_each(|(a, b)| *a += alpha * b);
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.weight.shape() == other.weight.shape() && self.bias.len() == other.bias.len()
    }
}

/// Network parameters. Also used as the container for their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hidden: Vec<Dense>,
    pub classifier: Dense,
    pub dml_head: Dense,
}

impl ModelParams {
    /// Xavier-uniform weights and zero biases, drawn from a ChaCha8 stream in
    /// declaration order.
    ///
    /// `widths` lists the input width followed by each hidden width; the last
    /// entry is the feature dimension `d`. A single entry means no hidden
    /// layers (features are the inputs).
    pub fn init(seed: u64, widths: &[usize], num_classes: usize) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::invalid(format!("invalid layer widths {widths:?}")));
        }
        if num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = widths
            .windows(2)
            .map(|w| Dense::xavier(w[1], w[0], &mut rng))
            .collect();
        let d = *widths.last().expect("non-empty");
        let classifier = Dense::xavier(num_classes, d, &mut rng);
        let dml_head = Dense::xavier(num_classes, d, &mut rng);
        Ok(ModelParams {
            hidden,
            classifier,
            dml_head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &Dense| Dense::zeros(l.out_dim(), l.in_dim());
        ModelParams {
            hidden: self.hidden.iter().map(z).collect(),
            classifier: z(&self.classifier),
            dml_head: z(&self.dml_head),
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.hidden.iter().map(Dense::out_dim));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.hidden
            .first()
            .map_or(self.classifier.in_dim(), Dense::in_dim)
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_dim()
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.hidden
            .iter()
            .chain([&self.classifier, &self.dml_head])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.hidden
            .iter_mut()
            .chain([&mut self.classifier, &mut self.dml_head])
    }

    /// Parameter tensors in declaration order (weight then bias per layer,
    /// hidden layers first, then classifier, then metric head).
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    /// All parameters concatenated in declaration order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    /// Copy of `self` with parameters replaced by `flat` (declaration order).
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut out = self.clone();
        let mut off = 0;
        for t in out.tensors_mut() {
            let len = t.len();
            t.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(out)
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.hidden.len() == other.hidden.len()
            && self.layers().zip(other.layers()).all(|(a, b)| a.same_shape(b))
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::invalid("parameter shapes differ"));
        }
        for (a, b) in self.layers_mut().zip(other.layers()) {
            a.axpy(alpha, b);
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn forward(&self, batch: &Matrix) -> Result<ForwardTrace> {
        if batch.cols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "batch width {} does not match model input {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let mut pre = Vec::with_capacity(self.hidden.len());
        let mut post: Vec<Matrix> = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let z = layer.apply(post.last().unwrap_or(batch))?;
            let mut a = z.clone();
            a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            pre.push(z);
            post.push(a);
        }
        let features = post.last().unwrap_or(batch);
        let class_logits = self.classifier.apply(features)?;
        let dml_logits = self.dml_head.apply(features)?;
        Ok(ForwardTrace {
            input: batch.clone(),
            pre,
            post,
            class_logits,
            dml_logits,
        })
    }

    /// Classifier logits only.
    pub fn predict_logits(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward(batch)?.class_logits)
    }

    /// Reverse-mode gradients of a scalar loss whose partial derivatives with
    /// respect to the trace's features, logits and head parameters are given
    /// by `up`. ReLU uses subgradient 0 at 0.
    pub fn backward(&self, trace: &ForwardTrace, up: &Upstream) -> Result<ModelParams> {
        let n = trace.input.rows();
        let d = self.feature_dim();
        let c = self.num_classes();
        if trace.pre.len() != self.hidden.len()
            || trace.class_logits.shape() != (n, c)
            || trace.features().shape() != (n, d)
        {
            return Err(Error::invalid("trace does not belong to these parameters"));
        }
        if up.features.shape() != (n, d)
            || up.class_logits.shape() != (n, c)
            || up.dml_logits.shape() != (n, c)
            || !up.classifier.same_shape(&self.classifier)
            || !up.dml_head.same_shape(&self.dml_head)
        {
            return Err(Error::invalid("upstream gradients have the wrong shape"));
        }

        let features = trace.features();
        let mut grads = self.zeros_like();
        grads.classifier = head_grad(&up.class_logits, features, &up.classifier)?;
        grads.dml_head = head_grad(&up.dml_logits, features, &up.dml_head)?;

        let mut d_act = up.features.clone();
        d_act.axpy(1.0, &up.class_logits.matmul(&self.classifier.weight)?);
        d_act.axpy(1.0, &up.dml_logits.matmul(&self.dml_head.weight)?);

        for l in (0..self.hidden.len()).rev() {
            let mut dz = d_act;
            dz.as_mut_slice()
                .iter_mut()
                .zip(trace.pre[l].as_slice())
                .for_each(|(g, z)| {
                    if *z <= 0.0 {
                        *g = 0.0;
                    }
                });
            let input = if l == 0 { &trace.input } else { &trace.post[l - 1] };
            grads.hidden[l].weight = dz.t_matmul(input)?;
            grads.hidden[l].bias = column_sums(&dz);
            d_act = if l > 0 {
                dz.matmul(&self.hidden[l].weight)?
            } else {
                Matrix::zeros(0, 0)
            };
        }
        Ok(grads)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let widths = self.widths();
        let mut out = Vec::with_capacity(CKPT_MAGIC.len() + 16 + 8 * self.num_params());
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(widths.len() as u32).to_le_bytes());
        for w in &widths {
            out.extend_from_slice(&(*w as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.num_classes() as u32).to_le_bytes());
        for t in self.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(CKPT_MAGIC.len())? != CKPT_MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let nw = r.u32()? as usize;
        if nw == 0 || nw > 64 {
            return Err(Error::format(format!("implausible layer count {nw}")));
        }
        let widths = (0..nw)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let classes = r.u32()? as usize;
        let mut params = ModelParams::init(0, &widths, classes)
            .map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
        let expected = params.num_params() * 8;
        if r.remaining() != expected {
            return Err(Error::format(format!(
                "checkpoint payload is {} bytes, expected {expected}",
                r.remaining()
            )));
        }
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                *v = r.f64()?;
            }
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub const CKPT_MAGIC: &[u8; 8] = b"ISDMLCKP";
pub const CKPT_VERSION: u32 = 1;

fn head_grad(d_logits: &Matrix, features: &Matrix, direct: &Dense) -> Result<Dense> {
    let mut weight = d_logits.t_matmul(features)?;
    weight.axpy(1.0, &direct.weight);
    let mut bias = column_sums(d_logits);
    bias.iter_mut().zip(&direct.bias).for_each(|(a, b)| *a += b);
    Ok(Dense { weight, bias })
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        out.iter_mut().zip(m.row(i)).for_each(|(o, v)| *o += v);
    }
    out
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Matrix,
    /// Pre-activations of each hidden layer.
    pub pre: Vec<Matrix>,
    /// Post-ReLU activations of each hidden layer.
    pub post: Vec<Matrix>,
    pub class_logits: Matrix,
    pub dml_logits: Matrix,
}

impl ForwardTrace {
    pub fn features(&self) -> &Matrix {
        self.post.last().unwrap_or(&self.input)
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }
}

/// Partial derivatives of a loss with respect to one forward trace.
///
/// Gradients on the logits are pulled back through the heads; `classifier`
/// and `dml_head` hold any direct dependence of the loss on head parameters
/// (the covariance term of the augmented logits).
#[derive(Debug, Clone, PartialEq)]
pub struct Upstream {
    pub features: Matrix,
    pub class_logits: Matrix,
    pub dml_logits: Matrix,
    pub classifier: Dense,
    pub dml_head: Dense,
}

impl Upstream {
    pub fn zeros(n: usize, feature_dim: usize, num_classes: usize) -> Self {
        Upstream {
            features: Matrix::zeros(n, feature_dim),
            class_logits: Matrix::zeros(n, num_classes),
            dml_logits: Matrix::zeros(n, num_classes),
            classifier: Dense::zeros(num_classes, feature_dim),
            dml_head: Dense::zeros(num_classes, feature_dim),
        }
    }

    pub fn for_params(n: usize, params: &ModelParams) -> Self {
        Self::zeros(n, params.feature_dim(), params.num_classes())
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl From<Error> for io::Error {
    fn from(e: Error) -> Self {
        io::Error::other(e.to_string())
    }
}
