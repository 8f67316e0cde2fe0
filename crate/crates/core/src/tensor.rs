//! Dense row-major `f64` tensors and the handful of layer kernels the HAR
//! network needs, each with a hand-written backward pass.
//!
//! Everything here is a pure function of its arguments. Shapes are checked up
//! front and reported through [`TensorError`], naming the dimension that did
//! not line up.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} values but {got} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("conv1d: kernel size {0} must be odd")]
    EvenKernel(usize),
    #[error("gap: length axis is empty")]
    EmptyLength,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("adam: beta values must lie in [0, 1), got beta1={beta1}, beta2={beta2}")]
    InvalidBeta { beta1: f64, beta2: f64 },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn matrix(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            if row.len() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "matrix",
                    dim: "row length",
                    expected: c,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![r, c], data)
    }

    /// Internal constructor for kernels whose outputs are finite by
    /// construction; skips the finiteness scan.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: self.data.len(),
            });
        }
        Ok(Self { shape, data: self.data })
    }

    /// Element at a 2-D index. Panics when out of range.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.shape[1..].iter().product::<usize>();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.shape.len() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            shape: t.shape.clone(),
        });
    }
    Ok(())
}

fn expect_dim(op: &'static str, dim: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(TensorError::ShapeMismatch { op, dim, expected, got });
    }
    Ok(())
}

struct ConvDims {
    c_in: usize,
    c_out: usize,
    len: usize,
    k: usize,
}

fn conv_dims(op: &'static str, input: &Tensor, kernels: &Tensor) -> Result<ConvDims> {
    expect_rank(op, input, 2)?;
    expect_rank(op, kernels, 3)?;
    let (c_in, len) = (input.shape[0], input.shape[1]);
    let (c_out, k_in, k) = (kernels.shape[0], kernels.shape[1], kernels.shape[2]);
    expect_dim(op, "input channels", k_in, c_in)?;
    if k % 2 == 0 {
        return Err(TensorError::EvenKernel(k));
    }
    Ok(ConvDims { c_in, c_out, len, k })
}

/// Zero-pads each row by `(k-1)/2` on both sides.
fn pad_rows(input: &Tensor, k: usize) -> (Vec<f64>, usize) {
    let (c, len) = (input.shape[0], input.shape[1]);
    let pad = (k - 1) / 2;
    let width = len + k - 1;
    let mut padded = vec![0.0; c * width];
    for j in 0..c {
        padded[j * width + pad..j * width + pad + len].copy_from_slice(input.row(j));
    }
    (padded, width)
}

/// `dst[t] += Σ_k w[k]·src[t+k]`, blocked so each block of `dst` stays in
/// registers across the kernel taps. Per element the terms are added in
/// tap order, exactly as the unblocked loop would.
fn correlate_acc(dst: &mut [f64], src: &[f64], w: &[f64]) {
    const B: usize = 8;
    let n = dst.len();
    debug_assert!(src.len() + 1 >= n + w.len());
    let mut t = 0;
    while t + B <= n {
        let mut acc = [0.0; B];
        acc.copy_from_slice(&dst[t..t + B]);
        for (kk, &wk) in w.iter().enumerate() {
            let s = &src[t + kk..t + kk + B];
            for i in 0..B {
                acc[i] += wk * s[i];
            }
        }
        dst[t..t + B].copy_from_slice(&acc);
        t += B;
    }
    for (tt, o) in dst.iter_mut().enumerate().skip(t) {
        for (kk, &wk) in w.iter().enumerate() {
            *o += wk * src[tt + kk];
        }
    }
}

/// "Same"-length 1-D cross-correlation: `input [C_in, L]`,
/// `kernels [C_out, C_in, K]`, `bias [C_out]` → `[C_out, L]`.
pub fn conv1d_forward(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = conv_dims("conv1d_forward", input, kernels)?;
    expect_rank("conv1d_forward", bias, 1)?;
    expect_dim("conv1d_forward", "bias length", d.c_out, bias.shape[0])?;
    let (padded, width) = pad_rows(input, d.k);
    let mut out = vec![0.0; d.c_out * d.len];
    for c in 0..d.c_out {
        let row = &mut out[c * d.len..(c + 1) * d.len];
        row.fill(bias.data[c]);
        for j in 0..d.c_in {
            let w = &kernels.data[(c * d.c_in + j) * d.k..(c * d.c_in + j + 1) * d.k];
            correlate_acc(row, &padded[j * width..(j + 1) * width], w);
        }
    }
    Ok(Tensor::from_parts(vec![d.c_out, d.len], out))
}

/// Gradients of [`conv1d_forward`] with respect to input, kernels and bias.
pub fn conv1d_backward(input: &Tensor, kernels: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (gi, gk, gb) = conv1d_backward_impl("conv1d_backward", input, kernels, grad_out, true)?;
    Ok((gi.expect("input gradient requested"), gk, gb))
}

/// Kernel and bias gradients only; used where the input is data, not an
/// activation.
pub fn conv1d_backward_params(input: &Tensor, kernels: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, gk, gb) = conv1d_backward_impl("conv1d_backward_params", input, kernels, grad_out, false)?;
    Ok((gk, gb))
}

/// Dot product with four independent accumulators so the reduction is not
/// one serial dependency chain. The summation order is fixed.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn conv1d_backward_impl(
    op: &'static str,
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    want_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let d = conv_dims(op, input, kernels)?;
    expect_rank(op, grad_out, 2)?;
    expect_dim(op, "output channels", d.c_out, grad_out.shape[0])?;
    expect_dim(op, "output length", d.len, grad_out.shape[1])?;
    let (padded, width) = pad_rows(input, d.k);
    let mut grad_k = vec![0.0; kernels.len()];
    let mut grad_b = vec![0.0; d.c_out];
    for c in 0..d.c_out {
        let g = grad_out.row(c);
        grad_b[c] = g.iter().sum();
        for j in 0..d.c_in {
            let src = &padded[j * width..(j + 1) * width];
            let base = (c * d.c_in + j) * d.k;
            for kk in 0..d.k {
                grad_k[base + kk] = dot(g, &src[kk..kk + d.len]);
            }
        }
    }
    // dx[j][s] = Σ_c Σ_k w[c][j][k]·g[c][s+pad-k]: a correlation of the
    // padded output gradient with the flipped kernels.
    let grad_in = want_input.then(|| {
        let (gpad, gwidth) = pad_rows(grad_out, d.k);
        let mut grad_in = vec![0.0; d.c_in * d.len];
        let mut flipped = vec![0.0; d.k];
        for j in 0..d.c_in {
            let dst = &mut grad_in[j * d.len..(j + 1) * d.len];
            for c in 0..d.c_out {
                let base = (c * d.c_in + j) * d.k;
                for (f, w) in flipped.iter_mut().zip(kernels.data[base..base + d.k].iter().rev()) {
                    *f = *w;
                }
                correlate_acc(dst, &gpad[c * gwidth..(c + 1) * gwidth], &flipped);
            }
        }
        Tensor::from_parts(vec![d.c_in, d.len], grad_in)
    });
    Ok((
        grad_in,
        Tensor::from_parts(kernels.shape.clone(), grad_k),
        Tensor::from_parts(vec![d.c_out], grad_b),
    ))
}

/// Global average pooling over the length axis: `[C, L]` → `[C]`.
pub fn gap(input: &Tensor) -> Result<Tensor> {
    expect_rank("gap", input, 2)?;
    let (c, len) = (input.shape[0], input.shape[1]);
    if len == 0 {
        return Err(TensorError::EmptyLength);
    }
    let out = (0..c).map(|i| input.row(i).iter().sum::<f64>() / len as f64).collect();
    Ok(Tensor::from_parts(vec![c], out))
}

pub fn gap_backward(grad_out: &Tensor, len: usize) -> Result<Tensor> {
    expect_rank("gap_backward", grad_out, 1)?;
    if len == 0 {
        return Err(TensorError::EmptyLength);
    }
    let c = grad_out.shape[0];
    let mut out = Vec::with_capacity(c * len);
    for &g in &grad_out.data {
        out.extend(std::iter::repeat_n(g / len as f64, len));
    }
    Ok(Tensor::from_parts(vec![c, len], out))
}

/// Affine map `W·x + b` with `x [N]`, `W [M, N]`, `b [M]`.
pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    expect_rank("dense_forward", input, 1)?;
    expect_rank("dense_forward", weights, 2)?;
    expect_rank("dense_forward", bias, 1)?;
    let (m, n) = (weights.shape[0], weights.shape[1]);
    expect_dim("dense_forward", "input length", n, input.shape[0])?;
    expect_dim("dense_forward", "bias length", m, bias.shape[0])?;
    let out = (0..m)
        .map(|i| bias.data[i] + weights.row(i).iter().zip(&input.data).map(|(w, x)| w * x).sum::<f64>())
        .collect();
    Ok(Tensor::from_parts(vec![m], out))
}

/// Returns `(grad_input, grad_weights, grad_bias)`.
pub fn dense_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    expect_rank("dense_backward", input, 1)?;
    expect_rank("dense_backward", weights, 2)?;
    expect_rank("dense_backward", grad_out, 1)?;
    let (m, n) = (weights.shape[0], weights.shape[1]);
    expect_dim("dense_backward", "input length", n, input.shape[0])?;
    expect_dim("dense_backward", "output length", m, grad_out.shape[0])?;
    let mut grad_in = vec![0.0; n];
    let mut grad_w = vec![0.0; m * n];
    for i in 0..m {
        let g = grad_out.data[i];
        let w = weights.row(i);
        for j in 0..n {
            grad_in[j] += w[j] * g;
            grad_w[i * n + j] = g * input.data[j];
        }
    }
    Ok((
        Tensor::from_parts(vec![n], grad_in),
        Tensor::from_parts(vec![m, n], grad_w),
        Tensor::from_parts(vec![m], grad_out.data.clone()),
    ))
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor::from_parts(input.shape.clone(), input.data.iter().map(|&v| v.max(0.0)).collect())
}

/// Passes gradient where the forward pre-activation was strictly positive.
pub fn relu_backward(pre: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor::from_parts(
        pre.shape.clone(),
        pre.data
            .iter()
            .zip(&grad_out.data)
            .map(|(&z, &g)| if z > 0.0 { g } else { 0.0 })
            .collect(),
    )
}

pub fn softmax(logits: &Tensor) -> Tensor {
    let max = logits.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Tensor::from_parts(logits.shape.clone(), exps.into_iter().map(|e| e / sum).collect())
}

/// Negative log-likelihood of `label` under `softmax(logits)` and its
/// gradient `softmax(logits) - one_hot(label)`.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    expect_rank("softmax_cross_entropy", logits, 1)?;
    let k = logits.shape[0];
    if label >= k {
        return Err(TensorError::LabelOutOfRange { label, classes: k });
    }
    let max = logits.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.data.iter().map(|&z| (z - max).exp()).sum();
    let log_sum = sum.ln();
    let loss = -(logits.data[label] - max - log_sum);
    let mut grad: Vec<f64> = logits.data.iter().map(|&z| (z - max - log_sum).exp()).collect();
    grad[label] -= 1.0;
    Ok((loss, Tensor::from_parts(vec![k], grad)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TensorError::InvalidBeta {
                beta1: self.beta1,
                beta2: self.beta2,
            });
        }
        Ok(())
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }
}

/// Bias-corrected Adam update. Returns the new parameters and state; the
/// inputs are left untouched.
pub fn adam_step(params: &Tensor, grads: &Tensor, state: &AdamState, cfg: &AdamConfig) -> Result<(Tensor, AdamState)> {
    let mut p = params.clone();
    let mut s = state.clone();
    adam_update_in_place(&mut p, grads, &mut s, cfg)?;
    Ok((p, s))
}

/// In-place form of [`adam_step`] used by the training loop.
pub fn adam_update_in_place(
    params: &mut Tensor,
    grads: &Tensor,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;
    for (dim, (a, b)) in [
        ("gradient", &grads.shape),
        ("first moment", &state.m.shape),
        ("second moment", &state.v.shape),
    ]
    .into_iter()
    .map(|(d, s)| (d, (s, &params.shape)))
    {
        if a != b {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                dim,
                expected: b.iter().product(),
                got: a.iter().product(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params
        .data
        .iter_mut()
        .zip(&grads.data)
        .zip(state.m.data.iter_mut())
        .zip(state.v.data.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}
