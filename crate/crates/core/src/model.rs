//! The two-branch 1-D CNN used for activity recognition.
//!
//! ```text
//! input [3, L] ─┬─ conv(3→F, k1) ─ [BN] ─ ReLU ─ conv(F→F, k2) ─ [BN] ─ ReLU ─ GAP ─┐
//!               └─ conv(3→F, k1) ─ [BN] ─ ReLU ─ GAP ──────────────────────────────┴─ concat[2F] ─ dropout ─ dense(2F→K)
//! ```
//!
//! Gradients are assembled by hand from the layer backward passes in
//! [`crate::tensor`]. Batch norm is optional and off by default; when on,
//! train mode normalizes with per-batch statistics and eval mode with running
//! averages (momentum 0.9).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, ContainerError};
use crate::params::ParamSet;
use crate::rng::{derive_seed, SimRng, Stream};
use crate::segment::{DataSegment, AXES};
use crate::tensor::{self, AdamConfig, AdamState, Tensor, TensorError};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("channels must be positive, got {0}")]
    InvalidChannels(usize),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("segment shape {got:?} does not match expected [{axes}, {len}]")]
    SegmentShape { got: Vec<usize>, axes: usize, len: usize },
    #[error("training data is empty but {epochs} epoch(s) were requested")]
    EmptyTrainingData { epochs: usize },
    #[error("evaluation data is empty")]
    EmptyEvalData,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid training configuration: {0}")]
    InvalidTrainConfig(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClientId(pub u32);

impl std::fmt::Display for ClientId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub num_classes: usize,
    pub bn_enabled: bool,
    pub kernel_first: usize,
    pub kernel_second: usize,
    pub input_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            num_classes: 5,
            bn_enabled: false,
            kernel_first: 9,
            kernel_second: 5,
            input_len: crate::segment::WINDOW,
        }
    }
}

impl ModelConfig {
    pub fn new(channels: usize, num_classes: usize, bn_enabled: bool) -> Self {
        Self {
            channels,
            num_classes,
            bn_enabled,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(ModelError::InvalidChannels(self.channels));
        }
        if self.num_classes < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        for (name, k) in [
            ("kernel_first", self.kernel_first),
            ("kernel_second", self.kernel_second),
        ] {
            if k == 0 || k % 2 == 0 {
                return Err(ModelError::InvalidConfig(format!(
                    "{name} must be a positive odd number, got {k}"
                )));
            }
        }
        if self.input_len == 0 {
            return Err(ModelError::InvalidConfig("input_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct BnIdx {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    w: usize,
    b: usize,
    bn: Option<BnIdx>,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    a1: BlockIdx,
    a2: BlockIdx,
    b1: BlockIdx,
    dense_w: usize,
    dense_b: usize,
}

impl Layout {
    fn of(cfg: &ModelConfig) -> Self {
        let mut next = 0;
        let mut take = || {
            next += 1;
            next - 1
        };
        let mut block = |bn: bool| {
            let w = take();
            let b = take();
            let bn = bn.then(|| BnIdx {
                gamma: take(),
                beta: take(),
                mean: take(),
                var: take(),
            });
            BlockIdx { w, b, bn }
        };
        let a1 = block(cfg.bn_enabled);
        let a2 = block(cfg.bn_enabled);
        let b1 = block(cfg.bn_enabled);
        let dense_w = take();
        let dense_b = take();
        Self {
            a1,
            a2,
            b1,
            dense_w,
            dense_b,
        }
    }
}

/// Network weights plus the configuration that fixes their shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub params: ParamSet,
}

/// A client's contribution for one round: `θ_local − θ_global`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientUpdate {
    pub deltas: ParamSet,
    pub client_id: ClientId,
    pub round: u64,
    pub sample_count: usize,
}

fn glorot(rng: &mut SimRng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Builds a freshly initialized model: Glorot-uniform weights, zero biases,
/// unit BN scale. Deterministic in `seed`.
pub fn build_model(cfg: ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = crate::rng::rng_for(seed, Stream::ModelInit, &[]);
    let f = cfg.channels;
    let mut entries = Vec::new();
    let mut conv = |entries: &mut Vec<(String, Tensor)>, prefix: &str, c_in: usize, k: usize| {
        entries.push((
            format!("{prefix}.weight"),
            glorot(&mut rng, &[f, c_in, k], c_in * k, f * k),
        ));
        entries.push((format!("{prefix}.bias"), Tensor::zeros(&[f])));
    };
    let bn = |entries: &mut Vec<(String, Tensor)>, prefix: &str| {
        entries.push((format!("{prefix}.gamma"), Tensor::filled(&[f], 1.0)));
        entries.push((format!("{prefix}.beta"), Tensor::zeros(&[f])));
        entries.push((format!("{prefix}.running_mean"), Tensor::zeros(&[f])));
        entries.push((format!("{prefix}.running_var"), Tensor::filled(&[f], 1.0)));
    };
    conv(&mut entries, "branch_a.conv1", AXES, cfg.kernel_first);
    if cfg.bn_enabled {
        bn(&mut entries, "branch_a.bn1");
    }
    conv(&mut entries, "branch_a.conv2", f, cfg.kernel_second);
    if cfg.bn_enabled {
        bn(&mut entries, "branch_a.bn2");
    }
    conv(&mut entries, "branch_b.conv1", AXES, cfg.kernel_first);
    if cfg.bn_enabled {
        bn(&mut entries, "branch_b.bn1");
    }
    entries.push((
        "dense.weight".into(),
        glorot(&mut rng, &[cfg.num_classes, 2 * f], 2 * f, cfg.num_classes),
    ));
    entries.push(("dense.bias".into(), Tensor::zeros(&[cfg.num_classes])));
    Ok(ModelParams {
        config: cfg,
        params: ParamSet::new(entries),
    })
}

impl ModelParams {
    /// Count of trainable scalars (BN running statistics excluded).
    pub fn trainable_count(&self) -> usize {
        self.params
            .entries()
            .iter()
            .filter(|(n, _)| is_trainable(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.set_meta("kind", "checkpoint");
        c.set_meta("channels", self.config.channels as u64);
        c.set_meta("num_classes", self.config.num_classes as u64);
        c.set_meta("bn_enabled", self.config.bn_enabled);
        c.set_meta("kernel_first", self.config.kernel_first as u64);
        c.set_meta("kernel_second", self.config.kernel_second as u64);
        c.set_meta("input_len", self.config.input_len as u64);
        for (name, t) in self.params.entries() {
            c.push(name, t.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config = ModelConfig {
            channels: c.meta_u64("channels")? as usize,
            num_classes: c.meta_u64("num_classes")? as usize,
            bn_enabled: c.meta_bool("bn_enabled")?,
            kernel_first: c.meta_u64("kernel_first")? as usize,
            kernel_second: c.meta_u64("kernel_second")? as usize,
            input_len: c.meta_u64("input_len")? as usize,
        };
        config.validate()?;
        let template = build_model(config, 0)?;
        let params = ParamSet::new(c.tensors.clone());
        template.params.check_compatible(&params)?;
        Ok(Self { config, params })
    }
}

impl GradientUpdate {
    pub fn zeros_for(model: &ModelParams, client_id: ClientId, round: u64) -> Self {
        Self {
            deltas: ParamSet::zeros_like(&model.params),
            client_id,
            round,
            sample_count: 0,
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.set_meta("kind", "update");
        c.set_meta("client_id", self.client_id.0 as u64);
        c.set_meta("round", self.round);
        c.set_meta("sample_count", self.sample_count as u64);
        for (name, t) in self.deltas.entries() {
            c.push(name, t.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        Ok(Self {
            deltas: ParamSet::new(c.tensors.clone()),
            client_id: ClientId(c.meta_u64("client_id")? as u32),
            round: c.meta_u64("round")?,
            sample_count: c.meta_u64("sample_count")? as usize,
        })
    }
}

pub fn is_trainable(name: &str) -> bool {
    !name.ends_with(".running_mean") && !name.ends_with(".running_var")
}

/// Forward-pass mode. Train mode applies inverted dropout to the
/// concatenated feature vector and batch statistics in BN layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Eval,
    Train { dropout_rate: f64 },
}

fn check_segment(cfg: &ModelConfig, x: &Tensor) -> Result<()> {
    if x.shape() != [AXES, cfg.input_len] {
        return Err(ModelError::SegmentShape {
            got: x.shape().to_vec(),
            axes: AXES,
            len: cfg.input_len,
        });
    }
    if !x.is_finite() {
        return Err(TensorError::NonFinite { index: 0 }.into());
    }
    Ok(())
}

struct BlockCache {
    /// Block inputs are not stored here; callers keep them.
    xhat: Vec<Tensor>,
    inv_std: Vec<f64>,
    act_in: Vec<Tensor>,
    out: Vec<Tensor>,
}

struct BnUpdate {
    idx: BnIdx,
    mean: Vec<f64>,
    var: Vec<f64>,
}

fn channel_stats(zs: &[Tensor]) -> (Vec<f64>, Vec<f64>) {
    let c = zs[0].shape()[0];
    let len = zs[0].shape()[1];
    let n = (zs.len() * len) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for z in zs {
        for (ch, m) in mean.iter_mut().enumerate() {
            *m += z.row(ch).iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for z in zs {
        for ch in 0..c {
            var[ch] += z.row(ch).iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

fn normalize_channels(z: &Tensor, mean: &[f64], inv_std: &[f64]) -> Tensor {
    let len = z.shape()[1];
    let mut out = z.clone();
    for (ch, row) in out.data_mut().chunks_mut(len).enumerate() {
        for v in row {
            *v = (*v - mean[ch]) * inv_std[ch];
        }
    }
    out
}

fn affine_channels(xhat: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let len = xhat.shape()[1];
    let mut out = xhat.clone();
    for (ch, row) in out.data_mut().chunks_mut(len).enumerate() {
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for v in row {
            *v = g * *v + b;
        }
    }
    out
}

fn block_forward(
    params: &ParamSet,
    idx: BlockIdx,
    inputs: &[&Tensor],
    batch_stats: bool,
) -> Result<(BlockCache, Option<BnUpdate>)> {
    let w = params.tensor(idx.w);
    let b = params.tensor(idx.b);
    let zs = inputs
        .iter()
        .map(|x| tensor::conv1d_forward(x, w, b))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let Some(bn) = idx.bn else {
        let out = zs.iter().map(tensor::relu).collect();
        return Ok((
            BlockCache {
                xhat: Vec::new(),
                inv_std: Vec::new(),
                act_in: zs,
                out,
            },
            None,
        ));
    };
    let (gamma, beta) = (params.tensor(bn.gamma), params.tensor(bn.beta));
    let (mean, var, update) = if batch_stats {
        let (m, v) = channel_stats(&zs);
        (
            m.clone(),
            v.clone(),
            Some(BnUpdate {
                idx: bn,
                mean: m,
                var: v,
            }),
        )
    } else {
        (
            params.tensor(bn.mean).data().to_vec(),
            params.tensor(bn.var).data().to_vec(),
            None,
        )
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let xhat: Vec<Tensor> = zs.iter().map(|z| normalize_channels(z, &mean, &inv_std)).collect();
    let act_in: Vec<Tensor> = xhat.iter().map(|x| affine_channels(x, gamma, beta)).collect();
    let out = act_in.iter().map(tensor::relu).collect();
    Ok((
        BlockCache {
            xhat,
            inv_std,
            act_in,
            out,
        },
        update,
    ))
}

/// Backward through ReLU, optional BN and the convolution. Accumulates
/// parameter gradients into `grads` and returns input gradients when asked.
fn block_backward(
    params: &ParamSet,
    idx: BlockIdx,
    inputs: &[&Tensor],
    cache: &BlockCache,
    grad_out: Vec<Tensor>,
    batch_stats: bool,
    grads: &mut ParamSet,
    need_input_grad: bool,
) -> Result<Vec<Tensor>> {
    let mut dz: Vec<Tensor> = cache
        .act_in
        .iter()
        .zip(&grad_out)
        .map(|(pre, g)| tensor::relu_backward(pre, g))
        .collect();
    if let Some(bn) = idx.bn {
        let gamma = params.tensor(bn.gamma).data().to_vec();
        let c = gamma.len();
        let len = dz[0].shape()[1];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (dy, xh) in dz.iter().zip(&cache.xhat) {
            for ch in 0..c {
                for (g, x) in dy.row(ch).iter().zip(xh.row(ch)) {
                    dgamma[ch] += g * x;
                    dbeta[ch] += g;
                }
            }
        }
        let n = (dz.len() * len) as f64;
        for (i, dy) in dz.iter_mut().enumerate() {
            let xh = &cache.xhat[i];
            for ch in 0..c {
                let s = cache.inv_std[ch];
                let row = &mut dy.data_mut()[ch * len..(ch + 1) * len];
                if batch_stats {
                    // dx = γ·s/N · (N·dy − Σdy − x̂·Σ(dy·x̂))
                    let k = gamma[ch] * s / n;
                    for (g, &x) in row.iter_mut().zip(xh.row(ch)) {
                        *g = k * (n * *g - dbeta[ch] - x * dgamma[ch]);
                    }
                } else {
                    let k = gamma[ch] * s;
                    row.iter_mut().for_each(|g| *g *= k);
                }
            }
        }
        accumulate(grads.tensor_mut(bn.gamma), &dgamma);
        accumulate(grads.tensor_mut(bn.beta), &dbeta);
    }
    let w = params.tensor(idx.w);
    let mut input_grads = Vec::new();
    for (x, g) in inputs.iter().zip(&dz) {
        let (gw, gb) = if need_input_grad {
            let (gi, gw, gb) = tensor::conv1d_backward(x, w, g)?;
            input_grads.push(gi);
            (gw, gb)
        } else {
            tensor::conv1d_backward_params(x, w, g)?
        };
        accumulate(grads.tensor_mut(idx.w), gw.data());
        accumulate(grads.tensor_mut(idx.b), gb.data());
    }
    Ok(input_grads)
}

fn accumulate(dst: &mut Tensor, src: &[f64]) {
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d += s;
    }
}

fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    let mut v = a.data().to_vec();
    v.extend_from_slice(b.data());
    Tensor::from_parts(vec![v.len()], v)
}

/// Result of a batched forward/backward pass.
pub struct BatchGradient {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// Mean gradient; zero for non-trainable entries.
    pub grads: ParamSet,
    bn_updates: Vec<BnUpdate>,
}

/// Mean loss and gradient over `batch`. In train mode BN layers use batch
/// statistics and dropout masks are drawn from `rng`.
pub fn loss_and_grad(
    model: &ModelParams,
    batch: &[&DataSegment],
    mode: Mode,
    rng: &mut SimRng,
) -> Result<BatchGradient> {
    let cfg = &model.config;
    let layout = Layout::of(cfg);
    let p = &model.params;
    for seg in batch {
        check_segment(cfg, &seg.values)?;
        if seg.label >= cfg.num_classes {
            return Err(ModelError::LabelOutOfRange {
                label: seg.label,
                classes: cfg.num_classes,
            });
        }
    }
    let batch_stats = matches!(mode, Mode::Train { .. });
    let dropout = match mode {
        Mode::Train { dropout_rate } => dropout_rate,
        Mode::Eval => 0.0,
    };
    let xs: Vec<&Tensor> = batch.iter().map(|s| &s.values).collect();
    let (a1, u1) = block_forward(p, layout.a1, &xs, batch_stats)?;
    let h1: Vec<&Tensor> = a1.out.iter().collect();
    let (a2, u2) = block_forward(p, layout.a2, &h1, batch_stats)?;
    let (b1, u3) = block_forward(p, layout.b1, &xs, batch_stats)?;

    let f = cfg.channels;
    let len = cfg.input_len;
    let scale = 1.0 / batch.len() as f64;
    let mut grads = ParamSet::zeros_like(p);
    let mut loss = 0.0;
    let mut dh2 = Vec::with_capacity(batch.len());
    let mut dhb = Vec::with_capacity(batch.len());
    let dense_w = p.tensor(layout.dense_w);
    let dense_b = p.tensor(layout.dense_b);
    for i in 0..batch.len() {
        let feat = concat(&tensor::gap(&a2.out[i])?, &tensor::gap(&b1.out[i])?);
        let mask: Option<Vec<f64>> = (dropout > 0.0).then(|| {
            let keep = 1.0 - dropout;
            (0..2 * f)
                .map(|_| if rng.random::<f64>() < dropout { 0.0 } else { 1.0 / keep })
                .collect()
        });
        let dropped = match &mask {
            Some(m) => Tensor::from_parts(vec![2 * f], feat.data().iter().zip(m).map(|(x, k)| x * k).collect()),
            None => feat,
        };
        let logits = tensor::dense_forward(&dropped, dense_w, dense_b)?;
        let (l, mut dlogits) = tensor::softmax_cross_entropy(&logits, batch[i].label)?;
        loss += l * scale;
        dlogits.data_mut().iter_mut().for_each(|g| *g *= scale);
        let (dfeat, dw, db) = tensor::dense_backward(&dropped, dense_w, &dlogits)?;
        accumulate(grads.tensor_mut(layout.dense_w), dw.data());
        accumulate(grads.tensor_mut(layout.dense_b), db.data());
        let mut dfeat = dfeat.into_data();
        if let Some(m) = &mask {
            dfeat.iter_mut().zip(m).for_each(|(g, k)| *g *= k);
        }
        dh2.push(tensor::gap_backward(
            &Tensor::from_parts(vec![f], dfeat[..f].to_vec()),
            len,
        )?);
        dhb.push(tensor::gap_backward(
            &Tensor::from_parts(vec![f], dfeat[f..].to_vec()),
            len,
        )?);
    }
    let dh1 = block_backward(p, layout.a2, &h1, &a2, dh2, batch_stats, &mut grads, true)?;
    block_backward(p, layout.a1, &xs, &a1, dh1, batch_stats, &mut grads, false)?;
    block_backward(p, layout.b1, &xs, &b1, dhb, batch_stats, &mut grads, false)?;

    let bn_updates = [u1, u2, u3].into_iter().flatten().collect();
    Ok(BatchGradient {
        loss,
        grads,
        bn_updates,
    })
}

fn block_eval(p: &ParamSet, idx: BlockIdx, x: &Tensor) -> Result<Tensor> {
    let (cache, _) = block_forward(p, idx, &[x], false)?;
    Ok(cache.out.into_iter().next().expect("one output per input"))
}

/// Logits for one `[3, L]` segment.
pub fn forward(model: &ModelParams, segment: &Tensor, mode: Mode, rng: &mut SimRng) -> Result<Tensor> {
    let cfg = &model.config;
    check_segment(cfg, segment)?;
    let layout = Layout::of(cfg);
    let p = &model.params;
    let (h2, hb) = match mode {
        Mode::Eval => {
            let h1 = block_eval(p, layout.a1, segment)?;
            (block_eval(p, layout.a2, &h1)?, block_eval(p, layout.b1, segment)?)
        }
        Mode::Train { .. } => {
            let (a1, _) = block_forward(p, layout.a1, &[segment], true)?;
            let (a2, _) = block_forward(p, layout.a2, &[&a1.out[0]], true)?;
            let (b1, _) = block_forward(p, layout.b1, &[segment], true)?;
            (a2.out[0].clone(), b1.out[0].clone())
        }
    };
    let mut feat = concat(&tensor::gap(&h2)?, &tensor::gap(&hb)?);
    if let Mode::Train { dropout_rate } = mode {
        if dropout_rate > 0.0 {
            let keep = 1.0 - dropout_rate;
            for v in feat.data_mut() {
                *v = if rng.random::<f64>() < dropout_rate {
                    0.0
                } else {
                    *v / keep
                };
            }
        }
    }
    Ok(tensor::dense_forward(
        &feat,
        p.tensor(layout.dense_w),
        p.tensor(layout.dense_b),
    )?)
}

/// Eval-mode cross-entropy of a single labelled segment.
pub fn sample_loss(model: &ModelParams, segment: &Tensor, label: usize) -> Result<f64> {
    let mut rng = SimRng::seed_from_u64(0);
    let logits = forward(model, segment, Mode::Eval, &mut rng)?;
    Ok(tensor::softmax_cross_entropy(&logits, label)?.0)
}

/// Signs of every ReLU pre-activation in eval mode. Two parameter vectors
/// with the same pattern lie on the same linear piece of the network, which
/// is what finite-difference checks need to know.
pub fn relu_pattern(model: &ModelParams, segment: &Tensor) -> Result<Vec<bool>> {
    check_segment(&model.config, segment)?;
    let layout = Layout::of(&model.config);
    let p = &model.params;
    let (a1, _) = block_forward(p, layout.a1, &[segment], false)?;
    let (a2, _) = block_forward(p, layout.a2, &[&a1.out[0]], false)?;
    let (b1, _) = block_forward(p, layout.b1, &[segment], false)?;
    Ok([&a1, &a2, &b1]
        .iter()
        .flat_map(|c| c.act_in[0].data().iter().map(|&v| v > 0.0))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub client_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub optimizer: Optimizer,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Drives shuffling and dropout masks. Set per client and round by the
    /// simulator, so it is not part of the config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            client_lr: 0.005,
            epochs: 1,
            batch_size: 128,
            dropout_rate: 0.4,
            optimizer: Optimizer::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.client_lr > 0.0 && self.client_lr.is_finite()) {
            return Err(ModelError::InvalidTrainConfig(format!(
                "client_lr must be positive, got {}",
                self.client_lr
            )));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidTrainConfig("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidTrainConfig(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.client_lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Outcome of a client's local training.
#[derive(Debug, Clone)]
pub struct LocalTraining {
    pub deltas: ParamSet,
    pub sample_count: usize,
    /// Mean train-mode batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

impl LocalTraining {
    pub fn into_update(self, client_id: ClientId, round: u64) -> GradientUpdate {
        GradientUpdate {
            deltas: self.deltas,
            client_id,
            round,
            sample_count: self.sample_count,
        }
    }
}

/// Mini-batch training from `global` for `cfg.epochs` passes over shuffled
/// data. Returns `θ_local − θ_global`; `global` is not touched.
pub fn local_train(global: &ModelParams, data: &[&DataSegment], cfg: &TrainConfig) -> Result<LocalTraining> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(LocalTraining {
            deltas: ParamSet::zeros_like(&global.params),
            sample_count: data.len(),
            epoch_losses: Vec::new(),
        });
    }
    if data.is_empty() {
        return Err(ModelError::EmptyTrainingData { epochs: cfg.epochs });
    }
    let mut local = global.clone();
    let mut rng = SimRng::seed_from_u64(derive_seed(cfg.seed, Stream::Training, &[]));
    let trainable: Vec<bool> = local.params.entries().iter().map(|(n, _)| is_trainable(n)).collect();
    let mut adam: Vec<AdamState> = local
        .params
        .entries()
        .iter()
        .map(|(_, t)| AdamState::new(t.shape()))
        .collect();
    let adam_cfg = cfg.adam();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mode = Mode::Train {
        dropout_rate: cfg.dropout_rate,
    };
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&DataSegment> = chunk.iter().map(|&i| data[i]).collect();
            let out = loss_and_grad(&local, &batch, mode, &mut rng)?;
            epoch_loss += out.loss * chunk.len() as f64;
            for (i, &train) in trainable.iter().enumerate() {
                if !train {
                    continue;
                }
                match cfg.optimizer {
                    Optimizer::Adam => tensor::adam_update_in_place(
                        local.params.tensor_mut(i),
                        out.grads.tensor(i),
                        &mut adam[i],
                        &adam_cfg,
                    )?,
                    Optimizer::Sgd => {
                        let g = out.grads.tensor(i).data().to_vec();
                        for (p, g) in local.params.tensor_mut(i).data_mut().iter_mut().zip(g) {
                            *p -= cfg.client_lr * g;
                        }
                    }
                }
            }
            for u in out.bn_updates {
                blend(local.params.tensor_mut(u.idx.mean), &u.mean);
                blend(local.params.tensor_mut(u.idx.var), &u.var);
            }
        }
        epoch_losses.push(epoch_loss / data.len() as f64);
    }
    Ok(LocalTraining {
        deltas: local.params.sub(&global.params)?,
        sample_count: data.len(),
        epoch_losses,
    })
}

fn blend(running: &mut Tensor, batch: &[f64]) {
    for (r, b) in running.data_mut().iter_mut().zip(batch) {
        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
    }
}

/// Per-class confusion counts and derived scores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScores {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub loss: f64,
    pub per_class: Vec<ClassScores>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Macro-averaged scores over all `classes`; a class that is never present
/// and never predicted contributes zeros.
pub fn classification_report(preds: &[usize], labels: &[usize], classes: usize, loss: f64) -> EvalReport {
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let tp = preds.iter().zip(labels).filter(|(&p, &l)| p == c && l == c).count();
        let fp = preds.iter().zip(labels).filter(|(&p, &l)| p == c && l != c).count();
        let fn_ = preds.iter().zip(labels).filter(|(&p, &l)| p != c && l == c).count();
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassScores {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        });
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let k = classes as f64;
    EvalReport {
        accuracy: ratio(correct, labels.len()),
        macro_precision: per_class.iter().map(|c| c.precision).sum::<f64>() / k,
        macro_recall: per_class.iter().map(|c| c.recall).sum::<f64>() / k,
        macro_f1: per_class.iter().map(|c| c.f1).sum::<f64>() / k,
        loss,
        per_class,
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) },
        )
        .0
}

/// Eval-mode accuracy, macro precision/recall/F1 and mean loss.
pub fn evaluate(model: &ModelParams, data: &[DataSegment]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(ModelError::EmptyEvalData);
    }
    let mut rng = SimRng::seed_from_u64(0);
    let mut preds = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    let mut loss = 0.0;
    for seg in data {
        let logits = forward(model, &seg.values, Mode::Eval, &mut rng)?;
        let (l, _) = tensor::softmax_cross_entropy(&logits, seg.label).map_err(|_| ModelError::LabelOutOfRange {
            label: seg.label,
            classes: model.config.num_classes,
        })?;
        loss += l;
        preds.push(argmax(logits.data()));
        labels.push(seg.label);
    }
    Ok(classification_report(
        &preds,
        &labels,
        model.config.num_classes,
        loss / data.len() as f64,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn random_segment(rng: &mut SimRng, label: usize) -> DataSegment {
        let n = Normal::new(0.0, 0.5).unwrap();
        let data = (0..300).map(|_| n.sample(rng)).collect();
        DataSegment::new(Tensor::new(vec![3, 100], data).unwrap(), label, 20)
    }

    #[test]
    fn parameter_count_closed_form() {
        let m = build_model(ModelConfig::new(8, 5, false), 1).unwrap();
        assert_eq!(m.params.num_values(), 861);
        assert_eq!(m.trainable_count(), 861);
        assert_eq!(m.params.get("dense.bias").unwrap().len(), 5);
        let bn = build_model(ModelConfig::new(8, 5, true), 1).unwrap();
        assert_eq!(bn.trainable_count(), 861 + 3 * 16);
    }

    #[test]
    fn build_is_deterministic_and_validated() {
        let cfg = ModelConfig::new(32, 5, false);
        assert_eq!(build_model(cfg, 9).unwrap(), build_model(cfg, 9).unwrap());
        assert_ne!(build_model(cfg, 9).unwrap(), build_model(cfg, 10).unwrap());
        assert!(matches!(
            build_model(ModelConfig::new(0, 5, false), 1),
            Err(ModelError::InvalidChannels(0))
        ));
        let m = build_model(cfg, 3).unwrap();
        let limit = (6.0f64 / (3.0 * 9.0 + 32.0 * 9.0)).sqrt();
        assert!(m
            .params
            .get("branch_a.conv1.weight")
            .unwrap()
            .data()
            .iter()
            .all(|v| v.abs() <= limit));
        assert!(m
            .params
            .get("branch_a.conv1.bias")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn forward_modes() {
        let m = build_model(ModelConfig::new(4, 5, false), 2).unwrap();
        let mut rng = SimRng::seed_from_u64(5);
        let seg = random_segment(&mut rng, 0);
        let a = forward(&m, &seg.values, Mode::Eval, &mut rng).unwrap();
        let b = forward(&m, &seg.values, Mode::Eval, &mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[5]);
        let c = forward(&m, &seg.values, Mode::Train { dropout_rate: 0.0 }, &mut rng).unwrap();
        assert_eq!(a, c);
        let bad = Tensor::zeros(&[3, 99]);
        assert!(matches!(
            forward(&m, &bad, Mode::Eval, &mut rng),
            Err(ModelError::SegmentShape { .. })
        ));
    }

    #[test]
    fn zero_model_outputs_bias() {
        let mut m = build_model(ModelConfig::new(4, 5, false), 2).unwrap();
        m.params.values_mut().for_each(|v| *v = 0.0);
        let bias = [0.1, -0.2, 0.3, 0.0, 0.5];
        m.params
            .get_mut("dense.bias")
            .unwrap()
            .data_mut()
            .copy_from_slice(&bias);
        let mut rng = SimRng::seed_from_u64(0);
        let out = forward(&m, &Tensor::zeros(&[3, 100]), Mode::Eval, &mut rng).unwrap();
        assert_eq!(out.data(), &bias);
    }

    #[test]
    fn local_train_zero_epochs_and_errors() {
        let m = build_model(ModelConfig::new(4, 5, false), 2).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = local_train(&m, &[], &cfg).unwrap();
        assert!(out.deltas.values().all(|v| v == 0.0));
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(
            local_train(&m, &[], &cfg),
            Err(ModelError::EmptyTrainingData { epochs: 1 })
        ));
        let mut rng = SimRng::seed_from_u64(1);
        let seg = random_segment(&mut rng, 7);
        assert!(matches!(
            local_train(&m, &[&seg], &cfg),
            Err(ModelError::LabelOutOfRange { label: 7, .. })
        ));
    }

    #[test]
    fn bn_model_trains_and_updates_running_stats() {
        let m = build_model(ModelConfig::new(4, 3, true), 2).unwrap();
        let mut rng = SimRng::seed_from_u64(3);
        let data: Vec<DataSegment> = (0..12).map(|i| random_segment(&mut rng, i % 3)).collect();
        let refs: Vec<&DataSegment> = data.iter().collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let out = local_train(&m, &refs, &cfg).unwrap();
        assert!(out.deltas.is_finite());
        let rm = out.deltas.get("branch_a.bn1.running_mean").unwrap();
        assert!(rm.data().iter().any(|&v| v != 0.0));
    }

    /// Train-mode BN backward against central differences of the batch loss.
    #[test]
    fn bn_batch_gradient_matches_finite_differences() {
        let m = build_model(ModelConfig::new(2, 3, true), 4).unwrap();
        let mut rng = SimRng::seed_from_u64(11);
        let data: Vec<DataSegment> = (0..3).map(|i| random_segment(&mut rng, i)).collect();
        let refs: Vec<&DataSegment> = data.iter().collect();
        let mode = Mode::Train { dropout_rate: 0.0 };
        let g = loss_and_grad(&m, &refs, mode, &mut rng).unwrap();
        let h = 1e-6;
        for name in [
            "branch_a.bn1.gamma",
            "branch_a.bn2.beta",
            "branch_b.conv1.weight",
            "branch_a.conv1.bias",
        ] {
            let n = m.params.get(name).unwrap().len();
            for j in 0..n.min(6) {
                let mut plus = m.clone();
                plus.params.get_mut(name).unwrap().data_mut()[j] += h;
                let mut minus = m.clone();
                minus.params.get_mut(name).unwrap().data_mut()[j] -= h;
                let lp = loss_and_grad(&plus, &refs, mode, &mut rng).unwrap().loss;
                let lm = loss_and_grad(&minus, &refs, mode, &mut rng).unwrap().loss;
                let fd = (lp - lm) / (2.0 * h);
                let an = g.grads.get(name).unwrap().data()[j];
                assert!(
                    (fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-3),
                    "{name}[{j}]: fd={fd} analytic={an}"
                );
            }
        }
    }

    #[test]
    fn toy_confusion_matrix() {
        // positive class = 1: TP=3 FP=1 FN=1 TN=5
        let preds = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
        let labels = [1, 1, 1, 0, 1, 0, 0, 0, 0, 0];
        let r = classification_report(&preds, &labels, 2, 0.0);
        assert_eq!(r.per_class[1].precision, 0.75);
        assert_eq!(r.per_class[1].recall, 0.75);
        assert!((r.accuracy - 0.8).abs() < 1e-15);
    }

    #[test]
    fn constant_predictor_on_balanced_classes() {
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let r = classification_report(&[2; 50], &labels, 5, 0.0);
        assert!((r.accuracy - 0.2).abs() < 1e-15);
        let r = classification_report(&labels, &labels, 5, 0.0);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
        // class 4 absent from labels and predictions → zeros in the average
        let r = classification_report(&[0, 1], &[0, 1], 5, 0.0);
        assert!((r.macro_recall - 0.4).abs() < 1e-15);
    }

    #[test]
    fn evaluate_rejects_empty() {
        let m = build_model(ModelConfig::new(4, 5, false), 2).unwrap();
        assert!(matches!(evaluate(&m, &[]), Err(ModelError::EmptyEvalData)));
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let m = build_model(ModelConfig::new(4, 5, true), 2).unwrap();
        let bytes = m.to_container().to_bytes();
        let back = ModelParams::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
        let bits = |p: &ModelParams| p.params.values().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
    }
}
