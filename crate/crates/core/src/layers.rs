//! Layer specifications and their execution on a tape.
//!
//! Seven kinds commute with a global phase rotation `e^{iθ}` and are the only
//! ones allowed in a processing stack: bias-free convolution, the δ
//! nonlinearity, complex normalization, magnitude max-pooling, average
//! pooling, complex dropout and skip connections built from those. The real
//! kinds (convolution with bias, ReLU, batch norm, fully connected, max-pool,
//! softmax) are for the client-side stacks.

use std::f64::consts::TAU;

use crate::autodiff::{NormStats, ParamId, ParamStore, Tape, Value, Var};
use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::{ComplexTensor, Scalar, Tensor};

/// Floor for a channelwise δ threshold so an all-zero channel stays finite.
const MIN_THRESHOLD: f64 = 1e-6;
/// Stability constant inside the square root of complex normalization.
pub const NORM_EPS: f64 = 1e-8;
const BN_EPS: f64 = 1e-5;
/// Weight on the previous value in running statistics.
pub const RUNNING_DECAY: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeltaMode {
    /// One threshold `c` for every element.
    Fixed(f64),
    /// Per-channel `c_k`: the mean modulus of the layer input in training,
    /// a running average of it at inference.
    Channelwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    ConvNoBias,
    Delta,
    ComplexNorm,
    MagMaxPool,
    AvgPool,
    ComplexDropout,
    Skip,
    RealConv,
    RealRelu,
    RealBn,
    RealFc,
    RealMaxPool,
    Softmax,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::ConvNoBias => "conv_nobias",
            LayerKind::Delta => "delta",
            LayerKind::ComplexNorm => "complex_norm",
            LayerKind::MagMaxPool => "mag_maxpool",
            LayerKind::AvgPool => "avgpool",
            LayerKind::ComplexDropout => "complex_dropout",
            LayerKind::Skip => "skip",
            LayerKind::RealConv => "real_conv",
            LayerKind::RealRelu => "real_relu",
            LayerKind::RealBn => "real_bn",
            LayerKind::RealFc => "real_fc",
            LayerKind::RealMaxPool => "real_maxpool",
            LayerKind::Softmax => "softmax",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    ConvNoBias { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize },
    Delta { mode: DeltaMode, channels: usize },
    ComplexNorm { channels: usize },
    MagMaxPool { window: usize, stride: usize },
    AvgPool { window: usize, stride: usize },
    ComplexDropout { p: f64 },
    /// `shortcut(f) + inner(f)`; an empty shortcut is the identity.
    Skip { inner: Vec<LayerSpec>, shortcut: Vec<LayerSpec> },
    RealConv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, bias: bool },
    RealRelu,
    RealBn { channels: usize },
    /// Flattens its input to (N, in_features) first.
    RealFc { in_features: usize, out_features: usize },
    RealMaxPool { window: usize, stride: usize },
    /// Marks the class-score output; the forward pass returns logits and the
    /// softmax itself lives in the loss and in [`softmax`].
    Softmax,
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::ConvNoBias { .. } => LayerKind::ConvNoBias,
            LayerSpec::Delta { .. } => LayerKind::Delta,
            LayerSpec::ComplexNorm { .. } => LayerKind::ComplexNorm,
            LayerSpec::MagMaxPool { .. } => LayerKind::MagMaxPool,
            LayerSpec::AvgPool { .. } => LayerKind::AvgPool,
            LayerSpec::ComplexDropout { .. } => LayerKind::ComplexDropout,
            LayerSpec::Skip { .. } => LayerKind::Skip,
            LayerSpec::RealConv { .. } => LayerKind::RealConv,
            LayerSpec::RealRelu => LayerKind::RealRelu,
            LayerSpec::RealBn { .. } => LayerKind::RealBn,
            LayerSpec::RealFc { .. } => LayerKind::RealFc,
            LayerSpec::RealMaxPool { .. } => LayerKind::RealMaxPool,
            LayerSpec::Softmax => LayerKind::Softmax,
        }
    }

    /// True for kinds that commute with a global phase rotation. A skip is
    /// certified only if everything inside it is.
    pub fn is_certified(&self) -> bool {
        match self {
            LayerSpec::Skip { inner, shortcut } => {
                inner.iter().chain(shortcut).all(LayerSpec::is_certified)
            }
            s => matches!(
                s.kind(),
                LayerKind::ConvNoBias
                    | LayerKind::Delta
                    | LayerKind::ComplexNorm
                    | LayerKind::MagMaxPool
                    | LayerKind::AvgPool
                    | LayerKind::ComplexDropout
            ),
        }
    }

    /// Output shape for an (N, C, H, W) input (or (N, F) after a dense layer).
    pub fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let four = |op: &'static str| -> Result<(usize, usize, usize, usize)> {
            match input {
                &[n, c, h, w] => Ok((n, c, h, w)),
                _ => Err(shape_err(op, format!("expects 4-D input, got {input:?}"))),
            }
        };
        let conv = |in_ch: usize, out_ch: usize, k: usize, s: usize, p: usize, op: &'static str| -> Result<Vec<usize>> {
            let (n, c, h, w) = four(op)?;
            if c != in_ch {
                return Err(shape_err(op, format!("expects {in_ch} channels, got {c}")));
            }
            if h + 2 * p < k || w + 2 * p < k || s == 0 {
                return Err(shape_err(op, format!("kernel {k} does not fit {h}x{w} with pad {p}")));
            }
            Ok(vec![n, out_ch, (h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1])
        };
        let pool = |win: usize, s: usize, op: &'static str| -> Result<Vec<usize>> {
            let (n, c, h, w) = four(op)?;
            if win == 0 || s == 0 || win > h || win > w {
                return Err(shape_err(op, format!("window {win} does not fit {h}x{w}")));
            }
            Ok(vec![n, c, (h - win) / s + 1, (w - win) / s + 1])
        };
        let channels = |ch: usize, op: &'static str| -> Result<Vec<usize>> {
            match input.get(1) {
                Some(&c) if c == ch => Ok(input.to_vec()),
                _ => Err(shape_err(op, format!("expects {ch} channels, got {input:?}"))),
            }
        };
        match self {
            LayerSpec::ConvNoBias { in_ch, out_ch, kernel, stride, pad } => {
                conv(*in_ch, *out_ch, *kernel, *stride, *pad, "conv_nobias")
            }
            LayerSpec::RealConv { in_ch, out_ch, kernel, stride, pad, .. } => {
                conv(*in_ch, *out_ch, *kernel, *stride, *pad, "real_conv")
            }
            LayerSpec::Delta { mode: DeltaMode::Channelwise, channels: ch } => channels(*ch, "delta"),
            LayerSpec::ComplexNorm { channels: ch } => channels(*ch, "complex_norm"),
            LayerSpec::RealBn { channels: ch } => channels(*ch, "real_bn"),
            LayerSpec::MagMaxPool { window, stride } => pool(*window, *stride, "mag_maxpool"),
            LayerSpec::AvgPool { window, stride } => pool(*window, *stride, "avgpool"),
            LayerSpec::RealMaxPool { window, stride } => pool(*window, *stride, "real_maxpool"),
            LayerSpec::RealFc { in_features, out_features } => {
                let n = input.first().copied().unwrap_or(0);
                let f: usize = input.iter().skip(1).product();
                if f != *in_features {
                    return Err(shape_err("real_fc", format!("expects {in_features} features, got {input:?}")));
                }
                Ok(vec![n, *out_features])
            }
            LayerSpec::Skip { inner, shortcut } => {
                let a = chain_shape(inner, input)?;
                let b = chain_shape(shortcut, input)?;
                if a != b {
                    return Err(shape_err("skip", format!("branch shapes {a:?} and {b:?} differ")));
                }
                Ok(a)
            }
            LayerSpec::Delta { .. } | LayerSpec::ComplexDropout { .. } | LayerSpec::RealRelu | LayerSpec::Softmax => {
                Ok(input.to_vec())
            }
        }
    }
}

/// Output shape after applying `layers` in order.
pub fn chain_shape(layers: &[LayerSpec], input: &[usize]) -> Result<Vec<usize>> {
    layers.iter().try_fold(input.to_vec(), |s, l| l.out_shape(&s))
}

/// Row-wise softmax of (N, C) logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let n = logits.batch().max(1);
    let cols = logits.len() / n;
    Tensor::new(logits.shape().to_vec(), crate::autodiff::softmax_rows(logits.data(), cols))
        .expect("same length")
}

/// Per-call state for a forward pass.
pub struct Ctx<'a, T> {
    pub mode: Mode,
    /// Source of dropout masks; required in training mode when a dropout
    /// layer with `p > 0` is present.
    pub rng: Option<&'a mut Rng>,
    /// Bind parameters as constants so no gradient reaches them.
    pub detach: bool,
    updates: Vec<(ParamId, Tensor<T>)>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(mode: Mode) -> Self {
        Self { mode, rng: None, detach: false, updates: Vec::new() }
    }

    pub fn with_rng(mut self, rng: &'a mut Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    pub fn detached(mut self) -> Self {
        self.detach = true;
        self
    }

    /// Pending running-statistic updates gathered during training.
    pub fn pending_updates(&self) -> usize {
        self.updates.len()
    }

    /// Writes running statistics gathered in training mode into `store`.
    /// Call after any backward pass that uses the same tape.
    pub fn commit(&mut self, store: &mut ParamStore<T>) {
        for (id, v) in self.updates.drain(..) {
            *store.value_mut(id) = v;
        }
    }
}

/// An ordered stack of layers whose parameters are named `{prefix}.{i}.…`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    prefix: String,
    layers: Vec<LayerSpec>,
}

impl Sequential {
    pub fn new(prefix: impl Into<String>, layers: Vec<LayerSpec>) -> Self {
        Self { prefix: prefix.into(), layers }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn is_certified(&self) -> bool {
        self.layers.iter().all(LayerSpec::is_certified)
    }

    /// First layer that may not appear in a processing stack.
    pub fn first_uncertified(&self) -> Option<(usize, LayerKind)> {
        self.layers.iter().enumerate().find(|(_, l)| !l.is_certified()).map(|(i, l)| (i, l.kind()))
    }

    pub fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        chain_shape(&self.layers, input)
    }

    /// Adds freshly initialized parameters to `store`: Kaiming-normal weights
    /// (variance 2 / fan-in), zero biases, unit scales.
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        init_layers(&self.layers, &self.prefix, store, rng)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        ctx: &mut Ctx<'_, T>,
    ) -> Result<Var> {
        forward_layers(&self.layers, &self.prefix, tape, store, x, ctx)
    }

    /// Convenience: evaluates the stack on a constant input without recording
    /// gradients.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: Value<T>, ctx: &mut Ctx<'_, T>) -> Result<Value<T>> {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = self.forward(&mut tape, store, v, ctx)?;
        Ok(tape.value(y).clone())
    }
}

fn name(prefix: &str, i: usize, leaf: &str) -> String {
    format!("{prefix}.{i}.{leaf}")
}

fn kaiming<T: Scalar>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    gaussian_init(rng, shape, 2.0 / fan_in.max(1) as f64)
}

/// Variance `1/fan_in`: δ keeps large magnitudes intact instead of halving
/// the signal like a ReLU, so the ReLU gain of 2 would grow it layer by layer.
fn lecun<T: Scalar>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    gaussian_init(rng, shape, 1.0 / fan_in.max(1) as f64)
}

fn gaussian_init<T: Scalar>(rng: &mut Rng, shape: &[usize], var: f64) -> Tensor<T> {
    let std = var.sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gaussian() * std))
}

fn init_layers<T: Scalar>(layers: &[LayerSpec], prefix: &str, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
    for (i, layer) in layers.iter().enumerate() {
        match layer {
            LayerSpec::ConvNoBias { in_ch, out_ch, kernel, .. } => {
                let fan = in_ch * kernel * kernel;
                store.add(name(prefix, i, "weight"), lecun(rng, &[*out_ch, *in_ch, *kernel, *kernel], fan), true)?;
            }
            LayerSpec::RealConv { in_ch, out_ch, kernel, bias, .. } => {
                let fan = in_ch * kernel * kernel;
                store.add(name(prefix, i, "weight"), kaiming(rng, &[*out_ch, *in_ch, *kernel, *kernel], fan), true)?;
                if *bias {
                    store.add(name(prefix, i, "bias"), Tensor::zeros(&[*out_ch]), true)?;
                }
            }
            LayerSpec::RealFc { in_features, out_features } => {
                store.add(name(prefix, i, "weight"), kaiming(rng, &[*out_features, *in_features], *in_features), true)?;
                store.add(name(prefix, i, "bias"), Tensor::zeros(&[*out_features]), true)?;
            }
            LayerSpec::RealBn { channels } => {
                store.add(name(prefix, i, "gamma"), Tensor::ones(&[*channels]), true)?;
                store.add(name(prefix, i, "beta"), Tensor::zeros(&[*channels]), true)?;
                store.add(name(prefix, i, "running_mean"), Tensor::zeros(&[*channels]), false)?;
                store.add(name(prefix, i, "running_var"), Tensor::ones(&[*channels]), false)?;
            }
            LayerSpec::ComplexNorm { channels } => {
                store.add(name(prefix, i, "running_sq"), Tensor::ones(&[*channels]), false)?;
            }
            LayerSpec::Delta { mode: DeltaMode::Channelwise, channels } => {
                store.add(name(prefix, i, "running_c"), Tensor::ones(&[*channels]), false)?;
            }
            LayerSpec::Delta { mode: DeltaMode::Fixed(c), .. } => {
                if !(*c > 0.0) {
                    return Err(Error::InvalidArgument(format!("delta threshold must be positive, got {c}")));
                }
            }
            LayerSpec::ComplexDropout { p } => {
                if !(0.0..1.0).contains(p) {
                    return Err(Error::InvalidArgument(format!("dropout p must be in [0, 1), got {p}")));
                }
            }
            LayerSpec::Skip { inner, shortcut } => {
                init_layers(inner, &format!("{prefix}.{i}.inner"), store, rng)?;
                init_layers(shortcut, &format!("{prefix}.{i}.shortcut"), store, rng)?;
            }
            LayerSpec::MagMaxPool { .. }
            | LayerSpec::AvgPool { .. }
            | LayerSpec::RealRelu
            | LayerSpec::RealMaxPool { .. }
            | LayerSpec::Softmax => {}
        }
    }
    Ok(())
}

fn lookup<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<ParamId> {
    store.find(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
}

fn bind<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, ctx: &Ctx<'_, T>, name: &str) -> Result<Var> {
    let id = lookup(store, name)?;
    Ok(if ctx.detach { tape.param_detached(store, id) } else { tape.param(store, id) })
}

fn running_update<T: Scalar>(old: &Tensor<T>, batch: &[T]) -> Tensor<T> {
    let d = T::lit(RUNNING_DECAY);
    Tensor::new(
        old.shape().to_vec(),
        old.data().iter().zip(batch).map(|(&o, &b)| d * o + (T::one() - d) * b).collect(),
    )
    .expect("same length")
}

/// Mean modulus per channel of an (N, C, ...) complex tensor.
pub fn channel_mean_modulus<T: Scalar>(z: &ComplexTensor<T>) -> Result<Vec<T>> {
    let (n, c, plane) = match z.shape() {
        [n, c, rest @ ..] => (*n, *c, rest.iter().product::<usize>()),
        s => return Err(shape_err("delta", format!("channelwise threshold needs (N, C, ...), got {s:?}"))),
    };
    let mut acc = vec![T::zero(); c];
    for (i, (&a, &b)) in z.re().data().iter().zip(z.im().data()).enumerate() {
        acc[(i / plane) % c] += a.hypot(b);
    }
    let m = T::from((n * plane).max(1)).unwrap();
    Ok(acc.into_iter().map(|s| s / m).collect())
}

fn forward_layers<T: Scalar>(
    layers: &[LayerSpec],
    prefix: &str,
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    mut x: Var,
    ctx: &mut Ctx<'_, T>,
) -> Result<Var> {
    for (i, layer) in layers.iter().enumerate() {
        x = match layer {
            LayerSpec::ConvNoBias { stride, pad, .. } => {
                let w = bind(tape, store, ctx, &name(prefix, i, "weight"))?;
                tape.conv2d(x, w, None, *stride, *pad)?
            }
            LayerSpec::RealConv { stride, pad, bias, .. } => {
                let w = bind(tape, store, ctx, &name(prefix, i, "weight"))?;
                let b = if *bias { Some(bind(tape, store, ctx, &name(prefix, i, "bias"))?) } else { None };
                tape.conv2d(x, w, b, *stride, *pad)?
            }
            LayerSpec::Delta { mode: DeltaMode::Fixed(c), .. } => tape.delta(x, &[T::lit(*c)])?,
            LayerSpec::Delta { mode: DeltaMode::Channelwise, .. } => {
                let id = lookup(store, &name(prefix, i, "running_c"))?;
                let cs = match ctx.mode {
                    Mode::Train => {
                        let batch = channel_mean_modulus(tape.complex_value(x)?)?;
                        ctx.updates.push((id, running_update(store.value(id), &batch)));
                        batch
                    }
                    Mode::Eval => store.value(id).data().to_vec(),
                };
                let floor = T::lit(MIN_THRESHOLD);
                let cs: Vec<T> = cs.into_iter().map(|c| c.max(floor)).collect();
                tape.delta(x, &cs)?
            }
            LayerSpec::ComplexNorm { .. } => {
                let id = lookup(store, &name(prefix, i, "running_sq"))?;
                let stats = match ctx.mode {
                    Mode::Train => NormStats::Batch,
                    Mode::Eval => NormStats::Fixed(store.value(id).data().to_vec()),
                };
                let (y, batch) = tape.complex_norm(x, stats, T::lit(NORM_EPS))?;
                if let Some(ms) = batch {
                    ctx.updates.push((id, running_update(store.value(id), &ms)));
                }
                y
            }
            LayerSpec::RealBn { .. } => {
                let gamma = bind(tape, store, ctx, &name(prefix, i, "gamma"))?;
                let beta = bind(tape, store, ctx, &name(prefix, i, "beta"))?;
                let mid = lookup(store, &name(prefix, i, "running_mean"))?;
                let vid = lookup(store, &name(prefix, i, "running_var"))?;
                let stats = match ctx.mode {
                    Mode::Train => NormStats::Batch,
                    Mode::Eval => {
                        let mut s = store.value(mid).data().to_vec();
                        s.extend_from_slice(store.value(vid).data());
                        NormStats::Fixed(s)
                    }
                };
                let (y, batch) = tape.batch_norm(x, gamma, beta, stats, T::lit(BN_EPS))?;
                if let Some((mean, var)) = batch {
                    ctx.updates.push((mid, running_update(store.value(mid), &mean)));
                    ctx.updates.push((vid, running_update(store.value(vid), &var)));
                }
                y
            }
            LayerSpec::MagMaxPool { window, stride } => tape.mag_maxpool(x, *window, *stride)?,
            LayerSpec::AvgPool { window, stride } => tape.avgpool(x, *window, *window, *stride)?,
            LayerSpec::RealMaxPool { window, stride } => tape.maxpool(x, *window, *stride)?,
            LayerSpec::ComplexDropout { p } => {
                if ctx.mode == Mode::Eval || *p == 0.0 {
                    x
                } else {
                    let rng = ctx
                        .rng
                        .as_deref_mut()
                        .ok_or_else(|| Error::InvalidArgument("training-mode dropout needs an rng".into()))?;
                    let keep = 1.0 - p;
                    let scale = T::lit(1.0 / keep);
                    let mask = Tensor::from_fn(tape.value(x).shape(), |_| {
                        if rng.bernoulli(keep) {
                            scale
                        } else {
                            T::zero()
                        }
                    });
                    tape.mask(x, mask)?
                }
            }
            LayerSpec::Skip { inner, shortcut } => {
                let a = forward_layers(inner, &format!("{prefix}.{i}.inner"), tape, store, x, ctx)?;
                let b = forward_layers(shortcut, &format!("{prefix}.{i}.shortcut"), tape, store, x, ctx)?;
                tape.add(b, a)?
            }
            LayerSpec::RealRelu => tape.relu(x)?,
            LayerSpec::RealFc { .. } => {
                let w = bind(tape, store, ctx, &name(prefix, i, "weight"))?;
                let b = bind(tape, store, ctx, &name(prefix, i, "bias"))?;
                tape.linear(x, w, Some(b))?
            }
            LayerSpec::Softmax => tape.flatten(x)?,
        };
    }
    Ok(x)
}

/// Result of an equivariance audit.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivarianceReport {
    /// Worst `‖Φ(e^{iθ}f) − e^{iθ}Φ(f)‖∞ / max(‖Φ(f)‖∞, 1e-8)` over trials.
    pub max_residual: f64,
    pub trials: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Audits `f` on random complex inputs of `input_shape` and random phases.
///
/// `f` receives the input and a per-trial seed; both calls of one trial get
/// the same seed so any randomness inside (dropout masks) is pinned.
pub fn certify_fn<T: Scalar>(
    mut f: impl FnMut(&ComplexTensor<T>, u64) -> Result<ComplexTensor<T>>,
    input_shape: &[usize],
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<EquivarianceReport> {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let z = ComplexTensor::new(rng.sample_gaussian(input_shape), rng.sample_gaussian(input_shape))?;
        let theta = rng.uniform(0.0, TAU);
        let trial_seed = rng.next_u64();
        let plain = f(&z, trial_seed)?;
        let rotated_in = f(&z.rotate(T::lit(theta)), trial_seed)?;
        let expected = plain.rotate(T::lit(theta));
        let diff = rotated_in.sub(&expected)?;
        let scale = plain.max_modulus().to_f64_lossy().max(1e-8);
        let r = diff.max_modulus().to_f64_lossy() / scale;
        worst = if r.is_nan() { f64::INFINITY } else { worst.max(r) };
    }
    Ok(EquivarianceReport { max_residual: worst, trials, tol, pass: worst < tol })
}

/// Audits a layer stack with the parameters in `store`.
pub fn certify_equivariance<T: Scalar>(
    seq: &Sequential,
    store: &ParamStore<T>,
    input_shape: &[usize],
    mode: Mode,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<EquivarianceReport> {
    certify_fn(
        |z, s| {
            let mut rng = Rng::new(s);
            let mut ctx = Ctx::new(mode).with_rng(&mut rng);
            seq.apply(store, Value::Complex(z.clone()), &mut ctx)?.into_complex()
        },
        input_shape,
        trials,
        tol,
        seed,
    )
}

/// Default audit tolerance for a scalar type.
pub fn default_tolerance<T: Scalar>() -> f64 {
    match T::DTYPE {
        crate::tensor::DType::F32 => 1e-5,
        crate::tensor::DType::F64 => 1e-10,
    }
}
