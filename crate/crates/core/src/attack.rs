//! Inversion attacks against released features, and the privacy metrics.
//!
//! Strategy 1 estimates the phase with a learned scorer `D′` and decodes
//! `Re[x·e^{−iθ̂}]` with a real-feature decoder. Strategy 2 decodes `x`
//! directly, reading its two planes as `2K` real channels. The plaintext
//! attack decodes the features released by an unprotected baseline and is
//! the reference point for both.
//!
//! Attack code only ever receives features and images. Phases are generated
//! by the evaluation harness in [`run_attack`] and used there for scoring
//! alone.

use std::f64::consts::TAU;
use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::adversarial::Discriminator;
use crate::autodiff::optim::{Adam, Optimizer};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::network::{Model, Variant};
use crate::rng::Rng;
use crate::secure::{encrypt, fake_decrypt, fooling_partners, noisy_feature, sample_phase, EncryptedFeature};
use crate::tensor::{dump, ComplexTensor, Scalar, Tensor};

/// Mean absolute pixel difference.
pub fn reconstruction_error<T: Scalar>(recon: &Tensor<T>, images: &Tensor<T>) -> Result<f64> {
    recon.check_same_shape(images, "reconstruction_error")?;
    if recon.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = recon.data().iter().zip(images.data()).map(|(&a, &b)| (a - b).abs().to_f64_lossy()).sum();
    Ok(s / recon.len() as f64)
}

/// Distance on the unit circle, in `[0, π]`.
pub fn angle_error(theta_star: f64, theta_hat: f64) -> f64 {
    let d = (theta_star - theta_hat).abs() % TAU;
    d.min(TAU - d)
}

/// `100 · (1 − top-1 accuracy)`; ties go to the lowest class index.
pub fn classification_error<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Shape {
            op: "classification_error",
            detail: format!("logits {s:?} for {} labels", labels.len()),
        });
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let wrong = predictions(logits).iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(100.0 * wrong as f64 / labels.len() as f64)
}

/// Row-wise argmax.
pub fn predictions<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.shape().get(1).copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Which features an attack decodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Real features of an unprotected (or noisy) baseline.
    Plaintext,
    /// Phase estimation followed by a real-feature decoder.
    PhaseThenDecode,
    /// Direct decoding of the complex feature.
    DirectDecode,
}

impl Strategy {
    pub fn tag(self) -> &'static str {
        match self {
            Strategy::Plaintext => "plaintext",
            Strategy::PhaseThenDecode => "strategy1",
            Strategy::DirectDecode => "strategy2",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plaintext" => Ok(Strategy::Plaintext),
            "strategy1" | "1" => Ok(Strategy::PhaseThenDecode),
            "strategy2" | "2" => Ok(Strategy::DirectDecode),
            _ => Err(Error::InvalidArgument(format!("unknown strategy {s:?} (plaintext, strategy1, strategy2)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMode {
    /// `(g(I), I)`, with noise for the noisy variant.
    Plaintext,
    /// `(x, I)` with a fresh phase and partner per query.
    Encrypted,
    /// `r` encryptions of every image.
    RepeatQuery(usize),
}

/// Feature released to the attacker.
#[derive(Debug, Clone, PartialEq)]
pub enum Released<T> {
    Real(Tensor<T>),
    Complex(ComplexTensor<T>),
}

impl<T: Scalar> Released<T> {
    pub fn len(&self) -> usize {
        match self {
            Released::Real(t) => t.batch(),
            Released::Complex(z) => z.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Decoder input: the tensor itself, or both planes stacked as channels.
    pub fn as_channels(&self) -> Result<Tensor<T>> {
        match self {
            Released::Real(t) => Ok(t.clone()),
            Released::Complex(z) => stack_planes(z),
        }
    }
}

/// `(re, im)` of shape (N, K, H, W) to (N, 2K, H, W).
pub fn stack_planes<T: Scalar>(z: &ComplexTensor<T>) -> Result<Tensor<T>> {
    let (n, k, h, w) = z.re().dims4()?;
    let plane = k * h * w;
    let mut out = Vec::with_capacity(2 * n * plane);
    for i in 0..n {
        out.extend_from_slice(&z.re().data()[i * plane..(i + 1) * plane]);
        out.extend_from_slice(&z.im().data()[i * plane..(i + 1) * plane]);
    }
    Tensor::new(vec![n, 2 * k, h, w], out)
}

/// Consecutive index chunks of at most `size` (at least 2) items; a
/// trailing singleton joins the previous chunk so every chunk can pick
/// in-batch fooling partners.
pub fn pair_chunks(n: usize, size: usize) -> Vec<Vec<usize>> {
    let size = size.max(2);
    let mut out: Vec<Vec<usize>> = (0..n).collect::<Vec<_>>().chunks(size).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|c| c.len() == 1) {
        let last = out.pop().unwrap_or_default();
        out.last_mut().map(|c| c.extend(last));
    }
    out
}

/// Attacker training data. There is deliberately no field for phases or
/// partner indices.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet<T> {
    pub features: Released<T>,
    pub images: Tensor<T>,
}

impl<T: Scalar> PairSet<T> {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    /// Record layout: a tag byte (`R` real features, `C` complex), the
    /// features as CVT1, then the images as CVT1.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match &self.features {
            Released::Real(a) => {
                out.push(b'R');
                out.extend(dump::encode(a));
            }
            Released::Complex(z) => {
                out.push(b'C');
                out.extend(dump::encode_complex(z));
            }
        }
        out.extend(dump::encode(&self.images));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (&tag, rest) = bytes.split_first().ok_or_else(|| Error::Format("empty pair record".into()))?;
        let (features, used) = match tag {
            b'R' => {
                let (a, used) = dump::decode::<T>(rest)?;
                (Released::Real(a), used)
            }
            b'C' => {
                let (_, used) = dump::decode::<T>(rest)?;
                (Released::Complex(dump::decode_complex(&rest[..used])?), used)
            }
            other => return Err(Error::Format(format!("unknown pair tag {other:#04x}"))),
        };
        let (images, tail) = dump::decode::<T>(&rest[used..])?;
        if used + tail != rest.len() {
            return Err(Error::Format("trailing bytes after pair record".into()));
        }
        Ok(Self { features, images })
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Queries the frozen victim on every image of `data`, in batches.
pub fn collect_pairs<T: Scalar>(
    victim: &Model<T>,
    data: &Dataset,
    mode: PairMode,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<PairSet<T>> {
    let repeats = match mode {
        PairMode::Plaintext | PairMode::Encrypted => 1,
        PairMode::RepeatQuery(r) if r >= 1 => r,
        PairMode::RepeatQuery(r) => return Err(Error::InvalidArgument(format!("repeat count must be >= 1, got {r}"))),
    };
    if mode != PairMode::Plaintext && !victim.net.variant.is_complex() {
        return Err(Error::Unsupported("encrypted pairs need the complex pipeline".into()));
    }
    let mut feats = Vec::new();
    let mut planes = (Vec::new(), Vec::new());
    let mut images = Vec::new();
    for _ in 0..repeats {
        for chunk in pair_chunks(data.len(), batch_size) {
            let (img, _) = data.batch::<T>(&chunk)?;
            let a = victim.features(&img)?;
            match mode {
                PairMode::Plaintext => {
                    let a = match victim.net.variant {
                        Variant::Noisy { gamma } => noisy_feature(&a, gamma, rng)?,
                        _ => a,
                    };
                    feats.push(a);
                }
                _ => {
                    if chunk.len() < 2 {
                        return Err(Error::InvalidArgument("encryption needs at least two images per batch".into()));
                    }
                    let (x, _secret) = victim.client_encrypt(&img, rng)?;
                    let (re, im) = x.x.into_parts();
                    planes.0.push(re);
                    planes.1.push(im);
                }
            }
            images.push(img);
        }
    }
    let cat = |v: &Vec<Tensor<T>>| Tensor::concat_batch(&v.iter().collect::<Vec<_>>());
    let features = if mode == PairMode::Plaintext {
        Released::Real(cat(&feats)?)
    } else {
        Released::Complex(ComplexTensor::new(cat(&planes.0)?, cat(&planes.1)?)?)
    };
    Ok(PairSet { features, images: cat(&images)? })
}

/// Decoder and scorer hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub base_width: usize,
    pub levels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Phase grid size.
    pub grid: usize,
    pub critic_width: usize,
    pub critic_epochs: usize,
    pub critic_lr: f64,
    pub critic_clip: f64,
    /// Smallest offset used for the scorer's fake decryptions.
    pub theta_min: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            base_width: 8,
            levels: 4,
            epochs: 8,
            batch_size: 32,
            lr: 2e-3,
            grid: 64,
            critic_width: 8,
            critic_epochs: 8,
            critic_lr: 1e-3,
            critic_clip: 0.01,
            theta_min: 0.1,
        }
    }
}

/// U-net style decoder: `levels` resolutions, two 3×3 convolutions per
/// block, max-pool down, nearest upsampling up, skip concatenation between
/// mirrored resolutions and a sigmoid output. Features smaller than the
/// image are zero-padded symmetrically first.
#[derive(Debug)]
pub struct Decoder<T> {
    pub store: ParamStore<T>,
    pub in_channels: usize,
    pub feature_hw: [usize; 2],
    pub image_shape: [usize; 3],
    pub levels: usize,
    pub base_width: usize,
    pub trained: bool,
}

impl<T: Scalar> Clone for Decoder<T> {
    fn clone(&self) -> Self {
        Self {
            store: self.store.clone(),
            in_channels: self.in_channels,
            feature_hw: self.feature_hw,
            image_shape: self.image_shape,
            levels: self.levels,
            base_width: self.base_width,
            trained: self.trained,
        }
    }
}

impl<T: Scalar> Decoder<T> {
    pub fn new(in_channels: usize, feature_hw: [usize; 2], image_shape: [usize; 3], base_width: usize, levels: usize, seed: u64) -> Result<Self> {
        let [_, ih, iw] = image_shape;
        let [fh, fw] = feature_hw;
        if levels == 0 || base_width == 0 || in_channels == 0 {
            return Err(Error::InvalidArgument("decoder needs levels, width and input channels >= 1".into()));
        }
        if fh > ih || fw > iw || (ih - fh) % 2 != 0 || ih - fh != iw - fw {
            return Err(Error::Shape {
                op: "decoder",
                detail: format!("feature {fh}×{fw} cannot be padded symmetrically to image {ih}×{iw}"),
            });
        }
        let div = 1 << (levels - 1);
        if ih % div != 0 || iw % div != 0 {
            return Err(Error::Shape { op: "decoder", detail: format!("image side must be divisible by {div}") });
        }
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let mut conv = |store: &mut ParamStore<T>, name: String, cin: usize, cout: usize, k: usize| -> Result<()> {
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            store.add(format!("{name}.weight"), Tensor::from_fn(&[cout, cin, k, k], |_| T::lit(rng.gaussian() * std)), true)?;
            store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true)?;
            Ok(())
        };
        let width = |l: usize| base_width << l;
        let mut cin = in_channels;
        for l in 0..levels {
            conv(&mut store, format!("dec.down{l}.0"), cin, width(l), 3)?;
            conv(&mut store, format!("dec.down{l}.1"), width(l), width(l), 3)?;
            cin = width(l);
        }
        for l in (0..levels - 1).rev() {
            conv(&mut store, format!("dec.up{l}"), width(l + 1), width(l), 3)?;
            conv(&mut store, format!("dec.merge{l}.0"), 2 * width(l), width(l), 3)?;
            conv(&mut store, format!("dec.merge{l}.1"), width(l), width(l), 3)?;
        }
        conv(&mut store, "dec.out".into(), width(0), image_shape[0], 1)?;
        Ok(Self { store, in_channels, feature_hw, image_shape, levels, base_width, trained: false })
    }

    fn conv(&self, tape: &mut Tape<T>, x: Var, name: &str, pad: usize) -> Result<Var> {
        let get = |suffix: &str| {
            let key = format!("{name}.{suffix}");
            self.store.find(&key).ok_or(Error::MissingParameter(key))
        };
        let w = tape.param(&self.store, get("weight")?);
        let b = tape.param(&self.store, get("bias")?);
        tape.conv2d(x, w, Some(b), 1, pad)
    }

    fn conv_relu(&self, tape: &mut Tape<T>, x: Var, name: &str) -> Result<Var> {
        let y = self.conv(tape, x, name, 1)?;
        tape.relu(y)
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let pad = (self.image_shape[1] - self.feature_hw[0]) / 2;
        let mut h = if pad > 0 { tape.pad2d(x, pad)? } else { x };
        let mut skips = Vec::with_capacity(self.levels);
        for l in 0..self.levels {
            if l > 0 {
                h = tape.maxpool(h, 2, 2)?;
            }
            h = self.conv_relu(tape, h, &format!("dec.down{l}.0"))?;
            h = self.conv_relu(tape, h, &format!("dec.down{l}.1"))?;
            skips.push(h);
        }
        for l in (0..self.levels - 1).rev() {
            h = tape.upsample(h, 2)?;
            h = self.conv_relu(tape, h, &format!("dec.up{l}"))?;
            h = tape.concat_channels(skips[l], h)?;
            h = self.conv_relu(tape, h, &format!("dec.merge{l}.0"))?;
            h = self.conv_relu(tape, h, &format!("dec.merge{l}.1"))?;
        }
        let y = self.conv(tape, h, "dec.out", 0)?;
        tape.sigmoid(y)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_channels || s[2..] != self.feature_hw {
            return Err(Error::Shape {
                op: "decoder",
                detail: format!("input {s:?}, expected (N, {}, {}, {})", self.in_channels, self.feature_hw[0], self.feature_hw[1]),
            });
        }
        Ok(())
    }

    /// Reconstructions in `[0, 1]`, computed in chunks of 64.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut parts = Vec::new();
        let idx: Vec<usize> = (0..x.batch()).collect();
        for chunk in idx.chunks(64) {
            let mut tape = Tape::new();
            let v = tape.real_const(x.select_batch(chunk)?);
            let y = self.forward(&mut tape, v)?;
            parts.push(tape.real(y)?.clone());
        }
        Tensor::concat_batch(&parts.iter().collect::<Vec<_>>())
    }

    /// Minimizes the mean squared reconstruction loss with Adam; returns the
    /// mean loss of every epoch.
    pub fn fit(&mut self, x: &Tensor<T>, images: &Tensor<T>, cfg: &AttackConfig, rng: &mut Rng) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if x.batch() == 0 {
            return Err(Error::InvalidArgument("decoder training needs at least one pair".into()));
        }
        if images.shape()[1..] != self.image_shape || images.batch() != x.batch() {
            return Err(Error::Shape { op: "decoder", detail: format!("targets {:?} for inputs {:?}", images.shape(), x.shape()) });
        }
        let mut opt = Adam::new(T::lit(cfg.lr));
        let mut history = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            let (mut total, mut count) = (0.0, 0);
            for idx in batches(x.batch(), cfg.batch_size, 1, rng) {
                let mut tape = Tape::new();
                let v = tape.real_const(x.select_batch(&idx)?);
                let y = self.forward(&mut tape, v)?;
                let loss = tape.mse(y, &images.select_batch(&idx)?)?;
                let l = tape.real(loss)?.item().to_f64_lossy();
                if !l.is_finite() {
                    return Err(Error::NonFinite("decoder loss".into()));
                }
                total += l * idx.len() as f64;
                count += idx.len();
                self.store.zero_grad();
                tape.backward_into(loss, &mut self.store)?;
                opt.step(&mut self.store)?;
            }
            history.push(total / count as f64);
        }
        self.trained = true;
        Ok(history)
    }
}

/// Phase search over an `m`-point grid with one refinement at half spacing.
/// Ties keep the earliest candidate.
pub fn estimate_phase_with<T: Scalar>(
    x: &EncryptedFeature<T>,
    m: usize,
    mut score: impl FnMut(&Tensor<T>) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    if m < 8 {
        return Err(Error::InvalidArgument(format!("phase grid needs at least 8 points, got {m}")));
    }
    let n = x.x.shape()[0];
    let mut eval = |theta: &[f64]| -> Result<Vec<f64>> {
        let s = score(&fake_decrypt(x, theta)?)?;
        if s.len() != n {
            return Err(Error::Shape { op: "estimate_phase", detail: format!("{} scores for {n} items", s.len()) });
        }
        Ok(s)
    };
    let step = TAU / m as f64;
    let mut best = vec![0.0; n];
    let mut best_score = vec![f64::NEG_INFINITY; n];
    for j in 0..m {
        let theta = j as f64 * step;
        for (i, s) in eval(&vec![theta; n])?.into_iter().enumerate() {
            if s > best_score[i] {
                best_score[i] = s;
                best[i] = theta;
            }
        }
    }
    for sign in [-0.5, 0.5] {
        let cand: Vec<f64> = best.iter().map(|&t| (t + sign * step).rem_euclid(TAU)).collect();
        for (i, s) in eval(&cand)?.into_iter().enumerate() {
            if s > best_score[i] {
                best_score[i] = s;
                best[i] = cand[i];
            }
        }
    }
    Ok(best)
}

/// Learned scorer `D′` with its grid size.
#[derive(Debug)]
pub struct PhaseEstimator<T> {
    pub critic: Discriminator<T>,
    pub grid: usize,
}

impl<T: Scalar> PhaseEstimator<T> {
    pub fn estimate(&self, x: &EncryptedFeature<T>) -> Result<Vec<f64>> {
        estimate_phase_with(x, self.grid, |f| self.critic.scores(f))
    }
}

/// Trains `D′` to score real features above fake decryptions
/// `a·cosΔ − b·sinΔ`, minimizing `E[D′(a′)] − E[D′(a)]` under weight
/// clipping. Partners and offsets are drawn per batch.
pub fn train_phase_critic<T: Scalar>(features: &Tensor<T>, cfg: &AttackConfig, rng: &mut Rng) -> Result<PhaseEstimator<T>> {
    let n = features.batch();
    if n < 2 {
        return Err(Error::InvalidArgument("phase scorer needs at least two features".into()));
    }
    let mut critic = Discriminator::new(&features.shape()[1..], cfg.critic_width, cfg.critic_clip, rng.next_u64())?;
    let mut opt = Adam::new(T::lit(cfg.critic_lr));
    for _ in 0..cfg.critic_epochs {
        for idx in batches(n, cfg.batch_size, 2, rng) {
            let a = features.select_batch(&idx)?;
            let partners = fooling_partners(idx.len(), rng)?;
            let b = a.select_batch(&partners)?;
            let delta: Vec<f64> = (0..idx.len()).map(|_| rng.uniform(cfg.theta_min, TAU - cfg.theta_min)).collect();
            let fake = fake_decrypt(&encrypt(&a, &b, &vec![0.0; idx.len()])?, &delta)?;
            let mut tape = Tape::new();
            let ra = tape.real_const(a);
            let rf = tape.real_const(fake);
            let sr = critic.score(&mut tape, ra, false)?;
            let sf = critic.score(&mut tape, rf, false)?;
            let mr = tape.mean(sr)?;
            let mf = tape.mean(sf)?;
            let loss = tape.sub(mf, mr)?;
            critic.store.zero_grad();
            tape.backward_into(loss, &mut critic.store)?;
            opt.step(&mut critic.store)?;
            critic.clip();
        }
    }
    Ok(PhaseEstimator { critic, grid: cfg.grid })
}

/// A fitted attack, ready to be run on held-out data.
#[derive(Debug)]
pub enum TrainedAttack<T> {
    Plaintext { decoder: Decoder<T> },
    PhaseThenDecode { decoder: Decoder<T>, estimator: PhaseEstimator<T> },
    DirectDecode { decoder: Decoder<T> },
}

impl<T: Scalar> TrainedAttack<T> {
    pub fn strategy(&self) -> Strategy {
        match self {
            TrainedAttack::Plaintext { .. } => Strategy::Plaintext,
            TrainedAttack::PhaseThenDecode { .. } => Strategy::PhaseThenDecode,
            TrainedAttack::DirectDecode { .. } => Strategy::DirectDecode,
        }
    }

    pub fn decoder(&self) -> &Decoder<T> {
        match self {
            TrainedAttack::Plaintext { decoder } | TrainedAttack::DirectDecode { decoder } => decoder,
            TrainedAttack::PhaseThenDecode { decoder, .. } => decoder,
        }
    }

    /// Reconstructs images from released features; strategy 1 also returns
    /// its phase estimates.
    pub fn reconstruct(&self, released: &Released<T>) -> Result<(Tensor<T>, Option<Vec<f64>>)> {
        if !self.decoder().trained {
            return Err(Error::InvalidArgument("decoder has not been trained".into()));
        }
        match (self, released) {
            (TrainedAttack::Plaintext { decoder }, Released::Real(a)) => Ok((decoder.predict(a)?, None)),
            (TrainedAttack::DirectDecode { decoder }, Released::Complex(z)) => Ok((decoder.predict(&stack_planes(z)?)?, None)),
            (TrainedAttack::PhaseThenDecode { decoder, estimator }, Released::Complex(z)) => {
                let x = EncryptedFeature { x: z.clone() };
                let theta = estimator.estimate(&x)?;
                Ok((decoder.predict(&fake_decrypt(&x, &theta)?)?, Some(theta)))
            }
            _ => Err(Error::InvalidArgument(format!("{} attack cannot decode this feature kind", self.strategy().tag()))),
        }
    }
}

/// Fits an attack on the victim's training split. Strategy 1 uses the
/// victim's encoder to obtain plaintext features for `D′` and the decoder.
pub fn train_attack<T: Scalar>(
    victim: &Model<T>,
    train: &Dataset,
    strategy: Strategy,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<TrainedAttack<T>> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("attack training needs a nonempty dataset".into()));
    }
    let mut rng = Rng::derive(seed, 0xA77);
    let image_shape = victim.net.input_shape;
    let fs = victim.net.feature_shape.clone();
    let hw = [fs[1], fs[2]];
    let mode = if strategy == Strategy::DirectDecode { PairMode::Encrypted } else { PairMode::Plaintext };
    if strategy != Strategy::Plaintext && !victim.net.variant.is_complex() {
        return Err(Error::Unsupported(format!("{} targets the complex pipeline", strategy.tag())));
    }
    let pairs = collect_pairs(victim, train, mode, cfg.batch_size, &mut rng)?;
    let input = pairs.features.as_channels()?;
    let mut decoder = Decoder::new(input.shape()[1], hw, image_shape, cfg.base_width, cfg.levels, rng.next_u64())?;
    decoder.fit(&input, &pairs.images, cfg, &mut rng)?;
    Ok(match strategy {
        Strategy::Plaintext => TrainedAttack::Plaintext { decoder },
        Strategy::DirectDecode => TrainedAttack::DirectDecode { decoder },
        Strategy::PhaseThenDecode => {
            let estimator = train_phase_critic(&input, cfg, &mut rng)?;
            TrainedAttack::PhaseThenDecode { decoder, estimator }
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub strategy: Strategy,
    pub reconstruction_error: f64,
    pub angle_error: Option<f64>,
    pub n_samples: usize,
}

pub const REPORT_CSV_HEADER: &str = "strategy,reconstruction_error,angle_error,n_samples";

impl AttackReport {
    pub fn csv_row(&self) -> String {
        let angle = self.angle_error.map(|a| a.to_string()).unwrap_or_default();
        format!("{},{},{},{}", self.strategy.tag(), self.reconstruction_error, angle, self.n_samples)
    }
}

impl fmt::Display for AttackReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} attack on {} samples: reconstruction error {:.4}", self.strategy.tag(), self.n_samples, self.reconstruction_error)?;
        if let Some(a) = self.angle_error {
            write!(f, ", angle error {a:.4} rad")?;
        }
        Ok(())
    }
}

/// Evaluation harness. Plays the client on `test` (fresh phases and partners
/// per batch), hands only the released features to the attack, and scores
/// the result. Returns the report and the reconstructions.
pub fn run_attack<T: Scalar>(
    victim: &Model<T>,
    attack: &TrainedAttack<T>,
    test: &Dataset,
    batch_size: usize,
    seed: u64,
) -> Result<(AttackReport, Tensor<T>)> {
    let mut rng = Rng::derive(seed, 0xE7A1);
    let strategy = attack.strategy();
    let (mut recon, mut angle_sum, mut err_sum) = (Vec::new(), 0.0, 0.0);
    for chunk in pair_chunks(test.len(), batch_size) {
        let (images, _) = test.batch::<T>(&chunk)?;
        let (released, theta_star) = match strategy {
            Strategy::Plaintext => {
                let a = victim.features(&images)?;
                let a = match victim.net.variant {
                    Variant::Noisy { gamma } => noisy_feature(&a, gamma, &mut rng)?,
                    _ => a,
                };
                (Released::Real(a), None)
            }
            _ => {
                let a = victim.features(&images)?;
                let n = a.batch();
                let b = if n >= 2 { a.select_batch(&fooling_partners(n, &mut rng)?)? } else { Tensor::zeros(a.shape()) };
                let theta: Vec<f64> = (0..n).map(|_| sample_phase(&mut rng)).collect();
                (Released::Complex(encrypt(&a, &b, &theta)?.x), Some(theta))
            }
        };
        let (out, theta_hat) = attack.reconstruct(&released)?;
        err_sum += reconstruction_error(&out, &images)? * chunk.len() as f64;
        if let (Some(star), Some(hat)) = (theta_star, theta_hat) {
            angle_sum += star.iter().zip(&hat).map(|(&s, &h)| angle_error(s, h)).sum::<f64>();
        }
        recon.push(out);
    }
    let n = test.len();
    let report = AttackReport {
        strategy,
        reconstruction_error: if n > 0 { err_sum / n as f64 } else { 0.0 },
        angle_error: (strategy == Strategy::PhaseThenDecode).then(|| if n > 0 { angle_sum / n as f64 } else { 0.0 }),
        n_samples: n,
    };
    Ok((report, Tensor::concat_batch(&recon.iter().collect::<Vec<_>>())?))
}

/// Writes a binary PPM with one row per sample: original on the left,
/// reconstruction on the right, separated by a 2-pixel gap.
pub fn export_ppm<T: Scalar>(path: &Path, originals: &Tensor<T>, recon: &Tensor<T>, max_rows: usize) -> Result<()> {
    originals.check_same_shape(recon, "export_ppm")?;
    let (n, c, h, w) = originals.dims4()?;
    if c != 3 && c != 1 {
        return Err(Error::Shape { op: "export_ppm", detail: format!("{c} channels; expected 1 or 3") });
    }
    let rows = n.min(max_rows).max(1).min(n);
    let gap = 2;
    let width = 2 * w + gap;
    let mut px = vec![0u8; rows * h * width * 3];
    let to_byte = |v: T| (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8;
    for r in 0..rows {
        for (col, src) in [(0, originals), (w + gap, recon)] {
            let img = &src.data()[r * c * h * w..(r + 1) * c * h * w];
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        let v = img[(ch % c) * h * w + y * w + x];
                        px[((r * h + y) * width + col + x) * 3 + ch] = to_byte(v);
                    }
                }
            }
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{width} {}\n255\n", rows * h)?;
    f.write_all(&px)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, Split};
    use crate::network::{build, build_baseline, Arch};

    #[test]
    fn reconstruction_error_examples() {
        let i = Tensor::<f64>::from_fn(&[2, 3, 4, 4], |k| (k % 7) as f64 / 7.0);
        assert_eq!(reconstruction_error(&i, &i).unwrap(), 0.0);
        assert_eq!(reconstruction_error(&Tensor::ones(&[1, 3, 2, 2]), &Tensor::<f64>::zeros(&[1, 3, 2, 2])).unwrap(), 1.0);
        let mut rng = Rng::new(0);
        let u: Tensor<f64> = rng.sample_uniform(0.0, 1.0, &[100, 3, 16, 16]);
        let half = Tensor::full(u.shape(), 0.5);
        assert!((reconstruction_error(&half, &u).unwrap() - 0.25).abs() < 0.01);
        assert!(reconstruction_error(&half, &Tensor::zeros(&[1, 3, 2, 2])).is_err());
    }

    #[test]
    fn angle_error_examples() {
        assert!((angle_error(0.0, TAU - 0.1) - 0.1).abs() < 1e-12);
        assert_eq!(angle_error(1.3, 1.3), 0.0);
        assert!((angle_error(-0.2, 0.3) - 0.5).abs() < 1e-12);
        assert!((angle_error(10.0 * TAU + 3.0, 0.0) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn classification_error_examples() {
        let l = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, -1.0]).unwrap();
        assert_eq!(classification_error(&l, &[0, 1, 0]).unwrap(), 0.0);
        assert_eq!(classification_error(&l, &[1, 0, 1]).unwrap(), 100.0);
        assert!(classification_error(&l, &[1, 0]).is_err());
    }

    #[test]
    fn constant_scorer_picks_first_grid_point() {
        let x = EncryptedFeature { x: ComplexTensor::new(Tensor::<f64>::ones(&[3, 1, 2, 2]), Tensor::zeros(&[3, 1, 2, 2])).unwrap() };
        let t = estimate_phase_with(&x, 16, |f| Ok(vec![1.0; f.batch()])).unwrap();
        assert_eq!(t, vec![0.0; 3]);
        assert!(estimate_phase_with(&x, 4, |f| Ok(vec![1.0; f.batch()])).is_err());
    }

    #[test]
    fn planted_scorer_recovers_phase() {
        let mut rng = Rng::new(3);
        let a: Tensor<f64> = rng.sample_gaussian(&[6, 2, 3, 3]);
        let b: Tensor<f64> = rng.sample_gaussian(&[6, 2, 3, 3]);
        let theta: Vec<f64> = (0..6).map(|_| sample_phase(&mut rng)).collect();
        let x = encrypt(&a, &b, &theta).unwrap();
        let planted = |f: &Tensor<f64>| -> Result<Vec<f64>> {
            let per = f.len() / f.batch();
            Ok((0..f.batch())
                .map(|i| -(0..per).map(|j| (f.data()[i * per + j] - a.data()[i * per + j]).powi(2)).sum::<f64>())
                .collect())
        };
        let m = 64;
        let hat = estimate_phase_with(&x, m, planted).unwrap();
        for (s, h) in theta.iter().zip(&hat) {
            assert!((0.0..TAU).contains(h));
            assert!(angle_error(*s, *h) <= TAU / m as f64 / 2.0 + 1e-12, "{s} vs {h}");
        }
        let scaled = estimate_phase_with(&x, m, |f| Ok(planted(f)?.iter().map(|v| v * 7.5).collect())).unwrap();
        assert_eq!(hat, scaled);
    }

    #[test]
    fn pair_chunks_avoid_singletons() {
        assert_eq!(pair_chunks(5, 2), vec![vec![0, 1], vec![2, 3, 4]]);
        assert_eq!(pair_chunks(4, 3), vec![vec![0, 1, 2, 3]]);
        assert_eq!(pair_chunks(1, 4), vec![vec![0]]);
    }

    #[test]
    fn pair_records_round_trip() {
        let mut rng = Rng::new(4);
        let z = ComplexTensor::new(rng.sample_gaussian(&[2, 3, 2, 2]), rng.sample_gaussian(&[2, 3, 2, 2])).unwrap();
        let images: Tensor<f32> = rng.sample_uniform(0.0, 1.0, &[2, 3, 4, 4]);
        for features in [Released::Complex(z.clone()), Released::Real(z.re().clone())] {
            let p = PairSet { features, images: images.clone() };
            let bytes = p.to_bytes();
            assert_eq!(PairSet::<f32>::from_bytes(&bytes).unwrap(), p);
            assert!(PairSet::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        }
    }

    #[test]
    fn stacked_planes_double_channels() {
        let z = ComplexTensor::new(Tensor::<f64>::ones(&[2, 3, 2, 2]), Tensor::zeros(&[2, 3, 2, 2])).unwrap();
        let s = stack_planes(&z).unwrap();
        assert_eq!(s.shape(), &[2, 6, 2, 2]);
        assert_eq!(&s.data()[..12], &[1.0; 12]);
        assert_eq!(&s.data()[12..24], &[0.0; 12]);
    }

    #[test]
    fn decoder_overfits_constant_images() {
        let mut rng = Rng::new(1);
        let x: Tensor<f64> = rng.sample_gaussian(&[8, 2, 6, 6]);
        let target = Tensor::full(&[8, 3, 8, 8], 0.3);
        let mut dec = Decoder::new(2, [6, 6], [3, 8, 8], 4, 3, 2).unwrap();
        assert!(!dec.trained);
        let cfg = AttackConfig { epochs: 150, batch_size: 8, lr: 1e-2, ..Default::default() };
        let hist = dec.fit(&x, &target, &cfg, &mut rng).unwrap();
        assert!(*hist.last().unwrap() < 1e-3, "{hist:?}");
        let out = dec.predict(&x).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(Decoder::<f64>::new(2, [5, 5], [3, 8, 8], 4, 3, 0).is_err());
    }

    #[test]
    fn pairs_contract() {
        let data = synth_dataset(10, 2, 16, 0, Split::Train).unwrap();
        let victim = Model::<f32>::new(build(Arch::LeNet, 2, [3, 16, 16]).unwrap(), 1).unwrap();
        let mut rng = Rng::new(2);
        let p = collect_pairs(&victim, &data, PairMode::RepeatQuery(5), 5, &mut rng).unwrap();
        assert_eq!(p.len(), 50);
        let Released::Complex(z) = &p.features else { panic!("complex pairs expected") };
        let per = z.len() / 50;
        let firsts: Vec<&[f32]> = (0..5).map(|r| &z.re().data()[r * 10 * per..r * 10 * per + per]).collect();
        for i in 0..5 {
            for j in i + 1..5 {
                assert_ne!(firsts[i], firsts[j]);
            }
        }
        let plain = collect_pairs(&victim, &data, PairMode::Plaintext, 4, &mut rng).unwrap();
        assert!(matches!(plain.features, Released::Real(_)));
        assert_eq!(plain.images.batch(), 10);
        let base = Model::<f32>::new(build_baseline(Arch::LeNet, Variant::Original, 2, [3, 16, 16]).unwrap(), 1).unwrap();
        assert!(collect_pairs(&base, &data, PairMode::Encrypted, 4, &mut rng).is_err());
    }

    #[test]
    fn untrained_or_mismatched_attacks_are_rejected() {
        let dec = Decoder::<f32>::new(6, [12, 12], [3, 16, 16], 4, 2, 0).unwrap();
        let attack = TrainedAttack::Plaintext { decoder: dec.clone() };
        let a = Released::Real(Tensor::zeros(&[2, 6, 12, 12]));
        assert!(attack.reconstruct(&a).is_err());
        let mut dec = dec;
        dec.trained = true;
        let attack = TrainedAttack::DirectDecode { decoder: dec };
        assert!(attack.reconstruct(&a).is_err());
    }

    #[test]
    fn ppm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("grid.ppm");
        let o = Tensor::<f32>::ones(&[2, 3, 4, 5]);
        let r = Tensor::<f32>::zeros(&[2, 3, 4, 5]);
        export_ppm(&p, &o, &r, 8).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let header = b"P6\n12 8\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 12 * 8 * 3);
        assert_eq!(bytes[header.len()], 255);
        assert_eq!(bytes[header.len() + 3 * 7], 0);
    }

    #[test]
    fn report_rendering() {
        let r = AttackReport { strategy: Strategy::PhaseThenDecode, reconstruction_error: 0.25, angle_error: Some(0.5), n_samples: 10 };
        assert_eq!(r.csv_row(), "strategy1,0.25,0.5,10");
        assert!(r.to_string().contains("angle error 0.5000"));
        let r = AttackReport { strategy: Strategy::Plaintext, angle_error: None, ..r };
        assert_eq!(r.csv_row(), "plaintext,0.25,,10");
        assert_eq!("strategy2".parse::<Strategy>().unwrap(), Strategy::DirectDecode);
    }
}
