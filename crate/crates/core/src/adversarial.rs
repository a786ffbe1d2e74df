//! Adversarial training of the complex pipeline.
//!
//! A Wasserstein critic `D` learns to tell real features `a` from fake
//! decryptions `a′ = a·cosΔ − b·sinΔ` at `k − 1` phase offsets Δ. The
//! encryption stack `g` is trained to make them indistinguishable while `g`,
//! `Φ` and `d` also minimize the task cross-entropy.

use std::f64::consts::TAU;
use std::io::Write;

use crate::autodiff::optim::{Optimizer, RmsProp, Sgd};
use crate::autodiff::{ParamStore, Tape, Value, Var};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::layers::{Ctx, Mode};
use crate::network::{Model, Variant};
use crate::rng::Rng;
use crate::secure::{fooling_partners, noisy_feature, sample_phase};
use crate::tensor::{Scalar, Tensor};

/// Negative-side slope of the critic's activation.
const CRITIC_SLOPE: f64 = 0.2;

/// Phase offsets used as negatives for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetSchedule {
    pub k: usize,
    pub offsets: Vec<f64>,
}

/// `k − 1` i.i.d. offsets uniform on `[θ_min, 2π − θ_min]`.
pub fn sample_offsets(k: usize, theta_min: f64, rng: &mut Rng) -> Result<OffsetSchedule> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("anonymity count k must be >= 2, got {k}")));
    }
    if !(theta_min > 0.0 && theta_min < TAU / 2.0) {
        return Err(Error::InvalidArgument(format!("theta_min must lie in (0, π), got {theta_min}")));
    }
    let offsets = (0..k - 1).map(|_| rng.uniform(theta_min, TAU - theta_min)).collect();
    Ok(OffsetSchedule { k, offsets })
}

/// Losses measured in one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AdvBatchLosses {
    /// Critic objective `mean[D(a) − mean_Δ D(a′)]` (the critic ascends it).
    pub d_loss: f64,
    /// The same quantity seen by the generator, which descends it.
    pub g_loss: f64,
    pub task_loss: f64,
    /// `λ·g_loss + task_loss`.
    pub total: f64,
}

/// Critic: 3×3 stride-2 convolution, leaky ReLU, dense layer to one score.
#[derive(Debug)]
pub struct Discriminator<T> {
    pub store: ParamStore<T>,
    pub c_clip: f64,
    pub feature_shape: Vec<usize>,
    width: usize,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(feature_shape: &[usize], width: usize, c_clip: f64, seed: u64) -> Result<Self> {
        let &[c, h, w] = feature_shape else {
            return Err(Error::Shape { op: "discriminator", detail: format!("feature must be (C, H, W), got {feature_shape:?}") });
        };
        if !(c_clip > 0.0) {
            return Err(Error::InvalidArgument(format!("clip bound must be positive, got {c_clip}")));
        }
        let (oh, ow) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let std_conv = (2.0 / (c * 9) as f64).sqrt();
        let fan = width * oh * ow;
        let std_fc = (2.0 / fan as f64).sqrt();
        store.add("disc.conv.weight", Tensor::from_fn(&[width, c, 3, 3], |_| T::lit(rng.gaussian() * std_conv)), true)?;
        store.add("disc.conv.bias", Tensor::zeros(&[width]), true)?;
        store.add("disc.fc.weight", Tensor::from_fn(&[1, fan], |_| T::lit(rng.gaussian() * std_fc)), true)?;
        store.add("disc.fc.bias", Tensor::zeros(&[1]), true)?;
        let mut d = Self { store, c_clip, feature_shape: feature_shape.to_vec(), width };
        d.clip();
        Ok(d)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Scores of shape (N, 1) on the tape. With `detach` the critic's
    /// parameters enter as constants.
    pub fn score(&self, tape: &mut Tape<T>, x: Var, detach: bool) -> Result<Var> {
        let bind = |tape: &mut Tape<T>, name: &str| -> Result<Var> {
            let id = self.store.find(name).ok_or_else(|| Error::MissingParameter(name.into()))?;
            Ok(if detach { tape.param_detached(&self.store, id) } else { tape.param(&self.store, id) })
        };
        let w = bind(tape, "disc.conv.weight")?;
        let b = bind(tape, "disc.conv.bias")?;
        let h = tape.conv2d(x, w, Some(b), 2, 1)?;
        let h = tape.leaky_relu(h, T::lit(CRITIC_SLOPE))?;
        let fw = bind(tape, "disc.fc.weight")?;
        let fb = bind(tape, "disc.fc.bias")?;
        tape.linear(h, fw, Some(fb))
    }

    /// Scores of a batch of features.
    pub fn scores(&self, features: &Tensor<T>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.real_const(features.clone());
        let s = self.score(&mut tape, x, true)?;
        Ok(tape.real(s)?.data().iter().map(|v| v.to_f64_lossy()).collect())
    }

    pub fn clip(&mut self) {
        clip_discriminator(&mut self.store, self.c_clip);
    }
}

/// Clamps every trainable critic weight into `[−c, c]`.
pub fn clip_discriminator<T: Scalar>(store: &mut ParamStore<T>, c_clip: f64) {
    let c = T::lit(c_clip);
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable).collect();
    for id in ids {
        if store.value(id).data().iter().any(|v| v.abs() > c) {
            for v in store.value_mut(id).data_mut() {
                *v = v.max(-c).min(c);
            }
        }
    }
}

/// `mean_i [s_real[i] − mean_k s_fake[k][i]]` where `s_fake[k]` holds the
/// scores of offset `k`.
pub fn adv_loss_from_scores(real: &[f64], fake: &[Vec<f64>]) -> Result<f64> {
    if fake.is_empty() {
        return Err(Error::InvalidArgument("empty offset schedule".into()));
    }
    if real.is_empty() || fake.iter().any(|f| f.len() != real.len()) {
        return Err(Error::InvalidArgument("every offset needs one fake score per sample".into()));
    }
    let k = fake.len() as f64;
    let per: f64 = real
        .iter()
        .enumerate()
        .map(|(i, &r)| r - fake.iter().map(|f| f[i]).sum::<f64>() / k)
        .sum();
    Ok(per / real.len() as f64)
}

/// Critic objective on real features `a` and one fake batch per offset.
pub fn adv_loss<T: Scalar>(disc: &Discriminator<T>, a: &Tensor<T>, fakes: &[Tensor<T>]) -> Result<f64> {
    let real = disc.scores(a)?;
    let fake: Vec<Vec<f64>> = fakes.iter().map(|f| disc.scores(f)).collect::<Result<_>>()?;
    adv_loss_from_scores(&real, &fake)
}

/// Fake decryptions `a·cosΔ − b·sinΔ` for each offset.
pub fn fake_batches<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, schedule: &OffsetSchedule) -> Result<Vec<Tensor<T>>> {
    schedule
        .offsets
        .iter()
        .map(|&d| a.scale(T::lit(d.cos())).sub(&b.scale(T::lit(d.sin()))))
        .collect()
}

/// Mean softmax cross-entropy.
pub fn task_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.real_const(logits.clone());
    let loss = tape.cross_entropy(l, labels)?;
    Ok(tape.real(loss)?.item().to_f64_lossy())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvOptions {
    pub lambda_adv: f64,
    pub k: usize,
    pub theta_min: f64,
    pub n_critic: usize,
    pub c_clip: f64,
    pub critic_lr: f64,
    pub critic_width: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Cosine-anneal the model learning rate to zero over each training run.
    pub cosine: bool,
}

/// Learning-rate multiplier for `epoch` of `epochs` under cosine annealing.
pub fn cosine_factor(epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return 1.0;
    }
    0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
}

impl Default for AdvOptions {
    fn default() -> Self {
        Self {
            lambda_adv: 1.0,
            k: 8,
            theta_min: 0.1,
            n_critic: 5,
            c_clip: 0.01,
            critic_lr: 5e-5,
            critic_width: 8,
            lr: 0.003,
            momentum: 0.9,
            weight_decay: 5e-4,
            cosine: true,
        }
    }
}

/// Owns the model, the critic and both optimizers.
pub struct Trainer<T> {
    pub model: Model<T>,
    pub disc: Discriminator<T>,
    pub opts: AdvOptions,
    opt: Sgd<T>,
    critic_opt: RmsProp<T>,
    pub steps: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, opts: AdvOptions, seed: u64) -> Result<Self> {
        let disc = Discriminator::new(&model.net.feature_shape, opts.critic_width, opts.c_clip, seed)?;
        Ok(Self {
            opt: Sgd::new(T::lit(opts.lr), T::lit(opts.momentum), T::lit(opts.weight_decay)),
            critic_opt: RmsProp::new(T::lit(opts.critic_lr)),
            model,
            disc,
            opts,
            steps: 0,
        })
    }

    /// One step on a batch: `n_critic` critic updates (each followed by a
    /// clip), then one update of `g`, `Φ`, `d`. Fresh phases and fooling
    /// partners come from `rng`.
    pub fn train_step(
        &mut self,
        images: &Tensor<T>,
        labels: &[usize],
        schedule: &OffsetSchedule,
        rng: &mut Rng,
    ) -> Result<AdvBatchLosses> {
        let net = &self.model.net;
        if !net.variant.is_complex() {
            return Err(Error::Unsupported("adversarial training needs the complex pipeline".into()));
        }
        self.model.check_images(images)?;
        let n = images.batch();
        let partners = fooling_partners(n, rng)?;
        let theta: Vec<T> = (0..n).map(|_| T::lit(sample_phase(rng))).collect();

        let mut tape = Tape::new();
        let mut drop_rng = rng.fork();
        let mut ctx = Ctx::new(Mode::Train).with_rng(&mut drop_rng);
        let input = tape.real_const(images.clone());
        let a = self.model.net.g.forward(&mut tape, &self.model.store, input, &mut ctx)?;
        let b = tape.select_batch(a, &partners)?;
        let z = tape.complex(a, b)?;
        let x = tape.rotate(z, &theta)?;
        let h = self.model.net.phi.forward(&mut tape, &self.model.store, x, &mut ctx)?;
        let neg: Vec<T> = theta.iter().map(|&t| -t).collect();
        let back = tape.rotate(h, &neg)?;
        let dec = tape.real_part(back)?;
        let logits = self.model.net.d.forward(&mut tape, &self.model.store, dec, &mut ctx)?;
        let task = tape.cross_entropy(logits, labels)?;

        let lambda = self.opts.lambda_adv;
        let mut losses = AdvBatchLosses { task_loss: tape.real(task)?.item().to_f64_lossy(), ..Default::default() };
        let total = if lambda != 0.0 {
            let a_val = tape.real(a)?.clone();
            let b_val = tape.real(b)?.clone();
            losses.d_loss = self.critic_updates(&a_val, &b_val, schedule)?;

            let mut parts = Vec::with_capacity(schedule.offsets.len());
            for &d in &schedule.offsets {
                let ca = tape.scale(a, T::lit(d.cos()))?;
                let sb = tape.scale(b, T::lit(d.sin()))?;
                parts.push(tape.sub(ca, sb)?);
            }
            let fakes = tape.concat_batch(&parts)?;
            let real_scores = self.disc.score(&mut tape, a, true)?;
            let fake_scores = self.disc.score(&mut tape, fakes, true)?;
            let mr = tape.mean(real_scores)?;
            let mf = tape.mean(fake_scores)?;
            let g_loss = tape.sub(mr, mf)?;
            losses.g_loss = tape.real(g_loss)?.item().to_f64_lossy();
            let weighted = tape.scale(g_loss, T::lit(lambda))?;
            tape.add(weighted, task)?
        } else {
            task
        };
        losses.total = tape.real(total)?.item().to_f64_lossy();
        if !losses.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at step {}: task {} adversarial {}",
                self.steps, losses.task_loss, losses.g_loss
            )));
        }
        self.model.store.zero_grad();
        tape.backward_into(total, &mut self.model.store)?;
        self.opt.step(&mut self.model.store)?;
        ctx.commit(&mut self.model.store);
        self.steps += 1;
        Ok(losses)
    }

    /// Ascends the critic objective on detached features; returns the
    /// objective measured before the last update.
    fn critic_updates(&mut self, a: &Tensor<T>, b: &Tensor<T>, schedule: &OffsetSchedule) -> Result<f64> {
        let fakes = fake_batches(a, b, schedule)?;
        let fake_all = Tensor::concat_batch(&fakes.iter().collect::<Vec<_>>())?;
        let mut last = 0.0;
        for _ in 0..self.opts.n_critic {
            let mut tape = Tape::new();
            let ra = tape.real_const(a.clone());
            let rf = tape.real_const(fake_all.clone());
            let sr = self.disc.score(&mut tape, ra, false)?;
            let sf = self.disc.score(&mut tape, rf, false)?;
            let mr = tape.mean(sr)?;
            let mf = tape.mean(sf)?;
            let obj = tape.sub(mr, mf)?;
            last = tape.real(obj)?.item().to_f64_lossy();
            let loss = tape.scale(obj, -T::one())?;
            self.disc.store.zero_grad();
            tape.backward_into(loss, &mut self.disc.store)?;
            self.critic_opt.step(&mut self.disc.store)?;
            self.disc.clip();
        }
        Ok(last)
    }
}

/// One CSV log line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: u64,
    pub losses: AdvBatchLosses,
}

pub const CSV_HEADER: &str = "epoch,step,d_loss,g_loss,task_loss,total";

impl LogRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!("{},{},{},{},{},{}", self.epoch, self.step, l.d_loss, l.g_loss, l.task_loss, l.total)
    }
}

/// Writes records as CSV, header first.
pub struct CsvLog<W: Write> {
    out: W,
}

impl<W: Write> CsvLog<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{CSV_HEADER}")?;
        Ok(Self { out })
    }

    pub fn record(&mut self, r: &LogRecord) -> Result<()> {
        writeln!(self.out, "{}", r.csv_row())?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Epoch-level training driver for the complex pipeline. Epoch `e` draws
/// its offsets and batch order from the stream `(seed, e)`.
pub fn train_complex<T: Scalar>(
    trainer: &mut Trainer<T>,
    data: &Dataset,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    mut log: impl FnMut(&LogRecord) -> Result<()>,
) -> Result<()> {
    for epoch in 0..epochs {
        if trainer.opts.cosine {
            trainer.opt.lr = T::lit(trainer.opts.lr * cosine_factor(epoch, epochs));
        }
        let mut rng = Rng::derive(seed, epoch as u64 + 1);
        let schedule = sample_offsets(trainer.opts.k, trainer.opts.theta_min, &mut rng)?;
        for idx in batches(data.len(), batch_size, 2, &mut rng) {
            let (images, labels) = data.batch::<T>(&idx)?;
            let mut step_rng = rng.fork();
            let losses = trainer.train_step(&images, &labels, &schedule, &mut step_rng)?;
            log(&LogRecord { epoch, step: trainer.steps, losses })?;
        }
    }
    Ok(())
}

/// Plain supervised training of a real baseline. The noisy variant trains on
/// `a + γ·ε` (noise treated as a constant).
pub struct BaselineTrainer<T> {
    pub model: Model<T>,
    opt: Sgd<T>,
    base_lr: f64,
    cosine: bool,
    pub steps: u64,
}

impl<T: Scalar> BaselineTrainer<T> {
    pub fn new(model: Model<T>, opts: &AdvOptions) -> Self {
        Self {
            opt: Sgd::new(T::lit(opts.lr), T::lit(opts.momentum), T::lit(opts.weight_decay)),
            base_lr: opts.lr,
            cosine: opts.cosine,
            model,
            steps: 0,
        }
    }

    pub fn train_step(&mut self, images: &Tensor<T>, labels: &[usize], rng: &mut Rng) -> Result<AdvBatchLosses> {
        if self.model.net.variant.is_complex() {
            return Err(Error::Unsupported("baseline training needs a real variant".into()));
        }
        self.model.check_images(images)?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(Mode::Train);
        let input = tape.real_const(images.clone());
        let mut a = self.model.net.g.forward(&mut tape, &self.model.store, input, &mut ctx)?;
        if let Variant::Noisy { gamma } = self.model.net.variant {
            let clean = tape.real(a)?.clone();
            let noise = noisy_feature(&clean, gamma, rng)?.sub(&clean)?;
            let nv = tape.constant(Value::Real(noise));
            a = tape.add(a, nv)?;
        }
        let logits = self.model.net.d.forward(&mut tape, &self.model.store, a, &mut ctx)?;
        let loss = tape.cross_entropy(logits, labels)?;
        let task = tape.real(loss)?.item().to_f64_lossy();
        if !task.is_finite() {
            return Err(Error::NonFinite(format!("baseline loss at step {}", self.steps)));
        }
        self.model.store.zero_grad();
        tape.backward_into(loss, &mut self.model.store)?;
        self.opt.step(&mut self.model.store)?;
        ctx.commit(&mut self.model.store);
        self.steps += 1;
        Ok(AdvBatchLosses { task_loss: task, total: task, ..Default::default() })
    }
}

pub fn train_baseline<T: Scalar>(
    trainer: &mut BaselineTrainer<T>,
    data: &Dataset,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    mut log: impl FnMut(&LogRecord) -> Result<()>,
) -> Result<()> {
    for epoch in 0..epochs {
        if trainer.cosine {
            trainer.opt.lr = T::lit(trainer.base_lr * cosine_factor(epoch, epochs));
        }
        let mut rng = Rng::derive(seed, epoch as u64 + 1);
        for idx in batches(data.len(), batch_size, 1, &mut rng) {
            let (images, labels) = data.batch::<T>(&idx)?;
            let mut step_rng = rng.fork();
            let losses = trainer.train_step(&images, &labels, &mut step_rng)?;
            log(&LogRecord { epoch, step: trainer.steps, losses })?;
        }
    }
    Ok(())
}
