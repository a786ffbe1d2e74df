//! Client/server protocol: hide the feature `a = g(I)` in a random phase of
//! `x = e^{iθ}(a + b·i)`, process `x` remotely, decrypt with the secret θ.
//!
//! The [`SecretRecord`] stays with the client. It implements no
//! serialization and never enters [`EncryptedFeature`] or a checkpoint.

use std::f64::consts::TAU;

use crate::autodiff::{Tape, Value};
use crate::error::{shape_err, Error, Result};
use crate::layers::{Ctx, Mode};
use crate::network::Model;
use crate::rng::Rng;
use crate::tensor::{dump, ComplexTensor, Scalar, Tensor};

/// Client-side secret for one batch: a phase and a fooling partner per item.
#[derive(Clone, PartialEq)]
pub struct SecretRecord {
    pub theta: Vec<f64>,
    pub fooling_index: Vec<usize>,
}

impl std::fmt::Debug for SecretRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SecretRecord {{ {} items, redacted }}", self.theta.len())
    }
}

/// The only thing the server sees.
#[derive(Debug, Clone, PartialEq)]
pub struct EncryptedFeature<T> {
    pub x: ComplexTensor<T>,
}

impl<T: Scalar> EncryptedFeature<T> {
    /// Wire format: one complex CVT1 tensor.
    pub fn to_bytes(&self) -> Vec<u8> {
        dump::encode_complex(&self.x)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(Self { x: dump::decode_complex(bytes)? })
    }
}

/// Uniform phase in `[0, 2π)`.
pub fn sample_phase(rng: &mut Rng) -> f64 {
    rng.uniform(0.0, TAU)
}

/// Uniform index in `0..n` other than `i`.
pub fn pick_fooling_index(n: usize, i: usize, rng: &mut Rng) -> Result<usize> {
    if n < 2 {
        return Err(Error::InvalidArgument("a fooling partner needs a batch of at least 2".into()));
    }
    if i >= n {
        return Err(Error::InvalidArgument(format!("item {i} outside batch of {n}")));
    }
    let j = rng.below(n - 1);
    Ok(if j >= i { j + 1 } else { j })
}

/// Fooling counterpart for item `i`: the feature of another batch member.
/// Returns it with the partner's index.
pub fn pick_fooling<T: Scalar>(features: &Tensor<T>, i: usize, rng: &mut Rng) -> Result<(Tensor<T>, usize)> {
    let j = pick_fooling_index(features.batch(), i, rng)?;
    let b = features.select_batch(&[j])?;
    let mut shape = features.shape().to_vec();
    shape[0] = 1;
    Ok((b.into_shape(&shape)?, j))
}

/// One fooling partner per batch item.
pub fn fooling_partners(n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    (0..n).map(|i| pick_fooling_index(n, i, rng)).collect()
}

fn angles<T: Scalar>(theta: &[f64], n: usize, op: &'static str) -> Result<Vec<T>> {
    match theta.len() {
        1 => Ok(vec![T::lit(theta[0]); n]),
        len if len == n => Ok(theta.iter().map(|&t| T::lit(t)).collect()),
        len => Err(shape_err(op, format!("{len} angles for batch of {n}"))),
    }
}

/// `x = e^{iθ}(a + b·i)`; `theta` holds one angle or one per batch item.
pub fn encrypt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, theta: &[f64]) -> Result<EncryptedFeature<T>> {
    a.check_same_shape(b, "encrypt")?;
    let z = ComplexTensor::new(a.clone(), b.clone())?;
    let t = angles::<T>(theta, a.batch(), "encrypt")?;
    Ok(EncryptedFeature { x: z.rotate_per_item(&t)? })
}

/// `Re[e^{−iθ}h]`.
pub fn unrotate_real<T: Scalar>(h: &ComplexTensor<T>, theta: &[f64]) -> Result<Tensor<T>> {
    let t: Vec<T> = angles::<T>(theta, h.re().batch(), "decrypt")?.into_iter().map(|v| -v).collect();
    Ok(h.rotate_per_item(&t)?.real_part())
}

/// `a′ = Re[x·e^{−iθ′}]`, which equals `a·cosΔ − b·sinΔ` for `Δ = θ* − θ′`.
pub fn fake_decrypt<T: Scalar>(x: &EncryptedFeature<T>, theta_prime: &[f64]) -> Result<Tensor<T>> {
    unrotate_real(&x.x, theta_prime)
}

/// `a + γ·ε` with Gaussian ε rescaled so that `mean|ε| = mean|a|`.
pub fn noisy_feature<T: Scalar>(a: &Tensor<T>, gamma: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise level must be >= 0, got {gamma}")));
    }
    if gamma == 0.0 {
        return Ok(a.clone());
    }
    let eps: Tensor<f64> = rng.sample_gaussian(a.shape());
    let target = a.mean_abs().to_f64_lossy();
    let have = eps.mean_abs();
    let s = if have > 0.0 { gamma * target / have } else { 0.0 };
    a.zip_map(&eps.cast(), "noisy_feature", |x, e| x + T::lit(s) * e)
}

impl<T: Scalar> Model<T> {
    fn require_complex(&self) -> Result<()> {
        if !self.net.variant.is_complex() {
            return Err(Error::Unsupported("secure inference needs the complex pipeline".into()));
        }
        Ok(())
    }

    /// `a = g(I)` in inference mode.
    pub fn features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_images(images)?;
        let mut ctx = Ctx::new(Mode::Eval);
        self.net.g.apply(&self.store, Value::Real(images.clone()), &mut ctx)?.into_real()
    }

    /// Client step: features, fresh phases and in-batch fooling partners.
    pub fn client_encrypt(&self, images: &Tensor<T>, rng: &mut Rng) -> Result<(EncryptedFeature<T>, SecretRecord)> {
        self.require_complex()?;
        let a = self.features(images)?;
        let n = a.batch();
        let partners = fooling_partners(n, rng)?;
        let theta: Vec<f64> = (0..n).map(|_| sample_phase(rng)).collect();
        let b = a.select_batch(&partners)?;
        let x = encrypt(&a, &b, &theta)?;
        Ok((x, SecretRecord { theta, fooling_index: partners }))
    }

    /// Server step: `h = Φ(x)` with frozen statistics.
    pub fn server_process(&self, x: &EncryptedFeature<T>) -> Result<ComplexTensor<T>> {
        self.require_complex()?;
        let mut ctx = Ctx::new(Mode::Eval);
        self.net.phi.apply(&self.store, Value::Complex(x.x.clone()), &mut ctx)?.into_complex()
    }

    /// Client step: `ŷ = d(Re[e^{−iθ}h])`, returned as logits.
    pub fn decrypt(&self, h: &ComplexTensor<T>, theta: &[f64]) -> Result<Tensor<T>> {
        let dec = unrotate_real(h, theta)?;
        let mut ctx = Ctx::new(Mode::Eval);
        self.net.d.apply(&self.store, Value::Real(dec), &mut ctx)?.into_real()
    }

    pub fn client_decrypt(&self, h: &ComplexTensor<T>, secret: &SecretRecord) -> Result<Tensor<T>> {
        self.decrypt(h, &secret.theta)
    }

    /// Full round trip with random secrets.
    pub fn infer(&self, images: &Tensor<T>, rng: &mut Rng) -> Result<Tensor<T>> {
        let (x, secret) = self.client_encrypt(images, rng)?;
        let h = self.server_process(&x)?;
        self.client_decrypt(&h, &secret)
    }

    /// Round trip with caller-chosen phases; `partners = None` sets `b = 0`.
    pub fn infer_with(&self, images: &Tensor<T>, theta: &[f64], partners: Option<&[usize]>) -> Result<Tensor<T>> {
        self.require_complex()?;
        let a = self.features(images)?;
        let b = match partners {
            Some(p) => a.select_batch(p)?,
            None => Tensor::zeros(a.shape()),
        };
        let x = encrypt(&a, &b, theta)?;
        let h = self.server_process(&x)?;
        self.decrypt(&h, theta)
    }

    /// Logits of `d(Φ(a + 0i))` computed directly on a tape, bypassing the
    /// protocol helpers.
    pub fn forward_unencrypted(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.require_complex()?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(Mode::Eval);
        let i = tape.real_const(images.clone());
        let a = self.encode(&mut tape, i, &mut ctx)?;
        let zero = tape.real_const(Tensor::zeros(tape.real(a)?.shape()));
        let z = tape.complex(a, zero)?;
        let h = self.net.phi.forward(&mut tape, &self.store, z, &mut ctx)?;
        let re = tape.real_part(h)?;
        let y = self.net.d.forward(&mut tape, &self.store, re, &mut ctx)?;
        Ok(tape.real(y)?.clone())
    }
}
