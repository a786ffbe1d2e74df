//! Differentiable operations recorded on a [`Tape`].

use super::{Tape, Value, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{conv, pool, ComplexTensor, Scalar, Tensor};

/// Per-channel statistic used by [`Tape::complex_norm`] and [`Tape::batch_norm`].
#[derive(Debug, Clone)]
pub enum NormStats<T> {
    /// Compute from the current batch (training); gradient flows through it.
    Batch,
    /// Frozen statistics (inference). For `complex_norm` one mean squared
    /// modulus per channel; for `batch_norm` means followed by variances.
    Fixed(Vec<T>),
}

fn r<T: Scalar>(t: Tensor<T>) -> Option<Value<T>> {
    Some(Value::Real(t))
}

fn c<T: Scalar>(z: ComplexTensor<T>) -> Option<Value<T>> {
    Some(Value::Complex(z))
}

/// Channel index of flat position `i` in an (N, C, ...) tensor.
#[inline]
fn channel_of(i: usize, channels: usize, plane: usize) -> usize {
    (i / plane) % channels
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c, rest @ ..] => Ok((*n, *c, rest.iter().product())),
        _ => Err(shape_err("channel op", format!("need (N, C, ...) input, got {shape:?}"))),
    }
}

fn map_value<T: Scalar>(v: &Value<T>, f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Value<T>> {
    Ok(match v {
        Value::Real(t) => Value::Real(f(t)?),
        Value::Complex(z) => Value::Complex(z.map_planes(&f)?),
    })
}

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = match (self.value(a), self.value(b)) {
            (Value::Real(x), Value::Real(y)) => Value::Real(x.add(y)?),
            (Value::Complex(x), Value::Complex(y)) => Value::Complex(x.add(y)?),
            _ => return Err(shape_err("add", "cannot add real and complex values")),
        };
        self.push("add", v, &[a, b], |g, _, _| Ok(vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = match (self.value(a), self.value(b)) {
            (Value::Real(x), Value::Real(y)) => Value::Real(x.sub(y)?),
            (Value::Complex(x), Value::Complex(y)) => Value::Complex(x.sub(y)?),
            _ => return Err(shape_err("sub", "cannot subtract real and complex values")),
        };
        self.push("sub", v, &[a, b], |g, _, _| {
            let neg = map_value(g, |t| Ok(t.scale(-T::one())))?;
            Ok(vec![Some(g.clone()), Some(neg)])
        })
    }

    /// Elementwise product of two real tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.real(a)?.mul(self.real(b)?)?;
        self.push("mul", Value::Real(v), &[a, b], |g, ins, _| {
            let g = g.as_real()?;
            Ok(vec![r(g.mul(ins[1].as_real()?)?), r(g.mul(ins[0].as_real()?)?)])
        })
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let v = map_value(self.value(a), |t| Ok(t.scale(s)))?;
        self.push("scale", v, &[a], move |g, _, _| Ok(vec![Some(map_value(g, |t| Ok(t.scale(s)))?)]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let x = self.real(a)?;
        let shape = x.shape().to_vec();
        let v = Tensor::scalar(x.sum());
        self.push("sum", Value::Real(v), &[a], move |g, _, _| {
            Ok(vec![r(Tensor::full(&shape, g.as_real()?.item()))])
        })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.real(a)?;
        let shape = x.shape().to_vec();
        let n = T::from(x.len().max(1)).unwrap();
        let v = Tensor::scalar(x.mean());
        self.push("mean", Value::Real(v), &[a], move |g, _, _| {
            Ok(vec![r(Tensor::full(&shape, g.as_real()?.item() / n))])
        })
    }

    /// `Σ aᵢ wᵢ` with constant weights.
    pub fn dot_const(&mut self, a: Var, w: Tensor<T>) -> Result<Var> {
        let x = self.real(a)?;
        if x.len() != w.len() {
            return Err(shape_err("dot_const", format!("{:?} vs {:?}", x.shape(), w.shape())));
        }
        let v: T = x.data().iter().zip(w.data()).map(|(&p, &q)| p * q).sum();
        let shape = x.shape().to_vec();
        self.push("dot_const", Value::Real(Tensor::scalar(v)), &[a], move |g, _, _| {
            let s = g.as_real()?.item();
            Ok(vec![r(Tensor::new(shape.clone(), w.data().iter().map(|&q| q * s).collect())?)])
        })
    }

    /// ReLU; on complex input it acts on each plane independently, which is
    /// NOT phase-equivariant (kept as a negative-control fixture).
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.leaky_relu(a, T::zero())
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        let f = move |v: T| if v > T::zero() { v } else { v * slope };
        let v = map_value(self.value(a), |t| Ok(t.map(f)))?;
        self.push("leaky_relu", v, &[a], move |g, ins, _| {
            let mask = |x: &Tensor<T>, g: &Tensor<T>| g.zip_map(x, "relu", |g, x| if x > T::zero() { g } else { g * slope });
            Ok(vec![Some(match (g, ins[0]) {
                (Value::Real(g), Value::Real(x)) => Value::Real(mask(x, g)?),
                (Value::Complex(g), Value::Complex(x)) => {
                    Value::Complex(ComplexTensor::new(mask(x.re(), g.re())?, mask(x.im(), g.im())?)?)
                }
                _ => return Err(shape_err("relu", "gradient kind mismatch")),
            })])
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.real(a)?.map(|x| T::one() / (T::one() + (-x).exp()));
        self.push("sigmoid", Value::Real(v), &[a], |g, _, out| {
            let y = out.as_real()?;
            Ok(vec![r(g.as_real()?.zip_map(y, "sigmoid", |g, y| g * y * (T::one() - y))?)])
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let from = self.value(a).shape().to_vec();
        let v = match self.value(a) {
            Value::Real(t) => Value::Real(t.reshape(shape)?),
            Value::Complex(z) => Value::Complex(z.reshape(shape)?),
        };
        self.push("reshape", v, &[a], move |g, _, _| {
            Ok(vec![Some(match g {
                Value::Real(t) => Value::Real(t.reshape(&from)?),
                Value::Complex(z) => Value::Complex(z.reshape(&from)?),
            })])
        })
    }

    /// Collapses everything after the batch axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape();
        let n = shape.first().copied().unwrap_or(1);
        let rest: usize = shape.iter().skip(1).product();
        self.reshape(a, &[n, rest])
    }

    /// 2-D convolution. Real input may take a bias; complex input uses the real
    /// kernel on both planes and must not have one.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let wt = self.real(w)?;
        let mut parents = vec![x, w];
        let v = match self.value(x) {
            Value::Real(xt) => {
                let b = match bias {
                    Some(b) => Some(self.real(b)?),
                    None => None,
                };
                Value::Real(conv::conv2d(xt, wt, b, stride, pad)?)
            }
            Value::Complex(z) => {
                if bias.is_some() {
                    return Err(Error::InvalidArgument("complex convolution has no bias term".into()));
                }
                Value::Complex(conv::conv2d_complex(z, wt, stride, pad)?)
            }
        };
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        self.push("conv2d", v, &parents, move |g, ins, _| {
            let w = ins[1].as_real()?;
            match (g, ins[0]) {
                (Value::Real(g), Value::Real(x)) => {
                    let dx = conv::conv2d_backward_input(g, w, x.shape(), stride, pad)?;
                    let dw = conv::conv2d_backward_weight(g, x, w.shape(), stride, pad)?;
                    let mut out = vec![r(dx), r(dw)];
                    if has_bias {
                        out.push(r(conv::conv2d_backward_bias(g)?));
                    }
                    Ok(out)
                }
                (Value::Complex(g), Value::Complex(x)) => {
                    let dx = conv::conv2d_complex_backward_input(g, w, x.shape(), stride, pad)?;
                    let dw = conv::conv2d_complex_backward_weight(g, x, w.shape(), stride, pad)?;
                    Ok(vec![c(dx), r(dw)])
                }
                _ => Err(shape_err("conv2d", "gradient kind mismatch")),
            }
        })
    }

    /// Fully connected layer: `x` (N, ...) flattened to (N, F), `w` (O, F).
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xt = self.real(x)?;
        let wt = self.real(w)?;
        let n = xt.batch();
        let f = xt.len() / n.max(1);
        let (o, wf) = match wt.shape() {
            &[o, wf] => (o, wf),
            s => return Err(shape_err("linear", format!("weight must be 2-D, got {s:?}"))),
        };
        if wf != f {
            return Err(shape_err("linear", format!("weight expects {wf} features, input has {f}")));
        }
        let mut out = vec![T::zero(); n * o];
        // Y (n×o) = X (n×f) · Wᵀ (f×o)
        T::gemm(n, f, o, xt.data(), f as isize, 1, wt.data(), 1, f as isize, T::zero(), &mut out, o as isize, 1);
        let mut parents = vec![x, w];
        if let Some(b) = bias {
            let bt = self.real(b)?;
            if bt.len() != o {
                return Err(shape_err("linear", format!("bias of {} for {o} outputs", bt.len())));
            }
            for row in out.chunks_mut(o) {
                for (y, &bv) in row.iter_mut().zip(bt.data()) {
                    *y += bv;
                }
            }
            parents.push(b);
        }
        let has_bias = bias.is_some();
        self.push("linear", Value::Real(Tensor::new(vec![n, o], out)?), &parents, move |g, ins, _| {
            let g = g.as_real()?;
            let x = ins[0].as_real()?;
            let w = ins[1].as_real()?;
            let mut dx = vec![T::zero(); n * f];
            T::gemm(n, o, f, g.data(), o as isize, 1, w.data(), f as isize, 1, T::zero(), &mut dx, f as isize, 1);
            let mut dw = vec![T::zero(); o * f];
            T::gemm(o, n, f, g.data(), 1, o as isize, x.data(), f as isize, 1, T::zero(), &mut dw, f as isize, 1);
            let mut res = vec![r(Tensor::new(x.shape().to_vec(), dx)?), r(Tensor::new(vec![o, f], dw)?)];
            if has_bias {
                let mut db = vec![T::zero(); o];
                for row in g.data().chunks(o) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                res.push(r(Tensor::new(vec![o], db)?));
            }
            Ok(res)
        })
    }

    /// Real batch normalization over (N, H, W) per channel. Returns the batch
    /// means and variances when they were computed from the batch.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<T>,
        eps: T,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let xt = self.real(x)?;
        let (n, ch, plane) = channel_layout(xt.shape())?;
        let m = T::from(n * plane).unwrap();
        let (mean, var) = match &stats {
            NormStats::Batch => {
                let mut mean = vec![T::zero(); ch];
                let mut var = vec![T::zero(); ch];
                for (i, &v) in xt.data().iter().enumerate() {
                    mean[channel_of(i, ch, plane)] += v;
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for (i, &v) in xt.data().iter().enumerate() {
                    let k = channel_of(i, ch, plane);
                    var[k] += (v - mean[k]) * (v - mean[k]);
                }
                var.iter_mut().for_each(|v| *v /= m);
                (mean, var)
            }
            NormStats::Fixed(s) if s.len() == 2 * ch => (s[..ch].to_vec(), s[ch..].to_vec()),
            NormStats::Fixed(s) => {
                return Err(shape_err("batch_norm", format!("{} frozen stats for {ch} channels", s.len())))
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gm = self.real(gamma)?.data().to_vec();
        let bt = self.real(beta)?.data().to_vec();
        if gm.len() != ch || bt.len() != ch {
            return Err(shape_err("batch_norm", "affine parameters must have one entry per channel"));
        }
        let xhat = Tensor::new(
            xt.shape().to_vec(),
            xt.data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let k = channel_of(i, ch, plane);
                    (v - mean[k]) * inv_std[k]
                })
                .collect(),
        )?;
        let y = Tensor::new(
            xt.shape().to_vec(),
            xhat.data()
                .iter()
                .enumerate()
                .map(|(i, &h)| {
                    let k = channel_of(i, ch, plane);
                    gm[k] * h + bt[k]
                })
                .collect(),
        )?;
        let batch = matches!(stats, NormStats::Batch);
        let out_stats = batch.then(|| (mean.clone(), var.clone()));
        let var_out = self.push("batch_norm", Value::Real(y), &[x, gamma, beta], move |g, ins, _| {
            let g = g.as_real()?;
            let gamma = ins[1].as_real()?.data();
            let mut dgamma = vec![T::zero(); ch];
            let mut dbeta = vec![T::zero(); ch];
            for (i, (&gv, &h)) in g.data().iter().zip(xhat.data()).enumerate() {
                let k = channel_of(i, ch, plane);
                dgamma[k] += gv * h;
                dbeta[k] += gv;
            }
            let dx: Vec<T> = if batch {
                // dx = inv_std/M · (M·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                let mut s1 = vec![T::zero(); ch];
                let mut s2 = vec![T::zero(); ch];
                for (i, (&gv, &h)) in g.data().iter().zip(xhat.data()).enumerate() {
                    let k = channel_of(i, ch, plane);
                    s1[k] += gv * gamma[k];
                    s2[k] += gv * gamma[k] * h;
                }
                g.data()
                    .iter()
                    .zip(xhat.data())
                    .enumerate()
                    .map(|(i, (&gv, &h))| {
                        let k = channel_of(i, ch, plane);
                        inv_std[k] / m * (m * gv * gamma[k] - s1[k] - h * s2[k])
                    })
                    .collect()
            } else {
                g.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| {
                        let k = channel_of(i, ch, plane);
                        gv * gamma[k] * inv_std[k]
                    })
                    .collect()
            };
            Ok(vec![
                r(Tensor::new(g.shape().to_vec(), dx)?),
                r(Tensor::new(vec![ch], dgamma)?),
                r(Tensor::new(vec![ch], dbeta)?),
            ])
        })?;
        Ok((var_out, out_stats))
    }

    /// Real max pooling (square window).
    pub fn maxpool(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let xt = self.real(x)?;
        let in_shape = xt.shape().to_vec();
        let (out, arg) = pool::maxpool(xt, window, stride)?;
        self.push("maxpool", Value::Real(out), &[x], move |g, _, _| {
            Ok(vec![r(pool::scatter_argmax(g.as_real()?, &arg, &in_shape)?)])
        })
    }

    /// Magnitude max pooling: copies the complex element of largest modulus.
    pub fn mag_maxpool(&mut self, z: Var, window: usize, stride: usize) -> Result<Var> {
        let zt = self.complex_value(z)?;
        let in_shape = zt.shape().to_vec();
        let (out, arg) = pool::mag_maxpool(zt, window, stride)?;
        self.push("mag_maxpool", Value::Complex(out), &[z], move |g, _, _| {
            let g = g.as_complex()?;
            Ok(vec![c(ComplexTensor::new(
                pool::scatter_argmax(g.re(), &arg, &in_shape)?,
                pool::scatter_argmax(g.im(), &arg, &in_shape)?,
            )?)])
        })
    }

    /// Window average; works on real and complex values.
    pub fn avgpool(&mut self, x: Var, kh: usize, kw: usize, stride: usize) -> Result<Var> {
        let in_shape = self.value(x).shape().to_vec();
        let v = map_value(self.value(x), |t| pool::avgpool(t, kh, kw, stride))?;
        self.push("avgpool", v, &[x], move |g, _, _| {
            Ok(vec![Some(map_value(g, |t| pool::avgpool_backward(t, &in_shape, kh, kw, stride))?)])
        })
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let v = map_value(self.value(x), |t| pool::upsample_nearest(t, factor))?;
        self.push("upsample", v, &[x], move |g, _, _| {
            Ok(vec![Some(map_value(g, |t| pool::upsample_nearest_backward(t, factor))?)])
        })
    }

    pub fn pad2d(&mut self, x: Var, pad: usize) -> Result<Var> {
        let v = map_value(self.value(x), |t| pool::pad2d(t, pad))?;
        self.push("pad2d", v, &[x], move |g, _, _| Ok(vec![Some(map_value(g, |t| pool::crop2d(t, pad))?)]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let ca = self.real(a)?.shape().get(1).copied().unwrap_or(0);
        let v = pool::concat_channels(self.real(a)?, self.real(b)?)?;
        self.push("concat_channels", Value::Real(v), &[a, b], move |g, _, _| {
            let (ga, gb) = pool::split_channels(g.as_real()?, ca)?;
            Ok(vec![r(ga), r(gb)])
        })
    }

    /// Concatenates real values along the batch axis.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.real(p)).collect::<Result<_>>()?;
        let sizes: Vec<usize> = tensors.iter().map(|t| t.len()).collect();
        let shapes: Vec<Vec<usize>> = tensors.iter().map(|t| t.shape().to_vec()).collect();
        let v = Tensor::concat_batch(&tensors)?;
        self.push("concat_batch", Value::Real(v), parts, move |g, _, _| {
            let g = g.as_real()?.data();
            let mut off = 0;
            let mut out = Vec::with_capacity(sizes.len());
            for (len, shape) in sizes.iter().zip(&shapes) {
                out.push(r(Tensor::new(shape.clone(), g[off..off + len].to_vec())?));
                off += len;
            }
            Ok(out)
        })
    }

    /// Gathers batch items `indices` (repeats allowed) of a real value.
    pub fn select_batch(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let xt = self.real(a)?;
        let in_shape = xt.shape().to_vec();
        let v = xt.select_batch(indices)?;
        let idx = indices.to_vec();
        self.push("select_batch", Value::Real(v), &[a], move |g, _, _| {
            let g = g.as_real()?;
            let stride = g.len() / idx.len().max(1);
            let mut dx = Tensor::zeros(&in_shape);
            let d = dx.data_mut();
            for (k, &i) in idx.iter().enumerate() {
                for (dst, &src) in d[i * stride..(i + 1) * stride].iter_mut().zip(&g.data()[k * stride..(k + 1) * stride]) {
                    *dst += src;
                }
            }
            Ok(vec![r(dx)])
        })
    }

    /// Mean softmax cross-entropy of `logits` (N, C, ...) against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lt = self.real(logits)?;
        let n = lt.batch();
        if labels.len() != n {
            return Err(shape_err("cross_entropy", format!("{} labels for batch {n}", labels.len())));
        }
        let classes = lt.len() / n.max(1);
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
        }
        let probs = softmax_rows(lt.data(), classes);
        let nf = T::from(n).unwrap();
        let loss: T = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let row = &lt.data()[i * classes..(i + 1) * classes];
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
                lse - row[y]
            })
            .sum::<T>()
            / nf;
        let shape = lt.shape().to_vec();
        let labels = labels.to_vec();
        self.push("cross_entropy", Value::Real(Tensor::scalar(loss)), &[logits], move |g, _, _| {
            let s = g.as_real()?.item() / nf;
            let mut d = probs.clone();
            for (i, &y) in labels.iter().enumerate() {
                d[i * classes + y] -= T::one();
            }
            d.iter_mut().for_each(|v| *v *= s);
            Ok(vec![r(Tensor::new(shape.clone(), d)?)])
        })
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.real(pred)?;
        let diff = p.sub(target)?;
        let n = T::from(diff.len().max(1)).unwrap();
        let loss = diff.data().iter().map(|&d| d * d).sum::<T>() / n;
        self.push("mse", Value::Real(Tensor::scalar(loss)), &[pred], move |g, _, _| {
            let s = g.as_real()?.item() * T::lit(2.0) / n;
            Ok(vec![r(diff.scale(s))])
        })
    }

    /// Builds `re + i·im` from two real values.
    pub fn complex(&mut self, re: Var, im: Var) -> Result<Var> {
        let z = ComplexTensor::new(self.real(re)?.clone(), self.real(im)?.clone())?;
        self.push("complex", Value::Complex(z), &[re, im], |g, _, _| {
            let g = g.as_complex()?;
            Ok(vec![r(g.real_part()), r(g.imag_part())])
        })
    }

    pub fn real_part(&mut self, z: Var) -> Result<Var> {
        let v = self.complex_value(z)?.real_part();
        self.push("real_part", Value::Real(v), &[z], |g, _, _| {
            Ok(vec![c(ComplexTensor::new(g.as_real()?.clone(), Tensor::zeros(g.shape()))?)])
        })
    }

    pub fn imag_part(&mut self, z: Var) -> Result<Var> {
        let v = self.complex_value(z)?.imag_part();
        self.push("imag_part", Value::Real(v), &[z], |g, _, _| {
            Ok(vec![c(ComplexTensor::new(Tensor::zeros(g.shape()), g.as_real()?.clone())?)])
        })
    }

    /// Multiplies by `e^{iθ}`; `thetas` holds one angle, or one per batch item.
    pub fn rotate(&mut self, z: Var, thetas: &[T]) -> Result<Var> {
        let zt = self.complex_value(z)?;
        let n = zt.shape().first().copied().unwrap_or(1);
        let angles: Vec<T> = match thetas.len() {
            1 => vec![thetas[0]; n],
            len if len == n => thetas.to_vec(),
            len => return Err(shape_err("rotate", format!("{len} angles for batch of {n}"))),
        };
        let v = if rank_is_batched(zt) { zt.rotate_per_item(&angles)? } else { zt.rotate(angles[0]) };
        self.push("rotate", Value::Complex(v), &[z], move |g, _, _| {
            let g = g.as_complex()?;
            let back: Vec<T> = angles.iter().map(|&t| -t).collect();
            let d = if rank_is_batched(g) { g.rotate_per_item(&back)? } else { g.rotate(back[0]) };
            Ok(vec![c(d)])
        })
    }

    /// `δ(f) = f·‖f‖ / max(‖f‖, c)` elementwise; `cs` holds one threshold or
    /// one per channel. Thresholds are treated as constants.
    pub fn delta(&mut self, z: Var, cs: &[T]) -> Result<Var> {
        let zt = self.complex_value(z)?;
        let (_, ch, plane) = if cs.len() == 1 { (1, 1, zt.len().max(1)) } else { channel_layout(zt.shape())? };
        if cs.len() != 1 && cs.len() != ch {
            return Err(shape_err("delta", format!("{} thresholds for {ch} channels", cs.len())));
        }
        if cs.iter().any(|&cv| !(cv > T::zero())) {
            return Err(Error::InvalidArgument("delta threshold c must be positive".into()));
        }
        let cs = cs.to_vec();
        let thr = move |i: usize| if cs.len() == 1 { cs[0] } else { cs[channel_of(i, ch, plane)] };
        let (re, im) = (zt.re().data(), zt.im().data());
        let mut ore = Vec::with_capacity(re.len());
        let mut oim = Vec::with_capacity(re.len());
        for i in 0..re.len() {
            let m = re[i].hypot(im[i]);
            let cv = thr(i);
            let s = if m > cv { T::one() } else { m / cv };
            ore.push(re[i] * s);
            oim.push(im[i] * s);
        }
        let shape = zt.shape().to_vec();
        let v = ComplexTensor::new(Tensor::new(shape.clone(), ore)?, Tensor::new(shape.clone(), oim)?)?;
        self.push("delta", Value::Complex(v), &[z], move |g, ins, _| {
            let g = g.as_complex()?;
            let x = ins[0].as_complex()?;
            let (u, w) = (x.re().data(), x.im().data());
            let (gu, gw) = (g.re().data(), g.im().data());
            let mut du = Vec::with_capacity(u.len());
            let mut dw = Vec::with_capacity(u.len());
            for i in 0..u.len() {
                let m = u[i].hypot(w[i]);
                let cv = thr(i);
                if m > cv {
                    du.push(gu[i]);
                    dw.push(gw[i]);
                } else if m > T::zero() {
                    // out = f·m/c; ∂/∂u = (g_u·m + u·⟨g, f⟩/m)/c
                    let dot = (gu[i] * u[i] + gw[i] * w[i]) / m;
                    du.push((gu[i] * m + u[i] * dot) / cv);
                    dw.push((gw[i] * m + w[i] * dot) / cv);
                } else {
                    du.push(T::zero());
                    dw.push(T::zero());
                }
            }
            Ok(vec![c(ComplexTensor::new(
                Tensor::new(shape.clone(), du)?,
                Tensor::new(shape.clone(), dw)?,
            )?)])
        })
    }

    /// Per-channel complex normalization `f / sqrt(E_{n,i,j}‖f‖² + eps)`.
    /// Returns the batch mean squared modulus per channel when computed.
    pub fn complex_norm(&mut self, z: Var, stats: NormStats<T>, eps: T) -> Result<(Var, Option<Vec<T>>)> {
        let zt = self.complex_value(z)?;
        let (n, ch, plane) = channel_layout(zt.shape())?;
        if n * plane == 0 {
            return Err(shape_err("complex_norm", "batch and spatial extents must be nonempty"));
        }
        let m = T::from(n * plane).unwrap();
        let (re, im) = (zt.re().data(), zt.im().data());
        let ms = match &stats {
            NormStats::Batch => {
                let mut ms = vec![T::zero(); ch];
                for i in 0..re.len() {
                    ms[channel_of(i, ch, plane)] += re[i] * re[i] + im[i] * im[i];
                }
                ms.iter_mut().for_each(|v| *v /= m);
                ms
            }
            NormStats::Fixed(s) if s.len() == ch => s.clone(),
            NormStats::Fixed(s) => {
                return Err(shape_err("complex_norm", format!("{} frozen stats for {ch} channels", s.len())))
            }
        };
        let scale: Vec<T> = ms.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let shape = zt.shape().to_vec();
        let apply = |d: &[T]| -> Vec<T> {
            d.iter().enumerate().map(|(i, &v)| v * scale[channel_of(i, ch, plane)]).collect()
        };
        let v = ComplexTensor::new(Tensor::new(shape.clone(), apply(re))?, Tensor::new(shape.clone(), apply(im))?)?;
        let batch = matches!(stats, NormStats::Batch);
        let out_stats = batch.then(|| ms.clone());
        let var = self.push("complex_norm", Value::Complex(v), &[z], move |g, ins, _| {
            let g = g.as_complex()?;
            let x = ins[0].as_complex()?;
            let (u, w) = (x.re().data(), x.im().data());
            let (gu, gw) = (g.re().data(), g.im().data());
            let mut dot = vec![T::zero(); ch];
            if batch {
                for i in 0..u.len() {
                    dot[channel_of(i, ch, plane)] += gu[i] * u[i] + gw[i] * w[i];
                }
            }
            // d/du = g_u·r − (r³/M)·u·Σ⟨g, f⟩ over the channel
            let grad = |gd: &[T], xd: &[T]| -> Vec<T> {
                (0..gd.len())
                    .map(|i| {
                        let k = channel_of(i, ch, plane);
                        let rk = scale[k];
                        gd[i] * rk - rk * rk * rk / m * xd[i] * dot[k]
                    })
                    .collect()
            };
            Ok(vec![c(ComplexTensor::new(
                Tensor::new(shape.clone(), grad(gu, u))?,
                Tensor::new(shape.clone(), grad(gw, w))?,
            )?)])
        })?;
        Ok((var, out_stats))
    }

    /// Multiplies by a constant per-element mask; a complex value uses the
    /// same mask on both planes.
    pub fn mask(&mut self, x: Var, mask: Tensor<T>) -> Result<Var> {
        let v = map_value(self.value(x), |t| t.mul(&mask))?;
        self.push("mask", v, &[x], move |g, _, _| Ok(vec![Some(map_value(g, |t| t.mul(&mask))?)]))
    }
}

fn rank_is_batched<T: Scalar>(z: &ComplexTensor<T>) -> bool {
    !z.shape().is_empty()
}

/// Row-wise softmax of a flat (rows × cols) buffer.
pub(crate) fn softmax_rows<T: Scalar>(data: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(cols.max(1)) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
        let z: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}
