//! Pooling, resampling and padding kernels on 4-D tensors.

use crate::error::{shape_err, Result};
use crate::tensor::{ComplexTensor, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    pub fn new(shape: &[usize], kh: usize, kw: usize, stride: usize) -> Result<Self> {
        let (n, c, h, w) = match shape {
            &[n, c, h, w] => (n, c, h, w),
            _ => return Err(shape_err("pool", format!("input must be 4-D, got {shape:?}"))),
        };
        if kh == 0 || kw == 0 || stride == 0 {
            return Err(shape_err("pool", "window and stride must be positive"));
        }
        if kh > h || kw > w {
            return Err(shape_err("pool", format!("window {kh}x{kw} exceeds input {h}x{w}")));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            oh: (h - kh) / stride + 1,
            ow: (w - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.c, self.oh, self.ow]
    }

    /// Visits every output cell with the flat input indices of its window in
    /// row-major order.
    fn for_each_window(&self, mut f: impl FnMut(usize, &mut dyn Iterator<Item = usize>)) {
        let mut out = 0;
        for plane in 0..self.n * self.c {
            let base = plane * self.h * self.w;
            for oi in 0..self.oh {
                for oj in 0..self.ow {
                    let (i0, j0) = (oi * self.stride, oj * self.stride);
                    let mut it = (0..self.kh)
                        .flat_map(move |a| (0..self.kw).map(move |b| (a, b)))
                        .map(|(a, b)| base + (i0 + a) * self.w + j0 + b);
                    f(out, &mut it);
                    out += 1;
                }
            }
        }
    }
}

/// Real max pooling; returns the output and the flat input index selected for
/// each output cell (first maximum in row-major order on ties).
pub fn maxpool<T: Scalar>(x: &Tensor<T>, window: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let g = PoolGeom::new(x.shape(), window, window, stride)?;
    let data = x.data();
    let mut out = Vec::with_capacity(g.n * g.c * g.oh * g.ow);
    let mut arg = Vec::with_capacity(out.capacity());
    g.for_each_window(|_, idx| {
        let mut best = usize::MAX;
        for i in idx {
            if best == usize::MAX || data[i] > data[best] {
                best = i;
            }
        }
        out.push(data[best]);
        arg.push(best);
    });
    Ok((Tensor::new(g.out_shape(), out)?, arg))
}

/// Selects, per window, the complex element with the largest modulus and
/// copies it verbatim. The lowest row-major index wins ties.
pub fn mag_maxpool<T: Scalar>(
    z: &ComplexTensor<T>,
    window: usize,
    stride: usize,
) -> Result<(ComplexTensor<T>, Vec<usize>)> {
    let g = PoolGeom::new(z.shape(), window, window, stride)?;
    let (re, im) = (z.re().data(), z.im().data());
    let mut out_re = Vec::with_capacity(g.n * g.c * g.oh * g.ow);
    let mut out_im = Vec::with_capacity(out_re.capacity());
    let mut arg = Vec::with_capacity(out_re.capacity());
    g.for_each_window(|_, idx| {
        let mut best = usize::MAX;
        let mut best_sq = T::zero();
        for i in idx {
            // squared modulus orders identically to the modulus
            let sq = re[i] * re[i] + im[i] * im[i];
            if best == usize::MAX || sq > best_sq {
                best = i;
                best_sq = sq;
            }
        }
        out_re.push(re[best]);
        out_im.push(im[best]);
        arg.push(best);
    });
    ComplexTensor::new(Tensor::new(g.out_shape(), out_re)?, Tensor::new(g.out_shape(), out_im)?)
        .map(|z| (z, arg))
}

/// Routes output gradients back to the recorded argmax positions.
pub fn scatter_argmax<T: Scalar>(gout: &Tensor<T>, arg: &[usize], in_shape: &[usize]) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(in_shape);
    let d = dx.data_mut();
    for (&g, &i) in gout.data().iter().zip(arg) {
        d[i] += g;
    }
    Ok(dx)
}

pub fn avgpool<T: Scalar>(x: &Tensor<T>, kh: usize, kw: usize, stride: usize) -> Result<Tensor<T>> {
    let g = PoolGeom::new(x.shape(), kh, kw, stride)?;
    let data = x.data();
    let inv = T::one() / T::from(kh * kw).unwrap();
    let mut out = Vec::with_capacity(g.n * g.c * g.oh * g.ow);
    g.for_each_window(|_, idx| {
        out.push(idx.map(|i| data[i]).sum::<T>() * inv);
    });
    Tensor::new(g.out_shape(), out)
}

pub fn avgpool_backward<T: Scalar>(
    gout: &Tensor<T>,
    in_shape: &[usize],
    kh: usize,
    kw: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = PoolGeom::new(in_shape, kh, kw, stride)?;
    let inv = T::one() / T::from(kh * kw).unwrap();
    let gd = gout.data();
    let mut dx = Tensor::zeros(in_shape);
    let d = dx.data_mut();
    g.for_each_window(|o, idx| {
        for i in idx {
            d[i] += gd[o] * inv;
        }
    });
    Ok(dx)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h * factor, w * factor);
    let src = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                out[(plane * oh + i) * ow + j] = src[(plane * h + i / factor) * w + j / factor];
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn upsample_nearest_backward<T: Scalar>(gout: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = gout.dims4()?;
    let (h, w) = (oh / factor, ow / factor);
    let src = gout.data();
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                dx[(plane * h + i / factor) * w + j / factor] += src[(plane * oh + i) * ow + j];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], dx)
}

/// Zero padding of `pad` cells on every spatial border.
pub fn pad2d<T: Scalar>(x: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h + 2 * pad, w + 2 * pad);
    let src = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        for i in 0..h {
            let dst = (plane * oh + i + pad) * ow + pad;
            out[dst..dst + w].copy_from_slice(&src[(plane * h + i) * w..(plane * h + i + 1) * w]);
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Inverse of [`pad2d`]: crops `pad` cells from every border.
pub fn crop2d<T: Scalar>(x: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = x.dims4()?;
    if oh < 2 * pad || ow < 2 * pad {
        return Err(shape_err("crop2d", format!("cannot crop {pad} from {oh}x{ow}")));
    }
    let (h, w) = (oh - 2 * pad, ow - 2 * pad);
    let src = x.data();
    let mut out = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        for i in 0..h {
            let s = (plane * oh + i + pad) * ow + pad;
            out[(plane * h + i) * w..(plane * h + i + 1) * w].copy_from_slice(&src[s..s + w]);
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Concatenates two 4-D tensors along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(shape_err("concat_channels", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let p = h * w;
    let mut out = Vec::with_capacity(n * (ca + cb) * p);
    for ni in 0..n {
        out.extend_from_slice(&a.data()[ni * ca * p..(ni + 1) * ca * p]);
        out.extend_from_slice(&b.data()[ni * cb * p..(ni + 1) * cb * p]);
    }
    Tensor::new(vec![n, ca + cb, h, w], out)
}

/// Splits a channel concatenation back into its `first`-channel head and the rest.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if first > c {
        return Err(shape_err("split_channels", format!("{first} of {c} channels")));
    }
    let p = h * w;
    let mut a = Vec::with_capacity(n * first * p);
    let mut b = Vec::with_capacity(n * (c - first) * p);
    for ni in 0..n {
        let base = ni * c * p;
        a.extend_from_slice(&x.data()[base..base + first * p]);
        b.extend_from_slice(&x.data()[base + first * p..base + c * p]);
    }
    Ok((Tensor::new(vec![n, first, h, w], a)?, Tensor::new(vec![n, c - first, h, w], b)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c1(re: Vec<f64>, im: Vec<f64>, h: usize, w: usize) -> ComplexTensor<f64> {
        ComplexTensor::new(
            Tensor::new(vec![1, 1, h, w], re).unwrap(),
            Tensor::new(vec![1, 1, h, w], im).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn magnitude_winner_is_copied() {
        // window [[1+0i, 0], [0, -3i]]
        let z = c1(vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, -3.0], 2, 2);
        let (out, arg) = mag_maxpool(&z, 2, 2).unwrap();
        assert_eq!(out.re().item(), 0.0);
        assert_eq!(out.im().item(), -3.0);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn ties_pick_first_row_major() {
        let z = c1(vec![0.0, 1.0, -1.0, 0.6], vec![1.0, 0.0, 0.0, 0.8], 2, 2);
        let (out, arg) = mag_maxpool(&z, 2, 2).unwrap();
        assert_eq!(arg, vec![0]);
        assert_eq!((out.re().item(), out.im().item()), (0.0, 1.0));
    }

    #[test]
    fn average_of_window() {
        let z = c1(vec![1.0, 3.0], vec![1.0, 3.0], 1, 2);
        let re = avgpool(z.re(), 1, 2, 1).unwrap();
        let im = avgpool(z.im(), 1, 2, 1).unwrap();
        assert_eq!((re.item(), im.item()), (2.0, 2.0));
    }

    #[test]
    fn pad_then_crop_round_trips() {
        let x = Tensor::from_fn(&[2, 3, 4, 5], |i| i as f64);
        let p = pad2d(&x, 2).unwrap();
        assert_eq!(p.shape(), &[2, 3, 8, 9]);
        assert_eq!(crop2d(&p, 2).unwrap(), x);
    }

    #[test]
    fn concat_split_round_trips() {
        let a = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64);
        let b = Tensor::from_fn(&[2, 1, 2, 2], |i| -(i as f64));
        let c = concat_channels(&a, &b).unwrap();
        let (a2, b2) = split_channels(&c, 3).unwrap();
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn window_larger_than_input_rejected() {
        let x: Tensor<f32> = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(avgpool(&x, 3, 3, 1).is_err());
    }
}
