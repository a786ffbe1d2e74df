//! 2-D convolution via im2col and a single batched GEMM.
//!
//! Columns for the whole batch are laid out as a `(C·kh·kw) × (N·P)` matrix,
//! where `P = oh·ow`, so forward and both backward passes are one GEMM each.
//! Complex inputs reuse these kernels by treating the two planes as a batch
//! of `2N` real images.

use crate::error::{shape_err, Result};
use crate::tensor::{ComplexTensor, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, w) = match x_shape {
            &[n, c, h, w] => (n, c, h, w),
            _ => return Err(shape_err("conv2d", format!("input must be 4-D, got {x_shape:?}"))),
        };
        let (o, wc, kh, kw) = match w_shape {
            &[o, wc, kh, kw] => (o, wc, kh, kw),
            _ => return Err(shape_err("conv2d", format!("kernel must be 4-D, got {w_shape:?}"))),
        };
        if wc != c {
            return Err(shape_err(
                "conv2d",
                format!("kernel expects {wc} input channels, input has {c}"),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn with_batch(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.o, self.oh, self.ow]
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.positions();
    let np = g.n * p;
    let mut cols = vec![T::zero(); g.patch() * np];
    for n in 0..g.n {
        let xn = &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        for c in 0..g.c {
            let plane = &xn[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (c * g.kh + ki) * g.kw + kj;
                    let dst = &mut cols[row * np + n * p..row * np + (n + 1) * p];
                    for oi in 0..g.oh {
                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                        for oj in 0..g.ow {
                            let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                            if jj >= 0 && jj < g.w as isize {
                                dst[oi * g.ow + oj] = src_row[jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.positions();
    let np = g.n * p;
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for n in 0..g.n {
        let xn = &mut x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        for c in 0..g.c {
            let plane = &mut xn[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (c * g.kh + ki) * g.kw + kj;
                    let src = &cols[row * np + n * p..row * np + (n + 1) * p];
                    for oi in 0..g.oh {
                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        let ii = ii as usize;
                        for oj in 0..g.ow {
                            let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                            if jj >= 0 && jj < g.w as isize {
                                plane[ii * g.w + jj as usize] += src[oi * g.ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Input as a `(C, N·P)` column matrix for pointwise kernels.
fn pointwise_cols<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.positions();
    let np = g.n * p;
    let mut cols = vec![T::zero(); g.c * np];
    for n in 0..g.n {
        for c in 0..g.c {
            cols[c * np + n * p..c * np + (n + 1) * p]
                .copy_from_slice(&x[(n * g.c + c) * p..(n * g.c + c + 1) * p]);
        }
    }
    cols
}

fn columns<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    if g.is_pointwise() {
        pointwise_cols(x, g)
    } else {
        im2col(x, g)
    }
}

/// `(N, O, P)` ⇄ `(O, N·P)` reordering.
fn nop_to_onp<T: Scalar>(src: &[T], n: usize, o: usize, p: usize) -> Vec<T> {
    let mut dst = vec![T::zero(); src.len()];
    for ni in 0..n {
        for oi in 0..o {
            dst[oi * n * p + ni * p..oi * n * p + (ni + 1) * p]
                .copy_from_slice(&src[(ni * o + oi) * p..(ni * o + oi + 1) * p]);
        }
    }
    dst
}

fn onp_to_nop<T: Scalar>(src: &[T], n: usize, o: usize, p: usize) -> Vec<T> {
    let mut dst = vec![T::zero(); src.len()];
    for ni in 0..n {
        for oi in 0..o {
            dst[(ni * o + oi) * p..(ni * o + oi + 1) * p]
                .copy_from_slice(&src[oi * n * p + ni * p..oi * n * p + (ni + 1) * p]);
        }
    }
    dst
}

fn forward_raw<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let p = g.positions();
    let np = g.n * p;
    let k = g.patch();
    let cols = columns(x, g);
    let mut y = vec![T::zero(); g.o * np];
    T::gemm(g.o, k, np, w, k as isize, 1, &cols, np as isize, 1, T::zero(), &mut y, np as isize, 1);
    let mut out = onp_to_nop(&y, g.n, g.o, p);
    if let Some(b) = bias {
        for ni in 0..g.n {
            for oi in 0..g.o {
                let bv = b[oi];
                for v in &mut out[(ni * g.o + oi) * p..(ni * g.o + oi + 1) * p] {
                    *v += bv;
                }
            }
        }
    }
    out
}

fn backward_input_raw<T: Scalar>(gout: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.positions();
    let np = g.n * p;
    let k = g.patch();
    let gm = nop_to_onp(gout, g.n, g.o, p);
    // dcols (k × np) = Wᵀ (k × o) · G (o × np)
    let mut dcols = vec![T::zero(); k * np];
    T::gemm(k, g.o, np, w, 1, k as isize, &gm, np as isize, 1, T::zero(), &mut dcols, np as isize, 1);
    if g.is_pointwise() {
        onp_to_nop(&dcols, g.n, g.c, p)
    } else {
        col2im(&dcols, g)
    }
}

fn backward_weight_raw<T: Scalar>(gout: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.positions();
    let np = g.n * p;
    let k = g.patch();
    let gm = nop_to_onp(gout, g.n, g.o, p);
    let cols = columns(x, g);
    // dW (o × k) = G (o × np) · colsᵀ (np × k)
    let mut dw = vec![T::zero(); g.o * k];
    T::gemm(g.o, np, k, &gm, np as isize, 1, &cols, 1, np as isize, T::zero(), &mut dw, k as isize, 1);
    dw
}

fn bias_grad_raw<T: Scalar>(gout: &[T], n: usize, o: usize, p: usize) -> Vec<T> {
    let mut db = vec![T::zero(); o];
    for ni in 0..n {
        for (oi, d) in db.iter_mut().enumerate() {
            *d += gout[(ni * o + oi) * p..(ni * o + oi + 1) * p].iter().copied().sum::<T>();
        }
    }
    db
}

/// Real convolution (cross-correlation) with optional per-channel bias.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.len() != g.o {
            return Err(shape_err("conv2d", format!("bias of {} for {} filters", b.len(), g.o)));
        }
    }
    let out = forward_raw(x.data(), w.data(), bias.map(|b| b.data()), &g);
    Tensor::new(g.out_shape().to_vec(), out)
}

/// Complex input, real kernel, no bias: `conv(re) + i·conv(im)`.
pub fn conv2d_complex<T: Scalar>(
    x: &ComplexTensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ComplexTensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    let g2 = g.with_batch(2 * g.n);
    let stacked = stack_planes(x);
    let out = forward_raw(&stacked, w.data(), None, &g2);
    split_planes(out, &g.out_shape())
}

pub fn conv2d_backward_input<T: Scalar>(
    gout: &Tensor<T>,
    w: &Tensor<T>,
    x_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x_shape, w.shape(), stride, pad)?;
    Tensor::new(x_shape.to_vec(), backward_input_raw(gout.data(), w.data(), &g))
}

pub fn conv2d_backward_weight<T: Scalar>(
    gout: &Tensor<T>,
    x: &Tensor<T>,
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w_shape, stride, pad)?;
    Tensor::new(w_shape.to_vec(), backward_weight_raw(gout.data(), x.data(), &g))
}

pub fn conv2d_backward_bias<T: Scalar>(gout: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, o, h, w) = gout.dims4()?;
    Tensor::new(vec![o], bias_grad_raw(gout.data(), n, o, h * w))
}

pub fn conv2d_complex_backward_input<T: Scalar>(
    gout: &ComplexTensor<T>,
    w: &Tensor<T>,
    x_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ComplexTensor<T>> {
    let g = ConvGeom::new(x_shape, w.shape(), stride, pad)?;
    let g2 = g.with_batch(2 * g.n);
    let dx = backward_input_raw(&stack_planes(gout), w.data(), &g2);
    split_planes(dx, x_shape)
}

pub fn conv2d_complex_backward_weight<T: Scalar>(
    gout: &ComplexTensor<T>,
    x: &ComplexTensor<T>,
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w_shape, stride, pad)?;
    let g2 = g.with_batch(2 * g.n);
    let dw = backward_weight_raw(&stack_planes(gout), &stack_planes(x), &g2);
    Tensor::new(w_shape.to_vec(), dw)
}

fn stack_planes<T: Scalar>(x: &ComplexTensor<T>) -> Vec<T> {
    let mut v = Vec::with_capacity(2 * x.len());
    v.extend_from_slice(x.re().data());
    v.extend_from_slice(x.im().data());
    v
}

fn split_planes<T: Scalar>(mut data: Vec<T>, shape: &[usize]) -> Result<ComplexTensor<T>> {
    let half = data.len() / 2;
    let im = data.split_off(half);
    ComplexTensor::new(Tensor::new(shape.to_vec(), data)?, Tensor::new(shape.to_vec(), im)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Direct six-loop convolution used as an independent oracle.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, s: usize, p: usize) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (o, _, kh, kw) = w.dims4().unwrap();
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (wd + 2 * p - kw) / s + 1;
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for ni in 0..n {
            for oi in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[oi]);
                        for ci in 0..c {
                            for a in 0..kh {
                                for bb in 0..kw {
                                    let ii = (i * s + a) as isize - p as isize;
                                    let jj = (j * s + bb) as isize - p as isize;
                                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                                        acc += x.data()[((ni * c + ci) * h + ii as usize) * wd + jj as usize]
                                            * w.data()[((oi * c + ci) * kh + a) * kw + bb];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((ni * o + oi) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = Rng::new(21);
        for &(s, p, k) in &[(1, 0, 3), (2, 1, 3), (1, 2, 5), (1, 0, 1), (2, 0, 1)] {
            let x: Tensor<f64> = rng.sample_gaussian(&[2, 3, 7, 6]);
            let w: Tensor<f64> = rng.sample_gaussian(&[4, 3, k, k]);
            let b: Tensor<f64> = rng.sample_gaussian(&[4]);
            let fast = conv2d(&x, &w, Some(&b), s, p).unwrap();
            let slow = naive_conv(&x, &w, Some(&b), s, p);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.sub(&slow).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_linearity_example() {
        let x = ComplexTensor::new(
            Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(),
            Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(),
        )
        .unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d_complex(&x, &w, 1, 0).unwrap();
        assert_eq!(y.re().item(), 2.0);
        assert_eq!(y.im().item(), 2.0);
    }

    #[test]
    fn complex_conv_is_planewise() {
        let mut rng = Rng::new(4);
        let re: Tensor<f64> = rng.sample_gaussian(&[2, 2, 5, 5]);
        let im: Tensor<f64> = rng.sample_gaussian(&[2, 2, 5, 5]);
        let w: Tensor<f64> = rng.sample_gaussian(&[3, 2, 3, 3]);
        let z = conv2d_complex(&ComplexTensor::new(re.clone(), im.clone()).unwrap(), &w, 1, 1).unwrap();
        assert!(z.re().sub(&conv2d(&re, &w, None, 1, 1).unwrap()).unwrap().max_abs() < 1e-13);
        assert!(z.im().sub(&conv2d(&im, &w, None, 1, 1).unwrap()).unwrap().max_abs() < 1e-13);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x: Tensor<f32> = Tensor::zeros(&[1, 3, 4, 4]);
        let w: Tensor<f32> = Tensor::zeros(&[2, 2, 3, 3]);
        assert!(conv2d(&x, &w, None, 1, 0).is_err());
    }
}
