//! Dense real and complex tensors.
//!
//! A [`Tensor`] is a row-major array of [`Scalar`] values with an explicit
//! shape. A [`ComplexTensor`] is a pair of equally shaped real planes, so any
//! real kernel (convolution, pooling, dumps) can be reused on each plane.
//! 4-D tensors follow the (batch, channel, height, width) layout.

pub mod conv;
pub mod dump;
pub mod pool;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, NumAssign};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type of every tensor in the crate.
pub trait Scalar:
    Float + FloatConst + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const DTYPE: DType;

    /// `c = a * b + beta * c` for row/column strided matrices.
    ///
    /// `a` is m×k, `b` is k×n and `c` is m×n.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn lit(x: f64) -> Self {
        Self::from(x).expect("f64 literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Scalar for $t {
            const DTYPE: DType = $dtype;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // Bounds: the last touched element of each operand must be inside its slice.
                let last = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    (rows.saturating_sub(1) as isize * rs + cols.saturating_sub(1) as isize * cs)
                        as usize
                };
                if k > 0 {
                    assert!(last(m, k, rsa, csa) < a.len(), "gemm: lhs out of bounds");
                    assert!(last(k, n, rsb, csb) < b.len(), "gemm: rhs out of bounds");
                }
                assert!(last(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
                // SAFETY: strides and extents were checked against the slice lengths above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f32, DType::F32, matrixmultiply::sgemm);
impl_scalar!(f64, DType::F64, matrixmultiply::dgemm);

/// Dense row-major real tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extents of a 4-D tensor as (n, c, h, w).
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err("dims4", format!("expected rank 4, got {:?}", self.shape))),
        }
    }

    /// Number of items along the leading (batch) axis.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn into_shape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.sum() / T::from(self.data.len()).unwrap()
    }

    pub fn mean_abs(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.data.iter().map(|v| v.abs()).sum::<T>() / T::from(self.data.len()).unwrap()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts every element to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from(v).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    /// Copies the items `indices` of the leading axis into a new tensor.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Self> {
        let n = self.batch();
        let stride = if n == 0 { 0 } else { self.data.len() / n };
        let mut data = Vec::with_capacity(stride * indices.len());
        for &i in indices {
            if i >= n {
                return Err(shape_err("select_batch", format!("index {i} out of {n}")));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self { shape, data })
    }

    /// Concatenates tensors along the leading axis.
    pub fn concat_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_batch of nothing".into()))?;
        let tail = &first.shape[1..];
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(shape_err("concat_batch", format!("{:?} vs {:?}", p.shape, first.shape)));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Self { shape, data })
    }
}

/// Complex tensor stored as two parallel real planes.
#[derive(Clone, PartialEq)]
pub struct ComplexTensor<T> {
    re: Tensor<T>,
    im: Tensor<T>,
}

impl<T: Debug> Debug for ComplexTensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ComplexTensor{:?}", self.re.shape)
    }
}

impl<T: Scalar> ComplexTensor<T> {
    pub fn new(re: Tensor<T>, im: Tensor<T>) -> Result<Self> {
        re.check_same_shape(&im, "ComplexTensor::new")?;
        Ok(Self { re, im })
    }

    pub fn from_real(re: Tensor<T>) -> Self {
        let im = Tensor::zeros(re.shape());
        Self { re, im }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            re: Tensor::zeros(shape),
            im: Tensor::zeros(shape),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn re(&self) -> &Tensor<T> {
        &self.re
    }

    pub fn im(&self) -> &Tensor<T> {
        &self.im
    }

    pub fn into_parts(self) -> (Tensor<T>, Tensor<T>) {
        (self.re, self.im)
    }

    /// Copy of the real plane.
    pub fn real_part(&self) -> Tensor<T> {
        self.re.clone()
    }

    pub fn imag_part(&self) -> Tensor<T> {
        self.im.clone()
    }

    /// Elementwise modulus `sqrt(re² + im²)`.
    pub fn magnitude(&self) -> Tensor<T> {
        self.re
            .zip_map(&self.im, "magnitude", |a, b| a.hypot(b))
            .expect("planes share a shape")
    }

    /// Multiplies every element by `e^{iθ}`.
    pub fn rotate(&self, theta: T) -> Self {
        self.mul_complex_scalar(theta.cos(), theta.sin())
    }

    /// Rotates item `n` of the leading axis by `thetas[n]`.
    pub fn rotate_per_item(&self, thetas: &[T]) -> Result<Self> {
        let n = self.re.batch();
        if thetas.len() != n {
            return Err(shape_err(
                "rotate_per_item",
                format!("{} angles for batch of {n}", thetas.len()),
            ));
        }
        let stride = if n == 0 { 0 } else { self.len() / n };
        let mut re = self.re.clone();
        let mut im = self.im.clone();
        for (i, &t) in thetas.iter().enumerate() {
            let (s, c) = t.sin_cos();
            let r = &mut re.data[i * stride..(i + 1) * stride];
            let m = &mut im.data[i * stride..(i + 1) * stride];
            for (x, y) in r.iter_mut().zip(m.iter_mut()) {
                let (a, b) = (*x, *y);
                *x = a * c - b * s;
                *y = b * c + a * s;
            }
        }
        Ok(Self { re, im })
    }

    /// Multiplies every element by the complex scalar `alpha_re + i alpha_im`.
    pub fn mul_complex_scalar(&self, alpha_re: T, alpha_im: T) -> Self {
        let re = self
            .re
            .zip_map(&self.im, "mul_complex_scalar", |a, b| a * alpha_re - b * alpha_im)
            .expect("planes share a shape");
        let im = self
            .re
            .zip_map(&self.im, "mul_complex_scalar", |a, b| b * alpha_re + a * alpha_im)
            .expect("planes share a shape");
        Self { re, im }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        Ok(Self {
            re: self.re.add(&other.re)?,
            im: self.im.add(&other.im)?,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        Ok(Self {
            re: self.re.sub(&other.re)?,
            im: self.im.sub(&other.im)?,
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.re.add_assign(&other.re)?;
        self.im.add_assign(&other.im)
    }

    /// Largest element modulus, the complex ∞-norm.
    pub fn max_modulus(&self) -> T {
        self.re
            .data
            .iter()
            .zip(&self.im.data)
            .fold(T::zero(), |m, (&a, &b)| m.max(a.hypot(b)))
    }

    pub fn is_finite(&self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Ok(Self {
            re: self.re.reshape(shape)?,
            im: self.im.reshape(shape)?,
        })
    }

    pub fn cast<U: Scalar>(&self) -> ComplexTensor<U> {
        ComplexTensor {
            re: self.re.cast(),
            im: self.im.cast(),
        }
    }

    pub fn map_planes(&self, mut f: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Self> {
        Ok(Self {
            re: f(&self.re)?,
            im: f(&self.im)?,
        })
    }
}

/// Free-function form of [`ComplexTensor::rotate`].
pub fn rotate<T: Scalar>(x: &ComplexTensor<T>, theta: T) -> ComplexTensor<T> {
    x.rotate(theta)
}

pub fn real_part<T: Scalar>(x: &ComplexTensor<T>) -> Tensor<T> {
    x.real_part()
}

pub fn magnitude<T: Scalar>(x: &ComplexTensor<T>) -> Tensor<T> {
    x.magnitude()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use std::f64::consts::PI;

    fn scalar_c(re: f64, im: f64) -> ComplexTensor<f64> {
        ComplexTensor::new(Tensor::scalar(re), Tensor::scalar(im)).unwrap()
    }

    fn random_c(rng: &mut Rng, shape: &[usize]) -> ComplexTensor<f64> {
        ComplexTensor::new(rng.sample_gaussian(shape), rng.sample_gaussian(shape)).unwrap()
    }

    #[test]
    fn quarter_turn() {
        let out = rotate(&scalar_c(1.0, 0.0), PI / 2.0);
        assert!(out.re().item().abs() < 1e-15);
        assert!((out.im().item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rotate_by_zero_is_identity() {
        let mut rng = Rng::new(3);
        let x = random_c(&mut rng, &[2, 3, 4, 4]);
        assert_eq!(rotate(&x, 0.0), x);
    }

    #[test]
    fn rotation_group_law() {
        let mut rng = Rng::new(11);
        for _ in 0..20 {
            let x = random_c(&mut rng, &[1, 2, 3, 3]);
            let t1 = rng.uniform(-7.0, 7.0);
            let t2 = rng.uniform(-7.0, 7.0);
            let lhs = rotate(&rotate(&x, t1), t2);
            let rhs = rotate(&x, t1 + t2);
            assert!(lhs.sub(&rhs).unwrap().max_modulus() < 1e-12);
        }
    }

    #[test]
    fn rotation_preserves_magnitude_within_ulps() {
        let mut rng = Rng::new(5);
        let x: ComplexTensor<f32> = random_c(&mut rng, &[64]).cast();
        for _ in 0..20 {
            let theta = rng.uniform(0.0, 2.0 * PI) as f32;
            let before = x.magnitude();
            let after = rotate(&x, theta).magnitude();
            for (&a, &b) in before.data().iter().zip(after.data()) {
                assert!((a - b).abs() <= 4.0 * f32::EPSILON * a.max(b), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn rotate_back_round_trip() {
        let mut rng = Rng::new(8);
        let x = random_c(&mut rng, &[3, 4, 5]);
        let theta = 2.3;
        let back = rotate(&rotate(&x, theta), -theta);
        assert!(back.sub(&x).unwrap().max_modulus() < 1e-12);
        let xf: ComplexTensor<f32> = x.cast();
        let backf = rotate(&rotate(&xf, theta as f32), -theta as f32);
        assert!(backf.sub(&xf).unwrap().max_modulus() < 1e-5);
    }

    #[test]
    fn real_part_examples() {
        assert_eq!(real_part(&scalar_c(3.0, 4.0)).item(), 3.0);
        let a = 1.7;
        let theta = 0.9;
        let r = real_part(&rotate(&scalar_c(a, 0.0), -theta));
        assert!((r.item() - a * theta.cos()).abs() < 1e-15);
    }

    #[test]
    fn magnitude_examples() {
        assert_eq!(magnitude(&scalar_c(3.0, 4.0)).item(), 5.0);
        assert_eq!(magnitude(&scalar_c(0.0, 0.0)).item(), 0.0);
        let mut rng = Rng::new(1);
        let x = random_c(&mut rng, &[10]);
        let m1 = x.magnitude();
        let m2 = rotate(&x, 1.234).magnitude();
        assert!(m1.sub(&m2).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn per_item_rotation_matches_whole_rotation() {
        let mut rng = Rng::new(2);
        let x = random_c(&mut rng, &[3, 2, 2, 2]);
        let per = x.rotate_per_item(&[0.5, 0.5, 0.5]).unwrap();
        assert!(per.sub(&rotate(&x, 0.5)).unwrap().max_modulus() < 1e-15);
        assert!(x.rotate_per_item(&[0.5]).is_err());
    }

    #[test]
    fn shape_invariants() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(ComplexTensor::new(Tensor::<f32>::zeros(&[2]), Tensor::zeros(&[3])).is_err());
    }
}
