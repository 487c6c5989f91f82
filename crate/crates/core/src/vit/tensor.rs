use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rayon::prelude::*;

/// Floating-point element type of the model. Training runs in `f32`; the
/// `f64` instantiation exists for numerical checks.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + AddAssign + SubAssign + MulAssign + DivAssign + Sum + 'static
{
    fn of(x: f64) -> Self;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    /// Panics when `data.len()` differs from the shape's element count.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape {shape:?} does not match {} values", data.len());
        Tensor { shape: shape.to_vec(), data }
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

    /// Leading extent of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extent.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| U::of(x.to_f64().unwrap_or(f64::NAN))).collect() }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: T) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }
}

/// Below this many multiply-adds the kernels stay on the calling thread.
const PARALLEL_WORK: usize = 1 << 18;

/// `a (m x k) * b (k x n)`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    assert_eq!(b.rows(), k, "matmul inner dimensions {:?} x {:?}", a.shape, b.shape);
    let mut out = Tensor::zeros(&[m, n]);
    let kernel = |(i, row): (usize, &mut [T])| {
        let arow = &a.data[i * k..(i + 1) * k];
        for (p, &x) in arow.iter().enumerate() {
            if x == T::zero() {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &y) in row.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    };
    if m * k * n >= PARALLEL_WORK {
        out.data.par_chunks_mut(n.max(1)).enumerate().for_each(kernel);
    } else {
        out.data.chunks_mut(n.max(1)).enumerate().for_each(kernel);
    }
    out
}

/// `aᵀ (m x k, from a: k x m) * b (k x n)`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (k, m) = (a.rows(), a.cols());
    let n = b.cols();
    assert_eq!(b.rows(), k, "matmul_tn outer dimensions {:?} x {:?}", a.shape, b.shape);
    let mut out = Tensor::zeros(&[m, n]);
    let kernel = |(i, row): (usize, &mut [T])| {
        for p in 0..k {
            let x = a.data[p * m + i];
            if x == T::zero() {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &y) in row.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    };
    if m * k * n >= PARALLEL_WORK {
        out.data.par_chunks_mut(n.max(1)).enumerate().for_each(kernel);
    } else {
        out.data.chunks_mut(n.max(1)).enumerate().for_each(kernel);
    }
    out
}

/// `a (m x k) * bᵀ (k x n, from b: n x k)`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.rows(), a.cols());
    let n = b.rows();
    assert_eq!(b.cols(), k, "matmul_nt inner dimensions {:?} x {:?}", a.shape, b.shape);
    let mut out = Tensor::zeros(&[m, n]);
    let kernel = |(i, row): (usize, &mut [T])| {
        let arow = &a.data[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b.data[j * k..(j + 1) * k];
            *o = arow.iter().zip(brow).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
        }
    };
    if m * k * n >= PARALLEL_WORK {
        out.data.par_chunks_mut(n.max(1)).enumerate().for_each(kernel);
    } else {
        out.data.chunks_mut(n.max(1)).enumerate().for_each(kernel);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn kernels_agree_with_naive_product() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 13 % 7) as f64) * 0.5 - 1.0).collect();
        let expected = naive(&a, &b, m, k, n);
        let ta = Tensor::from_vec(&[m, k], a.clone());
        let tb = Tensor::from_vec(&[k, n], b.clone());
        assert_eq!(matmul(&ta, &tb).data(), &expected[..]);
        let at = Tensor::from_vec(&[k, m], transpose(&a, m, k));
        assert_eq!(matmul_tn(&at, &tb).data(), &expected[..]);
        let bt = Tensor::from_vec(&[n, k], transpose(&b, k, n));
        assert_eq!(matmul_nt(&ta, &bt).data(), &expected[..]);
    }

    #[test]
    fn parallel_path_matches_sequential_definition() {
        let (m, k, n) = (70, 80, 60);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 31 % 17) as f64) / 17.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 7 % 19) as f64) / 19.0).collect();
        let expected = naive(&a, &b, m, k, n);
        let got = matmul(&Tensor::from_vec(&[m, k], a), &Tensor::from_vec(&[k, n], b));
        for (g, e) in got.data().iter().zip(&expected) {
            assert!((g - e).abs() < 1e-9);
        }
    }
}
