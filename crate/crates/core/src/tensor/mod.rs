//! Dense row-major tensors with reverse-mode autodiff and the AdamW optimizer.
//!
//! `Tensor<E>` is a plain value type (no gradient state); gradients are
//! tracked by recording operations on a [`tape::Tape`]. Training runs in
//! `f32`; everything is generic over [`Element`] so gradient checks can run
//! the identical code in `f64`.

pub mod adamw;
pub mod gradcheck;
pub mod schedule;
pub mod tape;

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Scalar types the tensor engine works over. Implemented for `f32` and `f64`.
pub trait Element:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::AddAssign
    + Default
    + Send
    + Sync
    + 'static
{
    fn of_f64(x: f64) -> Self {
        num_traits::FromPrimitive::from_f64(x).expect("finite f64 converts to element")
    }
    fn to_f64_val(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("element converts to f64")
    }
}

impl Element for f32 {}
impl Element for f64 {}

/// Work threshold below which matmul stays single-threaded. Training
/// parallelizes across batch samples instead, so only genuinely large
/// products go row-parallel.
const PAR_MATMUL_MIN_FLOPS: usize = 1 << 22;

/// Dense n-dimensional array, contiguous row-major. Rank 0 is a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Element = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: E) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Uniform samples in `[lo, hi)`, drawn in f64 for rng-stream stability.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| E::of_f64(rng.gen_range(lo..hi)))
    }

    /// Gaussian samples with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite and positive");
        Self::from_fn(shape, |_| E::of_f64(dist.sample(rng)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Scalar value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() requires a single-element tensor");
        self.data[0]
    }

    /// Element at a full multi-index. Row-major.
    pub fn at(&self, index: &[usize]) -> E {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: E) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} (dim {dim})");
            off = off * dim + ix;
        }
        off
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(E) -> E + Sync) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(E, E) -> E) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
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

    pub fn scale(&self, c: E) -> Self {
        self.map(|x| x * c)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|x| x.to_f64_val()).sum()
    }

    pub fn mean_f64(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum_f64() / self.numel() as f64
        }
    }

    pub fn min_max(&self) -> (E, E) {
        let mut lo = E::infinity();
        let mut hi = E::neg_infinity();
        for &x in &self.data {
            if x < lo {
                lo = x;
            }
            if x > hi {
                hi = x;
            }
        }
        (lo, hi)
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`, row-parallel above a
    /// work threshold. Output rows are computed independently, so results
    /// do not depend on the rayon thread count.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = other.shape[1];
        let mut out = vec![E::zero(); m * n];
        let a = &self.data;
        let b = &other.data;

        let row = |i: usize, crow: &mut [E]| {
            let arow = &a[i * k..(i + 1) * k];
            for (p, &aip) in arow.iter().enumerate() {
                let brow = &b[p * n..(p + 1) * n];
                for (c, &bv) in crow.iter_mut().zip(brow) {
                    *c += aip * bv;
                }
            }
        };

        if m * n * k >= PAR_MATMUL_MIN_FLOPS {
            use rayon::prelude::*;
            out.par_chunks_mut(n).enumerate().for_each(|(i, crow)| row(i, crow));
        } else {
            for (i, crow) in out.chunks_mut(n).enumerate() {
                row(i, crow);
            }
        }
        Tensor::from_vec(&[m, n], out)
    }

    /// Materialized 2-D transpose.
    pub fn transposed(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                left: self.shape.clone(),
                right: vec![],
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![E::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_vec(&[c, r], out)
    }
}

impl Tensor<f32> {
    /// Lossless widening for f64 reference computations in tests and checks.
    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_matmul_is_identity() {
        let eye = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(eye.matmul(&x).unwrap(), x);
    }

    #[test]
    fn hand_matmul() {
        let a = Tensor::<f32>::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 5]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::<f64>::uniform(&[5, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.at(&[i, p]) * b.at(&[p, j]);
                }
                assert!((c.at(&[i, j]) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::uniform(&[3, 7], 0.0, 1.0, &mut rng);
        assert_eq!(x.transposed().unwrap().transposed().unwrap(), x);
    }

    #[test]
    fn scalar_rank_zero() {
        let s = Tensor::<f32>::scalar(2.5);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 2.5);
    }
}
