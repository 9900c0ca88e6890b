//! Floating point abstraction shared by the numerical core.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Engine scalar: `f32` or `f64`.
///
/// Everything in the diffusion core (schedules, parameterizations, the
/// tiny denoiser, guidance composition and the reverse steppers) is written
/// against this trait. The Gaussian oracles always compute in `f64` and
/// convert at their boundary.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Tag used by the tensor file format.
    const DTYPE: crate::tensorfile::DType;

    fn of(v: f64) -> Self;

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// `c[m×n] = alpha * a[m×k] · b[k×n] + beta * c`, all row-major.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8>;

    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<Self>;
}

// Row-major strides for an optionally transposed operand.
fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // logical shape is rows×cols; storage is cols×rows when transposed
    let _ = rows;
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

impl Scalar for f64 {
    const DTYPE: crate::tensorfile::DType = crate::tensorfile::DType::F64;

    fn of(v: f64) -> Self {
        v
    }

    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        a_trans: bool,
        b: &[f64],
        b_trans: bool,
        beta: f64,
        c: &mut [f64],
    ) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        let (rsa, csa) = strides(m, k, a_trans);
        let (rsb, csb) = strides(k, n, b_trans);
        // SAFETY: bounds checked above; strides describe the row-major buffers.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn to_le_bytes_vec(values: &[f64]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<f64> {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }
}

impl Scalar for f32 {
    const DTYPE: crate::tensorfile::DType = crate::tensorfile::DType::F32;

    fn of(v: f64) -> Self {
        v as f32
    }

    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        a_trans: bool,
        b: &[f32],
        b_trans: bool,
        beta: f32,
        c: &mut [f32],
    ) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        let (rsa, csa) = strides(m, k, a_trans);
        let (rsb, csb) = strides(k, n, b_trans);
        // SAFETY: bounds checked above; strides describe the row-major buffers.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn to_le_bytes_vec(values: &[f32]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<f32> {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }
}
