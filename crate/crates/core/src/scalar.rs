//! Floating-point element types the library is generic over.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Storage tag written into checkpoint files.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Real scalar with a dense matrix-multiply kernel.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Copy + Debug + Display + Default + Send + Sync + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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

    /// Decodes from exactly `DTYPE.width()` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Constant used for masked attention scores.
    fn mask_value() -> Self {
        Self::from_f64_lossy(-1e9)
    }
}

macro_rules! check_gemm_bounds {
    ($m:expr, $k:expr, $n:expr, $a:expr, $rsa:expr, $csa:expr, $b:expr, $rsb:expr, $csb:expr, $c:expr, $rsc:expr, $csc:expr) => {{
        fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
            if rows == 0 || cols == 0 {
                0
            } else {
                ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
            }
        }
        assert!($rsa >= 0 && $csa >= 0 && $rsb >= 0 && $csb >= 0 && $rsc >= 0 && $csc >= 0);
        assert!(extent($m, $k, $rsa, $csa) <= $a.len(), "gemm: lhs out of bounds");
        assert!(extent($k, $n, $rsb, $csb) <= $b.len(), "gemm: rhs out of bounds");
        assert!(extent($m, $n, $rsc, $csc) <= $c.len(), "gemm: output out of bounds");
    }};
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        check_gemm_bounds!(m, k, n, a, rsa, csa, b, rsb, csb, c, rsc, csc);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: every strided access was bounds-checked above.
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
                rsc,
                csc,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        check_gemm_bounds!(m, k, n, a, rsa, csa, b, rsb, csb, c, rsc, csc);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: every strided access was bounds-checked above.
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
                rsc,
                csc,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Numerically stable `log(exp(a) + exp(b))`.
pub fn log_add<T: Scalar>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Stable log-sum-exp of a slice; `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let sum: T = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_loop() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect();
        let mut c = vec![0.0; 8];
        f64::gemm(2, 3, 4, 1.0, &a, 3, 1, &b, 4, 1, 0.0, &mut c, 4, 1);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn log_add_handles_neg_infinity() {
        assert_eq!(log_add(f64::NEG_INFINITY, 1.5), 1.5);
        let v = log_add(0.0f64, 0.0);
        assert!((v - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp::<f64>(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn le_roundtrip() {
        let mut buf = Vec::new();
        1.25f32.write_le(&mut buf);
        (-3.5f64).write_le(&mut buf);
        assert_eq!(f32::read_le(&buf[..4]), 1.25);
        assert_eq!(f64::read_le(&buf[4..]), -3.5);
    }
}
