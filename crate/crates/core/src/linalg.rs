//! Scalar abstraction and the small dense kernels everything runs on.
//!
//! The whole numeric stack is generic over [`Real`] so the same model code
//! runs in f32 (training speed) and f64 (finite-difference gradient checks,
//! tight patching-identity tolerances). Every kernel uses a fixed summation
//! order, so results are bit-reproducible for a given scalar type and build.

use num_traits::Float;

/// Floating-point scalar the numeric stack is generic over.
pub trait Real:
    Float + num_traits::NumAssign + Copy + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Lanes of independent accumulation in reductions. Multiple chains let LLVM
/// vectorize without reassociating a single serial sum (which it must not do),
/// while keeping the summation order fixed and platform-independent.
const LANES: usize = 8;

/// Dot product with a fixed lane-split summation order.
#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut acc = [F::zero(); LANES];
    let whole = n - n % LANES;
    let mut i = 0;
    while i < whole {
        for l in 0..LANES {
            acc[l] = acc[l] + a[i + l] * b[i + l];
        }
        i += LANES;
    }
    let mut tail = F::zero();
    while i < n {
        tail += a[i] * b[i];
        i += 1;
    }
    // Pairwise combine the lanes (fixed order).
    let s01 = acc[0] + acc[1];
    let s23 = acc[2] + acc[3];
    let s45 = acc[4] + acc[5];
    let s67 = acc[6] + acc[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

/// `y += alpha * x`.
#[inline]
pub fn axpy<F: Real>(y: &mut [F], alpha: F, x: &[F]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y[t*d_out + o] = dot(x_t, w_o)` for `t` rows of `x` against a row-major
/// weight matrix `w: [d_out][d_in]`. The per-(t, o) dot is the primitive, so
/// any caller computing the same entry reproduces it bit-for-bit.
pub fn matmul<F: Real>(y: &mut [F], x: &[F], w: &[F], rows: usize, d_in: usize, d_out: usize) {
    debug_assert_eq!(x.len(), rows * d_in);
    debug_assert_eq!(w.len(), d_out * d_in);
    debug_assert_eq!(y.len(), rows * d_out);
    for t in 0..rows {
        let xt = &x[t * d_in..(t + 1) * d_in];
        let yt = &mut y[t * d_out..(t + 1) * d_out];
        for o in 0..d_out {
            yt[o] = dot(xt, &w[o * d_in..(o + 1) * d_in]);
        }
    }
}

/// Backward of [`matmul`] w.r.t. the input: `dx[t] += dy[t] · W` (row-major W).
pub fn matmul_dx<F: Real>(dx: &mut [F], dy: &[F], w: &[F], rows: usize, d_in: usize, d_out: usize) {
    debug_assert_eq!(dx.len(), rows * d_in);
    debug_assert_eq!(dy.len(), rows * d_out);
    for t in 0..rows {
        let dxt = &mut dx[t * d_in..(t + 1) * d_in];
        let dyt = &dy[t * d_out..(t + 1) * d_out];
        for o in 0..d_out {
            axpy(dxt, dyt[o], &w[o * d_in..(o + 1) * d_in]);
        }
    }
}

/// Backward of [`matmul`] w.r.t. the weights: `dw[o] += Σ_t dy[t][o] * x[t]`.
pub fn matmul_dw<F: Real>(dw: &mut [F], dy: &[F], x: &[F], rows: usize, d_in: usize, d_out: usize) {
    debug_assert_eq!(dw.len(), d_out * d_in);
    for t in 0..rows {
        let xt = &x[t * d_in..(t + 1) * d_in];
        let dyt = &dy[t * d_out..(t + 1) * d_out];
        for o in 0..d_out {
            axpy(&mut dw[o * d_in..(o + 1) * d_in], dyt[o], xt);
        }
    }
}

/// Numerically stable softmax (max subtraction) of `x` into `out`.
pub fn softmax_into<F: Real>(out: &mut [F], x: &[F]) {
    debug_assert_eq!(out.len(), x.len());
    let mut m = x[0];
    for &v in &x[1..] {
        if v > m {
            m = v;
        }
    }
    let mut sum = F::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - m).exp();
        *o = e;
        sum += e;
    }
    let inv = F::one() / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// RMS-normalizes `x` into `out` (pre-gain): `out = x / rms(x)` with
/// `rms(x) = sqrt(mean(x²) + eps)`. Returns the reciprocal RMS, which the
/// backward pass reuses.
#[inline]
pub fn rms_normalize_into<F: Real>(out: &mut [F], x: &[F], eps: F) -> F {
    debug_assert_eq!(out.len(), x.len());
    let n = F::from_f64(x.len() as f64);
    let ms = dot(x, x) / n;
    let inv_rms = F::one() / (ms + eps).sqrt();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v * inv_rms;
    }
    inv_rms
}

/// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
#[inline]
pub fn gelu<F: Real>(x: F) -> F {
    let c = F::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = F::from_f64(0.044_715);
    let half = F::from_f64(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
#[inline]
pub fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::from_f64(0.797_884_560_802_865_4);
    let k = F::from_f64(0.044_715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * k * x * x)
}
