//! Dense row-major tensors and the reverse-mode tape.
//!
//! Everything trains in f32. The same code instantiates with f64 through the
//! [`Real`] trait; that mode exists for gradient checking, where central
//! finite differences need the extra precision.

pub mod check;
pub mod optim;
pub mod tape;

pub use optim::{cosine_lr, AdamState, Param};
pub use tape::{Tape, Var};

use std::fmt;

/// Scalar element type for tensors: f32 (default) or f64 (gradient checks).
pub trait Real:
    num_traits::Float + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn lit(v: f64) -> Self;
    fn to_f64_(self) -> f64;
    fn to_f32_(self) -> f32;
    fn from_f32_(v: f32) -> Self;

    /// exp() tuned for the hot scan/activation paths. The f32 version is a
    /// branch-free polynomial (~1e-7 relative error) that autovectorizes;
    /// f64 falls back to libm since that mode only runs in small checks.
    fn fast_exp(self) -> Self;

    /// c[m,n] += a[m,k] * b[k,n], all row-major contiguous.
    fn gemm_nn_acc(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]);

    /// c[m,n] += a^T * b, where a is stored [r,m] and b is [r,n], row-major.
    fn gemm_tn_acc(r: usize, m: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]);
}

impl Real for f32 {
    #[inline(always)]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64_(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn to_f32_(self) -> f32 {
        self
    }
    #[inline(always)]
    fn from_f32_(v: f32) -> Self {
        v
    }
    #[inline(always)]
    fn fast_exp(self) -> Self {
        fast_exp_f32(self)
    }

    fn gemm_nn_acc(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        assert_eq!(a.len(), m * k);
        assert_eq!(b.len(), k * n);
        assert_eq!(c.len(), m * n);
        if m == 0 || k == 0 || n == 0 {
            return;
        }
        // Lengths asserted above; slices are contiguous row-major.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                1.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn gemm_tn_acc(r: usize, m: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        assert_eq!(a.len(), r * m);
        assert_eq!(b.len(), r * n);
        assert_eq!(c.len(), m * n);
        if m == 0 || r == 0 || n == 0 {
            return;
        }
        // a^T is addressed in place: row stride 1, column stride m.
        unsafe {
            matrixmultiply::sgemm(
                m, r, n, 1.0,
                a.as_ptr(), 1, m as isize,
                b.as_ptr(), n as isize, 1,
                1.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

impl Real for f64 {
    #[inline(always)]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64_(self) -> f64 {
        self
    }
    #[inline(always)]
    fn to_f32_(self) -> f32 {
        self as f32
    }
    #[inline(always)]
    fn from_f32_(v: f32) -> Self {
        v as f64
    }
    #[inline(always)]
    fn fast_exp(self) -> Self {
        self.exp()
    }

    fn gemm_nn_acc(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        assert_eq!(a.len(), m * k);
        assert_eq!(b.len(), k * n);
        assert_eq!(c.len(), m * n);
        if m == 0 || k == 0 || n == 0 {
            return;
        }
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                1.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn gemm_tn_acc(r: usize, m: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        assert_eq!(a.len(), r * m);
        assert_eq!(b.len(), r * n);
        assert_eq!(c.len(), m * n);
        if m == 0 || r == 0 || n == 0 {
            return;
        }
        unsafe {
            matrixmultiply::dgemm(
                m, r, n, 1.0,
                a.as_ptr(), 1, m as isize,
                b.as_ptr(), n as isize, 1,
                1.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

/// 2^k for integer k in [-126, 127], via exponent bits.
#[inline(always)]
fn pow2i_f32(k: i32) -> f32 {
    f32::from_bits(((k + 127) as u32) << 23)
}

/// Polynomial exp for f32. Max relative error ~2e-7 over the clamped range;
/// inputs below -87 flush toward 0, above +88 saturate near f32::MAX range.
#[inline(always)]
pub fn fast_exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    let x = x.clamp(-87.0, 88.0);
    let kf = (x * LOG2E).round();
    let r = (x - kf * LN2_HI) - kf * LN2_LO;
    // Degree-5 minimax polynomial for e^r - 1 - r over |r| <= ln(2)/2.
    let mut y = 1.987_569_1e-4_f32;
    y = y * r + 1.398_199_9e-3;
    y = y * r + 8.333_452e-3;
    y = y * r + 4.166_579_6e-2;
    y = y * r + 1.666_666_5e-1;
    y = y * r + 0.5;
    let p = y * r * r + r + 1.0;
    p * pow2i_f32(kf as i32)
}

/// Dense tensor: shape plus row-major data. The element count always equals
/// the product of the shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Real> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Real> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "tensor shape {:?} wants {} elements, got {}",
            shape,
            n,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, v: E) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> E) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected 2-D, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn at2(&self, i: usize, j: usize) -> E {
        let (_, c) = self.dims2();
        self.data[i * c + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ── raw kernels ──────────────────────────────────────────────────────────
// The two accumulate-gemm entry points wrap the blocked library kernel (the
// training hot path); the `_ref` plain loops are kept as oracles and for
// clarity about the intended semantics.

/// out += a[m,k] * b[k,n]. Dispatches to the blocked gemm; the matching
/// `_ref` loop below is the test oracle for it.
pub(crate) fn matmul_acc<E: Real>(
    a: &[E],
    b: &[E],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [E],
) {
    E::gemm_nn_acc(m, k, n, a, b, out);
}

/// out += a^T[m,r] * b[r,n] where a is stored [r,m]. Used for weight grads.
pub(crate) fn matmul_tn_acc<E: Real>(
    a: &[E],
    b: &[E],
    r: usize,
    m: usize,
    n: usize,
    out: &mut [E],
) {
    E::gemm_tn_acc(r, m, n, a, b, out);
}

/// Plain-loop reference for `matmul_acc`: deterministic nested loops with the
/// inner loop over contiguous output.
pub(crate) fn matmul_acc_ref<E: Real>(
    a: &[E],
    b: &[E],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [E],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

/// Plain-loop reference for `matmul_tn_acc`.
pub(crate) fn matmul_tn_acc_ref<E: Real>(
    a: &[E],
    b: &[E],
    r: usize,
    m: usize,
    n: usize,
    out: &mut [E],
) {
    debug_assert_eq!(a.len(), r * m);
    debug_assert_eq!(b.len(), r * n);
    debug_assert_eq!(out.len(), m * n);
    for row in 0..r {
        let arow = &a[row * m..(row + 1) * m];
        let brow = &b[row * n..(row + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

pub(crate) fn transpose<E: Real>(src: &[E], rows: usize, cols: usize) -> Vec<E> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![E::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = src[i * cols + j];
        }
    }
    out
}

/// Kaiming-uniform init over the given shape: U(-b, b), b = sqrt(6 / fan_in).
pub fn kaiming_uniform<E: Real, R: rand::Rng>(
    rng: &mut R,
    shape: Vec<usize>,
    fan_in: usize,
) -> Tensor<E> {
    assert!(fan_in > 0, "fan_in must be positive");
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| E::lit(rng.gen_range(-bound..bound)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_product_invariant() {
        let t = Tensor::<f32>::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.at2(1, 2), 6.0);
    }

    #[test]
    #[should_panic(expected = "wants 6 elements")]
    fn tensor_shape_mismatch_panics() {
        let _ = Tensor::<f32>::new(vec![2, 3], vec![1., 2., 3.]);
    }

    #[test]
    fn fast_exp_matches_std_exp() {
        // Dense sweep over the useful range plus the clamp edges.
        let mut worst = 0.0f64;
        let mut x = -87.0f32;
        while x < 88.0 {
            let got = fast_exp_f32(x) as f64;
            let want = (x as f64).exp();
            let rel = ((got - want) / want).abs();
            worst = worst.max(rel);
            x += 0.0137;
        }
        assert!(worst < 5e-7, "fast_exp relative error {worst}");
        assert_eq!(fast_exp_f32(0.0), 1.0);
    }

    #[test]
    fn matmul_identity_kernel() {
        // [[1,2],[3,4]] * I = same
        let a = [1.0f32, 2., 3., 4.];
        let id = [1.0f32, 0., 0., 1.];
        let mut out = [0.0f32; 4];
        matmul_acc(&a, &id, 2, 2, 2, &mut out);
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_tn_matches_explicit_transpose() {
        // a: [3,2], b: [3,4]; a^T b via kernel vs via transpose+matmul.
        let a: Vec<f32> = (0..6).map(|i| i as f32 * 0.5 - 1.0).collect();
        let b: Vec<f32> = (0..12).map(|i| (i as f32).sin()).collect();
        let mut got = vec![0.0f32; 8];
        matmul_tn_acc(&a, &b, 3, 2, 4, &mut got);
        let at = transpose(&a, 3, 2);
        let mut want = vec![0.0f32; 8];
        matmul_acc(&at, &b, 2, 3, 4, &mut want);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-6);
        }
    }

    #[test]
    fn gemm_matches_reference_loops() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for &(m, k, n) in &[(1usize, 1usize, 1usize), (2, 3, 4), (7, 5, 9), (64, 16, 33), (130, 24, 16)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let seed: Vec<f32> = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let mut fast = seed.clone();
            let mut slow = seed.clone();
            matmul_acc(&a, &b, m, k, n, &mut fast);
            matmul_acc_ref(&a, &b, m, k, n, &mut slow);
            for (f, s) in fast.iter().zip(&slow) {
                assert!((f - s).abs() < 1e-5, "nn {m}x{k}x{n}: {f} vs {s}");
            }

            // Same operands reinterpreted for the transposed-a variant.
            let at: Vec<f32> = (0..k * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bt: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut fast = seed.clone();
            let mut slow = seed;
            matmul_tn_acc(&at, &bt, k, m, n, &mut fast);
            matmul_tn_acc_ref(&at, &bt, k, m, n, &mut slow);
            for (f, s) in fast.iter().zip(&slow) {
                assert!((f - s).abs() < 1e-5, "tn {m}x{k}x{n}: {f} vs {s}");
            }
        }
    }
}

/// Test-only re-export of the raw kernel for throughput probes.
#[doc(hidden)]
pub fn matmul_acc_bench(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    matmul_acc(a, b, m, k, n, out)
}
