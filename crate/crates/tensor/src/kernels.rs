//! Plain slice kernels shared by the graph ops and by inference-only code.
//!
//! Every reduction walks its input left to right.

use crate::Scalar;

/// Row-major matrix stored as `rows × cols`, optionally read transposed.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, S> {
    pub data: &'a [S],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, S: Scalar> MatRef<'a, S> {
    pub fn new(data: &'a [S], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    /// Logical (rows, cols) after transposition.
    pub fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a·b` (or `out += a·b` when `accumulate`), `out` row-major `m × n`.
pub fn gemm<S: Scalar>(a: MatRef<'_, S>, b: MatRef<'_, S>, out: &mut [S], accumulate: bool) {
    let (m, k) = a.dims();
    let (kb, n) = b.dims();
    assert_eq!(k, kb, "gemm inner dimensions");
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = S::zero());
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { S::one() } else { S::zero() };
    // SAFETY: dimensions and strides were checked against the slice lengths above.
    unsafe {
        S::gemm(
            m,
            k,
            n,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn sum<S: Scalar>(xs: &[S]) -> S {
    xs.iter().fold(S::zero(), |acc, &v| acc + v)
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn max<S: Scalar>(xs: &[S]) -> S {
    xs.iter().fold(S::neg_infinity(), |acc, &v| acc.max(v))
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<S: Scalar>(xs: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let m = max(row);
    for v in row.iter_mut() {
        *v = (*v - m).exp();
    }
    let z = sum(row);
    for v in row.iter_mut() {
        *v = *v / z;
    }
}

/// `log Σ exp(row)`.
pub fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let m = max(row);
    let z = row.iter().fold(S::zero(), |acc, &v| acc + (v - m).exp());
    m + z.ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU used by GPT-2.
/// `tanh` through one `exp`; saturates cleanly since `exp` overflows to infinity.
fn tanh<S: Scalar>(z: S) -> S {
    let two = S::lit(2.0);
    S::one() - two / ((two * z).exp() + S::one())
}

pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    half * x * (S::one() + tanh(c * (x + a * x * x * x)))
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    let three = S::lit(3.0);
    let th = tanh(c * (x + a * x * x * x));
    half * (S::one() + th) + half * x * (S::one() - th * th) * c * (S::one() + three * a * x * x)
}
