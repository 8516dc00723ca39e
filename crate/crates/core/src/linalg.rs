//! Dense row-major matrices and the few kernels the VAE and GMM need.
//!
//! Everything is plain f64 with fixed summation order, so results are
//! bit-reproducible across runs and batch groupings.

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

/// Dot product in the crate's canonical accumulation pattern: chunks of
/// two with two running sums, combined as s0 + s1, then a scalar tail.
/// `dot2` and `dot4` accumulate each of their outputs in exactly this
/// order, so one sample encodes to the same bits alone or inside a batch.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let (mut s0, mut s1) = (0.0, 0.0);
    let chunks = n / 2;
    for c in 0..chunks {
        let i = c * 2;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
    }
    let mut s = s0 + s1;
    if n % 2 == 1 {
        s += a[n - 1] * b[n - 1];
    }
    s
}

/// Two dots sharing one right-hand row; results bit-identical to [`dot`].
#[inline]
fn dot2(a0: &[f64], a1: &[f64], b: &[f64]) -> (f64, f64) {
    let n = b.len();
    let (mut p0, mut p1) = (0.0, 0.0);
    let (mut q0, mut q1) = (0.0, 0.0);
    let chunks = n / 2;
    for c in 0..chunks {
        let i = c * 2;
        let (b0, b1) = (b[i], b[i + 1]);
        p0 += a0[i] * b0;
        p1 += a0[i + 1] * b1;
        q0 += a1[i] * b0;
        q1 += a1[i + 1] * b1;
    }
    let mut p = p0 + p1;
    let mut q = q0 + q1;
    if n % 2 == 1 {
        p += a0[n - 1] * b[n - 1];
        q += a1[n - 1] * b[n - 1];
    }
    (p, q)
}

/// Four dots sharing one right-hand row; results bit-identical to [`dot`].
#[inline]
#[allow(clippy::too_many_arguments)]
fn dot4(a0: &[f64], a1: &[f64], a2: &[f64], a3: &[f64], b: &[f64]) -> (f64, f64, f64, f64) {
    let n = b.len();
    let (mut p0, mut p1) = (0.0, 0.0);
    let (mut q0, mut q1) = (0.0, 0.0);
    let (mut r0, mut r1) = (0.0, 0.0);
    let (mut s0, mut s1) = (0.0, 0.0);
    let chunks = n / 2;
    for c in 0..chunks {
        let i = c * 2;
        let (b0, b1) = (b[i], b[i + 1]);
        p0 += a0[i] * b0;
        p1 += a0[i + 1] * b1;
        q0 += a1[i] * b0;
        q1 += a1[i + 1] * b1;
        r0 += a2[i] * b0;
        r1 += a2[i + 1] * b1;
        s0 += a3[i] * b0;
        s1 += a3[i + 1] * b1;
    }
    let (mut p, mut q, mut r, mut s) = (p0 + p1, q0 + q1, r0 + r1, s0 + s1);
    if n % 2 == 1 {
        let bl = b[n - 1];
        p += a0[n - 1] * bl;
        q += a1[n - 1] * bl;
        r += a2[n - 1] * bl;
        s += a3[n - 1] * bl;
    }
    (p, q, r, s)
}

/// C = A * B^T. A is m x k, B is n x k, C is m x n. Rows of A against rows
/// of B, which keeps both operands contiguous; A rows are processed four
/// at a time to reuse each B row. Every output element accumulates in the
/// canonical [`dot`] order regardless of the row grouping.
pub fn matmul_nt(a: &Mat, b: &Mat, c: &mut Mat) {
    assert_eq!(a.cols, b.cols, "inner dimension mismatch");
    assert_eq!(c.rows, a.rows);
    assert_eq!(c.cols, b.rows);
    let n = b.rows;
    let mut i = 0;
    while i + 3 < a.rows {
        let (a0, a1, a2, a3) = (a.row(i), a.row(i + 1), a.row(i + 2), a.row(i + 3));
        for j in 0..n {
            let (x, y, z, w) = dot4(a0, a1, a2, a3, b.row(j));
            c.data[i * n + j] = x;
            c.data[(i + 1) * n + j] = y;
            c.data[(i + 2) * n + j] = z;
            c.data[(i + 3) * n + j] = w;
        }
        i += 4;
    }
    while i + 1 < a.rows {
        let (a0, a1) = (a.row(i), a.row(i + 1));
        for j in 0..n {
            let (x, y) = dot2(a0, a1, b.row(j));
            c.data[i * n + j] = x;
            c.data[(i + 1) * n + j] = y;
        }
        i += 2;
    }
    if i < a.rows {
        let arow = a.row(i);
        for j in 0..n {
            c.data[i * n + j] = dot(arow, b.row(j));
        }
    }
}

/// C = A * B. A is m x k, B is k x n, C is m x n. The k loop is fused in
/// quads; the summation order per output element is fixed at compile time,
/// independent of anything at run time.
pub fn matmul_nn(a: &Mat, b: &Mat, c: &mut Mat) {
    assert_eq!(a.cols, b.rows, "inner dimension mismatch");
    assert_eq!(c.rows, a.rows);
    assert_eq!(c.cols, b.cols);
    let cols = b.cols;
    for i in 0..a.rows {
        let crow = c.row_mut(i);
        crow.iter_mut().for_each(|v| *v = 0.0);
        let mut t = 0;
        while t + 3 < a.cols {
            let (a0, a1, a2, a3) = (a.at(i, t), a.at(i, t + 1), a.at(i, t + 2), a.at(i, t + 3));
            let (b0, b1, b2, b3) = (b.row(t), b.row(t + 1), b.row(t + 2), b.row(t + 3));
            for j in 0..cols {
                crow[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
            }
            t += 4;
        }
        while t < a.cols {
            let av = a.at(i, t);
            let brow = b.row(t);
            for j in 0..cols {
                crow[j] += av * brow[j];
            }
            t += 1;
        }
    }
}

/// C += A^T * B where A is s x p and B is s x q; C is p x q. Samples are
/// consumed in quads in index order, so the reduction order is fixed and
/// results never depend on batch grouping or threads.
pub fn add_tn(c: &mut Mat, a: &Mat, b: &Mat) {
    assert_eq!(a.rows, b.rows, "sample count mismatch");
    assert_eq!(c.rows, a.cols);
    assert_eq!(c.cols, b.cols);
    let q = b.cols;
    let mut s = 0;
    while s + 3 < a.rows {
        let (a0, a1, a2, a3) = (a.row(s), a.row(s + 1), a.row(s + 2), a.row(s + 3));
        let (b0, b1, b2, b3) = (b.row(s), b.row(s + 1), b.row(s + 2), b.row(s + 3));
        for o in 0..a.cols {
            let (v0, v1, v2, v3) = (a0[o], a1[o], a2[o], a3[o]);
            if v0 == 0.0 && v1 == 0.0 && v2 == 0.0 && v3 == 0.0 {
                continue;
            }
            let crow = c.row_mut(o);
            for j in 0..q {
                crow[j] += (v0 * b0[j] + v1 * b1[j]) + (v2 * b2[j] + v3 * b3[j]);
            }
        }
        s += 4;
    }
    while s < a.rows {
        let arow = a.row(s);
        let brow = b.row(s);
        for o in 0..a.cols {
            let av = arow[o];
            if av == 0.0 {
                continue;
            }
            let crow = c.row_mut(o);
            for j in 0..q {
                crow[j] += av * brow[j];
            }
        }
        s += 1;
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
/// Returns None when a pivot is not strictly positive.
pub fn cholesky(m: &Mat) -> Option<Mat> {
    assert_eq!(m.rows, m.cols, "cholesky needs a square matrix");
    let n = m.rows;
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = m.at(i, j);
            for t in 0..j {
                s -= l.at(i, t) * l.at(j, t);
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                *l.at_mut(i, j) = s.sqrt();
            } else {
                *l.at_mut(i, j) = s / l.at(j, j);
            }
        }
    }
    Some(l)
}

/// Solves L y = b for lower-triangular L (forward substitution).
pub fn forward_solve(l: &Mat, b: &[f64]) -> Vec<f64> {
    let n = l.rows;
    assert_eq!(b.len(), n);
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for j in 0..i {
            s -= l.at(i, j) * y[j];
        }
        y[i] = s / l.at(i, i);
    }
    y
}

/// log sum exp with -inf terms skipped.
pub fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = vals.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}
