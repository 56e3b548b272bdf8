//! Dense row-major matrices and the forward/backward kernels used by both the
//! autograd tape and the incremental inference path.

use crate::scalar::{axpy, dot, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
    }

    pub fn row_vector(data: Vec<T>) -> Self {
        let cols = data.len();
        Self { rows: 1, cols, data }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · rhs`
    pub fn matmul(&self, rhs: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        T::gemm(
            self.rows,
            self.cols,
            rhs.cols,
            T::one(),
            &self.data,
            self.cols as isize,
            1,
            &rhs.data,
            rhs.cols as isize,
            1,
            T::zero(),
            &mut out.data,
            rhs.cols as isize,
            1,
        );
        out
    }

    /// `self · rhsᵀ`
    pub fn matmul_nt(&self, rhs: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, rhs.cols, "matmul_nt inner dimension");
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        T::gemm(
            self.rows,
            self.cols,
            rhs.rows,
            T::one(),
            &self.data,
            self.cols as isize,
            1,
            &rhs.data,
            1,
            rhs.cols as isize,
            T::zero(),
            &mut out.data,
            rhs.rows as isize,
            1,
        );
        out
    }

    /// `acc += selfᵀ · rhs`
    pub fn matmul_tn_into(&self, rhs: &Matrix<T>, acc: &mut Matrix<T>) {
        assert_eq!(self.rows, rhs.rows, "matmul_tn inner dimension");
        assert_eq!((acc.rows, acc.cols), (self.cols, rhs.cols));
        T::gemm(
            self.cols,
            self.rows,
            rhs.cols,
            T::one(),
            &self.data,
            1,
            self.cols as isize,
            &rhs.data,
            rhs.cols as isize,
            1,
            T::one(),
            &mut acc.data,
            rhs.cols as isize,
            1,
        );
    }

    /// `acc += self · rhsᵀ`
    pub fn matmul_nt_into(&self, rhs: &Matrix<T>, acc: &mut Matrix<T>) {
        assert_eq!(self.cols, rhs.cols);
        assert_eq!((acc.rows, acc.cols), (self.rows, rhs.rows));
        T::gemm(
            self.rows,
            self.cols,
            rhs.rows,
            T::one(),
            &self.data,
            self.cols as isize,
            1,
            &rhs.data,
            1,
            rhs.cols as isize,
            T::one(),
            &mut acc.data,
            rhs.rows as isize,
            1,
        );
    }

    /// `acc += self · rhs`
    pub fn matmul_into(&self, rhs: &Matrix<T>, acc: &mut Matrix<T>) {
        assert_eq!(self.cols, rhs.rows);
        assert_eq!((acc.rows, acc.cols), (self.rows, rhs.cols));
        T::gemm(
            self.rows,
            self.cols,
            rhs.cols,
            T::one(),
            &self.data,
            self.cols as isize,
            1,
            &rhs.data,
            rhs.cols as isize,
            1,
            T::one(),
            &mut acc.data,
            rhs.cols as isize,
            1,
        );
    }

    pub fn add_assign(&mut self, rhs: &Matrix<T>) {
        assert_eq!(self.shape(), rhs.shape(), "add shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += *b;
        }
    }

    pub fn add_row_assign(&mut self, bias: &[T]) {
        assert_eq!(self.cols, bias.len());
        for r in 0..self.rows {
            for (a, b) in self.row_mut(r).iter_mut().zip(bias) {
                *a += *b;
            }
        }
    }

    pub fn scale(&self, s: T) -> Matrix<T> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| x * s).collect() }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Matrix<T> {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix { rows: rows.len(), cols: self.cols, data }
    }

    pub fn vstack(parts: &[&Matrix<T>]) -> Matrix<T> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::with_capacity(parts.iter().map(|m| m.data.len()).sum());
        let mut rows = 0;
        for m in parts {
            assert_eq!(m.cols, cols, "vstack column mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Matrix { rows, cols, data }
    }

    /// Appends the rows of `other` in place.
    pub fn append_rows(&mut self, other: &Matrix<T>) {
        if self.rows == 0 && self.cols == 0 {
            self.cols = other.cols;
        }
        assert_eq!(self.cols, other.cols, "column mismatch");
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
    }

    pub fn sum_rows(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += *v;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix<T>) -> T {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::of(x.to_f64c())).collect(),
        }
    }
}

/// Sparse linear recombination of rows: `out[r] = Σ coef · x[src]`.
///
/// Covers embedding gathers, bilinear interpolation of patch features, row
/// selection/permutation and averaging.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMix<T> {
    pub offsets: Vec<usize>,
    pub src: Vec<usize>,
    pub coef: Vec<T>,
}

impl<T: Scalar> RowMix<T> {
    pub fn new() -> Self {
        Self { offsets: vec![0], src: Vec::new(), coef: Vec::new() }
    }

    pub fn gather(indices: &[usize]) -> Self {
        let mut mix = Self::new();
        for &i in indices {
            mix.push_row(&[(i, T::one())]);
        }
        mix
    }

    pub fn push_row(&mut self, terms: &[(usize, T)]) {
        for &(s, c) in terms {
            self.src.push(s);
            self.coef.push(c);
        }
        self.offsets.push(self.src.len());
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn terms(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.offsets[r]..self.offsets[r + 1];
        self.src[span.clone()].iter().copied().zip(self.coef[span].iter().copied())
    }

    pub fn apply(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut out = Matrix::zeros(self.out_rows(), x.cols);
        for r in 0..self.out_rows() {
            let span = self.offsets[r]..self.offsets[r + 1];
            for k in span {
                let (s, c) = (self.src[k], self.coef[k]);
                let src = &x.data[s * x.cols..(s + 1) * x.cols];
                axpy(c, src, out.row_mut(r));
            }
        }
        out
    }

    pub fn backward(&self, dout: &Matrix<T>, dx: &mut Matrix<T>) {
        for r in 0..self.out_rows() {
            let span = self.offsets[r]..self.offsets[r + 1];
            for k in span {
                let (s, c) = (self.src[k], self.coef[k]);
                let g = dout.row(r);
                let cols = dx.cols;
                axpy(c, g, &mut dx.data[s * cols..(s + 1) * cols]);
            }
        }
    }
}

impl<T: Scalar> Default for RowMix<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-query lists of admissible key indices (CSR).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KeyLists {
    pub offsets: Vec<usize>,
    pub keys: Vec<u32>,
}

impl KeyLists {
    pub fn new() -> Self {
        Self { offsets: vec![0], keys: Vec::new() }
    }

    pub fn push_query(&mut self, keys: impl IntoIterator<Item = usize>) {
        self.keys.extend(keys.into_iter().map(|k| k as u32));
        self.offsets.push(self.keys.len());
    }

    pub fn queries(&self) -> usize {
        self.offsets.len() - 1
    }

    #[inline]
    pub fn keys_of(&self, q: usize) -> &[u32] {
        &self.keys[self.offsets[q]..self.offsets[q + 1]]
    }

    pub fn nnz(&self) -> usize {
        self.keys.len()
    }
}

/// Multi-head scaled dot-product attention restricted to `pattern`.
///
/// Returns the output and the per-(entry, head) probabilities needed by
/// [`attention_backward`]. Probabilities are laid out entry-major.
pub fn attention_forward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    pattern: &KeyLists,
) -> (Matrix<T>, Vec<T>) {
    let dim = q.cols;
    assert_eq!(pattern.queries(), q.rows, "pattern/query count mismatch");
    assert_eq!(k.cols, dim);
    assert_eq!(v.cols, dim);
    assert_eq!(dim % heads, 0);
    let dh = dim / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = Matrix::zeros(q.rows, dim);
    let mut probs = vec![T::zero(); pattern.nnz() * heads];
    let mut scores: Vec<T> = Vec::new();
    for i in 0..q.rows {
        let keys = pattern.keys_of(i);
        if keys.is_empty() {
            continue;
        }
        let base = pattern.offsets[i];
        for h in 0..heads {
            let hs = h * dh..(h + 1) * dh;
            let qi = &q.row(i)[hs.clone()];
            scores.clear();
            let mut max = T::neg_infinity();
            for &j in keys {
                let s = dot(qi, &k.row(j as usize)[hs.clone()]) * scale;
                max = max.max(s);
                scores.push(s);
            }
            let mut denom = T::zero();
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                denom += *s;
            }
            let inv = T::one() / denom;
            let orow = &mut out.data[i * dim..(i + 1) * dim];
            for (e, (&j, s)) in keys.iter().zip(&scores).enumerate() {
                let p = *s * inv;
                probs[(base + e) * heads + h] = p;
                axpy(p, &v.row(j as usize)[hs.clone()], &mut orow[hs.clone()]);
            }
        }
    }
    (out, probs)
}

/// Accumulates gradients of [`attention_forward`] into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    pattern: &KeyLists,
    probs: &[T],
    dout: &Matrix<T>,
    dq: &mut Matrix<T>,
    dk: &mut Matrix<T>,
    dv: &mut Matrix<T>,
) {
    let dim = q.cols;
    let dh = dim / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dp: Vec<T> = Vec::new();
    for i in 0..q.rows {
        let keys = pattern.keys_of(i);
        let base = pattern.offsets[i];
        for h in 0..heads {
            let hs = h * dh..(h + 1) * dh;
            let go = &dout.row(i)[hs.clone()];
            dp.clear();
            let mut weighted = T::zero();
            for (e, &j) in keys.iter().enumerate() {
                let p = probs[(base + e) * heads + h];
                let g = dot(go, &v.row(j as usize)[hs.clone()]);
                weighted += p * g;
                dp.push(g);
                let j = j as usize;
                axpy(p, go, &mut dv.data[j * dim + hs.start..j * dim + hs.end]);
            }
            for (e, &j) in keys.iter().enumerate() {
                let p = probs[(base + e) * heads + h];
                let ds = p * (dp[e] - weighted) * scale;
                if ds == T::zero() {
                    continue;
                }
                let j = j as usize;
                axpy(ds, &k.data[j * dim + hs.start..j * dim + hs.end], &mut dq.data[i * dim + hs.start..i * dim + hs.end]);
                axpy(ds, &q.data[i * dim + hs.start..i * dim + hs.end], &mut dk.data[j * dim + hs.start..j * dim + hs.end]);
            }
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer norm; returns output, per-row mean and reciprocal std.
pub fn layer_norm_forward<T: Scalar>(x: &Matrix<T>, gain: &[T], bias: &[T]) -> (Matrix<T>, Vec<T>, Vec<T>) {
    let n = T::of(x.cols as f64);
    let eps = T::of(LAYER_NORM_EPS);
    let mut out = Matrix::zeros(x.rows, x.cols);
    let mut means = Vec::with_capacity(x.rows);
    let mut rstds = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (row[c] - mean) * rstd * gain[c] + bias[c];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    x: &Matrix<T>,
    gain: &[T],
    means: &[T],
    rstds: &[T],
    dout: &Matrix<T>,
    dx: Option<&mut Matrix<T>>,
    dgain: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let n = T::of(x.cols as f64);
    let mut dgain = dgain;
    let mut dbias = dbias;
    let mut dx = dx;
    let mut xhat = vec![T::zero(); x.cols];
    let mut gh = vec![T::zero(); x.cols];
    for r in 0..x.rows {
        let row = x.row(r);
        let g = dout.row(r);
        for c in 0..x.cols {
            xhat[c] = (row[c] - means[r]) * rstds[r];
            gh[c] = g[c] * gain[c];
        }
        if let Some(dg) = dgain.as_deref_mut() {
            for c in 0..x.cols {
                dg[c] += g[c] * xhat[c];
            }
        }
        if let Some(db) = dbias.as_deref_mut() {
            for c in 0..x.cols {
                db[c] += g[c];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let mean_gh = gh.iter().copied().sum::<T>() / n;
            let mean_ghx = gh.iter().zip(&xhat).map(|(a, b)| *a * *b).sum::<T>() / n;
            for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                *d += rstds[r] * (gh[c] - mean_gh - xhat[c] * mean_ghx);
            }
        }
    }
}

/// tanh-approximated GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    let inner = c * (x + T::of(0.044715) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    let a = T::of(0.044715);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Numerically stable log-softmax of a slice.
pub fn log_softmax<T: Scalar>(scores: &[T]) -> Vec<T> {
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = scores.iter().map(|&s| (s - max).exp()).sum::<T>().ln() + max;
    scores.iter().map(|&s| s - lse).collect()
}

pub fn softmax<T: Scalar>(scores: &[T]) -> Vec<T> {
    log_softmax(scores).into_iter().map(|l| l.exp()).collect()
}
