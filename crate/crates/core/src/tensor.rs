//! Row-major dense matrices and the handful of kernels the MLP needs.
//!
//! Every reduction runs in ascending index order, so results are
//! bit-reproducible. Products skip exact zeros in the left operand; because a
//! running sum that starts at `+0.0` can never become `-0.0`, adding a signed
//! zero product is a no-op and the skip does not change any result bit.

use std::fmt::{Debug, Display};
use std::io::{Read, Write};

pub use num_like::Real;

use crate::error::{Error, Result};

pub mod num_like {
    use std::fmt::{Debug, Display};
    use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

    /// Floating-point element type: `f32` for training, `f64` for gradient checks.
    pub trait Real:
        Copy
        + Default
        + PartialOrd
        + Debug
        + Display
        + Send
        + Sync
        + 'static
        + Add<Output = Self>
        + Sub<Output = Self>
        + Mul<Output = Self>
        + Div<Output = Self>
        + Neg<Output = Self>
        + AddAssign
        + SubAssign
        + MulAssign
    {
        const ZERO: Self;
        const ONE: Self;
        fn from_f64(x: f64) -> Self;
        fn to_f64(self) -> f64;
        fn abs(self) -> Self;
        fn exp(self) -> Self;
        fn ln(self) -> Self;
        fn is_finite(self) -> bool;
        fn total_cmp(&self, other: &Self) -> std::cmp::Ordering;
    }

    macro_rules! impl_real {
        ($t:ty) => {
            impl Real for $t {
                const ZERO: Self = 0.0;
                const ONE: Self = 1.0;
                #[inline]
                fn from_f64(x: f64) -> Self {
                    x as $t
                }
                #[inline]
                fn to_f64(self) -> f64 {
                    self as f64
                }
                #[inline]
                fn abs(self) -> Self {
                    <$t>::abs(self)
                }
                #[inline]
                fn exp(self) -> Self {
                    <$t>::exp(self)
                }
                #[inline]
                fn ln(self) -> Self {
                    <$t>::ln(self)
                }
                #[inline]
                fn is_finite(self) -> bool {
                    <$t>::is_finite(self)
                }
                #[inline]
                fn total_cmp(&self, other: &Self) -> std::cmp::Ordering {
                    <$t>::total_cmp(self, other)
                }
            }
        };
    }

    impl_real!(f32);
    impl_real!(f64);
}

#[derive(Clone, PartialEq)]
pub struct DenseMatrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Debug> Debug for DenseMatrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            let start = r * self.cols;
            writeln!(f, "  {:?}", &self.data[start..start + self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl<T: Real> DenseMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Input(format!("matrix dims must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Input(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dims must be positive");
        Self {
            rows,
            cols,
            data: vec![T::ZERO; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        let mut m = Self::zeros(rows, cols);
        m.data.fill(value);
        m
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::ONE;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> DenseMatrix<U> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Self {
        assert!(!indices.is_empty(), "gather_rows needs at least one index");
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(())
    }
}

/// `a · b`.
pub fn matmul<T: Real>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let n = b.cols;
    let mut out = DenseMatrix::zeros(a.rows, n);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for (p, &aik) in a.row(i).iter().enumerate() {
            if aik == T::ZERO {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`, bit-identical to `matmul(a, &b.transpose())`.
pub fn matmul_nt<T: Real>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if a.cols != b.cols {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    matmul(a, &b.transpose())
}

/// `aᵀ · b`, bit-identical to `matmul(&a.transpose(), b)`.
pub fn matmul_tn<T: Real>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if a.rows != b.rows {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let n = b.cols;
    let mut out = DenseMatrix::zeros(a.cols, n);
    // Outer loop over the contracted index keeps every output's sum in ascending order.
    for r in 0..a.rows {
        let b_row = b.row(r);
        for (p, &v) in a.row(r).iter().enumerate() {
            if v == T::ZERO {
                continue;
            }
            let out_row = &mut out.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += v * bv;
            }
        }
    }
    Ok(out)
}

pub fn hadamard<T: Real>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    a.check_same_shape(b, "hadamard")?;
    Ok(DenseMatrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x * y).collect(),
    })
}

/// `y + alpha · x`.
pub fn axpy<T: Real>(y: &DenseMatrix<T>, alpha: T, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    y.check_same_shape(x, "axpy")?;
    Ok(DenseMatrix {
        rows: y.rows,
        cols: y.cols,
        data: y.data.iter().zip(&x.data).map(|(&yv, &xv)| yv + alpha * xv).collect(),
    })
}

/// Adds `bias` to every row in place.
pub fn add_row_vector<T: Real>(m: &mut DenseMatrix<T>, bias: &[T]) -> Result<()> {
    if bias.len() != m.cols {
        return Err(Error::shape("add_row_vector", m.shape(), (1, bias.len())));
    }
    for r in 0..m.rows {
        for (v, &b) in m.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(())
}

/// Column sums, accumulated over rows in ascending order.
pub fn column_sums<T: Real>(m: &DenseMatrix<T>) -> Vec<T> {
    let mut sums = vec![T::ZERO; m.cols];
    for r in 0..m.rows {
        for (s, &v) in sums.iter_mut().zip(m.row(r)) {
            *s += v;
        }
    }
    sums
}

pub fn relu<T: Real>(x: &DenseMatrix<T>) -> DenseMatrix<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

/// Passes `upstream` where `x > 0`; the subgradient at exactly zero is zero.
pub fn relu_backward<T: Real>(x: &DenseMatrix<T>, upstream: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    x.check_same_shape(upstream, "relu_backward")?;
    Ok(DenseMatrix {
        rows: x.rows,
        cols: x.cols,
        data: x
            .data
            .iter()
            .zip(&upstream.data)
            .map(|(&xv, &u)| if xv > T::ZERO { u } else { T::ZERO })
            .collect(),
    })
}

/// Mean cross-entropy of row-wise softmax, and its gradient `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy<T: Real>(
    logits: &DenseMatrix<T>,
    labels: &[usize],
) -> Result<(T, DenseMatrix<T>)> {
    if labels.len() != logits.rows {
        return Err(Error::Input(format!(
            "{} labels for a batch of {} logits",
            labels.len(),
            logits.rows
        )));
    }
    let classes = logits.cols;
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
    }
    let batch = T::from_f64(logits.rows as f64);
    let mut grad = DenseMatrix::zeros(logits.rows, classes);
    let mut total = T::ZERO;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row
            .iter()
            .copied()
            .fold(row[0], |acc, v| if v > acc { v } else { acc });
        let g = grad.row_mut(r);
        let mut denom = T::ZERO;
        for (gv, &v) in g.iter_mut().zip(row) {
            let e = (v - max).exp();
            *gv = e;
            denom += e;
        }
        total += denom.ln() - (row[label] - max);
        for gv in g.iter_mut() {
            *gv = *gv / denom / batch;
        }
        g[label] -= T::ONE / batch;
    }
    Ok((total / batch, grad))
}

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows<T: Real>(m: &DenseMatrix<T>) -> Vec<usize> {
    (0..m.rows)
        .map(|r| {
            let row = m.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub const NMSP_MAGIC: &[u8; 4] = b"NMSP";
pub const NMSP_VERSION: u32 = 1;

/// Serializes to the `NMSP` container: magic, version, rows, cols (all u32 LE),
/// then row-major little-endian f32 data.
pub fn encode_nmsp(m: &DenseMatrix<f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 4 * m.len());
    buf.extend_from_slice(NMSP_MAGIC);
    buf.extend_from_slice(&NMSP_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols as u32).to_le_bytes());
    for v in &m.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Decodes one `NMSP` matrix starting at `offset`; returns it with the offset just past it.
pub fn decode_nmsp(bytes: &[u8], offset: usize) -> Result<(DenseMatrix<f32>, usize)> {
    let header = bytes
        .get(offset..offset + 16)
        .ok_or_else(|| Error::format(offset, "truncated NMSP header"))?;
    if &header[0..4] != NMSP_MAGIC {
        return Err(Error::format(offset, "bad NMSP magic"));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != NMSP_VERSION {
        return Err(Error::format(offset + 4, format!("unsupported NMSP version {version}")));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let start = offset + 16;
    let end = start + 4 * rows * cols;
    let body = bytes
        .get(start..end)
        .ok_or_else(|| Error::format(bytes.len(), format!("truncated NMSP body, expected {rows}x{cols}")))?;
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let m = DenseMatrix::new(rows, cols, data).map_err(|e| Error::format(offset + 8, e.to_string()))?;
    Ok((m, end))
}

pub fn write_nmsp(w: &mut impl Write, m: &DenseMatrix<f32>) -> Result<()> {
    w.write_all(&encode_nmsp(m))?;
    Ok(())
}

pub fn read_nmsp(r: &mut impl Read) -> Result<DenseMatrix<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let (m, end) = decode_nmsp(&bytes, 0)?;
    if end != bytes.len() {
        return Err(Error::format(end, "trailing bytes after NMSP matrix"));
    }
    Ok(m)
}

impl<T: Real> Display for DenseMatrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for r in 0..self.rows {
            let cells: Vec<String> = self.row(r).iter().map(|v| format!("{v:>9.4}")).collect();
            writeln!(f, "{}", cells.join(" "))?;
        }
        Ok(())
    }
}
