//! Dense and sparse matrices plus the forward kernels the engine is built on.
//!
//! Every kernel accumulates in a fixed order (ascending inner index) so that
//! results are reproducible bit for bit across runs. Element width is chosen
//! by the type parameter: `f32` for training, `f64` for gradient checking.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use rand::Rng;

use crate::error::{Error, Result};

/// Floating point element type of the engine.
pub trait Element:
    Copy
    + Debug
    + Default
    + PartialOrd
    + Send
    + Sync
    + 'static
    + AddAssign
    + MulAssign
    + Sum
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
{
    const ZERO: Self;
    const ONE: Self;
    /// Width in bytes of one stored element.
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln_1p(self) -> Self;
    fn abs(self) -> Self;
    fn bits(self) -> u64;
}

macro_rules! impl_element {
    ($t:ty) => {
        impl Element for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const BYTES: usize = std::mem::size_of::<$t>();

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln_1p(self) -> Self {
                <$t>::ln_1p(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn bits(self) -> u64 {
                self.to_bits() as u64
            }
        }
    };
}

impl_element!(f32);
impl_element!(f64);

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Element> DenseMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidMatrix(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::ONE;
        }
        m
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    /// Matrix with entries drawn uniformly from `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| T::from_f64(rng.random_range(-bound..=bound)))
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
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

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        check_same_shape("add", self, other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Converts element width, e.g. to run an `f64` oracle on `f32` data.
    pub fn cast<U: Element>(&self) -> DenseMatrix<U> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// True when both matrices have the same shape and identical bit patterns.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits())
    }
}

fn check_same_shape<T: Element>(
    op: &'static str,
    a: &DenseMatrix<T>,
    b: &DenseMatrix<T>,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// Compressed sparse row matrix with strictly increasing columns per row.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix<T> {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Element> CsrMatrix<T> {
    pub fn new(
        rows: usize,
        cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<T>,
    ) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidMatrix(msg));
        if row_ptr.len() != rows + 1 {
            return bad(format!(
                "row_ptr has {} entries, expected {}",
                row_ptr.len(),
                rows + 1
            ));
        }
        if row_ptr[0] != 0 || row_ptr[rows] != col_idx.len() || col_idx.len() != values.len() {
            return bad("row_ptr does not span the stored entries".into());
        }
        for r in 0..rows {
            let (start, end) = (row_ptr[r], row_ptr[r + 1]);
            if start > end {
                return bad(format!("row_ptr decreases at row {r}"));
            }
            let cols_of_row = &col_idx[start..end];
            if cols_of_row.iter().any(|&c| c >= cols) {
                return bad(format!("column index out of range in row {r}"));
            }
            if cols_of_row.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("columns not strictly increasing in row {r}"));
            }
        }
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Builds a CSR matrix from `(row, col, value)` entries. Duplicates are
    /// summed in input order; the result is sorted canonically.
    pub fn from_triplets(rows: usize, cols: usize, entries: &[(usize, usize, T)]) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, T)> = entries.to_vec();
        for &(r, c, _) in &sorted {
            if r >= rows || c >= cols {
                return Err(Error::InvalidMatrix(format!(
                    "entry ({r}, {c}) outside {rows}x{cols}"
                )));
            }
        }
        // stable sort keeps duplicate summation order tied to input order
        sorted.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values: Vec<T> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self::new(rows, cols, row_ptr, col_idx, values)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![T::ONE; n],
        }
    }

    pub fn from_dense(m: &DenseMatrix<T>) -> Self {
        let mut row_ptr = Vec::with_capacity(m.rows() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for r in 0..m.rows() {
            for (c, &v) in m.row(r).iter().enumerate() {
                if v != T::ZERO {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            rows: m.rows(),
            cols: m.cols(),
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn densify(&self) -> DenseMatrix<T> {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out.set(r, self.col_idx[k], self.values[k]);
            }
        }
        out
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// `(columns, values)` of one row.
    pub fn row(&self, r: usize) -> (&[usize], &[T]) {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.col_idx[range.clone()], &self.values[range])
    }

    /// Bytes occupied by the matrix with 32-bit indices and offsets and
    /// `T`-width values. This is the figure the memory ledger charges.
    pub fn storage_bytes(&self) -> usize {
        (self.rows + 1) * 4 + self.nnz() * (4 + T::BYTES)
    }

    pub fn is_symmetric(&self) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let (tc, tv) = self.row(c);
                match tc.binary_search(&r) {
                    Ok(pos) if tv[pos].bits() == v.bits() => {}
                    _ => return false,
                }
            }
        }
        true
    }
}

/// One bit per element, least significant bit first within each byte.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMask {
    len: usize,
    bytes: Vec<u8>,
}

impl BitMask {
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            bytes: vec![0; len.div_ceil(8)],
        }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut m = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b {
                m.set(i);
            }
        }
        m
    }

    #[inline]
    pub fn set(&mut self, i: usize) {
        self.bytes[i / 8] |= 1 << (i % 8);
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.bytes[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn count_ones(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Stored size, `ceil(len / 8)`.
    pub fn stored_bytes(&self) -> usize {
        self.bytes.len()
    }
}

/// Dense product `a · b`.
pub fn mm<T: Element>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if a.cols != b.rows {
        return Err(Error::Dimension {
            op: "mm",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, m) = (a.rows, b.cols);
    let mut out = DenseMatrix::zeros(n, m);
    for i in 0..n {
        let out_row = &mut out.data[i * m..(i + 1) * m];
        for (k, &aik) in a.row(i).iter().enumerate() {
            let b_row = &b.data[k * m..(k + 1) * m];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn mm_tn<T: Element>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if a.rows != b.rows {
        return Err(Error::Dimension {
            op: "mm_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, m) = (a.cols, b.cols);
    let mut out = DenseMatrix::zeros(n, m);
    for k in 0..a.rows {
        let b_row = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            let out_row = &mut out.data[i * m..(i + 1) * m];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn mm_nt<T: Element>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if a.cols != b.cols {
        return Err(Error::Dimension {
            op: "mm_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, m) = (a.rows, b.rows);
    let mut out = DenseMatrix::zeros(n, m);
    for i in 0..n {
        let a_row = a.row(i);
        for j in 0..m {
            let mut acc = T::ZERO;
            for (&x, &y) in a_row.iter().zip(b.row(j)) {
                acc += x * y;
            }
            out.data[i * m + j] = acc;
        }
    }
    Ok(out)
}

/// Sparse-dense product `s · d`, accumulating by ascending column per row.
pub fn spmm<T: Element>(s: &CsrMatrix<T>, d: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if s.cols != d.rows {
        return Err(Error::Dimension {
            op: "spmm",
            left: s.shape(),
            right: d.shape(),
        });
    }
    let m = d.cols;
    let mut out = DenseMatrix::zeros(s.rows, m);
    for r in 0..s.rows {
        let out_row = &mut out.data[r * m..(r + 1) * m];
        let (cols, vals) = s.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            for (o, &x) in out_row.iter_mut().zip(d.row(c)) {
                *o += v * x;
            }
        }
    }
    Ok(out)
}

/// `sᵀ · d`. Rows of `s` are visited in ascending order, so each output row
/// accumulates in ascending index of the transposed inner dimension.
pub fn spmm_t<T: Element>(s: &CsrMatrix<T>, d: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if s.rows != d.rows {
        return Err(Error::Dimension {
            op: "spmm_t",
            left: s.shape(),
            right: d.shape(),
        });
    }
    let m = d.cols;
    let mut out = DenseMatrix::zeros(s.cols, m);
    for r in 0..s.rows {
        let d_row = d.row(r);
        let (cols, vals) = s.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            let out_row = &mut out.data[c * m..(c + 1) * m];
            for (o, &x) in out_row.iter_mut().zip(d_row) {
                *o += v * x;
            }
        }
    }
    Ok(out)
}

/// Rectifier. The mask bit is set only for strictly positive inputs.
pub fn relu<T: Element>(x: &DenseMatrix<T>) -> (DenseMatrix<T>, BitMask) {
    let mut mask = BitMask::zeros(x.len());
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v > T::ZERO {
                mask.set(i);
                v
            } else {
                T::ZERO
            }
        })
        .collect();
    (
        DenseMatrix {
            rows: x.rows,
            cols: x.cols,
            data,
        },
        mask,
    )
}

/// Zeroes gradient entries whose mask bit is clear.
pub fn apply_mask<T: Element>(grad: &DenseMatrix<T>, mask: &BitMask) -> DenseMatrix<T> {
    debug_assert_eq!(grad.len(), mask.len());
    let data = grad
        .data
        .iter()
        .enumerate()
        .map(|(i, &g)| if mask.get(i) { g } else { T::ZERO })
        .collect();
    DenseMatrix {
        rows: grad.rows,
        cols: grad.cols,
        data,
    }
}

/// Selects rows of `x` by index.
pub fn gather_rows<T: Element>(x: &DenseMatrix<T>, indices: &[usize]) -> Result<DenseMatrix<T>> {
    let mut data = Vec::with_capacity(indices.len() * x.cols);
    for &i in indices {
        if i >= x.rows {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: x.rows,
            });
        }
        data.extend_from_slice(x.row(i));
    }
    Ok(DenseMatrix {
        rows: indices.len(),
        cols: x.cols,
        data,
    })
}

/// Adjoint of [`gather_rows`]: adds each gradient row into its source row,
/// in index order. Duplicate indices accumulate.
pub fn scatter_add_rows<T: Element>(
    grad: &DenseMatrix<T>,
    indices: &[usize],
    rows: usize,
) -> DenseMatrix<T> {
    let mut out = DenseMatrix::zeros(rows, grad.cols);
    for (k, &i) in indices.iter().enumerate() {
        for (o, &g) in out.row_mut(i).iter_mut().zip(grad.row(k)) {
            *o += g;
        }
    }
    out
}

/// Inner product of two equal-length rows.
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}
