//! N:M magnitude projection, binary masks, and the packed (values, indices)
//! storage with a multiply that reads it directly.
//!
//! Groups of `m` consecutive entries run along each row, i.e. along the input
//! dimension of a `out x in` weight matrix, which is the axis contracted in
//! the layer's matmul.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseMatrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SparsityPattern {
    n: usize,
    m: usize,
}

impl SparsityPattern {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n == 0 || n > m {
            return Err(Error::InvalidPattern(format!("need 0 < n <= m, got {n}:{m}")));
        }
        if m > u16::MAX as usize {
            return Err(Error::InvalidPattern(format!("group size {m} too large")));
        }
        Ok(Self { n, m })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Fraction of weights kept, `n / m`.
    pub fn density(&self) -> f64 {
        self.n as f64 / self.m as f64
    }

    pub fn is_dense(&self) -> bool {
        self.n == self.m
    }

    pub fn check_cols(&self, cols: usize) -> Result<()> {
        if cols % self.m != 0 {
            return Err(Error::PatternMismatch { cols, m: self.m });
        }
        Ok(())
    }
}

impl fmt::Display for SparsityPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.n, self.m)
    }
}

impl FromStr for SparsityPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (n, m) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidPattern(format!("expected N:M, got {s:?}")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidPattern(format!("expected N:M, got {s:?}")))
        };
        SparsityPattern::new(parse(n)?, parse(m)?)
    }
}

impl Serialize for SparsityPattern {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SparsityPattern {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Binary matrix of surviving weights (1) and pruned weights (0).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::Input(format!(
                "mask has {} bits for shape {rows}x{cols}",
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Input("mask bits must be 0 or 1".into()));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![1; rows * cols],
        }
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
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c] == 1
    }

    /// `1 - E`: marks the pruned positions.
    pub fn complement(&self) -> Mask {
        Mask {
            rows: self.rows,
            cols: self.cols,
            bits: self.bits.iter().map(|&b| 1 - b).collect(),
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn to_matrix<T: Real>(&self) -> DenseMatrix<T> {
        let data = self
            .bits
            .iter()
            .map(|&b| if b == 1 { T::ONE } else { T::ZERO })
            .collect();
        DenseMatrix::new(self.rows, self.cols, data).expect("mask shape is positive")
    }

    /// Number of positions where the two masks differ, i.e. `||a - b||_1`.
    pub fn hamming(&self, other: &Mask) -> Result<u64> {
        if self.shape() != other.shape() {
            return Err(Error::shape("mask hamming", self.shape(), other.shape()));
        }
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count() as u64)
    }

    /// True when every group of `m` along each row holds exactly `n` ones.
    pub fn is_exact(&self, pattern: SparsityPattern) -> bool {
        self.cols % pattern.m == 0
            && self
                .bits
                .chunks(pattern.m)
                .all(|g| g.iter().map(|&b| b as usize).sum::<usize>() == pattern.n)
    }
}

/// Writes the kept positions of one group into `keep` (length `m`).
///
/// Ordering is by `(-|w_i|, i)`: larger magnitude first, lower index on ties.
fn select_group<T: Real>(group: &[T], n: usize, order: &mut Vec<usize>, keep: &mut [u8]) {
    order.clear();
    order.extend(0..group.len());
    // stable sort keeps the lower index first among equal magnitudes
    order.sort_by(|&a, &b| group[b].abs().total_cmp(&group[a].abs()));
    keep.fill(0);
    for &i in &order[..n] {
        keep[i] = 1;
    }
}

/// Keeps the `n` largest-magnitude entries of every `m`-group along each row
/// and zeroes the rest. Kept values are copied verbatim.
pub fn project<T: Real>(w: &DenseMatrix<T>, pattern: SparsityPattern) -> Result<(DenseMatrix<T>, Mask)> {
    let mask = mask_of(w, pattern)?;
    let data = w
        .data()
        .iter()
        .zip(mask.bits())
        .map(|(&v, &b)| if b == 1 { v } else { T::ZERO })
        .collect();
    let wt = DenseMatrix::new(w.rows(), w.cols(), data)?;
    Ok((wt, mask))
}

/// The mask `project` would produce, without building the projected matrix.
pub fn mask_of<T: Real>(w: &DenseMatrix<T>, pattern: SparsityPattern) -> Result<Mask> {
    pattern.check_cols(w.cols())?;
    let mut bits = vec![0u8; w.len()];
    if pattern.is_dense() {
        bits.fill(1);
    } else {
        let mut order = Vec::with_capacity(pattern.m);
        for (group, keep) in w.data().chunks(pattern.m).zip(bits.chunks_mut(pattern.m)) {
            select_group(group, pattern.n, &mut order, keep);
        }
    }
    Mask::new(w.rows(), w.cols(), bits)
}

/// Fraction of zero bits in the mask.
pub fn sparsity_ratio(mask: &Mask) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    1.0 - mask.count_ones() as f64 / mask.len() as f64
}

/// Bit width needed to store an index in `[0, m)`.
fn index_width(m: usize) -> u32 {
    usize::BITS - (m - 1).leading_zeros()
}

/// In-group indices packed at the minimal bit width (2 bits for `m = 4`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedIndices {
    width: u32,
    len: usize,
    words: Vec<u64>,
}

impl PackedIndices {
    fn with_capacity(m: usize, len: usize) -> Self {
        let width = index_width(m);
        let total_bits = width as usize * len;
        Self {
            width,
            len: 0,
            words: Vec::with_capacity(total_bits.div_ceil(64)),
        }
    }

    fn push(&mut self, v: usize) {
        let bit = self.len * self.width as usize;
        self.len += 1;
        if self.width == 0 {
            return;
        }
        let (word, off) = (bit / 64, bit % 64);
        while self.words.len() <= (bit + self.width as usize - 1) / 64 {
            self.words.push(0);
        }
        self.words[word] |= (v as u64) << off;
        if off + self.width as usize > 64 {
            self.words[word + 1] |= (v as u64) >> (64 - off);
        }
    }

    #[inline]
    pub fn get(&self, i: usize) -> usize {
        if self.width == 0 {
            return 0;
        }
        let bit = i * self.width as usize;
        let (word, off) = (bit / 64, bit % 64);
        let mask = (1u64 << self.width) - 1;
        let mut v = self.words[word] >> off;
        if off + self.width as usize > 64 {
            v |= self.words[word + 1] << (64 - off);
        }
        (v & mask) as usize
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).map(|i| self.get(i))
    }
}

/// Packed N:M tensor: `n` values per `m`-group plus each value's in-group position.
#[derive(Debug, Clone, PartialEq)]
pub struct NMCompressed<T = f32> {
    rows: usize,
    cols: usize,
    pattern: SparsityPattern,
    values: Vec<T>,
    indices: PackedIndices,
}

impl<T: Real> NMCompressed<T> {
    /// Assembles from raw parts, validating lengths and index ordering.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        pattern: SparsityPattern,
        values: Vec<T>,
        indices: &[usize],
    ) -> Result<Self> {
        pattern.check_cols(cols)?;
        let expected = rows * cols / pattern.m * pattern.n;
        if values.len() != expected || indices.len() != expected {
            return Err(Error::Corrupt(format!(
                "expected {expected} slots, got {} values and {} indices",
                values.len(),
                indices.len()
            )));
        }
        let mut packed = PackedIndices::with_capacity(pattern.m, expected);
        for (g, slots) in indices.chunks(pattern.n).enumerate() {
            for (s, &idx) in slots.iter().enumerate() {
                if idx >= pattern.m {
                    return Err(Error::Corrupt(format!("group {g}: index {idx} out of range")));
                }
                if s > 0 && idx <= slots[s - 1] {
                    return Err(Error::Corrupt(format!(
                        "group {g}: indices not strictly increasing"
                    )));
                }
                packed.push(idx);
            }
        }
        Ok(Self {
            rows,
            cols,
            pattern,
            values,
            indices: packed,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pattern(&self) -> SparsityPattern {
        self.pattern
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn indices(&self) -> &PackedIndices {
        &self.indices
    }

    fn groups_per_row(&self) -> usize {
        self.cols / self.pattern.m
    }
}

/// Packs a pattern-conforming matrix. Groups with fewer than `n` nonzeros are
/// padded with their lowest-index zero positions.
pub fn compress<T: Real>(wt: &DenseMatrix<T>, pattern: SparsityPattern) -> Result<NMCompressed<T>> {
    pattern.check_cols(wt.cols())?;
    let (n, m) = (pattern.n, pattern.m);
    let groups_per_row = wt.cols() / m;
    let slots = wt.len() / m * n;
    let mut values = Vec::with_capacity(slots);
    let mut indices = PackedIndices::with_capacity(m, slots);
    let mut chosen = Vec::with_capacity(n);
    for (gi, group) in wt.data().chunks(m).enumerate() {
        let nonzeros = group.iter().filter(|&&v| v != T::ZERO).count();
        if nonzeros > n {
            return Err(Error::Constraint {
                row: gi / groups_per_row,
                group: gi % groups_per_row,
                nonzeros,
                n,
            });
        }
        chosen.clear();
        chosen.extend((0..m).filter(|&i| group[i] != T::ZERO));
        chosen.extend((0..m).filter(|&i| group[i] == T::ZERO).take(n - nonzeros));
        chosen.sort_unstable();
        for &i in &chosen {
            values.push(group[i]);
            indices.push(i);
        }
    }
    Ok(NMCompressed {
        rows: wt.rows(),
        cols: wt.cols(),
        pattern,
        values,
        indices,
    })
}

pub fn decompress<T: Real>(c: &NMCompressed<T>) -> Result<DenseMatrix<T>> {
    let (n, m) = (c.pattern.n, c.pattern.m);
    let mut out = DenseMatrix::zeros(c.rows, c.cols);
    let data = out.data_mut();
    for g in 0..c.values.len() / n {
        let mut prev = None;
        for s in 0..n {
            let slot = g * n + s;
            let idx = c.indices.get(slot);
            if idx >= m || prev.is_some_and(|p| idx <= p) {
                return Err(Error::Corrupt(format!(
                    "group {g}: duplicate or non-increasing index {idx}"
                )));
            }
            prev = Some(idx);
            data[g * m + idx] = c.values[slot];
        }
    }
    Ok(out)
}

/// `decompress(c) · x`, reading only the stored slots.
///
/// Inner-dimension terms are visited in ascending order, matching `matmul`
/// bit for bit.
pub fn spmm<T: Real>(c: &NMCompressed<T>, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if c.cols != x.rows() {
        return Err(Error::shape("spmm", (c.rows, c.cols), x.shape()));
    }
    let (n, m) = (c.pattern.n, c.pattern.m);
    let width = x.cols();
    let groups = c.groups_per_row();
    let mut out = DenseMatrix::zeros(c.rows, width);
    for r in 0..c.rows {
        let out_row = out.row_mut(r);
        for g in 0..groups {
            let base = (r * groups + g) * n;
            for s in 0..n {
                let v = c.values[base + s];
                if v == T::ZERO {
                    continue;
                }
                let k = g * m + c.indices.get(base + s);
                for (o, &xv) in out_row.iter_mut().zip(x.row(k)) {
                    *o += v * xv;
                }
            }
        }
    }
    Ok(out)
}

pub const NMCX_MAGIC: &[u8; 4] = b"NMCX";
pub const NMCX_VERSION: u32 = 1;

/// `NMCX` layout: magic, version u32, rows u32, cols u32, n u16, m u16 (LE),
/// then f32 values, then one byte per index.
pub fn encode_nmcx(c: &NMCompressed<f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(20 + 5 * c.values.len());
    buf.extend_from_slice(NMCX_MAGIC);
    buf.extend_from_slice(&NMCX_VERSION.to_le_bytes());
    buf.extend_from_slice(&(c.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(c.cols as u32).to_le_bytes());
    buf.extend_from_slice(&(c.pattern.n as u16).to_le_bytes());
    buf.extend_from_slice(&(c.pattern.m as u16).to_le_bytes());
    for v in &c.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    // one byte per index, so m is capped at 256 on disk
    buf.extend(c.indices.iter().map(|i| i as u8));
    buf
}

pub fn decode_nmcx(bytes: &[u8]) -> Result<NMCompressed<f32>> {
    let header = bytes
        .get(..20)
        .ok_or_else(|| Error::format(bytes.len(), "truncated NMCX header"))?;
    if &header[0..4] != NMCX_MAGIC {
        return Err(Error::format(0, "bad NMCX magic"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
    let u16_at = |i: usize| u16::from_le_bytes(header[i..i + 2].try_into().unwrap()) as usize;
    if u32_at(4) != NMCX_VERSION as usize {
        return Err(Error::format(4, format!("unsupported NMCX version {}", u32_at(4))));
    }
    let (rows, cols) = (u32_at(8), u32_at(12));
    let pattern = SparsityPattern::new(u16_at(16), u16_at(18)).map_err(|e| Error::format(16, e.to_string()))?;
    if cols % pattern.m != 0 {
        return Err(Error::format(12, format!("{cols} columns not divisible by m={}", pattern.m)));
    }
    let slots = rows * cols / pattern.m * pattern.n;
    let values_end = 20 + 4 * slots;
    let total = values_end + slots;
    if bytes.len() != total {
        return Err(Error::format(
            bytes.len().min(total),
            format!("expected {total} bytes, found {}", bytes.len()),
        ));
    }
    let values = bytes[20..values_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let indices: Vec<usize> = bytes[values_end..].iter().map(|&b| b as usize).collect();
    NMCompressed::from_parts(rows, cols, pattern, values, &indices)
}
