//! Per-row uniform quantization with stochastic rounding.
//!
//! A row `e` is stored as b-bit codes plus two 32-bit scalars: the offset
//! `Z = min(e)` and the range `R = max(e) - min(e)`. Codes are
//! `round((e - Z) * B / R)` with `B = 2^b - 1` bins, and reconstruction is
//! `R * code / B + Z`. With stochastic rounding the reconstruction is an
//! unbiased estimate of `e` with per-element variance at most `R² / (4B²)`.
//!
//! `b = 32` is a pass-through mode that keeps the raw values.
//!
//! Codes are packed least-significant-bit first, row-major, with every row
//! padded to a whole byte.

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseMatrix, Element};

/// Bytes of per-row metadata (range and offset, both 32-bit).
pub const ROW_METADATA_BYTES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rounding {
    Stochastic,
    Nearest,
}

impl fmt::Display for Rounding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rounding::Stochastic => "stochastic",
            Rounding::Nearest => "nearest",
        })
    }
}

impl FromStr for Rounding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" | "sr" => Ok(Rounding::Stochastic),
            "nearest" | "nr" => Ok(Rounding::Nearest),
            other => Err(Error::Config(format!(
                "rounding must be `stochastic` or `nearest`, got `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    bits: u8,
    rounding: Rounding,
}

impl QuantConfig {
    pub const SUPPORTED_BITS: [u8; 5] = [1, 2, 4, 8, 32];

    pub fn new(bits: u8, rounding: Rounding) -> Result<Self> {
        if !Self::SUPPORTED_BITS.contains(&bits) {
            return Err(Error::Config(format!(
                "bits must be one of 1, 2, 4, 8, 32; got {bits}"
            )));
        }
        Ok(Self { bits, rounding })
    }

    /// Pass-through storage; contexts are kept at full precision.
    pub fn exact() -> Self {
        Self {
            bits: 32,
            rounding: Rounding::Stochastic,
        }
    }

    pub fn stochastic(bits: u8) -> Result<Self> {
        Self::new(bits, Rounding::Stochastic)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn rounding(&self) -> Rounding {
        self.rounding
    }

    pub fn is_passthrough(&self) -> bool {
        self.bits == 32
    }

    /// Number of quantization bins `2^b - 1`. Meaningless for `b = 32`.
    pub fn bins(&self) -> u32 {
        if self.is_passthrough() {
            u32::MAX
        } else {
            (1u32 << self.bits) - 1
        }
    }
}

/// Counter-based source of uniform draws keyed by `(seed, tensor id, row)`.
///
/// Each row gets an independent ChaCha8 stream, so rows can be quantized in
/// any order (or in parallel) and still reproduce the same codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RandomStream {
    seed: u64,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn row(&self, tensor_id: u64, row: u64) -> RowStream {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&tensor_id.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(row);
        RowStream { rng }
    }
}

/// Draws for a single row; the counter advances once per draw.
pub struct RowStream {
    rng: ChaCha8Rng,
}

impl RowStream {
    /// Uniform draw in `[0, 1)` with 32-bit resolution.
    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        self.rng.next_u32() as f64 * (1.0 / 4_294_967_296.0)
    }
}

/// Rounds up with probability equal to the fractional part of `x`.
#[inline]
pub fn stochastic_round(x: f64, u: f64) -> i64 {
    let floor = x.floor();
    if u < x - floor {
        floor as i64 + 1
    } else {
        floor as i64
    }
}

/// Round half to even.
#[inline]
pub fn nearest_round(x: f64) -> i64 {
    x.round_ties_even() as i64
}

fn f32_toward_neg_inf(x: f64) -> f32 {
    let y = x as f32;
    if (y as f64) > x {
        y.next_down()
    } else {
        y
    }
}

fn f32_toward_pos_inf(x: f64) -> f32 {
    let y = x as f32;
    if (y as f64) < x {
        y.next_up()
    } else {
        y
    }
}

/// Stored `(range, offset)` of a row: offset rounded down and range rounded
/// up to `f32`. A constant row gets a zero range.
pub fn row_metadata<T: Element>(row: &[T]) -> (f32, f32) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in row {
        let v = v.to_f64();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let offset = f32_toward_neg_inf(lo);
    if hi == lo {
        return (0.0, offset);
    }
    (f32_toward_pos_inf(hi - offset as f64), offset)
}

/// Exact per-element variance of the stochastic reconstruction of `row`:
/// `(R/B)^2 f (1 - f)` with `f` the fractional part of the scaled value.
pub fn reconstruction_variance<T: Element>(row: &[T], bits: u8) -> Result<Vec<f64>> {
    let cfg = QuantConfig::stochastic(bits)?;
    if cfg.is_passthrough() {
        return Ok(vec![0.0; row.len()]);
    }
    let (range, offset) = row_metadata(row);
    if range == 0.0 {
        return Ok(vec![0.0; row.len()]);
    }
    let bins = cfg.bins() as f64;
    let scale = bins / range as f64;
    let step = range as f64 / bins;
    Ok(row
        .iter()
        .map(|v| {
            let s = ((v.to_f64() - offset as f64) * scale).clamp(0.0, bins);
            let f = s - s.floor();
            step * step * f * (1.0 - f)
        })
        .collect())
}

/// Codes and metadata of one quantized row.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedRow {
    pub codes: Vec<u8>,
    pub range: f32,
    pub offset: f32,
}

/// Quantizes one row. Panics on pass-through configs, which have no codes.
pub fn quantize_row<T: Element>(row: &[T], cfg: QuantConfig, rng: &mut RowStream) -> QuantizedRow {
    let mut codes = vec![0u8; row.len()];
    let (range, offset) = quantize_row_into(row, cfg, rng, &mut codes);
    QuantizedRow {
        codes,
        range,
        offset,
    }
}

/// Writes codes for `row` into `codes` and returns `(range, offset)`.
///
/// The metadata is rounded outward to `f32` (offset down, range up) before
/// the codes are computed, so codes are unbiased with respect to exactly the
/// metadata that gets stored.
pub fn quantize_row_into<T: Element>(
    row: &[T],
    cfg: QuantConfig,
    rng: &mut RowStream,
    codes: &mut [u8],
) -> (f32, f32) {
    assert!(!cfg.is_passthrough(), "pass-through rows are not quantized");
    assert!(!row.is_empty(), "cannot quantize an empty row");
    debug_assert_eq!(row.len(), codes.len());
    let (range, offset) = row_metadata(row);
    if range == 0.0 {
        codes.fill(0);
        return (0.0, offset);
    }
    let bins = cfg.bins() as f64;
    let scale = bins / range as f64;
    let z = offset as f64;
    match cfg.rounding() {
        Rounding::Stochastic => {
            for (c, v) in codes.iter_mut().zip(row) {
                let s = ((v.to_f64() - z) * scale).clamp(0.0, bins);
                // `s` is non-negative, so truncation is the floor.
                let floor = s as u8;
                *c = floor + u8::from(rng.next_uniform() < s - floor as f64);
            }
        }
        Rounding::Nearest => {
            for (c, v) in codes.iter_mut().zip(row) {
                let s = ((v.to_f64() - z) * scale).clamp(0.0, bins);
                *c = nearest_round(s) as u8;
            }
        }
    }
    (range, offset)
}

/// Affine reconstruction `R * code / B + Z`; a zero range returns `Z`.
pub fn dequantize_row<T: Element>(codes: &[u8], range: f32, offset: f32, bins: u32) -> Vec<T> {
    let mut out = vec![T::ZERO; codes.len()];
    dequantize_row_into(codes, range, offset, bins, &mut out);
    out
}

pub fn dequantize_row_into<T: Element>(
    codes: &[u8],
    range: f32,
    offset: f32,
    bins: u32,
    out: &mut [T],
) {
    debug_assert_eq!(codes.len(), out.len());
    if range == 0.0 {
        out.fill(T::from_f64(offset as f64));
        return;
    }
    let (r, z, b) = (range as f64, offset as f64, bins as f64);
    let level = |c: u8| T::from_f64(r * c as f64 / b + z);
    if (bins as usize) < codes.len() {
        let mut table = [T::ZERO; 256];
        for (c, t) in table.iter_mut().enumerate().take(bins as usize + 1) {
            *t = level(c as u8);
        }
        for (o, &c) in out.iter_mut().zip(codes) {
            *o = table[c as usize];
        }
    } else {
        for (o, &c) in out.iter_mut().zip(codes) {
            *o = level(c);
        }
    }
}

fn check_pack_bits(bits: u8) -> Result<()> {
    if matches!(bits, 1 | 2 | 4 | 8) {
        Ok(())
    } else {
        Err(Error::Config(format!("cannot pack {bits}-bit codes")))
    }
}

/// Packed length of `count` codes of width `bits`.
#[inline]
pub fn packed_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

/// Packs codes least-significant-bit first, padding the tail to a byte.
pub fn pack_bits(codes: &[u8], bits: u8) -> Result<Vec<u8>> {
    check_pack_bits(bits)?;
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    pack_into(codes, bits, &mut out)?;
    Ok(out)
}

fn pack_into(codes: &[u8], bits: u8, out: &mut [u8]) -> Result<()> {
    let limit = if bits == 8 { 256u32 } else { 1u32 << bits };
    let b = bits as usize;
    for (i, &c) in codes.iter().enumerate() {
        if c as u32 >= limit {
            return Err(Error::Encoding {
                code: c as u32,
                bits,
            });
        }
        let pos = i * b;
        out[pos / 8] |= c << (pos % 8);
    }
    Ok(())
}

/// Inverse of [`pack_bits`] for the first `count` codes.
pub fn unpack_bits(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u8>> {
    check_pack_bits(bits)?;
    if bytes.len() < packed_len(count, bits) {
        return Err(Error::Config(format!(
            "{} bytes cannot hold {count} {bits}-bit codes",
            bytes.len()
        )));
    }
    let mut out = vec![0u8; count];
    unpack_into(bytes, bits, &mut out);
    Ok(out)
}

fn unpack_into(bytes: &[u8], bits: u8, out: &mut [u8]) {
    let b = bits as usize;
    let mask = if bits == 8 { 0xff } else { (1u8 << bits) - 1 };
    for (i, o) in out.iter_mut().enumerate() {
        let pos = i * b;
        *o = (bytes[pos / 8] >> (pos % 8)) & mask;
    }
}

/// Byte size of a quantized `rows x cols` tensor.
///
/// `rows * (ceil(cols * b / 8) + 8)` for `b < 32`; `rows * cols * elem_bytes`
/// in pass-through mode, where no metadata is kept.
pub fn stored_bytes_for(rows: usize, cols: usize, bits: u8, elem_bytes: usize) -> usize {
    if bits == 32 {
        rows * cols * elem_bytes
    } else {
        rows * (packed_len(cols, bits) + ROW_METADATA_BYTES)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Storage<T> {
    Packed {
        codes: Vec<u8>,
        ranges: Vec<f32>,
        offsets: Vec<f32>,
    },
    Raw(Vec<T>),
}

/// Compressed activation: packed codes plus per-row range and offset.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor<T> {
    rows: usize,
    cols: usize,
    bits: u8,
    storage: Storage<T>,
}

impl<T: Element> QuantizedTensor<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    fn row_stride(&self) -> usize {
        packed_len(self.cols, self.bits)
    }

    /// Unpacked codes of row `r`; `None` in pass-through mode.
    pub fn row_codes(&self, r: usize) -> Option<Vec<u8>> {
        match &self.storage {
            Storage::Packed { codes, .. } => {
                let stride = self.row_stride();
                let mut out = vec![0u8; self.cols];
                unpack_into(&codes[r * stride..(r + 1) * stride], self.bits, &mut out);
                Some(out)
            }
            Storage::Raw(_) => None,
        }
    }

    /// `(range, offset)` of row `r`; `None` in pass-through mode.
    pub fn row_metadata(&self, r: usize) -> Option<(f32, f32)> {
        match &self.storage {
            Storage::Packed {
                ranges, offsets, ..
            } => Some((ranges[r], offsets[r])),
            Storage::Raw(_) => None,
        }
    }

    /// Packed code stream, row-major with byte-aligned rows.
    pub fn packed_codes(&self) -> Option<&[u8]> {
        match &self.storage {
            Storage::Packed { codes, .. } => Some(codes),
            Storage::Raw(_) => None,
        }
    }

    /// Bytes actually held by this tensor.
    pub fn stored_bytes(&self) -> usize {
        match &self.storage {
            Storage::Packed {
                codes,
                ranges,
                offsets,
            } => codes.len() + 4 * (ranges.len() + offsets.len()),
            Storage::Raw(v) => v.len() * T::BYTES,
        }
    }

    /// Serialized form used to compare tensors byte for byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        out.push(self.bits);
        match &self.storage {
            Storage::Packed {
                codes,
                ranges,
                offsets,
            } => {
                out.extend_from_slice(codes);
                for (r, z) in ranges.iter().zip(offsets) {
                    out.extend_from_slice(&r.to_le_bytes());
                    out.extend_from_slice(&z.to_le_bytes());
                }
            }
            Storage::Raw(v) => {
                for x in v {
                    out.extend_from_slice(&x.bits().to_le_bytes()[..T::BYTES]);
                }
            }
        }
        out
    }
}

/// Quantizes every row of `x` with the stream keyed by `tensor_id`.
pub fn quantize_tensor<T: Element>(
    x: &DenseMatrix<T>,
    cfg: QuantConfig,
    stream: &RandomStream,
    tensor_id: u64,
) -> QuantizedTensor<T> {
    let (rows, cols) = x.shape();
    if cfg.is_passthrough() {
        return QuantizedTensor {
            rows,
            cols,
            bits: 32,
            storage: Storage::Raw(x.data().to_vec()),
        };
    }
    let stride = packed_len(cols, cfg.bits());
    let mut codes = vec![0u8; rows * stride];
    let mut ranges = Vec::with_capacity(rows);
    let mut offsets = Vec::with_capacity(rows);
    let mut scratch = vec![0u8; cols];
    for r in 0..rows {
        let mut rng = stream.row(tensor_id, r as u64);
        let (range, offset) = quantize_row_into(x.row(r), cfg, &mut rng, &mut scratch);
        pack_into(
            &scratch,
            cfg.bits(),
            &mut codes[r * stride..(r + 1) * stride],
        )
        .expect("quantized codes are within [0, B]");
        ranges.push(range);
        offsets.push(offset);
    }
    QuantizedTensor {
        rows,
        cols,
        bits: cfg.bits(),
        storage: Storage::Packed {
            codes,
            ranges,
            offsets,
        },
    }
}

pub fn dequantize_tensor<T: Element>(q: &QuantizedTensor<T>) -> DenseMatrix<T> {
    match &q.storage {
        Storage::Raw(v) => DenseMatrix::new(q.rows, q.cols, v.clone()).expect("shape preserved"),
        Storage::Packed {
            codes,
            ranges,
            offsets,
        } => {
            let bins = (1u32 << q.bits) - 1;
            let stride = q.row_stride();
            let mut out = DenseMatrix::zeros(q.rows, q.cols);
            let mut scratch = vec![0u8; q.cols];
            for r in 0..q.rows {
                unpack_into(&codes[r * stride..(r + 1) * stride], q.bits, &mut scratch);
                dequantize_row_into(&scratch, ranges[r], offsets[r], bins, out.row_mut(r));
            }
            out
        }
    }
}
