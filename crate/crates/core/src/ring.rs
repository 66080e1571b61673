//! Fixed-point arithmetic over the ring of integers modulo `2^modulus_bits`.
//!
//! Ring elements are stored in `u64`. All tensor arithmetic wraps modulo
//! `2^64`, which is consistent with every smaller power-of-two modulus;
//! [`RingParams::reduce`] maps a word into the configured ring.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ring and fixed-point format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingParams {
    /// The ring is `Z / 2^modulus_bits`.
    pub modulus_bits: u32,
    /// Width of a logical fixed-point word (sign included).
    pub value_bits: u32,
    /// Fraction bits of a logical word.
    pub frac_bits: u32,
    /// Largest inner-product length the ring has headroom for.
    pub max_reduction_dim: u64,
}

impl Default for RingParams {
    fn default() -> Self {
        Self::new(64, 15, 8).expect("default ring parameters are valid")
    }
}

fn ceil_log2(x: u64) -> u32 {
    if x <= 1 {
        0
    } else {
        64 - (x - 1).leading_zeros()
    }
}

impl RingParams {
    /// Builds a ring with the largest reduction dimension the headroom allows
    /// (capped at `2^32`).
    pub fn new(modulus_bits: u32, value_bits: u32, frac_bits: u32) -> Result<Self> {
        if modulus_bits < 2 * value_bits {
            return Err(Error::RingParams(format!(
                "modulus_bits {modulus_bits} leaves no headroom for {value_bits}-bit products"
            )));
        }
        let spare = (modulus_bits - 2 * value_bits).min(32);
        Self::with_reduction_dim(modulus_bits, value_bits, frac_bits, 1u64 << spare)
    }

    pub fn with_reduction_dim(
        modulus_bits: u32,
        value_bits: u32,
        frac_bits: u32,
        max_reduction_dim: u64,
    ) -> Result<Self> {
        if !(2..=64).contains(&modulus_bits) {
            return Err(Error::RingParams(format!("modulus_bits {modulus_bits} not in 2..=64")));
        }
        if value_bits < 2 || frac_bits >= value_bits {
            return Err(Error::RingParams(format!(
                "need 2 <= value_bits and frac_bits < value_bits (got {value_bits}, {frac_bits})"
            )));
        }
        if max_reduction_dim == 0 || modulus_bits < 2 * value_bits + ceil_log2(max_reduction_dim) {
            return Err(Error::RingParams(format!(
                "modulus_bits {modulus_bits} < 2*{value_bits} + log2({max_reduction_dim})"
            )));
        }
        Ok(Self {
            modulus_bits,
            value_bits,
            frac_bits,
            max_reduction_dim,
        })
    }

    #[inline]
    pub fn mask(&self) -> u64 {
        if self.modulus_bits == 64 {
            u64::MAX
        } else {
            (1u64 << self.modulus_bits) - 1
        }
    }

    #[inline]
    pub fn reduce(&self, x: u64) -> u64 {
        x & self.mask()
    }

    /// Signed (two's-complement) reading of a ring element.
    #[inline]
    pub fn to_signed(&self, x: u64) -> i64 {
        let shift = 64 - self.modulus_bits;
        ((x << shift) as i64) >> shift
    }

    #[inline]
    pub fn from_signed(&self, v: i64) -> u64 {
        self.reduce(v as u64)
    }

    /// Uniform ring element.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        self.reduce(rng.gen::<u64>())
    }

    /// Exclusive bound on |x| for encodable reals.
    pub fn real_bound(&self) -> f64 {
        2f64.powi(self.value_bits as i32 - 1 - self.frac_bits as i32)
    }

    pub fn max_value(&self) -> i64 {
        (1i64 << (self.value_bits - 1)) - 1
    }

    pub fn min_value(&self) -> i64 {
        -(1i64 << (self.value_bits - 1))
    }

    pub fn scale(&self) -> f64 {
        (1u64 << self.frac_bits) as f64
    }

    /// Encodes a real as `round(x * 2^frac_bits)`.
    pub fn encode(&self, x: f64) -> Result<u64> {
        let bound = self.real_bound();
        if !x.is_finite() || x.abs() >= bound {
            return Err(Error::Overflow { value: x, bound });
        }
        Ok(self.from_signed((x * self.scale()).round() as i64))
    }

    /// Encodes with saturation instead of an error; returns whether it clipped.
    pub fn encode_saturating(&self, x: f64) -> (u64, bool) {
        let v = (x * self.scale()).round();
        let (lo, hi) = (self.min_value() as f64, self.max_value() as f64);
        if v.is_nan() {
            return (0, true);
        }
        let clipped = v < lo || v > hi;
        (self.from_signed(v.clamp(lo, hi) as i64), clipped)
    }

    pub fn decode(&self, x: u64) -> f64 {
        self.to_signed(x) as f64 / self.scale()
    }

    /// Decodes a value carrying `frac` fraction bits.
    pub fn decode_at(&self, x: u64, frac: u32) -> f64 {
        self.to_signed(x) as f64 / 2f64.powi(frac as i32)
    }

    /// Floor-shift by `shift` bits and saturate to the logical word range.
    /// Returns the result and whether saturation happened.
    pub fn truncate_word(&self, x: u64, shift: u32) -> (u64, bool) {
        let v = self.to_signed(x) >> shift;
        if v > self.max_value() {
            (self.from_signed(self.max_value()), true)
        } else if v < self.min_value() {
            (self.from_signed(self.min_value()), true)
        } else {
            (self.from_signed(v), false)
        }
    }
}

/// Row-major matrix of ring elements.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedTensor {
    rows: usize,
    cols: usize,
    data: Vec<u64>,
}

impl FixedTensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<u64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} elements for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_signed(ring: &RingParams, rows: usize, cols: usize, vals: &[i64]) -> Result<Self> {
        Self::from_vec(rows, cols, vals.iter().map(|&v| ring.from_signed(v)).collect())
    }

    /// Encodes reals; fails on the first value outside the fixed-point range.
    pub fn encode(ring: &RingParams, rows: usize, cols: usize, vals: &[f64]) -> Result<Self> {
        let data = vals.iter().map(|&v| ring.encode(v)).collect::<Result<Vec<_>>>()?;
        Self::from_vec(rows, cols, data)
    }

    pub fn identity(ring: &RingParams, n: usize, one: u64) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.set(i, i, ring.reduce(one));
        }
        t
    }

    /// Uniform over the full ring.
    pub fn random<R: Rng + ?Sized>(ring: &RingParams, rows: usize, cols: usize, rng: &mut R) -> Self {
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| ring.sample(rng)).collect(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[u64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: u64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[u64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    fn check_same(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "add")?;
        Ok(self.zip(other, u64::wrapping_add))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "sub")?;
        Ok(self.zip(other, u64::wrapping_sub))
    }

    pub fn neg(&self) -> Self {
        self.map(|x| x.wrapping_neg())
    }

    /// Multiplies every element by a ring scalar.
    pub fn scale(&self, k: u64) -> Self {
        self.map(|x| x.wrapping_mul(k))
    }

    pub fn shl(&self, bits: u32) -> Self {
        self.map(|x| x.wrapping_shl(bits))
    }

    pub fn map(&self, mut f: impl FnMut(u64) -> u64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip(&self, other: &Self, f: impl Fn(u64, u64) -> u64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Reduces every element into the ring.
    pub fn reduced(&self, ring: &RingParams) -> Self {
        self.map(|x| ring.reduce(x))
    }

    /// Exact modular product; no truncation.
    pub fn mat_mul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "mat_mul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = vec![0u64; self.rows * other.cols];
        for i in 0..self.rows {
            let orow = &mut out[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o = o.wrapping_add(a.wrapping_mul(b));
                }
            }
        }
        Ok(Self {
            rows: self.rows,
            cols: other.cols,
            data: out,
        })
    }

    /// Rows `start..start+len` as a new tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        Self {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    /// Columns `start..start+len` as a new tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Self {
        let mut out = Self::zeros(self.rows, len);
        for r in 0..self.rows {
            for c in 0..len {
                out.set(r, c, self.get(r, start + c));
            }
        }
        out
    }

    pub fn to_signed(&self, ring: &RingParams) -> Vec<i64> {
        self.data.iter().map(|&x| ring.to_signed(x)).collect()
    }

    pub fn decode(&self, ring: &RingParams) -> Vec<f64> {
        self.data.iter().map(|&x| ring.decode(x)).collect()
    }

    pub fn decode_at(&self, ring: &RingParams, frac: u32) -> Vec<f64> {
        self.data.iter().map(|&x| ring.decode_at(x, frac)).collect()
    }
}

/// Encodes a real to a ring element (`round(x * 2^f)`).
pub fn fx_encode(x: f64, ring: &RingParams) -> Result<u64> {
    ring.encode(x)
}

pub fn fx_decode(x: u64, ring: &RingParams) -> f64 {
    ring.decode(x)
}

/// Exact modular matrix product.
pub fn mat_mul(a: &FixedTensor, b: &FixedTensor) -> Result<FixedTensor> {
    a.mat_mul(b)
}

/// Floor-shifts every element by `frac_bits` and saturates to the logical
/// word range. Returns the tensor and the number of saturated elements.
pub fn truncate(a: &FixedTensor, ring: &RingParams) -> (FixedTensor, usize) {
    truncate_by(a, ring, ring.frac_bits)
}

/// Like [`truncate`] with an explicit shift.
pub fn truncate_by(a: &FixedTensor, ring: &RingParams, shift: u32) -> (FixedTensor, usize) {
    let mut saturated = 0;
    let out = a.map(|x| {
        let (v, s) = ring.truncate_word(x, shift);
        saturated += s as usize;
        v
    });
    (out, saturated)
}
