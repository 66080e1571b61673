//! Two's-complement word arithmetic over any [`BitBackend`].
//!
//! Words are little-endian bit vectors. Unless stated otherwise results
//! wrap modulo `2^width`.

use super::BitBackend;

pub type Word<B> = Vec<<B as BitBackend>::Bit>;

pub fn constant<B: BitBackend>(b: &mut B, v: u64, w: usize) -> Word<B> {
    (0..w).map(|i| b.constant(i < 64 && (v >> i) & 1 == 1)).collect()
}

pub fn constant_signed<B: BitBackend>(b: &mut B, v: i64, w: usize) -> Word<B> {
    (0..w).map(|i| b.constant((v >> i.min(63)) & 1 == 1)).collect()
}

fn msb<B: BitBackend>(x: &Word<B>) -> B::Bit {
    *x.last().expect("non-empty word")
}

pub fn sign_extend<B: BitBackend>(x: &Word<B>, w: usize) -> Word<B> {
    let mut v: Word<B> = x.iter().take(w).copied().collect();
    let s = msb::<B>(x);
    v.resize(w, s);
    v
}

pub fn zero_extend<B: BitBackend>(b: &mut B, x: &Word<B>, w: usize) -> Word<B> {
    let mut v: Word<B> = x.iter().take(w).copied().collect();
    let z = b.constant(false);
    v.resize(w, z);
    v
}

/// Full adder chain with carry in; returns the sum and the carry out.
/// Each bit costs one AND.
fn add_with_carry<B: BitBackend>(
    b: &mut B,
    x: &Word<B>,
    y: &Word<B>,
    mut c: B::Bit,
    need_carry: bool,
) -> (Word<B>, B::Bit) {
    assert_eq!(x.len(), y.len(), "adder width mismatch");
    let n = x.len();
    let mut s = Vec::with_capacity(n);
    for i in 0..n {
        let axc = b.xor(x[i], c);
        let bxc = b.xor(y[i], c);
        s.push(b.xor(axc, y[i]));
        if i + 1 < n || need_carry {
            let t = b.and(axc, bxc);
            c = b.xor(t, c);
        }
    }
    (s, c)
}

pub fn add<B: BitBackend>(b: &mut B, x: &Word<B>, y: &Word<B>) -> Word<B> {
    let z = b.constant(false);
    add_with_carry(b, x, y, z, false).0
}

pub fn sub<B: BitBackend>(b: &mut B, x: &Word<B>, y: &Word<B>) -> Word<B> {
    let ny: Word<B> = y.iter().map(|&v| b.not(v)).collect();
    let one = b.constant(true);
    add_with_carry(b, x, &ny, one, false).0
}

pub fn neg<B: BitBackend>(b: &mut B, x: &Word<B>) -> Word<B> {
    let z = constant(b, 0, x.len());
    sub(b, &z, x)
}

/// Signed `x < y` for equal-width words.
pub fn lt_signed<B: BitBackend>(b: &mut B, x: &Word<B>, y: &Word<B>) -> B::Bit {
    let w = x.len().max(y.len()) + 1;
    let d = sub(b, &sign_extend::<B>(x, w), &sign_extend::<B>(y, w));
    msb::<B>(&d)
}

/// Unsigned `x < y`.
pub fn lt_unsigned<B: BitBackend>(b: &mut B, x: &Word<B>, y: &Word<B>) -> B::Bit {
    let w = x.len().max(y.len()) + 1;
    let xe = zero_extend(b, x, w);
    let ye = zero_extend(b, y, w);
    let d = sub(b, &xe, &ye);
    msb::<B>(&d)
}

pub fn is_negative<B: BitBackend>(x: &Word<B>) -> B::Bit {
    msb::<B>(x)
}

/// `s ? x : y`, one AND per bit.
pub fn mux<B: BitBackend>(b: &mut B, s: B::Bit, x: &Word<B>, y: &Word<B>) -> Word<B> {
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let d = b.xor(xi, yi);
            let t = b.and(s, d);
            b.xor(yi, t)
        })
        .collect()
}

pub fn or_all<B: BitBackend>(b: &mut B, bits: &[B::Bit]) -> B::Bit {
    let mut acc = b.constant(false);
    for &x in bits {
        acc = b.or(acc, x);
    }
    acc
}

/// Constant left shift within the same width.
pub fn shl_const<B: BitBackend>(b: &mut B, x: &Word<B>, k: usize) -> Word<B> {
    let z = b.constant(false);
    (0..x.len()).map(|i| if i >= k { x[i - k] } else { z }).collect()
}

/// Arithmetic right shift by a constant; drops the low `k` bits, so the
/// result is `k` bits narrower (never narrower than one bit).
pub fn sar_const<B: BitBackend>(x: &Word<B>, k: usize) -> Word<B> {
    if k >= x.len() {
        return vec![msb::<B>(x)];
    }
    x[k..].to_vec()
}

/// Logical right shift by a constant, same width.
pub fn shr_const<B: BitBackend>(b: &mut B, x: &Word<B>, k: usize) -> Word<B> {
    let z = b.constant(false);
    (0..x.len())
        .map(|i| if i + k < x.len() { x[i + k] } else { z })
        .collect()
}

fn barrel<B: BitBackend>(b: &mut B, x: &Word<B>, amt: &Word<B>, fill: B::Bit, left: bool) -> Word<B> {
    let mut cur = x.clone();
    let w = x.len();
    for (i, &s) in amt.iter().enumerate() {
        let k = 1usize << i.min(40);
        let shifted: Word<B> = (0..w)
            .map(|j| {
                if left {
                    if j >= k {
                        cur[j - k]
                    } else {
                        fill
                    }
                } else if j + k < w {
                    cur[j + k]
                } else {
                    fill
                }
            })
            .collect();
        cur = mux(b, s, &shifted, &cur);
    }
    cur
}

/// Left shift by a variable amount (unsigned word `amt`).
pub fn shl_var<B: BitBackend>(b: &mut B, x: &Word<B>, amt: &Word<B>) -> Word<B> {
    let z = b.constant(false);
    barrel(b, x, amt, z, true)
}

/// Logical right shift by a variable amount.
pub fn shr_var<B: BitBackend>(b: &mut B, x: &Word<B>, amt: &Word<B>) -> Word<B> {
    let z = b.constant(false);
    barrel(b, x, amt, z, false)
}

/// Arithmetic right shift by a variable amount.
pub fn sar_var<B: BitBackend>(b: &mut B, x: &Word<B>, amt: &Word<B>) -> Word<B> {
    let s = msb::<B>(x);
    barrel(b, x, amt, s, false)
}

/// Clamps a signed word into `t` bits; returns the value and an overflow bit.
pub fn saturate<B: BitBackend>(b: &mut B, x: &Word<B>, t: usize) -> (Word<B>, B::Bit) {
    if x.len() <= t {
        let f = b.constant(false);
        return (sign_extend::<B>(x, t), f);
    }
    let s = msb::<B>(x);
    let diffs: Vec<B::Bit> = x[t - 1..x.len() - 1].iter().map(|&v| b.xor(v, s)).collect();
    let ovf = or_all(b, &diffs);
    let ns = b.not(s);
    let sat: Word<B> = (0..t).map(|i| if i + 1 == t { s } else { ns }).collect();
    let low = x[..t].to_vec();
    (mux(b, ovf, &sat, &low), ovf)
}

/// Product modulo `2^w` of two words already extended to the right
/// signedness; operands are zero-extended to `w`.
pub fn mul<B: BitBackend>(b: &mut B, x: &Word<B>, y: &Word<B>, w: usize) -> Word<B> {
    let xe = zero_extend(b, x, w);
    let ye = zero_extend(b, y, w);
    let mut acc = constant(b, 0, w);
    for i in 0..w {
        let yi = ye[i];
        let part: Word<B> = (0..w - i).map(|j| b.and(xe[j], yi)).collect();
        let hi = acc[i..].to_vec();
        let sum = add(b, &hi, &part);
        acc.splice(i.., sum);
    }
    acc
}

/// Signed product modulo `2^w`.
pub fn mul_signed<B: BitBackend>(b: &mut B, x: &Word<B>, y: &Word<B>, w: usize) -> Word<B> {
    mul(b, &sign_extend::<B>(x, w), &sign_extend::<B>(y, w), w)
}

/// Signed by unsigned product modulo `2^w`.
pub fn mul_signed_unsigned<B: BitBackend>(b: &mut B, x: &Word<B>, y: &Word<B>, w: usize) -> Word<B> {
    let ye = zero_extend(b, y, w);
    mul(b, &sign_extend::<B>(x, w), &ye, w)
}

/// Left-aligns an unsigned word: returns `x << lz` in a power-of-two width
/// (so a nonzero result has its top bit set) and the leading-zero count
/// of `x` as an unsigned word.
pub fn normalize<B: BitBackend>(b: &mut B, x: &Word<B>) -> (Word<B>, Word<B>) {
    let w = x.len();
    let wp = w.next_power_of_two();
    let z = b.constant(false);
    let mut cur: Word<B> = std::iter::repeat_n(z, wp - w).chain(x.iter().copied()).collect();
    let stages = wp.trailing_zeros() as usize;
    let mut lz = vec![z; stages.max(1) + 1];
    for s in (0..stages).rev() {
        let k = 1usize << s;
        let top: Vec<B::Bit> = cur[wp - k..].to_vec();
        let any = or_all(b, &top);
        let none = b.not(any);
        let shifted = shl_const(b, &cur, k);
        cur = mux(b, none, &shifted, &cur);
        lz[s] = none;
    }
    (cur, lz)
}

/// Value of a plain word as an unsigned integer (for tests and the
/// plaintext backend).
pub fn value(bits: &[bool]) -> u64 {
    super::from_bits(bits)
}

/// Value of a plain word as a signed integer.
pub fn value_signed(bits: &[bool]) -> i64 {
    let w = bits.len();
    let v = super::from_bits(bits);
    if w >= 64 {
        v as i64
    } else {
        ((v << (64 - w)) as i64) >> (64 - w)
    }
}
