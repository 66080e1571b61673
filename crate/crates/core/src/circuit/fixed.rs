//! Fixed-point nonlinear functions as word circuits.
//!
//! Each function takes reconstructed ring values (the low `in_bits` of the
//! share sum), optionally truncates them by `in_shift` with saturation, and
//! returns `value_bits`-wide signed results together with one flag bit that
//! is set on any saturation or out-of-domain input.

use serde::{Deserialize, Serialize};

use super::words::{self as wd, Word};
use super::BitBackend;
use crate::ring::RingParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FnKind {
    /// Reconstruct and re-share without changing the value.
    Remask,
    Truncate,
    Relu,
    Gelu,
    ExpApprox,
    MaxReduce,
    SoftmaxRow,
    Reciprocal,
    LayernormRow,
    /// Product `U W^T` modulo the ring of a `rows x m` matrix `U` and a
    /// `cols x m` matrix `W`, given row-major one after the other.
    Dot {
        rows: u16,
        cols: u16,
    },
}

impl FnKind {
    pub fn is_row(self) -> bool {
        matches!(
            self,
            FnKind::MaxReduce | FnKind::SoftmaxRow | FnKind::LayernormRow | FnKind::Dot { .. }
        )
    }

    /// Kinds that work on whole ring words rather than logical values.
    pub fn is_ring_op(self) -> bool {
        matches!(self, FnKind::Remask | FnKind::Dot { .. })
    }
}

/// Approximation parameters shared by the table and iteration based functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Approx {
    /// Piecewise-linear segments for exp over `[-16, 0]` (power of two).
    pub exp_segments: u32,
    /// Newton iterations for reciprocal and reciprocal square root.
    pub newton_iters: u32,
    /// Fraction bits used inside the reciprocal iterations.
    pub precision: u32,
    /// Fraction bits of the `1/d` constant in layer norm.
    pub mean_precision: u32,
}

impl Default for Approx {
    fn default() -> Self {
        Self {
            exp_segments: 64,
            newton_iters: 2,
            precision: 16,
            mean_precision: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SecureFnSpec {
    pub kind: FnKind,
    /// Low bits of the reconstructed value fed to the function.
    pub in_bits: u32,
    /// Arithmetic right shift applied (with saturation) before the function.
    pub in_shift: u32,
    pub value_bits: u32,
    pub frac_bits: u32,
    /// Elements per invocation: the row length for row functions, 1 otherwise.
    pub row_len: usize,
    pub approx: Approx,
}

/// Guard bits kept above a truncated value so that saturation is detected.
pub const HEADROOM_BITS: u32 = 16;

impl SecureFnSpec {
    pub fn new(kind: FnKind, ring: &RingParams, in_shift: u32, row_len: usize) -> Self {
        let in_bits = if kind.is_ring_op() {
            ring.modulus_bits
        } else {
            (ring.value_bits + in_shift + HEADROOM_BITS).min(ring.modulus_bits)
        };
        Self {
            kind,
            in_bits,
            in_shift,
            value_bits: ring.value_bits,
            frac_bits: ring.frac_bits,
            row_len: if kind.is_row() { row_len } else { 1 },
            approx: Approx::default(),
        }
    }

    pub fn outputs(&self) -> usize {
        match self.kind {
            FnKind::MaxReduce => 1,
            FnKind::Dot { rows, cols } => rows as usize * cols as usize,
            _ => self.row_len,
        }
    }

    /// Width of each output word before sign extension to the ring.
    pub fn out_bits(&self) -> u32 {
        if self.kind.is_ring_op() {
            self.in_bits
        } else {
            self.value_bits
        }
    }
}

fn ceil_log2(x: usize) -> usize {
    x.next_power_of_two().trailing_zeros() as usize
}

/// Node values for the exp table: `round(2^(f+4) * exp(-16 + 16 i / S))`.
pub fn exp_table(frac_bits: u32, segments: u32) -> Vec<i64> {
    let scale = 2f64.powi(frac_bits as i32 + 4);
    (0..=segments)
        .map(|i| (scale * (-16.0 + 16.0 * i as f64 / segments as f64).exp()).round() as i64)
        .collect()
}

fn gelu_real(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x * x * x)).tanh())
}

const GELU_SEGMENTS: usize = 64;

/// Node values for GELU over `[-4, 4]`.
pub fn gelu_table(frac_bits: u32) -> Vec<i64> {
    let scale = 2f64.powi(frac_bits as i32);
    (0..=GELU_SEGMENTS)
        .map(|i| (scale * gelu_real(-4.0 + 8.0 * i as f64 / GELU_SEGMENTS as f64)).round() as i64)
        .collect()
}

/// Selects `table[idx]` with a mux tree over the index bits.
fn lookup<B: BitBackend>(b: &mut B, idx: &Word<B>, table: &[i64], w: usize) -> Word<B> {
    let mut level: Vec<Word<B>> = table.iter().map(|&v| wd::constant_signed(b, v, w)).collect();
    for &bit in idx {
        if level.len() == 1 {
            break;
        }
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        for pair in level.chunks(2) {
            next.push(match pair {
                [lo, hi] => wd::mux(b, bit, hi, lo),
                [lo] => lo.clone(),
                _ => unreachable!(),
            });
        }
        level = next;
    }
    level.swap_remove(0)
}

/// Piecewise-linear interpolation for `t` in `[0, nseg << seg_log2)`.
/// `t` is unsigned; returns a signed word of width `w`.
fn pwl<B: BitBackend>(b: &mut B, t: &Word<B>, seg_log2: usize, nodes: &[i64], w: usize) -> Word<B> {
    let nseg = nodes.len() - 1;
    let idx_bits = ceil_log2(nseg);
    let u: Word<B> = t[..seg_log2].to_vec();
    let idx: Word<B> = t[seg_log2..seg_log2 + idx_bits].to_vec();
    let y0: Vec<i64> = nodes[..nseg].to_vec();
    let dy: Vec<i64> = nodes.windows(2).map(|p| p[1] - p[0]).collect();
    let base = lookup(b, &idx, &y0, w);
    let slope = lookup(b, &idx, &dy, w);
    let prod = wd::mul_signed_unsigned(b, &slope, &u, w + seg_log2 + 1);
    let step = wd::sign_extend::<B>(&wd::sar_const::<B>(&prod, seg_log2), w);
    wd::add(b, &base, &step)
}

/// Truncates a reconstructed value and saturates it into the value range.
fn pre_truncate<B: BitBackend>(b: &mut B, spec: &SecureFnSpec, x: &Word<B>) -> (Word<B>, B::Bit) {
    let shifted = wd::sar_const::<B>(x, spec.in_shift as usize);
    wd::saturate(b, &shifted, spec.value_bits as usize)
}

/// `e = exp(d)` for `d <= 0` at `frac_bits`, returned at `frac_bits + 4`
/// as an unsigned word of `f + 5` bits. Inputs below -16 give 0; a positive
/// input is out of domain and raises the returned flag.
fn exp_core<B: BitBackend>(b: &mut B, spec: &SecureFnSpec, d: &Word<B>) -> (Word<B>, B::Bit) {
    let f = spec.frac_bits as usize;
    let segs = spec.approx.exp_segments as usize;
    let span_log2 = 4 + f;
    let seg_log2 = span_log2 - ceil_log2(segs);
    let w = d.len().max(span_log2 + 2);
    let dx = wd::sign_extend::<B>(d, w);
    let lo = wd::constant_signed(b, -(1i64 << span_log2), w);
    let t = wd::sub(b, &dx, &lo);
    let below = wd::is_negative::<B>(&t);
    let neg = wd::is_negative::<B>(&dx);
    let zero_in = {
        let bits: Vec<B::Bit> = dx.clone();
        let any = wd::or_all(b, &bits);
        b.not(any)
    };
    let nodes = exp_table(spec.frac_bits, spec.approx.exp_segments);
    let ow = f + 6;
    let y = pwl(b, &t, seg_log2, &nodes, ow);
    let one = wd::constant(b, 1 << (f + 4), ow);
    let zero = wd::constant(b, 0, ow);
    let nonneg_val = one.clone();
    let v = wd::mux(b, neg, &y, &nonneg_val);
    let v = wd::mux(b, below, &zero, &v);
    let not_neg = b.not(neg);
    let nz = b.not(zero_in);
    let positive = b.and(not_neg, nz);
    (v[..f + 5].to_vec(), positive)
}

fn max_tree<B: BitBackend>(b: &mut B, xs: &[Word<B>]) -> Word<B> {
    let mut level = xs.to_vec();
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        for pair in level.chunks(2) {
            next.push(match pair {
                [x, y] => {
                    let lt = wd::lt_signed(b, x, y);
                    wd::mux(b, lt, y, x)
                }
                [x] => x.clone(),
                _ => unreachable!(),
            });
        }
        level = next;
    }
    level.swap_remove(0)
}

fn sum_tree<B: BitBackend>(b: &mut B, xs: &[Word<B>]) -> Word<B> {
    let mut level = xs.to_vec();
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        for pair in level.chunks(2) {
            next.push(match pair {
                [x, y] => wd::add(b, x, y),
                [x] => x.clone(),
                _ => unreachable!(),
            });
        }
        level = next;
    }
    level.swap_remove(0)
}

/// Takes the top `p + 1` bits of a left-aligned word.
fn top_bits<B: BitBackend>(b: &mut B, n: &Word<B>, p: usize) -> Word<B> {
    let wp = n.len();
    if wp > p {
        n[wp - 1 - p..].to_vec()
    } else {
        let z = b.constant(false);
        std::iter::repeat_n(z, p + 1 - wp).chain(n.iter().copied()).collect()
    }
}

/// Newton iterations for `1/m` with `m` in `[1, 2)` at `p` fraction bits.
/// Returns `t ~ 2^p / m` as an unsigned word of `p + 2` bits.
fn recip_core<B: BitBackend>(b: &mut B, spec: &SecureFnSpec, m: &Word<B>) -> Word<B> {
    let p = spec.approx.precision as usize;
    let tw = p + 2;
    let pw = 2 * p + 4;
    let c1 = ((24.0 / 17.0) * 2f64.powi(p as i32)).round() as u64;
    let c2 = ((8.0 / 17.0) * 2f64.powi(p as i32)).round() as u64;
    let c2w = wd::constant(b, c2, tw);
    let prod = wd::mul(b, m, &c2w, pw);
    let scaled = wd::shr_const(b, &prod, p)[..tw].to_vec();
    let c1w = wd::constant(b, c1, tw);
    let mut t = wd::sub(b, &c1w, &scaled);
    let two = wd::constant(b, 2 << p, tw);
    for _ in 0..spec.approx.newton_iters {
        let mt = wd::mul(b, m, &t, pw);
        let mt = wd::shr_const(b, &mt, p)[..tw].to_vec();
        let corr = wd::sub(b, &two, &mt);
        let next = wd::mul(b, &t, &corr, pw);
        t = wd::shr_const(b, &next, p)[..tw].to_vec();
    }
    // Newton approaches 1/m from below; one ulp recentres the error.
    let ulp = wd::constant(b, 1, tw);
    wd::add(b, &t, &ulp)
}

/// Unsigned small constant minus an unsigned word, as an unsigned word.
fn const_minus<B: BitBackend>(b: &mut B, c: u64, x: &Word<B>, w: usize) -> Word<B> {
    let cw = wd::constant(b, c, w);
    let xe = wd::zero_extend(b, x, w);
    wd::sub(b, &cw, &xe)
}

fn softmax_row<B: BitBackend>(b: &mut B, spec: &SecureFnSpec, v: &[Word<B>]) -> (Vec<Word<B>>, B::Bit) {
    let vb = spec.value_bits as usize;
    let f = spec.frac_bits as usize;
    let p = spec.approx.precision as usize;
    let m = max_tree(b, v);
    let mut flag = b.constant(false);
    let mut es = Vec::with_capacity(v.len());
    for x in v {
        let d = wd::sub(b, &wd::sign_extend::<B>(x, vb + 1), &wd::sign_extend::<B>(&m, vb + 1));
        let (e, bad) = exp_core(b, spec, &d);
        flag = b.or(flag, bad);
        es.push(e);
    }
    let ew = f + 5;
    let sw = ew + ceil_log2(v.len()) + 1;
    let wide: Vec<Word<B>> = es.iter().map(|e| wd::zero_extend(b, e, sw)).collect();
    let s = sum_tree(b, &wide);
    let (n, lz) = wd::normalize(b, &s);
    let mant = top_bits(b, &n, p);
    let t = recip_core(b, spec, &mant);
    // p_j = e_j * t >> (p + h - f) with h = sw - 1 - lz
    let aw = 8;
    let sh = const_minus(b, (p + sw - 1 - f) as u64, &lz, aw);
    let pw = ew + p + 3;
    let mut out = Vec::with_capacity(v.len());
    for e in &es {
        let prod = wd::mul(b, e, &t, pw);
        let q = wd::shr_var(b, &prod, &sh);
        let qe = wd::zero_extend(b, &q, pw + 1);
        let (y, o) = wd::saturate(b, &qe, vb);
        flag = b.or(flag, o);
        out.push(y);
    }
    (out, flag)
}

fn reciprocal<B: BitBackend>(b: &mut B, spec: &SecureFnSpec, x: &Word<B>) -> (Word<B>, B::Bit) {
    let vb = spec.value_bits as usize;
    let f = spec.frac_bits as usize;
    let p = spec.approx.precision as usize;
    let neg = wd::is_negative::<B>(x);
    let any = wd::or_all(b, x);
    let zero = b.not(any);
    let invalid = b.or(neg, zero);
    let one = wd::constant(b, 1, vb);
    let xv = wd::mux(b, invalid, &one, x);
    let (n, lz) = wd::normalize(b, &xv);
    let mant = top_bits(b, &n, p);
    let t = recip_core(b, spec, &mant);
    // y = t >> (p + h - 2f) with h = vb - 1 - lz
    let sh = const_minus(b, (p + vb - 1 - 2 * f) as u64, &lz, 8);
    let q = wd::shr_var(b, &t, &sh);
    let qe = wd::zero_extend(b, &q, p + 3);
    let (y, o) = wd::saturate(b, &qe, vb);
    (y, b.or(invalid, o))
}

fn layernorm_row<B: BitBackend>(b: &mut B, spec: &SecureFnSpec, v: &[Word<B>]) -> (Vec<Word<B>>, B::Bit) {
    let vb = spec.value_bits as usize;
    let f = spec.frac_bits as usize;
    let p = spec.approx.precision as usize;
    let pm = spec.approx.mean_precision as usize;
    let d = v.len();
    let inv_d = ((1u64 << pm) as f64 / d as f64).round() as u64;
    let lg = ceil_log2(d) + 1;

    let sw = vb + lg;
    let wide: Vec<Word<B>> = v.iter().map(|x| wd::sign_extend::<B>(x, sw)).collect();
    let sum = sum_tree(b, &wide);
    let invw = wd::constant(b, inv_d, pm + 2);
    let mw = sw + pm + 3;
    let mprod = wd::mul_signed_unsigned(b, &sum, &invw, mw);
    let mean = wd::sign_extend::<B>(&wd::sar_const::<B>(&mprod, pm), vb + 2);

    let cw = vb + 2;
    let cs: Vec<Word<B>> = v
        .iter()
        .map(|x| wd::sub(b, &wd::sign_extend::<B>(x, cw), &mean))
        .collect();
    let qw = 2 * cw;
    let sq: Vec<Word<B>> = cs
        .iter()
        .map(|c| {
            let s = wd::mul_signed(b, c, c, qw);
            wd::zero_extend(b, &s, qw + lg)
        })
        .collect();
    let ss = sum_tree(b, &sq);
    let vprod = wd::mul(b, &ss, &invw, qw + lg + pm + 2);
    let var = wd::shr_const(b, &vprod, pm)[..qw].to_vec();
    let eps_units = 1u64 << (2 * f).saturating_sub(8);
    let vw = qw + 1;
    let eps = wd::constant(b, eps_units, vw);
    let var_w = wd::zero_extend(b, &var, vw);
    let var_e = wd::add(b, &var_w, &eps);

    let (n, lz) = wd::normalize(b, &var_e);
    let mant = top_bits(b, &n, p);
    // h = vw - 1 - lz; odd h doubles the mantissa into [2, 4)
    let aw = 8;
    let h = const_minus(b, (vw - 1) as u64, &lz, aw);
    let odd = h[0];
    let mw2 = p + 3;
    let m1 = wd::zero_extend(b, &mant, mw2);
    let m2 = wd::shl_const(b, &m1, 1);
    let mm = wd::mux(b, odd, &m2, &m1);
    let sp = 2f64.powi(p as i32);
    let r2 = std::f64::consts::FRAC_1_SQRT_2;
    let (a1, b1) = (1.0 + (1.0 - r2), 1.0 - r2);
    let (a2, b2) = (r2 + (r2 - 0.5), (r2 - 0.5) / 2.0);
    let yw = p + 2;
    let ca1 = wd::constant(b, (a1 * sp).round() as u64, yw);
    let ca2 = wd::constant(b, (a2 * sp).round() as u64, yw);
    let cb1 = wd::constant(b, (b1 * sp).round() as u64, yw);
    let cb2 = wd::constant(b, (b2 * sp).round() as u64, yw);
    let ca = wd::mux(b, odd, &ca2, &ca1);
    let cb = wd::mux(b, odd, &cb2, &cb1);
    let pw = 2 * p + 6;
    let bm = wd::mul(b, &cb, &mm, pw);
    let bm = wd::shr_const(b, &bm, p)[..yw].to_vec();
    let mut y = wd::sub(b, &ca, &bm);
    let three = wd::constant(b, 3 << p, p + 4);
    for _ in 0..spec.approx.newton_iters {
        let y2 = wd::mul(b, &y, &y, pw);
        let y2 = wd::shr_const(b, &y2, p)[..p + 3].to_vec();
        let my2 = wd::mul(b, &mm, &y2, pw);
        let my2 = wd::shr_const(b, &my2, p)[..p + 4].to_vec();
        let corr = wd::sub(b, &three, &my2);
        let next = wd::mul(b, &y, &corr, pw);
        y = wd::shr_const(b, &next, p + 1)[..yw].to_vec();
    }
    // out_j = c_j * y >> (p + q - f), q = h >> 1
    let q: Word<B> = wd::shr_const(b, &h, 1);
    let off = wd::constant(b, (p - f) as u64, aw);
    let sh = wd::add(b, &q, &off);
    let ow = cw + yw + 1;
    let mut flag = b.constant(false);
    let mut out = Vec::with_capacity(d);
    for c in &cs {
        let prod = wd::mul_signed_unsigned(b, c, &y, ow);
        let r = wd::sar_var(b, &prod, &sh);
        let (o, s) = wd::saturate(b, &r, vb);
        flag = b.or(flag, s);
        out.push(o);
    }
    (out, flag)
}

/// Applies the function to reconstructed inputs (`row_len` words of
/// `in_bits`). Returns `spec.outputs()` words of `spec.out_bits()` and the
/// flag bit.
pub fn apply<B: BitBackend>(b: &mut B, spec: &SecureFnSpec, xs: &[Word<B>]) -> (Vec<Word<B>>, B::Bit) {
    assert_eq!(xs.len(), spec.row_len, "input count");
    match spec.kind {
        FnKind::Remask => {
            let f = b.constant(false);
            return (xs.to_vec(), f);
        }
        FnKind::Dot { rows, cols } => {
            let w = spec.in_bits as usize;
            let (rows, cols) = (rows as usize, cols as usize);
            let m = xs.len() / (rows + cols);
            let (us, ws) = xs.split_at(rows * m);
            let mut out = Vec::with_capacity(rows * cols);
            for u in us.chunks(m) {
                for v in ws.chunks(m) {
                    let terms: Vec<Word<B>> = u.iter().zip(v).map(|(x, y)| wd::mul(b, x, y, w)).collect();
                    out.push(sum_tree(b, &terms));
                }
            }
            let f = b.constant(false);
            return (out, f);
        }
        _ => {}
    }
    let mut flag = b.constant(false);
    let mut vs = Vec::with_capacity(xs.len());
    for x in xs {
        let (v, o) = pre_truncate(b, spec, x);
        flag = b.or(flag, o);
        vs.push(v);
    }
    let vb = spec.value_bits as usize;
    let f = spec.frac_bits as usize;
    let (out, extra) = match spec.kind {
        FnKind::Remask | FnKind::Dot { .. } => unreachable!(),
        FnKind::Truncate => {
            let z = b.constant(false);
            (vs, z)
        }
        FnKind::Relu => {
            let zero = wd::constant(b, 0, vb);
            let out = vs
                .iter()
                .map(|v| {
                    let s = wd::is_negative::<B>(v);
                    wd::mux(b, s, &zero, v)
                })
                .collect();
            let z = b.constant(false);
            (out, z)
        }
        FnKind::Gelu => {
            let lim = 4i64 << f;
            let w = vb + 1;
            let nodes = gelu_table(spec.frac_bits);
            let seg_log2 = (3 + f) - ceil_log2(GELU_SEGMENTS);
            let mut out = Vec::with_capacity(vs.len());
            for v in &vs {
                let x = wd::sign_extend::<B>(v, w);
                let lo = wd::constant_signed(b, -lim, w);
                let t = wd::sub(b, &x, &lo);
                let below = wd::is_negative::<B>(&t);
                let hi = wd::constant_signed(b, lim, w);
                let lt_hi = wd::lt_signed(b, &x, &hi);
                let y = pwl(b, &t, seg_log2, &nodes, w);
                let zero = wd::constant(b, 0, w);
                let y = wd::mux(b, lt_hi, &y, &x);
                let y = wd::mux(b, below, &zero, &y);
                out.push(y[..vb].to_vec());
            }
            let z = b.constant(false);
            (out, z)
        }
        FnKind::ExpApprox => {
            let mut bad = b.constant(false);
            let mut out = Vec::with_capacity(vs.len());
            for v in &vs {
                let (e, o) = exp_core(b, spec, v);
                bad = b.or(bad, o);
                let ee = wd::zero_extend(b, &e, vb);
                let scaled = wd::shr_const(b, &ee, 4);
                out.push(scaled);
            }
            (out, bad)
        }
        FnKind::MaxReduce => {
            let m = max_tree(b, &vs);
            let z = b.constant(false);
            (vec![m], z)
        }
        FnKind::SoftmaxRow => softmax_row(b, spec, &vs),
        FnKind::Reciprocal => {
            let mut bad = b.constant(false);
            let mut out = Vec::with_capacity(vs.len());
            for v in &vs {
                let (y, o) = reciprocal(b, spec, v);
                bad = b.or(bad, o);
                out.push(y);
            }
            (out, bad)
        }
        FnKind::LayernormRow => layernorm_row(b, spec, &vs),
    };
    (out, b.or(flag, extra))
}

/// Evaluates the function on plain signed values, the same way the
/// circuits do. Returns signed outputs and the flag.
pub fn apply_plain(spec: &SecureFnSpec, xs: &[u64]) -> (Vec<i64>, bool) {
    let mut b = super::PlainBits;
    let words: Vec<Vec<bool>> = xs.iter().map(|&x| super::to_bits(x, spec.in_bits as usize)).collect();
    let (out, flag) = apply(&mut b, spec, &words);
    (out.iter().map(|w| wd::value_signed(w)).collect(), flag)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring() -> RingParams {
        RingParams::default()
    }

    fn enc(x: f64) -> u64 {
        ring().from_signed((x * 256.0).round() as i64)
    }

    fn run(kind: FnKind, xs: &[f64]) -> (Vec<f64>, bool) {
        let spec = SecureFnSpec::new(kind, &ring(), 0, xs.len());
        let ins: Vec<u64> = xs.iter().map(|&x| enc(x)).collect();
        if kind.is_row() {
            let (o, f) = apply_plain(&spec, &ins);
            (o.iter().map(|&v| v as f64 / 256.0).collect(), f)
        } else {
            let mut flag = false;
            let mut out = Vec::new();
            for &x in &ins {
                let (o, f) = apply_plain(&spec, &[x]);
                flag |= f;
                out.push(o[0] as f64 / 256.0);
            }
            (out, flag)
        }
    }

    fn softmax(xs: &[f64]) -> Vec<f64> {
        let m = xs.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    #[test]
    fn relu_exact() {
        let (o, f) = run(FnKind::Relu, &[-2.0, 0.0, 1.5, -0.00390625, 63.0]);
        assert_eq!(o, vec![0.0, 0.0, 1.5, 0.0, 63.0]);
        assert!(!f);
    }

    #[test]
    fn truncate_matches_ring_truncation() {
        let r = ring();
        let spec = SecureFnSpec::new(FnKind::Truncate, &r, 8, 1);
        for v in [147456i64, -147456, 0, 1 << 30, -(1 << 30), 255, -1, (1 << 22) - 1] {
            let x = r.from_signed(v);
            let (o, flag) = apply_plain(&spec, &[x]);
            let (t, sat) = r.truncate_word(x, 8);
            assert_eq!(o[0], r.to_signed(t));
            assert_eq!(flag, sat);
        }
    }

    #[test]
    fn softmax_examples() {
        let (o, f) = run(FnKind::SoftmaxRow, &[0.0, 0.0]);
        assert!(!f);
        for v in o {
            assert!((v - 0.5).abs() <= 2f64.powi(-6));
        }
        let (o, _) = run(FnKind::SoftmaxRow, &[1.0, 2.0, 3.0]);
        for (g, w) in o.iter().zip([0.0900, 0.2447, 0.6652]) {
            assert!((g - w).abs() <= 2f64.powi(-5), "{g} vs {w}");
        }
        let (o, _) = run(FnKind::SoftmaxRow, &[5.0]);
        assert_eq!(o, vec![1.0]);
    }

    #[test]
    fn softmax_error_sweep() {
        let mut worst: f64 = 0.0;
        for k in 0..200 {
            let xs: Vec<f64> = (0..6).map(|i| (((k * 7 + i * 13) % 64) as f64 / 4.0) - 8.0).collect();
            let (o, _) = run(FnKind::SoftmaxRow, &xs);
            for (g, w) in o.iter().zip(softmax(&xs)) {
                worst = worst.max((g - w).abs());
            }
            let total: f64 = o.iter().sum();
            assert!((total - 1.0).abs() <= 2f64.powi(-5) * 6.0);
        }
        assert!(worst <= 2f64.powi(-5), "worst {worst}");
    }

    #[test]
    fn exp_domain() {
        let (o, f) = run(FnKind::ExpApprox, &[0.0, -1.0, -4.0, -20.0]);
        assert!(!f);
        assert_eq!(o[0], 1.0);
        assert!((o[1] - (-1f64).exp()).abs() <= 2f64.powi(-7));
        assert!((o[2] - (-4f64).exp()).abs() <= 2f64.powi(-7));
        assert_eq!(o[3], 0.0);
        let (_, f) = run(FnKind::ExpApprox, &[0.5]);
        assert!(f);
    }

    #[test]
    fn dot_wraps_in_ring() {
        let r = ring();
        let spec = SecureFnSpec::new(FnKind::Dot { rows: 1, cols: 1 }, &r, 0, 4);
        let xs = [u64::MAX, 3, 1 << 40, 7];
        let (o, f) = apply_plain(&spec, &xs);
        let want = u64::MAX.wrapping_mul(1 << 40).wrapping_add(21);
        assert_eq!(o[0] as u64, want);
        assert!(!f);
        // [[1, 2], [3, 4]] times the transpose of [[5, 6], [7, 8], [-1, 0]]
        let spec = SecureFnSpec::new(FnKind::Dot { rows: 2, cols: 3 }, &r, 0, 10);
        let xs: Vec<u64> = [1i64, 2, 3, 4, 5, 6, 7, 8, -1, 0].iter().map(|&v| v as u64).collect();
        let (o, _) = apply_plain(&spec, &xs);
        assert_eq!(o, vec![17, 23, -1, 39, 53, -3]);
    }

    #[test]
    fn max_reduce() {
        let (o, _) = run(FnKind::MaxReduce, &[-3.0, 7.5, 2.0, -60.0, 7.25]);
        assert_eq!(o, vec![7.5]);
    }

    #[test]
    fn reciprocal_accuracy() {
        let mut x = 0.5;
        while x <= 64.0 {
            let (o, f) = run(FnKind::Reciprocal, &[x]);
            assert!(!f, "flag at {x}");
            assert!((o[0] - 1.0 / x).abs() <= 2f64.powi(-6), "{x}: {}", o[0]);
            x += 0.37;
        }
        let (_, f) = run(FnKind::Reciprocal, &[-1.0]);
        assert!(f);
        let (_, f) = run(FnKind::Reciprocal, &[0.0]);
        assert!(f);
    }

    #[test]
    fn gelu_accuracy() {
        for i in -60..60 {
            let x = i as f64 / 8.0;
            let (o, _) = run(FnKind::Gelu, &[x]);
            assert!((o[0] - gelu_real(x)).abs() <= 2f64.powi(-5), "{x}: {}", o[0]);
        }
    }

    #[test]
    fn layernorm_accuracy() {
        let rows = [
            vec![1.0, -2.0, 3.5, 0.25, -1.75, 2.0, 0.0, -3.0],
            vec![10.0, 10.5, 9.5, 10.0],
            vec![0.5, 0.5, 0.5, 0.5],
            vec![
                -40.0, 20.0, 35.0, -12.0, 1.0, 0.0, 3.0, 7.0, -9.0, 30.0, -22.0, 5.0, 0.0, 0.0, 1.0, -17.0,
            ],
        ];
        for xs in rows {
            let (o, f) = run(FnKind::LayernormRow, &xs);
            assert!(!f);
            let n = xs.len() as f64;
            let mu = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
            for (g, x) in o.iter().zip(&xs) {
                let want = (x - mu) / (var + 2f64.powi(-8)).sqrt();
                assert!((g - want).abs() <= 2f64.powi(-5), "{g} vs {want}");
            }
        }
    }
}
