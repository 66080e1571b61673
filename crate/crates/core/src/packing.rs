//! Slot layouts for packing matrices into ciphertexts, and diagonal-style
//! kernels that multiply packed matrices by plaintext matrices.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::he::{Ciphertext, Evaluator, PublicKey, SecretKey};
use crate::ring::FixedTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Token-major: all features of token `t` are contiguous.
    FeaturesFirst,
    /// Feature-major: the `n` token values of each feature are contiguous.
    TokensFirst,
}

/// How a kernel realizes the per-ciphertext reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    /// Rotate every input ciphertext by every offset its layout can need.
    /// This is the accounting baseline.
    Naive,
    /// Rotate-and-add with halving strides where the layout allows it,
    /// otherwise only the offsets that actually carry nonzero terms.
    #[default]
    LogStep,
}

/// Placement of an `n x d` matrix into ciphertexts of `slots` lanes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackingLayout {
    pub strategy: Strategy,
    pub n: usize,
    pub d: usize,
    pub slots: usize,
    pub c: usize,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl PackingLayout {
    pub fn new(strategy: Strategy, n: usize, d: usize, slots: usize) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Layout(format!("empty matrix {n}x{d}")));
        }
        if slots == 0 || !slots.is_power_of_two() {
            return Err(Error::Layout(format!("slots {slots} is not a power of two")));
        }
        if n > slots {
            return Err(Error::Layout(format!("n={n} exceeds {slots} slots")));
        }
        Ok(Self {
            strategy,
            n,
            d,
            slots,
            c: (n * d).div_ceil(slots),
        })
    }

    fn linear(&self, t: usize, j: usize) -> usize {
        match self.strategy {
            Strategy::FeaturesFirst => t * self.d + j,
            Strategy::TokensFirst => j * self.n + t,
        }
    }

    /// `(ciphertext, slot)` holding element `(t, j)`.
    pub fn position(&self, t: usize, j: usize) -> (usize, usize) {
        let g = self.linear(t, j);
        (g / self.slots, g % self.slots)
    }

    /// Inverse of [`position`](Self::position); `None` for padding slots.
    pub fn element(&self, ct: usize, slot: usize) -> Option<(usize, usize)> {
        let g = ct * self.slots + slot;
        if slot >= self.slots || g >= self.n * self.d {
            return None;
        }
        Some(match self.strategy {
            Strategy::FeaturesFirst => (g / self.d, g % self.d),
            Strategy::TokensFirst => (g % self.n, g / self.n),
        })
    }

    /// Features held by one ciphertext under tokens-first packing.
    pub fn features_per_ciphertext(&self) -> usize {
        match self.strategy {
            Strategy::FeaturesFirst => (self.slots / self.d).max(1),
            Strategy::TokensFirst => self.slots / self.n,
        }
    }

    /// Rotation offsets a naive kernel visits for each input ciphertext.
    pub fn naive_rotations_per_ciphertext(&self) -> usize {
        match self.strategy {
            Strategy::FeaturesFirst => self.slots,
            Strategy::TokensFirst => self.slots / gcd(self.slots, self.n),
        }
    }

    /// Rotations the naive kernel performs on this (input) layout.
    pub fn naive_rotations(&self) -> u64 {
        (self.c * self.naive_rotations_per_ciphertext()) as u64
    }

    pub fn with_d(&self, d: usize) -> Result<Self> {
        Self::new(self.strategy, self.n, d, self.slots)
    }
}

/// Layout choice with its predicted cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutPlan {
    pub layout: PackingLayout,
    pub ciphertexts: usize,
    pub predicted_rotations: u64,
    pub features_first_rotations: u64,
}

/// Picks tokens-first whenever its naive rotation count is strictly lower.
pub fn plan_layout(n: usize, d: usize, slots: usize) -> Result<LayoutPlan> {
    let ff = PackingLayout::new(Strategy::FeaturesFirst, n, d, slots)?;
    let tf = PackingLayout::new(Strategy::TokensFirst, n, d, slots)?;
    let layout = if tf.naive_rotations() < ff.naive_rotations() {
        tf
    } else {
        ff
    };
    Ok(LayoutPlan {
        layout,
        ciphertexts: layout.c,
        predicted_rotations: layout.naive_rotations(),
        features_first_rotations: ff.naive_rotations(),
    })
}

fn check_shape(x: &FixedTensor, layout: &PackingLayout) -> Result<()> {
    if x.shape() != (layout.n, layout.d) {
        return Err(Error::Shape(format!(
            "tensor {:?} does not match layout {}x{}",
            x.shape(),
            layout.n,
            layout.d
        )));
    }
    Ok(())
}

/// Slot vectors for `x` without encrypting.
pub fn pack_plain(x: &FixedTensor, layout: &PackingLayout) -> Result<Vec<Vec<u64>>> {
    check_shape(x, layout)?;
    let mut out = vec![vec![0u64; layout.slots]; layout.c];
    for t in 0..layout.n {
        for j in 0..layout.d {
            let (ct, s) = layout.position(t, j);
            out[ct][s] = x.get(t, j);
        }
    }
    Ok(out)
}

pub fn unpack_plain(vs: &[Vec<u64>], layout: &PackingLayout) -> Result<FixedTensor> {
    if vs.len() != layout.c || vs.iter().any(|v| v.len() != layout.slots) {
        return Err(Error::Layout(format!(
            "{} slot vectors for a layout of {} ciphertexts",
            vs.len(),
            layout.c
        )));
    }
    let mut x = FixedTensor::zeros(layout.n, layout.d);
    for t in 0..layout.n {
        for j in 0..layout.d {
            let (ct, s) = layout.position(t, j);
            x.set(t, j, vs[ct][s]);
        }
    }
    Ok(x)
}

pub fn pack(ev: &Evaluator, x: &FixedTensor, layout: &PackingLayout, pk: &PublicKey) -> Result<Vec<Ciphertext>> {
    check_layout_slots(ev, layout)?;
    pack_plain(x, layout)?.iter().map(|v| ev.encrypt(v, pk)).collect()
}

pub fn unpack(ev: &Evaluator, cts: &[Ciphertext], layout: &PackingLayout, sk: &SecretKey) -> Result<FixedTensor> {
    let vs = cts.iter().map(|c| ev.decrypt(c, sk)).collect::<Result<Vec<_>>>()?;
    unpack_plain(&vs, layout)
}

fn check_layout_slots(ev: &Evaluator, layout: &PackingLayout) -> Result<()> {
    if layout.slots != ev.slots() {
        return Err(Error::Layout(format!(
            "layout has {} slots, evaluator {}",
            layout.slots,
            ev.slots()
        )));
    }
    Ok(())
}

/// Sparse plaintext diagonals keyed by `(input ct, rotation, output ct)`.
type Diagonals = BTreeMap<(usize, usize, usize), Vec<(usize, u64)>>;

fn collect_diagonals(
    in_layout: &PackingLayout,
    out_layout: &PackingLayout,
    mut visit: impl FnMut(&mut dyn FnMut(usize, usize, usize, usize, u64)),
) -> Diagonals {
    let m = in_layout.slots;
    let mut diags: Diagonals = BTreeMap::new();
    visit(&mut |ot, ok, it, ij, coeff| {
        if coeff == 0 {
            return;
        }
        let (oc, os) = out_layout.position(ot, ok);
        let (ic, is) = in_layout.position(it, ij);
        let r = (is + m - os) % m;
        diags.entry((ic, r, oc)).or_default().push((os, coeff));
    });
    diags
}

fn dense(entries: &[(usize, u64)], m: usize) -> Vec<u64> {
    let mut v = vec![0u64; m];
    for &(s, c) in entries {
        v[s] = v[s].wrapping_add(c);
    }
    v
}

fn finish(ev: &Evaluator, template: &Ciphertext, terms: Vec<Vec<Ciphertext>>) -> Result<Vec<Ciphertext>> {
    terms
        .into_iter()
        .map(|t| match ev.sum(t)? {
            Some(c) => Ok(c),
            None => ev.mul_plain(template, &[]),
        })
        .collect()
}

fn apply_diagonals(
    ev: &Evaluator,
    cts: &[Ciphertext],
    in_layout: &PackingLayout,
    out_layout: &PackingLayout,
    diags: &Diagonals,
    mode: KernelMode,
    naive_step: usize,
) -> Result<Vec<Ciphertext>> {
    let m = in_layout.slots;
    let mut terms: Vec<Vec<Ciphertext>> = vec![Vec::new(); out_layout.c];
    let mut by_rot: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for &(ic, r, oc) in diags.keys() {
        by_rot.entry((ic, r)).or_default().push(oc);
    }
    if mode == KernelMode::Naive {
        if let Some(&(_, r)) = by_rot.keys().find(|&&(_, r)| r % naive_step != 0) {
            return Err(Error::Layout(format!(
                "offset {r} not reachable with step {naive_step}"
            )));
        }
    }
    for (ic, ct) in cts.iter().enumerate() {
        let offsets: Vec<usize> = match mode {
            KernelMode::Naive => (0..m).step_by(naive_step).collect(),
            KernelMode::LogStep => by_rot.range((ic, 0)..(ic + 1, 0)).map(|(&(_, r), _)| r).collect(),
        };
        for r in offsets {
            let rotated = ev.rotate(ct, r)?;
            if let Some(outs) = by_rot.get(&(ic, r)) {
                for &oc in outs {
                    let p = dense(&diags[&(ic, r, oc)], m);
                    terms[oc].push(ev.mul_plain(&rotated, &p)?);
                }
            }
        }
    }
    finish(ev, &cts[0], terms)
}

fn check_cts(ev: &Evaluator, cts: &[Ciphertext], layout: &PackingLayout) -> Result<()> {
    check_layout_slots(ev, layout)?;
    if cts.len() != layout.c {
        return Err(Error::Layout(format!(
            "{} ciphertexts for a layout of {}",
            cts.len(),
            layout.c
        )));
    }
    Ok(())
}

/// `Enc(X) * W` for packed `X` (`n x d1`) and plaintext `W` (`d1 x d2`).
/// The result uses the same strategy with `d = d2`.
pub fn he_matmul(
    ev: &Evaluator,
    cts: &[Ciphertext],
    layout: &PackingLayout,
    w: &FixedTensor,
    mode: KernelMode,
) -> Result<(Vec<Ciphertext>, PackingLayout)> {
    check_cts(ev, cts, layout)?;
    if w.rows() != layout.d {
        return Err(Error::Shape(format!(
            "packed {}x{} times {}x{}",
            layout.n,
            layout.d,
            w.rows(),
            w.cols()
        )));
    }
    let out = layout.with_d(w.cols())?;
    let logstep_ok = mode == KernelMode::LogStep
        && layout.strategy == Strategy::TokensFirst
        && layout.slots.is_multiple_of(layout.n);
    if logstep_ok {
        return Ok((logstep_matmul(ev, cts, layout, &out, w)?, out));
    }
    let diags = collect_diagonals(layout, &out, |emit| {
        for t in 0..layout.n {
            for k in 0..w.cols() {
                for j in 0..layout.d {
                    emit(t, k, t, j, w.get(j, k));
                }
            }
        }
    });
    let step = layout.slots / layout.naive_rotations_per_ciphertext();
    Ok((apply_diagonals(ev, cts, layout, &out, &diags, mode, step)?, out))
}

/// `A * Enc(B)` for plaintext `A` (`a x n`) and packed `B` (`n x d`).
/// The result uses the same strategy with shape `a x d`.
pub fn he_left_matmul(
    ev: &Evaluator,
    a: &FixedTensor,
    cts: &[Ciphertext],
    layout: &PackingLayout,
    mode: KernelMode,
) -> Result<(Vec<Ciphertext>, PackingLayout)> {
    check_cts(ev, cts, layout)?;
    if a.cols() != layout.n {
        return Err(Error::Shape(format!(
            "{}x{} times packed {}x{}",
            a.rows(),
            a.cols(),
            layout.n,
            layout.d
        )));
    }
    let out = PackingLayout::new(layout.strategy, a.rows(), layout.d, layout.slots)?;
    let diags = collect_diagonals(layout, &out, |emit| {
        for t in 0..a.rows() {
            for k in 0..layout.d {
                for j in 0..layout.n {
                    emit(t, k, j, k, a.get(t, j));
                }
            }
        }
    });
    Ok((apply_diagonals(ev, cts, layout, &out, &diags, mode, 1)?, out))
}

fn logstep_matmul(
    ev: &Evaluator,
    cts: &[Ciphertext],
    layout: &PackingLayout,
    out: &PackingLayout,
    w: &FixedTensor,
) -> Result<Vec<Ciphertext>> {
    let (m, n) = (layout.slots, layout.n);
    let mut terms: Vec<Vec<Ciphertext>> = vec![Vec::new(); out.c];
    for k in 0..out.d {
        let mut masked = Vec::new();
        for (ic, ct) in cts.iter().enumerate() {
            let mut mask = vec![0u64; m];
            let mut any = false;
            for (s, slot) in mask.iter_mut().enumerate() {
                if let Some((_, j)) = layout.element(ic, s) {
                    *slot = w.get(j, k);
                    any |= *slot != 0;
                }
            }
            if any {
                masked.push(ev.mul_plain(ct, &mask)?);
            }
        }
        let Some(mut acc) = ev.sum(masked)? else {
            continue;
        };
        let mut stride = m / 2;
        while stride >= n {
            let r = ev.rotate(&acc, stride)?;
            acc = ev.add(&acc, &r)?;
            stride /= 2;
        }
        let (oc, base) = out.position(0, k);
        let mut block = vec![0u64; m];
        block[base..base + n].fill(1);
        // after the reduction every slot s holds the sum for token s mod n,
        // and block starts are multiples of n
        terms[oc].push(ev.mul_plain(&acc, &block)?);
    }
    finish(ev, &cts[0], terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::he::{keygen, HeParams};
    use crate::packing::Strategy;
    use crate::ring::RingParams;
    use proptest::prelude::{prop_assert_eq, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn setup(m: usize) -> (Evaluator, crate::he::KeyPair) {
        let p = HeParams::new(m, RingParams::default()).unwrap();
        let kp = keygen(&p, &mut ChaCha20Rng::seed_from_u64(5));
        (Evaluator::new(p).unwrap(), kp)
    }

    #[test]
    fn tokens_first_slot_order() {
        let ring = RingParams::default();
        let x = FixedTensor::from_signed(&ring, 2, 2, &[1, 2, 3, 4]).unwrap();
        let l = PackingLayout::new(Strategy::TokensFirst, 2, 2, 4).unwrap();
        assert_eq!(l.c, 1);
        // x[t][j]: x00=1, x01=2, x10=3, x11=4; feature 0 of both tokens first
        assert_eq!(pack_plain(&x, &l).unwrap(), vec![vec![1, 3, 2, 4]]);
    }

    #[test]
    fn single_token_layouts_coincide() {
        for d in 1..10 {
            let ff = PackingLayout::new(Strategy::FeaturesFirst, 1, d, 4).unwrap();
            let tf = PackingLayout::new(Strategy::TokensFirst, 1, d, 4).unwrap();
            for j in 0..d {
                assert_eq!(ff.position(0, j), tf.position(0, j));
            }
        }
    }

    #[test]
    fn ciphertext_counts() {
        for s in [Strategy::FeaturesFirst, Strategy::TokensFirst] {
            assert_eq!(PackingLayout::new(s, 4, 4, 8).unwrap().c, 2);
        }
        assert!(PackingLayout::new(Strategy::TokensFirst, 9, 1, 8).is_err());
    }

    #[test]
    fn plan_examples() {
        let p = plan_layout(30, 30522, 4096).unwrap();
        assert_eq!(p.layout.strategy, Strategy::TokensFirst);
        assert_eq!(p.ciphertexts, 224);
        let p = plan_layout(4096, 3, 4096).unwrap();
        assert_eq!(p.layout.strategy, Strategy::TokensFirst);
        assert_eq!(p.layout.features_per_ciphertext(), 1);
        assert_eq!(plan_layout(5, 1, 4096).unwrap().ciphertexts, 1);
        assert_eq!(plan_layout(1, 7, 16).unwrap().layout.strategy, Strategy::FeaturesFirst);
        assert!(plan_layout(17, 1, 16).is_err());
    }

    #[test]
    fn layout_is_a_bijection() {
        for s in [Strategy::FeaturesFirst, Strategy::TokensFirst] {
            for (n, d, m) in [(3, 5, 8), (4, 4, 16), (7, 9, 32), (1, 20, 4)] {
                let l = PackingLayout::new(s, n, d, m).unwrap();
                let mut seen = std::collections::HashSet::new();
                for t in 0..n {
                    for j in 0..d {
                        let p = l.position(t, j);
                        assert!(p.0 < l.c && p.1 < m);
                        assert!(seen.insert(p));
                        assert_eq!(l.element(p.0, p.1), Some((t, j)));
                    }
                }
                let used = (0..l.c)
                    .flat_map(|c| (0..m).map(move |s| (c, s)))
                    .filter(|&(c, s)| l.element(c, s).is_some())
                    .count();
                assert_eq!(used, n * d);
            }
        }
    }

    #[test]
    fn rotation_ratio_equals_n() {
        let (ev, kp) = setup(16);
        let ring = RingParams::default();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = FixedTensor::random(&ring, 8, 8, &mut rng);
        let w = FixedTensor::random(&ring, 8, 2, &mut rng);
        let mut rots = Vec::new();
        for s in [Strategy::FeaturesFirst, Strategy::TokensFirst] {
            let l = PackingLayout::new(s, 8, 8, 16).unwrap();
            let cts = pack(&ev, &x, &l, &kp.public).unwrap();
            let before = ev.total_counts().rotate;
            let (out, ol) = he_matmul(&ev, &cts, &l, &w, KernelMode::Naive).unwrap();
            rots.push(ev.total_counts().rotate - before);
            assert_eq!(unpack(&ev, &out, &ol, &kp.secret).unwrap(), x.mat_mul(&w).unwrap());
        }
        assert_eq!(rots[0], 4 * 16);
        assert_eq!(rots[0], rots[1] * 8);
    }

    #[test]
    fn logstep_rotation_count() {
        let (ev, kp) = setup(64);
        let ring = RingParams::default();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x = FixedTensor::random(&ring, 8, 20, &mut rng);
        let w = FixedTensor::random(&ring, 20, 3, &mut rng);
        let l = PackingLayout::new(Strategy::TokensFirst, 8, 20, 64).unwrap();
        let cts = pack(&ev, &x, &l, &kp.public).unwrap();
        let before = ev.total_counts().rotate;
        let (out, ol) = he_matmul(&ev, &cts, &l, &w, KernelMode::LogStep).unwrap();
        assert_eq!(ev.total_counts().rotate - before, 3 * 3);
        assert_eq!(unpack(&ev, &out, &ol, &kp.secret).unwrap(), x.mat_mul(&w).unwrap());
    }

    #[test]
    fn shape_errors() {
        let (ev, kp) = setup(16);
        let ring = RingParams::default();
        let x = FixedTensor::zeros(2, 3);
        let l = PackingLayout::new(Strategy::FeaturesFirst, 3, 2, 16).unwrap();
        assert!(pack(&ev, &x, &l, &kp.public).is_err());
        let l = PackingLayout::new(Strategy::FeaturesFirst, 2, 3, 16).unwrap();
        let cts = pack(&ev, &x, &l, &kp.public).unwrap();
        let w = FixedTensor::identity(&ring, 2, 1);
        assert!(he_matmul(&ev, &cts, &l, &w, KernelMode::Naive).is_err());
        let wrong = PackingLayout::new(Strategy::FeaturesFirst, 2, 3, 8).unwrap();
        assert!(he_matmul(&ev, &cts, &wrong, &w, KernelMode::Naive).is_err());
    }

    #[test]
    fn kernels_match_plaintext_on_random_instances() {
        let (ev, kp) = setup(16);
        let ring = RingParams::default();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for trial in 0..100 {
            let n = rng.gen_range(1..=8);
            let d1 = rng.gen_range(1..=6);
            let d2 = rng.gen_range(1..=5);
            let s = if trial % 2 == 0 {
                Strategy::FeaturesFirst
            } else {
                Strategy::TokensFirst
            };
            let mode = if trial % 4 < 2 {
                KernelMode::Naive
            } else {
                KernelMode::LogStep
            };
            let x = FixedTensor::random(&ring, n, d1, &mut rng);
            let w = FixedTensor::random(&ring, d1, d2, &mut rng);
            let l = PackingLayout::new(s, n, d1, 16).unwrap();
            let cts = pack(&ev, &x, &l, &kp.public).unwrap();
            let (out, ol) = he_matmul(&ev, &cts, &l, &w, mode).unwrap();
            assert_eq!(unpack(&ev, &out, &ol, &kp.secret).unwrap(), x.mat_mul(&w).unwrap());
            let a = FixedTensor::random(&ring, d2, n, &mut rng);
            let (out, ol) = he_left_matmul(&ev, &a, &cts, &l, mode).unwrap();
            assert_eq!(unpack(&ev, &out, &ol, &kp.secret).unwrap(), a.mat_mul(&x).unwrap());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn pack_unpack_round_trip(n in 1usize..9, d in 1usize..9, tf: bool, seed: u64) {
            let ring = RingParams::default();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let x = FixedTensor::random(&ring, n, d, &mut rng);
            let s = if tf { Strategy::TokensFirst } else { Strategy::FeaturesFirst };
            let l = PackingLayout::new(s, n, d, 8).unwrap();
            let vs = pack_plain(&x, &l).unwrap();
            prop_assert_eq!(vs.len(), l.c);
            prop_assert_eq!(unpack_plain(&vs, &l).unwrap(), x);
        }
    }
}
