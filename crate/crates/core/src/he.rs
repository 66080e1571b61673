//! Additive homomorphic encryption over SIMD slots.
//!
//! This is a semantic backend: a ciphertext carries the slot vector hidden
//! under a one-time pad that only the secret key holder can strip. It is
//! functionally exact and counts every operation, but it is not a lattice
//! scheme. Only additions, plaintext multiplications and rotations exist;
//! there is no ciphertext-by-ciphertext product.

use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ring::RingParams;

/// Protocol phase an operation or message belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Offline,
    Online,
}

impl Phase {
    pub fn index(self) -> usize {
        match self {
            Phase::Offline => 0,
            Phase::Online => 1,
        }
    }
}

/// Linear noise meter: every ciphertext carries the budget it has consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub budget: u64,
    pub add: u64,
    pub mul_plain: u64,
    pub rotate: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            budget: 160,
            add: 1,
            mul_plain: 4,
            rotate: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeParams {
    pub slots: usize,
    pub ring: RingParams,
    /// Modeled size of one ciphertext on the wire.
    pub ciphertext_bytes: u64,
    pub noise: Option<NoiseModel>,
}

impl Default for HeParams {
    fn default() -> Self {
        Self {
            slots: 4096,
            ring: RingParams::default(),
            ciphertext_bytes: 1 << 18,
            noise: Some(NoiseModel::default()),
        }
    }
}

impl HeParams {
    pub fn new(slots: usize, ring: RingParams) -> Result<Self> {
        let p = Self {
            slots,
            ring,
            ..Self::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.slots == 0 || !self.slots.is_power_of_two() {
            return Err(Error::HeParams(format!("slots {} is not a power of two", self.slots)));
        }
        if self.ciphertext_bytes == 0 {
            return Err(Error::HeParams("ciphertext_bytes must be positive".into()));
        }
        if let Some(n) = self.noise {
            if n.budget == 0 || n.add == 0 || n.mul_plain == 0 || n.rotate == 0 {
                return Err(Error::HeParams("noise model fields must be positive".into()));
            }
        }
        Ok(())
    }
}

static NEXT_KEY_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
pub struct PublicKey {
    key_id: u64,
    seed: [u8; 32],
    nonce: Arc<AtomicU64>,
}

#[derive(Debug, Clone)]
pub struct SecretKey {
    key_id: u64,
}

#[derive(Debug, Clone)]
pub struct KeyPair {
    pub public: PublicKey,
    pub secret: SecretKey,
}

impl KeyPair {
    pub fn key_id(&self) -> u64 {
        self.public.key_id
    }
}

impl PublicKey {
    pub fn key_id(&self) -> u64 {
        self.key_id
    }
}

impl SecretKey {
    pub fn key_id(&self) -> u64 {
        self.key_id
    }
}

/// Fresh key pair with a process-unique id.
pub fn keygen<R: Rng + ?Sized>(_params: &HeParams, rng: &mut R) -> KeyPair {
    let key_id = NEXT_KEY_ID.fetch_add(1, Ordering::Relaxed);
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    KeyPair {
        public: PublicKey {
            key_id,
            seed,
            nonce: Arc::new(AtomicU64::new(0)),
        },
        secret: SecretKey { key_id },
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext {
    key_id: u64,
    body: Vec<u64>,
    pad: Vec<u64>,
    noise: u64,
    phase: Phase,
}

impl Ciphertext {
    pub fn key_id(&self) -> u64 {
        self.key_id
    }

    pub fn slots(&self) -> usize {
        self.body.len()
    }

    pub fn noise(&self) -> u64 {
        self.noise
    }

    /// Phase in which the ciphertext was produced.
    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// The masked payload, which is all a party without the key may look at.
    pub fn payload(&self) -> &[u64] {
        &self.body
    }

    pub(crate) fn to_parts(&self) -> (u64, u64, &[u64], &[u64]) {
        (self.key_id, self.noise, &self.body, &self.pad)
    }

    pub(crate) fn from_parts(key_id: u64, noise: u64, body: Vec<u64>, pad: Vec<u64>) -> Self {
        Self {
            key_id,
            body,
            pad,
            noise,
            phase: Phase::Offline,
        }
    }
}

/// Snapshot of operation counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub enc: u64,
    pub dec: u64,
    pub add: u64,
    pub add_plain: u64,
    pub mul_plain: u64,
    pub rotate: u64,
    /// Never incremented: the interface has no such operation.
    pub mul_ct_ct: u64,
}

impl OpCounts {
    pub fn total(&self) -> u64 {
        self.enc + self.dec + self.add + self.add_plain + self.mul_plain + self.rotate + self.mul_ct_ct
    }

    pub fn saturating_sub(&self, o: &Self) -> Self {
        Self {
            enc: self.enc - o.enc,
            dec: self.dec - o.dec,
            add: self.add - o.add,
            add_plain: self.add_plain - o.add_plain,
            mul_plain: self.mul_plain - o.mul_plain,
            rotate: self.rotate - o.rotate,
            mul_ct_ct: self.mul_ct_ct - o.mul_ct_ct,
        }
    }
}

impl std::ops::AddAssign for OpCounts {
    fn add_assign(&mut self, o: Self) {
        self.enc += o.enc;
        self.dec += o.dec;
        self.add += o.add;
        self.add_plain += o.add_plain;
        self.mul_plain += o.mul_plain;
        self.rotate += o.rotate;
        self.mul_ct_ct += o.mul_ct_ct;
    }
}

impl std::ops::Add for OpCounts {
    type Output = Self;
    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

#[derive(Debug, Default)]
struct Counters {
    enc: AtomicU64,
    dec: AtomicU64,
    add: AtomicU64,
    add_plain: AtomicU64,
    mul_plain: AtomicU64,
    rotate: AtomicU64,
    mul_ct_ct: AtomicU64,
}

impl Counters {
    fn snapshot(&self) -> OpCounts {
        OpCounts {
            enc: self.enc.load(Ordering::Relaxed),
            dec: self.dec.load(Ordering::Relaxed),
            add: self.add.load(Ordering::Relaxed),
            add_plain: self.add_plain.load(Ordering::Relaxed),
            mul_plain: self.mul_plain.load(Ordering::Relaxed),
            rotate: self.rotate.load(Ordering::Relaxed),
            mul_ct_ct: self.mul_ct_ct.load(Ordering::Relaxed),
        }
    }
}

/// Executes HE operations and counts them per phase.
#[derive(Debug)]
pub struct Evaluator {
    params: HeParams,
    counters: [Counters; 2],
    phase: AtomicU8,
    noise_high: AtomicU64,
}

impl Evaluator {
    pub fn new(params: HeParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            counters: Default::default(),
            phase: AtomicU8::new(Phase::Offline.index() as u8),
            noise_high: AtomicU64::new(0),
        })
    }

    pub fn params(&self) -> &HeParams {
        &self.params
    }

    pub fn slots(&self) -> usize {
        self.params.slots
    }

    pub fn set_phase(&self, phase: Phase) {
        self.phase.store(phase.index() as u8, Ordering::Relaxed);
    }

    pub fn phase(&self) -> Phase {
        if self.phase.load(Ordering::Relaxed) == 0 {
            Phase::Offline
        } else {
            Phase::Online
        }
    }

    pub fn counts(&self, phase: Phase) -> OpCounts {
        self.counters[phase.index()].snapshot()
    }

    pub fn total_counts(&self) -> OpCounts {
        self.counts(Phase::Offline) + self.counts(Phase::Online)
    }

    /// Largest noise consumption seen on any ciphertext so far.
    pub fn noise_high_water(&self) -> u64 {
        self.noise_high.load(Ordering::Relaxed)
    }

    fn bump(&self, f: impl Fn(&Counters) -> &AtomicU64) {
        f(&self.counters[self.phase().index()]).fetch_add(1, Ordering::Relaxed);
    }

    fn charge(&self, noise: u64) -> Result<u64> {
        if let Some(m) = self.params.noise {
            if noise > m.budget {
                return Err(Error::NoiseBudget {
                    used: noise,
                    budget: m.budget,
                });
            }
        }
        self.noise_high.fetch_max(noise, Ordering::Relaxed);
        Ok(noise)
    }

    fn cost(&self, f: impl Fn(&NoiseModel) -> u64) -> u64 {
        self.params.noise.as_ref().map_or(0, f)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.params.slots {
            return Err(Error::Shape(format!(
                "slot vector of length {len}, expected {}",
                self.params.slots
            )));
        }
        Ok(())
    }

    /// Encrypts `v`, zero-padded to the slot count.
    pub fn encrypt(&self, v: &[u64], pk: &PublicKey) -> Result<Ciphertext> {
        let m = self.params.slots;
        if v.len() > m {
            return Err(Error::Oversize { len: v.len(), slots: m });
        }
        let ring = &self.params.ring;
        let mut rng = ChaCha20Rng::from_seed(pk.seed);
        rng.set_stream(pk.nonce.fetch_add(1, Ordering::Relaxed));
        let pad: Vec<u64> = (0..m).map(|_| ring.reduce(rng.next_u64())).collect();
        let body = (0..m)
            .map(|i| ring.reduce(v.get(i).copied().unwrap_or(0).wrapping_add(pad[i])))
            .collect();
        self.bump(|c| &c.enc);
        Ok(Ciphertext {
            key_id: pk.key_id,
            body,
            pad,
            noise: 0,
            phase: self.phase(),
        })
    }

    pub fn decrypt(&self, c: &Ciphertext, sk: &SecretKey) -> Result<Vec<u64>> {
        if c.key_id != sk.key_id {
            return Err(Error::KeyMismatch {
                expected: sk.key_id,
                found: c.key_id,
            });
        }
        self.check_len(c.body.len())?;
        self.bump(|c| &c.dec);
        let ring = &self.params.ring;
        Ok(c.body
            .iter()
            .zip(&c.pad)
            .map(|(&b, &p)| ring.reduce(b.wrapping_sub(p)))
            .collect())
    }

    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        if a.key_id != b.key_id {
            return Err(Error::KeyMismatch {
                expected: a.key_id,
                found: b.key_id,
            });
        }
        self.check_len(a.body.len())?;
        self.check_len(b.body.len())?;
        let noise = self.charge(a.noise.max(b.noise) + self.cost(|m| m.add))?;
        self.bump(|c| &c.add);
        let ring = &self.params.ring;
        let zip = |x: &[u64], y: &[u64]| -> Vec<u64> {
            x.iter().zip(y).map(|(&p, &q)| ring.reduce(p.wrapping_add(q))).collect()
        };
        Ok(Ciphertext {
            key_id: a.key_id,
            body: zip(&a.body, &b.body),
            pad: zip(&a.pad, &b.pad),
            noise,
            phase: self.phase(),
        })
    }

    /// Adds a plaintext vector (zero-padded).
    pub fn add_plain(&self, c: &Ciphertext, p: &[u64]) -> Result<Ciphertext> {
        self.check_len(c.body.len())?;
        if p.len() > c.body.len() {
            return Err(Error::Oversize {
                len: p.len(),
                slots: c.body.len(),
            });
        }
        let noise = self.charge(c.noise + self.cost(|m| m.add))?;
        self.bump(|c| &c.add_plain);
        let ring = &self.params.ring;
        let body = c
            .body
            .iter()
            .enumerate()
            .map(|(i, &b)| ring.reduce(b.wrapping_add(p.get(i).copied().unwrap_or(0))))
            .collect();
        Ok(Ciphertext {
            key_id: c.key_id,
            body,
            pad: c.pad.clone(),
            noise,
            phase: self.phase(),
        })
    }

    /// Slotwise product with a plaintext vector (zero-padded).
    pub fn mul_plain(&self, c: &Ciphertext, p: &[u64]) -> Result<Ciphertext> {
        self.check_len(c.body.len())?;
        if p.len() > c.body.len() {
            return Err(Error::Oversize {
                len: p.len(),
                slots: c.body.len(),
            });
        }
        let noise = self.charge(c.noise + self.cost(|m| m.mul_plain))?;
        self.bump(|c| &c.mul_plain);
        let ring = &self.params.ring;
        let mul = |x: &[u64]| -> Vec<u64> {
            x.iter()
                .enumerate()
                .map(|(i, &v)| ring.reduce(v.wrapping_mul(p.get(i).copied().unwrap_or(0))))
                .collect()
        };
        Ok(Ciphertext {
            key_id: c.key_id,
            body: mul(&c.body),
            pad: mul(&c.pad),
            noise,
            phase: self.phase(),
        })
    }

    /// Cyclic left rotation of the slots by `k`.
    pub fn rotate(&self, c: &Ciphertext, k: usize) -> Result<Ciphertext> {
        let m = self.params.slots;
        self.check_len(c.body.len())?;
        if k >= m {
            return Err(Error::Rotation(k));
        }
        let noise = self.charge(c.noise + self.cost(|m| m.rotate))?;
        self.bump(|c| &c.rotate);
        let rot = |x: &[u64]| -> Vec<u64> {
            let mut v = x.to_vec();
            v.rotate_left(k);
            v
        };
        Ok(Ciphertext {
            key_id: c.key_id,
            body: rot(&c.body),
            pad: rot(&c.pad),
            noise,
            phase: self.phase(),
        })
    }

    /// Balanced pairwise sum, keeping the noise depth logarithmic.
    pub fn sum(&self, mut cts: Vec<Ciphertext>) -> Result<Option<Ciphertext>> {
        while cts.len() > 1 {
            let mut next = Vec::with_capacity(cts.len().div_ceil(2));
            let mut it = cts.into_iter();
            while let Some(a) = it.next() {
                match it.next() {
                    Some(b) => next.push(self.add(&a, &b)?),
                    None => next.push(a),
                }
            }
            cts = next;
        }
        Ok(cts.pop())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, prop_assert_eq, proptest, ProptestConfig};

    fn setup(m: usize) -> (Evaluator, KeyPair) {
        let p = HeParams::new(m, RingParams::default()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let kp = keygen(&p, &mut rng);
        (Evaluator::new(p).unwrap(), kp)
    }

    #[test]
    fn params_validation() {
        assert!(HeParams::new(12, RingParams::default()).is_err());
        assert!(HeParams::new(16, RingParams::default()).is_ok());
        let p = HeParams {
            ciphertext_bytes: 0,
            ..HeParams::default()
        };
        assert!(p.validate().is_err());
        assert_eq!(HeParams::default().ciphertext_bytes, 262_144);
    }

    #[test]
    fn keys_and_round_trip() {
        let (ev, kp) = setup(4);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let kp2 = keygen(ev.params(), &mut rng);
        assert_ne!(kp.key_id(), kp2.key_id());
        let c = ev.encrypt(&[1, 2, 3], &kp.public).unwrap();
        assert_eq!(ev.decrypt(&c, &kp.secret).unwrap(), vec![1, 2, 3, 0]);
        assert_ne!(c.payload(), &[1, 2, 3, 0]);
        assert!(matches!(ev.decrypt(&c, &kp2.secret), Err(Error::KeyMismatch { .. })));
        let z = ev.encrypt(&[0; 4], &kp.public).unwrap();
        assert_eq!(ev.decrypt(&z, &kp.secret).unwrap(), vec![0; 4]);
        assert!(matches!(
            ev.encrypt(&[1; 5], &kp.public),
            Err(Error::Oversize { len: 5, slots: 4 })
        ));
    }

    #[test]
    fn random_round_trips() {
        let (ev, kp) = setup(64);
        for seed in 0..100 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let v: Vec<u64> = (0..64).map(|_| rng.gen()).collect();
            let c = ev.encrypt(&v, &kp.public).unwrap();
            assert_eq!(ev.decrypt(&c, &kp.secret).unwrap(), v);
        }
    }

    #[test]
    fn arithmetic_examples() {
        let (ev, kp) = setup(4);
        let a = ev.encrypt(&[1, 2], &kp.public).unwrap();
        let b = ev.encrypt(&[3, 4], &kp.public).unwrap();
        let s = ev.add(&a, &b).unwrap();
        assert_eq!(&ev.decrypt(&s, &kp.secret).unwrap()[..2], &[4, 6]);
        let c = ev.encrypt(&[1, 2, 3], &kp.public).unwrap();
        let m = ev.mul_plain(&c, &[2, 2, 2]).unwrap();
        assert_eq!(ev.decrypt(&m, &kp.secret).unwrap(), vec![2, 4, 6, 0]);
        let z = ev.mul_plain(&c, &[0; 4]).unwrap();
        assert_eq!(ev.decrypt(&z, &kp.secret).unwrap(), vec![0; 4]);
        let p = ev.add_plain(&c, &[10, 0, 0, 7]).unwrap();
        assert_eq!(ev.decrypt(&p, &kp.secret).unwrap(), vec![11, 2, 3, 7]);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let other = keygen(ev.params(), &mut rng);
        let o = ev.encrypt(&[1], &other.public).unwrap();
        assert!(matches!(ev.add(&a, &o), Err(Error::KeyMismatch { .. })));
    }

    #[test]
    fn rotation_examples() {
        let (ev, kp) = setup(4);
        let c = ev.encrypt(&[10, 11, 12, 13], &kp.public).unwrap();
        let r = ev.rotate(&c, 1).unwrap();
        assert_eq!(ev.decrypt(&r, &kp.secret).unwrap(), vec![11, 12, 13, 10]);
        let before = ev.counts(Phase::Offline).rotate;
        let r0 = ev.rotate(&c, 0).unwrap();
        assert_eq!(ev.counts(Phase::Offline).rotate, before + 1);
        assert_eq!(ev.decrypt(&r0, &kp.secret).unwrap(), vec![10, 11, 12, 13]);
        let back = ev.rotate(&ev.rotate(&c, 3).unwrap(), 1).unwrap();
        assert_eq!(ev.decrypt(&back, &kp.secret).unwrap(), vec![10, 11, 12, 13]);
        assert!(matches!(ev.rotate(&c, 4), Err(Error::Rotation(4))));
    }

    #[test]
    fn counters_track_every_call_by_phase() {
        let (ev, kp) = setup(8);
        let a = ev.encrypt(&[1], &kp.public).unwrap();
        ev.set_phase(Phase::Online);
        let b = ev.add(&a, &a).unwrap();
        let c = ev.mul_plain(&b, &[3]).unwrap();
        let d = ev.rotate(&c, 2).unwrap();
        let e = ev.add_plain(&d, &[1]).unwrap();
        ev.decrypt(&e, &kp.secret).unwrap();
        let off = ev.counts(Phase::Offline);
        let on = ev.counts(Phase::Online);
        assert_eq!(off.total(), 1);
        assert_eq!(off.enc, 1);
        assert_eq!(on.total(), 5);
        assert_eq!((on.add, on.mul_plain, on.rotate, on.add_plain, on.dec), (1, 1, 1, 1, 1));
        assert_eq!(ev.total_counts().mul_ct_ct, 0);
        assert_eq!(e.phase(), Phase::Online);
    }

    #[test]
    fn noise_meter() {
        let mut p = HeParams::new(4, RingParams::default()).unwrap();
        p.noise = Some(NoiseModel {
            budget: 7,
            add: 1,
            mul_plain: 4,
            rotate: 2,
        });
        let ev = Evaluator::new(p).unwrap();
        let kp = keygen(&p, &mut ChaCha20Rng::seed_from_u64(0));
        let c = ev.encrypt(&[1], &kp.public).unwrap();
        let m = ev.mul_plain(&c, &[1]).unwrap();
        let r = ev.rotate(&m, 1).unwrap();
        assert_eq!(r.noise(), 6);
        assert!(matches!(
            ev.rotate(&r, 1),
            Err(Error::NoiseBudget { used: 8, budget: 7 })
        ));
        assert_eq!(ev.noise_high_water(), 6);
        let s = ev.sum(vec![c.clone(), c.clone(), c.clone(), c]).unwrap().unwrap();
        assert_eq!(s.noise(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn homomorphic_add(v1 in prop::collection::vec(any::<u64>(), 8), v2 in prop::collection::vec(any::<u64>(), 8)) {
            let (ev, kp) = setup(8);
            let s = ev.add(&ev.encrypt(&v1, &kp.public).unwrap(), &ev.encrypt(&v2, &kp.public).unwrap()).unwrap();
            let want: Vec<u64> = v1.iter().zip(&v2).map(|(a, b)| a.wrapping_add(*b)).collect();
            prop_assert_eq!(ev.decrypt(&s, &kp.secret).unwrap(), want);
        }
    }

    proptest! {
        #[test]
        fn rotation_composes(v in prop::collection::vec(any::<u64>(), 16), i in 0usize..16, j in 0usize..16) {
            let (ev, kp) = setup(16);
            let c = ev.encrypt(&v, &kp.public).unwrap();
            let two = ev.rotate(&ev.rotate(&c, i).unwrap(), j).unwrap();
            let one = ev.rotate(&c, (i + j) % 16).unwrap();
            prop_assert_eq!(ev.decrypt(&two, &kp.secret).unwrap(), ev.decrypt(&one, &kp.secret).unwrap());
        }
    }
}
