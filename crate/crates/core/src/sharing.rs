//! Additive secret sharing over the ring and matrix multiplication triples
//! produced offline with HE.

use std::collections::HashSet;
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::he::{Ciphertext, Evaluator, KeyPair};
use crate::packing::{pack, PackingLayout, Strategy};
use crate::ring::{FixedTensor, RingParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Party {
    Client,
    Server,
}

/// One party's additive share of a logical tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShareMat {
    pub owner: Party,
    pub value: FixedTensor,
    pub of: String,
}

/// Splits `x` into a uniform client share `r` and a server share `x - r`.
pub fn share<R: Rng + ?Sized>(x: &FixedTensor, of: &str, ring: &RingParams, rng: &mut R) -> (ShareMat, ShareMat) {
    let r = FixedTensor::random(ring, x.rows(), x.cols(), rng);
    share_with_mask(x, &r, of).expect("mask has the tensor's shape")
}

pub fn share_with_mask(x: &FixedTensor, r: &FixedTensor, of: &str) -> Result<(ShareMat, ShareMat)> {
    let server = x.sub(r)?;
    Ok((
        ShareMat {
            owner: Party::Client,
            value: r.clone(),
            of: of.to_string(),
        },
        ShareMat {
            owner: Party::Server,
            value: server,
            of: of.to_string(),
        },
    ))
}

pub fn reconstruct(a: &ShareMat, b: &ShareMat) -> Result<FixedTensor> {
    if a.owner == b.owner {
        return Err(Error::Protocol(format!(
            "both shares of {} held by {:?}",
            a.of, a.owner
        )));
    }
    if a.of != b.of {
        return Err(Error::Protocol(format!("shares of {} and {} do not match", a.of, b.of)));
    }
    a.value.add(&b.value)
}

/// Multiplies a share by a public scalar; no communication.
pub fn local_scalar_mul(s: &ShareMat, k: u64) -> ShareMat {
    ShareMat {
        owner: s.owner,
        value: s.value.scale(k),
        of: s.of.clone(),
    }
}

pub fn add_shares(a: &ShareMat, b: &ShareMat, of: &str) -> Result<ShareMat> {
    if a.owner != b.owner {
        return Err(Error::Protocol("adding shares held by different parties".into()));
    }
    Ok(ShareMat {
        owner: a.owner,
        value: a.value.add(&b.value)?,
        of: of.to_string(),
    })
}

/// Encrypted matrix packed under a layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCt {
    pub cts: Vec<Ciphertext>,
    pub layout: PackingLayout,
}

impl PackedCt {
    pub fn encrypt(ev: &Evaluator, x: &FixedTensor, strategy: Strategy, kp: &KeyPair) -> Result<Self> {
        let layout = PackingLayout::new(strategy, x.rows(), x.cols(), ev.slots())?;
        Ok(Self {
            cts: pack(ev, x, &layout, &kp.public)?,
            layout,
        })
    }

    pub fn count(&self) -> usize {
        self.cts.len()
    }
}

/// Matrix triple for a product `U * V` where the server will hold
/// `U - left` and `V - right`.
///
/// The client keeps `left`, `right` and the key; the server receives the
/// three ciphertext groups and samples `rs_next` for the re-sharing step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatTriple {
    pub id: u64,
    pub left: FixedTensor,
    pub right: FixedTensor,
    pub left_ct: PackedCt,
    pub right_ct: PackedCt,
    /// `Enc(left * right)`.
    pub product_ct: PackedCt,
    pub rs_next: FixedTensor,
}

impl MatTriple {
    /// The sampled mask `Rc` of a triple built by [`gen_triple`].
    pub fn rc(&self) -> &FixedTensor {
        &self.right
    }

    pub fn rc_t_rc_ct(&self) -> &PackedCt {
        &self.product_ct
    }
}

/// Triple with given masks; `id` must be unique within a session.
pub fn gen_pair_triple<R: Rng + ?Sized>(
    ev: &Evaluator,
    kp: &KeyPair,
    id: u64,
    left: FixedTensor,
    right: FixedTensor,
    strategy: Strategy,
    rng: &mut R,
) -> Result<MatTriple> {
    let product = left.mat_mul(&right)?;
    let ring = ev.params().ring;
    Ok(MatTriple {
        id,
        left_ct: PackedCt::encrypt(ev, &left, strategy, kp)?,
        right_ct: PackedCt::encrypt(ev, &right, strategy, kp)?,
        product_ct: PackedCt::encrypt(ev, &product, strategy, kp)?,
        rs_next: FixedTensor::random(&ring, product.rows(), product.cols(), rng),
        left,
        right,
    })
}

/// Samples `Rc` of the given shape uniformly over the full ring and builds
/// the triple with `left = Rc^T`, `right = Rc`, so the product ciphertext
/// holds `Rc^T * Rc`.
pub fn gen_triple<R: Rng + ?Sized>(
    ev: &Evaluator,
    kp: &KeyPair,
    shape: (usize, usize),
    strategy: Strategy,
    rng: &mut R,
) -> Result<MatTriple> {
    let ring = ev.params().ring;
    let rc = FixedTensor::random(&ring, shape.0, shape.1, rng);
    let id = rng.gen();
    gen_pair_triple(ev, kp, id, rc.transpose(), rc, strategy, rng)
}

/// Rejects a second use of any triple id.
#[derive(Debug, Default)]
pub struct TripleGuard {
    used: HashSet<u64>,
}

impl TripleGuard {
    pub fn consume(&mut self, id: u64) -> Result<()> {
        if !self.used.insert(id) {
            return Err(Error::MaterialReuse(id));
        }
        Ok(())
    }
}

const MAGIC: &[u8; 4] = b"PRM1";
const VERSION: u16 = 1;

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Schema(format!("truncated material file: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

fn put_tensor(w: &mut impl Write, t: &FixedTensor) -> Result<()> {
    put_u64(w, t.rows() as u64)?;
    put_u64(w, t.cols() as u64)?;
    t.data().iter().try_for_each(|&v| put_u64(w, v))
}

fn get_len(r: &mut impl Read, limit: u64) -> Result<usize> {
    let v = get_u64(r)?;
    if v > limit {
        return Err(Error::Schema(format!("length {v} exceeds limit {limit}")));
    }
    Ok(v as usize)
}

fn get_tensor(r: &mut impl Read) -> Result<FixedTensor> {
    let rows = get_len(r, 1 << 24)?;
    let cols = get_len(r, 1 << 24)?;
    let data = (0..rows * cols).map(|_| get_u64(r)).collect::<Result<Vec<_>>>()?;
    FixedTensor::from_vec(rows, cols, data)
}

fn put_packed(w: &mut impl Write, p: &PackedCt) -> Result<()> {
    put_u64(w, p.layout.n as u64)?;
    put_u64(w, p.layout.d as u64)?;
    put_u64(w, p.cts.len() as u64)?;
    for c in &p.cts {
        let (key, noise, body, pad) = c.to_parts();
        put_u64(w, key)?;
        put_u64(w, noise)?;
        body.iter().chain(pad).try_for_each(|&v| put_u64(w, v))?;
    }
    Ok(())
}

fn get_packed(r: &mut impl Read, strategy: Strategy, slots: usize) -> Result<PackedCt> {
    let n = get_len(r, slots as u64)?;
    let d = get_len(r, 1 << 24)?;
    let layout = PackingLayout::new(strategy, n, d, slots).map_err(|e| Error::Schema(e.to_string()))?;
    let count = get_len(r, 1 << 24)?;
    if count != layout.c {
        return Err(Error::Schema(format!("{count} ciphertexts for layout of {}", layout.c)));
    }
    let mut cts = Vec::with_capacity(count);
    for _ in 0..count {
        let key = get_u64(r)?;
        let noise = get_u64(r)?;
        let body = (0..slots).map(|_| get_u64(r)).collect::<Result<Vec<_>>>()?;
        let pad = (0..slots).map(|_| get_u64(r)).collect::<Result<Vec<_>>>()?;
        cts.push(Ciphertext::from_parts(key, noise, body, pad));
    }
    Ok(PackedCt { cts, layout })
}

/// Serializes a triple as versioned little-endian offline material.
pub fn write_triple(w: &mut impl Write, t: &MatTriple, ring: &RingParams) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [ring.modulus_bits, ring.value_bits, ring.frac_bits] {
        w.write_all(&v.to_le_bytes())?;
    }
    put_u64(w, ring.max_reduction_dim)?;
    let strategy = t.left_ct.layout.strategy;
    w.write_all(&[match strategy {
        Strategy::FeaturesFirst => 0,
        Strategy::TokensFirst => 1,
    }])?;
    put_u64(w, t.left_ct.layout.slots as u64)?;
    put_u64(w, t.id)?;
    for m in [&t.left, &t.right, &t.rs_next] {
        put_tensor(w, m)?;
    }
    for p in [&t.left_ct, &t.right_ct, &t.product_ct] {
        put_packed(w, p)?;
    }
    Ok(())
}

pub fn read_triple(r: &mut impl Read) -> Result<(MatTriple, RingParams)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Schema("missing header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Schema(format!("bad magic {magic:?}")));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)
        .map_err(|_| Error::Schema("missing version".into()))?;
    let version = u16::from_le_bytes(b2);
    if version != VERSION {
        return Err(Error::Schema(format!("unsupported version {version}")));
    }
    let mut words = [0u32; 3];
    for w in &mut words {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| Error::Schema("truncated header".into()))?;
        *w = u32::from_le_bytes(b);
    }
    let red = get_u64(r)?;
    let ring =
        RingParams::with_reduction_dim(words[0], words[1], words[2], red).map_err(|e| Error::Schema(e.to_string()))?;
    let mut lb = [0u8; 1];
    r.read_exact(&mut lb)
        .map_err(|_| Error::Schema("truncated header".into()))?;
    let strategy = match lb[0] {
        0 => Strategy::FeaturesFirst,
        1 => Strategy::TokensFirst,
        x => return Err(Error::Schema(format!("unknown layout id {x}"))),
    };
    let slots = get_len(r, 1 << 20)?;
    let id = get_u64(r)?;
    let left = get_tensor(r)?;
    let right = get_tensor(r)?;
    let rs_next = get_tensor(r)?;
    let left_ct = get_packed(r, strategy, slots)?;
    let right_ct = get_packed(r, strategy, slots)?;
    let product_ct = get_packed(r, strategy, slots)?;
    Ok((
        MatTriple {
            id,
            left,
            right,
            left_ct,
            right_ct,
            product_ct,
            rs_next,
        },
        ring,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::he::{keygen, HeParams};
    use crate::packing::unpack;
    use proptest::prelude::{prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn ring() -> RingParams {
        RingParams::default()
    }

    fn scalar(v: i64) -> FixedTensor {
        FixedTensor::from_signed(&ring(), 1, 1, &[v]).unwrap()
    }

    fn setup() -> (Evaluator, KeyPair) {
        let p = HeParams::new(16, ring()).unwrap();
        let kp = keygen(&p, &mut ChaCha20Rng::seed_from_u64(8));
        (Evaluator::new(p).unwrap(), kp)
    }

    #[test]
    fn share_examples() {
        let (c, s) = share_with_mask(&scalar(7), &scalar(3), "x").unwrap();
        assert_eq!((c.value.data()[0], s.value.data()[0]), (3, 4));
        assert_eq!(reconstruct(&c, &s).unwrap(), scalar(7));
        let (c, s) = share_with_mask(&scalar(0), &scalar(9), "z").unwrap();
        assert_eq!(s.value, scalar(-9));
        assert_eq!(reconstruct(&s, &c).unwrap(), scalar(0));
        assert!(reconstruct(&c, &c).is_err());
    }

    #[test]
    fn random_shares_reconstruct() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..500 {
            let x = FixedTensor::random(&ring(), 2, 3, &mut rng);
            let (c, s) = share(&x, "x", &ring(), &mut rng);
            assert_eq!(reconstruct(&c, &s).unwrap(), x);
        }
    }

    #[test]
    fn scalar_mul_examples() {
        let r = ring();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let x = FixedTensor::encode(&r, 1, 4, &[1.5, -2.25, 3.0, -0.75]).unwrap();
        let (c, s) = share(&x, "x", &r, &mut rng);
        let one = reconstruct(&local_scalar_mul(&c, 1), &local_scalar_mul(&s, 1)).unwrap();
        assert_eq!(one, x);
        let zero = reconstruct(&local_scalar_mul(&c, 0), &local_scalar_mul(&s, 0)).unwrap();
        assert_eq!(zero, FixedTensor::zeros(1, 4));
        let k = r.encode(1.0 / 8f64.sqrt()).unwrap();
        let y = reconstruct(&local_scalar_mul(&c, k), &local_scalar_mul(&s, k)).unwrap();
        let (t, _) = crate::ring::truncate(&y, &r);
        for (got, want) in t.decode(&r).iter().zip([1.5, -2.25, 3.0, -0.75]) {
            assert!((got - want / 8f64.sqrt()).abs() <= 2f64.powi(-7), "{got} vs {want}");
        }
    }

    #[test]
    fn triple_examples() {
        let (ev, kp) = setup();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let t = gen_pair_triple(&ev, &kp, 1, scalar(5), scalar(5), Strategy::FeaturesFirst, &mut rng).unwrap();
        let p = unpack(&ev, &t.product_ct.cts, &t.product_ct.layout, &kp.secret).unwrap();
        assert_eq!(p, scalar(25));
        let z = FixedTensor::zeros(2, 2);
        let t = gen_pair_triple(&ev, &kp, 2, z.clone(), z.clone(), Strategy::TokensFirst, &mut rng).unwrap();
        let p = unpack(&ev, &t.product_ct.cts, &t.product_ct.layout, &kp.secret).unwrap();
        assert_eq!(p, z);
        for strategy in [Strategy::FeaturesFirst, Strategy::TokensFirst] {
            let t = gen_triple(&ev, &kp, (4, 3), strategy, &mut rng).unwrap();
            let p = unpack(&ev, &t.rc_t_rc_ct().cts, &t.rc_t_rc_ct().layout, &kp.secret).unwrap();
            let rc = t.rc();
            let mut oracle = FixedTensor::zeros(3, 3);
            for i in 0..3 {
                for j in 0..3 {
                    let mut acc = 0u64;
                    for k in 0..4 {
                        acc = acc.wrapping_add(rc.get(k, i).wrapping_mul(rc.get(k, j)));
                    }
                    oracle.set(i, j, acc);
                }
            }
            assert_eq!(p, oracle);
            let l = unpack(&ev, &t.left_ct.cts, &t.left_ct.layout, &kp.secret).unwrap();
            assert_eq!(&l, &rc.transpose());
        }
    }

    #[test]
    fn replay_guard() {
        let mut g = TripleGuard::default();
        g.consume(4).unwrap();
        g.consume(5).unwrap();
        assert_eq!(g.consume(4), Err(Error::MaterialReuse(4)));
    }

    #[test]
    fn material_file_round_trip() {
        let (ev, kp) = setup();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let t = gen_triple(&ev, &kp, (3, 2), Strategy::TokensFirst, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_triple(&mut buf, &t, &ring()).unwrap();
        assert_eq!(&buf[..4], b"PRM1");
        let (back, r) = read_triple(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
        assert_eq!(r, ring());
        let p = unpack(&ev, &back.product_ct.cts, &back.product_ct.layout, &kp.secret).unwrap();
        assert_eq!(p, t.left.mat_mul(&t.right).unwrap());
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(read_triple(&mut &cut[..]), Err(Error::Schema(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_triple(&mut bad.as_slice()), Err(Error::Schema(_))));
    }

    proptest! {
        #[test]
        fn sharing_is_linear(x: u64, y: u64, rx: u64, ry: u64) {
            let (cx, sx) = share_with_mask(&FixedTensor::from_vec(1, 1, vec![x]).unwrap(), &FixedTensor::from_vec(1, 1, vec![rx]).unwrap(), "v").unwrap();
            let (cy, sy) = share_with_mask(&FixedTensor::from_vec(1, 1, vec![y]).unwrap(), &FixedTensor::from_vec(1, 1, vec![ry]).unwrap(), "v").unwrap();
            let c = add_shares(&cx, &cy, "s").unwrap();
            let s = add_shares(&sx, &sy, "s").unwrap();
            prop_assert_eq!(reconstruct(&c, &s).unwrap().data()[0], x.wrapping_add(y));
        }
    }
}
