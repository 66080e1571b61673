//! Base oblivious transfer of wire labels (Chou-Orlandi over Ristretto).
//!
//! Choice bits are grouped in chunks of four and each chunk is one 1-of-16
//! transfer whose messages are the four labels selected by that chunk value.

use curve25519_dalek::constants::RISTRETTO_BASEPOINT_TABLE;
use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoBasepointTable, RistrettoPoint};
use curve25519_dalek::scalar::Scalar;
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};

use super::garble::{Label, LABEL_BYTES};
use crate::error::{Error, Result};

pub const CHUNK_BITS: usize = 4;
const CHOICES: usize = 1 << CHUNK_BITS;
const POINT_BYTES: usize = 32;
const MESSAGE_BYTES: usize = CHUNK_BITS * LABEL_BYTES;

/// Bytes exchanged by a batch of transfers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OtBytes {
    pub sender: usize,
    pub receiver: usize,
}

impl OtBytes {
    pub fn for_bits(bits: usize) -> Self {
        let chunks = bits.div_ceil(CHUNK_BITS);
        if chunks == 0 {
            return Self::default();
        }
        Self {
            sender: POINT_BYTES + chunks * CHOICES * MESSAGE_BYTES,
            receiver: chunks * POINT_BYTES,
        }
    }

    pub fn total(&self) -> usize {
        self.sender + self.receiver
    }
}

fn pad(
    index: usize,
    a: &CompressedRistretto,
    b: &CompressedRistretto,
    shared: &CompressedRistretto,
) -> [u8; MESSAGE_BYTES] {
    let mut out = [0u8; MESSAGE_BYTES];
    for (block, chunk) in out.chunks_mut(32).enumerate() {
        let mut h = Sha256::new();
        h.update(b"privtx-ot");
        h.update((index as u64).to_le_bytes());
        h.update([block as u8]);
        h.update(a.as_bytes());
        h.update(b.as_bytes());
        h.update(shared.as_bytes());
        chunk.copy_from_slice(&h.finalize()[..chunk.len()]);
    }
    out
}

fn half() -> Scalar {
    Scalar::from(2u8).invert()
}

fn encode(labels: &[Label]) -> [u8; MESSAGE_BYTES] {
    let mut out = [0u8; MESSAGE_BYTES];
    for (i, l) in labels.iter().enumerate() {
        out[i * LABEL_BYTES..(i + 1) * LABEL_BYTES].copy_from_slice(&l.to_le_bytes());
    }
    out
}

fn xor(a: &mut [u8; MESSAGE_BYTES], b: &[u8; MESSAGE_BYTES]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x ^= y;
    }
}

pub struct OtSender {
    a: Scalar,
    point: RistrettoPoint,
}

impl OtSender {
    pub fn new<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let a = Scalar::random(rng);
        Self {
            a,
            point: &a * RISTRETTO_BASEPOINT_TABLE,
        }
    }

    pub fn setup_message(&self) -> CompressedRistretto {
        self.point.compress()
    }

    /// Encrypts all 16 label combinations of each chunk.
    pub fn respond(
        &self,
        pairs: &[[Label; 2]],
        replies: &[CompressedRistretto],
    ) -> Result<Vec<[[u8; MESSAGE_BYTES]; CHOICES]>> {
        if replies.len() != pairs.len().div_ceil(CHUNK_BITS) {
            return Err(Error::Protocol("ot reply count mismatch".into()));
        }
        let half_a = self.a * half();
        let half_step = half_a * self.point;
        let a_c = self.point.compress();
        let mut halves = Vec::with_capacity(replies.len() * CHOICES);
        for reply in replies {
            let b = reply
                .decompress()
                .ok_or_else(|| Error::Protocol("invalid ot point".into()))?;
            let mut h = half_a * b;
            for _ in 0..CHOICES {
                halves.push(h);
                h -= half_step;
            }
        }
        let shared = RistrettoPoint::double_and_compress_batch(&halves);
        Ok(replies
            .iter()
            .enumerate()
            .map(|(ci, reply)| {
                let chunk = &pairs[ci * CHUNK_BITS..((ci + 1) * CHUNK_BITS).min(pairs.len())];
                let mut out = [[0u8; MESSAGE_BYTES]; CHOICES];
                for (j, slot) in out.iter_mut().enumerate() {
                    let labels: Vec<Label> = chunk.iter().enumerate().map(|(k, p)| p[(j >> k) & 1]).collect();
                    let mut m = encode(&labels);
                    xor(&mut m, &pad(ci, &a_c, reply, &shared[ci * CHOICES + j]));
                    *slot = m;
                }
                out
            })
            .collect())
    }
}

pub struct OtReceiver {
    choices: Vec<bool>,
    secrets: Vec<Scalar>,
    replies: Vec<CompressedRistretto>,
    sender_point: RistrettoPoint,
}

impl OtReceiver {
    pub fn choose<R: RngCore + CryptoRng>(setup: &CompressedRistretto, choices: &[bool], rng: &mut R) -> Result<Self> {
        let a = setup
            .decompress()
            .ok_or_else(|| Error::Protocol("invalid ot point".into()))?;
        let half_a = half() * a;
        let mut multiples = vec![RistrettoPoint::default(); CHOICES];
        for c in 1..CHOICES {
            multiples[c] = multiples[c - 1] + half_a;
        }
        let mut secrets = Vec::new();
        let mut halves = Vec::new();
        for chunk in choices.chunks(CHUNK_BITS) {
            let c = chunk
                .iter()
                .enumerate()
                .fold(0usize, |acc, (k, &b)| acc | (b as usize) << k);
            let s = Scalar::random(rng);
            halves.push(multiples[c] + &s * RISTRETTO_BASEPOINT_TABLE);
            secrets.push(s);
        }
        let replies = RistrettoPoint::double_and_compress_batch(&halves);
        Ok(Self {
            choices: choices.to_vec(),
            secrets,
            replies,
            sender_point: a,
        })
    }

    pub fn replies(&self) -> &[CompressedRistretto] {
        &self.replies
    }

    /// Recovers exactly one label per choice bit.
    pub fn finish(&self, messages: &[[[u8; MESSAGE_BYTES]; CHOICES]]) -> Result<Vec<Label>> {
        if messages.len() != self.replies.len() {
            return Err(Error::Protocol("ot message count mismatch".into()));
        }
        let mut out = Vec::with_capacity(self.choices.len());
        let a_c = self.sender_point.compress();
        let table = RistrettoBasepointTable::create(&self.sender_point);
        let halves: Vec<RistrettoPoint> = self.secrets.iter().map(|s| s * &table).collect();
        let shared = RistrettoPoint::double_and_compress_batch(&halves);
        for (ci, chunk) in self.choices.chunks(CHUNK_BITS).enumerate() {
            let c = chunk
                .iter()
                .enumerate()
                .fold(0usize, |acc, (k, &b)| acc | (b as usize) << k);
            let mut m = messages[ci][c];
            xor(&mut m, &pad(ci, &a_c, &self.replies[ci], &shared[ci]));
            for k in 0..chunk.len() {
                let mut bytes = [0u8; LABEL_BYTES];
                bytes.copy_from_slice(&m[k * LABEL_BYTES..(k + 1) * LABEL_BYTES]);
                out.push(Label::from_le_bytes(bytes));
            }
        }
        Ok(out)
    }
}

/// Runs the sender and receiver against each other and returns the chosen
/// labels with the bytes each side sent.
pub fn ot_transfer<R: RngCore + CryptoRng>(
    pairs: &[[Label; 2]],
    choices: &[bool],
    rng: &mut R,
) -> Result<(Vec<Label>, OtBytes)> {
    if pairs.len() != choices.len() {
        return Err(Error::Protocol("ot choice count mismatch".into()));
    }
    if pairs.is_empty() {
        return Ok((Vec::new(), OtBytes::default()));
    }
    let sender = OtSender::new(rng);
    let setup = sender.setup_message();
    let receiver = OtReceiver::choose(&setup, choices, rng)?;
    let messages = sender.respond(pairs, receiver.replies())?;
    let labels = receiver.finish(&messages)?;
    let bytes = OtBytes {
        sender: POINT_BYTES + messages.len() * CHOICES * MESSAGE_BYTES,
        receiver: receiver.replies().len() * POINT_BYTES,
    };
    Ok((labels, bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn one_label_per_choice() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for n in [1usize, 4, 5, 11, 16] {
            let pairs: Vec<[Label; 2]> = (0..n).map(|_| [rng.gen(), rng.gen()]).collect();
            let choices: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            let (labels, bytes) = ot_transfer(&pairs, &choices, &mut rng).unwrap();
            assert_eq!(labels.len(), n);
            for ((p, &c), l) in pairs.iter().zip(&choices).zip(&labels) {
                assert_eq!(*l, p[c as usize]);
            }
            assert_eq!(bytes, OtBytes::for_bits(n));
        }
    }

    #[test]
    fn byte_formula() {
        let b = OtBytes::for_bits(8);
        assert_eq!(b.receiver, 64);
        assert_eq!(b.sender, 32 + 2 * 16 * 64);
        assert_eq!(OtBytes::for_bits(0).total(), 0);
    }
}
