//! Free-XOR garbling with point-and-permute and four-row AND tables.

use aes::cipher::{BlockEncrypt, KeyInit};
use aes::Aes128;
use rand::{CryptoRng, Rng, RngCore};

use super::{BoolCircuit, GateOp};
use crate::error::{Error, Result};

pub type Label = u128;

pub const LABEL_BYTES: usize = 16;
/// Bytes of one AND table.
pub const AND_TABLE_BYTES: usize = 4 * LABEL_BYTES;
/// Bytes of the decoding information for one output wire.
pub const DECODE_BYTES: usize = 2 * LABEL_BYTES;

const FIXED_KEY: [u8; 16] = *b"privtx-gc-fixkey";

/// Fixed-key AES used as a tweakable hash of wire labels.
pub struct LabelHash {
    aes: Aes128,
}

impl Default for LabelHash {
    fn default() -> Self {
        Self {
            aes: Aes128::new(&FIXED_KEY.into()),
        }
    }
}

fn double(x: u128) -> u128 {
    let carry = x >> 127;
    (x << 1) ^ (carry * 0x87)
}

impl LabelHash {
    fn pi(&self, k: u128) -> u128 {
        let mut block = k.to_le_bytes().into();
        self.aes.encrypt_block(&mut block);
        u128::from_le_bytes(block.into()) ^ k
    }

    pub fn gate(&self, a: Label, b: Label, tweak: u64) -> Label {
        self.pi(double(a) ^ double(double(b)) ^ tweak as u128)
    }

    /// `gate` on four label pairs at once.
    pub fn gate4(&self, pairs: [(Label, Label); 4], tweak: u64) -> [Label; 4] {
        let keys = pairs.map(|(a, b)| double(a) ^ double(double(b)) ^ tweak as u128);
        let mut blocks = keys.map(|k| k.to_le_bytes().into());
        self.aes.encrypt_blocks(&mut blocks);
        let mut out = [0u128; 4];
        for ((o, b), k) in out.iter_mut().zip(blocks).zip(keys) {
            *o = u128::from_le_bytes(b.into()) ^ k;
        }
        out
    }

    pub fn output(&self, l: Label, index: usize) -> Label {
        self.pi(double(l) ^ (1u128 << 64 | index as u128))
    }
}

fn color(l: Label) -> usize {
    (l & 1) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct GarbledCircuit {
    /// One table per AND gate, in gate order.
    pub tables: Vec<[Label; 4]>,
    /// Hashes of the zero and one label of every output wire.
    pub decode: Vec<[Label; 2]>,
}

impl GarbledCircuit {
    pub fn table_bytes(&self) -> usize {
        self.tables.len() * AND_TABLE_BYTES
    }

    pub fn decode_bytes(&self) -> usize {
        self.decode.len() * DECODE_BYTES
    }
}

/// Garbler-side label material.
#[derive(Debug, Clone)]
pub struct GarblerLabels {
    pub delta: Label,
    pub client_zero: Vec<Label>,
    pub server_zero: Vec<Label>,
}

impl GarblerLabels {
    pub fn select(&self, zero: Label, bit: bool) -> Label {
        if bit {
            zero ^ self.delta
        } else {
            zero
        }
    }

    pub fn client_labels(&self, bits: &[bool]) -> Vec<Label> {
        self.client_zero
            .iter()
            .zip(bits)
            .map(|(&z, &b)| self.select(z, b))
            .collect()
    }

    /// Both labels of each server input wire, as offered in the OT.
    pub fn server_pairs(&self) -> Vec<[Label; 2]> {
        self.server_zero.iter().map(|&z| [z, z ^ self.delta]).collect()
    }
}

pub fn garble<R: RngCore + CryptoRng>(c: &BoolCircuit, rng: &mut R) -> (GarbledCircuit, GarblerLabels) {
    let h = LabelHash::default();
    let delta: Label = rng.gen::<u128>() | 1;
    let mut zero = vec![0u128; c.num_wires as usize];
    for &w in c.client_inputs.iter().chain(&c.server_inputs) {
        zero[w as usize] = rng.gen();
    }
    let mut tables = Vec::new();
    for (gid, g) in c.gates.iter().enumerate() {
        let (a, b) = (zero[g.a as usize], zero[g.b as usize]);
        zero[g.out as usize] = match g.op {
            GateOp::Xor => a ^ b,
            GateOp::Not => a ^ delta,
            GateOp::And => {
                let c0: Label = rng.gen();
                let pairs = [(a, b), (a, b ^ delta), (a ^ delta, b), (a ^ delta, b ^ delta)];
                let hs = h.gate4(pairs, gid as u64);
                let mut t = [0u128; 4];
                for (row, ((la, lb), hv)) in pairs.into_iter().zip(hs).enumerate() {
                    let lc = if row == 3 { c0 ^ delta } else { c0 };
                    t[2 * color(la) + color(lb)] = hv ^ lc;
                }
                tables.push(t);
                c0
            }
        };
    }
    let decode = c
        .outputs
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let z = zero[w as usize];
            [h.output(z, i), h.output(z ^ delta, i)]
        })
        .collect();
    let labels = GarblerLabels {
        delta,
        client_zero: c.client_inputs.iter().map(|&w| zero[w as usize]).collect(),
        server_zero: c.server_inputs.iter().map(|&w| zero[w as usize]).collect(),
    };
    (GarbledCircuit { tables, decode }, labels)
}

/// Evaluates with one label per input wire and decodes the outputs.
pub fn gc_eval(c: &BoolCircuit, gc: &GarbledCircuit, client: &[Label], server: &[Label]) -> Result<Vec<bool>> {
    if client.len() != c.client_inputs.len() || server.len() != c.server_inputs.len() {
        return Err(Error::Circuit("input label count mismatch".into()));
    }
    if gc.decode.len() != c.outputs.len() {
        return Err(Error::Circuit("decode table size mismatch".into()));
    }
    let h = LabelHash::default();
    let mut wires = vec![0u128; c.num_wires as usize];
    for (&w, &l) in c.client_inputs.iter().zip(client) {
        wires[w as usize] = l;
    }
    for (&w, &l) in c.server_inputs.iter().zip(server) {
        wires[w as usize] = l;
    }
    let mut next_table = 0;
    for (gid, g) in c.gates.iter().enumerate() {
        let (a, b) = (wires[g.a as usize], wires[g.b as usize]);
        wires[g.out as usize] = match g.op {
            GateOp::Xor => a ^ b,
            GateOp::Not => a,
            GateOp::And => {
                let t = gc
                    .tables
                    .get(next_table)
                    .ok_or_else(|| Error::Circuit("missing garbled table".into()))?;
                next_table += 1;
                t[2 * color(a) + color(b)] ^ h.gate(a, b, gid as u64)
            }
        };
    }
    c.outputs
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let d = h.output(wires[w as usize], i);
            if d == gc.decode[i][0] {
                Ok(false)
            } else if d == gc.decode[i][1] {
                Ok(true)
            } else {
                Err(Error::DecodeFailure(i))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{from_bits, reconstruct_add_circuit, to_bits, BitBackend, CircuitBuilder};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn run(c: &BoolCircuit, x: &[bool], y: &[bool], rng: &mut ChaCha20Rng) -> Result<Vec<bool>> {
        let (gc, labels) = garble(c, rng);
        let cl = labels.client_labels(x);
        let sl: Vec<Label> = labels
            .server_pairs()
            .iter()
            .zip(y)
            .map(|(p, &b)| p[b as usize])
            .collect();
        gc_eval(c, &gc, &cl, &sl)
    }

    #[test]
    fn single_and_truth_table() {
        let mut b = CircuitBuilder::new();
        let x = b.client_input();
        let y = b.server_input();
        let z = b.and(x, y);
        let c = b.finish(&[z]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for (x, y) in [(false, false), (false, true), (true, false), (true, true)] {
            assert_eq!(run(&c, &[x], &[y], &mut rng).unwrap(), vec![x & y]);
        }
    }

    #[test]
    fn xor_only_has_no_tables() {
        let mut b = CircuitBuilder::new();
        let x = b.client_word(8);
        let y = b.server_word(8);
        let z: Vec<_> = x.iter().zip(&y).map(|(&p, &q)| b.xor(p, q)).collect();
        let n = b.not(z[0]);
        let c = b.finish(&[z, vec![n]].concat()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let (gc, _) = garble(&c, &mut rng);
        assert_eq!(gc.table_bytes(), 0);
        let out = run(&c, &to_bits(0xa5, 8), &to_bits(0x3c, 8), &mut rng).unwrap();
        assert_eq!(from_bits(&out[..8]), 0xa5 ^ 0x3c);
        assert!(!out[8]);
    }

    #[test]
    fn adder_matches_plain() {
        let c = reconstruct_add_circuit(8);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (a, b) = (rng.gen::<u8>() as u64, rng.gen::<u8>() as u64);
            let out = run(&c, &to_bits(a, 8), &to_bits(b, 8), &mut rng).unwrap();
            assert_eq!(from_bits(&out), (a + b) % 256);
        }
    }

    #[test]
    fn exhaustive_small_adder() {
        let c = reconstruct_add_circuit(4);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for a in 0..16u64 {
            for b in 0..16u64 {
                let out = run(&c, &to_bits(a, 4), &to_bits(b, 4), &mut rng).unwrap();
                assert_eq!(out, c.eval(&to_bits(a, 4), &to_bits(b, 4)).unwrap());
            }
        }
    }

    #[test]
    fn corrupted_table_fails_decode() {
        let c = reconstruct_add_circuit(8);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (mut gc, labels) = garble(&c, &mut rng);
        for row in gc.tables.last_mut().unwrap().iter_mut() {
            *row ^= 1 << 40;
        }
        let cl = labels.client_labels(&to_bits(200, 8));
        let sl: Vec<Label> = labels.server_pairs().iter().map(|p| p[1]).collect();
        assert!(matches!(gc_eval(&c, &gc, &cl, &sl), Err(Error::DecodeFailure(_))));
    }
}
