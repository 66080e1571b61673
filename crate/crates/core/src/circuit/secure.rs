//! Secure evaluation of a fixed function on additive shares.
//!
//! The client garbles offline and fixes its fresh output masks `r`. Online,
//! the server evaluates and learns `F(x) - r` plus an overflow flag; the
//! client keeps `r` as its share of the result.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use super::fixed::{self, SecureFnSpec};
use super::garble::{self, GarbledCircuit, GarblerLabels, Label, DECODE_BYTES, LABEL_BYTES};
use super::ot::{self, OtBytes};
use super::words as wd;
use super::{from_bits, to_bits, Bit, BoolCircuit, CircuitBuilder, CircuitShape, GateCounts};
use crate::error::{Error, Result};
use crate::ring::{FixedTensor, RingParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GcBackend {
    /// Computes the function in the clear on the reconstructed value and
    /// charges the cost of the equivalent garbled circuit.
    #[default]
    Semantic,
    Garbled,
}

/// Communication of one batch of garbled evaluations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcCost {
    pub invocations: u64,
    pub and_gates: u64,
    pub table_bytes: u64,
    /// Client input labels and output decoding hashes.
    pub label_bytes: u64,
    pub ot_sender_bytes: u64,
    pub ot_receiver_bytes: u64,
}

impl GcCost {
    fn for_shape(c: &CircuitShape, invocations: usize) -> Self {
        let n = invocations as u64;
        let ot = OtBytes::for_bits(invocations * c.server_inputs);
        Self {
            invocations: n,
            and_gates: n * c.counts.and,
            table_bytes: n * c.counts.and * garble::AND_TABLE_BYTES as u64,
            label_bytes: n * (c.client_inputs * LABEL_BYTES + c.outputs * DECODE_BYTES) as u64,
            ot_sender_bytes: ot.sender as u64,
            ot_receiver_bytes: ot.receiver as u64,
        }
    }

    /// Bytes the client (garbler) sends online: garbled material plus its OT messages.
    pub fn client_bytes(&self) -> u64 {
        self.table_bytes + self.label_bytes + self.ot_sender_bytes
    }

    pub fn server_bytes(&self) -> u64 {
        self.ot_receiver_bytes
    }

    pub fn online_bytes(&self) -> u64 {
        self.client_bytes() + self.server_bytes()
    }
}

impl std::ops::AddAssign for GcCost {
    fn add_assign(&mut self, o: Self) {
        self.invocations += o.invocations;
        self.and_gates += o.and_gates;
        self.table_bytes += o.table_bytes;
        self.label_bytes += o.label_bytes;
        self.ot_sender_bytes += o.ot_sender_bytes;
        self.ot_receiver_bytes += o.ot_receiver_bytes;
    }
}

/// Builds the full circuit: reconstruct, apply the function, subtract the
/// client's fresh mask. Client inputs are its shares then its masks; server
/// inputs are its shares. Outputs are the masked results then the flag.
pub fn build_circuit(spec: &SecureFnSpec, ring: &RingParams) -> Result<BoolCircuit> {
    let mut b = CircuitBuilder::new();
    let outs = assemble(&mut b, spec, ring);
    b.finish(&outs)
}

fn assemble(b: &mut CircuitBuilder, spec: &SecureFnSpec, ring: &RingParams) -> Vec<Bit> {
    let mw = ring.modulus_bits as usize;
    let ib = spec.in_bits as usize;
    let cs: Vec<_> = (0..spec.row_len).map(|_| b.client_word(ib)).collect();
    let rs: Vec<_> = (0..spec.outputs()).map(|_| b.client_word(mw)).collect();
    let ss: Vec<_> = (0..spec.row_len).map(|_| b.server_word(ib)).collect();
    let xs: Vec<_> = cs.iter().zip(&ss).map(|(c, s)| wd::add(b, c, s)).collect();
    let (ys, flag) = fixed::apply(b, spec, &xs);
    let mut outs = Vec::with_capacity(ys.len() * mw + 1);
    for (y, r) in ys.iter().zip(&rs) {
        let ye = wd::sign_extend::<CircuitBuilder>(y, mw);
        outs.extend(wd::sub(b, &ye, r));
    }
    outs.push(flag);
    outs
}

type CacheKey = (SecureFnSpec, u32);

fn cache() -> &'static Mutex<HashMap<CacheKey, Arc<BoolCircuit>>> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, Arc<BoolCircuit>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn shape_cache() -> &'static Mutex<HashMap<CacheKey, CircuitShape>> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, CircuitShape>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Gate and input counts of a function's circuit, without keeping its gates.
pub fn shape_for(spec: &SecureFnSpec, ring: &RingParams) -> Result<CircuitShape> {
    let key = (*spec, ring.modulus_bits);
    if let Some(s) = shape_cache().lock().expect("shape cache").get(&key) {
        return Ok(*s);
    }
    let cached = cache().lock().expect("circuit cache").get(&key).map(|c| c.shape());
    let shape = match cached {
        Some(s) => s,
        None => {
            let mut b = CircuitBuilder::counting();
            let outs = assemble(&mut b, spec, ring);
            b.finish_shape(&outs)?
        }
    };
    shape_cache().lock().expect("shape cache").insert(key, shape);
    Ok(shape)
}

/// Returns the circuit for a function, building it once per process.
pub fn circuit_for(spec: &SecureFnSpec, ring: &RingParams) -> Result<Arc<BoolCircuit>> {
    let key = (*spec, ring.modulus_bits);
    if let Some(c) = cache().lock().expect("circuit cache").get(&key) {
        return Ok(c.clone());
    }
    let c = Arc::new(build_circuit(spec, ring)?);
    cache().lock().expect("circuit cache").insert(key, c.clone());
    Ok(c)
}

/// Offline material for one batch: fresh client masks and, for the garbled
/// backend, one garbled circuit per invocation.
#[derive(Debug, Clone)]
pub struct PreparedFn {
    pub spec: SecureFnSpec,
    pub ring: RingParams,
    pub rows: usize,
    /// The client's share of the output.
    pub mask: FixedTensor,
    shape: CircuitShape,
    /// Present for the garbled backend only.
    circuit: Option<Arc<BoolCircuit>>,
    garbled: Vec<(GarbledCircuit, GarblerLabels)>,
}

impl PreparedFn {
    pub fn invocations(&self) -> usize {
        self.rows * self.per_row()
    }

    fn per_row(&self) -> usize {
        if self.spec.kind.is_row() {
            1
        } else {
            self.in_cols()
        }
    }

    fn in_cols(&self) -> usize {
        if self.spec.kind.is_row() {
            self.spec.row_len
        } else {
            self.mask.cols()
        }
    }

    pub fn cost(&self) -> GcCost {
        GcCost::for_shape(&self.shape, self.invocations())
    }

    pub fn shape(&self) -> &CircuitShape {
        &self.shape
    }
}

#[derive(Debug, Clone)]
pub struct SecureOutput {
    /// `F(x) - mask`, held by the server.
    pub server: FixedTensor,
    /// Number of invocations whose flag bit was set.
    pub flags: usize,
    pub cost: GcCost,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SecureEvaluator {
    pub backend: GcBackend,
    pub strict: bool,
}

impl SecureEvaluator {
    pub fn new(backend: GcBackend, strict: bool) -> Self {
        Self { backend, strict }
    }

    /// Client-side offline step for an input of `rows x cols`.
    pub fn prepare<R: RngCore + CryptoRng>(
        &self,
        spec: &SecureFnSpec,
        ring: &RingParams,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<PreparedFn> {
        let out_cols = if spec.kind.is_row() { spec.outputs() } else { cols };
        if spec.kind.is_row() && spec.row_len != cols {
            return Err(Error::Shape(format!(
                "row function of length {} on {cols} columns",
                spec.row_len
            )));
        }
        let shape = shape_for(spec, ring)?;
        let mask = FixedTensor::random(ring, rows, out_cols, rng);
        let invocations = if spec.kind.is_row() { rows } else { rows * cols };
        let (circuit, garbled) = match self.backend {
            GcBackend::Semantic => (None, Vec::new()),
            GcBackend::Garbled => {
                let c = circuit_for(spec, ring)?;
                let g = (0..invocations).map(|_| garble::garble(&c, rng)).collect();
                (Some(c), g)
            }
        };
        Ok(PreparedFn {
            spec: *spec,
            ring: *ring,
            rows,
            mask,
            shape,
            circuit,
            garbled,
        })
    }

    /// Online step: consumes the client's and server's input shares.
    pub fn evaluate<R: RngCore + CryptoRng>(
        &self,
        prep: &PreparedFn,
        client_share: &FixedTensor,
        server_share: &FixedTensor,
        rng: &mut R,
    ) -> Result<SecureOutput> {
        let shape = (prep.rows, prep.in_cols());
        if client_share.shape() != shape || server_share.shape() != shape {
            return Err(Error::Shape(format!(
                "secure input {:?} / {:?}, prepared for {shape:?}",
                client_share.shape(),
                server_share.shape()
            )));
        }
        let spec = &prep.spec;
        let ring = &prep.ring;
        let ib = spec.in_bits as usize;
        let mw = ring.modulus_bits as usize;
        let width = spec.row_len;
        let outs = spec.outputs();
        let mut server = vec![0u64; prep.mask.rows() * prep.mask.cols()];
        let mut flags = 0;
        let n = prep.invocations();
        let slice = |t: &'_ FixedTensor, inv: usize| -> Vec<u64> { t.data()[inv * width..(inv + 1) * width].to_vec() };
        // One batched transfer delivers the server's labels for every invocation.
        let server_labels: Vec<Label> = match self.backend {
            GcBackend::Semantic => Vec::new(),
            GcBackend::Garbled => {
                let mut pairs = Vec::new();
                let mut choices = Vec::new();
                for inv in 0..n {
                    pairs.extend(prep.garbled[inv].1.server_pairs());
                    choices.extend(slice(server_share, inv).iter().flat_map(|&s| to_bits(s, ib)));
                }
                ot::ot_transfer(&pairs, &choices, rng)?.0
            }
        };
        let per = prep.shape.server_inputs;
        for inv in 0..n {
            let cs = slice(client_share, inv);
            let ss = slice(server_share, inv);
            let rs = &prep.mask.data()[inv * outs..(inv + 1) * outs];
            let (vals, flag): (Vec<u64>, bool) = match self.backend {
                GcBackend::Semantic => {
                    let xs: Vec<u64> = cs.iter().zip(&ss).map(|(&c, &s)| c.wrapping_add(s)).collect();
                    let (ys, flag) = fixed::apply_plain(spec, &xs);
                    let vals = ys
                        .iter()
                        .zip(rs)
                        .map(|(&y, &r)| ring.from_signed(y).wrapping_sub(r) & ring.mask())
                        .collect();
                    (vals, flag)
                }
                GcBackend::Garbled => {
                    let (gc, labels) = &prep.garbled[inv];
                    let circuit = prep
                        .circuit
                        .as_deref()
                        .ok_or_else(|| Error::MissingMaterial("garbled circuit".into()))?;
                    let mut client_bits = Vec::with_capacity(prep.shape.client_inputs);
                    for &c in &cs {
                        client_bits.extend(to_bits(c, ib));
                    }
                    for &r in rs {
                        client_bits.extend(to_bits(r, mw));
                    }
                    let client_labels = labels.client_labels(&client_bits);
                    let sl = &server_labels[inv * per..(inv + 1) * per];
                    let bits = garble::gc_eval(circuit, gc, &client_labels, sl)?;
                    let vals = bits[..outs * mw].chunks(mw).map(from_bits).collect();
                    (vals, bits[outs * mw])
                }
            };
            server[inv * outs..(inv + 1) * outs].copy_from_slice(&vals);
            flags += flag as usize;
        }
        if self.strict && flags > 0 {
            return Err(Error::RangeViolation(format!(
                "{flags} {:?} invocations out of range",
                spec.kind
            )));
        }
        Ok(SecureOutput {
            server: FixedTensor::from_vec(prep.mask.rows(), prep.mask.cols(), server)?,
            flags,
            cost: prep.cost(),
        })
    }
}

/// Gate counts of the circuit for a function.
pub fn gate_counts(spec: &SecureFnSpec, ring: &RingParams) -> Result<GateCounts> {
    Ok(shape_for(spec, ring)?.counts)
}
