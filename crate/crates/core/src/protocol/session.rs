//! One inference session between a client and a server, and the
//! sub-protocols both parties run inside it.
//!
//! Both state machines live in one process; every value that crosses between
//! them is logged as a message with its step, phase and modeled size.

use std::collections::HashSet;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::party::{Client, Server, Store, Tag};
use super::transcript::{MsgKind, OpTally, Step, Transcript};
use crate::circuit::fixed::SecureFnSpec;
use crate::circuit::secure::{GcBackend, PreparedFn, SecureEvaluator};
use crate::error::{Error, Result};
use crate::he::{keygen, Ciphertext, Evaluator, HeParams, OpCounts, Phase};
use crate::packing::{he_left_matmul, he_matmul, pack_plain, unpack, KernelMode, PackingLayout, Strategy};
use crate::ring::{FixedTensor, RingParams};
use crate::sharing::{gen_pair_triple, MatTriple, PackedCt, Party, TripleGuard};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub he: HeParams,
    pub strategy: Strategy,
    pub kernel: KernelMode,
    pub backend: GcBackend,
    pub strict: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            he: HeParams::default(),
            strategy: Strategy::FeaturesFirst,
            kernel: KernelMode::default(),
            backend: GcBackend::default(),
            strict: false,
        }
    }
}

pub struct Session {
    pub id: u64,
    pub cfg: SessionConfig,
    pub ev: Evaluator,
    pub client: Client,
    pub server: Server,
    pub transcript: Transcript,
    /// Range flags raised by secure function evaluations.
    pub flags: usize,
    step: Step,
    block: usize,
    snap: [OpCounts; 2],
    guard: TripleGuard,
    issued: HashSet<u64>,
    next_id: u64,
}

/// Client part of an HGS layer: its output shares `R W + Rs`.
#[derive(Debug, Clone)]
pub struct HgsClient {
    pub mask: FixedTensor,
    pub outs: Vec<FixedTensor>,
}

/// Server part of an HGS layer: the re-sharing masks `Rs`.
#[derive(Debug, Clone)]
pub struct HgsServer {
    pub session: u64,
    pub id: u64,
    pub rs: Vec<FixedTensor>,
}

/// Offline material for the fused embedding and score product.
#[derive(Debug, Clone)]
pub struct ChgsMaterial {
    pub session: u64,
    pub id: u64,
    /// `Enc(R)`, `n x v`.
    pub r_ct: PackedCt,
    /// `Enc(R^T)`, `v x n`.
    pub rt_ct: PackedCt,
    /// `Enc(R W_M R^T)`, `n x n`, with `W_M = E B E^T`.
    pub rwr_ct: PackedCt,
    /// Server's share of the scores.
    pub rs: FixedTensor,
}

fn ring_bytes(ring: &RingParams, t: &FixedTensor) -> u64 {
    (t.rows() * t.cols()) as u64 * ring.modulus_bits.div_ceil(8) as u64
}

impl Session {
    pub fn new(cfg: SessionConfig, seed: u64) -> Result<Self> {
        let ev = Evaluator::new(cfg.he)?;
        let mut crng = ChaCha20Rng::seed_from_u64(seed);
        let mut srng = ChaCha20Rng::seed_from_u64(seed);
        srng.set_stream(1);
        let keys = keygen(&cfg.he, &mut crng);
        let id = crng.next_u64();
        let snap = [ev.counts(Phase::Offline), ev.counts(Phase::Online)];
        Ok(Self {
            id,
            cfg,
            ev,
            client: Client {
                keys,
                rng: crng,
                store: Store::new(Party::Client),
            },
            server: Server {
                rng: srng,
                store: Store::new(Party::Server),
            },
            transcript: Transcript::new(),
            flags: 0,
            step: Step::Embed,
            block: 0,
            snap,
            guard: TripleGuard::default(),
            issued: HashSet::new(),
            next_id: 0,
        })
    }

    pub fn ring(&self) -> RingParams {
        self.cfg.he.ring
    }

    /// Charges HE work done since the last call to the current step and phase.
    pub fn flush(&mut self) {
        let p = self.ev.phase();
        let now = self.ev.counts(p);
        let delta = now.saturating_sub(&self.snap[p.index()]);
        self.snap[p.index()] = now;
        if delta.total() > 0 {
            self.transcript.charge(
                self.step,
                p,
                OpTally {
                    he: delta,
                    ..OpTally::default()
                },
            );
        }
    }

    pub fn at(&mut self, step: Step, block: usize) {
        self.flush();
        self.step = step;
        self.block = block;
    }

    pub fn set_phase(&mut self, p: Phase) {
        self.flush();
        self.ev.set_phase(p);
    }

    pub fn phase(&self) -> Phase {
        self.ev.phase()
    }

    pub fn step(&self) -> (Step, usize) {
        (self.step, self.block)
    }

    fn send(&mut self, sender: Party, kind: MsgKind, bytes: u64) -> Result<()> {
        let phase = self.ev.phase();
        self.transcript.log(sender, phase, kind, bytes, self.step, self.block)
    }

    fn send_cts(&mut self, sender: Party, count: usize) -> Result<()> {
        self.send(sender, MsgKind::Ciphertext, count as u64 * self.cfg.he.ciphertext_bytes)
    }

    fn send_share(&mut self, sender: Party, t: &FixedTensor) -> Result<()> {
        let b = ring_bytes(&self.ring(), t);
        self.send(sender, MsgKind::Share, b)
    }

    fn new_id(&mut self) -> u64 {
        self.next_id += 1;
        self.issued.insert(self.next_id);
        self.next_id
    }

    fn consume(&mut self, session: u64, id: u64) -> Result<()> {
        if session != self.id || !self.issued.contains(&id) {
            return Err(Error::MissingMaterial(format!(
                "material {id} not issued in session {:#x}",
                self.id
            )));
        }
        self.guard.consume(id)
    }

    fn encrypt(&mut self, x: &FixedTensor) -> Result<PackedCt> {
        PackedCt::encrypt(&self.ev, x, self.cfg.strategy, &self.client.keys)
    }

    fn decrypt(&self, cts: &[Ciphertext], layout: &PackingLayout) -> Result<FixedTensor> {
        unpack(&self.ev, cts, layout, &self.client.keys.secret)
    }

    fn add_cts(&self, a: &[Ciphertext], b: &[Ciphertext]) -> Result<Vec<Ciphertext>> {
        if a.len() != b.len() {
            return Err(Error::Layout(format!("adding {} and {} ciphertexts", a.len(), b.len())));
        }
        a.iter().zip(b).map(|(x, y)| self.ev.add(x, y)).collect()
    }

    fn add_plain_cts(&self, a: &[Ciphertext], layout: &PackingLayout, p: &FixedTensor) -> Result<Vec<Ciphertext>> {
        let plain = pack_plain(p, layout)?;
        a.iter().zip(&plain).map(|(c, v)| self.ev.add_plain(c, v)).collect()
    }

    /// Client sends `X - R` for a mask fixed offline. Returns the server share.
    pub fn share_input(&mut self, x: &FixedTensor, mask: &FixedTensor) -> Result<FixedTensor> {
        self.set_phase(Phase::Online);
        let masked = x.sub(mask)?.reduced(&self.ring());
        self.send_share(Party::Client, &masked)?;
        Ok(masked)
    }

    /// Server sends its share of an output to the client.
    pub fn reveal(&mut self, server_share: &FixedTensor) -> Result<()> {
        self.set_phase(Phase::Online);
        self.send_share(Party::Server, server_share)
    }

    /// Offline half of HGS for the layers `ws` applied to one input whose
    /// client share is `mask`: the client sends `Enc(R)`, the server returns
    /// `Enc(R W + Rs)` for each `W`.
    pub fn hgs_offline(&mut self, mask: &FixedTensor, ws: &[&FixedTensor]) -> Result<(HgsClient, HgsServer)> {
        self.set_phase(Phase::Offline);
        let r = self.encrypt(mask)?;
        self.send_cts(Party::Client, r.count())?;
        let mut outs = Vec::with_capacity(ws.len());
        let mut rs = Vec::with_capacity(ws.len());
        for w in ws {
            let (cts, lay) = he_matmul(&self.ev, &r.cts, &r.layout, w, self.cfg.kernel)?;
            let mask_s = FixedTensor::random(&self.ring(), lay.n, lay.d, &mut self.server.rng);
            let cts = self.add_plain_cts(&cts, &lay, &mask_s)?;
            self.send_cts(Party::Server, cts.len())?;
            outs.push(self.decrypt(&cts, &lay)?);
            rs.push(mask_s);
        }
        let id = self.new_id();
        Ok((
            HgsClient {
                mask: mask.clone(),
                outs,
            },
            HgsServer {
                session: self.id,
                id,
                rs,
            },
        ))
    }

    /// Online half of HGS: the server computes `(X - R) W - Rs` locally.
    pub fn run_hgs_layer(
        &mut self,
        ws: &[&FixedTensor],
        masked_input: &FixedTensor,
        m: &HgsServer,
    ) -> Result<Vec<FixedTensor>> {
        self.set_phase(Phase::Online);
        self.consume(m.session, m.id)?;
        if ws.len() != m.rs.len() {
            return Err(Error::MissingMaterial(format!(
                "{} layers, material for {}",
                ws.len(),
                m.rs.len()
            )));
        }
        ws.iter()
            .zip(&m.rs)
            .map(|(w, rs)| masked_input.mat_mul(w)?.sub(rs))
            .collect()
    }

    /// Linear layers evaluated with online HE: the client sends `Enc(c)`, the
    /// server returns `Enc(c W + s W - Rs)`. Returns `(client, server)` shares.
    pub fn he_linear_online(
        &mut self,
        client_share: &FixedTensor,
        server_share: &FixedTensor,
        ws: &[&FixedTensor],
    ) -> Result<Vec<(FixedTensor, FixedTensor)>> {
        self.set_phase(Phase::Online);
        let c = self.encrypt(client_share)?;
        self.send_cts(Party::Client, c.count())?;
        let mut out = Vec::with_capacity(ws.len());
        for w in ws {
            let (cts, lay) = he_matmul(&self.ev, &c.cts, &c.layout, w, self.cfg.kernel)?;
            let rs = FixedTensor::random(&self.ring(), lay.n, lay.d, &mut self.server.rng);
            let local = server_share.mat_mul(w)?.sub(&rs)?;
            let cts = self.add_plain_cts(&cts, &lay, &local)?;
            self.send_cts(Party::Server, cts.len())?;
            out.push((self.decrypt(&cts, &lay)?, rs));
        }
        Ok(out)
    }

    /// Offline triple for `U V` where the client's shares of `U` and `V`
    /// are `left` and `right`.
    pub fn fhgs_offline(&mut self, left: FixedTensor, right: FixedTensor) -> Result<MatTriple> {
        self.set_phase(Phase::Offline);
        let id = self.new_id();
        let t = gen_pair_triple(
            &self.ev,
            &self.client.keys,
            id,
            left,
            right,
            self.cfg.strategy,
            &mut self.server.rng,
        )?;
        let n = t.left_ct.count() + t.right_ct.count() + t.product_ct.count();
        self.send_cts(Party::Client, n)?;
        Ok(t)
    }

    /// Online share-by-share product from a triple. `u_s` and `v_s` are the
    /// server's shares. Returns `(client, server)` shares of `U V`.
    pub fn fhgs_online(
        &mut self,
        t: &MatTriple,
        u_s: &FixedTensor,
        v_s: &FixedTensor,
    ) -> Result<(FixedTensor, FixedTensor)> {
        self.set_phase(Phase::Online);
        self.consume(self.id, t.id)?;
        if u_s.shape() != t.left.shape() || v_s.shape() != t.right.shape() {
            return Err(Error::Shape(format!(
                "triple for {:?} x {:?}, shares {:?} x {:?}",
                t.left.shape(),
                t.right.shape(),
                u_s.shape(),
                v_s.shape()
            )));
        }
        let kernel = self.cfg.kernel;
        let tmp1 = u_s.mat_mul(v_s)?;
        let (tmp2, lay) = he_matmul(&self.ev, &t.left_ct.cts, &t.left_ct.layout, v_s, kernel)?;
        let (tmp3, _) = he_left_matmul(&self.ev, u_s, &t.right_ct.cts, &t.right_ct.layout, kernel)?;
        let acc = self.add_cts(&tmp2, &tmp3)?;
        let acc = self.add_cts(&acc, &t.product_ct.cts)?;
        let acc = self.add_plain_cts(&acc, &lay, &tmp1.sub(&t.rs_next)?)?;
        self.send_cts(Party::Server, acc.len())?;
        let client = self.decrypt(&acc, &lay)?;
        Ok((client, t.rs_next.clone()))
    }

    /// Scores `Q K^T` from a triple made by `fhgs_offline(q_c, k_c^T)`, where
    /// the server holds `q_s = Q - q_c` and `k_s = K - k_c`.
    pub fn run_fhgs_qk(
        &mut self,
        t: &MatTriple,
        q_s: &FixedTensor,
        k_s: &FixedTensor,
    ) -> Result<(FixedTensor, FixedTensor)> {
        self.fhgs_online(t, q_s, &k_s.transpose())
    }

    /// `A V` from a triple made by `fhgs_offline(a_c, v_c)`.
    pub fn run_attention_value(
        &mut self,
        t: &MatTriple,
        a_s: &FixedTensor,
        v_s: &FixedTensor,
    ) -> Result<(FixedTensor, FixedTensor)> {
        self.fhgs_online(t, a_s, v_s)
    }

    /// Offline material for the fused product: the client's input mask `R`,
    /// the embedding `E` and the combined score weight `B`.
    ///
    /// Forming `Enc(R W_M R^T)` costs one extra offline round trip.
    pub fn chgs_offline(&mut self, mask: &FixedTensor, e: &FixedTensor, b: &FixedTensor) -> Result<ChgsMaterial> {
        self.set_phase(Phase::Offline);
        let ring = self.ring();
        let kernel = self.cfg.kernel;
        let r_ct = self.encrypt(mask)?;
        let rt_ct = self.encrypt(&mask.transpose())?;
        self.send_cts(Party::Client, r_ct.count() + rt_ct.count())?;
        let w_m = e.mat_mul(b)?.mat_mul(&e.transpose())?;
        let (rw, lay) = he_matmul(&self.ev, &r_ct.cts, &r_ct.layout, &w_m, kernel)?;
        let blind = FixedTensor::random(&ring, lay.n, lay.d, &mut self.server.rng);
        let rw = self.add_plain_cts(&rw, &lay, &blind)?;
        self.send_cts(Party::Server, rw.len())?;
        let t = self.decrypt(&rw, &lay)?;
        let trt = self.encrypt(&t.mat_mul(&mask.transpose())?)?;
        self.send_cts(Party::Client, trt.count())?;
        let (corr, _) = he_left_matmul(&self.ev, &blind.neg(), &rt_ct.cts, &rt_ct.layout, kernel)?;
        let rwr = self.add_cts(&trt.cts, &corr)?;
        let rs = FixedTensor::random(&ring, mask.rows(), mask.rows(), &mut self.server.rng);
        let id = self.new_id();
        Ok(ChgsMaterial {
            session: self.id,
            id,
            r_ct,
            rt_ct,
            rwr_ct: PackedCt {
                cts: rwr,
                layout: trt.layout,
            },
            rs,
        })
    }

    /// Online fused product. With `P = X E + lambda` and the server holding
    /// `X - R`, returns `(client, server)` shares of `P B P^T` after one
    /// server message.
    pub fn run_chgs_block(
        &mut self,
        m: &ChgsMaterial,
        masked_input: &FixedTensor,
        e: &FixedTensor,
        lambda: &FixedTensor,
        b: &FixedTensor,
    ) -> Result<(FixedTensor, FixedTensor)> {
        self.set_phase(Phase::Online);
        self.consume(m.session, m.id)?;
        let kernel = self.cfg.kernel;
        let p_s = masked_input.mat_mul(e)?.add(lambda)?;
        let p_b = p_s.mat_mul(b)?;
        let tmp1 = p_b.mat_mul(&p_s.transpose())?;
        let left = p_b.mat_mul(&e.transpose())?;
        let right = e.mat_mul(b)?.mat_mul(&p_s.transpose())?;
        let (tmp2, lay) = he_left_matmul(&self.ev, &left, &m.rt_ct.cts, &m.rt_ct.layout, kernel)?;
        let (tmp3, _) = he_matmul(&self.ev, &m.r_ct.cts, &m.r_ct.layout, &right, kernel)?;
        let acc = self.add_cts(&tmp2, &tmp3)?;
        let acc = self.add_cts(&acc, &m.rwr_ct.cts)?;
        let acc = self.add_plain_cts(&acc, &lay, &tmp1.sub(&m.rs)?)?;
        self.server.store.put("chgs.ps", Tag::MaskedValue, p_s)?;
        self.send_cts(Party::Server, acc.len())?;
        let client = self.decrypt(&acc, &lay)?;
        Ok((client, m.rs.clone()))
    }

    /// Client-side garbling for a batch of `rows x cols` inputs. The returned
    /// mask is the client's share of the output.
    pub fn gc_prepare(&mut self, spec: &SecureFnSpec, rows: usize, cols: usize) -> Result<PreparedFn> {
        self.set_phase(Phase::Offline);
        let se = SecureEvaluator::new(self.cfg.backend, self.cfg.strict);
        let prep = se.prepare(spec, &self.ring(), rows, cols, &mut self.client.rng)?;
        let c = prep.cost();
        self.transcript.charge(
            self.step,
            Phase::Offline,
            OpTally {
                and_garbled: c.and_gates,
                ..OpTally::default()
            },
        );
        Ok(prep)
    }

    /// Online secure evaluation. Returns the server's share of the output.
    pub fn gc_eval(
        &mut self,
        prep: &PreparedFn,
        client_share: &FixedTensor,
        server_share: &FixedTensor,
    ) -> Result<FixedTensor> {
        self.set_phase(Phase::Online);
        let se = SecureEvaluator::new(self.cfg.backend, self.cfg.strict);
        let out = se.evaluate(prep, client_share, server_share, &mut self.client.rng)?;
        let c = out.cost;
        let setup = 32.min(c.ot_sender_bytes);
        self.send(Party::Client, MsgKind::GcMaterial, c.table_bytes + c.label_bytes)?;
        self.send(Party::Client, MsgKind::Ot, setup)?;
        self.send(Party::Server, MsgKind::Ot, c.ot_receiver_bytes)?;
        self.send(Party::Client, MsgKind::Ot, c.ot_sender_bytes - setup)?;
        self.transcript.charge(
            self.step,
            Phase::Online,
            OpTally {
                and_evaluated: c.and_gates,
                ot_chunks: c.ot_receiver_bytes / 32,
                ..OpTally::default()
            },
        );
        self.flags += out.flags;
        Ok(out.server)
    }
}
