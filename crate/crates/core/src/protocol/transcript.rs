//! Message log, per-step operation tallies and the latency model.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::he::{OpCounts, Phase};
use crate::sharing::Party;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Step {
    Embed,
    #[serde(rename = "QKV")]
    Qkv,
    QxK,
    SoftMax,
    AttenValue,
    Others,
}

impl Step {
    pub const ALL: [Step; 6] = [
        Step::Embed,
        Step::Qkv,
        Step::QxK,
        Step::SoftMax,
        Step::AttenValue,
        Step::Others,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Step::Embed => "Embed",
            Step::Qkv => "QKV",
            Step::QxK => "QxK",
            Step::SoftMax => "SoftMax",
            Step::AttenValue => "AttenValue",
            Step::Others => "Others",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsgKind {
    Ciphertext,
    Share,
    GcMaterial,
    Ot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub seq: u64,
    pub sender: Party,
    pub phase: Phase,
    pub kind: MsgKind,
    pub bytes: u64,
    pub step: Step,
    pub block: usize,
}

/// Computation charged to one step and phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpTally {
    pub he: OpCounts,
    pub and_garbled: u64,
    pub and_evaluated: u64,
    pub ot_chunks: u64,
}

impl std::ops::AddAssign for OpTally {
    fn add_assign(&mut self, o: Self) {
        self.he += o.he;
        self.and_garbled += o.and_garbled;
        self.and_evaluated += o.and_evaluated;
        self.ot_chunks += o.ot_chunks;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    messages: Vec<Message>,
    ops: BTreeMap<(Step, Phase), OpTally>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn log(
        &mut self,
        sender: Party,
        phase: Phase,
        kind: MsgKind,
        bytes: u64,
        step: Step,
        block: usize,
    ) -> Result<()> {
        if bytes == 0 {
            return Err(Error::Protocol(format!("empty {kind:?} message in {}", step.name())));
        }
        let seq = self.messages.len() as u64;
        self.messages.push(Message {
            seq,
            sender,
            phase,
            kind,
            bytes,
            step,
            block,
        });
        Ok(())
    }

    pub fn charge(&mut self, step: Step, phase: Phase, t: OpTally) {
        *self.ops.entry((step, phase)).or_default() += t;
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn ops(&self, step: Step, phase: Phase) -> OpTally {
        self.ops.get(&(step, phase)).copied().unwrap_or_default()
    }

    pub fn bytes(&self, step: Step, phase: Phase) -> u64 {
        self.messages
            .iter()
            .filter(|m| m.step == step && m.phase == phase)
            .map(|m| m.bytes)
            .sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.messages.iter().map(|m| m.bytes).sum()
    }

    /// Round trips: each maximal run of consecutive server-to-client
    /// messages within one step and block counts once.
    pub fn interactions_where(&self, phase: Phase, keep: impl Fn(&Message) -> bool) -> u64 {
        let mut count = 0;
        let mut prev: Option<&Message> = None;
        for m in self.messages.iter().filter(|m| m.phase == phase) {
            let starts = m.sender == Party::Server
                && !matches!(prev, Some(p) if p.sender == Party::Server && p.step == m.step && p.block == m.block);
            if starts && keep(m) {
                count += 1;
            }
            prev = Some(m);
        }
        count
    }

    pub fn interactions(&self, step: Step, phase: Phase) -> u64 {
        self.interactions_where(phase, |m| m.step == step)
    }

    pub fn total_interactions(&self, phase: Phase) -> u64 {
        self.interactions_where(phase, |_| true)
    }

    /// Writes one JSON object per message.
    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        for m in &self.messages {
            serde_json::to_writer(&mut *out, m).map_err(|e| Error::Io(e.to_string()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelModel {
    pub delay_s: f64,
    pub bandwidth_bps: f64,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self {
            delay_s: 0.0023,
            bandwidth_bps: 1e8,
        }
    }
}

impl ChannelModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.delay_s >= 0.0
            && self.bandwidth_bps > 0.0
            && self.delay_s.is_finite()
            && self.bandwidth_bps.is_finite())
        {
            return Err(Error::Schema("channel needs delay >= 0 and bandwidth > 0".into()));
        }
        Ok(())
    }
}

/// Modeled seconds per operation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpCostTable {
    pub enc: f64,
    pub dec: f64,
    pub add: f64,
    pub add_plain: f64,
    pub mul_plain: f64,
    pub rotate: f64,
    pub and_garble: f64,
    pub and_eval: f64,
    pub ot_chunk: f64,
}

impl Default for OpCostTable {
    fn default() -> Self {
        Self {
            enc: 2e-3,
            dec: 1e-3,
            add: 2e-5,
            add_plain: 2e-5,
            mul_plain: 5e-4,
            rotate: 2e-3,
            and_garble: 1e-7,
            and_eval: 5e-8,
            ot_chunk: 1e-4,
        }
    }
}

impl OpCostTable {
    /// A table that charges nothing, leaving only communication.
    pub fn zero() -> Self {
        Self {
            enc: 0.0,
            dec: 0.0,
            add: 0.0,
            add_plain: 0.0,
            mul_plain: 0.0,
            rotate: 0.0,
            and_garble: 0.0,
            and_eval: 0.0,
            ot_chunk: 0.0,
        }
    }

    pub fn cost(&self, t: &OpTally) -> f64 {
        let h = &t.he;
        h.enc as f64 * self.enc
            + h.dec as f64 * self.dec
            + h.add as f64 * self.add
            + h.add_plain as f64 * self.add_plain
            + h.mul_plain as f64 * self.mul_plain
            + h.rotate as f64 * self.rotate
            + t.and_garbled as f64 * self.and_garble
            + t.and_evaluated as f64 * self.and_eval
            + t.ot_chunks as f64 * self.ot_chunk
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub offline_s: f64,
    pub online_s: f64,
}

/// Modeled seconds for one step and phase: computation, one delay per
/// interaction and serialization time for the bytes.
pub fn step_latency(t: &Transcript, step: Step, phase: Phase, ch: &ChannelModel, costs: &OpCostTable) -> f64 {
    costs.cost(&t.ops(step, phase))
        + t.interactions(step, phase) as f64 * ch.delay_s
        + t.bytes(step, phase) as f64 / ch.bandwidth_bps
}

pub fn estimate_latency(t: &Transcript, ch: &ChannelModel, costs: &OpCostTable) -> Latency {
    let phase = |p| {
        let ops: f64 = Step::ALL.iter().map(|&s| costs.cost(&t.ops(s, p))).sum();
        let bytes: u64 = t.messages().iter().filter(|m| m.phase == p).map(|m| m.bytes).sum();
        ops + t.total_interactions(p) as f64 * ch.delay_s + bytes as f64 / ch.bandwidth_bps
    };
    Latency {
        offline_s: phase(Phase::Offline),
        online_s: phase(Phase::Online),
    }
}
