//! Cost report for one run: per-step operation counts, traffic, round trips
//! and modeled seconds, plus the check against the reference.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::party::AuditReport;
use super::transcript::{step_latency, ChannelModel, OpCostTable, Step, Transcript};
use super::{Mode, RunOutput};
use crate::he::{OpCounts, Phase};
use crate::packing::Strategy;
use crate::ring::FixedTensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseCosts {
    pub he: OpCounts,
    pub and_garbled: u64,
    pub and_evaluated: u64,
    pub ot_chunks: u64,
    pub messages: u64,
    pub bytes: u64,
    pub interactions: u64,
    /// Modeled, not measured.
    pub modeled_s: f64,
}

impl std::ops::AddAssign for PhaseCosts {
    fn add_assign(&mut self, o: Self) {
        self.he += o.he;
        self.and_garbled += o.and_garbled;
        self.and_evaluated += o.and_evaluated;
        self.ot_chunks += o.ot_chunks;
        self.messages += o.messages;
        self.bytes += o.bytes;
        self.interactions += o.interactions;
        self.modeled_s += o.modeled_s;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepCosts {
    pub offline: PhaseCosts,
    pub online: PhaseCosts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: Step,
    #[serde(flatten)]
    pub costs: StepCosts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Equivalence {
    pub exact: bool,
    /// Largest absolute difference in units of the last fractional bit.
    pub max_diff_ulp: u64,
}

impl Equivalence {
    pub fn compare(got: &FixedTensor, want: &FixedTensor, modulus_bits: u32) -> Self {
        let max = if got.shape() != want.shape() {
            u64::MAX
        } else {
            got.data()
                .iter()
                .zip(want.data())
                .map(|(&a, &b)| {
                    let d = a.wrapping_sub(b);
                    let d = if modulus_bits < 64 {
                        d & ((1u64 << modulus_bits) - 1)
                    } else {
                        d
                    };
                    let neg = if modulus_bits < 64 {
                        (1u64 << modulus_bits).wrapping_sub(d)
                    } else {
                        d.wrapping_neg()
                    };
                    d.min(neg)
                })
                .max()
                .unwrap_or(0)
        };
        Self {
            exact: max == 0,
            max_diff_ulp: max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub mode: Mode,
    pub strategy: Strategy,
    pub seed: u64,
    pub steps: Vec<StepRow>,
    pub total: StepCosts,
    /// Online round trips of Embed, QKV and QxK in the first block.
    pub prefix_interactions: u64,
    pub message_bytes: u64,
    pub flags: usize,
    pub noise_high_water: u64,
    pub audit: Option<AuditReport>,
    pub equivalence: Option<Equivalence>,
}

fn phase_costs(t: &Transcript, step: Step, phase: Phase, ch: &ChannelModel, costs: &OpCostTable) -> PhaseCosts {
    let ops = t.ops(step, phase);
    PhaseCosts {
        he: ops.he,
        and_garbled: ops.and_garbled,
        and_evaluated: ops.and_evaluated,
        ot_chunks: ops.ot_chunks,
        messages: t
            .messages()
            .iter()
            .filter(|m| m.step == step && m.phase == phase)
            .count() as u64,
        bytes: t.bytes(step, phase),
        interactions: t.interactions(step, phase),
        modeled_s: step_latency(t, step, phase, ch, costs),
    }
}

impl Report {
    pub fn build(out: &RunOutput, seed: u64, ch: &ChannelModel, costs: &OpCostTable) -> Self {
        let t = &out.transcript;
        let mut total = StepCosts::default();
        let steps = Step::ALL
            .iter()
            .map(|&step| {
                let c = StepCosts {
                    offline: phase_costs(t, step, Phase::Offline, ch, costs),
                    online: phase_costs(t, step, Phase::Online, ch, costs),
                };
                total.offline += c.offline;
                total.online += c.online;
                StepRow { step, costs: c }
            })
            .collect();
        let prefix_interactions = t.interactions_where(Phase::Online, |m| {
            m.block == 0 && matches!(m.step, Step::Embed | Step::Qkv | Step::QxK)
        });
        Self {
            mode: out.mode,
            strategy: out.strategy,
            seed,
            steps,
            total,
            prefix_interactions,
            message_bytes: t.total_bytes(),
            flags: out.flags,
            noise_high_water: out.noise_high_water,
            audit: None,
            equivalence: None,
        }
    }

    pub fn step(&self, s: Step) -> &StepCosts {
        &self
            .steps
            .iter()
            .find(|r| r.step == s)
            .expect("every step has a row")
            .costs
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table, one row per step and phase.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "mode {} ({:?}), seed {}; seconds are modeled",
            self.mode.name(),
            self.strategy,
            self.seed
        );
        let _ = writeln!(
            s,
            "{:<11} {:<7} {:>9} {:>9} {:>11} {:>5} {:>13} {:>10}",
            "step", "phase", "he_ops", "rotate", "and_gates", "rtt", "bytes", "seconds"
        );
        let rows = self
            .steps
            .iter()
            .map(|r| (r.step.name(), &r.costs))
            .chain([("Total", &self.total)]);
        for (name, c) in rows {
            for (ph, p) in [("offline", &c.offline), ("online", &c.online)] {
                let _ = writeln!(
                    s,
                    "{:<11} {:<7} {:>9} {:>9} {:>11} {:>5} {:>13} {:>10.4}",
                    name,
                    ph,
                    p.he.total(),
                    p.he.rotate,
                    p.and_garbled.max(p.and_evaluated),
                    p.interactions,
                    p.bytes,
                    p.modeled_s
                );
            }
        }
        let _ = writeln!(
            s,
            "prefix round trips (Embed+QKV+QxK, block 0): {}",
            self.prefix_interactions
        );
        let _ = writeln!(s, "message bytes: {}", self.message_bytes);
        if let Some(e) = &self.equivalence {
            let _ = writeln!(
                s,
                "reference: {}",
                if e.exact {
                    "exact".to_string()
                } else {
                    format!("differs by up to {} ulp", e.max_diff_ulp)
                }
            );
        }
        if let Some(a) = &self.audit {
            let _ = writeln!(s, "server audit: {}", if a.passed() { "pass" } else { "FAIL" });
        }
        s
    }
}
