//! Command implementations behind the `privtx` binary.

pub mod config;

use std::fmt::Write as _;

use privtx_core::circuit::secure::GcBackend;
use privtx_core::model::reference_forward;
use privtx_core::packing::{plan_layout, LayoutPlan};
use privtx_core::protocol::report::{Equivalence, PhaseCosts};
use privtx_core::protocol::{audit, run, Mode, Report, Step};
use serde::Serialize;

pub use config::{load, ConfigError, Loaded, RunConfig};

/// Largest logit deviation accepted from the garbled backend, in fraction
/// bits below one: `2^-4`.
pub const GC_TOLERANCE_BITS: u32 = 4;

/// Runs one mode end to end and fills in the reference check and audit.
pub fn cmd_run(l: &Loaded, mode: Mode) -> privtx_core::Result<Report> {
    let ring = l.ring();
    let out = run(mode, &l.model, &l.weights, &l.tokens, &l.protocol, l.cfg.seed)?;
    let want = reference_forward(&l.model, &l.weights, &ring, &l.tokens, l.cfg.strict)?;
    let mut report = Report::build(&out, l.cfg.seed, &l.cfg.channel, &l.cfg.costs);
    report.equivalence = Some(Equivalence::compare(&out.logits()?, &want.logits, ring.modulus_bits));
    report.audit = Some(audit(&out.server_store, &want.trace));
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub config: String,
    pub reports: Vec<Report>,
}

/// All four modes on one config, one session per mode.
pub fn cmd_compare(l: &Loaded) -> privtx_core::Result<Comparison> {
    let reports = Mode::ALL
        .iter()
        .map(|&m| cmd_run(l, m))
        .collect::<privtx_core::Result<Vec<_>>>()?;
    Ok(Comparison {
        config: l.path.display().to_string(),
        reports,
    })
}

fn seconds(c: &PhaseCosts) -> String {
    format!("{:.4}", c.modeled_s)
}

/// Ablation table: one row per mode, offline/online columns per step.
pub fn ablation_table(c: &Comparison) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} (modeled seconds, offline/online)", c.config);
    let _ = write!(s, "{:<5}", "mode");
    for step in Step::ALL {
        let _ = write!(s, " {:>21}", step.name());
    }
    let _ = writeln!(s, " {:>21} {:>4} {:>13}", "Total", "rtt", "bytes");
    for r in &c.reports {
        let _ = write!(s, "{:<5}", r.mode.name());
        for row in &r.steps {
            let cell = format!("{}/{}", seconds(&row.costs.offline), seconds(&row.costs.online));
            let _ = write!(s, " {cell:>21}");
        }
        let total = format!("{}/{}", seconds(&r.total.offline), seconds(&r.total.online));
        let _ = writeln!(
            s,
            " {total:>21} {:>4} {:>13}",
            r.total.online.interactions, r.message_bytes
        );
    }
    let _ = writeln!(s, "\nonline HE operations");
    let _ = write!(s, "{:<5}", "mode");
    for step in Step::ALL {
        let _ = write!(s, " {:>10}", step.name());
    }
    let _ = writeln!(s);
    for r in &c.reports {
        let _ = write!(s, "{:<5}", r.mode.name());
        for row in &r.steps {
            let _ = write!(s, " {:>10}", row.costs.online.he.total());
        }
        let _ = writeln!(s);
    }
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub mode: Mode,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Reconstruction, audit, accounting and determinism checks for each mode.
pub fn cmd_verify(l: &Loaded, modes: &[Mode]) -> privtx_core::Result<Vec<Check>> {
    let ring = l.ring();
    let tol = match l.protocol.backend {
        GcBackend::Semantic => 0,
        GcBackend::Garbled => 1u64 << ring.frac_bits.saturating_sub(GC_TOLERANCE_BITS),
    };
    let mut checks = Vec::new();
    for &mode in modes {
        let r = cmd_run(l, mode)?;
        let mut push = |name, passed, detail: String| {
            checks.push(Check {
                mode,
                name,
                passed,
                detail,
            })
        };
        let eq = r.equivalence.expect("cmd_run compares");
        push(
            "reconstruction",
            eq.max_diff_ulp <= tol,
            format!("max deviation {} ulp, allowed {tol}", eq.max_diff_ulp),
        );
        let a = r.audit.as_ref().expect("cmd_run audits");
        push(
            "server audit",
            a.passed(),
            format!("{} server tensors, {} plaintext matches", a.tensors, a.matches.len()),
        );
        let mut sum = [PhaseCosts::default(), PhaseCosts::default()];
        for row in &r.steps {
            sum[0] += row.costs.offline;
            sum[1] += row.costs.online;
        }
        let close = |a: &PhaseCosts, b: &PhaseCosts| {
            PhaseCosts { modeled_s: 0.0, ..*a } == PhaseCosts { modeled_s: 0.0, ..*b }
                && (a.modeled_s - b.modeled_s).abs() <= 1e-9 * b.modeled_s.abs().max(1.0)
        };
        push(
            "totals",
            close(&sum[0], &r.total.offline) && close(&sum[1], &r.total.online),
            "total equals the sum of steps".into(),
        );
        let online_he: u64 = [Step::Embed, Step::Qkv, Step::Others]
            .iter()
            .map(|&s| r.step(s).online.he.total())
            .sum();
        let (ok, want) = match mode {
            Mode::Base => (online_he > 0, "> 0"),
            _ => (online_he == 0, "0"),
        };
        push(
            "online HE",
            ok,
            format!("{online_he} online HE ops in Embed/QKV/Others, want {want}"),
        );
        let want_prefix = match mode {
            Mode::Base => None,
            Mode::F | Mode::Fp => Some(4),
            Mode::Fpc => Some(1),
        };
        if let Some(w) = want_prefix {
            push(
                "prefix interactions",
                r.prefix_interactions == w,
                format!(
                    "{} online interactions in Embed/QKV/QxK, want {w}",
                    r.prefix_interactions
                ),
            );
        }
        let again = cmd_run(l, mode)?;
        push(
            "determinism",
            again.to_json() == r.to_json(),
            "second run gives the same report".into(),
        );
    }
    Ok(checks)
}

pub fn cmd_plan(n: usize, d: usize, slots: usize) -> privtx_core::Result<LayoutPlan> {
    plan_layout(n, d, slots)
}

pub fn plan_text(p: &LayoutPlan) -> String {
    let l = &p.layout;
    let strategy = match l.strategy {
        privtx_core::packing::Strategy::FeaturesFirst => "features_first",
        privtx_core::packing::Strategy::TokensFirst => "tokens_first",
    };
    format!(
        "{} x {} in {} slots: {strategy}, c={}, naive rotations {} (features_first {})\n",
        l.n, l.d, l.slots, p.ciphertexts, p.predicted_rotations, p.features_first_rotations
    )
}
