//! Two-party inference protocols over a simulated channel.
//!
//! Four modes compute the same fixed-point function:
//! - `base`: every linear layer and every share product uses online HE or
//!   garbled circuits.
//! - `f`: plaintext-weight layers use offline HE material (HGS) and share
//!   products use HE-generated matrix triples (FHGS).
//! - `fp`: `f` with tokens-first packing.
//! - `fpc`: `fp` with the embedding, value projection and score product
//!   fused so the score product costs one online round trip (CHGS).

pub mod engine;
pub mod party;
pub mod report;
pub mod session;
pub mod transcript;

use serde::{Deserialize, Serialize};

use crate::circuit::secure::GcBackend;
use crate::error::{Error, Result};
use crate::he::HeParams;
use crate::model::{ModelConfig, ModelWeights};
use crate::packing::{KernelMode, Strategy};
use crate::ring::{FixedTensor, RingParams};
use crate::sharing::{Party, ShareMat};

pub use engine::{build_plan, input_tensor, server_weights, Engine, Stage};
pub use party::{audit, AuditReport, Store, Tag};
pub use report::Report;
pub use session::{ChgsMaterial, HgsClient, HgsServer, Session, SessionConfig};
pub use transcript::{
    estimate_latency, ChannelModel, Latency, Message, MsgKind, OpCostTable, OpTally, Step, Transcript,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Base,
    F,
    Fp,
    Fpc,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Base, Mode::F, Mode::Fp, Mode::Fpc];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Base => "base",
            Mode::F => "f",
            Mode::Fp => "fp",
            Mode::Fpc => "fpc",
        }
    }

    pub fn default_strategy(self) -> Strategy {
        match self {
            Mode::Base | Mode::F => Strategy::FeaturesFirst,
            Mode::Fp | Mode::Fpc => Strategy::TokensFirst,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Schema(format!("unknown mode {s:?}, expected base, f, fp or fpc")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ProtocolConfig {
    pub he: HeParams,
    /// Overrides the mode's packing strategy.
    pub packing: Option<Strategy>,
    pub kernel: KernelMode,
    pub backend: GcBackend,
    pub strict: bool,
}

impl ProtocolConfig {
    pub fn session(&self, mode: Mode) -> SessionConfig {
        SessionConfig {
            he: self.he,
            strategy: self.packing.unwrap_or(mode.default_strategy()),
            kernel: self.kernel,
            backend: self.backend,
            strict: self.strict,
        }
    }
}

pub struct RunOutput {
    pub mode: Mode,
    pub client: ShareMat,
    pub server: ShareMat,
    pub transcript: Transcript,
    /// Range flags raised by secure function evaluations.
    pub flags: usize,
    pub server_store: Store,
    pub noise_high_water: u64,
    pub strategy: Strategy,
    pub ring: RingParams,
}

impl RunOutput {
    pub fn logits(&self) -> Result<FixedTensor> {
        Ok(crate::sharing::reconstruct(&self.client, &self.server)?.reduced(&self.ring))
    }
}

/// Runs one inference: offline material for the whole model, then the
/// online pass on the one-hot encoding of `tokens`.
pub fn run(
    mode: Mode,
    model: &ModelConfig,
    weights: &ModelWeights,
    tokens: &[usize],
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<RunOutput> {
    let ring = cfg.he.ring;
    weights.validate(model, &ring)?;
    let x = input_tensor(model, tokens)?;
    let plan = build_plan(mode, model, &ring)?;
    let wts = server_weights(model, weights, &ring)?;
    let scfg = cfg.session(mode);
    let session = Session::new(scfg, seed)?;
    let mut eng = Engine::new(session, &plan, wts, mode, model.d_emb)?;
    eng.offline(x.shape())?;
    let (c, s) = eng.online(&x)?;
    let sess = eng.session;
    Ok(RunOutput {
        mode,
        client: ShareMat {
            owner: Party::Client,
            value: c,
            of: crate::model::names::LOGITS.to_string(),
        },
        server: ShareMat {
            owner: Party::Server,
            value: s,
            of: crate::model::names::LOGITS.to_string(),
        },
        transcript: sess.transcript,
        flags: sess.flags,
        server_store: sess.server.store,
        noise_high_water: sess.ev.noise_high_water(),
        strategy: scfg.strategy,
        ring,
    })
}

pub fn run_base(
    model: &ModelConfig,
    w: &ModelWeights,
    tokens: &[usize],
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<RunOutput> {
    run(Mode::Base, model, w, tokens, cfg, seed)
}

pub fn run_f(
    model: &ModelConfig,
    w: &ModelWeights,
    tokens: &[usize],
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<RunOutput> {
    run(Mode::F, model, w, tokens, cfg, seed)
}

pub fn run_fp(
    model: &ModelConfig,
    w: &ModelWeights,
    tokens: &[usize],
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<RunOutput> {
    run(Mode::Fp, model, w, tokens, cfg, seed)
}

pub fn run_fpc(
    model: &ModelConfig,
    w: &ModelWeights,
    tokens: &[usize],
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<RunOutput> {
    run(Mode::Fpc, model, w, tokens, cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::he::Phase;
    use crate::model::reference_forward;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn setup(
        n_blocks: usize,
        d: usize,
        heads: usize,
        n: usize,
    ) -> (ModelConfig, ModelWeights, Vec<usize>, ProtocolConfig) {
        let cfg = ModelConfig::toy(n_blocks, d, heads, n);
        let pc = ProtocolConfig::default();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let w = ModelWeights::random(&cfg, &pc.he.ring, &mut rng).unwrap();
        let tokens = (0..n).map(|t| (7 * t + 3) % cfg.vocab).collect();
        (cfg, w, tokens, pc)
    }

    #[test]
    fn all_modes_match_reference() {
        let (cfg, w, tokens, pc) = setup(2, 8, 2, 4);
        let want = reference_forward(&cfg, &w, &pc.he.ring, &tokens, false).unwrap();
        for mode in Mode::ALL {
            let out = run(mode, &cfg, &w, &tokens, &pc, 1).unwrap();
            assert_eq!(out.logits().unwrap(), want.logits, "{mode:?}");
            let a = audit(&out.server_store, &want.trace);
            assert!(a.passed(), "{mode:?}: {:?}", a.matches);
        }
    }

    #[test]
    fn prefix_round_trips() {
        let (cfg, w, tokens, pc) = setup(1, 8, 2, 4);
        let count = |mode| {
            let out = run(mode, &cfg, &w, &tokens, &pc, 2).unwrap();
            out.transcript.interactions_where(Phase::Online, |m| {
                m.block == 0 && matches!(m.step, Step::Embed | Step::Qkv | Step::QxK)
            })
        };
        assert_eq!(count(Mode::F), 4);
        assert_eq!(count(Mode::Fp), 4);
        assert_eq!(count(Mode::Fpc), 1);
    }

    #[test]
    fn online_he_only_in_base_linear_steps() {
        let (cfg, w, tokens, pc) = setup(1, 8, 1, 4);
        for mode in Mode::ALL {
            let out = run(mode, &cfg, &w, &tokens, &pc, 3).unwrap();
            for step in [Step::Embed, Step::Qkv, Step::Others] {
                let ops = out.transcript.ops(step, Phase::Online).he.total();
                if mode == Mode::Base {
                    assert!(ops > 0, "{mode:?} {step:?}");
                } else {
                    assert_eq!(ops, 0, "{mode:?} {step:?}");
                }
            }
        }
    }

    #[test]
    fn same_seed_same_transcript() {
        let (cfg, w, tokens, pc) = setup(1, 8, 1, 2);
        let a = run(Mode::Fpc, &cfg, &w, &tokens, &pc, 9).unwrap();
        let b = run(Mode::Fpc, &cfg, &w, &tokens, &pc, 9).unwrap();
        assert_eq!(a.transcript, b.transcript);
        assert_eq!(a.client.value, b.client.value);
    }
}
