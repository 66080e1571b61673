//! Run configuration files.
//!
//! ```toml
//! seed = 7
//! mode = "fpc"
//! tokens = [3, 10, 17, 24]
//!
//! [model]
//! n_blocks = 1
//! d_emb = 8
//! heads = 2
//! n_tokens = 4
//! vocab = 32
//! d_ff = 16
//! d_out = 4
//! ```

use std::path::{Path, PathBuf};

use privtx_core::circuit::secure::GcBackend;
use privtx_core::he::{HeParams, NoiseModel};
use privtx_core::model::{load_weights, ModelConfig, ModelWeights};
use privtx_core::packing::{KernelMode, Strategy};
use privtx_core::protocol::{ChannelModel, Mode, OpCostTable, ProtocolConfig};
use privtx_core::RingParams;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: cannot read: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}:{line}: field `{field}`: {message}", line = line.map_or("?".to_string(), |l| l.to_string()))]
    Field {
        path: PathBuf,
        line: Option<usize>,
        field: String,
        message: String,
    },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeSection {
    pub slots: Option<usize>,
    pub ciphertext_bytes: Option<u64>,
    pub modulus_bits: Option<u32>,
    pub value_bits: Option<u32>,
    pub frac_bits: Option<u32>,
    pub noise_budget: Option<u64>,
}

impl HeSection {
    fn has_ring(&self) -> bool {
        self.modulus_bits.is_some() || self.value_bits.is_some() || self.frac_bits.is_some()
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the parties' randomness; also the weight seed unless
    /// `weights_seed` is given.
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    pub packing: Option<Strategy>,
    #[serde(default)]
    pub kernel: KernelMode,
    #[serde(default)]
    pub backend: GcBackend,
    #[serde(default)]
    pub strict: bool,
    pub tokens: Option<Vec<usize>>,
    pub report: Option<PathBuf>,
    pub model: Option<ModelConfig>,
    pub model_path: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub weights_seed: Option<u64>,
    #[serde(default)]
    pub he: HeSection,
    #[serde(default)]
    pub channel: ChannelModel,
    #[serde(default)]
    pub costs: OpCostTable,
}

fn default_mode() -> Mode {
    Mode::Fpc
}

/// A parsed config with its model, weights and tokens resolved.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub path: PathBuf,
    pub cfg: RunConfig,
    pub model: ModelConfig,
    pub weights: ModelWeights,
    pub tokens: Vec<usize>,
    pub protocol: ProtocolConfig,
}

impl Loaded {
    pub fn ring(&self) -> RingParams {
        self.protocol.he.ring
    }
}

/// Line of the first `key = ...` assignment or `[key]` header in `src`.
fn line_of(src: &str, key: &str) -> Option<usize> {
    let header = format!("[{key}]");
    src.lines()
        .position(|l| {
            let t = l.trim_start();
            t.starts_with(&header)
                || t.strip_prefix(key)
                    .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map(|i| i + 1)
}

fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path, src: &str) -> Result<T, ConfigError> {
    toml::from_str(src).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        message: e.to_string().trim_end().to_string(),
    })
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })
}

pub fn parse(path: &Path, src: &str) -> Result<RunConfig, ConfigError> {
    parse_toml(path, src)
}

pub fn load(path: &Path) -> Result<Loaded, ConfigError> {
    let src = read(path)?;
    let cfg = parse(path, &src)?;
    resolve(path, &src, cfg)
}

/// Resolves file references relative to the config's directory and checks
/// every field against the model.
pub fn resolve(path: &Path, src: &str, cfg: RunConfig) -> Result<Loaded, ConfigError> {
    let field = |name: &str, message: String| ConfigError::Field {
        path: path.to_path_buf(),
        line: line_of(src, name.rsplit('.').next().unwrap_or(name)),
        field: name.to_string(),
        message,
    };
    let base = path.parent().unwrap_or(Path::new("."));

    let mut model = cfg.model;
    if let Some(p) = &cfg.model_path {
        if model.is_some() {
            return Err(field("model_path", "give either model_path or a [model] table".into()));
        }
        let p = base.join(p);
        let text = read(&p)?;
        model = Some(parse_toml(&p, &text)?);
    }

    let mut file_weights = None;
    if let Some(p) = &cfg.weights {
        let (wcfg, wring, w) = load_weights(&base.join(p)).map_err(|e| field("weights", e.to_string()))?;
        if let Some(m) = &model {
            if *m != wcfg {
                return Err(field("weights", "weight file was written for a different model".into()));
            }
        }
        model = Some(wcfg);
        file_weights = Some((wring, w));
    }
    let model = model.ok_or_else(|| field("model", "no model: give a [model] table, model_path or weights".into()))?;
    model.validate().map_err(|e| field("model", e.to_string()))?;

    let he = &cfg.he;
    let default_ring = file_weights.as_ref().map(|(r, _)| *r).unwrap_or_default();
    let ring = if he.has_ring() {
        RingParams::new(
            he.modulus_bits.unwrap_or(default_ring.modulus_bits),
            he.value_bits.unwrap_or(default_ring.value_bits),
            he.frac_bits.unwrap_or(default_ring.frac_bits),
        )
        .map_err(|e| field("he.modulus_bits", e.to_string()))?
    } else {
        default_ring
    };
    let mut params = HeParams {
        ring,
        ..HeParams::default()
    };
    if let Some(s) = he.slots {
        params.slots = s;
    }
    if let Some(b) = he.ciphertext_bytes {
        params.ciphertext_bytes = b;
    }
    if let Some(b) = he.noise_budget {
        params.noise = Some(NoiseModel {
            budget: b,
            ..NoiseModel::default()
        });
    }
    params.validate().map_err(|e| field("he.slots", e.to_string()))?;
    cfg.channel.validate().map_err(|e| field("channel", e.to_string()))?;

    let weights = match file_weights {
        Some((wring, w)) => {
            if wring != ring {
                return Err(field(
                    "he.modulus_bits",
                    "ring differs from the one the weights were quantized for".into(),
                ));
            }
            w
        }
        None => {
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.weights_seed.unwrap_or(cfg.seed));
            ModelWeights::random(&model, &ring, &mut rng).map_err(|e| field("model", e.to_string()))?
        }
    };

    let tokens = match &cfg.tokens {
        Some(t) => {
            if t.len() != model.n_tokens {
                return Err(field(
                    "tokens",
                    format!("{} tokens, model takes {}", t.len(), model.n_tokens),
                ));
            }
            if let Some(bad) = t.iter().find(|&&v| v >= model.vocab) {
                return Err(field(
                    "tokens",
                    format!("token {bad} outside vocabulary of {}", model.vocab),
                ));
            }
            t.clone()
        }
        None => default_tokens(&model),
    };

    let protocol = ProtocolConfig {
        he: params,
        packing: cfg.packing,
        kernel: cfg.kernel,
        backend: cfg.backend,
        strict: cfg.strict,
    };
    Ok(Loaded {
        path: path.to_path_buf(),
        cfg,
        model,
        weights,
        tokens,
        protocol,
    })
}

pub fn default_tokens(model: &ModelConfig) -> Vec<usize> {
    (0..model.n_tokens).map(|t| (7 * t + 3) % model.vocab).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"
seed = 3
mode = "f"

[model]
n_blocks = 1
d_emb = 8
heads = 2
n_tokens = 4
vocab = 32
d_ff = 16
d_out = 4
"#;

    fn load_str(src: &str) -> Result<Loaded, ConfigError> {
        let p = Path::new("t.toml");
        resolve(p, src, parse(p, src)?)
    }

    #[test]
    fn toy_loads() {
        let l = load_str(TOY).unwrap();
        assert_eq!(l.cfg.mode, Mode::F);
        assert_eq!(l.tokens, vec![3, 10, 17, 24]);
        assert_eq!(l.protocol.session(Mode::Fp).strategy, Strategy::TokensFirst);
    }

    #[test]
    fn unknown_field_names_line() {
        let e = load_str(&TOY.replace("mode = \"f\"", "mode = \"f\"\nbogus = 1"))
            .unwrap_err()
            .to_string();
        assert!(e.contains("unknown field `bogus`"), "{e}");
        assert!(e.contains("line 4"), "{e}");
        let e = load_str(&format!("{TOY}wide = 1\n")).unwrap_err().to_string();
        assert!(e.contains("unknown field `wide`") && e.contains("line 13"), "{e}");
    }

    #[test]
    fn missing_seed_rejected() {
        let e = load_str(&TOY.replace("seed = 3", "")).unwrap_err().to_string();
        assert!(e.contains("seed"), "{e}");
    }

    #[test]
    fn bad_value_names_field_and_line() {
        let e = load_str(&TOY.replace("heads = 2", "heads = 3"))
            .unwrap_err()
            .to_string();
        assert!(e.contains("t.toml:5: field `model`") && e.contains("divisible"), "{e}");
        let e = load_str(&TOY.replace("mode = \"f\"", "tokens = [1, 2]"))
            .unwrap_err()
            .to_string();
        assert!(e.contains("t.toml:3: field `tokens`"), "{e}");
    }
}
