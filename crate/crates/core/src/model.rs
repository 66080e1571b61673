//! Transformer configuration and weights, the fixed-point reference forward
//! pass every protocol mode must reproduce, and a float oracle.
//!
//! The reference works on folded weights: `E = W_E * delta`, and per head
//! `B_h = W_Q^h W_K^h^T` and `C_h = W_V^h W_O^h`, each truncated once. Scores
//! are `P B_h P^T * k` with `k = 1/sqrt(n)`, and the attention output is
//! `sum_h A_h (P C_h)`. Normalization follows each residual (post-norm).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::circuit::fixed::{apply_plain, FnKind, SecureFnSpec};
use crate::error::{Error, Result};
use crate::ring::{truncate, FixedTensor, RingParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

impl Activation {
    pub fn kind(self) -> FnKind {
        match self {
            Activation::Relu => FnKind::Relu,
            Activation::Gelu => FnKind::Gelu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub d_emb: usize,
    pub heads: usize,
    pub n_tokens: usize,
    pub vocab: usize,
    pub d_ff: usize,
    /// Width of the output head.
    pub d_out: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Scalar applied to the token embedding.
    #[serde(default = "one")]
    pub delta: f64,
}

fn one() -> f64 {
    1.0
}

impl ModelConfig {
    pub fn toy(n_blocks: usize, d_emb: usize, heads: usize, n_tokens: usize) -> Self {
        Self {
            n_blocks,
            d_emb,
            heads,
            n_tokens,
            vocab: 32,
            d_ff: 2 * d_emb,
            d_out: 4,
            activation: Activation::Relu,
            delta: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_blocks", self.n_blocks),
            ("d_emb", self.d_emb),
            ("heads", self.heads),
            ("n_tokens", self.n_tokens),
            ("vocab", self.vocab),
            ("d_ff", self.d_ff),
            ("d_out", self.d_out),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Schema(format!("{name} must be positive")));
            }
        }
        if !self.d_emb.is_multiple_of(self.heads) {
            return Err(Error::Schema(format!(
                "d_emb {} not divisible by heads {}",
                self.d_emb, self.heads
            )));
        }
        if !self.delta.is_finite() {
            return Err(Error::Schema("delta must be finite".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_emb / self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockWeights {
    pub w_q: FixedTensor,
    pub w_k: FixedTensor,
    pub w_v: FixedTensor,
    pub w_o: FixedTensor,
    pub w1: FixedTensor,
    pub w2: FixedTensor,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelWeights {
    pub w_e: FixedTensor,
    /// Positional bias, one row per token position.
    pub lambda: FixedTensor,
    pub blocks: Vec<BlockWeights>,
    pub w_out: FixedTensor,
}

fn uniform<R: Rng + ?Sized>(ring: &RingParams, rows: usize, cols: usize, a: f64, rng: &mut R) -> FixedTensor {
    let vals: Vec<i64> = (0..rows * cols)
        .map(|_| (rng.gen_range(-a..=a) * ring.scale()).round() as i64)
        .collect();
    FixedTensor::from_signed(ring, rows, cols, &vals).expect("sized")
}

impl ModelWeights {
    /// Random weights scaled so activations stay well inside the value range.
    pub fn random<R: Rng + ?Sized>(cfg: &ModelConfig, ring: &RingParams, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_emb;
        let a = 1.0 / (d as f64).sqrt();
        let blocks = (0..cfg.n_blocks)
            .map(|_| BlockWeights {
                w_q: uniform(ring, d, d, a, rng),
                w_k: uniform(ring, d, d, a, rng),
                w_v: uniform(ring, d, d, a, rng),
                w_o: uniform(ring, d, d, a, rng),
                w1: uniform(ring, d, cfg.d_ff, a, rng),
                w2: uniform(ring, cfg.d_ff, d, 1.0 / (cfg.d_ff as f64).sqrt(), rng),
            })
            .collect();
        Ok(Self {
            w_e: uniform(ring, cfg.vocab, d, 1.0, rng),
            lambda: uniform(ring, cfg.n_tokens, d, 0.25, rng),
            blocks,
            w_out: uniform(ring, d, cfg.d_out, a, rng),
        })
    }

    /// All weights set to zero.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_emb;
        let z = FixedTensor::zeros;
        Self {
            w_e: z(cfg.vocab, d),
            lambda: z(cfg.n_tokens, d),
            blocks: (0..cfg.n_blocks)
                .map(|_| BlockWeights {
                    w_q: z(d, d),
                    w_k: z(d, d),
                    w_v: z(d, d),
                    w_o: z(d, d),
                    w1: z(d, cfg.d_ff),
                    w2: z(cfg.d_ff, d),
                })
                .collect(),
            w_out: z(d, cfg.d_out),
        }
    }

    /// Named tensors in file order.
    pub fn tensors(&self) -> Vec<(String, &FixedTensor)> {
        let mut out = vec![("w_e".to_string(), &self.w_e), ("lambda".to_string(), &self.lambda)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in [
                ("w_q", &b.w_q),
                ("w_k", &b.w_k),
                ("w_v", &b.w_v),
                ("w_o", &b.w_o),
                ("w1", &b.w1),
                ("w2", &b.w2),
            ] {
                out.push((format!("block{i}.{n}"), t));
            }
        }
        out.push(("w_out".to_string(), &self.w_out));
        out
    }

    fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, (usize, usize))> {
        let d = cfg.d_emb;
        let mut out = vec![
            ("w_e".to_string(), (cfg.vocab, d)),
            ("lambda".to_string(), (cfg.n_tokens, d)),
        ];
        for i in 0..cfg.n_blocks {
            for (n, s) in [
                ("w_q", (d, d)),
                ("w_k", (d, d)),
                ("w_v", (d, d)),
                ("w_o", (d, d)),
                ("w1", (d, cfg.d_ff)),
                ("w2", (cfg.d_ff, d)),
            ] {
                out.push((format!("block{i}.{n}"), s));
            }
        }
        out.push(("w_out".to_string(), (d, cfg.d_out)));
        out
    }

    /// Checks shapes against the config and that every value is a logical word.
    pub fn validate(&self, cfg: &ModelConfig, ring: &RingParams) -> Result<()> {
        cfg.validate()?;
        if self.blocks.len() != cfg.n_blocks {
            return Err(Error::Shape(format!(
                "{} blocks, config has {}",
                self.blocks.len(),
                cfg.n_blocks
            )));
        }
        for ((name, t), (_, shape)) in self.tensors().into_iter().zip(Self::expected_shapes(cfg)) {
            if t.shape() != shape {
                return Err(Error::Shape(format!("{name} is {:?}, expected {shape:?}", t.shape())));
            }
            for v in t.to_signed(ring) {
                if v > ring.max_value() || v < ring.min_value() {
                    return Err(Error::Overflow {
                        value: v as f64 / ring.scale(),
                        bound: ring.real_bound(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Per-head folded weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadWeights {
    /// `W_Q^h W_K^h^T`, `d x d`.
    pub b: FixedTensor,
    /// `W_V^h W_O^h`, `d x d`.
    pub c: FixedTensor,
}

/// Weights as the server uses them in every protocol mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DerivedWeights {
    /// Embedding with the scalar folded in.
    pub e: FixedTensor,
    pub delta: u64,
    pub heads: Vec<Vec<HeadWeights>>,
    /// `1/sqrt(n)` at `frac_bits`.
    pub score_scale: u64,
}

/// Applies a fixed function to a tensor the way the secure evaluation does:
/// row functions per row, the rest per element.
pub fn apply_fn(spec: &SecureFnSpec, ring: &RingParams, x: &FixedTensor) -> Result<(FixedTensor, usize)> {
    let mut flags = 0;
    if spec.kind.is_row() {
        if x.cols() != spec.row_len {
            return Err(Error::Shape(format!(
                "row function of length {} on {} columns",
                spec.row_len,
                x.cols()
            )));
        }
        let mut out = Vec::with_capacity(x.rows() * spec.outputs());
        for r in 0..x.rows() {
            let (ys, f) = apply_plain(spec, x.row(r));
            flags += f as usize;
            out.extend(ys.iter().map(|&y| ring.from_signed(y)));
        }
        Ok((FixedTensor::from_vec(x.rows(), spec.outputs(), out)?, flags))
    } else {
        let out = x.map(|v| {
            let (ys, f) = apply_plain(spec, &[v]);
            flags += f as usize;
            ring.from_signed(ys[0])
        });
        Ok((out, flags))
    }
}

/// Derives the folded weights; every step is a plaintext server computation.
pub fn derive(cfg: &ModelConfig, w: &ModelWeights, ring: &RingParams) -> Result<DerivedWeights> {
    w.validate(cfg, ring)?;
    let (delta, _) = ring.encode_saturating(cfg.delta);
    let trunc = SecureFnSpec::new(FnKind::Truncate, ring, ring.frac_bits, 1);
    let (e, _) = apply_fn(&trunc, ring, &w.w_e.scale(delta))?;
    let dh = cfg.head_dim();
    let heads = w
        .blocks
        .iter()
        .map(|b| {
            (0..cfg.heads)
                .map(|h| {
                    let q = b.w_q.slice_cols(h * dh, dh);
                    let k = b.w_k.slice_cols(h * dh, dh);
                    let v = b.w_v.slice_cols(h * dh, dh);
                    let o = b.w_o.slice_rows(h * dh, dh);
                    Ok(HeadWeights {
                        b: truncate(&q.mat_mul(&k.transpose())?, ring).0,
                        c: truncate(&v.mat_mul(&o)?, ring).0,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let (score_scale, _) = ring.encode_saturating(1.0 / (cfg.n_tokens as f64).sqrt());
    Ok(DerivedWeights {
        e,
        delta,
        heads,
        score_scale,
    })
}

/// One-hot rows with integer entries 1.
pub fn one_hot(tokens: &[usize], vocab: usize) -> Result<FixedTensor> {
    let mut x = FixedTensor::zeros(tokens.len(), vocab);
    for (t, &tok) in tokens.iter().enumerate() {
        if tok >= vocab {
            return Err(Error::OneHot(format!(
                "token {tok} at position {t} outside vocabulary {vocab}"
            )));
        }
        x.set(t, tok, 1);
    }
    Ok(x)
}

/// Checks that `x` is a valid one-hot matrix and returns the token indices.
pub fn tokens_of(x: &FixedTensor) -> Result<Vec<usize>> {
    (0..x.rows())
        .map(|t| {
            let row = x.row(t);
            let ones: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == 1)
                .map(|(i, _)| i)
                .collect();
            if ones.len() != 1 || row.iter().any(|&v| v > 1) {
                return Err(Error::OneHot(format!("row {t} is not one-hot")));
            }
            Ok(ones[0])
        })
        .collect()
}

/// Token embedding by row lookup: `E[token] + lambda`.
pub fn embed(cfg: &ModelConfig, d: &DerivedWeights, lambda: &FixedTensor, tokens: &[usize]) -> Result<FixedTensor> {
    if tokens.len() != cfg.n_tokens {
        return Err(Error::Shape(format!(
            "{} tokens, config has {}",
            tokens.len(),
            cfg.n_tokens
        )));
    }
    let mut out = FixedTensor::zeros(cfg.n_tokens, cfg.d_emb);
    for (t, &tok) in tokens.iter().enumerate() {
        if tok >= cfg.vocab {
            return Err(Error::OneHot(format!("token {tok} outside vocabulary {}", cfg.vocab)));
        }
        for j in 0..cfg.d_emb {
            out.set(t, j, d.e.get(tok, j).wrapping_add(lambda.get(t, j)));
        }
    }
    Ok(out)
}

/// Token embedding as a one-hot product: `X E + lambda`.
pub fn embed_matmul(d: &DerivedWeights, lambda: &FixedTensor, x: &FixedTensor) -> Result<FixedTensor> {
    tokens_of(x)?;
    x.mat_mul(&d.e)?.add(lambda)
}

/// The fixed functions used by the pipeline, keyed by where they appear.
#[derive(Debug, Clone, Copy)]
pub struct PipelineFns {
    pub embed_truncate: SecureFnSpec,
    pub softmax: SecureFnSpec,
    pub attn_norm: SecureFnSpec,
    pub activation: SecureFnSpec,
    pub ffn_norm: SecureFnSpec,
    pub output_truncate: SecureFnSpec,
}

impl PipelineFns {
    pub fn new(cfg: &ModelConfig, ring: &RingParams) -> Self {
        let f = ring.frac_bits;
        Self {
            embed_truncate: SecureFnSpec::new(FnKind::Truncate, ring, f, 1),
            softmax: SecureFnSpec::new(FnKind::SoftmaxRow, ring, 3 * f, cfg.n_tokens),
            attn_norm: SecureFnSpec::new(FnKind::LayernormRow, ring, 2 * f, cfg.d_emb),
            activation: SecureFnSpec::new(cfg.activation.kind(), ring, f, 1),
            ffn_norm: SecureFnSpec::new(FnKind::LayernormRow, ring, f, cfg.d_emb),
            output_truncate: SecureFnSpec::new(FnKind::Truncate, ring, f, 1),
        }
    }
}

/// Names of the logical intermediates, shared with the protocol engine.
pub mod names {
    pub const INPUT: &str = "x";
    pub const EMBED: &str = "p0";
    pub const LOGITS: &str = "logits";

    pub fn block_input(i: usize) -> String {
        if i == 0 {
            EMBED.to_string()
        } else {
            format!("b{}.x3", i - 1)
        }
    }
    pub fn query(i: usize, h: usize) -> String {
        format!("b{i}.q{h}")
    }
    pub fn value(i: usize, h: usize) -> String {
        format!("b{i}.v{h}")
    }
    pub fn scores(i: usize, h: usize) -> String {
        format!("b{i}.s{h}")
    }
    pub fn attention(i: usize, h: usize) -> String {
        format!("b{i}.a{h}")
    }
    pub fn attn_out(i: usize) -> String {
        format!("b{i}.z")
    }
    pub fn attn_sum(i: usize) -> String {
        format!("b{i}.r1")
    }
    pub fn norm1(i: usize) -> String {
        format!("b{i}.x2")
    }
    pub fn ffn_pre(i: usize) -> String {
        format!("b{i}.f1")
    }
    pub fn ffn_act(i: usize) -> String {
        format!("b{i}.h")
    }
    pub fn ffn_sum(i: usize) -> String {
        format!("b{i}.r2")
    }
    pub fn norm2(i: usize) -> String {
        format!("b{i}.x3")
    }
}

#[derive(Debug, Clone)]
pub struct Reference {
    /// Logits at `frac_bits`.
    pub logits: FixedTensor,
    /// Every logical intermediate by name.
    pub trace: BTreeMap<String, FixedTensor>,
    /// Saturated or out-of-domain evaluations.
    pub flags: usize,
}

fn run_fn(
    spec: &SecureFnSpec,
    ring: &RingParams,
    x: &FixedTensor,
    strict: bool,
    flags: &mut usize,
) -> Result<FixedTensor> {
    let (y, f) = apply_fn(spec, ring, x)?;
    if strict && f > 0 {
        return Err(Error::RangeViolation(format!(
            "{f} {:?} evaluations out of range",
            spec.kind
        )));
    }
    *flags += f;
    Ok(y)
}

/// Fixed-point forward pass; truncations happen exactly where the protocol
/// reconstructs values inside a secure function.
pub fn reference_forward(
    cfg: &ModelConfig,
    w: &ModelWeights,
    ring: &RingParams,
    tokens: &[usize],
    strict: bool,
) -> Result<Reference> {
    let dw = derive(cfg, w, ring)?;
    let fns = PipelineFns::new(cfg, ring);
    let f = ring.frac_bits;
    let mut flags = 0;
    let mut trace = BTreeMap::new();
    let x = one_hot(tokens, cfg.vocab)?;
    if tokens.len() != cfg.n_tokens {
        return Err(Error::Shape(format!(
            "{} tokens, config has {}",
            tokens.len(),
            cfg.n_tokens
        )));
    }
    trace.insert(names::INPUT.to_string(), x.clone());
    let mut p = embed_matmul(&dw, &w.lambda, &x)?;
    trace.insert(names::EMBED.to_string(), p.clone());
    for (i, heads) in dw.heads.iter().enumerate() {
        let blk = &w.blocks[i];
        let mut z = FixedTensor::zeros(cfg.n_tokens, cfg.d_emb);
        for (h, hw) in heads.iter().enumerate() {
            let q = p.mat_mul(&hw.b)?;
            let v = p.mat_mul(&hw.c)?;
            let s = q.mat_mul(&p.transpose())?;
            let a = run_fn(&fns.softmax, ring, &s.scale(dw.score_scale), strict, &mut flags)?;
            z = z.add(&a.mat_mul(&v)?)?;
            trace.insert(names::query(i, h), q);
            trace.insert(names::value(i, h), v);
            trace.insert(names::scores(i, h), s);
            trace.insert(names::attention(i, h), a);
        }
        let r1 = p.shl(2 * f).add(&z)?;
        let x2 = run_fn(&fns.attn_norm, ring, &r1, strict, &mut flags)?;
        let f1 = x2.mat_mul(&blk.w1)?;
        let hact = run_fn(&fns.activation, ring, &f1, strict, &mut flags)?;
        let r2 = x2.shl(f).add(&hact.mat_mul(&blk.w2)?)?;
        let x3 = run_fn(&fns.ffn_norm, ring, &r2, strict, &mut flags)?;
        trace.insert(names::attn_out(i), z);
        trace.insert(names::attn_sum(i), r1);
        trace.insert(names::norm1(i), x2);
        trace.insert(names::ffn_pre(i), f1);
        trace.insert(names::ffn_act(i), hact);
        trace.insert(names::ffn_sum(i), r2);
        trace.insert(names::norm2(i), x3.clone());
        p = x3;
    }
    let logits = run_fn(&fns.output_truncate, ring, &p.mat_mul(&w.w_out)?, strict, &mut flags)?;
    trace.insert(names::LOGITS.to_string(), logits.clone());
    Ok(Reference { logits, trace, flags })
}

#[derive(Debug, Clone)]
struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn of(t: &FixedTensor, ring: &RingParams) -> Self {
        Self {
            rows: t.rows(),
            cols: t.cols(),
            data: t.decode(ring),
        }
    }

    fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn mul(&self, o: &Mat) -> Mat {
        let mut data = vec![0.0; self.rows * o.cols];
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                for j in 0..o.cols {
                    data[i * o.cols + j] += a * o.get(k, j);
                }
            }
        }
        Mat {
            rows: self.rows,
            cols: o.cols,
            data,
        }
    }

    fn t(&self) -> Mat {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.get(i, j);
            }
        }
        Mat {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    fn cols(&self, start: usize, len: usize) -> Mat {
        let mut data = Vec::with_capacity(self.rows * len);
        for i in 0..self.rows {
            data.extend_from_slice(&self.data[i * self.cols + start..i * self.cols + start + len]);
        }
        Mat {
            rows: self.rows,
            cols: len,
            data,
        }
    }

    fn zip(&self, o: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&o.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    fn rows_map(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Mat {
        let mut data = Vec::with_capacity(self.data.len());
        for r in self.data.chunks(self.cols) {
            data.extend(f(r));
        }
        Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }
}

fn softmax(r: &[f64]) -> Vec<f64> {
    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Layer norm without affine parameters, `eps = 2^-8`.
pub fn layer_norm(r: &[f64]) -> Vec<f64> {
    let n = r.len() as f64;
    let mu = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
    let s = (var + 2f64.powi(-8)).sqrt();
    r.iter().map(|x| (x - mu) / s).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x * x * x)).tanh())
}

/// Double-precision forward pass on the decoded weights, without folding.
pub fn float_forward(cfg: &ModelConfig, w: &ModelWeights, ring: &RingParams, tokens: &[usize]) -> Result<Vec<f64>> {
    w.validate(cfg, ring)?;
    let x = Mat::of(&one_hot(tokens, cfg.vocab)?, &RingParams { frac_bits: 0, ..*ring });
    let lambda = Mat::of(&w.lambda, ring);
    let e = Mat::of(&w.w_e, ring).map(|v| v * cfg.delta);
    let mut p = x.mul(&e).zip(&lambda, |a, b| a + b);
    let dh = cfg.head_dim();
    let k = 1.0 / (cfg.n_tokens as f64).sqrt();
    for b in &w.blocks {
        let (wq, wk, wv, wo) = (
            Mat::of(&b.w_q, ring),
            Mat::of(&b.w_k, ring),
            Mat::of(&b.w_v, ring),
            Mat::of(&b.w_o, ring),
        );
        let mut heads = Vec::new();
        for h in 0..cfg.heads {
            let q = p.mul(&wq.cols(h * dh, dh));
            let kk = p.mul(&wk.cols(h * dh, dh));
            let v = p.mul(&wv.cols(h * dh, dh));
            let a = q.mul(&kk.t()).map(|s| s * k).rows_map(softmax);
            heads.push(a.mul(&v));
        }
        let mut concat = Mat {
            rows: cfg.n_tokens,
            cols: cfg.d_emb,
            data: vec![0.0; cfg.n_tokens * cfg.d_emb],
        };
        for (h, m) in heads.iter().enumerate() {
            for t in 0..cfg.n_tokens {
                for j in 0..dh {
                    concat.data[t * cfg.d_emb + h * dh + j] = m.get(t, j);
                }
            }
        }
        let z = concat.mul(&wo);
        let x2 = p.zip(&z, |a, b| a + b).rows_map(layer_norm);
        let act = match cfg.activation {
            Activation::Relu => |v: f64| v.max(0.0),
            Activation::Gelu => gelu,
        };
        let hh = x2.mul(&Mat::of(&b.w1, ring)).map(act);
        p = x2
            .zip(&hh.mul(&Mat::of(&b.w2, ring)), |a, b| a + b)
            .rows_map(layer_norm);
    }
    Ok(p.mul(&Mat::of(&w.w_out, ring)).data)
}

const WEIGHT_MAGIC: &[u8; 4] = b"PRW1";
const WEIGHT_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightHeader {
    config: ModelConfig,
    ring: RingParams,
    tensors: Vec<TensorHeader>,
}

/// Writes the weights: magic, version, JSON header length and header, then
/// every tensor as little-endian words in header order.
pub fn write_weights(out: &mut impl Write, cfg: &ModelConfig, ring: &RingParams, w: &ModelWeights) -> Result<()> {
    w.validate(cfg, ring)?;
    let header = WeightHeader {
        config: *cfg,
        ring: *ring,
        tensors: w
            .tensors()
            .into_iter()
            .map(|(name, t)| TensorHeader {
                name,
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Schema(e.to_string()))?;
    out.write_all(WEIGHT_MAGIC)?;
    out.write_all(&WEIGHT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, t) in w.tensors() {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Schema(format!("weight file truncated in {what}: {e}")))
}

pub fn read_weights(r: &mut impl Read) -> Result<(ModelConfig, RingParams, ModelWeights)> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != WEIGHT_MAGIC {
        return Err(Error::Schema("not a weight file".into()));
    }
    let mut b2 = [0u8; 2];
    read_exact(r, &mut b2, "version")?;
    let version = u16::from_le_bytes(b2);
    if version != WEIGHT_VERSION {
        return Err(Error::Schema(format!("unsupported weight file version {version}")));
    }
    let mut b4 = [0u8; 4];
    read_exact(r, &mut b4, "header length")?;
    let mut json = vec![0u8; u32::from_le_bytes(b4) as usize];
    read_exact(r, &mut json, "header")?;
    let header: WeightHeader =
        serde_json::from_slice(&json).map_err(|e| Error::Schema(format!("weight header: {e}")))?;
    let cfg = header.config;
    cfg.validate()?;
    let ring = RingParams::with_reduction_dim(
        header.ring.modulus_bits,
        header.ring.value_bits,
        header.ring.frac_bits,
        header.ring.max_reduction_dim,
    )?;
    let expected = ModelWeights::expected_shapes(&cfg);
    if header.tensors.len() != expected.len() {
        return Err(Error::Schema(format!(
            "{} tensors in header, config needs {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(expected.len());
    for (th, (name, shape)) in header.tensors.iter().zip(&expected) {
        if &th.name != name || (th.rows, th.cols) != *shape {
            return Err(Error::Schema(format!(
                "tensor {} {}x{} where {name} {shape:?} expected",
                th.name, th.rows, th.cols
            )));
        }
        let mut data = Vec::with_capacity(th.rows * th.cols);
        let mut b8 = [0u8; 8];
        for _ in 0..th.rows * th.cols {
            read_exact(r, &mut b8, name)?;
            data.push(u64::from_le_bytes(b8));
        }
        tensors.push(FixedTensor::from_vec(th.rows, th.cols, data)?);
    }
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("counted");
    let w_e = next();
    let lambda = next();
    let blocks = (0..cfg.n_blocks)
        .map(|_| BlockWeights {
            w_q: next(),
            w_k: next(),
            w_v: next(),
            w_o: next(),
            w1: next(),
            w2: next(),
        })
        .collect();
    let w = ModelWeights {
        w_e,
        lambda,
        blocks,
        w_out: next(),
    };
    w.validate(&cfg, &ring)?;
    Ok((cfg, ring, w))
}

pub fn save_weights(path: &Path, cfg: &ModelConfig, ring: &RingParams, w: &ModelWeights) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_weights(&mut f, cfg, ring, w)?;
    f.flush()?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<(ModelConfig, RingParams, ModelWeights)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_weights(&mut f)
}

/// Float weights by tensor name, as exported from a training framework.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FloatWeights {
    pub config: Option<ModelConfig>,
    pub tensors: BTreeMap<String, Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ImportReport {
    /// Largest rounding error among values that were not saturated.
    pub max_error: f64,
    pub saturated: usize,
}

/// Quantizes float weights to fixed point, saturating out-of-range values.
pub fn import_pretrained(
    desc: &FloatWeights,
    cfg: &ModelConfig,
    ring: &RingParams,
) -> Result<(ModelWeights, ImportReport)> {
    cfg.validate()?;
    let mut report = ImportReport::default();
    let mut out = Vec::new();
    for (name, (rows, cols)) in ModelWeights::expected_shapes(cfg) {
        let m = desc
            .tensors
            .get(&name)
            .ok_or_else(|| Error::Schema(format!("missing tensor {name}")))?;
        if m.len() != rows || m.iter().any(|r| r.len() != cols) {
            return Err(Error::Schema(format!("tensor {name} is not {rows}x{cols}")));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &v in m.iter().flatten() {
            let (q, sat) = ring.encode_saturating(v);
            if sat {
                report.saturated += 1;
            } else {
                report.max_error = report.max_error.max((ring.decode(q) - v).abs());
            }
            data.push(q);
        }
        out.push(FixedTensor::from_vec(rows, cols, data)?);
    }
    let mut it = out.into_iter();
    let mut next = || it.next().expect("counted");
    let w_e = next();
    let lambda = next();
    let blocks = (0..cfg.n_blocks)
        .map(|_| BlockWeights {
            w_q: next(),
            w_k: next(),
            w_v: next(),
            w_o: next(),
            w1: next(),
            w2: next(),
        })
        .collect();
    Ok((
        ModelWeights {
            w_e,
            lambda,
            blocks,
            w_out: next(),
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn ring() -> RingParams {
        RingParams::default()
    }

    fn setup(cfg: &ModelConfig, seed: u64) -> (ModelWeights, Vec<usize>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let w = ModelWeights::random(cfg, &ring(), &mut rng).unwrap();
        let tokens = (0..cfg.n_tokens).map(|_| rng.gen_range(0..cfg.vocab)).collect();
        (w, tokens)
    }

    #[test]
    fn embed_examples() {
        let cfg = ModelConfig::toy(1, 8, 1, 2);
        let r = ring();
        let (mut w, _) = setup(&cfg, 1);
        w.lambda = FixedTensor::zeros(2, 8);
        let d = derive(&cfg, &w, &r).unwrap();
        let e = embed(&cfg, &d, &w.lambda, &[0, 0]).unwrap();
        assert_eq!(e.row(0), w.w_e.row(0));
        let lam = FixedTensor::encode(&r, 2, 8, &[0.5; 16]).unwrap();
        let e2 = embed(&cfg, &d, &lam, &[0, 3]).unwrap();
        assert_eq!(
            e2.sub(&e.add(&FixedTensor::zeros(2, 8)).unwrap()).unwrap().row(0),
            lam.row(0)
        );
    }

    #[test]
    fn embed_paths_agree() {
        let cfg = ModelConfig {
            vocab: 64,
            ..ModelConfig::toy(1, 16, 2, 8)
        };
        for seed in 0..10 {
            let (w, tokens) = setup(&cfg, seed);
            let d = derive(&cfg, &w, &ring()).unwrap();
            let x = one_hot(&tokens, cfg.vocab).unwrap();
            assert_eq!(
                embed(&cfg, &d, &w.lambda, &tokens).unwrap(),
                embed_matmul(&d, &w.lambda, &x).unwrap()
            );
        }
        assert!(matches!(one_hot(&[64], 64), Err(Error::OneHot(_))));
    }

    #[test]
    fn zero_queries_give_uniform_attention() {
        let cfg = ModelConfig::toy(1, 8, 1, 4);
        let r = ring();
        let (mut w, tokens) = setup(&cfg, 2);
        w.blocks[0].w_q = FixedTensor::zeros(8, 8);
        w.blocks[0].w_k = FixedTensor::zeros(8, 8);
        let out = reference_forward(&cfg, &w, &r, &tokens, true).unwrap();
        for v in out.trace["b0.a0"].decode(&r) {
            assert!((v - 0.25).abs() <= 2f64.powi(-6));
        }
        let z = out.trace["b0.z"].decode_at(&r, 3 * r.frac_bits);
        let v = out.trace["b0.v0"].decode_at(&r, 2 * r.frac_bits);
        for j in 0..8 {
            let mean = (0..4).map(|t| v[t * 8 + j]).sum::<f64>() / 4.0;
            for t in 0..4 {
                assert!((z[t * 8 + j] - mean).abs() <= 2f64.powi(-5) * (1.0 + mean.abs()));
            }
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let cfg = ModelConfig::toy(1, 8, 2, 1);
        let r = ring();
        let (w, tokens) = setup(&cfg, 3);
        let out = reference_forward(&cfg, &w, &r, &tokens, true).unwrap();
        assert_eq!(out.trace["b0.a0"].decode(&r), vec![1.0]);
        assert_eq!(out.trace["b0.a1"].decode(&r), vec![1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let cfg = ModelConfig::toy(2, 16, 2, 8);
        let r = ring();
        let (w, tokens) = setup(&cfg, 4);
        let out = reference_forward(&cfg, &w, &r, &tokens, false).unwrap();
        for i in 0..2 {
            for h in 0..2 {
                let a = out.trace[&names::attention(i, h)].decode(&r);
                for row in a.chunks(8) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() <= 2f64.powi(-5) * 8.0);
                }
            }
        }
    }

    #[test]
    fn single_head_matches_unsplit_attention() {
        let cfg = ModelConfig::toy(1, 8, 1, 4);
        let r = ring();
        let (w, _) = setup(&cfg, 5);
        let d = derive(&cfg, &w, &r).unwrap();
        let b = &w.blocks[0];
        assert_eq!(
            d.heads[0][0].b,
            truncate(&b.w_q.mat_mul(&b.w_k.transpose()).unwrap(), &r).0
        );
        assert_eq!(d.heads[0][0].c, truncate(&b.w_v.mat_mul(&b.w_o).unwrap(), &r).0);
    }

    #[test]
    fn close_to_float_forward() {
        let r = ring();
        let mut worst: f64 = 0.0;
        for (seed, cfg) in [
            ModelConfig::toy(1, 8, 1, 4),
            ModelConfig::toy(2, 16, 2, 8),
            ModelConfig {
                activation: Activation::Gelu,
                ..ModelConfig::toy(1, 16, 2, 8)
            },
        ]
        .iter()
        .enumerate()
        {
            let (w, tokens) = setup(cfg, 10 + seed as u64);
            let fx = reference_forward(cfg, &w, &r, &tokens, true).unwrap().logits.decode(&r);
            let fl = float_forward(cfg, &w, &r, &tokens).unwrap();
            for (a, b) in fx.iter().zip(&fl) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst <= 2f64.powi(-4), "worst {worst}");
    }

    #[test]
    fn weights_round_trip_and_truncation() {
        let cfg = ModelConfig::toy(2, 8, 2, 4);
        let r = ring();
        let (w, _) = setup(&cfg, 6);
        let mut buf = Vec::new();
        write_weights(&mut buf, &cfg, &r, &w).unwrap();
        let (c2, r2, w2) = read_weights(&mut buf.as_slice()).unwrap();
        assert_eq!((c2, r2), (cfg, r));
        assert_eq!(w2, w);
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(read_weights(&mut &cut[..]), Err(Error::Schema(_))));
        assert!(matches!(read_weights(&mut &buf[..10]), Err(Error::Schema(_))));
    }

    #[test]
    fn import_rounding_bound() {
        let cfg = ModelConfig::toy(1, 8, 1, 2);
        let r = ring();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut desc = FloatWeights::default();
        for (name, (rows, cols)) in ModelWeights::expected_shapes(&cfg) {
            let m = (0..rows)
                .map(|_| (0..cols).map(|_| rng.gen_range(-1.0..=1.0)).collect())
                .collect();
            desc.tensors.insert(name, m);
        }
        let (w, rep) = import_pretrained(&desc, &cfg, &r).unwrap();
        assert!(rep.max_error <= 2f64.powi(-9));
        assert_eq!(rep.saturated, 0);
        w.validate(&cfg, &r).unwrap();
        desc.tensors.get_mut("w_out").unwrap()[0][0] = 1000.0;
        let (_, rep) = import_pretrained(&desc, &cfg, &r).unwrap();
        assert_eq!(rep.saturated, 1);
    }
}
