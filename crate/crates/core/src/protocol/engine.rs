//! Stage plans for the four modes and their two-pass execution.
//!
//! The offline pass walks the plan knowing only the client's masks and
//! produces per-stage material. The online pass consumes it with the input.

use std::collections::BTreeMap;

use super::party::Tag;
use super::session::{ChgsMaterial, HgsClient, HgsServer, Session};
use super::transcript::Step;
use super::Mode;
use crate::circuit::fixed::{FnKind, SecureFnSpec};
use crate::circuit::secure::PreparedFn;
use crate::error::{Error, Result};
use crate::he::Phase;
use crate::model::{derive, names, one_hot, ModelConfig, ModelWeights, PipelineFns};
use crate::ring::{FixedTensor, RingParams};
use crate::sharing::MatTriple;

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Scale(String, u64),
    Shl(String, u32),
    Add(String, String),
    /// Server adds a public weight to its share.
    AddPublic(String, String),
    Sum(Vec<String>),
    Transpose(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    ShareInput {
        out: String,
    },
    /// Linear layers with server weights on one shared input.
    Hgs {
        input: String,
        layers: Vec<(String, String)>,
    },
    Gc {
        spec: SecureFnSpec,
        pairs: Vec<(String, String)>,
    },
    /// `out = u w^T` by one secure matrix product.
    GcDot {
        u: String,
        w: String,
        out: String,
    },
    Fhgs {
        u: String,
        v: String,
        transpose_v: bool,
        out: String,
    },
    /// Fused scores `P B P^T` with `P = input E + lambda`; identity `E` and
    /// zero `lambda` when absent.
    Chgs {
        input: String,
        e: Option<String>,
        lambda: Option<String>,
        b: String,
        out: String,
    },
    Local {
        out: String,
        expr: Expr,
    },
    Reveal {
        name: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub step: Step,
    pub block: usize,
    pub op: Op,
}

mod w {
    pub const E_RAW: &str = "w.e_raw";
    pub const E: &str = "w.e";
    pub const LAMBDA: &str = "w.lambda";
    pub const OUT: &str = "w.out";

    pub fn b(i: usize, h: usize) -> String {
        format!("w.b{i}.h{h}.b")
    }
    pub fn c(i: usize, h: usize) -> String {
        format!("w.b{i}.h{h}.c")
    }
    pub fn ec(h: usize) -> String {
        format!("w.b0.h{h}.ec")
    }
    pub fn lc(h: usize) -> String {
        format!("w.b0.h{h}.lc")
    }
    pub fn w1(i: usize) -> String {
        format!("w.b{i}.w1")
    }
    pub fn w2(i: usize) -> String {
        format!("w.b{i}.w2")
    }
}

/// Server-side weights under the names the plan refers to.
pub fn server_weights(
    cfg: &ModelConfig,
    wts: &ModelWeights,
    ring: &RingParams,
) -> Result<BTreeMap<String, FixedTensor>> {
    let dw = derive(cfg, wts, ring)?;
    let mut m = BTreeMap::new();
    m.insert(w::E_RAW.to_string(), wts.w_e.clone());
    m.insert(w::E.to_string(), dw.e.clone());
    m.insert(w::LAMBDA.to_string(), wts.lambda.clone());
    m.insert(w::OUT.to_string(), wts.w_out.clone());
    for (i, heads) in dw.heads.iter().enumerate() {
        for (h, hw) in heads.iter().enumerate() {
            m.insert(w::b(i, h), hw.b.clone());
            m.insert(w::c(i, h), hw.c.clone());
            if i == 0 {
                m.insert(w::ec(h), dw.e.mat_mul(&hw.c)?);
                m.insert(w::lc(h), wts.lambda.mat_mul(&hw.c)?);
            }
        }
        m.insert(w::w1(i), wts.blocks[i].w1.clone());
        m.insert(w::w2(i), wts.blocks[i].w2.clone());
    }
    Ok(m)
}

pub fn build_plan(mode: Mode, cfg: &ModelConfig, ring: &RingParams) -> Result<Vec<Stage>> {
    cfg.validate()?;
    let fns = PipelineFns::new(cfg, ring);
    let f = ring.frac_bits;
    let (delta, _) = ring.encode_saturating(cfg.delta);
    let (score_scale, _) = ring.encode_saturating(1.0 / (cfg.n_tokens as f64).sqrt());
    let remask = SecureFnSpec::new(FnKind::Remask, ring, 0, 1);
    let mut plan = Vec::new();
    let mut push = |step, block, op| plan.push(Stage { step, block, op });
    let s = |x: &str| x.to_string();

    push(Step::Embed, 0, Op::ShareInput { out: s(names::INPUT) });
    if mode == Mode::Fpc {
        push(
            Step::Embed,
            0,
            Op::Hgs {
                input: s(names::INPUT),
                layers: vec![(s(w::E), s("embed.xe"))],
            },
        );
        push(
            Step::Embed,
            0,
            Op::Local {
                out: s(names::EMBED),
                expr: Expr::AddPublic(s("embed.xe"), s(w::LAMBDA)),
            },
        );
    } else {
        push(
            Step::Embed,
            0,
            Op::Hgs {
                input: s(names::INPUT),
                layers: vec![(s(w::E_RAW), s("embed.xw"))],
            },
        );
        push(
            Step::Embed,
            0,
            Op::Gc {
                spec: remask,
                pairs: vec![(s("embed.xw"), s("embed.xw.r"))],
            },
        );
        push(
            Step::Embed,
            0,
            Op::Local {
                out: s("embed.xwd"),
                expr: Expr::Scale(s("embed.xw.r"), delta),
            },
        );
        push(
            Step::Embed,
            0,
            Op::Gc {
                spec: fns.embed_truncate,
                pairs: vec![(s("embed.xwd"), s("embed.e"))],
            },
        );
        push(
            Step::Embed,
            0,
            Op::Local {
                out: s(names::EMBED),
                expr: Expr::AddPublic(s("embed.e"), s(w::LAMBDA)),
            },
        );
    }

    for i in 0..cfg.n_blocks {
        let p = names::block_input(i);
        let heads = 0..cfg.heads;
        match mode {
            Mode::Fpc if i == 0 => {
                let raw = |h| format!("b0.vraw{h}");
                push(
                    Step::Qkv,
                    0,
                    Op::Hgs {
                        input: s(names::INPUT),
                        layers: heads.clone().map(|h| (w::ec(h), raw(h))).collect(),
                    },
                );
                for h in heads.clone() {
                    push(
                        Step::Qkv,
                        0,
                        Op::Local {
                            out: names::value(0, h),
                            expr: Expr::AddPublic(raw(h), w::lc(h)),
                        },
                    );
                }
            }
            Mode::Fpc => push(
                Step::Qkv,
                i,
                Op::Hgs {
                    input: p.clone(),
                    layers: heads.clone().map(|h| (w::c(i, h), names::value(i, h))).collect(),
                },
            ),
            _ => {
                let q = |h| format!("b{i}.qraw{h}");
                let v = |h| format!("b{i}.vraw{h}");
                let mut layers = Vec::new();
                let mut pairs = Vec::new();
                for h in heads.clone() {
                    layers.push((w::b(i, h), q(h)));
                    layers.push((w::c(i, h), v(h)));
                    pairs.push((q(h), names::query(i, h)));
                    pairs.push((v(h), names::value(i, h)));
                }
                push(
                    Step::Qkv,
                    i,
                    Op::Hgs {
                        input: p.clone(),
                        layers,
                    },
                );
                push(Step::Qkv, i, Op::Gc { spec: remask, pairs });
            }
        }

        for h in heads.clone() {
            let op = match mode {
                Mode::Base => Op::GcDot {
                    u: names::query(i, h),
                    w: p.clone(),
                    out: names::scores(i, h),
                },
                Mode::F | Mode::Fp => Op::Fhgs {
                    u: names::query(i, h),
                    v: p.clone(),
                    transpose_v: true,
                    out: names::scores(i, h),
                },
                Mode::Fpc if i == 0 => Op::Chgs {
                    input: s(names::INPUT),
                    e: Some(s(w::E)),
                    lambda: Some(s(w::LAMBDA)),
                    b: w::b(0, h),
                    out: names::scores(0, h),
                },
                Mode::Fpc => Op::Chgs {
                    input: p.clone(),
                    e: None,
                    lambda: None,
                    b: w::b(i, h),
                    out: names::scores(i, h),
                },
            };
            push(Step::QxK, i, op);
        }

        let scaled = |h| format!("b{i}.sk{h}");
        for h in heads.clone() {
            push(
                Step::SoftMax,
                i,
                Op::Local {
                    out: scaled(h),
                    expr: Expr::Scale(names::scores(i, h), score_scale),
                },
            );
        }
        push(
            Step::SoftMax,
            i,
            Op::Gc {
                spec: fns.softmax,
                pairs: heads.clone().map(|h| (scaled(h), names::attention(i, h))).collect(),
            },
        );

        let av = |h| format!("b{i}.av{h}");
        for h in heads.clone() {
            if mode == Mode::Base {
                let vt = format!("b{i}.vt{h}");
                push(
                    Step::AttenValue,
                    i,
                    Op::Local {
                        out: vt.clone(),
                        expr: Expr::Transpose(names::value(i, h)),
                    },
                );
                push(
                    Step::AttenValue,
                    i,
                    Op::GcDot {
                        u: names::attention(i, h),
                        w: vt,
                        out: av(h),
                    },
                );
            } else {
                push(
                    Step::AttenValue,
                    i,
                    Op::Fhgs {
                        u: names::attention(i, h),
                        v: names::value(i, h),
                        transpose_v: false,
                        out: av(h),
                    },
                );
            }
        }
        push(
            Step::AttenValue,
            i,
            Op::Local {
                out: names::attn_out(i),
                expr: Expr::Sum(heads.clone().map(av).collect()),
            },
        );

        let o = Step::Others;
        let p2 = format!("b{i}.p2f");
        push(
            o,
            i,
            Op::Local {
                out: p2.clone(),
                expr: Expr::Shl(p.clone(), 2 * f),
            },
        );
        push(
            o,
            i,
            Op::Local {
                out: names::attn_sum(i),
                expr: Expr::Add(p2, names::attn_out(i)),
            },
        );
        push(
            o,
            i,
            Op::Gc {
                spec: fns.attn_norm,
                pairs: vec![(names::attn_sum(i), names::norm1(i))],
            },
        );
        push(
            o,
            i,
            Op::Hgs {
                input: names::norm1(i),
                layers: vec![(w::w1(i), names::ffn_pre(i))],
            },
        );
        push(
            o,
            i,
            Op::Gc {
                spec: fns.activation,
                pairs: vec![(names::ffn_pre(i), names::ffn_act(i))],
            },
        );
        let hw2 = format!("b{i}.hw2");
        push(
            o,
            i,
            Op::Hgs {
                input: names::ffn_act(i),
                layers: vec![(w::w2(i), hw2.clone())],
            },
        );
        let x2s = format!("b{i}.x2f");
        push(
            o,
            i,
            Op::Local {
                out: x2s.clone(),
                expr: Expr::Shl(names::norm1(i), f),
            },
        );
        push(
            o,
            i,
            Op::Local {
                out: names::ffn_sum(i),
                expr: Expr::Add(x2s, hw2),
            },
        );
        push(
            o,
            i,
            Op::Gc {
                spec: fns.ffn_norm,
                pairs: vec![(names::ffn_sum(i), names::norm2(i))],
            },
        );
    }

    let last = cfg.n_blocks - 1;
    push(
        Step::Others,
        last,
        Op::Hgs {
            input: names::norm2(last),
            layers: vec![(s(w::OUT), s("out.raw"))],
        },
    );
    push(
        Step::Others,
        last,
        Op::Gc {
            spec: fns.output_truncate,
            pairs: vec![(s("out.raw"), s(names::LOGITS))],
        },
    );
    push(Step::Others, last, Op::Reveal { name: s(names::LOGITS) });
    Ok(plan)
}

enum Material {
    Mask(FixedTensor),
    Hgs(HgsClient, HgsServer),
    Gc(PreparedFn),
    Triple(MatTriple),
    Chgs(ChgsMaterial),
}

type Shape = (usize, usize);

fn stack(ts: &[&FixedTensor]) -> Result<FixedTensor> {
    let cols = ts[0].cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for t in ts {
        if t.cols() != cols {
            return Err(Error::Shape(format!("stacking {cols} and {} columns", t.cols())));
        }
        rows += t.rows();
        data.extend_from_slice(t.data());
    }
    FixedTensor::from_vec(rows, cols, data)
}

fn unstack(t: &FixedTensor, shapes: &[Shape]) -> Result<Vec<FixedTensor>> {
    let mut start = 0;
    shapes
        .iter()
        .map(|&(r, c)| {
            let s = t.slice_rows(start, r);
            start += r;
            if s.cols() != c {
                return Err(Error::Shape(format!("unstacking {} columns as {c}", s.cols())));
            }
            Ok(s)
        })
        .collect()
}

/// Multiplies per garbled matrix product; bounds the size of one circuit.
const DOT_TILE_MULS: usize = 1024;

/// Largest divisor of `a` whose row tile stays within `DOT_TILE_MULS`.
fn tile_rows(a: usize, b: usize, m: usize) -> usize {
    (1..=a)
        .rev()
        .find(|&t| a.is_multiple_of(t) && t * b * m <= DOT_TILE_MULS)
        .unwrap_or(1)
}

/// One row per tile: `t` rows of `u` followed by all of `w`.
fn tiles(u: &FixedTensor, w: &FixedTensor, t: usize) -> Result<FixedTensor> {
    let width = (t + w.rows()) * u.cols();
    let mut data = Vec::with_capacity(u.rows() / t * width);
    for k in 0..u.rows() / t {
        data.extend_from_slice(&u.data()[k * t * u.cols()..(k + 1) * t * u.cols()]);
        data.extend_from_slice(w.data());
    }
    FixedTensor::from_vec(u.rows() / t, width, data)
}

fn dim(n: usize) -> Result<u16> {
    u16::try_from(n).map_err(|_| Error::Shape(format!("{n} rows in a secure product")))
}

fn eval_expr(
    expr: &Expr,
    get: impl Fn(&str) -> Result<FixedTensor>,
    server: bool,
    weights: &BTreeMap<String, FixedTensor>,
) -> Result<FixedTensor> {
    match expr {
        Expr::Scale(a, k) => Ok(get(a)?.scale(*k)),
        Expr::Shl(a, b) => Ok(get(a)?.shl(*b)),
        Expr::Add(a, b) => get(a)?.add(&get(b)?),
        Expr::AddPublic(a, wname) => {
            let x = get(a)?;
            if server {
                x.add(weight(weights, wname)?)
            } else {
                Ok(x)
            }
        }
        Expr::Sum(xs) => {
            let mut acc = get(&xs[0])?;
            for x in &xs[1..] {
                acc = acc.add(&get(x)?)?;
            }
            Ok(acc)
        }
        Expr::Transpose(a) => Ok(get(a)?.transpose()),
    }
}

fn weight<'a>(weights: &'a BTreeMap<String, FixedTensor>, name: &str) -> Result<&'a FixedTensor> {
    weights
        .get(name)
        .ok_or_else(|| Error::Protocol(format!("server has no weight {name}")))
}

fn known<'a>(k: &'a BTreeMap<String, FixedTensor>, name: &str) -> Result<&'a FixedTensor> {
    k.get(name)
        .ok_or_else(|| Error::Protocol(format!("client share of {name} is not fixed before the input")))
}

/// Executes a plan in one session.
pub struct Engine<'a> {
    pub session: Session,
    plan: &'a [Stage],
    weights: BTreeMap<String, FixedTensor>,
    material: BTreeMap<usize, Material>,
    online_he: bool,
    d_emb: usize,
}

impl<'a> Engine<'a> {
    pub fn new(
        session: Session,
        plan: &'a [Stage],
        weights: BTreeMap<String, FixedTensor>,
        mode: Mode,
        d_emb: usize,
    ) -> Result<Self> {
        let mut session = session;
        for (name, t) in &weights {
            session.server.store.put(name, Tag::PlaintextWeight, t.clone())?;
        }
        Ok(Self {
            session,
            plan,
            weights,
            material: BTreeMap::new(),
            online_he: mode == Mode::Base,
            d_emb,
        })
    }

    fn w(&self, name: &str) -> Result<FixedTensor> {
        weight(&self.weights, name).cloned()
    }

    fn identity(&self) -> FixedTensor {
        FixedTensor::identity(&self.session.ring(), self.d_emb, 1)
    }

    /// Everything that can be done before the input exists.
    pub fn offline(&mut self, input_shape: Shape) -> Result<()> {
        let ring = self.session.ring();
        let mut k: BTreeMap<String, FixedTensor> = BTreeMap::new();
        let mut shapes: BTreeMap<String, Shape> = BTreeMap::new();
        let shape = |shapes: &BTreeMap<String, Shape>, n: &str| {
            shapes
                .get(n)
                .copied()
                .ok_or_else(|| Error::Protocol(format!("unknown tensor {n}")))
        };
        for (i, st) in self.plan.iter().enumerate() {
            self.session.at(st.step, st.block);
            self.session.set_phase(Phase::Offline);
            match &st.op {
                Op::ShareInput { out } => {
                    let m = FixedTensor::random(&ring, input_shape.0, input_shape.1, &mut self.session.client.rng);
                    k.insert(out.clone(), m.clone());
                    shapes.insert(out.clone(), input_shape);
                    self.material.insert(i, Material::Mask(m));
                }
                Op::Hgs { input, layers } => {
                    let (r, _) = shape(&shapes, input)?;
                    let ws: Vec<FixedTensor> = layers.iter().map(|(w, _)| self.w(w)).collect::<Result<_>>()?;
                    for ((_, out), wt) in layers.iter().zip(&ws) {
                        shapes.insert(out.clone(), (r, wt.cols()));
                    }
                    if self.online_he {
                        continue;
                    }
                    let mask = known(&k, input)?.clone();
                    let refs: Vec<&FixedTensor> = ws.iter().collect();
                    let (c, s) = self.session.hgs_offline(&mask, &refs)?;
                    for ((_, out), t) in layers.iter().zip(&c.outs) {
                        k.insert(out.clone(), t.clone());
                    }
                    self.material.insert(i, Material::Hgs(c, s));
                }
                Op::Gc { spec, pairs } => {
                    let ins: Vec<Shape> = pairs.iter().map(|(a, _)| shape(&shapes, a)).collect::<Result<_>>()?;
                    let rows = ins.iter().map(|s| s.0).sum();
                    let prep = self.session.gc_prepare(spec, rows, ins[0].1)?;
                    let outs: Vec<Shape> = ins.iter().map(|&(r, _)| (r, prep.mask.cols())).collect();
                    for ((_, out), (m, sh)) in pairs.iter().zip(unstack(&prep.mask, &outs)?.into_iter().zip(&outs)) {
                        k.insert(out.clone(), m);
                        shapes.insert(out.clone(), *sh);
                    }
                    self.material.insert(i, Material::Gc(prep));
                }
                Op::GcDot { u, w, out } => {
                    let (a, m) = shape(&shapes, u)?;
                    let (b, m2) = shape(&shapes, w)?;
                    if m != m2 {
                        return Err(Error::Shape(format!("dot of {m} and {m2} columns")));
                    }
                    let t = tile_rows(a, b, m);
                    let kind = FnKind::Dot {
                        rows: dim(t)?,
                        cols: dim(b)?,
                    };
                    let spec = SecureFnSpec::new(kind, &ring, 0, (t + b) * m);
                    let prep = self.session.gc_prepare(&spec, a / t, (t + b) * m)?;
                    k.insert(out.clone(), FixedTensor::from_vec(a, b, prep.mask.data().to_vec())?);
                    shapes.insert(out.clone(), (a, b));
                    self.material.insert(i, Material::Gc(prep));
                }
                Op::Fhgs { u, v, transpose_v, out } => {
                    let left = known(&k, u)?.clone();
                    let mut right = known(&k, v)?.clone();
                    if *transpose_v {
                        right = right.transpose();
                    }
                    shapes.insert(out.clone(), (left.rows(), right.cols()));
                    let t = self.session.fhgs_offline(left, right)?;
                    self.material.insert(i, Material::Triple(t));
                }
                Op::Chgs { input, e, b, out, .. } => {
                    let mask = known(&k, input)?.clone();
                    let e = match e {
                        Some(n) => self.w(n)?,
                        None => self.identity(),
                    };
                    let m = self.session.chgs_offline(&mask, &e, &self.w(b)?)?;
                    shapes.insert(out.clone(), (mask.rows(), mask.rows()));
                    self.material.insert(i, Material::Chgs(m));
                }
                Op::Local { out, expr } => {
                    let sh = match expr {
                        Expr::Scale(a, _) | Expr::Shl(a, _) | Expr::Add(a, _) | Expr::AddPublic(a, _) => {
                            shape(&shapes, a)?
                        }
                        Expr::Sum(xs) => shape(&shapes, &xs[0])?,
                        Expr::Transpose(a) => {
                            let (r, c) = shape(&shapes, a)?;
                            (c, r)
                        }
                    };
                    shapes.insert(out.clone(), sh);
                    if let Ok(t) = eval_expr(expr, |n| known(&k, n).cloned(), false, &self.weights) {
                        k.insert(out.clone(), t);
                    }
                }
                Op::Reveal { .. } => {}
            }
        }
        self.session.flush();
        Ok(())
    }

    fn take(&mut self, i: usize) -> Result<Material> {
        self.material
            .remove(&i)
            .ok_or_else(|| Error::MissingMaterial(format!("stage {i} of session {:#x}", self.session.id)))
    }

    fn shares(&self, name: &str) -> Result<(FixedTensor, FixedTensor)> {
        Ok((
            self.session.client.store.get(name)?.clone(),
            self.session.server.store.get(name)?.clone(),
        ))
    }

    fn put(&mut self, name: &str, client: FixedTensor, server: FixedTensor) -> Result<()> {
        let ring = self.session.ring();
        self.session.client.store.put(name, Tag::Share, client.reduced(&ring))?;
        self.session.server.store.put(name, Tag::Share, server.reduced(&ring))
    }

    /// Runs the input through the plan. Returns the client's and the
    /// server's shares of the revealed output.
    pub fn online(&mut self, x: &FixedTensor) -> Result<(FixedTensor, FixedTensor)> {
        let mut revealed = None;
        self.session
            .client
            .store
            .put(names::INPUT, Tag::LogicalPlaintext, x.clone())?;
        for (i, st) in self.plan.iter().enumerate() {
            self.session.at(st.step, st.block);
            self.session.set_phase(Phase::Online);
            match &st.op {
                Op::ShareInput { out } => {
                    let Material::Mask(m) = self.take(i)? else {
                        return Err(Error::MissingMaterial(format!("input mask at stage {i}")));
                    };
                    let xs = self.session.share_input(x, &m)?;
                    self.session
                        .client
                        .store
                        .put(&format!("{out}.mask"), Tag::Mask, m.clone())?;
                    self.put(out, m, xs)?;
                }
                Op::Hgs { input, layers } => {
                    let ws: Vec<FixedTensor> = layers.iter().map(|(w, _)| self.w(w)).collect::<Result<_>>()?;
                    let refs: Vec<&FixedTensor> = ws.iter().collect();
                    let (c_in, s_in) = self.shares(input)?;
                    if self.online_he {
                        let outs = self.session.he_linear_online(&c_in, &s_in, &refs)?;
                        for ((_, name), (c, s)) in layers.iter().zip(outs) {
                            self.put(name, c, s)?;
                        }
                        continue;
                    }
                    let Material::Hgs(c, s) = self.take(i)? else {
                        return Err(Error::MissingMaterial(format!("hgs material at stage {i}")));
                    };
                    if c.mask != c_in {
                        return Err(Error::Protocol(format!(
                            "client share of {input} differs from its offline mask"
                        )));
                    }
                    let outs = self.session.run_hgs_layer(&refs, &s_in, &s)?;
                    for (((_, name), c), s) in layers.iter().zip(c.outs).zip(outs) {
                        self.put(name, c, s)?;
                    }
                }
                Op::Gc { pairs, .. } => {
                    let Material::Gc(prep) = self.take(i)? else {
                        return Err(Error::MissingMaterial(format!("garbled material at stage {i}")));
                    };
                    let mut cs = Vec::new();
                    let mut ss = Vec::new();
                    for (a, _) in pairs {
                        let (c, s) = self.shares(a)?;
                        cs.push(c);
                        ss.push(s);
                    }
                    let c_in = stack(&cs.iter().collect::<Vec<_>>())?;
                    let s_in = stack(&ss.iter().collect::<Vec<_>>())?;
                    let server = self.session.gc_eval(&prep, &c_in, &s_in)?;
                    let outs: Vec<Shape> = cs.iter().map(|c| (c.rows(), prep.mask.cols())).collect();
                    let cparts = unstack(&prep.mask, &outs)?;
                    let sparts = unstack(&server, &outs)?;
                    for (((_, name), c), s) in pairs.iter().zip(cparts).zip(sparts) {
                        self.put(name, c, s)?;
                    }
                }
                Op::GcDot { u, w, out } => {
                    let Material::Gc(prep) = self.take(i)? else {
                        return Err(Error::MissingMaterial(format!("garbled material at stage {i}")));
                    };
                    let (uc, us) = self.shares(u)?;
                    let (wc, ws) = self.shares(w)?;
                    let FnKind::Dot { rows: t, .. } = prep.spec.kind else {
                        return Err(Error::MissingMaterial(format!("matrix product material at stage {i}")));
                    };
                    let t = t as usize;
                    let server = self
                        .session
                        .gc_eval(&prep, &tiles(&uc, &wc, t)?, &tiles(&us, &ws, t)?)?;
                    let (a, b) = (uc.rows(), wc.rows());
                    self.put(
                        out,
                        FixedTensor::from_vec(a, b, prep.mask.data().to_vec())?,
                        FixedTensor::from_vec(a, b, server.data().to_vec())?,
                    )?;
                }
                Op::Fhgs { u, v, transpose_v, out } => {
                    let Material::Triple(t) = self.take(i)? else {
                        return Err(Error::MissingMaterial(format!("triple at stage {i}")));
                    };
                    let us = self.session.server.store.get(u)?.clone();
                    let mut vs = self.session.server.store.get(v)?.clone();
                    if *transpose_v {
                        vs = vs.transpose();
                    }
                    let (c, s) = self.session.fhgs_online(&t, &us, &vs)?;
                    self.put(out, c, s)?;
                }
                Op::Chgs {
                    input,
                    e,
                    lambda,
                    b,
                    out,
                } => {
                    let Material::Chgs(m) = self.take(i)? else {
                        return Err(Error::MissingMaterial(format!("fused material at stage {i}")));
                    };
                    let xs = self.session.server.store.get(input)?.clone();
                    let e = match e {
                        Some(n) => self.w(n)?,
                        None => self.identity(),
                    };
                    let lambda = match lambda {
                        Some(n) => self.w(n)?,
                        None => FixedTensor::zeros(xs.rows(), e.cols()),
                    };
                    let (c, s) = self.session.run_chgs_block(&m, &xs, &e, &lambda, &self.w(b)?)?;
                    self.put(out, c, s)?;
                }
                Op::Local { out, expr } => {
                    let c = eval_expr(
                        expr,
                        |n| Ok(self.session.client.store.get(n)?.clone()),
                        false,
                        &self.weights,
                    )?;
                    let s = eval_expr(
                        expr,
                        |n| Ok(self.session.server.store.get(n)?.clone()),
                        true,
                        &self.weights,
                    )?;
                    self.put(out, c, s)?;
                }
                Op::Reveal { name } => {
                    let (c, s) = self.shares(name)?;
                    self.session.reveal(&s)?;
                    let full = c.add(&s)?.reduced(&self.session.ring());
                    self.session
                        .client
                        .store
                        .put(&format!("{name}.out"), Tag::LogicalPlaintext, full)?;
                    revealed = Some((c, s));
                }
            }
        }
        self.session.flush();
        revealed.ok_or_else(|| Error::Protocol("plan reveals nothing".into()))
    }
}

/// Builds the one-hot input for a token list.
pub fn input_tensor(cfg: &ModelConfig, tokens: &[usize]) -> Result<FixedTensor> {
    if tokens.len() != cfg.n_tokens {
        return Err(Error::Shape(format!(
            "{} tokens, config has {}",
            tokens.len(),
            cfg.n_tokens
        )));
    }
    one_hot(tokens, cfg.vocab)
}
