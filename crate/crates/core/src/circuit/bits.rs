use crate::error::{Error, Result};

use super::{BoolCircuit, CircuitShape, Gate, GateCounts, GateOp};

/// Something that can combine bits: plain booleans, or a circuit under
/// construction. Word arithmetic is written once against this trait so
/// the plaintext evaluation and the garbled circuit share one definition.
pub trait BitBackend {
    type Bit: Copy + std::fmt::Debug;

    fn constant(&mut self, v: bool) -> Self::Bit;
    fn xor(&mut self, a: Self::Bit, b: Self::Bit) -> Self::Bit;
    fn and(&mut self, a: Self::Bit, b: Self::Bit) -> Self::Bit;
    fn not(&mut self, a: Self::Bit) -> Self::Bit;

    fn or(&mut self, a: Self::Bit, b: Self::Bit) -> Self::Bit {
        let x = self.xor(a, b);
        let y = self.and(a, b);
        self.xor(x, y)
    }
}

/// Direct evaluation on booleans.
#[derive(Debug, Default, Clone, Copy)]
pub struct PlainBits;

impl BitBackend for PlainBits {
    type Bit = bool;

    fn constant(&mut self, v: bool) -> bool {
        v
    }
    fn xor(&mut self, a: bool, b: bool) -> bool {
        a ^ b
    }
    fn and(&mut self, a: bool, b: bool) -> bool {
        a & b
    }
    fn not(&mut self, a: bool) -> bool {
        !a
    }
    fn or(&mut self, a: bool, b: bool) -> bool {
        a | b
    }
}

/// A wire or a value known when the circuit is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bit {
    Const(bool),
    Wire(u32),
}

/// Records gates, folding constants away as it goes.
#[derive(Debug, Default)]
pub struct CircuitBuilder {
    next: u32,
    gates: Vec<Gate>,
    client: Vec<u32>,
    server: Vec<u32>,
    counts: GateCounts,
    count_only: bool,
}

impl CircuitBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// A builder that tallies gates without storing them.
    pub fn counting() -> Self {
        Self {
            count_only: true,
            ..Self::default()
        }
    }

    fn wire(&mut self) -> u32 {
        let w = self.next;
        self.next += 1;
        w
    }

    fn gate(&mut self, op: GateOp, a: u32, b: u32) -> Bit {
        let out = self.wire();
        match op {
            GateOp::And => self.counts.and += 1,
            GateOp::Xor => self.counts.xor += 1,
            GateOp::Not => self.counts.not += 1,
        }
        if !self.count_only {
            self.gates.push(Gate { op, a, b, out });
        }
        Bit::Wire(out)
    }

    pub fn client_input(&mut self) -> Bit {
        let w = self.wire();
        self.client.push(w);
        Bit::Wire(w)
    }

    pub fn server_input(&mut self) -> Bit {
        let w = self.wire();
        self.server.push(w);
        Bit::Wire(w)
    }

    pub fn client_word(&mut self, w: usize) -> Vec<Bit> {
        (0..w).map(|_| self.client_input()).collect()
    }

    pub fn server_word(&mut self, w: usize) -> Vec<Bit> {
        (0..w).map(|_| self.server_input()).collect()
    }

    pub fn gate_count(&self) -> usize {
        (self.counts.and + self.counts.xor + self.counts.not) as usize
    }

    /// Closes the circuit; constant outputs are materialized from an input wire.
    pub fn finish(mut self, outputs: &[Bit]) -> Result<BoolCircuit> {
        if self.count_only {
            return Err(Error::Circuit("counting builder has no gates to finish".into()));
        }
        let out = self.close(outputs)?;
        let c = BoolCircuit {
            num_wires: self.next,
            client_inputs: self.client,
            server_inputs: self.server,
            outputs: out,
            gates: self.gates,
        };
        c.validate()?;
        Ok(c)
    }

    /// Sizes of the circuit `finish` would return.
    pub fn finish_shape(mut self, outputs: &[Bit]) -> Result<CircuitShape> {
        let out = self.close(outputs)?;
        Ok(CircuitShape {
            counts: self.counts,
            client_inputs: self.client.len(),
            server_inputs: self.server.len(),
            outputs: out.len(),
        })
    }

    fn close(&mut self, outputs: &[Bit]) -> Result<Vec<u32>> {
        let any_input = self.client.first().or(self.server.first()).copied();
        let mut zero = None;
        let mut out = Vec::with_capacity(outputs.len());
        for &o in outputs {
            let w = match o {
                Bit::Wire(w) => w,
                Bit::Const(v) => {
                    let src = any_input.ok_or_else(|| Error::Circuit("constant circuit without inputs".into()))?;
                    let z = *zero.get_or_insert_with(|| match self.gate(GateOp::Xor, src, src) {
                        Bit::Wire(w) => w,
                        Bit::Const(_) => unreachable!(),
                    });
                    if v {
                        match self.gate(GateOp::Not, z, z) {
                            Bit::Wire(w) => w,
                            Bit::Const(_) => unreachable!(),
                        }
                    } else {
                        z
                    }
                }
            };
            out.push(w);
        }
        Ok(out)
    }
}

impl BitBackend for CircuitBuilder {
    type Bit = Bit;

    fn constant(&mut self, v: bool) -> Bit {
        Bit::Const(v)
    }

    fn xor(&mut self, a: Bit, b: Bit) -> Bit {
        match (a, b) {
            (Bit::Const(x), Bit::Const(y)) => Bit::Const(x ^ y),
            (Bit::Const(false), w) | (w, Bit::Const(false)) => w,
            (Bit::Const(true), w) | (w, Bit::Const(true)) => self.not(w),
            (Bit::Wire(x), Bit::Wire(y)) if x == y => Bit::Const(false),
            (Bit::Wire(x), Bit::Wire(y)) => self.gate(GateOp::Xor, x, y),
        }
    }

    fn and(&mut self, a: Bit, b: Bit) -> Bit {
        match (a, b) {
            (Bit::Const(x), Bit::Const(y)) => Bit::Const(x & y),
            (Bit::Const(false), _) | (_, Bit::Const(false)) => Bit::Const(false),
            (Bit::Const(true), w) | (w, Bit::Const(true)) => w,
            (Bit::Wire(x), Bit::Wire(y)) if x == y => Bit::Wire(x),
            (Bit::Wire(x), Bit::Wire(y)) => self.gate(GateOp::And, x, y),
        }
    }

    fn not(&mut self, a: Bit) -> Bit {
        match a {
            Bit::Const(v) => Bit::Const(!v),
            Bit::Wire(w) => self.gate(GateOp::Not, w, w),
        }
    }
}
