//! Boolean circuits for nonlinear functions on shares, their garbled
//! evaluation and oblivious transfer.

mod bits;
pub mod fixed;
pub mod garble;
pub mod ot;
pub mod secure;
pub mod words;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bits::{Bit, BitBackend, CircuitBuilder, PlainBits};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GateOp {
    And,
    Xor,
    Not,
}

impl GateOp {
    fn name(self) -> &'static str {
        match self {
            GateOp::And => "AND",
            GateOp::Xor => "XOR",
            GateOp::Not => "NOT",
        }
    }
}

/// `out = op(a, b)`; `b` is ignored for `Not`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gate {
    pub op: GateOp,
    pub a: u32,
    pub b: u32,
    pub out: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateCounts {
    pub and: u64,
    pub xor: u64,
    pub not: u64,
}

/// Gate and input counts of a circuit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircuitShape {
    pub counts: GateCounts,
    pub client_inputs: usize,
    pub server_inputs: usize,
    pub outputs: usize,
}

/// Gates in topological order over numbered wires.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolCircuit {
    pub num_wires: u32,
    pub client_inputs: Vec<u32>,
    pub server_inputs: Vec<u32>,
    pub outputs: Vec<u32>,
    pub gates: Vec<Gate>,
}

impl BoolCircuit {
    pub fn shape(&self) -> CircuitShape {
        CircuitShape {
            counts: self.counts(),
            client_inputs: self.client_inputs.len(),
            server_inputs: self.server_inputs.len(),
            outputs: self.outputs.len(),
        }
    }

    pub fn counts(&self) -> GateCounts {
        let mut c = GateCounts::default();
        for g in &self.gates {
            match g.op {
                GateOp::And => c.and += 1,
                GateOp::Xor => c.xor += 1,
                GateOp::Not => c.not += 1,
            }
        }
        c
    }

    /// Checks that every wire is written exactly once and read only after
    /// it is written.
    pub fn validate(&self) -> Result<()> {
        let mut defined = vec![false; self.num_wires as usize];
        let mut define = |w: u32, what: &str| -> Result<()> {
            let slot = defined
                .get_mut(w as usize)
                .ok_or_else(|| Error::Circuit(format!("{what} wire {w} out of range")))?;
            if *slot {
                return Err(Error::Circuit(format!("wire {w} written twice")));
            }
            *slot = true;
            Ok(())
        };
        for &w in self.client_inputs.iter().chain(&self.server_inputs) {
            define(w, "input")?;
        }
        for g in &self.gates {
            let reads: &[u32] = if g.op == GateOp::Not { &[g.a] } else { &[g.a, g.b] };
            for &r in reads {
                if !defined.get(r as usize).copied().unwrap_or(false) {
                    return Err(Error::Circuit(format!("gate reads undefined wire {r}")));
                }
            }
            let slot = defined
                .get_mut(g.out as usize)
                .ok_or_else(|| Error::Circuit(format!("gate output {} out of range", g.out)))?;
            if *slot {
                return Err(Error::Circuit(format!("wire {} written twice", g.out)));
            }
            *slot = true;
        }
        for &o in &self.outputs {
            if !defined.get(o as usize).copied().unwrap_or(false) {
                return Err(Error::Circuit(format!("output wire {o} undefined")));
            }
        }
        Ok(())
    }

    pub fn eval(&self, client: &[bool], server: &[bool]) -> Result<Vec<bool>> {
        if client.len() != self.client_inputs.len() || server.len() != self.server_inputs.len() {
            return Err(Error::Circuit(format!(
                "expected {}+{} inputs, got {}+{}",
                self.client_inputs.len(),
                self.server_inputs.len(),
                client.len(),
                server.len()
            )));
        }
        let mut w = vec![false; self.num_wires as usize];
        for (&i, &v) in self.client_inputs.iter().zip(client) {
            w[i as usize] = v;
        }
        for (&i, &v) in self.server_inputs.iter().zip(server) {
            w[i as usize] = v;
        }
        for g in &self.gates {
            let (a, b) = (w[g.a as usize], w[g.b as usize]);
            w[g.out as usize] = match g.op {
                GateOp::And => a & b,
                GateOp::Xor => a ^ b,
                GateOp::Not => !a,
            };
        }
        Ok(self.outputs.iter().map(|&o| w[o as usize]).collect())
    }

    /// Text listing: a version line, the wire sections, then one gate per line.
    pub fn to_text(&self) -> String {
        let list = |v: &[u32]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let mut s = String::from("privtx-circuit v1\n");
        let _ = writeln!(s, "wires {}", self.num_wires);
        let _ = writeln!(s, "client {}", list(&self.client_inputs));
        let _ = writeln!(s, "server {}", list(&self.server_inputs));
        let _ = writeln!(s, "outputs {}", list(&self.outputs));
        let _ = writeln!(s, "gates {}", self.gates.len());
        for g in &self.gates {
            let b = if g.op == GateOp::Not { g.a } else { g.b };
            let _ = writeln!(s, "{} {} {} {}", g.out, g.op.name(), g.a, b);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let bad = |ln: usize, msg: &str| Error::Circuit(format!("line {}: {msg}", ln + 1));
        let (ln, head) = lines.next().ok_or_else(|| Error::Circuit("empty circuit".into()))?;
        if head.trim() != "privtx-circuit v1" {
            return Err(bad(ln, "unknown header"));
        }
        let mut section = |key: &str| -> Result<Vec<u32>> {
            let (ln, line) = lines.next().ok_or_else(|| Error::Circuit(format!("missing {key}")))?;
            let mut it = line.split_whitespace();
            if it.next() != Some(key) {
                return Err(bad(ln, &format!("expected {key}")));
            }
            it.map(|t| t.parse::<u32>().map_err(|_| bad(ln, "bad number")))
                .collect()
        };
        let wires = section("wires")?;
        let client_inputs = section("client")?;
        let server_inputs = section("server")?;
        let outputs = section("outputs")?;
        let ngates = section("gates")?;
        let (&[num_wires], &[ngates]) = (wires.as_slice(), ngates.as_slice()) else {
            return Err(Error::Circuit("wires/gates need one count".into()));
        };
        let mut gates = Vec::with_capacity(ngates as usize);
        for (ln, line) in lines {
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.len() != 4 {
                return Err(bad(ln, "gate needs 4 fields"));
            }
            let num = |s: &str| s.parse::<u32>().map_err(|_| bad(ln, "bad number"));
            let op = match t[1] {
                "AND" => GateOp::And,
                "XOR" => GateOp::Xor,
                "NOT" => GateOp::Not,
                _ => return Err(bad(ln, "unknown gate")),
            };
            gates.push(Gate {
                op,
                a: num(t[2])?,
                b: num(t[3])?,
                out: num(t[0])?,
            });
        }
        if gates.len() != ngates as usize {
            return Err(Error::Circuit(format!(
                "expected {ngates} gates, found {}",
                gates.len()
            )));
        }
        let c = Self {
            num_wires,
            client_inputs,
            server_inputs,
            outputs,
            gates,
        };
        c.validate()?;
        Ok(c)
    }
}

/// `(a + b) mod 2^w`, client supplies `a`, server `b`.
pub fn reconstruct_add_circuit(w: usize) -> BoolCircuit {
    let mut b = CircuitBuilder::new();
    let x = b.client_word(w);
    let y = b.server_word(w);
    let s = words::add(&mut b, &x, &y);
    b.finish(&s).expect("adder has inputs")
}

/// `(y - r) mod 2^w`, server supplies `y`, client the mask `r`.
pub fn remask_sub_circuit(w: usize) -> BoolCircuit {
    let mut b = CircuitBuilder::new();
    let r = b.client_word(w);
    let y = b.server_word(w);
    let s = words::sub(&mut b, &y, &r);
    b.finish(&s).expect("subtractor has inputs")
}

pub fn to_bits(v: u64, w: usize) -> Vec<bool> {
    (0..w).map(|i| i < 64 && (v >> i) & 1 == 1).collect()
}

pub fn from_bits(bits: &[bool]) -> u64 {
    bits.iter()
        .take(64)
        .enumerate()
        .fold(0, |acc, (i, &b)| acc | ((b as u64) << i))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adder_examples() {
        let c = reconstruct_add_circuit(8);
        let run = |a: u64, b: u64| from_bits(&c.eval(&to_bits(a, 8), &to_bits(b, 8)).unwrap());
        assert_eq!(run(3, 4), 7);
        assert_eq!(run(255, 1), 0);
        assert_eq!(c.counts().and, 7);
    }

    #[test]
    fn adder_exhaustive_w6() {
        let c = reconstruct_add_circuit(6);
        for a in 0..64u64 {
            for b in 0..64u64 {
                let got = from_bits(&c.eval(&to_bits(a, 6), &to_bits(b, 6)).unwrap());
                assert_eq!(got, (a + b) % 64);
            }
        }
    }

    #[test]
    fn remask_examples_and_exhaustive() {
        let c = remask_sub_circuit(6);
        let run = |y: u64, r: u64| from_bits(&c.eval(&to_bits(r, 6), &to_bits(y, 6)).unwrap());
        assert_eq!(run(10, 3), 7);
        assert_eq!(run(10, 0), 10);
        for y in 0..64u64 {
            for r in 0..64u64 {
                assert_eq!(run(y, r), (y + 64 - r) % 64);
            }
        }
    }

    #[test]
    fn text_round_trip_and_validation() {
        let c = reconstruct_add_circuit(5);
        let t = c.to_text();
        assert!(t.starts_with("privtx-circuit v1\n"));
        assert_eq!(BoolCircuit::from_text(&t).unwrap(), c);
        let broken = t.replace("privtx-circuit v1", "privtx-circuit v9");
        assert!(BoolCircuit::from_text(&broken).is_err());
        let mut dup = c.clone();
        dup.gates[1].out = dup.gates[0].out;
        assert!(dup.validate().is_err());
        let mut cyc = c.clone();
        cyc.gates[0].a = cyc.gates.last().unwrap().out;
        assert!(cyc.validate().is_err());
    }
}
