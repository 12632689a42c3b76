//! Reference designs used by the examples, tests and the browser demo, and a
//! seeded random netlist generator.

use std::fmt::Write as _;

use crate::emulator::{GateKind, Stimulus};

/// A 4-bit enabled counter `c0..c3` with a registered parity bit `p` over
/// `c0..c2`, a dead hold register `d`, and a checker output `err` that is 1
/// whenever `p` disagrees with the counter bits it covers.
pub const COUNTER_PARITY: &str = "\
input en
wire n0
wire k1
wire n1
wire k2
wire n2
wire k3
wire n3
wire pa
wire pn
wire e0
wire e1
wire err
gate XOR n0 c0 en
gate AND k1 c0 en
gate XOR n1 c1 k1
gate AND k2 c1 k1
gate XOR n2 c2 k2
gate AND k3 c2 k2
gate XOR n3 c3 k3
gate XOR pa n0 n1
gate XOR pn pa n2
reg c0 n0
reg c1 n1
reg c2 n2
reg c3 n3
reg p pn
reg d d init 1
gate XOR e0 c0 c1
gate XOR e1 e0 c2
gate XOR err p e1
output q0 c0
output q1 c1
output q2 c2
output q3 c3
output err err
";

pub const COUNTER_REGISTERS: [&str; 6] = ["c0", "c1", "c2", "c3", "p", "d"];

/// Two inputs XORed through a named internal net `s`, plus its inverse.
pub const XOR_PAIR: &str = "\
input a
input b
wire s
wire ns
gate XOR s a b
gate NOT ns s
output o s
output no ns
";

/// Stimulus that holds `en` high for `len` cycles.
pub fn counter_stimulus(len: usize) -> Stimulus {
    Stimulus::new(1, vec![vec![true]; len]).unwrap_or_else(|_| unreachable!("width 1 rows"))
}

/// A 4-bit counter followed by `holds` hold registers nothing reads. With
/// 64-register segments the counter lives in the first segment only.
pub fn wide_counter(holds: usize) -> String {
    let mut s = String::from(
        "input en\nwire n0\nwire k1\nwire n1\nwire k2\nwire n2\nwire k3\nwire n3\n\
         gate XOR n0 c0 en\ngate AND k1 c0 en\ngate XOR n1 c1 k1\ngate AND k2 c1 k1\n\
         gate XOR n2 c2 k2\ngate AND k3 c2 k2\ngate XOR n3 c3 k3\n\
         reg c0 n0\nreg c1 n1\nreg c2 n2\nreg c3 n3\n",
    );
    for i in 0..holds {
        let _ = writeln!(s, "reg h{i} h{i} init {}", i % 2);
    }
    s.push_str("output q0 c0\noutput q1 c1\noutput q2 c2\noutput q3 c3\n");
    s
}

/// SplitMix64, enough for reproducible test inputs.
#[derive(Debug, Clone)]
pub struct SplitMix64(pub u64);

impl SplitMix64 {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n.max(1) as u64) as usize
    }

    pub fn bool(&mut self) -> bool {
        self.next_u64() & 1 == 1
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RandomShape {
    pub inputs: usize,
    pub registers: usize,
    pub gates: usize,
    pub outputs: usize,
}

impl Default for RandomShape {
    fn default() -> Self {
        Self {
            inputs: 3,
            registers: 6,
            gates: 40,
            outputs: 4,
        }
    }
}

/// A random acyclic-through-registers netlist. Gates only read inputs,
/// registers and earlier gates, so it always parses.
pub fn random_netlist(seed: u64, shape: RandomShape) -> String {
    let mut rng = SplitMix64(seed);
    let mut s = String::new();
    let mut pool: Vec<String> = Vec::new();
    for i in 0..shape.inputs.max(1) {
        let _ = writeln!(s, "input i{i}");
        pool.push(format!("i{i}"));
    }
    for r in 0..shape.registers {
        pool.push(format!("r{r}"));
    }
    for g in 0..shape.gates {
        let _ = writeln!(s, "wire g{g}");
    }
    for g in 0..shape.gates {
        let kind = GateKind::ALL[rng.below(GateKind::ALL.len())];
        let ins: Vec<String> = (0..kind.arity()).map(|_| pool[rng.below(pool.len())].clone()).collect();
        let _ = writeln!(s, "gate {kind} g{g} {}", ins.join(" "));
        pool.push(format!("g{g}"));
    }
    for r in 0..shape.registers {
        let src = &pool[rng.below(pool.len())];
        let _ = writeln!(s, "reg r{r} {src} init {}", u8::from(rng.bool()));
    }
    for o in 0..shape.outputs.max(1) {
        let src = &pool[rng.below(pool.len())];
        let _ = writeln!(s, "output o{o} {src}");
    }
    s
}

pub fn random_stimulus(seed: u64, width: usize, len: usize) -> Stimulus {
    let mut rng = SplitMix64(seed ^ 0xA5A5_A5A5);
    let rows = (0..len).map(|_| (0..width).map(|_| rng.bool()).collect()).collect();
    Stimulus::new(width, rows).unwrap_or_else(|_| unreachable!("rows match width"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emulator::Netlist;

    #[test]
    fn reference_designs_parse() {
        let n = Netlist::parse(COUNTER_PARITY).unwrap();
        for r in COUNTER_REGISTERS {
            assert!(n.register_index(r).is_some(), "{r}");
        }
        assert!(n.output_index("err").is_some());
        Netlist::parse(XOR_PAIR).unwrap();
        assert_eq!(Netlist::parse(&wide_counter(300)).unwrap().registers().len(), 304);
    }

    #[test]
    fn random_netlists_parse() {
        for seed in 0..50 {
            Netlist::parse(&random_netlist(seed, RandomShape::default())).unwrap();
        }
    }
}
