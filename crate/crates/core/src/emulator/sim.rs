use std::fmt;

use thiserror::Error;

use super::netlist::{Driver, NetId, Netlist};
use crate::codec::{DecodeError, Decoder, Encoder};

pub type Bits = Vec<bool>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("input vector has {got} bits, netlist has {expected} inputs")]
    InputWidth { expected: usize, got: usize },
    #[error("stimulus exhausted at cycle {cycle} ({available} vectors available)")]
    StimulusExhausted { cycle: u64, available: usize },
    #[error("state belongs to netlist {state:016x}, not {netlist:016x}")]
    NetlistMismatch { state: u64, netlist: u64 },
    #[error("state has {got} registers, netlist has {expected}")]
    RegisterCount { expected: usize, got: usize },
    #[error("register load failed: {0}")]
    RegisterLoad(String),
}

/// Storage for register values. Reads may be lazy (see the checkpoint
/// engine's on-demand loader); the evaluator only reads registers that lie in
/// the cone of something it has to compute.
pub trait RegisterBank {
    fn len(&self) -> usize;
    fn read(&self, index: usize) -> Result<bool, SimError>;
    fn write(&mut self, index: usize, value: bool);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl RegisterBank for Vec<bool> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn read(&self, index: usize) -> Result<bool, SimError> {
        Ok(self[index])
    }

    fn write(&mut self, index: usize, value: bool) {
        self[index] = value;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverrideAction {
    Force(bool),
    Invert,
}

/// Replaces the evaluated value of one net for a single cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetOverride {
    pub net: NetId,
    pub action: OverrideAction,
}

impl NetOverride {
    fn apply(&self, natural: bool) -> bool {
        match self.action {
            OverrideAction::Force(v) => v,
            OverrideAction::Invert => !natural,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub outputs: Bits,
    /// Value of every net evaluated this cycle, after overrides. `None` for
    /// nets outside the evaluated cone.
    pub nets: Vec<Option<bool>>,
    /// `(net, value before override)` for each override applied.
    pub natural: Vec<(NetId, bool)>,
}

impl Netlist {
    /// One synchronous clock cycle: evaluate combinational logic from the
    /// inputs and current registers, sample the outputs, then latch every
    /// register at once.
    pub fn step_bank(
        &self,
        bank: &mut dyn RegisterBank,
        inputs: &[bool],
        overrides: &[NetOverride],
    ) -> Result<StepOutcome, SimError> {
        if inputs.len() != self.inputs().len() {
            return Err(SimError::InputWidth {
                expected: self.inputs().len(),
                got: inputs.len(),
            });
        }
        let overridden = |net: NetId| overrides.iter().find(|o| o.net == net);
        let forced_hold: Vec<usize> = self
            .registers()
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_hold() && overridden(r.net).is_some())
            .map(|(i, _)| i)
            .collect();

        let (needed, order): (Vec<bool>, Vec<usize>) = if overrides.is_empty() {
            (
                (0..self.net_count()).map(|n| self.is_live(n)).collect(),
                self.live_order().to_vec(),
            )
        } else {
            let mut roots: Vec<NetId> = (0..self.net_count()).filter(|&n| self.is_live(n)).collect();
            roots.extend(overrides.iter().map(|o| o.net));
            let needed = self.cone(&roots);
            let order = self
                .topo_order()
                .iter()
                .copied()
                .filter(|&g| needed[self.gates()[g].output])
                .collect();
            (needed, order)
        };

        let mut values: Vec<Option<bool>> = vec![None; self.net_count()];
        let mut natural = Vec::new();
        let mut settle = |net: NetId, v: bool, values: &mut Vec<Option<bool>>| {
            let v = match overridden(net) {
                Some(o) => {
                    natural.push((net, v));
                    o.apply(v)
                }
                None => v,
            };
            values[net] = Some(v);
        };
        for (i, &net) in self.inputs().iter().enumerate() {
            if needed[net] {
                settle(net, inputs[i], &mut values);
            }
        }
        for (i, r) in self.registers().iter().enumerate() {
            if needed[r.net] {
                settle(r.net, bank.read(i)?, &mut values);
            }
        }
        for &g in &order {
            let gate = &self.gates()[g];
            let mut ins = [false; 3];
            for (k, &n) in gate.inputs.iter().enumerate() {
                ins[k] = values[n].expect("topological order evaluates fan-in first");
            }
            settle(gate.output, gate.kind.eval(&ins[..gate.inputs.len()]), &mut values);
        }

        let outputs = self
            .outputs()
            .iter()
            .map(|o| values[o.net].expect("outputs are live"))
            .collect();
        let next: Vec<(usize, bool)> = self
            .registers()
            .iter()
            .enumerate()
            .filter(|(i, r)| !r.is_hold() || forced_hold.contains(i))
            .map(|(i, r)| (i, values[r.data].expect("register data is live")))
            .collect();
        for (i, v) in next {
            bank.write(i, v);
        }
        Ok(StepOutcome {
            outputs,
            nets: values,
            natural,
        })
    }

    /// Evaluate every net (not just the live cone) for the given register
    /// and input values, without touching any state.
    pub fn evaluate_all(&self, regs: &[bool], inputs: &[bool]) -> Vec<bool> {
        let mut values = vec![false; self.net_count()];
        for (net, v) in values.iter_mut().enumerate() {
            match self.driver(net) {
                Driver::Input(i) => *v = inputs[i],
                Driver::Register(r) => *v = regs[r],
                Driver::Gate(_) => {}
            }
        }
        for &g in self.topo_order() {
            let gate = &self.gates()[g];
            let ins: Vec<bool> = gate.inputs.iter().map(|&n| values[n]).collect();
            values[gate.output] = gate.kind.eval(&ins);
        }
        values
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmulatorState {
    pub netlist_id: u64,
    pub cycle: u64,
    pub regs: Bits,
    pub last_outputs: Bits,
}

const STATE_MAGIC: &[u8; 4] = b"EMUS";

impl EmulatorState {
    pub fn new(netlist: &Netlist) -> Self {
        Self {
            netlist_id: netlist.id(),
            cycle: 0,
            regs: netlist.initial_registers(),
            last_outputs: vec![false; netlist.outputs().len()],
        }
    }

    pub fn check(&self, netlist: &Netlist) -> Result<(), SimError> {
        if self.netlist_id != netlist.id() {
            return Err(SimError::NetlistMismatch {
                state: self.netlist_id,
                netlist: netlist.id(),
            });
        }
        if self.regs.len() != netlist.registers().len() {
            return Err(SimError::RegisterCount {
                expected: netlist.registers().len(),
                got: self.regs.len(),
            });
        }
        Ok(())
    }

    pub fn step(&mut self, netlist: &Netlist, inputs: &[bool]) -> Result<Bits, SimError> {
        self.step_with(netlist, inputs, &[]).map(|o| o.outputs)
    }

    pub fn step_with(
        &mut self,
        netlist: &Netlist,
        inputs: &[bool],
        overrides: &[NetOverride],
    ) -> Result<StepOutcome, SimError> {
        self.check(netlist)?;
        let outcome = netlist.step_bank(&mut self.regs, inputs, overrides)?;
        self.cycle += 1;
        self.last_outputs.clone_from(&outcome.outputs);
        Ok(outcome)
    }

    /// Run `n_cycles` cycles, drawing the vector for absolute cycle `t` from
    /// `stimulus[t]`. On error the state is left at the failing cycle.
    pub fn run(&mut self, netlist: &Netlist, stimulus: &Stimulus, n_cycles: u64) -> Result<Trace, SimError> {
        let mut trace = Trace::default();
        for _ in 0..n_cycles {
            let v = stimulus.vector(self.cycle)?;
            trace.push(self.step(netlist, v)?);
        }
        Ok(trace)
    }

    /// Canonical byte form: magic, netlist id, cycle, registers and last
    /// outputs (one byte per bit), trailing CRC32 over everything before it.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.raw(STATE_MAGIC)
            .u64(self.netlist_id)
            .u64(self.cycle)
            .bits(&self.regs)
            .bits(&self.last_outputs);
        let mut bytes = e.finish();
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        bytes
    }

    pub fn restore(bytes: &[u8]) -> Result<Self, SnapshotError> {
        if bytes.len() < 4 {
            return Err(SnapshotError::Decode(DecodeError::Truncated {
                offset: 0,
                needed: 4,
            }));
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(SnapshotError::Checksum { stored, actual });
        }
        let mut d = Decoder::new(body);
        if d.take(4)? != STATE_MAGIC {
            return Err(SnapshotError::BadMagic);
        }
        let state = EmulatorState {
            netlist_id: d.u64()?,
            cycle: d.u64()?,
            regs: d.bits()?,
            last_outputs: d.bits()?,
        };
        d.finish()?;
        Ok(state)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SnapshotError {
    #[error("checksum mismatch: stored {stored:08x}, computed {actual:08x}")]
    Checksum { stored: u32, actual: u32 },
    #[error("not an emulator state snapshot")]
    BadMagic,
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// Per-cycle input vectors, indexed by absolute cycle number.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Stimulus {
    width: usize,
    rows: Vec<Bits>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("stimulus line {line}: {msg}")]
pub struct StimulusError {
    pub line: usize,
    pub msg: String,
}

impl Stimulus {
    pub fn new(width: usize, rows: Vec<Bits>) -> Result<Self, StimulusError> {
        for (i, r) in rows.iter().enumerate() {
            if r.len() != width {
                return Err(StimulusError {
                    line: i + 1,
                    msg: format!("expected {width} bits, got {}", r.len()),
                });
            }
        }
        Ok(Self { width, rows })
    }

    /// Vectors from a Fibonacci LFSR over `width` bits (at most 64): the
    /// register shifts left and the new low bit is the parity of `state & taps`.
    pub fn lfsr(width: usize, taps: u64, seed: u64, length: usize) -> Self {
        assert!(width <= 64, "lfsr stimulus is at most 64 bits wide");
        let mask = if width == 64 { u64::MAX } else { (1u64 << width) - 1 };
        let mut state = if seed & mask == 0 { 1 } else { seed & mask };
        let rows = (0..length)
            .map(|_| {
                let row = (0..width).map(|b| state >> b & 1 == 1).collect();
                let feedback = (state & taps).count_ones() as u64 & 1;
                state = ((state << 1) | feedback) & mask;
                if state == 0 {
                    state = 1;
                }
                row
            })
            .collect();
        Self { width, rows }
    }

    /// One line per cycle, `0`/`1` characters in input declaration order.
    /// Blank lines and `#` comments are skipped.
    pub fn parse(text: &str, width: usize) -> Result<Self, StimulusError> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let row = parse_bits(line).ok_or_else(|| StimulusError {
                line: i + 1,
                msg: format!("invalid bit string `{line}`"),
            })?;
            if row.len() != width {
                return Err(StimulusError {
                    line: i + 1,
                    msg: format!("expected {width} bits, got {}", row.len()),
                });
            }
            rows.push(row);
        }
        Ok(Self { width, rows })
    }

    pub fn to_text(&self) -> String {
        self.rows.iter().map(|r| format_bits(r) + "\n").collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Bits] {
        &self.rows
    }

    pub fn vector(&self, cycle: u64) -> Result<&[bool], SimError> {
        self.rows
            .get(cycle as usize)
            .map(Vec::as_slice)
            .ok_or(SimError::StimulusExhausted {
                cycle,
                available: self.rows.len(),
            })
    }
}

pub fn parse_bits(s: &str) -> Option<Bits> {
    s.chars()
        .map(|c| match c {
            '0' => Some(false),
            '1' => Some(true),
            _ => None,
        })
        .collect()
}

pub fn format_bits(bits: &[bool]) -> String {
    bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

/// Output bits, one entry per simulated cycle.
#[derive(Debug, Clone, PartialEq, Eq, Default, Hash)]
pub struct Trace(pub Vec<Bits>);

impl Trace {
    pub fn push(&mut self, outputs: Bits) {
        self.0.push(outputs);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn extend(&mut self, other: Trace) {
        self.0.extend(other.0);
    }

    pub fn rows(&self) -> &[Bits] {
        &self.0
    }

    /// Index of the first row that differs (or where one trace ends early).
    pub fn first_divergence(&self, other: &Trace) -> Option<usize> {
        let common = self.0.len().min(other.0.len());
        (0..common)
            .find(|&i| self.0[i] != other.0[i])
            .or_else(|| (self.0.len() != other.0.len()).then_some(common))
    }

    /// SHA-256 prefix of the text form.
    pub fn digest(&self) -> u64 {
        super::netlist::content_hash(&self.to_string())
    }
}

impl fmt::Display for Trace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in &self.0 {
            writeln!(f, "{}", format_bits(row))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const XOR: &str = "input a\ninput b\nwire s\ngate XOR s a b\noutput o s\n";
    const FULL_ADDER: &str = "\
input a
input b
input cin
wire t
wire sum
wire ab
wire tc
wire cout
gate XOR t a b
gate XOR sum t cin
gate AND ab a b
gate AND tc t cin
gate OR cout ab tc
output sum sum
output cout cout
";

    fn bits(s: &str) -> Bits {
        parse_bits(s).unwrap()
    }

    #[test]
    fn full_adder_cases() {
        let n = Netlist::parse(FULL_ADDER).unwrap();
        let mut s = EmulatorState::new(&n);
        assert_eq!(s.step(&n, &bits("110")).unwrap(), bits("01"));
        assert_eq!(s.step(&n, &bits("100")).unwrap(), bits("10"));
        assert_eq!(s.cycle, 2);
    }

    #[test]
    fn xor_trace() {
        let n = Netlist::parse(XOR).unwrap();
        let stim = Stimulus::parse("00\n01\n11\n", 2).unwrap();
        let mut s = EmulatorState::new(&n);
        let t = s.run(&n, &stim, 3).unwrap();
        assert_eq!(t.to_string(), "0\n1\n0\n");
    }

    #[test]
    fn zero_cycles_is_identity() {
        let n = Netlist::parse(XOR).unwrap();
        let mut s = EmulatorState::new(&n);
        let before = s.clone();
        assert!(s.run(&n, &Stimulus::default(), 0).unwrap().is_empty());
        assert_eq!(s, before);
    }

    #[test]
    fn input_width_mismatch() {
        let n = Netlist::parse(XOR).unwrap();
        let mut s = EmulatorState::new(&n);
        assert_eq!(
            s.step(&n, &bits("1")),
            Err(SimError::InputWidth { expected: 2, got: 1 })
        );
    }

    #[test]
    fn exhausted_stimulus() {
        let n = Netlist::parse(XOR).unwrap();
        let stim = Stimulus::parse("00\n", 2).unwrap();
        let mut s = EmulatorState::new(&n);
        assert_eq!(
            s.run(&n, &stim, 2),
            Err(SimError::StimulusExhausted { cycle: 1, available: 1 })
        );
    }

    #[test]
    fn snapshot_round_trip_and_checksum() {
        let n = Netlist::parse("wire n\nreg q n init 1\ngate NOT n q\noutput o q").unwrap();
        let mut s = EmulatorState::new(&n);
        for _ in 0..7 {
            s.step(&n, &[]).unwrap();
        }
        let bytes = s.snapshot();
        assert_eq!(EmulatorState::restore(&bytes).unwrap(), s);
        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 1;
        assert!(matches!(
            EmulatorState::restore(&bad),
            Err(SnapshotError::Checksum { .. })
        ));
        assert!(EmulatorState::restore(&bytes[..bytes.len() - 6]).is_err());
    }

    #[test]
    fn stimulus_parse_errors() {
        assert_eq!(Stimulus::parse("01\n0x\n", 2).unwrap_err().line, 2);
        assert_eq!(Stimulus::parse("01\n\n011\n", 2).unwrap_err().line, 3);
    }

    #[test]
    fn lfsr_is_deterministic_and_nonzero() {
        let a = Stimulus::lfsr(8, 0b1011_1000, 0x5a, 50);
        let b = Stimulus::lfsr(8, 0b1011_1000, 0x5a, 50);
        assert_eq!(a, b);
        assert!(a.rows().iter().all(|r| r.iter().any(|&x| x)));
    }

    #[test]
    fn mux_selects_second_data_input_when_set() {
        let n = Netlist::parse("input s\ninput a\ninput b\nwire m\ngate MUX m s a b\noutput o m").unwrap();
        let mut st = EmulatorState::new(&n);
        assert_eq!(st.step(&n, &bits("010")).unwrap(), bits("1"));
        assert_eq!(st.step(&n, &bits("101")).unwrap(), bits("1"));
        assert_eq!(st.step(&n, &bits("110")).unwrap(), bits("0"));
    }

    #[test]
    fn forced_hold_register_latches_forced_value() {
        let n = Netlist::parse("reg m m\noutput o m").unwrap();
        let mut st = EmulatorState::new(&n);
        let m = n.net("m").unwrap();
        st.step_with(&n, &[], &[NetOverride { net: m, action: OverrideAction::Force(true) }])
            .unwrap();
        assert_eq!(st.regs, vec![true]);
    }
}
