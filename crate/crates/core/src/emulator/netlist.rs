//! Gate-level netlist: parsing, validation and the static evaluation schedule.
//!
//! Source grammar, one declaration per line, `#` starts a comment:
//!
//! ```text
//! input NAME
//! output NAME NET
//! wire NAME
//! gate KIND OUT IN...
//! reg NAME IN [init 0|1]
//! ```
//!
//! Every net has exactly one driver: an input port, a gate output or a
//! register output. Combinational loops are rejected; feedback is only
//! allowed through registers.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub type NetId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GateKind {
    And,
    Or,
    Not,
    Xor,
    Nand,
    Nor,
    /// Inputs are `[select, a, b]`; the output is `a` when select is 0 and `b` when it is 1.
    Mux,
}

impl GateKind {
    pub fn arity(self) -> usize {
        match self {
            GateKind::Not => 1,
            GateKind::Mux => 3,
            _ => 2,
        }
    }

    pub fn eval(self, ins: &[bool]) -> bool {
        match self {
            GateKind::And => ins[0] & ins[1],
            GateKind::Or => ins[0] | ins[1],
            GateKind::Not => !ins[0],
            GateKind::Xor => ins[0] ^ ins[1],
            GateKind::Nand => !(ins[0] & ins[1]),
            GateKind::Nor => !(ins[0] | ins[1]),
            GateKind::Mux => {
                if ins[0] {
                    ins[2]
                } else {
                    ins[1]
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GateKind::And => "AND",
            GateKind::Or => "OR",
            GateKind::Not => "NOT",
            GateKind::Xor => "XOR",
            GateKind::Nand => "NAND",
            GateKind::Nor => "NOR",
            GateKind::Mux => "MUX",
        }
    }

    pub const ALL: [GateKind; 7] = [
        GateKind::And,
        GateKind::Or,
        GateKind::Not,
        GateKind::Xor,
        GateKind::Nand,
        GateKind::Nor,
        GateKind::Mux,
    ];
}

impl FromStr for GateKind {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        GateKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or(())
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gate {
    pub kind: GateKind,
    pub output: NetId,
    pub inputs: Vec<NetId>,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Register {
    pub name: String,
    /// The net this register drives (same name as the register).
    pub net: NetId,
    pub data: NetId,
    pub init: bool,
}

impl Register {
    /// A register whose data input is its own output keeps its value forever.
    pub fn is_hold(&self) -> bool {
        self.data == self.net
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputPort {
    pub name: String,
    pub net: NetId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Driver {
    Input(usize),
    Gate(usize),
    Register(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetlistErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unknown gate kind `{0}`")]
    UnknownGateKind(String),
    #[error("name `{0}` is declared more than once")]
    DuplicateName(String),
    #[error("net `{0}` has more than one driver")]
    DuplicateDriver(String),
    #[error("reference to undeclared net `{0}`")]
    Undeclared(String),
    #[error("wire `{0}` has no driver")]
    Undriven(String),
    #[error("gate {kind} expects {expected} inputs, got {got}")]
    Arity {
        kind: GateKind,
        expected: usize,
        got: usize,
    },
    #[error("combinational cycle through net `{0}`")]
    CombinationalCycle(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct NetlistError {
    pub line: usize,
    pub kind: NetlistErrorKind,
}

fn err(line: usize, kind: NetlistErrorKind) -> NetlistError {
    NetlistError { line, kind }
}

#[derive(Debug, Clone)]
pub struct Netlist {
    nets: Vec<String>,
    index: HashMap<String, NetId>,
    drivers: Vec<Driver>,
    inputs: Vec<NetId>,
    outputs: Vec<OutputPort>,
    gates: Vec<Gate>,
    registers: Vec<Register>,
    /// All gates, dependencies first.
    order: Vec<usize>,
    /// Nets that must be evaluated every cycle: the fan-in cone of the
    /// output ports and of every non-hold register's data input.
    live: Vec<bool>,
    live_order: Vec<usize>,
    id: u64,
    source: String,
}

enum Decl<'a> {
    Input(&'a str),
    Output(&'a str, &'a str),
    Wire(&'a str),
    Gate(GateKind, &'a str, Vec<&'a str>),
    Reg(&'a str, &'a str, bool),
}

fn parse_line(line_no: usize, line: &str) -> Result<Option<Decl<'_>>, NetlistError> {
    let line = line.split('#').next().unwrap_or("");
    let toks: Vec<&str> = line.split_whitespace().collect();
    let Some(&head) = toks.first() else {
        return Ok(None);
    };
    let syntax = |msg: &str| err(line_no, NetlistErrorKind::Syntax(msg.to_string()));
    let decl = match head {
        "input" => match toks.as_slice() {
            [_, name] => Decl::Input(name),
            _ => return Err(syntax("expected `input NAME`")),
        },
        "output" => match toks.as_slice() {
            [_, name, net] => Decl::Output(name, net),
            _ => return Err(syntax("expected `output NAME NET`")),
        },
        "wire" => match toks.as_slice() {
            [_, name] => Decl::Wire(name),
            _ => return Err(syntax("expected `wire NAME`")),
        },
        "gate" => {
            if toks.len() < 3 {
                return Err(syntax("expected `gate KIND OUT IN...`"));
            }
            let kind = toks[1]
                .parse::<GateKind>()
                .map_err(|_| err(line_no, NetlistErrorKind::UnknownGateKind(toks[1].into())))?;
            let ins = toks[3..].to_vec();
            if ins.len() != kind.arity() {
                return Err(err(
                    line_no,
                    NetlistErrorKind::Arity {
                        kind,
                        expected: kind.arity(),
                        got: ins.len(),
                    },
                ));
            }
            Decl::Gate(kind, toks[2], ins)
        }
        "reg" => match toks.as_slice() {
            [_, name, data] => Decl::Reg(name, data, false),
            [_, name, data, "init", "0"] => Decl::Reg(name, data, false),
            [_, name, data, "init", "1"] => Decl::Reg(name, data, true),
            _ => return Err(syntax("expected `reg NAME IN [init 0|1]`")),
        },
        other => return Err(syntax(&format!("unknown declaration `{other}`"))),
    };
    Ok(Some(decl))
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '[' | ']' | '$'))
}

impl Netlist {
    pub fn parse(text: &str) -> Result<Netlist, NetlistError> {
        let mut decls = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if let Some(d) = parse_line(i + 1, line)? {
                decls.push((i + 1, d));
            }
        }

        // Pass 1: declare nets.
        let mut nets = Vec::new();
        let mut index = HashMap::new();
        let mut wire_lines = HashMap::new();
        let mut declare = |name: &str, line: usize| -> Result<NetId, NetlistError> {
            if !valid_name(name) {
                return Err(err(
                    line,
                    NetlistErrorKind::Syntax(format!("invalid name `{name}`")),
                ));
            }
            if index.contains_key(name) {
                return Err(err(line, NetlistErrorKind::DuplicateName(name.into())));
            }
            let id = nets.len();
            nets.push(name.to_string());
            index.insert(name.to_string(), id);
            Ok(id)
        };
        let mut inputs = Vec::new();
        let mut drivers: Vec<Option<Driver>> = Vec::new();
        let mut reg_decls = Vec::new();
        for (line, d) in &decls {
            match d {
                Decl::Input(name) => {
                    let id = declare(name, *line)?;
                    drivers.push(Some(Driver::Input(inputs.len())));
                    inputs.push(id);
                }
                Decl::Wire(name) => {
                    let id = declare(name, *line)?;
                    drivers.push(None);
                    wire_lines.insert(id, *line);
                }
                Decl::Reg(name, data, init) => {
                    let id = declare(name, *line)?;
                    drivers.push(Some(Driver::Register(reg_decls.len())));
                    reg_decls.push((*line, id, *data, *init));
                }
                _ => {}
            }
        }

        let lookup = |name: &str, line: usize| -> Result<NetId, NetlistError> {
            index
                .get(name)
                .copied()
                .ok_or_else(|| err(line, NetlistErrorKind::Undeclared(name.into())))
        };

        // Pass 2: resolve references.
        let mut registers = Vec::new();
        for (line, net, data, init) in reg_decls {
            registers.push(Register {
                name: nets[net].clone(),
                net,
                data: lookup(data, line)?,
                init,
            });
        }
        let mut gates = Vec::new();
        let mut outputs: Vec<OutputPort> = Vec::new();
        for (line, d) in &decls {
            match d {
                Decl::Gate(kind, out, ins) => {
                    let output = lookup(out, *line)?;
                    let inputs = ins
                        .iter()
                        .map(|n| lookup(n, *line))
                        .collect::<Result<Vec<_>, _>>()?;
                    if drivers[output].is_some() {
                        return Err(err(*line, NetlistErrorKind::DuplicateDriver((*out).into())));
                    }
                    drivers[output] = Some(Driver::Gate(gates.len()));
                    gates.push(Gate {
                        kind: *kind,
                        output,
                        inputs,
                        line: *line,
                    });
                }
                Decl::Output(name, net) => {
                    if outputs.iter().any(|o| o.name == *name) {
                        return Err(err(*line, NetlistErrorKind::DuplicateName((*name).into())));
                    }
                    outputs.push(OutputPort {
                        name: name.to_string(),
                        net: lookup(net, *line)?,
                    });
                }
                _ => {}
            }
        }
        let drivers = drivers
            .into_iter()
            .enumerate()
            .map(|(id, d)| d.ok_or_else(|| err(wire_lines[&id], NetlistErrorKind::Undriven(nets[id].clone()))))
            .collect::<Result<Vec<_>, _>>()?;

        let order = topo_order(&gates, &drivers, &nets)?;
        let mut netlist = Netlist {
            nets,
            index,
            drivers,
            inputs,
            outputs,
            gates,
            registers,
            order,
            live: Vec::new(),
            live_order: Vec::new(),
            id: 0,
            source: String::new(),
        };
        let roots: Vec<NetId> = netlist
            .outputs
            .iter()
            .map(|o| o.net)
            .chain(netlist.registers.iter().filter(|r| !r.is_hold()).map(|r| r.data))
            .collect();
        netlist.live = netlist.cone(&roots);
        netlist.live_order = netlist
            .order
            .iter()
            .copied()
            .filter(|&g| netlist.live[netlist.gates[g].output])
            .collect();
        netlist.source = netlist.canonical_text();
        netlist.id = content_hash(&netlist.source);
        Ok(netlist)
    }

    /// Backward closure over combinational drivers from `roots`.
    pub fn cone(&self, roots: &[NetId]) -> Vec<bool> {
        let mut seen = vec![false; self.nets.len()];
        let mut stack: Vec<NetId> = roots.to_vec();
        while let Some(n) = stack.pop() {
            if std::mem::replace(&mut seen[n], true) {
                continue;
            }
            if let Driver::Gate(g) = self.drivers[n] {
                stack.extend(self.gates[g].inputs.iter().copied());
            }
        }
        seen
    }

    /// Canonical source: ports and registers in declaration order, wires and
    /// gates sorted so that gate declaration order does not affect identity.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for &i in &self.inputs {
            out.push_str(&format!("input {}\n", self.nets[i]));
        }
        let mut wires: Vec<&str> = self
            .drivers
            .iter()
            .enumerate()
            .filter(|(_, d)| matches!(d, Driver::Gate(_)))
            .map(|(n, _)| self.nets[n].as_str())
            .collect();
        wires.sort_unstable();
        for w in wires {
            out.push_str(&format!("wire {w}\n"));
        }
        let mut gates: Vec<String> = self
            .gates
            .iter()
            .map(|g| {
                let ins: Vec<&str> = g.inputs.iter().map(|&n| self.nets[n].as_str()).collect();
                format!("gate {} {} {}\n", g.kind, self.nets[g.output], ins.join(" "))
            })
            .collect();
        gates.sort_unstable();
        gates.iter().for_each(|g| out.push_str(g));
        for r in &self.registers {
            out.push_str(&format!(
                "reg {} {} init {}\n",
                r.name,
                self.nets[r.data],
                r.init as u8
            ));
        }
        for o in &self.outputs {
            out.push_str(&format!("output {} {}\n", o.name, self.nets[o.net]));
        }
        out
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn net_count(&self) -> usize {
        self.nets.len()
    }

    pub fn net_name(&self, net: NetId) -> &str {
        &self.nets[net]
    }

    pub fn net(&self, name: &str) -> Option<NetId> {
        self.index.get(name).copied()
    }

    pub fn driver(&self, net: NetId) -> Driver {
        self.drivers[net]
    }

    pub fn inputs(&self) -> &[NetId] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[OutputPort] {
        &self.outputs
    }

    pub fn output_index(&self, name: &str) -> Option<usize> {
        self.outputs.iter().position(|o| o.name == name)
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn registers(&self) -> &[Register] {
        &self.registers
    }

    pub fn register_index(&self, name: &str) -> Option<usize> {
        self.registers.iter().position(|r| r.name == name)
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.order
    }

    pub fn live_order(&self) -> &[usize] {
        &self.live_order
    }

    pub fn is_live(&self, net: NetId) -> bool {
        self.live[net]
    }

    pub fn initial_registers(&self) -> Vec<bool> {
        self.registers.iter().map(|r| r.init).collect()
    }
}

fn topo_order(gates: &[Gate], drivers: &[Driver], nets: &[String]) -> Result<Vec<usize>, NetlistError> {
    let mut indegree = vec![0usize; gates.len()];
    let mut fanout: Vec<Vec<usize>> = vec![Vec::new(); gates.len()];
    for (g, gate) in gates.iter().enumerate() {
        for &i in &gate.inputs {
            if let Driver::Gate(src) = drivers[i] {
                indegree[g] += 1;
                fanout[src].push(g);
            }
        }
    }
    let mut ready: VecDeque<usize> = (0..gates.len()).filter(|&g| indegree[g] == 0).collect();
    let mut order = Vec::with_capacity(gates.len());
    while let Some(g) = ready.pop_front() {
        order.push(g);
        for &next in &fanout[g] {
            indegree[next] -= 1;
            if indegree[next] == 0 {
                ready.push_back(next);
            }
        }
    }
    if order.len() != gates.len() {
        let stuck: BTreeSet<usize> = (0..gates.len()).filter(|&g| indegree[g] > 0).collect();
        let first = stuck
            .iter()
            .copied()
            .min_by_key(|&g| gates[g].line)
            .expect("cycle implies at least one gate");
        return Err(err(
            gates[first].line,
            NetlistErrorKind::CombinationalCycle(nets[gates[first].output].clone()),
        ));
    }
    Ok(order)
}

pub(crate) fn content_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    const XOR: &str = "input a\ninput b\nwire s\ngate XOR s a b\noutput o s\n";

    #[test]
    fn minimal_xor() {
        let n = Netlist::parse(XOR).unwrap();
        assert_eq!(n.inputs().len(), 2);
        assert_eq!(n.gates().len(), 1);
        assert_eq!(n.registers().len(), 0);
        assert_eq!(n.outputs()[0].name, "o");
    }

    #[test]
    fn arity_mismatch_reports_line() {
        let e = Netlist::parse("input a\nwire w\ngate AND w a\noutput o w").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(matches!(e.kind, NetlistErrorKind::Arity { expected: 2, got: 1, .. }));
    }

    #[test]
    fn duplicate_driver() {
        let e = Netlist::parse("input a\ninput b\nwire w\ngate AND w a b\ngate OR w a b\noutput o w")
            .unwrap_err();
        assert_eq!(e.line, 5);
        assert_eq!(e.kind, NetlistErrorKind::DuplicateDriver("w".into()));
    }

    #[test]
    fn gate_driving_an_input_is_a_duplicate_driver() {
        let e = Netlist::parse("input a\ninput b\ngate AND a a b\n").unwrap_err();
        assert_eq!(e.kind, NetlistErrorKind::DuplicateDriver("a".into()));
    }

    #[test]
    fn undeclared_reference() {
        let e = Netlist::parse("input a\nwire w\ngate NOT w zz\noutput o w").unwrap_err();
        assert_eq!(e.line, 3);
        assert_eq!(e.kind, NetlistErrorKind::Undeclared("zz".into()));
    }

    #[test]
    fn combinational_cycle() {
        let e = Netlist::parse("input a\nwire x\nwire y\ngate AND x a y\ngate NOT y x\noutput o y")
            .unwrap_err();
        assert!(matches!(e.kind, NetlistErrorKind::CombinationalCycle(_)));
        assert_eq!(e.line, 4);
    }

    #[test]
    fn cycle_through_register_is_fine() {
        let n = Netlist::parse("wire n\nreg q n\ngate NOT n q\noutput o q").unwrap();
        assert_eq!(n.registers().len(), 1);
    }

    #[test]
    fn undriven_wire() {
        let e = Netlist::parse("input a\nwire w\noutput o w").unwrap_err();
        assert_eq!(e.kind, NetlistErrorKind::Undriven("w".into()));
        assert_eq!(e.line, 2);
    }

    #[test]
    fn junk_never_panics() {
        for text in ["gate", "reg", "reg a", "output", "gate FOO x y z", "input", "\u{0}\u{1}", "reg q q init 2", "gate MUX m a"] {
            assert!(Netlist::parse(text).is_err(), "{text:?}");
        }
    }

    #[test]
    fn identity_ignores_gate_order_and_comments() {
        let a = Netlist::parse("input a\ninput b\nwire x\nwire y\ngate AND x a b\ngate NOT y x\noutput o y").unwrap();
        let b = Netlist::parse("# permuted\ninput a\ninput b\nwire y\nwire x\ngate NOT y x\ngate AND x a b # and\noutput o y").unwrap();
        assert_eq!(a.id(), b.id());
        assert_eq!(a.canonical_text(), b.canonical_text());
    }

    #[test]
    fn canonical_text_reparses_to_same_id() {
        let a = Netlist::parse("input a\nwire n\nreg q n init 1\ngate XOR n q a\noutput o q").unwrap();
        let b = Netlist::parse(a.source()).unwrap();
        assert_eq!(a.id(), b.id());
    }

    #[test]
    fn hold_registers_are_not_live() {
        let n = Netlist::parse("wire n\nreg q n\ngate NOT n q\nreg m m\noutput o q").unwrap();
        assert!(n.registers()[1].is_hold());
        assert!(!n.is_live(n.net("m").unwrap()));
        assert!(n.is_live(n.net("q").unwrap()));
    }
}
