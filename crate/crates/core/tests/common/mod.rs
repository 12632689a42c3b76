#![allow(dead_code)]

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use ckptlab::plugin::{ConnVirt, EnvVirt, LockPatch, PathVirt, Plugin, TidVirt};
use ckptlab::process::ProcessOptions;

/// Virtualization plugins at their usual ranks.
pub fn virt_plugins() -> Vec<Arc<dyn Plugin>> {
    vec![
        Arc::new(TidVirt::new(10)),
        Arc::new(ConnVirt::new(20)),
        Arc::new(PathVirt::new(30)),
        Arc::new(EnvVirt::new(40)),
    ]
}

pub fn with_lock_patch(mut plugins: Vec<Arc<dyn Plugin>>) -> Vec<Arc<dyn Plugin>> {
    plugins.push(Arc::new(LockPatch::new(15)));
    plugins
}

pub fn options(dir: &Path) -> ProcessOptions {
    ProcessOptions {
        ckpt_dir: dir.to_path_buf(),
        env: Default::default(),
        ..ProcessOptions::default()
    }
}

#[derive(Clone, Copy)]
enum Op {
    And,
    Or,
    Not,
    Xor,
    Nand,
    Nor,
    Mux,
}

/// A second, deliberately naive gate-level simulator: nets are looked up by
/// name and combinational logic is settled by repeated sweeps until nothing
/// changes. It shares no code with the library.
pub struct Oracle {
    inputs: Vec<String>,
    outputs: Vec<(String, String)>,
    gates: Vec<(Op, String, Vec<String>)>,
    regs: Vec<(String, String, bool)>,
    state: HashMap<String, bool>,
}

impl Oracle {
    pub fn new(src: &str) -> Self {
        let mut o = Oracle {
            inputs: Vec::new(),
            outputs: Vec::new(),
            gates: Vec::new(),
            regs: Vec::new(),
            state: HashMap::new(),
        };
        for line in src.lines() {
            let line = line.split('#').next().unwrap_or("");
            let w: Vec<&str> = line.split_whitespace().collect();
            match w.as_slice() {
                ["input", n] => o.inputs.push(n.to_string()),
                ["output", n, net] => o.outputs.push((n.to_string(), net.to_string())),
                ["wire", _] | [] => {}
                ["gate", kind, out, ins @ ..] => {
                    let op = match *kind {
                        "AND" => Op::And,
                        "OR" => Op::Or,
                        "NOT" => Op::Not,
                        "XOR" => Op::Xor,
                        "NAND" => Op::Nand,
                        "NOR" => Op::Nor,
                        "MUX" => Op::Mux,
                        other => panic!("oracle: gate {other}"),
                    };
                    o.gates
                        .push((op, out.to_string(), ins.iter().map(|s| s.to_string()).collect()));
                }
                ["reg", n, d] => o.regs.push((n.to_string(), d.to_string(), false)),
                ["reg", n, d, "init", v] => o.regs.push((n.to_string(), d.to_string(), *v == "1")),
                other => panic!("oracle: cannot read {other:?}"),
            }
        }
        for (n, _, init) in &o.regs {
            o.state.insert(n.clone(), *init);
        }
        o
    }

    pub fn register_names(&self) -> Vec<String> {
        self.regs.iter().map(|r| r.0.clone()).collect()
    }

    pub fn flip(&mut self, reg: &str) {
        let v = self.state.get_mut(reg).expect("oracle: unknown register");
        *v = !*v;
    }

    fn settle(&self, inputs: &[bool], forced: &HashMap<String, bool>) -> HashMap<String, bool> {
        let mut v: HashMap<String, bool> = HashMap::new();
        for (n, b) in self.inputs.iter().zip(inputs) {
            v.insert(n.clone(), *b);
        }
        for (n, b) in &self.state {
            v.insert(n.clone(), *b);
        }
        for (n, b) in forced {
            v.insert(n.clone(), *b);
        }
        loop {
            let mut changed = false;
            for (op, out, ins) in &self.gates {
                if forced.contains_key(out) {
                    continue;
                }
                let got: Option<Vec<bool>> = ins.iter().map(|i| v.get(i).copied()).collect();
                let Some(a) = got else { continue };
                let r = match op {
                    Op::And => a[0] && a[1],
                    Op::Or => a[0] || a[1],
                    Op::Not => !a[0],
                    Op::Xor => a[0] != a[1],
                    Op::Nand => !(a[0] && a[1]),
                    Op::Nor => !(a[0] || a[1]),
                    Op::Mux => {
                        if a[0] {
                            a[2]
                        } else {
                            a[1]
                        }
                    }
                };
                if v.get(out) != Some(&r) {
                    v.insert(out.clone(), r);
                    changed = true;
                }
            }
            if !changed {
                return v;
            }
        }
    }

    /// One cycle with some nets pinned to a value; returns the outputs.
    pub fn step_forced(&mut self, inputs: &[bool], forced: &HashMap<String, bool>) -> Vec<bool> {
        let v = self.settle(inputs, forced);
        let outs = self.outputs.iter().map(|(_, net)| v[net]).collect();
        let next: Vec<(String, bool)> = self.regs.iter().map(|(n, d, _)| (n.clone(), v[d])).collect();
        for (n, b) in next {
            self.state.insert(n, b);
        }
        outs
    }

    pub fn step(&mut self, inputs: &[bool]) -> Vec<bool> {
        self.step_forced(inputs, &HashMap::new())
    }

    /// Value of a net for the current state and inputs, without stepping.
    pub fn peek(&self, inputs: &[bool], net: &str) -> bool {
        self.settle(inputs, &HashMap::new())[net]
    }

    pub fn run(&mut self, rows: &[Vec<bool>]) -> Vec<Vec<bool>> {
        rows.iter().map(|r| self.step(r)).collect()
    }
}
