use std::sync::{Arc, Mutex};

use serde_json::{json, Value};

use ckptlab::call::{Call, CallError, CallTarget, Reply};
use ckptlab::emulator::{format_bits, EmulatorState, Netlist, Stimulus, Trace};
use ckptlab::engine::{Image, ImageHeader, VERSION};
use ckptlab::fault::{apply_restart_faults, classify, FaultSpec, Outcome};
use ckptlab::virt::{LayerStack, Next};
use ckptlab::workloads::COUNTER_PARITY;

const LFSR_TAPS: u64 = 0xB400;

fn rows(t: &Trace) -> Vec<String> {
    t.rows().iter().map(|r| format_bits(r)).collect()
}

fn stimulus(netlist: &Netlist, len: usize, seed: u64) -> Stimulus {
    Stimulus::lfsr(netlist.inputs().len(), LFSR_TAPS, seed.max(1), len)
}

/// Runs a design for `cycles` cycles twice: straight through, and split at
/// `split_at` with the state passed through an encoded image in between.
pub fn split_run(netlist_src: &str, cycles: u64, split_at: u64, seed: u64) -> Result<Value, String> {
    if split_at > cycles {
        return Err(format!("split cycle {split_at} is past the end ({cycles})"));
    }
    let netlist = Netlist::parse(netlist_src).map_err(|e| e.to_string())?;
    let stim = stimulus(&netlist, cycles as usize, seed);
    let whole = EmulatorState::new(&netlist)
        .run(&netlist, &stim, cycles)
        .map_err(|e| e.to_string())?;

    let mut first = EmulatorState::new(&netlist);
    let before = first.run(&netlist, &stim, split_at).map_err(|e| e.to_string())?;
    let image = Image {
        header: ImageHeader {
            version: VERSION,
            incarnation: 0,
            cycle: split_at,
            timestamp: 0,
            schedule_hash: 0,
        },
        sections: vec![("core.emulator".into(), first.snapshot())],
    };
    let bytes = image.encode();
    let decoded = Image::decode(&bytes).map_err(|e| e.to_string())?;
    let section = decoded.section("core.emulator").ok_or("image lost its state section")?;
    let mut second = EmulatorState::restore(section).map_err(|e| e.to_string())?;
    let after = second
        .run(&netlist, &stim, cycles - split_at)
        .map_err(|e| e.to_string())?;

    let mut joined = before.clone();
    joined.extend(after.clone());
    Ok(json!({
        "outputs": netlist.outputs().iter().map(|o| o.name.clone()).collect::<Vec<_>>(),
        "whole": rows(&whole),
        "before": rows(&before),
        "after": rows(&after),
        "image_bytes": bytes.len(),
        "identical": joined == whole,
    }))
}

/// Flips every register of the reference counter at every cycle of a
/// window and classifies each run against the fault-free one.
pub fn campaign_grid(start: u64, window: u64, run_length: u64) -> Result<Value, String> {
    if window == 0 || window > run_length {
        return Err("the flip window must be 1..=run length cycles".into());
    }
    let netlist = Netlist::parse(COUNTER_PARITY).map_err(|e| e.to_string())?;
    let checker = netlist.output_index("err").ok_or("counter has no checker")?;
    let stim = Stimulus::new(1, vec![vec![true]; (start + run_length) as usize]).map_err(|e| e.to_string())?;
    let mut base = EmulatorState::new(&netlist);
    base.run(&netlist, &stim, start).map_err(|e| e.to_string())?;
    let golden = base.clone().run(&netlist, &stim, run_length).map_err(|e| e.to_string())?;

    let names: Vec<String> = netlist.registers().iter().map(|r| r.name.clone()).collect();
    let mut cells = Vec::new();
    let mut counts = [0usize; 3];
    for reg in &names {
        let mut row = Vec::new();
        for offset in 0..window {
            let mut s = base.clone();
            let mut trace = s.run(&netlist, &stim, offset).map_err(|e| e.to_string())?;
            let flip = [FaultSpec::Flip { reg: reg.clone() }];
            let (mut s, _) = apply_restart_faults(&s, &netlist, &flip).map_err(|e| e.to_string())?;
            trace.extend(s.run(&netlist, &stim, run_length - offset).map_err(|e| e.to_string())?);
            let (outcome, first) = classify(&trace, &golden, checker, start);
            counts[match outcome {
                Outcome::Masked => 0,
                Outcome::SilentDataCorruption => 1,
                Outcome::Detected => 2,
            }] += 1;
            row.push(json!({ "outcome": outcome.to_string(), "first_divergence": first }));
        }
        cells.push(row);
    }
    Ok(json!({
        "registers": names,
        "cycles": (start..start + window).collect::<Vec<_>>(),
        "cells": cells,
        "counts": { "masked": counts[0], "sdc": counts[1], "detected": counts[2] },
    }))
}

struct Environment(Vec<(String, String)>);

impl CallTarget for Environment {
    fn execute(&self, call: Call) -> Result<Reply, CallError> {
        match call {
            Call::Getenv { key } => Ok(Reply::Env(
                self.0.iter().find(|(k, _)| *k == key).map(|(_, v)| v.clone()),
            )),
            other => Err(CallError::UnknownCall(other.name().to_string())),
        }
    }
}

/// Sends one `getenv` through a stack built from `layers`, one
/// `RANK NAME [KEY=VALUE]` per line. A layer with an override answers
/// matching keys itself; every other call passes down.
pub fn layer_dispatch(layers: &str, key: &str) -> Result<Value, String> {
    let bottom = Arc::new(Environment(vec![
        ("HOME".into(), "/home/sim".into()),
        ("DISPLAY".into(), ":0".into()),
    ]));
    let stack = LayerStack::new(bottom, None);
    let path: Arc<Mutex<Vec<String>>> = Arc::default();
    for (i, line) in layers.lines().enumerate() {
        let words: Vec<&str> = line.split_whitespace().collect();
        let (rank, name, over) = match words.as_slice() {
            [] => continue,
            [r, n] => (*r, n.to_string(), None),
            [r, n, kv] => {
                let (k, v) = kv.split_once('=').ok_or(format!("line {}: expected KEY=VALUE", i + 1))?;
                (*r, n.to_string(), Some((k.to_string(), v.to_string())))
            }
            _ => return Err(format!("line {}: expected `RANK NAME [KEY=VALUE]`", i + 1)),
        };
        let rank: u32 = rank.parse().map_err(|_| format!("line {}: bad rank `{rank}`", i + 1))?;
        let log = path.clone();
        let label = name.clone();
        let wrapper = move |call: Call, next: Next<'_>| {
            let asked = match &call {
                Call::Getenv { key } => key.clone(),
                _ => String::new(),
            };
            let note = |s: String| log.lock().unwrap_or_else(|e| e.into_inner()).push(s);
            note(format!("enter {label} ({rank})"));
            if let Some((k, v)) = &over {
                if *k == asked {
                    note(format!("{label} answers {k}={v}"));
                    return Ok(Reply::Env(Some(v.clone())));
                }
            }
            let r = next.call(call);
            note(format!("leave {label}"));
            r
        };
        stack
            .install_wrapper(rank, "getenv", &name, Arc::new(wrapper))
            .map_err(|e| format!("line {}: {e}", i + 1))?;
    }
    let reply = stack
        .dispatch(Call::Getenv { key: key.to_string() })
        .map_err(|e| e.to_string())?;
    let value = match reply {
        Reply::Env(v) => v,
        other => return Err(format!("unexpected reply {other:?}")),
    };
    let path = path.lock().unwrap_or_else(|e| e.into_inner()).clone();
    Ok(json!({ "path": path, "value": value }))
}
