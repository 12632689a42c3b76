//! Fault injection into the emulated design: register flips applied to the
//! restored state at restart, and windowed net faults injected by a layer
//! around the clock-step call.

mod campaign;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::call::{Call, CallError, CallName, Reply};
use crate::emulator::{EmulatorState, NetId, NetOverride, Netlist, OverrideAction};
use crate::plugin::{Event, EventCtx, Plugin, PluginEnv, PluginError};
use crate::virt::{Next, Wrapper};

pub use campaign::{
    classify, golden_trace, run_campaign, run_experiment, CampaignConfig, CampaignReport, ExperimentResult,
    Outcome, Record,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FaultError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown register `{0}`")]
    UnknownRegister(String),
    #[error("unknown net `{0}`")]
    UnknownNet(String),
    #[error("`{spec}` targets a cycle before the current cycle {current}")]
    WindowPassed { spec: String, current: u64 },
    #[error("checker `{0}` is not an output of the design")]
    UnknownChecker(String),
    #[error("restore failed: {0}")]
    Restore(String),
    #[error("campaign worker failed: {0}")]
    Worker(String),
}

/// One experiment's fault.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FaultSpec {
    /// XOR a register bit once, at restart.
    Flip { reg: String },
    /// XOR a register bit just before `cycle` is evaluated.
    FlipAt { reg: String, cycle: u64 },
    /// Force `net` to `value` for cycles `from..=to`.
    Stuck { net: String, value: bool, from: u64, to: u64 },
    /// Invert `net` for exactly one cycle.
    Transient { net: String, cycle: u64 },
}

impl FaultSpec {
    /// Last cycle this spec touches; `None` for restart-time flips.
    pub fn last_cycle(&self) -> Option<u64> {
        match self {
            FaultSpec::Flip { .. } => None,
            FaultSpec::FlipAt { cycle, .. } | FaultSpec::Transient { cycle, .. } => Some(*cycle),
            FaultSpec::Stuck { to, .. } => Some(*to),
        }
    }

    pub fn first_cycle(&self) -> Option<u64> {
        match self {
            FaultSpec::Flip { .. } => None,
            FaultSpec::FlipAt { cycle, .. } | FaultSpec::Transient { cycle, .. } => Some(*cycle),
            FaultSpec::Stuck { from, .. } => Some(*from),
        }
    }

    /// Checks names against `netlist` and the window against `current`.
    pub fn validate(&self, netlist: &Netlist, current: u64) -> Result<(), FaultError> {
        match self {
            FaultSpec::Flip { reg } | FaultSpec::FlipAt { reg, .. } => {
                netlist
                    .register_index(reg)
                    .ok_or_else(|| FaultError::UnknownRegister(reg.clone()))?;
            }
            FaultSpec::Stuck { net, .. } | FaultSpec::Transient { net, .. } => {
                netlist.net(net).ok_or_else(|| FaultError::UnknownNet(net.clone()))?;
            }
        }
        match self.first_cycle() {
            Some(c) if c < current => Err(FaultError::WindowPassed {
                spec: self.to_string(),
                current,
            }),
            _ => Ok(()),
        }
    }

    /// Compact, whitespace-free form used in plugin option lines.
    pub fn to_option(&self) -> String {
        self.to_string().replace(' ', ",")
    }

    pub fn from_option(s: &str) -> Result<Self, String> {
        s.replace(',', " ").parse()
    }
}

impl fmt::Display for FaultSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultSpec::Flip { reg } => write!(f, "flip {reg}"),
            FaultSpec::FlipAt { reg, cycle } => write!(f, "flip {reg} at {cycle}"),
            FaultSpec::Stuck { net, value, from, to } => write!(f, "stuck {net} {} {from} {to}", u8::from(*value)),
            FaultSpec::Transient { net, cycle } => write!(f, "transient {net} {cycle}"),
        }
    }
}

impl FromStr for FaultSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let w: Vec<&str> = s.split_whitespace().collect();
        let num = |x: &str| x.parse::<u64>().map_err(|_| format!("bad cycle `{x}`"));
        match w.as_slice() {
            ["flip", reg] => Ok(FaultSpec::Flip { reg: reg.to_string() }),
            ["flip", reg, "at", c] => Ok(FaultSpec::FlipAt {
                reg: reg.to_string(),
                cycle: num(c)?,
            }),
            ["stuck", net, v, from, to] => {
                let value = match *v {
                    "0" => false,
                    "1" => true,
                    _ => return Err(format!("stuck value must be 0 or 1, got `{v}`")),
                };
                let (from, to) = (num(from)?, num(to)?);
                if from > to {
                    return Err(format!("empty window {from}..{to}"));
                }
                Ok(FaultSpec::Stuck {
                    net: net.to_string(),
                    value,
                    from,
                    to,
                })
            }
            ["transient", net, c] => Ok(FaultSpec::Transient {
                net: net.to_string(),
                cycle: num(c)?,
            }),
            _ => Err(format!("unrecognised fault spec `{}`", s.trim())),
        }
    }
}

/// Parses a fault spec file: one spec per line, `#` comments.
pub fn parse_specs(text: &str) -> Result<Vec<FaultSpec>, FaultError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(line.parse().map_err(|msg| FaultError::Parse { line: i + 1, msg })?);
    }
    Ok(out)
}

/// Applies the restart-time flips in `specs` to `state`. Other spec kinds
/// are ignored. Returns the mutated state and the number of flips applied.
pub fn apply_restart_faults(
    state: &EmulatorState,
    netlist: &Netlist,
    specs: &[FaultSpec],
) -> Result<(EmulatorState, u64), FaultError> {
    let mut out = state.clone();
    let mut applied = 0;
    for spec in specs {
        if let FaultSpec::Flip { reg } = spec {
            let i = netlist
                .register_index(reg)
                .ok_or_else(|| FaultError::UnknownRegister(reg.clone()))?;
            out.regs[i] = !out.regs[i];
            applied += 1;
        }
    }
    Ok((out, applied))
}

enum Resolved {
    FlipAt(usize, u64),
    Stuck(NetId, bool, u64, u64),
    Transient(NetId, u64),
}

fn resolve(netlist: &Netlist, specs: &[FaultSpec]) -> Vec<Resolved> {
    specs
        .iter()
        .filter_map(|s| match s {
            FaultSpec::Flip { .. } => None,
            FaultSpec::FlipAt { reg, cycle } => netlist.register_index(reg).map(|i| Resolved::FlipAt(i, *cycle)),
            FaultSpec::Stuck { net, value, from, to } => {
                netlist.net(net).map(|n| Resolved::Stuck(n, *value, *from, *to))
            }
            FaultSpec::Transient { net, cycle } => netlist.net(net).map(|n| Resolved::Transient(n, *cycle)),
        })
        .collect()
}

/// The fault-injection plugin. Optional, so images taken with it restore
/// without it.
pub struct FaultInjector {
    rank: u32,
    specs: Vec<FaultSpec>,
    count: Arc<AtomicU64>,
    log: Mutex<Vec<String>>,
}

impl FaultInjector {
    pub const NAME: &'static str = "fault-injector";
    pub const DEFAULT_RANK: u32 = 50;

    pub fn new(rank: u32, specs: Vec<FaultSpec>) -> Self {
        Self {
            rank,
            specs,
            count: Arc::new(AtomicU64::new(0)),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn specs(&self) -> &[FaultSpec] {
        &self.specs
    }

    /// Injections actually applied so far.
    pub fn count_faults(&self) -> u64 {
        self.count.load(Ordering::SeqCst)
    }

    /// `cycle N: ...` lines, one per restart-time mutation.
    pub fn mutation_log(&self) -> Vec<String> {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn check(&self, ctx: &EventCtx<'_>, event: &Event) -> Result<(), PluginError> {
        for s in &self.specs {
            s.validate(&ctx.env.netlist, ctx.cycle)
                .map_err(|e| PluginError::hook(Self::NAME, event, e))?;
        }
        Ok(())
    }
}

impl Plugin for FaultInjector {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn rank(&self) -> u32 {
        self.rank
    }

    fn optional(&self) -> bool {
        true
    }

    fn wrappers(self: Arc<Self>, env: &PluginEnv) -> Vec<(CallName, Arc<dyn Wrapper>)> {
        let faults = resolve(&env.netlist, &self.specs);
        if faults.is_empty() {
            return Vec::new();
        }
        let count = self.count.clone();
        let wrapper = move |call: Call, next: Next<'_>| -> Result<Reply, CallError> {
            let Call::ClockStep(mut step) = call else {
                return next.call(call);
            };
            let c = step.cycle;
            let mut ours = Vec::new();
            for f in &faults {
                match *f {
                    Resolved::FlipAt(reg, at) if at == c => {
                        step.reg_flips.push(reg);
                        count.fetch_add(1, Ordering::SeqCst);
                    }
                    Resolved::Stuck(net, v, from, to) if (from..=to).contains(&c) => {
                        step.overrides.push(NetOverride {
                            net,
                            action: OverrideAction::Force(v),
                        });
                        ours.push(net);
                    }
                    Resolved::Transient(net, at) if at == c => {
                        step.overrides.push(NetOverride {
                            net,
                            action: OverrideAction::Invert,
                        });
                        ours.push(net);
                    }
                    _ => {}
                }
            }
            let mut reply = next.call(Call::ClockStep(step))?;
            if let Reply::Step(s) = &mut reply {
                for &(net, natural) in &s.outcome.natural {
                    if ours.contains(&net) {
                        count.fetch_add(1, Ordering::SeqCst);
                        s.outcome.nets[net] = Some(natural);
                    }
                }
            }
            Ok(reply)
        };
        vec![(CallName::ClockStep, Arc::new(wrapper) as Arc<dyn Wrapper>)]
    }

    fn on_launch(&self, ctx: &EventCtx<'_>) -> Result<(), PluginError> {
        self.check(ctx, &Event::Custom("launch".into()))
    }

    fn on_event(&self, event: &Event, ctx: &EventCtx<'_>) -> Result<(), PluginError> {
        if *event != Event::Restart {
            return Ok(());
        }
        self.check(ctx, event)?;
        for spec in &self.specs {
            let FaultSpec::Flip { reg } = spec else { continue };
            let i = ctx
                .env
                .netlist
                .register_index(reg)
                .ok_or_else(|| PluginError::hook(Self::NAME, event, FaultError::UnknownRegister(reg.clone())))?;
            ctx.env
                .runtime
                .with_device(|d| -> Result<(), PluginError> {
                    let v = d
                        .regs
                        .read(i)
                        .map_err(|e| PluginError::hook(Self::NAME, event, e))?;
                    d.regs.write(i, !v);
                    Ok(())
                })
                .map_err(|e| PluginError::hook(Self::NAME, event, e))??;
            self.count.fetch_add(1, Ordering::SeqCst);
            let line = format!("cycle {}: flipped {reg}", ctx.cycle);
            log::info!("{line}");
            self.log.lock().unwrap_or_else(|e| e.into_inner()).push(line);
        }
        Ok(())
    }

    fn save(&self, _ctx: &EventCtx<'_>) -> Result<Option<Vec<u8>>, PluginError> {
        let text: String = self.specs.iter().map(|s| format!("{s}\n")).collect();
        Ok(Some(text.into_bytes()))
    }

    fn spec_line(&self) -> String {
        let mut line = format!("plugin {} rank {}", Self::NAME, self.rank);
        for s in &self.specs {
            line.push_str(" spec=");
            line.push_str(&s.to_option());
        }
        line
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_text_round_trips() {
        let text = "flip c0\nflip c1 at 12\nstuck s 1 5 7\n# x\ntransient n 9\n";
        let specs = parse_specs(text).unwrap();
        assert_eq!(specs.len(), 4);
        for s in &specs {
            assert_eq!(&s.to_string().parse::<FaultSpec>().unwrap(), s);
            assert_eq!(&FaultSpec::from_option(&s.to_option()).unwrap(), s);
        }
        assert_eq!(parse_specs("flip\n").unwrap_err(), FaultError::Parse {
            line: 1,
            msg: "unrecognised fault spec `flip`".into()
        });
        assert!(parse_specs("stuck s 2 1 1").is_err());
        assert!(parse_specs("stuck s 1 7 5").is_err());
    }

    #[test]
    fn restart_flips_xor_register_bits() {
        let n = Netlist::parse("reg r0 r0\nreg r1 r1\nreg r2 r2\nreg r3 r3\noutput o r0\n").unwrap();
        let mut st = EmulatorState::new(&n);
        st.regs = vec![false, true, true, false];
        let flip = |r: &str| FaultSpec::Flip { reg: r.into() };
        let (out, k) = apply_restart_faults(&st, &n, &[flip("r0")]).unwrap();
        assert_eq!(out.regs, vec![true, true, true, false]);
        assert_eq!(k, 1);
        assert_eq!(apply_restart_faults(&st, &n, &[]).unwrap(), (st.clone(), 0));
        assert_eq!(apply_restart_faults(&st, &n, &[flip("r2"), flip("r2")]).unwrap().0, st);
        assert_eq!(
            apply_restart_faults(&st, &n, &[flip("zz")]).unwrap_err(),
            FaultError::UnknownRegister("zz".into())
        );
    }
}
