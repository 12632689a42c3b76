use std::fmt;

use crate::emulator::content_hash;

use super::{CustomBarrier, Event};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Checkpoint,
    Restart,
}

impl Side {
    pub fn code(self) -> u8 {
        match self {
            Side::Checkpoint => 0,
            Side::Restart => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Side::Checkpoint),
            1 => Some(Side::Restart),
            _ => None,
        }
    }

    pub fn phases(self) -> &'static [Event] {
        const CKPT: [Event; 5] = [
            Event::Suspend,
            Event::Drain,
            Event::WriteCkpt,
            Event::Resume,
            Event::Refill,
        ];
        const RESTART: [Event; 2] = [Event::Restart, Event::Refill];
        match self {
            Side::Checkpoint => &CKPT,
            Side::Restart => &RESTART,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Checkpoint => "checkpoint",
            Side::Restart => "restart",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BarrierStep {
    pub name: String,
    pub event: Event,
    /// Declaring plugin of a custom barrier; `None` for built-in phases.
    pub owner: Option<String>,
}

/// The ordered barriers of one lifecycle side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub side: Side,
    pub steps: Vec<BarrierStep>,
}

impl Schedule {
    /// Built-in phases of `side` with each custom barrier spliced in after its
    /// anchor, in declaration order.
    pub fn build(side: Side, customs: &[(String, CustomBarrier)]) -> Self {
        let mut steps = Vec::new();
        for phase in side.phases() {
            steps.push(BarrierStep {
                name: phase.name().to_string(),
                event: phase.clone(),
                owner: None,
            });
            for (owner, b) in customs.iter().filter(|(_, b)| &b.anchor == phase) {
                steps.push(BarrierStep {
                    name: b.name.clone(),
                    event: Event::Custom(b.name.clone()),
                    owner: Some(owner.clone()),
                });
            }
        }
        Schedule { side, steps }
    }

    /// Rebuilds a schedule received as a list of names. Custom names this
    /// process did not declare become steps without an owner plugin here.
    pub fn from_names(side: Side, names: &[String], customs: &[(String, CustomBarrier)]) -> Self {
        let steps = names
            .iter()
            .map(|n| match Event::builtin(n) {
                Some(event) => BarrierStep {
                    name: n.clone(),
                    event,
                    owner: None,
                },
                None => BarrierStep {
                    name: n.clone(),
                    event: Event::Custom(n.clone()),
                    owner: Some(
                        customs
                            .iter()
                            .find(|(_, b)| &b.name == n)
                            .map(|(o, _)| o.clone())
                            .unwrap_or_default(),
                    ),
                },
            })
            .collect();
        Schedule { side, steps }
    }

    pub fn names(&self) -> Vec<String> {
        self.steps.iter().map(|s| s.name.clone()).collect()
    }

    pub fn hash(&self, lifecycle: u64) -> u64 {
        let text = format!("{}|{}|{}", self.side, lifecycle, self.names().join(","));
        content_hash(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sides() {
        assert_eq!(
            Schedule::build(Side::Checkpoint, &[]).names(),
            ["Suspend", "Drain", "WriteCkpt", "Resume", "Refill"]
        );
        assert_eq!(Schedule::build(Side::Restart, &[]).names(), ["Restart", "Refill"]);
    }

    #[test]
    fn customs_follow_anchor_in_declaration_order() {
        let customs = vec![
            ("p".to_string(), CustomBarrier::new("elect-bus", Event::Suspend)),
            ("q".to_string(), CustomBarrier::new("flush", Event::Drain)),
            ("p".to_string(), CustomBarrier::new("audit", Event::Suspend)),
            ("q".to_string(), CustomBarrier::new("reconnect", Event::Refill)),
        ];
        let ck = Schedule::build(Side::Checkpoint, &customs);
        assert_eq!(
            ck.names(),
            ["Suspend", "elect-bus", "audit", "Drain", "flush", "WriteCkpt", "Resume", "Refill", "reconnect"]
        );
        assert_eq!(ck.steps[1].owner.as_deref(), Some("p"));
        let rs = Schedule::build(Side::Restart, &customs);
        assert_eq!(rs.names(), ["Restart", "Refill", "reconnect"]);
        assert_eq!(Schedule::from_names(Side::Checkpoint, &ck.names(), &customs), ck);
    }

    #[test]
    fn hash_mixes_lifecycle_and_content() {
        let a = Schedule::build(Side::Checkpoint, &[]);
        let b = Schedule::build(Side::Checkpoint, &[("p".into(), CustomBarrier::new("x", Event::Drain))]);
        assert_eq!(a.hash(1), a.clone().hash(1));
        assert_ne!(a.hash(1), a.hash(2));
        assert_ne!(a.hash(1), b.hash(1));
    }
}
