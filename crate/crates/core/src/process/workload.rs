use std::collections::BTreeMap;

use crate::codec::{DecodeError, Decoder, Encoder};
use crate::emulator::Stimulus;

use super::script::Script;

/// The workload's own memory: its program, where it is in its script, and
/// the names it has been handed by the runtime (as it sees them).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkloadState {
    pub netlist_src: String,
    pub stimulus: Stimulus,
    pub script: Script,
    /// Index of the first script step that has not run yet.
    pub next_step: usize,
    pub tasks: BTreeMap<String, u64>,
    pub handles: BTreeMap<String, u64>,
    pub observations: Vec<String>,
    pub plugin_lines: Vec<String>,
    pub worker_id: u64,
    pub world: u64,
    /// Sequence number of the most recent checkpoint image.
    pub ckpt_seq: u32,
}

fn encode_map(e: &mut Encoder, m: &BTreeMap<String, u64>) {
    e.u32(m.len() as u32);
    for (k, v) in m {
        e.str(k).u64(*v);
    }
}

fn decode_map(d: &mut Decoder<'_>) -> Result<BTreeMap<String, u64>, DecodeError> {
    (0..d.u32()?).map(|_| Ok((d.string()?, d.u64()?))).collect()
}

fn encode_list(e: &mut Encoder, l: &[String]) {
    e.u32(l.len() as u32);
    for s in l {
        e.str(s);
    }
}

fn decode_list(d: &mut Decoder<'_>) -> Result<Vec<String>, DecodeError> {
    (0..d.u32()?).map(|_| d.string()).collect()
}

impl WorkloadState {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.str(&self.netlist_src)
            .u32(self.stimulus.width() as u32)
            .str(&self.stimulus.to_text())
            .str(&self.script.to_text())
            .u64(self.next_step as u64);
        encode_map(&mut e, &self.tasks);
        encode_map(&mut e, &self.handles);
        encode_list(&mut e, &self.observations);
        encode_list(&mut e, &self.plugin_lines);
        e.u64(self.worker_id).u64(self.world).u32(self.ckpt_seq);
        e.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let invalid = |what: &'static str| DecodeError::Invalid { what, value: 0 };
        let mut d = Decoder::new(bytes);
        let netlist_src = d.string()?;
        let width = d.u32()? as usize;
        let stimulus = Stimulus::parse(d.str()?, width).map_err(|_| invalid("stimulus"))?;
        let script = Script::parse(d.str()?).map_err(|_| invalid("script"))?;
        let next_step = d.u64()? as usize;
        let state = WorkloadState {
            netlist_src,
            stimulus,
            script,
            next_step,
            tasks: decode_map(&mut d)?,
            handles: decode_map(&mut d)?,
            observations: decode_list(&mut d)?,
            plugin_lines: decode_list(&mut d)?,
            worker_id: d.u64()?,
            world: d.u64()?,
            ckpt_seq: d.u32()?,
        };
        d.finish()?;
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::Action;

    #[test]
    fn round_trip() {
        let mut script = Script::new();
        script.push(4, Action::Spawn("w".into()));
        let s = WorkloadState {
            netlist_src: "input a\noutput o a\n".into(),
            stimulus: Stimulus::parse("1\n0\n", 1).unwrap(),
            script,
            next_step: 1,
            tasks: BTreeMap::from([("main".into(), 1), ("w".into(), 2)]),
            handles: BTreeMap::from([("bus".into(), 1)]),
            observations: vec!["spawn w = 2".into()],
            plugin_lines: vec!["plugin tid-virt rank 10".into()],
            worker_id: 3,
            world: 2,
            ckpt_seq: 4,
        };
        assert_eq!(WorkloadState::decode(&s.encode()).unwrap(), s);
    }
}
