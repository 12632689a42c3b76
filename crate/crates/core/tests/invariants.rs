mod common;

use std::collections::BTreeMap;

use ckptlab::coordinator::wire::{read_msg, write_msg, Msg};
use ckptlab::emulator::{EmulatorState, Netlist};
use ckptlab::engine::{Image, ImageHeader, VERSION};
use ckptlab::fault::FaultSpec;
use ckptlab::plugin::{CustomBarrier, Event, Schedule, Side};
use ckptlab::virt::{IdClass, TranslationTable};
use ckptlab::workloads::{random_netlist, random_stimulus, RandomShape};
use common::Oracle;
use proptest::prelude::*;

fn shape() -> impl Strategy<Value = RandomShape> {
    (1usize..=4, 0usize..=10, 1usize..=48, 1usize..=4).prop_map(|(inputs, registers, gates, outputs)| RandomShape {
        inputs,
        registers,
        gates,
        outputs,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn simulator_matches_oracle(seed in any::<u64>(), shape in shape(), len in 1usize..64) {
        let src = random_netlist(seed, shape);
        let netlist = Netlist::parse(&src).unwrap();
        let stim = random_stimulus(seed, shape.inputs, len);
        let trace = EmulatorState::new(&netlist).run(&netlist, &stim, len as u64).unwrap();
        prop_assert_eq!(trace.rows(), &Oracle::new(&src).run(stim.rows())[..]);
    }

    #[test]
    fn state_snapshot_resumes_exactly(seed in any::<u64>(), shape in shape(), len in 2usize..64, cut in 0usize..64) {
        let cut = cut % len;
        let src = random_netlist(seed, shape);
        let netlist = Netlist::parse(&src).unwrap();
        let stim = random_stimulus(seed, shape.inputs, len);
        let mut whole = EmulatorState::new(&netlist);
        let full = whole.run(&netlist, &stim, len as u64).unwrap();

        let mut first = EmulatorState::new(&netlist);
        first.run(&netlist, &stim, cut as u64).unwrap();
        let mut second = EmulatorState::restore(&first.snapshot()).unwrap();
        prop_assert_eq!(&second, &first);
        let rest = second.run(&netlist, &stim, (len - cut) as u64).unwrap();
        prop_assert_eq!(rest.rows(), &full.rows()[cut..]);
    }

    #[test]
    fn translation_table_stays_bijective(ops in prop::collection::vec((any::<bool>(), 1u64..40), 1..80)) {
        let mut t = TranslationTable::new(IdClass::Tid);
        let mut live: BTreeMap<u64, u64> = BTreeMap::new();
        for (add, real) in ops {
            if add {
                if let Ok(v) = t.register(real) {
                    prop_assert!(!live.values().any(|&vv| vv == v), "virtual id {} reused", v);
                    live.insert(real, v);
                }
            } else if t.unregister_real(real).is_ok() {
                live.remove(&real);
            }
            prop_assert!(t.is_bijective());
        }
        let assignment: BTreeMap<u64, u64> = live.keys().map(|&r| (r, r + 10_000)).collect();
        let before: Vec<u64> = t.entries().map(|(v, _)| v).collect();
        t.remap_on_restart(&assignment).unwrap();
        let after: Vec<u64> = t.entries().map(|(v, _)| v).collect();
        prop_assert_eq!(before, after);
        for (real, virt) in &live {
            prop_assert_eq!(t.to_real(*virt).unwrap(), real + 10_000);
        }
        prop_assert_eq!(TranslationTable::from_bytes(&t.to_bytes()).unwrap(), t);
    }

    #[test]
    fn images_round_trip_and_reject_corruption(
        sections in prop::collection::vec(("[a-z.]{1,20}", prop::collection::vec(any::<u8>(), 1..200)), 1..6),
        cycle in any::<u64>(),
        poke in any::<prop::sample::Index>(),
    ) {
        let mut seen = std::collections::BTreeSet::new();
        let sections: Vec<(String, Vec<u8>)> = sections.into_iter().filter(|(n, _)| seen.insert(n.clone())).collect();
        let image = Image {
            header: ImageHeader { version: VERSION, incarnation: 3, cycle, timestamp: 9, schedule_hash: 7 },
            sections,
        };
        let bytes = image.encode();
        prop_assert_eq!(&Image::decode(&bytes).unwrap(), &image);

        let body_start = bytes.len() - image.sections.iter().map(|s| s.1.len()).sum::<usize>();
        let at = body_start + poke.index(bytes.len() - body_start);
        let mut bad = bytes.clone();
        bad[at] ^= 0x40;
        prop_assert!(Image::decode(&bad).is_err());
    }

    #[test]
    fn wire_messages_round_trip(names in prop::collection::vec("\\PC{0,12}", 0..5), n in any::<u64>(), text in "\\PC{0,40}") {
        let msgs = [
            Msg::DeclareBarrier { side: 1, lifecycle: n, names: names.clone(), image_hash: n ^ 1, world: 3 },
            Msg::DeclareResource { names },
            Msg::Leader { resource: text.clone(), worker: n },
            Msg::Done { text },
        ];
        let mut buf = Vec::new();
        for m in &msgs {
            write_msg(&mut buf, m).unwrap();
        }
        let mut r = buf.as_slice();
        for m in &msgs {
            let got = read_msg(&mut r).unwrap();
            prop_assert_eq!(got.as_ref(), Some(m));
        }
    }

    #[test]
    fn fault_specs_round_trip(net in "[a-z][a-z0-9_]{0,8}", a in 0u64..1000, len in 0u64..50, v in any::<bool>()) {
        for spec in [
            FaultSpec::Flip { reg: net.clone() },
            FaultSpec::FlipAt { reg: net.clone(), cycle: a },
            FaultSpec::Stuck { net: net.clone(), value: v, from: a, to: a + len },
            FaultSpec::Transient { net: net.clone(), cycle: a },
        ] {
            prop_assert_eq!(spec.to_string().parse::<FaultSpec>().unwrap(), spec.clone());
            prop_assert_eq!(FaultSpec::from_option(&spec.to_option()).unwrap(), spec);
        }
    }

    #[test]
    fn custom_barriers_keep_phase_order(anchors in prop::collection::vec(0usize..5, 0..6)) {
        let phases = Side::Checkpoint.phases();
        let customs: Vec<(String, CustomBarrier)> = anchors
            .iter()
            .enumerate()
            .map(|(i, &a)| (format!("p{i}"), CustomBarrier::new(&format!("c{i}"), phases[a].clone())))
            .collect();
        let s = Schedule::build(Side::Checkpoint, &customs);
        let builtin: Vec<String> = s.names().into_iter().filter(|n| Event::builtin(n).is_some()).collect();
        let want: Vec<String> = phases.iter().map(|p| p.name().to_string()).collect();
        prop_assert_eq!(builtin, want);
        for (i, &a) in anchors.iter().enumerate() {
            let names = s.names();
            let at = names.iter().position(|n| *n == format!("c{i}")).unwrap();
            let anchor = names.iter().position(|n| n == phases[a].name()).unwrap();
            prop_assert!(at > anchor);
            prop_assert!(names[anchor + 1..at].iter().all(|n| Event::builtin(n).is_none()));
        }
    }
}
