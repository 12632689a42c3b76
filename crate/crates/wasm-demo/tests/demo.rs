use ckptlab::workloads::{random_netlist, RandomShape, COUNTER_PARITY};
use ckptlab_wasm_demo::demo::{campaign_grid, layer_dispatch, split_run};
use ckptlab_wasm_demo::{layer_dispatch as layer_dispatch_json, split_run as split_run_json};

#[test]
fn split_run_reassembles_the_uninterrupted_trace() {
    let r = split_run(COUNTER_PARITY, 40, 17, 1).unwrap();
    assert_eq!(r["identical"], true);
    assert_eq!(r["before"].as_array().unwrap().len(), 17);
    assert_eq!(r["after"].as_array().unwrap().len(), 23);
    for seed in 0..20 {
        let shape = RandomShape { inputs: 3, registers: 6, gates: 30, outputs: 3 };
        let r = split_run(&random_netlist(seed, shape), 32, seed % 33, seed + 1).unwrap();
        assert_eq!(r["identical"], true, "seed {seed}");
    }
    assert!(split_run(COUNTER_PARITY, 5, 6, 1).is_err());
}

#[test]
fn campaign_grid_classifies_known_registers() {
    let r = campaign_grid(5, 4, 12).unwrap();
    let regs: Vec<&str> = r["registers"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    let row = |name: &str| r["cells"][regs.iter().position(|n| *n == name).unwrap()].as_array().unwrap().clone();
    assert!(row("d").iter().all(|c| c["outcome"] == "masked"));
    assert!(row("p").iter().all(|c| c["outcome"] == "detected"));
    assert!(row("c3").iter().all(|c| c["outcome"] == "sdc"));
    let c = &r["counts"];
    let total = c["masked"].as_u64().unwrap() + c["sdc"].as_u64().unwrap() + c["detected"].as_u64().unwrap();
    assert_eq!(total, 6 * 4);
    assert!(campaign_grid(0, 0, 4).is_err());
}

#[test]
fn layers_run_from_highest_rank_down() {
    let r = layer_dispatch("10 tid-virt\n40 env-virt DISPLAY=:7\n20 conn-virt\n", "HOME").unwrap();
    assert_eq!(r["value"], "/home/sim");
    let path: Vec<&str> = r["path"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(
        path,
        [
            "enter env-virt (40)",
            "enter conn-virt (20)",
            "enter tid-virt (10)",
            "leave tid-virt",
            "leave conn-virt",
            "leave env-virt"
        ]
    );

    let r = layer_dispatch("10 tid-virt\n40 env-virt DISPLAY=:7\n", "DISPLAY").unwrap();
    assert_eq!(r["value"], ":7");
    assert_eq!(r["path"].as_array().unwrap().len(), 2);

    assert!(layer_dispatch("0 bad\n", "HOME").is_err());
    assert!(layer_dispatch("5 a\n5 b\n", "HOME").is_err());
    assert!(layer_dispatch_json("x y\n", "HOME").contains("\"error\""));
    assert!(split_run_json(COUNTER_PARITY, 4, 2, 1).contains("\"identical\":true"));
}
