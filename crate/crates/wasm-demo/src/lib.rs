//! Browser bindings: each export returns a JSON string, `{"error": ...}` on
//! failure.

pub mod demo;

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn to_json(r: Result<Value, String>) -> String {
    r.unwrap_or_else(|e| json!({ "error": e })).to_string()
}

#[wasm_bindgen]
pub fn counter_netlist() -> String {
    ckptlab::workloads::COUNTER_PARITY.to_string()
}

#[wasm_bindgen]
pub fn split_run(netlist_src: &str, cycles: u32, split_at: u32, seed: u32) -> String {
    to_json(demo::split_run(netlist_src, cycles.into(), split_at.into(), seed.into()))
}

#[wasm_bindgen]
pub fn campaign_grid(start: u32, window: u32, run_length: u32) -> String {
    to_json(demo::campaign_grid(start.into(), window.into(), run_length.into()))
}

#[wasm_bindgen]
pub fn layer_dispatch(layers: &str, key: &str) -> String {
    to_json(demo::layer_dispatch(layers, key))
}
