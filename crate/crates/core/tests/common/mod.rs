//! Scenario builders shared by the simulation test suites.
#![allow(dead_code)]

use std::collections::HashMap;

use bltsch::scenario::{Scenario, Validated};
use bltsch::sim::metrics::Metrics;
use bltsch::sim::run;

pub const CHAIN: &str = r#"
[[nodes]]
id = 0
role = "BORDER_ROUTER"
[[nodes]]
id = 1
role = "ROUTER"
parent = 0
[[nodes]]
id = 2
role = "ROUTER"
parent = 1
[[nodes]]
id = 3
role = "ROUTER"
parent = 2
"#;

pub const S1: &str = r#"{ strategy = "synchronized", sync_interval = 16.0, sync_method = "KEEPALIVE", update_interval = 16.0 }"#;
pub const S2: &str = r#"{ strategy = "adhoc", update_trigger = { kind = "ENERGY_READY" }, join_opts = { beacon_solicitation = true } }"#;
pub const S2_PASSIVE: &str = r#"{ strategy = "adhoc", update_trigger = { kind = "ENERGY_READY" } }"#;
pub const S3: &str = r#"{ strategy = "nonsynchronized", n_channels_used = 4, router_mode = { kind = "MULTI_INTERFACE" } }"#;
pub const SMALL_CAP: &str = "capacitor = { capacitance = 100e-6, leakage_current = 0.5e-6, v_turn_on = 2.6 }";

pub fn build(horizon: f64, body: &str) -> Validated {
    build_with(&format!("horizon = {horizon}"), body)
}

pub fn build_with(header: &str, body: &str) -> Validated {
    let text = format!("name = \"t\"\n{header}\n{CHAIN}\n{body}");
    Scenario::parse(&text, "t.toml")
        .expect("parse")
        .validate()
        .unwrap_or_else(|d| panic!("{}", d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("\n")))
}

pub fn device(id: u32, parent: u32, strategy: &str, extra: &str) -> String {
    format!("[[nodes]]\nid = {id}\nrole = \"END_DEVICE\"\nparent = {parent}\nstrategy = {strategy}\n{extra}\n")
}

pub fn link(a: u32, b: u32, p: f64) -> String {
    format!("[[links]]\na = {a}\nb = {b}\np = {p}\n")
}

/// Replays the log and reports radio entries of nodes that are off.
pub fn radio_while_off(m: &Metrics) -> Vec<String> {
    let mut on: HashMap<u32, bool> = HashMap::new();
    let mut bad = Vec::new();
    for e in &m.log {
        match e.event.as_str() {
            "TURN_ON" => {
                on.insert(e.node, true);
            }
            "TURN_OFF" | "POWER_OFF" => {
                on.insert(e.node, false);
            }
            _ => {
                if e.radio && !on.get(&e.node).copied().unwrap_or(false) {
                    bad.push(format!("{:.6} node {} {}", e.time, e.node, e.event));
                }
            }
        }
    }
    bad
}


/// One device of each strategy behind the same router, with lossy links.
pub fn mixed() -> Validated {
    let mut body = String::new();
    body += &device(10, 3, S1, "capacitor = { v_now = 3.0 }\nharvester = { kind = \"constant\", power = 300e-6 }");
    body += &device(11, 3, S2, "harvester = { kind = \"stochastic\", mean = 800e-6, period = 600.0, duty = 0.5 }");
    body += &device(12, 3, S3, &format!("{SMALL_CAP}\nharvester = {{ kind = \"constant\", power = 80e-6 }}"));
    body += &link(10, 3, 0.9);
    body += &link(11, 3, 0.8);
    body += &link(12, 3, 0.9);
    build(3600.0, &body)
}

pub fn first_join_success_rate(capacitance: f64, seeds: u64) -> f64 {
    let mut body = device(
        10,
        3,
        S1,
        &format!("capacitor = {{ capacitance = {capacitance}, v_now = 3.0 }}\nharvester = {{ kind = \"constant\", power = 100e-6 }}"),
    );
    body += &link(10, 3, 0.85);
    // short enough that a browned-out node cannot recharge for a second try
    let v = build(400.0, &body);
    let ok = (0..seeds).filter(|s| run(&v, *s).node(10).unwrap().join_successes > 0).count();
    ok as f64 / seeds as f64
}

