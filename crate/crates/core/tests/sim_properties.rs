mod common;

use bltsch::sim::metrics::{FrameFate, Metrics};
use bltsch::sim::rng::stream;
use bltsch::sim::run;
use bltsch::sim::topology::{link_delivery, Link, LinkStreams};
use common::*;

#[test]
fn empty_scenario_has_no_frames() {
    let m = run(&build(3600.0, ""), 1);
    assert!(m.nodes.is_empty());
    assert!(m.frames.is_empty());
    assert_eq!(m.total_frames_sent(), 0);
}

#[test]
fn replay_is_deterministic() {
    let v = mixed();
    for seed in 0..10u64 {
        let digests: Vec<String> = (0..3).map(|_| run(&v, seed).digest).collect();
        assert!(digests.iter().all(|d| *d == digests[0]), "seed {seed}");
        assert_eq!(digests[0].len(), 64);
    }
    assert_ne!(run(&v, 1).digest, run(&v, 2).digest);
}

#[test]
fn digest_covers_content() {
    let mut m = run(&mixed(), 4);
    let d = m.digest.clone();
    assert_eq!(m.compute_digest(), d);
    m.frames.pop();
    assert_ne!(m.compute_digest(), d);
}

fn binomial_within_3_sigma(p: f64) {
    let l = Link { a: 1, b: 2, p, per_channel: vec![] };
    let mut s = stream(9, "link", &[1, 2, 0]);
    let n = 100_000;
    let k = (0..n).filter(|_| link_delivery(&l, 0, &mut s)).count() as f64;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    assert!((k - n as f64 * p).abs() <= 3.0 * sigma, "p={p}: {k} of {n}");
}

#[test]
fn link_delivery_is_binomial() {
    for p in [0.1, 0.5, 0.9, 0.97] {
        binomial_within_3_sigma(p);
    }
}

#[test]
fn link_delivery_extremes() {
    let mut s = stream(1, "link", &[0]);
    let always = Link { a: 0, b: 1, p: 1.0, per_channel: vec![] };
    let never = Link { a: 0, b: 1, p: 0.0, per_channel: vec![] };
    assert!((0..10_000).all(|_| link_delivery(&always, 3, &mut s)));
    assert!((0..10_000).all(|_| !link_delivery(&never, 3, &mut s)));
}

#[test]
fn link_streams_are_independent() {
    let a = Link { a: 1, b: 2, p: 0.5, per_channel: vec![] };
    let b = Link { a: 3, b: 4, p: 0.5, per_channel: vec![] };
    let mut alone = LinkStreams::new(5);
    let mut mixed = LinkStreams::new(5);
    let solo: Vec<bool> = (0..1000).map(|_| alone.deliver(&a, 7)).collect();
    let interleaved: Vec<bool> = (0..1000)
        .map(|i| {
            for _ in 0..(i % 3) {
                mixed.deliver(&b, 7);
                mixed.deliver(&a, 8);
            }
            mixed.deliver(&a, 7)
        })
        .collect();
    assert_eq!(solo, interleaved);
}

#[test]
fn disabling_an_unrelated_node_keeps_link_outcomes() {
    let body = |enabled: bool| {
        let mut b = device(10, 3, S2, "harvester = { kind = \"constant\", power = 700e-6 }");
        b += &device(11, 1, S2, &format!("enabled = {enabled}\nharvester = {{ kind = \"constant\", power = 900e-6 }}"));
        b += &link(10, 3, 0.7);
        b += &link(11, 1, 0.7);
        b
    };
    for seed in [1, 2, 3] {
        let on = run(&build(7200.0, &body(true)), seed);
        let off = run(&build(7200.0, &body(false)), seed);
        assert!(on.node(11).unwrap().frames_sent > 0);
        assert_eq!(on.node(10), off.node(10), "seed {seed}");
        let frames = |m: &Metrics| m.frames.iter().filter(|f| f.node == 10).cloned().collect::<Vec<_>>();
        assert_eq!(frames(&on), frames(&off));
    }
}

#[test]
fn no_radio_activity_while_off() {
    for seed in 0..5 {
        let m = run(&mixed(), seed);
        assert_eq!(m.log_truncated, 0);
        let bad = radio_while_off(&m);
        assert!(bad.is_empty(), "{:?}", &bad[..bad.len().min(5)]);
        assert!(m.nodes.iter().all(|n| n.hysteresis_violations == 0));
    }
}

#[test]
fn ledger_closes_per_node() {
    for seed in 0..5 {
        for n in &run(&mixed(), seed).nodes {
            assert!(n.ledger_closure_error <= 1e-6, "node {} err {}", n.id, n.ledger_closure_error);
        }
    }
}

#[test]
fn events_never_run_before_their_cause() {
    let m = run(&mixed(), 3);
    assert!(m.nodes.iter().all(|n| n.causality_violations == 0));
    assert!(m.log.windows(2).all(|w| w[0].time <= w[1].time));
    for f in &m.frames {
        if f.fate != FrameFate::Dropped {
            assert!(f.sent_at >= f.generated_at - 1e-9);
        }
        if let Some(l) = f.latency {
            assert!(l > 0.0);
        }
    }
}

#[test]
fn join_success_is_monotone_in_capacitance() {
    let rates: Vec<f64> = [0.09, 0.1, 0.12].iter().map(|c| first_join_success_rate(*c, 100)).collect();
    assert!(rates.windows(2).all(|w| w[0] <= w[1]), "{rates:?}");
    assert!(rates[2] > rates[0], "{rates:?}");
}

#[test]
fn solicitation_adds_router_listen_share() {
    let m_sol = run(&build(600.0, &device(10, 3, S2, "harvester = { kind = \"constant\", power = 1e-3 }")), 1);
    let m_pas = run(&build(600.0, &device(10, 3, S2_PASSIVE, "harvester = { kind = \"constant\", power = 1e-3 }")), 1);
    let share = |m: &Metrics| m.routers.iter().find(|r| r.id == 3).unwrap().scan_share;
    let frac = bltsch::calibration::Calibration::builtin().platform.solicitation_listen_fraction;
    assert!((share(&m_sol) - share(&m_pas) - frac).abs() < 1e-12);
}

#[test]
fn synchronized_node_above_threshold_never_rejoins_once_joined() {
    let cal = bltsch::calibration::Calibration::builtin();
    let p = 1.05 * cal.case(bltsch::calibration::StrategyKind::Synchronized, false).threshold();
    let mut body = device(10, 3, S1, &format!("capacitor = {{ v_now = 3.0 }}\nharvester = {{ kind = \"constant\", power = {p} }}"));
    body += &link(10, 3, 1.0);
    let m = run(&build(86_400.0, &body), 1);
    let n = m.node(10).unwrap();
    assert_eq!(n.join_successes, 1);
    assert_eq!(n.desyncs, 0);
    let joined_at = m.log.iter().find(|e| e.event == "JOINED").unwrap().time;
    let after: Vec<_> = m.log.iter().filter(|e| e.time > joined_at && matches!(e.event.as_str(), "TURN_OFF" | "SCAN" | "DESYNC")).collect();
    assert!(after.is_empty(), "{:?}", after.first());
    // once joined, an update waits for task processing plus at most one slotframe
    let l_sf = cal.slotframe().l_sf();
    let processing = cal.fitted.task_processing_s;
    for f in m.frames.iter().filter(|f| f.generated_at > joined_at) {
        let l = f.latency.expect("delivered on an ideal link");
        assert!(l <= processing + l_sf + 0.02, "seq {} latency {l}", f.seq);
    }
    assert!(n.latency.min < l_sf);
}

#[test]
fn synchronized_node_below_sync_cost_cycles_through_rejoins() {
    let mut body = device(10, 3, S1, "capacitor = { v_now = 3.0 }\nharvester = { kind = \"constant\", power = 200e-6 }");
    body += &link(10, 3, 1.0);
    let m = run(&build(6.0 * 3600.0, &body), 1);
    let n = m.node(10).unwrap();
    assert!(n.join_attempts >= 2 && n.brownouts >= 2, "attempts {} brownouts {}", n.join_attempts, n.brownouts);
}

#[test]
fn adhoc_updates_have_finite_worst_interval_under_variable_harvest() {
    let body = device(10, 3, S2, "harvester = { kind = \"stochastic\", mean = 150e-6, period = 3600.0, duty = 0.5 }");
    let m = run(&build(86_400.0, &body), 2);
    let n = m.node(10).unwrap();
    assert!(n.frames_delivered >= 2, "{}", n.frames_delivered);
    assert!(n.update_interval.max.is_finite());
    assert!(n.latency.min >= 24.0);
}

#[test]
fn nonsync_updates_about_once_a_minute_near_threshold() {
    // with effective leakage the store cannot reach v_turn_on at exactly 36 µW
    let body = device(10, 3, S3, &format!("{SMALL_CAP}\nharvester = {{ kind = \"constant\", power = 38e-6 }}"));
    let m = run(&build(7200.0, &body), 1);
    let n = m.node(10).unwrap();
    let t = n.steady_update_interval.expect("several updates");
    assert!(t > 30.0 && t < 600.0, "{t}");
    assert!((n.latency.min - 0.010).abs() < 0.002, "{}", n.latency.min);
}

#[test]
fn simultaneous_nonsync_frames_without_cca_collide() {
    let s3_nocca = r#"{ strategy = "nonsynchronized", n_channels_used = 1, cca_enabled = false, router_mode = { kind = "MULTI_INTERFACE" } }"#;
    let s3_cca = r#"{ strategy = "nonsynchronized", n_channels_used = 2, cca_enabled = true, router_mode = { kind = "MULTI_INTERFACE" } }"#;
    let pair = |s: &str| {
        let h = |p: f64| format!("{SMALL_CAP}\nharvester = {{ kind = \"constant\", power = {p} }}");
        device(10, 3, s, &h(60.005e-6)) + &device(11, 3, s, &h(60e-6))
    };
    // node 11 wakes about 2 ms after node 10, inside the 4 ms frame
    let m = run(&build(60.0, &pair(s3_nocca)), 1);
    let first: Vec<_> = [10, 11].iter().map(|id| m.frames.iter().find(|f| f.node == *id).unwrap().clone()).collect();
    assert!(first.iter().all(|f| f.fate == FrameFate::Lost), "{first:?}");

    let m = run(&build(60.0, &pair(s3_cca)), 1);
    let first: Vec<_> = [10, 11].iter().map(|id| m.frames.iter().find(|f| f.node == *id).unwrap().clone()).collect();
    assert!(first.iter().all(|f| f.fate == FrameFate::Delivered), "{first:?}");
    assert_ne!(first[0].channel, first[1].channel);
    assert!(first[1].sent_at > first[0].sent_at && first[1].sent_at < first[0].sent_at + 0.005);
}
