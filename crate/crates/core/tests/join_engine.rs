use bltsch::calibration::Calibration;
use bltsch::energy::{DevicePowerProfile, EnergyStore, HarvestTimeline, Supercapacitor};
use bltsch::join::{
    authenticate, beacon_channel, duty_cycled_join, expected_join, expected_scan_wait, hierarchical_authenticate,
    scan_for_beacon, scheduled_join_gate, solicit_beacon, BeaconSource, ContentionParams, JoinConfig, JoinEnv,
    JoinState, Unlimited,
};
use bltsch::mac::{Airtimes, SlotframeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SRC: [BeaconSource; 1] = [BeaconSource { router: 0, channel_offset: 0, phase: 0 }];

fn cal() -> Calibration {
    Calibration::builtin()
}

fn cfg(n_adv: u32, hops: u32) -> JoinConfig {
    cal().join_config(n_adv, hops)
}

/// Brute-force wait for every slot-aligned start within one hyperperiod and
/// every listening channel: walk forward slot by slot until a beacon appears
/// on the chosen channel.
fn enumerate_waits(sf: &SlotframeConfig, air: &Airtimes, adv: &[u32]) -> Vec<f64> {
    let n = sf.n_slots as u64;
    let hyper = adv.len() as u64 * n;
    let mut out = Vec::new();
    for &ch in adv {
        for start in 0..hyper {
            let t0 = start as f64 * sf.t_slot;
            let mut asn = start;
            loop {
                let slot = (asn % n) as u32;
                let t = asn as f64 * sf.t_slot + air.tx_offset;
                if sf.advertisement_slots.contains(&slot) && t >= t0 && beacon_channel(adv, asn, 0) == ch {
                    out.push(t - t0);
                    break;
                }
                asn += 1;
            }
        }
    }
    out
}

#[test]
fn scan_wait_matches_phase_enumeration() {
    let air = Airtimes::default();
    let sf = SlotframeConfig::default();
    for n_adv in [1u32, 2, 4, 16] {
        let c = cfg(n_adv, 4);
        let waits = enumerate_waits(&sf, &air, &c.advertisement_channels);
        let mean = waits.iter().sum::<f64>() / waits.len() as f64;
        let max = waits.iter().cloned().fold(0.0, f64::max);
        let w = expected_scan_wait(&sf, &air, &c, &SRC);
        // slot-aligned starts versus continuous starts differ by at most one slot
        assert!((w.mean - mean).abs() <= sf.t_slot, "n_adv={n_adv}: {} vs {mean}", w.mean);
        assert!((w.max - max).abs() <= sf.t_slot + 1e-9, "n_adv={n_adv}: {} vs {max}", w.max);
        assert!(w.max <= n_adv as f64 * sf.l_sf() + 1e-9);
    }
}

#[test]
fn single_advertisement_channel_waits_at_most_one_slotframe() {
    let air = Airtimes::default();
    let sf = SlotframeConfig::default();
    let w = expected_scan_wait(&sf, &air, &cfg(1, 4), &SRC);
    assert!(w.max <= sf.l_sf() + 1e-12);
}

#[test]
fn sixteen_channel_scan_bound_and_monte_carlo_mean() {
    let air = Airtimes::default();
    let sf = SlotframeConfig::default();
    assert!((sf.l_sf() - 1.01).abs() < 1e-12);
    let c = cfg(16, 4);
    let w = expected_scan_wait(&sf, &air, &c, &SRC);
    assert!(w.max <= 16.16 + 1e-9);

    let p = DevicePowerProfile::default();
    let env = JoinEnv { slotframe: &sf, air: &air, profile: &p };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let hyper = 16.0 * sf.l_sf();
    let n = 4000;
    let mut xs = Vec::with_capacity(n);
    for _ in 0..n {
        let start = rng.gen::<f64>() * hyper;
        let o = scan_for_beacon(env, &c, &SRC, start, 100.0, &mut rng, &mut |_, _| true, &mut Unlimited);
        assert_eq!(o.result, JoinState::Synchronized);
        assert!(o.wait <= 16.16 + 1e-9);
        xs.push(o.wait);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sigma = (var / n as f64).sqrt();
    assert!((mean - w.mean).abs() < 3.0 * sigma, "mc {mean} analytic {} sigma {sigma}", w.mean);
    // between N/2 and (N+1)/2 slotframes
    let in_sf = w.mean / sf.l_sf();
    assert!((8.0..=8.5).contains(&in_sf), "{in_sf} slotframes");
}

#[test]
fn scanning_costs_about_twice_the_negotiation() {
    let j = cal().full_join();
    let r = j.scan_energy / j.auth_energy;
    assert!((r - 2.0).abs() < 0.2, "ratio {r}");
}

#[test]
fn solicitation_with_one_router_waits_one_exchange() {
    let sf = SlotframeConfig::default();
    let air = Airtimes::default();
    let p = DevicePowerProfile::default();
    let env = JoinEnv { slotframe: &sf, air: &air, profile: &p };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let o = solicit_beacon(env, 1, 4, &mut rng, &mut |_| true, &mut Unlimited);
    assert_eq!(o.result, JoinState::Synchronized);
    assert!((o.wait - (air.solicitation + air.turnaround + air.beacon)).abs() < 1e-12);
    assert!(o.energy_router > 0.0);
}

#[test]
fn solicitation_scan_is_cheaper_than_passive() {
    let sf = SlotframeConfig::default();
    let air = Airtimes::default();
    let p = DevicePowerProfile::default();
    let env = JoinEnv { slotframe: &sf, air: &air, profile: &p };
    for n_adv in [2u32, 4, 8, 16] {
        let passive = cfg(n_adv, 4);
        let mut active = passive.clone();
        active.optimizations.beacon_solicitation = true;
        let a = expected_join(env, &active).scan_energy;
        let b = expected_join(env, &passive).scan_energy;
        assert!(a < b, "n_adv {n_adv}: {a} vs {b}");
    }
}

#[test]
fn full_join_anchors() {
    let j = cal().full_join();
    assert!((j.duration() - 80.0).abs() / 80.0 < 0.05, "{}", j.duration());
    assert!((j.energy() - 0.325).abs() / 0.325 < 0.05, "{}", j.energy());
}

#[test]
fn authentication_grows_with_hops() {
    let sf = SlotframeConfig::default();
    let air = Airtimes::default();
    let p = DevicePowerProfile::default();
    let env = JoinEnv { slotframe: &sf, air: &air, profile: &p };
    let c = cfg(16, 4);
    let one = authenticate(env, &c, 1, 1e9, &mut |_, _| true, &mut Unlimited);
    let four = authenticate(env, &c, 4, 1e9, &mut |_, _| true, &mut Unlimited);
    assert_eq!(one.result, JoinState::Joined);
    assert_eq!(four.result, JoinState::Joined);
    assert!(one.duration < four.duration);
    // the stepwise run agrees with the closed-form estimate
    let est = expected_join(env, &c);
    assert!((four.duration - est.auth_duration).abs() < 1e-9);
    assert!((four.energy - est.auth_energy).abs() < 1e-9);
}

#[test]
fn hierarchical_halves_adhoc_join_time() {
    let c = cal();
    let base = c.adhoc_join(false);
    let hier = c.adhoc_join(true);
    let r = hier.duration() / base.duration();
    assert!((r - 0.5).abs() < 0.05, "ratio {r}");
    // energy follows duration for the shared-cell model
    let re = hier.auth_energy / base.auth_energy;
    let rd = hier.auth_duration / base.auth_duration;
    assert!((re - rd).abs() < 0.05, "energy ratio {re} duration ratio {rd}");
}

#[test]
fn hierarchical_is_identical_at_one_hop() {
    let sf = SlotframeConfig::default();
    let air = Airtimes::default();
    let p = DevicePowerProfile::default();
    let env = JoinEnv { slotframe: &sf, air: &air, profile: &p };
    let c = cfg(16, 1);
    let a = authenticate(env, &c, 1, 1e9, &mut |_, _| true, &mut Unlimited);
    let b = hierarchical_authenticate(env, &c, 1e9, &mut |_, _| true, &mut Unlimited);
    assert_eq!(a, b);
}

#[test]
fn join_on_small_store_fails_for_energy() {
    let sf = SlotframeConfig::default();
    let air = Airtimes::default();
    let p = DevicePowerProfile::default();
    let env = JoinEnv { slotframe: &sf, air: &air, profile: &p };
    let cap = Supercapacitor::new(0.02, 2e-6).with_voltage(3.0);
    let mut store = EnergyStore::new(cap, p, HarvestTimeline::constant(0.0));
    let o = authenticate(env, &cfg(16, 4), 4, 1e9, &mut |_, _| true, &mut store);
    assert_eq!(o.result, JoinState::FailedEnergy);
    assert!(o.energy <= cap.usable_energy() * 1.0001);
}

fn contention(window: Option<u32>) -> ContentionParams {
    ContentionParams {
        frames_per_node: 6,
        active_energy_per_slotframe: 1e-3,
        tx_energy: 1e-4,
        window,
        slotframe_s: 1.01,
        max_slotframes: 100_000,
    }
}

#[test]
fn single_node_contention_equals_plain_join() {
    let mut r1 = ChaCha8Rng::seed_from_u64(3);
    let mut r2 = ChaCha8Rng::seed_from_u64(3);
    let a = duty_cycled_join(1, contention(None), &mut r1);
    let b = duty_cycled_join(1, contention(Some(8)), &mut r2);
    assert_eq!(a[0].duration_s, b[0].duration_s);
    assert_eq!(a[0].energy_j, b[0].energy_j);
    let p = contention(None);
    assert!((a[0].energy_j - 6.0 * (p.active_energy_per_slotframe + p.tx_energy)).abs() < 1e-12);
}

#[test]
fn duty_cycling_lowers_mean_join_energy() {
    let mut sim = 0.0;
    let mut dc = 0.0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = duty_cycled_join(8, contention(None), &mut rng);
        let b = duty_cycled_join(8, contention(Some(8)), &mut rng);
        assert!(a.iter().chain(b.iter()).all(|o| o.result == JoinState::Joined));
        sim += a.iter().map(|o| o.energy_j).sum::<f64>() / 8.0;
        dc += b.iter().map(|o| o.energy_j).sum::<f64>() / 8.0;
    }
    assert!(dc < sim, "duty-cycled {dc} vs simultaneous {sim}");
}

#[test]
fn waiting_nodes_spend_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let solo = duty_cycled_join(1, contention(Some(8)), &mut rng)[0].energy_j;
    let many = duty_cycled_join(8, contention(Some(8)), &mut rng);
    // only one node is awake at a time, so each pays exactly its own solo cost
    for o in &many {
        assert!((o.energy_j - solo).abs() < 1e-12, "{} vs {solo}", o.energy_j);
    }
}

#[test]
fn join_gate_cases() {
    assert!(!scheduled_join_gate(0.0, 0.0, 1.0, 0.3));
    assert!(scheduled_join_gate(300e-6, 250e-6, 0.288, 0.288));
    assert!(!scheduled_join_gate(200e-6, 250e-6, 0.288, 0.1));
}
