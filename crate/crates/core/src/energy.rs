//! Supercapacitor storage, harvesting sources and device power states.
//!
//! The storage element is integrated with the closed-form solution of
//!
//! ```text
//! C·v·dv/dt = a − I_leak·v,    a = eta_in·P_harvest − P_load/eta_out
//! ```
//!
//! which is exact for piecewise-constant harvest and load. The elapsed time
//! between two voltages is explicit; voltage after a given time is found by a
//! safeguarded Newton inversion of that expression. Threshold crossings are
//! therefore located exactly rather than by step refinement.

use std::io::Read;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default crossing localisation tolerance in seconds.
pub const DEFAULT_CROSSING_TOLERANCE: f64 = 1e-3;

const GAUSS_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GAUSS_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

/// Voltage-state energy store with hysteresis thresholds and constant-current leakage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Supercapacitor {
    /// Farads.
    pub capacitance: f64,
    pub v_max: f64,
    pub v_turn_on: f64,
    pub v_turn_off: f64,
    pub v_now: f64,
    /// Amperes.
    pub leakage_current: f64,
}

impl Default for Supercapacitor {
    fn default() -> Self {
        Self {
            capacitance: 0.1,
            v_max: 3.6,
            v_turn_on: 3.0,
            v_turn_off: 1.8,
            v_now: 0.0,
            leakage_current: 2e-6,
        }
    }
}

impl Supercapacitor {
    /// Builds a capacitor with the default 3.6 / 3.0 / 1.8 V window, empty.
    pub fn new(capacitance: f64, leakage_current: f64) -> Self {
        Self {
            capacitance,
            leakage_current,
            ..Self::default()
        }
    }

    pub fn with_voltage(mut self, v: f64) -> Self {
        self.v_now = v.clamp(0.0, self.v_max);
        self
    }

    pub fn with_thresholds(mut self, v_max: f64, v_turn_on: f64, v_turn_off: f64) -> Self {
        self.v_max = v_max;
        self.v_turn_on = v_turn_on;
        self.v_turn_off = v_turn_off;
        self.v_now = self.v_now.min(v_max);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.capacitance > 0.0) {
            return Err(Error::invalid("capacitor", "capacitance must be > 0"));
        }
        if !(self.leakage_current >= 0.0) {
            return Err(Error::invalid("capacitor", "leakage current must be >= 0"));
        }
        if !(self.v_turn_off >= 0.0) {
            return Err(Error::invalid("capacitor", "turn-off voltage must be >= 0"));
        }
        if !(self.v_turn_off < self.v_turn_on) {
            return Err(Error::invalid(
                "capacitor",
                "hysteresis inverted: v_turn_off must be below v_turn_on",
            ));
        }
        if !(self.v_turn_on <= self.v_max) {
            return Err(Error::invalid("capacitor", "v_turn_on must not exceed v_max"));
        }
        if !(0.0..=self.v_max).contains(&self.v_now) {
            return Err(Error::invalid("capacitor", "v_now outside [0, v_max]"));
        }
        Ok(())
    }

    /// ½·C·v².
    pub fn stored_energy(&self) -> f64 {
        self.energy_at(self.v_now)
    }

    pub fn energy_at(&self, v: f64) -> f64 {
        0.5 * self.capacitance * v * v
    }

    /// Energy available before the turn-off threshold forces a power-off.
    pub fn usable_energy(&self) -> f64 {
        self.usable_energy_at(self.v_now)
    }

    pub fn usable_energy_at(&self, v: f64) -> f64 {
        if v <= self.v_turn_off {
            0.0
        } else {
            0.5 * self.capacitance * (v * v - self.v_turn_off * self.v_turn_off)
        }
    }

    fn dynamics(&self, harvest_w: f64, load_w: f64, profile: &DevicePowerProfile) -> Dynamics {
        Dynamics {
            source: profile.eta_in * harvest_w - load_w / profile.eta_out,
            leak: self.leakage_current,
            capacitance: self.capacitance,
        }
    }

    /// Integrates the store over `dt` seconds of constant harvest and load.
    ///
    /// Crossing times are relative to the start of the call.
    pub fn advance(
        &mut self,
        harvest_w: f64,
        load_w: f64,
        profile: &DevicePowerProfile,
        dt: f64,
        ledger: &mut EnergyLedger,
    ) -> Vec<Crossing> {
        self.advance_with_stop(harvest_w, load_w, profile, dt, StopOn::Never, ledger)
            .crossings
    }

    /// Like [`Supercapacitor::advance`], but returns early on the first crossing matching `stop`.
    pub fn advance_with_stop(
        &mut self,
        harvest_w: f64,
        load_w: f64,
        profile: &DevicePowerProfile,
        dt: f64,
        stop: StopOn,
        ledger: &mut EnergyLedger,
    ) -> AdvanceOutcome {
        let dyn_ = self.dynamics(harvest_w, load_w, profile);
        let mut out = AdvanceOutcome {
            elapsed: 0.0,
            crossings: Vec::new(),
            stopped: false,
        };
        if !(dt > 0.0) {
            return out;
        }
        let mut remaining = dt;
        let mut guard = 0;
        while remaining > 0.0 && guard < 16 {
            guard += 1;
            let v = self.v_now;
            let rate = dyn_.net(v);
            let at_top = v >= self.v_max && rate >= 0.0;
            let at_bottom = v <= 0.0 && rate <= 0.0;
            if rate == 0.0 || at_top || at_bottom {
                ledger.book_flows(harvest_w * profile.eta_in, load_w / profile.eta_out, remaining);
                ledger.leaked += dyn_.leak * v * remaining;
                if at_top && rate > 0.0 {
                    ledger.spilled += rate * remaining;
                }
                if at_bottom && rate < 0.0 {
                    ledger.deficit += -rate * remaining;
                }
                out.elapsed += remaining;
                break;
            }

            // candidate barriers in the direction of travel
            let mut barriers: Vec<(f64, Option<ThresholdKind>)> = Vec::with_capacity(2);
            if rate > 0.0 {
                if v < self.v_turn_on {
                    barriers.push((self.v_turn_on, Some(ThresholdKind::TurnOn)));
                }
                barriers.push((self.v_max, None));
            } else {
                if v > self.v_turn_off {
                    barriers.push((self.v_turn_off, Some(ThresholdKind::TurnOff)));
                }
                barriers.push((0.0, None));
            }

            let mut hit: Option<(f64, f64, Option<ThresholdKind>)> = None;
            for (target, kind) in barriers {
                if let Some(t) = dyn_.elapsed(v, target) {
                    if t <= remaining {
                        hit = Some((t, target, kind));
                        break;
                    }
                }
            }

            match hit {
                Some((t, target, kind)) => {
                    ledger.book_flows(harvest_w * profile.eta_in, load_w / profile.eta_out, t);
                    ledger.leaked += dyn_.leak_integral(v, t);
                    self.v_now = target;
                    remaining -= t;
                    out.elapsed += t;
                    if let Some(kind) = kind {
                        out.crossings.push(Crossing {
                            kind,
                            at: out.elapsed,
                        });
                        if stop.matches(kind) {
                            out.stopped = true;
                            return out;
                        }
                    }
                }
                None => {
                    let v1 = dyn_.voltage_after(v, remaining, self.v_max);
                    ledger.book_flows(harvest_w * profile.eta_in, load_w / profile.eta_out, remaining);
                    ledger.leaked += dyn_.leak_integral(v, remaining);
                    self.v_now = v1;
                    out.elapsed += remaining;
                    remaining = 0.0;
                }
            }
        }
        out
    }

    /// First time at which the voltage reaches `target_v` under constant harvest and load.
    pub fn time_to_reach(
        &self,
        target_v: f64,
        harvest_w: f64,
        load_w: f64,
        profile: &DevicePowerProfile,
    ) -> Reach {
        if target_v > self.v_max || target_v < 0.0 {
            return Reach::Infeasible;
        }
        if (target_v - self.v_now).abs() == 0.0 {
            return Reach::After(0.0);
        }
        let dyn_ = self.dynamics(harvest_w, load_w, profile);
        match dyn_.elapsed(self.v_now, target_v) {
            Some(t) => Reach::After(t),
            None => Reach::Infeasible,
        }
    }
}

/// Outcome of [`Supercapacitor::time_to_reach`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reach {
    After(f64),
    /// The steady-state voltage lies short of the target.
    Infeasible,
}

impl Reach {
    pub fn seconds(self) -> Option<f64> {
        match self {
            Reach::After(t) => Some(t),
            Reach::Infeasible => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ThresholdKind {
    TurnOn,
    TurnOff,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crossing {
    pub kind: ThresholdKind,
    /// Seconds since the start of the advance call.
    pub at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopOn {
    Never,
    TurnOn,
    TurnOff,
}

impl StopOn {
    fn matches(self, kind: ThresholdKind) -> bool {
        matches!(
            (self, kind),
            (StopOn::TurnOn, ThresholdKind::TurnOn) | (StopOn::TurnOff, ThresholdKind::TurnOff)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvanceOutcome {
    pub elapsed: f64,
    pub crossings: Vec<Crossing>,
    pub stopped: bool,
}

/// Running account of every joule that entered or left the store.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    /// ∫ eta_in·P_harvest dt.
    pub harvested: f64,
    /// ∫ P_load/eta_out dt.
    pub consumed: f64,
    /// ∫ v·I_leak dt.
    pub leaked: f64,
    /// Surplus discarded while clamped at v_max.
    pub spilled: f64,
    /// Load that could not be served while clamped at 0 V.
    pub deficit: f64,
}

impl EnergyLedger {
    fn book_flows(&mut self, harvest_in: f64, load_out: f64, dt: f64) {
        self.harvested += harvest_in * dt;
        self.consumed += load_out * dt;
    }

    /// Energy the ledger says the store should have gained.
    pub fn net(&self) -> f64 {
        self.harvested - self.consumed - self.leaked - self.spilled + self.deficit
    }

    /// |net − ΔE| relative to the largest flow through the store.
    pub fn closure_error(&self, delta_stored: f64) -> f64 {
        let scale = self
            .harvested
            .abs()
            .max(self.consumed.abs())
            .max(delta_stored.abs())
            .max(1e-15);
        (self.net() - delta_stored).abs() / scale
    }
}

/// Constant-coefficient store dynamics for one segment.
#[derive(Debug, Clone, Copy)]
struct Dynamics {
    /// Net converter-side source power a (W).
    source: f64,
    leak: f64,
    capacitance: f64,
}

impl Dynamics {
    /// dE/dt at voltage v.
    fn net(&self, v: f64) -> f64 {
        self.source - self.leak * v
    }

    /// Voltage where dE/dt = 0 (None when leakage is zero).
    fn steady(&self) -> Option<f64> {
        (self.leak > 0.0).then(|| self.source / self.leak)
    }

    /// Time to move from v0 to v1, or None if v1 is not on the trajectory.
    fn elapsed(&self, v0: f64, v1: f64) -> Option<f64> {
        let r = self.net(v0);
        let delta = v1 - v0;
        if delta == 0.0 {
            return Some(0.0);
        }
        if r == 0.0 || (r > 0.0) != (delta > 0.0) {
            return None;
        }
        if let Some(vs) = self.steady() {
            // trajectory approaches vs asymptotically and never passes it
            if (delta > 0.0 && v1 >= vs) || (delta < 0.0 && v1 <= vs) {
                return None;
            }
        }
        let x = self.leak * delta / r;
        let t = self.capacitance * (v0 * delta / r + self.source * delta * delta * log_series(x) / (r * r));
        Some(t.max(0.0))
    }

    /// Voltage after `dt` seconds starting at v0, clamped to [0, v_max].
    fn voltage_after(&self, v0: f64, dt: f64, v_max: f64) -> f64 {
        let r = self.net(v0);
        if r == 0.0 || dt <= 0.0 {
            return v0;
        }
        let (mut lo, mut hi) = if r > 0.0 {
            let cap = self.steady().map_or(v_max, |vs| vs.min(v_max));
            (v0, cap)
        } else {
            let floor = self.steady().map_or(0.0, |vs| vs.max(0.0));
            (floor, v0)
        };
        // bound reachable within dt: clamp
        let bound = if r > 0.0 { hi } else { lo };
        if let Some(t) = self.elapsed(v0, bound) {
            if t <= dt {
                return bound;
            }
        }
        let f = |v: f64| -> f64 {
            match self.elapsed(v0, v) {
                Some(t) => t - dt,
                None => f64::INFINITY,
            }
        };
        // initial guess from the local slope
        let mut v = {
            let slope = if v0 > 0.0 {
                r / (self.capacitance * v0)
            } else {
                f64::INFINITY
            };
            let g = if slope.is_finite() {
                v0 + slope * dt
            } else {
                (v0 * v0 + 2.0 * r.abs() * dt / self.capacitance).sqrt()
            };
            if g > lo && g < hi {
                g
            } else {
                0.5 * (lo + hi)
            }
        };
        for _ in 0..200 {
            let fv = f(v);
            if fv.abs() <= 1e-13 * dt.max(1e-9) {
                return v;
            }
            // f increases as v moves away from v0
            let away = if r > 0.0 { fv < 0.0 } else { fv > 0.0 };
            if r > 0.0 {
                if away {
                    lo = v
                } else {
                    hi = v
                }
            } else if away {
                lo = v
            } else {
                hi = v
            }
            let dtdv = self.capacitance * v / self.net(v);
            let newton = v - fv / dtdv;
            v = if dtdv.is_finite() && dtdv != 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= f64::EPSILON * hi.abs().max(1e-12) {
                break;
            }
        }
        v
    }

    /// ∫₀^dt I·v(t) dt along the trajectory from v0, by adaptive Gauss–Legendre.
    fn leak_integral(&self, v0: f64, dt: f64) -> f64 {
        if self.leak == 0.0 || dt <= 0.0 {
            return 0.0;
        }
        let v_cap = f64::INFINITY;
        let v_at = |t: f64| self.voltage_after(v0, t, v_cap);
        let gl = |a: f64, b: f64| -> f64 {
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            GAUSS_NODES
                .iter()
                .zip(GAUSS_WEIGHTS.iter())
                .map(|(x, w)| w * v_at(mid + half * x))
                .sum::<f64>()
                * half
        };
        fn recurse(gl: &dyn Fn(f64, f64) -> f64, a: f64, b: f64, whole: f64, depth: u32, tol: f64) -> f64 {
            let m = 0.5 * (a + b);
            let left = gl(a, m);
            let right = gl(m, b);
            let split = left + right;
            if depth == 0 || (split - whole).abs() <= tol {
                split
            } else {
                recurse(gl, a, m, left, depth - 1, tol * 0.5) + recurse(gl, m, b, right, depth - 1, tol * 0.5)
            }
        }
        let whole = gl(0.0, dt);
        let scale = whole.abs().max(1e-18);
        self.leak * recurse(&gl, 0.0, dt, whole, 24, scale * 1e-11)
    }
}

/// (−ln(1−x) − x)/x², continuous at 0.
fn log_series(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        0.5 + x / 3.0 + x * x / 4.0 + x * x * x / 5.0
    } else {
        (-(-x).ln_1p() - x) / (x * x)
    }
}

/// Load-side power draw of the device in each radio/CPU state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DevicePowerProfile {
    pub p_tx: f64,
    pub p_rx: f64,
    pub p_sleep: f64,
    pub p_off: f64,
    pub p_cpu_active: f64,
    pub eta_in: f64,
    pub eta_out: f64,
}

impl Default for DevicePowerProfile {
    /// nRF52840-class radio at 3 V, 0 dBm.
    fn default() -> Self {
        Self {
            p_tx: 14.4e-3,
            p_rx: 13.8e-3,
            p_sleep: 12e-6,
            p_off: 0.0,
            p_cpu_active: 7.5e-3,
            eta_in: 0.8,
            eta_out: 0.8,
        }
    }
}

impl DevicePowerProfile {
    pub fn validate(&self) -> Result<()> {
        let powers = [self.p_tx, self.p_rx, self.p_sleep, self.p_off, self.p_cpu_active];
        if powers.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::invalid("power profile", "powers must be >= 0"));
        }
        if !(self.p_off <= self.p_sleep && self.p_sleep <= self.p_rx) {
            return Err(Error::invalid("power profile", "require p_off <= p_sleep <= p_rx"));
        }
        for eta in [self.eta_in, self.eta_out] {
            if !(eta > 0.0 && eta <= 1.0) {
                return Err(Error::invalid("power profile", "efficiencies must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    /// Radio listening with the CPU awake: the scanning load.
    pub fn p_listen(&self) -> f64 {
        self.p_rx + self.p_cpu_active
    }

    /// Storage-side energy of running `load_w` for `seconds`.
    pub fn drawn(&self, load_w: f64, seconds: f64) -> f64 {
        load_w * seconds / self.eta_out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PowerState {
    TxRx,
    Join,
    Sleep,
    Off,
}

impl PowerState {
    pub fn load(self, profile: &DevicePowerProfile) -> f64 {
        match self {
            PowerState::TxRx => profile.p_tx.max(profile.p_rx) + profile.p_cpu_active,
            PowerState::Join => profile.p_listen(),
            PowerState::Sleep => profile.p_sleep,
            PowerState::Off => profile.p_off,
        }
    }

    pub fn radio_active(self) -> bool {
        matches!(self, PowerState::TxRx | PowerState::Join)
    }
}

/// Harvested power source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HarvesterProfile {
    Constant {
        power: f64,
    },
    /// Step-held samples of (time_s, power_w).
    Trace {
        samples: Vec<(f64, f64)>,
        /// Repeat the trace with period equal to its last timestamp.
        #[serde(default)]
        repeat: bool,
    },
    /// On/off source with exponentially distributed phase lengths.
    Stochastic {
        mean: f64,
        period: f64,
        duty: f64,
        #[serde(default)]
        seed: u64,
    },
}

impl Default for HarvesterProfile {
    fn default() -> Self {
        HarvesterProfile::Constant { power: 0.0 }
    }
}

impl HarvesterProfile {
    pub fn validate(&self) -> Result<()> {
        match self {
            HarvesterProfile::Constant { power } => {
                if !(*power >= 0.0) {
                    return Err(Error::invalid("harvester", "power must be >= 0"));
                }
            }
            HarvesterProfile::Trace { samples, repeat } => {
                if samples.is_empty() {
                    return Err(Error::invalid("harvester", "trace has no samples"));
                }
                if samples.iter().any(|(_, p)| !(*p >= 0.0)) {
                    return Err(Error::invalid("harvester", "trace power must be >= 0"));
                }
                if samples.windows(2).any(|w| !(w[1].0 > w[0].0)) {
                    return Err(Error::invalid("harvester", "trace timestamps must be strictly increasing"));
                }
                if *repeat && !(samples.last().map_or(0.0, |s| s.0) > 0.0) {
                    return Err(Error::invalid("harvester", "repeating trace needs a positive period"));
                }
            }
            HarvesterProfile::Stochastic { mean, period, duty, .. } => {
                if !(*mean >= 0.0) {
                    return Err(Error::invalid("harvester", "mean power must be >= 0"));
                }
                if !(*period > 0.0) {
                    return Err(Error::invalid("harvester", "period must be > 0"));
                }
                if !(*duty > 0.0 && *duty <= 1.0) {
                    return Err(Error::invalid("harvester", "duty must lie in (0, 1]"));
                }
            }
        }
        Ok(())
    }

    /// Reads a two-column `time_s,power_w` CSV with a header row.
    pub fn trace_from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "time_s" || &headers[1] != "power_w" {
            return Err(Error::Trace {
                row: 0,
                reason: "expected header `time_s,power_w`".into(),
            });
        }
        let mut samples = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |j: usize| -> Result<f64> {
                rec.get(j)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| Error::Trace {
                        row: i + 1,
                        reason: format!("column {} is not a number", j + 1),
                    })
            };
            samples.push((parse(0)?, parse(1)?));
        }
        let profile = HarvesterProfile::Trace {
            samples,
            repeat: false,
        };
        profile.validate().map_err(|e| Error::Trace {
            row: 0,
            reason: e.to_string(),
        })?;
        Ok(profile)
    }

    /// Expands the profile into a step function over [0, horizon].
    pub fn timeline(&self, seed: u64, horizon: f64) -> HarvestTimeline {
        match self {
            HarvesterProfile::Constant { power } => HarvestTimeline {
                steps: vec![(0.0, *power)],
            },
            HarvesterProfile::Trace { samples, repeat } => {
                let mut steps = Vec::new();
                if samples[0].0 > 0.0 {
                    steps.push((0.0, 0.0));
                }
                if *repeat {
                    let period = samples.last().unwrap().0;
                    let mut offset = 0.0;
                    // last sample marks the period boundary and restarts the cycle
                    while offset <= horizon {
                        for &(t, p) in &samples[..samples.len() - 1] {
                            steps.push((offset + t, p));
                        }
                        offset += period;
                    }
                    if steps.is_empty() {
                        steps.push((0.0, samples[0].1));
                    }
                } else {
                    steps.extend(samples.iter().copied());
                }
                HarvestTimeline { steps }
            }
            HarvesterProfile::Stochastic {
                mean,
                period,
                duty,
                seed: own_seed,
            } => {
                if *duty >= 1.0 {
                    return HarvestTimeline {
                        steps: vec![(0.0, *mean)],
                    };
                }
                let mut rng = crate::sim::rng::stream(seed ^ own_seed, "harvester", &[]);
                let on_power = mean / duty;
                let mut t = 0.0;
                let mut on = rng.gen_bool(*duty);
                let mut steps = Vec::new();
                while t <= horizon {
                    steps.push((t, if on { on_power } else { 0.0 }));
                    let mean_len = if on { duty * period } else { (1.0 - duty) * period };
                    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
                    t += -mean_len * u.ln();
                    on = !on;
                }
                HarvestTimeline { steps }
            }
        }
    }
}

/// Piecewise-constant harvested power.
#[derive(Debug, Clone, PartialEq)]
pub struct HarvestTimeline {
    /// (start time, power) in strictly increasing time order; the first step starts at or before 0.
    steps: Vec<(f64, f64)>,
}

impl HarvestTimeline {
    pub fn constant(power: f64) -> Self {
        Self {
            steps: vec![(0.0, power)],
        }
    }

    fn index_at(&self, t: f64) -> usize {
        match self.steps.partition_point(|(s, _)| *s <= t) {
            0 => 0,
            i => i - 1,
        }
    }

    pub fn power_at(&self, t: f64) -> f64 {
        if t < self.steps[0].0 {
            return 0.0;
        }
        self.steps[self.index_at(t)].1
    }

    /// Next instant strictly after `t` where the power changes.
    pub fn next_change(&self, t: f64) -> Option<f64> {
        let i = self.steps.partition_point(|(s, _)| *s <= t);
        self.steps.get(i).map(|(s, _)| *s)
    }

    /// Mean power over [t0, t1].
    pub fn mean_power(&self, t0: f64, t1: f64) -> f64 {
        if t1 <= t0 {
            return self.power_at(t0);
        }
        let mut t = t0;
        let mut acc = 0.0;
        while t < t1 {
            let end = self.next_change(t).map_or(t1, |c| c.min(t1));
            acc += self.power_at(t) * (end - t);
            t = end;
        }
        acc / (t1 - t0)
    }
}

/// A capacitor bound to its harvester and power profile, integrated in absolute time.
#[derive(Debug, Clone)]
pub struct EnergyStore {
    pub cap: Supercapacitor,
    pub profile: DevicePowerProfile,
    pub harvest: HarvestTimeline,
    /// Absolute time up to which the store has been integrated.
    pub time: f64,
    pub ledger: EnergyLedger,
    initial_energy: f64,
}

/// Result of running a constant load on an [`EnergyStore`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunOutcome {
    Completed,
    /// The stop threshold was hit at this absolute time.
    Crossed { kind: ThresholdKind, at: f64 },
}

impl EnergyStore {
    pub fn new(cap: Supercapacitor, profile: DevicePowerProfile, harvest: HarvestTimeline) -> Self {
        let initial_energy = cap.stored_energy();
        Self {
            cap,
            profile,
            harvest,
            time: 0.0,
            ledger: EnergyLedger::default(),
            initial_energy,
        }
    }

    /// Runs `load_w` from the current time until `until`, stopping at the first `stop` crossing.
    pub fn run_until(&mut self, load_w: f64, until: f64, stop: StopOn) -> RunOutcome {
        while self.time < until {
            let seg_end = self.harvest.next_change(self.time).map_or(until, |c| c.min(until));
            let dt = seg_end - self.time;
            if dt <= 0.0 {
                self.time = seg_end;
                continue;
            }
            let p = self.harvest.power_at(self.time);
            let profile = self.profile;
            let out = self
                .cap
                .advance_with_stop(p, load_w, &profile, dt, stop, &mut self.ledger);
            if out.stopped {
                let kind = out.crossings.last().map(|c| c.kind).unwrap_or(ThresholdKind::TurnOff);
                self.time += out.elapsed;
                return RunOutcome::Crossed { kind, at: self.time };
            }
            self.time = seg_end;
        }
        RunOutcome::Completed
    }

    /// Runs `load_w` for `duration` seconds.
    pub fn run_for(&mut self, load_w: f64, duration: f64, stop: StopOn) -> RunOutcome {
        let until = self.time + duration;
        self.run_until(load_w, until, stop)
    }

    pub fn harvest_now(&self) -> f64 {
        self.harvest.power_at(self.time)
    }

    pub fn delta_stored(&self) -> f64 {
        self.cap.stored_energy() - self.initial_energy
    }

    pub fn closure_error(&self) -> f64 {
        self.ledger.closure_error(self.delta_stored())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ideal() -> DevicePowerProfile {
        DevicePowerProfile {
            eta_in: 1.0,
            eta_out: 1.0,
            ..DevicePowerProfile::default()
        }
    }

    #[test]
    fn stored_energy_closed_form() {
        assert_eq!(Supercapacitor::new(0.1, 0.0).with_voltage(0.0).stored_energy(), 0.0);
        assert!((Supercapacitor::new(0.1, 0.0).with_voltage(3.0).stored_energy() - 0.45).abs() < 1e-12);
        assert!((Supercapacitor::new(100e-6, 0.0).with_voltage(2.0).stored_energy() - 0.0002).abs() < 1e-15);
    }

    #[test]
    fn usable_energy_cases() {
        let c = Supercapacitor::new(0.1, 0.0).with_voltage(1.8);
        assert_eq!(c.usable_energy(), 0.0);
        let c = Supercapacitor::new(0.1, 0.0).with_voltage(3.0);
        assert!((c.usable_energy() - 0.288).abs() < 1e-12);
        let c = Supercapacitor::new(0.1, 0.0).with_voltage(1.0);
        assert_eq!(c.usable_energy(), 0.0);
    }

    #[test]
    fn twelve_second_join_window() {
        // a 0.33 F store whose turn-off threshold leaves ~12 s of scanning
        let p = DevicePowerProfile::default();
        let p_join = PowerState::Join.load(&p) / p.eta_out;
        let v_on: f64 = 3.0;
        let v_off = (v_on * v_on - 2.0 * 12.0 * p_join / 0.33).sqrt();
        let cap = Supercapacitor::new(0.33, 0.0)
            .with_thresholds(3.6, v_on, v_off)
            .with_voltage(v_on);
        let seconds = cap.usable_energy() / p_join;
        assert!((seconds - 12.0).abs() < 1e-9);
    }

    #[test]
    fn no_flux_keeps_voltage() {
        let mut c = Supercapacitor::new(0.1, 0.0).with_voltage(2.5);
        let mut l = EnergyLedger::default();
        let x = c.advance(0.0, 0.0, &ideal(), 10.0, &mut l);
        assert!(x.is_empty());
        assert_eq!(c.v_now, 2.5);
    }

    #[test]
    fn hysteresis_validation() {
        let c = Supercapacitor::new(0.1, 0.0).with_thresholds(3.6, 1.8, 3.0);
        assert!(c.validate().is_err());
        assert!(Supercapacitor::new(0.0, 0.0).validate().is_err());
        assert!(Supercapacitor::default().validate().is_ok());
    }

    #[test]
    fn turn_off_emitted_when_budget_short() {
        let p = DevicePowerProfile::default();
        let mut c = Supercapacitor::new(0.1, 2e-6).with_voltage(3.0);
        let load = PowerState::Join.load(&p);
        // 0.288 J usable at 26.6 mW storage-side lasts ~10.8 s
        let mut l = EnergyLedger::default();
        let out = c.advance_with_stop(0.0, load, &p, 80.0, StopOn::TurnOff, &mut l);
        assert!(out.stopped);
        assert_eq!(out.crossings[0].kind, ThresholdKind::TurnOff);
        assert!(out.elapsed < 80.0);
        assert!((c.v_now - 1.8).abs() < 1e-12);
    }

    #[test]
    fn clamp_spills_surplus() {
        let mut c = Supercapacitor::new(1e-3, 0.0).with_voltage(3.5);
        let mut l = EnergyLedger::default();
        let e0 = c.stored_energy();
        c.advance(1e-3, 0.0, &ideal(), 100.0, &mut l);
        assert_eq!(c.v_now, 3.6);
        assert!(l.spilled > 0.0);
        assert!(l.closure_error(c.stored_energy() - e0) < 1e-9);
    }

    #[test]
    fn zero_harvest_is_infeasible() {
        let c = Supercapacitor::new(0.1, 1e-6).with_voltage(1.0);
        assert_eq!(c.time_to_reach(3.0, 0.0, 0.0, &ideal()), Reach::Infeasible);
    }

    #[test]
    fn doubling_power_halves_charge_time_without_leak() {
        let c = Supercapacitor::new(0.1, 0.0);
        let p = DevicePowerProfile::default();
        let t1 = c.time_to_reach(3.0, 100e-6, 0.0, &p).seconds().unwrap();
        let t2 = c.time_to_reach(3.0, 200e-6, 0.0, &p).seconds().unwrap();
        assert!((t1 / t2 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn trace_csv_requires_header_and_increasing_times() {
        let ok = "time_s,power_w\n0,1e-4\n10,2e-4\n";
        let h = HarvesterProfile::trace_from_csv(ok.as_bytes()).unwrap();
        let tl = h.timeline(0, 100.0);
        assert_eq!(tl.power_at(5.0), 1e-4);
        assert_eq!(tl.power_at(50.0), 2e-4);
        assert!(HarvesterProfile::trace_from_csv("0,1\n1,2\n".as_bytes()).is_err());
        assert!(HarvesterProfile::trace_from_csv("time_s,power_w\n5,1\n5,2\n".as_bytes()).is_err());
        assert!(HarvesterProfile::trace_from_csv("time_s,power_w\n1,-1\n".as_bytes()).is_err());
    }

    #[test]
    fn repeating_trace_wraps() {
        let h = HarvesterProfile::Trace {
            samples: vec![(0.0, 1.0), (10.0, 0.0), (20.0, 0.0)],
            repeat: true,
        };
        let tl = h.timeline(0, 100.0);
        assert_eq!(tl.power_at(5.0), 1.0);
        assert_eq!(tl.power_at(15.0), 0.0);
        assert_eq!(tl.power_at(25.0), 1.0);
        assert!((tl.mean_power(0.0, 40.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn stochastic_mean_is_close() {
        let h = HarvesterProfile::Stochastic {
            mean: 150e-6,
            period: 600.0,
            duty: 0.5,
            seed: 3,
        };
        let tl = h.timeline(11, 30.0 * 86_400.0);
        let m = tl.mean_power(0.0, 30.0 * 86_400.0);
        assert!((m / 150e-6 - 1.0).abs() < 0.05, "mean {m}");
        assert!(tl.steps.iter().all(|(_, p)| *p >= 0.0));
    }
}
