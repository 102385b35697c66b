//! Calibration constants and the fit that derives them from target anchors.
//!
//! Platform numbers (radio powers, airtimes, converter efficiencies) are
//! inputs. The fit solves for the protocol constants that make the model hit
//! the anchors: task processing time, per-hop forwarding delay, local control
//! overhead, authentication listen duty and the self-discharge factor that
//! scales rated capacitor leakage to effective leakage.

use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::energy::{DevicePowerProfile, Supercapacitor};
use crate::error::{Error, Result};
use crate::feasibility::{FeasibilityCase, TaskBudget};
use crate::join::{expected_join, expected_scan_wait, BeaconSource, JoinConfig, JoinEnv, JoinEstimate, JoinOptimizations};
use crate::mac::{keepalive_energy, max_sync_interval, Airtimes, SlotframeConfig};

pub const CALIBRATION_VERSION: u32 = 1;

/// Targets the fit reproduces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Anchors {
    /// Full join energy, J.
    pub join_energy: f64,
    /// Full join duration, s.
    pub join_duration: f64,
    pub join_hops: u32,
    /// Keep-alive synchronization task, J.
    pub sync_task_energy: f64,
    /// Join time with hierarchical management over the multi-hop baseline.
    pub hierarchical_ratio: f64,
    /// Minimum harvest power per strategy, W.
    pub threshold_synchronized: f64,
    pub threshold_adhoc: f64,
    pub threshold_nonsynchronized: f64,
}

impl Default for Anchors {
    fn default() -> Self {
        Self {
            join_energy: 0.325,
            join_duration: 80.0,
            join_hops: 4,
            sync_task_energy: 1.5e-3,
            hierarchical_ratio: 0.5,
            threshold_synchronized: 254e-6,
            threshold_adhoc: 130e-6,
            threshold_nonsynchronized: 36e-6,
        }
    }
}

/// Rated storage element of a strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacitorSpec {
    pub capacitance: f64,
    /// Datasheet leakage, A.
    pub leakage_current: f64,
    pub v_turn_on: f64,
}

impl CapacitorSpec {
    pub fn rated(&self) -> Supercapacitor {
        Supercapacitor::new(self.capacitance, self.leakage_current).with_thresholds(3.6, self.v_turn_on, 1.8)
    }
}

/// Fixed inputs to the fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Platform {
    pub profile: DevicePowerProfile,
    pub airtimes: Airtimes,
    pub slotframe: SlotframeConfig,
    /// Slotframe length used by the ad-hoc strategy.
    pub adhoc_slots: u32,
    pub guard_time: f64,
    pub worst_case_drift_ppm: f64,
    pub sync_interval: f64,
    pub extended_sync_interval: f64,
    pub extra_exchanges: u32,
    pub max_retries: u32,
    /// CPU time to wake and prepare a frame without a TSCH stack.
    pub frame_wake_overhead: f64,
    pub leave_cost_exchanges: u32,
    pub synchronized_cap: CapacitorSpec,
    pub adhoc_cap: CapacitorSpec,
    pub nonsync_cap: CapacitorSpec,
    pub nonsync_large_cap: CapacitorSpec,
    pub adhoc_reference_interval: f64,
    pub nonsync_reference_interval: f64,
    /// Fraction of idle router time spent listening for solicitations.
    pub solicitation_listen_fraction: f64,
}

impl Default for Platform {
    fn default() -> Self {
        Self {
            profile: DevicePowerProfile::default(),
            airtimes: Airtimes::default(),
            slotframe: SlotframeConfig::default(),
            adhoc_slots: 35,
            guard_time: 2.2e-3,
            worst_case_drift_ppm: 64.0,
            sync_interval: 16.0,
            extended_sync_interval: 64.0,
            extra_exchanges: 2,
            max_retries: 8,
            frame_wake_overhead: 3e-3,
            leave_cost_exchanges: 1,
            synchronized_cap: CapacitorSpec {
                capacitance: 0.1,
                leakage_current: 2e-6,
                v_turn_on: 3.0,
            },
            adhoc_cap: CapacitorSpec {
                capacitance: 0.1,
                leakage_current: 2e-6,
                v_turn_on: 3.0,
            },
            nonsync_cap: CapacitorSpec {
                capacitance: 100e-6,
                leakage_current: 0.5e-6,
                v_turn_on: 2.6,
            },
            nonsync_large_cap: CapacitorSpec {
                capacitance: 10e-3,
                leakage_current: 1e-6,
                v_turn_on: 2.6,
            },
            adhoc_reference_interval: 86_400.0,
            nonsync_reference_interval: 180.0,
            solicitation_listen_fraction: 0.05,
        }
    }
}

/// Constants produced by the fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fitted {
    pub task_processing_s: f64,
    pub per_hop_forward_delay: f64,
    pub local_overhead: f64,
    pub auth_listen_duty: f64,
    pub self_discharge_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub version: u32,
    pub anchors: Anchors,
    pub platform: Platform,
    pub fitted: Fitted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Synchronized,
    Adhoc,
    Nonsynchronized,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [StrategyKind::Synchronized, StrategyKind::Adhoc, StrategyKind::Nonsynchronized];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Synchronized => "synchronized",
            StrategyKind::Adhoc => "adhoc",
            StrategyKind::Nonsynchronized => "nonsynchronized",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Name of the optimization variant drawn next to the base curve.
    pub fn variant_name(self) -> &'static str {
        match self {
            StrategyKind::Synchronized => "extended_sync",
            StrategyKind::Adhoc => "hierarchical",
            StrategyKind::Nonsynchronized => "large_capacitor",
        }
    }
}

/// Achieved values of every anchor under a calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub join_energy: f64,
    pub join_duration: f64,
    pub sync_task_energy: f64,
    pub adhoc_join_duration: f64,
    pub hierarchical_ratio: f64,
    pub scan_to_negotiation: f64,
    pub threshold_synchronized: f64,
    pub threshold_adhoc: f64,
    pub threshold_nonsynchronized: f64,
    pub max_sync_interval: f64,
}

impl Calibration {
    /// Fit against the default platform and anchors, computed once per process.
    pub fn builtin() -> Calibration {
        static CELL: OnceLock<Calibration> = OnceLock::new();
        CELL.get_or_init(|| Calibration::fit(Anchors::default(), Platform::default()).expect("default fit"))
            .clone()
    }

    pub fn fit(anchors: Anchors, platform: Platform) -> Result<Calibration> {
        platform.profile.validate()?;
        platform.slotframe.validate()?;
        let p = &platform.profile;
        let air = &platform.airtimes;

        let ka_radio = air.keepalive * p.p_tx + air.ack_window() * p.p_rx;
        let task_processing_s = (anchors.sync_task_energy * p.eta_out - ka_radio) / p.p_cpu_active;
        if !(task_processing_s >= 0.0) {
            return Err(Error::invalid("calibration", "sync task anchor below radio cost"));
        }

        let mut cal = Calibration {
            version: CALIBRATION_VERSION,
            anchors: anchors.clone(),
            platform: platform.clone(),
            fitted: Fitted {
                task_processing_s,
                per_hop_forward_delay: 0.0,
                local_overhead: 0.0,
                auth_listen_duty: 0.0,
                self_discharge_factor: 1.0,
            },
        };

        // duration anchors: full join on the default slotframe, hierarchical ratio on the ad-hoc one
        let sf1 = &platform.slotframe;
        let l1 = sf1.l_sf();
        let probe = cal.join_config(sf1.n_channels, anchors.join_hops);
        let src = [BeaconSource {
            router: 0,
            channel_offset: 0,
            phase: 0,
        }];
        let scan1 = expected_scan_wait(sf1, air, &probe, &src).mean;
        let sf2 = cal.adhoc_slotframe();
        let l2 = sf2.l_sf();
        let s2 = (air.solicitation + air.turnaround + air.beacon) / l2;
        let h = anchors.join_hops as f64;
        let r = anchors.hierarchical_ratio;
        let k = (anchors.join_duration - scan1) / l1;
        // s + l + c = r·(s + l + h·c)  and  l + h·c = k
        let c = (k + s2) / ((h * r - 1.0) / (1.0 - r) + h);
        let l = k - h * c;
        let e = platform.extra_exchanges as f64;
        let d = (c - e) / 2.0;
        if !(d >= 0.0 && l >= 0.0) {
            return Err(Error::invalid("calibration", "duration anchors are not reachable with these airtimes"));
        }
        cal.fitted.per_hop_forward_delay = d;
        cal.fitted.local_overhead = l;

        // energy anchor: linear in the listen duty
        let env = JoinEnv {
            slotframe: sf1,
            air,
            profile: p,
        };
        let at = |duty: f64, cal: &Calibration| {
            let mut cfg = cal.join_config(sf1.n_channels, anchors.join_hops);
            cfg.auth_listen_duty = duty;
            expected_join(env, &cfg).energy()
        };
        let e0 = at(0.0, &cal);
        let e1 = at(1.0, &cal);
        let duty = (anchors.join_energy - e0) / (e1 - e0);
        if !(0.0..=1.0).contains(&duty) {
            return Err(Error::invalid("calibration", "join energy anchor needs a listen duty outside [0, 1]"));
        }
        cal.fitted.auth_listen_duty = duty;

        // self-discharge factor: thresholds are affine in it; minimise the worst relative error
        let targets = [
            anchors.threshold_synchronized,
            anchors.threshold_adhoc,
            anchors.threshold_nonsynchronized,
        ];
        let err = |kf: f64| -> f64 {
            let mut c = cal.clone();
            c.fitted.self_discharge_factor = kf;
            StrategyKind::ALL
                .iter()
                .zip(targets)
                .map(|(s, t)| (c.case(*s, false).threshold() / t - 1.0).abs())
                .fold(0.0, f64::max)
        };
        let (mut lo, mut hi) = (0.0_f64, 1000.0_f64);
        for _ in 0..200 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if err(m1) <= err(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        cal.fitted.self_discharge_factor = 0.5 * (lo + hi);
        Ok(cal)
    }

    pub fn slotframe(&self) -> SlotframeConfig {
        self.platform.slotframe.clone()
    }

    pub fn adhoc_slotframe(&self) -> SlotframeConfig {
        self.platform.slotframe.clone().with_slots(self.platform.adhoc_slots)
    }

    /// Join configuration using the first `n_adv` channels for advertisements.
    pub fn join_config(&self, n_adv: u32, hops: u32) -> JoinConfig {
        JoinConfig {
            advertisement_channels: (0..n_adv).collect(),
            beacon_period: 1,
            hops_to_border_router: hops,
            per_hop_forward_delay: self.fitted.per_hop_forward_delay,
            extra_exchanges: self.platform.extra_exchanges,
            local_overhead: self.fitted.local_overhead,
            auth_listen_duty: self.fitted.auth_listen_duty,
            max_retries: self.platform.max_retries,
            deadline: None,
            optimizations: JoinOptimizations {
                limited_adv_channels: n_adv < self.platform.slotframe.n_channels,
                ..JoinOptimizations::default()
            },
        }
    }

    /// Join configuration of the ad-hoc strategy: beacon solicitation, optionally hierarchical.
    pub fn adhoc_join_config(&self, hierarchical: bool) -> JoinConfig {
        let mut cfg = self.join_config(self.platform.slotframe.n_channels, self.anchors.join_hops);
        cfg.optimizations.beacon_solicitation = true;
        cfg.optimizations.hierarchical_mgmt = hierarchical;
        cfg
    }

    /// Rated leakage scaled to effective leakage.
    pub fn effective(&self, cap: Supercapacitor) -> Supercapacitor {
        Supercapacitor {
            leakage_current: cap.leakage_current * self.fitted.self_discharge_factor,
            ..cap
        }
    }

    pub fn sync_task_energy(&self) -> f64 {
        keepalive_energy(&self.platform.profile, &self.platform.airtimes, self.fitted.task_processing_s)
    }

    /// Data frame in a dedicated cell whose acknowledgment also resynchronizes the clock.
    pub fn update_task_energy(&self) -> f64 {
        let p = &self.platform.profile;
        let a = &self.platform.airtimes;
        (self.fitted.task_processing_s * p.p_cpu_active + a.data * p.p_tx + a.ack_window() * p.p_rx) / p.eta_out
    }

    /// Data plus acknowledgment inside an existing session, no wake-up overhead.
    pub fn data_exchange_energy(&self) -> f64 {
        let p = &self.platform.profile;
        let a = &self.platform.airtimes;
        (a.data * p.p_tx + a.ack_window() * p.p_rx) / p.eta_out
    }

    pub fn leave_energy(&self) -> f64 {
        let p = &self.platform.profile;
        self.platform.leave_cost_exchanges as f64 * p.drawn(p.p_tx, self.platform.airtimes.data)
    }

    /// One non-synchronized transmission: wake, CCA, turnaround, frame, acknowledgment window.
    pub fn frame_energy(&self) -> f64 {
        let p = &self.platform.profile;
        let a = &self.platform.airtimes;
        (self.platform.frame_wake_overhead * p.p_cpu_active
            + (a.cca + a.turnaround) * p.p_rx
            + a.data * p.p_tx
            + a.ack_window() * p.p_rx)
            / p.eta_out
    }

    /// Wake to acknowledgment for a non-synchronized frame.
    pub fn frame_latency(&self) -> f64 {
        let a = &self.platform.airtimes;
        self.platform.frame_wake_overhead + a.cca + a.turnaround + a.data + a.ack_window()
    }

    pub fn adhoc_join(&self, hierarchical: bool) -> JoinEstimate {
        let sf = self.adhoc_slotframe();
        let env = JoinEnv {
            slotframe: &sf,
            air: &self.platform.airtimes,
            profile: &self.platform.profile,
        };
        expected_join(env, &self.adhoc_join_config(hierarchical))
    }

    pub fn full_join(&self) -> JoinEstimate {
        let sf = self.slotframe();
        let env = JoinEnv {
            slotframe: &sf,
            air: &self.platform.airtimes,
            profile: &self.platform.profile,
        };
        expected_join(env, &self.join_config(sf.n_channels, self.anchors.join_hops))
    }

    /// Feasibility inputs for a strategy, base configuration or its optimization variant.
    pub fn case(&self, kind: StrategyKind, variant: bool) -> FeasibilityCase {
        let pl = &self.platform;
        let p = pl.profile;
        let (budget, spec) = match kind {
            StrategyKind::Synchronized => {
                let interval = if variant { pl.extended_sync_interval } else { pl.sync_interval };
                (
                    TaskBudget {
                        e_task: self.update_task_energy(),
                        t_floor: pl.slotframe.l_sf(),
                        p_idle: p.p_sleep,
                        t_ceiling: Some(interval),
                        reference_interval: interval,
                    },
                    pl.synchronized_cap,
                )
            }
            StrategyKind::Adhoc => {
                let j = self.adhoc_join(variant);
                (
                    TaskBudget {
                        e_task: j.energy() + self.data_exchange_energy() + self.leave_energy(),
                        t_floor: j.duration(),
                        p_idle: p.p_off,
                        t_ceiling: None,
                        reference_interval: pl.adhoc_reference_interval,
                    },
                    pl.adhoc_cap,
                )
            }
            StrategyKind::Nonsynchronized => (
                TaskBudget {
                    e_task: self.frame_energy(),
                    t_floor: pl.slotframe.t_slot,
                    p_idle: p.p_off,
                    t_ceiling: None,
                    reference_interval: pl.nonsync_reference_interval,
                },
                if variant { pl.nonsync_large_cap } else { pl.nonsync_cap },
            ),
        };
        FeasibilityCase {
            strategy: kind.as_str().to_string(),
            variant: if variant { kind.variant_name() } else { "base" }.to_string(),
            budget,
            cap: self.effective(spec.rated()),
            profile: p,
        }
    }

    pub fn report(&self) -> CalibrationReport {
        let full = self.full_join();
        let base = self.adhoc_join(false);
        let hier = self.adhoc_join(true);
        CalibrationReport {
            join_energy: full.energy(),
            join_duration: full.duration(),
            sync_task_energy: self.sync_task_energy(),
            adhoc_join_duration: base.duration(),
            hierarchical_ratio: hier.duration() / base.duration(),
            scan_to_negotiation: full.scan_energy / full.auth_energy,
            threshold_synchronized: self.case(StrategyKind::Synchronized, false).threshold(),
            threshold_adhoc: self.case(StrategyKind::Adhoc, false).threshold(),
            threshold_nonsynchronized: self.case(StrategyKind::Nonsynchronized, false).threshold(),
            max_sync_interval: max_sync_interval(self.platform.guard_time, self.platform.worst_case_drift_ppm),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        let body = toml::to_string_pretty(self).map_err(|e| Error::invalid("calibration", e.to_string()))?;
        let r = self.report();
        let header = format!(
            "# Calibration file, version {v}.\n\
             # Produced by `bltsch calibrate`; [fitted] values are solved from [anchors] and [platform].\n\
             # Achieved: join {je:.4} J in {jd:.3} s, sync task {st:.4e} J, ad-hoc join {aj:.3} s,\n\
             # hierarchical ratio {hr:.4}, thresholds {t1:.1} / {t2:.1} / {t3:.1} uW.\n\n",
            v = self.version,
            je = r.join_energy,
            jd = r.join_duration,
            st = r.sync_task_energy,
            aj = r.adhoc_join_duration,
            hr = r.hierarchical_ratio,
            t1 = r.threshold_synchronized * 1e6,
            t2 = r.threshold_adhoc * 1e6,
            t3 = r.threshold_nonsynchronized * 1e6,
        );
        Ok(header + &body)
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Calibration> {
        let cal: Calibration = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if cal.version != CALIBRATION_VERSION {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                reason: format!("unsupported calibration version {}", cal.version),
            });
        }
        Ok(cal)
    }

    pub fn load(path: &Path) -> Result<Calibration> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let c = Calibration::builtin();
        let text = c.to_toml().unwrap();
        let back = Calibration::from_toml(&text, Path::new("x.toml")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn fitted_values_are_physical() {
        let f = Calibration::builtin().fitted;
        assert!(f.task_processing_s > 0.0 && f.task_processing_s < 1.0);
        assert!(f.per_hop_forward_delay > 0.0);
        assert!(f.auth_listen_duty > 0.0 && f.auth_listen_duty < 0.5);
        assert!(f.self_discharge_factor > 1.0);
    }
}
