//! Steady-state power balance: which update interval a harvest power sustains.
//!
//! A device repeating a task of storage-side energy `e_task` every `T`
//! seconds is sustainable when
//!
//! ```text
//! eta_in·P ≥ v_op·I_leak + p_idle/eta_out + e_task/T
//! ```
//!
//! and the store, charged to its turn-on threshold, holds at least `e_task`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::energy::{DevicePowerProfile, Supercapacitor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskBudget {
    /// Storage-side joules per recurring task.
    pub e_task: f64,
    /// Shortest possible interval (latency floor), seconds.
    pub t_floor: f64,
    /// Load between tasks, watts.
    pub p_idle: f64,
    /// Longest admissible interval, if the strategy has one (e.g. a sync deadline).
    pub t_ceiling: Option<f64>,
    /// Interval at which the feasibility threshold is quoted.
    pub reference_interval: f64,
}

impl TaskBudget {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_task > 0.0) {
            return Err(Error::invalid("task budget", "e_task must be > 0"));
        }
        if !(self.t_floor > 0.0) {
            return Err(Error::invalid("task budget", "t_floor must be > 0"));
        }
        if !(self.p_idle >= 0.0) {
            return Err(Error::invalid("task budget", "p_idle must be >= 0"));
        }
        if let Some(c) = self.t_ceiling {
            if !(c >= self.t_floor) {
                return Err(Error::invalid("task budget", "t_ceiling must be >= t_floor"));
            }
        }
        Ok(())
    }
}

/// Why no interval is sustainable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Infeasible {
    /// Harvest does not even cover leakage and idle draw.
    PowerBalance { net_w: f64 },
    /// A full store cannot fund one task.
    PeakEnergy { usable_j: f64, e_task_j: f64 },
    /// The sustainable interval exceeds the strategy's ceiling.
    IntervalCeiling { required_s: f64, ceiling_s: f64 },
}

/// Mean operating voltage: midpoint of the hysteresis window.
pub fn v_op(cap: &Supercapacitor) -> f64 {
    0.5 * (cap.v_turn_on + cap.v_turn_off)
}

/// Power left for tasks after leakage and idle draw, on the storage side.
pub fn net_task_power(budget: &TaskBudget, cap: &Supercapacitor, harvest_w: f64, profile: &DevicePowerProfile) -> f64 {
    profile.eta_in * harvest_w - v_op(cap) * cap.leakage_current - budget.p_idle / profile.eta_out
}

/// Smallest sustainable interval T ≥ t_floor, or the reason none exists.
pub fn min_update_interval(
    budget: &TaskBudget,
    cap: &Supercapacitor,
    harvest_w: f64,
    profile: &DevicePowerProfile,
) -> std::result::Result<f64, Infeasible> {
    let usable = cap.usable_energy_at(cap.v_turn_on);
    if usable < budget.e_task {
        return Err(Infeasible::PeakEnergy {
            usable_j: usable,
            e_task_j: budget.e_task,
        });
    }
    let net = net_task_power(budget, cap, harvest_w, profile);
    if !(net > 0.0) {
        return Err(Infeasible::PowerBalance { net_w: net });
    }
    let t = (budget.e_task / net).max(budget.t_floor);
    match budget.t_ceiling {
        Some(c) if t > c => Err(Infeasible::IntervalCeiling {
            required_s: t,
            ceiling_s: c,
        }),
        _ => Ok(t),
    }
}

/// Harvest power at which the balance holds with equality for `interval`.
pub fn min_harvest_power(budget: &TaskBudget, cap: &Supercapacitor, interval: f64, profile: &DevicePowerProfile) -> f64 {
    let task = if interval.is_infinite() { 0.0 } else { budget.e_task / interval };
    (v_op(cap) * cap.leakage_current + budget.p_idle / profile.eta_out + task) / profile.eta_in
}

/// Feasibility threshold: minimum power at the reference interval (or the ceiling, if shorter).
pub fn threshold_power(budget: &TaskBudget, cap: &Supercapacitor, profile: &DevicePowerProfile) -> f64 {
    let t = match budget.t_ceiling {
        Some(c) => c.min(budget.reference_interval),
        None => budget.reference_interval,
    };
    min_harvest_power(budget, cap, t.max(budget.t_floor), profile)
}

/// Inputs of one feasibility curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityCase {
    pub strategy: String,
    pub variant: String,
    pub budget: TaskBudget,
    /// Capacitor with effective leakage.
    pub cap: Supercapacitor,
    pub profile: DevicePowerProfile,
}

impl FeasibilityCase {
    pub fn min_interval(&self, harvest_w: f64) -> std::result::Result<f64, Infeasible> {
        min_update_interval(&self.budget, &self.cap, harvest_w, &self.profile)
    }

    pub fn threshold(&self) -> f64 {
        threshold_power(&self.budget, &self.cap, &self.profile)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub strategy: String,
    pub variant: String,
    pub power_w: f64,
    /// +∞ when infeasible.
    pub min_interval_s: f64,
    pub feasible: bool,
}

/// `n_points` log-spaced harvest powers over `[lo, hi]`.
pub fn log_space(lo: f64, hi: f64, n_points: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo) {
        return Err(Error::invalid("sweep", "power range must be positive and ordered"));
    }
    if n_points == 1 {
        return Ok(vec![lo]);
    }
    if n_points < 2 {
        return Err(Error::invalid("sweep", "n_points must be >= 1"));
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n_points)
        .map(|i| {
            if i == 0 {
                lo
            } else if i + 1 == n_points {
                hi
            } else {
                (a + (b - a) * i as f64 / (n_points - 1) as f64).exp()
            }
        })
        .collect())
}

/// Evaluates every case at every power.
pub fn sweep(cases: &[FeasibilityCase], powers: &[f64]) -> Vec<CurveRow> {
    let mut rows = Vec::with_capacity(cases.len() * powers.len());
    for case in cases {
        for &p in powers {
            let r = case.min_interval(p);
            rows.push(CurveRow {
                strategy: case.strategy.clone(),
                variant: case.variant.clone(),
                power_w: p,
                min_interval_s: r.unwrap_or(f64::INFINITY),
                feasible: r.is_ok(),
            });
        }
    }
    rows
}

/// CSV with columns `strategy,variant,power_w,min_interval_s,feasible`.
pub fn write_curve<W: Write>(rows: &[CurveRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["strategy", "variant", "power_w", "min_interval_s", "feasible"])?;
    for r in rows {
        out.write_record([
            r.strategy.clone(),
            r.variant.clone(),
            r.power_w.to_string(),
            r.min_interval_s.to_string(),
            r.feasible.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_curve<R: Read>(r: R) -> Result<Vec<CurveRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let want = ["strategy", "variant", "power_w", "min_interval_s", "feasible"];
    if headers.iter().ne(want.iter().copied()) {
        return Err(Error::invalid("curve", format!("expected header {}", want.join(","))));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::invalid("curve", format!("row {}: bad {what}", i + 1));
        rows.push(CurveRow {
            strategy: rec[0].to_string(),
            variant: rec[1].to_string(),
            power_w: rec[2].parse().map_err(|_| bad("power_w"))?,
            min_interval_s: rec[3].parse().map_err(|_| bad("min_interval_s"))?,
            feasible: rec[4].parse().map_err(|_| bad("feasible"))?,
        });
    }
    Ok(rows)
}
