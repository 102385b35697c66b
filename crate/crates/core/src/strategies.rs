//! Node and router behavior for the three integration strategies, router
//! scan/TSCH alternation and channel coverage.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::join::JoinOptimizations;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SyncMethod {
    Keepalive,
    Beacon,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UpdateTrigger {
    EnergyReady,
    Periodic { interval: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RouterMode {
    Alternating { tsch_fraction: f64 },
    MultiInterface,
}

fn default_retries() -> u32 {
    3
}
fn default_true() -> bool {
    true
}
fn default_one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum StrategyConfig {
    Synchronized {
        sync_interval: f64,
        sync_method: SyncMethod,
        /// Seconds between data updates; None sends no data.
        #[serde(default)]
        update_interval: Option<f64>,
        #[serde(default = "default_retries")]
        max_retries: u32,
        /// Channels the node listens on when joining; defaults to all.
        #[serde(default)]
        advertisement_channels: Option<u32>,
        /// Only `scheduled_joining` and `duty_cycled` apply to rejoins.
        #[serde(default)]
        join_opts: JoinOptimizations,
    },
    Adhoc {
        update_trigger: UpdateTrigger,
        #[serde(default)]
        join_opts: JoinOptimizations,
        #[serde(default = "default_one")]
        leave_cost_exchanges: u32,
    },
    Nonsynchronized {
        n_channels_used: u32,
        #[serde(default = "default_true")]
        cca_enabled: bool,
        router_mode: RouterMode,
        #[serde(default = "default_true")]
        ack_enabled: bool,
    },
}

impl StrategyConfig {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyConfig::Synchronized { .. } => "synchronized",
            StrategyConfig::Adhoc { .. } => "adhoc",
            StrategyConfig::Nonsynchronized { .. } => "nonsynchronized",
        }
    }

    /// Checks the invariants that need the clock's interval bound and the channel count.
    pub fn validate(&self, max_sync_interval: f64, n_channels: u32) -> Result<()> {
        match self {
            StrategyConfig::Synchronized {
                sync_interval,
                update_interval,
                ..
            } => {
                if !(*sync_interval > 0.0) {
                    return Err(Error::invalid("strategy", "sync_interval must be > 0"));
                }
                if *sync_interval > max_sync_interval {
                    return Err(Error::invalid(
                        "strategy",
                        format!("sync_interval {sync_interval} s exceeds max_sync_interval {max_sync_interval:.3} s"),
                    ));
                }
                if let Some(u) = update_interval {
                    if !(*u > 0.0) {
                        return Err(Error::invalid("strategy", "update_interval must be > 0"));
                    }
                }
            }
            StrategyConfig::Adhoc { update_trigger, .. } => {
                if let UpdateTrigger::Periodic { interval } = update_trigger {
                    if !(*interval > 0.0) {
                        return Err(Error::invalid("strategy", "periodic interval must be > 0"));
                    }
                }
            }
            StrategyConfig::Nonsynchronized {
                n_channels_used,
                router_mode,
                ..
            } => {
                if *n_channels_used == 0 || *n_channels_used > n_channels {
                    return Err(Error::invalid("strategy", "n_channels_used must lie in [1, N_ch]"));
                }
                if let RouterMode::Alternating { tsch_fraction } = router_mode {
                    if !(0.0..1.0).contains(tsch_fraction) {
                        return Err(Error::invalid("strategy", "tsch_fraction must lie in [0, 1)"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// What a synchronized node does next.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyncAction {
    /// Off or desynchronized: (re)join before anything else.
    Rejoin,
    /// Resynchronize now.
    Sync,
    /// Send data in the next dedicated TX cell (the acknowledgment also resynchronizes).
    SendData,
    SleepUntil(f64),
}

/// Policy state a synchronized node exposes to its decision step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncView {
    pub joined: bool,
    pub desynchronized: bool,
    pub next_sync_due: f64,
    pub next_data_due: Option<f64>,
}

pub fn step_synchronized(view: &SyncView, now: f64) -> SyncAction {
    if !view.joined || view.desynchronized {
        return SyncAction::Rejoin;
    }
    let data_due = view.next_data_due.unwrap_or(f64::INFINITY);
    if data_due <= now && data_due <= view.next_sync_due {
        return SyncAction::SendData;
    }
    if view.next_sync_due <= now {
        return SyncAction::Sync;
    }
    SyncAction::SleepUntil(view.next_sync_due.min(data_due))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdhocAction {
    /// Join, send the pending update, leave and power off.
    JoinAndSend,
    /// Stay off until the store reaches its turn-on threshold.
    WaitForEnergy,
    /// Stay off until the next periodic update.
    WaitUntil(f64),
    /// Powered but the join gate is closed; wait for better harvest.
    HoldForGate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdhocView {
    pub powered: bool,
    pub update_pending: bool,
    pub next_update: Option<f64>,
    pub gate_open: bool,
}

pub fn step_adhoc(view: &AdhocView, _now: f64) -> AdhocAction {
    if !view.update_pending {
        return match view.next_update {
            Some(t) => AdhocAction::WaitUntil(t),
            None => AdhocAction::WaitForEnergy,
        };
    }
    if !view.powered {
        return AdhocAction::WaitForEnergy;
    }
    if !view.gate_open {
        return AdhocAction::HoldForGate;
    }
    AdhocAction::JoinAndSend
}

#[derive(Debug, Clone, PartialEq)]
pub enum NonSyncAction {
    /// Try channels in this order (CCA then hop), transmit on the first clear one, then power off.
    Transmit { channel_order: Vec<u32> },
    WaitForEnergy,
}

/// `start` picks the first channel; the rest follow cyclically.
pub fn step_nonsynchronized(powered: bool, usable_energy: f64, frame_budget: f64, n_channels_used: u32, cca_enabled: bool, start: u32) -> NonSyncAction {
    if !powered || usable_energy < frame_budget {
        return NonSyncAction::WaitForEnergy;
    }
    let n = n_channels_used.max(1);
    let tries = if cca_enabled { n } else { 1 };
    NonSyncAction::Transmit {
        channel_order: (0..tries).map(|i| (start + i) % n).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RouterActivity {
    Scan,
    Tsch,
}

/// One interval of a router's periodic timetable, in slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimetableEntry {
    pub start_slot: u64,
    pub end_slot: u64,
    pub activity: RouterActivity,
    /// Scanned channel; None while scanning means every channel at once.
    pub channel: Option<u32>,
}

/// Periodic scan/TSCH timetable of a set of routers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timetable {
    pub period_slots: u64,
    pub t_slot: f64,
    /// (router id, entries covering [0, period_slots))
    pub routers: Vec<(u32, Vec<TimetableEntry>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlternationInfeasible {
    pub routers: u32,
    pub min_routers: u32,
}

impl std::fmt::Display for AlternationInfeasible {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "coverage infeasible with {} routers, minimum {} routers", self.routers, self.min_routers)
    }
}

/// Routers needed so every channel is scanned at all times.
pub fn min_alternating_routers(n_channels_used: u32, tsch_fraction: f64) -> u32 {
    let need = n_channels_used as f64 / (1.0 - tsch_fraction);
    (need - 1e-9).ceil().max(1.0) as u32
}

/// Wrap-around assignment: the channels are laid end to end as a line of
/// n·P slot-cells, and router r scans the stretch [r·s, (r+1)·s) of it
/// (modulo n·P), where s is its scan time per period. A stretch spans at
/// most two channels at disjoint times, so no router scans two channels at once.
pub fn router_alternation_schedule(routers: &[u32], n_channels_used: u32, tsch_fraction: f64, period_slots: u64, t_slot: f64) -> std::result::Result<Timetable, AlternationInfeasible> {
    let min = min_alternating_routers(n_channels_used, tsch_fraction);
    let r = routers.len() as u32;
    let p = period_slots.max(1);
    let s = (((1.0 - tsch_fraction) * p as f64) - 1e-9).ceil().max(0.0) as u64;
    let n = n_channels_used as u64;
    if r < min || (r as u64) * s < n * p {
        return Err(AlternationInfeasible { routers: r, min_routers: min });
    }
    let line = n * p;
    let mut out = Vec::with_capacity(routers.len());
    for (i, &id) in routers.iter().enumerate() {
        let mut scans: Vec<TimetableEntry> = Vec::new();
        let mut pos = (i as u64 * s) % line;
        let mut left = s;
        while left > 0 {
            let ch = pos / p;
            let t0 = pos % p;
            let take = left.min(p - t0);
            scans.push(TimetableEntry {
                start_slot: t0,
                end_slot: t0 + take,
                activity: RouterActivity::Scan,
                channel: Some(ch as u32),
            });
            left -= take;
            pos = (pos + take) % line;
        }
        out.push((id, fill_tsch(scans, p)));
    }
    Ok(Timetable {
        period_slots: p,
        t_slot,
        routers: out,
    })
}

fn fill_tsch(mut scans: Vec<TimetableEntry>, period: u64) -> Vec<TimetableEntry> {
    scans.sort_by_key(|e| e.start_slot);
    let mut all = Vec::new();
    let mut t = 0;
    for e in scans {
        if e.start_slot > t {
            all.push(TimetableEntry {
                start_slot: t,
                end_slot: e.start_slot,
                activity: RouterActivity::Tsch,
                channel: None,
            });
        }
        t = e.end_slot;
        all.push(e);
    }
    if t < period {
        all.push(TimetableEntry {
            start_slot: t,
            end_slot: period,
            activity: RouterActivity::Tsch,
            channel: None,
        });
    }
    all
}

/// A multi-interface router scans every channel except in its scheduled TSCH slots.
pub fn multi_interface_timetable(router: u32, tsch_slots: &[u32], n_slots: u32, t_slot: f64) -> Timetable {
    let mut busy: Vec<u64> = tsch_slots.iter().map(|s| *s as u64).collect();
    busy.sort_unstable();
    busy.dedup();
    let mut entries = Vec::new();
    let mut t = 0;
    for b in busy {
        if b > t {
            entries.push(TimetableEntry {
                start_slot: t,
                end_slot: b,
                activity: RouterActivity::Scan,
                channel: None,
            });
        }
        entries.push(TimetableEntry {
            start_slot: b,
            end_slot: b + 1,
            activity: RouterActivity::Tsch,
            channel: None,
        });
        t = b + 1;
    }
    if t < n_slots as u64 {
        entries.push(TimetableEntry {
            start_slot: t,
            end_slot: n_slots as u64,
            activity: RouterActivity::Scan,
            channel: None,
        });
    }
    Timetable {
        period_slots: n_slots as u64,
        t_slot,
        routers: vec![(router, entries)],
    }
}

impl Timetable {
    pub fn merge(mut self, other: Timetable) -> Result<Timetable> {
        if self.period_slots != other.period_slots || self.t_slot != other.t_slot {
            return Err(Error::invalid("timetable", "cannot merge timetables with different periods"));
        }
        self.routers.extend(other.routers);
        Ok(self)
    }

    fn entry_at(&self, router_idx: usize, slot: u64) -> Option<&TimetableEntry> {
        let s = slot % self.period_slots;
        self.routers[router_idx].1.iter().find(|e| e.start_slot <= s && s < e.end_slot)
    }

    /// Whether `router` scans `channel` during `slot`.
    pub fn covers(&self, router: u32, channel: u32, slot: u64) -> bool {
        self.routers
            .iter()
            .position(|(id, _)| *id == router)
            .and_then(|i| self.entry_at(i, slot))
            .is_some_and(|e| e.activity == RouterActivity::Scan && e.channel.is_none_or(|c| c == channel))
    }

    /// Slot containing time `t`.
    pub fn slot_at(&self, t: f64) -> u64 {
        (t / self.t_slot + 1e-9).floor().max(0.0) as u64
    }

    /// Whether some in-range router scans `channel` for the whole interval [t0, t1].
    pub fn receiver_for(&self, in_range: &[u32], channel: u32, t0: f64, t1: f64) -> Option<u32> {
        let (s0, s1) = (self.slot_at(t0), self.slot_at(t1));
        in_range
            .iter()
            .copied()
            .find(|r| (s0..=s1).all(|s| self.covers(*r, channel, s)))
    }

    /// Fraction of the period a router spends in TSCH mode.
    pub fn tsch_share(&self, router: u32) -> f64 {
        self.share(router, RouterActivity::Tsch)
    }

    pub fn share(&self, router: u32, activity: RouterActivity) -> f64 {
        self.routers
            .iter()
            .find(|(id, _)| *id == router)
            .map(|(_, es)| {
                es.iter()
                    .filter(|e| e.activity == activity)
                    .map(|e| e.end_slot - e.start_slot)
                    .sum::<u64>() as f64
                    / self.period_slots as f64
            })
            .unwrap_or(0.0)
    }

    /// CSV with columns `router,t_start,t_end,mode,channel` (seconds; channel `*` means all).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["router", "t_start", "t_end", "mode", "channel"])?;
        for (id, entries) in &self.routers {
            for e in entries {
                out.write_record([
                    id.to_string(),
                    (e.start_slot as f64 * self.t_slot).to_string(),
                    (e.end_slot as f64 * self.t_slot).to_string(),
                    match e.activity {
                        RouterActivity::Scan => "SCAN".to_string(),
                        RouterActivity::Tsch => "TSCH".to_string(),
                    },
                    match (e.activity, e.channel) {
                        (RouterActivity::Tsch, _) => String::new(),
                        (_, Some(c)) => c.to_string(),
                        (_, None) => "*".to_string(),
                    },
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoverageResult {
    Pass,
    /// First uncovered (slot, channel).
    Fail { slot: u64, channel: u32 },
}

/// Exhaustive slot-by-slot check over one period.
pub fn coverage_check(timetable: &Timetable, in_range: &[u32], channels: &[u32]) -> CoverageResult {
    for slot in 0..timetable.period_slots {
        for &ch in channels {
            if !in_range.iter().any(|r| timetable.covers(*r, ch, slot)) {
                return CoverageResult::Fail { slot, channel: ch };
            }
        }
    }
    CoverageResult::Pass
}

/// One frame on the air.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transmission {
    pub node: u32,
    pub channel: u32,
    pub start: f64,
    pub end: f64,
}

/// Shared radio medium seen by non-synchronized devices.
#[derive(Debug, Clone, Default)]
pub struct Medium {
    frames: Vec<Transmission>,
}

impl Medium {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, tx: Transmission) {
        self.frames.push(tx);
    }

    /// Energy detected on `channel` at any point in [t0, t1].
    pub fn busy(&self, channel: u32, t0: f64, t1: f64) -> bool {
        self.frames
            .iter()
            .any(|f| f.channel == channel && f.start < t1 && t0 < f.end)
    }

    /// Whether another frame overlaps `tx` on its channel.
    pub fn collided(&self, tx: &Transmission) -> bool {
        self.frames.iter().any(|f| {
            f.channel == tx.channel && !(f.node == tx.node && f.start == tx.start) && f.start < tx.end && tx.start < f.end
        })
    }

    /// Forgets frames that ended before `t`.
    pub fn prune(&mut self, t: f64) {
        self.frames.retain(|f| f.end >= t);
    }
}
