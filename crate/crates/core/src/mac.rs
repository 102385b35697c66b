//! TSCH time structure: slotframes, channel hopping, cells, clock drift and
//! the two resynchronization mechanisms.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::energy::DevicePowerProfile;
use crate::error::{Error, Result};

/// Absolute slot number.
pub type Asn = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlotframeConfig {
    pub n_slots: u32,
    /// Seconds.
    pub t_slot: f64,
    pub n_channels: u32,
    /// Permutation of 0..n_channels; empty means the identity sequence.
    pub hop_sequence: Vec<u32>,
    pub advertisement_slots: Vec<u32>,
}

impl Default for SlotframeConfig {
    fn default() -> Self {
        Self {
            n_slots: 101,
            t_slot: 0.010,
            n_channels: 16,
            hop_sequence: Vec::new(),
            advertisement_slots: vec![0],
        }
    }
}

impl SlotframeConfig {
    pub fn with_slots(mut self, n_slots: u32) -> Self {
        self.n_slots = n_slots;
        self
    }

    pub fn with_channels(mut self, n_channels: u32) -> Self {
        self.n_channels = n_channels;
        self.hop_sequence.clear();
        self
    }

    /// Slotframe duration L_sf = n_slots · t_slot.
    pub fn l_sf(&self) -> f64 {
        self.n_slots as f64 * self.t_slot
    }

    pub fn hop(&self, i: u64) -> u32 {
        let idx = (i % self.n_channels as u64) as usize;
        if self.hop_sequence.is_empty() {
            idx as u32
        } else {
            self.hop_sequence[idx]
        }
    }

    /// Physical channel of a cell: hop_sequence[(asn + offset) mod N_ch].
    pub fn channel_for(&self, asn: Asn, channel_offset: u32) -> u32 {
        self.hop(asn + channel_offset as u64)
    }

    pub fn asn_at(&self, t: f64) -> Asn {
        if t <= 0.0 {
            0
        } else {
            (t / self.t_slot + 1e-9).floor() as Asn
        }
    }

    pub fn slot_start(&self, asn: Asn) -> f64 {
        asn as f64 * self.t_slot
    }

    /// First ASN ≥ `from` whose slot index within the slotframe is `slot`.
    pub fn next_asn_of_slot(&self, from: Asn, slot: u32) -> Asn {
        let n = self.n_slots as u64;
        let base = from - from % n;
        let cand = base + slot as u64;
        if cand >= from {
            cand
        } else {
            cand + n
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_slots == 0 {
            return Err(Error::invalid("slotframe", "n_slots must be >= 1"));
        }
        if !(self.t_slot > 0.0) {
            return Err(Error::invalid("slotframe", "t_slot must be > 0"));
        }
        if self.n_channels == 0 {
            return Err(Error::invalid("slotframe", "n_channels must be >= 1"));
        }
        if !self.hop_sequence.is_empty() {
            let mut seen = vec![false; self.n_channels as usize];
            if self.hop_sequence.len() != self.n_channels as usize {
                return Err(Error::invalid("slotframe", "hop_sequence length must equal n_channels"));
            }
            for &c in &self.hop_sequence {
                if c >= self.n_channels || seen[c as usize] {
                    return Err(Error::invalid("slotframe", "hop_sequence is not a permutation of 0..n_channels"));
                }
                seen[c as usize] = true;
            }
        }
        if self.advertisement_slots.is_empty() {
            return Err(Error::invalid("slotframe", "at least one advertisement slot is required"));
        }
        if self.advertisement_slots.iter().any(|s| *s >= self.n_slots) {
            return Err(Error::invalid("slotframe", "advertisement slot outside the slotframe"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CellKind {
    DedicatedTx,
    DedicatedRx,
    Shared,
    Advertisement,
}

impl CellKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::DedicatedTx => "DEDICATED_TX",
            CellKind::DedicatedRx => "DEDICATED_RX",
            CellKind::Shared => "SHARED",
            CellKind::Advertisement => "ADVERTISEMENT",
        }
    }

    pub fn is_dedicated(self) -> bool {
        matches!(self, CellKind::DedicatedTx | CellKind::DedicatedRx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellAssignment {
    pub slot_index: u32,
    pub channel_offset: u32,
    pub kind: CellKind,
    pub peer: u32,
}

/// Static per-node cell lists.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Schedule {
    cells: BTreeMap<u32, Vec<CellAssignment>>,
}

impl Schedule {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a cell, rejecting a dedicated cell that reuses an occupied (slot, offset) of the same node.
    pub fn add(&mut self, node: u32, cell: CellAssignment, slotframe: &SlotframeConfig) -> Result<()> {
        if cell.slot_index >= slotframe.n_slots {
            return Err(Error::invalid("schedule", format!("node {node}: slot {} outside slotframe", cell.slot_index)));
        }
        if cell.channel_offset >= slotframe.n_channels {
            return Err(Error::invalid("schedule", format!("node {node}: channel offset {} out of range", cell.channel_offset)));
        }
        let list = self.cells.entry(node).or_default();
        if cell.kind.is_dedicated()
            && list.iter().any(|c| {
                c.kind.is_dedicated() && c.slot_index == cell.slot_index && c.channel_offset == cell.channel_offset
            })
        {
            return Err(Error::invalid(
                "schedule",
                format!("node {node}: dedicated cell collision at slot {} offset {}", cell.slot_index, cell.channel_offset),
            ));
        }
        list.push(cell);
        Ok(())
    }

    pub fn cells_of(&self, node: u32) -> &[CellAssignment] {
        self.cells.get(&node).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn first_of_kind(&self, node: u32, kind: CellKind) -> Option<CellAssignment> {
        self.cells_of(node).iter().copied().find(|c| c.kind == kind)
    }

    pub fn len(&self) -> usize {
        self.cells.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// CSV with columns `node,slot_index,channel_offset,kind,peer`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["node", "slot_index", "channel_offset", "kind", "peer"])?;
        for (node, cells) in &self.cells {
            for c in cells {
                out.write_record([
                    node.to_string(),
                    c.slot_index.to_string(),
                    c.channel_offset.to_string(),
                    c.kind.as_str().to_string(),
                    c.peer.to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Local oscillator model of a node relative to its time source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClockModel {
    /// True drift relative to the time source (signed ppm).
    pub drift_ppm: f64,
    /// Seconds; split symmetrically around the expected frame start.
    pub guard_time: f64,
    pub last_sync_time: f64,
    pub offset_estimate: f64,
    /// Drift the node compensates for (adaptive sync).
    pub drift_estimate_ppm: f64,
}

impl Default for ClockModel {
    fn default() -> Self {
        Self {
            drift_ppm: 0.0,
            guard_time: 2.2e-3,
            last_sync_time: 0.0,
            offset_estimate: 0.0,
            drift_estimate_ppm: 0.0,
        }
    }
}

impl ClockModel {
    pub fn new(drift_ppm: f64, guard_time: f64) -> Self {
        Self {
            drift_ppm,
            guard_time,
            ..Self::default()
        }
    }

    /// Interval after which a relative drift of `relative_drift_ppm` exhausts half the guard time.
    pub fn max_sync_interval(&self, relative_drift_ppm: f64) -> f64 {
        max_sync_interval(self.guard_time, relative_drift_ppm)
    }

    /// Uncompensated offset accumulated since the last resynchronization.
    pub fn offset_at(&self, now: f64) -> f64 {
        (now - self.last_sync_time).max(0.0) * (self.drift_ppm - self.drift_estimate_ppm) * 1e-6
    }

    pub fn is_desynchronized(&self, now: f64) -> bool {
        self.offset_at(now).abs() > self.guard_time / 2.0 * (1.0 + 1e-9)
    }

    pub fn resync(&mut self, now: f64) {
        self.last_sync_time = now;
        self.offset_estimate = 0.0;
    }
}

/// (guard/2) / (ppm·1e-6); +∞ for zero drift.
pub fn max_sync_interval(guard_time: f64, relative_drift_ppm: f64) -> f64 {
    let ppm = relative_drift_ppm.abs();
    if ppm == 0.0 {
        f64::INFINITY
    } else {
        (guard_time / 2.0) / (ppm * 1e-6)
    }
}

/// Frame and turnaround durations, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Airtimes {
    pub data: f64,
    pub ack: f64,
    pub beacon: f64,
    pub keepalive: f64,
    pub solicitation: f64,
    pub turnaround: f64,
    /// Gap between the end of a frame and the start of its acknowledgment.
    pub ack_delay: f64,
    /// Offset of the frame start within a slot.
    pub tx_offset: f64,
    pub cca: f64,
}

impl Default for Airtimes {
    fn default() -> Self {
        Self {
            data: 4e-3,
            ack: 1e-3,
            beacon: 4e-3,
            keepalive: 1.5e-3,
            solicitation: 1e-3,
            turnaround: 192e-6,
            ack_delay: 0.8e-3,
            tx_offset: 2.12e-3,
            cca: 128e-6,
        }
    }
}

impl Airtimes {
    /// Listen window for an acknowledgment: wait plus the ack frame.
    pub fn ack_window(&self) -> f64 {
        self.ack_delay + self.ack
    }
}

/// Energy and radio time of one synchronization attempt sequence.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SyncOutcome {
    /// Storage-side joules.
    pub energy: f64,
    pub attempts: u32,
    pub success: bool,
    /// Wall time from the start of the first attempt until the clock is reset (or the last attempt ends).
    pub elapsed: f64,
    /// Time spent with the radio on.
    pub radio_time: f64,
}

/// Storage-side energy of one keep-alive exchange.
pub fn keepalive_energy(profile: &DevicePowerProfile, air: &Airtimes, processing_s: f64) -> f64 {
    (processing_s * profile.p_cpu_active + air.keepalive * profile.p_tx + air.ack_window() * profile.p_rx)
        / profile.eta_out
}

/// Storage-side energy of listening for one beacon in a known advertisement cell.
pub fn beacon_listen_energy(profile: &DevicePowerProfile, air: &Airtimes, guard_time: f64, processing_s: f64) -> f64 {
    (processing_s * profile.p_cpu_active + (guard_time + air.beacon) * profile.p_rx) / profile.eta_out
}

/// Sends keep-alive frames until one is acknowledged or `max_retries` extra attempts are spent.
///
/// `delivered` is consulted once per attempt; each retry waits for the next shared cell, one slotframe later.
pub fn synchronize_keepalive(
    clock: &mut ClockModel,
    now: f64,
    profile: &DevicePowerProfile,
    air: &Airtimes,
    processing_s: f64,
    retry_spacing: f64,
    max_retries: u32,
    mut delivered: impl FnMut() -> bool,
) -> SyncOutcome {
    let per_attempt = keepalive_energy(profile, air, processing_s);
    let radio = air.keepalive + air.ack_window();
    let mut out = SyncOutcome::default();
    for i in 0..=max_retries {
        out.attempts += 1;
        out.energy += per_attempt;
        out.radio_time += radio;
        if delivered() {
            out.success = true;
            out.elapsed = i as f64 * retry_spacing + processing_s + radio;
            clock.resync(now + out.elapsed);
            return out;
        }
    }
    out.elapsed = max_retries as f64 * retry_spacing + processing_s + radio;
    out
}

/// Listens in successive advertisement cells until a beacon is received or `max_listens` are spent.
pub fn synchronize_beacon_listen(
    clock: &mut ClockModel,
    now: f64,
    profile: &DevicePowerProfile,
    air: &Airtimes,
    processing_s: f64,
    beacon_spacing: f64,
    max_listens: u32,
    mut delivered: impl FnMut() -> bool,
) -> SyncOutcome {
    let per_listen = beacon_listen_energy(profile, air, clock.guard_time, processing_s);
    let radio = clock.guard_time + air.beacon;
    let mut out = SyncOutcome::default();
    for i in 0..max_listens.max(1) {
        out.attempts += 1;
        out.energy += per_listen;
        out.radio_time += radio;
        if delivered() {
            out.success = true;
            out.elapsed = i as f64 * beacon_spacing + processing_s + radio;
            clock.resync(now + out.elapsed);
            return out;
        }
    }
    out.elapsed = (max_listens.max(1) - 1) as f64 * beacon_spacing + processing_s + radio;
    out
}

/// Result of refitting the drift model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveUpdate {
    pub drift_estimate_ppm: f64,
    pub interval: f64,
}

/// Least-squares drift fit over `(time, cumulative offset)` observations.
///
/// The next interval uses the residual bound max(|drift − estimate|, floor),
/// and is never shorter than the worst-case interval. With fewer than two
/// observations the worst-case interval is returned.
pub fn adaptive_sync_update(
    clock: &mut ClockModel,
    observed_offsets: &[(f64, f64)],
    worst_case_ppm: f64,
    residual_floor_ppm: f64,
) -> AdaptiveUpdate {
    let worst = clock.max_sync_interval(worst_case_ppm);
    if observed_offsets.len() < 2 {
        return AdaptiveUpdate {
            drift_estimate_ppm: clock.drift_estimate_ppm,
            interval: worst,
        };
    }
    let n = observed_offsets.len() as f64;
    let mt = observed_offsets.iter().map(|o| o.0).sum::<f64>() / n;
    let mo = observed_offsets.iter().map(|o| o.1).sum::<f64>() / n;
    let sxx: f64 = observed_offsets.iter().map(|o| (o.0 - mt).powi(2)).sum();
    let sxy: f64 = observed_offsets.iter().map(|o| (o.0 - mt) * (o.1 - mo)).sum();
    let slope_ppm = if sxx > 0.0 { sxy / sxx * 1e6 } else { 0.0 };
    clock.drift_estimate_ppm = slope_ppm;
    let residual = (clock.drift_ppm - slope_ppm).abs().max(residual_floor_ppm);
    let interval = clock.max_sync_interval(residual).max(worst);
    AdaptiveUpdate {
        drift_estimate_ppm: slope_ppm,
        interval,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(n: u32) -> SlotframeConfig {
        SlotframeConfig::default().with_channels(n)
    }

    #[test]
    fn channel_for_examples() {
        assert_eq!(identity(4).channel_for(0, 0), 0);
        assert_eq!(identity(4).channel_for(5, 3), 0);
    }

    #[test]
    fn max_sync_interval_examples() {
        assert!((max_sync_interval(2e-3, 20.0) - 50.0).abs() < 1e-9);
        assert!((max_sync_interval(4e-3, 20.0) - 100.0).abs() < 1e-9);
        assert!(max_sync_interval(2e-3, 0.0).is_infinite());
        let d = ClockModel::default().max_sync_interval(64.0);
        assert!(d >= 16.0 && d < 18.0, "{d}");
    }

    #[test]
    fn adaptive_extends_to_floor() {
        let mut c = ClockModel::new(20.0, 2e-3);
        let obs: Vec<(f64, f64)> = (0..5).map(|i| (i as f64 * 50.0, i as f64 * 50.0 * 20e-6)).collect();
        let u = adaptive_sync_update(&mut c, &obs, 20.0, 2.0);
        assert!((u.drift_estimate_ppm - 20.0).abs() < 1e-9);
        assert!((u.interval - 500.0).abs() < 1e-6);
    }

    #[test]
    fn adaptive_degenerate_series() {
        let mut c = ClockModel::new(0.0, 2e-3);
        let u = adaptive_sync_update(&mut c, &[(0.0, 0.0), (10.0, 0.0)], 20.0, 2.0);
        assert_eq!(u.drift_estimate_ppm, 0.0);
        // floor-limited interval 500 s exceeds the worst case of 50 s
        assert!((u.interval - 500.0).abs() < 1e-6);
        let u = adaptive_sync_update(&mut c, &[(0.0, 0.0)], 20.0, 2.0);
        assert!((u.interval - 50.0).abs() < 1e-9);
    }

    #[test]
    fn keepalive_cheaper_than_beacon_listen() {
        let p = DevicePowerProfile::default();
        let a = Airtimes::default();
        assert!(keepalive_energy(&p, &a, 0.1) < beacon_listen_energy(&p, &a, 2.2e-3, 0.1));
    }

    #[test]
    fn dedicated_collision_rejected() {
        let sf = SlotframeConfig::default();
        let mut s = Schedule::new();
        let c = CellAssignment {
            slot_index: 3,
            channel_offset: 1,
            kind: CellKind::DedicatedTx,
            peer: 9,
        };
        s.add(1, c, &sf).unwrap();
        assert!(s.add(1, CellAssignment { kind: CellKind::DedicatedRx, ..c }, &sf).is_err());
        s.add(2, c, &sf).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("node,slot_index,channel_offset,kind,peer\n"));
    }

    #[test]
    fn ideal_keepalive_resyncs() {
        let mut c = ClockModel::new(10.0, 2.2e-3);
        let out = synchronize_keepalive(&mut c, 100.0, &DevicePowerProfile::default(), &Airtimes::default(), 0.0, 1.01, 3, || true);
        assert!(out.success);
        assert_eq!(out.attempts, 1);
        assert!(c.last_sync_time >= 100.0 && c.last_sync_time < 100.01);
    }
}
