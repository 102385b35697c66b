//! Scenario files: TOML parsing, cross-reference validation with
//! file-located diagnostics, and resolution into per-node run settings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{Calibration, StrategyKind};
use crate::energy::{DevicePowerProfile, HarvesterProfile, Supercapacitor};
use crate::join::{BeaconSource, JoinConfig, JoinEnv};
use crate::mac::{max_sync_interval, CellAssignment, CellKind, Schedule, SlotframeConfig};
use crate::sim::topology::{Link, Role, TopoNode, Topology};
use crate::strategies::{
    coverage_check, min_alternating_routers, multi_interface_timetable, router_alternation_schedule, CoverageResult,
    RouterMode, StrategyConfig, Timetable,
};

fn default_horizon() -> f64 {
    86_400.0
}
fn default_seeds() -> Vec<u64> {
    vec![1]
}
fn default_true() -> bool {
    true
}
fn default_log_limit() -> usize {
    200_000
}
fn default_period() -> u64 {
    200
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockSettings {
    /// Defaults to the calibration's guard time.
    pub guard_time: Option<f64>,
    /// Worst-case relative drift used to bound sync intervals.
    pub worst_case_drift_ppm: Option<f64>,
    /// Lower bound on the residual drift assumed by adaptive sync.
    #[serde(default)]
    pub residual_floor_ppm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimetableSettings {
    /// Period of the scan/TSCH alternation, in slots.
    #[serde(default = "default_period")]
    pub period_slots: u64,
}

impl Default for TimetableSettings {
    fn default() -> Self {
        Self {
            period_slots: default_period(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: u32,
    pub role: Role,
    #[serde(default)]
    pub parent: Option<u32>,
    /// Disabled nodes are kept in the topology but never run.
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default)]
    pub strategy: Option<StrategyConfig>,
    /// Rated capacitor; leakage is scaled by the calibrated self-discharge factor.
    #[serde(default)]
    pub capacitor: Option<Supercapacitor>,
    #[serde(default)]
    pub harvester: Option<HarvesterProfile>,
    /// CSV trace (`time_s,power_w`), relative to the scenario file.
    #[serde(default)]
    pub harvester_trace: Option<PathBuf>,
    #[serde(default)]
    pub power: Option<DevicePowerProfile>,
    #[serde(default)]
    pub join: Option<JoinConfig>,
    /// True clock drift relative to the network (signed ppm).
    #[serde(default)]
    pub drift_ppm: f64,
    /// Slots in which a multi-interface router runs TSCH.
    #[serde(default)]
    pub tsch_slots: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Calibration file relative to the scenario; the built-in fit when absent.
    #[serde(default)]
    pub calibration: Option<PathBuf>,
    #[serde(default)]
    pub slotframe: Option<SlotframeConfig>,
    #[serde(default)]
    pub clock: ClockSettings,
    #[serde(default)]
    pub timetable: TimetableSettings,
    /// Apply the calibrated self-discharge factor to capacitor leakage.
    #[serde(default = "default_true")]
    pub effective_leakage: bool,
    /// Maximum stored message-log entries per run.
    #[serde(default = "default_log_limit")]
    pub log_limit: usize,
    #[serde(default)]
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub links: Vec<Link>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// One validation finding, located in the source file when possible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub file: String,
    pub line: Option<usize>,
    /// Key path such as `nodes[2].capacitor`.
    pub path: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: {}: {}", self.file, l, self.path, self.message),
            None => write!(f, "{}: {}: {}", self.file, self.path, self.message),
        }
    }
}

/// Everything a run needs about one enabled end device.
#[derive(Debug, Clone)]
pub struct DeviceSetup {
    pub id: u32,
    pub strategy: StrategyConfig,
    pub cap: Supercapacitor,
    pub profile: DevicePowerProfile,
    pub harvester: HarvesterProfile,
    pub join: JoinConfig,
    pub drift_ppm: f64,
    pub parent: u32,
    /// Node, parent, ... , border router.
    pub path: Vec<u32>,
    pub in_range: Vec<u32>,
    pub beacon_sources: Vec<BeaconSource>,
    /// Dedicated TX cell (slot index, channel offset) towards the parent.
    pub cell: (u32, u32),
}

/// A scenario that passed validation; the only input accepted by the engine.
#[derive(Debug, Clone)]
pub struct Validated {
    pub scenario: Scenario,
    pub calibration: Calibration,
    pub topology: Topology,
    pub slotframe: SlotframeConfig,
    pub guard_time: f64,
    pub worst_case_drift_ppm: f64,
    pub devices: Vec<DeviceSetup>,
    pub routers: Vec<u32>,
    /// Scan/TSCH timetable of routers serving non-synchronized devices.
    pub timetable: Option<Timetable>,
}

struct Locator<'a> {
    file: String,
    text: Option<&'a str>,
}

impl Locator<'_> {
    fn header_lines(&self, table: &str) -> Vec<usize> {
        let Some(text) = self.text else { return Vec::new() };
        let needle = format!("[[{table}]]");
        text.lines()
            .enumerate()
            .filter(|(_, l)| l.trim() == needle)
            .map(|(i, _)| i + 1)
            .collect()
    }

    /// Best-effort line of `key` inside the i-th `[[table]]` block, else the block header.
    fn line_of(&self, table: &str, idx: usize, key: Option<&str>) -> Option<usize> {
        let text = self.text?;
        let headers = self.header_lines(table);
        let start = *headers.get(idx)?;
        if let Some(key) = key {
            let lines: Vec<&str> = text.lines().collect();
            for (i, l) in lines.iter().enumerate().skip(start) {
                let t = l.trim_start();
                if t.starts_with("[[") && i + 1 != start {
                    break;
                }
                let dotted = format!("[{table}.{key}]");
                if t.starts_with(&format!("{key} ")) || t.starts_with(&format!("{key}=")) || t.starts_with(&dotted) {
                    return Some(i + 1);
                }
            }
        }
        Some(start)
    }

    fn top_line(&self, key: &str) -> Option<usize> {
        let text = self.text?;
        text.lines().enumerate().find_map(|(i, l)| {
            let t = l.trim_start();
            (t.starts_with(&format!("{key} ")) || t.starts_with(&format!("{key}=")) || t.starts_with(&format!("[{key}]")))
                .then_some(i + 1)
        })
    }

    fn node(&self, idx: usize, key: Option<&str>, msg: impl Into<String>) -> Diagnostic {
        Diagnostic {
            file: self.file.clone(),
            line: self.line_of("nodes", idx, key),
            path: match key {
                Some(k) => format!("nodes[{idx}].{k}"),
                None => format!("nodes[{idx}]"),
            },
            message: msg.into(),
        }
    }

    fn link(&self, idx: usize, msg: impl Into<String>) -> Diagnostic {
        Diagnostic {
            file: self.file.clone(),
            line: self.line_of("links", idx, None),
            path: format!("links[{idx}]"),
            message: msg.into(),
        }
    }

    fn top(&self, key: &str, msg: impl Into<String>) -> Diagnostic {
        Diagnostic {
            file: self.file.clone(),
            line: self.top_line(key),
            path: key.to_string(),
            message: msg.into(),
        }
    }
}

impl Scenario {
    /// Parses TOML; syntax and schema errors come back as located diagnostics.
    pub fn parse(text: &str, file: &str) -> std::result::Result<Scenario, Vec<Diagnostic>> {
        toml::from_str::<Scenario>(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start.min(text.len())].lines().count().max(1));
            vec![Diagnostic {
                file: file.to_string(),
                line,
                path: String::new(),
                message: e.message().to_string(),
            }]
        })
    }

    /// Reads, parses and validates a scenario file.
    pub fn load(path: &Path) -> std::result::Result<Validated, Vec<Diagnostic>> {
        let file = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| {
            vec![Diagnostic {
                file: file.clone(),
                line: None,
                path: String::new(),
                message: format!("cannot read scenario: {e}"),
            }]
        })?;
        let mut sc = Scenario::parse(&text, &file)?;
        sc.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        sc.validate_with(&file, Some(&text))
    }

    /// Validates without source text (diagnostics carry key paths only).
    pub fn validate(self) -> std::result::Result<Validated, Vec<Diagnostic>> {
        let name = self.name.clone();
        self.validate_with(&name, None)
    }

    fn validate_with(self, file: &str, text: Option<&str>) -> std::result::Result<Validated, Vec<Diagnostic>> {
        let loc = Locator {
            file: file.to_string(),
            text,
        };
        let mut diags = Vec::new();

        let calibration = match &self.calibration {
            Some(p) => match Calibration::load(&self.base_dir.join(p)) {
                Ok(c) => c,
                Err(e) => {
                    diags.push(loc.top("calibration", e.to_string()));
                    Calibration::builtin()
                }
            },
            None => Calibration::builtin(),
        };
        let pl = &calibration.platform;

        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            diags.push(loc.top("horizon", "horizon must be a positive number of seconds"));
        }
        if self.seeds.is_empty() {
            diags.push(loc.top("seeds", "at least one seed is required"));
        }
        let slotframe = self.slotframe.clone().unwrap_or_else(|| calibration.slotframe());
        if let Err(e) = slotframe.validate() {
            diags.push(loc.top("slotframe", e.to_string()));
        }
        let guard_time = self.clock.guard_time.unwrap_or(pl.guard_time);
        let worst_ppm = self.clock.worst_case_drift_ppm.unwrap_or(pl.worst_case_drift_ppm);
        if !(guard_time > 0.0) || !(worst_ppm >= 0.0) {
            diags.push(loc.top("clock", "guard_time must be > 0 and worst_case_drift_ppm >= 0"));
        }
        let max_sync = max_sync_interval(guard_time, worst_ppm);

        // ids, roles, parents
        let mut index: BTreeMap<u32, usize> = BTreeMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if index.insert(n.id, i).is_some() {
                diags.push(loc.node(i, Some("id"), format!("duplicate node id {}", n.id)));
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            match (n.role, n.parent) {
                (Role::BorderRouter, Some(_)) => diags.push(loc.node(i, Some("parent"), "a border router has no parent")),
                (Role::BorderRouter, None) => {}
                (_, None) => diags.push(loc.node(i, Some("parent"), "missing parent")),
                (_, Some(p)) => match index.get(&p) {
                    None => diags.push(loc.node(i, Some("parent"), format!("unknown node id {p}"))),
                    Some(&j) if self.nodes[j].role == Role::EndDevice => {
                        diags.push(loc.node(i, Some("parent"), format!("node {p} is an end device and cannot forward")))
                    }
                    _ => {}
                },
            }
            match (n.role, &n.strategy) {
                (Role::EndDevice, None) => diags.push(loc.node(i, Some("strategy"), "end device needs exactly one strategy")),
                (Role::EndDevice, Some(s)) => {
                    if let Err(e) = s.validate(max_sync, slotframe.n_channels) {
                        diags.push(loc.node(i, Some("strategy"), e.to_string()));
                    }
                }
                (_, Some(_)) => diags.push(loc.node(i, Some("strategy"), "only end devices carry a strategy")),
                _ => {}
            }
            if let Some(c) = &n.capacitor {
                if c.v_turn_off > c.v_turn_on {
                    diags.push(loc.node(i, Some("capacitor"), "hysteresis inverted: v_turn_off > v_turn_on"));
                } else if let Err(e) = c.validate() {
                    diags.push(loc.node(i, Some("capacitor"), e.to_string()));
                }
            }
            if let Some(h) = &n.harvester {
                if let Err(e) = h.validate() {
                    diags.push(loc.node(i, Some("harvester"), e.to_string()));
                }
            }
            if n.harvester.is_some() && n.harvester_trace.is_some() {
                diags.push(loc.node(i, Some("harvester_trace"), "give either harvester or harvester_trace"));
            }
            if let Some(p) = &n.power {
                if let Err(e) = p.validate() {
                    diags.push(loc.node(i, Some("power"), e.to_string()));
                }
            }
            if let Some(j) = &n.join {
                if let Err(e) = j.validate(&slotframe) {
                    diags.push(loc.node(i, Some("join"), e.to_string()));
                }
            }
            if n.tsch_slots.iter().any(|s| *s >= slotframe.n_slots) {
                diags.push(loc.node(i, Some("tsch_slots"), "slot index outside the slotframe"));
            }
        }
        for (i, l) in self.links.iter().enumerate() {
            for end in [l.a, l.b] {
                if !index.contains_key(&end) {
                    diags.push(loc.link(i, format!("unknown node id {end}")));
                }
            }
            if !(0.0..=1.0).contains(&l.p) || l.per_channel.iter().any(|p| !(0.0..=1.0).contains(p)) {
                diags.push(loc.link(i, "delivery probability outside [0, 1]"));
            }
            if !l.per_channel.is_empty() && l.per_channel.len() != slotframe.n_channels as usize {
                diags.push(loc.link(i, format!("per_channel needs {} entries", slotframe.n_channels)));
            }
        }
        if !diags.is_empty() {
            return Err(diags);
        }

        let topo_nodes = self
            .nodes
            .iter()
            .map(|n| TopoNode {
                id: n.id,
                role: n.role,
                parent: n.parent,
            })
            .collect();
        let topology = match Topology::new(topo_nodes, self.links.clone()) {
            Ok(t) => t,
            Err(e) => return Err(vec![loc.top("nodes", e.to_string())]),
        };

        let mut devices = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.role != Role::EndDevice || !n.enabled {
                continue;
            }
            let strategy = n.strategy.clone().expect("checked above");
            let kind = match strategy {
                StrategyConfig::Synchronized { .. } => StrategyKind::Synchronized,
                StrategyConfig::Adhoc { .. } => StrategyKind::Adhoc,
                StrategyConfig::Nonsynchronized { .. } => StrategyKind::Nonsynchronized,
            };
            let rated = n.capacitor.unwrap_or_else(|| match kind {
                StrategyKind::Synchronized => pl.synchronized_cap.rated(),
                StrategyKind::Adhoc => pl.adhoc_cap.rated(),
                StrategyKind::Nonsynchronized => pl.nonsync_cap.rated(),
            });
            let cap = if self.effective_leakage { calibration.effective(rated) } else { rated };
            let harvester = match (&n.harvester, &n.harvester_trace) {
                (Some(h), _) => h.clone(),
                (None, Some(p)) => {
                    let full = self.base_dir.join(p);
                    match std::fs::File::open(&full)
                        .map_err(crate::Error::from)
                        .and_then(HarvesterProfile::trace_from_csv)
                    {
                        Ok(h) => h,
                        Err(e) => {
                            diags.push(loc.node(i, Some("harvester_trace"), format!("{}: {e}", full.display())));
                            continue;
                        }
                    }
                }
                (None, None) => HarvesterProfile::default(),
            };
            let hops = topology.hops_to_border(n.id).unwrap_or(1).max(1);
            let join = match (&n.join, &strategy) {
                (Some(j), _) => j.clone(),
                (None, StrategyConfig::Synchronized {
                    advertisement_channels,
                    join_opts,
                    ..
                }) => {
                    let mut j = calibration.join_config(advertisement_channels.unwrap_or(slotframe.n_channels), hops);
                    j.optimizations.scheduled_joining = join_opts.scheduled_joining;
                    j.optimizations.duty_cycled = join_opts.duty_cycled;
                    j
                }
                (None, StrategyConfig::Adhoc { join_opts, .. }) => {
                    let mut j = calibration.join_config(slotframe.n_channels, hops);
                    j.optimizations = join_opts.clone();
                    j
                }
                (None, StrategyConfig::Nonsynchronized { .. }) => calibration.join_config(slotframe.n_channels, hops),
            };
            if let Err(e) = join.validate(&slotframe) {
                diags.push(loc.node(i, Some("join"), e.to_string()));
            }
            let in_range = topology.routers_in_range(n.id);
            let parent = n.parent.expect("checked above");
            let beacon_sources = in_range
                .iter()
                .map(|&r| BeaconSource {
                    router: r,
                    channel_offset: r % slotframe.n_channels,
                    phase: 0,
                })
                .collect();
            devices.push(DeviceSetup {
                id: n.id,
                strategy,
                cap,
                profile: n.power.unwrap_or(pl.profile),
                harvester,
                join,
                drift_ppm: n.drift_ppm,
                parent,
                path: topology.path_to_border(n.id),
                in_range,
                beacon_sources,
                cell: dedicated_cell(devices.len() as u32, &slotframe),
            });
        }

        let timetable = match build_timetable(&self, &devices, &slotframe, &loc) {
            Ok(t) => t,
            Err(mut d) => {
                diags.append(&mut d);
                None
            }
        };
        if !diags.is_empty() {
            return Err(diags);
        }

        let routers = self
            .nodes
            .iter()
            .filter(|n| n.role.forwards())
            .map(|n| n.id)
            .collect();
        Ok(Validated {
            slotframe,
            guard_time,
            worst_case_drift_ppm: worst_ppm,
            calibration,
            topology,
            devices,
            routers,
            timetable,
            scenario: self,
        })
    }
}

/// The k-th device gets slot 1 + k mod (n-1), moving to the next channel offset on wrap-around.
pub fn dedicated_cell(k: u32, slotframe: &SlotframeConfig) -> (u32, u32) {
    let free = slotframe.n_slots.saturating_sub(1).max(1);
    let slot = if slotframe.n_slots > 1 { 1 + k % free } else { 0 };
    (slot, (k / free) % slotframe.n_channels)
}

/// Router timetable for non-synchronized devices, or the coverage diagnostics.
fn build_timetable(
    sc: &Scenario,
    devices: &[DeviceSetup],
    slotframe: &SlotframeConfig,
    loc: &Locator<'_>,
) -> std::result::Result<Option<Timetable>, Vec<Diagnostic>> {
    let nonsync: Vec<(&DeviceSetup, u32, RouterMode)> = devices
        .iter()
        .filter_map(|d| match d.strategy {
            StrategyConfig::Nonsynchronized {
                n_channels_used,
                router_mode,
                ..
            } => Some((d, n_channels_used, router_mode)),
            _ => None,
        })
        .collect();
    if nonsync.is_empty() {
        return Ok(None);
    }
    let node_idx = |id: u32| sc.nodes.iter().position(|n| n.id == id).unwrap_or(0);
    let (first, n_used, mode) = nonsync[0];
    let mut diags = Vec::new();
    for (d, n, m) in &nonsync[1..] {
        if *n != n_used || *m != mode {
            diags.push(loc.node(node_idx(d.id), Some("strategy"), "non-synchronized devices must share n_channels_used and router_mode"));
        }
    }
    let routers: BTreeSet<u32> = nonsync.iter().flat_map(|(d, _, _)| d.in_range.iter().copied()).collect();
    let routers: Vec<u32> = routers.into_iter().collect();
    let channels: Vec<u32> = (0..n_used).collect();
    let tt = match mode {
        RouterMode::Alternating { tsch_fraction } => {
            match router_alternation_schedule(&routers, n_used, tsch_fraction, sc.timetable.period_slots, slotframe.t_slot) {
                Ok(t) => Some(t),
                Err(e) => {
                    let min = min_alternating_routers(n_used, tsch_fraction).max(e.min_routers);
                    diags.push(loc.node(
                        node_idx(first.id),
                        Some("strategy"),
                        format!("coverage infeasible: {} routers in range, minimum {min} routers", routers.len()),
                    ));
                    None
                }
            }
        }
        RouterMode::MultiInterface => {
            let mut acc: Option<Timetable> = None;
            for &r in &routers {
                let slots = sc.nodes.iter().find(|n| n.id == r).map(|n| n.tsch_slots.clone()).unwrap_or_default();
                let t = multi_interface_timetable(r, &slots, slotframe.n_slots, slotframe.t_slot);
                acc = Some(match acc {
                    None => t,
                    Some(a) => a.merge(t).expect("same period"),
                });
            }
            acc
        }
    };
    if let Some(t) = &tt {
        for (d, _, _) in &nonsync {
            if let CoverageResult::Fail { slot, channel } = coverage_check(t, &d.in_range, &channels) {
                if matches!(mode, RouterMode::Alternating { .. }) {
                    diags.push(loc.node(
                        node_idx(d.id),
                        Some("strategy"),
                        format!("coverage infeasible: channel {channel} unscanned in slot {slot}"),
                    ));
                }
            }
        }
    }
    if diags.is_empty() {
        Ok(tt)
    } else {
        Err(diags)
    }
}

impl Validated {
    /// Static TSCH cells: advertisement cells of routers, the shared cell, and each
    /// TSCH device's dedicated cell with the matching receive cell at its parent.
    pub fn schedule(&self) -> crate::Result<Schedule> {
        let sf = &self.slotframe;
        let mut sched = Schedule::new();
        for &r in &self.routers {
            for &slot in &sf.advertisement_slots {
                sched.add(r, CellAssignment { slot_index: slot, channel_offset: r % sf.n_channels, kind: CellKind::Advertisement, peer: r }, sf)?;
            }
        }
        for d in &self.devices {
            if matches!(d.strategy, StrategyConfig::Nonsynchronized { .. }) {
                continue;
            }
            let shared = sf.advertisement_slots.first().copied().unwrap_or(0);
            sched.add(d.id, CellAssignment { slot_index: shared, channel_offset: 0, kind: CellKind::Shared, peer: d.parent }, sf)?;
            let (slot, off) = d.cell;
            sched.add(d.id, CellAssignment { slot_index: slot, channel_offset: off, kind: CellKind::DedicatedTx, peer: d.parent }, sf)?;
            sched.add(d.parent, CellAssignment { slot_index: slot, channel_offset: off, kind: CellKind::DedicatedRx, peer: d.id }, sf)?;
        }
        Ok(sched)
    }

    pub fn join_env<'a>(&'a self, d: &'a DeviceSetup) -> JoinEnv<'a> {
        JoinEnv {
            slotframe: &self.slotframe,
            air: &self.calibration.platform.airtimes,
            profile: &d.profile,
        }
    }

    pub fn horizon(&self) -> f64 {
        self.scenario.horizon
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "minimal"
horizon = 60.0

[[nodes]]
id = 0
role = "BORDER_ROUTER"

[[nodes]]
id = 1
role = "END_DEVICE"
parent = 0
strategy = { strategy = "synchronized", sync_interval = 16.0, sync_method = "KEEPALIVE" }
"#;

    #[test]
    fn minimal_is_valid() {
        let sc = Scenario::parse(MINIMAL, "m.toml").unwrap();
        let v = sc.validate().unwrap();
        assert_eq!(v.devices.len(), 1);
        assert_eq!(v.devices[0].path, vec![1, 0]);
    }

    #[test]
    fn inverted_hysteresis_is_reported_with_line() {
        let text = format!("{MINIMAL}capacitor = {{ v_turn_on = 2.0, v_turn_off = 2.5 }}\n");
        let sc = Scenario::parse(&text, "m.toml").unwrap();
        let d = sc.validate_with("m.toml", Some(&text)).unwrap_err();
        assert!(d[0].message.contains("hysteresis inverted"));
        assert_eq!(d[0].line, Some(text.lines().count()));
    }

    #[test]
    fn sync_interval_bound() {
        let text = MINIMAL.replace("sync_interval = 16.0", "sync_interval = 30.0");
        let d = Scenario::parse(&text, "m").unwrap().validate().unwrap_err();
        assert!(d[0].message.contains("max_sync_interval"));
    }

    #[test]
    fn end_device_cannot_be_parent() {
        let text = format!("{MINIMAL}\n[[nodes]]\nid = 2\nrole = \"ROUTER\"\nparent = 1\n");
        let d = Scenario::parse(&text, "m").unwrap().validate().unwrap_err();
        assert!(d.iter().any(|d| d.message.contains("cannot forward")));
    }

    #[test]
    fn syntax_error_has_line() {
        let d = Scenario::parse("name = \"x\"\nhorizon = = 3\n", "m").unwrap_err();
        assert_eq!(d[0].line, Some(2));
    }
}
