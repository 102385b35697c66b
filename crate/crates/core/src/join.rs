//! Network joining: beacon scanning or solicitation, local control exchanges
//! and multi-hop Join Request / Join Response authentication.
//!
//! Durations are measured in slotframes of the joining network. The
//! authentication phase consists of `local_overhead` slotframes of local
//! control traffic, `extra_exchanges` one-slotframe exchanges per hop, and a
//! JRQ/JRS round trip that spends `per_hop_forward_delay` slotframes on every
//! hop in each direction. While authenticating, the node listens on a duty
//! cycle of `auth_listen_duty` and sleeps otherwise.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::energy::{DevicePowerProfile, EnergyStore, RunOutcome, StopOn};
use crate::error::{Error, Result};
use crate::mac::{Airtimes, SlotframeConfig};

/// Optional joining optimizations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JoinOptimizations {
    /// Beacons restricted to `advertisement_channels`.
    pub limited_adv_channels: bool,
    /// Minimum harvest power (W) before a join may start.
    pub scheduled_joining: Option<f64>,
    pub beacon_solicitation: bool,
    /// Backoff window in slotframes.
    pub duty_cycled: Option<u32>,
    pub hierarchical_mgmt: bool,
    /// Experimental: scan costs one solicitation with no listening.
    pub wake_up_radio: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JoinConfig {
    pub advertisement_channels: Vec<u32>,
    /// Slotframes between beacons of one router.
    pub beacon_period: u32,
    pub hops_to_border_router: u32,
    /// Slotframes per hop per direction for JRQ and JRS.
    pub per_hop_forward_delay: f64,
    /// Control exchanges per hop, one slotframe each.
    pub extra_exchanges: u32,
    /// Slotframes of local control traffic after synchronizing.
    pub local_overhead: f64,
    /// Fraction of authentication time spent listening.
    pub auth_listen_duty: f64,
    /// Retries per message before the attempt times out.
    pub max_retries: u32,
    /// Seconds; None means three times the expected join duration.
    pub deadline: Option<f64>,
    pub optimizations: JoinOptimizations,
}

impl Default for JoinConfig {
    fn default() -> Self {
        let c = crate::calibration::Calibration::builtin();
        c.join_config(16, 4)
    }
}

impl JoinConfig {
    pub fn validate(&self, slotframe: &SlotframeConfig) -> Result<()> {
        if self.advertisement_channels.is_empty() {
            return Err(Error::invalid("join config", "advertisement_channels must not be empty"));
        }
        if self.advertisement_channels.iter().any(|c| *c >= slotframe.n_channels) {
            return Err(Error::invalid("join config", "advertisement channel out of range"));
        }
        if self.hops_to_border_router == 0 {
            return Err(Error::invalid("join config", "hops_to_border_router must be >= 1"));
        }
        if self.beacon_period == 0 {
            return Err(Error::invalid("join config", "beacon_period must be >= 1"));
        }
        if !(self.per_hop_forward_delay >= 0.0 && self.local_overhead >= 0.0) {
            return Err(Error::invalid("join config", "delays must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.auth_listen_duty) {
            return Err(Error::invalid("join config", "auth_listen_duty must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Hops the authentication actually traverses.
    pub fn effective_hops(&self) -> u32 {
        if self.optimizations.hierarchical_mgmt {
            1
        } else {
            self.hops_to_border_router
        }
    }

    /// Slotframes spent per hop: JRQ and JRS forwarding plus control exchanges.
    pub fn slotframes_per_hop(&self) -> f64 {
        2.0 * self.per_hop_forward_delay + self.extra_exchanges as f64
    }
}

/// Platform context shared by the join operations.
#[derive(Debug, Clone, Copy)]
pub struct JoinEnv<'a> {
    pub slotframe: &'a SlotframeConfig,
    pub air: &'a Airtimes,
    pub profile: &'a DevicePowerProfile,
}

impl JoinEnv<'_> {
    fn listen_load(&self) -> f64 {
        self.profile.p_listen()
    }

    fn auth_load(&self, cfg: &JoinConfig) -> f64 {
        cfg.auth_listen_duty * self.profile.p_listen() + (1.0 - cfg.auth_listen_duty) * self.profile.p_sleep
    }
}

/// Capacitor depletion during a draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Brownout {
    /// Seconds into the draw at which the turn-off threshold was hit.
    pub after: f64,
}

/// Something that supplies load power and may run dry.
pub trait EnergySink {
    fn draw(&mut self, load_w: f64, duration: f64) -> Result<(), Brownout>;
}

/// A sink that never browns out; used for analytic runs.
#[derive(Debug, Clone, Copy, Default)]
pub struct Unlimited;

impl EnergySink for Unlimited {
    fn draw(&mut self, _load_w: f64, _duration: f64) -> Result<(), Brownout> {
        Ok(())
    }
}

impl EnergySink for EnergyStore {
    fn draw(&mut self, load_w: f64, duration: f64) -> Result<(), Brownout> {
        let start = self.time;
        match self.run_for(load_w, duration, StopOn::TurnOff) {
            RunOutcome::Completed => Ok(()),
            RunOutcome::Crossed { at, .. } => Err(Brownout { after: at - start }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JoinState {
    Scanning,
    Synchronized,
    Authenticating,
    Joined,
    FailedEnergy,
    FailedTimeout,
}

impl JoinState {
    pub fn as_str(self) -> &'static str {
        match self {
            JoinState::Scanning => "SCANNING",
            JoinState::Synchronized => "SYNCHRONIZED",
            JoinState::Authenticating => "AUTHENTICATING",
            JoinState::Joined => "JOINED",
            JoinState::FailedEnergy => "FAILED_ENERGY",
            JoinState::FailedTimeout => "FAILED_TIMEOUT",
        }
    }

    fn rank(self) -> u8 {
        match self {
            JoinState::Scanning => 0,
            JoinState::Synchronized => 1,
            JoinState::Authenticating => 2,
            JoinState::Joined | JoinState::FailedEnergy | JoinState::FailedTimeout => 3,
        }
    }

    pub fn is_terminal(self) -> bool {
        self.rank() == 3
    }
}

/// Milestones of a join attempt, in order of occurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JoinStep {
    ScanStart,
    SolicitationSent,
    BeaconReceived,
    Control,
    JoinRequest,
    JoinResponse,
    Joined,
    Failed,
}

impl JoinStep {
    pub fn as_str(self) -> &'static str {
        match self {
            JoinStep::ScanStart => "SCAN",
            JoinStep::SolicitationSent => "SOLICIT",
            JoinStep::BeaconReceived => "BEACON",
            JoinStep::Control => "CONTROL",
            JoinStep::JoinRequest => "JRQ",
            JoinStep::JoinResponse => "JRS",
            JoinStep::Joined => "JOINED",
            JoinStep::Failed => "JOIN_FAILED",
        }
    }

    /// Whether the step involves the node's radio.
    pub fn uses_radio(self) -> bool {
        !matches!(self, JoinStep::Joined | JoinStep::Failed)
    }
}

/// One join attempt and its monotone state progression.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JoinAttempt {
    pub state: JoinState,
    pub started_at: f64,
    pub energy_spent: f64,
    pub beacons_heard: u32,
    /// Elapsed seconds when the attempt ended.
    pub duration: f64,
    /// (seconds since start, step)
    pub steps: Vec<(f64, JoinStep)>,
    /// Frames forwarded or answered by routers on behalf of this attempt.
    pub control_frames: u32,
}

impl JoinAttempt {
    pub fn new(started_at: f64) -> Self {
        Self {
            state: JoinState::Scanning,
            started_at,
            energy_spent: 0.0,
            beacons_heard: 0,
            duration: 0.0,
            steps: Vec::new(),
            control_frames: 0,
        }
    }

    /// Moves forward; backwards transitions and leaving a terminal state are ignored.
    pub fn advance_to(&mut self, next: JoinState) -> bool {
        if self.state.is_terminal() || next.rank() < self.state.rank() {
            return false;
        }
        self.state = next;
        true
    }

    /// Books energy against the attempt; negative amounts are ignored.
    pub fn spend(&mut self, joules: f64) {
        if joules > 0.0 {
            self.energy_spent += joules;
        }
    }
}

/// Source of beacons: a router with its channel offset and beacon phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeaconSource {
    pub router: u32,
    pub channel_offset: u32,
    /// Beacons are sent in slotframes k with k mod beacon_period == phase.
    pub phase: u32,
}

/// Beacon channel in an advertisement slot: adv[(asn + offset) mod N_adv].
pub fn beacon_channel(adv: &[u32], asn: u64, offset: u32) -> u32 {
    adv[((asn + offset as u64) % adv.len() as u64) as usize]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanOutcome {
    pub result: JoinState,
    /// Seconds from scan start to the start of the received beacon frame.
    pub wait: f64,
    pub energy: f64,
    pub beacons_heard: u32,
    pub channel: u32,
    pub router: Option<u32>,
}

/// Passive scan on one uniformly chosen advertisement channel.
///
/// `delivered(router, channel)` decides each candidate beacon. The scan
/// gives up with `FAILED_TIMEOUT` after `max_wait` seconds.
pub fn scan_for_beacon<R: Rng + ?Sized>(
    env: JoinEnv<'_>,
    cfg: &JoinConfig,
    sources: &[BeaconSource],
    start: f64,
    max_wait: f64,
    rng: &mut R,
    delivered: &mut dyn FnMut(u32, u32) -> bool,
    sink: &mut dyn EnergySink,
) -> ScanOutcome {
    let adv = &cfg.advertisement_channels;
    let channel = adv[rng.gen_range(0..adv.len())];
    let load = env.listen_load();
    let sf = env.slotframe;
    let n = sf.n_slots as u64;
    let mut best: Option<(f64, u32)> = None;
    let mut heard = 0;
    let mut frame = sf.asn_at(start) / n;
    'outer: loop {
        let mut slots: Vec<u32> = sf.advertisement_slots.clone();
        slots.sort_unstable();
        for s in slots {
            let asn = frame * n + s as u64;
            let t = sf.slot_start(asn) + env.air.tx_offset;
            if t < start {
                continue;
            }
            if t - start > max_wait {
                break 'outer;
            }
            for src in sources {
                if frame % cfg.beacon_period as u64 != (src.phase % cfg.beacon_period) as u64 {
                    continue;
                }
                if beacon_channel(adv, asn, src.channel_offset) == channel && delivered(src.router, channel) {
                    heard += 1;
                    best = Some((t - start, src.router));
                    break 'outer;
                }
            }
        }
        frame += 1;
    }
    let (wait, router, result, listen) = match best {
        Some((w, r)) => (w, Some(r), JoinState::Synchronized, w + env.air.beacon),
        None => (max_wait, None, JoinState::FailedTimeout, max_wait),
    };
    match sink.draw(load, listen) {
        Ok(()) => ScanOutcome {
            result,
            wait,
            energy: env.profile.drawn(load, listen),
            beacons_heard: heard,
            channel,
            router,
        },
        Err(b) => ScanOutcome {
            result: JoinState::FailedEnergy,
            wait: b.after,
            energy: env.profile.drawn(load, b.after),
            beacons_heard: 0,
            channel,
            router: None,
        },
    }
}

/// Mean and worst-case scan wait over uniformly random start time and channel, ideal links.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanWait {
    pub mean: f64,
    pub max: f64,
}

/// Exact wait statistics from the beacon gaps over one hyperperiod.
pub fn expected_scan_wait(slotframe: &SlotframeConfig, air: &Airtimes, cfg: &JoinConfig, sources: &[BeaconSource]) -> ScanWait {
    let adv = &cfg.advertisement_channels;
    let n = slotframe.n_slots as u64;
    let frames = adv.len() as u64 * cfg.beacon_period as u64;
    let horizon = (frames * n) as f64 * slotframe.t_slot;
    let mut mean = 0.0;
    let mut max: f64 = 0.0;
    for &ch in adv {
        let mut times = Vec::new();
        for k in 0..frames {
            for &s in &slotframe.advertisement_slots {
                let asn = k * n + s as u64;
                let hit = sources.iter().any(|src| {
                    k % cfg.beacon_period as u64 == (src.phase % cfg.beacon_period) as u64
                        && beacon_channel(adv, asn, src.channel_offset) == ch
                });
                if hit {
                    times.push(slotframe.slot_start(asn) + air.tx_offset);
                }
            }
        }
        if times.is_empty() {
            return ScanWait {
                mean: f64::INFINITY,
                max: f64::INFINITY,
            };
        }
        times.sort_by(f64::total_cmp);
        times.dedup();
        let mut sum_sq = 0.0;
        for i in 0..times.len() {
            let next = if i + 1 < times.len() { times[i + 1] } else { times[0] + horizon };
            let g = next - times[i];
            sum_sq += g * g;
            max = max.max(g);
        }
        mean += sum_sq / (2.0 * horizon);
    }
    ScanWait {
        mean: mean / adv.len() as f64,
        max,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolicitOutcome {
    pub result: JoinState,
    pub wait: f64,
    pub energy_node: f64,
    /// Energy spent by each responding router on the beacon reply.
    pub energy_router: f64,
    pub attempts: u32,
}

/// Actively requests a beacon. Each attempt sends a solicitation and listens
/// for one response window; failed attempts back off a random number of slots.
pub fn solicit_beacon<R: Rng + ?Sized>(
    env: JoinEnv<'_>,
    routers_in_range: usize,
    max_attempts: u32,
    rng: &mut R,
    delivered: &mut dyn FnMut(u32) -> bool,
    sink: &mut dyn EnergySink,
) -> SolicitOutcome {
    let air = env.air;
    let p = env.profile;
    let window = air.turnaround + air.beacon;
    let mut out = SolicitOutcome {
        result: JoinState::FailedTimeout,
        wait: 0.0,
        energy_node: 0.0,
        energy_router: 0.0,
        attempts: 0,
    };
    for attempt in 0..max_attempts.max(1) {
        out.attempts += 1;
        if let Err(b) = sink.draw(p.p_tx + p.p_cpu_active, air.solicitation) {
            out.energy_node += p.drawn(p.p_tx + p.p_cpu_active, b.after);
            out.wait += b.after;
            out.result = JoinState::FailedEnergy;
            return out;
        }
        out.energy_node += p.drawn(p.p_tx + p.p_cpu_active, air.solicitation);
        let ok = routers_in_range > 0 && delivered(attempt);
        if let Err(b) = sink.draw(env.listen_load(), window) {
            out.energy_node += p.drawn(env.listen_load(), b.after);
            out.wait += air.solicitation + b.after;
            out.result = JoinState::FailedEnergy;
            return out;
        }
        out.energy_node += p.drawn(env.listen_load(), window);
        out.wait += air.solicitation + window;
        if ok {
            out.energy_router = p.drawn(p.p_tx, air.beacon);
            out.result = JoinState::Synchronized;
            return out;
        }
        let be = (attempt + 1).min(5);
        let backoff = rng.gen_range(0..(1u32 << be)) as f64 * env.slotframe.t_slot;
        if let Err(b) = sink.draw(p.p_sleep, backoff) {
            out.wait += b.after;
            out.result = JoinState::FailedEnergy;
            return out;
        }
        out.energy_node += p.drawn(p.p_sleep, backoff);
        out.wait += backoff;
    }
    out
}

/// Wake-up-radio variant: the wake-up call costs one solicitation and the node never listens idly.
pub fn wake_up_radio_scan(env: JoinEnv<'_>, sink: &mut dyn EnergySink) -> SolicitOutcome {
    let p = env.profile;
    let wait = env.air.solicitation + env.air.turnaround + env.air.beacon;
    let (result, e) = match sink.draw(p.p_tx, env.air.solicitation) {
        Ok(()) => (JoinState::Synchronized, p.drawn(p.p_tx, env.air.solicitation)),
        Err(b) => (JoinState::FailedEnergy, p.drawn(p.p_tx, b.after)),
    };
    SolicitOutcome {
        result,
        wait,
        energy_node: e,
        energy_router: p.drawn(p.p_tx, env.air.beacon),
        attempts: 1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuthOutcome {
    pub result: JoinState,
    pub duration: f64,
    pub energy: f64,
    pub control_frames: u32,
    pub retries: u32,
    /// (seconds since authentication start, step)
    pub steps: Vec<(f64, JoinStep)>,
}

/// Message kinds traversing a hop during authentication.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuthMessage {
    Exchange,
    Request,
    Response,
}

/// Multi-hop authentication. `link(hop, msg)` decides each traversal; hop 0 is the node's own link.
pub fn authenticate(
    env: JoinEnv<'_>,
    cfg: &JoinConfig,
    hops: u32,
    deadline: f64,
    link: &mut dyn FnMut(u32, AuthMessage) -> bool,
    sink: &mut dyn EnergySink,
) -> AuthOutcome {
    let l_sf = env.slotframe.l_sf();
    let p = env.profile;
    let listen = env.auth_load(cfg);
    let tx_e = p.drawn(p.p_tx, env.air.data);
    let mut out = AuthOutcome {
        result: JoinState::Authenticating,
        duration: 0.0,
        energy: 0.0,
        control_frames: 0,
        retries: 0,
        steps: Vec::new(),
    };

    // (slotframes, hop, message, node transmits)
    let mut plan: Vec<(f64, u32, Option<AuthMessage>, bool)> = Vec::new();
    plan.push((cfg.local_overhead, 0, None, false));
    for h in 0..hops {
        for _ in 0..cfg.extra_exchanges {
            plan.push((1.0, h, Some(AuthMessage::Exchange), h == 0));
        }
    }
    for h in 0..hops {
        plan.push((cfg.per_hop_forward_delay, h, Some(AuthMessage::Request), h == 0));
    }
    for h in (0..hops).rev() {
        plan.push((cfg.per_hop_forward_delay, h, Some(AuthMessage::Response), false));
    }

    let mut last_step: Option<JoinStep> = None;
    for (slotframes, hop, msg, node_tx) in plan {
        let step = match msg {
            None | Some(AuthMessage::Exchange) => JoinStep::Control,
            Some(AuthMessage::Request) => JoinStep::JoinRequest,
            Some(AuthMessage::Response) => JoinStep::JoinResponse,
        };
        if last_step != Some(step) {
            out.steps.push((out.duration, step));
            last_step = Some(step);
        }
        let mut tries = 0;
        loop {
            let dur = if tries == 0 { slotframes * l_sf } else { l_sf };
            if let Err(b) = sink.draw(listen, dur) {
                out.duration += b.after;
                out.energy += p.drawn(listen, b.after);
                out.result = JoinState::FailedEnergy;
                out.steps.push((out.duration, JoinStep::Failed));
                return out;
            }
            out.duration += dur;
            out.energy += p.drawn(listen, dur);
            if node_tx {
                if let Err(b) = sink.draw(p.p_tx, env.air.data) {
                    out.energy += p.drawn(p.p_tx, b.after);
                    out.result = JoinState::FailedEnergy;
                    out.steps.push((out.duration, JoinStep::Failed));
                    return out;
                }
                out.energy += tx_e;
            }
            if out.duration > deadline {
                out.result = JoinState::FailedTimeout;
                out.steps.push((out.duration, JoinStep::Failed));
                return out;
            }
            let Some(m) = msg else { break };
            if !node_tx || hop > 0 {
                out.control_frames += 1;
            }
            if link(hop, m) {
                break;
            }
            tries += 1;
            out.retries += 1;
            if tries > cfg.max_retries {
                out.result = JoinState::FailedTimeout;
                out.steps.push((out.duration, JoinStep::Failed));
                return out;
            }
        }
    }
    out.result = JoinState::Joined;
    out.steps.push((out.duration, JoinStep::Joined));
    out
}

/// Authentication terminated at the first-hop router.
pub fn hierarchical_authenticate(
    env: JoinEnv<'_>,
    cfg: &JoinConfig,
    deadline: f64,
    link: &mut dyn FnMut(u32, AuthMessage) -> bool,
    sink: &mut dyn EnergySink,
) -> AuthOutcome {
    authenticate(env, cfg, 1, deadline, link, sink)
}

/// Expected duration and storage-side energy of a full join under ideal links.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JoinEstimate {
    pub scan_wait: f64,
    pub scan_energy: f64,
    pub auth_duration: f64,
    pub auth_energy: f64,
}

impl JoinEstimate {
    pub fn duration(&self) -> f64 {
        self.scan_wait + self.auth_duration
    }

    pub fn energy(&self) -> f64 {
        self.scan_energy + self.auth_energy
    }
}

/// Closed-form expectation of a join with one beacon source at offset 0.
pub fn expected_join(env: JoinEnv<'_>, cfg: &JoinConfig) -> JoinEstimate {
    let p = env.profile;
    let (scan_wait, scan_energy) = if cfg.optimizations.wake_up_radio {
        (
            env.air.solicitation + env.air.turnaround + env.air.beacon,
            p.drawn(p.p_tx, env.air.solicitation),
        )
    } else if cfg.optimizations.beacon_solicitation {
        let window = env.air.turnaround + env.air.beacon;
        (
            env.air.solicitation + window,
            p.drawn(p.p_tx + p.p_cpu_active, env.air.solicitation) + p.drawn(p.p_listen(), window),
        )
    } else {
        let src = [BeaconSource {
            router: 0,
            channel_offset: 0,
            phase: 0,
        }];
        let w = expected_scan_wait(env.slotframe, env.air, cfg, &src).mean;
        (w, p.drawn(p.p_listen(), w + env.air.beacon))
    };
    let hops = cfg.effective_hops() as f64;
    let slotframes = cfg.local_overhead + hops * cfg.slotframes_per_hop();
    let auth_duration = slotframes * env.slotframe.l_sf();
    let node_tx = 1 + cfg.extra_exchanges;
    let auth_energy = p.drawn(env.auth_load(cfg), auth_duration) + node_tx as f64 * p.drawn(p.p_tx, env.air.data);
    JoinEstimate {
        scan_wait,
        scan_energy,
        auth_duration,
        auth_energy,
    }
}

/// Join deadline: configured or three times the expected duration.
pub fn join_deadline(env: JoinEnv<'_>, cfg: &JoinConfig) -> f64 {
    cfg.deadline.unwrap_or_else(|| 3.0 * expected_join(env, cfg).duration())
}

/// True iff harvest is at least `threshold` and the store holds the join budget.
pub fn scheduled_join_gate(harvest_now: f64, threshold: f64, usable_energy: f64, join_budget: f64) -> bool {
    harvest_now > 0.0 && harvest_now >= threshold && usable_energy >= join_budget
}

/// Per-node outcome of a contended join.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JoinOutcome {
    pub node: u32,
    pub attempt_index: u32,
    pub result: JoinState,
    pub duration_s: f64,
    pub energy_j: f64,
    pub beacons_heard: u32,
}

/// Parameters of the shared-cell contention model used by [`duty_cycled_join`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContentionParams {
    /// Shared-cell transmissions each node needs to complete authentication.
    pub frames_per_node: u32,
    /// Storage-side energy per slotframe spent active (listening duty).
    pub active_energy_per_slotframe: f64,
    /// Storage-side energy of one transmission.
    pub tx_energy: f64,
    /// Backoff window W in slotframes; None joins everyone simultaneously.
    pub window: Option<u32>,
    pub slotframe_s: f64,
    pub max_slotframes: u32,
}

/// Slotframe-level contention on a single shared cell per slotframe.
///
/// Colliding transmitters back off a random number of slotframes drawn from
/// a window that doubles per collision. With a window `W`, nodes get
/// randomized non-overlapping turns of `W` slotframes; a node waiting for its
/// turn is OFF and spends nothing on the radio.
pub fn duty_cycled_join<R: Rng + ?Sized>(n_nodes: u32, params: ContentionParams, rng: &mut R) -> Vec<JoinOutcome> {
    struct St {
        remaining: u32,
        backoff: u32,
        be: u32,
        energy: f64,
        done_at: Option<u32>,
        turns: u32,
    }
    let mut st: Vec<St> = (0..n_nodes)
        .map(|_| St {
            remaining: params.frames_per_node,
            backoff: 0,
            be: 1,
            energy: 0.0,
            done_at: None,
            turns: 0,
        })
        .collect();
    let mut order: Vec<u32> = (0..n_nodes).collect();
    if params.window.is_some() {
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
    }
    let mut turn_pos = 0usize;
    let mut turn_left = params.window.map_or(0, |w| w.max(1));
    for sf in 0..params.max_slotframes {
        if st.iter().all(|s| s.done_at.is_some()) {
            break;
        }
        let active: Vec<usize> = match params.window {
            None => (0..st.len()).filter(|&i| st[i].done_at.is_none()).collect(),
            Some(w) => {
                // skip finished nodes and exhausted turns
                let mut guard = 0;
                while (st[order[turn_pos] as usize].done_at.is_some() || turn_left == 0) && guard <= order.len() {
                    turn_pos = (turn_pos + 1) % order.len();
                    turn_left = w.max(1);
                    guard += 1;
                }
                let i = order[turn_pos] as usize;
                if turn_left == w.max(1) {
                    st[i].turns += 1;
                }
                turn_left -= 1;
                vec![i]
            }
        };
        let mut senders = Vec::new();
        for &i in &active {
            st[i].energy += params.active_energy_per_slotframe;
            if st[i].backoff == 0 {
                senders.push(i);
            } else {
                st[i].backoff -= 1;
            }
        }
        for &i in &senders {
            st[i].energy += params.tx_energy;
        }
        if senders.len() == 1 {
            let i = senders[0];
            st[i].remaining -= 1;
            st[i].be = 1;
            if st[i].remaining == 0 {
                st[i].done_at = Some(sf + 1);
                turn_left = 0;
            }
        } else {
            for &i in &senders {
                st[i].backoff = rng.gen_range(0..(1u32 << st[i].be));
                st[i].be = (st[i].be + 1).min(5);
            }
        }
    }
    st.iter()
        .enumerate()
        .map(|(i, s)| JoinOutcome {
            node: i as u32,
            attempt_index: s.turns.saturating_sub(1),
            result: if s.done_at.is_some() { JoinState::Joined } else { JoinState::FailedTimeout },
            duration_s: s.done_at.unwrap_or(params.max_slotframes) as f64 * params.slotframe_s,
            energy_j: s.energy,
            beacons_heard: 1,
        })
        .collect()
}

/// CSV with columns `node,attempt_index,result,duration_s,energy_j,beacons_heard`.
pub fn write_join_log<W: Write>(rows: &[JoinOutcome], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["node", "attempt_index", "result", "duration_s", "energy_j", "beacons_heard"])?;
    for r in rows {
        out.write_record([
            r.node.to_string(),
            r.attempt_index.to_string(),
            r.result.as_str().to_string(),
            r.duration_s.to_string(),
            r.energy_j.to_string(),
            r.beacons_heard.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::rng::stream;

    fn cfg_with(n_adv: u32) -> JoinConfig {
        JoinConfig {
            advertisement_channels: (0..n_adv).collect(),
            ..JoinConfig::default()
        }
    }

    #[test]
    fn single_adv_channel_waits_at_most_one_slotframe() {
        let sf = SlotframeConfig::default();
        let air = Airtimes::default();
        let p = DevicePowerProfile::default();
        let env = JoinEnv { slotframe: &sf, air: &air, profile: &p };
        let cfg = cfg_with(1);
        let src = [BeaconSource { router: 1, channel_offset: 0, phase: 0 }];
        let mut rng = stream(1, "t", &[]);
        for k in 0..200 {
            let start = k as f64 * 0.0173;
            let o = scan_for_beacon(env, &cfg, &src, start, 100.0, &mut rng, &mut |_, _| true, &mut Unlimited);
            assert_eq!(o.result, JoinState::Synchronized);
            assert!(o.wait <= sf.l_sf() + 1e-12);
        }
    }

    #[test]
    fn state_progression_is_monotone() {
        let mut a = JoinAttempt::new(0.0);
        assert!(a.advance_to(JoinState::Synchronized));
        assert!(!a.advance_to(JoinState::Scanning));
        assert!(a.advance_to(JoinState::FailedEnergy));
        assert!(!a.advance_to(JoinState::Joined));
        a.spend(1.0);
        a.spend(-1.0);
        assert_eq!(a.energy_spent, 1.0);
    }

    #[test]
    fn gate_cases() {
        assert!(!scheduled_join_gate(0.0, 0.0, 1.0, 0.1));
        assert!(scheduled_join_gate(300e-6, 250e-6, 0.288, 0.2));
        assert!(!scheduled_join_gate(300e-6, 250e-6, 0.1, 0.2));
    }

    #[test]
    fn fewer_hops_is_faster() {
        let sf = SlotframeConfig::default();
        let air = Airtimes::default();
        let p = DevicePowerProfile::default();
        let env = JoinEnv { slotframe: &sf, air: &air, profile: &p };
        let cfg = JoinConfig::default();
        let a4 = authenticate(env, &cfg, 4, f64::INFINITY, &mut |_, _| true, &mut Unlimited);
        let a1 = authenticate(env, &cfg, 1, f64::INFINITY, &mut |_, _| true, &mut Unlimited);
        assert_eq!(a4.result, JoinState::Joined);
        assert!(a1.duration < a4.duration);
        let h = hierarchical_authenticate(env, &cfg, f64::INFINITY, &mut |_, _| true, &mut Unlimited);
        assert_eq!(h, a1);
    }

    #[test]
    fn single_node_contention_equals_plain() {
        let params = ContentionParams {
            frames_per_node: 5,
            active_energy_per_slotframe: 1e-3,
            tx_energy: 1e-4,
            window: None,
            slotframe_s: 1.0,
            max_slotframes: 10_000,
        };
        let mut r = stream(2, "t", &[]);
        let a = duty_cycled_join(1, params, &mut r);
        let b = duty_cycled_join(1, ContentionParams { window: Some(8), ..params }, &mut r);
        assert_eq!(a[0].duration_s, b[0].duration_s);
        assert_eq!(a[0].energy_j, b[0].energy_j);
    }
}
