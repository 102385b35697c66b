//! The discrete-event run loop.
//!
//! Each device owns an [`EnergyStore`] that is integrated eagerly: whenever
//! the device starts a phase (charging, sleeping, a join, a transmission)
//! the store is advanced through the whole phase at once and the next event
//! is scheduled where the phase ends or a threshold is crossed. Devices only
//! interact through links, router counters and the shared radio medium.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::energy::{EnergyStore, RunOutcome, StopOn};
use crate::join::{
    authenticate, expected_join, join_deadline, scan_for_beacon, scheduled_join_gate, solicit_beacon, wake_up_radio_scan,
    AuthMessage, EnergySink, JoinOutcome, JoinState,
};
use crate::mac::{adaptive_sync_update, synchronize_beacon_listen, synchronize_keepalive, ClockModel, SyncOutcome};
use crate::scenario::{DeviceSetup, Validated};
use crate::sim::event::{to_ns, to_s, EventKind, EventQueue};
use crate::sim::metrics::{Distribution, FrameFate, FrameRecord, LogEntry, Metrics, NodeMetrics, RouterMetrics};
use crate::sim::rng;
use crate::sim::topology::{Link, LinkStreams};
use crate::strategies::{
    step_adhoc, step_nonsynchronized, step_synchronized, AdhocAction, AdhocView, Medium, NonSyncAction, RouterActivity,
    StrategyConfig, SyncAction, SyncMethod, SyncView, Transmission, UpdateTrigger,
};

/// Seconds a device holding for the join gate waits before re-checking.
const GATE_POLL_S: f64 = 60.0;
const TRACE_CAP: usize = 10_000;

struct Dev {
    store: EnergyStore,
    powered: bool,
    joined: bool,
    epoch: u64,
    clock: ClockModel,
    sync_obs: Vec<(f64, f64)>,
    cumulative_offset: f64,
    sync_interval: f64,
    next_sync_due: f64,
    next_data_due: Option<f64>,
    pending: Option<f64>,
    next_update: Option<f64>,
    seq: u64,
    off_since: Option<f64>,
    off_total: f64,
    last_delivery: Option<f64>,
    gaps: Vec<f64>,
    latencies: Vec<f64>,
    join_durations: Vec<f64>,
    join_energies: Vec<f64>,
    join_index: u32,
    rng: ChaCha8Rng,
    m: NodeMetrics,
}

struct InFlight {
    dev: usize,
    generated_at: f64,
    tx: Transmission,
    ack_end: f64,
    ack_enabled: bool,
    seq: u64,
    complete: bool,
}

#[derive(Default)]
struct Recorder {
    log: Vec<LogEntry>,
    truncated: u64,
    limit: usize,
    frames: Vec<FrameRecord>,
    joins: Vec<JoinOutcome>,
    control: BTreeMap<u32, u64>,
    received: BTreeMap<u32, u64>,
}

impl Recorder {
    #[allow(clippy::too_many_arguments)]
    fn log(&mut self, v: &Validated, dev: &mut Dev, node: u32, t: f64, event: &str, radio: bool, detail: String) {
        if radio && !dev.powered {
            dev.m.hysteresis_violations += 1;
        }
        if self.log.len() >= self.limit {
            self.truncated += 1;
            return;
        }
        self.log.push(LogEntry {
            time: t,
            asn: v.slotframe.asn_at(t),
            node,
            event: event.to_string(),
            radio,
            detail,
        });
    }
}

enum JoinResult {
    Joined(f64),
    Brownout(f64),
    Timeout(f64),
    Gated,
}

/// Why a device stops being powered.
#[derive(Clone, Copy, PartialEq)]
enum OffReason {
    Brownout,
    /// Voluntary; restart at once if the store is already above turn-on.
    Done,
    /// Voluntary; wait for a fresh turn-on crossing.
    Starved,
}

struct Engine<'a> {
    v: &'a Validated,
    horizon: f64,
    queue: EventQueue,
    devs: Vec<Dev>,
    links: LinkStreams,
    medium: Medium,
    inflight: Vec<InFlight>,
    rec: Recorder,
    causality: u32,
}

/// Executes one validated scenario with one seed.
pub fn run(v: &Validated, seed: u64) -> Metrics {
    let horizon = v.horizon();
    let devs = v
        .devices
        .iter()
        .map(|s| {
            let harvest = s.harvester.timeline(seed ^ s.id as u64, horizon);
            let sync_interval = match s.strategy {
                StrategyConfig::Synchronized { sync_interval, .. } => sync_interval,
                _ => f64::INFINITY,
            };
            Dev {
                store: EnergyStore::new(s.cap, s.profile, harvest),
                powered: false,
                joined: false,
                epoch: 0,
                clock: ClockModel::new(s.drift_ppm, v.guard_time),
                sync_obs: Vec::new(),
                cumulative_offset: 0.0,
                sync_interval,
                next_sync_due: 0.0,
                next_data_due: None,
                pending: None,
                next_update: None,
                seq: 0,
                off_since: Some(0.0),
                off_total: 0.0,
                last_delivery: None,
                gaps: Vec::new(),
                latencies: Vec::new(),
                join_durations: Vec::new(),
                join_energies: Vec::new(),
                join_index: 0,
                rng: rng::stream(seed, "node", &[s.id as u64]),
                m: NodeMetrics {
                    id: s.id,
                    strategy: s.strategy.name().to_string(),
                    ..NodeMetrics::default()
                },
            }
        })
        .collect();
    let mut e = Engine {
        v,
        horizon,
        queue: EventQueue::new(),
        devs,
        links: LinkStreams::new(seed),
        medium: Medium::new(),
        inflight: Vec::new(),
        rec: Recorder {
            limit: v.scenario.log_limit,
            ..Recorder::default()
        },
        causality: 0,
    };
    e.start();
    e.run_loop();
    e.finish(seed)
}

fn frame_energy(s: &DeviceSetup, v: &Validated) -> f64 {
    let p = &s.profile;
    let a = &v.calibration.platform.airtimes;
    (v.calibration.platform.frame_wake_overhead * p.p_cpu_active
        + (a.cca + a.turnaround) * p.p_rx
        + a.data * p.p_tx
        + a.ack_window() * p.p_rx)
        / p.eta_out
}

impl<'a> Engine<'a> {
    fn schedule(&mut self, t: f64, kind: EventKind, i: usize, epoch: u64) {
        let ns = to_ns(t);
        if ns < self.queue.now() {
            self.causality += 1;
        }
        self.queue.push(ns, kind, i as u32, epoch);
    }

    fn schedule_main(&mut self, t: f64, kind: EventKind, i: usize) {
        let epoch = self.devs[i].epoch;
        if t <= self.horizon {
            self.schedule(t, kind, i, epoch);
        }
    }

    fn trace(&mut self, i: usize) {
        let d = &mut self.devs[i];
        if d.m.energy_trace.len() < TRACE_CAP {
            d.m.energy_trace.push((d.store.time, d.store.cap.v_now));
        }
    }

    fn start(&mut self) {
        for i in 0..self.devs.len() {
            let s = &self.v.devices[i];
            if let StrategyConfig::Adhoc {
                update_trigger: UpdateTrigger::Periodic { interval },
                ..
            } = s.strategy
            {
                self.devs[i].next_update = Some(interval);
                self.schedule(interval, EventKind::UpdateDue, i, 0);
            }
            if let StrategyConfig::Synchronized {
                update_interval: Some(u), ..
            } = s.strategy
            {
                self.devs[i].next_data_due = Some(u);
            }
            self.trace(i);
            if self.devs[i].store.cap.v_now >= self.devs[i].store.cap.v_turn_on {
                self.power_on(i, 0.0);
            } else {
                self.charge(i);
            }
        }
    }

    fn run_loop(&mut self) {
        let end = to_ns(self.horizon);
        while let Some(ev) = self.queue.pop() {
            if ev.time > end {
                break;
            }
            if ev.time < ev.scheduled_at {
                self.causality += 1;
            }
            let i = ev.subject as usize;
            let t = to_s(ev.time);
            match ev.kind {
                EventKind::Resolve { frame } => self.resolve(frame),
                EventKind::UpdateDue => self.update_due(i, t),
                _ if ev.epoch != self.devs[i].epoch => {}
                EventKind::PowerOn => {
                    self.catch_up(i, t);
                    self.power_on(i, t);
                }
                EventKind::ChargeCheck => {
                    self.catch_up(i, t);
                    self.charge(i);
                }
                EventKind::Wake => {
                    self.catch_up(i, t);
                    self.wake(i, t);
                }
            }
        }
    }

    /// Covers the sub-nanosecond gap between a phase end and its event.
    fn catch_up(&mut self, i: usize, t: f64) {
        let d = &mut self.devs[i];
        if d.store.time < t {
            let load = if d.powered { d.store.profile.p_sleep } else { d.store.profile.p_off };
            d.store.run_until(load, t, StopOn::Never);
        }
    }

    /// Off and charging until turn-on, the next periodic update, or the horizon.
    fn charge(&mut self, i: usize) {
        let horizon = self.horizon;
        let d = &mut self.devs[i];
        let until = match (d.pending, d.next_update) {
            (None, Some(u)) if u > d.store.time => u.min(horizon),
            _ => horizon,
        };
        if d.store.time >= until {
            return;
        }
        let p_off = d.store.profile.p_off;
        match d.store.run_until(p_off, until, StopOn::TurnOn) {
            RunOutcome::Crossed { at, .. } => self.schedule_main(at, EventKind::PowerOn, i),
            RunOutcome::Completed => {
                if until < horizon {
                    self.schedule_main(until, EventKind::ChargeCheck, i)
                }
            }
        }
    }

    fn power_on(&mut self, i: usize, t: f64) {
        let v = self.v;
        let s = &v.devices[i];
        let d = &mut self.devs[i];
        d.powered = true;
        d.m.turn_ons += 1;
        if let Some(since) = d.off_since.take() {
            d.off_total += (t.min(self.horizon) - since).max(0.0);
        }
        let volts = d.store.cap.v_now;
        self.rec.log(v, d, s.id, t, "TURN_ON", false, format!("v={volts:.4}"));
        match s.strategy {
            StrategyConfig::Adhoc {
                update_trigger: UpdateTrigger::EnergyReady,
                ..
            }
            | StrategyConfig::Nonsynchronized { .. } => {
                if d.pending.is_none() {
                    d.pending = Some(t);
                }
            }
            _ => {}
        }
        self.trace(i);
        self.wake(i, t);
    }

    fn go_off(&mut self, i: usize, t: f64, reason: OffReason) {
        let v = self.v;
        let s = &v.devices[i];
        let d = &mut self.devs[i];
        if reason == OffReason::Brownout {
            d.m.brownouts += 1;
        }
        let event = if reason == OffReason::Brownout { "TURN_OFF" } else { "POWER_OFF" };
        let volts = d.store.cap.v_now;
        self.rec.log(v, d, s.id, t, event, false, format!("v={volts:.4}"));
        d.powered = false;
        d.joined = false;
        d.off_since = Some(t);
        d.epoch += 1;
        self.trace(i);
        let d = &self.devs[i];
        let wants = match s.strategy {
            StrategyConfig::Adhoc { .. } => d.pending.is_some(),
            _ => true,
        };
        if reason == OffReason::Done && wants && d.store.cap.v_now >= d.store.cap.v_turn_on {
            let at = d.store.time;
            self.schedule_main(at, EventKind::PowerOn, i);
        } else {
            self.charge(i);
        }
    }

    fn brownout(&mut self, i: usize, at: f64) {
        self.go_off(i, at, OffReason::Brownout);
    }

    /// Powered sleep until `until`; schedules the next wake or handles a brownout.
    fn sleep(&mut self, i: usize, until: f64) {
        let target = until.min(self.horizon);
        let d = &mut self.devs[i];
        let p = d.store.profile.p_sleep;
        match d.store.run_until(p, target, StopOn::TurnOff) {
            RunOutcome::Crossed { at, .. } => self.brownout(i, at),
            RunOutcome::Completed => {
                if until <= self.horizon {
                    self.schedule_main(until, EventKind::Wake, i)
                }
            }
        }
    }

    fn wake(&mut self, i: usize, t: f64) {
        match self.v.devices[i].strategy {
            StrategyConfig::Synchronized { .. } => self.wake_synchronized(i, t),
            StrategyConfig::Adhoc { .. } => self.wake_adhoc(i, t),
            StrategyConfig::Nonsynchronized { .. } => self.wake_nonsync(i, t),
        }
    }

    fn update_due(&mut self, i: usize, t: f64) {
        let StrategyConfig::Adhoc {
            update_trigger: UpdateTrigger::Periodic { interval },
            ..
        } = self.v.devices[i].strategy
        else {
            return;
        };
        let d = &mut self.devs[i];
        d.next_update = Some(t + interval);
        let next = t + interval;
        if d.pending.is_some() {
            // the older update is still queued; this one is superseded
            let seq = d.seq;
            d.seq += 1;
            self.record(i, t, f64::NAN, None, 0, FrameFate::Dropped, None, None, seq);
        } else {
            d.pending = Some(t);
            if !d.powered {
                d.epoch += 1;
                self.catch_up(i, t);
                let d = &self.devs[i];
                if d.store.cap.v_now >= d.store.cap.v_turn_on {
                    self.power_on(i, t);
                } else {
                    self.charge(i);
                }
            }
        }
        if next <= self.horizon {
            self.schedule(next, EventKind::UpdateDue, i, 0);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        i: usize,
        generated_at: f64,
        sent_at: f64,
        channel: Option<u32>,
        attempts: u32,
        fate: FrameFate,
        ack_at: Option<f64>,
        receiver: Option<u32>,
        seq: u64,
    ) {
        let id = self.v.devices[i].id;
        let d = &mut self.devs[i];
        d.m.frames_generated += 1;
        match fate {
            FrameFate::Delivered => {
                d.m.frames_sent += 1;
                d.m.frames_delivered += 1;
            }
            FrameFate::Lost => {
                d.m.frames_sent += 1;
                d.m.frames_lost += 1;
            }
            FrameFate::Dropped => d.m.frames_dropped += 1,
        }
        let latency = match (fate, ack_at) {
            (FrameFate::Delivered, Some(a)) => {
                let l = a - generated_at;
                d.latencies.push(l);
                if let Some(prev) = d.last_delivery {
                    d.gaps.push(a - prev);
                }
                d.last_delivery = Some(a);
                if let Some(r) = receiver {
                    *self.rec.received.entry(r).or_default() += 1;
                }
                Some(l)
            }
            _ => None,
        };
        self.rec.frames.push(FrameRecord {
            node: id,
            seq,
            generated_at,
            sent_at,
            channel,
            attempts,
            fate,
            latency,
            receiver,
        });
    }

    fn link(&self, a: u32, b: u32) -> Link {
        self.v.topology.link(a, b).cloned().unwrap_or(Link {
            a,
            b,
            p: 0.0,
            per_channel: Vec::new(),
        })
    }

    // ---- joining ----

    fn join(&mut self, i: usize, t: f64, check_gate: bool) -> JoinResult {
        let v = self.v;
        let s = &v.devices[i];
        let env = v.join_env(s);
        let cfg = &s.join;
        if check_gate {
            if let Some(thr) = cfg.optimizations.scheduled_joining {
                let d = &self.devs[i];
                let budget = expected_join(env, cfg).energy();
                if !scheduled_join_gate(d.store.harvest_now(), thr, d.store.cap.usable_energy(), budget) {
                    return JoinResult::Gated;
                }
            }
        }
        let deadline = join_deadline(env, cfg);
        let n_ch = v.slotframe.n_channels;
        let parent_link = self.link(s.id, s.parent);
        let d = &mut self.devs[i];
        let idx = d.join_index;
        d.join_index += 1;
        d.m.join_attempts += 1;

        let links = &mut self.links;
        let rec = &mut self.rec;
        let opts = &cfg.optimizations;
        let (state, wait, e_scan, heard) = if opts.wake_up_radio {
            rec.log(v, d, s.id, t, "WAKEUP_CALL", true, String::new());
            let o = wake_up_radio_scan(env, &mut d.store);
            (o.result, o.wait, o.energy_node, u32::from(o.result == JoinState::Synchronized))
        } else if opts.beacon_solicitation {
            rec.log(v, d, s.id, t, "SOLICIT", true, format!("parent={}", s.parent));
            let mut deliver = |attempt: u32| links.deliver(&parent_link, attempt % n_ch);
            let o = solicit_beacon(env, s.in_range.len(), cfg.max_retries + 1, &mut d.rng, &mut deliver, &mut d.store);
            (o.result, o.wait, o.energy_node, u32::from(o.result == JoinState::Synchronized))
        } else {
            rec.log(v, d, s.id, t, "SCAN", true, String::new());
            let topo = &v.topology;
            let mut deliver = |router: u32, ch: u32| match topo.link(s.id, router) {
                Some(l) => links.deliver(l, ch),
                None => false,
            };
            let o = scan_for_beacon(env, cfg, &s.beacon_sources, t, deadline, &mut d.rng, &mut deliver, &mut d.store);
            (o.result, o.wait, o.energy, o.beacons_heard)
        };
        if state == JoinState::Synchronized {
            rec.log(v, d, s.id, t + wait, "BEACON", true, String::new());
        }
        let mut outcome = JoinOutcome {
            node: s.id,
            attempt_index: idx,
            result: state,
            duration_s: d.store.time - t,
            energy_j: e_scan,
            beacons_heard: heard,
        };
        if state != JoinState::Synchronized {
            let end = d.store.time;
            rec.log(v, d, s.id, end, "JOIN_FAILED", false, state.as_str().to_string());
            rec.joins.push(outcome);
            return if state == JoinState::FailedEnergy {
                JoinResult::Brownout(end)
            } else {
                JoinResult::Timeout(end)
            };
        }

        let t_auth = d.store.time;
        let hops = cfg.effective_hops();
        let path = &s.path;
        let topo = &v.topology;
        let control = &mut rec.control;
        let mut counter: u32 = 0;
        let mut hop_link = |hop: u32, _m: AuthMessage| {
            let h = hop as usize;
            counter += 1;
            if h + 1 >= path.len() {
                return true;
            }
            *control.entry(path[h + 1]).or_default() += 1;
            match topo.link(path[h], path[h + 1]) {
                Some(l) => links.deliver(l, counter % n_ch),
                None => false,
            }
        };
        let remaining = (deadline - (t_auth - t)).max(0.0);
        let auth = authenticate(env, cfg, hops, remaining, &mut hop_link, &mut d.store);
        for (dt, step) in &auth.steps {
            rec.log(v, d, s.id, t_auth + dt, step.as_str(), step.uses_radio(), String::new());
        }
        let end = d.store.time;
        outcome.result = auth.result;
        outcome.duration_s = end - t;
        outcome.energy_j += auth.energy;
        rec.joins.push(outcome.clone());
        match auth.result {
            JoinState::Joined => {
                d.m.join_successes += 1;
                d.join_durations.push(outcome.duration_s);
                d.join_energies.push(outcome.energy_j);
                JoinResult::Joined(end)
            }
            JoinState::FailedEnergy => JoinResult::Brownout(end),
            _ => JoinResult::Timeout(end),
        }
    }

    // ---- Strategy 1 ----

    fn wake_synchronized(&mut self, i: usize, t: f64) {
        let v = self.v;
        let s = &v.devices[i];
        let StrategyConfig::Synchronized {
            sync_interval,
            update_interval,
            ..
        } = s.strategy
        else {
            unreachable!()
        };
        let d = &mut self.devs[i];
        let view = SyncView {
            joined: d.joined,
            desynchronized: d.joined && d.clock.is_desynchronized(t),
            next_sync_due: d.next_sync_due,
            next_data_due: d.next_data_due,
        };
        match step_synchronized(&view, t) {
            SyncAction::Rejoin => {
                if view.desynchronized {
                    d.m.desyncs += 1;
                    d.joined = false;
                    self.rec.log(v, d, s.id, t, "DESYNC", false, String::new());
                }
                match self.join(i, t, true) {
                    JoinResult::Joined(end) => {
                        let d = &mut self.devs[i];
                        d.joined = true;
                        d.clock.resync(end);
                        if !d.sync_interval.is_finite() || d.sync_obs.is_empty() {
                            d.sync_interval = sync_interval;
                        }
                        d.next_sync_due = end + d.sync_interval;
                        if let (Some(u), Some(due)) = (update_interval, d.next_data_due) {
                            // updates generated while not joined are lost
                            let mut due = due;
                            while due + u <= end {
                                let seq = self.devs[i].seq;
                                self.devs[i].seq += 1;
                                self.record(i, due, f64::NAN, None, 0, FrameFate::Dropped, None, None, seq);
                                due += u;
                            }
                            self.devs[i].next_data_due = Some(due);
                        }
                        self.schedule_main(end, EventKind::Wake, i);
                    }
                    JoinResult::Brownout(at) => self.brownout(i, at),
                    JoinResult::Timeout(end) => {
                        let l = v.slotframe.l_sf();
                        self.sleep(i, end + l);
                    }
                    JoinResult::Gated => self.sleep(i, t + GATE_POLL_S),
                }
            }
            SyncAction::Sync => self.sync(i, t),
            SyncAction::SendData => self.send_data_sync(i, t),
            SyncAction::SleepUntil(u) => self.sleep(i, u),
        }
    }

    /// Draws an outcome's active energy, then sleeps through the rest of its span.
    fn draw_outcome(&mut self, i: usize, o: &SyncOutcome, processing: f64) -> Result<(), f64> {
        let d = &mut self.devs[i];
        let active = processing + o.radio_time;
        let load = o.energy * d.store.profile.eta_out / active;
        if d.store.draw(load, active).is_err() {
            return Err(d.store.time);
        }
        let idle = (o.elapsed - active).max(0.0);
        let p = d.store.profile.p_sleep;
        if let Err(_b) = d.store.draw(p, idle) {
            return Err(d.store.time);
        }
        Ok(())
    }

    fn sync(&mut self, i: usize, t: f64) {
        let v = self.v;
        let s = &v.devices[i];
        let StrategyConfig::Synchronized {
            sync_method,
            max_retries,
            sync_interval,
            ..
        } = s.strategy
        else {
            unreachable!()
        };
        let air = &v.calibration.platform.airtimes;
        let proc_s = v.calibration.fitted.task_processing_s;
        let l_sf = v.slotframe.l_sf();
        let sf = &v.slotframe;
        let parent_link = self.link(s.id, s.parent);
        let links = &mut self.links;
        let d = &mut self.devs[i];
        let prev_sync = d.clock.last_sync_time;
        let asn0 = sf.asn_at(t);
        let mut k: u64 = 0;
        let o = match sync_method {
            SyncMethod::Keepalive | SyncMethod::Adaptive => {
                synchronize_keepalive(&mut d.clock, t, &s.profile, air, proc_s, l_sf, max_retries, || {
                    let ch = sf.channel_for(asn0 + k * sf.n_slots as u64, 0);
                    k += 1;
                    links.deliver(&parent_link, ch)
                })
            }
            SyncMethod::Beacon => {
                let spacing = l_sf * s.join.beacon_period as f64;
                synchronize_beacon_listen(&mut d.clock, t, &s.profile, air, proc_s, spacing, max_retries + 1, || {
                    let asn = asn0 + k * sf.n_slots as u64 * s.join.beacon_period as u64;
                    k += 1;
                    links.deliver(&parent_link, sf.channel_for(asn, s.parent % sf.n_channels))
                })
            }
        };
        self.rec.log(v, d, s.id, t, "SYNC", true, format!("attempts={}", o.attempts));
        if let Err(at) = self.draw_outcome(i, &o, proc_s) {
            self.brownout(i, at);
            return;
        }
        let d = &mut self.devs[i];
        if o.success {
            d.m.syncs += 1;
            if sync_method == SyncMethod::Adaptive {
                d.cumulative_offset += (d.clock.last_sync_time - prev_sync) * d.clock.drift_ppm * 1e-6;
                let obs = (d.clock.last_sync_time, d.cumulative_offset);
                d.sync_obs.push(obs);
                let up = adaptive_sync_update(
                    &mut d.clock,
                    &d.sync_obs,
                    v.worst_case_drift_ppm,
                    v.scenario.clock.residual_floor_ppm,
                );
                d.sync_interval = if d.sync_obs.len() < 2 { sync_interval } else { up.interval };
            }
            d.next_sync_due = d.clock.last_sync_time + d.sync_interval;
        } else {
            d.m.sync_failures += 1;
            let now = d.store.time;
            self.rec.log(v, d, s.id, now, "SYNC_FAILED", false, String::new());
            d.next_sync_due = now + l_sf;
        }
        let now = self.devs[i].store.time;
        self.schedule_main(now, EventKind::Wake, i);
    }

    /// Transmits a frame in the node's dedicated cell with retries.
    /// Returns (fate, first tx time, channel, attempts, ack time) or the brownout time.
    fn dedicated_exchange(&mut self, i: usize, max_retries: u32, check_sync: bool) -> Result<(FrameFate, f64, Option<u32>, u32, Option<f64>), (f64, u32)> {
        let v = self.v;
        let s = &v.devices[i];
        let sf = &v.slotframe;
        let air = &v.calibration.platform.airtimes;
        let (slot, offset) = s.cell;
        let parent_link = self.link(s.id, s.parent);
        let p = s.profile;
        let mut asn = sf.next_asn_of_slot(sf.asn_at(self.devs[i].store.time), slot);
        let mut first_tx = f64::NAN;
        let mut ch = None;
        for attempt in 0..=max_retries {
            let d = &mut self.devs[i];
            if sf.slot_start(asn) + air.tx_offset < d.store.time {
                asn += sf.n_slots as u64;
            }
            let t_tx = sf.slot_start(asn) + air.tx_offset;
            if check_sync && d.clock.is_desynchronized(t_tx) {
                return Ok((if attempt == 0 { FrameFate::Dropped } else { FrameFate::Lost }, first_tx, ch, attempt, None));
            }
            if let RunOutcome::Crossed { at, .. } = d.store.run_until(p.p_sleep, t_tx, StopOn::TurnOff) {
                return Err((at, attempt));
            }
            let c = sf.channel_for(asn, offset);
            ch = Some(c);
            if attempt == 0 {
                first_tx = t_tx;
            }
            self.rec.log(v, d, s.id, t_tx, "DATA_TX", true, format!("ch={c}"));
            if d.store.draw(p.p_tx, air.data).is_err() || d.store.draw(p.p_rx, air.ack_window()).is_err() {
                return Err((d.store.time, attempt + 1));
            }
            if self.links.deliver(&parent_link, c) {
                let ack = t_tx + air.data + air.ack_window();
                self.rec.log(v, d, s.id, ack, "DATA_ACK", true, String::new());
                return Ok((FrameFate::Delivered, first_tx, ch, attempt + 1, Some(ack)));
            }
            asn += sf.n_slots as u64;
        }
        Ok((FrameFate::Lost, first_tx, ch, max_retries + 1, None))
    }

    fn send_data_sync(&mut self, i: usize, t: f64) {
        let v = self.v;
        let s = &v.devices[i];
        let StrategyConfig::Synchronized {
            update_interval: Some(u),
            max_retries,
            ..
        } = s.strategy
        else {
            unreachable!()
        };
        let mut gen = self.devs[i].next_data_due.expect("data due");
        while gen + u <= t {
            let seq = self.devs[i].seq;
            self.devs[i].seq += 1;
            self.record(i, gen, f64::NAN, None, 0, FrameFate::Dropped, None, None, seq);
            gen += u;
        }
        let d = &mut self.devs[i];
        d.next_data_due = Some(gen + u);
        let seq = d.seq;
        d.seq += 1;
        let proc_s = v.calibration.fitted.task_processing_s;
        if d.store.draw(s.profile.p_cpu_active, proc_s).is_err() {
            let at = d.store.time;
            self.record(i, gen, f64::NAN, None, 0, FrameFate::Dropped, None, None, seq);
            self.brownout(i, at);
            return;
        }
        match self.dedicated_exchange(i, max_retries, true) {
            Err((at, attempts)) => {
                let fate = if attempts == 0 { FrameFate::Dropped } else { FrameFate::Lost };
                self.record(i, gen, f64::NAN, None, attempts, fate, None, None, seq);
                self.brownout(i, at);
            }
            Ok((fate, sent, ch, attempts, ack)) => {
                self.record(i, gen, sent, ch, attempts, fate, ack, Some(s.parent), seq);
                let d = &mut self.devs[i];
                if let Some(a) = ack {
                    // the acknowledgment carries timing: it doubles as a resync
                    d.clock.resync(a);
                    d.next_sync_due = a + d.sync_interval;
                }
                let now = d.store.time;
                self.schedule_main(now, EventKind::Wake, i);
            }
        }
    }

    // ---- Strategy 2 ----

    fn wake_adhoc(&mut self, i: usize, t: f64) {
        let v = self.v;
        let s = &v.devices[i];
        let StrategyConfig::Adhoc {
            leave_cost_exchanges, ..
        } = s.strategy
        else {
            unreachable!()
        };
        let env = v.join_env(s);
        let d = &mut self.devs[i];
        let gate_open = match s.join.optimizations.scheduled_joining {
            Some(thr) => scheduled_join_gate(
                d.store.harvest_now(),
                thr,
                d.store.cap.usable_energy(),
                expected_join(env, &s.join).energy(),
            ),
            None => true,
        };
        let view = AdhocView {
            powered: d.powered,
            update_pending: d.pending.is_some(),
            next_update: d.next_update,
            gate_open,
        };
        match step_adhoc(&view, t) {
            AdhocAction::WaitForEnergy | AdhocAction::WaitUntil(_) => self.go_off(i, t, OffReason::Starved),
            AdhocAction::HoldForGate => self.sleep(i, t + GATE_POLL_S),
            AdhocAction::JoinAndSend => match self.join(i, t, false) {
                JoinResult::Brownout(at) => self.brownout(i, at),
                JoinResult::Timeout(end) => self.go_off(i, end, OffReason::Done),
                JoinResult::Gated => self.sleep(i, t + GATE_POLL_S),
                JoinResult::Joined(_) => {
                    self.devs[i].joined = true;
                    let gen = self.devs[i].pending.expect("pending update");
                    let seq = self.devs[i].seq;
                    self.devs[i].seq += 1;
                    match self.dedicated_exchange(i, s.join.max_retries, false) {
                        Err((at, attempts)) => {
                            if attempts > 0 {
                                self.devs[i].pending = None;
                                self.record(i, gen, f64::NAN, None, attempts, FrameFate::Lost, None, None, seq);
                            }
                            self.brownout(i, at);
                        }
                        Ok((fate, sent, ch, attempts, ack)) => {
                            self.devs[i].pending = None;
                            self.record(i, gen, sent, ch, attempts, fate, ack, Some(s.parent), seq);
                            let p = s.profile;
                            let leave = leave_cost_exchanges as f64 * v.calibration.platform.airtimes.data;
                            let d = &mut self.devs[i];
                            let now = d.store.time;
                            self.rec.log(v, d, s.id, now, "LEAVE", true, String::new());
                            *self.rec.control.entry(s.parent).or_default() += leave_cost_exchanges as u64;
                            let d = &mut self.devs[i];
                            match d.store.draw(p.p_tx, leave) {
                                Err(_) => {
                                    let at = d.store.time;
                                    self.brownout(i, at)
                                }
                                Ok(()) => {
                                    let end = d.store.time;
                                    self.go_off(i, end, OffReason::Done)
                                }
                            }
                        }
                    }
                }
            },
        }
    }

    // ---- Strategy 3 ----

    fn wake_nonsync(&mut self, i: usize, t: f64) {
        let v = self.v;
        let s = &v.devices[i];
        let StrategyConfig::Nonsynchronized {
            n_channels_used,
            cca_enabled,
            ack_enabled,
            ..
        } = s.strategy
        else {
            unreachable!()
        };
        let air = &v.calibration.platform.airtimes;
        let p = s.profile;
        let budget = frame_energy(s, v);
        let d = &mut self.devs[i];
        let start = d.rng.gen_range(0..n_channels_used.max(1));
        let action = step_nonsynchronized(d.powered, d.store.cap.usable_energy(), budget, n_channels_used, cca_enabled, start);
        let NonSyncAction::Transmit { channel_order } = action else {
            self.go_off(i, t, OffReason::Starved);
            return;
        };
        let gen = d.pending.take().unwrap_or(t);
        let seq = d.seq;
        d.seq += 1;
        if d.store.draw(p.p_cpu_active, v.calibration.platform.frame_wake_overhead).is_err() {
            let at = d.store.time;
            self.record(i, gen, f64::NAN, None, 0, FrameFate::Dropped, None, None, seq);
            self.brownout(i, at);
            return;
        }
        let mut chosen = None;
        for ch in channel_order {
            let t_cca = d.store.time;
            self.rec.log(v, d, s.id, t_cca, "CCA", true, format!("ch={ch}"));
            if d.store.draw(p.p_rx, air.cca).is_err() {
                break;
            }
            if !(cca_enabled && self.medium.busy(ch, t_cca, t_cca + air.cca)) {
                chosen = Some(ch);
                break;
            }
        }
        let d = &mut self.devs[i];
        if !d.powered || d.store.cap.v_now <= d.store.cap.v_turn_off {
            let at = d.store.time;
            self.record(i, gen, f64::NAN, None, 0, FrameFate::Dropped, None, None, seq);
            self.brownout(i, at);
            return;
        }
        let Some(ch) = chosen else {
            let at = d.store.time;
            self.record(i, gen, f64::NAN, None, 0, FrameFate::Dropped, None, None, seq);
            self.go_off(i, at, OffReason::Done);
            return;
        };
        if d.store.draw(p.p_rx, air.turnaround).is_err() {
            let at = d.store.time;
            self.record(i, gen, f64::NAN, None, 0, FrameFate::Dropped, None, None, seq);
            self.brownout(i, at);
            return;
        }
        let t_tx = d.store.time;
        self.rec.log(v, d, s.id, t_tx, "FRAME_TX", true, format!("ch={ch}"));
        let tx_ok = d.store.draw(p.p_tx, air.data).is_ok();
        let tx = Transmission {
            node: s.id,
            channel: ch,
            start: t_tx,
            end: d.store.time,
        };
        self.medium.register(tx);
        let ack_ok = tx_ok && (!ack_enabled || d.store.draw(p.p_rx, air.ack_window()).is_ok());
        let ack_end = t_tx + air.data + if ack_enabled { air.ack_window() } else { 0.0 };
        self.inflight.push(InFlight {
            dev: i,
            generated_at: gen,
            tx,
            ack_end,
            ack_enabled,
            seq,
            complete: tx_ok && ack_ok,
        });
        let idx = self.inflight.len() - 1;
        self.schedule(ack_end.max(tx.end), EventKind::Resolve { frame: idx }, i, 0);
        let end = self.devs[i].store.time;
        if tx_ok && ack_ok {
            self.go_off(i, end, OffReason::Done);
        } else {
            self.brownout(i, end);
        }
    }

    fn resolve(&mut self, frame: usize) {
        let v = self.v;
        let f = &self.inflight[frame];
        let (i, tx, gen, ack_end, seq, complete, ack_enabled) =
            (f.dev, f.tx, f.generated_at, f.ack_end, f.seq, f.complete, f.ack_enabled);
        let s = &v.devices[i];
        let collided = self.medium.collided(&tx);
        let receiver = v
            .timetable
            .as_ref()
            .and_then(|tt| tt.receiver_for(&s.in_range, tx.channel, tx.start, tx.end));
        let link_ok = match receiver {
            Some(r) => {
                let l = self.link(s.id, r);
                self.links.deliver(&l, tx.channel)
            }
            None => false,
        };
        // without an acknowledgment the sender cannot tell, but the frame still arrives
        let delivered = complete && !collided && link_ok;
        let fate = if delivered { FrameFate::Delivered } else { FrameFate::Lost };
        let at = if ack_enabled { ack_end } else { tx.end };
        self.record(i, gen, tx.start, Some(tx.channel), 1, fate, delivered.then_some(at), receiver, seq);
        let d = &mut self.devs[i];
        let detail = format!("collided={collided} receiver={}", receiver.map_or("-".to_string(), |r| r.to_string()));
        self.rec.log(v, d, s.id, ack_end, "FRAME_RESULT", false, detail);
        if frame % 256 == 0 {
            self.medium.prune(tx.start - 1.0);
        }
    }

    // ---- wrap-up ----

    fn finish(mut self, seed: u64) -> Metrics {
        let v = self.v;
        let horizon = self.horizon;
        let mut nodes = Vec::with_capacity(self.devs.len());
        for d in self.devs.iter_mut() {
            if d.store.time < horizon {
                let load = if d.powered { d.store.profile.p_sleep } else { d.store.profile.p_off };
                d.store.run_until(load, horizon, StopOn::Never);
            }
            if let Some(since) = d.off_since {
                d.off_total += (horizon - since.min(horizon)).max(0.0);
            }
            let mut m = std::mem::take(&mut d.m);
            m.off_fraction = (d.off_total / horizon).clamp(0.0, 1.0);
            m.delivery_ratio = if m.frames_sent > 0 {
                m.frames_delivered as f64 / m.frames_sent as f64
            } else {
                0.0
            };
            m.latency = Distribution::from_samples(&d.latencies);
            m.update_interval = Distribution::from_samples(&d.gaps);
            m.steady_update_interval =
                (d.gaps.len() >= 2).then(|| d.gaps[1..].iter().sum::<f64>() / (d.gaps.len() - 1) as f64);
            m.join_duration = Distribution::from_samples(&d.join_durations);
            m.join_energy = Distribution::from_samples(&d.join_energies);
            let l = &d.store.ledger;
            m.harvested_j = l.harvested;
            m.consumed_j = l.consumed;
            m.leaked_j = l.leaked;
            m.spilled_j = l.spilled;
            m.deficit_j = l.deficit;
            m.ledger_closure_error = d.store.closure_error();
            m.causality_violations = 0;
            nodes.push(m);
        }
        if let Some(first) = nodes.first_mut() {
            first.causality_violations = self.causality;
        }
        let solicit_share = v.calibration.platform.solicitation_listen_fraction;
        let routers = v
            .routers
            .iter()
            .map(|&r| {
                let (tsch, scan) = match &v.timetable {
                    Some(tt) if tt.routers.iter().any(|(id, _)| *id == r) => {
                        (tt.share(r, RouterActivity::Tsch), tt.share(r, RouterActivity::Scan))
                    }
                    _ => {
                        let solicited = v.devices.iter().any(|d| {
                            d.join.optimizations.beacon_solicitation
                                && matches!(d.strategy, StrategyConfig::Adhoc { .. })
                                && d.in_range.contains(&r)
                        });
                        if solicited {
                            (1.0 - solicit_share, solicit_share)
                        } else {
                            (1.0, 0.0)
                        }
                    }
                };
                RouterMetrics {
                    id: r,
                    tsch_share: tsch,
                    scan_share: scan,
                    idle_share: (1.0 - tsch - scan).max(0.0),
                    control_frames: self.rec.control.get(&r).copied().unwrap_or(0),
                    frames_received: self.rec.received.get(&r).copied().unwrap_or(0),
                }
            })
            .collect();
        let mut frames = std::mem::take(&mut self.rec.frames);
        frames.sort_by(|a, b| (a.node, a.seq).cmp(&(b.node, b.seq)));
        // phases are booked when they start, so entries may arrive out of time order
        let mut log = std::mem::take(&mut self.rec.log);
        log.sort_by(|a, b| a.time.total_cmp(&b.time));
        let mut m = Metrics {
            scenario: v.scenario.name.clone(),
            seed,
            horizon,
            nodes,
            routers,
            frames,
            joins: std::mem::take(&mut self.rec.joins),
            log,
            log_truncated: self.rec.truncated,
            digest: String::new(),
        };
        m.seal();
        m
    }
}
