//! Run results: per-node and per-router statistics, frame records, the
//! event log, and a content digest for replay checks.

use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::join::JoinOutcome;

/// Summary of a sample of non-negative values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: u64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub p50: f64,
    pub p95: f64,
}

impl Distribution {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let pick = |q: f64| s[((s.len() - 1) as f64 * q).round() as usize];
        Self {
            count: s.len() as u64,
            mean: s.iter().sum::<f64>() / s.len() as f64,
            min: s[0],
            max: s[s.len() - 1],
            p50: pick(0.5),
            p95: pick(0.95),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FrameFate {
    Delivered,
    /// Transmitted but not acknowledged (link loss, collision or no receiver).
    Lost,
    /// Generated but never transmitted (busy channels, brownout, desync).
    Dropped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub node: u32,
    pub seq: u64,
    pub generated_at: f64,
    /// Start of the (last) transmission; NaN when never transmitted.
    pub sent_at: f64,
    pub channel: Option<u32>,
    pub attempts: u32,
    pub fate: FrameFate,
    /// Generation to acknowledgment; only for delivered frames.
    pub latency: Option<f64>,
    pub receiver: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub id: u32,
    pub strategy: String,
    pub join_attempts: u32,
    pub join_successes: u32,
    pub join_duration: Distribution,
    pub join_energy: Distribution,
    pub syncs: u32,
    pub sync_failures: u32,
    pub desyncs: u32,
    pub frames_generated: u64,
    pub frames_sent: u64,
    pub frames_delivered: u64,
    pub frames_lost: u64,
    pub frames_dropped: u64,
    pub delivery_ratio: f64,
    pub latency: Distribution,
    /// Gaps between consecutive delivered updates.
    pub update_interval: Distribution,
    /// Mean gap after discarding the first one.
    pub steady_update_interval: Option<f64>,
    pub turn_ons: u32,
    pub brownouts: u32,
    pub off_fraction: f64,
    pub harvested_j: f64,
    pub consumed_j: f64,
    pub leaked_j: f64,
    pub spilled_j: f64,
    pub deficit_j: f64,
    pub ledger_closure_error: f64,
    /// Radio activity recorded while the node was OFF.
    pub hysteresis_violations: u32,
    /// Events executed before the event that scheduled them.
    pub causality_violations: u32,
    /// (time, voltage) samples at state changes.
    pub energy_trace: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RouterMetrics {
    pub id: u32,
    pub tsch_share: f64,
    pub scan_share: f64,
    pub idle_share: f64,
    /// Join-related control frames forwarded or answered.
    pub control_frames: u64,
    pub frames_received: u64,
}

/// One line of the message-sequence log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub time: f64,
    pub asn: u64,
    pub node: u32,
    pub event: String,
    pub radio: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub scenario: String,
    pub seed: u64,
    pub horizon: f64,
    pub nodes: Vec<NodeMetrics>,
    pub routers: Vec<RouterMetrics>,
    pub frames: Vec<FrameRecord>,
    pub joins: Vec<JoinOutcome>,
    pub log: Vec<LogEntry>,
    /// Entries not stored once the log cap was reached.
    pub log_truncated: u64,
    pub digest: String,
}

impl Metrics {
    /// Hex SHA-256 of the canonical JSON with the digest field blanked.
    pub fn compute_digest(&self) -> String {
        let mut copy = self.clone();
        copy.digest.clear();
        let bytes = serde_json::to_vec(&copy).expect("metrics serialize");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn seal(&mut self) {
        self.digest = self.compute_digest();
    }

    pub fn node(&self, id: u32) -> Option<&NodeMetrics> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn total_frames_sent(&self) -> u64 {
        self.nodes.iter().map(|n| n.frames_sent).sum()
    }

    /// Summary without the bulky tables.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "scenario": self.scenario,
            "seed": self.seed,
            "horizon": self.horizon,
            "digest": self.digest,
            "nodes": self.nodes.iter().map(|n| {
                let mut v = serde_json::to_value(n).expect("node serialize");
                v.as_object_mut().map(|o| o.remove("energy_trace"));
                v
            }).collect::<Vec<_>>(),
            "routers": self.routers,
            "frames": self.frames.len(),
            "joins": self.joins.len(),
            "log_entries": self.log.len(),
            "log_truncated": self.log_truncated,
        })
    }

    pub fn write_frames_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["node", "seq", "generated_at", "sent_at", "channel", "attempts", "fate", "latency", "receiver"])?;
        for f in &self.frames {
            out.write_record([
                f.node.to_string(),
                f.seq.to_string(),
                f.generated_at.to_string(),
                f.sent_at.to_string(),
                opt(f.channel),
                f.attempts.to_string(),
                fate_str(f.fate).to_string(),
                opt(f.latency),
                opt(f.receiver),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_nodes_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "node",
            "strategy",
            "join_attempts",
            "join_successes",
            "join_duration_mean",
            "join_energy_mean",
            "frames_generated",
            "frames_sent",
            "frames_delivered",
            "delivery_ratio",
            "latency_mean",
            "latency_min",
            "update_interval_mean",
            "steady_update_interval",
            "off_fraction",
            "brownouts",
            "ledger_closure_error",
        ])?;
        for n in &self.nodes {
            out.write_record([
                n.id.to_string(),
                n.strategy.clone(),
                n.join_attempts.to_string(),
                n.join_successes.to_string(),
                n.join_duration.mean.to_string(),
                n.join_energy.mean.to_string(),
                n.frames_generated.to_string(),
                n.frames_sent.to_string(),
                n.frames_delivered.to_string(),
                n.delivery_ratio.to_string(),
                n.latency.mean.to_string(),
                n.latency.min.to_string(),
                n.update_interval.mean.to_string(),
                opt(n.steady_update_interval),
                n.off_fraction.to_string(),
                n.brownouts.to_string(),
                n.ledger_closure_error.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_routers_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["router", "tsch_share", "scan_share", "idle_share", "control_frames", "frames_received"])?;
        for r in &self.routers {
            out.write_record([
                r.id.to_string(),
                r.tsch_share.to_string(),
                r.scan_share.to_string(),
                r.idle_share.to_string(),
                r.control_frames.to_string(),
                r.frames_received.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Message-sequence log: `time,asn,node,event,radio,detail`.
    pub fn write_log_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["time", "asn", "node", "event", "radio", "detail"])?;
        for e in &self.log {
            out.write_record([
                e.time.to_string(),
                e.asn.to_string(),
                e.node.to_string(),
                e.event.clone(),
                e.radio.to_string(),
                e.detail.clone(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_energy_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["node", "time", "voltage"])?;
        for n in &self.nodes {
            for (t, v) in &n.energy_trace {
                out.write_record([n.id.to_string(), t.to_string(), v.to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

pub fn fate_str(f: FrameFate) -> &'static str {
    match f {
        FrameFate::Delivered => "DELIVERED",
        FrameFate::Lost => "LOST",
        FrameFate::Dropped => "DROPPED",
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distribution_basics() {
        let d = Distribution::from_samples(&[3.0, 1.0, 2.0]);
        assert_eq!(d.count, 3);
        assert_eq!(d.min, 1.0);
        assert_eq!(d.max, 3.0);
        assert_eq!(d.p50, 2.0);
        assert!((d.mean - 2.0).abs() < 1e-15);
        assert_eq!(Distribution::from_samples(&[]).count, 0);
    }

    #[test]
    fn digest_ignores_itself() {
        let mut m = Metrics {
            scenario: "x".into(),
            ..Metrics::default()
        };
        m.seal();
        let d = m.digest.clone();
        m.seal();
        assert_eq!(d, m.digest);
        assert_eq!(d.len(), 64);
    }
}
