//! Network roles, parent chains and the per-(link, channel) delivery model.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    BorderRouter,
    Router,
    EndDevice,
}

impl Role {
    pub fn forwards(self) -> bool {
        !matches!(self, Role::EndDevice)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopoNode {
    pub id: u32,
    pub role: Role,
    pub parent: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub a: u32,
    pub b: u32,
    /// Delivery probability on every channel not listed in `per_channel`.
    pub p: f64,
    /// Optional per-channel override, indexed by physical channel.
    #[serde(default)]
    pub per_channel: Vec<f64>,
}

impl Link {
    pub fn probability(&self, channel: u32) -> f64 {
        self.per_channel.get(channel as usize).copied().unwrap_or(self.p)
    }

    fn key(&self) -> (u32, u32) {
        (self.a.min(self.b), self.a.max(self.b))
    }
}

/// Bernoulli draw against the link's probability on `channel`.
///
/// Exactly one uniform is consumed per call regardless of the probability,
/// so the stream position depends only on how often the link is used.
pub fn link_delivery(link: &Link, channel: u32, stream: &mut ChaCha8Rng) -> bool {
    let u: f64 = stream.gen();
    u < link.probability(channel)
}

#[derive(Debug, Clone, Default)]
pub struct Topology {
    nodes: BTreeMap<u32, TopoNode>,
    links: BTreeMap<(u32, u32), Link>,
}

impl Topology {
    pub fn new(nodes: Vec<TopoNode>, links: Vec<Link>) -> Result<Self> {
        let mut t = Topology::default();
        for n in nodes {
            if t.nodes.insert(n.id, n.clone()).is_some() {
                return Err(Error::invalid("topology", format!("duplicate node id {}", n.id)));
            }
        }
        for l in links {
            for end in [l.a, l.b] {
                if !t.nodes.contains_key(&end) {
                    return Err(Error::invalid("topology", format!("link references unknown node {end}")));
                }
            }
            if !(0.0..=1.0).contains(&l.p) || l.per_channel.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::invalid("topology", "delivery probability outside [0, 1]"));
            }
            t.links.insert(l.key(), l);
        }
        // a parent relation implies an ideal link unless one is given
        let implied: Vec<Link> = t
            .nodes
            .values()
            .filter_map(|n| n.parent.map(|p| Link { a: n.id, b: p, p: 1.0, per_channel: Vec::new() }))
            .collect();
        for l in implied {
            t.links.entry(l.key()).or_insert(l);
        }
        t.check_structure()?;
        Ok(t)
    }

    fn check_structure(&self) -> Result<()> {
        for n in self.nodes.values() {
            if let Some(p) = n.parent {
                let parent = self
                    .nodes
                    .get(&p)
                    .ok_or_else(|| Error::invalid("topology", format!("node {} has unknown parent {p}", n.id)))?;
                if !parent.role.forwards() {
                    return Err(Error::invalid("topology", format!("end device {p} cannot be a parent (end devices never forward)")));
                }
            }
            if n.role != Role::BorderRouter && self.hops_to_border(n.id).is_none() {
                return Err(Error::invalid("topology", format!("node {} has no router path to a border router", n.id)));
            }
        }
        Ok(())
    }

    pub fn node(&self, id: u32) -> Option<&TopoNode> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TopoNode> {
        self.nodes.values()
    }

    pub fn link(&self, a: u32, b: u32) -> Option<&Link> {
        self.links.get(&(a.min(b), a.max(b)))
    }

    /// Hops from `id` up to the border router along parent pointers.
    pub fn hops_to_border(&self, id: u32) -> Option<u32> {
        let mut cur = self.nodes.get(&id)?;
        let mut hops = 0;
        while cur.role != Role::BorderRouter {
            let p = cur.parent?;
            cur = self.nodes.get(&p)?;
            if !cur.role.forwards() {
                return None;
            }
            hops += 1;
            if hops as usize > self.nodes.len() {
                return None;
            }
        }
        Some(hops)
    }

    /// `id` followed by its ancestors up to and including the border router.
    pub fn path_to_border(&self, id: u32) -> Vec<u32> {
        let mut out = vec![id];
        let mut cur = self.nodes.get(&id);
        while let Some(n) = cur {
            if n.role == Role::BorderRouter {
                break;
            }
            match n.parent {
                Some(p) if out.len() <= self.nodes.len() => {
                    out.push(p);
                    cur = self.nodes.get(&p);
                }
                _ => break,
            }
        }
        out
    }

    /// Routers and border routers sharing a link with `id`.
    pub fn routers_in_range(&self, id: u32) -> Vec<u32> {
        self.links
            .values()
            .filter_map(|l| {
                let other = if l.a == id {
                    l.b
                } else if l.b == id {
                    l.a
                } else {
                    return None;
                };
                self.nodes.get(&other).filter(|n| n.role.forwards()).map(|n| n.id)
            })
            .collect()
    }
}

/// Lazily created delivery streams, one per (link, channel).
#[derive(Debug)]
pub struct LinkStreams {
    seed: u64,
    streams: BTreeMap<(u32, u32, u32), ChaCha8Rng>,
}

impl LinkStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            streams: BTreeMap::new(),
        }
    }

    pub fn deliver(&mut self, link: &Link, channel: u32) -> bool {
        let (a, b) = link.key();
        let seed = self.seed;
        let s = self
            .streams
            .entry((a, b, channel))
            .or_insert_with(|| rng::stream(seed, "link", &[a as u64, b as u64, channel as u64]));
        link_delivery(link, channel, s)
    }
}
