//! Topologies: nodes with roles, symmetric weighted links, and the
//! all-pairs shortest-path tables forwarding decisions are made from.
//!
//! The line-oriented text form is one declaration per line:
//!
//! ```text
//! node sub subscriber
//! node mb middlebox
//! node pub trusted-publisher
//! link sub mb 1.0
//! link mb pub 0.5
//! ```

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("topology is not connected")]
    Disconnected,
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("link latency must be positive and finite, got {0}")]
    BadLatency(f64),
    #[error("duplicate node id {0:?}")]
    DuplicateNode(String),
    #[error("cannot parse topology line {line}: {what}")]
    Parse { line: usize, what: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRole {
    Subscriber,
    Middlebox,
    TrustedPublisher,
    Router,
}

impl NodeRole {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeRole::Subscriber => "subscriber",
            NodeRole::Middlebox => "middlebox",
            NodeRole::TrustedPublisher => "trusted-publisher",
            NodeRole::Router => "router",
        }
    }

    fn parse(text: &str) -> Option<Self> {
        match text {
            "subscriber" => Some(NodeRole::Subscriber),
            "middlebox" => Some(NodeRole::Middlebox),
            "trusted-publisher" => Some(NodeRole::TrustedPublisher),
            "router" => Some(NodeRole::Router),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NodeSpec {
    pub id: String,
    pub role: NodeRole,
}

/// A bidirectional link; latency is identical in both directions.
#[derive(Debug, Clone)]
pub struct Link {
    pub a: String,
    pub b: String,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Topology {
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<Link>,
}

impl Topology {
    pub fn new() -> Self {
        Topology::default()
    }

    pub fn add_node(&mut self, id: impl Into<String>, role: NodeRole) -> &mut Self {
        self.nodes.push(NodeSpec { id: id.into(), role });
        self
    }

    pub fn add_link(
        &mut self,
        a: impl Into<String>,
        b: impl Into<String>,
        latency_ms: f64,
    ) -> &mut Self {
        self.links.push(Link {
            a: a.into(),
            b: b.into(),
            latency_ms,
        });
        self
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|n| n.id.as_str())
    }

    pub fn role_of(&self, id: &str) -> Option<NodeRole> {
        self.nodes.iter().find(|n| n.id == id).map(|n| n.role)
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        let mut ids = BTreeSet::new();
        for node in &self.nodes {
            if !ids.insert(node.id.as_str()) {
                return Err(TopologyError::DuplicateNode(node.id.clone()));
            }
        }
        for link in &self.links {
            for end in [&link.a, &link.b] {
                if !ids.contains(end.as_str()) {
                    return Err(TopologyError::UnknownNode(end.clone()));
                }
            }
            if !(link.latency_ms.is_finite() && link.latency_ms > 0.0) {
                return Err(TopologyError::BadLatency(link.latency_ms));
            }
        }
        if self.nodes.is_empty() {
            return Err(TopologyError::Disconnected);
        }
        let adj = self.adjacency();
        let mut seen = BTreeSet::new();
        let start = self.nodes[0].id.clone();
        let mut queue = VecDeque::from([start]);
        while let Some(id) = queue.pop_front() {
            if !seen.insert(id.clone()) {
                continue;
            }
            for (next, _) in adj.get(&id).into_iter().flatten() {
                queue.push_back(next.clone());
            }
        }
        if seen.len() != self.nodes.len() {
            return Err(TopologyError::Disconnected);
        }
        Ok(())
    }

    pub fn adjacency(&self) -> BTreeMap<String, Vec<(String, f64)>> {
        let mut adj: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        for node in &self.nodes {
            adj.entry(node.id.clone()).or_default();
        }
        for link in &self.links {
            adj.entry(link.a.clone())
                .or_default()
                .push((link.b.clone(), link.latency_ms));
            adj.entry(link.b.clone())
                .or_default()
                .push((link.a.clone(), link.latency_ms));
        }
        adj
    }

    pub fn parse(text: &str) -> Result<Self, TopologyError> {
        let mut topology = Topology::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["node", id, role] => {
                    let role = NodeRole::parse(role).ok_or_else(|| TopologyError::Parse {
                        line: idx + 1,
                        what: format!("unknown role {role:?}"),
                    })?;
                    topology.add_node(*id, role);
                }
                ["link", a, b, latency] => {
                    let latency_ms: f64 =
                        latency.parse().map_err(|_| TopologyError::Parse {
                            line: idx + 1,
                            what: format!("bad latency {latency:?}"),
                        })?;
                    topology.add_link(*a, *b, latency_ms);
                }
                _ => {
                    return Err(TopologyError::Parse {
                        line: idx + 1,
                        what: "expected `node <id> <role>` or `link <a> <b> <latency_ms>`".into(),
                    })
                }
            }
        }
        topology.validate()?;
        Ok(topology)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for node in &self.nodes {
            out.push_str(&format!("node {} {}\n", node.id, node.role.as_str()));
        }
        for link in &self.links {
            out.push_str(&format!("link {} {} {:?}\n", link.a, link.b, link.latency_ms));
        }
        out
    }
}

/// Shortest-path routing state: total latency and first hop for every
/// ordered node pair, computed with Dijkstra over link latencies.
/// Ties break toward the lexicographically smallest neighbor.
#[derive(Debug, Clone)]
pub struct Routes {
    pub dist: BTreeMap<(String, String), f64>,
    pub next_hop: BTreeMap<(String, String), String>,
}

impl Routes {
    pub fn compute(topology: &Topology) -> Self {
        let adj = topology.adjacency();
        let mut dist = BTreeMap::new();
        let mut next_hop = BTreeMap::new();
        for source in topology.node_ids() {
            let (d, first) = dijkstra(&adj, source);
            for (target, latency) in d {
                dist.insert((source.to_string(), target.clone()), latency);
                if let Some(hop) = first.get(&target) {
                    next_hop.insert((source.to_string(), target), hop.clone());
                }
            }
        }
        Routes { dist, next_hop }
    }

    pub fn distance(&self, from: &str, to: &str) -> Option<f64> {
        self.dist.get(&(from.to_string(), to.to_string())).copied()
    }

    pub fn hop(&self, from: &str, to: &str) -> Option<&str> {
        self.next_hop
            .get(&(from.to_string(), to.to_string()))
            .map(String::as_str)
    }
}

fn dijkstra(
    adj: &BTreeMap<String, Vec<(String, f64)>>,
    source: &str,
) -> (BTreeMap<String, f64>, BTreeMap<String, String>) {
    let mut dist: BTreeMap<String, f64> = BTreeMap::new();
    let mut first_hop: BTreeMap<String, String> = BTreeMap::new();
    let mut visited: BTreeSet<String> = BTreeSet::new();
    dist.insert(source.to_string(), 0.0);
    loop {
        // Deterministic extraction: smallest (distance, id) among unvisited.
        let current = dist
            .iter()
            .filter(|(id, _)| !visited.contains(*id))
            .min_by(|(ia, da), (ib, db)| da.total_cmp(db).then_with(|| ia.cmp(ib)))
            .map(|(id, d)| (id.clone(), *d));
        let Some((u, du)) = current else { break };
        visited.insert(u.clone());
        for (v, w) in adj.get(&u).into_iter().flatten() {
            let candidate = du + w;
            let better = match dist.get(v) {
                None => true,
                Some(&existing) => {
                    candidate < existing
                        || (candidate == existing
                            && u != source
                            && first_hop.get(v).map(String::as_str)
                                > first_hop.get(&u).map(String::as_str))
                }
            };
            if better {
                dist.insert(v.clone(), candidate);
                let hop = if u == source {
                    v.clone()
                } else {
                    first_hop.get(&u).cloned().expect("hop recorded for reached node")
                };
                first_hop.insert(v.clone(), hop);
            }
        }
    }
    (dist, first_hop)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_chain() -> Topology {
        let mut t = Topology::new();
        t.add_node("sub", NodeRole::Subscriber)
            .add_node("mb", NodeRole::Middlebox)
            .add_node("pub", NodeRole::TrustedPublisher)
            .add_link("sub", "mb", 1.0)
            .add_link("mb", "pub", 0.5);
        t
    }

    #[test]
    fn parse_roundtrip() {
        let t = three_chain();
        let parsed = Topology::parse(&t.to_text()).unwrap();
        assert_eq!(parsed.nodes.len(), 3);
        assert_eq!(parsed.links.len(), 2);
        assert_eq!(parsed.role_of("mb"), Some(NodeRole::Middlebox));
    }

    #[test]
    fn validation_catches_problems() {
        let mut t = three_chain();
        t.add_link("sub", "ghost", 1.0);
        assert!(matches!(t.validate(), Err(TopologyError::UnknownNode(_))));

        let mut t = three_chain();
        t.add_link("sub", "pub", 0.0);
        assert!(matches!(t.validate(), Err(TopologyError::BadLatency(_))));

        let mut t = three_chain();
        t.add_node("island", NodeRole::Router);
        assert!(matches!(t.validate(), Err(TopologyError::Disconnected)));
    }

    #[test]
    fn routes_sum_latencies() {
        let t = three_chain();
        let routes = Routes::compute(&t);
        assert_eq!(routes.distance("sub", "pub"), Some(1.5));
        assert_eq!(routes.hop("sub", "pub"), Some("mb"));
        assert_eq!(routes.hop("pub", "sub"), Some("mb"));
        assert_eq!(routes.distance("mb", "mb"), Some(0.0));
    }
}
