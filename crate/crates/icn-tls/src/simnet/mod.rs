//! Deterministic discrete-event network simulator.
//!
//! Nodes exchange envelopes over symmetric-latency links under a virtual
//! clock; processing takes zero virtual time, so delivery times are exact
//! sums of link latencies. Subscriptions are forwarded hop by hop toward
//! the nearest node advertising the longest matching prefix; each hop
//! leaves reverse-path state that publications follow back. Routers
//! aggregate identical in-flight subscriptions (never the flagged
//! handshake ones) and cache publications unless flagged non-cacheable.
//!
//! Every protocol entity from the rest of the crate runs unmodified inside
//! the node handlers, so traces carry real wire bytes: what the trace
//! shows is what an on-path observer would see.
//!
//! Runs are reproducible: the same topology, scenario and seed give
//! byte-identical traces.

pub mod scenario;
pub mod topology;
pub mod trace;

pub use scenario::{Action, EvalMode, Scenario};
pub use topology::{NodeRole, Routes, Topology, TopologyError};
pub use trace::{measure_first_byte, EventKind, FlowReport, MeasureError, SimEvent, Trace};

use crate::credentials::{issue_certificate, OwnerKeyPair, PublisherCertificate, TrustStore};
use crate::crypto::SigningKeyPair;
use crate::handshake::{
    publisher_complete, publisher_respond, subscriber_process_flight, subscriber_start,
    subscriber_verify_finish, HandshakeState, LocalSigner, Phase, StateStore, SubscriberConfig,
};
use crate::middlebox::{trusted_sign, AccessStats, MiddleboxNode, SigningPolicy};
use crate::names::ContentName;
use crate::session::{
    resume, subscriber_accept_resumption, EstablishedSession, ResumeOutcome, StoredTicket,
    TicketKey,
};
use crate::wire::{
    alert_codes, decode_payload, Alert, DataRecord, Direction, Envelope, EnvelopeFlags, Payload,
    SigRequest,
};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("scenario references unknown node {0:?}")]
    UnknownNode(String),
    #[error("scenario error: {0}")]
    Scenario(String),
    #[error("setup failed: {0}")]
    Setup(String),
}

type SimResult<T> = Result<T, SimError>;

// ---------------------------------------------------------------------------
// Aggregation (router behavior, exposed for direct testing)

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationDecision {
    Aggregated,
    Forwarded,
}

/// A subscription already forwarded and not yet answered.
#[derive(Debug, Clone, Copy)]
pub struct InFlight {
    pub payload_hash: [u8; 32],
}

fn payload_hash(env: &Envelope) -> [u8; 32] {
    crate::crypto::sha256(&crate::wire::encode_payload(&env.payload).unwrap_or_default())
}

/// A router aggregates a subscription only when an identical one (same
/// wire name, same payload bytes) is in flight and the non-aggregatable
/// flag is clear. Handshake subscriptions always carry the flag, so they
/// are always forwarded.
pub fn try_aggregate(in_flight: Option<&InFlight>, env: &Envelope) -> AggregationDecision {
    if env.flags.contains(EnvelopeFlags::NON_AGGREGATABLE) {
        return AggregationDecision::Forwarded;
    }
    match in_flight {
        Some(pending) if pending.payload_hash == payload_hash(env) => {
            AggregationDecision::Aggregated
        }
        _ => AggregationDecision::Forwarded,
    }
}

// ---------------------------------------------------------------------------
// Node state

#[derive(Debug, Clone, PartialEq, Eq)]
enum Hop {
    Local,
    Neighbor(String),
}

#[derive(Default)]
struct PitEntry {
    reverse: Vec<Hop>,
    in_flight: Option<InFlight>,
}

struct DummyProgress {
    content_wire: String,
    blob: Option<Vec<u8>>,
    key: Option<Vec<u8>>,
}

enum SlotKind {
    Protocol {
        hs: Option<HandshakeState>,
        session: Option<EstablishedSession>,
    },
    /// Wire name of a dummy-mode request; points at the shared progress
    /// entry under the content name.
    Dummy { content_name: String },
}

struct FlowSlot {
    name_text: String,
    kind: SlotKind,
}

#[derive(Default)]
struct SubscriberState {
    flows: BTreeMap<String, FlowSlot>,
    tickets: BTreeMap<String, StoredTicket>,
    dummy: BTreeMap<String, DummyProgress>,
}

struct PublisherState {
    cert: PublisherCertificate,
    keypair: SigningKeyPair,
    content: BTreeMap<String, Vec<u8>>,
    store: StateStore,
    sessions: BTreeMap<String, EstablishedSession>,
    channel_peers: BTreeMap<String, [u8; 32]>,
    policy: SigningPolicy,
    stats: AccessStats,
    ring: Vec<TicketKey>,
    issue_tickets: bool,
}

enum RoleState {
    Router,
    Subscriber(SubscriberState),
    Publisher(Box<PublisherState>),
    Middlebox(Box<MiddleboxNode>),
}

struct NodeState {
    role: RoleState,
    pit: BTreeMap<String, PitEntry>,
    cache: BTreeMap<String, Envelope>,
    cache_everything: bool,
}

// ---------------------------------------------------------------------------
// Event queue

#[derive(Debug, Clone, Copy, PartialEq)]
struct Time(f64);

impl Eq for Time {}

impl PartialOrd for Time {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Time {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

enum Queued {
    Deliver { from: String, to: String, env: Envelope },
    Act(Action),
}

struct QueuedEvent {
    time: Time,
    seq: u64,
    what: Queued,
}

impl PartialEq for QueuedEvent {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for QueuedEvent {}
impl PartialOrd for QueuedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueuedEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.time.cmp(&other.time).then(self.seq.cmp(&other.seq))
    }
}

// ---------------------------------------------------------------------------
// Engine

struct Engine {
    routes: Routes,
    link_latency: BTreeMap<(String, String), f64>,
    adverts: BTreeMap<String, BTreeSet<String>>,
    nodes: BTreeMap<String, NodeState>,
    queue: BinaryHeap<Reverse<QueuedEvent>>,
    seq: u64,
    now: f64,
    trace: Trace,
    trust: TrustStore,
    rng: ChaCha20Rng,
}

/// Run a scenario over a topology. Deterministic in (topology, scenario,
/// seed): repeated runs produce byte-identical traces.
pub fn run(topology: &Topology, scenario: &Scenario, seed: u64) -> SimResult<Trace> {
    topology.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let routes = Routes::compute(topology);
    let mut link_latency = BTreeMap::new();
    for link in &topology.links {
        link_latency.insert((link.a.clone(), link.b.clone()), link.latency_ms);
        link_latency.insert((link.b.clone(), link.a.clone()), link.latency_ms);
    }

    // One owner underwrites every trusted publisher; its public key is the
    // single trust anchor subscribers hold.
    let owner = OwnerKeyPair::generate("owner", &mut rng);
    let mut trust = TrustStore::new();
    trust.insert("owner".to_string(), owner.public_key());
    let cert_prefixes: Vec<Vec<String>> = vec![
        vec!["item".to_string()],
        vec!["svc".to_string()],
    ];

    let mut publisher_certs: BTreeMap<String, (SigningKeyPair, PublisherCertificate)> =
        BTreeMap::new();
    for node in &topology.nodes {
        if node.role == NodeRole::TrustedPublisher {
            let keypair = SigningKeyPair::generate(&mut rng);
            let cert = issue_certificate(
                &owner,
                &keypair.public_key(),
                cert_prefixes.clone(),
                0,
                u64::MAX / 2,
            )
            .map_err(|e| SimError::Setup(format!("certificate issuance: {e}")))?;
            publisher_certs.insert(node.id.clone(), (keypair, cert));
        }
    }
    let first_cert = publisher_certs.values().next().map(|(_, c)| c.clone());

    let mut nodes = BTreeMap::new();
    for node in &topology.nodes {
        let role = match node.role {
            NodeRole::Router => RoleState::Router,
            NodeRole::Subscriber => RoleState::Subscriber(SubscriberState::default()),
            NodeRole::TrustedPublisher => {
                let (keypair, cert) = publisher_certs.get(&node.id).unwrap().clone();
                RoleState::Publisher(Box::new(PublisherState {
                    cert,
                    keypair,
                    content: BTreeMap::new(),
                    store: StateStore::new(),
                    sessions: BTreeMap::new(),
                    channel_peers: BTreeMap::new(),
                    policy: SigningPolicy::allowing([]),
                    stats: AccessStats::default(),
                    ring: Vec::new(),
                    issue_tickets: false,
                }))
            }
            NodeRole::Middlebox => {
                let held = first_cert.clone().ok_or_else(|| {
                    SimError::Setup("middlebox requires a trusted publisher in the topology".into())
                })?;
                let keypair = SigningKeyPair::generate(&mut rng);
                RoleState::Middlebox(Box::new(MiddleboxNode::new(held, keypair, true)))
            }
        };
        nodes.insert(
            node.id.clone(),
            NodeState {
                role,
                pit: BTreeMap::new(),
                cache: BTreeMap::new(),
                cache_everything: false,
            },
        );
    }

    let mut engine = Engine {
        routes,
        link_latency,
        adverts: BTreeMap::new(),
        nodes,
        queue: BinaryHeap::new(),
        seq: 0,
        now: 0.0,
        trace: Trace::default(),
        trust,
        rng,
    };

    for (time, action) in &scenario.actions {
        engine.push(*time, Queued::Act(action.clone()));
    }
    engine.drain()?;
    engine.finish()
}

impl Engine {
    fn push(&mut self, time: f64, what: Queued) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(QueuedEvent {
            time: Time(time),
            seq,
            what,
        }));
    }

    fn now_secs(&self) -> u64 {
        (self.now / 1000.0) as u64
    }

    fn drain(&mut self) -> SimResult<()> {
        while let Some(Reverse(event)) = self.queue.pop() {
            self.now = event.time.0;
            match event.what {
                Queued::Act(action) => self.apply_action(action)?,
                Queued::Deliver { from, to, env } => {
                    self.trace
                        .record(self.now, EventKind::Deliver, &from, &to, env.clone());
                    self.process(&to, env, Hop::Neighbor(from))?;
                }
            }
        }
        Ok(())
    }

    fn finish(mut self) -> SimResult<Trace> {
        let node_ids: Vec<String> = self.nodes.keys().cloned().collect();
        for id in node_ids {
            let node = self.nodes.get(&id).unwrap();
            match &node.role {
                RoleState::Publisher(p) => {
                    self.trace.stats.insert(id.clone(), p.stats.clone());
                    self.trace
                        .publisher_signing_keys
                        .insert(id.clone(), p.keypair.secret_bytes().to_vec());
                }
                RoleState::Middlebox(mb) => {
                    self.trace
                        .middlebox_state_blobs
                        .insert(id.clone(), mb.state_scan_bytes());
                }
                _ => {}
            }
        }
        Ok(self.trace)
    }

    // -- routing --------------------------------------------------------

    fn send(&mut self, from: &str, to: &str, env: Envelope) {
        let latency = *self
            .link_latency
            .get(&(from.to_string(), to.to_string()))
            .expect("send only along links");
        self.trace
            .record(self.now, EventKind::Send, from, to, env.clone());
        self.push(
            self.now + latency,
            Queued::Deliver {
                from: from.to_string(),
                to: to.to_string(),
                env,
            },
        );
    }

    /// Longest advertised prefix matching the forwarding id, then the
    /// nearest advertiser (ties to the smallest id). `exclude` drops the
    /// originating node from candidates so a replication point can fetch
    /// content it advertises itself.
    fn route_target(&self, from: &str, fid_text: &str, exclude: Option<&str>) -> Option<String> {
        let fid_labels: Vec<&str> = fid_text.split('/').collect();
        let mut best: Option<(usize, f64, &str)> = None;
        for (prefix, nodes) in &self.adverts {
            let p_labels: Vec<&str> = prefix.split('/').collect();
            if p_labels.len() > fid_labels.len() || fid_labels[..p_labels.len()] != p_labels[..] {
                continue;
            }
            for node in nodes {
                if exclude == Some(node.as_str()) {
                    continue;
                }
                let dist = if node == from {
                    0.0
                } else {
                    match self.routes.distance(from, node) {
                        Some(d) => d,
                        None => continue,
                    }
                };
                let candidate = (p_labels.len(), dist, node.as_str());
                best = match best {
                    None => Some(candidate),
                    Some(current) => {
                        let (cl, cd, cn) = current;
                        // Longer prefix wins; then shorter distance; then id.
                        if candidate.0 > cl
                            || (candidate.0 == cl && (dist < cd || (dist == cd && candidate.2 < cn)))
                        {
                            Some(candidate)
                        } else {
                            Some(current)
                        }
                    }
                };
            }
        }
        best.map(|(_, _, node)| node.to_string())
    }

    fn process(&mut self, node_id: &str, env: Envelope, from: Hop) -> SimResult<()> {
        let mut pending: VecDeque<(Envelope, Hop)> = VecDeque::new();
        pending.push_back((env, from));
        while let Some((env, from)) = pending.pop_front() {
            let mut node = self
                .nodes
                .remove(node_id)
                .ok_or_else(|| SimError::UnknownNode(node_id.to_string()))?;
            let result = self.process_inner(node_id, &mut node, env, from);
            self.nodes.insert(node_id.to_string(), node);
            for out in result? {
                pending.push_back((out, Hop::Local));
            }
        }
        Ok(())
    }

    fn process_inner(
        &mut self,
        node_id: &str,
        node: &mut NodeState,
        env: Envelope,
        from: Hop,
    ) -> SimResult<Vec<Envelope>> {
        match env.direction {
            Direction::Subscription => self.process_subscription(node_id, node, env, from),
            Direction::Publication => self.process_publication(node_id, node, env, from),
        }
    }

    fn process_subscription(
        &mut self,
        node_id: &str,
        node: &mut NodeState,
        env: Envelope,
        from: Hop,
    ) -> SimResult<Vec<Envelope>> {
        // A cached publication answers a matching subscription on the spot.
        if let Hop::Neighbor(prev) = &from {
            if let Some(cached) = node.cache.get(&env.wire_name).cloned() {
                self.send(node_id, prev, cached);
                return Ok(Vec::new());
            }
        }
        let exclude = match &from {
            Hop::Local => Some(node_id),
            Hop::Neighbor(_) => None,
        };
        let target = self.route_target(node_id, env.forwarding_id.as_str(), exclude);
        match target {
            Some(target) if target == node_id => {
                node.pit.entry(env.wire_name.clone()).or_default().reverse_push(&from);
                self.role_handle_subscription(node_id, node, env)
            }
            Some(target) => {
                let entry = node.pit.entry(env.wire_name.clone()).or_default();
                if try_aggregate(entry.in_flight.as_ref(), &env) == AggregationDecision::Aggregated
                {
                    entry.reverse_push(&from);
                    return Ok(Vec::new());
                }
                entry.reverse_push(&from);
                entry.in_flight = Some(InFlight {
                    payload_hash: payload_hash(&env),
                });
                let hop = self
                    .routes
                    .hop(node_id, &target)
                    .expect("route to reachable advertiser")
                    .to_string();
                self.send(node_id, &hop, env);
                Ok(Vec::new())
            }
            None => {
                self.trace
                    .record(self.now, EventKind::Drop, node_id, node_id, env);
                Ok(Vec::new())
            }
        }
    }

    fn process_publication(
        &mut self,
        node_id: &str,
        node: &mut NodeState,
        env: Envelope,
        from: Hop,
    ) -> SimResult<Vec<Envelope>> {
        if matches!(from, Hop::Neighbor(_))
            && (!env.flags.contains(EnvelopeFlags::NON_CACHEABLE) || node.cache_everything)
        {
            node.cache.insert(env.wire_name.clone(), env.clone());
        }
        let Some(entry) = node.pit.get_mut(&env.wire_name) else {
            self.trace
                .record(self.now, EventKind::Drop, node_id, node_id, env);
            return Ok(Vec::new());
        };
        entry.in_flight = None;
        let hops = entry.reverse.clone();
        let mut out = Vec::new();
        for hop in hops {
            match hop {
                Hop::Local => {
                    let emitted = self.role_handle_publication(node_id, node, &env)?;
                    out.extend(emitted);
                }
                Hop::Neighbor(next) => {
                    if Hop::Neighbor(next.clone()) != from {
                        self.send(node_id, &next, env.clone());
                    }
                }
            }
        }
        Ok(out)
    }

    // -- role handlers ----------------------------------------------------

    fn role_handle_subscription(
        &mut self,
        node_id: &str,
        node: &mut NodeState,
        env: Envelope,
    ) -> SimResult<Vec<Envelope>> {
        match &mut node.role {
            RoleState::Publisher(publisher) => {
                let now_secs = self.now_secs();
                Ok(publisher_handle_subscription(
                    node_id,
                    publisher,
                    &env,
                    now_secs,
                    &mut self.rng,
                    &mut self.trace,
                ))
            }
            RoleState::Middlebox(mb) => {
                let now_secs = self.now_secs();
                Ok(middlebox_handle_subscription(mb, &env, now_secs, &mut self.rng))
            }
            _ => {
                // Subscriptions terminating at a plain node go nowhere.
                self.trace
                    .record(self.now, EventKind::Drop, node_id, node_id, env);
                Ok(Vec::new())
            }
        }
    }

    fn role_handle_publication(
        &mut self,
        node_id: &str,
        node: &mut NodeState,
        env: &Envelope,
    ) -> SimResult<Vec<Envelope>> {
        match &mut node.role {
            RoleState::Subscriber(sub) => {
                let now_ms = self.now;
                let now_secs = self.now_secs();
                Ok(subscriber_handle_publication(
                    node_id,
                    sub,
                    env,
                    now_ms,
                    now_secs,
                    &self.trust,
                    &mut self.rng,
                    &mut self.trace,
                ))
            }
            RoleState::Middlebox(mb) => {
                let now_secs = self.now_secs();
                match mb.handle_upstream_publication(env, &self.trust, now_secs, &mut self.rng) {
                    Ok(out) => Ok(out),
                    Err(e) => {
                        self.trace.record(
                            self.now,
                            EventKind::Drop,
                            node_id,
                            node_id,
                            env.clone(),
                        );
                        let _ = e;
                        Ok(Vec::new())
                    }
                }
            }
            _ => Ok(Vec::new()),
        }
    }

    // -- actions ----------------------------------------------------------

    fn require_node(&self, id: &str) -> SimResult<()> {
        if self.nodes.contains_key(id) {
            Ok(())
        } else {
            Err(SimError::UnknownNode(id.to_string()))
        }
    }

    fn apply_action(&mut self, action: Action) -> SimResult<()> {
        match action {
            Action::Advertise { node, prefix } => {
                self.require_node(&node)?;
                self.adverts.entry(prefix).or_default().insert(node);
            }
            Action::Withdraw { node, prefix } => {
                self.require_node(&node)?;
                if let Some(set) = self.adverts.get_mut(&prefix) {
                    set.remove(&node);
                }
            }
            Action::StoreContent { node, name, bytes } => {
                self.require_node(&node)?;
                let content_name = ContentName::parse(&name)
                    .map_err(|e| SimError::Scenario(format!("bad name {name:?}: {e}")))?;
                match &mut self.nodes.get_mut(&node).unwrap().role {
                    RoleState::Publisher(p) => {
                        p.content.insert(name, bytes);
                    }
                    RoleState::Middlebox(mb) => {
                        mb.store_content(&content_name, bytes);
                    }
                    _ => {
                        return Err(SimError::Scenario(format!(
                            "node {node:?} cannot store content"
                        )))
                    }
                }
            }
            Action::CacheEverything { node } => {
                self.require_node(&node)?;
                self.nodes.get_mut(&node).unwrap().cache_everything = true;
            }
            Action::SetPolicyEnabled { node, enabled } => {
                match &mut self.nodes.get_mut(&node).ok_or(SimError::UnknownNode(node.clone()))?.role
                {
                    RoleState::Publisher(p) => p.policy.enabled = enabled,
                    _ => return Err(SimError::Scenario(format!("{node:?} has no policy"))),
                }
            }
            Action::AllowMiddlebox { node, middlebox } => {
                let mb_pk = match &self.nodes.get(&middlebox).map(|n| &n.role) {
                    Some(RoleState::Middlebox(mb)) => mb.public_key(),
                    _ => return Err(SimError::UnknownNode(middlebox)),
                };
                match &mut self.nodes.get_mut(&node).ok_or(SimError::UnknownNode(node.clone()))?.role
                {
                    RoleState::Publisher(p) => {
                        p.policy.allow_middleboxes.insert(mb_pk);
                    }
                    _ => return Err(SimError::Scenario(format!("{node:?} has no policy"))),
                }
            }
            Action::InstallTicketRing { nodes, lifetime } => {
                let key = TicketKey::generate(self.now_secs(), lifetime, &mut self.rng);
                for id in nodes {
                    match &mut self.nodes.get_mut(&id).ok_or(SimError::UnknownNode(id.clone()))?.role
                    {
                        RoleState::Publisher(p) => {
                            p.ring.insert(0, key.clone());
                            p.issue_tickets = true;
                        }
                        _ => {
                            return Err(SimError::Scenario(format!(
                                "{id:?} cannot hold ticket keys"
                            )))
                        }
                    }
                }
            }
            Action::PreEstablishChannel {
                middlebox,
                publisher,
                service,
            } => self.pre_establish_channel(&middlebox, &publisher, &service)?,
            Action::StartChannel { middlebox, service } => {
                let service_name = ContentName::parse(&service)
                    .map_err(|e| SimError::Scenario(format!("bad name: {e}")))?;
                let hello = {
                    let node = self
                        .nodes
                        .get_mut(&middlebox)
                        .ok_or(SimError::UnknownNode(middlebox.clone()))?;
                    match &mut node.role {
                        RoleState::Middlebox(mb) => mb
                            .start_sig_channel(&service_name, &mut self.rng)
                            .map_err(|e| SimError::Scenario(format!("channel start: {e}")))?,
                        _ => return Err(SimError::UnknownNode(middlebox.clone())),
                    }
                };
                self.process(&middlebox, hello, Hop::Local)?;
            }
            Action::Subscribe {
                node,
                name,
                suites,
                resume,
            } => {
                let content_name = ContentName::parse(&name)
                    .map_err(|e| SimError::Scenario(format!("bad name: {e}")))?;
                let hello = {
                    let state = self
                        .nodes
                        .get_mut(&node)
                        .ok_or(SimError::UnknownNode(node.clone()))?;
                    let RoleState::Subscriber(sub) = &mut state.role else {
                        return Err(SimError::Scenario(format!("{node:?} is not a subscriber")));
                    };
                    let ticket = if resume {
                        Some(sub.tickets.get(&name).cloned().ok_or_else(|| {
                            SimError::Scenario(format!("no stored ticket for {name:?}"))
                        })?)
                    } else {
                        None
                    };
                    let config = SubscriberConfig {
                        suites,
                        use_nonce: true,
                        ticket,
                        channel_auth: None,
                    };
                    let (hs, hello) = subscriber_start(&content_name, config, &mut self.rng)
                        .map_err(|e| SimError::Scenario(format!("subscribe: {e}")))?;
                    // A fresh attempt on the same name starts a fresh report.
                    let report = self.trace.flow_mut(&node, &name);
                    *report = FlowReport::default();
                    report.handshake_messages = 1;
                    sub.flows.insert(
                        hello.wire_name.clone(),
                        FlowSlot {
                            name_text: name.clone(),
                            kind: SlotKind::Protocol {
                                hs: Some(hs),
                                session: None,
                            },
                        },
                    );
                    hello
                };
                self.process(&node, hello, Hop::Local)?;
            }
            Action::SubscribeDummy { node, content, key } => {
                let requests = {
                    let state = self
                        .nodes
                        .get_mut(&node)
                        .ok_or(SimError::UnknownNode(node.clone()))?;
                    let RoleState::Subscriber(sub) = &mut state.role else {
                        return Err(SimError::Scenario(format!("{node:?} is not a subscriber")));
                    };
                    let content_name = ContentName::parse(&content)
                        .map_err(|e| SimError::Scenario(format!("bad name: {e}")))?;
                    let key_name = ContentName::parse(&key)
                        .map_err(|e| SimError::Scenario(format!("bad name: {e}")))?;
                    let content_req = plain_request(&content_name, EnvelopeFlags::empty());
                    let key_req = plain_request(&key_name, EnvelopeFlags::NON_AGGREGATABLE);
                    sub.dummy.insert(
                        content.clone(),
                        DummyProgress {
                            content_wire: content_req.wire_name.clone(),
                            blob: None,
                            key: None,
                        },
                    );
                    sub.flows.insert(
                        content_req.wire_name.clone(),
                        FlowSlot {
                            name_text: content.clone(),
                            kind: SlotKind::Dummy {
                                content_name: content.clone(),
                            },
                        },
                    );
                    sub.flows.insert(
                        key_req.wire_name.clone(),
                        FlowSlot {
                            name_text: content.clone(),
                            kind: SlotKind::Dummy {
                                content_name: content.clone(),
                            },
                        },
                    );
                    self.trace.flow_mut(&node, &content);
                    vec![content_req, key_req]
                };
                for env in requests {
                    self.process(&node, env, Hop::Local)?;
                }
            }
            Action::PublishRecord { node, name, bytes } => {
                let records = {
                    let state = self
                        .nodes
                        .get_mut(&node)
                        .ok_or(SimError::UnknownNode(node.clone()))?;
                    let RoleState::Publisher(p) = &mut state.role else {
                        return Err(SimError::Scenario(format!("{node:?} is not a publisher")));
                    };
                    let mut records = Vec::new();
                    for session in p.sessions.values_mut() {
                        if session.name().routable().as_str() == name {
                            if let Ok(record) = session.seal_record(&bytes) {
                                records.push(record);
                            }
                        }
                    }
                    records
                };
                for env in records {
                    self.process(&node, env, Hop::Local)?;
                }
            }
        }
        Ok(())
    }

    /// Run the middlebox-to-publisher channel handshake outside the clock:
    /// the channel predates the scenario, per the reuse argument that one
    /// secured session serves many signature requests.
    fn pre_establish_channel(
        &mut self,
        mb_id: &str,
        pub_id: &str,
        service: &str,
    ) -> SimResult<()> {
        let service_name = ContentName::parse(service)
            .map_err(|e| SimError::Scenario(format!("bad service name: {e}")))?;
        let mut mb_node = self
            .nodes
            .remove(mb_id)
            .ok_or_else(|| SimError::UnknownNode(mb_id.to_string()))?;
        let mut pub_node = match self.nodes.remove(pub_id) {
            Some(n) => n,
            None => {
                self.nodes.insert(mb_id.to_string(), mb_node);
                return Err(SimError::UnknownNode(pub_id.to_string()));
            }
        };
        let result = (|| -> Result<(), String> {
            let RoleState::Middlebox(mb) = &mut mb_node.role else {
                return Err(format!("{mb_id:?} is not a middlebox"));
            };
            let RoleState::Publisher(p) = &mut pub_node.role else {
                return Err(format!("{pub_id:?} is not a publisher"));
            };
            let now = self.now_secs();
            let hello = mb
                .start_sig_channel(&service_name, &mut self.rng)
                .map_err(|e| e.to_string())?;
            let signer = LocalSigner::new(&p.keypair);
            let flight = publisher_respond(&p.store, &hello, &p.cert, &signer, &mut self.rng)
                .map_err(|e| e.to_string())?;
            let finishes = mb
                .handle_upstream_publication(&flight, &self.trust, now, &mut self.rng)
                .map_err(|e| e.to_string())?;
            let finish = finishes.into_iter().next().ok_or("no finish produced")?;
            let (outcome, closing) =
                publisher_complete(&p.store, &finish, None, now, &mut self.rng)
                    .map_err(|e| e.to_string())?;
            if let Some(peer) = outcome.channel_peer {
                p.channel_peers.insert(outcome.wire_name.clone(), peer);
            }
            let wire = outcome.wire_name.clone();
            let fp = outcome.schedule.fingerprint();
            p.sessions.insert(wire.clone(), outcome.into_session());
            self.trace
                .publisher_session_keys
                .insert((pub_id.to_string(), wire), fp);
            mb.handle_upstream_publication(&closing, &self.trust, now, &mut self.rng)
                .map_err(|e| e.to_string())?;
            Ok(())
        })();
        self.nodes.insert(mb_id.to_string(), mb_node);
        self.nodes.insert(pub_id.to_string(), pub_node);
        result.map_err(SimError::Setup)
    }
}

impl PitEntry {
    fn reverse_push(&mut self, hop: &Hop) {
        if !self.reverse.contains(hop) {
            self.reverse.push(hop.clone());
        }
    }
}

fn plain_request(name: &ContentName, flags: EnvelopeFlags) -> Envelope {
    Envelope {
        direction: Direction::Subscription,
        wire_name: name.routable().as_str().to_string(),
        forwarding_id: name.routable(),
        flags,
        payload: Payload::DataRecord(DataRecord {
            seq: 0,
            ciphertext: Vec::new(),
        }),
    }
}

fn alert_reply(env: &Envelope, reason: String) -> Envelope {
    Envelope {
        direction: Direction::Publication,
        wire_name: env.wire_name.clone(),
        forwarding_id: env.forwarding_id.clone(),
        flags: EnvelopeFlags::NON_CACHEABLE,
        payload: Payload::Alert(Alert {
            code: alert_codes::HANDSHAKE_FAILED,
            reason,
        }),
    }
}

// ---------------------------------------------------------------------------
// Publisher node behavior

fn publisher_handle_subscription(
    node_id: &str,
    p: &mut PublisherState,
    env: &Envelope,
    now_secs: u64,
    rng: &mut ChaCha20Rng,
    trace: &mut Trace,
) -> Vec<Envelope> {
    match &env.payload {
        Payload::SubHello(hello) if hello.ticket.is_some() => {
            let signer = LocalSigner::new(&p.keypair);
            match resume(&p.store, env, &p.ring, &p.cert, &signer, rng) {
                Ok(ResumeOutcome::Resumed { session, finish }) => {
                    let wire = session.wire_name().to_string();
                    let name_text = session.name().routable().as_str().to_string();
                    trace
                        .publisher_session_keys
                        .insert((node_id.to_string(), wire.clone()), session.key_schedule().fingerprint());
                    p.sessions.insert(wire.clone(), session);
                    let mut out = vec![finish];
                    if let Some(bytes) = p.content.get(&name_text).cloned() {
                        let session = p.sessions.get_mut(&wire).unwrap();
                        if let Ok(record) = session.seal_record(&bytes) {
                            out.push(record);
                        }
                    }
                    out
                }
                Ok(ResumeOutcome::FallbackToFull { flight }) => vec![flight],
                Err(e) => vec![alert_reply(env, format!("resumption failed: {e}"))],
            }
        }
        Payload::SubHello(_) => {
            let signer = LocalSigner::new(&p.keypair);
            match publisher_respond(&p.store, env, &p.cert, &signer, rng) {
                Ok(flight) => vec![flight],
                Err(e) => vec![alert_reply(env, format!("handshake refused: {e}"))],
            }
        }
        Payload::SubFinish(_) => {
            let ticket_key = if p.issue_tickets { p.ring.first() } else { None };
            match publisher_complete(&p.store, env, ticket_key, now_secs, rng) {
                Ok((outcome, closing)) => {
                    if let Some(peer) = outcome.channel_peer {
                        p.channel_peers.insert(outcome.wire_name.clone(), peer);
                    }
                    let wire = outcome.wire_name.clone();
                    let name_text = outcome.name.routable().as_str().to_string();
                    trace.publisher_session_keys.insert(
                        (node_id.to_string(), wire.clone()),
                        outcome.schedule.fingerprint(),
                    );
                    p.sessions.insert(wire.clone(), outcome.into_session());
                    let mut out = vec![closing];
                    if let Some(bytes) = p.content.get(&name_text).cloned() {
                        let session = p.sessions.get_mut(&wire).unwrap();
                        if let Ok(record) = session.seal_record(&bytes) {
                            out.push(record);
                        }
                    }
                    out
                }
                Err(e) => vec![alert_reply(env, format!("handshake failed: {e}"))],
            }
        }
        Payload::DataRecord(_) => {
            // Either a sealed control record on an established channel, or a
            // plain request for stored bytes (the pre-encrypted baseline).
            if p.sessions.contains_key(&env.wire_name) {
                publisher_handle_channel_record(p, env)
            } else if let Some(bytes) = p.content.get(env.forwarding_id.as_str()).cloned() {
                vec![Envelope {
                    direction: Direction::Publication,
                    wire_name: env.wire_name.clone(),
                    forwarding_id: env.forwarding_id.clone(),
                    flags: EnvelopeFlags::NON_CACHEABLE,
                    payload: Payload::DataRecord(DataRecord {
                        seq: 0,
                        ciphertext: bytes,
                    }),
                }]
            } else {
                Vec::new()
            }
        }
        _ => Vec::new(),
    }
}

fn publisher_handle_channel_record(p: &mut PublisherState, env: &Envelope) -> Vec<Envelope> {
    let Some(session) = p.sessions.get_mut(&env.wire_name) else {
        return Vec::new();
    };
    let Ok(plaintext) = session.open_record(env) else {
        return Vec::new();
    };
    let Ok(payload) = decode_payload(&plaintext) else {
        return Vec::new();
    };
    let Payload::SigRequest(request) = payload else {
        return Vec::new();
    };
    let peer = p.channel_peers.get(&env.wire_name).copied();
    let reply = match peer {
        Some(peer) => sign_or_refuse(p, &request, &peer),
        None => Payload::Alert(Alert {
            code: alert_codes::REFUSED,
            reason: "channel is not authenticated".into(),
        }),
    };
    let session = p.sessions.get_mut(&env.wire_name).unwrap();
    match crate::wire::encode_payload(&reply) {
        Ok(bytes) => match session.seal_record(&bytes) {
            Ok(record) => vec![record],
            Err(_) => Vec::new(),
        },
        Err(_) => Vec::new(),
    }
}

fn sign_or_refuse(p: &mut PublisherState, request: &SigRequest, peer: &[u8; 32]) -> Payload {
    match trusted_sign(&p.keypair, request, peer, &p.policy, &mut p.stats) {
        Ok(response) => Payload::SigResponse(response),
        Err(refusal) => Payload::Alert(Alert {
            code: alert_codes::REFUSED,
            reason: refusal.to_string(),
        }),
    }
}

// ---------------------------------------------------------------------------
// Middlebox node behavior

fn middlebox_handle_subscription(
    mb: &mut MiddleboxNode,
    env: &Envelope,
    now_secs: u64,
    rng: &mut ChaCha20Rng,
) -> Vec<Envelope> {
    match &env.payload {
        Payload::SubHello(_) => match mb.handle_subscriber_hello(env, rng) {
            Ok(out) => out,
            Err(e) => vec![alert_reply(env, format!("interception failed: {e}"))],
        },
        Payload::SubFinish(_) => match mb.handle_subscriber_finish(env, now_secs, rng) {
            Ok(out) => out,
            Err(e) => vec![alert_reply(env, format!("handshake failed: {e}"))],
        },
        Payload::DataRecord(_) => {
            // Plain request for a replicated blob.
            if let Some(bytes) = mb.content_for(env.forwarding_id.as_str()) {
                vec![Envelope {
                    direction: Direction::Publication,
                    wire_name: env.wire_name.clone(),
                    forwarding_id: env.forwarding_id.clone(),
                    flags: EnvelopeFlags::empty(),
                    payload: Payload::DataRecord(DataRecord {
                        seq: 0,
                        ciphertext: bytes,
                    }),
                }]
            } else {
                Vec::new()
            }
        }
        _ => Vec::new(),
    }
}

// ---------------------------------------------------------------------------
// Subscriber node behavior

#[allow(clippy::too_many_arguments)]
fn subscriber_handle_publication(
    node_id: &str,
    sub: &mut SubscriberState,
    env: &Envelope,
    now_ms: f64,
    now_secs: u64,
    trust: &TrustStore,
    rng: &mut ChaCha20Rng,
    trace: &mut Trace,
) -> Vec<Envelope> {
    let Some(slot) = sub.flows.get_mut(&env.wire_name) else {
        return Vec::new();
    };
    let name_text = slot.name_text.clone();
    match &mut slot.kind {
        SlotKind::Dummy { content_name } => {
            let content_name = content_name.clone();
            let Payload::DataRecord(record) = &env.payload else {
                return Vec::new();
            };
            let Some(progress) = sub.dummy.get_mut(&content_name) else {
                return Vec::new();
            };
            if env.wire_name == progress.content_wire {
                progress.blob = Some(record.ciphertext.clone());
            } else {
                progress.key = Some(record.ciphertext.clone());
            }
            if let (Some(blob), Some(_key)) = (&progress.blob, &progress.key) {
                let report = trace.flow_mut(node_id, &content_name);
                if report.first_byte_ms.is_none() {
                    report.first_byte_ms = Some(now_ms);
                    report.established = true;
                    report.plaintexts.push(blob.clone());
                }
            }
            Vec::new()
        }
        SlotKind::Protocol { hs, session } => {
            if let Some(live) = session {
                match &env.payload {
                    Payload::DataRecord(_) => match live.open_record(env) {
                        Ok(plaintext) => {
                            let report = trace.flow_mut(node_id, &name_text);
                            if report.first_byte_ms.is_none() {
                                report.first_byte_ms = Some(now_ms);
                            }
                            report.plaintexts.push(plaintext);
                        }
                        Err(_) => {
                            // Tampered or replayed records are dropped, the
                            // session stays usable.
                        }
                    },
                    Payload::Alert(_) => {}
                    _ => {
                        // A handshake message on an established flow is a
                        // replay; nothing to do.
                    }
                }
                return Vec::new();
            }
            let Some(state) = hs.as_mut() else {
                return Vec::new();
            };
            let report = trace.flow_mut(node_id, &name_text);
            report.handshake_messages += 1;
            if let Payload::Alert(alert) = &env.payload {
                report.error = Some(format!("alert: {}", alert.reason));
                return Vec::new();
            }
            match state.phase() {
                Phase::HelloSent => {
                    let is_finish = matches!(env.payload, Payload::PubFinish(_));
                    if is_finish && state.offered_ticket() {
                        match subscriber_accept_resumption(state, env) {
                            Ok(live) => {
                                report.established = true;
                                report.resumed = true;
                                report.key_fingerprint =
                                    Some(live.key_schedule().fingerprint());
                                if let Some(ticket) = live.resumption_ticket() {
                                    report.received_ticket = true;
                                    sub.tickets.insert(name_text.clone(), ticket.clone());
                                }
                                *session = Some(live);
                                *hs = None;
                            }
                            Err(e) => {
                                report.error = Some(e.to_string());
                            }
                        }
                        Vec::new()
                    } else {
                        match subscriber_process_flight(state, env, trust, now_secs, rng) {
                            Ok(finish) => {
                                let report = trace.flow_mut(node_id, &name_text);
                                report.handshake_messages += 1;
                                vec![finish]
                            }
                            Err(e) => {
                                report.error = Some(e.to_string());
                                Vec::new()
                            }
                        }
                    }
                }
                Phase::FlightSent => match subscriber_verify_finish(state, env) {
                    Ok(live) => {
                        report.established = true;
                        report.key_fingerprint = Some(live.key_schedule().fingerprint());
                        if let Some(ticket) = live.resumption_ticket() {
                            report.received_ticket = true;
                            sub.tickets.insert(name_text.clone(), ticket.clone());
                        }
                        *session = Some(live);
                        *hs = None;
                        Vec::new()
                    }
                    Err(e) => {
                        report.error = Some(e.to_string());
                        Vec::new()
                    }
                },
                _ => {
                    report.error = Some("message in unexpected phase".into());
                    Vec::new()
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::EnvelopeFlags;

    fn plain(name: &str, flags: EnvelopeFlags, body: &[u8]) -> Envelope {
        let n = ContentName::parse(name).unwrap();
        Envelope {
            direction: Direction::Subscription,
            wire_name: n.routable().as_str().to_string(),
            forwarding_id: n.routable(),
            flags,
            payload: Payload::DataRecord(DataRecord {
                seq: 0,
                ciphertext: body.to_vec(),
            }),
        }
    }

    #[test]
    fn identical_plain_subscriptions_aggregate() {
        let first = plain("a/b", EnvelopeFlags::empty(), b"");
        let pending = InFlight {
            payload_hash: payload_hash(&first),
        };
        let second = plain("a/b", EnvelopeFlags::empty(), b"");
        assert_eq!(
            try_aggregate(Some(&pending), &second),
            AggregationDecision::Aggregated
        );
    }

    #[test]
    fn flagged_subscriptions_never_aggregate() {
        let first = plain("a/b", EnvelopeFlags::NON_AGGREGATABLE, b"");
        let pending = InFlight {
            payload_hash: payload_hash(&first),
        };
        let second = plain("a/b", EnvelopeFlags::NON_AGGREGATABLE, b"");
        assert_eq!(
            try_aggregate(Some(&pending), &second),
            AggregationDecision::Forwarded
        );
    }

    #[test]
    fn different_payloads_never_aggregate() {
        let first = plain("a/b", EnvelopeFlags::empty(), b"x");
        let pending = InFlight {
            payload_hash: payload_hash(&first),
        };
        let second = plain("a/b", EnvelopeFlags::empty(), b"y");
        assert_eq!(
            try_aggregate(Some(&pending), &second),
            AggregationDecision::Forwarded
        );
    }
}
