//! Scenario scripts: timed node actions, plus builders for the standard
//! evaluation setups.
//!
//! The evaluation topology is a chain: subscriber, middlebox (content
//! replication point), trusted publisher. The subscriber-middlebox link
//! costs `L` milliseconds, the middlebox-publisher link `alpha * L`.

use super::topology::{NodeRole, Topology};

pub const ITEM: &str = "item/video";
pub const ITEM_KEY: &str = "item/video/key";
pub const SIG_SERVICE: &str = "svc/sign";
pub const CONTENT: &[u8] = b"first content packet";
pub const WRAPPED_KEY: &[u8] = b"wrapped content key";

#[derive(Debug, Clone)]
pub enum Action {
    /// Announce `prefix` as reachable at `node`.
    Advertise { node: String, prefix: String },
    Withdraw { node: String, prefix: String },
    /// Place content bytes at a publisher or middlebox node.
    StoreContent { node: String, name: String, bytes: Vec<u8> },
    /// Set up the middlebox-to-publisher signature channel outside the
    /// clock, modelling a channel that existed before the scenario.
    PreEstablishChannel {
        middlebox: String,
        publisher: String,
        service: String,
    },
    /// Open the signature channel over the network instead, paying its
    /// message cost inside the scenario.
    StartChannel { middlebox: String, service: String },
    /// Begin a handshake for `name`. With `resume`, offer the ticket stored
    /// from this subscriber's previous session on the name.
    Subscribe {
        node: String,
        name: String,
        suites: Vec<u16>,
        resume: bool,
    },
    /// The pre-encrypted baseline: request the stored blob and the wrapped
    /// key simultaneously.
    SubscribeDummy {
        node: String,
        content: String,
        key: String,
    },
    SetPolicyEnabled { node: String, enabled: bool },
    /// Test hook: make a node's cache ignore the non-cacheable flag.
    CacheEverything { node: String },
    /// Publish one more record on every established flow for `name` at this
    /// publisher.
    PublishRecord { node: String, name: String, bytes: Vec<u8> },
    /// Generate a ticket key ring and install it on these publishers, which
    /// then issue tickets on every completed handshake.
    InstallTicketRing { nodes: Vec<String>, lifetime: u64 },
    /// Allow these middlebox channel identities at a publisher.
    AllowMiddlebox { node: String, middlebox: String },
}

#[derive(Debug, Clone, Default)]
pub struct Scenario {
    pub actions: Vec<(f64, Action)>,
}

impl Scenario {
    pub fn new() -> Self {
        Scenario::default()
    }

    pub fn at(mut self, time_ms: f64, action: Action) -> Self {
        self.actions.push((time_ms, action));
        self
    }

    /// Setup actions run at t = 0 before any traffic.
    pub fn setup(self, action: Action) -> Self {
        self.at(0.0, action)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EvalMode {
    Dummy,
    Middlebox,
    Direct,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Dummy => "dummy",
            EvalMode::Middlebox => "middlebox",
            EvalMode::Direct => "direct",
        }
    }
}

/// The evaluation chain. With `alpha == 0` the middlebox and publisher are
/// co-located, which collapses the chain to a single serving node.
pub fn eval_topology(l: f64, alpha: f64) -> Topology {
    let mut t = Topology::new();
    if alpha == 0.0 {
        t.add_node("sub", NodeRole::Subscriber)
            .add_node("pub", NodeRole::TrustedPublisher)
            .add_link("sub", "pub", l);
    } else {
        t.add_node("sub", NodeRole::Subscriber)
            .add_node("mb", NodeRole::Middlebox)
            .add_node("pub", NodeRole::TrustedPublisher)
            .add_link("sub", "mb", l)
            .add_link("mb", "pub", alpha * l);
    }
    t
}

/// Scenario for one evaluation mode on the chain topology.
pub fn eval_scenario(mode: EvalMode, alpha: f64) -> Scenario {
    let colocated = alpha == 0.0;
    let mut s = Scenario::new();
    match mode {
        EvalMode::Direct => {
            s = s
                .setup(Action::Advertise {
                    node: "pub".into(),
                    prefix: ITEM.into(),
                })
                .setup(Action::StoreContent {
                    node: "pub".into(),
                    name: ITEM.into(),
                    bytes: CONTENT.to_vec(),
                });
        }
        EvalMode::Middlebox if colocated => {
            // Middlebox co-located with the publisher: the signature round
            // trip costs nothing, so the exchange is the direct one.
            s = s
                .setup(Action::Advertise {
                    node: "pub".into(),
                    prefix: ITEM.into(),
                })
                .setup(Action::StoreContent {
                    node: "pub".into(),
                    name: ITEM.into(),
                    bytes: CONTENT.to_vec(),
                });
        }
        EvalMode::Middlebox => {
            s = s
                .setup(Action::Advertise {
                    node: "mb".into(),
                    prefix: ITEM.into(),
                })
                .setup(Action::StoreContent {
                    node: "mb".into(),
                    name: ITEM.into(),
                    bytes: CONTENT.to_vec(),
                })
                .setup(Action::Advertise {
                    node: "pub".into(),
                    prefix: SIG_SERVICE.into(),
                })
                .setup(Action::AllowMiddlebox {
                    node: "pub".into(),
                    middlebox: "mb".into(),
                })
                .setup(Action::PreEstablishChannel {
                    middlebox: "mb".into(),
                    publisher: "pub".into(),
                    service: SIG_SERVICE.into(),
                });
        }
        EvalMode::Dummy if colocated => {
            s = s
                .setup(Action::Advertise {
                    node: "pub".into(),
                    prefix: ITEM.into(),
                })
                .setup(Action::Advertise {
                    node: "pub".into(),
                    prefix: ITEM_KEY.into(),
                })
                .setup(Action::StoreContent {
                    node: "pub".into(),
                    name: ITEM.into(),
                    bytes: CONTENT.to_vec(),
                })
                .setup(Action::StoreContent {
                    node: "pub".into(),
                    name: ITEM_KEY.into(),
                    bytes: WRAPPED_KEY.to_vec(),
                });
        }
        EvalMode::Dummy => {
            s = s
                .setup(Action::Advertise {
                    node: "mb".into(),
                    prefix: ITEM.into(),
                })
                .setup(Action::StoreContent {
                    node: "mb".into(),
                    name: ITEM.into(),
                    bytes: CONTENT.to_vec(),
                })
                .setup(Action::Advertise {
                    node: "pub".into(),
                    prefix: ITEM_KEY.into(),
                })
                .setup(Action::StoreContent {
                    node: "pub".into(),
                    name: ITEM_KEY.into(),
                    bytes: WRAPPED_KEY.to_vec(),
                });
        }
    }
    match mode {
        EvalMode::Dummy => s.at(
            0.0,
            Action::SubscribeDummy {
                node: "sub".into(),
                content: ITEM.into(),
                key: ITEM_KEY.into(),
            },
        ),
        _ => s.at(
            0.0,
            Action::Subscribe {
                node: "sub".into(),
                name: ITEM.into(),
                suites: crate::handshake::default_suites(),
                resume: false,
            },
        ),
    }
}

/// Two subscribers behind one middlebox, item stored only at the publisher:
/// the aggregation use case. One upstream flow feeds both downstream
/// sessions with independently encrypted copies.
pub fn fanout_topology(l: f64, alpha: f64) -> Topology {
    let mut t = Topology::new();
    t.add_node("sub1", NodeRole::Subscriber)
        .add_node("sub2", NodeRole::Subscriber)
        .add_node("mb", NodeRole::Middlebox)
        .add_node("pub", NodeRole::TrustedPublisher)
        .add_link("sub1", "mb", l)
        .add_link("sub2", "mb", l)
        .add_link("mb", "pub", alpha * l);
    t
}

pub fn fanout_scenario() -> Scenario {
    Scenario::new()
        .setup(Action::Advertise {
            node: "mb".into(),
            prefix: ITEM.into(),
        })
        .setup(Action::Advertise {
            node: "pub".into(),
            prefix: ITEM.into(),
        })
        .setup(Action::Advertise {
            node: "pub".into(),
            prefix: SIG_SERVICE.into(),
        })
        .setup(Action::StoreContent {
            node: "pub".into(),
            name: ITEM.into(),
            bytes: CONTENT.to_vec(),
        })
        .setup(Action::AllowMiddlebox {
            node: "pub".into(),
            middlebox: "mb".into(),
        })
        .setup(Action::PreEstablishChannel {
            middlebox: "mb".into(),
            publisher: "pub".into(),
            service: SIG_SERVICE.into(),
        })
        .at(
            0.0,
            Action::Subscribe {
                node: "sub1".into(),
                name: ITEM.into(),
                suites: crate::handshake::default_suites(),
                resume: false,
            },
        )
        .at(
            0.0,
            Action::Subscribe {
                node: "sub2".into(),
                name: ITEM.into(),
                suites: crate::handshake::default_suites(),
                resume: false,
            },
        )
}

/// Two group publishers behind a router. The handshake lands on the first;
/// after it withdraws, the resumption lands on the second, which can open
/// the ticket because it holds the same ring.
pub fn migration_topology() -> Topology {
    let mut t = Topology::new();
    t.add_node("sub", NodeRole::Subscriber)
        .add_node("r", NodeRole::Router)
        .add_node("pub-a", NodeRole::TrustedPublisher)
        .add_node("pub-b", NodeRole::TrustedPublisher)
        .add_link("sub", "r", 1.0)
        .add_link("r", "pub-a", 1.0)
        .add_link("r", "pub-b", 1.0);
    t
}

/// `member_b` controls whether the second publisher joins the ticket-key
/// group; a non-member cannot open the ticket and falls back to a full
/// handshake.
pub fn migration_scenario(member_b: bool) -> Scenario {
    let ring_nodes = if member_b {
        vec!["pub-a".to_string(), "pub-b".to_string()]
    } else {
        vec!["pub-a".to_string()]
    };
    let mut s = Scenario::new()
        .setup(Action::Advertise {
            node: "pub-a".into(),
            prefix: ITEM.into(),
        })
        .setup(Action::Advertise {
            node: "pub-b".into(),
            prefix: ITEM.into(),
        })
        .setup(Action::StoreContent {
            node: "pub-a".into(),
            name: ITEM.into(),
            bytes: CONTENT.to_vec(),
        })
        .setup(Action::StoreContent {
            node: "pub-b".into(),
            name: ITEM.into(),
            bytes: CONTENT.to_vec(),
        })
        .setup(Action::InstallTicketRing {
            nodes: ring_nodes,
            lifetime: crate::session::DEFAULT_TICKET_KEY_LIFETIME,
        });
    if !member_b {
        // Give the outsider its own ring so it can still answer (and fall
        // back) rather than having no ticket machinery at all.
        s = s.setup(Action::InstallTicketRing {
            nodes: vec!["pub-b".to_string()],
            lifetime: crate::session::DEFAULT_TICKET_KEY_LIFETIME,
        });
    }
    s.at(
        0.0,
        Action::Subscribe {
            node: "sub".into(),
            name: ITEM.into(),
            suites: crate::handshake::default_suites(),
            resume: false,
        },
    )
    .at(
        50.0,
        Action::Withdraw {
            node: "pub-a".into(),
            prefix: ITEM.into(),
        },
    )
    .at(
        60.0,
        Action::Subscribe {
            node: "sub".into(),
            name: ITEM.into(),
            suites: crate::handshake::default_suites(),
            resume: true,
        },
    )
}
