//! Command implementations behind the `icn-tls` binary: the latency
//! evaluation grid, the scenario demos and the key/certificate fixture
//! tooling. Everything here is also callable as a library, which is how
//! the test suites drive it.

use crate::credentials::{issue_certificate, CertError, OwnerKeyPair};
use crate::crypto::{fingerprint, SigningKeyPair};
use crate::names::ContentName;
use crate::simnet::scenario::{
    eval_scenario, eval_topology, fanout_scenario, fanout_topology, migration_scenario,
    migration_topology, CONTENT, ITEM,
};
use crate::simnet::{measure_first_byte, run, EvalMode, EventKind, Scenario, Topology, Trace};
use crate::wire::{
    decode_keypair_file, encode_certificate, encode_keypair_file, KeyPairFile, Payload,
};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or unusable input files; exit code 3.
    #[error("{0}")]
    Usage(String),
    /// A scenario ran but violated an invariant it must uphold; exit code 2.
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("write failure: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 3,
            CliError::Invariant(_) | CliError::Io(_) => 2,
        }
    }
}

fn ensure(cond: bool, what: &str) -> Result<(), CliError> {
    if cond {
        Ok(())
    } else {
        Err(CliError::Invariant(what.to_string()))
    }
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub latency_ms: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub alpha_step: f64,
    pub modes: Vec<EvalMode>,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            latency_ms: 1.0,
            alpha_min: 0.25,
            alpha_max: 4.0,
            alpha_step: 0.25,
            modes: vec![EvalMode::Dummy, EvalMode::Middlebox, EvalMode::Direct],
            seed: 7,
            out: PathBuf::from("eval.csv"),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.latency_ms.is_finite() && self.latency_ms > 0.0) {
            return Err(CliError::Usage(format!(
                "invalid range: L must be positive, got {}",
                self.latency_ms
            )));
        }
        if !(self.alpha_step.is_finite() && self.alpha_step > 0.0) {
            return Err(CliError::Usage(format!(
                "invalid range: alpha-step must be positive, got {}",
                self.alpha_step
            )));
        }
        if !(self.alpha_min.is_finite() && self.alpha_max.is_finite())
            || self.alpha_min > self.alpha_max
            || self.alpha_min < 0.0
        {
            return Err(CliError::Usage(format!(
                "invalid range: alpha in [{}, {}]",
                self.alpha_min, self.alpha_max
            )));
        }
        if self.modes.is_empty() {
            return Err(CliError::Usage("invalid range: no modes selected".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub alpha: f64,
    pub mode: EvalMode,
    pub delay_over_l: f64,
}

/// Simulate the configured grid; one row per (alpha, mode), delays reported
/// in multiples of L.
pub fn eval_rows(config: &EvalConfig) -> Result<Vec<EvalRow>, CliError> {
    config.validate()?;
    let mut alphas = Vec::new();
    let mut i = 0u32;
    loop {
        let alpha = config.alpha_min + f64::from(i) * config.alpha_step;
        if alpha > config.alpha_max + 1e-9 {
            break;
        }
        alphas.push(alpha);
        i += 1;
    }
    let mode_order = [EvalMode::Dummy, EvalMode::Middlebox, EvalMode::Direct];
    let mut rows = Vec::new();
    for &alpha in &alphas {
        for mode in mode_order {
            if !config.modes.contains(&mode) {
                continue;
            }
            let topology = eval_topology(config.latency_ms, alpha);
            let scenario = eval_scenario(mode, alpha);
            let trace = run(&topology, &scenario, config.seed)
                .map_err(|e| CliError::Invariant(format!("simulation failed: {e}")))?;
            let delay = measure_first_byte(&trace, "sub", ITEM)
                .map_err(|e| CliError::Invariant(e.to_string()))?;
            rows.push(EvalRow {
                alpha,
                mode,
                delay_over_l: delay / config.latency_ms,
            });
        }
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("alpha,mode,delay_over_L\n");
    for row in rows {
        out.push_str(&format!(
            "{:?},{},{:?}\n",
            row.alpha,
            row.mode.as_str(),
            row.delay_over_l
        ));
    }
    out
}

pub fn cmd_eval(config: &EvalConfig) -> Result<Vec<String>, CliError> {
    let rows = eval_rows(config)?;
    let csv = rows_to_csv(&rows);
    std::fs::write(&config.out, csv)?;
    Ok(vec![format!(
        "wrote {} rows to {}",
        rows.len(),
        config.out.display()
    )])
}

// ---------------------------------------------------------------------------
// demo

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DemoKind {
    Handshake,
    Migrate,
    Intercept,
    Compromise,
}

/// Run one scripted scenario, collect a human-readable transcript and check
/// the invariants it is meant to exhibit. Violations surface as
/// [`CliError::Invariant`] (exit code 2).
pub fn run_demo(
    kind: DemoKind,
    seed: u64,
    topology: Option<&Topology>,
) -> Result<Vec<String>, CliError> {
    match kind {
        DemoKind::Handshake => demo_handshake(seed, topology),
        DemoKind::Migrate => demo_migrate(seed),
        DemoKind::Intercept => demo_intercept(seed),
        DemoKind::Compromise => demo_compromise(seed),
    }
}

fn message_log(trace: &Trace, lines: &mut Vec<String>) {
    for ev in &trace.events {
        if ev.kind != EventKind::Deliver {
            continue;
        }
        lines.push(format!(
            "t={:>6.2}ms  {:<6} -> {:<6}  {}",
            ev.time_ms,
            ev.from,
            ev.to,
            ev.envelope.payload.type_name()
        ));
    }
}

fn demo_handshake(seed: u64, topology: Option<&Topology>) -> Result<Vec<String>, CliError> {
    let (topology, scenario, subscriber) = match topology {
        Some(t) => {
            let (scenario, sub) = custom_handshake_scenario(t)?;
            (t.clone(), scenario, sub)
        }
        None => (
            eval_topology(1.0, 1.0),
            eval_scenario(EvalMode::Direct, 1.0),
            "sub".to_string(),
        ),
    };
    let trace = run(&topology, &scenario, seed)
        .map_err(|e| CliError::Invariant(format!("simulation failed: {e}")))?;
    let mut lines = vec!["four-message handshake, direct subscriber to publisher".into()];
    message_log(&trace, &mut lines);
    let flow = trace
        .flow(&subscriber, ITEM)
        .ok_or_else(|| CliError::Invariant("flow missing from trace".into()))?;
    ensure(flow.established, "subscriber reached the established phase")?;
    ensure(flow.error.is_none(), "handshake completed without errors")?;
    ensure(
        flow.handshake_messages == 4,
        "handshake used exactly four messages",
    )?;
    let sub_fp = flow
        .key_fingerprint
        .clone()
        .ok_or_else(|| CliError::Invariant("subscriber derived no keys".into()))?;
    let pub_fp = trace
        .publisher_session_keys
        .values()
        .next()
        .cloned()
        .ok_or_else(|| CliError::Invariant("publisher derived no keys".into()))?;
    ensure(sub_fp == pub_fp, "both sides derived identical key schedules")?;
    ensure(
        !flow.plaintexts.is_empty() && flow.plaintexts[0] == CONTENT,
        "first content record decrypted",
    )?;
    lines.push(format!("key schedule fingerprint (subscriber): {sub_fp}"));
    lines.push(format!("key schedule fingerprint (publisher):  {pub_fp}"));
    lines.push("handshake demo passed".into());
    Ok(lines)
}

fn custom_handshake_scenario(topology: &Topology) -> Result<(Scenario, String), CliError> {
    use crate::simnet::scenario::Action;
    use crate::simnet::NodeRole;
    let subscriber = topology
        .nodes
        .iter()
        .find(|n| n.role == NodeRole::Subscriber)
        .map(|n| n.id.clone())
        .ok_or_else(|| CliError::Usage("topology has no subscriber node".into()))?;
    let publisher = topology
        .nodes
        .iter()
        .find(|n| n.role == NodeRole::TrustedPublisher)
        .map(|n| n.id.clone())
        .ok_or_else(|| CliError::Usage("topology has no trusted-publisher node".into()))?;
    let scenario = Scenario::new()
        .setup(Action::Advertise {
            node: publisher.clone(),
            prefix: ITEM.into(),
        })
        .setup(Action::StoreContent {
            node: publisher,
            name: ITEM.into(),
            bytes: CONTENT.to_vec(),
        })
        .at(
            0.0,
            Action::Subscribe {
                node: subscriber.clone(),
                name: ITEM.into(),
                suites: crate::handshake::default_suites(),
                resume: false,
            },
        );
    Ok((scenario, subscriber))
}

fn demo_migrate(seed: u64) -> Result<Vec<String>, CliError> {
    let topology = migration_topology();
    let trace = run(&topology, &migration_scenario(true), seed)
        .map_err(|e| CliError::Invariant(format!("simulation failed: {e}")))?;
    let mut lines = vec![
        "session migration: full handshake at pub-a, ticket resumption at pub-b".into(),
    ];
    message_log(&trace, &mut lines);
    let flow = trace
        .flow("sub", ITEM)
        .ok_or_else(|| CliError::Invariant("flow missing".into()))?;
    ensure(flow.established, "resumed session established")?;
    ensure(flow.resumed, "second handshake used the ticket")?;
    ensure(
        flow.handshake_messages == 2,
        "resumption used exactly two messages",
    )?;
    let original_fp = trace
        .publisher_session_keys
        .iter()
        .find(|((node, _), _)| node == "pub-a")
        .map(|(_, fp)| fp.clone())
        .ok_or_else(|| CliError::Invariant("no session recorded at pub-a".into()))?;
    let resumed_fp = trace
        .publisher_session_keys
        .iter()
        .find(|((node, _), _)| node == "pub-b")
        .map(|(_, fp)| fp.clone())
        .ok_or_else(|| CliError::Invariant("no session recorded at pub-b".into()))?;
    ensure(
        Some(&resumed_fp) == flow.key_fingerprint.as_ref(),
        "subscriber and pub-b agree on traffic keys",
    )?;
    ensure(
        resumed_fp != original_fp,
        "resumed traffic keys differ from the original session",
    )?;
    ensure(
        !flow.plaintexts.is_empty() && flow.plaintexts[0] == CONTENT,
        "content flows on the migrated session",
    )?;

    // A publisher outside the key group cannot open the ticket and must
    // fall back to a full handshake.
    let fallback_trace = run(&migration_topology(), &migration_scenario(false), seed + 1)
        .map_err(|e| CliError::Invariant(format!("simulation failed: {e}")))?;
    let fallback = fallback_trace
        .flow("sub", ITEM)
        .ok_or_else(|| CliError::Invariant("fallback flow missing".into()))?;
    ensure(fallback.established, "fallback still establishes")?;
    ensure(!fallback.resumed, "non-member cannot resume")?;
    ensure(
        fallback.handshake_messages == 4,
        "fallback takes the full four messages",
    )?;
    lines.push(format!("original session keys (pub-a): {original_fp}"));
    lines.push(format!("migrated session keys (pub-b): {resumed_fp}"));
    lines.push("non-member publisher fell back to a full handshake".into());
    lines.push("migrate demo passed".into());
    Ok(lines)
}

fn demo_intercept(seed: u64) -> Result<Vec<String>, CliError> {
    let topology = fanout_topology(1.0, 1.0);
    let trace = run(&topology, &fanout_scenario(), seed)
        .map_err(|e| CliError::Invariant(format!("simulation failed: {e}")))?;
    let mut lines = vec![
        "two subscribers intercepted by one middlebox, single upstream flow".into(),
    ];
    message_log(&trace, &mut lines);

    let upstream: Vec<&crate::simnet::SimEvent> = trace
        .events
        .iter()
        .filter(|ev| {
            ev.kind == EventKind::Deliver
                && ev.to == "mb"
                && ev.from == "pub"
                && matches!(ev.envelope.payload, Payload::DataRecord(_))
                && ev.envelope.direction == crate::wire::Direction::Publication
        })
        .collect();
    // One content record plus the sealed signature responses; count flows by
    // wire name instead of raw records.
    let mut upstream_flows: Vec<&str> = upstream
        .iter()
        .map(|ev| ev.envelope.wire_name.as_str())
        .collect();
    upstream_flows.sort_unstable();
    upstream_flows.dedup();

    let downstream: Vec<Vec<u8>> = trace
        .events
        .iter()
        .filter(|ev| {
            ev.kind == EventKind::Deliver
                && (ev.to == "sub1" || ev.to == "sub2")
                && matches!(&ev.envelope.payload, Payload::DataRecord(_))
        })
        .filter_map(|ev| match &ev.envelope.payload {
            Payload::DataRecord(r) => Some(r.ciphertext.clone()),
            _ => None,
        })
        .collect();

    let sub1 = trace
        .flow("sub1", ITEM)
        .ok_or_else(|| CliError::Invariant("sub1 flow missing".into()))?;
    let sub2 = trace
        .flow("sub2", ITEM)
        .ok_or_else(|| CliError::Invariant("sub2 flow missing".into()))?;
    ensure(sub1.established && sub2.established, "both subscribers established")?;
    ensure(
        upstream_flows.len() == 2,
        "exactly one upstream content flow plus the signature channel",
    )?;
    ensure(downstream.len() == 2, "exactly two downstream record deliveries")?;
    ensure(
        downstream[0] != downstream[1],
        "downstream ciphertexts are pairwise unequal",
    )?;
    ensure(
        sub1.plaintexts == vec![CONTENT.to_vec()] && sub2.plaintexts == vec![CONTENT.to_vec()],
        "both subscribers decrypted the same plaintext",
    )?;
    let stats = trace
        .stats
        .get("pub")
        .ok_or_else(|| CliError::Invariant("publisher stats missing".into()))?;
    ensure(
        stats.count(ITEM) == 2,
        "access statistics count both granted signatures",
    )?;
    let tp_key = trace
        .publisher_signing_keys
        .get("pub")
        .ok_or_else(|| CliError::Invariant("publisher key witness missing".into()))?;
    for blob in trace.wire_bytes() {
        ensure(
            !contains_subsequence(&blob, tp_key),
            "publisher signing key never crosses the network",
        )?;
    }
    for blob in trace.middlebox_state_blobs.values().flatten() {
        ensure(
            !contains_subsequence(blob, tp_key),
            "publisher signing key never enters middlebox state",
        )?;
    }
    lines.push(format!(
        "signature requests granted for {}: {}",
        ITEM,
        stats.count(ITEM)
    ));
    lines.push("intercept demo passed".into());
    Ok(lines)
}

fn contains_subsequence(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty()
        && needle.len() <= haystack.len()
        && haystack.windows(needle.len()).any(|w| w == needle)
}

fn demo_compromise(seed: u64) -> Result<Vec<String>, CliError> {
    use crate::credentials::TrustStore;
    use crate::handshake::{
        publisher_complete, publisher_respond, subscriber_process_flight, subscriber_start,
        subscriber_verify_finish, KeySchedule, LocalSigner, StateStore, SubscriberConfig,
    };
    use crate::session::{recover_master_secret, TicketKey};

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut lines = vec![
        "ticket-key compromise: stolen group key reveals ticketed sessions only".into(),
    ];

    let owner = OwnerKeyPair::generate("owner", &mut rng);
    let mut trust = TrustStore::new();
    trust.insert("owner".into(), owner.public_key());
    let publisher_keys = SigningKeyPair::generate(&mut rng);
    let cert = issue_certificate(
        &owner,
        &publisher_keys.public_key(),
        vec![vec!["item".into()]],
        0,
        1 << 40,
    )
    .map_err(|e| CliError::Invariant(e.to_string()))?;
    let name = ContentName::parse("item/video").expect("valid name");
    let ticket_key = TicketKey::generate(0, 43_200, &mut rng);
    let store = StateStore::new();
    let signer = LocalSigner::new(&publisher_keys);

    // Ticketed session: handshake, ticket issued, one record captured.
    let (mut hs, hello) =
        subscriber_start(&name, SubscriberConfig::new(), &mut rng).map_err(invariant)?;
    let flight = publisher_respond(&store, &hello, &cert, &signer, &mut rng).map_err(invariant)?;
    let finish = subscriber_process_flight(&mut hs, &flight, &trust, 100, &mut rng)
        .map_err(invariant)?;
    let (outcome, closing) =
        publisher_complete(&store, &finish, Some(&ticket_key), 100, &mut rng).map_err(invariant)?;
    let mut publisher_session = outcome.into_session();
    let subscriber_session = subscriber_verify_finish(&mut hs, &closing).map_err(invariant)?;
    let captured_record = publisher_session
        .seal_record(b"episode one, as captured off the wire")
        .map_err(|e| CliError::Invariant(e.to_string()))?;
    let ticket = subscriber_session
        .resumption_ticket()
        .ok_or_else(|| CliError::Invariant("no ticket issued".into()))?
        .ticket
        .clone();

    // Non-ticketed control session.
    let (mut hs2, hello2) =
        subscriber_start(&name, SubscriberConfig::new(), &mut rng).map_err(invariant)?;
    let flight2 =
        publisher_respond(&store, &hello2, &cert, &signer, &mut rng).map_err(invariant)?;
    let finish2 = subscriber_process_flight(&mut hs2, &flight2, &trust, 100, &mut rng)
        .map_err(invariant)?;
    let (outcome2, closing2) =
        publisher_complete(&store, &finish2, None, 100, &mut rng).map_err(invariant)?;
    let mut publisher_session2 = outcome2.into_session();
    let subscriber_session2 = subscriber_verify_finish(&mut hs2, &closing2).map_err(invariant)?;
    ensure(
        subscriber_session2.resumption_ticket().is_none(),
        "control session has no ticket",
    )?;
    let control_record = publisher_session2
        .seal_record(b"episode two, never ticketed")
        .map_err(|e| CliError::Invariant(e.to_string()))?;

    // The attacker holds: the stolen ticket key, plus everything that
    // crossed the network (the ticket and the records).
    let stolen = ticket_key.clone();
    let master = recover_master_secret(&ticket, &stolen)
        .map_err(|e| CliError::Invariant(format!("recovery failed: {e}")))?;
    ensure(
        &master == subscriber_session.key_schedule().master_secret(),
        "recovered master secret matches the ticketed session",
    )?;
    let rebuilt = KeySchedule::from_master(master, subscriber_session.suite());
    ensure(
        &rebuilt == subscriber_session.key_schedule(),
        "full key schedule rebuilt from the ticket alone",
    )?;
    let mut attacker_view = crate::session::EstablishedSession::from_recovered_keys(
        crate::session::Role::Subscriber,
        name.clone(),
        subscriber_session.wire_name().to_string(),
        subscriber_session.suite(),
        rebuilt,
    );
    let plaintext = attacker_view
        .open_record(&captured_record)
        .map_err(|e| CliError::Invariant(format!("captured record not readable: {e}")))?;
    lines.push(format!(
        "recovered master secret fingerprint: {}",
        fingerprint(&master)
    ));
    lines.push(format!(
        "decrypted captured record: {:?}",
        String::from_utf8_lossy(&plaintext)
    ));

    // The non-ticketed session must stay opaque: the stolen key opens no
    // ticket for it, and its keys cannot be rebuilt from public material.
    let mut control_view = crate::session::EstablishedSession::from_recovered_keys(
        crate::session::Role::Subscriber,
        name.clone(),
        subscriber_session2.wire_name().to_string(),
        subscriber_session2.suite(),
        KeySchedule::from_master(master, subscriber_session2.suite()),
    );
    ensure(
        control_view.open_record(&control_record).is_err(),
        "non-ticketed session stays unreadable",
    )?;
    lines.push("non-ticketed session remained forward secret".into());
    lines.push("compromise demo passed".into());
    Ok(lines)
}

fn invariant(e: impl std::fmt::Display) -> CliError {
    CliError::Invariant(e.to_string())
}

// ---------------------------------------------------------------------------
// keys

pub enum KeysCommand {
    GenOwner {
        id: String,
        seed: Option<u64>,
        out: PathBuf,
        force: bool,
    },
    IssueCert {
        owner_key: PathBuf,
        publisher_key: PathBuf,
        prefixes: Vec<String>,
        not_before: u64,
        not_after: u64,
        out: PathBuf,
        force: bool,
    },
}

fn write_fixture(path: &Path, bytes: &[u8], force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Usage(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn cmd_keys(command: KeysCommand) -> Result<Vec<String>, CliError> {
    match command {
        KeysCommand::GenOwner { id, seed, out, force } => {
            let keypair = match seed {
                Some(seed) => SigningKeyPair::generate(&mut ChaCha20Rng::seed_from_u64(seed)),
                None => {
                    let mut seed_bytes = [0u8; 32];
                    rand::rngs::OsRng.fill_bytes(&mut seed_bytes);
                    SigningKeyPair::from_seed(&seed_bytes)
                }
            };
            let file = KeyPairFile {
                id: id.clone(),
                public: keypair.public_key(),
                private: keypair.secret_bytes(),
            };
            let bytes = encode_keypair_file(&file)
                .map_err(|e| CliError::Usage(format!("encoding key file: {e}")))?;
            write_fixture(&out, &bytes, force)?;
            Ok(vec![format!(
                "wrote key pair {:?} (public {}) to {}",
                id,
                fingerprint(&keypair.public_key()),
                out.display()
            )])
        }
        KeysCommand::IssueCert {
            owner_key,
            publisher_key,
            prefixes,
            not_before,
            not_after,
            out,
            force,
        } => {
            let owner_bytes = std::fs::read(&owner_key).map_err(|_| {
                CliError::Usage(format!("missing owner key file {}", owner_key.display()))
            })?;
            let owner_file = decode_keypair_file(&owner_bytes)
                .map_err(|e| CliError::Usage(format!("unreadable owner key file: {e}")))?;
            let publisher_bytes = std::fs::read(&publisher_key).map_err(|_| {
                CliError::Usage(format!(
                    "missing publisher key file {}",
                    publisher_key.display()
                ))
            })?;
            let publisher_file = decode_keypair_file(&publisher_bytes)
                .map_err(|e| CliError::Usage(format!("unreadable publisher key file: {e}")))?;
            let owner = OwnerKeyPair::new(
                owner_file.id.clone(),
                SigningKeyPair::from_seed(&owner_file.private),
            );
            let prefix_labels: Vec<Vec<String>> = prefixes
                .iter()
                .map(|p| p.split('/').map(str::to_string).collect())
                .collect();
            let cert = issue_certificate(
                &owner,
                &publisher_file.public,
                prefix_labels,
                not_before,
                not_after,
            )
            .map_err(|e| match e {
                CertError::EmptyAuthorization | CertError::InvalidValidityWindow => {
                    CliError::Usage(e.to_string())
                }
                other => CliError::Usage(other.to_string()),
            })?;
            let bytes = encode_certificate(&cert)
                .map_err(|e| CliError::Usage(format!("encoding certificate: {e}")))?;
            write_fixture(&out, &bytes, force)?;
            Ok(vec![format!(
                "issued certificate for {} prefixes to {}",
                cert.authorized_prefixes.len(),
                out.display()
            )])
        }
    }
}
