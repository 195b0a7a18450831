//! Per-session delegated signing: how a regular publisher (a cache or
//! replication point holding a trusted publisher's certificate but not its
//! key) completes handshakes for content it stores.
//!
//! The middlebox answers a subscriber hello by building the entire server
//! flight except the key-exchange signature, sending the to-be-signed bytes
//! to the trusted publisher over an established secure channel, and
//! splicing the returned signature in. The subscriber runs the unmodified
//! verification path and cannot tell the difference. The trusted publisher
//! sees every request, so it can refuse any session, keep access statistics,
//! and never reveals its signing key.

use crate::credentials::PublisherCertificate;
use crate::crypto::SigningKeyPair;
use crate::handshake::{
    finalize_flight, prepare_flight, publisher_complete, subscriber_process_flight,
    subscriber_start, subscriber_verify_finish, HandshakeError, HandshakeState, KeyExchangeTuple,
    Phase, PreparedFlight, StateStore, SubscriberConfig,
};
use crate::credentials::TrustStore;
use crate::names::{ContentName, HandshakeBinding};
use crate::session::EstablishedSession;
use crate::wire::{
    alert_codes, decode_payload, encode_payload, Alert, Direction, Envelope, EnvelopeFlags,
    Payload, SigRequest, SigResponse, TlvReader, TlvWriter, WireError, WireResult,
};
use rand::{CryptoRng, RngCore};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use thiserror::Error;

const F_POLICY_DENY: u16 = 0x0061;
const F_POLICY_ALLOW: u16 = 0x0062;
const F_POLICY_ENABLED: u16 = 0x0063;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MiddleboxError {
    #[error("content is neither cached nor fetchable upstream")]
    NoContent,
    #[error("no established channel to the trusted publisher")]
    NoUpstreamChannel,
    #[error("delegated signature does not verify against the held certificate")]
    BadDelegatedSignature,
    #[error("upstream record failed authentication")]
    UpstreamAuthFailure,
    #[error("no downstream session wants this flow")]
    NoDownstream,
    #[error("no pending flight matches")]
    UnknownPending,
    #[error(transparent)]
    Handshake(#[from] HandshakeError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

// ---------------------------------------------------------------------------
// Trusted-publisher side: policy, statistics, signing

/// What the trusted publisher is willing to sign for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SigningPolicy {
    /// Names under any of these prefixes are never delegated. Sensitive
    /// items (credentials, account data) belong here.
    pub deny_prefixes: Vec<Vec<String>>,
    /// Channel identities allowed to request signatures.
    pub allow_middleboxes: BTreeSet<[u8; 32]>,
    /// Master switch; disabled means no middlebox interception at all.
    pub enabled: bool,
}

impl SigningPolicy {
    pub fn allowing(middleboxes: impl IntoIterator<Item = [u8; 32]>) -> Self {
        SigningPolicy {
            deny_prefixes: Vec::new(),
            allow_middleboxes: middleboxes.into_iter().collect(),
            enabled: true,
        }
    }

    pub fn denies(&self, name: &ContentName) -> bool {
        self.deny_prefixes.iter().any(|p| name.starts_with(p))
    }
}

/// Per-prefix count of granted signature requests. Refusals never count.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct AccessStats {
    counts: BTreeMap<String, u64>,
}

impl AccessStats {
    pub fn record(&mut self, name: &ContentName) {
        *self.counts.entry(name.routable().as_str().to_string()).or_insert(0) += 1;
    }

    pub fn count(&self, prefix_text: &str) -> u64 {
        self.counts.get(prefix_text).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn counts(&self) -> &BTreeMap<String, u64> {
        &self.counts
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum SignRefusal {
    #[error("policy refuses to delegate this name")]
    Refused,
    #[error("requester is not an allowed middlebox")]
    UnknownMiddlebox,
}

/// Decide a signature request. The request must arrive over an
/// authenticated channel; `requester` is the channel-bound public key.
///
/// The to-be-signed bytes must parse as a key-exchange tuple whose
/// forwarding identifier matches the requested name; a signer that accepted
/// arbitrary bytes here would be an oracle for forging unrelated flights.
pub fn trusted_sign(
    keypair: &SigningKeyPair,
    request: &SigRequest,
    requester: &[u8; 32],
    policy: &SigningPolicy,
    stats: &mut AccessStats,
) -> Result<SigResponse, SignRefusal> {
    if !policy.allow_middleboxes.contains(requester) {
        return Err(SignRefusal::UnknownMiddlebox);
    }
    if !policy.enabled {
        return Err(SignRefusal::Refused);
    }
    let Some(tuple) = KeyExchangeTuple::parse(&request.to_be_signed) else {
        return Err(SignRefusal::Refused);
    };
    if tuple.forwarding_id != request.name.routable().as_bytes() {
        return Err(SignRefusal::Refused);
    }
    if policy.denies(&request.name) {
        return Err(SignRefusal::Refused);
    }
    let signature = keypair.sign(&tuple.digest());
    stats.record(&request.name);
    Ok(SigResponse { signature })
}

/// Policy file: a TLV list of deny prefixes and allowed middlebox keys,
/// terminated by the enabled flag.
pub fn encode_policy(policy: &SigningPolicy) -> WireResult<Vec<u8>> {
    let mut w = TlvWriter::new();
    for prefix in &policy.deny_prefixes {
        w.put(F_POLICY_DENY, prefix.join("/").as_bytes())?;
    }
    for key in &policy.allow_middleboxes {
        w.put_fixed(F_POLICY_ALLOW, key, 32)?;
    }
    w.put_bool(F_POLICY_ENABLED, policy.enabled)?;
    Ok(w.finish())
}

pub fn decode_policy(bytes: &[u8]) -> WireResult<SigningPolicy> {
    let mut r = TlvReader::new(bytes);
    let mut deny_prefixes = Vec::new();
    while r.peek_type() == Some(F_POLICY_DENY) {
        let text = r.expect_string(F_POLICY_DENY)?;
        let labels: Vec<String> = text.split('/').map(str::to_string).collect();
        crate::names::validate_prefix(&labels).map_err(|_| WireError::InvalidValue {
            field: F_POLICY_DENY,
            what: "invalid prefix labels",
        })?;
        deny_prefixes.push(labels);
    }
    let mut allow_middleboxes = BTreeSet::new();
    while r.peek_type() == Some(F_POLICY_ALLOW) {
        let key: [u8; 32] = r.expect_fixed(F_POLICY_ALLOW, 32)?.try_into().unwrap();
        allow_middleboxes.insert(key);
    }
    let enabled = r.expect_bool(F_POLICY_ENABLED)?;
    r.finish()?;
    Ok(SigningPolicy {
        deny_prefixes,
        allow_middleboxes,
        enabled,
    })
}

// ---------------------------------------------------------------------------
// Middlebox node

fn pending_key(binding: &HandshakeBinding) -> Vec<u8> {
    let mut key = Vec::with_capacity(1 + binding.value().len());
    key.push(match binding.kind() {
        crate::names::BindingKind::Nonce => 0,
        crate::names::BindingKind::SessionId => 1,
    });
    key.extend_from_slice(binding.value());
    key
}

/// A downstream flight waiting for its delegated signature.
pub struct PendingFlight {
    prepared: PreparedFlight,
    subscriber_wire_name: String,
    name: ContentName,
}

impl PendingFlight {
    pub fn to_be_signed(&self) -> Vec<u8> {
        self.prepared.tuple().encode()
    }

    pub fn name(&self) -> &ContentName {
        &self.name
    }
}

enum UpstreamPurpose {
    SigChannel,
    Content,
}

/// State of one middlebox: held certificate (but never the matching key),
/// its own channel identity, the signature channel, its content store and
/// every session it terminates.
pub struct MiddleboxNode {
    held_certificate: PublisherCertificate,
    keypair: SigningKeyPair,
    upstream_enabled: bool,
    upstream_channel: Option<EstablishedSession>,
    upstream_content: BTreeMap<String, EstablishedSession>,
    upstream_pending: BTreeMap<String, (HandshakeState, UpstreamPurpose)>,
    content_store: BTreeMap<String, Vec<u8>>,
    downstream_sessions: BTreeMap<[u8; 32], EstablishedSession>,
    store: StateStore,
    pending: BTreeMap<Vec<u8>, PendingFlight>,
    awaiting_signature: VecDeque<Vec<u8>>,
    queued_requests: VecDeque<Vec<u8>>,
    served: BTreeSet<[u8; 32]>,
    fetching: BTreeSet<String>,
}

impl MiddleboxNode {
    pub fn new(
        held_certificate: PublisherCertificate,
        keypair: SigningKeyPair,
        upstream_enabled: bool,
    ) -> Self {
        MiddleboxNode {
            held_certificate,
            keypair,
            upstream_enabled,
            upstream_channel: None,
            upstream_content: BTreeMap::new(),
            upstream_pending: BTreeMap::new(),
            content_store: BTreeMap::new(),
            downstream_sessions: BTreeMap::new(),
            store: StateStore::new(),
            pending: BTreeMap::new(),
            awaiting_signature: VecDeque::new(),
            queued_requests: VecDeque::new(),
            served: BTreeSet::new(),
            fetching: BTreeSet::new(),
        }
    }

    pub fn public_key(&self) -> [u8; 32] {
        self.keypair.public_key()
    }

    pub fn held_certificate(&self) -> &PublisherCertificate {
        &self.held_certificate
    }

    pub fn store_content(&mut self, name: &ContentName, bytes: Vec<u8>) {
        self.content_store.insert(name.routable().as_str().to_string(), bytes);
    }

    pub fn has_content(&self, name: &ContentName) -> bool {
        self.content_store.contains_key(name.routable().as_str())
    }

    pub fn content_for(&self, fid_text: &str) -> Option<Vec<u8>> {
        self.content_store.get(fid_text).cloned()
    }

    pub fn channel_established(&self) -> bool {
        self.upstream_channel.is_some()
    }

    pub fn downstream_session_count(&self) -> usize {
        self.downstream_sessions.len()
    }

    pub fn downstream_sessions(&self) -> impl Iterator<Item = (&[u8; 32], &EstablishedSession)> {
        self.downstream_sessions.iter()
    }

    /// Open the secure channel toward the trusted publisher's signing
    /// service. The middlebox authenticates itself by binding its key pair
    /// into the handshake finish.
    pub fn start_sig_channel<R: RngCore + CryptoRng>(
        &mut self,
        service_name: &ContentName,
        rng: &mut R,
    ) -> Result<Envelope, MiddleboxError> {
        let config = SubscriberConfig {
            channel_auth: Some(self.keypair.clone()),
            ..SubscriberConfig::new()
        };
        let (state, hello) = subscriber_start(service_name, config, rng)?;
        self.upstream_pending
            .insert(state.wire_name().to_string(), (state, UpstreamPurpose::SigChannel));
        Ok(hello)
    }

    /// Intercept a subscriber hello: build the flight minus its signature.
    /// When the item is not cached, also open our own upstream subscription
    /// for it, which is how one upstream flow comes to feed several
    /// downstream sessions.
    pub fn intercept_start<R: RngCore + CryptoRng>(
        &mut self,
        hello_env: &Envelope,
        rng: &mut R,
    ) -> Result<InterceptStart, MiddleboxError> {
        let prepared = prepare_flight(hello_env, &self.held_certificate, false, rng)?;
        let name = prepared.name().clone();
        let cached = self.has_content(&name);
        if !cached && !self.upstream_enabled {
            return Err(MiddleboxError::NoContent);
        }
        let binding = match &hello_env.payload {
            Payload::SubHello(h) => h.binding.clone(),
            _ => return Err(MiddleboxError::Handshake(HandshakeError::UnexpectedMessage)),
        };
        let key = pending_key(&binding);
        let upstream_subscription = if !cached
            && !self.fetching.contains(name.routable().as_str())
            && !self
                .upstream_content
                .values()
                .any(|s| s.name().routable() == name.routable())
        {
            let (state, hello) = subscriber_start(&name, SubscriberConfig::new(), rng)?;
            self.fetching.insert(name.routable().as_str().to_string());
            self.upstream_pending
                .insert(state.wire_name().to_string(), (state, UpstreamPurpose::Content));
            Some(hello)
        } else {
            None
        };
        self.pending.insert(
            key.clone(),
            PendingFlight {
                prepared,
                subscriber_wire_name: hello_env.wire_name.clone(),
                name,
            },
        );
        Ok(InterceptStart {
            pending: key,
            content_cached: cached,
            upstream_subscription,
        })
    }

    /// Seal the signature request for a pending flight into the upstream
    /// channel. One channel serves every subscriber.
    pub fn request_signature(&mut self, pending: &[u8]) -> Result<Envelope, MiddleboxError> {
        let flight = self.pending.get(pending).ok_or(MiddleboxError::UnknownPending)?;
        let channel = self
            .upstream_channel
            .as_mut()
            .ok_or(MiddleboxError::NoUpstreamChannel)?;
        let payload = Payload::SigRequest(SigRequest {
            name: flight.name.clone(),
            to_be_signed: flight.prepared.tuple().encode(),
        });
        let record = channel
            .seal_record(&encode_payload(&payload)?)
            .map_err(|_| MiddleboxError::NoUpstreamChannel)?;
        self.awaiting_signature.push_back(pending.to_vec());
        Ok(record)
    }

    /// Splice a delegated signature into its pending flight and emit the
    /// publication. The result is indistinguishable from a flight a trusted
    /// publisher would have produced itself.
    pub fn complete_intercepted(
        &mut self,
        pending: &[u8],
        response: &SigResponse,
    ) -> Result<Envelope, MiddleboxError> {
        let flight = self.pending.remove(pending).ok_or(MiddleboxError::UnknownPending)?;
        if !crate::handshake::verify_key_exchange_signature(
            &self.held_certificate.publisher_public_key,
            flight.prepared.tuple(),
            &response.signature,
        ) {
            return Err(MiddleboxError::BadDelegatedSignature);
        }
        let env = finalize_flight(&self.store, flight.prepared, response.signature.clone())?;
        Ok(env)
    }

    /// Complete a downstream handshake and, when the item is already in the
    /// content store, serve the first record immediately.
    pub fn handle_subscriber_finish<R: RngCore + CryptoRng>(
        &mut self,
        finish_env: &Envelope,
        now: u64,
        rng: &mut R,
    ) -> Result<Vec<Envelope>, MiddleboxError> {
        let (outcome, finish) = publisher_complete(&self.store, finish_env, None, now, rng)?;
        let sid = outcome.session_id;
        let name_text = outcome.name.routable().as_str().to_string();
        self.downstream_sessions.insert(sid, outcome.into_session());
        let mut out = vec![finish];
        if let Some(bytes) = self.content_store.get(&name_text).cloned() {
            let session = self.downstream_sessions.get_mut(&sid).expect("just inserted");
            let record = session.seal_record(&bytes).map_err(|_| MiddleboxError::NoDownstream)?;
            self.served.insert(sid);
            out.push(record);
        }
        Ok(out)
    }

    /// Open an upstream flow record, cache the plaintext, and re-encrypt it
    /// independently for every downstream session on the same name that has
    /// not been served yet.
    pub fn aggregate_and_fanout(
        &mut self,
        upstream_env: &Envelope,
    ) -> Result<Vec<Envelope>, MiddleboxError> {
        let session = self
            .upstream_content
            .get_mut(&upstream_env.wire_name)
            .ok_or(MiddleboxError::NoUpstreamChannel)?;
        let plaintext = session
            .open_record(upstream_env)
            .map_err(|_| MiddleboxError::UpstreamAuthFailure)?;
        let name_text = session.name().routable().as_str().to_string();
        self.content_store.insert(name_text.clone(), plaintext.clone());
        self.fetching.remove(&name_text);
        let mut out = Vec::new();
        for (sid, downstream) in self.downstream_sessions.iter_mut() {
            if downstream.name().routable().as_str() != name_text || self.served.contains(sid) {
                continue;
            }
            let record = downstream
                .seal_record(&plaintext)
                .map_err(|_| MiddleboxError::NoDownstream)?;
            self.served.insert(*sid);
            out.push(record);
        }
        if out.is_empty() && self.downstream_sessions.is_empty() {
            return Err(MiddleboxError::NoDownstream);
        }
        Ok(out)
    }

    /// Drive our own subscriber-side flows (signature channel and content
    /// fetches) with a publication arriving from upstream.
    pub fn handle_upstream_publication<R: RngCore + CryptoRng>(
        &mut self,
        env: &Envelope,
        trust: &TrustStore,
        now: u64,
        rng: &mut R,
    ) -> Result<Vec<Envelope>, MiddleboxError> {
        // Sealed records on the signature channel.
        if let Some(channel) = &self.upstream_channel {
            if channel.wire_name() == env.wire_name {
                return self.handle_channel_record(env);
            }
        }
        // Flow records on an upstream content session.
        if self.upstream_content.contains_key(&env.wire_name) {
            return self.aggregate_and_fanout(env);
        }
        // Otherwise it belongs to one of our pending handshakes.
        let Some((mut state, purpose)) = self.upstream_pending.remove(&env.wire_name) else {
            return Err(MiddleboxError::Handshake(HandshakeError::UnknownBinding));
        };
        match state.phase() {
            Phase::HelloSent => {
                let finish = subscriber_process_flight(&mut state, env, trust, now, rng)?;
                self.upstream_pending.insert(env.wire_name.clone(), (state, purpose));
                Ok(vec![finish])
            }
            Phase::FlightSent => {
                let session = subscriber_verify_finish(&mut state, env)?;
                let mut out = Vec::new();
                match purpose {
                    UpstreamPurpose::SigChannel => {
                        self.upstream_channel = Some(session);
                        while let Some(key) = self.queued_requests.pop_front() {
                            out.push(self.request_signature(&key)?);
                        }
                    }
                    UpstreamPurpose::Content => {
                        self.upstream_content.insert(env.wire_name.clone(), session);
                    }
                }
                Ok(out)
            }
            _ => Err(MiddleboxError::Handshake(HandshakeError::UnexpectedMessage)),
        }
    }

    fn handle_channel_record(&mut self, env: &Envelope) -> Result<Vec<Envelope>, MiddleboxError> {
        let channel = self.upstream_channel.as_mut().expect("caller checked");
        let plaintext = channel
            .open_record(env)
            .map_err(|_| MiddleboxError::UpstreamAuthFailure)?;
        let payload = decode_payload(&plaintext)?;
        let pending = self
            .awaiting_signature
            .pop_front()
            .ok_or(MiddleboxError::UnknownPending)?;
        match payload {
            Payload::SigResponse(response) => {
                let flight = self.complete_intercepted(&pending, &response)?;
                Ok(vec![flight])
            }
            Payload::Alert(alert) => {
                // Refusal: drop the pending flight and relay failure to the
                // subscriber so it does not wait forever.
                let flight = self
                    .pending
                    .remove(&pending)
                    .ok_or(MiddleboxError::UnknownPending)?;
                Ok(vec![Envelope {
                    direction: Direction::Publication,
                    wire_name: flight.subscriber_wire_name.clone(),
                    forwarding_id: flight.name.routable(),
                    flags: EnvelopeFlags::NON_CACHEABLE,
                    payload: Payload::Alert(Alert {
                        code: alert_codes::HANDSHAKE_FAILED,
                        reason: format!("delegated signature refused (code {})", alert.code),
                    }),
                }])
            }
            _ => Err(MiddleboxError::UpstreamAuthFailure),
        }
    }

    /// Entry point for a downstream hello: intercept, then either request
    /// the signature right away or queue until the channel is up.
    pub fn handle_subscriber_hello<R: RngCore + CryptoRng>(
        &mut self,
        hello_env: &Envelope,
        rng: &mut R,
    ) -> Result<Vec<Envelope>, MiddleboxError> {
        let start = self.intercept_start(hello_env, rng)?;
        let mut out = Vec::new();
        if let Some(upstream_hello) = start.upstream_subscription {
            out.push(upstream_hello);
        }
        if self.upstream_channel.is_some() {
            out.push(self.request_signature(&start.pending)?);
        } else if self.upstream_enabled {
            self.queued_requests.push_back(start.pending);
        } else {
            return Err(MiddleboxError::NoUpstreamChannel);
        }
        Ok(out)
    }

    /// Every byte blob this node holds, for the secret-containment scan.
    pub fn state_scan_bytes(&self) -> Vec<Vec<u8>> {
        let mut blobs = Vec::new();
        blobs.push(self.held_certificate.publisher_public_key.clone());
        blobs.push(self.held_certificate.owner_signature.clone());
        blobs.push(self.keypair.secret_bytes().to_vec());
        for bytes in self.content_store.values() {
            blobs.push(bytes.clone());
        }
        for session in self.downstream_sessions.values() {
            blobs.push(session.key_schedule().master_secret().to_vec());
        }
        if let Some(channel) = &self.upstream_channel {
            blobs.push(channel.key_schedule().master_secret().to_vec());
        }
        for session in self.upstream_content.values() {
            blobs.push(session.key_schedule().master_secret().to_vec());
        }
        blobs
    }
}

/// Result of intercepting a hello.
pub struct InterceptStart {
    /// Key identifying the pending flight awaiting its signature.
    pub pending: Vec<u8>,
    /// Whether the item was already in the content store.
    pub content_cached: bool,
    /// Our own upstream subscription for the item, when it must be fetched.
    pub upstream_subscription: Option<Envelope>,
}
