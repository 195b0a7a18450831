//! The four-message handshake between a subscriber and a publisher, and the
//! key schedule both sides derive from it.
//!
//! Message flow (two subscriptions, two publications):
//!
//! 1. subscription, hello: client random, offered suites, correlation binding
//! 2. publication, server flight: server random, certificate, ephemeral key
//!    share, signature over the key-exchange tuple, session id
//! 3. subscription, finish: subscriber ephemeral share, finished MAC
//! 4. publication, finish: publisher finished MAC, optional session ticket
//!
//! The signature in message 2 covers
//! `hash(client_random || server_random || ephemeral_public || suite || forwarding_id)`,
//! so it binds the publisher's key share to this session without requiring
//! the signer to have seen the rest of the transcript. That is what lets a
//! delegated signer produce it remotely.
//!
//! Key exchange is ephemeral-only: the suite registry cannot express a
//! static-key exchange. All handshake subscriptions are flagged
//! non-aggregatable and all handshake publications non-cacheable; receivers
//! reject messages with the flag missing.

use crate::credentials::{authorizes, verify_with_trust_store, CertError, PublisherCertificate, TrustStore};
use crate::crypto::{
    fingerprint, hkdf_expand, hkdf_extract_expand, hmac_sha256, sha256, verify_signature,
    AeadAlgorithm, EphemeralShare, SigningKeyPair,
};
use crate::names::{
    bind_subscription, unbind_wire_name, BindingKind, ContentName, HandshakeBinding,
};
use crate::session::{
    issue_ticket_parts, EstablishedSession, Role, StoredTicket, TicketError, TicketKey,
};
use crate::wire::{
    encode_payload, pub_finish_trailer_bytes, ChannelBinding, Direction, Envelope, EnvelopeFlags,
    Payload, PubFinish, PubHello, SubFinish, SubHello, WireError,
};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::sync::Mutex;
use thiserror::Error;
use zeroize::{Zeroize, ZeroizeOnDrop};

pub const MASTER_SECRET_LEN: usize = 48;
pub const IV_LEN: usize = 12;
pub const FINISHED_MAC_LEN: usize = 32;

const CHANNEL_BINDING_CONTEXT: &[u8] = b"icn channel binding";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HandshakeError {
    #[error("offered suite 0x{0:04x} does not use ephemeral key exchange")]
    NoEphemeralSuite(u16),
    #[error("certificate does not authorize this publisher for the requested name")]
    NotAuthorized,
    #[error("no offered suite is supported")]
    NoCommonSuite,
    #[error("delegated signer refused the request")]
    SignerRefused,
    #[error("certificate rejected: {0}")]
    BadCertificate(#[from] CertError),
    #[error("certificate valid but does not cover the requested name")]
    NotAuthorizedForName,
    #[error("key-exchange signature does not verify")]
    BadTranscriptSignature,
    #[error("negotiated suite is unusable or was never offered")]
    SuiteMismatch,
    #[error("no handshake state for this binding")]
    UnknownBinding,
    #[error("finished MAC does not verify")]
    BadFinishedMac,
    #[error("key agreement produced an all-zero secret")]
    ZeroSharedSecret,
    #[error("wire name does not match the handshake binding")]
    BindingMismatch,
    #[error("message not valid in the current phase")]
    UnexpectedMessage,
    #[error("channel binding signature does not verify")]
    BadChannelBinding,
    #[error("malformed handshake message: {0}")]
    MalformedMessage(&'static str),
    #[error("ticket issuance failed: {0}")]
    Ticket(#[from] TicketError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

type Result<T> = std::result::Result<T, HandshakeError>;

// ---------------------------------------------------------------------------
// Cipher suites

pub const SUITE_X25519_AES128GCM_SHA256: u16 = 0x1301;
pub const SUITE_X25519_AES128CTR_HMACSHA256: u16 = 0x13F1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KexGroup {
    X25519,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HashAlgorithm {
    Sha256,
}

/// A negotiable suite. The key-exchange field can only name ephemeral
/// Diffie-Hellman groups; static-key suites are unrepresentable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CipherSuite {
    pub id: u16,
    pub kex: KexGroup,
    pub aead: AeadAlgorithm,
    pub hash: HashAlgorithm,
}

static SUITES: &[CipherSuite] = &[
    CipherSuite {
        id: SUITE_X25519_AES128GCM_SHA256,
        kex: KexGroup::X25519,
        aead: AeadAlgorithm::Aes128Gcm,
        hash: HashAlgorithm::Sha256,
    },
    CipherSuite {
        id: SUITE_X25519_AES128CTR_HMACSHA256,
        kex: KexGroup::X25519,
        aead: AeadAlgorithm::Aes128CtrHmacSha256,
        hash: HashAlgorithm::Sha256,
    },
];

pub fn suite_by_id(id: u16) -> Option<&'static CipherSuite> {
    SUITES.iter().find(|s| s.id == id)
}

pub fn default_suites() -> Vec<u16> {
    vec![SUITE_X25519_AES128GCM_SHA256]
}

// ---------------------------------------------------------------------------
// Key schedule

/// Directional traffic keys derived from one handshake.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct KeySchedule {
    master_secret: [u8; MASTER_SECRET_LEN],
    subscriber_write_key: Vec<u8>,
    publisher_write_key: Vec<u8>,
    subscriber_iv: [u8; IV_LEN],
    publisher_iv: [u8; IV_LEN],
    hmac_key: Option<[u8; 32]>,
}

impl KeySchedule {
    /// Expand the directional keys from a master secret. Anyone holding the
    /// master secret (a resuming publisher, or whoever stole the ticket key
    /// that sealed it) can reproduce the schedule this way.
    pub fn from_master(master_secret: [u8; MASTER_SECRET_LEN], suite: &CipherSuite) -> Self {
        let key_len = suite.aead.key_len();
        let mut subscriber_write_key = vec![0u8; key_len];
        let mut publisher_write_key = vec![0u8; key_len];
        let mut subscriber_iv = [0u8; IV_LEN];
        let mut publisher_iv = [0u8; IV_LEN];
        hkdf_expand(&master_secret, &[b"sub write"], &mut subscriber_write_key);
        hkdf_expand(&master_secret, &[b"pub write"], &mut publisher_write_key);
        hkdf_expand(&master_secret, &[b"sub iv"], &mut subscriber_iv);
        hkdf_expand(&master_secret, &[b"pub iv"], &mut publisher_iv);
        let hmac_key = suite.aead.requires_hmac_key().then(|| {
            let mut k = [0u8; 32];
            hkdf_expand(&master_secret, &[b"record hmac"], &mut k);
            k
        });
        KeySchedule {
            master_secret,
            subscriber_write_key,
            publisher_write_key,
            subscriber_iv,
            publisher_iv,
            hmac_key,
        }
    }

    pub fn master_secret(&self) -> &[u8; MASTER_SECRET_LEN] {
        &self.master_secret
    }

    pub(crate) fn write_key(&self, role: Role) -> &[u8] {
        match role {
            Role::Subscriber => &self.subscriber_write_key,
            Role::Publisher => &self.publisher_write_key,
        }
    }

    pub(crate) fn iv(&self, role: Role) -> &[u8; IV_LEN] {
        match role {
            Role::Subscriber => &self.subscriber_iv,
            Role::Publisher => &self.publisher_iv,
        }
    }

    pub(crate) fn hmac_key(&self) -> Option<&[u8; 32]> {
        self.hmac_key.as_ref()
    }

    /// Stable short fingerprint over every field, for logs and agreement
    /// checks that should not print key bytes.
    pub fn fingerprint(&self) -> String {
        let mut all = Vec::new();
        all.extend_from_slice(&self.master_secret);
        all.extend_from_slice(&self.subscriber_write_key);
        all.extend_from_slice(&self.publisher_write_key);
        all.extend_from_slice(&self.subscriber_iv);
        all.extend_from_slice(&self.publisher_iv);
        if let Some(k) = &self.hmac_key {
            all.extend_from_slice(k);
        }
        fingerprint(&all)
    }
}

impl std::fmt::Debug for KeySchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "KeySchedule({})", self.fingerprint())
    }
}

/// Derive the full schedule from the ephemeral shared secret, both randoms
/// and the transcript hash at the end of the server flight.
pub fn derive_keys(
    shared_secret: &[u8],
    client_random: &[u8; 32],
    server_random: &[u8; 32],
    transcript_hash: &[u8; 32],
    suite: &CipherSuite,
) -> Result<KeySchedule> {
    if shared_secret.iter().all(|&b| b == 0) {
        return Err(HandshakeError::ZeroSharedSecret);
    }
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(client_random);
    salt[32..].copy_from_slice(server_random);
    let mut master = [0u8; MASTER_SECRET_LEN];
    hkdf_extract_expand(&salt, shared_secret, &[b"icn master", transcript_hash], &mut master);
    Ok(KeySchedule::from_master(master, suite))
}

pub(crate) fn finished_mac(
    master: &[u8; MASTER_SECRET_LEN],
    role: Role,
    transcript_hash: &[u8; 32],
    trailer: &[u8],
) -> [u8; FINISHED_MAC_LEN] {
    let label: &[u8] = match role {
        Role::Subscriber => b"sub finished",
        Role::Publisher => b"pub finished",
    };
    let mut key = [0u8; 32];
    hkdf_expand(master, &[label], &mut key);
    hmac_sha256(&key, &[transcript_hash, trailer])
}

// ---------------------------------------------------------------------------
// Key-exchange tuple and signers

/// The signed portion of the server flight. Carried verbatim in delegated
/// signature requests so the signer can inspect what it is signing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyExchangeTuple {
    pub client_random: [u8; 32],
    pub server_random: [u8; 32],
    pub ephemeral_public: [u8; 32],
    pub suite_id: u16,
    pub forwarding_id: Vec<u8>,
}

impl KeyExchangeTuple {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(98 + self.forwarding_id.len());
        out.extend_from_slice(&self.client_random);
        out.extend_from_slice(&self.server_random);
        out.extend_from_slice(&self.ephemeral_public);
        out.extend_from_slice(&self.suite_id.to_be_bytes());
        out.extend_from_slice(&self.forwarding_id);
        out
    }

    /// Parse tuple bytes back into fields; used by signers that refuse to
    /// sign anything without this structure.
    pub fn parse(bytes: &[u8]) -> Option<Self> {
        if bytes.len() <= 98 {
            return None;
        }
        Some(KeyExchangeTuple {
            client_random: bytes[0..32].try_into().unwrap(),
            server_random: bytes[32..64].try_into().unwrap(),
            ephemeral_public: bytes[64..96].try_into().unwrap(),
            suite_id: u16::from_be_bytes([bytes[96], bytes[97]]),
            forwarding_id: bytes[98..].to_vec(),
        })
    }

    /// What actually gets signed: the digest of the encoded tuple.
    pub fn digest(&self) -> [u8; 32] {
        sha256(&self.encode())
    }
}

pub fn verify_key_exchange_signature(
    publisher_public_key: &[u8],
    tuple: &KeyExchangeTuple,
    signature: &[u8],
) -> bool {
    verify_signature(publisher_public_key, &tuple.digest(), signature)
}

/// Produces the server-flight signature. Direct publishers sign locally; a
/// middlebox fulfils this step with a round trip to the trusted publisher
/// instead, using the prepare/finalize split below.
pub trait TranscriptSigner {
    fn sign_key_exchange(&self, tuple: &KeyExchangeTuple) -> std::result::Result<Vec<u8>, SignerRefusal>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignerRefusal;

pub struct LocalSigner<'a> {
    keypair: &'a SigningKeyPair,
}

impl<'a> LocalSigner<'a> {
    pub fn new(keypair: &'a SigningKeyPair) -> Self {
        LocalSigner { keypair }
    }
}

impl TranscriptSigner for LocalSigner<'_> {
    fn sign_key_exchange(&self, tuple: &KeyExchangeTuple) -> std::result::Result<Vec<u8>, SignerRefusal> {
        Ok(self.keypair.sign(&tuple.digest()))
    }
}

// ---------------------------------------------------------------------------
// Handshake state

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Start,
    HelloSent,
    FlightSent,
    Established,
    Failed,
}

#[derive(Clone)]
pub(crate) struct Transcript {
    hasher: Sha256,
}

impl Transcript {
    fn new() -> Self {
        Transcript { hasher: Sha256::new() }
    }

    fn absorb(&mut self, bytes: &[u8]) {
        self.hasher.update(bytes);
    }

    fn hash(&self) -> [u8; 32] {
        self.hasher.clone().finalize().into()
    }
}

/// Per-session state for one side of a handshake. Phases only move forward;
/// the first verification failure parks the state in `Failed` permanently.
pub struct HandshakeState {
    role: Role,
    phase: Phase,
    name: ContentName,
    wire_name: String,
    binding: HandshakeBinding,
    offered_suites: Vec<u16>,
    suite: Option<&'static CipherSuite>,
    client_random: [u8; 32],
    server_random: Option<[u8; 32]>,
    session_id: Option<[u8; 32]>,
    transcript: Transcript,
    th_flight: Option<[u8; 32]>,
    th_finish: Option<[u8; 32]>,
    ephemeral: Option<EphemeralShare>,
    schedule: Option<KeySchedule>,
    resume: Option<StoredTicket>,
    channel_auth: Option<SigningKeyPair>,
}

impl HandshakeState {
    pub fn role(&self) -> Role {
        self.role
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn name(&self) -> &ContentName {
        &self.name
    }

    pub fn wire_name(&self) -> &str {
        &self.wire_name
    }

    pub fn binding(&self) -> &HandshakeBinding {
        &self.binding
    }

    pub fn session_id(&self) -> Option<[u8; 32]> {
        self.session_id
    }

    pub fn offered_ticket(&self) -> bool {
        self.resume.is_some()
    }

    /// True while the state still holds an unconsumed ephemeral secret.
    /// Completed and failed states must not.
    pub fn retains_ephemeral(&self) -> bool {
        self.ephemeral.is_some()
    }

    pub(crate) fn transcript_hash(&self) -> [u8; 32] {
        self.transcript.hash()
    }

    pub(crate) fn resume_ticket(&self) -> Option<&StoredTicket> {
        self.resume.as_ref()
    }

    pub(crate) fn client_random(&self) -> &[u8; 32] {
        &self.client_random
    }

    fn fail<T>(&mut self, err: HandshakeError) -> Result<T> {
        self.phase = Phase::Failed;
        self.ephemeral = None;
        self.schedule = None;
        Err(err)
    }

    pub(crate) fn mark_failed<T>(&mut self, err: HandshakeError) -> Result<T> {
        self.fail(err)
    }

    pub(crate) fn mark_established(&mut self) {
        self.phase = Phase::Established;
        self.ephemeral = None;
    }
}

impl std::fmt::Debug for HandshakeState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HandshakeState")
            .field("role", &self.role)
            .field("phase", &self.phase)
            .field("wire_name", &self.wire_name)
            .field("binding", &self.binding)
            .field("ephemeral", &self.ephemeral.as_ref().map(|_| "<held>"))
            .finish_non_exhaustive()
    }
}

// ---------------------------------------------------------------------------
// State store

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum CorrKey {
    Nonce([u8; 16]),
    Session([u8; 32]),
}

fn corr_key(binding: &HandshakeBinding) -> CorrKey {
    match binding.kind() {
        BindingKind::Nonce => CorrKey::Nonce(binding.value().try_into().expect("16-byte nonce")),
        BindingKind::SessionId => {
            CorrKey::Session(binding.value().try_into().expect("32-byte session id"))
        }
    }
}

/// Publisher-side map from correlation key (nonce or session id) to pending
/// handshake state. Completed and failed states are evicted, so a replayed
/// finish finds nothing.
#[derive(Default)]
pub struct StateStore {
    inner: Mutex<StoreInner>,
}

#[derive(Default)]
struct StoreInner {
    states: HashMap<CorrKey, (HandshakeState, Option<CorrKey>)>,
    aliases: HashMap<CorrKey, CorrKey>,
}

impl StateStore {
    pub fn new() -> Self {
        StateStore::default()
    }

    fn insert(&self, primary: CorrKey, alias: Option<CorrKey>, state: HandshakeState) {
        let mut inner = self.inner.lock().unwrap();
        if let Some((_, old_alias)) = inner.states.remove(&primary) {
            if let Some(a) = old_alias {
                inner.aliases.remove(&a);
            }
        }
        if let Some(a) = alias.clone() {
            inner.aliases.insert(a, primary.clone());
        }
        inner.states.insert(primary, (state, alias));
    }

    fn take(&self, key: &CorrKey) -> Option<HandshakeState> {
        let mut inner = self.inner.lock().unwrap();
        let primary = inner.aliases.get(key).cloned().unwrap_or_else(|| key.clone());
        let (state, alias) = inner.states.remove(&primary)?;
        if let Some(a) = alias {
            inner.aliases.remove(&a);
        }
        Some(state)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---------------------------------------------------------------------------
// Envelope validation helpers

fn require_subscription(env: &Envelope) -> Result<()> {
    if env.direction != Direction::Subscription {
        return Err(HandshakeError::MalformedMessage("expected a subscription"));
    }
    if !env.flags.contains(EnvelopeFlags::NON_AGGREGATABLE) {
        return Err(HandshakeError::MalformedMessage(
            "handshake subscription missing non-aggregatable flag",
        ));
    }
    Ok(())
}

fn require_publication(env: &Envelope) -> Result<()> {
    if env.direction != Direction::Publication {
        return Err(HandshakeError::MalformedMessage("expected a publication"));
    }
    if !env.flags.contains(EnvelopeFlags::NON_CACHEABLE) {
        return Err(HandshakeError::MalformedMessage(
            "handshake publication missing non-cacheable flag",
        ));
    }
    Ok(())
}

fn handshake_subscription(wire_name: &str, name: &ContentName, payload: Payload) -> Envelope {
    Envelope {
        direction: Direction::Subscription,
        wire_name: wire_name.to_string(),
        forwarding_id: name.routable(),
        flags: EnvelopeFlags::NON_AGGREGATABLE,
        payload,
    }
}

pub(crate) fn handshake_publication(
    wire_name: &str,
    name: &ContentName,
    payload: Payload,
) -> Envelope {
    Envelope {
        direction: Direction::Publication,
        wire_name: wire_name.to_string(),
        forwarding_id: name.routable(),
        flags: EnvelopeFlags::NON_CACHEABLE,
        payload,
    }
}

// ---------------------------------------------------------------------------
// Subscriber side

/// Everything a subscriber needs to open a session.
#[derive(Default)]
pub struct SubscriberConfig {
    pub suites: Vec<u16>,
    pub use_nonce: bool,
    /// Offer this ticket for an abbreviated handshake.
    pub ticket: Option<StoredTicket>,
    /// Authenticate ourselves to the publisher by binding this key pair into
    /// the finish. Used on middlebox-to-publisher service channels.
    pub channel_auth: Option<SigningKeyPair>,
}

impl SubscriberConfig {
    pub fn new() -> Self {
        SubscriberConfig {
            suites: default_suites(),
            use_nonce: true,
            ticket: None,
            channel_auth: None,
        }
    }
}

/// Build the opening subscription and the state that tracks it.
pub fn subscriber_start<R: RngCore + CryptoRng>(
    name: &ContentName,
    config: SubscriberConfig,
    rng: &mut R,
) -> Result<(HandshakeState, Envelope)> {
    if config.suites.is_empty() {
        return Err(HandshakeError::NoCommonSuite);
    }
    for id in &config.suites {
        if suite_by_id(*id).is_none() {
            return Err(HandshakeError::NoEphemeralSuite(*id));
        }
    }
    let mut client_random = [0u8; 32];
    rng.fill_bytes(&mut client_random);
    let (binding, wire_name) = if config.use_nonce {
        let binding = HandshakeBinding::fresh_nonce(rng);
        let wire_name = bind_subscription(name, &binding).expect("nonce binding");
        (binding, wire_name)
    } else {
        (
            HandshakeBinding::unassigned_session(),
            name.routable().as_str().to_string(),
        )
    };
    let payload = Payload::SubHello(SubHello {
        client_random: client_random.to_vec(),
        offered_suites: config.suites.clone(),
        binding: binding.clone(),
        ticket: config.ticket.as_ref().map(|t| t.ticket.clone()),
    });
    let mut transcript = Transcript::new();
    transcript.absorb(&encode_payload(&payload)?);
    let envelope = handshake_subscription(&wire_name, name, payload);
    let state = HandshakeState {
        role: Role::Subscriber,
        phase: Phase::HelloSent,
        name: name.clone(),
        wire_name,
        binding,
        offered_suites: config.suites,
        suite: None,
        client_random,
        server_random: None,
        session_id: None,
        transcript,
        th_flight: None,
        th_finish: None,
        ephemeral: None,
        schedule: None,
        resume: config.ticket,
        channel_auth: config.channel_auth,
    };
    Ok((state, envelope))
}

/// Verify the server flight and answer it with the finish subscription.
/// Any failure is terminal for this state.
pub fn subscriber_process_flight<R: RngCore + CryptoRng>(
    state: &mut HandshakeState,
    flight: &Envelope,
    trust: &TrustStore,
    now: u64,
    rng: &mut R,
) -> Result<Envelope> {
    if state.phase != Phase::HelloSent {
        return state.fail(HandshakeError::UnexpectedMessage);
    }
    if let Err(e) = require_publication(flight) {
        return state.fail(e);
    }
    if flight.wire_name != state.wire_name {
        return state.fail(HandshakeError::BindingMismatch);
    }
    let hello = match &flight.payload {
        Payload::PubHello(p) => p.clone(),
        _ => return state.fail(HandshakeError::UnexpectedMessage),
    };
    if hello.certificate_request {
        return state.fail(HandshakeError::MalformedMessage(
            "certificate request is not supported",
        ));
    }
    if let Err(e) = verify_with_trust_store(&hello.certificate, trust, now) {
        return state.fail(HandshakeError::BadCertificate(e));
    }
    if !authorizes(&hello.certificate, &state.name) {
        return state.fail(HandshakeError::NotAuthorizedForName);
    }
    if !state.offered_suites.contains(&hello.chosen_suite) {
        return state.fail(HandshakeError::SuiteMismatch);
    }
    let Some(suite) = suite_by_id(hello.chosen_suite) else {
        return state.fail(HandshakeError::SuiteMismatch);
    };
    let Ok(server_random) = <[u8; 32]>::try_from(hello.server_random.as_slice()) else {
        return state.fail(HandshakeError::MalformedMessage("bad server random length"));
    };
    let Ok(peer_public) = <[u8; 32]>::try_from(hello.ephemeral_public.as_slice()) else {
        return state.fail(HandshakeError::SuiteMismatch);
    };
    let tuple = KeyExchangeTuple {
        client_random: state.client_random,
        server_random,
        ephemeral_public: peer_public,
        suite_id: hello.chosen_suite,
        forwarding_id: state.name.routable().as_bytes().to_vec(),
    };
    if !verify_key_exchange_signature(
        &hello.certificate.publisher_public_key,
        &tuple,
        &hello.transcript_signature,
    ) {
        return state.fail(HandshakeError::BadTranscriptSignature);
    }

    state.transcript.absorb(&encode_payload(&flight.payload)?);
    let th_flight = state.transcript.hash();

    let ephemeral = EphemeralShare::generate(rng);
    let our_public = ephemeral.public();
    let shared = ephemeral.agree(&peer_public);
    let schedule = match derive_keys(
        shared.as_ref(),
        &state.client_random,
        &server_random,
        &th_flight,
        suite,
    ) {
        Ok(s) => s,
        Err(e) => return state.fail(e),
    };

    let finish_binding = match state.binding.kind() {
        BindingKind::Nonce => state.binding.clone(),
        BindingKind::SessionId => {
            let Ok(sid) = <[u8; 32]>::try_from(hello.session_id.as_slice()) else {
                return state.fail(HandshakeError::MalformedMessage("bad session id length"));
            };
            HandshakeBinding::session_id(sid)
        }
    };
    let channel_binding = state.channel_auth.as_ref().map(|kp| {
        let mut message = Vec::with_capacity(CHANNEL_BINDING_CONTEXT.len() + 32);
        message.extend_from_slice(CHANNEL_BINDING_CONTEXT);
        message.extend_from_slice(&th_flight);
        ChannelBinding {
            public_key: kp.public_key(),
            signature: kp.sign(&message),
        }
    });
    let mac = finished_mac(schedule.master_secret(), Role::Subscriber, &th_flight, b"");
    let payload = Payload::SubFinish(SubFinish {
        ephemeral_public: our_public.to_vec(),
        finished_mac: mac.to_vec(),
        binding: finish_binding.clone(),
        channel_binding,
    });
    state.transcript.absorb(&encode_payload(&payload)?);

    state.suite = Some(suite);
    state.server_random = Some(server_random);
    state.session_id = Some(hello.session_id.as_slice().try_into().unwrap());
    state.th_flight = Some(th_flight);
    state.th_finish = Some(state.transcript.hash());
    state.schedule = Some(schedule);
    state.binding = finish_binding;
    state.phase = Phase::FlightSent;

    let envelope = handshake_subscription(&state.wire_name, &state.name, payload);
    Ok(envelope)
}

/// Check the publisher's finish and hand back the established session.
pub fn subscriber_verify_finish(
    state: &mut HandshakeState,
    fin: &Envelope,
) -> Result<EstablishedSession> {
    if state.phase != Phase::FlightSent {
        return state.fail(HandshakeError::UnexpectedMessage);
    }
    if let Err(e) = require_publication(fin) {
        return state.fail(e);
    }
    if fin.wire_name != state.wire_name {
        return state.fail(HandshakeError::BindingMismatch);
    }
    let finish = match &fin.payload {
        Payload::PubFinish(p) => p.clone(),
        _ => return state.fail(HandshakeError::UnexpectedMessage),
    };
    if finish.server_random.is_some() {
        return state.fail(HandshakeError::MalformedMessage(
            "resumption randomness in a full handshake finish",
        ));
    }
    let schedule = state.schedule.take().expect("schedule set in FlightSent");
    let th_finish = state.th_finish.expect("finish hash set in FlightSent");
    let trailer = pub_finish_trailer_bytes(None, finish.ticket.as_ref())?;
    let expected = finished_mac(schedule.master_secret(), Role::Publisher, &th_finish, &trailer);
    if !crate::crypto::constant_time_eq(&expected, &finish.finished_mac) {
        return state.fail(HandshakeError::BadFinishedMac);
    }
    state.phase = Phase::Established;
    let suite = state.suite.expect("suite set in FlightSent");
    let resumption = finish.ticket.map(|ticket| StoredTicket {
        ticket,
        master_secret: *schedule.master_secret(),
        suite_id: suite.id,
    });
    let mut session = EstablishedSession::new(
        Role::Subscriber,
        state.name.clone(),
        state.wire_name.clone(),
        suite,
        schedule,
    );
    session.set_resumption(resumption);
    Ok(session)
}

// ---------------------------------------------------------------------------
// Publisher side

/// The server flight, built in full except for the key-exchange signature.
/// `finalize_flight` injects the signature (local or delegated) and commits
/// the state.
pub struct PreparedFlight {
    state: HandshakeState,
    tuple: KeyExchangeTuple,
    certificate: PublisherCertificate,
    primary: CorrKey,
    alias: Option<CorrKey>,
}

impl PreparedFlight {
    pub fn tuple(&self) -> &KeyExchangeTuple {
        &self.tuple
    }

    pub fn name(&self) -> &ContentName {
        &self.state.name
    }

    pub fn wire_name(&self) -> &str {
        &self.state.wire_name
    }
}

pub(crate) fn prepare_flight<R: RngCore + CryptoRng>(
    hello_env: &Envelope,
    cert: &PublisherCertificate,
    allow_ticket: bool,
    rng: &mut R,
) -> Result<PreparedFlight> {
    require_subscription(hello_env)?;
    let hello = match &hello_env.payload {
        Payload::SubHello(p) => p,
        _ => return Err(HandshakeError::UnexpectedMessage),
    };
    if hello.ticket.is_some() && !allow_ticket {
        return Err(HandshakeError::MalformedMessage(
            "ticket offers take the resumption path",
        ));
    }
    let name = unbind_wire_name(&hello_env.wire_name, &hello.binding)
        .ok_or(HandshakeError::BindingMismatch)?;
    if hello.binding.kind() == BindingKind::SessionId && !hello.binding.is_unassigned() {
        return Err(HandshakeError::MalformedMessage(
            "hello must not claim a session id",
        ));
    }
    if !authorizes(cert, &name) {
        return Err(HandshakeError::NotAuthorized);
    }
    let chosen = hello
        .offered_suites
        .iter()
        .find_map(|id| suite_by_id(*id))
        .ok_or(HandshakeError::NoCommonSuite)?;
    let Ok(client_random) = <[u8; 32]>::try_from(hello.client_random.as_slice()) else {
        return Err(HandshakeError::MalformedMessage("bad client random length"));
    };

    let mut server_random = [0u8; 32];
    rng.fill_bytes(&mut server_random);
    let mut session_id = [0u8; 32];
    rng.fill_bytes(&mut session_id);
    let ephemeral = EphemeralShare::generate(rng);

    let tuple = KeyExchangeTuple {
        client_random,
        server_random,
        ephemeral_public: ephemeral.public(),
        suite_id: chosen.id,
        forwarding_id: name.routable().as_bytes().to_vec(),
    };

    let mut transcript = Transcript::new();
    transcript.absorb(&encode_payload(&hello_env.payload)?);

    let primary = match hello.binding.kind() {
        BindingKind::Nonce => corr_key(&hello.binding),
        BindingKind::SessionId => CorrKey::Session(session_id),
    };
    let alias = match hello.binding.kind() {
        BindingKind::Nonce => Some(CorrKey::Session(session_id)),
        BindingKind::SessionId => None,
    };

    let state = HandshakeState {
        role: Role::Publisher,
        phase: Phase::FlightSent,
        name,
        wire_name: hello_env.wire_name.clone(),
        binding: hello.binding.clone(),
        offered_suites: hello.offered_suites.clone(),
        suite: Some(chosen),
        client_random,
        server_random: Some(server_random),
        session_id: Some(session_id),
        transcript,
        th_flight: None,
        th_finish: None,
        ephemeral: Some(ephemeral),
        schedule: None,
        resume: None,
        channel_auth: None,
    };
    Ok(PreparedFlight {
        state,
        tuple,
        certificate: cert.clone(),
        primary,
        alias,
    })
}

pub(crate) fn finalize_flight(
    store: &StateStore,
    mut prepared: PreparedFlight,
    signature: Vec<u8>,
) -> Result<Envelope> {
    if !verify_key_exchange_signature(
        &prepared.certificate.publisher_public_key,
        &prepared.tuple,
        &signature,
    ) {
        return Err(HandshakeError::BadTranscriptSignature);
    }
    let payload = Payload::PubHello(PubHello {
        server_random: prepared.tuple.server_random.to_vec(),
        chosen_suite: prepared.tuple.suite_id,
        certificate: prepared.certificate.clone(),
        ephemeral_public: prepared.tuple.ephemeral_public.to_vec(),
        transcript_signature: signature,
        session_id: prepared.state.session_id.unwrap().to_vec(),
        certificate_request: false,
    });
    prepared.state.transcript.absorb(&encode_payload(&payload)?);
    prepared.state.th_flight = Some(prepared.state.transcript.hash());
    let envelope =
        handshake_publication(&prepared.state.wire_name, &prepared.state.name, payload);
    store.insert(prepared.primary, prepared.alias, prepared.state);
    Ok(envelope)
}

/// Answer an opening subscription: authorize, negotiate, sign and store the
/// pending state under the hello's binding. A refused signature leaves no
/// state behind.
pub fn publisher_respond<R: RngCore + CryptoRng>(
    store: &StateStore,
    hello_env: &Envelope,
    cert: &PublisherCertificate,
    signer: &dyn TranscriptSigner,
    rng: &mut R,
) -> Result<Envelope> {
    let prepared = prepare_flight(hello_env, cert, false, rng)?;
    let signature = signer
        .sign_key_exchange(&prepared.tuple)
        .map_err(|SignerRefusal| HandshakeError::SignerRefused)?;
    finalize_flight(store, prepared, signature)
}

/// Outcome of a completed publisher-side handshake.
pub struct HandshakeOutcome {
    pub schedule: KeySchedule,
    pub suite: &'static CipherSuite,
    pub name: ContentName,
    pub wire_name: String,
    pub session_id: [u8; 32],
    /// Public key proven by the finish's channel binding, when present.
    pub channel_peer: Option<[u8; 32]>,
}

impl HandshakeOutcome {
    pub fn into_session(self) -> EstablishedSession {
        EstablishedSession::new(
            Role::Publisher,
            self.name,
            self.wire_name,
            self.suite,
            self.schedule,
        )
    }
}

/// Consume the finish subscription, verify it against the stored state and
/// reply with the closing publication. The state is evicted whether the
/// finish verifies or not, so a fifth message for the same binding answers
/// `UnknownBinding`.
pub fn publisher_complete<R: RngCore + CryptoRng>(
    store: &StateStore,
    finish_env: &Envelope,
    ticket_key: Option<&TicketKey>,
    now: u64,
    rng: &mut R,
) -> Result<(HandshakeOutcome, Envelope)> {
    require_subscription(finish_env)?;
    let finish = match &finish_env.payload {
        Payload::SubFinish(p) => p,
        _ => return Err(HandshakeError::UnexpectedMessage),
    };
    let mut state = store
        .take(&corr_key(&finish.binding))
        .ok_or(HandshakeError::UnknownBinding)?;
    if finish_env.wire_name != state.wire_name {
        return Err(HandshakeError::BindingMismatch);
    }
    let suite = state.suite.expect("suite chosen in flight");
    let Ok(peer_public) = <[u8; 32]>::try_from(finish.ephemeral_public.as_slice()) else {
        return Err(HandshakeError::SuiteMismatch);
    };
    let th_flight = state.th_flight.expect("flight hash recorded");
    let ephemeral = state.ephemeral.take().expect("flight holds the ephemeral");
    let shared = ephemeral.agree(&peer_public);
    let schedule = derive_keys(
        shared.as_ref(),
        &state.client_random,
        &state.server_random.unwrap(),
        &th_flight,
        suite,
    )?;
    let expected = finished_mac(schedule.master_secret(), Role::Subscriber, &th_flight, b"");
    if !crate::crypto::constant_time_eq(&expected, &finish.finished_mac) {
        return Err(HandshakeError::BadFinishedMac);
    }
    let channel_peer = match &finish.channel_binding {
        Some(cb) => {
            let mut message = Vec::with_capacity(CHANNEL_BINDING_CONTEXT.len() + 32);
            message.extend_from_slice(CHANNEL_BINDING_CONTEXT);
            message.extend_from_slice(&th_flight);
            if !verify_signature(&cb.public_key, &message, &cb.signature) {
                return Err(HandshakeError::BadChannelBinding);
            }
            Some(cb.public_key)
        }
        None => None,
    };

    state.transcript.absorb(&encode_payload(&finish_env.payload)?);
    let th_finish = state.transcript.hash();

    let ticket = match ticket_key {
        Some(tk) => Some(issue_ticket_parts(
            schedule.master_secret(),
            suite.id,
            state.name.prefix(),
            tk,
            now,
            rng,
        )?),
        None => None,
    };
    let trailer = pub_finish_trailer_bytes(None, ticket.as_ref())?;
    let mac = finished_mac(schedule.master_secret(), Role::Publisher, &th_finish, &trailer);
    let payload = Payload::PubFinish(PubFinish {
        finished_mac: mac.to_vec(),
        server_random: None,
        ticket,
    });
    let envelope = handshake_publication(&state.wire_name, &state.name, payload);
    let outcome = HandshakeOutcome {
        schedule,
        suite,
        name: state.name.clone(),
        wire_name: state.wire_name.clone(),
        session_id: state.session_id.unwrap(),
        channel_peer,
    };
    Ok((outcome, envelope))
}
