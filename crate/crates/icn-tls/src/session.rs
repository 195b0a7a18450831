//! Established sessions: the record layer, session tickets, group ticket-key
//! rotation and migration to another trusted publisher.
//!
//! A ticket seals the session's master secret (plus suite and name prefix)
//! under a group ticket key. Any publisher holding that key can open the
//! ticket and continue the session in a two-message exchange; possession of
//! the group key is the membership proof, no certificate is re-presented.
//! The trade-off is deliberate and reproduced here faithfully: stealing a
//! ticket key exposes exactly the sessions that issued tickets under it.

use crate::crypto::{aead_open, aead_seal, sha256, AeadAlgorithm};
use crate::handshake::{
    derive_keys, finished_mac, handshake_publication, prepare_flight, suite_by_id,
    CipherSuite, HandshakeError, HandshakeState, KeySchedule, Phase, StateStore,
    TranscriptSigner, MASTER_SECRET_LEN,
};
use crate::credentials::PublisherCertificate;
use crate::names::ContentName;
use crate::wire::{
    encode_payload, pub_finish_trailer_bytes, DataRecord, Direction, Envelope, EnvelopeFlags,
    Payload, PubFinish,
};
use rand::{CryptoRng, RngCore};
use std::collections::VecDeque;
use thiserror::Error;
use zeroize::Zeroize;

/// Default ticket key lifetime: twelve hours, the rotation period the group
/// key generator is built around.
pub const DEFAULT_TICKET_KEY_LIFETIME: u64 = 43_200;
/// How many superseded ticket keys stay acceptable for decryption.
pub const DEFAULT_KEY_HISTORY: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Subscriber,
    Publisher,
}

impl Role {
    pub fn peer(self) -> Role {
        match self {
            Role::Subscriber => Role::Publisher,
            Role::Publisher => Role::Subscriber,
        }
    }

    fn send_direction(self) -> Direction {
        match self {
            Role::Subscriber => Direction::Subscription,
            Role::Publisher => Direction::Publication,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RecordError {
    #[error("sequence number space exhausted")]
    SequenceExhausted,
    #[error("record failed authentication")]
    AuthFailure,
    #[error("record sequence number was already accepted")]
    Replay,
    #[error("record travels in the wrong direction for this session")]
    WrongDirection,
    #[error("envelope does not carry a data record")]
    NotARecord,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TicketError {
    #[error("ticket key expired for issuance")]
    ExpiredTicketKey,
    #[error("ticket failed authentication under this key")]
    AuthFailure,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ResumeError {
    #[error("hello carries no ticket")]
    MissingTicket,
    #[error("ticket was issued for a different name")]
    TicketNameMismatch,
    #[error("ticket failed authentication")]
    TicketAuthFailure,
    #[error(transparent)]
    Handshake(#[from] HandshakeError),
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("rotation requested before the current key's lifetime elapsed")]
pub struct TooEarly;

// ---------------------------------------------------------------------------
// Record layer

/// A live session after a completed (full or abbreviated) handshake.
/// Sequence numbers only move forward; any record at or below the last
/// accepted sequence is a replay.
pub struct EstablishedSession {
    keys: KeySchedule,
    suite: &'static CipherSuite,
    name: ContentName,
    wire_name: String,
    send_seq: u64,
    recv_seq: u64,
    role: Role,
    resumption: Option<StoredTicket>,
}

impl EstablishedSession {
    pub(crate) fn new(
        role: Role,
        name: ContentName,
        wire_name: String,
        suite: &'static CipherSuite,
        keys: KeySchedule,
    ) -> Self {
        EstablishedSession {
            keys,
            suite,
            name,
            wire_name,
            send_seq: 0,
            recv_seq: 0,
            role,
            resumption: None,
        }
    }

    /// Rebuild a session view from a key schedule obtained elsewhere, e.g.
    /// one recovered from a captured ticket and a stolen ticket key. This is
    /// the attacker's reconstruction path in the compromise demonstrations;
    /// it grants nothing the schedule itself does not already grant.
    pub fn from_recovered_keys(
        role: Role,
        name: ContentName,
        wire_name: String,
        suite: &'static CipherSuite,
        keys: KeySchedule,
    ) -> Self {
        EstablishedSession::new(role, name, wire_name, suite, keys)
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn name(&self) -> &ContentName {
        &self.name
    }

    pub fn wire_name(&self) -> &str {
        &self.wire_name
    }

    pub fn suite(&self) -> &'static CipherSuite {
        self.suite
    }

    pub fn key_schedule(&self) -> &KeySchedule {
        &self.keys
    }

    pub(crate) fn set_resumption(&mut self, ticket: Option<StoredTicket>) {
        self.resumption = ticket;
    }

    /// The ticket received in the closing publication, if any, packaged with
    /// the secrets needed to redeem it later.
    pub fn resumption_ticket(&self) -> Option<&StoredTicket> {
        self.resumption.as_ref()
    }

    fn record_nonce(iv: &[u8; 12], seq: u64) -> [u8; 12] {
        let mut nonce = *iv;
        for (i, b) in seq.to_be_bytes().iter().enumerate() {
            nonce[4 + i] ^= b;
        }
        nonce
    }

    /// Additional data binds the suite, the sender direction, the record
    /// flags and the session's wire name, so none of them can be altered
    /// without failing authentication.
    fn record_aad(&self, sender: Role) -> Vec<u8> {
        let flags = EnvelopeFlags::NON_AGGREGATABLE.with(EnvelopeFlags::NON_CACHEABLE);
        let mut aad = Vec::with_capacity(4 + self.wire_name.len());
        aad.extend_from_slice(&self.suite.id.to_be_bytes());
        aad.push(match sender.send_direction() {
            Direction::Subscription => 0,
            Direction::Publication => 1,
        });
        aad.push(flags.bits());
        aad.extend_from_slice(self.wire_name.as_bytes());
        aad
    }

    pub fn seal_record(&mut self, plaintext: &[u8]) -> Result<Envelope, RecordError> {
        if self.send_seq == u64::MAX {
            return Err(RecordError::SequenceExhausted);
        }
        let seq = self.send_seq;
        let nonce = Self::record_nonce(self.keys.iv(self.role), seq);
        let aad = self.record_aad(self.role);
        let ciphertext = aead_seal(
            self.suite.aead,
            self.keys.write_key(self.role),
            self.keys.hmac_key().map(|k| &k[..]),
            &nonce,
            &aad,
            plaintext,
        );
        self.send_seq += 1;
        Ok(Envelope {
            direction: self.role.send_direction(),
            wire_name: self.wire_name.clone(),
            forwarding_id: self.name.routable(),
            flags: EnvelopeFlags::NON_AGGREGATABLE.with(EnvelopeFlags::NON_CACHEABLE),
            payload: Payload::DataRecord(DataRecord { seq, ciphertext }),
        })
    }

    pub fn open_record(&mut self, env: &Envelope) -> Result<Vec<u8>, RecordError> {
        let record = match &env.payload {
            Payload::DataRecord(r) => r,
            _ => return Err(RecordError::NotARecord),
        };
        if env.direction == self.role.send_direction() {
            return Err(RecordError::WrongDirection);
        }
        if env.wire_name != self.wire_name {
            return Err(RecordError::AuthFailure);
        }
        if record.seq < self.recv_seq {
            return Err(RecordError::Replay);
        }
        let peer = self.role.peer();
        let nonce = Self::record_nonce(self.keys.iv(peer), record.seq);
        let aad = self.record_aad(peer);
        let plaintext = aead_open(
            self.suite.aead,
            self.keys.write_key(peer),
            self.keys.hmac_key().map(|k| &k[..]),
            &nonce,
            &aad,
            &record.ciphertext,
        )
        .map_err(|_| RecordError::AuthFailure)?;
        self.recv_seq = record.seq + 1;
        Ok(plaintext)
    }
}

impl std::fmt::Debug for EstablishedSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EstablishedSession")
            .field("role", &self.role)
            .field("wire_name", &self.wire_name)
            .field("suite", &format_args!("0x{:04x}", self.suite.id))
            .field("keys", &self.keys)
            .field("send_seq", &self.send_seq)
            .field("recv_seq", &self.recv_seq)
            .finish()
    }
}

// ---------------------------------------------------------------------------
// Tickets

/// Group ticket encryption key. Expired keys still open old tickets but
/// never seal new ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TicketKey {
    pub key_id: [u8; 8],
    pub key: [u8; 16],
    pub issued_at: u64,
    pub lifetime: u64,
}

impl TicketKey {
    pub fn generate<R: RngCore + CryptoRng>(now: u64, lifetime: u64, rng: &mut R) -> Self {
        let mut key_id = [0u8; 8];
        let mut key = [0u8; 16];
        rng.fill_bytes(&mut key_id);
        rng.fill_bytes(&mut key);
        TicketKey {
            key_id,
            key,
            issued_at: now,
            lifetime,
        }
    }

    pub fn can_encrypt(&self, now: u64) -> bool {
        now < self.issued_at.saturating_add(self.lifetime)
    }
}

/// Encrypted capsule of session secrets. Opaque to the subscriber that
/// stores it; only ticket-key holders can open it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionTicket {
    pub key_id: [u8; 8],
    pub nonce: [u8; 12],
    pub sealed: Vec<u8>,
}

/// What the subscriber keeps alongside a ticket so it can complete an
/// abbreviated handshake later.
#[derive(Clone)]
pub struct StoredTicket {
    pub ticket: SessionTicket,
    pub master_secret: [u8; MASTER_SECRET_LEN],
    pub suite_id: u16,
}

impl Drop for StoredTicket {
    fn drop(&mut self) {
        self.master_secret.zeroize();
    }
}

impl std::fmt::Debug for StoredTicket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StoredTicket")
            .field("key_id", &hex::encode(self.ticket.key_id))
            .field("suite_id", &format_args!("0x{:04x}", self.suite_id))
            .field("master_secret", &"<redacted>")
            .finish()
    }
}

/// Decrypted ticket contents.
pub struct TicketContents {
    pub master_secret: [u8; MASTER_SECRET_LEN],
    pub suite_id: u16,
    pub name_prefix: Vec<String>,
    pub issued_at: u64,
}

impl Drop for TicketContents {
    fn drop(&mut self) {
        self.master_secret.zeroize();
    }
}

fn ticket_plaintext(
    master: &[u8; MASTER_SECRET_LEN],
    suite_id: u16,
    prefix: &[String],
    issued_at: u64,
) -> Vec<u8> {
    let joined = prefix.join("/");
    let mut out = Vec::with_capacity(MASTER_SECRET_LEN + 2 + 8 + joined.len());
    out.extend_from_slice(master);
    out.extend_from_slice(&suite_id.to_be_bytes());
    out.extend_from_slice(&issued_at.to_be_bytes());
    out.extend_from_slice(joined.as_bytes());
    out
}

fn parse_ticket_plaintext(bytes: &[u8]) -> Option<TicketContents> {
    if bytes.len() < MASTER_SECRET_LEN + 2 + 8 + 1 {
        return None;
    }
    let master_secret: [u8; MASTER_SECRET_LEN] = bytes[..MASTER_SECRET_LEN].try_into().unwrap();
    let suite_id = u16::from_be_bytes([bytes[MASTER_SECRET_LEN], bytes[MASTER_SECRET_LEN + 1]]);
    let issued_at = u64::from_be_bytes(
        bytes[MASTER_SECRET_LEN + 2..MASTER_SECRET_LEN + 10]
            .try_into()
            .unwrap(),
    );
    let joined = std::str::from_utf8(&bytes[MASTER_SECRET_LEN + 10..]).ok()?;
    let name_prefix: Vec<String> = joined.split('/').map(str::to_string).collect();
    Some(TicketContents {
        master_secret,
        suite_id,
        name_prefix,
        issued_at,
    })
}

pub(crate) fn issue_ticket_parts<R: RngCore + CryptoRng>(
    master: &[u8; MASTER_SECRET_LEN],
    suite_id: u16,
    prefix: &[String],
    tk: &TicketKey,
    now: u64,
    rng: &mut R,
) -> Result<SessionTicket, TicketError> {
    if !tk.can_encrypt(now) {
        return Err(TicketError::ExpiredTicketKey);
    }
    let mut nonce = [0u8; 12];
    rng.fill_bytes(&mut nonce);
    let plaintext = ticket_plaintext(master, suite_id, prefix, now);
    let sealed = aead_seal(
        AeadAlgorithm::Aes128Gcm,
        &tk.key,
        None,
        &nonce,
        &tk.key_id,
        &plaintext,
    );
    Ok(SessionTicket {
        key_id: tk.key_id,
        nonce,
        sealed,
    })
}

/// Seal the session's secrets under a (non-expired) group ticket key.
pub fn issue_ticket<R: RngCore + CryptoRng>(
    session: &EstablishedSession,
    tk: &TicketKey,
    now: u64,
    rng: &mut R,
) -> Result<SessionTicket, TicketError> {
    issue_ticket_parts(
        session.keys.master_secret(),
        session.suite.id,
        session.name.prefix(),
        tk,
        now,
        rng,
    )
}

/// Open a ticket with a key of matching id. This is also the entire
/// "stolen ticket key" attack: nothing beyond key possession is needed.
pub fn open_ticket(ticket: &SessionTicket, tk: &TicketKey) -> Result<TicketContents, TicketError> {
    if ticket.key_id != tk.key_id {
        return Err(TicketError::AuthFailure);
    }
    let plaintext = aead_open(
        AeadAlgorithm::Aes128Gcm,
        &tk.key,
        None,
        &ticket.nonce,
        &tk.key_id,
        &ticket.sealed,
    )
    .map_err(|_| TicketError::AuthFailure)?;
    parse_ticket_plaintext(&plaintext).ok_or(TicketError::AuthFailure)
}

/// Demonstrates the forward-secrecy relaxation: a stolen ticket key plus a
/// captured ticket yield the sealed master secret directly.
pub fn recover_master_secret(
    ticket: &SessionTicket,
    stolen: &TicketKey,
) -> Result<[u8; MASTER_SECRET_LEN], TicketError> {
    Ok(open_ticket(ticket, stolen)?.master_secret)
}

// ---------------------------------------------------------------------------
// Resumption

pub enum ResumeOutcome {
    /// Ticket accepted: the session is live and the reply is the closing
    /// publication of a two-message exchange.
    Resumed {
        session: EstablishedSession,
        finish: Envelope,
    },
    /// Ticket key unknown here; the reply is an ordinary server flight and
    /// the handshake continues as a full one.
    FallbackToFull { flight: Envelope },
}

/// Publisher-side resumption. Opens the offered ticket with any ring key,
/// mixes the recovered master secret with both fresh randoms, and completes
/// in a single publication. An unknown key id falls back to the full
/// handshake rather than failing.
pub fn resume<R: RngCore + CryptoRng>(
    store: &StateStore,
    hello_env: &Envelope,
    key_ring: &[TicketKey],
    cert: &PublisherCertificate,
    signer: &dyn TranscriptSigner,
    rng: &mut R,
) -> Result<ResumeOutcome, ResumeError> {
    let hello = match &hello_env.payload {
        Payload::SubHello(p) => p,
        _ => return Err(ResumeError::Handshake(HandshakeError::UnexpectedMessage)),
    };
    let ticket = hello.ticket.as_ref().ok_or(ResumeError::MissingTicket)?;
    let name = crate::names::unbind_wire_name(&hello_env.wire_name, &hello.binding)
        .ok_or(ResumeError::Handshake(HandshakeError::BindingMismatch))?;

    let fallback = |rng: &mut R| -> Result<ResumeOutcome, ResumeError> {
        let prepared = prepare_flight(hello_env, cert, true, rng)?;
        let signature = signer
            .sign_key_exchange(prepared.tuple())
            .map_err(|_| HandshakeError::SignerRefused)?;
        let flight = crate::handshake::finalize_flight(store, prepared, signature)?;
        Ok(ResumeOutcome::FallbackToFull { flight })
    };

    let Some(tk) = key_ring.iter().find(|tk| tk.key_id == ticket.key_id) else {
        return fallback(rng);
    };
    let contents = open_ticket(ticket, tk).map_err(|_| ResumeError::TicketAuthFailure)?;
    if contents.name_prefix != name.prefix() {
        return Err(ResumeError::TicketNameMismatch);
    }
    let Some(suite) = suite_by_id(contents.suite_id) else {
        return fallback(rng);
    };
    if !hello.offered_suites.contains(&suite.id) {
        return fallback(rng);
    }
    let Ok(client_random) = <[u8; 32]>::try_from(hello.client_random.as_slice()) else {
        return Err(ResumeError::Handshake(HandshakeError::MalformedMessage(
            "bad client random length",
        )));
    };

    let mut server_random = [0u8; 32];
    rng.fill_bytes(&mut server_random);
    let th_hello = sha256(&encode_payload(&hello_env.payload).map_err(HandshakeError::Wire)?);
    let schedule = derive_keys(
        &contents.master_secret,
        &client_random,
        &server_random,
        &th_hello,
        suite,
    )
    .map_err(ResumeError::Handshake)?;
    let trailer = pub_finish_trailer_bytes(Some(&server_random), None)
        .map_err(HandshakeError::Wire)?;
    let mac = finished_mac(schedule.master_secret(), Role::Publisher, &th_hello, &trailer);
    let payload = Payload::PubFinish(PubFinish {
        finished_mac: mac.to_vec(),
        server_random: Some(server_random.to_vec()),
        ticket: None,
    });
    let finish = handshake_publication(&hello_env.wire_name, &name, payload);
    let session = EstablishedSession::new(
        Role::Publisher,
        name,
        hello_env.wire_name.clone(),
        suite,
        schedule,
    );
    Ok(ResumeOutcome::Resumed { session, finish })
}

/// Subscriber-side acceptance of an abbreviated handshake: the publisher
/// answered our ticket offer directly with a finish.
pub fn subscriber_accept_resumption(
    state: &mut HandshakeState,
    fin: &Envelope,
) -> Result<EstablishedSession, HandshakeError> {
    if state.phase() != Phase::HelloSent || state.resume_ticket().is_none() {
        return state.mark_failed(HandshakeError::UnexpectedMessage);
    }
    if fin.direction != Direction::Publication
        || !fin.flags.contains(EnvelopeFlags::NON_CACHEABLE)
        || fin.wire_name != state.wire_name()
    {
        return state.mark_failed(HandshakeError::MalformedMessage(
            "invalid resumption finish",
        ));
    }
    let finish = match &fin.payload {
        Payload::PubFinish(p) => p.clone(),
        _ => return state.mark_failed(HandshakeError::UnexpectedMessage),
    };
    let Some(sr_bytes) = &finish.server_random else {
        return state.mark_failed(HandshakeError::MalformedMessage(
            "resumption finish missing server randomness",
        ));
    };
    let server_random: [u8; 32] = sr_bytes.as_slice().try_into().unwrap();
    let stored = state.resume_ticket().expect("checked above");
    let suite = match suite_by_id(stored.suite_id) {
        Some(s) => s,
        None => return state.mark_failed(HandshakeError::SuiteMismatch),
    };
    let master = stored.master_secret;
    let th_hello = state.transcript_hash();
    let schedule = match derive_keys(&master, state.client_random(), &server_random, &th_hello, suite)
    {
        Ok(s) => s,
        Err(e) => return state.mark_failed(e),
    };
    let trailer = pub_finish_trailer_bytes(Some(&server_random), finish.ticket.as_ref())?;
    let expected = finished_mac(schedule.master_secret(), Role::Publisher, &th_hello, &trailer);
    if !crate::crypto::constant_time_eq(&expected, &finish.finished_mac) {
        return state.mark_failed(HandshakeError::BadFinishedMac);
    }
    state.mark_established();
    let mut session = EstablishedSession::new(
        Role::Subscriber,
        state.name().clone(),
        state.wire_name().to_string(),
        suite,
        schedule,
    );
    let renewed = finish.ticket.map(|ticket| StoredTicket {
        ticket,
        master_secret: master,
        suite_id: suite.id,
    });
    session.set_resumption(renewed);
    Ok(session)
}

// ---------------------------------------------------------------------------
// Group key generator

/// Generates and rotates the group ticket key. Every member of the group
/// holds the same current key and the same bounded history after each
/// rotation (distribution itself is modeled as a lossless broadcast).
pub struct KeyGenerator {
    members: Vec<String>,
    current: TicketKey,
    history: VecDeque<TicketKey>,
    depth: usize,
}

impl KeyGenerator {
    pub fn new<R: RngCore + CryptoRng>(
        members: Vec<String>,
        lifetime: u64,
        now: u64,
        rng: &mut R,
    ) -> Self {
        KeyGenerator {
            members,
            current: TicketKey::generate(now, lifetime, rng),
            history: VecDeque::new(),
            depth: DEFAULT_KEY_HISTORY,
        }
    }

    pub fn members(&self) -> &[String] {
        &self.members
    }

    pub fn current(&self) -> &TicketKey {
        &self.current
    }

    /// Rotate once the current key's lifetime has elapsed. The superseded
    /// key moves into the acceptance history; the oldest falls out.
    pub fn rotate<R: RngCore + CryptoRng>(
        &mut self,
        now: u64,
        rng: &mut R,
    ) -> Result<&TicketKey, TooEarly> {
        if now < self.current.issued_at.saturating_add(self.current.lifetime) {
            return Err(TooEarly);
        }
        let fresh = TicketKey::generate(now, self.current.lifetime, rng);
        let old = std::mem::replace(&mut self.current, fresh);
        self.history.push_front(old);
        self.history.truncate(self.depth);
        Ok(&self.current)
    }

    /// The full acceptance ring every member holds: current key first.
    pub fn ring(&self) -> Vec<TicketKey> {
        let mut ring = Vec::with_capacity(1 + self.history.len());
        ring.push(self.current.clone());
        ring.extend(self.history.iter().cloned());
        ring
    }
}
