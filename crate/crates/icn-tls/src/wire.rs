//! Bit-exact TLV encoding of every message that crosses the simulated
//! network, plus the file formats used for fixtures.
//!
//! Every element is a TLV: big-endian u16 type code, big-endian u32 length,
//! value. Containers hold a fixed-order sequence of field TLVs; optional
//! fields, when present, appear in their fixed position. The decoder is
//! strict: required fields must appear in order, fixed-size fields must have
//! exactly their declared length, every container must be consumed exactly,
//! and anything else is an error. Strictness is what makes the encoding
//! canonical (`encode(decode(b)) == b`) and keeps length-field tampering
//! detectable.
//!
//! Container type codes:
//!
//! | code   | container                       |
//! |--------|---------------------------------|
//! | 0x0001 | envelope                        |
//! | 0x0010 | publisher certificate           |
//! | 0x0011 | session ticket                  |
//! | 0x0012 | ticket key (ring file entry)    |
//! | 0x0014 | signing key pair (fixture file) |
//! | 0x0101..0x0108 | payload variants, in declaration order |
//!
//! Golden vectors for the envelope encoding live under `testdata/wire/`.

use crate::credentials::PublisherCertificate;
use crate::names::{
    validate_prefix, BindingKind, ContentName, ForwardingId, HandshakeBinding,
};
use crate::session::{SessionTicket, TicketKey};
use thiserror::Error;

pub const TYPE_ENVELOPE: u16 = 0x0001;
pub const TYPE_CERTIFICATE: u16 = 0x0010;
pub const TYPE_TICKET: u16 = 0x0011;
pub const TYPE_TICKET_KEY: u16 = 0x0012;
pub const TYPE_KEYPAIR: u16 = 0x0014;

pub const TYPE_SUB_HELLO: u16 = 0x0101;
pub const TYPE_PUB_HELLO: u16 = 0x0102;
pub const TYPE_SUB_FINISH: u16 = 0x0103;
pub const TYPE_PUB_FINISH: u16 = 0x0104;
pub const TYPE_DATA_RECORD: u16 = 0x0105;
pub const TYPE_SIG_REQUEST: u16 = 0x0106;
pub const TYPE_SIG_RESPONSE: u16 = 0x0107;
pub const TYPE_ALERT: u16 = 0x0108;

// Field codes. Shared flat space; containers fix which fields they hold.
const F_DIRECTION: u16 = 0x0002;
const F_WIRE_NAME: u16 = 0x0003;
const F_FORWARDING_ID: u16 = 0x0004;
const F_FLAGS: u16 = 0x0005;
const F_CLIENT_RANDOM: u16 = 0x0021;
const F_SUITES: u16 = 0x0022;
const F_BINDING: u16 = 0x0023;
const F_SERVER_RANDOM: u16 = 0x0024;
const F_CHOSEN_SUITE: u16 = 0x0025;
const F_EPHEMERAL_PUBLIC: u16 = 0x0026;
const F_TRANSCRIPT_SIG: u16 = 0x0027;
const F_SESSION_ID: u16 = 0x0028;
const F_CERT_REQUEST: u16 = 0x0029;
const F_FINISHED_MAC: u16 = 0x002A;
const F_SEQ: u16 = 0x002B;
const F_CIPHERTEXT: u16 = 0x002C;
const F_NAME_PREFIX: u16 = 0x002D;
const F_NAME_SUFFIX: u16 = 0x002E;
const F_TO_BE_SIGNED: u16 = 0x002F;
const F_SIGNATURE: u16 = 0x0030;
const F_ALERT_CODE: u16 = 0x0031;
const F_ALERT_REASON: u16 = 0x0032;
const F_CHANNEL_BINDING: u16 = 0x0033;
const F_CERT_PUBKEY: u16 = 0x0041;
const F_CERT_PREFIX: u16 = 0x0042;
const F_CERT_NOT_BEFORE: u16 = 0x0043;
const F_CERT_NOT_AFTER: u16 = 0x0044;
const F_CERT_OWNER: u16 = 0x0045;
const F_CERT_SIG: u16 = 0x0046;
const F_TKT_KEY_ID: u16 = 0x0051;
const F_TKT_NONCE: u16 = 0x0052;
const F_TKT_SEALED: u16 = 0x0053;
const F_TK_KEY: u16 = 0x0054;
const F_TK_ISSUED_AT: u16 = 0x0055;
const F_TK_LIFETIME: u16 = 0x0056;
const F_KP_ID: u16 = 0x0057;
const F_KP_PUBLIC: u16 = 0x0058;
const F_KP_PRIVATE: u16 = 0x0059;

const RANDOM_LEN: usize = 32;
const SESSION_ID_LEN: usize = 32;
const CHANNEL_BINDING_LEN: usize = 32 + 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("input ends inside a TLV element")]
    Truncated,
    #[error("unknown or unexpected type code 0x{0:04x}")]
    UnknownType(u16),
    #[error("field 0x{field:04x} has length {got}, expected {expected}")]
    BadFieldLength { field: u16, got: usize, expected: usize },
    #[error("bytes remain after a complete element")]
    TrailingBytes,
    #[error("field 0x{0:04x} exceeds the maximum encodable length")]
    OversizeField(u16),
    #[error("field 0x{field:04x} carries an invalid value: {what}")]
    InvalidValue { field: u16, what: &'static str },
}

pub type WireResult<T> = Result<T, WireError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Subscription,
    Publication,
}

/// Router-relevant envelope flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct EnvelopeFlags(u8);

impl EnvelopeFlags {
    pub const NON_AGGREGATABLE: EnvelopeFlags = EnvelopeFlags(0b01);
    pub const NON_CACHEABLE: EnvelopeFlags = EnvelopeFlags(0b10);

    pub fn empty() -> Self {
        EnvelopeFlags(0)
    }

    pub fn with(self, other: EnvelopeFlags) -> Self {
        EnvelopeFlags(self.0 | other.0)
    }

    pub fn contains(self, other: EnvelopeFlags) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    fn from_bits(bits: u8) -> Option<Self> {
        (bits & !0b11 == 0).then_some(EnvelopeFlags(bits))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubHello {
    pub client_random: Vec<u8>,
    pub offered_suites: Vec<u16>,
    pub binding: HandshakeBinding,
    pub ticket: Option<SessionTicket>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PubHello {
    pub server_random: Vec<u8>,
    pub chosen_suite: u16,
    pub certificate: PublisherCertificate,
    pub ephemeral_public: Vec<u8>,
    pub transcript_signature: Vec<u8>,
    pub session_id: Vec<u8>,
    pub certificate_request: bool,
}

/// Client authentication appended to the finish of middlebox-to-publisher
/// channels: the sender's public key and its signature over the transcript
/// hash at the point the server flight completed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelBinding {
    pub public_key: [u8; 32],
    pub signature: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubFinish {
    pub ephemeral_public: Vec<u8>,
    pub finished_mac: Vec<u8>,
    pub binding: HandshakeBinding,
    pub channel_binding: Option<ChannelBinding>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PubFinish {
    pub finished_mac: Vec<u8>,
    /// Present only on abbreviated (ticket) handshakes, where no hello
    /// carries the publisher's fresh randomness.
    pub server_random: Option<Vec<u8>>,
    pub ticket: Option<SessionTicket>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataRecord {
    pub seq: u64,
    pub ciphertext: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SigRequest {
    pub name: ContentName,
    pub to_be_signed: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SigResponse {
    pub signature: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alert {
    pub code: u16,
    pub reason: String,
}

pub mod alert_codes {
    /// The trusted publisher refused a signature request.
    pub const REFUSED: u16 = 0x0001;
    /// Generic handshake failure relayed to the peer.
    pub const HANDSHAKE_FAILED: u16 = 0x0002;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    SubHello(SubHello),
    PubHello(PubHello),
    SubFinish(SubFinish),
    PubFinish(PubFinish),
    DataRecord(DataRecord),
    SigRequest(SigRequest),
    SigResponse(SigResponse),
    Alert(Alert),
}

impl Payload {
    pub fn type_code(&self) -> u16 {
        match self {
            Payload::SubHello(_) => TYPE_SUB_HELLO,
            Payload::PubHello(_) => TYPE_PUB_HELLO,
            Payload::SubFinish(_) => TYPE_SUB_FINISH,
            Payload::PubFinish(_) => TYPE_PUB_FINISH,
            Payload::DataRecord(_) => TYPE_DATA_RECORD,
            Payload::SigRequest(_) => TYPE_SIG_REQUEST,
            Payload::SigResponse(_) => TYPE_SIG_RESPONSE,
            Payload::Alert(_) => TYPE_ALERT,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Payload::SubHello(_) => "sub_hello",
            Payload::PubHello(_) => "pub_hello",
            Payload::SubFinish(_) => "sub_finish",
            Payload::PubFinish(_) => "pub_finish",
            Payload::DataRecord(_) => "data_record",
            Payload::SigRequest(_) => "sig_request",
            Payload::SigResponse(_) => "sig_response",
            Payload::Alert(_) => "alert",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub direction: Direction,
    pub wire_name: String,
    pub forwarding_id: ForwardingId,
    pub flags: EnvelopeFlags,
    pub payload: Payload,
}

// ---------------------------------------------------------------------------
// TLV primitives

pub(crate) struct TlvWriter {
    buf: Vec<u8>,
}

impl TlvWriter {
    pub(crate) fn new() -> Self {
        TlvWriter { buf: Vec::new() }
    }

    pub(crate) fn put(&mut self, ty: u16, value: &[u8]) -> WireResult<()> {
        let len = u32::try_from(value.len()).map_err(|_| WireError::OversizeField(ty))?;
        self.buf.extend_from_slice(&ty.to_be_bytes());
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(value);
        Ok(())
    }

    pub(crate) fn put_fixed(&mut self, ty: u16, value: &[u8], expected: usize) -> WireResult<()> {
        if value.len() != expected {
            return Err(WireError::BadFieldLength {
                field: ty,
                got: value.len(),
                expected,
            });
        }
        self.put(ty, value)
    }

    pub(crate) fn put_u16(&mut self, ty: u16, v: u16) -> WireResult<()> {
        self.put(ty, &v.to_be_bytes())
    }

    pub(crate) fn put_u64(&mut self, ty: u16, v: u64) -> WireResult<()> {
        self.put(ty, &v.to_be_bytes())
    }

    pub(crate) fn put_bool(&mut self, ty: u16, v: bool) -> WireResult<()> {
        self.put(ty, &[u8::from(v)])
    }

    pub(crate) fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct TlvReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> TlvReader<'a> {
    pub(crate) fn new(data: &'a [u8]) -> Self {
        TlvReader { data, pos: 0 }
    }

    pub(crate) fn peek_type(&self) -> Option<u16> {
        let rest = &self.data[self.pos..];
        if rest.len() < 2 {
            return None;
        }
        Some(u16::from_be_bytes([rest[0], rest[1]]))
    }

    pub(crate) fn next(&mut self) -> WireResult<(u16, &'a [u8])> {
        let rest = &self.data[self.pos..];
        if rest.len() < 6 {
            return Err(WireError::Truncated);
        }
        let ty = u16::from_be_bytes([rest[0], rest[1]]);
        let len = u32::from_be_bytes([rest[2], rest[3], rest[4], rest[5]]) as usize;
        if rest.len() - 6 < len {
            return Err(WireError::Truncated);
        }
        let value = &rest[6..6 + len];
        self.pos += 6 + len;
        Ok((ty, value))
    }

    pub(crate) fn expect(&mut self, ty: u16) -> WireResult<&'a [u8]> {
        let (got, value) = self.next()?;
        if got != ty {
            return Err(WireError::UnknownType(got));
        }
        Ok(value)
    }

    pub(crate) fn expect_fixed(&mut self, ty: u16, expected: usize) -> WireResult<&'a [u8]> {
        let value = self.expect(ty)?;
        if value.len() != expected {
            return Err(WireError::BadFieldLength {
                field: ty,
                got: value.len(),
                expected,
            });
        }
        Ok(value)
    }

    pub(crate) fn expect_u16(&mut self, ty: u16) -> WireResult<u16> {
        let v = self.expect_fixed(ty, 2)?;
        Ok(u16::from_be_bytes([v[0], v[1]]))
    }

    pub(crate) fn expect_u64(&mut self, ty: u16) -> WireResult<u64> {
        let v = self.expect_fixed(ty, 8)?;
        Ok(u64::from_be_bytes(v.try_into().unwrap()))
    }

    pub(crate) fn expect_bool(&mut self, ty: u16) -> WireResult<bool> {
        let v = self.expect_fixed(ty, 1)?;
        match v[0] {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(WireError::InvalidValue {
                field: ty,
                what: "boolean byte must be 0 or 1",
            }),
        }
    }

    pub(crate) fn expect_string(&mut self, ty: u16) -> WireResult<String> {
        let v = self.expect(ty)?;
        String::from_utf8(v.to_vec()).map_err(|_| WireError::InvalidValue {
            field: ty,
            what: "not valid UTF-8",
        })
    }

    pub(crate) fn optional(&mut self, ty: u16) -> WireResult<Option<&'a [u8]>> {
        if self.peek_type() == Some(ty) {
            Ok(Some(self.expect(ty)?))
        } else {
            Ok(None)
        }
    }

    pub(crate) fn finish(self) -> WireResult<()> {
        if self.pos != self.data.len() {
            return Err(WireError::TrailingBytes);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Binding, certificate and ticket codecs

fn put_binding(w: &mut TlvWriter, binding: &HandshakeBinding) -> WireResult<()> {
    let kind = match binding.kind() {
        BindingKind::Nonce => 0u8,
        BindingKind::SessionId => 1u8,
    };
    let expected = match binding.kind() {
        BindingKind::Nonce => crate::names::NONCE_LEN,
        BindingKind::SessionId => crate::names::SESSION_ID_LEN,
    };
    if binding.value().len() != expected {
        return Err(WireError::BadFieldLength {
            field: F_BINDING,
            got: binding.value().len(),
            expected,
        });
    }
    let mut body = Vec::with_capacity(1 + binding.value().len());
    body.push(kind);
    body.extend_from_slice(binding.value());
    w.put(F_BINDING, &body)
}

fn read_binding(r: &mut TlvReader) -> WireResult<HandshakeBinding> {
    let v = r.expect(F_BINDING)?;
    if v.is_empty() {
        return Err(WireError::BadFieldLength {
            field: F_BINDING,
            got: 0,
            expected: 1 + crate::names::NONCE_LEN,
        });
    }
    let kind = match v[0] {
        0 => BindingKind::Nonce,
        1 => BindingKind::SessionId,
        _ => {
            return Err(WireError::InvalidValue {
                field: F_BINDING,
                what: "unknown binding kind",
            })
        }
    };
    HandshakeBinding::from_parts(kind, v[1..].to_vec()).ok_or(WireError::BadFieldLength {
        field: F_BINDING,
        got: v.len() - 1,
        expected: match kind {
            BindingKind::Nonce => crate::names::NONCE_LEN,
            BindingKind::SessionId => crate::names::SESSION_ID_LEN,
        },
    })
}

/// Canonical to-be-signed bytes of a certificate: every field TLV before the
/// signature, concatenated.
pub fn certificate_tbs_bytes(
    publisher_public_key: &[u8],
    authorized_prefixes: &[Vec<String>],
    not_before: u64,
    not_after: u64,
    owner_id: &str,
) -> WireResult<Vec<u8>> {
    let mut w = TlvWriter::new();
    w.put_fixed(F_CERT_PUBKEY, publisher_public_key, 32)?;
    for prefix in authorized_prefixes {
        validate_prefix(prefix).map_err(|_| WireError::InvalidValue {
            field: F_CERT_PREFIX,
            what: "invalid prefix labels",
        })?;
        w.put(F_CERT_PREFIX, prefix.join("/").as_bytes())?;
    }
    w.put_u64(F_CERT_NOT_BEFORE, not_before)?;
    w.put_u64(F_CERT_NOT_AFTER, not_after)?;
    w.put(F_CERT_OWNER, owner_id.as_bytes())?;
    Ok(w.finish())
}

fn certificate_body(cert: &PublisherCertificate) -> WireResult<Vec<u8>> {
    if cert.authorized_prefixes.is_empty() {
        return Err(WireError::InvalidValue {
            field: F_CERT_PREFIX,
            what: "certificate authorizes no prefixes",
        });
    }
    let mut body = certificate_tbs_bytes(
        &cert.publisher_public_key,
        &cert.authorized_prefixes,
        cert.not_before,
        cert.not_after,
        &cert.owner_id,
    )?;
    let mut w = TlvWriter::new();
    w.put_fixed(F_CERT_SIG, &cert.owner_signature, 64)?;
    body.extend_from_slice(&w.finish());
    Ok(body)
}

pub fn encode_certificate(cert: &PublisherCertificate) -> WireResult<Vec<u8>> {
    let mut w = TlvWriter::new();
    w.put(TYPE_CERTIFICATE, &certificate_body(cert)?)?;
    Ok(w.finish())
}

fn read_certificate_body(body: &[u8]) -> WireResult<PublisherCertificate> {
    let mut r = TlvReader::new(body);
    let publisher_public_key = r.expect_fixed(F_CERT_PUBKEY, 32)?.to_vec();
    let mut authorized_prefixes = Vec::new();
    while r.peek_type() == Some(F_CERT_PREFIX) {
        let text = r.expect_string(F_CERT_PREFIX)?;
        let labels: Vec<String> = text.split('/').map(str::to_string).collect();
        validate_prefix(&labels).map_err(|_| WireError::InvalidValue {
            field: F_CERT_PREFIX,
            what: "invalid prefix labels",
        })?;
        authorized_prefixes.push(labels);
    }
    if authorized_prefixes.is_empty() {
        return Err(WireError::InvalidValue {
            field: F_CERT_PREFIX,
            what: "certificate authorizes no prefixes",
        });
    }
    let not_before = r.expect_u64(F_CERT_NOT_BEFORE)?;
    let not_after = r.expect_u64(F_CERT_NOT_AFTER)?;
    let owner_id = r.expect_string(F_CERT_OWNER)?;
    let owner_signature = r.expect_fixed(F_CERT_SIG, 64)?.to_vec();
    r.finish()?;
    Ok(PublisherCertificate {
        publisher_public_key,
        authorized_prefixes,
        not_before,
        not_after,
        owner_id,
        owner_signature,
    })
}

pub fn decode_certificate(bytes: &[u8]) -> WireResult<PublisherCertificate> {
    let mut r = TlvReader::new(bytes);
    let body = r.expect(TYPE_CERTIFICATE)?;
    r.finish()?;
    read_certificate_body(body)
}

fn ticket_body(ticket: &SessionTicket) -> WireResult<Vec<u8>> {
    let mut w = TlvWriter::new();
    w.put_fixed(F_TKT_KEY_ID, &ticket.key_id, 8)?;
    w.put_fixed(F_TKT_NONCE, &ticket.nonce, 12)?;
    w.put(F_TKT_SEALED, &ticket.sealed)?;
    Ok(w.finish())
}

fn read_ticket_body(body: &[u8]) -> WireResult<SessionTicket> {
    let mut r = TlvReader::new(body);
    let key_id: [u8; 8] = r.expect_fixed(F_TKT_KEY_ID, 8)?.try_into().unwrap();
    let nonce: [u8; 12] = r.expect_fixed(F_TKT_NONCE, 12)?.try_into().unwrap();
    let sealed = r.expect(F_TKT_SEALED)?.to_vec();
    r.finish()?;
    Ok(SessionTicket { key_id, nonce, sealed })
}

pub fn encode_ticket(ticket: &SessionTicket) -> WireResult<Vec<u8>> {
    let mut w = TlvWriter::new();
    w.put(TYPE_TICKET, &ticket_body(ticket)?)?;
    Ok(w.finish())
}

pub fn decode_ticket(bytes: &[u8]) -> WireResult<SessionTicket> {
    let mut r = TlvReader::new(bytes);
    let body = r.expect(TYPE_TICKET)?;
    r.finish()?;
    read_ticket_body(body)
}

fn put_name(w: &mut TlvWriter, name: &ContentName) -> WireResult<()> {
    w.put(F_NAME_PREFIX, name.routable().as_bytes())?;
    if let Some(suffix) = name.suffix() {
        w.put(F_NAME_SUFFIX, suffix)?;
    }
    Ok(())
}

fn read_name(r: &mut TlvReader) -> WireResult<ContentName> {
    let text = r.expect_string(F_NAME_PREFIX)?;
    let suffix = r.optional(F_NAME_SUFFIX)?.map(|v| v.to_vec());
    let labels: Vec<String> = text.split('/').map(str::to_string).collect();
    validate_prefix(&labels).map_err(|_| WireError::InvalidValue {
        field: F_NAME_PREFIX,
        what: "invalid prefix labels",
    })?;
    ContentName::new(labels, suffix).map_err(|_| WireError::InvalidValue {
        field: F_NAME_PREFIX,
        what: "invalid content name",
    })
}

// ---------------------------------------------------------------------------
// Payload codec

fn payload_body(payload: &Payload) -> WireResult<Vec<u8>> {
    let mut w = TlvWriter::new();
    match payload {
        Payload::SubHello(p) => {
            w.put_fixed(F_CLIENT_RANDOM, &p.client_random, RANDOM_LEN)?;
            let mut suites = Vec::with_capacity(p.offered_suites.len() * 2);
            for id in &p.offered_suites {
                suites.extend_from_slice(&id.to_be_bytes());
            }
            w.put(F_SUITES, &suites)?;
            put_binding(&mut w, &p.binding)?;
            if let Some(ticket) = &p.ticket {
                w.put(TYPE_TICKET, &ticket_body(ticket)?)?;
            }
        }
        Payload::PubHello(p) => {
            w.put_fixed(F_SERVER_RANDOM, &p.server_random, RANDOM_LEN)?;
            w.put_u16(F_CHOSEN_SUITE, p.chosen_suite)?;
            w.put(TYPE_CERTIFICATE, &certificate_body(&p.certificate)?)?;
            w.put(F_EPHEMERAL_PUBLIC, &p.ephemeral_public)?;
            w.put(F_TRANSCRIPT_SIG, &p.transcript_signature)?;
            w.put_fixed(F_SESSION_ID, &p.session_id, SESSION_ID_LEN)?;
            w.put_bool(F_CERT_REQUEST, p.certificate_request)?;
        }
        Payload::SubFinish(p) => {
            w.put(F_EPHEMERAL_PUBLIC, &p.ephemeral_public)?;
            w.put(F_FINISHED_MAC, &p.finished_mac)?;
            put_binding(&mut w, &p.binding)?;
            if let Some(cb) = &p.channel_binding {
                w.put_fixed(F_CHANNEL_BINDING, &channel_binding_bytes(cb), CHANNEL_BINDING_LEN)?;
            }
        }
        Payload::PubFinish(p) => {
            w.put(F_FINISHED_MAC, &p.finished_mac)?;
            if let Some(sr) = &p.server_random {
                w.put_fixed(F_SERVER_RANDOM, sr, RANDOM_LEN)?;
            }
            if let Some(ticket) = &p.ticket {
                w.put(TYPE_TICKET, &ticket_body(ticket)?)?;
            }
        }
        Payload::DataRecord(p) => {
            w.put_u64(F_SEQ, p.seq)?;
            w.put(F_CIPHERTEXT, &p.ciphertext)?;
        }
        Payload::SigRequest(p) => {
            put_name(&mut w, &p.name)?;
            w.put(F_TO_BE_SIGNED, &p.to_be_signed)?;
        }
        Payload::SigResponse(p) => {
            w.put(F_SIGNATURE, &p.signature)?;
        }
        Payload::Alert(p) => {
            w.put_u16(F_ALERT_CODE, p.code)?;
            w.put(F_ALERT_REASON, p.reason.as_bytes())?;
        }
    }
    Ok(w.finish())
}

/// The serialized payload fields that trail the finished MAC in a finish
/// publication. The publisher's finished MAC covers these bytes so that the
/// attached ticket and resumption randomness cannot be swapped undetected.
pub fn pub_finish_trailer_bytes(
    server_random: Option<&[u8]>,
    ticket: Option<&SessionTicket>,
) -> WireResult<Vec<u8>> {
    let mut w = TlvWriter::new();
    if let Some(sr) = server_random {
        w.put_fixed(F_SERVER_RANDOM, sr, RANDOM_LEN)?;
    }
    if let Some(t) = ticket {
        w.put(TYPE_TICKET, &ticket_body(t)?)?;
    }
    Ok(w.finish())
}

pub(crate) fn channel_binding_bytes(cb: &ChannelBinding) -> Vec<u8> {
    let mut out = Vec::with_capacity(CHANNEL_BINDING_LEN);
    out.extend_from_slice(&cb.public_key);
    out.extend_from_slice(&cb.signature);
    out
}

/// Encode a payload as a standalone TLV, exactly as it appears inside an
/// envelope. These bytes feed the handshake transcript and, for signature
/// requests, the sealed records of the upstream channel.
pub fn encode_payload(payload: &Payload) -> WireResult<Vec<u8>> {
    let mut w = TlvWriter::new();
    w.put(payload.type_code(), &payload_body(payload)?)?;
    Ok(w.finish())
}

fn read_payload(ty: u16, body: &[u8]) -> WireResult<Payload> {
    let mut r = TlvReader::new(body);
    let payload = match ty {
        TYPE_SUB_HELLO => {
            let client_random = r.expect_fixed(F_CLIENT_RANDOM, RANDOM_LEN)?.to_vec();
            let raw = r.expect(F_SUITES)?;
            if raw.len() % 2 != 0 {
                return Err(WireError::InvalidValue {
                    field: F_SUITES,
                    what: "suite list length must be even",
                });
            }
            let offered_suites = raw
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect();
            let binding = read_binding(&mut r)?;
            let ticket = match r.optional(TYPE_TICKET)? {
                Some(body) => Some(read_ticket_body(body)?),
                None => None,
            };
            Payload::SubHello(SubHello {
                client_random,
                offered_suites,
                binding,
                ticket,
            })
        }
        TYPE_PUB_HELLO => {
            let server_random = r.expect_fixed(F_SERVER_RANDOM, RANDOM_LEN)?.to_vec();
            let chosen_suite = r.expect_u16(F_CHOSEN_SUITE)?;
            let certificate = read_certificate_body(r.expect(TYPE_CERTIFICATE)?)?;
            let ephemeral_public = r.expect(F_EPHEMERAL_PUBLIC)?.to_vec();
            let transcript_signature = r.expect(F_TRANSCRIPT_SIG)?.to_vec();
            let session_id = r.expect_fixed(F_SESSION_ID, SESSION_ID_LEN)?.to_vec();
            let certificate_request = r.expect_bool(F_CERT_REQUEST)?;
            Payload::PubHello(PubHello {
                server_random,
                chosen_suite,
                certificate,
                ephemeral_public,
                transcript_signature,
                session_id,
                certificate_request,
            })
        }
        TYPE_SUB_FINISH => {
            let ephemeral_public = r.expect(F_EPHEMERAL_PUBLIC)?.to_vec();
            let finished_mac = r.expect(F_FINISHED_MAC)?.to_vec();
            let binding = read_binding(&mut r)?;
            let channel_binding = match r.optional(F_CHANNEL_BINDING)? {
                Some(v) => {
                    if v.len() != CHANNEL_BINDING_LEN {
                        return Err(WireError::BadFieldLength {
                            field: F_CHANNEL_BINDING,
                            got: v.len(),
                            expected: CHANNEL_BINDING_LEN,
                        });
                    }
                    Some(ChannelBinding {
                        public_key: v[..32].try_into().unwrap(),
                        signature: v[32..].to_vec(),
                    })
                }
                None => None,
            };
            Payload::SubFinish(SubFinish {
                ephemeral_public,
                finished_mac,
                binding,
                channel_binding,
            })
        }
        TYPE_PUB_FINISH => {
            let finished_mac = r.expect(F_FINISHED_MAC)?.to_vec();
            let server_random = r
                .optional(F_SERVER_RANDOM)?
                .map(|v| {
                    if v.len() != RANDOM_LEN {
                        Err(WireError::BadFieldLength {
                            field: F_SERVER_RANDOM,
                            got: v.len(),
                            expected: RANDOM_LEN,
                        })
                    } else {
                        Ok(v.to_vec())
                    }
                })
                .transpose()?;
            let ticket = match r.optional(TYPE_TICKET)? {
                Some(body) => Some(read_ticket_body(body)?),
                None => None,
            };
            Payload::PubFinish(PubFinish {
                finished_mac,
                server_random,
                ticket,
            })
        }
        TYPE_DATA_RECORD => {
            let seq = r.expect_u64(F_SEQ)?;
            let ciphertext = r.expect(F_CIPHERTEXT)?.to_vec();
            Payload::DataRecord(DataRecord { seq, ciphertext })
        }
        TYPE_SIG_REQUEST => {
            let name = read_name(&mut r)?;
            let to_be_signed = r.expect(F_TO_BE_SIGNED)?.to_vec();
            Payload::SigRequest(SigRequest { name, to_be_signed })
        }
        TYPE_SIG_RESPONSE => {
            let signature = r.expect(F_SIGNATURE)?.to_vec();
            Payload::SigResponse(SigResponse { signature })
        }
        TYPE_ALERT => {
            let code = r.expect_u16(F_ALERT_CODE)?;
            let reason = r.expect_string(F_ALERT_REASON)?;
            Payload::Alert(Alert { code, reason })
        }
        other => return Err(WireError::UnknownType(other)),
    };
    r.finish()?;
    Ok(payload)
}

/// Decode a standalone payload TLV (the plaintext of a sealed control
/// record, for example).
pub fn decode_payload(bytes: &[u8]) -> WireResult<Payload> {
    let mut r = TlvReader::new(bytes);
    let (ty, body) = r.next()?;
    if !(TYPE_SUB_HELLO..=TYPE_ALERT).contains(&ty) {
        return Err(WireError::UnknownType(ty));
    }
    let payload = read_payload(ty, body)?;
    r.finish()?;
    Ok(payload)
}

// ---------------------------------------------------------------------------
// Envelope codec

fn wire_name_labels(wire_name: &str) -> WireResult<Vec<String>> {
    let labels: Vec<String> = wire_name.split('/').map(str::to_string).collect();
    validate_prefix(&labels).map_err(|_| WireError::InvalidValue {
        field: F_WIRE_NAME,
        what: "invalid wire name labels",
    })?;
    Ok(labels)
}

/// The forwarding identifier must cover either all wire-name labels or all
/// but a trailing correlation label.
fn check_name_consistency(wire_name: &str, fid: &ForwardingId) -> WireResult<()> {
    let wire_labels = wire_name_labels(wire_name)?;
    let fid_labels = fid.labels();
    let ok = fid_labels == wire_labels
        || (wire_labels.len() == fid_labels.len() + 1
            && wire_labels[..fid_labels.len()] == fid_labels[..]);
    if ok {
        Ok(())
    } else {
        Err(WireError::InvalidValue {
            field: F_FORWARDING_ID,
            what: "forwarding id does not match wire name",
        })
    }
}

pub fn encode_envelope(env: &Envelope) -> WireResult<Vec<u8>> {
    check_name_consistency(&env.wire_name, &env.forwarding_id)?;
    let mut body = TlvWriter::new();
    let dir = match env.direction {
        Direction::Subscription => 0u8,
        Direction::Publication => 1u8,
    };
    body.put(F_DIRECTION, &[dir])?;
    body.put(F_WIRE_NAME, env.wire_name.as_bytes())?;
    body.put(F_FORWARDING_ID, env.forwarding_id.as_bytes())?;
    body.put(F_FLAGS, &[env.flags.bits()])?;
    body.put(env.payload.type_code(), &payload_body(&env.payload)?)?;
    let mut w = TlvWriter::new();
    w.put(TYPE_ENVELOPE, &body.finish())?;
    Ok(w.finish())
}

pub fn decode_envelope(bytes: &[u8]) -> WireResult<Envelope> {
    let mut top = TlvReader::new(bytes);
    let (ty, body) = top.next()?;
    if ty != TYPE_ENVELOPE {
        return Err(WireError::UnknownType(ty));
    }
    top.finish()?;

    let mut r = TlvReader::new(body);
    let dir_byte = r.expect_fixed(F_DIRECTION, 1)?[0];
    let direction = match dir_byte {
        0 => Direction::Subscription,
        1 => Direction::Publication,
        _ => {
            return Err(WireError::InvalidValue {
                field: F_DIRECTION,
                what: "unknown direction",
            })
        }
    };
    let wire_name = r.expect_string(F_WIRE_NAME)?;
    wire_name_labels(&wire_name)?;
    let forwarding_id =
        ForwardingId::from_wire(r.expect(F_FORWARDING_ID)?).map_err(|_| WireError::InvalidValue {
            field: F_FORWARDING_ID,
            what: "invalid forwarding id labels",
        })?;
    check_name_consistency(&wire_name, &forwarding_id)?;
    let flag_bits = r.expect_fixed(F_FLAGS, 1)?[0];
    let flags = EnvelopeFlags::from_bits(flag_bits).ok_or(WireError::InvalidValue {
        field: F_FLAGS,
        what: "unknown flag bits",
    })?;
    let (pty, pbody) = r.next()?;
    if !(TYPE_SUB_HELLO..=TYPE_ALERT).contains(&pty) {
        return Err(WireError::UnknownType(pty));
    }
    let payload = read_payload(pty, pbody)?;
    r.finish()?;

    // Handshake payloads ride in a fixed direction; anything else is a
    // malformed envelope rather than a different message.
    let direction_ok = match payload {
        Payload::SubHello(_) | Payload::SubFinish(_) => direction == Direction::Subscription,
        Payload::PubHello(_) | Payload::PubFinish(_) => direction == Direction::Publication,
        _ => true,
    };
    if !direction_ok {
        return Err(WireError::InvalidValue {
            field: F_DIRECTION,
            what: "direction does not match payload kind",
        });
    }

    Ok(Envelope {
        direction,
        wire_name,
        forwarding_id,
        flags,
        payload,
    })
}

// ---------------------------------------------------------------------------
// Fixture file formats

fn ticket_key_body(tk: &TicketKey) -> WireResult<Vec<u8>> {
    let mut w = TlvWriter::new();
    w.put_fixed(F_TKT_KEY_ID, &tk.key_id, 8)?;
    w.put_fixed(F_TK_KEY, &tk.key, 16)?;
    w.put_u64(F_TK_ISSUED_AT, tk.issued_at)?;
    w.put_u64(F_TK_LIFETIME, tk.lifetime)?;
    Ok(w.finish())
}

fn read_ticket_key_body(body: &[u8]) -> WireResult<TicketKey> {
    let mut r = TlvReader::new(body);
    let key_id: [u8; 8] = r.expect_fixed(F_TKT_KEY_ID, 8)?.try_into().unwrap();
    let key: [u8; 16] = r.expect_fixed(F_TK_KEY, 16)?.try_into().unwrap();
    let issued_at = r.expect_u64(F_TK_ISSUED_AT)?;
    let lifetime = r.expect_u64(F_TK_LIFETIME)?;
    r.finish()?;
    Ok(TicketKey {
        key_id,
        key,
        issued_at,
        lifetime,
    })
}

/// Ticket key ring file: a sequence of ticket key TLVs.
pub fn encode_ticket_key_ring(ring: &[TicketKey]) -> WireResult<Vec<u8>> {
    let mut w = TlvWriter::new();
    for tk in ring {
        w.put(TYPE_TICKET_KEY, &ticket_key_body(tk)?)?;
    }
    Ok(w.finish())
}

pub fn decode_ticket_key_ring(bytes: &[u8]) -> WireResult<Vec<TicketKey>> {
    let mut r = TlvReader::new(bytes);
    let mut ring = Vec::new();
    while r.pos < r.data.len() {
        let body = r.expect(TYPE_TICKET_KEY)?;
        ring.push(read_ticket_key_body(body)?);
    }
    Ok(ring)
}

/// Signing key pair fixture file, written by the key tooling.
pub struct KeyPairFile {
    pub id: String,
    pub public: [u8; 32],
    pub private: [u8; 32],
}

pub fn encode_keypair_file(kp: &KeyPairFile) -> WireResult<Vec<u8>> {
    let mut body = TlvWriter::new();
    body.put(F_KP_ID, kp.id.as_bytes())?;
    body.put_fixed(F_KP_PUBLIC, &kp.public, 32)?;
    body.put_fixed(F_KP_PRIVATE, &kp.private, 32)?;
    let mut w = TlvWriter::new();
    w.put(TYPE_KEYPAIR, &body.finish())?;
    Ok(w.finish())
}

pub fn decode_keypair_file(bytes: &[u8]) -> WireResult<KeyPairFile> {
    let mut top = TlvReader::new(bytes);
    let body = top.expect(TYPE_KEYPAIR)?;
    top.finish()?;
    let mut r = TlvReader::new(body);
    let id = r.expect_string(F_KP_ID)?;
    let public: [u8; 32] = r.expect_fixed(F_KP_PUBLIC, 32)?.try_into().unwrap();
    let private: [u8; 32] = r.expect_fixed(F_KP_PRIVATE, 32)?.try_into().unwrap();
    r.finish()?;
    Ok(KeyPairFile { id, public, private })
}
