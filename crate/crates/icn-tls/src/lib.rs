//! Content-oriented transport security for publish/subscribe networks where
//! requests are addressed by name rather than by host.
//!
//! The library provides:
//!
//! - a four-message handshake (two subscriptions, two publications) that
//!   establishes directional traffic keys between a subscriber and a
//!   publisher holding an owner-signed certificate for the content name
//!   ([`handshake`], [`credentials`]);
//! - a record layer with replay rejection and name-bound additional data
//!   ([`session`]);
//! - session tickets sealed under a rotating group key, so a session opened
//!   at one trusted publisher can continue at another in two messages
//!   ([`session`]);
//! - delegated signing, which lets an in-network cache or replication point
//!   answer handshakes for content it stores by fetching the one signature
//!   it cannot produce from the trusted publisher, per session, over a
//!   secured channel ([`middlebox`]);
//! - a deterministic discrete-event simulator with latency-weighted
//!   forwarding, subscription aggregation and caching semantics, used for
//!   the first-byte latency evaluation ([`simnet`], [`cli`]).
//!
//! Run `cargo run -- eval` for the latency comparison, `cargo run -- demo
//! handshake` (or `migrate`, `intercept`, `compromise`) for annotated
//! scenario walkthroughs, and see `examples/` for library usage.

pub mod cli;
pub mod credentials;
pub mod crypto;
pub mod handshake;
pub mod middlebox;
pub mod names;
pub mod session;
pub mod simnet;
pub mod wire;

pub use credentials::{authorizes, issue_certificate, verify_certificate, PublisherCertificate};
pub use names::{bind_subscription, ContentName, ForwardingId, HandshakeBinding};
pub use session::{EstablishedSession, KeyGenerator, SessionTicket, TicketKey};
pub use wire::{Envelope, Payload};
