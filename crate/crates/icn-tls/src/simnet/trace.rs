//! Simulation traces: every send, delivery and drop, plus per-flow
//! outcomes, exportable as CSV and hashable for determinism checks.

use crate::crypto::sha256;
use crate::middlebox::AccessStats;
use crate::wire::{encode_envelope, Envelope};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Send,
    Deliver,
    Drop,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Send => "send",
            EventKind::Deliver => "deliver",
            EventKind::Drop => "drop",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimEvent {
    pub time_ms: f64,
    pub kind: EventKind,
    pub from: String,
    pub to: String,
    pub envelope: Envelope,
}

/// One subscriber flow's outcome, keyed by (subscriber node, routable name).
#[derive(Debug, Clone, Default)]
pub struct FlowReport {
    pub established: bool,
    pub resumed: bool,
    pub error: Option<String>,
    /// Handshake messages this subscriber sent or received on the flow.
    pub handshake_messages: u32,
    /// Virtual time at which the first content byte became readable.
    pub first_byte_ms: Option<f64>,
    pub plaintexts: Vec<Vec<u8>>,
    pub key_fingerprint: Option<String>,
    pub received_ticket: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MeasureError {
    #[error("flow ({0}, {1}) did not complete")]
    FlowIncomplete(String, String),
}

/// Everything a run produces. Events are the authoritative record of what
/// crossed the network; the remaining fields are end-state introspection
/// for assertions (publisher-side fingerprints, access statistics, the
/// middlebox state blobs and publisher signing keys needed by the
/// secret-containment scan).
#[derive(Debug, Default)]
pub struct Trace {
    pub events: Vec<SimEvent>,
    pub flows: BTreeMap<(String, String), FlowReport>,
    pub stats: BTreeMap<String, AccessStats>,
    pub publisher_session_keys: BTreeMap<(String, String), String>,
    pub middlebox_state_blobs: BTreeMap<String, Vec<Vec<u8>>>,
    pub publisher_signing_keys: BTreeMap<String, Vec<u8>>,
}

impl Trace {
    pub(crate) fn record(
        &mut self,
        time_ms: f64,
        kind: EventKind,
        from: &str,
        to: &str,
        envelope: Envelope,
    ) {
        self.events.push(SimEvent {
            time_ms,
            kind,
            from: from.to_string(),
            to: to.to_string(),
            envelope,
        });
    }

    pub(crate) fn flow_mut(&mut self, node: &str, name_text: &str) -> &mut FlowReport {
        self.flows
            .entry((node.to_string(), name_text.to_string()))
            .or_default()
    }

    pub fn flow(&self, node: &str, name_text: &str) -> Option<&FlowReport> {
        self.flows.get(&(node.to_string(), name_text.to_string()))
    }

    /// CSV export: `time_ms,kind,from,to,msg_type`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_ms,kind,from,to,msg_type\n");
        for ev in &self.events {
            out.push_str(&format!(
                "{:?},{},{},{},{}\n",
                ev.time_ms,
                ev.kind.as_str(),
                ev.from,
                ev.to,
                ev.envelope.payload.type_name()
            ));
        }
        out
    }

    /// Hash over the CSV lines and every envelope's encoded bytes; two runs
    /// of the same scenario must agree on it exactly.
    pub fn hash(&self) -> String {
        let mut all = self.to_csv().into_bytes();
        for ev in &self.events {
            if let Ok(bytes) = encode_envelope(&ev.envelope) {
                all.extend_from_slice(&bytes);
            }
        }
        hex::encode(sha256(&all))
    }

    /// Every message byte that crossed the simulated network, for
    /// containment scans.
    pub fn wire_bytes(&self) -> Vec<Vec<u8>> {
        self.events
            .iter()
            .filter(|ev| ev.kind != EventKind::Drop)
            .filter_map(|ev| encode_envelope(&ev.envelope).ok())
            .collect()
    }
}

/// First-byte delay for a completed flow, in virtual milliseconds from
/// scenario start.
pub fn measure_first_byte(trace: &Trace, subscriber: &str, name_text: &str) -> Result<f64, MeasureError> {
    trace
        .flow(subscriber, name_text)
        .and_then(|f| f.first_byte_ms)
        .ok_or_else(|| MeasureError::FlowIncomplete(subscriber.to_string(), name_text.to_string()))
}
