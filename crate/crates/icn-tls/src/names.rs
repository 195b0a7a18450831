//! Content names, forwarding identifiers and handshake correlation bindings.
//!
//! A content name has a routable prefix (a list of labels) and an optional
//! opaque suffix. Only the prefix ever reaches the network: forwarding
//! identifiers and wire names are derived from it alone, so a passive
//! observer learns at most the prefix of what a subscriber asked for.
//!
//! Handshake subscriptions must not be aggregated by routers. When nonce
//! correlation is in use the nonce is appended to the wire name as an extra
//! hex label, which makes every handshake subscription name unique.

use rand::{CryptoRng, RngCore};
use thiserror::Error;

pub const NONCE_LEN: usize = 16;
pub const SESSION_ID_LEN: usize = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NameError {
    #[error("prefix must contain at least one label")]
    EmptyPrefix,
    #[error("invalid label {0:?}")]
    InvalidLabel(String),
    #[error("only nonce bindings appear in wire names")]
    WrongBindingKind,
}

fn check_label(label: &str) -> Result<(), NameError> {
    if label.is_empty() || label.contains('/') || label.contains('\0') {
        return Err(NameError::InvalidLabel(label.to_string()));
    }
    Ok(())
}

/// Validate a list of prefix labels without building a name.
pub fn validate_prefix(labels: &[String]) -> Result<(), NameError> {
    if labels.is_empty() {
        return Err(NameError::EmptyPrefix);
    }
    for label in labels {
        check_label(label)?;
    }
    Ok(())
}

/// A content item name: routable prefix plus network-hidden suffix.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentName {
    prefix: Vec<String>,
    suffix: Option<Vec<u8>>,
}

impl ContentName {
    pub fn new<I, S>(labels: I, suffix: Option<Vec<u8>>) -> Result<Self, NameError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let prefix: Vec<String> = labels.into_iter().map(Into::into).collect();
        validate_prefix(&prefix)?;
        Ok(ContentName { prefix, suffix })
    }

    /// Parse the canonical `label1/label2` text form (no suffix).
    pub fn parse(text: &str) -> Result<Self, NameError> {
        if text.is_empty() {
            return Err(NameError::EmptyPrefix);
        }
        ContentName::new(text.split('/').map(str::to_string), None)
    }

    pub fn prefix(&self) -> &[String] {
        &self.prefix
    }

    pub fn suffix(&self) -> Option<&[u8]> {
        self.suffix.as_deref()
    }

    /// The network-visible forwarding identifier: prefix labels joined by
    /// `/`. The suffix never contributes.
    pub fn routable(&self) -> ForwardingId {
        ForwardingId(self.prefix.join("/").into_bytes())
    }

    /// True when `candidate` is a label-wise prefix of this name's prefix.
    pub fn starts_with(&self, candidate: &[String]) -> bool {
        candidate.len() <= self.prefix.len() && self.prefix[..candidate.len()] == *candidate
    }
}

impl std::fmt::Display for ContentName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // Suffix intentionally omitted: Display output may end up in traces.
        write!(f, "{}", self.prefix.join("/"))
    }
}

impl std::fmt::Debug for ContentName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.suffix {
            Some(s) => write!(f, "ContentName({}, suffix[{}B])", self, s.len()),
            None => write!(f, "ContentName({})", self),
        }
    }
}

/// Canonical routing handle derived from a name's prefix. Equal prefixes
/// yield byte-identical forwarding identifiers.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ForwardingId(Vec<u8>);

impl ForwardingId {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.0).expect("forwarding ids are built from UTF-8 labels")
    }

    pub(crate) fn from_wire(bytes: &[u8]) -> Result<Self, NameError> {
        let text = std::str::from_utf8(bytes).map_err(|_| NameError::EmptyPrefix)?;
        let labels: Vec<String> = text.split('/').map(str::to_string).collect();
        validate_prefix(&labels)?;
        Ok(ForwardingId(bytes.to_vec()))
    }

    pub fn labels(&self) -> Vec<String> {
        self.as_str().split('/').map(str::to_string).collect()
    }
}

impl std::fmt::Debug for ForwardingId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ForwardingId({})", self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BindingKind {
    Nonce,
    SessionId,
}

/// Correlates the two subscriptions of one handshake: either a statistically
/// unique nonce appended to the wire name, or the publisher-assigned session
/// identifier carried in the payload.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct HandshakeBinding {
    kind: BindingKind,
    value: Vec<u8>,
}

impl HandshakeBinding {
    pub fn fresh_nonce<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut value = vec![0u8; NONCE_LEN];
        rng.fill_bytes(&mut value);
        HandshakeBinding {
            kind: BindingKind::Nonce,
            value,
        }
    }

    pub fn session_id(id: [u8; SESSION_ID_LEN]) -> Self {
        HandshakeBinding {
            kind: BindingKind::SessionId,
            value: id.to_vec(),
        }
    }

    /// The all-zero placeholder a subscriber sends before the publisher has
    /// assigned a session identifier.
    pub fn unassigned_session() -> Self {
        HandshakeBinding {
            kind: BindingKind::SessionId,
            value: vec![0u8; SESSION_ID_LEN],
        }
    }

    pub fn kind(&self) -> BindingKind {
        self.kind
    }

    pub fn value(&self) -> &[u8] {
        &self.value
    }

    pub fn is_unassigned(&self) -> bool {
        self.kind == BindingKind::SessionId && self.value.iter().all(|&b| b == 0)
    }

    pub(crate) fn from_parts(kind: BindingKind, value: Vec<u8>) -> Option<Self> {
        let expected = match kind {
            BindingKind::Nonce => NONCE_LEN,
            BindingKind::SessionId => SESSION_ID_LEN,
        };
        (value.len() == expected).then_some(HandshakeBinding { kind, value })
    }
}

impl std::fmt::Debug for HandshakeBinding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}({})", self.kind, hex::encode(&self.value))
    }
}

/// Wire name for a handshake subscription: the routable prefix with the hex
/// nonce appended as a final label. Distinct nonces give distinct wire names,
/// which defeats subscription aggregation.
pub fn bind_subscription(name: &ContentName, binding: &HandshakeBinding) -> Result<String, NameError> {
    if binding.kind() != BindingKind::Nonce {
        return Err(NameError::WrongBindingKind);
    }
    let mut wire = name.routable().as_str().to_string();
    wire.push('/');
    wire.push_str(&hex::encode(binding.value()));
    Ok(wire)
}

/// Recover the routable name from a received wire name, given the payload
/// binding. For nonce bindings the final label must be the hex nonce and is
/// stripped; for session bindings the wire name is the prefix as-is.
///
/// Returns `None` when the wire name and binding do not agree.
pub fn unbind_wire_name(wire_name: &str, binding: &HandshakeBinding) -> Option<ContentName> {
    let labels: Vec<&str> = wire_name.split('/').collect();
    match binding.kind() {
        BindingKind::Nonce => {
            let (last, prefix) = labels.split_last()?;
            if prefix.is_empty() || *last != hex::encode(binding.value()) {
                return None;
            }
            ContentName::new(prefix.iter().map(|s| s.to_string()), None).ok()
        }
        BindingKind::SessionId => {
            ContentName::new(labels.iter().map(|s| s.to_string()), None).ok()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::collections::HashSet;

    #[test]
    fn minimal_valid_name() {
        let name = ContentName::new(["movies", "trailer1"], None).unwrap();
        assert_eq!(name.prefix(), ["movies", "trailer1"]);
        assert_eq!(name.suffix(), None);
    }

    #[test]
    fn empty_prefix_rejected() {
        let err = ContentName::new(Vec::<String>::new(), None).unwrap_err();
        assert_eq!(err, NameError::EmptyPrefix);
    }

    #[test]
    fn separator_in_label_rejected() {
        let err = ContentName::new(["a/b"], None).unwrap_err();
        assert!(matches!(err, NameError::InvalidLabel(_)));
        let err = ContentName::new(["a", ""], None).unwrap_err();
        assert!(matches!(err, NameError::InvalidLabel(_)));
        let err = ContentName::new(["a\0b"], None).unwrap_err();
        assert!(matches!(err, NameError::InvalidLabel(_)));
    }

    #[test]
    fn routable_ignores_suffix() {
        let a = ContentName::new(["a", "b"], Some(b"secret".to_vec())).unwrap();
        let b = ContentName::new(["a", "b"], Some(b"other".to_vec())).unwrap();
        assert_eq!(a.routable().as_bytes(), b"a/b");
        assert_eq!(a.routable(), b.routable());
        let single = ContentName::new(["a"], None).unwrap();
        assert_eq!(single.routable().as_bytes(), b"a");
    }

    #[test]
    fn bind_appends_hex_nonce() {
        let name = ContentName::new(["a", "b"], None).unwrap();
        let mut value = vec![0u8; NONCE_LEN];
        value[NONCE_LEN - 1] = 1;
        let binding = HandshakeBinding::from_parts(BindingKind::Nonce, value).unwrap();
        let wire = bind_subscription(&name, &binding).unwrap();
        assert_eq!(wire, format!("a/b/{}", "00".repeat(15) + "01"));
        let recovered = unbind_wire_name(&wire, &binding).unwrap();
        assert_eq!(recovered.prefix(), name.prefix());
    }

    #[test]
    fn session_binding_rejected_in_wire_name() {
        let name = ContentName::new(["a"], None).unwrap();
        let binding = HandshakeBinding::unassigned_session();
        assert_eq!(
            bind_subscription(&name, &binding).unwrap_err(),
            NameError::WrongBindingKind
        );
    }

    #[test]
    fn distinct_nonces_give_distinct_wire_names() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let name = ContentName::new(["a", "b"], None).unwrap();
        let w1 = bind_subscription(&name, &HandshakeBinding::fresh_nonce(&mut rng)).unwrap();
        let w2 = bind_subscription(&name, &HandshakeBinding::fresh_nonce(&mut rng)).unwrap();
        assert_ne!(w1, w2);
    }

    #[test]
    fn bind_injective_over_many_nonces() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let name = ContentName::new(["stream"], None).unwrap();
        let mut seen = HashSet::new();
        for _ in 0..100_000 {
            let wire =
                bind_subscription(&name, &HandshakeBinding::fresh_nonce(&mut rng)).unwrap();
            assert!(seen.insert(wire), "wire name collision");
        }
    }

    proptest! {
        #[test]
        fn routable_equality_iff_prefix_equality(
            p1 in proptest::collection::vec("[a-z]{1,8}", 1..5),
            p2 in proptest::collection::vec("[a-z]{1,8}", 1..5),
            s1 in proptest::option::of(proptest::collection::vec(any::<u8>(), 0..16)),
            s2 in proptest::option::of(proptest::collection::vec(any::<u8>(), 0..16)),
        ) {
            let n1 = ContentName::new(p1.clone(), s1).unwrap();
            let n2 = ContentName::new(p2.clone(), s2).unwrap();
            prop_assert_eq!(n1.routable() == n2.routable(), p1 == p2);
        }

        #[test]
        fn suffix_never_appears_in_forwarding_id(
            prefix in proptest::collection::vec("[a-z]{1,8}", 1..5),
            suffix in proptest::collection::vec(any::<u8>(), 4..32),
        ) {
            let name = ContentName::new(prefix, Some(suffix.clone())).unwrap();
            let routable = name.routable();
            let visible = routable.as_bytes();
            let leaked = suffix.len() <= visible.len()
                && visible.windows(suffix.len()).any(|w| w == &suffix[..]);
            prop_assert!(!leaked);
        }
    }
}
