//! Owner key pairs and owner-signed publisher certificates.
//!
//! A content owner signs a certificate binding a publisher's verification
//! key to the name prefixes that publisher is authorized to serve. There are
//! no chains: owner to publisher is one hop, and owner public keys are
//! distributed out of band (modeled as a [`TrustStore`] map).

use crate::crypto::{verify_signature, SigningKeyPair};
use crate::names::{validate_prefix, ContentName, NameError};
use crate::wire::certificate_tbs_bytes;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CertError {
    #[error("certificate must authorize at least one prefix")]
    EmptyAuthorization,
    #[error("not_before must precede not_after")]
    InvalidValidityWindow,
    #[error("owner signature does not verify")]
    BadSignature,
    #[error("certificate has expired")]
    Expired,
    #[error("certificate is not yet valid")]
    NotYetValid,
    #[error("no trust anchor for owner {0:?}")]
    UnknownOwner(String),
    #[error(transparent)]
    InvalidPrefix(#[from] NameError),
}

/// An owner's signing identity. The private half is never carried by any
/// wire message or trace.
pub struct OwnerKeyPair {
    keypair: SigningKeyPair,
    owner_id: String,
}

impl OwnerKeyPair {
    pub fn new(owner_id: impl Into<String>, keypair: SigningKeyPair) -> Self {
        OwnerKeyPair {
            keypair,
            owner_id: owner_id.into(),
        }
    }

    pub fn generate<R: rand::RngCore + rand::CryptoRng>(
        owner_id: impl Into<String>,
        rng: &mut R,
    ) -> Self {
        OwnerKeyPair::new(owner_id, SigningKeyPair::generate(rng))
    }

    pub fn owner_id(&self) -> &str {
        &self.owner_id
    }

    pub fn public_key(&self) -> [u8; 32] {
        self.keypair.public_key()
    }

    pub(crate) fn keypair(&self) -> &SigningKeyPair {
        &self.keypair
    }
}

impl std::fmt::Debug for OwnerKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OwnerKeyPair")
            .field("owner_id", &self.owner_id)
            .field("public_key", &hex::encode(self.public_key()))
            .finish_non_exhaustive()
    }
}

/// Map from owner id to owner public key; how subscribers learn which owners
/// they trust.
pub type TrustStore = BTreeMap<String, [u8; 32]>;

/// Owner-signed credential binding a publisher key to authorized prefixes.
/// The signature covers the canonical TLV encoding of all other fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublisherCertificate {
    pub publisher_public_key: Vec<u8>,
    pub authorized_prefixes: Vec<Vec<String>>,
    pub not_before: u64,
    pub not_after: u64,
    pub owner_id: String,
    pub owner_signature: Vec<u8>,
}

pub fn issue_certificate(
    owner: &OwnerKeyPair,
    publisher_public_key: &[u8; 32],
    prefixes: Vec<Vec<String>>,
    not_before: u64,
    not_after: u64,
) -> Result<PublisherCertificate, CertError> {
    if prefixes.is_empty() {
        return Err(CertError::EmptyAuthorization);
    }
    if not_before >= not_after {
        return Err(CertError::InvalidValidityWindow);
    }
    for prefix in &prefixes {
        validate_prefix(prefix)?;
    }
    let tbs = certificate_tbs_bytes(
        publisher_public_key,
        &prefixes,
        not_before,
        not_after,
        owner.owner_id(),
    )
    .expect("validated fields encode");
    let owner_signature = owner.keypair().sign(&tbs);
    Ok(PublisherCertificate {
        publisher_public_key: publisher_public_key.to_vec(),
        authorized_prefixes: prefixes,
        not_before,
        not_after,
        owner_id: owner.owner_id().to_string(),
        owner_signature,
    })
}

pub fn verify_certificate(
    cert: &PublisherCertificate,
    owner_public_key: &[u8; 32],
    now: u64,
) -> Result<(), CertError> {
    let tbs = certificate_tbs_bytes(
        &cert.publisher_public_key,
        &cert.authorized_prefixes,
        cert.not_before,
        cert.not_after,
        &cert.owner_id,
    )
    .map_err(|_| CertError::BadSignature)?;
    if !verify_signature(owner_public_key, &tbs, &cert.owner_signature) {
        return Err(CertError::BadSignature);
    }
    if now < cert.not_before {
        return Err(CertError::NotYetValid);
    }
    if now > cert.not_after {
        return Err(CertError::Expired);
    }
    Ok(())
}

/// Verify against a trust store, resolving the owner key by the
/// certificate's own owner id.
pub fn verify_with_trust_store(
    cert: &PublisherCertificate,
    trust: &TrustStore,
    now: u64,
) -> Result<(), CertError> {
    let owner_pk = trust
        .get(&cert.owner_id)
        .ok_or_else(|| CertError::UnknownOwner(cert.owner_id.clone()))?;
    verify_certificate(cert, owner_pk, now)
}

/// True when some authorized prefix is a label-wise prefix of `name`. A
/// certificate for `movies` covers `movies/trailer1`.
pub fn authorizes(cert: &PublisherCertificate, name: &ContentName) -> bool {
    cert.authorized_prefixes
        .iter()
        .any(|prefix| name.starts_with(prefix))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{decode_certificate, encode_certificate};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn labels(parts: &[&str]) -> Vec<String> {
        parts.iter().map(|s| s.to_string()).collect()
    }

    fn sample_cert(rng: &mut ChaCha20Rng) -> (OwnerKeyPair, PublisherCertificate) {
        let owner = OwnerKeyPair::generate("studio", rng);
        let publisher = SigningKeyPair::generate(rng);
        let cert = issue_certificate(
            &owner,
            &publisher.public_key(),
            vec![labels(&["movies"])],
            1_000,
            2_000,
        )
        .unwrap();
        (owner, cert)
    }

    #[test]
    fn issue_then_verify() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let (owner, cert) = sample_cert(&mut rng);
        verify_certificate(&cert, &owner.public_key(), 1_500).unwrap();
    }

    #[test]
    fn empty_prefixes_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let owner = OwnerKeyPair::generate("studio", &mut rng);
        let publisher = SigningKeyPair::generate(&mut rng);
        let err =
            issue_certificate(&owner, &publisher.public_key(), vec![], 1, 2).unwrap_err();
        assert_eq!(err, CertError::EmptyAuthorization);
    }

    #[test]
    fn degenerate_validity_window_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let owner = OwnerKeyPair::generate("studio", &mut rng);
        let publisher = SigningKeyPair::generate(&mut rng);
        let err = issue_certificate(
            &owner,
            &publisher.public_key(),
            vec![labels(&["movies"])],
            5,
            5,
        )
        .unwrap_err();
        assert_eq!(err, CertError::InvalidValidityWindow);
    }

    #[test]
    fn window_boundaries() {
        let mut rng = ChaCha20Rng::seed_from_u64(24);
        let (owner, cert) = sample_cert(&mut rng);
        assert_eq!(
            verify_certificate(&cert, &owner.public_key(), 999),
            Err(CertError::NotYetValid)
        );
        assert_eq!(
            verify_certificate(&cert, &owner.public_key(), 2_001),
            Err(CertError::Expired)
        );
        verify_certificate(&cert, &owner.public_key(), 1_000).unwrap();
        verify_certificate(&cert, &owner.public_key(), 2_000).unwrap();
    }

    #[test]
    fn flipped_prefix_bytes_fail_verification() {
        // Mutate-and-verify oracle: one random byte flip in the authorized
        // prefix text must always break the signature.
        let mut rng = ChaCha20Rng::seed_from_u64(25);
        let owner = OwnerKeyPair::generate("studio", &mut rng);
        let publisher = SigningKeyPair::generate(&mut rng);
        let cert = issue_certificate(
            &owner,
            &publisher.public_key(),
            vec![labels(&["movies", "catalog", "trailers"])],
            1_000,
            2_000,
        )
        .unwrap();
        for _ in 0..100 {
            let mut mutated = cert.clone();
            let prefix = &mut mutated.authorized_prefixes[0];
            let li = rng.gen_range(0..prefix.len());
            let mut bytes = prefix[li].clone().into_bytes();
            let bi = rng.gen_range(0..bytes.len());
            // Stay within label-safe ASCII so the mutation targets the
            // signature, not the name validator.
            bytes[bi] = if bytes[bi] == b'a' { b'b' } else { b'a' };
            prefix[li] = String::from_utf8(bytes).unwrap();
            assert_eq!(
                verify_certificate(&mutated, &owner.public_key(), 1_500),
                Err(CertError::BadSignature)
            );
        }
    }

    #[test]
    fn serialized_single_bit_mutations_never_verify() {
        let mut rng = ChaCha20Rng::seed_from_u64(26);
        let (owner, cert) = sample_cert(&mut rng);
        let encoded = encode_certificate(&cert).unwrap();
        for _ in 0..300 {
            let mut bytes = encoded.clone();
            let bit = rng.gen_range(0..bytes.len() * 8);
            bytes[bit / 8] ^= 1 << (bit % 8);
            let survives = match decode_certificate(&bytes) {
                Ok(mutated) => {
                    verify_certificate(&mutated, &owner.public_key(), 1_500).is_ok()
                }
                Err(_) => false,
            };
            assert!(!survives, "bit {bit} mutation passed verification");
        }
    }

    #[test]
    fn roundtrip_property_random_instances() {
        let mut rng = ChaCha20Rng::seed_from_u64(27);
        for i in 0..1_000 {
            let owner = OwnerKeyPair::generate(format!("owner{i}"), &mut rng);
            let publisher = SigningKeyPair::generate(&mut rng);
            let nb = rng.gen_range(0..1u64 << 40);
            let na = nb + 1 + rng.gen_range(0..1u64 << 20);
            let n_prefixes = rng.gen_range(1..4);
            let prefixes: Vec<Vec<String>> = (0..n_prefixes)
                .map(|p| {
                    (0..rng.gen_range(1..4))
                        .map(|l| format!("p{p}l{l}"))
                        .collect()
                })
                .collect();
            let cert =
                issue_certificate(&owner, &publisher.public_key(), prefixes, nb, na).unwrap();
            verify_certificate(&cert, &owner.public_key(), nb).unwrap();
            let decoded = decode_certificate(&encode_certificate(&cert).unwrap()).unwrap();
            assert_eq!(decoded, cert);
        }
    }

    #[test]
    fn prefix_match_rule() {
        let mut rng = ChaCha20Rng::seed_from_u64(28);
        let owner = OwnerKeyPair::generate("studio", &mut rng);
        let publisher = SigningKeyPair::generate(&mut rng);
        let movies = issue_certificate(
            &owner,
            &publisher.public_key(),
            vec![labels(&["movies"])],
            1,
            2,
        )
        .unwrap();
        let movies_hd = issue_certificate(
            &owner,
            &publisher.public_key(),
            vec![labels(&["movies", "hd"])],
            1,
            2,
        )
        .unwrap();
        let news = issue_certificate(
            &owner,
            &publisher.public_key(),
            vec![labels(&["news"])],
            1,
            2,
        )
        .unwrap();
        let trailer = ContentName::new(["movies", "trailer1"], None).unwrap();
        let bare = ContentName::new(["movies"], None).unwrap();
        assert!(authorizes(&movies, &trailer));
        assert!(!authorizes(&movies_hd, &bare));
        assert!(!authorizes(&news, &trailer));
    }

    #[test]
    fn authorization_is_monotone_under_extension() {
        let mut rng = ChaCha20Rng::seed_from_u64(29);
        let owner = OwnerKeyPair::generate("studio", &mut rng);
        let publisher = SigningKeyPair::generate(&mut rng);
        let cert = issue_certificate(
            &owner,
            &publisher.public_key(),
            vec![labels(&["a", "b"])],
            1,
            2,
        )
        .unwrap();
        let mut prefix = labels(&["a", "b"]);
        for depth in 0..8 {
            let name = ContentName::new(prefix.clone(), None).unwrap();
            assert!(authorizes(&cert, &name), "depth {depth}");
            prefix.push(format!("x{depth}"));
        }
    }
}
