//! Thin wrappers around the cryptographic primitives used by the protocol:
//! Ed25519 signatures, X25519 key agreement, HKDF-SHA256, HMAC-SHA256 and
//! the two record-protection algorithms (AES-128-GCM and AES-128-CTR with
//! encrypt-then-MAC).
//!
//! Everything here takes the RNG as an explicit parameter so that traces and
//! fixtures can be made reproducible from a seed.

use aes::cipher::{KeyIvInit, StreamCipher};
use aes_gcm::aead::{Aead, Payload};
use aes_gcm::{Aes128Gcm, KeyInit};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;
use zeroize::Zeroizing;

pub const SIGNING_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
pub const X25519_PUBLIC_LEN: usize = 32;
pub const GCM_TAG_LEN: usize = 16;
pub const HMAC_TAG_LEN: usize = 32;
pub const AEAD_NONCE_LEN: usize = 12;

type Aes128Ctr = ctr::Ctr32BE<aes::Aes128>;
type HmacSha256 = Hmac<Sha256>;

/// An Ed25519 key pair. Used for owner keys, publisher keys and middlebox
/// channel identities.
#[derive(Clone)]
pub struct SigningKeyPair {
    secret: SigningKey,
}

impl SigningKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut seed = [0u8; SIGNING_KEY_LEN];
        rng.fill_bytes(&mut seed);
        SigningKeyPair {
            secret: SigningKey::from_bytes(&seed),
        }
    }

    pub fn from_seed(seed: &[u8; SIGNING_KEY_LEN]) -> Self {
        SigningKeyPair {
            secret: SigningKey::from_bytes(seed),
        }
    }

    pub fn public_key(&self) -> [u8; SIGNING_KEY_LEN] {
        self.secret.verifying_key().to_bytes()
    }

    /// Raw secret seed. Only the key fixture file writer and the secret
    /// containment scans are expected to call this.
    pub fn secret_bytes(&self) -> [u8; SIGNING_KEY_LEN] {
        self.secret.to_bytes()
    }

    /// Deterministic Ed25519 signature over `message`.
    pub fn sign(&self, message: &[u8]) -> Vec<u8> {
        self.secret.sign(message).to_bytes().to_vec()
    }
}

impl std::fmt::Debug for SigningKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SigningKeyPair")
            .field("public", &hex::encode(self.public_key()))
            .field("secret", &"<redacted>")
            .finish()
    }
}

pub fn verify_signature(public_key: &[u8], message: &[u8], signature: &[u8]) -> bool {
    let Ok(pk_bytes) = <[u8; SIGNING_KEY_LEN]>::try_from(public_key) else {
        return false;
    };
    let Ok(pk) = VerifyingKey::from_bytes(&pk_bytes) else {
        return false;
    };
    let Ok(sig_bytes) = <[u8; SIGNATURE_LEN]>::try_from(signature) else {
        return false;
    };
    pk.verify(message, &Signature::from_bytes(&sig_bytes)).is_ok()
}

/// One-shot X25519 share. The secret half is consumed by [`EphemeralShare::agree`]
/// and zeroized on drop, which is what keeps completed sessions forward secret.
pub struct EphemeralShare {
    secret: x25519_dalek::EphemeralSecret,
    public: [u8; X25519_PUBLIC_LEN],
}

impl EphemeralShare {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let secret = x25519_dalek::EphemeralSecret::random_from_rng(rng);
        let public = x25519_dalek::PublicKey::from(&secret).to_bytes();
        EphemeralShare { secret, public }
    }

    pub fn public(&self) -> [u8; X25519_PUBLIC_LEN] {
        self.public
    }

    /// Consumes the secret half; there is no way to run the agreement twice.
    pub fn agree(self, peer_public: &[u8; X25519_PUBLIC_LEN]) -> Zeroizing<[u8; 32]> {
        let shared = self
            .secret
            .diffie_hellman(&x25519_dalek::PublicKey::from(*peer_public));
        Zeroizing::new(shared.to_bytes())
    }
}

impl std::fmt::Debug for EphemeralShare {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EphemeralShare")
            .field("public", &hex::encode(self.public))
            .field("secret", &"<redacted>")
            .finish()
    }
}

pub fn sha256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

pub fn hmac_sha256(key: &[u8], parts: &[&[u8]]) -> [u8; 32] {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    for part in parts {
        mac.update(part);
    }
    mac.finalize().into_bytes().into()
}

pub fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.ct_eq(b).into()
}

/// HKDF-SHA256 extract with `salt`, then expand `out.len()` bytes under the
/// concatenation of `info_parts`.
pub fn hkdf_extract_expand(salt: &[u8], ikm: &[u8], info_parts: &[&[u8]], out: &mut [u8]) {
    let hk = Hkdf::<Sha256>::new(Some(salt), ikm);
    hk.expand_multi_info(info_parts, out)
        .expect("output length within hkdf bounds");
}

/// HKDF-SHA256 expand from an existing pseudorandom key.
pub fn hkdf_expand(prk: &[u8], info_parts: &[&[u8]], out: &mut [u8]) {
    let hk = Hkdf::<Sha256>::from_prk(prk).expect("prk at least one hash block");
    hk.expand_multi_info(info_parts, out)
        .expect("output length within hkdf bounds");
}

/// Record-protection algorithm identifiers carried in cipher suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AeadAlgorithm {
    /// Authenticated encryption; no separate MAC key needed.
    Aes128Gcm,
    /// Unauthenticated stream cipher paired with HMAC-SHA256, exercising the
    /// suites that do need a separate MAC key.
    Aes128CtrHmacSha256,
}

impl AeadAlgorithm {
    pub fn key_len(self) -> usize {
        16
    }

    pub fn requires_hmac_key(self) -> bool {
        matches!(self, AeadAlgorithm::Aes128CtrHmacSha256)
    }

    pub fn tag_len(self) -> usize {
        match self {
            AeadAlgorithm::Aes128Gcm => GCM_TAG_LEN,
            AeadAlgorithm::Aes128CtrHmacSha256 => HMAC_TAG_LEN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AeadError;

fn ctr_cipher(key: &[u8], nonce: &[u8; AEAD_NONCE_LEN]) -> Aes128Ctr {
    let mut iv = [0u8; 16];
    iv[..AEAD_NONCE_LEN].copy_from_slice(nonce);
    Aes128Ctr::new(key.into(), &iv.into())
}

/// Seal `plaintext`, returning ciphertext with the tag appended.
///
/// `hmac_key` is required by (and only by) algorithms for which
/// [`AeadAlgorithm::requires_hmac_key`] is true; the MAC there covers the
/// nonce, the additional data and the ciphertext.
pub fn aead_seal(
    alg: AeadAlgorithm,
    key: &[u8],
    hmac_key: Option<&[u8]>,
    nonce: &[u8; AEAD_NONCE_LEN],
    aad: &[u8],
    plaintext: &[u8],
) -> Vec<u8> {
    match alg {
        AeadAlgorithm::Aes128Gcm => {
            let cipher = Aes128Gcm::new_from_slice(key).expect("16-byte key");
            cipher
                .encrypt(nonce.into(), Payload { msg: plaintext, aad })
                .expect("gcm encryption is infallible")
        }
        AeadAlgorithm::Aes128CtrHmacSha256 => {
            let mac_key = hmac_key.expect("ctr suite carries an hmac key");
            let mut out = plaintext.to_vec();
            ctr_cipher(key, nonce).apply_keystream(&mut out);
            let aad_len = (aad.len() as u32).to_be_bytes();
            let tag = hmac_sha256(mac_key, &[nonce, &aad_len, aad, &out]);
            out.extend_from_slice(&tag);
            out
        }
    }
}

/// Open a sealed record. Fails on any tag mismatch or truncated input.
pub fn aead_open(
    alg: AeadAlgorithm,
    key: &[u8],
    hmac_key: Option<&[u8]>,
    nonce: &[u8; AEAD_NONCE_LEN],
    aad: &[u8],
    ciphertext: &[u8],
) -> Result<Vec<u8>, AeadError> {
    match alg {
        AeadAlgorithm::Aes128Gcm => {
            let cipher = Aes128Gcm::new_from_slice(key).expect("16-byte key");
            cipher
                .decrypt(nonce.into(), Payload { msg: ciphertext, aad })
                .map_err(|_| AeadError)
        }
        AeadAlgorithm::Aes128CtrHmacSha256 => {
            let mac_key = hmac_key.ok_or(AeadError)?;
            if ciphertext.len() < HMAC_TAG_LEN {
                return Err(AeadError);
            }
            let (body, tag) = ciphertext.split_at(ciphertext.len() - HMAC_TAG_LEN);
            let aad_len = (aad.len() as u32).to_be_bytes();
            let expected = hmac_sha256(mac_key, &[nonce, &aad_len, aad, body]);
            if !constant_time_eq(&expected, tag) {
                return Err(AeadError);
            }
            let mut out = body.to_vec();
            ctr_cipher(key, nonce).apply_keystream(&mut out);
            Ok(out)
        }
    }
}

/// Short hex fingerprint used when printing key material: never the key
/// itself, only the first eight bytes of its SHA-256.
pub fn fingerprint(data: &[u8]) -> String {
    hex::encode(&sha256(data)[..8])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn sign_verify_roundtrip() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let kp = SigningKeyPair::generate(&mut rng);
        let sig = kp.sign(b"hello");
        assert!(verify_signature(&kp.public_key(), b"hello", &sig));
        assert!(!verify_signature(&kp.public_key(), b"other", &sig));
    }

    #[test]
    fn x25519_agreement_matches() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let a = EphemeralShare::generate(&mut rng);
        let b = EphemeralShare::generate(&mut rng);
        let pa = a.public();
        let pb = b.public();
        let sa = a.agree(&pb);
        let sb = b.agree(&pa);
        assert_eq!(*sa, *sb);
        assert!(!sa.iter().all(|&x| x == 0));
    }

    #[test]
    fn both_aeads_roundtrip_and_authenticate() {
        let key = [7u8; 16];
        let hmac_key = [9u8; 32];
        let nonce = [3u8; 12];
        for alg in [AeadAlgorithm::Aes128Gcm, AeadAlgorithm::Aes128CtrHmacSha256] {
            let mk = alg.requires_hmac_key().then_some(&hmac_key[..]);
            let sealed = aead_seal(alg, &key, mk, &nonce, b"aad", b"secret payload");
            let opened = aead_open(alg, &key, mk, &nonce, b"aad", &sealed).unwrap();
            assert_eq!(opened, b"secret payload");
            let mut tampered = sealed.clone();
            tampered[0] ^= 1;
            assert!(aead_open(alg, &key, mk, &nonce, b"aad", &tampered).is_err());
            assert!(aead_open(alg, &key, mk, &nonce, b"other", &sealed).is_err());
        }
    }
}
