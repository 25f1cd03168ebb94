//! Symbolic key handling.
//!
//! Keys are 32-byte digests and ciphertexts are inert records: the payload is
//! stored verbatim next to a tag naming the key that opens it. Nothing here is
//! real encryption. A ciphertext opens exactly when the presented key hashes
//! to its tag, which is all the escrow handshake needs to be checked.
//!
//! Every digest is domain separated by an ASCII prefix (`sk`, `pk`, `sym`,
//! `addr`), so a key of one role can never be confused with another.

use std::collections::BTreeSet;

use rand::Rng;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::codec::{DecodeError, Decoder, Encoder};
use crate::hexbytes::fixed_bytes;

pub const SK_DOMAIN: &[u8] = b"sk";
pub const PK_DOMAIN: &[u8] = b"pk";
pub const SYM_DOMAIN: &[u8] = b"sym";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("key derivation seed must be 32 bytes, got {0}")]
    BadSeedLength(usize),
    #[error("key does not match ciphertext tag")]
    KeyMismatch,
}

/// SHA-256 of `bytes`.
pub fn digest(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// SHA-256 of `domain || bytes`.
pub fn domain_digest(domain: &[u8], bytes: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(domain);
    h.update(bytes);
    h.finalize().into()
}

fixed_bytes!(
    /// Secret half of a sample keypair.
    SecretKey,
    32
);
fixed_bytes!(
    /// Public half of a sample keypair, `digest("pk" || sk)`.
    PublicKey,
    32
);
fixed_bytes!(
    /// Per-victim symmetric key.
    SymKey,
    32
);
fixed_bytes!(
    /// `digest("sym" || key)`, naming the key that unlocks a [`SymCiphertext`].
    SymTag,
    32
);

impl SecretKey {
    pub fn public_key(&self) -> PublicKey {
        PublicKey(domain_digest(PK_DOMAIN, &self.0))
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self(rng.random())
    }
}

impl SymKey {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self(rng.random())
    }

    pub fn tag(&self) -> SymTag {
        SymTag(domain_digest(SYM_DOMAIN, &self.0))
    }
}

/// Derives the sample keypair from a 32-byte seed (the key-request
/// transaction hash).
pub fn kdf_keypair(seed: &[u8]) -> Result<(SecretKey, PublicKey), CryptoError> {
    if seed.len() != 32 {
        return Err(CryptoError::BadSeedLength(seed.len()));
    }
    let sk = SecretKey(domain_digest(SK_DOMAIN, seed));
    let pk = sk.public_key();
    Ok((sk, pk))
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AsymCiphertext {
    pub pk_tag: PublicKey,
    #[serde(with = "crate::hexbytes::hex_vec")]
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SymCiphertext {
    pub key_tag: SymTag,
    #[serde(with = "crate::hexbytes::hex_vec")]
    pub payload: Vec<u8>,
}

pub fn seal(pk: &PublicKey, payload: &[u8]) -> AsymCiphertext {
    AsymCiphertext {
        pk_tag: *pk,
        payload: payload.to_vec(),
    }
}

pub fn open(sk: &SecretKey, ct: &AsymCiphertext) -> Result<Vec<u8>, CryptoError> {
    if sk.public_key() == ct.pk_tag {
        Ok(ct.payload.clone())
    } else {
        Err(CryptoError::KeyMismatch)
    }
}

pub fn lock(key: &SymKey, asset: &[u8]) -> SymCiphertext {
    SymCiphertext {
        key_tag: key.tag(),
        payload: asset.to_vec(),
    }
}

pub fn unlock(key: &SymKey, ct: &SymCiphertext) -> Result<Vec<u8>, CryptoError> {
    if key.tag() == ct.key_tag {
        Ok(ct.payload.clone())
    } else {
        Err(CryptoError::KeyMismatch)
    }
}

impl AsymCiphertext {
    pub fn encode(&self, enc: &mut Encoder) {
        enc.bytes(&self.pk_tag.0).bytes(&self.payload);
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            pk_tag: PublicKey(dec.fixed()?),
            payload: dec.bytes()?.to_vec(),
        })
    }
}

/// A term an observer may hold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Secret(SecretKey),
    Sym(SymKey),
    Sealed(AsymCiphertext),
    Locked(SymCiphertext),
    Data(Vec<u8>),
}

/// Dolev-Yao closure of an observer's knowledge.
///
/// The observer can only open a ciphertext with a key it already holds;
/// opened payloads join the knowledge set and, when 32 bytes long, are also
/// tried as keys (that is how a sealed `Key_temp` becomes usable).
#[derive(Debug, Default, Clone)]
pub struct Knowledge {
    secrets: BTreeSet<[u8; 32]>,
    sym_keys: BTreeSet<[u8; 32]>,
    sealed: Vec<AsymCiphertext>,
    locked: Vec<SymCiphertext>,
    data: BTreeSet<Vec<u8>>,
}

impl Knowledge {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn learn(&mut self, term: Term) {
        match term {
            Term::Secret(sk) => {
                self.secrets.insert(sk.0);
            }
            Term::Sym(k) => {
                self.sym_keys.insert(k.0);
            }
            Term::Sealed(ct) => self.sealed.push(ct),
            Term::Locked(ct) => self.locked.push(ct),
            Term::Data(d) => {
                self.add_data(d);
            }
        }
        self.saturate();
    }

    fn add_data(&mut self, d: Vec<u8>) -> bool {
        if let Ok(raw) = <[u8; 32]>::try_from(d.as_slice()) {
            self.secrets.insert(raw);
            self.sym_keys.insert(raw);
        }
        self.data.insert(d)
    }

    fn saturate(&mut self) {
        loop {
            let mut fresh = Vec::new();
            for ct in &self.sealed {
                let opened = self
                    .secrets
                    .iter()
                    .find_map(|sk| open(&SecretKey(*sk), ct).ok());
                if let Some(p) = opened {
                    fresh.push(p);
                }
            }
            for ct in &self.locked {
                let opened = self
                    .sym_keys
                    .iter()
                    .find_map(|k| unlock(&SymKey(*k), ct).ok());
                if let Some(p) = opened {
                    fresh.push(p);
                }
            }
            let mut grew = false;
            for p in fresh {
                grew |= self.add_data(p);
            }
            if !grew {
                break;
            }
        }
    }

    pub fn knows(&self, data: &[u8]) -> bool {
        self.data.contains(data)
    }

    pub fn holds_secret(&self, sk: &SecretKey) -> bool {
        self.secrets.contains(&sk.0)
    }

    pub fn holds_sym(&self, k: &SymKey) -> bool {
        self.sym_keys.contains(&k.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Frozen with Python's hashlib, independent of the sha2 crate.
    const EMPTY_SHA256: &str = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";
    const ZERO_SEED_SK: &str = "d60fb890c8572dacda9267e226d3a4c1c0d26c7863305ac8927b8a054186af82";
    const ZERO_SEED_PK: &str = "26999e3cde2eb348150da62ffdf3a55a2fbe7cb814b9d3761bd05080a02e9419";

    #[test]
    fn digest_matches_reference_vectors() {
        assert_eq!(hex::encode(digest(b"")), EMPTY_SHA256);
        assert_eq!(digest(b"abc"), digest(b"abc"));
        assert_ne!(digest(&[0b0000_0001]), digest(&[0b0000_0000]));
    }

    #[test]
    fn kdf_of_zero_seed_matches_reference() {
        let (sk, pk) = kdf_keypair(&[0u8; 32]).unwrap();
        assert_eq!(sk.to_hex(), ZERO_SEED_SK);
        assert_eq!(pk.to_hex(), ZERO_SEED_PK);
    }

    #[test]
    fn kdf_is_deterministic_and_seed_sensitive() {
        let a = kdf_keypair(&[1u8; 32]).unwrap();
        assert_eq!(a, kdf_keypair(&[1u8; 32]).unwrap());
        let b = kdf_keypair(&[2u8; 32]).unwrap();
        assert_ne!(a.1, b.1);
    }

    #[test]
    fn kdf_rejects_bad_seed_length() {
        assert_eq!(kdf_keypair(&[0u8; 31]), Err(CryptoError::BadSeedLength(31)));
        assert_eq!(kdf_keypair(&[]), Err(CryptoError::BadSeedLength(0)));
    }

    #[test]
    fn seal_open_round_trip_and_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sk = SecretKey::random(&mut rng);
        let other = SecretKey::random(&mut rng);
        let msg: Vec<u8> = (0..40).map(|_| rng.random()).collect();
        let ct = seal(&sk.public_key(), &msg);
        assert_eq!(open(&sk, &ct).unwrap(), msg);
        assert_eq!(open(&other, &ct), Err(CryptoError::KeyMismatch));
    }

    #[test]
    fn lock_unlock_round_trip_and_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = SymKey::random(&mut rng);
        let k2 = SymKey::random(&mut rng);
        let ct = lock(&k, b"asset");
        assert_eq!(unlock(&k, &ct).unwrap(), b"asset");
        assert_eq!(unlock(&k2, &ct), Err(CryptoError::KeyMismatch));
    }

    #[test]
    fn secret_key_and_sym_key_domains_differ() {
        let raw = [9u8; 32];
        assert_ne!(SecretKey(raw).public_key().0, SymKey(raw).tag().0);
    }

    #[test]
    fn observer_without_key_learns_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sk = SecretKey::random(&mut rng);
        let key_temp = SymKey::random(&mut rng);
        let sealed = seal(&sk.public_key(), &key_temp.0);
        let locked = lock(&key_temp, b"files");

        let mut eve = Knowledge::new();
        eve.learn(Term::Sealed(sealed));
        eve.learn(Term::Locked(locked));
        assert!(!eve.knows(b"files"));
        assert!(!eve.holds_sym(&key_temp));

        // Publishing the secret key unlocks the chain.
        eve.learn(Term::Secret(sk));
        assert!(eve.holds_sym(&key_temp));
        assert!(eve.knows(b"files"));
    }
}
