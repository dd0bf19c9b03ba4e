//! Per-cell authenticated encryption for report rows.
//!
//! A cell is stored as `enc1:` followed by base64 of
//! `salt (16) || nonce (12) || AES-256-GCM ciphertext+tag`. The salt is
//! chosen once per file and repeated in every cell so that any cell can be
//! decrypted on its own; the AES key is PBKDF2-HMAC-SHA256 of the
//! passphrase and that salt. The column name is bound as associated data,
//! so cells cannot be moved between columns undetected.

use std::collections::HashMap;
use std::fmt;
use std::sync::Mutex;

use aes_gcm::aead::rand_core::RngCore;
use aes_gcm::aead::{Aead, AeadCore, KeyInit, OsRng, Payload};
use aes_gcm::{Aes256Gcm, Key, Nonce};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use sha2::Sha256;

pub const CELL_PREFIX: &str = "enc1:";
pub const SALT_LEN: usize = 16;
const NONCE_LEN: usize = 12;
pub const PBKDF2_ROUNDS: u32 = 600_000;

pub type Salt = [u8; SALT_LEN];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CellError {
    NotEncrypted,
    Malformed(&'static str),
    /// Wrong passphrase, or the cell was altered.
    Authentication,
}

impl fmt::Display for CellError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellError::NotEncrypted => f.write_str("cell is not encrypted"),
            CellError::Malformed(why) => write!(f, "malformed ciphertext: {why}"),
            CellError::Authentication => {
                f.write_str("authentication failed (wrong passphrase or tampered data)")
            }
        }
    }
}

pub fn is_encrypted_cell(cell: &str) -> bool {
    cell.starts_with(CELL_PREFIX)
}

pub fn random_salt() -> Salt {
    let mut salt = [0u8; SALT_LEN];
    OsRng.fill_bytes(&mut salt);
    salt
}

/// Salt carried by an encrypted cell.
pub fn cell_salt(cell: &str) -> Result<Salt, CellError> {
    let raw = decode(cell)?;
    let mut salt = [0u8; SALT_LEN];
    salt.copy_from_slice(&raw[..SALT_LEN]);
    Ok(salt)
}

fn decode(cell: &str) -> Result<Vec<u8>, CellError> {
    let body = cell
        .strip_prefix(CELL_PREFIX)
        .ok_or(CellError::NotEncrypted)?;
    let raw = B64
        .decode(body)
        .map_err(|_| CellError::Malformed("invalid base64"))?;
    if raw.len() < SALT_LEN + NONCE_LEN + 16 {
        return Err(CellError::Malformed("too short"));
    }
    Ok(raw)
}

/// Passphrase for encrypted reports. Derived keys are cached per salt, so
/// one value can be reused across many appends cheaply.
pub struct EncryptionKey {
    passphrase: String,
    derived: Mutex<HashMap<Salt, Key<Aes256Gcm>>>,
}

impl fmt::Debug for EncryptionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("EncryptionKey(<redacted>)")
    }
}

impl Clone for EncryptionKey {
    fn clone(&self) -> Self {
        EncryptionKey {
            passphrase: self.passphrase.clone(),
            derived: Mutex::new(self.derived.lock().unwrap().clone()),
        }
    }
}

impl EncryptionKey {
    pub fn new(passphrase: impl Into<String>) -> Option<Self> {
        let passphrase = passphrase.into();
        if passphrase.is_empty() {
            return None;
        }
        Some(EncryptionKey {
            passphrase,
            derived: Mutex::new(HashMap::new()),
        })
    }

    fn cipher(&self, salt: &Salt) -> Aes256Gcm {
        let mut cache = self.derived.lock().unwrap();
        let key = cache.entry(*salt).or_insert_with(|| {
            let mut bytes = [0u8; 32];
            pbkdf2::pbkdf2_hmac::<Sha256>(
                self.passphrase.as_bytes(),
                salt,
                PBKDF2_ROUNDS,
                &mut bytes,
            );
            Key::<Aes256Gcm>::from(bytes)
        });
        Aes256Gcm::new(key)
    }

    pub fn encrypt_cell(&self, salt: &Salt, column: &str, plaintext: &str) -> String {
        let cipher = self.cipher(salt);
        let nonce = Aes256Gcm::generate_nonce(&mut OsRng);
        let ct = cipher
            .encrypt(
                &nonce,
                Payload {
                    msg: plaintext.as_bytes(),
                    aad: column.as_bytes(),
                },
            )
            .expect("AES-GCM encryption of in-memory data cannot fail");
        let mut raw = Vec::with_capacity(SALT_LEN + NONCE_LEN + ct.len());
        raw.extend_from_slice(salt);
        raw.extend_from_slice(&nonce);
        raw.extend_from_slice(&ct);
        format!("{CELL_PREFIX}{}", B64.encode(raw))
    }

    pub fn decrypt_cell(&self, column: &str, cell: &str) -> Result<String, CellError> {
        let raw = decode(cell)?;
        let (salt, rest) = raw.split_at(SALT_LEN);
        let (nonce, ct) = rest.split_at(NONCE_LEN);
        let salt: Salt = salt.try_into().expect("split at SALT_LEN");
        let plain = self
            .cipher(&salt)
            .decrypt(
                Nonce::from_slice(nonce),
                Payload {
                    msg: ct,
                    aad: column.as_bytes(),
                },
            )
            .map_err(|_| CellError::Authentication)?;
        String::from_utf8(plain).map_err(|_| CellError::Malformed("plaintext is not UTF-8"))
    }
}
