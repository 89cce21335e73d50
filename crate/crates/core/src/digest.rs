//! Canonical JSON text and SHA-256 digests.
//!
//! Canonical form is key-sorted, whitespace-free JSON. `serde_json::Value`
//! keeps object keys in a `BTreeMap`, so a round trip through `Value` sorts
//! every nested object.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Serializes `value` as key-sorted compact JSON.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("value serializes to JSON");
    serde_json::to_string(&v).expect("JSON value renders")
}

/// Key-sorted, two-space indented JSON with a trailing newline. Used for
/// files meant to be read by people; still byte-stable.
pub fn pretty_json<T: Serialize + ?Sized>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("value serializes to JSON");
    let mut s = serde_json::to_string_pretty(&v).expect("JSON value renders");
    s.push('\n');
    s
}

/// Lowercase hex SHA-256 of raw bytes.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Lowercase hex SHA-256 of the canonical serialization of `value`.
pub fn digest_of<T: Serialize + ?Sized>(value: &T) -> String {
    sha256_hex(canonical_json(value))
}

/// Derives a 64-bit seed from a master seed and a stream label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&out[..8]);
    u64::from_le_bytes(b)
}
