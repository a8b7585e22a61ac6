//! Canonical JSON encoding.
//!
//! Every signed or hashed structure in the system is encoded as JSON with
//! lexicographically sorted object keys, no insignificant whitespace and
//! UTF-8 output. Going through `serde_json::Value` gives the key ordering
//! for free because its map type is a `BTreeMap`.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::types::Hash32;

/// Encodes `value` as canonical JSON text.
pub fn to_canonical_string<T: Serialize + ?Sized>(value: &T) -> String {
    let tree = serde_json::to_value(value).expect("value serializes to JSON");
    serde_json::to_string(&tree).expect("JSON tree serializes")
}

/// Encodes `value` as canonical JSON bytes.
pub fn to_canonical_bytes<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    to_canonical_string(value).into_bytes()
}

/// SHA-256 over an arbitrary byte string.
pub fn sha256(bytes: &[u8]) -> Hash32 {
    Hash32(Sha256::digest(bytes).into())
}

/// SHA-256 over a sequence of byte strings, fed in order with no framing.
pub fn sha256_concat(parts: &[&[u8]]) -> Hash32 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part);
    }
    Hash32(hasher.finalize().into())
}

/// SHA-256 of the canonical encoding of `value`.
pub fn digest_of<T: Serialize + ?Sized>(value: &T) -> Hash32 {
    sha256(&to_canonical_bytes(value))
}
