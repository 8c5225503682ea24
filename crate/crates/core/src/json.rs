//! Canonical JSON (sorted keys, compact) and content hashes built on it.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Result;

/// Serializes with object keys in sorted order and no insignificant whitespace.
pub fn canonical<T: Serialize>(value: &T) -> Result<String> {
    // serde_json's default map type is ordered by key, so a round-trip
    // through `Value` sorts every object.
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn canonical_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(canonical(value)?.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn keys_are_sorted() {
        let mut m = HashMap::new();
        m.insert("zeta", 1);
        m.insert("alpha", 2);
        m.insert("mid", 3);
        assert_eq!(canonical(&m).unwrap(), r#"{"alpha":2,"mid":3,"zeta":1}"#);
    }
}
