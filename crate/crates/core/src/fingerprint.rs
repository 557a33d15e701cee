use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Short hex digest of the JSON encoding of `value`.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(hex16(&json))
}

pub fn hex16(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_and_sensitive() {
        let a = fingerprint(&("x", 1)).unwrap();
        assert_eq!(a, fingerprint(&("x", 1)).unwrap());
        assert_ne!(a, fingerprint(&("x", 2)).unwrap());
        assert_eq!(a.len(), 16);
    }
}
