//! Canonical JSON: sorted object keys, no insignificant whitespace, UTF-8.
//! `serde_json::Value` keeps objects in a `BTreeMap`, so serializing through
//! it yields sorted keys for free.

use serde::Serialize;

use crate::error::Result;

pub fn to_canonical_vec<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_vec(&v)?)
}

pub fn to_canonical_string<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_sorted_and_compact() {
        let s = to_canonical_string(&json!({"b": 1, "a": {"z": [1, 2], "c": "x"}})).unwrap();
        assert_eq!(s, r#"{"a":{"c":"x","z":[1,2]},"b":1}"#);
    }
}
