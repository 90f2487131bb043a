//! Deterministic JSON encoding used for ledger leaves, signed tree heads and
//! every signed payload in the protocol.
//!
//! Rules: object keys sorted by their UTF-8 bytes, no insignificant
//! whitespace, integers in plain decimal. Floating point numbers are rejected
//! since they have no single canonical rendering.

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodingError {
    #[error("non-integer number at {0} cannot be canonically encoded")]
    Float(String),
    #[error("value is not serializable: {0}")]
    Serialize(String),
}

/// Encodes a JSON value canonically.
pub fn canonical_encode(value: &Value) -> Result<Vec<u8>, EncodingError> {
    let mut out = Vec::with_capacity(128);
    write_value(value, &mut out, &mut String::from("$"))?;
    Ok(out)
}

/// Serializes `value` through serde and encodes the result canonically.
pub fn canonical_encode_serialize<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, EncodingError> {
    let v = serde_json::to_value(value).map_err(|e| EncodingError::Serialize(e.to_string()))?;
    canonical_encode(&v)
}

fn write_value(value: &Value, out: &mut Vec<u8>, path: &mut String) -> Result<(), EncodingError> {
    match value {
        Value::Null => out.extend_from_slice(b"null"),
        Value::Bool(true) => out.extend_from_slice(b"true"),
        Value::Bool(false) => out.extend_from_slice(b"false"),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.extend_from_slice(i.to_string().as_bytes());
            } else if let Some(u) = n.as_u64() {
                out.extend_from_slice(u.to_string().as_bytes());
            } else {
                return Err(EncodingError::Float(path.clone()));
            }
        }
        Value::String(s) => write_string(s, out),
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                let len = path.len();
                path.push_str(&format!("[{i}]"));
                write_value(item, out, path)?;
                path.truncate(len);
            }
            out.push(b']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort_unstable_by(|a, b| a.as_bytes().cmp(b.as_bytes()));
            out.push(b'{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_string(key, out);
                out.push(b':');
                let len = path.len();
                path.push('.');
                path.push_str(key);
                write_value(&map[key], out, path)?;
                path.truncate(len);
            }
            out.push(b'}');
        }
    }
    Ok(())
}

fn write_string(s: &str, out: &mut Vec<u8>) {
    out.push(b'"');
    for ch in s.chars() {
        match ch {
            '"' => out.extend_from_slice(b"\\\""),
            '\\' => out.extend_from_slice(b"\\\\"),
            '\n' => out.extend_from_slice(b"\\n"),
            '\r' => out.extend_from_slice(b"\\r"),
            '\t' => out.extend_from_slice(b"\\t"),
            '\u{08}' => out.extend_from_slice(b"\\b"),
            '\u{0c}' => out.extend_from_slice(b"\\f"),
            c if (c as u32) < 0x20 => out.extend_from_slice(format!("\\u{:04x}", c as u32).as_bytes()),
            c => {
                let mut buf = [0u8; 4];
                out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            }
        }
    }
    out.push(b'"');
}
