//! Minimal JWS compact serialization with ES256 (ECDSA P-256 / SHA-256,
//! raw `r || s` signatures).

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{Signature, SigningKey, VerifyingKey};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ES256: &str = "ES256";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoseHeader {
    pub alg: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub typ: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kid: Option<String>,
}

impl JoseHeader {
    pub fn es256(typ: &str, kid: impl Into<String>) -> Self {
        Self { alg: ES256.into(), typ: Some(typ.into()), kid: Some(kid.into()) }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum JwsError {
    #[error("expected three dot-separated segments")]
    Segments,
    #[error("invalid base64url in {0}")]
    Base64(&'static str),
    #[error("header is not valid JSON: {0}")]
    Header(String),
    #[error("unsupported alg {0:?}")]
    Alg(String),
    #[error("signature must be 64 bytes")]
    SignatureLength,
}

pub fn b64(data: &[u8]) -> String {
    URL_SAFE_NO_PAD.encode(data)
}

pub fn unb64(s: &str) -> Option<Vec<u8>> {
    URL_SAFE_NO_PAD.decode(s).ok()
}

/// Signs `payload` and returns `header.payload.signature`.
pub fn sign(header: &JoseHeader, payload: &[u8], key: &SigningKey) -> String {
    let header_json = serde_json::to_vec(header).expect("header serializes");
    let mut out = b64(&header_json);
    out.push('.');
    out.push_str(&b64(payload));
    let sig: Signature = key.sign(out.as_bytes());
    out.push('.');
    out.push_str(&b64(&sig.to_bytes()));
    out
}

/// A parsed but not yet verified compact JWS.
#[derive(Debug, Clone)]
pub struct CompactJws<'a> {
    pub header: JoseHeader,
    pub payload: Vec<u8>,
    signing_input: &'a str,
    signature: Signature,
}

impl<'a> CompactJws<'a> {
    /// Parses the structure; only ES256 is accepted.
    pub fn parse(token: &'a str) -> Result<Self, JwsError> {
        let mut parts = token.split('.');
        let (Some(h), Some(p), Some(s), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(JwsError::Segments);
        };
        let header_bytes = unb64(h).ok_or(JwsError::Base64("header"))?;
        let header: JoseHeader = serde_json::from_slice(&header_bytes).map_err(|e| JwsError::Header(e.to_string()))?;
        if header.alg != ES256 {
            return Err(JwsError::Alg(header.alg));
        }
        let payload = unb64(p).ok_or(JwsError::Base64("payload"))?;
        let sig_bytes = unb64(s).ok_or(JwsError::Base64("signature"))?;
        let signature = Signature::from_slice(&sig_bytes).map_err(|_| JwsError::SignatureLength)?;
        Ok(Self { header, payload, signing_input: &token[..h.len() + 1 + p.len()], signature })
    }

    pub fn verify(&self, key: &VerifyingKey) -> bool {
        key.verify(self.signing_input.as_bytes(), &self.signature).is_ok()
    }
}
