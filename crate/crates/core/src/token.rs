//! License tokens: ES256 JWTs carrying the `aegon_*` licensing claims.
//!
//! Issuance commits a `license_issued` ledger entry before the token is
//! handed out, so every token in circulation has an inclusion proof.
//! Validation is a pure function of the token, a JWKS document, the expected
//! audience and the current time.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::canonical::canonical_encode_serialize;
use crate::ids::new_txn_id;
use crate::jws::{self, CompactJws, JoseHeader};
use crate::keys::{BrokerKeySet, Jwks, KeyError, KeyPurpose};
use crate::ledger::{EntryType, Ledger, LedgerError, NewEntry};

pub const AEGON_VERSION: &str = "1.0";
pub const SINGLE_USE_TTL: i64 = 300;

macro_rules! wire_enum {
    ($name:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, ::serde::Serialize, ::serde::Deserialize)]
        pub enum $name {
            $(#[serde(rename = $s)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $s),+ }
            }
        }

        impl ::std::str::FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s { $($s => Ok($name::$variant),)+ other => Err(format!("unknown {} {other:?}", stringify!($name))) }
            }
        }

        impl ::std::fmt::Display for $name {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}
pub(crate) use wire_enum;

wire_enum!(Scope {
    MetadataOnly => "metadata_only",
    Excerpt => "excerpt",
    FullArticleHtml => "full_article_html",
    StructuredJson => "structured_json",
    TrainingCorpus => "training_corpus",
});

wire_enum!(LicenseType {
    SingleUse => "single_use",
    Session => "session",
    TimeBoundCache => "time_bound_cache",
    TrainingCorpus => "training_corpus",
});

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LicenseClaims {
    pub iss: String,
    pub sub: String,
    pub aud: String,
    pub iat: i64,
    pub exp: i64,
    pub jti: String,
    pub aegon_version: String,
    pub aegon_resource_url: String,
    pub aegon_scope: Scope,
    pub aegon_license_type: LicenseType,
    pub aegon_training_allowed: bool,
    pub aegon_attribution_required: bool,
    #[serde(default)]
    pub aegon_provenance_required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LicenseRequest {
    pub platform_id: String,
    pub publisher_domain: String,
    pub resource_url: String,
    pub scope: Scope,
    pub license_type: LicenseType,
    #[serde(default)]
    pub training_allowed: bool,
    #[serde(default)]
    pub attribution_required: bool,
    #[serde(default)]
    pub provenance_required: bool,
}

/// Token lifetimes per license type, in seconds.
#[derive(Debug, Clone)]
pub struct TokenPolicy {
    pub issuer: String,
    pub single_use_ttl: i64,
    pub session_ttl: i64,
    pub time_bound_cache_ttl: i64,
    pub training_corpus_ttl: i64,
}

impl Default for TokenPolicy {
    fn default() -> Self {
        Self { issuer: "broker.aegon.ai".into(), single_use_ttl: SINGLE_USE_TTL, session_ttl: 3600, time_bound_cache_ttl: 86_400, training_corpus_ttl: 86_400 }
    }
}

impl TokenPolicy {
    pub fn ttl(&self, t: LicenseType) -> i64 {
        match t {
            LicenseType::SingleUse => self.single_use_ttl.min(SINGLE_USE_TTL),
            LicenseType::Session => self.session_ttl,
            LicenseType::TimeBoundCache => self.time_bound_cache_ttl,
            LicenseType::TrainingCorpus => self.training_corpus_ttl,
        }
    }

    pub fn max_ttl(&self) -> i64 {
        LicenseType::ALL.iter().map(|t| self.ttl(*t)).max().unwrap_or(SINGLE_USE_TTL)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuedToken {
    pub token: String,
    pub txn_id: String,
    pub claims: LicenseClaims,
    pub leaf_index: u64,
}

#[derive(Debug, Error)]
pub enum IssueError {
    #[error("invalid request: {0}")]
    Validation(String),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error("ledger append failed: {0}")]
    Ledger(#[from] LedgerError),
}

fn validate_request(req: &LicenseRequest) -> Result<(), IssueError> {
    let bad = |m: &str| Err(IssueError::Validation(m.to_string()));
    if req.platform_id.trim().is_empty() {
        return bad("platform_id is empty");
    }
    if req.publisher_domain.trim().is_empty() || req.publisher_domain != req.publisher_domain.to_ascii_lowercase() {
        return bad("publisher_domain must be a non-empty lowercase host");
    }
    let url = url::Url::parse(&req.resource_url).map_err(|e| IssueError::Validation(format!("resource_url: {e}")))?;
    if !matches!(url.scheme(), "http" | "https") {
        return bad("resource_url must be http(s)");
    }
    if url.host_str() != Some(req.publisher_domain.as_str()) {
        return bad("resource_url host must equal publisher_domain");
    }
    Ok(())
}

/// Issues a license token. The ledger entry is written first; if that fails
/// no token exists.
pub fn issue_token<R: RngCore + ?Sized>(
    req: &LicenseRequest,
    keys: &BrokerKeySet,
    ledger: &Ledger,
    policy: &TokenPolicy,
    rng: &mut R,
    now: i64,
) -> Result<IssuedToken, IssueError> {
    validate_request(req)?;
    let key = keys.active(KeyPurpose::TokenSigning)?;
    let txn_id = new_txn_id(rng);
    let claims = LicenseClaims {
        iss: policy.issuer.clone(),
        sub: req.platform_id.clone(),
        aud: req.publisher_domain.clone(),
        iat: now,
        exp: now + policy.ttl(req.license_type),
        jti: txn_id.clone(),
        aegon_version: AEGON_VERSION.into(),
        aegon_resource_url: req.resource_url.clone(),
        aegon_scope: req.scope,
        aegon_license_type: req.license_type,
        aegon_training_allowed: req.training_allowed,
        aegon_attribution_required: req.attribution_required,
        aegon_provenance_required: req.provenance_required,
    };
    let payload = canonical_encode_serialize(&claims).expect("claims encode");
    let leaf_index = ledger.append(NewEntry {
        txn_id: txn_id.clone(),
        entry_type: EntryType::LicenseIssued,
        payload: json!({ "claims": claims, "kid": key.kid }),
        server_timestamp: now,
    })?;
    let token = jws::sign(&JoseHeader::es256("JWT", &key.kid), &payload, &key.signing);
    Ok(IssuedToken { token, txn_id, claims, leaf_index })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Error)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    #[error("bad_signature")]
    BadSignature,
    #[error("expired")]
    Expired,
    #[error("wrong_audience")]
    WrongAudience,
    #[error("unknown_kid")]
    UnknownKid,
    #[error("malformed")]
    Malformed,
    #[error("unsupported_version")]
    UnsupportedVersion,
    #[error("invalid_claims")]
    InvalidClaims,
}

impl RejectReason {
    pub fn code(self) -> &'static str {
        match self {
            Self::BadSignature => "bad_signature",
            Self::Expired => "expired",
            Self::WrongAudience => "wrong_audience",
            Self::UnknownKid => "unknown_kid",
            Self::Malformed => "malformed",
            Self::UnsupportedVersion => "unsupported_version",
            Self::InvalidClaims => "invalid_claims",
        }
    }
}

/// Validates a token offline. Checks run in this order and the first
/// failure is returned: structure, key lookup, signature, version, claim
/// set, expiry, audience.
pub fn validate_token(token: &str, jwks: &Jwks, expected_aud: &str, now: i64) -> Result<LicenseClaims, RejectReason> {
    let jws = CompactJws::parse(token).map_err(|_| RejectReason::Malformed)?;
    if jws.header.typ.as_deref().is_some_and(|t| !t.eq_ignore_ascii_case("JWT")) {
        return Err(RejectReason::Malformed);
    }
    let kid = jws.header.kid.as_deref().ok_or(RejectReason::Malformed)?;
    let key = jwks.find_for(kid, KeyPurpose::TokenSigning).ok_or(RejectReason::UnknownKid)?;
    if !jws.verify(&key) {
        return Err(RejectReason::BadSignature);
    }
    let raw: Value = serde_json::from_slice(&jws.payload).map_err(|_| RejectReason::Malformed)?;
    if !raw.is_object() {
        return Err(RejectReason::Malformed);
    }
    match raw.get("aegon_version").and_then(Value::as_str) {
        None => return Err(RejectReason::InvalidClaims),
        Some(v) if v != AEGON_VERSION => return Err(RejectReason::UnsupportedVersion),
        Some(_) => {}
    }
    let claims: LicenseClaims = serde_json::from_value(raw).map_err(|_| RejectReason::InvalidClaims)?;
    if claims.exp < claims.iat || (claims.aegon_license_type == LicenseType::SingleUse && claims.exp - claims.iat > SINGLE_USE_TTL) || claims.jti.is_empty() {
        return Err(RejectReason::InvalidClaims);
    }
    if now >= claims.exp {
        return Err(RejectReason::Expired);
    }
    if claims.aud != expected_aud {
        return Err(RejectReason::WrongAudience);
    }
    Ok(claims)
}
