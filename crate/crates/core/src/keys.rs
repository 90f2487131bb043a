//! Broker key material and its public JWKS form.

use std::fs;
use std::path::Path;

use p256::ecdsa::{SigningKey, VerifyingKey};
use p256::EncodedPoint;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::jws::{b64, unb64};

#[derive(Debug, Error)]
pub enum KeyError {
    #[error("no active {0:?} key")]
    NoActiveKey(KeyPurpose),
    #[error("invalid JWK: {0}")]
    InvalidJwk(String),
    #[error("key store io: {0}")]
    Io(#[from] std::io::Error),
    #[error("key store format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyPurpose {
    TokenSigning,
    SthSigning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyStatus {
    Active,
    Retired,
}

/// Public P-256 key in RFC 7517 form. `aegon_purpose` is an extension member
/// that lets verifiers refuse, e.g., a token signed with the tree-head key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Jwk {
    pub kty: String,
    pub crv: String,
    pub x: String,
    pub y: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kid: Option<String>,
    #[serde(rename = "use", default, skip_serializing_if = "Option::is_none")]
    pub use_: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aegon_purpose: Option<KeyPurpose>,
}

impl Jwk {
    pub fn from_key(key: &VerifyingKey) -> Self {
        let point = key.to_encoded_point(false);
        Self {
            kty: "EC".into(),
            crv: "P-256".into(),
            x: b64(point.x().expect("uncompressed point")),
            y: b64(point.y().expect("uncompressed point")),
            kid: None,
            use_: None,
            aegon_purpose: None,
        }
    }

    pub fn with_kid(mut self, kid: impl Into<String>) -> Self {
        self.kid = Some(kid.into());
        self.use_ = Some("sig".into());
        self
    }

    pub fn to_key(&self) -> Result<VerifyingKey, KeyError> {
        if self.kty != "EC" || self.crv != "P-256" {
            return Err(KeyError::InvalidJwk(format!("unsupported kty/crv {}/{}", self.kty, self.crv)));
        }
        let x = unb64(&self.x).filter(|v| v.len() == 32).ok_or_else(|| KeyError::InvalidJwk("x".into()))?;
        let y = unb64(&self.y).filter(|v| v.len() == 32).ok_or_else(|| KeyError::InvalidJwk("y".into()))?;
        let point = EncodedPoint::from_affine_coordinates(x.as_slice().into(), y.as_slice().into(), false);
        VerifyingKey::from_encoded_point(&point).map_err(|_| KeyError::InvalidJwk("point not on curve".into()))
    }

    /// RFC 7638 thumbprint, base64url.
    pub fn thumbprint(&self) -> String {
        let canonical = format!(r#"{{"crv":"{}","kty":"{}","x":"{}","y":"{}"}}"#, self.crv, self.kty, self.x, self.y);
        b64(&Sha256::digest(canonical.as_bytes()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Jwks {
    pub keys: Vec<Jwk>,
}

impl Jwks {
    pub fn find(&self, kid: &str) -> Option<&Jwk> {
        self.keys.iter().find(|k| k.kid.as_deref() == Some(kid))
    }

    /// Key usable for `purpose`: keys without a purpose tag are accepted for
    /// any purpose, tagged keys only for their own.
    pub fn find_for(&self, kid: &str, purpose: KeyPurpose) -> Option<VerifyingKey> {
        self.find(kid).filter(|k| k.aegon_purpose.is_none_or(|p| p == purpose)).and_then(|k| k.to_key().ok())
    }
}

#[derive(Debug, Clone)]
pub struct BrokerKey {
    pub kid: String,
    pub purpose: KeyPurpose,
    pub status: KeyStatus,
    pub signing: SigningKey,
    /// Retired keys are published until this time (UTC seconds).
    pub publish_until: Option<i64>,
}

impl BrokerKey {
    fn generate<R: RngCore + CryptoRng>(rng: &mut R, purpose: KeyPurpose) -> Self {
        let signing = SigningKey::random(rng);
        let kid = Jwk::from_key(signing.verifying_key()).thumbprint();
        Self { kid, purpose, status: KeyStatus::Active, signing, publish_until: None }
    }

    pub fn public_jwk(&self) -> Jwk {
        let mut jwk = Jwk::from_key(self.signing.verifying_key()).with_kid(&self.kid);
        jwk.aegon_purpose = Some(self.purpose);
        jwk
    }
}

/// The broker's signing keys: one active token key, one active tree-head key,
/// plus retired token keys still needed to validate live tokens.
#[derive(Debug, Clone)]
pub struct BrokerKeySet {
    keys: Vec<BrokerKey>,
}

#[derive(Serialize, Deserialize)]
struct StoredKey {
    kid: String,
    purpose: KeyPurpose,
    status: KeyStatus,
    d: String,
    publish_until: Option<i64>,
}

impl BrokerKeySet {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self { keys: vec![BrokerKey::generate(rng, KeyPurpose::TokenSigning), BrokerKey::generate(rng, KeyPurpose::SthSigning)] }
    }

    pub fn keys(&self) -> &[BrokerKey] {
        &self.keys
    }

    pub fn active(&self, purpose: KeyPurpose) -> Result<&BrokerKey, KeyError> {
        self.keys.iter().find(|k| k.purpose == purpose && k.status == KeyStatus::Active).ok_or(KeyError::NoActiveKey(purpose))
    }

    /// Replaces the active token key. The old key stays in the JWKS until
    /// `now + max_token_ttl`, after which `prune` drops it.
    pub fn rotate_token_key<R: RngCore + CryptoRng>(&mut self, rng: &mut R, now: i64, max_token_ttl: i64) -> &BrokerKey {
        for k in self.keys.iter_mut().filter(|k| k.purpose == KeyPurpose::TokenSigning && k.status == KeyStatus::Active) {
            k.status = KeyStatus::Retired;
            k.publish_until = Some(now + max_token_ttl);
        }
        self.keys.push(BrokerKey::generate(rng, KeyPurpose::TokenSigning));
        self.keys.last().unwrap()
    }

    pub fn prune(&mut self, now: i64) {
        self.keys.retain(|k| k.status == KeyStatus::Active || k.publish_until.is_some_and(|t| now <= t));
    }

    pub fn jwks(&self) -> Jwks {
        Jwks { keys: self.keys.iter().map(BrokerKey::public_jwk).collect() }
    }

    pub fn save(&self, path: &Path) -> Result<(), KeyError> {
        let stored: Vec<StoredKey> = self
            .keys
            .iter()
            .map(|k| StoredKey {
                kid: k.kid.clone(),
                purpose: k.purpose,
                status: k.status,
                d: hex::encode(k.signing.to_bytes()),
                publish_until: k.publish_until,
            })
            .collect();
        let json = serde_json::to_vec_pretty(&stored).map_err(|e| KeyError::Format(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, json)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, KeyError> {
        let raw = fs::read(path)?;
        let stored: Vec<StoredKey> = serde_json::from_slice(&raw).map_err(|e| KeyError::Format(e.to_string()))?;
        let keys = stored
            .into_iter()
            .map(|s| {
                let d = hex::decode(&s.d).map_err(|e| KeyError::Format(e.to_string()))?;
                let signing = SigningKey::from_slice(&d).map_err(|e| KeyError::Format(e.to_string()))?;
                Ok(BrokerKey { kid: s.kid, purpose: s.purpose, status: s.status, signing, publish_until: s.publish_until })
            })
            .collect::<Result<Vec<_>, KeyError>>()?;
        Ok(Self { keys })
    }

    /// Loads the key set at `path`, or generates and saves a fresh one.
    pub fn load_or_generate<R: RngCore + CryptoRng>(path: &Path, rng: &mut R) -> Result<Self, KeyError> {
        if path.exists() {
            return Self::load(path);
        }
        let set = Self::generate(rng);
        set.save(path)?;
        Ok(set)
    }
}
