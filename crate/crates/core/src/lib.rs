//! Core of the Aegon content-licensing protocol: the Merkle-committed
//! transaction ledger, license tokens, the publisher edge validator,
//! provenance events, attested compliance receipts and the simulated device
//! that produces them.

pub mod attestation;
pub mod backoff;
pub mod canonical;
pub mod clock;
pub mod device;
pub mod edge;
pub mod ids;
pub mod jws;
pub mod keys;
pub mod ledger;
pub mod logfile;
pub mod merkle;
pub mod provenance;
pub mod spotcheck;
pub mod sth;
pub mod token;

pub use canonical::{canonical_encode, canonical_encode_serialize, EncodingError};
pub use clock::{Clock, ManualClock, SystemClock};
pub use ledger::{EntryType, Ledger, LedgerEntry, LedgerError, NewEntry};
pub use merkle::{ConsistencyProof, Digest, InclusionProof};
pub use sth::SignedTreeHead;
