use data_encoding::BASE32_NOPAD;
use rand::RngCore;

pub const TXN_PREFIX: &str = "txn_";
pub const RECEIPT_PREFIX: &str = "rcpt_";

/// `prefix` followed by 128 random bits in lowercase unpadded base32
/// (26 characters).
pub fn random_id<R: RngCore + ?Sized>(rng: &mut R, prefix: &str) -> String {
    let mut bytes = [0u8; 16];
    rng.fill_bytes(&mut bytes);
    let mut id = String::with_capacity(prefix.len() + 26);
    id.push_str(prefix);
    id.push_str(&BASE32_NOPAD.encode(&bytes).to_ascii_lowercase());
    id
}

pub fn new_txn_id<R: RngCore + ?Sized>(rng: &mut R) -> String {
    random_id(rng, TXN_PREFIX)
}

pub fn new_receipt_id<R: RngCore + ?Sized>(rng: &mut R) -> String {
    random_id(rng, RECEIPT_PREFIX)
}

/// Checks the `prefix` + 26 base32 character shape.
pub fn has_id_shape(id: &str, prefix: &str) -> bool {
    id.strip_prefix(prefix).is_some_and(|rest| rest.len() == 26 && rest.bytes().all(|b| matches!(b, b'a'..=b'z' | b'2'..=b'7')))
}
