use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &str = "LHSYNTH-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Encodes `value` as a header line `LHSYNTH-CKPT v1 sha256=<hex>` followed
/// by the JSON payload the digest covers.
pub fn encode_checkpoint<T: Serialize>(value: &T) -> Result<String> {
    let payload = serde_json::to_string(value)?;
    let digest = hex::encode(Sha256::digest(payload.as_bytes()));
    Ok(format!("{MAGIC} v{CHECKPOINT_VERSION} sha256={digest}\n{payload}"))
}

pub fn decode_checkpoint<T: DeserializeOwned>(text: &str) -> Result<T> {
    let (header, payload) = text
        .split_once('\n')
        .ok_or_else(|| Error::Integrity("missing header line".into()))?;
    let mut parts = header.split(' ');
    if parts.next() != Some(MAGIC) {
        return Err(Error::Integrity("not a checkpoint file".into()));
    }
    let version = parts
        .next()
        .and_then(|v| v.strip_prefix('v'))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| Error::Integrity("unreadable version field".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let expected = parts
        .next()
        .and_then(|d| d.strip_prefix("sha256="))
        .ok_or_else(|| Error::Integrity("missing digest".into()))?;
    let actual = hex::encode(Sha256::digest(payload.as_bytes()));
    if actual != expected {
        return Err(Error::Integrity(format!("digest {actual} does not match header {expected}")));
    }
    serde_json::from_str(payload).map_err(|e| Error::Integrity(format!("payload does not decode: {e}")))
}

/// Writes through a temporary sibling and a rename, so an interrupted save
/// leaves the previous checkpoint intact.
pub fn save_checkpoint<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = encode_checkpoint(value)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: DeserializeOwned>(path: &Path) -> Result<T> {
    decode_checkpoint(&std::fs::read_to_string(path)?)
}
