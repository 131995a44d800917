//! Log entry binary layout.
//!
//! ```text
//! index        u64 BE
//! appended_at  u64 BE   (ms since Unix epoch)
//! digest       32 bytes
//! key_id_len   u16 BE, then key_id UTF-8 bytes
//! sig_len      u16 BE, then signature bytes
//! ```

use crate::manifest::ManifestDigest;

/// Everything the caller supplies for an append; the log assigns the index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogPayload {
    pub manifest_digest: ManifestDigest,
    pub signature: Vec<u8>,
    pub key_id: String,
    pub appended_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub index: u64,
    pub manifest_digest: ManifestDigest,
    pub signature: Vec<u8>,
    pub key_id: String,
    pub appended_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EntryError {
    #[error("entry truncated")]
    Truncated,
    #[error("{0} bytes of trailing data")]
    Trailing(usize),
    #[error("key id is not UTF-8")]
    KeyId,
    #[error("{0} too long for a u16 length prefix")]
    TooLong(&'static str),
}

impl LogEntry {
    pub fn from_payload(index: u64, p: LogPayload) -> Self {
        Self {
            index,
            manifest_digest: p.manifest_digest,
            signature: p.signature,
            key_id: p.key_id,
            appended_at: p.appended_at,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, EntryError> {
        let key = self.key_id.as_bytes();
        let key_len = u16::try_from(key.len()).map_err(|_| EntryError::TooLong("key id"))?;
        let sig_len =
            u16::try_from(self.signature.len()).map_err(|_| EntryError::TooLong("signature"))?;
        let mut out = Vec::with_capacity(8 + 8 + 32 + 2 + key.len() + 2 + self.signature.len());
        out.extend_from_slice(&self.index.to_be_bytes());
        out.extend_from_slice(&self.appended_at.to_be_bytes());
        out.extend_from_slice(self.manifest_digest.as_bytes());
        out.extend_from_slice(&key_len.to_be_bytes());
        out.extend_from_slice(key);
        out.extend_from_slice(&sig_len.to_be_bytes());
        out.extend_from_slice(&self.signature);
        Ok(out)
    }

    /// Strict inverse of [`LogEntry::encode`]: trailing bytes are an error.
    pub fn decode(bytes: &[u8]) -> Result<Self, EntryError> {
        let mut r = Reader(bytes);
        let index = u64::from_be_bytes(r.take_array()?);
        let appended_at = u64::from_be_bytes(r.take_array()?);
        let manifest_digest = ManifestDigest::from_bytes(r.take_array()?);
        let key_len = u16::from_be_bytes(r.take_array()?) as usize;
        let key_id = std::str::from_utf8(r.take(key_len)?)
            .map_err(|_| EntryError::KeyId)?
            .to_string();
        let sig_len = u16::from_be_bytes(r.take_array()?) as usize;
        let signature = r.take(sig_len)?.to_vec();
        if !r.0.is_empty() {
            return Err(EntryError::Trailing(r.0.len()));
        }
        Ok(Self {
            index,
            manifest_digest,
            signature,
            key_id,
            appended_at,
        })
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EntryError> {
        if self.0.len() < n {
            return Err(EntryError::Truncated);
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn take_array<const N: usize>(&mut self) -> Result<[u8; N], EntryError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}
