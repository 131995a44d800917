//! Manifest data model and canonical encoding.
//!
//! A manifest splits a tool invocation into two disjoint partitions: fields the
//! user can see (`user_fields`) and fields only the model backend consumes
//! (`model_fields`), plus a freshness timestamp and the target tool id.
//!
//! The canonical encoding is compact JSON with a fixed shape:
//!
//! ```text
//! {"user":{..},"model":{..},"timestamp":<ms>,"tool_id":"<id>"}
//! ```
//!
//! Keys inside each partition are sorted bytewise, there is no whitespace, and
//! decimals use the shortest representation that round-trips. Integers and
//! decimals never collide because decimals always carry a `.` or an exponent.
//! [`decode`] rejects any input that is not byte-identical to the encoding of
//! the manifest it describes.

use std::collections::BTreeMap;
use std::fmt;

use serde_json::Value;

use crate::hash::{sha256, HexError};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ManifestError {
    #[error("key `{0}` appears in both user and model partitions")]
    DisjointnessViolation(String),
    #[error("timestamp must be greater than zero")]
    InvalidTimestamp,
    #[error("value for `{key}` is not representable: {reason}")]
    Encoding { key: String, reason: String },
    #[error("canonical encoding is empty")]
    EmptyEncoding,
    #[error("malformed manifest encoding: {0}")]
    Malformed(String),
    #[error("manifest bytes are not in canonical form")]
    NonCanonical,
}

/// A scalar manifest value.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldValue {
    Str(String),
    Int(i64),
    Decimal(f64),
    Bool(bool),
}

impl FieldValue {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            FieldValue::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            FieldValue::Int(i) => Some(*i as f64),
            FieldValue::Decimal(d) => Some(*d),
            _ => None,
        }
    }

    fn write_canonical(&self, out: &mut String) {
        match self {
            FieldValue::Str(s) => write_json_string(out, s),
            FieldValue::Int(i) => out.push_str(&i.to_string()),
            FieldValue::Decimal(d) => {
                // -0.0 compares equal to 0.0, so it must encode identically.
                let d = if *d == 0.0 { 0.0 } else { *d };
                out.push_str(&serde_json::to_string(&d).expect("finite f64 serializes"));
            }
            FieldValue::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        }
    }

    fn check(&self, key: &str) -> Result<(), ManifestError> {
        if let FieldValue::Decimal(d) = self {
            if !d.is_finite() {
                return Err(ManifestError::Encoding {
                    key: key.to_string(),
                    reason: format!("non-finite decimal {d}"),
                });
            }
        }
        Ok(())
    }

    fn from_json(key: &str, v: &Value) -> Result<Self, ManifestError> {
        match v {
            Value::String(s) => Ok(FieldValue::Str(s.clone())),
            Value::Bool(b) => Ok(FieldValue::Bool(*b)),
            Value::Number(n) => {
                if let Some(i) = n.as_i64() {
                    // serde_json reports `1.0` as f64, so only literal integers land here.
                    Ok(FieldValue::Int(i))
                } else if n.is_u64() {
                    Err(ManifestError::Encoding {
                        key: key.to_string(),
                        reason: "integer exceeds i64 range".into(),
                    })
                } else {
                    Ok(FieldValue::Decimal(n.as_f64().unwrap_or(f64::NAN)))
                }
            }
            other => Err(ManifestError::Malformed(format!(
                "field `{key}` has unsupported value {other}"
            ))),
        }
    }
}

impl fmt::Display for FieldValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldValue::Str(s) => f.write_str(s),
            other => {
                let mut s = String::new();
                other.write_canonical(&mut s);
                f.write_str(&s)
            }
        }
    }
}

impl From<&str> for FieldValue {
    fn from(s: &str) -> Self {
        FieldValue::Str(s.to_string())
    }
}

impl From<String> for FieldValue {
    fn from(s: String) -> Self {
        FieldValue::Str(s)
    }
}

impl From<i64> for FieldValue {
    fn from(i: i64) -> Self {
        FieldValue::Int(i)
    }
}

impl From<f64> for FieldValue {
    fn from(d: f64) -> Self {
        FieldValue::Decimal(d)
    }
}

impl From<bool> for FieldValue {
    fn from(b: bool) -> Self {
        FieldValue::Bool(b)
    }
}

pub type FieldMap = BTreeMap<String, FieldValue>;

/// A validated tool-invocation manifest. The only ways to obtain one are
/// [`Manifest::new`], [`ManifestBuilder::build`] and [`decode`], all of which
/// enforce partition disjointness and a positive timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    user_fields: FieldMap,
    model_fields: FieldMap,
    timestamp_ms: u64,
    tool_id: String,
}

impl Manifest {
    pub fn new(
        user_fields: FieldMap,
        model_fields: FieldMap,
        timestamp_ms: u64,
        tool_id: impl Into<String>,
    ) -> Result<Self, ManifestError> {
        if timestamp_ms == 0 {
            return Err(ManifestError::InvalidTimestamp);
        }
        if let Some(k) = user_fields.keys().find(|k| model_fields.contains_key(*k)) {
            return Err(ManifestError::DisjointnessViolation(k.clone()));
        }
        for (k, v) in user_fields.iter().chain(model_fields.iter()) {
            v.check(k)?;
        }
        Ok(Self {
            user_fields,
            model_fields,
            timestamp_ms,
            tool_id: tool_id.into(),
        })
    }

    pub fn builder() -> ManifestBuilder {
        ManifestBuilder::default()
    }

    pub fn user_fields(&self) -> &FieldMap {
        &self.user_fields
    }

    pub fn model_fields(&self) -> &FieldMap {
        &self.model_fields
    }

    pub fn timestamp_ms(&self) -> u64 {
        self.timestamp_ms
    }

    pub fn tool_id(&self) -> &str {
        &self.tool_id
    }

    /// Looks a key up in either partition.
    pub fn field(&self, key: &str) -> Option<&FieldValue> {
        self.user_fields
            .get(key)
            .or_else(|| self.model_fields.get(key))
    }

    pub fn field_count(&self) -> usize {
        self.user_fields.len() + self.model_fields.len()
    }

    /// Canonical byte encoding; see the module docs for the format.
    pub fn canonical_encode(&self) -> Result<Vec<u8>, ManifestError> {
        canonical_encode(self)
    }

    pub fn digest(&self) -> Result<ManifestDigest, ManifestError> {
        digest(self)
    }

    /// Projection onto the user-visible partition.
    pub fn redact_for_user(&self) -> UserView {
        redact_for_user(self)
    }
}

#[derive(Debug, Default, Clone)]
pub struct ManifestBuilder {
    user: FieldMap,
    model: FieldMap,
    timestamp_ms: u64,
    tool_id: String,
}

impl ManifestBuilder {
    pub fn user(mut self, key: impl Into<String>, value: impl Into<FieldValue>) -> Self {
        self.user.insert(key.into(), value.into());
        self
    }

    pub fn model(mut self, key: impl Into<String>, value: impl Into<FieldValue>) -> Self {
        self.model.insert(key.into(), value.into());
        self
    }

    pub fn timestamp_ms(mut self, ts: u64) -> Self {
        self.timestamp_ms = ts;
        self
    }

    pub fn tool_id(mut self, id: impl Into<String>) -> Self {
        self.tool_id = id.into();
        self
    }

    pub fn build(self) -> Result<Manifest, ManifestError> {
        Manifest::new(self.user, self.model, self.timestamp_ms, self.tool_id)
    }
}

/// SHA-256 digest of a manifest's canonical encoding.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ManifestDigest([u8; 32]);

impl ManifestDigest {
    pub const LEN: usize = 32;

    pub const fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, HexError> {
        crate::hash::Hash256::from_hex(s).map(|h| Self(*h.as_bytes()))
    }
}

impl fmt::Debug for ManifestDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ManifestDigest({})", self.to_hex())
    }
}

impl fmt::Display for ManifestDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// The user-visible projection of a manifest. Holds no model-partition data.
#[derive(Debug, Clone, PartialEq)]
pub struct UserView {
    pub user_fields: FieldMap,
    pub timestamp_ms: u64,
    pub tool_id: String,
}

impl UserView {
    /// Same format as the manifest encoding with the `model` partition omitted.
    pub fn canonical_encode(&self) -> Vec<u8> {
        let mut out = String::with_capacity(64);
        out.push_str("{\"user\":");
        write_partition(&mut out, &self.user_fields);
        push_tail(&mut out, self.timestamp_ms, &self.tool_id);
        out.into_bytes()
    }
}

/// Byte-level Shannon entropy of an encoding and its redundancy relative to
/// the 8-bit maximum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodingStats {
    pub entropy_bits: f64,
    pub redundancy: f64,
}

fn write_json_string(out: &mut String, s: &str) {
    out.push_str(&serde_json::to_string(s).expect("strings always serialize"));
}

fn write_partition(out: &mut String, fields: &FieldMap) {
    out.push('{');
    for (i, (k, v)) in fields.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write_json_string(out, k);
        out.push(':');
        v.write_canonical(out);
    }
    out.push('}');
}

fn push_tail(out: &mut String, timestamp_ms: u64, tool_id: &str) {
    out.push_str(",\"timestamp\":");
    out.push_str(&timestamp_ms.to_string());
    out.push_str(",\"tool_id\":");
    write_json_string(out, tool_id);
    out.push('}');
}

pub fn canonical_encode(m: &Manifest) -> Result<Vec<u8>, ManifestError> {
    if let Some(k) = m.user_fields.keys().find(|k| m.model_fields.contains_key(*k)) {
        return Err(ManifestError::DisjointnessViolation(k.clone()));
    }
    for (k, v) in m.user_fields.iter().chain(m.model_fields.iter()) {
        v.check(k)?;
    }
    let mut out = String::with_capacity(128);
    out.push_str("{\"user\":");
    write_partition(&mut out, &m.user_fields);
    out.push_str(",\"model\":");
    write_partition(&mut out, &m.model_fields);
    push_tail(&mut out, m.timestamp_ms, &m.tool_id);
    Ok(out.into_bytes())
}

pub fn digest(m: &Manifest) -> Result<ManifestDigest, ManifestError> {
    let bytes = canonical_encode(m)?;
    Ok(digest_bytes(&bytes))
}

/// Digest of bytes that are already canonically encoded.
pub fn digest_bytes(canonical: &[u8]) -> ManifestDigest {
    ManifestDigest(*sha256(canonical).as_bytes())
}

pub fn redact_for_user(m: &Manifest) -> UserView {
    UserView {
        user_fields: m.user_fields.clone(),
        timestamp_ms: m.timestamp_ms,
        tool_id: m.tool_id.clone(),
    }
}

/// Decodes a canonical manifest encoding. Anything that would not re-encode to
/// exactly `bytes` is rejected.
pub fn decode(bytes: &[u8]) -> Result<Manifest, ManifestError> {
    let value: Value =
        serde_json::from_slice(bytes).map_err(|e| ManifestError::Malformed(e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(ManifestError::Malformed("top level is not an object".into()));
    };
    if obj.len() != 4 {
        return Err(ManifestError::Malformed(format!(
            "expected 4 top-level keys, found {}",
            obj.len()
        )));
    }
    let partition = |name: &str| -> Result<FieldMap, ManifestError> {
        match obj.get(name) {
            Some(Value::Object(map)) => map
                .iter()
                .map(|(k, v)| Ok((k.clone(), FieldValue::from_json(k, v)?)))
                .collect(),
            _ => Err(ManifestError::Malformed(format!("missing `{name}` object"))),
        }
    };
    let user = partition("user")?;
    let model = partition("model")?;
    let timestamp = obj
        .get("timestamp")
        .and_then(Value::as_u64)
        .ok_or_else(|| ManifestError::Malformed("missing integer `timestamp`".into()))?;
    let tool_id = obj
        .get("tool_id")
        .and_then(Value::as_str)
        .ok_or_else(|| ManifestError::Malformed("missing string `tool_id`".into()))?;
    let m = Manifest::new(user, model, timestamp, tool_id)?;
    if canonical_encode(&m)? != bytes {
        return Err(ManifestError::NonCanonical);
    }
    Ok(m)
}

/// Decodes a newline-delimited batch; blank lines are skipped. A single
/// manifest file (with or without a trailing newline) is a batch of one.
pub fn decode_batch(bytes: &[u8]) -> Vec<Result<Manifest, ManifestError>> {
    bytes
        .split(|b| *b == b'\n')
        .map(|line| line.strip_suffix(b"\r").unwrap_or(line))
        .filter(|line| !line.iter().all(u8::is_ascii_whitespace))
        .map(decode)
        .collect()
}

/// Shannon entropy in bits of the empirical byte distribution of `bytes`.
pub fn byte_entropy(bytes: &[u8]) -> f64 {
    if bytes.is_empty() {
        return 0.0;
    }
    let mut counts = [0u64; 256];
    for b in bytes {
        counts[*b as usize] += 1;
    }
    let n = bytes.len() as f64;
    let h: f64 = counts
        .iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / n;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

/// Entropy statistics of an arbitrary byte encoding.
pub fn stats_for_bytes(bytes: &[u8]) -> Result<EncodingStats, ManifestError> {
    if bytes.is_empty() {
        return Err(ManifestError::EmptyEncoding);
    }
    let entropy_bits = byte_entropy(bytes).min(8.0);
    Ok(EncodingStats {
        entropy_bits,
        redundancy: (1.0 - entropy_bits / 8.0).clamp(0.0, 1.0),
    })
}

pub fn encoding_stats(m: &Manifest) -> Result<EncodingStats, ManifestError> {
    stats_for_bytes(&canonical_encode(m)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Manifest {
        Manifest::builder()
            .user("query", "weather in Oslo")
            .user("locale", "en-GB")
            .model("system_prompt", "You are a careful assistant.")
            .model("temperature", 0.7)
            .model("max_tokens", 256i64)
            .model("stream", false)
            .timestamp_ms(1_700_000_000_000)
            .tool_id("gpt-4-turbo")
            .build()
            .unwrap()
    }

    #[test]
    fn encoding_shape() {
        let m = Manifest::builder()
            .user("b", "2")
            .user("a", 1i64)
            .model("t", 1.0)
            .timestamp_ms(5)
            .tool_id("x")
            .build()
            .unwrap();
        assert_eq!(
            String::from_utf8(m.canonical_encode().unwrap()).unwrap(),
            r#"{"user":{"a":1,"b":"2"},"model":{"t":1.0},"timestamp":5,"tool_id":"x"}"#
        );
    }

    #[test]
    fn insertion_order_does_not_matter() {
        let a = Manifest::builder()
            .user("x", "1")
            .user("y", "2")
            .model("p", 3i64)
            .model("q", true)
            .timestamp_ms(10)
            .tool_id("t")
            .build()
            .unwrap();
        let b = Manifest::builder()
            .model("q", true)
            .user("y", "2")
            .model("p", 3i64)
            .user("x", "1")
            .timestamp_ms(10)
            .tool_id("t")
            .build()
            .unwrap();
        assert_eq!(a.canonical_encode().unwrap(), b.canonical_encode().unwrap());
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
    }

    #[test]
    fn overlapping_partitions_rejected() {
        let err = Manifest::builder()
            .user("q", "x")
            .model("q", "y")
            .timestamp_ms(1)
            .build()
            .unwrap_err();
        assert_eq!(err, ManifestError::DisjointnessViolation("q".into()));
    }

    #[test]
    fn zero_timestamp_and_nan_rejected() {
        assert_eq!(
            Manifest::builder().build().unwrap_err(),
            ManifestError::InvalidTimestamp
        );
        let err = Manifest::builder()
            .model("t", f64::NAN)
            .timestamp_ms(1)
            .build()
            .unwrap_err();
        assert!(matches!(err, ManifestError::Encoding { .. }));
    }

    #[test]
    fn negative_zero_encodes_like_zero() {
        let a = Manifest::builder().model("t", -0.0).timestamp_ms(1).build().unwrap();
        let b = Manifest::builder().model("t", 0.0).timestamp_ms(1).build().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.canonical_encode().unwrap(), b.canonical_encode().unwrap());
    }

    #[test]
    fn decode_round_trip_and_strictness() {
        let m = sample();
        let bytes = m.canonical_encode().unwrap();
        assert_eq!(decode(&bytes).unwrap(), m);

        let spaced = String::from_utf8(bytes.clone()).unwrap().replace(":", ": ");
        assert_eq!(decode(spaced.as_bytes()).unwrap_err(), ManifestError::NonCanonical);

        let overlap = br#"{"user":{"q":"x"},"model":{"q":"y"},"timestamp":1,"tool_id":"t"}"#;
        assert_eq!(
            decode(overlap).unwrap_err(),
            ManifestError::DisjointnessViolation("q".into())
        );
        assert!(matches!(decode(b"{\"user\":").unwrap_err(), ManifestError::Malformed(_)));
        assert!(matches!(decode(b"[]").unwrap_err(), ManifestError::Malformed(_)));
    }

    #[test]
    fn batch_decoding() {
        let m = sample();
        let mut text = m.canonical_encode().unwrap();
        text.push(b'\n');
        text.extend_from_slice(&m.canonical_encode().unwrap());
        text.extend_from_slice(b"\n\n");
        let out = decode_batch(&text);
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|r| r.as_ref().unwrap() == &m));
    }

    #[test]
    fn digest_is_32_bytes_and_stable() {
        let m = sample();
        let copy = m.clone();
        assert_eq!(m.digest().unwrap(), copy.digest().unwrap());
        assert_eq!(m.digest().unwrap().as_bytes().len(), 32);
        let d = m.digest().unwrap();
        assert_eq!(ManifestDigest::from_hex(&d.to_hex()).unwrap(), d);
    }

    #[test]
    fn every_single_byte_flip_changes_digest() {
        let m = sample();
        let base = m.digest().unwrap();
        // Flip each byte of every string value (user and model partitions).
        let all: Vec<(bool, String, String)> = m
            .user_fields()
            .iter()
            .map(|(k, v)| (true, k.clone(), v.to_string()))
            .chain(m.model_fields().iter().map(|(k, v)| (false, k.clone(), v.to_string())))
            .filter(|(_, _, v)| !v.is_empty())
            .collect();
        let mut checked = 0;
        for (is_user, key, val) in all {
            let raw = val.as_bytes();
            for i in 0..raw.len() {
                for bit in 0..7 {
                    let mut flipped = raw.to_vec();
                    flipped[i] ^= 1 << bit;
                    let Ok(s) = String::from_utf8(flipped) else { continue };
                    let mut user = m.user_fields().clone();
                    let mut model = m.model_fields().clone();
                    let target = if is_user { &mut user } else { &mut model };
                    target.insert(key.clone(), FieldValue::Str(s));
                    let mutated = Manifest::new(user, model, m.timestamp_ms(), m.tool_id()).unwrap();
                    assert_ne!(mutated.digest().unwrap(), base, "flip {key}[{i}] bit {bit}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn redaction_drops_model_partition() {
        let m = Manifest::builder()
            .user("q", "hello")
            .model("sys", "secret")
            .timestamp_ms(9)
            .tool_id("t")
            .build()
            .unwrap();
        let view = m.redact_for_user();
        let enc = String::from_utf8(view.canonical_encode()).unwrap();
        assert!(!enc.contains("secret"));
        assert!(!enc.contains("sys"));
        assert_eq!(enc, r#"{"user":{"q":"hello"},"timestamp":9,"tool_id":"t"}"#);
    }

    #[test]
    fn redaction_with_empty_model_partition() {
        let m = Manifest::builder().user("q", "hello").timestamp_ms(9).tool_id("t").build().unwrap();
        let view = m.redact_for_user();
        assert_eq!(&view.user_fields, m.user_fields());
        assert_eq!(view.timestamp_ms, m.timestamp_ms());
        assert_eq!(view.tool_id, m.tool_id());
    }

    #[test]
    fn entropy_edge_cases() {
        let s = stats_for_bytes(&[7u8; 40]).unwrap();
        assert_eq!(s.entropy_bits, 0.0);
        assert_eq!(s.redundancy, 1.0);

        let all: Vec<u8> = (0..=255u8).collect();
        let s = stats_for_bytes(&all).unwrap();
        assert!((s.entropy_bits - 8.0).abs() < 1e-12);
        assert!(s.redundancy.abs() < 1e-12);

        assert!((byte_entropy(b"aabb") - 1.0).abs() < 1e-12);
        assert_eq!(stats_for_bytes(&[]).unwrap_err(), ManifestError::EmptyEncoding);

        let s = encoding_stats(&sample()).unwrap();
        assert!((0.0..=8.0).contains(&s.entropy_bits));
        assert!((0.0..=1.0).contains(&s.redundancy));
    }
}
