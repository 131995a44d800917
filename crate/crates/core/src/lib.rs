//! Signed tool-invocation manifests with policy enforcement, a Merkle
//! transparency log, Bernoulli auditing, and the workload harness and
//! statistics used to evaluate them.
//!
//! Request flow: [`manifest`] encodes and digests, [`policy`] evaluates,
//! [`keystore`] signs and verifies, [`tlog`] records, [`audit`] samples and
//! exports evidence. [`harness`] drives that flow at scale and [`stats`]
//! summarises the outcomes.

pub mod audit;
pub mod fsutil;
pub mod harness;
pub mod hash;
pub mod keystore;
pub mod manifest;
pub mod policy;
pub mod stats;
pub mod tlog;

pub use audit::{AuditConfig, EvidenceRecord, EvidenceTuple, MetricsRecord, TradeoffWeights};
pub use harness::{ErrorKind, ExecutionOutcome, Status, WorkloadConfig};
pub use hash::{sha256, Hash256};
pub use keystore::{
    KeyHandle, Keystore, KeystoreError, RejectReason, RotationPolicy, Signature, SignatureScheme,
    SignedEnvelope, SignedManifest, Verdict,
};
pub use manifest::{FieldValue, Manifest, ManifestDigest, ManifestError, UserView};
pub use policy::{ComplianceReport, PolicyError, PolicyRule, PolicySet, RuleKind, Severity};
pub use stats::{RegressionFit, StatsReport};
pub use tlog::{IntegrityReport, LogEntry, LogError, MerkleProof, MerkleRoot, TransparencyLog};
