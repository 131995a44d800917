//! Workload generation and the end-to-end pipeline driver.
//!
//! Each scale gets its own keystore, log, and random stream. Every random
//! quantity is drawn up front in [`generate_batch`], so outcomes depend only
//! on the config and seed; measured wall times are reported separately.

mod config;
mod run;

use std::fmt;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use config::{
    AdversaryMix, AttackKind, ConfigError, KeySpec, LatencyModel, OutputModel,
    RevocationScenario, SimulatedBackend, WorkloadConfig, DEFAULT_SIZES,
};
pub use run::{
    default_policy, outcomes_from_csv, outcomes_to_csv, run_pipeline, run_scale, HarnessError,
    RunReport, RunResult, ScaleReport, ScaleRun, BASELINE_DEFINITION,
};

use crate::manifest::{Manifest, ManifestBuilder};
use crate::policy::Severity;

/// Key that signs replayed manifests before being revoked.
pub const RETIRED_KEY: &str = "dev-retired";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Success,
    Failure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorKind {
    SignatureInvalid,
    KeyRevoked,
    ExpiredTimestamp,
    PolicyViolation,
    MalformedEncoding,
}

impl ErrorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorKind::SignatureInvalid => "signature-invalid",
            ErrorKind::KeyRevoked => "key-revoked",
            ErrorKind::ExpiredTimestamp => "expired-timestamp",
            ErrorKind::PolicyViolation => "policy-violation",
            ErrorKind::MalformedEncoding => "malformed-encoding",
        }
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One row of `outcomes.csv`. Timings are simulated, so rows are
/// reproducible from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub scale: u64,
    pub request_index: u64,
    pub backend_id: String,
    pub key_id: String,
    pub severity: Severity,
    pub status: Status,
    pub error_kind: Option<ErrorKind>,
    pub verify_time_ms: f64,
    pub exec_time_ms: f64,
    pub output_bytes: u64,
    pub timestamp: f64,
}

/// A generated request with all of its random draws.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub index: u64,
    pub attack: Option<AttackKind>,
    pub backend_id: String,
    pub key_id: String,
    /// Manifest bytes as submitted; non-canonical for malformed requests.
    pub body: Vec<u8>,
    /// Simulated arrival clock, used as "now" by the freshness check.
    pub now_ms: u64,
    /// Arrival clock with queueing jitter applied.
    pub timestamp: f64,
    pub sim_verify_ms: f64,
    pub sim_exec_ms: f64,
    pub output_bytes: u64,
    /// Signature bit flipped in transit for forged requests.
    pub forge_bit: usize,
    pub audited: bool,
}

/// Uniform choice among backends.
pub fn select_backend<'a, R: Rng + ?Sized>(
    backends: &'a [SimulatedBackend],
    rng: &mut R,
) -> &'a SimulatedBackend {
    &backends[rng.random_range(0..backends.len())]
}

/// `t + xi`, with `xi` uniform on `[-epsilon, epsilon]`.
pub fn apply_jitter<R: Rng + ?Sized>(t: f64, epsilon_ms: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    t + epsilon_ms * (2.0 * u - 1.0)
}

fn build_manifest<R: Rng + ?Sized>(
    scale: u64,
    index: u64,
    backend: &str,
    timestamp_ms: u64,
    rng: &mut R,
) -> Manifest {
    let temperature = (rng.random_range(0.0..1.2f64) * 100.0).round() / 100.0;
    ManifestBuilder::default()
        .user("prompt", format!("req-{scale}-{index}-{:08x}", rng.random::<u32>()))
        .user("session", format!("s{}", index % 97))
        .model("model", backend)
        .model("temperature", temperature)
        .model("max_tokens", rng.random_range(256..2048i64))
        .timestamp_ms(timestamp_ms)
        .tool_id(backend)
        .build()
        .expect("generated manifests are well formed")
}

fn malform<R: Rng + ?Sized>(canonical: &[u8], rng: &mut R) -> Vec<u8> {
    let mut value: serde_json::Value =
        serde_json::from_slice(canonical).expect("canonical bytes are JSON");
    match rng.random_range(0..3u8) {
        0 => serde_json::to_vec_pretty(&value).expect("serializes"),
        1 => canonical[..canonical.len() / 2].to_vec(),
        _ => {
            value.as_object_mut().expect("object").remove("tool_id");
            serde_json::to_vec(&value).expect("serializes")
        }
    }
}

/// Generates `scale` requests: `round(invalid_fraction * scale)` adversarial
/// ones split by the adversary mix, the rest valid.
pub fn generate_batch<R: Rng + ?Sized>(
    cfg: &WorkloadConfig,
    scale: u64,
    rng: &mut R,
) -> Result<Vec<Request>, ConfigError> {
    cfg.validate()?;
    if !cfg.sizes.contains(&scale) {
        return Err(ConfigError::Invalid(format!("scale {scale} not in configured sizes")));
    }
    let rotation = cfg.rotation_policy()?;
    let n_invalid = (cfg.invalid_fraction * scale as f64).round() as u64;

    let mut kinds: Vec<AttackKind> = cfg
        .adversary_mix
        .allocate(n_invalid)
        .into_iter()
        .flat_map(|(k, c)| std::iter::repeat_n(k, c as usize))
        .collect();
    kinds.shuffle(rng);
    let mut positions = index::sample(rng, scale as usize, n_invalid as usize).into_vec();
    positions.sort_unstable();
    let mut attacks = vec![None; scale as usize];
    for (pos, kind) in positions.into_iter().zip(kinds) {
        attacks[pos] = Some(kind);
    }

    let mut per_backend = vec![0u64; cfg.backends.len()];
    let mut clock = 0.0f64;
    let mut out = Vec::with_capacity(scale as usize);
    for (i, attack) in attacks.into_iter().enumerate() {
        let i = i as u64;
        let backend = select_backend(&cfg.backends, rng);
        let b_idx = cfg.backends.iter().position(|b| b.id == backend.id).expect("member");
        let prior = per_backend[b_idx];
        per_backend[b_idx] += 1;
        let key_id = if attack == Some(AttackKind::RevokedKeyUse) {
            RETIRED_KEY.to_string()
        } else {
            rotation
                .sample(|_| true, rng)
                .expect("validated rotation policy")
                .to_string()
        };
        let sim_verify_ms = backend.verify.sample(prior, rng);
        let sim_exec_ms = backend.exec.sample(prior, rng);
        let output_bytes = backend.output.sample(scale, rng);
        clock += sim_verify_ms + sim_exec_ms;
        let now_ms = cfg.clock_origin_ms + clock as u64;
        let timestamp = apply_jitter(
            cfg.clock_origin_ms as f64 + clock,
            cfg.jitter_epsilon_ms,
            rng,
        );
        let age = if attack == Some(AttackKind::ExpiredTimestamp) {
            cfg.freshness_window_ms + 1 + rng.random_range(0..cfg.freshness_window_ms)
        } else {
            rng.random_range(0..1000u64.min(cfg.freshness_window_ms))
        };
        let manifest = build_manifest(scale, i, &backend.id, now_ms - age, rng);
        let canonical = manifest.canonical_encode().expect("finite values");
        let body = if attack == Some(AttackKind::MalformedManifest) {
            malform(&canonical, rng)
        } else {
            canonical
        };
        let forge_bit = rng.random_range(0..512usize);
        let audited = rng.random::<f64>() < cfg.audit.detection_probability;
        out.push(Request {
            index: i,
            attack,
            backend_id: backend.id.clone(),
            key_id,
            body,
            now_ms,
            timestamp,
            sim_verify_ms,
            sim_exec_ms,
            output_bytes,
            forge_bit,
            audited,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn cfg(sizes: Vec<u64>, invalid: f64) -> WorkloadConfig {
        WorkloadConfig {
            sizes,
            invalid_fraction: invalid,
            ..WorkloadConfig::default()
        }
    }

    #[test]
    fn all_valid_batch() {
        let c = cfg(vec![100], 0.0);
        let batch = generate_batch(&c, 100, &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
        assert_eq!(batch.len(), 100);
        assert!(batch.iter().all(|r| r.attack.is_none()));
        assert!(batch.iter().all(|r| manifest::decode(&r.body).is_ok()));
    }

    #[test]
    fn invalid_share_and_mix() {
        let c = cfg(vec![1000], 0.2);
        let batch = generate_batch(&c, 1000, &mut ChaCha20Rng::seed_from_u64(2)).unwrap();
        let invalid: Vec<_> = batch.iter().filter_map(|r| r.attack).collect();
        assert_eq!(invalid.len(), 200);
        for k in AttackKind::ALL {
            assert_eq!(invalid.iter().filter(|a| **a == k).count(), 50);
        }
        for r in &batch {
            match r.attack {
                Some(AttackKind::MalformedManifest) => assert!(manifest::decode(&r.body).is_err()),
                _ => assert!(manifest::decode(&r.body).is_ok()),
            }
        }
    }

    #[test]
    fn same_seed_same_batch() {
        let c = cfg(vec![300], 0.2);
        let a = generate_batch(&c, 300, &mut ChaCha20Rng::seed_from_u64(3)).unwrap();
        let b = generate_batch(&c, 300, &mut ChaCha20Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let d = generate_batch(&c, 300, &mut ChaCha20Rng::seed_from_u64(4)).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn scale_must_be_configured() {
        let c = cfg(vec![100], 0.0);
        assert!(generate_batch(&c, 50, &mut ChaCha20Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn backend_selection() {
        let backends = SimulatedBackend::defaults();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut counts = [0u32; 3];
        for _ in 0..50_000 {
            let b = select_backend(&backends, &mut rng);
            counts[backends.iter().position(|x| x.id == b.id).unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / 50_000.0;
            assert!((0.32..=0.345).contains(&f), "{f}");
        }
        let single = &backends[..1];
        assert_eq!(select_backend(single, &mut rng).id, "gpt-4-turbo");
    }

    #[test]
    fn jitter_bounds_and_variance() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        assert_eq!(apply_jitter(5.0, 0.0, &mut rng), 5.0);
        let xs: Vec<f64> = (0..100_000).map(|_| apply_jitter(10.0, 3.0, &mut rng) - 10.0).collect();
        assert!(xs.iter().all(|x| x.abs() <= 3.0));
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((var - 3.0).abs() < 0.1, "{var}");
    }
}
