use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audit::AuditConfig;
use crate::keystore::RotationPolicy;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    ExpiredTimestamp,
    ForgedSignature,
    MalformedManifest,
    RevokedKeyUse,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [
        AttackKind::ExpiredTimestamp,
        AttackKind::ForgedSignature,
        AttackKind::MalformedManifest,
        AttackKind::RevokedKeyUse,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::ExpiredTimestamp => "expired-timestamp",
            AttackKind::ForgedSignature => "forged-signature",
            AttackKind::MalformedManifest => "malformed-manifest",
            AttackKind::RevokedKeyUse => "revoked-key-use",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct AdversaryMix {
    pub expired_timestamp: f64,
    pub forged_signature: f64,
    pub malformed_manifest: f64,
    pub revoked_key_use: f64,
}

impl Default for AdversaryMix {
    fn default() -> Self {
        Self {
            expired_timestamp: 0.25,
            forged_signature: 0.25,
            malformed_manifest: 0.25,
            revoked_key_use: 0.25,
        }
    }
}

impl AdversaryMix {
    pub fn only(kind: AttackKind) -> Self {
        let mut m = Self {
            expired_timestamp: 0.0,
            forged_signature: 0.0,
            malformed_manifest: 0.0,
            revoked_key_use: 0.0,
        };
        *m.weight_mut(kind) = 1.0;
        m
    }

    pub fn weight(&self, kind: AttackKind) -> f64 {
        match kind {
            AttackKind::ExpiredTimestamp => self.expired_timestamp,
            AttackKind::ForgedSignature => self.forged_signature,
            AttackKind::MalformedManifest => self.malformed_manifest,
            AttackKind::RevokedKeyUse => self.revoked_key_use,
        }
    }

    fn weight_mut(&mut self, kind: AttackKind) -> &mut f64 {
        match kind {
            AttackKind::ExpiredTimestamp => &mut self.expired_timestamp,
            AttackKind::ForgedSignature => &mut self.forged_signature,
            AttackKind::MalformedManifest => &mut self.malformed_manifest,
            AttackKind::RevokedKeyUse => &mut self.revoked_key_use,
        }
    }

    /// Splits `n` among the kinds by largest remainder.
    pub fn allocate(&self, n: u64) -> Vec<(AttackKind, u64)> {
        let quotas: Vec<f64> = AttackKind::ALL.iter().map(|k| self.weight(*k) * n as f64).collect();
        let mut counts: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
        let mut left = n - counts.iter().sum::<u64>();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        order.sort_by(|a, b| {
            let fa = quotas[*a] - quotas[*a].floor();
            let fb = quotas[*b] - quotas[*b].floor();
            fb.total_cmp(&fa).then(a.cmp(b))
        });
        for i in order {
            if left == 0 {
                break;
            }
            if self.weight(AttackKind::ALL[i]) > 0.0 {
                counts[i] += 1;
                left -= 1;
            }
        }
        AttackKind::ALL.iter().copied().zip(counts).collect()
    }
}

/// Latency draw: `base + spread * Exp(1) + init_overhead * exp(-k / 50)`,
/// where `k` counts earlier requests to the same backend in the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModel {
    pub base_ms: f64,
    pub spread_ms: f64,
    #[serde(default)]
    pub init_overhead_ms: f64,
}

impl LatencyModel {
    /// One draw, where `prior` counts earlier requests to the same backend.
    pub fn sample<R: Rng + ?Sized>(&self, prior: u64, rng: &mut R) -> f64 {
        let e: f64 = Exp1.sample(rng);
        self.base_ms + self.spread_ms * e + self.init_overhead_ms * (-(prior as f64) / 50.0).exp()
    }
}

/// Output size: `mean + sigma0 * exp(-decay_rate * N / 2000) * Z`, i.e. a
/// variance of `sigma0^2 * exp(-decay_rate * N / 1000)` at scale `N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputModel {
    pub mean_bytes: f64,
    pub sigma0_bytes: f64,
    pub decay_rate: f64,
}

impl OutputModel {
    pub fn sample<R: Rng + ?Sized>(&self, scale: u64, rng: &mut R) -> u64 {
        let z: f64 = StandardNormal.sample(rng);
        let sd = self.sigma0_bytes * (-self.decay_rate * scale as f64 / 2000.0).exp();
        (self.mean_bytes + sd * z).round().max(1.0) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatedBackend {
    pub id: String,
    pub verify: LatencyModel,
    pub exec: LatencyModel,
    pub output: OutputModel,
}

impl SimulatedBackend {
    fn new(id: &str, verify: (f64, f64, f64), exec: (f64, f64, f64)) -> Self {
        let lat = |(base_ms, spread_ms, init_overhead_ms)| LatencyModel {
            base_ms,
            spread_ms,
            init_overhead_ms,
        };
        Self {
            id: id.into(),
            verify: lat(verify),
            exec: lat(exec),
            output: OutputModel {
                mean_bytes: 2048.0,
                sigma0_bytes: 512.0,
                decay_rate: 0.15,
            },
        }
    }

    pub fn defaults() -> Vec<Self> {
        vec![
            Self::new("gpt-4-turbo", (1.5, 0.5, 0.0), (40.0, 10.0, 0.0)),
            Self::new("llama-3.5", (3.7, 1.0, 0.0), (65.0, 18.0, 0.0)),
            Self::new("deepseek-v3", (2.4, 0.8, 4.0), (52.0, 14.0, 30.0)),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeySpec {
    pub key_id: String,
    /// Deviation from the uniform selection probability.
    #[serde(default)]
    pub offset: f64,
}

/// Revokes `key_id` after the signing phase of every scale, so manifests
/// already signed with it are rejected at verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevocationScenario {
    pub key_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub sizes: Vec<u64>,
    pub invalid_fraction: f64,
    pub adversary_mix: AdversaryMix,
    pub backends: Vec<SimulatedBackend>,
    pub keys: Vec<KeySpec>,
    pub revocation: Option<RevocationScenario>,
    pub audit: AuditConfig,
    pub seed: u64,
    pub jitter_epsilon_ms: f64,
    /// Freshness window applied by the default policy.
    pub freshness_window_ms: u64,
    pub clock_origin_ms: u64,
    /// Worker threads; 0 picks the available parallelism.
    pub workers: usize,
    /// Persist one log per scale under this directory; in memory when unset.
    #[serde(skip)]
    pub log_root: Option<PathBuf>,
}

pub const DEFAULT_SIZES: [u64; 7] = [100, 500, 1000, 5000, 10000, 20000, 50000];

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            sizes: DEFAULT_SIZES.to_vec(),
            invalid_fraction: 0.2,
            adversary_mix: AdversaryMix::default(),
            backends: SimulatedBackend::defaults(),
            keys: vec![
                KeySpec {
                    key_id: "dev-k1".into(),
                    offset: 0.0,
                },
                KeySpec {
                    key_id: "dev-k2".into(),
                    offset: 0.0,
                },
            ],
            revocation: None,
            audit: AuditConfig::default(),
            seed: 42,
            jitter_epsilon_ms: 0.0,
            freshness_window_ms: 300_000,
            clock_origin_ms: 1_700_000_000_000,
            workers: 0,
            log_root: None,
        }
    }
}

fn nonneg(name: &str, v: f64) -> Result<(), ConfigError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be finite and >= 0, got {v}")))
    }
}

impl WorkloadConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn rotation_policy(&self) -> Result<RotationPolicy, ConfigError> {
        RotationPolicy::new(
            self.keys.iter().map(|k| k.key_id.clone()).collect(),
            self.keys.iter().map(|k| k.offset).collect(),
        )
        .map_err(|e| invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.sizes.is_empty() {
            return Err(invalid("sizes must not be empty"));
        }
        if self.sizes[0] == 0 || self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("sizes must be positive and strictly increasing"));
        }
        if !(0.0..=1.0).contains(&self.invalid_fraction) {
            return Err(invalid(format!(
                "invalid_fraction must be in [0, 1], got {}",
                self.invalid_fraction
            )));
        }
        for k in AttackKind::ALL {
            nonneg(&format!("adversary_mix.{}", k.as_str()), self.adversary_mix.weight(k))?;
        }
        let total: f64 = AttackKind::ALL.iter().map(|k| self.adversary_mix.weight(*k)).sum();
        if self.invalid_fraction > 0.0 && (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("adversary_mix weights sum to {total}, not 1")));
        }
        if self.backends.is_empty() {
            return Err(invalid("at least one backend is required"));
        }
        let mut ids = BTreeSet::new();
        for b in &self.backends {
            if b.id.is_empty() || !ids.insert(b.id.as_str()) {
                return Err(invalid(format!("backend id `{}` empty or duplicated", b.id)));
            }
            for (name, v) in [
                ("verify.base_ms", b.verify.base_ms),
                ("verify.spread_ms", b.verify.spread_ms),
                ("verify.init_overhead_ms", b.verify.init_overhead_ms),
                ("exec.base_ms", b.exec.base_ms),
                ("exec.spread_ms", b.exec.spread_ms),
                ("exec.init_overhead_ms", b.exec.init_overhead_ms),
                ("output.mean_bytes", b.output.mean_bytes),
                ("output.sigma0_bytes", b.output.sigma0_bytes),
                ("output.decay_rate", b.output.decay_rate),
            ] {
                nonneg(&format!("backend {} {name}", b.id), v)?;
            }
        }
        let mut keys = BTreeSet::new();
        for k in &self.keys {
            if k.key_id.is_empty() || k.key_id == super::RETIRED_KEY || !keys.insert(k.key_id.as_str())
            {
                return Err(invalid(format!("key id `{}` empty, reserved or duplicated", k.key_id)));
            }
        }
        self.rotation_policy()?;
        if let Some(r) = &self.revocation {
            if !keys.contains(r.key_id.as_str()) {
                return Err(invalid(format!("revocation key `{}` not configured", r.key_id)));
            }
        }
        AuditConfig::new(
            self.audit.detection_probability,
            self.audit.audit_frequency,
            self.audit.rounds,
        )
        .map_err(|e| invalid(e.to_string()))?;
        nonneg("jitter_epsilon_ms", self.jitter_epsilon_ms)?;
        if self.freshness_window_ms == 0 {
            return Err(invalid("freshness_window_ms must be > 0"));
        }
        if self.clock_origin_ms <= self.freshness_window_ms * 2 {
            return Err(invalid("clock_origin_ms must exceed twice the freshness window"));
        }
        Ok(())
    }
}
