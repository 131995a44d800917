use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{
    generate_batch, AttackKind, ConfigError, ErrorKind, ExecutionOutcome, Request, Status,
    WorkloadConfig, RETIRED_KEY,
};
use crate::audit::{build_evidence, EvidenceTuple, MetricsRecord};
use crate::hash::sha256;
use crate::keystore::{Keystore, RejectReason, Signature, SignatureScheme, Verdict};
use crate::manifest::{self, ManifestDigest};
use crate::policy::{PolicyRule, PolicySet, RuleKind, Severity};
use crate::tlog::{LogError, LogPayload, TransparencyLog};

pub const BASELINE_DEFINITION: &str =
    "baseline = decode + policy evaluation + simulated execution, with signing, verification and logging elided";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("log storage failure: {0}")]
    Storage(#[from] LogError),
    #[error("keystore failure: {0}")]
    Key(#[from] crate::keystore::KeystoreError),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Policy used by the harness: required fields, backend allowlist, a warn-only
/// temperature ceiling, a size cap, and the freshness window.
pub fn default_policy(cfg: &WorkloadConfig) -> PolicySet {
    let rules = vec![
        PolicyRule::new(
            "prompt-required",
            RuleKind::RequiredField {
                key: "prompt".into(),
                partition: crate::policy::Partition::User,
            },
            Severity::Block,
        ),
        PolicyRule::new(
            "model-required",
            RuleKind::RequiredField {
                key: "model".into(),
                partition: crate::policy::Partition::Model,
            },
            Severity::Block,
        ),
        PolicyRule::new(
            "tool-allowlist",
            RuleKind::ToolAllowlist {
                tools: cfg.backends.iter().map(|b| b.id.clone()).collect(),
            },
            Severity::Block,
        ),
        PolicyRule::new(
            "temperature-ceiling",
            RuleKind::ValueRange {
                key: "temperature".into(),
                min: Some(0.0),
                max: Some(1.0),
            },
            Severity::Warn,
        ),
        PolicyRule::new(
            "size-cap",
            RuleKind::MaxEncodingSize { max_bytes: 4096 },
            Severity::Block,
        ),
        PolicyRule::new(
            "freshness",
            RuleKind::FreshnessWindow { skew_ms: 2000 },
            Severity::Block,
        ),
    ];
    PolicySet::new(rules, cfg.freshness_window_ms).expect("default policy is valid")
}

enum Stage1 {
    Rejected(ErrorKind, Severity),
    Signed {
        digest: ManifestDigest,
        signature: Signature,
        severity: Severity,
    },
}

struct Stage1Result {
    stage: Stage1,
    nanos: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleReport {
    pub scale: u64,
    pub processed: u64,
    pub successes: u64,
    pub failures: u64,
    pub error_counts: BTreeMap<String, u64>,
    pub logged: u64,
    pub log_root: String,
    pub chain_head: String,
    pub log_bytes: u64,
    pub hash_ops: u64,
    pub evidence_count: u64,
    pub secure_wall_ms: f64,
    pub baseline_wall_ms: f64,
    pub per_manifest_secure_us: f64,
    pub measured_secure_ms: f64,
    pub measured_baseline_ms: f64,
    pub simulated_exec_ms: f64,
    pub overhead_delta: f64,
    /// True when the secure path measured faster than the baseline.
    pub overhead_negative: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub workers: usize,
    pub baseline_definition: &'static str,
    pub config: WorkloadConfig,
    pub total_wall_ms: f64,
    pub scales: Vec<ScaleReport>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcomes: Vec<ExecutionOutcome>,
    pub metrics: Vec<MetricsRecord>,
    pub evidence: Vec<EvidenceTuple>,
    pub report: RunReport,
}

/// Output of one scale.
#[derive(Debug, Clone)]
pub struct ScaleRun {
    pub requests: Vec<Request>,
    /// Whether the signing stage produced a signature for each request.
    pub signed_by_pipeline: Vec<bool>,
    pub outcomes: Vec<ExecutionOutcome>,
    pub metrics: Vec<MetricsRecord>,
    pub evidence: Vec<EvidenceTuple>,
    pub report: ScaleReport,
}

/// Deterministic stand-in for a tool's output.
fn synth_output(index: u64, len: u64) -> Vec<u8> {
    let block = sha256(&index.to_be_bytes());
    block.as_bytes().iter().copied().cycle().take(len as usize).collect()
}

fn ms(nanos: u64) -> f64 {
    nanos as f64 / 1e6
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_nanos() as u64)
}

fn sign_stage(r: &Request, keystore: &Keystore, policy: &PolicySet) -> Stage1Result {
    let (stage, nanos) = timed(|| {
        let m = match manifest::decode(&r.body) {
            Ok(m) => m,
            Err(_) => return Stage1::Rejected(ErrorKind::MalformedEncoding, Severity::Block),
        };
        let report = policy.evaluate(&m, r.now_ms);
        if !report.passed {
            let kind = if report.failed_freshness(policy) {
                ErrorKind::ExpiredTimestamp
            } else {
                ErrorKind::PolicyViolation
            };
            return Stage1::Rejected(kind, report.severity);
        }
        let digest = manifest::digest_bytes(&r.body);
        match keystore.sign(&digest, &r.key_id) {
            Ok(signature) => Stage1::Signed {
                digest,
                signature,
                severity: report.severity,
            },
            Err(crate::keystore::KeystoreError::KeyRevoked(_)) => {
                Stage1::Rejected(ErrorKind::KeyRevoked, report.severity)
            }
            Err(_) => Stage1::Rejected(ErrorKind::SignatureInvalid, report.severity),
        }
    });
    Stage1Result { stage, nanos }
}

fn flip_bit(sig: &Signature, bit: usize) -> Signature {
    let mut bytes = sig.as_bytes().to_vec();
    let bit = bit % (bytes.len() * 8);
    bytes[bit / 8] ^= 1 << (bit % 8);
    Signature::from_bytes(bytes)
}

/// Runs one scale through signing, verification and logging, simulated
/// execution with auditing, and the baseline pass.
pub fn run_scale(
    cfg: &WorkloadConfig,
    scale: u64,
    policy: &PolicySet,
    log: &mut TransparencyLog,
) -> Result<ScaleRun, HarnessError> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(scale);

    let keystore = Keystore::new(SignatureScheme::Ed25519);
    for k in &cfg.keys {
        keystore.keygen_seeded(&k.key_id, &mut rng)?;
    }
    keystore.keygen_seeded(RETIRED_KEY, &mut rng)?;
    let requests = generate_batch(cfg, scale, &mut rng)?;

    // Replayed signatures from a key that is revoked before the run.
    let mut stage1: Vec<Stage1Result> = requests
        .iter()
        .map(|r| {
            if r.attack != Some(AttackKind::RevokedKeyUse) {
                return Stage1Result {
                    stage: Stage1::Rejected(ErrorKind::PolicyViolation, Severity::Block),
                    nanos: 0,
                };
            }
            let digest = manifest::digest_bytes(&r.body);
            let m = manifest::decode(&r.body).expect("replayed manifests are canonical");
            Stage1Result {
                stage: Stage1::Signed {
                    digest,
                    signature: keystore.sign(&digest, RETIRED_KEY).expect("retired key live"),
                    severity: policy.evaluate(&m, r.now_ms).severity,
                },
                nanos: 0,
            }
        })
        .collect();
    keystore.revoke(RETIRED_KEY)?;

    // Signing stage: decode, policy, sign.
    let secure_start = Instant::now();
    let signed: Vec<Option<Stage1Result>> = requests
        .par_iter()
        .map(|r| (r.attack != Some(AttackKind::RevokedKeyUse)).then(|| sign_stage(r, &keystore, policy)))
        .collect();
    for ((slot, s), r) in stage1.iter_mut().zip(signed).zip(&requests) {
        let Some(mut s) = s else { continue };
        if r.attack == Some(AttackKind::ForgedSignature) {
            if let Stage1::Signed { signature, .. } = &mut s.stage {
                *signature = flip_bit(signature, r.forge_bit);
            }
        }
        *slot = s;
    }
    let sign_wall = secure_start.elapsed();
    let signed_by_pipeline: Vec<bool> = requests
        .iter()
        .zip(&stage1)
        .map(|(r, s)| {
            r.attack != Some(AttackKind::RevokedKeyUse) && matches!(s.stage, Stage1::Signed { .. })
        })
        .collect();

    if let Some(rev) = &cfg.revocation {
        keystore.revoke(&rev.key_id)?;
    }

    // Verification stage: verify in parallel, append in request order.
    let verify_start = Instant::now();
    let verdicts: Vec<Option<(Verdict, u64)>> = requests
        .par_iter()
        .zip(stage1.par_iter())
        .map(|(r, s)| match &s.stage {
            Stage1::Signed { signature, .. } => Some(timed(|| {
                let digest = manifest::digest_bytes(&r.body);
                keystore.verify(&digest, signature.as_bytes(), &r.key_id)
            })),
            Stage1::Rejected(..) => None,
        })
        .collect();
    let mut receipts = vec![None; requests.len()];
    let mut append_nanos = vec![0u64; requests.len()];
    for (i, r) in requests.iter().enumerate() {
        if let (Some((Verdict::Accept, _)), Stage1::Signed { digest, signature, .. }) =
            (&verdicts[i], &stage1[i].stage)
        {
            let (receipt, nanos) = timed(|| {
                log.append(LogPayload {
                    manifest_digest: *digest,
                    signature: signature.as_bytes().to_vec(),
                    key_id: r.key_id.clone(),
                    appended_at: r.now_ms,
                })
            });
            receipts[i] = Some(receipt?);
            append_nanos[i] = nanos;
        }
    }
    let verify_wall = verify_start.elapsed();

    // Execution stage: simulated tool run and Bernoulli audit.
    let exec_start = Instant::now();
    let executed: Vec<Option<(Option<EvidenceTuple>, u64)>> = requests
        .par_iter()
        .zip(receipts.par_iter())
        .map(|(r, receipt)| {
            receipt.as_ref().map(|rc| {
                timed(|| {
                    let output = synth_output(r.index, r.output_bytes);
                    r.audited.then(|| {
                        build_evidence(rc.index, rc.root, &output, r.sim_exec_ms, r.sim_verify_ms)
                            .expect("simulated timings are valid")
                    })
                })
            })
        })
        .collect();
    let exec_wall = exec_start.elapsed();
    let secure_wall = sign_wall + verify_wall + exec_wall;

    // Baseline: same requests, no signing, verification or logging.
    let baseline_start = Instant::now();
    let baseline: Vec<u64> = requests
        .par_iter()
        .map(|r| {
            timed(|| {
                let Ok(m) = manifest::decode(&r.body) else {
                    return 0;
                };
                if !policy.evaluate(&m, r.now_ms).passed {
                    return 0;
                }
                synth_output(r.index, r.output_bytes).len()
            })
            .1
        })
        .collect();
    let baseline_wall = baseline_start.elapsed();

    let mut outcomes = Vec::with_capacity(requests.len());
    let mut metrics = Vec::new();
    let mut evidence = Vec::new();
    let mut error_counts: BTreeMap<String, u64> = BTreeMap::new();
    let (mut sec_ns, mut base_ns, mut sim_exec) = (0u64, 0u64, 0.0f64);
    for (i, r) in requests.iter().enumerate() {
        let (severity, error, verified) = match (&stage1[i].stage, &verdicts[i]) {
            (Stage1::Rejected(kind, sev), _) => (*sev, Some(*kind), false),
            (Stage1::Signed { severity, .. }, Some((Verdict::Accept, _))) => (*severity, None, true),
            (Stage1::Signed { severity, .. }, Some((Verdict::Reject(reason), _))) => {
                let kind = match reason {
                    RejectReason::KeyRevoked => ErrorKind::KeyRevoked,
                    RejectReason::SignatureInvalid | RejectReason::UnknownKey => {
                        ErrorKind::SignatureInvalid
                    }
                };
                (*severity, Some(kind), true)
            }
            (Stage1::Signed { severity, .. }, None) => {
                (*severity, Some(ErrorKind::SignatureInvalid), false)
            }
        };
        let success = error.is_none();
        if let Some(k) = error {
            *error_counts.entry(k.as_str().to_string()).or_default() += 1;
        }
        outcomes.push(ExecutionOutcome {
            scale,
            request_index: r.index,
            backend_id: r.backend_id.clone(),
            key_id: r.key_id.clone(),
            severity,
            status: if success { Status::Success } else { Status::Failure },
            error_kind: error,
            verify_time_ms: if verified { r.sim_verify_ms } else { 0.0 },
            exec_time_ms: if success { r.sim_exec_ms } else { 0.0 },
            output_bytes: if success { r.output_bytes } else { 0 },
            timestamp: r.timestamp,
        });
        if let Some((ev, exec_ns)) = &executed[i] {
            let verify_ns = verdicts[i].map_or(0, |v| v.1);
            let secure = stage1[i].nanos + verify_ns + append_nanos[i] + exec_ns;
            sec_ns += secure;
            base_ns += baseline[i];
            sim_exec += r.sim_exec_ms;
            metrics.push(MetricsRecord::new(
                format!("{scale}:{}", r.index),
                r.sim_exec_ms,
                ms(verify_ns),
                r.sim_exec_ms + ms(baseline[i]),
                r.sim_exec_ms + ms(secure),
            ));
            if let Some(ev) = ev {
                evidence.push(ev.clone());
            }
        }
    }
    let successes = outcomes.iter().filter(|o| o.status == Status::Success).count() as u64;
    let t_base = sim_exec + ms(base_ns);
    let overhead_delta = if t_base > 0.0 {
        (ms(sec_ns) - ms(base_ns)) / t_base
    } else {
        0.0
    };
    let root = log.root();
    let report = ScaleReport {
        scale,
        processed: outcomes.len() as u64,
        successes,
        failures: outcomes.len() as u64 - successes,
        error_counts,
        logged: log.len(),
        log_root: root.hash.to_hex(),
        chain_head: log.chain_head().to_hex(),
        log_bytes: log.storage_bytes(),
        hash_ops: log.hash_ops(),
        evidence_count: evidence.len() as u64,
        secure_wall_ms: secure_wall.as_secs_f64() * 1e3,
        baseline_wall_ms: baseline_wall.as_secs_f64() * 1e3,
        per_manifest_secure_us: secure_wall.as_secs_f64() * 1e6 / scale as f64,
        measured_secure_ms: ms(sec_ns),
        measured_baseline_ms: ms(base_ns),
        simulated_exec_ms: sim_exec,
        overhead_delta,
        overhead_negative: overhead_delta < 0.0,
    };
    Ok(ScaleRun {
        requests,
        signed_by_pipeline,
        outcomes,
        metrics,
        evidence,
        report,
    })
}

/// Runs every configured scale. Each scale gets a fresh log: in memory, or
/// `log_root/scale-N` (replaced if present) when a log root is configured.
pub fn run_pipeline(cfg: &WorkloadConfig, policy: &PolicySet) -> Result<RunResult, HarnessError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    let workers = pool.current_num_threads();
    let start = Instant::now();
    let mut result = RunResult {
        outcomes: Vec::new(),
        metrics: Vec::new(),
        evidence: Vec::new(),
        report: RunReport {
            seed: cfg.seed,
            workers,
            baseline_definition: BASELINE_DEFINITION,
            config: cfg.clone(),
            total_wall_ms: 0.0,
            scales: Vec::new(),
        },
    };
    for &scale in &cfg.sizes {
        let mut log = match &cfg.log_root {
            Some(root) => {
                let dir = root.join(format!("scale-{scale}"));
                if dir.exists() {
                    std::fs::remove_dir_all(&dir).map_err(LogError::Storage)?;
                }
                TransparencyLog::open(&dir)?
            }
            None => TransparencyLog::in_memory(),
        };
        let run = pool.install(|| run_scale(cfg, scale, policy, &mut log))?;
        result.outcomes.extend(run.outcomes);
        result.metrics.extend(run.metrics);
        result.evidence.extend(run.evidence);
        result.report.scales.push(run.report);
    }
    result.report.total_wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(result)
}

pub fn outcomes_to_csv(outcomes: &[ExecutionOutcome]) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for o in outcomes {
        w.serialize(o)?;
    }
    w.into_inner()
        .map_err(|e| HarnessError::Csv(csv::Error::from(e.into_error())))
}

pub fn outcomes_from_csv(bytes: &[u8]) -> Result<Vec<ExecutionOutcome>, HarnessError> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(HarnessError::from)
}
