use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::json;

use manifestd_core::audit::{self, build_evidence, evidence_to_ndjson, metrics_to_csv, AuditConfig};
use manifestd_core::fsutil::write_atomic;
use manifestd_core::harness::{
    default_policy, outcomes_from_csv, outcomes_to_csv, run_pipeline, HarnessError,
    SimulatedBackend, WorkloadConfig,
};
use manifestd_core::keystore::SignManifestError;
use manifestd_core::manifest;
use manifestd_core::stats::build_report;
use manifestd_core::tlog::{
    check_integrity, verify_inclusion, IntegrityReport, LogError, LogPayload, TransparencyLog,
};
use manifestd_core::{
    sha256, Keystore, PolicySet, RotationPolicy, SignatureScheme, SignedEnvelope,
    Verdict,
};

const EXIT_CONFIG: u8 = 1;
const EXIT_POLICY: u8 = 2;
const EXIT_KEY: u8 = 3;
const EXIT_VERIFY: u8 = 4;
const EXIT_STORAGE: u8 = 5;

const PASSPHRASE_ENV: &str = "MANIFESTD_KEYSTORE_PASSPHRASE";

#[derive(Parser)]
#[command(name = "manifestd", version, about = "Sign, verify, log and audit tool-invocation manifests")]
struct Cli {
    /// Policy file (TOML).
    #[arg(long, global = true)]
    policy: Option<PathBuf>,
    /// Keystore file. The passphrase is read from MANIFESTD_KEYSTORE_PASSPHRASE.
    #[arg(long, global = true)]
    keystore: Option<PathBuf>,
    /// Transparency log directory.
    #[arg(long, global = true, env = "MANIFESTD_LOG_DIR")]
    log_dir: Option<PathBuf>,
    /// Output file, or output directory for `bench`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scheme {
    EcdsaP256,
    Ed25519,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a key and add it to the keystore (created if missing).
    KeyGen {
        #[arg(long)]
        key_id: String,
        #[arg(long, value_enum, default_value = "ecdsa-p256")]
        scheme: Scheme,
    },
    /// Mark a key revoked.
    KeyRevoke {
        #[arg(long)]
        key_id: String,
    },
    /// List public key handles.
    KeyList,
    /// Decode, evaluate policy and sign a manifest or newline-delimited batch.
    Sign {
        manifest: PathBuf,
        /// Signing key. Drawn uniformly from live keys when omitted.
        #[arg(long)]
        key_id: Option<String>,
        /// Evaluation time in Unix milliseconds. Defaults to the system clock.
        #[arg(long)]
        now_ms: Option<u64>,
    },
    /// Verify signed envelopes and append them to the log.
    VerifyAndLog {
        signed: PathBuf,
        #[arg(long)]
        now_ms: Option<u64>,
    },
    /// Sample log entries, run the simulated tool, and export evidence.
    Audit {
        #[arg(long, default_value_t = AuditConfig::default().detection_probability)]
        probability: f64,
        /// First entry index (inclusive).
        #[arg(long, default_value_t = 0)]
        from: u64,
        /// Last entry index (exclusive). Defaults to the log size.
        #[arg(long)]
        to: Option<u64>,
        /// Workload config supplying backend latency profiles.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the workload ladder and write all reports into --out.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<u64>>,
        #[arg(long)]
        invalid_fraction: Option<f64>,
        /// Worker threads; 0 uses all cores.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Compute the statistics report from an outcomes CSV.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Recompute every leaf, chain value and root of the log.
    LogVerify,
    /// Print an inclusion proof.
    LogProve {
        #[arg(long)]
        index: u64,
        /// Tree size the proof is against. Defaults to the log size.
        #[arg(long)]
        size: Option<u64>,
    },
    /// Print log size, root, storage and per-key counts.
    LogStats,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    err: anyhow::Error,
}

type CmdResult = Result<(), Failure>;

trait Code<T> {
    fn code(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Code<T> for Result<T, E> {
    fn code(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code,
            err: e.into(),
        })
    }
}

fn fail(code: u8, msg: impl Into<String>) -> Failure {
    Failure {
        code,
        err: anyhow!(msg.into()),
    }
}

fn log_code(e: &LogError) -> u8 {
    match e {
        LogError::OutOfRange(_) => EXIT_CONFIG,
        _ => EXIT_STORAGE,
    }
}

fn harness_code(e: &HarnessError) -> u8 {
    match e {
        HarnessError::Config(_) | HarnessError::Pool(_) => EXIT_CONFIG,
        HarnessError::Key(_) => EXIT_KEY,
        HarnessError::Storage(_) | HarnessError::Csv(_) => EXIT_STORAGE,
    }
}

fn now_ms(over: Option<u64>) -> u64 {
    over.unwrap_or_else(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(1)
    })
}

fn passphrase() -> Vec<u8> {
    std::env::var(PASSPHRASE_ENV).unwrap_or_default().into_bytes()
}

fn print_json(v: &serde_json::Value) {
    println!("{v}");
}

/// Writes to `out` atomically, or to stdout.
fn emit(out: Option<&Path>, bytes: &[u8]) -> CmdResult {
    match out {
        Some(p) => write_atomic(p, bytes)
            .with_context(|| format!("writing {}", p.display()))
            .code(EXIT_STORAGE),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(bytes).code(EXIT_STORAGE)
        }
    }
}

struct App {
    cli: Cli,
}

impl App {
    fn keystore_path(&self) -> Result<&Path, Failure> {
        self.cli
            .keystore
            .as_deref()
            .ok_or_else(|| fail(EXIT_CONFIG, "--keystore is required"))
    }

    fn load_keystore(&self) -> Result<Keystore, Failure> {
        let path = self.keystore_path()?;
        Keystore::load(path, &passphrase())
            .with_context(|| format!("loading keystore {}", path.display()))
            .code(EXIT_KEY)
    }

    fn save_keystore(&self, ks: &Keystore) -> CmdResult {
        ks.save(self.keystore_path()?, &passphrase()).code(EXIT_KEY)
    }

    fn log_dir(&self) -> Result<&Path, Failure> {
        self.cli
            .log_dir
            .as_deref()
            .ok_or_else(|| fail(EXIT_CONFIG, "--log-dir or MANIFESTD_LOG_DIR is required"))
    }

    fn read_log(&self) -> Result<TransparencyLog, Failure> {
        let dir = self.log_dir()?;
        TransparencyLog::load_read_only(dir).map_err(|e| Failure {
            code: log_code(&e),
            err: anyhow::Error::new(e).context(format!("reading log {}", dir.display())),
        })
    }

    fn policy(&self) -> Result<PolicySet, Failure> {
        let path = self
            .cli
            .policy
            .as_deref()
            .ok_or_else(|| fail(EXIT_CONFIG, "--policy is required"))?;
        PolicySet::load(path)
            .with_context(|| format!("loading policy {}", path.display()))
            .code(EXIT_CONFIG)
    }

    fn run(&self) -> CmdResult {
        let seed = self.cli.seed;
        match &self.cli.cmd {
            Command::KeyGen { key_id, scheme } => self.key_gen(key_id, *scheme),
            Command::KeyRevoke { key_id } => {
                let ks = self.load_keystore()?;
                ks.revoke(key_id).code(EXIT_KEY)?;
                self.save_keystore(&ks)?;
                print_json(&json!({"seed": seed, "revoked": key_id}));
                Ok(())
            }
            Command::KeyList => {
                let ks = self.load_keystore()?;
                print_json(&json!({"seed": seed, "keys": ks.list()}));
                Ok(())
            }
            Command::Sign {
                manifest,
                key_id,
                now_ms: now,
            } => self.sign(manifest, key_id.as_deref(), now_ms(*now)),
            Command::VerifyAndLog { signed, now_ms: now } => {
                self.verify_and_log(signed, now_ms(*now))
            }
            Command::Audit {
                probability,
                from,
                to,
                config,
            } => self.audit(*probability, *from, *to, config.as_deref()),
            Command::Bench {
                config,
                sizes,
                invalid_fraction,
                workers,
            } => self.bench(config.as_deref(), sizes.clone(), *invalid_fraction, *workers),
            Command::Stats { input } => self.stats(input),
            Command::LogVerify => {
                let dir = self.log_dir()?;
                let report = check_integrity(dir).map_err(|e| Failure {
                    code: log_code(&e),
                    err: e.into(),
                })?;
                print_json(&json!({"seed": seed, "report": report}));
                match report {
                    IntegrityReport::Ok { .. } => Ok(()),
                    IntegrityReport::Tampered { at, reason } => {
                        Err(fail(EXIT_VERIFY, format!("log tampered at index {at}: {reason}")))
                    }
                }
            }
            Command::LogProve { index, size } => {
                let log = self.read_log()?;
                let size = size.unwrap_or(log.len());
                let proof = log.prove_inclusion(*index, size).map_err(|e| Failure {
                    code: log_code(&e),
                    err: e.into(),
                })?;
                let root = log.root_at(size).code(EXIT_CONFIG)?;
                let leaf = log.leaf_hash(*index).expect("index checked by prove_inclusion");
                print_json(&json!({
                    "seed": seed,
                    "leaf_hash": leaf,
                    "root": root,
                    "proof": proof,
                    "verified": verify_inclusion(&leaf, &proof, &root),
                }));
                Ok(())
            }
            Command::LogStats => {
                let log = self.read_log()?;
                let mut per_key = std::collections::BTreeMap::<&str, u64>::new();
                for e in log.entries() {
                    *per_key.entry(e.key_id.as_str()).or_default() += 1;
                }
                let marks: Vec<u64> = std::iter::successors(Some(1u64), |n| n.checked_mul(10))
                    .take_while(|n| *n < log.len())
                    .chain(std::iter::once(log.len()))
                    .collect();
                print_json(&json!({
                    "seed": seed,
                    "tree_size": log.len(),
                    "root": log.root(),
                    "chain_head": log.chain_head(),
                    "storage_bytes": log.storage_bytes(),
                    "checkpoints": log.checkpoints().len(),
                    "entries_by_key": per_key,
                    "growth": log.log_growth_series(&marks),
                }));
                Ok(())
            }
        }
    }

    fn key_gen(&self, key_id: &str, scheme: Scheme) -> CmdResult {
        let path = self.keystore_path()?;
        let ks = if path.exists() {
            self.load_keystore()?
        } else {
            Keystore::default()
        };
        let scheme = match scheme {
            Scheme::EcdsaP256 => SignatureScheme::EcdsaP256,
            Scheme::Ed25519 => SignatureScheme::Ed25519,
        };
        let handle = ks.keygen_with_scheme(key_id, scheme).code(EXIT_KEY)?;
        self.save_keystore(&ks)?;
        print_json(&json!({"seed": self.cli.seed, "key": handle}));
        Ok(())
    }

    fn sign(&self, input: &Path, key_id: Option<&str>, now: u64) -> CmdResult {
        let seed = self.cli.seed;
        let policy = self.policy()?;
        let ks = self.load_keystore()?;
        let bytes = std::fs::read(input)
            .with_context(|| format!("reading {}", input.display()))
            .code(EXIT_CONFIG)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let rotation = match key_id {
            Some(_) => None,
            None => {
                let live: Vec<String> = ks
                    .list()
                    .into_iter()
                    .filter(|h| !h.revoked)
                    .map(|h| h.key_id)
                    .collect();
                if live.is_empty() {
                    return Err(fail(EXIT_KEY, "no live key in keystore"));
                }
                Some(RotationPolicy::uniform(live).code(EXIT_KEY)?)
            }
        };

        let mut out = Vec::new();
        for (item, decoded) in manifest::decode_batch(&bytes).into_iter().enumerate() {
            let m = match decoded {
                Ok(m) => m,
                Err(e) => {
                    print_json(&json!({
                        "seed": seed, "item": item, "status": "rejected",
                        "reason": "malformed-encoding", "detail": e.to_string(),
                    }));
                    return Err(fail(EXIT_POLICY, format!("item {item}: {e}")));
                }
            };
            let report = policy.evaluate(&m, now);
            if !report.passed {
                print_json(&json!({
                    "seed": seed, "item": item, "status": "rejected",
                    "reason": "policy", "detail": report.reason_line(),
                }));
                return Err(fail(EXIT_POLICY, format!("item {item}: {}", report.reason_line())));
            }
            let key = match (&rotation, key_id) {
                (Some(r), _) => ks.select_key(r, &mut rng).code(EXIT_KEY)?,
                (None, Some(k)) => k.to_string(),
                (None, None) => unreachable!("rotation is set when no key is given"),
            };
            let signed = ks.sign_manifest(&m, &key).map_err(|e| match e {
                SignManifestError::Manifest(e) => fail(EXIT_POLICY, e.to_string()),
                SignManifestError::Key(e) => fail(EXIT_KEY, format!("item {item}: {e}")),
            })?;
            log::info!("item {item} signed by {key} ({})", report.reason_line());
            let line = serde_json::to_string(&signed.to_envelope()).code(EXIT_STORAGE)?;
            out.extend_from_slice(line.as_bytes());
            out.push(b'\n');
        }
        if out.is_empty() {
            return Err(fail(EXIT_CONFIG, format!("{} holds no manifests", input.display())));
        }
        emit(self.cli.out.as_deref(), &out)?;
        if self.cli.out.is_some() {
            print_json(&json!({"seed": seed, "status": "signed", "count": out.iter().filter(|b| **b == b'\n').count()}));
        }
        Ok(())
    }

    fn verify_and_log(&self, input: &Path, now: u64) -> CmdResult {
        let seed = self.cli.seed;
        let ks = self.load_keystore()?;
        let text = std::fs::read_to_string(input)
            .with_context(|| format!("reading {}", input.display()))
            .code(EXIT_CONFIG)?;

        // Verify everything before touching the log.
        let mut payloads = Vec::new();
        for (item, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let reject = |reason: &str| {
                print_json(&json!({"seed": seed, "item": item, "status": "rejected", "reason": reason}));
                fail(EXIT_VERIFY, format!("item {item}: {reason}"))
            };
            let env: SignedEnvelope =
                serde_json::from_str(line).map_err(|_| reject("malformed-envelope"))?;
            let parsed = env.parse().map_err(|_| reject("malformed-encoding"))?;
            if !parsed.claimed_digest_matches {
                return Err(reject("digest-mismatch"));
            }
            match ks.verify(&parsed.digest, parsed.signature.as_bytes(), &parsed.key_id) {
                Verdict::Accept => {}
                Verdict::Reject(r) => return Err(reject(r.as_str())),
            }
            payloads.push(LogPayload {
                manifest_digest: parsed.digest,
                signature: parsed.signature.as_bytes().to_vec(),
                key_id: parsed.key_id,
                appended_at: now,
            });
        }
        if payloads.is_empty() {
            return Err(fail(EXIT_CONFIG, format!("{} holds no envelopes", input.display())));
        }

        let dir = self.log_dir()?;
        let mut log = TransparencyLog::open(dir).map_err(|e| Failure {
            code: EXIT_STORAGE,
            err: anyhow::Error::new(e).context(format!("opening log {}", dir.display())),
        })?;
        let mut receipts = Vec::new();
        for p in payloads {
            let r = log.append(p).code(EXIT_STORAGE)?;
            receipts.push(json!({
                "index": r.index,
                "tree_size": r.root.tree_size,
                "root": r.root.hash,
                "chain": r.chain,
            }));
        }
        let out = json!({"seed": seed, "status": "logged", "receipts": receipts});
        if let Some(p) = self.cli.out.as_deref() {
            emit(Some(p), format!("{out}\n").as_bytes())?;
        }
        print_json(&out);
        Ok(())
    }

    fn audit(&self, p: f64, from: u64, to: Option<u64>, config: Option<&Path>) -> CmdResult {
        let seed = self.cli.seed;
        let cfg = AuditConfig::new(p, 1.0, 1).code(EXIT_CONFIG)?;
        let backends = match config {
            Some(path) => WorkloadConfig::load(path).code(EXIT_CONFIG)?.backends,
            None => SimulatedBackend::defaults(),
        };
        let log = self.read_log()?;
        let to = to.unwrap_or(log.len());
        if from > to || to > log.len() {
            return Err(fail(
                EXIT_CONFIG,
                format!("range {from}..{to} outside log of size {}", log.len()),
            ));
        }
        let root = log.root();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mask = audit::sample_mask((to - from) as usize, cfg.detection_probability, &mut rng);
        let mut evidence = Vec::new();
        for (offset, sampled) in mask.into_iter().enumerate() {
            if !sampled {
                continue;
            }
            let index = from + offset as u64;
            let leaf = log.leaf_hash(index).expect("index within log");
            let proof = log.prove_inclusion(index, root.tree_size).code(EXIT_STORAGE)?;
            let t = Instant::now();
            if !verify_inclusion(&leaf, &proof, &root) {
                return Err(fail(EXIT_VERIFY, format!("entry {index} fails inclusion")));
            }
            log::debug!("entry {index} inclusion checked in {:?}", t.elapsed());
            let backend = &backends[rng.random_range(0..backends.len())];
            let exec_ms = backend.exec.sample(index, &mut rng);
            let verify_ms = backend.verify.sample(index, &mut rng);
            let len = backend.output.sample(root.tree_size, &mut rng);
            let entry = log.entry(index).expect("index within log");
            let block = sha256(&[entry.manifest_digest.as_bytes(), &index.to_be_bytes()[..]].concat());
            let output: Vec<u8> = block.as_bytes().iter().copied().cycle().take(len as usize).collect();
            evidence.push(build_evidence(index, root, &output, exec_ms, verify_ms).code(EXIT_CONFIG)?);
        }
        emit(self.cli.out.as_deref(), &evidence_to_ndjson(&evidence))?;
        if self.cli.out.is_some() {
            print_json(&json!({
                "seed": seed,
                "probability": p,
                "range": [from, to],
                "tree_size": root.tree_size,
                "root": root.hash,
                "sampled": evidence.len(),
            }));
        }
        Ok(())
    }

    fn bench(
        &self,
        config: Option<&Path>,
        sizes: Option<Vec<u64>>,
        invalid_fraction: Option<f64>,
        workers: Option<usize>,
    ) -> CmdResult {
        let out = self
            .cli
            .out
            .as_deref()
            .ok_or_else(|| fail(EXIT_CONFIG, "--out <dir> is required"))?;
        let mut cfg = match config {
            Some(p) => WorkloadConfig::load(p).code(EXIT_CONFIG)?,
            None => WorkloadConfig::default(),
        };
        if let Some(s) = sizes {
            cfg.sizes = s;
        }
        if let Some(f) = invalid_fraction {
            cfg.invalid_fraction = f;
        }
        if let Some(w) = workers {
            cfg.workers = w;
        }
        cfg.seed = self.cli.seed;
        cfg.log_root = Some(self.cli.log_dir.clone().unwrap_or_else(|| out.join("logs")));
        cfg.validate().code(EXIT_CONFIG)?;
        let policy = match &self.cli.policy {
            Some(_) => self.policy()?,
            None => default_policy(&cfg),
        };
        std::fs::create_dir_all(out).code(EXIT_STORAGE)?;
        log::info!("running sizes {:?} with seed {}", cfg.sizes, cfg.seed);
        let run = run_pipeline(&cfg, &policy).map_err(|e| Failure {
            code: harness_code(&e),
            err: e.into(),
        })?;
        let stats = build_report(&run.outcomes).code(EXIT_CONFIG)?;
        let files: [(&str, Vec<u8>); 5] = [
            ("outcomes.csv", outcomes_to_csv(&run.outcomes).code(EXIT_STORAGE)?),
            ("metrics.csv", metrics_to_csv(&run.metrics).code(EXIT_STORAGE)?),
            ("evidence.ndjson", evidence_to_ndjson(&run.evidence)),
            ("stats.json", serde_json::to_vec_pretty(&stats).code(EXIT_STORAGE)?),
            ("run-report.json", serde_json::to_vec_pretty(&run.report).code(EXIT_STORAGE)?),
        ];
        for (name, bytes) in &files {
            emit(Some(&out.join(name)), bytes)?;
        }
        print_json(&json!({
            "seed": cfg.seed,
            "out": out,
            "scales": run.report.scales.iter().map(|s| json!({
                "scale": s.scale,
                "successes": s.successes,
                "failures": s.failures,
                "overhead_delta": s.overhead_delta,
                "per_manifest_secure_us": s.per_manifest_secure_us,
            })).collect::<Vec<_>>(),
            "total_wall_ms": run.report.total_wall_ms,
        }));
        Ok(())
    }

    fn stats(&self, input: &Path) -> CmdResult {
        let bytes = std::fs::read(input)
            .with_context(|| format!("reading {}", input.display()))
            .code(EXIT_CONFIG)?;
        let outcomes = outcomes_from_csv(&bytes).code(EXIT_CONFIG)?;
        let report = build_report(&outcomes).code(EXIT_CONFIG)?;
        let mut body = serde_json::to_vec_pretty(&report).code(EXIT_STORAGE)?;
        body.push(b'\n');
        emit(self.cli.out.as_deref(), &body)?;
        if self.cli.out.is_some() {
            print_json(&json!({"seed": self.cli.seed, "outcomes": outcomes.len()}));
        }
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match (App { cli }).run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

