use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use manifestd_core::audit::evidence_from_ndjson;
use manifestd_core::policy::{Partition, PolicyRule, PolicySet, RuleKind, Severity};
use manifestd_core::tlog::{verify_inclusion, TransparencyLog};
use manifestd_core::Manifest;
use serde_json::Value;

const NOW: u64 = 1_700_000_000_000;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let env = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        let policy = PolicySet::new(
            vec![
                PolicyRule::new(
                    "prompt-required",
                    RuleKind::RequiredField {
                        key: "prompt".into(),
                        partition: Partition::User,
                    },
                    Severity::Block,
                ),
                PolicyRule::new("fresh", RuleKind::FreshnessWindow { skew_ms: 2000 }, Severity::Block),
            ],
            60_000,
        )
        .unwrap();
        std::fs::write(env.path("policy.toml"), policy.to_toml_string()).unwrap();
        env.ok(&["key-gen", "--key-id", "k1"]);
        env
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_manifestd"))
            .args(args)
            .arg("--keystore")
            .arg(self.path("keys.json"))
            .arg("--policy")
            .arg(self.path("policy.toml"))
            .env("MANIFESTD_LOG_DIR", self.path("log"))
            .env("MANIFESTD_KEYSTORE_PASSPHRASE", "test-pass")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Value {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        last_json(&out)
    }

    fn manifest(&self, name: &str, prompt: Option<&str>) -> PathBuf {
        let mut b = Manifest::builder()
            .model("model", "gpt-4-turbo")
            .timestamp_ms(NOW)
            .tool_id("search");
        if let Some(p) = prompt {
            b = b.user("prompt", p);
        }
        let path = self.path(name);
        std::fs::write(&path, b.build().unwrap().canonical_encode().unwrap()).unwrap();
        path
    }

    fn sign(&self, manifest: &Path, out: &str) -> Output {
        self.run(&[
            "sign",
            manifest.to_str().unwrap(),
            "--key-id",
            "k1",
            "--now-ms",
            &NOW.to_string(),
            "--out",
            self.path(out).to_str().unwrap(),
        ])
    }

    fn log_size(&self) -> u64 {
        self.ok(&["log-stats"])["tree_size"].as_u64().unwrap()
    }
}

fn last_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    text.lines()
        .last()
        .map(|l| serde_json::from_str(l).unwrap())
        .unwrap_or(Value::Null)
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn signed_and_logged(env: &Env, n: usize) {
    for i in 0..n {
        let m = env.manifest(&format!("m{i}.json"), Some(&format!("question {i}")));
        assert_eq!(code(&env.sign(&m, &format!("s{i}.ndjson"))), 0);
        let receipt = env.ok(&["verify-and-log", env.path(&format!("s{i}.ndjson")).to_str().unwrap()]);
        assert_eq!(receipt["receipts"][0]["index"], i as u64);
    }
}

#[test]
fn sign_then_log_gives_increasing_indices() {
    let env = Env::new();
    signed_and_logged(&env, 3);
    assert_eq!(env.log_size(), 3);
    let v = env.ok(&["log-verify"]);
    assert_eq!(v["report"]["status"], "ok");
    assert_eq!(v["seed"], 42);
}

#[test]
fn policy_rejection_exits_2_without_output() {
    let env = Env::new();
    let m = env.manifest("bad.json", None);
    let out = env.sign(&m, "bad.ndjson");
    assert_eq!(code(&out), 2);
    let line = last_json(&out);
    assert_eq!(line["status"], "rejected");
    assert!(line["detail"].as_str().unwrap().contains("prompt-required:block"));
    assert!(!env.path("bad.ndjson").exists());

    std::fs::write(env.path("junk.json"), b"{not json").unwrap();
    let out = env.sign(&env.path("junk.json"), "junk.ndjson");
    assert_eq!(code(&out), 2);
    assert_eq!(last_json(&out)["reason"], "malformed-encoding");
}

#[test]
fn batch_is_all_or_nothing() {
    let env = Env::new();
    let good = std::fs::read(env.manifest("a.json", Some("x"))).unwrap();
    let bad = std::fs::read(env.manifest("b.json", None)).unwrap();
    let mut batch = good.clone();
    batch.push(b'\n');
    batch.extend(&bad);
    std::fs::write(env.path("batch.ndjson"), &batch).unwrap();
    assert_eq!(code(&env.sign(&env.path("batch.ndjson"), "out.ndjson")), 2);
    assert!(!env.path("out.ndjson").exists());

    let mut batch = good.clone();
    batch.push(b'\n');
    batch.extend(&good);
    batch.push(b'\n');
    std::fs::write(env.path("batch.ndjson"), &batch).unwrap();
    assert_eq!(code(&env.sign(&env.path("batch.ndjson"), "out.ndjson")), 0);
    let text = std::fs::read_to_string(env.path("out.ndjson")).unwrap();
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn revoked_key_exits_3() {
    let env = Env::new();
    env.ok(&["key-revoke", "--key-id", "k1"]);
    let list = env.ok(&["key-list"]);
    assert_eq!(list["keys"][0]["revoked"], true);
    let m = env.manifest("m.json", Some("hi"));
    assert_eq!(code(&env.sign(&m, "s.ndjson")), 3);
    assert!(!env.path("s.ndjson").exists());
}

#[test]
fn wrong_passphrase_exits_3() {
    let env = Env::new();
    let out = Command::new(env!("CARGO_BIN_EXE_manifestd"))
        .args(["key-list", "--keystore"])
        .arg(env.path("keys.json"))
        .env("MANIFESTD_KEYSTORE_PASSPHRASE", "nope")
        .output()
        .unwrap();
    assert_eq!(code(&out), 3);
}

#[test]
fn key_list_shows_no_private_material() {
    let env = Env::new();
    let out = env.run(&["key-list"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("\"public_key\""));
    assert!(!text.contains("private"));
}

#[test]
fn tampered_signature_exits_4_and_leaves_log_alone() {
    let env = Env::new();
    signed_and_logged(&env, 1);
    let m = env.manifest("m.json", Some("again"));
    assert_eq!(code(&env.sign(&m, "s.ndjson")), 0);
    let mut env_json: Value =
        serde_json::from_str(std::fs::read_to_string(env.path("s.ndjson")).unwrap().trim()).unwrap();
    let sig = env_json["signature"].as_str().unwrap().to_string();
    let flipped = if sig.starts_with('0') { "1" } else { "0" };
    env_json["signature"] = Value::String(format!("{flipped}{}", &sig[1..]));
    std::fs::write(env.path("t.ndjson"), env_json.to_string()).unwrap();

    let out = env.run(&["verify-and-log", env.path("t.ndjson").to_str().unwrap()]);
    assert_eq!(code(&out), 4);
    assert_eq!(last_json(&out)["reason"], "signature-invalid");
    assert_eq!(env.log_size(), 1);
}

#[test]
fn unwritable_log_exits_5() {
    let env = Env::new();
    let m = env.manifest("m.json", Some("hi"));
    assert_eq!(code(&env.sign(&m, "s.ndjson")), 0);
    std::fs::write(env.path("file"), b"").unwrap();
    let bad_dir = env.path("file").join("log");
    let out = env.run(&[
        "verify-and-log",
        env.path("s.ndjson").to_str().unwrap(),
        "--log-dir",
        bad_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 5);
}

#[test]
fn audit_exports_evidence_that_matches_the_log() {
    let env = Env::new();
    signed_and_logged(&env, 10);
    let all = env.path("all.ndjson");
    let summary = env.ok(&["audit", "--probability", "1", "--out", all.to_str().unwrap()]);
    assert_eq!(summary["sampled"], 10);
    let records = evidence_from_ndjson(&std::fs::read(&all).unwrap()).unwrap();
    assert_eq!(records.len(), 10);

    let log = TransparencyLog::load_read_only(env.path("log")).unwrap();
    for r in &records {
        assert!(r.verify());
        let root = log.root_at(r.tree_size).unwrap();
        assert_eq!(root.hash, r.root);
        let proof = log.prove_inclusion(r.entry_index, r.tree_size).unwrap();
        assert!(verify_inclusion(&log.leaf_hash(r.entry_index).unwrap(), &proof, &root));
    }

    let none = env.path("none.ndjson");
    env.ok(&["audit", "--probability", "0", "--out", none.to_str().unwrap()]);
    assert!(std::fs::read(&none).unwrap().is_empty());

    let part = env.path("part.ndjson");
    env.ok(&["audit", "--probability", "1", "--from", "3", "--to", "5", "--out", part.to_str().unwrap()]);
    let idx: Vec<u64> = evidence_from_ndjson(&std::fs::read(&part).unwrap())
        .unwrap()
        .iter()
        .map(|r| r.entry_index)
        .collect();
    assert_eq!(idx, vec![3, 4]);
}

#[test]
fn log_prove_and_tamper_detection() {
    let env = Env::new();
    signed_and_logged(&env, 5);
    let p = env.ok(&["log-prove", "--index", "2", "--size", "4"]);
    assert_eq!(p["verified"], true);
    assert_eq!(p["proof"]["path"].as_array().unwrap().len(), 2);
    assert_eq!(code(&env.run(&["log-prove", "--index", "9"])), 1);

    let log_bin = env.path("log").join("log.bin");
    let mut bytes = std::fs::read(&log_bin).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&log_bin, bytes).unwrap();
    let out = env.run(&["log-verify"]);
    assert_eq!(code(&out), 4);
    assert_eq!(last_json(&out)["report"]["at"], 4);
}

fn bench(env: &Env, out: &str, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_manifestd"))
        .arg("bench")
        .arg("--out")
        .arg(env.dir.path().join(out))
        .args(extra)
        .env_remove("MANIFESTD_LOG_DIR")
        .output()
        .unwrap()
}

#[test]
fn bench_writes_reports_and_is_reproducible() {
    let env = Env::new();
    for run in ["a", "b"] {
        let out = bench(&env, run, &["--sizes", "100,300", "--seed", "7"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        for f in ["outcomes.csv", "metrics.csv", "evidence.ndjson", "stats.json", "run-report.json"] {
            assert!(env.path(run).join(f).exists(), "{f} missing");
        }
    }
    let a = std::fs::read(env.path("a").join("outcomes.csv")).unwrap();
    assert_eq!(a, std::fs::read(env.path("b").join("outcomes.csv")).unwrap());

    let report: Value =
        serde_json::from_slice(&std::fs::read(env.path("a").join("run-report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 7);
    assert_eq!(report["config"]["seed"], 7);
    assert_eq!(report["scales"].as_array().unwrap().len(), 2);
    assert!(env.path("a").join("logs").join("scale-300").join("log.bin").exists());

    // stats.json mirrors the stats subcommand on the same outcomes.
    let stats = env.path("stats.json");
    env.ok(&[
        "stats",
        "--in",
        env.path("a").join("outcomes.csv").to_str().unwrap(),
        "--out",
        stats.to_str().unwrap(),
    ]);
    assert_eq!(
        std::fs::read(&stats).unwrap().trim_ascii_end(),
        std::fs::read(env.path("a").join("stats.json")).unwrap().trim_ascii_end()
    );
}

#[test]
fn bench_single_size_gives_one_group() {
    let env = Env::new();
    let out = bench(&env, "one", &["--sizes", "100"]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(env.path("one").join("outcomes.csv")).unwrap();
    assert_eq!(csv.lines().count(), 101);
    assert!(csv.lines().skip(1).all(|l| l.starts_with("100,")));
}

#[test]
fn bench_default_ladder_has_seven_groups() {
    let env = Env::new();
    let out = bench(&env, "full", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stats: Value =
        serde_json::from_slice(&std::fs::read(env.path("full").join("stats.json")).unwrap()).unwrap();
    let scales: Vec<u64> = stats["per_scale"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["scale"].as_u64().unwrap())
        .collect();
    assert_eq!(scales, vec![100, 500, 1000, 5000, 10000, 20000, 50000]);
}

#[test]
fn bad_config_exits_1_with_line() {
    let env = Env::new();
    std::fs::write(env.path("bad.toml"), "seed = 3\ninvalid_fraction = \"lots\"\n").unwrap();
    let out = bench(&env, "x", &["--config", env.path("bad.toml").to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "{err}");
    assert!(!env.path("x").join("outcomes.csv").exists());

    let out = bench(&env, "y", &["--invalid-fraction", "1.5"]);
    assert_eq!(code(&out), 1);
}
