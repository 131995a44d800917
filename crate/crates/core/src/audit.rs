//! Bernoulli audit sampling, evidence tuples, and overhead metrics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::hash::{sha256, sha256_parts, Hash256};
use crate::tlog::MerkleRoot;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AuditError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("malformed evidence record: {0}")]
    Malformed(String),
    #[error("csv error: {0}")]
    Csv(String),
}

fn domain(msg: impl Into<String>) -> AuditError {
    AuditError::Domain(msg.into())
}

fn check_p(p: f64) -> Result<(), AuditError> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(domain(format!("detection probability {p} not in (0, 1]")))
    }
}

/// Sampling parameters. `detection_probability` may be 0 here so that a run
/// can disable auditing; the closed-form helpers still require `p > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub detection_probability: f64,
    pub audit_frequency: f64,
    pub rounds: u32,
}

impl AuditConfig {
    pub fn new(p: f64, audit_frequency: f64, rounds: u32) -> Result<Self, AuditError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(domain(format!("detection probability {p} not in [0, 1]")));
        }
        if !(audit_frequency > 0.0 && audit_frequency.is_finite()) {
            return Err(domain(format!("audit frequency {audit_frequency} must be > 0")));
        }
        Ok(Self {
            detection_probability: p,
            audit_frequency,
            rounds,
        })
    }

    pub fn undetected_probability(&self) -> Result<f64, AuditError> {
        undetected_probability(self.detection_probability, self.rounds)
    }

    pub fn expected_detection_latency(&self) -> Result<f64, AuditError> {
        expected_detection_latency(self.detection_probability, self.audit_frequency)
    }
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            detection_probability: 0.9,
            audit_frequency: 1.0,
            rounds: 10,
        }
    }
}

/// `(1 - p)^n`.
pub fn undetected_probability(p: f64, n: u32) -> Result<f64, AuditError> {
    check_p(p)?;
    Ok((1.0 - p).powi(n as i32))
}

/// `1 / (p * f_a)` seconds.
pub fn expected_detection_latency(p: f64, f_a: f64) -> Result<f64, AuditError> {
    check_p(p)?;
    if !(f_a > 0.0 && f_a.is_finite()) {
        return Err(domain(format!("audit frequency {f_a} must be > 0")));
    }
    Ok(1.0 / (p * f_a))
}

/// Timings enter digests as fixed 3-decimal milliseconds.
pub fn format_ms(ms: f64) -> String {
    format!("{ms:.3}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceTuple {
    pub entry_index: u64,
    pub merkle_root: MerkleRoot,
    pub output_digest: Hash256,
    pub exec_time_ms: f64,
    pub verify_time_ms: f64,
    pub evidence_digest: Hash256,
}

/// `H(root || d_o || T_exec || T_verify)` with timings as fixed-point text.
pub fn evidence_digest(
    root: &Hash256,
    output_digest: &Hash256,
    exec_time_ms: f64,
    verify_time_ms: f64,
) -> Hash256 {
    sha256_parts(&[
        root.as_bytes(),
        output_digest.as_bytes(),
        format_ms(exec_time_ms).as_bytes(),
        format_ms(verify_time_ms).as_bytes(),
    ])
}

pub fn build_evidence(
    entry_index: u64,
    root: MerkleRoot,
    output: &[u8],
    exec_time_ms: f64,
    verify_time_ms: f64,
) -> Result<EvidenceTuple, AuditError> {
    for (name, t) in [("exec", exec_time_ms), ("verify", verify_time_ms)] {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(domain(format!("{name} time {t} must be finite and >= 0")));
        }
    }
    let output_digest = sha256(output);
    Ok(EvidenceTuple {
        entry_index,
        merkle_root: root,
        output_digest,
        exec_time_ms,
        verify_time_ms,
        evidence_digest: evidence_digest(&root.hash, &output_digest, exec_time_ms, verify_time_ms),
    })
}

/// One line of the evidence export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub entry_index: u64,
    pub tree_size: u64,
    pub root: Hash256,
    pub output_digest: Hash256,
    pub exec_time_ms: String,
    pub verify_time_ms: String,
    pub evidence_digest: Hash256,
}

impl EvidenceTuple {
    pub fn to_record(&self) -> EvidenceRecord {
        EvidenceRecord {
            entry_index: self.entry_index,
            tree_size: self.merkle_root.tree_size,
            root: self.merkle_root.hash,
            output_digest: self.output_digest,
            exec_time_ms: format_ms(self.exec_time_ms),
            verify_time_ms: format_ms(self.verify_time_ms),
            evidence_digest: self.evidence_digest,
        }
    }
}

impl EvidenceRecord {
    /// Recomputes the evidence digest from the exported fields.
    pub fn recompute_digest(&self) -> Result<Hash256, AuditError> {
        let parse = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| format_ms(*v) == s)
                .ok_or_else(|| AuditError::Malformed(format!("timing `{s}`")))
        };
        Ok(evidence_digest(
            &self.root,
            &self.output_digest,
            parse(&self.exec_time_ms)?,
            parse(&self.verify_time_ms)?,
        ))
    }

    pub fn verify(&self) -> bool {
        self.recompute_digest()
            .is_ok_and(|d| d == self.evidence_digest)
    }
}

pub fn evidence_to_ndjson(tuples: &[EvidenceTuple]) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tuples {
        serde_json::to_writer(&mut out, &t.to_record()).expect("evidence serializes");
        out.push(b'\n');
    }
    out
}

pub fn evidence_from_ndjson(bytes: &[u8]) -> Result<Vec<EvidenceRecord>, AuditError> {
    bytes
        .split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_slice(l).map_err(|e| AuditError::Malformed(e.to_string())))
        .collect()
}

/// One executed request, as seen by the auditor.
#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub entry_index: u64,
    pub root: MerkleRoot,
    pub output: Vec<u8>,
    pub exec_time_ms: f64,
    pub verify_time_ms: f64,
}

/// Independent Bernoulli(p) audit decision per item.
pub fn sample_mask<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<bool> {
    (0..n).map(|_| rng.random::<f64>() < p).collect()
}

/// Audits each execution with probability `p` and returns evidence for the
/// sampled ones.
pub fn audit_sample<R: Rng + ?Sized>(
    executions: &[Execution],
    cfg: &AuditConfig,
    rng: &mut R,
) -> Result<Vec<EvidenceTuple>, AuditError> {
    let mask = sample_mask(executions.len(), cfg.detection_probability, rng);
    executions
        .iter()
        .zip(mask)
        .filter(|(_, audited)| *audited)
        .map(|(e, _)| {
            build_evidence(e.entry_index, e.root, &e.output, e.exec_time_ms, e.verify_time_ms)
        })
        .collect()
}

/// Fraction of `trials` in which a violation persisting `rounds` audits is
/// never detected.
pub fn simulate_undetected<R: Rng + ?Sized>(p: f64, rounds: u32, trials: u64, rng: &mut R) -> f64 {
    let undetected = (0..trials)
        .filter(|_| (0..rounds).all(|_| rng.random::<f64>() >= p))
        .count();
    undetected as f64 / trials as f64
}

/// `(secure - baseline) / baseline`.
pub fn overhead(baseline_ms: f64, secure_ms: f64) -> Result<f64, AuditError> {
    if !(baseline_ms > 0.0 && baseline_ms.is_finite()) {
        return Err(domain(format!("baseline {baseline_ms} must be > 0")));
    }
    if !secure_ms.is_finite() {
        return Err(domain("secure time must be finite"));
    }
    Ok((secure_ms - baseline_ms) / baseline_ms)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl TradeoffWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, AuditError> {
        if !(alpha >= 0.0 && beta >= 0.0 && alpha + beta > 0.0) {
            return Err(domain(format!("invalid weights alpha={alpha} beta={beta}")));
        }
        Ok(Self { alpha, beta })
    }
}

/// `alpha * delta + beta * p_error`.
pub fn tradeoff(delta: f64, p_error: f64, w: TradeoffWeights) -> Result<f64, AuditError> {
    if !(0.0..=1.0).contains(&p_error) {
        return Err(domain(format!("error probability {p_error} not in [0, 1]")));
    }
    Ok(w.alpha * delta + w.beta * p_error)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub workload_id: String,
    pub exec_time_ms: f64,
    pub verify_time_ms: f64,
    pub baseline_time_ms: f64,
    pub secure_time_ms: f64,
    pub overhead_delta: Option<f64>,
}

impl MetricsRecord {
    pub fn new(
        workload_id: impl Into<String>,
        exec_time_ms: f64,
        verify_time_ms: f64,
        baseline_time_ms: f64,
        secure_time_ms: f64,
    ) -> Self {
        Self {
            workload_id: workload_id.into(),
            exec_time_ms,
            verify_time_ms,
            baseline_time_ms,
            secure_time_ms,
            overhead_delta: overhead(baseline_time_ms, secure_time_ms).ok(),
        }
    }
}

pub fn metrics_to_csv(records: &[MetricsRecord]) -> Result<Vec<u8>, AuditError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| AuditError::Csv(e.to_string()))?;
    }
    w.into_inner().map_err(|e| AuditError::Csv(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn root() -> MerkleRoot {
        MerkleRoot {
            hash: sha256(b"root"),
            tree_size: 4,
        }
    }

    #[test]
    fn closed_forms() {
        let v = undetected_probability(0.9, 10).unwrap();
        assert!((v - 1e-10).abs() <= 1e-10 * 1e-9);
        assert_eq!(undetected_probability(1.0, 3).unwrap(), 0.0);
        assert!((undetected_probability(0.3, 5).unwrap() - 0.16807).abs() < 1e-12);
        assert_eq!(undetected_probability(0.5, 0).unwrap(), 1.0);
        assert!(undetected_probability(0.0, 1).is_err());
        assert!(undetected_probability(1.1, 1).is_err());

        assert_eq!(expected_detection_latency(1.0, 1.0).unwrap(), 1.0);
        assert_eq!(expected_detection_latency(0.5, 2.0).unwrap(), 1.0);
        assert!((expected_detection_latency(0.9, 10.0).unwrap() - 1.0 / 9.0).abs() < 1e-15);
        assert!(expected_detection_latency(0.5, 0.0).is_err());
    }

    #[test]
    fn overhead_and_tradeoff() {
        assert_eq!(overhead(100.0, 100.0).unwrap(), 0.0);
        assert!((overhead(100.0, 105.0).unwrap() - 0.05).abs() < 1e-15);
        assert!((overhead(200.0, 190.0).unwrap() + 0.05).abs() < 1e-15);
        assert!(overhead(0.0, 1.0).is_err());

        let half = TradeoffWeights::new(0.5, 0.5).unwrap();
        assert!((tradeoff(0.04, 0.2, half).unwrap() - 0.12).abs() < 1e-15);
        assert_eq!(tradeoff(0.0, 0.0, half).unwrap(), 0.0);
        let proj = TradeoffWeights::new(1.0, 0.0).unwrap();
        assert_eq!(tradeoff(0.05, 0.7, proj).unwrap(), 0.05);
        assert!(tradeoff(0.0, 1.5, half).is_err());
        assert!(TradeoffWeights::new(0.0, 0.0).is_err());
    }

    #[test]
    fn evidence_determinism_and_sensitivity() {
        let a = build_evidence(0, root(), b"output", 12.3456, 2.0).unwrap();
        let b = build_evidence(0, root(), b"output", 12.3456, 2.0).unwrap();
        assert_eq!(a.evidence_digest, b.evidence_digest);
        let c = build_evidence(0, root(), b"outpuT", 12.3456, 2.0).unwrap();
        assert_ne!(a.output_digest, c.output_digest);
        assert_ne!(a.evidence_digest, c.evidence_digest);
        assert!(build_evidence(0, root(), b"", -1.0, 0.0).is_err());
    }

    #[test]
    fn evidence_export_round_trip() {
        let tuples: Vec<_> = (0..5)
            .map(|i| build_evidence(i, root(), &[i as u8], i as f64 * 1.23456, 0.5).unwrap())
            .collect();
        let bytes = evidence_to_ndjson(&tuples);
        let records = evidence_from_ndjson(&bytes).unwrap();
        assert_eq!(records.len(), 5);
        for (r, t) in records.iter().zip(&tuples) {
            assert!(r.verify());
            assert_eq!(r.evidence_digest, t.evidence_digest);
        }
        let mut bad = records[1].clone();
        bad.exec_time_ms = "1.236".into();
        assert!(!bad.verify());
    }

    #[test]
    fn sampling_extremes_and_reproducibility() {
        let execs: Vec<_> = (0..50)
            .map(|i| Execution {
                entry_index: i,
                root: root(),
                output: vec![i as u8],
                exec_time_ms: 1.0,
                verify_time_ms: 1.0,
            })
            .collect();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let all = AuditConfig::new(1.0, 1.0, 1).unwrap();
        assert_eq!(audit_sample(&execs, &all, &mut rng).unwrap().len(), 50);
        let none = AuditConfig::new(0.0, 1.0, 1).unwrap();
        assert!(audit_sample(&execs, &none, &mut rng).unwrap().is_empty());

        let cfg = AuditConfig::new(0.3, 1.0, 1).unwrap();
        let a = audit_sample(&execs, &cfg, &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
        let b = audit_sample(&execs, &cfg, &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampled_fraction() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let hits = sample_mask(100_000, 0.3, &mut rng).into_iter().filter(|b| *b).count();
        assert!((hits as f64 / 1e5 - 0.3).abs() < 0.01);
    }

    #[test]
    fn metrics_csv_has_header() {
        let rows = vec![MetricsRecord::new("w", 1.0, 2.0, 100.0, 105.0)];
        let text = String::from_utf8(metrics_to_csv(&rows).unwrap()).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "workload_id,exec_time_ms,verify_time_ms,baseline_time_ms,secure_time_ms,overhead_delta"
        );
        assert!(lines.next().unwrap().starts_with("w,1.0,2.0,100.0,105.0,0.05"));
    }
}
