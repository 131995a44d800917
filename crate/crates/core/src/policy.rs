//! Deterministic compliance predicate over manifests.
//!
//! A [`PolicySet`] is an ordered list of rules, each declaring the severity it
//! raises when it fails. The set passes iff no `block` rule fails. Every rule
//! is evaluated on every call so the report lists all failures.
//!
//! Policy files are TOML:
//!
//! ```toml
//! epoch_ms = 60000
//!
//! [[rules]]
//! id = "fresh"
//! kind = "freshness-window"
//! severity = "block"
//! skew_ms = 2000
//!
//! [[rules]]
//! id = "needs-query"
//! kind = "required-field"
//! key = "query"
//! partition = "user"
//! severity = "block"
//! ```

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::manifest::Manifest;

/// Default allowance for manifests stamped slightly in the future.
pub const DEFAULT_CLOCK_SKEW_MS: u64 = 2_000;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("duplicate rule id `{0}`")]
    DuplicateRuleId(String),
    #[error("rule `{id}`: {reason}")]
    InvalidRule { id: String, reason: String },
    #[error("epoch_ms must be greater than zero")]
    InvalidEpoch,
    #[error("rate {0} is outside [0, 1]")]
    Domain(f64),
    #[error("failed to read policy file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse policy file: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Ok,
    Warn,
    Block,
}

impl Severity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Severity::Ok => "ok",
            Severity::Warn => "warn",
            Severity::Block => "block",
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    User,
    Model,
    #[default]
    Any,
}

/// What a rule checks, with its kind-specific parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RuleKind {
    RequiredField {
        key: String,
        #[serde(default)]
        partition: Partition,
    },
    /// A present field must be a string matching `pattern`. Absent fields pass.
    FieldPattern { key: String, pattern: String },
    /// A present field must be numeric and inside `[min, max]`. Absent fields pass.
    ValueRange {
        key: String,
        #[serde(default)]
        min: Option<f64>,
        #[serde(default)]
        max: Option<f64>,
    },
    MaxFieldCount { max: usize },
    MaxEncodingSize { max_bytes: usize },
    ToolAllowlist { tools: Vec<String> },
    /// Age limit comes from [`PolicySet::epoch_ms`].
    FreshnessWindow {
        #[serde(default = "default_skew")]
        skew_ms: u64,
    },
}

fn default_skew() -> u64 {
    DEFAULT_CLOCK_SKEW_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRule {
    pub id: String,
    #[serde(flatten)]
    pub kind: RuleKind,
    pub severity: Severity,
}

impl PolicyRule {
    pub fn new(id: impl Into<String>, kind: RuleKind, severity: Severity) -> Self {
        Self {
            id: id.into(),
            kind,
            severity,
        }
    }

    pub fn is_freshness(&self) -> bool {
        matches!(self.kind, RuleKind::FreshnessWindow { .. })
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct PolicyFile {
    epoch_ms: u64,
    #[serde(default)]
    rules: Vec<PolicyRule>,
}

/// Validated, immutable rule set.
#[derive(Debug, Clone)]
pub struct PolicySet {
    rules: Vec<PolicyRule>,
    patterns: Vec<Option<Regex>>,
    epoch_ms: u64,
}

impl PolicySet {
    pub fn new(rules: Vec<PolicyRule>, epoch_ms: u64) -> Result<Self, PolicyError> {
        if epoch_ms == 0 {
            return Err(PolicyError::InvalidEpoch);
        }
        let mut seen = HashSet::new();
        let mut patterns = Vec::with_capacity(rules.len());
        for rule in &rules {
            if !seen.insert(rule.id.as_str()) {
                return Err(PolicyError::DuplicateRuleId(rule.id.clone()));
            }
            let invalid = |reason: &str| PolicyError::InvalidRule {
                id: rule.id.clone(),
                reason: reason.to_string(),
            };
            if rule.severity == Severity::Ok {
                return Err(invalid("failure severity must be `warn` or `block`"));
            }
            let mut compiled = None;
            match &rule.kind {
                RuleKind::FieldPattern { pattern, .. } => {
                    compiled = Some(Regex::new(pattern).map_err(|e| invalid(&e.to_string()))?);
                }
                RuleKind::ValueRange { min, max, .. } => {
                    if min.is_none() && max.is_none() {
                        return Err(invalid("value-range needs `min` or `max`"));
                    }
                    if min.is_some_and(|v| v.is_nan()) || max.is_some_and(|v| v.is_nan()) {
                        return Err(invalid("value-range bounds must be numbers"));
                    }
                    if let (Some(lo), Some(hi)) = (min, max) {
                        if lo > hi {
                            return Err(invalid("`min` exceeds `max`"));
                        }
                    }
                }
                RuleKind::ToolAllowlist { tools } if tools.is_empty() => {
                    return Err(invalid("tool-allowlist is empty"));
                }
                _ => {}
            }
            patterns.push(compiled);
        }
        Ok(Self {
            rules,
            patterns,
            epoch_ms,
        })
    }

    pub fn empty(epoch_ms: u64) -> Result<Self, PolicyError> {
        Self::new(Vec::new(), epoch_ms)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, PolicyError> {
        let file: PolicyFile = toml::from_str(text)?;
        Self::new(file.rules, file.epoch_ms)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&PolicyFile {
            epoch_ms: self.epoch_ms,
            rules: self.rules.clone(),
        })
        .expect("policy serializes")
    }

    pub fn rules(&self) -> &[PolicyRule] {
        &self.rules
    }

    pub fn epoch_ms(&self) -> u64 {
        self.epoch_ms
    }

    /// Returns a new set with `rule` appended.
    pub fn with_rule(&self, rule: PolicyRule) -> Result<Self, PolicyError> {
        let mut rules = self.rules.clone();
        rules.push(rule);
        Self::new(rules, self.epoch_ms)
    }

    pub fn evaluate(&self, m: &Manifest, now_ms: u64) -> ComplianceReport {
        evaluate(m, self, now_ms)
    }

    fn rule_passes(&self, idx: usize, m: &Manifest, now_ms: u64, encoded_len: Option<usize>) -> bool {
        let rule = &self.rules[idx];
        match &rule.kind {
            RuleKind::RequiredField { key, partition } => match partition {
                Partition::User => m.user_fields().contains_key(key),
                Partition::Model => m.model_fields().contains_key(key),
                Partition::Any => m.field(key).is_some(),
            },
            RuleKind::FieldPattern { key, .. } => match m.field(key) {
                None => true,
                Some(v) => {
                    let re = self.patterns[idx].as_ref().expect("compiled at construction");
                    v.as_str().is_some_and(|s| re.is_match(s))
                }
            },
            RuleKind::ValueRange { key, min, max } => match m.field(key) {
                None => true,
                Some(v) => v.as_f64().is_some_and(|x| {
                    min.is_none_or(|lo| x >= lo) && max.is_none_or(|hi| x <= hi)
                }),
            },
            RuleKind::MaxFieldCount { max } => m.field_count() <= *max,
            RuleKind::MaxEncodingSize { max_bytes } => encoded_len.is_some_and(|n| n <= *max_bytes),
            RuleKind::ToolAllowlist { tools } => tools.iter().any(|t| t == m.tool_id()),
            RuleKind::FreshnessWindow { skew_ms } => {
                let ts = m.timestamp_ms();
                let too_old = now_ms.saturating_sub(ts) > self.epoch_ms;
                let too_new = ts > now_ms.saturating_add(*skew_ms);
                !too_old && !too_new
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleFailure {
    pub rule_id: String,
    pub severity: Severity,
}

/// Outcome of evaluating a [`PolicySet`]. `passed` is false iff `severity` is
/// `block`; `severity` is `ok` iff nothing failed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplianceReport {
    pub passed: bool,
    pub severity: Severity,
    pub failed_rules: Vec<RuleFailure>,
}

impl ComplianceReport {
    /// True if a failing rule was a freshness check.
    pub fn failed_freshness(&self, ps: &PolicySet) -> bool {
        self.failed_rules.iter().any(|f| {
            ps.rules()
                .iter()
                .any(|r| r.id == f.rule_id && r.is_freshness())
        })
    }

    /// Single-line machine-readable summary, e.g.
    /// `severity=block passed=false failed=fresh:block,size:warn`.
    pub fn reason_line(&self) -> String {
        let failed: Vec<String> = self
            .failed_rules
            .iter()
            .map(|f| format!("{}:{}", f.rule_id, f.severity))
            .collect();
        format!(
            "severity={} passed={} failed={}",
            self.severity,
            self.passed,
            if failed.is_empty() { "-".to_string() } else { failed.join(",") }
        )
    }
}

pub fn evaluate(m: &Manifest, ps: &PolicySet, now_ms: u64) -> ComplianceReport {
    let needs_size = ps
        .rules
        .iter()
        .any(|r| matches!(r.kind, RuleKind::MaxEncodingSize { .. }));
    let encoded_len = if needs_size {
        m.canonical_encode().ok().map(|b| b.len())
    } else {
        None
    };
    let failed_rules: Vec<RuleFailure> = (0..ps.rules.len())
        .filter(|i| !ps.rule_passes(*i, m, now_ms, encoded_len))
        .map(|i| RuleFailure {
            rule_id: ps.rules[i].id.clone(),
            severity: ps.rules[i].severity,
        })
        .collect();
    let severity = failed_rules
        .iter()
        .map(|f| f.severity)
        .max()
        .unwrap_or(Severity::Ok);
    ComplianceReport {
        passed: severity != Severity::Block,
        severity,
        failed_rules,
    }
}

/// Probability that a manifest passes `k` independent rules with the given
/// per-rule pass rates.
pub fn pass_probability(rule_pass_rates: &[f64]) -> Result<f64, PolicyError> {
    rule_pass_rates.iter().try_fold(1.0, |acc, r| {
        if (0.0..=1.0).contains(r) {
            Ok(acc * r)
        } else {
            Err(PolicyError::Domain(*r))
        }
    })
}
