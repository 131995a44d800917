//! Statistical indicators computed from harness output.
//!
//! Entropies are in bits. Log-log fits use base-10 logarithms, so intercepts
//! read as `log10` of the power-law coefficient; slopes are base-invariant.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::harness::{ExecutionOutcome, Status};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("domain error: {0}")]
    Domain(String),
}

fn domain(msg: impl Into<String>) -> StatsError {
    StatsError::Domain(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub slope_stderr: f64,
    pub n: usize,
}

/// Ordinary least squares of `y` on `x`.
pub fn linear_fit(points: &[(f64, f64)]) -> Result<RegressionFit, StatsError> {
    let n = points.len();
    if n < 2 {
        return Err(StatsError::Degenerate(format!("{n} points, need at least 2")));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(domain("non-finite point"));
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = points.iter().map(|(_, y)| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(StatsError::Degenerate("all x values equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points
        .iter()
        .map(|(x, y)| (y - (intercept + slope * x)).powi(2))
        .sum();
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    let slope_stderr = if n > 2 {
        (ss_res / (nf - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(RegressionFit {
        slope,
        intercept,
        r_squared,
        slope_stderr,
        n,
    })
}

/// `linear_fit` over `(log10 x, log10 y)`.
pub fn loglog_fit(points: &[(f64, f64)]) -> Result<RegressionFit, StatsError> {
    if points.iter().any(|(x, y)| x.is_nan() || y.is_nan() || *x <= 0.0 || *y <= 0.0) {
        return Err(domain("log-log fit needs strictly positive values"));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.log10(), y.log10())).collect();
    linear_fit(&logs)
}

fn check_distribution(p: &[f64]) -> Result<(), StatsError> {
    if p.is_empty() {
        return Err(domain("empty distribution"));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(domain("probabilities must be finite and non-negative"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(domain(format!("probabilities sum to {sum}")));
    }
    Ok(())
}

/// `1 - 0.5 * sum |p_i - 1/k|`.
pub fn fairness_index(p: &[f64]) -> Result<f64, StatsError> {
    check_distribution(p)?;
    let u = 1.0 / p.len() as f64;
    Ok(1.0 - 0.5 * p.iter().map(|v| (v - u).abs()).sum::<f64>())
}

/// Same statistic as [`fairness_index`], applied to key usage.
pub fn key_balance_index(p: &[f64]) -> Result<f64, StatsError> {
    fairness_index(p)
}

/// `(1/k) * sum (p_i - 1/k)^2`.
pub fn selection_variance(p: &[f64]) -> Result<f64, StatsError> {
    check_distribution(p)?;
    let k = p.len() as f64;
    Ok(p.iter().map(|v| (v - 1.0 / k).powi(2)).sum::<f64>() / k)
}

pub fn shannon_entropy(p: &[f64]) -> Result<f64, StatsError> {
    check_distribution(p)?;
    Ok(-p
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| v * v.log2())
        .sum::<f64>()
        + 0.0)
}

/// Log-log slope of entropy against scale.
pub fn entropy_elasticity(series: &[(f64, f64)]) -> Result<f64, StatsError> {
    Ok(loglog_fit(series)?.slope)
}

/// Log-log slope of a variance series against scale.
pub fn variance_exponent(series: &[(f64, f64)]) -> Result<f64, StatsError> {
    Ok(loglog_fit(series)?.slope)
}

/// Rate `lambda` in `v = v0 * exp(-lambda * x)`, from a fit of `ln v` on `x`.
pub fn exponential_decay_rate(series: &[(f64, f64)]) -> Result<f64, StatsError> {
    if series.iter().any(|(_, v)| v.is_nan() || *v <= 0.0) {
        return Err(domain("decay fit needs positive values"));
    }
    let logs: Vec<(f64, f64)> = series.iter().map(|(x, v)| (*x, v.ln())).collect();
    Ok(-linear_fit(&logs)?.slope)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub cramers_v: f64,
}

/// Pearson goodness of fit. Cramér's V is capped at 1.
pub fn chi_square_gof(observed: &[f64], expected: &[f64]) -> Result<ChiSquare, StatsError> {
    if observed.len() != expected.len() || observed.len() < 2 {
        return Err(domain("need two equal-length vectors of at least 2 counts"));
    }
    if expected.iter().any(|e| e.is_nan() || *e <= 0.0) || observed.iter().any(|o| o.is_nan() || *o < 0.0) {
        return Err(domain("expected counts must be > 0 and observed >= 0"));
    }
    let statistic: f64 = observed
        .iter()
        .zip(expected)
        .map(|(o, e)| (o - e).powi(2) / e)
        .sum();
    let dof = observed.len() - 1;
    let n: f64 = observed.iter().sum();
    let cramers_v = if n > 0.0 {
        (statistic / (n * dof as f64)).sqrt().min(1.0)
    } else {
        0.0
    };
    Ok(ChiSquare {
        statistic,
        dof,
        cramers_v,
    })
}

/// `E(N) / N` per point.
pub fn error_density(series: &[(u64, u64)]) -> Result<Vec<(u64, f64)>, StatsError> {
    series
        .iter()
        .map(|&(n, e)| {
            if n == 0 {
                Err(domain("scale must be > 0"))
            } else {
                Ok((n, e as f64 / n as f64))
            }
        })
        .collect()
}

fn by_scale(outcomes: &[ExecutionOutcome]) -> BTreeMap<u64, Vec<&ExecutionOutcome>> {
    let mut groups: BTreeMap<u64, Vec<&ExecutionOutcome>> = BTreeMap::new();
    for o in outcomes {
        groups.entry(o.scale).or_default().push(o);
    }
    groups
}

/// Successes over outcomes at each scale present in the input.
pub fn success_rate_series(outcomes: &[ExecutionOutcome]) -> Vec<(u64, f64)> {
    by_scale(outcomes)
        .into_iter()
        .map(|(n, group)| {
            let ok = group.iter().filter(|o| o.status == Status::Success).count();
            (n, ok as f64 / group.len() as f64)
        })
        .collect()
}

fn frequencies<'a>(labels: impl Iterator<Item = &'a str>) -> BTreeMap<String, u64> {
    let mut m = BTreeMap::new();
    for l in labels {
        *m.entry(l.to_string()).or_insert(0) += 1;
    }
    m
}

fn shares(counts: &BTreeMap<String, u64>) -> Vec<f64> {
    let total: u64 = counts.values().sum();
    counts.values().map(|c| *c as f64 / total as f64).collect()
}

/// Population variance of what is left after removing the least-squares
/// linear trend of `y` against position.
pub fn detrended_variance(y: &[f64]) -> f64 {
    if y.len() < 3 {
        return 0.0;
    }
    // Shift to the first value so large clock offsets do not cost precision.
    let pts: Vec<(f64, f64)> = y.iter().enumerate().map(|(i, v)| (i as f64, v - y[0])).collect();
    let fit = linear_fit(&pts).expect("distinct positions");
    pts.iter()
        .map(|(x, v)| (v - fit.intercept - fit.slope * x).powi(2))
        .sum::<f64>()
        / y.len() as f64
}

/// Bytes a successful outcome occupies in the transparency log.
pub fn log_record_bytes(key_id: &str, signature_len: usize) -> u64 {
    (4 + 8 + 8 + 32 + 2 + key_id.len() + 2 + signature_len) as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSummary {
    pub scale: u64,
    pub outcomes: u64,
    pub successes: u64,
    pub errors: u64,
    pub fairness: f64,
    pub key_balance: f64,
    pub severity_entropy: f64,
    pub timestamp_variance: f64,
    pub output_bytes_variance: f64,
    pub log_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub fairness: f64,
    pub selection_variance: f64,
    pub key_balance: f64,
    pub severity_entropy: f64,
    pub entropy_elasticity: Option<f64>,
    pub error_density_series: Vec<(u64, f64)>,
    pub success_rate_series: Vec<(u64, f64)>,
    pub success_rate_slope: Option<f64>,
    pub chi_square: Option<ChiSquare>,
    pub timestamp_variance_exponent: Option<f64>,
    pub loglog_fit: Option<RegressionFit>,
    pub scalability_fit: Option<RegressionFit>,
    pub output_variance_decay: Option<f64>,
    pub backend_usage: BTreeMap<String, u64>,
    pub key_usage: BTreeMap<String, u64>,
    pub error_kinds: BTreeMap<String, u64>,
    pub per_scale: Vec<ScaleSummary>,
}

/// Builds every indicator from a set of outcomes. Global distribution
/// indicators use the largest scale; series indicators use every scale.
/// Series fits need at least two scales and are `None` otherwise.
pub fn build_report(outcomes: &[ExecutionOutcome]) -> Result<StatsReport, StatsError> {
    if outcomes.is_empty() {
        return Err(StatsError::Degenerate("no outcomes".into()));
    }
    let groups = by_scale(outcomes);
    let mut per_scale = Vec::new();
    for (&scale, group) in &groups {
        let backends = frequencies(group.iter().map(|o| o.backend_id.as_str()));
        let keys = frequencies(
            group
                .iter()
                .filter(|o| o.status == Status::Success)
                .map(|o| o.key_id.as_str()),
        );
        let sev = frequencies(group.iter().map(|o| o.severity.as_str()));
        let ts: Vec<f64> = group.iter().map(|o| o.timestamp).collect();
        let sizes: Vec<f64> = group
            .iter()
            .filter(|o| o.status == Status::Success)
            .map(|o| o.output_bytes as f64)
            .collect();
        let successes = group.iter().filter(|o| o.status == Status::Success).count() as u64;
        per_scale.push(ScaleSummary {
            scale,
            outcomes: group.len() as u64,
            successes,
            errors: group.len() as u64 - successes,
            fairness: fairness_index(&shares(&backends))?,
            key_balance: if keys.is_empty() {
                1.0
            } else {
                key_balance_index(&shares(&keys))?
            },
            severity_entropy: shannon_entropy(&shares(&sev))?,
            timestamp_variance: detrended_variance(&ts),
            output_bytes_variance: variance(&sizes),
            log_bytes: group
                .iter()
                .filter(|o| o.status == Status::Success)
                .map(|o| log_record_bytes(&o.key_id, 64))
                .sum(),
        });
    }

    let largest = groups.values().next_back().expect("nonempty");
    let backend_usage = frequencies(largest.iter().map(|o| o.backend_id.as_str()));
    let key_usage = frequencies(
        largest
            .iter()
            .filter(|o| o.status == Status::Success)
            .map(|o| o.key_id.as_str()),
    );
    let severities = frequencies(largest.iter().map(|o| o.severity.as_str()));
    let error_kinds = frequencies(
        largest
            .iter()
            .filter_map(|o| o.error_kind.map(|k| k.as_str())),
    );
    let backend_shares = shares(&backend_usage);
    let chi_square = if backend_usage.len() >= 2 {
        let n = largest.len() as f64;
        let observed: Vec<f64> = backend_usage.values().map(|c| *c as f64).collect();
        let expected = vec![n / observed.len() as f64; observed.len()];
        Some(chi_square_gof(&observed, &expected)?)
    } else {
        None
    };

    let multi = per_scale.len() >= 2;
    let success_rate_series = success_rate_series(outcomes);
    let error_density_series =
        error_density(&per_scale.iter().map(|s| (s.scale, s.errors)).collect::<Vec<_>>())?;
    let series = |f: &dyn Fn(&ScaleSummary) -> f64| -> Vec<(f64, f64)> {
        per_scale.iter().map(|s| (s.scale as f64, f(s))).collect()
    };
    let positive = |pts: &[(f64, f64)]| pts.iter().all(|p| p.1 > 0.0);

    let entropy_pts = series(&|s| s.severity_entropy);
    let ts_pts = series(&|s| s.timestamp_variance);
    let log_pts = series(&|s| s.log_bytes as f64);
    let out_pts: Vec<(f64, f64)> = per_scale
        .iter()
        .map(|s| (s.scale as f64 / 1000.0, s.output_bytes_variance))
        .collect();

    Ok(StatsReport {
        fairness: fairness_index(&backend_shares)?,
        selection_variance: selection_variance(&backend_shares)?,
        key_balance: if key_usage.is_empty() {
            1.0
        } else {
            key_balance_index(&shares(&key_usage))?
        },
        severity_entropy: shannon_entropy(&shares(&severities))?,
        entropy_elasticity: (multi && positive(&entropy_pts))
            .then(|| entropy_elasticity(&entropy_pts))
            .transpose()?,
        success_rate_slope: multi
            .then(|| {
                let pts: Vec<(f64, f64)> =
                    success_rate_series.iter().map(|(n, p)| (*n as f64, *p)).collect();
                linear_fit(&pts).map(|f| f.slope)
            })
            .transpose()?,
        error_density_series,
        success_rate_series,
        chi_square,
        timestamp_variance_exponent: (multi && positive(&ts_pts))
            .then(|| variance_exponent(&ts_pts))
            .transpose()?,
        loglog_fit: (multi && positive(&log_pts))
            .then(|| loglog_fit(&log_pts))
            .transpose()?,
        scalability_fit: multi
            .then(|| linear_fit(&series(&|s| s.outcomes as f64)))
            .transpose()?,
        output_variance_decay: (multi && positive(&out_pts))
            .then(|| exponential_decay_rate(&out_pts))
            .transpose()?,
        backend_usage,
        key_usage,
        error_kinds,
        per_scale,
    })
}

fn variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn linear_fit_cases() {
        let pts: Vec<_> = (0..10).map(|x| (x as f64, 2.0 * x as f64 + 3.0)).collect();
        let f = linear_fit(&pts).unwrap();
        assert!(close(f.slope, 2.0, 1e-12) && close(f.intercept, 3.0, 1e-12));
        assert_eq!(f.r_squared, 1.0);
        let two = linear_fit(&[(1.0, 5.0), (3.0, -1.0)]).unwrap();
        assert!(close(two.r_squared, 1.0, 1e-12));
        assert!(linear_fit(&[(1.0, 1.0), (1.0, 2.0)]).is_err());
        assert!(linear_fit(&[(1.0, 1.0)]).is_err());
    }

    #[test]
    fn loglog_cases() {
        let ident: Vec<_> = [10.0, 100.0, 1000.0].iter().map(|n| (*n, *n)).collect();
        let f = loglog_fit(&ident).unwrap();
        assert!(close(f.slope, 1.0, 1e-12) && close(f.intercept, 0.0, 1e-12));
        let pl: Vec<_> = [100.0f64, 1e3, 1e4, 5e4]
            .iter()
            .map(|n| (*n, 0.7 * n.powf(1.02)))
            .collect();
        let f = loglog_fit(&pl).unwrap();
        assert!(close(f.slope, 1.02, 1e-9));
        assert!(close(f.intercept, 0.7f64.log10(), 1e-9));
        let flat = loglog_fit(&[(1.0, 5.0), (10.0, 5.0), (100.0, 5.0)]).unwrap();
        assert!(close(flat.slope, 0.0, 1e-12));
        assert!(loglog_fit(&[(0.0, 1.0), (1.0, 1.0)]).is_err());
    }

    #[test]
    fn index_cases() {
        let third = 1.0 / 3.0;
        assert!(close(fairness_index(&[third, third, third]).unwrap(), 1.0, 1e-12));
        assert!(close(fairness_index(&[1.0, 0.0, 0.0]).unwrap(), third, 1e-12));
        assert!(close(fairness_index(&[0.321, 0.342, 0.337]).unwrap(), 0.988, 1e-3));
        assert!(close(key_balance_index(&[0.5, 0.5]).unwrap(), 1.0, 1e-12));
        assert!(close(key_balance_index(&[0.8, 0.2]).unwrap(), 0.7, 1e-12));
        assert!(close(key_balance_index(&[1.0, 0.0]).unwrap(), 0.5, 1e-12));
        assert!(fairness_index(&[0.5, 0.6]).is_err());
        assert!(fairness_index(&[1.5, -0.5]).is_err());

        assert_eq!(selection_variance(&[0.25; 4]).unwrap(), 0.0);
        let v = selection_variance(&[0.321, 0.342, 0.337]).unwrap();
        let u = 1.0 / 3.0;
        let oracle = ((0.321f64 - u).powi(2) + (0.342f64 - u).powi(2) + (0.337f64 - u).powi(2)) / 3.0;
        assert!(close(v, oracle, 1e-15));
        assert!(close(v, 8.2e-5, 0.2e-5));
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(shannon_entropy(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
        let third = 1.0 / 3.0;
        assert!(close(shannon_entropy(&[third; 3]).unwrap(), 3f64.log2(), 1e-12));
        assert!(close(shannon_entropy(&[0.5, 0.25, 0.25]).unwrap(), 1.5, 1e-12));

        let prop: Vec<_> = [10.0, 20.0, 40.0].iter().map(|n| (*n, 0.3 * n)).collect();
        assert!(close(entropy_elasticity(&prop).unwrap(), 1.0, 1e-12));
        let flat: Vec<_> = [10.0, 20.0, 40.0].iter().map(|n| (*n, 1.2)).collect();
        assert!(close(entropy_elasticity(&flat).unwrap(), 0.0, 1e-12));
    }

    #[test]
    fn chi_square_cases() {
        let same = chi_square_gof(&[10.0, 20.0, 30.0], &[10.0, 20.0, 30.0]).unwrap();
        assert_eq!((same.statistic, same.cramers_v, same.dof), (0.0, 0.0, 2));
        let c = chi_square_gof(&[60.0, 40.0], &[50.0, 50.0]).unwrap();
        assert!(close(c.statistic, 4.0, 1e-12));
        assert!(close(c.cramers_v, (4.0f64 / 100.0).sqrt(), 1e-12));
        assert!(chi_square_gof(&[1.0], &[1.0]).is_err());
        assert!(chi_square_gof(&[1.0, 2.0], &[0.0, 3.0]).is_err());
    }

    #[test]
    fn error_density_cases() {
        assert_eq!(
            error_density(&[(1000, 150), (10, 0), (200, 200)]).unwrap(),
            vec![(1000, 0.15), (10, 0.0), (200, 1.0)]
        );
        assert!(error_density(&[(0, 1)]).is_err());
    }

    #[test]
    fn decay_rate_recovery() {
        let pts: Vec<_> = (1..8).map(|x| (x as f64, 9.0 * (-0.15 * x as f64).exp())).collect();
        assert!(close(exponential_decay_rate(&pts).unwrap(), 0.15, 1e-12));
    }

    #[test]
    fn detrended_variance_removes_trend() {
        let y: Vec<f64> = (0..100).map(|i| 5.0 + 2.0 * i as f64).collect();
        assert!(detrended_variance(&y) < 1e-18);
    }
}
