//! Evaluation metrics and report output.
//!
//! Percentages are truncated to one decimal, so 99.97% prints as 99.9.

use crate::env::{simulate_episode, EnvError, EnvSpec, Policy};
use crate::nn::ReluNet;
use crate::optim::stream_rng;
use crate::reach::Certificate;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metric `{metric}` = {value} is outside [0, 100]")]
    Percentage { metric: String, value: f64 },
    #[error("verified max {max} exceeds the certificate horizon {k}")]
    Horizon { max: usize, k: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// `fraction` as a percentage floored to one decimal.
pub fn floor_percent(fraction: f64) -> f64 {
    let tenths = (fraction * 1000.0 + 1e-9).floor();
    let tenths = if fraction < 1.0 { tenths.min(999.0) } else { tenths };
    tenths / 10.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub seed: u64,
    pub rows: Vec<MetricRow>,
    /// Wall time of the run that produced the inputs.
    pub wall_ms: u128,
}

impl MetricsReport {
    pub fn new(seed: u64, wall_ms: u128) -> Self {
        Self { seed, rows: Vec::new(), wall_ms }
    }

    pub fn push(&mut self, metric: &str, value: f64, k: usize) {
        self.rows.push(MetricRow { metric: metric.into(), value, k });
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric).map(|r| r.value)
    }

    /// Verified-K and Verified-Max from a certificate.
    pub fn add_certificate(&mut self, cert: &Certificate) -> Result<(), MetricsError> {
        let max = cert.verified_max();
        if max > cert.k {
            return Err(MetricsError::Horizon { max, k: cert.k });
        }
        self.add_percent("verified_k", cert.verified_fraction(cert.k), cert.k)?;
        self.push("verified_max", max as f64, cert.k);
        Ok(())
    }

    /// Adds a percentage metric after the range check.
    pub fn add_percent(&mut self, metric: &str, fraction: f64, k: usize) -> Result<(), MetricsError> {
        let value = floor_percent(fraction);
        if !(0.0..=100.0).contains(&value) {
            return Err(MetricsError::Percentage { metric: metric.into(), value });
        }
        self.push(metric, value, k);
        Ok(())
    }

    /// `metric,value,k,seed,wall_ms` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value,k,seed,wall_ms\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.metric, fmt_value(r.value), r.k, self.seed, self.wall_ms).unwrap();
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.metric.len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$}  {:>12}  {:>5}\n", "metric", "value", "k");
        for r in &self.rows {
            writeln!(out, "{:<width$}  {:>12}  {:>5}", r.metric, fmt_value(r.value), r.k).unwrap();
        }
        writeln!(out, "seed {}  wall {} ms", self.seed, self.wall_ms).unwrap();
        out
    }
}

fn fmt_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        let s = format!("{v:.6}");
        let s = s.trim_end_matches('0');
        s.to_string()
    }
}

/// Mean and population standard deviation of total episode reward over
/// `episodes` initial states drawn from `S_0`. States a partial dictionary
/// does not cover are redrawn.
pub fn average_reward(
    env: &EnvSpec,
    dynamics: &ReluNet,
    policy: Policy<'_>,
    episodes: usize,
    seed: u64,
) -> Result<(f64, f64), MetricsError> {
    let mut totals = Vec::with_capacity(episodes);
    let mut stream = 0u64;
    while totals.len() < episodes && stream < 1000 * episodes as u64 + 1000 {
        let s0 = env.s0.sample(&mut stream_rng(seed, stream));
        stream += 1;
        if policy.select(&s0).is_none() {
            continue;
        }
        totals.push(simulate_episode(env, dynamics, policy, &s0)?.total_reward);
    }
    if totals.is_empty() {
        return Ok((0.0, 0.0));
    }
    let n = totals.len() as f64;
    let mean = totals.iter().sum::<f64>() / n;
    let var = totals.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}
