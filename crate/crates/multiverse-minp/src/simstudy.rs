//! Monte-Carlo studies of the adjustment procedures.
//!
//! Two experiments, both driven by one master seed and bit-reproducible
//! across thread counts:
//!
//! - **FWER study**: draw exposure data from a fixed reference table, attach
//!   iid Bernoulli(0.5) outcomes (the global null), run the whole tree, and
//!   estimate the probability that at least one of the m specifications is
//!   significant, for unadjusted, Bonferroni-adjusted and minP-adjusted
//!   p-values, with Wilson-score (Newcombe) confidence intervals.
//! - **Power-style study**: generate signal-bearing data and estimate the
//!   mean proportion of specifications significant at each alpha level under
//!   the three approaches.

use std::io::Write;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::adjust::{adjust_all, AdjustError};
use crate::dataset::{generate, null_scramble, CaseTable, DataError, GenConfig};
use crate::multiverse::SpecTree;
use crate::seeding::{derive_seed, substream};

#[derive(Debug, Error)]
pub enum SimStudyError {
    #[error("invalid study config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Adjust(#[from] AdjustError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// The three reporting approaches compared by the studies.
pub const METHOD_LABELS: [&str; 3] = ["unadjusted", "bonferroni", "minp"];

/// Configuration of the FWER-under-the-null study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FwerStudyConfig {
    pub sample_sizes: Vec<usize>,
    pub runs: usize,
    pub b: usize,
    pub alpha: f64,
    pub master_seed: u64,
    /// Generator for the reference covariate table from which each run draws
    /// its cases without replacement.
    pub reference: GenConfig,
}

impl FwerStudyConfig {
    fn reference_config(master_seed: u64) -> GenConfig {
        // Most exposure values are unobserved and the proxies are weak,
        // mirroring a setting where the exposure largely has to be
        // reconstructed from proxy measurements; this is what makes the
        // missing-handling and surrogate axes of the tree genuinely
        // consequential rather than near-duplicates.
        GenConfig {
            n_cases: 3163,
            effect_size: 0.0,
            missing_rate: 0.7,
            measurements_per_case: (1, 3),
            proxy_noise: 160.0,
            ..GenConfig::with_seed(derive_seed(master_seed, "reference-table", 0))
        }
    }

    /// Desk-scale defaults: 200 runs, B = 200, sizes {100, 300, 1000}.
    pub fn desk_scale(master_seed: u64) -> Self {
        FwerStudyConfig {
            sample_sizes: vec![100, 300, 1000],
            runs: 200,
            b: 200,
            alpha: 0.05,
            master_seed,
            reference: Self::reference_config(master_seed),
        }
    }

    /// Full-scale design: 1000 runs, B = 1000,
    /// sizes {100, 200, 300, 500, 2000, 3000}.
    pub fn paper_scale(master_seed: u64) -> Self {
        FwerStudyConfig {
            sample_sizes: vec![100, 200, 300, 500, 2000, 3000],
            runs: 1000,
            b: 1000,
            alpha: 0.05,
            master_seed,
            reference: Self::reference_config(master_seed),
        }
    }

    pub fn validate(&self) -> Result<(), SimStudyError> {
        if self.runs == 0 {
            return Err(SimStudyError::InvalidConfig("runs must be >= 1".into()));
        }
        if self.b == 0 {
            return Err(SimStudyError::InvalidConfig("B must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(SimStudyError::InvalidConfig(format!(
                "alpha must be in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.sample_sizes.is_empty() {
            return Err(SimStudyError::InvalidConfig("no sample sizes".into()));
        }
        for &n in &self.sample_sizes {
            if n < 2 || n > self.reference.n_cases {
                return Err(SimStudyError::InvalidConfig(format!(
                    "sample size {n} outside 2..={}",
                    self.reference.n_cases
                )));
            }
        }
        self.reference.validate()?;
        Ok(())
    }
}

/// Configuration of the proportion-significant study on signal-bearing data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerStudyConfig {
    pub sample_sizes: Vec<usize>,
    pub runs: usize,
    pub b: usize,
    pub alphas: Vec<f64>,
    pub master_seed: u64,
    /// Generator template; `n_cases` and `seed` are overridden per run.
    pub generator: GenConfig,
}

impl PowerStudyConfig {
    /// Desk-scale defaults: 200 runs, B = 200, sizes {50, 100, 200, 300},
    /// alphas {0.01, 0.05, 0.1}.
    pub fn desk_scale(master_seed: u64, effect_size: f64) -> Self {
        PowerStudyConfig {
            sample_sizes: vec![50, 100, 200, 300],
            runs: 200,
            b: 200,
            alphas: vec![0.01, 0.05, 0.1],
            master_seed,
            generator: GenConfig {
                effect_size,
                ..GenConfig::with_seed(0)
            },
        }
    }

    pub fn validate(&self) -> Result<(), SimStudyError> {
        if self.runs == 0 {
            return Err(SimStudyError::InvalidConfig("runs must be >= 1".into()));
        }
        if self.b == 0 {
            return Err(SimStudyError::InvalidConfig("B must be >= 1".into()));
        }
        if self.sample_sizes.is_empty() || self.alphas.is_empty() {
            return Err(SimStudyError::InvalidConfig(
                "sample sizes and alphas must be nonempty".into(),
            ));
        }
        if self.sample_sizes.iter().any(|&n| n < 2) {
            return Err(SimStudyError::InvalidConfig(
                "sample sizes must be >= 2".into(),
            ));
        }
        if self
            .alphas
            .iter()
            .any(|&a| !(a.is_finite() && 0.0 < a && a < 1.0))
        {
            return Err(SimStudyError::InvalidConfig(
                "alphas must be in (0, 1)".into(),
            ));
        }
        self.generator.validate()?;
        Ok(())
    }
}

/// One estimate with its confidence interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub study: String,
    pub method: String,
    pub n: usize,
    pub alpha: f64,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub runs: usize,
}

/// All rows of one study plus the Monte-Carlo metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub rows: Vec<StudyRow>,
    pub b: usize,
    pub master_seed: u64,
}

impl StudyResult {
    /// Find the row for `(method, n)`, and `alpha` when given.
    pub fn row(&self, method: &str, n: usize, alpha: Option<f64>) -> Option<&StudyRow> {
        self.rows.iter().find(|r| {
            r.method == method && r.n == n && alpha.map_or(true, |a| (r.alpha - a).abs() < 1e-12)
        })
    }

    /// Serialize as CSV:
    /// `study,method,n,alpha,estimate,ci_low,ci_high,runs,B,seed`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), SimStudyError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record([
            "study", "method", "n", "alpha", "estimate", "ci_low", "ci_high", "runs", "B", "seed",
        ])?;
        for row in &self.rows {
            wtr.write_record([
                row.study.clone(),
                row.method.clone(),
                row.n.to_string(),
                row.alpha.to_string(),
                row.estimate.to_string(),
                row.ci_low.to_string(),
                row.ci_high.to_string(),
                row.runs.to_string(),
                self.b.to_string(),
                self.master_seed.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn standard_normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(p)
}

/// Wilson score interval for a binomial proportion (the interval underlying
/// Newcombe's method): centre `(p + z^2/2n) / (1 + z^2/n)`, half-width
/// `z * sqrt(p(1-p)/n + z^2/4n^2) / (1 + z^2/n)`.
pub fn newcombe_ci(
    successes: usize,
    trials: usize,
    level: f64,
) -> Result<(f64, f64), SimStudyError> {
    if trials == 0 {
        return Err(SimStudyError::InvalidConfig("trials must be >= 1".into()));
    }
    if successes > trials {
        return Err(SimStudyError::InvalidConfig(format!(
            "successes {successes} exceed trials {trials}"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(SimStudyError::InvalidConfig(format!(
            "confidence level must be in (0, 1), got {level}"
        )));
    }
    let n = trials as f64;
    let p_hat = successes as f64 / n;
    let z = standard_normal_quantile((1.0 + level) / 2.0);
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p_hat + z2 / (2.0 * n)) / denom;
    let half = z * (p_hat * (1.0 - p_hat) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    // The bounds are exactly 0 and 1 at the boundary counts; keep them so
    // despite rounding.
    let low = if successes == 0 { 0.0 } else { (centre - half).max(0.0) };
    let high = if successes == trials {
        1.0
    } else {
        (centre + half).min(1.0)
    };
    Ok((low, high))
}

/// Draw `n` cases without replacement from the reference table, preserving
/// reference order.
fn draw_subset(reference: &CaseTable, n: usize, seed: u64) -> CaseTable {
    let mut rng = substream(seed, "subset", 0);
    let mut indices = sample(&mut rng, reference.n_cases(), n).into_vec();
    indices.sort_unstable();
    let cases = indices
        .into_iter()
        .map(|i| reference.cases()[i].clone())
        .collect();
    CaseTable::new(cases, reference.proxy_names().to_vec())
        .expect("subset of a valid table is valid")
}

/// Per-run rejection indicators: any of the m (adjusted) p-values below
/// alpha, for unadjusted / Bonferroni / minP.
fn any_rejection(report: &crate::adjust::AdjustmentReport, alpha: f64) -> [bool; 3] {
    let raw_any = report.raw.p_values().iter().any(|&p| p < alpha);
    let bonf_any = report.bonferroni.iter().any(|&p| p < alpha);
    let minp_any = report.minp.iter().any(|&p| p < alpha);
    [raw_any, bonf_any, minp_any]
}

/// Estimate the family-wise error rate under the global null for every
/// configured sample size.
///
/// Each run draws exposure cases from the reference table without
/// replacement, replaces the outcomes by iid Bernoulli(0.5) draws, computes
/// unadjusted, Bonferroni and minP p-values over `tree`, and checks whether
/// any of the m specifications is significant at `alpha`. The proportion of
/// runs with at least one such false positive estimates the FWER; rows carry
/// 95% Wilson intervals.
pub fn run_fwer_study(
    config: &FwerStudyConfig,
    tree: &SpecTree,
) -> Result<StudyResult, SimStudyError> {
    config.validate()?;
    let reference = generate(&config.reference)?;
    let mut rows = Vec::new();
    for (size_idx, &n) in config.sample_sizes.iter().enumerate() {
        let rejections = (0..config.runs)
            .into_par_iter()
            .map(|run| {
                let g = (size_idx * config.runs + run) as u64;
                let subset = draw_subset(
                    &reference,
                    n,
                    derive_seed(config.master_seed, "fwer-subset", g),
                );
                let scrambled =
                    null_scramble(&subset, derive_seed(config.master_seed, "fwer-null", g));
                let report = adjust_all(
                    &scrambled,
                    tree,
                    config.b,
                    config.alpha,
                    derive_seed(config.master_seed, "fwer-run", g),
                )?;
                Ok(any_rejection(&report, config.alpha))
            })
            .collect::<Result<Vec<_>, SimStudyError>>()?;

        for (method_idx, method) in METHOD_LABELS.iter().enumerate() {
            let hits = rejections.iter().filter(|r| r[method_idx]).count();
            let estimate = hits as f64 / config.runs as f64;
            let (ci_low, ci_high) = newcombe_ci(hits, config.runs, 0.95)?;
            rows.push(StudyRow {
                study: "fwer".into(),
                method: (*method).into(),
                n,
                alpha: config.alpha,
                estimate,
                ci_low,
                ci_high,
                runs: config.runs,
            });
        }
    }
    Ok(StudyResult {
        rows,
        b: config.b,
        master_seed: config.master_seed,
    })
}

/// Estimate the mean proportion of specifications significant at each alpha
/// level on signal-bearing data, for the three approaches.
///
/// Each run generates a fresh table from the configured generator (with
/// `n_cases` set to the sample size and a run-specific seed), adjusts, and
/// records the fraction of the m specifications whose (adjusted) p-value is
/// below each alpha. Estimates are means over runs with normal-approximation
/// intervals.
pub fn run_power_study(
    config: &PowerStudyConfig,
    tree: &SpecTree,
) -> Result<StudyResult, SimStudyError> {
    config.validate()?;
    let z95 = standard_normal_quantile(0.975);
    let mut rows = Vec::new();
    for (size_idx, &n) in config.sample_sizes.iter().enumerate() {
        // proportions[run][alpha_idx][method_idx]
        let proportions = (0..config.runs)
            .into_par_iter()
            .map(|run| {
                let g = (size_idx * config.runs + run) as u64;
                let gen_config = GenConfig {
                    n_cases: n,
                    seed: derive_seed(config.master_seed, "power-gen", g),
                    ..config.generator.clone()
                };
                let table = generate(&gen_config)?;
                let report = adjust_all(
                    &table,
                    tree,
                    config.b,
                    0.05,
                    derive_seed(config.master_seed, "power-run", g),
                )?;
                let m = report.m() as f64;
                let per_alpha: Vec<[f64; 3]> = config
                    .alphas
                    .iter()
                    .map(|&alpha| {
                        let raw = report
                            .raw
                            .p_values()
                            .iter()
                            .filter(|&&p| p < alpha)
                            .count();
                        let bonf = report.bonferroni.iter().filter(|&&p| p < alpha).count();
                        let minp = report.minp.iter().filter(|&&p| p < alpha).count();
                        [raw as f64 / m, bonf as f64 / m, minp as f64 / m]
                    })
                    .collect();
                Ok(per_alpha)
            })
            .collect::<Result<Vec<_>, SimStudyError>>()?;

        for (alpha_idx, &alpha) in config.alphas.iter().enumerate() {
            for (method_idx, method) in METHOD_LABELS.iter().enumerate() {
                let values: Vec<f64> = proportions
                    .iter()
                    .map(|run| run[alpha_idx][method_idx])
                    .collect();
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                let var =
                    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                        / values.len() as f64;
                let half = z95 * (var / values.len() as f64).sqrt();
                rows.push(StudyRow {
                    study: "power".into(),
                    method: (*method).into(),
                    n,
                    alpha,
                    estimate: mean,
                    ci_low: (mean - half).max(0.0),
                    ci_high: (mean + half).min(1.0),
                    runs: config.runs,
                });
            }
        }
    }
    Ok(StudyResult {
        rows,
        b: config.b,
        master_seed: config.master_seed,
    })
}
