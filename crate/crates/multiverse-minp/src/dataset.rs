//! Data model, CSV ingestion/validation and the synthetic data generator.
//!
//! A [`CaseTable`] is a long-format clinical-style dataset: each case carries a
//! binary outcome and one or more measurement rows with an oxygen-pressure
//! exposure (possibly missing) plus a fully observed proxy vector. Tables can
//! be loaded from CSV, written back losslessly, generated synthetically under
//! a configurable exposure-outcome effect, or outcome-scrambled to embody the
//! global null.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::{standard_normal, substream};

/// Exposure values are in mmHg; the generator centres them so the standard
/// 200/250 mmHg cutpoints split the data into non-degenerate groups.
const LOG_MEDIAN_PAO2: f64 = 5.347107530717468; // ln(210.0)
const LOG_SD_BETWEEN: f64 = 0.15;
const LOG_SD_WITHIN: f64 = 0.20;

/// Default noise scale of the first proxy in mmHg; proxy j gets j times
/// this. The between-case exposure spread is roughly 42 mmHg, so the default
/// makes proxies informative but leaves surrogate reconstruction genuinely
/// uncertain.
pub const DEFAULT_PROXY_NOISE: f64 = 40.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("empty file: {0}")]
    EmptyFile(String),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("malformed row at line {line}: {message}")]
    MalformedRow { line: usize, message: String },
    #[error("non-binary outcome '{value}' at line {line}")]
    NonBinaryOutcome { line: usize, value: String },
    #[error("duplicate case_id '{case_id}' at line {line}: rows of a case must be contiguous")]
    DuplicateCase { case_id: String, line: usize },
    #[error("outcome changes within case '{case_id}' at line {line}")]
    InconsistentOutcome { case_id: String, line: usize },
    #[error("invalid table: {0}")]
    InvalidTable(String),
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
}

/// One measurement: the exposure (None = missing) and the proxy vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRow {
    pub pao2: Option<f64>,
    pub proxies: Vec<f64>,
}

/// One case: id, binary outcome (0/1) and its measurement rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub outcome: u8,
    pub measurements: Vec<MeasurementRow>,
}

/// A validated long-format dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseTable {
    cases: Vec<CaseRecord>,
    proxy_names: Vec<String>,
}

impl CaseTable {
    /// Validates the table invariants: unique case ids, at least one
    /// measurement per case, binary outcomes, positive finite exposures and
    /// proxy vectors matching `proxy_names` in length.
    pub fn new(cases: Vec<CaseRecord>, proxy_names: Vec<String>) -> Result<Self, DataError> {
        if cases.is_empty() {
            return Err(DataError::InvalidTable("table has no cases".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for case in &cases {
            if !seen.insert(case.case_id.clone()) {
                return Err(DataError::InvalidTable(format!(
                    "duplicate case_id '{}'",
                    case.case_id
                )));
            }
            if case.measurements.is_empty() {
                return Err(DataError::InvalidTable(format!(
                    "case '{}' has no measurements",
                    case.case_id
                )));
            }
            if case.outcome > 1 {
                return Err(DataError::InvalidTable(format!(
                    "case '{}' has non-binary outcome {}",
                    case.case_id, case.outcome
                )));
            }
            for row in &case.measurements {
                if let Some(v) = row.pao2 {
                    if !v.is_finite() || v <= 0.0 {
                        return Err(DataError::InvalidTable(format!(
                            "case '{}' has non-positive exposure {v}",
                            case.case_id
                        )));
                    }
                }
                if row.proxies.len() != proxy_names.len() {
                    return Err(DataError::InvalidTable(format!(
                        "case '{}' has a proxy vector of length {}, expected {}",
                        case.case_id,
                        row.proxies.len(),
                        proxy_names.len()
                    )));
                }
                if row.proxies.iter().any(|p| !p.is_finite()) {
                    return Err(DataError::InvalidTable(format!(
                        "case '{}' has a non-finite proxy value",
                        case.case_id
                    )));
                }
            }
        }
        Ok(Self { cases, proxy_names })
    }

    pub fn cases(&self) -> &[CaseRecord] {
        &self.cases
    }

    pub fn proxy_names(&self) -> &[String] {
        &self.proxy_names
    }

    pub fn n_cases(&self) -> usize {
        self.cases.len()
    }

    /// Outcome labels in case order.
    pub fn outcomes(&self) -> Vec<u8> {
        self.cases.iter().map(|c| c.outcome).collect()
    }

    /// Number of measurement rows with a missing exposure.
    pub fn n_missing(&self) -> usize {
        self.cases
            .iter()
            .flat_map(|c| &c.measurements)
            .filter(|m| m.pao2.is_none())
            .count()
    }

    pub fn n_measurements(&self) -> usize {
        self.cases.iter().map(|c| c.measurements.len()).sum()
    }

    pub fn has_missing(&self) -> bool {
        self.n_missing() > 0
    }

    /// Copy of the table with outcomes replaced case-by-case.
    ///
    /// `outcomes` must have one entry per case, in case order, each 0 or 1.
    pub fn with_outcomes(&self, outcomes: &[u8]) -> Result<Self, DataError> {
        if outcomes.len() != self.cases.len() {
            return Err(DataError::InvalidTable(format!(
                "outcome vector length {} does not match case count {}",
                outcomes.len(),
                self.cases.len()
            )));
        }
        if outcomes.iter().any(|&o| o > 1) {
            return Err(DataError::InvalidTable("non-binary outcome".into()));
        }
        let cases = self
            .cases
            .iter()
            .zip(outcomes)
            .map(|(c, &o)| CaseRecord {
                case_id: c.case_id.clone(),
                outcome: o,
                measurements: c.measurements.clone(),
            })
            .collect();
        Ok(Self {
            cases,
            proxy_names: self.proxy_names.clone(),
        })
    }
}

/// Configuration for the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_cases: usize,
    /// Inclusive (min, max) measurement rows per case.
    pub measurements_per_case: (usize, usize),
    /// Probability that any single measurement's exposure is masked.
    pub missing_rate: f64,
    pub n_proxies: usize,
    /// Noise scale of the first proxy in mmHg (proxy j gets j times this).
    #[serde(default = "default_proxy_noise")]
    pub proxy_noise: f64,
    /// Log-odds of the outcome per 100 mmHg of mean exposure; 0 gives the
    /// exact global null (outcomes are then iid Bernoulli(0.5)).
    pub effect_size: f64,
    pub seed: u64,
}

fn default_proxy_noise() -> f64 {
    DEFAULT_PROXY_NOISE
}

impl GenConfig {
    /// Plausible defaults for everything except the seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            n_cases: 200,
            measurements_per_case: (2, 4),
            missing_rate: 0.15,
            n_proxies: 3,
            proxy_noise: DEFAULT_PROXY_NOISE,
            effect_size: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_cases < 2 {
            return Err(DataError::InvalidConfig(format!(
                "n_cases must be >= 2, got {}",
                self.n_cases
            )));
        }
        let (lo, hi) = self.measurements_per_case;
        if lo < 1 || lo > hi {
            return Err(DataError::InvalidConfig(format!(
                "measurements_per_case range ({lo}, {hi}) is invalid"
            )));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(DataError::InvalidConfig(format!(
                "missing_rate must be in [0, 1), got {}",
                self.missing_rate
            )));
        }
        if self.n_proxies == 0 {
            return Err(DataError::InvalidConfig("n_proxies must be >= 1".into()));
        }
        if !(self.proxy_noise.is_finite() && self.proxy_noise > 0.0) {
            return Err(DataError::InvalidConfig(format!(
                "proxy_noise must be positive and finite, got {}",
                self.proxy_noise
            )));
        }
        if !self.effect_size.is_finite() {
            return Err(DataError::InvalidConfig("effect_size must be finite".into()));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Generate a synthetic table.
///
/// Exposures are lognormal with median 210 mmHg (between-case log-sd 0.20,
/// within-case log-sd 0.15, marginal log-sd 0.25); proxies are the exposure
/// plus Gaussian noise with per-proxy scale; each case's outcome is
/// Bernoulli(sigmoid(effect_size * (mean exposure - 210)/100)), so
/// `effect_size = 0` yields exactly Bernoulli(0.5). The outcome vector is
/// redrawn until both levels occur. Deterministic in the config.
pub fn generate(config: &GenConfig) -> Result<CaseTable, DataError> {
    config.validate()?;
    let (lo, hi) = config.measurements_per_case;

    let mut rng = substream(config.seed, "gen-exposures", 0);
    let mut cases = Vec::with_capacity(config.n_cases);
    let mut case_means = Vec::with_capacity(config.n_cases);
    for i in 0..config.n_cases {
        let n_rows = rng.gen_range(lo..=hi);
        let case_log_mu = LOG_MEDIAN_PAO2 + LOG_SD_BETWEEN * standard_normal(&mut rng);
        let mut measurements = Vec::with_capacity(n_rows);
        let mut sum = 0.0;
        for _ in 0..n_rows {
            let pao2 = (case_log_mu + LOG_SD_WITHIN * standard_normal(&mut rng)).exp();
            sum += pao2;
            let proxies = (0..config.n_proxies)
                .map(|p| pao2 + config.proxy_noise * (p + 1) as f64 * standard_normal(&mut rng))
                .collect();
            measurements.push(MeasurementRow {
                pao2: Some(pao2),
                proxies,
            });
        }
        case_means.push(sum / n_rows as f64);
        cases.push(CaseRecord {
            case_id: format!("case_{i:06}"),
            outcome: 0,
            measurements,
        });
    }

    // Outcomes, redrawn as a whole until both levels are present.
    let mut rng = substream(config.seed, "gen-outcomes", 0);
    loop {
        for (case, &mean) in cases.iter_mut().zip(&case_means) {
            let eta = config.effect_size * (mean - 210.0) / 100.0;
            case.outcome = u8::from(rng.gen::<f64>() < sigmoid(eta));
        }
        let ones: usize = cases.iter().map(|c| usize::from(c.outcome)).sum();
        if ones > 0 && ones < cases.len() {
            break;
        }
    }

    // MCAR masking over measurement rows.
    if config.missing_rate > 0.0 {
        let mut rng = substream(config.seed, "gen-missing", 0);
        for case in &mut cases {
            for row in &mut case.measurements {
                if rng.gen::<f64>() < config.missing_rate {
                    row.pao2 = None;
                }
            }
        }
    }

    let proxy_names = (1..=config.n_proxies).map(|p| format!("proxy_{p}")).collect();
    CaseTable::new(cases, proxy_names)
}

/// Replace all outcomes by iid Bernoulli(0.5) draws, redrawn until both
/// levels occur; exposures are untouched. This embodies the global null.
pub fn null_scramble(table: &CaseTable, seed: u64) -> CaseTable {
    let mut rng = substream(seed, "null-scramble", 0);
    let n = table.n_cases();
    let mut outcomes = vec![0u8; n];
    loop {
        for o in outcomes.iter_mut() {
            *o = u8::from(rng.gen::<bool>());
        }
        let ones: usize = outcomes.iter().map(|&o| usize::from(o)).sum();
        if ones > 0 && ones < n {
            break;
        }
    }
    table
        .with_outcomes(&outcomes)
        .expect("outcome vector built to match the table")
}

/// Shuffle the per-case outcome labels in place-preserving order (a
/// permutation of the observed multiset, not a resample).
pub fn shuffle_outcomes(table: &CaseTable, seed: u64) -> Vec<u8> {
    let mut outcomes = table.outcomes();
    let mut rng = substream(seed, "outcome-shuffle", 0);
    outcomes.shuffle(&mut rng);
    outcomes
}

const FIXED_HEADER: [&str; 3] = ["case_id", "outcome", "pao2"];

/// Load a table from a long-format CSV file.
///
/// Header must be exactly `case_id,outcome,pao2,proxy_1,...,proxy_K`; one row
/// per measurement; the outcome is repeated on every row of a case and must
/// be constant within it; an empty field or `NA` in the pao2 column denotes a
/// missing exposure.
pub fn load_csv(path: impl AsRef<Path>) -> Result<CaseTable, DataError> {
    let path = path.as_ref();
    let file = File::open(path)?;
    read_csv(BufReader::new(file), &path.display().to_string())
}

/// Reader-based variant of [`load_csv`]; `source` only labels error messages.
pub fn read_csv<R: Read>(reader: R, source: &str) -> Result<CaseTable, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);

    let headers = match rdr.headers() {
        Ok(h) if !h.is_empty() => h.clone(),
        _ => return Err(DataError::EmptyFile(source.to_string())),
    };
    if headers.len() < FIXED_HEADER.len() + 1 {
        return Err(DataError::InvalidHeader(format!(
            "expected at least {} columns, got {}",
            FIXED_HEADER.len() + 1,
            headers.len()
        )));
    }
    for (i, want) in FIXED_HEADER.iter().enumerate() {
        if &headers[i] != *want {
            return Err(DataError::InvalidHeader(format!(
                "column {} must be '{}', got '{}'",
                i + 1,
                want,
                &headers[i]
            )));
        }
    }
    let mut proxy_names = Vec::new();
    for (i, name) in headers.iter().enumerate().skip(FIXED_HEADER.len()) {
        let want = format!("proxy_{}", i - FIXED_HEADER.len() + 1);
        if name != want {
            return Err(DataError::InvalidHeader(format!(
                "column {} must be '{}', got '{}'",
                i + 1,
                want,
                name
            )));
        }
        proxy_names.push(name.to_string());
    }

    let mut cases: Vec<CaseRecord> = Vec::new();
    let mut closed: std::collections::HashSet<String> = std::collections::HashSet::new();
    for (idx, record) in rdr.records().enumerate() {
        let line = idx + 2; // 1-based, after the header
        let record = record?;
        if record.len() != headers.len() {
            return Err(DataError::MalformedRow {
                line,
                message: format!("expected {} fields, got {}", headers.len(), record.len()),
            });
        }
        let case_id = record[0].trim().to_string();
        if case_id.is_empty() {
            return Err(DataError::MalformedRow {
                line,
                message: "empty case_id".into(),
            });
        }
        let outcome = match record[1].trim() {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                return Err(DataError::NonBinaryOutcome {
                    line,
                    value: other.to_string(),
                })
            }
        };
        let pao2_field = record[2].trim();
        let pao2 = if pao2_field.is_empty() || pao2_field == "NA" {
            None
        } else {
            let v: f64 = pao2_field.parse().map_err(|_| DataError::MalformedRow {
                line,
                message: format!("unparseable pao2 '{pao2_field}'"),
            })?;
            if !v.is_finite() || v <= 0.0 {
                return Err(DataError::MalformedRow {
                    line,
                    message: format!("pao2 must be positive and finite, got {v}"),
                });
            }
            Some(v)
        };
        let mut proxies = Vec::with_capacity(proxy_names.len());
        for (j, field) in record.iter().enumerate().skip(FIXED_HEADER.len()) {
            let v: f64 = field.trim().parse().map_err(|_| DataError::MalformedRow {
                line,
                message: format!("unparseable {} '{}'", proxy_names[j - FIXED_HEADER.len()], field),
            })?;
            if !v.is_finite() {
                return Err(DataError::MalformedRow {
                    line,
                    message: format!("non-finite proxy value in column {}", j + 1),
                });
            }
            proxies.push(v);
        }

        let row = MeasurementRow { pao2, proxies };
        match cases.last_mut() {
            Some(last) if last.case_id == case_id => {
                if last.outcome != outcome {
                    return Err(DataError::InconsistentOutcome { case_id, line });
                }
                last.measurements.push(row);
            }
            _ => {
                if !closed.insert(case_id.clone()) {
                    return Err(DataError::DuplicateCase { case_id, line });
                }
                cases.push(CaseRecord {
                    case_id,
                    outcome,
                    measurements: vec![row],
                });
            }
        }
    }
    if cases.is_empty() {
        return Err(DataError::EmptyFile(source.to_string()));
    }
    CaseTable::new(cases, proxy_names)
}

/// Write a table to the long-format CSV contract; missing exposures are
/// written as empty fields. `load_csv(write_csv(t)) == t` for valid tables.
pub fn write_csv<W: Write>(table: &CaseTable, writer: W) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = FIXED_HEADER.iter().map(|s| s.to_string()).collect();
    header.extend(table.proxy_names().iter().cloned());
    wtr.write_record(&header)?;
    for case in table.cases() {
        for row in &case.measurements {
            let mut fields: Vec<String> = Vec::with_capacity(header.len());
            fields.push(case.case_id.clone());
            fields.push(case.outcome.to_string());
            fields.push(row.pao2.map(|v| v.to_string()).unwrap_or_default());
            fields.extend(row.proxies.iter().map(|p| p.to_string()));
            wtr.write_record(&fields)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// [`write_csv`] to a file path.
pub fn save_csv(table: &CaseTable, path: impl AsRef<Path>) -> Result<(), DataError> {
    let file = File::create(path)?;
    write_csv(table, BufWriter::new(file))
}
