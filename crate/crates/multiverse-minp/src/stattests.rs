//! Exposure coding and hypothesis tests: logistic-regression Wald test on the
//! continuous exposure, and Fisher's exact test on its dichotomized
//! (200 mmHg) or trichotomized (200/250 mmHg) form.
//!
//! Everything here is a pure function, safe to call concurrently from the
//! permutation engine. Degenerate inputs never panic inside [`run_test`];
//! they yield a conservative p-value of 1.0 with an explanatory note, which
//! keeps the minimum over specifications well-defined on permuted data.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::factorial::ln_factorial;
use thiserror::Error;

use crate::preprocess::AnalysisFrame;

/// Cutpoint values land in the upper category.
pub const BINARY_CUT: f64 = 200.0;
pub const TERNARY_CUTS: (f64, f64) = (200.0, 250.0);

/// Relative tolerance (in log space) for counting tied point probabilities
/// into the two-sided Fisher sum.
pub const FISHER_TIE_TOLERANCE: f64 = 1e-12;

const IRLS_TOLERANCE: f64 = 1e-10;
const IRLS_MAX_ITERATIONS: usize = 50;
const SEPARATION_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum TestError {
    #[error("degenerate regression input: {0}")]
    DegenerateInput(String),
    #[error("invalid contingency table: {0}")]
    InvalidTable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExposureCoding {
    #[serde(rename = "CONTINUOUS")]
    Continuous,
    #[serde(rename = "BINARY_200")]
    Binary200,
    #[serde(rename = "TERNARY_200_250")]
    Ternary200250,
}

impl ExposureCoding {
    pub fn as_str(self) -> &'static str {
        match self {
            ExposureCoding::Continuous => "CONTINUOUS",
            ExposureCoding::Binary200 => "BINARY_200",
            ExposureCoding::Ternary200250 => "TERNARY_200_250",
        }
    }
    pub fn parse_option(s: &str) -> Option<Self> {
        match s {
            "CONTINUOUS" => Some(ExposureCoding::Continuous),
            "BINARY_200" => Some(ExposureCoding::Binary200),
            "TERNARY_200_250" => Some(ExposureCoding::Ternary200250),
            _ => None,
        }
    }
}

/// Outcome of one hypothesis test.
#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    pub p_value: f64,
    /// Wald z for the logistic test; observed-table point probability for
    /// the exact tests.
    pub statistic: f64,
    pub method_tag: &'static str,
    pub converged: bool,
    pub notes: Option<String>,
}

impl TestResult {
    fn degenerate(method_tag: &'static str, note: impl Into<String>) -> Self {
        TestResult {
            p_value: 1.0,
            statistic: 0.0,
            method_tag,
            converged: true,
            notes: Some(note.into()),
        }
    }
}

/// A 2 x K contingency table, outcome levels as rows (0 then 1), exposure
/// categories as columns, K in {2, 3}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    counts: [[u64; 3]; 2],
    ncols: usize,
}

impl ContingencyTable {
    pub fn new(row0: &[u64], row1: &[u64]) -> Result<Self, TestError> {
        if row0.len() != row1.len() || !(2..=3).contains(&row0.len()) {
            return Err(TestError::InvalidTable(format!(
                "rows must both have 2 or 3 columns, got {} and {}",
                row0.len(),
                row1.len()
            )));
        }
        let mut counts = [[0u64; 3]; 2];
        counts[0][..row0.len()].copy_from_slice(row0);
        counts[1][..row1.len()].copy_from_slice(row1);
        let total: u64 = row0.iter().chain(row1).sum();
        if total == 0 {
            return Err(TestError::InvalidTable("table total is zero".into()));
        }
        Ok(Self {
            counts,
            ncols: row0.len(),
        })
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn count(&self, row: usize, col: usize) -> u64 {
        self.counts[row][col]
    }

    pub fn row_margins(&self) -> [u64; 2] {
        [
            self.counts[0][..self.ncols].iter().sum(),
            self.counts[1][..self.ncols].iter().sum(),
        ]
    }

    pub fn col_margins(&self) -> Vec<u64> {
        (0..self.ncols)
            .map(|j| self.counts[0][j] + self.counts[1][j])
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.row_margins().iter().sum()
    }
}

fn category2(exposure: f64, cut: f64) -> usize {
    usize::from(exposure >= cut)
}

fn category3(exposure: f64, cuts: (f64, f64)) -> usize {
    if exposure < cuts.0 {
        0
    } else if exposure < cuts.1 {
        1
    } else {
        2
    }
}

/// Cross-tabulate outcome against `exposure < cut` / `exposure >= cut`.
pub fn dichotomize(frame: &AnalysisFrame, cut: f64) -> ContingencyTable {
    let mut counts = [[0u64; 3]; 2];
    for row in &frame.rows {
        counts[row.outcome as usize][category2(row.exposure, cut)] += 1;
    }
    ContingencyTable {
        counts,
        ncols: 2,
    }
}

/// Cross-tabulate outcome against the three right-closed-at-boundary bins
/// `[< cuts.0, cuts.0..cuts.1, >= cuts.1]`.
pub fn trichotomize(frame: &AnalysisFrame, cuts: (f64, f64)) -> ContingencyTable {
    let mut counts = [[0u64; 3]; 2];
    for row in &frame.rows {
        counts[row.outcome as usize][category3(row.exposure, cuts)] += 1;
    }
    ContingencyTable {
        counts,
        ncols: 3,
    }
}

/// Two-sided Fisher's exact test by point-probability enumeration.
///
/// The p-value is the sum of the probabilities of all tables with the
/// observed margins whose point probability does not exceed the observed
/// table's (ties within a relative [`FISHER_TIE_TOLERANCE`]). All-zero
/// columns drop out of the enumeration; margins that force a single table
/// (a zero row, or fewer than two occupied columns) give p = 1.
pub fn fisher_exact(table: &ContingencyTable) -> TestResult {
    let tag = if table.ncols == 3 { "fisher_2x3" } else { "fisher_2x2" };

    let cols: Vec<usize> = (0..table.ncols)
        .filter(|&j| table.counts[0][j] + table.counts[1][j] > 0)
        .collect();
    let [r0, r1] = table.row_margins();
    if r0 == 0 || r1 == 0 || cols.len() < 2 {
        return TestResult::degenerate(tag, "degenerate margins");
    }

    let col_margins: Vec<u64> = cols
        .iter()
        .map(|&j| table.counts[0][j] + table.counts[1][j])
        .collect();
    let observed: Vec<u64> = cols.iter().map(|&j| table.counts[0][j]).collect();

    let (ln_p_obs, p_value) = match col_margins.len() {
        2 => fisher_2xk::<2>(r0, r1, &col_margins, &observed),
        3 => fisher_2xk::<3>(r0, r1, &col_margins, &observed),
        _ => unreachable!("column count is 2 or 3"),
    };

    TestResult {
        p_value: p_value.min(1.0),
        statistic: ln_p_obs.exp(),
        method_tag: tag,
        converged: true,
        notes: None,
    }
}

/// Shared enumeration core: iterate every first-row split consistent with
/// the margins, summing probabilities no larger than the observed one.
fn fisher_2xk<const K: usize>(r0: u64, r1: u64, col_margins: &[u64], observed: &[u64]) -> (f64, f64) {
    let n = r0 + r1;
    // ln P(table) = ln r0! + ln r1! + sum ln c_j! - ln n! - sum ln t_ij!
    let ln_const = ln_factorial(r0) + ln_factorial(r1)
        + col_margins.iter().map(|&c| ln_factorial(c)).sum::<f64>()
        - ln_factorial(n);
    let ln_prob = |top: &[u64]| -> f64 {
        let mut ln = ln_const;
        for (j, &t0) in top.iter().enumerate() {
            ln -= ln_factorial(t0) + ln_factorial(col_margins[j] - t0);
        }
        ln
    };

    let ln_p_obs = ln_prob(observed);
    let threshold = ln_p_obs + FISHER_TIE_TOLERANCE;

    let mut p_sum = 0.0;
    if K == 2 {
        let lo = r0.saturating_sub(col_margins[1]);
        let hi = r0.min(col_margins[0]);
        for a in lo..=hi {
            let ln = ln_prob(&[a, r0 - a]);
            if ln <= threshold {
                p_sum += ln.exp();
            }
        }
    } else {
        let a_hi = r0.min(col_margins[0]);
        for a in 0..=a_hi {
            let rem = r0 - a;
            let b_lo = rem.saturating_sub(col_margins[2]);
            let b_hi = rem.min(col_margins[1]);
            if b_lo > b_hi {
                continue;
            }
            for b in b_lo..=b_hi {
                let ln = ln_prob(&[a, b, rem - b]);
                if ln <= threshold {
                    p_sum += ln.exp();
                }
            }
        }
    }
    (ln_p_obs, p_sum)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct LogisticFit {
    slope: f64,
    se: f64,
}

enum IrlsOutcome {
    Converged(LogisticFit),
    Failed(&'static str),
}

fn irls(xs: &[f64], ys: &[f64]) -> IrlsOutcome {
    // Start from the intercept-only fit.
    let n = xs.len() as f64;
    let y_mean = ys.iter().sum::<f64>() / n;
    let mut beta = [(y_mean / (1.0 - y_mean)).ln(), 0.0];

    let mut info = [[0.0_f64; 2]; 2];
    let mut converged = false;
    for _ in 0..IRLS_MAX_ITERATIONS {
        let mut score = [0.0_f64; 2];
        info = [[0.0; 2]; 2];
        let mut separated = true;
        for (&x, &y) in xs.iter().zip(ys) {
            let mu = sigmoid(beta[0] + beta[1] * x);
            if mu > SEPARATION_TOLERANCE && mu < 1.0 - SEPARATION_TOLERANCE {
                separated = false;
            }
            let w = mu * (1.0 - mu);
            let r = y - mu;
            score[0] += r;
            score[1] += r * x;
            info[0][0] += w;
            info[0][1] += w * x;
            info[1][1] += w * x * x;
        }
        info[1][0] = info[0][1];
        if separated {
            return IrlsOutcome::Failed("separation detected");
        }

        let det = info[0][0] * info[1][1] - info[0][1] * info[1][0];
        if !det.is_finite() || det.abs() < 1e-300 {
            return IrlsOutcome::Failed("singular information matrix");
        }
        let delta = [
            (info[1][1] * score[0] - info[0][1] * score[1]) / det,
            (info[0][0] * score[1] - info[1][0] * score[0]) / det,
        ];
        beta[0] += delta[0];
        beta[1] += delta[1];
        if !beta[0].is_finite() || !beta[1].is_finite() {
            return IrlsOutcome::Failed("diverging coefficients");
        }
        if delta[0].abs().max(delta[1].abs()) < IRLS_TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        return IrlsOutcome::Failed("no convergence in 50 iterations");
    }

    // Slope variance from the inverse information matrix.
    let det = info[0][0] * info[1][1] - info[0][1] * info[1][0];
    let var_slope = info[0][0] / det;
    if !(var_slope.is_finite() && var_slope > 0.0) {
        return IrlsOutcome::Failed("non-positive slope variance");
    }
    IrlsOutcome::Converged(LogisticFit {
        slope: beta[1],
        se: var_slope.sqrt(),
    })
}

fn check_regression_arrays(xs: &[f64], outcomes: &[u8]) -> Result<(), TestError> {
    if xs.len() < 2 {
        return Err(TestError::DegenerateInput("fewer than 2 cases".into()));
    }
    let ones = outcomes.iter().filter(|&&y| y == 1).count();
    if ones == 0 || ones == outcomes.len() {
        return Err(TestError::DegenerateInput("single outcome level".into()));
    }
    if xs.iter().all(|&x| x == xs[0]) {
        return Err(TestError::DegenerateInput("constant exposure".into()));
    }
    Ok(())
}

fn frame_arrays(frame: &AnalysisFrame) -> (Vec<f64>, Vec<u8>) {
    (
        frame.rows.iter().map(|r| r.exposure).collect(),
        frame.rows.iter().map(|r| r.outcome).collect(),
    )
}

fn wald_from_irls(xs: &[f64], outcomes: &[u8]) -> TestResult {
    let ys: Vec<f64> = outcomes.iter().map(|&y| f64::from(y)).collect();
    match irls(xs, &ys) {
        IrlsOutcome::Converged(fit) => {
            let z = fit.slope / fit.se;
            let normal = Normal::new(0.0, 1.0).expect("standard normal");
            let p = 2.0 * (1.0 - normal.cdf(z.abs()));
            TestResult {
                p_value: p.clamp(0.0, 1.0),
                statistic: z,
                method_tag: "logistic_wald",
                converged: true,
                notes: None,
            }
        }
        IrlsOutcome::Failed(note) => TestResult {
            p_value: 1.0,
            statistic: 0.0,
            method_tag: "logistic_wald",
            converged: false,
            notes: Some(note.to_string()),
        },
    }
}

/// Wald test of the exposure coefficient in a logistic regression
/// `outcome ~ intercept + exposure`, fitted by iteratively reweighted least
/// squares.
///
/// Convergence is declared when the largest absolute coefficient change
/// drops below 1e-10 within 50 iterations. Non-convergence or separation
/// (all fitted probabilities within 1e-10 of 0/1) yields `converged = false`
/// and p = 1.0. Degenerate input (single outcome level or constant exposure)
/// is an error; [`run_test`] maps it to p = 1.0 with a note.
pub fn logistic_wald(frame: &AnalysisFrame) -> Result<TestResult, TestError> {
    let (xs, ys) = frame_arrays(frame);
    check_regression_arrays(&xs, &ys)?;
    Ok(wald_from_irls(&xs, &ys))
}

/// Slope and standard error of the fitted logistic regression, exposed for
/// verification against the closed-form 2x2 solution.
pub fn logistic_fit(frame: &AnalysisFrame) -> Result<(f64, f64), TestError> {
    let (xs, outcomes) = frame_arrays(frame);
    check_regression_arrays(&xs, &outcomes)?;
    let ys: Vec<f64> = outcomes.iter().map(|&y| f64::from(y)).collect();
    match irls(&xs, &ys) {
        IrlsOutcome::Converged(fit) => Ok((fit.slope, fit.se)),
        IrlsOutcome::Failed(note) => Err(TestError::DegenerateInput(note.into())),
    }
}

/// Array-based entry point used by the multiverse engine; identical to the
/// `run_test` continuous branch.
pub(crate) fn logistic_test_from_arrays(xs: &[f64], outcomes: &[u8]) -> TestResult {
    match check_regression_arrays(xs, outcomes) {
        Ok(()) => wald_from_irls(xs, outcomes),
        Err(TestError::DegenerateInput(msg)) => TestResult::degenerate(
            "logistic_wald",
            format!("degenerate regression input: {msg}"),
        ),
        Err(TestError::InvalidTable(msg)) => TestResult::degenerate("logistic_wald", msg),
    }
}

/// Fisher's exact test on raw counts, used by the multiverse engine; the tag
/// reflects the coding (a reduced ternary table keeps its 2x3 tag).
pub(crate) fn fisher_from_counts(counts: [[u64; 3]; 2], ncols: usize, tag: &'static str) -> TestResult {
    let table = ContingencyTable { counts, ncols };
    let mut result = fisher_exact(&table);
    result.method_tag = tag;
    result
}

/// Dispatch to the test implied by the exposure coding. Degenerate data
/// never raises: it yields p = 1.0 with a note.
pub fn run_test(frame: &AnalysisFrame, coding: ExposureCoding) -> TestResult {
    match coding {
        ExposureCoding::Continuous => {
            let (xs, ys) = frame_arrays(frame);
            logistic_test_from_arrays(&xs, &ys)
        }
        ExposureCoding::Binary200 => fisher_exact(&dichotomize(frame, BINARY_CUT)),
        ExposureCoding::Ternary200250 => fisher_exact(&trichotomize(frame, TERNARY_CUTS)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::FrameRow;
    use proptest::prelude::*;

    fn frame_of(rows: &[(u8, f64)]) -> AnalysisFrame {
        AnalysisFrame {
            rows: rows
                .iter()
                .enumerate()
                .map(|(i, &(outcome, exposure))| FrameRow {
                    case_id: format!("c{i}"),
                    outcome,
                    exposure,
                })
                .collect(),
        }
    }

    #[test]
    fn dichotomize_boundary_goes_high() {
        let frame = frame_of(&[(0, 199.9), (1, 200.0)]);
        let t = dichotomize(&frame, 200.0);
        assert_eq!(t.count(0, 0), 1);
        assert_eq!(t.count(0, 1), 0);
        assert_eq!(t.count(1, 0), 0);
        assert_eq!(t.count(1, 1), 1);
    }

    #[test]
    fn dichotomize_degenerate_columns_and_rows_are_legal() {
        let frame = frame_of(&[(0, 150.0), (1, 160.0)]);
        let t = dichotomize(&frame, 200.0);
        assert_eq!(t.col_margins(), vec![2, 0]);
        assert_eq!(fisher_exact(&t).p_value, 1.0);

        let frame = frame_of(&[(0, 150.0), (0, 250.0)]);
        let t = dichotomize(&frame, 200.0);
        assert_eq!(t.row_margins(), [2, 0]);
        let result = fisher_exact(&t);
        assert_eq!(result.p_value, 1.0);
        assert_eq!(result.notes.as_deref(), Some("degenerate margins"));
    }

    #[test]
    fn trichotomize_bins() {
        let frame = frame_of(&[(0, 150.0), (1, 225.0), (0, 300.0)]);
        let t = trichotomize(&frame, TERNARY_CUTS);
        assert_eq!(t.col_margins(), vec![1, 1, 1]);

        let frame = frame_of(&[(0, 200.0), (1, 249.999)]);
        let t = trichotomize(&frame, TERNARY_CUTS);
        assert_eq!(t.col_margins(), vec![0, 2, 0]);
    }

    #[test]
    fn fisher_2x2_matches_hand_enumeration() {
        // Hypergeometric with margins (4,4)/(4,4): point probabilities
        // 1/70, 16/70, 36/70, 16/70, 1/70; observed [[3,1],[1,3]] has 16/70,
        // so the two-sided sum is (1+16+16+1)/70.
        let t = ContingencyTable::new(&[3, 1], &[1, 3]).unwrap();
        let result = fisher_exact(&t);
        assert!((result.p_value - 34.0 / 70.0).abs() < 1e-12, "{}", result.p_value);
        assert!((result.statistic - 16.0 / 70.0).abs() < 1e-12);
        assert_eq!(result.method_tag, "fisher_2x2");
    }

    #[test]
    fn fisher_balanced_table_gives_one() {
        let t = ContingencyTable::new(&[5, 5], &[5, 5]).unwrap();
        assert!((fisher_exact(&t).p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fisher_2x3_with_zero_column_reduces_to_2x2() {
        let with_zero = ContingencyTable::new(&[3, 0, 1], &[1, 0, 3]).unwrap();
        let reduced = ContingencyTable::new(&[3, 1], &[1, 3]).unwrap();
        let a = fisher_exact(&with_zero);
        let b = fisher_exact(&reduced);
        assert!((a.p_value - b.p_value).abs() < 1e-12);
        assert_eq!(a.method_tag, "fisher_2x3");
    }

    #[test]
    fn fisher_2x3_known_value() {
        // Freeman-Halton on [[1,2,3],[4,5,6]]; reference value computed by
        // exact rational enumeration of all 2x3 tables with these margins.
        let t = ContingencyTable::new(&[1, 2, 3], &[4, 5, 6]).unwrap();
        let result = fisher_exact(&t);
        assert!((result.p_value - 1.0).abs() < 1e-9, "{}", result.p_value);

        let t = ContingencyTable::new(&[10, 2, 0], &[0, 2, 10]).unwrap();
        let result = fisher_exact(&t);
        assert!(result.p_value < 1e-3, "{}", result.p_value);
    }

    #[test]
    fn logistic_wald_matches_2x2_closed_form() {
        // Cells: a = (y=1, x=1), b = (y=1, x=0), c = (y=0, x=1), d = (y=0, x=0).
        let (a, b, c, d) = (12_usize, 5, 7, 16);
        let mut rows = Vec::new();
        rows.extend(std::iter::repeat((1u8, 1.0)).take(a));
        rows.extend(std::iter::repeat((1u8, 0.0)).take(b));
        rows.extend(std::iter::repeat((0u8, 1.0)).take(c));
        rows.extend(std::iter::repeat((0u8, 0.0)).take(d));
        let frame = frame_of(&rows);
        let (slope, se) = logistic_fit(&frame).unwrap();
        let (af, bf, cf, df) = (a as f64, b as f64, c as f64, d as f64);
        let expected_slope = (af * df / (bf * cf)).ln();
        let expected_se = (1.0 / af + 1.0 / bf + 1.0 / cf + 1.0 / df).sqrt();
        assert!((slope - expected_slope).abs() < 1e-6, "{slope} vs {expected_slope}");
        assert!((se - expected_se).abs() < 1e-6, "{se} vs {expected_se}");
    }

    #[test]
    fn logistic_wald_is_calibrated_under_the_null() {
        // Independent exposure and outcome: rejection rate at 5% over 1000
        // replicates should sit near 0.05.
        use crate::seeding::substream;
        use rand::Rng;
        let mut rejections = 0;
        let mut rng = substream(123, "wald-calibration", 0);
        for _ in 0..1000 {
            let rows: Vec<(u8, f64)> = (0..200)
                .map(|_| {
                    let y = u8::from(rng.gen::<bool>());
                    let x = 200.0 + 30.0 * crate::seeding::standard_normal(&mut rng);
                    (y, x)
                })
                .collect();
            let frame = frame_of(&rows);
            let result = logistic_wald(&frame).unwrap();
            if result.converged && result.p_value < 0.05 {
                rejections += 1;
            }
        }
        let rate = rejections as f64 / 1000.0;
        assert!((rate - 0.05).abs() < 0.02, "null rejection rate {rate}");
    }

    #[test]
    fn perfectly_separated_data_fall_back_conservatively() {
        let frame = frame_of(&[
            (0, 150.0),
            (0, 160.0),
            (0, 170.0),
            (1, 250.0),
            (1, 260.0),
            (1, 270.0),
        ]);
        let result = logistic_wald(&frame).unwrap();
        assert!(!result.converged);
        assert_eq!(result.p_value, 1.0);
    }

    #[test]
    fn run_test_never_errors_on_degenerate_data() {
        let constant = frame_of(&[(0, 200.0), (1, 200.0)]);
        let result = run_test(&constant, ExposureCoding::Continuous);
        assert_eq!(result.p_value, 1.0);
        assert!(result.notes.as_deref().unwrap().contains("degenerate regression input"));

        let single_level = frame_of(&[(1, 150.0), (1, 250.0)]);
        for coding in [
            ExposureCoding::Continuous,
            ExposureCoding::Binary200,
            ExposureCoding::Ternary200250,
        ] {
            let result = run_test(&single_level, coding);
            assert_eq!(result.p_value, 1.0, "{coding:?}");
            assert!(result.notes.is_some(), "{coding:?}");
        }
    }

    #[test]
    fn ternary_with_empty_middle_bin_equals_binary_on_merged_structure() {
        // All exposures either < 200 or >= 250: the ternary table has an
        // empty middle column and must reduce to the 2x2 answer.
        let rows = [
            (0u8, 150.0),
            (0, 160.0),
            (1, 170.0),
            (1, 260.0),
            (1, 270.0),
            (0, 280.0),
        ];
        let frame = frame_of(&rows);
        let ternary = run_test(&frame, ExposureCoding::Ternary200250);
        let binary = run_test(&frame, ExposureCoding::Binary200);
        assert!((ternary.p_value - binary.p_value).abs() < 1e-12);
    }

    #[test]
    fn wald_p_is_scale_invariant() {
        let rows: Vec<(u8, f64)> = (0..40)
            .map(|i| (u8::from(i % 3 == 0), 150.0 + 5.0 * i as f64))
            .collect();
        let frame = frame_of(&rows);
        let p1 = logistic_wald(&frame).unwrap().p_value;
        let scaled = AnalysisFrame {
            rows: frame
                .rows
                .iter()
                .map(|r| FrameRow {
                    case_id: r.case_id.clone(),
                    outcome: r.outcome,
                    exposure: r.exposure * 7.5,
                })
                .collect(),
        };
        let p2 = logistic_wald(&scaled).unwrap().p_value;
        assert!((p1 - p2).abs() < 1e-9, "{p1} vs {p2}");
    }

    proptest! {
        #[test]
        fn fisher_p_is_in_unit_interval(cells in proptest::collection::vec(0u64..30, 6)) {
            prop_assume!(cells.iter().sum::<u64>() > 0);
            let t = ContingencyTable::new(&cells[0..3], &cells[3..6]).unwrap();
            let result = fisher_exact(&t);
            prop_assert!((0.0..=1.0).contains(&result.p_value));
        }

        #[test]
        fn fisher_is_invariant_under_row_swap_and_column_permutation(
            a in 0u64..15, b in 0u64..15, c in 0u64..15, d in 0u64..15
        ) {
            prop_assume!(a + b + c + d > 0);
            let base = fisher_exact(&ContingencyTable::new(&[a, b], &[c, d]).unwrap());
            let swapped = fisher_exact(&ContingencyTable::new(&[c, d], &[a, b]).unwrap());
            let permuted = fisher_exact(&ContingencyTable::new(&[b, a], &[d, c]).unwrap());
            prop_assert!((base.p_value - swapped.p_value).abs() < 1e-12);
            prop_assert!((base.p_value - permuted.p_value).abs() < 1e-12);
        }

        #[test]
        fn run_test_p_is_in_unit_interval(
            rows in proptest::collection::vec((0u8..2, 120.0f64..320.0), 2..40)
        ) {
            let frame = frame_of(&rows);
            for coding in [ExposureCoding::Continuous, ExposureCoding::Binary200, ExposureCoding::Ternary200250] {
                let result = run_test(&frame, coding);
                prop_assert!((0.0..=1.0).contains(&result.p_value), "{coding:?} {}", result.p_value);
                prop_assert!(result.converged || result.p_value == 1.0);
            }
        }
    }
}
