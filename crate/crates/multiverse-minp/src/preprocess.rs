//! Preprocessing choice axes: missing-value handling, surrogate model for the
//! unobserved exposure, hyperparameter tuning, and per-case aggregation.
//!
//! Each axis is a pure transformation: identical `(table, choice, seed)`
//! inputs give identical outputs, so different pipelines can run concurrently
//! over the same table.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CaseRecord, CaseTable, DataError, MeasurementRow};
use crate::seeding::substream;
use rand::Rng;

/// Hyperparameter grids searched under [`TuningMode::Tuned`]; ties break
/// toward the smaller value.
pub const KNN_GRID: [usize; 4] = [3, 5, 10, 20];
pub const RIDGE_GRID: [f64; 4] = [0.0, 0.1, 1.0, 10.0];
pub const DEFAULT_KNN_K: usize = 5;
pub const DEFAULT_RIDGE_LAMBDA: f64 = 0.0;
pub const CV_FOLDS: usize = 5;
pub const MIN_TRAINING_ROWS: usize = 10;

/// Imputed exposures are floored here to keep them positive.
pub const EXPOSURE_FLOOR: f64 = 1.0;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("degenerate after drop: {0}")]
    DegenerateAfterDrop(String),
    #[error("insufficient surrogate training data: {have} non-missing rows, need >= {need}")]
    InsufficientTrainingData { have: usize, need: usize },
    #[error("proxy dimension mismatch: model expects {expected}, got {got}")]
    ProxyDimensionMismatch { expected: usize, got: usize },
    #[error("aggregate on incomplete data: case '{0}' has a missing exposure")]
    IncompleteData(String),
    #[error("singular design in surrogate fit")]
    SingularFit,
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MissingMode {
    Drop,
    Impute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SurrogateKind {
    Knn,
    Linreg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TuningMode {
    Default,
    Tuned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Aggregation {
    Mean,
    Median,
}

impl MissingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MissingMode::Drop => "DROP",
            MissingMode::Impute => "IMPUTE",
        }
    }
    pub fn parse_option(s: &str) -> Option<Self> {
        match s {
            "DROP" => Some(MissingMode::Drop),
            "IMPUTE" => Some(MissingMode::Impute),
            _ => None,
        }
    }
}

impl SurrogateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SurrogateKind::Knn => "KNN",
            SurrogateKind::Linreg => "LINREG",
        }
    }
    pub fn parse_option(s: &str) -> Option<Self> {
        match s {
            "KNN" => Some(SurrogateKind::Knn),
            "LINREG" => Some(SurrogateKind::Linreg),
            _ => None,
        }
    }
}

impl TuningMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TuningMode::Default => "DEFAULT",
            TuningMode::Tuned => "TUNED",
        }
    }
    pub fn parse_option(s: &str) -> Option<Self> {
        match s {
            "DEFAULT" => Some(TuningMode::Default),
            "TUNED" => Some(TuningMode::Tuned),
            _ => None,
        }
    }
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Mean => "MEAN",
            Aggregation::Median => "MEDIAN",
        }
    }
    pub fn parse_option(s: &str) -> Option<Self> {
        match s {
            "MEAN" => Some(Aggregation::Mean),
            "MEDIAN" => Some(Aggregation::Median),
            _ => None,
        }
    }
}

/// One resolved combination of the four preprocessing axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PreprocChoice {
    pub missing: MissingMode,
    pub surrogate: SurrogateKind,
    pub tuning: TuningMode,
    pub aggregation: Aggregation,
}

/// One row per case: the outcome and a single aggregated exposure.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRow {
    pub case_id: String,
    pub outcome: u8,
    pub exposure: f64,
}

/// Per-case analysis frame produced by [`aggregate`].
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisFrame {
    pub rows: Vec<FrameRow>,
}

impl AnalysisFrame {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    /// True when both outcome levels are present.
    pub fn has_both_outcome_levels(&self) -> bool {
        let ones = self.rows.iter().filter(|r| r.outcome == 1).count();
        ones > 0 && ones < self.rows.len()
    }
}

/// A case removed by [`handle_missing`] under [`MissingMode::Drop`].
#[derive(Debug, Clone, PartialEq)]
pub struct DropRecord {
    pub case_id: String,
    pub reason: String,
}

/// Fitted exposure-from-proxies model.
#[derive(Debug, Clone)]
pub struct SurrogateModel {
    kind: SurrogateKind,
    tuning: TuningMode,
    n_proxies: usize,
    train_x: Vec<Vec<f64>>,
    train_y: Vec<f64>,
    knn_k: usize,
    ridge_lambda: f64,
    ridge_coefficients: Vec<f64>,
    residuals: Vec<f64>,
    cv_rmse_chosen: Option<f64>,
}

impl SurrogateModel {
    pub fn kind(&self) -> SurrogateKind {
        self.kind
    }

    pub fn tuning(&self) -> TuningMode {
        self.tuning
    }

    /// Selected hyperparameter: neighbour count for k-NN, penalty for ridge.
    pub fn chosen_parameter(&self) -> f64 {
        match self.kind {
            SurrogateKind::Knn => self.knn_k as f64,
            SurrogateKind::Linreg => self.ridge_lambda,
        }
    }

    /// Cross-validated RMSE of the selected hyperparameter (tuned fits only).
    pub fn cv_rmse(&self) -> Option<f64> {
        self.cv_rmse_chosen
    }

    /// Predict an exposure from a proxy vector, floored at
    /// [`EXPOSURE_FLOOR`] mmHg.
    pub fn predict(&self, proxies: &[f64]) -> Result<f64, PreprocessError> {
        if proxies.len() != self.n_proxies {
            return Err(PreprocessError::ProxyDimensionMismatch {
                expected: self.n_proxies,
                got: proxies.len(),
            });
        }
        let raw = match self.kind {
            SurrogateKind::Knn => knn_predict(&self.train_x, &self.train_y, proxies, self.knn_k),
            SurrogateKind::Linreg => ridge_predict(&self.ridge_coefficients, proxies),
        };
        Ok(raw.max(EXPOSURE_FLOOR))
    }

    /// RMSE of the model on its own training rows.
    pub fn training_rmse(&self) -> f64 {
        let ss: f64 = self.residuals.iter().map(|r| r * r).sum();
        (ss / self.residuals.len() as f64).sqrt()
    }
}

/// Collect `(proxies, pao2)` training pairs from all non-missing rows.
fn training_rows(table: &CaseTable) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for case in table.cases() {
        for row in &case.measurements {
            if let Some(v) = row.pao2 {
                x.push(row.proxies.clone());
                y.push(v);
            }
        }
    }
    (x, y)
}

fn knn_predict(train_x: &[Vec<f64>], train_y: &[f64], query: &[f64], k: usize) -> f64 {
    let mut dist: Vec<(f64, usize)> = train_x
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let d2: f64 = x.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            (d2, i)
        })
        .collect();
    // Ties in distance break toward the smaller training index.
    dist.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let k_eff = k.min(dist.len()).max(1);
    dist[..k_eff].iter().map(|&(_, i)| train_y[i]).sum::<f64>() / k_eff as f64
}

fn ridge_predict(coefficients: &[f64], query: &[f64]) -> f64 {
    coefficients[0]
        + coefficients[1..]
            .iter()
            .zip(query)
            .map(|(c, q)| c * q)
            .sum::<f64>()
}

/// Solve `A x = b` for symmetric positive-definite `A` via Cholesky.
fn cholesky_solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = a.len();
    let scale = (0..n).map(|i| a[i][i].abs()).fold(1.0_f64, f64::max);
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 1e-12 * scale {
                    return None;
                }
                l[i][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    // Forward then backward substitution.
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i][k] * y[k];
        }
        y[i] = sum / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[k][i] * x[k];
        }
        x[i] = sum / l[i][i];
    }
    Some(x)
}

/// Fit ridge-penalized least squares of `y` on `[1 | x]`; the intercept is
/// not penalized. Returns `[intercept, slope_1, ..., slope_K]`.
fn ridge_fit(train_x: &[Vec<f64>], train_y: &[f64], lambda: f64) -> Option<Vec<f64>> {
    let d = train_x[0].len() + 1;
    let mut a = vec![vec![0.0; d]; d];
    let mut b = vec![0.0; d];
    for (x, &y) in train_x.iter().zip(train_y) {
        let mut row = Vec::with_capacity(d);
        row.push(1.0);
        row.extend_from_slice(x);
        for i in 0..d {
            b[i] += row[i] * y;
            for j in 0..d {
                a[i][j] += row[i] * row[j];
            }
        }
    }
    for i in 1..d {
        a[i][i] += lambda;
    }
    cholesky_solve(&a, &b)
}

fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = substream(seed, "cv-folds", 0);
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let mut fold = vec![0usize; n];
    for (pos, &idx) in order.iter().enumerate() {
        fold[idx] = pos % folds;
    }
    fold
}

fn pooled_cv_rmse<F>(train_x: &[Vec<f64>], train_y: &[f64], folds: &[usize], predict_fold: F) -> Option<f64>
where
    F: Fn(&[Vec<f64>], &[f64], &[f64]) -> Option<f64>,
{
    let n_folds = folds.iter().max().map(|m| m + 1).unwrap_or(0);
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    for f in 0..n_folds {
        let mut fit_x = Vec::new();
        let mut fit_y = Vec::new();
        let mut val: Vec<usize> = Vec::new();
        for i in 0..train_x.len() {
            if folds[i] == f {
                val.push(i);
            } else {
                fit_x.push(train_x[i].clone());
                fit_y.push(train_y[i]);
            }
        }
        if fit_x.is_empty() || val.is_empty() {
            continue;
        }
        for &i in &val {
            let pred = predict_fold(&fit_x, &fit_y, &train_x[i])?;
            let err = pred - train_y[i];
            sq_sum += err * err;
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    Some((sq_sum / count as f64).sqrt())
}

fn cv_rmse_knn_raw(train_x: &[Vec<f64>], train_y: &[f64], k: usize, seed: u64) -> Option<f64> {
    let folds = fold_assignment(train_x.len(), CV_FOLDS, seed);
    pooled_cv_rmse(train_x, train_y, &folds, |fx, fy, q| {
        Some(knn_predict(fx, fy, q, k))
    })
}

fn cv_rmse_ridge_raw(train_x: &[Vec<f64>], train_y: &[f64], lambda: f64, seed: u64) -> Option<f64> {
    let folds = fold_assignment(train_x.len(), CV_FOLDS, seed);
    pooled_cv_rmse(train_x, train_y, &folds, |fx, fy, q| {
        ridge_fit(fx, fy, lambda).map(|c| ridge_predict(&c, q))
    })
}

/// 5-fold cross-validated RMSE of a k-NN surrogate with the given `k` on the
/// non-missing rows of `table`. Fold assignment depends only on `seed`, so
/// scores for different `k` are comparable.
pub fn cv_rmse_knn(table: &CaseTable, k: usize, seed: u64) -> Result<f64, PreprocessError> {
    let (x, y) = checked_training_rows(table)?;
    cv_rmse_knn_raw(&x, &y, k, seed).ok_or(PreprocessError::SingularFit)
}

/// Like [`cv_rmse_knn`] for the ridge surrogate with penalty `lambda`.
pub fn cv_rmse_ridge(table: &CaseTable, lambda: f64, seed: u64) -> Result<f64, PreprocessError> {
    let (x, y) = checked_training_rows(table)?;
    cv_rmse_ridge_raw(&x, &y, lambda, seed).ok_or(PreprocessError::SingularFit)
}

fn checked_training_rows(table: &CaseTable) -> Result<(Vec<Vec<f64>>, Vec<f64>), PreprocessError> {
    let (x, y) = training_rows(table);
    if x.len() < MIN_TRAINING_ROWS {
        return Err(PreprocessError::InsufficientTrainingData {
            have: x.len(),
            need: MIN_TRAINING_ROWS,
        });
    }
    Ok((x, y))
}

/// Fit a surrogate model predicting the exposure from the proxy vector, using
/// all non-missing measurement rows as training data.
///
/// `Tuned` selects the hyperparameter by 5-fold cross-validated RMSE over the
/// fixed grid ([`KNN_GRID`] / [`RIDGE_GRID`]); `Default` uses k=5 / lambda=0.
pub fn fit_surrogate(
    table: &CaseTable,
    kind: SurrogateKind,
    tuning: TuningMode,
    seed: u64,
) -> Result<SurrogateModel, PreprocessError> {
    let (train_x, train_y) = checked_training_rows(table)?;
    let n_proxies = table.proxy_names().len();

    let mut model = SurrogateModel {
        kind,
        tuning,
        n_proxies,
        train_x,
        train_y,
        knn_k: DEFAULT_KNN_K,
        ridge_coefficients: Vec::new(),
        residuals: Vec::new(),
        cv_rmse_chosen: None,
        ridge_lambda: DEFAULT_RIDGE_LAMBDA,
    };

    match (kind, tuning) {
        (SurrogateKind::Knn, TuningMode::Default) => {
            model.knn_k = DEFAULT_KNN_K;
        }
        (SurrogateKind::Knn, TuningMode::Tuned) => {
            let mut best: Option<(usize, f64)> = None;
            for &k in KNN_GRID.iter() {
                let rmse = cv_rmse_knn_raw(&model.train_x, &model.train_y, k, seed)
                    .ok_or(PreprocessError::SingularFit)?;
                if best.map_or(true, |(_, b)| rmse < b) {
                    best = Some((k, rmse));
                }
            }
            let (k, rmse) = best.expect("grid is nonempty");
            model.knn_k = k;
            model.cv_rmse_chosen = Some(rmse);
        }
        (SurrogateKind::Linreg, TuningMode::Default) => {
            model.ridge_lambda = DEFAULT_RIDGE_LAMBDA;
        }
        (SurrogateKind::Linreg, TuningMode::Tuned) => {
            let mut best: Option<(f64, f64)> = None;
            for &lambda in RIDGE_GRID.iter() {
                let rmse = cv_rmse_ridge_raw(&model.train_x, &model.train_y, lambda, seed)
                    .ok_or(PreprocessError::SingularFit)?;
                if best.map_or(true, |(_, b)| rmse < b) {
                    best = Some((lambda, rmse));
                }
            }
            let (lambda, rmse) = best.expect("grid is nonempty");
            model.ridge_lambda = lambda;
            model.cv_rmse_chosen = Some(rmse);
        }
    }

    if kind == SurrogateKind::Linreg {
        model.ridge_coefficients =
            ridge_fit(&model.train_x, &model.train_y, model.ridge_lambda)
                .ok_or(PreprocessError::SingularFit)?;
    }

    model.residuals = model
        .train_x
        .iter()
        .zip(&model.train_y)
        .map(|(x, &y)| {
            let pred = match kind {
                SurrogateKind::Knn => {
                    knn_predict(&model.train_x, &model.train_y, x, model.knn_k)
                }
                SurrogateKind::Linreg => ridge_predict(&model.ridge_coefficients, x),
            }
            .max(EXPOSURE_FLOOR);
            y - pred
        })
        .collect();

    Ok(model)
}

/// Deterministically replace every missing exposure by the model prediction;
/// observed values are untouched.
pub fn apply_surrogate(table: &CaseTable, model: &SurrogateModel) -> Result<CaseTable, PreprocessError> {
    impute_table(table, model, None)
}

/// Stochastic single imputation: model prediction plus a bootstrap draw from
/// the training residuals, floored at [`EXPOSURE_FLOOR`]. Deterministic per
/// seed.
pub fn impute_stochastic(
    table: &CaseTable,
    model: &SurrogateModel,
    seed: u64,
) -> Result<CaseTable, PreprocessError> {
    let mut rng = substream(seed, "impute-residuals", 0);
    impute_table(table, model, Some(&mut rng))
}

fn impute_table(
    table: &CaseTable,
    model: &SurrogateModel,
    mut rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<CaseTable, PreprocessError> {
    if table.proxy_names().len() != model.n_proxies {
        return Err(PreprocessError::ProxyDimensionMismatch {
            expected: model.n_proxies,
            got: table.proxy_names().len(),
        });
    }
    let mut cases = Vec::with_capacity(table.n_cases());
    for case in table.cases() {
        let mut measurements = Vec::with_capacity(case.measurements.len());
        for row in &case.measurements {
            let pao2 = match row.pao2 {
                Some(v) => Some(v),
                None => {
                    let mut value = model.predict(&row.proxies)?;
                    if let Some(rng) = rng.as_deref_mut() {
                        let draw = model.residuals[rng.gen_range(0..model.residuals.len())];
                        value = (value + draw).max(EXPOSURE_FLOOR);
                    }
                    Some(value)
                }
            };
            measurements.push(MeasurementRow {
                pao2,
                proxies: row.proxies.clone(),
            });
        }
        cases.push(CaseRecord {
            case_id: case.case_id.clone(),
            outcome: case.outcome,
            measurements,
        });
    }
    Ok(CaseTable::new(cases, table.proxy_names().to_vec())?)
}

/// Missing-value handling.
///
/// `Drop` removes measurement rows with a missing exposure; cases losing all
/// rows are removed entirely and reported in the drop log. `Impute` performs
/// stochastic single imputation with a default (unpenalized linear)
/// surrogate; the multiverse engine instead imputes with the surrogate named
/// by each specification.
pub fn handle_missing(
    table: &CaseTable,
    mode: MissingMode,
    seed: u64,
) -> Result<(CaseTable, Vec<DropRecord>), PreprocessError> {
    match mode {
        MissingMode::Drop => drop_missing(table),
        MissingMode::Impute => {
            if !table.has_missing() {
                return Ok((table.clone(), Vec::new()));
            }
            let model = fit_surrogate(table, SurrogateKind::Linreg, TuningMode::Default, seed)?;
            Ok((impute_stochastic(table, &model, seed)?, Vec::new()))
        }
    }
}

fn drop_missing(table: &CaseTable) -> Result<(CaseTable, Vec<DropRecord>), PreprocessError> {
    let mut kept = Vec::new();
    let mut log = Vec::new();
    for case in table.cases() {
        let measurements: Vec<MeasurementRow> = case
            .measurements
            .iter()
            .filter(|m| m.pao2.is_some())
            .cloned()
            .collect();
        if measurements.is_empty() {
            log.push(DropRecord {
                case_id: case.case_id.clone(),
                reason: "all measurements missing".into(),
            });
        } else {
            kept.push(CaseRecord {
                case_id: case.case_id.clone(),
                outcome: case.outcome,
                measurements,
            });
        }
    }
    if kept.len() < 2 {
        return Err(PreprocessError::DegenerateAfterDrop(format!(
            "{} case(s) remain",
            kept.len()
        )));
    }
    let ones = kept.iter().filter(|c| c.outcome == 1).count();
    if ones == 0 || ones == kept.len() {
        return Err(PreprocessError::DegenerateAfterDrop(
            "a single outcome level remains".into(),
        ));
    }
    Ok((CaseTable::new(kept, table.proxy_names().to_vec())?, log))
}

/// Aggregate each case's exposures to one value. All exposures must be
/// present (post-drop or post-imputation). The median of an even-length list
/// is the midpoint of the two central order statistics.
pub fn aggregate(table: &CaseTable, how: Aggregation) -> Result<AnalysisFrame, PreprocessError> {
    let mut rows = Vec::with_capacity(table.n_cases());
    for case in table.cases() {
        let mut values = Vec::with_capacity(case.measurements.len());
        for m in &case.measurements {
            match m.pao2 {
                Some(v) => values.push(v),
                None => return Err(PreprocessError::IncompleteData(case.case_id.clone())),
            }
        }
        rows.push(FrameRow {
            case_id: case.case_id.clone(),
            outcome: case.outcome,
            exposure: aggregate_values(&mut values, how),
        });
    }
    Ok(AnalysisFrame { rows })
}

/// Aggregate one case's exposure values (reorders `values`).
pub fn aggregate_values(values: &mut [f64], how: Aggregation) -> f64 {
    match how {
        Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
        Aggregation::Median => {
            values.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
            let n = values.len();
            if n % 2 == 1 {
                values[n / 2]
            } else {
                (values[n / 2 - 1] + values[n / 2]) / 2.0
            }
        }
    }
}
