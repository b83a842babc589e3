//! Specification-tree enumeration and execution.
//!
//! A [`SpecTree`] declares ordered choice axes; its cartesian product (minus
//! excluded tuples) is the multiverse of analysis specifications. [`run_all`]
//! executes every specification on one table and returns the raw
//! [`PValueVector`].
//!
//! The engine separates preparation from evaluation: preprocessing (missing
//! handling, surrogate imputation, aggregation, exposure coding) depends only
//! on the exposure side of the data, so a [`PreparedMultiverse`] is computed
//! once and can then be evaluated against many outcome vectors. This is what
//! makes outcome-permutation adjustment affordable: each permutation costs
//! only the final tests. Evaluating the prepared pipelines against the
//! original outcomes is bit-identical to running the full pipeline, because
//! every random draw comes from a substream keyed by `(master_seed, spec_id)`
//! and never from outcome values.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CaseTable, DataError};
use crate::preprocess::{
    aggregate_values, fit_surrogate, impute_stochastic, Aggregation, MissingMode, PreprocChoice,
    PreprocessError, SurrogateKind, TuningMode,
};
use crate::seeding::derive_seed;
use crate::stattests::{
    fisher_from_counts, logistic_test_from_arrays, ExposureCoding, TestResult, BINARY_CUT,
    TERNARY_CUTS,
};

#[derive(Debug, Error)]
pub enum MultiverseError {
    #[error("spec tree has no axes")]
    EmptyTree,
    #[error("axis '{0}' has no options")]
    EmptyAxis(String),
    #[error("duplicate axis '{0}'")]
    DuplicateAxis(String),
    #[error("duplicate option '{option}' in axis '{axis}'")]
    DuplicateOption { axis: String, option: String },
    #[error("unknown axis '{0}'")]
    UnknownAxis(String),
    #[error("unknown option '{option}' for axis '{axis}'")]
    UnknownOption { axis: String, option: String },
    #[error("no specifications remain after exclusions")]
    EmptyEnumeration,
    #[error("outcome vector length {got} does not match case count {expected}")]
    OutcomeLength { expected: usize, got: usize },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

pub const AXIS_MISSING: &str = "missing";
pub const AXIS_SURROGATE: &str = "surrogate";
pub const AXIS_TUNING: &str = "tuning";
pub const AXIS_AGGREGATION: &str = "aggregation";
pub const AXIS_CODING: &str = "coding";

/// One choice axis: a name and its ordered options.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub options: Vec<String>,
}

impl Axis {
    pub fn new(name: &str, options: &[&str]) -> Self {
        Axis {
            name: name.to_string(),
            options: options.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// The declared multiverse: ordered axes, optional excluded tuples, and
/// whether structurally duplicated pipelines should be collapsed before
/// counting toward the multiplicity m (default: they count).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecTree {
    pub axes: Vec<Axis>,
    /// A tuple is excluded when it matches every (axis, option) pair of any
    /// entry here.
    #[serde(default)]
    pub exclusions: Vec<BTreeMap<String, String>>,
    #[serde(default)]
    pub collapse_duplicates: bool,
}

impl Default for SpecTree {
    /// The full five-axis tree: 2 x 2 x 2 x 2 x 3 = 48 specifications.
    fn default() -> Self {
        SpecTree {
            axes: vec![
                Axis::new(AXIS_MISSING, &["DROP", "IMPUTE"]),
                Axis::new(AXIS_SURROGATE, &["KNN", "LINREG"]),
                Axis::new(AXIS_TUNING, &["DEFAULT", "TUNED"]),
                Axis::new(AXIS_AGGREGATION, &["MEAN", "MEDIAN"]),
                Axis::new(AXIS_CODING, &["CONTINUOUS", "BINARY_200", "TERNARY_200_250"]),
            ],
            exclusions: Vec::new(),
            collapse_duplicates: false,
        }
    }
}

/// One tuple of the enumerated cartesian product, before semantic
/// resolution. `spec_id` is its dense rank in lexicographic axis order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecAssignment {
    pub spec_id: usize,
    pub options: Vec<String>,
}

/// A fully resolved specification: preprocessing choices plus exposure
/// coding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ResolvedSpec {
    pub spec_id: usize,
    pub choice: PreprocChoice,
    pub coding: ExposureCoding,
}

impl ResolvedSpec {
    /// The five option labels in axis order.
    pub fn path_labels(&self) -> [&'static str; 5] {
        [
            self.choice.missing.as_str(),
            self.choice.surrogate.as_str(),
            self.choice.tuning.as_str(),
            self.choice.aggregation.as_str(),
            self.coding.as_str(),
        ]
    }

    /// Key identifying the effective pipeline; under `DROP` the surrogate and
    /// tuning axes are inert, so they do not contribute.
    fn effective_key(
        &self,
    ) -> (
        MissingMode,
        Option<SurrogateKind>,
        Option<TuningMode>,
        Aggregation,
        ExposureCoding,
    ) {
        match self.choice.missing {
            MissingMode::Drop => (
                MissingMode::Drop,
                None,
                None,
                self.choice.aggregation,
                self.coding,
            ),
            MissingMode::Impute => (
                MissingMode::Impute,
                Some(self.choice.surrogate),
                Some(self.choice.tuning),
                self.choice.aggregation,
                self.coding,
            ),
        }
    }
}

impl SpecTree {
    pub fn validate(&self) -> Result<(), MultiverseError> {
        if self.axes.is_empty() {
            return Err(MultiverseError::EmptyTree);
        }
        let mut names = std::collections::HashSet::new();
        for axis in &self.axes {
            if !names.insert(axis.name.clone()) {
                return Err(MultiverseError::DuplicateAxis(axis.name.clone()));
            }
            if axis.options.is_empty() {
                return Err(MultiverseError::EmptyAxis(axis.name.clone()));
            }
            let mut opts = std::collections::HashSet::new();
            for option in &axis.options {
                if !opts.insert(option.clone()) {
                    return Err(MultiverseError::DuplicateOption {
                        axis: axis.name.clone(),
                        option: option.clone(),
                    });
                }
            }
        }
        for exclusion in &self.exclusions {
            for (name, option) in exclusion {
                let axis = self
                    .axes
                    .iter()
                    .find(|a| &a.name == name)
                    .ok_or_else(|| MultiverseError::UnknownAxis(name.clone()))?;
                if !axis.options.contains(option) {
                    return Err(MultiverseError::UnknownOption {
                        axis: name.clone(),
                        option: option.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Enumerate the cartesian product in lexicographic axis order, skip
    /// excluded tuples, and assign dense ascending spec ids.
    pub fn enumerate(&self) -> Result<Vec<SpecAssignment>, MultiverseError> {
        self.validate()?;
        let sizes: Vec<usize> = self.axes.iter().map(|a| a.options.len()).collect();
        let mut odometer = vec![0usize; sizes.len()];
        let mut out = Vec::new();
        'tuples: loop {
            let options: Vec<String> = odometer
                .iter()
                .zip(&self.axes)
                .map(|(&i, axis)| axis.options[i].clone())
                .collect();
            let excluded = self.exclusions.iter().any(|exclusion| {
                exclusion.iter().all(|(name, option)| {
                    self.axes
                        .iter()
                        .position(|a| &a.name == name)
                        .map(|pos| &options[pos] == option)
                        .unwrap_or(false)
                })
            });
            if !excluded {
                out.push(SpecAssignment {
                    spec_id: out.len(),
                    options,
                });
            }
            // Advance the odometer, last axis fastest.
            for pos in (0..sizes.len()).rev() {
                odometer[pos] += 1;
                if odometer[pos] < sizes[pos] {
                    continue 'tuples;
                }
                odometer[pos] = 0;
            }
            break;
        }
        if out.is_empty() {
            return Err(MultiverseError::EmptyEnumeration);
        }
        Ok(out)
    }

    /// Enumerate and semantically resolve every specification; axes absent
    /// from the tree take their first default (DROP, LINREG, DEFAULT, MEAN,
    /// CONTINUOUS). Honors `collapse_duplicates`.
    pub fn resolve(&self) -> Result<Vec<ResolvedSpec>, MultiverseError> {
        let assignments = self.enumerate()?;
        let mut resolved = Vec::with_capacity(assignments.len());
        for assignment in &assignments {
            resolved.push(self.resolve_one(assignment)?);
        }
        if self.collapse_duplicates {
            let mut seen = std::collections::HashSet::new();
            resolved.retain(|spec| seen.insert(spec.effective_key()));
        }
        Ok(resolved)
    }

    fn resolve_one(&self, assignment: &SpecAssignment) -> Result<ResolvedSpec, MultiverseError> {
        let mut choice = PreprocChoice {
            missing: MissingMode::Drop,
            surrogate: SurrogateKind::Linreg,
            tuning: TuningMode::Default,
            aggregation: Aggregation::Mean,
        };
        let mut coding = ExposureCoding::Continuous;
        for (axis, option) in self.axes.iter().zip(&assignment.options) {
            let unknown = || MultiverseError::UnknownOption {
                axis: axis.name.clone(),
                option: option.clone(),
            };
            match axis.name.as_str() {
                AXIS_MISSING => {
                    choice.missing = MissingMode::parse_option(option).ok_or_else(unknown)?
                }
                AXIS_SURROGATE => {
                    choice.surrogate = SurrogateKind::parse_option(option).ok_or_else(unknown)?
                }
                AXIS_TUNING => {
                    choice.tuning = TuningMode::parse_option(option).ok_or_else(unknown)?
                }
                AXIS_AGGREGATION => {
                    choice.aggregation = Aggregation::parse_option(option).ok_or_else(unknown)?
                }
                AXIS_CODING => coding = ExposureCoding::parse_option(option).ok_or_else(unknown)?,
                other => return Err(MultiverseError::UnknownAxis(other.to_string())),
            }
        }
        Ok(ResolvedSpec {
            spec_id: assignment.spec_id,
            choice,
            coding,
        })
    }
}

/// Substream seed used for every random draw of one specification
/// (imputation residual bootstrap, cross-validation folds).
pub fn spec_seed(master_seed: u64, spec_id: usize) -> u64 {
    derive_seed(master_seed, "spec", spec_id as u64)
}

/// One raw p-value with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PValueEntry {
    pub spec: ResolvedSpec,
    pub p_value: f64,
    pub method_tag: &'static str,
    pub converged: bool,
    pub notes: Option<String>,
}

/// Raw p-values, one per specification, ordered by spec id.
#[derive(Debug, Clone, PartialEq)]
pub struct PValueVector {
    entries: Vec<PValueEntry>,
}

impl PValueVector {
    #[cfg(test)]
    pub(crate) fn from_entries_for_tests(entries: Vec<PValueEntry>) -> Self {
        PValueVector { entries }
    }

    pub fn entries(&self) -> &[PValueEntry] {
        &self.entries
    }

    pub fn m(&self) -> usize {
        self.entries.len()
    }

    pub fn p_values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.p_value).collect()
    }

    /// Serialize as CSV:
    /// `spec_id,missing,surrogate,tuning,aggregation,coding,p_value,converged,notes`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), MultiverseError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record([
            "spec_id",
            "missing",
            "surrogate",
            "tuning",
            "aggregation",
            "coding",
            "p_value",
            "converged",
            "notes",
        ])?;
        for entry in &self.entries {
            let labels = entry.spec.path_labels();
            wtr.write_record([
                entry.spec.spec_id.to_string(),
                labels[0].to_string(),
                labels[1].to_string(),
                labels[2].to_string(),
                labels[3].to_string(),
                labels[4].to_string(),
                entry.p_value.to_string(),
                entry.converged.to_string(),
                entry.notes.clone().unwrap_or_default(),
            ])?;
        }
        wtr.flush().map_err(DataError::Io)?;
        Ok(())
    }
}

/// The smallest p-value and its spec id; ties break toward the smaller id.
pub fn min_p(v: &PValueVector) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for entry in v.entries() {
        if best.map_or(true, |(_, p)| entry.p_value < p) {
            best = Some((entry.spec.spec_id, entry.p_value));
        }
    }
    best
}

enum PreparedData {
    Continuous {
        case_indices: Vec<u32>,
        exposures: Vec<f64>,
    },
    Categorical {
        case_indices: Vec<u32>,
        categories: Vec<u8>,
        ncols: usize,
        tag: &'static str,
    },
    Degenerate {
        note: String,
        tag: &'static str,
    },
}

struct PreparedSpec {
    spec: ResolvedSpec,
    data: PreparedData,
}

/// Exposure-side preparation of every specification, reusable across outcome
/// vectors.
pub struct PreparedMultiverse {
    specs: Vec<PreparedSpec>,
    base_outcomes: Vec<u8>,
}

impl PreparedMultiverse {
    pub fn prepare(
        table: &CaseTable,
        tree: &SpecTree,
        master_seed: u64,
    ) -> Result<Self, MultiverseError> {
        let resolved = tree.resolve()?;
        let specs: Vec<PreparedSpec> = resolved
            .into_par_iter()
            .map(|spec| PreparedSpec {
                data: prepare_spec(table, &spec, master_seed),
                spec,
            })
            .collect();
        Ok(PreparedMultiverse {
            specs,
            base_outcomes: table.outcomes(),
        })
    }

    pub fn m(&self) -> usize {
        self.specs.len()
    }

    /// Outcome labels of the table the multiverse was prepared on.
    pub fn base_outcomes(&self) -> &[u8] {
        &self.base_outcomes
    }

    /// Run every specification's test against an outcome vector (indexed by
    /// original case order).
    pub fn evaluate(&self, outcomes: &[u8]) -> Result<PValueVector, MultiverseError> {
        if outcomes.len() != self.base_outcomes.len() {
            return Err(MultiverseError::OutcomeLength {
                expected: self.base_outcomes.len(),
                got: outcomes.len(),
            });
        }
        let entries = self
            .specs
            .iter()
            .map(|prepared| {
                let result = evaluate_spec(prepared, outcomes);
                PValueEntry {
                    spec: prepared.spec,
                    p_value: result.p_value,
                    method_tag: result.method_tag,
                    converged: result.converged,
                    notes: result.notes,
                }
            })
            .collect();
        Ok(PValueVector { entries })
    }
}

fn coding_tag(coding: ExposureCoding) -> &'static str {
    match coding {
        ExposureCoding::Continuous => "logistic_wald",
        ExposureCoding::Binary200 => "fisher_2x2",
        ExposureCoding::Ternary200250 => "fisher_2x3",
    }
}

/// Per-case exposure lists after missing handling. Depends only on the
/// exposure side of the table plus the spec substream.
fn exposures_per_case(
    table: &CaseTable,
    spec: &ResolvedSpec,
    seed: u64,
) -> Result<Vec<(u32, Vec<f64>)>, String> {
    match spec.choice.missing {
        MissingMode::Drop => {
            let mut kept = Vec::with_capacity(table.n_cases());
            for (idx, case) in table.cases().iter().enumerate() {
                let values: Vec<f64> = case.measurements.iter().filter_map(|m| m.pao2).collect();
                if !values.is_empty() {
                    kept.push((idx as u32, values));
                }
            }
            if kept.len() < 2 {
                return Err(format!(
                    "degenerate after drop: {} case(s) remain",
                    kept.len()
                ));
            }
            Ok(kept)
        }
        MissingMode::Impute => {
            let imputed;
            let source = if table.has_missing() {
                let model = fit_surrogate(table, spec.choice.surrogate, spec.choice.tuning, seed)
                    .map_err(|e| e.to_string())?;
                imputed = impute_stochastic(table, &model, seed).map_err(|e| e.to_string())?;
                &imputed
            } else {
                table
            };
            Ok(source
                .cases()
                .iter()
                .enumerate()
                .map(|(idx, case)| {
                    (
                        idx as u32,
                        case.measurements
                            .iter()
                            .map(|m| m.pao2.expect("imputation leaves no missing values"))
                            .collect(),
                    )
                })
                .collect())
        }
    }
}

fn prepare_spec(table: &CaseTable, spec: &ResolvedSpec, master_seed: u64) -> PreparedData {
    let tag = coding_tag(spec.coding);
    let seed = spec_seed(master_seed, spec.spec_id);
    let per_case = match exposures_per_case(table, spec, seed) {
        Ok(v) => v,
        Err(note) => return PreparedData::Degenerate { note, tag },
    };
    let mut case_indices = Vec::with_capacity(per_case.len());
    let mut exposures = Vec::with_capacity(per_case.len());
    for (idx, mut values) in per_case {
        case_indices.push(idx);
        exposures.push(aggregate_values(&mut values, spec.choice.aggregation));
    }
    match spec.coding {
        ExposureCoding::Continuous => PreparedData::Continuous {
            case_indices,
            exposures,
        },
        ExposureCoding::Binary200 => PreparedData::Categorical {
            case_indices,
            categories: exposures
                .iter()
                .map(|&x| u8::from(x >= BINARY_CUT))
                .collect(),
            ncols: 2,
            tag,
        },
        ExposureCoding::Ternary200250 => PreparedData::Categorical {
            case_indices,
            categories: exposures
                .iter()
                .map(|&x| {
                    if x < TERNARY_CUTS.0 {
                        0u8
                    } else if x < TERNARY_CUTS.1 {
                        1
                    } else {
                        2
                    }
                })
                .collect(),
            ncols: 3,
            tag,
        },
    }
}

fn evaluate_spec(prepared: &PreparedSpec, outcomes: &[u8]) -> TestResult {
    match &prepared.data {
        PreparedData::Degenerate { note, tag } => TestResult {
            p_value: 1.0,
            statistic: 0.0,
            method_tag: tag,
            converged: true,
            notes: Some(note.clone()),
        },
        PreparedData::Continuous {
            case_indices,
            exposures,
        } => {
            let ys: Vec<u8> = case_indices.iter().map(|&i| outcomes[i as usize]).collect();
            logistic_test_from_arrays(exposures, &ys)
        }
        PreparedData::Categorical {
            case_indices,
            categories,
            ncols,
            tag,
        } => {
            let mut counts = [[0u64; 3]; 2];
            for (&idx, &col) in case_indices.iter().zip(categories) {
                counts[outcomes[idx as usize] as usize][col as usize] += 1;
            }
            fisher_from_counts(counts, *ncols, tag)
        }
    }
}

/// Execute every specification of `tree` on `table`: missing handling, then
/// surrogate fitting/imputation (skipped when nothing is missing), then
/// aggregation, then the coded test. Per-spec randomness comes from
/// [`spec_seed`], so results are independent of execution order and thread
/// count; per-spec degeneracies become p = 1.0 entries with a note rather
/// than errors.
pub fn run_all(
    table: &CaseTable,
    tree: &SpecTree,
    master_seed: u64,
) -> Result<PValueVector, MultiverseError> {
    let prepared = PreparedMultiverse::prepare(table, tree, master_seed)?;
    let outcomes = prepared.base_outcomes().to_vec();
    prepared.evaluate(&outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, GenConfig};
    use crate::preprocess::aggregate;
    use crate::stattests::run_test;

    fn generic_tree(axes: Vec<Axis>) -> SpecTree {
        SpecTree {
            axes,
            exclusions: Vec::new(),
            collapse_duplicates: false,
        }
    }

    #[test]
    fn default_tree_enumerates_48_specs() {
        let specs = SpecTree::default().enumerate().unwrap();
        assert_eq!(specs.len(), 48);
        for (i, spec) in specs.iter().enumerate() {
            assert_eq!(spec.spec_id, i);
        }
        // Lexicographic order: the last axis varies fastest.
        assert_eq!(
            specs[0].options,
            vec!["DROP", "KNN", "DEFAULT", "MEAN", "CONTINUOUS"]
        );
        assert_eq!(
            specs[1].options,
            vec!["DROP", "KNN", "DEFAULT", "MEAN", "BINARY_200"]
        );
        assert_eq!(
            specs[47].options,
            vec!["IMPUTE", "LINREG", "TUNED", "MEDIAN", "TERNARY_200_250"]
        );
    }

    #[test]
    fn single_axis_tree_enumerates_one_spec() {
        let tree = generic_tree(vec![Axis::new("x", &["A"])]);
        let specs = tree.enumerate().unwrap();
        assert_eq!(specs.len(), 1);
        assert_eq!(specs[0].options, vec!["A"]);
    }

    #[test]
    fn exclusions_keep_ids_dense() {
        let mut tree = generic_tree(vec![
            Axis::new("x", &["A", "B"]),
            Axis::new("y", &["1", "2", "3"]),
        ]);
        tree.exclusions.push(BTreeMap::from([
            ("x".to_string(), "B".to_string()),
            ("y".to_string(), "2".to_string()),
        ]));
        let specs = tree.enumerate().unwrap();
        assert_eq!(specs.len(), 5);
        let ids: Vec<usize> = specs.iter().map(|s| s.spec_id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        assert!(specs.iter().all(|s| s.options != vec!["B", "2"]));
    }

    #[test]
    fn excluding_everything_is_an_error() {
        let mut tree = generic_tree(vec![Axis::new("x", &["A"])]);
        tree.exclusions
            .push(BTreeMap::from([("x".to_string(), "A".to_string())]));
        assert!(matches!(
            tree.enumerate(),
            Err(MultiverseError::EmptyEnumeration)
        ));
    }

    #[test]
    fn invalid_trees_are_rejected() {
        assert!(matches!(
            generic_tree(vec![]).enumerate(),
            Err(MultiverseError::EmptyTree)
        ));
        assert!(matches!(
            generic_tree(vec![Axis::new("x", &[])]).enumerate(),
            Err(MultiverseError::EmptyAxis(_))
        ));
        assert!(matches!(
            generic_tree(vec![Axis::new("x", &["A", "A"])]).enumerate(),
            Err(MultiverseError::DuplicateOption { .. })
        ));
        let mut tree = generic_tree(vec![Axis::new("x", &["A"])]);
        tree.exclusions
            .push(BTreeMap::from([("y".to_string(), "A".to_string())]));
        assert!(matches!(
            tree.enumerate(),
            Err(MultiverseError::UnknownAxis(_))
        ));
    }

    #[test]
    fn resolving_unknown_axis_fails() {
        let tree = generic_tree(vec![Axis::new("x", &["A"])]);
        assert!(matches!(
            tree.resolve(),
            Err(MultiverseError::UnknownAxis(_))
        ));
        let tree = generic_tree(vec![Axis::new("coding", &["NOPE"])]);
        assert!(matches!(
            tree.resolve(),
            Err(MultiverseError::UnknownOption { .. })
        ));
    }

    #[test]
    fn omitted_axes_take_defaults() {
        let tree = generic_tree(vec![Axis::new("coding", &["BINARY_200"])]);
        let specs = tree.resolve().unwrap();
        assert_eq!(specs.len(), 1);
        let spec = specs[0];
        assert_eq!(spec.choice.missing, MissingMode::Drop);
        assert_eq!(spec.choice.surrogate, SurrogateKind::Linreg);
        assert_eq!(spec.choice.tuning, TuningMode::Default);
        assert_eq!(spec.choice.aggregation, Aggregation::Mean);
        assert_eq!(spec.coding, ExposureCoding::Binary200);
    }

    #[test]
    fn collapse_duplicates_merges_inert_axes_under_drop() {
        let tree = SpecTree {
            axes: vec![
                Axis::new(AXIS_MISSING, &["DROP"]),
                Axis::new(AXIS_SURROGATE, &["KNN", "LINREG"]),
                Axis::new(AXIS_TUNING, &["DEFAULT", "TUNED"]),
                Axis::new(AXIS_AGGREGATION, &["MEAN"]),
                Axis::new(AXIS_CODING, &["CONTINUOUS"]),
            ],
            exclusions: Vec::new(),
            collapse_duplicates: true,
        };
        let specs = tree.resolve().unwrap();
        assert_eq!(specs.len(), 1);
        assert_eq!(specs[0].spec_id, 0);

        let full = SpecTree {
            collapse_duplicates: true,
            ..SpecTree::default()
        };
        // 24 DROP specs collapse to 6; 24 IMPUTE specs stay distinct.
        assert_eq!(full.resolve().unwrap().len(), 30);
    }

    #[test]
    fn run_all_default_tree_gives_48_entries() {
        let table = generate(&GenConfig::with_seed(31)).unwrap();
        let v = run_all(&table, &SpecTree::default(), 7).unwrap();
        assert_eq!(v.m(), 48);
        assert!(v.p_values().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn complete_data_collapses_missing_and_surrogate_axes() {
        let config = GenConfig {
            missing_rate: 0.0,
            ..GenConfig::with_seed(19)
        };
        let table = generate(&config).unwrap();
        let v = run_all(&table, &SpecTree::default(), 3).unwrap();
        // Group p-values by (aggregation, coding): all eight combinations of
        // the other axes must agree bit-for-bit.
        let mut groups: std::collections::HashMap<(Aggregation, ExposureCoding), Vec<f64>> =
            std::collections::HashMap::new();
        for entry in v.entries() {
            groups
                .entry((entry.spec.choice.aggregation, entry.spec.coding))
                .or_default()
                .push(entry.p_value);
        }
        assert_eq!(groups.len(), 6);
        for (key, ps) in groups {
            assert_eq!(ps.len(), 8, "{key:?}");
            assert!(
                ps.iter().all(|&p| p.to_bits() == ps[0].to_bits()),
                "{key:?}"
            );
        }
    }

    #[test]
    fn run_all_is_deterministic_and_schedule_independent() {
        let config = GenConfig {
            missing_rate: 0.25,
            ..GenConfig::with_seed(40)
        };
        let table = generate(&config).unwrap();
        let tree = SpecTree::default();
        let a = run_all(&table, &tree, 11).unwrap();
        let b = run_all(&table, &tree, 11).unwrap();
        assert_eq!(a, b);

        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| run_all(&table, &tree, 11).unwrap());
        let quad = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| run_all(&table, &tree, 11).unwrap());
        assert_eq!(single, quad);
        assert_eq!(single, a);
    }

    #[test]
    fn engine_matches_manual_pipeline_composition() {
        let config = GenConfig {
            missing_rate: 0.3,
            ..GenConfig::with_seed(55)
        };
        let table = generate(&config).unwrap();
        let tree = SpecTree::default();
        let v = run_all(&table, &tree, 99).unwrap();

        for entry in v.entries() {
            if entry.spec.choice.missing != MissingMode::Impute {
                continue;
            }
            let seed = spec_seed(99, entry.spec.spec_id);
            let model = fit_surrogate(
                &table,
                entry.spec.choice.surrogate,
                entry.spec.choice.tuning,
                seed,
            )
            .unwrap();
            let imputed = impute_stochastic(&table, &model, seed).unwrap();
            let frame = aggregate(&imputed, entry.spec.choice.aggregation).unwrap();
            let manual = run_test(&frame, entry.spec.coding);
            assert_eq!(
                manual.p_value.to_bits(),
                entry.p_value.to_bits(),
                "{:?}",
                entry.spec
            );
        }
    }

    #[test]
    fn min_p_breaks_ties_toward_smaller_id() {
        let table = generate(&GenConfig::with_seed(2)).unwrap();
        let tree = generic_tree(vec![Axis::new(
            "coding",
            &["CONTINUOUS", "BINARY_200", "TERNARY_200_250"],
        )]);
        let v = run_all(&table, &tree, 5).unwrap();
        let (id, p) = min_p(&v).unwrap();
        let min_val = v.p_values().iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(p, min_val);
        let first_idx = v.p_values().iter().position(|&q| q == min_val).unwrap();
        assert_eq!(id, v.entries()[first_idx].spec.spec_id);
    }

    #[test]
    fn csv_serialization_has_the_documented_schema() {
        let table = generate(&GenConfig::with_seed(6)).unwrap();
        let tree = generic_tree(vec![Axis::new("coding", &["BINARY_200"])]);
        let v = run_all(&table, &tree, 1).unwrap();
        let mut buf = Vec::new();
        v.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "spec_id,missing,surrogate,tuning,aggregation,coding,p_value,converged,notes"
        );
        let row = lines.next().unwrap();
        assert!(
            row.starts_with("0,DROP,LINREG,DEFAULT,MEAN,BINARY_200,"),
            "{row}"
        );
    }
}
