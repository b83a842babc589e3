//! Specification-tree (multiverse) analysis with permutation-based minP
//! multiplicity adjustment.
//!
//! When a single research question can be analysed in many defensible ways,
//! running every analysis and reporting the smallest p-value inflates the
//! family-wise error rate. This crate enumerates a tree of analysis
//! specifications, executes each one to obtain a raw p-value, and adjusts the
//! p-values for the implied multiplicity: Bonferroni and Holm as baselines,
//! and the single-step minP procedure, which approximates the null
//! distribution of the minimal p-value by rerunning the whole tree on
//! outcome-permuted data and therefore respects the strong dependence between
//! the specifications.
//!
//! The crate ships:
//!
//! - [`dataset`]: a long-format clinical-style data model with CSV I/O and a
//!   synthetic generator (lognormal oxygen-pressure exposures, noisy proxy
//!   covariates, configurable exposure-outcome effect, exact global null);
//! - [`preprocess`]: the preprocessing choice axes (drop-vs-impute missing
//!   values, k-NN vs ridge surrogate imputation model, tuned vs default
//!   hyperparameters, mean vs median per-case aggregation);
//! - [`stattests`]: logistic-regression Wald test on the continuous exposure
//!   and Fisher's exact test on its 200 mmHg and 200/250 mmHg categorizations;
//! - [`multiverse`]: tree enumeration and the deterministic, parallel
//!   execution engine producing one p-value per specification;
//! - [`adjust`]: Bonferroni, Holm and permutation minP adjustment;
//! - [`simstudy`]: Monte-Carlo studies of the family-wise error rate under
//!   the null and of the proportion of significant specifications under
//!   signal, with Wilson-score (Newcombe) confidence intervals;
//! - [`cli`]: a config-file-driven command-line surface over all of it.
//!
//! Every random quantity is derived from explicit 64-bit seeds through named
//! substreams; results are bit-reproducible across thread counts.
//!
//! See the `examples/` directory for one runnable example per capability, and
//! the `mvminp` binary for the command-line interface.

pub mod adjust;
pub mod cli;
pub mod dataset;
pub mod multiverse;
pub mod preprocess;
pub mod seeding;
pub mod simstudy;
pub mod stattests;
