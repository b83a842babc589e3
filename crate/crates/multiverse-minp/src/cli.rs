//! Command-line surface: data generation, multiverse execution with
//! adjustment, and the simulation studies, driven by flags plus an optional
//! declarative TOML config (flags win).
//!
//! Exit codes: 0 success, 2 usage/config error, 3 data/file validation
//! error, 4 internal numeric failure. Significance is data, not status: a
//! run that rejects nothing still exits 0.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adjust::{adjust_all, AdjustError, AdjustmentReport};
use crate::dataset::{generate, load_csv, save_csv, DataError, GenConfig};
use crate::multiverse::{MultiverseError, SpecTree};
use crate::simstudy::{
    run_fwer_study, run_power_study, FwerStudyConfig, PowerStudyConfig, SimStudyError,
};

/// Environment variable supplying the default worker budget.
pub const WORKERS_ENV: &str = "MVMINP_WORKERS";

/// Default signal strength (log-odds per 100 mmHg) for the power study; at
/// n = 100 this puts the unadjusted mean significant proportion in the
/// middle of the unit interval.
pub const DEFAULT_POWER_EFFECT: f64 = 1.4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

fn classify_data(err: DataError) -> CliError {
    match err {
        DataError::InvalidConfig(_) => CliError::Config(err.to_string()),
        _ => CliError::Data(err.to_string()),
    }
}

fn classify_multiverse(err: MultiverseError) -> CliError {
    match err {
        MultiverseError::Data(data) => classify_data(data),
        MultiverseError::EmptyTree
        | MultiverseError::EmptyAxis(_)
        | MultiverseError::DuplicateAxis(_)
        | MultiverseError::DuplicateOption { .. }
        | MultiverseError::UnknownAxis(_)
        | MultiverseError::UnknownOption { .. }
        | MultiverseError::EmptyEnumeration => CliError::Config(err.to_string()),
        other => CliError::Numeric(other.to_string()),
    }
}

fn classify_adjust(err: AdjustError) -> CliError {
    match err {
        AdjustError::Multiverse(m) => classify_multiverse(m),
        AdjustError::ZeroPermutations | AdjustError::DimensionMismatch { .. } => {
            CliError::Config(err.to_string())
        }
        AdjustError::Io(io) => CliError::Data(io.to_string()),
        AdjustError::Csv(csv) => CliError::Data(csv.to_string()),
    }
}

fn classify_simstudy(err: SimStudyError) -> CliError {
    match err {
        SimStudyError::InvalidConfig(msg) => CliError::Config(msg),
        SimStudyError::Data(data) => classify_data(data),
        SimStudyError::Adjust(adjust) => classify_adjust(adjust),
        SimStudyError::Csv(csv) => CliError::Data(csv.to_string()),
        SimStudyError::Io(io) => CliError::Data(io.to_string()),
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "mvminp",
    about = "Run a tree of analysis specifications and adjust the p-values for the implied multiplicity (Bonferroni, Holm, permutation minP)",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic long-format dataset and write it as CSV.
    GenData(GenDataArgs),
    /// Run every specification on one dataset and write adjusted reports.
    Run(RunArgs),
    /// Monte-Carlo studies of the adjustment procedures.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of cases.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Log-odds of the outcome per 100 mmHg of mean exposure (0 = null).
    #[arg(long, default_value_t = 0.0)]
    pub effect: f64,
    #[arg(long, default_value_t = 0.15)]
    pub missing_rate: f64,
    #[arg(long, default_value_t = 3)]
    pub proxies: usize,
    /// Noise scale of the first proxy in mmHg (proxy j gets j times this).
    #[arg(long, default_value_t = crate::dataset::DEFAULT_PROXY_NOISE)]
    pub proxy_noise: f64,
    /// Minimum measurement rows per case.
    #[arg(long, default_value_t = 2)]
    pub meas_min: usize,
    /// Maximum measurement rows per case.
    #[arg(long, default_value_t = 4)]
    pub meas_max: usize,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Default)]
pub struct RunArgs {
    /// Declarative TOML config; command-line flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input dataset (long-format CSV). Exactly one of --input or a
    /// generator (flag or config block) must be present.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Generate the input instead of reading it: number of cases.
    #[arg(long)]
    pub gen_n: Option<usize>,
    /// Generator effect size (log-odds per 100 mmHg).
    #[arg(long)]
    pub gen_effect: Option<f64>,
    /// Generator missing rate.
    #[arg(long)]
    pub gen_missing_rate: Option<f64>,
    /// Generator seed (defaults to the master seed).
    #[arg(long)]
    pub gen_seed: Option<u64>,
    /// Number of outcome permutations for minP.
    #[arg(long = "B", alias = "permutations")]
    pub b: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Master seed for permutations and all specification-stage draws.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Worker budget (0 = all cores); also settable via MVMINP_WORKERS.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Count each distinct effective pipeline once toward m.
    #[arg(long)]
    pub collapse_duplicates: bool,
    /// Include the Holm baseline in the stdout table.
    #[arg(long)]
    pub holm: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(subcommand)]
    pub study: StudyCommand,
}

#[derive(Debug, Subcommand)]
pub enum StudyCommand {
    /// Family-wise error rate under the global null.
    Fwer(FwerArgs),
    /// Proportion of significant specifications under signal.
    Power(PowerArgs),
}

#[derive(Debug, Args, Default)]
pub struct FwerArgs {
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long = "B", alias = "permutations")]
    pub b: Option<usize>,
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Vec<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Use the full-scale design (1000 runs, B = 1000, sizes up to 3000).
    #[arg(long)]
    pub paper_scale: bool,
}

#[derive(Debug, Args, Default)]
pub struct PowerArgs {
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long = "B", alias = "permutations")]
    pub b: Option<usize>,
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Vec<usize>,
    /// Comma-separated alpha levels.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Vec<f64>,
    /// Generator effect size (log-odds per 100 mmHg).
    #[arg(long)]
    pub effect: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
}

/// Declarative run configuration (TOML).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub seed: Option<u64>,
    #[serde(alias = "B")]
    pub permutations: Option<usize>,
    pub alpha: Option<f64>,
    pub output_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub input: Option<InputBlock>,
    pub generator: Option<GenConfig>,
    pub tree: Option<TreeBlock>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputBlock {
    pub path: PathBuf,
}

/// Tree block of the config file: any omitted axis keeps the full default
/// option set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeBlock {
    pub missing: Option<Vec<String>>,
    pub surrogate: Option<Vec<String>>,
    pub tuning: Option<Vec<String>>,
    pub aggregation: Option<Vec<String>>,
    pub coding: Option<Vec<String>>,
    #[serde(default)]
    pub exclude: Vec<BTreeMap<String, String>>,
    #[serde(default)]
    pub collapse_duplicates: bool,
}

impl TreeBlock {
    pub fn to_spec_tree(&self) -> SpecTree {
        let mut tree = SpecTree::default();
        let overrides = [
            (&self.missing, 0usize),
            (&self.surrogate, 1),
            (&self.tuning, 2),
            (&self.aggregation, 3),
            (&self.coding, 4),
        ];
        for (options, idx) in overrides {
            if let Some(options) = options {
                tree.axes[idx].options = options.clone();
            }
        }
        tree.exclusions = self.exclude.clone();
        tree.collapse_duplicates = self.collapse_duplicates;
        tree
    }
}

/// Data source of a run: exactly one of the two.
#[derive(Debug, Clone)]
pub enum DataSource {
    Input(PathBuf),
    Generator(GenConfig),
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub source: DataSource,
    pub tree: SpecTree,
    pub b: usize,
    pub alpha: f64,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub workers: usize,
    pub show_holm: bool,
}

impl RunConfig {
    /// Merge the optional config file with the flags; flags win.
    pub fn resolve(args: &RunArgs) -> Result<Self, CliError> {
        let file: RunConfigFile = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    CliError::Config(format!("cannot read config {}: {e}", path.display()))
                })?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Config(format!("invalid config: {e}")))?
            }
            None => RunConfigFile::default(),
        };

        let master_seed = args.seed.or(file.seed).unwrap_or(0);

        let flag_generator = args.gen_n.is_some()
            || args.gen_effect.is_some()
            || args.gen_missing_rate.is_some()
            || args.gen_seed.is_some();
        let input = args
            .input
            .clone()
            .or_else(|| file.input.as_ref().map(|i| i.path.clone()));
        let generator = if flag_generator {
            let base = file.generator.clone().unwrap_or(GenConfig::with_seed(master_seed));
            Some(GenConfig {
                n_cases: args.gen_n.unwrap_or(base.n_cases),
                effect_size: args.gen_effect.unwrap_or(base.effect_size),
                missing_rate: args.gen_missing_rate.unwrap_or(base.missing_rate),
                seed: args.gen_seed.unwrap_or(base.seed),
                ..base
            })
        } else {
            file.generator.clone()
        };

        let source = match (input, generator) {
            (Some(path), None) => DataSource::Input(path),
            (None, Some(gen)) => DataSource::Generator(gen),
            (Some(_), Some(_)) => {
                return Err(CliError::Config(
                    "exactly one of input and generator must be configured, got both".into(),
                ))
            }
            (None, None) => {
                return Err(CliError::Config(
                    "no data source: provide --input/--gen-n or an [input]/[generator] config block"
                        .into(),
                ))
            }
        };

        let mut tree = file
            .tree
            .as_ref()
            .map(TreeBlock::to_spec_tree)
            .unwrap_or_default();
        if args.collapse_duplicates {
            tree.collapse_duplicates = true;
        }

        let b = args.b.or(file.permutations).unwrap_or(200);
        let alpha = args.alpha.or(file.alpha).unwrap_or(0.05);
        let config = RunConfig {
            source,
            tree,
            b,
            alpha,
            master_seed,
            output_dir: args
                .out_dir
                .clone()
                .or(file.output_dir)
                .unwrap_or_else(|| PathBuf::from("mvminp_out")),
            workers: resolve_workers(args.workers.or(file.workers)),
            show_holm: args.holm,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.b == 0 {
            return Err(CliError::Config("B must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CliError::Config(format!(
                "alpha must be in (0, 1), got {}",
                self.alpha
            )));
        }
        if let DataSource::Generator(gen) = &self.source {
            gen.validate().map_err(classify_data)?;
        }
        Ok(())
    }
}

fn resolve_workers(explicit: Option<usize>) -> usize {
    explicit.unwrap_or_else(|| {
        std::env::var(WORKERS_ENV)
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(0)
    })
}

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if workers > 0 {
        builder = builder.num_threads(workers);
    }
    builder
        .build()
        .map_err(|e| CliError::Config(format!("cannot build worker pool: {e}")))
}

/// Exclusive lock on an output directory, released on drop. Prevents
/// concurrent invocations from interleaving writes into the same directory.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(".mvminp.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                let _ = writeln!(file, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Config(
                format!(
                    "output directory {} is locked by another invocation (remove {} if stale)",
                    dir.display(),
                    path.display()
                ),
            )),
            Err(e) => Err(CliError::Data(format!(
                "cannot create lock {}: {e}",
                path.display()
            ))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// `gen-data`: write a synthetic dataset; prints case count and realized
/// missing rate.
pub fn cmd_gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let config = GenConfig {
        n_cases: args.n,
        measurements_per_case: (args.meas_min, args.meas_max),
        missing_rate: args.missing_rate,
        n_proxies: args.proxies,
        proxy_noise: args.proxy_noise,
        effect_size: args.effect,
        seed: args.seed,
    };
    let table = generate(&config).map_err(classify_data)?;
    save_csv(&table, &args.out).map_err(classify_data)?;
    let realized = table.n_missing() as f64 / table.n_measurements() as f64;
    println!(
        "wrote {} cases ({} measurement rows, realized missing rate {:.4}) to {}",
        table.n_cases(),
        table.n_measurements(),
        realized,
        args.out.display()
    );
    Ok(())
}

fn load_table(source: &DataSource) -> Result<crate::dataset::CaseTable, CliError> {
    match source {
        DataSource::Input(path) => {
            if !path.exists() {
                return Err(CliError::Config(format!(
                    "input file {} does not exist",
                    path.display()
                )));
            }
            load_csv(path).map_err(classify_data)
        }
        DataSource::Generator(gen) => generate(gen).map_err(classify_data),
    }
}

fn write_run_outputs(report: &AdjustmentReport, dir: &Path) -> Result<(), CliError> {
    let as_data = |e: std::io::Error| CliError::Data(e.to_string());
    let pvalues = fs::File::create(dir.join("pvalues.csv")).map_err(as_data)?;
    report
        .raw
        .write_csv(std::io::BufWriter::new(pvalues))
        .map_err(classify_multiverse)?;
    let report_csv = fs::File::create(dir.join("report.csv")).map_err(as_data)?;
    report
        .write_csv(std::io::BufWriter::new(report_csv))
        .map_err(classify_adjust)?;
    let summary = fs::File::create(dir.join("summary.json")).map_err(as_data)?;
    report
        .write_summary_json(std::io::BufWriter::new(summary))
        .map_err(classify_adjust)?;
    Ok(())
}

/// `run`: execute the tree on one dataset, write `pvalues.csv`,
/// `report.csv` and `summary.json`, and print the headline table with the
/// minP-adjusted smallest p-value first.
pub fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let config = RunConfig::resolve(args)?;
    let _lock = DirLock::acquire(&config.output_dir)?;
    let pool = worker_pool(config.workers)?;

    let table = load_table(&config.source)?;
    let report = pool
        .install(|| adjust_all(&table, &config.tree, config.b, config.alpha, config.master_seed))
        .map_err(classify_adjust)?;
    write_run_outputs(&report, &config.output_dir)?;

    let summary = report.summary();
    println!(
        "m = {} specifications, B = {} permutations, alpha = {}, seed = {}",
        summary.m, summary.b, summary.alpha, summary.seed
    );
    println!(
        "smallest raw p-value: spec {} ({})",
        summary.p1_spec_id,
        summary.p1_spec_path.join("/")
    );
    println!();
    println!("  minP-adjusted p(1):       {:.6}", summary.minp_p1);
    println!("  raw (unadjusted) p(1):    {:.6}", summary.raw_p1);
    println!("  bonferroni-adjusted p(1): {:.6}", summary.bonferroni_p1);
    if config.show_holm {
        println!("  holm-adjusted p(1):       {:.6}", summary.holm_p1);
    }
    println!();
    println!(
        "minP rejections at alpha={}: {} of {}",
        summary.alpha, summary.n_rejected_minp, summary.m
    );
    println!(
        "wrote {dir}/pvalues.csv, {dir}/report.csv, {dir}/summary.json",
        dir = config.output_dir.display()
    );
    Ok(())
}

/// `simulate fwer|power`: run a study and write its results CSV.
pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    match &args.study {
        StudyCommand::Fwer(fwer) => {
            let mut config = if fwer.paper_scale {
                FwerStudyConfig::paper_scale(fwer.seed)
            } else {
                FwerStudyConfig::desk_scale(fwer.seed)
            };
            if let Some(runs) = fwer.runs {
                config.runs = runs;
            }
            if let Some(b) = fwer.b {
                config.b = b;
            }
            if !fwer.sizes.is_empty() {
                config.sample_sizes = fwer.sizes.clone();
            }
            if let Some(alpha) = fwer.alpha {
                config.alpha = alpha;
            }
            let out_dir = fwer
                .out_dir
                .clone()
                .unwrap_or_else(|| PathBuf::from("mvminp_out"));
            let _lock = DirLock::acquire(&out_dir)?;
            let pool = worker_pool(resolve_workers(fwer.workers))?;
            eprintln!(
                "fwer study: sizes {:?}, {} runs, B = {}, alpha = {}, seed = {}",
                config.sample_sizes, config.runs, config.b, config.alpha, config.master_seed
            );
            let result = pool
                .install(|| run_fwer_study(&config, &SpecTree::default()))
                .map_err(classify_simstudy)?;
            let path = out_dir.join("fwer.csv");
            let file = fs::File::create(&path).map_err(|e| CliError::Data(e.to_string()))?;
            result
                .write_csv(std::io::BufWriter::new(file))
                .map_err(classify_simstudy)?;
            eprintln!("done");
            println!("wrote {}", path.display());
            Ok(())
        }
        StudyCommand::Power(power) => {
            let effect = power.effect.unwrap_or(DEFAULT_POWER_EFFECT);
            let mut config = PowerStudyConfig::desk_scale(power.seed, effect);
            if let Some(runs) = power.runs {
                config.runs = runs;
            }
            if let Some(b) = power.b {
                config.b = b;
            }
            if !power.sizes.is_empty() {
                config.sample_sizes = power.sizes.clone();
            }
            if !power.alphas.is_empty() {
                config.alphas = power.alphas.clone();
            }
            let out_dir = power
                .out_dir
                .clone()
                .unwrap_or_else(|| PathBuf::from("mvminp_out"));
            let _lock = DirLock::acquire(&out_dir)?;
            let pool = worker_pool(resolve_workers(power.workers))?;
            eprintln!(
                "power study: sizes {:?}, alphas {:?}, {} runs, B = {}, effect = {}, seed = {}",
                config.sample_sizes,
                config.alphas,
                config.runs,
                config.b,
                config.generator.effect_size,
                config.master_seed
            );
            let result = pool
                .install(|| run_power_study(&config, &SpecTree::default()))
                .map_err(classify_simstudy)?;
            let path = out_dir.join("power.csv");
            let file = fs::File::create(&path).map_err(|e| CliError::Data(e.to_string()))?;
            result
                .write_csv(std::io::BufWriter::new(file))
                .map_err(classify_simstudy)?;
            eprintln!("done");
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

/// Route a parsed command line to its implementation.
pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Run(args) => cmd_run(args),
        Command::Simulate(args) => cmd_simulate(args),
    }
}
