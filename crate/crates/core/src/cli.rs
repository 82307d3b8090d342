//! Command-line front end: argument and config-file parsing, output files.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::experiments::{self, Experiment, ExperimentConfig, Rendered};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "policy-landscape", version, about = "Policy-gradient convergence experiments and verification batches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Softmax policy descent on a random tabular MDP.
    Tabular(Flags),
    /// Threshold-policy descent on a random optimal-stopping instance.
    Stopping(Flags),
    /// Gain descent on a random discounted LQR system.
    Lqr(Flags),
    /// Base-stock descent on the sample-average inventory cost.
    Inventory(Flags),
    /// Descent-direction inequality on random MDPs and parameters.
    VerifyDescent(Flags),
    /// Approximation-error bounds for state-aggregated policies.
    VerifyApproximation(Flags),
    /// Soft policy-iteration improvement bound.
    #[command(name = "verify-softpi")]
    VerifySoftPi(Flags),
    /// Single-stage descent directions for base-stock policies.
    VerifyFiniteHorizon(Flags),
    /// Score-function estimator against the exact gradient.
    ReinforceCheck(Flags),
}

/// Values stay as strings so every parse error can name its field.
#[derive(Debug, Args)]
struct Flags {
    /// `key = value` file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV path; the sidecar is written next to it with a `.meta` suffix.
    #[arg(long)]
    output: Option<String>,
    /// Worker threads for Monte Carlo loops (does not affect results).
    #[arg(long)]
    threads: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    n_states: Option<String>,
    #[arg(long)]
    n_actions: Option<String>,
    #[arg(long)]
    n_contexts: Option<String>,
    #[arg(long)]
    n_offers: Option<String>,
    #[arg(long)]
    state_dim: Option<String>,
    #[arg(long)]
    input_dim: Option<String>,
    #[arg(long)]
    horizon: Option<String>,
    #[arg(long)]
    order_cost: Option<String>,
    #[arg(long)]
    holding_cost: Option<String>,
    #[arg(long)]
    backlog_cost: Option<String>,
    #[arg(long)]
    demand_max: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    grad_tol: Option<String>,
    #[arg(long)]
    max_iters: Option<String>,
    #[arg(long)]
    n_paths: Option<String>,
    #[arg(long)]
    eval_paths: Option<String>,
    /// Number of verification cases.
    #[arg(long)]
    n: Option<String>,
}

impl Flags {
    fn overrides(&self) -> Vec<(&'static str, &String)> {
        let all = [
            ("output", &self.output),
            ("threads", &self.threads),
            ("seed", &self.seed),
            ("gamma", &self.gamma),
            ("n_states", &self.n_states),
            ("n_actions", &self.n_actions),
            ("n_contexts", &self.n_contexts),
            ("n_offers", &self.n_offers),
            ("state_dim", &self.state_dim),
            ("input_dim", &self.input_dim),
            ("horizon", &self.horizon),
            ("order_cost", &self.order_cost),
            ("holding_cost", &self.holding_cost),
            ("backlog_cost", &self.backlog_cost),
            ("demand_max", &self.demand_max),
            ("beta", &self.beta),
            ("grad_tol", &self.grad_tol),
            ("max_iters", &self.max_iters),
            ("n_paths", &self.n_paths),
            ("eval_paths", &self.eval_paths),
            ("n", &self.n),
        ];
        all.into_iter().filter_map(|(k, v)| v.as_ref().map(|v| (k, v))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid config field `{}`: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { field: field.to_string(), message: message.into() }
}

/// Everything a run needs: experiment settings plus output plumbing.
#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub config: ExperimentConfig,
    pub output: PathBuf,
    pub threads: Option<usize>,
}

impl Invocation {
    pub fn new(experiment: Experiment) -> Self {
        Self {
            config: ExperimentConfig::defaults(experiment),
            output: PathBuf::from(format!("{}.csv", experiment.name())),
            threads: None,
        }
    }

    /// Sets one field from its textual value. Keys use underscores; dashes are accepted too.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let c = &mut self.config;
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value.parse().map_err(|_| config_err(key, format!("cannot parse `{value}`")))
        }
        match key.as_str() {
            "experiment" => {
                if value != c.experiment.name() {
                    return Err(config_err("experiment", format!("config names `{value}` but `{}` was invoked", c.experiment.name())));
                }
            }
            "output" | "output_path" => self.output = PathBuf::from(value),
            "threads" => {
                let t: usize = num(&key, value)?;
                if t == 0 {
                    return Err(config_err("threads", "must be at least 1"));
                }
                self.threads = Some(t);
            }
            "seed" => c.seed = num(&key, value)?,
            "gamma" => c.gamma = num(&key, value)?,
            "n_states" => c.n_states = num(&key, value)?,
            "n_actions" => c.n_actions = num(&key, value)?,
            "n_contexts" => c.n_contexts = num(&key, value)?,
            "n_offers" => c.n_offers = num(&key, value)?,
            "state_dim" => c.state_dim = num(&key, value)?,
            "input_dim" => c.input_dim = num(&key, value)?,
            "horizon" => c.horizon = num(&key, value)?,
            "order_cost" => c.order_cost = num(&key, value)?,
            "holding_cost" => c.holding_cost = num(&key, value)?,
            "backlog_cost" => c.backlog_cost = num(&key, value)?,
            "demand_max" => c.demand_max = num(&key, value)?,
            "beta" => c.beta = num(&key, value)?,
            "grad_tol" => c.grad_tol = num(&key, value)?,
            "max_iters" => c.max_iters = num(&key, value)?,
            "n_paths" => c.n_paths = num(&key, value)?,
            "eval_paths" => c.eval_paths = num(&key, value)?,
            "n" => c.n = num(&key, value)?,
            _ => return Err(config_err(&key, "unknown key")),
        }
        Ok(())
    }

    /// Applies a `key = value` file; `#` starts a comment.
    pub fn apply_config_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(config_err(line, format!("line {} is not `key = value`", lineno + 1)));
            };
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.config.validate().map_err(|(field, message)| ConfigError { field, message })
    }

    pub fn meta_path(&self) -> PathBuf {
        meta_path(&self.output)
    }
}

pub fn meta_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Parses arguments (without running). `Ok(None)` means help or version was printed.
pub fn parse_args<I, T>(args: I) -> Result<Option<Invocation>, ConfigError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return Ok(None);
        }
        Err(e) => return Err(config_err("arguments", e.to_string().trim_end().to_string())),
    };
    let (experiment, flags) = match cli.command {
        Command::Tabular(f) => (Experiment::Tabular, f),
        Command::Stopping(f) => (Experiment::Stopping, f),
        Command::Lqr(f) => (Experiment::Lqr, f),
        Command::Inventory(f) => (Experiment::Inventory, f),
        Command::VerifyDescent(f) => (Experiment::VerifyDescent, f),
        Command::VerifyApproximation(f) => (Experiment::VerifyApproximation, f),
        Command::VerifySoftPi(f) => (Experiment::VerifySoftPi, f),
        Command::VerifyFiniteHorizon(f) => (Experiment::VerifyFiniteHorizon, f),
        Command::ReinforceCheck(f) => (Experiment::ReinforceCheck, f),
    };
    let mut inv = Invocation::new(experiment);
    if let Some(path) = &flags.config {
        let text = fs::read_to_string(path).map_err(|e| config_err("config", format!("cannot read {}: {e}", path.display())))?;
        inv.apply_config_text(&text)?;
    }
    for (key, value) in flags.overrides() {
        inv.set(key, value)?;
    }
    inv.validate()?;
    Ok(Some(inv))
}

fn sidecar(inv: &Invocation, rendered: &Rendered) -> String {
    let mut text = format!("output={}\n", inv.output.display());
    for (k, v) in &rendered.meta {
        text.push_str(&format!("{k}={v}\n"));
    }
    text
}

/// Runs a parsed invocation and writes both files. Returns the exit code.
pub fn execute(inv: &Invocation) -> i32 {
    let run = || experiments::run(&inv.config);
    let result = match inv.threads {
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(run),
            Err(e) => {
                eprintln!("error: cannot start {t} threads: {e}");
                return EXIT_RUNTIME;
            }
        },
        None => run(),
    };
    let (rendered, failure) = match result {
        Ok(r) => {
            let failure = r.failure.clone();
            (r, failure)
        }
        Err(e) => {
            let mut r = Rendered { csv: format!("{}\n", inv.config.experiment.csv_header()), ..Rendered::default() };
            for (k, v) in inv.config.entries() {
                r.meta.push((k.to_string(), v));
            }
            r.meta.push(("version".into(), env!("CARGO_PKG_VERSION").into()));
            (r, Some(e.to_string()))
        }
    };
    if let Err(e) = fs::write(&inv.output, &rendered.csv) {
        eprintln!("error: cannot write {}: {e}", inv.output.display());
        return EXIT_RUNTIME;
    }
    let mut meta = sidecar(inv, &rendered);
    if let Some(f) = &failure {
        meta.push_str(&format!("failure={f}\n"));
    }
    if let Err(e) = fs::write(inv.meta_path(), meta) {
        eprintln!("error: cannot write {}: {e}", inv.meta_path().display());
        return EXIT_RUNTIME;
    }
    let mut stdout = std::io::stdout().lock();
    for line in &rendered.summary {
        let _ = writeln!(stdout, "{}: {line}", inv.config.experiment.name());
    }
    let _ = writeln!(stdout, "wrote {} and {}", inv.output.display(), inv.meta_path().display());
    match failure {
        Some(f) => {
            eprintln!("error: {f}");
            EXIT_RUNTIME
        }
        None => EXIT_OK,
    }
}

/// Entry point used by the binary.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match parse_args(args) {
        Ok(Some(inv)) => execute(&inv),
        Ok(None) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}
