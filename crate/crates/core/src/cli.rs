//! Command-line front end: configuration files, output directories,
//! manifests and the subcommand pipelines.
//!
//! Every value can come from a flag or from a `[section]`/`key=value`
//! configuration file; flags win. The fully resolved configuration is echoed
//! into `config.ini` and `manifest.json` in the output directory, so
//! `pam-lab <subcommand> --config <out>/config.ini` reproduces a run.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::experiments::{
    condition_p_report, exponent_diagnostics, lemma_alpha_ratio, limit_plot_rows, momente_check,
    slln_experiment, slln_plot_rows, stable_limit_experiment, write_plot_csv, Budget,
    ExperimentConfig, PlotRow, SllnConfig,
};
use crate::lattice::{HamiltonianOperator, LatticeBox, PotentialField};
use crate::potential::PotentialSpec;
use crate::quadrature::QuadratureConfig;
use crate::rng::{RngStream, DERIVATION};
use crate::scalings::{make_bundle, ChiPolicy};
use crate::solver::{
    block_decompose_and_solve, feynman_kac_mc, solve_ode, solve_spectral, write_blocks_csv,
};
use crate::stable_law::{InversionConfig, StableLaw};

pub const OUT_ENV: &str = "PAM_LAB_OUT";
pub const DEFAULT_OUT: &str = "pam-lab-out";

/// Flat `[section]` + `key=value` configuration text.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigFile {
    pub sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ConfigFile {
    /// Blank lines and lines starting with `#` or `;` are ignored; keys
    /// before the first header belong to the section `""`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ConfigFile::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| {
                    Error::Config(format!("line {}: unterminated section header", n + 1))
                })?;
                section = name.trim().to_string();
                cfg.sections.entry(section.clone()).or_default();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1))
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            cfg.sections
                .entry(section.clone())
                .or_default()
                .insert(k.to_string(), v.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.into());
    }
}

impl fmt::Display for ConfigFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (name, entries) in &self.sections {
            if !first {
                writeln!(f)?;
            }
            first = false;
            writeln!(f, "[{name}]")?;
            for (k, v) in entries {
                writeln!(f, "{k}={v}")?;
            }
        }
        Ok(())
    }
}

/// Written next to every set of outputs.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_path: Option<String>,
    pub config_echo: String,
    pub master_seed: u64,
    pub rng_derivation: String,
    pub output_directory: String,
    pub artifact_version: String,
    pub wall_clock_seconds: f64,
}

#[derive(Parser, Debug)]
#[command(
    name = "pam-lab",
    version,
    about = "Numerical laboratory for the parabolic Anderson model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Configuration file with [section] and key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides PAM_LAB_OUT and the config file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; default is the hardware parallelism.
    #[arg(long)]
    workers: Option<usize>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
struct Model {
    /// weibull or double-exponential.
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    d: Option<usize>,
    /// Explicit χ; by default the endpoint value for ρ ∈ {0, ∞}.
    #[arg(long)]
    chi: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
struct BudgetArgs {
    #[arg(long)]
    max_sites_per_replica: Option<u64>,
    #[arg(long)]
    max_total_sites: Option<u64>,
    #[arg(long)]
    max_solver_sites: Option<u64>,
    #[arg(long)]
    max_paths: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve on one box with the Krylov, spectral and/or Feynman–Kac solvers.
    Solve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: Model,
        /// Box radius.
        #[arg(long)]
        r: Option<f64>,
        #[arg(long)]
        t: Option<f64>,
        /// ode, spectral, fk or all.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        paths: Option<usize>,
        /// Read the potential from a CSV file instead of sampling it.
        #[arg(long)]
        field: Option<PathBuf>,
        /// Also write block statistics for tiles of this radius.
        #[arg(long)]
        block_l: Option<f64>,
    },
    /// Print the scaling functions at one time.
    Scalings {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: Model,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        t: Option<f64>,
    },
    /// Tabulate the distribution function and density of F_α.
    Stable {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        x_min: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        x_max: Option<f64>,
        #[arg(long)]
        points: Option<usize>,
    },
    /// Stable limit of rescaled spatial sums.
    LimitExp {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: Model,
        #[command(flatten)]
        budget: BudgetArgs,
        #[arg(long)]
        alpha: Option<f64>,
        /// Comma-separated times.
        #[arg(long)]
        t_grid: Option<String>,
        #[arg(long)]
        replicas: Option<usize>,
    },
    /// Strong law of large numbers for normalised spatial averages.
    SllnExp {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: Model,
        #[command(flatten)]
        budget: BudgetArgs,
        #[arg(long)]
        t_grid: Option<String>,
        #[arg(long)]
        replicas: Option<usize>,
        /// Sites per box; by default chosen from the variance bound.
        #[arg(long)]
        sites: Option<u64>,
        #[arg(long)]
        margin: Option<f64>,
        #[arg(long)]
        band: Option<f64>,
    },
    /// Deterministic Condition P report.
    Condp {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: Model,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        t_grid: Option<String>,
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Quenched exponents on Q_t.
    Diagnostics {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: Model,
        #[command(flatten)]
        budget: BudgetArgs,
        #[arg(long)]
        t_grid: Option<String>,
        #[arg(long)]
        replicas: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Solve { .. } => "solve",
            Command::Scalings { .. } => "scalings",
            Command::Stable { .. } => "stable",
            Command::LimitExp { .. } => "limit-exp",
            Command::SllnExp { .. } => "slln-exp",
            Command::Condp { .. } => "condp",
            Command::Diagnostics { .. } => "diagnostics",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Solve { common, .. }
            | Command::Scalings { common, .. }
            | Command::Stable { common, .. }
            | Command::LimitExp { common, .. }
            | Command::SllnExp { common, .. }
            | Command::Condp { common, .. }
            | Command::Diagnostics { common, .. } => common,
        }
    }
}

/// Config values with command-line overrides applied; defaults are written
/// back so the echo is complete.
struct Settings {
    cfg: ConfigFile,
}

impl Settings {
    fn over<T: ToString>(&mut self, section: &str, key: &str, v: &Option<T>) {
        if let Some(v) = v {
            self.cfg.set(section, key, v.to_string());
        }
    }

    fn parse<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.cfg.get(section, key) {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("cannot parse [{section}] {key} = {s:?}"))),
        }
    }

    fn with_default<T: FromStr + ToString>(
        &mut self,
        section: &str,
        key: &str,
        default: T,
    ) -> Result<T> {
        match self.parse(section, key)? {
            Some(v) => Ok(v),
            None => {
                self.cfg.set(section, key, default.to_string());
                Ok(default)
            }
        }
    }

    fn required<T: FromStr>(&self, section: &str, key: &str) -> Result<T> {
        self.parse(section, key)?.ok_or_else(|| {
            Error::Config(format!(
                "missing required value --{} (or `{key}` in section [{section}] of the config file)",
                key.replace('_', "-")
            ))
        })
    }

    fn grid(&self, section: &str, key: &str) -> Result<Vec<f64>> {
        let raw: String = self.required(section, key)?;
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad entry {s:?} in {key}")))
            })
            .collect()
    }

    fn model(&mut self, m: &Model) {
        self.over("potential", "family", &m.family);
        self.over("potential", "gamma", &m.gamma);
        self.over("potential", "rho", &m.rho);
        self.over("model", "kappa", &m.kappa);
        self.over("model", "d", &m.d);
        self.over("model", "chi", &m.chi);
    }

    fn budget_flags(&mut self, b: &BudgetArgs) {
        self.over("budget", "max_sites_per_replica", &b.max_sites_per_replica);
        self.over("budget", "max_total_sites", &b.max_total_sites);
        self.over("budget", "max_solver_sites", &b.max_solver_sites);
        self.over("budget", "max_paths", &b.max_paths);
    }

    fn spec(&mut self) -> Result<PotentialSpec> {
        let family = self.with_default("potential", "family", "weibull".to_string())?;
        match family.as_str() {
            "weibull" => PotentialSpec::weibull(self.with_default("potential", "gamma", 2.0)?),
            "double-exponential" | "double_exponential" | "double-exp" => {
                PotentialSpec::double_exponential(self.required("potential", "rho")?)
            }
            other => Err(Error::Config(format!(
                "unknown family {other:?} (weibull or double-exponential)"
            ))),
        }
    }

    /// `(kappa, d, chi)` with χ resolved and echoed.
    fn geometry(&mut self, spec: &PotentialSpec) -> Result<(f64, usize, f64)> {
        let kappa = self.with_default("model", "kappa", 0.0)?;
        let d = self.with_default("model", "d", 1usize)?;
        let chi = match self.parse::<f64>("model", "chi")? {
            Some(c) => c,
            None => {
                let c = ChiPolicy::Endpoint.resolve(spec, kappa, d)?;
                self.cfg.set("model", "chi", c.to_string());
                c
            }
        };
        Ok((kappa, d, chi))
    }

    fn budget(&mut self) -> Result<Budget> {
        let b = Budget::default();
        Ok(Budget {
            max_sites_per_replica: self.with_default(
                "budget",
                "max_sites_per_replica",
                b.max_sites_per_replica,
            )?,
            max_total_sites: self.with_default("budget", "max_total_sites", b.max_total_sites)?,
            max_solver_sites: self.with_default(
                "budget",
                "max_solver_sites",
                b.max_solver_sites,
            )?,
            max_paths: self.with_default("budget", "max_paths", b.max_paths)?,
        })
    }
}

/// Runs the command line `argv` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    let name = cli.command.name();
    let start = Instant::now();
    let mut out_dir = None;
    let result = prepare(&cli.command).and_then(|(settings, dir)| {
        out_dir = Some(dir.clone());
        let workers = cli.command.common().workers;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.unwrap_or(0))
            .build()
            .map_err(|e| Error::Config(format!("cannot start {workers:?} workers: {e}")))?;
        let mut buf = Vec::new();
        let r = pool.install(|| execute(&cli.command, settings, &dir, &mut buf, start));
        out.write_all(&buf)?;
        r
    });
    match result {
        Ok(()) => 0,
        Err(e) if e.is_config() || matches!(e, Error::Io(_)) => {
            let _ = writeln!(err, "error: {e}");
            if let Some(sub) = Cli::command().find_subcommand_mut(name) {
                let _ = writeln!(err, "\n{}", sub.render_usage());
            }
            1
        }
        Err(e) => {
            let _ = writeln!(err, "numerical failure: {e}");
            if let Some(dir) = out_dir {
                let report = serde_json::json!({
                    "subcommand": name,
                    "error": e.to_string(),
                    "kind": error_kind(&e),
                });
                if fs::create_dir_all(&dir).is_ok() {
                    if let Ok(text) = serde_json::to_string_pretty(&report) {
                        let _ = fs::write(dir.join("failure.json"), text + "\n");
                    }
                }
            }
            2
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Domain(_) => "domain",
        Error::Config(_) => "config",
        Error::Quadrature { .. } => "quadrature",
        Error::NoConvergence { .. } => "no_convergence",
        Error::StiffFailure { .. } => "stiff_failure",
        Error::SizeLimit { .. } => "size_limit",
        Error::IndexMismatch(_) => "index_mismatch",
        Error::Budget(_) => "budget",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

/// Loads the config file, applies flag overrides and picks the output
/// directory: `--out`, then `PAM_LAB_OUT`, then `[run] out`, then the default.
fn prepare(cmd: &Command) -> Result<(Settings, PathBuf)> {
    let common = cmd.common();
    let cfg = match &common.config {
        Some(p) => ConfigFile::read(p)?,
        None => ConfigFile::default(),
    };
    let mut s = Settings { cfg };
    s.over("run", "seed", &common.seed);
    let dir = common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .or_else(|| s.cfg.get("run", "out").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    // the echo must not depend on where outputs went
    if let Some(run) = s.cfg.sections.get_mut("run") {
        run.remove("out");
    }
    Ok((s, dir))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Trims float noise below 1e-12 relative for human-readable output.
fn fmt_num(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let s = format!("{:.12e}", x);
    let v: f64 = s.parse().unwrap_or(x);
    v.to_string()
}

fn execute(
    cmd: &Command,
    mut s: Settings,
    dir: &Path,
    out: &mut Vec<u8>,
    start: Instant,
) -> Result<()> {
    let quad = QuadratureConfig::default();
    // resolve everything before touching the filesystem so that config
    // errors leave no partial output
    enum Job {
        Solve {
            spec: PotentialSpec,
            kappa: f64,
            d: usize,
            r: f64,
            t: f64,
            method: String,
            paths: usize,
            field: Option<PathBuf>,
            block_l: Option<f64>,
        },
        Scalings {
            spec: PotentialSpec,
            kappa: f64,
            d: usize,
            chi: f64,
            alpha: f64,
            t: f64,
        },
        Stable {
            alpha: f64,
            x_min: f64,
            x_max: f64,
            points: usize,
        },
        Limit(ExperimentConfig),
        Slln(SllnConfig),
        Condp {
            spec: PotentialSpec,
            d: usize,
            chi: f64,
            alpha: f64,
            grid: Vec<f64>,
            epsilon: f64,
        },
        Diag {
            spec: PotentialSpec,
            kappa: f64,
            d: usize,
            chi: f64,
            grid: Vec<f64>,
            replicas: usize,
            budget: Budget,
        },
    }
    let job = match cmd {
        Command::Solve {
            model,
            r,
            t,
            method,
            paths,
            field,
            block_l,
            ..
        } => {
            s.model(model);
            s.over("solve", "r", r);
            s.over("solve", "t", t);
            s.over("solve", "method", method);
            s.over("solve", "paths", paths);
            s.over("solve", "block_l", block_l);
            if let Some(f) = field {
                s.cfg.set("solve", "field", f.display().to_string());
            }
            let spec = s.spec()?;
            let (kappa, d, _) = s.geometry(&spec)?;
            let method: String = s.with_default("solve", "method", "all".to_string())?;
            if !["ode", "spectral", "fk", "all"].contains(&method.as_str()) {
                return Err(Error::Config(format!(
                    "unknown method {method:?} (ode, spectral, fk or all)"
                )));
            }
            Job::Solve {
                spec,
                kappa,
                d,
                r: s.required("solve", "r")?,
                t: s.required("solve", "t")?,
                method,
                paths: s.with_default("solve", "paths", 10_000usize)?,
                field: s.parse::<String>("solve", "field")?.map(PathBuf::from),
                block_l: s.parse("solve", "block_l")?,
            }
        }
        Command::Scalings {
            model, alpha, t, ..
        } => {
            s.model(model);
            s.over("scalings", "alpha", alpha);
            s.over("scalings", "t", t);
            let spec = s.spec()?;
            let (kappa, d, chi) = s.geometry(&spec)?;
            Job::Scalings {
                spec,
                kappa,
                d,
                chi,
                alpha: s.required("scalings", "alpha")?,
                t: s.required("scalings", "t")?,
            }
        }
        Command::Stable {
            alpha,
            x_min,
            x_max,
            points,
            ..
        } => {
            s.over("stable", "alpha", alpha);
            s.over("stable", "x_min", x_min);
            s.over("stable", "x_max", x_max);
            s.over("stable", "points", points);
            Job::Stable {
                alpha: s.required("stable", "alpha")?,
                x_min: s.with_default("stable", "x_min", 0.1)?,
                x_max: s.with_default("stable", "x_max", 100.0)?,
                points: s.with_default("stable", "points", 50usize)?,
            }
        }
        Command::LimitExp {
            model,
            budget,
            alpha,
            t_grid,
            replicas,
            ..
        } => {
            s.model(model);
            s.budget_flags(budget);
            s.over("experiment", "alpha", alpha);
            s.over("experiment", "t_grid", t_grid);
            s.over("experiment", "replicas", replicas);
            let spec = s.spec()?;
            let (kappa, d, chi) = s.geometry(&spec)?;
            let mut cfg = ExperimentConfig::new(
                spec,
                s.required("experiment", "alpha")?,
                s.grid("experiment", "t_grid")?,
                s.with_default("experiment", "replicas", 1000usize)?,
                s.with_default("run", "seed", 0u64)?,
            );
            cfg.kappa = kappa;
            cfg.d = d;
            cfg.chi = chi;
            cfg.budget = s.budget()?;
            cfg.validate()?;
            Job::Limit(cfg)
        }
        Command::SllnExp {
            model,
            budget,
            t_grid,
            replicas,
            sites,
            margin,
            band,
            ..
        } => {
            s.model(model);
            s.budget_flags(budget);
            s.over("slln", "t_grid", t_grid);
            s.over("slln", "replicas", replicas);
            s.over("slln", "sites", sites);
            s.over("slln", "margin", margin);
            s.over("slln", "band", band);
            let spec = s.spec()?;
            let (kappa, d, chi) = s.geometry(&spec)?;
            let mut cfg = SllnConfig::new(
                spec,
                s.grid("slln", "t_grid")?,
                s.with_default("slln", "replicas", 200usize)?,
                s.with_default("run", "seed", 0u64)?,
            );
            cfg.kappa = kappa;
            cfg.d = d;
            cfg.chi = chi;
            cfg.sites = s.parse("slln", "sites")?;
            cfg.margin = s.with_default("slln", "margin", cfg.margin)?;
            cfg.band = s.with_default("slln", "band", cfg.band)?;
            cfg.budget = s.budget()?;
            Job::Slln(cfg)
        }
        Command::Condp {
            model,
            alpha,
            t_grid,
            epsilon,
            ..
        } => {
            s.model(model);
            s.over("condp", "alpha", alpha);
            s.over("condp", "t_grid", t_grid);
            s.over("condp", "epsilon", epsilon);
            let spec = s.spec()?;
            let (_, d, chi) = s.geometry(&spec)?;
            Job::Condp {
                spec,
                d,
                chi,
                alpha: s.required("condp", "alpha")?,
                grid: s.grid("condp", "t_grid")?,
                epsilon: s.with_default("condp", "epsilon", 1.0)?,
            }
        }
        Command::Diagnostics {
            model,
            budget,
            t_grid,
            replicas,
            ..
        } => {
            s.model(model);
            s.budget_flags(budget);
            s.over("diagnostics", "t_grid", t_grid);
            s.over("diagnostics", "replicas", replicas);
            let spec = s.spec()?;
            let (kappa, d, chi) = s.geometry(&spec)?;
            Job::Diag {
                spec,
                kappa,
                d,
                chi,
                grid: s.grid("diagnostics", "t_grid")?,
                replicas: s.with_default("diagnostics", "replicas", 1usize)?,
                budget: s.budget()?,
            }
        }
    };
    let seed = s.with_default("run", "seed", 0u64)?;
    fs::create_dir_all(dir)?;
    let echo = s.cfg.to_string();
    fs::write(dir.join("config.ini"), &echo)?;

    match job {
        Job::Solve {
            spec,
            kappa,
            d,
            r,
            t,
            method,
            paths,
            field,
            block_l,
        } => {
            let lattice = LatticeBox::centered(d, r)?;
            let field = match field {
                Some(p) => PotentialField::read_csv(lattice, BufReader::new(File::open(p)?))?,
                None => PotentialField::sample(lattice, &spec, &mut RngStream::derive(seed, &[0])),
            };
            let mut fw = create(dir, "field.csv")?;
            field.write_csv(&mut fw)?;
            fw.flush()?;
            let h = HamiltonianOperator::assemble(&field, kappa)?;
            let ones = vec![1.0; field.values.len()];
            let mut columns = Vec::new();
            let all = method == "all";
            if all || method == "ode" {
                columns.push(("ode", solve_ode(&h, t, &ones, 1e-10)?));
            }
            if all || method == "spectral" {
                columns.push(("spectral", solve_spectral(&h, t, &ones)?));
            }
            if all || method == "fk" {
                let mut rng = RngStream::derive(seed, &[1]);
                columns.push((
                    "fk",
                    feynman_kac_mc(&field, kappa, t, &ones, paths, &mut rng)?,
                ));
            }
            for (name, sol) in &columns {
                let mut w = create(dir, &format!("solution_{name}.csv"))?;
                sol.write_csv(&mut w)?;
                w.flush()?;
            }
            let mut table = String::new();
            for k in 1..=d {
                table.push_str(&format!("x{k},"));
            }
            table.push_str("xi");
            for (name, _) in &columns {
                table.push_str(&format!(",{name}"));
                if *name == "fk" {
                    table.push_str(",fk_stderr");
                }
            }
            table.push('\n');
            for i in 0..field.values.len() {
                for c in field.lattice.site(i) {
                    table.push_str(&format!("{c},"));
                }
                table.push_str(&format!("{:e}", field.values[i]));
                for (name, sol) in &columns {
                    table.push_str(&format!(",{:e}", sol.values[i]));
                    if *name == "fk" {
                        table.push_str(&format!(",{:e}", sol.stderr[i]));
                    }
                }
                table.push('\n');
            }
            fs::write(dir.join("comparison.csv"), &table)?;
            out.write_all(table.as_bytes())?;
            if let Some(l) = block_l {
                let blocks = block_decompose_and_solve(&field, kappa, t, l, 1e-10)?;
                let mut w = create(dir, "blocks.csv")?;
                write_blocks_csv(&blocks, &mut w)?;
                w.flush()?;
            }
        }
        Job::Scalings {
            spec,
            kappa,
            d,
            chi,
            alpha,
            t,
        } => {
            let b = make_bundle(&spec, alpha, t, kappa, d, ChiPolicy::Explicit(chi), &quad)?;
            write_json(dir, "scalings.json", &b)?;
            writeln!(out, "log_L={}", fmt_num(b.log_l_alpha))?;
            writeln!(out, "log_B={}", fmt_num(b.log_b_alpha))?;
            writeln!(out, "chi={}", fmt_num(b.chi))?;
            writeln!(out, "h_alpha_t={}", fmt_num(b.h_alpha_t))?;
            writeln!(out, "l_t={}", fmt_num(b.l_t))?;
        }
        Job::Stable {
            alpha,
            x_min,
            x_max,
            points,
        } => {
            if !(points >= 2 && x_max > x_min) {
                return Err(Error::Config("need points >= 2 and x_max > x_min".into()));
            }
            let law = StableLaw::new(alpha)?;
            let icfg = InversionConfig::default();
            let mut text = String::from("x,F,f\n");
            for i in 0..points {
                let u = i as f64 / (points - 1) as f64;
                let x = if x_min > 0.0 {
                    x_min * (x_max / x_min).powf(u)
                } else {
                    x_min + (x_max - x_min) * u
                };
                text.push_str(&format!(
                    "{x:e},{:e},{:e}\n",
                    law.cdf(x, &icfg)?,
                    law.density(x, &icfg)?
                ));
            }
            fs::write(dir.join("stable.csv"), &text)?;
            out.write_all(text.as_bytes())?;
        }
        Job::Limit(cfg) => {
            let record = stable_limit_experiment(&cfg)?;
            write_json(dir, "record.json", &record)?;
            write_plot_csv(&limit_plot_rows(&cfg, &record)?, create(dir, "plot.csv")?)?;
            for st in &record.per_t {
                writeln!(
                    out,
                    "t={} status={:?} ks={} hill={}",
                    st.t,
                    st.status,
                    st.ks.map_or("-".into(), |v| format!("{v:.4}")),
                    st.hill.map_or("-".into(), |v| format!("{v:.4}"))
                )?;
            }
        }
        Job::Slln(cfg) => {
            let record = slln_experiment(&cfg)?;
            write_json(dir, "record.json", &record)?;
            write_plot_csv(&slln_plot_rows(&record), create(dir, "plot.csv")?)?;
            for st in &record.per_t {
                writeln!(
                    out,
                    "t={} status={:?} mean={:.6} variance={:e} within_band={}/{}",
                    st.t,
                    st.status,
                    st.mean,
                    st.empirical_variance,
                    st.within_band,
                    st.averages.len()
                )?;
            }
        }
        Job::Condp {
            spec,
            d,
            chi,
            alpha,
            grid,
            epsilon,
        } => {
            let report = condition_p_report(&spec, alpha, chi, d, &grid, epsilon, &quad)?;
            write_json(dir, "condp.json", &report)?;
            let rows = grid
                .iter()
                .map(|&t| {
                    let ratio = |x| lemma_alpha_ratio(&spec, alpha, chi, t, x).ok();
                    let m = momente_check(&spec, alpha, chi, d, 2.0, 1.0, t, &quad).ok();
                    PlotRow {
                        t,
                        ratio_x05: ratio(0.5),
                        ratio_x1: ratio(1.0),
                        ratio_x2: ratio(2.0),
                        variance: m.map(|m| m.numeric),
                        bound: m.map(|m| m.target),
                        ..Default::default()
                    }
                })
                .collect::<Vec<_>>();
            write_plot_csv(&rows, create(dir, "plot.csv")?)?;
            writeln!(
                out,
                "stable={} a={}",
                report.stable,
                fmt_num(report.theoretical_a)
            )?;
        }
        Job::Diag {
            spec,
            kappa,
            d,
            chi,
            grid,
            replicas,
            budget,
        } => {
            let rows = exponent_diagnostics(&spec, kappa, chi, d, &grid, replicas, seed, &budget)?;
            write_json(dir, "exponents.json", &rows)?;
            let mut text = String::from(
                "t,replica,log_u_over_t,xi_max,lambda1,gap_u,gap_lambda,remark_ratio\n",
            );
            for r in &rows {
                text.push_str(&format!(
                    "{},{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                    r.t,
                    r.replica,
                    r.log_u_over_t,
                    r.xi_max,
                    r.lambda1,
                    r.gap_u,
                    r.gap_lambda,
                    r.remark_ratio
                ));
            }
            fs::write(dir.join("exponents.csv"), &text)?;
            out.write_all(text.as_bytes())?;
        }
    }

    let manifest = RunManifest {
        subcommand: cmd.name().to_string(),
        config_path: cmd
            .common()
            .config
            .as_ref()
            .map(|p| p.display().to_string()),
        config_echo: echo,
        master_seed: seed,
        rng_derivation: DERIVATION.to_string(),
        output_directory: dir.display().to_string(),
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    write_json(dir, "manifest.json", &manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut o = Vec::new();
        let mut e = Vec::new();
        let code = run_with(
            std::iter::once("pam-lab").chain(args.iter().copied()),
            &mut o,
            &mut e,
        );
        (
            code,
            String::from_utf8(o).unwrap(),
            String::from_utf8(e).unwrap(),
        )
    }

    #[test]
    fn config_parse_basics() {
        let c = ConfigFile::parse(
            "# c\nseed = 4\n[potential]\nfamily=weibull\n; x\n[model]\nkappa = 0.5\n",
        )
        .unwrap();
        assert_eq!(c.get("", "seed"), Some("4"));
        assert_eq!(c.get("potential", "family"), Some("weibull"));
        assert_eq!(c.get("model", "kappa"), Some("0.5"));
        assert!(ConfigFile::parse("[open\n").is_err());
        assert!(ConfigFile::parse("[a]\nno equals sign\n").is_err());
        assert!(ConfigFile::parse("=3\n").is_err());
    }

    proptest! {
        #[test]
        fn config_round_trip(
            sections in prop::collection::btree_map(
                "[a-z][a-z_]{0,8}",
                prop::collection::btree_map("[a-z][a-z0-9_]{0,8}", "([!-~]([ -~]{0,10}[!-~])?)?", 0..5),
                0..4,
            )
        ) {
            let cfg = ConfigFile { sections };
            prop_assert_eq!(ConfigFile::parse(&cfg.to_string()).unwrap(), cfg);
        }
    }

    #[test]
    fn fmt_num_trims_noise() {
        assert_eq!(fmt_num(1.0000000000000002), "1");
        assert_eq!(fmt_num(2.0), "2");
        assert_eq!(fmt_num(0.125), "0.125");
    }

    #[test]
    fn scalings_table_example() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let (code, stdout, _) = run_capture(&[
            "scalings", "--family", "weibull", "--gamma", "2", "--alpha", "1", "--t", "2",
            "--kappa", "0", "--d", "1", "--out", out,
        ]);
        assert_eq!(code, 0);
        assert!(stdout.starts_with("log_L=1\nlog_B=2\n"), "{stdout}");
        assert!(dir.path().join("manifest.json").exists());
        assert!(dir.path().join("scalings.json").exists());
    }

    #[test]
    fn missing_flag_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let (code, _, err) = run_capture(&[
            "scalings",
            "--alpha",
            "1",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
        assert!(err.contains("--t") && err.contains("Usage"), "{err}");
        assert!(!dir.path().join("manifest.json").exists());
        let (code, _, err) = run_capture(&["scalings", "--bogus"]);
        assert_eq!(code, 1);
        assert!(err.contains("Usage"));
        let (code, _, _) = run_capture(&["frobnicate"]);
        assert_eq!(code, 1);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(
            run_capture(&["scalings", "--gamma", "0.6", "--alpha", "1", "--t", "2", "--out", out])
                .0,
            1
        );
        assert_eq!(
            run_capture(&[
                "scalings", "--family", "gauss", "--alpha", "1", "--t", "2", "--out", out
            ])
            .0,
            1
        );
        assert_eq!(
            run_capture(&["stable", "--alpha", "2.5", "--out", out]).0,
            1
        );
    }

    #[test]
    fn numerical_failure_writes_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let (code, _, err) = run_capture(&[
            "limit-exp",
            "--alpha",
            "0.8",
            "--t-grid",
            "8",
            "--replicas",
            "10",
            "--max-total-sites",
            "10",
            "--out",
            out,
        ]);
        assert_eq!(code, 2, "{err}");
        let text = fs::read_to_string(dir.path().join("failure.json")).unwrap();
        assert!(text.contains("\"kind\": \"budget\""));
    }

    #[test]
    fn flags_override_config_and_echo_reproduces() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("in.ini");
        fs::write(&cfg_path, "[run]\nseed=5\n[potential]\nfamily=weibull\ngamma=2\n[experiment]\nalpha=0.8\nt_grid=3,4\nreplicas=7\n")
            .unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let (code, _, err) = run_capture(&[
            "limit-exp",
            "--config",
            cfg_path.to_str().unwrap(),
            "--replicas",
            "9",
            "--out",
            a.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{err}");
        let echo = fs::read_to_string(a.join("config.ini")).unwrap();
        assert!(echo.contains("replicas=9") && echo.contains("seed=5"));
        let (code, _, _) = run_capture(&[
            "limit-exp",
            "--config",
            a.join("config.ini").to_str().unwrap(),
            "--workers",
            "3",
            "--out",
            b.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        for f in ["record.json", "plot.csv", "config.ini"] {
            assert_eq!(
                fs::read(a.join(f)).unwrap(),
                fs::read(b.join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn solve_all_methods() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let (code, stdout, err) = run_capture(&[
            "solve",
            "--d",
            "1",
            "--r",
            "3",
            "--kappa",
            "1",
            "--t",
            "1",
            "--seed",
            "42",
            "--method",
            "all",
            "--paths",
            "2000",
            "--block-l",
            "1",
            "--out",
            out,
        ]);
        assert_eq!(code, 0, "{err}");
        let mut lines = stdout.lines();
        assert_eq!(lines.next().unwrap(), "x1,xi,ode,spectral,fk,fk_stderr");
        let rows: Vec<Vec<f64>> = lines
            .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 7);
        for r in &rows {
            assert!((r[2] - r[3]).abs() < 1e-8 * r[2]);
            assert!((r[4] - r[2]).abs() < 6.0 * r[5] + 1e-12);
        }
        for f in [
            "field.csv",
            "solution_ode.csv",
            "solution_spectral.csv",
            "solution_fk.csv",
            "blocks.csv",
            "manifest.json",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn stable_table() {
        let dir = tempfile::tempdir().unwrap();
        let (code, stdout, _) = run_capture(&[
            "stable",
            "--alpha",
            "0.5",
            "--x-min",
            "1",
            "--x-max",
            "4",
            "--points",
            "3",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let lines: Vec<&str> = stdout.lines().collect();
        assert_eq!(lines[0], "x,F,f");
        assert_eq!(lines.len(), 4);
        let f1: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
        let want = statrs::function::erf::erfc(std::f64::consts::PI.sqrt() / 2.0);
        assert!((f1 - want).abs() < 1e-8);
    }

    #[test]
    fn other_subcommands_run() {
        let dir = tempfile::tempdir().unwrap();
        let sub = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
        let o = sub("slln");
        assert_eq!(
            run_capture(&[
                "slln-exp",
                "--t-grid",
                "1,2",
                "--replicas",
                "5",
                "--sites",
                "500",
                "--out",
                &o
            ])
            .0,
            0
        );
        let o = sub("condp");
        assert_eq!(
            run_capture(&["condp", "--alpha", "0.8", "--t-grid", "10,20", "--out", &o]).0,
            0
        );
        let o = sub("diag");
        let (code, _, err) = run_capture(&[
            "diagnostics",
            "--kappa",
            "0.5",
            "--t-grid",
            "2,3",
            "--replicas",
            "2",
            "--out",
            &o,
        ]);
        assert_eq!(code, 0, "{err}");
        for d in ["slln", "condp", "diag"] {
            assert!(dir.path().join(d).join("manifest.json").exists());
        }
    }
}
