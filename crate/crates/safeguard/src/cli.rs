//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use safeguard_core::{FilterContext, SegwayParams};

use crate::config::{ConfigError, RunConfig};
use crate::formats::{self, CacheDoc, CacheKey, FormatError, ReportDoc};
use crate::plot::{self, PlotOptions};
use crate::sim::{self, SimRun};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_INVALID: i32 = 3;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "safeguard", about = "Backup-set safety filters for a planar Segway")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize the policy, backup set and Lipschitz bundle and write the cache.
    Synthesize {
        config: PathBuf,
        /// Cache path; defaults to the config's `cache` or `<output_dir>/synthesis.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one scenario and write the log CSV and report JSON.
    Simulate {
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run the scenario once per epsilon and write the reports.
    Sweep {
        config: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        eps: Vec<f64>,
        /// Run the values one after another.
        #[arg(long)]
        serial: bool,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Estimate the Lipschitz bundle and write it as JSON.
    Lipschitz {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw position against time from a log CSV.
    Plot {
        log: PathBuf,
        /// Half-width of the band around the estimate.
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        #[arg(long, default_value_t = 2.0)]
        x_max: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure with the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    Parse(String),
    Invalid(String),
    Runtime { stage: &'static str, message: String },
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Parse(_) => EXIT_PARSE,
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Runtime { .. } => EXIT_RUNTIME,
        }
    }

    fn runtime(stage: &'static str) -> impl FnOnce(String) -> Self {
        move |message| CliError::Runtime { stage, message }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Parse(m) => write!(f, "parse error: {m}"),
            CliError::Invalid(m) => write!(f, "invalid configuration: {m}"),
            CliError::Runtime { stage, message } => write!(f, "{stage} failed: {message}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Parse { .. } => CliError::Parse(e.to_string()),
            ConfigError::Invalid { .. } => CliError::Invalid(e.to_string()),
            ConfigError::Io { .. } => CliError::Runtime { stage: "reading configuration", message: e.to_string() },
        }
    }
}

fn write_err(e: FormatError) -> CliError {
    CliError::Runtime { stage: "writing outputs", message: e.to_string() }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Synthesize { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let out = out.or_else(|| cfg.cache.as_ref().map(|c| cfg.resolve(c))).unwrap_or_else(|| output_dir(&cfg, None).join("synthesis.json"));
            let (ctx, doc) = synthesize_or_load(&cfg, Some(&out))?;
            let grid = safeguard_core::backup_flow::flow_with_sensitivity(
                &ctx.params,
                &ctx.policy,
                &ctx.backup_set.with_center(safeguard_core::linear_control::translate_center(
                    &ctx.backup_set,
                    &ctx.safe,
                    cfg.initial_state[0],
                )),
                &cfg.scenario().initial_state,
                &ctx.flow,
            )
            .map_err(|e| CliError::runtime("backup flow")(e.to_string()))?;
            let mut csv = Vec::new();
            formats::write_flow_grid(&grid, &mut csv).map_err(write_err)?;
            let grid_path = out.with_file_name("flow_grid.csv");
            formats::write_text(&grid_path, &String::from_utf8_lossy(&csv)).map_err(write_err)?;
            println!("wrote {} (c = {}, mu = {}) and {}", out.display(), doc.c, doc.mu, grid_path.display());
            Ok(())
        }
        Command::Simulate { config, out_dir } => {
            let cfg = RunConfig::load(&config)?;
            let ctx = context(&cfg)?;
            let scenario = cfg.scenario();
            let run = sim::run_scenario(&scenario, &ctx).map_err(|e| CliError::runtime("simulation")(e.to_string()))?;
            let dir = output_dir(&cfg, out_dir);
            write_run(&dir, &cfg, &ctx, &run)?;
            if let Some(msg) = &run.log.error {
                return Err(CliError::runtime("simulation")(format!("{msg} (partial log written)")));
            }
            Ok(())
        }
        Command::Sweep { config, eps, serial, out_dir } => {
            let cfg = RunConfig::load(&config)?;
            let threads = sim::thread_cap_from_env().map_err(|e| CliError::Invalid(e.to_string()))?;
            if eps.iter().any(|e| !(*e >= 0.0 && e.is_finite())) || eps.windows(2).any(|w| w[0] > w[1]) {
                return Err(CliError::Invalid("`--eps` values must be finite, non-negative and sorted".into()));
            }
            let ctx = context(&cfg)?;
            let reports = sim::sweep_epsilon(&cfg.scenario(), &ctx, &eps, !serial, threads)
                .map_err(|e| CliError::runtime("sweep")(e.to_string()))?;
            let mut relaxed_seen = false;
            for w in reports.windows(2) {
                relaxed_seen |= w[0].1.relaxed_tick_count > 0 || w[1].1.relaxed_tick_count > 0;
                if !relaxed_seen && w[1].1.min_h_true < w[0].1.min_h_true {
                    eprintln!("note: min_h_true decreases from epsilon {} to {}", w[0].0, w[1].0);
                }
            }
            let doc: Vec<_> = reports.iter().map(|(e, r)| json!({"epsilon": e, "report": r})).collect();
            let path = output_dir(&cfg, out_dir).join("sweep.json");
            formats::write_text(&path, &serde_json::to_string_pretty(&doc).expect("reports serialize")).map_err(write_err)?;
            for (e, r) in &reports {
                println!(
                    "epsilon {e}: min_h_true {} min_h_est {} relaxed {}",
                    r.min_h_true, r.min_h_est, r.relaxed_tick_count
                );
            }
            Ok(())
        }
        Command::Lipschitz { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let ctx = context(&cfg)?;
            let path = out.unwrap_or_else(|| output_dir(&cfg, None).join("lipschitz.json"));
            let text = serde_json::to_string_pretty(&formats::bundle_to_json(&ctx.bundle)).expect("bundle serializes");
            formats::write_text(&path, &text).map_err(write_err)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Plot { log, epsilon, x_max, out } => {
            if !(epsilon >= 0.0 && epsilon.is_finite()) {
                return Err(CliError::Invalid("`--epsilon` must be finite and non-negative".into()));
            }
            if !x_max.is_finite() {
                return Err(CliError::Invalid("`--x-max` must be finite".into()));
            }
            let file = std::fs::File::open(&log).map_err(|e| CliError::runtime("reading log")(format!("{}: {e}", log.display())))?;
            let traces = plot::read_traces(file).map_err(|e| CliError::Parse(format!("{}: {e}", log.display())))?;
            let svg = plot::render_svg(&traces, &PlotOptions { epsilon, x_max });
            let path = out.unwrap_or_else(|| log.with_extension("svg"));
            formats::write_text(&path, &svg).map_err(write_err)?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn output_dir(cfg: &RunConfig, over: Option<PathBuf>) -> PathBuf {
    over.unwrap_or_else(|| cfg.resolve(&cfg.output_dir))
}

fn load_params(cfg: &RunConfig) -> Result<SegwayParams, CliError> {
    let Some(file) = &cfg.params_file else {
        return Ok(SegwayParams::nominal());
    };
    let params = formats::read_params(&cfg.resolve(file)).map_err(|e| match e {
        FormatError::Json { .. } => CliError::Parse(e.to_string()),
        other => CliError::runtime("reading parameters")(other.to_string()),
    })?;
    params.validate().map_err(|e| CliError::Invalid(format!("`params_file`: {e}")))?;
    Ok(params)
}

/// Filter context for a config, via its cache when one is configured.
pub fn context(cfg: &RunConfig) -> Result<FilterContext, CliError> {
    let cache = cfg.cache.as_ref().map(|c| cfg.resolve(c));
    Ok(synthesize_or_load(cfg, cache.as_deref())?.0)
}

/// Reuses `cache` when its key matches the config, otherwise synthesizes
/// and rewrites it. The context always comes from the serialized document,
/// so cached and fresh runs are identical.
fn synthesize_or_load(cfg: &RunConfig, cache: Option<&Path>) -> Result<(FilterContext, CacheDoc), CliError> {
    let params = load_params(cfg)?;
    let settings = cfg.synthesis_settings();
    let key = CacheKey {
        params: params.into(),
        x_max: cfg.x_max,
        error_axes: settings.error_axes.clone(),
        synthesis: cfg.synthesis.clone(),
    };
    let cached = cache.filter(|p| p.is_file()).and_then(|p| CacheDoc::read(p).ok()).filter(|d| d.key == key);
    let doc = match cached {
        Some(d) => d,
        None => {
            let ctx = FilterContext::synthesize(&params, &cfg.safe_set(), &settings)
                .map_err(|e| CliError::runtime("synthesis")(e.to_string()))?;
            let doc = CacheDoc::from_context(&ctx, key);
            if let Some(p) = cache {
                formats::write_text(p, &doc.to_json()).map_err(write_err)?;
            }
            // serialize and parse back so fresh and cached runs see the same bits
            serde_json::from_str(&doc.to_json()).expect("cache document round-trips")
        }
    };
    let mut ctx = doc.to_context(cfg.epsilon).map_err(|e| CliError::runtime("loading synthesis cache")(e.to_string()))?;
    if let Some(file) = &cfg.synthesis.lipschitz_file {
        let bundle = formats::read_bundle(&cfg.resolve(file)).map_err(|e| match e {
            FormatError::Json { .. } => CliError::Parse(e.to_string()),
            other => CliError::Invalid(format!("`synthesis.lipschitz_file`: {other}")),
        })?;
        if bundle.rows.len() != ctx.bundle.rows.len() {
            return Err(CliError::Invalid(format!(
                "`synthesis.lipschitz_file`: expected {} rows, found {}",
                ctx.bundle.rows.len(),
                bundle.rows.len()
            )));
        }
        ctx.bundle = bundle;
    }
    Ok((ctx, doc))
}

fn write_run(dir: &Path, cfg: &RunConfig, ctx: &FilterContext, run: &SimRun) -> Result<(), CliError> {
    let mut csv = Vec::new();
    formats::write_simlog(&run.log, &mut csv).map_err(write_err)?;
    formats::write_text(&dir.join("simlog.csv"), &String::from_utf8(csv).expect("csv is utf-8")).map_err(write_err)?;
    if run.log.rows.is_empty() {
        return Ok(());
    }
    let report = sim::evaluate_safety(&run.log, &ctx.safe).map_err(|e| CliError::runtime("safety evaluation")(e.to_string()))?;
    let doc = ReportDoc {
        controller: cfg.controller.as_str().into(),
        epsilon: cfg.epsilon,
        report,
        filter_median_seconds: formats::quantile(&run.filter_seconds, 0.5),
        filter_p99_seconds: formats::quantile(&run.filter_seconds, 0.99),
    };
    formats::write_text(&dir.join("report.json"), &serde_json::to_string_pretty(&doc).expect("report serializes"))
        .map_err(write_err)?;
    println!(
        "{}: min_h_true {} min_h_est {} relaxed {} -> {}",
        doc.controller,
        doc.report.min_h_true,
        doc.report.min_h_est,
        doc.report.relaxed_tick_count,
        dir.display()
    );
    Ok(())
}
