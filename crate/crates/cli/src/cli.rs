//! Command-line arguments and dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use toml::Value;

use crate::config::{parse_config, parse_value, Command, OutputFormat, OUTPUT_DIR_ENV};
use crate::error::CliError;
use crate::runner::{run_experiment, write_fixtures};

#[derive(Debug, Parser)]
#[command(name = "carvecache", version, about = "Step caching, token carving and spectral aggregation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Structure stage with stride-k step caching.
    SsCache(RunArgs),
    /// Refinement stage with token carving and tangent reuse.
    SlatCarve(RunArgs),
    /// Spectral complexity and token aggregation.
    MeshAgg(RunArgs),
    /// Structure, refinement and aggregation chained on linked state.
    End2end(RunArgs),
    /// One stage repeated over a list of values of one parameter.
    Sweep(RunArgs),
    /// Runs the command named by `command` in the config file.
    Run(RunArgs),
    /// Writes the reference fixtures as CVXG files.
    Fixtures {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Directory for outputs when --output is not given.
    #[arg(long, env = OUTPUT_DIR_ENV)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<OutputFormat>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Adds a wall-clock timestamp column (off by default for reproducible files).
    #[arg(long)]
    pub timestamp: bool,

    #[arg(long)]
    pub stride_k: Option<usize>,
    #[arg(long)]
    pub momentum_beta: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,

    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub keep_ratio: Option<f64>,
    #[arg(long)]
    pub error_threshold: Option<f64>,
    #[arg(long)]
    pub carve_warmup_steps: Option<usize>,
    #[arg(long)]
    pub freq_cutoff: Option<f64>,
    #[arg(long)]
    pub recompute_freq: bool,

    #[arg(long)]
    pub tau_low: Option<f64>,
    #[arg(long)]
    pub tau_high: Option<f64>,
    #[arg(long)]
    pub cutoff: Option<f64>,
    #[arg(long)]
    pub weight_w: Option<f64>,

    #[arg(long)]
    pub total_steps: Option<usize>,
    #[arg(long)]
    pub token_count: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub grid_dims: Option<Vec<usize>>,
    #[arg(long)]
    pub shape_smoothness: Option<u32>,
    #[arg(long)]
    pub layout_tokens: Option<usize>,
    #[arg(long)]
    pub layout_oscillation_amp: Option<f64>,
    #[arg(long)]
    pub layout_oscillation_freq: Option<f64>,
    #[arg(long)]
    pub active_fraction: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub refine_rate: Option<f64>,

    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub voxels: Option<PathBuf>,
    #[arg(long)]
    pub fixture: Option<String>,

    #[arg(long)]
    pub sweep_parameter: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub sweep_values: Option<Vec<String>>,
    #[arg(long)]
    pub sweep_stage: Option<String>,

    /// Generic override, `section.field=value`; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

fn int(v: usize) -> Value {
    Value::Integer(v as i64)
}

fn path(p: &std::path::Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

impl RunArgs {
    /// Overrides in application order.
    pub fn overrides(&self) -> Result<Vec<(String, Value)>, CliError> {
        let mut out: Vec<(String, Value)> = Vec::new();
        let mut put = |key: &str, value: Option<Value>| {
            if let Some(v) = value {
                out.push((key.to_string(), v));
            }
        };
        put("output_path", self.output.as_deref().map(path));
        put(
            "output_format",
            self.format.map(|f| Value::String(f.extension().to_string())),
        );
        put(
            "seeds",
            self.seeds
                .as_ref()
                .map(|s| Value::Array(s.iter().map(|&x| Value::Integer(x as i64)).collect())),
        );
        put("timestamp", self.timestamp.then_some(Value::Boolean(true)));
        put("step_cache.stride_k", self.stride_k.map(int));
        put("step_cache.momentum_beta", self.momentum_beta.map(Value::Float));
        put("step_cache.warmup_steps", self.warmup_steps.map(int));
        put("carve.gamma", self.gamma.map(Value::Float));
        put("carve.keep_ratio", self.keep_ratio.map(Value::Float));
        put("carve.error_threshold", self.error_threshold.map(Value::Float));
        put("carve.warmup_steps", self.carve_warmup_steps.map(int));
        put("carve.freq_cutoff", self.freq_cutoff.map(Value::Float));
        put("carve.recompute_freq", self.recompute_freq.then_some(Value::Boolean(true)));
        put("agg.tau_low", self.tau_low.map(Value::Float));
        put("agg.tau_high", self.tau_high.map(Value::Float));
        put("agg.cutoff", self.cutoff.map(Value::Float));
        put("agg.weight_w", self.weight_w.map(Value::Float));
        put("sim.total_steps", self.total_steps.map(int));
        put("sim.token_count", self.token_count.map(int));
        put("sim.feature_dim", self.feature_dim.map(int));
        put(
            "sim.grid_dims",
            self.grid_dims
                .as_ref()
                .map(|d| Value::Array(d.iter().map(|&x| int(x)).collect())),
        );
        put("sim.shape_smoothness", self.shape_smoothness.map(|v| Value::Integer(v.into())));
        put("sim.layout_tokens", self.layout_tokens.map(int));
        put("sim.layout_oscillation_amp", self.layout_oscillation_amp.map(Value::Float));
        put("sim.layout_oscillation_freq", self.layout_oscillation_freq.map(Value::Float));
        put("sim.active_fraction", self.active_fraction.map(Value::Float));
        put("sim.noise_sigma", self.noise_sigma.map(Value::Float));
        put("sim.refine_rate", self.refine_rate.map(Value::Float));
        put("mesh.mask", self.mask.as_deref().map(path));
        put("mesh.voxels", self.voxels.as_deref().map(path));
        put("mesh.fixture", self.fixture.clone().map(Value::String));
        put("sweep.parameter", self.sweep_parameter.clone().map(Value::String));
        put(
            "sweep.values",
            self.sweep_values
                .as_ref()
                .map(|v| Value::Array(v.iter().map(|s| parse_value(s)).collect())),
        );
        put("sweep.stage", self.sweep_stage.clone().map(Value::String));
        for item in &self.set {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got `{item}`")))?;
            out.push((key.trim().to_string(), parse_value(raw.trim())));
        }
        Ok(out)
    }
}

fn execute(args: &RunArgs, command: Option<Command>) -> Result<String, CliError> {
    let config = parse_config(args.config.as_deref(), &args.overrides()?)?;
    let command = command
        .or(config.command)
        .ok_or_else(|| CliError::Config("`run` needs `command` in the config file".to_string()))?;
    let report = run_experiment(&config, command, args.output_dir.as_deref())?;
    Ok(format!(
        "{}: {} rows written to {}",
        command,
        report.rows.len(),
        report.path.display()
    ))
}

/// Parses `args` and runs; returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match &cli.command {
        CliCommand::SsCache(a) => execute(a, Some(Command::SsCache)),
        CliCommand::SlatCarve(a) => execute(a, Some(Command::SlatCarve)),
        CliCommand::MeshAgg(a) => execute(a, Some(Command::MeshAgg)),
        CliCommand::End2end(a) => execute(a, Some(Command::End2end)),
        CliCommand::Sweep(a) => execute(a, Some(Command::Sweep)),
        CliCommand::Run(a) => execute(a, None),
        CliCommand::Fixtures { dir } => write_fixtures(dir).map(|files| {
            files
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join("\n")
        }),
    };
    match result {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("carvecache: {e}");
            e.exit_code()
        }
    }
}
