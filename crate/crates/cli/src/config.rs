//! Experiment configuration: a TOML file with one section per module, with
//! command-line overrides applied on top of the file before validation.

use std::fmt;
use std::path::{Path, PathBuf};

use carvecache::carve::CarveConfig;
use carvecache::pipeline::MeshSettings;
use carvecache::sim::SimConfig;
use carvecache::spectralagg::{AggSchedule, DEFAULT_CUTOFF, DEFAULT_WEIGHT};
use carvecache::stepcache::StepCacheConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

pub const OUTPUT_DIR_ENV: &str = "CARVECACHE_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    SsCache,
    SlatCarve,
    MeshAgg,
    End2end,
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::SsCache => "ss-cache",
            Command::SlatCarve => "slat-carve",
            Command::MeshAgg => "mesh-agg",
            Command::End2end => "end2end",
            Command::Sweep => "sweep",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

/// Structure-stage knobs. The step count comes from `[sim]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepCacheSection {
    pub stride_k: usize,
    pub momentum_beta: f64,
    pub warmup_steps: usize,
}

impl Default for StepCacheSection {
    fn default() -> Self {
        let d = StepCacheConfig::default();
        Self {
            stride_k: d.stride_k,
            momentum_beta: d.momentum_beta,
            warmup_steps: d.warmup_steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggSection {
    pub tau_low: f64,
    pub tau_high: f64,
    pub levels: [f64; 3],
    pub cutoff: f64,
    pub weight_w: f64,
}

impl Default for AggSection {
    fn default() -> Self {
        let s = AggSchedule::default();
        Self {
            tau_low: s.tau_low,
            tau_high: s.tau_high,
            levels: s.levels,
            cutoff: DEFAULT_CUTOFF,
            weight_w: DEFAULT_WEIGHT,
        }
    }
}

/// Inputs of `mesh-agg`. Without files or a fixture the synthetic refinement
/// state of each seed is aggregated.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshSection {
    pub mask: Option<PathBuf>,
    pub voxels: Option<PathBuf>,
    pub fixture: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Stage each sweep point runs.
    pub stage: Command,
    /// Field to vary, as `section.field` or a bare field name.
    pub parameter: Option<String>,
    pub values: Vec<Value>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            stage: Command::End2end,
            parameter: None,
            values: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub command: Option<Command>,
    pub output_path: Option<PathBuf>,
    pub output_format: OutputFormat,
    /// Seeds to run; empty means `[sim.seed]`.
    pub seeds: Vec<u64>,
    /// Adds a wall-clock column to every row.
    pub timestamp: bool,
    pub step_cache: StepCacheSection,
    pub carve: CarveConfig,
    pub agg: AggSection,
    pub sim: SimConfig,
    pub mesh: MeshSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            command: None,
            output_path: None,
            output_format: OutputFormat::Csv,
            seeds: Vec::new(),
            timestamp: false,
            step_cache: StepCacheSection::default(),
            carve: CarveConfig::default(),
            agg: AggSection::default(),
            sim: SimConfig::default(),
            mesh: MeshSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

/// Every sweepable or overridable field, by section.
pub const FIELDS: &[(&str, &str)] = &[
    ("step_cache", "stride_k"),
    ("step_cache", "momentum_beta"),
    ("step_cache", "warmup_steps"),
    ("carve", "gamma"),
    ("carve", "keep_ratio"),
    ("carve", "error_threshold"),
    ("carve", "warmup_steps"),
    ("carve", "freq_cutoff"),
    ("carve", "recompute_freq"),
    ("agg", "tau_low"),
    ("agg", "tau_high"),
    ("agg", "levels"),
    ("agg", "cutoff"),
    ("agg", "weight_w"),
    ("sim", "seed"),
    ("sim", "total_steps"),
    ("sim", "token_count"),
    ("sim", "feature_dim"),
    ("sim", "grid_dims"),
    ("sim", "shape_smoothness"),
    ("sim", "layout_tokens"),
    ("sim", "layout_oscillation_amp"),
    ("sim", "layout_oscillation_freq"),
    ("sim", "active_fraction"),
    ("sim", "noise_sigma"),
    ("sim", "refine_rate"),
];

/// Resolves `section.field` or an unambiguous bare field name to a dotted path.
pub fn resolve_parameter(name: &str) -> Result<String, CliError> {
    if let Some((section, field)) = name.split_once('.') {
        if FIELDS.contains(&(section, field)) {
            return Ok(name.to_string());
        }
        return Err(CliError::Config(format!("unknown parameter `{name}`")));
    }
    let matches: Vec<_> = FIELDS.iter().filter(|(_, f)| *f == name).collect();
    match matches.as_slice() {
        [(section, field)] => Ok(format!("{section}.{field}")),
        [] => Err(CliError::Config(format!("unknown parameter `{name}`"))),
        many => Err(CliError::Config(format!(
            "parameter `{name}` is ambiguous, use one of {}",
            many.iter()
                .map(|(s, f)| format!("{s}.{f}"))
                .collect::<Vec<_>>()
                .join(", ")
        ))),
    }
}

/// Parses a flag value as TOML, falling back to a plain string.
pub fn parse_value(raw: &str) -> Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut Table, path: &str, value: Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let leaf = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| {
        CliError::Config(format!("empty key in override `{path}`"))
    })?;
    let mut node = table;
    for part in parts {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{part}` in `{path}` is not a section")))?;
    }
    node.insert(leaf.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn from_table(table: Table) -> Result<Self, CliError> {
        let config: ExperimentConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().trim().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_table(&self) -> Table {
        Table::try_from(self).expect("config serializes to a table")
    }

    /// Returns a copy with one dotted path replaced, revalidated.
    pub fn with_override(&self, path: &str, value: Value) -> Result<Self, CliError> {
        let mut table = self.to_table();
        set_path(&mut table, path, value)?;
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |e: carvecache::Error| CliError::Config(e.to_string());
        self.sim.validate().map_err(invalid)?;
        self.step_cache_config().validate().map_err(invalid)?;
        self.carve.validate().map_err(invalid)?;
        self.schedule().validate().map_err(invalid)?;
        if !(self.agg.cutoff > 0.0 && self.agg.cutoff < 1.0) {
            return Err(CliError::Config(format!(
                "agg.cutoff must be in (0, 1), got {}",
                self.agg.cutoff
            )));
        }
        if !(0.0..=1.0).contains(&self.agg.weight_w) {
            return Err(CliError::Config(format!(
                "agg.weight_w must be in [0, 1], got {}",
                self.agg.weight_w
            )));
        }
        if self.sweep.stage == Command::Sweep {
            return Err(CliError::Config("sweep.stage cannot be sweep".to_string()));
        }
        if let Some(p) = &self.sweep.parameter {
            resolve_parameter(p)?;
        }
        if let Some(f) = &self.mesh.fixture {
            carvecache::fixtures::by_name(f).map_err(invalid)?;
        }
        if self.mesh.mask.is_some() != self.mesh.voxels.is_some() {
            return Err(CliError::Config(
                "mesh.mask and mesh.voxels must be given together".to_string(),
            ));
        }
        Ok(())
    }

    pub fn step_cache_config(&self) -> StepCacheConfig {
        StepCacheConfig {
            stride_k: self.step_cache.stride_k,
            momentum_beta: self.step_cache.momentum_beta,
            warmup_steps: self.step_cache.warmup_steps,
            total_steps: self.sim.total_steps,
        }
    }

    pub fn schedule(&self) -> AggSchedule {
        AggSchedule {
            tau_low: self.agg.tau_low,
            tau_high: self.agg.tau_high,
            levels: self.agg.levels,
        }
    }

    pub fn mesh_settings(&self) -> MeshSettings {
        MeshSettings {
            schedule: self.schedule(),
            cutoff: self.agg.cutoff,
            weight: self.agg.weight_w,
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.sim.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// Explicit path, else `<command>.<ext>` under `output_dir` or the
    /// working directory.
    pub fn resolved_output_path(&self, command: Command, output_dir: Option<&Path>) -> PathBuf {
        if let Some(p) = &self.output_path {
            return p.clone();
        }
        output_dir
            .unwrap_or(Path::new("."))
            .join(format!("{}.{}", command.name(), self.output_format.extension()))
    }
}

/// Loads `file` (if any), applies `overrides` in order, and validates.
pub fn parse_config(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<ExperimentConfig, CliError> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
            text.parse::<Table>()
                .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message().trim())))?
        }
        None => Table::new(),
    };
    for (path, value) in overrides {
        set_path(&mut table, path, value.clone())?;
    }
    ExperimentConfig::from_table(table)
}
