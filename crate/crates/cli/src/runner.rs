//! Experiment execution. Jobs are `(config point, seed)` pairs run in
//! parallel and reported in job order: sweep values as listed, then seeds.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use carvecache::cvxg::{read_voxel_grid, write_voxel_grid};
use carvecache::fixtures::{self, Fixture};
use carvecache::pipeline::{
    mesh_inputs, run_end_to_end, run_mesh, run_mesh_on_voxels, run_refinement, run_structure, StageRun,
};
use carvecache::sim::{run_oracle, RefinementBackbone, SimConfig};
use carvecache::spectralagg::{AggOutcome, Mask2D, VoxelGrid};
use rayon::prelude::*;
use toml::Value;

use crate::config::{resolve_parameter, Command, ExperimentConfig};
use crate::error::CliError;
use crate::output::{encode, MetricsRow};

#[derive(Debug, Clone)]
pub struct Report {
    pub path: PathBuf,
    pub rows: Vec<MetricsRow>,
}

impl Report {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.is_ok()).count()
    }
}

struct Point {
    config: ExperimentConfig,
    sweep: Option<(String, String)>,
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn points(config: &ExperimentConfig, command: Command) -> Result<(Command, Vec<Point>), CliError> {
    if command != Command::Sweep {
        return Ok((
            command,
            vec![Point {
                config: config.clone(),
                sweep: None,
            }],
        ));
    }
    let name = config
        .sweep
        .parameter
        .as_deref()
        .ok_or_else(|| CliError::Config("sweep needs sweep.parameter".to_string()))?;
    if config.sweep.values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value in sweep.values".to_string()));
    }
    let path = resolve_parameter(name)?;
    let points = config
        .sweep
        .values
        .iter()
        .map(|v| {
            Ok(Point {
                config: config.with_override(&path, v.clone())?,
                sweep: Some((path.clone(), value_label(v))),
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok((config.sweep.stage, points))
}

/// Mesh inputs that do not depend on the seed.
enum MeshSource {
    Files(Mask2D, VoxelGrid),
    Fixture(Fixture),
    Synthetic,
}

fn mesh_source(config: &ExperimentConfig) -> Result<MeshSource, CliError> {
    let mesh = &config.mesh;
    if let (Some(mask), Some(voxels)) = (&mesh.mask, &mesh.voxels) {
        let load = |p: &Path| {
            read_voxel_grid(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
        };
        let mask = Mask2D::from_grid(&load(mask)?)
            .map_err(|e| CliError::Io(format!("{}: {e}", mask.display())))?;
        let voxels = VoxelGrid::from_grid(&load(voxels)?)
            .map_err(|e| CliError::Io(format!("{}: {e}", voxels.display())))?;
        return Ok(MeshSource::Files(mask, voxels));
    }
    if let Some(name) = &mesh.fixture {
        return Ok(MeshSource::Fixture(fixtures::by_name(name)?));
    }
    Ok(MeshSource::Synthetic)
}

fn stage_row(row: &mut MetricsRow, run: &StageRun) {
    let m = &run.metrics;
    row.total_steps = Some(m.total_steps);
    row.full_eval_count = Some(m.full_eval_count);
    row.token_evals = Some(m.token_evals);
    row.flops_proxy = Some(m.flops_proxy);
    row.oracle_flops = Some(run.oracle_flops);
    row.flops_ratio = Some(run.flops_ratio());
    row.fallback_steps = Some(m.fallback_steps);
    row.per_step_error = Some(m.per_step_error.clone());
    row.final_error = Some(m.final_error);
    row.layout_drift = Some(m.layout_drift);
}

fn mesh_row(row: &mut MetricsRow, tokens_in: usize, out: &AggOutcome) {
    row.hfer_2d = Some(out.profile.hfer_2d);
    row.hfer_3d = Some(out.profile.hfer_3d);
    row.joint = Some(out.profile.joint);
    row.factor = Some(out.factor);
    row.tokens_in = Some(tokens_in);
    row.tokens_out = Some(out.tokens.len());
}

fn run_job(
    stage: Command,
    config: &ExperimentConfig,
    seed: Option<u64>,
    source: &MeshSource,
    row: &mut MetricsRow,
) -> carvecache::Result<()> {
    let sim = SimConfig {
        seed: seed.unwrap_or(config.sim.seed),
        ..config.sim.clone()
    };
    match stage {
        Command::SsCache => stage_row(row, &run_structure(&sim, &config.step_cache_config())?),
        Command::SlatCarve => stage_row(row, &run_refinement(&sim, &config.carve, None)?),
        Command::End2end => {
            let run = run_end_to_end(&sim, &config.step_cache_config(), &config.carve, &config.mesh_settings())?;
            let (s, r) = (&run.structure, &run.refinement);
            row.total_steps = Some(sim.total_steps);
            row.full_eval_count = Some(s.metrics.full_eval_count + r.metrics.full_eval_count);
            row.token_evals = Some(s.metrics.token_evals + r.metrics.token_evals);
            row.flops_proxy = Some(s.metrics.flops_proxy + r.metrics.flops_proxy);
            row.oracle_flops = Some(s.oracle_flops + r.oracle_flops);
            row.flops_ratio = Some(run.flops_ratio);
            row.fallback_steps = Some(s.metrics.fallback_steps);
            row.per_step_error = Some(r.metrics.per_step_error.clone());
            row.final_error = Some(run.final_error);
            row.layout_drift = Some(s.metrics.layout_drift);
            mesh_row(row, sim.token_count, &run.mesh);
        }
        Command::MeshAgg => {
            let settings = config.mesh_settings();
            match source {
                MeshSource::Files(mask, voxels) => {
                    let out = run_mesh_on_voxels(mask, voxels, &settings)?;
                    mesh_row(row, voxels.occupied().len(), &out);
                }
                MeshSource::Fixture(f) => {
                    let out = run_mesh_on_voxels(&f.mask, &f.voxels, &settings)?;
                    mesh_row(row, f.voxels.occupied().len(), &out);
                }
                MeshSource::Synthetic => {
                    let backbone = RefinementBackbone::new(&sim)?;
                    let oracle = run_oracle(&backbone, sim.total_steps)?;
                    let (mask, voxels, tokens) = mesh_inputs(&backbone, &oracle.final_latent)?;
                    let out = run_mesh(&mask, &voxels, &tokens, &settings)?;
                    mesh_row(row, tokens.len(), &out);
                }
            }
        }
        Command::Sweep => unreachable!("sweep points run a concrete stage"),
    }
    Ok(())
}

/// Runs every job and returns rows in job order without writing anything.
pub fn collect_rows(config: &ExperimentConfig, command: Command) -> Result<Vec<MetricsRow>, CliError> {
    let (stage, points) = points(config, command)?;
    let source = mesh_source(config)?;
    let seeds: Vec<Option<u64>> = match (stage, &source) {
        (Command::MeshAgg, MeshSource::Files(..) | MeshSource::Fixture(_)) => vec![None],
        _ => config.seed_list().into_iter().map(Some).collect(),
    };
    let timestamp = config.timestamp.then(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    });
    let jobs: Vec<(&Point, Option<u64>)> = points
        .iter()
        .flat_map(|p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    Ok(jobs
        .par_iter()
        .map(|&(point, seed)| {
            let mut row = MetricsRow {
                command: command.name().to_string(),
                stage: stage.name().to_string(),
                seed,
                sweep_parameter: point.sweep.as_ref().map(|s| s.0.clone()),
                sweep_value: point.sweep.as_ref().map(|s| s.1.clone()),
                status: "ok".to_string(),
                timestamp,
                ..Default::default()
            };
            if let Err(e) = run_job(stage, &point.config, seed, &source, &mut row) {
                row.status = format!("error: {e}");
            }
            row
        })
        .collect())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Io(format!("creating {}: {e}", parent.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}

/// Runs `command` and writes its rows. Failed jobs are written with an error
/// status and reported as a runtime error after the file is complete.
pub fn run_experiment(
    config: &ExperimentConfig,
    command: Command,
    output_dir: Option<&Path>,
) -> Result<Report, CliError> {
    let rows = collect_rows(config, command)?;
    let path = config.resolved_output_path(command, output_dir);
    write_file(&path, &encode(&rows, config.output_format)?)?;
    let report = Report { path, rows };
    match report.failures() {
        0 => Ok(report),
        n => Err(CliError::Runtime(format!(
            "{n} of {} rows failed; partial results written to {}",
            report.rows.len(),
            report.path.display()
        ))),
    }
}

/// File names of a fixture's mask and voxel grid.
pub fn fixture_files(name: &str) -> (String, String) {
    (format!("{name}.mask.cvxg"), format!("{name}.voxels.cvxg"))
}

pub fn write_fixtures(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("creating {}: {e}", dir.display())))?;
    let mut written = Vec::new();
    for name in fixtures::NAMES {
        let f = fixtures::by_name(name)?;
        let (mask_name, voxel_name) = fixture_files(name);
        let mask_path = dir.join(mask_name);
        let voxel_path = dir.join(voxel_name);
        write_voxel_grid(&mask_path, &f.mask.to_grid_3d())?;
        write_voxel_grid(&voxel_path, &f.voxels.to_grid())?;
        written.push(mask_path);
        written.push(voxel_path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_points_follow_listed_order() {
        let mut c = ExperimentConfig::default();
        c.sweep.parameter = Some("momentum_beta".into());
        c.sweep.stage = Command::SsCache;
        c.sweep.values = [1.0, 0.9, 0.7, 0.5, 0.3].map(Value::Float).to_vec();
        c.seeds = vec![2, 0];
        let rows = collect_rows(&c, Command::Sweep).unwrap();
        assert_eq!(rows.len(), 10);
        let labels: Vec<_> = rows
            .iter()
            .map(|r| (r.sweep_value.clone().unwrap(), r.seed.unwrap()))
            .collect();
        assert_eq!(labels[0], ("1.0".to_string(), 2));
        assert_eq!(labels[1], ("1.0".to_string(), 0));
        assert_eq!(labels[9], ("0.3".to_string(), 0));
        assert!(rows.iter().all(|r| r.is_ok() && r.stage == "ss-cache"));
    }

    #[test]
    fn invalid_sweep_value_is_a_config_error() {
        let mut c = ExperimentConfig::default();
        c.sweep.parameter = Some("keep_ratio".into());
        c.sweep.values = vec![Value::Float(2.0)];
        assert!(matches!(collect_rows(&c, Command::Sweep), Err(CliError::Config(_))));
        c.sweep.values.clear();
        assert!(matches!(collect_rows(&c, Command::Sweep), Err(CliError::Config(_))));
    }

    #[test]
    fn failed_jobs_are_flagged_and_written() {
        // bypasses validation so the failure surfaces inside the job
        let mut c = ExperimentConfig::default();
        c.sim.feature_dim = 0;
        c.seeds = vec![0, 1];
        let dir = tempfile::tempdir().unwrap();
        c.output_path = Some(dir.path().join("out.csv"));
        let err = run_experiment(&c, Command::SsCache, None).unwrap_err();
        assert!(matches!(err, CliError::Runtime(_)));
        assert_eq!(err.exit_code(), 3);
        let text = std::fs::read_to_string(dir.path().join("out.csv")).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().skip(1).all(|l| l.contains("error: invalid argument")));
    }

    #[test]
    fn fixture_mesh_runs_once() {
        let mut c = ExperimentConfig::default();
        c.mesh.fixture = Some("checkerboard".into());
        c.seeds = vec![0, 1, 2];
        let rows = collect_rows(&c, Command::MeshAgg).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].factor, Some(1.25));
        assert_eq!(rows[0].seed, None);
    }
}
