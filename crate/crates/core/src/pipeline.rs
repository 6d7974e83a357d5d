//! Stage runners paired with their full-compute oracles, and the chained
//! structure -> refinement -> aggregation pipeline on synthetic state.

use ndarray::Axis;

use crate::backbone::{relative_error, Backbone, TokenMatrix};
use crate::carve::{run_slat_stage, CarveConfig};
use crate::error::{Error, Result};
use crate::fixtures::tokens_from_voxels;
use crate::sim::{compare_runs, run_oracle, RefinementBackbone, SimConfig, StructureBackbone};
use crate::spectralagg::{analyze_and_aggregate, AggOutcome, AggSchedule, Mask2D, TokenSet, VoxelGrid};
use crate::stepcache::{run_ss_stage, StepCacheConfig};
use crate::trajectory::{token_cost, RunMetrics, TrajectoryRecord};

/// An accelerated run, its oracle, and the comparison between them.
#[derive(Debug, Clone)]
pub struct StageRun {
    pub accelerated: TrajectoryRecord,
    pub oracle: TrajectoryRecord,
    pub metrics: RunMetrics,
    pub oracle_flops: f64,
}

impl StageRun {
    fn new(accelerated: TrajectoryRecord, oracle: TrajectoryRecord) -> Result<Self> {
        let metrics = compare_runs(&accelerated, &oracle)?;
        let oracle_flops = RunMetrics::from_record(&oracle).flops_proxy;
        Ok(Self {
            accelerated,
            oracle,
            metrics,
            oracle_flops,
        })
    }

    pub fn flops_ratio(&self) -> f64 {
        ratio(self.metrics.flops_proxy, self.oracle_flops)
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        0.0
    }
}

fn check_steps(ss: &StepCacheConfig, sim: &SimConfig) -> Result<()> {
    if ss.total_steps != sim.total_steps {
        return Err(Error::invalid(format!(
            "step cache total_steps ({}) differs from sim total_steps ({})",
            ss.total_steps, sim.total_steps
        )));
    }
    Ok(())
}

pub fn run_structure(sim: &SimConfig, ss: &StepCacheConfig) -> Result<StageRun> {
    check_steps(ss, sim)?;
    let backbone = StructureBackbone::new(sim)?;
    let partition = backbone.partition().expect("structure backbone is partitioned").clone();
    let (accelerated, _) = run_ss_stage(&backbone, &partition, ss)?;
    let oracle = run_oracle(&backbone, sim.total_steps)?;
    StageRun::new(accelerated, oracle)
}

/// Refinement stage. `initial` overrides the starting latents of the
/// accelerated and oracle runs respectively.
pub fn run_refinement(
    sim: &SimConfig,
    carve: &CarveConfig,
    initial: Option<(TokenMatrix, TokenMatrix)>,
) -> Result<StageRun> {
    let backbone = RefinementBackbone::new(sim)?;
    let (accel_backbone, oracle_backbone) = match initial {
        Some((a, o)) => (
            backbone.clone().with_initial_latent(a)?,
            backbone.with_initial_latent(o)?,
        ),
        None => (backbone.clone(), backbone),
    };
    let (accelerated, _) = run_slat_stage(&accel_backbone, carve, sim.total_steps)?;
    let oracle = run_oracle(&oracle_backbone, sim.total_steps)?;
    StageRun::new(accelerated, oracle)
}

/// Decoder tokens at the refinement positions, with the voxel occupancy and
/// its silhouette.
pub fn mesh_inputs(backbone: &RefinementBackbone, latent: &TokenMatrix) -> Result<(Mask2D, VoxelGrid, TokenSet)> {
    let geometry = backbone.geometry().expect("refinement backbone has geometry");
    let voxels = VoxelGrid::from_positions(geometry.grid_dims, &geometry.positions)?;
    let mask = Mask2D::project(&voxels);
    let tokens = TokenSet::new(geometry.positions.clone(), latent.clone())?;
    Ok((mask, voxels, tokens))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshSettings {
    pub schedule: AggSchedule,
    pub cutoff: f64,
    pub weight: f64,
}

impl Default for MeshSettings {
    fn default() -> Self {
        Self {
            schedule: AggSchedule::default(),
            cutoff: crate::spectralagg::DEFAULT_CUTOFF,
            weight: crate::spectralagg::DEFAULT_WEIGHT,
        }
    }
}

pub fn run_mesh(mask: &Mask2D, voxels: &VoxelGrid, tokens: &TokenSet, mesh: &MeshSettings) -> Result<AggOutcome> {
    analyze_and_aggregate(mask, voxels, tokens, &mesh.schedule, mesh.cutoff, mesh.weight)
}

/// Aggregation of a voxel grid whose occupied cells become the tokens.
pub fn run_mesh_on_voxels(mask: &Mask2D, voxels: &VoxelGrid, mesh: &MeshSettings) -> Result<AggOutcome> {
    run_mesh(mask, voxels, &tokens_from_voxels(voxels), mesh)
}

#[derive(Debug, Clone)]
pub struct EndToEnd {
    pub structure: StageRun,
    pub refinement: StageRun,
    pub mesh: AggOutcome,
    /// Structure plus refinement FLOPs proxy over the oracle's.
    pub flops_ratio: f64,
    /// Relative error of the refinement output against the all-oracle chain.
    pub final_error: f64,
}

/// Structure stage, then refinement seeded with the structure stage's shape
/// rows, then aggregation of the refined tokens.
pub fn run_end_to_end(
    sim: &SimConfig,
    ss: &StepCacheConfig,
    carve: &CarveConfig,
    mesh: &MeshSettings,
) -> Result<EndToEnd> {
    let structure = run_structure(sim, ss)?;
    let shape: Vec<usize> = (0..sim.token_count).collect();
    let seed_latents = (
        structure.accelerated.final_latent.select(Axis(0), &shape),
        structure.oracle.final_latent.select(Axis(0), &shape),
    );
    let refinement = run_refinement(sim, carve, Some(seed_latents))?;
    let backbone = RefinementBackbone::new(sim)?;
    let (mask, voxels, tokens) = mesh_inputs(&backbone, &refinement.accelerated.final_latent)?;
    let mesh = run_mesh(&mask, &voxels, &tokens, mesh)?;
    let flops_ratio = ratio(
        structure.metrics.flops_proxy + refinement.metrics.flops_proxy,
        structure.oracle_flops + refinement.oracle_flops,
    );
    let final_error = relative_error(
        &refinement.accelerated.final_latent,
        &refinement.oracle.final_latent,
    );
    Ok(EndToEnd {
        structure,
        refinement,
        mesh,
        flops_ratio,
        final_error,
    })
}

/// Oracle FLOPs proxy of `steps` full evaluations.
pub fn oracle_flops(tokens: usize, feature_dim: usize, steps: usize) -> f64 {
    (tokens * steps) as f64 * token_cost(feature_dim)
}
