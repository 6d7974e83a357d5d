//! Synthetic backbones with closed-form ground truth, the full-compute oracle,
//! and run comparison.
//!
//! Two backbones cover the two diffusion stages:
//!
//! - [`StructureBackbone`]: shape tokens follow a polynomial of degree
//!   `shape_smoothness` in the run progress, layout tokens follow an affine
//!   trend plus a sinusoid. Outputs do not depend on the latent, so the
//!   ground-truth output at every step is available in closed form.
//! - [`RefinementBackbone`]: tokens sit on voxel positions; only a seeded
//!   `active_fraction` subset moves, with `v = x + g(progress)` where `g` is a
//!   slowly varying polynomial offset. Inactive tokens output zero.
//!
//! Setup randomness (coefficients, positions, active subset, initial latent)
//! comes from ChaCha8 seeded with `seed`. Per-step noise is counter-based:
//! every `(seed, step, token, channel)` tuple is hashed with the SplitMix64
//! finalizer into two uniforms and mapped through Box-Muller, so a single
//! token can be evaluated without generating the rest of the step.

use std::collections::BTreeSet;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{check_latent, relative_error, select_rows, Backbone, Geometry, TokenMatrix};
use crate::error::{Error, Result};
use crate::stepcache::ModalityPartition;
use crate::trajectory::{RunMetrics, StepDecision, TrajectoryRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub seed: u64,
    pub total_steps: usize,
    /// Shape tokens of the structure stage; tokens of the refinement stage.
    pub token_count: usize,
    pub feature_dim: usize,
    pub grid_dims: [usize; 3],
    /// Polynomial degree (1-3) of the shape and refinement trajectories.
    pub shape_smoothness: u32,
    /// Layout tokens appended after the shape tokens in the structure stage.
    pub layout_tokens: usize,
    pub layout_oscillation_amp: f64,
    /// Sinusoid cycles over the whole run.
    pub layout_oscillation_freq: f64,
    /// Fraction of refinement tokens with nonzero updates.
    pub active_fraction: f64,
    pub noise_sigma: f64,
    /// Scale of the progress-dependent part of the refinement offset.
    pub refine_rate: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            total_steps: 25,
            token_count: 1024,
            feature_dim: 8,
            grid_dims: [16, 16, 16],
            shape_smoothness: 2,
            layout_tokens: 4,
            layout_oscillation_amp: 0.5,
            layout_oscillation_freq: 4.0,
            active_fraction: 0.1,
            noise_sigma: 0.1,
            refine_rate: 0.2,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps < 1 {
            return Err(Error::invalid("total_steps must be >= 1"));
        }
        if self.token_count < 1 {
            return Err(Error::invalid("token_count must be >= 1"));
        }
        if self.feature_dim < 1 {
            return Err(Error::invalid("feature_dim must be >= 1"));
        }
        if self.grid_dims.contains(&0) {
            return Err(Error::invalid(format!(
                "grid_dims must be >= 1, got {:?}",
                self.grid_dims
            )));
        }
        let cells: usize = self.grid_dims.iter().product();
        if self.token_count > cells {
            return Err(Error::invalid(format!(
                "token_count {} exceeds {cells} grid cells",
                self.token_count
            )));
        }
        if !(1..=3).contains(&self.shape_smoothness) {
            return Err(Error::invalid(format!(
                "shape_smoothness must be 1..=3, got {}",
                self.shape_smoothness
            )));
        }
        if !(self.layout_oscillation_amp >= 0.0) {
            return Err(Error::invalid("layout_oscillation_amp must be >= 0"));
        }
        if !self.layout_oscillation_freq.is_finite() {
            return Err(Error::invalid("layout_oscillation_freq must be finite"));
        }
        if !(self.active_fraction > 0.0 && self.active_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "active_fraction must be in (0, 1], got {}",
                self.active_fraction
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be >= 0"));
        }
        if !(self.refine_rate >= 0.0) {
            return Err(Error::invalid("refine_rate must be >= 0"));
        }
        Ok(())
    }

    /// Run progress in `[0, 1]` at `step`.
    pub fn progress(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            0.0
        } else {
            step as f64 / (self.total_steps - 1) as f64
        }
    }

    pub fn step_size(&self) -> f64 {
        1.0 / self.total_steps as f64
    }

    pub fn active_count(&self) -> usize {
        (self.active_fraction * self.token_count as f64).floor() as usize
    }
}

const STRUCTURE_STREAM: u64 = 0x5354_5255;
const REFINE_STREAM: u64 = 0x5245_4649;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Standard normal sample addressed by a counter tuple.
pub fn counter_normal(seed: u64, stream: u64, step: usize, token: usize, channel: usize) -> f64 {
    let mut h = splitmix64(seed ^ stream.rotate_left(17));
    h = splitmix64(h ^ step as u64);
    h = splitmix64(h ^ token as u64);
    h = splitmix64(h ^ channel as u64);
    let a = splitmix64(h);
    let b = splitmix64(a);
    let u1 = ((a >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
    let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> TokenMatrix {
    Array2::from_shape_simple_fn((rows, cols), || gaussian(rng) * scale)
}

fn polynomial(coeffs: &[TokenMatrix], tau: f64) -> TokenMatrix {
    let mut acc = coeffs[0].clone();
    let mut power = 1.0;
    for c in &coeffs[1..] {
        power *= tau;
        acc.scaled_add(power, c);
    }
    acc
}

fn seeded_subset(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut mask = vec![false; n];
    for &i in &order[..count] {
        mask[i] = true;
    }
    mask
}

/// Structure-stage backbone: `token_count` shape rows then `layout_tokens` layout rows.
#[derive(Debug, Clone)]
pub struct StructureBackbone {
    config: SimConfig,
    partition: ModalityPartition,
    active: Vec<bool>,
    // shape_coeffs[j] is the degree-j coefficient for every row (layout rows unused)
    shape_coeffs: Vec<TokenMatrix>,
    layout_offset: TokenMatrix,
    layout_slope: TokenMatrix,
    layout_phase: TokenMatrix,
    initial: TokenMatrix,
}

impl StructureBackbone {
    pub fn new(config: &SimConfig) -> Result<Self> {
        config.validate()?;
        let n = config.token_count + config.layout_tokens;
        let d = config.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ STRUCTURE_STREAM);
        let active_shape = seeded_subset(&mut rng, config.token_count, config.active_count());
        let mut active = active_shape;
        active.extend(std::iter::repeat_n(true, config.layout_tokens));
        let shape_coeffs = (0..=config.shape_smoothness)
            .map(|_| gaussian_matrix(&mut rng, n, d, 1.0))
            .collect();
        let layout_offset = gaussian_matrix(&mut rng, config.layout_tokens, d, 1.0);
        let layout_slope = gaussian_matrix(&mut rng, config.layout_tokens, d, 1.0);
        let layout_phase = Array2::from_shape_simple_fn((config.layout_tokens, d), || {
            rng.random_range(0.0..std::f64::consts::TAU)
        });
        let initial = gaussian_matrix(&mut rng, n, d, 1.0);
        Ok(Self {
            config: config.clone(),
            partition: ModalityPartition::trailing_layout(n, config.layout_tokens)?,
            active,
            shape_coeffs,
            layout_offset,
            layout_slope,
            layout_phase,
            initial,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn active_mask(&self) -> &[bool] {
        &self.active
    }

    fn noiseless_row(&self, step: usize, row: usize, out: &mut [f64]) {
        if !self.active[row] {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let tau = self.config.progress(step);
        let shape_rows = self.config.token_count;
        if row < shape_rows {
            for (c, slot) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                let mut power = 1.0;
                for coeff in &self.shape_coeffs {
                    acc += coeff[[row, c]] * power;
                    power *= tau;
                }
                *slot = acc;
            }
        } else {
            let l = row - shape_rows;
            let omega = std::f64::consts::TAU * self.config.layout_oscillation_freq;
            for (c, slot) in out.iter_mut().enumerate() {
                *slot = self.layout_offset[[l, c]]
                    + self.layout_slope[[l, c]] * tau
                    + self.config.layout_oscillation_amp
                        * (omega * tau + self.layout_phase[[l, c]]).sin();
            }
        }
    }

    /// Closed-form output at `step` including the deterministic noise.
    pub fn ground_truth_output(&self, step: usize) -> TokenMatrix {
        let rows: Vec<usize> = (0..self.token_count()).collect();
        self.output_rows(step, &rows)
    }

    /// Closed-form latent entering `step`: `x0 + h * Σ_{q < step} v(q)`.
    pub fn ground_truth_latent(&self, step: usize) -> TokenMatrix {
        let mut acc = TokenMatrix::zeros(self.initial.dim());
        for q in 0..step {
            acc += &self.ground_truth_output(q);
        }
        &self.initial + &(acc * self.config.step_size())
    }

    fn output_rows(&self, step: usize, rows: &[usize]) -> TokenMatrix {
        let d = self.config.feature_dim;
        let mut out = TokenMatrix::zeros((rows.len(), d));
        for (k, &row) in rows.iter().enumerate() {
            let mut slot = out.row_mut(k);
            let buf = slot.as_slice_mut().expect("row-major output");
            self.noiseless_row(step, row, buf);
            if self.config.noise_sigma > 0.0 && self.active[row] {
                for (c, v) in buf.iter_mut().enumerate() {
                    *v += self.config.noise_sigma
                        * counter_normal(self.config.seed, STRUCTURE_STREAM, step, row, c);
                }
            }
        }
        out
    }
}

impl Backbone for StructureBackbone {
    fn token_count(&self) -> usize {
        self.config.token_count + self.config.layout_tokens
    }

    fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn initial_latent(&self) -> TokenMatrix {
        self.initial.clone()
    }

    fn eval_rows(&self, x: &TokenMatrix, step: usize, rows: &[usize]) -> Result<TokenMatrix> {
        check_latent(x, self.token_count(), self.feature_dim())?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.token_count()) {
            return Err(Error::Backbone(format!("row {bad} out of range")));
        }
        Ok(self.output_rows(step, rows))
    }

    fn step_size(&self) -> f64 {
        self.config.step_size()
    }

    fn partition(&self) -> Option<&ModalityPartition> {
        Some(&self.partition)
    }
}

/// Refinement-stage backbone on a sparse voxel field.
#[derive(Debug, Clone)]
pub struct RefinementBackbone {
    config: SimConfig,
    geometry: Geometry,
    active: Vec<bool>,
    // offset g(tau) = Σ_j coeffs[j] * tau^j
    offset_coeffs: Vec<TokenMatrix>,
    initial: TokenMatrix,
}

impl RefinementBackbone {
    pub fn new(config: &SimConfig) -> Result<Self> {
        config.validate()?;
        let n = config.token_count;
        let d = config.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ REFINE_STREAM);
        let positions = blob_positions(&mut rng, config.grid_dims, n);
        let active = seeded_subset(&mut rng, n, config.active_count());
        let mut offset_coeffs = vec![gaussian_matrix(&mut rng, n, d, 1.0)];
        for _ in 0..config.shape_smoothness {
            offset_coeffs.push(gaussian_matrix(&mut rng, n, d, config.refine_rate));
        }
        let initial = gaussian_matrix(&mut rng, n, d, 1.0);
        Ok(Self {
            config: config.clone(),
            geometry: Geometry::new(positions, config.grid_dims)?,
            active,
            offset_coeffs,
            initial,
        })
    }

    /// Replaces the starting latent, e.g. with the structure stage's result.
    pub fn with_initial_latent(mut self, initial: TokenMatrix) -> Result<Self> {
        check_latent(&initial, self.config.token_count, self.config.feature_dim)?;
        self.initial = initial;
        Ok(self)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn active_mask(&self) -> &[bool] {
        &self.active
    }

    /// Progress-dependent offset `g(tau)`, zero on inactive rows.
    pub fn offset(&self, step: usize) -> TokenMatrix {
        let mut g = polynomial(&self.offset_coeffs, self.config.progress(step));
        for (row, &on) in self.active.iter().enumerate() {
            if !on {
                g.row_mut(row).fill(0.0);
            }
        }
        g
    }

    /// Closed-form latent entering `step` for a noiseless run:
    /// `x_s = (1+h)^s x_0 + h Σ_{q<s} (1+h)^{s-1-q} g(q)` on active rows.
    pub fn ground_truth_latent(&self, step: usize) -> TokenMatrix {
        let h = self.config.step_size();
        let growth = 1.0 + h;
        let mut x = self.initial.clone();
        let mut forced = TokenMatrix::zeros(self.initial.dim());
        for q in 0..step {
            forced.scaled_add(h * growth.powi((step - 1 - q) as i32), &self.offset(q));
        }
        let scale = growth.powi(step as i32);
        for (row, &on) in self.active.iter().enumerate() {
            if on {
                let mut r = x.row_mut(row);
                r *= scale;
                r += &forced.row(row);
            }
        }
        x
    }
}

/// The `count` cells nearest the grid centre under a seeded ellipsoidal metric,
/// in row-major cell order.
fn blob_positions(rng: &mut ChaCha8Rng, dims: [usize; 3], count: usize) -> Vec<[i64; 3]> {
    let radii: [f64; 3] = std::array::from_fn(|a| dims[a] as f64 * rng.random_range(0.35..0.5));
    let centre: [f64; 3] = std::array::from_fn(|a| (dims[a] as f64 - 1.0) / 2.0);
    let mut cells: Vec<(f64, usize, [i64; 3])> = Vec::with_capacity(dims.iter().product());
    let mut flat = 0usize;
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let p = [x, y, z];
                let r: f64 = (0..3)
                    .map(|a| ((p[a] as f64 - centre[a]) / radii[a]).powi(2))
                    .sum();
                cells.push((r, flat, [x as i64, y as i64, z as i64]));
                flat += 1;
            }
        }
    }
    cells.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let chosen: BTreeSet<usize> = cells[..count].iter().map(|c| c.1).collect();
    cells.sort_by_key(|c| c.1);
    cells
        .into_iter()
        .filter(|c| chosen.contains(&c.1))
        .map(|c| c.2)
        .collect()
}

impl Backbone for RefinementBackbone {
    fn token_count(&self) -> usize {
        self.config.token_count
    }

    fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn initial_latent(&self) -> TokenMatrix {
        self.initial.clone()
    }

    fn eval_rows(&self, x: &TokenMatrix, step: usize, rows: &[usize]) -> Result<TokenMatrix> {
        check_latent(x, self.token_count(), self.feature_dim())?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.token_count()) {
            return Err(Error::Backbone(format!("row {bad} out of range")));
        }
        let tau = self.config.progress(step);
        let mut out = select_rows(x, rows);
        for (k, &row) in rows.iter().enumerate() {
            let mut r = out.row_mut(k);
            if !self.active[row] {
                r.fill(0.0);
                continue;
            }
            let mut power = 1.0;
            for coeff in &self.offset_coeffs {
                r.scaled_add(power, &coeff.row(row));
                power *= tau;
            }
            if self.config.noise_sigma > 0.0 {
                for (c, v) in r.iter_mut().enumerate() {
                    *v += self.config.noise_sigma
                        * counter_normal(self.config.seed, REFINE_STREAM, step, row, c);
                }
            }
        }
        Ok(out)
    }

    fn step_size(&self) -> f64 {
        self.config.step_size()
    }

    fn geometry(&self) -> Option<&Geometry> {
        Some(&self.geometry)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Structure,
    Refinement,
}

#[derive(Debug, Clone)]
pub enum SimBackbone {
    Structure(StructureBackbone),
    Refinement(RefinementBackbone),
}

pub fn make_backbone(config: &SimConfig, stage: Stage) -> Result<SimBackbone> {
    Ok(match stage {
        Stage::Structure => SimBackbone::Structure(StructureBackbone::new(config)?),
        Stage::Refinement => SimBackbone::Refinement(RefinementBackbone::new(config)?),
    })
}

impl SimBackbone {
    fn inner(&self) -> &dyn Backbone {
        match self {
            SimBackbone::Structure(b) => b,
            SimBackbone::Refinement(b) => b,
        }
    }
}

impl Backbone for SimBackbone {
    fn token_count(&self) -> usize {
        self.inner().token_count()
    }

    fn feature_dim(&self) -> usize {
        self.inner().feature_dim()
    }

    fn initial_latent(&self) -> TokenMatrix {
        self.inner().initial_latent()
    }

    fn eval_rows(&self, x: &TokenMatrix, step: usize, rows: &[usize]) -> Result<TokenMatrix> {
        self.inner().eval_rows(x, step, rows)
    }

    fn step_size(&self) -> f64 {
        self.inner().step_size()
    }

    fn geometry(&self) -> Option<&Geometry> {
        self.inner().geometry()
    }

    fn partition(&self) -> Option<&ModalityPartition> {
        self.inner().partition()
    }
}

/// Evaluates the backbone on every token at every step.
pub fn run_oracle<B: Backbone + ?Sized>(backbone: &B, total_steps: usize) -> Result<TrajectoryRecord> {
    let n = backbone.token_count();
    let mut x = backbone.initial_latent();
    check_latent(&x, n, backbone.feature_dim())?;
    let mut inputs = Vec::with_capacity(total_steps);
    let mut outputs = Vec::with_capacity(total_steps);
    for step in 0..total_steps {
        let v = backbone.eval(&x, step)?;
        check_latent(&v, n, backbone.feature_dim())?;
        let next = backbone.advance(&x, &v, step);
        inputs.push(std::mem::replace(&mut x, next));
        outputs.push(v);
    }
    Ok(TrajectoryRecord {
        inputs,
        outputs,
        final_latent: x,
        partition: backbone.partition().cloned(),
        decisions: vec![StepDecision::FullEval; total_steps],
        anchor_steps: (0..total_steps).collect(),
        evaluated_tokens: vec![n; total_steps],
        carve_events: Vec::new(),
    })
}

/// Errors of `accelerated` against `oracle`, with compute counters taken from
/// the accelerated run.
pub fn compare_runs(accelerated: &TrajectoryRecord, oracle: &TrajectoryRecord) -> Result<RunMetrics> {
    if accelerated.total_steps() != oracle.total_steps()
        || accelerated.final_latent.dim() != oracle.final_latent.dim()
    {
        return Err(Error::invalid(format!(
            "cannot compare {} steps of {:?} against {} steps of {:?}",
            accelerated.total_steps(),
            accelerated.final_latent.dim(),
            oracle.total_steps(),
            oracle.final_latent.dim()
        )));
    }
    let mut metrics = RunMetrics::from_record(accelerated);
    metrics.per_step_error = accelerated
        .outputs
        .iter()
        .zip(&oracle.outputs)
        .map(|(a, o)| relative_error(a, o))
        .collect();
    metrics.final_error = relative_error(&accelerated.final_latent, &oracle.final_latent);
    metrics.layout_drift = match accelerated.partition.as_ref().or(oracle.partition.as_ref()) {
        Some(p) if !p.layout().is_empty() => relative_error(
            &accelerated.final_latent.select(Axis(0), p.layout()),
            &oracle.final_latent.select(Axis(0), p.layout()),
        ),
        _ => 0.0,
    };
    Ok(metrics)
}

/// Spearman rank correlation with average ranks for ties. Zero when either
/// input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!(
            "spearman needs equal nonempty inputs, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end - 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::frobenius_diff;

    fn exact(config: SimConfig) -> SimConfig {
        SimConfig {
            noise_sigma: 0.0,
            ..config
        }
    }

    #[test]
    fn affine_structure_streams() {
        let cfg = SimConfig {
            shape_smoothness: 1,
            noise_sigma: 0.0,
            layout_oscillation_amp: 0.0,
            token_count: 64,
            ..SimConfig::default()
        };
        let b = StructureBackbone::new(&cfg).unwrap();
        let x = b.initial_latent();
        let v: Vec<TokenMatrix> = (0..cfg.total_steps).map(|s| b.eval(&x, s).unwrap()).collect();
        // second differences vanish
        for s in 1..cfg.total_steps - 1 {
            let second = &v[s + 1] - &(&v[s] * 2.0) + &v[s - 1];
            assert!(second.iter().all(|e| e.abs() < 1e-12));
        }
    }

    #[test]
    fn active_fraction_is_exact() {
        let cfg = SimConfig {
            token_count: 500,
            active_fraction: 0.1,
            ..SimConfig::default()
        };
        let b = RefinementBackbone::new(&cfg).unwrap();
        let oracle = run_oracle(&b, cfg.total_steps).unwrap();
        let moving = (0..cfg.token_count)
            .filter(|&i| oracle.outputs.iter().any(|v| v.row(i).iter().any(|&e| e != 0.0)))
            .count();
        assert_eq!(moving, 50);
        assert_eq!(b.active_mask().iter().filter(|&&a| a).count(), 50);

        let s = StructureBackbone::new(&cfg).unwrap();
        let shape_active = s.active_mask()[..500].iter().filter(|&&a| a).count();
        assert_eq!(shape_active, 50);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SimConfig::default();
        for stage in [Stage::Structure, Stage::Refinement] {
            let a = run_oracle(&make_backbone(&cfg, stage).unwrap(), cfg.total_steps).unwrap();
            let b = run_oracle(&make_backbone(&cfg, stage).unwrap(), cfg.total_steps).unwrap();
            assert_eq!(a.final_latent, b.final_latent);
            assert_eq!(a.outputs, b.outputs);
        }
        let other = SimConfig { seed: 1, ..cfg.clone() };
        let a = run_oracle(&make_backbone(&cfg, Stage::Refinement).unwrap(), 25).unwrap();
        let b = run_oracle(&make_backbone(&other, Stage::Refinement).unwrap(), 25).unwrap();
        assert_ne!(a.final_latent, b.final_latent);
    }

    #[test]
    fn eval_rows_agrees_with_full_eval() {
        let cfg = SimConfig::default();
        for stage in [Stage::Structure, Stage::Refinement] {
            let b = make_backbone(&cfg, stage).unwrap();
            let x = b.initial_latent();
            let full = b.eval(&x, 7).unwrap();
            let rows = [3usize, 0, 17, 200];
            let part = b.eval_rows(&x, 7, &rows).unwrap();
            assert_eq!(part, full.select(Axis(0), &rows));
            assert!(matches!(b.eval_rows(&x, 0, &[usize::MAX]), Err(Error::Backbone(_))));
        }
    }

    #[test]
    fn oracle_matches_closed_form() {
        let cfg = exact(SimConfig::default());
        let s = StructureBackbone::new(&cfg).unwrap();
        let oracle = run_oracle(&s, cfg.total_steps).unwrap();
        for step in [0usize, 5, 24] {
            assert!(frobenius_diff(&oracle.outputs[step], &s.ground_truth_output(step)) < 1e-12);
            assert!(frobenius_diff(&oracle.inputs[step], &s.ground_truth_latent(step)) < 1e-9);
        }
        assert!(frobenius_diff(&oracle.final_latent, &s.ground_truth_latent(25)) < 1e-9);

        let r = RefinementBackbone::new(&cfg).unwrap();
        let oracle = run_oracle(&r, cfg.total_steps).unwrap();
        assert!(frobenius_diff(&oracle.final_latent, &r.ground_truth_latent(25)) < 1e-9);
        assert!(frobenius_diff(&oracle.inputs[9], &r.ground_truth_latent(9)) < 1e-9);
    }

    #[test]
    fn oracle_counters_and_self_comparison() {
        let cfg = SimConfig::default();
        let b = make_backbone(&cfg, Stage::Structure).unwrap();
        let oracle = run_oracle(&b, cfg.total_steps).unwrap();
        let m = compare_runs(&oracle, &oracle).unwrap();
        assert_eq!(m.full_eval_count, cfg.total_steps);
        assert_eq!(m.token_evals, (25 * b.token_count()) as u64);
        assert!(m.per_step_error.iter().all(|&e| e == 0.0));
        assert_eq!(m.final_error, 0.0);
        assert_eq!(m.layout_drift, 0.0);

        let short = run_oracle(&b, 10).unwrap();
        assert!(compare_runs(&short, &oracle).is_err());
    }

    #[test]
    fn geometry_is_unique_and_in_grid() {
        let cfg = SimConfig::default();
        let r = RefinementBackbone::new(&cfg).unwrap();
        let g = r.geometry().unwrap();
        let unique: BTreeSet<[i64; 3]> = g.positions.iter().copied().collect();
        assert_eq!(unique.len(), cfg.token_count);
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig::default().validate().is_ok());
        for bad in [
            SimConfig { shape_smoothness: 0, ..Default::default() },
            SimConfig { shape_smoothness: 4, ..Default::default() },
            SimConfig { active_fraction: 0.0, ..Default::default() },
            SimConfig { token_count: 5000, ..Default::default() },
            SimConfig { noise_sigma: -1.0, ..Default::default() },
            SimConfig { total_steps: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), 0.0);
        // ties: ranks [0.5, 0.5, 2] vs [0, 1, 2]
        let r = spearman(&[1.0, 1.0, 5.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 0.866_025_403_784_438_6).abs() < 1e-12);
        assert!(spearman(&[], &[]).is_err());
    }

    #[test]
    fn counter_normal_is_reasonable() {
        let n = 20_000;
        let samples: Vec<f64> = (0..n).map(|i| counter_normal(9, 1, 0, i, 0)).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
        assert_eq!(counter_normal(9, 1, 3, 4, 5), counter_normal(9, 1, 3, 4, 5));
    }
}
