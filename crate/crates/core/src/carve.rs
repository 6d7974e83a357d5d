//! Spatiotemporal token carving and error-bounded tangent reuse for the
//! latent-refinement stage.
//!
//! Each token gets an importance score from three normalized cues: its output
//! magnitude, its change since the previous output, and a high-pass frequency
//! score of its neighbourhood. Only the top fraction of tokens is sent through
//! the backbone on a full evaluation; the rest reuse the cached tangent offset
//! `Δ = v_anchor - x_anchor`. Between full evaluations every token reuses the
//! tangent, and a curvature-weighted relative-change proxy accumulates until it
//! crosses the error budget, which forces the next full evaluation.

use ndarray::Axis;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::backbone::{check_latent, frobenius, frobenius_diff, Backbone, Geometry, TokenMatrix};
use crate::error::{check_same_shape, Error, Result};
use crate::numerics::{fft_nd_in_place, flat_index, high_band, ComplexGrid, Direction};
use crate::trajectory::{CarveEvent, RunMetrics, StepDecision, TrajectoryRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CarveConfig {
    /// Weight of the abruptness term.
    pub gamma: f64,
    /// Fraction of tokens evaluated on a carved step.
    pub keep_ratio: f64,
    /// Error budget; a full evaluation fires once the accumulated proxy reaches it.
    pub error_threshold: f64,
    pub warmup_steps: usize,
    /// High-pass cutoff of the frequency score, as a fraction of the maximum
    /// radial frequency.
    pub freq_cutoff: f64,
    /// Recompute the frequency score at every carved step instead of once.
    pub recompute_freq: bool,
}

impl Default for CarveConfig {
    fn default() -> Self {
        Self {
            gamma: 0.7,
            keep_ratio: 0.1,
            error_threshold: 1.5,
            warmup_steps: 2,
            freq_cutoff: 0.25,
            recompute_freq: false,
        }
    }
}

impl CarveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(Error::invalid(format!(
                "keep_ratio must be in (0, 1], got {}",
                self.keep_ratio
            )));
        }
        // 0 forces every step, +inf disables refreshes after warmup
        if !(self.error_threshold >= 0.0) {
            return Err(Error::invalid(format!(
                "error_threshold must be >= 0, got {}",
                self.error_threshold
            )));
        }
        if !(self.freq_cutoff > 0.0 && self.freq_cutoff < 1.0) {
            return Err(Error::invalid(format!(
                "freq_cutoff must be in (0, 1), got {}",
                self.freq_cutoff
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyScores {
    pub magnitude: Vec<f64>,
    pub abruptness: Vec<f64>,
    pub freq: Vec<f64>,
    pub unified: Vec<f64>,
}

impl SaliencyScores {
    pub fn new(magnitude: Vec<f64>, abruptness: Vec<f64>, freq: Vec<f64>, gamma: f64) -> Result<Self> {
        let unified = unified_importance(&magnitude, &abruptness, &freq, gamma)?;
        Ok(Self {
            magnitude,
            abruptness,
            freq,
            unified,
        })
    }
}

fn row_norms(m: &TokenMatrix) -> Vec<f64> {
    m.axis_iter(Axis(0))
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

pub fn magnitude_scores(v_t: &TokenMatrix) -> Vec<f64> {
    row_norms(v_t)
}

pub fn abruptness_scores(v_t: &TokenMatrix, v_prev: &TokenMatrix) -> Result<Vec<f64>> {
    check_same_shape(v_t.dim(), v_prev.dim())?;
    Ok(row_norms(&(v_t - v_prev)))
}

/// High-pass response of the token feature norms scattered onto their grid.
///
/// Norms are summed into a dense grid, every bin at or below
/// `cutoff * max_radius` is zeroed, and each token reads back the magnitude of
/// the filtered field at its own cell.
pub fn freq_scores(
    positions: &[[i64; 3]],
    feature_norms: &[f64],
    grid_dims: [usize; 3],
    cutoff: f64,
) -> Result<Vec<f64>> {
    if positions.len() != feature_norms.len() {
        return Err(Error::invalid(format!(
            "{} positions for {} feature norms",
            positions.len(),
            feature_norms.len()
        )));
    }
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(Error::invalid(format!("cutoff must be in (0, 1), got {cutoff}")));
    }
    let dims = grid_dims.to_vec();
    let mut grid = ComplexGrid::zeros(dims.clone())?;
    let mut cells = Vec::with_capacity(positions.len());
    for p in positions {
        if p.iter().any(|&c| c < 0) {
            return Err(Error::invalid(format!("position {p:?} outside grid {grid_dims:?}")));
        }
        let index = [p[0] as usize, p[1] as usize, p[2] as usize];
        cells.push(flat_index(&dims, &index)?);
    }
    for (&cell, &norm) in cells.iter().zip(feature_norms) {
        grid.values_mut()[cell] += Complex64::new(norm, 0.0);
    }
    fft_nd_in_place(&mut grid, Direction::Forward)?;
    for (value, keep) in grid.values_mut().iter_mut().zip(high_band(&dims, cutoff)) {
        if !keep {
            *value = Complex64::new(0.0, 0.0);
        }
    }
    fft_nd_in_place(&mut grid, Direction::Inverse)?;
    Ok(cells.iter().map(|&c| grid.values()[c].norm()).collect())
}

/// Min-max normalization to `[0, 1]`; constant input maps to zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / span).collect()
}

/// `½(m + γ·a) + ½·s` on already-normalized cues.
pub fn fuse_importance(magnitude: f64, abruptness: f64, freq: f64, gamma: f64) -> f64 {
    0.5 * (magnitude + gamma * abruptness) + 0.5 * freq
}

/// Normalizes each cue across tokens, then fuses them per token.
pub fn unified_importance(
    magnitude: &[f64],
    abruptness: &[f64],
    freq: &[f64],
    gamma: f64,
) -> Result<Vec<f64>> {
    if magnitude.len() != abruptness.len() || magnitude.len() != freq.len() {
        return Err(Error::invalid(format!(
            "score lengths differ: {}, {}, {}",
            magnitude.len(),
            abruptness.len(),
            freq.len()
        )));
    }
    let m = min_max_normalize(magnitude);
    let a = min_max_normalize(abruptness);
    let s = min_max_normalize(freq);
    Ok((0..m.len())
        .map(|i| fuse_importance(m[i], a[i], s[i], gamma))
        .collect())
}

/// Number of tokens a carve keeps: `max(1, floor(keep_ratio * n))`.
pub fn carve_count(n: usize, keep_ratio: f64) -> usize {
    ((keep_ratio * n as f64).floor() as usize).clamp(1, n.max(1))
}

/// Indices of the top tokens by importance, highest first; ties go to the lower index.
pub fn top_k(importance: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..importance.len()).collect();
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

pub fn carve_mask(importance: &[f64], keep_ratio: f64) -> Result<Vec<bool>> {
    if importance.is_empty() {
        return Err(Error::invalid("cannot carve an empty token set"));
    }
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::invalid(format!("keep_ratio must be in (0, 1], got {keep_ratio}")));
    }
    let mut mask = vec![false; importance.len()];
    for i in top_k(importance, carve_count(importance.len(), keep_ratio)) {
        mask[i] = true;
    }
    Ok(mask)
}

/// Output change per unit input change. `Undefined` when the input did not move.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Curvature {
    Finite(f64),
    Undefined,
}

impl Curvature {
    pub fn value(self) -> Option<f64> {
        match self {
            Curvature::Finite(k) => Some(k),
            Curvature::Undefined => None,
        }
    }
}

pub fn curvature(
    v_t: &TokenMatrix,
    v_prev: &TokenMatrix,
    x_t: &TokenMatrix,
    x_prev: &TokenMatrix,
) -> Result<Curvature> {
    check_same_shape(v_t.dim(), v_prev.dim())?;
    check_same_shape(v_t.dim(), x_t.dim())?;
    check_same_shape(v_t.dim(), x_prev.dim())?;
    let dx = frobenius_diff(x_t, x_prev);
    if !(dx > 0.0) {
        return Ok(Curvature::Undefined);
    }
    Ok(Curvature::Finite(frobenius_diff(v_t, v_prev) / dx))
}

/// State of the last full evaluation of the refinement stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentCache {
    pub anchor_step: usize,
    /// `v_anchor - x_anchor`.
    pub offset: TokenMatrix,
    pub kappa: Curvature,
    /// Relative-change proxy accumulated since the anchor.
    pub accumulated_error: f64,
}

impl TangentCache {
    pub fn new(anchor_step: usize, v: &TokenMatrix, x: &TokenMatrix, kappa: Curvature) -> Self {
        Self {
            anchor_step,
            offset: v - x,
            kappa,
            accumulated_error: 0.0,
        }
    }

    /// Tangent prediction `x + Δ`.
    pub fn predict(&self, x: &TokenMatrix) -> TokenMatrix {
        x + &self.offset
    }
}

/// Adds `κ_anchor · ‖x_t - x_prev‖ / ‖v_prev‖` to the budget and returns the
/// new total. An undefined anchor curvature saturates the budget.
pub fn accumulate_error(
    cache: &mut TangentCache,
    x_t: &TokenMatrix,
    x_prev: &TokenMatrix,
    v_prev_norm: f64,
) -> Result<f64> {
    check_same_shape(x_t.dim(), x_prev.dim())?;
    if !(v_prev_norm > 0.0) {
        return Err(Error::invalid(format!(
            "previous output norm must be > 0, got {v_prev_norm}"
        )));
    }
    let step_error = match cache.kappa {
        Curvature::Finite(k) => k * frobenius_diff(x_t, x_prev) / v_prev_norm,
        Curvature::Undefined => f64::INFINITY,
    };
    cache.accumulated_error += step_error;
    Ok(cache.accumulated_error)
}

/// Result of one refinement step.
#[derive(Debug, Clone)]
pub struct SlatStepOutcome {
    pub output: TokenMatrix,
    pub decision: StepDecision,
    pub evaluated_tokens: usize,
    pub carve: Option<CarveEvent>,
}

/// Stateful driver of the refinement stage: owns the tangent cache, the last
/// two outputs, and the frequency score.
pub struct SlatStage<'b, B: Backbone + ?Sized> {
    backbone: &'b B,
    config: CarveConfig,
    cache: Option<TangentCache>,
    prev_input: Option<TokenMatrix>,
    prev_output: Option<TokenMatrix>,
    prev_prev_output: Option<TokenMatrix>,
    freq: Option<Vec<f64>>,
}

impl<'b, B: Backbone + ?Sized> SlatStage<'b, B> {
    pub fn new(backbone: &'b B, config: CarveConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            backbone,
            config,
            cache: None,
            prev_input: None,
            prev_output: None,
            prev_prev_output: None,
            freq: None,
        })
    }

    pub fn cache(&self) -> Option<&TangentCache> {
        self.cache.as_ref()
    }

    /// Saliency from the two most recent outputs. Without a second output the
    /// abruptness cue is zero.
    pub fn saliency(&mut self) -> Result<Option<SaliencyScores>> {
        let Some(v_prev) = self.prev_output.as_ref() else {
            return Ok(None);
        };
        let magnitude = magnitude_scores(v_prev);
        let abruptness = match self.prev_prev_output.as_ref() {
            Some(older) => abruptness_scores(v_prev, older)?,
            None => vec![0.0; magnitude.len()],
        };
        if self.freq.is_none() || self.config.recompute_freq {
            self.freq = Some(match self.backbone.geometry() {
                Some(Geometry {
                    positions,
                    grid_dims,
                }) => freq_scores(positions, &magnitude, *grid_dims, self.config.freq_cutoff)?,
                None => vec![0.0; magnitude.len()],
            });
        }
        let freq = self.freq.clone().unwrap_or_default();
        SaliencyScores::new(magnitude, abruptness, freq, self.config.gamma).map(Some)
    }

    fn needs_refresh(&mut self, step: usize, x_t: &TokenMatrix) -> Result<bool> {
        if step < self.config.warmup_steps {
            return Ok(true);
        }
        let (Some(cache), Some(x_prev), Some(v_prev)) =
            (self.cache.as_mut(), self.prev_input.as_ref(), self.prev_output.as_ref())
        else {
            return Ok(true);
        };
        let v_norm = frobenius(v_prev);
        if !(v_norm > 0.0) {
            // zero output gives no scale to measure change against
            return Ok(true);
        }
        let total = accumulate_error(cache, x_t, x_prev, v_norm)?;
        Ok(total >= self.config.error_threshold)
    }

    pub fn step(&mut self, step: usize, x_t: &TokenMatrix) -> Result<SlatStepOutcome> {
        let n = self.backbone.token_count();
        check_latent(x_t, n, self.backbone.feature_dim())?;

        let refresh = self.needs_refresh(step, x_t)?;
        let warm = step < self.config.warmup_steps || self.cache.is_none();

        let outcome = if !refresh {
            let cache = self.cache.as_ref().expect("refresh forced without cache");
            SlatStepOutcome {
                output: cache.predict(x_t),
                decision: StepDecision::TangentReuse,
                evaluated_tokens: 0,
                carve: None,
            }
        } else if warm {
            let v = self.backbone.eval(x_t, step)?;
            check_latent(&v, n, self.backbone.feature_dim())?;
            SlatStepOutcome {
                output: v,
                decision: StepDecision::FullEval,
                evaluated_tokens: n,
                carve: None,
            }
        } else {
            self.carved_eval(step, x_t)?
        };

        let kappa = match (self.prev_input.as_ref(), self.prev_output.as_ref()) {
            (Some(xp), Some(vp)) if outcome.decision.runs_backbone() => {
                curvature(&outcome.output, vp, x_t, xp)?
            }
            _ => Curvature::Undefined,
        };
        if outcome.decision.runs_backbone() {
            self.cache = Some(TangentCache::new(step, &outcome.output, x_t, kappa));
        }
        self.prev_prev_output = self.prev_output.replace(outcome.output.clone());
        self.prev_input = Some(x_t.clone());
        Ok(outcome)
    }

    fn carved_eval(&mut self, step: usize, x_t: &TokenMatrix) -> Result<SlatStepOutcome> {
        let n = self.backbone.token_count();
        let scores = self
            .saliency()?
            .ok_or_else(|| Error::invalid("carved evaluation without a previous output"))?;
        let active = top_k(&scores.unified, carve_count(n, self.config.keep_ratio));
        let mut rows = active.clone();
        rows.sort_unstable();

        let cache = self.cache.as_ref().expect("carved evaluation without cache");
        let mut output = cache.predict(x_t);
        let fresh = self.backbone.eval_rows(x_t, step, &rows)?;
        check_same_shape((rows.len(), self.backbone.feature_dim()), fresh.dim())?;
        for (src, &dst) in fresh.axis_iter(Axis(0)).zip(&rows) {
            output.row_mut(dst).assign(&src);
        }
        Ok(SlatStepOutcome {
            output,
            decision: StepDecision::CarvedEval { active: rows.len() },
            evaluated_tokens: rows.len(),
            carve: Some(CarveEvent {
                step,
                importance: scores.unified,
                active: rows,
            }),
        })
    }
}

/// Runs the refinement stage for `total_steps` steps.
pub fn run_slat_stage<B: Backbone + ?Sized>(
    backbone: &B,
    config: &CarveConfig,
    total_steps: usize,
) -> Result<(TrajectoryRecord, RunMetrics)> {
    let mut stage = SlatStage::new(backbone, *config)?;
    let mut x = backbone.initial_latent();
    let mut record = TrajectoryRecord {
        inputs: Vec::with_capacity(total_steps),
        outputs: Vec::with_capacity(total_steps),
        final_latent: x.clone(),
        partition: backbone.partition().cloned(),
        decisions: Vec::with_capacity(total_steps),
        anchor_steps: Vec::new(),
        evaluated_tokens: Vec::with_capacity(total_steps),
        carve_events: Vec::new(),
    };
    for step in 0..total_steps {
        let outcome = stage.step(step, &x)?;
        if outcome.decision.runs_backbone() {
            record.anchor_steps.push(step);
        }
        let next = backbone.advance(&x, &outcome.output, step);
        record.inputs.push(std::mem::replace(&mut x, next));
        record.outputs.push(outcome.output);
        record.decisions.push(outcome.decision);
        record.evaluated_tokens.push(outcome.evaluated_tokens);
        record.carve_events.extend(outcome.carve);
    }
    record.final_latent = x;
    let metrics = RunMetrics::from_record(&record);
    Ok((record, metrics))
}
