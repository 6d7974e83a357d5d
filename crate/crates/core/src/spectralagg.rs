//! Spectral-aware token aggregation.
//!
//! The silhouette mask and the coarse voxel grid are each scored by their
//! high-frequency energy ratio (HFER). A weighted blend picks a downsampling
//! factor from a three-level schedule, and decoder tokens are merged by
//! flooring their coordinates by that factor and max-pooling features per bin.
//!
//! Aggregated positions are bin coordinates `floor(p / S)`. To map a bin back
//! to original voxel units use `p_hat * S + S / 2`.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{fft_nd_in_place, high_band, ComplexGrid, Direction, RealGrid};

pub const DEFAULT_CUTOFF: f64 = 0.5;
pub const DEFAULT_WEIGHT: f64 = 0.9;

/// Binary silhouette mask of extent `H x W`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask2D {
    dims: [usize; 2],
    values: Vec<f64>,
}

impl Mask2D {
    pub fn new(dims: [usize; 2], values: Vec<f64>) -> Result<Self> {
        check_len(dims.iter().product(), values.len())?;
        if let Some(i) = values.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid(format!(
                "mask values must be 0 or 1, found {} at cell {i}",
                values[i]
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn from_fn(dims: [usize; 2], mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut values = Vec::with_capacity(dims[0] * dims[1]);
        for r in 0..dims[0] {
            for c in 0..dims[1] {
                values.push(if f(r, c) { 1.0 } else { 0.0 });
            }
        }
        Self::new(dims, values)
    }

    /// Occupancy along the last voxel axis: a cell is set when any voxel in its
    /// column is nonzero.
    pub fn project(voxels: &VoxelGrid) -> Self {
        let [x, y, z] = voxels.dims;
        let values = (0..x * y)
            .map(|col| {
                let column = &voxels.values[col * z..(col + 1) * z];
                if column.iter().any(|&v| v > 0.0) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Self {
            dims: [x, y],
            values,
        }
    }

    pub fn dims(&self) -> [usize; 2] {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_grid(&self) -> RealGrid {
        RealGrid::new(self.dims.to_vec(), self.values.clone()).expect("validated extents")
    }

    /// Accepts a 3D grid whose last extent is 1.
    pub fn from_grid(grid: &RealGrid) -> Result<Self> {
        match *grid.dims() {
            [h, w, 1] => Self::new([h, w], grid.values().to_vec()),
            [h, w] => Self::new([h, w], grid.values().to_vec()),
            ref d => Err(Error::invalid(format!("mask grid must be H x W x 1, got {d:?}"))),
        }
    }

    pub fn to_grid_3d(&self) -> RealGrid {
        RealGrid::new(vec![self.dims[0], self.dims[1], 1], self.values.clone())
            .expect("validated extents")
    }
}

/// Coarse voxel occupancy of extent `X x Y x Z`, last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    values: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], values: Vec<f64>) -> Result<Self> {
        check_len(dims.iter().product(), values.len())?;
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!(
                "voxel values must lie in [0, 1], found {} at cell {i}",
                values[i]
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut([usize; 3]) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(dims.iter().product());
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    values.push(f([x, y, z]));
                }
            }
        }
        Self::new(dims, values)
    }

    /// Unit occupancy at each position. Positions outside the grid are rejected.
    pub fn from_positions(dims: [usize; 3], positions: &[[i64; 3]]) -> Result<Self> {
        let mut values = vec![0.0; dims.iter().product()];
        for p in positions {
            let inside = (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < dims[a]);
            if !inside {
                return Err(Error::invalid(format!("position {p:?} outside grid {dims:?}")));
            }
            let [x, y, z] = p.map(|c| c as usize);
            values[(x * dims[1] + y) * dims[2] + z] = 1.0;
        }
        Self::new(dims, values)
    }

    pub fn from_grid(grid: &RealGrid) -> Result<Self> {
        match *grid.dims() {
            [x, y, z] => Self::new([x, y, z], grid.values().to_vec()),
            ref d => Err(Error::invalid(format!("voxel grid must be 3D, got {d:?}"))),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_grid(&self) -> RealGrid {
        RealGrid::new(self.dims.to_vec(), self.values.clone()).expect("validated extents")
    }

    /// Positions of nonzero cells in storage order.
    pub fn occupied(&self) -> Vec<[i64; 3]> {
        let [_, y, z] = self.dims;
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(i, _)| [(i / (y * z)) as i64, ((i / z) % y) as i64, (i % z) as i64])
            .collect()
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == 0 {
        return Err(Error::invalid("grid extents must be >= 1"));
    }
    if expected != actual {
        return Err(Error::invalid(format!(
            "grid extents hold {expected} cells but {actual} values were given"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralProfile {
    pub hfer_2d: f64,
    pub hfer_3d: f64,
    pub weight_w: f64,
    pub joint: f64,
}

/// Complexity thresholds and the factor used in each regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggSchedule {
    pub tau_low: f64,
    pub tau_high: f64,
    /// Factors for `[joint > tau_high, tau_low <= joint <= tau_high, joint < tau_low]`.
    pub levels: [f64; 3],
}

impl Default for AggSchedule {
    fn default() -> Self {
        Self {
            tau_low: 0.5,
            tau_high: 0.7,
            levels: [1.25, 1.5, 2.0],
        }
    }
}

impl AggSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.tau_low && self.tau_low <= self.tau_high && self.tau_high <= 1.0) {
            return Err(Error::invalid(format!(
                "tau_low/tau_high must satisfy 0 <= tau_low <= tau_high <= 1, got tau_low={} tau_high={}",
                self.tau_low, self.tau_high
            )));
        }
        if self.levels.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!(
                "levels must be positive, got {:?}",
                self.levels
            )));
        }
        Ok(())
    }
}

/// Decoder tokens: unique integer positions with equal-width features.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    positions: Vec<[i64; 3]>,
    features: Array2<f64>,
}

impl TokenSet {
    pub fn new(positions: Vec<[i64; 3]>, features: Array2<f64>) -> Result<Self> {
        if positions.len() != features.nrows() {
            return Err(Error::invalid(format!(
                "{} positions but {} feature rows",
                positions.len(),
                features.nrows()
            )));
        }
        let mut seen = BTreeSet::new();
        for p in &positions {
            if !seen.insert(*p) {
                return Err(Error::invalid(format!("duplicate token position {p:?}")));
            }
        }
        Ok(Self {
            positions,
            features,
        })
    }

    pub fn positions(&self) -> &[[i64; 3]] {
        &self.positions
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Share of spectral power in bins above `cutoff * max_radius`. Zero for a
/// signal with no power.
pub fn hfer(grid: &RealGrid, cutoff: f64) -> Result<f64> {
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(Error::invalid(format!("cutoff must lie in (0, 1), got {cutoff}")));
    }
    if grid.is_empty() {
        return Ok(0.0);
    }
    let mut spectrum = ComplexGrid::from_real(grid);
    fft_nd_in_place(&mut spectrum, Direction::Forward)?;
    let band = high_band(grid.dims(), cutoff);
    let mut total = 0.0;
    let mut high = 0.0;
    for (c, &is_high) in spectrum.values().iter().zip(&band) {
        let p = c.norm_sqr();
        total += p;
        if is_high {
            high += p;
        }
    }
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok((high / total).clamp(0.0, 1.0))
}

pub fn joint_complexity(h2d: f64, h3d: f64, w: f64) -> Result<f64> {
    for (name, v) in [("h2d", h2d), ("h3d", h3d), ("w", w)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    Ok(w * h2d + (1.0 - w) * h3d)
}

pub fn select_scale(h_joint: f64, schedule: &AggSchedule) -> f64 {
    let [fine, medium, coarse] = schedule.levels;
    if h_joint > schedule.tau_high {
        fine
    } else if h_joint >= schedule.tau_low {
        medium
    } else {
        coarse
    }
}

pub fn quantize_coords(positions: &[[i64; 3]], scale: f64) -> Result<Vec<[i64; 3]>> {
    check_scale(scale)?;
    Ok(positions.iter().map(|p| quantize(p, scale)).collect())
}

fn quantize(p: &[i64; 3], scale: f64) -> [i64; 3] {
    p.map(|c| (c as f64 / scale).floor() as i64)
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("scale must be positive, got {scale}")));
    }
    Ok(())
}

/// Max-pools features per quantized bin. Output bins are in ascending
/// coordinate order.
pub fn aggregate(tokens: &TokenSet, scale: f64) -> Result<TokenSet> {
    check_scale(scale)?;
    let width = tokens.feature_dim();
    let mut bins: BTreeMap<[i64; 3], Vec<f64>> = BTreeMap::new();
    for (p, row) in tokens.positions.iter().zip(tokens.features.rows()) {
        bins.entry(quantize(p, scale))
            .and_modify(|acc| {
                for (a, &v) in acc.iter_mut().zip(row.iter()) {
                    *a = a.max(v);
                }
            })
            .or_insert_with(|| row.to_vec());
    }
    let mut features = Array2::zeros((bins.len(), width));
    let mut positions = Vec::with_capacity(bins.len());
    for (i, (bin, feat)) in bins.into_iter().enumerate() {
        positions.push(bin);
        features.row_mut(i).assign(&ndarray::ArrayView1::from(&feat));
    }
    Ok(TokenSet {
        positions,
        features,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggOutcome {
    pub profile: SpectralProfile,
    pub factor: f64,
    pub tokens: TokenSet,
}

pub fn spectral_profile(mask: &Mask2D, voxels: &VoxelGrid, cutoff: f64, w: f64) -> Result<SpectralProfile> {
    let hfer_2d = hfer(&mask.to_grid(), cutoff)?;
    let hfer_3d = hfer(&voxels.to_grid(), cutoff)?;
    let joint = joint_complexity(hfer_2d, hfer_3d, w)?;
    Ok(SpectralProfile {
        hfer_2d,
        hfer_3d,
        weight_w: w,
        joint,
    })
}

pub fn analyze_and_aggregate(
    mask: &Mask2D,
    voxels: &VoxelGrid,
    tokens: &TokenSet,
    schedule: &AggSchedule,
    cutoff: f64,
    w: f64,
) -> Result<AggOutcome> {
    schedule.validate()?;
    let profile = spectral_profile(mask, voxels, cutoff, w)?;
    let factor = select_scale(profile.joint, schedule);
    let tokens = aggregate(tokens, factor)?;
    Ok(AggOutcome {
        profile,
        factor,
        tokens,
    })
}
