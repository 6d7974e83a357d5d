//! The step-function abstraction every caching mechanism drives.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::stepcache::ModalityPartition;

/// One row per token, one column per feature channel.
pub type TokenMatrix = Array2<f64>;

/// Integer voxel positions of the tokens and the grid they live in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Geometry {
    pub positions: Vec<[i64; 3]>,
    pub grid_dims: [usize; 3],
}

impl Geometry {
    pub fn new(positions: Vec<[i64; 3]>, grid_dims: [usize; 3]) -> Result<Self> {
        for p in &positions {
            let inside = p
                .iter()
                .zip(&grid_dims)
                .all(|(&c, &d)| c >= 0 && (c as usize) < d);
            if !inside {
                return Err(Error::invalid(format!(
                    "position {p:?} outside grid {grid_dims:?}"
                )));
            }
        }
        Ok(Self {
            positions,
            grid_dims,
        })
    }
}

/// A deterministic denoiser `v = f(x, step)` plus the sampler update that turns
/// its output into the next latent.
///
/// `step` is the 0-based position in the run; the diffusion timestep counts
/// down as `step` counts up. Tokens must be evaluated independently so that
/// [`Backbone::eval_rows`] on a subset agrees with the same rows of
/// [`Backbone::eval`].
pub trait Backbone: Sync {
    fn token_count(&self) -> usize;

    fn feature_dim(&self) -> usize;

    fn initial_latent(&self) -> TokenMatrix;

    /// Outputs for `rows` only, in the order given.
    fn eval_rows(&self, x: &TokenMatrix, step: usize, rows: &[usize]) -> Result<TokenMatrix>;

    fn eval(&self, x: &TokenMatrix, step: usize) -> Result<TokenMatrix> {
        let rows: Vec<usize> = (0..x.nrows()).collect();
        self.eval_rows(x, step, &rows)
    }

    /// Euler step size of the sampler.
    fn step_size(&self) -> f64;

    fn advance(&self, x: &TokenMatrix, v: &TokenMatrix, _step: usize) -> TokenMatrix {
        x + &(v * self.step_size())
    }

    fn geometry(&self) -> Option<&Geometry> {
        None
    }

    fn partition(&self) -> Option<&ModalityPartition> {
        None
    }
}

pub(crate) fn check_latent(x: &TokenMatrix, tokens: usize, dim: usize) -> Result<()> {
    crate::error::check_same_shape((tokens, dim), x.dim())
}

/// Frobenius norm.
pub fn frobenius(m: &TokenMatrix) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Frobenius norm of `a - b`.
pub fn frobenius_diff(a: &TokenMatrix, b: &TokenMatrix) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

/// `‖a - b‖ / ‖b‖`, falling back to the absolute difference when `b` is zero.
pub fn relative_error(a: &TokenMatrix, b: &TokenMatrix) -> f64 {
    let diff = frobenius_diff(a, b);
    let base = frobenius(b);
    if base > 0.0 {
        diff / base
    } else {
        diff
    }
}

pub(crate) fn select_rows(m: &TokenMatrix, rows: &[usize]) -> TokenMatrix {
    m.select(Axis(0), rows)
}
