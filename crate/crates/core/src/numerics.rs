//! Discrete Fourier transforms over 1-3 axis grids.
//!
//! Conventions used everywhere in this crate:
//!
//! - forward transforms are unnormalized, inverse transforms divide by the length;
//! - bins follow standard DFT ordering (bin 0 is DC, bins wrap at `N/2`);
//! - grids are row-major with the last axis varying fastest.
//!
//! Power-of-two lengths use an iterative radix-2 kernel. Every other length goes
//! through Bluestein's chirp-z reformulation on a power-of-two convolution, so
//! arbitrary mask and voxel extents are transformed exactly (no zero padding of
//! the signal itself).

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Inverse,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Forward => -1.0,
            Direction::Inverse => 1.0,
        }
    }
}

fn validate_dims(dims: &[usize], len: usize) -> Result<()> {
    if dims.is_empty() || dims.len() > 3 {
        return Err(Error::invalid(format!(
            "grid must have 1 to 3 axes, got {}",
            dims.len()
        )));
    }
    if dims.contains(&0) {
        return Err(Error::invalid(format!("grid extents must be >= 1, got {dims:?}")));
    }
    let expected: usize = dims.iter().product();
    if expected != len {
        return Err(Error::invalid(format!(
            "grid {dims:?} needs {expected} values, got {len}"
        )));
    }
    Ok(())
}

/// Row-major offset of `index` within `dims`.
pub fn flat_index(dims: &[usize], index: &[usize]) -> Result<usize> {
    if index.len() != dims.len() {
        return Err(Error::invalid(format!(
            "index {index:?} has {} axes, grid has {}",
            index.len(),
            dims.len()
        )));
    }
    let mut flat = 0usize;
    for (&i, &d) in index.iter().zip(dims) {
        if i >= d {
            return Err(Error::invalid(format!("index {index:?} outside grid {dims:?}")));
        }
        flat = flat * d + i;
    }
    Ok(flat)
}

/// Inverse of [`flat_index`]; `flat` must be in range.
pub fn unflatten(dims: &[usize], mut flat: usize) -> Vec<usize> {
    let mut index = vec![0; dims.len()];
    for axis in (0..dims.len()).rev() {
        index[axis] = flat % dims[axis];
        flat /= dims[axis];
    }
    index
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid {
    dims: Vec<usize>,
    values: Vec<Complex64>,
}

impl ComplexGrid {
    pub fn new(dims: Vec<usize>, values: Vec<Complex64>) -> Result<Self> {
        validate_dims(&dims, values.len())?;
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let len = dims.iter().product();
        Self::new(dims, vec![Complex64::new(0.0, 0.0); len])
    }

    pub fn from_real(grid: &RealGrid) -> Self {
        Self {
            dims: grid.dims.clone(),
            values: grid.values.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, index: &[usize]) -> Result<Complex64> {
        Ok(self.values[flat_index(&self.dims, index)?])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealGrid {
    dims: Vec<usize>,
    values: Vec<f64>,
}

impl RealGrid {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        validate_dims(&dims, values.len())?;
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let len = dims.iter().product();
        Self::new(dims, vec![0.0; len])
    }

    /// Builds a grid by evaluating `f` at every multi-index.
    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let len: usize = dims.iter().product();
        validate_dims(&dims, len)?;
        let values = (0..len).map(|flat| f(&unflatten(&dims, flat))).collect();
        Ok(Self { dims, values })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.values[flat_index(&self.dims, index)?])
    }
}

/// Precomputed transform for one length and direction.
#[derive(Debug, Clone)]
pub struct FftPlan {
    len: usize,
    direction: Direction,
    kernel: Kernel,
}

#[derive(Debug, Clone)]
enum Kernel {
    Radix2(Radix2),
    Bluestein(Bluestein),
}

/// Iterative decimation-in-time transform for power-of-two lengths.
#[derive(Debug, Clone)]
struct Radix2 {
    // twiddles[j] = exp(sign * 2*pi*i * j / len), j < len/2
    twiddles: Vec<Complex64>,
}

impl Radix2 {
    fn new(len: usize, sign: f64) -> Self {
        debug_assert!(len.is_power_of_two());
        let twiddles = (0..len / 2)
            .map(|j| Complex64::from_polar(1.0, sign * 2.0 * PI * j as f64 / len as f64))
            .collect();
        Self { twiddles }
    }

    fn process(&self, buf: &mut [Complex64]) {
        let n = buf.len();
        if n <= 1 {
            return;
        }
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                buf.swap(i, j);
            }
        }
        let mut size = 2;
        while size <= n {
            let half = size / 2;
            let stride = n / size;
            for start in (0..n).step_by(size) {
                for k in 0..half {
                    let w = self.twiddles[k * stride];
                    let a = buf[start + k];
                    let b = buf[start + k + half] * w;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            size *= 2;
        }
    }
}

/// Chirp-z reformulation of an arbitrary-length DFT as a power-of-two
/// circular convolution.
#[derive(Debug, Clone)]
struct Bluestein {
    chirp: Vec<Complex64>,
    // forward transform of the conjugate chirp filter, length `inner.len`
    filter_spectrum: Vec<Complex64>,
    inner_forward: Radix2,
    inner_inverse: Radix2,
}

impl Bluestein {
    fn new(len: usize, sign: f64) -> Self {
        let m = (2 * len - 1).next_power_of_two();
        // keep k^2 reduced mod 2*len so the phase argument stays small
        let modulus = 2 * len as u128;
        let chirp: Vec<Complex64> = (0..len)
            .map(|k| {
                let k2 = (k as u128 * k as u128) % modulus;
                Complex64::from_polar(1.0, sign * PI * k2 as f64 / len as f64)
            })
            .collect();
        let mut filter = vec![Complex64::new(0.0, 0.0); m];
        filter[0] = chirp[0].conj();
        for k in 1..len {
            filter[k] = chirp[k].conj();
            filter[m - k] = chirp[k].conj();
        }
        let inner_forward = Radix2::new(m, -1.0);
        let inner_inverse = Radix2::new(m, 1.0);
        inner_forward.process(&mut filter);
        Self {
            chirp,
            filter_spectrum: filter,
            inner_forward,
            inner_inverse,
        }
    }

    fn process(&self, buf: &mut [Complex64]) {
        let n = buf.len();
        let m = self.filter_spectrum.len();
        let mut work = vec![Complex64::new(0.0, 0.0); m];
        for k in 0..n {
            work[k] = buf[k] * self.chirp[k];
        }
        self.inner_forward.process(&mut work);
        for (w, f) in work.iter_mut().zip(&self.filter_spectrum) {
            *w *= f;
        }
        self.inner_inverse.process(&mut work);
        let scale = 1.0 / m as f64;
        for k in 0..n {
            buf[k] = work[k] * self.chirp[k] * scale;
        }
    }
}

impl FftPlan {
    pub fn new(len: usize, direction: Direction) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("transform length must be >= 1"));
        }
        let sign = direction.sign();
        let kernel = if len.is_power_of_two() {
            Kernel::Radix2(Radix2::new(len, sign))
        } else {
            Kernel::Bluestein(Bluestein::new(len, sign))
        };
        Ok(Self {
            len,
            direction,
            kernel,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Transforms `buf` in place, applying `1/len` on the inverse direction.
    pub fn process(&self, buf: &mut [Complex64]) -> Result<()> {
        if buf.len() != self.len {
            return Err(Error::invalid(format!(
                "plan built for length {}, buffer has {}",
                self.len,
                buf.len()
            )));
        }
        match &self.kernel {
            Kernel::Radix2(k) => k.process(buf),
            Kernel::Bluestein(k) => k.process(buf),
        }
        if self.direction == Direction::Inverse {
            let scale = 1.0 / self.len as f64;
            buf.iter_mut().for_each(|v| *v *= scale);
        }
        Ok(())
    }
}

pub fn fft_1d(signal: &[Complex64], direction: Direction) -> Result<Vec<Complex64>> {
    let plan = FftPlan::new(signal.len(), direction)?;
    let mut out = signal.to_vec();
    plan.process(&mut out)?;
    Ok(out)
}

/// Separable transform: [`fft_1d`] along every axis in turn.
pub fn fft_nd(grid: &ComplexGrid, direction: Direction) -> Result<ComplexGrid> {
    let mut out = grid.clone();
    fft_nd_in_place(&mut out, direction)?;
    Ok(out)
}

pub fn fft_nd_in_place(grid: &mut ComplexGrid, direction: Direction) -> Result<()> {
    let dims = grid.dims.clone();
    let total = grid.values.len();
    for axis in 0..dims.len() {
        let len = dims[axis];
        if len == 1 {
            continue;
        }
        let plan = FftPlan::new(len, direction)?;
        let stride: usize = dims[axis + 1..].iter().product();
        let block = len * stride;
        let mut line = vec![Complex64::new(0.0, 0.0); len];
        for outer in (0..total).step_by(block) {
            for inner in 0..stride {
                let base = outer + inner;
                for (k, slot) in line.iter_mut().enumerate() {
                    *slot = grid.values[base + k * stride];
                }
                plan.process(&mut line)?;
                for (k, v) in line.iter().enumerate() {
                    grid.values[base + k * stride] = *v;
                }
            }
        }
    }
    Ok(())
}

/// Textbook O(n^2) DFT with the same normalization as [`fft_1d`].
pub fn naive_dft(signal: &[Complex64], direction: Direction) -> Result<Vec<Complex64>> {
    let n = signal.len();
    if n == 0 {
        return Err(Error::invalid("transform length must be >= 1"));
    }
    let sign = direction.sign();
    let scale = match direction {
        Direction::Forward => 1.0,
        Direction::Inverse => 1.0 / n as f64,
    };
    Ok((0..n)
        .map(|k| {
            let sum: Complex64 = signal
                .iter()
                .enumerate()
                .map(|(j, &x)| {
                    let phase = ((j * k) % n) as f64 / n as f64;
                    x * Complex64::from_polar(1.0, sign * 2.0 * PI * phase)
                })
                .sum();
            sum * scale
        })
        .collect())
}

/// Squared magnitude of the spectrum at one bin.
pub fn power_at(spectrum: &ComplexGrid, index: &[usize]) -> Result<f64> {
    Ok(spectrum.get(index)?.norm_sqr())
}

/// Per-axis centered frequency `min(k, N-k) / N` combined radially, in cycles
/// per sample. Axes of extent 1 contribute nothing.
pub fn radial_frequency(dims: &[usize], index: &[usize]) -> f64 {
    dims.iter()
        .zip(index)
        .map(|(&n, &k)| {
            let d = k.min(n - k) as f64 / n as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Largest value [`radial_frequency`] takes on `dims`.
pub fn max_radial_frequency(dims: &[usize]) -> f64 {
    dims.iter()
        .map(|&n| {
            let d = (n / 2) as f64 / n as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Flags the bins whose radial frequency exceeds `cutoff * max_radius`.
///
/// DC is never flagged. A grid with a single bin has no high band.
pub fn high_band(dims: &[usize], cutoff: f64) -> Vec<bool> {
    let total: usize = dims.iter().product();
    let threshold = cutoff * max_radial_frequency(dims);
    (0..total)
        .map(|flat| {
            let r = radial_frequency(dims, &unflatten(dims, flat));
            r > threshold && r > 0.0
        })
        .collect()
}
