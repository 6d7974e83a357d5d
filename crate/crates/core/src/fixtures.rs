//! Reference instances for the aggregation schedule.
//!
//! - `smooth-ellipsoid`: a filled ellipse silhouette and an ellipsoid with a
//!   soft two-voxel rim. Nearly all energy sits at low frequencies.
//! - `checkerboard`: occupancy on every second cell along each axis. Its
//!   spectrum is a lattice of equal peaks at DC and at Nyquist combinations,
//!   so the 2D ratio is exactly 3/4 and the 3D ratio 7/8.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::spectralagg::{Mask2D, TokenSet, VoxelGrid};

pub const MASK_DIMS: [usize; 2] = [64, 64];
pub const VOXEL_DIMS: [usize; 3] = [32, 32, 32];
pub const NAMES: [&str; 2] = ["smooth-ellipsoid", "checkerboard"];

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub name: &'static str,
    pub mask: Mask2D,
    pub voxels: VoxelGrid,
}

impl Fixture {
    /// One token per occupied voxel; feature is the occupancy.
    pub fn tokens(&self) -> TokenSet {
        tokens_from_voxels(&self.voxels)
    }
}

pub fn tokens_from_voxels(voxels: &VoxelGrid) -> TokenSet {
    let positions = voxels.occupied();
    let [_, y, z] = voxels.dims();
    let feats: Vec<f64> = positions
        .iter()
        .map(|p| voxels.values()[(p[0] as usize * y + p[1] as usize) * z + p[2] as usize])
        .collect();
    let n = positions.len();
    TokenSet::new(positions, Array2::from_shape_vec((n, 1), feats).expect("one column"))
        .expect("occupied cells are unique")
}

pub fn by_name(name: &str) -> Result<Fixture> {
    match name {
        "smooth-ellipsoid" => Ok(smooth_ellipsoid()),
        "checkerboard" => Ok(checkerboard()),
        other => Err(Error::invalid(format!(
            "unknown fixture {other:?}, expected one of {NAMES:?}"
        ))),
    }
}

pub fn smooth_ellipsoid() -> Fixture {
    let mask = Mask2D::from_fn(MASK_DIMS, |r, c| {
        let u = (r as f64 - 31.5) / 22.0;
        let v = (c as f64 - 31.5) / 15.0;
        u * u + v * v <= 1.0
    })
    .expect("binary");
    let radii = [11.0, 8.0, 6.0];
    let voxels = VoxelGrid::from_fn(VOXEL_DIMS, |p| {
        let rho: f64 = (0..3)
            .map(|a| ((p[a] as f64 - 15.5) / radii[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        // signed distance in voxels, approximately, ramped over two voxels
        let d = (rho - 1.0) * 8.0;
        smoothstep(1.0 - (d + 1.0) / 2.0)
    })
    .expect("values in [0, 1]");
    Fixture {
        name: "smooth-ellipsoid",
        mask,
        voxels,
    }
}

pub fn checkerboard() -> Fixture {
    let mask = Mask2D::from_fn(MASK_DIMS, |r, c| r % 2 == 0 && c % 2 == 0).expect("binary");
    let voxels = VoxelGrid::from_fn(VOXEL_DIMS, |p| {
        if p.iter().all(|c| c % 2 == 0) {
            1.0
        } else {
            0.0
        }
    })
    .expect("binary");
    Fixture {
        name: "checkerboard",
        mask,
        voxels,
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}
