//! Dense 3D scalar volumes: representation, resampling and intensity
//! standardization.
//!
//! Voxel data is stored as `f32` in x-fastest order, matching the on-disk
//! `.evr` layout, so a save/load round trip is bit-exact.

mod grid;
mod io;

pub use grid::{extract_patch, make_patch_grid, PatchGrid};
pub use io::{load_volume, save_volume, VolumeHeader, HEADER_VERSION};

use crate::error::{Error, Result};

/// Grid extent `(nx, ny, nz)` in voxels.
pub type Dims = [usize; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<f32>,
}

pub(crate) fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

impl Volume3 {
    pub fn new(dims: Dims, spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Argument(format!("dims must be positive, got {dims:?}")));
        }
        if !spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::Argument(format!("spacing must be positive, got {spacing:?}")));
        }
        let expected = voxel_count(dims);
        if data.len() != expected {
            return Err(Error::Size { expected, found: data.len() });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Value(format!("non-finite voxel at linear index {pos}")));
        }
        Ok(Self { dims, spacing, data })
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel with unit spacing.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(voxel_count(dims));
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, [1.0; 3], data)
    }

    pub fn filled(dims: Dims, value: f32) -> Result<Self> {
        Self::new(dims, [1.0; 3], vec![value; voxel_count(dims)])
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        if !spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::Argument(format!("spacing must be positive, got {spacing:?}")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn linear_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.linear_index(x, y, z)]
    }

    /// Trilinear interpolation at a continuous voxel coordinate; `None` when
    /// the point lies outside `[0, n-1]` on any axis.
    #[inline]
    pub fn sample(&self, p: [f64; 3]) -> Option<f32> {
        trilinear(&self.data, self.dims, p)
    }

    /// Population mean and standard deviation (divisor N), two-pass.
    pub fn mean_std(&self) -> (f64, f64) {
        mean_std(&self.data)
    }
}

pub(crate) fn mean_std(data: &[f32]) -> (f64, f64) {
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

#[inline]
pub(crate) fn trilinear(data: &[f32], dims: Dims, p: [f64; 3]) -> Option<f32> {
    let [nx, ny, nz] = dims;
    let [x, y, z] = p;
    // NaN coordinates fail these comparisons and fall out as None.
    if !(x >= 0.0 && y >= 0.0 && z >= 0.0) {
        return None;
    }
    if x > (nx - 1) as f64 || y > (ny - 1) as f64 || z > (nz - 1) as f64 {
        return None;
    }
    let (x0, y0, z0) = (x as usize, y as usize, z as usize);
    let (fx, fy, fz) = (x - x0 as f64, y - y0 as f64, z - z0 as f64);
    let dx = usize::from(x0 + 1 < nx);
    let dy = if y0 + 1 < ny { nx } else { 0 };
    let dz = if z0 + 1 < nz { nx * ny } else { 0 };
    let i = x0 + nx * (y0 + ny * z0);
    let c = |k: usize| data[k] as f64;
    let c00 = c(i) + fx * (c(i + dx) - c(i));
    let c10 = c(i + dy) + fx * (c(i + dy + dx) - c(i + dy));
    let c01 = c(i + dz) + fx * (c(i + dz + dx) - c(i + dz));
    let c11 = c(i + dz + dy) + fx * (c(i + dz + dy + dx) - c(i + dz + dy));
    let c0 = c00 + fy * (c10 - c00);
    let c1 = c01 + fy * (c11 - c01);
    Some((c0 + fz * (c1 - c0)) as f32)
}

/// Source coordinate of output voxel `i` when resampling `n_src` onto `n_dst`
/// points with voxel centres aligned.
#[inline]
pub(crate) fn center_aligned(i: usize, n_src: usize, n_dst: usize) -> f64 {
    (i as f64 + 0.5) * (n_src as f64 / n_dst as f64) - 0.5
}

/// Trilinear resampling onto a coarser (or equal) grid. Spacing scales with the
/// dims ratio so the physical extent is preserved.
pub fn downsample(v: &Volume3, target: Dims) -> Result<Volume3> {
    let src = v.dims;
    if target.contains(&0) {
        return Err(Error::Argument(format!("target dims must be >= 1, got {target:?}")));
    }
    if (0..3).any(|a| target[a] > src[a]) {
        return Err(Error::Argument(format!("target {target:?} exceeds source dims {src:?}")));
    }
    let xs: Vec<f64> = (0..target[0]).map(|i| center_aligned(i, src[0], target[0])).collect();
    let ys: Vec<f64> = (0..target[1]).map(|i| center_aligned(i, src[1], target[1])).collect();
    let zs: Vec<f64> = (0..target[2]).map(|i| center_aligned(i, src[2], target[2])).collect();
    let mut data = Vec::with_capacity(voxel_count(target));
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                let value = trilinear(&v.data, src, [x, y, z]).expect("center-aligned coordinates stay inside the source grid");
                data.push(value);
            }
        }
    }
    let spacing = [
        v.spacing[0] * src[0] as f64 / target[0] as f64,
        v.spacing[1] * src[1] as f64 / target[1] as f64,
        v.spacing[2] * src[2] as f64 / target[2] as f64,
    ];
    Volume3::new(target, spacing, data)
}

/// Zero-mean, unit-variance intensity standardization over all voxels.
pub fn standardize(v: &Volume3) -> Result<Volume3> {
    if v.len() < 2 {
        return Err(Error::Argument("standardize needs at least 2 voxels".into()));
    }
    let (mean, std) = v.mean_std();
    if !(std > 0.0) {
        return Err(Error::DegenerateInput("volume has zero intensity variance".into()));
    }
    let data = v.data.iter().map(|&x| ((x as f64 - mean) / std) as f32).collect();
    Volume3::new(v.dims, v.spacing, data)
}
