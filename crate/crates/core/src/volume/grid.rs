use serde::{Deserialize, Serialize};

use super::{Dims, Volume3};
use crate::error::{Error, Result};

/// Non-overlapping tiling of a volume by cubes of side `patch_side`, anchored
/// at the origin. Border voxels beyond the last whole cube are not covered.
///
/// Patch indices run x-fastest over the tile lattice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    patch_side: usize,
    volume_dims: Dims,
    counts: [usize; 3],
}

pub fn make_patch_grid(dims: Dims, patch_side: usize) -> Result<PatchGrid> {
    if patch_side == 0 {
        return Err(Error::Argument("patch side must be >= 1".into()));
    }
    if dims.iter().any(|&n| patch_side > n) {
        return Err(Error::Argument(format!("patch side {patch_side} exceeds volume dims {dims:?}")));
    }
    Ok(PatchGrid {
        patch_side,
        volume_dims: dims,
        counts: dims.map(|n| n / patch_side),
    })
}

impl PatchGrid {
    pub fn patch_side(&self) -> usize {
        self.patch_side
    }

    pub fn origin_stride(&self) -> usize {
        self.patch_side
    }

    pub fn volume_dims(&self) -> Dims {
        self.volume_dims
    }

    /// Tiles per axis.
    pub fn counts(&self) -> [usize; 3] {
        self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_voxels(&self) -> usize {
        self.patch_side.pow(3)
    }

    pub fn origin(&self, index: usize) -> Result<[usize; 3]> {
        self.check_index(index)?;
        let [cx, cy, _] = self.counts;
        let s = self.patch_side;
        Ok([(index % cx) * s, ((index / cx) % cy) * s, (index / (cx * cy)) * s])
    }

    pub fn patch_origins(&self) -> Vec<[usize; 3]> {
        (0..self.len()).map(|i| self.origin(i).expect("index in range")).collect()
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index >= self.len() {
            return Err(Error::Argument(format!(
                "patch index {index} out of range (grid has {} patches)",
                self.len()
            )));
        }
        Ok(())
    }

    /// Calls `f(position_in_patch, linear_volume_index)` for every voxel of
    /// patch `index` in x-fastest order.
    pub fn for_each_voxel(&self, index: usize, mut f: impl FnMut(usize, usize)) -> Result<()> {
        let [ox, oy, oz] = self.origin(index)?;
        let [nx, ny, _] = self.volume_dims;
        let s = self.patch_side;
        let mut k = 0;
        for z in oz..oz + s {
            for y in oy..oy + s {
                let row = nx * (y + ny * z);
                for x in ox..ox + s {
                    f(k, row + x);
                    k += 1;
                }
            }
        }
        Ok(())
    }

    /// Copies the cube of patch `index` out of any x-fastest voxel array.
    pub fn gather<T: Copy>(&self, data: &[T], index: usize) -> Result<Vec<T>> {
        if data.len() != super::voxel_count(self.volume_dims) {
            return Err(Error::Argument(format!(
                "array of length {} does not match grid dims {:?}",
                data.len(),
                self.volume_dims
            )));
        }
        let mut out = Vec::with_capacity(self.patch_voxels());
        self.for_each_voxel(index, |_, i| out.push(data[i]))?;
        Ok(out)
    }
}

pub fn extract_patch(v: &Volume3, grid: &PatchGrid, index: usize) -> Result<Vec<f32>> {
    if v.dims() != grid.volume_dims {
        return Err(Error::Argument(format!(
            "volume dims {:?} differ from grid dims {:?}",
            v.dims(),
            grid.volume_dims
        )));
    }
    grid.gather(v.data(), index)
}
