//! Otsu-threshold lung segmentation.
//!
//! Dark voxels (below the Otsu threshold of the whole-volume histogram) are
//! lung candidates. Candidate components touching any boundary face are the
//! surrounding air and are discarded; the two largest remaining 6-connected
//! components are kept.

use std::collections::VecDeque;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{load_volume, save_volume, voxel_count, Dims, PatchGrid, Volume3};

pub const DEFAULT_BINS: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LungMask {
    dims: Dims,
    bits: Vec<bool>,
}

impl LungMask {
    pub fn new(dims: Dims, bits: Vec<bool>) -> Result<Self> {
        let expected = voxel_count(dims);
        if bits.len() != expected {
            return Err(Error::Size { expected, found: bits.len() });
        }
        Ok(Self { dims, bits })
    }

    pub fn filled(dims: Dims, value: bool) -> Self {
        Self {
            dims,
            bits: vec![value; voxel_count(dims)],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Mask as a 0.0/1.0 volume (the on-disk representation).
    pub fn to_volume(&self) -> Volume3 {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Volume3::new(self.dims, [1.0; 3], data).expect("mask dims are valid")
    }

    /// Voxels with value >= 0.5 are inside.
    pub fn from_volume(v: &Volume3) -> Self {
        Self {
            dims: v.dims(),
            bits: v.data().iter().map(|&x| x >= 0.5).collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_volume(&self.to_volume(), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_volume(&load_volume(path)?))
    }
}

/// Sørensen–Dice overlap of two equally-sized masks (1.0 when both are empty).
pub fn dice(a: &LungMask, b: &LungMask) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::Argument(format!("mask dims differ: {:?} vs {:?}", a.dims, b.dims)));
    }
    let inter = a.bits.iter().zip(&b.bits).filter(|(x, y)| **x && **y).count();
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Histogram of `values` over `[min, max]` with `n_bins` equal-width bins.
#[derive(Debug, Clone)]
pub(crate) struct Histogram {
    pub min: f64,
    pub width: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn build(values: &[f32], n_bins: usize) -> Result<Self> {
        if n_bins < 2 {
            return Err(Error::Argument(format!("need at least 2 bins, got {n_bins}")));
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in values {
            if !v.is_finite() {
                return Err(Error::Value("non-finite value in histogram input".into()));
            }
            lo = lo.min(v as f64);
            hi = hi.max(v as f64);
        }
        if !(hi > lo) {
            return Err(Error::DegenerateInput("need at least two distinct values for a threshold".into()));
        }
        let width = (hi - lo) / n_bins as f64;
        let mut hist = Self {
            min: lo,
            width,
            counts: vec![0; n_bins],
        };
        for &v in values {
            let b = hist.bin(v);
            hist.counts[b] += 1;
        }
        Ok(hist)
    }

    #[inline]
    pub fn bin(&self, v: f32) -> usize {
        let b = ((v as f64 - self.min) / self.width).floor();
        (b.max(0.0) as usize).min(self.counts.len() - 1)
    }

    pub fn edge(&self, t: usize) -> f64 {
        self.min + t as f64 * self.width
    }
}

/// Between-class variance criterion for a split into bins `< t` and `>= t`,
/// up to the positive factor `width² / n²`. Bin indices stand in for intensities
/// (the criterion is affine-invariant), and class sums are exact integers.
pub(crate) fn otsu_criterion(n0: u64, s0: u128, n1: u64, s1: u128) -> f64 {
    if n0 == 0 || n1 == 0 {
        return f64::NEG_INFINITY;
    }
    // n0*n1*(mu0-mu1)^2 = (s0*n1 - s1*n0)^2 / (n0*n1)
    let diff = (s0 * n1 as u128) as i128 - (s1 * n0 as u128) as i128;
    let d = diff as f64;
    d * d / (n0 as f64 * n1 as f64)
}

/// Index `t` of the first bin of the bright class.
pub(crate) fn otsu_bin(hist: &Histogram) -> usize {
    let total_n: u64 = hist.counts.iter().sum();
    let total_s: u128 = hist.counts.iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();
    let (mut n0, mut s0) = (0u64, 0u128);
    let mut best = (f64::NEG_INFINITY, 1usize);
    for t in 1..hist.counts.len() {
        n0 += hist.counts[t - 1];
        s0 += (t as u128 - 1) * hist.counts[t - 1] as u128;
        let j = otsu_criterion(n0, s0, total_n - n0, total_s - s0);
        if j > best.0 {
            best = (j, t);
        }
    }
    best.1
}

/// Otsu threshold: the bin edge maximizing the between-class variance
/// `ω0·ω1·(μ0 − μ1)²`; ties go to the lowest edge.
pub fn otsu_threshold(values: &[f32], n_bins: usize) -> Result<f64> {
    let hist = Histogram::build(values, n_bins)?;
    Ok(hist.edge(otsu_bin(&hist)))
}

const NO_LABEL: u32 = u32::MAX;

/// 6-connected components of `fg`. Returns the per-voxel label (or
/// `NO_LABEL`), component sizes, and whether each component touches a face.
/// Labels are assigned in scan order.
fn components(fg: &[bool], dims: Dims) -> (Vec<u32>, Vec<usize>, Vec<bool>) {
    let [nx, ny, nz] = dims;
    let mut labels = vec![NO_LABEL; fg.len()];
    let mut sizes = Vec::new();
    let mut border = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..fg.len() {
        if !fg[start] || labels[start] != NO_LABEL {
            continue;
        }
        let label = sizes.len() as u32;
        let (mut size, mut touches) = (0usize, false);
        labels[start] = label;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let x = i % nx;
            let y = (i / nx) % ny;
            let z = i / (nx * ny);
            if x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz {
                touches = true;
            }
            let mut visit = |j: usize| {
                if fg[j] && labels[j] == NO_LABEL {
                    labels[j] = label;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < nx {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - nx);
            }
            if y + 1 < ny {
                visit(i + nx);
            }
            if z > 0 {
                visit(i - nx * ny);
            }
            if z + 1 < nz {
                visit(i + nx * ny);
            }
        }
        sizes.push(size);
        border.push(touches);
    }
    (labels, sizes, border)
}

pub fn segment_lungs(v: &Volume3) -> Result<LungMask> {
    let hist = Histogram::build(v.data(), DEFAULT_BINS)?;
    let t = otsu_bin(&hist);
    let candidate: Vec<bool> = v.data().iter().map(|&x| hist.bin(x) < t).collect();
    let (labels, sizes, border) = components(&candidate, v.dims());

    let mut interior: Vec<usize> = (0..sizes.len()).filter(|&c| !border[c]).collect();
    if interior.is_empty() {
        return Err(Error::Segmentation("no dark component survives boundary suppression".into()));
    }
    // Largest first; equal sizes keep scan order.
    interior.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    interior.truncate(2);
    let keep: Vec<u32> = interior.iter().map(|&c| c as u32).collect();
    let bits = labels.iter().map(|&l| l != NO_LABEL && keep.contains(&l)).collect();
    LungMask::new(v.dims(), bits)
}

/// Fraction of the voxels of patch `index` that are lung.
pub fn lung_fraction(mask: &LungMask, grid: &PatchGrid, index: usize) -> Result<f64> {
    if mask.dims != grid.volume_dims() {
        return Err(Error::Argument(format!(
            "mask dims {:?} differ from grid dims {:?}",
            mask.dims,
            grid.volume_dims()
        )));
    }
    let mut inside = 0usize;
    grid.for_each_voxel(index, |_, i| inside += usize::from(mask.bits[i]))?;
    Ok(inside as f64 / grid.patch_voxels() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::make_patch_grid;
    use rand::Rng;

    #[test]
    fn bimodal_threshold_separates_modes() {
        let t = otsu_threshold(&[0.0, 0.0, 0.0, 10.0, 10.0, 10.0], 256).unwrap();
        assert!(t > 0.0 && t < 10.0, "threshold {t}");
    }

    #[test]
    fn constant_input_is_degenerate() {
        assert!(matches!(otsu_threshold(&[3.0; 10], 256), Err(Error::DegenerateInput(_))));
        assert!(matches!(otsu_threshold(&[1.0, 2.0], 1), Err(Error::Argument(_))));
    }

    fn ball_volume(dims: Dims, centers: &[([f64; 3], f64)]) -> Volume3 {
        // Bright body filling the interior, dark outside and inside the balls.
        Volume3::from_fn(dims, |x, y, z| {
            let border = x < 2 || y < 2 || z < 2 || x + 2 >= dims[0] || y + 2 >= dims[1] || z + 2 >= dims[2];
            if border {
                return 0.0;
            }
            let p = [x as f64, y as f64, z as f64];
            let inside = centers.iter().any(|(c, r)| (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= r * r);
            if inside {
                0.05
            } else {
                1.0
            }
        })
        .unwrap()
    }

    #[test]
    fn keeps_two_largest_interior_components() {
        let dims = [40, 30, 30];
        let v = ball_volume(dims, &[([10.0, 15.0, 15.0], 6.0), ([28.0, 15.0, 15.0], 7.0), ([20.0, 5.0, 5.0], 1.5)]);
        let m = segment_lungs(&v).unwrap();
        let truth = ball_volume(dims, &[([10.0, 15.0, 15.0], 6.0), ([28.0, 15.0, 15.0], 7.0)]);
        let truth_mask = LungMask::new(
            dims,
            truth
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    x < 0.5 && {
                        let xi = i % dims[0];
                        let yi = (i / dims[0]) % dims[1];
                        let zi = i / (dims[0] * dims[1]);
                        !(xi < 2 || yi < 2 || zi < 2 || xi + 2 >= dims[0] || yi + 2 >= dims[1] || zi + 2 >= dims[2])
                    }
                })
                .collect(),
        )
        .unwrap();
        assert_eq!(m, truth_mask);
    }

    #[test]
    fn border_only_dark_region_fails() {
        let v = Volume3::from_fn([12, 12, 12], |x, _, _| if x < 6 { 0.0 } else { 1.0 }).unwrap();
        assert!(matches!(segment_lungs(&v), Err(Error::Segmentation(_))));
    }

    #[test]
    fn single_lung_kept() {
        let dims = [24, 24, 24];
        let v = ball_volume(dims, &[([12.0, 12.0, 12.0], 5.0)]);
        let m = segment_lungs(&v).unwrap();
        let expected = (0..voxel_count(dims))
            .filter(|&i| {
                let p = [(i % 24) as f64, ((i / 24) % 24) as f64, (i / 576) as f64];
                (0..3).map(|a| (p[a] - 12.0).powi(2)).sum::<f64>() <= 25.0
            })
            .count();
        assert_eq!(m.count(), expected);
    }

    #[test]
    fn lung_fraction_extremes_and_oracle() {
        let dims = [8, 8, 8];
        let g = make_patch_grid(dims, 4).unwrap();
        let full = LungMask::filled(dims, true);
        let empty = LungMask::filled(dims, false);
        for i in 0..g.len() {
            assert_eq!(lung_fraction(&full, &g, i).unwrap(), 1.0);
            assert_eq!(lung_fraction(&empty, &g, i).unwrap(), 0.0);
        }
        let mut rng = crate::rng::stream(2, &[]);
        let bits: Vec<bool> = (0..512).map(|_| rng.random_bool(0.3)).collect();
        let m = LungMask::new(dims, bits.clone()).unwrap();
        for i in 0..g.len() {
            let [ox, oy, oz] = g.origin(i).unwrap();
            let mut n = 0;
            for z in oz..oz + 4 {
                for y in oy..oy + 4 {
                    for x in ox..ox + 4 {
                        n += usize::from(bits[x + 8 * y + 64 * z]);
                    }
                }
            }
            assert_eq!(lung_fraction(&m, &g, i).unwrap(), n as f64 / 64.0);
        }
        let wrong = make_patch_grid([8, 8, 4], 4).unwrap();
        assert!(matches!(lung_fraction(&m, &wrong, 0), Err(Error::Argument(_))));
    }
}
