//! Affine registration by minimizing the mean square difference (MSD)
//! between a fixed image and a transformed moving image.
//!
//! A transform maps fixed-grid voxel coordinates to moving-grid voxel
//! coordinates: `T(x) = M·x + t`. Moving intensities are sampled trilinearly;
//! points outside the moving grid read as 0.
//!
//! The optimizer works in a centred, normalized parameterization:
//! `T(x) = M·(x − c) + c + R·u`, where `c` is the grid centre and `R` half the
//! mean grid extent, so that a unit step in any of the 12 parameters moves
//! peripheral points by a comparable number of voxels.

mod nelder_mead;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentation::LungMask;
use crate::volume::{trilinear, voxel_count, Dims, Volume3};

/// Determinants below this are treated as collapsed/flipped transforms.
const MIN_DETERMINANT: f64 = 0.05;
const INFEASIBLE_COST: f64 = 1e30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub matrix: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    /// Scaling by `s` about `center`.
    pub fn scaling_about(s: [f64; 3], center: [f64; 3]) -> Self {
        let mut m = Self::identity();
        for a in 0..3 {
            m.matrix[a][a] = s[a];
            m.translation[a] = center[a] * (1.0 - s[a]);
        }
        m
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + self.translation[0],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + self.translation[1],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + self.translation[2],
        ]
    }

    fn is_finite(&self) -> bool {
        self.matrix.iter().flatten().chain(&self.translation).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig {
    pub max_iters: usize,
    /// Initial simplex step in normalized parameter units.
    pub init_step: f64,
    /// Simplex diameter (normalized units) below which the search stops.
    pub tol: f64,
    /// The cost is evaluated on a lattice of every `sample_stride`-th voxel
    /// of the fixed grid.
    pub sample_stride: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            max_iters: 400,
            init_step: 0.05,
            tol: 1e-6,
            sample_stride: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    pub transform: AffineTransform,
    pub cost: f64,
    pub identity_cost: f64,
    pub iterations: usize,
}

fn grid_center(dims: Dims) -> [f64; 3] {
    dims.map(|n| (n as f64 - 1.0) / 2.0)
}

fn param_scale(dims: Dims) -> f64 {
    (dims.iter().sum::<usize>() as f64 / 6.0).max(1.0)
}

fn params_to_transform(u: &[f64], dims: Dims) -> AffineTransform {
    let c = grid_center(dims);
    let r = param_scale(dims);
    let mut t = AffineTransform::identity();
    for i in 0..3 {
        for j in 0..3 {
            t.matrix[i][j] += u[3 * i + j];
        }
    }
    for i in 0..3 {
        let mc: f64 = (0..3).map(|j| t.matrix[i][j] * c[j]).sum();
        t.translation[i] = c[i] + r * u[9 + i] - mc;
    }
    t
}

fn check_pair(fixed: Dims, moving: Dims) -> Result<()> {
    if fixed != moving {
        return Err(Error::Argument(format!("fixed dims {fixed:?} differ from moving dims {moving:?}")));
    }
    Ok(())
}

/// Mean of squared differences `(I_F(x) − I_M(T(x)))²` over the sample set.
#[inline]
fn sampled_msd(points: &[[f64; 3]], fixed: &[f32], moving: &[f32], dims: Dims, t: &AffineTransform) -> f64 {
    let mut acc = 0.0f64;
    for (p, &f) in points.iter().zip(fixed) {
        let m = trilinear(moving, dims, t.apply(*p)).unwrap_or(0.0);
        let d = f as f64 - m as f64;
        acc += d * d;
    }
    acc / points.len() as f64
}

/// MSD cost over all voxels of the fixed grid, or over the mask's voxels
/// when one is given.
pub fn msd_cost(fixed: &Volume3, moving: &Volume3, t: &AffineTransform, mask: Option<&LungMask>) -> Result<f64> {
    check_pair(fixed.dims(), moving.dims())?;
    let dims = fixed.dims();
    if let Some(m) = mask {
        if m.dims() != dims {
            return Err(Error::Argument("mask dims differ from image dims".into()));
        }
    }
    let [nx, ny, nz] = dims;
    let mut acc = 0.0f64;
    let mut n = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                if mask.is_some_and(|m| !m.bits()[i]) {
                    continue;
                }
                let mv = trilinear(moving.data(), dims, t.apply([x as f64, y as f64, z as f64])).unwrap_or(0.0);
                let d = fixed.data()[i] as f64 - mv as f64;
                acc += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Argument("empty sample domain".into()));
    }
    Ok(acc / n as f64)
}

/// Fixed image restricted to a sampling lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTemplate {
    dims: Dims,
    stride: usize,
    points: Vec<[f64; 3]>,
    indices: Vec<usize>,
    values: Vec<f32>,
}

fn lattice(dims: Dims, stride: usize) -> (Vec<[f64; 3]>, Vec<usize>) {
    let stride = stride.max(1);
    let start = |n: usize| (stride / 2).min(n - 1);
    let mut points = Vec::new();
    let mut indices = Vec::new();
    for z in (start(dims[2])..dims[2]).step_by(stride) {
        for y in (start(dims[1])..dims[1]).step_by(stride) {
            for x in (start(dims[0])..dims[0]).step_by(stride) {
                points.push([x as f64, y as f64, z as f64]);
                indices.push(x + dims[0] * (y + dims[1] * z));
            }
        }
    }
    (points, indices)
}

impl SampledTemplate {
    pub fn from_volume(fixed: &Volume3, stride: usize) -> Self {
        let (points, indices) = lattice(fixed.dims(), stride);
        let values = indices.iter().map(|&i| fixed.data()[i]).collect();
        Self {
            dims: fixed.dims(),
            stride: stride.max(1),
            points,
            indices,
            values,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn cost(&self, moving: &Volume3, t: &AffineTransform) -> Result<f64> {
        check_pair(self.dims, moving.dims())?;
        Ok(sampled_msd(&self.points, &self.values, moving.data(), self.dims, t))
    }

    /// Nelder–Mead search over the 12 affine parameters, starting at the identity.
    pub fn register(&self, moving: &Volume3, config: &RegistrationConfig) -> Result<Registration> {
        check_pair(self.dims, moving.dims())?;
        if self.points.is_empty() {
            return Err(Error::Argument("empty sample domain".into()));
        }
        let dims = self.dims;
        let mut saw_nan = false;
        let cost = |u: &[f64]| {
            let t = params_to_transform(u, dims);
            if !t.is_finite() || t.determinant() < MIN_DETERMINANT {
                return INFEASIBLE_COST;
            }
            let c = sampled_msd(&self.points, &self.values, moving.data(), dims, &t);
            if c.is_nan() {
                saw_nan = true;
                return INFEASIBLE_COST;
            }
            c
        };
        let identity_cost = sampled_msd(&self.points, &self.values, moving.data(), dims, &AffineTransform::identity());
        if !identity_cost.is_finite() {
            return Err(Error::Numerical("non-finite cost at identity".into()));
        }
        let mut cost = cost;
        let mut best = nelder_mead::minimize(&mut cost, &[0.0; 12], config.init_step, config.tol, config.max_iters);
        // A converged simplex in 12-D can be degenerate; restart from the
        // optimum while that still pays off and budget remains.
        let mut iterations = best.iterations;
        while best.converged && iterations < config.max_iters {
            let next = nelder_mead::minimize(&mut cost, &best.x, config.init_step, config.tol, config.max_iters - iterations);
            iterations += next.iterations.max(1);
            let gain = best.value - next.value;
            let done = gain <= 1e-9 * best.value.abs().max(1e-12);
            if next.value < best.value {
                best = next;
            }
            if done {
                break;
            }
        }
        if saw_nan || !best.value.is_finite() {
            return Err(Error::Numerical("non-finite MSD during simplex search".into()));
        }
        Ok(Registration {
            transform: params_to_transform(&best.x, dims),
            cost: best.value,
            identity_cost,
            iterations,
        })
    }
}

/// Registers `moving` onto `fixed`; cost evaluated on the config's sampling lattice.
pub fn register_affine(fixed: &Volume3, moving: &Volume3, config: &RegistrationConfig) -> Result<Registration> {
    check_pair(fixed.dims(), moving.dims())?;
    SampledTemplate::from_volume(fixed, config.sample_stride).register(moving, config)
}

/// `out(x) = moving(T(x))`, trilinear, 0 outside the moving grid.
pub fn resample_with(moving: &Volume3, t: &AffineTransform, out_dims: Dims) -> Result<Volume3> {
    let data = resample_raw(moving.data(), moving.dims(), t, out_dims)?;
    Volume3::new(out_dims, moving.spacing(), data)
}

/// Mask warped with the same transform: trilinear on 0/1, inside where >= 0.5.
pub fn resample_mask(mask: &LungMask, t: &AffineTransform, out_dims: Dims) -> Result<LungMask> {
    let as_f32: Vec<f32> = mask.bits().iter().map(|&b| f32::from(u8::from(b))).collect();
    let data = resample_raw(&as_f32, mask.dims(), t, out_dims)?;
    LungMask::new(out_dims, data.into_iter().map(|v| v >= 0.5).collect())
}

fn resample_raw(src: &[f32], src_dims: Dims, t: &AffineTransform, out_dims: Dims) -> Result<Vec<f32>> {
    if !t.is_finite() {
        return Err(Error::Argument("transform has non-finite entries".into()));
    }
    if out_dims.contains(&0) {
        return Err(Error::Argument(format!("output dims must be positive, got {out_dims:?}")));
    }
    let [nx, ny, _] = out_dims;
    let mut out = vec![0.0f32; voxel_count(out_dims)];
    out.par_chunks_mut(nx * ny).enumerate().for_each(|(z, slab)| {
        for y in 0..ny {
            for x in 0..nx {
                let p = t.apply([x as f64, y as f64, z as f64]);
                slab[x + nx * y] = trilinear(src, src_dims, p).unwrap_or(0.0);
            }
        }
    });
    Ok(out)
}

fn check_cohort(volumes: &[&Volume3]) -> Result<Dims> {
    if volumes.len() < 2 {
        return Err(Error::Argument(format!("template needs at least 2 volumes, got {}", volumes.len())));
    }
    let dims = volumes[0].dims();
    if let Some(i) = volumes.iter().position(|v| v.dims() != dims) {
        return Err(Error::Argument(format!("volume {i} has dims {:?}, expected {dims:?}", volumes[i].dims())));
    }
    Ok(dims)
}

/// Result of iterative template construction.
#[derive(Debug, Clone)]
pub struct TemplateBuild {
    /// The final template on the sampling lattice.
    pub template: SampledTemplate,
    /// Transforms from the last registration round (identity when no rounds ran).
    pub transforms: Vec<AffineTransform>,
}

/// Mean template evaluated only on the sampling lattice. Registration never
/// reads the fixed image off-lattice, so this is exactly the full-resolution
/// procedure restricted to the points it uses.
pub fn build_sampled_template(volumes: &[&Volume3], n_rounds: usize, config: &RegistrationConfig) -> Result<TemplateBuild> {
    let dims = check_cohort(volumes)?;
    let (points, indices) = lattice(dims, config.sample_stride);
    let n = volumes.len() as f64;
    let mut values: Vec<f32> = indices
        .iter()
        .map(|&i| (volumes.iter().map(|v| v.data()[i] as f64).sum::<f64>() / n) as f32)
        .collect();
    let mut transforms = vec![AffineTransform::identity(); volumes.len()];
    for _ in 0..n_rounds {
        let template = SampledTemplate {
            dims,
            stride: config.sample_stride.max(1),
            points: points.clone(),
            indices: indices.clone(),
            values,
        };
        transforms = volumes
            .par_iter()
            .enumerate()
            .map(|(i, v)| template.register(v, config).map(|r| r.transform).map_err(|e| e.in_volume(i)))
            .collect::<Result<Vec<_>>>()?;
        values = points
            .iter()
            .map(|&p| {
                let s: f64 = volumes
                    .iter()
                    .zip(&transforms)
                    .map(|(v, t)| trilinear(v.data(), dims, t.apply(p)).unwrap_or(0.0) as f64)
                    .sum();
                (s / n) as f32
            })
            .collect();
    }
    Ok(TemplateBuild {
        template: SampledTemplate {
            dims,
            stride: config.sample_stride.max(1),
            points,
            indices,
            values,
        },
        transforms,
    })
}

/// Cohort-mean template: round 0 is the voxelwise mean; each further round
/// registers every volume to the current template and re-averages.
pub fn build_mean_template(volumes: &[Volume3], n_rounds: usize, config: &RegistrationConfig) -> Result<Volume3> {
    let refs: Vec<&Volume3> = volumes.iter().collect();
    let dims = check_cohort(&refs)?;
    let build = build_sampled_template(&refs, n_rounds, config)?;
    let mut acc = vec![0.0f64; voxel_count(dims)];
    for (v, t) in volumes.iter().zip(&build.transforms) {
        let warped = if n_rounds == 0 {
            v.data().to_vec()
        } else {
            resample_raw(v.data(), dims, t, dims)?
        };
        for (a, w) in acc.iter_mut().zip(warped) {
            *a += w as f64;
        }
    }
    let n = volumes.len() as f64;
    let data = acc.into_iter().map(|s| (s / n) as f32).collect();
    Volume3::new(dims, volumes[0].spacing(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Smooth anisotropic blob pair; easy to register, no flat regions.
    fn blobs(dims: Dims, shift: [f64; 3], scale: f64) -> Volume3 {
        let c = grid_center(dims);
        Volume3::from_fn(dims, |x, y, z| {
            let p = [x as f64, y as f64, z as f64];
            // Content at p comes from reference position c + (p - c - shift)/scale.
            let q: Vec<f64> = (0..3).map(|a| c[a] + (p[a] - c[a] - shift[a]) / scale).collect();
            let g = |m: [f64; 3], s: [f64; 3]| (-(0..3).map(|a| (q[a] - m[a]).powi(2) / (2.0 * s[a] * s[a])).sum::<f64>()).exp();
            (g([c[0] - 4.0, c[1], c[2] + 2.0], [3.0, 2.5, 2.8]) + 0.7 * g([c[0] + 5.0, c[1] + 3.0, c[2] - 2.0], [2.2, 3.0, 2.5])) as f32
        })
        .unwrap()
    }

    #[test]
    fn msd_basic_values() {
        let a = blobs([16, 14, 12], [0.0; 3], 1.0);
        assert_eq!(msd_cost(&a, &a, &AffineTransform::identity(), None).unwrap(), 0.0);
        let ones = Volume3::filled([4, 4, 4], 1.0).unwrap();
        let zeros = Volume3::filled([4, 4, 4], 0.0).unwrap();
        assert_eq!(msd_cost(&ones, &zeros, &AffineTransform::identity(), None).unwrap(), 1.0);
        let empty = LungMask::filled([4, 4, 4], false);
        assert!(matches!(
            msd_cost(&ones, &zeros, &AffineTransform::identity(), Some(&empty)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn msd_compensating_shift_is_zero_on_interior() {
        let dims = [16, 16, 16];
        let fixed = blobs(dims, [0.0; 3], 1.0);
        let moving = Volume3::from_fn(dims, |x, y, z| if x == 0 { 0.0 } else { fixed.get(x - 1, y, z) }).unwrap();
        let interior = LungMask::new(dims, (0..voxel_count(dims)).map(|i| (i % 16) < 15).collect()).unwrap();
        let t = AffineTransform::translation([1.0, 0.0, 0.0]);
        assert!(msd_cost(&fixed, &moving, &t, Some(&interior)).unwrap() < 1e-6);
    }

    #[test]
    fn resample_identity_translation_and_outside() {
        let v = blobs([10, 9, 8], [0.0; 3], 1.0);
        let same = resample_with(&v, &AffineTransform::identity(), v.dims()).unwrap();
        for (a, b) in v.data().iter().zip(same.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let shifted = resample_with(&v, &AffineTransform::translation([2.0, -1.0, 3.0]), v.dims()).unwrap();
        for z in 0..5 {
            for y in 1..9 {
                for x in 0..8 {
                    assert_eq!(shifted.get(x, y, z), v.get(x + 2, y - 1, z + 3));
                }
            }
        }
        let away = resample_with(&v, &AffineTransform::translation([100.0, 0.0, 0.0]), v.dims()).unwrap();
        assert!(away.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn registering_identical_images_stays_at_identity() {
        let v = blobs([20, 20, 20], [0.0; 3], 1.0);
        let cfg = RegistrationConfig {
            sample_stride: 2,
            ..Default::default()
        };
        let r = register_affine(&v, &v, &cfg).unwrap();
        assert!(r.cost < 1e-8);
        assert!(r.cost <= r.identity_cost);
        for i in 0..3 {
            assert!((r.transform.translation[i]).abs() < 1e-3);
        }
    }

    #[test]
    fn recovers_translation() {
        let dims = [32, 32, 32];
        let fixed = blobs(dims, [0.0; 3], 1.0);
        let moving = blobs(dims, [3.0, -2.0, 1.0], 1.0);
        let cfg = RegistrationConfig {
            sample_stride: 2,
            max_iters: 3000,
            ..Default::default()
        };
        let r = register_affine(&fixed, &moving, &cfg).unwrap();
        let t = r.transform;
        for (got, want) in t.translation.iter().zip([3.0, -2.0, 1.0]) {
            assert!((got - want).abs() < 0.25, "translation {:?}", t.translation);
        }
        assert!(r.cost < r.identity_cost);
    }

    #[test]
    fn recovers_scale() {
        let dims = [32, 32, 32];
        let fixed = blobs(dims, [0.0; 3], 1.0);
        let moving = blobs(dims, [0.0; 3], 1.1);
        let cfg = RegistrationConfig {
            sample_stride: 2,
            max_iters: 3000,
            ..Default::default()
        };
        let r = register_affine(&fixed, &moving, &cfg).unwrap();
        for a in 0..3 {
            assert!((r.transform.matrix[a][a] - 1.1).abs() < 0.02, "{:?}", r.transform.matrix);
        }
        assert!(r.transform.determinant() > 0.0);
    }

    #[test]
    fn template_of_identical_volumes_is_that_volume() {
        let v = blobs([12, 12, 12], [0.0; 3], 1.0);
        let t = build_mean_template(&[v.clone(), v.clone(), v.clone()], 1, &RegistrationConfig::default()).unwrap();
        for (a, b) in v.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_rounds_is_voxelwise_mean() {
        let a = blobs([8, 8, 8], [0.0; 3], 1.0);
        let b = blobs([8, 8, 8], [1.0, 0.0, 0.0], 1.0);
        let t = build_mean_template(&[a.clone(), b.clone()], 0, &RegistrationConfig::default()).unwrap();
        for i in 0..a.len() {
            let m = ((a.data()[i] as f64 + b.data()[i] as f64) / 2.0) as f32;
            assert_eq!(t.data()[i], m);
        }
        assert!(matches!(
            build_mean_template(&[a], 0, &RegistrationConfig::default()),
            Err(Error::Argument(_))
        ));
    }

    fn gradient_energy(v: &Volume3) -> f64 {
        let [nx, ny, nz] = v.dims();
        let mut peak = 0.0f64;
        for z in 1..nz - 1 {
            for y in 1..ny - 1 {
                for x in 1..nx - 1 {
                    let gx = (v.get(x + 1, y, z) - v.get(x - 1, y, z)) as f64 / 2.0;
                    let gy = (v.get(x, y + 1, z) - v.get(x, y - 1, z)) as f64 / 2.0;
                    let gz = (v.get(x, y, z + 1) - v.get(x, y, z - 1)) as f64 / 2.0;
                    peak = peak.max(gx * gx + gy * gy + gz * gz);
                }
            }
        }
        peak
    }

    #[test]
    fn refinement_sharpens_the_template() {
        let dims = [28, 28, 28];
        let a = blobs(dims, [2.0, 0.0, 0.0], 1.0);
        let b = blobs(dims, [-2.0, 0.0, 0.0], 1.0);
        let cfg = RegistrationConfig {
            sample_stride: 2,
            max_iters: 1500,
            ..Default::default()
        };
        let t0 = build_mean_template(&[a.clone(), b.clone()], 0, &cfg).unwrap();
        let t1 = build_mean_template(&[a, b], 1, &cfg).unwrap();
        assert!(gradient_energy(&t1) > gradient_energy(&t0));
    }

    #[test]
    fn sampled_template_matches_full_template_on_lattice() {
        let dims = [16, 16, 16];
        let vols = [
            blobs(dims, [1.0, 0.0, 0.0], 1.0),
            blobs(dims, [-1.0, 0.5, 0.0], 1.0),
            blobs(dims, [0.0, 0.0, 1.0], 1.05),
        ];
        let cfg = RegistrationConfig {
            sample_stride: 3,
            max_iters: 200,
            ..Default::default()
        };
        let full = build_mean_template(&vols, 2, &cfg).unwrap();
        let refs: Vec<&Volume3> = vols.iter().collect();
        let sampled = build_sampled_template(&refs, 2, &cfg).unwrap();
        let on_lattice = SampledTemplate::from_volume(&full, 3);
        assert_eq!(sampled.template.values(), on_lattice.values());
    }
}
