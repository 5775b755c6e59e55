//! Synthetic chest phantoms: a bright cylindrical body holding two dark
//! ellipsoidal lungs, with spherical ground-glass lesions (clipped to the
//! lungs) in diseased subjects. Every subject gets a random per-axis scale and
//! translation plus Gaussian noise. Shapes are evaluated analytically, so the
//! lung mask and lesion footprint are exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Label;
use crate::rng::{derive_seed, stream};
use crate::segmentation::LungMask;
use crate::volume::{make_patch_grid, save_volume, voxel_count, Dims, Volume3};

const PLACEMENT_RETRIES: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub body_intensity: f32,
    pub lung_intensity: f32,
    pub lesion_intensity: f32,
    /// Lesions per diffuse-disease subject, inclusive range.
    pub lesion_count: (usize, usize),
    /// Lesion radius in voxels, inclusive range.
    pub lesion_radius: (f64, f64),
    /// Fraction of diseased subjects with focal disease instead of diffuse.
    pub focal_fraction: f64,
    /// Focal lesions form one cluster: every centre lies within
    /// `focal_spread` voxels of the first.
    pub focal_lesion_count: (usize, usize),
    pub focal_lesion_radius: (f64, f64),
    pub focal_spread: f64,
    /// Cluster seed in normalized coordinates of the lung at +x (offsets in
    /// units of its semi-axes); `None` seeds anywhere near the pleura.
    pub focal_site: Option<[f64; 3]>,
    /// Seed scatter around `focal_site`, in voxels.
    pub focal_site_jitter: f64,
    /// Maximum absolute translation per axis, in voxels.
    pub jitter_translation: f64,
    /// Maximum relative deviation of the per-axis scale from 1.
    pub jitter_scale: f64,
    pub noise_sigma: f64,
    /// Patch sides for which lesion patch ids are reported.
    pub patch_sides: Vec<usize>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::for_dims([128; 3])
    }
}

impl PhantomSpec {
    /// Defaults scaled to the grid (lengths are tuned at 128³).
    pub fn for_dims(dims: Dims) -> Self {
        let unit = dims.iter().copied().min().unwrap_or(1) as f64 / 128.0;
        let len = |v: f64| (v * unit).max(1.0);
        Self {
            dims,
            body_intensity: 1.0,
            lung_intensity: 0.0,
            lesion_intensity: 0.35,
            lesion_count: (55, 80),
            lesion_radius: (len(8.0), len(13.0)),
            focal_fraction: 0.2,
            focal_lesion_count: (8, 12),
            focal_lesion_radius: (len(8.0), len(11.0)),
            focal_spread: len(4.0),
            focal_site: Some([0.45, 0.2, -0.45]),
            focal_site_jitter: len(4.0),
            jitter_translation: 3.0 * unit,
            jitter_scale: 0.04,
            noise_sigma: 0.05,
            patch_sides: vec![24, 28, 32, 48, 64],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.dims.iter().any(|&n| n < 8) {
            return bad(format!("phantom dims must be at least 8, got {:?}", self.dims));
        }
        if !(self.lung_intensity < self.lesion_intensity && self.lesion_intensity < self.body_intensity) {
            return bad("intensities must satisfy lung < lesion < body".into());
        }
        for (name, (lo, hi)) in [("lesion_radius", self.lesion_radius), ("focal_lesion_radius", self.focal_lesion_radius)] {
            if !(lo >= 1.0 && hi >= lo) {
                return bad(format!("{name} must satisfy 1 <= min <= max, got ({lo}, {hi})"));
            }
        }
        for (name, (lo, hi)) in [("lesion_count", self.lesion_count), ("focal_lesion_count", self.focal_lesion_count)] {
            if lo < 1 || hi < lo {
                return bad(format!("{name} must satisfy 1 <= min <= max, got ({lo}, {hi})"));
            }
        }
        if !(0.0..=1.0).contains(&self.focal_fraction) {
            return bad(format!("focal_fraction must lie in [0, 1], got {}", self.focal_fraction));
        }
        if !(self.focal_spread >= 0.0 && self.focal_site_jitter >= 0.0) {
            return bad("focal_spread and focal_site_jitter must be non-negative".into());
        }
        if let Some(site) = self.focal_site {
            if site.iter().map(|v| v * v).sum::<f64>() >= 1.0 {
                return bad(format!("focal_site must lie inside the lung, got {site:?}"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.jitter_translation >= 0.0 && (0.0..0.5).contains(&self.jitter_scale)) {
            return bad("noise and jitter must be non-negative (scale jitter < 0.5)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    /// Centre in canonical (un-jittered) voxel coordinates.
    pub center: [f64; 3],
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    None,
    Diffuse,
    Focal,
}

/// Per-subject pose: canonical point `q` appears at `c + scale·(q − c) + shift`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub scale: [f64; 3],
    pub shift: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct PhantomSubject {
    pub jitter: Jitter,
    pub volume: Volume3,
    pub mask: LungMask,
    pub lesion_mask: Vec<bool>,
    pub severity: Severity,
    pub lesions: Vec<Lesion>,
    /// Patch ids intersecting a lesion, per patch side.
    pub lesion_patches: BTreeMap<usize, Vec<usize>>,
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.semi[a]).powi(2)).sum()
    }

    /// Elliptic cylinder along z with the same semi-axes.
    fn cylinder_level(&self, p: [f64; 3]) -> f64 {
        let r = |a: usize| ((p[a] - self.center[a]) / self.semi[a]).powi(2);
        (r(0) + r(1)).max(r(2))
    }
}

struct Anatomy {
    body: Ellipsoid,
    lungs: [Ellipsoid; 2],
}

fn anatomy(dims: Dims) -> Anatomy {
    let d = dims.map(|n| n as f64);
    let c = dims.map(|n| (n as f64 - 1.0) / 2.0);
    let lung = |side: f64| Ellipsoid {
        center: [c[0] + side * 0.21 * d[0], c[1], c[2]],
        semi: [0.18 * d[0], 0.36 * d[1], 0.42 * d[2]],
    };
    Anatomy {
        body: Ellipsoid {
            center: c,
            semi: [0.47 * d[0], 0.47 * d[1], 0.45 * d[2]],
        },
        lungs: [lung(-1.0), lung(1.0)],
    }
}

fn unit_vector(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return v.map(|x| x / n);
        }
    }
}

fn draw_radius(radius: (f64, f64), rng: &mut impl Rng) -> f64 {
    if radius.1 > radius.0 {
        rng.random_range(radius.0..=radius.1)
    } else {
        radius.0
    }
}

/// A peripheral centre (normalized radius in [0.6, 0.95]) in a random lung.
fn peripheral_center(anat: &Anatomy, rng: &mut impl Rng) -> (usize, [f64; 3]) {
    let k = rng.random_range(0..2);
    let lung = &anat.lungs[k];
    let dir = unit_vector(rng);
    let r_norm = rng.random_range(0.6..0.95);
    (k, std::array::from_fn(|a| lung.center[a] + r_norm * dir[a] * lung.semi[a]))
}

fn place_lesions(anat: &Anatomy, count: usize, radius: (f64, f64), rng: &mut impl Rng) -> Result<Vec<Lesion>> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let (k, center) = peripheral_center(anat, rng);
            let r = draw_radius(radius, rng);
            if anat.lungs[k].level(center) < 1.0 {
                placed = Some(Lesion { center, radius: r });
                break;
            }
        }
        out.push(placed.ok_or_else(|| Error::Generation("could not place a lesion inside the lungs".into()))?);
    }
    Ok(out)
}

/// A cluster of `count` lesions around one peripheral seed point.
fn place_cluster(anat: &Anatomy, spec: &PhantomSpec, count: usize, rng: &mut impl Rng) -> Result<Vec<Lesion>> {
    let (radius, spread) = (spec.focal_lesion_radius, spec.focal_spread);
    let (k, seed) = match spec.focal_site {
        Some(site) => {
            let lung = &anat.lungs[1];
            let dir = unit_vector(rng);
            let d = spec.focal_site_jitter * rng.random::<f64>().cbrt();
            (1, std::array::from_fn(|a| lung.center[a] + site[a] * lung.semi[a] + d * dir[a]))
        }
        None => peripheral_center(anat, rng),
    };
    let lung = &anat.lungs[k];
    if lung.level(seed) >= 1.0 {
        return Err(Error::Generation("could not place a lesion inside the lungs".into()));
    }
    let mut out = vec![Lesion {
        center: seed,
        radius: draw_radius(radius, rng),
    }];
    while out.len() < count {
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let dir = unit_vector(rng);
            let d = spread * rng.random::<f64>().cbrt();
            let center: [f64; 3] = std::array::from_fn(|a| seed[a] + d * dir[a]);
            let r = draw_radius(radius, rng);
            if lung.level(center) < 1.0 {
                placed = Some(Lesion { center, radius: r });
                break;
            }
        }
        out.push(placed.ok_or_else(|| Error::Generation("could not place a clustered lesion inside the lung".into()))?);
    }
    Ok(out)
}

/// One subject. `severity` is drawn from the spec when `diseased`.
pub fn generate_subject(spec: &PhantomSpec, diseased: bool, subject_seed: u64) -> Result<PhantomSubject> {
    spec.validate()?;
    let dims = spec.dims;
    let anat = anatomy(dims);
    let mut rng = stream(subject_seed, &[0]);
    let scale: [f64; 3] = std::array::from_fn(|_| 1.0 + spec.jitter_scale * rng.random_range(-1.0..=1.0));
    let shift: [f64; 3] = std::array::from_fn(|_| spec.jitter_translation * rng.random_range(-1.0..=1.0));
    let (severity, lesions) = if diseased {
        if rng.random::<f64>() < spec.focal_fraction {
            let n = rng.random_range(spec.focal_lesion_count.0..=spec.focal_lesion_count.1);
            (Severity::Focal, place_cluster(&anat, spec, n, &mut rng)?)
        } else {
            let n = rng.random_range(spec.lesion_count.0..=spec.lesion_count.1);
            (Severity::Diffuse, place_lesions(&anat, n, spec.lesion_radius, &mut rng)?)
        }
    } else {
        (Severity::None, Vec::new())
    };

    let c = dims.map(|n| (n as f64 - 1.0) / 2.0);
    let [nx, ny, _] = dims;
    let n = voxel_count(dims);
    let mut data = vec![0.0f32; n];
    let mut lung_bits = vec![false; n];
    let mut lesion_bits = vec![false; n];
    data.par_chunks_mut(nx * ny)
        .zip(lung_bits.par_chunks_mut(nx * ny))
        .zip(lesion_bits.par_chunks_mut(nx * ny))
        .enumerate()
        .for_each(|(z, ((slab, lung_slab), lesion_slab))| {
            for y in 0..ny {
                for x in 0..nx {
                    let p = [x as f64, y as f64, z as f64];
                    let q: [f64; 3] = std::array::from_fn(|a| c[a] + (p[a] - c[a] - shift[a]) / scale[a]);
                    let i = x + nx * y;
                    let in_lung = anat.lungs.iter().any(|l| l.level(q) <= 1.0);
                    slab[i] = if in_lung {
                        lung_slab[i] = true;
                        let hit = lesions
                            .iter()
                            .any(|les| (0..3).map(|a| (q[a] - les.center[a]).powi(2)).sum::<f64>() <= les.radius * les.radius);
                        lesion_slab[i] = hit;
                        if hit {
                            spec.lesion_intensity
                        } else {
                            spec.lung_intensity
                        }
                    } else if anat.body.cylinder_level(q) <= 1.0 {
                        spec.body_intensity
                    } else {
                        spec.lung_intensity
                    };
                }
            }
        });
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Argument(e.to_string()))?;
        let mut nrng = stream(subject_seed, &[1]);
        for v in data.iter_mut() {
            *v += normal.sample(&mut nrng) as f32;
        }
    }
    let mut lesion_patches = BTreeMap::new();
    for &side in &spec.patch_sides {
        if dims.iter().any(|&d| side > d) {
            continue;
        }
        lesion_patches.insert(side, patches_touching(&lesion_bits, dims, side)?);
    }
    Ok(PhantomSubject {
        jitter: Jitter { scale, shift },
        volume: Volume3::new(dims, [1.0; 3], data)?,
        mask: LungMask::new(dims, lung_bits)?,
        lesion_mask: lesion_bits,
        severity,
        lesions,
        lesion_patches,
    })
}

/// Ids of patches (side `side`) containing at least one set voxel.
pub fn patches_touching(bits: &[bool], dims: Dims, side: usize) -> Result<Vec<usize>> {
    let grid = make_patch_grid(dims, side)?;
    let mut out = Vec::new();
    for p in 0..grid.len() {
        let mut any = false;
        grid.for_each_voxel(p, |_, i| any |= bits[i])?;
        if any {
            out.push(p);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortEntry {
    pub id: String,
    pub label: Label,
    pub severity: Severity,
    pub seed: u64,
    pub volume: String,
    pub mask: String,
    pub lesions: Vec<Lesion>,
    /// Keyed by patch side (as a string in JSON).
    pub lesion_patches: BTreeMap<String, Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub subjects: Vec<CohortEntry>,
    pub spec: PhantomSpec,
    pub seed: u64,
}

impl CohortManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Subject `i` of a cohort: label and per-subject seed. Controls come first.
pub fn cohort_plan(n_control: usize, n_diseased: usize, seed: u64) -> Vec<(String, Label, u64)> {
    (0..n_control + n_diseased)
        .map(|i| {
            let label = Label::from_positive(i >= n_control);
            (format!("s{i:03}"), label, derive_seed(seed, &[i as u64]))
        })
        .collect()
}

/// Generates a cohort in memory (subjects in plan order).
pub fn generate_cohort_subjects(
    spec: &PhantomSpec,
    n_control: usize,
    n_diseased: usize,
    seed: u64,
) -> Result<Vec<(String, Label, u64, PhantomSubject)>> {
    if n_control == 0 || n_diseased == 0 {
        return Err(Error::Argument("cohort needs at least one subject per class".into()));
    }
    cohort_plan(n_control, n_diseased, seed)
        .into_par_iter()
        .enumerate()
        .map(|(i, (id, label, s))| {
            generate_subject(spec, label.is_positive(), s)
                .map(|subj| (id, label, s, subj))
                .map_err(|e| e.in_volume(i))
        })
        .collect()
}

/// Writes `<id>.evr`, `<id>_mask.evr` (with headers) and `cohort.json` into `out`.
pub fn generate_cohort(spec: &PhantomSpec, n_control: usize, n_diseased: usize, seed: u64, out: impl AsRef<Path>) -> Result<CohortManifest> {
    let out = out.as_ref();
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let plan = cohort_plan(n_control, n_diseased, seed);
    if n_control == 0 || n_diseased == 0 {
        return Err(Error::Argument("cohort needs at least one subject per class".into()));
    }
    let subjects = plan
        .par_iter()
        .enumerate()
        .map(|(i, (id, label, s))| -> Result<CohortEntry> {
            let subj = generate_subject(spec, label.is_positive(), *s).map_err(|e| e.in_volume(i))?;
            let volume = format!("{id}.evr");
            let mask = format!("{id}_mask.evr");
            save_volume(&subj.volume, out.join(&volume))?;
            subj.mask.save(out.join(&mask))?;
            Ok(CohortEntry {
                id: id.clone(),
                label: *label,
                severity: subj.severity,
                seed: *s,
                volume,
                mask,
                lesions: subj.lesions,
                lesion_patches: subj.lesion_patches.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = CohortManifest {
        subjects,
        spec: spec.clone(),
        seed,
    };
    let path: PathBuf = out.join("cohort.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
