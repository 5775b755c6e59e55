//! Patch ensembles: one kPCA → calibrated SVM → bootstrap pipeline per
//! patch position, fused into a subject label by inverse-uncertainty voting.

mod store;

use std::borrow::Borrow;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{dot, gram_from_inner, inner_products, median_pairwise_distance, KernelSpec, SampleMatrix};
use crate::kpca::{fit_from_gram, EigenlungModel, KpcaKernel, DEFAULT_VARIANCE_TARGET};
use crate::label::{class_counts, Label};
use crate::rng::derive_seed;
use crate::segmentation::{lung_fraction, LungMask};
use crate::svm::{calibrated_from_gram, CalibratedSvm, SvmConfig};
use crate::uncertainty::{bootstrap_from_gram, BootstrapConfig, PatchPosterior};
use crate::volume::{make_patch_grid, PatchGrid, Volume3};

pub use store::{load_model, save_model};

/// Lower bound on uncertainty before inversion.
pub const UNCERTAINTY_FLOOR: f64 = 1e-12;
pub const DEFAULT_MIN_LUNG_FRACTION: f64 = 0.20;

/// What each patch classifier sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Kernel-PCA projections of the masked patch.
    Kpca,
    /// The masked patch voxels themselves (voxels-as-features baseline).
    Voxels,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub patch_side: usize,
    pub min_lung_fraction: f64,
    pub features: FeatureMode,
    pub kpca_kernel: KpcaKernel,
    pub variance_target: f64,
    pub svm: SvmConfig,
    pub bootstrap: BootstrapConfig,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            patch_side: 28,
            min_lung_fraction: DEFAULT_MIN_LUNG_FRACTION,
            features: FeatureMode::Kpca,
            kpca_kernel: KpcaKernel::RbfMedian,
            variance_target: DEFAULT_VARIANCE_TARGET,
            svm: SvmConfig::default(),
            bootstrap: BootstrapConfig::default(),
            seed: 0,
        }
    }
}

/// One fitted patch position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchPipeline {
    pub patch_id: usize,
    pub kpca: Option<EigenlungModel>,
    /// Classifier inputs of the training subjects (projections, or voxels).
    pub train_features: SampleMatrix,
    pub train_labels: Vec<Label>,
    /// Classifier trained on the full training set.
    pub classifier: CalibratedSvm,
    /// Root of the bootstrap streams for this patch.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub grid: PatchGrid,
    pub active_patches: Vec<usize>,
    pub config: EnsembleConfig,
    pub pipelines: Vec<PatchPipeline>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchVote {
    pub patch_id: usize,
    pub origin: [usize; 3],
    pub side: usize,
    pub predicted_label: Label,
    pub mean_p: f64,
    pub u: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectDecision {
    pub label: Label,
    pub e_control: f64,
    pub e_pneumonia: f64,
    /// Per-patch votes in patch-id order; doubles as the reliability map.
    pub per_patch: Vec<PatchVote>,
}

impl SubjectDecision {
    /// Continuous score for ranking: `E_pneumonia − E_control`.
    pub fn score(&self) -> f64 {
        self.e_pneumonia - self.e_control
    }

    pub fn reliability_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.per_patch)?)
    }

    pub fn write_reliability_map(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.reliability_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Masked patch as a feature vector: voxels outside the lung mask are zeroed.
pub fn patch_vector(volume: &Volume3, mask: &LungMask, grid: &PatchGrid, index: usize) -> Result<Vec<f64>> {
    if volume.dims() != grid.volume_dims() || mask.dims() != grid.volume_dims() {
        return Err(Error::Argument(format!(
            "volume {:?} / mask {:?} do not match grid dims {:?}",
            volume.dims(),
            mask.dims(),
            grid.volume_dims()
        )));
    }
    let mut out = Vec::with_capacity(grid.patch_voxels());
    let (data, bits) = (volume.data(), mask.bits());
    grid.for_each_voxel(index, |_, i| out.push(if bits[i] { f64::from(data[i]) } else { 0.0 }))?;
    Ok(out)
}

/// Patches whose lung fraction, averaged over the masks, reaches `min_fraction`.
pub fn active_patches<M: Borrow<LungMask>>(masks: &[M], grid: &PatchGrid, min_fraction: f64) -> Result<Vec<usize>> {
    if masks.is_empty() {
        return Err(Error::Argument("no masks".into()));
    }
    let mut active = Vec::new();
    for p in 0..grid.len() {
        let mut sum = 0.0;
        for m in masks {
            sum += lung_fraction(m.borrow(), grid, p)?;
        }
        if sum / masks.len() as f64 >= min_fraction {
            active.push(p);
        }
    }
    Ok(active)
}

fn kernel_for(kind: KpcaKernel, inner: &DMatrix<f64>) -> Result<KernelSpec> {
    match kind {
        KpcaKernel::Fixed { spec } => Ok(spec),
        KpcaKernel::RbfMedian => {
            let sigma = median_pairwise_distance(inner);
            if !(sigma > 0.0) {
                return Err(Error::DegenerateInput("all training patches coincide".into()));
            }
            Ok(KernelSpec::Rbf { sigma })
        }
    }
}

/// Classifier space of one patch, derived from training inner products.
struct SvmSpace {
    kpca: Option<EigenlungModel>,
    /// kPCA projections of the training subjects; `None` for voxel features.
    projections: Option<SampleMatrix>,
    /// Inner products between classifier inputs.
    inner: DMatrix<f64>,
}

impl SvmSpace {
    fn fit(inner: &DMatrix<f64>, config: &EnsembleConfig) -> Result<Self> {
        match config.features {
            FeatureMode::Kpca => {
                let spec = kernel_for(config.kpca_kernel, inner)?;
                spec.validate()?;
                let k = gram_from_inner(inner, &spec)?;
                let model = fit_from_gram(&k, spec, config.variance_target)?;
                let rows: Vec<Vec<f64>> = (0..inner.nrows())
                    .map(|i| model.project_kernel_row(&k.row(i).iter().copied().collect::<Vec<_>>()))
                    .collect::<Result<_>>()?;
                let projections = SampleMatrix::from_rows(&rows)?;
                Ok(Self {
                    kpca: Some(model),
                    inner: inner_products(&projections),
                    projections: Some(projections),
                })
            }
            FeatureMode::Voxels => Ok(Self {
                kpca: None,
                projections: None,
                inner: inner.clone(),
            }),
        }
    }

    /// Classifier-space inner products of a test subject against the training
    /// subjects, plus its own squared norm, from raw-space inner products.
    fn test_inner(&self, raw_train: &DMatrix<f64>, raw_row: &[f64], raw_self: f64) -> Result<(Vec<f64>, f64)> {
        match (&self.kpca, &self.projections) {
            (Some(model), Some(p)) => {
                let k_row: Vec<f64> = raw_row
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| model.kernel().from_dot(d, raw_train[(i, i)], raw_self))
                    .collect();
                let f = model.project_kernel_row(&k_row)?;
                Ok((p.iter_rows().map(|t| dot(t, &f)).collect(), dot(&f, &f)))
            }
            _ => Ok((raw_row.to_vec(), raw_self)),
        }
    }
}

/// Fits the pipeline of one patch position from its training vectors.
pub fn fit_patch(patch_id: usize, train: SampleMatrix, labels: &[Label], config: &EnsembleConfig) -> Result<PatchPipeline> {
    let space = SvmSpace::fit(&inner_products(&train), config)?;
    let gram = gram_from_inner(&space.inner, &config.svm.kernel()?)?;
    let (kpca, features) = match (space.kpca, space.projections) {
        (Some(m), Some(p)) => (Some(m.with_vectors(train)), p),
        _ => (None, train),
    };
    let classifier = calibrated_from_gram(&features, &gram, labels, &config.svm)?;
    Ok(PatchPipeline {
        patch_id,
        kpca,
        train_features: features,
        train_labels: labels.to_vec(),
        classifier,
        seed: derive_seed(config.seed, &[patch_id as u64]),
    })
}

/// Bootstrap posterior of subject `test` at one patch, trained on `train`,
/// given raw inner products between all subjects' patch vectors. Matches
/// `fit_patch` followed by `PatchPipeline::posteriors`.
pub(crate) fn posterior_from_inner(
    patch_id: usize,
    inner: &DMatrix<f64>,
    train: &[usize],
    labels: &[Label],
    test: usize,
    config: &EnsembleConfig,
) -> Result<PatchPosterior> {
    let raw = DMatrix::from_fn(train.len(), train.len(), |a, b| inner[(train[a], train[b])]);
    let space = SvmSpace::fit(&raw, config)?;
    let kernel = config.svm.kernel()?;
    let gram = gram_from_inner(&space.inner, &kernel)?;
    let raw_row: Vec<f64> = train.iter().map(|&i| inner[(test, i)]).collect();
    let (dots, nf) = space.test_inner(&raw, &raw_row, inner[(test, test)])?;
    let row: Vec<f64> = dots
        .iter()
        .enumerate()
        .map(|(i, &d)| kernel.from_dot(d, space.inner[(i, i)], nf))
        .collect();
    let seed = derive_seed(config.seed, &[patch_id as u64]);
    bootstrap_from_gram(&gram, labels, &[row], &config.svm, &config.bootstrap, seed).map(|mut v| v.remove(0))
}

impl PatchPipeline {
    pub fn features(&self, patch: &[f64]) -> Result<Vec<f64>> {
        match &self.kpca {
            Some(m) => m.project(patch),
            None => {
                if patch.len() != self.train_features.cols() {
                    return Err(Error::Argument(format!(
                        "patch vector has length {}, expected {}",
                        patch.len(),
                        self.train_features.cols()
                    )));
                }
                Ok(patch.to_vec())
            }
        }
    }

    /// Bootstrap posteriors for several test patches at once.
    pub fn posteriors(&self, patches: &[Vec<f64>], svm: &SvmConfig, boot: &BootstrapConfig) -> Result<Vec<PatchPosterior>> {
        let kernel = svm.kernel()?;
        let inner = inner_products(&self.train_features);
        let gram = gram_from_inner(&inner, &kernel)?;
        let rows: Vec<Vec<f64>> = patches
            .iter()
            .map(|p| {
                let f = self.features(p)?;
                let nf = dot(&f, &f);
                Ok(self
                    .train_features
                    .iter_rows()
                    .enumerate()
                    .map(|(i, t)| kernel.from_dot(dot(t, &f), inner[(i, i)], nf))
                    .collect())
            })
            .collect::<Result<_>>()?;
        bootstrap_from_gram(&gram, &self.train_labels, &rows, svm, boot, self.seed)
    }
}

fn check_cohort<V: Borrow<Volume3>, M: Borrow<LungMask>>(volumes: &[V], masks: &[M], labels: &[Label]) -> Result<()> {
    if volumes.len() != masks.len() || volumes.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} volumes, {} masks and {} labels",
            volumes.len(),
            masks.len(),
            labels.len()
        )));
    }
    let (n_neg, n_pos) = class_counts(labels);
    if n_neg < 2 || n_pos < 2 {
        return Err(Error::Stratification(format!(
            "need at least 2 subjects per class, got {n_neg} control and {n_pos} pneumonia"
        )));
    }
    let dims = volumes[0].borrow().dims();
    if volumes.iter().any(|v| v.borrow().dims() != dims) || masks.iter().any(|m| m.borrow().dims() != dims) {
        return Err(Error::Argument("volumes and masks must share dims".into()));
    }
    Ok(())
}

/// Training matrix of one patch over the given subjects.
pub(crate) fn patch_matrix(volumes: &[&Volume3], masks: &[&LungMask], grid: &PatchGrid, patch: usize) -> Result<SampleMatrix> {
    let d = grid.patch_voxels();
    let mut data = Vec::with_capacity(volumes.len() * d);
    for (v, m) in volumes.iter().zip(masks) {
        data.extend(patch_vector(v, m, grid, patch)?);
    }
    SampleMatrix::new(volumes.len(), d, data)
}

pub fn train_ensemble<V: Borrow<Volume3> + Sync, M: Borrow<LungMask> + Sync>(
    volumes: &[V],
    masks: &[M],
    labels: &[Label],
    config: &EnsembleConfig,
) -> Result<EnsembleModel> {
    check_cohort(volumes, masks, labels)?;
    let grid = make_patch_grid(volumes[0].borrow().dims(), config.patch_side)?;
    let active = active_patches(masks, &grid, config.min_lung_fraction)?;
    if active.is_empty() {
        return Err(Error::Configuration(format!(
            "no patch of side {} reaches lung fraction {}",
            config.patch_side, config.min_lung_fraction
        )));
    }
    let vrefs: Vec<&Volume3> = volumes.iter().map(Borrow::borrow).collect();
    let mrefs: Vec<&LungMask> = masks.iter().map(Borrow::borrow).collect();
    let pipelines = active
        .par_iter()
        .map(|&p| {
            patch_matrix(&vrefs, &mrefs, &grid, p)
                .and_then(|x| fit_patch(p, x, labels, config))
                .map_err(|e| e.in_patch(p))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleModel {
        grid,
        active_patches: active,
        config: *config,
        pipelines,
    })
}

/// `(E_control, E_pneumonia)`: each posterior adds `1/max(u, ε)` to the class
/// it predicts; both sums are divided by the number of posteriors.
pub fn ensemble_weights(posteriors: &[PatchPosterior]) -> Result<(f64, f64)> {
    if posteriors.is_empty() {
        return Err(Error::Argument("no patch posteriors to fuse".into()));
    }
    let mut e = [0.0f64; 2];
    for p in posteriors {
        e[usize::from(p.predicted_label.is_positive())] += 1.0 / p.u.max(UNCERTAINTY_FLOOR);
    }
    let k = posteriors.len() as f64;
    Ok((e[0] / k, e[1] / k))
}

/// Argmax of the fused scores; ties go to control.
pub fn fused_label(e_control: f64, e_pneumonia: f64) -> Label {
    Label::from_positive(e_pneumonia > e_control)
}

/// Unweighted vote over patch labels; ties go to control.
pub fn majority_vote(labels: impl IntoIterator<Item = Label>) -> Label {
    let (mut neg, mut pos) = (0usize, 0usize);
    for l in labels {
        if l.is_positive() {
            pos += 1;
        } else {
            neg += 1;
        }
    }
    Label::from_positive(pos > neg)
}

/// Fuses per-patch posteriors (in patch order) into a decision.
pub fn decide(grid: &PatchGrid, patches: &[usize], posteriors: &[PatchPosterior]) -> Result<SubjectDecision> {
    if patches.len() != posteriors.len() {
        return Err(Error::Size {
            expected: patches.len(),
            found: posteriors.len(),
        });
    }
    let (e_control, e_pneumonia) = ensemble_weights(posteriors)?;
    let per_patch = patches
        .iter()
        .zip(posteriors)
        .map(|(&p, post)| {
            Ok(PatchVote {
                patch_id: p,
                origin: grid.origin(p)?,
                side: grid.patch_side(),
                predicted_label: post.predicted_label,
                mean_p: post.mean_p,
                u: post.u,
                weight: 1.0 / post.u.max(UNCERTAINTY_FLOOR),
            })
        })
        .collect::<Result<_>>()?;
    Ok(SubjectDecision {
        label: fused_label(e_control, e_pneumonia),
        e_control,
        e_pneumonia,
        per_patch,
    })
}

pub fn classify_subject(model: &EnsembleModel, volume: &Volume3, mask: &LungMask) -> Result<SubjectDecision> {
    if volume.dims() != model.grid.volume_dims() || mask.dims() != model.grid.volume_dims() {
        return Err(Error::Argument(format!(
            "subject dims {:?} do not match model dims {:?}",
            volume.dims(),
            model.grid.volume_dims()
        )));
    }
    let posteriors = model
        .pipelines
        .par_iter()
        .map(|pipe| {
            let x = patch_vector(volume, mask, &model.grid, pipe.patch_id)?;
            pipe.posteriors(&[x], &model.config.svm, &model.config.bootstrap)
                .map(|mut v| v.remove(0))
                .map_err(|e| e.in_patch(pipe.patch_id))
        })
        .collect::<Result<Vec<_>>>()?;
    decide(&model.grid, &model.active_patches, &posteriors)
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use crate::volume::Dims;

    pub(crate) fn toy_cohort(dims: Dims, n: usize) -> (Vec<Volume3>, Vec<LungMask>, Vec<Label>) {
        let mut vols = Vec::new();
        let mut masks = Vec::new();
        let mut labels = Vec::new();
        for s in 0..n {
            let pos = s % 2 == 1;
            let v = Volume3::from_fn(dims, |x, y, z| {
                let base = ((x * 7 + y * 3 + z * 5 + s * 11) % 13) as f32 / 13.0;
                if pos && x < dims[0] / 2 {
                    base + 1.0
                } else {
                    base
                }
            })
            .unwrap();
            vols.push(v);
            masks.push(LungMask::filled(dims, true));
            labels.push(Label::from_positive(pos));
        }
        (vols, masks, labels)
    }

    pub(crate) fn quick_config(side: usize) -> EnsembleConfig {
        EnsembleConfig {
            patch_side: side,
            bootstrap: BootstrapConfig {
                repeats: 10,
                ..Default::default()
            },
            svm: SvmConfig {
                gamma: 0.01,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub(crate) fn small_model() -> EnsembleModel {
        let (v, m, l) = toy_cohort([8, 8, 8], 6);
        train_ensemble(&v, &m, &l, &quick_config(4)).unwrap()
    }
}
