//! Cohort preprocessing: lung segmentation, mean-template construction,
//! affine registration to the template, resampling and standardization.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Label;
use crate::registration::{build_sampled_template, resample_mask, resample_with, AffineTransform, RegistrationConfig, SampledTemplate};
use crate::segmentation::{segment_lungs, LungMask};
use crate::volume::{downsample, load_volume, save_volume, standardize, voxel_count, Dims, Volume3};

pub const DEFAULT_TEMPLATE_ROUNDS: usize = 2;
pub const PREPROCESSED_MANIFEST: &str = "preprocessed.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Downsampling target applied on load; `None` keeps the stored grid.
    pub target_dims: Option<Dims>,
    pub template_rounds: usize,
    pub registration: RegistrationConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_dims: Some([128; 3]),
            template_rounds: DEFAULT_TEMPLATE_ROUNDS,
            registration: RegistrationConfig::default(),
        }
    }
}

/// Downsamples (when a target is set and differs) and segments one raw scan.
pub fn prepare_raw(volume: Volume3, target: Option<Dims>) -> Result<(Volume3, LungMask)> {
    let volume = match target {
        Some(t) if t != volume.dims() => downsample(&volume, t)?,
        _ => volume,
    };
    let mask = segment_lungs(&volume)?;
    Ok((volume, mask))
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    /// Registered and standardized volumes, one per input.
    pub volumes: Vec<Volume3>,
    /// Lung masks warped with the same transforms.
    pub masks: Vec<LungMask>,
    pub transforms: Vec<AffineTransform>,
    pub template: SampledTemplate,
}

/// Builds the template from `template_from` only, then registers, resamples
/// and standardizes every volume onto the template grid.
pub fn preprocess_cohort(volumes: &[&Volume3], masks: &[&LungMask], template_from: &[usize], config: &PreprocessConfig) -> Result<Preprocessed> {
    if volumes.len() != masks.len() {
        return Err(Error::Size {
            expected: volumes.len(),
            found: masks.len(),
        });
    }
    if let Some(&i) = template_from.iter().find(|&&i| i >= volumes.len()) {
        return Err(Error::Argument(format!("template subject {i} out of range")));
    }
    let refs: Vec<&Volume3> = template_from.iter().map(|&i| volumes[i]).collect();
    let template = build_sampled_template(&refs, config.template_rounds, &config.registration)?.template;
    let dims = template.dims();
    let out = volumes
        .par_iter()
        .zip(masks)
        .map(|(v, m)| -> Result<(Volume3, LungMask, AffineTransform)> {
            if m.dims() != v.dims() {
                return Err(Error::Argument("mask and volume dims differ".into()));
            }
            let t = template.register(v, &config.registration)?.transform;
            let warped = standardize(&resample_with(v, &t, dims)?)?;
            Ok((warped, resample_mask(m, &t, dims)?, t))
        })
        .enumerate()
        .map(|(i, r)| r.map_err(|e| e.in_volume(i)))
        .collect::<Result<Vec<_>>>()?;
    let mut pre = Preprocessed {
        volumes: Vec::with_capacity(out.len()),
        masks: Vec::with_capacity(out.len()),
        transforms: Vec::with_capacity(out.len()),
        template,
    };
    for (v, m, t) in out {
        pre.volumes.push(v);
        pre.masks.push(m);
        pre.transforms.push(t);
    }
    Ok(pre)
}

/// Voxelwise mean of the given volumes after warping each with its transform.
pub fn registered_mean(volumes: &[&Volume3], transforms: &[AffineTransform]) -> Result<Volume3> {
    let first = volumes.first().ok_or_else(|| Error::Argument("no volumes".into()))?;
    if volumes.len() != transforms.len() {
        return Err(Error::Size {
            expected: volumes.len(),
            found: transforms.len(),
        });
    }
    let dims = first.dims();
    let mut acc = vec![0.0f64; voxel_count(dims)];
    for (v, t) in volumes.iter().zip(transforms) {
        for (a, w) in acc.iter_mut().zip(resample_with(v, t, dims)?.data()) {
            *a += f64::from(*w);
        }
    }
    let n = volumes.len() as f64;
    Volume3::new(dims, first.spacing(), acc.into_iter().map(|s| (s / n) as f32).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessedEntry {
    pub id: String,
    pub label: Label,
    pub volume: String,
    pub mask: String,
    pub transform: AffineTransform,
}

/// `preprocessed.json`: one entry per subject plus the template volume file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessedManifest {
    pub subjects: Vec<PreprocessedEntry>,
    pub template: String,
}

/// Writes `<id>.evr`, `<id>_mask.evr`, `template.evr` and the manifest.
pub fn write_preprocessed(
    dir: impl AsRef<Path>,
    ids: &[String],
    labels: &[Label],
    pre: &Preprocessed,
    template: &Volume3,
) -> Result<PreprocessedManifest> {
    let dir = dir.as_ref();
    if ids.len() != pre.volumes.len() || labels.len() != pre.volumes.len() {
        return Err(Error::Argument("ids, labels and volumes differ in length".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let subjects = ids
        .par_iter()
        .enumerate()
        .map(|(i, id)| {
            let volume = format!("{id}.evr");
            let mask = format!("{id}_mask.evr");
            save_volume(&pre.volumes[i], dir.join(&volume))?;
            pre.masks[i].save(dir.join(&mask))?;
            Ok(PreprocessedEntry {
                id: id.clone(),
                label: labels[i],
                volume,
                mask,
                transform: pre.transforms[i],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    save_volume(template, dir.join("template.evr"))?;
    let manifest = PreprocessedManifest {
        subjects,
        template: "template.evr".into(),
    };
    let path = dir.join(PREPROCESSED_MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads a directory written by [`write_preprocessed`].
pub fn load_preprocessed(dir: impl AsRef<Path>) -> Result<(PreprocessedManifest, Vec<Volume3>, Vec<LungMask>)> {
    let dir = dir.as_ref();
    let path = dir.join(PREPROCESSED_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: PreprocessedManifest = serde_json::from_str(&text)?;
    let loaded = manifest
        .subjects
        .par_iter()
        .map(|s| Ok((load_volume(dir.join(&s.volume))?, LungMask::load(dir.join(&s.mask))?)))
        .collect::<Result<Vec<_>>>()?;
    let (volumes, masks) = loaded.into_iter().unzip();
    Ok((manifest, volumes, masks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_subject, PhantomSpec};

    #[test]
    fn preprocessed_volumes_are_standardized_and_aligned() {
        let spec = PhantomSpec {
            patch_sides: vec![],
            ..PhantomSpec::for_dims([32; 3])
        };
        let subjects: Vec<_> = (0..4).map(|s| generate_subject(&spec, s % 2 == 1, s).unwrap()).collect();
        let raw: Vec<(Volume3, LungMask)> = subjects.iter().map(|s| prepare_raw(s.volume.clone(), None).unwrap()).collect();
        let vols: Vec<&Volume3> = raw.iter().map(|r| &r.0).collect();
        let masks: Vec<&LungMask> = raw.iter().map(|r| &r.1).collect();
        let config = PreprocessConfig {
            target_dims: None,
            template_rounds: 1,
            registration: RegistrationConfig {
                sample_stride: 2,
                ..RegistrationConfig::default()
            },
        };
        let pre = preprocess_cohort(&vols, &masks, &[0, 1, 2], &config).unwrap();
        assert_eq!(pre.volumes.len(), 4);
        for v in &pre.volumes {
            let (mean, std) = v.mean_std();
            assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-5);
        }
        // Warped masks overlap each other more than the raw ones.
        let d_raw = crate::segmentation::dice(masks[0], masks[3]).unwrap();
        let d_reg = crate::segmentation::dice(&pre.masks[0], &pre.masks[3]).unwrap();
        assert!(d_reg > d_raw, "{d_reg} <= {d_raw}");
        assert!(preprocess_cohort(&vols, &masks, &[9], &config).is_err());

        let dir = tempfile::tempdir().unwrap();
        let ids: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
        let labels: Vec<Label> = (0..4).map(|i| Label::from_positive(i % 2 == 1)).collect();
        let template = registered_mean(&vols[..3], &pre.transforms[..3]).unwrap();
        let written = write_preprocessed(dir.path(), &ids, &labels, &pre, &template).unwrap();
        let (manifest, v, m) = load_preprocessed(dir.path()).unwrap();
        assert_eq!(manifest, written);
        assert_eq!(v, pre.volumes);
        assert_eq!(m, pre.masks);
        assert!(dir.path().join("template.evr").exists());
    }

    #[test]
    fn downsampling_on_load() {
        let spec = PhantomSpec {
            patch_sides: vec![],
            ..PhantomSpec::for_dims([40; 3])
        };
        let s = generate_subject(&spec, false, 1).unwrap();
        let (v, m) = prepare_raw(s.volume, Some([20; 3])).unwrap();
        assert_eq!(v.dims(), [20; 3]);
        assert_eq!(m.dims(), [20; 3]);
    }
}
