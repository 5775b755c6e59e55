//! Leave-one-out evaluation over one or more (features, patch side) runs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{cohens_kappa, compute_metrics, roc_auc, ConfusionCounts, Metrics, RocPoint};
use crate::ensemble::{decide, majority_vote, patch_matrix, posterior_from_inner, EnsembleConfig, FeatureMode, PatchVote};
use crate::error::{Error, Result};
use crate::kernel::inner_products;
use crate::label::{class_counts, Label};
use crate::phantom::CohortManifest;
use crate::preprocess::{prepare_raw, preprocess_cohort, PreprocessConfig};
use crate::rng::{derive_seed, stream};
use crate::segmentation::{lung_fraction, LungMask};
use crate::volume::{load_volume, make_patch_grid, Volume3};

pub const DEFAULT_CONFIDENCE_RESAMPLES: usize = 1000;

/// Raw scans with their lung masks, as segmented on load.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub ids: Vec<String>,
    pub labels: Vec<Label>,
    pub volumes: Vec<Volume3>,
    pub masks: Vec<LungMask>,
}

impl Cohort {
    /// Segments every volume (after optional downsampling).
    pub fn new(ids: Vec<String>, labels: Vec<Label>, volumes: Vec<Volume3>, target: Option<crate::volume::Dims>) -> Result<Self> {
        if ids.len() != labels.len() || ids.len() != volumes.len() {
            return Err(Error::Argument("ids, labels and volumes differ in length".into()));
        }
        let prepared = volumes
            .into_par_iter()
            .enumerate()
            .map(|(i, v)| prepare_raw(v, target).map_err(|e| e.in_volume(i)))
            .collect::<Result<Vec<_>>>()?;
        let (volumes, masks) = prepared.into_iter().unzip();
        Ok(Self { ids, labels, volumes, masks })
    }

    /// Loads a generated cohort directory (`cohort.json` plus volumes).
    pub fn load(dir: impl AsRef<Path>, target: Option<crate::volume::Dims>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = CohortManifest::load(dir.join("cohort.json"))?;
        let volumes = manifest
            .subjects
            .par_iter()
            .map(|s| load_volume(dir.join(&s.volume)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            manifest.subjects.iter().map(|s| s.id.clone()).collect(),
            manifest.subjects.iter().map(|s| s.label).collect(),
            volumes,
            target,
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Hex SHA-256 of the sorted ids, newline-joined.
pub fn training_set_hash<'a>(ids: impl IntoIterator<Item = &'a str>) -> String {
    let mut sorted: Vec<&str> = ids.into_iter().collect();
    sorted.sort_unstable();
    let mut h = Sha256::new();
    for id in sorted {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSpec {
    pub features: FeatureMode,
    pub patch_side: usize,
}

impl RunSpec {
    pub fn kpca(patch_side: usize) -> Self {
        Self {
            features: FeatureMode::Kpca,
            patch_side,
        }
    }

    pub fn vaf(patch_side: usize) -> Self {
        Self {
            features: FeatureMode::Voxels,
            patch_side,
        }
    }

    pub fn method(&self) -> &'static str {
        match self.features {
            FeatureMode::Kpca => "kpca",
            FeatureMode::Voxels => "vaf",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooConfig {
    pub preprocess: PreprocessConfig,
    /// Base ensemble settings; side, features and seed are set per run/fold.
    pub ensemble: EnsembleConfig,
    pub runs: Vec<RunSpec>,
    pub confidence_resamples: usize,
    pub seed: u64,
    /// Number of cross-fitted registration templates; `None` rebuilds the
    /// template for every fold.
    #[serde(default)]
    pub template_groups: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub subject_id: String,
    pub truth: Label,
    pub predicted: Label,
    /// Unweighted vote over the same per-patch labels.
    pub majority: Label,
    pub e_control: f64,
    pub e_pneumonia: f64,
    pub train_hash: String,
    /// Hash of the subjects the registration template was built from.
    pub template_hash: String,
    /// Subjects left out of that template, the test subject among them.
    pub template_excluded: Vec<String>,
    pub votes: Vec<PatchVote>,
}

impl FoldRecord {
    pub fn score(&self) -> f64 {
        self.e_pneumonia - self.e_control
    }
}

/// Per-metric standard deviation across subject-bootstrap resamples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSpread {
    pub bal_acc: Option<f64>,
    pub sens: Option<f64>,
    pub spec: Option<f64>,
    pub prec: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaPoint {
    pub classifier_id: usize,
    pub kappa: f64,
    pub bal_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: String,
    pub patch_side: usize,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
    pub confidence: MetricSpread,
    pub majority_counts: ConfusionCounts,
    pub majority_metrics: Metrics,
    pub roc_points: Vec<RocPoint>,
    pub kappa_points: Vec<KappaPoint>,
    /// Kappa of the fused predictions, the reference line of the diagram.
    pub ensemble_kappa: Option<f64>,
    pub folds: Vec<FoldRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LooTiming {
    pub preprocess_secs: f64,
    /// Training plus classification time per run, summed over folds.
    pub run_secs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LooOutcome {
    pub reports: Vec<EvaluationReport>,
    pub timing: LooTiming,
}

/// Template group of every subject: `None` puts each subject in its own
/// group; `Some(g)` deals controls and then pneumonia subjects round-robin
/// into `g` groups.
pub fn template_groups(labels: &[Label], groups: Option<usize>) -> Result<Vec<usize>> {
    let n = labels.len();
    match groups {
        None => Ok((0..n).collect()),
        Some(g) if g < 2 || g > n => Err(Error::Argument(format!("template groups must be in 2..={n}, got {g}"))),
        Some(g) => {
            let mut out = vec![0; n];
            let order = (0..n)
                .filter(|&i| !labels[i].is_positive())
                .chain((0..n).filter(|&i| labels[i].is_positive()));
            for (k, i) in order.enumerate() {
                out[i] = k % g;
            }
            Ok(out)
        }
    }
}

/// Leave-one-out over all runs in `config`. Subjects are split into template
/// groups; each group is preprocessed once against a template built from the
/// subjects outside it, so no test subject contributes to its own template.
pub fn loo_sweep(cohort: &Cohort, config: &LooConfig) -> Result<LooOutcome> {
    let n = cohort.len();
    let (n_neg, n_pos) = class_counts(&cohort.labels);
    if n_neg < 2 || n_pos < 2 {
        return Err(Error::Stratification(format!(
            "leave-one-out needs at least 2 subjects per class, got {n_neg} control and {n_pos} pneumonia"
        )));
    }
    if config.runs.is_empty() {
        return Err(Error::Argument("no runs requested".into()));
    }
    let group_of = template_groups(&cohort.labels, config.template_groups)?;
    let n_groups = group_of.iter().max().map_or(0, |g| g + 1);
    let trains: Vec<Vec<usize>> = (0..n).map(|t| (0..n).filter(|&i| i != t).collect()).collect();
    for (t, train) in trains.iter().enumerate() {
        let (tn, tp) = class_counts(&train.iter().map(|&i| cohort.labels[i]).collect::<Vec<_>>());
        if tn < 2 || tp < 2 {
            return Err(Error::Stratification(format!(
                "fold {t}: training set has {tn} control and {tp} pneumonia"
            )));
        }
    }
    let vols: Vec<&Volume3> = cohort.volumes.iter().collect();
    let masks: Vec<&LungMask> = cohort.masks.iter().collect();
    let mut timing = LooTiming {
        preprocess_secs: 0.0,
        run_secs: vec![0.0; config.runs.len()],
    };
    let mut per_run: Vec<Vec<Option<FoldRecord>>> = vec![vec![None; n]; config.runs.len()];
    // Groups run one at a time since each holds a preprocessed copy of the
    // cohort; the work inside a group is parallel.
    for g in 0..n_groups {
        let members: Vec<usize> = (0..n).filter(|&i| group_of[i] == g).collect();
        let template_from: Vec<usize> = (0..n).filter(|&i| group_of[i] != g).collect();
        let template_hash = training_set_hash(template_from.iter().map(|&i| cohort.ids[i].as_str()));
        let excluded: Vec<String> = members.iter().map(|&i| cohort.ids[i].clone()).collect();
        let started = Instant::now();
        let pre = preprocess_cohort(&vols, &masks, &template_from, &config.preprocess)?;
        timing.preprocess_secs += started.elapsed().as_secs_f64();
        let pm: Vec<&LungMask> = pre.masks.iter().collect();
        let pv: Vec<&Volume3> = pre.volumes.iter().collect();
        for (r, run) in config.runs.iter().enumerate() {
            let started = Instant::now();
            let grid = make_patch_grid(pre.template.dims(), run.patch_side)?;
            let fractions: Vec<Vec<f64>> = pm
                .par_iter()
                .map(|m| (0..grid.len()).map(|p| lung_fraction(m, &grid, p)).collect::<Result<Vec<_>>>())
                .collect::<Result<_>>()?;
            let active_for = |t: usize| -> Vec<usize> {
                (0..grid.len())
                    .filter(|&p| {
                        let sum: f64 = trains[t].iter().map(|&i| fractions[i][p]).sum();
                        sum / trains[t].len() as f64 >= config.ensemble.min_lung_fraction
                    })
                    .collect()
            };
            let actives: Vec<Vec<usize>> = members.iter().map(|&t| active_for(t)).collect();
            let needed: BTreeSet<usize> = actives.iter().flatten().copied().collect();
            let inner: BTreeMap<usize, DMatrix<f64>> = needed
                .par_iter()
                .map(|&p| Ok((p, inner_products(&patch_matrix(&pv, &pm, &grid, p)?))))
                .collect::<Result<_>>()?;
            for (&test, active) in members.iter().zip(&actives) {
                if active.is_empty() {
                    return Err(Error::Configuration(format!(
                        "no patch of side {} reaches lung fraction {}",
                        run.patch_side, config.ensemble.min_lung_fraction
                    )));
                }
                let train = &trains[test];
                let train_labels: Vec<Label> = train.iter().map(|&i| cohort.labels[i]).collect();
                let cfg = EnsembleConfig {
                    patch_side: run.patch_side,
                    features: run.features,
                    seed: derive_seed(config.seed, &[test as u64]),
                    ..config.ensemble
                };
                let posteriors = active
                    .par_iter()
                    .map(|&p| posterior_from_inner(p, &inner[&p], train, &train_labels, test, &cfg).map_err(|e| e.in_patch(p)))
                    .collect::<Result<Vec<_>>>()?;
                let d = decide(&grid, active, &posteriors)?;
                per_run[r][test] = Some(FoldRecord {
                    subject_id: cohort.ids[test].clone(),
                    truth: cohort.labels[test],
                    predicted: d.label,
                    majority: majority_vote(d.per_patch.iter().map(|v| v.predicted_label)),
                    e_control: d.e_control,
                    e_pneumonia: d.e_pneumonia,
                    train_hash: training_set_hash(train.iter().map(|&i| cohort.ids[i].as_str())),
                    template_hash: template_hash.clone(),
                    template_excluded: excluded.clone(),
                    votes: d.per_patch,
                });
            }
            timing.run_secs[r] += started.elapsed().as_secs_f64();
        }
        log::info!("template group {}/{} done ({} test subjects)", g + 1, n_groups, members.len());
    }
    let reports = config
        .runs
        .iter()
        .zip(per_run)
        .enumerate()
        .map(|(r, (run, folds))| {
            let folds = folds.into_iter().map(|f| f.expect("every subject belongs to a group")).collect();
            build_report(run, folds, config.confidence_resamples, derive_seed(config.seed, &[u64::MAX, r as u64]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LooOutcome { reports, timing })
}

/// Single-run leave-one-out.
pub fn loo_evaluate(cohort: &Cohort, preprocess: &PreprocessConfig, ensemble: &EnsembleConfig, seed: u64) -> Result<EvaluationReport> {
    let config = LooConfig {
        preprocess: preprocess.clone(),
        ensemble: *ensemble,
        runs: vec![RunSpec {
            features: ensemble.features,
            patch_side: ensemble.patch_side,
        }],
        confidence_resamples: DEFAULT_CONFIDENCE_RESAMPLES,
        seed,
        template_groups: None,
    };
    Ok(loo_sweep(cohort, &config)?.reports.remove(0))
}

/// Assembles metrics, ROC, confidence and kappa points from fold records.
pub fn build_report(run: &RunSpec, folds: Vec<FoldRecord>, resamples: usize, seed: u64) -> Result<EvaluationReport> {
    let truth: Vec<Label> = folds.iter().map(|f| f.truth).collect();
    let pred: Vec<Label> = folds.iter().map(|f| f.predicted).collect();
    let majority: Vec<Label> = folds.iter().map(|f| f.majority).collect();
    let scores: Vec<f64> = folds.iter().map(FoldRecord::score).collect();
    let counts = ConfusionCounts::from_predictions(&pred, &truth)?;
    let roc = roc_auc(&scores, &truth)?;
    let mut metrics = compute_metrics(&counts);
    metrics.auc = Some(roc.auc);
    let majority_counts = ConfusionCounts::from_predictions(&majority, &truth)?;
    Ok(EvaluationReport {
        method: run.method().to_string(),
        patch_side: run.patch_side,
        counts,
        metrics,
        confidence: confidence(&pred, &truth, &scores, resamples, seed),
        majority_counts,
        majority_metrics: compute_metrics(&majority_counts),
        roc_points: roc.points,
        kappa_points: kappa_points(&folds)?,
        ensemble_kappa: cohens_kappa(&pred, &truth).ok(),
        folds,
    })
}

fn population_std(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Some((values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Spread of each metric over bootstrap resamples of the subjects. Resamples
/// where a metric is undefined are skipped for that metric.
pub fn confidence(pred: &[Label], truth: &[Label], scores: &[f64], resamples: usize, seed: u64) -> MetricSpread {
    let n = truth.len();
    if n == 0 || resamples == 0 {
        return MetricSpread::default();
    }
    let mut rng = stream(seed, &[]);
    let mut acc: [Vec<f64>; 6] = Default::default();
    let (mut p, mut t, mut s) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..resamples {
        p.clear();
        t.clear();
        s.clear();
        for _ in 0..n {
            let i = rand::Rng::random_range(&mut rng, 0..n);
            p.push(pred[i]);
            t.push(truth[i]);
            s.push(scores[i]);
        }
        let Ok(c) = ConfusionCounts::from_predictions(&p, &t) else { continue };
        let m = compute_metrics(&c);
        let auc = roc_auc(&s, &t).ok().map(|r| r.auc);
        for (slot, v) in acc.iter_mut().zip([m.bal_acc, m.sens, m.spec, m.prec, m.f1, auc]) {
            if let Some(v) = v {
                slot.push(v);
            }
        }
    }
    let [bal_acc, sens, spec, prec, f1, auc] = acc.map(|v| population_std(&v));
    MetricSpread {
        bal_acc,
        sens,
        spec,
        prec,
        f1,
        auc,
    }
}

/// One point per patch classifier that voted in every fold: kappa and
/// balanced accuracy of its own leave-one-out labels against the truth.
pub fn kappa_points(folds: &[FoldRecord]) -> Result<Vec<KappaPoint>> {
    let truth: Vec<Label> = folds.iter().map(|f| f.truth).collect();
    let mut by_patch: BTreeMap<usize, Vec<Label>> = BTreeMap::new();
    for f in folds {
        for v in &f.votes {
            by_patch.entry(v.patch_id).or_default().push(v.predicted_label);
        }
    }
    let mut out = Vec::new();
    for (id, pred) in by_patch {
        if pred.len() != folds.len() {
            continue;
        }
        let c = ConfusionCounts::from_predictions(&pred, &truth)?;
        let (Some(bal_acc), Ok(kappa)) = (compute_metrics(&c).bal_acc, cohens_kappa(&pred, &truth)) else {
            continue;
        };
        out.push(KappaPoint {
            classifier_id: id,
            kappa,
            bal_acc,
        });
    }
    Ok(out)
}

/// Checks that every fold's recorded training hash equals the hash of the
/// cohort minus that fold's test subject, and that its registration template
/// came from the cohort minus a set containing the test subject.
pub fn audit_leakage(ids: &[String], report: &EvaluationReport) -> Result<()> {
    for f in &report.folds {
        if !ids.contains(&f.subject_id) {
            return Err(Error::Value(format!("fold subject {} is not in the cohort", f.subject_id)));
        }
        let expected = training_set_hash(ids.iter().filter(|i| **i != f.subject_id).map(String::as_str));
        if f.train_hash != expected {
            return Err(Error::Value(format!(
                "fold {} training hash does not match the cohort without the test subject",
                f.subject_id
            )));
        }
        let template = training_set_hash(ids.iter().filter(|i| !f.template_excluded.contains(i)).map(String::as_str));
        if !f.template_excluded.contains(&f.subject_id) || f.template_hash != template {
            return Err(Error::Value(format!(
                "fold {} registration template may include the test subject",
                f.subject_id
            )));
        }
    }
    Ok(())
}
