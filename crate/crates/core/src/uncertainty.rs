//! Bootstrap posterior distributions and their variance as an uncertainty score.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{cross_gram, gram_matrix, SampleMatrix};
use crate::label::{class_counts, Label};
use crate::rng::stream;
use crate::svm::{fit_dual, gram_decisions, SvmConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub repeats: usize,
    pub subsample_fraction: f64,
    /// Redraws allowed per repeat when a resample misses a class.
    pub max_redraws: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            repeats: 500,
            subsample_fraction: 0.8,
            max_redraws: 50,
        }
    }
}

impl BootstrapConfig {
    fn validate(&self) -> Result<()> {
        if self.repeats < 2 {
            return Err(Error::Argument(format!("need at least 2 bootstrap repeats, got {}", self.repeats)));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::Argument(format!(
                "subsample fraction must lie in (0, 1], got {}",
                self.subsample_fraction
            )));
        }
        Ok(())
    }

    pub fn resample_size(&self, n: usize) -> usize {
        ((self.subsample_fraction * n as f64).ceil() as usize).max(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchPosterior {
    /// Pneumonia posterior from each bootstrap classifier.
    pub samples: Vec<f64>,
    pub mean_p: f64,
    /// Population variance of `samples`.
    pub u: f64,
    pub predicted_label: Label,
}

impl PatchPosterior {
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        let u = posterior_variance(&samples)?;
        let mean_p = samples.iter().sum::<f64>() / samples.len() as f64;
        Ok(Self {
            predicted_label: Label::from_positive(mean_p >= 0.5),
            samples,
            mean_p,
            u,
        })
    }

    pub fn repeats(&self) -> usize {
        self.samples.len()
    }
}

/// `Σ(x_i − μ)² / K`.
pub fn posterior_variance(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Argument("variance of an empty sample".into()));
    }
    let k = samples.len() as f64;
    let mu = samples.iter().sum::<f64>() / k;
    Ok(samples.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / k)
}

/// Indices of one resample: `m` uniform draws with replacement, redrawn
/// until both classes appear.
fn draw_resample(labels: &[Label], m: usize, max_redraws: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let n = labels.len();
    for _ in 0..=max_redraws {
        let idx: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
        let pos = idx.iter().filter(|&&i| labels[i].is_positive()).count();
        if pos > 0 && pos < m {
            return Ok(idx);
        }
    }
    Err(Error::Resample(format!(
        "no resample of size {m} contained both classes after {max_redraws} redraws"
    )))
}

/// Bootstrap over a precomputed training Gram matrix. `test_rows[t][i]` is
/// the kernel value between test point `t` and training sample `i`. Repeat
/// `r` draws from the stream `(seed, r)`, so the result does not depend on
/// scheduling.
pub(crate) fn bootstrap_from_gram(
    gram: &DMatrix<f64>,
    labels: &[Label],
    test_rows: &[Vec<f64>],
    svm: &SvmConfig,
    boot: &BootstrapConfig,
    seed: u64,
) -> Result<Vec<PatchPosterior>> {
    boot.validate()?;
    let n = labels.len();
    let (n_neg, n_pos) = class_counts(labels);
    if n_neg == 0 || n_pos == 0 {
        return Err(Error::Argument("bootstrap needs both classes in the training set".into()));
    }
    if gram.nrows() != n || test_rows.iter().any(|r| r.len() != n) {
        return Err(Error::Size {
            expected: n,
            found: gram.nrows(),
        });
    }
    let m = boot.resample_size(n);
    let per_repeat: Vec<Vec<f64>> = (0..boot.repeats)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, &[r as u64]);
            let idx = draw_resample(labels, m, boot.max_redraws, &mut rng)?;
            let sub = DMatrix::from_fn(m, m, |a, b| gram[(idx[a], idx[b])]);
            let sub_y: Vec<Label> = idx.iter().map(|&i| labels[i]).collect();
            let fit = fit_dual(&sub, &sub_y, svm, false)?;
            let f_train = gram_decisions(&sub, &sub_y, &fit);
            let sigmoid = svm.calibrate(&f_train, &sub_y)?;
            Ok(test_rows
                .iter()
                .map(|row| {
                    let f: f64 = idx
                        .iter()
                        .zip(&fit.alpha)
                        .zip(&sub_y)
                        .filter(|((_, a), _)| **a != 0.0)
                        .map(|((&i, a), l)| a * l.sign() * row[i])
                        .sum::<f64>()
                        + fit.bias;
                    sigmoid.p_pos(f)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    (0..test_rows.len())
        .map(|t| PatchPosterior::from_samples(per_repeat.iter().map(|p| p[t]).collect()))
        .collect()
}

/// Trains `boot.repeats` calibrated SVMs on resamples of the training set
/// and collects each one's pneumonia posterior for `test_x`.
pub fn bootstrap_posterior(
    train_x: &SampleMatrix,
    train_y: &[Label],
    test_x: &[f64],
    svm: &SvmConfig,
    boot: &BootstrapConfig,
    seed: u64,
) -> Result<PatchPosterior> {
    if train_x.rows() != train_y.len() {
        return Err(Error::Size {
            expected: train_y.len(),
            found: train_x.rows(),
        });
    }
    let kernel = svm.kernel()?;
    let gram = gram_matrix(train_x, &kernel)?;
    let test = SampleMatrix::new(1, test_x.len(), test_x.to_vec())?;
    let cross = cross_gram(&test, train_x, &kernel)?;
    let row: Vec<f64> = cross.row(0).iter().copied().collect();
    Ok(bootstrap_from_gram(&gram, train_y, &[row], svm, boot, seed)?.remove(0))
}

/// CSV `patch_id,repeat,p_pos`.
pub fn write_posteriors_csv<'a>(rows: impl IntoIterator<Item = (usize, &'a PatchPosterior)>, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "patch_id,repeat,p_pos")?;
    for (patch, post) in rows {
        for (r, p) in post.samples.iter().enumerate() {
            writeln!(out, "{patch},{r},{p}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussians(n_per: usize, sep: f64, seed: u64) -> (SampleMatrix, Vec<Label>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::StandardNormal;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * n_per {
            let pos = i % 2 == 0;
            let c = if pos { sep } else { -sep };
            let a: f64 = rng.sample(normal);
            let b: f64 = rng.sample(normal);
            rows.push(vec![c + 0.5 * a, 0.5 * b]);
            labels.push(Label::from_positive(pos));
        }
        (SampleMatrix::from_rows(&rows).unwrap(), labels)
    }

    fn small_boot() -> BootstrapConfig {
        BootstrapConfig {
            repeats: 40,
            ..Default::default()
        }
    }

    #[test]
    fn hand_computed_variance() {
        let p = PatchPosterior::from_samples(vec![0.4, 0.6]).unwrap();
        assert_eq!(p.mean_p, 0.5);
        assert!((p.u - 0.01).abs() <= 4.0 * f64::EPSILON * 0.01, "{:e}", p.u - 0.01);
        assert_eq!(p.predicted_label, Label::Pneumonia);
        assert_eq!(posterior_variance(&[0.3; 7]).unwrap(), 0.0);
        assert_eq!(posterior_variance(&[0.0, 1.0]).unwrap(), 0.25);
        assert!(matches!(posterior_variance(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn uniform_draws_have_one_twelfth_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        assert!((posterior_variance(&x).unwrap() - 1.0 / 12.0).abs() < 0.01);
    }

    #[test]
    fn consistent_classifier_has_tiny_uncertainty() {
        let (x, y) = gaussians(20, 3.0, 1);
        let post = bootstrap_posterior(
            &x,
            &y,
            &[3.0, 0.0],
            &SvmConfig {
                gamma: 0.5,
                ..Default::default()
            },
            &small_boot(),
            7,
        )
        .unwrap();
        assert!(post.mean_p > 0.9);
        assert!(post.u < 1e-3);
        assert_eq!(post.repeats(), 40);
    }

    #[test]
    fn boundary_points_are_more_uncertain() {
        let (x, y) = gaussians(30, 1.0, 2);
        let cfg = SvmConfig {
            gamma: 0.5,
            ..Default::default()
        };
        let u_at = |p: f64| bootstrap_posterior(&x, &y, &[p, 0.0], &cfg, &small_boot(), 3).unwrap().u;
        let (mid, near, far) = (u_at(0.0), u_at(0.5), u_at(1.0));
        assert!(mid > near && near > far, "{mid} {near} {far}");
    }

    #[test]
    fn same_seed_is_bit_identical_and_seeds_differ() {
        let (x, y) = gaussians(15, 0.8, 4);
        let cfg = SvmConfig::default();
        let a = bootstrap_posterior(&x, &y, &[0.1, 0.2], &cfg, &small_boot(), 99).unwrap();
        let b = bootstrap_posterior(&x, &y, &[0.1, 0.2], &cfg, &small_boot(), 99).unwrap();
        assert_eq!(a, b);
        let c = bootstrap_posterior(&x, &y, &[0.1, 0.2], &cfg, &small_boot(), 100).unwrap();
        assert_ne!(a.samples, c.samples);
        let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let d = serial.install(|| bootstrap_posterior(&x, &y, &[0.1, 0.2], &cfg, &small_boot(), 99).unwrap());
        assert_eq!(a, d);
    }

    #[test]
    fn full_fraction_still_varies() {
        let (x, y) = gaussians(15, 0.5, 5);
        let boot = BootstrapConfig {
            subsample_fraction: 1.0,
            ..small_boot()
        };
        let post = bootstrap_posterior(&x, &y, &[0.0, 0.0], &SvmConfig::default(), &boot, 1).unwrap();
        assert!(post.u > 0.0);
    }

    #[test]
    fn hopeless_resampling_is_resample_error() {
        let x = SampleMatrix::from_rows(&[[0.0], [1.0], [2.0], [3.0], [4.0], [5.0], [6.0], [7.0], [8.0], [9.0], [10.0], [11.0]]).unwrap();
        let mut y = vec![Label::Control; 12];
        y[0] = Label::Pneumonia;
        let boot = BootstrapConfig {
            repeats: 2,
            subsample_fraction: 0.1,
            max_redraws: 0,
        };
        let r = (0..20).find_map(|s| bootstrap_posterior(&x, &y, &[0.0], &SvmConfig::default(), &boot, s).err());
        assert!(matches!(r, Some(Error::Resample(_))));
    }

    #[test]
    fn csv_export() {
        let p = PatchPosterior::from_samples(vec![0.25, 0.75]).unwrap();
        let mut buf = Vec::new();
        write_posteriors_csv([(3, &p)], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "patch_id,repeat,p_pos\n3,0,0.25\n3,1,0.75\n");
    }

    proptest! {
        #[test]
        fn variance_is_bounded_and_permutation_invariant(v in proptest::collection::vec(0.0f64..=1.0, 1..40), rot in 0usize..40) {
            let u = posterior_variance(&v).unwrap();
            prop_assert!((0.0..=0.25 + 1e-15).contains(&u));
            let mut w = v.clone();
            let len = w.len();
            w.rotate_left(rot % len);
            w.reverse();
            prop_assert!((posterior_variance(&w).unwrap() - u).abs() <= 1e-15);
        }
    }
}
