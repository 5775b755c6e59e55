//! Class-weighted soft-margin kernel SVM with sigmoid-calibrated posteriors.

mod grid;
mod platt;
pub(crate) mod smo;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{dot, gram_matrix, KernelSpec, SampleMatrix};
use crate::label::{class_counts, Label};

pub use grid::{grid_search, stratified_folds, write_grid_csv, GridCell, GridSearch, DEFAULT_CS, DEFAULT_GAMMAS};
pub use platt::{fit_platt, fit_platt_weighted, smoothed_targets, PlattFit, PlattSigmoid, DEFAULT_NEWTON_ITERS};

pub const DEFAULT_MAX_ITER: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassWeighting {
    /// `w_c = n / (2·n_c)`.
    Balanced,
    Explicit {
        neg: f64,
        pos: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub c: f64,
    /// RBF width: `k(x, z) = exp(−γ‖x − z‖²)`.
    pub gamma: f64,
    pub weighting: ClassWeighting,
    pub kkt_tol: f64,
    pub max_iter: usize,
    pub platt_iters: usize,
    /// Applies the class weights to the calibration likelihood as well.
    #[serde(default = "default_true")]
    pub weighted_calibration: bool,
}

fn default_true() -> bool {
    true
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            gamma: 3.0,
            weighting: ClassWeighting::Balanced,
            kkt_tol: 1e-3,
            max_iter: DEFAULT_MAX_ITER,
            platt_iters: DEFAULT_NEWTON_ITERS,
            weighted_calibration: true,
        }
    }
}

impl SvmConfig {
    pub fn kernel(&self) -> Result<KernelSpec> {
        KernelSpec::rbf_gamma(self.gamma)
    }

    fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Argument(format!("C must be positive, got {}", self.c)));
        }
        if !(self.kkt_tol > 0.0) {
            return Err(Error::Argument(format!("kkt_tol must be positive, got {}", self.kkt_tol)));
        }
        if let ClassWeighting::Explicit { neg, pos } = self.weighting {
            if !(neg > 0.0 && pos > 0.0 && neg.is_finite() && pos.is_finite()) {
                return Err(Error::Argument("class weights must be positive".into()));
            }
        }
        self.kernel().map(drop)
    }

    /// Calibrates decision values `f` of a model trained on `labels`.
    pub fn calibrate(&self, f: &[f64], labels: &[Label]) -> Result<PlattSigmoid> {
        let weights = if self.weighted_calibration {
            self.class_weights(labels)
        } else {
            (1.0, 1.0)
        };
        Ok(fit_platt_weighted(f, labels, weights, self.platt_iters)?.sigmoid)
    }

    /// `(w_neg, w_pos)` for the given labels.
    pub fn class_weights(&self, labels: &[Label]) -> (f64, f64) {
        match self.weighting {
            ClassWeighting::Explicit { neg, pos } => (neg, pos),
            ClassWeighting::Balanced => {
                let (n_neg, n_pos) = class_counts(labels);
                let n = labels.len() as f64;
                (n / (2.0 * n_neg as f64), n / (2.0 * n_pos as f64))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    kernel: KernelSpec,
    support_vectors: SampleMatrix,
    /// `α_i·y_i` per support vector.
    dual_coefs: Vec<f64>,
    bias: f64,
    class_weights: (f64, f64),
    c: f64,
}

/// Output of the dual solver over a fixed sample set.
#[derive(Debug, Clone)]
pub(crate) struct DualFit {
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub objective_trace: Option<Vec<f64>>,
}

fn check_labels(labels: &[Label]) -> Result<()> {
    let (n_neg, n_pos) = class_counts(labels);
    if n_neg == 0 || n_pos == 0 {
        return Err(Error::Argument(format!(
            "training needs both classes, got {n_neg} control and {n_pos} pneumonia"
        )));
    }
    Ok(())
}

/// Solves the weighted dual on a precomputed Gram matrix.
pub(crate) fn fit_dual(gram: &DMatrix<f64>, labels: &[Label], config: &SvmConfig, trace: bool) -> Result<DualFit> {
    config.validate()?;
    check_labels(labels)?;
    if gram.nrows() != labels.len() || gram.ncols() != labels.len() {
        return Err(Error::Size {
            expected: labels.len(),
            found: gram.nrows(),
        });
    }
    let (w_neg, w_pos) = config.class_weights(labels);
    let y: Vec<f64> = labels.iter().map(|l| l.sign()).collect();
    let upper: Vec<f64> = labels.iter().map(|l| config.c * if l.is_positive() { w_pos } else { w_neg }).collect();
    let sol = smo::solve(&smo::Problem { gram, y: &y, upper: &upper }, 0.5 * config.kkt_tol, config.max_iter, trace)?;
    Ok(DualFit {
        alpha: sol.alpha,
        bias: -sol.rho,
        iterations: sol.iterations,
        objective_trace: sol.objective_trace,
    })
}

/// Training-set decision values `Σ_j α_j y_j K_ij + b` from the Gram matrix.
pub(crate) fn gram_decisions(gram: &DMatrix<f64>, labels: &[Label], fit: &DualFit) -> Vec<f64> {
    let coef: Vec<f64> = fit.alpha.iter().zip(labels).map(|(a, l)| a * l.sign()).collect();
    (0..gram.nrows())
        .map(|i| (0..gram.ncols()).filter(|&j| coef[j] != 0.0).map(|j| coef[j] * gram[(i, j)]).sum::<f64>() + fit.bias)
        .collect()
}

pub fn train_svm(x: &SampleMatrix, labels: &[Label], config: &SvmConfig) -> Result<SvmModel> {
    train_svm_detailed(x, labels, config, false).map(|t| t.model)
}

/// Full training record: the model plus the dual solution over every sample.
#[derive(Debug, Clone)]
pub struct SvmTraining {
    pub model: SvmModel,
    /// `α_i` for every training sample, in input order.
    pub alpha: Vec<f64>,
    pub iterations: usize,
    /// Dual objective after each SMO step (empty unless requested).
    pub objective_trace: Vec<f64>,
}

impl SvmTraining {
    /// Largest KKT violation over the training set; zero when every
    /// condition holds.
    pub fn max_kkt_violation(&self, x: &SampleMatrix, labels: &[Label]) -> Result<f64> {
        let mut worst = 0.0f64;
        for ((row, &label), &alpha) in x.iter_rows().zip(labels).zip(&self.alpha) {
            let margin = label.sign() * self.model.decision_value(row)?;
            let v = if alpha <= 0.0 {
                (1.0 - margin).max(0.0)
            } else if alpha >= self.model.upper_bound(label) {
                (margin - 1.0).max(0.0)
            } else {
                (margin - 1.0).abs()
            };
            worst = worst.max(v);
        }
        Ok(worst)
    }

    /// `Σ α_i y_i`.
    pub fn equality_residual(&self, labels: &[Label]) -> f64 {
        self.alpha.iter().zip(labels).map(|(a, l)| a * l.sign()).sum()
    }
}

pub fn train_svm_detailed(x: &SampleMatrix, labels: &[Label], config: &SvmConfig, trace: bool) -> Result<SvmTraining> {
    if x.rows() != labels.len() {
        return Err(Error::Size {
            expected: labels.len(),
            found: x.rows(),
        });
    }
    if x.rows() < 2 {
        return Err(Error::Argument("training needs at least 2 samples".into()));
    }
    config.validate()?;
    check_labels(labels)?;
    let kernel = config.kernel()?;
    let gram = gram_matrix(x, &kernel)?;
    let fit = fit_dual(&gram, labels, config, trace)?;
    let sv: Vec<usize> = (0..labels.len()).filter(|&i| fit.alpha[i] > 0.0).collect();
    let model = SvmModel {
        kernel,
        support_vectors: x.select(&sv),
        dual_coefs: sv.iter().map(|&i| fit.alpha[i] * labels[i].sign()).collect(),
        bias: fit.bias,
        class_weights: config.class_weights(labels),
        c: config.c,
    };
    Ok(SvmTraining {
        model,
        alpha: fit.alpha,
        iterations: fit.iterations,
        objective_trace: fit.objective_trace.unwrap_or_default(),
    })
}

impl SvmModel {
    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn support_vectors(&self) -> &SampleMatrix {
        &self.support_vectors
    }

    pub fn dual_coefs(&self) -> &[f64] {
        &self.dual_coefs
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn class_weights(&self) -> (f64, f64) {
        self.class_weights
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    /// Box bound `C·w_y` for a sample of class `label`.
    pub fn upper_bound(&self, label: Label) -> f64 {
        self.c
            * if label.is_positive() {
                self.class_weights.1
            } else {
                self.class_weights.0
            }
    }

    /// Uncalibrated margin `f(x) = Σ α_i y_i K(x_i, x) + b`.
    pub fn decision_value(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.support_vectors.cols() {
            return Err(Error::Argument(format!(
                "input has dimension {}, model expects {}",
                x.len(),
                self.support_vectors.cols()
            )));
        }
        let nx = dot(x, x);
        Ok(self
            .support_vectors
            .iter_rows()
            .zip(&self.dual_coefs)
            .map(|(sv, coef)| coef * self.kernel.from_dot(dot(sv, x), dot(sv, sv), nx))
            .sum::<f64>()
            + self.bias)
    }

    pub fn predict(&self, x: &[f64]) -> Result<Label> {
        Ok(Label::from_positive(self.decision_value(x)? > 0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedSvm {
    pub svm: SvmModel,
    pub sigmoid: PlattSigmoid,
}

/// Trains the SVM then fits the sigmoid on its own training decision values.
pub fn train_calibrated(x: &SampleMatrix, labels: &[Label], config: &SvmConfig) -> Result<CalibratedSvm> {
    let gram = gram_matrix(x, &config.kernel()?)?;
    calibrated_from_gram(x, &gram, labels, config)
}

/// [`train_calibrated`] with the RBF Gram matrix of `x` already computed.
pub(crate) fn calibrated_from_gram(x: &SampleMatrix, gram: &DMatrix<f64>, labels: &[Label], config: &SvmConfig) -> Result<CalibratedSvm> {
    let fit = fit_dual(gram, labels, config, false)?;
    let f = gram_decisions(gram, labels, &fit);
    let sigmoid = config.calibrate(&f, labels)?;
    let sv: Vec<usize> = (0..labels.len()).filter(|&i| fit.alpha[i] > 0.0).collect();
    let svm = SvmModel {
        kernel: config.kernel()?,
        support_vectors: x.select(&sv),
        dual_coefs: sv.iter().map(|&i| fit.alpha[i] * labels[i].sign()).collect(),
        bias: fit.bias,
        class_weights: config.class_weights(labels),
        c: config.c,
    };
    Ok(CalibratedSvm { svm, sigmoid })
}

impl CalibratedSvm {
    /// `(p_control, p_pneumonia)`.
    pub fn posterior(&self, x: &[f64]) -> Result<(f64, f64)> {
        let p = self.sigmoid.p_pos(self.svm.decision_value(x)?);
        Ok((1.0 - p, p))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blobs(n_per: usize, sep: f64, spread: f64, seed: u64) -> (SampleMatrix, Vec<Label>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * n_per {
            let pos = i % 2 == 1;
            let c = if pos { sep } else { -sep };
            rows.push(vec![c + spread * rng.random_range(-1.0..1.0), spread * rng.random_range(-1.0..1.0)]);
            labels.push(Label::from_positive(pos));
        }
        (SampleMatrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn separable_blobs_are_fit_exactly() {
        let (x, y) = blobs(20, 1.0, 0.4, 1);
        let t = train_svm_detailed(&x, &y, &SvmConfig::default(), false).unwrap();
        let m = &t.model;
        assert!(m.support_vectors().rows() >= 2);
        for (r, &l) in x.iter_rows().zip(&y) {
            assert_eq!(m.predict(r).unwrap(), l);
        }
        assert!(t.max_kkt_violation(&x, &y).unwrap() <= 1e-3);
        assert!(t.equality_residual(&y).abs() <= 1e-8);
        assert!(m.dual_coefs().iter().sum::<f64>().abs() <= 1e-8);
    }

    #[test]
    fn xor_is_separated_by_rbf() {
        let x = SampleMatrix::from_rows(&[[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]]).unwrap();
        let y = [Label::Control, Label::Control, Label::Pneumonia, Label::Pneumonia];
        let m = train_svm(
            &x,
            &y,
            &SvmConfig {
                c: 10.0,
                gamma: 1.0,
                ..Default::default()
            },
        )
        .unwrap();
        for (r, &l) in x.iter_rows().zip(&y) {
            assert_eq!(m.predict(r).unwrap(), l);
        }
    }

    #[test]
    fn free_support_vectors_sit_on_the_margin() {
        let (x, y) = blobs(15, 0.6, 0.6, 2);
        let m = train_svm(
            &x,
            &y,
            &SvmConfig {
                c: 5.0,
                ..Default::default()
            },
        )
        .unwrap();
        let mut free = 0;
        for (sv, coef) in m.support_vectors().iter_rows().zip(m.dual_coefs()) {
            let label = Label::from_positive(*coef > 0.0);
            if coef.abs() < m.upper_bound(label) {
                free += 1;
                assert!((m.decision_value(sv).unwrap().abs() - 1.0).abs() <= 1e-3);
            }
        }
        assert!(free > 0);
    }

    #[test]
    fn symmetric_data_has_zero_midpoint() {
        let x = SampleMatrix::from_rows(&[[-1.0, 0.5], [-1.0, -0.5], [1.0, 0.5], [1.0, -0.5]]).unwrap();
        let y = [Label::Control, Label::Control, Label::Pneumonia, Label::Pneumonia];
        let m = train_svm(
            &x,
            &y,
            &SvmConfig {
                kkt_tol: 1e-9,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(m.decision_value(&[0.0, 0.0]).unwrap().abs() < 1e-6);
    }

    #[test]
    fn decision_matches_naive_double_loop() {
        let (x, y) = blobs(10, 0.3, 1.0, 3);
        let m = train_svm(&x, &y, &SvmConfig::default()).unwrap();
        let probe = [0.2, -0.1];
        let mut naive = m.bias();
        for i in 0..m.support_vectors().rows() {
            let sv = m.support_vectors().row(i);
            let mut d2 = 0.0;
            for k in 0..2 {
                d2 += (sv[k] - probe[k]) * (sv[k] - probe[k]);
            }
            naive += m.dual_coefs()[i] * (-3.0 * d2).exp();
        }
        assert!((m.decision_value(&probe).unwrap() - naive).abs() < 1e-10);
        assert!(matches!(m.decision_value(&[1.0]), Err(Error::Argument(_))));
    }

    #[test]
    fn dual_objective_never_decreases() {
        let (x, y) = blobs(25, 0.2, 1.0, 4);
        let trace = train_svm_detailed(&x, &y, &SvmConfig::default(), true).unwrap().objective_trace;
        assert!(!trace.is_empty());
        assert!(trace.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }

    #[test]
    fn duplication_equals_weighting() {
        let (x, y) = blobs(12, 0.3, 0.9, 5);
        let mut rows: Vec<Vec<f64>> = x.iter_rows().map(<[f64]>::to_vec).collect();
        let mut dup_y = y.clone();
        for (r, &l) in x.iter_rows().zip(&y) {
            if l.is_positive() {
                rows.push(r.to_vec());
                dup_y.push(l);
            }
        }
        let dup_x = SampleMatrix::from_rows(&rows).unwrap();
        let base = SvmConfig {
            weighting: ClassWeighting::Explicit { neg: 1.0, pos: 1.0 },
            kkt_tol: 1e-7,
            ..Default::default()
        };
        let dup = train_svm(&dup_x, &dup_y, &base).unwrap();
        let weighted = train_svm(
            &x,
            &y,
            &SvmConfig {
                weighting: ClassWeighting::Explicit { neg: 1.0, pos: 2.0 },
                ..base
            },
        )
        .unwrap();
        for i in 0..=10 {
            for j in 0..=10 {
                let p = [-2.0 + 0.4 * i as f64, -1.5 + 0.3 * j as f64];
                let a = dup.decision_value(&p).unwrap();
                let b = weighted.decision_value(&p).unwrap();
                assert!((a - b).abs() < 1e-4, "{a} vs {b} at {p:?}");
            }
        }
    }

    #[test]
    fn balanced_weights_follow_class_sizes() {
        let y = [Label::Control, Label::Pneumonia, Label::Pneumonia, Label::Pneumonia];
        let (wn, wp) = SvmConfig::default().class_weights(&y);
        assert_eq!((wn, wp), (2.0, 4.0 / 6.0));
    }

    #[test]
    fn single_class_and_bad_config_rejected() {
        let x = SampleMatrix::from_rows(&[[0.0], [1.0]]).unwrap();
        assert!(matches!(
            train_svm(&x, &[Label::Control; 2], &SvmConfig::default()),
            Err(Error::Argument(_))
        ));
        let y = [Label::Control, Label::Pneumonia];
        assert!(train_svm(
            &x,
            &y,
            &SvmConfig {
                c: 0.0,
                ..Default::default()
            }
        )
        .is_err());
        assert!(train_svm(
            &x,
            &y,
            &SvmConfig {
                gamma: -1.0,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn calibrated_posteriors_are_complementary_and_monotone() {
        let (x, y) = blobs(30, 0.4, 1.0, 6);
        let cal = train_calibrated(&x, &y, &SvmConfig::default()).unwrap();
        assert!(cal.sigmoid.a < 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let p = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let (n, q) = cal.posterior(&p).unwrap();
            assert_eq!(n + q, 1.0);
        }
        let back = CalibratedSvm::from_json(&cal.to_json().unwrap()).unwrap();
        assert_eq!(back, cal);
    }
}
