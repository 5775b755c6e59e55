//! Kernel PCA ("eigenlungs"): fit on training patch vectors, project new ones.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{dot, gram_from_inner, inner_products, median_pairwise_distance, KernelSpec, SampleMatrix};

pub const DEFAULT_VARIANCE_TARGET: f64 = 0.90;
const EIGEN_CUTOFF: f64 = 1e-10;

/// Kernel choice for fitting. `RbfMedian` resolves sigma to the median
/// pairwise distance of the training vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KpcaKernel {
    RbfMedian,
    Fixed { spec: KernelSpec },
}

impl From<KernelSpec> for KpcaKernel {
    fn from(spec: KernelSpec) -> Self {
        KpcaKernel::Fixed { spec }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenlungModel {
    kernel: KernelSpec,
    variance_target: f64,
    /// Retained eigenvalues of the feature-space covariance, descending.
    eigenvalues: Vec<f64>,
    /// Every eigenvalue above the numerical cutoff, descending.
    spectrum: Vec<f64>,
    /// One dual coefficient vector per retained component, length N each.
    alphas: Vec<Vec<f64>>,
    train_row_means: Vec<f64>,
    train_grand_mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_vectors: Option<SampleMatrix>,
}

/// Double-centres a kernel matrix in feature space.
pub fn center_gram(k: &DMatrix<f64>) -> DMatrix<f64> {
    let n = k.nrows();
    let row_means: Vec<f64> = (0..n).map(|i| k.row(i).sum() / n as f64).collect();
    let col_means: Vec<f64> = (0..n).map(|j| k.column(j).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    DMatrix::from_fn(n, n, |i, j| k[(i, j)] - row_means[i] - col_means[j] + grand)
}

fn n_for_target(spectrum: &[f64], target: f64) -> usize {
    let total: f64 = spectrum.iter().sum();
    let mut cum = 0.0;
    for (i, l) in spectrum.iter().enumerate() {
        cum += l;
        if cum >= target * total * (1.0 - 1e-12) {
            return i + 1;
        }
    }
    spectrum.len()
}

/// Fits kernel PCA, keeping the fewest components whose cumulative explained
/// variance reaches `variance_target`.
pub fn fit_eigenlungs(x: &SampleMatrix, kernel: impl Into<KpcaKernel>, variance_target: f64) -> Result<EigenlungModel> {
    if !(variance_target > 0.0 && variance_target <= 1.0) {
        return Err(Error::Argument(format!("variance target must lie in (0, 1], got {variance_target}")));
    }
    let n = x.rows();
    if n < 2 {
        return Err(Error::Argument(format!("kernel PCA needs at least 2 samples, got {n}")));
    }
    let inner = inner_products(x);
    let spec = match kernel.into() {
        KpcaKernel::Fixed { spec } => spec,
        KpcaKernel::RbfMedian => {
            let sigma = median_pairwise_distance(&inner);
            if !(sigma > 0.0) {
                return Err(Error::DegenerateInput("all training vectors coincide".into()));
            }
            KernelSpec::Rbf { sigma }
        }
    };
    spec.validate()?;
    let k = gram_from_inner(&inner, &spec)?;
    fit_from_gram(&k, spec, variance_target).map(|m| m.with_vectors(x.clone()))
}

/// As [`fit_eigenlungs`] but from a precomputed (uncentered) Gram matrix.
/// The returned model can project via [`EigenlungModel::project_kernel_row`];
/// it cannot project raw vectors until vectors are attached.
pub fn fit_from_gram(k: &DMatrix<f64>, kernel: KernelSpec, variance_target: f64) -> Result<EigenlungModel> {
    let n = k.nrows();
    if n < 2 || k.ncols() != n {
        return Err(Error::Argument(format!(
            "gram matrix must be square with n >= 2, got {}x{}",
            n,
            k.ncols()
        )));
    }
    let row_means: Vec<f64> = (0..n).map(|i| k.row(i).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    let kc = center_gram(k);
    if kc.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("centered gram matrix has non-finite entries".into()));
    }
    let eig = SymmetricEigen::try_new(kc, f64::EPSILON, 10_000).ok_or_else(|| Error::Numerical("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]];
    if !(top > 0.0) || !top.is_finite() {
        return Err(Error::DegenerateInput("centered gram matrix has no positive spectrum".into()));
    }
    let kept: Vec<usize> = order.into_iter().take_while(|&i| eig.eigenvalues[i] >= EIGEN_CUTOFF * top).collect();
    let spectrum: Vec<f64> = kept.iter().map(|&i| eig.eigenvalues[i] / n as f64).collect();
    let m = n_for_target(&spectrum, variance_target);
    let alphas = kept[..m]
        .iter()
        .map(|&i| {
            let mu = eig.eigenvalues[i];
            let mut a: Vec<f64> = eig.eigenvectors.column(i).iter().map(|v| v / mu.sqrt()).collect();
            let lead = a
                .iter()
                .enumerate()
                .fold(0, |best, (j, v)| if v.abs() > a[best].abs() { j } else { best });
            if a[lead] < 0.0 {
                a.iter_mut().for_each(|v| *v = -*v);
            }
            a
        })
        .collect();
    Ok(EigenlungModel {
        kernel,
        variance_target,
        eigenvalues: spectrum[..m].to_vec(),
        spectrum,
        alphas,
        train_row_means: row_means,
        train_grand_mean: grand,
        train_vectors: None,
    })
}

impl EigenlungModel {
    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn variance_target(&self) -> f64 {
        self.variance_target
    }

    pub fn n_components(&self) -> usize {
        self.alphas.len()
    }

    pub fn n_train(&self) -> usize {
        self.train_row_means.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Fraction of the total (retained-rank) variance explained by the first `m` components.
    pub fn explained_variance(&self, m: usize) -> f64 {
        let total: f64 = self.spectrum.iter().sum();
        self.spectrum.iter().take(m).sum::<f64>() / total
    }

    pub fn alphas(&self) -> &[Vec<f64>] {
        &self.alphas
    }

    pub fn train_vectors(&self) -> Option<&SampleMatrix> {
        self.train_vectors.as_ref()
    }

    pub fn with_vectors(mut self, x: SampleMatrix) -> Self {
        self.train_vectors = Some(x);
        self
    }

    /// Detaches the training vectors, for storing them separately.
    pub fn take_vectors(&mut self) -> Option<SampleMatrix> {
        self.train_vectors.take()
    }

    pub fn attach_vectors(&mut self, x: SampleMatrix) -> Result<()> {
        if x.rows() != self.n_train() {
            return Err(Error::Size {
                expected: self.n_train(),
                found: x.rows(),
            });
        }
        self.train_vectors = Some(x);
        Ok(())
    }

    /// Projects from the uncentered kernel values `k(x_i, x)` against the training set.
    pub fn project_kernel_row(&self, k_row: &[f64]) -> Result<Vec<f64>> {
        let n = self.n_train();
        if k_row.len() != n {
            return Err(Error::Argument(format!("expected {n} kernel values, got {}", k_row.len())));
        }
        let mean = k_row.iter().sum::<f64>() / n as f64;
        let centered: Vec<f64> = k_row
            .iter()
            .zip(&self.train_row_means)
            .map(|(k, r)| k - r - mean + self.train_grand_mean)
            .collect();
        Ok(self.alphas.iter().map(|a| dot(a, &centered)).collect())
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        let train = self
            .train_vectors
            .as_ref()
            .ok_or_else(|| Error::Argument("model has no training vectors attached".into()))?;
        if x.len() != train.cols() {
            return Err(Error::Argument(format!(
                "vector has dimension {}, model expects {}",
                x.len(),
                train.cols()
            )));
        }
        let nx = dot(x, x);
        let row: Vec<f64> = train.iter_rows().map(|t| self.kernel.from_dot(dot(t, x), dot(t, t), nx)).collect();
        self.project_kernel_row(&row)
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
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn cloud(n: usize, d: usize, seed: u64) -> SampleMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        // Anisotropic so component variances are distinct.
        let data = (0..n * d).map(|i| rng.random_range(-1.0..1.0) * (1.0 + (i % d) as f64)).collect();
        SampleMatrix::new(n, d, data).unwrap()
    }

    /// Classical PCA scores from the covariance eigendecomposition.
    fn pca_scores(x: &SampleMatrix) -> (Vec<f64>, DMatrix<f64>) {
        let (n, d) = (x.rows(), x.cols());
        let mean: Vec<f64> = (0..d).map(|c| x.iter_rows().map(|r| r[c]).sum::<f64>() / n as f64).collect();
        let xc = DMatrix::from_fn(n, d, |i, j| x.row(i)[j] - mean[j]);
        let cov = xc.transpose() * &xc / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let vecs = DMatrix::from_fn(d, d, |r, c| eig.eigenvectors[(r, order[c])]);
        (vals, xc * vecs)
    }

    #[test]
    fn linear_kpca_matches_classical_pca() {
        let x = cloud(30, 4, 11);
        let model = fit_eigenlungs(&x, KernelSpec::Linear, 1.0).unwrap();
        let (vals, scores) = pca_scores(&x);
        assert_eq!(model.n_components(), 4);
        for j in 0..4 {
            assert!((model.eigenvalues()[j] - vals[j]).abs() < 1e-9 * vals[0]);
        }
        for i in 0..30 {
            let p = model.project(x.row(i)).unwrap();
            for j in 0..4 {
                let sign = if scores[(0, j)] * model.project(x.row(0)).unwrap()[j] < 0.0 {
                    -1.0
                } else {
                    1.0
                };
                assert!((p[j] - sign * scores[(i, j)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn full_target_keeps_rank() {
        let x = cloud(10, 3, 5);
        let model = fit_eigenlungs(&x, KernelSpec::Linear, 1.0).unwrap();
        assert_eq!(model.n_components(), 3);
    }

    #[test]
    fn training_mean_projects_to_origin() {
        let x = cloud(12, 3, 6);
        let model = fit_eigenlungs(&x, KernelSpec::Linear, 1.0).unwrap();
        let mean: Vec<f64> = (0..3).map(|c| x.iter_rows().map(|r| r[c]).sum::<f64>() / 12.0).collect();
        assert!(model.project(&mean).unwrap().iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn projected_variances_are_the_eigenvalues() {
        let x = cloud(25, 6, 8);
        let model = fit_eigenlungs(&x, KpcaKernel::RbfMedian, 0.95).unwrap();
        let proj: Vec<Vec<f64>> = x.iter_rows().map(|r| model.project(r).unwrap()).collect();
        let m = model.n_components();
        let var: Vec<f64> = (0..m).map(|j| proj.iter().map(|p| p[j] * p[j]).sum::<f64>() / 25.0).collect();
        for j in 0..m {
            assert!((var[j] / var[0] - model.eigenvalues()[j] / model.eigenvalues()[0]).abs() < 1e-6);
            assert!((var[j] - model.eigenvalues()[j]).abs() < 1e-9);
        }
        for (a, l) in model.alphas().iter().zip(model.eigenvalues()) {
            let norm = DVector::from_column_slice(a).norm();
            assert!((norm - 1.0 / (25.0 * l).sqrt()).abs() < 1e-9 * norm);
            let lead = a.iter().copied().fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
            assert!(lead >= 0.0);
        }
    }

    #[test]
    fn center_gram_examples() {
        let k = DMatrix::from_element(4, 4, 2.5);
        assert!(center_gram(&k).iter().all(|v| v.abs() < 1e-15));
        let x = cloud(8, 3, 2);
        let kc = center_gram(&crate::kernel::gram_matrix(&x, &KernelSpec::Rbf { sigma: 2.0 }).unwrap());
        for i in 0..8 {
            assert!(kc.row(i).sum().abs() < 1e-8);
            assert!(kc.column(i).sum().abs() < 1e-8);
        }
        let again = center_gram(&kc);
        assert!((again - &kc).iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn argument_and_degenerate_errors() {
        let x = cloud(5, 2, 1);
        assert!(matches!(fit_eigenlungs(&x, KernelSpec::Linear, 0.0), Err(Error::Argument(_))));
        let same = SampleMatrix::new(3, 2, vec![1.0; 6]).unwrap();
        assert!(matches!(fit_eigenlungs(&same, KernelSpec::Linear, 0.9), Err(Error::DegenerateInput(_))));
        assert!(matches!(
            fit_eigenlungs(&same, KpcaKernel::RbfMedian, 0.9),
            Err(Error::DegenerateInput(_))
        ));
        let model = fit_eigenlungs(&x, KernelSpec::Linear, 0.9).unwrap();
        assert!(matches!(model.project(&[1.0]), Err(Error::Argument(_))));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let x = cloud(9, 3, 3);
        let model = fit_eigenlungs(&x, KpcaKernel::RbfMedian, 0.9).unwrap();
        let back = EigenlungModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
    }

    proptest! {
        #[test]
        fn cumulative_variance_brackets_target(seed in 0u64..500, target in 0.3f64..1.0) {
            let x = cloud(15, 5, seed);
            let model = fit_eigenlungs(&x, KernelSpec::Rbf { sigma: 3.0 }, target).unwrap();
            let m = model.n_components();
            prop_assert!(model.explained_variance(m) >= target - 1e-12);
            prop_assert!(m == 1 || model.explained_variance(m - 1) < target);
            prop_assert!(model.eigenvalues().windows(2).all(|w| w[0] >= w[1] && w[1] > 0.0));
        }

        #[test]
        fn projections_are_uncorrelated(seed in 0u64..500) {
            let x = cloud(20, 4, seed);
            let model = fit_eigenlungs(&x, KernelSpec::Polynomial { degree: 2, coef0: 1.0 }, 0.99).unwrap();
            let p: Vec<Vec<f64>> = x.iter_rows().map(|r| model.project(r).unwrap()).collect();
            let m = model.n_components();
            for a in 0..m {
                for b in 0..a {
                    let c: f64 = p.iter().map(|v| v[a] * v[b]).sum::<f64>() / 20.0;
                    let scale = (model.eigenvalues()[a] * model.eigenvalues()[b]).sqrt();
                    prop_assert!(c.abs() <= 1e-6 * scale.max(model.eigenvalues()[0] * 1e-6));
                }
            }
        }
    }
}
