//! Dense kernels for representation-space detectors.
//!
//! Everything accumulates in f64 regardless of the f32 storage format.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Principal directions of a centered data matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    mean: DVector<f64>,
    /// k×d, rows are orthonormal principal directions.
    components: DMatrix<f64>,
    /// Singular values of the centered data, descending, for the retained components.
    singular_values: Vec<f64>,
    n_samples: usize,
    rank_deficient: bool,
}

impl PcaModel {
    pub fn from_parts(
        mean: DVector<f64>,
        components: DMatrix<f64>,
        singular_values: Vec<f64>,
        n_samples: usize,
    ) -> Result<Self> {
        if components.ncols() != mean.len() || components.nrows() != singular_values.len() {
            return Err(Error::Argument(format!(
                "inconsistent PCA parts: mean {}, components {}x{}, {} singular values",
                mean.len(),
                components.nrows(),
                components.ncols(),
                singular_values.len()
            )));
        }
        Ok(PcaModel {
            mean,
            components,
            singular_values,
            n_samples,
            rank_deficient: false,
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn components(&self) -> &DMatrix<f64> {
        &self.components
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    /// Number of retained components.
    pub fn k(&self) -> usize {
        self.components.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    /// True when the centered training data had rank below `k`.
    pub fn rank_deficient(&self) -> bool {
        self.rank_deficient
    }

    /// Variance captured by each retained component (MLE divisor N).
    pub fn explained_variance(&self) -> Vec<f64> {
        let n = self.n_samples.max(1) as f64;
        self.singular_values.iter().map(|s| s * s / n).collect()
    }

    pub fn transform_row(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Argument(format!(
                "PCA expects {} features, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let centered = DVector::from_iterator(
            x.len(),
            x.iter().zip(self.mean.iter()).map(|(a, m)| a - m),
        );
        Ok(&self.components * centered)
    }

    /// Projects every row of an N×d matrix; returns N×k.
    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Argument(format!(
                "PCA expects {} features, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let mut centered = x.clone();
        for (j, mut col) in centered.column_iter_mut().enumerate() {
            col.add_scalar_mut(-self.mean[j]);
        }
        Ok(centered * self.components.transpose())
    }
}

/// Fits PCA by SVD of the centered data matrix.
///
/// Tall inputs are first reduced with a QR factorization; the R factor has
/// the same right singular vectors and singular values as the data itself.
pub fn pca_fit(x: &DMatrix<f64>, k: usize) -> Result<PcaModel> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::Argument(format!("PCA needs at least 2 rows, got {n}")));
    }
    if k == 0 || k > n.min(d) {
        return Err(Error::Argument(format!(
            "PCA dimension {k} outside [1, {}]",
            n.min(d)
        )));
    }

    let mean = column_means(x);
    let mut centered = x.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    let reduced = if n > d { centered.qr().r() } else { centered };
    let svd = reduced.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let sv = svd.singular_values;

    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));

    let mut components = DMatrix::zeros(k, d);
    for (i, &src) in order.iter().take(k).enumerate() {
        let mut row = v_t.row(src).clone_owned();
        canonicalize_sign(row.as_mut_slice());
        components.set_row(i, &row);
    }
    let singular_values: Vec<f64> = order.iter().take(k).map(|&i| sv[i]).collect();

    let s_max = sv.iter().cloned().fold(0.0, f64::max);
    let tol = s_max * n.max(d) as f64 * f64::EPSILON;
    let rank = sv.iter().filter(|&&s| s > tol).count();
    let rank_deficient = rank < k;
    if rank_deficient {
        log::warn!(
            "PCA: centered data has rank {rank} < k = {k}; trailing components are arbitrary"
        );
    }

    Ok(PcaModel {
        mean,
        components,
        singular_values,
        n_samples: n,
        rank_deficient,
    })
}

/// Flips the vector so its largest-magnitude entry is positive (first index wins ties).
fn canonicalize_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

pub fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows().max(1) as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

/// Ridge added to a covariance before inversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum Ridge {
    /// ε = factor · trace(Σ)/m; falls back to ε = factor when the trace is zero.
    Relative(f64),
    Absolute(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::Relative(1e-6)
    }
}

impl Ridge {
    pub fn epsilon_for(&self, sigma: &DMatrix<f64>) -> f64 {
        match *self {
            Ridge::Absolute(eps) => eps,
            Ridge::Relative(factor) => {
                let m = sigma.nrows().max(1) as f64;
                let eps = factor * sigma.trace() / m;
                if eps > 0.0 {
                    eps
                } else {
                    factor
                }
            }
        }
    }
}

/// Returns (Σ + εI)⁻¹ via Cholesky, symmetrizing input and output.
pub fn regularize_precision(sigma: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
    if !sigma.is_square() {
        return Err(Error::Argument(format!(
            "covariance must be square, got {}x{}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let mut sym = (sigma + sigma.transpose()) * 0.5;
    for i in 0..sym.nrows() {
        sym[(i, i)] += eps;
    }
    let chol = Cholesky::new(sym).ok_or_else(|| {
        Error::Numeric(format!(
            "Cholesky failed after adding ridge {eps:e}; increase epsilon for this data scale"
        ))
    })?;
    let inv = chol.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Class-conditional Gaussians with one shared covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianByClass {
    /// C×m, one row per class.
    pub means: DMatrix<f64>,
    pub precision: DMatrix<f64>,
    /// The ridge actually added to the covariance.
    pub epsilon: f64,
}

/// A single Gaussian over all ID rows.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundGaussian {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
    pub epsilon: f64,
}

/// Maximum-likelihood class means and shared covariance (divisor N).
fn class_mle(
    z: &DMatrix<f64>,
    labels: &[usize],
    num_classes: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, m) = z.shape();
    if labels.len() != n {
        return Err(Error::Argument(format!(
            "{} labels for {n} rows",
            labels.len()
        )));
    }
    let mut sums = DMatrix::<f64>::zeros(num_classes, m);
    let mut counts = vec![0usize; num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::Argument(format!(
                "label {y} outside [0, {num_classes})"
            )));
        }
        counts[y] += 1;
        for j in 0..m {
            sums[(y, j)] += z[(i, j)];
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Fit(format!("class {empty} has no training samples")));
    }
    for (c, &count) in counts.iter().enumerate() {
        let mut row = sums.row_mut(c);
        row /= count as f64;
    }
    let means = sums;

    let mut residual = z.clone();
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..m {
            residual[(i, j)] -= means[(y, j)];
        }
    }
    let sigma = residual.tr_mul(&residual) / n as f64;
    Ok((means, sigma))
}

pub fn fit_class_gaussians(
    z: &DMatrix<f64>,
    labels: &[usize],
    num_classes: usize,
    ridge: Ridge,
) -> Result<GaussianByClass> {
    let (means, sigma) = class_mle(z, labels, num_classes)?;
    let epsilon = ridge.epsilon_for(&sigma);
    let precision = regularize_precision(&sigma, epsilon)?;
    Ok(GaussianByClass {
        means,
        precision,
        epsilon,
    })
}

pub fn fit_background(z: &DMatrix<f64>, ridge: Ridge) -> Result<BackgroundGaussian> {
    if z.nrows() < 2 {
        return Err(Error::Fit(format!(
            "background fit needs at least 2 rows, got {}",
            z.nrows()
        )));
    }
    // same estimator as a single-class fit
    let g = fit_class_gaussians(z, &vec![0; z.nrows()], 1, ridge)?;
    Ok(BackgroundGaussian {
        mean: g.means.row(0).transpose(),
        precision: g.precision,
        epsilon: g.epsilon,
    })
}

/// Squared Mahalanobis form (z−μ)ᵀ P (z−μ).
pub fn mahalanobis_sq(z: &[f64], mean: &[f64], precision: &DMatrix<f64>) -> Result<f64> {
    let m = z.len();
    if mean.len() != m || precision.shape() != (m, m) {
        return Err(Error::Argument(format!(
            "shape mismatch: z {m}, mean {}, precision {}x{}",
            mean.len(),
            precision.nrows(),
            precision.ncols()
        )));
    }
    let diff = DVector::from_iterator(m, z.iter().zip(mean).map(|(a, b)| a - b));
    Ok((diff.dot(&(precision * &diff))).max(0.0))
}

/// Factor Lᵀ of a precision P = L·Lᵀ, so that ‖Lᵀ(z−μ)‖² is the Mahalanobis form.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitener {
    factor_t: DMatrix<f64>,
}

impl Whitener {
    pub fn new(precision: &DMatrix<f64>) -> Result<Self> {
        let chol = Cholesky::new(precision.clone())
            .ok_or_else(|| Error::Numeric("precision matrix is not positive definite".into()))?;
        Ok(Whitener {
            factor_t: chol.l().transpose(),
        })
    }

    pub fn dim(&self) -> usize {
        self.factor_t.nrows()
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.factor_t * v
    }

    /// Whitens each row of a matrix (rows become rows).
    pub fn apply_rows(&self, rows: &DMatrix<f64>) -> DMatrix<f64> {
        rows * self.factor_t.transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn max_abs(m: &DMatrix<f64>) -> f64 {
        m.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    #[test]
    fn pca_on_a_line() {
        let x = DMatrix::from_row_slice(3, 2, &[0., 0., 1., 1., 2., 2.]);
        let pca = pca_fit(&x, 1).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((pca.components()[(0, 0)] - h).abs() < 1e-12);
        assert!((pca.components()[(0, 1)] - h).abs() < 1e-12);
        assert_eq!(pca.mean().as_slice(), &[1.0, 1.0]);
        let t = pca.transform_row(&[3.0, 3.0]).unwrap();
        assert!((t[0] - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        let t = pca.transform_row(&[1.0, 1.0]).unwrap();
        assert_eq!(t[0], 0.0);
        assert!(!pca.rank_deficient());
    }

    #[test]
    fn pca_argument_errors() {
        let x = DMatrix::from_row_slice(3, 2, &[0., 0., 1., 1., 2., 2.]);
        assert!(matches!(pca_fit(&x, 0), Err(Error::Argument(_))));
        assert!(matches!(pca_fit(&x, 3), Err(Error::Argument(_))));
        let one = DMatrix::from_row_slice(1, 2, &[0., 0.]);
        assert!(pca_fit(&one, 1).is_err());
        let pca = pca_fit(&x, 2).unwrap();
        assert!(matches!(pca.transform_row(&[1.0]), Err(Error::Argument(_))));
    }

    #[test]
    fn identical_rows_flag_rank_deficiency() {
        let x = DMatrix::from_row_slice(4, 3, &[1., 2., 3.].repeat(4));
        let pca = pca_fit(&x, 2).unwrap();
        assert!(pca.rank_deficient());
        assert_eq!(pca.singular_values()[0], 0.0);
        let gram = pca.components() * pca.components().transpose();
        assert!(max_abs(&(gram - DMatrix::identity(2, 2))) < 1e-5);
    }

    #[test]
    fn sign_canonicalization_prefers_first_on_ties() {
        let mut v = [-0.5, 0.5, 0.1];
        canonicalize_sign(&mut v);
        assert_eq!(v, [0.5, -0.5, -0.1]);
    }

    #[test]
    fn class_gaussians_hand_case() {
        let mut rows = Vec::new();
        for centre in [[0.0, 0.0], [4.0, 0.0]] {
            for off in [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]] {
                rows.push(centre[0] + off[0]);
                rows.push(centre[1] + off[1]);
            }
        }
        let z = DMatrix::from_row_slice(8, 2, &rows);
        let labels = [0, 0, 0, 0, 1, 1, 1, 1];
        let (means, sigma) = class_mle(&z, &labels, 2).unwrap();
        assert_eq!(means, DMatrix::from_row_slice(2, 2, &[0., 0., 4., 0.]));
        assert!(max_abs(&(sigma - DMatrix::from_row_slice(2, 2, &[0.5, 0., 0., 0.5]))) < 1e-15);
    }

    #[test]
    fn empty_class_is_named() {
        let z = DMatrix::from_row_slice(2, 1, &[0., 1.]);
        let err = fit_class_gaussians(&z, &[0, 2], 3, Ridge::default()).unwrap_err();
        assert!(err.to_string().contains("class 1"), "{err}");
    }

    #[test]
    fn degenerate_covariance_uses_absolute_floor() {
        let z = DMatrix::from_row_slice(3, 2, &[1., 1., 1., 1., 1., 1.]);
        let g = fit_class_gaussians(&z, &[0, 0, 0], 1, Ridge::Relative(1e-6)).unwrap();
        assert_eq!(g.epsilon, 1e-6);
        assert!(max_abs(&(g.precision - DMatrix::identity(2, 2) * 1e6)) < 1e-6);
        let b = fit_background(&z, Ridge::Absolute(0.5)).unwrap();
        assert!(max_abs(&(b.precision - DMatrix::identity(2, 2) * 2.0)) < 1e-12);
    }

    #[test]
    fn background_hand_case() {
        let z = DMatrix::from_row_slice(2, 2, &[-1., 0., 1., 0.]);
        let b = fit_background(&z, Ridge::Absolute(0.25)).unwrap();
        assert_eq!(b.mean.as_slice(), &[0.0, 0.0]);
        assert!((b.precision[(0, 0)] - 1.0 / 1.25).abs() < 1e-12);
        assert!((b.precision[(1, 1)] - 4.0).abs() < 1e-12);
        assert!(b.precision[(0, 1)].abs() < 1e-15);
        let one = DMatrix::from_row_slice(1, 2, &[0., 0.]);
        assert!(matches!(fit_background(&one, Ridge::default()), Err(Error::Fit(_))));
    }

    #[test]
    fn background_matches_single_class_fit() {
        let z = DMatrix::from_row_slice(4, 2, &[0., 1., 2., 0.5, -1., 3., 4., 4.]);
        let b = fit_background(&z, Ridge::default()).unwrap();
        let g = fit_class_gaussians(&z, &[0; 4], 1, Ridge::default()).unwrap();
        assert_eq!(b.mean.as_slice(), g.means.row(0).transpose().as_slice());
        assert_eq!(b.precision, g.precision);
    }

    #[test]
    fn precision_hand_cases() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert_eq!(regularize_precision(&i, 0.0).unwrap(), i);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let p = regularize_precision(&d, 0.0).unwrap();
        assert!(max_abs(&(p - DMatrix::from_diagonal(&DVector::from_vec(vec![0.25, 1.0])))) < 1e-15);
        let singular = DMatrix::from_row_slice(2, 2, &[1., 1., 1., 1.]);
        assert!(matches!(regularize_precision(&singular, 0.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn mahalanobis_hand_cases() {
        let i = DMatrix::<f64>::identity(2, 2);
        assert_eq!(mahalanobis_sq(&[1., 1.], &[1., 1.], &i).unwrap(), 0.0);
        assert_eq!(mahalanobis_sq(&[3., 4.], &[0., 0.], &i).unwrap(), 25.0);
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![0.25, 1.0]));
        assert_eq!(mahalanobis_sq(&[2., 1.], &[0., 0.], &p).unwrap(), 2.0);
        assert!(mahalanobis_sq(&[2.], &[0., 0.], &p).is_err());
    }

    fn spd(m: usize, seed: &[f64]) -> DMatrix<f64> {
        let a = DMatrix::from_iterator(m, m, seed.iter().cycle().take(m * m).cloned());
        &a * a.transpose() + DMatrix::identity(m, m) * 0.1
    }

    proptest! {
        #[test]
        fn precision_inverts_regularized_covariance(
            m in 1usize..6,
            seed in prop::collection::vec(-2.0f64..2.0, 36),
            eps in 0.0f64..1.0,
        ) {
            let sigma = spd(m, &seed);
            let p = regularize_precision(&sigma, eps).unwrap();
            let prod = (&sigma + DMatrix::identity(m, m) * eps) * &p;
            prop_assert!(max_abs(&(prod - DMatrix::identity(m, m))) < 1e-5);
        }

        #[test]
        fn mahalanobis_is_symmetric_about_mean(
            m in 1usize..5,
            seed in prop::collection::vec(-2.0f64..2.0, 25),
            z in prop::collection::vec(-5.0f64..5.0, 5),
            mu in prop::collection::vec(-5.0f64..5.0, 5),
        ) {
            let p = regularize_precision(&spd(m, &seed), 0.0).unwrap();
            let (z, mu) = (&z[..m], &mu[..m]);
            let mirror: Vec<f64> = z.iter().zip(mu).map(|(a, b)| 2.0 * b - a).collect();
            let a = mahalanobis_sq(z, mu, &p).unwrap();
            let b = mahalanobis_sq(&mirror, mu, &p).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
            let w = Whitener::new(&p).unwrap();
            let diff = DVector::from_iterator(m, z.iter().zip(mu).map(|(a, b)| a - b));
            let via_whitening = w.apply(&diff).norm_squared();
            prop_assert!((a - via_whitening).abs() <= 1e-8 * (1.0 + a.abs()));
        }

        #[test]
        fn pca_components_orthonormal_and_sorted(
            n in 3usize..30,
            d in 1usize..6,
            vals in prop::collection::vec(-10.0f64..10.0, 180),
        ) {
            let x = DMatrix::from_iterator(n, d, vals.iter().cycle().take(n * d).cloned());
            let k = n.min(d);
            let pca = pca_fit(&x, k).unwrap();
            let gram = pca.components() * pca.components().transpose();
            prop_assert!(max_abs(&(gram - DMatrix::identity(k, k))) < 1e-5);
            let ev = pca.explained_variance();
            prop_assert!(ev.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
