//! Mahalanobis-distance detectors (MDS and relative MDS) and the KNN scorer.

use nalgebra::{DMatrix, DVector};

use super::Score;
use crate::error::{Error, Result};
use crate::knn::{build_index, normalize, KnnIndex};
use crate::linalg::{
    fit_background, fit_class_gaussians, BackgroundGaussian, GaussianByClass, Ridge, Whitener,
};

fn check_dim(z: &[f64], m: usize) -> Result<()> {
    if z.len() == m {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "embedding has {} dims, detector expects {m}",
            z.len()
        )))
    }
}

fn sq_dist(a: &DVector<f64>, b: impl Iterator<Item = f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let t = x - y;
            t * t
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdsDetector {
    gaussians: GaussianByClass,
    whitener: Whitener,
    /// C×m whitened class means.
    whitened_means: DMatrix<f64>,
}

impl MdsDetector {
    pub fn fit(z: &DMatrix<f64>, labels: &[usize], num_classes: usize, ridge: Ridge) -> Result<Self> {
        Self::from_gaussians(fit_class_gaussians(z, labels, num_classes, ridge)?)
    }

    pub fn from_gaussians(gaussians: GaussianByClass) -> Result<Self> {
        let whitener = Whitener::new(&gaussians.precision)?;
        let whitened_means = whitener.apply_rows(&gaussians.means);
        Ok(MdsDetector {
            gaussians,
            whitener,
            whitened_means,
        })
    }

    pub fn gaussians(&self) -> &GaussianByClass {
        &self.gaussians
    }

    pub fn dim(&self) -> usize {
        self.whitener.dim()
    }

    /// Squared Mahalanobis distance to every class mean.
    pub fn class_distances(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(z, self.dim())?;
        let w = self.whitener.apply(&DVector::from_column_slice(z));
        Ok(self
            .whitened_means
            .row_iter()
            .map(|mu| sq_dist(&w, mu.iter().copied()))
            .collect())
    }

    pub fn min_distance(&self, z: &[f64]) -> Result<f64> {
        Ok(self
            .class_distances(z)?
            .into_iter()
            .fold(f64::INFINITY, f64::min))
    }

    /// −min_c d_c.
    pub fn score(&self, z: &[f64]) -> Result<Score> {
        Ok(Score(-self.min_distance(z)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmdsDetector {
    classes: MdsDetector,
    background: BackgroundGaussian,
    bg_whitener: Whitener,
    bg_whitened_mean: DVector<f64>,
}

impl RmdsDetector {
    pub fn fit(z: &DMatrix<f64>, labels: &[usize], num_classes: usize, ridge: Ridge) -> Result<Self> {
        let classes = MdsDetector::fit(z, labels, num_classes, ridge)?;
        Self::from_parts(classes, fit_background(z, ridge)?)
    }

    pub fn from_parts(classes: MdsDetector, background: BackgroundGaussian) -> Result<Self> {
        if background.mean.len() != classes.dim() {
            return Err(Error::Argument(
                "background and class Gaussians differ in dimension".into(),
            ));
        }
        let bg_whitener = Whitener::new(&background.precision)?;
        // same arithmetic as the class means, so one class gives d_0 == d_c exactly
        let bg_whitened_mean = bg_whitener
            .apply_rows(&DMatrix::from_row_slice(1, background.mean.len(), background.mean.as_slice()))
            .row(0)
            .transpose();
        Ok(RmdsDetector {
            classes,
            background,
            bg_whitener,
            bg_whitened_mean,
        })
    }

    pub fn classes(&self) -> &MdsDetector {
        &self.classes
    }

    pub fn background(&self) -> &BackgroundGaussian {
        &self.background
    }

    pub fn background_distance(&self, z: &[f64]) -> Result<f64> {
        check_dim(z, self.classes.dim())?;
        let w = self.bg_whitener.apply(&DVector::from_column_slice(z));
        Ok(sq_dist(&w, self.bg_whitened_mean.iter().copied()))
    }

    /// d_0 − min_c d_c.
    pub fn score(&self, z: &[f64]) -> Result<Score> {
        Ok(Score(self.background_distance(z)? - self.classes.min_distance(z)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnDetector {
    index: KnnIndex,
    k: usize,
}

impl KnnDetector {
    pub fn fit(
        z: &DMatrix<f64>,
        k: usize,
        normalize_rows: bool,
        subsample_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        Self::from_index(build_index(z, subsample_fraction, normalize_rows, seed)?, k)
    }

    pub fn from_index(index: KnnIndex, k: usize) -> Result<Self> {
        if k == 0 || k > index.len() {
            return Err(Error::Fit(format!(
                "k = {k} outside [1, {}] for the stored bank",
                index.len()
            )));
        }
        Ok(KnnDetector { index, k })
    }

    pub fn index(&self) -> &KnnIndex {
        &self.index
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// −(k-th neighbor distance); a zero query is left unnormalized.
    pub fn score(&self, z: &[f64]) -> Result<Score> {
        if self.index.normalized() {
            let mut q = z.to_vec();
            let _ = normalize(&mut q);
            Ok(Score(-self.index.kth_distance(&q, self.k)?))
        } else {
            Ok(Score(-self.index.kth_distance(z, self.k)?))
        }
    }
}
