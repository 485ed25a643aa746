//! Post-hoc OOD detectors behind one fit/score contract.
//!
//! Every score is oriented so that larger means more in-distribution.

mod distance;
mod logit;
mod mask;
mod persist;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::default_k;
use crate::linalg::{pca_fit, PcaModel, Ridge};
use crate::store::{ArrayF32, ClassifierHead, EmbeddingBundle};

pub use distance::{KnnDetector, MdsDetector, RmdsDetector};
pub use logit::{
    ash_prune, energy_score, logits, msp_score, printed_energy_score, prune_count,
};
pub use mask::{contribution_matrix, ContributionMask, DiceDetector, MaskMode};
pub use persist::{load_detector, save_detector, DETECTOR_FORMAT_VERSION, SIDECAR_FILE};

pub const DEFAULT_P: f64 = 90.0;
pub const DEFAULT_PRUNE_PERCENT: f64 = 90.0;
pub const DEFAULT_PCA_COMPONENTS: usize = 128;
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Score(pub f64);

impl Score {
    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Msp,
    Energy,
    Ash,
    Dice,
    DiceCol,
    Mds,
    Rmds,
    Knn,
    MdsPca,
    RmdsPca,
    KnnPca,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::Msp,
        Method::Energy,
        Method::Ash,
        Method::Dice,
        Method::DiceCol,
        Method::Mds,
        Method::Rmds,
        Method::Knn,
        Method::MdsPca,
        Method::RmdsPca,
        Method::KnnPca,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Msp => "msp",
            Method::Energy => "energy",
            Method::Ash => "ash",
            Method::Dice => "dice",
            Method::DiceCol => "dice-col",
            Method::Mds => "mds",
            Method::Rmds => "rmds",
            Method::Knn => "knn",
            Method::MdsPca => "mds-pca",
            Method::RmdsPca => "rmds-pca",
            Method::KnnPca => "knn-pca",
        }
    }

    /// The detector run inside the PCA space, if this is a PCA variant.
    pub fn pca_inner(self) -> Option<Method> {
        match self {
            Method::MdsPca => Some(Method::Mds),
            Method::RmdsPca => Some(Method::Rmds),
            Method::KnnPca => Some(Method::Knn),
            _ => None,
        }
    }

    fn uses_knn(self) -> bool {
        matches!(self, Method::Knn | Method::KnnPca)
    }

    fn uses_gaussians(self) -> bool {
        matches!(
            self,
            Method::Mds | Method::Rmds | Method::MdsPca | Method::RmdsPca
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase().replace('_', "-");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == lower)
            .ok_or_else(|| {
                let known: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Argument(format!(
                    "unknown method '{s}' (known: {})",
                    known.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyForm {
    /// `log Σ exp(f_c)`.
    #[default]
    Canonical,
    /// `log Σ exp(−f_c)`.
    Printed,
}

/// A method plus its hyperparameters; unset values take defaults at fit time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    pub method: Method,
    /// DICE sparsity percentage in [0, 100).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    /// ASH pruning percentage in [0, 100).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune_percent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pca_components: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalize: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample_fraction: Option<f64>,
    /// Covariance ridge as a fraction of the mean eigenvalue trace(Σ)/m.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_form: Option<EnergyForm>,
}

impl DetectorSpec {
    pub fn new(method: Method) -> Self {
        DetectorSpec {
            method,
            p: None,
            prune_percent: None,
            k: None,
            pca_components: None,
            normalize: None,
            subsample_fraction: None,
            epsilon: None,
            energy_form: None,
        }
    }

    /// Validates the spec and fills every hyperparameter the method uses.
    ///
    /// Parameters the method does not use are dropped.
    pub fn resolve(&self, n_train: usize, dim: usize) -> Result<DetectorSpec> {
        let m = self.method;
        let mut out = DetectorSpec::new(m);
        let percent = |name: &str, v: f64| -> Result<f64> {
            if (0.0..100.0).contains(&v) {
                Ok(v)
            } else {
                Err(Error::Argument(format!("{name} = {v} outside [0, 100)")))
            }
        };
        match m {
            Method::Energy => out.energy_form = Some(self.energy_form.unwrap_or_default()),
            Method::Ash => {
                out.prune_percent = Some(percent(
                    "prune_percent",
                    self.prune_percent.unwrap_or(DEFAULT_PRUNE_PERCENT),
                )?)
            }
            Method::Dice | Method::DiceCol => {
                out.p = Some(percent("p", self.p.unwrap_or(DEFAULT_P))?)
            }
            _ => {}
        }
        if m.uses_gaussians() {
            let eps = self.epsilon.unwrap_or(DEFAULT_EPSILON);
            if !(eps.is_finite() && eps >= 0.0) {
                return Err(Error::Argument(format!("epsilon = {eps} must be ≥ 0")));
            }
            out.epsilon = Some(eps);
        }
        if m.pca_inner().is_some() {
            let k = self
                .pca_components
                .unwrap_or(DEFAULT_PCA_COMPONENTS.min(dim).min(n_train));
            if k == 0 || k > dim.min(n_train) {
                return Err(Error::Argument(format!(
                    "pca_components = {k} outside [1, {}]",
                    dim.min(n_train)
                )));
            }
            out.pca_components = Some(k);
        }
        if m.uses_knn() {
            let fraction = self.subsample_fraction.unwrap_or(1.0);
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::Argument(format!(
                    "subsample_fraction = {fraction} outside (0, 1]"
                )));
            }
            let bank = ((fraction * n_train as f64).ceil() as usize).clamp(1, n_train.max(1));
            let k = self.k.unwrap_or_else(|| default_k(bank));
            if k == 0 || k > bank {
                return Err(Error::Argument(format!(
                    "k = {k} outside [1, {bank}] for the stored bank"
                )));
            }
            out.k = Some(k);
            out.normalize = Some(self.normalize.unwrap_or(true));
            out.subsample_fraction = Some(fraction);
        }
        Ok(out)
    }

    /// Short display name including the hyperparameters that are set.
    pub fn label(&self) -> String {
        let num = |v: f64| format!("{v}");
        let mut params = Vec::new();
        match self.method {
            Method::Energy if self.energy_form == Some(EnergyForm::Printed) => {
                params.push("printed".to_string())
            }
            Method::Ash => params.extend(self.prune_percent.map(|v| format!("{}%", num(v)))),
            Method::Dice | Method::DiceCol => {
                params.extend(self.p.map(|v| format!("p={}", num(v))))
            }
            _ => {}
        }
        if let Some(k) = self.pca_components {
            params.push(k.to_string());
        }
        if let Some(k) = self.k {
            params.push(format!("k={k}"));
        }
        if self.normalize == Some(false) {
            params.push("raw".into());
        }
        if let Some(f) = self.subsample_fraction.filter(|f| *f < 1.0) {
            params.push(format!("frac={}", num(f)));
        }
        let name = self.method.name().to_ascii_uppercase();
        let name = match self.method {
            Method::Energy => "Energy".to_string(),
            _ => name,
        };
        if params.is_empty() {
            name
        } else {
            format!("{name}({})", params.join(","))
        }
    }
}

impl From<Method> for DetectorSpec {
    fn from(method: Method) -> Self {
        DetectorSpec::new(method)
    }
}

/// ID training data a detector is fit on.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    /// N×d.
    pub features: &'a DMatrix<f64>,
    /// Empty when the bundle has no labels.
    pub labels: &'a [usize],
    pub num_classes: usize,
    pub head: &'a ClassifierHead,
}

impl<'a> TrainingData<'a> {
    /// `features` must be `bundle.id_train.features.to_matrix()`.
    pub fn from_bundle(bundle: &'a EmbeddingBundle, features: &'a DMatrix<f64>) -> Self {
        TrainingData {
            features,
            labels: bundle.id_train.labels.as_deref().unwrap_or(&[]),
            num_classes: bundle.num_classes,
            head: &bundle.head,
        }
    }

    fn require_labels(&self, method: Method) -> Result<&'a [usize]> {
        if self.labels.len() != self.features.nrows() {
            return Err(Error::Fit(format!(
                "{method} needs one id_train label per row ({} labels, {} rows)",
                self.labels.len(),
                self.features.nrows()
            )));
        }
        Ok(self.labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaDetector {
    pca: PcaModel,
    inner: Box<FittedDetector>,
}

impl PcaDetector {
    pub fn new(pca: PcaModel, inner: FittedDetector) -> Result<Self> {
        if inner.input_dim() != pca.k() {
            return Err(Error::Argument(format!(
                "inner detector expects {} dims, PCA yields {}",
                inner.input_dim(),
                pca.k()
            )));
        }
        Ok(PcaDetector {
            pca,
            inner: Box::new(inner),
        })
    }

    pub fn pca(&self) -> &PcaModel {
        &self.pca
    }

    pub fn inner(&self) -> &FittedDetector {
        &self.inner
    }

    pub fn score(&self, z: &[f64]) -> Result<Score> {
        let t = self.pca.transform_row(z)?;
        self.inner.score(t.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Msp(ClassifierHead),
    Energy(ClassifierHead, EnergyForm),
    Ash(ClassifierHead, f64),
    Dice(DiceDetector),
    Mds(MdsDetector),
    Rmds(RmdsDetector),
    Knn(KnnDetector),
    Pca(PcaDetector),
}

/// An immutable fitted detector together with its resolved spec.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedDetector {
    spec: DetectorSpec,
    model: Model,
}

impl FittedDetector {
    pub fn fit(spec: &DetectorSpec, train: &TrainingData<'_>, seed: u64) -> Result<Self> {
        let (n, d) = train.features.shape();
        if n == 0 {
            return Err(Error::Fit("id_train is empty".into()));
        }
        if d != train.head.feature_dim() {
            return Err(Error::Argument(format!(
                "training features have {d} dims, head expects {}",
                train.head.feature_dim()
            )));
        }
        let spec = spec.resolve(n, d)?;
        let ridge = Ridge::Relative(spec.epsilon.unwrap_or(DEFAULT_EPSILON));
        let model = match spec.method {
            Method::Msp => Model::Msp(train.head.clone()),
            Method::Energy => Model::Energy(train.head.clone(), spec.energy_form.unwrap_or_default()),
            Method::Ash => Model::Ash(train.head.clone(), spec.prune_percent.unwrap_or(DEFAULT_PRUNE_PERCENT)),
            Method::Dice | Method::DiceCol => {
                let mode = if spec.method == Method::Dice {
                    MaskMode::Global
                } else {
                    MaskMode::PerColumn
                };
                Model::Dice(DiceDetector::fit(
                    train.features,
                    train.head,
                    spec.p.unwrap_or(DEFAULT_P),
                    mode,
                )?)
            }
            Method::Mds => Model::Mds(MdsDetector::fit(
                train.features,
                train.require_labels(spec.method)?,
                train.num_classes,
                ridge,
            )?),
            Method::Rmds => Model::Rmds(RmdsDetector::fit(
                train.features,
                train.require_labels(spec.method)?,
                train.num_classes,
                ridge,
            )?),
            Method::Knn => Model::Knn(KnnDetector::fit(
                train.features,
                spec.k.unwrap_or(1),
                spec.normalize.unwrap_or(true),
                spec.subsample_fraction.unwrap_or(1.0),
                seed,
            )?),
            Method::MdsPca | Method::RmdsPca | Method::KnnPca => {
                let inner_method = spec.method.pca_inner().unwrap_or(Method::Mds);
                let k = spec.pca_components.unwrap_or(1);
                let pca = pca_fit(train.features, k)?;
                let reduced = pca.transform(train.features)?;
                let inner_train = TrainingData {
                    features: &reduced,
                    ..*train
                };
                let inner_spec = DetectorSpec {
                    method: inner_method,
                    pca_components: None,
                    ..spec.clone()
                };
                let inner = Self::fit_reduced(&inner_spec, &inner_train, seed)?;
                Model::Pca(PcaDetector::new(pca, inner)?)
            }
        };
        Ok(FittedDetector { spec, model })
    }

    // the head no longer matches the reduced dimension, so skip the head check
    fn fit_reduced(spec: &DetectorSpec, train: &TrainingData<'_>, seed: u64) -> Result<Self> {
        let ridge = Ridge::Relative(spec.epsilon.unwrap_or(DEFAULT_EPSILON));
        let model = match spec.method {
            Method::Mds => Model::Mds(MdsDetector::fit(
                train.features,
                train.require_labels(spec.method)?,
                train.num_classes,
                ridge,
            )?),
            Method::Rmds => Model::Rmds(RmdsDetector::fit(
                train.features,
                train.require_labels(spec.method)?,
                train.num_classes,
                ridge,
            )?),
            Method::Knn => Model::Knn(KnnDetector::fit(
                train.features,
                spec.k.unwrap_or(1),
                spec.normalize.unwrap_or(true),
                spec.subsample_fraction.unwrap_or(1.0),
                seed,
            )?),
            other => {
                return Err(Error::Argument(format!(
                    "{other} cannot run inside a PCA projection"
                )))
            }
        };
        Ok(FittedDetector {
            spec: spec.clone(),
            model,
        })
    }

    /// Assembles a detector from already-fitted state.
    pub fn from_parts(spec: DetectorSpec, model: Model) -> Self {
        FittedDetector { spec, model }
    }

    /// The spec with every default filled in.
    pub fn spec(&self) -> &DetectorSpec {
        &self.spec
    }

    pub fn method(&self) -> Method {
        self.spec.method
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn label(&self) -> String {
        self.spec.label()
    }

    /// Embedding dimension accepted by `score`.
    pub fn input_dim(&self) -> usize {
        match &self.model {
            Model::Msp(h) | Model::Energy(h, _) | Model::Ash(h, _) => h.feature_dim(),
            Model::Dice(det) => det.masked_head().feature_dim(),
            Model::Mds(det) => det.dim(),
            Model::Rmds(det) => det.classes().dim(),
            Model::Knn(det) => det.index().dim(),
            Model::Pca(det) => det.pca().input_dim(),
        }
    }

    pub fn score(&self, z: &[f64]) -> Result<Score> {
        match &self.model {
            Model::Msp(h) => msp_score(logits(h, z)?.as_slice()),
            Model::Energy(h, EnergyForm::Canonical) => energy_score(logits(h, z)?.as_slice()),
            Model::Energy(h, EnergyForm::Printed) => {
                printed_energy_score(logits(h, z)?.as_slice())
            }
            Model::Ash(h, pct) => energy_score(logits(h, &ash_prune(z, *pct))?.as_slice()),
            Model::Dice(det) => det.score(z),
            Model::Mds(det) => det.score(z),
            Model::Rmds(det) => det.score(z),
            Model::Knn(det) => det.score(z),
            Model::Pca(det) => det.score(z),
        }
    }

    /// Scores every row in parallel; output order follows row order.
    pub fn score_rows(&self, rows: &ArrayF32) -> Result<Vec<f64>> {
        let d = self.input_dim();
        if rows.ndim() != 2 || rows.ncols() != d {
            return Err(Error::Argument(format!(
                "expected an N×{d} array, got shape {:?}",
                rows.shape()
            )));
        }
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        rows.data()
            .par_chunks_exact(d)
            .map(|row| {
                let z: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
                self.score(&z).map(Score::value)
            })
            .collect()
    }

    /// Scores every row of an f64 matrix in parallel.
    pub fn score_matrix(&self, rows: &DMatrix<f64>) -> Result<Vec<f64>> {
        (0..rows.nrows())
            .into_par_iter()
            .map(|i| {
                let z: Vec<f64> = rows.row(i).iter().copied().collect();
                self.score(&z).map(Score::value)
            })
            .collect()
    }
}

/// Fits on a bundle's id_train split.
pub fn fit_on_bundle(
    spec: &DetectorSpec,
    bundle: &EmbeddingBundle,
    seed: u64,
) -> Result<FittedDetector> {
    let features = bundle.id_train.features.to_matrix();
    FittedDetector::fit(spec, &TrainingData::from_bundle(bundle, &features), seed)
}

/// Helper for building heads in tests and generators.
pub fn head_from_rows(d: usize, c: usize, weights_row_major: &[f64], bias: &[f64]) -> Result<ClassifierHead> {
    if weights_row_major.len() != d * c {
        return Err(Error::Argument(format!(
            "{} weights for a {d}×{c} head",
            weights_row_major.len()
        )));
    }
    ClassifierHead::new(
        DMatrix::from_row_slice(d, c, weights_row_major),
        DVector::from_column_slice(bias),
    )
}
