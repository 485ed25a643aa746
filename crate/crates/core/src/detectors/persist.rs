//! Detector directories: `detector.json` plus little-endian f64 NPY arrays.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    ContributionMask, DetectorSpec, DiceDetector, EnergyForm, FittedDetector, KnnDetector,
    MaskMode, MdsDetector, Method, Model, PcaDetector, RmdsDetector, DEFAULT_P,
    DEFAULT_PRUNE_PERCENT,
};
use crate::error::{Error, Result};
use crate::knn::KnnIndex;
use crate::linalg::{BackgroundGaussian, GaussianByClass, PcaModel};
use crate::store::{read_npy_f64, write_npy_f64, ArrayF64, ClassifierHead};

pub const DETECTOR_FORMAT_VERSION: u32 = 1;
pub const SIDECAR_FILE: &str = "detector.json";
const INNER_DIR: &str = "inner";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    format_version: u32,
    method: Method,
    spec: DetectorSpec,
    /// Array role → file name inside the directory.
    arrays: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    scalars: BTreeMap<String, f64>,
    /// Subdirectory holding the detector that runs in PCA space.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    inner: Option<String>,
}

struct Writer<'a> {
    dir: &'a Path,
    sidecar: Sidecar,
}

impl Writer<'_> {
    fn matrix(&mut self, role: &str, m: &DMatrix<f64>) -> Result<()> {
        self.array(role, &ArrayF64::from_matrix(m))
    }

    fn vector(&mut self, role: &str, v: &[f64]) -> Result<()> {
        self.array(role, &ArrayF64::vector(v.to_vec()))
    }

    fn array(&mut self, role: &str, a: &ArrayF64) -> Result<()> {
        let file = format!("{role}.npy");
        write_npy_f64(a, self.dir.join(&file))?;
        self.sidecar.arrays.insert(role.to_string(), file);
        Ok(())
    }

    fn head(&mut self, h: &ClassifierHead) -> Result<()> {
        self.matrix("head_weights", h.weights())?;
        self.vector("head_bias", h.bias().as_slice())
    }

    fn gaussians(&mut self, g: &GaussianByClass) -> Result<()> {
        self.matrix("class_means", &g.means)?;
        self.matrix("precision", &g.precision)?;
        self.sidecar.scalars.insert("epsilon".into(), g.epsilon);
        Ok(())
    }
}

/// Writes `det` into `dir`, creating it if needed.
pub fn save_detector(det: &FittedDetector, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = Writer {
        dir,
        sidecar: Sidecar {
            format_version: DETECTOR_FORMAT_VERSION,
            method: det.method(),
            spec: det.spec().clone(),
            arrays: BTreeMap::new(),
            scalars: BTreeMap::new(),
            inner: None,
        },
    };
    match det.model() {
        Model::Msp(h) | Model::Energy(h, _) | Model::Ash(h, _) => w.head(h)?,
        Model::Dice(d) => {
            w.head(d.masked_head())?;
            w.matrix("mask", &d.mask().to_f64())?;
        }
        Model::Mds(d) => w.gaussians(d.gaussians())?,
        Model::Rmds(d) => {
            w.gaussians(d.classes().gaussians())?;
            let bg = d.background();
            w.vector("background_mean", bg.mean.as_slice())?;
            w.matrix("background_precision", &bg.precision)?;
            w.sidecar
                .scalars
                .insert("background_epsilon".into(), bg.epsilon);
        }
        Model::Knn(d) => {
            let idx = d.index();
            w.array(
                "bank",
                &ArrayF64::matrix(idx.len(), idx.dim(), idx.bank().to_vec())?,
            )?;
        }
        Model::Pca(d) => {
            let pca = d.pca();
            w.vector("pca_mean", pca.mean().as_slice())?;
            w.matrix("pca_components", pca.components())?;
            w.vector("pca_singular_values", pca.singular_values())?;
            w.sidecar
                .scalars
                .insert("n_samples".into(), pca.n_samples() as f64);
            save_detector(d.inner(), dir.join(INNER_DIR))?;
            w.sidecar.inner = Some(INNER_DIR.into());
        }
    }
    let path = dir.join(SIDECAR_FILE);
    let mut text = serde_json::to_string_pretty(&w.sidecar)
        .map_err(|e| Error::Schema(format!("cannot serialize sidecar: {e}")))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    dir: &'a Path,
    sidecar: &'a Sidecar,
}

impl Reader<'_> {
    fn array(&self, role: &str) -> Result<ArrayF64> {
        let file = self
            .sidecar
            .arrays
            .get(role)
            .ok_or_else(|| Error::Schema(format!("sidecar lacks array role '{role}'")))?;
        if Path::new(file).components().count() != 1 {
            return Err(Error::Schema(format!("array file '{file}' must be a plain file name")));
        }
        read_npy_f64(self.dir.join(file))
    }

    fn matrix(&self, role: &str) -> Result<DMatrix<f64>> {
        let a = self.array(role)?;
        if a.ndim() != 2 {
            return Err(Error::validation(role, format!("expected 2-D, got shape {:?}", a.shape())));
        }
        Ok(a.to_matrix())
    }

    fn vector(&self, role: &str) -> Result<DVector<f64>> {
        let a = self.array(role)?;
        if a.ndim() != 1 {
            return Err(Error::validation(role, format!("expected 1-D, got shape {:?}", a.shape())));
        }
        Ok(DVector::from_vec(a.into_data()))
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        self.sidecar
            .scalars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("sidecar lacks scalar '{name}'")))
    }

    fn head(&self) -> Result<ClassifierHead> {
        ClassifierHead::new(self.matrix("head_weights")?, self.vector("head_bias")?)
    }

    fn gaussians(&self) -> Result<GaussianByClass> {
        Ok(GaussianByClass {
            means: self.matrix("class_means")?,
            precision: self.matrix("precision")?,
            epsilon: self.scalar("epsilon")?,
        })
    }
}

/// Reads a directory written by [`save_detector`].
pub fn load_detector(dir: impl AsRef<Path>) -> Result<FittedDetector> {
    let dir = dir.as_ref();
    let path = dir.join(SIDECAR_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    if sidecar.format_version != DETECTOR_FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "unsupported detector format_version {} (expected {DETECTOR_FORMAT_VERSION})",
            sidecar.format_version
        )));
    }
    if sidecar.method != sidecar.spec.method {
        return Err(Error::Schema(format!(
            "sidecar method '{}' differs from spec method '{}'",
            sidecar.method, sidecar.spec.method
        )));
    }
    let r = Reader {
        dir,
        sidecar: &sidecar,
    };
    let spec = sidecar.spec.clone();
    let model = match sidecar.method {
        Method::Msp => Model::Msp(r.head()?),
        Method::Energy => Model::Energy(r.head()?, spec.energy_form.unwrap_or(EnergyForm::Canonical)),
        Method::Ash => Model::Ash(r.head()?, spec.prune_percent.unwrap_or(DEFAULT_PRUNE_PERCENT)),
        Method::Dice | Method::DiceCol => {
            let mode = if sidecar.method == Method::Dice {
                MaskMode::Global
            } else {
                MaskMode::PerColumn
            };
            let raw = r.matrix("mask")?;
            if raw.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::validation("mask", "entries must be 0 or 1"));
            }
            let mask = ContributionMask::from_parts(
                raw.map(|v| v == 1.0),
                spec.p.unwrap_or(DEFAULT_P),
                mode,
            )?;
            Model::Dice(DiceDetector::from_mask(&r.head()?, mask)?)
        }
        Method::Mds => Model::Mds(MdsDetector::from_gaussians(r.gaussians()?)?),
        Method::Rmds => {
            let bg = BackgroundGaussian {
                mean: r.vector("background_mean")?,
                precision: r.matrix("background_precision")?,
                epsilon: r.scalar("background_epsilon")?,
            };
            Model::Rmds(RmdsDetector::from_parts(
                MdsDetector::from_gaussians(r.gaussians()?)?,
                bg,
            )?)
        }
        Method::Knn => {
            let bank = r.matrix("bank")?;
            let (m, dim) = bank.shape();
            let mut rows = Vec::with_capacity(m * dim);
            for i in 0..m {
                rows.extend(bank.row(i).iter().copied());
            }
            let index = KnnIndex::from_bank(
                rows,
                dim,
                spec.normalize.unwrap_or(true),
                spec.subsample_fraction.unwrap_or(1.0),
            )?;
            let k = spec
                .k
                .ok_or_else(|| Error::Schema("knn spec lacks k".into()))?;
            Model::Knn(KnnDetector::from_index(index, k)?)
        }
        Method::MdsPca | Method::RmdsPca | Method::KnnPca => {
            let pca = PcaModel::from_parts(
                r.vector("pca_mean")?,
                r.matrix("pca_components")?,
                r.vector("pca_singular_values")?.as_slice().to_vec(),
                r.scalar("n_samples")? as usize,
            )?;
            let inner_dir = sidecar
                .inner
                .as_deref()
                .ok_or_else(|| Error::Schema("PCA detector lacks an inner directory".into()))?;
            if Path::new(inner_dir).components().count() != 1 {
                return Err(Error::Schema(format!(
                    "inner directory '{inner_dir}' must be a plain name"
                )));
            }
            let inner = load_detector(dir.join(inner_dir))?;
            if Some(inner.method()) != sidecar.method.pca_inner() {
                return Err(Error::Schema(format!(
                    "{} cannot wrap an inner {} detector",
                    sidecar.method,
                    inner.method()
                )));
            }
            Model::Pca(PcaDetector::new(pca, inner)?)
        }
    };
    Ok(FittedDetector::from_parts(spec, model))
}
