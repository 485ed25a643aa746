//! Embedding bundles: a JSON manifest plus the NPY arrays it references.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::array::ArrayF32;
use super::npy::{read_npy, write_npy};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OodGroup {
    Near,
    Far,
}

impl fmt::Display for OodGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OodGroup::Near => "near",
            OodGroup::Far => "far",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub id_train: TrainFiles,
    pub id_test: FeatureFiles,
    pub ood: Vec<OodFiles>,
    pub head: HeadFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFiles {
    pub features: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureFiles {
    pub features: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodFiles {
    pub name: String,
    pub features: PathBuf,
    pub group: OodGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadFiles {
    pub weights: PathBuf,
    pub bias: PathBuf,
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Manifest> {
        let manifest: Manifest =
            serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Schema(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                manifest.version
            )));
        }
        Ok(manifest)
    }
}

/// Final linear layer: `logits = weightsᵀ · z + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    weights: DMatrix<f64>,
    bias: DVector<f64>,
}

impl ClassifierHead {
    /// `weights` is d×C, `bias` has length C.
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if weights.ncols() != bias.len() {
            return Err(Error::Argument(format!(
                "head weights have {} columns but bias has {} entries",
                weights.ncols(),
                bias.len()
            )));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Argument("head contains non-finite entries".into()));
        }
        Ok(ClassifierHead { weights, bias })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub features: ArrayF32,
    pub labels: Option<Vec<usize>>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodSet {
    pub name: String,
    pub group: OodGroup,
    pub set: EmbeddingSet,
}

/// Everything a detector consumes: ID splits, OOD sets and the classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    pub name: String,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub id_train: EmbeddingSet,
    pub id_test: EmbeddingSet,
    pub ood: Vec<OodSet>,
    pub head: ClassifierHead,
}

impl EmbeddingBundle {
    /// Checks every bundle invariant, naming the offending file on failure.
    pub fn validate(&self) -> Result<()> {
        let d = self.feature_dim;
        let c = self.num_classes;
        if d == 0 || c == 0 {
            return Err(Error::validation(
                "manifest",
                "feature_dim and num_classes must be positive",
            ));
        }
        if self.head.feature_dim() != d || self.head.num_classes() != c {
            return Err(Error::validation(
                "head.weights",
                format!(
                    "weights are {}x{}, expected {d}x{c}",
                    self.head.feature_dim(),
                    self.head.num_classes()
                ),
            ));
        }
        check_features(&self.id_train.features, d, "id_train.features")?;
        if self.id_train.is_empty() {
            return Err(Error::validation("id_train.features", "no rows"));
        }
        match &self.id_train.labels {
            None => return Err(Error::validation("id_train.labels", "labels are required")),
            Some(labels) => {
                if labels.len() != self.id_train.len() {
                    return Err(Error::validation(
                        "id_train.labels",
                        format!(
                            "{} labels for {} feature rows",
                            labels.len(),
                            self.id_train.len()
                        ),
                    ));
                }
                if let Some(bad) = labels.iter().find(|&&l| l >= c) {
                    return Err(Error::validation(
                        "id_train.labels",
                        format!("label {bad} outside [0, {c})"),
                    ));
                }
            }
        }
        check_features(&self.id_test.features, d, "id_test.features")?;
        for o in &self.ood {
            check_features(&o.set.features, d, &format!("ood[{}].features", o.name))?;
        }
        Ok(())
    }

    /// Writes the bundle as NPY files plus `manifest.json`; returns the manifest path.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

        let labels = self
            .id_train
            .labels
            .as_ref()
            .ok_or_else(|| Error::validation("id_train.labels", "labels are required"))?;
        write_npy(&self.id_train.features, dir.join("id_train_features.npy"))?;
        write_npy(
            &ArrayF32::vector(labels.iter().map(|&l| l as f32).collect()),
            dir.join("id_train_labels.npy"),
        )?;
        write_npy(&self.id_test.features, dir.join("id_test_features.npy"))?;

        let mut ood = Vec::with_capacity(self.ood.len());
        for (i, o) in self.ood.iter().enumerate() {
            let file = PathBuf::from(format!("ood_{i}_{}.npy", sanitize(&o.name)));
            write_npy(&o.set.features, dir.join(&file))?;
            ood.push(OodFiles {
                name: o.name.clone(),
                features: file,
                group: o.group,
            });
        }

        let weights = self.head.weights();
        write_npy(
            &ArrayF32::from_matrix(weights),
            dir.join("head_weights.npy"),
        )?;
        write_npy(
            &ArrayF32::vector(self.head.bias().iter().map(|&b| b as f32).collect()),
            dir.join("head_bias.npy"),
        )?;

        let manifest = Manifest {
            version: MANIFEST_VERSION,
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
            id_train: TrainFiles {
                features: "id_train_features.npy".into(),
                labels: "id_train_labels.npy".into(),
            },
            id_test: FeatureFiles {
                features: "id_test_features.npy".into(),
            },
            ood,
            head: HeadFiles {
                weights: "head_weights.npy".into(),
                bias: "head_bias.npy".into(),
            },
        };
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn check_features(a: &ArrayF32, d: usize, file: &str) -> Result<()> {
    if a.ndim() != 2 {
        return Err(Error::validation(
            file,
            format!("expected a 2-D array, found shape {:?}", a.shape()),
        ));
    }
    if a.ncols() != d {
        return Err(Error::validation(
            file,
            format!("feature width {} does not match feature_dim {d}", a.ncols()),
        ));
    }
    if let Some(pos) = a.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::validation(
            file,
            format!("non-finite value in row {}", pos / d),
        ));
    }
    Ok(())
}

/// Loads and validates the bundle described by a manifest file.
pub fn load_bundle(manifest_path: impl AsRef<Path>) -> Result<EmbeddingBundle> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest = Manifest::from_json(&text)?;
    let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let load = |p: &Path| read_npy(root.join(p));

    let train_features = load(&manifest.id_train.features)?;
    let labels = parse_labels(
        &load(&manifest.id_train.labels)?,
        &manifest.id_train.labels,
    )?;
    let id_test = load(&manifest.id_test.features)?;
    let mut ood = Vec::with_capacity(manifest.ood.len());
    for entry in &manifest.ood {
        ood.push(OodSet {
            name: entry.name.clone(),
            group: entry.group,
            set: EmbeddingSet {
                features: load(&entry.features)?,
                labels: None,
            },
        });
    }
    let head = parse_head(
        &load(&manifest.head.weights)?,
        &load(&manifest.head.bias)?,
        &manifest,
    )?;

    let name = manifest_path
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| manifest_path.display().to_string());
    let bundle = EmbeddingBundle {
        name,
        feature_dim: manifest.feature_dim,
        num_classes: manifest.num_classes,
        id_train: EmbeddingSet {
            features: train_features,
            labels: Some(labels),
        },
        id_test: EmbeddingSet {
            features: id_test,
            labels: None,
        },
        ood,
        head,
    };
    bundle.validate().map_err(|e| match e {
        Error::Validation { file, reason } => Error::Validation {
            file: manifest_file(&manifest, &file)
                .map(|p| root.join(p).display().to_string())
                .unwrap_or(file),
            reason,
        },
        other => other,
    })?;
    Ok(bundle)
}

/// Maps a validation role such as `id_test.features` to the manifest's file for it.
fn manifest_file<'a>(m: &'a Manifest, role: &str) -> Option<&'a Path> {
    match role {
        "id_train.features" => Some(&m.id_train.features),
        "id_train.labels" => Some(&m.id_train.labels),
        "id_test.features" => Some(&m.id_test.features),
        "head.weights" => Some(&m.head.weights),
        "head.bias" => Some(&m.head.bias),
        _ => m
            .ood
            .iter()
            .find(|o| role == format!("ood[{}].features", o.name))
            .map(|o| o.features.as_path()),
    }
}

fn parse_labels(a: &ArrayF32, file: &Path) -> Result<Vec<usize>> {
    let file = file.display().to_string();
    if a.ndim() != 1 {
        return Err(Error::validation(
            file,
            format!("labels must be 1-D, found shape {:?}", a.shape()),
        ));
    }
    a.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v.is_finite() && v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::validation(
                    file.clone(),
                    format!("label {v} at index {i} is not a non-negative integer"),
                ))
            }
        })
        .collect()
}

fn parse_head(weights: &ArrayF32, bias: &ArrayF32, m: &Manifest) -> Result<ClassifierHead> {
    let wfile = m.head.weights.display().to_string();
    let bfile = m.head.bias.display().to_string();
    if weights.ndim() != 2 {
        return Err(Error::validation(wfile, "weights must be 2-D"));
    }
    if weights.nrows() != m.feature_dim || weights.ncols() != m.num_classes {
        return Err(Error::validation(
            wfile,
            format!(
                "weights are {}x{}, expected {}x{}",
                weights.nrows(),
                weights.ncols(),
                m.feature_dim,
                m.num_classes
            ),
        ));
    }
    if bias.ndim() != 1 || bias.len() != m.num_classes {
        return Err(Error::validation(
            bfile,
            format!(
                "bias has shape {:?}, expected ({},)",
                bias.shape(),
                m.num_classes
            ),
        ));
    }
    let b = DVector::from_iterator(bias.len(), bias.data().iter().map(|&v| v as f64));
    ClassifierHead::new(weights.to_matrix(), b).map_err(|e| match e {
        Error::Argument(reason) => Error::validation(wfile, reason),
        other => other,
    })
}
