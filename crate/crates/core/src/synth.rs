//! Deterministic synthetic bundles and brute-force test oracles.
//!
//! Randomness comes from ChaCha8 seeded with `seed_from_u64(seed)`, one stream
//! per purpose: 0 for the layout (prototypes, OOD direction), 1 for id_train,
//! 2 for id_test and 3+i for OOD recipe i. Gaussian draws use `StandardNormal`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::detectors::{contribution_matrix, ContributionMask};
use crate::error::{Error, Result};
use crate::linalg::column_means;
use crate::store::{
    ArrayF32, ClassifierHead, EmbeddingBundle, EmbeddingSet, OodGroup, OodSet,
};

pub const ADVERSARIAL_MARKER: &str = "adversarial.json";

const STREAM_LAYOUT: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_OOD: u64 = 3;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

/// Where an OOD recipe centers its samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OodAnchor {
    /// The mean of the class means, shifted along the OOD direction.
    GlobalMean,
    /// A uniformly drawn class mean, shifted along the OOD direction.
    ClassMeans,
    /// A uniformly drawn class mean, shifted radially away from the global mean.
    BeyondClassMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodRecipe {
    pub name: String,
    pub group: OodGroup,
    pub anchor: OodAnchor,
    /// Shift length in units of the ID noise scale.
    pub shift: f64,
    /// Sample spread relative to the ID noise scale.
    pub noise_scale: f64,
}

impl OodRecipe {
    pub fn new(name: &str, group: OodGroup, anchor: OodAnchor, shift: f64, noise_scale: f64) -> Self {
        OodRecipe {
            name: name.into(),
            group,
            anchor,
            shift,
            noise_scale,
        }
    }
}

/// A near set overlapping the classes and a far set 20σ out.
pub fn standard_recipes() -> Vec<OodRecipe> {
    vec![
        OodRecipe::new("near-shift", OodGroup::Near, OodAnchor::ClassMeans, 1.0, 2.0),
        OodRecipe::new("far-shift", OodGroup::Far, OodAnchor::GlobalMean, 20.0, 1.0),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub dim: usize,
    pub num_classes: usize,
    pub n_per_class: usize,
    pub n_test: usize,
    pub n_ood: usize,
    /// Distance of every class mean from the origin.
    pub separation: f64,
    /// Per-coordinate ID standard deviation.
    pub noise: f64,
    /// Target logit for the true class in the least-squares head fit.
    pub logit_scale: f64,
    pub recipes: Vec<OodRecipe>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            dim: 16,
            num_classes: 4,
            n_per_class: 500,
            n_test: 500,
            n_ood: 500,
            separation: 10.0,
            noise: 1.0,
            logit_scale: 10.0,
            recipes: standard_recipes(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let arg = |m: String| Err(Error::Argument(m));
        if self.dim < 2 {
            return arg(format!("dim = {} must be ≥ 2", self.dim));
        }
        if self.num_classes < 2 {
            return arg(format!("num_classes = {} must be ≥ 2", self.num_classes));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return arg(format!("separation = {} must be > 0", self.separation));
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return arg(format!("noise = {} must be > 0", self.noise));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return arg(format!("logit_scale = {} must be > 0", self.logit_scale));
        }
        if self.n_per_class == 0 || self.n_test == 0 || self.n_ood == 0 {
            return arg("sample counts must be positive".into());
        }
        for (i, r) in self.recipes.iter().enumerate() {
            if !(r.shift.is_finite() && r.noise_scale > 0.0 && r.noise_scale.is_finite()) {
                return arg(format!("recipe '{}' needs a finite shift and noise_scale > 0", r.name));
            }
            if self.recipes[..i].iter().any(|o| o.name == r.name) {
                return arg(format!("duplicate recipe name '{}'", r.name));
            }
        }
        Ok(())
    }
}

/// Class means (C×d) and the unit OOD direction.
struct Layout {
    means: DMatrix<f64>,
    ood_direction: DVector<f64>,
}

fn unit(mut v: DVector<f64>) -> DVector<f64> {
    let n = v.norm();
    if n > 0.0 {
        v /= n;
    }
    v
}

fn random_unit(r: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| normal(r));
        if v.norm() > 1e-12 {
            return unit(v);
        }
    }
}

/// Prototypes on disjoint random coordinate supports; the OOD direction lives
/// on the coordinates no class uses.
fn sparse_layout(r: &mut ChaCha8Rng, d: usize, c: usize, support: usize, uniform: bool, radius: f64) -> Layout {
    let mut perm: Vec<usize> = (0..d).collect();
    perm.shuffle(r);
    let mut means = DMatrix::zeros(c, d);
    if c * support > d {
        for k in 0..c {
            means.set_row(k, &(random_unit(r, d) * radius).transpose());
        }
    } else {
        for k in 0..c {
            let mut proto = DVector::zeros(d);
            for &j in &perm[k * support..(k + 1) * support] {
                proto[j] = if uniform { 1.0 } else { normal(r).abs() };
            }
            means.set_row(k, &(unit(proto) * radius).transpose());
        }
    }
    let free = &perm[(c * support).min(d)..];
    let ood_direction = if free.is_empty() || c * support > d {
        random_unit(r, d)
    } else {
        let mut v = DVector::zeros(d);
        for &j in free {
            v[j] = normal(r).abs();
        }
        unit(v)
    };
    Layout {
        means,
        ood_direction,
    }
}

fn sample_rows(
    r: &mut ChaCha8Rng,
    centers: impl Fn(&mut ChaCha8Rng) -> DVector<f64>,
    n: usize,
    d: usize,
    sigma: f64,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, d);
    for i in 0..n {
        let c = centers(r);
        for j in 0..d {
            out[(i, j)] = c[j] + sigma * normal(r);
        }
    }
    out
}

fn round_f32(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| v as f32 as f64)
}

/// Least-squares fit of `[X 1]·[W; bᵀ] ≈ scale·onehot(y)`, rounded to f32.
pub fn fit_linear_head(
    x: &DMatrix<f64>,
    labels: &[usize],
    num_classes: usize,
    scale: f64,
) -> Result<ClassifierHead> {
    let (n, d) = x.shape();
    let mut a = DMatrix::from_element(n, d + 1, 1.0);
    a.view_mut((0, 0), (n, d)).copy_from(x);
    let mut y = DMatrix::zeros(n, num_classes);
    for (i, &l) in labels.iter().enumerate() {
        y[(i, l)] = scale;
    }
    let solution = a
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| Error::Generator(format!("least-squares head fit failed: {e}")))?;
    let weights = round_f32(&solution.rows(0, d).into_owned());
    let bias = DVector::from_iterator(
        num_classes,
        solution.row(d).iter().map(|&v| v as f32 as f64),
    );
    ClassifierHead::new(weights, bias)
}

fn ood_sets(spec_seed: u64, layout: &Layout, recipes: &[OodRecipe], n: usize, sigma: f64) -> Vec<OodSet> {
    let (c, d) = layout.means.shape();
    let center = column_means(&layout.means);
    recipes
        .iter()
        .enumerate()
        .map(|(i, recipe)| {
            let mut r = rng(spec_seed, STREAM_OOD + i as u64);
            let shift = recipe.shift * sigma;
            let rows = sample_rows(
                &mut r,
                |r| match recipe.anchor {
                    OodAnchor::GlobalMean => &center + &layout.ood_direction * shift,
                    OodAnchor::ClassMeans => {
                        let y = r.random_range(0..c);
                        layout.means.row(y).transpose() + &layout.ood_direction * shift
                    }
                    OodAnchor::BeyondClassMeans => {
                        let y = r.random_range(0..c);
                        let mu = layout.means.row(y).transpose();
                        let radial = &mu - &center;
                        let dir = if radial.norm() > 0.0 {
                            unit(radial)
                        } else {
                            layout.ood_direction.clone()
                        };
                        mu + dir * shift
                    }
                },
                n,
                d,
                recipe.noise_scale * sigma,
            );
            OodSet {
                name: recipe.name.clone(),
                group: recipe.group,
                set: EmbeddingSet {
                    features: ArrayF32::from_matrix(&rows),
                    labels: None,
                },
            }
        })
        .collect()
}

/// Shared assembly: draws id_train with the given class counts, id_test
/// uniformly over classes, fits the head and samples the OOD recipes.
#[allow(clippy::too_many_arguments)]
fn assemble(
    name: String,
    seed: u64,
    layout: &Layout,
    counts: &[usize],
    n_test: usize,
    n_ood: usize,
    sigma: f64,
    logit_scale: f64,
    recipes: &[OodRecipe],
) -> Result<EmbeddingBundle> {
    let (c, d) = layout.means.shape();
    let labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| std::iter::repeat_n(k, n))
        .collect();
    let mut r = rng(seed, STREAM_TRAIN);
    let mut train = DMatrix::zeros(labels.len(), d);
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..d {
            train[(i, j)] = layout.means[(y, j)] + sigma * normal(&mut r);
        }
    }
    let train = round_f32(&train);
    let head = fit_linear_head(&train, &labels, c, logit_scale)?;

    let mut r = rng(seed, STREAM_TEST);
    let test = sample_rows(
        &mut r,
        |r| layout.means.row(r.random_range(0..c)).transpose(),
        n_test,
        d,
        sigma,
    );

    let bundle = EmbeddingBundle {
        name,
        feature_dim: d,
        num_classes: c,
        id_train: EmbeddingSet {
            features: ArrayF32::from_matrix(&train),
            labels: Some(labels),
        },
        id_test: EmbeddingSet {
            features: ArrayF32::from_matrix(&test),
            labels: None,
        },
        ood: ood_sets(seed, layout, recipes, n_ood, sigma),
        head,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Builds the standard synthetic bundle in memory.
pub fn synthesize(spec: &SynthSpec) -> Result<EmbeddingBundle> {
    spec.validate()?;
    let (d, c) = (spec.dim, spec.num_classes);
    let support = (d / (c + 1)).max(1);
    let layout = sparse_layout(&mut rng(spec.seed, STREAM_LAYOUT), d, c, support, false, spec.separation);
    assemble(
        format!("synth-seed{}", spec.seed),
        spec.seed,
        &layout,
        &vec![spec.n_per_class; c],
        spec.n_test,
        spec.n_ood,
        spec.noise,
        spec.logit_scale,
        &spec.recipes,
    )
}

/// Writes the standard synthetic bundle into `dir`; returns the manifest path.
pub fn generate_bundle(spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<PathBuf> {
    synthesize(spec)?.write(dir)
}

/// A head on which global DICE masks out one class column entirely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialSpec {
    pub base: SynthSpec,
    /// Coordinates per class prototype.
    pub support: usize,
    /// Victim training count as a fraction of `n_per_class`.
    pub victim_share: f64,
    /// DICE sparsity the construction targets.
    pub p: f64,
}

impl Default for AdversarialSpec {
    fn default() -> Self {
        AdversarialSpec {
            base: SynthSpec {
                recipes: vec![
                    OodRecipe::new("near-shift", OodGroup::Near, OodAnchor::GlobalMean, 1.0, 1.0),
                    OodRecipe::new("far-shift", OodGroup::Far, OodAnchor::GlobalMean, 20.0, 1.0),
                ],
                ..SynthSpec::default()
            },
            support: 3,
            victim_share: 0.25,
            p: 90.0,
        }
    }
}

/// Marker written next to an adversarial bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialMarker {
    pub victim_class: usize,
    pub p: f64,
    /// Ones left in the victim column by global DICE (always 0).
    pub global_victim_ones: usize,
    /// Ones left in the victim column by per-column DICE.
    pub per_column_victim_ones: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialBundle {
    pub bundle: EmbeddingBundle,
    pub marker: AdversarialMarker,
}

/// The victim is the last class, under-represented in id_train, with a uniform
/// sparse prototype so its contributions are uniformly small.
pub fn synthesize_adversarial(spec: &AdversarialSpec) -> Result<AdversarialBundle> {
    let base = &spec.base;
    base.validate()?;
    if base.num_classes < 3 {
        return Err(Error::Argument(format!(
            "adversarial head needs ≥ 3 classes, got {}",
            base.num_classes
        )));
    }
    if spec.support == 0 || !(spec.victim_share > 0.0 && spec.victim_share <= 1.0) {
        return Err(Error::Argument("support must be ≥ 1 and victim_share in (0, 1]".into()));
    }
    let (d, c) = (base.dim, base.num_classes);
    if c * spec.support > d {
        return Err(Error::Argument(format!(
            "{c} classes × support {} exceed dim {d}",
            spec.support
        )));
    }
    let victim = c - 1;
    let layout = sparse_layout(&mut rng(base.seed, STREAM_LAYOUT), d, c, spec.support, true, base.separation);
    let mut counts = vec![base.n_per_class; c];
    counts[victim] = ((base.n_per_class as f64 * spec.victim_share) as usize).max(1);
    let bundle = assemble(
        format!("adversarial-seed{}", base.seed),
        base.seed,
        &layout,
        &counts,
        base.n_test,
        base.n_ood,
        base.noise,
        base.logit_scale,
        &base.recipes,
    )?;

    let v = contribution_matrix(
        bundle.head.weights(),
        &column_means(&bundle.id_train.features.to_matrix()),
    )?;
    let global = ContributionMask::global(&v, spec.p)?;
    let per_column = ContributionMask::per_column(&v, spec.p)?;
    let global_victim_ones = global.column_ones(victim);
    if global_victim_ones != 0 {
        return Err(Error::Generator(format!(
            "global DICE at p={} keeps {global_victim_ones} weights of victim class {victim}; \
             try another seed or a smaller victim_share",
            spec.p
        )));
    }
    Ok(AdversarialBundle {
        bundle,
        marker: AdversarialMarker {
            victim_class: victim,
            p: spec.p,
            global_victim_ones,
            per_column_victim_ones: per_column.column_ones(victim),
        },
    })
}

/// Writes the adversarial bundle plus its marker; returns the manifest path.
pub fn generate_adversarial_head(spec: &AdversarialSpec, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let adv = synthesize_adversarial(spec)?;
    let manifest = adv.bundle.write(dir)?;
    let path = dir.join(ADVERSARIAL_MARKER);
    let mut text = serde_json::to_string_pretty(&adv.marker)
        .map_err(|e| Error::Schema(e.to_string()))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Two classes separated along one coordinate, plus pure-noise coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalNoiseSpec {
    pub seed: u64,
    pub noise_dims: usize,
    /// Class means sit at ±offset on the signal coordinate.
    pub offset: f64,
    pub n_per_class: usize,
    pub n_test: usize,
    pub n_ood: usize,
    /// OOD samples sit this far beyond a class mean, away from the other class.
    pub ood_shift: f64,
    pub logit_scale: f64,
}

impl Default for SignalNoiseSpec {
    fn default() -> Self {
        SignalNoiseSpec {
            seed: 0,
            noise_dims: 9,
            offset: 3.0,
            n_per_class: 500,
            n_test: 500,
            n_ood: 500,
            ood_shift: 3.0,
            logit_scale: 10.0,
        }
    }
}

pub fn synthesize_signal_noise(spec: &SignalNoiseSpec) -> Result<EmbeddingBundle> {
    if spec.noise_dims == 0 || spec.offset.is_nan() || spec.offset <= 0.0 || spec.n_per_class == 0 {
        return Err(Error::Argument(
            "signal-noise needs noise_dims ≥ 1, offset > 0 and samples".into(),
        ));
    }
    let d = spec.noise_dims + 1;
    let mut means = DMatrix::zeros(2, d);
    means[(0, 0)] = -spec.offset;
    means[(1, 0)] = spec.offset;
    let mut direction = DVector::zeros(d);
    direction[0] = 1.0;
    let layout = Layout {
        means,
        ood_direction: direction,
    };
    assemble(
        format!("signal-noise-seed{}", spec.seed),
        spec.seed,
        &layout,
        &[spec.n_per_class; 2],
        spec.n_test,
        spec.n_ood,
        1.0,
        spec.logit_scale,
        &[OodRecipe::new(
            "beyond-signal",
            OodGroup::Near,
            OodAnchor::BeyondClassMeans,
            spec.ood_shift,
            1.0,
        )],
    )
}

pub fn generate_signal_noise(spec: &SignalNoiseSpec, dir: impl AsRef<Path>) -> Result<PathBuf> {
    synthesize_signal_noise(spec)?.write(dir)
}

/// All-pairs AUROC with half credit for ties.
pub fn oracle_auroc(id_scores: &[f64], ood_scores: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in id_scores {
        for &b in ood_scores {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    wins / (id_scores.len() as f64 * ood_scores.len() as f64)
}

/// Brute-force k-th smallest Euclidean distance by full sort.
pub fn oracle_kth_distance(bank: &[Vec<f64>], z: &[f64], k: usize) -> f64 {
    let mut d: Vec<f64> = bank
        .iter()
        .map(|row| {
            row.iter()
                .zip(z)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    d.sort_by(f64::total_cmp);
    d[k - 1]
}
