//! Exact k-th nearest neighbor distances over a bank of ID embeddings.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default neighbor rank for an ID set of `n` rows.
pub fn default_k(n: usize) -> usize {
    if n >= 10_000 {
        50
    } else {
        n.div_ceil(200).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnIndex {
    /// Row-major M×m.
    bank: Vec<f64>,
    dim: usize,
    normalized: bool,
    subsample_fraction: f64,
}

impl KnnIndex {
    /// Builds an index from rows already in bank form (used when reloading).
    pub fn from_bank(
        bank: Vec<f64>,
        dim: usize,
        normalized: bool,
        subsample_fraction: f64,
    ) -> Result<Self> {
        if dim == 0 || bank.is_empty() || !bank.len().is_multiple_of(dim) {
            return Err(Error::Argument(format!(
                "bank of {} values is not a non-empty multiple of dimension {dim}",
                bank.len()
            )));
        }
        Ok(KnnIndex {
            bank,
            dim,
            normalized,
            subsample_fraction,
        })
    }

    pub fn len(&self) -> usize {
        self.bank.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.bank.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn subsample_fraction(&self) -> f64 {
        self.subsample_fraction
    }

    pub fn bank(&self) -> &[f64] {
        &self.bank
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.bank[i * self.dim..(i + 1) * self.dim]
    }

    /// Squared Euclidean distances from `z` to every bank row, in bank order.
    pub fn squared_distances(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim {
            return Err(Error::Argument(format!(
                "query has {} dims, index has {}",
                z.len(),
                self.dim
            )));
        }
        Ok(self
            .bank
            .chunks_exact(self.dim)
            .map(|row| {
                row.iter()
                    .zip(z)
                    .map(|(a, b)| {
                        let t = a - b;
                        t * t
                    })
                    .sum()
            })
            .collect())
    }

    /// The k-th smallest Euclidean distance from `z` to the bank (duplicates kept).
    pub fn kth_distance(&self, z: &[f64], k: usize) -> Result<f64> {
        if k == 0 || k > self.len() {
            return Err(Error::Argument(format!(
                "k = {k} outside [1, {}]",
                self.len()
            )));
        }
        let mut d2 = self.squared_distances(z)?;
        let (_, kth, _) = d2.select_nth_unstable_by(k - 1, f64::total_cmp);
        Ok(kth.sqrt())
    }
}

/// Scales `v` to unit L2 norm; `None` for a zero vector.
pub fn normalize(v: &mut [f64]) -> Option<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(())
}

/// Stores ⌈fraction·N⌉ rows of `z` drawn uniformly without replacement.
///
/// With fraction 1 the bank is `z` in its original order; otherwise the sampled
/// rows are kept in ascending row order.
pub fn build_index(
    z: &DMatrix<f64>,
    subsample_fraction: f64,
    normalize_rows: bool,
    seed: u64,
) -> Result<KnnIndex> {
    let (n, m) = z.shape();
    if n == 0 || m == 0 {
        return Err(Error::Argument("cannot index an empty matrix".into()));
    }
    if !(subsample_fraction > 0.0 && subsample_fraction <= 1.0) {
        return Err(Error::Argument(format!(
            "subsample fraction {subsample_fraction} outside (0, 1]"
        )));
    }
    let keep = ((subsample_fraction * n as f64).ceil() as usize).clamp(1, n);
    let rows: Vec<usize> = if keep == n {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = sample(&mut rng, n, keep).into_vec();
        picked.sort_unstable();
        picked
    };

    let mut bank = Vec::with_capacity(rows.len() * m);
    let mut zero_rows = Vec::new();
    for &i in &rows {
        let start = bank.len();
        bank.extend(z.row(i).iter().copied());
        if normalize_rows && normalize(&mut bank[start..]).is_none() {
            zero_rows.push(i);
        }
    }
    if !zero_rows.is_empty() {
        return Err(Error::Fit(format!(
            "cannot L2-normalize zero-norm rows {zero_rows:?}"
        )));
    }
    KnnIndex::from_bank(bank, m, normalize_rows, subsample_fraction)
}
