//! DICE weight sparsification from the contribution matrix `V = W ⊙ E[h]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::logit::{energy_score, logits, prune_count};
use super::Score;
use crate::error::{Error, Result};
use crate::linalg::column_means;
use crate::store::ClassifierHead;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// One ranking over all d·C entries.
    Global,
    /// An independent ranking inside each class column.
    PerColumn,
}

/// Binary d×C mask; `true` keeps the weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionMask {
    mask: DMatrix<bool>,
    p: f64,
    mode: MaskMode,
}

/// `V[j,c] = W[j,c] · mean_h[j]`.
pub fn contribution_matrix(weights: &DMatrix<f64>, mean_h: &DVector<f64>) -> Result<DMatrix<f64>> {
    if weights.nrows() != mean_h.len() {
        return Err(Error::Argument(format!(
            "mean embedding has {} dims, head expects {}",
            mean_h.len(),
            weights.nrows()
        )));
    }
    let mut v = weights.clone();
    for (j, mut row) in v.row_iter_mut().enumerate() {
        row *= mean_h[j];
    }
    Ok(v)
}

fn check_p(p: f64) -> Result<()> {
    if (0.0..100.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Argument(format!("sparsity p = {p} outside [0, 100)")))
    }
}

impl ContributionMask {
    /// Zeroes the ⌊p·d·C/100⌋ smallest entries of `v`; ties by value, then row-major index.
    pub fn global(v: &DMatrix<f64>, p: f64) -> Result<Self> {
        check_p(p)?;
        let (d, c) = v.shape();
        let mut order: Vec<(usize, usize)> = (0..d)
            .flat_map(|j| (0..c).map(move |k| (j, k)))
            .collect();
        // stable sort keeps the row-major order among equal values
        order.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
        let mut mask = DMatrix::from_element(d, c, true);
        for &ix in &order[..prune_count(p, d * c)] {
            mask[ix] = false;
        }
        Ok(ContributionMask {
            mask,
            p,
            mode: MaskMode::Global,
        })
    }

    /// Zeroes the ⌊p·d/100⌋ smallest entries of each column; ties by value, then row.
    pub fn per_column(v: &DMatrix<f64>, p: f64) -> Result<Self> {
        check_p(p)?;
        let (d, c) = v.shape();
        let drop = prune_count(p, d);
        let mut mask = DMatrix::from_element(d, c, true);
        for k in 0..c {
            let mut rows: Vec<usize> = (0..d).collect();
            rows.sort_by(|&a, &b| v[(a, k)].total_cmp(&v[(b, k)]));
            for &j in &rows[..drop] {
                mask[(j, k)] = false;
            }
        }
        Ok(ContributionMask {
            mask,
            p,
            mode: MaskMode::PerColumn,
        })
    }

    pub fn from_parts(mask: DMatrix<bool>, p: f64, mode: MaskMode) -> Result<Self> {
        check_p(p)?;
        Ok(ContributionMask { mask, p, mode })
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn ones(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn column_ones(&self, c: usize) -> usize {
        self.mask.column(c).iter().filter(|&&b| b).count()
    }

    /// Columns with every weight masked out.
    pub fn zeroed_columns(&self) -> Vec<usize> {
        (0..self.mask.ncols())
            .filter(|&c| self.column_ones(c) == 0)
            .collect()
    }

    pub fn apply(&self, weights: &DMatrix<f64>) -> DMatrix<f64> {
        weights.zip_map(&self.mask, |w, keep| if keep { w } else { 0.0 })
    }

    /// 1.0 for kept weights, 0.0 otherwise.
    pub fn to_f64(&self) -> DMatrix<f64> {
        self.mask.map(|b| if b { 1.0 } else { 0.0 })
    }
}

/// A head with DICE-masked weights and the original bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceDetector {
    head: ClassifierHead,
    mask: ContributionMask,
}

impl DiceDetector {
    pub fn fit(z_id: &DMatrix<f64>, head: &ClassifierHead, p: f64, mode: MaskMode) -> Result<Self> {
        if z_id.nrows() == 0 {
            return Err(Error::Fit("DICE needs at least one ID training row".into()));
        }
        let v = contribution_matrix(head.weights(), &column_means(z_id))?;
        let mask = match mode {
            MaskMode::Global => ContributionMask::global(&v, p)?,
            MaskMode::PerColumn => ContributionMask::per_column(&v, p)?,
        };
        let zeroed = mask.zeroed_columns();
        if !zeroed.is_empty() {
            log::warn!("DICE mask zeroes every weight of class columns {zeroed:?}");
        }
        Self::from_mask(head, mask)
    }

    /// Applies `mask` to `head`; idempotent on an already-masked head.
    pub fn from_mask(head: &ClassifierHead, mask: ContributionMask) -> Result<Self> {
        if mask.mask().shape() != head.weights().shape() {
            return Err(Error::Argument("mask shape differs from head weights".into()));
        }
        let masked = ClassifierHead::new(mask.apply(head.weights()), head.bias().clone())?;
        Ok(DiceDetector { head: masked, mask })
    }

    /// Head with `W ⊙ M`.
    pub fn masked_head(&self) -> &ClassifierHead {
        &self.head
    }

    pub fn mask(&self) -> &ContributionMask {
        &self.mask
    }

    pub fn score(&self, z: &[f64]) -> Result<Score> {
        energy_score(logits(&self.head, z)?.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hand_head() -> ClassifierHead {
        ClassifierHead::new(
            DMatrix::from_row_slice(2, 2, &[1., -1., 2., 0.5]),
            DVector::zeros(2),
        )
        .unwrap()
    }

    // a single ID row of ones gives mean h = (1, 1)
    fn ones_row() -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 2, &[1., 1.])
    }

    #[test]
    fn global_mask_zeroes_a_column() {
        let det = DiceDetector::fit(&ones_row(), &hand_head(), 50.0, MaskMode::Global).unwrap();
        assert_eq!(
            det.masked_head().weights(),
            &DMatrix::from_row_slice(2, 2, &[1., 0., 2., 0.])
        );
        assert_eq!(det.mask().zeroed_columns(), vec![1]);
        let s = det.score(&[1., 1.]).unwrap().value();
        assert!((s - (3f64.exp() + 1.0).ln()).abs() < 1e-12);
        assert!((s - 3.048587).abs() < 1e-6);
    }

    #[test]
    fn per_column_mask_keeps_every_class() {
        let det = DiceDetector::fit(&ones_row(), &hand_head(), 50.0, MaskMode::PerColumn).unwrap();
        assert_eq!(
            det.masked_head().weights(),
            &DMatrix::from_row_slice(2, 2, &[0., 0., 2., 0.5])
        );
        assert!(det.mask().zeroed_columns().is_empty());
        let s = det.score(&[1., 1.]).unwrap().value();
        assert!((s - (2f64.exp() + 0.5f64.exp()).ln()).abs() < 1e-12);
        assert!((s - 2.201413).abs() < 1e-6);
    }

    #[test]
    fn zero_mean_coordinate_zeroes_contribution_row() {
        let v = contribution_matrix(
            &DMatrix::from_row_slice(2, 2, &[3., -4., 5., 6.]),
            &DVector::from_column_slice(&[1., 0.]),
        )
        .unwrap();
        assert_eq!(v.row(1).iter().copied().collect::<Vec<_>>(), vec![0., 0.]);
    }

    #[test]
    fn p_zero_matches_energy_bitwise() {
        let h = hand_head();
        for mode in [MaskMode::Global, MaskMode::PerColumn] {
            let det = DiceDetector::fit(&ones_row(), &h, 0.0, mode).unwrap();
            let z = [0.3, -1.7];
            let plain = energy_score(logits(&h, &z).unwrap().as_slice()).unwrap();
            assert_eq!(det.score(&z).unwrap(), plain);
        }
    }

    #[test]
    fn rejects_out_of_range_p() {
        let v = DMatrix::from_element(2, 2, 1.0);
        assert!(ContributionMask::global(&v, 100.0).is_err());
        assert!(ContributionMask::per_column(&v, -1.0).is_err());
    }

    #[test]
    fn wide_column_cardinality() {
        let v = DMatrix::from_fn(512, 3, |j, c| ((j * 31 + c * 7) % 97) as f64);
        let m = ContributionMask::per_column(&v, 90.0).unwrap();
        for c in 0..3 {
            assert_eq!(m.column_ones(c), 52);
        }
    }

    proptest! {
        #[test]
        fn cardinalities(
            d in 1usize..40,
            c in 1usize..12,
            tenth in 0usize..10,
            seed in any::<u64>(),
        ) {
            let p = (tenth * 10) as f64;
            let v = DMatrix::from_fn(d, c, |j, k| {
                // coarse values so ties occur
                ((seed.wrapping_mul(31).wrapping_add((j * 13 + k * 7) as u64) % 5) as f64) - 2.0
            });
            let g = ContributionMask::global(&v, p).unwrap();
            prop_assert_eq!(g.ones(), d * c - (p * (d * c) as f64 / 100.0).floor() as usize);
            let col = ContributionMask::per_column(&v, p).unwrap();
            for k in 0..c {
                prop_assert_eq!(col.column_ones(k), d - (p * d as f64 / 100.0).floor() as usize);
                prop_assert!(col.column_ones(k) >= 1);
            }
        }
    }
}
