//! Score-set metrics. ID is the higher-scoring class throughout.

use crate::error::{Error, Result};

pub const DEFAULT_TPR: f64 = 0.95;

fn check_side(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Argument(format!("{name} scores are empty")));
    }
    if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "{name} score {i} is not finite ({})",
            scores[i]
        )));
    }
    Ok(())
}

/// P(id > ood) + ½·P(id = ood), by mid-rank summation.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_side("ID", id_scores)?;
    check_side("OOD", ood_scores)?;
    let (n_id, n_ood) = (id_scores.len(), ood_scores.len());
    let mut pooled: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    // twice the ID rank sum keeps every mid-rank integral
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        // ranks i+1..=j+1 share the mid-rank (i+j+2)/2
        let twice_mid = (i + j + 2) as u128;
        let ids = pooled[i..=j].iter().filter(|p| p.1).count() as u128;
        twice_rank_sum += twice_mid * ids;
        i = j + 1;
    }
    let n_id_u = n_id as u128;
    let twice_u = twice_rank_sum - n_id_u * (n_id_u + 1);
    Ok(twice_u as f64 / (2.0 * n_id as f64 * n_ood as f64))
}

/// The ⌈(1−tpr)·N⌉-th smallest score, so at least `tpr` of `scores` are ≥ λ.
pub fn threshold_at_tpr(scores: &[f64], tpr: f64) -> Result<f64> {
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(Error::Argument(format!("tpr = {tpr} outside (0, 1]")));
    }
    check_side("ID", scores)?;
    let n = scores.len();
    // (1 − 0.95)·100 evaluates to 5.000000000000004
    let raw = (1.0 - tpr) * n as f64;
    let rank = ((raw - 1e-9).ceil().max(1.0) as usize).min(n);
    let mut sorted = scores.to_vec();
    let (_, lambda, _) = sorted.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*lambda)
}

/// Fraction of `ood_scores` at or above `lambda`.
pub fn fpr_at_threshold(ood_scores: &[f64], lambda: f64) -> Result<f64> {
    if ood_scores.is_empty() {
        return Err(Error::Argument("OOD scores are empty".into()));
    }
    let hits = ood_scores.iter().filter(|&&s| s >= lambda).count();
    Ok(hits as f64 / ood_scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairs(id: &[f64], ood: &[f64]) -> f64 {
        let mut acc = 0.0;
        for a in id {
            for b in ood {
                acc += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        acc / (id.len() * ood.len()) as f64
    }

    #[test]
    fn auroc_hand_cases() {
        assert_eq!(auroc(&[1., 2., 3.], &[0., 0.5]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.], &[1.]).unwrap(), 0.5);
        assert_eq!(auroc(&[1., 3.], &[2.]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.], &[1.]).unwrap(), 0.0);
        assert!(matches!(auroc(&[], &[1.]), Err(Error::Argument(_))));
        assert!(matches!(auroc(&[f64::NAN], &[1.]), Err(Error::Numeric(_))));
    }

    #[test]
    fn threshold_hand_cases() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(threshold_at_tpr(&s, 0.95).unwrap(), 5.0);
        assert_eq!(s.iter().filter(|&&v| v >= 5.0).count(), 96);
        assert_eq!(threshold_at_tpr(&[2.0; 7], 0.95).unwrap(), 2.0);
        assert_eq!(threshold_at_tpr(&[3., 1., 2.], 1.0).unwrap(), 1.0);
        assert!(threshold_at_tpr(&s, 0.0).is_err());
        assert!(threshold_at_tpr(&s, 1.5).is_err());
        assert!(threshold_at_tpr(&[], 0.9).is_err());
    }

    #[test]
    fn fpr_hand_cases() {
        assert_eq!(fpr_at_threshold(&[1., 2.], 3.0).unwrap(), 0.0);
        assert!((fpr_at_threshold(&[4., 5., 6.], 5.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(fpr_at_threshold(&[4., 5.], f64::NEG_INFINITY).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn auroc_matches_pairs_and_is_symmetric(
            id in prop::collection::vec(0u8..12, 1..60),
            ood in prop::collection::vec(0u8..12, 1..60),
        ) {
            let id: Vec<f64> = id.into_iter().map(f64::from).collect();
            let ood: Vec<f64> = ood.into_iter().map(f64::from).collect();
            let a = auroc(&id, &ood).unwrap();
            prop_assert!((a - pairs(&id, &ood)).abs() < 1e-12);
            prop_assert_eq!(a + auroc(&ood, &id).unwrap(), 1.0);
            // strictly increasing transform
            let f = |v: &f64| (v * 0.3).exp() - 7.0;
            let a2 = auroc(&id.iter().map(f).collect::<Vec<_>>(), &ood.iter().map(f).collect::<Vec<_>>()).unwrap();
            prop_assert_eq!(a, a2);
        }

        #[test]
        fn threshold_guarantee(
            s in prop::collection::vec(0u8..20, 1..300),
            tpr in 0.01f64..=1.0,
        ) {
            let s: Vec<f64> = s.into_iter().map(f64::from).collect();
            let lambda = threshold_at_tpr(&s, tpr).unwrap();
            let kept = s.iter().filter(|&&v| v >= lambda).count() as f64;
            prop_assert!(kept >= tpr * s.len() as f64 - 1e-9);
        }
    }
}
