//! Logit-space scores: MSP, energy, and ASH activation pruning.

use nalgebra::DVector;

use super::Score;
use crate::error::{Error, Result};
use crate::store::ClassifierHead;

/// `Wᵀz + b`.
pub fn logits(head: &ClassifierHead, z: &[f64]) -> Result<DVector<f64>> {
    if z.len() != head.feature_dim() {
        return Err(Error::Argument(format!(
            "embedding has {} dims, head expects {}",
            z.len(),
            head.feature_dim()
        )));
    }
    let z = DVector::from_column_slice(z);
    Ok(head.weights().tr_mul(&z) + head.bias())
}

fn check_finite(logits: &[f64]) -> Result<()> {
    if logits.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric("non-finite logit".into()))
    }
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Largest softmax probability.
pub fn msp_score(logits: &[f64]) -> Result<Score> {
    if logits.len() < 2 {
        return Err(Error::Argument(format!(
            "MSP needs at least 2 classes, got {}",
            logits.len()
        )));
    }
    check_finite(logits)?;
    let top = max_of(logits);
    let denom: f64 = logits.iter().map(|l| (l - top).exp()).sum();
    Ok(Score(1.0 / denom))
}

/// Negative free energy at temperature 1: `log Σ exp(f_c)`.
pub fn energy_score(logits: &[f64]) -> Result<Score> {
    if logits.is_empty() {
        return Err(Error::Argument("energy needs at least one logit".into()));
    }
    check_finite(logits)?;
    let top = max_of(logits);
    let sum: f64 = logits.iter().map(|l| (l - top).exp()).sum();
    Ok(Score(top + sum.ln()))
}

/// `log Σ exp(−f_c)`: the log of the sum `Σ e^{−f_c}` (same ordering, finite).
///
/// This form grows as the logits shrink, so it ranks confident samples as
/// less in-distribution. It exists only for side-by-side comparison.
pub fn printed_energy_score(logits: &[f64]) -> Result<Score> {
    let negated: Vec<f64> = logits.iter().map(|l| -l).collect();
    energy_score(&negated)
}

/// ⌊percent·n/100⌋, computed so that integral percentages round exactly.
pub fn prune_count(percent: f64, n: usize) -> usize {
    ((percent * n as f64) / 100.0).floor() as usize
}

/// Zeroes the ⌊percent·d/100⌋ smallest entries; ties go to the lower index first.
pub fn ash_prune(z: &[f64], prune_percent: f64) -> Vec<f64> {
    let count = prune_count(prune_percent, z.len()).min(z.len());
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[a].total_cmp(&z[b]).then(a.cmp(&b)));
    let mut out = z.to_vec();
    for &i in &order[..count] {
        out[i] = 0.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn head(w: &[f64], d: usize, c: usize, b: &[f64]) -> ClassifierHead {
        ClassifierHead::new(
            DMatrix::from_row_slice(d, c, w),
            DVector::from_column_slice(b),
        )
        .unwrap()
    }

    #[test]
    fn logits_hand_cases() {
        let h = head(&[1., 0., 0., 1.], 2, 2, &[0., 0.]);
        assert_eq!(logits(&h, &[1., 2.]).unwrap().as_slice(), &[1., 2.]);
        let h = head(&[1., 0., 0., 1.], 2, 2, &[1., -1.]);
        assert_eq!(logits(&h, &[0., 0.]).unwrap().as_slice(), &[1., -1.]);
        assert!(matches!(logits(&h, &[0.]), Err(Error::Argument(_))));
    }

    #[test]
    fn logits_match_double_loop() {
        let (d, c) = (5, 3);
        let w: Vec<f64> = (0..d * c).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.3).collect();
        let b = [0.1, -0.2, 0.3];
        let z: Vec<f64> = (0..d).map(|i| (i as f64).sin()).collect();
        let h = head(&w, d, c, &b);
        let got = logits(&h, &z).unwrap();
        for k in 0..c {
            let mut acc = b[k];
            for j in 0..d {
                acc += w[j * c + k] * z[j];
            }
            assert!((got[k] - acc).abs() < 1e-6);
        }
    }

    #[test]
    fn msp_hand_cases() {
        assert_eq!(msp_score(&[0., 0.]).unwrap().value(), 0.5);
        let s = msp_score(&[2f64.ln(), 0.]).unwrap().value();
        assert!((s - 2.0 / 3.0).abs() < 1e-15);
        let s = msp_score(&[1000., 0.]).unwrap().value();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(msp_score(&[1.0]).is_err());
        assert!(matches!(msp_score(&[f64::NAN, 0.]), Err(Error::Numeric(_))));
    }

    #[test]
    fn energy_hand_cases() {
        let s = energy_score(&[0.0; 10]).unwrap().value();
        assert!((s - 10f64.ln()).abs() < 1e-12);
        let s = energy_score(&[10., 0., 0.]).unwrap().value();
        assert!((s - (10f64.exp() + 2.0).ln()).abs() < 1e-12);
        assert!((s - 10.000091).abs() < 1e-6);
        assert!(matches!(energy_score(&[f64::INFINITY]), Err(Error::Numeric(_))));
        let p = printed_energy_score(&[1., 2.]).unwrap().value();
        assert!((p - ((-1f64).exp() + (-2f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn ash_hand_cases() {
        assert_eq!(ash_prune(&[1., 2., 3., 4.], 50.0), vec![0., 0., 3., 4.]);
        assert_eq!(ash_prune(&[4., 3., 2., 1.], 50.0), vec![4., 3., 0., 0.]);
        assert_eq!(ash_prune(&[1., 2., 3.], 0.0), vec![1., 2., 3.]);
        assert_eq!(ash_prune(&[7.; 4], 50.0), vec![0., 0., 7., 7.]);
        assert_eq!(prune_count(90.0, 512), 460);
        assert_eq!(prune_count(90.0, 16), 14);
        assert_eq!(prune_count(70.0, 10), 7);
    }

    proptest! {
        #[test]
        fn shift_identities(
            l in prop::collection::vec(-50.0f64..50.0, 2..12),
            kappa in -100.0f64..100.0,
        ) {
            let shifted: Vec<f64> = l.iter().map(|v| v + kappa).collect();
            let e0 = energy_score(&l).unwrap().value();
            let e1 = energy_score(&shifted).unwrap().value();
            prop_assert!((e1 - e0 - kappa).abs() < 1e-12 * (1.0 + e1.abs().max(e0.abs())));
            let m0 = msp_score(&l).unwrap().value();
            let m1 = msp_score(&shifted).unwrap().value();
            prop_assert!((m1 - m0).abs() < 1e-12);
        }

        #[test]
        fn ash_only_zeroes(
            z in prop::collection::vec(-10.0f64..10.0, 1..40),
            pct in 0.0f64..100.0,
        ) {
            let out = ash_prune(&z, pct);
            let zeroed = out.iter().zip(&z).filter(|(o, v)| **o != **v).count();
            prop_assert!(zeroed <= prune_count(pct, z.len()));
            let mut survivors: Vec<f64> = out.iter().zip(&z)
                .filter(|(o, v)| **o == **v && **v != 0.0).map(|(o, _)| *o).collect();
            let mut kept: Vec<f64> = z.clone();
            kept.sort_by(f64::total_cmp);
            let cut = prune_count(pct, z.len());
            let mut expect: Vec<f64> = kept[cut..].iter().cloned().filter(|v| *v != 0.0).collect();
            survivors.sort_by(f64::total_cmp);
            expect.sort_by(f64::total_cmp);
            prop_assert_eq!(survivors, expect);
        }
    }
}
