//! Overlap metric, dataset-level statistics and cross-validation folds.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{CksError, Result};
use crate::rng::Rng64;
use crate::types::Mask;

/// Dice-Sorensen coefficient `2|A & B| / (|A| + |B|)`; two empty masks agree
/// perfectly (1.0).
pub fn dsc(a: &Mask, b: &Mask) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(CksError::ShapeMismatch {
            expected: a.shape(),
            found: b.shape(),
        });
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    Zip::from(a.labels()).and(b.labels()).for_each(|&x, &y| {
        inter += usize::from(x & y);
        total += usize::from(x) + usize::from(y);
    });
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub max: f64,
    pub min: f64,
}

impl Aggregate {
    /// Statistics of a non-empty sample. Two passes: mean first, then the
    /// centred sum of squares.
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(CksError::EmptyDataset("no values to aggregate".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Aggregate {
            mean,
            std: var.sqrt(),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub id: String,
    pub dsc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub phase_tag: String,
    pub per_item: Vec<ItemScore>,
    pub aggregate: Aggregate,
    pub fallback_count: usize,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Scores predictions against ground truth; items are named by index.
pub fn evaluate_set(preds: &[Mask], truths: &[Mask], tag: &str) -> Result<EvalReport> {
    let ids: Vec<String> = (0..preds.len()).map(|i| i.to_string()).collect();
    evaluate_named(&ids, preds, truths, tag)
}

/// As [`evaluate_set`] with caller-provided item ids.
pub fn evaluate_named(ids: &[String], preds: &[Mask], truths: &[Mask], tag: &str) -> Result<EvalReport> {
    if preds.len() != truths.len() || ids.len() != preds.len() {
        return Err(CksError::LengthMismatch {
            predictions: preds.len(),
            truths: truths.len(),
        });
    }
    let per_item = ids
        .iter()
        .zip(preds.iter().zip(truths))
        .map(|(id, (p, t))| {
            Ok(ItemScore {
                id: id.clone(),
                dsc: dsc(p, t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = per_item.iter().map(|s| s.dsc).collect();
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        phase_tag: tag.to_string(),
        aggregate: Aggregate::of(&values)?,
        per_item,
        fallback_count: 0,
    })
}

/// Splits item indices `0..n` into `k` folds after a seeded shuffle.
///
/// Returns `(train_ids, test_ids)` per fold; test folds are contiguous runs of
/// the shuffled order, the first `n % k` of them one item larger. Ids inside
/// each list are sorted.
pub fn split_folds(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 || k > n {
        return Err(CksError::BadFoldCount { k, items: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng64::new(seed).shuffle(&mut order);
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut test = order[start..start + len].to_vec();
        let mut train: Vec<usize> = order[..start].iter().chain(&order[start + len..]).copied().collect();
        test.sort_unstable();
        train.sort_unstable();
        folds.push((train, test));
        start += len;
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from(bits: &[u8], w: usize) -> Mask {
        Mask::from_fn(bits.len() / w, w, |(r, c)| bits[r * w + c] == 1).unwrap()
    }

    #[test]
    fn dsc_hand_cases() {
        let a = mask_from(&[1, 1, 1, 1, 0, 0], 3);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        let b = mask_from(&[0, 0, 0, 0, 1, 1], 3);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);
        // |A| = 4, |B| = 4, two shared pixels.
        let a = mask_from(&[1, 1, 1, 1, 0, 0, 0, 0], 4);
        let b = mask_from(&[0, 0, 1, 1, 1, 1, 0, 0], 4);
        assert_eq!(dsc(&a, &b).unwrap(), 0.5);
        let z = Mask::zeros(2, 2).unwrap();
        assert_eq!(dsc(&z, &z).unwrap(), 1.0);
        assert!(matches!(
            dsc(&z, &Mask::zeros(2, 3).unwrap()),
            Err(CksError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn aggregate_hand_statistics() {
        let one = Mask::from_fn(2, 2, |_| true).unwrap();
        let half_a = mask_from(&[1, 1, 1, 1, 0, 0, 0, 0], 4);
        let half_b = mask_from(&[0, 0, 1, 1, 1, 1, 0, 0], 4);
        let r = evaluate_set(&[one.clone(), half_a], &[one, half_b], "x").unwrap();
        assert_eq!(r.aggregate.mean, 0.75);
        assert_eq!(r.aggregate.std, 0.25);
        assert_eq!(r.aggregate.max, 1.0);
        assert_eq!(r.aggregate.min, 0.5);
    }

    #[test]
    fn perfect_predictions() {
        let m = mask_from(&[0, 1, 1, 0], 2);
        let r = evaluate_set(&vec![m.clone(); 5], &vec![m; 5], "perfect").unwrap();
        assert_eq!(
            r.aggregate,
            Aggregate {
                mean: 1.0,
                std: 0.0,
                max: 1.0,
                min: 1.0
            }
        );
    }

    #[test]
    fn length_mismatch_is_reported() {
        let m = Mask::zeros(2, 2).unwrap();
        assert!(matches!(
            evaluate_set(std::slice::from_ref(&m), &[m.clone(), m.clone()], "x"),
            Err(CksError::LengthMismatch {
                predictions: 1,
                truths: 2
            })
        ));
    }

    #[test]
    fn report_json_round_trip() {
        let a = mask_from(&[1, 0, 1, 1], 2);
        let b = mask_from(&[1, 1, 0, 1], 2);
        let r = evaluate_set(&[a.clone(), b.clone()], &[b, a], "val").unwrap();
        let text = serde_json::to_string(&r).unwrap();
        let back: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn folds_of_82_items() {
        let folds = split_folds(82, 4, 3).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|(_, t)| t.len()).collect();
        assert_eq!(sizes, vec![21, 21, 20, 20]);
        assert_eq!(folds, split_folds(82, 4, 3).unwrap());
        assert!(matches!(split_folds(3, 4, 0), Err(CksError::BadFoldCount { .. })));
        assert!(matches!(split_folds(10, 1, 0), Err(CksError::BadFoldCount { .. })));
    }

    proptest! {
        #[test]
        fn dsc_symmetric_and_bounded(bits in prop::collection::vec(0u8..2, 32)) {
            let a = mask_from(&bits[..16], 4);
            let b = mask_from(&bits[16..], 4);
            let ab = dsc(&a, &b).unwrap();
            prop_assert_eq!(ab, dsc(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab == 1.0, a == b);
        }

        #[test]
        fn aggregate_matches_single_pass(values in prop::collection::vec(0.0f64..=1.0, 1..40)) {
            let agg = Aggregate::of(&values).unwrap();
            // Welford's single-pass recurrence as an independent recomputation.
            let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
            for &v in &values {
                n += 1.0;
                let d = v - mean;
                mean += d / n;
                m2 += d * (v - mean);
            }
            prop_assert!((agg.mean - mean).abs() < 1e-12);
            prop_assert!((agg.std - (m2 / n).sqrt()).abs() < 1e-12);
        }

        #[test]
        fn folds_partition(n in 2usize..60, k_off in 0usize..10, seed in any::<u64>()) {
            let k = 2 + k_off % (n - 1);
            let folds = split_folds(n, k, seed).unwrap();
            let mut seen = vec![0; n];
            for (train, test) in &folds {
                prop_assert_eq!(train.len() + test.len(), n);
                for &i in test { seen[i] += 1; }
                prop_assert!(train.iter().all(|i| !test.contains(i)));
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            let sizes: Vec<usize> = folds.iter().map(|(_, t)| t.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}
