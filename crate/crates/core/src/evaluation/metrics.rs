//! Retrieval, zero-shot scoring, calibration and MSP-based OOD metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, DenseMatrix};
use crate::scalar::Scalar;

/// Rows of a probability matrix must sum to 1 within this tolerance (in `f64`).
pub const PROBABILITY_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_ECE_BINS: usize = 10;

/// Index of the largest entry, lowest index on ties.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Top-1 recall in both directions for paired rows of `f` and `g`.
pub fn recall_at_1<T: Scalar>(f: &DenseMatrix<T>, g: &DenseMatrix<T>) -> Result<(f64, f64)> {
    if f.shape() != g.shape() {
        return Err(Error::ShapeMismatch(format!(
            "recall needs paired rows, got {:?} and {:?}",
            f.shape(),
            g.shape()
        )));
    }
    let n = f.rows();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let s = f.matmul_t(g)?;
    let img2txt = (0..n).filter(|&i| argmax(s.row(i)) == i).count();
    let mut txt2img = 0;
    let mut col = vec![T::zero(); n];
    for j in 0..n {
        for (i, c) in col.iter_mut().enumerate() {
            *c = s.get(i, j);
        }
        if argmax(&col) == j {
            txt2img += 1;
        }
    }
    Ok((img2txt as f64 / n as f64, txt2img as f64 / n as f64))
}

/// Nearest-label predictions and tempered softmax probabilities.
pub fn zero_shot_classify<T: Scalar>(
    image_embeds: &DenseMatrix<T>,
    label_embeds: &DenseMatrix<T>,
    tau: T,
) -> Result<(Vec<usize>, DenseMatrix<T>)> {
    if image_embeds.cols() != label_embeds.cols() {
        return Err(Error::ShapeMismatch(format!(
            "image embeddings have {} dims, label embeddings {}",
            image_embeds.cols(),
            label_embeds.cols()
        )));
    }
    let s = image_embeds.matmul_t(label_embeds)?;
    let preds = s.row_iter().map(argmax).collect();
    Ok((preds, softmax_rows(&s, tau)?))
}

fn check_probabilities<T: Scalar>(probs: &DenseMatrix<T>, labels: &[usize]) -> Result<()> {
    if probs.rows() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} probability rows for {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (i, row) in probs.row_iter().enumerate() {
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > T::tolerance(PROBABILITY_TOLERANCE) || row.iter().any(|&v| v < T::zero()) {
            return Err(Error::NotAProbability { row: i, sum });
        }
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= probs.cols()) {
        return Err(Error::LengthMismatch(format!(
            "label {y} outside {} classes",
            probs.cols()
        )));
    }
    Ok(())
}

/// Mean negative log-probability of the true class.
pub fn nll<T: Scalar>(probs: &DenseMatrix<T>, labels: &[usize]) -> Result<f64> {
    check_probabilities(probs, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs.get(i, y).as_f64().ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Mean squared distance between probability rows and one-hot labels.
pub fn brier<T: Scalar>(probs: &DenseMatrix<T>, labels: &[usize]) -> Result<f64> {
    check_probabilities(probs, labels)?;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        for (c, &p) in probs.row(i).iter().enumerate() {
            let d = p.as_f64() - if c == y { 1.0 } else { 0.0 };
            total += d * d;
        }
    }
    Ok(total / labels.len() as f64)
}

/// Expected calibration error over `bins` equal-width confidence bins. A confidence
/// `c` falls in bin `min(⌊c·bins⌋, bins−1)`.
pub fn ece<T: Scalar>(probs: &DenseMatrix<T>, labels: &[usize], bins: usize) -> Result<f64> {
    check_probabilities(probs, labels)?;
    if bins == 0 {
        return Err(Error::InvalidConfig("ece needs at least one bin".into()));
    }
    let mut count = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    let mut conf = vec![0.0f64; bins];
    for (i, &y) in labels.iter().enumerate() {
        let row = probs.row(i);
        let pred = argmax(row);
        let c = row[pred].as_f64();
        let b = ((c * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += c;
        if pred == y {
            correct[b] += 1;
        }
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        if count[b] > 0 {
            let nb = count[b] as f64;
            total += (nb / n) * (correct[b] as f64 / nb - conf[b] / nb).abs();
        }
    }
    Ok(total)
}

/// Maximum softmax probability of each row.
pub fn max_probabilities<T: Scalar>(probs: &DenseMatrix<T>) -> Vec<f64> {
    probs.row_iter().map(|r| r[argmax(r)].as_f64()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodMetrics {
    pub auroc: f64,
    pub aupr: f64,
    pub fpr95: f64,
}

/// Detection metrics with in-distribution as the positive class and higher scores
/// meaning "more in-distribution".
///
/// AUROC is the Mann–Whitney statistic with ties counted as one half. AUPR is average
/// precision over distinct thresholds. FPR95 is the false-positive rate at the highest
/// threshold whose true-positive rate reaches 95%.
pub fn msp_ood_metrics(in_scores: &[f64], out_scores: &[f64]) -> Result<OodMetrics> {
    if in_scores.is_empty() || out_scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    let (n_in, n_out) = (in_scores.len(), out_scores.len());
    let mut all: Vec<(f64, bool)> = in_scores
        .iter()
        .map(|&s| (s, true))
        .chain(out_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));

    // Walk thresholds from high to low, one group of tied scores at a time.
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut fpr95 = None;
    let mut auc_pairs = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut group_pos, mut group_neg) = (0usize, 0usize);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                group_pos += 1;
            } else {
                group_neg += 1;
            }
            j += 1;
        }
        // positives in this group beat every negative below it and tie with the group's negatives
        auc_pairs += group_pos as f64 * (n_out - fp - group_neg) as f64 + 0.5 * (group_pos * group_neg) as f64;
        tp += group_pos;
        fp += group_neg;
        let recall = tp as f64 / n_in as f64;
        if group_pos > 0 {
            ap += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
            prev_recall = recall;
        }
        if fpr95.is_none() && recall >= 0.95 {
            fpr95 = Some(fp as f64 / n_out as f64);
        }
        i = j;
    }
    Ok(OodMetrics {
        auroc: auc_pairs / (n_in * n_out) as f64,
        aupr: ap,
        fpr95: fpr95.expect("recall reaches 1 at the lowest threshold"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    type M = DenseMatrix<f64>;

    #[test]
    fn recall_examples() {
        let i4 = M::identity(4);
        assert_eq!(recall_at_1(&i4, &i4).unwrap(), (1.0, 1.0));
        let shifted = M::from_fn(4, 4, |i, j| if j == (i + 1) % 4 { 1.0 } else { 0.0 });
        assert_eq!(recall_at_1(&i4, &shifted).unwrap(), (0.0, 0.0));
        let one = M::from_rows(&[[0.6, 0.8]]).unwrap();
        assert_eq!(recall_at_1(&one, &one).unwrap(), (1.0, 1.0));
        assert!(recall_at_1(&i4, &M::identity(3)).is_err());
    }

    #[test]
    fn zero_shot_examples() {
        let labels = M::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let imgs = M::from_rows(&[[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let (pred, _) = zero_shot_classify(&imgs, &labels, 0.07).unwrap();
        assert_eq!(pred, vec![1, 0, 1]);

        let same = M::from_rows(&[[0.6, 0.8], [0.6, 0.8], [0.6, 0.8]]).unwrap();
        let (pred, _) = zero_shot_classify(&imgs, &same, 0.07).unwrap();
        assert_eq!(pred, vec![0, 0, 0]);

        // similarities (2, 0) at τ = 1
        let img = M::from_rows(&[[2.0, 0.0]]).unwrap();
        let (_, p) = zero_shot_classify(&img, &labels, 1.0).unwrap();
        let e = (-2.0f64).exp();
        assert!((p.get(0, 0) - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p.get(0, 1) - e / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn calibration_examples() {
        let certain = M::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(nll(&certain, &[0, 2]).unwrap(), 0.0);
        assert_eq!(brier(&certain, &[0, 2]).unwrap(), 0.0);
        assert_eq!(ece(&certain, &[0, 2], 10).unwrap(), 0.0);

        let uniform = M::from_fn(4, 5, |_, _| 0.2);
        assert!((nll(&uniform, &[0, 1, 2, 3]).unwrap() - 5f64.ln()).abs() < 1e-12);
        let half = M::from_fn(2, 2, |_, _| 0.5);
        assert_eq!(brier(&half, &[0, 1]).unwrap(), 0.5);

        let p = M::from_rows(&[[0.8, 0.2], [0.8, 0.2], [0.8, 0.2], [0.8, 0.2]]).unwrap();
        assert!((ece(&p, &[0, 0, 1, 1], 10).unwrap() - 0.3).abs() < 1e-12);

        let bad = M::from_rows(&[[0.5, 0.6]]).unwrap();
        assert!(matches!(nll(&bad, &[0]), Err(Error::NotAProbability { row: 0, .. })));
        assert!(matches!(ece(&bad, &[0], 10), Err(Error::NotAProbability { .. })));
    }

    #[test]
    fn ece_zero_when_bins_calibrated() {
        // bin 0.7: 10 rows with conf 0.7, 7 correct; bin 0.9: 10 rows, 9 correct
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for k in 0..10 {
            rows.push([0.7, 0.3]);
            labels.push(usize::from(k >= 7));
        }
        for k in 0..10 {
            rows.push([0.1, 0.9]);
            labels.push(usize::from(k < 9));
        }
        let p = M::from_rows(&rows).unwrap();
        assert!(ece(&p, &labels, 10).unwrap().abs() < 1e-15);
    }

    #[test]
    fn ood_examples() {
        let m = msp_ood_metrics(&[0.9, 0.8, 0.7], &[0.5, 0.2]).unwrap();
        assert_eq!(
            m,
            OodMetrics {
                auroc: 1.0,
                aupr: 1.0,
                fpr95: 0.0
            }
        );

        let same = [0.3, 0.6, 0.6, 0.9];
        assert_eq!(msp_ood_metrics(&same, &same).unwrap().auroc, 0.5);

        let m = msp_ood_metrics(&[0.9, 0.8], &[0.85, 0.1]).unwrap();
        assert_eq!(m.auroc, 0.75);
        // ranking: 0.9 in, 0.85 out, 0.8 in, 0.1 out
        assert!((m.aupr - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(m.fpr95, 0.5);

        assert!(matches!(msp_ood_metrics(&[], &[0.1]), Err(Error::EmptyScores)));
    }

    proptest! {
        #[test]
        fn auroc_swaps_to_complement(a in prop::collection::vec(0u32..1000, 1..20), b in prop::collection::vec(1000u32..2000, 1..20)) {
            // disjoint ranges keep the inputs tie-free across groups; shuffle by interleaving
            let xs: Vec<f64> = a.iter().map(|&v| v as f64 + 0.5 * (v % 3) as f64 * 1e-3).collect();
            let ys: Vec<f64> = b.iter().map(|&v| (v as f64 * 7.3) % 1500.0 + 0.25).collect();
            let tie_free = xs.iter().all(|x| ys.iter().all(|y| x != y));
            prop_assume!(tie_free);
            let s = msp_ood_metrics(&xs, &ys).unwrap().auroc + msp_ood_metrics(&ys, &xs).unwrap().auroc;
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn recall_is_symmetric(seed in any::<u64>(), n in 1usize..8) {
            let mut rng = crate::numerics::RngStream::new(seed);
            let f = M::new(n, 3, rng.normal_vec(3 * n, 1.0)).unwrap();
            let g = M::new(n, 3, rng.normal_vec(3 * n, 1.0)).unwrap();
            prop_assert_eq!(recall_at_1(&f, &g).unwrap().0, recall_at_1(&g, &f).unwrap().1);
        }

        #[test]
        fn zero_shot_argmax_ignores_tau(seed in any::<u64>(), tau in 0.01f64..10.0) {
            let mut rng = crate::numerics::RngStream::new(seed);
            let imgs = M::new(5, 3, rng.normal_vec(15, 1.0)).unwrap();
            let labels = M::new(4, 3, rng.normal_vec(12, 1.0)).unwrap();
            let (a, _) = zero_shot_classify(&imgs, &labels, tau).unwrap();
            let (b, _) = zero_shot_classify(&imgs, &labels, 1.0).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
