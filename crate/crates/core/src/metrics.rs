//! Losses and evaluation metrics.
//!
//! Label maps are `u8` slices in row-major order. [`UNLABELED`] marks pixels
//! that carry no ground truth; they are skipped by the losses and by Dice.

use std::fmt::Write as _;

use crate::engine::{Loss, Real, Tensor};
use crate::error::{Error, Result};

/// Sentinel for pixels without a label.
pub const UNLABELED: u8 = 255;

/// Probabilities are clamped from below before taking the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-label loss weights `w_l = (sum_k f_k / f_l)^0.5`.
///
/// Labels that never occur get weight 0 and drop out of the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelWeights {
    pub weights: Vec<f64>,
    pub frequencies: Vec<u64>,
}

impl LabelWeights {
    pub fn uniform(n: usize) -> Self {
        LabelWeights {
            weights: vec![1.0; n],
            frequencies: vec![1; n],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        LabelWeights {
            weights: self.weights.iter().map(|w| w * factor).collect(),
            frequencies: self.frequencies.clone(),
        }
    }
}

pub fn label_weights(frequencies: &[u64]) -> Result<LabelWeights> {
    let total: u64 = frequencies.iter().sum();
    if total == 0 {
        return Err(Error::Param("label frequencies are all zero".into()));
    }
    let weights = frequencies
        .iter()
        .map(|&f| {
            if f == 0 {
                0.0
            } else {
                (total as f64 / f as f64).sqrt()
            }
        })
        .collect();
    Ok(LabelWeights {
        weights,
        frequencies: frequencies.to_vec(),
    })
}

/// Count label occurrences, ignoring [`UNLABELED`].
pub fn label_frequencies<'a>(maps: impl IntoIterator<Item = &'a [u8]>, n_labels: usize) -> Result<Vec<u64>> {
    let mut f = vec![0u64; n_labels];
    for map in maps {
        for &l in map {
            if l == UNLABELED {
                continue;
            }
            *f.get_mut(l as usize)
                .ok_or_else(|| Error::Data(format!("label {l} outside [0, {n_labels})")))? += 1;
        }
    }
    Ok(f)
}

fn pixel_coordinate(index: usize, spatial: &[usize]) -> String {
    let mut rem = index;
    let mut coords = vec![0; spatial.len()];
    for (i, &d) in spatial.iter().enumerate().rev() {
        coords[i] = rem % d;
        rem /= d;
    }
    format!("{coords:?}")
}

/// Weighted cross-entropy summed over pixels and averaged over the batch:
/// `mean_b sum_x -w_{l(x)} ln p_{l(x)}(x)`.
///
/// `probs` is `[batch, labels, spatial...]`; `labels` holds one map per batch
/// item, concatenated.
pub fn weighted_ce_seg<T: Real>(probs: &Tensor<T>, labels: &[u8], weights: &LabelWeights) -> Result<Loss<T>> {
    let (b, c, s) = (probs.batch(), probs.channels(), probs.spatial_size());
    if labels.len() != b * s {
        return Err(Error::shape(
            "weighted_ce_seg",
            format!("{} labels for probabilities {:?}", labels.len(), probs.shape()),
        ));
    }
    if weights.len() != c {
        return Err(Error::shape(
            "weighted_ce_seg",
            format!("{} label weights for {c} channels", weights.len()),
        ));
    }
    let p = probs.data();
    let mut grad = vec![T::zero(); p.len()];
    let mut total = 0.0f64;
    let inv_b = 1.0 / b as f64;
    for bi in 0..b {
        for x in 0..s {
            let l = labels[bi * s + x];
            if l == UNLABELED {
                continue;
            }
            if l as usize >= c {
                return Err(Error::Data(format!(
                    "label {l} outside [0, {c}) at batch {bi}, pixel {}",
                    pixel_coordinate(x, probs.spatial())
                )));
            }
            let w = weights.weights[l as usize];
            if w == 0.0 {
                continue;
            }
            let i = (bi * c + l as usize) * s + x;
            let pv = p[i].to_f64c();
            if pv >= PROB_FLOOR {
                total -= w * pv.ln();
                grad[i] = T::from_f64c(-w * inv_b / pv);
            } else {
                total -= w * PROB_FLOOR.ln();
            }
        }
    }
    Ok(Loss {
        value: total * inv_b,
        grad: Tensor::new(probs.shape().to_vec(), grad)?,
    })
}

/// Classification form: one `-w_l ln p_l` term per sample, averaged over the batch.
pub fn weighted_ce_cls<T: Real>(probs: &Tensor<T>, labels: &[u8], weights: &LabelWeights) -> Result<Loss<T>> {
    if probs.shape().len() != 2 {
        return Err(Error::shape(
            "weighted_ce_cls",
            format!("probabilities {:?} must be [batch, classes]", probs.shape()),
        ));
    }
    let (b, c) = (probs.batch(), probs.channels());
    if labels.len() != b {
        return Err(Error::shape("weighted_ce_cls", format!("{} labels for batch {b}", labels.len())));
    }
    if weights.len() != c {
        return Err(Error::shape(
            "weighted_ce_cls",
            format!("{} label weights for {c} classes", weights.len()),
        ));
    }
    let p = probs.data();
    let mut grad = vec![T::zero(); p.len()];
    let mut total = 0.0;
    for (bi, &l) in labels.iter().enumerate() {
        if l as usize >= c {
            return Err(Error::Data(format!("class label {l} outside [0, {c}) for sample {bi}")));
        }
        let w = weights.weights[l as usize];
        let i = bi * c + l as usize;
        let pv = p[i].to_f64c();
        if pv >= PROB_FLOOR {
            total -= w * pv.ln();
            grad[i] = T::from_f64c(-w / (b as f64 * pv));
        } else {
            total -= w * PROB_FLOOR.ln();
        }
    }
    Ok(Loss {
        value: total / b as f64,
        grad: Tensor::new(probs.shape().to_vec(), grad)?,
    })
}

/// Dice coefficient for one label with all pixels of all images pooled.
/// Both sets empty counts as perfect agreement (1.0).
pub fn dice_pooled(predictions: &[&[u8]], truths: &[&[u8]], label: u8) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::shape(
            "dice_pooled",
            format!("{} predictions vs {} truths", predictions.len(), truths.len()),
        ));
    }
    let (mut inter, mut np, mut nt) = (0u64, 0u64, 0u64);
    for (i, (p, t)) in predictions.iter().zip(truths).enumerate() {
        if p.len() != t.len() {
            return Err(Error::shape(
                "dice_pooled",
                format!("image {i}: {} vs {} pixels", p.len(), t.len()),
            ));
        }
        for (&a, &b) in p.iter().zip(t.iter()) {
            if b == UNLABELED {
                continue;
            }
            let (ia, ib) = (a == label, b == label);
            np += ia as u64;
            nt += ib as u64;
            inter += (ia && ib) as u64;
        }
    }
    if np + nt == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + nt) as f64)
}

/// Counts with rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_counts(n: usize, counts: Vec<u64>) -> Result<Self> {
        if n == 0 || counts.len() != n * n {
            return Err(Error::Param(format!("{} counts for a {n}x{n} matrix", counts.len())));
        }
        Ok(ConfusionMatrix { n, counts })
    }

    pub fn classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row(&self, k: usize) -> u64 {
        (0..self.n).map(|j| self.get(k, j)).sum()
    }

    fn col(&self, k: usize) -> u64 {
        (0..self.n).map(|i| self.get(i, k)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let trace: u64 = (0..self.n).map(|k| self.get(k, k)).sum();
        trace as f64 / self.total() as f64
    }

    /// Cohen's kappa `(p_o - p_e) / (1 - p_e)`; 0 when chance agreement is 1.
    pub fn kappa(&self) -> f64 {
        let total = self.total() as f64;
        let po = self.accuracy();
        let pe: f64 = (0..self.n)
            .map(|k| (self.row(k) as f64 / total) * (self.col(k) as f64 / total))
            .sum();
        if (1.0 - pe).abs() < 1e-15 {
            return 0.0;
        }
        (po - pe) / (1.0 - pe)
    }

    pub fn precision(&self, k: usize) -> f64 {
        let c = self.col(k);
        if c == 0 {
            0.0
        } else {
            self.get(k, k) as f64 / c as f64
        }
    }

    pub fn recall(&self, k: usize) -> f64 {
        let r = self.row(k);
        if r == 0 {
            0.0
        } else {
            self.get(k, k) as f64 / r as f64
        }
    }

    /// Harmonic mean of precision and recall per class; 0 when both vanish.
    pub fn f1_per_class(&self) -> Vec<f64> {
        (0..self.n)
            .map(|k| {
                let (p, r) = (self.precision(k), self.recall(k));
                if p + r == 0.0 {
                    0.0
                } else {
                    2.0 * p * r / (p + r)
                }
            })
            .collect()
    }
}

pub fn confusion(predicted: &[u8], truth: &[u8], n_classes: usize) -> Result<ConfusionMatrix> {
    if predicted.is_empty() {
        return Err(Error::Param("confusion matrix of no samples".into()));
    }
    if predicted.len() != truth.len() {
        return Err(Error::shape(
            "confusion",
            format!("{} predictions vs {} truths", predicted.len(), truth.len()),
        ));
    }
    let mut counts = vec![0u64; n_classes * n_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p as usize >= n_classes || t as usize >= n_classes {
            return Err(Error::Data(format!("class pair ({t}, {p}) outside [0, {n_classes})")));
        }
        counts[t as usize * n_classes + p as usize] += 1;
    }
    ConfusionMatrix::from_counts(n_classes, counts)
}

pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    cm.accuracy()
}

pub fn cohens_kappa(cm: &ConfusionMatrix) -> f64 {
    cm.kappa()
}

pub fn f1_per_class(cm: &ConfusionMatrix) -> Vec<f64> {
    cm.f1_per_class()
}

/// Evaluation summary. Classification reports leave `dice` empty;
/// segmentation reports fill it per label and score pixels in `confusion`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub kappa: f64,
    pub f1: Vec<f64>,
    pub dice: Vec<f64>,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        MetricsReport {
            accuracy: confusion.accuracy(),
            kappa: confusion.kappa(),
            f1: confusion.f1_per_class(),
            dice: Vec::new(),
            confusion,
        }
    }

    /// Header matching [`MetricsReport::csv_row`]:
    /// `accuracy,kappa,f1_0,...,f1_{C-1}[,dice_0,...,dice_{L-1}]`.
    pub fn csv_header(&self) -> String {
        let mut h = String::from("accuracy,kappa");
        for i in 0..self.f1.len() {
            let _ = write!(h, ",f1_{i}");
        }
        for i in 0..self.dice.len() {
            let _ = write!(h, ",dice_{i}");
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!("{},{}", self.accuracy, self.kappa);
        for v in self.f1.iter().chain(&self.dice) {
            let _ = write!(r, ",{v}");
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn label_weight_examples() {
        let w = label_weights(&[5, 5, 5]).unwrap();
        for v in &w.weights {
            assert!(close(*v, 3f64.sqrt(), 1e-12));
        }
        let w = label_weights(&[90, 10]).unwrap();
        assert!(close(w.weights[0], 1.0541, 1e-4));
        assert!(close(w.weights[1], 3.1623, 1e-4));
        assert_eq!(label_weights(&[7]).unwrap().weights, vec![1.0]);
        assert!(label_weights(&[0, 0]).is_err());
        assert_eq!(label_weights(&[4, 0]).unwrap().weights, vec![1.0, 0.0]);
    }

    #[test]
    fn seg_loss_examples() {
        let uniform = Tensor::<f64>::full(vec![1, 4, 1, 1], 0.25);
        let l = weighted_ce_seg(&uniform, &[2], &LabelWeights::uniform(4)).unwrap();
        assert!(close(l.value, 4f64.ln(), 1e-12));

        let mut onehot = Tensor::<f64>::zeros(vec![1, 2, 1, 2]);
        onehot.data_mut()[0] = 1.0; // pixel 0 -> label 0
        onehot.data_mut()[3] = 1.0; // pixel 1 -> label 1
        let l = weighted_ce_seg(&onehot, &[0, 1], &label_weights(&[3, 1]).unwrap()).unwrap();
        assert!(l.value.abs() < 1e-12);

        let probs = Tensor::<f64>::from_f64(vec![1, 2, 1, 2], &[0.3, 0.6, 0.7, 0.4]).unwrap();
        let w = LabelWeights::uniform(2);
        let a = weighted_ce_seg(&probs, &[0, 1], &w).unwrap().value;
        let b = weighted_ce_seg(&probs, &[0, 1], &w.scaled(2.0)).unwrap().value;
        assert!(close(b, 2.0 * a, 1e-12));
    }

    #[test]
    fn seg_loss_reports_bad_pixel() {
        let probs = Tensor::<f64>::full(vec![1, 2, 2, 2], 0.5);
        let err = weighted_ce_seg(&probs, &[0, 1, 0, 5], &LabelWeights::uniform(2)).unwrap_err();
        assert!(err.to_string().contains("[1, 1]"), "{err}");
        // Unlabeled pixels are skipped.
        assert!(weighted_ce_seg(&probs, &[0, 1, 0, UNLABELED], &LabelWeights::uniform(2)).is_ok());
    }

    #[test]
    fn cls_loss_examples_and_gradient() {
        let p = Tensor::<f64>::from_f64(vec![1, 2], &[1.0, 0.0]).unwrap();
        assert!(weighted_ce_cls(&p, &[0], &LabelWeights::uniform(2)).unwrap().value.abs() < 1e-15);
        let p = Tensor::<f64>::from_f64(vec![1, 2], &[0.5, 0.5]).unwrap();
        assert!(close(weighted_ce_cls(&p, &[1], &LabelWeights::uniform(2)).unwrap().value, 2f64.ln(), 1e-12));

        // Finite differences on the probabilities.
        let vals = [0.2, 0.5, 0.3, 0.6, 0.1, 0.3];
        let p = Tensor::<f64>::from_f64(vec![2, 3], &vals).unwrap();
        let labels = [2, 0];
        let w = label_weights(&[1, 3, 2]).unwrap();
        let loss = weighted_ce_cls(&p, &labels, &w).unwrap();
        for i in 0..6 {
            let mut up = vals;
            let mut dn = vals;
            up[i] += 1e-6;
            dn[i] -= 1e-6;
            let f = |v: &[f64]| {
                weighted_ce_cls(&Tensor::<f64>::from_f64(vec![2, 3], v).unwrap(), &labels, &w)
                    .unwrap()
                    .value
            };
            let num = (f(&up) - f(&dn)) / 2e-6;
            assert!(close(loss.grad.data()[i], num, 1e-6 * num.abs().max(1.0)));
        }
    }

    #[test]
    fn dice_examples() {
        let a: &[u8] = &[1, 1, 0, 0];
        assert_eq!(dice_pooled(&[a], &[a], 1).unwrap(), 1.0);
        let b: &[u8] = &[0, 0, 1, 1];
        assert_eq!(dice_pooled(&[a], &[b], 1).unwrap(), 0.0);
        let p: &[u8] = &[1, 1, 1, 1, 0, 0];
        let t: &[u8] = &[0, 0, 1, 1, 1, 1];
        assert_eq!(dice_pooled(&[p], &[t], 1).unwrap(), 0.5);
        assert_eq!(dice_pooled(&[b], &[b], 7).unwrap(), 1.0);
        assert!(dice_pooled(&[a], &[&[0u8, 1][..]], 1).is_err());
    }

    #[test]
    fn confusion_examples() {
        let diag = ConfusionMatrix::from_counts(3, vec![2, 0, 0, 0, 5, 0, 0, 0, 1]).unwrap();
        assert_eq!(diag.accuracy(), 1.0);
        assert_eq!(diag.kappa(), 1.0);
        assert_eq!(diag.f1_per_class(), vec![1.0; 3]);

        let half = ConfusionMatrix::from_counts(2, vec![1, 1, 1, 1]).unwrap();
        assert_eq!(half.accuracy(), 0.5);
        assert_eq!(half.kappa(), 0.0);
        assert_eq!(half.f1_per_class(), vec![0.5, 0.5]);

        let cm = ConfusionMatrix::from_counts(2, vec![2, 0, 1, 1]).unwrap();
        assert_eq!(cm.accuracy(), 0.75);
        assert!(close(cm.precision(0), 2.0 / 3.0, 1e-15));
        assert_eq!(cm.recall(0), 1.0);
        assert!(close(cm.f1_per_class()[0], 0.8, 1e-12));
        assert!(close(cm.kappa(), 0.5, 1e-12));
    }

    #[test]
    fn degenerate_confusion_cases() {
        assert!(confusion(&[], &[], 2).is_err());
        let single = confusion(&[0, 0, 0], &[0, 0, 0], 2).unwrap();
        assert_eq!(single.kappa(), 0.0);
        assert!(confusion(&[3], &[0], 2).is_err());
    }

    #[test]
    fn report_csv_shape() {
        let cm = ConfusionMatrix::from_counts(2, vec![2, 0, 1, 1]).unwrap();
        let r = MetricsReport::from_confusion(cm);
        assert_eq!(r.csv_header(), "accuracy,kappa,f1_0,f1_1");
        assert_eq!(r.csv_row().split(',').count(), 4);
    }

    /// Brute-force scoring from explicit (truth, prediction) pairs.
    fn oracle(pairs: &[(usize, usize)], n: usize) -> (f64, f64, Vec<f64>) {
        let total = pairs.len() as f64;
        let agree = pairs.iter().filter(|(t, p)| t == p).count() as f64;
        let po = agree / total;
        let mut pe = 0.0;
        for k in 0..n {
            let t = pairs.iter().filter(|(a, _)| *a == k).count() as f64;
            let p = pairs.iter().filter(|(_, b)| *b == k).count() as f64;
            pe += t * p / (total * total);
        }
        let kappa = if (1.0 - pe).abs() < 1e-15 { 0.0 } else { (po - pe) / (1.0 - pe) };
        let f1 = (0..n)
            .map(|k| {
                let tp = pairs.iter().filter(|&&(t, p)| t == k && p == k).count() as f64;
                let fp = pairs.iter().filter(|&&(t, p)| t != k && p == k).count() as f64;
                let fn_ = pairs.iter().filter(|&&(t, p)| t == k && p != k).count() as f64;
                if tp == 0.0 {
                    0.0
                } else {
                    2.0 * tp / (2.0 * tp + fp + fn_)
                }
            })
            .collect();
        (po, kappa, f1)
    }

    #[test]
    fn random_matrices_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..300 {
            let n = rng.random_range(1..=10);
            let counts: Vec<u64> = (0..n * n).map(|_| rng.random_range(0..=50)).collect();
            if counts.iter().sum::<u64>() == 0 {
                continue;
            }
            let mut pairs = Vec::new();
            for t in 0..n {
                for p in 0..n {
                    pairs.extend(std::iter::repeat_n((t, p), counts[t * n + p] as usize));
                }
            }
            let cm = ConfusionMatrix::from_counts(n, counts).unwrap();
            let (acc, kappa, f1) = oracle(&pairs, n);
            assert!(close(cm.accuracy(), acc, 1e-12));
            assert!(close(cm.kappa(), kappa, 1e-12));
            for (a, b) in cm.f1_per_class().iter().zip(&f1) {
                assert!(close(*a, *b, 1e-12));
            }
        }
    }

    proptest! {
        #[test]
        fn permuting_classes_permutes_f1(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..=6);
            let truth: Vec<u8> = (0..40).map(|_| rng.random_range(0..n) as u8).collect();
            let pred: Vec<u8> = (0..40).map(|_| rng.random_range(0..n) as u8).collect();
            let mut perm: Vec<u8> = (0..n as u8).collect();
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let a = confusion(&pred, &truth, n).unwrap();
            let pt: Vec<u8> = truth.iter().map(|&t| perm[t as usize]).collect();
            let pp: Vec<u8> = pred.iter().map(|&p| perm[p as usize]).collect();
            let b = confusion(&pp, &pt, n).unwrap();
            prop_assert!(close(a.accuracy(), b.accuracy(), 1e-12));
            prop_assert!(close(a.kappa(), b.kappa(), 1e-12));
            let (fa, fb) = (a.f1_per_class(), b.f1_per_class());
            for k in 0..n {
                prop_assert!(close(fa[k], fb[perm[k] as usize], 1e-12));
            }
        }

        #[test]
        fn dice_is_symmetric_and_order_free(a in proptest::collection::vec(0u8..3, 1..40),
                                            b in proptest::collection::vec(0u8..3, 1..40)) {
            let n = a.len().min(b.len());
            let (a, b) = (&a[..n], &b[..n]);
            let h = n / 2;
            for label in 0..3 {
                let d = dice_pooled(&[a], &[b], label).unwrap();
                prop_assert_eq!(d, dice_pooled(&[b], &[a], label).unwrap());
                let split = dice_pooled(&[&a[h..], &a[..h]], &[&b[h..], &b[..h]], label).unwrap();
                prop_assert!(close(d, split, 1e-15));
                prop_assert!((0.0..=1.0).contains(&d));
            }
        }

        #[test]
        fn seg_loss_nonnegative_and_decreasing_in_true_prob(p in 0.01f64..0.98, bump in 0.001f64..0.01) {
            // Three channels; the true label gets p, the rest share 1 - p.
            let mk = |pt: f64| Tensor::<f64>::from_f64(vec![1, 3, 1, 1], &[pt, (1.0 - pt) * 0.3, (1.0 - pt) * 0.7]).unwrap();
            let w = LabelWeights::uniform(3);
            let lo = weighted_ce_seg(&mk(p), &[0], &w).unwrap().value;
            let hi = weighted_ce_seg(&mk((p + bump).min(1.0)), &[0], &w).unwrap().value;
            prop_assert!(lo >= 0.0 && hi >= 0.0);
            prop_assert!(hi < lo);
        }
    }
}
