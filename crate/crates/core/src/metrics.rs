//! Task scores: accuracy, macro-F1, delay MAE and the latent trace ratio.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn classification_report(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<ClassificationReport> {
    if predictions.is_empty() {
        return Err(Error::validation("predictions", "empty input"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::shape(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= n_classes || l >= n_classes {
            return Err(Error::validation("class", "index out of range"));
        }
        confusion[l][p] += 1;
    }
    let total = predictions.len() as f64;
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let per_class_f1: Vec<f64> = (0..n_classes)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let predicted: usize = (0..n_classes).map(|r| confusion[r][c]).sum();
            let actual: usize = confusion[c].iter().sum();
            let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
            let recall = if actual > 0 { tp / actual as f64 } else { 0.0 };
            if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            }
        })
        .collect();
    Ok(ClassificationReport {
        accuracy: correct as f64 / total,
        macro_f1: per_class_f1.iter().sum::<f64>() / n_classes as f64,
        per_class_f1,
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayErrorReport {
    pub mae_bins: f64,
    pub mae_seconds: f64,
    pub count: usize,
}

pub fn delay_report(estimates: &[f64], truths: &[f64], grid_spacing: f64) -> Result<DelayErrorReport> {
    if estimates.is_empty() {
        return Err(Error::validation("estimates", "empty input"));
    }
    if estimates.len() != truths.len() {
        return Err(Error::shape(format!("{} estimates for {} truths", estimates.len(), truths.len())));
    }
    if !(grid_spacing > 0.0) {
        return Err(Error::validation("grid_spacing", "must be positive"));
    }
    let mae_seconds = estimates.iter().zip(truths).map(|(e, t)| (e - t).abs()).sum::<f64>() / estimates.len() as f64;
    Ok(DelayErrorReport {
        mae_bins: mae_seconds / grid_spacing,
        mae_seconds,
        count: estimates.len(),
    })
}

/// `trace(S_b)/trace(S_w)` with count-weighted between-class scatter;
/// `+∞` when the within-class scatter vanishes.
pub fn discriminative_gain(features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::shape("features and labels must be nonempty and equally long"));
    }
    let d = features[0].len();
    let n_classes = labels.iter().max().unwrap() + 1;
    let mut counts = vec![0usize; n_classes];
    let mut means = vec![vec![0.0; d]; n_classes];
    let mut global = vec![0.0; d];
    for (f, &l) in features.iter().zip(labels) {
        if f.len() != d {
            return Err(Error::shape("features differ in dimension"));
        }
        counts[l] += 1;
        for i in 0..d {
            means[l][i] += f[i];
            global[i] += f[i];
        }
    }
    let present: Vec<usize> = (0..n_classes).filter(|&c| counts[c] > 0).collect();
    if present.len() < 2 || present.iter().any(|&c| counts[c] < 2) {
        return Err(Error::validation("labels", "need two or more classes with two or more samples each"));
    }
    for &c in &present {
        for v in &mut means[c] {
            *v /= counts[c] as f64;
        }
    }
    for v in &mut global {
        *v /= features.len() as f64;
    }
    let sb: f64 = present
        .iter()
        .map(|&c| counts[c] as f64 * means[c].iter().zip(&global).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    let sw: f64 = features
        .iter()
        .zip(labels)
        .map(|(f, &l)| f.iter().zip(&means[l]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    if sw == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(sb / sw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_constant_predictors() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let r = classification_report(&labels, &labels, 3).unwrap();
        assert_eq!((r.accuracy, r.macro_f1), (1.0, 1.0));

        let r = classification_report(&vec![0; 30], &labels, 3).unwrap();
        assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.per_class_f1[0] - 0.5).abs() < 1e-15);
        assert_eq!(&r.per_class_f1[1..], &[0.0, 0.0]);
        assert!((r.macro_f1 - 1.0 / 6.0).abs() < 1e-15);
        assert!(r.macro_f1 < 1.0);
    }

    #[test]
    fn report_depends_only_on_counts() {
        let labels = vec![0, 0, 1, 1, 2, 2, 0, 1];
        let preds = vec![0, 1, 1, 2, 2, 0, 0, 1];
        let r = classification_report(&preds, &labels, 3).unwrap();
        // swap two class-0 frames together with their predictions
        let (mut l2, mut p2) = (labels.clone(), preds.clone());
        l2.swap(0, 6);
        p2.swap(0, 6);
        l2.swap(1, 6);
        p2.swap(1, 6);
        assert_eq!(classification_report(&p2, &l2, 3).unwrap(), r);
        let trace: usize = (0..3).map(|c| r.confusion[c][c]).sum();
        assert_eq!(r.accuracy, trace as f64 / 8.0);
        assert!(classification_report(&[], &[], 3).is_err());
        assert!(classification_report(&[0], &[0, 1], 3).is_err());
    }

    #[test]
    fn delay_errors() {
        let r = delay_report(&[1.0, 2.0], &[1.0, 2.0], 0.5).unwrap();
        assert_eq!(r.mae_bins, 0.0);
        let r = delay_report(&[1.5], &[1.0], 0.5).unwrap();
        assert_eq!(r.mae_bins, 1.0);
        let r = delay_report(&[1.2, 0.8], &[1.0, 1.0], 0.1).unwrap();
        assert!((r.mae_seconds - 0.2).abs() < 1e-12);
        assert!((r.mae_bins - r.mae_seconds / 0.1).abs() < 1e-12);
        let rev = delay_report(&[0.8, 1.2], &[1.0, 1.0], 0.1).unwrap();
        assert_eq!(rev, r);
        assert!(delay_report(&[], &[], 1.0).is_err());
    }

    #[test]
    fn trace_ratio_cases() {
        let same = vec![vec![0.0], vec![1.0], vec![0.0], vec![1.0]];
        assert_eq!(discriminative_gain(&same, &[0, 0, 1, 1]).unwrap(), 0.0);

        let tight = vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![3.0, 0.0], vec![3.0, 0.0]];
        assert_eq!(discriminative_gain(&tight, &[0, 0, 1, 1]).unwrap(), f64::INFINITY);

        // classes at ±1 with unit within-class variance
        let f = vec![vec![-2.0], vec![0.0], vec![0.0], vec![2.0]];
        assert!((discriminative_gain(&f, &[0, 0, 1, 1]).unwrap() - 1.0).abs() < 1e-15);

        // invariant to rotation, translation and scaling
        let pts = vec![vec![0.3, 1.0], vec![1.2, -0.4], vec![2.0, 2.5], vec![3.1, 1.9], vec![-1.0, 0.2], vec![0.0, -0.7]];
        let labels = [0, 0, 1, 1, 2, 2];
        let j = discriminative_gain(&pts, &labels).unwrap();
        let (s, c) = 0.7f64.sin_cos();
        let moved: Vec<Vec<f64>> = pts
            .iter()
            .map(|p| vec![3.0 * (c * p[0] - s * p[1]) + 5.0, 3.0 * (s * p[0] + c * p[1]) - 2.0])
            .collect();
        assert!((discriminative_gain(&moved, &labels).unwrap() - j).abs() < 1e-12 * j);
        assert!(discriminative_gain(&pts[..3], &labels[..3]).is_err());
    }
}
