use serde::Serialize;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{self, Matrix, WeightVector};

/// Rank of the true label among the logits of one example (0 = top).
///
/// A class ranks ahead of the true label if its logit is larger, or equal
/// with a lower class id.
pub fn true_label_rank(row: &[f64], label: usize) -> usize {
    let target = row[label];
    row.iter()
        .enumerate()
        .filter(|&(c, &z)| z > target || (z == target && c < label))
        .count()
}

/// Fraction of examples whose label is among the `k` largest logits.
pub fn top_k_accuracy(logits: &Matrix, labels: &[usize], k: usize) -> Result<f64> {
    if labels.len() != logits.rows() {
        return Err(Error::shape("top_k labels", logits.rows(), labels.len()));
    }
    if k == 0 || k > logits.cols() {
        return Err(Error::InvalidInput(format!(
            "k must be in 1..={}, got {k}",
            logits.cols()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("no examples".into()));
    }
    let mut hits = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if y >= logits.cols() {
            return Err(Error::InvalidInput(format!("label {y} out of range")));
        }
        if true_label_rank(logits.row(i), y) < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationBin {
    /// Bin covers `(lower, upper]`.
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// NaN for an empty bin.
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationBins {
    pub bins: Vec<CalibrationBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub mce: f64,
    pub bins: CalibrationBins,
}

/// ECE and MCE over `bin_count` equal-width bins partitioning `(0, 1]`.
///
/// `ECE = Σ_b (n_b / N) |acc_b - conf_b|`; `MCE` is the largest gap over
/// non-empty bins.
pub fn calibration_errors(
    confidences: &[f64],
    correct: &[bool],
    bin_count: usize,
) -> Result<CalibrationReport> {
    if confidences.len() != correct.len() {
        return Err(Error::shape("calibration", confidences.len(), correct.len()));
    }
    if confidences.is_empty() {
        return Err(Error::InvalidInput("calibration error of zero samples is undefined".into()));
    }
    if bin_count == 0 {
        return Err(Error::InvalidInput("need at least one calibration bin".into()));
    }
    if let Some(bad) = confidences.iter().find(|c| !(**c > 0.0 && **c <= 1.0)) {
        return Err(Error::InvalidInput(format!("confidence {bad} outside (0, 1]")));
    }

    let m = bin_count as f64;
    let mut count = vec![0usize; bin_count];
    let mut conf_sum = vec![0.0; bin_count];
    let mut hit = vec![0usize; bin_count];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ((c * m).ceil() as usize).clamp(1, bin_count) - 1;
        count[b] += 1;
        conf_sum[b] += c;
        hit[b] += usize::from(ok);
    }

    let n = confidences.len() as f64;
    let (mut ece, mut mce) = (0.0, 0.0f64);
    let mut bins = Vec::with_capacity(bin_count);
    for b in 0..bin_count {
        let (mean_confidence, accuracy) = if count[b] > 0 {
            let k = count[b] as f64;
            (conf_sum[b] / k, hit[b] as f64 / k)
        } else {
            (f64::NAN, f64::NAN)
        };
        if count[b] > 0 {
            let gap = (accuracy - mean_confidence).abs();
            ece += count[b] as f64 / n * gap;
            mce = mce.max(gap);
        }
        bins.push(CalibrationBin {
            lower: b as f64 / m,
            upper: (b + 1) as f64 / m,
            count: count[b],
            mean_confidence,
            accuracy,
        });
    }
    Ok(CalibrationReport {
        ece,
        mce,
        bins: CalibrationBins { bins },
    })
}

/// Metrics of one model on one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelEval {
    pub top1: f64,
    /// Top-5, or top-`classes` when there are fewer than five classes.
    pub top5: f64,
    pub loss: f64,
    pub ece: f64,
    pub mce: f64,
    pub n: usize,
}

/// Confidence is the maximum softmax probability.
pub fn evaluate_model(w: &WeightVector, ds: &LabeledDataset, bins: usize) -> Result<ModelEval> {
    let logits = nn::predict(w, ds.features())?;
    let labels = ds.labels();
    let loss = nn::cross_entropy(&logits, labels)?;
    let top1 = top_k_accuracy(&logits, labels, 1)?;
    let top5 = top_k_accuracy(&logits, labels, logits.cols().min(5))?;
    let mut conf = Vec::with_capacity(labels.len());
    let mut correct = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let p = nn::softmax(row);
        // the max probability can underflow to 0 only for non-finite logits
        conf.push(p.iter().copied().fold(f64::MIN_POSITIVE, f64::max).min(1.0));
        correct.push(true_label_rank(row, y) == 0);
    }
    let cal = calibration_errors(&conf, &correct, bins)?;
    Ok(ModelEval {
        top1,
        top5,
        loss,
        ece: cal.ece,
        mce: cal.mce,
        n: labels.len(),
    })
}
