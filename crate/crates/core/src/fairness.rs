//! Per-race accuracy of gender predictions and the spread of those
//! accuracies, used as the bias measure.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, Result};
use crate::nets::{Classifier, Discriminator};
use crate::tensor::{argmax_rows, Tensor};

/// Rows scored per forward pass when predicting over a whole set.
pub const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub source_id: String,
    #[serde(rename = "pred")]
    pub predicted_gender: usize,
    #[serde(rename = "truth")]
    pub true_gender: usize,
    pub race: usize,
}

/// Per-class and pooled percent correct.
pub fn stratified_accuracy(preds: &[PredictionRecord], num_races: usize) -> Result<(Vec<f64>, f64)> {
    let (correct, counts) = tally(preds, num_races)?;
    let per_class = correct.iter().zip(&counts).map(|(&c, &n)| 100.0 * c as f64 / n as f64).collect();
    let overall = 100.0 * correct.iter().sum::<usize>() as f64 / preds.len() as f64;
    Ok((per_class, overall))
}

fn tally(preds: &[PredictionRecord], num_races: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut correct = vec![0usize; num_races];
    let mut counts = vec![0usize; num_races];
    for p in preds {
        ensure!(p.race < num_races, "{}: race {} outside [0, {num_races})", p.source_id, p.race);
        ensure!(
            p.predicted_gender < 2 && p.true_gender < 2,
            "{}: gender labels must be 0 or 1",
            p.source_id
        );
        counts[p.race] += 1;
        correct[p.race] += usize::from(p.predicted_gender == p.true_gender);
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(invalid!("race class {empty} has no predictions"));
    }
    Ok((correct, counts))
}

/// Sample variance `Σ(a − ā)² / (K − 1)` of per-class accuracies.
pub fn accuracy_variance(per_class: &[f64]) -> Result<f64> {
    let k = per_class.len();
    ensure!(k >= 2, "variance needs at least 2 classes, got {k}");
    let mean = per_class.iter().sum::<f64>() / k as f64;
    Ok(per_class.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (k - 1) as f64)
}

/// Percent of positions where `pred` equals `truth`.
pub fn accuracy_percent(pred: &[usize], truth: &[usize]) -> Result<f64> {
    ensure!(!truth.is_empty(), "accuracy of an empty set");
    ensure!(pred.len() == truth.len(), "{} predictions for {} labels", pred.len(), truth.len());
    Ok(100.0 * pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64)
}

/// Mean per-class recall in percent, over the classes present in `truth`.
/// Any constant predictor scores `100 / (#classes present)`.
pub fn balanced_accuracy_percent(pred: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    ensure!(!truth.is_empty(), "accuracy of an empty set");
    ensure!(pred.len() == truth.len(), "{} predictions for {} labels", pred.len(), truth.len());
    let mut hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for (&p, &t) in pred.iter().zip(truth) {
        ensure!(t < k, "label {t} outside [0, {k})");
        counts[t] += 1;
        hits[t] += usize::from(p == t);
    }
    let present: Vec<f64> = hits
        .iter()
        .zip(&counts)
        .filter(|(_, &n)| n > 0)
        .map(|(&h, &n)| h as f64 / n as f64)
        .collect();
    Ok(100.0 * present.iter().sum::<f64>() / present.len() as f64)
}

/// Anything that maps a batch of latents to one class index per row.
pub trait LatentPredictor {
    fn predict(&self, latents: &Tensor) -> Result<Vec<usize>>;
}

impl LatentPredictor for Discriminator {
    fn predict(&self, latents: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.discriminate(latents)?))
    }
}

impl LatentPredictor for Classifier {
    fn predict(&self, latents: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.classify(latents)?))
    }
}

/// Predictions over a whole set, scored [`EVAL_CHUNK`] rows at a time.
pub fn predict_all(model: &impl LatentPredictor, latents: &Tensor) -> Result<Vec<usize>> {
    let n = latents.shape()[0];
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_CHUNK) {
        out.extend(model.predict(&latents.slice_outer(start, (start + EVAL_CHUNK).min(n))?)?);
    }
    Ok(out)
}

/// Percent of latents whose predicted attribute equals the label (eval mode).
pub fn discriminator_accuracy(dis: &impl LatentPredictor, latents: &Tensor, labels: &[usize]) -> Result<f64> {
    ensure!(!labels.is_empty(), "discriminator accuracy of an empty set");
    accuracy_percent(&predict_all(dis, latents)?, labels)
}

/// Class-balanced variant of [`discriminator_accuracy`]; chance is `100 / K`
/// whatever the label frequencies.
pub fn balanced_discriminator_accuracy(
    dis: &impl LatentPredictor,
    latents: &Tensor,
    labels: &[usize],
    k: usize,
) -> Result<f64> {
    ensure!(!labels.is_empty(), "discriminator accuracy of an empty set");
    balanced_accuracy_percent(&predict_all(dis, latents)?, labels, k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub model_id: String,
    /// Percent correct per race class.
    pub per_class_accuracy: Vec<f64>,
    pub overall_accuracy: f64,
    pub variance: f64,
    pub counts: Vec<usize>,
}

pub fn evaluate(preds: &[PredictionRecord], num_races: usize, model_id: &str) -> Result<EvalReport> {
    let (per_class, overall) = stratified_accuracy(preds, num_races)?;
    let (_, counts) = tally(preds, num_races)?;
    Ok(EvalReport {
        model_id: model_id.to_string(),
        variance: accuracy_variance(&per_class)?,
        per_class_accuracy: per_class,
        overall_accuracy: overall,
        counts,
    })
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoundedView {
    model_id: String,
    overall_accuracy: f64,
    per_class_accuracy: Vec<f64>,
    variance: f64,
    counts: Vec<usize>,
    raw: RawView,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawView {
    overall_accuracy: f64,
    per_class_accuracy: Vec<f64>,
    variance: f64,
}

/// Canonical JSON: fixed key order, percents and variance rounded to two
/// decimals, full-precision values under `raw`.
pub fn report_json(report: &EvalReport) -> String {
    let view = RoundedView {
        model_id: report.model_id.clone(),
        overall_accuracy: round2(report.overall_accuracy),
        per_class_accuracy: report.per_class_accuracy.iter().map(|&v| round2(v)).collect(),
        variance: round2(report.variance),
        counts: report.counts.clone(),
        raw: RawView {
            overall_accuracy: report.overall_accuracy,
            per_class_accuracy: report.per_class_accuracy.clone(),
            variance: report.variance,
        },
    };
    serde_json::to_string_pretty(&view).expect("plain data serializes") + "\n"
}

/// Restores the full-precision report from [`report_json`] output.
pub fn parse_report(json: &str) -> Result<EvalReport> {
    let view: RoundedView = serde_json::from_str(json)?;
    Ok(EvalReport {
        model_id: view.model_id,
        per_class_accuracy: view.raw.per_class_accuracy,
        overall_accuracy: view.raw.overall_accuracy,
        variance: view.raw.variance,
        counts: view.counts,
    })
}

pub fn emit_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, report_json(report))?;
    Ok(())
}

pub fn write_predictions_csv(preds: &[PredictionRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in preds {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions_csv(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}
