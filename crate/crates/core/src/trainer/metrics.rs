use std::io::Write;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::autodiff::Tensor;
use crate::ingest::{Sample, ZScoreParams};
use crate::model::ModelParams;

/// Masked MAE and RMSE of one horizon.
pub fn evaluate(preds: &[f64], truth: &[f64], mask: &[bool]) -> Result<(f64, f64), TrainError> {
    if preds.len() != truth.len() || preds.len() != mask.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} predictions, {} targets, {} mask entries",
            preds.len(),
            truth.len(),
            mask.len()
        )));
    }
    let (mut abs, mut sq, mut count) = (0.0, 0.0, 0usize);
    for ((&p, &y), &ok) in preds.iter().zip(truth).zip(mask) {
        if ok {
            let e = p - y;
            abs += e.abs();
            sq += e * e;
            count += 1;
        }
    }
    if count == 0 {
        return Err(TrainError::EmptyMask);
    }
    let n = count as f64;
    Ok((abs / n, (sq / n).sqrt()))
}

/// Forecasts in minutes with their per-horizon errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    /// Indexed `[horizon][sample][airport]`.
    pub predictions: Vec<Vec<Vec<f64>>>,
    pub mae: Vec<f64>,
    pub rmse: Vec<f64>,
}

impl ForecastResult {
    /// Scores standardized predictions `[horizon][sample][airport]` against
    /// the samples' targets, both mapped back to minutes.
    pub fn score(standardized: Vec<Vec<Vec<f64>>>, samples: &[Sample], z: &ZScoreParams) -> Result<Self, TrainError> {
        let mut out = ForecastResult {
            predictions: Vec::with_capacity(standardized.len()),
            mae: Vec::new(),
            rmse: Vec::new(),
        };
        for (h, per_sample) in standardized.into_iter().enumerate() {
            if per_sample.len() != samples.len() {
                return Err(TrainError::ShapeMismatch(format!(
                    "{} predictions for {} samples",
                    per_sample.len(),
                    samples.len()
                )));
            }
            let minutes: Vec<Vec<f64>> = per_sample
                .into_iter()
                .map(|row| row.into_iter().map(|v| z.invert(v)).collect())
                .collect();
            let preds: Vec<f64> = minutes.iter().flatten().copied().collect();
            let truth: Vec<f64> = samples.iter().flat_map(|s| s.targets[h].iter().map(|&v| z.invert(v))).collect();
            let mask: Vec<bool> = samples.iter().flat_map(|s| s.target_mask[h].iter().copied()).collect();
            let (mae, rmse) = evaluate(&preds, &truth, &mask)?;
            out.predictions.push(minutes);
            out.mae.push(mae);
            out.rmse.push(rmse);
        }
        Ok(out)
    }
}

/// Repeats the last input for every horizon.
pub fn persistence_baseline(samples: &[Sample], z: &ZScoreParams, horizon: usize) -> Result<ForecastResult, TrainError> {
    let last: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| s.inputs.last().cloned().unwrap_or_default())
        .collect();
    ForecastResult::score(vec![last; horizon], samples, z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub horizon: usize,
    pub mae: f64,
    pub rmse: f64,
    /// A variant name or `persistence`.
    pub variant: String,
    pub seed: u64,
}

impl MetricRow {
    /// One row per horizon, numbered from 1.
    pub fn from_result(result: &ForecastResult, variant: &str, seed: u64) -> Vec<Self> {
        result
            .mae
            .iter()
            .zip(&result.rmse)
            .enumerate()
            .map(|(h, (&mae, &rmse))| MetricRow {
                horizon: h + 1,
                mae,
                rmse,
                variant: variant.to_string(),
                seed,
            })
            .collect()
    }
}

pub fn write_history_csv<W: Write>(w: W, history: &[EpochRecord]) -> Result<(), TrainError> {
    let mut out = csv::Writer::from_writer(w);
    for rec in history {
        out.serialize(rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_metrics_csv<W: Write>(w: W, rows: &[MetricRow]) -> Result<(), TrainError> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

/// Entrywise Euclidean distance between two equally shaped tensors.
pub fn frobenius_distance(a: &Tensor, b: &Tensor) -> Result<f64, TrainError> {
    if a.shape() != b.shape() {
        return Err(TrainError::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

/// Per scale, the mean over anchors of `‖CA − C‖`.
pub fn analyze_correction(raw: &[[Tensor; 4]], corrected: &[[Tensor; 4]]) -> Result<[f64; 4], TrainError> {
    if raw.len() != corrected.len() {
        return Err(TrainError::ShapeMismatch(format!("{} raw sets, {} corrected", raw.len(), corrected.len())));
    }
    if raw.is_empty() {
        return Err(TrainError::NoSamples("correction analysis"));
    }
    let mut sums = [0.0; 4];
    for (c, ca) in raw.iter().zip(corrected) {
        for s in 0..4 {
            sums[s] += frobenius_distance(&ca[s], &c[s])?;
        }
    }
    Ok(sums.map(|v| v / raw.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AirportWeight {
    pub airport: String,
    pub score: f64,
    /// 1 for the highest score; ties keep airport order.
    pub rank: usize,
}

/// Mean over channels of the first fusion weight, per airport.
pub fn report_adaptive_weights(params: &ModelParams, airports: &[String]) -> Result<Vec<AirportWeight>, TrainError> {
    let fit = params.get("cell.fit1").ok_or(TrainError::Config("model has no cell.fit1".into()))?;
    let (n, f) = (fit.shape()[0], fit.shape()[1]);
    if airports.len() != n {
        return Err(TrainError::ShapeMismatch(format!("{} airport names for {n} airports", airports.len())));
    }
    let scores: Vec<f64> = fit.data().chunks(f).map(|row| row.iter().sum::<f64>() / f as f64).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut rank = vec![0; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r + 1;
    }
    Ok(airports
        .iter()
        .zip(scores)
        .zip(rank)
        .map(|((a, score), rank)| AirportWeight {
            airport: a.clone(),
            score,
            rank,
        })
        .collect())
}

/// Spearman correlation using average ranks for ties.
pub fn rank_correlation(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let ranks = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}
