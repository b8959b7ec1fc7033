//! Image and label-map metrics.
//!
//! RGB inputs are channel-first tensors (`[C, H, W]` or `[1, C, H, W]`) on
//! the 8-bit scale; [`to_8bit_scale`] maps generator outputs in `[-1, 1]`.

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("label maps have {0} and {1} classes")]
    ClassCount(usize, usize),
    #[error("label {label} at index {index} outside [0, {classes})")]
    InvalidLabel { index: usize, label: usize, classes: usize },
    #[error("class frequencies sum to {0}, expected 1")]
    NotDistribution(f64),
    #[error("metric {0:?} is not finite")]
    NonFinite(String),
    #[error("metric {name:?} = {value} outside [0, 1]")]
    OutOfRange { name: String, value: f64 },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Maps `[-1, 1]` to `[0, 255]`.
pub fn to_8bit_scale<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    t.map(|v| (v + S::one()) * S::lit(127.5))
}

/// `(channels, pixels)` of a channel-first image.
fn planes(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [c, h, w] | [1, c, h, w] => Some((*c, h * w)),
        _ => None,
    }
}

fn check_pair<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>) -> Result<(usize, usize)> {
    match (planes(pred.shape()), planes(gt.shape())) {
        (Some(a), Some(b)) if a == b && a.1 > 0 => Ok(a),
        _ => Err(MetricError::Shape(pred.shape().to_vec(), gt.shape().to_vec())),
    }
}

/// Fraction of pixels whose largest channel deviation is strictly below
/// `delta`.
pub fn delta_accuracy<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>, delta: f64) -> Result<f64> {
    let (c, n) = check_pair(pred, gt)?;
    let (p, g) = (pred.data(), gt.data());
    let hits = (0..n)
        .filter(|&i| {
            let worst = (0..c)
                .map(|ch| (p[ch * n + i].as_f64() - g[ch * n + i].as_f64()).abs())
                .fold(0.0, f64::max);
            worst < delta
        })
        .count();
    Ok(hits as f64 / n as f64)
}

pub fn rmse<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>) -> Result<f64> {
    check_pair(pred, gt)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok((sum / pred.len() as f64).sqrt())
}

/// `H x W` class ids in `[0, classes)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    classes: usize,
    ids: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: usize, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(MetricError::Shape(vec![ids.len()], vec![height, width]));
        }
        if let Some((index, &label)) = ids.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(MetricError::InvalidLabel { index, label, classes });
        }
        Ok(Self {
            height,
            width,
            classes,
            ids,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Fraction of pixels per class.
    pub fn frequencies(&self) -> Vec<f64> {
        let mut f = vec![0.0; self.classes];
        for &id in &self.ids {
            f[id] += 1.0;
        }
        let n = self.ids.len().max(1) as f64;
        f.iter_mut().for_each(|v| *v /= n);
        f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub pixel_acc: f64,
    pub class_acc: f64,
    pub mean_iou: f64,
}

pub fn seg_metrics(pred: &LabelMap, gt: &LabelMap) -> Result<SegMetrics> {
    if pred.classes != gt.classes {
        return Err(MetricError::ClassCount(pred.classes, gt.classes));
    }
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(MetricError::Shape(
            vec![pred.height, pred.width],
            vec![gt.height, gt.width],
        ));
    }
    let c = gt.classes;
    // confusion[g * c + p]
    let mut confusion = vec![0usize; c * c];
    for (&p, &g) in pred.ids.iter().zip(&gt.ids) {
        confusion[g * c + p] += 1;
    }
    let total = gt.ids.len();
    let correct: usize = (0..c).map(|k| confusion[k * c + k]).sum();
    let gt_count = |k: usize| (0..c).map(|p| confusion[k * c + p]).sum::<usize>();
    let pred_count = |k: usize| (0..c).map(|g| confusion[g * c + k]).sum::<usize>();
    let recalls: Vec<f64> = (0..c)
        .filter(|&k| gt_count(k) > 0)
        .map(|k| confusion[k * c + k] as f64 / gt_count(k) as f64)
        .collect();
    let ious: Vec<f64> = (0..c)
        .filter(|&k| gt_count(k) + pred_count(k) > 0)
        .map(|k| {
            let inter = confusion[k * c + k];
            inter as f64 / (gt_count(k) + pred_count(k) - inter) as f64
        })
        .collect();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(SegMetrics {
        pixel_acc: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        class_acc: mean(&recalls),
        mean_iou: mean(&ious),
    })
}

/// Half the L1 distance between two class distributions.
pub fn distribution_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MetricError::ClassCount(a.len(), b.len()));
    }
    for d in [a, b] {
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > 1e-6 || d.iter().any(|&v| v < 0.0) {
            return Err(MetricError::NotDistribution(s));
        }
    }
    Ok(0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

/// Distance between the class frequencies of `pred` and `reference`.
pub fn histogram_divergence(pred: &LabelMap, reference: &[f64]) -> Result<f64> {
    distribution_distance(&pred.frequencies(), reference)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub count: usize,
}

/// Named scalar metrics, serialized as JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: Vec<Metric>,
}

const BOUNDED: [&str; 5] = ["pixel_acc", "class_acc", "mean_iou", "delta", "histogram"];

impl MetricReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a metric; accuracy-type names (`pixel_acc`, `class_acc`,
    /// `mean_iou`, `delta*`, `histogram*`) must lie in `[0, 1]`.
    pub fn push(&mut self, name: impl Into<String>, value: f64, count: usize) -> Result<()> {
        let name = name.into();
        if !value.is_finite() {
            return Err(MetricError::NonFinite(name));
        }
        if BOUNDED.iter().any(|b| name.starts_with(b)) && !(0.0..=1.0).contains(&value) {
            return Err(MetricError::OutOfRange { name, value });
        }
        self.metrics.push(Metric { name, value, count });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Writes one row per `(label, report)` plus a final `mean` row, with
/// columns taken from the first report.
pub fn write_csv<W: io::Write>(out: W, rows: &[(String, MetricReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let names: Vec<&str> = rows
        .first()
        .map(|(_, r)| r.metrics.iter().map(|m| m.name.as_str()).collect())
        .unwrap_or_default();
    let mut header = vec!["image"];
    header.extend(&names);
    w.write_record(&header)?;
    let mut sums = vec![0.0; names.len()];
    for (label, report) in rows {
        let mut record = vec![label.clone()];
        for (k, name) in names.iter().enumerate() {
            let v = report.get(name).unwrap_or(f64::NAN);
            sums[k] += v;
            record.push(v.to_string());
        }
        w.write_record(&record)?;
    }
    let mut record = vec!["mean".to_string()];
    record.extend(sums.iter().map(|s| (s / rows.len().max(1) as f64).to_string()));
    w.write_record(&record)?;
    w.flush()?;
    Ok(())
}
