//! Maximum F-measure and mean absolute error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weight of precision relative to recall in the F-measure.
pub const BETA_SQ: f64 = 0.3;
/// Thresholds `k / 255` for `k = 0..=255`.
pub const THRESHOLDS: usize = 256;

fn check(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.numel() == 0 {
        return Err(Error::shape("metrics", "empty map"));
    }
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "metrics",
            format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        ));
    }
    Ok(())
}

/// Number of thresholds `k / 255` that `x` strictly exceeds.
fn level(x: f64) -> usize {
    let mut b = (x * 255.0).ceil().clamp(0.0, THRESHOLDS as f64) as usize;
    while b > 0 && !(x > (b - 1) as f64 / 255.0) {
        b -= 1;
    }
    while b < THRESHOLDS && x > b as f64 / 255.0 {
        b += 1;
    }
    b
}

/// F-measure at every threshold; a pixel is predicted positive when its
/// value is strictly above the threshold. Degenerate precision/recall gives 0.
pub fn f_curve(pred: &Tensor, gt: &Tensor) -> Result<[f64; THRESHOLDS]> {
    check(pred, gt)?;
    let mut pos_hist = [0usize; THRESHOLDS + 1];
    let mut all_hist = [0usize; THRESHOLDS + 1];
    let mut gt_pos = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let b = level(p);
        all_hist[b] += 1;
        if g > 0.5 {
            pos_hist[b] += 1;
            gt_pos += 1;
        }
    }
    let mut curve = [0.0; THRESHOLDS];
    // pixels above threshold k are those with level > k
    let (mut tp, mut predicted) = (0usize, 0usize);
    for k in (0..THRESHOLDS).rev() {
        tp += pos_hist[k + 1];
        predicted += all_hist[k + 1];
        if tp == 0 || gt_pos == 0 {
            continue;
        }
        let p = tp as f64 / predicted as f64;
        let r = tp as f64 / gt_pos as f64;
        curve[k] = (1.0 + BETA_SQ) * p * r / (BETA_SQ * p + r);
    }
    Ok(curve)
}

pub fn max_f_measure(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    Ok(f_curve(pred, gt)?.into_iter().fold(0.0, f64::max))
}

pub fn mae(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check(pred, gt)?;
    let s: f64 = pred.data().iter().zip(gt.data()).map(|(p, g)| (p - g).abs()).sum();
    Ok(s / pred.numel() as f64)
}

/// Dataset-level metrics: the F-curve is averaged over images before taking
/// the maximum; MAE is averaged over images.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    curve: [f64; THRESHOLDS],
    mae: f64,
    count: usize,
}

impl Default for MetricAccumulator {
    fn default() -> Self {
        MetricAccumulator {
            curve: [0.0; THRESHOLDS],
            mae: 0.0,
            count: 0,
        }
    }
}

impl MetricAccumulator {
    pub fn add(&mut self, pred: &Tensor, gt: &Tensor) -> Result<()> {
        let c = f_curve(pred, gt)?;
        for (acc, v) in self.curve.iter_mut().zip(c) {
            *acc += v;
        }
        self.mae += mae(pred, gt)?;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// `(maxF, mae)`, or `None` before any image was added.
    pub fn finish(&self) -> Option<(f64, f64)> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        let max_f = self.curve.iter().map(|v| v / n).fold(0.0, f64::max);
        Some((max_f, self.mae / n))
    }
}

/// One evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub dataset: String,
    pub domain: String,
    pub task: String,
    #[serde(rename = "maxF")]
    pub max_f: f64,
    pub mae: f64,
    pub zero_shot: bool,
    pub rgb_only: bool,
    pub split: String,
    pub samples: usize,
}
