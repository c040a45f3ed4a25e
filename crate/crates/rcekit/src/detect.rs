//! Detection metrics (confidence, non-maximal entropy, kernel density) and
//! the NOT-SURE thresholding strategy.
//!
//! All metrics consume the model's *prediction-rule* probability vector, so
//! for RCE-trained models they see `softmax(-Z_pre)`. Kernel density is
//! computed in the final-layer hidden space against per-class banks of
//! training vectors grouped by true label.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{NetworkModel, Objective};
use crate::tensor::{checkpoint, ops, Tensor};
use crate::util::{percentile, stage_rng};

/// Which score the detector thresholds on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Confidence,
    NonMe,
    Kdensity,
}

/// Thresholded verdict: a confident prediction or an explicit refusal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Label(usize),
    NotSure,
}

/// Paper-default kernel bandwidths per training objective.
pub fn default_bandwidth(objective: Objective) -> f64 {
    match objective {
        Objective::Rce => 0.1 / 0.26,
        _ => 1.0 / 0.26,
    }
}

/// Fitted detector: per-class hidden-vector banks, bandwidth, threshold.
#[derive(Debug, Clone)]
pub struct DetectorState {
    pub metric: Metric,
    pub sigma2: f64,
    banks: Vec<Arc<Vec<f64>>>,
    hidden_dim: usize,
    threshold: Option<f64>,
    percentile_q: Option<f64>,
}

/// Largest element of the probability vector.
pub fn confidence_metric(probs: &[f64]) -> f64 {
    probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Entropy (natural log) of the normalized non-maximal elements.
/// Zero non-max mass (below 1e-12) scores 0.
pub fn non_me_metric(probs: &[f64]) -> Result<f64> {
    if probs.len() < 2 {
        return Err(Error::InvalidArgument("non-ME needs at least 2 classes".into()));
    }
    let top = ops::argmax(probs);
    let rest: f64 = probs.iter().enumerate().filter(|&(i, _)| i != top).map(|(_, &p)| p).sum();
    if rest < 1e-12 {
        return Ok(0.0);
    }
    let mut h = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        if i == top {
            continue;
        }
        let q = p / rest;
        if q > 0.0 {
            h -= q * q.ln();
        }
    }
    Ok(h)
}

impl DetectorState {
    /// Detector over a probability metric; no banks needed.
    pub fn for_metric(metric: Metric, sigma2: f64) -> Self {
        DetectorState {
            metric,
            sigma2,
            banks: Vec::new(),
            hidden_dim: 0,
            threshold: None,
            percentile_q: None,
        }
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn set_threshold(&mut self, t: f64) {
        self.threshold = Some(t);
    }

    pub fn percentile_q(&self) -> Option<f64> {
        self.percentile_q
    }

    pub fn bank(&self, class: usize) -> &Arc<Vec<f64>> {
        &self.banks[class]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.banks.iter().map(|b| b.len() / self.hidden_dim.max(1)).collect()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn is_fitted(&self) -> bool {
        !self.banks.is_empty()
    }

    fn require_fitted(&self) -> Result<()> {
        if self.metric == Metric::Kdensity && !self.is_fitted() {
            return Err(Error::InvalidArgument("kernel-density detector is not fitted".into()));
        }
        Ok(())
    }

    /// Kernel-density score of a hidden vector against one class bank.
    pub fn kd_of_hidden(&self, class: usize, z: &[f64]) -> Result<f64> {
        if !self.is_fitted() {
            return Err(Error::InvalidArgument("kernel-density detector is not fitted".into()));
        }
        if z.len() != self.hidden_dim {
            return Err(Error::shape(
                "kd_of_hidden",
                format!("query dim {} vs bank dim {}", z.len(), self.hidden_dim),
            ));
        }
        Ok(ops::kernel_density(z, &self.banks[class], self.sigma2))
    }

    /// Metric value for every example in a batch, under the model's rule.
    pub fn scores_batch(&self, model: &NetworkModel, images: &Tensor) -> Result<Vec<f64>> {
        self.require_fitted()?;
        let (hidden, logits) = model.infer_batch(images)?;
        let probs = model.rule_probs(&logits)?;
        let l = model.num_classes();
        let d = hidden.shape()[1];
        let mut out = Vec::with_capacity(images.shape()[0]);
        for (prow, zrow) in probs.data().chunks_exact(l).zip(hidden.data().chunks_exact(d)) {
            let v = match self.metric {
                Metric::Confidence => confidence_metric(prow),
                Metric::NonMe => non_me_metric(prow)?,
                Metric::Kdensity => {
                    let yhat = ops::argmax(prow);
                    self.kd_of_hidden(yhat, zrow)?
                }
            };
            out.push(v);
        }
        Ok(out)
    }

    /// Metric value for a single [1,C,H,W] input.
    pub fn score(&self, model: &NetworkModel, x: &Tensor) -> Result<f64> {
        Ok(self.scores_batch(model, x)?[0])
    }

    /// Serializes banks in the tensor checkpoint format plus a JSON sidecar.
    pub fn save(&self, prefix: &Path) -> Result<()> {
        let tensors: Vec<(String, Tensor)> = self
            .banks
            .iter()
            .enumerate()
            .map(|(c, b)| {
                let n = b.len() / self.hidden_dim.max(1);
                (
                    format!("class_{c}"),
                    Tensor::new(vec![n.max(1), self.hidden_dim.max(1)], b.to_vec())
                        .unwrap_or_else(|_| Tensor::scalar(0.0)),
                )
            })
            .collect();
        checkpoint::save(&with_ext(prefix, "rce"), &tensors)?;
        let sidecar = DetectorSidecar {
            metric: self.metric,
            sigma2: self.sigma2,
            threshold: self.threshold,
            percentile_q: self.percentile_q,
            class_counts: self.class_counts(),
            hidden_dim: self.hidden_dim,
        };
        let json = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::Parse(format!("detector sidecar encode: {e}")))?;
        std::fs::write(with_ext(prefix, "json"), json)?;
        Ok(())
    }

    pub fn load(prefix: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(with_ext(prefix, "json"))?;
        let sidecar: DetectorSidecar = serde_json::from_str(&json)
            .map_err(|e| Error::Parse(format!("detector sidecar decode: {e}")))?;
        let tensors = checkpoint::load(&with_ext(prefix, "rce"))?;
        let mut banks = Vec::with_capacity(tensors.len());
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            if name != format!("class_{i}") {
                return Err(Error::Parse(format!("unexpected detector bank name {name}")));
            }
            banks.push(Arc::new(t.into_data()));
        }
        Ok(DetectorState {
            metric: sidecar.metric,
            sigma2: sidecar.sigma2,
            banks,
            hidden_dim: sidecar.hidden_dim,
            threshold: sidecar.threshold,
            percentile_q: sidecar.percentile_q,
        })
    }
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut p = prefix.to_path_buf();
    let name = match p.file_name() {
        Some(n) => format!("{}.{ext}", n.to_string_lossy()),
        None => format!("detector.{ext}"),
    };
    p.set_file_name(name);
    p
}

#[derive(Serialize, Deserialize)]
struct DetectorSidecar {
    metric: Metric,
    sigma2: f64,
    threshold: Option<f64>,
    percentile_q: Option<f64>,
    class_counts: Vec<usize>,
    hidden_dim: usize,
}

/// Fits kernel-density banks: hidden vectors of every training point,
/// grouped by true label. `bank_cap` sub-samples classes above the cap with
/// a seeded draw (deterministic; indices stay sorted).
pub fn kdensity_fit(
    model: &NetworkModel,
    train: &Dataset,
    sigma2: f64,
    bank_cap: Option<usize>,
    seed: u64,
) -> Result<DetectorState> {
    if sigma2 <= 0.0 {
        return Err(Error::InvalidArgument(format!("sigma2 must be positive, got {sigma2}")));
    }
    let l = model.num_classes();
    let d = model.hidden_dim();
    let mut banks: Vec<Vec<f64>> = vec![Vec::new(); l];

    let n = train.len();
    let chunk = 256;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (images, labels) = train.batch(&idx);
        let (hidden, _) = model.infer_batch(&images)?;
        for (row, &y) in hidden.data().chunks_exact(d).zip(&labels) {
            banks[y].extend_from_slice(row);
        }
        start = end;
    }
    for (c, b) in banks.iter().enumerate() {
        if b.is_empty() {
            return Err(Error::InvalidArgument(format!("class {c} has no training points")));
        }
    }
    if let Some(cap) = bank_cap {
        for (c, b) in banks.iter_mut().enumerate() {
            let count = b.len() / d;
            if count > cap {
                let mut rng = stage_rng(seed, &format!("bank-cap-{c}"));
                let mut keep: Vec<usize> = (0..count).collect();
                keep.shuffle(&mut rng);
                keep.truncate(cap);
                keep.sort_unstable();
                let mut smaller = Vec::with_capacity(cap * d);
                for &i in &keep {
                    smaller.extend_from_slice(&b[i * d..(i + 1) * d]);
                }
                *b = smaller;
            }
        }
    }
    Ok(DetectorState {
        metric: Metric::Kdensity,
        sigma2,
        banks: banks.into_iter().map(Arc::new).collect(),
        hidden_dim: d,
        threshold: None,
        percentile_q: None,
    })
}

/// Kernel-density score of one input: mean Gaussian kernel between its
/// hidden vector and the bank of its predicted class.
pub fn kdensity_score(state: &DetectorState, model: &NetworkModel, x: &Tensor) -> Result<f64> {
    if !state.is_fitted() {
        return Err(Error::InvalidArgument("kernel-density detector is not fitted".into()));
    }
    let (hidden, logits) = model.infer_batch(x)?;
    let probs = model.rule_probs(&logits)?;
    let yhat = ops::argmax(&probs.data()[..model.num_classes()]);
    state.kd_of_hidden(yhat, &hidden.data()[..state.hidden_dim])
}

/// Picks T as the q-th percentile (linear interpolation) of the metric over
/// correctly classified reference points, and stores it on the state.
/// q = 0 yields T = -inf so every reference point passes.
pub fn threshold_select(
    state: &mut DetectorState,
    model: &NetworkModel,
    reference: &Dataset,
    q: f64,
) -> Result<f64> {
    if !(0.0..100.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("percentile q must be in [0,100), got {q}")));
    }
    if reference.is_empty() {
        return Err(Error::InvalidArgument("reference set is empty".into()));
    }
    let l = model.num_classes();
    let mut scores = Vec::new();
    let chunk = 256;
    let mut start = 0;
    while start < reference.len() {
        let end = (start + chunk).min(reference.len());
        let idx: Vec<usize> = (start..end).collect();
        let (images, labels) = reference.batch(&idx);
        let (_, logits) = model.infer_batch(&images)?;
        let probs = model.rule_probs(&logits)?;
        let batch_scores = state.scores_batch(model, &images)?;
        for ((prow, &y), s) in probs.data().chunks_exact(l).zip(&labels).zip(batch_scores) {
            if ops::argmax(prow) == y {
                scores.push(s);
            }
        }
        start = end;
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument(
            "no correctly classified reference points to calibrate on".into(),
        ));
    }
    let t = percentile(&scores, q);
    state.threshold = Some(t);
    state.percentile_q = Some(q);
    Ok(t)
}

/// Returns the predicted label when the metric strictly exceeds T,
/// NOT-SURE otherwise (a score equal to T refuses).
pub fn thresholded_predict(
    state: &DetectorState,
    model: &NetworkModel,
    x: &Tensor,
) -> Result<Verdict> {
    let t = state
        .threshold
        .ok_or_else(|| Error::InvalidArgument("detector has no threshold; run threshold_select".into()))?;
    let score = state.score(model, x)?;
    if score > t {
        let (label, _) = model.predict(x)?;
        Ok(Verdict::Label(label))
    } else {
        Ok(Verdict::NotSure)
    }
}
