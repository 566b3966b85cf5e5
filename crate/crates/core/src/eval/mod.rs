//! Inference, metric reports, robustness sweeps, ablations and attention export.

pub mod ablation;
pub mod attention;
pub mod metrics;
pub mod robustness;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Detector, Prediction};
use crate::trainer::EncodedSet;

pub use metrics::{accuracy, auc, average_precision, eer, video_auc};

/// Predictions for every cached sample, in order, batched by `batch_size`.
pub fn predict_set(det: &Detector<f32>, data: &EncodedSet, batch_size: usize) -> Result<Vec<Prediction>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (v, lv, _) = data.batch(chunk)?;
        out.extend(det.predict(&v, &lv)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frame_auc: f64,
    /// Absent when some frame lacks a video id.
    pub video_auc: Option<f64>,
    pub acc: f64,
    pub ap: f64,
    pub eer: f64,
    pub frames: usize,
    pub real: usize,
    pub fake: usize,
    pub videos: Option<usize>,
}

impl MetricReport {
    pub fn from_predictions(preds: &[Prediction], labels: &[u8], videos: &[Option<String>]) -> Result<Self> {
        let scores: Vec<f64> = preds.iter().map(|p| p.fake_score).collect();
        let decisions: Vec<bool> = preds.iter().map(|p| p.is_fake).collect();
        let ids: Option<Vec<&str>> = videos.iter().map(|v| v.as_deref()).collect();
        let (video_auc, n_videos) = match &ids {
            Some(ids) if !ids.is_empty() => {
                let (vs, vl) = metrics::video_scores(&scores, labels, ids)?;
                (Some(auc(&vs, &vl)?), Some(vs.len()))
            }
            _ => (None, None),
        };
        let fake = labels.iter().filter(|&&l| l == 1).count();
        Ok(Self {
            frame_auc: auc(&scores, labels)?,
            video_auc,
            acc: accuracy(&decisions, labels)?,
            ap: average_precision(&scores, labels)?,
            eer: eer(&scores, labels)?,
            frames: labels.len(),
            real: labels.len() - fake,
            fake,
            videos: n_videos,
        })
    }
}

/// Predicts and scores a cached set.
pub fn evaluate(det: &Detector<f32>, data: &EncodedSet, batch_size: usize) -> Result<MetricReport> {
    let preds = predict_set(det, data, batch_size)?;
    MetricReport::from_predictions(&preds, &data.labels, &data.video_ids)
}
