//! Frame AUC under each corruption kind at every severity.

use std::fmt::Write as _;

use crate::data::{perturb, Image, Normalization, PerturbKind, Perturbation};
use crate::data::perturb::MAX_SEVERITY;
use crate::error::Result;
use crate::eval::{auc, predict_set};
use crate::model::Detector;
use crate::rng::Rng;
use crate::trainer::encode_images;

pub const SEVERITIES: usize = MAX_SEVERITY as usize + 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessGrid {
    pub rows: Vec<(PerturbKind, [f64; SEVERITIES])>,
}

impl RobustnessGrid {
    /// `kind,s0,…,s5` with one row per corruption kind.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind");
        for s in 0..SEVERITIES {
            write!(out, ",s{s}").expect("string write");
        }
        out.push('\n');
        for (kind, values) in &self.rows {
            out.push_str(kind.name());
            for v in values {
                write!(out, ",{v}").expect("string write");
            }
            out.push('\n');
        }
        out
    }
}

/// Perturbs every image per (kind, severity), re-encodes and scores.
///
/// Random corruptions draw from a generator keyed by kind, severity and
/// sample index, so the grid does not depend on evaluation order.
pub fn perturbation_grid(
    det: &Detector<f32>,
    images: &[Image],
    labels: &[u8],
    norm: &Normalization,
    seed: u64,
    batch_size: usize,
) -> Result<RobustnessGrid> {
    let mut rows = Vec::with_capacity(PerturbKind::ALL.len());
    let no_videos = vec![None; images.len()];
    for kind in PerturbKind::ALL {
        let mut values = [0.0; SEVERITIES];
        for (s, slot) in values.iter_mut().enumerate() {
            let p = Perturbation {
                kind,
                severity: s as u8,
            };
            let perturbed: Vec<Image> = images
                .iter()
                .enumerate()
                .map(|(i, img)| perturb(img, p, &mut Rng::derive(seed, &format!("perturb/{kind}/{s}/{i}"))))
                .collect::<Result<_>>()?;
            let data = encode_images(&det.backbone, &perturbed, labels, &no_videos, norm)?;
            let preds = predict_set(det, &data, batch_size)?;
            let scores: Vec<f64> = preds.iter().map(|p| p.fake_score).collect();
            *slot = auc(&scores, labels)?;
        }
        rows.push((kind, values));
    }
    Ok(RobustnessGrid { rows })
}
