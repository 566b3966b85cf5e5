//! Ranking and threshold metrics over fake-scores (label 1 = fake = positive).

use std::collections::BTreeMap;

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[u8], metric: &str) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!(
            "{metric}: {} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric(format!("{metric}: score {s} is not a number")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Data(format!("{metric}: labels must be 0 or 1")));
    }
    Ok((pos, labels.len() - pos))
}

fn both_classes(pos: usize, neg: usize, metric: &str) -> Result<()> {
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "{metric} needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    Ok(())
}

/// Probability that a random positive outranks a random negative, ties ½.
///
/// Computed from average ranks; the result is a ratio of exact half-integers.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels, "auc")?;
    both_classes(pos, neg, "auc")?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps tied average ranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j + 1) as u128;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += twice_avg * tied_pos;
        i = j + 1;
    }
    let p = pos as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// Score-descending groups of tied scores as `(positives, negatives)`.
fn tied_groups_desc(scores: &[f64], labels: &[u8]) -> Vec<(usize, usize)> {
    let mut groups: BTreeMap<OrdF64, (usize, usize)> = BTreeMap::new();
    for (&s, &l) in scores.iter().zip(labels) {
        let g = groups.entry(OrdF64(s)).or_default();
        if l == 1 {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups.into_values().rev().collect()
}

#[derive(Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // -0.0 and 0.0 compare equal as scores.
        let norm = |v: f64| if v == 0.0 { 0.0 } else { v };
        norm(self.0).total_cmp(&norm(other.0))
    }
}

/// Step-wise average precision, `Σ (R_k − R_{k−1}) · P_k` over distinct thresholds.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check(scores, labels, "ap")?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("ap needs at least one positive".into()));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut weighted = 0.0;
    for (gp, gn) in tied_groups_desc(scores, labels) {
        tp += gp;
        fp += gn;
        if gp > 0 {
            weighted += gp as f64 * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(weighted / pos as f64)
}

/// Equal error rate: where FPR and FNR cross as the threshold sweeps the scores.
///
/// A sample is called fake when its score is at least the threshold. The
/// sweep runs from the lowest score (FPR 1, FNR 0) to above the highest
/// (FPR 0, FNR 1), interpolating linearly between adjacent thresholds.
pub fn eer(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels, "eer")?;
    both_classes(pos, neg, "eer")?;
    let mut groups = tied_groups_desc(scores, labels);
    groups.reverse();
    // At the lowest threshold everything is called fake.
    let (mut fp, mut fn_) = (neg, 0usize);
    let rates = |fp: usize, fn_: usize| (fp as f64 / neg as f64, fn_ as f64 / pos as f64);
    let mut prev = rates(fp, fn_);
    if prev.0 <= prev.1 {
        return Ok(prev.0);
    }
    for (gp, gn) in groups {
        fp -= gn;
        fn_ += gp;
        let cur = rates(fp, fn_);
        if cur.0 <= cur.1 {
            let d_prev = prev.0 - prev.1;
            let d_cur = cur.1 - cur.0;
            let t = d_prev / (d_prev + d_cur);
            return Ok(prev.0 + t * (cur.0 - prev.0));
        }
        prev = cur;
    }
    unreachable!("the sweep ends at FPR 0, FNR 1")
}

/// Fraction of decisions matching labels.
pub fn accuracy(decisions: &[bool], labels: &[u8]) -> Result<f64> {
    if decisions.is_empty() || decisions.len() != labels.len() {
        return Err(Error::Data(format!(
            "accuracy: {} decisions for {} labels",
            decisions.len(),
            labels.len()
        )));
    }
    let hits = decisions.iter().zip(labels).filter(|(&d, &l)| d == (l == 1)).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean score per video, returned with the video label in first-seen order.
pub fn video_scores(scores: &[f64], labels: &[u8], videos: &[&str]) -> Result<(Vec<f64>, Vec<u8>)> {
    if scores.is_empty() {
        return Err(Error::Data("video aggregation over an empty set".into()));
    }
    if scores.len() != labels.len() || scores.len() != videos.len() {
        return Err(Error::Data("video aggregation: length mismatch".into()));
    }
    let mut index: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    let mut acc: Vec<(f64, usize, u8)> = Vec::new();
    for ((&s, &l), &v) in scores.iter().zip(labels).zip(videos) {
        let slot = *index.entry(v).or_insert_with(|| {
            acc.push((0.0, 0, l));
            acc.len() - 1
        });
        let entry = &mut acc[slot];
        if entry.2 != l {
            return Err(Error::Data(format!("video `{v}` mixes real and fake frames")));
        }
        entry.0 += s;
        entry.1 += 1;
    }
    Ok(acc.into_iter().map(|(sum, n, l)| (sum / n as f64, l)).unzip())
}

/// AUC over per-video mean scores.
pub fn video_auc(scores: &[f64], labels: &[u8], videos: &[&str]) -> Result<f64> {
    let (vs, vl) = video_scores(scores, labels, videos)?;
    auc(&vs, &vl)
}
