//! Brute-force and extended-precision reference implementations.

#![allow(dead_code)]

use twofloat::TwoFloat;

/// Mann-Whitney count over every (fake, real) pair, ties worth one half.
pub fn auc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let mut twice_wins = 0u64;
    let (mut pos, mut neg) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        pos += 1;
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            if si > sj {
                twice_wins += 2;
            } else if si == sj {
                twice_wins += 1;
            }
        }
    }
    for &l in labels {
        if l == 0 {
            neg += 1;
        }
    }
    twice_wins as f64 / (2 * pos * neg) as f64
}

/// Distinct scores, ascending.
fn thresholds(scores: &[f64]) -> Vec<f64> {
    let mut t = scores.to_vec();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

/// (true positives, false positives) when `score >= t` is called fake.
fn confusion(scores: &[f64], labels: &[u8], t: f64) -> (usize, usize) {
    let mut tp = 0;
    let mut fp = 0;
    for (&s, &l) in scores.iter().zip(labels) {
        if s >= t {
            if l == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    (tp, fp)
}

/// Σ (R_k − R_{k−1}) · P_k over thresholds from the highest score down.
pub fn ap_sweep(scores: &[f64], labels: &[u8]) -> f64 {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &t in thresholds(scores).iter().rev() {
        let (tp, fp) = confusion(scores, labels, t);
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// First crossing of FPR and FNR as the threshold rises through every score
/// and past the maximum, linearly interpolated.
pub fn eer_sweep(scores: &[f64], labels: &[u8]) -> f64 {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut ts = thresholds(scores);
    ts.push(f64::INFINITY);
    let rates: Vec<(f64, f64)> = ts
        .iter()
        .map(|&t| {
            let (tp, fp) = confusion(scores, labels, t);
            (fp as f64 / neg, (pos - tp as f64) / pos)
        })
        .collect();
    if rates[0].0 <= rates[0].1 {
        return rates[0].0;
    }
    for w in rates.windows(2) {
        let ((fa, na), (fb, nb)) = (w[0], w[1]);
        if fb <= nb {
            let t = (fa - na) / ((fa - na) + (nb - fb));
            return fa + t * (fb - fa);
        }
    }
    unreachable!()
}

/// Smallest attainable AP: every real sample ranked above every fake one.
pub fn ap_lower_bound(pos: usize, neg: usize) -> f64 {
    (1..=pos).map(|k| k as f64 / (neg + k) as f64).sum::<f64>() / pos as f64
}

/// `Σ_i w_i · −log softmax(s[i..])[0]` in double-double arithmetic.
pub fn progressive_ce_ref(s: &[f64], weights: &[f64]) -> f64 {
    let mut total = TwoFloat::from(0.0);
    for (i, &w) in weights.iter().enumerate() {
        let tail = &s[i..];
        let m = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = TwoFloat::from(0.0);
        for &v in tail {
            z += (TwoFloat::from(v) - TwoFloat::from(m)).exp();
        }
        let nll = TwoFloat::from(m) + z.ln() - TwoFloat::from(tail[0]);
        total += TwoFloat::from(w) * nll;
    }
    total.hi() + total.lo()
}

/// Independent closed forms of the weight schedules by name.
pub fn weights_ref(scheme: &str, depth: usize) -> Vec<f64> {
    let n = depth as f64;
    (0..depth)
        .map(|i| {
            let i = i as f64;
            match scheme {
                "geometric" => 1.0 / 2f64.powi(i as i32),
                "uniform" => 1.0,
                "linear" => (n - i) / n,
                "harmonic" => 1.0 / (1.0 + i),
                "cosine" => (std::f64::consts::FRAC_PI_2 * i / n).cos(),
                other => panic!("unknown scheme {other}"),
            }
        })
        .collect()
}
