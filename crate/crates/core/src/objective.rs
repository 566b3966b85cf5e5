//! Similarity hierarchy and the progressive cross-entropy objective.
//!
//! For a real image the similarities are ordered `[s_r, s_c, s_f, s_pr]`,
//! for a fake one `[s_f, s_c, s_r, s_pr]`. The loss is a weighted sum of
//! cross-entropies over successive suffixes of that vector, each asking its
//! first entry to dominate everything after it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    Geometric,
    Uniform,
    Linear,
    Harmonic,
    Cosine,
}

impl WeightScheme {
    pub const ALL: [WeightScheme; 5] = [
        WeightScheme::Geometric,
        WeightScheme::Uniform,
        WeightScheme::Linear,
        WeightScheme::Harmonic,
        WeightScheme::Cosine,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            WeightScheme::Geometric => "geometric",
            WeightScheme::Uniform => "uniform",
            WeightScheme::Linear => "linear",
            WeightScheme::Harmonic => "harmonic",
            WeightScheme::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| Error::config("loss.scheme", format!("unknown weight scheme `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveVariant {
    Hierarchy,
    StandardCe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub scheme: WeightScheme,
    /// Number of suffix terms; `|S| − 1` when unset.
    pub depth: Option<usize>,
    pub prior_prompt: bool,
    pub variant: ObjectiveVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            scheme: WeightScheme::Geometric,
            depth: None,
            prior_prompt: true,
            variant: ObjectiveVariant::Hierarchy,
        }
    }
}

impl LossConfig {
    pub fn resolved_depth(&self, len: usize) -> Result<usize> {
        let max = len.saturating_sub(1);
        let depth = self.depth.unwrap_or(max);
        if depth == 0 || depth > max {
            return Err(Error::config(
                "loss.depth",
                format!("depth {depth} outside 1..={max} for {len} similarities"),
            ));
        }
        Ok(depth)
    }
}

/// `w_0..w_{depth−1}`.
pub fn weight_schedule(scheme: WeightScheme, depth: usize) -> Result<Vec<f64>> {
    if depth == 0 {
        return Err(Error::config("loss.depth", "depth must be at least 1"));
    }
    let n = depth as f64;
    Ok((0..depth)
        .map(|i| {
            let i = i as f64;
            match scheme {
                WeightScheme::Geometric => 0.5f64.powf(i),
                WeightScheme::Uniform => 1.0,
                WeightScheme::Linear => 1.0 - i / n,
                WeightScheme::Harmonic => 1.0 / (i + 1.0),
                WeightScheme::Cosine => (i * std::f64::consts::PI / (2.0 * n)).cos(),
            }
        })
        .collect())
}

/// Row-wise cosine similarity; `b` may be a single row broadcast over `a`.
pub fn cosine<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.l2_normalize()?.mul(&b.l2_normalize()?)?.sum_axis(1, false)
}

/// Text features of the three prompt kinds plus the optional prior, each `[B, d_e]`
/// (the prior is `[1, d_e]`).
#[derive(Debug, Clone)]
pub struct PromptFeatures<T: Scalar> {
    pub real: Tensor<T>,
    pub fake: Tensor<T>,
    pub context: Option<Tensor<T>>,
}

/// Label-ordered similarity matrix `[B, |S|]`.
///
/// `labels[b]` is 1 for fake. The context column is present when the
/// context bank exists, the prior column when `prior` is given.
pub fn similarity_matrix<T: Scalar>(
    v_cls: &Tensor<T>,
    feats: &PromptFeatures<T>,
    prior: Option<&Tensor<T>>,
    temperature: f64,
    labels: &[u8],
) -> Result<Tensor<T>> {
    if !(temperature > 0.0) {
        return Err(Error::config("backbone.temperature", "must be positive"));
    }
    let b = v_cls.dim(0);
    if labels.len() != b {
        return Err(Error::shape(
            "similarity_matrix",
            format!("{} labels for batch of {b}", labels.len()),
        ));
    }
    let inv = 1.0 / temperature;
    let s_r = cosine(v_cls, &feats.real)?.scale(inv);
    let s_f = cosine(v_cls, &feats.fake)?.scale(inv);
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    let fake = Tensor::<T>::from_f64(&y, &[b])?;
    let real = Tensor::<T>::from_f64(&y.iter().map(|v| 1.0 - v).collect::<Vec<_>>(), &[b])?;
    let correct = s_r.mul(&real)?.add(&s_f.mul(&fake)?)?;
    let wrong = s_f.mul(&real)?.add(&s_r.mul(&fake)?)?;

    let mut cols = vec![correct];
    if let Some(c) = &feats.context {
        cols.push(cosine(v_cls, c)?.scale(inv));
    }
    cols.push(wrong);
    if let Some(p) = prior {
        cols.push(cosine(v_cls, p)?.scale(inv));
    }
    let refs: Vec<&Tensor<T>> = cols.iter().collect();
    Tensor::stack(&refs, 1)
}

/// Batch mean of `Σ_i w_i · −log softmax(S[i..])[0]`.
pub fn progressive_ce<T: Scalar>(s: &Tensor<T>, weights: &[f64]) -> Result<Tensor<T>> {
    let len = s.dim(1);
    if weights.is_empty() || weights.len() + 1 > len {
        return Err(Error::config(
            "loss.depth",
            format!("{} terms need at least {} similarities, got {len}", weights.len(), weights.len() + 1),
        ));
    }
    let mut total: Option<Tensor<T>> = None;
    for (i, &w) in weights.iter().enumerate() {
        let term = s
            .narrow(1, i, len - i)?
            .log_softmax()?
            .narrow(1, 0, 1)?
            .mean_all()
            .scale(-w);
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one term"))
}

/// Batch mean of `−log softmax([s_correct, s_wrong])[0]`.
pub fn standard_ce<T: Scalar>(s: &Tensor<T>, correct: usize, wrong: usize) -> Result<Tensor<T>> {
    let pair = Tensor::concat(&[&s.narrow(1, correct, 1)?, &s.narrow(1, wrong, 1)?], 1)?;
    Ok(pair.log_softmax()?.narrow(1, 0, 1)?.mean_all().neg())
}

/// Loss for a label-ordered similarity matrix.
pub fn objective_loss<T: Scalar>(s: &Tensor<T>, cfg: &LossConfig, has_context: bool) -> Result<Tensor<T>> {
    match cfg.variant {
        ObjectiveVariant::Hierarchy => {
            let depth = cfg.resolved_depth(s.dim(1))?;
            progressive_ce(s, &weight_schedule(cfg.scheme, depth)?)
        }
        ObjectiveVariant::StandardCe => standard_ce(s, 0, if has_context { 2 } else { 1 }),
    }
}

/// Fraction of rows that are strictly decreasing.
pub fn hierarchy_rate<T: Scalar>(s: &Tensor<T>) -> f64 {
    let len = s.dim(1);
    if s.dim(0) == 0 {
        return 0.0;
    }
    let ok = s
        .data()
        .chunks(len)
        .filter(|row| row.windows(2).all(|w| w[0] > w[1]))
        .count();
    ok as f64 / s.dim(0) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(v, &[1, v.len()]).unwrap()
    }

    #[test]
    fn schedules() {
        let close = |a: Vec<f64>, b: &[f64]| {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-6, "{a:?}");
            }
        };
        close(weight_schedule(WeightScheme::Geometric, 3).unwrap(), &[1.0, 0.5, 0.25]);
        close(weight_schedule(WeightScheme::Harmonic, 3).unwrap(), &[1.0, 0.5, 0.333333]);
        close(weight_schedule(WeightScheme::Cosine, 3).unwrap(), &[1.0, 0.866025, 0.5]);
        close(weight_schedule(WeightScheme::Linear, 3).unwrap(), &[1.0, 2.0 / 3.0, 1.0 / 3.0]);
        close(weight_schedule(WeightScheme::Uniform, 3).unwrap(), &[1.0, 1.0, 1.0]);
        assert!(WeightScheme::parse("exotic").is_err());
    }

    #[test]
    fn zero_similarities() {
        let w = weight_schedule(WeightScheme::Geometric, 3).unwrap();
        let l = progressive_ce(&row(&[0.0; 4]), &w).unwrap().item().unwrap();
        let expect = 4f64.ln() + 0.5 * 3f64.ln() + 0.25 * 2f64.ln();
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 2.108887).abs() < 1e-5);
    }

    #[test]
    fn large_ordered_margins_vanish() {
        let w = weight_schedule(WeightScheme::Geometric, 3).unwrap();
        let m = 200.0;
        let l = progressive_ce(&row(&[m, 0.0, -m, -2.0 * m]), &w).unwrap().item().unwrap();
        assert!(l < 1e-40);
    }

    #[test]
    fn standard_ce_examples() {
        let l = standard_ce(&row(&[1.5, 1.5]), 0, 1).unwrap().item().unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let l = standard_ce(&row(&[2.0, 0.0]), 0, 1).unwrap().item().unwrap();
        assert!((l - 0.126928).abs() < 1e-6);
        let l = standard_ce(&row(&[800.0, 0.0]), 0, 1).unwrap().item().unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn similarity_ordering() {
        let v = Tensor::<f64>::from_f64(&[1.0, 0.0, 0.0, 0.0], &[1, 4]).unwrap();
        let e = |i: usize| {
            let mut d = vec![0.0; 4];
            d[i] = 1.0;
            Tensor::<f64>::from_f64(&d, &[1, 4]).unwrap()
        };
        let feats = PromptFeatures {
            real: e(0),
            fake: e(1),
            context: Some(e(2)),
        };
        let prior = e(3);
        let s = similarity_matrix(&v, &feats, Some(&prior), 1.0, &[0]).unwrap();
        assert_eq!(s.to_vec(), vec![1.0, 0.0, 0.0, 0.0]);
        let s = similarity_matrix(&v, &feats, Some(&prior), 1.0, &[1]).unwrap();
        assert_eq!(s.to_vec(), vec![0.0, 0.0, 1.0, 0.0]);
        let half = similarity_matrix(&v, &feats, Some(&prior), 0.5, &[0]).unwrap();
        assert_eq!(half.to_vec(), vec![2.0, 0.0, 0.0, 0.0]);
        let short = similarity_matrix(&v, &feats, None, 1.0, &[0]).unwrap();
        assert_eq!(short.shape(), &[1, 3]);
    }

    #[test]
    fn gradient_signs() {
        let s = Tensor::<f64>::from_f64(&[0.3, -0.2, 0.9, 0.1], &[1, 4]).unwrap().into_param();
        let w = weight_schedule(WeightScheme::Geometric, 3).unwrap();
        let g = progressive_ce(&s, &w).unwrap().backward().unwrap();
        let g = g.get(&s).unwrap();
        assert!(g[0] < 0.0);
        assert!(g[3] > 0.0);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn middle_entries_are_pulled_both_ways() {
        // At S = 0 the second entry gains more from leading its own suffix
        // than it loses by competing with the first.
        let s = Tensor::<f64>::zeros(&[1, 4]).into_param();
        let w = weight_schedule(WeightScheme::Geometric, 3).unwrap();
        let g = progressive_ce(&s, &w).unwrap().backward().unwrap();
        let g1 = g.get(&s).unwrap()[1];
        assert!((g1 - (0.25 - 0.5 * (2.0 / 3.0))).abs() < 1e-12);
    }

    #[test]
    fn hierarchy_rate_counts_strict_orderings() {
        let s = Tensor::<f64>::from_f64(&[3.0, 2.0, 1.0, 1.0, 2.0, 3.0], &[2, 3]).unwrap();
        assert_eq!(hierarchy_rate(&s), 0.5);
    }

    #[test]
    fn depth_bounds() {
        let cfg = LossConfig {
            depth: Some(4),
            ..Default::default()
        };
        assert!(cfg.resolved_depth(4).is_err());
        assert_eq!(LossConfig::default().resolved_depth(3).unwrap(), 2);
    }
}
