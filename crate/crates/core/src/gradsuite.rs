//! Finite-difference check of the full trainable path over random configurations.
//!
//! Each case draws tap levels, bank sizes, head count, arrangement,
//! composition, fusion stages and loss settings, builds a detector on the
//! desk backbone, and compares analytic gradients of the training loss
//! (dropout active with a fixed mask) against central differences.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::Serialize;

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::model::Detector;
use crate::objective::{LossConfig, WeightScheme};
use crate::prompt::{Arrangement, Composition, PromptConfig};
use crate::rng::Rng;
use crate::tensor::gradcheck::{check_gradients_with, GradCheckOptions, GradCheckReport, ScalarFn};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Pass bound on the maximum relative error.
    pub fn tolerance(&self) -> f64 {
        match self {
            Precision::F32 => 1e-2,
            Precision::F64 => 1e-5,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Usage(format!("unknown precision `{other}` (expected f32 or f64)"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteCase {
    pub label: String,
    pub tap_blocks: Vec<usize>,
    pub prompts: PromptConfig,
    pub fusion: FusionConfig,
    pub loss: LossConfig,
    pub batch: usize,
    pub seed: u64,
}

const HEADS: [usize; 5] = [1, 2, 4, 8, 16];
const ENTRIES_PER_TENSOR: usize = 6;
pub const FD_STEP: f64 = 1e-5;
/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-3;

/// `n` reproducible cases; the first is always the full default model.
pub fn random_cases(n: usize, seed: u64) -> Vec<SuiteCase> {
    let desk = BackboneConfig::default();
    (0..n)
        .map(|i| {
            let mut rng = Rng::derive(seed, &format!("gradsuite/{i}"));
            let mut taps: Vec<usize> = (1..=desk.vision_blocks).collect();
            rng.shuffle(&mut taps);
            taps.truncate(1 + rng.below(4));
            taps.sort_unstable();
            let composition = match i % 5 {
                3 => Composition::NoContext,
                4 => Composition::FixedRf,
                _ => Composition::AllLearnable,
            };
            let prompts = PromptConfig {
                k_r: 1 + rng.below(3),
                k_f: 1 + rng.below(3),
                m: 1 + rng.below(8),
                arrangement: [Arrangement::RfThenC, Arrangement::CThenRf, Arrangement::Split][rng.below(3)],
                composition,
                dropout_rate: 0.1,
            };
            let full = i == 0;
            let fusion = FusionConfig {
                heads: HEADS[rng.below(HEADS.len())],
                zero_init_out: false,
                t2v: full || rng.bernoulli(0.7),
                self_attn: full || rng.bernoulli(0.7),
                v2t: full || rng.bernoulli(0.7),
            };
            let loss = LossConfig {
                scheme: WeightScheme::ALL[rng.below(WeightScheme::ALL.len())],
                prior_prompt: full || rng.bernoulli(0.7),
                ..LossConfig::default()
            };
            SuiteCase {
                label: format!(
                    "case{i}: L={} K=({},{}) M={} H={} {}",
                    taps.len(),
                    prompts.k_r,
                    prompts.k_f,
                    prompts.m,
                    fusion.heads,
                    fusion.ablation().label()
                ),
                tap_blocks: taps,
                prompts,
                fusion,
                loss,
                batch: 2 + rng.below(2),
                seed: rng.next_u64(),
            }
        })
        .collect()
}

struct LossFn {
    template: Detector<f64>,
    v_cls: Tensor<f64>,
    levels: Tensor<f64>,
    labels: Vec<u8>,
    dropout_seed: u64,
}

impl ScalarFn for LossFn {
    fn eval<T: Scalar>(&self, params: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut det = self.template.cast::<T>();
        det.set_trainables(params)?;
        let out = det.loss(
            &self.v_cls.cast::<T>(),
            &self.levels.cast::<T>(),
            &self.labels,
            true,
            &mut Rng::new(self.dropout_seed),
        )?;
        Ok(out.loss)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub label: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub precision: Precision,
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
    pub max_rel_error: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.len() >= 1 && self.max_rel_error < self.tolerance
    }
}

pub fn run_case(case: &SuiteCase, precision: Precision) -> Result<CaseResult> {
    let cfg = BackboneConfig {
        tap_blocks: case.tap_blocks.clone(),
        ..BackboneConfig::default()
    };
    let backbone = Arc::new(Backbone::<f64>::init(&cfg, cfg.weights_seed)?);
    let template = Detector::new(backbone, &case.prompts, &case.fusion, &case.loss, case.seed)?;
    let mut rng = Rng::derive(case.seed, "inputs");
    let b = case.batch;
    let v_cls = Tensor::randn(&[b, cfg.embed_dim], 1.0, &mut rng);
    let levels = Tensor::randn(&[cfg.num_levels(), b, cfg.num_patches(), cfg.vision_width], 1.0, &mut rng);
    let labels: Vec<u8> = (0..b).map(|i| (i % 2) as u8).collect();
    let (names, params): (Vec<String>, Vec<Tensor<f64>>) = template.trainables().into_iter().unzip();
    let f = LossFn {
        template,
        v_cls,
        levels,
        labels,
        dropout_seed: Rng::derive_seed(case.seed, "dropout"),
    };
    let opts = GradCheckOptions {
        eps: FD_STEP,
        per_param: Some(ENTRIES_PER_TENSOR),
        floor: REL_FLOOR,
        seed: case.seed,
    };
    let report: GradCheckReport = match precision {
        Precision::F32 => check_gradients_with::<f32, _>(&f, &params, &opts)?,
        Precision::F64 => check_gradients_with::<f64, _>(&f, &params, &opts)?,
    };
    Ok(CaseResult {
        label: case.label.clone(),
        entries: report.entries,
        max_rel_error: report.max_rel_error,
        worst_param: report.worst.map(|(p, _)| names[p].clone()),
        worst_analytic: report.worst_analytic,
        worst_numeric: report.worst_numeric,
    })
}

pub fn run_suite(precision: Precision, cases: usize, seed: u64) -> Result<SuiteReport> {
    let results = random_cases(cases, seed)
        .iter()
        .map(|c| run_case(c, precision))
        .collect::<Result<Vec<_>>>()?;
    let max = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(SuiteReport {
        precision,
        tolerance: precision.tolerance(),
        cases: results,
        max_rel_error: max,
    })
}
