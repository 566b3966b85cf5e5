//! Grids of configuration variants, each trained and evaluated with shared seeds.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use serde::Serialize;

use crate::backbone::{Backbone, BackboneConfig};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport};
use crate::experiment::{init_backbone, train_run, LoadedSet};
use crate::objective::{ObjectiveVariant, WeightScheme};
use crate::prompt::{Arrangement, Composition};
use crate::trainer::EncodedSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Fusion,
    Prompts,
    Taps,
    Heads,
    Loss,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [
        AblationAxis::Fusion,
        AblationAxis::Prompts,
        AblationAxis::Taps,
        AblationAxis::Heads,
        AblationAxis::Loss,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::Fusion => "fusion",
            AblationAxis::Prompts => "prompts",
            AblationAxis::Taps => "taps",
            AblationAxis::Heads => "heads",
            AblationAxis::Loss => "loss",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown ablation axis `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct AblationCell {
    pub axis: AblationAxis,
    pub label: String,
    pub cfg: RunConfig,
}

/// Candidate fusion head counts; only those dividing both widths are used.
pub const HEAD_GRID: [usize; 4] = [4, 8, 16, 32];

/// Variants of `base` along one axis.
pub fn cells(axis: AblationAxis, base: &RunConfig) -> Vec<AblationCell> {
    let cell = |label: String, cfg: RunConfig| AblationCell { axis, label, cfg };
    let mut out = Vec::new();
    match axis {
        AblationAxis::Fusion => {
            let rows = [
                ("full", true, true, true),
                ("no_t2v", false, true, true),
                ("no_self_attn", true, false, true),
                ("no_v2t", true, true, false),
                ("prompt_only", false, false, false),
            ];
            for (label, t2v, self_attn, v2t) in rows {
                let mut cfg = base.clone();
                cfg.fusion.t2v = t2v;
                cfg.fusion.self_attn = self_attn;
                cfg.fusion.v2t = v2t;
                out.push(cell(label.into(), cfg));
            }
        }
        AblationAxis::Prompts => {
            for arrangement in [Arrangement::RfThenC, Arrangement::CThenRf, Arrangement::Split] {
                let mut cfg = base.clone();
                cfg.prompts.arrangement = arrangement;
                cfg.prompts.composition = Composition::AllLearnable;
                out.push(cell(tag(&arrangement), cfg));
            }
            for composition in [Composition::NoContext, Composition::FixedRf] {
                let mut cfg = base.clone();
                cfg.prompts.arrangement = Arrangement::RfThenC;
                cfg.prompts.composition = composition;
                out.push(cell(tag(&composition), cfg));
            }
        }
        AblationAxis::Taps => {
            let n = base.backbone.vision_blocks;
            let mut schedules: Vec<(String, Vec<usize>)> = Vec::new();
            for k in [1, 2, 4] {
                if k <= n {
                    let taps: Vec<usize> = (1..=n).filter(|b| (n - b) % k == 0).collect();
                    schedules.push((format!("every_{k}"), taps));
                }
            }
            for b in 1..=n {
                schedules.push((format!("block_{b}"), vec![b]));
            }
            for (label, taps) in schedules {
                let mut cfg = base.clone();
                cfg.backbone.tap_blocks = taps;
                out.push(cell(label, cfg));
            }
        }
        AblationAxis::Heads => {
            for h in HEAD_GRID {
                if base.backbone.text_width % h == 0 && base.backbone.vision_width % h == 0 {
                    let mut cfg = base.clone();
                    cfg.fusion.heads = h;
                    out.push(cell(format!("heads_{h}"), cfg));
                }
            }
        }
        AblationAxis::Loss => {
            for scheme in WeightScheme::ALL {
                let mut cfg = base.clone();
                cfg.loss.scheme = scheme;
                cfg.loss.variant = ObjectiveVariant::Hierarchy;
                out.push(cell(scheme.name().into(), cfg));
            }
            let mut cfg = base.clone();
            cfg.loss.variant = ObjectiveVariant::StandardCe;
            out.push(cell("standard_ce".into(), cfg));
            let mut cfg = base.clone();
            cfg.loss.prior_prompt = false;
            cfg.loss.depth = None;
            out.push(cell("no_prior".into(), cfg));
        }
    }
    out
}

fn tag<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub cell: String,
    pub cfg: RunConfig,
    pub set: String,
    /// `Err` holds the failure message of a cell that could not be completed.
    pub result: std::result::Result<MetricReport, String>,
}

struct Encoded {
    cfg: BackboneConfig,
    backbone: Arc<Backbone<f32>>,
    train: EncodedSet,
    tests: Vec<EncodedSet>,
}

/// Trains and evaluates each cell; failures are recorded and the run continues.
///
/// Encoded features are shared between cells whose backbones agree.
pub fn run_ablation(cells: &[AblationCell], train: &LoadedSet, tests: &[LoadedSet]) -> Vec<AblationRow> {
    let mut cache: Vec<Encoded> = Vec::new();
    let mut rows = Vec::new();
    for c in cells {
        let outcome = (|| -> Result<Vec<(String, MetricReport)>> {
            c.cfg.validate()?;
            let slot = match cache.iter().position(|e| e.cfg == c.cfg.backbone) {
                Some(i) => i,
                None => {
                    let backbone = init_backbone(&c.cfg.backbone)?;
                    let train_set = train.encode(&backbone, &c.cfg)?;
                    let test_sets = tests.iter().map(|t| t.encode(&backbone, &c.cfg)).collect::<Result<_>>()?;
                    cache.push(Encoded {
                        cfg: c.cfg.backbone.clone(),
                        backbone,
                        train: train_set,
                        tests: test_sets,
                    });
                    cache.len() - 1
                }
            };
            let enc = &cache[slot];
            let run = train_run(&c.cfg, Arc::clone(&enc.backbone), &enc.train)?;
            tests
                .iter()
                .zip(&enc.tests)
                .map(|(t, data)| Ok((t.name.clone(), evaluate(&run.detector, data, c.cfg.eval.batch_size)?)))
                .collect()
        })();
        match outcome {
            Ok(reports) => rows.extend(reports.into_iter().map(|(set, r)| AblationRow {
                axis: c.axis,
                cell: c.label.clone(),
                cfg: c.cfg.clone(),
                set,
                result: Ok(r),
            })),
            Err(e) => rows.extend(tests.iter().map(|t| AblationRow {
                axis: c.axis,
                cell: c.label.clone(),
                cfg: c.cfg.clone(),
                set: t.name.clone(),
                result: Err(e.to_string()),
            })),
        }
    }
    rows
}

pub const CSV_HEADER: [&str; 21] = [
    "axis",
    "cell",
    "t2v",
    "self_attn",
    "v2t",
    "arrangement",
    "composition",
    "tap_blocks",
    "heads",
    "scheme",
    "variant",
    "prior_prompt",
    "seed",
    "set",
    "status",
    "frame_auc",
    "video_auc",
    "acc",
    "ap",
    "eer",
    "frames",
];

/// Fixed column order: configuration fields, then metrics.
pub fn write_csv(rows: &[AblationRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::format("csv", e.to_string());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        let c = &r.cfg;
        let taps = c
            .backbone
            .tap_blocks
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        let mut rec = vec![
            r.axis.name().to_string(),
            r.cell.clone(),
            c.fusion.t2v.to_string(),
            c.fusion.self_attn.to_string(),
            c.fusion.v2t.to_string(),
            tag(&c.prompts.arrangement),
            tag(&c.prompts.composition),
            taps,
            c.fusion.heads.to_string(),
            c.loss.scheme.name().to_string(),
            tag(&c.loss.variant),
            c.loss.prior_prompt.to_string(),
            c.train.seed.to_string(),
            r.set.clone(),
        ];
        match &r.result {
            Ok(m) => {
                rec.push("ok".into());
                rec.extend([
                    m.frame_auc.to_string(),
                    m.video_auc.map(|v| v.to_string()).unwrap_or_default(),
                    m.acc.to_string(),
                    m.ap.to_string(),
                    m.eer.to_string(),
                    m.frames.to_string(),
                ]);
            }
            Err(msg) => {
                rec.push(format!("failed: {msg}"));
                rec.extend(std::iter::repeat_n(String::new(), 6));
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::format("csv", e.to_string()))?;
    Ok(())
}
