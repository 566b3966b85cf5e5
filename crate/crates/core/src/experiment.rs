//! End-to-end run plumbing shared by the command line and the test suites:
//! building models from a resolved configuration, caching encoded datasets,
//! training, and writing run artifacts with digests.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{load_dataset, Image, SampleRecord};
use crate::error::{Error, Result};
use crate::eval::MetricReport;
use crate::model::Detector;
use crate::rng::Rng;
use crate::trainer::{build_checkpoint, encode_images, train, EncodedSet, TrainLog, TrainOutcome};

/// Decoded samples of one manifest.
#[derive(Debug, Clone)]
pub struct LoadedSet {
    pub name: String,
    pub records: Vec<SampleRecord>,
    pub images: Vec<Image>,
}

impl LoadedSet {
    pub fn load(manifest: &Path) -> Result<Self> {
        let (records, images) = load_dataset(manifest)?;
        let name = manifest
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "set".into());
        Ok(Self { name, records, images })
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn video_ids(&self) -> Vec<Option<String>> {
        self.records.iter().map(|r| r.video_id.clone()).collect()
    }

    pub fn encode(&self, backbone: &Backbone<f32>, cfg: &RunConfig) -> Result<EncodedSet> {
        encode_images(
            backbone,
            &self.images,
            &self.labels(),
            &self.video_ids(),
            &cfg.data.normalization,
        )
    }
}

/// Stand-in pretrained encoder for a backbone configuration.
pub fn init_backbone(cfg: &BackboneConfig) -> Result<Arc<Backbone<f32>>> {
    Ok(Arc::new(Backbone::init(cfg, cfg.weights_seed)?))
}

/// Fresh detector whose trainables are seeded from `train.seed`.
pub fn build_detector(cfg: &RunConfig, backbone: Arc<Backbone<f32>>) -> Result<Detector<f32>> {
    if backbone.cfg != cfg.backbone {
        return Err(Error::Structural("backbone does not match the run configuration".into()));
    }
    Detector::new(
        backbone,
        &cfg.prompts,
        &cfg.fusion,
        &cfg.loss,
        Rng::derive_seed(cfg.train.seed, "model"),
    )
}

pub struct TrainedRun {
    pub detector: Detector<f32>,
    pub initial: Checkpoint,
    pub checkpoint: Checkpoint,
    pub outcome: TrainOutcome,
}

/// Builds, trains and checkpoints a detector on cached features.
pub fn train_run(cfg: &RunConfig, backbone: Arc<Backbone<f32>>, data: &EncodedSet) -> Result<TrainedRun> {
    cfg.validate()?;
    let mut detector = build_detector(cfg, backbone)?;
    let initial = build_checkpoint(&detector, None);
    let outcome = train(&mut detector, data, &cfg.train)?;
    let checkpoint = build_checkpoint(&detector, Some(&outcome.optimizer));
    Ok(TrainedRun {
        detector,
        initial,
        checkpoint,
        outcome,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Metadata written beside a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: serde_json::Value,
    pub seed: u64,
    pub checkpoint_sha256: String,
    pub log_summary: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDigests {
    pub config_sha256: String,
    pub checkpoint_sha256: String,
    pub log_sha256: String,
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes the resolved configuration with its seed and digest.
pub fn echo_config(out_dir: &Path, cfg: &RunConfig) -> Result<String> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let text = serde_json::to_string_pretty(&cfg.to_json())?;
    let digest = sha256_hex(text.as_bytes());
    let path = out_dir.join("resolved_config.json");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(digest)
}

/// Checkpoint, sidecar, training log and digests for a finished run.
pub fn write_run(out_dir: &Path, cfg: &RunConfig, run: &TrainedRun) -> Result<RunDigests> {
    let config_sha256 = echo_config(out_dir, cfg)?;
    let bytes = run.checkpoint.to_bytes()?;
    let checkpoint_sha256 = sha256_hex(&bytes);
    let ckpt_path = checkpoint_path(out_dir);
    fs::write(&ckpt_path, &bytes).map_err(|e| Error::io(&ckpt_path, e))?;
    let init_path = out_dir.join("init.hmlt");
    fs::write(&init_path, run.initial.to_bytes()?).map_err(|e| Error::io(&init_path, e))?;

    let sidecar = Sidecar {
        config: cfg.to_json(),
        seed: cfg.train.seed,
        checkpoint_sha256: checkpoint_sha256.clone(),
        log_summary: run.outcome.log.summary(),
    };
    write_json(&out_dir.join("model.json"), &sidecar)?;
    let log_text = serde_json::to_string(&run.outcome.log)?;
    let log_path = out_dir.join("train_log.json");
    fs::write(&log_path, &log_text).map_err(|e| Error::io(&log_path, e))?;
    let digests = RunDigests {
        config_sha256,
        checkpoint_sha256,
        log_sha256: sha256_hex(log_text.as_bytes()),
    };
    write_json(&out_dir.join("digests.json"), &digests)?;
    Ok(digests)
}

pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("model.hmlt")
}

/// Restores a trained detector from a checkpoint and its run configuration.
pub fn load_detector(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<Detector<f32>> {
    crate::trainer::detector_from_checkpoint(ckpt, &cfg.backbone, &cfg.prompts, &cfg.fusion, &cfg.loss)
}

/// Reads the configuration recorded in a checkpoint's sidecar, if present.
pub fn sidecar_config(ckpt_path: &Path) -> Result<Option<RunConfig>> {
    let path = ckpt_path.with_extension("json");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    let cfg: RunConfig = serde_json::from_value(sidecar.config)?;
    Ok(Some(cfg))
}

/// Metric report labelled by test-set name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedReport {
    pub set: String,
    #[serde(flatten)]
    pub report: MetricReport,
}

/// Loss summary used by run reports.
pub fn loss_ratio(log: &TrainLog) -> Option<f64> {
    let first = log.epochs.first()?.mean_loss;
    let last = log.epochs.last()?.mean_loss;
    Some(last / first)
}
