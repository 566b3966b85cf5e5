//! Training loop, decoupled-weight-decay Adam and checkpoint assembly.
//!
//! The backbone is frozen and deterministic, so image features are encoded
//! once per dataset and reused across epochs.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::checkpoint::Checkpoint;
use crate::data::{preprocess, Image, Normalization};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::model::Detector;
use crate::objective::{hierarchy_rate, LossConfig};
use crate::prompt::PromptConfig;
use crate::rng::Rng;
use crate::tensor::nn::Parameters;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    /// Global L2 gradient-norm ceiling.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            betas: [0.9, 0.999],
            weight_decay: 0.01,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        self.validate_step()
    }

    /// Checks everything an individual update depends on.
    pub fn validate_step(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", format!("{} is not a positive learning rate", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::config("train.betas", format!("{:?} outside [0, 1)", self.betas)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("train.grad_clip", "must be positive"));
            }
        }
        Ok(())
    }
}

pub const ADAM_EPS: f64 = 1e-8;

/// AdamW with lazily zero-initialized moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            betas: cfg.betas,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update; a non-finite gradient rejects the whole step.
    pub fn update<T: Scalar>(&mut self, params: &[Tensor<T>], grads: &[Vec<T>]) -> Result<Vec<Tensor<T>>> {
        if params.len() != grads.len() {
            return Err(Error::Structural("parameter/gradient count mismatch".into()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() {
                return Err(Error::shape("adamw", format!("gradient {i} has wrong size")));
            }
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Training {
                    step: self.step as usize + 1,
                    reason: format!("non-finite gradient in tensor {i} at element {pos}"),
                });
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let [b1, b2] = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let mut out = Vec::with_capacity(params.len());
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data: Vec<T> = p
                .data()
                .iter()
                .zip(g)
                .enumerate()
                .map(|(j, (&theta, &gj))| {
                    let (theta, gj) = (theta.as_f64(), gj.as_f64());
                    let mj = b1 * f64::from(m[j]) + (1.0 - b1) * gj;
                    let vj = b2 * f64::from(v[j]) + (1.0 - b2) * gj * gj;
                    m[j] = mj as f32;
                    v[j] = vj as f32;
                    let upd = (mj / c1) / ((vj / c2).sqrt() + ADAM_EPS);
                    T::of(theta - self.lr * upd - self.lr * self.weight_decay * theta)
                })
                .collect();
            out.push(Tensor::param(data, p.shape())?);
        }
        Ok(out)
    }

    pub fn write_into(&self, ckpt: &mut Checkpoint, names: &[String], shapes: &[Vec<usize>]) {
        for (i, (name, shape)) in names.iter().zip(shapes).enumerate() {
            let zeros = || vec![0.0; shape.iter().product()];
            ckpt.push_raw(format!("optimizer.m.{name}"), shape, self.m.get(i).cloned().unwrap_or_else(zeros));
            ckpt.push_raw(format!("optimizer.v.{name}"), shape, self.v.get(i).cloned().unwrap_or_else(zeros));
        }
        ckpt.push_raw("optimizer.step", &[1], vec![self.step as f32]);
    }
}

/// Cached backbone outputs for a whole dataset.
#[derive(Debug, Clone)]
pub struct EncodedSet {
    /// `[n, d_e]` row-major.
    pub v_cls: Vec<f32>,
    /// Sample-major `[n, L, N, d_v]`.
    pub levels: Vec<f32>,
    pub labels: Vec<u8>,
    pub video_ids: Vec<Option<String>>,
    pub embed_dim: usize,
    pub level_shape: [usize; 3],
}

impl EncodedSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `v_cls [B, d_e]` and `levels [L, B, N, d_v]` for the given rows.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>, Vec<u8>)> {
        let de = self.embed_dim;
        let [l, n, dv] = self.level_shape;
        let per_level = n * dv;
        let per_sample = l * per_level;
        let mut v = Vec::with_capacity(idx.len() * de);
        let mut lv = vec![0.0f32; idx.len() * per_sample];
        let b = idx.len();
        for (bi, &i) in idx.iter().enumerate() {
            v.extend_from_slice(&self.v_cls[i * de..(i + 1) * de]);
            for li in 0..l {
                let src = &self.levels[i * per_sample + li * per_level..][..per_level];
                lv[(li * b + bi) * per_level..][..per_level].copy_from_slice(src);
            }
        }
        Ok((
            Tensor::new(v, &[b, de])?,
            Tensor::new(lv, &[l, b, n, dv])?,
            idx.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    pub fn subset(&self, idx: &[usize]) -> EncodedSet {
        let de = self.embed_dim;
        let per_sample = self.level_shape.iter().product::<usize>();
        EncodedSet {
            v_cls: idx.iter().flat_map(|&i| self.v_cls[i * de..(i + 1) * de].iter().copied()).collect(),
            levels: idx
                .iter()
                .flat_map(|&i| self.levels[i * per_sample..(i + 1) * per_sample].iter().copied())
                .collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            video_ids: idx.iter().map(|&i| self.video_ids[i].clone()).collect(),
            embed_dim: de,
            level_shape: self.level_shape,
        }
    }
}

const ENCODE_CHUNK: usize = 16;

/// Runs the frozen image encoder over raw images in fixed-size chunks.
pub fn encode_images(
    backbone: &Backbone<f32>,
    images: &[Image],
    labels: &[u8],
    video_ids: &[Option<String>],
    norm: &Normalization,
) -> Result<EncodedSet> {
    let cfg = &backbone.cfg;
    let level_shape = [cfg.num_levels(), cfg.num_patches(), cfg.vision_width];
    let per_level = level_shape[1] * level_shape[2];
    let chunks: Vec<(Vec<f32>, Vec<f32>)> = images
        .par_chunks(ENCODE_CHUNK)
        .map(|chunk| -> Result<(Vec<f32>, Vec<f32>)> {
            let pre: Vec<Image> = chunk.iter().map(|im| preprocess(im, cfg.image_size, norm)).collect();
            let x = crate::data::image::batch_tensor::<f32>(&pre)?;
            let (f, m) = backbone.encode_image(&x)?;
            let b = chunk.len();
            let lv = m.levels.data();
            let mut sample_major = Vec::with_capacity(lv.len());
            for bi in 0..b {
                for li in 0..level_shape[0] {
                    sample_major.extend_from_slice(&lv[(li * b + bi) * per_level..][..per_level]);
                }
            }
            Ok((f.v_cls.to_vec(), sample_major))
        })
        .collect::<Result<_>>()?;
    let mut v_cls = Vec::new();
    let mut levels = Vec::new();
    for (v, l) in chunks {
        v_cls.extend(v);
        levels.extend(l);
    }
    Ok(EncodedSet {
        v_cls,
        levels,
        labels: labels.to_vec(),
        video_ids: video_ids.to_vec(),
        embed_dim: cfg.embed_dim,
        level_shape,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub hierarchy_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub hierarchy_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "steps": self.steps.len(),
            "epochs": self.epochs,
            "final_loss": self.steps.last().map(|s| s.loss),
        })
    }
}

pub struct TrainOutcome {
    pub optimizer: AdamW,
    pub log: TrainLog,
}

/// Trains the detector's prompts and fusion module on cached features.
pub fn train(det: &mut Detector<f32>, data: &EncodedSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate_step()?;
    let seed = cfg.seed;
    if data.is_empty() && cfg.epochs > 0 {
        return Err(Error::Training {
            step: 0,
            reason: "empty training set".into(),
        });
    }
    let mut opt = AdamW::new(cfg);
    let mut log = TrainLog::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        Rng::derive(seed, &format!("shuffle/{epoch}")).shuffle(&mut order);
        let (mut total, mut hier, mut seen) = (0.0, 0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            step += 1;
            let (v, lv, y) = data.batch(idx)?;
            let mut rng = Rng::derive(seed, &format!("dropout/{step}"));
            let out = det.loss(&v, &lv, &y, true, &mut rng)?;
            let loss = out.loss.item()?.as_f64();
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: format!("loss is {loss}"),
                });
            }
            let rate = hierarchy_rate(&out.similarities);
            let grads = out.loss.backward()?;
            let params: Vec<Tensor<f32>> = det.trainables().into_iter().map(|(_, t)| t).collect();
            let mut gs: Vec<Vec<f32>> = params
                .iter()
                .map(|p| grads.get(p).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
                .collect();
            if let Some(max) = cfg.grad_clip {
                clip_global_norm(&mut gs, max);
            }
            let updated = opt.update(&params, &gs).map_err(|e| match e {
                Error::Training { reason, .. } => Error::Training { step, reason },
                other => other,
            })?;
            det.set_trainables(&updated)?;
            total += loss * idx.len() as f64;
            hier += rate * idx.len() as f64;
            seen += idx.len();
            log.steps.push(StepLog {
                step,
                epoch,
                loss,
                hierarchy_rate: rate,
            });
        }
        log.epochs.push(EpochLog {
            epoch,
            mean_loss: total / seen as f64,
            hierarchy_rate: hier / seen as f64,
        });
    }
    Ok(TrainOutcome { optimizer: opt, log })
}

/// Scales all gradients so their joint L2 norm is at most `max`.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let s = (max / norm) as f32;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= s);
    }
}

/// Full container: frozen backbone, trainables and optimizer state.
pub fn build_checkpoint(det: &Detector<f32>, opt: Option<&AdamW>) -> Checkpoint {
    let mut ckpt = Checkpoint::default();
    for (name, t) in det.backbone.named_params("backbone") {
        ckpt.push(name, &t);
    }
    for (name, t) in det.named_params("") {
        ckpt.push(name, &t);
    }
    let (names, shapes): (Vec<String>, Vec<Vec<usize>>) = det
        .trainables()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .unzip();
    let fresh;
    let opt = match opt {
        Some(o) => o,
        None => {
            fresh = AdamW::new(&TrainConfig::default());
            &fresh
        }
    };
    opt.write_into(&mut ckpt, &names, &shapes);
    ckpt
}

/// Rebuilds a detector from a checkpoint and the configuration it was trained with.
pub fn detector_from_checkpoint(
    ckpt: &Checkpoint,
    backbone_cfg: &crate::backbone::BackboneConfig,
    prompts: &PromptConfig,
    fusion: &FusionConfig,
    loss: &LossConfig,
) -> Result<Detector<f32>> {
    backbone_cfg.validate()?;
    let mut backbone = Backbone::<f32>::skeleton(backbone_cfg);
    let mut named: HashMap<String, Tensor<f32>> = ckpt.section("backbone")?;
    let mut missing = Vec::new();
    backbone.visit_mut("", &mut |name, t| match named.remove(&name) {
        Some(v) if v.shape() == t.shape() => *t = v,
        _ => missing.push(name),
    });
    if !missing.is_empty() {
        return Err(Error::Structural(format!("checkpoint lacks backbone tensors: {}", missing.join(", "))));
    }
    let mut det = Detector::new(Arc::new(backbone), prompts, fusion, loss, 0)?;
    let mut rest: HashMap<String, Tensor<f32>> = HashMap::new();
    for section in ["prompts", "fusion"] {
        for (k, v) in ckpt.section::<f32>(section)? {
            rest.insert(format!("{section}.{k}"), v);
        }
    }
    det.load_named(&rest)?;
    Ok(det)
}
