//! The detector: frozen backbone, prompt banks and fusion module wired
//! together.

use std::collections::HashMap;
use std::sync::Arc;

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionParams};
use crate::objective::{cosine, objective_loss, similarity_matrix, LossConfig, PromptFeatures};
use crate::prompt::{arrange_prompt, PromptBank, PromptConfig};
use crate::rng::Rng;
use crate::tensor::nn::Parameters;
use crate::tensor::{no_grad, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Detector<T: Scalar = f32> {
    pub backbone: Arc<Backbone<T>>,
    pub prompt_cfg: PromptConfig,
    pub bank: PromptBank<T>,
    pub fusion: FusionParams<T>,
    pub loss_cfg: LossConfig,
}

/// Cross-attention weights `[B, H, T_i, N]` per bank, when computed.
#[derive(Debug, Clone, Default)]
pub struct BankAttention<T: Scalar> {
    pub real: Option<Tensor<T>>,
    pub fake: Option<Tensor<T>>,
    pub context: Option<Tensor<T>>,
}

/// One frame's inference result.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub s_r: f64,
    pub s_f: f64,
    /// `s_f − s_r`; larger means more likely fake.
    pub fake_score: f64,
    pub is_fake: bool,
}

impl Prediction {
    pub fn new(s_r: f64, s_f: f64) -> Self {
        Self {
            s_r,
            s_f,
            fake_score: s_f - s_r,
            is_fake: s_f >= s_r,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput<T: Scalar> {
    pub loss: Tensor<T>,
    /// Label-ordered similarities `[B, |S|]`.
    pub similarities: Tensor<T>,
}

impl<T: Scalar> Detector<T> {
    pub fn new(
        backbone: Arc<Backbone<T>>,
        prompt_cfg: &PromptConfig,
        fusion_cfg: &FusionConfig,
        loss_cfg: &LossConfig,
        seed: u64,
    ) -> Result<Self> {
        let bank = PromptBank::init(prompt_cfg, &backbone, Rng::derive_seed(seed, "prompts"))?;
        let fusion = FusionParams::new(
            backbone.cfg.text_width,
            backbone.cfg.vision_width,
            fusion_cfg,
            Rng::derive_seed(seed, "fusion"),
        )?;
        Ok(Self {
            backbone,
            prompt_cfg: prompt_cfg.clone(),
            bank,
            fusion,
            loss_cfg: loss_cfg.clone(),
        })
    }

    pub fn backbone_cfg(&self) -> &BackboneConfig {
        &self.backbone.cfg
    }

    /// Conditioned prompt features for a batch of tapped levels `[L,B,N,d_v]`.
    pub fn prompt_features(
        &self,
        levels: &Tensor<T>,
        train: bool,
        rng: &mut Rng,
    ) -> Result<(PromptFeatures<T>, BankAttention<T>)> {
        let b = levels.dim(1);
        let banks = self.bank.batched(b, self.prompt_cfg.dropout_rate, train, rng)?;
        let context = banks
            .context
            .as_ref()
            .map(|c| self.fusion.fuse(c, levels))
            .transpose()?;
        let real = self.fusion.fuse(&banks.real, levels)?;
        let fake = self.fusion.fuse(&banks.fake, levels)?;

        let ctx = context.as_ref().map(|c| &c.embeddings);
        let arr = self.prompt_cfg.arrangement;
        let encode = |e: &Tensor<T>| self.backbone.encode_text_embeddings(e);
        let feats = PromptFeatures {
            real: encode(&arrange_prompt(&real.embeddings, ctx, arr)?)?,
            fake: encode(&arrange_prompt(&fake.embeddings, ctx, arr)?)?,
            context: ctx.map(encode).transpose()?,
        };
        let attention = BankAttention {
            real: real.attention,
            fake: fake.attention,
            context: context.and_then(|c| c.attention),
        };
        Ok((feats, attention))
    }

    /// Training objective on cached image features.
    pub fn loss(
        &self,
        v_cls: &Tensor<T>,
        levels: &Tensor<T>,
        labels: &[u8],
        train: bool,
        rng: &mut Rng,
    ) -> Result<LossOutput<T>> {
        let (feats, _) = self.prompt_features(levels, train, rng)?;
        let prior = if self.loss_cfg.prior_prompt {
            Some(self.backbone.encode_prior_prompt()?)
        } else {
            None
        };
        let s = similarity_matrix(v_cls, &feats, prior.as_ref(), self.backbone.cfg.temperature, labels)?;
        let loss = objective_loss(&s, &self.loss_cfg, feats.context.is_some())?;
        Ok(LossOutput { loss, similarities: s })
    }

    /// Cosine-similarity decision per frame, dropout off.
    pub fn predict(&self, v_cls: &Tensor<T>, levels: &Tensor<T>) -> Result<Vec<Prediction>> {
        no_grad(|| {
            let (feats, _) = self.prompt_features(levels, false, &mut Rng::new(0))?;
            let s_r = cosine(v_cls, &feats.real)?;
            let s_f = cosine(v_cls, &feats.fake)?;
            Ok(s_r
                .data()
                .iter()
                .zip(s_f.data())
                .map(|(r, f)| Prediction::new(r.as_f64(), f.as_f64()))
                .collect())
        })
    }

    /// Trainable tensors in a fixed order.
    pub fn trainables(&self) -> Vec<(String, Tensor<T>)> {
        self.named_params("")
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect()
    }

    /// Replaces the trainable tensors, in [`Self::trainables`] order.
    pub fn set_trainables(&mut self, values: &[Tensor<T>]) -> Result<()> {
        let mut it = values.iter();
        let mut err = None;
        self.visit_mut("", &mut |name, t| {
            if t.requires_grad() {
                match it.next() {
                    Some(v) if v.shape() == t.shape() => *t = v.clone(),
                    _ => err = Some(name),
                }
            }
        });
        if let Some(name) = err {
            return Err(Error::Structural(format!("no matching replacement for `{name}`")));
        }
        if it.next().is_some() {
            return Err(Error::Structural("more replacements than trainable tensors".into()));
        }
        Ok(())
    }

    /// Overwrites parameters from named tensors, keeping trainable flags.
    pub fn load_named(&mut self, named: &HashMap<String, Tensor<T>>) -> Result<()> {
        let mut missing = Vec::new();
        self.visit_mut("", &mut |name, t| match named.get(&name) {
            Some(v) if v.shape() == t.shape() => *t = v.with_requires_grad(t.requires_grad()),
            _ => missing.push(name),
        });
        if !missing.is_empty() {
            return Err(Error::Structural(format!("missing or misshapen tensors: {}", missing.join(", "))));
        }
        Ok(())
    }

    /// Same model at another precision.
    pub fn cast<U: Scalar>(&self) -> Detector<U> {
        let backbone = Arc::new(self.backbone.cast::<U>());
        let cast_t = |t: &Tensor<T>| t.cast::<U>();
        let bank = PromptBank {
            real: cast_t(&self.bank.real),
            fake: cast_t(&self.bank.fake),
            context: self.bank.context.as_ref().map(cast_t),
        };
        let f = &self.fusion;
        let lin = |l: &crate::tensor::nn::Linear<T>| crate::tensor::nn::Linear {
            weight: cast_t(&l.weight),
            bias: l.bias.as_ref().map(cast_t),
        };
        let ln = |l: &crate::tensor::nn::LayerNorm<T>| crate::tensor::nn::LayerNorm {
            gain: cast_t(&l.gain),
            bias: cast_t(&l.bias),
        };
        let attn = |a: &crate::tensor::nn::AttentionParams<T>| crate::tensor::nn::AttentionParams {
            heads: a.heads,
            q: lin(&a.q),
            k: lin(&a.k),
            v: lin(&a.v),
            out: lin(&a.out),
        };
        let fusion = FusionParams {
            film: lin(&f.film),
            ln_self: ln(&f.ln_self),
            self_attn: attn(&f.self_attn),
            ln_q: ln(&f.ln_q),
            ln_k: ln(&f.ln_k),
            cross_attn: attn(&f.cross_attn),
            pool_proj: f.pool_proj.as_ref().map(lin),
            ablation: f.ablation,
        };
        Detector {
            backbone,
            prompt_cfg: self.prompt_cfg.clone(),
            bank,
            fusion,
            loss_cfg: self.loss_cfg.clone(),
        }
    }
}

impl<T: Scalar> Parameters<T> for Detector<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.bank.visit(&crate::tensor::nn::join(prefix, "prompts"), f);
        self.fusion.visit(&crate::tensor::nn::join(prefix, "fusion"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.bank.visit_mut(&crate::tensor::nn::join(prefix, "prompts"), f);
        self.fusion.visit_mut(&crate::tensor::nn::join(prefix, "fusion"), f);
    }
}
