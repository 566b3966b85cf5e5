//! Frozen dual encoder.
//!
//! The vision side is a pre-norm transformer over linearly embedded patches
//! with a class token; selected blocks expose their patch tokens as
//! multi-level features. The text side is a causal transformer that takes
//! token embeddings directly, so learned prompt vectors can be fed in place
//! of word embeddings. Parameters are never trainable.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{fnv1a, Rng};
use crate::tensor::nn::{causal_mask, join, multihead_attention, AttentionParams, LayerNorm, Linear, Parameters};
use crate::tensor::{no_grad, Scalar, Tensor};

pub const PRIOR_PROMPT: &str = "A photo of a face.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub vision_width: usize,
    pub vision_blocks: usize,
    pub vision_heads: usize,
    /// 1-based indices of the blocks whose outputs are tapped.
    pub tap_blocks: Vec<usize>,
    pub text_width: usize,
    pub text_blocks: usize,
    pub text_heads: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub temperature: f64,
    /// Seed of the stand-in pretrained weights, fixed across runs.
    pub weights_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            vision_width: 64,
            vision_blocks: 8,
            vision_heads: 4,
            tap_blocks: vec![2, 4, 6, 8],
            text_width: 48,
            text_blocks: 4,
            text_heads: 4,
            context_length: 32,
            vocab_size: 1024,
            embed_dim: 32,
            temperature: 0.01,
            weights_seed: 0,
        }
    }
}

impl BackboneConfig {
    /// ViT-L/14-sized vision tower with the base text tower.
    pub fn paper() -> Self {
        Self {
            image_size: 224,
            patch_size: 14,
            vision_width: 1024,
            vision_blocks: 24,
            vision_heads: 16,
            tap_blocks: vec![4, 8, 12, 16, 20, 24],
            text_width: 768,
            text_blocks: 12,
            text_heads: 12,
            context_length: 77,
            vocab_size: 49408,
            embed_dim: 768,
            temperature: 0.01,
            weights_seed: 0,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_levels(&self) -> usize {
        self.tap_blocks.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: String| Err(Error::config(format!("backbone.{key}"), detail));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(
                "patch_size",
                format!("image size {} is not a multiple of patch size {}", self.image_size, self.patch_size),
            );
        }
        for (key, width, heads) in [
            ("vision_heads", self.vision_width, self.vision_heads),
            ("text_heads", self.text_width, self.text_heads),
        ] {
            if heads == 0 || width == 0 || width % heads != 0 {
                return bad(key, format!("width {width} is not divisible by {heads} heads"));
            }
        }
        if self.vision_blocks == 0 || self.text_blocks == 0 {
            return bad("vision_blocks", "transformers need at least one block".into());
        }
        if self.tap_blocks.is_empty() {
            return bad("tap_blocks", "at least one tap is required".into());
        }
        if self.tap_blocks.windows(2).any(|w| w[0] >= w[1]) {
            return bad("tap_blocks", format!("{:?} is not strictly increasing", self.tap_blocks));
        }
        if let Some(t) = self.tap_blocks.iter().find(|&&t| t == 0 || t > self.vision_blocks) {
            return bad("tap_blocks", format!("block {t} outside 1..={}", self.vision_blocks));
        }
        if self.context_length < 2 {
            return bad("context_length", "room for start and end tokens is required".into());
        }
        if self.vocab_size <= SPECIAL_TOKENS {
            return bad("vocab_size", format!("must exceed the {SPECIAL_TOKENS} special ids"));
        }
        if self.embed_dim == 0 {
            return bad("embed_dim", "must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature", format!("{} is not a positive finite number", self.temperature));
        }
        Ok(())
    }
}

pub const PAD_ID: usize = 0;
pub const START_ID: usize = 1;
pub const END_ID: usize = 2;
const SPECIAL_TOKENS: usize = 3;

/// Lowercased whitespace words hashed into the vocabulary.
#[derive(Debug, Clone, Copy)]
pub struct ToyTokenizer {
    vocab_size: usize,
}

impl ToyTokenizer {
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size > SPECIAL_TOKENS, "vocabulary too small");
        Self { vocab_size }
    }

    /// Word ids only; start and end markers are added by the text encoder.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| {
                let h = fnv1a(w.to_lowercase().as_bytes());
                SPECIAL_TOKENS + (h % (self.vocab_size - SPECIAL_TOKENS) as u64) as usize
            })
            .collect()
    }
}

/// Patch tokens after each tapped block, `[L, B, N, d_v]`.
#[derive(Debug, Clone)]
pub struct MultiLevelFeatures<T: Scalar = f32> {
    pub levels: Tensor<T>,
}

/// Projected class-token feature, `[B, d_e]`.
#[derive(Debug, Clone)]
pub struct ImageFeatures<T: Scalar = f32> {
    pub v_cls: Tensor<T>,
}

/// Pre-norm transformer block with a GELU MLP of width 4d.
#[derive(Debug, Clone)]
pub struct Block<T: Scalar> {
    pub ln_1: LayerNorm<T>,
    pub attn: AttentionParams<T>,
    pub ln_2: LayerNorm<T>,
    pub fc: Linear<T>,
    pub proj: Linear<T>,
}

impl<T: Scalar> Block<T> {
    fn new(width: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            ln_1: LayerNorm::new(width),
            attn: AttentionParams::new(width, width, heads, false, rng)?,
            ln_2: LayerNorm::new(width),
            fc: Linear::new(width, 4 * width, true, rng),
            proj: Linear::new(4 * width, width, true, rng),
        })
    }

    pub fn forward(&self, x: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let h = self.ln_1.forward(x)?;
        let x = x.add(&multihead_attention(&h, &h, &h, &self.attn, mask)?.output)?;
        let h = self.proj.forward(&self.fc.forward(&self.ln_2.forward(&x)?)?.gelu())?;
        x.add(&h)
    }
}

impl<T: Scalar> Parameters<T> for Block<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.ln_1.visit(&join(prefix, "ln_1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln_2.visit(&join(prefix, "ln_2"), f);
        self.fc.visit(&join(prefix, "mlp.fc"), f);
        self.proj.visit(&join(prefix, "mlp.proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.ln_1.visit_mut(&join(prefix, "ln_1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln_2.visit_mut(&join(prefix, "ln_2"), f);
        self.fc.visit_mut(&join(prefix, "mlp.fc"), f);
        self.proj.visit_mut(&join(prefix, "mlp.proj"), f);
    }
}

fn visit_blocks<T: Scalar>(blocks: &[Block<T>], prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
    for (i, b) in blocks.iter().enumerate() {
        b.visit(&join(prefix, &format!("block{}", i + 1)), f);
    }
}

fn visit_blocks_mut<T: Scalar>(
    blocks: &mut [Block<T>],
    prefix: &str,
    f: &mut dyn FnMut(String, &mut Tensor<T>),
) {
    for (i, b) in blocks.iter_mut().enumerate() {
        b.visit_mut(&join(prefix, &format!("block{}", i + 1)), f);
    }
}

#[derive(Debug, Clone)]
pub struct VisionTransformer<T: Scalar> {
    /// `[3·p·p, d_v]`, channel-major patch layout.
    pub patch_embed: Tensor<T>,
    pub class_embedding: Tensor<T>,
    pub positional: Tensor<T>,
    pub ln_pre: LayerNorm<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_post: LayerNorm<T>,
    pub proj: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct TextTransformer<T: Scalar> {
    pub token_embedding: Tensor<T>,
    pub positional: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_final: LayerNorm<T>,
    pub proj: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Backbone<T: Scalar = f32> {
    pub cfg: BackboneConfig,
    pub visual: VisionTransformer<T>,
    pub text: TextTransformer<T>,
    prior: OnceLock<Tensor<T>>,
}

impl<T: Scalar> Backbone<T> {
    /// Random frozen weights, fully determined by `cfg` and `seed`.
    pub fn init(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let (dv, dt, de) = (cfg.vision_width, cfg.text_width, cfg.embed_dim);
        let patch_dim = 3 * cfg.patch_size * cfg.patch_size;
        let sv = (dv as f64).powf(-0.5);
        let st = (dt as f64).powf(-0.5);

        let patch_embed = Tensor::randn(&[patch_dim, dv], (patch_dim as f64).powf(-0.5), &mut rng);
        let class_embedding = Tensor::randn(&[dv], sv, &mut rng);
        let positional = Tensor::randn(&[cfg.num_patches() + 1, dv], sv, &mut rng);
        let vblocks = (0..cfg.vision_blocks)
            .map(|_| Block::new(dv, cfg.vision_heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let vproj = Tensor::randn(&[dv, de], sv, &mut rng);
        let visual = VisionTransformer {
            patch_embed,
            class_embedding,
            positional,
            ln_pre: LayerNorm::new(dv),
            blocks: vblocks,
            ln_post: LayerNorm::new(dv),
            proj: vproj,
        };

        let token_embedding = Tensor::randn(&[cfg.vocab_size, dt], st, &mut rng);
        let tpos = Tensor::randn(&[cfg.context_length, dt], st, &mut rng);
        let tblocks = (0..cfg.text_blocks)
            .map(|_| Block::new(dt, cfg.text_heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let tproj = Tensor::randn(&[dt, de], st, &mut rng);
        let text = TextTransformer {
            token_embedding,
            positional: tpos,
            blocks: tblocks,
            ln_final: LayerNorm::new(dt),
            proj: tproj,
        };
        Ok(Self {
            cfg: cfg.clone(),
            visual,
            text,
            prior: OnceLock::new(),
        })
    }

    pub fn tokenizer(&self) -> ToyTokenizer {
        ToyTokenizer::new(self.cfg.vocab_size)
    }

    /// Class feature and tapped patch tokens for `[B, 3, H, W]` images.
    pub fn encode_image(&self, images: &Tensor<T>) -> Result<(ImageFeatures<T>, MultiLevelFeatures<T>)> {
        let s = self.cfg.image_size;
        if images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != s || images.dim(3) != s {
            return Err(Error::shape(
                "encode_image",
                format!("expected [B, 3, {s}, {s}], got {:?}", images.shape()),
            ));
        }
        no_grad(|| self.encode_image_inner(images))
    }

    fn encode_image_inner(&self, images: &Tensor<T>) -> Result<(ImageFeatures<T>, MultiLevelFeatures<T>)> {
        let vis = &self.visual;
        let b = images.dim(0);
        let n = self.cfg.num_patches();
        let dv = self.cfg.vision_width;

        let tokens = patchify(images, self.cfg.patch_size)?.matmul(&vis.patch_embed)?;
        let cls = vis.class_embedding.reshape(&[1, 1, dv])?.broadcast_to(&[b, 1, dv])?;
        let mut x = Tensor::concat(&[&cls, &tokens], 1)?.add(&vis.positional)?;
        x = vis.ln_pre.forward(&x)?;

        let mut taps = Vec::with_capacity(self.cfg.num_levels());
        for (i, block) in vis.blocks.iter().enumerate() {
            x = block.forward(&x, None)?;
            if self.cfg.tap_blocks.contains(&(i + 1)) {
                taps.push(x.narrow(1, 1, n)?);
            }
        }
        let tap_refs: Vec<&Tensor<T>> = taps.iter().collect();
        let levels = Tensor::stack(&tap_refs, 0)?;

        let cls_out = vis.ln_post.forward(&x.narrow(1, 0, 1)?.reshape(&[b, dv])?)?;
        let v_cls = cls_out.matmul(&vis.proj)?;
        Ok((ImageFeatures { v_cls }, MultiLevelFeatures { levels }))
    }

    /// Rows of the token-embedding table, `[ids.len(), d_t]`.
    pub fn embed_tokens(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let dt = self.cfg.text_width;
        let table = self.text.token_embedding.data();
        let mut data = Vec::with_capacity(ids.len() * dt);
        for &id in ids {
            if id >= self.cfg.vocab_size {
                return Err(Error::shape("embed_tokens", format!("token id {id} outside vocabulary")));
            }
            data.extend_from_slice(&table[id * dt..(id + 1) * dt]);
        }
        Tensor::new(data, &[ids.len(), dt])
    }

    fn check_text_input(&self, embeds: &Tensor<T>) -> Result<()> {
        if embeds.rank() != 3 || embeds.dim(2) != self.cfg.text_width {
            return Err(Error::shape(
                "encode_text_embeddings",
                format!("expected [B, T, {}], got {:?}", self.cfg.text_width, embeds.shape()),
            ));
        }
        let len = embeds.dim(1);
        if len + 2 > self.cfg.context_length {
            return Err(Error::config(
                "backbone.context_length",
                format!("{len} tokens plus start/end exceed context length {}", self.cfg.context_length),
            ));
        }
        Ok(())
    }

    /// Encodes `[B, T, d_t]` prompt embeddings wrapped in start/end tokens;
    /// the feature is read at the end-token position `T + 1`.
    ///
    /// Under the causal mask the padded tail cannot influence positions up
    /// to `T + 1`, so only the first `T + 2` positions are computed.
    pub fn encode_text_embeddings(&self, embeds: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_text_input(embeds)?;
        let len = embeds.dim(1) + 2;
        let x = self.wrap_tokens(embeds, len)?;
        self.run_text(x, embeds.dim(1) + 1)
    }

    /// Reference path over the full padded context.
    pub fn encode_text_embeddings_padded(&self, embeds: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_text_input(embeds)?;
        let x = self.wrap_tokens(embeds, self.cfg.context_length)?;
        self.run_text(x, embeds.dim(1) + 1)
    }

    fn wrap_tokens(&self, embeds: &Tensor<T>, len: usize) -> Result<Tensor<T>> {
        let (b, t, dt) = (embeds.dim(0), embeds.dim(1), self.cfg.text_width);
        let special = |id: usize, count: usize| -> Result<Tensor<T>> {
            self.embed_tokens(&[id])?.reshape(&[1, 1, dt])?.broadcast_to(&[b, count, dt])
        };
        let start = special(START_ID, 1)?;
        let end = special(END_ID, 1)?;
        let mut parts = vec![&start, embeds, &end];
        let pad;
        if len > t + 2 {
            pad = special(PAD_ID, len - t - 2)?;
            parts.push(&pad);
        }
        let x = Tensor::concat(&parts, 1)?;
        x.add(&self.text.positional.narrow(0, 0, len)?)
    }

    fn run_text(&self, mut x: Tensor<T>, eot: usize) -> Result<Tensor<T>> {
        let (b, len, dt) = (x.dim(0), x.dim(1), self.cfg.text_width);
        let mask = causal_mask::<T>(len);
        for block in &self.text.blocks {
            x = block.forward(&x, Some(&mask))?;
        }
        let x = self.text.ln_final.forward(&x.narrow(1, eot, 1)?.reshape(&[b, dt])?)?;
        x.matmul(&self.text.proj)
    }

    /// Encoding of the fixed prior prompt, `[1, d_e]`; computed once.
    pub fn encode_prior_prompt(&self) -> Result<Tensor<T>> {
        if let Some(t) = self.prior.get() {
            return Ok(t.clone());
        }
        let ids = self.tokenizer().encode(PRIOR_PROMPT);
        let embeds = self.embed_tokens(&ids)?.reshape(&[1, ids.len(), self.cfg.text_width])?;
        let t = no_grad(|| self.encode_text_embeddings(&embeds))?;
        Ok(self.prior.get_or_init(|| t).clone())
    }
}

/// `[B, 3, H, W]` → `[B, N, 3·p·p]`, patches in row-major grid order.
pub fn patchify<T: Scalar>(images: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = (images.dim(0), images.dim(1), images.dim(2), images.dim(3));
    let (gh, gw) = (h / p, w / p);
    let src = images.data();
    let patch_dim = c * p * p;
    let mut out = Vec::with_capacity(b * gh * gw * patch_dim);
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                for ci in 0..c {
                    for dy in 0..p {
                        let row = ((bi * c + ci) * h + gy * p + dy) * w + gx * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(out, &[b, gh * gw, patch_dim])
}

/// Softmax over `cos(v_cls, prompt_c) / τ` across the `C` prompts, `[B, C]`.
pub fn zero_shot_probability<T: Scalar>(
    v_cls: &Tensor<T>,
    prompt_feats: &Tensor<T>,
    temperature: f64,
) -> Result<Tensor<T>> {
    if prompt_feats.rank() != 2 || prompt_feats.dim(0) < 2 {
        return Err(Error::shape(
            "zero_shot_probability",
            format!("need at least two prompt features, got {:?}", prompt_feats.shape()),
        ));
    }
    let v = v_cls.l2_normalize()?;
    let p = prompt_feats.l2_normalize()?;
    v.matmul(&p.transpose(0, 1)?)?.scale(1.0 / temperature).softmax()
}

impl<T: Scalar> Parameters<T> for Backbone<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        let v = join(prefix, "visual");
        f(join(&v, "patch_embed"), &self.visual.patch_embed);
        f(join(&v, "class_embedding"), &self.visual.class_embedding);
        f(join(&v, "positional"), &self.visual.positional);
        self.visual.ln_pre.visit(&join(&v, "ln_pre"), f);
        visit_blocks(&self.visual.blocks, &v, f);
        self.visual.ln_post.visit(&join(&v, "ln_post"), f);
        f(join(&v, "proj"), &self.visual.proj);

        let t = join(prefix, "text");
        f(join(&t, "token_embedding"), &self.text.token_embedding);
        f(join(&t, "positional"), &self.text.positional);
        visit_blocks(&self.text.blocks, &t, f);
        self.text.ln_final.visit(&join(&t, "ln_final"), f);
        f(join(&t, "proj"), &self.text.proj);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.prior = OnceLock::new();
        let v = join(prefix, "visual");
        f(join(&v, "patch_embed"), &mut self.visual.patch_embed);
        f(join(&v, "class_embedding"), &mut self.visual.class_embedding);
        f(join(&v, "positional"), &mut self.visual.positional);
        self.visual.ln_pre.visit_mut(&join(&v, "ln_pre"), f);
        visit_blocks_mut(&mut self.visual.blocks, &v, f);
        self.visual.ln_post.visit_mut(&join(&v, "ln_post"), f);
        f(join(&v, "proj"), &mut self.visual.proj);

        let t = join(prefix, "text");
        f(join(&t, "token_embedding"), &mut self.text.token_embedding);
        f(join(&t, "positional"), &mut self.text.positional);
        visit_blocks_mut(&mut self.text.blocks, &t, f);
        self.text.ln_final.visit_mut(&join(&t, "ln_final"), f);
        f(join(&t, "proj"), &mut self.text.proj);
    }
}

impl<T: Scalar> Backbone<T> {
    /// Same weights at another precision.
    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        let mut named: std::collections::HashMap<String, Tensor<U>> = self
            .named_params("")
            .into_iter()
            .map(|(n, t)| (n, t.cast::<U>()))
            .collect();
        let mut out = Backbone::<U>::skeleton(&self.cfg);
        out.visit_mut("", &mut |name, t| {
            *t = named.remove(&name).expect("identical layouts");
        });
        out
    }

    /// Correctly shaped zero weights, to be overwritten by a loader.
    pub(crate) fn skeleton(cfg: &BackboneConfig) -> Self {
        let zero_block = |width: usize, heads: usize| Block {
            ln_1: LayerNorm::new(width),
            attn: AttentionParams {
                heads,
                q: Linear::zeros(width, width, true),
                k: Linear::zeros(width, width, false),
                v: Linear::zeros(width, width, true),
                out: Linear::zeros(width, width, true),
            },
            ln_2: LayerNorm::new(width),
            fc: Linear::zeros(width, 4 * width, true),
            proj: Linear::zeros(4 * width, width, true),
        };
        let (dv, dt, de) = (cfg.vision_width, cfg.text_width, cfg.embed_dim);
        let patch_dim = 3 * cfg.patch_size * cfg.patch_size;
        Self {
            cfg: cfg.clone(),
            visual: VisionTransformer {
                patch_embed: Tensor::zeros(&[patch_dim, dv]),
                class_embedding: Tensor::zeros(&[dv]),
                positional: Tensor::zeros(&[cfg.num_patches() + 1, dv]),
                ln_pre: LayerNorm::new(dv),
                blocks: (0..cfg.vision_blocks).map(|_| zero_block(dv, cfg.vision_heads)).collect(),
                ln_post: LayerNorm::new(dv),
                proj: Tensor::zeros(&[dv, de]),
            },
            text: TextTransformer {
                token_embedding: Tensor::zeros(&[cfg.vocab_size, dt]),
                positional: Tensor::zeros(&[cfg.context_length, dt]),
                blocks: (0..cfg.text_blocks).map(|_| zero_block(dt, cfg.text_heads)).collect(),
                ln_final: LayerNorm::new(dt),
                proj: Tensor::zeros(&[dt, de]),
            },
            prior: OnceLock::new(),
        }
    }
}
