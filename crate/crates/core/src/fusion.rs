//! Bidirectional text/visual fusion.
//!
//! Text tokens first modulate every tapped patch embedding with a
//! feature-wise scale and shift. The modulated levels of each patch attend
//! to each other and are mean-pooled into one vector per patch. Finally the
//! text tokens cross-attend to the pooled patches and add the result to
//! themselves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::nn::{join, multihead_attention, AttentionParams, LayerNorm, Linear, Parameters};
use crate::tensor::{Scalar, Tensor};

/// Which fusion stages are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionAblation {
    pub t2v: bool,
    pub self_attn: bool,
    pub v2t: bool,
}

impl Default for FusionAblation {
    fn default() -> Self {
        Self::full()
    }
}

impl FusionAblation {
    pub fn full() -> Self {
        Self {
            t2v: true,
            self_attn: true,
            v2t: true,
        }
    }

    /// Banks go straight to the text encoder.
    pub fn prompt_only() -> Self {
        Self {
            t2v: false,
            self_attn: false,
            v2t: false,
        }
    }

    pub fn is_prompt_only(&self) -> bool {
        !(self.t2v || self.self_attn || self.v2t)
    }

    pub fn label(&self) -> String {
        if self.is_prompt_only() {
            return "prompt_only".into();
        }
        let mut parts = Vec::new();
        for (on, name) in [(self.t2v, "t2v"), (self.self_attn, "sa"), (self.v2t, "v2t")] {
            if on {
                parts.push(name);
            }
        }
        parts.join("+")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub heads: usize,
    /// Start both attention output projections at zero.
    pub zero_init_out: bool,
    /// Text-to-visual modulation.
    pub t2v: bool,
    /// Self-attention across levels; plain level mean when off.
    pub self_attn: bool,
    /// Visual-to-text cross-attention; pooled-patch addition when off.
    pub v2t: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            zero_init_out: true,
            t2v: true,
            self_attn: true,
            v2t: true,
        }
    }
}

impl FusionConfig {
    pub fn ablation(&self) -> FusionAblation {
        FusionAblation {
            t2v: self.t2v,
            self_attn: self.self_attn,
            v2t: self.v2t,
        }
    }

    pub fn set_ablation(&mut self, ab: FusionAblation) {
        self.t2v = ab.t2v;
        self.self_attn = ab.self_attn;
        self.v2t = ab.v2t;
    }
}

#[derive(Debug, Clone)]
pub struct FusionParams<T: Scalar = f32> {
    /// `silu` then this map, `d_t → 2·d_v`.
    pub film: Linear<T>,
    pub ln_self: LayerNorm<T>,
    pub self_attn: AttentionParams<T>,
    pub ln_q: LayerNorm<T>,
    pub ln_k: LayerNorm<T>,
    pub cross_attn: AttentionParams<T>,
    /// Pooled-patch projection `d_v → d_t`, present only without cross-attention.
    pub pool_proj: Option<Linear<T>>,
    pub ablation: FusionAblation,
}

/// `γ` and `β`, each `[B, d_v]`.
#[derive(Debug, Clone)]
pub struct Modulation<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct FusionOutput<T: Scalar> {
    /// `[B, T, d_t]`
    pub embeddings: Tensor<T>,
    /// Cross-attention weights `[B, H, T, N]` when that stage ran.
    pub attention: Option<Tensor<T>>,
}

impl<T: Scalar> FusionParams<T> {
    pub fn new(dt: usize, dv: usize, cfg: &FusionConfig, seed: u64) -> Result<Self> {
        let h = cfg.heads;
        if h == 0 || dv % h != 0 || dt % h != 0 {
            return Err(Error::config(
                "fusion.heads",
                format!("{h} heads must divide both widths {dv} and {dt}"),
            ));
        }
        let mut rng = Rng::new(seed);
        let mut p = Self {
            film: Linear::new(dt, 2 * dv, true, &mut rng),
            ln_self: LayerNorm::new(dv),
            self_attn: AttentionParams::new(dv, dv, h, cfg.zero_init_out, &mut rng)?,
            ln_q: LayerNorm::new(dt),
            ln_k: LayerNorm::new(dv),
            cross_attn: AttentionParams::new(dt, dv, h, cfg.zero_init_out, &mut rng)?,
            pool_proj: (!cfg.v2t).then(|| Linear::new(dv, dt, true, &mut rng)),
            ablation: cfg.ablation(),
        };
        p.set_trainable(true);
        Ok(p)
    }

    pub fn text_width(&self) -> usize {
        self.ln_q.gain.numel()
    }

    pub fn visual_width(&self) -> usize {
        self.ln_k.gain.numel()
    }

    pub fn modulation(&self, e: &Tensor<T>) -> Result<Modulation<T>> {
        let dv = self.visual_width();
        let gb = self.film.forward(&e.mean_axis(1, false)?.silu())?;
        Ok(Modulation {
            gamma: gb.narrow(1, 0, dv)?,
            beta: gb.narrow(1, dv, dv)?,
        })
    }

    /// `v·(γ+1)+β` on every level of every patch; `[L,B,N,d_v] → [B,N,L,d_v]`.
    pub fn text_to_visual(&self, e: &Tensor<T>, levels: &Tensor<T>) -> Result<Tensor<T>> {
        let m = self.modulation(e)?;
        let b = e.dim(0);
        let dv = self.visual_width();
        let lv = levels_by_patch(levels)?;
        let scale = m.gamma.add_scalar(1.0).reshape(&[b, 1, 1, dv])?;
        lv.mul(&scale)?.add(&m.beta.reshape(&[b, 1, 1, dv])?)
    }

    /// Self-attention across levels per patch, residual from `raw`, mean over
    /// levels; `[B,N,L,d_v] → [B,N,d_v]`.
    pub fn integrate_levels(&self, modulated: &Tensor<T>, raw: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, n, l, dv) = (modulated.dim(0), modulated.dim(1), modulated.dim(2), modulated.dim(3));
        let h = self.ln_self.forward(&modulated.reshape(&[b * n, l, dv])?)?;
        let a = multihead_attention(&h, &h, &h, &self.self_attn, None)?.output;
        raw.reshape(&[b * n, l, dv])?
            .add(&a)?
            .mean_axis(1, false)?
            .reshape(&[b, n, dv])
    }

    /// `E + CrossAttn(ln_q(E), ln_k(Z), ln_k(Z))`.
    pub fn visual_to_text(&self, e: &Tensor<T>, z: &Tensor<T>) -> Result<FusionOutput<T>> {
        let q = self.ln_q.forward(e)?;
        let k = self.ln_k.forward(z)?;
        let out = multihead_attention(&q, &k, &k, &self.cross_attn, None)?;
        Ok(FusionOutput {
            embeddings: e.add(&out.output)?,
            attention: Some(out.weights),
        })
    }

    /// Conditions one bank `[B,T,d_t]` on levels `[L,B,N,d_v]`.
    pub fn fuse(&self, e: &Tensor<T>, levels: &Tensor<T>) -> Result<FusionOutput<T>> {
        let ab = self.ablation;
        if ab.is_prompt_only() {
            return Ok(FusionOutput {
                embeddings: e.clone(),
                attention: None,
            });
        }
        if levels.rank() != 4 || e.rank() != 3 || levels.dim(1) != e.dim(0) {
            return Err(Error::shape(
                "fuse",
                format!("tokens {:?} and levels {:?} disagree", e.shape(), levels.shape()),
            ));
        }
        let raw = levels_by_patch(levels)?;
        let modulated = if ab.t2v { self.text_to_visual(e, levels)? } else { raw.clone() };
        let z = if ab.self_attn {
            self.integrate_levels(&modulated, &raw)?
        } else {
            modulated.mean_axis(2, false)?
        };
        if ab.v2t {
            return self.visual_to_text(e, &z);
        }
        let proj = self.pool_proj.as_ref().ok_or_else(|| {
            Error::Structural("pooled projection missing for disabled cross-attention".into())
        })?;
        let pooled = proj.forward(&z.mean_axis(1, false)?)?;
        let (b, dt) = (e.dim(0), e.dim(2));
        Ok(FusionOutput {
            embeddings: e.add(&pooled.reshape(&[b, 1, dt])?)?,
            attention: None,
        })
    }
}

/// `[L, B, N, d] → [B, N, L, d]`
pub fn levels_by_patch<T: Scalar>(levels: &Tensor<T>) -> Result<Tensor<T>> {
    levels.permute(&[1, 2, 0, 3])
}

impl<T: Scalar> Parameters<T> for FusionParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        let ab = self.ablation;
        if ab.is_prompt_only() {
            return;
        }
        if ab.t2v {
            self.film.visit(&join(prefix, "film"), f);
        }
        if ab.self_attn {
            self.ln_self.visit(&join(prefix, "ln_self"), f);
            self.self_attn.visit(&join(prefix, "self_attn"), f);
        }
        if ab.v2t {
            self.ln_q.visit(&join(prefix, "ln_q"), f);
            self.ln_k.visit(&join(prefix, "ln_k"), f);
            self.cross_attn.visit(&join(prefix, "cross_attn"), f);
        }
        if let Some(p) = &self.pool_proj {
            p.visit(&join(prefix, "pool_proj"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        let ab = self.ablation;
        if ab.is_prompt_only() {
            return;
        }
        if ab.t2v {
            self.film.visit_mut(&join(prefix, "film"), f);
        }
        if ab.self_attn {
            self.ln_self.visit_mut(&join(prefix, "ln_self"), f);
            self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        }
        if ab.v2t {
            self.ln_q.visit_mut(&join(prefix, "ln_q"), f);
            self.ln_k.visit_mut(&join(prefix, "ln_k"), f);
            self.cross_attn.visit_mut(&join(prefix, "cross_attn"), f);
        }
        if let Some(p) = &mut self.pool_proj {
            p.visit_mut(&join(prefix, "pool_proj"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(dt: usize, dv: usize, heads: usize, seed: u64) -> FusionParams<f64> {
        let cfg = FusionConfig {
            heads,
            ..Default::default()
        };
        FusionParams::new(dt, dv, &cfg, seed).unwrap()
    }

    fn zero(l: &mut Linear<f64>) {
        *l = Linear::zeros(l.in_dim(), l.out_dim(), l.bias.is_some());
    }

    #[test]
    fn zero_film_is_identity_modulation() {
        let mut p = params(6, 4, 2, 1);
        zero(&mut p.film);
        let mut rng = Rng::new(2);
        let e = Tensor::randn(&[2, 3, 6], 1.0, &mut rng);
        let levels = Tensor::randn(&[3, 2, 5, 4], 1.0, &mut rng);
        let z = p.text_to_visual(&e, &levels).unwrap();
        assert_eq!(z.data(), levels_by_patch(&levels).unwrap().data());
    }

    #[test]
    fn film_arithmetic() {
        let mut p = params(2, 2, 1, 1);
        // silu(mean) is irrelevant with zero weights; the bias carries γ and β.
        p.film = Linear {
            weight: Tensor::zeros(&[2, 4]),
            bias: Some(Tensor::from_f64(&[0.5, -1.0, 1.0, 0.0], &[4]).unwrap()),
        };
        let e = Tensor::from_f64(&[0.3, 0.7], &[1, 1, 2]).unwrap();
        let levels = Tensor::from_f64(&[1.0, 2.0], &[1, 1, 1, 2]).unwrap();
        let z = p.text_to_visual(&e, &levels).unwrap();
        assert_eq!(z.to_vec(), vec![2.5, 0.0]);
    }

    #[test]
    fn single_token_mean_is_that_token() {
        let p = params(4, 4, 2, 3);
        let e = Tensor::from_f64(&[0.1, -0.2, 0.3, 0.4], &[1, 1, 4]).unwrap();
        let m = p.modulation(&e).unwrap();
        let direct = p.film.forward(&e.reshape(&[1, 4]).unwrap().silu()).unwrap();
        assert_eq!(&direct.data()[..4], m.gamma.data());
    }

    #[test]
    fn zeroed_self_attention_output_gives_level_mean() {
        let mut p = params(4, 4, 2, 4);
        zero(&mut p.self_attn.out);
        let mut rng = Rng::new(5);
        let raw = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let modulated = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let z = p.integrate_levels(&modulated, &raw).unwrap();
        let expect = raw.mean_axis(2, false).unwrap();
        for (a, b) in z.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_level_attends_to_itself() {
        let p = params(4, 4, 2, 6);
        let x = Tensor::randn(&[1, 2, 1, 4], 1.0, &mut Rng::new(7));
        let z = p.integrate_levels(&x, &x).unwrap();
        let h = p.ln_self.forward(&x.reshape(&[2, 1, 4]).unwrap()).unwrap();
        let v = p.self_attn.out.forward(&p.self_attn.v.forward(&h).unwrap()).unwrap();
        let expect = x.reshape(&[2, 1, 4]).unwrap().add(&v).unwrap();
        for (a, b) in z.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_cross_attention_output_is_identity() {
        let mut p = params(6, 4, 2, 8);
        zero(&mut p.cross_attn.out);
        let mut rng = Rng::new(9);
        let e = Tensor::randn(&[2, 3, 6], 1.0, &mut rng);
        let z = Tensor::randn(&[2, 5, 4], 1.0, &mut rng);
        let out = p.visual_to_text(&e, &z).unwrap();
        assert_eq!(out.embeddings.data(), e.data());
    }

    #[test]
    fn identical_patches_give_token_independent_update() {
        let p = params(6, 4, 2, 10);
        let mut rng = Rng::new(11);
        let e = Tensor::randn(&[1, 3, 6], 1.0, &mut rng);
        let u = Tensor::randn(&[1, 1, 4], 1.0, &mut rng);
        let z = u.broadcast_to(&[1, 5, 4]).unwrap();
        let out = p.visual_to_text(&e, &z).unwrap();
        let delta = out.embeddings.sub(&e).unwrap();
        let ln_u = p.ln_k.forward(&u).unwrap();
        let expect = p.cross_attn.out.forward(&p.cross_attn.v.forward(&ln_u).unwrap()).unwrap();
        for row in delta.data().chunks(6) {
            for (a, b) in row.iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_initialized_fusion_is_identity() {
        let cfg = FusionConfig {
            heads: 2,
            zero_init_out: true,
            ..Default::default()
        };
        let mut p = FusionParams::<f64>::new(6, 4, &cfg, 12).unwrap();
        zero(&mut p.film);
        let mut rng = Rng::new(13);
        let e = Tensor::randn(&[2, 3, 6], 1.0, &mut rng);
        let levels = Tensor::randn(&[3, 2, 5, 4], 1.0, &mut rng);
        assert_eq!(p.fuse(&e, &levels).unwrap().embeddings.data(), e.data());
    }

    #[test]
    fn ablated_paths_and_parameter_sets() {
        let mut rng = Rng::new(14);
        let e = Tensor::<f64>::randn(&[2, 3, 6], 1.0, &mut rng);
        let levels = Tensor::randn(&[3, 2, 5, 4], 1.0, &mut rng);
        let no_v2t = FusionConfig {
            heads: 2,
            v2t: false,
            ..Default::default()
        };
        let p = FusionParams::<f64>::new(6, 4, &no_v2t, 1).unwrap();
        let out = p.fuse(&e, &levels).unwrap();
        assert!(out.attention.is_none());
        let d = out.embeddings.sub(&e).unwrap().to_vec();
        // One additive vector shared by every token of a sample.
        for b in 0..2 {
            for t in 1..3 {
                for c in 0..6 {
                    assert!((d[b * 18 + t * 6 + c] - d[b * 18 + c]).abs() < 1e-12);
                }
            }
        }
        let names: Vec<String> = p.named_params("fusion").into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().any(|n| n.starts_with("fusion.pool_proj")));
        assert!(!names.iter().any(|n| n.starts_with("fusion.cross_attn")));

        let mut off = FusionConfig {
            heads: 2,
            ..Default::default()
        };
        off.set_ablation(FusionAblation::prompt_only());
        let p = FusionParams::<f64>::new(6, 4, &off, 1).unwrap();
        assert_eq!(p.fuse(&e, &levels).unwrap().embeddings.data(), e.data());
        assert_eq!(p.param_count(), 0);
    }

    #[test]
    fn heads_must_divide_widths() {
        let cfg = FusionConfig {
            heads: 5,
            ..Default::default()
        };
        assert!(matches!(
            FusionParams::<f32>::new(48, 64, &cfg, 1),
            Err(Error::Config { .. })
        ));
    }
}
