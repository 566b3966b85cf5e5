//! Learnable prompt banks for the real, fake and shared-context tokens.

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::nn::{join, Parameters};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrangement {
    /// `[E_i; E_C]`
    #[serde(rename = "RF_then_C", alias = "rf_then_c")]
    RfThenC,
    /// `[E_C; E_i]`
    #[serde(rename = "C_then_RF", alias = "c_then_rf")]
    CThenRf,
    /// `[E_C[..⌈M/2⌉]; E_i; E_C[⌈M/2⌉..]]`
    Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    AllLearnable,
    NoContext,
    /// Real/fake tokens fixed to the word embeddings of "real" and "fake".
    FixedRf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    #[serde(rename = "K_r")]
    pub k_r: usize,
    #[serde(rename = "K_f")]
    pub k_f: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub arrangement: Arrangement,
    pub composition: Composition,
    pub dropout_rate: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            k_r: 2,
            k_f: 2,
            m: 16,
            arrangement: Arrangement::RfThenC,
            composition: Composition::AllLearnable,
            dropout_rate: 0.1,
        }
    }
}

impl PromptConfig {
    pub fn context_tokens(&self) -> usize {
        match self.composition {
            Composition::NoContext => 0,
            _ => self.m,
        }
    }

    /// Longest prompt handed to the text encoder, start/end excluded.
    pub fn max_prompt_len(&self) -> usize {
        let k = match self.composition {
            Composition::FixedRf => 1,
            _ => self.k_r.max(self.k_f),
        };
        k + self.context_tokens()
    }

    pub fn validate(&self, context_length: usize) -> Result<()> {
        if self.composition != Composition::FixedRf {
            if self.k_r == 0 {
                return Err(Error::config("prompts.K_r", "at least one real token is required"));
            }
            if self.k_f == 0 {
                return Err(Error::config("prompts.K_f", "at least one fake token is required"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(
                "prompts.dropout_rate",
                format!("{} is outside [0, 1)", self.dropout_rate),
            ));
        }
        if self.max_prompt_len() + 2 > context_length {
            return Err(Error::config(
                "prompts.M",
                format!(
                    "{} prompt tokens plus start/end exceed context length {context_length}",
                    self.max_prompt_len()
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PromptBank<T: Scalar = f32> {
    pub real: Tensor<T>,
    pub fake: Tensor<T>,
    pub context: Option<Tensor<T>>,
}

impl<T: Scalar> PromptBank<T> {
    pub fn init(cfg: &PromptConfig, backbone: &Backbone<T>, seed: u64) -> Result<Self> {
        cfg.validate(backbone.cfg.context_length)?;
        let dt = backbone.cfg.text_width;
        let std = (dt as f64).powf(-0.5);
        let mut rng = Rng::new(seed);
        let mut draw = |k: usize| Tensor::<T>::randn(&[k, dt], std, &mut rng).into_param();
        let (real, fake) = match cfg.composition {
            Composition::FixedRf => {
                let tok = backbone.tokenizer();
                (
                    backbone.embed_tokens(&tok.encode("real"))?,
                    backbone.embed_tokens(&tok.encode("fake"))?,
                )
            }
            _ => (draw(cfg.k_r), draw(cfg.k_f)),
        };
        let context = match cfg.composition {
            Composition::NoContext => None,
            _ => Some(draw(cfg.m)),
        };
        Ok(Self { real, fake, context })
    }

    pub fn text_width(&self) -> usize {
        self.real.dim(1)
    }

    /// Banks repeated over the batch with dropout applied in training.
    pub fn batched(&self, batch: usize, rate: f64, train: bool, rng: &mut Rng) -> Result<BatchedBank<T>> {
        let rep = |e: &Tensor<T>, rng: &mut Rng| -> Result<Tensor<T>> {
            let x = e.reshape(&[1, e.dim(0), e.dim(1)])?.broadcast_to(&[batch, e.dim(0), e.dim(1)])?;
            dropout(&x, rate, train, rng)
        };
        Ok(BatchedBank {
            real: rep(&self.real, rng)?,
            fake: rep(&self.fake, rng)?,
            context: self.context.as_ref().map(|c| rep(c, rng)).transpose()?,
        })
    }
}

impl<T: Scalar> Parameters<T> for PromptBank<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "real"), &self.real);
        f(join(prefix, "fake"), &self.fake);
        if let Some(c) = &self.context {
            f(join(prefix, "context"), c);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "real"), &mut self.real);
        f(join(prefix, "fake"), &mut self.fake);
        if let Some(c) = &mut self.context {
            f(join(prefix, "context"), c);
        }
    }
}

/// `[B, K, d_t]` views of the three banks.
#[derive(Debug, Clone)]
pub struct BatchedBank<T: Scalar> {
    pub real: Tensor<T>,
    pub fake: Tensor<T>,
    pub context: Option<Tensor<T>>,
}

/// Inverted dropout; the identity outside training or at rate 0.
pub fn dropout<T: Scalar>(x: &Tensor<T>, rate: f64, train: bool, rng: &mut Rng) -> Result<Tensor<T>> {
    if !train || rate == 0.0 {
        return Ok(x.clone());
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.numel())
        .map(|_| if rng.bernoulli(rate) { T::zero() } else { keep })
        .collect();
    x.mul(&Tensor::new(mask, x.shape())?)
}

/// Joins a class bank with the context bank along the token axis.
pub fn arrange_prompt<T: Scalar>(
    class: &Tensor<T>,
    context: Option<&Tensor<T>>,
    arrangement: Arrangement,
) -> Result<Tensor<T>> {
    let Some(c) = context else {
        return Ok(class.clone());
    };
    match arrangement {
        Arrangement::RfThenC => Tensor::concat(&[class, c], 1),
        Arrangement::CThenRf => Tensor::concat(&[c, class], 1),
        Arrangement::Split => {
            let m = c.dim(1);
            let head = m.div_ceil(2);
            let lead = c.narrow(1, 0, head)?;
            let tail = c.narrow(1, head, m - head)?;
            Tensor::concat(&[&lead, class, &tail], 1)
        }
    }
}
