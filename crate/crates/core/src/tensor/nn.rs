//! Parameterized layers built from the tensor operations.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const LN_EPS: f64 = 1e-5;

/// Named-parameter traversal, used by checkpoints and the optimizer.
pub trait Parameters<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// Flips the trainable flag on every parameter.
    fn set_trainable(&mut self, trainable: bool) {
        self.visit_mut("", &mut |_, t| *t = t.with_requires_grad(trainable));
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<T: Scalar> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Tensor::full(&[dim], 1.0),
            bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gain, &self.bias, LN_EPS)
    }
}

impl<T: Scalar> Parameters<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "gain"), &mut self.gain);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// `x @ weight + bias`, weight stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    /// Fan-in scaled normal weights, zero bias.
    pub fn new(fan_in: usize, fan_out: usize, bias: bool, rng: &mut Rng) -> Self {
        Self {
            weight: Tensor::randn(&[fan_in, fan_out], (fan_in as f64).powf(-0.5), rng),
            bias: bias.then(|| Tensor::zeros(&[fan_out])),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: bias.then(|| Tensor::zeros(&[fan_out])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Multi-head attention with query width `dq` and key/value source width `dk`.
///
/// Keys carry no bias: a key bias shifts every logit of a query by the same
/// amount and cancels in the softmax.
#[derive(Debug, Clone)]
pub struct AttentionParams<T: Scalar> {
    pub heads: usize,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn new(dq: usize, dk: usize, heads: usize, zero_out: bool, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || dq % heads != 0 {
            return Err(Error::config(
                "heads",
                format!("query width {dq} is not divisible by {heads} heads"),
            ));
        }
        Ok(Self {
            heads,
            q: Linear::new(dq, dq, true, rng),
            k: Linear::new(dk, dq, false, rng),
            v: Linear::new(dk, dq, true, rng),
            out: if zero_out {
                Linear::zeros(dq, dq, true)
            } else {
                Linear::new(dq, dq, true, rng)
            },
        })
    }

    pub fn query_dim(&self) -> usize {
        self.q.in_dim()
    }

    pub fn key_dim(&self) -> usize {
        self.k.in_dim()
    }
}

impl<T: Scalar> Parameters<T> for AttentionParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "wq"), &self.q.weight);
        f(join(prefix, "bq"), self.q.bias.as_ref().expect("q bias"));
        f(join(prefix, "wk"), &self.k.weight);
        f(join(prefix, "wv"), &self.v.weight);
        f(join(prefix, "bv"), self.v.bias.as_ref().expect("v bias"));
        f(join(prefix, "wo"), &self.out.weight);
        f(join(prefix, "bo"), self.out.bias.as_ref().expect("out bias"));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "wq"), &mut self.q.weight);
        f(join(prefix, "bq"), self.q.bias.as_mut().expect("q bias"));
        f(join(prefix, "wk"), &mut self.k.weight);
        f(join(prefix, "wv"), &mut self.v.weight);
        f(join(prefix, "bv"), self.v.bias.as_mut().expect("v bias"));
        f(join(prefix, "wo"), &mut self.out.weight);
        f(join(prefix, "bo"), self.out.bias.as_mut().expect("out bias"));
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput<T: Scalar> {
    /// `[B, Lq, dq]`
    pub output: Tensor<T>,
    /// Per-head attention probabilities, `[B, H, Lq, Lk]`.
    pub weights: Tensor<T>,
}

/// Scaled dot-product attention per head, concatenated and output-projected.
///
/// `mask` is added to the logits and must broadcast to `[B, H, Lq, Lk]`.
pub fn multihead_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    params: &AttentionParams<T>,
    mask: Option<&Tensor<T>>,
) -> Result<AttentionOutput<T>> {
    let (dq, dk, h) = (params.query_dim(), params.key_dim(), params.heads);
    let bad = q.rank() != 3
        || k.rank() != 3
        || v.rank() != 3
        || q.dim(2) != dq
        || k.dim(2) != dk
        || v.dim(2) != dk
        || q.dim(0) != k.dim(0)
        || k.shape()[..2] != v.shape()[..2];
    if bad {
        return Err(Error::config(
            "attention",
            format!(
                "q {:?}, k {:?}, v {:?} do not fit query width {dq} / key width {dk}",
                q.shape(),
                k.shape(),
                v.shape()
            ),
        ));
    }
    let (b, lq, lk) = (q.dim(0), q.dim(1), k.dim(1));
    let dh = dq / h;

    let split = |x: Tensor<T>, len: usize| -> Result<Tensor<T>> {
        x.reshape(&[b, len, h, dh])?.permute(&[0, 2, 1, 3])
    };
    let qh = split(params.q.forward(q)?, lq)?;
    let kh = split(params.k.forward(k)?, lk)?;
    let vh = split(params.v.forward(v)?, lk)?;

    let mut logits = qh.bmm(&kh, true)?.scale(1.0 / (dh as f64).sqrt());
    if let Some(m) = mask {
        logits = logits.add(m)?;
    }
    let weights = logits.softmax()?;
    let ctx = weights
        .bmm(&vh, false)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, lq, dq])?;
    Ok(AttentionOutput {
        output: params.out.forward(&ctx)?,
        weights,
    })
}

/// Additive causal mask `[L, L]`: 0 on and below the diagonal, -inf above.
pub fn causal_mask<T: Scalar>(len: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            data[i * len + j] = T::neg_infinity();
        }
    }
    Tensor::new(data, &[len, len]).expect("square mask")
}
