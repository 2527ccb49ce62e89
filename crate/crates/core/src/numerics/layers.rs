//! Parameterized building blocks composed on a [`Tape`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Array, NumericsError, ParamGroup, ParamId, ParamStore, Tape, Var};

/// Standard deviation of the default weight initializer.
pub const INIT_STD: f32 = 0.02;

/// Normal(0, std) samples truncated to two standard deviations.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f32) -> Array {
    let dist = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Array::new(shape.to_vec(), data).expect("length matches shape")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Registers `{name}.weight` (`fan_in x fan_out`) and `{name}.bias`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            truncated_normal(rng, &[fan_in, fan_out], INIT_STD),
            group,
            true,
        );
        let bias = store.add(format!("{name}.bias"), Array::zeros(&[fan_out]), group, false);
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, NumericsError> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        let gain = store.add(format!("{name}.gain"), Array::full(&[dim], 1.0), group, false);
        let bias = store.add(format!("{name}.bias"), Array::zeros(&[dim]), group, false);
        Self { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, NumericsError> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b, super::ops::LAYER_NORM_EPS)
    }
}

/// Multi-head scaled dot-product attention with input and output
/// projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(NumericsError::IndivisibleHeads { d_model, heads });
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), d_model, d_model, group, rng),
            key: Linear::new(store, &format!("{name}.key"), d_model, d_model, group, rng),
            value: Linear::new(store, &format!("{name}.value"), d_model, d_model, group, rng),
            output: Linear::new(store, &format!("{name}.output"), d_model, d_model, group, rng),
            heads,
            d_model,
        })
    }

    /// Attends from `x_q` over keys `x_k` and values `x_v`.
    ///
    /// `mask` is additive, `t_q x t_k` or a single `1 x t_k` row. When
    /// `trace` is given, each head's attention probabilities are appended.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        x_q: Var,
        x_k: Var,
        x_v: Var,
        mask: Option<&Array>,
        mut trace: Option<&mut Vec<Array>>,
    ) -> Result<Var, NumericsError> {
        let dh = self.d_model / self.heads;
        let q = self.query.forward(tape, x_q)?;
        let q = tape.scale(q, 1.0 / (dh as f32).sqrt());
        let k = self.key.forward(tape, x_k)?;
        let v = self.value.forward(tape, x_v)?;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh)?,
                    tape.slice_cols(k, h * dh, dh)?,
                    tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = tape.matmul_nt(qh, kh)?;
            let probs = tape.softmax(scores, mask)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(tape.value(probs).clone());
            }
            outs.push(tape.matmul(probs, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        self.output.forward(tape, merged)
    }
}

/// Position-wise `down(gelu(up(x)))`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        inner: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d_model, inner, group, rng),
            down: Linear::new(store, &format!("{name}.down"), inner, d_model, group, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, NumericsError> {
        let h = self.up.forward(tape, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, h)
    }
}
