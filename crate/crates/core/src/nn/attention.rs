use pirt_tensor::{cst, Real, TensorError, Var};
use rand::Rng;

use super::ctx::Forward;
use super::layers::LayerNorm;
use super::params::{ParamId, ParamStore};
use crate::error::{PirtError, Result};

/// Multi-head self-attention without positional encoding or biases.
///
/// Inputs are token sets `[S, n, d_model]`; every set attends only within
/// itself.
#[derive(Clone, Debug)]
pub struct Mhsa {
    pub heads: Vec<HeadParams>,
    pub merge: ParamId,
    pub d_model: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl Mhsa {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(PirtError::Config(format!(
                "model width {d_model} is not divisible by {heads} heads"
            )));
        }
        let dk = d_model / heads;
        let heads = (0..heads)
            .map(|i| HeadParams {
                wq: store.add_uniform(format!("{prefix}.h{i}.wq"), &[d_model, dk], d_model, rng),
                wk: store.add_uniform(format!("{prefix}.h{i}.wk"), &[d_model, dk], d_model, rng),
                wv: store.add_uniform(format!("{prefix}.h{i}.wv"), &[d_model, dk], d_model, rng),
            })
            .collect();
        let merge = store.add_uniform(format!("{prefix}.wh"), &[d_model, d_model], d_model, rng);
        Ok(Mhsa { heads, merge, d_model })
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads.len()
    }

    pub fn forward<T: Real>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_attention(ctx, x)?.0)
    }

    /// Also returns each head's attention weights `[S, n, n]`, rows over keys.
    pub fn forward_with_attention<T: Real>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.d_model {
            return Err(TensorError::Dimension {
                op: "mhsa",
                msg: format!("expected [sets, tokens, {}], got {shape:?}", self.d_model),
            }
            .into());
        }
        let (sets, n, d) = (shape[0], shape[1], shape[2]);
        let dk = self.d_k();
        let scale = cst::<T>(1.0 / (dk as f64).sqrt());
        let flat = ctx.tape.reshape(x, &[sets * n, d])?;
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let project = |ctx: &mut Forward<'_, T>, w: ParamId| -> Result<Var> {
                let w = ctx.param(w);
                let p = ctx.tape.matmul(flat, w)?;
                Ok(ctx.tape.reshape(p, &[sets, n, dk])?)
            };
            let q = project(ctx, head.wq)?;
            let k = project(ctx, head.wk)?;
            let v = project(ctx, head.wv)?;
            let kt = ctx.tape.transpose(k, 1, 2)?;
            let logits = ctx.tape.bmm(q, kt)?;
            let logits = ctx.tape.mul_scalar(logits, scale);
            let attn = ctx.tape.softmax(logits, 2)?;
            outs.push(ctx.tape.bmm(attn, v)?);
            weights.push(attn);
        }
        let cat = ctx.tape.concat(&outs, 2)?;
        let cat = ctx.tape.reshape(cat, &[sets * n, d])?;
        let wh = ctx.param(self.merge);
        let y = ctx.tape.matmul(cat, wh)?;
        Ok((ctx.tape.reshape(y, &shape)?, weights))
    }
}

/// Two linear maps with a ReLU and dropout between them.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl Ffn {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        d_ff: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(PirtError::Config(format!("dropout rate {dropout} outside [0, 1)")));
        }
        Ok(Ffn {
            w1: store.add_uniform(format!("{prefix}.w1"), &[d_model, d_ff], d_model, rng),
            b1: store.add(format!("{prefix}.b1"), pirt_tensor::Tensor::zeros(&[d_ff]), true),
            w2: store.add_uniform(format!("{prefix}.w2"), &[d_ff, d_model], d_ff, rng),
            b2: store.add(format!("{prefix}.b2"), pirt_tensor::Tensor::zeros(&[d_model]), true),
            d_model,
            d_ff,
            dropout,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.last() != Some(&self.d_model) {
            return Err(TensorError::Dimension {
                op: "ffn",
                msg: format!("expected last extent {}, got {shape:?}", self.d_model),
            }
            .into());
        }
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let flat = ctx.tape.reshape(x, &[rows, self.d_model])?;
        let w1 = ctx.param(self.w1);
        let b1 = ctx.param(self.b1);
        let w2 = ctx.param(self.w2);
        let b2 = ctx.param(self.b2);
        let h = ctx.tape.matmul(flat, w1)?;
        let h = ctx.tape.add(h, b1)?;
        let h = ctx.tape.relu(h);
        let h = ctx.dropout(h, self.dropout)?;
        let y = ctx.tape.matmul(h, w2)?;
        let y = ctx.tape.add(y, b2)?;
        Ok(ctx.tape.reshape(y, &shape)?)
    }
}

/// Post-norm transformer unit: `LN(x + MHSA(x))` then `LN(x + FFN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerUnit {
    pub mhsa: Mhsa,
    pub ffn: Ffn,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
}

impl TransformerUnit {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(TransformerUnit {
            mhsa: Mhsa::new(store, &format!("{prefix}.mhsa"), d_model, heads, rng)?,
            ffn: Ffn::new(store, &format!("{prefix}.ffn"), d_model, d_ff, dropout, rng)?,
            norm1: LayerNorm::new(store, &format!("{prefix}.ln1"), d_model),
            norm2: LayerNorm::new(store, &format!("{prefix}.ln2"), d_model),
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let a = self.mhsa.forward(ctx, x)?;
        let x = ctx.tape.add(x, a)?;
        let x = self.norm1.forward(ctx, x)?;
        let f = self.ffn.forward(ctx, x)?;
        let x = ctx.tape.add(x, f)?;
        self.norm2.forward(ctx, x)
    }
}

/// A sequence of transformer units; zero units is the identity.
#[derive(Clone, Debug, Default)]
pub struct TransformerStack {
    pub units: Vec<TransformerUnit>,
}

impl TransformerStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        units: usize,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let units = (0..units)
            .map(|i| TransformerUnit::new(store, &format!("{prefix}.u{i}"), d_model, heads, d_ff, dropout, rng))
            .collect::<Result<_>>()?;
        Ok(TransformerStack { units })
    }

    /// `x` is `[S, n, d_model]` with `n >= 1`.
    pub fn forward<T: Real>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x);
        if shape.len() != 3 || shape[1] == 0 {
            return Err(PirtError::Contract(format!(
                "token sets must be non-empty [sets, tokens, dim], got {shape:?}"
            )));
        }
        self.units.iter().try_fold(x, |x, unit| unit.forward(ctx, x))
    }
}
