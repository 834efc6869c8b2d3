use pirt_tensor::{cst, moments, Mode, Real, Tensor, Var};
use rand::Rng;

use super::ctx::Forward;
use super::params::{ParamId, ParamStore};
use crate::error::{PirtError, Result};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

fn last_dim<T: Real>(ctx: &Forward<'_, T>, x: Var) -> usize {
    *ctx.tape.shape(x).last().expect("rank >= 1")
}

/// `x W + b` over the last axis of `x`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.w"), &[in_dim, out_dim], in_dim, rng);
        let bias = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]), true));
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(PirtError::Tensor(pirt_tensor::TensorError::Shape {
                op: "linear",
                lhs: shape,
                rhs: vec![self.in_dim, self.out_dim],
            }));
        }
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let flat = ctx.tape.reshape(x, &[rows, self.in_dim])?;
        let w = ctx.param(self.weight);
        let mut y = ctx.tape.matmul(flat, w)?;
        if let Some(b) = self.bias {
            let b = ctx.param(b);
            y = ctx.tape.add(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        Ok(ctx.tape.reshape(y, &out_shape)?)
    }
}

/// Square-kernel NHWC convolution with bias. 3×3 kernels use "same" padding,
/// 1×1 kernels none.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        let weight = store.add_uniform(format!("{name}.w"), &[kernel, kernel, in_ch, out_ch], kernel * kernel * in_ch, rng);
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[out_ch]), true);
        Conv2d { weight, bias, kernel, stride }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        let y = ctx.tape.conv2d(x, w, self.stride, self.kernel / 2)?;
        Ok(ctx.tape.add(y, b)?)
    }
}

/// Batch normalization over every axis but the last (channels).
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), false),
            channels,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        if last_dim(ctx, x) != self.channels {
            return Err(PirtError::Contract(format!(
                "batch norm over {} channels got shape {:?}",
                self.channels,
                ctx.tape.shape(x)
            )));
        }
        let rank = ctx.tape.shape(x).len();
        let xhat = match ctx.mode() {
            Mode::Train => {
                let count: usize = ctx.tape.shape(x)[..rank - 1].iter().product();
                if count < 2 {
                    return Err(PirtError::Contract("batch norm in train mode needs at least 2 values per channel".into()));
                }
                let (mean, var) = moments(ctx.tape.value(x), 0..rank - 1);
                let unbias = count as f64 / (count as f64 - 1.0);
                update_running(ctx.store_mut(), self.running_mean, self.running_var, &[mean], &[var], unbias);
                ctx.tape.normalize(x, 0..rank - 1, cst(NORM_EPS))?
            }
            Mode::Eval => {
                let mean = ctx.store().get(self.running_mean).clone();
                let inv = ctx.store().get(self.running_var).map(|v| T::one() / (v + cst(NORM_EPS)).sqrt());
                let mean = ctx.tape.constant(mean);
                let inv = ctx.tape.constant(inv);
                let centered = ctx.tape.sub(x, mean)?;
                ctx.tape.mul(centered, inv)?
            }
        };
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        let scaled = ctx.tape.mul(xhat, g)?;
        Ok(ctx.tape.add(scaled, b)?)
    }
}

/// Folds batch statistics into running buffers with momentum 0.1. `means` and
/// `vars` hold one channel vector per instance; their average is used.
fn update_running<T: Real>(
    store: &mut ParamStore<T>,
    mean_id: ParamId,
    var_id: ParamId,
    means: &[Vec<T>],
    vars: &[Vec<T>],
    unbias: f64,
) {
    let n = cst::<T>(means.len() as f64);
    let m = cst::<T>(NORM_MOMENTUM);
    let keep = T::one() - m;
    let unbias = cst::<T>(unbias);
    for (c, rm) in store.get_mut(mean_id).data_mut().iter_mut().enumerate() {
        let batch: T = means.iter().map(|v| v[c]).sum::<T>() / n;
        *rm = keep * *rm + m * batch;
    }
    for (c, rv) in store.get_mut(var_id).data_mut().iter_mut().enumerate() {
        let batch: T = vars.iter().map(|v| v[c]).sum::<T>() / n;
        *rv = keep * *rv + m * batch * unbias;
    }
}

/// Instance normalization of `[B, H, W, C]` maps over their spatial axes.
/// Running statistics (averaged over instances) are tracked for eval mode.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl InstanceNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        InstanceNorm {
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), false),
            channels,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != self.channels {
            return Err(PirtError::Contract(format!(
                "instance norm over {} channels got shape {shape:?}",
                self.channels
            )));
        }
        match ctx.mode() {
            Mode::Train => {
                let (mean, var) = moments(ctx.tape.value(x), 1..3);
                let c = self.channels;
                let means: Vec<Vec<T>> = mean.chunks(c).map(<[T]>::to_vec).collect();
                let vars: Vec<Vec<T>> = var.chunks(c).map(<[T]>::to_vec).collect();
                let count = (shape[1] * shape[2]) as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                update_running(ctx.store_mut(), self.running_mean, self.running_var, &means, &vars, unbias);
                Ok(ctx.tape.normalize(x, 1..3, cst(NORM_EPS))?)
            }
            Mode::Eval => {
                let mean = ctx.store().get(self.running_mean).clone();
                let inv = ctx.store().get(self.running_var).map(|v| T::one() / (v + cst(NORM_EPS)).sqrt());
                let mean = ctx.tape.constant(mean);
                let inv = ctx.tape.constant(inv);
                let centered = ctx.tape.sub(x, mean)?;
                Ok(ctx.tape.mul(centered, inv)?)
            }
        }
    }
}

/// Layer normalization over the last axis with a learned affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), true),
            dim,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let rank = ctx.tape.shape(x).len();
        if last_dim(ctx, x) != self.dim {
            return Err(PirtError::Contract(format!(
                "layer norm over {} got shape {:?}",
                self.dim,
                ctx.tape.shape(x)
            )));
        }
        let xhat = ctx.tape.normalize(x, rank - 1..rank, cst(NORM_EPS))?;
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        let scaled = ctx.tape.mul(xhat, g)?;
        Ok(ctx.tape.add(scaled, b)?)
    }
}
