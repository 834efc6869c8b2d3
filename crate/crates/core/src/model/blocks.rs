use pirt_tensor::{cst, Real, Tensor, TensorError, Var};
use rand::Rng;

use crate::error::{PirtError, Result};
use crate::nn::{BatchNorm, Conv2d, Forward, InstanceNorm, Linear, Mhsa, ParamStore};

/// Four 3×3 conv–BN–ReLU blocks; the middle two halve the resolution.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub blocks: Vec<(Conv2d, BatchNorm)>,
    pub channels: usize,
}

impl Backbone {
    pub fn new<T: Real>(store: &mut ParamStore<T>, channels: usize, rng: &mut impl Rng) -> Self {
        let plan = [(3, channels / 4, 1), (channels / 4, channels / 2, 2), (channels / 2, channels, 2), (channels, channels, 1)];
        let blocks = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, stride))| {
                let conv = Conv2d::new(store, &format!("backbone.b{i}.conv"), cin, cout, 3, stride, rng);
                let bn = BatchNorm::new(store, &format!("backbone.b{i}.bn"), cout);
                (conv, bn)
            })
            .collect();
        Backbone { blocks, channels }
    }

    /// `[B, H, W, 3]` images to `[B, H/4, W/4, C]` features.
    pub fn forward<T: Real>(&self, ctx: &mut Forward<'_, T>, images: Var) -> Result<Var> {
        let shape = ctx.tape.shape(images);
        if shape.len() != 4 || shape[3] != 3 || shape[1] % 4 != 0 || shape[2] % 4 != 0 {
            return Err(PirtError::Config(format!(
                "backbone needs [B, H, W, 3] images with H and W divisible by 4, got {shape:?}"
            )));
        }
        self.blocks.iter().try_fold(images, |x, (conv, bn)| {
            let y = conv.forward(ctx, x)?;
            let y = bn.forward(ctx, y)?;
            Ok(ctx.tape.relu(y))
        })
    }
}

/// Intra-part relational module: stripe-wise self-attention inside the
/// feature map plus a pose-masked residual.
#[derive(Clone, Debug)]
pub struct Irm {
    pub phi_conv: Conv2d,
    pub phi_in: InstanceNorm,
    pub phi_bn: BatchNorm,
    pub mhsa: Mhsa,
    pub mid_bn: BatchNorm,
    pub theta_conv: Conv2d,
    pub theta_bn: BatchNorm,
    pub dropout: f64,
}

impl Irm {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        channels: usize,
        dim: usize,
        heads: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Irm {
            phi_conv: Conv2d::new(store, "irm.phi.conv", channels, dim, 1, 1, rng),
            phi_in: InstanceNorm::new(store, "irm.phi.in", dim),
            phi_bn: BatchNorm::new(store, "irm.phi.bn", dim),
            mhsa: Mhsa::new(store, "irm.mhsa", dim, heads, rng)?,
            mid_bn: BatchNorm::new(store, "irm.mid.bn", dim),
            theta_conv: Conv2d::new(store, "irm.theta.conv", dim, channels, 1, 1, rng),
            theta_bn: BatchNorm::new(store, "irm.theta.bn", channels),
            dropout,
        })
    }

    /// `features` is `[B, H, W, C]`, `mask` is `[B, H, W, 1]` on the same grid.
    pub fn forward<T: Real>(&self, ctx: &mut Forward<'_, T>, features: Var, mask: &Tensor<T>) -> Result<Var> {
        let shape = ctx.tape.shape(features).to_vec();
        if mask.shape() != [shape[0], shape[1], shape[2], 1] {
            return Err(TensorError::Dimension {
                op: "irm",
                msg: format!("mask {:?} does not cover features {shape:?}", mask.shape()),
            }
            .into());
        }
        let (b, h, w) = (shape[0], shape[1], shape[2]);
        let d = self.mhsa.d_model;

        let phi = self.phi_conv.forward(ctx, features)?;
        let phi = self.phi_in.forward(ctx, phi)?;
        let phi = self.phi_bn.forward(ctx, phi)?;
        let phi = ctx.tape.relu(phi);

        // Each row of the grid is one stripe of `w` tokens.
        let stripes = ctx.tape.reshape(phi, &[b * h, w, d])?;
        let attended = self.mhsa.forward(ctx, stripes)?;
        let attended = ctx.tape.reshape(attended, &[b, h, w, d])?;
        let skip = ctx.dropout(phi, self.dropout)?;
        let star = ctx.tape.add(attended, skip)?;
        let star = self.mid_bn.forward(ctx, star)?;
        let star = ctx.tape.relu(star);

        let theta = self.theta_conv.forward(ctx, star)?;
        let theta = self.theta_bn.forward(ctx, theta)?;
        let complement = ctx.tape.masked_mul(features, mask)?;
        let out = ctx.tape.add(theta, complement)?;
        Ok(ctx.tape.relu(out))
    }
}

/// Confidence score module: a shared two-layer MLP scoring each group
/// embedding.
#[derive(Clone, Debug)]
pub struct Csm {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub const CONFIDENCE_EPS: f64 = 1e-8;

impl Csm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, channels: usize, rng: &mut impl Rng) -> Self {
        Csm {
            fc1: Linear::new(store, "csm.fc1", channels, channels / 2, true, rng),
            fc2: Linear::new(store, "csm.fc2", channels / 2, 1, true, rng),
        }
    }

    /// `[B, G, C]` group embeddings to `[B, G]` raw self-scores.
    pub fn scores<T: Real>(&self, ctx: &mut Forward<'_, T>, groups: Var) -> Result<Var> {
        let shape = ctx.tape.shape(groups).to_vec();
        let h = self.fc1.forward(ctx, groups)?;
        let h = ctx.tape.relu(h);
        let s = self.fc2.forward(ctx, h)?;
        Ok(ctx.tape.reshape(s, &shape[..2])?)
    }
}

/// Fuses self-scores `[B, G]` with pose scores `[B, G]` into L1-normalized
/// weights and applies them to `[B, G, C]` embeddings.
pub fn apply_confidence<T: Real>(
    ctx: &mut Forward<'_, T>,
    groups: Var,
    self_scores: Var,
    pose_scores: &Tensor<T>,
) -> Result<(Var, Var)> {
    let gate = ctx.tape.sigmoid(self_scores);
    let pose = ctx.tape.constant(pose_scores.clone());
    let raw = ctx.tape.mul(gate, pose)?;
    let total = ctx.tape.sum(raw, 1, true)?;
    let total = ctx.tape.add_scalar(total, cst(CONFIDENCE_EPS));
    let combined = ctx.tape.div(raw, total)?;
    let shape = ctx.tape.shape(combined).to_vec();
    let weights = ctx.tape.reshape(combined, &[shape[0], shape[1], 1])?;
    let weighted = ctx.tape.mul(groups, weights)?;
    Ok((weighted, combined))
}
