use pirt_tensor::{Real, Tape, Tensor, Var, Window};

use crate::error::{PirtError, Result};
use crate::parts::{PartKind, PartTokenSet};
use crate::pose::{pose_part_pool, HeatmapStack};

pub const PATCH_WINDOW: (usize, usize) = (4, 2);

fn grid<T: Real>(tape: &Tape<T>, f: Var) -> Result<(usize, usize, usize, usize)> {
    match *tape.shape(f) {
        [b, h, w, c] => Ok((b, h, w, c)),
        ref s => Err(PirtError::Contract(format!("feature maps must be [B, H, W, C], got {s:?}"))),
    }
}

/// One token per row: the width-average of that row. `[B, H, C]`.
pub fn stripe_tokens<T: Real>(tape: &mut Tape<T>, f: Var) -> Result<Var> {
    grid(tape, f)?;
    Ok(tape.mean(f, 2, false)?)
}

/// Max over disjoint 4×2 windows, row-major. `[B, H/4 · W/2, C]`.
pub fn patch_tokens<T: Real>(tape: &mut Tape<T>, f: Var) -> Result<Var> {
    let (b, h, w, c) = grid(tape, f)?;
    let (kh, kw) = PATCH_WINDOW;
    if h % kh != 0 || w % kw != 0 {
        return Err(PirtError::Config(format!("feature grid {h}×{w} does not tile into {kh}×{kw} patches")));
    }
    let pooled = tape.max_pool2d(f, Window::new(PATCH_WINDOW, PATCH_WINDOW, (0, 0)))?;
    Ok(tape.reshape(pooled, &[b, (h / kh) * (w / kw), c])?)
}

/// Masked averages given per-image pooling weights `[B, P, H·W]`. `[B, P, C]`.
pub fn pose_tokens<T: Real>(tape: &mut Tape<T>, f: Var, weights: &Tensor<T>) -> Result<Var> {
    let (b, h, w, c) = grid(tape, f)?;
    let flat = tape.reshape(f, &[b, h * w, c])?;
    let weights = tape.constant(weights.clone());
    Ok(tape.bmm(weights, flat)?)
}

/// Tokens of a single `[H, W, C]` map, outside any tape.
pub fn partition(features: &Tensor<f64>, kind: PartKind, heatmaps: &HeatmapStack, tau: f64) -> Result<PartTokenSet<f64>> {
    if kind == PartKind::Pose {
        return pose_part_pool(heatmaps, features, tau);
    }
    let shape = features.shape();
    if shape.len() != 3 {
        return Err(PirtError::Contract(format!("features must be [H, W, C], got {shape:?}")));
    }
    let mut tape = Tape::new();
    let x = tape.constant(features.clone().reshaped(&[1, shape[0], shape[1], shape[2]])?);
    let t = match kind {
        PartKind::Stripe => stripe_tokens(&mut tape, x)?,
        _ => patch_tokens(&mut tape, x)?,
    };
    let t = tape.value(t);
    let n = t.shape()[1];
    Ok(PartTokenSet {
        tokens: t.clone().reshaped(&[n, shape[2]])?,
        kind,
        visible: vec![true; n],
        groups: None,
    })
}
