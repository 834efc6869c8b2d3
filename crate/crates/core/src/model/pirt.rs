use pirt_tensor::{cst, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::{apply_confidence, Backbone, Csm, Irm};
use super::config::ModelConfig;
use super::loss::{cross_entropy, hard_triplet};
use super::partition::{patch_tokens, pose_tokens, stripe_tokens};
use crate::error::{PirtError, Result};
use crate::nn::{BatchNorm, Forward, Linear, ParamStore, TransformerStack};
use crate::pose::{Group, PoseGuidance, NUM_GROUPS, NUM_KEYPOINTS};

/// One batch of network inputs.
#[derive(Clone, Debug)]
pub struct ModelInput<T> {
    /// `[B, H, W, 3]`.
    pub images: Tensor<T>,
    /// Human masks `[B, H_f, W_f, 1]`.
    pub masks: Tensor<T>,
    /// Keypoint pooling weights `[B, P, H_f · W_f]`.
    pub pool_weights: Tensor<T>,
    /// Pose group scores `[B, 3]`.
    pub group_scores: Tensor<T>,
}

impl<T: Real> ModelInput<T> {
    /// Stacks per-image pixels (`H × W × 3`, row-major) and pose guidance.
    pub fn assemble(config: &ModelConfig, images: &[&[f32]], guidance: &[&PoseGuidance]) -> Result<Self> {
        let b = images.len();
        let (h, w) = (config.image_h, config.image_w);
        let (fh, fw) = config.feature_hw();
        if b == 0 || guidance.len() != b {
            return Err(PirtError::Contract(format!("{b} images with {} pose records", guidance.len())));
        }
        let px = h * w * 3;
        let mut pixels = Vec::with_capacity(b * px);
        for img in images {
            if img.len() != px {
                return Err(PirtError::Contract(format!("image holds {} values, model expects {px}", img.len())));
            }
            pixels.extend(img.iter().map(|&v| cst::<T>(v as f64)));
        }
        let mut masks = Vec::with_capacity(b * fh * fw);
        let mut weights = Vec::with_capacity(b * NUM_KEYPOINTS * fh * fw);
        let mut scores = Vec::with_capacity(b * NUM_GROUPS);
        for g in guidance {
            if (g.mask.height, g.mask.width) != (fh, fw) {
                return Err(PirtError::Contract(format!(
                    "pose guidance on a {}×{} grid, model features are {fh}×{fw}",
                    g.mask.height, g.mask.width
                )));
            }
            masks.extend(g.mask.values.iter().map(|&v| cst::<T>(v)));
            weights.extend(g.pool_weights.data().iter().map(|&v| cst::<T>(v)));
            scores.extend(g.group_scores.iter().map(|&v| cst::<T>(v)));
        }
        Ok(ModelInput {
            images: Tensor::new(&[b, h, w, 3], pixels)?,
            masks: Tensor::new(&[b, fh, fw, 1], masks)?,
            pool_weights: Tensor::new(&[b, NUM_KEYPOINTS, fh * fw], weights)?,
            group_scores: Tensor::new(&[b, NUM_GROUPS], scores)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.images.shape()[0]
    }
}

/// Tape handles of everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub features: Var,
    pub irm: Var,
    pub f_stripe: Var,
    pub f_patch: Var,
    pub f_global: Var,
    /// Post-neck stripe, patch and global embeddings `[B, C]`.
    pub emb_stripe: Var,
    pub emb_patch: Var,
    pub emb_global: Var,
    pub logits_stripe: Var,
    pub logits_patch: Var,
    pub pose: Option<PoseOutput>,
}

#[derive(Clone, Debug)]
pub struct PoseOutput {
    /// Per-group embeddings before confidence weighting `[B, 3, C]`.
    pub hat: Var,
    pub self_scores: Var,
    /// Confidence-weighted group embeddings `[B, 3, C]`.
    pub tilde: Var,
    /// L1-normalized group weights `[B, 3]`.
    pub combined: Var,
    /// Post-neck weighted group embeddings, one `[B, C]` per group.
    pub emb: Vec<Var>,
    pub logits: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub local: Option<Var>,
    pub global: Var,
    pub total: Var,
}

/// The assembled network. Holds parameter handles only; values live in a
/// [`ParamStore`] of either precision.
#[derive(Clone, Debug)]
pub struct Pirt {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub irm: Option<Irm>,
    pub irt_stripe: Option<TransformerStack>,
    pub irt_patch: Option<TransformerStack>,
    pub irt_pose: Option<TransformerStack>,
    pub csm: Option<Csm>,
    pub neck_stripe: BatchNorm,
    pub neck_patch: BatchNorm,
    pub neck_pose: Vec<BatchNorm>,
    pub head_stripe: Linear,
    pub head_patch: Linear,
    pub head_pose: Vec<Linear>,
}

impl Pirt {
    /// Registers every parameter in `store` with initial values drawn from
    /// `seed`.
    pub fn build<T: Real>(config: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let backbone = Backbone::new(store, c, &mut rng);
        let irm = if config.use_intra {
            Some(Irm::new(store, c, config.irm_dim, config.heads, config.dropout, &mut rng)?)
        } else {
            None
        };
        let mut stack = |name: &str, store: &mut ParamStore<T>, on: bool| -> Result<Option<TransformerStack>> {
            if !on {
                return Ok(None);
            }
            let s = TransformerStack::new(store, name, config.units, c, config.heads, config.ffn, config.dropout, &mut rng)?;
            Ok(Some(s))
        };
        let irt_stripe = stack("irt.stripe", store, config.use_inter)?;
        let irt_patch = stack("irt.patch", store, config.use_inter)?;
        let irt_pose = stack("irt.pose", store, config.use_inter && config.use_pose)?;
        let csm = config.use_pose.then(|| Csm::new(store, c, &mut rng));
        let neck_stripe = BatchNorm::new(store, "neck.stripe", c);
        let neck_patch = BatchNorm::new(store, "neck.patch", c);
        let k = config.num_classes;
        let head_stripe = Linear::new(store, "head.stripe", c, k, false, &mut rng);
        let head_patch = Linear::new(store, "head.patch", c, k, false, &mut rng);
        let (mut neck_pose, mut head_pose) = (Vec::new(), Vec::new());
        if config.use_pose {
            for g in Group::ALL {
                let name = format!("{g:?}").to_lowercase();
                neck_pose.push(BatchNorm::new(store, &format!("neck.{name}"), c));
                head_pose.push(Linear::new(store, &format!("head.{name}"), c, k, false, &mut rng));
            }
        }
        Ok(Pirt {
            config: config.clone(),
            backbone,
            irm,
            irt_stripe,
            irt_patch,
            irt_pose,
            csm,
            neck_stripe,
            neck_patch,
            neck_pose,
            head_stripe,
            head_patch,
            head_pose,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Forward<'_, T>, input: &ModelInput<T>) -> Result<ModelOutput> {
        let (h, w) = (self.config.image_h, self.config.image_w);
        let shape = input.images.shape();
        if shape.len() != 4 || shape[1..] != [h, w, 3] {
            return Err(PirtError::Config(format!("model expects [B, {h}, {w}, 3] images, got {shape:?}")));
        }
        let b = shape[0];
        let images = ctx.tape.constant(input.images.clone());
        let features = self.backbone.forward(ctx, images)?;
        let irm = match &self.irm {
            Some(irm) if self.config.use_pose => irm.forward(ctx, features, &input.masks)?,
            Some(irm) => irm.forward(ctx, features, &Tensor::ones(input.masks.shape()))?,
            None => features,
        };

        let stripes = stripe_tokens(&mut ctx.tape, irm)?;
        let patches = patch_tokens(&mut ctx.tape, irm)?;
        let f_stripe = self.embed_branch(ctx, self.irt_stripe.as_ref(), stripes)?;
        let f_patch = self.embed_branch(ctx, self.irt_patch.as_ref(), patches)?;
        let sum = ctx.tape.add(f_stripe, f_patch)?;
        let f_global = ctx.tape.mul_scalar(sum, cst(0.5));

        let emb_stripe = self.neck_stripe.forward(ctx, f_stripe)?;
        let emb_patch = self.neck_patch.forward(ctx, f_patch)?;
        let sum = ctx.tape.add(emb_stripe, emb_patch)?;
        let emb_global = ctx.tape.mul_scalar(sum, cst(0.5));
        let logits_stripe = self.head_stripe.forward(ctx, emb_stripe)?;
        let logits_patch = self.head_patch.forward(ctx, emb_patch)?;

        let pose = match &self.csm {
            Some(csm) => Some(self.pose_branch(ctx, csm, irm, input, b)?),
            None => None,
        };
        Ok(ModelOutput {
            features,
            irm,
            f_stripe,
            f_patch,
            f_global,
            emb_stripe,
            emb_patch,
            emb_global,
            logits_stripe,
            logits_patch,
            pose,
        })
    }

    /// Inter-part transformer (when enabled) then the token average.
    fn embed_branch<T: Real>(&self, ctx: &mut Forward<'_, T>, stack: Option<&TransformerStack>, tokens: Var) -> Result<Var> {
        let tokens = match stack {
            Some(s) => s.forward(ctx, tokens)?,
            None => tokens,
        };
        Ok(ctx.tape.mean(tokens, 1, false)?)
    }

    fn pose_branch<T: Real>(
        &self,
        ctx: &mut Forward<'_, T>,
        csm: &Csm,
        irm: Var,
        input: &ModelInput<T>,
        b: usize,
    ) -> Result<PoseOutput> {
        let c = self.config.channels;
        let tokens = pose_tokens(&mut ctx.tape, irm, &input.pool_weights)?;
        let mut group_embs = Vec::with_capacity(NUM_GROUPS);
        for g in Group::ALL {
            let members: Vec<usize> = g.members().collect();
            let part = ctx.tape.index_select(tokens, 1, &members)?;
            let e = self.embed_branch(ctx, self.irt_pose.as_ref(), part)?;
            group_embs.push(ctx.tape.reshape(e, &[b, 1, c])?);
        }
        let hat = ctx.tape.concat(&group_embs, 1)?;
        let self_scores = csm.scores(ctx, hat)?;
        let (tilde, combined) = apply_confidence(ctx, hat, self_scores, &input.group_scores)?;
        let mut emb = Vec::with_capacity(NUM_GROUPS);
        let mut logits = Vec::with_capacity(NUM_GROUPS);
        for g in 0..NUM_GROUPS {
            let row = ctx.tape.narrow(tilde, 1, g, 1)?;
            let row = ctx.tape.reshape(row, &[b, c])?;
            let e = self.neck_pose[g].forward(ctx, row)?;
            logits.push(self.head_pose[g].forward(ctx, e)?);
            emb.push(e);
        }
        Ok(PoseOutput {
            hat,
            self_scores,
            tilde,
            combined,
            emb,
            logits,
        })
    }

    /// Local loss over the three groups plus global cross entropy on the
    /// stripe and patch heads.
    pub fn loss<T: Real>(&self, ctx: &mut Forward<'_, T>, out: &ModelOutput, labels: &[usize]) -> Result<LossTerms> {
        let ce_stripe = cross_entropy(&mut ctx.tape, out.logits_stripe, labels)?;
        let ce_patch = cross_entropy(&mut ctx.tape, out.logits_patch, labels)?;
        let global = ctx.tape.add(ce_stripe, ce_patch)?;
        let local = match &out.pose {
            Some(pose) => {
                if pose.logits.len() != NUM_GROUPS || pose.emb.len() != NUM_GROUPS {
                    return Err(PirtError::Config("pose branch is missing classifier heads".into()));
                }
                let mut terms = Vec::with_capacity(2 * NUM_GROUPS);
                for g in 0..NUM_GROUPS {
                    terms.push(cross_entropy(&mut ctx.tape, pose.logits[g], labels)?);
                    terms.push(hard_triplet(&mut ctx.tape, pose.emb[g], labels, self.config.margin)?);
                }
                let mut acc = terms[0];
                for &t in &terms[1..] {
                    acc = ctx.tape.add(acc, t)?;
                }
                Some(ctx.tape.mul_scalar(acc, cst(1.0 / NUM_GROUPS as f64)))
            }
            None => None,
        };
        let total = match local {
            Some(l) => ctx.tape.add(l, global)?,
            None => global,
        };
        Ok(LossTerms { local, global, total })
    }
}
