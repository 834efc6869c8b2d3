//! Finite-difference verification of layers and of the full training loss
//! with respect to their parameters, in double precision.

use pirt_tensor::{probe_coords, relative_error, Mode, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PirtError, Result};
use crate::model::{apply_confidence, cross_entropy, hard_triplet, Backbone, Csm, Irm, ModelConfig, ModelInput, Pirt};
use crate::nn::{BatchNorm, Ffn, Forward, InstanceNorm, LayerNorm, Linear, Mhsa, ParamStore, TransformerUnit};
use crate::pose::{Keypoint, KeypointState, PoseConfig, PoseGuidance, NUM_KEYPOINTS};

pub const SEEDS: [u64; 5] = [11, 23, 37, 41, 59];
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub struct ParamCheck {
    pub eps: f64,
    /// Coordinates probed per parameter tensor; `None` probes all.
    pub max_coords: Option<usize>,
}

impl Default for ParamCheck {
    fn default() -> Self {
        ParamCheck {
            eps: 1e-5,
            max_coords: Some(4),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub coords_checked: usize,
}

impl ParamCheck {
    /// Compares backward gradients of every trainable entry of `store` with
    /// central differences of `f`, evaluated in train mode with dropout
    /// stream `seed`.
    pub fn run<F>(&self, store: &ParamStore<f64>, seed: u64, f: F) -> Result<ParamReport>
    where
        F: Fn(&mut Forward<'_, f64>) -> Result<Var>,
    {
        let eval = |s: &ParamStore<f64>| -> Result<f64> {
            let mut s = s.clone();
            let mut ctx = Forward::new(&mut s, Mode::Train, seed);
            let loss = f(&mut ctx)?;
            let v = ctx.tape.value(loss).item();
            if !v.is_finite() {
                return Err(PirtError::Numeric(format!("loss is {v}")));
            }
            Ok(v)
        };
        let mut base = store.clone();
        let grads = {
            let mut ctx = Forward::new(&mut base, Mode::Train, seed);
            let loss = f(&mut ctx)?;
            ctx.backward(loss)?
        };
        let mut report = ParamReport {
            max_rel_error: 0.0,
            worst: String::new(),
            coords_checked: 0,
        };
        let mut probe = store.clone();
        for id in store.ids() {
            let entry = store.entry(id);
            if !entry.trainable {
                continue;
            }
            let zeros = Tensor::zeros(entry.value.shape());
            let analytic = grads[id.index()].as_ref().unwrap_or(&zeros);
            for i in probe_coords(entry.value.numel(), self.max_coords) {
                let orig = entry.value.data()[i];
                probe.get_mut(id).data_mut()[i] = orig + self.eps;
                let up = eval(&probe)?;
                probe.get_mut(id).data_mut()[i] = orig - self.eps;
                let down = eval(&probe)?;
                probe.get_mut(id).data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * self.eps);
                let err = relative_error(analytic.data()[i], numeric);
                report.coords_checked += 1;
                if err >= report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = format!("{}[{i}]", entry.name);
                }
            }
        }
        Ok(report)
    }
}

/// One row of the gradient table.
#[derive(Clone, Debug)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub worst: String,
    pub seeds: usize,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// A layer under test: builds its parameters (the input registered as a
/// trainable entry named `input`) and returns the scalar to differentiate.
pub struct Component {
    pub name: &'static str,
    pub tolerance: f64,
    #[allow(clippy::type_complexity)]
    pub build: Box<dyn Fn(u64) -> Result<(ParamStore<f64>, Box<dyn Fn(&mut Forward<'_, f64>) -> Result<Var>>)>>,
}

impl Component {
    pub fn check(&self, seeds: &[u64], check: &ParamCheck) -> Result<CheckRow> {
        let mut row = CheckRow {
            name: self.name.to_string(),
            max_rel_error: 0.0,
            tolerance: self.tolerance,
            worst: String::new(),
            seeds: seeds.len(),
        };
        for &seed in seeds {
            let (store, f) = (self.build)(seed)?;
            let rep = check.run(&store, seed, f)?;
            if rep.max_rel_error >= row.max_rel_error {
                row.max_rel_error = rep.max_rel_error;
                row.worst = format!("{} (seed {seed})", rep.worst);
            }
        }
        Ok(row)
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Weights every output element by a fixed random coefficient and sums.
fn project(ctx: &mut Forward<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(&mut rng, ctx.tape.shape(y));
    let w = ctx.tape.constant(w);
    let p = ctx.tape.mul(y, w)?;
    Ok(ctx.tape.sum_all(p))
}

fn with_input(seed: u64, shape: &[usize]) -> (ParamStore<f64>, ChaCha8Rng, crate::nn::ParamId) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let input = store.add("input", random(&mut rng, shape), true);
    (store, rng, input)
}

macro_rules! component {
    ($name:expr, $tol:expr, |$seed:ident| $body:block) => {
        Component {
            name: $name,
            tolerance: $tol,
            build: Box::new(move |$seed: u64| -> Result<(ParamStore<f64>, Box<dyn Fn(&mut Forward<'_, f64>) -> Result<Var>>)> { $body }),
        }
    };
}

/// `images` random images with random keypoints, labels alternating 0, 1.
pub fn micro_batch(config: &ModelConfig, seed: u64, images: usize) -> Result<(ModelInput<f64>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba7c);
    let (h, w) = (config.image_h, config.image_w);
    let pixels: Vec<Vec<f32>> = (0..images).map(|_| (0..h * w * 3).map(|_| rng.random::<f32>()).collect()).collect();
    let guidance: Vec<PoseGuidance> = (0..images)
        .map(|_| {
            let kps: Vec<Keypoint> = (0..NUM_KEYPOINTS)
                .map(|_| Keypoint {
                    x: rng.random_range(0.0..w as f64),
                    y: rng.random_range(0.0..h as f64),
                    state: match rng.random_range(0..4) {
                        0 => KeypointState::Occluded,
                        _ => KeypointState::Visible,
                    },
                })
                .collect();
            PoseGuidance::from_keypoints(&kps, (h, w), config.feature_hw(), &PoseConfig::default())
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&[f32]> = pixels.iter().map(Vec::as_slice).collect();
    let grefs: Vec<&PoseGuidance> = guidance.iter().collect();
    let input = ModelInput::assemble(config, &refs, &grefs)?;
    let labels = (0..images).map(|i| i % 2).collect();
    Ok((input, labels))
}

/// Every layer plus both losses and the full objective on a micro model.
pub fn suite() -> Vec<Component> {
    vec![
        component!("linear", TOLERANCE, |seed| {
            let (mut store, mut rng, input) = with_input(seed, &[3, 5]);
            let lin = Linear::new(&mut store, "lin", 5, 4, true, &mut rng);
            Ok((store, Box::new(move |ctx| {
                let x = ctx.param(input);
                let y = lin.forward(ctx, x)?;
                project(ctx, y, seed)
            })))
        }),
        component!("conv 3x3 + batch norm", TOLERANCE, |seed| {
            let (mut store, mut rng, input) = with_input(seed, &[2, 4, 4, 3]);
            let conv = crate::nn::Conv2d::new(&mut store, "conv", 3, 4, 3, 1, &mut rng);
            let bn = BatchNorm::new(&mut store, "bn", 4);
            Ok((store, Box::new(move |ctx| {
                let x = ctx.param(input);
                let y = conv.forward(ctx, x)?;
                let y = bn.forward(ctx, y)?;
                project(ctx, y, seed)
            })))
        }),
        component!("instance norm", TOLERANCE, |seed| {
            let (mut store, _, input) = with_input(seed, &[2, 3, 3, 4]);
            let inorm = InstanceNorm::new(&mut store, "in", 4);
            Ok((store, Box::new(move |ctx| {
                let x = ctx.param(input);
                let y = inorm.forward(ctx, x)?;
                project(ctx, y, seed)
            })))
        }),
        component!("layer norm", TOLERANCE, |seed| {
            let (mut store, _, input) = with_input(seed, &[4, 6]);
            let ln = LayerNorm::new(&mut store, "ln", 6);
            Ok((store, Box::new(move |ctx| {
                let x = ctx.param(input);
                let y = ln.forward(ctx, x)?;
                project(ctx, y, seed)
            })))
        }),
        component!("mhsa", TOLERANCE, |seed| {
            let (mut store, mut rng, input) = with_input(seed, &[2, 4, 8]);
            let mhsa = Mhsa::new(&mut store, "mhsa", 8, 2, &mut rng)?;
            Ok((store, Box::new(move |ctx| {
                let x = ctx.param(input);
                let y = mhsa.forward(ctx, x)?;
                project(ctx, y, seed)
            })))
        }),
        component!("ffn", TOLERANCE, |seed| {
            let (mut store, mut rng, input) = with_input(seed, &[5, 6]);
            let ffn = Ffn::new(&mut store, "ffn", 6, 10, 0.1, &mut rng)?;
            Ok((store, Box::new(move |ctx| {
                let x = ctx.param(input);
                let y = ffn.forward(ctx, x)?;
                project(ctx, y, seed)
            })))
        }),
        component!("backbone", TOLERANCE, |seed| {
            let (mut store, mut rng, input) = with_input(seed, &[2, 8, 4, 3]);
            let bb = Backbone::new(&mut store, 8, &mut rng);
            Ok((store, Box::new(move |ctx| {
                let x = ctx.param(input);
                let y = bb.forward(ctx, x)?;
                project(ctx, y, seed)
            })))
        }),
        component!("irm", TOLERANCE, |seed| {
            let (mut store, mut rng, input) = with_input(seed, &[2, 4, 2, 8]);
            let irm = Irm::new(&mut store, 8, 4, 2, 0.1, &mut rng)?;
            let mask = Tensor::from_fn(&[2, 4, 2, 1], |_| rng.random_range(0.0..1.0));
            Ok((store, Box::new(move |ctx| {
                let x = ctx.param(input);
                let y = irm.forward(ctx, x, &mask)?;
                project(ctx, y, seed)
            })))
        }),
        component!("irt unit", TOLERANCE, |seed| {
            let (mut store, mut rng, input) = with_input(seed, &[2, 5, 8]);
            let unit = TransformerUnit::new(&mut store, "unit", 8, 2, 12, 0.1, &mut rng)?;
            Ok((store, Box::new(move |ctx| {
                let x = ctx.param(input);
                let y = unit.forward(ctx, x)?;
                project(ctx, y, seed)
            })))
        }),
        component!("csm + confidence", TOLERANCE, |seed| {
            let (mut store, mut rng, input) = with_input(seed, &[2, 3, 8]);
            let csm = Csm::new(&mut store, 8, &mut rng);
            let pose = Tensor::from_fn(&[2, 3], |_| rng.random_range(0.01..1.0));
            Ok((store, Box::new(move |ctx| {
                let x = ctx.param(input);
                let s = csm.scores(ctx, x)?;
                let (tilde, combined) = apply_confidence(ctx, x, s, &pose)?;
                let a = project(ctx, tilde, seed)?;
                let b = project(ctx, combined, seed + 1)?;
                Ok(ctx.tape.add(a, b)?)
            })))
        }),
        component!("cross entropy", TOLERANCE, |seed| {
            let (store, mut rng, input) = with_input(seed, &[4, 5]);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            Ok((store, Box::new(move |ctx| {
                let x = ctx.param(input);
                cross_entropy(&mut ctx.tape, x, &labels)
            })))
        }),
        component!("hard triplet", TOLERANCE, |seed| {
            let (store, _, input) = with_input(seed, &[6, 4]);
            Ok((store, Box::new(move |ctx| {
                let x = ctx.param(input);
                hard_triplet(&mut ctx.tape, x, &[0, 1, 2, 0, 1, 2], 0.3)
            })))
        }),
        component!("full loss", TOLERANCE, |seed| {
            let config = ModelConfig::micro();
            let mut store = ParamStore::new();
            let model = Pirt::build(&config, &mut store, seed)?;
            let (input, labels) = micro_batch(&config, seed, 4)?;
            Ok((store, Box::new(move |ctx| {
                let out = model.forward(ctx, &input)?;
                Ok(model.loss(ctx, &out, &labels)?.total)
            })))
        }),
    ]
}

/// Runs every component over the fixed seeds.
pub fn run_suite(check: &ParamCheck) -> Result<Vec<CheckRow>> {
    suite().iter().map(|c| c.check(&SEEDS, check)).collect()
}
