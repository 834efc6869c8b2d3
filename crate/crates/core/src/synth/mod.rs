//! Deterministic synthetic occluded-pedestrian benchmark.
//!
//! Every identity has a persistent appearance; every image re-poses the
//! figure, applies its camera's colour response and, with some probability,
//! hides parts of it behind textured rectangles. Keypoints come from the
//! figure's joints, so ground-truth pose is known exactly.

mod augment;
mod io;
mod render;

use pirt_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, AugmentPlan};
pub use io::{load_dataset, save_dataset, MANIFEST_FILE, PAYLOAD_FILE};
pub use render::{Appearance, CameraTint, Rect, Skeleton};

use crate::error::{PirtError, Result};
use crate::pose::Keypoint;

pub const MAX_COVERAGE: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub n_cameras: usize,
    pub height: usize,
    pub width: usize,
    pub occlusion_prob: f64,
    /// Upper bound on the image fraction hidden by one image's occluders.
    pub max_coverage: f64,
    /// Joint jitter standard deviation as a fraction of image height.
    pub jitter: f64,
    pub seed: u64,
    /// Identities `0..n` form the training split; `None` takes half.
    pub n_train_identities: Option<usize>,
    /// Query images per test identity; the rest of its images are gallery.
    pub queries_per_identity: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_identities: 32,
            images_per_identity: 8,
            n_cameras: 3,
            height: 64,
            width: 32,
            occlusion_prob: 0.4,
            max_coverage: 0.35,
            jitter: 0.05,
            seed: 0,
            n_train_identities: None,
            queries_per_identity: 2,
        }
    }
}

impl SynthConfig {
    pub fn train_identities(&self) -> usize {
        self.n_train_identities.unwrap_or(self.n_identities / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(PirtError::Config(msg));
        if self.n_identities == 0 || self.images_per_identity == 0 || self.n_cameras == 0 {
            return fail("identity, image and camera counts must be at least 1".into());
        }
        if self.height == 0 || self.width == 0 || self.height % 4 != 0 || self.width % 4 != 0 {
            return fail(format!("image {}×{} must have extents divisible by 4", self.height, self.width));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return fail(format!("occlusion probability {} outside [0, 1]", self.occlusion_prob));
        }
        if !(0.0..=MAX_COVERAGE).contains(&self.max_coverage) {
            return fail(format!("occlusion coverage {} outside [0, {MAX_COVERAGE}]", self.max_coverage));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return fail(format!("jitter {} must be finite and non-negative", self.jitter));
        }
        let train = self.train_identities();
        if train > self.n_identities {
            return fail(format!("{train} training identities out of {}", self.n_identities));
        }
        if train < self.n_identities {
            if self.n_cameras < 2 {
                return fail("evaluation identities need at least 2 cameras".into());
            }
            if self.queries_per_identity == 0 || self.queries_per_identity >= self.images_per_identity {
                return fail(format!(
                    "{} queries per identity leave no gallery among {} images",
                    self.queries_per_identity, self.images_per_identity
                ));
            }
        }
        Ok(())
    }

    /// Camera of image `j` of identity `id`: round-robin from an
    /// identity-dependent start.
    pub fn camera_of(&self, id: usize, j: usize) -> usize {
        (id + j) % self.n_cameras
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    /// `[H, W, 3]` values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub identity: usize,
    pub camera: usize,
    pub split: Split,
    pub keypoints: Vec<Keypoint>,
    pub occluders: Vec<Rect>,
}

impl SynthSample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub samples: Vec<SynthSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&SynthSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

/// Independent stream `k` of identity `id` under the master seed.
fn stream(seed: u64, id: usize, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64 * 4 + k);
    rng
}

/// Scene for one image: figure, occluders, tint.
fn render_image(
    config: &SynthConfig,
    app: &Appearance,
    tint: &CameraTint,
    occlude: bool,
    rng: &mut ChaCha8Rng,
) -> (Tensor<f32>, Vec<Keypoint>, Vec<Rect>) {
    let (h, w) = (config.height, config.width);
    let skel = Skeleton::pose(app, h, w, config.jitter, rng);
    let mut img = render::paint(app, &skel, h, w, rng);
    let mut occluders = Vec::new();
    if occlude && config.max_coverage > 0.0 {
        let count = rng.random_range(1..=3);
        let total = rng.random_range(0.4..=1.0) * config.max_coverage;
        for _ in 0..count {
            let cx = rng.random_range(0.0..w as f64);
            let cy = rng.random_range(skel.top.max(0.0)..skel.bottom);
            let rect = Rect::around(rng, h, w, total / count as f64, cx, cy);
            render::paint_occluder(&mut img, w, &rect, rng);
            occluders.push(rect);
        }
    }
    render::apply_tint(&mut img, tint);
    let keypoints = skel.keypoints(&occluders);
    (Tensor::new(&[h, w, 3], img).expect("sized by render"), keypoints, occluders)
}

/// Generates the whole benchmark; the same config always yields the same
/// bytes.
pub fn generate_dataset(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut cam_rng = stream(config.seed, usize::MAX / 8, 0);
    let tints: Vec<CameraTint> = (0..config.n_cameras).map(|_| CameraTint::sample(&mut cam_rng)).collect();
    let train = config.train_identities();
    let mut samples = Vec::with_capacity(config.n_identities * config.images_per_identity);
    for id in 0..config.n_identities {
        let app = Appearance::sample(&mut stream(config.seed, id, 0));
        let mut rng = stream(config.seed, id, 1);
        for j in 0..config.images_per_identity {
            let split = match (id < train, j < config.queries_per_identity) {
                (true, _) => Split::Train,
                (false, true) => Split::Query,
                (false, false) => Split::Gallery,
            };
            let camera = config.camera_of(id, j);
            // queries are always occluded unless occlusion is disabled
            let occlude = if split == Split::Query {
                config.occlusion_prob > 0.0
            } else {
                rng.random_bool(config.occlusion_prob)
            };
            let (image, keypoints, occluders) = render_image(config, &app, &tints[camera], occlude, &mut rng);
            samples.push(SynthSample {
                image,
                identity: id,
                camera,
                split,
                keypoints,
                occluders,
            });
        }
    }
    Ok(Dataset {
        config: config.clone(),
        samples,
    })
}
