use pirt_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::render::Rect;
use super::{Split, SynthSample};
use crate::error::{PirtError, Result};
use crate::pose::{flip_id, Keypoint, KeypointState};

/// The random choices of one augmentation, drawn up front so they can be
/// inspected or forced.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPlan {
    pub pad: usize,
    /// Crop origin inside the padded image; `(pad, pad)` is no shift.
    pub crop: (usize, usize),
    pub flip: bool,
    pub erase: Option<(Rect, u64)>,
}

/// Zero padding of 10 pixels at 384 rows, scaled to the image height.
pub fn pad_for(height: usize) -> usize {
    ((10.0 * height as f64 / 384.0).round() as usize).max(2)
}

impl AugmentPlan {
    pub fn identity(height: usize) -> Self {
        let pad = pad_for(height);
        AugmentPlan {
            pad,
            crop: (pad, pad),
            flip: false,
            erase: None,
        }
    }

    pub fn draw(rng: &mut impl Rng, height: usize, width: usize) -> Self {
        let pad = pad_for(height);
        let crop = (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad));
        let flip = rng.random_bool(0.5);
        let erase = rng.random_bool(0.5).then(|| {
            let frac: f64 = rng.random_range(0.02..0.4);
            let mut r = ChaCha8Rng::seed_from_u64(rng.random());
            let cx = r.random_range(0.0..width as f64);
            let cy = r.random_range(0.0..height as f64);
            (Rect::around(&mut r, height, width, frac, cx, cy), rng.random())
        });
        AugmentPlan { pad, crop, flip, erase }
    }

    pub fn apply(&self, sample: &SynthSample) -> SynthSample {
        let (h, w) = (sample.height(), sample.width());
        let (dy, dx) = (self.crop.0 as isize - self.pad as isize, self.crop.1 as isize - self.pad as isize);
        let src = sample.image.data();
        let mut img = vec![0.0f32; h * w * 3];
        for r in 0..h {
            let sr = r as isize + dy;
            if sr < 0 || sr >= h as isize {
                continue;
            }
            for c in 0..w {
                let sc = c as isize + dx;
                if sc < 0 || sc >= w as isize {
                    continue;
                }
                let oc = if self.flip { w - 1 - c } else { c };
                let from = (sr as usize * w + sc as usize) * 3;
                let to = (r * w + oc) * 3;
                img[to..to + 3].copy_from_slice(&src[from..from + 3]);
            }
        }
        let shift_x = |x: f64| {
            let x = x - dx as f64;
            if self.flip {
                (w - 1) as f64 - x
            } else {
                x
            }
        };
        let mut occluders: Vec<Rect> = sample
            .occluders
            .iter()
            .filter_map(|r| {
                let y0 = (r.y0 as isize - dy).clamp(0, h as isize) as usize;
                let y1 = (r.y1 as isize - dy).clamp(0, h as isize) as usize;
                let x0 = (r.x0 as isize - dx).clamp(0, w as isize) as usize;
                let x1 = (r.x1 as isize - dx).clamp(0, w as isize) as usize;
                let (x0, x1) = if self.flip { (w - x1, w - x0) } else { (x0, x1) };
                (x0 < x1 && y0 < y1).then_some(Rect { x0, y0, x1, y1 })
            })
            .collect();
        let mut keypoints = vec![sample.keypoints[0]; sample.keypoints.len()];
        for (p, kp) in sample.keypoints.iter().enumerate() {
            let (x, y) = (shift_x(kp.x), kp.y - dy as f64);
            let inside = x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64;
            let state = if inside { kp.state } else { KeypointState::Absent };
            let to = if self.flip { flip_id(p) } else { p };
            keypoints[to] = Keypoint { x, y, state };
        }
        if let Some((rect, seed)) = self.erase {
            let mut noise = ChaCha8Rng::seed_from_u64(seed);
            for r in rect.y0..rect.y1 {
                for c in rect.x0..rect.x1 {
                    let at = (r * w + c) * 3;
                    for v in &mut img[at..at + 3] {
                        *v = noise.random();
                    }
                }
            }
            for kp in &mut keypoints {
                if kp.state == KeypointState::Visible && rect.contains(kp.x, kp.y) {
                    kp.state = KeypointState::Occluded;
                }
            }
            occluders.push(rect);
        }
        SynthSample {
            image: Tensor::new(&[h, w, 3], img).expect("same shape"),
            identity: sample.identity,
            camera: sample.camera,
            split: sample.split,
            keypoints,
            occluders,
        }
    }
}

/// Pad-and-crop, horizontal flip and random erasing of a training sample.
pub fn augment(sample: &SynthSample, rng: &mut impl Rng) -> Result<SynthSample> {
    if sample.split != Split::Train {
        return Err(PirtError::Contract(format!(
            "augmentation applies to training samples only, got a {:?} sample",
            sample.split
        )));
    }
    Ok(AugmentPlan::draw(rng, sample.height(), sample.width()).apply(sample))
}
