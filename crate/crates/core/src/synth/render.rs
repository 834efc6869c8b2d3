//! Procedural pedestrian figures.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::pose::{Keypoint, KeypointState, NUM_KEYPOINTS};

pub type Rgb = [f32; 3];

/// Everything that stays fixed for one identity across its images.
#[derive(Clone, Debug)]
pub struct Appearance {
    pub skin: Rgb,
    pub hair: Rgb,
    pub shirt: Rgb,
    pub shirt_alt: Rgb,
    pub stripe_freq: f32,
    pub stripe_phase: f32,
    pub pants: Rgb,
    pub shoes: Rgb,
    pub long_sleeves: bool,
    pub height: f64,
    pub shoulder: f64,
    pub hip: f64,
    pub head: f64,
}

fn color(rng: &mut ChaCha8Rng) -> Rgb {
    [rng.random(), rng.random(), rng.random()]
}

impl Appearance {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        let tone: f32 = rng.random_range(0.35..0.9);
        Appearance {
            skin: [tone, tone * 0.8, tone * 0.65],
            hair: color(rng).map(|c| c * 0.5),
            shirt: color(rng),
            shirt_alt: color(rng),
            stripe_freq: rng.random_range(0.0..0.9),
            stripe_phase: rng.random_range(0.0..std::f32::consts::TAU),
            pants: color(rng),
            shoes: color(rng).map(|c| c * 0.6),
            long_sleeves: rng.random_bool(0.5),
            height: rng.random_range(0.82..0.94),
            shoulder: rng.random_range(0.11..0.16),
            hip: rng.random_range(0.07..0.1),
            head: rng.random_range(0.06..0.075),
        }
    }
}

/// Per-camera colour response: gain then offset per channel.
#[derive(Clone, Debug)]
pub struct CameraTint {
    pub gain: Rgb,
    pub offset: Rgb,
}

impl CameraTint {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        CameraTint {
            gain: [0; 3].map(|_| rng.random_range(0.85..1.15)),
            offset: [0; 3].map(|_| rng.random_range(-0.06..0.06)),
        }
    }
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x < self.x1 as f64 && y >= self.y0 as f64 && y < self.y1 as f64
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    /// A rectangle of about `fraction` of a `h × w` image with a random
    /// aspect ratio, centered at `(cx, cy)` and clipped to the image.
    pub fn around(rng: &mut ChaCha8Rng, h: usize, w: usize, fraction: f64, cx: f64, cy: f64) -> Rect {
        let area = fraction * (h * w) as f64;
        let aspect: f64 = rng.random_range(0.3f64..3.3).sqrt();
        let rw = (area.sqrt() * aspect).clamp(1.0, w as f64);
        let rh = (area / rw).clamp(1.0, h as f64);
        let x0 = (cx - rw / 2.0).clamp(0.0, w as f64 - rw).round() as usize;
        let y0 = (cy - rh / 2.0).clamp(0.0, h as f64 - rh).round() as usize;
        Rect {
            x0,
            y0,
            x1: (x0 + rw.round() as usize).min(w),
            y1: (y0 + rh.round() as usize).min(h),
        }
    }
}

/// Joint positions of one rendered pose, in pixels.
#[derive(Clone, Debug)]
pub struct Skeleton {
    pub joints: [(f64, f64); NUM_KEYPOINTS],
    pub head_center: (f64, f64),
    pub head_radius: f64,
    pub top: f64,
    pub bottom: f64,
}

impl Skeleton {
    pub fn pose(app: &Appearance, h: usize, w: usize, jitter: f64, rng: &mut ChaCha8Rng) -> Self {
        let (hf, wf) = (h as f64, w as f64);
        let u = app.height * hf;
        let bottom = hf * rng.random_range(0.95..0.99);
        let top = bottom - u;
        let cx = wf / 2.0 + rng.random_range(-0.08..0.08) * wf;
        let spread = rng.random_range(0.0..0.05) * u;
        let noise = Normal::new(0.0, (jitter * hf).max(1e-9)).expect("finite sigma");
        let mut j = |x: f64, y: f64| -> (f64, f64) {
            let x = (x + noise.sample(rng)).clamp(0.0, wf - 1.0);
            let y = (y + noise.sample(rng)).clamp(0.0, hf - 1.0);
            (x, y)
        };
        let head = (cx, top + 0.07 * u);
        let (sh, hp) = (app.shoulder * u, app.hip * u);
        let sy = top + 0.18 * u;
        let hy = top + 0.52 * u;
        let joints = [
            j(head.0, head.1 + 0.015 * u),
            j(head.0 - 0.025 * u, head.1 - 0.01 * u),
            j(head.0 + 0.025 * u, head.1 - 0.01 * u),
            j(head.0 - 0.055 * u, head.1),
            j(head.0 + 0.055 * u, head.1),
            j(cx - sh, sy),
            j(cx + sh, sy),
            j(cx - sh - 0.03 * u, sy + 0.17 * u),
            j(cx + sh + 0.03 * u, sy + 0.17 * u),
            j(cx - sh - 0.04 * u, sy + 0.33 * u),
            j(cx + sh + 0.04 * u, sy + 0.33 * u),
            j(cx - hp, hy),
            j(cx + hp, hy),
            j(cx - hp - spread / 2.0, top + 0.74 * u),
            j(cx + hp + spread / 2.0, top + 0.74 * u),
            j(cx - hp - spread, top + 0.96 * u),
            j(cx + hp + spread, top + 0.96 * u),
        ];
        Skeleton {
            joints,
            head_center: head,
            head_radius: app.head * u,
            top,
            bottom,
        }
    }

    pub fn keypoints(&self, occluders: &[Rect]) -> Vec<Keypoint> {
        self.joints
            .iter()
            .map(|&(x, y)| Keypoint {
                x,
                y,
                state: if occluders.iter().any(|r| r.contains(x, y)) {
                    KeypointState::Occluded
                } else {
                    KeypointState::Visible
                },
            })
            .collect()
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Inside the convex polygon with vertices in order (either orientation).
fn in_quad(p: (f64, f64), quad: &[(f64, f64); 4]) -> bool {
    let mut sign = 0.0;
    for i in 0..4 {
        let (a, b) = (quad[i], quad[(i + 1) % 4]);
        let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        if cross != 0.0 {
            if sign != 0.0 && cross.signum() != sign {
                return false;
            }
            sign = cross.signum();
        }
    }
    true
}

/// Paints figure over a smooth noisy background; `[H, W, 3]` row-major.
pub fn paint(app: &Appearance, skel: &Skeleton, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let bg_top = color(rng).map(|c| 0.2 + 0.6 * c);
    let bg_bottom = color(rng).map(|c| 0.2 + 0.6 * c);
    let u = skel.bottom - skel.top;
    let limb = 0.035 * u;
    let leg = 0.045 * u;
    let j = &skel.joints;
    let torso = [j[5], j[6], j[12], j[11]];
    let mut img = vec![0.0f32; h * w * 3];
    for r in 0..h {
        for c in 0..w {
            let p = (c as f64 + 0.5, r as f64 + 0.5);
            let t = r as f32 / h as f32;
            let mut px: Rgb = [0, 1, 2].map(|k| bg_top[k] * (1.0 - t) + bg_bottom[k] * t);
            for (hip, knee, ankle) in [(11, 13, 15), (12, 14, 16)] {
                if segment_distance(p, j[hip], j[knee]) < leg || segment_distance(p, j[knee], j[ankle]) < leg {
                    px = if p.1 > j[ankle].1 - 0.03 * u { app.shoes } else { app.pants };
                }
            }
            if in_quad(p, &torso) || segment_distance(p, j[5], j[6]) < limb {
                let stripe = ((p.1 as f32) * app.stripe_freq * 2.0 + app.stripe_phase).sin() > 0.3;
                px = if stripe { app.shirt_alt } else { app.shirt };
            }
            for (sh, el, wr) in [(5, 7, 9), (6, 8, 10)] {
                if segment_distance(p, j[sh], j[el]) < limb {
                    px = app.shirt;
                }
                if segment_distance(p, j[el], j[wr]) < limb {
                    px = if app.long_sleeves { app.shirt } else { app.skin };
                }
            }
            let (hx, hy) = skel.head_center;
            if ((p.0 - hx).powi(2) + (p.1 - hy).powi(2)).sqrt() < skel.head_radius {
                px = if p.1 < hy - 0.3 * skel.head_radius { app.hair } else { app.skin };
            }
            let at = (r * w + c) * 3;
            for k in 0..3 {
                img[at + k] = px[k] + rng.random_range(-0.03..0.03);
            }
        }
    }
    img
}

/// Fills `rect` with a blocky two-colour texture.
pub fn paint_occluder(img: &mut [f32], w: usize, rect: &Rect, rng: &mut ChaCha8Rng) {
    let a = color(rng);
    let b = color(rng);
    let cell = rng.random_range(2..6);
    for r in rect.y0..rect.y1 {
        for c in rect.x0..rect.x1 {
            let px = if ((r / cell) + (c / cell)) % 2 == 0 { a } else { b };
            let at = (r * w + c) * 3;
            img[at..at + 3].copy_from_slice(&px);
        }
    }
}

pub fn apply_tint(img: &mut [f32], tint: &CameraTint) {
    for px in img.chunks_exact_mut(3) {
        for k in 0..3 {
            px[k] = (px[k] * tint.gain[k] + tint.offset[k]).clamp(0.0, 1.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quad_membership() {
        let q = [(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0)];
        assert!(in_quad((2.0, 2.0), &q));
        assert!(!in_quad((5.0, 2.0), &q));
        let rev = [q[3], q[2], q[1], q[0]];
        assert!(in_quad((1.0, 3.0), &rev));
    }

    #[test]
    fn segment_distance_cases() {
        assert_eq!(segment_distance((0.0, 1.0), (-1.0, 0.0), (1.0, 0.0)), 1.0);
        assert_eq!(segment_distance((3.0, 0.0), (-1.0, 0.0), (1.0, 0.0)), 2.0);
        assert_eq!(segment_distance((3.0, 4.0), (0.0, 0.0), (0.0, 0.0)), 5.0);
    }
}
