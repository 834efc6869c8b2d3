//! Keypoint heatmaps and the masks and part tokens derived from them.
//!
//! Heatmaps are rendered directly at feature-map resolution from known
//! keypoints, standing in for a frozen pose estimator. Keypoints hidden by an
//! occluder keep their location but lose most of their confidence.

use pirt_tensor::ops::max_pool2d_forward;
use pirt_tensor::{Tensor, Window};
use serde::{Deserialize, Serialize};

use crate::error::{PirtError, Result};
use crate::parts::{PartKind, PartTokenSet};

pub const NUM_KEYPOINTS: usize = 17;
pub const NUM_GROUPS: usize = 3;
pub const PEAK: f64 = 0.999;
pub const FLOOR: f64 = 1e-6;

pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Head,
    Upper,
    Lower,
}

impl Group {
    pub const ALL: [Group; NUM_GROUPS] = [Group::Head, Group::Upper, Group::Lower];

    pub fn index(self) -> usize {
        self as usize
    }

    /// COCO-17 membership: face points, arms, legs.
    pub fn of(keypoint: usize) -> Group {
        match keypoint {
            0..=4 => Group::Head,
            5..=10 => Group::Upper,
            _ => Group::Lower,
        }
    }

    pub fn members(self) -> std::ops::Range<usize> {
        match self {
            Group::Head => 0..5,
            Group::Upper => 5..11,
            Group::Lower => 11..NUM_KEYPOINTS,
        }
    }
}

/// The COCO id a keypoint takes after a horizontal flip.
pub fn flip_id(keypoint: usize) -> usize {
    match keypoint {
        0 => 0,
        k if k % 2 == 1 => k + 1,
        k => k - 1,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeypointState {
    Visible,
    /// Inside the image but covered by an occluder.
    Occluded,
    /// Outside the image or otherwise undetectable.
    Absent,
}

/// Image coordinates in pixels, x to the right and y down.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub state: KeypointState,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseConfig {
    /// Gaussian width in feature cells.
    pub sigma: f64,
    pub occluded_scale: f64,
    pub kernel: usize,
    pub tau: f64,
}

impl Default for PoseConfig {
    fn default() -> Self {
        PoseConfig {
            sigma: 0.6,
            occluded_scale: 0.1,
            kernel: 3,
            tau: 0.001,
        }
    }
}

impl PoseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(PirtError::Param(format!("heatmap sigma must be positive, got {}", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.occluded_scale) {
            return Err(PirtError::Param(format!(
                "occluded scale must lie in [0, 1], got {}",
                self.occluded_scale
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(PirtError::Param(format!("expansion kernel must be odd, got {}", self.kernel)));
        }
        if !self.tau.is_finite() {
            return Err(PirtError::Param("threshold must be finite".into()));
        }
        Ok(())
    }
}

/// `P` confidence maps of `height × width`, stored map-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    maps: Vec<f64>,
    count: usize,
    height: usize,
    width: usize,
}

impl HeatmapStack {
    pub fn new(count: usize, height: usize, width: usize, maps: Vec<f64>) -> Result<Self> {
        if count == 0 || height == 0 || width == 0 || maps.len() != count * height * width {
            return Err(PirtError::Contract(format!(
                "heatmap stack {count}×{height}×{width} cannot hold {} values",
                maps.len()
            )));
        }
        Ok(HeatmapStack { maps, count, height, width })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn map(&self, p: usize) -> &[f64] {
        &self.maps[p * self.cells()..(p + 1) * self.cells()]
    }

    pub fn values(&self) -> &[f64] {
        &self.maps
    }

    pub fn group(&self, p: usize) -> Group {
        Group::of(p)
    }

    pub fn keypoint_max(&self, p: usize) -> f64 {
        self.map(p).iter().copied().fold(f64::MIN, f64::max)
    }

    /// Per-group maximum confidence over member maps.
    pub fn group_scores(&self) -> [f64; NUM_GROUPS] {
        let mut s = [f64::MIN; NUM_GROUPS];
        for p in 0..self.count {
            let g = self.group(p).index();
            s[g] = s[g].max(self.keypoint_max(p));
        }
        s
    }

    /// Maps as `[1, H, W, P]`, one channel per keypoint.
    fn to_nhwc(&self) -> Tensor<f64> {
        let (cells, count) = (self.cells(), self.count);
        Tensor::from_fn(&[1, self.height, self.width, count], |i| self.maps[(i % count) * cells + i / count])
    }

    fn from_nhwc(t: &Tensor<f64>) -> Self {
        let (h, w, count) = (t.shape()[1], t.shape()[2], t.shape()[3]);
        let cells = h * w;
        let data = t.data();
        let maps = (0..count * cells).map(|i| data[(i % cells) * count + i / cells]).collect();
        HeatmapStack { maps, count, height: h, width: w }
    }
}

/// Per-cell maximum over all maps.
#[derive(Clone, Debug, PartialEq)]
pub struct HumanMask {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

/// Maps an image pixel coordinate onto the feature grid (cell centers).
pub fn to_feature_coord(x: f64, image_extent: usize, feature_extent: usize) -> f64 {
    (x + 0.5) * feature_extent as f64 / image_extent as f64 - 0.5
}

/// Renders one Gaussian map per keypoint at feature resolution.
pub fn render_heatmaps(
    keypoints: &[Keypoint],
    image_hw: (usize, usize),
    feature_hw: (usize, usize),
    sigma: f64,
    occluded_scale: f64,
) -> Result<HeatmapStack> {
    if !(sigma > 0.0) {
        return Err(PirtError::Param(format!("heatmap sigma must be positive, got {sigma}")));
    }
    let (fh, fw) = feature_hw;
    let cells = fh * fw;
    let mut maps = vec![FLOOR; keypoints.len() * cells];
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (p, kp) in keypoints.iter().enumerate() {
        let inside = kp.x >= 0.0 && kp.y >= 0.0 && kp.x < image_hw.1 as f64 && kp.y < image_hw.0 as f64;
        let peak = match kp.state {
            _ if !inside => continue,
            KeypointState::Absent => continue,
            KeypointState::Visible => PEAK,
            KeypointState::Occluded => PEAK * occluded_scale,
        };
        let cx = to_feature_coord(kp.x, image_hw.1, fw);
        let cy = to_feature_coord(kp.y, image_hw.0, fh);
        let map = &mut maps[p * cells..(p + 1) * cells];
        for r in 0..fh {
            for c in 0..fw {
                let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                map[r * fw + c] = (peak * (-d2 * inv).exp()).max(FLOOR);
            }
        }
    }
    HeatmapStack::new(keypoints.len(), fh, fw, maps)
}

/// Windowed max pooling of every map, stride 1 with same padding.
pub fn expand_heatmaps(stack: &HeatmapStack, kernel: usize) -> Result<HeatmapStack> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(PirtError::Param(format!("expansion kernel must be odd, got {kernel}")));
    }
    if kernel == 1 {
        return Ok(stack.clone());
    }
    let (pooled, _) = max_pool2d_forward(&stack.to_nhwc(), Window::same(kernel))?;
    Ok(HeatmapStack::from_nhwc(&pooled))
}

pub fn merge_mask(stack: &HeatmapStack) -> HumanMask {
    let mut values = stack.map(0).to_vec();
    for p in 1..stack.count() {
        for (v, &m) in values.iter_mut().zip(stack.map(p)) {
            *v = v.max(m);
        }
    }
    HumanMask {
        values,
        height: stack.height(),
        width: stack.width(),
    }
}

/// Bilinear resampling of every map with half-pixel centers.
pub fn resize_bilinear(stack: &HeatmapStack, height: usize, width: usize) -> Result<HeatmapStack> {
    if height == 0 || width == 0 {
        return Err(PirtError::Contract("cannot resize to an empty grid".into()));
    }
    let (ih, iw) = (stack.height(), stack.width());
    let sample = |out: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let src = ((out as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, src - lo as f64)
    };
    let mut maps = Vec::with_capacity(stack.count() * height * width);
    for p in 0..stack.count() {
        let m = stack.map(p);
        for r in 0..height {
            let (r0, r1, fr) = sample(r, height, ih);
            for c in 0..width {
                let (c0, c1, fc) = sample(c, width, iw);
                let top = m[r0 * iw + c0] * (1.0 - fc) + m[r0 * iw + c1] * fc;
                let bottom = m[r1 * iw + c0] * (1.0 - fc) + m[r1 * iw + c1] * fc;
                maps.push(top * (1.0 - fr) + bottom * fr);
            }
        }
    }
    HeatmapStack::new(stack.count(), height, width, maps)
}

/// Averaging weights `[P, H·W]` over the cells where each map exceeds `tau`.
/// A map with no such cell gets an all-zero row and is reported invisible.
pub fn pose_pool_weights(stack: &HeatmapStack, tau: f64) -> (Tensor<f64>, Vec<bool>) {
    let cells = stack.cells();
    let mut weights = vec![0.0; stack.count() * cells];
    let mut visible = vec![false; stack.count()];
    for p in 0..stack.count() {
        let above: Vec<usize> = (0..cells).filter(|&g| stack.map(p)[g] > tau).collect();
        if above.is_empty() {
            continue;
        }
        visible[p] = true;
        let w = 1.0 / above.len() as f64;
        for g in above {
            weights[p * cells + g] = w;
        }
    }
    let weights = Tensor::new(&[stack.count(), cells], weights).expect("sized above");
    (weights, visible)
}

/// Keypoint tokens of one feature map `[H, W, C]`, ordered by keypoint id.
pub fn pose_part_pool(stack: &HeatmapStack, features: &Tensor<f64>, tau: f64) -> Result<PartTokenSet<f64>> {
    let shape = features.shape();
    if shape.len() != 3 {
        return Err(PirtError::Contract(format!("features must be [H, W, C], got {shape:?}")));
    }
    let stack = if (shape[0], shape[1]) == (stack.height(), stack.width()) {
        stack.clone()
    } else {
        resize_bilinear(stack, shape[0], shape[1])?
    };
    let (weights, visible) = pose_pool_weights(&stack, tau);
    let (cells, c) = (stack.cells(), shape[2]);
    let f = features.data();
    let mut tokens = vec![0.0; stack.count() * c];
    for p in 0..stack.count() {
        for g in 0..cells {
            let w = weights.data()[p * cells + g];
            if w != 0.0 {
                for k in 0..c {
                    tokens[p * c + k] += w * f[g * c + k];
                }
            }
        }
    }
    Ok(PartTokenSet {
        tokens: Tensor::new(&[stack.count(), c], tokens)?,
        kind: PartKind::Pose,
        visible,
        groups: Some((0..stack.count()).map(Group::of).collect()),
    })
}

/// Everything the network and the matcher need from one image's keypoints.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseGuidance {
    /// Expanded maps.
    pub heatmaps: HeatmapStack,
    pub mask: HumanMask,
    pub pool_weights: Tensor<f64>,
    pub keypoint_visible: Vec<bool>,
    pub group_scores: [f64; NUM_GROUPS],
    pub group_visible: [bool; NUM_GROUPS],
}

impl PoseGuidance {
    pub fn from_keypoints(
        keypoints: &[Keypoint],
        image_hw: (usize, usize),
        feature_hw: (usize, usize),
        config: &PoseConfig,
    ) -> Result<Self> {
        config.validate()?;
        if keypoints.len() != NUM_KEYPOINTS {
            return Err(PirtError::Contract(format!(
                "expected {NUM_KEYPOINTS} keypoints, got {}",
                keypoints.len()
            )));
        }
        let raw = render_heatmaps(keypoints, image_hw, feature_hw, config.sigma, config.occluded_scale)?;
        let group_scores = raw.group_scores();
        let heatmaps = expand_heatmaps(&raw, config.kernel)?;
        let mask = merge_mask(&heatmaps);
        let (pool_weights, keypoint_visible) = pose_pool_weights(&heatmaps, config.tau);
        let mut group_visible = [false; NUM_GROUPS];
        for (p, &v) in keypoint_visible.iter().enumerate() {
            group_visible[Group::of(p).index()] |= v;
        }
        Ok(PoseGuidance {
            heatmaps,
            mask,
            pool_weights,
            keypoint_visible,
            group_scores,
            group_visible,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn visible(x: f64, y: f64) -> Keypoint {
        Keypoint { x, y, state: KeypointState::Visible }
    }

    #[test]
    fn groups_cover_keypoints_disjointly() {
        let mut seen = [0; NUM_KEYPOINTS];
        for g in Group::ALL {
            for p in g.members() {
                assert_eq!(Group::of(p), g);
                seen[p] += 1;
            }
        }
        assert!(seen.iter().all(|&n| n == 1));
        assert_eq!(Group::Head.members().len(), 5);
        assert_eq!(Group::Upper.members().len(), 6);
        assert_eq!(Group::Lower.members().len(), 6);
    }

    #[test]
    fn flip_swaps_sides_and_is_an_involution() {
        assert_eq!(flip_id(0), 0);
        assert_eq!(flip_id(5), 6);
        assert_eq!(flip_id(16), 15);
        for p in 0..NUM_KEYPOINTS {
            assert_eq!(flip_id(flip_id(p)), p);
            assert_eq!(Group::of(flip_id(p)), Group::of(p));
            if p > 0 {
                let (a, b) = (KEYPOINT_NAMES[p], KEYPOINT_NAMES[flip_id(p)]);
                assert_eq!(a.trim_start_matches("left_").trim_start_matches("right_"), b.trim_start_matches("left_").trim_start_matches("right_"));
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn all_absent_renders_the_floor() {
        let kps = vec![Keypoint { x: 3.0, y: 3.0, state: KeypointState::Absent }; NUM_KEYPOINTS];
        let stack = render_heatmaps(&kps, (64, 32), (16, 8), 0.6, 0.1).unwrap();
        assert!(stack.values().iter().all(|&v| v == FLOOR));
        assert_eq!(stack.group_scores(), [FLOOR; 3]);
    }

    #[test]
    fn peak_sits_on_the_keypoint_cell() {
        // pixel (13.5, 21.5) is the center of feature cell (row 5, col 3) at stride 4
        let mut kps = vec![Keypoint { x: 0.0, y: 0.0, state: KeypointState::Absent }; NUM_KEYPOINTS];
        kps[7] = visible(13.5, 21.5);
        let stack = render_heatmaps(&kps, (64, 32), (16, 8), 0.05, 0.1).unwrap();
        let map = stack.map(7);
        let (argmax, &max) = map.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        assert_eq!(argmax, 5 * 8 + 3);
        assert_eq!(max, PEAK);
    }

    #[test]
    fn occluded_keypoint_scales_group_score() {
        let mut kps = vec![Keypoint { x: 0.0, y: 0.0, state: KeypointState::Absent }; NUM_KEYPOINTS];
        kps[1] = Keypoint { x: 13.5, y: 5.5, state: KeypointState::Occluded };
        let stack = render_heatmaps(&kps, (64, 32), (16, 8), 0.6, 0.1).unwrap();
        let s = stack.group_scores();
        assert!(s[0] <= PEAK * 0.1 && s[0] > 0.09);
        assert!(s[0] <= 0.0999);
    }

    #[test]
    fn maps_stay_inside_the_open_unit_interval() {
        let kps: Vec<_> = (0..NUM_KEYPOINTS).map(|p| visible(2.0 * p as f64 % 32.0, 3.7 * p as f64)).collect();
        let stack = render_heatmaps(&kps, (64, 32), (16, 8), 0.6, 0.1).unwrap();
        assert!(stack.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn sigma_must_be_positive() {
        let kps = vec![visible(1.0, 1.0); NUM_KEYPOINTS];
        for sigma in [0.0, -1.0, f64::NAN] {
            assert!(matches!(render_heatmaps(&kps, (8, 8), (2, 2), sigma, 0.1), Err(PirtError::Param(_))));
        }
    }

    #[test]
    fn expansion_of_a_single_hot_cell() {
        let mut maps = vec![0.0; 5 * 4];
        maps[2 * 4 + 1] = 1.0;
        let stack = HeatmapStack::new(1, 5, 4, maps).unwrap();
        let out = expand_heatmaps(&stack, 3).unwrap();
        for r in 0..5 {
            for c in 0..4 {
                let expect = if (1..=3).contains(&r) && c <= 2 { 1.0 } else { 0.0 };
                assert_eq!(out.map(0)[r * 4 + c], expect, "cell {r},{c}");
            }
        }
        assert_eq!(expand_heatmaps(&stack, 1).unwrap(), stack);
        assert!(matches!(expand_heatmaps(&stack, 2), Err(PirtError::Param(_))));
    }

    #[test]
    fn nhwc_round_trip() {
        let stack = HeatmapStack::new(3, 2, 4, (0..24).map(|i| i as f64).collect()).unwrap();
        assert_eq!(HeatmapStack::from_nhwc(&stack.to_nhwc()), stack);
    }

    #[test]
    fn singleton_and_empty_masks() {
        let mut maps = vec![0.0; 2 * 6];
        maps[4] = 0.5;
        let stack = HeatmapStack::new(2, 2, 3, maps).unwrap();
        let feats = Tensor::from_fn(&[2, 3, 2], |i| i as f64);
        let parts = pose_part_pool(&stack, &feats, 0.001).unwrap();
        assert_eq!(parts.token(0), &[8.0, 9.0]);
        assert_eq!(parts.token(1), &[0.0, 0.0]);
        assert_eq!(parts.visible, vec![true, false]);
    }

    #[test]
    fn bilinear_resize_preserves_constants() {
        let stack = HeatmapStack::new(2, 4, 2, vec![0.25; 16]).unwrap();
        let out = resize_bilinear(&stack, 8, 3).unwrap();
        assert!(out.values().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}
