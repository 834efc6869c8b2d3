mod common;

use pirt_core::pose::{
    expand_heatmaps, merge_mask, pose_part_pool, Group, HeatmapStack, Keypoint, KeypointState, PoseConfig,
    PoseGuidance, NUM_KEYPOINTS,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn invariants_hold_on_a_thousand_random_stacks() {
    common::pose_invariants(1000, 7).unwrap();
}

/// Per-keypoint masked average over cells strictly above `tau`.
fn naive_pool(stack: &HeatmapStack, features: &[f64], c: usize, tau: f64) -> Vec<Option<Vec<f64>>> {
    (0..stack.count())
        .map(|p| {
            let cells: Vec<usize> = (0..stack.cells()).filter(|&g| stack.map(p)[g] > tau).collect();
            if cells.is_empty() {
                return None;
            }
            Some(
                (0..c)
                    .map(|k| cells.iter().map(|&g| features[g * c + k]).sum::<f64>() / cells.len() as f64)
                    .collect(),
            )
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pooling_matches_masked_average(seed in any::<u64>(), tau in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = common::random_stack(&mut rng);
        let c = rng.random_range(1..5);
        let features = common::random_tensor(&mut rng, &[stack.height(), stack.width(), c]);
        let tokens = pose_part_pool(&stack, &features, tau).unwrap();
        for (p, want) in naive_pool(&stack, features.data(), c, tau).into_iter().enumerate() {
            match want {
                None => {
                    prop_assert!(!tokens.visible[p]);
                    prop_assert!(tokens.token(p).iter().all(|&v| v == 0.0));
                }
                Some(want) => {
                    prop_assert!(tokens.visible[p]);
                    for (a, b) in tokens.token(p).iter().zip(&want) {
                        prop_assert!((a - b).abs() <= 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn raising_one_map_never_lowers_the_mask(seed in any::<u64>(), bump in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = common::random_stack(&mut rng);
        let p = rng.random_range(0..stack.count());
        let mut values = stack.values().to_vec();
        for v in &mut values[p * stack.cells()..(p + 1) * stack.cells()] {
            *v += bump;
        }
        let raised = HeatmapStack::new(stack.count(), stack.height(), stack.width(), values).unwrap();
        let (before, after) = (merge_mask(&stack), merge_mask(&raised));
        prop_assert!(before.values.iter().zip(&after.values).all(|(a, b)| b >= a));
    }

    #[test]
    fn expansion_is_monotone_in_the_kernel(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = common::random_stack(&mut rng);
        let three = expand_heatmaps(&stack, 3).unwrap();
        let five = expand_heatmaps(&stack, 5).unwrap();
        prop_assert!(three.values().iter().zip(five.values()).all(|(a, b)| b >= a));
        prop_assert_eq!(expand_heatmaps(&stack, 1).unwrap(), stack);
    }
}

#[test]
fn even_kernels_and_empty_stacks_are_refused() {
    let stack = HeatmapStack::new(1, 2, 2, vec![0.5; 4]).unwrap();
    assert!(expand_heatmaps(&stack, 2).is_err());
    assert!(HeatmapStack::new(0, 2, 2, vec![]).is_err());
    assert!(HeatmapStack::new(1, 2, 2, vec![0.5; 3]).is_err());
}

fn standing_pose(state: impl Fn(usize) -> KeypointState) -> Vec<Keypoint> {
    (0..NUM_KEYPOINTS)
        .map(|p| Keypoint {
            // Cell centers of the 16×8 grid over a 64×32 image.
            x: 5.5 + (p % 4) as f64 * 4.0,
            y: 1.5 + (p % 16) as f64 * 4.0,
            state: state(p),
        })
        .collect()
}

#[test]
fn absent_head_is_invisible_and_scores_at_the_floor() {
    let config = PoseConfig::default();
    let kps = standing_pose(|p| if Group::of(p) == Group::Head { KeypointState::Absent } else { KeypointState::Visible });
    let guide = PoseGuidance::from_keypoints(&kps, (64, 32), (16, 8), &config).unwrap();
    assert_eq!(guide.group_visible, [false, true, true]);
    assert!(guide.group_scores[0] < config.tau);
    assert!(guide.group_scores[1] > 0.9 && guide.group_scores[2] > 0.9);
    for p in Group::Head.members() {
        assert!(!guide.keypoint_visible[p]);
    }
}

#[test]
fn occluded_group_scores_below_visible_ones() {
    let config = PoseConfig::default();
    let kps = standing_pose(|p| if Group::of(p) == Group::Lower { KeypointState::Occluded } else { KeypointState::Visible });
    let guide = PoseGuidance::from_keypoints(&kps, (64, 32), (16, 8), &config).unwrap();
    assert!(guide.group_scores[2] < guide.group_scores[0]);
    assert!((guide.group_scores[2] - 0.999 * config.occluded_scale).abs() < 1e-12);
}

#[test]
fn wrong_keypoint_count_is_a_contract_error() {
    let kps = standing_pose(|_| KeypointState::Visible);
    let err = PoseGuidance::from_keypoints(&kps[..16], (64, 32), (16, 8), &PoseConfig::default()).unwrap_err();
    assert!(matches!(err, pirt_core::PirtError::Contract(_)));
}
