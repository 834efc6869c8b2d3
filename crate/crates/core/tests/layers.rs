use pirt_core::model::{apply_confidence, Backbone, Csm, Irm};
use pirt_core::nn::{Ffn, Forward, Mhsa, ParamStore, TransformerStack};
use pirt_core::PirtError;
use pirt_tensor::{Mode, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `a[m×k] · b[k×n]` by triple loop.
fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i * n + j] += a[i * k + t] * b[t * n + j];
            }
        }
    }
    out
}

/// Per-head scalar attention over one token set `x[n×d]`.
fn naive_mhsa(store: &ParamStore<f64>, mhsa: &Mhsa, x: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = mhsa.d_model;
    let dk = mhsa.d_k();
    let mut cat = vec![0.0; n * d];
    let mut attns = Vec::new();
    for (h, head) in mhsa.heads.iter().enumerate() {
        let q = naive_matmul(x, store.get(head.wq).data(), n, d, dk);
        let k = naive_matmul(x, store.get(head.wk).data(), n, d, dk);
        let v = naive_matmul(x, store.get(head.wv).data(), n, d, dk);
        let mut attn = vec![0.0; n * n];
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..dk).map(|t| q[i * dk + t] * k[j * dk + t]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for j in 0..n {
                attn[i * n + j] = (logits[j] - m).exp() / z;
            }
            for t in 0..dk {
                cat[i * d + h * dk + t] = (0..n).map(|j| attn[i * n + j] * v[j * dk + t]).sum();
            }
        }
        attns.push(attn);
    }
    (naive_matmul(&cat, store.get(mhsa.merge).data(), n, d, d), attns)
}

fn mhsa_setup(seed: u64, d: usize, heads: usize) -> (ParamStore<f64>, Mhsa) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mhsa = Mhsa::new(&mut store, "mhsa", d, heads, &mut rng).unwrap();
    (store, mhsa)
}

#[test]
fn mhsa_matches_per_head_scalar_oracle() {
    for seed in 0..5 {
        let (mut store, mhsa) = mhsa_setup(seed, 8, 2);
        let x = random(&mut ChaCha8Rng::seed_from_u64(100 + seed), &[1, 4, 8]);
        let (want, want_attn) = naive_mhsa(&store, &mhsa, x.data(), 4);
        let mut ctx = Forward::new(&mut store, Mode::Eval, 0);
        let xv = ctx.tape.constant(x);
        let (y, attn) = mhsa.forward_with_attention(&mut ctx, xv).unwrap();
        for (a, b) in ctx.tape.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        for (h, w) in attn.iter().zip(&want_attn) {
            for (a, b) in ctx.tape.value(*h).data().iter().zip(w) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn zero_query_key_weights_average_the_tokens() {
    let (mut store, mhsa) = mhsa_setup(0, 4, 1);
    let head = mhsa.heads[0];
    *store.get_mut(head.wq) = Tensor::zeros(&[4, 4]);
    *store.get_mut(head.wk) = Tensor::zeros(&[4, 4]);
    *store.get_mut(head.wv) = Tensor::eye(4);
    *store.get_mut(mhsa.merge) = Tensor::eye(4);
    let x = random(&mut ChaCha8Rng::seed_from_u64(9), &[1, 5, 4]);
    let mean: Vec<f64> = (0..4).map(|c| (0..5).map(|i| x.data()[i * 4 + c]).sum::<f64>() / 5.0).collect();
    let mut ctx = Forward::new(&mut store, Mode::Eval, 0);
    let xv = ctx.tape.constant(x);
    let y = mhsa.forward(&mut ctx, xv).unwrap();
    for row in ctx.tape.value(y).data().chunks(4) {
        for (a, b) in row.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

fn permute_tokens(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let (s, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Tensor::from_fn(&[s, n, d], |i| {
        let (set, rest) = (i / (n * d), i % (n * d));
        let (tok, c) = (rest / d, rest % d);
        x.data()[set * n * d + perm[tok] * d + c]
    })
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), n in 1usize..9, heads in 1usize..4) {
        let (mut store, mhsa) = mhsa_setup(seed, 4 * heads, heads);
        let x = random(&mut ChaCha8Rng::seed_from_u64(seed ^ 1), &[2, n, 4 * heads]).map(|v| 3.0 * v);
        let mut ctx = Forward::new(&mut store, Mode::Eval, 0);
        let xv = ctx.tape.constant(x);
        let (_, attn) = mhsa.forward_with_attention(&mut ctx, xv).unwrap();
        for a in attn {
            for row in ctx.tape.value(a).data().chunks(n) {
                prop_assert!(row.iter().all(|&w| w >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn mhsa_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..9) {
        let (mut store, mhsa) = mhsa_setup(seed, 8, 2);
        let x = random(&mut ChaCha8Rng::seed_from_u64(seed ^ 2), &[1, n, 8]);
        let perm = shuffled(n, seed);
        let mut ctx = Forward::new(&mut store, Mode::Eval, 0);
        let a = ctx.tape.constant(x.clone());
        let b = ctx.tape.constant(permute_tokens(&x, &perm));
        let ya = mhsa.forward(&mut ctx, a).unwrap();
        let yb = mhsa.forward(&mut ctx, b).unwrap();
        let want = permute_tokens(ctx.tape.value(ya), &perm);
        prop_assert!(want.max_abs_diff(ctx.tape.value(yb)) <= 1e-6);
    }

    #[test]
    fn transformer_stack_is_equivariant_and_its_mean_invariant(seed in any::<u64>(), n in 2usize..7, units in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stack = TransformerStack::new(&mut store, "irt", units, 8, 2, 16, 0.1, &mut rng).unwrap();
        let x = random(&mut rng, &[3, n, 8]);
        let perm = shuffled(n, seed ^ 3);
        let mut ctx = Forward::new(&mut store, Mode::Eval, 0);
        let a = ctx.tape.constant(x.clone());
        let b = ctx.tape.constant(permute_tokens(&x, &perm));
        let ya = stack.forward(&mut ctx, a).unwrap();
        let yb = stack.forward(&mut ctx, b).unwrap();
        let want = permute_tokens(ctx.tape.value(ya), &perm);
        prop_assert!(want.max_abs_diff(ctx.tape.value(yb)) <= 1e-6);
        let ma = ctx.tape.mean(ya, 1, false).unwrap();
        let mb = ctx.tape.mean(yb, 1, false).unwrap();
        prop_assert!(ctx.tape.value(ma).max_abs_diff(ctx.tape.value(mb)) <= 1e-6);
    }
}

#[test]
fn empty_stack_is_identity_and_empty_sets_are_refused() {
    let mut store = ParamStore::<f64>::new();
    let stack = TransformerStack::default();
    let x = random(&mut ChaCha8Rng::seed_from_u64(4), &[2, 3, 8]);
    let mut ctx = Forward::new(&mut store, Mode::Train, 0);
    let xv = ctx.tape.constant(x.clone());
    let y = stack.forward(&mut ctx, xv).unwrap();
    assert_eq!(ctx.tape.value(y), &x);
    assert!(Tensor::<f64>::new(&[2, 0, 8], vec![]).is_err());
    let flat = ctx.tape.constant(Tensor::zeros(&[3, 8]));
    assert!(matches!(stack.forward(&mut ctx, flat), Err(PirtError::Contract(_))));
}

#[test]
fn ffn_matches_two_loop_oracle_in_eval_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let ffn = Ffn::new(&mut store, "ffn", 6, 10, 0.5, &mut rng).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = random(&mut rng, &shape);
    }
    let x = random(&mut rng, &[4, 6]);
    let get = |n: &str| store.by_name(n).unwrap().data().to_vec();
    let (w1, b1, w2, b2) = (get("ffn.w1"), get("ffn.b1"), get("ffn.w2"), get("ffn.b2"));
    let mut want = Vec::new();
    for row in x.data().chunks(6) {
        let hidden: Vec<f64> = (0..10)
            .map(|j| ((0..6).map(|i| row[i] * w1[i * 10 + j]).sum::<f64>() + b1[j]).max(0.0))
            .collect();
        for o in 0..6 {
            want.push((0..10).map(|j| hidden[j] * w2[j * 6 + o]).sum::<f64>() + b2[o]);
        }
    }
    let mut ctx = Forward::new(&mut store, Mode::Eval, 0);
    let xv = ctx.tape.constant(x);
    let y = ffn.forward(&mut ctx, xv).unwrap();
    for (a, b) in ctx.tape.value(y).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn ffn_with_zero_weights_emits_the_output_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let ffn = Ffn::new(&mut store, "ffn", 4, 8, 0.1, &mut rng).unwrap();
    for name in ["ffn.w1", "ffn.w2"] {
        let id = store.id(name).unwrap();
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
    let b2 = Tensor::new(&[4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
    *store.get_mut(store.id("ffn.b2").unwrap()) = b2.clone();
    let x = random(&mut rng, &[3, 4]);
    let mut ctx = Forward::new(&mut store, Mode::Train, 1);
    let xv = ctx.tape.constant(x);
    let y = ffn.forward(&mut ctx, xv).unwrap();
    for row in ctx.tape.value(y).data().chunks(4) {
        assert_eq!(row, b2.data());
    }
}

#[test]
fn csm_matches_loop_oracle_and_scores_equal_rows_equally() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let csm = Csm::new(&mut store, 8, &mut rng);
    for name in ["csm.fc1.b", "csm.fc2.b"] {
        let id = store.id(name).unwrap();
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = random(&mut rng, &shape);
    }
    let groups = random(&mut rng, &[2, 3, 8]);
    let get = |n: &str| store.by_name(n).unwrap().data().to_vec();
    let (w1, b1, w2, b2) = (get("csm.fc1.w"), get("csm.fc1.b"), get("csm.fc2.w"), get("csm.fc2.b"));
    let want: Vec<f64> = groups
        .data()
        .chunks(8)
        .map(|row| {
            let h: Vec<f64> = (0..4)
                .map(|j| ((0..8).map(|i| row[i] * w1[i * 4 + j]).sum::<f64>() + b1[j]).max(0.0))
                .collect();
            (0..4).map(|j| h[j] * w2[j]).sum::<f64>() + b2[0]
        })
        .collect();
    let same = Tensor::from_fn(&[1, 3, 8], |i| groups.data()[i % 8]);
    let mut ctx = Forward::new(&mut store, Mode::Eval, 0);
    let gv = ctx.tape.constant(groups);
    let s = csm.scores(&mut ctx, gv).unwrap();
    assert_eq!(ctx.tape.shape(s), &[2, 3]);
    for (a, b) in ctx.tape.value(s).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-10);
    }
    let sv = ctx.tape.constant(same);
    let s = csm.scores(&mut ctx, sv).unwrap();
    let d = ctx.tape.value(s).data();
    assert!(d[0] == d[1] && d[1] == d[2]);
}

fn confidence(self_scores: &[f64], pose: &[f64], groups: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let b = pose.len() / 3;
    let mut store = ParamStore::new();
    let mut ctx = Forward::new(&mut store, Mode::Eval, 0);
    let g = ctx.tape.constant(groups.clone());
    let s = ctx.tape.constant(Tensor::new(&[b, 3], self_scores.to_vec()).unwrap());
    let p = Tensor::new(&[b, 3], pose.to_vec()).unwrap();
    let (w, c) = apply_confidence(&mut ctx, g, s, &p).unwrap();
    (ctx.tape.value(w).clone(), ctx.tape.value(c).clone())
}

#[test]
fn confidence_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
    let p: Vec<f64> = (0..6).map(|_| rng.random_range(1e-6..0.999)).collect();
    let groups = random(&mut rng, &[2, 3, 5]);
    let (w, c) = confidence(&s, &p, &groups);
    for b in 0..2 {
        let raw: Vec<f64> = (0..3).map(|g| p[b * 3 + g] / (1.0 + (-s[b * 3 + g]).exp())).collect();
        let total: f64 = raw.iter().sum::<f64>() + 1e-8;
        for g in 0..3 {
            let want = raw[g] / total;
            assert!((c.at(&[b, g]) - want).abs() < 1e-10);
            for k in 0..5 {
                assert!((w.at(&[b, g, k]) - groups.at(&[b, g, k]) * want).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn symmetric_confidence_divides_by_three_and_occlusion_lowers_weight() {
    let groups = random(&mut ChaCha8Rng::seed_from_u64(10), &[1, 3, 4]);
    let (w, c) = confidence(&[0.3; 3], &[0.9; 3], &groups);
    for g in 0..3 {
        assert!((c.at(&[0, g]) - 1.0 / 3.0).abs() < 1e-8);
    }
    assert!(w.max_abs_diff(&groups.map(|v| v * c.at(&[0, 0]))) < 1e-15);
    let (_, c) = confidence(&[0.3; 3], &[0.9, 0.0999, 0.9], &groups);
    assert!(c.at(&[0, 1]) < c.at(&[0, 0]) && c.at(&[0, 1]) < c.at(&[0, 2]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn combined_confidences_are_normalized_and_scale_free(
        s in prop::collection::vec(-6.0f64..6.0, 3),
        p in prop::collection::vec(1e-3f64..1.0, 3),
        scale in 1e-2f64..1e2,
    ) {
        let groups = Tensor::ones(&[1, 3, 2]);
        let (_, c) = confidence(&s, &p, &groups);
        prop_assert!(c.data().iter().all(|&v| v >= 0.0));
        prop_assert!((c.data().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        let scaled: Vec<f64> = p.iter().map(|v| v * scale).collect();
        let (_, c2) = confidence(&s, &scaled, &groups);
        prop_assert!(c.max_abs_diff(&c2) <= 1e-6);
    }
}

fn irm_setup(seed: u64) -> (ParamStore<f64>, Irm, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let irm = Irm::new(&mut store, 8, 4, 2, 0.1, &mut rng).unwrap();
    for name in ["irm.theta.conv.w", "irm.theta.conv.b", "irm.theta.bn.gamma", "irm.theta.bn.beta"] {
        let id = store.id(name).unwrap_or_else(|| panic!("{name}"));
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
    let f = random(&mut rng, &[2, 4, 2, 8]);
    (store, irm, f)
}

#[test]
fn irm_with_zero_theta_and_empty_mask_is_zero() {
    for mode in [Mode::Train, Mode::Eval] {
        let (mut store, irm, f) = irm_setup(11);
        let mut ctx = Forward::new(&mut store, mode, 0);
        let fv = ctx.tape.constant(f);
        let y = irm.forward(&mut ctx, fv, &Tensor::zeros(&[2, 4, 2, 1])).unwrap();
        assert!(ctx.tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn irm_with_zero_theta_and_full_mask_is_relu_of_input() {
    let (mut store, irm, f) = irm_setup(12);
    let mut ctx = Forward::new(&mut store, Mode::Train, 0);
    let fv = ctx.tape.constant(f.clone());
    let y = irm.forward(&mut ctx, fv, &Tensor::ones(&[2, 4, 2, 1])).unwrap();
    assert_eq!(ctx.tape.value(y), &f.map(|v| v.max(0.0)));
}

#[test]
fn backbone_maps_zero_images_to_zero_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::<f64>::new();
    let backbone = Backbone::new(&mut store, 16, &mut rng);
    let mut ctx = Forward::new(&mut store, Mode::Eval, 0);
    let x = ctx.tape.constant(Tensor::zeros(&[1, 64, 32, 3]));
    let y = backbone.forward(&mut ctx, x).unwrap();
    assert_eq!(ctx.tape.shape(y), &[1, 16, 8, 16]);
    assert!(ctx.tape.value(y).data().iter().all(|&v| v == 0.0));
}
