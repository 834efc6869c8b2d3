//! Independent oracles shared by the property tests and the acceptance
//! runner. Each check returns the first violation it finds.
#![allow(dead_code)]

use pirt_core::nn::{Forward, ParamStore, TransformerStack};
use pirt_core::pose::{expand_heatmaps, merge_mask, pose_part_pool, Group, HeatmapStack, FLOOR, NUM_KEYPOINTS};
use pirt_core::retrieval::{
    coarse_rank, evaluate_records, local_rerank, rank_all, EmbeddingRecord, LocalEmbedding, MatchConfig, ScoreMode,
};
use pirt_tensor::{Mode, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), String>;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// 17 maps on a random grid with every value in `(FLOOR, PEAK]`.
pub fn random_stack(rng: &mut ChaCha8Rng) -> HeatmapStack {
    let (h, w) = (rng.random_range(1..10), rng.random_range(1..8));
    let maps = (0..NUM_KEYPOINTS * h * w).map(|_| rng.random_range(1e-6..0.999)).collect();
    HeatmapStack::new(NUM_KEYPOINTS, h, w, maps).unwrap()
}

/// Windowed max with clipped borders, one cell at a time.
pub fn naive_expand(stack: &HeatmapStack, kernel: usize) -> Vec<f64> {
    let (h, w, r) = (stack.height() as isize, stack.width() as isize, (kernel / 2) as isize);
    let mut out = Vec::new();
    for p in 0..stack.count() {
        let m = stack.map(p);
        for y in 0..h {
            for x in 0..w {
                let mut best = f64::MIN;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        if (0..h).contains(&yy) && (0..w).contains(&xx) {
                            best = best.max(m[(yy * w + xx) as usize]);
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

/// Expansion, mask, group score and pooling invariants over `n` stacks.
pub fn pose_invariants(n: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..n {
        let stack = random_stack(&mut rng);
        let kernel = [1, 3, 5][case % 3];
        let expanded = expand_heatmaps(&stack, kernel).map_err(|e| e.to_string())?;
        for (i, (&e, &o)) in expanded.values().iter().zip(stack.values()).enumerate() {
            if e < o {
                return Err(format!("stack {case}: expansion lowered cell {i} from {o} to {e}"));
            }
        }
        if expanded.values() != naive_expand(&stack, kernel).as_slice() {
            return Err(format!("stack {case}: expansion differs from the windowed max"));
        }

        let mask = merge_mask(&expanded);
        for g in 0..expanded.cells() {
            let want = (0..expanded.count()).map(|p| expanded.map(p)[g]).fold(f64::MIN, f64::max);
            if mask.values[g] != want {
                return Err(format!("stack {case}: mask cell {g} is {} not {want}", mask.values[g]));
            }
        }

        let scores = stack.group_scores();
        for group in Group::ALL {
            let want = group.members().flat_map(|p| stack.map(p).iter().copied()).fold(f64::MIN, f64::max);
            if scores[group.index()] != want {
                return Err(format!("stack {case}: {group:?} score {} not {want}", scores[group.index()]));
            }
        }

        let c = rng.random_range(1..6);
        let features = random_tensor(&mut rng, &[stack.height(), stack.width(), c]);
        let tau = rng.random_range(0.0..FLOOR);
        let tokens = pose_part_pool(&stack, &features, tau).map_err(|e| e.to_string())?;
        let cells = stack.cells() as f64;
        let average: Vec<f64> = (0..c)
            .map(|k| features.data().iter().skip(k).step_by(c).sum::<f64>() / cells)
            .collect();
        for p in 0..stack.count() {
            if !tokens.visible[p] {
                return Err(format!("stack {case}: keypoint {p} invisible under a sub-floor tau"));
            }
            for (k, (&t, &a)) in tokens.token(p).iter().zip(&average).enumerate() {
                if (t - a).abs() > 1e-10 {
                    return Err(format!("stack {case}: token {p}[{k}] is {t}, average pooling gives {a}"));
                }
            }
        }
    }
    Ok(())
}

pub fn random_records(rng: &mut ChaCha8Rng, n: usize, ids: usize, cameras: usize, dim: usize) -> Vec<EmbeddingRecord> {
    (0..n)
        .map(|_| {
            let identity = rng.random_range(0..ids);
            let local = LocalEmbedding {
                groups: std::array::from_fn(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()),
                confidences: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
                visible: std::array::from_fn(|_| rng.random_bool(0.8)),
            };
            EmbeddingRecord {
                identity,
                camera: rng.random_range(0..cameras),
                // Identity offset keeps some structure in the ranking.
                global: (0..dim).map(|k| rng.random_range(-1.0..1.0) + if k == identity % dim { 1.0 } else { 0.0 }).collect(),
                local: Some(local),
            }
        })
        .collect()
}

/// `(mAP, CMC[1..=k_max], evaluated queries)` by exhaustive sorting and
/// explicit per-positive precision.
pub fn brute_force_metrics(queries: &[EmbeddingRecord], gallery: &[EmbeddingRecord], k_max: usize) -> (f64, Vec<f64>, usize) {
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        1.0 - d / (na * nb)
    };
    let mut ap_sum = 0.0;
    let mut hits_at = vec![0usize; k_max];
    let mut evaluated = 0;
    for q in queries {
        let mut valid: Vec<(f64, usize)> = gallery
            .iter()
            .enumerate()
            .filter(|(_, g)| !(g.identity == q.identity && g.camera == q.camera))
            .map(|(i, g)| (cos(&q.global, &g.global), i))
            .collect();
        valid.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let relevant: Vec<bool> = valid.iter().map(|&(_, i)| gallery[i].identity == q.identity).collect();
        let total = relevant.iter().filter(|&&r| r).count();
        if total == 0 {
            continue;
        }
        evaluated += 1;
        let mut precisions = Vec::new();
        for (pos, &r) in relevant.iter().enumerate() {
            if r {
                let correct_so_far = relevant[..=pos].iter().filter(|&&x| x).count();
                precisions.push(correct_so_far as f64 / (pos + 1) as f64);
            }
        }
        ap_sum += precisions.iter().sum::<f64>() / total as f64;
        let first = relevant.iter().position(|&r| r).unwrap();
        for (k, slot) in hits_at.iter_mut().enumerate() {
            if first <= k {
                *slot += 1;
            }
        }
    }
    let n = evaluated as f64;
    (ap_sum / n, hits_at.iter().map(|&h| h as f64 / n).collect(), evaluated)
}

/// The library metrics against the brute-force reference on 20 × 50
/// instances, one per seed.
pub fn metric_oracle(seeds: std::ops::Range<u64>) -> Check {
    let coarse = MatchConfig {
        lambda: 0.0,
        ..MatchConfig::default()
    };
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let queries = random_records(&mut rng, 20, 8, 3, 6);
        let gallery = random_records(&mut rng, 50, 8, 3, 6);
        let k_max = 10;
        let (map, cmc, evaluated) = brute_force_metrics(&queries, &gallery, k_max);
        let report = evaluate_records(&queries, &gallery, &coarse, k_max).map_err(|e| e.to_string())?;
        if report.n_queries != evaluated {
            return Err(format!("seed {seed}: {} queries evaluated, reference has {evaluated}", report.n_queries));
        }
        if (report.map - map).abs() > 1e-9 {
            return Err(format!("seed {seed}: mAP {} vs reference {map}", report.map));
        }
        for (k, (a, b)) in report.cmc.iter().zip(&cmc).enumerate() {
            if (a - b).abs() > 1e-9 {
                return Err(format!("seed {seed}: CMC@{} {a} vs reference {b}", k + 1));
            }
        }
    }
    Ok(())
}

/// `lambda = 0` keeps the coarse order; equal confidences make every
/// score mode rank alike.
pub fn rerank_degeneracy(seeds: std::ops::Range<u64>) -> Check {
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let queries = random_records(&mut rng, 20, 8, 3, 6);
        let mut gallery = random_records(&mut rng, 50, 8, 3, 6);
        for (qi, q) in queries.iter().enumerate() {
            let coarse = coarse_rank(qi, q, &gallery).map_err(|e| e.to_string())?;
            for mode in ScoreMode::ALL {
                let config = MatchConfig {
                    top_n: rng.random_range(1..60),
                    lambda: 0.0,
                    score_mode: mode,
                };
                let reranked = local_rerank(q, &coarse, &gallery, &config);
                if reranked.indices() != coarse.indices() {
                    return Err(format!("seed {seed} query {qi}: lambda 0 changed the {mode} order"));
                }
            }
        }

        let mut queries = queries;
        let level = rng.random_range(0.05..1.0);
        for r in queries.iter_mut().chain(gallery.iter_mut()) {
            r.local.as_mut().unwrap().confidences = [level; 3];
        }
        let orderings: Vec<Vec<Vec<usize>>> = ScoreMode::ALL
            .iter()
            .map(|&mode| {
                let config = MatchConfig {
                    top_n: 30,
                    lambda: 0.7,
                    score_mode: mode,
                };
                rank_all(&queries, &gallery, &config).map(|lists| lists.iter().map(|l| l.indices()).collect())
            })
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        if orderings.iter().any(|o| o != &orderings[0]) {
            return Err(format!("seed {seed}: equal confidences rank differently across score modes"));
        }
    }
    Ok(())
}

fn permute_tokens(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let (s, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Tensor::from_fn(&[s, n, d], |i| {
        let (set, rest) = (i / (n * d), i % (n * d));
        x.data()[set * n * d + perm[rest / d] * d + rest % d]
    })
}

/// Attention rows, stack equivariance, token-mean invariance and the empty
/// stack, across `seeds`.
pub fn transformer_invariants(seeds: std::ops::Range<u64>) -> Check {
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..10);
        let units = rng.random_range(1..4);
        let mut store = ParamStore::new();
        let stack = TransformerStack::new(&mut store, "irt", units, 16, 4, 32, 0.1, &mut rng).map_err(|e| e.to_string())?;
        let x = random_tensor(&mut rng, &[3, n, 16]).map(|v| 2.0 * v);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);

        let mut ctx = Forward::new(&mut store, Mode::Eval, seed);
        let a = ctx.tape.constant(x.clone());
        let b = ctx.tape.constant(permute_tokens(&x, &perm));
        let (_, attn) = stack.units[0].mhsa.forward_with_attention(&mut ctx, a).map_err(|e| e.to_string())?;
        for head in attn {
            for row in ctx.tape.value(head).data().chunks(n) {
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&w| w < 0.0) {
                    return Err(format!("seed {seed}: attention row sums to {sum}"));
                }
            }
        }
        let ya = stack.forward(&mut ctx, a).map_err(|e| e.to_string())?;
        let yb = stack.forward(&mut ctx, b).map_err(|e| e.to_string())?;
        let diff = permute_tokens(ctx.tape.value(ya), &perm).max_abs_diff(ctx.tape.value(yb));
        if diff > 1e-6 {
            return Err(format!("seed {seed}: permuted tokens move outputs by {diff}"));
        }
        let ma = ctx.tape.mean(ya, 1, false).map_err(|e| e.to_string())?;
        let mb = ctx.tape.mean(yb, 1, false).map_err(|e| e.to_string())?;
        let diff = ctx.tape.value(ma).max_abs_diff(ctx.tape.value(mb));
        if diff > 1e-6 {
            return Err(format!("seed {seed}: branch embedding moves by {diff} under permutation"));
        }

        let empty = TransformerStack::default();
        let y = empty.forward(&mut ctx, a).map_err(|e| e.to_string())?;
        if ctx.tape.value(y) != &x {
            return Err(format!("seed {seed}: zero units altered the tokens"));
        }
    }
    Ok(())
}
