//! Every primitive's backward rule against central finite differences.

use pirt_tensor::{grad_check, GradCheck, Mode, Result, Tape, Tensor, Var, Window};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [11, 23, 37, 41, 59];
const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Weights a non-scalar output by fixed random coefficients so every output
/// element contributes a distinct gradient.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = tape.constant(random(&mut rng, tape.shape(y)));
    let p = tape.mul(y, w)?;
    Ok(tape.sum_all(p))
}

fn check_multi(name: &str, shapes: &[&[usize]], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<_> = shapes.iter().map(|s| random(&mut rng, s)).collect();
        let report = GradCheck::default()
            .run(&inputs, |tape, vars| {
                let y = f(tape, vars)?;
                project(tape, y, seed)
            })
            .unwrap();
        assert!(report.max_rel_error < TOL, "{name} seed {seed}: {report:?}");
    }
}

fn check_unary(name: &str, shape: &[usize], f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>) {
    check_multi(name, &[shape], |tape, v| f(tape, v[0]));
}

#[test]
fn linear_function_is_exact() {
    let x = Tensor::from_fn(&[7], |i| i as f64 * 0.3 - 1.0);
    let err = grad_check(|tape, x| Ok(tape.sum_all(x)), &x, 1e-5).unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn elementwise_binary() {
    check_multi("add", &[&[3, 4], &[4]], |t, v| t.add(v[0], v[1]));
    check_multi("sub", &[&[3, 1], &[3, 4]], |t, v| t.sub(v[0], v[1]));
    check_multi("mul", &[&[2, 3, 4], &[1, 3, 1]], |t, v| t.mul(v[0], v[1]));
    check_multi("div", &[&[3, 4], &[3, 4]], |t, v| {
        let d = t.add_scalar(v[1], 3.0);
        t.div(v[0], d)
    });
}

#[test]
fn elementwise_unary() {
    check_unary("relu", &[4, 5], |t, x| Ok(t.relu(x)));
    check_unary("sigmoid", &[4, 5], |t, x| Ok(t.sigmoid(x)));
    check_unary("exp", &[4, 5], |t, x| Ok(t.exp(x)));
    check_unary("log", &[4, 5], |t, x| {
        let s = t.square(x);
        let p = t.add_scalar(s, 0.5);
        Ok(t.log(p))
    });
    check_unary("sqrt", &[6], |t, x| {
        let s = t.square(x);
        let p = t.add_scalar(s, 0.2);
        Ok(t.sqrt(p))
    });
    check_unary("scalar ops", &[6], |t, x| {
        let a = t.mul_scalar(x, -2.5);
        let b = t.add_scalar(a, 1.5);
        Ok(t.neg(b))
    });
}

#[test]
fn linear_algebra() {
    check_multi("matmul", &[&[3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1]));
    check_multi("bmm", &[&[2, 3, 4], &[2, 4, 2]], |t, v| t.bmm(v[0], v[1]));
}

#[test]
fn shape_ops() {
    check_unary("reshape", &[2, 6], |t, x| t.reshape(x, &[3, 4]));
    check_unary("permute", &[2, 3, 4], |t, x| t.permute(x, &[1, 2, 0]));
    check_unary("transpose", &[2, 3, 4], |t, x| t.transpose(x, 0, 2));
    check_multi("concat", &[&[2, 3], &[2, 1], &[2, 2]], |t, v| t.concat(v, 1));
    check_unary("chunk", &[4, 6], |t, x| {
        let parts = t.chunk(x, 3, 1)?;
        let a = t.mul(parts[0], parts[2])?;
        t.add(a, parts[1])
    });
    check_unary("index_select", &[5, 3], |t, x| t.index_select(x, 0, &[4, 1, 1]));
    check_unary("take", &[3, 3], |t, x| t.take(x, &[0, 8, 4, 4]));
    check_unary("masked_mul", &[2, 3, 2], |t, x| {
        let mask = Tensor::from_fn(&[2, 3, 1], |i| (i % 2) as f64);
        t.masked_mul(x, &mask)
    });
}

#[test]
fn reductions() {
    check_unary("sum", &[3, 4, 2], |t, x| t.sum(x, 1, false));
    check_unary("mean", &[3, 4, 2], |t, x| t.mean(x, 2, true));
    check_unary("max", &[3, 4, 2], |t, x| Ok(t.max(x, 1, false)?.0));
    check_unary("mean_all", &[3, 4], |t, x| Ok(t.mean_all(x)));
}

#[test]
fn softmax_family() {
    check_unary("softmax last", &[3, 5], |t, x| t.softmax(x, 1));
    check_unary("softmax middle", &[2, 4, 3], |t, x| t.softmax(x, 1));
    check_unary("log_softmax", &[3, 5], |t, x| t.log_softmax(x, 1));
}

#[test]
fn softmax_cross_entropy_on_random_logits() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::from_fn(&[4, 6], |_| rng.random_range(-3.0..3.0));
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..6)).collect();
        let err = grad_check(
            |t, x| {
                let ls = t.log_softmax(x, 1)?;
                let flat: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * 6 + l).collect();
                let picked = t.take(ls, &flat)?;
                let m = t.mean_all(picked);
                Ok(t.neg(m))
            },
            &logits,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn convolution() {
    check_multi("conv3x3 same", &[&[2, 5, 4, 3], &[3, 3, 3, 2]], |t, v| t.conv2d(v[0], v[1], 1, 1));
    check_multi("conv3x3 stride2", &[&[1, 6, 4, 2], &[3, 3, 2, 3]], |t, v| t.conv2d(v[0], v[1], 2, 1));
    check_multi("conv1x1", &[&[2, 3, 2, 4], &[1, 1, 4, 3]], |t, v| t.conv2d(v[0], v[1], 1, 0));
}

#[test]
fn pooling() {
    check_unary("max_pool same", &[2, 4, 4, 2], |t, x| t.max_pool2d(x, Window::same(3)));
    check_unary("max_pool patch", &[1, 8, 4, 2], |t, x| t.max_pool2d(x, Window::new((4, 2), (4, 2), (0, 0))));
    check_unary("avg_pool", &[1, 5, 4, 2], |t, x| t.avg_pool2d(x, Window::new((3, 3), (2, 2), (1, 1))));
    check_unary("global_avg_pool", &[2, 3, 4, 2], |t, x| t.global_avg_pool(x));
}

#[test]
fn normalization() {
    check_unary("batch norm axes", &[3, 2, 2, 3], |t, x| t.normalize(x, 0..3, 1e-5));
    check_unary("instance norm axes", &[2, 3, 2, 3], |t, x| t.normalize(x, 1..3, 1e-5));
    check_unary("layer norm axes", &[4, 5], |t, x| t.normalize(x, 1..2, 1e-5));
}

#[test]
fn dropout_with_fixed_mask() {
    check_unary("dropout", &[4, 6], |t, x| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        t.dropout(x, 0.3, Mode::Train, &mut rng)
    });
}

#[test]
fn corrupted_rule_is_detected() {
    // A doubling op whose backward forgets the factor 2.
    let x = Tensor::from_fn(&[3], |i| i as f64);
    let err = grad_check(
        |t, x| {
            let value = t.value(x).map(|v| 2.0 * v);
            let y = t.record(value, &[x], Box::new(|args| vec![Some(args.grad.to_vec())]));
            Ok(t.sum_all(y))
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(err > 0.5, "{err}");
}
