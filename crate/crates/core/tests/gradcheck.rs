//! Central finite-difference checks for every differentiable op.

use cmtkd_core::ops::RunningStats;
use cmtkd_core::quant::{design_gaussian_levels, lsq_bounds, ste_range, tensor_std, LsqOptions};
use cmtkd_core::{Graph64, ParamStore64, Tensor64, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: u64 = 20;
const H: f64 = 1e-6;

/// Builds a scalar from the given inputs; returns the loss var.
type Build = dyn Fn(&mut Graph64, &[Var]) -> Var;

fn eval(build: &Build, inputs: &[Tensor64]) -> f64 {
    let mut g = Graph64::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let l = build(&mut g, &vars);
    g.value(l).item()
}

fn analytic(build: &Build, inputs: &[Tensor64]) -> Vec<Tensor64> {
    let mut g = Graph64::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let l = build(&mut g, &vars);
    g.backward(l, &mut ParamStore64::new()).unwrap();
    vars.iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor64::zeros(t.shape())))
        .collect()
}

fn numeric(build: &Build, inputs: &[Tensor64], which: usize) -> Vec<f64> {
    let mut work = inputs.to_vec();
    (0..inputs[which].numel())
        .map(|j| {
            let orig = work[which].data()[j];
            work[which].data_mut()[j] = orig + H;
            let up = eval(build, &work);
            work[which].data_mut()[j] = orig - H;
            let down = eval(build, &work);
            work[which].data_mut()[j] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    // floor keeps an all-zero gradient from turning FD round-off into a relative error
    diff / scale.max(1e-3)
}

fn check(name: &str, build: &Build, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor64>, tol: f64) {
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let inputs = make(&mut rng);
        let grads = analytic(build, &inputs);
        for i in 0..inputs.len() {
            let fd = numeric(build, &inputs, i);
            let err = rel_err(grads[i].data(), &fd);
            assert!(err < tol, "{name}: trial {trial}, input {i}: rel err {err:e}");
        }
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor64 {
    Tensor64::randn(shape, rng)
}

/// Contracts a tensor-valued output with fixed random weights.
fn project(g: &mut Graph64, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(Tensor64::randn(g.shape(out), &mut rng));
    let m = g.mul(out, r).unwrap();
    g.sum(m).unwrap()
}

#[test]
fn pointwise_ops() {
    check(
        "add/sub/mul/scale",
        &|g, v| {
            let a = g.add(v[0], v[1]).unwrap();
            let b = g.sub(a, v[2]).unwrap();
            let c = g.mul(b, v[0]).unwrap();
            let d = g.scalar_mul(c, 1.7).unwrap();
            project(g, d, 1)
        },
        |r| (0..3).map(|_| randn(r, &[3, 4])).collect(),
        1e-6,
    );
    check(
        "relu/mean/reshape",
        &|g, v| {
            let a = g.relu(v[0]).unwrap();
            let b = g.reshape(a, &[6, 2]).unwrap();
            let c = project(g, b, 2);
            let d = g.mean(v[0]).unwrap();
            g.add(c, d).unwrap()
        },
        |r| vec![randn(r, &[3, 4])],
        1e-6,
    );
    check(
        "weighted_sum",
        &|g, v| {
            let s = g.weighted_sum(&[(v[0], 0.5), (v[1], 2.0)]).unwrap();
            g.mul(s, s).unwrap()
        },
        |r| (0..2).map(|_| randn(r, &[1])).collect(),
        1e-6,
    );
}

#[test]
fn conv2d() {
    for (stride, padding) in [(1, 1), (2, 0), (1, 0), (2, 1)] {
        check(
            &format!("conv stride {stride} pad {padding}"),
            &move |g, v| {
                let y = g.conv2d(v[0], v[1], stride, padding).unwrap();
                project(g, y, 3)
            },
            |r| vec![randn(r, &[2, 3, 5, 5]), randn(r, &[4, 3, 3, 3])],
            1e-6,
        );
    }
    check(
        "conv 1x1",
        &|g, v| {
            let y = g.conv2d(v[0], v[1], 1, 0).unwrap();
            project(g, y, 4)
        },
        |r| vec![randn(r, &[2, 3, 4, 4]), randn(r, &[5, 3, 1, 1])],
        1e-6,
    );
}

#[test]
fn batch_norm_train_and_eval() {
    for train in [true, false] {
        check(
            &format!("batch_norm train={train}"),
            &move |g, v| {
                let mut mean = Tensor64::full(&[3], 0.2);
                let mut var = Tensor64::full(&[3], 1.5);
                let y = g
                    .batch_norm(v[0], v[1], v[2], RunningStats { mean: &mut mean, var: &mut var }, train)
                    .unwrap();
                project(g, y, 5)
            },
            |r| vec![randn(r, &[4, 3, 2, 2]), randn(r, &[3]), randn(r, &[3])],
            1e-6,
        );
    }
}

#[test]
fn linear_and_pooling() {
    check(
        "linear",
        &|g, v| {
            let y = g.linear(v[0], v[1], v[2]).unwrap();
            project(g, y, 6)
        },
        |r| vec![randn(r, &[4, 5]), randn(r, &[3, 5]), randn(r, &[3])],
        1e-6,
    );
    check(
        "max_pool",
        &|g, v| {
            let y = g.max_pool2d(v[0], 2, 2).unwrap();
            project(g, y, 7)
        },
        |r| vec![randn(r, &[2, 2, 4, 4])],
        1e-6,
    );
    check(
        "avg_pool/global_avg_pool",
        &|g, v| {
            let y = g.avg_pool2d(v[0], 2, 2).unwrap();
            let z = g.global_avg_pool(y).unwrap();
            project(g, z, 8)
        },
        |r| vec![randn(r, &[2, 3, 4, 4])],
        1e-6,
    );
}

#[test]
fn losses() {
    check(
        "cross_entropy",
        &|g, v| g.softmax_cross_entropy(v[0], &[0, 2, 1, 2]).unwrap(),
        |r| vec![randn(r, &[4, 3])],
        1e-6,
    );
    check(
        "soft_kl",
        &|g, v| {
            let target = cmtkd_core::logits::soft_logits(&Tensor64::from_f64(&[2, 3], &[1.0, 0.0, -1.0, 0.3, 0.2, 0.1]).unwrap(), 4.0).unwrap();
            g.soft_kl(v[0], &target, 4.0).unwrap()
        },
        |r| vec![randn(r, &[2, 3])],
        1e-6,
    );
    check(
        "attention_loss",
        &|g, v| g.attention_loss(v[0], v[1]).unwrap(),
        |r| vec![randn(r, &[3, 2, 3, 3]), randn(r, &[3, 4, 3, 3])],
        1e-6,
    );
    check(
        "fitnet_loss",
        &|g, v| g.fitnet_loss(v[0], v[1], v[2]).unwrap(),
        |r| vec![randn(r, &[2, 4, 3, 3]), randn(r, &[2, 3, 3, 3]), randn(r, &[4, 3, 1, 1])],
        1e-5,
    );
}

#[test]
fn fusion() {
    check(
        "fuse",
        &|g, v| {
            let f = g.fuse(v[0], &[v[1], v[2], v[3]]).unwrap();
            project(g, f, 9)
        },
        |r| {
            let mut v = vec![randn(r, &[3])];
            v.extend((0..3).map(|_| randn(r, &[2, 2, 3])));
            v
        },
        1e-6,
    );
}

#[test]
fn lsq_without_rounding_is_exact() {
    for signed in [true, false] {
        let (qn, qp) = lsq_bounds(3, signed);
        let opts = LsqOptions { qn, qp, grad_scale: 1.0, round: false };
        check(
            &format!("lsq relaxed signed={signed}"),
            &move |g, v| {
                let y = g.lsq(v[0], v[1], opts).unwrap();
                project(g, y, 10)
            },
            |r| vec![randn(r, &[3, 5]), Tensor64::scalar(r.random_range(0.2..0.6))],
            1e-6,
        );
    }
}

#[test]
fn lsq_step_gradient_matches_rounding_surrogate() {
    // With rounding on, the step gradient equals the derivative of
    // `clip(x/s)·s` plus `(round(u) − u)` per in-range element: the
    // straight-through surrogate with rounding frozen at the forward codes.
    let (qn, qp) = lsq_bounds(2, true);
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let x: Tensor64 = Tensor64::randn(&[20], &mut rng);
        let s: f64 = rng.random_range(0.3..0.7);
        let opts = LsqOptions { qn, qp, grad_scale: 1.0, round: true };
        let mut g = Graph64::new();
        let xv = g.input(x.clone());
        let sv = g.input(Tensor64::scalar(s));
        let y = g.lsq(xv, sv, opts).unwrap();
        let l = project(&mut g, y, 11);
        g.backward(l, &mut ParamStore64::new()).unwrap();
        let ds = g.grad(sv).unwrap().item();

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r = Tensor64::randn(&[20], &mut rng);
        let codes: Vec<f64> = x.data().iter().map(|&v| (v / s).clamp(qn as f64, qp as f64).round()).collect();
        let surrogate = |step: f64| -> f64 {
            x.data()
                .iter()
                .zip(&codes)
                .zip(r.data())
                .map(|((&v, &k), &w)| {
                    let u = v / s;
                    let out = if u < qn as f64 || u > qp as f64 { k * step } else { v + (k - u) * step };
                    out * w
                })
                .sum()
        };
        let fd = (surrogate(s + H) - surrogate(s - H)) / (2.0 * H);
        assert!((ds - fd).abs() <= 1e-6 * ds.abs().max(1.0), "trial {trial}: {ds} vs {fd}");
    }
}

#[test]
fn hwgq_mask_matches_range_oracle() {
    for bits in 1..=4u8 {
        for half_wave in [true, false] {
            let levels = design_gaussian_levels(bits, half_wave).unwrap();
            for trial in 0..TRIALS {
                let mut rng = ChaCha8Rng::seed_from_u64(trial);
                let x: Tensor64 = Tensor64::randn(&[40], &mut rng).scale(1.5);
                let up: Tensor64 = Tensor64::randn(&[40], &mut rng);
                let mut g = Graph64::new();
                let xv = g.input(x.clone());
                let y = g.hwgq(xv, &levels).unwrap();
                let r = g.constant(up.clone());
                let m = g.mul(y, r).unwrap();
                let l = g.sum(m).unwrap();
                g.backward(l, &mut ParamStore64::new()).unwrap();

                let sigma = tensor_std(&x);
                let (lo, hi) = ste_range(&levels, sigma);
                for ((&gx, &v), &u) in g.grad(xv).unwrap().data().iter().zip(x.data()).zip(up.data()) {
                    let inside = lo <= v && v <= hi;
                    assert_eq!(gx, if inside { u } else { 0.0 });
                }
            }
        }
    }
}
