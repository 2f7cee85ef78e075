//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs every criterion by default; pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test -p ahl-core --test acceptance -- 3 4`.

use std::process::ExitCode;
use std::time::Instant;

use ahl_core::controller::{sample_action, Controller, PolicyShape, Trajectory, ACTIONS};
use ahl_core::heatmap::{render_targets, LandmarkSet, SigmaBounds, SigmaVector};
use ahl_core::laoml::{run_loop, run_training, Mode, RunArtifacts, TrainConfig};
use ahl_core::learner::{coordinate_loss, Architecture, Precision, UNet};
use ahl_core::metrics::{mre, pck, ErrorTable};
use ahl_core::numkernel::*;
use ahl_core::surrogate::{Surrogate, SurrogateParams};
use ahl_core::synthdata::{gen_dataset, DatasetSplit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

const H: f64 = 1e-6;
const TOL: f64 = 1e-5;
const FLOOR: f64 = 1e-4;
const INSTANCES: u64 = 20;

struct Verdict {
    pass: bool,
    detail: String,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(r))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Worst error per named check.
#[derive(Default)]
struct Worst(Vec<(&'static str, f64)>);

impl Worst {
    fn add(&mut self, name: &'static str, err: f64) {
        match self.0.iter_mut().find(|(n, _)| *n == name) {
            Some((_, e)) => *e = e.max(err),
            None => self.0.push((name, err)),
        }
    }
}

/// Normwise relative error of one gradient tensor. Central differences carry
/// absolute round-off near `eps * |f| / h`, which swamps entries far below the
/// gradient's own scale, so entries are measured against that scale.
fn normwise(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    max_scaled_error(a.data(), b.data(), FLOOR)
}

fn op_checks(worst: &mut Worst) {
    let geometries = [
        ConvGeometry::same(3),
        ConvGeometry { stride: 2, pad: 1 },
        ConvGeometry { stride: 1, pad: 0 },
    ];
    for inst in 0..INSTANCES {
        let mut r = rng(1000 + inst);
        let g = geometries[inst as usize % 3];
        let x = randn(&[3, 5, 5], &mut r);
        let w = randn(&[4, 3, 3, 3], &mut r);
        let b = randn(&[4], &mut r);
        let p = randn(conv2d(&x, &w, &b, g).unwrap().shape(), &mut r);
        let grads = conv2d_backward(&x, &w, g, &p).unwrap();
        let fx = finite_diff_grad(|x| dot(&conv2d(x, &w, &b, g).unwrap(), &p), &x, H);
        let fw = finite_diff_grad(|w| dot(&conv2d(&x, w, &b, g).unwrap(), &p), &w, H);
        let fb = finite_diff_grad(|b| dot(&conv2d(&x, &w, b, g).unwrap(), &p), &b, H);
        worst.add("conv2d", normwise(&grads.input, &fx));
        worst.add("conv2d", normwise(&grads.weights, &fw));
        worst.add("conv2d", normwise(&grads.bias, &fb));

        let x = randn(&[16], &mut r);
        let w = randn(&[8, 16], &mut r);
        let b = randn(&[8], &mut r);
        let p = randn(&[8], &mut r);
        let grads = linear_backward(&x, &w, &p).unwrap();
        let fx = finite_diff_grad(|x| dot(&linear(x, &w, &b).unwrap(), &p), &x, H);
        let fw = finite_diff_grad(|w| dot(&linear(&x, w, &b).unwrap(), &p), &w, H);
        let fb = finite_diff_grad(|b| dot(&linear(&x, &w, b).unwrap(), &p), &b, H);
        worst.add("linear", normwise(&grads.input, &fx));
        worst.add("linear", normwise(&grads.weights, &fw));
        worst.add("linear", normwise(&grads.bias, &fb));

        let x = randn(&[2, 6, 4], &mut r);
        let p = randn(&[2, 6, 4], &mut r);
        let g = relu_backward(&x, &p).unwrap();
        let f = finite_diff_grad(|x| dot(&relu(x), &p), &x, H);
        worst.add("relu", normwise(&g, &f));

        let pooled = pool_max2(&x).unwrap();
        let p = randn(pooled.output.shape(), &mut r);
        let g = pool_max2_backward(&pooled.argmax, x.shape(), &p).unwrap();
        let f = finite_diff_grad(|x| dot(&pool_max2(x).unwrap().output, &p), &x, H);
        worst.add("pool_max2", normwise(&g, &f));

        let p = randn(&[2, 12, 8], &mut r);
        let g = upsample_nearest2_backward(x.shape(), &p).unwrap();
        let f = finite_diff_grad(|x| dot(&upsample_nearest2(x).unwrap(), &p), &x, H);
        worst.add("upsample_nearest2", normwise(&g, &f));

        let z = randn(&[3], &mut r);
        let p = randn(&[3], &mut r);
        let g = softmax_backward(&softmax(&z).unwrap(), &p).unwrap();
        let f = finite_diff_grad(|z| dot(&softmax(z).unwrap(), &p), &z, H);
        worst.add("softmax", normwise(&g, &f));

        let pred = randn(&[2, 4, 4], &mut r);
        let target = randn(&[2, 4, 4], &mut r);
        let g = mse_mean_backward(&pred, &target).unwrap();
        let f = finite_diff_grad(|p| mse_per_channel(p, &target).unwrap().iter().sum::<f64>() / 2.0, &pred, H);
        worst.add("mse", normwise(&g, &f));

        let a = randn(&[1, 3, 3], &mut r);
        let c = randn(&[2, 3, 3], &mut r);
        let p = randn(&[3, 3, 3], &mut r);
        let (pa, pc) = split_channels(&p, 1).unwrap();
        let fa = finite_diff_grad(|a| dot(&concat_channels(a, &c).unwrap(), &p), &a, H);
        let fc = finite_diff_grad(|c| dot(&concat_channels(&a, c).unwrap(), &p), &c, H);
        worst.add("concat_channels", normwise(&pa, &fa).max(normwise(&pc, &fc)));
    }
}

fn tiny_arch() -> Architecture {
    Architecture {
        height: 16,
        width: 16,
        in_channels: 1,
        depth: 3,
        widths: vec![2, 3, 4],
        landmarks: 2,
    }
}

/// Freshly built network with every parameter jittered, so the zero-initialised
/// head does not hide the gradient paths behind it.
fn jittered_net(seed: u64) -> UNet<f64> {
    let mut net = UNet::<f64>::build(tiny_arch(), seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let n = Normal::new(0.0, 0.2).unwrap();
    for p in net.params_mut() {
        let noise = Tensor::from_fn(p.shape(), |_| n.sample(&mut r));
        p.add_assign(&noise).unwrap();
    }
    net
}

/// Normwise relative error over the whole parameter gradient. Some parameters
/// have an exactly zero gradient (soft-argmax ignores a per-channel shift, so
/// the head bias drops out of the coordinate loss) and only round-off remains
/// in their differences.
fn param_check(net: &UNet<f64>, grads: &[Tensor<f64>], loss: impl Fn(&UNet<f64>) -> f64) -> f64 {
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, g) in grads.iter().enumerate() {
        let fd = finite_diff_grad(
            |t| {
                let mut probe = net.clone();
                probe.params_mut()[k] = t.clone();
                loss(&probe)
            },
            &net.params()[k],
            H,
        );
        analytic.extend_from_slice(g.data());
        numeric.extend_from_slice(fd.data());
    }
    max_scaled_error(&analytic, &numeric, FLOOR)
}

fn loss_checks(worst: &mut Worst) {
    for inst in 0..INSTANCES {
        let mut r = rng(2000 + inst);
        let net = jittered_net(inst);
        let img = Tensor::from_fn(&[1, 16, 16], |_| r.gen_range(0.0..1.0));
        let coords: Vec<(f64, f64)> = (0..2).map(|_| (r.gen_range(2.0..13.0), r.gen_range(2.0..13.0))).collect();
        let lm = LandmarkSet::unnamed(coords.clone()).unwrap();
        let sig = SigmaVector::new(vec![r.gen_range(1.0..6.0), r.gen_range(1.0..6.0)], SigmaBounds::default()).unwrap();
        let target = render_targets::<f64>(&lm, &sig, 16, 16).unwrap();

        let (_, grads) = net.heatmap_loss_and_grads(&img, &target).unwrap();
        let err = param_check(&net, &grads, |n| {
            let out = n.forward(&img).unwrap();
            mse_per_channel(&out.values, &target.values).unwrap().iter().sum::<f64>() / 2.0
        });
        worst.add("heatmap MSE loss", err);

        let (_, grads) = net.coordinate_loss_and_grads(&img, &coords).unwrap();
        let err = param_check(&net, &grads, |n| {
            let out = n.forward(&img).unwrap();
            coordinate_loss(&out.values, &coords).unwrap().0
        });
        worst.add("coordinate loss", err);

        let mut c = Controller::new(PolicyShape::default(), 1e-3, inst).unwrap();
        let n = Normal::new(0.0, 0.3).unwrap();
        let last = c.params().len();
        for k in [last - 2, last - 1] {
            let shape = c.params()[k].shape().to_vec();
            c.params_mut()[k] = Tensor::from_fn(&shape, |_| n.sample(&mut r));
        }
        let trajs: Vec<Trajectory> = (0..4)
            .map(|_| Trajectory {
                history: (0..5).map(|_| r.gen_range(0.0..1.0)).collect(),
                index: r.gen_range(0..3),
                reward: r.gen_range(-5.0..25.0),
            })
            .collect();
        let (_, grads) = c.surrogate_loss_and_grads(&trajs).unwrap();
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for (k, g) in grads.iter().enumerate() {
            let fd = finite_diff_grad(
                |t| {
                    let mut probe = c.clone();
                    probe.params_mut()[k] = t.clone();
                    probe.surrogate_loss_and_grads(&trajs).unwrap().0
                },
                &c.params()[k],
                H,
            );
            analytic.extend_from_slice(g.data());
            numeric.extend_from_slice(fd.data());
        }
        worst.add("REINFORCE surrogate", max_scaled_error(&analytic, &numeric, FLOOR));
    }
}

fn criterion_1() -> Verdict {
    let mut worst = Worst::default();
    op_checks(&mut worst);
    loss_checks(&mut worst);
    let pass = worst.0.iter().all(|(_, e)| *e <= TOL);
    let parts: Vec<String> = worst.0.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    Verdict {
        pass,
        detail: format!("{INSTANCES} instances each, worst errors: {}", parts.join(", ")),
    }
}

fn criterion_2() -> Verdict {
    let mut r = rng(2);
    let radii = [2.0, 2.5, 3.0, 4.0, 5.0];
    let mut mismatches = 0;
    let mut boundary_hits = 0;
    for _ in 0..100 {
        let rows = r.gen_range(1..30);
        let cols = r.gen_range(1..6);
        // a quarter of the entries sit exactly on a threshold
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| {
                if r.gen_bool(0.25) {
                    radii[r.gen_range(0..radii.len())]
                } else {
                    r.gen_range(0.0..8.0)
                }
            })
            .collect();
        let t = ErrorTable::new(rows, cols, data.clone()).unwrap();
        let m = mre(&t).unwrap();
        let mut per = vec![0.0; cols];
        for (j, slot) in per.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in 0..rows {
                s += data[i * cols + j];
            }
            *slot = s / rows as f64;
        }
        let mut s = 0.0;
        for v in &data {
            s += v;
        }
        let mean = s / data.len() as f64;
        let mut ss = 0.0;
        for v in &data {
            ss += (v - mean) * (v - mean);
        }
        let sd = (ss / data.len() as f64).sqrt();
        if m.per_landmark != per || m.mean != mean || m.sd != sd {
            mismatches += 1;
        }
        for &rad in &radii {
            let mut hits = 0;
            for v in &data {
                if *v < rad {
                    hits += 1;
                }
                if *v == rad {
                    boundary_hits += 1;
                }
            }
            if pck(&t, rad).unwrap() != hits as f64 / data.len() as f64 * 100.0 {
                mismatches += 1;
            }
        }
    }
    Verdict {
        pass: mismatches == 0 && boundary_hits > 0,
        detail: format!("100 tables, {mismatches} mismatches, {boundary_hits} entries exactly on a threshold"),
    }
}

fn criterion_3() -> Verdict {
    let history = [0.8, 0.6, 0.5, 0.45, 0.42];
    let best = ACTIONS.iter().position(|&a| a == -1.0).unwrap();
    let mut solved = Vec::new();
    for seed in 0..10u64 {
        let mut c = Controller::new(PolicyShape::default(), 1e-3, seed).unwrap();
        let mut r = rng(300 + seed);
        let mut reached = None;
        for step in 1..=2000 {
            let probs = c.policy_forward(&history).unwrap();
            let trajs: Vec<Trajectory> = (0..10)
                .map(|_| {
                    let a = sample_action(probs, &mut r);
                    Trajectory {
                        history: history.to_vec(),
                        index: a.index,
                        reward: if a.delta == -1.0 { 1.0 } else { 0.0 },
                    }
                })
                .collect();
            c.reinforce_update(&trajs).unwrap();
            if c.policy_forward(&history).unwrap()[best] > 0.9 {
                reached = Some(step);
                break;
            }
        }
        solved.push(reached);
    }
    let ok = solved.iter().filter(|s| s.is_some()).count();
    let steps: Vec<String> = solved
        .iter()
        .map(|s| s.map_or("-".into(), |v| v.to_string()))
        .collect();
    Verdict {
        pass: ok >= 9,
        detail: format!("{ok}/10 seeds reach P(-1) > 0.9; updates needed: [{}]", steps.join(", ")),
    }
}

/// First iteration from which the trace stays within `tol` of `target`.
fn settles(trace: &[f64], target: f64, tol: f64) -> Option<usize> {
    (0..trace.len()).find(|&k| trace[k..].iter().all(|s| (s - target).abs() <= tol))
}

fn surrogate_run(config: &TrainConfig) -> RunArtifacts {
    run_loop(config, Surrogate::new(4, SurrogateParams::default()), 1, &mut |_| {})
        .unwrap()
        .artifacts
}

fn criterion_4() -> Verdict {
    let mut ok = 0;
    let mut worst = Vec::new();
    for seed in 0..10u64 {
        let a = surrogate_run(&TrainConfig {
            seed,
            ..TrainConfig::default()
        });
        let traces = a.sigma_traces();
        let reach: Vec<Option<usize>> = traces.iter().map(|t| settles(t, 7.0, 1.0)).collect();
        let all = reach.iter().all(|r| matches!(r, Some(k) if *k <= 40));
        ok += all as usize;
        worst.push(reach.iter().map(|r| r.map_or(usize::MAX, |k| k)).max().unwrap());
    }
    let w: Vec<String> = worst
        .iter()
        .map(|k| if *k == usize::MAX { "never".into() } else { k.to_string() })
        .collect();
    Verdict {
        pass: ok >= 8,
        detail: format!("{ok}/10 seeds settle within 7 +/- 1 by iteration 40; latest landmark per seed: [{}]", w.join(", ")),
    }
}

fn population_var(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

fn tail_var(t: &[f64]) -> f64 {
    let n = t.len();
    population_var(&t[n - (n / 5).max(2)..])
}

fn criterion_7() -> Verdict {
    let mut lower = 0;
    let mut total = 0;
    let mut constant_ok = true;
    let mut frozen = 0;
    let mut per_seed = Vec::new();
    for seed in 0..5u64 {
        let on = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let off = TrainConfig {
            early_stop: false,
            ..on.clone()
        };
        let a = surrogate_run(&on);
        let b = surrogate_run(&off);
        let (ra, rb) = (a.reward_traces(), b.reward_traces());
        let l = ra.iter().zip(&rb).filter(|(x, y)| tail_var(x) < tail_var(y)).count();
        per_seed.push(format!("{l}/{}", ra.len()));
        lower += l;
        total += ra.len();
        for (i, t) in a.sigma_traces().iter().enumerate() {
            if let Some(k) = a.frozen_at[i] {
                frozen += 1;
                let after = &t[(k + 1).min(t.len() - 1)..];
                constant_ok &= after.iter().all(|s| s.to_bits() == after[0].to_bits());
            }
        }
    }
    Verdict {
        pass: 2 * lower > total && constant_ok && frozen > 0,
        detail: format!(
            "tail reward variance lower with early stop for {lower}/{total} landmark runs (per seed {}); {frozen} frozen landmarks, sigma constant after freeze: {constant_ok}",
            per_seed.join(" ")
        ),
    }
}

fn criterion_8() -> Verdict {
    let data = gen_dataset(20, 16, 16, 2, 8).unwrap();
    let config = TrainConfig {
        samples: 4,
        epochs: 55,
        warmup: Some(5),
        early_stop_start: Some(5),
        widths: vec![2, 4, 8],
        batch: 4,
        seed: 8,
        ..TrainConfig::default()
    };
    let one = run_training(&config, &data, 1, &mut |_| {}).unwrap();
    let four = run_training(&config, &data, 4, &mut |_| {}).unwrap();
    let iterations = one.artifacts.sigma.iter().map(|p| p.iteration).max().unwrap_or(0);
    let same = one.artifacts == four.artifacts
        && one.learner.params_bitwise_eq(&four.learner)
        && one.controllers.iter().zip(&four.controllers).all(|(a, b)| a.params_bitwise_eq(b));
    let c = one.artifacts.checks;
    let bounds = config.bounds();
    let in_bounds = one.artifacts.sigma.iter().all(|p| bounds.contains(p.sigma));
    Verdict {
        pass: same && c.clones_identical && c.broadcast_bitwise && c.sigma_in_bounds && in_bounds && iterations == 10,
        detail: format!(
            "{iterations} iterations; 1 vs 4 threads bitwise identical: {same}; clones identical: {}; broadcast bitwise: {}; sigma in bounds: {}",
            c.clones_identical,
            c.broadcast_bitwise,
            c.sigma_in_bounds && in_bounds
        ),
    }
}

/// Test MRE of the three desk modes, one entry per seed.
struct Desk {
    laoml: Vec<f64>,
    fixed: Vec<f64>,
    coordreg: Vec<f64>,
}

const DESK_SEEDS: [u64; 3] = [0, 1, 2];

fn desk_run(data: &DatasetSplit, mode: Mode, seed: u64) -> f64 {
    let config = TrainConfig {
        mode,
        epochs: 100,
        samples: 4,
        sigma_init: 5.0,
        precision: Precision::F32,
        seed,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let out = run_training(&config, data, 4, &mut |_| {}).unwrap();
    let m = out.artifacts.summary.unwrap().mean_mre;
    println!("  desk seed={seed} mode={mode} test_mre={m:.4} ({:.0}s)", t.elapsed().as_secs_f64());
    m
}

fn desk() -> Desk {
    let data = gen_dataset(400, 64, 64, 4, 0).unwrap();
    let mut d = Desk {
        laoml: Vec::new(),
        fixed: Vec::new(),
        coordreg: Vec::new(),
    };
    for seed in DESK_SEEDS {
        d.fixed.push(desk_run(&data, Mode::Fixed, seed));
        d.coordreg.push(desk_run(&data, Mode::Coordreg, seed));
        d.laoml.push(desk_run(&data, Mode::Laoml, seed));
    }
    d
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn criterion_5(d: &Desk) -> Verdict {
    let (l, f) = (mean(&d.laoml), mean(&d.fixed));
    Verdict {
        pass: l <= 1.05 * f,
        detail: format!("mean test MRE laoml {l:.4} vs fixed(sigma 5) {f:.4}, ratio {:.3} (limit 1.05)", l / f),
    }
}

fn criterion_6(d: &Desk) -> Verdict {
    let (c, f) = (mean(&d.coordreg), mean(&d.fixed));
    Verdict {
        pass: c >= f,
        detail: format!("mean test MRE coordreg {c:.4} vs fixed(sigma 5) {f:.4}"),
    }
}

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let names = [
        (1, "gradient integrity"),
        (2, "metric oracles"),
        (3, "controller bandit convergence"),
        (4, "surrogate sigma recovery"),
        (5, "desk benchmark: laoml vs fixed"),
        (6, "desk benchmark: coordreg vs fixed"),
        (7, "early-stop stabilisation"),
        (8, "determinism and broadcast invariants"),
    ];
    let mut desk_cache: Option<Desk> = None;
    let mut failed = 0;
    for (n, name) in names {
        if !run(n) {
            continue;
        }
        let t = Instant::now();
        let v = match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 | 6 => {
                let d = desk_cache.get_or_insert_with(desk);
                if n == 5 { criterion_5(d) } else { criterion_6(d) }
            }
            7 => criterion_7(),
            _ => criterion_8(),
        };
        failed += !v.pass as usize;
        println!(
            "criterion {n} [{}] {name}: {} ({:.1}s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
