//! Acceptance checks. Runs as a plain binary so every criterion prints its verdict line.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use dynres::agents::{Algorithm, HandlerKind};
use dynres::env::{Env, EnvConfig, EnvState};
use dynres::geometry::{Form, Obstacle, Point2, Pose};
use dynres::harness::{run_training, train_seed, welch_t_test, EarlyStop, ExperimentConfig};
use dynres::intervals::{difference, scale_to_allowed, ActionSpace, Interval, IntervalSet, RestrictionSet};
use dynres::nn::{apply_mask, argmax, grad_check, log_softmax_grad, softmax, Adam, Gradients, Mlp, OutputActivation};
use dynres::rng::{stream, Role};

type Verdict = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_case<R: Rng>(rng: &mut R, space: &ActionSpace) -> (Vec<(f64, f64)>, IntervalSet) {
    let k = rng.random_range(0..7);
    let raw: Vec<(f64, f64)> = (0..k)
        .map(|_| {
            let lo = rng.random_range(-150.0..150.0);
            (lo, lo + rng.random_range(0.1..80.0))
        })
        .collect();
    let restrictions = RestrictionSet::from_unsorted(raw.iter().map(|&(l, h)| Interval::new(l, h).unwrap()));
    (raw, difference(space, &restrictions))
}

fn criterion_intervals() -> Verdict {
    let start = Instant::now();
    let space = ActionSpace::new(-110.0, 110.0).unwrap();
    let h = 0.01;
    let grid: Vec<f64> = (0..=22_000).map(|i| -110.0 + i as f64 * h).collect();
    let mut rng = stream(1, Role::Search);
    let mut mismatches = 0usize;
    let mut worst_measure: f64 = 0.0;
    let mut worst_projection: f64 = 0.0;
    let mut scale_escapes = 0usize;
    for _ in 0..1000 {
        let (raw, allowed) = random_case(&mut rng, &space);
        let member: Vec<bool> = grid
            .iter()
            .map(|&x| !raw.iter().any(|&(l, u)| l < x && x < u))
            .collect();

        // Difference: grid membership.
        mismatches += grid
            .iter()
            .zip(&member)
            .filter(|(x, m)| allowed.contains(**x) != **m)
            .count();

        // Measure: grid count times spacing, within one cell per interval boundary.
        let count = member.iter().filter(|m| **m).count() as f64;
        let err = (allowed.measure().total_length - count * h).abs() / (h * (2.0 * allowed.len() as f64 + 1.0));
        worst_measure = worst_measure.max(err);

        // Projection: nearest allowed grid point.
        if !allowed.is_empty() {
            for _ in 0..20 {
                let a = rng.random_range(-150.0..150.0);
                let p = allowed.project(a, 2.0).map_err(|e| e.to_string())?;
                check(allowed.contains(p), format!("projection {p} of {a} not allowed"))?;
                let brute = grid
                    .iter()
                    .zip(&member)
                    .filter(|(_, m)| **m)
                    .map(|(x, _)| *x)
                    .min_by(|x, y| (x - a).abs().total_cmp(&(y - a).abs()))
                    .unwrap();
                worst_projection = worst_projection.max((p - brute).abs());
            }
            for _ in 0..20 {
                let a = rng.random_range(-110.0..=110.0);
                let s = scale_to_allowed(&space, &allowed, a).map_err(|e| e.to_string())?;
                scale_escapes += usize::from(!allowed.contains(s));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(mismatches == 0, format!("{mismatches} membership mismatches"))?;
    check(worst_measure <= 1.0, format!("measure error {worst_measure} cells"))?;
    check(worst_projection <= h, format!("projection error {worst_projection}"))?;
    check(
        scale_escapes == 0,
        format!("{scale_escapes} scaled actions outside the allowed set"),
    )?;
    check(secs < 10.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "0 mismatches, projection err {worst_projection:.2e} <= {h}, scaled image inside, {secs:.1}s"
    ))
}

fn criterion_geometry() -> Verdict {
    let start = Instant::now();
    let cfg = EnvConfig {
        width: 100.0,
        height: 100.0,
        start: Point2::new(50.0, 50.0),
        goal: Point2::new(90.0, 90.0),
        ..EnvConfig::default()
    };
    let (r_agent, zone) = (cfg.agent_radius, cfg.zone_margin());
    let mut env = Env::new(cfg.clone()).unwrap();
    let mut rng = stream(2, Role::Search);
    let center = Point2::new(50.0, 50.0);
    let (mut checked_allowed, mut checked_restricted, mut restricted_configs) = (0usize, 0usize, 0usize);
    for case in 0..1000 {
        let form = Form::ALL[rng.random_range(0..4)];
        let obstacle = Obstacle::fixed(form, center, rng.random_range(0.3..3.0)).unwrap();
        let poly = obstacle.polygon();
        // Agents start outside the collision zone; inside it safety is already lost.
        let position = loop {
            let phi: f64 = rng.random_range(0.0..360.0);
            let rho = rng.random_range(0.0..obstacle.radius + zone + 1.2);
            let p = center.add(Point2::from_angle_deg(phi).scale(rho));
            let d = poly.distance_to_point(p);
            if d > zone + 1e-6 && d < zone + 1.2 {
                break p;
            }
        };
        let pose = Pose::new(position, rng.random_range(0.0..360.0));
        env.reset_with(vec![obstacle.clone()]).unwrap();
        let allowed = env
            .restore(EnvState {
                pose,
                obstacles: vec![obstacle],
                t: 0,
                prev_goal_distance: position.dist(cfg.goal),
                goal_reached: false,
                collided: false,
                truncated: false,
            })
            .unwrap();
        let segment_clearance = |a: f64| {
            let end = position.add(Point2::from_angle_deg(pose.perspective + a).scale(cfg.agent_step));
            poly.distance_to_segment(position, end)
        };
        let mut actions: Vec<f64> = allowed.iter().flat_map(|iv| [iv.low, iv.high, iv.midpoint()]).collect();
        if !allowed.is_empty() {
            for _ in 0..50 {
                actions.push(allowed.sample_uniform(&mut rng).unwrap());
            }
        }
        for a in actions {
            let c = segment_clearance(a);
            check(
                c >= r_agent - 1e-6,
                format!("case {case}: allowed action {a} has clearance {c}"),
            )?;
            checked_allowed += 1;
        }
        // Restricted intervals are the gaps of the allowed set inside the action range.
        let mut edges = vec![cfg.action_min];
        for iv in allowed.iter() {
            edges.extend([iv.low, iv.high]);
        }
        edges.push(cfg.action_max);
        let gaps: Vec<(f64, f64)> = edges.chunks(2).map(|w| (w[0], w[1])).filter(|(l, u)| u > l).collect();
        restricted_configs += usize::from(!gaps.is_empty());
        for (l, u) in gaps {
            let c = segment_clearance(0.5 * (l + u));
            check(
                c <= zone + 1e-9,
                format!("case {case}: restricted center {} keeps clearance {c}", 0.5 * (l + u)),
            )?;
            checked_restricted += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, format!("took {secs:.1}s"))?;
    check(
        restricted_configs > 500,
        format!("only {restricted_configs} configurations had restrictions"),
    )?;
    Ok(format!(
        "{checked_allowed} allowed actions clear, {checked_restricted} restricted centers violate (in {restricted_configs} configs), {secs:.1}s"
    ))
}

fn mse(target: Array2<f64>) -> impl Fn(&Array2<f64>) -> (f64, Array2<f64>) {
    move |out: &Array2<f64>| {
        let n = out.len() as f64;
        let diff = out - &target;
        (diff.iter().map(|d| d * d).sum::<f64>() / n, diff * (2.0 / n))
    }
}

fn params(net: &Mlp) -> Vec<f64> {
    net.weights()
        .iter()
        .flat_map(|w| w.iter().copied().collect::<Vec<_>>())
        .chain(net.biases().iter().flat_map(|b| b.iter().copied().collect::<Vec<_>>()))
        .collect()
}

fn criterion_gradients() -> Verdict {
    let mut rng = stream(3, Role::AgentInit);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let depth = rng.random_range(1..4);
        let mut sizes = vec![rng.random_range(1..9)];
        sizes.extend((0..depth).map(|_| rng.random_range(2..17)));
        sizes.push(rng.random_range(1..6));
        let output = if rng.random_bool(0.5) {
            OutputActivation::Linear
        } else {
            OutputActivation::TanhScaled { min: -2.0, max: 3.0 }
        };
        let net = Mlp::new(&sizes, output, &mut rng).unwrap();
        let batch = 4;
        let input = Array2::from_shape_fn((batch, sizes[0]), |_| rng.random_range(-1.0..1.0));
        let target = Array2::from_shape_fn((batch, *sizes.last().unwrap()), |_| rng.random_range(-1.0..1.0));
        let loss = mse(target);
        worst = worst.max(grad_check(&net, input.view(), &loss, 400, &mut rng).unwrap());
    }
    check(worst < 1e-4, format!("max relative error {worst:.2e}"))?;

    // Adam against a scalar reimplementation over the flattened parameters.
    let mut net = Mlp::new(&[3, 5, 2], OutputActivation::Linear, &mut rng).unwrap();
    let (lr, l2, b1, b2, eps) = (1e-2, 1e-3, 0.9, 0.999, 1e-8);
    let mut adam = Adam::new(&net, lr, l2);
    let mut p = params(&net);
    let n_weights: usize = net.weights().iter().map(|w| w.len()).sum();
    let (mut m, mut v) = (vec![0.0; p.len()], vec![0.0; p.len()]);
    let mut adam_err: f64 = 0.0;
    for t in 1..=100 {
        let mut g = Gradients::zeros_like(&net);
        g.weights
            .iter_mut()
            .for_each(|w| w.mapv_inplace(|_| rng.random_range(-1.0..1.0)));
        g.biases
            .iter_mut()
            .for_each(|b| b.mapv_inplace(|_| rng.random_range(-1.0..1.0)));
        let flat_g: Vec<f64> = g
            .weights
            .iter()
            .flat_map(|w| w.iter().copied().collect::<Vec<_>>())
            .chain(g.biases.iter().flat_map(|b| b.iter().copied().collect::<Vec<_>>()))
            .collect();
        adam.step(&mut net, &g).unwrap();
        for i in 0..p.len() {
            let gi = if i < n_weights {
                flat_g[i] + l2 * p[i]
            } else {
                flat_g[i]
            };
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mh = m[i] / (1.0 - f64::powi(b1, t));
            let vh = v[i] / (1.0 - f64::powi(b2, t));
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
        let got = params(&net);
        adam_err = got.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(adam_err, f64::max);
    }
    check(adam_err <= 1e-10, format!("Adam deviates by {adam_err:.2e}"))?;
    Ok(format!(
        "grad-check max rel err {worst:.2e} < 1e-4 over 50 nets; Adam max dev {adam_err:.1e}"
    ))
}

fn criterion_masking() -> Verdict {
    let mut logits = vec![1.0, 1.0, 1.0, 1.0];
    let mask = [true, true, false, true];
    apply_mask(&mut logits, &mask);
    let probs: Vec<f64> = softmax(&logits).iter().map(|p| (p * 100.0).round() / 100.0).collect();
    check(probs == [0.33, 0.33, 0.0, 0.33], format!("masked softmax {probs:?}"))?;
    let grad = log_softmax_grad(&logits, 0);
    check(grad[2].abs() <= 1e-300, format!("masked gradient {}", grad[2]))?;
    let rounded: Vec<f64> = grad.iter().map(|g| (g * 100.0).round() / 100.0).collect();
    check(
        rounded == [0.67, -0.33, 0.0, -0.33],
        format!("policy gradient {rounded:?}"),
    )?;

    let mut rng = stream(4, Role::Exploration);
    for case in 0..100_000 {
        let n = rng.random_range(2..12);
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-1e3..1e3)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        let keep = rng.random_range(0..n);
        mask[keep] = true;
        let mut masked = values.clone();
        apply_mask(&mut masked, &mask);
        let expected = (0..n).filter(|&i| mask[i]).fold(keep, |best, i| {
            if values[i] > values[best] || (values[i] == values[best] && i < best) {
                i
            } else {
                best
            }
        });
        check(argmax(&masked) == expected, format!("case {case}: argmax changed"))?;
    }
    Ok("softmax [0.33, 0.33, 0.00, 0.33], masked gradient 0, argmax invariant on 1e5 vectors".into())
}

fn criterion_environment() -> Verdict {
    let cfg = EnvConfig::default();
    let mut env = Env::new(cfg.clone()).unwrap();
    let (obs, _) = env.reset(0).unwrap();
    let (mut total, mut steps) = (0.0, 0usize);
    let mut action = obs.goal_angle;
    loop {
        let r = env.step(action).unwrap();
        action = 0.0;
        total += r.reward;
        steps += 1;
        if r.done() {
            check(r.info.goal_reached, "scripted line did not reach the goal")?;
            break;
        }
    }
    // Moving straight at the goal: d_k = d_0 − k·step until d < threshold.
    let d0 = cfg.start.dist(cfg.goal);
    let n = ((d0 - cfg.goal_threshold) / cfg.agent_step).floor() as usize + 1;
    let k = (n - 1) as f64;
    let expected = cfg.reward.improvement_scale * k * cfg.agent_step
        - cfg.reward.step_penalty_scale * k * (k + 1.0) / 2.0
        + cfg.reward.goal;
    check(steps == n, format!("{steps} steps, analytic {n}"))?;
    check(
        (total - expected).abs() < 1e-9,
        format!("return {total}, analytic {expected}"),
    )?;
    check((15..=16).contains(&steps), format!("{steps} steps"))?;
    check((110.0..=125.0).contains(&total), format!("return {total}"))?;
    Ok(format!("{steps} steps, return {total:.4} (analytic {expected:.4})"))
}

fn criterion_dqn_smoke() -> Verdict {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::new(Algorithm::Dqn, HandlerKind::DiscreteMasking, vec![0, 1, 2], 150_000);
    cfg.early_stop = Some(EarlyStop {
        window: 100,
        solved_fraction: 0.8,
    });
    let report = run_training(&cfg).map_err(|e| e.to_string())?;
    check(report.failures.is_empty(), format!("failures: {:?}", report.failures))?;
    let mut passed = 0;
    let mut notes = Vec::new();
    for run in &report.runs {
        let tail = &run.episodes[run.episodes.len().saturating_sub(100)..];
        let frac = tail.iter().filter(|r| r.solved).count() as f64 / tail.len() as f64;
        let ok = run.early_stopped && run.steps <= 150_000 && tail.len() == 100 && frac >= 0.8;
        passed += usize::from(ok);
        notes.push(format!(
            "seed {}: {:.0}% at {} steps",
            run.agent_seed,
            100.0 * frac,
            run.steps
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    let summary = format!("{passed}/3 seeds ({}), {secs:.0}s", notes.join(", "));
    check(passed >= 2, summary.clone())?;
    check(secs < 900.0, format!("{summary}: over 15 min"))?;
    Ok(summary)
}

fn criterion_strictness() -> Verdict {
    let env = EnvConfig::scenario("moving").unwrap();
    let runs = [
        (Algorithm::MpsTd3, HandlerKind::Native),
        (Algorithm::Td3, HandlerKind::Projection),
        (Algorithm::Td3, HandlerKind::RandomReplacement),
        (Algorithm::Td3, HandlerKind::ContinuousMasking),
        (Algorithm::Td3, HandlerKind::Penalty),
    ];
    let mut notes = Vec::new();
    let mut problems = Vec::new();
    for (algorithm, handler) in runs {
        let mut cfg = ExperimentConfig::new(algorithm, handler, vec![0, 1, 2], 1_000);
        cfg.env = env.clone();
        let (mut collisions, mut dead_ends, mut episodes) = (0, 0, 0);
        for seed in cfg.agent_seeds.clone() {
            let run = train_seed(&cfg, seed).map_err(|e| e.to_string())?;
            collisions += run.episodes.iter().filter(|r| r.collided).count();
            dead_ends += run.dead_end_collisions;
            episodes += run.episodes.len();
        }
        notes.push(format!(
            "{algorithm}/{handler} {collisions} ({dead_ends} dead ends)/{episodes}"
        ));
        if handler == HandlerKind::Penalty {
            if collisions == 0 {
                problems.push("penalty handler recorded no collisions".to_string());
            }
        } else if collisions > 0 {
            problems.push(format!("{algorithm}/{handler} collided {collisions} times"));
        }
    }
    let summary = format!("collisions per episodes: {}", notes.join(", "));
    check(problems.is_empty(), format!("{}; {summary}", problems.join("; ")))?;
    Ok(summary)
}

fn criterion_welch() -> Verdict {
    let mut rng = stream(8, Role::Search);
    let (mut dt, mut dp): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let na = rng.random_range(2..40);
        let nb = rng.random_range(2..40);
        let scale = rng.random_range(0.1..50.0);
        let shift = rng.random_range(-5.0..5.0);
        let a: Vec<f64> = (0..na).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let b: Vec<f64> = (0..nb)
            .map(|_| rng.random_range(-1.0..1.0) * scale * 0.7 + shift)
            .collect();
        let mv = |x: &[f64]| {
            let n = x.len() as f64;
            let m = x.iter().sum::<f64>() / n;
            (m, x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0), n)
        };
        let ((ma, va, na), (mb, vb, nb)) = (mv(&a), mv(&b));
        let se = va / na + vb / nb;
        let t = (ma - mb) / se.sqrt();
        let dof = se * se / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
        let p = 2.0 * StudentsT::new(0.0, 1.0, dof).unwrap().cdf(-t.abs());
        let r = welch_t_test(&a, &b).map_err(|e| e.to_string())?;
        dt = dt.max((r.t - t).abs());
        dp = dp.max((r.p - p).abs());
    }
    check(dt < 1e-9 && dp < 1e-6, format!("|dt| {dt:.2e}, |dp| {dp:.2e}"))?;
    let same = [1.0, 2.5, 3.0, 4.5];
    let r = welch_t_test(&same, &same).map_err(|e| e.to_string())?;
    check(r.p == 1.0, format!("identical samples give p = {}", r.p))?;
    Ok(format!(
        "100 pairs: max |dt| {dt:.1e}, max |dp| {dp:.1e}; identical samples p = 1"
    ))
}

fn dynres(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dynres"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    check(
        out.status.success(),
        format!(
            "dynres {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ),
    )
}

fn criterion_reproducibility() -> Verdict {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();
    let read = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    let mut compared = 0;
    for (algo, handler) in [
        ("td3", "projection"),
        ("ppo", "continuous-masking"),
        ("mps-td3", "native"),
    ] {
        let (a, b) = (dir(&format!("{algo}_a")), dir(&format!("{algo}_b")));
        for d in [&a, &b] {
            dynres(&[
                "train",
                "--algo",
                algo,
                "--handler",
                handler,
                "--seeds",
                "1..2",
                "--steps",
                "2500",
                "--obstacles",
                "moving",
                "--out",
                d,
            ])?;
            dynres(&[
                "evaluate",
                "--checkpoint",
                d,
                "--env-seeds",
                "0..9",
                "--obstacles",
                "complex",
                "--out",
                d,
            ])?;
        }
        for file in ["episodes.csv", "snapshots.csv", "evaluation.csv"] {
            let (x, y) = (read(&Path::new(&a).join(file))?, read(&Path::new(&b).join(file))?);
            check(
                !x.is_empty() && x == y,
                format!("{algo}: {file} differs between repeats"),
            )?;
            compared += 1;
        }
    }
    Ok(format!(
        "{compared} CSV files byte-identical across repeated train/evaluate runs"
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("1 interval algebra oracle", criterion_intervals),
        ("2 geometric safety", criterion_geometry),
        ("3 gradient fidelity", criterion_gradients),
        ("4 masking semantics", criterion_masking),
        ("5 environment numbers", criterion_environment),
        ("6 DQN smoke training", criterion_dqn_smoke),
        ("7 restriction-handling strictness", criterion_strictness),
        ("8 Welch t-test", criterion_welch),
        ("9 reproducibility", criterion_reproducibility),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .map(|a| a.to_lowercase())
        .collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| name.to_lowercase().contains(x.as_str())) {
            continue;
        }
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        match verdict {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
