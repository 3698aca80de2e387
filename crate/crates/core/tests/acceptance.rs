//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use hevrl::agent::{
    adapt_online, transfer_q, transfer_weights, weights_from_distances, train_from, AdaptConfig, PowertrainEnv,
    QTable, TrainLog,
};
use hevrl::cycle::{classify_modes, mtf_components};
use hevrl::dpbench::{backward, Interpolation};
use hevrl::harness::synth::{generate, Recipe, CHANGE_POINT};
use hevrl::harness::{compare, emit_plot_data, prelearn, ExperimentConfig, Prelearned, CONVENTIONAL_RL, DP, TRANSFER_RL};
use hevrl::markov::{cycle_tpm, estimate_tpm, matrix_imn, QuantizerGrid};
use hevrl::powertrain::{step_with_accel, BatteryParams, CycleProfile};
use hevrl::transform::{jerk_norm, transform_cycle, TransformOptions, TransformTargets};
use hevrl::{DrivingCycle, LearningConfig, PowertrainParams, StateSpace};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STREAM_SECONDS: usize = 10_000;
const LIBRARY_SECONDS: usize = 1000;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

struct Context {
    params: PowertrainParams,
    config: ExperimentConfig,
    sources: Vec<DrivingCycle>,
    pre: Prelearned,
}

impl Context {
    fn new() -> Self {
        let params = PowertrainParams::default();
        let config = ExperimentConfig {
            seed: 1,
            ..Default::default()
        };
        let sources: Vec<_> = [Recipe::Urban, Recipe::Suburban, Recipe::Highway]
            .into_iter()
            .map(|r| generate(r, LIBRARY_SECONDS, 1, &params).unwrap())
            .collect();
        let pre = prelearn(&sources, &params, &config).unwrap();
        Self {
            params,
            config,
            sources,
            pre,
        }
    }

    fn stream(&self, recipe: Recipe) -> DrivingCycle {
        generate(recipe, STREAM_SECONDS, 1, &self.params).unwrap()
    }
}

fn random_stochastic(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let mut a = vec![0.0; m * m];
    for row in a.chunks_mut(m) {
        for x in row.iter_mut() {
            // Sparse rows, like estimated TPMs.
            *x = if rng.random::<f64>() < 0.3 { 0.0 } else { rng.random::<f64>() };
        }
        let j = rng.random_range(0..m);
        row[j] += 0.1;
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    a
}

fn eigen_norm(a: &[f64], b: &[f64], m: usize) -> f64 {
    let d = DMatrix::from_row_slice(m, m, a) - DMatrix::from_row_slice(m, m, b);
    let g = d.transpose() * &d;
    g.symmetric_eigen().eigenvalues.iter().cloned().fold(0.0, f64::max).sqrt()
}

fn imn_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let m = rng.random_range(2..=8);
        let a = random_stochastic(&mut rng, m);
        let b = random_stochastic(&mut rng, m);
        worst = worst.max((matrix_imn(&a, &b, m) - eigen_norm(&a, &b, m)).abs());
    }
    let swap = matrix_imn(&[1.0, 0.0, 0.0, 1.0], &[0.0, 1.0, 1.0, 0.0], 2);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-8 && (swap - 2.0).abs() <= 1e-12 && secs < 5.0,
        format!("max |power - eigen| = {worst:.2e} over 100 pairs, 2x2 swap = {swap}, {secs:.2} s"),
    )
}

fn tpm_counting() -> Verdict {
    let grid = QuantizerGrid::default();
    let levels = grid.power_levels().to_vec();
    let edges = grid.speed_edges().to_vec();
    let m = levels.len();
    let level_of = |p: f64| {
        let mut best = 0;
        for (i, c) in levels.iter().enumerate() {
            if (p - c).abs() < (p - levels[best]).abs() {
                best = i;
            }
        }
        best
    };
    let bin_of = |v: f64| {
        let mut bin = 0;
        for (i, e) in edges.iter().enumerate().take(edges.len() - 1) {
            if v >= *e {
                bin = i;
            }
        }
        bin
    };
    let mut mismatches = 0;
    let mut worst_row = 0.0f64;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 10_000;
        let mut v = 10.0f64;
        let mut powers = Vec::with_capacity(n);
        let mut speeds = Vec::with_capacity(n);
        for _ in 0..n {
            v = (v + rng.random_range(-2.0..2.0)).clamp(0.0, 30.0);
            speeds.push(v);
            powers.push(rng.random_range(-170_000.0..320_000.0));
        }
        let tpm = estimate_tpm(&powers, &speeds, &grid).unwrap();
        let mut counts: HashMap<(usize, usize, usize), u64> = HashMap::new();
        let mut rows: HashMap<(usize, usize), u64> = HashMap::new();
        for k in 0..n - 1 {
            let key = (bin_of(speeds[k]), level_of(powers[k]), level_of(powers[k + 1]));
            *counts.entry(key).or_default() += 1;
            *rows.entry((key.0, key.1)).or_default() += 1;
        }
        for bin in 0..edges.len() - 1 {
            for i in 0..m {
                let total = rows.get(&(bin, i)).copied().unwrap_or(0);
                let mut sum = 0.0;
                for j in 0..m {
                    let expected = if total == 0 {
                        f64::from(u8::from(i == j))
                    } else {
                        counts.get(&(bin, i, j)).copied().unwrap_or(0) as f64 / total as f64
                    };
                    let got = tpm.probability(bin, i, j);
                    mismatches += usize::from(got != expected);
                    sum += got;
                }
                if total > 0 {
                    worst_row = worst_row.max((sum - 1.0).abs());
                }
            }
        }
    }
    verdict(
        mismatches == 0 && worst_row <= 1e-12,
        format!("5 sequences x 10000 steps, {mismatches} entry mismatches, max |row sum - 1| = {worst_row:.1e}"),
    )
}

fn transformation_audit(ctx: &Context) -> Verdict {
    let opts = TransformOptions::default();
    let mut failures = Vec::new();
    let mut worst_g = 0.0f64;
    let mut worst_mtf = 0.0f64;
    let mut slowest = 0.0f64;
    for cycle in &ctx.sources {
        let partition = classify_modes(cycle, &ctx.params.body);
        let base = TransformTargets::from_mtf(&mtf_components(cycle, &partition).unwrap());
        let mut cases = vec![("identity", base)];
        for (name, i, f) in [
            ("alpha-10%", 0, 0.9),
            ("alpha+10%", 0, 1.1),
            ("beta-10%", 1, 0.9),
            ("beta+10%", 1, 1.1),
            ("gamma-10%", 2, 0.9),
            ("gamma+10%", 2, 1.1),
        ] {
            let mut t = base;
            match i {
                0 => t.alpha *= f,
                1 => t.beta *= f,
                _ => t.gamma *= f,
            }
            cases.push((name, t));
        }
        for (name, t) in cases {
            let start = Instant::now();
            let res = transform_cycle(cycle, &ctx.params.body, &t, &opts).unwrap();
            slowest = slowest.max(start.elapsed().as_secs_f64());
            let target = [t.alpha, t.beta, t.gamma];
            let g = (0..3).map(|i| (res.residuals[i] / target[i]).abs()).fold(0.0, f64::max);
            // Traction intervals are held fixed by the transformation.
            let m = mtf_components(&res.transformed, &partition).unwrap();
            let got = [m.alpha, m.beta, m.gamma];
            let dev = (0..3).map(|i| (got[i] / target[i] - 1.0).abs()).fold(0.0, f64::max);
            worst_g = worst_g.max(g);
            worst_mtf = worst_mtf.max(dev);
            let identity_ok = name != "identity" || res.cost <= jerk_norm(cycle.speeds(), cycle.dt());
            if !(res.converged && g <= 1e-3 && dev <= 0.01 && identity_ok) {
                failures.push(format!("{}:{name}", cycle.name()));
            }
        }
    }
    verdict(
        failures.is_empty() && slowest < 120.0,
        format!(
            "21 solves, max |g|/target = {worst_g:.1e}, max MTF deviation = {:.2e}%, slowest {slowest:.1} s, failures {failures:?}",
            100.0 * worst_mtf
        ),
    )
}

fn dp_enumeration_instance(rng: &mut ChaCha8Rng) -> (bool, bool) {
    let params = PowertrainParams {
        battery: BatteryParams {
            capacity_ah: 0.25,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut v = rng.random_range(4.0..12.0);
    let speeds: Vec<f64> = (0..6)
        .map(|_| {
            let x = v;
            v = (v + rng.random_range(-1.5..1.5f64)).clamp(3.0, 15.0);
            x
        })
        .collect();
    let cycle = DrivingCycle::new("enum", 1.0, speeds).unwrap();
    let profile = CycleProfile::new(&cycle, &params);
    let torques = [0.0, 300.0, 600.0];
    let nodes = [0.5, 0.55, 0.6, 0.65, 0.7];
    let stage = |k: usize, soc: f64, a: usize| profile.step(k, soc, torques[a], &params);
    let (value, _) = backward(6, &nodes, 3, Interpolation::Nearest, stage);
    let space = StateSpace {
        soc_nodes: nodes.to_vec(),
        ..Default::default()
    };
    let snap = |soc: f64| nodes[space.soc_index(soc)];
    let mut exact = true;
    let mut moved = false;
    for (start, node) in nodes.iter().enumerate() {
        let mut best = f64::INFINITY;
        for code in 0..3usize.pow(6) {
            let mut soc = *node;
            let mut c = code;
            let mut costs = [0.0; 6];
            for (k, cost) in costs.iter_mut().enumerate() {
                let out = step_with_accel(soc, torques[c % 3], profile.speeds[k], profile.accels[k], 1.0, &params);
                c /= 3;
                *cost = out.reward;
                let next = snap(out.soc_next);
                moved |= next != soc;
                soc = next;
            }
            best = best.min(costs.iter().rev().fold(0.0, |acc, r| r + acc));
        }
        exact &= best.to_bits() == value[start].to_bits();
    }
    (exact, moved)
}

fn dp_ordering(ctx: &Context) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut exact, mut moving) = (0, 0);
    for _ in 0..20 {
        let (e, m) = dp_enumeration_instance(&mut rng);
        exact += usize::from(e);
        moving += usize::from(m);
    }
    let mut ordered = true;
    let mut lines = Vec::new();
    for recipe in Recipe::ALL {
        let cmp = compare(&ctx.stream(recipe), &ctx.pre.library, &ctx.config).unwrap();
        let cost = |m| cmp.report.method(m).unwrap().total_cost;
        ordered &= cost(DP) <= cost(TRANSFER_RL) && cost(TRANSFER_RL) <= cost(CONVENTIONAL_RL);
        lines.push(format!("{}: {:.0} <= {:.0} <= {:.0}", recipe.as_str(), cost(DP), cost(TRANSFER_RL), cost(CONVENTIONAL_RL)));
    }
    let stitched = ctx.stream(Recipe::Stitched);
    let mut strict = 0;
    for seed in 1..=5 {
        let config = ExperimentConfig {
            seed,
            ..ctx.config.clone()
        };
        let cmp = compare(&stitched, &ctx.pre.library, &config).unwrap();
        let cost = |m| cmp.report.method(m).unwrap().total_cost;
        ordered &= cost(DP) <= cost(TRANSFER_RL);
        strict += usize::from(cost(TRANSFER_RL) < cost(CONVENTIONAL_RL));
    }
    verdict(
        exact == 20 && moving > 0 && ordered && strict >= 4,
        format!(
            "enumeration bit-exact {exact}/20 ({moving} with SOC moves); {}; stitched strict middle {strict}/5 seeds",
            lines.join(", ")
        ),
    )
}

fn steps_to_feasible(log: &TrainLog, penalty: f64) -> usize {
    log.greedy_cost.iter().find(|(_, c)| *c < penalty).map_or(usize::MAX, |(s, _)| *s)
}

fn jumpstart(ctx: &Context) -> Verdict {
    const SWEEPS: usize = 300;
    let penalty = ctx.params.infeasible_penalty;
    let mut pass = true;
    let mut parts = Vec::new();
    for recipe in [Recipe::Urban, Recipe::Suburban, Recipe::Highway] {
        let held = generate(recipe, LIBRARY_SECONDS, 7, &ctx.params).unwrap();
        let tpm = cycle_tpm(&held, &ctx.params.body, &ctx.config.space.grid).unwrap();
        let weights = transfer_weights(&ctx.pre.library, &tpm, ctx.config.transfer_factor).unwrap();
        let (mut first_wins, mut speed_wins, mut disc_ok) = (0, 0, true);
        for seed in 1..=5u64 {
            let cold_cfg = LearningConfig {
                sweeps: SWEEPS,
                seed,
                eval_every: 1,
                ..ctx.config.learning
            };
            let mut warm = transfer_q(&ctx.pre.library, &weights).unwrap();
            let warm_cfg = LearningConfig {
                sweep_offset: warm.iterations as usize,
                ..cold_cfg
            };
            let warm_log = train_from(&mut warm, &held, &ctx.params, ctx.params.soc_init, &warm_cfg).unwrap();
            let mut cold = QTable::zeros(ctx.config.space.clone(), "cold");
            let cold_log = train_from(&mut cold, &held, &ctx.params, ctx.params.soc_init, &cold_cfg).unwrap();
            first_wins += usize::from(warm_log.sweep_cost[0] < cold_log.sweep_cost[0]);
            speed_wins += usize::from(steps_to_feasible(&warm_log, penalty) < steps_to_feasible(&cold_log, penalty));
            disc_ok &= (10..SWEEPS).all(|i| warm_log.mean_discrepancy[i] <= 1.05 * cold_log.mean_discrepancy[i]);
        }
        pass &= first_wins >= 4 && speed_wins >= 4 && disc_ok;
        parts.push(format!(
            "{}: first sweep {first_wins}/5, sweeps-to-feasible {speed_wins}/5, discrepancy {}",
            held.name(),
            if disc_ok { "ok" } else { "exceeded" }
        ));
    }
    verdict(pass, parts.join("; "))
}

fn threshold_monotonicity(ctx: &Context) -> Verdict {
    let window = ctx.config.window;
    let expected = ((CHANGE_POINT as f64 / window).floor() + 1.0) * window;
    let learning = ctx.config.online_learning();
    let mut pass = true;
    let mut parts = Vec::new();
    for recipe in Recipe::ALL {
        let stream = ctx.stream(recipe);
        let runs: Vec<_> = [0.1, 0.2, 0.3]
            .iter()
            .map(|th| {
                let adapt = AdaptConfig {
                    threshold: *th,
                    ..ctx.config.adapt()
                };
                adapt_online(&stream, &ctx.pre.library, &adapt, &ctx.params, &learning).unwrap().update_times()
            })
            .collect();
        pass &= runs[0].len() >= runs[1].len() && runs[1].len() >= runs[2].len();
        if recipe == Recipe::Stitched {
            pass &= runs[1] == vec![expected];
        }
        parts.push(format!("{}: {}/{}/{}", recipe.as_str(), runs[0].len(), runs[1].len(), runs[2].len()));
    }
    verdict(
        pass,
        format!("updates at 0.1/0.2/0.3: {}; stitched expects one update at {expected} s", parts.join(", ")),
    )
}

fn weight_algebra() -> Verdict {
    let w0 = weights_from_distances(&[0.1, 0.3], 0.0).unwrap();
    let wu = weights_from_distances(&[0.4, 0.4, 0.4], 0.0).unwrap();
    let w100 = weights_from_distances(&[0.1, 0.3], 100.0).unwrap();
    let mut ok = (w0[0] - 1.0).abs() <= 1e-9 && w0[1].abs() <= 1e-9;
    ok &= wu.iter().all(|d| (d - 1.0 / 3.0).abs() <= 1e-9);
    // Hand arithmetic: numerators 100.2 and 100.0 over 200.2.
    ok &= (w100[0] - 100.2 / 200.2).abs() <= 1e-9 && (w100[1] - 100.0 / 200.2).abs() <= 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut bad = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=8);
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
        let tf = if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random_range(0.0..10.0) };
        let w = weights_from_distances(&d, tf).unwrap();
        let sum: f64 = w.iter().sum();
        let ordered = (0..n).all(|i| (0..n).all(|j| d[i] > d[j] || w[i] >= w[j] - 1e-15));
        bad += usize::from((sum - 1.0).abs() > 1e-12 || w.iter().any(|x| *x < 0.0) || !ordered);
    }
    verdict(
        ok && bad == 0,
        format!("(1,0) at T_f=0, uniform at equal distances, T_f=100 gives ({:.7}, {:.7}); {bad}/1000 random instances violate", w100[0], w100[1]),
    )
}

fn charge_sustenance(ctx: &Context) -> Verdict {
    let mut finals = Vec::new();
    for (i, cycle) in ctx.sources.iter().enumerate() {
        let q = ctx.pre.library.q(i);
        let env = PowertrainEnv::new(cycle, q.space(), &ctx.params, ctx.params.soc_init);
        finals.push((cycle.name().to_string(), env.rollout(q, "check").final_soc));
    }
    let pass = finals.iter().all(|(_, s)| (s - ctx.params.soc_ref).abs() <= 0.05);
    let text: Vec<String> = finals.iter().map(|(n, s)| format!("{n} ends at {s:.4}")).collect();
    verdict(pass, text.join(", "))
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism_and_runtime(ctx: &Context) -> Verdict {
    let stream = ctx.stream(Recipe::Stitched);
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    let mut slowest = 0.0f64;
    let mut faster = true;
    for run in 0..2 {
        let start = Instant::now();
        let cmp = compare(&stream, &ctx.pre.library, &ctx.config).unwrap();
        let dir = tmp.path().join(format!("run{run}"));
        emit_plot_data(&cmp.plot_data(ctx.pre.logs.clone()), &dir).unwrap();
        slowest = slowest.max(start.elapsed().as_secs_f64());
        faster &= cmp.timing.transfer_rl < cmp.timing.dp;
        outputs.push(dir_bytes(&dir));
    }
    let identical = outputs[0] == outputs[1];
    verdict(
        identical && slowest < 600.0 && faster,
        format!(
            "{} files byte-identical: {identical}; slowest compare {slowest:.1} s; transfer RL faster than DP in both runs: {faster}",
            outputs[0].len()
        ),
    )
}

fn main() {
    let started = Instant::now();
    let ctx = Context::new();
    println!("library pre-learned in {:.1} s", started.elapsed().as_secs_f64());
    let criteria: Vec<(&str, Box<dyn Fn(&Context) -> Verdict>)> = vec![
        ("IMN oracle equivalence", Box::new(|_| imn_oracle())),
        ("TPM correctness", Box::new(|_| tpm_counting())),
        ("transformation audit", Box::new(transformation_audit)),
        ("DP exactness and cost ordering", Box::new(dp_ordering)),
        ("jumpstart", Box::new(jumpstart)),
        ("threshold monotonicity", Box::new(threshold_monotonicity)),
        ("transfer-weight algebra", Box::new(|_| weight_algebra())),
        ("charge sustenance", Box::new(charge_sustenance)),
        ("end-to-end determinism and runtime", Box::new(determinism_and_runtime)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let v = check(&ctx);
        failed += usize::from(!v.pass);
        println!(
            "{} criterion {} ({name}): {} [{:.1} s]",
            if v.pass { "PASS" } else { "FAIL" },
            i + 1,
            v.detail,
            start.elapsed().as_secs_f64()
        );
        std::io::stdout().flush().ok();
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
