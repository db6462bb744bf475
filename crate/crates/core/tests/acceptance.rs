//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any
//! criterion fails.

mod common;

use std::fs;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sdnes_core::config::ScenarioConfig;
use sdnes_core::deception::{in_stability_set, solve_attainability, stability_radius};
use sdnes_core::dynamics::{
    dither_gammas, integrate_averaged, p_term, simulate, SimulationSettings,
};
use sdnes_core::experiment::{deviation_non_increasing, run_batch, theta_sweep, ExperimentPlan};
use sdnes_core::perturbation::{gamma, stationary_sd};
use sdnes_core::DitherFunction;

use common::*;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn criterion_1() -> Outcome {
    let g = sec5_game();
    let pg = g.pseudogradient();
    let x = pg.nash_equilibrium().unwrap();
    let residual = pg.eval(&x).amax();
    let costs = g.costs_at(x.as_slice()).unwrap();
    let ok = (x[0] + 1.0).abs() <= 1e-12
        && (x[1] + 1.0).abs() <= 1e-12
        && residual <= 1e-12
        && (costs[0] + 1.0).abs() <= 1e-12
        && (costs[1] - 0.5).abs() <= 1e-12;
    outcome(ok, format!("x*={:?} residual={residual:e} J={costs:?}", x.as_slice()))
}

fn criterion_2() -> Outcome {
    let r = stability_radius(&sec5_game(), &sec5_deception(-2.0)).unwrap();
    outcome((r - 1.0 / 3.0).abs() <= 1e-12, format!("r={r}"))
}

fn criterion_3() -> Outcome {
    let g = sec5_game();
    let ds = sec5_deception(-2.0);
    let att = match solve_attainability(&g, &ds, &[-2.0]) {
        Ok(a) => a,
        Err(e) => return outcome(false, e.to_string()),
    };
    let eps2 = 1e-3;
    let d = att.delta_star[0];
    let x = att.x_delta.as_slice();
    let j2 = g.cost(1, x).unwrap();
    let lam = att.lambda[(0, 0)];
    let ok = (d - 0.1989).abs() <= 5e-4
        && (x[0] + 0.6385).abs() <= 1e-3
        && (x[1] + 1.1808).abs() <= 1e-3
        && (j2 + 2.0).abs() <= 2e-3
        && (lam + 12.0 * eps2).abs() <= 0.1 * eps2
        && att.lambda_hurwitz;
    outcome(
        ok,
        format!("delta*={d:.6} x_delta=[{:.6},{:.6}] J2={j2:.6} Lambda/eps2={:.4}", x[0], x[1], lam / eps2),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut checked, mut hurwitz) = (0usize, 0usize);
    for _ in 0..1000 {
        let n = rng.random_range(2..6);
        let g = random_dominant_game(&mut rng, n);
        let ds = random_deception(&mut rng, n);
        let r = stability_radius(&g, &ds).unwrap().min(1e3);
        for _ in 0..200 {
            let d = ball_point(&mut rng, ds.n_deceivers(), r);
            checked += 1;
            if in_stability_set(&g, &ds, &d, &g.gains()).unwrap() {
                hurwitz += 1;
            }
        }
    }
    outcome(hurwitz == checked, format!("{hurwitz}/{checked} Hurwitz"))
}

fn criterion_5() -> Outcome {
    let mut worst_sine = 0.0f64;
    for q in [0.01, 0.07, 0.1, 0.5, 1.0, 3.0] {
        let got = gamma(&DitherFunction::Sine, q).unwrap();
        let want = 0.5 * (1.0 - (-q * q).exp());
        worst_sine = worst_sine.max((got - want).abs());
    }
    // saturation against the exact truncated-normal second moment
    let mut worst_sat = 0.0f64;
    for q in [0.05, 0.1, 0.3, 1.0, 2.0, 5.0] {
        let got = gamma(&DitherFunction::Saturation, q).unwrap();
        let sigma = q / 2f64.sqrt();
        let c = 1.0 / sigma;
        let phi = (-0.5 * c * c).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let big_phi = statrs::function::erf::erf(c / 2f64.sqrt());
        let want = sigma * sigma * (big_phi - 2.0 * c * phi)
            + statrs::function::erf::erfc(c / 2f64.sqrt());
        worst_sat = worst_sat.max((got - want).abs());
    }
    outcome(
        worst_sine <= 1e-10 && worst_sat <= 1e-9,
        format!("max sine error {worst_sine:e}, max saturation error {worst_sat:e}"),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let samples = 10_000_000u64;
    let mut worst = 0.0f64;
    let mut inside = 0;
    for _ in 0..50 {
        let n = rng.random_range(2..5);
        let g = random_dominant_game(&mut rng, n);
        let ds = random_deception(&mut rng, n);
        let gammas = dither_gammas(&g).unwrap();
        let d: Vec<f64> = (0..ds.n_deceivers()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let player = rng.random_range(0..n);
        let want = p_term(&g, &ds, player, &g.amplitudes(), &gammas, &d).unwrap();
        let a = &g.player_cost(player).a;
        let sd: Vec<f64> = g.tuning().iter().map(|t| stationary_sd(t.noise_scale)).collect();
        let mut w = vec![0.0; n];
        let mut e = vec![0.0; n];
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..samples {
            for j in 0..n {
                let t = &g.tuning()[j];
                w[j] = t.amplitude * t.dither.eval(sd[j] * rng.sample::<f64, _>(StandardNormal));
            }
            e.copy_from_slice(&w);
            for (slot, dec) in ds.deceivers().iter().enumerate() {
                for &j in &dec.targets {
                    e[dec.player] += d[slot] * w[j];
                }
            }
            let mut v = 0.0;
            for r in 0..n {
                for c in 0..n {
                    v += e[r] * a[(r, c)] * e[c];
                }
            }
            v *= 0.5;
            sum += v;
            sum2 += v * v;
        }
        let mean = sum / samples as f64;
        let se = ((sum2 / samples as f64 - mean * mean) / samples as f64).sqrt();
        let z = (mean - want).abs() / se;
        worst = worst.max(z);
        if z <= 3.0 {
            inside += 1;
        }
    }
    outcome(inside == 50, format!("{inside}/50 within 3 SE, worst {worst:.2} SE"))
}

fn criterion_7() -> Outcome {
    let g = sec5_game();
    let ds = sec5_deception(-2.0);
    let settings = SimulationSettings {
        dt: 0.05,
        horizon: 2000.0,
        record_stride: 1000,
    };
    let traj = integrate_averaged(&g, &ds, &[0.0, 0.0], &[0.0], &settings).unwrap();
    let last = traj.last().unwrap();
    let a2_norm = g.player_cost(1).a.norm();
    let amax = g.amplitudes().iter().fold(0.0f64, |m, a| m.max(*a));
    let tol = f64::max(5e-3, 2.0 * amax * amax * a2_norm);
    let j2 = last.costs[1];
    outcome(
        (last.delta[0] - 0.1989).abs() <= 5e-3 && (j2 + 2.0).abs() <= tol,
        format!("delta(T)={:.6} J2(u(T))={j2:.6} tolerance {tol:.4}", last.delta[0]),
    )
}

fn criterion_8() -> Outcome {
    let cfg = ScenarioConfig::from_path(&scenario_file("sec5.json")).unwrap();
    let scenario = cfg.build().unwrap();
    let mut plan = cfg.experiment.clone().unwrap();
    plan.envelope = None;
    plan.tolerance_x = 0.15;
    plan.tolerance_j = 0.15;
    let report = run_batch(&scenario, &plan).unwrap();
    let fraction = report.success_fraction.unwrap_or(0.0);
    let blow_ups = report.trials.iter().filter(|t| t.blow_up_time.is_some()).count();
    outcome(
        fraction >= 0.8,
        format!(
            "success {:.0}% of {} trials, {blow_ups} blew up",
            100.0 * fraction,
            report.trials.len()
        ),
    )
}

fn criterion_9() -> Outcome {
    let cfg = ScenarioConfig::from_path(&scenario_file("sec5_sweep.json")).unwrap();
    let scenario = cfg.build().unwrap();
    let plan = cfg.experiment.clone().unwrap();
    let rows = theta_sweep(&scenario, &plan).unwrap();
    let monotone = deviation_non_increasing(&rows);
    let last = rows.last().unwrap().mean_or_inf();
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("theta={:e}: mean {:.4} ({} blow-ups)", r.theta, r.mean_or_inf(), r.blow_ups))
        .collect();
    outcome(
        monotone && last < 0.15,
        format!("monotone={monotone}; {}", table.join("; ")),
    )
}

fn criterion_10() -> Outcome {
    let dir = std::env::temp_dir().join(format!("sdnes-acceptance-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    let mut cfg = ScenarioConfig::from_path(&scenario_file("sec5.json")).unwrap();
    cfg.ou.theta = 5e-5;
    cfg.dynamics.dt = 4e-6;
    cfg.dynamics.horizon = 0.5;
    cfg.dynamics.record_stride = 100;
    let scenario = cfg.build().unwrap();
    let produce = |tag: &str| -> Vec<Vec<u8>> {
        let att = solve_attainability(&scenario.game, &scenario.deception, &[-2.0]).unwrap();
        let attain = format!("{:?} {:?} {:?}", att.delta_star, att.x_delta, att.lambda);
        let sim = simulate(
            &scenario.game,
            &scenario.deception,
            &scenario.ou,
            &scenario.initial,
            &scenario.settings,
            1,
        )
        .unwrap()
        .to_csv_string();
        let avg = integrate_averaged(
            &scenario.game,
            &scenario.deception,
            &scenario.initial.u,
            &scenario.initial.delta,
            &SimulationSettings {
                dt: 0.01,
                horizon: 50.0,
                record_stride: 10,
            },
        )
        .unwrap()
        .to_csv_string();
        let report = serde_json::to_string(&run_batch(&scenario, &ExperimentPlan::with_seeds(vec![1, 2, 3])).unwrap())
            .unwrap();
        let files = [("attain.txt", attain), ("sim.csv", sim), ("avg.csv", avg), ("report.json", report)];
        files
            .iter()
            .map(|(name, text)| {
                let p = dir.join(format!("{tag}-{name}"));
                fs::write(&p, text).unwrap();
                fs::read(&p).unwrap()
            })
            .collect()
    };
    let first = produce("a");
    let second = produce("b");
    fs::remove_dir_all(&dir).ok();
    let same = first == second;
    outcome(same, format!("{} output files byte-identical: {same}", first.len()))
}

fn main() {
    let criteria: [(&str, f64, fn() -> Outcome); 10] = [
        ("nominal analysis", 1.0, criterion_1),
        ("stability radius", 1.0, criterion_2),
        ("attainability", 1.0, criterion_3),
        ("stability ball property", 120.0, criterion_4),
        ("dither second moment", 1.0, criterion_5),
        ("dither bias term", 300.0, criterion_6),
        ("averaged endpoint", 30.0, criterion_7),
        ("closed-loop reproduction", 600.0, criterion_8),
        ("averaging order", 1200.0, criterion_9),
        ("determinism", f64::INFINITY, criterion_10),
    ];
    let mut failed = 0;
    for (k, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = run();
        let secs = start.elapsed().as_secs_f64();
        let passed = out.passed && secs < *budget;
        if !passed {
            failed += 1;
        }
        println!(
            "criterion {:>2} {name}: {} ({}; {secs:.2} s)",
            k + 1,
            if passed { "PASS" } else { "FAIL" },
            out.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
