use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use sdnes_core::config::{ConfigError, ScenarioConfig};
use sdnes_core::deception::{
    in_stability_set, solve_attainability, stability_radius, DeceptionError,
};
use sdnes_core::dynamics::{simulate, DynamicsError, SimulationSettings, Trajectory};
use sdnes_core::experiment::{run_batch, theta_sweep, ExperimentError, ExperimentPlan, Scenario};
use sdnes_core::game::{check_assumption_diag_dominant, GameError};
use sdnes_core::linalg;

const EXIT_PARSE: u8 = 1;
const EXIT_ASSUMPTION: u8 = 2;
const EXIT_NOT_ATTAINABLE: u8 = 3;
const EXIT_BLOW_UP: u8 = 4;
const EXIT_THRESHOLDS: u8 = 5;

/// Nash equilibrium seeking with deceptive players: analysis, simulation and
/// Monte Carlo batches driven by JSON scenario files.
#[derive(Parser)]
#[command(name = "sdnes", version)]
struct Cli {
    /// Scenario file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for `simulate`.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file (CSV for time series, JSON otherwise).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the parsed scenario as JSON and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Nash equilibrium, its costs, the diagonal-dominance check and the
    /// stability radius of the deceptive gains.
    Analyze,
    /// Deceptive gains that attain every deceiver's reference payoff.
    Attain,
    /// One closed-loop run written as CSV.
    Simulate,
    /// Averaged system written as CSV, optionally compared with SDE runs.
    Average {
        /// Seeds of SDE runs to compare against.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// The scenario's experiment plan, reported as JSON.
    Montecarlo {
        /// Also write one CSV row per trial.
        #[arg(long)]
        trials_csv: Option<PathBuf>,
    },
}

/// An error with the exit code of its failure class.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        Failure {
            code: classify(&error),
            error,
        }
    }
}

fn fail(code: u8, error: anyhow::Error) -> Failure {
    Failure { code, error }
}

fn game_code(e: &GameError) -> u8 {
    match e {
        GameError::AssumptionViolated => EXIT_ASSUMPTION,
        _ => EXIT_PARSE,
    }
}

fn deception_code(e: &DeceptionError) -> u8 {
    match e {
        DeceptionError::AssumptionViolated => EXIT_ASSUMPTION,
        DeceptionError::NotAttainable { .. } => EXIT_NOT_ATTAINABLE,
        DeceptionError::Game(g) => game_code(g),
        _ => EXIT_PARSE,
    }
}

fn dynamics_code(e: &DynamicsError) -> u8 {
    match e {
        DynamicsError::BlowUp { .. } => EXIT_BLOW_UP,
        DynamicsError::Deception(d) => deception_code(d),
        _ => EXIT_PARSE,
    }
}

fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ConfigError>() {
            return match e {
                ConfigError::Game(g) => game_code(g),
                ConfigError::Deception(d) => deception_code(d),
                _ => EXIT_PARSE,
            };
        }
        if let Some(e) = cause.downcast_ref::<ExperimentError>() {
            return match e {
                ExperimentError::Dynamics(d) => dynamics_code(d),
                ExperimentError::Deception(d) => deception_code(d),
                _ => EXIT_PARSE,
            };
        }
        if let Some(e) = cause.downcast_ref::<DynamicsError>() {
            return dynamics_code(e);
        }
        if let Some(e) = cause.downcast_ref::<DeceptionError>() {
            return deception_code(e);
        }
        if let Some(e) = cause.downcast_ref::<GameError>() {
            return game_code(e);
        }
    }
    EXIT_PARSE
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| fail(EXIT_PARSE, anyhow!("--config <path> is required")))?;
    let config = ScenarioConfig::from_path(path)?;
    if cli.dump_config {
        println!("{}", config.dump());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(fail(EXIT_PARSE, anyhow!("no subcommand given (see --help)")));
    };
    let scenario = config.build()?;
    match command {
        Command::Analyze => analyze(cli, &scenario),
        Command::Attain => attain(cli, &scenario),
        Command::Simulate => simulate_cmd(cli, &scenario),
        Command::Average { seeds } => average(cli, &scenario, seeds),
        Command::Montecarlo { trials_csv } => montecarlo(cli, &config, &scenario, trials_csv.as_deref()),
    }
}

fn emit_json<T: Serialize>(cli: &Cli, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value)?;
    println!("{text}");
    if let Some(out) = &cli.out {
        fs::write(out, format!("{text}\n")).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else {
        serde_json::Value::Null
    }
}

fn analyze(cli: &Cli, sc: &Scenario) -> Result<(), Failure> {
    let pg = sc.game.pseudogradient();
    let assumption = check_assumption_diag_dominant(&pg.a);
    let ne = pg.nash_equilibrium()?;
    let ne: Vec<f64> = ne.iter().copied().collect();
    let costs = sc.game.costs_at(&ne)?;
    let residual = pg.eval(&ne.clone().into()).amax();
    let radius = if assumption && !sc.deception.is_empty() {
        finite_or_null(stability_radius(&sc.game, &sc.deception)?)
    } else {
        serde_json::Value::Null
    };
    emit_json(
        cli,
        &json!({
            "nash_equilibrium": ne,
            "residual": residual,
            "costs_at_ne": costs,
            "assumption_diag_dominant": assumption,
            "stability_radius": radius,
        }),
    )?;
    if !assumption {
        return Err(fail(
            EXIT_ASSUMPTION,
            anyhow!("pseudogradient matrix is not strictly diagonally dominant with positive diagonal"),
        ));
    }
    Ok(())
}

fn attain(cli: &Cli, sc: &Scenario) -> Result<(), Failure> {
    if sc.deception.is_empty() {
        return Err(fail(EXIT_PARSE, anyhow!("scenario declares no deceivers")));
    }
    let radius = stability_radius(&sc.game, &sc.deception)?;
    let att = solve_attainability(&sc.game, &sc.deception, &sc.deception.j_refs())?;
    let x: Vec<f64> = att.x_delta.iter().copied().collect();
    let eig = linalg::eigenvalues(&att.lambda).map_err(DeceptionError::from)?;
    let inside = in_stability_set(&sc.game, &sc.deception, &att.delta_star, &sc.game.gains())?;
    let lambda_rows: Vec<Vec<f64>> = (0..att.lambda.nrows())
        .map(|r| att.lambda.row(r).iter().copied().collect())
        .collect();
    emit_json(
        cli,
        &json!({
            "delta_star": att.delta_star,
            "x_delta": x,
            "costs_at_x_delta": sc.game.costs_at(&x)?,
            "j_ref": sc.deception.j_refs(),
            "residual": att.residual,
            "lambda": lambda_rows,
            "lambda_eigenvalues": eig.iter().map(|(re, im)| json!({"re": re, "im": im})).collect::<Vec<_>>(),
            "lambda_hurwitz": att.lambda_hurwitz,
            "inside_stability_set": inside,
            "stability_radius": finite_or_null(radius),
        }),
    )
}

fn write_trajectory(cli: &Cli, traj: &Trajectory) -> Result<bool, Failure> {
    match &cli.out {
        Some(out) => {
            let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
            let mut w = io::BufWriter::new(file);
            traj.write_csv(&mut w)?;
            w.flush()?;
            Ok(true)
        }
        None => {
            let stdout = io::stdout();
            let mut w = io::BufWriter::new(stdout.lock());
            traj.write_csv(&mut w)?;
            w.flush()?;
            Ok(false)
        }
    }
}

fn final_summary(traj: &Trajectory) -> serde_json::Value {
    match traj.last() {
        Some(s) => json!({ "t": s.t, "u": s.u, "delta": s.delta, "x": s.x, "costs": s.costs }),
        None => serde_json::Value::Null,
    }
}

fn simulate_cmd(cli: &Cli, sc: &Scenario) -> Result<(), Failure> {
    let result = simulate(&sc.game, &sc.deception, &sc.ou, &sc.initial, &sc.settings, cli.seed);
    let (traj, blow_up) = match result {
        Ok(t) => (t, None),
        Err(DynamicsError::BlowUp { time, trajectory }) => (*trajectory, Some(time)),
        Err(e) => return Err(e.into()),
    };
    if write_trajectory(cli, &traj)? {
        println!(
            "{}",
            serde_json::to_string_pretty(&json!({
                "seed": cli.seed,
                "samples": traj.len(),
                "blow_up_time": blow_up,
                "final": final_summary(&traj),
            }))?
        );
    }
    if let Some(time) = blow_up {
        return Err(fail(EXIT_BLOW_UP, anyhow!("state became non-finite at t = {time}")));
    }
    Ok(())
}

fn average(cli: &Cli, sc: &Scenario, seeds: &[u64]) -> Result<(), Failure> {
    let interval = sc.settings.dt * sc.settings.record_stride as f64;
    let settings = SimulationSettings {
        dt: interval,
        horizon: sc.settings.horizon,
        record_stride: 1,
    };
    let traj = sdnes_core::dynamics::integrate_averaged(
        &sc.game,
        &sc.deception,
        &sc.initial.u,
        &sc.initial.delta,
        &settings,
    )?;
    let to_file = write_trajectory(cli, &traj)?;
    let deviation = if seeds.is_empty() {
        serde_json::Value::Null
    } else {
        let mut plan = ExperimentPlan::with_seeds(seeds.to_vec());
        plan.theta_sweep = Some(vec![sc.ou.theta]);
        plan.sweep_record_interval = Some(interval);
        serde_json::to_value(&theta_sweep(sc, &plan)?[0])?
    };
    let summary = serde_json::to_string_pretty(&json!({
        "step": interval,
        "final": final_summary(&traj),
        "deviation": deviation,
    }))?;
    if to_file {
        println!("{summary}");
    } else if !deviation.is_null() {
        eprintln!("{summary}");
    }
    Ok(())
}

fn montecarlo(
    cli: &Cli,
    config: &ScenarioConfig,
    sc: &Scenario,
    trials_csv: Option<&Path>,
) -> Result<(), Failure> {
    let plan = config
        .experiment
        .as_ref()
        .ok_or_else(|| fail(EXIT_PARSE, anyhow!("scenario has no \"experiment\" section")))?;
    let pg = sc.game.pseudogradient();
    if !check_assumption_diag_dominant(&pg.a) {
        return Err(GameError::AssumptionViolated.into());
    }
    let report = run_batch(sc, plan)?;
    emit_json(cli, &report)?;
    if let Some(path) = trials_csv {
        let mut text = String::from("seed,blow_up_time,x_error");
        for k in 1..=sc.deception.n_deceivers() {
            text.push_str(&format!(",j_error_{k}"));
        }
        text.push_str(",success\n");
        let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for t in &report.trials {
            text.push_str(&format!("{},{},{}", t.seed, cell(t.blow_up_time), cell(t.x_error)));
            for k in 0..sc.deception.n_deceivers() {
                text.push(',');
                text.push_str(&cell(t.j_errors.as_ref().map(|e| e[k])));
            }
            text.push_str(&format!(",{}\n", t.success));
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    if !report.thresholds_passed() {
        let failed: Vec<&str> = report
            .thresholds
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        return Err(fail(
            EXIT_THRESHOLDS,
            anyhow!("thresholds failed: {}", failed.join(", ")),
        ));
    }
    Ok(())
}
