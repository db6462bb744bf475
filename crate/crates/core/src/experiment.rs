//! Seeded Monte Carlo batches over the closed-loop dynamics.
//!
//! Everything reported here is a finite-ϑ, finite-horizon empirical
//! surrogate of the asymptotic convergence statements: endpoint errors
//! against the analytic deceptive equilibrium, exponential-envelope checks,
//! and sup-norm deviation from the averaged system as ϑ shrinks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deception::{solve_attainability, DeceptionError, DeceptionStructure};
use crate::dynamics::{
    dither_gammas, simulate_with_gammas, AveragedSystem, DynamicsError, InitialState,
    SimulationSettings, Trajectory,
};
use crate::game::QuadraticGame;
use crate::perturbation::OuParams;

pub const SURROGATE_NOTE: &str = "finite-theta, finite-horizon empirical surrogates; \
not the asymptotic (theta -> 0) statements themselves";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("experiment plan has no seeds")]
    NoSeeds,
    #[error("seed {0} appears more than once")]
    DuplicateSeed(u64),
    #[error("theta sweep must be non-empty, positive and strictly decreasing")]
    BadSweep,
    #[error("envelope constants must be positive and finite ({0})")]
    BadEnvelope(&'static str),
    #[error("tolerance must be positive and finite, got {0}")]
    BadTolerance(f64),
    #[error("trajectory state has dimension {got}, reference point has {expected}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Deception(#[from] DeceptionError),
}

/// A fully specified closed-loop scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub game: QuadraticGame,
    pub deception: DeceptionStructure,
    pub ou: OuParams,
    pub settings: SimulationSettings,
    pub initial: InitialState,
}

/// The analytic point the closed loop should settle near: the deceptive
/// equilibrium at the attaining gains, or the Nash equilibrium when nobody
/// deceives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
}

impl ReferencePoint {
    pub fn zeta(&self) -> Vec<f64> {
        self.x.iter().chain(&self.delta).copied().collect()
    }
}

impl Scenario {
    pub fn reference_point(&self) -> Result<ReferencePoint, ExperimentError> {
        if self.deception.is_empty() {
            let x = self
                .game
                .pseudogradient()
                .nash_equilibrium()
                .map_err(DeceptionError::from)?;
            return Ok(ReferencePoint {
                x: x.iter().copied().collect(),
                delta: vec![],
            });
        }
        let att = solve_attainability(&self.game, &self.deception, &self.deception.j_refs())?;
        Ok(ReferencePoint {
            x: att.x_delta.iter().copied().collect(),
            delta: att.delta_star,
        })
    }
}

fn default_tolerance() -> f64 {
    0.15
}

/// Exponential envelope `|ζ(t) − ζ*| ≤ C|ζ₀ − ζ*|e^{−Mt} + r̃`. Missing
/// `c`/`m` are fitted on a pilot trial with `pilot_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeSpec {
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default)]
    pub m: Option<f64>,
    pub r_tilde: f64,
    #[serde(default)]
    pub pilot_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    #[serde(default)]
    pub min_success_fraction: Option<f64>,
    #[serde(default)]
    pub min_envelope_pass_fraction: Option<f64>,
    /// Upper bound on the mean sup-norm deviation at the smallest ϑ.
    #[serde(default)]
    pub max_deviation_at_smallest_theta: Option<f64>,
    #[serde(default)]
    pub require_monotone_deviation: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Endpoint,
    Envelope,
    ThetaSweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub theta_sweep: Option<Vec<f64>>,
    /// Horizon of the sweep runs; the scenario horizon when absent.
    #[serde(default)]
    pub sweep_horizon: Option<f64>,
    /// Spacing of the common time grid on which SDE and averaged runs are
    /// compared in the sweep.
    #[serde(default)]
    pub sweep_record_interval: Option<f64>,
    #[serde(default)]
    pub envelope: Option<EnvelopeSpec>,
    #[serde(default = "default_tolerance")]
    pub tolerance_x: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance_j: f64,
    #[serde(default)]
    pub thresholds: Thresholds,
    /// Report sections to compute; all applicable ones when absent.
    #[serde(default)]
    pub metrics: Option<Vec<Metric>>,
}

impl ExperimentPlan {
    pub fn with_seeds(seeds: Vec<u64>) -> Self {
        Self {
            seeds,
            theta_sweep: None,
            sweep_horizon: None,
            sweep_record_interval: None,
            envelope: None,
            tolerance_x: default_tolerance(),
            tolerance_j: default_tolerance(),
            thresholds: Thresholds::default(),
            metrics: None,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.seeds.is_empty() {
            return Err(ExperimentError::NoSeeds);
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(ExperimentError::DuplicateSeed(w[0]));
        }
        if let Some(sweep) = &self.theta_sweep {
            let ok = !sweep.is_empty()
                && sweep.iter().all(|t| *t > 0.0 && t.is_finite())
                && sweep.windows(2).all(|w| w[1] < w[0]);
            if !ok {
                return Err(ExperimentError::BadSweep);
            }
        }
        for tol in [self.tolerance_x, self.tolerance_j] {
            if !(tol > 0.0 && tol.is_finite()) {
                return Err(ExperimentError::BadTolerance(tol));
            }
        }
        if let Some(env) = &self.envelope {
            let positive = |v: f64| v > 0.0 && v.is_finite();
            if !positive(env.r_tilde) {
                return Err(ExperimentError::BadEnvelope("r_tilde"));
            }
            if env.c.is_some_and(|c| !positive(c)) {
                return Err(ExperimentError::BadEnvelope("c"));
            }
            if env.m.is_some_and(|m| !positive(m)) {
                return Err(ExperimentError::BadEnvelope("m"));
            }
        }
        Ok(())
    }

    fn wants(&self, metric: Metric) -> bool {
        self.metrics.as_ref().is_none_or(|m| m.contains(&metric))
    }
}

/// Per-trial outcome. Error fields are `None` when the trial blew up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub blow_up_time: Option<f64>,
    pub final_x: Option<Vec<f64>>,
    pub final_delta: Option<Vec<f64>>,
    pub final_costs: Option<Vec<f64>>,
    /// `|x(T) − x_δ*|`.
    pub x_error: Option<f64>,
    /// `|J_{d_k}(x(T)) − J_{d_k}^ref|` per deceiver.
    pub j_errors: Option<Vec<f64>>,
    pub success: bool,
    /// First envelope violation time; `None` when the envelope held.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub envelope_violation: Option<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeSummary {
    pub c: f64,
    pub m: f64,
    pub r_tilde: f64,
    pub fitted: bool,
    pub pilot_seed: Option<u64>,
    pub pass_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub theta: f64,
    pub dt: f64,
    /// Sup-norm deviation per seed; `None` for trials that blew up.
    pub deviations: Vec<Option<f64>>,
    pub blow_ups: usize,
    /// Statistics over all trials; `None` (infinite) if any trial blew up.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub max: Option<f64>,
}

impl SweepRow {
    /// Mean deviation with blow-ups counted as infinite.
    pub fn mean_or_inf(&self) -> f64 {
        self.mean.unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCheck {
    pub name: String,
    pub value: Option<f64>,
    pub limit: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub note: String,
    pub reference: ReferencePoint,
    pub tolerance_x: f64,
    pub tolerance_j: f64,
    pub trials: Vec<TrialRecord>,
    /// `None` when the plan asked for no endpoint or envelope metrics.
    pub success_fraction: Option<f64>,
    pub envelope: Option<EnvelopeSummary>,
    pub theta_sweep: Option<Vec<SweepRow>>,
    pub thresholds: Vec<ThresholdCheck>,
}

impl ExperimentReport {
    pub fn thresholds_passed(&self) -> bool {
        self.thresholds.iter().all(|c| c.passed)
    }

    /// Success fraction recomputed at other tolerances from the stored
    /// endpoint errors.
    pub fn success_fraction_at(&self, tolerance_x: f64, tolerance_j: f64) -> Option<f64> {
        if self.trials.is_empty() {
            return None;
        }
        let ok = self
            .trials
            .iter()
            .filter(|t| trial_success(t.x_error, t.j_errors.as_deref(), tolerance_x, tolerance_j))
            .count();
        Some(ok as f64 / self.trials.len() as f64)
    }
}

fn trial_success(x_error: Option<f64>, j_errors: Option<&[f64]>, tol_x: f64, tol_j: f64) -> bool {
    match (x_error, j_errors) {
        (Some(ex), Some(ej)) => ex < tol_x && ej.iter().all(|e| *e < tol_j),
        _ => false,
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(feature = "parallel")]
fn map_seeds<T, F>(seeds: &[u64], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    use rayon::prelude::*;
    seeds.par_iter().map(|&s| f(s)).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_seeds<T, F>(seeds: &[u64], f: F) -> Vec<T>
where
    F: Fn(u64) -> T,
{
    seeds.iter().map(|&s| f(s)).collect()
}

/// First recorded time at which `|ζ(t) − ζ*| > C|ζ₀ − ζ*|e^{−Mt} + r̃`, with
/// `ζ₀` the first sample.
pub fn envelope_check(
    trajectory: &Trajectory,
    zeta_star: &[f64],
    c: f64,
    m: f64,
    r_tilde: f64,
) -> Result<Option<f64>, ExperimentError> {
    for (v, name) in [(c, "c"), (m, "m"), (r_tilde, "r_tilde")] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(ExperimentError::BadEnvelope(name));
        }
    }
    let dim = trajectory.n_players + trajectory.n_deceivers;
    if zeta_star.len() != dim {
        return Err(ExperimentError::Dimension {
            expected: zeta_star.len(),
            got: dim,
        });
    }
    let Some(first) = trajectory.samples.first() else {
        return Ok(None);
    };
    let d0 = distance(&first.zeta(), zeta_star);
    for s in &trajectory.samples {
        let bound = c * d0 * (-m * s.t).exp() + r_tilde;
        if distance(&s.zeta(), zeta_star) > bound {
            return Ok(Some(s.t));
        }
    }
    Ok(None)
}

/// Fits `(C, M)` to the transient of a pilot trajectory: `M` by least
/// squares on `log|ζ(t) − ζ*|` over the samples before the distance first
/// drops to `r_tilde`, then `C` as the smallest constant that covers every
/// transient sample at that rate.
pub fn fit_envelope(
    trajectory: &Trajectory,
    zeta_star: &[f64],
    r_tilde: f64,
) -> Result<(f64, f64), ExperimentError> {
    let dim = trajectory.n_players + trajectory.n_deceivers;
    if zeta_star.len() != dim {
        return Err(ExperimentError::Dimension {
            expected: zeta_star.len(),
            got: dim,
        });
    }
    let pts: Vec<(f64, f64)> = trajectory
        .samples
        .iter()
        .map(|s| (s.t, distance(&s.zeta(), zeta_star)))
        .take_while(|&(_, d)| d > r_tilde)
        .collect();
    let d0 = pts.first().map_or(0.0, |p| p.1);
    if pts.len() < 3 || d0 == 0.0 {
        return Ok((1.0, 1.0));
    }
    let n = pts.len() as f64;
    let mean_t = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_l = pts.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let cov: f64 = pts.iter().map(|p| (p.0 - mean_t) * (p.1.ln() - mean_l)).sum();
    let var: f64 = pts.iter().map(|p| (p.0 - mean_t) * (p.0 - mean_t)).sum();
    let slope = if var > 0.0 { cov / var } else { 0.0 };
    // the envelope needs a decaying exponential even for a flat pilot
    let m = (-slope).max(1e-3);
    let c = pts
        .iter()
        .map(|&(t, d)| d * (m * t).exp() / d0)
        .fold(1.0, f64::max);
    Ok((c, m))
}

struct TrialRun {
    seed: u64,
    result: Result<Trajectory, DynamicsError>,
}

fn run_trials(
    scenario: &Scenario,
    ou: &OuParams,
    settings: &SimulationSettings,
    seeds: &[u64],
    gammas: &[f64],
) -> Vec<TrialRun> {
    map_seeds(seeds, |seed| TrialRun {
        seed,
        result: simulate_with_gammas(
            &scenario.game,
            &scenario.deception,
            ou,
            &scenario.initial,
            settings,
            seed,
            gammas,
        ),
    })
}

/// Runs one simulation per seed and aggregates endpoint metrics, the
/// envelope check and the ϑ sweep as requested by the plan.
pub fn run_batch(scenario: &Scenario, plan: &ExperimentPlan) -> Result<ExperimentReport, ExperimentError> {
    plan.validate()?;
    let reference = scenario.reference_point()?;
    let zeta_star = reference.zeta();
    let gammas = dither_gammas(&scenario.game).map_err(DynamicsError::from)?;

    let envelope_constants = match (&plan.envelope, plan.wants(Metric::Envelope)) {
        (Some(env), true) => Some(resolve_envelope(scenario, env, &zeta_star, &gammas)?),
        _ => None,
    };

    let endpoint_wanted = plan.wants(Metric::Endpoint)
        || envelope_constants.is_some()
        || plan.thresholds.min_success_fraction.is_some();
    let runs = if endpoint_wanted {
        run_trials(scenario, &scenario.ou, &scenario.settings, &plan.seeds, &gammas)
    } else {
        Vec::new()
    };
    let mut trials = Vec::with_capacity(runs.len());
    for run in runs {
        let mut rec = TrialRecord {
            seed: run.seed,
            blow_up_time: None,
            final_x: None,
            final_delta: None,
            final_costs: None,
            x_error: None,
            j_errors: None,
            success: false,
            envelope_violation: None,
        };
        match run.result {
            Ok(traj) => {
                let last = traj.last().expect("simulate records the initial state");
                let x_error = distance(&last.x, &reference.x);
                let j_errors: Vec<f64> = scenario
                    .deception
                    .deceivers()
                    .iter()
                    .map(|d| (last.costs[d.player] - d.j_ref).abs())
                    .collect();
                rec.success = trial_success(Some(x_error), Some(&j_errors), plan.tolerance_x, plan.tolerance_j);
                rec.final_x = Some(last.x.clone());
                rec.final_delta = Some(last.delta.clone());
                rec.final_costs = Some(last.costs.clone());
                rec.x_error = Some(x_error);
                rec.j_errors = Some(j_errors);
                if let Some((c, m, r, _)) = &envelope_constants {
                    rec.envelope_violation = Some(envelope_check(&traj, &zeta_star, *c, *m, *r)?);
                }
            }
            Err(DynamicsError::BlowUp { time, trajectory }) => {
                rec.blow_up_time = Some(time);
                if let Some((c, m, r, _)) = &envelope_constants {
                    // a divergent path violates any envelope, at the latest when it diverges
                    let v = envelope_check(&trajectory, &zeta_star, *c, *m, *r)?;
                    rec.envelope_violation = Some(Some(v.unwrap_or(time)));
                }
            }
            Err(e) => return Err(e.into()),
        }
        trials.push(rec);
    }
    let success_fraction = (!trials.is_empty())
        .then(|| trials.iter().filter(|t| t.success).count() as f64 / trials.len() as f64);

    let envelope = envelope_constants.map(|(c, m, r_tilde, fitted)| {
        let passed = trials
            .iter()
            .filter(|t| matches!(t.envelope_violation, Some(None)))
            .count();
        EnvelopeSummary {
            c,
            m,
            r_tilde,
            fitted: fitted.is_some(),
            pilot_seed: fitted,
            pass_fraction: passed as f64 / trials.len() as f64,
        }
    });

    let theta_sweep = match (&plan.theta_sweep, plan.wants(Metric::ThetaSweep)) {
        (Some(_), true) => Some(theta_sweep(scenario, plan)?),
        _ => None,
    };

    let mut thresholds = Vec::new();
    let th = &plan.thresholds;
    if let Some(limit) = th.min_success_fraction {
        thresholds.push(ThresholdCheck {
            name: "min_success_fraction".into(),
            value: success_fraction,
            limit,
            passed: success_fraction.is_some_and(|v| v >= limit),
        });
    }
    if let Some(limit) = th.min_envelope_pass_fraction {
        let value = envelope.as_ref().map(|e| e.pass_fraction);
        thresholds.push(ThresholdCheck {
            name: "min_envelope_pass_fraction".into(),
            value,
            limit,
            passed: value.is_some_and(|v| v >= limit),
        });
    }
    if let Some(limit) = th.max_deviation_at_smallest_theta {
        let value = theta_sweep.as_ref().and_then(|rows| rows.last()).and_then(|r| r.mean);
        thresholds.push(ThresholdCheck {
            name: "max_deviation_at_smallest_theta".into(),
            value,
            limit,
            passed: value.is_some_and(|v| v < limit),
        });
    }
    if th.require_monotone_deviation {
        let monotone = theta_sweep.as_ref().map(|rows| deviation_non_increasing(rows));
        thresholds.push(ThresholdCheck {
            name: "require_monotone_deviation".into(),
            value: monotone.map(|m| if m { 1.0 } else { 0.0 }),
            limit: 1.0,
            passed: monotone == Some(true),
        });
    }

    Ok(ExperimentReport {
        note: SURROGATE_NOTE.to_string(),
        reference,
        tolerance_x: plan.tolerance_x,
        tolerance_j: plan.tolerance_j,
        trials,
        success_fraction,
        envelope,
        theta_sweep,
        thresholds,
    })
}

/// Mean deviation never increases as ϑ decreases (blow-ups count as +∞).
pub fn deviation_non_increasing(rows: &[SweepRow]) -> bool {
    rows.windows(2).all(|w| w[1].mean_or_inf() <= w[0].mean_or_inf())
}

type EnvelopeConstants = (f64, f64, f64, Option<u64>);

fn resolve_envelope(
    scenario: &Scenario,
    env: &EnvelopeSpec,
    zeta_star: &[f64],
    gammas: &[f64],
) -> Result<EnvelopeConstants, ExperimentError> {
    if let (Some(c), Some(m)) = (env.c, env.m) {
        return Ok((c, m, env.r_tilde, None));
    }
    let pilot = env.pilot_seed.unwrap_or(u64::MAX);
    let traj = simulate_with_gammas(
        &scenario.game,
        &scenario.deception,
        &scenario.ou,
        &scenario.initial,
        &scenario.settings,
        pilot,
        gammas,
    );
    let (c_fit, m_fit) = match traj {
        Ok(t) => fit_envelope(&t, zeta_star, env.r_tilde)?,
        Err(DynamicsError::BlowUp { trajectory, .. }) => {
            fit_envelope(&trajectory, zeta_star, env.r_tilde)?
        }
        Err(e) => return Err(e.into()),
    };
    Ok((env.c.unwrap_or(c_fit), env.m.unwrap_or(m_fit), env.r_tilde, Some(pilot)))
}

/// For each ϑ (descending) runs every seed and records the sup-norm
/// distance between the SDE state `ζ = [u; δ]` and the averaged system on a
/// common time grid.
pub fn theta_sweep(scenario: &Scenario, plan: &ExperimentPlan) -> Result<Vec<SweepRow>, ExperimentError> {
    plan.validate()?;
    let thetas = plan.theta_sweep.as_ref().ok_or(ExperimentError::BadSweep)?;
    let gammas = dither_gammas(&scenario.game).map_err(DynamicsError::from)?;
    let horizon = plan.sweep_horizon.unwrap_or(scenario.settings.horizon);
    let interval = plan
        .sweep_record_interval
        .unwrap_or(scenario.settings.dt * scenario.settings.record_stride as f64);
    for v in [horizon, interval] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(ExperimentError::BadSweep);
        }
    }

    let averaged = AveragedSystem::new(&scenario.game, &scenario.deception)?;
    let reference = averaged.integrate(
        &scenario.initial.u,
        &scenario.initial.delta,
        &SimulationSettings {
            dt: interval,
            horizon,
            record_stride: 1,
        },
    )?;

    let mut rows = Vec::with_capacity(thetas.len());
    for &theta in thetas {
        let ou = scenario.ou.with_theta(theta);
        let max_dt = scenario.settings.dt.min(ou.min_time_scale() / 10.0);
        let stride = (interval / max_dt * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let settings = SimulationSettings {
            dt: interval / stride as f64,
            horizon,
            record_stride: stride,
        };
        let runs = run_trials(scenario, &ou, &settings, &plan.seeds, &gammas);
        let mut deviations = Vec::with_capacity(runs.len());
        for run in runs {
            match run.result {
                Ok(traj) => {
                    let sup = traj
                        .samples
                        .iter()
                        .zip(&reference.samples)
                        .map(|(a, b)| distance(&a.zeta(), &b.zeta()))
                        .fold(0.0, f64::max);
                    deviations.push(Some(sup));
                }
                Err(DynamicsError::BlowUp { .. }) => deviations.push(None),
                Err(e) => return Err(e.into()),
            }
        }
        let blow_ups = deviations.iter().filter(|d| d.is_none()).count();
        let (mean, std, max) = if blow_ups == 0 {
            let vals: Vec<f64> = deviations.iter().flatten().copied().collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = if vals.len() > 1 {
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (Some(mean), Some(var.sqrt()), Some(vals.iter().copied().fold(0.0, f64::max)))
        } else {
            (None, None, None)
        };
        rows.push(SweepRow {
            theta,
            dt: settings.dt,
            deviations,
            blow_ups,
            mean,
            std,
            max,
        });
    }
    Ok(rows)
}
