//! Closed-loop seeking dynamics and their deterministic average.
//!
//! The stochastic system advances the dither states with the exact OU
//! transition, evaluates every player's action and cost once per step, and
//! takes an explicit Euler step for the filtered actions `u` and the
//! deceptive gains `δ`:
//!
//! ```text
//! u_i ← u_i − dt · k_i / (a_i γ_i) · f_i(η_i) · J_i(x)
//! δ_k ← δ_k + dt · ε_k · (J_{d_k}(x) − J_{d_k}^ref)
//! ```
//!
//! The averaged system replaces the dither by its invariant law; its `u`
//! part is the pseudogradient flow of the perturbed game and its `δ` part
//! picks up the quadratic dither bias [`p_term`].

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::deception::{DeceptionError, DeceptionStructure};
use crate::game::QuadraticGame;
use crate::perturbation::{gamma, DitherSource, OuParams, OuTransition, PerturbationError};

/// Minimum number of integration steps per fastest dither time scale.
pub const STEPS_PER_TIME_SCALE: f64 = 10.0;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("time step {dt} exceeds the limit {limit} (fastest dither time scale / 10)")]
    StepTooLarge { dt: f64, limit: f64 },
    #[error("{what} must be positive and finite, got {value}")]
    BadParameter { what: &'static str, value: f64 },
    #[error("{what} has length {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("state became non-finite at t = {time}")]
    BlowUp {
        time: f64,
        trajectory: Box<Trajectory>,
    },
    #[error(transparent)]
    Perturbation(#[from] PerturbationError),
    #[error(transparent)]
    Deception(#[from] DeceptionError),
}

impl DynamicsError {
    pub fn blow_up_time(&self) -> Option<f64> {
        match self {
            DynamicsError::BlowUp { time, .. } => Some(*time),
            _ => None,
        }
    }
}

fn check_len(what: &'static str, v: &[f64], expected: usize) -> Result<(), DynamicsError> {
    if v.len() != expected {
        return Err(DynamicsError::Dimension {
            what,
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

fn check_positive(what: &'static str, value: f64) -> Result<(), DynamicsError> {
    if !(value > 0.0 && value.is_finite()) {
        return Err(DynamicsError::BadParameter { what, value });
    }
    Ok(())
}

/// Full closed-loop state: filtered actions, deceptive gains, dither states.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub eta: Vec<f64>,
    pub t: f64,
}

impl SystemState {
    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.delta).chain(&self.eta).all(|v| v.is_finite())
    }

    /// `ζ = [u; δ]`.
    pub fn zeta(&self) -> Vec<f64> {
        self.u.iter().chain(&self.delta).copied().collect()
    }
}

/// Initial condition for [`simulate`]. Dither states default to a draw from
/// their invariant law.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InitialState {
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub eta: Option<Vec<f64>>,
}

impl InitialState {
    /// `u = 0`, `δ = 0`, stationary dither.
    pub fn zero(game: &QuadraticGame, ds: &DeceptionStructure) -> Self {
        Self {
            u: vec![0.0; game.n_players()],
            delta: vec![0.0; ds.n_deceivers()],
            eta: None,
        }
    }
}

/// Step size, horizon and recording stride of a simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationSettings {
    pub dt: f64,
    pub horizon: f64,
    pub record_stride: usize,
}

impl SimulationSettings {
    pub fn n_steps(&self) -> u64 {
        (self.horizon / self.dt).round() as u64
    }

    fn validate(&self) -> Result<(), DynamicsError> {
        check_positive("time step", self.dt)?;
        check_positive("horizon", self.horizon)?;
        if self.record_stride == 0 {
            return Err(DynamicsError::BadParameter {
                what: "record stride",
                value: 0.0,
            });
        }
        Ok(())
    }
}

/// One recorded sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    /// Dither states; `None` for averaged trajectories.
    pub eta: Option<Vec<f64>>,
    pub x: Vec<f64>,
    pub costs: Vec<f64>,
}

impl Sample {
    pub fn zeta(&self) -> Vec<f64> {
        self.u.iter().chain(&self.delta).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub n_players: usize,
    pub n_deceivers: usize,
    pub samples: Vec<Sample>,
}

impl Trajectory {
    fn new(n_players: usize, n_deceivers: usize) -> Self {
        Self {
            n_players,
            n_deceivers,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn last(&self) -> Option<&Sample> {
        self.samples.last()
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["t".to_string()];
        cols.extend((1..=self.n_players).map(|i| format!("u_{i}")));
        cols.extend((1..=self.n_deceivers).map(|i| format!("delta_{i}")));
        cols.extend((1..=self.n_players).map(|i| format!("x_{i}")));
        cols.extend((1..=self.n_players).map(|i| format!("J_{i}")));
        cols.join(",")
    }

    /// Writes one row per sample; numbers use the shortest decimal form that
    /// parses back to the same `f64`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", self.csv_header())?;
        let mut line = String::new();
        for s in &self.samples {
            line.clear();
            line.push_str(&s.t.to_string());
            for v in s.u.iter().chain(&s.delta).chain(&s.x).chain(&s.costs) {
                line.push(',');
                line.push_str(&v.to_string());
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv output is ASCII")
    }
}

/// `γ_i` for every player, from each player's dither shape and noise scale.
pub fn dither_gammas(game: &QuadraticGame) -> Result<Vec<f64>, PerturbationError> {
    game.tuning()
        .iter()
        .map(|t| gamma(&t.dither, t.noise_scale))
        .collect()
}

/// Actions `x` from filtered actions, deceptive gains and dither states.
/// A deceiver adds `δ` times the sum of its targets' dither signals.
pub fn action(
    game: &QuadraticGame,
    ds: &DeceptionStructure,
    u: &[f64],
    delta: &[f64],
    eta: &[f64],
) -> Vec<f64> {
    let dither: Vec<f64> = game
        .tuning()
        .iter()
        .zip(eta)
        .map(|(t, &e)| t.amplitude * t.dither.eval(e))
        .collect();
    let mut x: Vec<f64> = u.iter().zip(&dither).map(|(u, d)| u + d).collect();
    for (slot, d) in ds.deceivers().iter().enumerate() {
        let injected: f64 = d.targets.iter().map(|&j| dither[j]).sum();
        x[d.player] += delta[slot] * injected;
    }
    x
}

/// Precomputed closed-loop integrator for a fixed step size. Owns scratch
/// buffers; one per trial.
#[derive(Debug, Clone)]
pub struct ClosedLoop<'a> {
    game: &'a QuadraticGame,
    ds: &'a DeceptionStructure,
    dt: f64,
    transitions: Vec<OuTransition>,
    learning_gain: Vec<f64>,
    adaptation: Vec<f64>,
    j_ref: Vec<f64>,
    deceiver_player: Vec<usize>,
    cost_a: Vec<f64>,
    cost_b: Vec<f64>,
    cost_c: Vec<f64>,
    dither: Vec<f64>,
    shape: Vec<f64>,
    x: Vec<f64>,
    costs: Vec<f64>,
}

impl<'a> ClosedLoop<'a> {
    pub fn new(
        game: &'a QuadraticGame,
        ds: &'a DeceptionStructure,
        ou: &OuParams,
        dt: f64,
    ) -> Result<Self, DynamicsError> {
        let gammas = dither_gammas(game)?;
        Self::with_gammas(game, ds, ou, dt, &gammas)
    }

    /// As [`ClosedLoop::new`] with precomputed `γ_i`.
    pub fn with_gammas(
        game: &'a QuadraticGame,
        ds: &'a DeceptionStructure,
        ou: &OuParams,
        dt: f64,
        gammas: &[f64],
    ) -> Result<Self, DynamicsError> {
        let n = game.n_players();
        if ds.n_players() != n {
            return Err(DynamicsError::Dimension {
                what: "deception structure",
                expected: n,
                got: ds.n_players(),
            });
        }
        check_len("theta_bar", &ou.theta_bar, n)?;
        check_len("gamma vector", gammas, n)?;
        ou.validate()?;
        check_positive("time step", dt)?;
        let limit = ou.min_time_scale() / STEPS_PER_TIME_SCALE;
        if dt > limit * (1.0 + 1e-9) {
            return Err(DynamicsError::StepTooLarge { dt, limit });
        }
        let transitions = game
            .tuning()
            .iter()
            .enumerate()
            .map(|(i, t)| OuTransition::new(ou.time_scale(i), t.noise_scale, dt))
            .collect::<Result<Vec<_>, _>>()?;
        let learning_gain = game
            .tuning()
            .iter()
            .zip(gammas)
            .map(|(t, g)| t.gain / (t.amplitude * g))
            .collect();
        let mut cost_a = Vec::with_capacity(n * n * n);
        let mut cost_b = Vec::with_capacity(n * n);
        let mut cost_c = Vec::with_capacity(n);
        for pc in game.costs() {
            for r in 0..n {
                for c in 0..n {
                    cost_a.push(pc.a[(r, c)]);
                }
            }
            cost_b.extend(pc.b.iter());
            cost_c.push(pc.c);
        }
        Ok(Self {
            game,
            ds,
            dt,
            transitions,
            learning_gain,
            adaptation: ds.eps(),
            j_ref: ds.j_refs(),
            deceiver_player: ds.deceivers().iter().map(|d| d.player).collect(),
            cost_a,
            cost_b,
            cost_c,
            dither: vec![0.0; n],
            shape: vec![0.0; n],
            x: vec![0.0; n],
            costs: vec![0.0; n],
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// `k_i / (a_i γ_i)` per player.
    pub fn learning_gains(&self) -> &[f64] {
        &self.learning_gain
    }

    fn eval_actions(&mut self, u: &[f64], delta: &[f64], eta: &[f64]) {
        let n = u.len();
        for (i, t) in self.game.tuning().iter().enumerate() {
            let f = t.dither.eval(eta[i]);
            self.shape[i] = f;
            self.dither[i] = t.amplitude * f;
            self.x[i] = u[i] + self.dither[i];
        }
        for (slot, d) in self.ds.deceivers().iter().enumerate() {
            let injected: f64 = d.targets.iter().map(|&j| self.dither[j]).sum();
            self.x[d.player] += delta[slot] * injected;
        }
        let x = &self.x;
        for i in 0..n {
            let a = &self.cost_a[i * n * n..(i + 1) * n * n];
            let b = &self.cost_b[i * n..(i + 1) * n];
            let mut quad = 0.0;
            let mut lin = 0.0;
            for r in 0..n {
                let row = &a[r * n..(r + 1) * n];
                let ax: f64 = row.iter().zip(x).map(|(a, x)| a * x).sum();
                quad += x[r] * ax;
                lin += b[r] * x[r];
            }
            self.costs[i] = 0.5 * quad + lin + self.cost_c[i];
        }
    }

    /// Advances `state` by one step using one standard normal per player.
    pub fn step(&mut self, state: &mut SystemState, noise: &[f64]) {
        for ((e, tr), z) in state.eta.iter_mut().zip(&self.transitions).zip(noise) {
            *e = tr.advance(*e, *z);
        }
        self.eval_actions(&state.u, &state.delta, &state.eta);
        for i in 0..state.u.len() {
            state.u[i] -= self.dt * self.learning_gain[i] * self.shape[i] * self.costs[i];
        }
        for (slot, &p) in self.deceiver_player.iter().enumerate() {
            state.delta[slot] += self.dt * self.adaptation[slot] * (self.costs[p] - self.j_ref[slot]);
        }
        state.t += self.dt;
    }

    fn record(&mut self, state: &SystemState) -> Sample {
        self.eval_actions(&state.u, &state.delta, &state.eta);
        Sample {
            t: state.t,
            u: state.u.clone(),
            delta: state.delta.clone(),
            eta: Some(state.eta.clone()),
            x: self.x.clone(),
            costs: self.costs.clone(),
        }
    }
}

/// One step of the closed loop, returning the new state.
pub fn step(
    game: &QuadraticGame,
    ds: &DeceptionStructure,
    ou: &OuParams,
    state: &SystemState,
    dt: f64,
    noise: &[f64],
) -> Result<SystemState, DynamicsError> {
    let mut cl = ClosedLoop::new(game, ds, ou, dt)?;
    check_state(game, ds, state)?;
    check_len("noise", noise, game.n_players())?;
    let mut next = state.clone();
    cl.step(&mut next, noise);
    Ok(next)
}

fn check_state(
    game: &QuadraticGame,
    ds: &DeceptionStructure,
    s: &SystemState,
) -> Result<(), DynamicsError> {
    check_len("u", &s.u, game.n_players())?;
    check_len("delta", &s.delta, ds.n_deceivers())?;
    check_len("eta", &s.eta, game.n_players())
}

/// Integrates the closed loop from `initial` over `settings.horizon`.
/// Deterministic in `seed`; player `i` draws its noise from stream `i`.
pub fn simulate(
    game: &QuadraticGame,
    ds: &DeceptionStructure,
    ou: &OuParams,
    initial: &InitialState,
    settings: &SimulationSettings,
    seed: u64,
) -> Result<Trajectory, DynamicsError> {
    let gammas = dither_gammas(game)?;
    simulate_with_gammas(game, ds, ou, initial, settings, seed, &gammas)
}

/// As [`simulate`] with precomputed `γ_i`.
pub fn simulate_with_gammas(
    game: &QuadraticGame,
    ds: &DeceptionStructure,
    ou: &OuParams,
    initial: &InitialState,
    settings: &SimulationSettings,
    seed: u64,
    gammas: &[f64],
) -> Result<Trajectory, DynamicsError> {
    settings.validate()?;
    let n = game.n_players();
    let mut cl = ClosedLoop::with_gammas(game, ds, ou, settings.dt, gammas)?;
    let mut source = DitherSource::new(seed, n);
    let eta = match &initial.eta {
        Some(e) => e.clone(),
        None => game
            .tuning()
            .iter()
            .enumerate()
            .map(|(i, t)| source.stationary_sample(i, t.noise_scale))
            .collect(),
    };
    let mut state = SystemState {
        u: initial.u.clone(),
        delta: initial.delta.clone(),
        eta,
        t: 0.0,
    };
    check_state(game, ds, &state)?;
    if !state.is_finite() {
        return Err(DynamicsError::BlowUp {
            time: 0.0,
            trajectory: Box::new(Trajectory::new(n, ds.n_deceivers())),
        });
    }

    let n_steps = settings.n_steps();
    let stride = settings.record_stride as u64;
    let mut traj = Trajectory::new(n, ds.n_deceivers());
    traj.samples.reserve((n_steps / stride + 2) as usize);
    traj.samples.push(cl.record(&state));
    let mut noise = vec![0.0; n];
    for k in 1..=n_steps {
        source.fill_normals(&mut noise);
        cl.step(&mut state, &noise);
        state.t = k as f64 * settings.dt;
        let finite = state.u.iter().chain(&state.delta).all(|v| v.is_finite());
        if !finite {
            return Err(DynamicsError::BlowUp {
                time: state.t,
                trajectory: Box::new(traj),
            });
        }
        if k % stride == 0 || k == n_steps {
            traj.samples.push(cl.record(&state));
        }
    }
    Ok(traj)
}

/// Averaged (dither-free) dynamics. `second_moments[j] = a_j² γ_j` is the
/// variance of player `j`'s dither signal under the invariant law; all-zero
/// moments give the `a → 0` system without the quadratic bias.
#[derive(Debug, Clone)]
pub struct AveragedSystem<'a> {
    game: &'a QuadraticGame,
    ds: &'a DeceptionStructure,
    second_moments: Vec<f64>,
}

impl<'a> AveragedSystem<'a> {
    pub fn new(game: &'a QuadraticGame, ds: &'a DeceptionStructure) -> Result<Self, DynamicsError> {
        let gammas = dither_gammas(game)?;
        Self::with_moments(game, ds, dither_moments(&game.amplitudes(), &gammas))
    }

    pub fn without_bias(game: &'a QuadraticGame, ds: &'a DeceptionStructure) -> Self {
        Self {
            game,
            ds,
            second_moments: vec![0.0; game.n_players()],
        }
    }

    pub fn with_moments(
        game: &'a QuadraticGame,
        ds: &'a DeceptionStructure,
        second_moments: Vec<f64>,
    ) -> Result<Self, DynamicsError> {
        check_len("second moments", &second_moments, game.n_players())?;
        if ds.n_players() != game.n_players() {
            return Err(DynamicsError::Dimension {
                what: "deception structure",
                expected: game.n_players(),
                got: ds.n_players(),
            });
        }
        Ok(Self {
            game,
            ds,
            second_moments,
        })
    }

    pub fn second_moments(&self) -> &[f64] {
        &self.second_moments
    }

    /// Right-hand side `(du, dδ)`.
    pub fn rhs(&self, u: &[f64], delta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let game = self.game;
        let n = game.n_players();
        let mut du = vec![0.0; n];
        for (i, t) in game.tuning().iter().enumerate() {
            let pc = game.player_cost(i);
            let grad = |k: usize| -> f64 {
                (0..n).map(|j| pc.a[(k, j)] * u[j]).sum::<f64>() + pc.b[k]
            };
            let mut g = grad(i);
            for &slot in self.ds.deceived_by(i) {
                g += delta[slot] * grad(self.ds.deceivers()[slot].player);
            }
            du[i] = -t.gain * g;
        }
        let sigma = dither_covariance(self.ds, &self.second_moments, delta);
        let ddelta = self
            .ds
            .deceivers()
            .iter()
            .map(|d| {
                let bias = half_trace(&game.player_cost(d.player).a, &sigma);
                d.eps * (game.cost_unchecked(d.player, u) - d.j_ref + bias)
            })
            .collect();
        (du, ddelta)
    }

    fn sample(&self, t: f64, u: &[f64], delta: &[f64]) -> Sample {
        Sample {
            t,
            u: u.to_vec(),
            delta: delta.to_vec(),
            eta: None,
            x: u.to_vec(),
            costs: (0..self.game.n_players())
                .map(|i| self.game.cost_unchecked(i, u))
                .collect(),
        }
    }

    /// Classical fourth-order Runge–Kutta from `(u0, delta0)`.
    pub fn integrate(
        &self,
        u0: &[f64],
        delta0: &[f64],
        settings: &SimulationSettings,
    ) -> Result<Trajectory, DynamicsError> {
        settings.validate()?;
        check_len("u", u0, self.game.n_players())?;
        check_len("delta", delta0, self.ds.n_deceivers())?;
        let n = u0.len();
        let m = delta0.len();
        let h = settings.dt;
        let n_steps = settings.n_steps();
        let stride = settings.record_stride as u64;
        let mut traj = Trajectory::new(n, m);
        let mut u = u0.to_vec();
        let mut d = delta0.to_vec();
        traj.samples.push(self.sample(0.0, &u, &d));
        let axpy = |base: &[f64], k: &[f64], s: f64| -> Vec<f64> {
            base.iter().zip(k).map(|(b, k)| b + s * k).collect()
        };
        for step in 1..=n_steps {
            let (ku1, kd1) = self.rhs(&u, &d);
            let (ku2, kd2) = self.rhs(&axpy(&u, &ku1, 0.5 * h), &axpy(&d, &kd1, 0.5 * h));
            let (ku3, kd3) = self.rhs(&axpy(&u, &ku2, 0.5 * h), &axpy(&d, &kd2, 0.5 * h));
            let (ku4, kd4) = self.rhs(&axpy(&u, &ku3, h), &axpy(&d, &kd3, h));
            for i in 0..n {
                u[i] += h / 6.0 * (ku1[i] + 2.0 * ku2[i] + 2.0 * ku3[i] + ku4[i]);
            }
            for i in 0..m {
                d[i] += h / 6.0 * (kd1[i] + 2.0 * kd2[i] + 2.0 * kd3[i] + kd4[i]);
            }
            let t = step as f64 * h;
            if !u.iter().chain(&d).all(|v| v.is_finite()) {
                return Err(DynamicsError::BlowUp {
                    time: t,
                    trajectory: Box::new(traj),
                });
            }
            if step % stride == 0 || step == n_steps {
                traj.samples.push(self.sample(t, &u, &d));
            }
        }
        Ok(traj)
    }
}

/// `a_j² γ_j` per player.
pub fn dither_moments(amplitudes: &[f64], gammas: &[f64]) -> Vec<f64> {
    amplitudes.iter().zip(gammas).map(|(a, g)| a * a * g).collect()
}

/// Second-moment matrix `E[η̄ η̄ᵀ]` of the effective dither vector. With
/// independent zero-mean dither signals `w_j` of variance `m_j`, the
/// effective dither is `η̄ = M w` where `M = I + Σ_k δ_k e_{d_k} 1_{D_k}ᵀ`,
/// so the moment matrix is `M diag(m) Mᵀ`.
pub fn dither_covariance(
    ds: &DeceptionStructure,
    second_moments: &[f64],
    delta: &[f64],
) -> DMatrix<f64> {
    let n = second_moments.len();
    let mut mix = DMatrix::<f64>::identity(n, n);
    for (slot, d) in ds.deceivers().iter().enumerate() {
        for &j in &d.targets {
            mix[(d.player, j)] += delta[slot];
        }
    }
    let m = DMatrix::from_diagonal(&DVector::from_column_slice(second_moments));
    &mix * m * mix.transpose()
}

fn half_trace(a: &DMatrix<f64>, sigma: &DMatrix<f64>) -> f64 {
    0.5 * a.component_mul(sigma).sum()
}

/// Quadratic dither bias `P_i = ½ tr(A_i Σ(a, δ))` in deceiver `player`'s
/// averaged payoff. Vanishes when every amplitude is zero.
pub fn p_term(
    game: &QuadraticGame,
    ds: &DeceptionStructure,
    player: usize,
    amplitudes: &[f64],
    gammas: &[f64],
    delta: &[f64],
) -> Result<f64, DynamicsError> {
    let n = game.n_players();
    check_len("amplitudes", amplitudes, n)?;
    check_len("gammas", gammas, n)?;
    check_len("delta", delta, ds.n_deceivers())?;
    if player >= n {
        return Err(DynamicsError::Dimension {
            what: "player index",
            expected: n,
            got: player,
        });
    }
    let sigma = dither_covariance(ds, &dither_moments(amplitudes, gammas), delta);
    Ok(half_trace(&game.player_cost(player).a, &sigma))
}

/// Averaged right-hand side including the dither bias, with amplitudes and
/// `γ` taken from the game's tuning.
pub fn averaged_rhs(
    game: &QuadraticGame,
    ds: &DeceptionStructure,
    u_tilde: &[f64],
    delta_tilde: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), DynamicsError> {
    check_len("u", u_tilde, game.n_players())?;
    check_len("delta", delta_tilde, ds.n_deceivers())?;
    Ok(AveragedSystem::new(game, ds)?.rhs(u_tilde, delta_tilde))
}

/// RK4 integration of the averaged system with the game's own dither bias.
pub fn integrate_averaged(
    game: &QuadraticGame,
    ds: &DeceptionStructure,
    u0: &[f64],
    delta0: &[f64],
    settings: &SimulationSettings,
) -> Result<Trajectory, DynamicsError> {
    AveragedSystem::new(game, ds)?.integrate(u0, delta0, settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deception::{deceptive_equilibrium, perturbed_pseudogradient, Deceiver};
    use crate::game::fixtures::two_player;
    use crate::game::PlayerCost;

    fn sec5_ds() -> DeceptionStructure {
        DeceptionStructure::new(
            2,
            vec![Deceiver {
                player: 1,
                targets: vec![0],
                eps: 1e-3,
                j_ref: -2.0,
            }],
        )
        .unwrap()
    }

    fn sec5_ou() -> OuParams {
        OuParams::new(5e-4, vec![1.0, 0.8]).unwrap()
    }

    #[test]
    fn zero_dither_means_x_equals_u() {
        let g = two_player();
        let x = action(&g, &sec5_ds(), &[0.3, -0.2], &[0.7], &[0.0, 0.0]);
        assert_eq!(x, vec![0.3, -0.2]);
    }

    #[test]
    fn zero_gain_is_plain_seeking() {
        let g = two_player();
        let eta = [0.05, -0.03];
        let x = action(&g, &sec5_ds(), &[0.3, -0.2], &[0.0], &eta);
        assert_eq!(x[1], -0.2 + 0.12 * (-0.03f64).sin());
    }

    #[test]
    fn action_matches_direct_sum() {
        let g = two_player();
        let (u, d, eta) = ([0.3, -0.2], [0.4], [0.05, -0.03]);
        let x = action(&g, &sec5_ds(), &u, &d, &eta);
        let w1 = 0.1 * 0.05f64.clamp(-1.0, 1.0);
        let w2 = 0.12 * (-0.03f64).sin();
        assert_eq!(x[0], 0.3 + w1);
        assert!((x[1] - (-0.2 + w2 + 0.4 * w1)).abs() < 1e-15);
    }

    #[test]
    fn step_size_limit_enforced() {
        let g = two_player();
        let ds = sec5_ds();
        let err = ClosedLoop::new(&g, &ds, &sec5_ou(), 5e-5).unwrap_err();
        assert!(matches!(err, DynamicsError::StepTooLarge { .. }));
        assert!(ClosedLoop::new(&g, &ds, &sec5_ou(), 4e-5).is_ok());
    }

    #[test]
    fn zero_cost_zero_gain_freezes_state() {
        let costs = (0..2)
            .map(|_| PlayerCost {
                a: DMatrix::zeros(2, 2),
                b: DVector::zeros(2),
                c: 0.0,
            })
            .collect();
        let g = QuadraticGame::new(costs, two_player().tuning().to_vec()).unwrap();
        let ds = DeceptionStructure::new(
            2,
            vec![Deceiver {
                player: 1,
                targets: vec![0],
                eps: 0.0,
                j_ref: -2.0,
            }],
        )
        .unwrap();
        let s0 = SystemState {
            u: vec![0.4, -0.1],
            delta: vec![0.2],
            eta: vec![0.03, 0.01],
            t: 0.0,
        };
        let s1 = step(&g, &ds, &sec5_ou(), &s0, 1e-5, &[1.3, -0.4]).unwrap();
        assert_eq!(s1.u, s0.u);
        assert_eq!(s1.delta, s0.delta);
        assert_ne!(s1.eta, s0.eta);
    }

    #[test]
    fn zero_dither_shape_still_adapts_delta() {
        let g = two_player();
        let ds = sec5_ds();
        let s0 = SystemState {
            u: vec![0.4, -0.1],
            delta: vec![0.2],
            eta: vec![0.0, 0.0],
            t: 0.0,
        };
        let s1 = step(&g, &ds, &sec5_ou(), &s0, 1e-5, &[0.0, 0.0]).unwrap();
        assert_eq!(s1.u, s0.u);
        let j2 = g.cost(1, &[0.4, -0.1]).unwrap();
        assert!((s1.delta[0] - (0.2 + 1e-5 * 1e-3 * (j2 + 2.0))).abs() < 1e-16);
    }

    #[test]
    fn identical_seeds_identical_trajectories() {
        let g = two_player();
        let ds = sec5_ds();
        let settings = SimulationSettings {
            dt: 4e-5,
            horizon: 0.5,
            record_stride: 100,
        };
        let init = InitialState::zero(&g, &ds);
        let a = simulate(&g, &ds, &sec5_ou(), &init, &settings, 11).unwrap();
        let b = simulate(&g, &ds, &sec5_ou(), &init, &settings, 11).unwrap();
        assert_eq!(a.to_csv_string(), b.to_csv_string());
        let c = simulate(&g, &ds, &sec5_ou(), &init, &settings, 12).unwrap();
        assert_ne!(a.to_csv_string(), c.to_csv_string());
        assert_eq!(a.len(), 126);
        assert!(a.samples.windows(2).all(|w| w[1].t > w[0].t));
    }

    #[test]
    fn recorded_actions_consistent_with_state() {
        let g = two_player();
        let ds = sec5_ds();
        let settings = SimulationSettings {
            dt: 4e-5,
            horizon: 0.2,
            record_stride: 250,
        };
        let traj = simulate(&g, &ds, &sec5_ou(), &InitialState::zero(&g, &ds), &settings, 3).unwrap();
        for s in &traj.samples {
            let x = action(&g, &ds, &s.u, &s.delta, s.eta.as_ref().unwrap());
            assert_eq!(x, s.x);
            assert_eq!(g.costs_at(&x).unwrap(), s.costs);
        }
    }

    #[test]
    fn csv_header_for_example() {
        let g = two_player();
        let ds = sec5_ds();
        let t = Trajectory::new(g.n_players(), ds.n_deceivers());
        assert_eq!(t.csv_header(), "t,u_1,u_2,delta_1,x_1,x_2,J_1,J_2");
    }

    #[test]
    fn blow_up_is_reported() {
        // gains so large the explicit step diverges
        let mut tuning = two_player().tuning().to_vec();
        for t in &mut tuning {
            t.gain = 1e9;
        }
        let g = QuadraticGame::new(two_player().costs().to_vec(), tuning).unwrap();
        let ds = DeceptionStructure::none(2);
        let settings = SimulationSettings {
            dt: 4e-5,
            horizon: 1.0,
            record_stride: 10,
        };
        let init = InitialState {
            u: vec![1.0, 1.0],
            delta: vec![],
            eta: None,
        };
        let err = simulate(&g, &ds, &sec5_ou(), &init, &settings, 1).unwrap_err();
        assert!(err.blow_up_time().unwrap() > 0.0);
    }

    #[test]
    fn averaged_rhs_fixed_point_without_bias() {
        let g = two_player();
        let ds = sec5_ds();
        let delta = [0.1989];
        let x = deceptive_equilibrium(&g, &ds, &delta).unwrap();
        let j2 = g.cost(1, x.as_slice()).unwrap();
        let ds_ref = DeceptionStructure::new(
            2,
            vec![Deceiver {
                player: 1,
                targets: vec![0],
                eps: 1e-3,
                j_ref: j2,
            }],
        )
        .unwrap();
        let sys = AveragedSystem::without_bias(&g, &ds_ref);
        let (du, dd) = sys.rhs(x.as_slice(), &delta);
        assert!(du.iter().all(|v| v.abs() < 1e-14));
        assert!(dd[0].abs() < 1e-15);
    }

    #[test]
    fn averaged_rhs_reduces_to_pseudogradient_flow() {
        let g = two_player();
        let ds = DeceptionStructure::none(2);
        let u = [0.3, -0.7];
        let (du, dd) = averaged_rhs(&g, &ds, &u, &[]).unwrap();
        assert!(dd.is_empty());
        let pg = g.pseudogradient();
        let grad = pg.eval(&DVector::from_column_slice(&u));
        assert!((du[0] + 0.06 * grad[0]).abs() < 1e-15);
        assert!((du[1] + 0.05 * grad[1]).abs() < 1e-15);
    }

    #[test]
    fn averaged_u_flow_uses_perturbed_pseudogradient() {
        let g = two_player();
        let ds = sec5_ds();
        let u = [0.3, -0.7];
        let delta = [0.25];
        let (du, _) = AveragedSystem::without_bias(&g, &ds).rhs(&u, &delta);
        let ppg = perturbed_pseudogradient(&g, &ds, &delta).unwrap();
        let v = &ppg.a_bar * DVector::from_column_slice(&u) + &ppg.b_bar;
        assert!((du[0] + 0.06 * v[0]).abs() < 1e-14);
        assert!((du[1] + 0.05 * v[1]).abs() < 1e-14);
    }

    #[test]
    fn p_term_vanishes_without_amplitude() {
        let g = two_player();
        let ds = sec5_ds();
        let p = p_term(&g, &ds, 1, &[0.0, 0.0], &[0.005, 0.0024], &[0.4]).unwrap();
        assert_eq!(p, 0.0);
    }

    #[test]
    fn p_term_diagonal_without_deception() {
        let g = two_player();
        let ds = sec5_ds();
        let (a, gm) = ([0.1, 0.12], [0.005, 0.0024]);
        let p = p_term(&g, &ds, 1, &a, &gm, &[0.0]).unwrap();
        let expect = 0.5 * (7.0 * 0.01 * 0.005 + 4.0 * 0.0144 * 0.0024);
        assert!((p - expect).abs() < 1e-16);
    }

    #[test]
    fn covariance_matches_case_by_case_rules() {
        // 4 players: 0 deceives {2,3}, 1 deceives {2}, 3 is a victim only
        let ds = DeceptionStructure::new(
            4,
            vec![
                Deceiver {
                    player: 0,
                    targets: vec![2, 3],
                    eps: 1.0,
                    j_ref: 0.0,
                },
                Deceiver {
                    player: 1,
                    targets: vec![2],
                    eps: 1.0,
                    j_ref: 0.0,
                },
            ],
        )
        .unwrap();
        let m = [0.3, 0.5, 0.7, 1.1];
        let d = [0.4, -0.9];
        let s = dither_covariance(&ds, &m, &d);
        let close = |a: f64, b: f64| assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        close(s[(0, 0)], m[0] + d[0] * d[0] * (m[2] + m[3]));
        close(s[(1, 1)], m[1] + d[1] * d[1] * m[2]);
        close(s[(2, 2)], m[2]);
        close(s[(0, 2)], d[0] * m[2]);
        close(s[(0, 3)], d[0] * m[3]);
        close(s[(1, 2)], d[1] * m[2]);
        close(s[(0, 1)], d[0] * d[1] * m[2]);
        close(s[(1, 3)], 0.0);
        close(s[(2, 3)], 0.0);
        assert_eq!(s, s.transpose());
    }

    #[test]
    fn averaged_equilibrium_start_stays_put() {
        let g = two_player();
        let ds = DeceptionStructure::none(2);
        let ne = g.pseudogradient().nash_equilibrium().unwrap();
        let settings = SimulationSettings {
            dt: 0.05,
            horizon: 100.0,
            record_stride: 100,
        };
        let traj = AveragedSystem::without_bias(&g, &ds)
            .integrate(ne.as_slice(), &[], &settings)
            .unwrap();
        for s in &traj.samples {
            assert!((s.u[0] - ne[0]).abs() < 1e-10 && (s.u[1] - ne[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn dither_gammas_for_example() {
        let gm = dither_gammas(&two_player()).unwrap();
        assert!((gm[0] - 0.005).abs() < 1e-12);
        assert!((gm[1] - (1.0 - (-0.0049f64).exp()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn custom_tuning_dimension_errors() {
        let g = two_player();
        let ds = sec5_ds();
        let bad = OuParams::new(5e-4, vec![1.0]).unwrap();
        assert!(matches!(
            ClosedLoop::new(&g, &ds, &bad, 1e-5),
            Err(DynamicsError::Dimension { .. })
        ));
    }
}
