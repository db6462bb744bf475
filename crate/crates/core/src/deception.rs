//! Deception topology and the frozen-gain analysis built on it: perturbed
//! pseudogradients, the diagonal-dominance stability radius, deceptive
//! equilibria and the attainability problem for reference payoffs.
//!
//! Players are indexed from zero. Deceptive gains live in a vector with one
//! slot per deceiver, in the order the deceivers were declared.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::game::{check_assumption_diag_dominant, GameError, QuadraticGame};
use crate::linalg::{self, LinalgError};

/// Payoff residual accepted by [`solve_attainability`].
pub const ATTAIN_TOL: f64 = 1e-8;
/// Additional random starts tried before giving up.
pub const EXTRA_STARTS: usize = 8;

const NEWTON_MAX_ITER: usize = 100;
const ARMIJO_C: f64 = 1e-4;
const MIN_STEP: f64 = 1e-10;
const START_SEED: u64 = 0x005e_ed0f_de1a;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeceptionError {
    #[error("deception structure needs at least one deceiver")]
    NoDeceivers,
    #[error("player {player} out of range for a {n_players}-player game")]
    PlayerOutOfRange { player: usize, n_players: usize },
    #[error("player {0} is listed as a deceiver more than once")]
    DuplicateDeceiver(usize),
    #[error("player {0} cannot deceive itself")]
    SelfTarget(usize),
    #[error("deceiver {0} has no targets")]
    EmptyTargets(usize),
    #[error("deceiver {player}: {what} must be finite{extra}, got {value}")]
    BadParameter {
        player: usize,
        what: &'static str,
        extra: &'static str,
        value: f64,
    },
    #[error("deceptive gain vector has length {got}, expected {expected}")]
    DeltaDimension { expected: usize, got: usize },
    #[error("deception structure is for {structure} players, game has {game}")]
    PlayerCountMismatch { structure: usize, game: usize },
    #[error("pseudogradient matrix is not strictly diagonally dominant with positive diagonal")]
    AssumptionViolated,
    #[error("Newton Jacobian is singular at δ = {delta:?}")]
    SingularJacobian { delta: Vec<f64> },
    #[error("reference payoffs not attainable inside the stability set (best residual {best_residual:e})")]
    NotAttainable { best_residual: f64 },
    #[error(transparent)]
    Game(#[from] GameError),
}

impl From<LinalgError> for DeceptionError {
    fn from(e: LinalgError) -> Self {
        DeceptionError::Game(GameError::Linalg(e))
    }
}

/// One deceptive player: who it deceives, its adaptation gain (the product
/// `ε·ε_i`) and its reference payoff.
#[derive(Debug, Clone, PartialEq)]
pub struct Deceiver {
    pub player: usize,
    pub targets: Vec<usize>,
    pub eps: f64,
    pub j_ref: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeceptionStructure {
    n_players: usize,
    deceivers: Vec<Deceiver>,
    slot_of: Vec<Option<usize>>,
    deceived_by: Vec<Vec<usize>>,
    victims: Vec<usize>,
}

impl DeceptionStructure {
    pub fn new(n_players: usize, deceivers: Vec<Deceiver>) -> Result<Self, DeceptionError> {
        if deceivers.is_empty() {
            return Err(DeceptionError::NoDeceivers);
        }
        Self::build(n_players, deceivers)
    }

    /// A structure with no deceivers, for plain (non-deceptive) seeking.
    pub fn none(n_players: usize) -> Self {
        Self::build(n_players, Vec::new()).expect("empty structure is always valid")
    }

    fn build(n_players: usize, mut deceivers: Vec<Deceiver>) -> Result<Self, DeceptionError> {
        let mut slot_of = vec![None; n_players];
        let mut deceived_by = vec![Vec::new(); n_players];
        for (slot, d) in deceivers.iter_mut().enumerate() {
            let range = |p: usize| {
                if p >= n_players {
                    Err(DeceptionError::PlayerOutOfRange {
                        player: p,
                        n_players,
                    })
                } else {
                    Ok(())
                }
            };
            range(d.player)?;
            if slot_of[d.player].is_some() {
                return Err(DeceptionError::DuplicateDeceiver(d.player));
            }
            slot_of[d.player] = Some(slot);
            if d.targets.is_empty() {
                return Err(DeceptionError::EmptyTargets(d.player));
            }
            d.targets.sort_unstable();
            d.targets.dedup();
            for &t in &d.targets {
                range(t)?;
                if t == d.player {
                    return Err(DeceptionError::SelfTarget(d.player));
                }
                deceived_by[t].push(slot);
            }
            if !(d.eps >= 0.0 && d.eps.is_finite()) {
                return Err(DeceptionError::BadParameter {
                    player: d.player,
                    what: "adaptation gain",
                    extra: " and non-negative",
                    value: d.eps,
                });
            }
            if !d.j_ref.is_finite() {
                return Err(DeceptionError::BadParameter {
                    player: d.player,
                    what: "reference payoff",
                    extra: "",
                    value: d.j_ref,
                });
            }
        }
        let victims = (0..n_players)
            .filter(|&j| !deceived_by[j].is_empty())
            .collect();
        Ok(Self {
            n_players,
            deceivers,
            slot_of,
            deceived_by,
            victims,
        })
    }

    pub fn n_players(&self) -> usize {
        self.n_players
    }

    /// Number of deceivers `n` (length of the δ vector).
    pub fn n_deceivers(&self) -> usize {
        self.deceivers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deceivers.is_empty()
    }

    pub fn deceivers(&self) -> &[Deceiver] {
        &self.deceivers
    }

    /// δ-slot of `player` if it deceives anyone.
    pub fn slot_of(&self, player: usize) -> Option<usize> {
        self.slot_of[player]
    }

    /// Slots of the deceivers targeting `player` (the set `K_j`).
    pub fn deceived_by(&self, player: usize) -> &[usize] {
        &self.deceived_by[player]
    }

    /// Players deceived by at least one deceiver, ascending.
    pub fn victims(&self) -> &[usize] {
        &self.victims
    }

    pub fn j_refs(&self) -> Vec<f64> {
        self.deceivers.iter().map(|d| d.j_ref).collect()
    }

    pub fn eps(&self) -> Vec<f64> {
        self.deceivers.iter().map(|d| d.eps).collect()
    }

    fn check_game(&self, game: &QuadraticGame) -> Result<(), DeceptionError> {
        if game.n_players() != self.n_players {
            return Err(DeceptionError::PlayerCountMismatch {
                structure: self.n_players,
                game: game.n_players(),
            });
        }
        Ok(())
    }

    fn check_delta(&self, delta: &[f64]) -> Result<(), DeceptionError> {
        if delta.len() != self.n_deceivers() {
            return Err(DeceptionError::DeltaDimension {
                expected: self.n_deceivers(),
                got: delta.len(),
            });
        }
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(GameError::NonFinite.into());
        }
        Ok(())
    }
}

/// Pseudogradient seen by the players when deceptive gains are frozen at `delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedPseudogradient {
    pub a_bar: DMatrix<f64>,
    pub b_bar: DVector<f64>,
    pub delta: Vec<f64>,
}

/// Victim rows pick up `δ_k` times the deceiver's row of the victim's own
/// cost matrix, for every deceiver `k` targeting them.
pub fn perturbed_pseudogradient(
    game: &QuadraticGame,
    ds: &DeceptionStructure,
    delta: &[f64],
) -> Result<PerturbedPseudogradient, DeceptionError> {
    ds.check_game(game)?;
    ds.check_delta(delta)?;
    let pg = game.pseudogradient();
    let mut a_bar = pg.a;
    let mut b_bar = pg.b;
    for &i in ds.victims() {
        let own = game.player_cost(i);
        for &slot in ds.deceived_by(i) {
            let k = ds.deceivers[slot].player;
            let d = delta[slot];
            for j in 0..ds.n_players {
                a_bar[(i, j)] += d * own.a[(k, j)];
            }
            b_bar[i] += d * own.b[k];
        }
    }
    Ok(PerturbedPseudogradient {
        a_bar,
        b_bar,
        delta: delta.to_vec(),
    })
}

fn ratio(p: f64, q: f64) -> f64 {
    if q == 0.0 && p > 0.0 {
        f64::INFINITY
    } else {
        p / q
    }
}

/// Radius `r` of a δ-ball guaranteed to lie inside the stability set, from
/// Gershgorin discs of the perturbed pseudogradient. `+inf` when no victim
/// row can be perturbed.
pub fn stability_radius(
    game: &QuadraticGame,
    ds: &DeceptionStructure,
) -> Result<f64, DeceptionError> {
    ds.check_game(game)?;
    let a = game.pseudogradient().a;
    if !check_assumption_diag_dominant(&a) {
        return Err(DeceptionError::AssumptionViolated);
    }
    let n = ds.n_players;
    let mut r = f64::INFINITY;
    for &i in ds.victims() {
        let own = game.player_cost(i);
        let margin = a[(i, i)] - (0..n).filter(|&j| j != i).map(|j| a[(i, j)].abs()).sum::<f64>();
        let mut row_mass = 0.0;
        let mut diag_mass = 0.0;
        for &slot in ds.deceived_by(i) {
            let k = ds.deceivers[slot].player;
            row_mass += (0..n).map(|j| own.a[(k, j)].abs()).sum::<f64>();
            diag_mass += own.a[(k, i)].abs();
        }
        r = r.min(ratio(margin, row_mass)).min(ratio(a[(i, i)], diag_mass));
    }
    Ok(r)
}

/// Whether `-diag(gains)·Ā(δ)` is Hurwitz.
pub fn in_stability_set(
    game: &QuadraticGame,
    ds: &DeceptionStructure,
    delta: &[f64],
    gains: &[f64],
) -> Result<bool, DeceptionError> {
    if gains.len() != game.n_players() {
        return Err(GameError::Dimension {
            player: 0,
            what: "gain vector",
            expected: game.n_players(),
            got: gains.len(),
        }
        .into());
    }
    if let Some(&k) = gains.iter().find(|k| !(**k > 0.0 && k.is_finite())) {
        return Err(GameError::NonPositive {
            player: 0,
            what: "gain",
            value: k,
        }
        .into());
    }
    let ppg = perturbed_pseudogradient(game, ds, delta)?;
    let k = DMatrix::from_diagonal(&DVector::from_column_slice(gains));
    Ok(linalg::is_hurwitz(&(-(k * ppg.a_bar)))?)
}

/// Closed-loop matrix `-diag(k)·Ā(δ)` with the game's own gains.
pub fn closed_loop_matrix(
    game: &QuadraticGame,
    ds: &DeceptionStructure,
    delta: &[f64],
) -> Result<DMatrix<f64>, DeceptionError> {
    let ppg = perturbed_pseudogradient(game, ds, delta)?;
    Ok(-(game.gain_matrix() * ppg.a_bar))
}

/// Operating point `x_δ = -Ā(δ)⁻¹B̄(δ)` the deceived dynamics settle at.
pub fn deceptive_equilibrium(
    game: &QuadraticGame,
    ds: &DeceptionStructure,
    delta: &[f64],
) -> Result<DVector<f64>, DeceptionError> {
    let ppg = perturbed_pseudogradient(game, ds, delta)?;
    Ok(linalg::solve(&ppg.a_bar, &(-&ppg.b_bar))?)
}

fn deceiver_payoffs(
    game: &QuadraticGame,
    ds: &DeceptionStructure,
    delta: &[f64],
) -> Result<Vec<f64>, DeceptionError> {
    let x = deceptive_equilibrium(game, ds, delta)?;
    Ok(ds
        .deceivers
        .iter()
        .map(|d| game.cost_unchecked(d.player, x.as_slice()))
        .collect())
}

/// `ξ_k(δ) = ε_{d_k}·J_{d_k}(x_δ)` for deceiver slot `k`.
pub fn xi(
    game: &QuadraticGame,
    ds: &DeceptionStructure,
    delta: &[f64],
    slot: usize,
) -> Result<f64, DeceptionError> {
    let d = ds
        .deceivers
        .get(slot)
        .ok_or(DeceptionError::PlayerOutOfRange {
            player: slot,
            n_players: ds.n_deceivers(),
        })?;
    let x = deceptive_equilibrium(game, ds, delta)?;
    Ok(d.eps * game.cost(d.player, x.as_slice())?)
}

/// Jacobian of `δ ↦ v(δ)` by Richardson-extrapolated central differences.
/// Entry `(k, j)` is `∂v_k/∂δ_j`.
fn fd_jacobian<F>(delta: &[f64], mut v: F) -> Result<DMatrix<f64>, DeceptionError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, DeceptionError>,
{
    let n = delta.len();
    let mut jac = DMatrix::zeros(n, n);
    let mut probe = delta.to_vec();
    for j in 0..n {
        let h = f64::max(1e-6, 1e-6 * delta[j].abs());
        let mut central = |step: f64| -> Result<Vec<f64>, DeceptionError> {
            probe[j] = delta[j] + step;
            let plus = v(&probe)?;
            probe[j] = delta[j] - step;
            let minus = v(&probe)?;
            probe[j] = delta[j];
            Ok(plus
                .iter()
                .zip(&minus)
                .map(|(p, m)| (p - m) / (2.0 * step))
                .collect())
        };
        let coarse = central(h)?;
        let fine = central(0.5 * h)?;
        for k in 0..n {
            jac[(k, j)] = (4.0 * fine[k] - coarse[k]) / 3.0;
        }
    }
    Ok(jac)
}

/// Sensitivity matrix with entries `Λ_jk = ∂ξ_k/∂δ_j`.
pub fn lambda_matrix(
    game: &QuadraticGame,
    ds: &DeceptionStructure,
    delta: &[f64],
) -> Result<DMatrix<f64>, DeceptionError> {
    ds.check_delta(delta)?;
    let eps = ds.eps();
    let jac = fd_jacobian(delta, |d| {
        Ok(deceiver_payoffs(game, ds, d)?
            .iter()
            .zip(&eps)
            .map(|(j, e)| e * j)
            .collect())
    })?;
    Ok(jac.transpose())
}

/// Outcome of a successful attainability solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Attainment {
    pub delta_star: Vec<f64>,
    /// Whether the sensitivity matrix Λ(δ*) is Hurwitz.
    pub lambda_hurwitz: bool,
    pub x_delta: DVector<f64>,
    pub lambda: DMatrix<f64>,
    pub residual: f64,
    /// 0 for the start at δ = 0, otherwise the index of the random restart.
    pub start: usize,
    pub iterations: usize,
}

enum NewtonOutcome {
    Converged { delta: Vec<f64>, residual: f64, iterations: usize },
    Failed { residual: f64 },
}

fn newton_from(
    game: &QuadraticGame,
    ds: &DeceptionStructure,
    j_ref: &[f64],
    start: Vec<f64>,
    gains: &[f64],
) -> Result<NewtonOutcome, DeceptionError> {
    let residual_at = |d: &[f64]| -> Option<Vec<f64>> {
        match in_stability_set(game, ds, d, gains) {
            Ok(true) => {}
            _ => return None,
        }
        let payoffs = deceiver_payoffs(game, ds, d).ok()?;
        let f: Vec<f64> = payoffs.iter().zip(j_ref).map(|(p, r)| p - r).collect();
        f.iter().all(|v| v.is_finite()).then_some(f)
    };
    let max_abs = |f: &[f64]| f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let merit = |f: &[f64]| 0.5 * f.iter().map(|v| v * v).sum::<f64>();

    let mut delta = start;
    let Some(mut f) = residual_at(&delta) else {
        return Ok(NewtonOutcome::Failed {
            residual: f64::INFINITY,
        });
    };
    for iter in 0..NEWTON_MAX_ITER {
        let res = max_abs(&f);
        if res <= ATTAIN_TOL * 1e-3 {
            return Ok(NewtonOutcome::Converged {
                delta,
                residual: res,
                iterations: iter,
            });
        }
        let jac = fd_jacobian(&delta, |d| {
            let p = deceiver_payoffs(game, ds, d)?;
            Ok(p.iter().zip(j_ref).map(|(p, r)| p - r).collect())
        })?;
        let rhs = -DVector::from_column_slice(&f);
        let step = match linalg::solve(&jac, &rhs) {
            Ok(s) => s,
            Err(_) => return Err(DeceptionError::SingularJacobian { delta }),
        };
        let phi = merit(&f);
        let mut t = 1.0;
        let mut accepted = None;
        while t >= MIN_STEP {
            let trial: Vec<f64> = delta.iter().zip(step.iter()).map(|(d, s)| d + t * s).collect();
            if let Some(ft) = residual_at(&trial) {
                if merit(&ft) <= (1.0 - 2.0 * ARMIJO_C * t) * phi {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((d, ft)) => {
                delta = d;
                f = ft;
            }
            None => {
                // no descent left; accept if already within tolerance
                return Ok(if res <= ATTAIN_TOL {
                    NewtonOutcome::Converged {
                        delta,
                        residual: res,
                        iterations: iter,
                    }
                } else {
                    NewtonOutcome::Failed { residual: res }
                });
            }
        }
    }
    let res = max_abs(&f);
    Ok(if res <= ATTAIN_TOL {
        NewtonOutcome::Converged {
            delta,
            residual: res,
            iterations: NEWTON_MAX_ITER,
        }
    } else {
        NewtonOutcome::Failed { residual: res }
    })
}

/// Random start uniformly distributed in the ball of radius `radius`.
fn ball_sample(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vec<f64> {
    let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let u: f64 = rng.random();
    let scale = radius * u.powf(1.0 / dim as f64) / norm;
    dir.into_iter().map(|v| v * scale).collect()
}

/// Finds deceptive gains `δ*` in the stability set at which every deceiver's
/// payoff at `x_δ*` equals its reference, by damped Newton from `δ = 0`
/// followed by [`EXTRA_STARTS`] seeded random restarts inside the stability
/// ball.
pub fn solve_attainability(
    game: &QuadraticGame,
    ds: &DeceptionStructure,
    j_ref: &[f64],
) -> Result<Attainment, DeceptionError> {
    ds.check_game(game)?;
    if ds.is_empty() {
        return Err(DeceptionError::NoDeceivers);
    }
    if j_ref.len() != ds.n_deceivers() {
        return Err(DeceptionError::DeltaDimension {
            expected: ds.n_deceivers(),
            got: j_ref.len(),
        });
    }
    let radius = stability_radius(game, ds)?;
    let ball = if radius.is_finite() { 0.99 * radius } else { 1.0 };
    let gains = game.gains();
    let n = ds.n_deceivers();
    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED);
    let mut best_residual = f64::INFINITY;

    for start in 0..=EXTRA_STARTS {
        let init = if start == 0 {
            vec![0.0; n]
        } else {
            ball_sample(&mut rng, n, ball)
        };
        match newton_from(game, ds, j_ref, init, &gains) {
            Ok(NewtonOutcome::Converged {
                delta,
                residual,
                iterations,
            }) => {
                let x_delta = deceptive_equilibrium(game, ds, &delta)?;
                let lambda = lambda_matrix(game, ds, &delta)?;
                let lambda_hurwitz = linalg::is_hurwitz(&lambda)?;
                return Ok(Attainment {
                    delta_star: delta,
                    lambda_hurwitz,
                    x_delta,
                    lambda,
                    residual,
                    start,
                    iterations,
                });
            }
            Ok(NewtonOutcome::Failed { residual }) => best_residual = best_residual.min(residual),
            // singular Jacobian: move on to the next start
            Err(DeceptionError::SingularJacobian { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Err(DeceptionError::NotAttainable { best_residual })
}
