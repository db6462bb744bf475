//! N-player games with quadratic costs `J_i(x) = ½xᵀA_i x + b_iᵀx + c_i`
//! and scalar actions, together with each player's seeking parameters.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::perturbation::DitherFunction;

/// Tolerance on `|A_ij - A_ji|` accepted as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GameError {
    #[error("a game needs at least two players, got {0}")]
    TooFewPlayers(usize),
    #[error("player {player}: {what} has wrong dimension (expected {expected}, got {got})")]
    Dimension {
        player: usize,
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("player {player}: cost matrix is not symmetric (max |A - Aᵀ| = {deviation:e})")]
    Asymmetric { player: usize, deviation: f64 },
    #[error("player {player}: {what} must be strictly positive, got {value}")]
    NonPositive {
        player: usize,
        what: &'static str,
        value: f64,
    },
    #[error("player index {index} out of range for a {n_players}-player game")]
    PlayerOutOfRange { index: usize, n_players: usize },
    #[error("non-finite input")]
    NonFinite,
    #[error("pseudogradient matrix is not strictly diagonally dominant with positive diagonal")]
    AssumptionViolated,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Cost parameters of one player.
#[derive(Debug, Clone, PartialEq)]
pub struct PlayerCost {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: f64,
}

/// Seeking parameters of one player: dither amplitude `a_i`, gain `k_i`,
/// dither shape `f_i` and OU noise scale `q_i`.
#[derive(Debug, Clone)]
pub struct PlayerTuning {
    pub amplitude: f64,
    pub gain: f64,
    pub dither: DitherFunction,
    pub noise_scale: f64,
}

#[derive(Debug, Clone)]
pub struct QuadraticGame {
    costs: Vec<PlayerCost>,
    tuning: Vec<PlayerTuning>,
}

impl QuadraticGame {
    pub fn new(costs: Vec<PlayerCost>, tuning: Vec<PlayerTuning>) -> Result<Self, GameError> {
        let n = costs.len();
        if n < 2 {
            return Err(GameError::TooFewPlayers(n));
        }
        if tuning.len() != n {
            return Err(GameError::Dimension {
                player: tuning.len().min(n),
                what: "tuning list",
                expected: n,
                got: tuning.len(),
            });
        }
        for (i, pc) in costs.iter().enumerate() {
            if pc.a.nrows() != n || pc.a.ncols() != n {
                return Err(GameError::Dimension {
                    player: i,
                    what: "cost matrix",
                    expected: n,
                    got: if pc.a.nrows() != n { pc.a.nrows() } else { pc.a.ncols() },
                });
            }
            if pc.b.len() != n {
                return Err(GameError::Dimension {
                    player: i,
                    what: "linear cost term",
                    expected: n,
                    got: pc.b.len(),
                });
            }
            if pc.a.iter().chain(pc.b.iter()).any(|v| !v.is_finite()) || !pc.c.is_finite() {
                return Err(GameError::NonFinite);
            }
            let deviation = (&pc.a - pc.a.transpose()).amax();
            if deviation > SYMMETRY_TOL {
                return Err(GameError::Asymmetric {
                    player: i,
                    deviation,
                });
            }
        }
        for (i, t) in tuning.iter().enumerate() {
            for (what, value) in [
                ("dither amplitude", t.amplitude),
                ("gain", t.gain),
                ("noise scale", t.noise_scale),
            ] {
                if !(value > 0.0 && value.is_finite()) {
                    return Err(GameError::NonPositive {
                        player: i,
                        what,
                        value,
                    });
                }
            }
        }
        Ok(Self { costs, tuning })
    }

    pub fn n_players(&self) -> usize {
        self.costs.len()
    }

    pub fn costs(&self) -> &[PlayerCost] {
        &self.costs
    }

    pub fn tuning(&self) -> &[PlayerTuning] {
        &self.tuning
    }

    pub fn player_cost(&self, i: usize) -> &PlayerCost {
        &self.costs[i]
    }

    pub fn amplitudes(&self) -> Vec<f64> {
        self.tuning.iter().map(|t| t.amplitude).collect()
    }

    pub fn gains(&self) -> Vec<f64> {
        self.tuning.iter().map(|t| t.gain).collect()
    }

    pub fn gain_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.gains()))
    }

    fn check_index(&self, i: usize) -> Result<(), GameError> {
        if i >= self.n_players() {
            return Err(GameError::PlayerOutOfRange {
                index: i,
                n_players: self.n_players(),
            });
        }
        Ok(())
    }

    /// Cost of player `i` (zero-based) at action profile `x`.
    pub fn cost(&self, i: usize, x: &[f64]) -> Result<f64, GameError> {
        self.check_index(i)?;
        if x.len() != self.n_players() {
            return Err(GameError::Dimension {
                player: i,
                what: "action profile",
                expected: self.n_players(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GameError::NonFinite);
        }
        Ok(self.cost_unchecked(i, x))
    }

    /// Cost evaluation without validation, for inner loops.
    #[inline]
    pub fn cost_unchecked(&self, i: usize, x: &[f64]) -> f64 {
        let pc = &self.costs[i];
        let n = x.len();
        let mut quad = 0.0;
        let mut lin = 0.0;
        for r in 0..n {
            let mut row = 0.0;
            for c in 0..n {
                row += pc.a[(r, c)] * x[c];
            }
            quad += x[r] * row;
            lin += pc.b[r] * x[r];
        }
        0.5 * quad + lin + pc.c
    }

    /// All players' costs at `x`.
    pub fn costs_at(&self, x: &[f64]) -> Result<Vec<f64>, GameError> {
        (0..self.n_players()).map(|i| self.cost(i, x)).collect()
    }

    /// `∇J_i(x) = A_i x + b_i`.
    pub fn cost_gradient(&self, i: usize, x: &DVector<f64>) -> Result<DVector<f64>, GameError> {
        self.check_index(i)?;
        let pc = &self.costs[i];
        Ok(&pc.a * x + &pc.b)
    }

    pub fn pseudogradient(&self) -> Pseudogradient {
        let n = self.n_players();
        let mut a = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        for (i, pc) in self.costs.iter().enumerate() {
            a.set_row(i, &pc.a.row(i));
            b[i] = pc.b[i];
        }
        Pseudogradient { a, b }
    }
}

/// The affine map `x ↦ A x + B` stacking each player's own-action gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Pseudogradient {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Pseudogradient {
    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b
    }

    /// The unique zero `x* = -A⁻¹B`.
    pub fn nash_equilibrium(&self) -> Result<DVector<f64>, GameError> {
        nash_equilibrium(self)
    }
}

/// Nash equilibrium of a quadratic game: the zero of its pseudogradient.
pub fn nash_equilibrium(pg: &Pseudogradient) -> Result<DVector<f64>, GameError> {
    Ok(linalg::solve(&pg.a, &(-&pg.b))?)
}

/// Strict diagonal dominance with positive diagonal.
pub fn check_assumption_diag_dominant(a: &DMatrix<f64>) -> bool {
    linalg::is_strictly_diag_dominant_positive(a)
}

pub fn is_hurwitz(m: &DMatrix<f64>) -> Result<bool, GameError> {
    Ok(linalg::is_hurwitz(m)?)
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn costs_at_nominal_equilibrium() {
        let g = two_player();
        assert!((g.cost(0, &[-1.0, -1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((g.cost(1, &[-1.0, -1.0]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_cost_at_origin() {
        let costs = (0..3)
            .map(|_| PlayerCost {
                a: DMatrix::identity(3, 3),
                b: DVector::zeros(3),
                c: 0.0,
            })
            .collect();
        let g = QuadraticGame::new(costs, unit_tuning(3)).unwrap();
        assert_eq!(g.cost(2, &[0.0; 3]).unwrap(), 0.0);
        let pg = g.pseudogradient();
        assert_eq!(pg.a, DMatrix::identity(3, 3));
        assert_eq!(pg.b, DVector::zeros(3));
        assert_eq!(nash_equilibrium(&pg).unwrap(), DVector::zeros(3));
    }

    #[test]
    fn cost_errors() {
        let g = two_player();
        assert!(matches!(
            g.cost(2, &[0.0, 0.0]),
            Err(GameError::PlayerOutOfRange { .. })
        ));
        assert_eq!(g.cost(0, &[f64::NAN, 0.0]), Err(GameError::NonFinite));
        assert!(matches!(
            g.cost(0, &[0.0]),
            Err(GameError::Dimension { .. })
        ));
    }

    #[test]
    fn pseudogradient_of_example() {
        let pg = two_player().pseudogradient();
        assert_eq!(pg.a, DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 2.0, 4.0]));
        assert_eq!(pg.b, DVector::from_vec(vec![4.0, 6.0]));
        let x = nash_equilibrium(&pg).unwrap();
        assert!((x[0] + 1.0).abs() < 1e-12 && (x[1] + 1.0).abs() < 1e-12);
        assert!(check_assumption_diag_dominant(&pg.a));
    }

    #[test]
    fn construction_rejects_bad_games() {
        let mut costs = two_player().costs().to_vec();
        costs[0].a[(0, 1)] = 1.5;
        assert!(matches!(
            QuadraticGame::new(costs, two_player().tuning().to_vec()),
            Err(GameError::Asymmetric { player: 0, .. })
        ));

        let one = vec![two_player().costs()[0].clone()];
        assert_eq!(
            QuadraticGame::new(one, unit_tuning(1)).unwrap_err(),
            GameError::TooFewPlayers(1)
        );

        let mut tuning = two_player().tuning().to_vec();
        tuning[1].gain = 0.0;
        assert!(matches!(
            QuadraticGame::new(two_player().costs().to_vec(), tuning),
            Err(GameError::NonPositive { player: 1, .. })
        ));
    }

    #[test]
    fn singular_pseudogradient_is_reported() {
        let pg = Pseudogradient {
            a: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]),
            b: DVector::from_vec(vec![1.0, 1.0]),
        };
        assert!(matches!(
            nash_equilibrium(&pg),
            Err(GameError::Linalg(LinalgError::Singular { .. }))
        ));
    }

    fn random_game(n: usize, entries: &[f64]) -> QuadraticGame {
        let mut it = entries.iter().copied().cycle();
        let costs = (0..n)
            .map(|_| {
                let mut a = DMatrix::zeros(n, n);
                for r in 0..n {
                    for c in r..n {
                        let v = it.next().unwrap();
                        a[(r, c)] = v;
                        a[(c, r)] = v;
                    }
                }
                let b = DVector::from_fn(n, |_, _| it.next().unwrap());
                PlayerCost { a, b, c: it.next().unwrap() }
            })
            .collect();
        QuadraticGame::new(costs, unit_tuning(n)).unwrap()
    }

    proptest! {
        #[test]
        fn central_differences_match_gradient(
            entries in proptest::collection::vec(-5.0f64..5.0, 40),
            x in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            let g = random_game(3, &entries);
            let xv = DVector::from_vec(x.clone());
            for i in 0..3 {
                let grad = g.cost_gradient(i, &xv).unwrap();
                for j in 0..3 {
                    let h = 1e-4;
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    let fd = (g.cost(i, &xp).unwrap() - g.cost(i, &xm).unwrap()) / (2.0 * h);
                    prop_assert!((fd - grad[j]).abs() <= 1e-6 * (1.0 + grad[j].abs()));
                }
            }
            // pseudogradient row i is player i's own-action derivative
            let pg = g.pseudogradient();
            let own = pg.eval(&xv);
            for i in 0..3 {
                prop_assert!((own[i] - g.cost_gradient(i, &xv).unwrap()[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn nash_residual_small(
            off in proptest::collection::vec(-1.0f64..1.0, 12),
            b in proptest::collection::vec(-10.0f64..10.0, 4),
        ) {
            let n = 4;
            let mut a = DMatrix::from_fn(n, n, |r, c| if r == c { 0.0 } else { off[r * 3 + c.min(r) % 3] });
            for i in 0..n {
                let s: f64 = (0..n).filter(|&j| j != i).map(|j| a[(i, j)].abs()).sum();
                a[(i, i)] = s + 0.5;
            }
            let pg = Pseudogradient { a, b: DVector::from_vec(b) };
            let x = nash_equilibrium(&pg).unwrap();
            let res = pg.eval(&x).norm();
            prop_assert!(res <= 1e-10 * (1.0 + pg.b.norm()));
        }
    }
}
