//! JSON scenario files.
//!
//! A scenario bundles the game (inline, or a path relative to the scenario
//! file), the deception structure, the dither time scales, the integration
//! settings and an optional experiment plan. Unknown fields are rejected.
//! Player indices in files are 1-based.
//!
//! ```json
//! {
//!   "game": {
//!     "n_players": 2,
//!     "costs": [
//!       { "A": [[3, 1], [1, 5]], "b": [4, 2], "c": 0 },
//!       { "A": [7, 2, 2, 4], "b": [1, 6], "c": 0 }
//!     ],
//!     "tuning": [
//!       { "a": 0.1, "k": 0.06, "q": 0.1, "dither": "sat" },
//!       { "a": 0.12, "k": 0.05, "q": 0.07, "dither": "sin" }
//!     ]
//!   },
//!   "deception": { "deceivers": [{ "player": 2, "targets": [1], "eps": 0.001, "j_ref": -2 }] },
//!   "ou": { "theta": 0.0005, "theta_bar": [1, 0.8] },
//!   "dynamics": { "dt": 4e-5, "horizon": 600, "record_stride": 1000 }
//! }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deception::{Deceiver, DeceptionError, DeceptionStructure};
use crate::dynamics::{InitialState, SimulationSettings};
use crate::experiment::{ExperimentPlan, Scenario};
use crate::game::{GameError, PlayerCost, PlayerTuning, QuadraticGame};
use crate::perturbation::{DitherKind, OuParams, PerturbationError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{origin}:{line}:{column}: {message}")]
    Parse {
        origin: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Deception(#[from] DeceptionError),
    #[error(transparent)]
    Perturbation(#[from] PerturbationError),
}

impl ConfigError {
    fn parse(origin: &str, e: serde_json::Error) -> Self {
        ConfigError::Parse {
            origin: origin.to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

/// A matrix written either as nested rows or flat in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Rows(Vec<Vec<f64>>),
    Flat(Vec<f64>),
}

impl MatrixSpec {
    fn to_matrix(&self, n: usize, player: usize) -> Result<DMatrix<f64>, ConfigError> {
        let bad = || {
            ConfigError::Invalid(format!(
                "costs[{}].A must be {n}x{n} (nested rows or {} row-major entries)",
                player + 1,
                n * n
            ))
        };
        match self {
            MatrixSpec::Rows(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(bad());
                }
                Ok(DMatrix::from_fn(n, n, |r, c| rows[r][c]))
            }
            MatrixSpec::Flat(v) => {
                if v.len() != n * n {
                    return Err(bad());
                }
                Ok(DMatrix::from_row_slice(n, n, v))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    #[serde(rename = "A")]
    pub a: MatrixSpec,
    pub b: Vec<f64>,
    #[serde(default)]
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningSpec {
    pub a: f64,
    pub k: f64,
    pub q: f64,
    pub dither: DitherKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameSpec {
    pub n_players: usize,
    pub costs: Vec<CostSpec>,
    pub tuning: Vec<TuningSpec>,
}

impl GameSpec {
    pub fn build(&self) -> Result<QuadraticGame, ConfigError> {
        let n = self.n_players;
        if self.costs.len() != n || self.tuning.len() != n {
            return Err(ConfigError::Invalid(format!(
                "n_players is {n} but costs has {} entries and tuning has {}",
                self.costs.len(),
                self.tuning.len()
            )));
        }
        let costs = self
            .costs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if c.b.len() != n {
                    return Err(ConfigError::Invalid(format!(
                        "costs[{}].b has {} entries, expected {n}",
                        i + 1,
                        c.b.len()
                    )));
                }
                Ok(PlayerCost {
                    a: c.a.to_matrix(n, i)?,
                    b: DVector::from_column_slice(&c.b),
                    c: c.c,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let tuning = self
            .tuning
            .iter()
            .map(|t| PlayerTuning {
                amplitude: t.a,
                gain: t.k,
                dither: t.dither.into(),
                noise_scale: t.q,
            })
            .collect();
        Ok(QuadraticGame::new(costs, tuning)?)
    }
}

/// The game inline or as a path to a separate game file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GameSource {
    Inline(GameSpec),
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeceiverSpec {
    pub player: usize,
    pub targets: Vec<usize>,
    /// The product `ε·ε_i`.
    pub eps: f64,
    pub j_ref: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeceptionSpec {
    #[serde(default)]
    pub deceivers: Vec<DeceiverSpec>,
}

impl DeceptionSpec {
    pub fn build(&self, n_players: usize) -> Result<DeceptionStructure, ConfigError> {
        if self.deceivers.is_empty() {
            return Ok(DeceptionStructure::none(n_players));
        }
        let zero_based = |p: usize, what: &str| {
            if p == 0 || p > n_players {
                Err(ConfigError::Invalid(format!(
                    "{what} {p} is not a player index in 1..={n_players}"
                )))
            } else {
                Ok(p - 1)
            }
        };
        let deceivers = self
            .deceivers
            .iter()
            .map(|d| {
                Ok(Deceiver {
                    player: zero_based(d.player, "deceiver")?,
                    targets: d
                        .targets
                        .iter()
                        .map(|&t| zero_based(t, "target"))
                        .collect::<Result<_, _>>()?,
                    eps: d.eps,
                    j_ref: d.j_ref,
                })
            })
            .collect::<Result<Vec<_>, ConfigError>>()?;
        Ok(DeceptionStructure::new(n_players, deceivers)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub u: Vec<f64>,
    #[serde(default)]
    pub delta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSpec {
    pub dt: f64,
    pub horizon: f64,
    #[serde(default = "default_stride")]
    pub record_stride: usize,
    /// Zero actions and gains with stationary dithers when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialSpec>,
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub game: GameSource,
    #[serde(default)]
    pub deception: DeceptionSpec,
    pub ou: OuParams,
    pub dynamics: DynamicsSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentPlan>,
}

impl ScenarioConfig {
    /// Reads a scenario and inlines a referenced game file.
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_str(&text, &path.display().to_string(), path.parent())
    }

    /// Parses scenario text. A game given as a path is resolved against
    /// `base_dir` and inlined.
    pub fn parse_str(text: &str, origin: &str, base_dir: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg: ScenarioConfig =
            serde_json::from_str(text).map_err(|e| ConfigError::parse(origin, e))?;
        if let GameSource::Path(p) = &cfg.game {
            let full = match base_dir {
                Some(dir) if p.is_relative() => dir.join(p),
                _ => p.clone(),
            };
            let game_text = fs::read_to_string(&full).map_err(|source| ConfigError::Io {
                path: full.clone(),
                source,
            })?;
            let spec: GameSpec = serde_json::from_str(&game_text)
                .map_err(|e| ConfigError::parse(&full.display().to_string(), e))?;
            cfg.game = GameSource::Inline(spec);
        }
        Ok(cfg)
    }

    pub fn game_spec(&self) -> Result<&GameSpec, ConfigError> {
        match &self.game {
            GameSource::Inline(g) => Ok(g),
            GameSource::Path(p) => Err(ConfigError::Invalid(format!(
                "game file {} has not been loaded",
                p.display()
            ))),
        }
    }

    pub fn build(&self) -> Result<Scenario, ConfigError> {
        let game = self.game_spec()?.build()?;
        let n = game.n_players();
        let deception = self.deception.build(n)?;
        self.ou.validate()?;
        if self.ou.theta_bar.len() != n {
            return Err(ConfigError::Invalid(format!(
                "ou.theta_bar has {} entries, expected {n}",
                self.ou.theta_bar.len()
            )));
        }
        let d = &self.dynamics;
        let initial = match &d.initial {
            Some(init) => InitialState {
                u: init.u.clone(),
                delta: init.delta.clone(),
                eta: init.eta.clone(),
            },
            None => InitialState::zero(&game, &deception),
        };
        if initial.u.len() != n || initial.delta.len() != deception.n_deceivers() {
            return Err(ConfigError::Invalid(format!(
                "dynamics.initial needs {n} entries in u and {} in delta",
                deception.n_deceivers()
            )));
        }
        if initial.eta.as_ref().is_some_and(|e| e.len() != n) {
            return Err(ConfigError::Invalid(format!(
                "dynamics.initial.eta needs {n} entries"
            )));
        }
        Ok(Scenario {
            game,
            deception,
            ou: self.ou.clone(),
            settings: SimulationSettings {
                dt: d.dt,
                horizon: d.horizon,
                record_stride: d.record_stride,
            },
            initial,
        })
    }

    /// Pretty JSON with the game inlined; parsing it back yields an equal
    /// config.
    pub fn dump(&self) -> String {
        serde_json::to_string_pretty(self).expect("config types always serialize")
    }
}
