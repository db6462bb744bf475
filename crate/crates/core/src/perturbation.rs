//! Ornstein–Uhlenbeck dither processes, the admissible dither shapes and the
//! normalization constant `γ = E[f(Z)²]` under the OU invariant law.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quadrature::{gauss_hermite, gauss_legendre};

/// Node count of the first Gauss–Hermite pass used by [`gamma`].
pub const GAMMA_BASE_NODES: usize = 64;
/// Node-doubling disagreement above which [`gamma`] keeps refining.
pub const GAMMA_TOLERANCE: f64 = 1e-9;
const GAMMA_MAX_NODES: usize = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerturbationError {
    #[error("time step must be positive and finite, got {0}")]
    BadTimeStep(f64),
    #[error("{name} must be positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("relative time scale of the first player must be exactly 1, got {0}")]
    FirstScaleNotUnit(f64),
    #[error("quadrature did not converge: last node doubling changed the value by {difference:e}")]
    QuadratureNonConvergence { difference: f64 },
    #[error("custom dither `{name}` is not odd: f({s}) + f(-{s}) = {residual:e}")]
    NotOdd { name: String, s: f64, residual: f64 },
    #[error("custom dither `{name}` exceeds its bound {bound} at s = {s} (|f| = {value})")]
    Unbounded {
        name: String,
        bound: f64,
        s: f64,
        value: f64,
    },
}

/// A user-supplied bounded odd dither.
#[derive(Clone)]
pub struct CustomDither {
    name: String,
    bound: f64,
    eval: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    kinks: Vec<f64>,
}

impl CustomDither {
    /// Wraps `eval`, checking oddness on 1000 pseudo-random points and the
    /// bound on a logarithmic sweep out to |s| = 1e6. `kinks` lists points
    /// where `eval` is not smooth; they are used as quadrature breakpoints.
    pub fn new<F>(
        name: impl Into<String>,
        bound: f64,
        eval: F,
        kinks: Vec<f64>,
    ) -> Result<Self, PerturbationError>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let name = name.into();
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(PerturbationError::NonPositive {
                name: "dither bound",
                value: bound,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x0dd);
        for _ in 0..1000 {
            let s: f64 = rng.random_range(-50.0..50.0);
            let residual = eval(s) + eval(-s);
            if !(residual.abs() <= 1e-12) {
                return Err(PerturbationError::NotOdd { name, s, residual });
            }
        }
        for k in 0..=12_000 {
            let mag = 10f64.powf(-6.0 + 12.0 * k as f64 / 12_000.0);
            for s in [mag, -mag] {
                let value = eval(s).abs();
                if !(value <= bound) {
                    return Err(PerturbationError::Unbounded {
                        name,
                        bound,
                        s,
                        value,
                    });
                }
            }
        }
        Ok(Self {
            name,
            bound,
            eval: Arc::new(eval),
            kinks,
        })
    }
}

impl fmt::Debug for CustomDither {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomDither")
            .field("name", &self.name)
            .field("bound", &self.bound)
            .finish_non_exhaustive()
    }
}

/// Bounded odd function shaping a player's dither signal.
#[derive(Debug, Clone)]
pub enum DitherFunction {
    Sine,
    Saturation,
    Custom(CustomDither),
}

impl DitherFunction {
    #[inline]
    pub fn eval(&self, s: f64) -> f64 {
        match self {
            DitherFunction::Sine => s.sin(),
            DitherFunction::Saturation => s.clamp(-1.0, 1.0),
            DitherFunction::Custom(c) => (c.eval)(s),
        }
    }

    pub fn bound(&self) -> f64 {
        match self {
            DitherFunction::Sine | DitherFunction::Saturation => 1.0,
            DitherFunction::Custom(c) => c.bound,
        }
    }

    /// Identifier used in config files.
    pub fn id(&self) -> &str {
        match self {
            DitherFunction::Sine => "sin",
            DitherFunction::Saturation => "sat",
            DitherFunction::Custom(c) => &c.name,
        }
    }

    fn kinks(&self) -> &[f64] {
        match self {
            DitherFunction::Sine => &[],
            DitherFunction::Saturation => &[-1.0, 1.0],
            DitherFunction::Custom(c) => &c.kinks,
        }
    }
}

/// Dither shape as it appears in scenario files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DitherKind {
    #[serde(rename = "sin")]
    Sine,
    #[serde(rename = "sat")]
    Saturation,
}

impl From<DitherKind> for DitherFunction {
    fn from(k: DitherKind) -> Self {
        match k {
            DitherKind::Sine => DitherFunction::Sine,
            DitherKind::Saturation => DitherFunction::Saturation,
        }
    }
}

/// Time scales of the dither processes: player `i` uses `theta * theta_bar[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuParams {
    pub theta: f64,
    pub theta_bar: Vec<f64>,
}

impl OuParams {
    pub fn new(theta: f64, theta_bar: Vec<f64>) -> Result<Self, PerturbationError> {
        let p = Self { theta, theta_bar };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PerturbationError> {
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(PerturbationError::NonPositive {
                name: "theta",
                value: self.theta,
            });
        }
        for &tb in &self.theta_bar {
            if !(tb > 0.0 && tb.is_finite()) {
                return Err(PerturbationError::NonPositive {
                    name: "theta_bar entry",
                    value: tb,
                });
            }
        }
        match self.theta_bar.first() {
            Some(&first) if first != 1.0 => Err(PerturbationError::FirstScaleNotUnit(first)),
            _ => Ok(()),
        }
    }

    /// Per-player time scale `ϑ_i = ϑ·ϑ̄_i`.
    pub fn time_scale(&self, player: usize) -> f64 {
        self.theta * self.theta_bar[player]
    }

    pub fn min_time_scale(&self) -> f64 {
        self.theta_bar
            .iter()
            .map(|tb| self.theta * tb)
            .fold(f64::INFINITY, f64::min)
    }

    /// Same relative scales with a different global time scale.
    pub fn with_theta(&self, theta: f64) -> Self {
        Self {
            theta,
            theta_bar: self.theta_bar.clone(),
        }
    }
}

/// Exact transition of `dη = -(1/ϑ)η dt + (q/√ϑ) dW` over `dt`.
pub fn ou_step(
    eta: f64,
    time_scale: f64,
    q: f64,
    dt: f64,
    noise: f64,
) -> Result<f64, PerturbationError> {
    Ok(OuTransition::new(time_scale, q, dt)?.advance(eta, noise))
}

/// Precomputed exact OU transition for a fixed step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuTransition {
    decay: f64,
    spread: f64,
}

impl OuTransition {
    pub fn new(time_scale: f64, q: f64, dt: f64) -> Result<Self, PerturbationError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(PerturbationError::BadTimeStep(dt));
        }
        if !(time_scale > 0.0 && time_scale.is_finite()) {
            return Err(PerturbationError::NonPositive {
                name: "OU time scale",
                value: time_scale,
            });
        }
        if !(q > 0.0 && q.is_finite()) {
            return Err(PerturbationError::NonPositive {
                name: "q",
                value: q,
            });
        }
        let decay = (-dt / time_scale).exp();
        // 1 - e^{-2dt/ϑ} without cancellation for small dt
        let spread = (0.5 * q * q * -(-2.0 * dt / time_scale).exp_m1()).sqrt();
        Ok(Self { decay, spread })
    }

    #[inline]
    pub fn advance(&self, eta: f64, noise: f64) -> f64 {
        eta * self.decay + self.spread * noise
    }
}

/// Standard deviation of the OU invariant law, `q/√2`.
pub fn stationary_sd(q: f64) -> f64 {
    q / std::f64::consts::SQRT_2
}

/// `γ = ∫ f(s)² (1/(√π q)) e^{-s²/q²} ds`.
///
/// Smooth dithers use Gauss–Hermite with node doubling starting at 64 nodes.
/// Hermite stalls near 1e-8 on kinked integrands, so dithers with kinks use a
/// composite Gauss–Legendre rule split at the kinks, with its own doubling
/// check.
pub fn gamma(f: &DitherFunction, q: f64) -> Result<f64, PerturbationError> {
    if !(q > 0.0 && q.is_finite()) {
        return Err(PerturbationError::NonPositive {
            name: "q",
            value: q,
        });
    }
    if !f.kinks().is_empty() {
        return piecewise_gamma(f, q);
    }
    let hermite = |n: usize| {
        gauss_hermite(n).apply(|t| {
            let v = f.eval(q * t);
            v * v
        }) / std::f64::consts::PI.sqrt()
    };
    let mut n = GAMMA_BASE_NODES;
    let mut prev = hermite(n);
    let mut difference = f64::INFINITY;
    while n < GAMMA_MAX_NODES {
        n *= 2;
        let next = hermite(n);
        difference = (next - prev).abs();
        if difference <= GAMMA_TOLERANCE {
            return Ok(next);
        }
        prev = next;
    }
    Err(PerturbationError::QuadratureNonConvergence { difference })
}

fn piecewise_gamma(f: &DitherFunction, q: f64) -> Result<f64, PerturbationError> {
    let reach = 40.0 * q;
    let mut cuts: Vec<f64> = vec![-reach, reach];
    cuts.extend(f.kinks().iter().copied().filter(|k| k.abs() < reach));
    cuts.sort_by(|a, b| a.total_cmp(b));
    cuts.dedup();
    let density = |s: f64| (-(s / q) * (s / q)).exp() / (std::f64::consts::PI.sqrt() * q);
    let integrate = |nodes: usize| -> f64 {
        cuts.windows(2)
            .map(|w| {
                let pieces = ((w[1] - w[0]) / q).ceil().max(1.0) as usize;
                let h = (w[1] - w[0]) / pieces as f64;
                (0..pieces)
                    .map(|p| {
                        let lo = w[0] + h * p as f64;
                        gauss_legendre(nodes, lo, lo + h).apply(|s| {
                            let v = f.eval(s);
                            v * v * density(s)
                        })
                    })
                    .sum::<f64>()
            })
            .sum()
    };
    let mut n = 16;
    let mut prev = integrate(n);
    let mut difference = f64::INFINITY;
    while n < 128 {
        n *= 2;
        let next = integrate(n);
        difference = (next - prev).abs();
        if difference <= GAMMA_TOLERANCE {
            return Ok(next);
        }
        prev = next;
    }
    Err(PerturbationError::QuadratureNonConvergence { difference })
}

/// Per-player dither generators. Each player draws from its own ChaCha
/// stream (stream index = player index) keyed by the trial seed.
#[derive(Debug, Clone)]
pub struct DitherSource {
    streams: Vec<ChaCha8Rng>,
}

impl DitherSource {
    pub fn new(seed: u64, n_players: usize) -> Self {
        let streams = (0..n_players)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                rng
            })
            .collect();
        Self { streams }
    }

    pub fn n_players(&self) -> usize {
        self.streams.len()
    }

    /// One standard normal draw per player.
    #[inline]
    pub fn fill_normals(&mut self, out: &mut [f64]) {
        for (o, rng) in out.iter_mut().zip(self.streams.iter_mut()) {
            *o = rng.sample(StandardNormal);
        }
    }

    /// Draw from the invariant law `N(0, q²/2)` on the given player's stream.
    pub fn stationary_sample(&mut self, player: usize, q: f64) -> f64 {
        let z: f64 = self.streams[player].sample(StandardNormal);
        stationary_sd(q) * z
    }
}
