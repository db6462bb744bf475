#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use sdnes_core::{Deceiver, DeceptionStructure, DitherFunction, PlayerCost, PlayerTuning, QuadraticGame};

pub fn sec5_game() -> QuadraticGame {
    let costs = vec![
        PlayerCost {
            a: DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 5.0]),
            b: DVector::from_vec(vec![4.0, 2.0]),
            c: 0.0,
        },
        PlayerCost {
            a: DMatrix::from_row_slice(2, 2, &[7.0, 2.0, 2.0, 4.0]),
            b: DVector::from_vec(vec![1.0, 6.0]),
            c: 0.0,
        },
    ];
    let tuning = vec![
        PlayerTuning {
            amplitude: 0.1,
            gain: 0.06,
            dither: DitherFunction::Saturation,
            noise_scale: 0.1,
        },
        PlayerTuning {
            amplitude: 0.12,
            gain: 0.05,
            dither: DitherFunction::Sine,
            noise_scale: 0.07,
        },
    ];
    QuadraticGame::new(costs, tuning).unwrap()
}

pub fn sec5_deception(j_ref: f64) -> DeceptionStructure {
    DeceptionStructure::new(
        2,
        vec![Deceiver {
            player: 1,
            targets: vec![0],
            eps: 1e-3,
            j_ref,
        }],
    )
    .unwrap()
}

pub fn scenario_file(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../cli/scenarios")
        .join(name)
}

/// Random game whose pseudogradient matrix is strictly diagonally dominant
/// with a positive diagonal.
pub fn random_dominant_game(rng: &mut ChaCha8Rng, n: usize) -> QuadraticGame {
    let costs = (0..n)
        .map(|i| {
            let mut a = DMatrix::<f64>::zeros(n, n);
            for r in 0..n {
                for c in r..n {
                    let v = rng.random_range(-2.0..2.0);
                    a[(r, c)] = v;
                    a[(c, r)] = v;
                }
            }
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| a[(i, j)].abs()).sum();
            a[(i, i)] = off + rng.random_range(0.05..3.0);
            PlayerCost {
                a,
                b: DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0)),
                c: rng.random_range(-1.0..1.0),
            }
        })
        .collect();
    let tuning = (0..n)
        .map(|_| PlayerTuning {
            amplitude: rng.random_range(0.05..1.0),
            gain: rng.random_range(0.01..2.0),
            dither: if rng.random_bool(0.5) {
                DitherFunction::Sine
            } else {
                DitherFunction::Saturation
            },
            noise_scale: rng.random_range(0.05..2.0),
        })
        .collect();
    QuadraticGame::new(costs, tuning).unwrap()
}

/// Random non-empty deception structure on `n` players.
pub fn random_deception(rng: &mut ChaCha8Rng, n: usize) -> DeceptionStructure {
    let mut players: Vec<usize> = (0..n).collect();
    players.shuffle(rng);
    let n_dec = rng.random_range(1..n);
    let deceivers = players[..n_dec]
        .iter()
        .map(|&p| {
            let others: Vec<usize> = (0..n).filter(|&j| j != p).collect();
            let mut targets: Vec<usize> = others.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
            if targets.is_empty() {
                targets.push(*others.choose(rng).unwrap());
            }
            Deceiver {
                player: p,
                targets,
                eps: rng.random_range(1e-4..1e-2),
                j_ref: rng.random_range(-5.0..5.0),
            }
        })
        .collect();
    DeceptionStructure::new(n, deceivers).unwrap()
}

/// Uniform point in the open Euclidean ball of the given radius.
pub fn ball_point(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1.0 {
            return v.into_iter().map(|x| x * radius).collect();
        }
    }
}

/// Action of one player written out directly from the deception rule.
pub fn action_by_hand(
    game: &QuadraticGame,
    ds: &DeceptionStructure,
    u: &[f64],
    delta: &[f64],
    eta: &[f64],
    i: usize,
) -> f64 {
    let t = &game.tuning()[i];
    let mut x = u[i] + t.amplitude * t.dither.eval(eta[i]);
    if let Some(slot) = ds.slot_of(i) {
        for &j in &ds.deceivers()[slot].targets {
            let tj = &game.tuning()[j];
            x += delta[slot] * tj.amplitude * tj.dither.eval(eta[j]);
        }
    }
    x
}

/// `x_δ` and the deceiver's payoff for the two-player example, solved by
/// Cramer's rule from the victim row `[3 + δ, 1 + 5δ | 4 + 2δ]` and the
/// deceiver row `[2, 4 | 6]`.
pub fn sec5_by_hand(delta: f64) -> ([f64; 2], f64) {
    let (a11, a12, b1) = (3.0 + delta, 1.0 + 5.0 * delta, 4.0 + 2.0 * delta);
    let (a21, a22, b2) = (2.0, 4.0, 6.0);
    let det = a11 * a22 - a12 * a21;
    let x1 = (-b1 * a22 + a12 * b2) / det;
    let x2 = (-a11 * b2 + a21 * b1) / det;
    let j2 = 0.5 * (7.0 * x1 * x1 + 4.0 * x1 * x2 + 4.0 * x2 * x2) + x1 + 6.0 * x2;
    ([x1, x2], j2)
}
