//! Browser bindings. Every export takes a scenario in the CLI's JSON format
//! and returns JSON for the page to plot.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use sdnes_core::config::ScenarioConfig;
use sdnes_core::deception::{deceptive_equilibrium, in_stability_set, solve_attainability, stability_radius};
use sdnes_core::dynamics::{simulate, AveragedSystem, DynamicsError, SimulationSettings, Trajectory};
use sdnes_core::experiment::Scenario;

const MAX_SDE_STEPS: f64 = 5e7;

fn scenario(config: &str) -> Result<Scenario, String> {
    ScenarioConfig::parse_str(config, "scenario", None)
        .and_then(|c| c.build())
        .map_err(|e| e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct DeltaScan {
    delta: Vec<f64>,
    /// Deceiver's payoff at `x_δ`; `None` where `Ā(δ)` is singular.
    payoff: Vec<Option<f64>>,
    stable: Vec<bool>,
    radius: Option<f64>,
    j_ref: f64,
    delta_star: Option<f64>,
    error: Option<String>,
}

/// Payoff of the first deceiver at the deceptive equilibrium as its gain
/// sweeps `[lo, hi]` (other deceivers held at zero), with the stability
/// verdict per point.
pub fn delta_scan_json(config: &str, lo: f64, hi: f64, points: usize) -> Result<String, String> {
    let sc = scenario(config)?;
    let d = sc
        .deception
        .deceivers()
        .first()
        .ok_or("scenario declares no deceivers")?;
    let m = sc.deception.n_deceivers();
    let points = points.clamp(2, 5000);
    let gains = sc.game.gains();
    let mut scan = DeltaScan {
        delta: Vec::with_capacity(points),
        payoff: Vec::with_capacity(points),
        stable: Vec::with_capacity(points),
        radius: stability_radius(&sc.game, &sc.deception).ok().filter(|r| r.is_finite()),
        j_ref: d.j_ref,
        delta_star: None,
        error: None,
    };
    let mut delta = vec![0.0; m];
    for k in 0..points {
        let v = lo + (hi - lo) * k as f64 / (points - 1) as f64;
        delta[0] = v;
        scan.delta.push(v);
        scan.payoff.push(
            deceptive_equilibrium(&sc.game, &sc.deception, &delta)
                .ok()
                .map(|x| sc.game.cost_unchecked(d.player, x.as_slice())),
        );
        scan.stable
            .push(in_stability_set(&sc.game, &sc.deception, &delta, &gains).unwrap_or(false));
    }
    match solve_attainability(&sc.game, &sc.deception, &sc.deception.j_refs()) {
        Ok(att) => scan.delta_star = Some(att.delta_star[0]),
        Err(e) => scan.error = Some(e.to_string()),
    }
    to_json(&scan)
}

#[derive(Serialize)]
struct Series {
    t: Vec<f64>,
    u: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
    costs: Vec<Vec<f64>>,
}

impl From<&Trajectory> for Series {
    fn from(tr: &Trajectory) -> Self {
        Series {
            t: tr.samples.iter().map(|s| s.t).collect(),
            u: tr.samples.iter().map(|s| s.u.clone()).collect(),
            delta: tr.samples.iter().map(|s| s.delta.clone()).collect(),
            costs: tr.samples.iter().map(|s| s.costs.clone()).collect(),
        }
    }
}

/// Overrides the first deceiver's reference payoff and adaptation gain.
fn with_deceiver(config: &str, j_ref: f64, eps: f64) -> Result<String, String> {
    let mut cfg = ScenarioConfig::parse_str(config, "scenario", None).map_err(|e| e.to_string())?;
    let d = cfg
        .deception
        .deceivers
        .first_mut()
        .ok_or("scenario declares no deceivers")?;
    d.j_ref = j_ref;
    d.eps = eps;
    Ok(cfg.dump())
}

/// RK4 solution of the averaged system with the first deceiver's reference
/// payoff and adaptation gain replaced.
pub fn averaged_json(config: &str, j_ref: f64, eps: f64, horizon: f64, step: f64) -> Result<String, String> {
    let sc = scenario(&with_deceiver(config, j_ref, eps)?)?;
    let settings = SimulationSettings {
        dt: step,
        horizon,
        record_stride: ((horizon / step / 2000.0).ceil() as usize).max(1),
    };
    let tr = AveragedSystem::new(&sc.game, &sc.deception)
        .and_then(|a| a.integrate(&sc.initial.u, &sc.initial.delta, &settings))
        .map_err(|e| e.to_string())?;
    to_json(&Series::from(&tr))
}

#[derive(Serialize)]
struct Comparison {
    sde: Series,
    averaged: Series,
    blow_up_time: Option<f64>,
    dt: f64,
}

/// One closed-loop path at time scale `theta` next to the averaged system,
/// both recorded every `interval`.
pub fn compare_json(config: &str, theta: f64, horizon: f64, interval: f64, seed: u64) -> Result<String, String> {
    let sc = scenario(config)?;
    let ou = sc.ou.with_theta(theta);
    let stride = (interval / (ou.min_time_scale() / 10.0)).ceil().max(1.0);
    let dt = interval / stride;
    if horizon / dt > MAX_SDE_STEPS {
        return Err(format!(
            "{:.0} steps requested; shorten the horizon or raise theta",
            horizon / dt
        ));
    }
    let settings = SimulationSettings {
        dt,
        horizon,
        record_stride: stride as usize,
    };
    let (sde, blow_up_time) = match simulate(&sc.game, &sc.deception, &ou, &sc.initial, &settings, seed) {
        Ok(tr) => (tr, None),
        Err(DynamicsError::BlowUp { time, trajectory }) => (*trajectory, Some(time)),
        Err(e) => return Err(e.to_string()),
    };
    let averaged = AveragedSystem::new(&sc.game, &sc.deception)
        .and_then(|a| {
            a.integrate(
                &sc.initial.u,
                &sc.initial.delta,
                &SimulationSettings {
                    dt: interval,
                    horizon,
                    record_stride: 1,
                },
            )
        })
        .map_err(|e| e.to_string())?;
    to_json(&Comparison {
        sde: Series::from(&sde),
        averaged: Series::from(&averaged),
        blow_up_time,
        dt,
    })
}

#[wasm_bindgen]
pub fn delta_scan(config: &str, lo: f64, hi: f64, points: usize) -> Result<String, JsValue> {
    delta_scan_json(config, lo, hi, points).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn averaged(config: &str, j_ref: f64, eps: f64, horizon: f64, step: f64) -> Result<String, JsValue> {
    averaged_json(config, j_ref, eps, horizon, step).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn compare(config: &str, theta: f64, horizon: f64, interval: f64, seed: u64) -> Result<String, JsValue> {
    compare_json(config, theta, horizon, interval, seed).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    const SEC5: &str = include_str!("../../cli/scenarios/sec5.json");

    #[test]
    fn scan_marks_attaining_gain() {
        let v: Value = serde_json::from_str(&delta_scan_json(SEC5, -1.0, 1.0, 201).unwrap()).unwrap();
        assert!((v["delta_star"].as_f64().unwrap() - 0.1989).abs() < 5e-4);
        assert!((v["radius"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(v["delta"].as_array().unwrap().len(), 201);
        assert!(v["stable"].as_array().unwrap().iter().all(|s| s == true));
    }

    #[test]
    fn scan_reports_unattainable_reference() {
        let cfg = with_deceiver(SEC5, -10.0, 1e-3).unwrap();
        let v: Value = serde_json::from_str(&delta_scan_json(&cfg, -1.0, 1.0, 11).unwrap()).unwrap();
        assert!(v["delta_star"].is_null());
        assert!(v["error"].is_string());
    }

    #[test]
    fn averaged_reaches_reference() {
        let v: Value = serde_json::from_str(&averaged_json(SEC5, -2.0, 1e-3, 2000.0, 0.1).unwrap()).unwrap();
        let last = v["costs"].as_array().unwrap().last().unwrap();
        assert!((last[1].as_f64().unwrap() + 2.0).abs() < 5e-3);
    }

    #[test]
    fn compare_runs_and_aligns() {
        let v: Value = serde_json::from_str(&compare_json(SEC5, 5e-5, 1.0, 0.1, 3).unwrap()).unwrap();
        assert_eq!(v["sde"]["t"].as_array().unwrap().len(), v["averaged"]["t"].as_array().unwrap().len());
        assert!(compare_json(SEC5, 1e-9, 100.0, 0.1, 3).is_err());
    }

    #[test]
    fn bad_config_is_an_error() {
        assert!(delta_scan_json("{", 0.0, 1.0, 3).is_err());
    }
}
