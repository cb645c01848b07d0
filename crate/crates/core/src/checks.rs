//! Runtime invariant suite behind the `validate` command. Each check runs on
//! worlds reached by driving sampled scenarios for a few steps.

use std::sync::Arc;

use crate::cpe::{evaluate, gate_decision, EventSelector, GateSettings, PolicyPool};
use crate::error::Result;
use crate::put::PutPolicy;
use crate::runner::{episode_seed, run_episode, scenario_for_seed, EpisodeSettings, ScenarioConfig};
use crate::simulate::{advance, EgoControl};
use crate::world::{BehaviorPolicy, WorldState};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, failures: Vec<String>, total: usize) -> CheckOutcome {
    CheckOutcome {
        name,
        passed: failures.is_empty(),
        detail: match failures.first() {
            None => format!("{total} cases"),
            Some(f) => format!("{} of {total} cases failed, first: {f}", failures.len()),
        },
    }
}

fn probe_worlds(cfg: &ScenarioConfig, put: &Arc<PutPolicy>, seed: u64, n: usize) -> Result<Vec<WorldState>> {
    (0..n as u64)
        .map(|i| {
            let s = episode_seed(seed, i);
            let mut w = scenario_for_seed(cfg, Arc::clone(put), s)?;
            for _ in 0..(s % 40) {
                if advance(&mut w, EgoControl::Put)?.ego_collision {
                    break;
                }
            }
            Ok(w)
        })
        .collect()
}

/// Runs every check on `n` probe worlds.
pub fn run_invariant_suite(
    cfg: &ScenarioConfig,
    pool: &PolicyPool,
    put: Arc<PutPolicy>,
    gate: &GateSettings,
    seed: u64,
    n: usize,
) -> Result<Vec<CheckOutcome>> {
    let worlds = probe_worlds(cfg, &put, seed, n)?;
    let m = pool.len() as f64;
    let mut multiples = Vec::new();
    let mut mean = Vec::new();
    let mut monotone = Vec::new();
    let mut untouched = Vec::new();
    let mut independent = Vec::new();

    for (i, w) in worlds.iter().enumerate() {
        let before = w.clone();
        let eval = evaluate(w, pool, gate)?;
        if *w != before {
            untouched.push(format!("world {i}"));
        }
        let r = &eval.report;
        for (&id, &p) in &r.per_vehicle_collision_prob {
            let hits = eval
                .rollouts
                .iter()
                .filter(|t| t.replaced_vehicle_id == Some(id) && t.indicator(EventSelector::EgoCollision))
                .count();
            if p != hits as f64 / m {
                multiples.push(format!("world {i} vehicle {id}: {p} vs {hits}/{m}"));
            }
        }
        if !r.per_vehicle_collision_prob.is_empty() {
            let k = r.per_vehicle_collision_prob.len() as f64;
            let recount = r.per_vehicle_collision_prob.values().sum::<f64>() / k;
            if recount != r.p_c {
                mean.push(format!("world {i}: {} vs {recount}", r.p_c));
            }
        }
        let decisions: Vec<bool> = (0..=20).map(|j| gate_decision(r.p_c, j as f64 / 20.0)).collect();
        if decisions.windows(2).any(|d| d[0] && !d[1]) {
            monotone.push(format!("world {i}: p_c {}", r.p_c));
        }

        // A replaced vehicle must move identically when everyone else is
        // displaced.
        for t in &eval.rollouts {
            let (Some(id), Some(pi)) = (t.replaced_vehicle_id, t.pool_index) else { continue };
            if !matches!(pool.members()[pi], BehaviorPolicy::ConstantAcceleration(_)) {
                continue;
            }
            let ego = w.ego_id()?;
            let mut shifted = w.clone();
            for v in shifted.vehicles.iter_mut().filter(|v| v.id != id && v.id != ego) {
                v.x += 3.0;
                v.v *= 0.5;
            }
            let idx = shifted.index_of(id).expect("present");
            shifted.assignments[idx].policy = pool.members()[pi].clone();
            let other = crate::cpe::forward_simulate(&shifted, gate.horizon, w.step.dt)?;
            let common = t.states.len().min(other.states.len());
            let same = (0..common).all(|s| {
                let a = t.states[s].iter().find(|v| v.id == id);
                let b = other.states[s].iter().find(|v| v.id == id);
                a == b
            });
            if !same {
                independent.push(format!("world {i} vehicle {id} member {pi}"));
            }
        }
    }

    let mut repro = Vec::new();
    let settings = EpisodeSettings {
        gate: *gate,
        ..Default::default()
    };
    for i in 0..3u64.min(n as u64) {
        let s = episode_seed(seed, i);
        let a = run_episode(cfg, s, pool, Arc::clone(&put), &settings)?;
        let b = run_episode(cfg, s, pool, Arc::clone(&put), &settings)?;
        if a != b {
            repro.push(format!("seed {s}"));
        }
    }

    let total = worlds.len();
    Ok(vec![
        outcome("per-vehicle probabilities are multiples of 1/M", multiples, total),
        outcome("P_C is the mean over replaced vehicles", mean, total),
        outcome("gate is monotone in rho_max", monotone, total),
        outcome("evaluation leaves the input world untouched", untouched, total),
        outcome("replaced vehicles ignore all other vehicles", independent, total),
        outcome("episodes are reproducible from their seed", repro, 3usize.min(n)),
    ])
}
