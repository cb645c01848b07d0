//! Counterfactual policy evaluation.
//!
//! Before the PUT acts, the world is forked once per (nearby vehicle, pool
//! member) pair. In each fork that vehicle's behavior is replaced by an
//! independent policy and the fork is rolled forward over a short horizon
//! with the ego running the PUT. Collision indicators over the rollouts give
//! per-vehicle conditional collision probabilities; their mean `p_c` is
//! compared against `rho_max` to decide whether the PUT may run. The same
//! rollouts, compared against an unmodified baseline rollout, yield the
//! mean-displacement influence matrix.
//!
//! Rollouts are independent and are evaluated with rayon. Results are
//! collected in `(vehicle_id, pool_index)` order, so reports are identical
//! for any thread count.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drivers::ConstAccelPolicy;
use crate::error::{CpeError, Result};
use crate::put::{step_reward, RewardWeights, StepEvents};
use crate::simulate::{advance, EgoControl};
use crate::world::{build_observation, fork_world, nearest_vehicles, BehaviorPolicy, Observation, VehicleId, VehicleState, WorldState};

/// Ordered replacement policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyPool {
    members: Vec<BehaviorPolicy>,
}

impl PolicyPool {
    /// Pool of constant-acceleration policies, one per entry.
    pub fn constant_accelerations(accels: &[f64]) -> Result<Self> {
        Self::from_policies(
            accels
                .iter()
                .map(|&a_fixed| BehaviorPolicy::ConstantAcceleration(ConstAccelPolicy::new(a_fixed)))
                .collect(),
        )
    }

    /// Arbitrary replacement behaviors. Only constant-acceleration members
    /// are independent of the surrounding traffic; other behaviors are
    /// accepted for diagnostics such as self-replacement baselines.
    pub fn from_policies(members: Vec<BehaviorPolicy>) -> Result<Self> {
        if members.is_empty() {
            return Err(CpeError::InvalidConfig("policy pool is empty".into()));
        }
        if members.iter().any(BehaviorPolicy::is_put) {
            return Err(CpeError::InvalidConfig("pool may not contain the PUT".into()));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[BehaviorPolicy] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_independent(&self) -> bool {
        self.members
            .iter()
            .all(|m| matches!(m, BehaviorPolicy::ConstantAcceleration(_)))
    }
}

impl Default for PolicyPool {
    fn default() -> Self {
        Self::constant_accelerations(&[-2.0, 0.0, 2.0]).expect("non-empty")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepInfo {
    /// The ego was involved in a collision at this step.
    pub collision: bool,
    pub goal: bool,
    /// Every overlapping pair, ego or not.
    pub colliding_ids: Vec<(VehicleId, VehicleId)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub observation: Observation,
    pub terminal: bool,
    pub reward: f64,
    pub info: StepInfo,
}

/// One rollout. `states[0]` is the initial snapshot and `states[t]` the
/// snapshot after step `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub replaced_vehicle_id: Option<VehicleId>,
    pub pool_index: Option<usize>,
    pub planned_steps: usize,
    pub steps: Vec<StepRecord>,
    pub states: Vec<Vec<VehicleState>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EventSelector {
    /// Collision involving the ego.
    #[default]
    EgoCollision,
    /// Any pair of vehicles overlapping.
    AnyCollision,
    Goal,
}

impl TrajectoryRecord {
    /// Whether the selected event occurs at any step.
    pub fn indicator(&self, event: EventSelector) -> bool {
        self.steps.iter().any(|s| match event {
            EventSelector::EgoCollision => s.info.collision,
            EventSelector::AnyCollision => !s.info.colliding_ids.is_empty(),
            EventSelector::Goal => s.info.goal,
        })
    }

    pub fn position(&self, step: usize, id: VehicleId) -> Option<(f64, f64)> {
        self.states
            .get(step)?
            .iter()
            .find(|v| v.id == id)
            .map(|v| (v.x, v.y))
    }
}

/// Forks of `world`, one per pool member, with `vehicle_id` driving that
/// member instead of its own policy.
pub fn generate_counterfactual_worlds(world: &WorldState, vehicle_id: VehicleId, pool: &PolicyPool) -> Result<Vec<WorldState>> {
    let idx = world
        .index_of(vehicle_id)
        .ok_or(CpeError::VehicleNotFound(vehicle_id))?;
    if world.assignments[idx].policy.is_put() {
        return Err(CpeError::CannotReplacePut(vehicle_id));
    }
    Ok(pool
        .members()
        .iter()
        .map(|member| {
            let mut w = fork_world(world);
            w.assignments[idx].policy = member.clone();
            w
        })
        .collect())
}

fn step_count(horizon: f64, dt: f64) -> Result<usize> {
    let n = (horizon / dt).round();
    if !(horizon > 0.0) || !(dt > 0.0) || n < 1.0 || (n * dt - horizon).abs() > 1e-9 {
        return Err(CpeError::InvalidHorizon { horizon, dt });
    }
    Ok(n as usize)
}

/// Rolls a fork of `world` forward with the ego on the PUT for `horizon`
/// seconds, stopping early at an ego collision or goal.
pub fn forward_simulate(world: &WorldState, horizon: f64, dt: f64) -> Result<TrajectoryRecord> {
    let n = step_count(horizon, dt)?;
    let mut w = fork_world(world);
    w.step.dt = dt;
    let ego_id = w.ego_id()?;
    let weights = RewardWeights::default();
    let mut steps = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n + 1);
    states.push(w.vehicles.clone());
    for _ in 0..n {
        let out = advance(&mut w, EgoControl::Put)?;
        let events = StepEvents {
            collision: out.ego_collision,
            goal: out.goal,
            timeout: false,
        };
        let terminal = out.ego_collision || out.goal;
        steps.push(StepRecord {
            observation: build_observation(&w, ego_id)?,
            terminal,
            reward: step_reward(&w, ego_id, out.ego_action, events, &weights)?,
            info: StepInfo {
                collision: out.ego_collision,
                goal: out.goal,
                colliding_ids: out.collisions,
            },
        });
        states.push(w.vehicles.clone());
        if terminal {
            break;
        }
    }
    Ok(TrajectoryRecord {
        replaced_vehicle_id: None,
        pool_index: None,
        planned_steps: n,
        steps,
        states,
    })
}

/// Fraction of trajectories in which the selected event occurs.
pub fn conditional_probability(trajectories: &[TrajectoryRecord], indicator: EventSelector) -> Result<f64> {
    let first = trajectories.first().ok_or(CpeError::EmptyTrajectories)?;
    if trajectories
        .iter()
        .any(|t| t.replaced_vehicle_id != first.replaced_vehicle_id)
    {
        return Err(CpeError::InvalidState(
            "trajectories replace different vehicles".into(),
        ));
    }
    let hits = trajectories.iter().filter(|t| t.indicator(indicator)).count();
    Ok(hits as f64 / trajectories.len() as f64)
}

/// Mean of the per-vehicle conditional collision probabilities.
pub fn average_collision_probability(per_vehicle: &BTreeMap<VehicleId, f64>) -> Result<f64> {
    if per_vehicle.is_empty() {
        return Err(CpeError::EmptyProbabilities);
    }
    Ok(per_vehicle.values().sum::<f64>() / per_vehicle.len() as f64)
}

/// The PUT runs unless the collision probability exceeds the threshold.
pub fn gate_decision(p_c: f64, rho_max: f64) -> bool {
    p_c <= rho_max
}

/// Mean displacement matrix. Rows are observed vehicles, columns replaced
/// vehicles; `values[row][col]` is in meters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InfluenceMatrix {
    pub replaced: Vec<VehicleId>,
    pub observed: Vec<VehicleId>,
    pub values: Vec<Vec<f64>>,
}

impl InfluenceMatrix {
    pub fn get(&self, observed: VehicleId, replaced: VehicleId) -> Option<f64> {
        let r = self.observed.iter().position(|&id| id == observed)?;
        let c = self.replaced.iter().position(|&id| id == replaced)?;
        Some(self.values[r][c])
    }

    pub fn row(&self, observed: VehicleId) -> Option<&[f64]> {
        let r = self.observed.iter().position(|&id| id == observed)?;
        Some(&self.values[r])
    }
}

/// Mean over time steps of the distance between a vehicle's position in a
/// rollout and in the baseline. Steps are compared while both rollouts last.
fn mean_displacement(rollout: &TrajectoryRecord, baseline: &TrajectoryRecord, id: VehicleId) -> f64 {
    let common = rollout.states.len().min(baseline.states.len());
    let mut total = 0.0;
    let mut n = 0usize;
    for t in 1..common {
        if let (Some((x, y)), Some((bx, by))) = (rollout.position(t, id), baseline.position(t, id)) {
            total += (x - bx).hypot(y - by);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Influence of each replaced vehicle (columns) on each observed vehicle
/// (rows), averaged over pool members and time.
pub fn influence_matrix(counterfactual: &[TrajectoryRecord], baseline: &TrajectoryRecord, observed: &[VehicleId]) -> Result<InfluenceMatrix> {
    let mut by_vehicle: BTreeMap<VehicleId, Vec<&TrajectoryRecord>> = BTreeMap::new();
    for t in counterfactual {
        if t.planned_steps != baseline.planned_steps {
            return Err(CpeError::HorizonMismatch {
                baseline: baseline.planned_steps,
                rollout: t.planned_steps,
            });
        }
        let id = t
            .replaced_vehicle_id
            .ok_or_else(|| CpeError::InvalidState("rollout without replaced vehicle".into()))?;
        by_vehicle.entry(id).or_default().push(t);
    }
    let replaced: Vec<VehicleId> = by_vehicle.keys().copied().collect();
    let values = observed
        .iter()
        .map(|&m| {
            by_vehicle
                .values()
                .map(|group| {
                    group
                        .iter()
                        .map(|t| mean_displacement(t, baseline, m))
                        .sum::<f64>()
                        / group.len() as f64
                })
                .collect()
        })
        .collect();
    Ok(InfluenceMatrix {
        replaced,
        observed: observed.to_vec(),
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum KSelection {
    #[default]
    All,
    Count(usize),
}

impl KSelection {
    pub fn resolve(self, others: usize) -> usize {
        match self {
            KSelection::All => others,
            KSelection::Count(k) => k.min(others),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpeReport {
    pub per_vehicle_collision_prob: BTreeMap<VehicleId, f64>,
    pub p_c: f64,
    pub rho_max: f64,
    pub execute_put: bool,
    pub influence_matrix: InfluenceMatrix,
    pub rollout_count: usize,
}

/// A gate evaluation with the raw rollouts kept for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct CpeEvaluation {
    pub report: CpeReport,
    pub rollouts: Vec<TrajectoryRecord>,
    pub baseline: TrajectoryRecord,
}

/// Builds the report from finished rollouts. `rollouts` must be ordered by
/// `(replaced_vehicle_id, pool_index)`.
pub fn assemble_report(
    rollouts: &[TrajectoryRecord],
    baseline: &TrajectoryRecord,
    ego_id: VehicleId,
    rho_max: f64,
    indicator: EventSelector,
) -> Result<CpeReport> {
    let mut groups: BTreeMap<VehicleId, Vec<TrajectoryRecord>> = BTreeMap::new();
    for t in rollouts {
        let id = t
            .replaced_vehicle_id
            .ok_or_else(|| CpeError::InvalidState("rollout without replaced vehicle".into()))?;
        groups.entry(id).or_default().push(t.clone());
    }
    let per_vehicle = groups
        .iter()
        .map(|(&id, ts)| Ok((id, conditional_probability(ts, indicator)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let p_c = average_collision_probability(&per_vehicle)?;
    let mut observed: Vec<VehicleId> = groups.keys().copied().chain([ego_id]).collect();
    observed.sort_unstable();
    Ok(CpeReport {
        per_vehicle_collision_prob: per_vehicle,
        p_c,
        rho_max,
        execute_put: gate_decision(p_c, rho_max),
        influence_matrix: influence_matrix(rollouts, baseline, &observed)?,
        rollout_count: rollouts.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateSettings {
    pub rho_max: f64,
    pub k: KSelection,
    pub horizon: f64,
    pub indicator: EventSelector,
}

impl Default for GateSettings {
    fn default() -> Self {
        Self {
            rho_max: 0.0,
            k: KSelection::All,
            horizon: 1.0,
            indicator: EventSelector::EgoCollision,
        }
    }
}

/// Runs every counterfactual rollout for the `k` vehicles nearest the ego
/// plus the unmodified baseline. The input world is not advanced.
pub fn evaluate(world: &WorldState, pool: &PolicyPool, settings: &GateSettings) -> Result<CpeEvaluation> {
    if !(0.0..=1.0).contains(&settings.rho_max) {
        return Err(CpeError::InvalidConfig(format!(
            "rho_max {} outside [0, 1]",
            settings.rho_max
        )));
    }
    let dt = world.step.dt;
    let ego_id = world.ego_id()?;
    let k = settings.k.resolve(world.vehicles.len() - 1);
    let mut targets = nearest_vehicles(world, ego_id, k)?;
    targets.sort_unstable();

    let baseline = forward_simulate(world, settings.horizon, dt)?;
    if targets.is_empty() {
        log::debug!("no vehicles besides the ego; PUT passes the gate trivially");
        return Ok(CpeEvaluation {
            report: CpeReport {
                per_vehicle_collision_prob: BTreeMap::new(),
                p_c: 0.0,
                rho_max: settings.rho_max,
                execute_put: true,
                influence_matrix: InfluenceMatrix {
                    replaced: Vec::new(),
                    observed: vec![ego_id],
                    values: vec![Vec::new()],
                },
                rollout_count: 0,
            },
            rollouts: Vec::new(),
            baseline,
        });
    }

    let jobs: Vec<(VehicleId, usize, WorldState)> = targets
        .iter()
        .map(|&id| {
            generate_counterfactual_worlds(world, id, pool)
                .map(|ws| ws.into_iter().enumerate().map(move |(i, w)| (id, i, w)))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let rollouts = jobs
        .into_par_iter()
        .map(|(id, i, w)| {
            let mut t = forward_simulate(&w, settings.horizon, dt)?;
            t.replaced_vehicle_id = Some(id);
            t.pool_index = Some(i);
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;

    let report = assemble_report(&rollouts, &baseline, ego_id, settings.rho_max, settings.indicator)?;
    Ok(CpeEvaluation {
        report,
        rollouts,
        baseline,
    })
}

/// Gate decision for executing the PUT over the next window.
pub fn cpe_gate(world: &WorldState, pool: &PolicyPool, rho_max: f64, k: KSelection, horizon: f64) -> Result<CpeReport> {
    let settings = GateSettings {
        rho_max,
        k,
        horizon,
        ..GateSettings::default()
    };
    Ok(evaluate(world, pool, &settings)?.report)
}
