//! Merge scenario sampling, gated episodes and threshold sweeps.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cpe::{evaluate, CpeReport, GateSettings, PolicyPool};
use crate::drivers::{IdmParams, MobilParams};
use crate::dynamics::{check_collisions, StepConfig};
use crate::error::{CpeError, Result};
use crate::map::{GoalSpec, MapGeometry};
use crate::put::PutPolicy;
use crate::simulate::{advance, EgoControl};
use crate::world::{BehaviorPolicy, VehicleId, VehicleState, WorldState, DEFAULT_LENGTH, DEFAULT_WIDTH};

pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub num_other_vehicles: usize,
    pub ego_lane: usize,
    /// Range of the ego's initial rear-axle x coordinate.
    pub ego_x_range: (f64, f64),
    /// Lanes the other vehicles are spawned on, uniformly.
    pub other_lanes: Vec<usize>,
    pub other_x_range: (f64, f64),
    pub speed_range: (f64, f64),
    pub headway_range: (f64, f64),
    /// Spawn spacing beyond `s0`, in seconds of follower speed.
    pub spawn_time_gap: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    /// IDM parameters shared by every vehicle except the sampled headway.
    pub idm: IdmParams,
    pub mobil: MobilParams,
    pub map: MapGeometry,
    pub goal: GoalSpec,
    pub step: StepConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_other_vehicles: 4,
            ego_lane: 0,
            ego_x_range: (20.0, 50.0),
            other_lanes: vec![1],
            other_x_range: (0.0, 110.0),
            speed_range: (8.0, 15.0),
            headway_range: (1.0, 5.0),
            spawn_time_gap: 0.5,
            max_steps: 100,
            seed: 0,
            vehicle_length: DEFAULT_LENGTH,
            vehicle_width: DEFAULT_WIDTH,
            idm: IdmParams::default(),
            mobil: MobilParams::default(),
            map: MapGeometry::default(),
            goal: GoalSpec::default(),
            step: StepConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CpeError::InvalidConfig(m.to_string()));
        let lanes = self.map.lanes.len();
        if self.ego_lane >= lanes || self.other_lanes.iter().any(|&l| l >= lanes) {
            return bad("lane index out of range");
        }
        if self.num_other_vehicles > 0 && self.other_lanes.is_empty() {
            return bad("other_lanes is empty");
        }
        for (lo, hi) in [self.ego_x_range, self.other_x_range, self.speed_range, self.headway_range] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return bad("empty or non-finite sampling range");
            }
        }
        if self.speed_range.0 < 0.0 || !(self.headway_range.0 > 0.0) {
            return bad("speeds must be non-negative and headways positive");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive");
        }
        self.idm.validate()?;
        self.mobil.validate()?;
        self.map.validate(self.vehicle_width)?;
        self.step.validate()
    }
}

fn sample(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Whether every same-lane pair keeps at least `s0 + spawn_time_gap * v`
/// of bumper gap to its leader and nothing overlaps.
fn placement_valid(world: &WorldState, lanes: &[usize], cfg: &ScenarioConfig) -> bool {
    if !check_collisions(world).is_empty() {
        return false;
    }
    let wb = world.step.wheelbase;
    for (i, a) in world.vehicles.iter().enumerate() {
        for (j, b) in world.vehicles.iter().enumerate() {
            if i == j || lanes[i] != lanes[j] {
                continue;
            }
            let lane = &world.map.lanes[lanes[i]];
            let (ax, ay) = a.center(wb);
            let (bx, by) = b.center(wb);
            let (sa, sb) = (lane.project(ax, ay).s, lane.project(bx, by).s);
            if sb >= sa {
                // b leads a
                let gap = sb - sa - 0.5 * (a.length + b.length);
                if gap < cfg.idm.s0_min_spacing + cfg.spawn_time_gap * a.v {
                    return false;
                }
            }
        }
    }
    true
}

/// Samples a merge scenario: the ego on `ego_lane` running the PUT, others on
/// `other_lanes` running MOBIL with individually sampled IDM headways.
/// Positions are rejection-sampled until spacing-valid.
pub fn sample_scenario(cfg: &ScenarioConfig, put: Arc<PutPolicy>, rng: &mut ChaCha8Rng) -> Result<WorldState> {
    cfg.validate()?;
    let n = cfg.num_other_vehicles;
    let headways: Vec<f64> = (0..=n).map(|_| sample(rng, cfg.headway_range)).collect();
    let with_headway = |t: f64| IdmParams {
        time_headway: t,
        ..cfg.idm
    };
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let mut pairs = Vec::with_capacity(n + 1);
        let mut lanes = Vec::with_capacity(n + 1);
        let place = |lane: usize, x: f64, v: f64, id: VehicleId| {
            let l = &cfg.map.lanes[lane];
            let p = l.project(x, l.centerline[0].1);
            let (px, py, heading) = l.point_at(p.s, 0.0);
            VehicleState {
                id,
                x: px,
                y: py,
                theta: heading,
                v,
                steering_angle: 0.0,
                length: cfg.vehicle_length,
                width: cfg.vehicle_width,
            }
        };
        let ego_x = sample(rng, cfg.ego_x_range);
        let ego_v = sample(rng, cfg.speed_range);
        pairs.push((
            place(cfg.ego_lane, ego_x, ego_v, 0),
            BehaviorPolicy::PolicyUnderTest {
                put: Arc::clone(&put),
                fallback: with_headway(headways[0]),
            },
        ));
        lanes.push(cfg.ego_lane);
        for i in 0..n {
            let lane = cfg.other_lanes[rng.random_range(0..cfg.other_lanes.len())];
            let x = sample(rng, cfg.other_x_range);
            let v = sample(rng, cfg.speed_range);
            pairs.push((
                place(lane, x, v, i as VehicleId + 1),
                BehaviorPolicy::Mobil {
                    idm: with_headway(headways[i + 1]),
                    mobil: cfg.mobil,
                    target_lane: None,
                },
            ));
            lanes.push(lane);
        }
        let world = WorldState::new(pairs, cfg.map.clone(), cfg.goal.clone(), cfg.step, cfg.seed)?;
        if placement_valid(&world, &lanes, cfg) {
            return Ok(world);
        }
    }
    Err(CpeError::OverDense(MAX_PLACEMENT_ATTEMPTS))
}

/// Independent 64-bit seed for episode `index` of a run seeded with `base`.
pub fn episode_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn scenario_for_seed(cfg: &ScenarioConfig, put: Arc<PutPolicy>, seed: u64) -> Result<WorldState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = cfg.clone();
    c.seed = seed;
    sample_scenario(&c, put, &mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Collision,
    Goal,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub outcome: Outcome,
    pub steps_taken: usize,
    pub put_executed_steps: usize,
    pub total_steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reports: Option<Vec<CpeReport>>,
    /// Full vehicle states after every step, when recorded.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<Vec<VehicleState>>>,
}

impl EpisodeResult {
    pub fn execution_rate(&self) -> f64 {
        self.put_executed_steps as f64 / self.total_steps as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSettings {
    pub gate: GateSettings,
    pub gated: bool,
    /// Re-run the gate every this many steps, reusing the last decision in
    /// between.
    pub gate_period_steps: usize,
    pub record_reports: bool,
    pub record_trace: bool,
}

impl Default for EpisodeSettings {
    fn default() -> Self {
        Self {
            gate: GateSettings::default(),
            gated: true,
            gate_period_steps: 1,
            record_reports: false,
            record_trace: false,
        }
    }
}

/// Runs one episode from an already sampled world.
pub fn run_world(mut world: WorldState, seed: u64, max_steps: usize, pool: &PolicyPool, settings: &EpisodeSettings) -> Result<EpisodeResult> {
    let period = settings.gate_period_steps.max(1);
    let mut reports = settings.record_reports.then(Vec::new);
    let mut trace = settings.record_trace.then(Vec::new);
    let mut executed = 0;
    let mut execute = true;
    let mut outcome = Outcome::Timeout;
    let mut steps = 0;
    for step in 0..max_steps {
        if settings.gated && step % period == 0 {
            let report = evaluate(&world, pool, &settings.gate)?.report;
            execute = report.execute_put;
            if let Some(r) = reports.as_mut() {
                r.push(report);
            }
        }
        let control = if execute {
            executed += 1;
            EgoControl::Put
        } else {
            EgoControl::Fallback
        };
        let out = advance(&mut world, control)?;
        steps += 1;
        if let Some(t) = trace.as_mut() {
            t.push(world.vehicles.clone());
        }
        if out.ego_collision {
            outcome = Outcome::Collision;
            break;
        }
        if out.goal {
            outcome = Outcome::Goal;
            break;
        }
    }
    Ok(EpisodeResult {
        seed,
        outcome,
        steps_taken: steps,
        put_executed_steps: executed,
        total_steps: steps,
        reports,
        trace,
    })
}

/// Samples the scenario for `seed` and runs it. Ungated episodes always run
/// the PUT.
pub fn run_episode(cfg: &ScenarioConfig, seed: u64, pool: &PolicyPool, put: Arc<PutPolicy>, settings: &EpisodeSettings) -> Result<EpisodeResult> {
    let world = scenario_for_seed(cfg, put, seed)?;
    run_world(world, seed, cfg.max_steps, pool, settings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub rho_max: f64,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub execution_rate: f64,
    pub episodes: usize,
    pub goals: usize,
    pub collisions: usize,
    pub timeouts: usize,
}

impl MetricsRow {
    pub fn aggregate(rho_max: f64, results: &[EpisodeResult]) -> Self {
        let count = |o: Outcome| results.iter().filter(|r| r.outcome == o).count();
        let n = results.len();
        let (goals, collisions, timeouts) = (count(Outcome::Goal), count(Outcome::Collision), count(Outcome::Timeout));
        let rate = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
        let execution_rate = if n == 0 {
            0.0
        } else {
            results.iter().map(EpisodeResult::execution_rate).sum::<f64>() / n as f64
        };
        Self {
            rho_max,
            success_rate: rate(goals),
            collision_rate: rate(collisions),
            execution_rate,
            episodes: n,
            goals,
            collisions,
            timeouts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<MetricsRow>,
    /// Episodes per threshold, in `rows` order, each sorted by episode index.
    pub episodes: Vec<Vec<EpisodeResult>>,
}

/// Runs `episodes_per_point` gated episodes at every threshold. Episode `i`
/// uses the same seed for every threshold.
pub fn sweep_rho(
    cfg: &ScenarioConfig,
    pool: &PolicyPool,
    put: Arc<PutPolicy>,
    rho_values: &[f64],
    episodes_per_point: usize,
    settings: &EpisodeSettings,
) -> Result<SweepResult> {
    let seeds: Vec<u64> = (0..episodes_per_point as u64)
        .map(|i| episode_seed(cfg.seed, i))
        .collect();
    let jobs: Vec<(usize, u64)> = (0..rho_values.len())
        .flat_map(|r| seeds.iter().map(move |&s| (r, s)))
        .collect();
    let results = jobs
        .into_par_iter()
        .map(|(r, seed)| {
            let mut s = *settings;
            s.gate.rho_max = rho_values[r];
            run_episode(cfg, seed, pool, Arc::clone(&put), &s)
        })
        .collect::<Result<Vec<_>>>()?;
    let episodes: Vec<Vec<EpisodeResult>> = if episodes_per_point == 0 {
        vec![Vec::new(); rho_values.len()]
    } else {
        results
            .chunks(episodes_per_point)
            .map(<[EpisodeResult]>::to_vec)
            .collect()
    };
    let rows = rho_values
        .iter()
        .zip(&episodes)
        .map(|(&rho, eps)| MetricsRow::aggregate(rho, eps))
        .collect();
    Ok(SweepResult { rows, episodes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn put() -> Arc<PutPolicy> {
        Arc::new(PutPolicy::scripted())
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = ScenarioConfig::default();
        let a = scenario_for_seed(&cfg, put(), 11).unwrap();
        let b = scenario_for_seed(&cfg, put(), 11).unwrap();
        assert_eq!(a, b);
        let c = scenario_for_seed(&cfg, put(), 12).unwrap();
        assert_ne!(a.vehicles, c.vehicles);
    }

    #[test]
    fn lone_ego_scenario() {
        let cfg = ScenarioConfig {
            num_other_vehicles: 0,
            ..Default::default()
        };
        let w = scenario_for_seed(&cfg, put(), 1).unwrap();
        assert_eq!(w.vehicles.len(), 1);
        assert_eq!(w.ego_id().unwrap(), 0);
    }

    #[test]
    fn over_dense_config_fails() {
        let cfg = ScenarioConfig {
            num_other_vehicles: 12,
            other_x_range: (0.0, 30.0),
            ..Default::default()
        };
        let err = scenario_for_seed(&cfg, put(), 1).unwrap_err();
        assert_eq!(err.to_string(), "config over-dense: no valid placement after 1000 attempts");
    }

    #[test]
    fn lone_scripted_ego_reaches_goal() {
        let cfg = ScenarioConfig {
            num_other_vehicles: 0,
            ..Default::default()
        };
        let r = run_episode(&cfg, 5, &PolicyPool::default(), put(), &EpisodeSettings::default()).unwrap();
        assert_eq!(r.outcome, Outcome::Goal, "{r:?}");
        assert_eq!(r.put_executed_steps, r.total_steps);
    }

    #[test]
    fn metrics_aggregate_counts() {
        let mk = |outcome, exec| EpisodeResult {
            seed: 0,
            outcome,
            steps_taken: 4,
            put_executed_steps: exec,
            total_steps: 4,
            reports: None,
            trace: None,
        };
        let row = MetricsRow::aggregate(
            0.5,
            &[mk(Outcome::Goal, 4), mk(Outcome::Collision, 2), mk(Outcome::Timeout, 0), mk(Outcome::Goal, 2)],
        );
        assert_eq!(row.success_rate, 0.5);
        assert_eq!(row.collision_rate, 0.25);
        assert_eq!(row.execution_rate, 0.5);
        assert_eq!(row.goals + row.collisions + row.timeouts, row.episodes);
    }

    #[test]
    fn seeds_are_distinct() {
        let mut s: Vec<u64> = (0..1000).map(|i| episode_seed(7, i)).collect();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 1000);
    }
}
