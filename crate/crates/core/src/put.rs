//! Policies under test (the ego's policy), their file format and the reward
//! signal.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::drivers::{idm_acceleration, IdmParams, Leader};
use crate::dynamics::{Action, ActionLimits};
use crate::error::{CpeError, Result};
use crate::map::interval_deviation;
use crate::world::{VehicleId, WorldState, OBS_DIM, OBS_FEATURES, OBS_SLOTS};

/// Parameters of the gap-acceptance merge controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeParams {
    pub target_lane_y: f64,
    pub lane_width: f64,
    /// x coordinate where the merge lane ends.
    pub merge_end_x: f64,
    pub desired_speed: f64,
    pub vehicle_length: f64,
    pub wheelbase: f64,
    pub dt: f64,
    /// Minimum bumper gaps (m) to the target-lane vehicles ahead and behind.
    pub min_front_gap: f64,
    pub min_rear_gap: f64,
    /// Extra gap per m/s of own speed (front) or follower speed (rear).
    pub front_headway: f64,
    pub rear_headway: f64,
    /// Extra gap per m/s of closing speed.
    pub closing_time: f64,
    /// Deceleration used to let an adjacent vehicle pass.
    pub yield_decel: f64,
}

impl Default for MergeParams {
    fn default() -> Self {
        Self {
            target_lane_y: 3.5,
            lane_width: 3.5,
            merge_end_x: crate::map::DEFAULT_MERGE_END,
            desired_speed: 12.0,
            vehicle_length: crate::world::DEFAULT_LENGTH,
            wheelbase: 2.7,
            dt: 0.2,
            min_front_gap: 4.0,
            min_rear_gap: 4.0,
            front_headway: 0.5,
            rear_headway: 0.5,
            closing_time: 1.0,
            yield_decel: 1.0,
        }
    }
}

impl MergeParams {
    /// Same controller with gap acceptance that ignores speed and accepts
    /// sub-car-length gaps.
    pub fn risky() -> Self {
        Self {
            min_front_gap: -1.0,
            min_rear_gap: -5.0,
            front_headway: 0.0,
            rear_headway: 0.0,
            closing_time: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.cols)
            .zip(&self.bias)
            .map(|(row, b)| {
                let z: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b;
                z.tanh()
            })
            .collect()
    }
}

fn default_activation() -> String {
    "tanh".to_string()
}

fn default_output_scale() -> [f64; 2] {
    [4.0, 0.2]
}

/// Affine + tanh stack mapping an observation to `(accel, steering_rate)`
/// means, scaled by `output_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricPolicy {
    pub layers: Vec<Layer>,
    #[serde(default = "default_activation")]
    pub activation: String,
    #[serde(default = "default_output_scale")]
    pub output_scale: [f64; 2],
}

impl ParametricPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.activation != "tanh" {
            return Err(CpeError::InvalidConfig(format!(
                "unsupported activation {:?}",
                self.activation
            )));
        }
        if self.layers.is_empty() {
            return Err(CpeError::LayerShape {
                layer: 0,
                reason: "policy has no layers".into(),
            });
        }
        let mut expected_in = OBS_DIM;
        for (i, l) in self.layers.iter().enumerate() {
            let fail = |reason: String| Err(CpeError::LayerShape { layer: i, reason });
            if l.cols != expected_in {
                return fail(format!("expects input {expected_in}, declares {}", l.cols));
            }
            if l.rows == 0 {
                return fail("zero rows".into());
            }
            if l.weights.len() != l.rows * l.cols {
                return fail(format!(
                    "{} weights for a {}x{} matrix",
                    l.weights.len(),
                    l.rows,
                    l.cols
                ));
            }
            if l.bias.len() != l.rows {
                return fail(format!("{} biases for {} rows", l.bias.len(), l.rows));
            }
            if l.weights.iter().chain(&l.bias).any(|w| !w.is_finite()) {
                return fail("non-finite parameter".into());
            }
            expected_in = l.rows;
        }
        if expected_in != 2 {
            return Err(CpeError::LayerShape {
                layer: self.layers.len() - 1,
                reason: format!("outputs {expected_in} values, expected 2"),
            });
        }
        Ok(())
    }

    pub fn evaluate(&self, obs: &[f64]) -> Action {
        let out = self
            .layers
            .iter()
            .fold(obs.to_vec(), |x, layer| layer.forward(&x));
        Action::new(out[0] * self.output_scale[0], out[1] * self.output_scale[1])
    }

    /// Single linear layer with all-zero weights and the given bias.
    pub fn constant(bias: [f64; 2]) -> Self {
        Self {
            layers: vec![Layer {
                rows: 2,
                cols: OBS_DIM,
                weights: vec![0.0; 2 * OBS_DIM],
                bias: bias.to_vec(),
            }],
            activation: default_activation(),
            output_scale: default_output_scale(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params")]
pub enum PutPolicy {
    Scripted(MergeParams),
    RiskyScripted(MergeParams),
    Parametric(ParametricPolicy),
}

impl PutPolicy {
    pub fn scripted() -> Self {
        PutPolicy::Scripted(MergeParams::default())
    }

    pub fn risky() -> Self {
        PutPolicy::RiskyScripted(MergeParams::risky())
    }
}

/// Deterministic action of the PUT. `steering_angle` is the ego's own wheel
/// angle, which the observation does not carry.
pub fn put_action(obs: &[f64], steering_angle: f64, pol: &PutPolicy) -> Result<Action> {
    if obs.len() != OBS_DIM {
        return Err(CpeError::ObservationDimension(obs.len()));
    }
    Ok(match pol {
        PutPolicy::Parametric(p) => p.evaluate(obs),
        PutPolicy::Scripted(m) | PutPolicy::RiskyScripted(m) => merge_action(obs, steering_angle, m),
    })
}

struct Seen {
    x: f64,
    y: f64,
    v: f64,
}

const MAX_WHEEL_ANGLE: f64 = 0.1;

fn merge_action(obs: &[f64], steering_angle: f64, m: &MergeParams) -> Action {
    let ego = Seen {
        x: obs[0],
        y: obs[1],
        v: obs[2],
    };
    let theta = obs[3];
    let others: Vec<Seen> = (1..OBS_SLOTS)
        .map(|i| &obs[i * OBS_FEATURES..(i + 1) * OBS_FEATURES])
        .filter(|s| s.iter().any(|&f| f != 0.0))
        .map(|s| Seen {
            x: s[0],
            y: s[1],
            v: s[2],
        })
        .collect();

    let half = 0.5 * m.lane_width;
    let in_target = |s: &Seen| (s.y - m.target_lane_y).abs() < half;
    let front = others
        .iter()
        .filter(|o| in_target(o) && o.x > ego.x)
        .min_by(|a, b| a.x.total_cmp(&b.x));
    let rear = others
        .iter()
        .filter(|o| in_target(o) && o.x <= ego.x)
        .max_by(|a, b| a.x.total_cmp(&b.x));

    let front_gap = front.map(|f| f.x - ego.x - m.vehicle_length);
    let rear_gap = rear.map(|r| ego.x - r.x - m.vehicle_length);

    let front_ok = match (front, front_gap) {
        (Some(f), Some(g)) => {
            g >= m.min_front_gap + m.front_headway * ego.v + m.closing_time * (ego.v - f.v).max(0.0)
        }
        _ => true,
    };
    let rear_ok = match (rear, rear_gap) {
        (Some(r), Some(g)) => {
            g >= m.min_rear_gap + m.rear_headway * r.v + m.closing_time * (r.v - ego.v).max(0.0)
        }
        _ => true,
    };

    let committed = in_target(&ego);
    let merging = committed || (front_ok && rear_ok);
    let lane_y = if merging {
        m.target_lane_y
    } else {
        m.target_lane_y - m.lane_width
    };

    let idm = IdmParams {
        v_desired: m.desired_speed,
        ..IdmParams::default()
    };
    let front_leader = front.zip(front_gap).map(|(f, gap)| Leader { gap, v: f.v });
    let alongside = !committed && front_gap.is_some_and(|g| g <= 0.0);
    let mut accel = if alongside {
        -m.yield_decel
    } else {
        idm_acceleration(ego.v, front_leader, &idm, m.dt)
    };
    if !merging {
        let end_gap = m.merge_end_x - ego.x - 0.5 * (m.wheelbase + m.vehicle_length);
        let end = idm_acceleration(ego.v, Some(Leader { gap: end_gap, v: 0.0 }), &idm, m.dt);
        accel = accel.min(end);
    }

    let limits = ActionLimits::default();
    let lookahead = (1.5 * ego.v).max(6.0);
    let alpha = (lane_y - ego.y).atan2(lookahead) - theta;
    let dist = lookahead.hypot(lane_y - ego.y);
    // small wheel angles only: unwinding is rate limited
    let target = (2.0 * m.wheelbase * alpha.sin() / dist).atan().clamp(-MAX_WHEEL_ANGLE, MAX_WHEEL_ANGLE);
    let steering_rate =
        ((target - steering_angle) / m.dt).clamp(-limits.steering_rate_max, limits.steering_rate_max);
    Action::new(accel, steering_rate)
}

pub fn load_policy(path: impl AsRef<Path>) -> Result<PutPolicy> {
    let text = fs::read_to_string(path)?;
    parse_policy(&text)
}

pub fn parse_policy(text: &str) -> Result<PutPolicy> {
    let p: ParametricPolicy = serde_json::from_str(text)?;
    p.validate()?;
    Ok(PutPolicy::Parametric(p))
}

pub fn save_policy(p: &ParametricPolicy, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(p)?)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub goal_reward: f64,
    pub collision_reward: f64,
    pub shaping_weight: f64,
    pub action_penalty_weight: f64,
    /// Normalizers bringing each shaping term into [0, 1].
    pub distance_scale: f64,
    pub angle_scale: f64,
    pub velocity_scale: f64,
    pub accel_scale: f64,
    pub steering_rate_scale: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            goal_reward: 10.0,
            collision_reward: -10.0,
            shaping_weight: 0.1,
            action_penalty_weight: 0.1,
            distance_scale: crate::map::DEFAULT_ROAD_LENGTH,
            angle_scale: std::f64::consts::PI,
            velocity_scale: 30.0,
            accel_scale: 8.0,
            steering_rate_scale: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepEvents {
    pub collision: bool,
    pub goal: bool,
    pub timeout: bool,
}

/// Reward for the ego at `world` after taking `action`.
pub fn step_reward(
    world: &WorldState,
    ego_id: VehicleId,
    action: Action,
    events: StepEvents,
    w: &RewardWeights,
) -> Result<f64> {
    let ego = world.vehicle(ego_id).ok_or(CpeError::EgoNotFound)?;
    let (cx, cy) = world.center(ego);
    let g = &world.goal;
    let unit = |x: f64| x.min(1.0);
    let d_goal = unit(g.distance_to_region(cx, cy) / w.distance_scale);
    let d_theta = unit(interval_deviation(ego.theta, g.theta_range) / w.angle_scale);
    let d_v = unit(interval_deviation(ego.v, g.v_range) / w.velocity_scale);
    let a = unit((action.accel / w.accel_scale).abs());
    let s = unit((action.steering_rate / w.steering_rate_scale).abs());

    let mut r = 0.0;
    if events.goal {
        r += w.goal_reward;
    }
    if events.collision {
        r += w.collision_reward;
    }
    r -= w.shaping_weight * (d_goal + d_theta + d_v);
    r -= w.action_penalty_weight * (a * a + s * s);
    Ok(r)
}
