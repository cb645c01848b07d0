//! Kinematic bicycle integration, footprint collision tests and the goal
//! predicate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{CpeError, Result};
use crate::world::{VehicleId, VehicleState, WorldState};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub accel: f64,
    pub steering_rate: f64,
}

impl Action {
    pub const ZERO: Action = Action {
        accel: 0.0,
        steering_rate: 0.0,
    };

    pub fn new(accel: f64, steering_rate: f64) -> Self {
        Self {
            accel,
            steering_rate,
        }
    }

    pub fn clamped(self, limits: &ActionLimits) -> Self {
        Self {
            accel: self.accel.clamp(limits.accel_min, limits.accel_max),
            steering_rate: self
                .steering_rate
                .clamp(-limits.steering_rate_max, limits.steering_rate_max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionLimits {
    pub accel_min: f64,
    pub accel_max: f64,
    pub steering_rate_max: f64,
    pub steering_angle_max: f64,
}

impl Default for ActionLimits {
    fn default() -> Self {
        Self {
            accel_min: -8.0,
            accel_max: 4.0,
            steering_rate_max: 0.2,
            steering_angle_max: 0.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub dt: f64,
    pub wheelbase: f64,
    #[serde(default)]
    pub limits: ActionLimits,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            dt: 0.2,
            wheelbase: 2.7,
            limits: ActionLimits::default(),
        }
    }
}

impl StepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.wheelbase > 0.0) {
            return Err(CpeError::InvalidConfig(
                "dt and wheelbase must be positive".into(),
            ));
        }
        let l = &self.limits;
        if !(l.accel_min <= 0.0 && l.accel_max >= 0.0 && l.steering_rate_max >= 0.0) {
            return Err(CpeError::InvalidConfig("action limits must bracket 0".into()));
        }
        Ok(())
    }
}

/// Wraps an angle into (-pi, pi]. Angles already in range pass through
/// untouched so straight-line motion stays exact.
pub fn normalize_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// One explicit-Euler step of the kinematic bicycle model. Every right-hand
/// side uses the pre-step state.
pub fn bicycle_step(s: &VehicleState, a: Action, cfg: &StepConfig) -> Result<VehicleState> {
    if !s.is_finite() || !a.accel.is_finite() || !a.steering_rate.is_finite() {
        return Err(CpeError::InvalidState(format!(
            "non-finite input for vehicle {}",
            s.id
        )));
    }
    let a = a.clamped(&cfg.limits);
    let dt = cfg.dt;
    let max_angle = cfg.limits.steering_angle_max;
    let mut next = *s;
    next.x = s.x + s.v * s.theta.cos() * dt;
    next.y = s.y + s.v * s.theta.sin() * dt;
    next.theta = normalize_angle(s.theta + s.v / cfg.wheelbase * s.steering_angle.tan() * dt);
    next.steering_angle = (s.steering_angle + a.steering_rate * dt).clamp(-max_angle, max_angle);
    next.v = (s.v + a.accel * dt).max(0.0);
    Ok(next)
}

/// Oriented rectangle used for collision tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub half_length: f64,
    pub half_width: f64,
    pub theta: f64,
}

impl OrientedBox {
    pub fn of_vehicle(v: &VehicleState, wheelbase: f64) -> Self {
        let (cx, cy) = v.center(wheelbase);
        Self {
            cx,
            cy,
            half_length: 0.5 * v.length,
            half_width: 0.5 * v.width,
            theta: v.theta,
        }
    }

    pub fn axes(&self) -> [(f64, f64); 2] {
        let (s, c) = self.theta.sin_cos();
        [(c, s), (-s, c)]
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        let [(ux, uy), (wx, wy)] = self.axes();
        let (l, w) = (self.half_length, self.half_width);
        [(l, w), (-l, w), (-l, -w), (l, -w)].map(|(a, b)| {
            (self.cx + a * ux + b * wx, self.cy + a * uy + b * wy)
        })
    }

    fn project(&self, axis: (f64, f64)) -> (f64, f64) {
        let c = self.corners();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (x, y) in c {
            let p = x * axis.0 + y * axis.1;
            lo = lo.min(p);
            hi = hi.max(p);
        }
        (lo, hi)
    }

    /// Separating-axis test over the four edge normals. Touching boxes count
    /// as overlapping.
    pub fn overlaps(&self, other: &OrientedBox) -> bool {
        self.axes()
            .into_iter()
            .chain(other.axes())
            .all(|axis| {
                let (a0, a1) = self.project(axis);
                let (b0, b1) = other.project(axis);
                a1 >= b0 && b1 >= a0
            })
    }
}

/// All overlapping vehicle pairs `(i, j)` with `i < j`, sorted.
pub fn check_collisions(world: &WorldState) -> Vec<(VehicleId, VehicleId)> {
    let wb = world.step.wheelbase;
    let boxes: Vec<(VehicleId, OrientedBox)> = world
        .vehicles
        .iter()
        .map(|v| (v.id, OrientedBox::of_vehicle(v, wb)))
        .collect();
    let mut pairs = Vec::new();
    for (i, (id_a, a)) in boxes.iter().enumerate() {
        for (id_b, b) in &boxes[i + 1..] {
            // cheap reject on bounding circles
            let reach = a.half_length.hypot(a.half_width) + b.half_length.hypot(b.half_width);
            if (a.cx - b.cx).hypot(a.cy - b.cy) > reach {
                continue;
            }
            if a.overlaps(b) {
                pairs.push(((*id_a).min(*id_b), (*id_a).max(*id_b)));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

pub fn goal_reached(world: &WorldState, ego_id: VehicleId) -> Result<bool> {
    let ego = world.vehicle(ego_id).ok_or(CpeError::EgoNotFound)?;
    let (cx, cy) = world.center(ego);
    let g = &world.goal;
    Ok(g.contains(cx, cy)
        && (g.v_range.0..=g.v_range.1).contains(&ego.v)
        && (g.theta_range.0..=g.theta_range.1).contains(&ego.theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::{ego_policy, idm_policy, world_with};

    fn state(x: f64, theta: f64, v: f64) -> VehicleState {
        VehicleState::new(0, x, 0.0, theta, v)
    }

    #[test]
    fn straight_coasting() {
        let cfg = StepConfig::default();
        let s = state(0.0, 0.0, 10.0);
        let n = bicycle_step(&s, Action::ZERO, &cfg).unwrap();
        assert_eq!(n.x, 2.0);
        assert_eq!((n.y, n.theta, n.v, n.steering_angle), (0.0, 0.0, 10.0, 0.0));
    }

    #[test]
    fn at_rest_stays_put() {
        let s = state(3.0, 0.3, 0.0);
        let n = bicycle_step(&s, Action::ZERO, &StepConfig::default()).unwrap();
        assert_eq!(n, s);
    }

    #[test]
    fn euler_uses_old_speed() {
        let s = state(0.0, 0.0, 10.0);
        let n = bicycle_step(&s, Action::new(2.0, 0.0), &StepConfig::default()).unwrap();
        assert_eq!(n.x, 2.0);
        assert_eq!(n.v, 10.4);
    }

    #[test]
    fn speed_never_negative() {
        let s = state(0.0, 0.0, 0.5);
        let n = bicycle_step(&s, Action::new(-8.0, 0.0), &StepConfig::default()).unwrap();
        assert_eq!(n.v, 0.0);
    }

    #[test]
    fn action_is_clamped() {
        let s = state(0.0, 0.0, 10.0);
        let n = bicycle_step(&s, Action::new(100.0, 5.0), &StepConfig::default()).unwrap();
        assert!((n.v - 10.8).abs() < 1e-12);
        assert!((n.steering_angle - 0.04).abs() < 1e-12);
    }

    #[test]
    fn non_finite_rejected() {
        let s = state(f64::NAN, 0.0, 1.0);
        let err = bicycle_step(&s, Action::ZERO, &StepConfig::default()).unwrap_err();
        assert!(err.to_string().contains("invalid state"));
        let s = state(0.0, 0.0, 1.0);
        assert!(bicycle_step(&s, Action::new(f64::INFINITY, 0.0), &StepConfig::default()).is_err());
    }

    #[test]
    fn angle_wraps_into_half_open_interval() {
        assert_eq!(normalize_angle(PI), PI);
        assert!((normalize_angle(-PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(normalize_angle(-0.1), -0.1);
    }

    fn pair_world(a: VehicleState, b: VehicleState) -> WorldState {
        world_with(vec![(a, ego_policy()), (b, idm_policy())])
    }

    #[test]
    fn collisions_basic_cases() {
        let a = VehicleState::new(0, 50.0, 0.0, 0.0, 0.0);
        let mut b = a;
        b.id = 1;
        assert_eq!(check_collisions(&pair_world(a, b)), vec![(0, 1)]);
        b.x = 150.0;
        assert!(check_collisions(&pair_world(a, b)).is_empty());
        // 4.9 m between centers on a 5 m car: -0.1 m bumper gap
        b.x = 54.9;
        assert_eq!(check_collisions(&pair_world(a, b)), vec![(0, 1)]);
        b.x = 55.1;
        assert!(check_collisions(&pair_world(a, b)).is_empty());
    }

    #[test]
    fn collision_axis_aligned_oracle() {
        // axis-aligned interval intersection against SAT
        let a = OrientedBox {
            cx: 0.0,
            cy: 0.0,
            half_length: 2.5,
            half_width: 1.0,
            theta: 0.0,
        };
        for i in -60..=60 {
            for j in -30..=30 {
                let (dx, dy) = (i as f64 * 0.1 + 0.05, j as f64 * 0.1 + 0.05);
                let b = OrientedBox { cx: dx, cy: dy, ..a };
                let oracle = dx.abs() <= 5.0 && dy.abs() <= 2.0;
                assert_eq!(a.overlaps(&b), oracle, "dx={dx} dy={dy}");
            }
        }
    }

    #[test]
    fn goal_predicate() {
        let mut ego = VehicleState::new(0, 180.0, 3.5, 0.0, 10.0);
        let w = world_with(vec![(ego, ego_policy())]);
        assert!(goal_reached(&w, 0).unwrap());
        ego.v = 20.0;
        assert!(!goal_reached(&world_with(vec![(ego, ego_policy())]), 0).unwrap());
        ego.v = 10.0;
        ego.theta = 0.1;
        assert!(!goal_reached(&world_with(vec![(ego, ego_policy())]), 0).unwrap());
        ego.theta = 0.0;
        ego.x = 100.0;
        assert!(!goal_reached(&world_with(vec![(ego, ego_policy())]), 0).unwrap());
    }
}
