//! Rule-based behavior policies: IDM car following, MOBIL lane changes,
//! the independent constant-acceleration pool members and the lane-following
//! fallback.

use serde::{Deserialize, Serialize};

use crate::dynamics::{normalize_angle, Action, StepConfig};
use crate::error::{CpeError, Result};
use crate::map::{Lane, MapGeometry};
use crate::world::{VehicleId, VehicleState, WorldState};

/// Deceleration commanded when the bumper gap to the leader has closed.
pub const EMERGENCY_DECEL: f64 = -8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    pub v_desired: f64,
    pub a_max: f64,
    pub b_comfort: f64,
    pub s0_min_spacing: f64,
    pub time_headway: f64,
    pub exponent: i32,
    pub v_max: f64,
    pub v_min: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            v_desired: 15.0,
            a_max: 2.5,
            b_comfort: 1.6,
            s0_min_spacing: 2.0,
            time_headway: 1.0,
            exponent: 4,
            v_max: 30.0,
            v_min: 0.0,
        }
    }
}

impl IdmParams {
    pub fn with_headway(time_headway: f64) -> Self {
        Self {
            time_headway,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.v_desired,
            self.a_max,
            self.b_comfort,
            self.s0_min_spacing,
            self.time_headway,
            self.v_max,
        ];
        if positive.iter().any(|p| !(*p > 0.0)) || self.exponent <= 0 || !(self.v_min >= 0.0) {
            return Err(CpeError::InvalidConfig(format!("invalid IDM parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MobilParams {
    pub politeness: f64,
    pub accel_gain_threshold: f64,
    pub b_safe: f64,
}

impl Default for MobilParams {
    fn default() -> Self {
        Self {
            politeness: 0.35,
            accel_gain_threshold: 0.1,
            b_safe: 2.0,
        }
    }
}

impl MobilParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.politeness) || !(self.b_safe > 0.0) {
            return Err(CpeError::InvalidConfig(format!("invalid MOBIL parameters {self:?}")));
        }
        Ok(())
    }
}

/// Accelerates at a fixed rate while holding its lane, ignoring every other
/// vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstAccelPolicy {
    pub a_fixed: f64,
    /// Speed and step count since the policy took over. Set on first use.
    #[serde(default)]
    pub origin: Option<SpeedOrigin>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedOrigin {
    pub v0: f64,
    pub steps: u64,
}

impl ConstAccelPolicy {
    pub fn new(a_fixed: f64) -> Self {
        Self { a_fixed, origin: None }
    }

    /// Speed after one more step, taken from the closed form
    /// `max(0, v0 + a t)` rather than accumulated increments, so the
    /// profile carries no rounding drift.
    pub fn advance_speed(&mut self, v_now: f64, cfg: &StepConfig) -> f64 {
        let a = self.a_fixed.clamp(cfg.limits.accel_min, cfg.limits.accel_max);
        let o = self.origin.get_or_insert(SpeedOrigin { v0: v_now, steps: 0 });
        o.steps += 1;
        (o.v0 + a * (o.steps as f64 * cfg.dt)).max(0.0)
    }
}

/// The vehicle ahead as seen by a follower: bumper-to-bumper gap and speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leader {
    pub gap: f64,
    pub v: f64,
}

/// IDM acceleration, clamped so that one step of length `dt` keeps the speed
/// inside `[v_min, v_max]`.
pub fn idm_acceleration(v: f64, leader: Option<Leader>, p: &IdmParams, dt: f64) -> f64 {
    let free = 1.0 - (v / p.v_desired).powi(p.exponent);
    let raw = match leader {
        None => p.a_max * free,
        Some(l) if l.gap <= 0.0 => EMERGENCY_DECEL,
        Some(l) => {
            let dv = v - l.v;
            let s_star =
                p.s0_min_spacing + v * p.time_headway + v * dv / (2.0 * (p.a_max * p.b_comfort).sqrt());
            // desired gap is never below the jam distance
            let s_star = s_star.max(p.s0_min_spacing);
            p.a_max * (free - (s_star / l.gap).powi(2))
        }
    };
    let lo = ((p.v_min - v) / dt).min(0.0);
    let hi = ((p.v_max - v) / dt).max(0.0);
    raw.clamp(lo, hi)
}

fn more_restrictive(a: Option<Leader>, b: Option<Leader>, v: f64, p: &IdmParams, dt: f64) -> Option<Leader> {
    match (a, b) {
        (Some(x), Some(y)) => {
            if idm_acceleration(v, Some(x), p, dt) <= idm_acceleration(v, Some(y), p, dt) {
                Some(x)
            } else {
                Some(y)
            }
        }
        (x, None) => x,
        (None, y) => y,
    }
}

/// Whether a vehicle's footprint laterally overlaps the lane.
fn occupies(world: &WorldState, v: &VehicleState, lane: &Lane) -> bool {
    let (cx, cy) = world.center(v);
    lane.project(cx, cy).d.abs() < 0.5 * (lane.width + v.width)
}

/// Neighbour search along a lane, measured from an arc-length position.
struct LaneNeighbours {
    ahead: Option<(usize, Leader)>,
    behind: Option<(usize, f64)>,
}

/// Closest vehicles ahead of and behind arc length `s` (of a vehicle with the
/// given length) among those occupying `lane`, skipping `exclude`.
fn lane_neighbours(world: &WorldState, lane_idx: usize, s: f64, length: f64, exclude: usize) -> LaneNeighbours {
    let lane = &world.map.lanes[lane_idx];
    let mut ahead: Option<(usize, f64, Leader)> = None;
    let mut behind: Option<(usize, f64)> = None;
    for (j, other) in world.vehicles.iter().enumerate() {
        if j == exclude || !occupies(world, other, lane) {
            continue;
        }
        let (cx, cy) = world.center(other);
        let so = lane.project(cx, cy).s;
        let gap_len = 0.5 * (length + other.length);
        if so > s || (so == s && j > exclude) {
            let gap = so - s - gap_len;
            if ahead.as_ref().is_none_or(|(_, best, _)| so < *best) {
                ahead = Some((j, so, Leader { gap, v: other.v }));
            }
        } else {
            let gap = s - so - gap_len;
            if behind.as_ref().is_none_or(|(_, best)| gap < *best) {
                behind = Some((j, gap));
            }
        }
    }
    LaneNeighbours {
        ahead: ahead.map(|(j, _, l)| (j, l)),
        behind,
    }
}

fn lane_s(world: &WorldState, v: &VehicleState, lane_idx: usize) -> f64 {
    let (cx, cy) = world.center(v);
    world.map.lanes[lane_idx].project(cx, cy).s
}

/// Stationary virtual leader at the end of the merge lane.
fn lane_end_leader(map: &MapGeometry, lane_idx: usize, s: f64, length: f64) -> Option<Leader> {
    map.is_merge_lane(lane_idx).then(|| Leader {
        gap: map.merge_lane_end_s - s - 0.5 * length,
        v: 0.0,
    })
}

/// The binding leader for vehicle `idx` driving in `lane_idx`: the nearest
/// vehicle ahead in that lane or the merge-lane end, whichever demands the
/// harder braking.
pub fn effective_leader(world: &WorldState, idx: usize, lane_idx: usize, p: &IdmParams) -> Option<Leader> {
    let me = &world.vehicles[idx];
    let s = lane_s(world, me, lane_idx);
    let real = lane_neighbours(world, lane_idx, s, me.length, idx).ahead.map(|(_, l)| l);
    let end = lane_end_leader(&world.map, lane_idx, s, me.length);
    more_restrictive(real, end, me.v, p, world.step.dt)
}

/// IDM acceleration of vehicle `idx` if it drove in `lane_idx`.
pub fn lane_idm_accel(world: &WorldState, idx: usize, lane_idx: usize, p: &IdmParams) -> f64 {
    let leader = effective_leader(world, idx, lane_idx, p);
    idm_acceleration(world.vehicles[idx].v, leader, p, world.step.dt)
}

/// Pure-pursuit steering toward a lane centerline, returned as a steering
/// rate that drives the wheel angle to the pursuit angle within one step.
pub fn lane_tracking_steering(s: &VehicleState, lane: &Lane, cfg: &StepConfig) -> f64 {
    let p = lane.project(s.x, s.y);
    let lookahead = (1.5 * s.v).max(6.0);
    let (tx, ty, _) = lane.point_at(p.s + lookahead, 0.0);
    let alpha = normalize_angle((ty - s.y).atan2(tx - s.x) - s.theta);
    let dist = (tx - s.x).hypot(ty - s.y);
    let target = (2.0 * cfg.wheelbase * alpha.sin() / dist).atan();
    let limit = cfg.limits.steering_rate_max;
    ((target - s.steering_angle) / cfg.dt).clamp(-limit, limit)
}

pub fn const_accel_action(s: &VehicleState, pol: &ConstAccelPolicy, map: &MapGeometry, cfg: &StepConfig) -> Action {
    let (lane, _) = map.nearest_lane(s.x, s.y);
    Action::new(pol.a_fixed, lane_tracking_steering(s, &map.lanes[lane], cfg))
}

/// IDM in the vehicle's current lane with centerline tracking; never changes
/// lane.
pub fn lane_follow_action(world: &WorldState, vehicle_id: VehicleId, p: &IdmParams) -> Result<Action> {
    let idx = world.index_of(vehicle_id).ok_or(CpeError::VehicleNotFound(vehicle_id))?;
    let me = &world.vehicles[idx];
    let (lane, _) = world.map.nearest_lane(me.x, me.y);
    Ok(lane_follow_in(world, idx, lane, p))
}

/// IDM toward `lane` with steering onto its centerline. While the vehicle is
/// still between lanes the leader in its current lane is honoured too.
pub fn lane_follow_in(world: &WorldState, idx: usize, lane: usize, p: &IdmParams) -> Action {
    let me = &world.vehicles[idx];
    let (current, _) = world.map.nearest_lane(me.x, me.y);
    let mut accel = lane_idm_accel(world, idx, lane, p);
    if current != lane {
        accel = accel.min(lane_idm_accel(world, idx, current, p));
    }
    let steer = lane_tracking_steering(me, &world.map.lanes[lane], &world.step);
    Action::new(accel, steer)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LaneDecision {
    Keep,
    Left,
    Right,
}

/// Incentive of moving vehicle `idx` from `from` into `to`, or `None` when
/// the move violates the safety criterion.
fn mobil_incentive(world: &WorldState, idx: usize, from: usize, to: usize, own: &IdmParams, p: &MobilParams) -> Option<f64> {
    let dt = world.step.dt;
    let me = &world.vehicles[idx];
    let params_of = |j: usize| *world.assignments[j].policy.idm_params().unwrap_or(own);

    let s_from = lane_s(world, me, from);
    let cur = lane_neighbours(world, from, s_from, me.length, idx);
    let a_self = lane_idm_accel(world, idx, from, own);

    let s_to = lane_s(world, me, to);
    let tgt = lane_neighbours(world, to, s_to, me.length, idx);
    let new_leader = more_restrictive(
        tgt.ahead.map(|(_, l)| l),
        lane_end_leader(&world.map, to, s_to, me.length),
        me.v,
        own,
        dt,
    );
    if new_leader.is_some_and(|l| l.gap <= 0.0) {
        return None;
    }
    let a_self_new = idm_acceleration(me.v, new_leader, own, dt);

    let mut follower_gain = 0.0;
    if let Some((n, gap_n)) = tgt.behind {
        if gap_n <= 0.0 {
            return None;
        }
        let fp = params_of(n);
        let vn = world.vehicles[n].v;
        let lead_n = tgt.ahead.map(|(j, l)| {
            let s_j = lane_s(world, &world.vehicles[j], to);
            let s_n = lane_s(world, &world.vehicles[n], to);
            Leader {
                gap: s_j - s_n - 0.5 * (world.vehicles[j].length + world.vehicles[n].length),
                v: l.v,
            }
        });
        let a_n = idm_acceleration(vn, lead_n, &fp, dt);
        let a_n_new = idm_acceleration(vn, Some(Leader { gap: gap_n, v: me.v }), &fp, dt);
        if a_n_new < -p.b_safe {
            return None;
        }
        follower_gain += a_n_new - a_n;
    }
    if let Some((o, gap_o)) = cur.behind {
        let fp = params_of(o);
        let vo = world.vehicles[o].v;
        let a_o = idm_acceleration(vo, Some(Leader { gap: gap_o, v: me.v }), &fp, dt);
        let lead_o = cur.ahead.map(|(j, l)| {
            let s_j = lane_s(world, &world.vehicles[j], from);
            let s_o = lane_s(world, &world.vehicles[o], from);
            Leader {
                gap: s_j - s_o - 0.5 * (world.vehicles[j].length + world.vehicles[o].length),
                v: l.v,
            }
        });
        let a_o_new = idm_acceleration(vo, lead_o, &fp, dt);
        follower_gain += a_o_new - a_o;
    }
    Some(a_self_new - a_self + p.politeness * follower_gain)
}

/// MOBIL lane selection for one vehicle. Pure function of the world.
pub fn mobil_decide(world: &WorldState, vehicle_id: VehicleId, p: &MobilParams) -> LaneDecision {
    let Some(idx) = world.index_of(vehicle_id) else {
        return LaneDecision::Keep;
    };
    let own = *world.assignments[idx]
        .policy
        .idm_params()
        .unwrap_or(&IdmParams::default());
    let me = &world.vehicles[idx];
    let (lane, _) = world.map.nearest_lane(me.x, me.y);
    let mut best = (LaneDecision::Keep, p.accel_gain_threshold);
    for (decision, left) in [(LaneDecision::Left, true), (LaneDecision::Right, false)] {
        let Some(target) = world.map.lane_change_target(lane, left) else {
            continue;
        };
        if let Some(gain) = mobil_incentive(world, idx, lane, target, &own, p) {
            if gain > best.1 {
                best = (decision, gain);
            }
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::GoalSpec;
    use crate::test_support::{ego_policy, idm_policy, mobil_policy, world_on};

    const DT: f64 = 0.2;

    #[test]
    fn idm_free_flow_cases() {
        let p = IdmParams::default();
        assert_eq!(idm_acceleration(15.0, None, &p, DT), 0.0);
        assert_eq!(idm_acceleration(0.0, None, &p, DT), 2.5);
        let v: f64 = 7.0;
        assert_eq!(idm_acceleration(v, None, &p, DT), 2.5 * (1.0 - (v / 15.0).powi(4)));
    }

    #[test]
    fn idm_interaction_term() {
        let p = IdmParams::with_headway(1.0);
        let a = idm_acceleration(10.0, Some(Leader { gap: 12.0, v: 10.0 }), &p, DT);
        let oracle = 2.5 * (1.0 - (10.0f64 / 15.0).powi(4) - 1.0);
        assert!((a - oracle).abs() < 1e-12);
        assert!((a + 0.4938).abs() < 1e-3);
    }

    #[test]
    fn idm_closed_gap_is_emergency() {
        let p = IdmParams::default();
        assert_eq!(idm_acceleration(10.0, Some(Leader { gap: 0.0, v: 0.0 }), &p, DT), -8.0);
        assert_eq!(idm_acceleration(10.0, Some(Leader { gap: -1.0, v: 3.0 }), &p, DT), -8.0);
    }

    #[test]
    fn idm_clamps_to_speed_band() {
        let p = IdmParams::default();
        // a near-stopped car cannot be commanded below zero speed
        let a = idm_acceleration(0.1, Some(Leader { gap: 1.0, v: 0.0 }), &p, DT);
        assert!((0.1 + a * DT).abs() < 1e-12);
    }

    fn highway(pairs: Vec<(VehicleState, crate::world::BehaviorPolicy)>) -> WorldState {
        world_on(pairs, MapGeometry::straight_highway(2, 400.0, 3.5), GoalSpec::default())
    }

    #[test]
    fn mobil_keeps_lane_on_empty_road() {
        let w = highway(vec![
            (VehicleState::new(0, 300.0, 3.5, 0.0, 10.0), ego_policy()),
            (VehicleState::new(1, 50.0, 0.0, 0.0, 10.0), mobil_policy(1.5)),
        ]);
        assert_eq!(mobil_decide(&w, 1, &MobilParams::default()), LaneDecision::Keep);
    }

    #[test]
    fn mobil_overtakes_slow_leader() {
        // follower center at s, leader center 10 m bumper gap ahead
        let w = highway(vec![
            (VehicleState::new(0, 390.0, 3.5, 0.0, 10.0), ego_policy()),
            (VehicleState::new(1, 50.0, 0.0, 0.0, 10.0), mobil_policy(1.5)),
            (VehicleState::new(2, 65.0, 0.0, 0.0, 5.0), idm_policy()),
        ]);
        // explicit gains: stay behind the 5 m/s leader vs free road
        let p = IdmParams::with_headway(1.5);
        let s_star = 2.0 + 10.0 * 1.5 + 10.0 * 5.0 / (2.0 * (2.5f64 * 1.6).sqrt());
        let stay = 2.5 * (1.0 - (10.0f64 / 15.0).powi(4) - (s_star / 10.0).powi(2));
        let go = 2.5 * (1.0 - (10.0f64 / 15.0).powi(4));
        assert!(go - stay > 10.0);
        assert!((lane_idm_accel(&w, 1, 0, &p) - stay.max(-10.0 / DT)).abs() < 1e-9);
        assert_eq!(mobil_decide(&w, 1, &MobilParams::default()), LaneDecision::Left);
    }

    #[test]
    fn mobil_rejects_unsafe_gap() {
        let w = highway(vec![
            (VehicleState::new(0, 390.0, 7.0, 0.0, 10.0), ego_policy()),
            (VehicleState::new(1, 50.0, 0.0, 0.0, 10.0), mobil_policy(1.5)),
            (VehicleState::new(2, 65.0, 0.0, 0.0, 5.0), idm_policy()),
            // 3 m bumper gap behind in the target lane, closing at 20 m/s
            (VehicleState::new(3, 42.0, 3.5, 0.0, 20.0), idm_policy()),
        ]);
        // induced deceleration on the new follower
        let p = IdmParams::with_headway(1.5);
        let induced = idm_acceleration(20.0, Some(Leader { gap: 3.0, v: 10.0 }), &p, DT);
        assert!(induced < -2.0);
        assert_eq!(mobil_decide(&w, 1, &MobilParams::default()), LaneDecision::Keep);
    }

    #[test]
    fn lane_keeping_when_centered_is_zero() {
        let map = MapGeometry::default();
        let cfg = StepConfig::default();
        let s = VehicleState::new(1, 20.0, 3.5, 0.0, 10.0);
        let a = const_accel_action(&s, &ConstAccelPolicy::new(0.0), &map, &cfg);
        assert_eq!(a, Action::ZERO);
    }

    #[test]
    fn tracker_recovers_lateral_offset() {
        let map = MapGeometry::straight_highway(2, 2000.0, 3.5);
        let cfg = StepConfig::default();
        let mut s = VehicleState::new(1, 0.0, 1.5, 0.0, 12.0);
        let mut max_overshoot: f64 = 0.0;
        for _ in 0..150 {
            let a = const_accel_action(&s, &ConstAccelPolicy::new(0.0), &map, &cfg);
            s = crate::dynamics::bicycle_step(&s, a, &cfg).unwrap();
            max_overshoot = max_overshoot.min(s.y);
        }
        assert!(s.y.abs() < 0.05, "y = {}", s.y);
        assert!(s.theta.abs() < 0.01);
        assert!(max_overshoot > -0.5, "overshoot {max_overshoot}");
    }

    #[test]
    fn const_accel_speed_sequence() {
        let map = MapGeometry::default();
        let cfg = StepConfig::default();
        let pol = ConstAccelPolicy::new(-2.0);
        let mut s = VehicleState::new(1, 20.0, 0.0, 0.0, 1.0);
        let mut speeds = vec![s.v];
        for _ in 0..5 {
            let a = const_accel_action(&s, &pol, &map, &cfg);
            s = crate::dynamics::bicycle_step(&s, a, &cfg).unwrap();
            speeds.push(s.v);
        }
        let expected = [1.0, 0.6, 0.2, 0.0, 0.0, 0.0];
        for (got, want) in speeds.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{speeds:?}");
        }
    }

    #[test]
    fn lane_follow_cases() {
        let w = world_on(
            vec![(VehicleState::new(0, 20.0, 3.5, 0.0, 15.0), ego_policy())],
            MapGeometry::default(),
            GoalSpec::default(),
        );
        let a = lane_follow_action(&w, 0, &IdmParams::default()).unwrap();
        assert_eq!(a, Action::ZERO);

        let w = world_on(
            vec![
                (VehicleState::new(0, 20.0, 3.5, 0.0, 10.0), ego_policy()),
                (VehicleState::new(1, 35.0, 3.5, 0.0, 0.0), idm_policy()),
            ],
            MapGeometry::default(),
            GoalSpec::default(),
        );
        assert!(lane_follow_action(&w, 0, &IdmParams::default()).unwrap().accel < 0.0);
    }

    #[test]
    fn lane_follow_stops_before_merge_end() {
        let mut w = world_on(
            vec![(VehicleState::new(0, 100.0, 0.0, 0.0, 12.0), ego_policy())],
            MapGeometry::default(),
            GoalSpec::default(),
        );
        let p = IdmParams::default();
        for _ in 0..200 {
            let a = lane_follow_action(&w, 0, &p).unwrap();
            w.vehicles[0] = crate::dynamics::bicycle_step(&w.vehicles[0], a, &w.step).unwrap();
        }
        let ego = w.vehicles[0];
        let (cx, _) = w.center(&ego);
        assert!(ego.v < 0.05);
        assert!(cx + 0.5 * ego.length <= w.map.merge_lane_end_s);
        assert!(ego.y.abs() < 1e-9);
    }
}
