//! Synchronous world stepping: every vehicle's action is computed from the
//! same pre-step snapshot, then all are integrated together.

use crate::drivers::{const_accel_action, lane_follow_action, lane_follow_in, mobil_decide, LaneDecision};
use crate::dynamics::{bicycle_step, check_collisions, goal_reached, Action};
use crate::error::Result;
use crate::put::put_action;
use crate::world::{build_observation, BehaviorPolicy, VehicleId, WorldState};

/// Lateral offset (m) under which a MOBIL vehicle counts as settled in its
/// lane and may consider another change.
const SETTLED_OFFSET: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EgoControl {
    /// Run the policy under test.
    Put,
    /// Run the lane-following fallback.
    Fallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub ego_action: Action,
    pub collisions: Vec<(VehicleId, VehicleId)>,
    pub ego_collision: bool,
    pub goal: bool,
}

fn vehicle_action(world: &WorldState, idx: usize, ego_control: EgoControl) -> Result<(Action, Option<usize>)> {
    let me = &world.vehicles[idx];
    let action = match &world.assignments[idx].policy {
        BehaviorPolicy::Idm { params } | BehaviorPolicy::LaneFollowFallback { params } => {
            lane_follow_action(world, me.id, params)?
        }
        BehaviorPolicy::Mobil {
            idm,
            mobil,
            target_lane,
        } => {
            let (nearest, p) = world.map.nearest_lane(me.x, me.y);
            let mut lane = target_lane.unwrap_or(nearest);
            if lane == nearest && p.d.abs() < SETTLED_OFFSET {
                let decision = mobil_decide(world, me.id, mobil);
                let target = match decision {
                    LaneDecision::Keep => None,
                    LaneDecision::Left => world.map.lane_change_target(lane, true),
                    LaneDecision::Right => world.map.lane_change_target(lane, false),
                };
                lane = target.unwrap_or(lane);
            }
            return Ok((lane_follow_in(world, idx, lane, idm), Some(lane)));
        }
        BehaviorPolicy::ConstantAcceleration(pol) => const_accel_action(me, pol, &world.map, &world.step),
        BehaviorPolicy::PolicyUnderTest { put, fallback } => match ego_control {
            EgoControl::Put => {
                let obs = build_observation(world, me.id)?;
                put_action(obs.as_slice(), me.steering_angle, put)?
            }
            EgoControl::Fallback => lane_follow_action(world, me.id, fallback)?,
        },
    };
    Ok((action, None))
}

/// Advances the world by one step of `world.step.dt`.
pub fn advance(world: &mut WorldState, ego_control: EgoControl) -> Result<StepOutcome> {
    let ego_id = world.ego_id()?;
    let decided: Vec<(Action, Option<usize>)> = (0..world.vehicles.len())
        .map(|idx| vehicle_action(world, idx, ego_control))
        .collect::<Result<_>>()?;

    let mut ego_action = Action::ZERO;
    for (idx, (action, lane)) in decided.into_iter().enumerate() {
        if world.vehicles[idx].id == ego_id {
            ego_action = action.clamped(&world.step.limits);
        }
        let before_v = world.vehicles[idx].v;
        world.vehicles[idx] = bicycle_step(&world.vehicles[idx], action, &world.step)?;
        match (&mut world.assignments[idx].policy, lane) {
            (BehaviorPolicy::Mobil { target_lane, .. }, Some(l)) => *target_lane = Some(l),
            (BehaviorPolicy::ConstantAcceleration(pol), _) => {
                world.vehicles[idx].v = pol.advance_speed(before_v, &world.step);
            }
            _ => {}
        }
    }
    world.t_w += world.step.dt;

    let collisions = check_collisions(world);
    let ego_collision = collisions.iter().any(|&(a, b)| a == ego_id || b == ego_id);
    let goal = goal_reached(world, ego_id)?;
    Ok(StepOutcome {
        ego_action,
        collisions,
        ego_collision,
        goal,
    })
}
