use std::sync::Arc;

use crate::drivers::{IdmParams, MobilParams};
use crate::dynamics::StepConfig;
use crate::map::{GoalSpec, MapGeometry};
use crate::put::PutPolicy;
use crate::world::{BehaviorPolicy, VehicleState, WorldState};

pub fn ego_policy() -> BehaviorPolicy {
    BehaviorPolicy::PolicyUnderTest {
        put: Arc::new(PutPolicy::scripted()),
        fallback: IdmParams::default(),
    }
}

pub fn idm_policy() -> BehaviorPolicy {
    BehaviorPolicy::Idm {
        params: IdmParams::with_headway(1.5),
    }
}

pub fn mobil_policy(headway: f64) -> BehaviorPolicy {
    BehaviorPolicy::Mobil {
        idm: IdmParams::with_headway(headway),
        mobil: MobilParams::default(),
        target_lane: None,
    }
}

pub fn world_on(pairs: Vec<(VehicleState, BehaviorPolicy)>, map: MapGeometry, goal: GoalSpec) -> WorldState {
    WorldState::new(pairs, map, goal, StepConfig::default(), 0).expect("valid test world")
}

pub fn world_with(pairs: Vec<(VehicleState, BehaviorPolicy)>) -> WorldState {
    world_on(pairs, MapGeometry::default(), GoalSpec::default())
}
