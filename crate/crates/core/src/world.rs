//! World data model: vehicles, their behavior policies, and the forkable
//! simulation snapshot.

use std::cmp::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::drivers::{ConstAccelPolicy, IdmParams, MobilParams};
use crate::dynamics::StepConfig;
use crate::error::{CpeError, Result};
use crate::map::{GoalSpec, MapGeometry};
use crate::put::PutPolicy;

pub type VehicleId = u32;

pub const DEFAULT_LENGTH: f64 = 5.0;
pub const DEFAULT_WIDTH: f64 = 2.0;

/// Number of vehicles packed into an observation, ego included.
pub const OBS_SLOTS: usize = 5;
pub const OBS_FEATURES: usize = 4;
pub const OBS_DIM: usize = OBS_SLOTS * OBS_FEATURES;

/// Kinematic state of one vehicle. The pose `(x, y)` is the rear axle; the
/// footprint rectangle is centered half a wheelbase ahead of it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: VehicleId,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
    pub steering_angle: f64,
    pub length: f64,
    pub width: f64,
}

impl VehicleState {
    pub fn new(id: VehicleId, x: f64, y: f64, theta: f64, v: f64) -> Self {
        Self {
            id,
            x,
            y,
            theta,
            v,
            steering_angle: 0.0,
            length: DEFAULT_LENGTH,
            width: DEFAULT_WIDTH,
        }
    }

    pub fn center(&self, wheelbase: f64) -> (f64, f64) {
        let half = 0.5 * wheelbase;
        (self.x + half * self.theta.cos(), self.y + half * self.theta.sin())
    }

    pub fn is_finite(&self) -> bool {
        [
            self.x,
            self.y,
            self.theta,
            self.v,
            self.steering_angle,
            self.length,
            self.width,
        ]
        .iter()
        .all(|f| f.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum BehaviorPolicy {
    Idm {
        params: IdmParams,
    },
    /// IDM longitudinal control with MOBIL lane selection. `target_lane` is
    /// the lane the vehicle is currently tracking.
    Mobil {
        idm: IdmParams,
        mobil: MobilParams,
        target_lane: Option<usize>,
    },
    ConstantAcceleration(ConstAccelPolicy),
    LaneFollowFallback {
        params: IdmParams,
    },
    /// The ego. `fallback` parameterizes the lane-following controller used
    /// whenever the gate withholds the PUT.
    PolicyUnderTest {
        put: Arc<PutPolicy>,
        fallback: IdmParams,
    },
}

impl BehaviorPolicy {
    pub fn is_put(&self) -> bool {
        matches!(self, BehaviorPolicy::PolicyUnderTest { .. })
    }

    /// IDM parameters the vehicle drives with, if it follows IDM at all.
    pub fn idm_params(&self) -> Option<&IdmParams> {
        match self {
            BehaviorPolicy::Idm { params } | BehaviorPolicy::LaneFollowFallback { params } => {
                Some(params)
            }
            BehaviorPolicy::Mobil { idm, .. } => Some(idm),
            BehaviorPolicy::PolicyUnderTest { fallback, .. } => Some(fallback),
            BehaviorPolicy::ConstantAcceleration(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyAssignment {
    pub vehicle_id: VehicleId,
    pub policy: BehaviorPolicy,
}

/// The forkable simulation snapshot. `vehicles[i]` and `assignments[i]`
/// always describe the same vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub vehicles: Vec<VehicleState>,
    pub assignments: Vec<PolicyAssignment>,
    pub map: MapGeometry,
    pub goal: GoalSpec,
    pub t_w: f64,
    pub rng_seed: u64,
    pub step: StepConfig,
}

impl WorldState {
    pub fn new(
        pairs: Vec<(VehicleState, BehaviorPolicy)>,
        map: MapGeometry,
        goal: GoalSpec,
        step: StepConfig,
        rng_seed: u64,
    ) -> Result<Self> {
        let (vehicles, assignments) = pairs
            .into_iter()
            .map(|(v, policy)| {
                let a = PolicyAssignment {
                    vehicle_id: v.id,
                    policy,
                };
                (v, a)
            })
            .unzip();
        let world = Self {
            vehicles,
            assignments,
            map,
            goal,
            t_w: 0.0,
            rng_seed,
            step,
        };
        world.validate()?;
        Ok(world)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vehicles.len() != self.assignments.len() {
            return Err(CpeError::InvalidState(
                "vehicles and assignments differ in length".into(),
            ));
        }
        let mut ids: Vec<VehicleId> = Vec::with_capacity(self.vehicles.len());
        for (v, a) in self.vehicles.iter().zip(&self.assignments) {
            if v.id != a.vehicle_id {
                return Err(CpeError::InvalidState(format!(
                    "vehicle {} paired with assignment for {}",
                    v.id, a.vehicle_id
                )));
            }
            if !v.is_finite() || v.v < 0.0 || !(v.length > 0.0) || !(v.width > 0.0) {
                return Err(CpeError::InvalidState(format!("vehicle {} malformed", v.id)));
            }
            ids.push(v.id);
        }
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(CpeError::InvalidState("duplicate vehicle id".into()));
        }
        let puts = self.assignments.iter().filter(|a| a.policy.is_put()).count();
        if puts != 1 {
            return Err(CpeError::InvalidState(format!(
                "expected exactly one PolicyUnderTest, found {puts}"
            )));
        }
        let max_width = self.vehicles.iter().map(|v| v.width).fold(0.0, f64::max);
        self.map.validate(max_width)?;
        self.step.validate()?;
        Ok(())
    }

    pub fn ego_id(&self) -> Result<VehicleId> {
        self.assignments
            .iter()
            .find(|a| a.policy.is_put())
            .map(|a| a.vehicle_id)
            .ok_or(CpeError::EgoNotFound)
    }

    pub fn index_of(&self, id: VehicleId) -> Option<usize> {
        self.vehicles.iter().position(|v| v.id == id)
    }

    pub fn vehicle(&self, id: VehicleId) -> Option<&VehicleState> {
        self.vehicles.iter().find(|v| v.id == id)
    }

    pub fn policy(&self, id: VehicleId) -> Option<&BehaviorPolicy> {
        self.assignments
            .iter()
            .find(|a| a.vehicle_id == id)
            .map(|a| &a.policy)
    }

    pub fn center(&self, v: &VehicleState) -> (f64, f64) {
        v.center(self.step.wheelbase)
    }

    pub fn center_distance(&self, a: &VehicleState, b: &VehicleState) -> f64 {
        let (ax, ay) = self.center(a);
        let (bx, by) = self.center(b);
        (ax - bx).hypot(ay - by)
    }
}

/// Deep copy of the world. The PUT is shared behind an `Arc` but is never
/// mutated, so the copy evolves independently of the source.
pub fn fork_world(world: &WorldState) -> WorldState {
    world.clone()
}

/// The `k` non-ego vehicles closest to the ego by center distance, nearest
/// first, ties broken by ascending id.
pub fn nearest_vehicles(world: &WorldState, ego_id: VehicleId, k: usize) -> Result<Vec<VehicleId>> {
    let ego = world.vehicle(ego_id).ok_or(CpeError::EgoNotFound)?;
    let mut others: Vec<(f64, VehicleId)> = world
        .vehicles
        .iter()
        .filter(|v| v.id != ego_id)
        .map(|v| (world.center_distance(ego, v), v.id))
        .collect();
    others.sort_by(|a, b| match a.0.total_cmp(&b.0) {
        Ordering::Equal => a.1.cmp(&b.1),
        o => o,
    });
    Ok(others.into_iter().take(k).map(|(_, id)| id).collect())
}

/// Fixed-size observation: slot 0 is the ego, slots 1..5 the nearest others,
/// each as `(x, y, v, theta)` in world coordinates; unused slots are zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn slot(&self, i: usize) -> &[f64] {
        &self.0[i * OBS_FEATURES..(i + 1) * OBS_FEATURES]
    }
}

pub fn build_observation(world: &WorldState, ego_id: VehicleId) -> Result<Observation> {
    let ego = world.vehicle(ego_id).ok_or(CpeError::EgoNotFound)?;
    let mut values = [0.0; OBS_DIM];
    let mut fill = |slot: usize, v: &VehicleState| {
        let base = slot * OBS_FEATURES;
        values[base..base + OBS_FEATURES].copy_from_slice(&[v.x, v.y, v.v, v.theta]);
    };
    fill(0, ego);
    for (slot, id) in nearest_vehicles(world, ego_id, OBS_SLOTS - 1)?
        .into_iter()
        .enumerate()
    {
        let v = world.vehicle(id).expect("id came from this world");
        fill(slot + 1, v);
    }
    Ok(Observation(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::{ego_policy, idm_policy, world_with};

    fn world_at(offsets: &[(VehicleId, f64, f64)]) -> WorldState {
        let mut pairs = vec![(VehicleState::new(0, 50.0, 0.0, 0.0, 10.0), ego_policy())];
        for &(id, dx, dy) in offsets {
            pairs.push((
                VehicleState::new(id, 50.0 + dx, dy, 0.0, 10.0),
                idm_policy(),
            ));
        }
        world_with(pairs)
    }

    #[test]
    fn nearest_sorted_by_distance() {
        let w = world_at(&[(1, 5.0, 0.0), (2, 10.0, 0.0), (3, -2.0, 0.0)]);
        assert_eq!(nearest_vehicles(&w, 0, 2).unwrap(), vec![3, 1]);
        assert!(nearest_vehicles(&w, 0, 0).unwrap().is_empty());
        assert_eq!(nearest_vehicles(&w, 0, 10).unwrap(), vec![3, 1, 2]);
    }

    #[test]
    fn nearest_ties_broken_by_id() {
        let w = world_at(&[(4, 7.0, 0.0), (1, -7.0, 0.0)]);
        assert_eq!(nearest_vehicles(&w, 0, 1).unwrap(), vec![1]);
    }

    #[test]
    fn unknown_ego_is_an_error() {
        let w = world_at(&[]);
        let err = nearest_vehicles(&w, 99, 1).unwrap_err();
        assert_eq!(err.to_string(), "ego not found");
    }

    #[test]
    fn observation_zero_fills() {
        let w = world_at(&[]);
        let obs = build_observation(&w, 0).unwrap();
        assert_eq!(obs.slot(0), &[50.0, 0.0, 10.0, 0.0]);
        assert!(obs.0[4..].iter().all(|&x| x == 0.0));

        let w = world_at(&[(1, 8.0, 3.5), (2, -20.0, 3.5)]);
        let obs = build_observation(&w, 0).unwrap();
        assert_eq!(obs.slot(1), &[58.0, 3.5, 10.0, 0.0]);
        assert_eq!(obs.slot(2), &[30.0, 3.5, 10.0, 0.0]);
        assert!(obs.0[12..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn observation_drops_farthest() {
        let offsets = [
            (1, 30.0, 3.5),
            (2, -6.0, 3.5),
            (3, 14.0, 3.5),
            (4, -45.0, 3.5),
            (5, 9.0, 3.5),
            (6, 21.0, 3.5),
        ];
        let w = world_at(&offsets);
        // brute force: sort every other vehicle by its center distance
        let ego = w.vehicle(0).unwrap();
        let mut brute: Vec<(f64, VehicleId)> = w.vehicles[1..]
            .iter()
            .map(|v| (((v.x - ego.x).powi(2) + (v.y - ego.y).powi(2)).sqrt(), v.id))
            .collect();
        brute.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let obs = build_observation(&w, 0).unwrap();
        for (slot, (_, id)) in brute.iter().take(4).enumerate() {
            let v = w.vehicle(*id).unwrap();
            assert_eq!(obs.slot(slot + 1), &[v.x, v.y, v.v, v.theta]);
        }
        let present: Vec<f64> = (1..5).map(|s| obs.slot(s)[0]).collect();
        assert!(!present.contains(&80.0) && !present.contains(&5.0));
    }

    #[test]
    fn fork_is_isolated() {
        let w = world_at(&[(1, 10.0, 0.0)]);
        let mut f = fork_world(&w);
        assert_eq!(f, w);
        f.vehicles[0].x += 1.0;
        f.t_w = 3.0;
        assert_ne!(f, w);
        assert_eq!(w.vehicles[0].x, 50.0);
    }

    #[test]
    fn validation_requires_single_put() {
        let mut w = world_at(&[(1, 10.0, 0.0)]);
        w.assignments[1].policy = ego_policy();
        assert!(w.validate().is_err());
        let mut w = world_at(&[(1, 10.0, 0.0)]);
        w.assignments[0].policy = idm_policy();
        assert!(w.validate().is_err());
    }
}
