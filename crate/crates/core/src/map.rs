//! Road geometry and the ego goal region.
//!
//! Lanes are polyline centerlines ordered right to left: lane `i + 1` is the
//! lane to the left of lane `i`. Lateral offsets are positive to the left of
//! the direction of travel.

use serde::{Deserialize, Serialize};

use crate::error::{CpeError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub centerline: Vec<(f64, f64)>,
    pub width: f64,
}

/// Position of a point expressed in a lane's Frenet frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LanePoint {
    /// Arc length along the centerline.
    pub s: f64,
    /// Signed lateral offset, positive to the left.
    pub d: f64,
    /// Heading of the centerline at the projection.
    pub heading: f64,
}

impl Lane {
    pub fn straight(start: (f64, f64), end: (f64, f64), width: f64) -> Self {
        Self {
            centerline: vec![start, end],
            width,
        }
    }

    pub fn length(&self) -> f64 {
        self.centerline
            .windows(2)
            .map(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1))
            .sum()
    }

    /// Projects a point onto the centerline. Points past either end are
    /// extrapolated along the first or last segment.
    pub fn project(&self, x: f64, y: f64) -> LanePoint {
        let last = self.centerline.len() - 2;
        let mut best: Option<(f64, LanePoint)> = None;
        let mut s_start = 0.0;
        for (i, w) in self.centerline.windows(2).enumerate() {
            let (ax, ay) = w[0];
            let (bx, by) = w[1];
            let (dx, dy) = (bx - ax, by - ay);
            let len = dx.hypot(dy);
            let (px, py) = (x - ax, y - ay);
            let along = (px * dx + py * dy) / len;
            let lo = if i == 0 { f64::NEG_INFINITY } else { 0.0 };
            let hi = if i == last { f64::INFINITY } else { len };
            let t = along.clamp(lo, hi);
            let cross = (dx * py - dy * px) / len;
            let (fx, fy) = (ax + dx / len * t, ay + dy / len * t);
            let dist = (x - fx).hypot(y - fy);
            let candidate = LanePoint {
                s: s_start + t,
                d: cross,
                heading: dy.atan2(dx),
            };
            if best.as_ref().is_none_or(|(b, _)| dist < *b) {
                best = Some((dist, candidate));
            }
            s_start += len;
        }
        best.expect("lane has at least one segment").1
    }

    /// World position at arc length `s` and lateral offset `d`, with the
    /// centerline heading there.
    pub fn point_at(&self, s: f64, d: f64) -> (f64, f64, f64) {
        let last = self.centerline.len() - 2;
        let mut s_start = 0.0;
        for (i, w) in self.centerline.windows(2).enumerate() {
            let (ax, ay) = w[0];
            let (bx, by) = w[1];
            let len = (bx - ax).hypot(by - ay);
            if s <= s_start + len || i == last {
                let t = s - s_start;
                let heading = (by - ay).atan2(bx - ax);
                let (sin, cos) = heading.sin_cos();
                return (ax + cos * t - sin * d, ay + sin * t + cos * d, heading);
            }
            s_start += len;
        }
        unreachable!("lane has at least one segment")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapGeometry {
    pub lanes: Vec<Lane>,
    /// Index of the lane that terminates, if any.
    pub merge_lane: Option<usize>,
    /// Arc length on the merge lane where it terminates.
    pub merge_lane_end_s: f64,
}

pub const DEFAULT_LANE_WIDTH: f64 = 3.5;
pub const DEFAULT_ROAD_LENGTH: f64 = 200.0;
pub const DEFAULT_MERGE_END: f64 = 150.0;

impl Default for MapGeometry {
    /// Straight two-lane road: lane 0 is the merge lane, lane 1 the highway.
    fn default() -> Self {
        let w = DEFAULT_LANE_WIDTH;
        Self {
            lanes: vec![
                Lane::straight((0.0, 0.0), (DEFAULT_ROAD_LENGTH, 0.0), w),
                Lane::straight((0.0, w), (DEFAULT_ROAD_LENGTH, w), w),
            ],
            merge_lane: Some(0),
            merge_lane_end_s: DEFAULT_MERGE_END,
        }
    }
}

impl MapGeometry {
    /// Straight multi-lane road without a merge lane.
    pub fn straight_highway(num_lanes: usize, length: f64, lane_width: f64) -> Self {
        Self {
            lanes: (0..num_lanes)
                .map(|i| {
                    let y = i as f64 * lane_width;
                    Lane::straight((0.0, y), (length, y), lane_width)
                })
                .collect(),
            merge_lane: None,
            merge_lane_end_s: length,
        }
    }

    pub fn validate(&self, max_vehicle_width: f64) -> Result<()> {
        if self.lanes.len() < 2 {
            return Err(CpeError::InvalidMap("at least 2 lanes required".into()));
        }
        for (i, lane) in self.lanes.iter().enumerate() {
            if lane.centerline.len() < 2 {
                return Err(CpeError::InvalidMap(format!("lane {i} needs 2+ points")));
            }
            let degenerate = lane.centerline.windows(2).any(|w| {
                let len = (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
                !(len > 0.0) || !len.is_finite()
            });
            if degenerate {
                return Err(CpeError::InvalidMap(format!(
                    "lane {i} centerline is not strictly monotone in arc length"
                )));
            }
            if !(lane.width > max_vehicle_width) {
                return Err(CpeError::InvalidMap(format!(
                    "lane {i} width {} does not exceed vehicle width {max_vehicle_width}",
                    lane.width
                )));
            }
        }
        if let Some(m) = self.merge_lane {
            if m >= self.lanes.len() {
                return Err(CpeError::InvalidMap(format!("merge lane {m} out of range")));
            }
        }
        Ok(())
    }

    /// Lane whose centerline is closest to the point; ties go to the lower index.
    pub fn nearest_lane(&self, x: f64, y: f64) -> (usize, LanePoint) {
        let mut best = (0, self.lanes[0].project(x, y));
        for (i, lane) in self.lanes.iter().enumerate().skip(1) {
            let p = lane.project(x, y);
            if p.d.abs() < best.1.d.abs() {
                best = (i, p);
            }
        }
        best
    }

    pub fn is_merge_lane(&self, lane: usize) -> bool {
        self.merge_lane == Some(lane)
    }

    /// Lanes a lane-changing vehicle may move into: existing neighbours that
    /// are not the terminating merge lane.
    pub fn lane_change_target(&self, lane: usize, left: bool) -> Option<usize> {
        let target = if left {
            lane.checked_add(1).filter(|&l| l < self.lanes.len())?
        } else {
            lane.checked_sub(1)?
        };
        (!self.is_merge_lane(target)).then_some(target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalSpec {
    /// Convex polygon, either winding.
    pub region: Vec<(f64, f64)>,
    pub v_range: (f64, f64),
    pub theta_range: (f64, f64),
}

impl Default for GoalSpec {
    /// The last 30 m of the left lane of the default map.
    fn default() -> Self {
        let w = DEFAULT_LANE_WIDTH;
        let (x0, x1) = (DEFAULT_ROAD_LENGTH - 30.0, DEFAULT_ROAD_LENGTH);
        let (y0, y1) = (w - w / 2.0, w + w / 2.0);
        Self {
            region: vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)],
            v_range: (5.0, 16.0),
            theta_range: (-0.05, 0.05),
        }
    }
}

impl GoalSpec {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let n = self.region.len();
        if n < 3 {
            return false;
        }
        let mut sign = 0.0f64;
        for i in 0..n {
            let (ax, ay) = self.region[i];
            let (bx, by) = self.region[(i + 1) % n];
            let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
            if cross != 0.0 {
                if sign != 0.0 && cross.signum() != sign {
                    return false;
                }
                sign = cross.signum();
            }
        }
        true
    }

    /// Euclidean distance from the point to the region, zero inside.
    pub fn distance_to_region(&self, x: f64, y: f64) -> f64 {
        if self.contains(x, y) {
            return 0.0;
        }
        let n = self.region.len();
        (0..n)
            .map(|i| segment_distance((x, y), self.region[i], self.region[(i + 1) % n]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn region_center(&self) -> (f64, f64) {
        let n = self.region.len() as f64;
        let (sx, sy) = self
            .region
            .iter()
            .fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x, sy + y));
        (sx / n, sy / n)
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.0 - (a.0 + t * dx)).hypot(p.1 - (a.1 + t * dy))
}

/// Distance from `v` to the closed interval, zero inside.
pub fn interval_deviation(v: f64, range: (f64, f64)) -> f64 {
    if v < range.0 {
        range.0 - v
    } else if v > range.1 {
        v - range.1
    } else {
        0.0
    }
}
