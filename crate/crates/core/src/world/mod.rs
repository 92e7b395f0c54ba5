//! Fixed-timestep kinematic world: point-follow vehicles that move only
//! through floor area they have reserved, and pairwise collision reporting.

pub mod component;
pub mod map;
pub mod route;

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{angle_diff, sat_intersects, OrientedRect, Pose2, Vec2};

pub use component::{WorldComponent, WorldConfig};
pub use map::{LotMap, MapError, NodeId, SpotId, SpotRegion};
pub use route::{plan_route, plan_route_with, RouteError, RouteGoal};

pub const ARRIVAL_TOLERANCE_M: f64 = 0.15;
pub const ARRIVAL_TOLERANCE_RAD: f64 = 0.05;
pub const DEFAULT_TICK_S: f64 = 0.05;
pub const MAX_TICK_S: f64 = 0.1;
/// Length of floor reserved ahead of a vehicle at a time.
pub const LOCK_CHUNK_M: f64 = 1.5;
/// Margin added around reserved regions.
pub const CLEARANCE_M: f64 = 0.2;
/// Legs at most this long that end in a turn are reserved in one piece.
pub const TURN_COMMIT_M: f64 = 5.0;

pub const DEFAULT_LENGTH_M: f64 = 4.5;
pub const DEFAULT_WIDTH_M: f64 = 1.9;
pub const DEFAULT_MAX_SPEED_MPS: f64 = 5.0;
pub const DEFAULT_CLASS: &str = "sedan";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleBody {
    pub ns: String,
    pub pose: Pose2,
    pub length: f64,
    pub width: f64,
    pub speed_mps: f64,
    pub max_speed_mps: f64,
    pub class: String,
    pub active_path: Option<VecDeque<Pose2>>,
    pub goal_id: Option<u64>,
}

impl VehicleBody {
    pub fn new(ns: impl Into<String>, pose: Pose2) -> Self {
        Self {
            ns: ns.into(),
            pose,
            length: DEFAULT_LENGTH_M,
            width: DEFAULT_WIDTH_M,
            speed_mps: 0.0,
            max_speed_mps: DEFAULT_MAX_SPEED_MPS,
            class: DEFAULT_CLASS.to_string(),
            active_path: None,
            goal_id: None,
        }
    }

    pub fn footprint(&self) -> OrientedRect {
        OrientedRect::footprint(&self.pose, self.length, self.width)
    }

    pub fn is_moving(&self) -> bool {
        self.active_path.as_ref().is_some_and(|p| !p.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum WorldEvent {
    GoalReached { ns: String, goal_id: u64 },
    GoalFailed { ns: String, goal_id: u64, reason: String },
    Collision { a: String, b: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("vehicle {0} already exists")]
    Duplicate(String),
    #[error("vehicle {0}: footprint and max speed must be positive and finite")]
    BadBody(String),
    #[error("tick {0} s outside (0, {MAX_TICK_S}]")]
    BadTick(f64),
}

#[derive(Debug, Default, Clone)]
pub struct World {
    vehicles: BTreeMap<String, VehicleBody>,
    locks: BTreeMap<String, Lock>,
    pending: Vec<WorldEvent>,
}

/// Floor area a vehicle has reserved for its current stretch of motion.
/// Regions of different vehicles never overlap each other or another
/// vehicle's body, so a lock holder can always finish its stretch.
#[derive(Debug, Clone)]
struct Lock {
    end: Vec2,
    region: Vec<OrientedRect>,
    /// The stretch is done; only the space for the coming turn is kept
    /// until the next lock replaces it.
    spent: bool,
}

struct Intent {
    target: Pose2,
    next: Pose2,
}

impl World {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn vehicles(&self) -> impl Iterator<Item = &VehicleBody> {
        self.vehicles.values()
    }

    pub fn vehicle(&self, ns: &str) -> Option<&VehicleBody> {
        self.vehicles.get(ns)
    }

    pub fn contains(&self, ns: &str) -> bool {
        self.vehicles.contains_key(ns)
    }

    pub fn add_vehicle(&mut self, body: VehicleBody) -> Result<(), WorldError> {
        let ok = [body.length, body.width, body.max_speed_mps]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if !ok {
            return Err(WorldError::BadBody(body.ns));
        }
        if self.vehicles.contains_key(&body.ns) {
            return Err(WorldError::Duplicate(body.ns));
        }
        self.vehicles.insert(body.ns.clone(), body);
        Ok(())
    }

    pub fn remove_vehicle(&mut self, ns: &str) -> Option<VehicleBody> {
        self.locks.remove(ns);
        self.vehicles.remove(ns)
    }

    /// Replaces the vehicle's active path. Invalid requests fail at the next
    /// step rather than immediately so statuses come out in tick order.
    pub fn assign_path(&mut self, ns: &str, goal_id: u64, poses: Vec<Pose2>) {
        let fail = |reason: &str| WorldEvent::GoalFailed {
            ns: ns.to_string(),
            goal_id,
            reason: reason.to_string(),
        };
        let Some(v) = self.vehicles.get_mut(ns) else {
            self.pending.push(fail("unknown-vehicle"));
            return;
        };
        if poses.is_empty() {
            self.pending.push(fail("empty-path"));
            return;
        }
        if poses
            .iter()
            .any(|p| !(p.x.is_finite() && p.y.is_finite() && p.yaw.is_finite()))
        {
            self.pending.push(fail("non-finite-pose"));
            return;
        }
        v.active_path = Some(poses.into_iter().collect());
        v.goal_id = Some(goal_id);
        self.locks.remove(ns);
    }

    /// Region needed for the next stretch toward the current target: the
    /// body swept forward, plus the footprints at the target (final yaw and
    /// heading toward the following pose) when the stretch ends there. A
    /// short leg that ends in a turn is reserved whole, so the turn is
    /// secured before the vehicle enters the space it needs.
    fn plan_lock(v: &VehicleBody) -> Option<Lock> {
        let path = v.active_path.as_ref()?;
        let target = *path.front()?;
        let here = v.pose.position();
        let delta = target.position() - here;
        let dist = delta.norm();
        let heading = if dist > 1e-9 { delta.angle() } else { v.pose.yaw };
        let after = path.get(1).map(|n| {
            let d = n.position() - target.position();
            if d.norm() > 1e-9 {
                d.angle()
            } else {
                n.yaw
            }
        });
        let turns = after.is_some_and(|h| angle_diff(h, heading).abs() > ARRIVAL_TOLERANCE_RAD);
        let reach = if turns && dist <= TURN_COMMIT_M {
            dist
        } else {
            dist.min(LOCK_CHUNK_M)
        };
        let end = here + Vec2::from_angle(heading) * reach;
        let mid = here + Vec2::from_angle(heading) * (reach / 2.0);
        let mut region = vec![OrientedRect {
            cx: mid.x,
            cy: mid.y,
            hx: (reach + v.length) / 2.0,
            hy: v.width / 2.0,
            yaw: heading,
        }];
        if reach >= dist - 1e-9 {
            region.push(OrientedRect::footprint(&target, v.length, v.width));
            if let Some(h) = after {
                region.push(OrientedRect::footprint(
                    &Pose2::new(target.x, target.y, h),
                    v.length,
                    v.width,
                ));
            }
        }
        for r in &mut region {
            r.hx += CLEARANCE_M;
            r.hy += CLEARANCE_M;
        }
        Some(Lock {
            end,
            region,
            spent: false,
        })
    }

    fn intent(v: &VehicleBody, lock: &Lock, dt: f64) -> Option<Intent> {
        let target = *v.active_path.as_ref()?.front()?;
        let here = v.pose.position();
        let delta = target.position() - here;
        let dist = delta.norm();
        let to_end = lock.end.dist(here);
        let step = (v.max_speed_mps * dt).min(to_end).min(dist);
        let heading = if dist > 1e-9 { delta.angle() } else { v.pose.yaw };
        let pos = if dist > 1e-9 {
            here + delta * (step / dist)
        } else {
            here
        };
        let arrived = dist - step <= ARRIVAL_TOLERANCE_M;
        let yaw = if arrived { target.yaw } else { heading };
        Some(Intent {
            target,
            next: Pose2::new(pos.x, pos.y, yaw),
        })
    }

    /// Advances every vehicle by one tick. Vehicles are handled in
    /// namespace order, which is also the priority for new locks.
    pub fn step(&mut self, dt: f64) -> Result<Vec<WorldEvent>, WorldError> {
        if !(dt > 0.0 && dt <= MAX_TICK_S) {
            return Err(WorldError::BadTick(dt));
        }
        let mut events = std::mem::take(&mut self.pending);
        let names: Vec<String> = self.vehicles.keys().cloned().collect();

        for ns in &names {
            if !self.vehicles[ns].is_moving() {
                self.locks.remove(ns);
                self.vehicles.get_mut(ns).unwrap().speed_mps = 0.0;
                continue;
            }
            if self.locks.get(ns).is_none_or(|l| l.spent) {
                let Some(want) = Self::plan_lock(&self.vehicles[ns]) else {
                    continue;
                };
                let clash = self.vehicles.values().filter(|o| o.ns != *ns).any(|o| {
                    let ofp = o.footprint();
                    want.region.iter().any(|r| sat_intersects(r, &ofp))
                }) || self.locks.iter().filter(|(owner, _)| *owner != ns).any(|(_, l)| {
                    l.region
                        .iter()
                        .any(|a| want.region.iter().any(|b| sat_intersects(a, b)))
                });
                if clash {
                    self.vehicles.get_mut(ns).unwrap().speed_mps = 0.0;
                    continue;
                }
                self.locks.insert(ns.clone(), want);
            }

            let lock = &self.locks[ns];
            let me = &self.vehicles[ns];
            let Some(intent) = Self::intent(me, lock, dt) else {
                continue;
            };
            let my_fp = me.footprint();
            let new_fp = OrientedRect::footprint(&intent.next, me.length, me.width);
            // defensive: never move into a new overlap
            let blocked = self.vehicles.values().filter(|o| o.ns != *ns).any(|o| {
                let ofp = o.footprint();
                sat_intersects(&new_fp, &ofp) && !sat_intersects(&my_fp, &ofp)
            });
            let end = lock.end;
            let v = self.vehicles.get_mut(ns).unwrap();
            if blocked {
                v.speed_mps = 0.0;
                continue;
            }
            v.speed_mps = v.pose.position().dist(intent.next.position()) / dt;
            v.pose = intent.next;
            let mut release = v.pose.position().dist(end) <= ARRIVAL_TOLERANCE_M;
            let mut turn_at = None;
            if v.pose.position().dist(intent.target.position()) <= ARRIVAL_TOLERANCE_M {
                release = true;
                let path = v.active_path.as_mut().unwrap();
                path.pop_front();
                if path.is_empty() {
                    v.active_path = None;
                    v.speed_mps = 0.0;
                    if let Some(goal_id) = v.goal_id.take() {
                        events.push(WorldEvent::GoalReached {
                            ns: ns.clone(),
                            goal_id,
                        });
                    }
                } else {
                    turn_at = Some(v.pose.position());
                }
            }
            if release {
                let lock = self.locks.get_mut(ns).unwrap();
                let keep: Vec<OrientedRect> = match turn_at {
                    Some(p) => lock
                        .region
                        .iter()
                        .filter(|r| r.center().dist(p) <= ARRIVAL_TOLERANCE_M + 1e-9)
                        .copied()
                        .collect(),
                    None => Vec::new(),
                };
                if keep.is_empty() {
                    self.locks.remove(ns);
                } else {
                    lock.region = keep;
                    lock.spent = true;
                }
            }
        }

        let bodies: Vec<&VehicleBody> = self.vehicles.values().collect();
        for (i, a) in bodies.iter().enumerate() {
            let fa = a.footprint();
            for b in &bodies[i + 1..] {
                if sat_intersects(&fa, &b.footprint()) {
                    events.push(WorldEvent::Collision {
                        a: a.ns.clone(),
                        b: b.ns.clone(),
                    });
                }
            }
        }
        Ok(events)
    }
}
