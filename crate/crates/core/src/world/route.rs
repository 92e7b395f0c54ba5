//! Waypoint routing: snap to the nearest node, Dijkstra to the goal's
//! approach node, then the goal's final pose.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{OrientedRect, Pose2, Vec2};
use crate::world::map::{LotMap, NodeId, SpotId, WaypointGraph};
use crate::world::ARRIVAL_TOLERANCE_M;

pub const DEFAULT_SNAP_DISTANCE_M: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "goal", content = "spot_id", rename_all = "snake_case")]
pub enum RouteGoal {
    Spot(SpotId),
    DropoffBay,
    PickupBay,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RouteError {
    #[error("no waypoint within {snap:.1} m of ({x:.2}, {y:.2}); nearest is {nearest:.2} m away")]
    NoWaypointNearby { x: f64, y: f64, nearest: f64, snap: f64 },
    #[error("unknown spot {0}")]
    UnknownSpot(SpotId),
    #[error("spot {0} has no approach entry")]
    NoApproach(SpotId),
    #[error("node {to} unreachable from node {from}")]
    Unreachable { from: NodeId, to: NodeId },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub poses: Vec<Pose2>,
    /// Graph cost between the snapped start node and the approach node.
    pub graph_cost: f64,
    pub nodes: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    cost: f64,
    node: NodeId,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // min-heap on (cost, node id)
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest path by edge weight. Equal-cost alternatives resolve toward
/// smaller node ids, both in settle order and in predecessor choice.
pub fn shortest_path(graph: &WaypointGraph, from: NodeId, to: NodeId) -> Option<(f64, Vec<NodeId>)> {
    const EPS: f64 = 1e-9;
    let mut dist: BTreeMap<NodeId, f64> = BTreeMap::new();
    let mut pred: BTreeMap<NodeId, NodeId> = BTreeMap::new();
    // predecessors of settled nodes are final; rewriting them on a
    // zero-weight tie could close a cycle
    let mut settled = BTreeSet::new();
    let mut heap = BinaryHeap::new();
    graph.position(from)?;
    dist.insert(from, 0.0);
    heap.push(Candidate { cost: 0.0, node: from });
    while let Some(Candidate { cost, node }) = heap.pop() {
        if cost > dist[&node] + EPS || !settled.insert(node) {
            continue;
        }
        if node == to {
            break;
        }
        for &(next, w) in graph.neighbors(node) {
            let nc = cost + w;
            match dist.get(&next) {
                Some(&old) if nc > old + EPS => {}
                Some(&old) if nc >= old - EPS => {
                    if !settled.contains(&next) && pred.get(&next).is_some_and(|&p| node < p) {
                        pred.insert(next, node);
                    }
                }
                _ => {
                    dist.insert(next, nc);
                    pred.insert(next, node);
                    heap.push(Candidate { cost: nc, node: next });
                }
            }
        }
    }
    let total = *dist.get(&to)?;
    let mut path = vec![to];
    let mut cur = to;
    while cur != from {
        cur = pred[&cur];
        path.push(cur);
    }
    path.reverse();
    Some((total, path))
}

fn bay_target(graph: &WaypointGraph, bay: &OrientedRect) -> Option<(NodeId, Pose2)> {
    let (node, _) = graph.nearest(bay.center())?;
    Some((node, Pose2::new(bay.cx, bay.cy, bay.yaw)))
}

pub fn goal_target(map: &LotMap, goal: RouteGoal) -> Result<(NodeId, Pose2), RouteError> {
    match goal {
        RouteGoal::Spot(id) => {
            map.spot(id).ok_or(RouteError::UnknownSpot(id))?;
            let a = map.approach(id).ok_or(RouteError::NoApproach(id))?;
            Ok((a.node, a.pose))
        }
        RouteGoal::DropoffBay => Ok(bay_target(map.graph(), &map.dropoff_bay).expect("map graph is non-empty")),
        RouteGoal::PickupBay => Ok(bay_target(map.graph(), &map.pickup_bay).expect("map graph is non-empty")),
    }
}

pub fn plan_route(map: &LotMap, from: Pose2, goal: RouteGoal) -> Result<Route, RouteError> {
    plan_route_with(map, from, goal, DEFAULT_SNAP_DISTANCE_M)
}

pub fn plan_route_with(map: &LotMap, from: Pose2, goal: RouteGoal, snap_m: f64) -> Result<Route, RouteError> {
    let graph = map.graph();
    let here = from.position();
    let (start, snap_dist) = graph.nearest(here).expect("map graph is non-empty");
    if snap_dist > snap_m {
        return Err(RouteError::NoWaypointNearby {
            x: from.x,
            y: from.y,
            nearest: snap_dist,
            snap: snap_m,
        });
    }
    let (approach, final_pose) = goal_target(map, goal)?;
    let (graph_cost, nodes) = shortest_path(graph, start, approach).ok_or(RouteError::Unreachable {
        from: start,
        to: approach,
    })?;

    let mut poses = Vec::with_capacity(nodes.len() + 1);
    let mut prev = here;
    for (i, &n) in nodes.iter().enumerate() {
        let p = graph.position(n).unwrap();
        if i == 0 && p.dist(here) <= ARRIVAL_TOLERANCE_M {
            continue;
        }
        let yaw = if p.dist(prev) > 1e-9 {
            (p - prev).angle()
        } else {
            from.yaw
        };
        poses.push(Pose2::new(p.x, p.y, yaw));
        prev = p;
    }
    if poses
        .last()
        .is_some_and(|last| last.position().dist(final_pose.position()) <= 1e-6)
    {
        poses.pop();
    }
    poses.push(final_pose);
    Ok(Route {
        poses,
        graph_cost,
        nodes,
    })
}

/// Total polyline length from `from` through every pose.
pub fn path_length(from: Vec2, poses: &[Pose2]) -> f64 {
    let mut prev = from;
    poses
        .iter()
        .map(|p| {
            let d = p.position().dist(prev);
            prev = p.position();
            d
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn line_map() -> LotMap {
        LotMap::from_value(json!({
            "spots": [{"id": 1, "cx": 2.0, "cy": 3.0, "hx": 1.0, "hy": 1.0}],
            "dropoff_bay": {"cx": 0.0, "cy": 0.0, "hx": 1.0, "hy": 1.0},
            "pickup_bay": {"cx": 2.0, "cy": 0.0, "hx": 1.0, "hy": 1.0},
            "waypoints": {
                "nodes": [{"id": 1, "x": 0.0, "y": 0.0}, {"id": 2, "x": 1.0, "y": 0.0}, {"id": 3, "x": 2.0, "y": 0.0}],
                "edges": [{"a": 1, "b": 2, "w": 1.0}, {"a": 2, "b": 3, "w": 1.0}]
            },
            "spot_approach": [{"spot": 1, "node": 3, "x": 2.0, "y": 3.0, "yaw": 1.57}]
        }))
        .unwrap()
    }

    #[test]
    fn line_graph_goes_through_middle() {
        let map = line_map();
        let route = plan_route(&map, Pose2::new(0.0, 0.0, 0.0), RouteGoal::Spot(1)).unwrap();
        assert_eq!(route.nodes, vec![1, 2, 3]);
        assert_eq!(route.graph_cost, 2.0);
        // start node skipped (we are on it), then 2, 3, final pose
        assert_eq!(route.poses.len(), 3);
        assert_eq!(route.poses.last().unwrap().y, 3.0);
    }

    #[test]
    fn starting_on_approach_node_yields_final_pose_only() {
        let map = line_map();
        let route = plan_route(&map, Pose2::new(2.0, 0.0, 0.0), RouteGoal::Spot(1)).unwrap();
        assert_eq!(route.poses.len(), 1);
        assert_eq!(route.poses[0].position(), Vec2::new(2.0, 3.0));
    }

    #[test]
    fn far_from_graph_is_an_error() {
        let map = line_map();
        let err = plan_route(&map, Pose2::new(0.0, 9.0, 0.0), RouteGoal::PickupBay).unwrap_err();
        assert!(matches!(err, RouteError::NoWaypointNearby { .. }));
        assert_eq!(
            plan_route(&map, Pose2::new(0.0, 0.0, 0.0), RouteGoal::Spot(8)).unwrap_err(),
            RouteError::UnknownSpot(8)
        );
    }

    #[test]
    fn bay_route_ends_at_bay_center() {
        let map = line_map();
        let route = plan_route(&map, Pose2::new(0.0, 0.0, 0.0), RouteGoal::PickupBay).unwrap();
        let last = route.poses.last().unwrap();
        assert_eq!((last.x, last.y), (2.0, 0.0));
        // approach node coincides with the bay center and is not repeated
        assert_eq!(route.poses.len(), 2);
    }

    #[test]
    fn equal_cost_ties_prefer_smaller_ids() {
        // square 1-2-4 and 1-3-4, equal cost
        let map = LotMap::from_value(json!({
            "spots": [],
            "dropoff_bay": {"cx": 0.0, "cy": 0.0, "hx": 1.0, "hy": 1.0},
            "pickup_bay": {"cx": 1.0, "cy": 1.0, "hx": 1.0, "hy": 1.0},
            "waypoints": {
                "nodes": [{"id": 1, "x": 0.0, "y": 0.0}, {"id": 3, "x": 1.0, "y": 0.0},
                          {"id": 2, "x": 0.0, "y": 1.0}, {"id": 4, "x": 1.0, "y": 1.0}],
                "edges": [{"a": 1, "b": 3, "w": 1.0}, {"a": 3, "b": 4, "w": 1.0},
                          {"a": 1, "b": 2, "w": 1.0}, {"a": 2, "b": 4, "w": 1.0}]
            }
        }))
        .unwrap();
        let (cost, path) = shortest_path(map.graph(), 1, 4).unwrap();
        assert_eq!(cost, 2.0);
        assert_eq!(path, vec![1, 2, 4]);
    }
}
