//! Static lot description and its JSON schema.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{oriented_rect_overlap, OrientedRect, Pose2, Vec2};

pub type SpotId = u32;
pub type NodeId = u32;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("malformed map document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("reading map: {0}")]
    Io(#[from] std::io::Error),
    #[error("duplicate spot id {0}")]
    DuplicateSpot(SpotId),
    #[error("spot {0} has non-positive or non-finite extents")]
    BadSpot(SpotId),
    #[error("spots {0} and {1} overlap")]
    OverlappingSpots(SpotId, SpotId),
    #[error("duplicate waypoint node id {0}")]
    DuplicateNode(NodeId),
    #[error("waypoint graph has no nodes")]
    EmptyGraph,
    #[error("edge {a}-{b} references unknown node {missing}")]
    UnknownEdgeNode { a: NodeId, b: NodeId, missing: NodeId },
    #[error("edge {a}-{b} has invalid weight {w}")]
    BadWeight { a: NodeId, b: NodeId, w: f64 },
    #[error("waypoint graph is disconnected: node {0} unreachable from node {1}")]
    Disconnected(NodeId, NodeId),
    #[error("spot_approach for spot {spot} references unknown node {node}")]
    UnknownApproachNode { spot: SpotId, node: NodeId },
    #[error("spot_approach references unknown spot {0}")]
    UnknownApproachSpot(SpotId),
    #[error("duplicate spot_approach for spot {0}")]
    DuplicateApproach(SpotId),
    #[error("{0} has non-positive or non-finite extents")]
    BadBay(&'static str),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpotDoc {
    pub id: SpotId,
    #[serde(flatten)]
    pub rect: OrientedRect,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeDoc {
    pub id: NodeId,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeDoc {
    pub a: NodeId,
    pub b: NodeId,
    pub w: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaypointsDoc {
    pub nodes: Vec<NodeDoc>,
    #[serde(default)]
    pub edges: Vec<EdgeDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApproachDoc {
    pub spot: SpotId,
    pub node: NodeId,
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub yaw: f64,
}

/// The on-disk map document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapDocument {
    pub spots: Vec<SpotDoc>,
    pub dropoff_bay: OrientedRect,
    pub pickup_bay: OrientedRect,
    #[serde(default)]
    pub spawn_points: Vec<Pose2>,
    pub waypoints: WaypointsDoc,
    #[serde(default)]
    pub spot_approach: Vec<ApproachDoc>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpotRegion {
    pub id: SpotId,
    pub rect: OrientedRect,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Approach {
    pub node: NodeId,
    pub pose: Pose2,
}

#[derive(Debug, Clone, Default)]
pub struct WaypointGraph {
    nodes: BTreeMap<NodeId, Vec2>,
    adj: BTreeMap<NodeId, Vec<(NodeId, f64)>>,
}

impl WaypointGraph {
    pub fn nodes(&self) -> &BTreeMap<NodeId, Vec2> {
        &self.nodes
    }

    pub fn position(&self, id: NodeId) -> Option<Vec2> {
        self.nodes.get(&id).copied()
    }

    /// Neighbours sorted by node id.
    pub fn neighbors(&self, id: NodeId) -> &[(NodeId, f64)] {
        self.adj.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Closest node to `p`; ties go to the smaller id.
    pub fn nearest(&self, p: Vec2) -> Option<(NodeId, f64)> {
        self.nodes.iter().map(|(&id, &pos)| (id, pos.dist(p))).fold(
            None,
            |best: Option<(NodeId, f64)>, cand| match best {
                Some(b) if b.1 <= cand.1 => Some(b),
                _ => Some(cand),
            },
        )
    }
}

#[derive(Debug, Clone)]
pub struct LotMap {
    spots: Vec<SpotRegion>,
    pub dropoff_bay: OrientedRect,
    pub pickup_bay: OrientedRect,
    pub spawn_points: Vec<Pose2>,
    graph: WaypointGraph,
    spot_approach: BTreeMap<SpotId, Approach>,
}

impl LotMap {
    pub fn from_json(text: &str) -> Result<Self, MapError> {
        Self::from_document(serde_json::from_str(text)?)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self, MapError> {
        Self::from_document(serde_json::from_value(value)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MapError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Validates a document: unique spot ids, positive extents, pairwise
    /// non-overlapping spots, a connected graph, and approach entries that
    /// reference existing spots and nodes.
    pub fn from_document(doc: MapDocument) -> Result<Self, MapError> {
        let mut seen = BTreeSet::new();
        for s in &doc.spots {
            if !seen.insert(s.id) {
                return Err(MapError::DuplicateSpot(s.id));
            }
            if !s.rect.is_valid() {
                return Err(MapError::BadSpot(s.id));
            }
        }
        for (i, a) in doc.spots.iter().enumerate() {
            for b in &doc.spots[i + 1..] {
                // shared edges are fine, interior overlap is not
                if oriented_rect_overlap(&a.rect, &b.rect).area > 1e-9 {
                    return Err(MapError::OverlappingSpots(a.id.min(b.id), a.id.max(b.id)));
                }
            }
        }
        if !doc.dropoff_bay.is_valid() {
            return Err(MapError::BadBay("dropoff_bay"));
        }
        if !doc.pickup_bay.is_valid() {
            return Err(MapError::BadBay("pickup_bay"));
        }

        let mut graph = WaypointGraph::default();
        for n in &doc.waypoints.nodes {
            if graph.nodes.insert(n.id, Vec2::new(n.x, n.y)).is_some() {
                return Err(MapError::DuplicateNode(n.id));
            }
            graph.adj.insert(n.id, Vec::new());
        }
        if graph.nodes.is_empty() {
            return Err(MapError::EmptyGraph);
        }
        for e in &doc.waypoints.edges {
            for id in [e.a, e.b] {
                if !graph.nodes.contains_key(&id) {
                    return Err(MapError::UnknownEdgeNode {
                        a: e.a,
                        b: e.b,
                        missing: id,
                    });
                }
            }
            if !(e.w.is_finite() && e.w >= 0.0) {
                return Err(MapError::BadWeight { a: e.a, b: e.b, w: e.w });
            }
            graph.adj.get_mut(&e.a).unwrap().push((e.b, e.w));
            if e.a != e.b {
                graph.adj.get_mut(&e.b).unwrap().push((e.a, e.w));
            }
        }
        for list in graph.adj.values_mut() {
            list.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.total_cmp(&y.1)));
        }
        check_connected(&graph)?;

        let mut spot_approach = BTreeMap::new();
        for a in &doc.spot_approach {
            if !seen.contains(&a.spot) {
                return Err(MapError::UnknownApproachSpot(a.spot));
            }
            if !graph.nodes.contains_key(&a.node) {
                return Err(MapError::UnknownApproachNode {
                    spot: a.spot,
                    node: a.node,
                });
            }
            let approach = Approach {
                node: a.node,
                pose: Pose2::new(a.x, a.y, a.yaw),
            };
            if spot_approach.insert(a.spot, approach).is_some() {
                return Err(MapError::DuplicateApproach(a.spot));
            }
        }

        let mut spots: Vec<SpotRegion> = doc
            .spots
            .iter()
            .map(|s| SpotRegion { id: s.id, rect: s.rect })
            .collect();
        spots.sort_by_key(|s| s.id);
        Ok(Self {
            spots,
            dropoff_bay: doc.dropoff_bay,
            pickup_bay: doc.pickup_bay,
            spawn_points: doc.spawn_points.iter().map(|p| Pose2::new(p.x, p.y, p.yaw)).collect(),
            graph,
            spot_approach,
        })
    }

    /// Spots sorted by id.
    pub fn spots(&self) -> &[SpotRegion] {
        &self.spots
    }

    pub fn spot(&self, id: SpotId) -> Option<&SpotRegion> {
        self.spots
            .binary_search_by_key(&id, |s| s.id)
            .ok()
            .map(|i| &self.spots[i])
    }

    pub fn spot_ids(&self) -> impl Iterator<Item = SpotId> + '_ {
        self.spots.iter().map(|s| s.id)
    }

    pub fn graph(&self) -> &WaypointGraph {
        &self.graph
    }

    pub fn approach(&self, spot: SpotId) -> Option<&Approach> {
        self.spot_approach.get(&spot)
    }
}

fn check_connected(graph: &WaypointGraph) -> Result<(), MapError> {
    let start = *graph.nodes.keys().next().ok_or(MapError::EmptyGraph)?;
    let mut visited = BTreeSet::from([start]);
    let mut frontier = VecDeque::from([start]);
    while let Some(n) = frontier.pop_front() {
        for &(m, _) in graph.neighbors(n) {
            if visited.insert(m) {
                frontier.push_back(m);
            }
        }
    }
    match graph.nodes.keys().find(|id| !visited.contains(id)) {
        Some(&missing) => Err(MapError::Disconnected(missing, start)),
        None => Ok(()),
    }
}
