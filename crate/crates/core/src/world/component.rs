use std::sync::Arc;

use avp_msgbus::Envelope;
use tracing::{debug, warn};

use crate::runtime::{Component, Outbox};
use crate::topics::{
    self, leaf, ns_key, CollisionMsg, EvictedMsg, GoalOutcome, GoalStatusMsg, PathMsg, PoseRecord, SpawnMsg,
};
use crate::world::route::DEFAULT_SNAP_DISTANCE_M;
use crate::world::{LotMap, VehicleBody, World, WorldError, WorldEvent, DEFAULT_TICK_S, MAX_TICK_S};

#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub tick_s: f64,
    /// When set, spawn requests far from every waypoint are refused.
    pub map: Option<Arc<LotMap>>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            tick_s: DEFAULT_TICK_S,
            map: None,
        }
    }
}

enum Inbound {
    Spawn(SpawnMsg),
    Despawn,
    Path(PathMsg),
}

/// Bus wrapper around [`World`]. Requests are queued and applied at the
/// next tick boundary in arrival order.
pub struct WorldComponent {
    world: World,
    config: WorldConfig,
    inbox: Vec<(String, Inbound)>,
}

impl WorldComponent {
    pub fn new(config: WorldConfig) -> Result<Self, WorldError> {
        if !(config.tick_s > 0.0 && config.tick_s <= MAX_TICK_S) {
            return Err(WorldError::BadTick(config.tick_s));
        }
        Ok(Self {
            world: World::new(),
            config,
            inbox: Vec::new(),
        })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    fn apply(&mut self, ns: String, msg: Inbound) {
        match msg {
            Inbound::Spawn(s) => {
                if self.world.contains(&ns) {
                    return;
                }
                if let Some(map) = &self.config.map {
                    let near = map.graph().nearest(s.pose.position()).map(|(_, d)| d);
                    if near.is_none_or(|d| d > DEFAULT_SNAP_DISTANCE_M) {
                        warn!(ns, "spawn pose is not near any waypoint; refused");
                        return;
                    }
                }
                let mut body = VehicleBody::new(ns.clone(), s.pose);
                body.length = s.len;
                body.width = s.wid;
                body.max_speed_mps = s.max_speed;
                body.class = s.class;
                match self.world.add_vehicle(body) {
                    Ok(()) => debug!(ns, "spawned"),
                    Err(e) => warn!(ns, error = %e, "spawn refused"),
                }
            }
            Inbound::Despawn => {
                if self.world.remove_vehicle(&ns).is_some() {
                    debug!(ns, "despawned");
                }
            }
            Inbound::Path(p) => self.world.assign_path(&ns, p.goal_id, p.poses),
        }
    }

    pub fn pose_records(&self) -> Vec<PoseRecord> {
        self.world
            .vehicles()
            .map(|v| PoseRecord {
                ns: v.ns.clone(),
                x: v.pose.x,
                y: v.pose.y,
                yaw: v.pose.yaw,
                len: v.length,
                wid: v.width,
                class: v.class.clone(),
            })
            .collect()
    }
}

impl Component for WorldComponent {
    fn name(&self) -> &str {
        topics::WORLD_ID
    }

    fn subscriptions(&self) -> Vec<String> {
        vec![
            "avp/*/path".into(),
            "avp/*/spawn".into(),
            "avp/*/despawn".into(),
            topics::COORD_EVICTED.into(),
        ]
    }

    fn tick_period_ns(&self) -> Option<i64> {
        Some((self.config.tick_s * 1e9).round() as i64)
    }

    fn start(&mut self, _now_ns: i64, out: &mut Outbox) {
        out.publish(topics::POSES, self.pose_records());
    }

    fn on_message(&mut self, env: &Envelope, _now_ns: i64, _out: &mut Outbox) {
        if env.key == topics::COORD_EVICTED {
            match serde_json::from_value::<EvictedMsg>(env.payload.clone()) {
                Ok(e) => self.inbox.push((e.ns, Inbound::Despawn)),
                Err(e) => warn!(error = %e, "malformed eviction notice"),
            }
            return;
        }
        let Some((ns, leaf_name)) = topics::split_ns_key(&env.key) else {
            return;
        };
        let parsed = match leaf_name {
            leaf::SPAWN => serde_json::from_value(env.payload.clone()).map(Inbound::Spawn),
            leaf::DESPAWN => Ok(Inbound::Despawn),
            leaf::PATH => serde_json::from_value(env.payload.clone()).map(Inbound::Path),
            _ => return,
        };
        match parsed {
            Ok(msg) => self.inbox.push((ns.to_string(), msg)),
            Err(e) => warn!(key = env.key, error = %e, "malformed world request"),
        }
    }

    fn on_tick(&mut self, _now_ns: i64, out: &mut Outbox) {
        for (ns, msg) in std::mem::take(&mut self.inbox) {
            self.apply(ns, msg);
        }
        let events = self
            .world
            .step(self.config.tick_s)
            .expect("tick validated at construction");
        for ev in events {
            match ev {
                WorldEvent::GoalReached { ns, goal_id } => out.publish(
                    ns_key(&ns, leaf::GOAL_STATUS),
                    GoalStatusMsg {
                        goal_id,
                        status: GoalOutcome::Reached,
                        reason: None,
                    },
                ),
                WorldEvent::GoalFailed { ns, goal_id, reason } => out.publish(
                    ns_key(&ns, leaf::GOAL_STATUS),
                    GoalStatusMsg {
                        goal_id,
                        status: GoalOutcome::Failed,
                        reason: Some(reason),
                    },
                ),
                WorldEvent::Collision { a, b } => out.publish(topics::COLLISION, CollisionMsg { a, b }),
            }
        }
        out.publish(topics::POSES, self.pose_records());
    }
}
