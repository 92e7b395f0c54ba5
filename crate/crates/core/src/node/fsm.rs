//! Vehicle lifecycle state machine. `transition` is a pure function of the
//! current state, the event, and the clock.

use serde::{Deserialize, Serialize};

use crate::topics::CommandKind;
use crate::world::{RouteGoal, SpotId};

/// Time spent parked in the drop-off and pickup bays.
pub const BAY_DWELL_NS: i64 = 3_000_000_000;
/// Wait after a reservation denial before asking again.
pub const RESERVE_RETRY_NS: i64 = 1_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LifecycleState {
    Arriving,
    QueuedDropoff,
    AtDropoffBay,
    AwaitingPark,
    SpotRequested,
    EnRouteSpot,
    Parked,
    RetrievalRequested,
    EnRoutePickup,
    AtPickup,
    Departed,
}

impl LifecycleState {
    pub const ALL: [LifecycleState; 11] = [
        LifecycleState::Arriving,
        LifecycleState::QueuedDropoff,
        LifecycleState::AtDropoffBay,
        LifecycleState::AwaitingPark,
        LifecycleState::SpotRequested,
        LifecycleState::EnRouteSpot,
        LifecycleState::Parked,
        LifecycleState::RetrievalRequested,
        LifecycleState::EnRoutePickup,
        LifecycleState::AtPickup,
        LifecycleState::Departed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LifecycleState::Arriving => "ARRIVING",
            LifecycleState::QueuedDropoff => "QUEUED_DROPOFF",
            LifecycleState::AtDropoffBay => "AT_DROPOFF_BAY",
            LifecycleState::AwaitingPark => "AWAITING_PARK",
            LifecycleState::SpotRequested => "SPOT_REQUESTED",
            LifecycleState::EnRouteSpot => "EN_ROUTE_SPOT",
            LifecycleState::Parked => "PARKED",
            LifecycleState::RetrievalRequested => "RETRIEVAL_REQUESTED",
            LifecycleState::EnRoutePickup => "EN_ROUTE_PICKUP",
            LifecycleState::AtPickup => "AT_PICKUP",
            LifecycleState::Departed => "DEPARTED",
        }
    }
}

impl std::fmt::Display for LifecycleState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LifecycleState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LifecycleState::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown lifecycle state {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReserveOutcome {
    Grant(SpotId),
    Deny(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeEvent {
    Command(CommandKind),
    BayGrant,
    ReserveReply(ReserveOutcome),
    GoalReached,
    GoalFailed,
    Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    SendRegister,
    SendStatus { failed: bool },
    Enqueue,
    SendPath(RouteGoal),
    ReleaseBay,
    RequestReservation,
    ReleaseReservation(SpotId),
    Despawn,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeState {
    pub phase: LifecycleState,
    /// Set once the bay grant has been acted on; the primed sub-state of
    /// QUEUED_DROPOFF.
    pub dropoff_en_route: bool,
    /// When the current phase was entered.
    pub entered_at_ns: i64,
    pub held_spot: Option<SpotId>,
    pub retry_at_ns: Option<i64>,
    /// Status sequence; bumped with every SendStatus.
    pub seq: u64,
}

impl NodeState {
    pub fn new(now_ns: i64) -> Self {
        Self {
            phase: LifecycleState::Arriving,
            dropoff_en_route: false,
            entered_at_ns: now_ns,
            held_spot: None,
            retry_at_ns: None,
            seq: 0,
        }
    }
}

pub fn transition(state: &NodeState, event: &NodeEvent, now_ns: i64) -> (NodeState, Vec<Action>) {
    use LifecycleState as S;
    let mut next = state.clone();
    let mut actions = Vec::new();
    let enter = |next: &mut NodeState, phase: S| {
        next.phase = phase;
        next.entered_at_ns = now_ns;
    };

    match (state.phase, event) {
        (S::Arriving, NodeEvent::Command(CommandKind::Dropoff)) => {
            enter(&mut next, S::QueuedDropoff);
            next.dropoff_en_route = false;
            actions.push(Action::Enqueue);
        }
        (S::QueuedDropoff, NodeEvent::BayGrant) if !state.dropoff_en_route => {
            next.dropoff_en_route = true;
            actions.push(Action::SendPath(RouteGoal::DropoffBay));
        }
        (S::QueuedDropoff, NodeEvent::GoalReached) if state.dropoff_en_route => {
            enter(&mut next, S::AtDropoffBay);
            next.dropoff_en_route = false;
        }
        (S::QueuedDropoff, NodeEvent::GoalFailed) if state.dropoff_en_route => {
            enter(&mut next, S::Arriving);
            next.dropoff_en_route = false;
            actions.push(Action::ReleaseBay);
        }
        (S::AtDropoffBay, NodeEvent::Tick) if now_ns - state.entered_at_ns >= BAY_DWELL_NS => {
            enter(&mut next, S::AwaitingPark);
            actions.push(Action::ReleaseBay);
        }
        (S::AwaitingPark, NodeEvent::Command(CommandKind::Park)) => {
            enter(&mut next, S::SpotRequested);
            next.retry_at_ns = None;
            actions.push(Action::RequestReservation);
        }
        (S::SpotRequested, NodeEvent::ReserveReply(ReserveOutcome::Grant(spot))) => {
            enter(&mut next, S::EnRouteSpot);
            next.held_spot = Some(*spot);
            next.retry_at_ns = None;
            actions.push(Action::SendPath(RouteGoal::Spot(*spot)));
        }
        (S::SpotRequested, NodeEvent::ReserveReply(ReserveOutcome::Deny(_))) => {
            next.retry_at_ns = Some(now_ns + RESERVE_RETRY_NS);
            return (next, actions);
        }
        (S::SpotRequested, NodeEvent::Tick) if state.retry_at_ns.is_some_and(|t| now_ns >= t) => {
            next.retry_at_ns = None;
            return (next, vec![Action::RequestReservation]);
        }
        (S::EnRouteSpot, NodeEvent::GoalReached) => enter(&mut next, S::Parked),
        (S::EnRouteSpot, NodeEvent::GoalFailed) => {
            enter(&mut next, S::AwaitingPark);
            if let Some(spot) = next.held_spot.take() {
                actions.push(Action::ReleaseReservation(spot));
            }
        }
        (S::Parked, NodeEvent::Command(CommandKind::Retrieve)) => enter(&mut next, S::RetrievalRequested),
        (S::RetrievalRequested, NodeEvent::Tick) => {
            enter(&mut next, S::EnRoutePickup);
            actions.push(Action::SendPath(RouteGoal::PickupBay));
            if let Some(spot) = next.held_spot.take() {
                actions.push(Action::ReleaseReservation(spot));
            }
        }
        (S::EnRoutePickup, NodeEvent::GoalReached) => enter(&mut next, S::AtPickup),
        (S::EnRoutePickup, NodeEvent::GoalFailed) => enter(&mut next, S::Parked),
        (S::AtPickup, NodeEvent::Tick) if now_ns - state.entered_at_ns >= BAY_DWELL_NS => {
            enter(&mut next, S::Departed);
            actions.push(Action::Despawn);
        }
        _ => return (next, actions),
    }
    next.seq += 1;
    actions.push(Action::SendStatus {
        failed: matches!(event, NodeEvent::GoalFailed),
    });
    (next, actions)
}
