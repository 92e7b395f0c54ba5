use avp_core::node::fsm::{BAY_DWELL_NS, RESERVE_RETRY_NS};
use avp_core::node::{Action, LifecycleState as S, NodeEvent, NodeState, ReserveOutcome};
use avp_core::topics::CommandKind;

pub const SPOT: u32 = 4;

/// Event classes that the table distinguishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ev {
    Dropoff,
    Park,
    Retrieve,
    BayGrant,
    Grant,
    Deny,
    Reached,
    Failed,
    Tick,
}

pub const EVENTS: [Ev; 9] = [
    Ev::Dropoff,
    Ev::Park,
    Ev::Retrieve,
    Ev::BayGrant,
    Ev::Grant,
    Ev::Deny,
    Ev::Reached,
    Ev::Failed,
    Ev::Tick,
];

pub fn event(e: Ev) -> NodeEvent {
    match e {
        Ev::Dropoff => NodeEvent::Command(CommandKind::Dropoff),
        Ev::Park => NodeEvent::Command(CommandKind::Park),
        Ev::Retrieve => NodeEvent::Command(CommandKind::Retrieve),
        Ev::BayGrant => NodeEvent::BayGrant,
        Ev::Grant => NodeEvent::ReserveReply(ReserveOutcome::Grant(SPOT)),
        Ev::Deny => NodeEvent::ReserveReply(ReserveOutcome::Deny("no-spot".into())),
        Ev::Reached => NodeEvent::GoalReached,
        Ev::Failed => NodeEvent::GoalFailed,
        Ev::Tick => NodeEvent::Tick,
    }
}

/// Guard on the row: whether the vehicle is already en route to the bay,
/// whether the bay dwell has elapsed, whether a reservation retry is due.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Guard {
    Always,
    EnRoute,
    NotEnRoute,
    DwellDone,
    RetryDue,
}

pub struct Row {
    pub from: S,
    pub on: Ev,
    pub guard: Guard,
    pub to: S,
    pub actions: &'static [&'static str],
}

/// The lifecycle table written out row by row. States with no row for an
/// event must ignore it.
#[rustfmt::skip]
pub static TABLE: &[Row] = &[
    Row { from: S::Arriving, on: Ev::Dropoff, guard: Guard::Always, to: S::QueuedDropoff, actions: &["Enqueue", "SendStatus { failed: false }"] },
    Row { from: S::QueuedDropoff, on: Ev::BayGrant, guard: Guard::NotEnRoute, to: S::QueuedDropoff, actions: &["SendPath(DropoffBay)", "SendStatus { failed: false }"] },
    Row { from: S::QueuedDropoff, on: Ev::Reached, guard: Guard::EnRoute, to: S::AtDropoffBay, actions: &["SendStatus { failed: false }"] },
    Row { from: S::QueuedDropoff, on: Ev::Failed, guard: Guard::EnRoute, to: S::Arriving, actions: &["ReleaseBay", "SendStatus { failed: true }"] },
    Row { from: S::AtDropoffBay, on: Ev::Tick, guard: Guard::DwellDone, to: S::AwaitingPark, actions: &["ReleaseBay", "SendStatus { failed: false }"] },
    Row { from: S::AwaitingPark, on: Ev::Park, guard: Guard::Always, to: S::SpotRequested, actions: &["RequestReservation", "SendStatus { failed: false }"] },
    Row { from: S::SpotRequested, on: Ev::Grant, guard: Guard::Always, to: S::EnRouteSpot, actions: &["SendPath(Spot(4))", "SendStatus { failed: false }"] },
    Row { from: S::SpotRequested, on: Ev::Deny, guard: Guard::Always, to: S::SpotRequested, actions: &[] },
    Row { from: S::SpotRequested, on: Ev::Tick, guard: Guard::RetryDue, to: S::SpotRequested, actions: &["RequestReservation"] },
    Row { from: S::EnRouteSpot, on: Ev::Reached, guard: Guard::Always, to: S::Parked, actions: &["SendStatus { failed: false }"] },
    Row { from: S::EnRouteSpot, on: Ev::Failed, guard: Guard::Always, to: S::AwaitingPark, actions: &["ReleaseReservation(4)", "SendStatus { failed: true }"] },
    Row { from: S::Parked, on: Ev::Retrieve, guard: Guard::Always, to: S::RetrievalRequested, actions: &["SendStatus { failed: false }"] },
    Row { from: S::RetrievalRequested, on: Ev::Tick, guard: Guard::Always, to: S::EnRoutePickup, actions: &["SendPath(PickupBay)", "ReleaseReservation(4)", "SendStatus { failed: false }"] },
    Row { from: S::EnRoutePickup, on: Ev::Reached, guard: Guard::Always, to: S::AtPickup, actions: &["SendStatus { failed: false }"] },
    Row { from: S::EnRoutePickup, on: Ev::Failed, guard: Guard::Always, to: S::Parked, actions: &["SendStatus { failed: true }"] },
    Row { from: S::AtPickup, on: Ev::Tick, guard: Guard::DwellDone, to: S::Departed, actions: &["Despawn", "SendStatus { failed: false }"] },
];

#[derive(Debug, Clone, Copy)]
pub struct Ctx {
    pub en_route: bool,
    pub dwell_done: bool,
    pub retry_due: bool,
}

pub fn guard_holds(g: Guard, c: Ctx) -> bool {
    match g {
        Guard::Always => true,
        Guard::EnRoute => c.en_route,
        Guard::NotEnRoute => !c.en_route,
        Guard::DwellDone => c.dwell_done,
        Guard::RetryDue => c.retry_due,
    }
}

pub fn expected(from: S, on: Ev, c: Ctx) -> Option<&'static Row> {
    TABLE
        .iter()
        .find(|r| r.from == from && r.on == on && guard_holds(r.guard, c))
}

/// A concrete node state matching `c`, and the clock to apply the event at.
pub fn fixture(phase: S, c: Ctx) -> (NodeState, i64) {
    let entered = 10_000_000_000;
    let mut st = NodeState::new(entered);
    st.phase = phase;
    st.seq = 7;
    st.dropoff_en_route = phase == S::QueuedDropoff && c.en_route;
    if matches!(phase, S::EnRouteSpot | S::Parked | S::RetrievalRequested) {
        st.held_spot = Some(SPOT);
    }
    let now = entered + if c.dwell_done { BAY_DWELL_NS } else { BAY_DWELL_NS - 1 };
    if phase == S::SpotRequested {
        st.retry_at_ns = Some(if c.retry_due { now - 1 } else { now + RESERVE_RETRY_NS });
    }
    (st, now)
}

pub fn contexts() -> Vec<Ctx> {
    let mut v = Vec::new();
    for en_route in [false, true] {
        for dwell_done in [false, true] {
            for retry_due in [false, true] {
                v.push(Ctx {
                    en_route,
                    dwell_done,
                    retry_due,
                });
            }
        }
    }
    v
}

pub fn tags(actions: &[Action]) -> Vec<String> {
    actions.iter().map(|a| format!("{a:?}")).collect()
}
