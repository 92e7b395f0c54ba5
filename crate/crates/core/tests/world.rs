use avp_core::geometry::{sat_intersects, Pose2};
use avp_core::world::{VehicleBody, World, WorldEvent, DEFAULT_MAX_SPEED_MPS, DEFAULT_TICK_S};
use proptest::prelude::*;

const SPACING: f64 = 10.0;

/// Grid cell, initial yaw and waypoints (x, y, yaw) per vehicle.
type Fleet = Vec<(usize, f64, Vec<(f64, f64, f64)>)>;

fn fleet() -> impl Strategy<Value = Fleet> {
    let waypoint = (0.0..30.0f64, 0.0..30.0f64, -3.1..3.1f64);
    let vehicle = (0usize..16, -3.1..3.1f64, prop::collection::vec(waypoint, 1..4));
    prop::collection::vec(vehicle, 2..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bodies_never_overlap_and_never_outrun_their_speed(spec in fleet()) {
        let mut world = World::new();
        let mut cells = std::collections::BTreeSet::new();
        for (i, (cell, yaw, path)) in spec.iter().enumerate() {
            if !cells.insert(*cell) {
                continue;
            }
            let ns = format!("v{i}");
            let x = (cell % 4) as f64 * SPACING;
            let y = (cell / 4) as f64 * SPACING;
            world.add_vehicle(VehicleBody::new(&ns, Pose2::new(x, y, *yaw))).unwrap();
            let poses = path.iter().map(|&(x, y, yaw)| Pose2::new(x, y, yaw)).collect();
            world.assign_path(&ns, 1, poses);
        }

        let bound = DEFAULT_MAX_SPEED_MPS * DEFAULT_TICK_S + 1e-9;
        for _ in 0..600 {
            let before: Vec<_> = world.vehicles().map(|v| (v.ns.clone(), v.pose)).collect();
            let events = world.step(DEFAULT_TICK_S).unwrap();
            for e in &events {
                let collided = matches!(e, WorldEvent::Collision { .. });
                prop_assert!(!collided, "{:?}", e);
            }
            for (ns, p) in &before {
                let q = world.vehicle(ns).unwrap().pose;
                let moved = p.position().dist(q.position());
                prop_assert!(moved <= bound, "{} moved {} in one tick", ns, moved);
            }
            let bodies: Vec<_> = world.vehicles().collect();
            for (i, a) in bodies.iter().enumerate() {
                for b in &bodies[i + 1..] {
                    prop_assert!(
                        !sat_intersects(&a.footprint(), &b.footprint()),
                        "{} and {} overlap", a.ns, b.ns
                    );
                }
            }
        }
    }
}
