use std::collections::{BTreeMap, BTreeSet};

use avp_core::geometry::OrientedRect;
use avp_core::harness::scenario::ScriptedCommand;
use avp_core::harness::{Scenario, StopWhen, TapEntry, VehicleSpec};
use avp_core::topics::{self, CommandKind, PoseRecord, ReservedEntry};
use avp_core::world::LotMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Point-in-rectangle written out from the rectangle definition, without
/// going through the library's corner or axis helpers.
pub fn inside(r: &OrientedRect, x: f64, y: f64) -> bool {
    let (s, c) = r.yaw.sin_cos();
    let (dx, dy) = (x - r.cx, y - r.cy);
    let u = dx * c + dy * s;
    let v = -dx * s + dy * c;
    u.abs() <= r.hx && v.abs() <= r.hy
}

/// Samples uniformly inside `a` and counts the fraction also inside `b`.
pub fn monte_carlo_overlap(a: &OrientedRect, b: &OrientedRect, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (s, c) = a.yaw.sin_cos();
    let mut hits = 0usize;
    for _ in 0..n {
        let u = rng.gen_range(-a.hx..a.hx);
        let v = rng.gen_range(-a.hy..a.hy);
        let x = a.cx + u * c - v * s;
        let y = a.cy + u * s + v * c;
        if inside(b, x, y) {
            hits += 1;
        }
    }
    4.0 * a.hx * a.hy * hits as f64 / n as f64
}

/// Replays the reservation tables and returns every moment at which a spot
/// had two holders or a vehicle held two spots.
pub fn mutex_violations(tap: &[TapEntry]) -> Vec<String> {
    let mut bad = Vec::new();
    for e in tap {
        let env = &e.envelope;
        if env.key != topics::COORD_RESERVED || env.sender_id != topics::MANAGERS_ID {
            continue;
        }
        let table: Vec<ReservedEntry> = serde_json::from_value(env.payload.clone()).unwrap();
        let mut by_spot: BTreeMap<u32, Vec<&str>> = BTreeMap::new();
        let mut by_ns: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
        for r in &table {
            by_spot.entry(r.spot_id).or_default().push(&r.ns);
            by_ns.entry(&r.ns).or_default().push(r.spot_id);
        }
        bad.extend(
            by_spot
                .iter()
                .filter(|(_, h)| h.len() > 1)
                .map(|(s, h)| format!("t={} spot {s}: {h:?}", env.timestamp_ns)),
        );
        bad.extend(
            by_ns
                .iter()
                .filter(|(_, s)| s.len() > 1)
                .map(|(n, s)| format!("t={} {n} holds {s:?}", env.timestamp_ns)),
        );
    }
    bad
}

pub fn random_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(3..=6);
    let mut slots: Vec<usize> = (0..6).collect();
    let vehicles: Vec<VehicleSpec> = (0..n)
        .map(|i| VehicleSpec {
            ns: format!("v{}", i + 1),
            spawn_index: slots.remove(rng.gen_range(0..slots.len())),
            class_label: "sedan".into(),
        })
        .collect();
    let mut script = Vec::new();
    for v in &vehicles {
        let t0 = rng.gen_range(0.0..8.0);
        let t1 = t0 + rng.gen_range(0.0..10.0);
        let t2 = t1 + rng.gen_range(0.0..30.0);
        for (at_s, kind) in [
            (t0, CommandKind::Dropoff),
            (t1, CommandKind::Park),
            (t2, CommandKind::Retrieve),
        ] {
            script.push(ScriptedCommand {
                at_s,
                kind,
                target_ns: v.ns.clone(),
            });
        }
    }
    script.sort_by(|a, b| a.at_s.total_cmp(&b.at_s));
    let mut s = super::scenario("two_host");
    s.name = format!("random-{seed}");
    s.seed = seed;
    s.vehicles = vehicles;
    s.command_script = script;
    s.duration_s = 300.0;
    s.stop_when = StopWhen::AllDeparted;
    s
}

pub type Pt = (f64, f64);

pub fn corners(p: &PoseRecord) -> Vec<Pt> {
    let (s, c) = p.yaw.sin_cos();
    let (a, b) = (p.len / 2.0, p.wid / 2.0);
    [(a, b), (-a, b), (-a, -b), (a, -b)]
        .iter()
        .map(|&(u, v)| (p.x + u * c - v * s, p.y + u * s + v * c))
        .collect()
}

pub fn rect_corners(r: &OrientedRect) -> Vec<Pt> {
    corners(&PoseRecord {
        ns: String::new(),
        x: r.cx,
        y: r.cy,
        yaw: r.yaw,
        len: 2.0 * r.hx,
        wid: 2.0 * r.hy,
        class: String::new(),
    })
}

pub fn shoelace(poly: &[Pt]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

/// Sutherland-Hodgman against a counter-clockwise convex clip polygon.
pub fn clip(subject: &[Pt], clipper: &[Pt]) -> Vec<Pt> {
    let mut out = subject.to_vec();
    for i in 0..clipper.len() {
        let (a, b) = (clipper[i], clipper[(i + 1) % clipper.len()]);
        let side = |p: Pt| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
            }
        }
        if out.is_empty() {
            break;
        }
    }
    out
}

/// Spots covered beyond `theta` by any pose, by polygon clipping.
pub fn truth(poses: &[PoseRecord], map: &LotMap, theta: f64) -> BTreeSet<u32> {
    map.spots()
        .iter()
        .filter(|s| {
            let spot = rect_corners(&s.rect);
            let area = shoelace(&spot);
            poses.iter().any(|p| shoelace(&clip(&corners(p), &spot)) / area > theta)
        })
        .map(|s| s.id)
        .collect()
}
