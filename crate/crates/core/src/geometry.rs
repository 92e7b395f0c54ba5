//! Planar geometry for oriented rectangles: separating-axis intersection
//! and exact overlap area by convex clipping.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, o: Self) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Self) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Self) -> f64 {
        (self - o).norm()
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

/// Wraps an angle into (-π, π].
pub fn normalize_angle(theta: f64) -> f64 {
    let mut a = theta % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Smallest absolute difference between two angles.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    normalize_angle(a - b).abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

/// Rectangle with center, half-extents along its local axes, and rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedRect {
    pub cx: f64,
    pub cy: f64,
    pub hx: f64,
    pub hy: f64,
    #[serde(default)]
    pub yaw: f64,
}

impl OrientedRect {
    pub fn new(cx: f64, cy: f64, hx: f64, hy: f64, yaw: f64) -> Self {
        Self { cx, cy, hx, hy, yaw }
    }

    /// Footprint of a body of `length` x `width` centered on `pose`, with the
    /// length along the heading.
    pub fn footprint(pose: &Pose2, length: f64, width: f64) -> Self {
        Self::new(pose.x, pose.y, length / 2.0, width / 2.0, pose.yaw)
    }

    pub fn center(&self) -> Vec2 {
        Vec2::new(self.cx, self.cy)
    }

    pub fn area(&self) -> f64 {
        4.0 * self.hx * self.hy
    }

    /// Unit local axes (x, y).
    pub fn axes(&self) -> [Vec2; 2] {
        let (s, c) = self.yaw.sin_cos();
        [Vec2::new(c, s), Vec2::new(-s, c)]
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [Vec2; 4] {
        let [ux, uy] = self.axes();
        let c = self.center();
        let ex = ux * self.hx;
        let ey = uy * self.hy;
        [c - ex - ey, c + ex - ey, c + ex + ey, c - ex + ey]
    }

    /// Point containment, boundary included.
    pub fn contains(&self, p: Vec2) -> bool {
        let [ux, uy] = self.axes();
        let d = p - self.center();
        d.dot(ux).abs() <= self.hx && d.dot(uy).abs() <= self.hy
    }

    pub fn is_valid(&self) -> bool {
        [self.cx, self.cy, self.hx, self.hy, self.yaw]
            .iter()
            .all(|v| v.is_finite())
            && self.hx > 0.0
            && self.hy > 0.0
    }
}

fn project(corners: &[Vec2; 4], axis: Vec2) -> (f64, f64) {
    corners.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let d = p.dot(axis);
        (lo.min(d), hi.max(d))
    })
}

/// Separating-axis test over the four edge normals. Rectangles that only
/// touch along an edge or at a corner are not intersecting.
pub fn sat_intersects(a: &OrientedRect, b: &OrientedRect) -> bool {
    let ca = a.corners();
    let cb = b.corners();
    a.axes().into_iter().chain(b.axes()).all(|axis| {
        let (a_lo, a_hi) = project(&ca, axis);
        let (b_lo, b_hi) = project(&cb, axis);
        a_hi > b_lo && b_hi > a_lo
    })
}

/// Sutherland–Hodgman: clips `subject` against the convex, counter-clockwise
/// polygon `clip`.
pub fn clip_convex(subject: &[Vec2], clip: &[Vec2]) -> Vec<Vec2> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let e0 = clip[i];
        let e1 = clip[(i + 1) % clip.len()];
        let edge = e1 - e0;
        let inside = |p: Vec2| edge.cross(p - e0) >= 0.0;
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (cur_in, prev_in) = (inside(cur), inside(prev));
            if cur_in != prev_in {
                let d = cur - prev;
                let denom = edge.cross(d);
                if denom != 0.0 {
                    let t = edge.cross(e0 - prev) / denom;
                    output.push(prev + d * t);
                }
            }
            if cur_in {
                output.push(cur);
            }
        }
    }
    output
}

/// Shoelace area (absolute).
pub fn polygon_area(poly: &[Vec2]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let twice: f64 = (0..poly.len()).map(|i| poly[i].cross(poly[(i + 1) % poly.len()])).sum();
    twice.abs() / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub intersects: bool,
    pub area: f64,
}

pub fn oriented_rect_overlap(a: &OrientedRect, b: &OrientedRect) -> Overlap {
    if !sat_intersects(a, b) {
        return Overlap {
            intersects: false,
            area: 0.0,
        };
    }
    let area = polygon_area(&clip_convex(&a.corners(), &b.corners()));
    Overlap { intersects: true, area }
}
