//! Line-of-sight geometry and free-space path loss.
//!
//! All UAVs fly at the common altitude `H`, so every air-to-ground link has a
//! squared length of `‖q − w‖² + H²` and a power gain of `β0 / d²`.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::scenario::NoFlyZone;

/// Horizontal position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

/// Horizontal location of a UAV in one time slot.
pub type Waypoint = Point;

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist(self, other: Point) -> f64 {
        (self - other).norm()
    }

    pub fn dist_sq(self, other: Point) -> f64 {
        (self - other).norm_sq()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Rotates by +90°.
    pub fn perp(self) -> Point {
        Point::new(-self.y, self.x)
    }
}

impl From<[f64; 2]> for Point {
    fn from(v: [f64; 2]) -> Self {
        Point::new(v[0], v[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, rhs: Point) -> Point {
        Point::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, rhs: Point) -> Point {
        Point::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, rhs: f64) -> Point {
        Point::new(self.x * rhs, self.y * rhs)
    }
}

/// Squared 3D link length between a UAV at altitude `altitude` and a ground node.
#[inline]
pub fn link_distance_sq(q: Waypoint, w: Point, altitude: f64) -> f64 {
    q.dist_sq(w) + altitude * altitude
}

/// 3D link length between a UAV at altitude `altitude` and a ground node.
#[inline]
pub fn link_distance(q: Waypoint, w: Point, altitude: f64) -> f64 {
    link_distance_sq(q, w, altitude).sqrt()
}

/// Free-space channel power gain `β0 / d²`.
#[inline]
pub fn channel_gain(q: Waypoint, w: Point, altitude: f64, ref_gain: f64) -> f64 {
    ref_gain / link_distance_sq(q, w, altitude)
}

/// True when `q` lies strictly inside the ground disk of `zone`; the boundary is allowed.
#[inline]
pub fn inside_nfz(q: Waypoint, zone: &NoFlyZone) -> bool {
    q.dist_sq(zone.center) < zone.radius * zone.radius
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn zone() -> NoFlyZone {
        NoFlyZone {
            center: Point::new(150.0, 325.0),
            radius: 60.0,
            height: 150.0,
        }
    }

    #[test]
    fn distance_examples() {
        let o = Point::new(0.0, 0.0);
        assert_eq!(link_distance(o, o, 100.0), 100.0);
        assert_relative_eq!(
            link_distance(Point::new(300.0, 400.0), o, 100.0),
            260_000f64.sqrt(),
            max_relative = 1e-15
        );
        assert_relative_eq!(
            link_distance(Point::new(300.0, 400.0), o, 100.0),
            509.902,
            epsilon = 1e-3
        );
        let p = Point::new(50.0, 50.0);
        assert_eq!(link_distance(p, p, 100.0), 100.0);
    }

    #[test]
    fn gain_examples() {
        let o = Point::new(0.0, 0.0);
        assert_relative_eq!(channel_gain(o, o, 100.0, 1e-5), 1e-9, max_relative = 1e-15);
        assert_relative_eq!(
            channel_gain(Point::new(300.0, 400.0), o, 100.0, 1e-5),
            1e-5 / 260_000.0,
            max_relative = 1e-15
        );
        assert_relative_eq!(
            channel_gain(Point::new(300.0, 400.0), o, 100.0, 1e-5),
            3.846e-11,
            max_relative = 1e-3
        );
        let near = channel_gain(o, o, 100.0, 1e-5);
        let far = channel_gain(Point::new(2.0, 0.0), o, 100.0, 1e-5);
        assert!(far < near);
    }

    #[test]
    fn nfz_membership() {
        let z = zone();
        assert!(inside_nfz(Point::new(150.0, 325.0), &z));
        assert!(!inside_nfz(Point::new(90.0, 325.0), &z));
        assert!(!inside_nfz(Point::new(0.0, 0.0), &z));
        assert!(inside_nfz(Point::new(90.5, 325.0), &z));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn gain_times_distance_sq_is_ref_gain(
                qx in -1e3..1e3f64, qy in -1e3..1e3f64,
                wx in -1e3..1e3f64, wy in -1e3..1e3f64,
                h in 1.0..500.0f64, b in 1e-8..1e-2f64,
            ) {
                let q = Point::new(qx, qy);
                let w = Point::new(wx, wy);
                let d = link_distance(q, w, h);
                let g = channel_gain(q, w, h, b);
                prop_assert!(((g * d * d) - b).abs() <= 1e-12 * b);
                prop_assert!(d >= h);
            }

            #[test]
            fn distance_is_symmetric(
                qx in -1e3..1e3f64, qy in -1e3..1e3f64,
                wx in -1e3..1e3f64, wy in -1e3..1e3f64,
            ) {
                let q = Point::new(qx, qy);
                let w = Point::new(wx, wy);
                prop_assert_eq!(link_distance(q, w, 100.0), link_distance(w, q, 100.0));
            }

            #[test]
            fn gain_decreases_with_offset(r in 1e-3..1e4f64) {
                let o = Point::new(0.0, 0.0);
                prop_assert!(channel_gain(Point::new(r, 0.0), o, 100.0, 1e-5) < channel_gain(o, o, 100.0, 1e-5));
            }
        }
    }
}
