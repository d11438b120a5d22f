//! Frames, pose errors and closed-form distance primitives.
//!
//! Everything here is a pure function on immutable values; kinematics,
//! constraint generation and perception all build on these.

use nalgebra::{Point3, Rotation3, Unit, Vector3, Vector6};

/// Normalize an angle to the half-open interval `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a <= -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    } else if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    }
    a
}

/// A 6-DOF pose as position plus roll/pitch/yaw, with a per-component
/// mask marking which components are actually constrained.
///
/// Component order is `[x, y, z, roll, pitch, yaw]`. The rotation
/// convention is `R = Rz(yaw) * Ry(pitch) * Rx(roll)`. An unconstrained
/// component (mask `false`) contributes a zero row to pose errors and is
/// dropped from task Jacobians before solving.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose6 {
    pub position: Vector3<f64>,
    /// roll, pitch, yaw in radians, each normalized to `(-pi, pi]`.
    pub rpy: Vector3<f64>,
    pub mask: [bool; 6],
}

impl Pose6 {
    pub fn new(position: Vector3<f64>, rpy: Vector3<f64>) -> Self {
        Self::with_mask(position, rpy, [true; 6])
    }

    pub fn with_mask(position: Vector3<f64>, rpy: Vector3<f64>, mask: [bool; 6]) -> Self {
        assert!(mask.iter().any(|&m| m), "Pose6 requires >= 1 constrained component");
        Self {
            position,
            rpy: Vector3::new(wrap_angle(rpy.x), wrap_angle(rpy.y), wrap_angle(rpy.z)),
            mask,
        }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_euler_angles(self.rpy.x, self.rpy.y, self.rpy.z)
    }

    /// Build from a rotation matrix, extracting roll/pitch/yaw.
    pub fn from_parts(position: Vector3<f64>, rotation: &Rotation3<f64>) -> Self {
        let (r, p, y) = rotation.euler_angles();
        Self::new(position, Vector3::new(r, p, y))
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().chain(self.rpy.iter()).all(|v| v.is_finite())
    }
}

/// Task-space error between two poses as a 6-vector `[dp; dtheta]`.
///
/// The position part is `desired - current`. The orientation part is the
/// angle-axis vector of `R_des * R_cur^T`, which stays continuous where
/// plain RPY subtraction would wrap. Components masked out in either pose
/// are forced to zero.
pub fn pose_error(current: &Pose6, desired: &Pose6) -> Vector6<f64> {
    assert!(current.is_finite() && desired.is_finite(), "pose_error on non-finite pose");
    let dp = desired.position - current.position;
    let r_err = desired.rotation() * current.rotation().transpose();
    let w = r_err.scaled_axis();
    let mut e = Vector6::new(dp.x, dp.y, dp.z, w.x, w.y, w.z);
    for i in 0..6 {
        if !current.mask[i] || !desired.mask[i] {
            e[i] = 0.0;
        }
    }
    e
}

/// Infinite cylinder described by a point on its axis, the (unit) axis
/// direction and a radius.
#[derive(Debug, Clone, Copy)]
pub struct Cylinder {
    pub axis_point: Point3<f64>,
    pub axis_direction: Unit<Vector3<f64>>,
    pub radius: f64,
}

impl Cylinder {
    pub fn new(axis_point: Point3<f64>, axis_direction: Vector3<f64>, radius: f64) -> Self {
        assert!(radius > 0.0, "cylinder radius must be positive");
        Self {
            axis_point,
            axis_direction: Unit::new_normalize(axis_direction),
            radius,
        }
    }
}

/// Axis-aligned ellipsoid with circular symmetry: semi-axes are
/// `(d_h, d_v, d_h)` along the camera x, y, z axes.
#[derive(Debug, Clone, Copy)]
pub struct Ellipsoid {
    pub center: Point3<f64>,
    pub d_h: f64,
    pub d_v: f64,
}

impl Ellipsoid {
    pub fn new(center: Point3<f64>, d_h: f64, d_v: f64) -> Self {
        assert!(d_h > 0.0 && d_v > 0.0, "ellipsoid semi-axes must be positive");
        Self { center, d_h, d_v }
    }

    /// Radius of the bounding sphere used for conservative distance queries.
    pub fn bounding_radius(&self) -> f64 {
        self.d_h.max(self.d_v)
    }
}

/// A segment with a radius; used as link collision geometry.
#[derive(Debug, Clone, Copy)]
pub struct Capsule {
    pub a: Point3<f64>,
    pub b: Point3<f64>,
    pub radius: f64,
}

impl Capsule {
    pub fn new(a: Point3<f64>, b: Point3<f64>, radius: f64) -> Self {
        assert!(radius > 0.0, "capsule radius must be positive");
        Self { a, b, radius }
    }
}

/// Signed distance from a point to a cylinder surface; negative inside.
pub fn dist_point_cylinder(p: &Point3<f64>, c: &Cylinder) -> f64 {
    let d = p - c.axis_point;
    let radial = d - c.axis_direction.as_ref() * d.dot(&c.axis_direction);
    radial.norm() - c.radius
}

/// Closest point on segment `[a, b]` to `p`.
pub fn closest_point_on_segment(p: &Point3<f64>, a: &Point3<f64>, b: &Point3<f64>) -> Point3<f64> {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 <= f64::EPSILON {
        return *a;
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    a + ab * t
}

/// Closest points between segments `[p1, q1]` and `[p2, q2]`.
///
/// Clamped quadratic minimization after Ericson, "Real-Time Collision
/// Detection", 5.1.9.
pub fn closest_points_segments(
    p1: &Point3<f64>,
    q1: &Point3<f64>,
    p2: &Point3<f64>,
    q2: &Point3<f64>,
) -> (Point3<f64>, Point3<f64>) {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);

    let (mut s, mut t);
    if a <= f64::EPSILON && e <= f64::EPSILON {
        return (*p1, *p2);
    }
    if a <= f64::EPSILON {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= f64::EPSILON {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            s = if denom > f64::EPSILON {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            t = (b * s + f) / e;
            if t < 0.0 {
                t = 0.0;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t > 1.0 {
                t = 1.0;
                s = ((b - c) / a).clamp(0.0, 1.0);
            }
        }
    }
    (p1 + d1 * s, p2 + d2 * t)
}

/// Minimum distance between two segments.
pub fn dist_segment_segment(
    p1: &Point3<f64>,
    q1: &Point3<f64>,
    p2: &Point3<f64>,
    q2: &Point3<f64>,
) -> f64 {
    let (c1, c2) = closest_points_segments(p1, q1, p2, q2);
    (c1 - c2).norm()
}

/// Conservative distance from a point to an ellipsoid: the distance to
/// its bounding sphere. Never exceeds the true ellipsoid distance, which
/// is the safe direction for collision avoidance.
pub fn dist_point_ellipsoid(p: &Point3<f64>, e: &Ellipsoid) -> f64 {
    (p - e.center).norm() - e.bounding_radius()
}

/// Point on segment `[a, b]` closest to the axis line of `c`, and its
/// radial direction (unit vector from the axis towards the point).
///
/// Returns `None` when the closest point lies on the axis itself, where
/// no radial direction exists.
pub fn segment_cylinder_witness(
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Cylinder,
) -> Option<(Point3<f64>, Unit<Vector3<f64>>, f64)> {
    let u = c.axis_direction.as_ref();
    let perp = |v: Vector3<f64>| v - u * v.dot(u);
    let w0 = perp(a - c.axis_point);
    let wd = perp(b - a);
    let len2 = wd.norm_squared();
    let s = if len2 <= f64::EPSILON {
        0.5
    } else {
        (-w0.dot(&wd) / len2).clamp(0.0, 1.0)
    };
    let p = a + (b - a) * s;
    let radial = perp(p - c.axis_point);
    let r = radial.norm();
    if r <= 1e-12 {
        return None;
    }
    Some((p, Unit::new_normalize(radial), r - c.radius))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn pose(p: [f64; 3], rpy: [f64; 3]) -> Pose6 {
        Pose6::new(Vector3::from(p), Vector3::from(rpy))
    }

    #[test]
    fn pose_error_identity() {
        let x = pose([0.3, -0.1, 0.9], [0.2, -0.4, 1.1]);
        assert_relative_eq!(pose_error(&x, &x).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pose_error_single_axis_yaw() {
        let cur = pose([0.0, 0.0, 0.0], [0.0, 0.0, 0.0]);
        let des = pose([0.0, 0.0, 0.0], [0.0, 0.0, FRAC_PI_2]);
        let e = pose_error(&cur, &des);
        assert_relative_eq!(e[5], FRAC_PI_2, epsilon = 1e-12);
        assert_relative_eq!(e.fixed_rows::<5>(0).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pose_error_masked_pitch_is_zero() {
        let cur = pose([0.1, 0.2, 0.3], [0.0, 0.4, 0.0]);
        let mut des = pose([0.1, 0.2, 0.3], [0.0, 1.4, 0.0]);
        des.mask[4] = false;
        let e = pose_error(&cur, &des);
        // pure pitch difference, pitch masked out
        assert_relative_eq!(e.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn point_cylinder_basics() {
        let c = Cylinder::new(Point3::origin(), Vector3::y(), 0.3);
        assert_relative_eq!(dist_point_cylinder(&Point3::new(0.0, 2.0, 0.0), &c), -0.3);
        assert_relative_eq!(dist_point_cylinder(&Point3::new(0.5, -1.0, 0.0), &c), 0.2);
    }

    #[test]
    fn point_cylinder_matches_axis_sampling_oracle() {
        let mut rng_state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        for _ in 0..50 {
            let c = Cylinder::new(
                Point3::new(next(), next(), next()),
                Vector3::new(next(), next(), next() + 2.5),
                0.1 + next().abs(),
            );
            let p = Point3::new(next(), next(), next());
            // brute-force: min distance of p to 1e5 samples of the axis line
            let mut best = f64::INFINITY;
            for i in 0..100_000 {
                let t = -50.0 + 100.0 * i as f64 / 99_999.0;
                let q = c.axis_point + c.axis_direction.as_ref() * t;
                best = best.min((p - q).norm());
            }
            assert_relative_eq!(dist_point_cylinder(&p, &c), best - c.radius, epsilon = 1e-6);
        }
    }

    #[test]
    fn segment_segment_basics() {
        let a = Point3::new(0.0, 0.0, 0.0);
        let b = Point3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(dist_segment_segment(&a, &b, &a, &b), 0.0);
        let c = Point3::new(0.0, 0.4, 0.0);
        let d = Point3::new(1.0, 0.4, 0.0);
        assert_relative_eq!(dist_segment_segment(&a, &b, &c, &d), 0.4);
    }

    #[test]
    fn segment_segment_matches_grid_oracle() {
        let cases = [
            ([0.0, 0.0, 0.0], [1.0, 0.2, 0.1], [0.3, 0.8, -0.4], [0.9, -0.3, 0.7]),
            ([-1.0, 0.5, 0.2], [0.4, 0.4, 0.4], [0.0, 0.0, 1.0], [0.0, 0.0, 2.0]),
            ([0.1, 0.1, 0.1], [0.1, 0.1, 0.1], [1.0, 1.0, 1.0], [2.0, 0.0, 1.0]),
            ([0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [1.0, 1.0, 0.0], [1.0, 2.0, 0.0]),
        ];
        for (p1, q1, p2, q2) in cases {
            let (p1, q1) = (Point3::from(p1), Point3::from(q1));
            let (p2, q2) = (Point3::from(p2), Point3::from(q2));
            let mut best = f64::INFINITY;
            for i in 0..1000 {
                let s = i as f64 / 999.0;
                let x = p1 + (q1 - p1) * s;
                for j in 0..1000 {
                    let t = j as f64 / 999.0;
                    let y = p2 + (q2 - p2) * t;
                    best = best.min((x - y).norm());
                }
            }
            assert_relative_eq!(dist_segment_segment(&p1, &q1, &p2, &q2), best, epsilon = 1e-5);
        }
    }

    #[test]
    fn point_ellipsoid_basics() {
        let e = Ellipsoid::new(Point3::new(0.0, 0.0, 0.5), 0.03, 0.05);
        assert_relative_eq!(dist_point_ellipsoid(&e.center, &e), -0.05);
        let s = Ellipsoid::new(Point3::origin(), 0.04, 0.04);
        assert_relative_eq!(dist_point_ellipsoid(&Point3::new(0.08, 0.0, 0.0), &s), 0.04);
    }

    #[test]
    fn point_ellipsoid_is_conservative() {
        // distance to bounding sphere must never exceed the true distance,
        // estimated by dense surface sampling
        let cases = [
            (Ellipsoid::new(Point3::new(0.1, -0.2, 0.6), 0.03, 0.06), Point3::new(0.4, 0.1, 0.2)),
            (Ellipsoid::new(Point3::origin(), 0.05, 0.02), Point3::new(0.0, 0.3, 0.0)),
            (Ellipsoid::new(Point3::origin(), 0.02, 0.08), Point3::new(0.2, 0.0, 0.0)),
        ];
        for (e, p) in cases {
            let mut oracle = f64::INFINITY;
            let n = 100;
            for i in 0..n {
                let th = PI * i as f64 / (n - 1) as f64;
                for j in 0..n {
                    let ph = std::f64::consts::TAU * j as f64 / n as f64;
                    let s = e.center
                        + Vector3::new(
                            e.d_h * th.sin() * ph.cos(),
                            e.d_v * th.cos(),
                            e.d_h * th.sin() * ph.sin(),
                        );
                    oracle = oracle.min((p - s).norm());
                }
            }
            assert!(dist_point_ellipsoid(&p, &e) <= oracle + 1e-9);
        }
    }

    #[test]
    fn segment_cylinder_witness_radial() {
        let c = Cylinder::new(Point3::origin(), Vector3::y(), 0.3);
        let (p, n, d) = segment_cylinder_witness(
            &Point3::new(1.0, -0.5, 0.0),
            &Point3::new(1.0, 0.5, 0.0),
            &c,
        )
        .unwrap();
        assert_relative_eq!(d, 0.7, epsilon = 1e-12);
        assert_relative_eq!(n.x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(p.x, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn segment_on_cylinder_axis_has_no_witness() {
        let c = Cylinder::new(Point3::origin(), Vector3::y(), 0.3);
        assert!(segment_cylinder_witness(
            &Point3::new(0.0, -1.0, 0.0),
            &Point3::new(0.0, 1.0, 0.0),
            &c
        )
        .is_none());
    }

    proptest! {
        #[test]
        fn pose_error_orientation_bounded_by_pi(
            r1 in -3.1f64..3.1, p1 in -1.5f64..1.5, y1 in -3.1f64..3.1,
            r2 in -3.1f64..3.1, p2 in -1.5f64..1.5, y2 in -3.1f64..3.1,
        ) {
            let a = pose([0.0; 3], [r1, p1, y1]);
            let b = pose([0.0; 3], [r2, p2, y2]);
            let e = pose_error(&a, &b);
            prop_assert!(e.fixed_rows::<3>(3).norm() <= PI + 1e-9);
        }

        #[test]
        fn segment_distance_symmetric_and_nonnegative(
            v in proptest::array::uniform12(-1.0f64..1.0)
        ) {
            let p1 = Point3::new(v[0], v[1], v[2]);
            let q1 = Point3::new(v[3], v[4], v[5]);
            let p2 = Point3::new(v[6], v[7], v[8]);
            let q2 = Point3::new(v[9], v[10], v[11]);
            let d12 = dist_segment_segment(&p1, &q1, &p2, &q2);
            let d21 = dist_segment_segment(&p2, &q2, &p1, &q1);
            prop_assert!(d12 >= 0.0);
            prop_assert!((d12 - d21).abs() <= 1e-9);
        }

        #[test]
        fn rpy_roundtrip_away_from_gimbal_lock(
            r in -3.0f64..3.0, p in -1.4f64..1.4, y in -3.0f64..3.0,
        ) {
            let x = pose([0.0; 3], [r, p, y]);
            let back = Pose6::from_parts(x.position, &x.rotation());
            prop_assert!((back.rpy - x.rpy).norm() < 1e-9);
        }
    }
}
