use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Planar rigid transform (rotation about z followed by translation in x, y).
///
/// `apply(p) = R(yaw) * p + (x, y)`. The z offset is carried for file
/// compatibility and is always 0 here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub yaw: f64,
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub z: f64,
}

impl Default for EgoPose {
    fn default() -> Self {
        Self::identity()
    }
}

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut y = (a + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        y += 2.0 * PI;
    }
    y
}

impl EgoPose {
    pub fn new(yaw: f64, x: f64, y: f64) -> Self {
        Self {
            yaw: wrap_angle(yaw),
            x,
            y,
            z: 0.0,
        }
    }

    pub fn identity() -> Self {
        Self {
            yaw: 0.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    pub fn translation(x: f64, y: f64) -> Self {
        Self::new(0.0, x, y)
    }

    pub fn rotation(yaw: f64) -> Self {
        Self::new(yaw, 0.0, 0.0)
    }

    #[inline]
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let [rx, ry] = self.rotate(p);
        [rx + self.x, ry + self.y]
    }

    /// Rotates a free vector (no translation).
    #[inline]
    pub fn rotate(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }

    /// Rotates a free vector by the inverse rotation.
    #[inline]
    pub fn unrotate(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }

    /// `self ∘ other`: applying the result equals applying `other`, then `self`.
    pub fn compose(&self, other: &EgoPose) -> EgoPose {
        let [tx, ty] = self.apply([other.x, other.y]);
        EgoPose::new(self.yaw + other.yaw, tx, ty)
    }

    pub fn inverse(&self) -> EgoPose {
        let [tx, ty] = self.unrotate([self.x, self.y]);
        EgoPose::new(-self.yaw, -tx, -ty)
    }

    /// Flattened planar `[R | T]`, row-major 2x3.
    pub fn matrix_2x3(&self) -> [f64; 6] {
        let (s, c) = self.yaw.sin_cos();
        [c, -s, self.x, s, c, self.y]
    }

    pub fn approx_eq(&self, other: &EgoPose, tol: f64) -> bool {
        wrap_angle(self.yaw - other.yaw).abs() <= tol
            && (self.x - other.x).abs() <= tol
            && (self.y - other.y).abs() <= tol
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn compose_identity() {
        let p = EgoPose::new(0.3, 1.0, -2.0);
        assert_eq!(EgoPose::identity().compose(&p), p);
    }

    #[test]
    fn commuting_translations() {
        let r = EgoPose::translation(1.0, 0.0).compose(&EgoPose::translation(0.0, 2.0));
        assert!(r.approx_eq(&EgoPose::translation(1.0, 2.0), 1e-12));
    }

    #[test]
    fn rotation_after_translation() {
        // translate (1,0) first, then rotate by 90 degrees: (0,0) -> (1,0) -> (0,1)
        let r = EgoPose::rotation(PI / 2.0).compose(&EgoPose::translation(1.0, 0.0));
        let q = r.apply([0.0, 0.0]);
        assert!((q[0] - 0.0).abs() < 1e-12 && (q[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-0.5) + 0.5).abs() < 1e-15);
    }

    fn pose() -> impl Strategy<Value = EgoPose> {
        (-10.0..10.0f64, -50.0..50.0f64, -50.0..50.0f64).prop_map(|(a, x, y)| EgoPose::new(a, x, y))
    }

    proptest! {
        #[test]
        fn inverse_cancels(a in pose()) {
            prop_assert!(a.compose(&a.inverse()).approx_eq(&EgoPose::identity(), 1e-9));
            prop_assert!(a.inverse().compose(&a).approx_eq(&EgoPose::identity(), 1e-9));
        }

        #[test]
        fn compose_associative(a in pose(), b in pose(), c in pose()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!(l.approx_eq(&r, 1e-9));
        }

        #[test]
        fn compose_matches_sequential_apply(a in pose(), b in pose(), px in -20.0..20.0f64, py in -20.0..20.0f64) {
            let seq = a.apply(b.apply([px, py]));
            let one = a.compose(&b).apply([px, py]);
            prop_assert!((seq[0] - one[0]).abs() < 1e-9 && (seq[1] - one[1]).abs() < 1e-9);
        }
    }
}
