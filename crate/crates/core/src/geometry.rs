//! Planar rigid-body geometry: poses, composition and the SE(2) exponential map.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(angle: f64) -> f64 {
    let mut a = angle % TAU;
    if a > PI {
        a -= TAU;
    } else if a <= -PI {
        a += TAU;
    }
    a
}

/// Signed shortest rotation taking `from` onto `to`.
pub fn angle_diff(to: f64, from: f64) -> f64 {
    normalize_angle(to - from)
}

/// Planar pose in meters and radians. Also used as a rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub const fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    /// `self ⊕ other`: `other` expressed in the frame of `self`, mapped out to the parent frame.
    pub fn compose(&self, other: &Pose2D) -> Pose2D {
        let (s, c) = self.theta.sin_cos();
        Pose2D::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> Pose2D {
        let (s, c) = self.theta.sin_cos();
        Pose2D::new(
            -c * self.x - s * self.y,
            s * self.x - c * self.y,
            -self.theta,
        )
    }

    /// Pose of `other` relative to `self` (`self⁻¹ ⊕ other`).
    pub fn between(&self, other: &Pose2D) -> Pose2D {
        let (s, c) = self.theta.sin_cos();
        let dx = other.x - self.x;
        let dy = other.y - self.y;
        Pose2D::new(c * dx + s * dy, -s * dx + c * dy, other.theta - self.theta)
    }

    pub fn transform_point(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (self.x + c * px - s * py, self.y + s * px + c * py)
    }

    pub fn distance_to(&self, other: &Pose2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// SE(2) exponential of a body twist integrated over unit time.
    pub fn exp(forward: f64, lateral: f64, rotation: f64) -> Pose2D {
        let (a, b) = sinc_terms(rotation);
        Pose2D::new(
            a * forward - b * lateral,
            b * forward + a * lateral,
            rotation,
        )
    }

    /// Inverse of [`Pose2D::exp`]: the constant body twist producing this relative pose.
    pub fn log(&self) -> (f64, f64, f64) {
        let (a, b) = sinc_terms(self.theta);
        let det = a * a + b * b;
        (
            (a * self.x + b * self.y) / det,
            (-b * self.x + a * self.y) / det,
            self.theta,
        )
    }

    /// Fraction `f` of this relative motion under a constant-twist assumption.
    pub fn scale_motion(&self, f: f64) -> Pose2D {
        let (u, w, r) = self.log();
        Pose2D::exp(f * u, f * w, f * r)
    }
}

/// `(sin φ / φ, (1 - cos φ) / φ)` with series expansions near zero.
fn sinc_terms(phi: f64) -> (f64, f64) {
    if phi.abs() < 1e-6 {
        let p2 = phi * phi;
        (1.0 - p2 / 6.0, phi / 2.0 - phi * p2 / 24.0)
    } else {
        (phi.sin() / phi, (1.0 - phi.cos()) / phi)
    }
}

/// Closed-form unicycle integration for a constant `(v, ω)` held over `dt`.
pub fn integrate_unicycle(pose: &Pose2D, v: f64, omega: f64, dt: f64) -> Pose2D {
    pose.compose(&Pose2D::exp(v * dt, 0.0, omega * dt))
}

/// Circular mean of weighted angles. Returns 0 for a degenerate resultant.
pub fn circular_mean<I: IntoIterator<Item = (f64, f64)>>(weighted_angles: I) -> f64 {
    let (s, c) = weighted_angles
        .into_iter()
        .fold((0.0, 0.0), |(s, c), (a, w)| (s + w * a.sin(), c + w * a.cos()));
    if s == 0.0 && c == 0.0 {
        0.0
    } else {
        normalize_angle(s.atan2(c))
    }
}
