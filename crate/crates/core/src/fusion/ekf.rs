//! Planar EKF over `(x, y, θ)`: odometry prediction, position and pose updates, χ² gating.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::geometry::{angle_diff, Pose2D};
use crate::sim::sensors::{decompose, OdometryDelta, OdometryNoise};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedEstimate {
    pub mean: Pose2D,
    pub covariance: Matrix3<f64>,
    pub stamp: f64,
}

impl FusedEstimate {
    pub fn new(mean: Pose2D, covariance: Matrix3<f64>, stamp: f64) -> Self {
        Self {
            mean,
            covariance: symmetrize(&covariance),
            stamp,
        }
    }

    /// Minimum eigenvalue of the covariance.
    pub fn min_eigenvalue(&self) -> f64 {
        self.covariance.symmetric_eigenvalues().min()
    }

    pub fn is_symmetric_psd(&self) -> bool {
        (self.covariance - self.covariance.transpose()).amax() <= 1e-12 && self.min_eigenvalue() >= -1e-10
    }
}

pub fn symmetrize<const N: usize>(m: &nalgebra::SMatrix<f64, N, N>) -> nalgebra::SMatrix<f64, N, N> {
    0.5 * (m + m.transpose())
}

/// Jacobians of `x ⊕ u` with respect to the state `x` and the motion `u`.
pub fn composition_jacobians(mean: &Pose2D, delta: &Pose2D) -> (Matrix3<f64>, Matrix3<f64>) {
    let (s, c) = mean.theta.sin_cos();
    let f = Matrix3::new(
        1.0, 0.0, -s * delta.x - c * delta.y,
        0.0, 1.0, c * delta.x - s * delta.y,
        0.0, 0.0, 1.0,
    );
    let g = Matrix3::new(
        c, -s, 0.0,
        s, c, 0.0,
        0.0, 0.0, 1.0,
    );
    (f, g)
}

/// Covariance of an odometry delta in `(dx, dy, dθ)` under the rotation-translation-rotation model.
pub fn odometry_covariance(delta: &OdometryDelta, noise: &OdometryNoise) -> Matrix3<f64> {
    let [a1, a2, a3, a4] = noise.alpha;
    let (rot1, trans, rot2) = decompose(delta.dx, delta.dy, delta.dtheta);
    let t2 = trans * trans;
    let var = Vector3::new(
        a1 * rot1 * rot1 + a2 * t2,
        a3 * t2 + a4 * (rot1 * rot1 + rot2 * rot2),
        a1 * rot2 * rot2 + a2 * t2,
    );
    let (s, c) = rot1.sin_cos();
    // d(dx, dy, dθ) / d(rot1, trans, rot2)
    let j = Matrix3::new(
        -trans * s, c, 0.0,
        trans * c, s, 0.0,
        1.0, 0.0, 1.0,
    );
    symmetrize(&(j * Matrix3::from_diagonal(&var) * j.transpose()))
}

/// Prediction with `Q` the covariance of the motion `delta`.
pub fn predict(state: &FusedEstimate, delta: &OdometryDelta, q: &Matrix3<f64>) -> Result<FusedEstimate> {
    if !delta.is_finite() || q.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("odometry delta"));
    }
    if delta.stamp < state.stamp {
        return Err(Error::InvalidArgument(format!(
            "odometry at t={} precedes the filter at t={}",
            delta.stamp, state.stamp
        )));
    }
    let u = delta.as_pose();
    let (f, g) = composition_jacobians(&state.mean, &u);
    let p = f * state.covariance * f.transpose() + g * q * g.transpose();
    Ok(FusedEstimate {
        mean: state.mean.compose(&u),
        covariance: symmetrize(&p),
        stamp: delta.stamp,
    })
}

/// χ² quantile for `dof` degrees of freedom.
pub fn chi2_threshold(probability: f64, dof: usize) -> f64 {
    ChiSquared::new(dof as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(probability)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GateDecision {
    pub accept: bool,
    /// Squared Mahalanobis distance; infinite when `S` could not be inverted.
    pub distance2: f64,
    pub threshold: f64,
}

/// Accepts iff `νᵀ S⁻¹ ν ≤ χ²(probability, dof)`.
pub fn gate(innovation: &DVector<f64>, s: &DMatrix<f64>, probability: f64) -> GateDecision {
    gate_with_threshold(innovation, s, chi2_threshold(probability, innovation.len()))
}

/// Accepts iff `νᵀ S⁻¹ ν ≤ threshold`. A singular `S` is regularized by `1e-9·I`;
/// if that still fails the measurement is rejected.
pub fn gate_with_threshold(innovation: &DVector<f64>, s: &DMatrix<f64>, threshold: f64) -> GateDecision {
    let dof = innovation.len();
    let inv = s
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| (s + DMatrix::identity(dof, dof) * 1e-9).cholesky().map(|c| c.inverse()));
    match inv {
        Some(inv) => {
            let d2 = (innovation.transpose() * inv * innovation)[(0, 0)];
            GateDecision {
                accept: d2 <= threshold,
                distance2: d2,
                threshold,
            }
        }
        None => GateDecision {
            accept: false,
            distance2: f64::INFINITY,
            threshold,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateOutcome {
    pub estimate: FusedEstimate,
    pub gate: GateDecision,
}

fn check_psd(values: &[f64], n: usize) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("measurement covariance"));
    }
    let r = DMatrix::from_column_slice(n, n, values);
    let scale = 1.0 + r.amax();
    if (&r - r.transpose()).amax() > 1e-9 * scale || r.symmetric_eigenvalues().min() < -1e-12 * scale {
        return Err(Error::NotPositiveSemidefinite);
    }
    Ok(())
}

/// Position update with `H = [I₂ 0]`. Joseph-form covariance.
pub fn update_position(state: &FusedEstimate, z: &Vector2<f64>, r: &Matrix2<f64>, gate_probability: f64) -> Result<UpdateOutcome> {
    check_psd(r.as_slice(), 2)?;
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("position measurement"));
    }
    let h = Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
    let p = state.covariance;
    let nu = z - Vector2::new(state.mean.x, state.mean.y);
    let s = symmetrize(&(h * p * h.transpose() + r));
    let g = gate(
        &DVector::from_column_slice(nu.as_slice()),
        &DMatrix::from_column_slice(2, 2, s.as_slice()),
        gate_probability,
    );
    if !g.accept {
        return Ok(UpdateOutcome { estimate: *state, gate: g });
    }
    let Some(s_inv) = s.try_inverse().or_else(|| (s + Matrix2::identity() * 1e-9).try_inverse()) else {
        return Ok(UpdateOutcome {
            estimate: *state,
            gate: GateDecision { accept: false, ..g },
        });
    };
    let k = p * h.transpose() * s_inv;
    let dx = k * nu;
    let ikh = Matrix3::identity() - k * h;
    let p_new = ikh * p * ikh.transpose() + k * r * k.transpose();
    Ok(UpdateOutcome {
        estimate: FusedEstimate {
            mean: Pose2D::new(state.mean.x + dx[0], state.mean.y + dx[1], state.mean.theta + dx[2]),
            covariance: symmetrize(&p_new),
            stamp: state.stamp,
        },
        gate: g,
    })
}

/// Full-pose update with `H = I₃`; the heading innovation is wrapped.
pub fn update_pose(state: &FusedEstimate, z: &Pose2D, r: &Matrix3<f64>, gate_probability: f64) -> Result<UpdateOutcome> {
    check_psd(r.as_slice(), 3)?;
    if !z.is_finite() {
        return Err(Error::NonFinite("pose measurement"));
    }
    let p = state.covariance;
    let nu = Vector3::new(z.x - state.mean.x, z.y - state.mean.y, angle_diff(z.theta, state.mean.theta));
    let s = symmetrize(&(p + r));
    let g = gate(
        &DVector::from_column_slice(nu.as_slice()),
        &DMatrix::from_column_slice(3, 3, s.as_slice()),
        gate_probability,
    );
    if !g.accept {
        return Ok(UpdateOutcome { estimate: *state, gate: g });
    }
    let Some(s_inv) = s.try_inverse().or_else(|| (s + Matrix3::identity() * 1e-9).try_inverse()) else {
        return Ok(UpdateOutcome {
            estimate: *state,
            gate: GateDecision { accept: false, ..g },
        });
    };
    let k = p * s_inv;
    let dx = k * nu;
    let ikh = Matrix3::identity() - k;
    let p_new = ikh * p * ikh.transpose() + k * r * k.transpose();
    Ok(UpdateOutcome {
        estimate: FusedEstimate {
            mean: Pose2D::new(state.mean.x + dx[0], state.mean.y + dx[1], state.mean.theta + dx[2]),
            covariance: symmetrize(&p_new),
            stamp: state.stamp,
        },
        gate: g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn est(mean: Pose2D, p: Matrix3<f64>) -> FusedEstimate {
        FusedEstimate::new(mean, p, 0.0)
    }

    fn delta(dx: f64, dy: f64, dth: f64) -> OdometryDelta {
        OdometryDelta {
            stamp: 1.0,
            dt: 1.0,
            dx,
            dy,
            dtheta: dth,
        }
    }

    #[test]
    fn identity_and_straight_prediction() {
        let s = est(Pose2D::new(1.0, 2.0, 0.3), Matrix3::from_diagonal_element(0.01));
        let out = predict(&s, &delta(0.0, 0.0, 0.0), &Matrix3::zeros()).unwrap();
        assert_eq!(out.mean, s.mean);
        assert_eq!(out.covariance, s.covariance);
        let s = est(Pose2D::new(1.0, 2.0, 0.0), Matrix3::zeros());
        let out = predict(&s, &delta(1.0, 0.0, 0.0), &Matrix3::zeros()).unwrap();
        assert_eq!(out.mean, Pose2D::new(2.0, 2.0, 0.0));
        assert_eq!(out.covariance, Matrix3::zeros());
        assert!(predict(&s, &delta(f64::NAN, 0.0, 0.0), &Matrix3::zeros()).is_err());
    }

    proptest! {
        #[test]
        fn jacobians_match_finite_differences(
            x in -5.0f64..5.0, y in -5.0f64..5.0, t in -3.1f64..3.1,
            dx in -1.0f64..1.0, dy in -0.5f64..0.5, dt in -1.0f64..1.0,
        ) {
            let m = Pose2D::new(x, y, t);
            let u = Pose2D::new(dx, dy, dt);
            let (f, g) = composition_jacobians(&m, &u);
            let h = 1e-6;
            let comp = |a: [f64; 3], b: [f64; 3]| {
                let r = Pose2D { x: a[0], y: a[1], theta: a[2] }.compose(&Pose2D { x: b[0], y: b[1], theta: b[2] });
                [r.x, r.y, a[2] + b[2]]
            };
            let base_m = [m.x, m.y, m.theta];
            let base_u = [u.x, u.y, u.theta];
            for j in 0..3 {
                let (mut mp, mut mm) = (base_m, base_m);
                mp[j] += h;
                mm[j] -= h;
                let (a, b) = (comp(mp, base_u), comp(mm, base_u));
                for i in 0..3 {
                    prop_assert!(((a[i] - b[i]) / (2.0 * h) - f[(i, j)]).abs() < 1e-6);
                }
                let (mut up, mut um) = (base_u, base_u);
                up[j] += h;
                um[j] -= h;
                let (a, b) = (comp(base_m, up), comp(base_m, um));
                for i in 0..3 {
                    prop_assert!(((a[i] - b[i]) / (2.0 * h) - g[(i, j)]).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn pose_update_matches_information_fusion(
            x in -5.0f64..5.0, y in -5.0f64..5.0, t in -1.0f64..1.0,
            zx in -2.0f64..2.0, zy in -2.0f64..2.0, zt in -2.0f64..2.0,
            a in 0.001f64..0.1, b in 0.001f64..0.1, c in 0.0001f64..0.01, rho in -0.5f64..0.5,
        ) {
            let p = Matrix3::new(a, rho * (a * b).sqrt(), 0.0, rho * (a * b).sqrt(), b, 0.0, 0.0, 0.0, c);
            let r = Matrix3::from_diagonal(&Vector3::new(b, a, 2.0 * c));
            let m = Pose2D::new(x, y, t);
            // Innovations within two standard deviations per axis so the gate accepts.
            let (zx, zy, zt) = (zx * (a + b).sqrt(), zy * (a + b).sqrt(), zt * (3.0 * c).sqrt());
            let z = Pose2D::new(x + zx, y + zy, t + zt);
            let out = update_pose(&est(m, p), &z, &r, 1.0 - 1e-15).unwrap();
            prop_assert!(out.gate.accept);
            // Information form: P⁺ = (P⁻¹ + R⁻¹)⁻¹, μ⁺ = P⁺ (P⁻¹ μ + R⁻¹ z).
            let pi = p.try_inverse().unwrap();
            let ri = r.try_inverse().unwrap();
            let post = (pi + ri).try_inverse().unwrap();
            let mu = post * (pi * Vector3::new(x, y, t) + ri * Vector3::new(z.x, z.y, t + zt));
            prop_assert!((out.estimate.mean.x - mu[0]).abs() < 1e-9);
            prop_assert!((out.estimate.mean.y - mu[1]).abs() < 1e-9);
            prop_assert!((out.estimate.mean.theta - mu[2]).abs() < 1e-9);
            prop_assert!((out.estimate.covariance - post).amax() < 1e-9);
            prop_assert!(out.estimate.is_symmetric_psd());
        }

        #[test]
        fn position_update_never_grows_xy_trace(
            a in 0.0001f64..0.1, b in 0.0001f64..0.1, c in 0.0001f64..0.1, r in 0.00001f64..0.1,
            zx in -0.1f64..0.1, zy in -0.1f64..0.1,
        ) {
            let p = Matrix3::new(a, 0.3 * (a * b).sqrt(), 0.1 * (a * c).sqrt(), 0.3 * (a * b).sqrt(), b, 0.0, 0.1 * (a * c).sqrt(), 0.0, c);
            let s = est(Pose2D::identity(), p);
            let out = update_position(&s, &Vector2::new(zx, zy), &Matrix2::from_diagonal_element(r), 1.0 - 1e-15).unwrap();
            let before = p[(0, 0)] + p[(1, 1)];
            let after = out.estimate.covariance[(0, 0)] + out.estimate.covariance[(1, 1)];
            prop_assert!(after <= before + 1e-15);
            prop_assert!(out.estimate.is_symmetric_psd());
        }
    }

    #[test]
    fn position_update_scalar_kalman() {
        let (sig2, r) = (0.04, 0.01);
        let s = est(Pose2D::new(1.0, 1.0, 0.2), Matrix3::from_diagonal(&Vector3::new(sig2, sig2, 0.01)));
        let out = update_position(&s, &Vector2::new(1.05, 0.98), &Matrix2::from_diagonal_element(r), 0.99).unwrap();
        assert_abs_diff_eq!(out.estimate.covariance[(0, 0)], sig2 * r / (sig2 + r), epsilon = 1e-15);
        assert_abs_diff_eq!(out.estimate.mean.x, 1.0 + 0.05 * sig2 / (sig2 + r), epsilon = 1e-15);
        assert_eq!(out.estimate.mean.theta, 0.2);
        // Zero innovation leaves the mean alone.
        let out = update_position(&s, &Vector2::new(1.0, 1.0), &Matrix2::from_diagonal_element(r), 0.99).unwrap();
        assert_eq!(out.estimate.mean, s.mean);
        // Uninformative measurement.
        let out = update_position(&s, &Vector2::new(1.05, 0.98), &Matrix2::from_diagonal_element(r * 1e9), 0.99).unwrap();
        assert!(out.estimate.mean.distance_to(&s.mean) < 1e-6);
    }

    #[test]
    fn heading_innovation_wraps() {
        let s = est(Pose2D::new(0.0, 0.0, 175f64.to_radians()), Matrix3::from_diagonal_element(0.01));
        let z = Pose2D::new(0.0, 0.0, -175f64.to_radians());
        let out = update_pose(&s, &z, &Matrix3::from_diagonal_element(1e-6), 0.99).unwrap();
        assert!(out.gate.accept);
        // Moves the short way across ±π, ending near the measurement.
        assert!(angle_diff(out.estimate.mean.theta, z.theta).abs() < 0.1f64.to_radians(), "{}", out.estimate.mean.theta);
        assert!(out.estimate.mean.theta.abs() > 170f64.to_radians());
        let same = update_pose(&s, &s.mean, &Matrix3::from_diagonal_element(1e-4), 0.99).unwrap();
        assert_eq!(same.estimate.mean, s.mean);
    }

    #[test]
    fn gate_boundaries() {
        assert_abs_diff_eq!(chi2_threshold(0.99, 2), 9.21034, epsilon = 1e-4);
        assert_abs_diff_eq!(chi2_threshold(0.99, 3), 11.34487, epsilon = 1e-4);
        let s = DMatrix::identity(2, 2);
        assert!(gate(&DVector::zeros(2), &s, 0.99).accept);
        let ten_sigma = DVector::from_vec(vec![10.0, 0.0]);
        let g = gate(&ten_sigma, &s, 0.99);
        assert!(!g.accept);
        assert_eq!(g.distance2, 100.0);
        // The boundary is inclusive.
        let g = gate_with_threshold(&DVector::from_vec(vec![3.0, 0.0]), &s, 9.0);
        assert_eq!(g.distance2, 9.0);
        assert!(g.accept);
        // Singular innovation covariance is regularized.
        let g = gate(&DVector::from_vec(vec![1e-6, 0.0]), &DMatrix::zeros(2, 2), 0.99);
        assert!(g.distance2.is_finite());
    }

    #[test]
    fn gate_failure_leaves_state() {
        let s = est(Pose2D::new(0.0, 0.0, 0.0), Matrix3::from_diagonal_element(1e-4));
        let out = update_position(&s, &Vector2::new(1.0, 0.0), &Matrix2::from_diagonal_element(1e-4), 0.99).unwrap();
        assert!(!out.gate.accept);
        assert_eq!(out.estimate, s);
    }

    #[test]
    fn odometry_covariance_is_psd_and_zero_for_no_motion() {
        let n = OdometryNoise::default();
        assert_eq!(odometry_covariance(&delta(0.0, 0.0, 0.0), &n), Matrix3::zeros());
        let q = odometry_covariance(&delta(0.01, 0.001, 0.02), &n);
        assert!(q.symmetric_eigenvalues().min() >= -1e-18);
    }
}
