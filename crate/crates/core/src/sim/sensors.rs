use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::geometry::{normalize_angle, Pose2D};
use crate::grid::OccupancyGrid;
use crate::sim::world::Rect;
use crate::vlp::{CameraModel, LedFeatureMap, LedObservation};

/// Relative motion over `(stamp - dt, stamp]`, expressed in the robot frame at the start.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OdometryDelta {
    pub stamp: f64,
    pub dt: f64,
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

impl OdometryDelta {
    pub fn from_poses(from: &Pose2D, to: &Pose2D, stamp: f64, dt: f64) -> Self {
        let rel = from.between(to);
        Self {
            stamp,
            dt,
            dx: rel.x,
            dy: rel.y,
            dtheta: rel.theta,
        }
    }

    pub fn as_pose(&self) -> Pose2D {
        Pose2D::new(self.dx, self.dy, self.dtheta)
    }

    pub fn start(&self) -> f64 {
        self.stamp - self.dt
    }

    pub fn is_finite(&self) -> bool {
        [self.stamp, self.dt, self.dx, self.dy, self.dtheta].iter().all(|v| v.is_finite())
    }

    /// The part of this motion between `from` and `to` (clamped to the interval),
    /// assuming a constant body twist.
    pub fn portion(&self, from: f64, to: f64) -> OdometryDelta {
        let start = self.start();
        let a = from.clamp(start, self.stamp);
        let b = to.clamp(start, self.stamp);
        if self.dt <= 0.0 || b <= a {
            return OdometryDelta {
                stamp: b,
                ..Default::default()
            };
        }
        let pose = self.as_pose();
        let head = pose.scale_motion((a - start) / self.dt);
        let upto = pose.scale_motion((b - start) / self.dt);
        let rel = head.between(&upto);
        OdometryDelta {
            stamp: b,
            dt: b - a,
            dx: rel.x,
            dy: rel.y,
            dtheta: rel.theta,
        }
    }
}

/// Rotation-translation-rotation odometry noise; variances
/// `α1·rot² + α2·trans²` for the rotations and `α3·trans² + α4·(rot1² + rot2²)` for the translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometryNoise {
    pub alpha: [f64; 4],
}

impl Default for OdometryNoise {
    fn default() -> Self {
        Self {
            alpha: [0.05, 0.05, 0.01, 0.01],
        }
    }
}

impl OdometryNoise {
    pub fn zero() -> Self {
        Self { alpha: [0.0; 4] }
    }

    pub fn is_zero(&self) -> bool {
        self.alpha.iter().all(|&a| a == 0.0)
    }
}

/// Rotation-translation-rotation decomposition. Backward motion keeps `rot1` small
/// by negating the translation.
pub fn decompose(dx: f64, dy: f64, dtheta: f64) -> (f64, f64, f64) {
    let trans = dx.hypot(dy);
    if trans < 1e-12 {
        return (0.0, 0.0, dtheta);
    }
    let mut rot1 = dy.atan2(dx);
    let mut signed = trans;
    if rot1.abs() > std::f64::consts::FRAC_PI_2 {
        rot1 = normalize_angle(rot1 + std::f64::consts::PI);
        signed = -trans;
    }
    (rot1, signed, normalize_angle(dtheta - rot1))
}

/// Draws a noisy version of `true_delta`; zero noise returns it unchanged.
pub fn sample_odometry<R: Rng + ?Sized>(
    true_delta: &OdometryDelta,
    noise: &OdometryNoise,
    rng: &mut R,
) -> Result<OdometryDelta> {
    if !true_delta.is_finite() {
        return Err(Error::NonFinite("odometry delta"));
    }
    if noise.alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(Error::InvalidArgument("odometry noise parameters must be non-negative".into()));
    }
    if noise.is_zero() {
        return Ok(*true_delta);
    }
    let [a1, a2, a3, a4] = noise.alpha;
    let (rot1, trans, rot2) = decompose(true_delta.dx, true_delta.dy, true_delta.dtheta);
    let t2 = trans * trans;
    let mut gauss = |var: f64| -> f64 {
        let n: f64 = StandardNormal.sample(rng);
        n * var.max(0.0).sqrt()
    };
    let r1 = rot1 - gauss(a1 * rot1 * rot1 + a2 * t2);
    let tr = trans - gauss(a3 * t2 + a4 * (rot1 * rot1 + rot2 * rot2));
    let r2 = rot2 - gauss(a1 * rot2 * rot2 + a2 * t2);
    Ok(OdometryDelta {
        dx: tr * r1.cos(),
        dy: tr * r1.sin(),
        dtheta: normalize_angle(r1 + r2),
        ..*true_delta
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarSpec {
    pub beam_count: usize,
    pub angular_step: f64,
    pub max_range: f64,
    pub range_noise_sigma: f64,
    pub rate: f64,
}

impl Default for LidarSpec {
    fn default() -> Self {
        Self {
            beam_count: 360,
            angular_step: 1f64.to_radians(),
            max_range: 3.5,
            range_noise_sigma: 0.01,
            rate: 5.0,
        }
    }
}

impl LidarSpec {
    pub fn validate(&self) -> Result<()> {
        ensure_finite(&[self.angular_step, self.max_range, self.range_noise_sigma, self.rate], "lidar spec")?;
        let sweep = self.beam_count as f64 * self.angular_step;
        if self.beam_count == 0 || (sweep - std::f64::consts::TAU).abs() > 1e-9 {
            return Err(Error::InvalidArgument("lidar beams must cover a full turn".into()));
        }
        if self.max_range <= 0.0 || self.range_noise_sigma < 0.0 || self.rate <= 0.0 {
            return Err(Error::InvalidArgument("lidar range, noise and rate must be positive".into()));
        }
        Ok(())
    }

    /// Beam bearing in the robot frame.
    pub fn beam_angle(&self, i: usize) -> f64 {
        i as f64 * self.angular_step
    }
}

/// Distance past a measured range at which its endpoint is placed.
pub const ENDPOINT_NUDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarScan {
    pub stamp: f64,
    pub angle_increment: f64,
    pub max_range: f64,
    pub ranges: Vec<f64>,
    /// `false` marks a beam with no return (range reported as `max_range`).
    pub hits: Vec<bool>,
}

impl LidarScan {
    pub fn beam_angle(&self, i: usize) -> f64 {
        i as f64 * self.angular_step()
    }

    pub fn angular_step(&self) -> f64 {
        self.angle_increment
    }

    /// Endpoints of returning beams, in the sensor frame. Each is pushed 1 µm past
    /// the measured range so that an exact return lies inside the struck cell.
    pub fn endpoints(&self, stride: usize) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        (0..self.ranges.len())
            .step_by(stride.max(1))
            .filter(|&i| self.hits[i])
            .map(|i| {
                let a = self.beam_angle(i);
                let r = self.ranges[i] + ENDPOINT_NUDGE;
                (i, r * a.cos(), r * a.sin())
            })
    }
}

/// First-hit raycast per beam with Gaussian range noise.
pub fn simulate_lidar<R: Rng + ?Sized>(
    pose: &Pose2D,
    grid: &OccupancyGrid,
    spec: &LidarSpec,
    stamp: f64,
    rng: &mut R,
) -> Result<LidarScan> {
    simulate_lidar_with(pose, grid, &[], spec, stamp, rng)
}

/// [`simulate_lidar`] with extra rectangular obstacles intersected analytically.
pub fn simulate_lidar_with<R: Rng + ?Sized>(
    pose: &Pose2D,
    grid: &OccupancyGrid,
    obstacles: &[Rect],
    spec: &LidarSpec,
    stamp: f64,
    rng: &mut R,
) -> Result<LidarScan> {
    if !pose.is_finite() {
        return Err(Error::NonFinite("lidar pose"));
    }
    let cell = grid.world_to_cell(pose.x, pose.y);
    if !grid.contains(cell) {
        return Err(Error::PoseOutsideMap { x: pose.x, y: pose.y });
    }
    if grid.is_occupied(cell) {
        return Err(Error::PoseInCollision { x: pose.x, y: pose.y });
    }
    let noise = Normal::new(0.0, spec.range_noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut ranges = Vec::with_capacity(spec.beam_count);
    let mut hits = Vec::with_capacity(spec.beam_count);
    for i in 0..spec.beam_count {
        let bearing = pose.theta + spec.beam_angle(i);
        // One draw per beam keeps the noise stream aligned across scenes.
        let n: f64 = noise.sample(rng);
        let static_hit = grid.raycast(pose.x, pose.y, bearing, spec.max_range);
        let dynamic_hit = obstacles
            .iter()
            .filter_map(|r| r.ray_intersection(pose.x, pose.y, bearing))
            .filter(|&t| t <= spec.max_range)
            .min_by(f64::total_cmp);
        let hit = match (static_hit, dynamic_hit) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        match hit {
            Some(r) => {
                ranges.push((r + n).clamp(0.0, spec.max_range));
                hits.push(true);
            }
            None => {
                ranges.push(spec.max_range);
                hits.push(false);
            }
        }
    }
    Ok(LidarScan {
        stamp,
        angle_increment: spec.angular_step,
        max_range: spec.max_range,
        ranges,
        hits,
    })
}

/// Noise-free pinhole projection of an LED for a camera at `pose`, pointing up.
/// Returns `(u, v, diameter_px)`.
pub fn project_led(
    pose: &Pose2D,
    camera_height: f64,
    led: &crate::vlp::LedBeacon,
    cam: &CameraModel,
) -> Option<(f64, f64, f64)> {
    let depth = led.z - camera_height;
    if depth <= 0.0 {
        return None;
    }
    let (s, c) = pose.theta.sin_cos();
    let wx = led.x - pose.x;
    let wy = led.y - pose.y;
    let bx = c * wx + s * wy;
    let by = -s * wx + c * wy;
    let [u0, v0] = cam.principal_point;
    Some((
        u0 + cam.focal_px * bx / depth,
        v0 + cam.focal_px * by / depth,
        cam.focal_px * led.diameter / depth,
    ))
}

/// Simulated LED detection and ID decoding for one camera frame.
pub fn observe_leds<R: Rng + ?Sized>(
    pose: &Pose2D,
    camera_height: f64,
    led_map: &LedFeatureMap,
    cam: &CameraModel,
    stamp: f64,
    rng: &mut R,
) -> Vec<LedObservation> {
    let mut out = Vec::new();
    for led in led_map.iter() {
        // Fixed number of draws per LED regardless of visibility, so one LED's
        // visibility never shifts another LED's randomness.
        let decode: f64 = rng.random();
        let nu: f64 = StandardNormal.sample(rng);
        let nv: f64 = StandardNormal.sample(rng);
        let nd: f64 = StandardNormal.sample(rng);
        let Some((u, v, d)) = project_led(pose, camera_height, led, cam) else {
            continue;
        };
        if !cam.in_image(u, v) || decode >= cam.decode_success_prob {
            continue;
        }
        let sigma = cam.pixel_noise_sigma;
        let max_u = cam.image_size[0].next_down();
        let max_v = cam.image_size[1].next_down();
        out.push(LedObservation {
            beacon_id: led.id,
            u: (u + sigma * nu).clamp(0.0, max_u),
            v: (v + sigma * nv).clamp(0.0, max_v),
            diameter_px: (d + sigma * nd).max(f64::MIN_POSITIVE),
            stamp,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::world::{empty_room, lab_world};
    use crate::vlp::LedBeacon;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_noise_is_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = OdometryDelta {
            stamp: 1.0,
            dt: 0.1,
            dx: 0.3,
            dy: -0.01,
            dtheta: 0.2,
        };
        assert_eq!(sample_odometry(&d, &OdometryNoise::zero(), &mut rng).unwrap(), d);
        let z = OdometryDelta::default();
        assert_eq!(sample_odometry(&z, &OdometryNoise::zero(), &mut rng).unwrap(), z);
        // Zero motion draws zero-variance noise under the default model too.
        assert_eq!(sample_odometry(&z, &OdometryNoise::default(), &mut rng).unwrap(), z);
    }

    #[test]
    fn odometry_mean_matches_truth() {
        // σ_trans = 0.01 m on a 1 m move: α3 = 1e-4.
        let noise = OdometryNoise {
            alpha: [0.0, 0.0, 1e-4, 0.0],
        };
        let d = OdometryDelta {
            stamp: 1.0,
            dt: 1.0,
            dx: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += sample_odometry(&d, &noise, &mut rng).unwrap().dx;
        }
        let mean = sum / n as f64;
        assert!((mean - 1.0).abs() < 3.0 * 0.01 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = OdometryDelta {
            dx: f64::NAN,
            ..Default::default()
        };
        assert!(sample_odometry(&d, &OdometryNoise::default(), &mut rng).is_err());
        let neg = OdometryNoise {
            alpha: [-1.0, 0.0, 0.0, 0.0],
        };
        assert!(sample_odometry(&OdometryDelta::default(), &neg, &mut rng).is_err());
    }

    #[test]
    fn portion_splits_arc() {
        let full = OdometryDelta::from_poses(
            &Pose2D::identity(),
            &crate::geometry::integrate_unicycle(&Pose2D::identity(), 0.2, 0.5, 1.0),
            1.0,
            1.0,
        );
        let a = full.portion(0.0, 0.3);
        let b = full.portion(0.3, 1.0);
        let joined = a.as_pose().compose(&b.as_pose());
        assert!(joined.distance_to(&full.as_pose()) < 1e-12);
        assert_abs_diff_eq!(a.dt, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn empty_room_beam_hits_wall() {
        let world = empty_room(10.0);
        let spec = LidarSpec {
            range_noise_sigma: 0.0,
            max_range: 8.0,
            ..LidarSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scan = simulate_lidar(&Pose2D::identity(), &world.grid, &spec, 0.0, &mut rng).unwrap();
        assert!(scan.hits[0]);
        assert!((scan.ranges[0] - 5.0).abs() <= 0.025);
        let short = LidarSpec {
            max_range: 3.5,
            ..spec
        };
        let scan = simulate_lidar(&Pose2D::identity(), &world.grid, &short, 0.0, &mut rng).unwrap();
        assert!(!scan.hits[0]);
        assert_eq!(scan.ranges[0], 3.5);
    }

    #[test]
    fn lidar_rejects_pose_in_wall() {
        let world = lab_world();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = simulate_lidar(&Pose2D::new(-0.95, 2.0, 0.0), &world.grid, &LidarSpec::default(), 0.0, &mut rng);
        assert!(matches!(err, Err(Error::PoseInCollision { .. })));
    }

    #[test]
    fn led_under_camera_projects_to_principal_point() {
        let cam = CameraModel {
            decode_success_prob: 1.0,
            pixel_noise_sigma: 0.0,
            ..CameraModel::default()
        };
        let map = LedFeatureMap::new([LedBeacon {
            id: 1,
            x: 2.0,
            y: 3.0,
            z: 2.7,
            diameter: 0.175,
        }])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for heading in [0.0, 1.3, -2.9] {
            let obs = observe_leds(&Pose2D::new(2.0, 3.0, heading), 0.3, &map, &cam, 0.0, &mut rng);
            assert_eq!(obs.len(), 1);
            assert_eq!((obs[0].u, obs[0].v), (1024.0, 768.0));
        }
        let obs = observe_leds(&Pose2D::new(1.5, 3.0, 0.0), 0.3, &map, &cam, 0.0, &mut rng);
        assert_abs_diff_eq!(obs[0].u - 1024.0, 1400.0 * 0.5 / 2.4, epsilon = 1e-9);
        // Far away: outside the field of view.
        let obs = observe_leds(&Pose2D::new(-2.0, 3.0, 0.0), 0.3, &map, &cam, 0.0, &mut rng);
        assert!(obs.is_empty());
    }
}
