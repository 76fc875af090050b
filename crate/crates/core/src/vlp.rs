//! Single-LED visible light positioning.
//!
//! The camera looks straight up from a known height. One decoded LED, its
//! known position in the LED feature map, and a heading supplied by the caller
//! are enough to place the robot: the pixel offset of the LED from the
//! principal point, scaled by the vertical distance, is the LED's lateral
//! offset in the robot frame.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// One LED luminaire in the prior feature map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedBeacon {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Physical diameter of the radiating disc, meters.
    pub diameter: f64,
}

/// Fixed prior map of beacon ID to position. Its frame origin is immutable.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LedFeatureMap {
    beacons: BTreeMap<u32, LedBeacon>,
}

impl LedFeatureMap {
    pub fn new(beacons: impl IntoIterator<Item = LedBeacon>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for b in beacons {
            ensure_finite(&[b.x, b.y, b.z, b.diameter], "LED beacon")?;
            if b.diameter <= 0.0 {
                return Err(Error::InvalidArgument(format!("beacon {} has non-positive diameter", b.id)));
            }
            if map.insert(b.id, b).is_some() {
                return Err(Error::DuplicateBeacon(b.id));
            }
        }
        Ok(Self { beacons: map })
    }

    pub fn get(&self, id: u32) -> Option<&LedBeacon> {
        self.beacons.get(&id)
    }

    /// Beacons in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = &LedBeacon> {
        self.beacons.values()
    }

    pub fn len(&self) -> usize {
        self.beacons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beacons.is_empty()
    }

    /// Reads the `[[leds]]` section of a world document.
    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct LedSection {
            #[serde(default)]
            leds: Vec<LedBeacon>,
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: LedSection = toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        Self::new(doc.leds)
    }
}

/// Upward-facing pinhole camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub focal_px: f64,
    pub principal_point: [f64; 2],
    pub image_size: [f64; 2],
    pub decode_success_prob: f64,
    /// Standard deviation of detected center and diameter, pixels.
    pub pixel_noise_sigma: f64,
    pub rate: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            focal_px: 1400.0,
            principal_point: [1024.0, 768.0],
            image_size: [2048.0, 1536.0],
            decode_success_prob: 0.9,
            pixel_noise_sigma: 1.0,
            rate: 6.0,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        ensure_finite(
            &[
                self.focal_px,
                self.principal_point[0],
                self.principal_point[1],
                self.image_size[0],
                self.image_size[1],
                self.decode_success_prob,
                self.pixel_noise_sigma,
                self.rate,
            ],
            "camera model",
        )?;
        let [u0, v0] = self.principal_point;
        let [w, h] = self.image_size;
        if self.focal_px <= 0.0 || self.rate <= 0.0 || self.pixel_noise_sigma < 0.0 {
            return Err(Error::InvalidArgument("camera focal, rate and noise must be positive".into()));
        }
        if !(0.0..=w).contains(&u0) || !(0.0..=h).contains(&v0) {
            return Err(Error::InvalidArgument("principal point outside the image".into()));
        }
        if !(0.0..=1.0).contains(&self.decode_success_prob) {
            return Err(Error::InvalidArgument("decode probability outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.image_size[0] && v < self.image_size[1]
    }

    pub fn radius_from_center(&self, u: f64, v: f64) -> f64 {
        (u - self.principal_point[0]).hypot(v - self.principal_point[1])
    }
}

/// A decoded LED in one camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedObservation {
    pub beacon_id: u32,
    pub u: f64,
    pub v: f64,
    pub diameter_px: f64,
    pub stamp: f64,
}

/// World-frame position fix from one LED.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VlpFix {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub heading_used: f64,
    pub beacon_id: u32,
    pub stamp: f64,
    pub quality: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HeightMode {
    /// Vertical distance from the apparent LED diameter.
    Measured,
    /// Vertical distance from the mapped LED height minus the camera height.
    #[default]
    MapTrusted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VlpConfig {
    pub height_mode: HeightMode,
    pub min_diameter_px: f64,
    pub camera_height: f64,
}

impl Default for VlpConfig {
    fn default() -> Self {
        Self {
            height_mode: HeightMode::MapTrusted,
            min_diameter_px: 4.0,
            camera_height: 0.3,
        }
    }
}

/// Vertical camera-to-LED distance from the LED's apparent size.
pub fn solve_height(diameter_px: f64, beacon_diameter: f64, focal_px: f64, min_diameter_px: f64) -> Result<f64> {
    ensure_finite(&[diameter_px, beacon_diameter, focal_px], "solve_height")?;
    if beacon_diameter <= 0.0 || focal_px <= 0.0 {
        return Err(Error::InvalidArgument("beacon diameter and focal length must be positive".into()));
    }
    if diameter_px < min_diameter_px || diameter_px <= 0.0 {
        return Err(Error::LedTooSmall {
            diameter_px,
            min_px: min_diameter_px,
        });
    }
    Ok(focal_px * beacon_diameter / diameter_px)
}

/// `1 / (1 + r / f)` with `r` the pixel distance from the principal point.
pub fn fix_quality(radius_px: f64, focal_px: f64) -> f64 {
    1.0 / (1.0 + radius_px / focal_px)
}

/// Solves the robot position from one LED observation and a heading.
pub fn solve_slo_vlp(
    obs: &LedObservation,
    beacon: &LedBeacon,
    heading: f64,
    cam: &CameraModel,
    config: &VlpConfig,
) -> Result<VlpFix> {
    if obs.beacon_id != beacon.id {
        return Err(Error::BeaconMismatch {
            observed: obs.beacon_id,
            expected: beacon.id,
        });
    }
    ensure_finite(&[obs.u, obs.v, obs.diameter_px, heading], "LED observation")?;
    let measured = solve_height(obs.diameter_px, beacon.diameter, cam.focal_px, config.min_diameter_px)?;
    let depth = match config.height_mode {
        HeightMode::Measured => measured,
        HeightMode::MapTrusted => beacon.z - config.camera_height,
    };
    if depth <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "beacon {} is not above the camera",
            beacon.id
        )));
    }
    let [u0, v0] = cam.principal_point;
    let ox = (obs.u - u0) * depth / cam.focal_px;
    let oy = (obs.v - v0) * depth / cam.focal_px;
    let (s, c) = heading.sin_cos();
    Ok(VlpFix {
        x: beacon.x - (c * ox - s * oy),
        y: beacon.y - (s * ox + c * oy),
        z: (beacon.z - measured).max(0.0),
        heading_used: heading,
        beacon_id: beacon.id,
        stamp: obs.stamp,
        quality: fix_quality(cam.radius_from_center(obs.u, obs.v), cam.focal_px),
    })
}

/// Picks the observation closest to the principal point; ties go to the lower id.
pub fn select_observation<'a>(observations: &'a [LedObservation], cam: &CameraModel) -> Option<&'a LedObservation> {
    observations.iter().min_by(|a, b| {
        let ra = cam.radius_from_center(a.u, a.v);
        let rb = cam.radius_from_center(b.u, b.v);
        ra.total_cmp(&rb).then(a.beacon_id.cmp(&b.beacon_id))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    fn beacon() -> LedBeacon {
        LedBeacon {
            id: 7,
            x: 2.0,
            y: 3.0,
            z: 2.7,
            diameter: 0.175,
        }
    }

    fn obs(u: f64, v: f64, d: f64) -> LedObservation {
        LedObservation {
            beacon_id: 7,
            u,
            v,
            diameter_px: d,
            stamp: 0.0,
        }
    }

    #[test]
    fn height_from_diameter() {
        let d = 1400.0 * 0.175 / 2.4;
        assert_abs_diff_eq!(d, 102.083_333_333_333_33, epsilon = 1e-9);
        assert_abs_diff_eq!(solve_height(d, 0.175, 1400.0, 4.0).unwrap(), 2.4, epsilon = 1e-12);
        assert_eq!(solve_height(1400.0 * 0.175, 0.175, 1400.0, 4.0).unwrap(), 1.0);
        assert!(matches!(solve_height(2.0, 0.175, 1400.0, 4.0), Err(Error::LedTooSmall { .. })));
        // Exactly inverse-proportional in the pixel diameter.
        let h1 = solve_height(50.0, 0.175, 1400.0, 4.0).unwrap();
        let h2 = solve_height(100.0, 0.175, 1400.0, 4.0).unwrap();
        assert_eq!(h1, 2.0 * h2);
    }

    #[test]
    fn on_axis_fix_is_beacon_position() {
        let cam = CameraModel::default();
        for heading in [0.0, 1.0, -2.5] {
            let f = solve_slo_vlp(&obs(1024.0, 768.0, 102.08), &beacon(), heading, &cam, &VlpConfig::default()).unwrap();
            assert_abs_diff_eq!(f.x, 2.0, epsilon = 1e-12);
            assert_abs_diff_eq!(f.y, 3.0, epsilon = 1e-12);
            assert_eq!(f.quality, 1.0);
            assert_eq!(f.heading_used, heading);
        }
    }

    #[test]
    fn forward_projection_round_trip() {
        // Robot at (1.5, 3.0); LED is 0.5 m ahead at heading 0.
        let cam = CameraModel::default();
        let u = 1024.0 + 1400.0 * 0.5 / 2.4;
        assert_abs_diff_eq!(u - 1024.0, 291.666_666_666_666_7, epsilon = 1e-9);
        let d = 1400.0 * 0.175 / 2.4;
        let f = solve_slo_vlp(&obs(u, 768.0, d), &beacon(), 0.0, &cam, &VlpConfig::default()).unwrap();
        assert_abs_diff_eq!(f.x, 1.5, epsilon = 1e-6);
        assert_abs_diff_eq!(f.y, 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(f.z, 0.3, epsilon = 1e-9);
        // Heading 90°: the LED now lies along the robot's -y axis.
        let v = 768.0 - 1400.0 * 0.5 / 2.4;
        let f = solve_slo_vlp(&obs(1024.0, v, d), &beacon(), FRAC_PI_2, &cam, &VlpConfig::default()).unwrap();
        assert_abs_diff_eq!(f.x, 1.5, epsilon = 1e-6);
        assert_abs_diff_eq!(f.y, 3.0, epsilon = 1e-6);
    }

    #[test]
    fn measured_height_mode_uses_diameter() {
        let cam = CameraModel::default();
        let cfg = VlpConfig {
            height_mode: HeightMode::Measured,
            ..VlpConfig::default()
        };
        // Diameter says 1.2 m instead of 2.4 m, so the lateral offset halves.
        let u = 1024.0 + 1400.0 * 0.5 / 2.4;
        let f = solve_slo_vlp(&obs(u, 768.0, 1400.0 * 0.175 / 1.2), &beacon(), 0.0, &cam, &cfg).unwrap();
        assert_abs_diff_eq!(f.x, 1.75, epsilon = 1e-9);
    }

    #[test]
    fn errors() {
        let cam = CameraModel::default();
        let mut o = obs(1024.0, 768.0, 100.0);
        o.beacon_id = 8;
        assert!(matches!(
            solve_slo_vlp(&o, &beacon(), 0.0, &cam, &VlpConfig::default()),
            Err(Error::BeaconMismatch { .. })
        ));
        assert!(matches!(
            solve_slo_vlp(&obs(1024.0, 768.0, 3.0), &beacon(), 0.0, &cam, &VlpConfig::default()),
            Err(Error::LedTooSmall { .. })
        ));
        assert!(solve_slo_vlp(&obs(1024.0, 768.0, 100.0), &beacon(), f64::NAN, &cam, &VlpConfig::default()).is_err());
    }

    #[test]
    fn selection_prefers_center_then_lower_id() {
        let cam = CameraModel::default();
        assert!(select_observation(&[], &cam).is_none());
        let one = [obs(10.0, 10.0, 50.0)];
        assert_eq!(select_observation(&one, &cam), Some(&one[0]));
        let mut near = obs(1074.0, 768.0, 50.0);
        near.beacon_id = 9;
        let far = obs(1324.0, 768.0, 50.0);
        let list = [far, near];
        assert_eq!(select_observation(&list, &cam).unwrap().beacon_id, 9);
        let mut tie = obs(974.0, 768.0, 50.0);
        tie.beacon_id = 3;
        let list = [near, tie];
        assert_eq!(select_observation(&list, &cam).unwrap().beacon_id, 3);
    }

    #[test]
    fn quality_is_monotone() {
        let mut last = f64::INFINITY;
        for r in [0.0, 10.0, 100.0, 500.0, 1200.0] {
            let q = fix_quality(r, 1400.0);
            assert!(q <= last && q > 0.0);
            last = q;
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let b = beacon();
        assert!(matches!(LedFeatureMap::new([b, b]), Err(Error::DuplicateBeacon(7))));
    }
}
