//! The running localization pipeline and the single-source baselines it is compared with.
//!
//! Every estimator here consumes the same `LogEvent` stream, so one recorded
//! run can be replayed through all of them.

use std::sync::Arc;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::filter::{FusionFilter, FusionParams, FusionSnapshot, Measurement};
use crate::geometry::{normalize_angle, Pose2D};
use crate::mcl::{LikelihoodField, MclEstimate, MclParams, MonteCarloLocalizer};
use crate::sim::log::{LogEvent, SensorData};
use crate::sim::sensors::{LidarScan, OdometryDelta};
use crate::vlp::{select_observation, solve_slo_vlp, CameraModel, LedFeatureMap, LedObservation, VlpConfig, VlpFix};

/// MCL driven by an asynchronous stream: a scan waits until the odometry
/// covering its stamp arrives, so particles are moved exactly to the scan time.
#[derive(Debug, Clone)]
pub struct MclRunner {
    mcl: MonteCarloLocalizer<ChaCha8Rng>,
    stamp: f64,
    pending: Option<LidarScan>,
}

impl MclRunner {
    pub fn new(field: Arc<LikelihoodField>, params: MclParams, seed: u64) -> Result<Self> {
        let rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            mcl: MonteCarloLocalizer::new(field, params, rng)?,
            stamp: f64::NEG_INFINITY,
            pending: None,
        })
    }

    pub fn localizer(&self) -> &MonteCarloLocalizer<ChaCha8Rng> {
        &self.mcl
    }

    pub fn initialize(&mut self, pose: &Pose2D, covariance: &Matrix3<f64>, stamp: f64) -> Result<()> {
        self.mcl.initialize(pose, covariance)?;
        self.stamp = stamp;
        self.pending = None;
        Ok(())
    }

    /// Moves the particles through `delta`, running any scan that falls inside it.
    pub fn odometry(&mut self, delta: &OdometryDelta) -> Result<Option<MclEstimate>> {
        if !self.mcl.is_initialized() {
            return Ok(None);
        }
        let from = self.stamp.max(delta.start());
        let mut out = None;
        if let Some(scan) = self.pending.take() {
            if scan.stamp <= delta.stamp {
                self.mcl.predict(&delta.portion(from, scan.stamp))?;
                out = Some(self.mcl.update(&scan)?);
                self.mcl.predict(&delta.portion(scan.stamp, delta.stamp))?;
            } else {
                self.pending = Some(scan);
                self.mcl.predict(&delta.portion(from, delta.stamp))?;
            }
        } else {
            self.mcl.predict(&delta.portion(from, delta.stamp))?;
        }
        self.stamp = delta.stamp;
        Ok(out)
    }

    /// Runs the scan now if the particles are already at its stamp, else defers it.
    pub fn scan(&mut self, scan: &LidarScan) -> Result<Option<MclEstimate>> {
        if !self.mcl.is_initialized() {
            return Ok(None);
        }
        if scan.stamp <= self.stamp {
            return self.mcl.update(scan).map(Some);
        }
        // Only the newest scan is kept when odometry stalls.
        self.pending = Some(scan.clone());
        Ok(None)
    }

    pub fn current(&self) -> Result<MclEstimate> {
        self.mcl.current_estimate(self.stamp)
    }
}

/// How the fused pipeline gets its first pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum StackInit {
    /// Full prior pose for both the filter and MCL.
    Pose { pose: Pose2D, sigma_xy: f64, sigma_theta: f64 },
    /// Heading only; the first VLP fix supplies the position.
    Heading { theta: f64, sigma_theta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StackConfig {
    pub fusion: FusionParams,
    pub mcl: MclParams,
    pub vlp: VlpConfig,
    pub use_vlp: bool,
    pub use_mcl: bool,
    /// Squared Mahalanobis distance between a fix and MCL counted as disagreement.
    pub divergence_threshold: f64,
    /// Consecutive disagreeing fixes before MCL is re-seeded at the fix.
    pub divergence_count: usize,
    pub reinit_sigma_xy: f64,
    pub reinit_sigma_theta: f64,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            fusion: FusionParams::default(),
            mcl: MclParams::default(),
            vlp: VlpConfig::default(),
            use_vlp: true,
            use_mcl: true,
            divergence_threshold: crate::fusion::ekf::chi2_threshold(0.99, 2),
            divergence_count: 3,
            reinit_sigma_xy: 0.05,
            reinit_sigma_theta: 3f64.to_radians(),
        }
    }
}

impl StackConfig {
    /// Matches a noise-free simulator: particles no longer diffuse under motion.
    pub fn noise_free(&self) -> Self {
        let mut c = *self;
        c.mcl.motion_noise = crate::sim::sensors::OdometryNoise::zero();
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.mcl.validate()?;
        if !(self.divergence_threshold > 0.0) || self.divergence_count == 0 {
            return Err(Error::Config("divergence threshold and count must be positive".into()));
        }
        if !(self.reinit_sigma_xy >= 0.0 && self.reinit_sigma_theta >= 0.0) {
            return Err(Error::Config("re-initialization spreads must be non-negative".into()));
        }
        Ok(())
    }
}

/// What one event did to the stack.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepReport {
    pub fused: Option<FusionSnapshot>,
    pub fix: Option<VlpFix>,
    pub mcl: Option<MclEstimate>,
    pub reinitialized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct StackCounters {
    pub fixes: usize,
    pub fix_failures: usize,
    pub mcl_updates: usize,
    pub reinitializations: usize,
}

/// Fused pipeline: odometry prediction, VLP and MCL updates, and MCL re-seeding
/// when VLP persistently disagrees with it.
#[derive(Debug, Clone)]
pub struct LocalizationStack {
    config: StackConfig,
    camera: CameraModel,
    leds: LedFeatureMap,
    filter: FusionFilter,
    mcl: Option<MclRunner>,
    /// Heading awaiting the first fix in heading-only start mode.
    waiting: Option<(f64, f64)>,
    streak: usize,
    counters: StackCounters,
}

impl LocalizationStack {
    pub fn new(field: Arc<LikelihoodField>, leds: LedFeatureMap, camera: CameraModel, config: StackConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        camera.validate()?;
        let mcl = if config.use_mcl {
            Some(MclRunner::new(field, config.mcl, seed)?)
        } else {
            None
        };
        Ok(Self {
            filter: FusionFilter::new(config.fusion)?,
            config,
            camera,
            leds,
            mcl,
            waiting: None,
            streak: 0,
            counters: StackCounters::default(),
        })
    }

    pub fn start(&mut self, init: StackInit, stamp: f64) -> Result<()> {
        match init {
            StackInit::Pose { pose, sigma_xy, sigma_theta } => {
                let cov = Matrix3::from_diagonal(&Vector3::new(sigma_xy.powi(2), sigma_xy.powi(2), sigma_theta.powi(2)));
                self.filter.initialize(pose, cov, stamp)?;
                if let Some(m) = &mut self.mcl {
                    m.initialize(&pose, &cov, stamp)?;
                }
                self.waiting = None;
            }
            StackInit::Heading { theta, sigma_theta } => {
                if !self.config.use_vlp {
                    return Err(Error::Config("heading-only start needs VLP".into()));
                }
                self.waiting = Some((normalize_angle(theta), sigma_theta));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &StackConfig {
        &self.config
    }

    pub fn filter(&self) -> &FusionFilter {
        &self.filter
    }

    pub fn mcl(&self) -> Option<&MclRunner> {
        self.mcl.as_ref()
    }

    pub fn counters(&self) -> StackCounters {
        self.counters
    }

    pub fn estimate(&self) -> Result<FusionSnapshot> {
        self.filter.estimate()
    }

    pub fn flush(&mut self) -> Result<FusionSnapshot> {
        self.filter.flush()
    }

    pub fn process(&mut self, event: &LogEvent) -> Result<StepReport> {
        let mut report = StepReport::default();
        match &event.data {
            SensorData::GroundTruth(_) => return Ok(report),
            SensorData::Odometry(d) => {
                if let Some((theta, s)) = &mut self.waiting {
                    *theta = normalize_angle(*theta + d.dtheta);
                    *s = (*s * *s + (self.config.fusion.odometry_noise.alpha[0] * d.dtheta * d.dtheta)).sqrt();
                    return Ok(report);
                }
                report.fused = Some(self.filter.ingest(Measurement::Odometry(*d))?);
                if let Some(m) = &mut self.mcl {
                    if let Some(est) = m.odometry(d)? {
                        report.mcl = Some(est);
                    }
                }
            }
            SensorData::Lidar(scan) => {
                if self.waiting.is_some() {
                    return Ok(report);
                }
                if let Some(m) = &mut self.mcl {
                    report.mcl = m.scan(scan)?;
                }
            }
            SensorData::Camera(obs) => {
                if self.config.use_vlp {
                    self.camera_frame(event.stamp, obs, &mut report)?;
                }
            }
        }
        if let Some(est) = report.mcl {
            self.counters.mcl_updates += 1;
            report.fused = Some(self.filter.ingest(Measurement::Mcl(est))?);
        }
        Ok(report)
    }

    fn camera_frame(&mut self, stamp: f64, obs: &[LedObservation], report: &mut StepReport) -> Result<()> {
        let Some(o) = select_observation(obs, &self.camera) else {
            return Ok(());
        };
        let Some(beacon) = self.leds.get(o.beacon_id) else {
            self.counters.fix_failures += 1;
            return Ok(());
        };
        let heading = match self.waiting {
            Some((theta, _)) => theta,
            None => self.filter.current_heading()?,
        };
        let fix = match solve_slo_vlp(o, beacon, heading, &self.camera, &self.config.vlp) {
            Ok(f) => f,
            Err(_) => {
                self.counters.fix_failures += 1;
                return Ok(());
            }
        };
        self.counters.fixes += 1;
        report.fix = Some(fix);
        let r = self.config.fusion.vlp_covariance(fix.quality);

        if let Some((theta, sigma_theta)) = self.waiting.take() {
            let pose = Pose2D::new(fix.x, fix.y, theta);
            let cov = Matrix3::new(r[(0, 0)], 0.0, 0.0, 0.0, r[(1, 1)], 0.0, 0.0, 0.0, sigma_theta * sigma_theta);
            self.filter.initialize(pose, cov, stamp)?;
            if let Some(m) = &mut self.mcl {
                let spread = self.config.reinit_sigma_xy.powi(2);
                let mcov = Matrix3::from_diagonal(&Vector3::new(spread, spread, sigma_theta * sigma_theta));
                m.initialize(&pose, &mcov, stamp)?;
            }
            report.fused = Some(self.filter.estimate()?);
            return Ok(());
        }

        if let Some(m) = &mut self.mcl {
            let cur = m.current()?;
            let rm = self.config.fusion.mcl_covariance(&cur);
            let s: Matrix2<f64> = rm.fixed_view::<2, 2>(0, 0) + r;
            let nu = Vector2::new(fix.x - cur.mean.x, fix.y - cur.mean.y);
            let d2 = s.try_inverse().map(|si| (nu.transpose() * si * nu)[0]).unwrap_or(f64::INFINITY);
            self.streak = if d2 > self.config.divergence_threshold { self.streak + 1 } else { 0 };
            if self.streak >= self.config.divergence_count {
                self.streak = 0;
                let spread = self.config.reinit_sigma_xy.powi(2);
                let cov = Matrix3::from_diagonal(&Vector3::new(spread, spread, self.config.reinit_sigma_theta.powi(2)));
                m.initialize(&Pose2D::new(fix.x, fix.y, cur.mean.theta), &cov, stamp)?;
                self.filter.reset_position(fix.x, fix.y, r[(0, 0)].max(r[(1, 1)]))?;
                self.counters.reinitializations += 1;
                report.reinitialized = true;
            }
        }
        report.fused = Some(self.filter.ingest(Measurement::Vlp(fix))?);
        Ok(())
    }
}

/// Single-LED positioning alone: the heading is a prior propagated by odometry.
#[derive(Debug, Clone)]
pub struct SloVlpOnly {
    camera: CameraModel,
    leds: LedFeatureMap,
    config: VlpConfig,
    heading: f64,
}

impl SloVlpOnly {
    pub fn new(leds: LedFeatureMap, camera: CameraModel, config: VlpConfig, initial_heading: f64) -> Self {
        Self {
            camera,
            leds,
            config,
            heading: normalize_angle(initial_heading),
        }
    }

    pub fn heading(&self) -> f64 {
        self.heading
    }

    pub fn process(&mut self, event: &LogEvent) -> Option<VlpFix> {
        match &event.data {
            SensorData::Odometry(d) => {
                self.heading = normalize_angle(self.heading + d.dtheta);
                None
            }
            SensorData::Camera(obs) => {
                let o = select_observation(obs, &self.camera)?;
                let beacon = self.leds.get(o.beacon_id)?;
                solve_slo_vlp(o, beacon, self.heading, &self.camera, &self.config).ok()
            }
            _ => None,
        }
    }
}

/// LiDAR MCL alone, seeded from a prior pose.
#[derive(Debug, Clone)]
pub struct MclOnly {
    runner: MclRunner,
}

impl MclOnly {
    pub fn new(field: Arc<LikelihoodField>, params: MclParams, seed: u64, prior: &Pose2D, covariance: &Matrix3<f64>, stamp: f64) -> Result<Self> {
        let mut runner = MclRunner::new(field, params, seed)?;
        runner.initialize(prior, covariance, stamp)?;
        Ok(Self { runner })
    }

    pub fn process(&mut self, event: &LogEvent) -> Result<Option<MclEstimate>> {
        match &event.data {
            SensorData::Odometry(d) => self.runner.odometry(d),
            SensorData::Lidar(s) => self.runner.scan(s),
            _ => Ok(None),
        }
    }
}

/// Dead reckoning.
#[derive(Debug, Clone, Copy)]
pub struct OdometryOnly {
    pose: Pose2D,
}

impl OdometryOnly {
    pub fn new(start: Pose2D) -> Self {
        Self { pose: start }
    }

    pub fn pose(&self) -> Pose2D {
        self.pose
    }

    pub fn process(&mut self, event: &LogEvent) -> Option<(f64, Pose2D)> {
        match &event.data {
            SensorData::Odometry(d) => {
                self.pose = self.pose.compose(&d.as_pose());
                Some((d.stamp, self.pose))
            }
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcl::build_likelihood_field;
    use crate::sim::scenario::{run_scenario, Motion, ScenarioScript, SimConfig};
    use crate::sim::world::lab_world;

    fn setup() -> (Arc<LikelihoodField>, crate::sim::world::WorldModel) {
        let world = lab_world();
        let field = build_likelihood_field(&world.grid, 0.1, 1.0).unwrap();
        (Arc::new(field), world)
    }

    fn drive() -> ScenarioScript {
        ScenarioScript::new(
            "stack-test",
            Pose2D::new(1.0, 2.5, 0.0),
            vec![
                Motion::Straight { distance: 1.5, speed: 0.2 },
                Motion::Rotate { angle: 1.0, rate: 0.5 },
                Motion::Straight { distance: 0.5, speed: 0.2 },
            ],
        )
    }

    #[test]
    fn noise_free_stack_tracks_truth() {
        let config = SimConfig::default().noise_free();
        let (field, world) = setup();
        let log = run_scenario(&world, &config, &drive(), 1).unwrap();
        let mut stack = LocalizationStack::new(field, world.led_map.clone(), config.camera, StackConfig::default().noise_free(), 3).unwrap();
        let start = log.ground_truth().next().unwrap();
        stack
            .start(StackInit::Pose { pose: start.1, sigma_xy: 0.0, sigma_theta: 0.0 }, start.0)
            .unwrap();
        let mut worst: f64 = 0.0;
        for e in &log.events {
            if let Some(s) = stack.process(e).unwrap().fused {
                let gt = log.truth_at(s.estimate.stamp).unwrap();
                worst = worst.max(gt.distance_to(&s.estimate.mean));
            }
        }
        assert!(worst < 1e-3, "worst {worst}");
        assert!(stack.counters().fixes > 0 && stack.counters().mcl_updates > 0);
        assert_eq!(stack.counters().reinitializations, 0);
        assert!(stack.filter().covariance_always_psd());
    }

    #[test]
    fn heading_only_start_uses_first_fix() {
        let config = SimConfig::default().noise_free();
        let (field, world) = setup();
        let log = run_scenario(&world, &config, &drive(), 2).unwrap();
        let mut stack = LocalizationStack::new(field, world.led_map.clone(), config.camera, StackConfig::default(), 4).unwrap();
        assert!(stack.estimate().is_err());
        stack.start(StackInit::Heading { theta: 0.0, sigma_theta: 0.01 }, 0.0).unwrap();
        let mut first = None;
        for e in &log.events {
            let r = stack.process(e).unwrap();
            if first.is_none() {
                if let Some(s) = r.fused {
                    first = Some(s);
                }
            }
        }
        let first = first.unwrap();
        let gt = log.truth_at(first.estimate.stamp).unwrap();
        assert!(gt.distance_to(&first.estimate.mean) < 1e-6);
    }

    #[test]
    fn persistent_disagreement_reseeds_mcl() {
        let config = SimConfig::default().noise_free();
        let (field, world) = setup();
        let log = run_scenario(&world, &config, &drive(), 5).unwrap();
        let mut stack = LocalizationStack::new(field, world.led_map.clone(), config.camera, StackConfig::default(), 6).unwrap();
        let (t0, p0) = log.ground_truth().next().unwrap();
        let wrong = Pose2D::new(p0.x + 0.8, p0.y, p0.theta);
        stack.start(StackInit::Pose { pose: wrong, sigma_xy: 0.02, sigma_theta: 0.01 }, t0).unwrap();
        let mut reinit_at = None;
        for e in &log.events {
            if stack.process(e).unwrap().reinitialized && reinit_at.is_none() {
                reinit_at = Some(e.stamp);
            }
        }
        assert!(reinit_at.is_some());
        let end = stack.flush().unwrap();
        let gt = log.truth_at(end.estimate.stamp).unwrap();
        assert!(gt.distance_to(&end.estimate.mean) < 0.05);
    }

    #[test]
    fn baselines() {
        let config = SimConfig::default().noise_free();
        let (field, world) = setup();
        let log = run_scenario(&world, &config, &drive(), 7).unwrap();
        let (t0, p0) = log.ground_truth().next().unwrap();
        let mut odo = OdometryOnly::new(p0);
        let mut vlp = SloVlpOnly::new(world.led_map.clone(), config.camera, VlpConfig::default(), p0.theta);
        let mut mcl = MclOnly::new(field, MclParams::default(), 8, &p0, &Matrix3::zeros(), t0).unwrap();
        let mut n_fix = 0;
        for e in &log.events {
            if let Some((t, p)) = odo.process(e) {
                assert!(log.truth_at(t).unwrap().distance_to(&p) < 1e-9);
            }
            if let Some(f) = vlp.process(e) {
                n_fix += 1;
                let gt = log.truth_at(f.stamp).unwrap();
                assert!((gt.x - f.x).hypot(gt.y - f.y) < 1e-6);
            }
            if let Some(m) = mcl.process(e).unwrap() {
                assert!(log.truth_at(m.stamp).unwrap().distance_to(&m.mean) < 0.05);
            }
        }
        assert!(n_fix > 0);
    }
}
