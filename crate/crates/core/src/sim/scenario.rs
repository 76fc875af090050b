//! Scripted scenarios and the tick-driven simulator.
//!
//! The clock runs at `tick_rate`; every sensor fires on ticks that are a whole
//! multiple of its period. Each sensor owns an independent random stream, so
//! enabling or disabling one sensor never changes another's samples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::geometry::{integrate_unicycle, Pose2D};
use crate::sim::log::{LogEvent, SensorData, SensorLog};
use crate::sim::robot::{step_robot_with, RobotState, VelocityCommand, VelocityLimits};
use crate::sim::sensors::{observe_leds, sample_odometry, simulate_lidar_with, LidarSpec, OdometryDelta, OdometryNoise};
use crate::sim::world::{Rect, WorldModel};
use crate::vlp::CameraModel;

const STREAM_ODOMETRY: u64 = 1;
const STREAM_CAMERA: u64 = 2;
const STREAM_LIDAR: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub lidar: LidarSpec,
    pub camera: CameraModel,
    pub odometry_noise: OdometryNoise,
    pub odometry_rate: f64,
    pub tick_rate: f64,
    pub camera_height: f64,
    pub robot_radius: f64,
    pub limits: VelocityLimits,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            lidar: LidarSpec::default(),
            camera: CameraModel::default(),
            odometry_noise: OdometryNoise::default(),
            odometry_rate: 24.0,
            tick_rate: 120.0,
            camera_height: 0.3,
            robot_radius: 0.105,
            limits: VelocityLimits::default(),
        }
    }
}

impl SimConfig {
    /// Same rates and geometry with every noise source off and perfect decoding.
    pub fn noise_free(&self) -> Self {
        let mut c = *self;
        c.lidar.range_noise_sigma = 0.0;
        c.camera.pixel_noise_sigma = 0.0;
        c.camera.decode_success_prob = 1.0;
        c.odometry_noise = OdometryNoise::zero();
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.lidar.validate()?;
        self.camera.validate()?;
        ensure_finite(
            &[self.odometry_rate, self.tick_rate, self.camera_height, self.robot_radius],
            "simulator config",
        )?;
        if self.camera_height < 0.0 || self.robot_radius <= 0.0 {
            return Err(Error::Config("camera height and robot radius must be positive".into()));
        }
        if !(self.limits.max_v > 0.0 && self.limits.max_omega > 0.0) {
            return Err(Error::Config("velocity limits must be positive".into()));
        }
        for rate in [self.odometry_rate, self.camera.rate, self.lidar.rate] {
            self.period_ticks(rate)?;
        }
        Ok(())
    }

    /// Sensor period in ticks; the tick rate must be an integer multiple of `rate`.
    pub fn period_ticks(&self, rate: f64) -> Result<u64> {
        if !(rate > 0.0 && self.tick_rate > 0.0) {
            return Err(Error::Config("rates must be positive".into()));
        }
        let ratio = self.tick_rate / rate;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "tick rate {} is not a multiple of sensor rate {rate}",
                self.tick_rate
            )));
        }
        Ok(n as u64)
    }
}

/// One scripted motion segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Motion {
    Straight { distance: f64, speed: f64 },
    /// Signed `angle` turns left when positive.
    Arc { radius: f64, angle: f64, speed: f64 },
    Rotate { angle: f64, rate: f64 },
    Wait { duration: f64 },
}

impl Motion {
    /// Tick count and the constant command that realizes the segment exactly.
    pub fn commands(&self, tick_rate: f64) -> Result<(u64, VelocityCommand)> {
        let (duration, v_len, w_len) = match *self {
            Motion::Straight { distance, speed } => {
                ensure_finite(&[distance, speed], "straight motion")?;
                positive(speed, "speed")?;
                (distance.abs() / speed, distance, 0.0)
            }
            Motion::Arc { radius, angle, speed } => {
                ensure_finite(&[radius, angle, speed], "arc motion")?;
                positive(speed, "speed")?;
                positive(radius, "radius")?;
                let len = radius * angle.abs();
                (len / speed, len, angle)
            }
            Motion::Rotate { angle, rate } => {
                ensure_finite(&[angle, rate], "rotation")?;
                positive(rate, "rate")?;
                (angle.abs() / rate, 0.0, angle)
            }
            Motion::Wait { duration } => {
                ensure_finite(&[duration], "wait")?;
                if duration < 0.0 {
                    return Err(Error::InvalidArgument("wait duration must be non-negative".into()));
                }
                (duration, 0.0, 0.0)
            }
        };
        let ticks = (duration * tick_rate).round() as u64;
        if ticks == 0 {
            return Ok((0, VelocityCommand::stop()));
        }
        let t = ticks as f64 / tick_rate;
        Ok((ticks, VelocityCommand::new(v_len / t, w_len / t)))
    }
}

fn positive(v: f64, what: &str) -> Result<()> {
    if v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} must be positive")))
    }
}

/// Closed time interval in simulated seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: f64,
    pub end: f64,
}

impl TimeWindow {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t <= self.end
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Rectangle that exists on `[appear, vanish)` and translates at `velocity`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicObstacle {
    pub rect: Rect,
    pub appear: f64,
    #[serde(default)]
    pub vanish: Option<f64>,
    #[serde(default)]
    pub velocity: [f64; 2],
}

impl DynamicObstacle {
    pub fn at(&self, t: f64) -> Option<Rect> {
        if t < self.appear || self.vanish.is_some_and(|v| t >= v) {
            return None;
        }
        let dt = t - self.appear;
        Some(self.rect.translated(self.velocity[0] * dt, self.velocity[1] * dt))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub name: String,
    pub start: Pose2D,
    #[serde(default)]
    pub motions: Vec<Motion>,
    #[serde(default)]
    pub led_outages: Vec<TimeWindow>,
    #[serde(default)]
    pub obstacles: Vec<DynamicObstacle>,
}

impl ScenarioScript {
    pub fn new(name: &str, start: Pose2D, motions: Vec<Motion>) -> Self {
        Self {
            name: name.to_string(),
            start,
            motions,
            led_outages: Vec::new(),
            obstacles: Vec::new(),
        }
    }

    /// Noise-free poses at every tick, starting with `start`.
    pub fn nominal_path(&self, tick_rate: f64) -> Result<Vec<Pose2D>> {
        let dt = 1.0 / tick_rate;
        let mut poses = vec![self.start];
        let mut pose = self.start;
        for m in &self.motions {
            let (ticks, cmd) = m.commands(tick_rate)?;
            let seg_start = pose;
            for k in 1..=ticks {
                pose = integrate_unicycle(&seg_start, cmd.v, cmd.omega, dt * k as f64);
                poses.push(pose);
            }
        }
        Ok(poses)
    }

    pub fn path_length(&self) -> f64 {
        self.motions
            .iter()
            .map(|m| match *m {
                Motion::Straight { distance, .. } => distance.abs(),
                Motion::Arc { radius, angle, .. } => radius * angle.abs(),
                _ => 0.0,
            })
            .sum()
    }
}

/// Tick-driven simulator usable open-loop (scripts) or closed-loop (navigation).
#[derive(Debug, Clone)]
pub struct Simulator<'w> {
    world: &'w WorldModel,
    config: SimConfig,
    scenario_id: String,
    state: RobotState,
    tick: u64,
    odom_period: u64,
    camera_period: u64,
    lidar_period: u64,
    last_odom_pose: Pose2D,
    last_odom_tick: u64,
    led_outages: Vec<TimeWindow>,
    obstacles: Vec<DynamicObstacle>,
    odom_rng: ChaCha8Rng,
    camera_rng: ChaCha8Rng,
    lidar_rng: ChaCha8Rng,
    collisions: usize,
    violations: usize,
    min_clearance: f64,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl<'w> Simulator<'w> {
    pub fn new(world: &'w WorldModel, config: SimConfig, script: &ScenarioScript, seed: u64) -> Result<Self> {
        config.validate()?;
        world.validate(config.camera_height)?;
        let start = script.start;
        if !start.is_finite() {
            return Err(Error::NonFinite("scenario start pose"));
        }
        if !world.bounds.contains(start.x, start.y) {
            return Err(Error::PoseOutsideMap { x: start.x, y: start.y });
        }
        if !world.is_free(start.x, start.y, config.robot_radius) {
            return Err(Error::PoseInCollision { x: start.x, y: start.y });
        }
        for w in &script.led_outages {
            ensure_finite(&[w.start, w.end], "LED outage window")?;
            if w.end < w.start {
                return Err(Error::InvalidArgument("LED outage window ends before it starts".into()));
            }
        }
        for o in &script.obstacles {
            ensure_finite(&[o.rect.x0, o.rect.y0, o.rect.x1, o.rect.y1, o.appear, o.velocity[0], o.velocity[1]], "obstacle")?;
        }
        Ok(Self {
            world,
            config,
            scenario_id: format!("{}-s{seed}", script.name),
            state: RobotState::at(start, config.camera_height),
            tick: 0,
            odom_period: config.period_ticks(config.odometry_rate)?,
            camera_period: config.period_ticks(config.camera.rate)?,
            lidar_period: config.period_ticks(config.lidar.rate)?,
            last_odom_pose: start,
            last_odom_tick: 0,
            led_outages: script.led_outages.clone(),
            obstacles: script.obstacles.clone(),
            odom_rng: stream(seed, STREAM_ODOMETRY),
            camera_rng: stream(seed, STREAM_CAMERA),
            lidar_rng: stream(seed, STREAM_LIDAR),
            collisions: 0,
            violations: 0,
            min_clearance: f64::INFINITY,
        })
    }

    pub fn scenario_id(&self) -> &str {
        &self.scenario_id
    }

    pub fn state(&self) -> &RobotState {
        &self.state
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn world(&self) -> &WorldModel {
        self.world
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 / self.config.tick_rate
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.config.tick_rate
    }

    /// Ticks that ended in contact with an obstacle.
    pub fn collisions(&self) -> usize {
        self.collisions
    }

    /// Ticks where the footprint overlapped an occupied cell or an obstacle.
    pub fn violations(&self) -> usize {
        self.violations
    }

    /// Smallest footprint-edge distance to any obstacle seen so far (cells are
    /// measured at their boundary).
    pub fn min_clearance(&self) -> f64 {
        self.min_clearance
    }

    pub fn obstacles_at(&self, t: f64) -> Vec<Rect> {
        self.obstacles.iter().filter_map(|o| o.at(t)).collect()
    }

    fn led_outage(&self, t: f64) -> bool {
        self.led_outages.iter().any(|w| w.contains(t))
    }

    fn blocked(&self, pose: &Pose2D, obstacles: &[Rect]) -> bool {
        let r = self.config.robot_radius;
        !self.world.bounds.contains(pose.x, pose.y)
            || self.world.grid.disc_hits_occupied(pose.x, pose.y, r)
            || obstacles.iter().any(|o| o.overlaps_disc(pose.x, pose.y, r))
    }

    fn clearance(&self, pose: &Pose2D, obstacles: &[Rect]) -> f64 {
        const SEARCH: f64 = 1.0;
        let grid = &self.world.grid;
        let res = grid.resolution();
        let c = grid.world_to_cell(pose.x, pose.y);
        let n = (SEARCH / res).ceil() as i64;
        let mut best = SEARCH;
        for dy in -n..=n {
            for dx in -n..=n {
                let cell = crate::grid::Cell::new(c.ix + dx, c.iy + dy);
                if grid.contains(cell) && grid.is_occupied(cell) {
                    let (cx, cy) = grid.cell_center(cell);
                    let h = res / 2.0;
                    let r = Rect::new(cx - h, cy - h, cx + h, cy + h);
                    best = best.min(rect_distance(&r, pose.x, pose.y));
                }
            }
        }
        for o in obstacles {
            best = best.min(rect_distance(o, pose.x, pose.y));
        }
        best - self.config.robot_radius
    }

    /// Events for the current tick; the first call emits the tick-0 readings.
    fn emit(&mut self, events: &mut Vec<LogEvent>) -> Result<()> {
        let t = self.time();
        let k = self.tick;
        let odom = k > 0 && k % self.odom_period == 0;
        let camera = k % self.camera_period == 0;
        let lidar = k % self.lidar_period == 0;
        if !(odom || camera || lidar) {
            return Ok(());
        }
        let pose = self.state.pose;
        events.push(LogEvent {
            stamp: t,
            data: SensorData::GroundTruth(pose),
        });
        if odom {
            let dt = (k - self.last_odom_tick) as f64 / self.config.tick_rate;
            let truth = OdometryDelta::from_poses(&self.last_odom_pose, &pose, t, dt);
            let noisy = sample_odometry(&truth, &self.config.odometry_noise, &mut self.odom_rng)?;
            self.last_odom_pose = pose;
            self.last_odom_tick = k;
            events.push(LogEvent {
                stamp: t,
                data: SensorData::Odometry(noisy),
            });
        }
        if camera {
            let obs = observe_leds(
                &pose,
                self.config.camera_height,
                &self.world.led_map,
                &self.config.camera,
                t,
                &mut self.camera_rng,
            );
            let obs = if self.led_outage(t) { Vec::new() } else { obs };
            events.push(LogEvent {
                stamp: t,
                data: SensorData::Camera(obs),
            });
        }
        if lidar {
            let obstacles = self.obstacles_at(t);
            let scan = simulate_lidar_with(
                &pose,
                &self.world.grid,
                &obstacles,
                &self.config.lidar,
                t,
                &mut self.lidar_rng,
            )?;
            events.push(LogEvent {
                stamp: t,
                data: SensorData::Lidar(scan),
            });
        }
        Ok(())
    }

    /// Readings at the current time without advancing; call once before stepping.
    pub fn initial_events(&mut self) -> Result<Vec<LogEvent>> {
        let mut events = Vec::new();
        self.emit(&mut events)?;
        Ok(events)
    }

    /// Applies `cmd` for one tick and returns the readings of the new tick.
    pub fn step(&mut self, cmd: &VelocityCommand) -> Result<Vec<LogEvent>> {
        let t_next = (self.tick + 1) as f64 / self.config.tick_rate;
        let obstacles_now = self.obstacles_at(self.time());
        let obstacles_next = self.obstacles_at(t_next);
        let outcome = step_robot_with(
            &self.state,
            cmd,
            self.dt(),
            &self.config.limits,
            self.config.robot_radius,
            |p| self.blocked(p, &obstacles_now) || self.blocked(p, &obstacles_next),
        )?;
        self.state = outcome.state;
        self.tick += 1;
        if outcome.collided && (cmd.v != 0.0 || cmd.omega != 0.0) {
            self.collisions += 1;
        }
        if self.blocked(&self.state.pose, &obstacles_next) {
            self.violations += 1;
        }
        let clearance = self.clearance(&self.state.pose, &obstacles_next);
        self.min_clearance = self.min_clearance.min(clearance);
        let mut events = Vec::new();
        self.emit(&mut events)?;
        Ok(events)
    }
}

fn rect_distance(r: &Rect, x: f64, y: f64) -> f64 {
    let dx = (r.x0 - x).max(0.0).max(x - r.x1);
    let dy = (r.y0 - y).max(0.0).max(y - r.y1);
    dx.hypot(dy)
}

/// Simulates a scripted scenario. Identical inputs yield identical logs.
pub fn run_scenario(world: &WorldModel, config: &SimConfig, script: &ScenarioScript, seed: u64) -> Result<SensorLog> {
    config.validate()?;
    let nominal = script.nominal_path(config.tick_rate)?;
    if let Some(p) = nominal.iter().find(|p| !world.bounds.contains(p.x, p.y)) {
        return Err(Error::PoseOutsideMap { x: p.x, y: p.y });
    }
    let mut commands = Vec::new();
    for m in &script.motions {
        let (ticks, cmd) = m.commands(config.tick_rate)?;
        if !config.limits.admits(&cmd) {
            return Err(Error::InvalidArgument(format!(
                "scripted command ({:.3}, {:.3}) exceeds velocity limits",
                cmd.v, cmd.omega
            )));
        }
        commands.push((ticks, cmd));
    }
    let mut sim = Simulator::new(world, *config, script, seed)?;
    let mut events = sim.initial_events()?;
    for (ticks, cmd) in commands {
        for _ in 0..ticks {
            events.extend(sim.step(&cmd)?);
        }
    }
    Ok(SensorLog {
        scenario_id: sim.scenario_id().to_string(),
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::world::{empty_room, lab_world};
    use std::f64::consts::FRAC_PI_2;

    fn square(side: f64) -> Vec<Motion> {
        let mut m = Vec::new();
        for _ in 0..4 {
            m.push(Motion::Straight { distance: side, speed: 0.2 });
            m.push(Motion::Rotate { angle: FRAC_PI_2, rate: 0.5 });
        }
        m
    }

    #[test]
    fn identical_seed_identical_log() {
        let world = lab_world();
        let script = ScenarioScript::new("sq", Pose2D::new(3.0, 1.0, 0.0), square(1.0));
        let a = run_scenario(&world, &SimConfig::default(), &script, 42).unwrap();
        let b = run_scenario(&world, &SimConfig::default(), &script, 42).unwrap();
        assert_eq!(a.to_ndjson(), b.to_ndjson());
        let c = run_scenario(&world, &SimConfig::default(), &script, 43).unwrap();
        assert_ne!(a.to_ndjson(), c.to_ndjson());
        assert_eq!(a.scenario_id, "sq-s42");
    }

    #[test]
    fn stationary_odometry_is_zero() {
        let world = empty_room(10.0);
        let script = ScenarioScript::new("still", Pose2D::identity(), vec![Motion::Wait { duration: 5.0 }]);
        let log = run_scenario(&world, &SimConfig::default(), &script, 1).unwrap();
        assert_eq!(log.odometry().count(), 120);
        for d in log.odometry() {
            assert_eq!((d.dx, d.dy, d.dtheta), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn rates_and_ordering() {
        let world = empty_room(10.0);
        let script = ScenarioScript::new("still", Pose2D::identity(), vec![Motion::Wait { duration: 10.0 }]);
        let log = run_scenario(&world, &SimConfig::default(), &script, 1).unwrap();
        assert_eq!(log.odometry().count(), 240);
        assert_eq!(log.camera_frames().count(), 61);
        assert_eq!(log.scans().count(), 51);
        for tag in ["odometry", "camera", "lidar", "ground-truth"] {
            let stamps: Vec<f64> = log.events.iter().filter(|e| e.data.tag() == tag).map(|e| e.stamp).collect();
            assert!(stamps.windows(2).all(|w| w[0] < w[1]), "{tag}");
        }
        assert!((log.duration() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn noise_free_odometry_reproduces_truth() {
        let world = lab_world();
        let motions = vec![
            Motion::Straight { distance: 1.0, speed: 0.2 },
            Motion::Arc { radius: 0.5, angle: FRAC_PI_2, speed: 0.2 },
            Motion::Straight { distance: 0.5, speed: 0.2 },
        ];
        let script = ScenarioScript::new("dr", Pose2D::new(3.0, 1.0, 0.0), motions);
        let config = SimConfig::default().noise_free();
        let log = run_scenario(&world, &config, &script, 3).unwrap();
        // Ground truth precedes odometry within a tick, so compare at the next event.
        let mut pose = script.start;
        let mut pending: Option<Pose2D> = None;
        for e in &log.events {
            match &e.data {
                SensorData::GroundTruth(p) => pending = Some(*p),
                SensorData::Odometry(d) => {
                    pose = pose.compose(&d.as_pose());
                    let truth = pending.take().unwrap();
                    assert!(pose.distance_to(&truth) < 1e-9, "{pose:?} vs {truth:?}");
                }
                _ => {}
            }
        }
        let truth = log.ground_truth().last().unwrap().1;
        assert!(pose.distance_to(&truth) < 1e-9 * log.odometry().count() as f64);
        assert!((pose.theta - truth.theta).abs() < 1e-9);
    }

    #[test]
    fn loop_duration_matches_length_over_speed() {
        let world = lab_world();
        let motions = vec![
            Motion::Straight { distance: 4.0, speed: 0.2 },
            Motion::Arc { radius: 0.5, angle: FRAC_PI_2, speed: 0.2 },
        ];
        let script = ScenarioScript::new("seg", Pose2D::new(1.0, 0.0, 0.0), motions);
        let log = run_scenario(&world, &SimConfig::default(), &script, 1).unwrap();
        let expected = script.path_length() / 0.2;
        // The last event is at most one odometry period before the end.
        assert!(log.duration() <= expected + 1e-9 && expected - log.duration() < 1.0 / 24.0);
    }

    #[test]
    fn rejects_paths_leaving_the_map() {
        let world = empty_room(4.0);
        let script = ScenarioScript::new("out", Pose2D::identity(), vec![Motion::Straight { distance: 10.0, speed: 0.2 }]);
        assert!(matches!(
            run_scenario(&world, &SimConfig::default(), &script, 1),
            Err(Error::PoseOutsideMap { .. })
        ));
        let script = ScenarioScript::new("wall", Pose2D::new(2.05, 0.0, 0.0), vec![]);
        assert!(run_scenario(&world, &SimConfig::default(), &script, 1).is_err());
    }

    #[test]
    fn outage_silences_camera_only() {
        let world = lab_world();
        let mut script = ScenarioScript::new("out", Pose2D::new(3.5, 2.0, 0.0), vec![Motion::Wait { duration: 4.0 }]);
        script.led_outages.push(TimeWindow { start: 1.0, end: 2.0 });
        let config = SimConfig::default().noise_free();
        let log = run_scenario(&world, &config, &script, 1).unwrap();
        for (t, obs) in log.camera_frames() {
            assert_eq!(obs.is_empty(), (1.0..=2.0).contains(&t), "t = {t}");
        }
    }

    #[test]
    fn dynamic_obstacle_blocks_motion_and_is_seen() {
        let world = empty_room(10.0);
        let mut script = ScenarioScript::new("dyn", Pose2D::identity(), vec![Motion::Straight { distance: 2.0, speed: 0.2 }]);
        script.obstacles.push(DynamicObstacle {
            rect: Rect::new(1.0, -0.5, 1.2, 0.5),
            appear: 0.0,
            vanish: None,
            velocity: [0.0, 0.0],
        });
        let config = SimConfig::default().noise_free();
        let log = run_scenario(&world, &config, &script, 1).unwrap();
        let first = log.scans().next().unwrap();
        assert!((first.ranges[0] - 1.0).abs() < 1e-9);
        let last = log.ground_truth().last().unwrap().1;
        assert!((last.x - (1.0 - 0.105)).abs() < 1e-6);
    }
}
