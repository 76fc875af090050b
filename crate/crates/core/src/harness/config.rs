//! Experiment configuration: one TOML document with a section per module.
//!
//! Loading resolves relative paths against the config file's directory.
//! `prepare` validates everything, loads the world and probes the output
//! directory, so a bad config fails before any simulation starts.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::StackConfig;
use crate::geometry::Pose2D;
use crate::mapping::MapperConfig;
use crate::mcl::{build_likelihood_field, LikelihoodField};
use crate::nav::NavParams;
use crate::sim::scenario::{DynamicObstacle, TimeWindow};
use crate::sim::world::{lab_world, Rect, WorldModel};
use crate::sim::SimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Fused,
    SloVlp,
    Mcl,
    Odometry,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [Estimator::Fused, Estimator::SloVlp, Estimator::Mcl, Estimator::Odometry];

    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Fused => "fused",
            Estimator::SloVlp => "slo-vlp",
            Estimator::Mcl => "mcl",
            Estimator::Odometry => "odometry",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    Simulate,
    Map,
    #[default]
    StaticAccuracy,
    Trajectory,
    Recovery,
    Navigate,
}

impl ScenarioKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::Simulate => "simulate",
            ScenarioKind::Map => "map",
            ScenarioKind::StaticAccuracy => "static-accuracy",
            ScenarioKind::Trajectory => "trajectory",
            ScenarioKind::Recovery => "recovery",
            ScenarioKind::Navigate => "navigate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputFormats {
    pub csv: bool,
    pub json: bool,
    pub images: bool,
}

impl Default for OutputFormats {
    fn default() -> Self {
        Self {
            csv: true,
            json: true,
            images: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StaticAccuracyParams {
    pub poses: usize,
    /// Stationary log length per pose, seconds.
    pub dwell: f64,
    /// Free margin around the robot footprint when sampling poses.
    pub clearance: f64,
    /// Spread of the pose prior handed to the fused and MCL estimators.
    pub prior_sigma_xy: f64,
    pub prior_sigma_theta: f64,
    /// Spread of the external heading handed to SLO-VLP-only.
    pub heading_sigma: f64,
    /// Rejection-sampling budget per pose.
    pub max_attempts: usize,
}

impl Default for StaticAccuracyParams {
    fn default() -> Self {
        Self {
            poses: 400,
            dwell: 3.0,
            clearance: 0.15,
            prior_sigma_xy: 0.2,
            prior_sigma_theta: 3f64.to_radians(),
            heading_sigma: 2f64.to_radians(),
            max_attempts: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryParams {
    /// Loop start; the loop runs counter-clockwise from here.
    pub start: Pose2D,
    /// Straight side lengths along and across the start heading.
    pub length: f64,
    pub width: f64,
    pub corner_radius: f64,
    pub laps: usize,
    pub speed: f64,
    pub led_outages: Vec<TimeWindow>,
    pub prior_sigma_xy: f64,
    pub prior_sigma_theta: f64,
    /// Largest fused error tolerated inside an outage.
    pub outage_max_error: f64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self {
            start: Pose2D::new(1.0, 0.0, 0.0),
            length: 7.0,
            width: 3.0,
            corner_radius: 0.5,
            laps: 2,
            speed: 0.2,
            led_outages: vec![TimeWindow { start: 20.0, end: 35.0 }],
            prior_sigma_xy: 0.02,
            prior_sigma_theta: 1f64.to_radians(),
            outage_max_error: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingParams {
    /// Start pose B in the LED frame.
    pub start: Pose2D,
    /// Rectangle driven from B: east `length`, north `width`, back west and south.
    pub length: f64,
    pub width: f64,
    pub speed: f64,
    pub occupied_threshold: f64,
    pub free_threshold: f64,
    /// Allowed origin error, meters.
    pub tolerance: f64,
}

impl Default for MappingParams {
    fn default() -> Self {
        Self {
            start: Pose2D::new(3.0, 2.0, 0.0),
            length: 4.0,
            width: 1.5,
            speed: 0.2,
            occupied_threshold: 0.65,
            free_threshold: 0.35,
            tolerance: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoveryParams {
    pub start: Pose2D,
    /// Offset of the wrong prior from the true start.
    pub wrong_offset: [f64; 2],
    pub distance: f64,
    pub speed: f64,
    pub prior_sigma_xy: f64,
    pub prior_sigma_theta: f64,
    /// Recovered once the fused error drops below this.
    pub recovered_error: f64,
    /// Allowed time from the first fix to recovery.
    pub recovery_window: f64,
    /// The no-VLP control must stay above this error.
    pub lost_error: f64,
}

impl Default for RecoveryParams {
    fn default() -> Self {
        Self {
            start: Pose2D::new(1.5, 7.0, -std::f64::consts::FRAC_PI_2),
            wrong_offset: [6.0, 0.0],
            distance: 4.5,
            speed: 0.2,
            prior_sigma_xy: 0.02,
            prior_sigma_theta: 1f64.to_radians(),
            recovered_error: 0.10,
            recovery_window: 2.0,
            lost_error: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NavScenario {
    pub name: String,
    pub start: Pose2D,
    pub goal: Pose2D,
    #[serde(default)]
    pub obstacles: Vec<DynamicObstacle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NavigationParams {
    pub scenarios: Vec<NavScenario>,
    pub prior_sigma_xy: f64,
    pub prior_sigma_theta: f64,
    /// Executed length over optimal planned length must not exceed this.
    pub max_length_ratio: f64,
}

impl Default for NavigationParams {
    fn default() -> Self {
        Self {
            scenarios: default_nav_scenarios(),
            prior_sigma_xy: 0.02,
            prior_sigma_theta: 1f64.to_radians(),
            max_length_ratio: 1.3,
        }
    }
}

fn nav(name: &str, start: (f64, f64, f64), goal: (f64, f64, f64), obstacles: Vec<DynamicObstacle>) -> NavScenario {
    NavScenario {
        name: name.into(),
        start: Pose2D::new(start.0, start.1, start.2.to_radians()),
        goal: Pose2D::new(goal.0, goal.1, goal.2.to_radians()),
        obstacles,
    }
}

fn crossing(rect: Rect, appear: f64, vanish: f64, velocity: [f64; 2]) -> DynamicObstacle {
    DynamicObstacle {
        rect,
        appear,
        vanish: Some(vanish),
        velocity,
    }
}

/// Ten lab routes; the last three meet moving or appearing obstacles.
pub fn default_nav_scenarios() -> Vec<NavScenario> {
    vec![
        nav("open-east", (1.0, 0.5, 0.0), (4.0, 1.5, 60.0), vec![]),
        nav("around-table", (3.5, 3.8, 180.0), (6.0, 2.2, -90.0), vec![]),
        nav("bottom-run", (0.5, 0.0, 0.0), (8.5, 0.2, 90.0), vec![]),
        nav("out-of-left-corridor", (1.5, 7.5, -90.0), (2.5, 2.5, 0.0), vec![]),
        nav("out-of-right-corridor", (7.5, 8.0, -90.0), (8.5, 2.5, 0.0), vec![]),
        nav("diagonal", (0.0, 4.0, -45.0), (5.0, 0.5, 0.0), vec![]),
        nav("east-wall", (9.5, 2.5, 90.0), (9.5, 8.5, 180.0), vec![]),
        nav(
            "crossing-walker",
            (0.5, 1.5, 0.0),
            (5.5, 1.5, 0.0),
            vec![crossing(Rect::new(3.0, -0.2, 3.4, 0.2), 4.0, 14.0, [0.0, 0.25])],
        ),
        nav(
            "parked-cart",
            (6.5, 4.0, 180.0),
            (1.0, 4.0, 180.0),
            vec![crossing(Rect::new(3.6, 3.75, 4.0, 4.25), 3.0, 400.0, [0.0, 0.0])],
        ),
        nav(
            "late-box",
            (8.0, 3.0, -90.0),
            (8.0, 0.0, -90.0),
            vec![crossing(Rect::new(7.8, 1.3, 8.2, 1.7), 2.0, 400.0, [0.0, 0.0])],
        ),
    ]
}

/// Full experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// World file (TOML). The bundled lab when absent.
    #[serde(default)]
    pub world: Option<PathBuf>,
    #[serde(default)]
    pub scenario: ScenarioKind,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Estimator>,
    #[serde(default)]
    pub formats: OutputFormats,
    /// Turns off every noise source, including estimator priors.
    #[serde(default)]
    pub noise_free: bool,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub stack: StackConfig,
    #[serde(default)]
    pub mapper: MapperConfig,
    #[serde(default)]
    pub nav: NavParams,
    #[serde(default)]
    pub static_accuracy: StaticAccuracyParams,
    #[serde(default)]
    pub trajectory: TrajectoryParams,
    #[serde(default)]
    pub mapping: MappingParams,
    #[serde(default)]
    pub recovery: RecoveryParams,
    #[serde(default)]
    pub navigation: NavigationParams,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_estimators() -> Vec<Estimator> {
    Estimator::ALL.to_vec()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: None,
            scenario: ScenarioKind::default(),
            seeds: Vec::new(),
            output_dir: default_output(),
            estimators: default_estimators(),
            formats: OutputFormats::default(),
            noise_free: false,
            sim: SimConfig::default(),
            stack: StackConfig::default(),
            mapper: MapperConfig::default(),
            nav: NavParams::default(),
            static_accuracy: StaticAccuracyParams::default(),
            trajectory: TrajectoryParams::default(),
            mapping: MappingParams::default(),
            recovery: RecoveryParams::default(),
            navigation: NavigationParams::default(),
        }
    }
}

/// A validated config with its world loaded.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub world: WorldModel,
}

impl Experiment {
    pub fn has(&self, e: Estimator) -> bool {
        self.config.estimators.contains(&e)
    }

    /// Sensor config after the noise-free switch.
    pub fn sim(&self) -> SimConfig {
        if self.config.noise_free {
            self.config.sim.noise_free()
        } else {
            self.config.sim
        }
    }

    pub fn stack(&self) -> StackConfig {
        let mut s = self.config.stack;
        if self.config.noise_free {
            s = s.noise_free();
        }
        // The VLP solver's camera height is the simulated one.
        s.vlp.camera_height = self.config.sim.camera_height;
        s
    }

    /// Likelihood field of the world map for the configured MCL.
    pub fn likelihood_field(&self) -> Result<Arc<LikelihoodField>> {
        let m = &self.config.stack.mcl;
        Ok(Arc::new(build_likelihood_field(&self.world.grid, m.sigma_hit, m.max_dist)?))
    }

    /// Prior spread, zero in noise-free runs.
    pub fn prior(&self, sigma: f64) -> f64 {
        if self.config.noise_free {
            0.0
        } else {
            sigma
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("experiment config", e))
    }

    /// Reads a config file; relative paths become relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if let Some(w) = &cfg.world {
            if w.is_relative() {
                cfg.world = Some(base.join(w));
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::parse("experiment config", e))
    }

    /// Checks every section and the selected scenario without touching the filesystem.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("estimator set is empty".into()));
        }
        self.sim.validate()?;
        self.stack.validate()?;
        self.nav.validate()?;
        let sa = &self.static_accuracy;
        if sa.poses == 0 || !(sa.dwell > 0.0) || sa.max_attempts == 0 {
            return Err(Error::Config("static accuracy needs poses, dwell and attempts > 0".into()));
        }
        non_negative(&[sa.clearance, sa.prior_sigma_xy, sa.prior_sigma_theta, sa.heading_sigma], "static accuracy spreads")?;
        let tr = &self.trajectory;
        if tr.laps == 0 || !(tr.speed > 0.0 && tr.corner_radius > 0.0 && tr.length >= 0.0 && tr.width >= 0.0) {
            return Err(Error::Config("trajectory needs laps, speed and corner radius > 0".into()));
        }
        non_negative(&[tr.prior_sigma_xy, tr.prior_sigma_theta, tr.outage_max_error], "trajectory spreads")?;
        for w in &tr.led_outages {
            if !(w.end > w.start && w.start >= 0.0) {
                return Err(Error::Config("LED outage windows need 0 ≤ start < end".into()));
            }
        }
        let m = &self.mapping;
        if !(m.speed > 0.0 && m.length > 0.0 && m.width > 0.0 && m.tolerance > 0.0) {
            return Err(Error::Config("mapping route and tolerance must be positive".into()));
        }
        if !(0.0 < m.free_threshold && m.free_threshold < m.occupied_threshold && m.occupied_threshold < 1.0) {
            return Err(Error::Config("mapping thresholds need 0 < free < occupied < 1".into()));
        }
        let r = &self.recovery;
        if !(r.speed > 0.0 && r.distance > 0.0 && r.recovered_error > 0.0 && r.recovery_window > 0.0 && r.lost_error > 0.0) {
            return Err(Error::Config("recovery distances, speeds and thresholds must be positive".into()));
        }
        let n = &self.navigation;
        if n.scenarios.is_empty() || !(n.max_length_ratio >= 1.0) {
            return Err(Error::Config("navigation needs scenarios and a length ratio ≥ 1".into()));
        }
        non_negative(&[n.prior_sigma_xy, n.prior_sigma_theta], "navigation prior")?;
        Ok(())
    }

    /// Validates, loads the world and makes sure the output directory is writable.
    pub fn prepare(&self) -> Result<Experiment> {
        self.validate()?;
        let world = match &self.world {
            Some(p) => WorldModel::load(p)?,
            None => lab_world(),
        };
        world.validate(self.sim.camera_height)?;
        let starts: Vec<(&str, Pose2D)> = match self.scenario {
            ScenarioKind::Trajectory | ScenarioKind::Simulate => vec![("trajectory start", self.trajectory.start)],
            ScenarioKind::Map => vec![("mapping start", self.mapping.start)],
            ScenarioKind::Recovery => vec![("recovery start", self.recovery.start)],
            ScenarioKind::Navigate => self.navigation.scenarios.iter().flat_map(|s| [(s.name.as_str(), s.start)]).collect(),
            ScenarioKind::StaticAccuracy => vec![],
        };
        for (what, p) in starts {
            if !world.is_free(p.x, p.y, self.sim.robot_radius) {
                return Err(Error::Config(format!("{what} ({:.2}, {:.2}) is not free in the world", p.x, p.y)));
            }
        }
        probe_output_dir(&self.output_dir)?;
        Ok(Experiment { config: self.clone(), world })
    }
}

fn non_negative(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| *v >= 0.0 && v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} must be finite and non-negative")))
    }
}

/// Creates the directory and writes, then removes, a probe file.
pub fn probe_output_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-probe");
    std::fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    std::fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded() -> ExperimentConfig {
        ExperimentConfig {
            seeds: vec![1],
            output_dir: std::env::temp_dir().join("vlp-slam-config-test"),
            ..Default::default()
        }
    }

    fn repo(rel: &str) -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
    }

    #[test]
    fn shipped_configs_parse_and_default_matches_code() {
        let shipped = ExperimentConfig::load(&repo("configs/default.toml")).unwrap();
        let expected = ExperimentConfig {
            seeds: vec![1, 2, 3, 4, 5],
            output_dir: repo("configs/out"),
            ..Default::default()
        };
        assert_eq!(shipped, expected);
        let quick = ExperimentConfig::load(&repo("configs/quick.toml")).unwrap();
        assert_eq!(quick.navigation.scenarios.len(), 2);
        assert_eq!(quick.navigation.scenarios[1].obstacles.len(), 1);
        assert!(quick.world.as_ref().unwrap().is_file());
    }

    #[test]
    fn shipped_world_matches_the_bundled_lab() {
        let loaded = WorldModel::load(&repo("worlds/lab/lab.toml")).unwrap();
        let lab = lab_world();
        assert_eq!(loaded.grid.cells(), lab.grid.cells());
        assert_eq!(loaded.bounds, lab.bounds);
        assert_eq!(loaded.led_map, lab.led_map);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = seeded();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn sections_default_and_unknown_keys_fail() {
        let cfg = ExperimentConfig::from_toml("seeds = [3]\nscenario = \"trajectory\"\n[trajectory]\nlaps = 1\n").unwrap();
        assert_eq!(cfg.trajectory.laps, 1);
        assert_eq!(cfg.trajectory.speed, 0.2);
        assert_eq!(cfg.scenario, ScenarioKind::Trajectory);
        assert!(ExperimentConfig::from_toml("seeds = [3]\n[trajectory]\nlapz = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn validation_fails_fast() {
        assert!(ExperimentConfig::default().validate().is_err(), "no seeds");
        let mut c = seeded();
        c.static_accuracy.poses = 0;
        assert!(c.validate().is_err());
        let mut c = seeded();
        c.trajectory.led_outages = vec![TimeWindow { start: 5.0, end: 1.0 }];
        assert!(c.validate().is_err());
        let mut c = seeded();
        c.world = Some(PathBuf::from("/nonexistent/world.toml"));
        assert!(matches!(c.prepare(), Err(Error::Io { .. })));
        let mut c = seeded();
        c.scenario = ScenarioKind::Map;
        c.mapping.start = Pose2D::new(4.5, 6.5, 0.0);
        assert!(matches!(c.prepare(), Err(Error::Config(_))));
    }

    #[test]
    fn unwritable_output_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain-file");
        std::fs::write(&file, b"x").unwrap();
        let mut c = seeded();
        c.output_dir = file.join("sub");
        assert!(c.prepare().is_err());
    }

    #[test]
    fn load_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "seeds = [1]\noutput_dir = \"results\"\nworld = \"w/lab.toml\"\n").unwrap();
        let c = ExperimentConfig::load(&path).unwrap();
        assert_eq!(c.output_dir, dir.path().join("results"));
        assert_eq!(c.world, Some(dir.path().join("w/lab.toml")));
    }
}
