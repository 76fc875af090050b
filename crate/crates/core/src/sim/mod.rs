//! Deterministic 2D simulator: world, robot, sensors and scripted scenarios.

pub mod log;
pub mod robot;
pub mod scenario;
pub mod sensors;
pub mod world;

pub use log::{LogEvent, SensorData, SensorLog};
pub use robot::{step_robot, RobotState, StepOutcome, VelocityCommand, VelocityLimits};
pub use scenario::{run_scenario, DynamicObstacle, Motion, ScenarioScript, SimConfig, Simulator, TimeWindow};
pub use sensors::{observe_leds, sample_odometry, simulate_lidar, LidarScan, LidarSpec, OdometryDelta, OdometryNoise};
pub use world::{lab_world, Bounds, Floorplan, Rect, WorldModel};
