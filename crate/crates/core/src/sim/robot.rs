use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{integrate_unicycle, Pose2D};
use crate::grid::OccupancyGrid;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VelocityCommand {
    pub v: f64,
    pub omega: f64,
}

impl VelocityCommand {
    pub const fn new(v: f64, omega: f64) -> Self {
        Self { v, omega }
    }

    pub const fn stop() -> Self {
        Self { v: 0.0, omega: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityLimits {
    pub max_v: f64,
    pub max_omega: f64,
}

impl Default for VelocityLimits {
    fn default() -> Self {
        Self {
            max_v: 0.22,
            max_omega: 2.84,
        }
    }
}

impl VelocityLimits {
    pub fn admits(&self, cmd: &VelocityCommand) -> bool {
        const SLACK: f64 = 1e-9;
        cmd.v.abs() <= self.max_v + SLACK && cmd.omega.abs() <= self.max_omega + SLACK
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub pose: Pose2D,
    pub v: f64,
    pub omega: f64,
    pub camera_height: f64,
}

impl RobotState {
    pub fn at(pose: Pose2D, camera_height: f64) -> Self {
        Self {
            pose,
            v: 0.0,
            omega: 0.0,
            camera_height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: RobotState,
    pub collided: bool,
}

/// Largest sub-step length (m) between collision checks.
const COLLISION_STEP: f64 = 0.01;

/// Advances the robot under a constant command. A disc footprint of `radius` is
/// checked against `grid`; on contact the robot stops at the last free pose.
pub fn step_robot(
    state: &RobotState,
    cmd: &VelocityCommand,
    dt: f64,
    limits: &VelocityLimits,
    grid: &OccupancyGrid,
    radius: f64,
) -> Result<StepOutcome> {
    step_robot_with(state, cmd, dt, limits, radius, |p| grid.disc_hits_occupied(p.x, p.y, radius))
}

/// [`step_robot`] against an arbitrary footprint predicate.
pub fn step_robot_with<F>(
    state: &RobotState,
    cmd: &VelocityCommand,
    dt: f64,
    limits: &VelocityLimits,
    radius: f64,
    blocked: F,
) -> Result<StepOutcome>
where
    F: Fn(&Pose2D) -> bool,
{
    if !(cmd.v.is_finite() && cmd.omega.is_finite() && dt.is_finite()) {
        return Err(Error::NonFinite("velocity command"));
    }
    if dt <= 0.0 {
        return Err(Error::InvalidArgument("dt must be positive".into()));
    }
    if !limits.admits(cmd) {
        return Err(Error::InvalidArgument(format!(
            "command ({:.3}, {:.3}) exceeds velocity limits",
            cmd.v, cmd.omega
        )));
    }
    let travel = (cmd.v * dt).abs() + (cmd.omega * dt).abs() * radius;
    let substeps = ((travel / COLLISION_STEP).ceil() as usize).max(1);
    let h = dt / substeps as f64;
    let mut pose = state.pose;
    for k in 1..=substeps {
        let next = integrate_unicycle(&state.pose, cmd.v, cmd.omega, h * k as f64);
        if blocked(&next) {
            // Bisect between the last free and the first blocked fraction.
            let (mut lo, mut hi) = (h * (k - 1) as f64, h * k as f64);
            for _ in 0..30 {
                let mid = 0.5 * (lo + hi);
                if blocked(&integrate_unicycle(&state.pose, cmd.v, cmd.omega, mid)) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            if lo > 0.0 {
                pose = integrate_unicycle(&state.pose, cmd.v, cmd.omega, lo);
            }
            return Ok(StepOutcome {
                state: RobotState {
                    pose,
                    v: 0.0,
                    omega: 0.0,
                    camera_height: state.camera_height,
                },
                collided: true,
            });
        }
        pose = next;
    }
    Ok(StepOutcome {
        state: RobotState {
            pose: integrate_unicycle(&state.pose, cmd.v, cmd.omega, dt),
            v: cmd.v,
            omega: cmd.omega,
            camera_height: state.camera_height,
        },
        collided: false,
    })
}
