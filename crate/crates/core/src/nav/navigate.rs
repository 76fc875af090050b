//! Closed-loop goal navigation on the simulator, driven by the fused estimate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::stack::LocalizationStack;
use crate::geometry::{angle_diff, Pose2D};
use crate::grid::{CellState, TrinaryMap};
use crate::nav::costmap::{Costmap, CostmapParams};
use crate::nav::dwa::{nearest_index, plan_local, trajectory_clear, DwaParams};
use crate::nav::local::{LocalCostmap, StaticLayer};
use crate::nav::planner::{plan_global, Path, PlannerParams};
use crate::sim::log::SensorData;
use crate::sim::robot::VelocityCommand;
use crate::sim::scenario::Simulator;
use crate::sim::sensors::LidarScan;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NavParams {
    pub control_rate: f64,
    pub goal_xy_tolerance: f64,
    pub goal_theta_tolerance: f64,
    /// Distance at which translation stops and the final turn begins.
    pub arrive_xy: f64,
    /// Heading error at which the final turn stops.
    pub align_theta: f64,
    pub timeout: f64,
    /// Consecutive fallback ticks that trigger a global replan.
    pub replan_after_fallback: usize,
    pub local_size: f64,
    /// Forward speed is capped at this gain times the remaining distance.
    pub approach_gain: f64,
    pub min_approach_speed: f64,
    pub turn_gain: f64,
    pub costmap: CostmapParams,
    pub planner: PlannerParams,
    pub dwa: DwaParams,
}

impl Default for NavParams {
    fn default() -> Self {
        Self {
            control_rate: 10.0,
            goal_xy_tolerance: 0.05,
            goal_theta_tolerance: 10f64.to_radians(),
            arrive_xy: 0.01,
            align_theta: 4f64.to_radians(),
            timeout: 240.0,
            replan_after_fallback: 10,
            local_size: 4.0,
            approach_gain: 1.0,
            min_approach_speed: 0.03,
            turn_gain: 1.5,
            costmap: CostmapParams::default(),
            planner: PlannerParams::default(),
            dwa: DwaParams::default(),
        }
    }
}

impl NavParams {
    pub fn validate(&self) -> Result<()> {
        self.costmap.validate()?;
        self.dwa.validate()?;
        let pos = [self.control_rate, self.goal_xy_tolerance, self.goal_theta_tolerance, self.arrive_xy, self.align_theta, self.timeout, self.local_size];
        if pos.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config("navigation rates, tolerances and sizes must be positive".into()));
        }
        if self.arrive_xy > self.goal_xy_tolerance || self.align_theta > self.goal_theta_tolerance {
            return Err(Error::Config("internal arrival thresholds must be within the goal tolerance".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NavStatus {
    Success,
    InvalidGoal,
    Unreachable,
    Timeout,
}

/// One control tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NavTick {
    pub t: f64,
    pub estimate: Pose2D,
    pub truth: Pose2D,
    pub v: f64,
    pub omega: f64,
    pub fallback: bool,
    pub replanned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavOutcome {
    pub status: NavStatus,
    pub detail: String,
    pub duration: f64,
    /// Ground-truth distance driven.
    pub executed_length: f64,
    /// Length of the first global plan.
    pub planned_length: f64,
    pub replans: usize,
    pub fallback_ticks: usize,
    /// Non-fallback commands whose rollout was not clear at selection time.
    pub inadmissible_commands: usize,
    pub collisions: usize,
    pub footprint_violations: usize,
    pub min_clearance: f64,
    pub final_position_error: f64,
    pub final_heading_error: f64,
    pub ticks: Vec<NavTick>,
}

impl NavOutcome {
    pub fn write_ndjson<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        for t in &self.ticks {
            serde_json::to_writer(&mut out, t)?;
            out.write_all(b"\n").map_err(|e| Error::io("<navigation ticks>", e))?;
        }
        #[derive(Serialize)]
        struct Summary<'a> {
            outcome: &'a NavStatus,
            detail: &'a str,
            duration: f64,
            executed_length: f64,
            planned_length: f64,
            replans: usize,
            collisions: usize,
        }
        serde_json::to_writer(
            &mut out,
            &Summary {
                outcome: &self.status,
                detail: &self.detail,
                duration: self.duration,
                executed_length: self.executed_length,
                planned_length: self.planned_length,
                replans: self.replans,
                collisions: self.collisions,
            },
        )?;
        out.write_all(b"\n").map_err(|e| Error::io("<navigation ticks>", e))?;
        Ok(())
    }
}

/// Global costmap with LiDAR-seen obstacles added to the static lethal set.
fn planning_costmap(map: &TrinaryMap, layer_origin: &Pose2D, extra: &[crate::grid::Cell], params: &CostmapParams) -> Result<Costmap> {
    let mut lethal: Vec<bool> = map
        .cells
        .iter()
        .map(|&s| s == CellState::Occupied || (params.unknown_is_lethal && s == CellState::Unknown))
        .collect();
    for c in extra {
        if c.ix >= 0 && c.iy >= 0 && (c.ix as usize) < map.width && (c.iy as usize) < map.height {
            lethal[c.iy as usize * map.width + c.ix as usize] = true;
        }
    }
    Costmap::from_lethal(map.width, map.height, map.resolution, *layer_origin, lethal, *params)
}

/// Whether the rest of the path runs through an untraversable local cell.
fn path_blocked(path: &Path, from: usize, local: &Costmap) -> bool {
    path.waypoints[from..]
        .iter()
        .filter(|w| local.contains(local.world_to_cell(w.x, w.y)))
        .any(|w| !local.footprint_clear(w.x, w.y))
}

/// Drives the simulated robot to `goal` using the stack's fused estimate.
///
/// The stack must already be started. Events from `sim` are fed to the stack as they
/// happen; ground truth is used only for reporting.
pub fn navigate(sim: &mut Simulator<'_>, stack: &mut LocalizationStack, map: &TrinaryMap, goal: Pose2D, params: &NavParams) -> Result<NavOutcome> {
    params.validate()?;
    let layer = StaticLayer::from_trinary(map)?;
    let mut local = LocalCostmap::new(params.local_size, map.resolution, params.costmap)?;
    let ticks_per_control = sim.config().period_ticks(params.control_rate)?;
    let mut last_scan: Option<LidarScan> = None;
    let feed = |stack: &mut LocalizationStack, events: Vec<crate::sim::log::LogEvent>, last_scan: &mut Option<LidarScan>| -> Result<()> {
        for e in &events {
            stack.process(e)?;
            if let SensorData::Lidar(s) = &e.data {
                *last_scan = Some(s.clone());
            }
        }
        Ok(())
    };
    let initial = sim.initial_events()?;
    feed(stack, initial, &mut last_scan)?;

    let mut outcome = NavOutcome {
        status: NavStatus::Timeout,
        detail: String::new(),
        duration: 0.0,
        executed_length: 0.0,
        planned_length: 0.0,
        replans: 0,
        fallback_ticks: 0,
        inadmissible_commands: 0,
        collisions: 0,
        footprint_violations: 0,
        min_clearance: f64::INFINITY,
        final_position_error: 0.0,
        final_heading_error: 0.0,
        ticks: Vec::new(),
    };
    let t0 = sim.time();
    let finish = |mut o: NavOutcome, sim: &Simulator<'_>, status: NavStatus, detail: String| {
        let truth = sim.state().pose;
        o.status = status;
        o.detail = detail;
        o.duration = sim.time() - t0;
        o.collisions = sim.collisions();
        o.footprint_violations = sim.violations();
        o.min_clearance = sim.min_clearance();
        o.final_position_error = (truth.x - goal.x).hypot(truth.y - goal.y);
        o.final_heading_error = angle_diff(goal.theta, truth.theta).abs();
        o
    };

    let est = stack.estimate()?.estimate.mean;
    let at_goal = |p: &Pose2D| (p.x - goal.x).hypot(p.y - goal.y) <= params.goal_xy_tolerance && angle_diff(goal.theta, p.theta).abs() <= params.goal_theta_tolerance;
    if at_goal(&est) {
        return Ok(finish(outcome, sim, NavStatus::Success, "already at goal".into()));
    }
    let mut global = planning_costmap(map, &layer.origin(), &[], &params.costmap)?;
    let mut path = match plan_global(&global, &est, &goal, &params.planner) {
        Ok(p) => p,
        Err(Error::InvalidGoal(m)) => return Ok(finish(outcome, sim, NavStatus::InvalidGoal, m)),
        Err(Error::Unreachable) => return Ok(finish(outcome, sim, NavStatus::Unreachable, "no route to goal".into())),
        Err(e) => return Err(e),
    };
    outcome.planned_length = path.length();

    let mut cmd = VelocityCommand::stop();
    let mut fallback_streak = 0usize;
    let mut aligning = false;
    let mut prev_truth = sim.state().pose;
    loop {
        let est = stack.estimate()?.estimate.mean;
        let truth = sim.state().pose;
        let dist = (est.x - goal.x).hypot(est.y - goal.y);
        let heading_err = angle_diff(goal.theta, est.theta);
        if dist <= params.arrive_xy || (aligning && dist <= params.goal_xy_tolerance) {
            aligning = true;
        }
        if aligning && dist <= params.goal_xy_tolerance && heading_err.abs() <= params.align_theta {
            return Ok(finish(outcome, sim, NavStatus::Success, String::new()));
        }
        if sim.time() - t0 >= params.timeout {
            let detail = format!("timed out {dist:.3} m from the goal");
            return Ok(finish(outcome, sim, NavStatus::Timeout, detail));
        }

        let mut replanned = false;
        let mut fallback = false;
        let local_cm = match &last_scan {
            Some(scan) => local.update(&layer, scan, &est)?,
            None => local.costmap(&layer)?,
        };
        last_scan = None;
        if aligning {
            let reach = params.dwa.acc_omega * params.dwa.period;
            let w = (params.turn_gain * heading_err)
                .clamp(cmd.omega - reach, cmd.omega + reach)
                .clamp(-params.dwa.limits.max_omega, params.dwa.limits.max_omega);
            cmd = VelocityCommand::new(0.0, w);
        } else {
            let near = nearest_index(&path.waypoints, est.x, est.y);
            if path_blocked(&path, near, &local_cm) || fallback_streak > params.replan_after_fallback {
                global = planning_costmap(map, &layer.origin(), &local.hit_cells(), &params.costmap)?;
                if let Ok(p) = plan_global(&global, &est, &goal, &params.planner) {
                    path = p;
                    outcome.replans += 1;
                    replanned = true;
                }
                fallback_streak = 0;
            }
            let cap = (params.approach_gain * dist).max(params.min_approach_speed);
            let d = plan_local(&est, &cmd, &path.waypoints, &local_cm, &params.dwa, cap);
            if d.fallback {
                fallback = true;
                fallback_streak += 1;
                outcome.fallback_ticks += 1;
            } else {
                fallback_streak = 0;
                if !trajectory_clear(&est, &d.command, &local_cm, &params.dwa) {
                    outcome.inadmissible_commands += 1;
                }
            }
            cmd = d.command;
        }
        outcome.ticks.push(NavTick {
            t: sim.time(),
            estimate: est,
            truth,
            v: cmd.v,
            omega: cmd.omega,
            fallback,
            replanned,
        });
        for _ in 0..ticks_per_control {
            let events = sim.step(&cmd)?;
            feed(stack, events, &mut last_scan)?;
        }
        let now = sim.state().pose;
        outcome.executed_length += (now.x - prev_truth.x).hypot(now.y - prev_truth.y);
        prev_truth = now;
    }
}

/// Length of the optimal path on a map, for efficiency ratios.
pub fn reference_length(map: &TrinaryMap, start: &Pose2D, goal: &Pose2D, params: &NavParams) -> Result<f64> {
    let layer = StaticLayer::from_trinary(map)?;
    let cm = planning_costmap(map, &layer.origin(), &[], &params.costmap)?;
    Ok(plan_global(&cm, start, goal, &params.planner)?.length())
}

/// Free-space reference: straight-line distance.
pub fn straight_line(start: &Pose2D, goal: &Pose2D) -> f64 {
    (goal.x - start.x).hypot(goal.y - start.y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::stack::{StackConfig, StackInit};
    use crate::mapping::binarize;
    use crate::mcl::build_likelihood_field;
    use crate::sim::scenario::{ScenarioScript, SimConfig};
    use crate::sim::world::{empty_room, lab_world, WorldModel};
    use std::sync::Arc;

    fn run(world: &WorldModel, start: Pose2D, goal: Pose2D, seed: u64) -> NavOutcome {
        let config = SimConfig::default();
        let script = ScenarioScript::new("nav-test", start, vec![]);
        let mut sim = Simulator::new(world, config, &script, seed).unwrap();
        let field = Arc::new(build_likelihood_field(&world.grid, 0.1, 1.0).unwrap());
        let mut stack = LocalizationStack::new(field, world.led_map.clone(), config.camera, StackConfig::default(), seed).unwrap();
        stack.start(StackInit::Pose { pose: start, sigma_xy: 0.02, sigma_theta: 0.02 }, 0.0).unwrap();
        let map = binarize(&world.grid, 0.65, 0.35).unwrap();
        navigate(&mut sim, &mut stack, &map, goal, &NavParams::default()).unwrap()
    }

    #[test]
    fn goal_at_start_succeeds_immediately() {
        let world = empty_room(4.0);
        let p = Pose2D::new(0.0, 0.0, 0.0);
        let o = run(&world, p, p, 1);
        assert_eq!(o.status, NavStatus::Success);
        assert!(o.ticks.is_empty());
    }

    #[test]
    fn unreachable_and_invalid_goals_fail_without_motion() {
        let world = lab_world();
        let start = Pose2D::new(1.0, 0.0, 0.0);
        // Inside the central block.
        let o = run(&world, start, Pose2D::new(4.5, 6.5, 0.0), 2);
        assert_eq!(o.status, NavStatus::InvalidGoal);
        assert_eq!(o.executed_length, 0.0);
        let o = run(&world, start, Pose2D::new(50.0, 0.0, 0.0), 2);
        assert_eq!(o.status, NavStatus::InvalidGoal);
    }

    #[test]
    fn reaches_free_space_goal() {
        let world = lab_world();
        let start = Pose2D::new(1.0, 0.5, 0.0);
        let goal = Pose2D::new(4.0, 1.5, 1.0);
        let o = run(&world, start, goal, 3);
        assert_eq!(o.status, NavStatus::Success, "{}", o.detail);
        assert_eq!(o.collisions, 0);
        assert_eq!(o.footprint_violations, 0);
        assert_eq!(o.inadmissible_commands, 0);
        assert!(o.final_position_error <= 0.05, "{}", o.final_position_error);
        assert!(o.final_heading_error <= 10f64.to_radians());
        let map = binarize(&world.grid, 0.65, 0.35).unwrap();
        let reference = reference_length(&map, &start, &goal, &NavParams::default()).unwrap();
        assert!(o.executed_length <= 1.3 * reference, "{} vs {}", o.executed_length, reference);
    }
}
