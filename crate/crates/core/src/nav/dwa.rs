//! Dynamic window local planner.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angle_diff, integrate_unicycle, Pose2D};
use crate::nav::costmap::Costmap;
use crate::sim::robot::{VelocityCommand, VelocityLimits};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DwaParams {
    pub limits: VelocityLimits,
    pub acc_v: f64,
    pub acc_omega: f64,
    /// Control period: the window is what the accelerations reach in this time.
    pub period: f64,
    pub horizon: f64,
    pub sim_step: f64,
    pub v_samples: usize,
    /// Odd, so the current angular rate is always sampled.
    pub omega_samples: usize,
    pub w_path: f64,
    pub w_goal: f64,
    pub w_clearance: f64,
    pub w_velocity: f64,
    /// Distance along the path to the point the heading term aims at.
    pub lookahead: f64,
    /// Path distance at which the path term reaches zero.
    pub path_scale: f64,
    /// Clearance beyond this earns no extra score.
    pub clearance_cap: f64,
    /// Angular rate requested by the rotation fallback before window clamping.
    pub fallback_omega: f64,
}

impl Default for DwaParams {
    fn default() -> Self {
        Self {
            limits: VelocityLimits::default(),
            acc_v: 2.5,
            acc_omega: 3.2,
            period: 0.1,
            horizon: 1.5,
            sim_step: 0.05,
            v_samples: 12,
            omega_samples: 21,
            w_path: 0.75,
            w_goal: 0.25,
            w_clearance: 1.0,
            w_velocity: 0.3,
            lookahead: 0.5,
            path_scale: 0.5,
            clearance_cap: 0.5,
            fallback_omega: 1.0,
        }
    }
}

impl DwaParams {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.acc_v, self.acc_omega, self.period, self.horizon, self.sim_step, self.path_scale, self.clearance_cap, self.lookahead];
        if pos.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config("DWA rates, periods and scales must be positive".into()));
        }
        if self.v_samples < 2 || self.omega_samples < 3 || self.omega_samples % 2 == 0 {
            return Err(Error::Config("DWA needs ≥ 2 speed samples and an odd count ≥ 3 of turn samples".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DwaDecision {
    pub command: VelocityCommand,
    /// No sampled trajectory was collision-free; the command is an in-place turn.
    pub fallback: bool,
    pub score: f64,
}

/// Poses along a constant-velocity rollout, excluding the start.
pub fn rollout(pose: &Pose2D, cmd: &VelocityCommand, params: &DwaParams) -> Vec<Pose2D> {
    let steps = (params.horizon / params.sim_step).round().max(1.0) as usize;
    (1..=steps)
        .map(|k| integrate_unicycle(pose, cmd.v, cmd.omega, k as f64 * params.sim_step))
        .collect()
}

/// Whether every rollout pose keeps the footprint off inscribed and lethal cells.
pub fn trajectory_clear(pose: &Pose2D, cmd: &VelocityCommand, cm: &Costmap, params: &DwaParams) -> bool {
    rollout(pose, cmd, params).iter().all(|p| cm.footprint_clear(p.x, p.y))
}

/// Index of the path waypoint nearest to `(x, y)`.
pub fn nearest_index(path: &[Pose2D], x: f64, y: f64) -> usize {
    path.iter()
        .enumerate()
        .min_by(|a, b| {
            let da = (a.1.x - x).hypot(a.1.y - y);
            let db = (b.1.x - x).hypot(b.1.y - y);
            da.total_cmp(&db).then(a.0.cmp(&b.0))
        })
        .map_or(0, |(i, _)| i)
}

/// Point `lookahead` meters along the path past the waypoint nearest to the robot.
pub fn carrot(path: &[Pose2D], pose: &Pose2D, lookahead: f64) -> Pose2D {
    let mut i = nearest_index(path, pose.x, pose.y);
    let mut left = lookahead;
    while i + 1 < path.len() {
        let step = path[i].distance_to(&path[i + 1]);
        if step >= left {
            break;
        }
        left -= step;
        i += 1;
    }
    path[(i + 1).min(path.len() - 1)]
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 || hi <= lo {
        return vec![lo];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

/// Angular-rate samples symmetric about the current rate and always including it.
fn omega_samples(current: f64, params: &DwaParams) -> Vec<f64> {
    let max = params.limits.max_omega;
    let reach = params.acc_omega * params.period;
    let half = params.omega_samples / 2;
    let mut out = Vec::with_capacity(params.omega_samples);
    for k in 0..params.omega_samples {
        let off = (k as f64 - half as f64) / half as f64 * reach;
        let w = current + off;
        if w.abs() <= max {
            out.push(w);
        }
    }
    if out.is_empty() {
        out.push(current.clamp(-max, max));
    }
    out
}

/// Picks the best admissible (v, ω) for the next control period.
///
/// `speed_cap` bounds the forward speed (used to slow down near the goal).
pub fn plan_local(pose: &Pose2D, current: &VelocityCommand, path: &[Pose2D], cm: &Costmap, params: &DwaParams, speed_cap: f64) -> DwaDecision {
    let vmax = params.limits.max_v.min(speed_cap.max(0.0));
    let v_lo = (current.v - params.acc_v * params.period).max(0.0);
    let v_hi = (current.v + params.acc_v * params.period).min(vmax);
    let vs = linspace(v_lo.min(v_hi), v_hi, params.v_samples);
    let ws = omega_samples(current.omega, params);
    let target = if path.is_empty() { *pose } else { carrot(path, pose, params.lookahead) };

    let mut best: Option<(f64, VelocityCommand)> = None;
    for &v in &vs {
        for &w in &ws {
            let cmd = VelocityCommand::new(v, w);
            let traj = rollout(pose, &cmd, params);
            let mut min_clear = f64::INFINITY;
            let mut ok = true;
            for p in &traj {
                let c = cm.world_to_cell(p.x, p.y);
                if !cm.is_traversable(c) {
                    ok = false;
                    break;
                }
                min_clear = min_clear.min(cm.distance(c));
            }
            if !ok {
                continue;
            }
            let end = traj[traj.len() - 1];
            let path_d = path.iter().map(|q| (q.x - end.x).hypot(q.y - end.y)).fold(f64::INFINITY, f64::min);
            let path_term = if path.is_empty() { 0.0 } else { 1.0 - (path_d / params.path_scale).min(1.0) };
            let bearing = (target.y - end.y).atan2(target.x - end.x);
            let goal_term = 1.0 - angle_diff(bearing, end.theta).abs() / std::f64::consts::PI;
            let clear_term = min_clear.min(params.clearance_cap) / params.clearance_cap;
            let vel_term = if params.limits.max_v > 0.0 { v / params.limits.max_v } else { 0.0 };
            let score = params.w_path * path_term + params.w_goal * goal_term + params.w_clearance * clear_term + params.w_velocity * vel_term;
            let better = match best {
                None => true,
                Some((s, b)) => {
                    score > s
                        || (score == s
                            && (w.abs() < b.omega.abs() || (w.abs() == b.omega.abs() && (v > b.v || (v == b.v && w > b.omega)))))
                }
            };
            if better {
                best = Some((score, cmd));
            }
        }
    }
    match best {
        Some((score, command)) => DwaDecision {
            command,
            fallback: false,
            score,
        },
        None => {
            let bearing = (target.y - pose.y).atan2(target.x - pose.x);
            let dir = if angle_diff(bearing, pose.theta) >= 0.0 { 1.0 } else { -1.0 };
            let reach = params.acc_omega * params.period;
            let w = (dir * params.fallback_omega)
                .clamp(current.omega - reach, current.omega + reach)
                .clamp(-params.limits.max_omega, params.limits.max_omega);
            DwaDecision {
                command: VelocityCommand::new(0.0, w),
                fallback: true,
                score: f64::NEG_INFINITY,
            }
        }
    }
}
