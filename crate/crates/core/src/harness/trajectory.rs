//! Moving-robot accuracy on a closed loop with LED outage zones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::Result;
use crate::geometry::Pose2D;
use crate::harness::config::{Estimator, Experiment, TrajectoryParams};
use crate::harness::render::{Raster, BLUE, GREEN, RED};
use crate::harness::replay::{replay, Prior, ReplayOutput, ReplaySetup};
use crate::harness::report::{Check, ErrorReport, ErrorSample};
use crate::sim::log::{SensorData, SensorLog};
use crate::sim::scenario::{run_scenario, Motion, ScenarioScript, TimeWindow};

const STREAM_PRIOR: u64 = 20;

/// Counter-clockwise rounded rectangle, `laps` times, from `start`.
pub fn loop_script(p: &TrajectoryParams) -> ScenarioScript {
    let quarter = Motion::Arc {
        radius: p.corner_radius,
        angle: std::f64::consts::FRAC_PI_2,
        speed: p.speed,
    };
    let side = |d: f64| Motion::Straight { distance: d, speed: p.speed };
    let mut motions = Vec::new();
    for _ in 0..p.laps {
        for d in [p.length, p.width, p.length, p.width] {
            motions.push(side(d));
            motions.push(quarter);
        }
    }
    let mut s = ScenarioScript::new("trajectory", p.start, motions);
    s.led_outages = p.led_outages.clone();
    s
}

/// Everything one seed produced.
#[derive(Debug, Clone)]
pub struct TrajectoryRun {
    pub seed: u64,
    pub log: SensorLog,
    pub output: ReplayOutput,
}

impl TrajectoryRun {
    pub fn odometry_events(&self) -> usize {
        self.log.odometry().count()
    }
}

/// Simulates one seed and replays it through every estimator.
pub fn run_trajectory_seed(exp: &Experiment, seed: u64) -> Result<TrajectoryRun> {
    let p = &exp.config.trajectory;
    let log = run_scenario(&exp.world, &exp.sim(), &loop_script(p), seed)?;
    let (sxy, sth) = (exp.prior(p.prior_sigma_xy), exp.prior(p.prior_sigma_theta));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_PRIOR);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut n = || unit.sample(&mut rng);
    let s = p.start;
    let prior = Prior {
        pose: Pose2D::new(s.x + sxy * n(), s.y + sxy * n(), s.theta + sth * n()),
        sigma_xy: sxy,
        sigma_theta: sth,
    };
    let setup = ReplaySetup::new(exp, prior, prior.pose.theta, seed);
    let field = exp.likelihood_field()?;
    let output = replay(&log, exp, &field, &setup, seed)?;
    Ok(TrajectoryRun { seed, log, output })
}

/// Largest spacing between consecutive samples whose interval touches `w`.
fn max_gap_in(samples: &[ErrorSample], w: &TimeWindow) -> f64 {
    samples
        .windows(2)
        .filter(|p| p[1].t >= w.start && p[0].t <= w.end)
        .map(|p| p[1].t - p[0].t)
        .fold(0.0, f64::max)
}

/// Checks the outage and bookkeeping properties of one run.
pub fn trajectory_checks(exp: &Experiment, run: &TrajectoryRun) -> Vec<Check> {
    let p = &exp.config.trajectory;
    let odom_period = 1.0 / exp.sim().odometry_rate;
    let mut checks = Vec::new();
    let s = run.seed;
    if let Some(fused) = run.output.series.get(&Estimator::Fused) {
        let n = run.odometry_events();
        checks.push(Check::new(
            &format!("s{s}-fused-length"),
            fused.len() == n,
            format!("{} fused samples for {n} odometry events", fused.len()),
        ));
        checks.push(Check::new(&format!("s{s}-psd"), run.output.psd_ok, "fused covariance stayed symmetric PSD"));
    }
    for w in &p.led_outages {
        let tag = format!("s{s}-outage-{:.0}-{:.0}", w.start, w.end);
        if let Some(fused) = run.output.series.get(&Estimator::Fused) {
            let inside: Vec<&ErrorSample> = fused.iter().filter(|x| w.contains(x.t)).collect();
            let max_err = inside.iter().map(|x| x.position_error).fold(0.0, f64::max);
            let gap = max_gap_in(fused, w);
            checks.push(Check::new(
                &format!("{tag}-fused-continuous"),
                !inside.is_empty() && gap <= odom_period * 1.5,
                format!("{} samples, largest gap {gap:.4} s", inside.len()),
            ));
            checks.push(Check::new(
                &format!("{tag}-fused-error"),
                max_err <= p.outage_max_error,
                format!("max fused error {max_err:.4} m ≤ {} m", p.outage_max_error),
            ));
        }
        if let Some(slo) = run.output.series.get(&Estimator::SloVlp) {
            let inside = slo.iter().filter(|x| w.contains(x.t)).count();
            checks.push(Check::new(&format!("{tag}-slo-vlp-gap"), inside == 0, format!("{inside} SLO-VLP fixes inside the zone")));
        }
    }
    checks
}

pub fn render_run(exp: &Experiment, run: &TrajectoryRun) -> Raster {
    let mut r = Raster::from_grid(&exp.world.grid);
    let truth: Vec<Pose2D> = run.log.ground_truth().map(|(_, p)| p).collect();
    r.polyline(&truth, GREEN);
    r.polyline(&run.output.fused_track, RED);
    for e in &run.log.events {
        if let SensorData::Camera(obs) = &e.data {
            if !obs.is_empty() {
                if let Some(t) = run.log.truth_at(e.stamp) {
                    r.dot(t.x, t.y, BLUE);
                }
            }
        }
    }
    r
}

/// Runs every seed in parallel and merges the series.
pub fn run_trajectory(exp: &Experiment) -> Result<(ErrorReport, Vec<TrajectoryRun>)> {
    let runs: Vec<TrajectoryRun> = exp
        .config
        .seeds
        .par_iter()
        .map(|&s| run_trajectory_seed(exp, s))
        .collect::<Result<Vec<_>>>()?;
    let mut report = ErrorReport::new("trajectory", &exp.config.seeds);
    for run in &runs {
        for (e, s) in &run.output.series {
            report.series.entry(*e).or_default().extend_from_slice(s);
        }
        report.timing.extend_from_slice(&run.output.timing);
        report.counters.add(&run.output.counters);
        report.checks.extend(trajectory_checks(exp, run));
    }
    report.counters.led_outages = exp.config.trajectory.led_outages.clone();
    if let Some(run) = runs.first() {
        report.extra.insert("duration".into(), run.log.duration());
        report.extra.insert("path_length".into(), loop_script(&exp.config.trajectory).path_length());
    }
    Ok((report, runs))
}
