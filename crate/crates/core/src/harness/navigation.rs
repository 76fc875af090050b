//! Full-stack goal navigation over a set of seeded lab scenarios.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::fusion::LocalizationStack;
use crate::geometry::Pose2D;
use crate::harness::config::{Experiment, NavScenario};
use crate::harness::render::{Raster, GREEN, ORANGE, RED};
use crate::harness::replay::Prior;
use crate::harness::report::Check;
use crate::mapping::binarize;
use crate::nav::{navigate, reference_length, NavOutcome, NavStatus};
use crate::sim::scenario::{ScenarioScript, Simulator};

const STREAM_PRIOR: u64 = 30;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NavRun {
    pub name: String,
    pub seed: u64,
    pub dynamic: bool,
    pub status: NavStatus,
    pub detail: String,
    pub duration: f64,
    pub executed_length: f64,
    pub reference_length: f64,
    pub length_ratio: f64,
    pub replans: usize,
    pub fallback_ticks: usize,
    pub inadmissible_commands: usize,
    pub collisions: usize,
    pub footprint_violations: usize,
    pub min_clearance: f64,
    pub final_position_error: f64,
    pub final_heading_error: f64,
    pub psd_ok: bool,
    #[serde(skip)]
    pub outcome: NavOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NavigationReport {
    pub runs: Vec<NavRun>,
    pub checks: Vec<Check>,
}

impl NavigationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Per-scenario simulator seed: distinct for every (seed, scenario) pair.
pub fn scenario_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1000).wrapping_add(index as u64)
}

pub fn run_nav_scenario(exp: &Experiment, seed: u64, index: usize, sc: &NavScenario) -> Result<NavRun> {
    let p = &exp.config.navigation;
    let sub = scenario_seed(seed, index);
    let sim_cfg = exp.sim();
    let mut script = ScenarioScript::new(&sc.name, sc.start, vec![]);
    script.obstacles = sc.obstacles.clone();
    let mut sim = Simulator::new(&exp.world, sim_cfg, &script, sub)?;

    let (sxy, sth) = (exp.prior(p.prior_sigma_xy), exp.prior(p.prior_sigma_theta));
    let mut rng = ChaCha8Rng::seed_from_u64(sub);
    rng.set_stream(STREAM_PRIOR);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut n = || unit.sample(&mut rng);
    let s = sc.start;
    let prior = Prior {
        pose: Pose2D::new(s.x + sxy * n(), s.y + sxy * n(), s.theta + sth * n()),
        sigma_xy: sxy,
        sigma_theta: sth,
    };
    let mut stack = LocalizationStack::new(exp.likelihood_field()?, exp.world.led_map.clone(), sim_cfg.camera, exp.stack(), sub)?;
    stack.start(prior.init(), 0.0)?;
    let map = binarize(&exp.world.grid, 0.65, 0.35)?;
    let nav = &exp.config.nav;
    let outcome = navigate(&mut sim, &mut stack, &map, sc.goal, nav)?;
    let reference = reference_length(&map, &sc.start, &sc.goal, nav).unwrap_or(f64::NAN);
    Ok(NavRun {
        name: sc.name.clone(),
        seed: sub,
        dynamic: !sc.obstacles.is_empty(),
        status: outcome.status,
        detail: outcome.detail.clone(),
        duration: outcome.duration,
        executed_length: outcome.executed_length,
        reference_length: reference,
        length_ratio: outcome.executed_length / reference,
        replans: outcome.replans,
        fallback_ticks: outcome.fallback_ticks,
        inadmissible_commands: outcome.inadmissible_commands,
        collisions: outcome.collisions,
        footprint_violations: outcome.footprint_violations,
        min_clearance: outcome.min_clearance,
        final_position_error: outcome.final_position_error,
        final_heading_error: outcome.final_heading_error,
        psd_ok: stack.filter().covariance_always_psd(),
        outcome,
    })
}

pub fn nav_checks(exp: &Experiment, r: &NavRun) -> Vec<Check> {
    let nav = &exp.config.nav;
    let max_ratio = exp.config.navigation.max_length_ratio;
    let tag = format!("{}-s{}", r.name, r.seed);
    let mut checks = vec![
        Check::new(
            &format!("{tag}-success"),
            r.status == NavStatus::Success && r.final_position_error <= nav.goal_xy_tolerance && r.final_heading_error <= nav.goal_theta_tolerance,
            format!(
                "{:?}, true final error {:.4} m / {:.2}° {}",
                r.status,
                r.final_position_error,
                r.final_heading_error.to_degrees(),
                r.detail
            ),
        ),
        Check::new(
            &format!("{tag}-safe"),
            r.collisions == 0 && r.footprint_violations == 0,
            format!("{} collisions, {} footprint violations", r.collisions, r.footprint_violations),
        ),
        Check::new(
            &format!("{tag}-admissible"),
            r.inadmissible_commands == 0,
            format!("{} commands failed their forward check", r.inadmissible_commands),
        ),
        Check::new(
            &format!("{tag}-efficiency"),
            r.length_ratio <= max_ratio,
            format!("executed {:.3} m vs optimal {:.3} m (ratio {:.3})", r.executed_length, r.reference_length, r.length_ratio),
        ),
        Check::new(&format!("{tag}-psd"), r.psd_ok, "fused covariance stayed symmetric PSD"),
    ];
    if r.dynamic {
        checks.push(Check::new(&format!("{tag}-replanned"), r.replans > 0, format!("{} global replans", r.replans)));
    }
    checks
}

pub fn render_runs(exp: &Experiment, runs: &[NavRun]) -> Raster {
    let mut r = Raster::from_grid(&exp.world.grid);
    for run in runs {
        let truth: Vec<Pose2D> = run.outcome.ticks.iter().map(|t| t.truth).collect();
        r.polyline(&truth, if run.dynamic { ORANGE } else { GREEN });
        if let Some(last) = truth.last() {
            r.dot(last.x, last.y, RED);
        }
    }
    r
}

/// Every scenario for every seed, in parallel.
pub fn run_navigation(exp: &Experiment) -> Result<NavigationReport> {
    let scenarios = &exp.config.navigation.scenarios;
    let jobs: Vec<(u64, usize)> = exp
        .config
        .seeds
        .iter()
        .flat_map(|&s| (0..scenarios.len()).map(move |i| (s, i)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(s, i)| run_nav_scenario(exp, s, i, &scenarios[i]))
        .collect::<Result<Vec<_>>>()?;
    let checks = runs.iter().flat_map(|r| nav_checks(exp, r)).collect();
    Ok(NavigationReport { runs, checks })
}
