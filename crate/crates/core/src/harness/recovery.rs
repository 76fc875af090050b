//! Wrong-corridor initialization and recovery through VLP.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::geometry::Pose2D;
use crate::harness::config::{Estimator, Experiment};
use crate::harness::replay::{replay, Prior, ReplaySetup};
use crate::harness::report::{Check, ErrorSample};
use crate::sim::scenario::{run_scenario, Motion, ScenarioScript};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecoveryVariant {
    /// Wrong prior, VLP on.
    WrongWithVlp,
    /// Wrong prior, VLP off.
    WrongWithoutVlp,
    /// Correct prior, VLP on.
    Correct,
}

impl RecoveryVariant {
    pub const ALL: [RecoveryVariant; 3] = [RecoveryVariant::WrongWithVlp, RecoveryVariant::WrongWithoutVlp, RecoveryVariant::Correct];

    pub fn name(&self) -> &'static str {
        match self {
            RecoveryVariant::WrongWithVlp => "wrong-with-vlp",
            RecoveryVariant::WrongWithoutVlp => "wrong-without-vlp",
            RecoveryVariant::Correct => "correct",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryRun {
    pub variant: RecoveryVariant,
    pub seed: u64,
    pub first_fix: Option<f64>,
    /// First time at or after the first fix with error below the threshold.
    pub recovered_at: Option<f64>,
    pub recovery_time: Option<f64>,
    pub reinitializations: usize,
    pub reinit_stamps: Vec<f64>,
    pub min_error: f64,
    pub max_error: f64,
    pub final_error: f64,
    pub psd_ok: bool,
    #[serde(skip)]
    pub series: Vec<ErrorSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryReport {
    pub runs: Vec<RecoveryRun>,
    pub checks: Vec<Check>,
}

impl RecoveryReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn recovery_script(start: Pose2D, distance: f64, speed: f64) -> ScenarioScript {
    ScenarioScript::new("recovery", start, vec![Motion::Straight { distance, speed }])
}

pub fn run_recovery_variant(exp: &Experiment, seed: u64, variant: RecoveryVariant) -> Result<RecoveryRun> {
    let p = &exp.config.recovery;
    let log = run_scenario(&exp.world, &exp.sim(), &recovery_script(p.start, p.distance, p.speed), seed)?;
    let s = p.start;
    let pose = match variant {
        RecoveryVariant::Correct => s,
        _ => Pose2D::new(s.x + p.wrong_offset[0], s.y + p.wrong_offset[1], s.theta),
    };
    let prior = Prior {
        pose,
        sigma_xy: exp.prior(p.prior_sigma_xy),
        sigma_theta: exp.prior(p.prior_sigma_theta),
    };
    let mut setup = ReplaySetup::new(exp, prior, s.theta, seed);
    setup.stack.use_vlp = variant != RecoveryVariant::WrongWithoutVlp;
    (setup.slo_vlp, setup.mcl, setup.odometry, setup.fused) = (false, false, false, true);
    let out = replay(&log, exp, &exp.likelihood_field()?, &setup, seed)?;
    let series = out.series.get(&Estimator::Fused).cloned().unwrap_or_default();
    let recovered_at = out
        .first_fix
        .and_then(|t0| series.iter().find(|x| x.t >= t0 && x.position_error < p.recovered_error).map(|x| x.t));
    let errs = series.iter().map(|x| x.position_error);
    Ok(RecoveryRun {
        variant,
        seed,
        first_fix: out.first_fix,
        recovered_at,
        recovery_time: recovered_at.zip(out.first_fix).map(|(r, f)| r - f),
        reinitializations: out.counters.reinitializations,
        reinit_stamps: out.reinit_stamps,
        min_error: errs.clone().fold(f64::INFINITY, f64::min),
        max_error: errs.fold(0.0, f64::max),
        final_error: series.last().map_or(f64::NAN, |x| x.position_error),
        psd_ok: out.psd_ok,
        series,
    })
}

pub fn recovery_checks(exp: &Experiment, run: &RecoveryRun) -> Vec<Check> {
    let p = &exp.config.recovery;
    let tag = format!("s{}-{}", run.seed, run.variant.name());
    match run.variant {
        RecoveryVariant::WrongWithVlp => vec![
            Check::new(
                &format!("{tag}-recovers"),
                run.recovery_time.is_some_and(|t| t <= p.recovery_window),
                format!("recovery {:?} s after first fix at {:?} s (limit {} s)", run.recovery_time, run.first_fix, p.recovery_window),
            ),
            Check::new(&format!("{tag}-reinit"), run.reinitializations > 0, format!("{} re-initializations", run.reinitializations)),
        ],
        RecoveryVariant::WrongWithoutVlp => vec![Check::new(
            &format!("{tag}-stays-lost"),
            run.min_error > p.lost_error,
            format!("smallest error {:.3} m > {} m", run.min_error, p.lost_error),
        )],
        RecoveryVariant::Correct => vec![
            Check::new(&format!("{tag}-no-reinit"), run.reinitializations == 0, format!("{} re-initializations", run.reinitializations)),
            Check::new(
                &format!("{tag}-bounded"),
                run.max_error <= p.recovered_error,
                format!("largest error {:.4} m ≤ {} m", run.max_error, p.recovered_error),
            ),
        ],
    }
}

/// All three variants for every seed.
pub fn run_recovery(exp: &Experiment) -> Result<RecoveryReport> {
    let jobs: Vec<(u64, RecoveryVariant)> = exp
        .config
        .seeds
        .iter()
        .flat_map(|&s| RecoveryVariant::ALL.map(|v| (s, v)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(s, v)| run_recovery_variant(exp, s, v))
        .collect::<Result<Vec<_>>>()?;
    let checks = runs.iter().flat_map(|r| recovery_checks(exp, r)).collect();
    Ok(RecoveryReport { runs, checks })
}
