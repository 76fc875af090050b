//! Stationary accuracy: many random poses, a short log at each, final errors compared.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{angle_diff, normalize_angle, Pose2D};
use crate::harness::config::{Estimator, Experiment};
use crate::harness::replay::{replay, Prior, ReplaySetup};
use crate::harness::report::{Check, Counters, ErrorReport, ErrorSample};
use crate::mcl::LikelihoodField;
use crate::sim::scenario::{run_scenario, Motion, ScenarioScript};
use crate::sim::sensors::project_led;

const STREAM_POSES: u64 = 10;

/// One sampled site: where the robot stands, what each estimator is told, and its log seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticSite {
    pub truth: Pose2D,
    pub prior: Pose2D,
    pub slo_heading: f64,
    pub seed: u64,
}

/// True when some LED projects into the image large enough to solve.
pub fn in_led_coverage(exp: &Experiment, pose: &Pose2D) -> bool {
    let sim = exp.sim();
    let min_px = exp.stack().vlp.min_diameter_px;
    exp.world.led_map.iter().any(|led| {
        project_led(pose, sim.camera_height, led, &sim.camera).is_some_and(|(u, v, d)| sim.camera.in_image(u, v) && d >= min_px)
    })
}

/// Uniform poses over free space inside LED coverage, with the priors each estimator receives.
pub fn sample_sites(exp: &Experiment, seed: u64) -> Result<Vec<StaticSite>> {
    let p = &exp.config.static_accuracy;
    let b = exp.world.bounds;
    let radius = exp.config.sim.robot_radius + p.clearance;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_POSES);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let (sxy, sth, shd) = (exp.prior(p.prior_sigma_xy), exp.prior(p.prior_sigma_theta), exp.prior(p.heading_sigma));
    let mut sites = Vec::with_capacity(p.poses);
    for i in 0..p.poses {
        let mut found = None;
        for _ in 0..p.max_attempts {
            let pose = Pose2D::new(
                rng.random_range(b.min_x..b.max_x),
                rng.random_range(b.min_y..b.max_y),
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            );
            if exp.world.is_free(pose.x, pose.y, radius) && in_led_coverage(exp, &pose) {
                found = Some(pose);
                break;
            }
        }
        let Some(truth) = found else {
            return Err(Error::Config(format!(
                "pose {i}: no free pose inside LED coverage after {} attempts",
                p.max_attempts
            )));
        };
        let mut n = || unit.sample(&mut rng);
        let prior = Pose2D::new(truth.x + sxy * n(), truth.y + sxy * n(), truth.theta + sth * n());
        let slo_heading = normalize_angle(truth.theta + shd * n());
        sites.push(StaticSite {
            truth,
            prior,
            slo_heading,
            seed: rng.random(),
        });
    }
    Ok(sites)
}

#[derive(Debug, Clone)]
struct SiteResult {
    samples: Vec<(Estimator, ErrorSample)>,
    counters: Counters,
    psd_ok: bool,
}

fn run_site(exp: &Experiment, field: &Arc<LikelihoodField>, seed: u64, index: usize, site: &StaticSite) -> Result<SiteResult> {
    let p = &exp.config.static_accuracy;
    let script = ScenarioScript::new("static", site.truth, vec![Motion::Wait { duration: p.dwell }]);
    let log = run_scenario(&exp.world, &exp.sim(), &script, site.seed)?;
    let prior = Prior {
        pose: site.prior,
        sigma_xy: exp.prior(p.prior_sigma_xy),
        sigma_theta: exp.prior(p.prior_sigma_theta),
    };
    let setup = ReplaySetup::new(exp, prior, site.slo_heading, site.seed);
    let out = replay(&log, exp, field, &setup, seed)?;
    let end = log.duration();
    let final_sample = |est: &Pose2D| ErrorSample {
        seed,
        index,
        t: end,
        position_error: (est.x - site.truth.x).hypot(est.y - site.truth.y),
        heading_error: angle_diff(site.truth.theta, est.theta).abs(),
    };
    let mut samples = Vec::new();
    for (e, series) in &out.series {
        let s = match e {
            Estimator::Fused => out.final_fused.map(|f| final_sample(&f.estimate.mean)),
            _ => series.last().map(|s| ErrorSample { index, ..*s }),
        };
        if let Some(s) = s {
            samples.push((*e, s));
        }
    }
    Ok(SiteResult {
        samples,
        counters: out.counters,
        psd_ok: out.psd_ok,
    })
}

/// Runs every seed (in parallel) and compares the estimators' final errors.
pub fn run_static_accuracy(exp: &Experiment) -> Result<ErrorReport> {
    let field = &exp.likelihood_field()?;
    let seeds = &exp.config.seeds;
    let per_seed: Vec<Vec<SiteResult>> = seeds
        .par_iter()
        .map(|&seed| {
            let sites = sample_sites(exp, seed)?;
            sites
                .par_iter()
                .enumerate()
                .map(|(i, site)| run_site(exp, field, seed, i, site))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = ErrorReport::new("static-accuracy", seeds);
    for e in &exp.config.estimators {
        report.series.insert(*e, Vec::new());
    }
    let mut psd_ok = true;
    let mut sites = 0usize;
    for r in per_seed.iter().flatten() {
        sites += 1;
        psd_ok &= r.psd_ok;
        report.counters.add(&r.counters);
        for (e, s) in &r.samples {
            report.series.get_mut(e).expect("selected estimator").push(*s);
        }
    }
    report.extra.insert("sites".into(), sites as f64);
    for (e, s) in &report.series {
        report.extra.insert(format!("{}_missing", e.name()), (sites - s.len()) as f64);
    }

    let mean = |e| report.summary(e).map(|s| s.mean);
    let (fused, slo, mcl) = (mean(Estimator::Fused), mean(Estimator::SloVlp), mean(Estimator::Mcl));
    if let (Some(f), Some(v), Some(m)) = (fused, slo, mcl) {
        report.checks.push(Check::new(
            "ordering",
            f < v && v < m,
            format!("mean error fused {:.4} m, slo-vlp {:.4} m, mcl {:.4} m", f, v, m),
        ));
    }
    if let Some(f) = fused {
        report.checks.push(Check::new("fused-mean", f <= 0.05, format!("fused mean {f:.4} m ≤ 0.05 m")));
    }
    report.checks.push(Check::new("covariance-psd", psd_ok, "fused covariance stayed symmetric PSD"));
    Ok(report)
}
