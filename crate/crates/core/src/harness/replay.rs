//! One recorded log replayed through every selected estimator.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::fusion::{FusionSnapshot, LocalizationStack, MclOnly, OdometryOnly, SloVlpOnly, StackConfig, StackInit};
use crate::geometry::{angle_diff, Pose2D};
use crate::harness::config::{Estimator, Experiment};
use crate::harness::report::{Counters, CycleKind, ErrorSample, TimingSample};
use crate::mcl::LikelihoodField;
use crate::sim::log::{SensorData, SensorLog};

/// Variances below this are lifted so a zero prior still gives a proper Gaussian.
const MIN_SIGMA: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prior {
    pub pose: Pose2D,
    pub sigma_xy: f64,
    pub sigma_theta: f64,
}

impl Prior {
    pub fn covariance(&self) -> Matrix3<f64> {
        let (s, t) = (self.sigma_xy.max(MIN_SIGMA), self.sigma_theta.max(MIN_SIGMA));
        Matrix3::from_diagonal(&Vector3::new(s * s, s * s, t * t))
    }

    pub fn init(&self) -> StackInit {
        StackInit::Pose {
            pose: self.pose,
            sigma_xy: self.sigma_xy.max(MIN_SIGMA),
            sigma_theta: self.sigma_theta.max(MIN_SIGMA),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ReplaySetup {
    /// Prior for the fused stack and MCL-only.
    pub prior: Prior,
    /// External heading given to SLO-VLP-only.
    pub slo_heading: f64,
    pub stack: StackConfig,
    /// Seed for the estimators' own randomness (particle filters).
    pub seed: u64,
    /// Estimators to run.
    pub fused: bool,
    pub slo_vlp: bool,
    pub mcl: bool,
    pub odometry: bool,
}

impl ReplaySetup {
    pub fn new(exp: &Experiment, prior: Prior, slo_heading: f64, seed: u64) -> Self {
        Self {
            prior,
            slo_heading,
            stack: exp.stack(),
            seed,
            fused: exp.has(Estimator::Fused),
            slo_vlp: exp.has(Estimator::SloVlp),
            mcl: exp.has(Estimator::Mcl),
            odometry: exp.has(Estimator::Odometry),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReplayOutput {
    /// Fused: one sample per odometry event. Others: one per output.
    pub series: BTreeMap<Estimator, Vec<ErrorSample>>,
    pub timing: Vec<TimingSample>,
    pub counters: Counters,
    /// Fused estimate after the last event, fully committed.
    pub final_fused: Option<FusionSnapshot>,
    pub psd_ok: bool,
    pub first_fix: Option<f64>,
    pub reinit_stamps: Vec<f64>,
    pub fused_track: Vec<Pose2D>,
}

fn sample(seed: u64, t: f64, est: &Pose2D, truth: &Pose2D) -> ErrorSample {
    ErrorSample {
        seed,
        index: 0,
        t,
        position_error: (est.x - truth.x).hypot(est.y - truth.y),
        heading_error: angle_diff(truth.theta, est.theta).abs(),
    }
}

fn truth(log: &SensorLog, t: f64) -> Result<Pose2D> {
    log.truth_at(t)
        .ok_or_else(|| Error::InvalidArgument(format!("log has no ground truth at t={t}")))
}

/// Replays `log` through the estimators selected in `setup`. `seed` labels the samples.
pub fn replay(log: &SensorLog, exp: &Experiment, field: &Arc<LikelihoodField>, setup: &ReplaySetup, label_seed: u64) -> Result<ReplayOutput> {
    let world = &exp.world;
    let camera = exp.sim().camera;
    let t0 = log.events.first().ok_or(Error::EmptyLog)?.stamp;
    let mut out = ReplayOutput {
        psd_ok: true,
        ..Default::default()
    };

    let mut fused = if setup.fused {
        let mut s = LocalizationStack::new(field.clone(), world.led_map.clone(), camera, setup.stack, setup.seed)?;
        s.start(setup.prior.init(), t0)?;
        Some(s)
    } else {
        None
    };
    let mut slo = setup
        .slo_vlp
        .then(|| SloVlpOnly::new(world.led_map.clone(), camera, setup.stack.vlp, setup.slo_heading));
    let mut mcl = if setup.mcl {
        let seed = setup.seed ^ 0x5eed_5eed;
        Some(MclOnly::new(field.clone(), setup.stack.mcl, seed, &setup.prior.pose, &setup.prior.covariance(), t0)?)
    } else {
        None
    };
    let mut odo = setup.odometry.then(|| OdometryOnly::new(setup.prior.pose));

    let mut fs = Vec::new();
    let mut ss = Vec::new();
    let mut ms = Vec::new();
    let mut os = Vec::new();
    for e in &log.events {
        if matches!(e.data, SensorData::GroundTruth(_)) {
            continue;
        }
        if let Some(stack) = &mut fused {
            let clock = Instant::now();
            let r = stack.process(e)?;
            let micros = clock.elapsed().as_secs_f64() * 1e6;
            let kind = if r.fix.is_some() || r.mcl.is_some() { CycleKind::Update } else { CycleKind::Predict };
            out.timing.push(TimingSample {
                seed: label_seed,
                t: e.stamp,
                kind,
                micros,
            });
            if let Some(f) = r.fix {
                out.first_fix.get_or_insert(f.stamp);
            }
            if r.reinitialized {
                out.reinit_stamps.push(e.stamp);
            }
            if let SensorData::Odometry(_) = &e.data {
                // Heading-only starts have no estimate until the first fix.
                if let Ok(snap) = stack.estimate() {
                    let est = snap.estimate;
                    fs.push(sample(label_seed, est.stamp, &est.mean, &truth(log, est.stamp)?));
                    out.fused_track.push(est.mean);
                }
            }
        }
        if let Some(s) = &mut slo {
            if let Some(fix) = s.process(e) {
                let t = truth(log, fix.stamp)?;
                ss.push(sample(label_seed, fix.stamp, &Pose2D::new(fix.x, fix.y, fix.heading_used), &t));
            }
        }
        if let Some(m) = &mut mcl {
            if let Some(est) = m.process(e)? {
                ms.push(sample(label_seed, est.stamp, &est.mean, &truth(log, est.stamp)?));
            }
        }
        if let Some(o) = &mut odo {
            if let Some((t, p)) = o.process(e) {
                os.push(sample(label_seed, t, &p, &truth(log, t)?));
            }
        }
    }

    if let Some(stack) = &mut fused {
        out.final_fused = stack.flush().ok();
        let c = stack.counters();
        let f = stack.filter().counters();
        out.counters = Counters {
            fixes: c.fixes,
            fix_failures: c.fix_failures,
            rejected_fixes: f.vlp_rejected,
            rejected_mcl: f.mcl_rejected,
            dropped_measurements: f.dropped_stale,
            reinitializations: c.reinitializations,
            led_outages: Vec::new(),
        };
        out.psd_ok = stack.filter().covariance_always_psd();
        out.series.insert(Estimator::Fused, fs);
    }
    if slo.is_some() {
        out.series.insert(Estimator::SloVlp, ss);
    }
    if mcl.is_some() {
        out.series.insert(Estimator::Mcl, ms);
    }
    if odo.is_some() {
        out.series.insert(Estimator::Odometry, os);
    }
    Ok(out)
}
