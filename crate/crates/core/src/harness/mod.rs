//! Experiment harness: config loading, scenario runners and report emission.
//!
//! Every runner is a pure function of the prepared experiment and its seeds;
//! only the timing files depend on the wall clock.

pub mod config;
pub mod mapping_alignment;
pub mod navigation;
pub mod recovery;
pub mod render;
pub mod replay;
pub mod report;
pub mod static_accuracy;
pub mod trajectory;

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::map_io::{save_map, AnchorRecord};
use crate::sim::log::SensorLog;
use crate::sim::scenario::run_scenario;

pub use config::{Estimator, Experiment, ExperimentConfig, OutputFormats, ScenarioKind};
pub use mapping_alignment::{run_mapping_alignment, MappingReport};
pub use navigation::{run_navigation, NavigationReport};
pub use recovery::{run_recovery, RecoveryReport};
pub use report::{Check, Emitted, ErrorReport};
pub use static_accuracy::run_static_accuracy;
pub use trajectory::{run_trajectory, TrajectoryRun};

use render::Raster;
use report::{csv_file, emit_error_report, text_file};

/// One simulated log per seed.
#[derive(Debug, Clone)]
pub struct SimulateReport {
    pub logs: Vec<(u64, SensorLog)>,
}

#[derive(Debug, Clone)]
pub enum ScenarioReport {
    Simulate(SimulateReport),
    Errors(ErrorReport, Vec<Raster>),
    Mapping(Box<MappingReport>),
    Recovery(RecoveryReport),
    Navigation(NavigationReport, Raster),
}

impl ScenarioReport {
    pub fn checks(&self) -> &[Check] {
        match self {
            ScenarioReport::Simulate(_) => &[],
            ScenarioReport::Errors(r, _) => &r.checks,
            ScenarioReport::Mapping(r) => &r.checks,
            ScenarioReport::Recovery(r) => &r.checks,
            ScenarioReport::Navigation(r, _) => &r.checks,
        }
    }

    pub fn passed(&self) -> bool {
        self.checks().iter().all(|c| c.passed)
    }
}

/// Logs the trajectory loop for every seed; the raw material for offline replay.
pub fn run_simulate(exp: &Experiment) -> Result<SimulateReport> {
    let script = trajectory::loop_script(&exp.config.trajectory);
    let logs = exp
        .config
        .seeds
        .iter()
        .map(|&s| Ok((s, run_scenario(&exp.world, &exp.sim(), &script, s)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimulateReport { logs })
}

/// Runs the configured scenario.
pub fn run(exp: &Experiment) -> Result<ScenarioReport> {
    Ok(match exp.config.scenario {
        ScenarioKind::Simulate => ScenarioReport::Simulate(run_simulate(exp)?),
        ScenarioKind::Map => ScenarioReport::Mapping(Box::new(run_mapping_alignment(exp)?)),
        ScenarioKind::StaticAccuracy => ScenarioReport::Errors(run_static_accuracy(exp)?, vec![]),
        ScenarioKind::Trajectory => {
            let (report, runs) = run_trajectory(exp)?;
            let images = runs.iter().map(|r| trajectory::render_run(exp, r)).collect();
            ScenarioReport::Errors(report, images)
        }
        ScenarioKind::Recovery => ScenarioReport::Recovery(run_recovery(exp)?),
        ScenarioKind::Navigate => {
            let report = run_navigation(exp)?;
            let image = navigation::render_runs(exp, &report.runs);
            ScenarioReport::Navigation(report, image)
        }
    })
}

fn json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    text_file(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

#[derive(Serialize)]
struct RecoveryRow<'a> {
    variant: &'a str,
    seed: u64,
    t: f64,
    position_error: f64,
    heading_error: f64,
}

#[derive(Serialize)]
struct NavRow<'a> {
    name: &'a str,
    seed: u64,
    dynamic: bool,
    status: String,
    duration: f64,
    executed_length: f64,
    reference_length: f64,
    length_ratio: f64,
    replans: usize,
    collisions: usize,
    footprint_violations: usize,
    inadmissible_commands: usize,
    min_clearance: f64,
    final_position_error: f64,
    final_heading_error: f64,
}

/// Writes every artifact of `report` under `dir`, honoring `formats`.
pub fn emit_reports(exp: &Experiment, report: &ScenarioReport, dir: &Path) -> Result<Emitted> {
    let formats = &exp.config.formats;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Emitted::default();
    match report {
        ScenarioReport::Simulate(r) => {
            out.files.push(exp.world.save(&dir.join("world"))?);
            for (seed, log) in &r.logs {
                let p = dir.join(format!("log_s{seed}.ndjson"));
                log.save(&p)?;
                out.files.push(p);
            }
        }
        ScenarioReport::Errors(r, images) => {
            out = emit_error_report(r, formats, dir)?;
            if formats.images {
                for (seed, img) in r.seeds.iter().zip(images) {
                    let p = dir.join(format!("trajectory_s{seed}.ppm"));
                    img.save(&p)?;
                    out.files.push(p);
                }
            }
        }
        ScenarioReport::Mapping(r) => {
            if formats.json {
                let p = dir.join("summary.json");
                json_file(&p, r)?;
                out.files.push(p);
            }
            let p = &exp.config.mapping;
            for (stem, run) in [("map_constrained", &r.constrained), ("map_unconstrained", &r.unconstrained)] {
                let yaml = dir.join(format!("{stem}.yaml"));
                let anchor = AnchorRecord {
                    anchored: run.anchored,
                    transform: [run.anchor.x, run.anchor.y, run.anchor.theta],
                };
                save_map(&yaml, &run.map, p.occupied_threshold, p.free_threshold, Some(anchor))?;
                out.files.push(yaml.with_extension("pgm"));
                out.files.push(yaml);
            }
        }
        ScenarioReport::Recovery(r) => {
            if formats.json {
                let p = dir.join("summary.json");
                json_file(&p, r)?;
                out.files.push(p);
            }
            if formats.csv {
                let p = dir.join("recovery.csv");
                csv_file(
                    &p,
                    r.runs.iter().flat_map(|run| {
                        run.series.iter().map(move |x| RecoveryRow {
                            variant: run.variant.name(),
                            seed: run.seed,
                            t: x.t,
                            position_error: x.position_error,
                            heading_error: x.heading_error,
                        })
                    }),
                )?;
                out.files.push(p);
            }
        }
        ScenarioReport::Navigation(r, image) => {
            if formats.json {
                let p = dir.join("summary.json");
                json_file(&p, r)?;
                out.files.push(p);
                for run in &r.runs {
                    let p = dir.join(format!("nav_{}_s{}.ndjson", run.name, run.seed));
                    let file = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
                    let mut w = std::io::BufWriter::new(file);
                    run.outcome.write_ndjson(&mut w)?;
                    std::io::Write::flush(&mut w).map_err(|e| Error::io(&p, e))?;
                    out.files.push(p);
                }
            }
            if formats.csv {
                let p = dir.join("runs.csv");
                csv_file(
                    &p,
                    r.runs.iter().map(|x| NavRow {
                        name: &x.name,
                        seed: x.seed,
                        dynamic: x.dynamic,
                        status: format!("{:?}", x.status),
                        duration: x.duration,
                        executed_length: x.executed_length,
                        reference_length: x.reference_length,
                        length_ratio: x.length_ratio,
                        replans: x.replans,
                        collisions: x.collisions,
                        footprint_violations: x.footprint_violations,
                        inadmissible_commands: x.inadmissible_commands,
                        min_clearance: x.min_clearance,
                        final_position_error: x.final_position_error,
                        final_heading_error: x.final_heading_error,
                    }),
                )?;
                out.files.push(p);
            }
            if formats.images {
                let p = dir.join("navigation.ppm");
                image.save(&p)?;
                out.files.push(p);
            }
        }
    }
    Ok(out)
}
