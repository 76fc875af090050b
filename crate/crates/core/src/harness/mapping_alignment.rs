//! Builds the same map with and without the VLP origin constraint and
//! measures where each exported frame really sits in the LED frame.

use serde::Serialize;

use crate::error::Result;
use crate::geometry::Pose2D;
use crate::grid::{CellState, OccupancyGrid, TrinaryMap};
use crate::harness::config::Experiment;
use crate::harness::report::Check;
use crate::mapping::{binarize, build_map, MapAnchor, MapperConfig};
use crate::sim::log::SensorLog;
use crate::sim::scenario::{run_scenario, Motion, ScenarioScript};
use crate::sim::world::WorldModel;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MappingRun {
    pub constraint: bool,
    pub anchored: bool,
    /// Start-frame to exported-frame transform.
    pub anchor: Pose2D,
    /// True pose of the exported frame's origin in the LED frame.
    pub exported_origin: Pose2D,
    /// Distance of that origin from the LED-map origin.
    pub origin_offset: f64,
    /// Occupied-cell IoU against ground truth, reading map coordinates as LED coordinates.
    pub iou: f64,
    pub scans: usize,
    #[serde(skip)]
    pub grid: OccupancyGrid,
    #[serde(skip)]
    pub map: TrinaryMap,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MappingReport {
    pub seed: u64,
    pub start: Pose2D,
    pub start_distance: f64,
    pub constrained: MappingRun,
    pub unconstrained: MappingRun,
    pub checks: Vec<Check>,
}

impl MappingReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Rectangle east, north, west, south from the start, turning left in place.
pub fn mapping_script(start: Pose2D, length: f64, width: f64, speed: f64) -> ScenarioScript {
    let turn = Motion::Rotate {
        angle: std::f64::consts::FRAC_PI_2,
        rate: 0.5,
    };
    let go = |d: f64| Motion::Straight { distance: d, speed };
    ScenarioScript::new("mapping", start, vec![go(length), turn, go(width), turn, go(length), turn, go(width), turn])
}

/// Occupied-cell IoU over the cells the built map knows.
pub fn map_iou(map: &TrinaryMap, world: &WorldModel) -> f64 {
    let g = map.to_grid();
    let (mut inter, mut union) = (0usize, 0usize);
    for (i, &s) in map.cells.iter().enumerate() {
        if s == CellState::Unknown {
            continue;
        }
        let (x, y) = g.cell_center(g.cell_of_index(i));
        let truth = world.bounds.contains(x, y) && world.grid.is_occupied(world.grid.world_to_cell(x, y));
        let built = s == CellState::Occupied;
        inter += (built && truth) as usize;
        union += (built || truth) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn one_run(exp: &Experiment, log: &SensorLog, constraint: bool) -> Result<MappingRun> {
    let p = &exp.config.mapping;
    let sim = exp.sim();
    let mut cfg: MapperConfig = exp.config.mapper;
    cfg.vlp_constraint = constraint;
    cfg.initial_heading = p.start.theta;
    cfg.camera = sim.camera;
    cfg.vlp.camera_height = sim.camera_height;
    let built = build_map(log, &exp.world.led_map, &cfg)?;
    let MapAnchor { transform, anchored } = built.anchor;
    let exported_origin = p.start.compose(&transform.inverse());
    let map = binarize(&built.grid, p.occupied_threshold, p.free_threshold)?;
    Ok(MappingRun {
        constraint,
        anchored,
        anchor: transform,
        exported_origin,
        origin_offset: exported_origin.x.hypot(exported_origin.y),
        iou: map_iou(&map, &exp.world),
        scans: built.poses.len(),
        grid: built.grid,
        map,
    })
}

/// Single deterministic run on the first seed.
pub fn run_mapping_alignment(exp: &Experiment) -> Result<MappingReport> {
    let p = &exp.config.mapping;
    let seed = exp.config.seeds[0];
    let script = mapping_script(p.start, p.length, p.width, p.speed);
    let log = run_scenario(&exp.world, &exp.sim(), &script, seed)?;
    let constrained = one_run(exp, &log, true)?;
    let unconstrained = one_run(exp, &log, false)?;
    let start_distance = p.start.x.hypot(p.start.y);
    let tol = p.tolerance;
    let checks = vec![
        Check::new(
            "constraint-on-origin",
            constrained.anchored && constrained.origin_offset < tol,
            format!("offset {:.4} m < {tol} m", constrained.origin_offset),
        ),
        Check::new(
            "constraint-off-origin",
            (unconstrained.origin_offset - start_distance).abs() <= tol,
            format!("offset {:.4} m vs |B| = {start_distance:.4} m", unconstrained.origin_offset),
        ),
    ];
    Ok(MappingReport {
        seed,
        start: p.start,
        start_distance,
        constrained,
        unconstrained,
        checks,
    })
}
