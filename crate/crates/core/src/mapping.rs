//! Scan-matching log-odds mapper with single-shot anchoring to the LED map frame.
//!
//! The mapper starts in its own frame (start pose = identity). The first VLP fix
//! with enough quality fixes the rigid transform into the LED frame; from then
//! on poses and the grid origin are expressed in the LED frame. Cell values are
//! never touched by anchoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose2D;
use crate::grid::{CellState, OccupancyGrid, TrinaryMap, logistic};
use crate::mcl::{build_likelihood_field, LikelihoodField};
use crate::sim::log::{SensorData, SensorLog};
use crate::sim::sensors::{LidarScan, OdometryDelta, ENDPOINT_NUDGE};
use crate::vlp::{select_observation, solve_slo_vlp, CameraModel, LedFeatureMap, VlpConfig, VlpFix};

/// Rigid transform from the mapper-start frame into the LED frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MapAnchor {
    pub transform: Pose2D,
    pub anchored: bool,
}

/// Sets the anchor so that `mapper_pose_at_fix` lands on `(fix.x, fix.y, fused_heading)`.
pub fn anchor_origin(
    anchor: &MapAnchor,
    vlp_fix: &VlpFix,
    mapper_pose_at_fix: &Pose2D,
    fused_heading: f64,
    min_quality: f64,
) -> Result<MapAnchor> {
    if anchor.anchored {
        return Err(Error::AlreadyAnchored);
    }
    if vlp_fix.quality <= min_quality {
        return Err(Error::InvalidArgument(format!(
            "fix quality {:.3} does not exceed {min_quality}",
            vlp_fix.quality
        )));
    }
    let target = Pose2D::new(vlp_fix.x, vlp_fix.y, fused_heading);
    Ok(MapAnchor {
        transform: target.compose(&mapper_pose_at_fix.inverse()),
        anchored: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanMatchParams {
    pub initial_step_xy: f64,
    pub initial_step_theta: f64,
    pub halvings: u32,
    pub min_occupied_cells: usize,
    pub max_range: f64,
    pub beam_stride: usize,
    pub sigma: f64,
    pub max_iterations: usize,
}

impl Default for ScanMatchParams {
    fn default() -> Self {
        Self {
            initial_step_xy: 0.05,
            initial_step_theta: 0.5f64.to_radians(),
            halvings: 4,
            min_occupied_cells: 30,
            max_range: 3.5,
            beam_stride: 2,
            sigma: 0.05,
            max_iterations: 200,
        }
    }
}

/// Sum of field scores at the scan endpoints seen from `pose`.
pub fn scan_score(field: &LikelihoodField, scan: &LidarScan, pose: &Pose2D, stride: usize) -> f64 {
    let (s, c) = pose.theta.sin_cos();
    scan.endpoints(stride)
        .map(|(_, bx, by)| field.value_at(pose.x + c * bx - s * by, pose.y + s * bx + c * by))
        .sum()
}

fn occupied_near(grid: &OccupancyGrid, pose: &Pose2D, range: f64) -> usize {
    let (gx, gy) = grid.world_to_grid(pose.x, pose.y);
    let r = range / grid.resolution();
    let (x0, x1) = ((gx - r).floor().max(0.0) as usize, ((gx + r).ceil().max(0.0) as usize).min(grid.width()));
    let (y0, y1) = ((gy - r).floor().max(0.0) as usize, ((gy + r).ceil().max(0.0) as usize).min(grid.height()));
    let cells = grid.cells();
    let mut n = 0;
    for iy in y0..y1 {
        for ix in x0..x1 {
            let (dx, dy) = (ix as f64 + 0.5 - gx, iy as f64 + 0.5 - gy);
            if cells[iy * grid.width() + ix] > 0.0 && dx * dx + dy * dy <= r * r {
                n += 1;
            }
        }
    }
    n
}

/// Hill climbing over `(x, y, θ)` against a prebuilt field.
pub fn scan_match_field(field: &LikelihoodField, scan: &LidarScan, prior: &Pose2D, params: &ScanMatchParams) -> (Pose2D, f64) {
    let mut best = *prior;
    let mut best_score = scan_score(field, scan, &best, params.beam_stride);
    let mut step_xy = params.initial_step_xy;
    let mut step_th = params.initial_step_theta;
    let mut level = 0;
    let mut iterations = 0;
    while level <= params.halvings && iterations < params.max_iterations {
        iterations += 1;
        let mut improved = false;
        let moves = [
            (step_xy, 0.0, 0.0),
            (-step_xy, 0.0, 0.0),
            (0.0, step_xy, 0.0),
            (0.0, -step_xy, 0.0),
            (0.0, 0.0, step_th),
            (0.0, 0.0, -step_th),
        ];
        let mut candidate = best;
        let mut candidate_score = best_score;
        for (dx, dy, dt) in moves {
            let p = Pose2D::new(best.x + dx, best.y + dy, best.theta + dt);
            let s = scan_score(field, scan, &p, params.beam_stride);
            if s > candidate_score {
                candidate = p;
                candidate_score = s;
                improved = true;
            }
        }
        if improved {
            best = candidate;
            best_score = candidate_score;
        } else {
            step_xy /= 2.0;
            step_th /= 2.0;
            level += 1;
        }
    }
    (best, best_score)
}

/// Refines `prior` against the current map; falls back to `(prior, 0)` when the
/// map holds too few occupied cells within range.
pub fn scan_match(grid: &OccupancyGrid, scan: &LidarScan, prior: &Pose2D, params: &ScanMatchParams) -> (Pose2D, f64) {
    if occupied_near(grid, prior, params.max_range) < params.min_occupied_cells {
        return (*prior, 0.0);
    }
    match build_likelihood_field(grid, params.sigma, 4.0 * params.sigma) {
        Ok(field) => scan_match_field(&field, scan, prior, params),
        Err(_) => (*prior, 0.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InsertParams {
    pub l_occ: f64,
    pub l_free: f64,
}

impl Default for InsertParams {
    fn default() -> Self {
        Self { l_occ: 0.85, l_free: -0.4 }
    }
}

/// Ray-traces every beam, in index order: traversed cells get `l_free`, the
/// endpoint cell of a returning beam gets `l_occ`.
pub fn insert_scan(grid: &mut OccupancyGrid, pose: &Pose2D, scan: &LidarScan, params: &InsertParams) {
    for i in 0..scan.ranges.len() {
        let bearing = pose.theta + scan.beam_angle(i);
        let range = scan.ranges[i] + ENDPOINT_NUDGE;
        let (s, c) = bearing.sin_cos();
        let (ex, ey) = (pose.x + c * range, pose.y + s * range);
        for cell in grid.segment_cells(pose.x, pose.y, ex, ey) {
            grid.add_log_odds(cell, params.l_free);
        }
        let end = grid.world_to_cell(ex, ey);
        if scan.hits[i] {
            grid.add_log_odds(end, params.l_occ);
        } else {
            grid.add_log_odds(end, params.l_free);
        }
    }
}

/// Per-cell thresholding of occupancy probabilities.
pub fn binarize(grid: &OccupancyGrid, occ_threshold: f64, free_threshold: f64) -> Result<TrinaryMap> {
    if !(0.0 < free_threshold && free_threshold < occ_threshold && occ_threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "thresholds must satisfy 0 < free ({free_threshold}) < occupied ({occ_threshold}) < 1"
        )));
    }
    let cells = grid
        .cells()
        .iter()
        .map(|&l| {
            let p = logistic(l);
            if p > occ_threshold {
                CellState::Occupied
            } else if p < free_threshold {
                CellState::Free
            } else {
                CellState::Unknown
            }
        })
        .collect();
    Ok(TrinaryMap {
        width: grid.width(),
        height: grid.height(),
        resolution: grid.resolution(),
        origin: grid.origin(),
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapperConfig {
    /// Side of the square grid (m), centered on the start pose.
    pub size: f64,
    pub resolution: f64,
    pub insert: InsertParams,
    pub scan_match: ScanMatchParams,
    pub vlp_constraint: bool,
    pub anchor_quality: f64,
    /// Heading of the start pose in the LED frame; anchoring uses it plus the mapper heading.
    pub initial_heading: f64,
    pub camera: CameraModel,
    pub vlp: VlpConfig,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            size: 24.0,
            resolution: 0.05,
            insert: InsertParams::default(),
            scan_match: ScanMatchParams::default(),
            vlp_constraint: true,
            anchor_quality: 0.8,
            initial_heading: 0.0,
            camera: CameraModel::default(),
            vlp: VlpConfig::default(),
        }
    }
}

/// Incremental mapper state.
#[derive(Debug, Clone)]
pub struct Mapper {
    config: MapperConfig,
    grid: OccupancyGrid,
    anchor: MapAnchor,
    pose: Pose2D,
    pose_stamp: f64,
    scans: usize,
}

impl Mapper {
    pub fn new(config: MapperConfig) -> Result<Self> {
        if !(config.size > 0.0 && config.resolution > 0.0) {
            return Err(Error::Config("mapper size and resolution must be positive".into()));
        }
        let n = (config.size / config.resolution).round() as usize;
        let half = n as f64 * config.resolution / 2.0;
        Ok(Self {
            grid: OccupancyGrid::new(n, n, config.resolution, Pose2D::new(-half, -half, 0.0)),
            config,
            anchor: MapAnchor::default(),
            pose: Pose2D::identity(),
            pose_stamp: 0.0,
            scans: 0,
        })
    }

    pub fn grid(&self) -> &OccupancyGrid {
        &self.grid
    }

    pub fn anchor(&self) -> &MapAnchor {
        &self.anchor
    }

    /// Current pose in the map frame (LED frame once anchored).
    pub fn pose(&self) -> &Pose2D {
        &self.pose
    }

    pub fn scans_inserted(&self) -> usize {
        self.scans
    }

    pub fn apply_odometry(&mut self, delta: &OdometryDelta) {
        self.pose = self.pose.compose(&delta.as_pose());
        self.pose_stamp = delta.stamp;
    }

    pub fn add_scan(&mut self, scan: &LidarScan) {
        let (pose, _) = scan_match(&self.grid, scan, &self.pose, &self.config.scan_match);
        insert_scan(&mut self.grid, &pose, scan, &self.config.insert);
        self.pose = pose;
        self.scans += 1;
    }

    /// Applies the anchor; only the origin and the tracked pose change.
    pub fn anchor_with(&mut self, fix: &VlpFix) -> Result<()> {
        // Mapper heading relative to the start, added to the configured start heading.
        let mapper_pose = self.anchor.transform.inverse().compose(&self.pose);
        let fused_heading = self.config.initial_heading + mapper_pose.theta;
        self.anchor = anchor_origin(&self.anchor, fix, &mapper_pose, fused_heading, self.config.anchor_quality)?;
        self.grid.set_origin(self.anchor.transform.compose(&self.grid.origin()));
        self.pose = self.anchor.transform.compose(&mapper_pose);
        Ok(())
    }

    /// Solves a fix from one camera frame with the mapper's heading and anchors on it if it qualifies.
    pub fn offer_camera_frame(&mut self, observations: &[crate::vlp::LedObservation], leds: &LedFeatureMap) -> Result<Option<VlpFix>> {
        if !self.config.vlp_constraint || self.anchor.anchored {
            return Ok(None);
        }
        let Some(obs) = select_observation(observations, &self.config.camera) else {
            return Ok(None);
        };
        let Some(beacon) = leds.get(obs.beacon_id) else {
            return Err(Error::UnknownBeacon(obs.beacon_id));
        };
        let heading = self.config.initial_heading + self.pose.theta;
        let Ok(fix) = solve_slo_vlp(obs, beacon, heading, &self.config.camera, &self.config.vlp) else {
            return Ok(None);
        };
        if fix.quality > self.config.anchor_quality {
            self.anchor_with(&fix)?;
            return Ok(Some(fix));
        }
        Ok(None)
    }
}

#[derive(Debug, Clone)]
pub struct MapBuild {
    pub grid: OccupancyGrid,
    pub anchor: MapAnchor,
    /// Mapper poses at each scan, in the exported frame of that moment.
    pub poses: Vec<(f64, Pose2D)>,
}

/// Builds a map from a log. With the constraint on, the first qualifying fix anchors the frame.
pub fn build_map(log: &SensorLog, leds: &LedFeatureMap, config: &MapperConfig) -> Result<MapBuild> {
    if log.events.is_empty() {
        return Err(Error::EmptyLog);
    }
    let mut mapper = Mapper::new(*config)?;
    let mut poses = Vec::new();
    for e in &log.events {
        match &e.data {
            SensorData::Odometry(d) => mapper.apply_odometry(d),
            SensorData::Camera(obs) => {
                mapper.offer_camera_frame(obs, leds)?;
            }
            SensorData::Lidar(scan) => {
                mapper.add_scan(scan);
                poses.push((scan.stamp, *mapper.pose()));
            }
            SensorData::GroundTruth(_) => {}
        }
    }
    Ok(MapBuild {
        grid: mapper.grid,
        anchor: mapper.anchor,
        poses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Cell;
    use crate::sim::sensors::{simulate_lidar, LidarSpec};
    use crate::sim::world::lab_world;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fix(x: f64, y: f64, quality: f64) -> VlpFix {
        VlpFix {
            x,
            y,
            z: 0.3,
            heading_used: 0.0,
            beacon_id: 1,
            stamp: 0.0,
            quality,
        }
    }

    #[test]
    fn anchor_cases() {
        let a = anchor_origin(&MapAnchor::default(), &fix(0.0, 0.0, 0.9), &Pose2D::identity(), 0.0, 0.8).unwrap();
        assert_eq!(a.transform, Pose2D::identity());
        assert!(matches!(
            anchor_origin(&a, &fix(0.0, 0.0, 0.9), &Pose2D::identity(), 0.0, 0.8),
            Err(Error::AlreadyAnchored)
        ));
        let b = anchor_origin(&MapAnchor::default(), &fix(3.0, 2.0, 0.9), &Pose2D::identity(), 0.0, 0.8).unwrap();
        assert_eq!(b.transform, Pose2D::new(3.0, 2.0, 0.0));
        let moved = Pose2D::new(0.5, 0.2, 0.3);
        let c = anchor_origin(&MapAnchor::default(), &fix(4.0, 1.0, 0.9), &moved, 1.0, 0.8).unwrap();
        let p = c.transform.compose(&moved);
        assert_abs_diff_eq!(p.x, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.y, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.theta, 1.0, epsilon = 1e-12);
        assert!(anchor_origin(&MapAnchor::default(), &fix(0.0, 0.0, 0.5), &Pose2D::identity(), 0.0, 0.8).is_err());
    }

    #[test]
    fn insert_accumulates_and_clamps() {
        let mut g = OccupancyGrid::new(40, 40, 0.05, Pose2D::identity());
        let scan = LidarScan {
            stamp: 0.0,
            angle_increment: std::f64::consts::TAU,
            max_range: 3.5,
            ranges: vec![1.0],
            hits: vec![true],
        };
        let pose = Pose2D::new(0.025, 0.025, 0.0);
        let p = InsertParams::default();
        for k in 1..=10 {
            insert_scan(&mut g, &pose, &scan, &p);
            if k == 5 {
                assert_eq!(g.log_odds(Cell::new(20, 0)), Some(4.0));
                assert!(g.probability(Cell::new(20, 0)).unwrap() > 0.98);
            }
        }
        assert_abs_diff_eq!(g.log_odds(Cell::new(10, 0)).unwrap(), -4.0, epsilon = 1e-12);
        assert!(g.probability(Cell::new(10, 0)).unwrap() < 0.02);
        assert_eq!(g.log_odds(Cell::new(5, 5)), Some(0.0));
        assert!(g.cells().iter().all(|&l| (-4.0..=4.0).contains(&l)));
    }

    #[test]
    fn binarize_thresholds() {
        let mut g = OccupancyGrid::new(3, 1, 0.05, Pose2D::identity());
        g.set_log_odds(Cell::new(1, 0), crate::grid::log_odds(0.98));
        g.set_log_odds(Cell::new(2, 0), crate::grid::log_odds(0.02));
        let t = binarize(&g, 0.65, 0.25).unwrap();
        assert_eq!(t.cells, vec![CellState::Unknown, CellState::Occupied, CellState::Free]);
        assert!(binarize(&g, 0.25, 0.65).is_err());
        assert!(binarize(&g, 1.0, 0.2).is_err());
    }

    fn scan_at(pose: &Pose2D) -> (OccupancyGrid, LidarScan) {
        let world = lab_world();
        let mut spec = LidarSpec::default();
        spec.range_noise_sigma = 0.0;
        let scan = simulate_lidar(pose, &world.grid, &spec, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (world.grid, scan)
    }

    #[test]
    fn scan_match_keeps_true_pose_and_falls_back_on_empty_maps() {
        let truth = Pose2D::new(2.0, 3.0, 0.2);
        let (grid, scan) = scan_at(&truth);
        let (p, s) = scan_match(&grid, &scan, &truth, &ScanMatchParams::default());
        assert_eq!(p, truth);
        assert!(s > 0.0);
        let empty = OccupancyGrid::new(100, 100, 0.05, Pose2D::identity());
        assert_eq!(scan_match(&empty, &scan, &truth, &ScanMatchParams::default()), (truth, 0.0));
    }

    #[test]
    fn scan_match_recovers_perturbation_like_exhaustive_search() {
        let truth = Pose2D::new(2.0, 3.0, 0.2);
        let (grid, scan) = scan_at(&truth);
        let prior = Pose2D::new(truth.x + 0.06, truth.y - 0.04, truth.theta + 2f64.to_radians());
        let params = ScanMatchParams::default();
        let (p, _) = scan_match(&grid, &scan, &prior, &params);
        let field = build_likelihood_field(&grid, params.sigma, 4.0 * params.sigma).unwrap();
        // Exhaustive search over ±10 cm / ±5° around the prior.
        let mut best = (prior, f64::NEG_INFINITY);
        for ix in -20..=20 {
            for iy in -20..=20 {
                for it in -20..=20 {
                    let q = Pose2D::new(prior.x + ix as f64 * 0.005, prior.y + iy as f64 * 0.005, prior.theta + (it as f64 * 0.25f64).to_radians());
                    let s = scan_score(&field, &scan, &q, params.beam_stride);
                    if s > best.1 {
                        best = (q, s);
                    }
                }
            }
        }
        for q in [best.0, truth] {
            assert!((p.x - q.x).abs() <= 0.05, "{p:?} vs {q:?}");
            assert!((p.y - q.y).abs() <= 0.05, "{p:?} vs {q:?}");
            assert!(crate::geometry::angle_diff(p.theta, q.theta).abs() <= 0.5f64.to_radians(), "{p:?} vs {q:?}");
        }
    }
}
