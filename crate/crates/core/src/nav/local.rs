//! Rolling obstacle window fed by LiDAR, aligned to the global lattice.

use crate::error::{Error, Result};
use crate::geometry::Pose2D;
use crate::grid::{Cell, CellState, OccupancyGrid, TrinaryMap};
use crate::nav::costmap::{Costmap, CostmapParams};
use crate::sim::sensors::LidarScan;

/// Occupied cells of the prior map on the global lattice. Unknown is not an obstacle here.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticLayer {
    width: usize,
    height: usize,
    resolution: f64,
    origin: Pose2D,
    occupied: Vec<bool>,
}

impl StaticLayer {
    pub fn from_trinary(map: &TrinaryMap) -> Result<Self> {
        if map.origin.theta != 0.0 {
            return Err(Error::InvalidArgument("navigation maps must be axis-aligned".into()));
        }
        Ok(Self {
            width: map.width,
            height: map.height,
            resolution: map.resolution,
            origin: map.origin,
            occupied: map.cells.iter().map(|&c| c == CellState::Occupied).collect(),
        })
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> Pose2D {
        self.origin
    }

    /// Global lattice index of the cell containing a world point.
    pub fn lattice_cell(&self, x: f64, y: f64) -> Cell {
        Cell::new(((x - self.origin.x) / self.resolution).floor() as i64, ((y - self.origin.y) / self.resolution).floor() as i64)
    }

    /// Off-map cells count as occupied.
    pub fn is_occupied(&self, c: Cell) -> bool {
        if c.ix < 0 || c.iy < 0 || c.ix as usize >= self.width || c.iy as usize >= self.height {
            return true;
        }
        self.occupied[c.iy as usize * self.width + c.ix as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mark {
    Unseen,
    Clear,
    Hit,
}

/// LiDAR marks inside a square window; the lower-left cell follows the robot.
#[derive(Debug, Clone)]
pub struct LocalCostmap {
    size: usize,
    corner: Cell,
    marks: Vec<Mark>,
    params: CostmapParams,
    initialized: bool,
}

impl LocalCostmap {
    pub fn new(size_m: f64, resolution: f64, params: CostmapParams) -> Result<Self> {
        params.validate()?;
        let size = (size_m / resolution).round() as usize;
        if size < 3 {
            return Err(Error::Config("local costmap window is too small".into()));
        }
        Ok(Self {
            size,
            corner: Cell::new(0, 0),
            marks: vec![Mark::Unseen; size * size],
            params,
            initialized: false,
        })
    }

    pub fn size_cells(&self) -> usize {
        self.size
    }

    fn recenter(&mut self, center: Cell) {
        let half = (self.size / 2) as i64;
        let corner = Cell::new(center.ix - half, center.iy - half);
        if self.initialized && corner == self.corner {
            return;
        }
        let mut next = vec![Mark::Unseen; self.size * self.size];
        if self.initialized {
            let n = self.size as i64;
            for iy in 0..n {
                for ix in 0..n {
                    let (ox, oy) = (ix + corner.ix - self.corner.ix, iy + corner.iy - self.corner.iy);
                    if (0..n).contains(&ox) && (0..n).contains(&oy) {
                        next[(iy * n + ix) as usize] = self.marks[(oy * n + ox) as usize];
                    }
                }
            }
        }
        self.marks = next;
        self.corner = corner;
        self.initialized = true;
    }

    fn window_grid(&self, layer: &StaticLayer) -> OccupancyGrid {
        let r = layer.resolution;
        let o = layer.origin;
        OccupancyGrid::new(self.size, self.size, r, Pose2D::new(o.x + self.corner.ix as f64 * r, o.y + self.corner.iy as f64 * r, 0.0))
    }

    /// Cells (global lattice) currently marked as hit.
    pub fn hit_cells(&self) -> Vec<Cell> {
        (0..self.marks.len())
            .filter(|&i| self.marks[i] == Mark::Hit)
            .map(|i| Cell::new(self.corner.ix + (i % self.size) as i64, self.corner.iy + (i / self.size) as i64))
            .collect()
    }

    /// Integrates a scan taken at `pose` and returns the inflated window.
    pub fn update(&mut self, layer: &StaticLayer, scan: &LidarScan, pose: &Pose2D) -> Result<Costmap> {
        self.recenter(layer.lattice_cell(pose.x, pose.y));
        let grid = self.window_grid(layer);
        let n = self.size as i64;
        let reach = self.size as f64 * layer.resolution * std::f64::consts::SQRT_2;
        for i in 0..scan.ranges.len() {
            let bearing = pose.theta + scan.beam_angle(i);
            let range = if scan.hits[i] { scan.ranges[i] } else { scan.max_range };
            let range = range.min(reach);
            let end_r = range + crate::sim::sensors::ENDPOINT_NUDGE;
            let (ex, ey) = (pose.x + end_r * bearing.cos(), pose.y + end_r * bearing.sin());
            for c in grid.segment_cells(pose.x, pose.y, ex, ey) {
                if let Some(j) = grid.index(c) {
                    self.marks[j] = Mark::Clear;
                }
            }
            if scan.hits[i] && scan.ranges[i] <= reach {
                let c = grid.world_to_cell(ex, ey);
                if (0..n).contains(&c.ix) && (0..n).contains(&c.iy) {
                    self.marks[(c.iy * n + c.ix) as usize] = Mark::Hit;
                }
            }
        }
        self.costmap(layer)
    }

    /// Static obstacles plus current marks, inflated.
    pub fn costmap(&self, layer: &StaticLayer) -> Result<Costmap> {
        let n = self.size;
        let mut lethal = vec![false; n * n];
        for iy in 0..n {
            for ix in 0..n {
                let g = Cell::new(self.corner.ix + ix as i64, self.corner.iy + iy as i64);
                lethal[iy * n + ix] = self.marks[iy * n + ix] == Mark::Hit || layer.is_occupied(g);
            }
        }
        let grid = self.window_grid(layer);
        Costmap::from_lethal(n, n, layer.resolution, grid.origin(), lethal, self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::sensors::{simulate_lidar_with, LidarSpec};
    use crate::sim::world::Rect;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn open_layer() -> (StaticLayer, OccupancyGrid) {
        let n = 200;
        let mut cells = vec![CellState::Free; n * n];
        for i in 0..n {
            cells[i] = CellState::Occupied;
            cells[(n - 1) * n + i] = CellState::Occupied;
            cells[i * n] = CellState::Occupied;
            cells[i * n + n - 1] = CellState::Occupied;
        }
        let map = TrinaryMap {
            width: n,
            height: n,
            resolution: 0.05,
            origin: Pose2D::new(-5.0, -5.0, 0.0),
            cells,
        };
        (StaticLayer::from_trinary(&map).unwrap(), map.to_grid())
    }

    fn scan(grid: &OccupancyGrid, pose: &Pose2D, obstacles: &[Rect]) -> LidarScan {
        let spec = LidarSpec {
            range_noise_sigma: 0.0,
            ..Default::default()
        };
        simulate_lidar_with(pose, grid, obstacles, &spec, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    /// Hit cells lie within one cell of the obstacle's boundary.
    fn near_rect(layer: &StaticLayer, c: Cell, r: &Rect) -> bool {
        let res = layer.resolution();
        let o = layer.origin();
        let (cx, cy) = (o.x + (c.ix as f64 + 0.5) * res, o.y + (c.iy as f64 + 0.5) * res);
        let dx = (r.x0 - cx).max(cx - r.x1).max(0.0);
        let dy = (r.y0 - cy).max(cy - r.y1).max(0.0);
        dx.hypot(dy) <= res * 1.5
    }

    #[test]
    fn obstacle_appears_moves_and_clears() {
        let (layer, grid) = open_layer();
        let mut local = LocalCostmap::new(4.0, 0.05, CostmapParams::default()).unwrap();
        let pose = Pose2D::identity();
        let empty = local.update(&layer, &scan(&grid, &pose, &[]), &pose).unwrap();
        assert!(local.hit_cells().is_empty());
        assert!(empty.footprint_clear(1.0, 0.0));

        for k in 0..6 {
            let r = Rect::new(0.8, -1.2 + 0.3 * k as f64, 1.0, -0.9 + 0.3 * k as f64);
            let cm = local.update(&layer, &scan(&grid, &pose, &[r]), &pose).unwrap();
            let hits = local.hit_cells();
            assert!(!hits.is_empty());
            assert!(hits.iter().all(|&c| near_rect(&layer, c, &r)), "step {k}: stale or misplaced cells");
            assert!(!cm.footprint_clear(0.8 - 0.01, (r.y0 + r.y1) / 2.0));
        }
        let cleared = local.update(&layer, &scan(&grid, &pose, &[]), &pose).unwrap();
        assert!(local.hit_cells().is_empty());
        assert!(cleared.footprint_clear(0.9, 0.0));
    }

    #[test]
    fn window_follows_robot_and_forgets() {
        let (layer, grid) = open_layer();
        let mut local = LocalCostmap::new(4.0, 0.05, CostmapParams::default()).unwrap();
        let r = Rect::new(1.5, -0.2, 1.7, 0.2);
        let p0 = Pose2D::identity();
        local.update(&layer, &scan(&grid, &p0, &[r]), &p0).unwrap();
        assert!(!local.hit_cells().is_empty());
        // Move 3 m away, facing away, with the obstacle gone from view.
        let p1 = Pose2D::new(-3.0, 0.0, std::f64::consts::PI);
        local.update(&layer, &scan(&grid, &p1, &[]), &p1).unwrap();
        // Static walls in range are marked; the obstacle left the window and is gone.
        assert!(!local.hit_cells().is_empty());
        assert!(local.hit_cells().iter().all(|&c| !near_rect(&layer, c, &r)));
    }
}
