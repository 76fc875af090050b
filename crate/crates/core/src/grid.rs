//! Occupancy lattices shared by the simulator, the localizer, the mapper and the planner.

use serde::{Deserialize, Serialize};

use crate::geometry::Pose2D;

pub const LOG_ODDS_MIN: f64 = -4.0;
pub const LOG_ODDS_MAX: f64 = 4.0;

pub fn logistic(l: f64) -> f64 {
    1.0 / (1.0 + (-l).exp())
}

pub fn log_odds(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Integer cell coordinate; may lie outside the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub ix: i64,
    pub iy: i64,
}

impl Cell {
    pub const fn new(ix: i64, iy: i64) -> Self {
        Self { ix, iy }
    }
}

/// Log-odds occupancy lattice. `origin` is the pose of the outer corner of cell (0, 0).
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    width: usize,
    height: usize,
    resolution: f64,
    origin: Pose2D,
    cells: Vec<f64>,
}

impl OccupancyGrid {
    pub fn new(width: usize, height: usize, resolution: f64, origin: Pose2D) -> Self {
        assert!(resolution > 0.0, "resolution must be positive");
        Self {
            width,
            height,
            resolution,
            origin,
            cells: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> Pose2D {
        self.origin
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    /// Re-expresses the grid in another frame. Cell values are untouched.
    pub fn set_origin(&mut self, origin: Pose2D) {
        self.origin = origin;
    }

    pub fn contains(&self, cell: Cell) -> bool {
        cell.ix >= 0 && cell.iy >= 0 && (cell.ix as usize) < self.width && (cell.iy as usize) < self.height
    }

    pub fn index(&self, cell: Cell) -> Option<usize> {
        self.contains(cell)
            .then(|| cell.iy as usize * self.width + cell.ix as usize)
    }

    pub fn cell_of_index(&self, index: usize) -> Cell {
        Cell::new((index % self.width) as i64, (index / self.width) as i64)
    }

    pub fn log_odds(&self, cell: Cell) -> Option<f64> {
        self.index(cell).map(|i| self.cells[i])
    }

    pub fn probability(&self, cell: Cell) -> Option<f64> {
        self.log_odds(cell).map(logistic)
    }

    pub fn set_log_odds(&mut self, cell: Cell, value: f64) {
        if let Some(i) = self.index(cell) {
            self.cells[i] = value.clamp(LOG_ODDS_MIN, LOG_ODDS_MAX);
        }
    }

    /// Adds `delta` to a cell's log-odds, clamped to `[LOG_ODDS_MIN, LOG_ODDS_MAX]`.
    pub fn add_log_odds(&mut self, cell: Cell, delta: f64) {
        if let Some(i) = self.index(cell) {
            self.cells[i] = (self.cells[i] + delta).clamp(LOG_ODDS_MIN, LOG_ODDS_MAX);
        }
    }

    /// Cells with positive log-odds count as occupied; out-of-grid cells do not.
    pub fn is_occupied(&self, cell: Cell) -> bool {
        self.log_odds(cell).is_some_and(|l| l > 0.0)
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|&&l| l > 0.0).count()
    }

    /// World point to continuous grid coordinates (cell units, origin at the corner of cell 0).
    pub fn world_to_grid(&self, x: f64, y: f64) -> (f64, f64) {
        let local = self.origin.between(&Pose2D { x, y, theta: 0.0 });
        (local.x / self.resolution, local.y / self.resolution)
    }

    pub fn world_to_cell(&self, x: f64, y: f64) -> Cell {
        let (gx, gy) = self.world_to_grid(x, y);
        Cell::new(gx.floor() as i64, gy.floor() as i64)
    }

    pub fn cell_center(&self, cell: Cell) -> (f64, f64) {
        self.origin.transform_point(
            (cell.ix as f64 + 0.5) * self.resolution,
            (cell.iy as f64 + 0.5) * self.resolution,
        )
    }

    /// Whether a disc of `radius` around `(x, y)` overlaps any occupied cell.
    pub fn disc_hits_occupied(&self, x: f64, y: f64, radius: f64) -> bool {
        let (gx, gy) = self.world_to_grid(x, y);
        let r = radius / self.resolution;
        let x0 = (gx - r).floor() as i64;
        let x1 = (gx + r).floor() as i64;
        let y0 = (gy - r).floor() as i64;
        let y1 = (gy + r).floor() as i64;
        for iy in y0..=y1 {
            for ix in x0..=x1 {
                let c = Cell::new(ix, iy);
                if !self.is_occupied(c) {
                    continue;
                }
                let nx = gx.clamp(ix as f64, ix as f64 + 1.0);
                let ny = gy.clamp(iy as f64, iy as f64 + 1.0);
                if (gx - nx).hypot(gy - ny) < r {
                    return true;
                }
            }
        }
        false
    }

    /// Walks the cells crossed by a ray, in order, until `visit` returns `false`,
    /// `max_range` is exceeded or the ray leaves the grid.
    ///
    /// `visit` receives the cell and the range at which the ray enters it.
    pub fn traverse<F>(&self, x: f64, y: f64, bearing: f64, max_range: f64, mut visit: F)
    where
        F: FnMut(Cell, f64) -> bool,
    {
        let (gx, gy) = self.world_to_grid(x, y);
        let local_bearing = bearing - self.origin.theta;
        let (dy, dx) = local_bearing.sin_cos();
        let res = self.resolution;
        let mut cell = Cell::new(gx.floor() as i64, gy.floor() as i64);
        let step_x: i64 = if dx > 0.0 { 1 } else { -1 };
        let step_y: i64 = if dy > 0.0 { 1 } else { -1 };
        // Parametric distance (meters) to the next vertical / horizontal cell boundary.
        let mut t_max_x = if dx.abs() < 1e-15 {
            f64::INFINITY
        } else {
            let boundary = if dx > 0.0 { cell.ix as f64 + 1.0 } else { cell.ix as f64 };
            (boundary - gx) / dx * res
        };
        let mut t_max_y = if dy.abs() < 1e-15 {
            f64::INFINITY
        } else {
            let boundary = if dy > 0.0 { cell.iy as f64 + 1.0 } else { cell.iy as f64 };
            (boundary - gy) / dy * res
        };
        let t_delta_x = if dx.abs() < 1e-15 { f64::INFINITY } else { res / dx.abs() };
        let t_delta_y = if dy.abs() < 1e-15 { f64::INFINITY } else { res / dy.abs() };
        let mut t_entry = 0.0;
        loop {
            if !self.contains(cell) || t_entry > max_range {
                return;
            }
            if !visit(cell, t_entry) {
                return;
            }
            if t_max_x < t_max_y {
                t_entry = t_max_x;
                t_max_x += t_delta_x;
                cell.ix += step_x;
            } else {
                t_entry = t_max_y;
                t_max_y += t_delta_y;
                cell.iy += step_y;
            }
        }
    }

    /// Range to the first occupied cell along a ray (distance at which the ray enters it).
    pub fn raycast(&self, x: f64, y: f64, bearing: f64, max_range: f64) -> Option<f64> {
        let mut hit = None;
        self.traverse(x, y, bearing, max_range, |cell, t| {
            if self.is_occupied(cell) {
                hit = Some(t);
                false
            } else {
                true
            }
        });
        hit.filter(|&t| t <= max_range)
    }

    /// Cells crossed by the segment from `(x0, y0)` to `(x1, y1)`, excluding the end cell.
    pub fn segment_cells(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<Cell> {
        let end = self.world_to_cell(x1, y1);
        let len = (x1 - x0).hypot(y1 - y0);
        let bearing = (y1 - y0).atan2(x1 - x0);
        let mut out = Vec::new();
        self.traverse(x0, y0, bearing, len, |cell, _| {
            if cell == end {
                return false;
            }
            out.push(cell);
            true
        });
        out
    }
}

/// Ternary classification of a cell after thresholding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellState {
    Free,
    Occupied,
    Unknown,
}

/// Thresholded occupancy map with the same lattice geometry as its source grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrinaryMap {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub origin: Pose2D,
    pub cells: Vec<CellState>,
}

impl TrinaryMap {
    pub fn get(&self, cell: Cell) -> Option<CellState> {
        (cell.ix >= 0 && cell.iy >= 0 && (cell.ix as usize) < self.width && (cell.iy as usize) < self.height)
            .then(|| self.cells[cell.iy as usize * self.width + cell.ix as usize])
    }

    pub fn count(&self, state: CellState) -> usize {
        self.cells.iter().filter(|&&c| c == state).count()
    }

    /// Grid with log-odds at the clamp limits for known cells and zero for unknown.
    pub fn to_grid(&self) -> OccupancyGrid {
        let mut g = OccupancyGrid::new(self.width, self.height, self.resolution, self.origin);
        for (dst, &state) in g.cells.iter_mut().zip(&self.cells) {
            *dst = match state {
                CellState::Free => LOG_ODDS_MIN,
                CellState::Occupied => LOG_ODDS_MAX,
                CellState::Unknown => 0.0,
            };
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn boxed_room(n: usize) -> OccupancyGrid {
        let mut g = OccupancyGrid::new(n, n, 0.05, Pose2D::identity());
        for i in 0..n as i64 {
            for c in [Cell::new(i, 0), Cell::new(i, n as i64 - 1), Cell::new(0, i), Cell::new(n as i64 - 1, i)] {
                g.set_log_odds(c, LOG_ODDS_MAX);
            }
        }
        g
    }

    #[test]
    fn world_cell_round_trip_with_rotated_origin() {
        let g = OccupancyGrid::new(40, 30, 0.05, Pose2D::new(1.0, -2.0, 0.7));
        for (ix, iy) in [(0, 0), (5, 7), (39, 29)] {
            let (x, y) = g.cell_center(Cell::new(ix, iy));
            assert_eq!(g.world_to_cell(x, y), Cell::new(ix, iy));
        }
    }

    #[test]
    fn raycast_axis_aligned() {
        let g = boxed_room(100);
        // From the center of the room along +x: wall cell starts at x = 99 * 0.05.
        let r = g.raycast(2.5, 2.5, 0.0, 10.0).unwrap();
        assert_abs_diff_eq!(r, 99.0 * 0.05 - 2.5, epsilon = 1e-9);
        let r = g.raycast(2.5, 2.5, std::f64::consts::PI, 10.0).unwrap();
        assert_abs_diff_eq!(r, 2.5 - 0.05, epsilon = 1e-9);
        assert!(g.raycast(2.5, 2.5, 0.0, 1.0).is_none());
    }

    #[test]
    fn segment_cells_excludes_end() {
        let g = OccupancyGrid::new(20, 20, 0.1, Pose2D::identity());
        let cells = g.segment_cells(0.05, 0.05, 0.95, 0.05);
        assert_eq!(cells.len(), 9);
        assert_eq!(cells[0], Cell::new(0, 0));
        assert_eq!(*cells.last().unwrap(), Cell::new(8, 0));
    }

    #[test]
    fn disc_collision() {
        let g = boxed_room(40);
        assert!(!g.disc_hits_occupied(1.0, 1.0, 0.105));
        assert!(g.disc_hits_occupied(0.12, 1.0, 0.105));
        assert!(!g.disc_hits_occupied(0.16, 1.0, 0.105));
    }

    #[test]
    fn clamping() {
        let mut g = OccupancyGrid::new(2, 2, 0.05, Pose2D::identity());
        for _ in 0..10 {
            g.add_log_odds(Cell::new(0, 0), 0.85);
        }
        assert_eq!(g.log_odds(Cell::new(0, 0)), Some(LOG_ODDS_MAX));
        assert_eq!(g.probability(Cell::new(1, 1)), Some(0.5));
    }
}
