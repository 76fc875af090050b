use serde::{Deserialize, Serialize};

use crate::distance::squared_edt;
use crate::error::{Error, Result};
use crate::geometry::Pose2D;
use crate::grid::{Cell, CellState, TrinaryMap};

/// Cell is an obstacle.
pub const LETHAL: u8 = 255;
/// Footprint centered here may touch an obstacle.
pub const INSCRIBED: u8 = 254;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostmapParams {
    pub robot_radius: f64,
    /// Extra margin so a center-cell check covers the whole disc: at least one cell diagonal.
    pub padding: f64,
    pub inflation_radius: f64,
    /// Exponential decay rate (1/m) of the cost outside the inscribed radius.
    pub cost_decay: f64,
    pub unknown_is_lethal: bool,
}

impl Default for CostmapParams {
    fn default() -> Self {
        Self {
            robot_radius: 0.105,
            padding: 0.075,
            inflation_radius: 0.55,
            cost_decay: 8.0,
            unknown_is_lethal: true,
        }
    }
}

impl CostmapParams {
    pub fn inscribed_radius(&self) -> f64 {
        self.robot_radius + self.padding
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.robot_radius > 0.0 && self.padding >= 0.0 && self.cost_decay >= 0.0 && self.inflation_radius >= self.inscribed_radius();
        if !ok || !self.inflation_radius.is_finite() {
            return Err(Error::Config("costmap: need radius > 0, padding ≥ 0, decay ≥ 0, inflation ≥ robot radius + padding".into()));
        }
        Ok(())
    }

    /// Cost of a free cell whose nearest lethal cell center is `d` meters away.
    pub fn cost_at_distance(&self, d: f64) -> u8 {
        if d <= 0.0 {
            LETHAL
        } else if d <= self.inscribed_radius() {
            INSCRIBED
        } else if d <= self.inflation_radius {
            let c = (INSCRIBED - 1) as f64 * (-self.cost_decay * (d - self.inscribed_radius())).exp();
            c.round() as u8
        } else {
            0
        }
    }
}

/// Planning costs on an axis-aligned lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Costmap {
    width: usize,
    height: usize,
    resolution: f64,
    origin: Pose2D,
    lethal: Vec<bool>,
    distances: Vec<f64>,
    costs: Vec<u8>,
    params: CostmapParams,
}

impl Costmap {
    /// Inflates a lethal mask.
    pub fn from_lethal(width: usize, height: usize, resolution: f64, origin: Pose2D, lethal: Vec<bool>, params: CostmapParams) -> Result<Self> {
        params.validate()?;
        if lethal.len() != width * height || !(resolution > 0.0) {
            return Err(Error::InvalidArgument("lethal mask does not match the lattice".into()));
        }
        let distances: Vec<f64> = squared_edt(width, height, &lethal).into_iter().map(|d2| d2.sqrt() * resolution).collect();
        let costs = distances.iter().map(|&d| params.cost_at_distance(d)).collect();
        Ok(Self {
            width,
            height,
            resolution,
            origin,
            lethal,
            distances,
            costs,
            params,
        })
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

    pub fn params(&self) -> &CostmapParams {
        &self.params
    }

    pub fn costs(&self) -> &[u8] {
        &self.costs
    }

    pub fn lethal_mask(&self) -> &[bool] {
        &self.lethal
    }

    pub fn contains(&self, c: Cell) -> bool {
        c.ix >= 0 && c.iy >= 0 && (c.ix as usize) < self.width && (c.iy as usize) < self.height
    }

    pub fn index(&self, c: Cell) -> Option<usize> {
        self.contains(c).then(|| c.iy as usize * self.width + c.ix as usize)
    }

    pub fn cell_of_index(&self, i: usize) -> Cell {
        Cell::new((i % self.width) as i64, (i / self.width) as i64)
    }

    /// Off-map cells are lethal.
    pub fn cost(&self, c: Cell) -> u8 {
        self.index(c).map_or(LETHAL, |i| self.costs[i])
    }

    /// Distance (m) to the nearest lethal cell center; zero off the map.
    pub fn distance(&self, c: Cell) -> f64 {
        self.index(c).map_or(0.0, |i| self.distances[i])
    }

    pub fn is_lethal(&self, c: Cell) -> bool {
        self.index(c).is_none_or(|i| self.lethal[i])
    }

    /// The footprint centered in this cell is clear of lethal cells.
    pub fn is_traversable(&self, c: Cell) -> bool {
        self.cost(c) < INSCRIBED
    }

    pub fn world_to_cell(&self, x: f64, y: f64) -> Cell {
        let local = self.origin.between(&Pose2D::new(x, y, 0.0));
        Cell::new((local.x / self.resolution).floor() as i64, (local.y / self.resolution).floor() as i64)
    }

    pub fn cell_center(&self, c: Cell) -> (f64, f64) {
        self.origin
            .transform_point((c.ix as f64 + 0.5) * self.resolution, (c.iy as f64 + 0.5) * self.resolution)
    }

    pub fn cost_at(&self, x: f64, y: f64) -> u8 {
        self.cost(self.world_to_cell(x, y))
    }

    pub fn footprint_clear(&self, x: f64, y: f64) -> bool {
        self.cost_at(x, y) < INSCRIBED
    }

    /// Grayscale render: lethal black, free white.
    pub fn to_pixels(&self) -> Vec<u8> {
        let mut px = vec![0u8; self.costs.len()];
        for iy in 0..self.height {
            for ix in 0..self.width {
                let c = self.costs[iy * self.width + ix];
                px[(self.height - 1 - iy) * self.width + ix] = 255 - c;
            }
        }
        px
    }
}

/// Global costmap from a trinary map: occupied (and unknown, by default) cells are lethal.
pub fn build_costmap(map: &TrinaryMap, params: &CostmapParams) -> Result<Costmap> {
    let lethal = map
        .cells
        .iter()
        .map(|&s| s == CellState::Occupied || (params.unknown_is_lethal && s == CellState::Unknown))
        .collect();
    Costmap::from_lethal(map.width, map.height, map.resolution, map.origin, lethal, *params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn room(n: usize) -> TrinaryMap {
        let mut cells = vec![CellState::Free; n * n];
        for i in 0..n {
            for j in [0, n - 1] {
                cells[j * n + i] = CellState::Occupied;
                cells[i * n + j] = CellState::Occupied;
            }
        }
        TrinaryMap {
            width: n,
            height: n,
            resolution: 0.05,
            origin: Pose2D::identity(),
            cells,
        }
    }

    #[test]
    fn decays_away_from_walls() {
        let p = CostmapParams::default();
        let cm = build_costmap(&room(40), &p).unwrap();
        assert_eq!(cm.cost(Cell::new(0, 10)), LETHAL);
        assert_eq!(cm.cost(Cell::new(1, 20)), INSCRIBED);
        let row: Vec<u8> = (0..20).map(|ix| cm.cost(Cell::new(ix, 20))).collect();
        assert!(row.windows(2).all(|w| w[0] >= w[1]), "{row:?}");
        // First cell outside the inscribed radius, then further out.
        let k = (p.inscribed_radius() / 0.05).floor() as i64 + 1;
        assert!(cm.cost(Cell::new(k, 20)) > cm.cost(Cell::new(k + 2, 20)));
        assert_eq!(cm.cost(Cell::new(20, 20)), 0);
        assert_eq!(cm.cost(Cell::new(-1, 0)), LETHAL);
    }

    #[test]
    fn unknown_cells_are_lethal_by_default() {
        let mut m = room(20);
        m.cells[10 * 20 + 10] = CellState::Unknown;
        assert_eq!(build_costmap(&m, &CostmapParams::default()).unwrap().cost(Cell::new(10, 10)), LETHAL);
        let open = CostmapParams {
            unknown_is_lethal: false,
            ..Default::default()
        };
        assert!(build_costmap(&m, &open).unwrap().cost(Cell::new(10, 10)) < INSCRIBED);
    }

    #[test]
    fn matches_brute_force_distances() {
        let p = CostmapParams::default();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 30;
            let cells = (0..n * n)
                .map(|_| match rng.random_range(0..20) {
                    0 => CellState::Occupied,
                    1 => CellState::Unknown,
                    _ => CellState::Free,
                })
                .collect();
            let m = TrinaryMap {
                width: n,
                height: n,
                resolution: 0.05,
                origin: Pose2D::new(2.0, 1.0, 0.0),
                cells,
            };
            let cm = build_costmap(&m, &p).unwrap();
            let lethal: Vec<Cell> = (0..n * n).filter(|&i| m.cells[i] != CellState::Free).map(|i| cm.cell_of_index(i)).collect();
            for i in 0..n * n {
                let c = cm.cell_of_index(i);
                let d2 = lethal
                    .iter()
                    .map(|o| ((c.ix - o.ix).pow(2) + (c.iy - o.iy).pow(2)) as f64)
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(cm.cost(c), p.cost_at_distance(d2.sqrt() * 0.05), "seed {seed} cell {c:?}");
            }
        }
    }

    #[test]
    fn rejects_inconsistent_params() {
        let p = CostmapParams {
            inflation_radius: 0.1,
            ..Default::default()
        };
        assert!(build_costmap(&room(10), &p).is_err());
    }
}
