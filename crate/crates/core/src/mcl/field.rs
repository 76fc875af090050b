use crate::distance::squared_edt;
use crate::error::{Error, Result};
use crate::geometry::Pose2D;
use crate::grid::{Cell, OccupancyGrid};

/// Per-cell Gaussian score of the distance to the nearest occupied cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodField {
    width: usize,
    height: usize,
    resolution: f64,
    origin: Pose2D,
    sigma: f64,
    max_dist: f64,
    distances: Vec<f64>,
    values: Vec<f64>,
}

impl LikelihoodField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn max_dist(&self) -> f64 {
        self.max_dist
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Capped distance (m) to the nearest occupied cell center.
    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    /// Score given to points off the lattice or beyond `max_dist`.
    pub fn floor_value(&self) -> f64 {
        gaussian(self.max_dist, self.sigma)
    }

    pub fn value(&self, cell: Cell) -> f64 {
        if cell.ix < 0 || cell.iy < 0 || cell.ix as usize >= self.width || cell.iy as usize >= self.height {
            return self.floor_value();
        }
        self.values[cell.iy as usize * self.width + cell.ix as usize]
    }

    /// Score at a world point (nearest-cell lookup).
    pub fn value_at(&self, x: f64, y: f64) -> f64 {
        let local = self.origin.between(&Pose2D { x, y, theta: 0.0 });
        let gx = (local.x / self.resolution).floor();
        let gy = (local.y / self.resolution).floor();
        if !(gx >= 0.0 && gy >= 0.0) {
            return self.floor_value();
        }
        self.value(Cell::new(gx as i64, gy as i64))
    }
}

fn gaussian(d: f64, sigma: f64) -> f64 {
    (-d * d / (2.0 * sigma * sigma)).exp()
}

/// Builds the field with an exact distance transform, then the Gaussian kernel.
pub fn build_likelihood_field(grid: &OccupancyGrid, sigma: f64, max_dist: f64) -> Result<LikelihoodField> {
    if !(sigma > 0.0 && sigma.is_finite()) || !(max_dist > 0.0) {
        return Err(Error::InvalidArgument("sigma and max_dist must be positive".into()));
    }
    let (w, h) = (grid.width(), grid.height());
    let seeds: Vec<bool> = grid.cells().iter().map(|&l| l > 0.0).collect();
    if !seeds.iter().any(|&s| s) {
        return Err(Error::NoOccupiedCells);
    }
    let res = grid.resolution();
    let distances: Vec<f64> = squared_edt(w, h, &seeds)
        .into_iter()
        .map(|d2| (d2.sqrt() * res).min(max_dist))
        .collect();
    let values = distances.iter().map(|&d| gaussian(d, sigma)).collect();
    Ok(LikelihoodField {
        width: w,
        height: h,
        resolution: res,
        origin: grid.origin(),
        sigma,
        max_dist,
        distances,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::LOG_ODDS_MAX;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(seed: u64) -> OccupancyGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = OccupancyGrid::new(20, 20, 0.05, Pose2D::new(1.0, -2.0, 0.3));
        for i in 0..400 {
            if rng.random_bool(0.08) {
                g.set_log_odds(g.cell_of_index(i), LOG_ODDS_MAX);
            }
        }
        g.set_log_odds(Cell::new(3, 4), LOG_ODDS_MAX);
        g
    }

    #[test]
    fn occupied_cells_score_one_and_far_cells_hit_the_cap() {
        let mut g = OccupancyGrid::new(40, 40, 0.05, Pose2D::identity());
        g.set_log_odds(Cell::new(0, 0), LOG_ODDS_MAX);
        let f = build_likelihood_field(&g, 0.1, 0.5).unwrap();
        assert_eq!(f.value(Cell::new(0, 0)), 1.0);
        assert_eq!(f.value(Cell::new(39, 39)), (-(0.5f64 * 0.5) / (2.0 * 0.1 * 0.1)).exp());
        assert!(f.values().iter().all(|&v| v > 0.0 && v <= 1.0));
        assert!(f.value(Cell::new(1, 0)) > f.value(Cell::new(2, 0)));
    }

    #[test]
    fn equals_brute_force_on_toy_grids() {
        for seed in 0..20 {
            let g = toy(seed);
            let f = build_likelihood_field(&g, 0.1, 0.4).unwrap();
            let occupied: Vec<Cell> = (0..400).map(|i| g.cell_of_index(i)).filter(|&c| g.is_occupied(c)).collect();
            for i in 0..400 {
                let c = g.cell_of_index(i);
                let d2 = occupied
                    .iter()
                    .map(|o| ((c.ix - o.ix).pow(2) + (c.iy - o.iy).pow(2)) as f64)
                    .fold(f64::INFINITY, f64::min);
                let d = (d2.sqrt() * 0.05).min(0.4);
                assert_eq!(f.value(c), (-d * d / (2.0 * 0.1 * 0.1)).exp(), "seed {seed} cell {c:?}");
            }
        }
    }

    #[test]
    fn rejects_empty_grid() {
        let g = OccupancyGrid::new(5, 5, 0.05, Pose2D::identity());
        assert!(matches!(build_likelihood_field(&g, 0.1, 1.0), Err(Error::NoOccupiedCells)));
    }
}
