//! Top-down RGB renders of a grid with tracks drawn over it.

use std::path::Path;

use crate::error::Result;
use crate::geometry::Pose2D;
use crate::grid::{Cell, OccupancyGrid};
use crate::map_io::write_ppm;

pub const GREEN: [u8; 3] = [0, 160, 0];
pub const RED: [u8; 3] = [220, 0, 0];
pub const BLUE: [u8; 3] = [0, 60, 230];
pub const ORANGE: [u8; 3] = [240, 140, 0];

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    frame: OccupancyGrid,
    /// Row-major, bottom row first (grid order).
    rgb: Vec<[u8; 3]>,
}

impl Raster {
    /// Occupied black, unknown gray, free white.
    pub fn from_grid(grid: &OccupancyGrid) -> Self {
        let rgb = grid
            .cells()
            .iter()
            .map(|&l| match l {
                l if l > 0.0 => [0, 0, 0],
                l if l < 0.0 => [255, 255, 255],
                _ => [190, 190, 190],
            })
            .collect();
        Self {
            frame: OccupancyGrid::new(grid.width(), grid.height(), grid.resolution(), grid.origin()),
            rgb,
        }
    }

    pub fn width(&self) -> usize {
        self.frame.width()
    }

    pub fn height(&self) -> usize {
        self.frame.height()
    }

    fn put(&mut self, c: Cell, color: [u8; 3]) {
        if let Some(i) = self.frame.index(c) {
            self.rgb[i] = color;
        }
    }

    /// Marks the cell under a world point and its 4-neighbours.
    pub fn dot(&mut self, x: f64, y: f64, color: [u8; 3]) {
        let c = self.frame.world_to_cell(x, y);
        for (dx, dy) in [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)] {
            self.put(Cell::new(c.ix + dx, c.iy + dy), color);
        }
    }

    pub fn polyline(&mut self, poses: &[Pose2D], color: [u8; 3]) {
        for w in poses.windows(2) {
            for c in self.frame.segment_cells(w[0].x, w[0].y, w[1].x, w[1].y) {
                self.put(c, color);
            }
        }
        match poses {
            [p] => self.dot(p.x, p.y, color),
            [.., last] => self.put(self.frame.world_to_cell(last.x, last.y), color),
            [] => {}
        }
    }

    /// Top row first, as image formats expect.
    pub fn to_rows(&self) -> Vec<[u8; 3]> {
        let (w, h) = (self.width(), self.height());
        (0..h).rev().flat_map(|r| self.rgb[r * w..(r + 1) * w].iter().copied()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_ppm(path, self.width(), self.height(), &self.to_rows())
    }
}
