use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose2D;
use crate::grid::{Cell, OccupancyGrid, LOG_ODDS_MAX, LOG_ODDS_MIN};
use crate::map_io;
use crate::vlp::{LedBeacon, LedFeatureMap};

pub const CELL_SIZE: f64 = 0.05;

/// Axis-aligned rectangle in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn ray_intersection(&self, x: f64, y: f64, bearing: f64) -> Option<f64> {
        let (dy, dx) = bearing.sin_cos();
        ray_rect(x, y, dx, dy, self)
    }

    /// Whether a disc overlaps the rectangle.
    pub fn overlaps_disc(&self, x: f64, y: f64, radius: f64) -> bool {
        let nx = x.clamp(self.x0, self.x1);
        let ny = y.clamp(self.y0, self.y1);
        (x - nx).hypot(y - ny) < radius
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Rect {
        Rect::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Bounds {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }
}

/// Vector floorplan: walls and furniture as rectangles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Floorplan {
    pub bounds: Bounds,
    pub rects: Vec<Rect>,
}

impl Floorplan {
    /// Rasterizes at `resolution`; a cell is occupied when its center lies in a rectangle.
    pub fn rasterize(&self, resolution: f64) -> OccupancyGrid {
        let b = &self.bounds;
        let width = (b.width() / resolution).round() as usize;
        let height = (b.height() / resolution).round() as usize;
        let mut grid = OccupancyGrid::new(width, height, resolution, Pose2D::new(b.min_x, b.min_y, 0.0));
        for iy in 0..height as i64 {
            for ix in 0..width as i64 {
                let c = Cell::new(ix, iy);
                let (x, y) = grid.cell_center(c);
                let occupied = self.rects.iter().any(|r| r.contains(x, y));
                grid.set_log_odds(c, if occupied { LOG_ODDS_MAX } else { LOG_ODDS_MIN });
            }
        }
        grid
    }

    /// Distance along a ray to the first rectangle boundary (slab intersection).
    pub fn ray_intersection(&self, x: f64, y: f64, bearing: f64) -> Option<f64> {
        let (dy, dx) = bearing.sin_cos();
        self.rects
            .iter()
            .filter_map(|r| ray_rect(x, y, dx, dy, r))
            .min_by(f64::total_cmp)
    }
}

fn ray_rect(x: f64, y: f64, dx: f64, dy: f64, r: &Rect) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for (o, d, lo, hi) in [(x, dx, r.x0, r.x1), (y, dy, r.y0, r.y1)] {
        if d.abs() < 1e-15 {
            if o < lo || o > hi {
                return None;
            }
        } else {
            let (t0, t1) = ((lo - o) / d, (hi - o) / d);
            t_near = t_near.max(t0.min(t1));
            t_far = t_far.min(t0.max(t1));
        }
    }
    (t_near <= t_far && t_far >= 0.0).then_some(t_near.max(0.0))
}

/// Ground-truth world: binary occupancy, LED map and extent.
#[derive(Debug, Clone)]
pub struct WorldModel {
    pub name: String,
    pub grid: OccupancyGrid,
    pub led_map: LedFeatureMap,
    pub bounds: Bounds,
    /// Vector source of `grid`, when the world was built from one.
    pub floorplan: Option<Floorplan>,
}

impl WorldModel {
    pub fn from_floorplan(name: &str, floorplan: Floorplan, leds: Vec<LedBeacon>) -> Result<Self> {
        let world = Self {
            name: name.to_string(),
            grid: floorplan.rasterize(CELL_SIZE),
            led_map: LedFeatureMap::new(leds)?,
            bounds: floorplan.bounds,
            floorplan: Some(floorplan),
        };
        world.validate(0.0)?;
        Ok(world)
    }

    /// LEDs must sit inside the bounds and above the camera.
    pub fn validate(&self, camera_height: f64) -> Result<()> {
        for b in self.led_map.iter() {
            if !self.bounds.contains(b.x, b.y) {
                return Err(Error::InvalidArgument(format!("LED {} lies outside the world bounds", b.id)));
            }
            if b.z <= camera_height {
                return Err(Error::InvalidArgument(format!("LED {} is not above the camera", b.id)));
            }
        }
        Ok(())
    }

    pub fn is_free(&self, x: f64, y: f64, radius: f64) -> bool {
        self.bounds.contains(x, y)
            && !self.grid.is_occupied(self.grid.world_to_cell(x, y))
            && !self.grid.disc_hits_occupied(x, y, radius)
    }

    /// Writes `<dir>/<name>.toml`, `<name>.yaml` and `<name>.pgm`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let map_yaml = dir.join(format!("{}.yaml", self.name));
        let trinary = crate::mapping::binarize(&self.grid, 0.65, 0.25)?;
        map_io::save_map(&map_yaml, &trinary, 0.65, 0.25, None)?;
        let doc = WorldFile {
            world: WorldSection {
                name: self.name.clone(),
                map: format!("{}.yaml", self.name),
                bounds: [self.bounds.min_x, self.bounds.min_y, self.bounds.max_x, self.bounds.max_y],
            },
            leds: self.led_map.iter().copied().collect(),
            floorplan: self.floorplan.as_ref().map(|f| f.rects.clone()),
        };
        let path = dir.join(format!("{}.toml", self.name));
        let text = toml::to_string_pretty(&doc).map_err(|e| Error::parse("world file", e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: WorldFile = toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        let map_path = path.parent().unwrap_or_else(|| Path::new(".")).join(&doc.world.map);
        let grid = map_io::load_grid(&map_path)?;
        let [min_x, min_y, max_x, max_y] = doc.world.bounds;
        let bounds = Bounds { min_x, min_y, max_x, max_y };
        let world = Self {
            name: doc.world.name,
            grid,
            led_map: LedFeatureMap::new(doc.leds)?,
            bounds,
            floorplan: doc.floorplan.map(|rects| Floorplan { bounds, rects }),
        };
        world.validate(0.0)?;
        Ok(world)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WorldSection {
    name: String,
    /// Map sidecar path, relative to the world file.
    map: String,
    bounds: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct WorldFile {
    world: WorldSection,
    #[serde(default)]
    leds: Vec<LedBeacon>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    floorplan: Option<Vec<Rect>>,
}

pub const LED_HEIGHT: f64 = 2.7;
pub const LED_DIAMETER: f64 = 0.175;

fn led(id: u32, x: f64, y: f64) -> LedBeacon {
    LedBeacon {
        id,
        x,
        y,
        z: LED_HEIGHT,
        diameter: LED_DIAMETER,
    }
}

/// The two similar corridors of the lab: left and right copies, 6 m apart.
pub const LEFT_CORRIDOR: Rect = Rect::new(1.0, 4.5, 2.0, 8.5);
pub const RIGHT_CORRIDOR: Rect = Rect::new(7.0, 4.5, 8.0, 8.5);

/// 12.0 × 10.8 m lab with four LEDs at 2.7 m. The LED-map origin (0, 0) is in free space.
pub fn lab_floorplan() -> Floorplan {
    let bounds = Bounds {
        min_x: -1.0,
        min_y: -1.0,
        max_x: 11.0,
        max_y: 9.8,
    };
    let mut rects = vec![
        // Outer walls.
        Rect::new(-1.0, -1.0, 11.0, -0.9),
        Rect::new(-1.0, 9.7, 11.0, 9.8),
        Rect::new(-1.0, -1.0, -0.9, 9.8),
        Rect::new(10.9, -1.0, 11.0, 9.8),
        // Central block between the corridors.
        Rect::new(3.5, 5.5, 5.5, 7.5),
        // Furniture.
        Rect::new(2.0, -0.9, 3.5, -0.5),
        Rect::new(4.6, 2.6, 5.2, 3.2),
        Rect::new(6.0, 1.0, 6.6, 1.6),
        Rect::new(9.4, 0.8, 9.8, 1.2),
        Rect::new(10.4, 5.0, 10.9, 7.0),
        Rect::new(-0.9, 8.9, -0.3, 9.7),
    ];
    // Corridor side walls, identical up to a 6 m shift.
    for shift in [0.0, 6.0] {
        rects.push(Rect::new(0.9, 4.5, 1.0, 8.5).translated(shift, 0.0));
        rects.push(Rect::new(2.0, 4.5, 2.1, 8.5).translated(shift, 0.0));
    }
    Floorplan { bounds, rects }
}

pub fn lab_leds() -> Vec<LedBeacon> {
    vec![led(1, 1.5, 3.0), led(2, 3.5, 2.0), led(3, 7.0, 0.8), led(4, 9.0, 3.5)]
}

pub fn lab_world() -> WorldModel {
    WorldModel::from_floorplan("lab", lab_floorplan(), lab_leds()).expect("bundled lab world is valid")
}

/// Empty square room of `size` meters (inner free space) with 10 cm walls; origin at the center.
pub fn empty_room(size: f64) -> WorldModel {
    let h = size / 2.0;
    let t = 0.1;
    let bounds = Bounds {
        min_x: -h - t,
        min_y: -h - t,
        max_x: h + t,
        max_y: h + t,
    };
    let rects = vec![
        Rect::new(-h - t, -h - t, h + t, -h),
        Rect::new(-h - t, h, h + t, h + t),
        Rect::new(-h - t, -h - t, -h, h + t),
        Rect::new(h, -h - t, h + t, h + t),
    ];
    WorldModel::from_floorplan(
        "empty-room",
        Floorplan { bounds, rects },
        vec![led(1, 0.0, 0.0)],
    )
    .expect("empty room is valid")
}
