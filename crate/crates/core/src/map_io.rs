//! Grid maps on disk: a binary PGM raster plus a YAML sidecar in the usual
//! `map_server` layout (`image`, `resolution`, `origin`, `negate`, thresholds).
//!
//! Rows are written top-down, so the first raster row is the highest `y` row of
//! the grid. Pixels encode the trinary map: occupied 0, free 254, unknown 128.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose2D;
use crate::grid::{CellState, OccupancyGrid, TrinaryMap};

pub const PIXEL_OCCUPIED: u8 = 0;
pub const PIXEL_FREE: u8 = 254;
pub const PIXEL_UNKNOWN: u8 = 128;

/// Alignment record written by the mapper once its frame has been tied to the LED map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorRecord {
    pub anchored: bool,
    /// Mapper-start frame to LED-map frame, as `[x, y, yaw]`.
    pub transform: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapMetadata {
    pub image: String,
    pub resolution: f64,
    pub origin: [f64; 3],
    #[serde(default)]
    pub negate: u8,
    pub occupied_thresh: f64,
    pub free_thresh: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<AnchorRecord>,
}

impl MapMetadata {
    pub fn origin_pose(&self) -> Pose2D {
        Pose2D::new(self.origin[0], self.origin[1], self.origin[2])
    }
}

fn encode_pixel(state: CellState) -> u8 {
    match state {
        CellState::Occupied => PIXEL_OCCUPIED,
        CellState::Free => PIXEL_FREE,
        CellState::Unknown => PIXEL_UNKNOWN,
    }
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[[u8; 3]]) -> Result<()> {
    assert_eq!(rgb.len(), width * height);
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    for px in rgb {
        bytes.extend_from_slice(px);
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a binary (P5) or ASCII (P2) graymap with maxval 255.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|m| Error::parse(path.display().to_string(), m))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let mut pos = 0;
    let mut tokens = Vec::new();
    // Header: magic, width, height, maxval; '#' comments allowed.
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    let magic = tokens[0].as_str();
    let width: usize = tokens[1].parse().map_err(|_| "bad width")?;
    let height: usize = tokens[2].parse().map_err(|_| "bad height")?;
    let maxval: usize = tokens[3].parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    match magic {
        "P5" => {
            pos += 1; // single whitespace after maxval
            let data = bytes.get(pos..pos + width * height).ok_or("truncated raster")?;
            Ok((width, height, data.to_vec()))
        }
        "P2" => {
            let text = String::from_utf8_lossy(&bytes[pos..]);
            let data: std::result::Result<Vec<u8>, _> =
                text.split_ascii_whitespace().take(width * height).map(str::parse).collect();
            let data = data.map_err(|_| "bad pixel value")?;
            if data.len() != width * height {
                return Err("truncated raster".into());
            }
            Ok((width, height, data))
        }
        other => Err(format!("unsupported magic {other}")),
    }
}

/// Renders a trinary map into top-down raster order.
pub fn trinary_to_pixels(map: &TrinaryMap) -> Vec<u8> {
    let mut px = Vec::with_capacity(map.width * map.height);
    for row in (0..map.height).rev() {
        for col in 0..map.width {
            px.push(encode_pixel(map.cells[row * map.width + col]));
        }
    }
    px
}

/// Writes `<stem>.pgm` and `<stem>.yaml`; `yaml_path` names the sidecar.
pub fn save_map(
    yaml_path: &Path,
    map: &TrinaryMap,
    occupied_thresh: f64,
    free_thresh: f64,
    anchor: Option<AnchorRecord>,
) -> Result<()> {
    let pgm_path = yaml_path.with_extension("pgm");
    let image = pgm_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| Error::InvalidArgument(format!("bad map path {}", yaml_path.display())))?;
    write_pgm(&pgm_path, map.width, map.height, &trinary_to_pixels(map))?;
    let meta = MapMetadata {
        image,
        resolution: map.resolution,
        origin: [map.origin.x, map.origin.y, map.origin.theta],
        negate: 0,
        occupied_thresh,
        free_thresh,
        anchor,
    };
    let text = serde_yaml::to_string(&meta).map_err(|e| Error::parse("map metadata", e))?;
    fs::write(yaml_path, text).map_err(|e| Error::io(yaml_path, e))
}

pub fn read_metadata(yaml_path: &Path) -> Result<MapMetadata> {
    let text = fs::read_to_string(yaml_path).map_err(|e| Error::io(yaml_path, e))?;
    serde_yaml::from_str(&text).map_err(|e| Error::parse(yaml_path.display().to_string(), e))
}

pub fn image_path(yaml_path: &Path, meta: &MapMetadata) -> PathBuf {
    let img = Path::new(&meta.image);
    if img.is_absolute() {
        img.to_path_buf()
    } else {
        yaml_path.parent().unwrap_or_else(|| Path::new(".")).join(img)
    }
}

/// Loads a map sidecar and its raster into a trinary map, applying the sidecar thresholds.
pub fn load_map(yaml_path: &Path) -> Result<(TrinaryMap, MapMetadata)> {
    let meta = read_metadata(yaml_path)?;
    let (width, height, pixels) = read_pgm(&image_path(yaml_path, &meta))?;
    let mut cells = vec![CellState::Unknown; width * height];
    for (i, &v) in pixels.iter().enumerate() {
        let (row_from_top, col) = (i / width, i % width);
        let row = height - 1 - row_from_top;
        let value = if meta.negate != 0 { v as f64 } else { 255.0 - v as f64 };
        let p = value / 255.0;
        cells[row * width + col] = if p > meta.occupied_thresh {
            CellState::Occupied
        } else if p < meta.free_thresh {
            CellState::Free
        } else {
            CellState::Unknown
        };
    }
    let map = TrinaryMap {
        width,
        height,
        resolution: meta.resolution,
        origin: meta.origin_pose(),
        cells,
    };
    Ok((map, meta))
}

/// Loads a map as a binary ground-truth grid (unknown cells count as free).
pub fn load_grid(yaml_path: &Path) -> Result<OccupancyGrid> {
    let (mut map, _) = load_map(yaml_path)?;
    for c in &mut map.cells {
        if *c == CellState::Unknown {
            *c = CellState::Free;
        }
    }
    Ok(map.to_grid())
}
