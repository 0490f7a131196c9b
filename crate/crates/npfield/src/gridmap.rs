//! Occupancy grids, robot footprints, and the pose-dependent projection of a
//! footprint onto the grid.
//!
//! Conventions used throughout the crate: cells are half-open squares with the
//! lower edges inclusive, row 0 sits at the origin corner, rows grow with `y`
//! and columns with `x`. The first body line of a map file is row 0.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;

/// Glyphs treated as free space in MovingAI map bodies.
const FREE_GLYPHS: [char; 2] = ['.', 'G'];
/// Glyphs treated as obstacles in MovingAI map bodies.
const OCCUPIED_GLYPHS: [char; 3] = ['@', 'O', 'T'];

#[derive(Debug, thiserror::Error)]
pub enum MapParseError {
    #[error("line {line}: expected `{expected}`")]
    MalformedHeader { line: usize, expected: String },
    #[error("line {line}: row has {got} glyphs, declared width is {want}")]
    RowLength { line: usize, got: usize, want: usize },
    #[error("map body has {got} rows, declared height is {want}")]
    RowCount { got: usize, want: usize },
    #[error("line {line}: unknown glyph `{glyph}`")]
    UnknownGlyph { line: usize, glyph: char },
    #[error("invalid grid: {0}")]
    Invalid(String),
}

#[derive(Debug, thiserror::Error)]
pub enum FootprintError {
    #[error("line {line}: expected `{expected}`")]
    MalformedHeader { line: usize, expected: String },
    #[error("line {line}: unknown glyph `{glyph}`")]
    UnknownGlyph { line: usize, glyph: char },
    #[error("footprint mask has no occupied cell")]
    EmptyMask,
    #[error("anchor ({0}, {1}) lies outside the mask bounds")]
    AnchorOutOfBounds(f64, f64),
    #[error("mask rows have inconsistent lengths")]
    RaggedRows,
    #[error("invalid footprint: {0}")]
    Invalid(String),
}

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("resolution mismatch: footprint {fp} m/cell vs map {map} m/cell")]
    ResolutionMismatch { fp: f64, map: f64 },
}

/// Binary obstacle raster with metric resolution and origin.
///
/// `cells` is row-major, `true` = occupied. The origin is the world position of
/// the corner of cell (0, 0).
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    width: usize,
    height: usize,
    resolution: f64,
    origin: (f64, f64),
    cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(
        width: usize,
        height: usize,
        resolution: f64,
        origin: (f64, f64),
        cells: Vec<bool>,
    ) -> Result<Self, MapParseError> {
        if width == 0 || height == 0 {
            return Err(MapParseError::Invalid("width and height must be >= 1".into()));
        }
        if !(resolution > 0.0) {
            return Err(MapParseError::Invalid(format!(
                "resolution must be > 0, got {resolution}"
            )));
        }
        if cells.len() != width * height {
            return Err(MapParseError::Invalid(format!(
                "cells.len() = {} but width*height = {}",
                cells.len(),
                width * height
            )));
        }
        Ok(Self { width, height, resolution, origin, cells })
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

    pub fn origin(&self) -> (f64, f64) {
        self.origin
    }

    /// Map extent in meters, (x span, y span).
    pub fn extent(&self) -> (f64, f64) {
        (self.width as f64 * self.resolution, self.height as f64 * self.resolution)
    }

    pub fn is_occupied(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col]
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn in_bounds(&self, row: i64, col: i64) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.height && (col as usize) < self.width
    }

    /// Floor-based binning of a world point into (row, col).
    ///
    /// Cells are half-open with the lower edge inclusive, so a point exactly on
    /// the shared edge of two cells belongs to the upper one.
    pub fn world_to_cell(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let col = ((x - self.origin.0) / self.resolution).floor();
        let row = ((y - self.origin.1) / self.resolution).floor();
        if row < 0.0 || col < 0.0 || row >= self.height as f64 || col >= self.width as f64 {
            None
        } else {
            Some((row as usize, col as usize))
        }
    }

    /// World position of a cell center.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin.0 + (col as f64 + 0.5) * self.resolution,
            self.origin.1 + (row as f64 + 0.5) * self.resolution,
        )
    }

    /// Replace the grid origin, keeping the raster.
    pub fn with_origin(mut self, origin: (f64, f64)) -> Self {
        self.origin = origin;
        self
    }

    /// Replace the resolution, keeping the raster.
    pub fn with_resolution(mut self, resolution: f64) -> Self {
        assert!(resolution > 0.0);
        self.resolution = resolution;
        self
    }

    /// Crop a `side` x `side` window whose cell (0,0) is at (row0, col0) on this
    /// grid. Cells outside the source raster are filled as occupied: beyond the
    /// known map is treated like an obstacle. The crop keeps world coordinates
    /// consistent (its origin is the world position of the window corner).
    pub fn crop(&self, row0: i64, col0: i64, side: usize) -> OccupancyGrid {
        let mut cells = vec![true; side * side];
        for r in 0..side {
            for c in 0..side {
                let sr = row0 + r as i64;
                let sc = col0 + c as i64;
                if self.in_bounds(sr, sc) {
                    cells[r * side + c] = self.is_occupied(sr as usize, sc as usize);
                }
            }
        }
        OccupancyGrid {
            width: side,
            height: side,
            resolution: self.resolution,
            origin: (
                self.origin.0 + col0 as f64 * self.resolution,
                self.origin.1 + row0 as f64 * self.resolution,
            ),
            cells,
        }
    }

    /// Nearest-neighbor resample to a `side` x `side` raster covering the same
    /// world extent. A target cell is occupied when the source cell under its
    /// center is occupied.
    pub fn resample_to(&self, side: usize) -> OccupancyGrid {
        let mut cells = vec![false; side * side];
        for r in 0..side {
            for c in 0..side {
                let sr = ((r as f64 + 0.5) * self.height as f64 / side as f64) as usize;
                let sc = ((c as f64 + 0.5) * self.width as f64 / side as f64) as usize;
                cells[r * side + c] = self.is_occupied(sr.min(self.height - 1), sc.min(self.width - 1));
            }
        }
        OccupancyGrid {
            width: side,
            height: side,
            resolution: self.resolution * self.width as f64 / side as f64,
            origin: self.origin,
            cells,
        }
    }
}

/// Parse a MovingAI `.map` file.
///
/// Header: `type octile`, `height H`, `width W` (height/width in either order),
/// then `map` and H rows of W glyphs. `.` and `G` are free, `@`, `O`, `T` are
/// occupied. The file format carries no metric scale, so the caller supplies
/// the resolution (0.02 m/cell is the usual value for these maps).
pub fn parse_movingai(text: &str, resolution: f64) -> Result<OccupancyGrid, MapParseError> {
    let mut lines = text.lines().enumerate();

    let (ln, first) = lines
        .next()
        .ok_or_else(|| MapParseError::MalformedHeader { line: 1, expected: "type octile".into() })?;
    if first.trim() != "type octile" {
        return Err(MapParseError::MalformedHeader { line: ln + 1, expected: "type octile".into() });
    }

    let mut height: Option<usize> = None;
    let mut width: Option<usize> = None;
    for _ in 0..2 {
        let (ln, line) = lines.next().ok_or_else(|| MapParseError::MalformedHeader {
            line: 0,
            expected: "height/width".into(),
        })?;
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or("");
        let value = parts
            .next()
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| MapParseError::MalformedHeader {
                line: ln + 1,
                expected: format!("{key} <positive integer>"),
            })?;
        match key {
            "height" => height = Some(value),
            "width" => width = Some(value),
            _ => {
                return Err(MapParseError::MalformedHeader {
                    line: ln + 1,
                    expected: "height <H> or width <W>".into(),
                })
            }
        }
    }
    let (height, width) = match (height, width) {
        (Some(h), Some(w)) => (h, w),
        _ => return Err(MapParseError::MalformedHeader { line: 3, expected: "both height and width".into() }),
    };

    let (ln, map_kw) = lines
        .next()
        .ok_or_else(|| MapParseError::MalformedHeader { line: 4, expected: "map".into() })?;
    if map_kw.trim() != "map" {
        return Err(MapParseError::MalformedHeader { line: ln + 1, expected: "map".into() });
    }

    let mut cells = Vec::with_capacity(width * height);
    let mut rows = 0usize;
    for (ln, line) in lines {
        if line.is_empty() && rows == height {
            break;
        }
        let glyphs: Vec<char> = line.chars().collect();
        if glyphs.len() != width {
            return Err(MapParseError::RowLength { line: ln + 1, got: glyphs.len(), want: width });
        }
        for g in glyphs {
            if FREE_GLYPHS.contains(&g) {
                cells.push(false);
            } else if OCCUPIED_GLYPHS.contains(&g) {
                cells.push(true);
            } else {
                return Err(MapParseError::UnknownGlyph { line: ln + 1, glyph: g });
            }
        }
        rows += 1;
    }
    if rows != height {
        return Err(MapParseError::RowCount { got: rows, want: height });
    }
    OccupancyGrid::new(width, height, resolution, (0.0, 0.0), cells)
}

/// Serialize a grid back to MovingAI text (`.` free, `@` occupied).
pub fn to_movingai(map: &OccupancyGrid) -> String {
    let mut out = String::new();
    out.push_str("type octile\n");
    out.push_str(&format!("height {}\n", map.height()));
    out.push_str(&format!("width {}\n", map.width()));
    out.push_str("map\n");
    for r in 0..map.height() {
        for c in 0..map.width() {
            out.push(if map.is_occupied(r, c) { '@' } else { '.' });
        }
        out.push('\n');
    }
    out
}

/// Robot pose in world coordinates. `theta` is normalized to (-pi, pi] on
/// construction so that poses differing by full turns compare and evaluate
/// identically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta: normalize_angle(theta) }
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.theta)
    }
}

/// Wrap an angle into (-pi, pi] by repeated subtraction, which keeps values
/// already in range bit-identical.
pub fn normalize_angle(mut theta: f64) -> f64 {
    assert!(theta.is_finite(), "angle must be finite");
    while theta > PI {
        theta -= 2.0 * PI;
    }
    while theta <= -PI {
        theta += 2.0 * PI;
    }
    theta
}

/// Binary robot-shape mask in the robot frame.
///
/// The robot's forward direction is +x (columns), the anchor is the robot
/// reference point in fractional (row, col) mask coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Footprint {
    mask_width: usize,
    mask_height: usize,
    mask: Vec<bool>,
    resolution: f64,
    anchor: (f64, f64),
    id: String,
}

impl Footprint {
    pub fn new(
        mask_width: usize,
        mask_height: usize,
        mask: Vec<bool>,
        resolution: f64,
        anchor: (f64, f64),
        id: impl Into<String>,
    ) -> Result<Self, FootprintError> {
        if mask.len() != mask_width * mask_height {
            return Err(FootprintError::Invalid(format!(
                "mask.len() = {} but {}x{} declared",
                mask.len(),
                mask_width,
                mask_height
            )));
        }
        if !(resolution > 0.0) {
            return Err(FootprintError::Invalid("resolution must be > 0".into()));
        }
        if !mask.iter().any(|&m| m) {
            return Err(FootprintError::EmptyMask);
        }
        let (ar, ac) = anchor;
        if !(ar >= 0.0 && ar <= mask_height as f64 && ac >= 0.0 && ac <= mask_width as f64) {
            return Err(FootprintError::AnchorOutOfBounds(ar, ac));
        }
        Ok(Self { mask_width, mask_height, mask, resolution, anchor, id: id.into() })
    }

    pub fn mask_width(&self) -> usize {
        self.mask_width
    }

    pub fn mask_height(&self) -> usize {
        self.mask_height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn anchor(&self) -> (f64, f64) {
        self.anchor
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn is_set(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.mask_width + col]
    }

    pub fn occupied_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Offsets of occupied mask-cell centers from the anchor, in meters, in the
    /// footprint frame (x forward along columns, y along rows).
    pub fn cell_offsets(&self) -> Vec<(f64, f64)> {
        let mut offsets = Vec::with_capacity(self.occupied_count());
        for r in 0..self.mask_height {
            for c in 0..self.mask_width {
                if self.is_set(r, c) {
                    offsets.push((
                        (c as f64 + 0.5 - self.anchor.1) * self.resolution,
                        (r as f64 + 0.5 - self.anchor.0) * self.resolution,
                    ));
                }
            }
        }
        offsets
    }

    /// Number of occupied mask cells on the mask boundary (having at least one
    /// free or out-of-mask 4-neighbor). Used by the rasterization bound.
    pub fn perimeter_count(&self) -> usize {
        let mut n = 0;
        for r in 0..self.mask_height {
            for c in 0..self.mask_width {
                if !self.is_set(r, c) {
                    continue;
                }
                let neighbors = [
                    (r as i64 - 1, c as i64),
                    (r as i64 + 1, c as i64),
                    (r as i64, c as i64 - 1),
                    (r as i64, c as i64 + 1),
                ];
                let boundary = neighbors.iter().any(|&(nr, nc)| {
                    nr < 0
                        || nc < 0
                        || nr as usize >= self.mask_height
                        || nc as usize >= self.mask_width
                        || !self.is_set(nr as usize, nc as usize)
                });
                if boundary {
                    n += 1;
                }
            }
        }
        n
    }
}

/// Parse the footprint mask text format: `resolution <m>`, `anchor <row> <col>`,
/// then `#`/`.` raster rows.
pub fn parse_footprint(text: &str, id: impl Into<String>) -> Result<Footprint, FootprintError> {
    let mut lines = text.lines().enumerate();

    let (ln, res_line) = lines.next().ok_or_else(|| FootprintError::MalformedHeader {
        line: 1,
        expected: "resolution <m>".into(),
    })?;
    let resolution = res_line
        .strip_prefix("resolution ")
        .and_then(|v| v.trim().parse::<f64>().ok())
        .ok_or_else(|| FootprintError::MalformedHeader { line: ln + 1, expected: "resolution <m>".into() })?;

    let (ln, anchor_line) = lines.next().ok_or_else(|| FootprintError::MalformedHeader {
        line: 2,
        expected: "anchor <row> <col>".into(),
    })?;
    let anchor_parts: Vec<f64> = anchor_line
        .strip_prefix("anchor ")
        .map(|rest| rest.split_whitespace().filter_map(|v| v.parse().ok()).collect())
        .unwrap_or_default();
    if anchor_parts.len() != 2 {
        return Err(FootprintError::MalformedHeader { line: ln + 1, expected: "anchor <row> <col>".into() });
    }

    let mut mask = Vec::new();
    let mut width = None;
    let mut height = 0usize;
    for (ln, line) in lines {
        if line.is_empty() {
            continue;
        }
        let row: Vec<char> = line.chars().collect();
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => return Err(FootprintError::RaggedRows),
            _ => {}
        }
        for g in row {
            match g {
                '#' => mask.push(true),
                '.' => mask.push(false),
                other => return Err(FootprintError::UnknownGlyph { line: ln + 1, glyph: other }),
            }
        }
        height += 1;
    }
    let width = width.ok_or(FootprintError::EmptyMask)?;
    Footprint::new(width, height, mask, resolution, (anchor_parts[0], anchor_parts[1]), id)
}

/// Serialize a footprint to the mask text format.
pub fn footprint_to_text(fp: &Footprint) -> String {
    let mut out = format!("resolution {}\nanchor {} {}\n", fp.resolution, fp.anchor.0, fp.anchor.1);
    for r in 0..fp.mask_height {
        for c in 0..fp.mask_width {
            out.push(if fp.is_set(r, c) { '#' } else { '.' });
        }
        out.push('\n');
    }
    out
}

/// Map cells covered by a projected footprint. `cells` is sorted (row, col);
/// `out_of_bounds` counts mask cells that landed outside the map and stand for
/// virtual maximal-potential coverage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellSet {
    pub cells: Vec<(usize, usize)>,
    pub out_of_bounds: usize,
}

impl CellSet {
    pub fn is_empty(&self) -> bool {
        self.cells.is_empty() && self.out_of_bounds == 0
    }
}

/// Project a footprint onto the map at a pose.
///
/// Each occupied mask-cell center is rotated about the anchor, translated to
/// the pose, and binned into a map cell; the coverage is the union over mask
/// cells. Mask cells that land outside the raster are counted separately.
pub fn project_footprint(
    map: &OccupancyGrid,
    fp: &Footprint,
    pose: Pose,
) -> Result<CellSet, GridError> {
    if fp.resolution() != map.resolution() {
        return Err(GridError::ResolutionMismatch { fp: fp.resolution(), map: map.resolution() });
    }
    let (sin, cos) = pose.theta.sin_cos();
    let mut cells = BTreeSet::new();
    let mut out_of_bounds = 0usize;
    for (fx, fy) in fp.cell_offsets() {
        let wx = pose.x + fx * cos - fy * sin;
        let wy = pose.y + fx * sin + fy * cos;
        match map.world_to_cell(wx, wy) {
            Some(cell) => {
                cells.insert(cell);
            }
            None => out_of_bounds += 1,
        }
    }
    Ok(CellSet { cells: cells.into_iter().collect(), out_of_bounds })
}
