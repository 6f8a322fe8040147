//! Arena layouts: a versioned TOML document with a character grid.
//!
//! Grid legend: `#` tall wall, `o` low obstacle, `~` hazard, `.` free,
//! `S` spawn, `G` goal, `E` static entity of interest. Column index maps to
//! world `x`, row index to world `z`; each cell is `cell_size` wide.

use serde::{Deserialize, Serialize};

use super::types::Voxel;
use crate::error::{Error, Result};

pub const LAYOUT_FORMAT_VERSION: u32 = 1;
/// Height (in cells) of `#` walls; low obstacles are one cell high.
pub const WALL_HEIGHT: i64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvId {
    Driving,
    Navigation,
}

impl EnvId {
    pub fn as_str(&self) -> &'static str {
        match self {
            EnvId::Driving => "driving",
            EnvId::Navigation => "navigation",
        }
    }
}

impl std::str::FromStr for EnvId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "driving" => Ok(EnvId::Driving),
            "navigation" => Ok(EnvId::Navigation),
            other => Err(Error::Config(format!(
                "unknown env `{other}` (valid: driving, navigation)"
            ))),
        }
    }
}

impl std::fmt::Display for EnvId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cell {
    Free,
    Wall,
    Low,
    Hazard,
    Goal,
}

impl Cell {
    pub fn walkable(self) -> bool {
        matches!(self, Cell::Free | Cell::Hazard | Cell::Goal)
    }

    /// Voxel category at `level` cells above the ground plane.
    pub fn voxel_at(self, level: i64) -> Voxel {
        match (self, level) {
            (_, l) if l < 0 => Voxel::Ground,
            (Cell::Wall, l) if l < WALL_HEIGHT => Voxel::Obstacle,
            (Cell::Low, 0) => Voxel::Obstacle,
            (Cell::Goal, 0) => Voxel::Goal,
            (Cell::Hazard, 0) => Voxel::Hazard,
            _ => Voxel::Empty,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutFile {
    format_version: u32,
    name: String,
    kind: EnvId,
    #[serde(default = "default_cell_size")]
    cell_size: f64,
    #[serde(default = "default_height")]
    height: f64,
    horizon: usize,
    #[serde(default)]
    spawn_heading_deg: f64,
    grid: String,
}

fn default_cell_size() -> f64 {
    1.0
}

fn default_height() -> f64 {
    4.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub name: String,
    pub kind: EnvId,
    pub cell_size: f64,
    pub height: f64,
    pub horizon: usize,
    pub spawn_heading: f64,
    pub cols: usize,
    pub rows: usize,
    pub cells: Vec<Cell>,
    pub spawn: (usize, usize),
    pub goal: (usize, usize),
    pub entities: Vec<(usize, usize)>,
    /// Source grid, kept for rendering.
    pub grid: Vec<String>,
}

pub const TRACK_A: &str = include_str!("../../../../layouts/track-A.toml");
pub const CITY_A: &str = include_str!("../../../../layouts/city-A.toml");

impl Layout {
    pub fn parse(text: &str) -> Result<Self> {
        let file: LayoutFile = toml::from_str(text).map_err(|e| Error::Layout(e.message().to_string()))?;
        if file.format_version != LAYOUT_FORMAT_VERSION {
            return Err(Error::Layout(format!(
                "unsupported format_version {} (expected {LAYOUT_FORMAT_VERSION})",
                file.format_version
            )));
        }
        if !(file.cell_size > 0.0) || !(file.height > 0.0) {
            return Err(Error::Layout("cell_size and height must be positive".into()));
        }
        if file.horizon == 0 {
            return Err(Error::Layout("horizon must be positive".into()));
        }
        let grid: Vec<String> = file
            .grid
            .lines()
            .map(|l| l.trim_end().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        let rows = grid.len();
        let cols = grid.first().map(|l| l.chars().count()).unwrap_or(0);
        if rows == 0 || cols == 0 {
            return Err(Error::Layout("empty grid".into()));
        }
        let mut cells = Vec::with_capacity(rows * cols);
        let (mut spawn, mut goal, mut entities) = (None, None, Vec::new());
        for (r, line) in grid.iter().enumerate() {
            if line.chars().count() != cols {
                return Err(Error::Layout(format!(
                    "grid row {r} has {} columns, expected {cols}",
                    line.chars().count()
                )));
            }
            for (c, ch) in line.chars().enumerate() {
                let cell = match ch {
                    '#' => Cell::Wall,
                    'o' => Cell::Low,
                    '~' => Cell::Hazard,
                    '.' => Cell::Free,
                    'S' => {
                        if spawn.replace((c, r)).is_some() {
                            return Err(Error::Layout("more than one spawn `S`".into()));
                        }
                        Cell::Free
                    }
                    'G' => {
                        if goal.replace((c, r)).is_some() {
                            return Err(Error::Layout("more than one goal `G`".into()));
                        }
                        Cell::Goal
                    }
                    'E' => {
                        entities.push((c, r));
                        Cell::Free
                    }
                    other => {
                        return Err(Error::Layout(format!(
                            "unknown grid character `{other}` at row {r}, column {c}"
                        )))
                    }
                };
                cells.push(cell);
            }
        }
        let spawn = spawn.ok_or_else(|| Error::Layout("grid has no spawn `S`".into()))?;
        let goal = goal.ok_or_else(|| Error::Layout("grid has no goal `G`".into()))?;
        if spawn == goal {
            return Err(Error::Layout("spawn and goal coincide".into()));
        }
        Ok(Self {
            name: file.name,
            kind: file.kind,
            cell_size: file.cell_size,
            height: file.height,
            horizon: file.horizon,
            spawn_heading: file.spawn_heading_deg.to_radians(),
            cols,
            rows,
            cells,
            spawn,
            goal,
            entities,
            grid,
        })
    }

    pub fn reference(kind: EnvId) -> Self {
        let text = match kind {
            EnvId::Driving => TRACK_A,
            EnvId::Navigation => CITY_A,
        };
        Self::parse(text).expect("reference layouts are valid")
    }

    pub fn size_x(&self) -> f64 {
        self.cols as f64 * self.cell_size
    }

    pub fn size_z(&self) -> f64 {
        self.rows as f64 * self.cell_size
    }

    /// Normalizer for horizontal projections.
    pub fn horizontal_scale(&self) -> f64 {
        self.size_x().max(self.size_z())
    }

    pub fn diagonal(&self) -> f64 {
        self.size_x().hypot(self.size_z())
    }

    pub fn in_bounds(&self, c: i64, r: i64) -> bool {
        c >= 0 && r >= 0 && c < self.cols as i64 && r < self.rows as i64
    }

    /// Cell at integer grid coordinates; outside the grid reads as a wall.
    pub fn cell(&self, c: i64, r: i64) -> Cell {
        if !self.in_bounds(c, r) {
            Cell::Wall
        } else {
            self.cells[r as usize * self.cols + c as usize]
        }
    }

    /// Grid coordinates containing a world point.
    pub fn cell_of(&self, x: f64, z: f64) -> (i64, i64) {
        ((x / self.cell_size).floor() as i64, (z / self.cell_size).floor() as i64)
    }

    pub fn cell_center(&self, (c, r): (usize, usize)) -> [f64; 3] {
        [
            (c as f64 + 0.5) * self.cell_size,
            0.0,
            (r as f64 + 0.5) * self.cell_size,
        ]
    }

    pub fn goal_position(&self) -> [f64; 3] {
        self.cell_center(self.goal)
    }

    pub fn spawn_position(&self) -> [f64; 3] {
        self.cell_center(self.spawn)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_layouts_parse() {
        let t = Layout::reference(EnvId::Driving);
        assert_eq!(t.name, "track-A");
        assert_eq!(t.kind, EnvId::Driving);
        let c = Layout::reference(EnvId::Navigation);
        assert_eq!(c.name, "city-A");
        assert_eq!(c.kind, EnvId::Navigation);
    }

    #[test]
    fn malformed_layouts_are_config_errors() {
        let base = "format_version = 1\nname = \"x\"\nkind = \"navigation\"\nhorizon = 10\n";
        for grid in ["###\n#S#\n###", "####\n#SG\n####", "###\n#SX#\n###", "###\n#GS\n#G#"] {
            let text = format!("{base}grid = \"\"\"\n{grid}\n\"\"\"\n");
            assert!(matches!(Layout::parse(&text), Err(Error::Layout(_))), "{grid}");
        }
        let text = "format_version = 9\nname = \"x\"\nkind = \"driving\"\nhorizon = 1\ngrid = \"SG\"\n";
        assert!(matches!(Layout::parse(text), Err(Error::Layout(_))));
    }

    #[test]
    fn outside_reads_as_wall() {
        let t = Layout::reference(EnvId::Navigation);
        assert_eq!(t.cell(-1, 0), Cell::Wall);
        assert_eq!(t.cell(0, t.rows as i64), Cell::Wall);
    }
}
