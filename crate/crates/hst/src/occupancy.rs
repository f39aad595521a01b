//! Plain-text occupancy grids.
//!
//! ```text
//! # comment lines start with '#'
//! 4 2 0.5 -1.0 -0.5
//! 0110
//! 0000
//! ```
//! The header is `width height cell_size_m origin_x origin_y`; each of the
//! `height` rows that follow holds `width` cells, `1` meaning occupied.
//! Row 0 is the first row and starts at `origin_y`. Spaces between cells
//! are allowed.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use hst_core::scene::OccupancyGrid;

use crate::fsio;

pub fn parse_occupancy(text: &str) -> Result<OccupancyGrid> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (n, header) = lines.next().ok_or_else(|| anyhow!("empty occupancy file"))?;
    let f: Vec<&str> = header.split_whitespace().collect();
    if f.len() != 5 {
        bail!("line {n}: header needs width height cell_size_m origin_x origin_y");
    }
    let width: usize = f[0].parse().with_context(|| format!("line {n}: width"))?;
    let height: usize = f[1].parse().with_context(|| format!("line {n}: height"))?;
    let nums: Vec<f64> = f[2..]
        .iter()
        .map(|s| s.parse::<f64>().with_context(|| format!("line {n}: '{s}' is not a number")))
        .collect::<Result<_>>()?;
    let mut cells = Vec::with_capacity(width * height);
    let mut rows = 0;
    for (n, line) in lines {
        let row: Vec<bool> = line
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(anyhow!("line {n}: unexpected cell '{c}'")),
            })
            .collect::<Result<_>>()?;
        if row.len() != width {
            bail!("line {n}: row has {} cells, header says {width}", row.len());
        }
        cells.extend(row);
        rows += 1;
    }
    if rows != height {
        bail!("grid has {rows} rows, header says {height}");
    }
    Ok(OccupancyGrid::new(width, height, nums[0], [nums[1], nums[2]], cells)?)
}

pub fn format_occupancy(grid: &OccupancyGrid) -> String {
    let mut out = format!(
        "{} {} {} {} {}\n",
        grid.width, grid.height, grid.cell_size, grid.origin[0], grid.origin[1]
    );
    for row in grid.cells.chunks(grid.width) {
        out.extend(row.iter().map(|&c| if c { '1' } else { '0' }));
        out.push('\n');
    }
    out
}

pub fn read_occupancy(path: &Path) -> Result<OccupancyGrid> {
    parse_occupancy(&fsio::read_to_string(path)?).map_err(|e| anyhow!("{}: {e}", path.display()))
}

pub fn write_occupancy(path: &Path, grid: &OccupancyGrid) -> Result<()> {
    fsio::write_atomic_str(path, &format_occupancy(grid))
}
