//! Slope, aspect and curvature from a gridded DEM.
//!
//! Gradients use Horn's 3×3 weighted differences; curvature is the general
//! curvature `−2(D + E)` of the Zevenbergen–Thorne quadratic surface. Border
//! pixels see an edge-replicated neighbourhood, so outputs match the input
//! shape.

use crate::error::{Error, Result};
use crate::raster::Grid;

/// Aspect value for cells with no downhill direction.
pub const FLAT_ASPECT: f32 = -1.0;
/// Slopes (degrees) below this are treated as flat.
pub const FLAT_SLOPE_DEG: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TerrainLayers {
    /// Degrees in `[0, 90]`.
    pub slope: Grid<f32>,
    /// Compass direction of steepest descent, degrees clockwise from north
    /// in `[0, 360)`, or [`FLAT_ASPECT`].
    pub aspect: Grid<f32>,
    /// `1 / map unit`; positive on convex-down (peaked) surfaces.
    pub curvature: Grid<f32>,
}

/// Derives terrain layers. Rows are assumed to run north → south and
/// columns west → east, with square pixels of `pixel_size` map units.
pub fn derive_terrain(dem: &Grid<f32>, pixel_size: f64) -> Result<TerrainLayers> {
    let (rows, cols) = dem.shape();
    if rows < 3 || cols < 3 {
        return Err(Error::TooSmall(format!("DEM {rows}x{cols} is smaller than 3x3")));
    }
    if !(pixel_size > 0.0 && pixel_size.is_finite()) {
        return Err(Error::InvalidSpec(format!("pixel size {pixel_size} must be positive")));
    }
    let mut slope = Grid::filled(rows, cols, 0.0f32);
    let mut aspect = Grid::filled(rows, cols, FLAT_ASPECT);
    let mut curvature = Grid::filled(rows, cols, 0.0f32);
    let l2 = pixel_size * pixel_size;

    for r in 0..rows {
        for c in 0..cols {
            let z = |dr: isize, dc: isize| dem.get_clamped(r as isize + dr, c as isize + dc) as f64;
            let (a, b, cc) = (z(-1, -1), z(-1, 0), z(-1, 1));
            let (d, e, f) = (z(0, -1), z(0, 0), z(0, 1));
            let (g, h, i) = (z(1, -1), z(1, 0), z(1, 1));

            // eastward and southward (row-increasing) derivatives
            let dz_dx = ((cc + 2.0 * f + i) - (a + 2.0 * d + g)) / (8.0 * pixel_size);
            let dz_drow = ((g + 2.0 * h + i) - (a + 2.0 * b + cc)) / (8.0 * pixel_size);
            let s = dz_dx.hypot(dz_drow).atan().to_degrees();
            slope.set(r, c, s as f32);
            if s >= FLAT_SLOPE_DEG {
                // descent vector: east = −dz/dx, north = +dz/drow
                let mut asp = (-dz_dx).atan2(dz_drow).to_degrees();
                if asp < 0.0 {
                    asp += 360.0;
                }
                if asp >= 360.0 {
                    asp -= 360.0;
                }
                aspect.set(r, c, asp as f32);
            }

            let zt_d = ((d + f) / 2.0 - e) / l2;
            let zt_e = ((b + h) / 2.0 - e) / l2;
            curvature.set(r, c, (-2.0 * (zt_d + zt_e)) as f32);
        }
    }
    Ok(TerrainLayers {
        slope,
        aspect,
        curvature,
    })
}
