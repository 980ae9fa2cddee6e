use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::imaging::Mask;
use crate::{Error, Result};

/// Ordered polygon outline of a plant, integer pixel coordinates.
///
/// Coordinates address pixel corners: pixel `(x, y)` covers the unit square
/// `[x, x+1) x [y, y+1)` and its center is `(x + 0.5, y + 0.5)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContourAnnotation {
    pub points: Vec<(i32, i32)>,
}

impl ContourAnnotation {
    pub fn new(points: Vec<(i32, i32)>) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::Contour(format!(
                "need at least 3 points, got {}",
                points.len()
            )));
        }
        Ok(ContourAnnotation { points })
    }

    /// All points must lie in `[0, width] x [0, height]`.
    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        for &(x, y) in &self.points {
            if x < 0 || y < 0 || x as usize > width || y as usize > height {
                return Err(Error::Contour(format!(
                    "point ({x}, {y}) outside {width}x{height} frame"
                )));
            }
        }
        Ok(())
    }

    /// Twice the signed shoelace area.
    pub fn doubled_area(&self) -> i64 {
        let n = self.points.len();
        (0..n)
            .map(|i| {
                let (x0, y0) = self.points[i];
                let (x1, y1) = self.points[(i + 1) % n];
                i64::from(x0) * i64::from(y1) - i64::from(x1) * i64::from(y0)
            })
            .sum()
    }

    pub fn scaled(&self, factor: i32) -> Self {
        ContourAnnotation {
            points: self
                .points
                .iter()
                .map(|&(x, y)| (x * factor, y * factor))
                .collect(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed: ContourAnnotation = serde_json::from_str(&text)
            .map_err(|e| Error::Contour(format!("{}: {e}", path.display())))?;
        ContourAnnotation::new(parsed.points)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("contour serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Fills the polygon interior with the even-odd rule, testing pixel centers.
///
/// Points may lie outside the frame; the result is clipped. Crossings are
/// evaluated in exact integer arithmetic with a half-open rule on edge
/// endpoints, so a center lying exactly on an edge is classified the same
/// way as the classic crossing-number test with a `+x` ray.
pub fn rasterize_contour(contour: &ContourAnnotation, width: usize, height: usize) -> Result<Mask> {
    if contour.points.len() < 3 {
        return Err(Error::Contour("need at least 3 points".into()));
    }
    if contour.doubled_area() == 0 {
        return Err(Error::DegeneratePolygon);
    }
    let pts: Vec<(i64, i64)> = contour
        .points
        .iter()
        .map(|&(x, y)| (i64::from(x), i64::from(y)))
        .collect();
    let n = pts.len();
    let mut mask = Mask::new(width, height);
    let mut cuts: Vec<i64> = Vec::with_capacity(n);
    for row in 0..height {
        // scan line at y = row + 0.5, in doubled coordinates 2*row + 1
        let sy = 2 * row as i64 + 1;
        cuts.clear();
        for i in 0..n {
            let (xi, yi) = pts[i];
            let (xj, yj) = pts[(i + 1) % n];
            if (2 * yi > sy) == (2 * yj > sy) {
                continue;
            }
            // pixel x is toggled when x + 0.5 < x_cross, i.e. x < x_cross - 0.5 = num / den
            let mut num = (2 * xi - 1) * (yj - yi) + (sy - 2 * yi) * (xj - xi);
            let mut den = 2 * (yj - yi);
            if den < 0 {
                num = -num;
                den = -den;
            }
            let toggled = ceil_div(num, den).clamp(0, width as i64);
            cuts.push(toggled);
        }
        cuts.sort_unstable();
        for pair in cuts.chunks_exact(2) {
            for x in pair[0]..pair[1] {
                mask.set(x as usize, row, true);
            }
        }
    }
    Ok(mask)
}

fn ceil_div(num: i64, den: i64) -> i64 {
    debug_assert!(den > 0);
    num.div_euclid(den) + i64::from(num.rem_euclid(den) != 0)
}
