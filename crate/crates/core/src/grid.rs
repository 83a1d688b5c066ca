//! Time grids, tabulated curves and interpolation helpers.

use crate::error::{Error, Result};

/// `count` equally spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let step = (hi - lo) / (count - 1) as f64;
            (0..count)
                .map(|i| if i + 1 == count { hi } else { lo + i as f64 * step })
                .collect()
        }
    }
}

/// Trapezoid-rule weights for a nondecreasing grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let m = grid.len();
    let mut w = vec![0.0; m];
    if m < 2 {
        return w;
    }
    for j in 0..m - 1 {
        let h = 0.5 * (grid[j + 1] - grid[j]);
        w[j] += h;
        w[j + 1] += h;
    }
    w
}

/// Checks that `grid` is strictly increasing and equally spaced to a relative tolerance.
pub fn is_regular(grid: &[f64]) -> bool {
    if grid.len() < 3 {
        return grid.windows(2).all(|w| w[1] > w[0]);
    }
    let step = (grid[grid.len() - 1] - grid[0]) / (grid.len() - 1) as f64;
    step > 0.0
        && grid
            .iter()
            .enumerate()
            .all(|(i, &g)| (g - (grid[0] + i as f64 * step)).abs() <= 1e-9 * step.max(1.0))
}

/// Locates `x` on a sorted grid: returns the left cell index and the
/// fractional position inside that cell. Points outside the grid clamp to the
/// nearest end.
#[derive(Debug, Clone)]
pub(crate) struct Locator {
    lo: f64,
    step: f64,
    regular: bool,
}

impl Locator {
    pub(crate) fn new(grid: &[f64]) -> Self {
        let regular = is_regular(grid) && grid.len() >= 2;
        let step = if grid.len() >= 2 {
            (grid[grid.len() - 1] - grid[0]) / (grid.len() - 1) as f64
        } else {
            0.0
        };
        Self {
            lo: grid.first().copied().unwrap_or(0.0),
            step,
            regular,
        }
    }

    #[inline]
    pub(crate) fn locate(&self, grid: &[f64], x: f64) -> (usize, f64) {
        let m = grid.len();
        if m < 2 || x <= grid[0] {
            return (0, 0.0);
        }
        if x >= grid[m - 1] {
            return (m - 2, 1.0);
        }
        let mut i = if self.regular {
            (((x - self.lo) / self.step).floor() as usize).min(m - 2)
        } else {
            grid.partition_point(|&g| g <= x).saturating_sub(1).min(m - 2)
        };
        // Guard against rounding in the regular-grid shortcut.
        while i > 0 && grid[i] > x {
            i -= 1;
        }
        while i + 2 < m && grid[i + 1] <= x {
            i += 1;
        }
        let frac = (x - grid[i]) / (grid[i + 1] - grid[i]);
        (i, frac)
    }
}

/// A real function tabulated on a grid, evaluated by linear interpolation and
/// constant extension beyond the ends.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    grid: Vec<f64>,
    values: Vec<f64>,
}

impl Curve {
    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if grid.len() != values.len() || grid.is_empty() {
            return Err(Error::Shape(format!(
                "curve grid has {} points but {} values",
                grid.len(),
                values.len()
            )));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Shape("curve grid must be strictly increasing".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eval(&self, x: f64) -> f64 {
        interpolate(&self.grid, &self.values, x)
    }
}

/// Linear interpolation of `values` tabulated on `grid`; clamps outside.
pub fn interpolate(grid: &[f64], values: &[f64], x: f64) -> f64 {
    if grid.len() == 1 {
        return values[0];
    }
    let (i, frac) = Locator::new(grid).locate(grid, x);
    values[i] + frac * (values[i + 1] - values[i])
}
