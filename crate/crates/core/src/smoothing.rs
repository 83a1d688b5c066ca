//! Nonparametric smoothers: pooled local linear curves, the kernel-averaged
//! covariance of a densely observed predictor, and local linear surface
//! smoothers for sparse auto- and cross-covariances.
//!
//! Surface smoothers first collapse raw cross-products onto the distinct
//! observation-time pairs. The local plane fit only needs additive weighted
//! moments, so this aggregation is exact and makes the cost depend on the
//! number of distinct time pairs rather than the number of raw products.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Curve, Locator};

/// Irregular `(time, value)` observations of one variable for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFunctionalSample {
    subject_id: String,
    times: Vec<f64>,
    values: Vec<f64>,
}

impl SparseFunctionalSample {
    /// Times must lie in `[0, 1]` and be strictly increasing.
    pub fn new(subject_id: impl Into<String>, times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let subject_id = subject_id.into();
        if times.len() != values.len() {
            return Err(Error::Data(format!(
                "subject {subject_id}: {} times but {} values",
                times.len(),
                values.len()
            )));
        }
        if times.is_empty() {
            return Err(Error::Data(format!("subject {subject_id} has no observations")));
        }
        if let Some(&t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::OutOfDomain { value: t, lo: 0.0, hi: 1.0 });
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data(format!(
                "subject {subject_id}: observation times must be strictly increasing"
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { location: times[i] });
        }
        Ok(Self {
            subject_id,
            times,
            values,
        })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn observations(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.iter().copied().zip(self.values.iter().copied())
    }

    /// Same times, values replaced by `value - mean(time)`.
    pub fn centered(&self, mean: impl Fn(f64) -> f64) -> Self {
        Self {
            subject_id: self.subject_id.clone(),
            times: self.times.clone(),
            values: self.observations().map(|(t, v)| v - mean(t)).collect(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            subject_id: self.subject_id.clone(),
            times: self.times.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Densely observed predictor: every subject on one common regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFunctionalPanel {
    grid: Vec<f64>,
    subject_ids: Vec<String>,
    /// `n × m`, one row per subject.
    values: DMatrix<f64>,
}

impl DenseFunctionalPanel {
    pub fn new(grid: Vec<f64>, subject_ids: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != subject_ids.len() || values.ncols() != grid.len() {
            return Err(Error::Shape(format!(
                "panel is {}x{} but has {} subjects and {} grid points",
                values.nrows(),
                values.ncols(),
                subject_ids.len(),
                grid.len()
            )));
        }
        if grid.is_empty() {
            return Err(Error::Data("dense grid is empty".into()));
        }
        if let Some(&t) = grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::OutOfDomain { value: t, lo: 0.0, hi: 1.0 });
        }
        if !crate::grid::is_regular(&grid) {
            return Err(Error::Data("dense grid must be strictly increasing and equally spaced".into()));
        }
        if let Some((i, _)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: grid[i / values.nrows().max(1)],
            });
        }
        Ok(Self {
            grid,
            subject_ids,
            values,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    pub fn cross_sectional_mean(&self) -> Vec<f64> {
        let n = self.values.nrows().max(1) as f64;
        self.values.row_sum().iter().map(|s| s / n).collect()
    }

    /// Subtracts `mean` (tabulated on the panel grid) from every row.
    pub fn centered(&self, mean: &[f64]) -> Self {
        let mut values = self.values.clone();
        for (j, mu) in mean.iter().enumerate() {
            values.column_mut(j).add_scalar_mut(-mu);
        }
        Self {
            grid: self.grid.clone(),
            subject_ids: self.subject_ids.clone(),
            values,
        }
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            grid: self.grid.clone(),
            subject_ids: rows.iter().map(|&i| self.subject_ids[i].clone()).collect(),
            values: self.values.select_rows(rows),
        }
    }

    /// Each row as a sample on the common grid.
    pub fn to_samples(&self) -> Vec<SparseFunctionalSample> {
        (0..self.n_subjects())
            .map(|i| SparseFunctionalSample {
                subject_id: self.subject_ids[i].clone(),
                times: self.grid.clone(),
                values: self.row(i),
            })
            .collect()
    }
}

/// Compactly supported smoothing kernels on `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    Epanechnikov,
    Biweight,
}

impl KernelFamily {
    #[inline]
    pub fn weight(self, x: f64) -> f64 {
        let q = 1.0 - x * x;
        if q <= 0.0 {
            return 0.0;
        }
        match self {
            KernelFamily::Epanechnikov => 0.75 * q,
            KernelFamily::Biweight => 0.9375 * q * q,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Epanechnikov => "epanechnikov",
            KernelFamily::Biweight => "biweight",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "epanechnikov" => Some(KernelFamily::Epanechnikov),
            "biweight" => Some(KernelFamily::Biweight),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// `c · range · N^(-1/5)` for curves and `c · range · N^(-1/6)` for surfaces.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingConfig {
    pub bandwidth_1d: Bandwidth,
    pub bandwidth_2d: Bandwidth,
    pub kernel: KernelFamily,
    /// Constant `c` of the automatic bandwidth rules.
    pub auto_constant: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            bandwidth_1d: Bandwidth::Auto,
            bandwidth_2d: Bandwidth::Auto,
            kernel: KernelFamily::Epanechnikov,
            auto_constant: 1.0,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        for b in [self.bandwidth_1d, self.bandwidth_2d] {
            if let Bandwidth::Fixed(h) = b {
                if !(h.is_finite() && h > 0.0) {
                    return Err(Error::Config(format!("bandwidth must be positive, got {h}")));
                }
            }
        }
        if !(self.auto_constant.is_finite() && self.auto_constant > 0.0) {
            return Err(Error::Config("automatic bandwidth constant must be positive".into()));
        }
        Ok(())
    }

    pub fn resolve_1d(&self, n_eff: usize, range: f64) -> f64 {
        match self.bandwidth_1d {
            Bandwidth::Fixed(h) => h,
            Bandwidth::Auto => self.auto_constant * range * (n_eff.max(1) as f64).powf(-0.2),
        }
    }

    pub fn resolve_2d(&self, n_pairs: usize, range: f64) -> f64 {
        match self.bandwidth_2d {
            Bandwidth::Fixed(h) => h,
            Bandwidth::Auto => self.auto_constant * range * (n_pairs.max(1) as f64).powf(-1.0 / 6.0),
        }
    }

    /// A copy with both bandwidths pinned.
    pub fn with_fixed(&self, h1: f64, h2: f64) -> Self {
        Self {
            bandwidth_1d: Bandwidth::Fixed(h1),
            bandwidth_2d: Bandwidth::Fixed(h2),
            ..*self
        }
    }
}

/// Smoothed (cross-)covariance tabulated on a rectangular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSurface {
    grid_s: Vec<f64>,
    grid_u: Vec<f64>,
    values: DMatrix<f64>,
    raw_diagonal: Option<Vec<f64>>,
    diagonal_fit: Option<Vec<f64>>,
    bandwidth: f64,
    undersmoothed: bool,
}

impl CovarianceSurface {
    pub fn new(grid_s: Vec<f64>, grid_u: Vec<f64>, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != grid_s.len() || values.ncols() != grid_u.len() || grid_s.is_empty() || grid_u.is_empty() {
            return Err(Error::Shape(format!(
                "surface is {}x{} but grids have {} and {} points",
                values.nrows(),
                values.ncols(),
                grid_s.len(),
                grid_u.len()
            )));
        }
        if grid_s.windows(2).any(|w| w[1] <= w[0]) || grid_u.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Shape("surface grids must be strictly increasing".into()));
        }
        if let Some((idx, _)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: grid_s[idx % grid_s.len()],
            });
        }
        Ok(Self {
            grid_s,
            grid_u,
            values,
            raw_diagonal: None,
            diagonal_fit: None,
            bandwidth: 0.0,
            undersmoothed: false,
        })
    }

    pub fn zeros(grid_s: Vec<f64>, grid_u: Vec<f64>) -> Self {
        let values = DMatrix::zeros(grid_s.len(), grid_u.len());
        Self::new(grid_s, grid_u, values).expect("zero surface is well formed")
    }

    /// Tabulates `f(s, u)` on the grid pair.
    pub fn from_fn(grid_s: Vec<f64>, grid_u: Vec<f64>, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let values = DMatrix::from_fn(grid_s.len(), grid_u.len(), |i, j| f(grid_s[i], grid_u[j]));
        Self::new(grid_s, grid_u, values)
    }

    pub fn with_raw_diagonal(mut self, raw: Vec<f64>) -> Result<Self> {
        if raw.len() != self.grid_s.len() {
            return Err(Error::Shape("raw diagonal length differs from grid".into()));
        }
        self.raw_diagonal = Some(raw);
        Ok(self)
    }

    pub fn grid_s(&self) -> &[f64] {
        &self.grid_s
    }

    pub fn grid_u(&self) -> &[f64] {
        &self.grid_u
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn raw_diagonal(&self) -> Option<&[f64]> {
        self.raw_diagonal.as_deref()
    }

    /// Diagonal from a fit that is quadratic across the diagonal, when available.
    pub fn diagonal_fit(&self) -> Option<&[f64]> {
        self.diagonal_fit.as_deref()
    }

    /// Bandwidth the surface was smoothed with (0 for unsmoothed surfaces).
    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Set when the bandwidth was below the input grid spacing.
    pub fn undersmoothed(&self) -> bool {
        self.undersmoothed
    }

    pub fn is_square(&self) -> bool {
        self.grid_s == self.grid_u
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.values.diagonal().iter().copied().collect()
    }

    pub fn symmetry_error(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let m = self.grid_s.len();
        let mut worst = 0.0f64;
        for i in 0..m {
            for j in 0..i {
                worst = worst.max((self.values[(i, j)] - self.values[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn transpose(&self) -> Self {
        Self {
            grid_s: self.grid_u.clone(),
            grid_u: self.grid_s.clone(),
            values: self.values.transpose(),
            raw_diagonal: None,
            diagonal_fit: None,
            bandwidth: self.bandwidth,
            undersmoothed: self.undersmoothed,
        }
    }

    /// Bilinear interpolation, clamped to the grid rectangle.
    pub fn sampler(&self) -> SurfaceSampler<'_> {
        SurfaceSampler {
            surface: self,
            loc_s: Locator::new(&self.grid_s),
            loc_u: Locator::new(&self.grid_u),
        }
    }

    pub fn value_at(&self, s: f64, u: f64) -> f64 {
        self.sampler().value(s, u)
    }
}

/// Cached grid locators for repeated bilinear lookups on one surface.
#[derive(Debug, Clone)]
pub struct SurfaceSampler<'a> {
    surface: &'a CovarianceSurface,
    loc_s: Locator,
    loc_u: Locator,
}

impl SurfaceSampler<'_> {
    #[inline]
    pub fn value(&self, s: f64, u: f64) -> f64 {
        let sf = self.surface;
        let v = &sf.values;
        match (sf.grid_s.len(), sf.grid_u.len()) {
            (1, 1) => v[(0, 0)],
            (1, _) => {
                let (j, fu) = self.loc_u.locate(&sf.grid_u, u);
                v[(0, j)] * (1.0 - fu) + v[(0, j + 1)] * fu
            }
            (_, 1) => {
                let (i, fs) = self.loc_s.locate(&sf.grid_s, s);
                v[(i, 0)] * (1.0 - fs) + v[(i + 1, 0)] * fs
            }
            _ => {
                let (i, fs) = self.loc_s.locate(&sf.grid_s, s);
                let (j, fu) = self.loc_u.locate(&sf.grid_u, u);
                let top = v[(i, j)] * (1.0 - fu) + v[(i, j + 1)] * fu;
                let bottom = v[(i + 1, j)] * (1.0 - fu) + v[(i + 1, j + 1)] * fu;
                top * (1.0 - fs) + bottom * fs
            }
        }
    }
}

fn time_range(times: impl Iterator<Item = f64>) -> (f64, f64) {
    times.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| (lo.min(t), hi.max(t)))
}

/// Weighted points sorted by time, for repeated 1-D local linear evaluation.
struct SortedPoints {
    times: Vec<f64>,
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl SortedPoints {
    fn new(mut points: Vec<(f64, f64, f64)>) -> Self {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self {
            times: points.iter().map(|p| p.0).collect(),
            values: points.iter().map(|p| p.1).collect(),
            weights: points.iter().map(|p| p.2).collect(),
        }
    }

    fn fit(&self, x: f64, bandwidth: f64, kernel: KernelFamily) -> Result<f64> {
        let start = self.times.partition_point(|&t| t <= x - bandwidth);
        let end = self.times.partition_point(|&t| t < x + bandwidth);
        let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let (mut tmin, mut tmax) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in start..end {
            let d = self.times[i] - x;
            let w = self.weights[i] * kernel.weight(d / bandwidth);
            if w <= 0.0 {
                continue;
            }
            tmin = tmin.min(self.times[i]);
            tmax = tmax.max(self.times[i]);
            s0 += w;
            s1 += w * d;
            s2 += w * d * d;
            t0 += w * self.values[i];
            t1 += w * d * self.values[i];
        }
        let det = s0 * s2 - s1 * s1;
        if !(tmax > tmin) || det <= 1e-12 * s0 * s2 {
            return Err(Error::SingularDesign(format!(
                "fewer than two distinct times within bandwidth {bandwidth} of {x}"
            )));
        }
        Ok((s2 * t0 - s1 * t1) / det)
    }
}

fn check_distinct_times(times: impl Iterator<Item = f64>) -> Result<()> {
    let (lo, hi) = time_range(times);
    if !(hi > lo) {
        return Err(Error::SingularDesign("all points share a single time".into()));
    }
    Ok(())
}

/// Local linear smooth of pooled `(time, value)` pairs evaluated on `eval_grid`.
pub fn local_linear_1d(points: &[(f64, f64)], cfg: &SmoothingConfig, eval_grid: &[f64]) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_distinct_times(points.iter().map(|p| p.0))?;
    let (lo, hi) = time_range(points.iter().map(|p| p.0));
    let bandwidth = cfg.resolve_1d(points.len(), hi - lo);
    local_linear_with_bandwidth(points, bandwidth, cfg.kernel, eval_grid)
}

pub(crate) fn local_linear_with_bandwidth(
    points: &[(f64, f64)],
    bandwidth: f64,
    kernel: KernelFamily,
    eval_grid: &[f64],
) -> Result<Vec<f64>> {
    check_distinct_times(points.iter().map(|p| p.0))?;
    if let Some((i, _)) = points.iter().enumerate().find(|(_, p)| !p.1.is_finite()) {
        return Err(Error::NonFinite { location: points[i].0 });
    }
    let sorted = SortedPoints::new(points.iter().map(|&(t, v)| (t, v, 1.0)).collect());
    eval_grid.iter().map(|&x| sorted.fit(x, bandwidth, kernel)).collect()
}

/// Pooled local linear mean of sparse samples, tabulated on `grid`.
pub fn pooled_mean(samples: &[SparseFunctionalSample], cfg: &SmoothingConfig, grid: &[f64]) -> Result<Curve> {
    let points: Vec<(f64, f64)> = samples.iter().flat_map(|s| s.observations()).collect();
    if points.is_empty() {
        return Err(Error::Data("no observations to smooth".into()));
    }
    let values = local_linear_1d(&points, cfg, grid)?;
    Curve::new(grid.to_vec(), values)
}

/// Kernel-averaged covariance of a (centered) dense panel on its own grid.
///
/// Each output value is the kernel-weighted average of the empirical
/// products `(1/n) Σ_i W_ij W_ik` with a product kernel; weights are
/// normalized per output point.
pub fn dense_covariance(panel: &DenseFunctionalPanel, cfg: &SmoothingConfig) -> Result<CovarianceSurface> {
    cfg.validate()?;
    let n = panel.n_subjects();
    if n < 2 {
        return Err(Error::Data(format!("dense covariance needs at least 2 subjects, got {n}")));
    }
    let grid = panel.grid();
    let m = grid.len();
    let range = if m > 1 { grid[m - 1] - grid[0] } else { 1.0 };
    let bandwidth = cfg.resolve_2d(n * m * m, range);
    let spacing = if m > 1 { range / (m - 1) as f64 } else { f64::INFINITY };

    let w = panel.values();
    let empirical = (w.transpose() * w) / n as f64;

    let mut smoother = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        let mut total = 0.0;
        for j in 0..m {
            let k = cfg.kernel.weight((grid[i] - grid[j]) / bandwidth);
            smoother[(i, j)] = k;
            total += k;
        }
        if total <= 0.0 {
            return Err(Error::SingularDesign(format!("no grid points within bandwidth of {}", grid[i])));
        }
        smoother.row_mut(i).scale_mut(1.0 / total);
    }
    let smoothed = &smoother * empirical * smoother.transpose();
    let symmetric = (&smoothed + smoothed.transpose()) * 0.5;
    let mut surface = CovarianceSurface::new(grid.to_vec(), grid.to_vec(), symmetric)?;
    surface.bandwidth = bandwidth;
    surface.undersmoothed = bandwidth < spacing;
    Ok(surface)
}

/// One distinct `(s, u)` location carrying aggregated weighted products.
#[derive(Debug, Clone, Copy)]
struct PairCell {
    s: f64,
    u: f64,
    weight: f64,
    weighted_product: f64,
    count: usize,
}

fn distinct_times<'a>(samples: impl Iterator<Item = &'a SparseFunctionalSample>) -> Vec<f64> {
    let mut all: Vec<f64> = samples.flat_map(|s| s.times().iter().copied()).collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    all
}

const DENSE_ACCUMULATOR_LIMIT: usize = 4_000_000;

/// Aggregates same-subject cross-products onto distinct time pairs.
///
/// Every subject's products are weighted by `1 / (m_a m_b)`; with
/// `exclude_diagonal` the same-observation products `j = k` are skipped.
fn collect_pairs(
    matched: &[(&SparseFunctionalSample, &SparseFunctionalSample)],
    exclude_diagonal: bool,
) -> (Vec<PairCell>, usize) {
    let axis_s = distinct_times(matched.iter().map(|p| p.0));
    let axis_u = distinct_times(matched.iter().map(|p| p.1));
    let index_of = |axis: &[f64], t: f64| axis.partition_point(|&x| x < t);
    let (ns, nu) = (axis_s.len(), axis_u.len());

    let mut raw_pairs = 0usize;
    let mut cells = Vec::new();
    if ns.saturating_mul(nu) <= DENSE_ACCUMULATOR_LIMIT {
        let mut weight = vec![0.0; ns * nu];
        let mut product = vec![0.0; ns * nu];
        let mut count = vec![0usize; ns * nu];
        for (a, b) in matched {
            let subject_weight = 1.0 / (a.len() * b.len()) as f64;
            let ib: Vec<usize> = b.times().iter().map(|&t| index_of(&axis_u, t)).collect();
            for (j, (ta, va)) in a.observations().enumerate() {
                let ia = index_of(&axis_s, ta);
                for (k, vb) in b.values().iter().enumerate() {
                    if exclude_diagonal && j == k {
                        continue;
                    }
                    let c = ia * nu + ib[k];
                    weight[c] += subject_weight;
                    product[c] += subject_weight * va * vb;
                    count[c] += 1;
                    raw_pairs += 1;
                }
            }
        }
        for c in 0..ns * nu {
            if count[c] > 0 {
                cells.push(PairCell {
                    s: axis_s[c / nu],
                    u: axis_u[c % nu],
                    weight: weight[c],
                    weighted_product: product[c],
                    count: count[c],
                });
            }
        }
    } else {
        let mut map: HashMap<(usize, usize), (f64, f64, usize)> = HashMap::new();
        for (a, b) in matched {
            let subject_weight = 1.0 / (a.len() * b.len()) as f64;
            for (j, (ta, va)) in a.observations().enumerate() {
                let ia = index_of(&axis_s, ta);
                for (k, (tb, vb)) in b.observations().enumerate() {
                    if exclude_diagonal && j == k {
                        continue;
                    }
                    let e = map.entry((ia, index_of(&axis_u, tb))).or_insert((0.0, 0.0, 0));
                    e.0 += subject_weight;
                    e.1 += subject_weight * va * vb;
                    e.2 += 1;
                    raw_pairs += 1;
                }
            }
        }
        let mut keys: Vec<_> = map.keys().copied().collect();
        keys.sort_unstable();
        for key in keys {
            let (weight, weighted_product, count) = map[&key];
            cells.push(PairCell {
                s: axis_s[key.0],
                u: axis_u[key.1],
                weight,
                weighted_product,
                count,
            });
        }
    }
    (cells, raw_pairs)
}

/// Spatial hash of pair cells into squares of side `bandwidth`.
struct CellIndex<'a> {
    cells: &'a [PairCell],
    origin_s: f64,
    origin_u: f64,
    size: f64,
    cols_s: usize,
    cols_u: usize,
    buckets: Vec<Vec<usize>>,
}

impl<'a> CellIndex<'a> {
    fn new(cells: &'a [PairCell], size: f64) -> Self {
        let (origin_s, max_s) = time_range(cells.iter().map(|c| c.s));
        let (origin_u, max_u) = time_range(cells.iter().map(|c| c.u));
        let cols_s = ((max_s - origin_s) / size).floor() as usize + 1;
        let cols_u = ((max_u - origin_u) / size).floor() as usize + 1;
        let mut buckets = vec![Vec::new(); cols_s * cols_u];
        for (idx, c) in cells.iter().enumerate() {
            let bs = (((c.s - origin_s) / size).floor() as usize).min(cols_s - 1);
            let bu = (((c.u - origin_u) / size).floor() as usize).min(cols_u - 1);
            buckets[bs * cols_u + bu].push(idx);
        }
        Self {
            cells,
            origin_s,
            origin_u,
            size,
            cols_s,
            cols_u,
            buckets,
        }
    }

    fn bucket_range(&self, x: f64, origin: f64, cols: usize) -> Option<(usize, usize)> {
        let pos = ((x - origin) / self.size).floor();
        let lo = pos - 1.0;
        let hi = pos + 1.0;
        if hi < 0.0 || lo > (cols - 1) as f64 {
            return None;
        }
        Some((lo.max(0.0) as usize, (hi as usize).min(cols - 1)))
    }

    /// Intercept of the kernel-weighted least-squares plane at `(s, u)`.
    fn plane_intercept(&self, s: f64, u: f64, kernel: KernelFamily) -> Result<f64> {
        let mut m = [0.0f64; 6]; // s0, sx, sy, sxx, sxy, syy
        let mut r = [0.0f64; 3];
        let mut effective = 0usize;
        if let (Some((s_lo, s_hi)), Some((u_lo, u_hi))) = (
            self.bucket_range(s, self.origin_s, self.cols_s),
            self.bucket_range(u, self.origin_u, self.cols_u),
        ) {
            for bs in s_lo..=s_hi {
                for bu in u_lo..=u_hi {
                    for &idx in &self.buckets[bs * self.cols_u + bu] {
                        let c = &self.cells[idx];
                        let dx = c.s - s;
                        let dy = c.u - u;
                        let k = kernel.weight(dx / self.size) * kernel.weight(dy / self.size);
                        if k <= 0.0 {
                            continue;
                        }
                        effective += c.count;
                        let w = k * c.weight;
                        let z = c.weighted_product / c.weight;
                        m[0] += w;
                        m[1] += w * dx;
                        m[2] += w * dy;
                        m[3] += w * dx * dx;
                        m[4] += w * dx * dy;
                        m[5] += w * dy * dy;
                        r[0] += w * z;
                        r[1] += w * dx * z;
                        r[2] += w * dy * z;
                    }
                }
            }
        }
        let rank_deficient = || Error::RankDeficient {
            s,
            u,
            pairs: effective,
        };
        if effective < 3 {
            return Err(rank_deficient());
        }
        let [s0, sx, sy, sxx, sxy, syy] = m;
        let minor_xx = sxx * syy - sxy * sxy;
        let minor_xy = sx * syy - sxy * sy;
        let minor_xz = sx * sxy - sxx * sy;
        let det = s0 * minor_xx - sx * minor_xy + sy * minor_xz;
        if !(det > 1e-10 * s0 * sxx * syy) || !det.is_finite() {
            return Err(rank_deficient());
        }
        // Cramer's rule for the intercept.
        let num = r[0] * minor_xx - sx * (r[1] * syy - sxy * r[2]) + sy * (r[1] * sxy - sxx * r[2]);
        Ok(num / det)
    }
}

fn plane_fit_surface(
    cells: &[PairCell],
    bandwidth: f64,
    kernel: KernelFamily,
    grid_s: &[f64],
    grid_u: &[f64],
) -> Result<DMatrix<f64>> {
    if cells.is_empty() {
        let (s, u) = (grid_s.first().copied().unwrap_or(0.0), grid_u.first().copied().unwrap_or(0.0));
        return Err(Error::RankDeficient { s, u, pairs: 0 });
    }
    let index = CellIndex::new(cells, bandwidth);
    let rows: Vec<Vec<f64>> = grid_s
        .par_iter()
        .map(|&s| grid_u.iter().map(|&u| index.plane_intercept(s, u, kernel)).collect())
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(grid_s.len(), grid_u.len(), |i, j| rows[i][j]))
}

/// Diagonal `C(t, t)` from a local fit that is linear along the diagonal and
/// quadratic across it, so that curvature across the diagonal does not bias
/// the estimate.
fn rotated_diagonal(cells: &[PairCell], bandwidth: f64, kernel: KernelFamily, grid: &[f64]) -> Result<Vec<f64>> {
    grid.par_iter()
        .map(|&t| {
            let mut m = nalgebra::Matrix3::<f64>::zeros();
            let mut r = nalgebra::Vector3::<f64>::zeros();
            let mut effective = 0usize;
            for c in cells {
                let a = 0.5 * (c.s + c.u) - t;
                let d = c.s - c.u;
                let k = kernel.weight(a / bandwidth) * kernel.weight(d / bandwidth);
                if k <= 0.0 {
                    continue;
                }
                effective += c.count;
                let w = k * c.weight;
                let x = nalgebra::Vector3::new(1.0, a, d * d);
                m += w * x * x.transpose();
                r += (w * c.weighted_product / c.weight) * x;
            }
            let deficient = || Error::RankDeficient {
                s: t,
                u: t,
                pairs: effective,
            };
            if effective < 3 {
                return Err(deficient());
            }
            let beta = m.lu().solve(&r).ok_or_else(deficient)?;
            if !beta[0].is_finite() {
                return Err(deficient());
            }
            Ok(beta[0])
        })
        .collect()
}

fn pair_range(cells: &[PairCell]) -> f64 {
    let (s_lo, s_hi) = time_range(cells.iter().map(|c| c.s));
    let (u_lo, u_hi) = time_range(cells.iter().map(|c| c.u));
    (s_hi - s_lo).max(u_hi - u_lo).max(f64::EPSILON)
}

/// Local linear surface estimate of the covariance of sparse (centered) samples.
///
/// Off-diagonal products `W_ij W_ik`, `j ≠ k`, feed the plane fit; the
/// same-index squares are smoothed separately along the diagonal and kept in
/// `raw_diagonal` for noise-variance estimation.
pub fn sparse_covariance(
    samples: &[SparseFunctionalSample],
    cfg: &SmoothingConfig,
    out_grid: &[f64],
) -> Result<CovarianceSurface> {
    cfg.validate()?;
    let matched: Vec<_> = samples.iter().map(|s| (s, s)).collect();
    let (cells, raw_pairs) = collect_pairs(&matched, true);
    let first = out_grid.first().copied().unwrap_or(0.0);
    if cells.is_empty() {
        return Err(Error::RankDeficient {
            s: first,
            u: first,
            pairs: 0,
        });
    }
    let bandwidth = cfg.resolve_2d(raw_pairs, pair_range(&cells));
    let values = plane_fit_surface(&cells, bandwidth, cfg.kernel, out_grid, out_grid)?;
    let symmetric = (&values + values.transpose()) * 0.5;

    let squares: Vec<(f64, f64)> = samples
        .iter()
        .flat_map(|s| s.observations().map(|(t, v)| (t, v * v)))
        .collect();
    let (lo, hi) = time_range(squares.iter().map(|p| p.0));
    let diag_bandwidth = cfg.resolve_1d(squares.len(), hi - lo);
    let raw = local_linear_with_bandwidth(&squares, diag_bandwidth, cfg.kernel, out_grid)?;

    let mut surface = CovarianceSurface::new(out_grid.to_vec(), out_grid.to_vec(), symmetric)?.with_raw_diagonal(raw)?;
    surface.diagonal_fit = Some(rotated_diagonal(&cells, bandwidth, cfg.kernel, out_grid)?);
    surface.bandwidth = bandwidth;
    Ok(surface)
}

/// Local linear surface estimate of `cov(A(s), B(u))` from same-subject
/// cross-products. Subjects are matched by identifier.
pub fn cross_covariance(
    a: &[SparseFunctionalSample],
    b: &[SparseFunctionalSample],
    cfg: &SmoothingConfig,
    out_grid_s: &[f64],
    out_grid_u: &[f64],
) -> Result<CovarianceSurface> {
    cfg.validate()?;
    let by_id: HashMap<&str, &SparseFunctionalSample> = b.iter().map(|s| (s.subject_id(), s)).collect();
    let matched: Vec<_> = a
        .iter()
        .filter_map(|sa| by_id.get(sa.subject_id()).map(|sb| (sa, *sb)))
        .collect();
    if matched.is_empty() {
        return Err(Error::EmptyPairing);
    }
    let (cells, raw_pairs) = collect_pairs(&matched, false);
    let bandwidth = cfg.resolve_2d(raw_pairs, pair_range(&cells));
    let values = plane_fit_surface(&cells, bandwidth, cfg.kernel, out_grid_s, out_grid_u)?;
    let mut surface = CovarianceSurface::new(out_grid_s.to_vec(), out_grid_u.to_vec(), values)?;
    surface.bandwidth = bandwidth;
    Ok(surface)
}

/// Measurement-noise variance from the excess of the raw diagonal over the
/// smoothed diagonal, averaged over the central half of the grid.
pub fn estimate_noise_variance(raw_diagonal: &[f64], smoothed_diagonal: &[f64], grid: &[f64]) -> Result<f64> {
    if raw_diagonal.len() != grid.len() || smoothed_diagonal.len() != grid.len() {
        return Err(Error::Shape("diagonals must match the grid length".into()));
    }
    if grid.is_empty() {
        return Ok(0.0);
    }
    let lo = grid[0];
    let span = grid[grid.len() - 1] - lo;
    let (from, to) = (lo + 0.25 * span, lo + 0.75 * span);
    let (mut total, mut count) = (0.0, 0usize);
    for ((&g, &r), &s) in grid.iter().zip(raw_diagonal).zip(smoothed_diagonal) {
        if g >= from && g <= to {
            total += r - s;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok((total / count as f64).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::linspace;

    fn sample(id: &str, pairs: &[(f64, f64)]) -> SparseFunctionalSample {
        SparseFunctionalSample::new(id, pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1).collect())
            .unwrap()
    }

    #[test]
    fn sample_validation() {
        assert!(SparseFunctionalSample::new("a", vec![0.2, 0.1], vec![1.0, 2.0]).is_err());
        assert!(SparseFunctionalSample::new("a", vec![1.5], vec![1.0]).is_err());
        assert!(SparseFunctionalSample::new("a", vec![], vec![]).is_err());
        assert!(SparseFunctionalSample::new("a", vec![0.5], vec![f64::NAN]).is_err());
    }

    #[test]
    fn local_linear_reproduces_lines() {
        let points: Vec<(f64, f64)> = (0..40).map(|i| {
            let t = i as f64 / 39.0;
            (t, 2.0 * t + 1.0)
        }).collect();
        let eval = linspace(0.0, 1.0, 23);
        for h in [0.06, 0.2, 1.0, 5.0] {
            let cfg = SmoothingConfig::default().with_fixed(h, h);
            let fit = local_linear_1d(&points, &cfg, &eval).unwrap();
            for (x, y) in eval.iter().zip(fit) {
                assert!((y - (2.0 * x + 1.0)).abs() < 1e-10, "h = {h}");
            }
        }
    }

    #[test]
    fn local_linear_rejects_single_time() {
        let points = vec![(0.3, 1.0), (0.3, 2.0), (0.3, 3.0)];
        let err = local_linear_1d(&points, &SmoothingConfig::default(), &[0.3]).unwrap_err();
        assert!(matches!(err, Error::SingularDesign(_)));
    }

    #[test]
    fn dense_covariance_of_zero_panel_is_zero() {
        let grid = linspace(0.0, 1.0, 20);
        let panel = DenseFunctionalPanel::new(grid, vec!["a".into(), "b".into(), "c".into()], DMatrix::zeros(3, 20)).unwrap();
        let c = dense_covariance(&panel, &SmoothingConfig::default()).unwrap();
        assert!(c.values().iter().all(|&v| v == 0.0));
        assert_eq!(c.symmetry_error(), 0.0);
    }

    #[test]
    fn dense_covariance_flags_undersmoothing() {
        let grid = linspace(0.0, 1.0, 20);
        let values = DMatrix::from_fn(3, 20, |i, j| (i as f64 + 1.0) * grid[j]);
        let panel = DenseFunctionalPanel::new(grid, vec!["a".into(), "b".into(), "c".into()], values).unwrap();
        let cfg = SmoothingConfig::default().with_fixed(0.01, 0.01);
        let c = dense_covariance(&panel, &cfg).unwrap();
        assert!(c.undersmoothed());
        // Kernel support smaller than spacing leaves the raw products untouched.
        assert!((c.values()[(19, 19)] - 14.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn sparse_covariance_of_zero_values() {
        let samples: Vec<_> = (0..30)
            .map(|i| {
                let ts: Vec<(f64, f64)> = (0..8).map(|j| ((j as f64 + (i % 5) as f64 * 0.2) / 8.0, 0.0)).collect();
                sample(&i.to_string(), &ts)
            })
            .collect();
        let grid = linspace(0.0, 1.0, 11);
        let c = sparse_covariance(&samples, &SmoothingConfig::default().with_fixed(0.3, 0.3), &grid).unwrap();
        assert!(c.values().iter().all(|&v| v == 0.0));
        assert!(c.raw_diagonal().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sparse_covariance_single_observation_is_rank_deficient() {
        let samples = vec![sample("a", &[(0.5, 1.0)])];
        let err = sparse_covariance(&samples, &SmoothingConfig::default(), &[0.5]).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }));
    }

    #[test]
    fn sparse_covariance_reproduces_planes() {
        // Products of a deterministic affine pattern lie on a plane only if the
        // values do: use v = 1 for every observation so every product is 1.
        let samples: Vec<_> = (0..20)
            .map(|i| {
                let ts: Vec<f64> = (0..6).map(|j| (j as f64 * 0.17 + i as f64 * 0.011) % 1.0).collect();
                let mut ts = ts;
                ts.sort_by(f64::total_cmp);
                ts.dedup();
                sample(&i.to_string(), &ts.iter().map(|&t| (t, 1.0)).collect::<Vec<_>>())
            })
            .collect();
        let grid = linspace(0.1, 0.9, 9);
        let c = sparse_covariance(&samples, &SmoothingConfig::default().with_fixed(0.3, 0.3), &grid).unwrap();
        assert!(c.values().iter().all(|&v| (v - 1.0).abs() < 1e-10));
    }

    #[test]
    fn cross_covariance_needs_common_subjects() {
        let a = vec![sample("a", &[(0.1, 1.0), (0.5, 2.0)])];
        let b = vec![sample("b", &[(0.1, 1.0), (0.5, 2.0)])];
        let err = cross_covariance(&a, &b, &SmoothingConfig::default(), &[0.3], &[0.3]).unwrap_err();
        assert_eq!(err, Error::EmptyPairing);
    }

    #[test]
    fn noise_variance_offsets() {
        let grid = linspace(0.0, 1.0, 21);
        let smooth: Vec<f64> = grid.iter().map(|t| t * t).collect();
        assert_eq!(estimate_noise_variance(&smooth, &smooth, &grid).unwrap(), 0.0);
        let raw: Vec<f64> = smooth.iter().map(|v| v + 0.04).collect();
        assert!((estimate_noise_variance(&raw, &smooth, &grid).unwrap() - 0.04).abs() < 1e-12);
        let below: Vec<f64> = smooth.iter().map(|v| v - 0.04).collect();
        assert_eq!(estimate_noise_variance(&below, &smooth, &grid).unwrap(), 0.0);
    }

    #[test]
    fn bilinear_sampler_is_exact_on_bilinear_functions() {
        let gs = linspace(0.0, 1.0, 7);
        let gu = linspace(0.2, 0.8, 4);
        let f = |s: f64, u: f64| 1.0 + 2.0 * s - u + 3.0 * s * u;
        let c = CovarianceSurface::from_fn(gs, gu, f).unwrap();
        let sampler = c.sampler();
        for &(s, u) in &[(0.13, 0.33), (0.99, 0.21), (0.5, 0.79)] {
            assert!((sampler.value(s, u) - f(s, u)).abs() < 1e-13);
        }
    }
}
