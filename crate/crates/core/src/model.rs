//! The lag historical functional linear model
//!
//! ```text
//! Y(t) = β₀(t) + ∫_{Δ₁} β₁(s,t) X₁(t−s) ds + ∫_{Δ₂} β₂(s,t) X₂(t−s) ds + e
//! ```
//!
//! with `β_p(s,t) = Σ_k B_pk(s) b_pk(t)`. The time-varying coefficient
//! vectors solve, at every `t` of an evaluation grid on the valid interval
//! `[max upper lag, 1]`, a ridge system assembled from smoothed covariance
//! surfaces integrated against the lag bases.
//!
//! Estimation is split so that the expensive parts can be shared:
//! [`SmoothedComponents`] holds everything that depends on the data only,
//! [`LagSystem`] adds the induced covariance blocks for one pair of lag
//! windows, and [`LagSystem::solve`] produces a [`ModelFit`] for one
//! regularization pair.

use std::collections::HashSet;
use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::basis::{BasisSystem, Interval, QuadratureRule};
use crate::error::{Error, Result};
use crate::fpca::{self, Eigensystem};
use crate::grid::{interpolate, linspace, Curve, Locator};
use crate::smoothing::{
    self, Bandwidth, CovarianceSurface, DenseFunctionalPanel, SmoothingConfig, SparseFunctionalSample,
};

/// Range `[lower, upper]` of past offsets through which a predictor acts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LagWindow {
    lower: f64,
    upper: f64,
}

impl LagWindow {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower >= 0.0 && lower < upper && upper <= 1.0) {
            return Err(Error::Config(format!(
                "lag window [{lower}, {upper}] must satisfy 0 <= lower < upper <= 1"
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn interval(&self) -> Interval {
        Interval::new(self.lower, self.upper).expect("validated lag window")
    }
}

impl fmt::Display for LagWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lower, self.upper)
    }
}

/// Regularization pair `(ρ₁, ρ₂)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rho {
    pub first: f64,
    pub second: f64,
}

impl Rho {
    pub fn new(first: f64, second: f64) -> Result<Self> {
        if !(first > 0.0 && second > 0.0 && first.is_finite() && second.is_finite()) {
            return Err(Error::Config(format!("regularization ({first}, {second}) must be positive")));
        }
        Ok(Self { first, second })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            first: self.first * factor,
            second: self.second * factor,
        }
    }
}

/// Which of the two functional predictors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Predictor {
    Dense,
    Sparse,
}

/// Subject-aligned observations: sparse response, dense predictor, sparse predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalDataset {
    y: Vec<SparseFunctionalSample>,
    x1: DenseFunctionalPanel,
    x2: Vec<SparseFunctionalSample>,
}

impl FunctionalDataset {
    /// Row `i` of every component must belong to the same subject.
    pub fn new(y: Vec<SparseFunctionalSample>, x1: DenseFunctionalPanel, x2: Vec<SparseFunctionalSample>) -> Result<Self> {
        if y.len() != x1.n_subjects() || y.len() != x2.len() {
            return Err(Error::Data(format!(
                "component sizes differ: {} responses, {} dense rows, {} sparse predictors",
                y.len(),
                x1.n_subjects(),
                x2.len()
            )));
        }
        let mut seen = HashSet::new();
        for (i, id) in x1.subject_ids().iter().enumerate() {
            if y[i].subject_id() != id || x2[i].subject_id() != id {
                return Err(Error::Data(format!("subject order differs between components at row {i}")));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::Data(format!("duplicate subject {id}")));
            }
        }
        Ok(Self { y, x1, x2 })
    }

    pub fn y(&self) -> &[SparseFunctionalSample] {
        &self.y
    }

    pub fn x1(&self) -> &DenseFunctionalPanel {
        &self.x1
    }

    pub fn x2(&self) -> &[SparseFunctionalSample] {
        &self.x2
    }

    pub fn n_subjects(&self) -> usize {
        self.y.len()
    }

    pub fn subject_ids(&self) -> &[String] {
        self.x1.subject_ids()
    }

    /// Dense observations of subject `i` as a sample on the panel grid.
    pub fn x1_sample(&self, i: usize) -> SparseFunctionalSample {
        SparseFunctionalSample::new(self.x1.subject_ids()[i].clone(), self.x1.grid().to_vec(), self.x1.row(i))
            .expect("panel rows are valid samples")
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            y: rows.iter().map(|&i| self.y[i].clone()).collect(),
            x1: self.x1.select(rows),
            x2: rows.iter().map(|&i| self.x2[i].clone()).collect(),
        }
    }
}

/// Estimation settings shared by every fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// B-spline order (4 = cubic pieces).
    pub basis_order: usize,
    pub interior_knots: usize,
    pub quadrature_nodes: usize,
    pub smoothing: SmoothingConfig,
    /// Fraction of variance explained used to truncate the sparse predictor's expansion.
    pub fve: f64,
    pub eval_grid_size: usize,
    pub surface_grid_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            basis_order: 4,
            interior_knots: 10,
            quadrature_nodes: 30,
            smoothing: SmoothingConfig::default(),
            fve: 0.99,
            eval_grid_size: 100,
            surface_grid_size: 100,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.smoothing.validate()?;
        if self.basis_order < 1 || self.interior_knots < 1 {
            return Err(Error::Config("basis needs order >= 1 and at least one interior knot".into()));
        }
        if self.quadrature_nodes < 2 {
            return Err(Error::Config("at least two quadrature nodes are required".into()));
        }
        if !(self.fve > 0.0 && self.fve <= 1.0) {
            return Err(Error::Config(format!("fve must be in (0, 1], got {}", self.fve)));
        }
        if self.eval_grid_size < 2 || self.surface_grid_size < 2 {
            return Err(Error::Config("evaluation and surface grids need at least two points".into()));
        }
        Ok(())
    }

    pub fn basis(&self, lags: LagWindow) -> Result<BasisSystem> {
        BasisSystem::bspline(self.basis_order, self.interior_knots, lags.interval())
    }
}

/// The five covariance surfaces the estimator integrates.
///
/// Cross surfaces are indexed `(first argument, second argument)`:
/// `x1_x2(s, u) = cov(X₁(s), X₂(u))` and `x_y(s, t) = cov(X(s), Y(t))`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSet {
    pub x1: CovarianceSurface,
    pub x2: CovarianceSurface,
    pub x1_x2: CovarianceSurface,
    pub x1_y: CovarianceSurface,
    pub x2_y: CovarianceSurface,
}

impl CovarianceSet {
    /// Unsmoothed moment surfaces `(1/n) Σ_i a_i(s) b_i(u)` of curves on common grids.
    ///
    /// `x1` and `x2` are `n × m` on their grids and `y` is `n × J` on `y_times`.
    pub fn empirical(
        x1_grid: &[f64],
        x1: &DMatrix<f64>,
        x2_grid: &[f64],
        x2: &DMatrix<f64>,
        y_times: &[f64],
        y: &DMatrix<f64>,
    ) -> Result<Self> {
        let n = x1.nrows();
        if x2.nrows() != n || y.nrows() != n || n == 0 {
            return Err(Error::Shape("empirical covariances need the same subjects in every component".into()));
        }
        let moment = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a.transpose() * b) / n as f64;
        let x1_cov = moment(x1, x1);
        let x2_cov = moment(x2, x2);
        Ok(Self {
            x1: CovarianceSurface::new(x1_grid.to_vec(), x1_grid.to_vec(), (&x1_cov + x1_cov.transpose()) * 0.5)?,
            x2: CovarianceSurface::new(x2_grid.to_vec(), x2_grid.to_vec(), (&x2_cov + x2_cov.transpose()) * 0.5)?,
            x1_x2: CovarianceSurface::new(x1_grid.to_vec(), x2_grid.to_vec(), moment(x1, x2))?,
            x1_y: CovarianceSurface::new(x1_grid.to_vec(), y_times.to_vec(), moment(x1, y))?,
            x2_y: CovarianceSurface::new(x2_grid.to_vec(), y_times.to_vec(), moment(x2, y))?,
        })
    }

    pub fn zeros(grid: &[f64], y_grid: &[f64]) -> Self {
        let g = grid.to_vec();
        Self {
            x1: CovarianceSurface::zeros(g.clone(), g.clone()),
            x2: CovarianceSurface::zeros(g.clone(), g.clone()),
            x1_x2: CovarianceSurface::zeros(g.clone(), g.clone()),
            x1_y: CovarianceSurface::zeros(g.clone(), y_grid.to_vec()),
            x2_y: CovarianceSurface::zeros(g, y_grid.to_vec()),
        }
    }
}

/// What a fit needs to turn a new subject's raw observations into the
/// centered predictor curves used by prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Recovery {
    pub(crate) x1_grid: Vec<f64>,
    pub(crate) x1_mean: Vec<f64>,
    pub(crate) x1_bandwidth: f64,
    pub(crate) kernel: smoothing::KernelFamily,
    pub(crate) x2_mean: Curve,
    pub(crate) eigensystem: Eigensystem,
    pub(crate) truncation: usize,
}

/// Centered predictor trajectories of one subject on the recovery grids.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredSubject {
    pub x1_grid: Vec<f64>,
    pub x1: Vec<f64>,
    pub x2_grid: Vec<f64>,
    pub x2: Vec<f64>,
}

impl Recovery {
    pub fn new(
        x1_grid: Vec<f64>,
        x1_mean: Vec<f64>,
        x1_bandwidth: f64,
        kernel: smoothing::KernelFamily,
        x2_mean: Curve,
        eigensystem: Eigensystem,
        truncation: usize,
    ) -> Result<Self> {
        if x1_grid.len() != x1_mean.len() || x1_grid.len() < 2 {
            return Err(Error::Shape("dense mean must match its grid of at least two points".into()));
        }
        if !(x1_bandwidth > 0.0) {
            return Err(Error::Config(format!("recovery bandwidth must be positive, got {x1_bandwidth}")));
        }
        if truncation == 0 || truncation > eigensystem.len() {
            return Err(Error::Config(format!(
                "truncation {truncation} outside 1..={}",
                eigensystem.len()
            )));
        }
        Ok(Self {
            x1_grid,
            x1_mean,
            x1_bandwidth,
            kernel,
            x2_mean,
            eigensystem,
            truncation,
        })
    }

    pub fn x1_grid(&self) -> &[f64] {
        &self.x1_grid
    }

    pub fn x1_mean(&self) -> &[f64] {
        &self.x1_mean
    }

    pub fn x1_bandwidth(&self) -> f64 {
        self.x1_bandwidth
    }

    pub fn x2_mean(&self) -> &Curve {
        &self.x2_mean
    }

    pub fn eigensystem(&self) -> &Eigensystem {
        &self.eigensystem
    }

    pub fn truncation(&self) -> usize {
        self.truncation
    }

    /// Kernel-smooths the dense curve and reconstructs the sparse one from
    /// its best-linear-predictor scores.
    pub fn recover(&self, x1: &SparseFunctionalSample, x2: &SparseFunctionalSample) -> Result<RecoveredSubject> {
        let centered: Vec<(f64, f64)> = x1
            .observations()
            .map(|(t, v)| (t, v - interpolate(&self.x1_grid, &self.x1_mean, t)))
            .collect();
        let x1_curve = if centered.len() == 1 {
            vec![centered[0].1; self.x1_grid.len()]
        } else {
            smoothing::local_linear_with_bandwidth(&centered, self.x1_bandwidth, self.kernel, &self.x1_grid)?
        };
        let x2_centered = x2.centered(|t| self.x2_mean.eval(t));
        let scores = fpca::blup_scores(&self.eigensystem, &x2_centered, self.truncation)?;
        let x2_grid = self.eigensystem.grid().to_vec();
        let x2_curve = fpca::reconstruct_curve(&self.eigensystem, &scores, &x2_grid)?;
        Ok(RecoveredSubject {
            x1_grid: self.x1_grid.clone(),
            x1: x1_curve,
            x2_grid,
            x2: x2_curve,
        })
    }
}

/// Data-dependent estimates shared by every choice of lags and regularization.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedComponents {
    intercept: Curve,
    surfaces: CovarianceSet,
    recovery: Recovery,
    n_subjects: usize,
    warnings: Vec<String>,
}

impl SmoothedComponents {
    /// Pooled intercept, centering, the five covariance surfaces, noise
    /// variance and eigensystem of the sparse predictor.
    pub fn estimate(data: &FunctionalDataset, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let n = data.n_subjects();
        if n < 2 {
            return Err(Error::Data(format!("fitting needs at least 2 subjects, got {n}")));
        }
        let smooth = &cfg.smoothing;
        let grid = linspace(0.0, 1.0, cfg.surface_grid_size);
        let mut warnings = Vec::new();

        let y_grid = response_grid(&grid, data.y());
        let intercept = estimate_intercept(data.y(), smooth, &y_grid)?;
        let y_centered: Vec<_> = data.y().iter().map(|s| s.centered(|t| intercept.eval(t))).collect();

        let x1_mean = data.x1().cross_sectional_mean();
        let x1_centered = data.x1().centered(&x1_mean);
        let x1_cov = smoothing::dense_covariance(&x1_centered, smooth)?;
        if x1_cov.undersmoothed() {
            warnings.push(format!(
                "dense covariance bandwidth {} is below the grid spacing",
                x1_cov.bandwidth()
            ));
        }
        let x1_samples = x1_centered.to_samples();

        let x2_mean = smoothing::pooled_mean(data.x2(), smooth, &grid)?;
        let x2_centered: Vec<_> = data.x2().iter().map(|s| s.centered(|t| x2_mean.eval(t))).collect();
        let x2_cov = smoothing::sparse_covariance(&x2_centered, smooth, &grid)?;

        let x1_x2 = smoothing::cross_covariance(&x1_samples, &x2_centered, smooth, &grid, &grid)?;
        let x1_y = smoothing::cross_covariance(&x1_samples, &y_centered, smooth, &grid, &y_grid)?;
        let x2_y = smoothing::cross_covariance(&x2_centered, &y_centered, smooth, &grid, &y_grid)?;

        let raw = x2_cov.raw_diagonal().expect("sparse covariance keeps its raw diagonal");
        let fitted = x2_cov.diagonal_fit().map(<[f64]>::to_vec).unwrap_or_else(|| x2_cov.diagonal());
        let noise = smoothing::estimate_noise_variance(raw, &fitted, &grid)?;
        let eigensystem = fpca::eigendecompose(&x2_cov, noise)?;
        let truncation = fpca::select_truncation(&eigensystem, cfg.fve)?;

        let x1_bandwidth = match smooth.bandwidth_1d {
            Bandwidth::Fixed(h) => h,
            Bandwidth::Auto => x1_cov.bandwidth(),
        };
        let recovery = Recovery {
            x1_grid: data.x1().grid().to_vec(),
            x1_mean,
            x1_bandwidth,
            kernel: smooth.kernel,
            x2_mean,
            eigensystem,
            truncation,
        };
        Ok(Self {
            intercept,
            surfaces: CovarianceSet {
                x1: x1_cov,
                x2: x2_cov,
                x1_x2,
                x1_y,
                x2_y,
            },
            recovery,
            n_subjects: n,
            warnings,
        })
    }

    /// Components from externally supplied surfaces (for example empirical ones).
    pub fn from_parts(intercept: Curve, surfaces: CovarianceSet, recovery: Recovery, n_subjects: usize) -> Self {
        Self {
            intercept,
            surfaces,
            recovery,
            n_subjects,
            warnings: Vec::new(),
        }
    }

    pub fn intercept(&self) -> &Curve {
        &self.intercept
    }

    pub fn surfaces(&self) -> &CovarianceSet {
        &self.surfaces
    }

    pub fn recovery(&self) -> &Recovery {
        &self.recovery
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

/// Surface-grid points spanning the observed response times, padded by one
/// grid point on each side.
fn response_grid(grid: &[f64], y: &[SparseFunctionalSample]) -> Vec<f64> {
    let (lo, hi) = y
        .iter()
        .flat_map(|s| s.times().iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| (a.min(t), b.max(t)));
    let first = grid.partition_point(|&g| g < lo).saturating_sub(1);
    let last = (grid.partition_point(|&g| g <= hi) + 1).min(grid.len());
    grid[first..last.max(first + 2).min(grid.len())].to_vec()
}

/// Pooled local linear estimate of the intercept curve `β₀` on `eval_grid`.
pub fn estimate_intercept(response: &[SparseFunctionalSample], cfg: &SmoothingConfig, eval_grid: &[f64]) -> Result<Curve> {
    if response.is_empty() {
        return Err(Error::Data("no responses to estimate the intercept from".into()));
    }
    smoothing::pooled_mean(response, cfg, eval_grid)
}

/// Induced covariance blocks at one evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub struct InducedCovariances {
    pub t: f64,
    pub c11: DMatrix<f64>,
    pub c12: DMatrix<f64>,
    pub c21: DMatrix<f64>,
    pub c22: DMatrix<f64>,
    pub c1y: DVector<f64>,
    pub c2y: DVector<f64>,
}

impl InducedCovariances {
    /// The unregularized joint block matrix.
    pub fn joint(&self) -> DMatrix<f64> {
        let (k1, k2) = (self.c11.nrows(), self.c22.nrows());
        let mut a = DMatrix::zeros(k1 + k2, k1 + k2);
        a.view_mut((0, 0), (k1, k1)).copy_from(&self.c11);
        a.view_mut((0, k1), (k1, k2)).copy_from(&self.c12);
        a.view_mut((k1, 0), (k2, k1)).copy_from(&self.c21);
        a.view_mut((k1, k1), (k2, k2)).copy_from(&self.c22);
        a
    }

    /// Clips negative eigenvalues of the joint block matrix to zero.
    /// Returns whether anything changed.
    pub fn repair(&mut self) -> bool {
        let joint = self.joint();
        let eigen = joint.clone().symmetric_eigen();
        if eigen.eigenvalues.iter().all(|&v| v >= 0.0) {
            return false;
        }
        let clipped = eigen.eigenvalues.map(|v| v.max(0.0));
        let q = &eigen.eigenvectors;
        let fixed = q * DMatrix::from_diagonal(&clipped) * q.transpose();
        let fixed = (&fixed + fixed.transpose()) * 0.5;
        let (k1, k2) = (self.c11.nrows(), self.c22.nrows());
        self.c11 = fixed.view((0, 0), (k1, k1)).into_owned();
        self.c12 = fixed.view((0, k1), (k1, k2)).into_owned();
        self.c21 = self.c12.transpose();
        self.c22 = fixed.view((k1, k1), (k2, k2)).into_owned();
        true
    }

    /// The regularized `(K₁+K₂)` system matrix.
    pub fn system_matrix(&self, rho: Rho, n: usize) -> DMatrix<f64> {
        let (k1, k2) = (self.c11.nrows(), self.c22.nrows());
        let mut a = self.joint();
        let n = n as f64;
        for i in 0..k1 {
            a[(i, i)] += rho.first / n;
        }
        for i in k1..k1 + k2 {
            a[(i, i)] += rho.second / n;
        }
        a
    }

    pub fn rhs(&self) -> DVector<f64> {
        let (k1, k2) = (self.c1y.len(), self.c2y.len());
        let mut v = DVector::zeros(k1 + k2);
        v.rows_mut(0, k1).copy_from(&self.c1y);
        v.rows_mut(k1, k2).copy_from(&self.c2y);
        v
    }

    /// Solves the regularized system; returns the stacked `(b₁, b₂)`.
    pub fn solve(&self, rho: Rho, n: usize) -> Result<DVector<f64>> {
        let a = self.system_matrix(rho, n);
        let chol = Cholesky::new(a)
            .ok_or_else(|| Error::Numeric(format!("regularized system at t = {} is not positive definite", self.t)))?;
        let b = chol.solve(&self.rhs());
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite coefficients at t = {}", self.t)));
        }
        Ok(b)
    }
}

/// Lag bases with their quadrature, precomputed for repeated integration.
#[derive(Debug, Clone, PartialEq)]
pub struct LagDesign {
    lags1: LagWindow,
    lags2: LagWindow,
    basis1: BasisSystem,
    basis2: BasisSystem,
    nodes1: Vec<f64>,
    nodes2: Vec<f64>,
    /// `K × Q` tables of `w_q B_k(s_q)`.
    weighted1: DMatrix<f64>,
    weighted2: DMatrix<f64>,
}

impl LagDesign {
    pub fn new(lags1: LagWindow, lags2: LagWindow, cfg: &ModelConfig) -> Result<Self> {
        let basis1 = cfg.basis(lags1)?;
        let basis2 = cfg.basis(lags2)?;
        Self::from_bases(basis1, basis2, cfg.quadrature_nodes)
    }

    /// Uses the bases' own intervals as lag windows.
    pub fn from_bases(basis1: BasisSystem, basis2: BasisSystem, quadrature_nodes: usize) -> Result<Self> {
        let window = |b: &BasisSystem| LagWindow::new(b.interval().lo(), b.interval().hi());
        let (lags1, lags2) = (window(&basis1)?, window(&basis2)?);
        if lags1.upper().max(lags2.upper()) >= 1.0 {
            return Err(Error::Config(format!(
                "lag windows {lags1} and {lags2} leave no valid response interval"
            )));
        }
        let table = |basis: &BasisSystem| -> Result<(Vec<f64>, DMatrix<f64>)> {
            let rule = QuadratureRule::gauss_legendre(quadrature_nodes, basis.interval())?;
            let k = basis.len();
            let values = basis.eval_table(rule.nodes())?;
            let weighted = DMatrix::from_fn(k, rule.len(), |i, q| values[q * k + i] * rule.weights()[q]);
            Ok((rule.nodes().to_vec(), weighted))
        };
        let (nodes1, weighted1) = table(&basis1)?;
        let (nodes2, weighted2) = table(&basis2)?;
        Ok(Self {
            lags1,
            lags2,
            basis1,
            basis2,
            nodes1,
            nodes2,
            weighted1,
            weighted2,
        })
    }

    pub fn lags(&self) -> (LagWindow, LagWindow) {
        (self.lags1, self.lags2)
    }

    pub fn basis1(&self) -> &BasisSystem {
        &self.basis1
    }

    pub fn basis2(&self) -> &BasisSystem {
        &self.basis2
    }

    pub fn quadrature_nodes(&self) -> usize {
        self.nodes1.len()
    }

    /// Lower end of the valid response interval `[max upper lag, 1]`.
    pub fn valid_start(&self) -> f64 {
        self.lags1.upper().max(self.lags2.upper())
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        let lo = self.valid_start();
        if !(t >= lo - 1e-12 && t <= 1.0 + 1e-12) {
            return Err(Error::OutOfValidRange { t, lo });
        }
        Ok(())
    }

    /// Quadrature of every `C(t−s, t−u) B_k(s) B_l(u)` block plus the
    /// response cross-covariance integrals at time `t`.
    pub fn induced_covariances(&self, surfaces: &CovarianceSet, t: f64) -> Result<InducedCovariances> {
        self.check_time(t)?;
        let (q1, q2) = (self.nodes1.len(), self.nodes2.len());
        let s1 = surfaces.x1.sampler();
        let s2 = surfaces.x2.sampler();
        let s12 = surfaces.x1_x2.sampler();
        let s1y = surfaces.x1_y.sampler();
        let s2y = surfaces.x2_y.sampler();
        let a1: Vec<f64> = self.nodes1.iter().map(|s| t - s).collect();
        let a2: Vec<f64> = self.nodes2.iter().map(|s| t - s).collect();

        let g11 = DMatrix::from_fn(q1, q1, |q, r| s1.value(a1[q], a1[r]));
        let g22 = DMatrix::from_fn(q2, q2, |q, r| s2.value(a2[q], a2[r]));
        let g12 = DMatrix::from_fn(q1, q2, |q, r| s12.value(a1[q], a2[r]));
        let h1 = DVector::from_fn(q1, |q, _| s1y.value(a1[q], t));
        let h2 = DVector::from_fn(q2, |q, _| s2y.value(a2[q], t));

        let p1 = &self.weighted1;
        let p2 = &self.weighted2;
        let c11 = p1 * g11 * p1.transpose();
        let c22 = p2 * g22 * p2.transpose();
        let c12 = p1 * g12 * p2.transpose();
        let c21 = c12.transpose();
        Ok(InducedCovariances {
            t,
            c11: (&c11 + c11.transpose()) * 0.5,
            c22: (&c22 + c22.transpose()) * 0.5,
            c12,
            c21,
            c1y: p1 * h1,
            c2y: p2 * h2,
        })
    }

    /// Induced predictors `(X̃₁(t), X̃₂(t))` of a recovered subject, stacked.
    pub fn induced_predictors(&self, subject: &RecoveredSubject, t: f64) -> Result<DVector<f64>> {
        self.check_time(t)?;
        let loc1 = Locator::new(&subject.x1_grid);
        let loc2 = Locator::new(&subject.x2_grid);
        let lin = |loc: &Locator, grid: &[f64], values: &[f64], x: f64| {
            let (i, f) = loc.locate(grid, x);
            values[i] + f * (values[i + 1] - values[i])
        };
        let x1: DVector<f64> =
            DVector::from_iterator(self.nodes1.len(), self.nodes1.iter().map(|s| lin(&loc1, &subject.x1_grid, &subject.x1, t - s)));
        let x2: DVector<f64> =
            DVector::from_iterator(self.nodes2.len(), self.nodes2.iter().map(|s| lin(&loc2, &subject.x2_grid, &subject.x2, t - s)));
        let (k1, k2) = (self.basis1.len(), self.basis2.len());
        let mut z = DVector::zeros(k1 + k2);
        z.rows_mut(0, k1).copy_from(&(&self.weighted1 * x1));
        z.rows_mut(k1, k2).copy_from(&(&self.weighted2 * x2));
        Ok(z)
    }
}

/// Free-function form of [`LagDesign::induced_covariances`].
pub fn induced_covariance_matrices(
    surfaces: &CovarianceSet,
    basis1: &BasisSystem,
    basis2: &BasisSystem,
    quadrature_nodes: usize,
    t: f64,
) -> Result<InducedCovariances> {
    LagDesign::from_bases(basis1.clone(), basis2.clone(), quadrature_nodes)?.induced_covariances(surfaces, t)
}

/// Induced covariance blocks for one pair of lag windows at every evaluation time.
#[derive(Debug, Clone)]
pub struct LagSystem<'a> {
    components: &'a SmoothedComponents,
    design: LagDesign,
    eval_times: Vec<f64>,
    blocks: Vec<InducedCovariances>,
}

impl<'a> LagSystem<'a> {
    /// Blocks on an equally spaced grid of `eval_grid_size` points over the valid interval.
    pub fn new(components: &'a SmoothedComponents, design: LagDesign, eval_grid_size: usize) -> Result<Self> {
        let eval_times = linspace(design.valid_start(), 1.0, eval_grid_size);
        Self::with_times(components, design, eval_times)
    }

    pub fn with_times(components: &'a SmoothedComponents, design: LagDesign, eval_times: Vec<f64>) -> Result<Self> {
        if eval_times.windows(2).any(|w| w[1] <= w[0]) || eval_times.is_empty() {
            return Err(Error::Config("evaluation times must be nonempty and strictly increasing".into()));
        }
        let blocks = eval_times
            .par_iter()
            .map(|&t| {
                let mut block = design.induced_covariances(&components.surfaces, t)?;
                block.repair();
                Ok(block)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            components,
            design,
            eval_times,
            blocks,
        })
    }

    pub fn design(&self) -> &LagDesign {
        &self.design
    }

    pub fn eval_times(&self) -> &[f64] {
        &self.eval_times
    }

    pub fn blocks(&self) -> &[InducedCovariances] {
        &self.blocks
    }

    /// Ridge solution at every evaluation time.
    pub fn solve(&self, rho: Rho) -> Result<ModelFit> {
        let n = self.components.n_subjects;
        let (k1, k2) = (self.design.basis1.len(), self.design.basis2.len());
        let solutions = self
            .blocks
            .par_iter()
            .map(|block| block.solve(rho, n))
            .collect::<Result<Vec<_>>>()?;
        let rows = self.eval_times.len();
        let b1 = DMatrix::from_fn(rows, k1, |i, k| solutions[i][k]);
        let b2 = DMatrix::from_fn(rows, k2, |i, k| solutions[i][k1 + k]);
        Ok(ModelFit {
            intercept: self.components.intercept.clone(),
            eval_times: self.eval_times.clone(),
            b1,
            b2,
            design: self.design.clone(),
            rho,
            n_subjects: n,
            recovery: self.components.recovery.clone(),
        })
    }
}

/// A fitted model: everything needed to evaluate coefficient surfaces and
/// predict new subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFit {
    pub(crate) intercept: Curve,
    pub(crate) eval_times: Vec<f64>,
    /// `T × K₁` coefficient vectors, one row per evaluation time.
    pub(crate) b1: DMatrix<f64>,
    pub(crate) b2: DMatrix<f64>,
    pub(crate) design: LagDesign,
    pub(crate) rho: Rho,
    pub(crate) n_subjects: usize,
    pub(crate) recovery: Recovery,
}

impl ModelFit {
    pub fn intercept(&self) -> &Curve {
        &self.intercept
    }

    pub fn eval_times(&self) -> &[f64] {
        &self.eval_times
    }

    pub fn b1(&self) -> &DMatrix<f64> {
        &self.b1
    }

    pub fn b2(&self) -> &DMatrix<f64> {
        &self.b2
    }

    pub fn design(&self) -> &LagDesign {
        &self.design
    }

    pub fn lags(&self) -> (LagWindow, LagWindow) {
        self.design.lags()
    }

    pub fn rho(&self) -> Rho {
        self.rho
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn recovery(&self) -> &Recovery {
        &self.recovery
    }

    /// `[max upper lag, 1]`.
    pub fn valid_interval(&self) -> (f64, f64) {
        (self.design.valid_start(), 1.0)
    }

    /// Stacked `(b₁(t), b₂(t))`, linearly interpolated between evaluation times.
    pub fn coefficients_at(&self, t: f64) -> Result<DVector<f64>> {
        self.design.check_time(t)?;
        let (k1, k2) = (self.b1.ncols(), self.b2.ncols());
        let grid = &self.eval_times;
        let (i, f) = if grid.len() == 1 {
            (0, 0.0)
        } else {
            Locator::new(grid).locate(grid, t)
        };
        let j = (i + 1).min(grid.len() - 1);
        let mut out = DVector::zeros(k1 + k2);
        for k in 0..k1 {
            out[k] = self.b1[(i, k)] + f * (self.b1[(j, k)] - self.b1[(i, k)]);
        }
        for k in 0..k2 {
            out[k1 + k] = self.b2[(i, k)] + f * (self.b2[(j, k)] - self.b2[(i, k)]);
        }
        Ok(out)
    }

    /// Prediction from an already recovered subject at times in the valid interval.
    pub fn predict_recovered(&self, subject: &RecoveredSubject, times: &[f64]) -> Result<Vec<f64>> {
        times
            .iter()
            .map(|&t| {
                let z = self.design.induced_predictors(subject, t)?;
                let b = self.coefficients_at(t)?;
                Ok(self.intercept.eval(t) + b.dot(&z))
            })
            .collect()
    }
}

/// Fits the model with fixed lags and regularization.
pub fn fit(data: &FunctionalDataset, lags1: LagWindow, lags2: LagWindow, rho: Rho, cfg: &ModelConfig) -> Result<ModelFit> {
    let components = SmoothedComponents::estimate(data, cfg)?;
    let design = LagDesign::new(lags1, lags2, cfg)?;
    LagSystem::new(&components, design, cfg.eval_grid_size)?.solve(rho)
}

/// Raw-scale predictions `β̂₀(t) + ∫β̂₁ X̂₁(t−s) ds + ∫β̂₂ X̂₂(t−s) ds` for a new subject.
pub fn predict(
    m: &ModelFit,
    x1_obs: &SparseFunctionalSample,
    x2_obs: &SparseFunctionalSample,
    eval_times: &[f64],
) -> Result<Vec<f64>> {
    for &t in eval_times {
        m.design.check_time(t)?;
    }
    let subject = m.recovery.recover(x1_obs, x2_obs)?;
    m.predict_recovered(&subject, eval_times)
}

/// `β̂_p(s, t) = Σ_k B_pk(s) b̂_pk(t)` tabulated as `|s_grid| × |t_grid|`.
pub fn coefficient_surface(m: &ModelFit, which: Predictor, s_grid: &[f64], t_grid: &[f64]) -> Result<DMatrix<f64>> {
    let (basis, offset) = match which {
        Predictor::Dense => (&m.design.basis1, 0),
        Predictor::Sparse => (&m.design.basis2, m.design.basis1.len()),
    };
    let k = basis.len();
    let values = basis.eval_table(s_grid)?;
    let coefficients = t_grid
        .iter()
        .map(|&t| m.coefficients_at(t))
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_fn(s_grid.len(), t_grid.len(), |i, j| {
        (0..k).map(|c| values[i * k + c] * coefficients[j][offset + c]).sum()
    }))
}

/// Penalized least squares `(ZᵀZ + diag(ρ₁ I_{K₁}, ρ₂ I_{K₂}))⁻¹ ZᵀY`.
pub fn penalized_least_squares(z: &DMatrix<f64>, y: &DVector<f64>, k1: usize, rho: Rho) -> Result<DVector<f64>> {
    if z.nrows() != y.len() || k1 > z.ncols() {
        return Err(Error::Shape("design and response sizes differ".into()));
    }
    let mut gram = z.transpose() * z;
    for i in 0..z.ncols() {
        gram[(i, i)] += if i < k1 { rho.first } else { rho.second };
    }
    let chol = Cholesky::new(gram).ok_or_else(|| Error::Numeric("penalized normal equations are singular".into()))?;
    Ok(chol.solve(&(z.transpose() * y)))
}

/// Curves tabulated on a common grid for [`fit_common_grid_oracle`].
#[derive(Debug, Clone, Copy)]
pub struct GridCurves<'a> {
    pub grid: &'a [f64],
    /// `n × m`, one curve per row.
    pub values: &'a DMatrix<f64>,
}

/// Direct penalized least-squares coefficients when every subject's
/// (centered) response is observed at the same times.
///
/// Induced predictors are computed by quadrature on each subject's curve,
/// linearly interpolated between grid points.
pub fn fit_common_grid_oracle(
    y: &DMatrix<f64>,
    times: &[f64],
    x1: GridCurves<'_>,
    x2: GridCurves<'_>,
    design: &LagDesign,
    rho: Rho,
) -> Result<Vec<DVector<f64>>> {
    let n = y.nrows();
    if y.ncols() != times.len() || x1.values.nrows() != n || x2.values.nrows() != n {
        return Err(Error::Shape("oracle inputs disagree on subjects or times".into()));
    }
    let k1 = design.basis1.len();
    let k = k1 + design.basis2.len();
    times
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let mut z = DMatrix::zeros(n, k);
            for i in 0..n {
                let subject = RecoveredSubject {
                    x1_grid: x1.grid.to_vec(),
                    x1: x1.values.row(i).iter().copied().collect(),
                    x2_grid: x2.grid.to_vec(),
                    x2: x2.values.row(i).iter().copied().collect(),
                };
                let zi = design.induced_predictors(&subject, t)?;
                z.row_mut(i).copy_from(&zi.transpose());
            }
            let yj = DVector::from_iterator(n, y.column(j).iter().copied());
            penalized_least_squares(&z, &yj, k1, rho)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid() -> Vec<f64> {
        linspace(0.0, 1.0, 100)
    }

    fn window(a: f64, b: f64) -> LagWindow {
        LagWindow::new(a, b).unwrap()
    }

    #[test]
    fn lag_window_validation() {
        assert!(LagWindow::new(0.4, 0.1).is_err());
        assert!(LagWindow::new(-0.1, 0.3).is_err());
        assert!(LagWindow::new(0.1, 1.2).is_err());
        let design = LagDesign::new(window(0.1, 1.0), window(0.1, 0.4), &ModelConfig::default());
        assert!(matches!(design, Err(Error::Config(_))));
    }

    #[test]
    fn zero_surfaces_give_zero_blocks() {
        let g = grid();
        let set = CovarianceSet::zeros(&g, &g);
        let design = LagDesign::new(window(0.1, 0.4), window(0.1, 0.4), &ModelConfig::default()).unwrap();
        let ic = design.induced_covariances(&set, 0.7).unwrap();
        assert!(ic.c11.iter().chain(ic.c22.iter()).chain(ic.c12.iter()).all(|&v| v == 0.0));
        assert!(ic.c1y.iter().chain(ic.c2y.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn time_before_valid_interval_is_rejected() {
        let g = grid();
        let set = CovarianceSet::zeros(&g, &g);
        let design = LagDesign::new(window(0.1, 0.4), window(0.1, 0.2), &ModelConfig::default()).unwrap();
        match design.induced_covariances(&set, 0.3) {
            Err(Error::OutOfValidRange { lo, .. }) => assert_eq!(lo, 0.4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn separable_kernel_gives_rank_one_block() {
        let g = grid();
        let mut set = CovarianceSet::zeros(&g, &g);
        // Fine grid so that bilinear interpolation error stays far below the check.
        let fine = linspace(0.0, 1.0, 2001);
        set.x2 = CovarianceSurface::from_fn(fine.clone(), fine, |s, u| (2.0 * PI * s).cos() * (2.0 * PI * u).cos()).unwrap();
        let cfg = ModelConfig::default();
        let design = LagDesign::new(window(0.1, 0.4), window(0.1, 0.4), &cfg).unwrap();
        let t = 0.73;
        let ic = design.induced_covariances(&set, t).unwrap();
        let basis = design.basis2();
        let v: Vec<f64> = (0..basis.len())
            .map(|k| {
                crate::basis::quadrature_integrate(
                    |s| basis.eval(s).unwrap()[k] * (2.0 * PI * (t - s)).cos(),
                    basis.interval(),
                    60,
                )
                .unwrap()
            })
            .collect();
        let scale = v.iter().map(|x| x * x).sum::<f64>();
        for k in 0..v.len() {
            for l in 0..v.len() {
                let err = (ic.c22[(k, l)] - v[k] * v[l]).abs() / scale;
                assert!(err < 1e-4, "{k} {l} {err:e}");
            }
        }
        let sv = ic.c22.clone().svd(false, false).singular_values;
        assert!(sv.iter().skip(1).all(|&x| x < 1e-10 * sv[0].max(1e-300) + 1e-18));
    }

    #[test]
    fn identity_design_ridge() {
        let z = DMatrix::identity(2, 2);
        let y = DVector::from_vec(vec![2.0, 2.0]);
        let b = penalized_least_squares(&z, &y, 1, Rho::new(1.0, 1.0).unwrap()).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-15 && (b[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hand_built_two_by_two_matches_closed_form() {
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, -1.0]);
        let y = DVector::from_vec(vec![0.5, 4.0]);
        let rho = Rho::new(0.3, 0.7).unwrap();
        let b = penalized_least_squares(&z, &y, 1, rho).unwrap();
        // Brute-force 2x2 inverse of ZᵀZ + diag(ρ).
        let (a, bb, d) = (1.0 + 9.0 + 0.3, 2.0 - 3.0, 4.0 + 1.0 + 0.7);
        let rhs = [0.5 + 12.0, 1.0 - 4.0];
        let det = a * d - bb * bb;
        let expected = [(d * rhs[0] - bb * rhs[1]) / det, (a * rhs[1] - bb * rhs[0]) / det];
        assert!((b[0] - expected[0]).abs() < 1e-12);
        assert!((b[1] - expected[1]).abs() < 1e-12);
    }

    #[test]
    fn system_matrix_is_spd_with_ridge_floor() {
        let g = grid();
        let mut set = CovarianceSet::zeros(&g, &g);
        set.x1 = CovarianceSurface::from_fn(g.clone(), g.clone(), |s, u| (2.0 * PI * s).sin() * (2.0 * PI * u).sin() + s * s * u * u).unwrap();
        let design = LagDesign::new(window(0.1, 0.4), window(0.1, 0.4), &ModelConfig::default()).unwrap();
        let ic = design.induced_covariances(&set, 0.8).unwrap();
        let rho = Rho::new(1e-3, 2e-3).unwrap();
        let a = ic.system_matrix(rho, 50);
        assert!((&a - a.transpose()).amax() < 1e-15);
        let min_eig = a.symmetric_eigen().eigenvalues.min();
        assert!(min_eig >= 1e-3 / 50.0 - 1e-10);
    }
}
