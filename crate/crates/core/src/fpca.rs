//! Functional principal components of a smoothed covariance surface and
//! best-linear-predictor scores for sparsely observed curves.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::grid::{trapezoid_weights, Locator};
use crate::smoothing::{CovarianceSurface, SparseFunctionalSample};

/// Eigenpairs of the covariance operator, tabulated on a grid.
///
/// Eigenfunctions are orthonormal in `L²` under trapezoid weights and are
/// sign-normalized so that their largest-magnitude entry is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigensystem {
    grid: Vec<f64>,
    eigenvalues: Vec<f64>,
    /// `m × L`, one eigenfunction per column.
    eigenfunctions: DMatrix<f64>,
    noise_variance: f64,
}

/// Estimated principal-component scores of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEstimate {
    scores: Vec<f64>,
}

impl ScoreEstimate {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() || scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("scores must be finite and nonempty".into()));
        }
        Ok(Self { scores })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn truncation(&self) -> usize {
        self.scores.len()
    }
}

/// Relative cut below which eigenvalues are treated as numerical zeros.
const EIGENVALUE_CUTOFF: f64 = 1e-10;
const MAX_CONDITION: f64 = 1e12;
const NOISE_FLOOR: f64 = 1e-10;

impl Eigensystem {
    /// Assembles an eigensystem from already tabulated parts.
    pub fn from_parts(grid: Vec<f64>, eigenvalues: Vec<f64>, eigenfunctions: DMatrix<f64>, noise_variance: f64) -> Result<Self> {
        if eigenfunctions.nrows() != grid.len() || eigenfunctions.ncols() != eigenvalues.len() {
            return Err(Error::Shape("eigenfunction table does not match grid and eigenvalues".into()));
        }
        if eigenvalues.windows(2).any(|w| w[1] > w[0]) || eigenvalues.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Shape("eigenvalues must be nonnegative and nonincreasing".into()));
        }
        if !(noise_variance >= 0.0) {
            return Err(Error::Config("noise variance must be nonnegative".into()));
        }
        Ok(Self {
            grid,
            eigenvalues,
            eigenfunctions,
            noise_variance,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenfunctions(&self) -> &DMatrix<f64> {
        &self.eigenfunctions
    }

    pub fn eigenfunction(&self, l: usize) -> Vec<f64> {
        self.eigenfunctions.column(l).iter().copied().collect()
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Trapezoid inner products `⟨φ_l, φ_m⟩` of the retained eigenfunctions.
    pub fn gram(&self) -> DMatrix<f64> {
        let w = DVector::from_vec(trapezoid_weights(&self.grid));
        let weighted = DMatrix::from_fn(self.grid.len(), self.len(), |i, l| w[i] * self.eigenfunctions[(i, l)]);
        self.eigenfunctions.transpose() * weighted
    }

    /// Values of the first `count` eigenfunctions at `times`, `times.len() × count`.
    fn eigenfunctions_at(&self, times: &[f64], count: usize) -> DMatrix<f64> {
        let locator = Locator::new(&self.grid);
        let mut out = DMatrix::zeros(times.len(), count);
        if self.grid.len() == 1 {
            for l in 0..count {
                out.column_mut(l).fill(self.eigenfunctions[(0, l)]);
            }
            return out;
        }
        for (j, &t) in times.iter().enumerate() {
            let (i, frac) = locator.locate(&self.grid, t);
            for l in 0..count {
                let a = self.eigenfunctions[(i, l)];
                let b = self.eigenfunctions[(i + 1, l)];
                out[(j, l)] = a + frac * (b - a);
            }
        }
        out
    }
}

/// Discretized Mercer decomposition of a square covariance surface.
///
/// Solves `W^{1/2} C W^{1/2} v = λ v` with trapezoid weights `W`, maps back
/// with `φ = W^{-1/2} v`, and drops nonpositive eigenvalues.
pub fn eigendecompose(c: &CovarianceSurface, noise_variance: f64) -> Result<Eigensystem> {
    if !c.is_square() {
        return Err(Error::Shape("eigendecomposition needs a square surface".into()));
    }
    let scale = c.values().amax().max(1.0);
    if c.symmetry_error() > 1e-8 * scale {
        return Err(Error::Shape(format!(
            "surface is not symmetric (max asymmetry {:e})",
            c.symmetry_error()
        )));
    }
    if !(noise_variance >= 0.0) {
        return Err(Error::Config("noise variance must be nonnegative".into()));
    }
    let grid = c.grid_s().to_vec();
    let m = grid.len();
    if m < 2 {
        return Err(Error::Shape("eigendecomposition needs at least two grid points".into()));
    }
    let root_w: Vec<f64> = trapezoid_weights(&grid).iter().map(|w| w.sqrt()).collect();
    let mut weighted = DMatrix::from_fn(m, m, |i, j| root_w[i] * c.values()[(i, j)] * root_w[j]);
    // Exact symmetry for the solver.
    weighted = (&weighted + weighted.transpose()) * 0.5;
    let eigen = SymmetricEigen::new(weighted);

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]).then(a.cmp(&b)));
    let largest = eigen.eigenvalues[order[0]];
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&i| eigen.eigenvalues[i] > 0.0 && eigen.eigenvalues[i] > EIGENVALUE_CUTOFF * largest)
        .collect();

    let mut functions = DMatrix::zeros(m, kept.len());
    for (l, &idx) in kept.iter().enumerate() {
        let v = eigen.eigenvectors.column(idx);
        let mut phi: Vec<f64> = (0..m).map(|i| v[i] / root_w[i]).collect();
        let mut pivot = 0;
        for i in 1..m {
            if phi[i].abs() > phi[pivot].abs() {
                pivot = i;
            }
        }
        if phi[pivot] < 0.0 {
            phi.iter_mut().for_each(|x| *x = -*x);
        }
        functions.set_column(l, &DVector::from_vec(phi));
    }
    let eigenvalues = kept.iter().map(|&i| eigen.eigenvalues[i]).collect();
    Eigensystem::from_parts(grid, eigenvalues, functions, noise_variance)
}

/// Smallest `L` whose leading eigenvalues explain at least `fve` of the total.
pub fn select_truncation(e: &Eigensystem, fve: f64) -> Result<usize> {
    if !(fve > 0.0 && fve <= 1.0) {
        return Err(Error::Config(format!("fraction of variance explained must be in (0, 1], got {fve}")));
    }
    let total: f64 = e.eigenvalues.iter().sum();
    if e.is_empty() || !(total > 0.0) {
        return Err(Error::NoSignal);
    }
    let mut running = 0.0;
    for (l, lambda) in e.eigenvalues.iter().enumerate() {
        running += lambda;
        // Tolerate round-off in the cumulative ratio.
        if running / total >= fve * (1.0 - 1e-12) {
            return Ok(l + 1);
        }
    }
    Ok(e.len())
}

/// Best linear predictor `ξ̂_l = λ_l φ_lᵀ Σ⁻¹ W` of the first `l_count`
/// scores from centered sparse observations, with
/// `Σ = [C(s_j, s_k)] + σ² I` built from the retained eigenpairs.
pub fn blup_scores(e: &Eigensystem, obs: &SparseFunctionalSample, l_count: usize) -> Result<ScoreEstimate> {
    if l_count == 0 || l_count > e.len() {
        return Err(Error::Config(format!(
            "truncation {l_count} not in 1..={} retained components",
            e.len()
        )));
    }
    let (lo, hi) = (e.grid[0], e.grid[e.grid.len() - 1]);
    if let Some(&t) = obs.times().iter().find(|&&t| t < lo - 1e-12 || t > hi + 1e-12) {
        return Err(Error::OutOfDomain { value: t, lo, hi });
    }
    let phi = e.eigenfunctions_at(obs.times(), e.len());
    let lambda = DMatrix::from_diagonal(&DVector::from_column_slice(&e.eigenvalues));
    let mut sigma = &phi * lambda * phi.transpose();
    let max_diag = sigma.diagonal().amax();
    let noise = e.noise_variance.max(NOISE_FLOOR * max_diag);
    for j in 0..sigma.nrows() {
        sigma[(j, j)] += noise;
    }
    let spectrum = SymmetricEigen::new(sigma.clone()).eigenvalues;
    let (smallest, largest) = (spectrum.min(), spectrum.max());
    let condition = if smallest > 0.0 { largest / smallest } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::IllConditioned { condition });
    }
    let chol = Cholesky::new(sigma).ok_or(Error::IllConditioned { condition })?;
    let solved = chol.solve(&DVector::from_column_slice(obs.values()));
    let scores = (0..l_count)
        .map(|l| e.eigenvalues[l] * phi.column(l).dot(&solved))
        .collect();
    ScoreEstimate::new(scores)
}

/// `Σ_l ξ̂_l φ_l(s)` on `eval_grid`, eigenfunctions linearly interpolated.
pub fn reconstruct_curve(e: &Eigensystem, s: &ScoreEstimate, eval_grid: &[f64]) -> Result<Vec<f64>> {
    let l_count = s.truncation();
    if l_count > e.len() {
        return Err(Error::Config(format!(
            "score vector has {l_count} entries but only {} eigenfunctions are retained",
            e.len()
        )));
    }
    let (lo, hi) = (e.grid[0], e.grid[e.grid.len() - 1]);
    if let Some(&t) = eval_grid.iter().find(|&&t| t < lo - 1e-12 || t > hi + 1e-12) {
        return Err(Error::OutOfDomain { value: t, lo, hi });
    }
    let phi = e.eigenfunctions_at(eval_grid, l_count);
    Ok((&phi * DVector::from_column_slice(s.scores())).iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::linspace;
    use std::f64::consts::{PI, SQRT_2};

    fn master_grid() -> Vec<f64> {
        linspace(0.0, 1.0, 100)
    }

    fn cosine_system(noise: f64) -> Eigensystem {
        let g = master_grid();
        let c = CovarianceSurface::from_fn(g.clone(), g, |s, u| (2.0 * PI * s).cos() * (2.0 * PI * u).cos()).unwrap();
        eigendecompose(&c, noise).unwrap()
    }

    #[test]
    fn rank_one_cosine_kernel() {
        let e = cosine_system(0.0);
        assert!((e.eigenvalues()[0] - 0.5).abs() < 2e-3);
        assert!(e.eigenvalues().get(1).map_or(true, |&l| l < 1e-6));
        let phi = e.eigenfunction(0);
        for (s, p) in master_grid().iter().zip(phi) {
            assert!((p - SQRT_2 * (2.0 * PI * s).cos()).abs() < 2e-2);
        }
    }

    #[test]
    fn zero_surface_has_no_components() {
        let g = master_grid();
        let e = eigendecompose(&CovarianceSurface::zeros(g.clone(), g), 0.0).unwrap();
        assert!(e.is_empty());
        assert_eq!(select_truncation(&e, 0.95), Err(Error::NoSignal));
    }

    #[test]
    fn asymmetric_surface_is_rejected() {
        let g = linspace(0.0, 1.0, 5);
        let c = CovarianceSurface::from_fn(g.clone(), g, |s, u| s + 2.0 * u).unwrap();
        assert!(matches!(eigendecompose(&c, 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn rank_two_kernel_has_two_components() {
        let g = master_grid();
        let c = CovarianceSurface::from_fn(g.clone(), g, |s, u| {
            (2.0 * PI * s).sin() * (2.0 * PI * u).sin() + s * s * u * u
        })
        .unwrap();
        let e = eigendecompose(&c, 0.0).unwrap();
        assert_eq!(e.eigenvalues().iter().filter(|&&l| l > 1e-6).count(), 2);
        let gram = e.gram();
        for i in 0..e.len() {
            for j in 0..e.len() {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - target).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn truncation_rule() {
        let g = linspace(0.0, 1.0, 3);
        let one = Eigensystem::from_parts(g.clone(), vec![0.5], DMatrix::from_element(3, 1, 1.0), 0.0).unwrap();
        assert_eq!(select_truncation(&one, 0.95).unwrap(), 1);
        let two = Eigensystem::from_parts(g, vec![0.9, 0.1], DMatrix::from_element(3, 2, 1.0), 0.0).unwrap();
        assert_eq!(select_truncation(&two, 0.95).unwrap(), 2);
        assert_eq!(select_truncation(&two, 0.9).unwrap(), 1);
    }

    #[test]
    fn single_observation_scores() {
        let e = cosine_system(0.0);
        let s0 = 0.13;
        let w = 0.7;
        let obs = SparseFunctionalSample::new("a", vec![s0], vec![w]).unwrap();
        let score = blup_scores(&e, &obs, 1).unwrap().scores()[0];
        let phi = crate::grid::interpolate(e.grid(), &e.eigenfunction(0), s0);
        assert!((score - w / phi).abs() < 1e-8 * (w / phi).abs());

        // Noise shrinks the score: λφW / (λφ² + σ²).
        let noisy = Eigensystem::from_parts(
            e.grid().to_vec(),
            e.eigenvalues().to_vec(),
            e.eigenfunctions().clone(),
            0.05,
        )
        .unwrap();
        let shrunk = blup_scores(&noisy, &obs, 1).unwrap().scores()[0];
        let lambda = e.eigenvalues()[0];
        assert!((shrunk - lambda * phi * w / (lambda * phi * phi + 0.05)).abs() < 1e-12);
        assert!(shrunk.abs() < score.abs());
    }

    #[test]
    fn zero_observations_give_zero_scores() {
        let e = cosine_system(0.01);
        let obs = SparseFunctionalSample::new("a", vec![0.1, 0.4, 0.8], vec![0.0; 3]).unwrap();
        assert_eq!(blup_scores(&e, &obs, 1).unwrap().scores(), &[0.0]);
        let zero = ScoreEstimate::new(vec![0.0]).unwrap();
        assert!(reconstruct_curve(&e, &zero, &master_grid()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_cosine_observation_recovers_unit_score() {
        let e = cosine_system(0.0);
        let g = master_grid();
        let obs = SparseFunctionalSample::new("a", g.clone(), g.iter().map(|s| (2.0 * PI * s).cos()).collect()).unwrap();
        let score = blup_scores(&e, &obs, 1).unwrap();
        assert!((score.scores()[0] - 1.0 / SQRT_2).abs() < 1e-2);
        let curve = reconstruct_curve(&e, &score, &g).unwrap();
        for (s, v) in g.iter().zip(curve) {
            assert!((v - (2.0 * PI * s).cos()).abs() < 2e-2);
        }
    }

    #[test]
    fn out_of_range_observation_is_rejected() {
        let g = linspace(0.2, 0.8, 20);
        let c = CovarianceSurface::from_fn(g.clone(), g, |s, u| s * u).unwrap();
        let e = eigendecompose(&c, 0.0).unwrap();
        let obs = SparseFunctionalSample::new("a", vec![0.1], vec![1.0]).unwrap();
        assert!(matches!(blup_scores(&e, &obs, 1), Err(Error::OutOfDomain { .. })));
    }

    #[test]
    fn sign_normalization_is_deterministic() {
        let a = cosine_system(0.0);
        let b = cosine_system(0.0);
        assert_eq!(a, b);
        let phi = a.eigenfunction(0);
        let pivot = phi.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        assert!(pivot > 0.0);
    }
}
