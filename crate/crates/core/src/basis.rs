//! B-spline bases on lag intervals and Gauss–Legendre quadrature.
//!
//! Every integral in the estimator (induced predictors, induced covariance
//! blocks, predictions) runs through [`QuadratureRule`], and every
//! coefficient surface is expanded in a [`BasisSystem`].

use crate::error::{Error, Result};

/// Closed subinterval `[lo, hi]` with `lo < hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    lo: f64,
    hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(Error::InvalidInterval { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    #[inline]
    pub fn lo(&self) -> f64 {
        self.lo
    }

    #[inline]
    pub fn hi(&self) -> f64 {
        self.hi
    }

    #[inline]
    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }

    #[inline]
    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }
}

/// Clamped B-spline basis with equally spaced interior knots.
///
/// `order` is the number of polynomial coefficients per piece (order 4 gives
/// cubic pieces). The boundary knots are repeated `order` times, so the basis
/// has `interior_knots + order` functions: the default order 4 with 10
/// interior knots yields 14 functions.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSystem {
    order: usize,
    interior_knots: usize,
    interval: Interval,
    knots: Vec<f64>,
}

impl BasisSystem {
    pub fn bspline(order: usize, interior_knots: usize, interval: Interval) -> Result<Self> {
        if order < 1 {
            return Err(Error::Config("B-spline order must be at least 1".into()));
        }
        if interior_knots < 1 {
            return Err(Error::Config("at least one interior knot is required".into()));
        }
        let (lo, hi) = (interval.lo(), interval.hi());
        let step = interval.length() / (interior_knots + 1) as f64;
        let mut knots = Vec::with_capacity(interior_knots + 2 * order);
        knots.extend(std::iter::repeat(lo).take(order));
        knots.extend((1..=interior_knots).map(|i| lo + i as f64 * step));
        knots.extend(std::iter::repeat(hi).take(order));
        Ok(Self {
            order,
            interior_knots,
            interval,
            knots,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn interior_knots(&self) -> usize {
        self.interior_knots
    }

    pub fn interval(&self) -> Interval {
        self.interval
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions `K`.
    pub fn len(&self) -> usize {
        self.interior_knots + self.order
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Support `[knot_k, knot_{k+order}]` of the `k`-th basis function.
    pub fn support(&self, k: usize) -> (f64, f64) {
        (self.knots[k], self.knots[k + self.order])
    }

    /// Values of all `K` basis functions at `s`.
    pub fn eval(&self, s: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(s, &mut out)?;
        Ok(out)
    }

    /// Writes the basis values at `s` into `out` (length `K`).
    pub fn eval_into(&self, s: f64, out: &mut [f64]) -> Result<()> {
        if !self.interval.contains(s) {
            return Err(Error::OutOfDomain {
                value: s,
                lo: self.interval.lo(),
                hi: self.interval.hi(),
            });
        }
        debug_assert_eq!(out.len(), self.len());
        out.iter_mut().for_each(|v| *v = 0.0);

        let p = self.order - 1;
        let span = self.find_span(s);
        // de Boor / Cox triangular recurrence over the `order` nonzero functions.
        let mut values = [0.0f64; 16];
        let mut left = [0.0f64; 16];
        let mut right = [0.0f64; 16];
        let mut heap;
        let (values, left, right): (&mut [f64], &mut [f64], &mut [f64]) = if self.order <= 16 {
            (&mut values[..], &mut left[..], &mut right[..])
        } else {
            heap = vec![0.0; 3 * self.order];
            let (a, rest) = heap.split_at_mut(self.order);
            let (b, c) = rest.split_at_mut(self.order);
            (a, b, c)
        };
        values[0] = 1.0;
        for j in 1..=p {
            left[j] = s - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - s;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = values[r] / (right[r + 1] + left[j - r]);
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        out[span - p..=span].copy_from_slice(&values[..=p]);
        Ok(())
    }

    /// Basis values at each of `points`, as a `points.len()` × `K` row-major table.
    pub fn eval_table(&self, points: &[f64]) -> Result<Vec<f64>> {
        let k = self.len();
        let mut table = vec![0.0; points.len() * k];
        for (row, &s) in table.chunks_exact_mut(k).zip(points) {
            self.eval_into(s, row)?;
        }
        Ok(table)
    }

    fn find_span(&self, s: f64) -> usize {
        let p = self.order - 1;
        let last = self.len() - 1;
        if s >= self.interval.hi() {
            return last;
        }
        // Largest index with knots[i] <= s among the non-degenerate spans.
        let mut lo = p;
        let mut hi = last + 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.knots[mid] <= s {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

/// Builds the default-style clamped B-spline basis. See [`BasisSystem::bspline`].
pub fn make_bspline_basis(order: usize, interior_knots: usize, interval: Interval) -> Result<BasisSystem> {
    BasisSystem::bspline(order, interior_knots, interval)
}

/// Gauss–Legendre rule mapped onto an interval.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    interval: Interval,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn gauss_legendre(node_count: usize, interval: Interval) -> Result<Self> {
        if node_count < 1 {
            return Err(Error::Config("quadrature needs at least one node".into()));
        }
        let (reference_nodes, reference_weights) = legendre_nodes_weights(node_count);
        let half = 0.5 * interval.length();
        let mid = 0.5 * (interval.lo() + interval.hi());
        let nodes = reference_nodes.iter().map(|x| mid + half * x).collect();
        let weights = reference_weights.iter().map(|w| half * w).collect();
        Ok(Self {
            interval,
            nodes,
            weights,
        })
    }

    pub fn interval(&self) -> Interval {
        self.interval
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Applies the rule to `f`, rejecting non-finite integrand values.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F) -> Result<f64> {
        let mut total = 0.0;
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            let v = f(x);
            if !v.is_finite() {
                return Err(Error::NonFinite { location: x });
            }
            total += w * v;
        }
        Ok(total)
    }
}

/// Gauss–Legendre approximation of `∫ f` over `interval` with `nodes` points.
pub fn quadrature_integrate<F: FnMut(f64) -> f64>(f: F, interval: Interval, nodes: usize) -> Result<f64> {
    if nodes < 2 {
        return Err(Error::Config("quadrature_integrate needs at least two nodes".into()));
    }
    QuadratureRule::gauss_legendre(nodes, interval)?.integrate(f)
}

/// Nodes and weights on [-1, 1], by Newton iteration on the Legendre polynomial.
fn legendre_nodes_weights(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let half = n.div_ceil(2);
    for i in 0..half {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut derivative = 0.0;
        for _ in 0..100 {
            let (p, dp) = legendre_with_derivative(n, x);
            derivative = dp;
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                let (_, dp) = legendre_with_derivative(n, x);
                derivative = dp;
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * derivative * derivative);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn unit() -> Interval {
        Interval::new(0.0, 1.0).unwrap()
    }

    #[test]
    fn default_basis_has_fourteen_functions() {
        let b = make_bspline_basis(4, 10, Interval::new(0.1, 0.4).unwrap()).unwrap();
        assert_eq!(b.len(), 14);
        assert_eq!(b.knots().len(), 10 + 2 * 4);
        assert!(b.knots().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn reversed_interval_is_rejected() {
        assert!(matches!(Interval::new(0.4, 0.1), Err(Error::InvalidInterval { .. })));
        assert!(matches!(Interval::new(0.3, 0.3), Err(Error::InvalidInterval { .. })));
    }

    #[test]
    fn minimal_order_one_basis() {
        let b = make_bspline_basis(1, 1, unit()).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.knots(), &[0.0, 0.5, 1.0]);
        assert_eq!(b.eval(0.25).unwrap(), vec![1.0, 0.0]);
        assert_eq!(b.eval(0.75).unwrap(), vec![0.0, 1.0]);
        assert_eq!(b.eval(1.0).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn left_endpoint_selects_first_function() {
        let b = make_bspline_basis(4, 10, Interval::new(0.1, 0.4).unwrap()).unwrap();
        let v = b.eval(0.1).unwrap();
        assert_eq!(v[0], 1.0);
        assert!(v[1..].iter().all(|&x| x == 0.0));
        let v = b.eval(0.4).unwrap();
        assert!((v[13] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn evaluation_outside_interval_fails() {
        let b = make_bspline_basis(4, 10, Interval::new(0.1, 0.4).unwrap()).unwrap();
        assert!(matches!(b.eval(0.05), Err(Error::OutOfDomain { .. })));
    }

    #[test]
    fn cubic_pieces_match_explicit_formula() {
        // Single-span cubic (no interior structure near the left end): B_0 = ((h - x)/h)^3.
        let b = make_bspline_basis(4, 1, unit()).unwrap();
        let x = 0.2;
        let v = b.eval(x).unwrap();
        let expected = ((0.5 - x) / 0.5f64).powi(3);
        assert!((v[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn quadrature_constant_and_polynomial() {
        let i = Interval::new(0.1, 0.4).unwrap();
        let v = quadrature_integrate(|_| 1.0, i, 30).unwrap();
        assert!((v - 0.3).abs() < 1e-14);
        let v = quadrature_integrate(|s| s * s * s, unit(), 2).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
    }

    #[test]
    fn quadrature_sine_matches_antiderivative() {
        let i = Interval::new(0.1, 0.4).unwrap();
        let exact = ((2.0 * PI * 0.1).cos() - (2.0 * PI * 0.4).cos()) / (2.0 * PI);
        let v = quadrature_integrate(|s| (2.0 * PI * s).sin(), i, 30).unwrap();
        assert!((v - exact).abs() < 1e-10);
        assert!((v - 0.2575181).abs() < 1e-7);
    }

    #[test]
    fn quadrature_reports_non_finite_node() {
        let err = quadrature_integrate(|s| if s > 0.5 { f64::NAN } else { s }, unit(), 4).unwrap_err();
        match err {
            Error::NonFinite { location } => assert!(location > 0.5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn weights_sum_to_length() {
        for n in [1, 2, 5, 30, 64] {
            let rule = QuadratureRule::gauss_legendre(n, Interval::new(0.1, 0.4).unwrap()).unwrap();
            let total: f64 = rule.weights().iter().sum();
            assert!((total - 0.3).abs() < 1e-14, "n = {n}");
            assert!(rule.weights().iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn quadrature_converges_on_oscillating_integrand() {
        let i = Interval::new(0.1, 0.4).unwrap();
        // sin(4πs) is odd about the midpoint, so every symmetric rule is exact here.
        for n in [4, 8, 16, 32, 64] {
            assert!(quadrature_integrate(|s| (4.0 * PI * s).sin(), i, n).unwrap().abs() < 1e-12);
        }
        // Asymmetric integrand: e^{3s} sin(4πs).
        let (a, b) = (3.0, 4.0 * PI);
        let anti = |s: f64| (a * s).exp() * (a * (b * s).sin() - b * (b * s).cos()) / (a * a + b * b);
        let exact = anti(0.4) - anti(0.1);
        let errors: Vec<f64> = [2, 4, 8, 16]
            .iter()
            .map(|&n| (quadrature_integrate(|s| (a * s).exp() * (b * s).sin(), i, n).unwrap() - exact).abs())
            .collect();
        assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
        assert!(errors[3] < 1e-12);
    }
}
