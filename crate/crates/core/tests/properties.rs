use histlag::basis::{make_bspline_basis, Interval, QuadratureRule};
use histlag::grid::linspace;
use histlag::selection::{fold_partition, npe};
use histlag::smoothing::{local_linear_1d, SmoothingConfig};
use proptest::prelude::*;

fn interval() -> impl Strategy<Value = (f64, f64)> {
    (-2.0..2.0f64, 0.05..3.0f64).prop_map(|(lo, len)| (lo, lo + len))
}

proptest! {
    #[test]
    fn bspline_partition_of_unity((lo, hi) in interval(), order in 1usize..6, knots in 1usize..15, u in 0.0..=1.0f64) {
        let b = make_bspline_basis(order, knots, Interval::new(lo, hi).unwrap()).unwrap();
        prop_assert_eq!(b.len(), knots + order);
        let s = lo + u * (hi - lo);
        let v = b.eval(s).unwrap();
        prop_assert!(v.iter().all(|&x| x >= -1e-14));
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bspline_local_support(order in 1usize..6, knots in 1usize..15, u in 0.0..=1.0f64) {
        let b = make_bspline_basis(order, knots, Interval::new(0.0, 1.0).unwrap()).unwrap();
        let v = b.eval(u).unwrap();
        prop_assert!(v.iter().filter(|&&x| x != 0.0).count() <= order);
        for (k, &x) in v.iter().enumerate() {
            let (a, c) = b.support(k);
            if u < a || u > c {
                prop_assert_eq!(x, 0.0);
            }
        }
    }

    #[test]
    fn gauss_legendre_is_exact_for_polynomials(
        (lo, hi) in interval(),
        nodes in 1usize..40,
        coef in proptest::collection::vec(-3.0..3.0f64, 1..10),
    ) {
        let degree = coef.len() - 1;
        prop_assume!(degree < 2 * nodes);
        let q = QuadratureRule::gauss_legendre(nodes, Interval::new(lo, hi).unwrap()).unwrap();
        let poly = |x: f64| coef.iter().rev().fold(0.0, |acc, c| acc * x + c);
        let antiderivative = |x: f64| {
            coef.iter().enumerate().map(|(p, c)| c * x.powi(p as i32 + 1) / (p as f64 + 1.0)).sum::<f64>()
        };
        let exact = antiderivative(hi) - antiderivative(lo);
        let scale = coef.iter().map(|c| c.abs()).sum::<f64>() * (1.0 + lo.abs().max(hi.abs())).powi(degree as i32 + 1);
        prop_assert!((q.integrate(poly).unwrap() - exact).abs() < 1e-12 * scale);
    }

    #[test]
    fn local_linear_reproduces_lines(
        a in -5.0..5.0f64,
        b in -5.0..5.0f64,
        times in proptest::collection::vec(0.0..1.0f64, 30..80),
        h in 0.15..0.6f64,
    ) {
        let points: Vec<(f64, f64)> = times.iter().map(|&t| (t, a + b * t)).collect();
        let cfg = SmoothingConfig::default().with_fixed(h, h);
        let grid = linspace(0.2, 0.8, 7);
        if let Ok(fitted) = local_linear_1d(&points, &cfg, &grid) {
            for (&x, &v) in grid.iter().zip(&fitted) {
                prop_assert!((v - (a + b * x)).abs() < 1e-8 * (1.0 + a.abs() + b.abs()));
            }
        }
    }

    #[test]
    fn npe_is_nonnegative_and_zero_at_truth(
        pairs in proptest::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 1..50),
    ) {
        let (pred, obs): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if let Ok(e) = npe(&pred, &obs) {
            prop_assert!(e.value >= 0.0);
            prop_assert_eq!(npe(&obs, &obs).unwrap().value, 0.0);
        }
    }

    #[test]
    fn folds_partition_subjects(n in 2usize..300, k in 2usize..12, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let folds = fold_partition(n, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(folds, fold_partition(n, k, seed).unwrap());
    }
}
