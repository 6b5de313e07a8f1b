use bands_core::bands::{cell_mesh, cell_problem};
use bands_core::coeff::ContrastField;
use bands_core::eig::{self, Method, Pencil, SolverOptions};
use bands_core::fem::CsrMatrix;
use num_complex::Complex64 as c64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Banded random Hermitian pencil with a diagonally dominant (hence
/// definite) mass matrix.
fn random_pencil(n: usize, band: usize, seed: u64) -> (CsrMatrix, CsrMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut k = Vec::new();
    let mut m = Vec::new();
    for i in 0..n {
        k.push((i, i, c64::new(rng.random_range(0.0..50.0) + 2.0 * band as f64, 0.0)));
        m.push((i, i, c64::new(2.0 * band as f64 + 1.0, 0.0)));
        for j in (i + 1)..(i + 1 + band).min(n) {
            let a = c64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let b = c64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            k.extend([(i, j, a), (j, i, a.conj())]);
            m.extend([(i, j, b), (j, i, b.conj())]);
        }
    }
    (CsrMatrix::from_triplets(n, k), CsrMatrix::from_triplets(n, m))
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(1.0)).fold(0.0, f64::max)
}

fn opts(method: Method) -> SolverOptions {
    SolverOptions { method, ..SolverOptions::default() }
}

#[test]
fn iterative_matches_dense_on_random_pencil() {
    let (k, m) = random_pencil(900, 3, 7);
    let pencil = Pencil::new(&k, &m);
    let dense = eig::solve_smallest(&pencil, 10, &opts(Method::Dense)).unwrap();
    let iter = eig::solve_smallest(&pencil, 10, &opts(Method::Iterative)).unwrap();
    assert!(max_rel(&dense.values, &iter.values) <= 1e-8, "{:?} vs {:?}", dense.values, iter.values);
    for r in [&dense, &iter] {
        let report = eig::verify_result(&pencil, r, 1e-7);
        assert!(report.is_clean(), "{:?}", report.violations);
    }
}

#[test]
fn interior_shift_matches_dense() {
    let (k, m) = random_pencil(700, 2, 3);
    let pencil = Pencil::new(&k, &m);
    let all = eig::solve_smallest(&pencil, 700, &opts(Method::Dense)).unwrap();
    let target = all.values[350];
    let near = eig::solve_near(&pencil, target, 6, &opts(Method::Iterative)).unwrap();
    let mut expected: Vec<f64> = all.values.clone();
    expected.sort_by(|a, b| (a - target).abs().total_cmp(&(b - target).abs()));
    expected.truncate(6);
    expected.sort_by(f64::total_cmp);
    assert!(max_rel(&expected, &near.values) <= 1e-8, "{expected:?} vs {:?}", near.values);
    assert!(eig::verify_result(&pencil, &near, 1e-7).is_clean());
}

#[test]
fn bloch_cell_pencil_dense_and_iterative_agree() {
    let field = ContrastField::periodic(0.7, 0.5, 0.08, 0.75).unwrap();
    let mesh = cell_mesh(&field, 0.1).unwrap();
    let problem = cell_problem(&field, &mesh, [1.1, 2.3]).unwrap();
    assert!(problem.dim() <= 2000);
    let pencil = problem.pencil();
    let dense = eig::solve_smallest(&pencil, 8, &opts(Method::Dense)).unwrap();
    let iter = eig::solve_smallest(&pencil, 8, &opts(Method::Iterative)).unwrap();
    assert!(max_rel(&dense.values, &iter.values) <= 1e-8);
    let report = eig::verify_result(&pencil, &iter, 1e-7);
    assert!(report.is_clean(), "{:?}", report.violations);
    assert!(report.max_orthonormality_error < 1e-8);
}

#[test]
fn solve_up_to_covers_the_requested_range() {
    let (k, m) = random_pencil(500, 2, 11);
    let pencil = Pencil::new(&k, &m);
    let all = eig::solve_smallest(&pencil, 500, &opts(Method::Dense)).unwrap();
    let upper = all.values[30];
    let r = eig::solve_up_to(&pencil, upper, 4, &opts(Method::Iterative)).unwrap();
    assert!(*r.values.last().unwrap() > upper);
    assert!(max_rel(&all.values[..r.values.len()], &r.values) <= 1e-8);
}

#[test]
fn requests_beyond_dimension_are_rejected() {
    let (k, m) = random_pencil(20, 1, 1);
    let pencil = Pencil::new(&k, &m);
    assert!(eig::solve_smallest(&pencil, 21, &SolverOptions::default()).is_err());
}
