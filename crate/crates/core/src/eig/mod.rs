//! Generalized Hermitian eigenproblems `K u = lambda M u`.
//!
//! Small pencils go through a dense solve. Larger ones are factorized once at
//! a shift and handed to a block Krylov iteration on the shift-inverted
//! operator; see [`krylov`].

mod dense;
mod krylov;

use std::sync::Once;
use std::time::{Duration, Instant};

use num_complex::Complex64 as c64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fem::{BlochProblem, CsrMatrix};
use krylov::{block_krylov, KrylovParams, ShiftInvert};

/// Orthonormality tolerance for returned eigenvectors.
pub const ORTHONORMALITY_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum EigError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("mass matrix is not positive definite")]
    MassNotDefinite,
    #[error("dense eigensolver failed")]
    DenseFailure,
    #[error("factorization of K - sigma M failed at sigma = {shift}: {reason}")]
    Factorization { shift: f64, reason: String },
    #[error("no convergence after {} restarts; max residual {:.3e}", .partial.iterations, .partial.max_residual())]
    NotConverged { partial: Box<EigenResult> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Dense below [`SolverOptions::dense_threshold`], iterative above.
    Auto,
    Dense,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Relative residual tolerance, `||K u - l M u|| / ||M u|| <= tol max(1, |l|)`.
    pub tol: f64,
    pub method: Method,
    pub dense_threshold: usize,
    pub max_restarts: usize,
    /// Krylov blocks generated per restart.
    pub steps: usize,
    pub seed: u64,
    /// Shift used by [`solve_smallest`]; must lie below the spectrum.
    pub shift: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            method: Method::Auto,
            dense_threshold: 400,
            max_restarts: 300,
            steps: 3,
            seed: 0x5eed,
            shift: -1e-3,
        }
    }
}

/// Borrowed stiffness/mass pair.
#[derive(Debug, Clone, Copy)]
pub struct Pencil<'a> {
    pub stiffness: &'a CsrMatrix,
    pub mass: &'a CsrMatrix,
}

impl<'a> Pencil<'a> {
    pub fn new(stiffness: &'a CsrMatrix, mass: &'a CsrMatrix) -> Self {
        assert_eq!(stiffness.dim(), mass.dim(), "pencil dimensions differ");
        Self { stiffness, mass }
    }

    pub fn dim(&self) -> usize {
        self.stiffness.dim()
    }
}

impl BlochProblem {
    pub fn pencil(&self) -> Pencil<'_> {
        Pencil::new(&self.stiffness, &self.mass)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenResult {
    /// Nondecreasing.
    pub values: Vec<f64>,
    /// M-orthonormal eigenvectors, one per value.
    #[serde(skip)]
    pub vectors: Option<Vec<Vec<c64>>>,
    pub residuals: Vec<f64>,
    /// Set where a value is within `1e-9 * scale` of a neighbour.
    pub degenerate: Vec<bool>,
    pub iterations: usize,
    pub wall_time: Duration,
    pub converged: bool,
}

impl EigenResult {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }

    pub fn vector(&self, k: usize) -> Option<&[c64]> {
        self.vectors.as_ref().map(|v| v[k].as_slice())
    }
}

fn init_parallelism() {
    static ONCE: Once = Once::new();
    // Sparse factorizations and small dense products run sequentially inside
    // a solve; independent solves are spread across the rayon pool instead.
    ONCE.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
}

fn residual(pencil: &Pencil<'_>, lambda: f64, x: &[c64]) -> f64 {
    let kx = pencil.stiffness.mul_vec(x);
    let mx = pencil.mass.mul_vec(x);
    let r: f64 = kx.iter().zip(&mx).map(|(a, b)| (a - lambda * b).norm_sqr()).sum::<f64>().sqrt();
    let m: f64 = mx.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    if m > 0.0 {
        r / m
    } else {
        f64::INFINITY
    }
}

/// Sorts pairs by value (ties by residual) and flags near-degenerate values.
fn finalize(
    mut pairs: Vec<(f64, f64, Vec<c64>)>,
    iterations: usize,
    started: Instant,
    converged: bool,
) -> EigenResult {
    let scale = pairs.iter().map(|p| p.0.abs()).fold(1.0, f64::max);
    pairs.sort_by(|a, b| {
        if (a.0 - b.0).abs() <= 1e-9 * scale {
            a.1.total_cmp(&b.1)
        } else {
            a.0.total_cmp(&b.0)
        }
    });
    let values: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let degenerate = (0..values.len())
        .map(|i| {
            let close = |j: usize| (values[i] - values[j]).abs() < 1e-9 * scale;
            (i > 0 && close(i - 1)) || (i + 1 < values.len() && close(i + 1))
        })
        .collect();
    EigenResult {
        values,
        residuals: pairs.iter().map(|p| p.1).collect(),
        vectors: Some(pairs.into_iter().map(|p| p.2).collect()),
        degenerate,
        iterations,
        wall_time: started.elapsed(),
        converged,
    }
}

fn use_dense(pencil: &Pencil<'_>, count: usize, opts: &SolverOptions) -> bool {
    match opts.method {
        Method::Dense => true,
        Method::Iterative => false,
        Method::Auto => pencil.dim() <= opts.dense_threshold || 4 * count >= pencil.dim(),
    }
}

fn check_request(pencil: &Pencil<'_>, count: usize, opts: &SolverOptions) -> Result<(), EigError> {
    if count == 0 || count > pencil.dim() {
        return Err(EigError::InvalidRequest(format!(
            "asked for {count} eigenpairs of a {}-dimensional pencil",
            pencil.dim()
        )));
    }
    if !(opts.tol > 0.0) {
        return Err(EigError::InvalidRequest(format!("tolerance must be positive, got {}", opts.tol)));
    }
    Ok(())
}

/// Dense solve; keeps the `count` eigenpairs selected by `pick` (indices into
/// the ascending full spectrum).
fn dense_select(
    pencil: &Pencil<'_>,
    started: Instant,
    pick: impl Fn(&[f64]) -> Vec<usize>,
) -> Result<EigenResult, EigError> {
    let (values, vectors) = dense::full_spectrum(pencil)?;
    let chosen = pick(&values);
    let pairs = chosen
        .into_iter()
        .map(|k| {
            let x: Vec<c64> = (0..pencil.dim()).map(|i| vectors[(i, k)]).collect();
            (values[k], residual(pencil, values[k], &x), x)
        })
        .collect();
    Ok(finalize(pairs, 1, started, true))
}

fn iterative(
    pencil: &Pencil<'_>,
    shift: f64,
    definite: bool,
    count: usize,
    opts: &SolverOptions,
    started: Instant,
) -> Result<EigenResult, EigError> {
    let op = match ShiftInvert::new(*pencil, shift, definite) {
        Ok(op) => op,
        Err(first) if definite => {
            log::warn!("{first}; retrying at twice the shift");
            ShiftInvert::new(*pencil, 2.0 * shift, definite)?
        }
        Err(e) => return Err(e),
    };
    let params = KrylovParams {
        wanted: count,
        block: (count + (count / 2).max(8)).min(pencil.dim()),
        steps: opts.steps.max(1),
        tol: opts.tol,
        max_restarts: opts.max_restarts,
        seed: opts.seed,
    };
    let out = block_krylov(pencil, &op, &params);
    let pairs = (0..out.values.len())
        .map(|j| {
            let x: Vec<c64> = (0..pencil.dim()).map(|i| out.vectors[(i, j)]).collect();
            (out.values[j], out.residuals[j], x)
        })
        .collect();
    let result = finalize(pairs, out.restarts, started, out.converged);
    if result.converged {
        Ok(result)
    } else {
        Err(EigError::NotConverged { partial: Box::new(result) })
    }
}

/// The `count` smallest eigenpairs.
pub fn solve_smallest(
    pencil: &Pencil<'_>,
    count: usize,
    opts: &SolverOptions,
) -> Result<EigenResult, EigError> {
    init_parallelism();
    check_request(pencil, count, opts)?;
    let started = Instant::now();
    if use_dense(pencil, count, opts) {
        return dense_select(pencil, started, |_| (0..count).collect());
    }
    if !(opts.shift < 0.0) {
        return Err(EigError::InvalidRequest(format!("shift {} must be negative", opts.shift)));
    }
    match iterative(pencil, opts.shift, true, count, opts, started) {
        Err(EigError::NotConverged { partial }) if pencil.dim() <= 2000 => {
            log::warn!(
                "iterative solve stalled at residual {:.2e}; falling back to dense",
                partial.max_residual()
            );
            dense_select(pencil, started, |_| (0..count).collect())
        }
        other => other,
    }
}

/// The `count` eigenpairs closest to `target`, returned in ascending order.
pub fn solve_near(
    pencil: &Pencil<'_>,
    target: f64,
    count: usize,
    opts: &SolverOptions,
) -> Result<EigenResult, EigError> {
    init_parallelism();
    check_request(pencil, count, opts)?;
    let started = Instant::now();
    let pick = |values: &[f64]| {
        let mut idx: Vec<usize> = (0..values.len()).collect();
        idx.sort_by(|&a, &b| (values[a] - target).abs().total_cmp(&(values[b] - target).abs()));
        idx.truncate(count);
        idx
    };
    if use_dense(pencil, count, opts) {
        return dense_select(pencil, started, pick);
    }
    match iterative(pencil, target, false, count, opts, started) {
        Err(EigError::NotConverged { .. }) if pencil.dim() <= 2000 => dense_select(pencil, started, pick),
        other => other,
    }
}

/// Eigenpairs at least up to `upper` (every eigenvalue `<= upper` plus at
/// least one above it), growing the request geometrically.
pub fn solve_up_to(
    pencil: &Pencil<'_>,
    upper: f64,
    initial: usize,
    opts: &SolverOptions,
) -> Result<EigenResult, EigError> {
    let mut count = initial.max(1).min(pencil.dim());
    loop {
        let result = solve_smallest(pencil, count, opts)?;
        let top = *result.values.last().unwrap();
        if top > upper || count == pencil.dim() {
            return Ok(result);
        }
        count = (2 * count).min(pencil.dim());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub max_residual: f64,
    pub max_orthonormality_error: f64,
    pub violations: Vec<String>,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Recomputes residuals and M-orthonormality of `result` from scratch.
pub fn verify_result(pencil: &Pencil<'_>, result: &EigenResult, tol: f64) -> VerifyReport {
    let mut violations = Vec::new();
    let Some(vectors) = &result.vectors else {
        return VerifyReport {
            max_residual: f64::NAN,
            max_orthonormality_error: f64::NAN,
            violations: vec!["result carries no eigenvectors".into()],
        };
    };
    if result.values.windows(2).any(|w| w[0] > w[1]) {
        violations.push("eigenvalues are not sorted".into());
    }
    let mut max_residual: f64 = 0.0;
    for (k, (&lambda, x)) in result.values.iter().zip(vectors).enumerate() {
        let r = residual(pencil, lambda, x);
        max_residual = max_residual.max(r);
        if !(r <= tol * lambda.abs().max(1.0)) {
            violations.push(format!("pair {k}: residual {r:.3e} exceeds {tol:.1e}"));
        }
    }
    let images: Vec<Vec<c64>> = vectors.iter().map(|x| pencil.mass.mul_vec(x)).collect();
    let mut max_orth: f64 = 0.0;
    for i in 0..vectors.len() {
        for j in i..vectors.len() {
            let g: c64 = vectors[i].iter().zip(&images[j]).map(|(a, b)| a.conj() * b).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            let err = (g - target).norm();
            max_orth = max_orth.max(err);
            if err > ORTHONORMALITY_TOL {
                violations.push(format!("pairs ({i}, {j}): |u_i^H M u_j - delta| = {err:.3e}"));
            }
        }
    }
    VerifyReport { max_residual, max_orthonormality_error: max_orth, violations }
}
