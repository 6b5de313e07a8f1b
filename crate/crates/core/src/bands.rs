//! Brillouin-zone sweeps of the period-cell problem, band intervals, gap
//! detection, and the Neumann limit spectrum the bands collapse onto as the
//! frame thickness goes to zero.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coeff::{ContrastField, FieldVariant, Lattice};
use crate::eig::{self, EigError, SolverOptions};
use crate::fem::{self, assemble, build_mesh, BlochProblem, BoundarySpec, FemError, Rect, StructuredMesh};

/// Relative slack on the Dirichlet upper bound for discrete band values.
pub const DIRICHLET_BOUND_SLACK: f64 = 0.02;

#[derive(Debug, Error)]
pub enum BandsError {
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("eigensolve failed at phase ({}, {}): {source}", .phase[0], .phase[1])]
    Solver {
        phase: [f64; 2],
        #[source]
        source: EigError,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("errors do not decrease with eps: {0:?}")]
    NonMonotone(Vec<(f64, f64)>),
}

/// Mesh resolution and solver settings shared by all sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Discretization {
    /// Element size away from the frames; within frames `eps/3` also applies.
    pub target_h: f64,
    pub solver: SolverOptions,
}

impl Default for Discretization {
    fn default() -> Self {
        Self { target_h: 0.05, solver: SolverOptions::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitLevel {
    pub mu: f64,
    pub j: u32,
    pub k: u32,
    /// `c_jk` with `c_jk^2 = 1 / ((1 + d_j0)(1 + d_k0) l1 l2)`, which makes
    /// the cosine modes orthonormal on the cell.
    pub norm_factor: f64,
}

/// Neumann eigenvalues of `-Laplace` on the period cell, ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitSpectrum {
    pub entries: Vec<LimitLevel>,
}

impl LimitSpectrum {
    /// `mu_n`, one-based as in the usual numbering.
    pub fn mu(&self, n: usize) -> f64 {
        self.entries[n - 1].mu
    }

    /// Level to compare the `n`-th band against. Inside a cluster of levels
    /// closer than `1e-3` relative, the member closest to `value` is used.
    pub fn reference(&self, n: usize, value: f64) -> f64 {
        let mu = self.mu(n);
        self.entries
            .iter()
            .map(|e| e.mu)
            .filter(|m| (m - mu).abs() <= 1e-3 * mu.abs())
            .min_by(|a, b| (a - value).abs().total_cmp(&(b - value).abs()))
            .unwrap_or(mu)
    }
}

fn rectangle_levels(lattice: &Lattice, count: usize, from: u32) -> Vec<(f64, u32, u32)> {
    let reach = count as u32 + from;
    let mut levels = Vec::new();
    for j in from..=reach {
        for k in from..=reach {
            let mu = PI * PI / 4.0
                * ((j * j) as f64 / (lattice.l1 * lattice.l1) + (k * k) as f64 / (lattice.l2 * lattice.l2));
            levels.push((mu, j, k));
        }
    }
    levels.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    levels.truncate(count);
    levels
}

/// The `count` smallest Neumann levels `(pi^2/4)(j^2/l1^2 + k^2/l2^2)`.
pub fn limit_spectrum(lattice: &Lattice, count: usize) -> LimitSpectrum {
    let entries = rectangle_levels(lattice, count, 0)
        .into_iter()
        .map(|(mu, j, k)| {
            let dj = if j == 0 { 2.0 } else { 1.0 };
            let dk = if k == 0 { 2.0 } else { 1.0 };
            LimitLevel { mu, j, k, norm_factor: (1.0 / (dj * dk * lattice.l1 * lattice.l2)).sqrt() }
        })
        .collect();
    LimitSpectrum { entries }
}

/// The `count` smallest Dirichlet levels of `-Laplace` on the period cell.
pub fn dirichlet_spectrum(lattice: &Lattice, count: usize) -> Vec<f64> {
    rectangle_levels(lattice, count, 1).into_iter().map(|l| l.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSample {
    pub phase: [f64; 2],
    /// Lowest eigenvalues at this phase, nondecreasing.
    pub values: Vec<f64>,
}

/// Sampled band functions `Lambda_k(phi)` over `[0, pi]^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandTable {
    pub field: ContrastField,
    pub target_h: f64,
    pub grid: usize,
    pub bands: usize,
    /// Sorted by `phi1`, then `phi2`.
    pub samples: Vec<PhaseSample>,
    /// Per band `[min, max]` over the samples.
    pub intervals: Vec<[f64; 2]>,
}

impl BandTable {
    pub fn from_samples(
        field: ContrastField,
        target_h: f64,
        grid: usize,
        bands: usize,
        mut samples: Vec<PhaseSample>,
    ) -> Self {
        samples.sort_by(|a, b| a.phase[0].total_cmp(&b.phase[0]).then(a.phase[1].total_cmp(&b.phase[1])));
        let intervals = (0..bands)
            .map(|k| {
                samples.iter().fold([f64::INFINITY, f64::NEG_INFINITY], |acc, s| {
                    [acc[0].min(s.values[k]), acc[1].max(s.values[k])]
                })
            })
            .collect();
        Self { field, target_h, grid, bands, samples, intervals }
    }

    /// Samples on the regular grid only (refinement points excluded).
    pub fn grid_samples(&self) -> impl Iterator<Item = &PhaseSample> {
        let step = PI / (self.grid - 1) as f64;
        self.samples.iter().filter(move |s| {
            s.phase.iter().all(|p| {
                let r = p / step;
                (r - r.round()).abs() < 1e-9
            })
        })
    }

    /// `max_phi |Lambda_n(phi) - mu_n|` over the regular grid.
    pub fn max_deviation(&self, n: usize, limit: &LimitSpectrum) -> f64 {
        self.grid_samples()
            .map(|s| (s.values[n - 1] - limit.reference(n, s.values[n - 1])).abs())
            .fold(0.0, f64::max)
    }
}

/// Mesh of the reference cell for `field`.
pub fn cell_mesh(field: &ContrastField, target_h: f64) -> Result<StructuredMesh, FemError> {
    build_mesh(&Rect::centered(field.lattice.l1, field.lattice.l2), field, target_h)
}

pub fn cell_problem(
    field: &ContrastField,
    mesh: &StructuredMesh,
    phase: [f64; 2],
) -> Result<BlochProblem, FemError> {
    assemble(mesh, field, &BoundarySpec::bloch(phase[0], phase[1]))
}

fn solve_phase(
    field: &ContrastField,
    mesh: &StructuredMesh,
    phase: [f64; 2],
    bands: usize,
    solver: &SolverOptions,
) -> Result<PhaseSample, BandsError> {
    let problem = cell_problem(field, mesh, phase)?;
    let result = eig::solve_smallest(&problem.pencil(), bands, solver)
        .map_err(|source| BandsError::Solver { phase, source })?;
    Ok(PhaseSample { phase, values: result.values })
}

fn same_phase(a: [f64; 2], b: [f64; 2]) -> bool {
    (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12
}

/// Solves the cell problem on a `grid x grid` lattice of phases covering
/// `[0, pi]^2`, then samples the half-step neighbourhood of every band
/// extremum until the extremal phases stop moving.
pub fn cell_bands(
    field: &ContrastField,
    disc: &Discretization,
    bands: usize,
    grid: usize,
) -> Result<BandTable, BandsError> {
    if grid < 2 {
        return Err(BandsError::InvalidRequest(format!("phase grid needs g >= 2, got {grid}")));
    }
    if bands == 0 {
        return Err(BandsError::InvalidRequest("band count must be positive".into()));
    }
    let mesh = cell_mesh(field, disc.target_h)?;
    let step = PI / (grid - 1) as f64;
    let solve_all = |phases: Vec<[f64; 2]>| -> Result<Vec<PhaseSample>, BandsError> {
        phases
            .into_par_iter()
            .map(|p| solve_phase(field, &mesh, p, bands, &disc.solver))
            .collect()
    };

    let initial: Vec<[f64; 2]> = (0..grid)
        .flat_map(|i| (0..grid).map(move |j| [i as f64 * step, j as f64 * step]))
        .collect();
    let mut samples = solve_all(initial)?;

    let extremum = |samples: &[PhaseSample], k: usize, max: bool| -> [f64; 2] {
        let pick = samples.iter().min_by(|a, b| {
            let ord = a.values[k].total_cmp(&b.values[k]);
            if max {
                ord.reverse()
            } else {
                ord
            }
        });
        pick.unwrap().phase
    };
    let mut centers: Vec<[f64; 2]> = Vec::new();
    for k in 0..bands {
        for max in [false, true] {
            centers.push(extremum(&samples, k, max));
        }
    }
    let half = 0.5 * step;
    for _ in 0..3 {
        let mut fresh: Vec<[f64; 2]> = Vec::new();
        for c in &centers {
            for dx in [-1.0, 0.0, 1.0] {
                for dy in [-1.0, 0.0, 1.0] {
                    let p = [c[0] + dx * half, c[1] + dy * half];
                    if p.iter().any(|v| *v < -1e-12 || *v > PI + 1e-12) {
                        continue;
                    }
                    let p = [p[0].clamp(0.0, PI), p[1].clamp(0.0, PI)];
                    let known = samples.iter().any(|s| same_phase(s.phase, p))
                        || fresh.iter().any(|q| same_phase(*q, p));
                    if !known {
                        fresh.push(p);
                    }
                }
            }
        }
        if fresh.is_empty() {
            break;
        }
        samples.extend(solve_all(fresh)?);
        let mut moved = Vec::new();
        for (idx, old) in centers.iter().enumerate() {
            let new = extremum(&samples, idx / 2, idx % 2 == 1);
            if !same_phase(new, *old) {
                moved.push(new);
            }
        }
        if moved.is_empty() {
            break;
        }
        centers = moved;
    }
    Ok(BandTable::from_samples(*field, disc.target_h, grid, bands, samples))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    /// Merged band union, ascending and disjoint.
    pub bands: Vec<[f64; 2]>,
    /// Open intervals between consecutive merged components.
    pub gaps: Vec<[f64; 2]>,
}

impl GapReport {
    pub fn gap_containing(&self, x: f64) -> Option<[f64; 2]> {
        self.gaps.iter().copied().find(|g| g[0] < x && x < g[1])
    }

    /// Merged components whose lower end lies below `level`.
    pub fn components_below(&self, level: f64) -> usize {
        self.bands.iter().filter(|b| b[0] < level).count()
    }

    pub fn in_bands(&self, x: f64) -> bool {
        self.bands.iter().any(|b| b[0] <= x && x <= b[1])
    }
}

/// Merges closed intervals and reports the open gaps between them.
pub fn gap_detect_intervals(intervals: &[[f64; 2]]) -> GapReport {
    let mut sorted: Vec<[f64; 2]> = intervals.to_vec();
    sorted.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let mut merged: Vec<[f64; 2]> = Vec::new();
    for iv in sorted {
        match merged.last_mut() {
            Some(last) if iv[0] <= last[1] => last[1] = last[1].max(iv[1]),
            _ => merged.push(iv),
        }
    }
    let gaps = merged.windows(2).map(|w| [w[0][1], w[1][0]]).collect();
    GapReport { bands: merged, gaps }
}

pub fn gap_detect(tables: &[&BandTable]) -> GapReport {
    let all: Vec<[f64; 2]> = tables.iter().flat_map(|t| t.intervals.iter().copied()).collect();
    gap_detect_intervals(&all)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub slope: f64,
    /// `c` in `error ~ c eps^slope`.
    pub constant: f64,
    pub required_slope: f64,
    pub pass: bool,
}

/// Least-squares fit of `log(error)` against `log(eps)`.
///
/// `errors` holds `(eps, error)` with strictly decreasing `eps`. Passes when
/// the errors shrink with `eps` and the slope is at least
/// `(gamma - 1/2) - 0.15`.
pub fn asymptotic_check(errors: &[(f64, f64)], gamma: f64) -> Result<FitReport, BandsError> {
    if errors.len() < 3 {
        return Err(BandsError::InvalidRequest(format!("need at least 3 eps values, got {}", errors.len())));
    }
    if errors.windows(2).any(|w| !(w[1].0 < w[0].0)) || errors.iter().any(|e| !(e.0 > 0.0)) {
        return Err(BandsError::InvalidRequest("eps values must be positive and strictly decreasing".into()));
    }
    if errors.iter().any(|e| !(e.1 > 0.0 && e.1.is_finite())) {
        return Err(BandsError::InvalidRequest("errors must be positive and finite".into()));
    }
    if errors.windows(2).any(|w| !(w[1].1 < w[0].1)) {
        return Err(BandsError::NonMonotone(errors.to_vec()));
    }
    let n = errors.len() as f64;
    let xs: Vec<f64> = errors.iter().map(|e| e.0.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    let constant = (my - slope * mx).exp();
    let required_slope = (gamma - 0.5) - 0.15;
    Ok(FitReport { slope, constant, required_slope, pass: slope >= required_slope })
}

/// Samples exceeding the max-min bound `Lambda_n <= mu_n^D` (with slack).
pub fn dirichlet_bound_violations(table: &BandTable) -> Vec<(usize, [f64; 2], f64)> {
    let dirichlet = dirichlet_spectrum(&table.field.lattice, table.bands);
    let mut out = Vec::new();
    for s in &table.samples {
        for (k, (&v, &d)) in s.values.iter().zip(&dirichlet).enumerate() {
            if v > d * (1.0 + DIRICHLET_BOUND_SLACK) {
                out.push((k + 1, s.phase, v));
            }
        }
    }
    out
}

/// Contrast-free copy of `field` (same lattice, `a = 1`).
pub fn uniform_field(field: &ContrastField) -> ContrastField {
    ContrastField { variant: FieldVariant::Uniform, ..*field }
}

/// Discrete eigenvalues of the constant-coefficient cell against the closed
/// form, as `(discrete, exact)` pairs.
pub fn oracle_comparison(
    lattice: &Lattice,
    mesh: &StructuredMesh,
    phase: [f64; 2],
    count: usize,
    solver: &SolverOptions,
) -> Result<Vec<(f64, f64)>, BandsError> {
    let field = ContrastField {
        lattice: *lattice,
        profile: crate::coeff::ContrastProfile { eps: lattice.l2 / 4.0, gamma: 0.75 },
        variant: FieldVariant::Uniform,
    };
    let problem = cell_problem(&field, mesh, phase)?;
    let result = eig::solve_smallest(&problem.pencil(), count, solver)
        .map_err(|source| BandsError::Solver { phase, source })?;
    let exact = fem::constant_coefficient_oracle(lattice, phase, count);
    Ok(result.values.into_iter().zip(exact).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lattice() -> Lattice {
        Lattice::new(0.7, 0.5).unwrap()
    }

    #[test]
    fn limit_levels_match_closed_form() {
        let s = limit_spectrum(&lattice(), 8);
        assert_eq!(s.mu(1), 0.0);
        assert_eq!((s.entries[0].j, s.entries[0].k), (0, 0));
        assert!((s.mu(2) - PI * PI / (4.0 * 0.49)).abs() < 1e-12);
        assert!((s.mu(2) - 5.0355).abs() < 1e-4);
        assert_eq!((s.entries[1].j, s.entries[1].k), (1, 0));
        assert!((s.mu(3) - PI * PI / (4.0 * 0.25)).abs() < 1e-12);
        assert!((s.mu(3) - 9.8696).abs() < 1e-4);
        assert_eq!((s.entries[2].j, s.entries[2].k), (0, 1));
        assert!((s.mu(4) - (s.mu(2) + s.mu(3))).abs() < 1e-12);
        assert!(s.entries.windows(2).all(|w| w[0].mu <= w[1].mu));
    }

    #[test]
    fn normalization_factors() {
        let s = limit_spectrum(&lattice(), 4);
        let area = 0.7 * 0.5;
        assert!((s.entries[0].norm_factor.powi(2) - 0.25 / area).abs() < 1e-12);
        assert!((s.entries[1].norm_factor.powi(2) - 0.5 / area).abs() < 1e-12);
        assert!((s.entries[3].norm_factor.powi(2) - 1.0 / area).abs() < 1e-12);
    }

    #[test]
    fn neumann_functions_are_orthonormal_by_quadrature() {
        // midpoint rule on a fine grid for the cosine products
        let l = lattice();
        let s = limit_spectrum(&l, 4);
        let n = 400;
        let w = |e: &LimitLevel, x: f64, y: f64| {
            e.norm_factor
                * (PI * e.j as f64 * (x + l.l1) / (2.0 * l.l1)).cos()
                * (PI * e.k as f64 * (y + l.l2) / (2.0 * l.l2)).cos()
        };
        for a in &s.entries {
            for b in &s.entries {
                let mut acc = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        let x = -l.l1 + (i as f64 + 0.5) * 2.0 * l.l1 / n as f64;
                        let y = -l.l2 + (j as f64 + 0.5) * 2.0 * l.l2 / n as f64;
                        acc += w(a, x, y) * w(b, x, y);
                    }
                }
                acc *= 4.0 * l.l1 * l.l2 / (n * n) as f64;
                let expected = if a == b { 1.0 } else { 0.0 };
                assert!((acc - expected).abs() < 1e-4, "{a:?} {b:?} {acc}");
            }
        }
    }

    #[test]
    fn dirichlet_levels_start_at_one_one() {
        let d = dirichlet_spectrum(&lattice(), 3);
        assert!((d[0] - PI * PI / 4.0 * (1.0 / 0.49 + 1.0 / 0.25)).abs() < 1e-12);
        assert!(d.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn gap_detection_examples() {
        let r = gap_detect_intervals(&[[0.0, 1.0], [2.0, 3.0]]);
        assert_eq!(r.gaps, vec![[1.0, 2.0]]);
        let r = gap_detect_intervals(&[[0.0, 1.0], [0.5, 3.0]]);
        assert!(r.gaps.is_empty());
        assert_eq!(r.bands, vec![[0.0, 3.0]]);
        let r = gap_detect_intervals(&[[4.0, 5.0], [0.0, 1.0], [0.9, 2.0]]);
        assert_eq!(r.bands, vec![[0.0, 2.0], [4.0, 5.0]]);
        assert_eq!(r.gap_containing(3.0), Some([2.0, 4.0]));
        assert_eq!(r.components_below(4.5), 2);
    }

    #[test]
    fn exact_power_law_slope() {
        let errs: Vec<(f64, f64)> = [0.08, 0.04, 0.02].iter().map(|&e: &f64| (e, e.powf(0.25))).collect();
        let fit = asymptotic_check(&errs, 0.75).unwrap();
        assert!((fit.slope - 0.25).abs() < 1e-12);
        assert!((fit.constant - 1.0).abs() < 1e-12);
        assert!(fit.pass);
    }

    #[test]
    fn linear_decay_passes() {
        let errs: Vec<(f64, f64)> = [0.08, 0.04, 0.02].iter().map(|&e| (e, 3.0 * e)).collect();
        let fit = asymptotic_check(&errs, 0.75).unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-12);
        assert!(fit.pass);
    }

    #[test]
    fn slow_decay_fails() {
        let errs: Vec<(f64, f64)> = [0.08, 0.04, 0.02].iter().map(|&e: &f64| (e, e.powf(0.05))).collect();
        assert!(!asymptotic_check(&errs, 0.75).unwrap().pass);
    }

    #[test]
    fn growing_errors_are_signalled() {
        let errs: Vec<(f64, f64)> = [0.08, 0.04, 0.02].iter().map(|&e| (e, 1.0 / e)).collect();
        assert!(matches!(asymptotic_check(&errs, 0.75), Err(BandsError::NonMonotone(_))));
        assert!(matches!(
            asymptotic_check(&[(0.02, 1.0), (0.04, 2.0), (0.08, 3.0)], 0.75),
            Err(BandsError::InvalidRequest(_))
        ));
        assert!(asymptotic_check(&[(0.08, 1.0), (0.04, 0.5)], 0.75).is_err());
    }

    #[test]
    fn reference_level_inside_clusters() {
        let s = LimitSpectrum {
            entries: vec![
                LimitLevel { mu: 0.0, j: 0, k: 0, norm_factor: 1.0 },
                LimitLevel { mu: 10.0, j: 1, k: 0, norm_factor: 1.0 },
                LimitLevel { mu: 10.005, j: 0, k: 1, norm_factor: 1.0 },
            ],
        };
        assert_eq!(s.reference(2, 10.004), 10.005);
        assert_eq!(s.reference(3, 9.0), 10.0);
        assert_eq!(s.reference(1, 0.3), 0.0);
    }
}
