//! Supercell problems for defect lines and crossings: the interface band of a
//! mirrored strip, its placement in a spectral gap, mode localization, and the
//! trapped eigenvalue at a crossing of two defect lines.

use std::f64::consts::PI;
use std::io::{self, Write};

use num_complex::Complex64 as c64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bands::{BandTable, Discretization};
use crate::coeff::{ContrastField, FieldVariant, Lattice};
use crate::eig::{self, EigError};
use crate::fem::{assemble, build_mesh, BlochProblem, BoundarySpec, FemError, Rect, SideCondition, StructuredMesh};

/// Upper bound on eigenpairs requested from one crossing patch.
pub const MAX_PATCH_EIGENVALUES: usize = 40;

/// Energy fractions below this are treated as round-off in decay fits.
pub const FRACTION_FLOOR: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum WaveguideError {
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("eigensolve failed ({context}): {source}")]
    Solver {
        context: String,
        #[source]
        source: EigError,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("defect level ordering fails: {0}")]
    Ordering(String),
    #[error("no localized eigenvalue in ({}, {}) at {context}", .window[0], .window[1])]
    NoLocalizedMode { context: String, window: [f64; 2] },
    #[error("truncation sensitivity {change:.3e} exceeds {limit:.3e}")]
    TruncationSensitive { change: f64, limit: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectLevel {
    pub level: f64,
    pub label: String,
}

/// Closed-form Neumann levels of the enlarged defect cells, half-length
/// convention throughout.
///
/// For the mirrored strip this is `pi^2 / (4 (l1 + h)^2)`, which has to sit
/// strictly between `0` and `mu_2`. For the crossing it is the `(1, 1)` level
/// of the enlarged cell, which has to lie above both single-direction levels
/// of that cell and below `mu_2` of the unperturbed cell.
pub fn analytic_defect_levels(lattice: &Lattice, variant: &FieldVariant) -> Result<Vec<DefectLevel>, WaveguideError> {
    let q = PI * PI / 4.0;
    let mu2 = q / (lattice.l1 * lattice.l1);
    let level = |label: &str, level: f64| DefectLevel { level, label: label.to_string() };
    match *variant {
        FieldVariant::Mirrored { h } => {
            let strip = q / (lattice.l1 + h).powi(2);
            if !(strip > 0.0 && strip < mu2) {
                return Err(WaveguideError::Ordering(format!("strip level {strip} not inside (0, {mu2})")));
            }
            Ok(vec![level("window_lo", 0.0), level("strip", strip), level("window_hi", mu2)])
        }
        FieldVariant::XDefect { h1, h2 } => {
            let a1 = q / (lattice.l1 + h1).powi(2);
            let a2 = q / (lattice.l2 + h2).powi(2);
            let cross = a1 + a2;
            let lo = a1.max(a2);
            if !(lo < cross && cross < mu2) {
                return Err(WaveguideError::Ordering(format!(
                    "crossing level {cross} not inside ({lo}, {mu2})"
                )));
            }
            Ok(vec![
                level("enlarged_10", a1),
                level("enlarged_01", a2),
                level("window_lo", lo),
                level("crossing", cross),
                level("window_hi", mu2),
            ])
        }
        _ => Err(WaveguideError::InvalidConfig("defect levels need a mirrored or crossing field".into())),
    }
}

fn find_level(levels: &[DefectLevel], label: &str) -> f64 {
    levels.iter().find(|l| l.label == label).map(|l| l.level).unwrap_or(f64::NAN)
}

/// Edges of `1 + 2n` columns: a central one of half-width `center_half`
/// flanked by `n` cells of width `cell` on each side.
pub fn column_edges(center_half: f64, cell: f64, n: usize) -> Vec<f64> {
    let mut edges: Vec<f64> = (0..=n).rev().map(|k| -(center_half + k as f64 * cell)).collect();
    edges.extend((0..=n).map(|k| center_half + k as f64 * cell));
    edges
}

/// Thresholds deciding whether a mode counts as localized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationThresholds {
    pub max_far_fraction: f64,
    pub min_rate: f64,
}

impl Default for LocalizationThresholds {
    fn default() -> Self {
        Self { max_far_fraction: 0.05, min_rate: 0.2 }
    }
}

impl LocalizationThresholds {
    pub fn accepts(&self, report: &LocalizationReport) -> bool {
        report.far_fraction < self.max_far_fraction && report.rate.is_none_or(|r| r > self.min_rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    /// `fractions[i]` belongs to column `i - center`.
    pub fractions: Vec<f64>,
    pub center: usize,
    /// Fitted decay of `ln e_c` per column; `None` when fewer than two
    /// distances carry energy above [`FRACTION_FLOOR`].
    pub rate: Option<f64>,
    /// Energy in columns at distance 3 or more.
    pub far_fraction: f64,
}

impl LocalizationReport {
    /// Builds the report from per-column energy fractions.
    pub fn from_fractions(fractions: Vec<f64>, center: usize) -> Self {
        let far_fraction = fractions
            .iter()
            .enumerate()
            .filter(|(i, _)| i.abs_diff(center) >= 3)
            .map(|(_, e)| e)
            .sum();
        // Walk outward on each side until the energy reaches round-off.
        let mut points = Vec::new();
        for side in [-1i64, 1] {
            let mut d = 1i64;
            loop {
                let idx = center as i64 + side * d;
                if idx < 0 || idx as usize >= fractions.len() {
                    break;
                }
                let e = fractions[idx as usize];
                if !(e > FRACTION_FLOOR) {
                    break;
                }
                points.push((d as f64, e.ln()));
                d += 1;
            }
        }
        let distinct = {
            let mut ds: Vec<f64> = points.iter().map(|p| p.0).collect();
            ds.dedup();
            ds.sort_by(f64::total_cmp);
            ds.dedup();
            ds.len()
        };
        let rate = (distinct >= 2).then(|| {
            let n = points.len() as f64;
            let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
            let my = points.iter().map(|p| p.1).sum::<f64>() / n;
            let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
            -sxy / sxx
        });
        Self { fractions, center, rate, far_fraction }
    }

    pub fn total(&self) -> f64 {
        self.fractions.iter().sum()
    }
}

/// Nodal values of `u` on the mesh of `problem`.
pub fn nodal_values(problem: &BlochProblem, u: &[c64]) -> Vec<c64> {
    problem.expand(u)
}

/// Per-column energy `int_column |u|^2 / int |u|^2` along `axis`, using the
/// consistent bilinear mass on each element.
pub fn localization_measure(
    mesh: &StructuredMesh,
    nodal: &[c64],
    axis: usize,
    edges: &[f64],
    center: usize,
) -> LocalizationReport {
    let columns = edges.len() - 1;
    let mut energy = vec![0.0; columns];
    for j in 0..mesh.n2() {
        for i in 0..mesh.n1() {
            let (dx, dy) = (mesh.xs[i + 1] - mesh.xs[i], mesh.ys[j + 1] - mesh.ys[j]);
            let corners = [
                (nodal[mesh.node_index(i, j)], 0, 0),
                (nodal[mesh.node_index(i + 1, j)], 1, 0),
                (nodal[mesh.node_index(i + 1, j + 1)], 1, 1),
                (nodal[mesh.node_index(i, j + 1)], 0, 1),
            ];
            let weight = |a: usize, b: usize| if a == b { 2.0 } else { 1.0 };
            let mut e = 0.0;
            for (ua, ia, ja) in corners {
                for (ub, ib, jb) in corners {
                    let m = dx * dy / 36.0 * weight(ia, ib) * weight(ja, jb);
                    e += m * (ua.conj() * ub).re;
                }
            }
            let mid = if axis == 0 { 0.5 * (mesh.xs[i] + mesh.xs[i + 1]) } else { 0.5 * (mesh.ys[j] + mesh.ys[j + 1]) };
            let c = edges.partition_point(|&x| x <= mid).clamp(1, columns) - 1;
            energy[c] += e;
        }
    }
    let total: f64 = energy.iter().sum();
    let fractions = energy.into_iter().map(|e| e / total).collect();
    LocalizationReport::from_fractions(fractions, center)
}

/// Relative M-norm distance between `u` and its mirror image in `x1`,
/// after aligning the phase: `0` for symmetric or antisymmetric modes.
pub fn mirror_defect(problem: &BlochProblem, u: &[c64]) -> Result<f64, WaveguideError> {
    let mesh = &problem.mesh;
    let n1 = mesh.n1();
    if (0..=n1).any(|i| (mesh.xs[i] + mesh.xs[n1 - i]).abs() > 1e-9) {
        return Err(WaveguideError::InvalidConfig("mesh is not symmetric in x1".into()));
    }
    let nodal = problem.expand(u);
    let mut reflected = vec![c64::new(0.0, 0.0); problem.dim()];
    for j in 0..=mesh.n2() {
        for i in 0..=n1 {
            if let Some((dof, factor)) = problem.dofs.node(mesh.node_index(i, j)) {
                reflected[dof] = nodal[mesh.node_index(n1 - i, j)] / factor;
            }
        }
    }
    let mu = problem.mass.mul_vec(u);
    let norm2: f64 = u.iter().zip(&mu).map(|(a, b)| (a.conj() * b).re).sum();
    let overlap: c64 = mu.iter().zip(&reflected).map(|(m, r)| m.conj() * r).sum();
    let align = if overlap.norm() > 0.0 { overlap / overlap.norm() } else { c64::new(1.0, 0.0) };
    let diff: Vec<c64> = reflected.iter().zip(u).map(|(r, x)| r - align * x).collect();
    Ok((problem.mass.quadratic_form(&diff).re.max(0.0) / norm2).sqrt())
}

/// One Bloch-periodic strip along `x2` with Dirichlet ends in `x1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StripConfig {
    pub field: ContrastField,
    pub columns_per_side: usize,
    pub zeta: f64,
}

impl StripConfig {
    pub fn new(field: ContrastField, columns_per_side: usize, zeta: f64) -> Result<Self, WaveguideError> {
        let FieldVariant::Mirrored { .. } = field.variant else {
            return Err(WaveguideError::InvalidConfig("strip needs a mirrored field".into()));
        };
        if (field.lattice.l2 - 0.5).abs() > 1e-12 {
            return Err(WaveguideError::InvalidConfig(format!(
                "strip cross-section needs l2 = 1/2, got {}",
                field.lattice.l2
            )));
        }
        if columns_per_side == 0 {
            return Err(WaveguideError::InvalidConfig("need at least one column per side".into()));
        }
        Ok(Self { field, columns_per_side, zeta })
    }

    fn h(&self) -> f64 {
        match self.field.variant {
            FieldVariant::Mirrored { h } => h,
            _ => 0.0,
        }
    }

    pub fn column_edges(&self) -> Vec<f64> {
        let l1 = self.field.lattice.l1;
        column_edges(l1 + self.h(), 2.0 * l1, self.columns_per_side)
    }

    pub fn domain(&self) -> Rect {
        let edges = self.column_edges();
        Rect::new([edges[0], *edges.last().unwrap()], [-0.5, 0.5])
    }

    pub fn boundary(&self) -> BoundarySpec {
        BoundarySpec { x1: SideCondition::Dirichlet, x2: SideCondition::Bloch(self.zeta) }
    }

    pub fn assemble(&self, disc: &Discretization) -> Result<BlochProblem, WaveguideError> {
        let mesh = build_mesh(&self.domain(), &self.field, disc.target_h)?;
        Ok(assemble(&mesh, &self.field, &self.boundary())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StripMode {
    pub lambda: f64,
    pub far_fraction: f64,
    pub rate: Option<f64>,
    pub localized: bool,
}

/// Strip eigenvalues up to a cutoff with their localization data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StripSpectrum {
    pub zeta: f64,
    pub columns_per_side: usize,
    pub modes: Vec<StripMode>,
    #[serde(skip)]
    pub vectors: Vec<Vec<c64>>,
    /// Mirror defect of each mode (see [`mirror_defect`]).
    pub mirror: Vec<f64>,
}

/// All strip eigenpairs with value `<= upper`.
pub fn strip_spectrum(
    config: &StripConfig,
    disc: &Discretization,
    upper: f64,
    thresholds: &LocalizationThresholds,
) -> Result<StripSpectrum, WaveguideError> {
    let problem = config.assemble(disc)?;
    let initial = 2 * config.columns_per_side + 6;
    let result = eig::solve_up_to(&problem.pencil(), upper, initial, &disc.solver).map_err(|source| {
        WaveguideError::Solver { context: format!("strip zeta = {}", config.zeta), source }
    })?;
    let edges = config.column_edges();
    let vectors = result.vectors.clone().unwrap_or_default();
    let mut modes = Vec::new();
    let mut kept = Vec::new();
    let mut mirror = Vec::new();
    for (k, &lambda) in result.values.iter().enumerate() {
        if lambda > upper {
            break;
        }
        let nodal = problem.expand(&vectors[k]);
        let report = localization_measure(&problem.mesh, &nodal, 0, &edges, config.columns_per_side);
        modes.push(StripMode {
            lambda,
            far_fraction: report.far_fraction,
            rate: report.rate,
            localized: thresholds.accepts(&report),
        });
        mirror.push(mirror_defect(&problem, &vectors[k])?);
        kept.push(vectors[k].clone());
    }
    Ok(StripSpectrum { zeta: config.zeta, columns_per_side: config.columns_per_side, modes, vectors: kept, mirror })
}

/// `count` equispaced points on `[0, pi]`.
pub fn zeta_grid(count: usize) -> Vec<f64> {
    if count < 2 {
        return vec![0.0; count];
    }
    (0..count).map(|i| PI * i as f64 / (count - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterfaceSample {
    pub zeta: f64,
    pub lambda: f64,
    pub loc_rate: Option<f64>,
    pub far_fraction: f64,
    /// Localized eigenvalues in the gap at this `zeta`, the tracked one included.
    pub localized: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterfaceBand {
    pub field: ContrastField,
    pub columns_per_side: usize,
    pub gap: [f64; 2],
    pub target: f64,
    pub thresholds: LocalizationThresholds,
    pub samples: Vec<InterfaceSample>,
    pub interval: [f64; 2],
    /// `max_zeta |Lambda(N) - Lambda(N + 2)|` when the rerun was requested.
    pub truncation_error: Option<f64>,
    /// Localized mode of the `N + 2` rerun nearest to each tracked value.
    pub recheck: Vec<InterfaceSample>,
    pub spectra: Vec<StripSpectrum>,
    /// Index of the tracked mode within each entry of `spectra`.
    pub tracked: Vec<usize>,
}

impl InterfaceBand {
    /// Distance from the band interval to the nearer gap edge.
    pub fn gap_margin(&self) -> f64 {
        (self.interval[0] - self.gap[0]).min(self.gap[1] - self.interval[1])
    }

    pub fn truncation_limit(&self) -> f64 {
        1e-6 * (self.gap[1] - self.gap[0])
    }

    pub fn check_truncation(&self) -> Result<(), WaveguideError> {
        match self.truncation_error {
            Some(change) if change > self.truncation_limit() => {
                Err(WaveguideError::TruncationSensitive { change, limit: self.truncation_limit() })
            }
            _ => Ok(()),
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W, echo: &str) -> io::Result<()> {
        for line in echo.lines() {
            writeln!(w, "# {line}")?;
        }
        writeln!(w, "zeta,lambda,loc_rate,far_fraction")?;
        for s in &self.samples {
            let rate = s.loc_rate.map_or_else(|| "inf".to_string(), |r| format!("{r:.10e}"));
            writeln!(w, "{:.10e},{:.12e},{},{:.6e}", s.zeta, s.lambda, rate, s.far_fraction)?;
        }
        Ok(())
    }
}

fn m_overlap(problem_mass: &crate::fem::CsrMatrix, a: &[c64], b: &[c64]) -> f64 {
    let mb = problem_mass.mul_vec(b);
    a.iter().zip(&mb).map(|(x, y)| x.conj() * y).sum::<c64>().norm()
}

/// Sweeps `zetas`, keeps the localized eigenvalues inside `gap`, and tracks
/// the branch that starts closest to `target` by eigenvector overlap.
/// With `recheck` the sweep is repeated with two more columns per side to
/// estimate the truncation error.
#[allow(clippy::too_many_arguments)]
pub fn interface_band(
    field: &ContrastField,
    columns_per_side: usize,
    zetas: &[f64],
    disc: &Discretization,
    gap: [f64; 2],
    target: f64,
    thresholds: &LocalizationThresholds,
    recheck: bool,
) -> Result<InterfaceBand, WaveguideError> {
    if zetas.is_empty() {
        return Err(WaveguideError::InvalidConfig("empty zeta grid".into()));
    }
    if !(gap[0] < gap[1]) {
        return Err(WaveguideError::InvalidConfig(format!("empty gap ({}, {})", gap[0], gap[1])));
    }
    let sweep = |n: usize| -> Result<Vec<(StripSpectrum, BlochProblem)>, WaveguideError> {
        zetas
            .par_iter()
            .map(|&zeta| {
                let config = StripConfig::new(*field, n, zeta)?;
                let problem = config.assemble(disc)?;
                Ok((strip_spectrum(&config, disc, gap[1], thresholds)?, problem))
            })
            .collect()
    };
    let solved = sweep(columns_per_side)?;
    let in_gap = |m: &StripMode| m.localized && m.lambda > gap[0] && m.lambda < gap[1];

    for (spec, _) in &solved {
        if !spec.modes.iter().any(in_gap) {
            return Err(WaveguideError::NoLocalizedMode { context: format!("zeta = {}", spec.zeta), window: gap });
        }
    }

    let mut tracked = Vec::with_capacity(solved.len());
    for (idx, (spec, problem)) in solved.iter().enumerate() {
        let candidates: Vec<usize> = (0..spec.modes.len()).filter(|&k| in_gap(&spec.modes[k])).collect();
        let pick = if idx == 0 {
            *candidates
                .iter()
                .min_by(|&&a, &&b| {
                    (spec.modes[a].lambda - target).abs().total_cmp(&(spec.modes[b].lambda - target).abs())
                })
                .unwrap()
        } else {
            let (prev_spec, _) = &solved[idx - 1];
            let prev_k: usize = tracked[idx - 1];
            let prev_vec = &prev_spec.vectors[prev_k];
            let prev_val = prev_spec.modes[prev_k].lambda;
            let scored: Vec<(usize, f64, f64)> = candidates
                .iter()
                .map(|&k| {
                    (k, m_overlap(&problem.mass, &spec.vectors[k], prev_vec), (spec.modes[k].lambda - prev_val).abs())
                })
                .collect();
            let best = scored.iter().map(|s| s.1).fold(0.0, f64::max);
            scored
                .iter()
                .filter(|s| s.1 >= best - 1e-3)
                .min_by(|a, b| a.2.total_cmp(&b.2))
                .unwrap()
                .0
        };
        tracked.push(pick);
    }

    let samples: Vec<InterfaceSample> = solved
        .iter()
        .zip(&tracked)
        .map(|((spec, _), &k)| InterfaceSample {
            zeta: spec.zeta,
            lambda: spec.modes[k].lambda,
            loc_rate: spec.modes[k].rate,
            far_fraction: spec.modes[k].far_fraction,
            localized: spec.modes.iter().filter(|m| in_gap(m)).map(|m| m.lambda).collect(),
        })
        .collect();
    let interval = samples
        .iter()
        .fold([f64::INFINITY, f64::NEG_INFINITY], |acc, s| [acc[0].min(s.lambda), acc[1].max(s.lambda)]);

    let mut rechecked = Vec::new();
    let truncation_error = if recheck {
        let refined = sweep(columns_per_side + 2)?;
        let mut worst: f64 = 0.0;
        for ((spec, _), sample) in refined.iter().zip(&samples) {
            let nearest = spec
                .modes
                .iter()
                .filter(|m| in_gap(m))
                .min_by(|a, b| (a.lambda - sample.lambda).abs().total_cmp(&(b.lambda - sample.lambda).abs()));
            match nearest {
                Some(m) => {
                    worst = worst.max((m.lambda - sample.lambda).abs());
                    rechecked.push(InterfaceSample {
                        zeta: spec.zeta,
                        lambda: m.lambda,
                        loc_rate: m.rate,
                        far_fraction: m.far_fraction,
                        localized: spec.modes.iter().filter(|m| in_gap(m)).map(|m| m.lambda).collect(),
                    });
                }
                None => worst = f64::INFINITY,
            }
        }
        Some(worst)
    } else {
        None
    };

    Ok(InterfaceBand {
        field: *field,
        columns_per_side,
        gap,
        target,
        thresholds: *thresholds,
        samples,
        interval,
        truncation_error,
        recheck: rechecked,
        spectra: solved.into_iter().map(|(s, _)| s).collect(),
        tracked,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub checked: usize,
    /// `(zeta, lambda)` of every mode outside the inflated band union.
    pub violations: Vec<(f64, f64)>,
}

/// Checks that strip eigenvalues below `upper` lie in the periodic band
/// intervals, each inflated by 1% of its width plus `1e-6`. Modes listed in
/// `skip` (one index per spectrum) are exempt.
pub fn strip_bulk_consistency(
    spectra: &[StripSpectrum],
    skip: Option<&[usize]>,
    table: &BandTable,
    upper: f64,
) -> ConsistencyReport {
    let inflated: Vec<[f64; 2]> = table
        .intervals
        .iter()
        .map(|iv| {
            let slack = 0.01 * (iv[1] - iv[0]) + 1e-6;
            [iv[0] - slack, iv[1] + slack]
        })
        .collect();
    let mut checked = 0;
    let mut violations = Vec::new();
    for (i, spec) in spectra.iter().enumerate() {
        for (k, mode) in spec.modes.iter().enumerate() {
            if mode.lambda > upper || skip.is_some_and(|s| s[i] == k) {
                continue;
            }
            checked += 1;
            if !inflated.iter().any(|iv| iv[0] <= mode.lambda && mode.lambda <= iv[1]) {
                violations.push((spec.zeta, mode.lambda));
            }
        }
    }
    ConsistencyReport { checked, violations }
}

/// Nodal field kept for eigenvector dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalField {
    pub mesh: StructuredMesh,
    pub values: Vec<c64>,
}

impl NodalField {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "x1,x2,re,im")?;
        for j in 0..=self.mesh.n2() {
            for i in 0..=self.mesh.n1() {
                let [x1, x2] = self.mesh.node(i, j);
                let v = self.values[self.mesh.node_index(i, j)];
                writeln!(w, "{x1:.10e},{x2:.10e},{:.10e},{:.10e}", v.re, v.im)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XDefectCandidate {
    pub lambda: f64,
    pub far_fraction: [f64; 2],
    pub rate: [Option<f64>; 2],
    pub localized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XDefectResult {
    pub lambda: f64,
    pub target: f64,
    pub window: [f64; 2],
    pub cells: [usize; 2],
    /// Localization along `x1` and along `x2`.
    pub reports: [LocalizationReport; 2],
    pub candidates: Vec<XDefectCandidate>,
    pub truncation_error: Option<f64>,
    #[serde(skip)]
    pub mode: Option<NodalField>,
}

impl XDefectResult {
    pub fn truncation_limit(&self) -> f64 {
        1e-6 * (self.window[1] - self.window[0])
    }
}

fn x_defect_edges(field: &ContrastField, cells: [usize; 2]) -> Result<[Vec<f64>; 2], WaveguideError> {
    let FieldVariant::XDefect { h1, h2 } = field.variant else {
        return Err(WaveguideError::InvalidConfig("crossing patch needs an x-defect field".into()));
    };
    let l = field.lattice;
    Ok([column_edges(l.l1 + h1, 2.0 * l.l1, cells[0]), column_edges(l.l2 + h2, 2.0 * l.l2, cells[1])])
}

struct PatchSolve {
    candidates: Vec<XDefectCandidate>,
    reports: Vec<[LocalizationReport; 2]>,
    nodal: Vec<Vec<c64>>,
    mesh: StructuredMesh,
}

fn solve_patch(
    field: &ContrastField,
    cells: [usize; 2],
    disc: &Discretization,
    target: f64,
    window: [f64; 2],
    thresholds: &LocalizationThresholds,
) -> Result<PatchSolve, WaveguideError> {
    let edges = x_defect_edges(field, cells)?;
    let domain = Rect::new([edges[0][0], *edges[0].last().unwrap()], [edges[1][0], *edges[1].last().unwrap()]);
    let mesh = build_mesh(&domain, field, disc.target_h)?;
    let problem = assemble(&mesh, field, &BoundarySpec::dirichlet())?;
    // Bulk states can crowd the window; widen the request until a localized
    // mode shows up or the returned values cover the whole window.
    let mut count = 10;
    loop {
        let result = eig::solve_near(&problem.pencil(), target, count, &disc.solver).map_err(|source| {
            WaveguideError::Solver { context: format!("crossing patch {}x{}", cells[0], cells[1]), source }
        })?;
        let vectors = result.vectors.unwrap_or_default();
        let mut out =
            PatchSolve { candidates: Vec::new(), reports: Vec::new(), nodal: Vec::new(), mesh: mesh.clone() };
        for (k, &lambda) in result.values.iter().enumerate() {
            if !(lambda > window[0] && lambda < window[1]) {
                continue;
            }
            let nodal = problem.expand(&vectors[k]);
            let rx = localization_measure(&mesh, &nodal, 0, &edges[0], cells[0]);
            let ry = localization_measure(&mesh, &nodal, 1, &edges[1], cells[1]);
            out.candidates.push(XDefectCandidate {
                lambda,
                far_fraction: [rx.far_fraction, ry.far_fraction],
                rate: [rx.rate, ry.rate],
                localized: thresholds.accepts(&rx) && thresholds.accepts(&ry),
            });
            out.reports.push([rx, ry]);
            out.nodal.push(nodal);
        }
        let covered = result.values.first().is_some_and(|&v| v <= window[0])
            && result.values.last().is_some_and(|&v| v >= window[1]);
        if out.candidates.iter().any(|c| c.localized) || covered || count >= MAX_PATCH_EIGENVALUES {
            return Ok(out);
        }
        count = (2 * count).min(MAX_PATCH_EIGENVALUES);
    }
}

fn closest_localized(candidates: &[XDefectCandidate], target: f64) -> Option<usize> {
    (0..candidates.len())
        .filter(|&k| candidates[k].localized)
        .min_by(|&a, &b| (candidates[a].lambda - target).abs().total_cmp(&(candidates[b].lambda - target).abs()))
}

/// Trapped eigenvalue of a Dirichlet patch centred on the enlarged crossing
/// cell with `cells[0] x cells[1]` regular cells on each side.
pub fn x_defect_eigenvalue(
    field: &ContrastField,
    cells: [usize; 2],
    disc: &Discretization,
    thresholds: &LocalizationThresholds,
    recheck: bool,
) -> Result<XDefectResult, WaveguideError> {
    let levels = analytic_defect_levels(&field.lattice, &field.variant)?;
    let target = find_level(&levels, "crossing");
    let window = [find_level(&levels, "window_lo"), find_level(&levels, "window_hi")];
    let solved = solve_patch(field, cells, disc, target, window, thresholds)?;
    let no_mode = || WaveguideError::NoLocalizedMode {
        context: format!("crossing patch {}x{}", cells[0], cells[1]),
        window,
    };
    let pick = closest_localized(&solved.candidates, target).ok_or_else(no_mode)?;
    let lambda = solved.candidates[pick].lambda;
    let truncation_error = if recheck {
        let refined = solve_patch(field, [cells[0] + 2, cells[1] + 2], disc, target, window, thresholds)?;
        Some(
            refined
                .candidates
                .iter()
                .filter(|c| c.localized)
                .map(|c| (c.lambda - lambda).abs())
                .fold(f64::INFINITY, f64::min),
        )
    } else {
        None
    };
    Ok(XDefectResult {
        lambda,
        target,
        window,
        cells,
        reports: solved.reports[pick].clone(),
        candidates: solved.candidates,
        truncation_error,
        mode: Some(NodalField { mesh: solved.mesh, values: solved.nodal[pick].clone() }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lattice() -> Lattice {
        Lattice::new(0.7, 0.5).unwrap()
    }

    #[test]
    fn strip_level_default() {
        let levels = analytic_defect_levels(&lattice(), &FieldVariant::Mirrored { h: 0.35 }).unwrap();
        let strip = find_level(&levels, "strip");
        assert!((strip - PI * PI / (4.0 * 1.1025)).abs() < 1e-12);
        assert!((strip - 2.238).abs() < 1e-3);
        assert!((find_level(&levels, "window_hi") - 5.0355).abs() < 1e-4);
    }

    #[test]
    fn crossing_level_default() {
        let levels = analytic_defect_levels(&lattice(), &FieldVariant::XDefect { h1: 0.5, h2: 0.45 }).unwrap();
        let cross = find_level(&levels, "crossing");
        assert!((cross - PI * PI / 4.0 * (1.0 / 1.44 + 1.0 / 0.9025)).abs() < 1e-12);
        assert!((cross - 4.448).abs() < 1e-3);
        assert!((find_level(&levels, "window_lo") - 2.734).abs() < 1e-3);
        assert!((find_level(&levels, "window_hi") - 5.035).abs() < 1e-3);
    }

    #[test]
    fn strip_level_decreases_in_h() {
        let l = lattice();
        let mut prev = f64::INFINITY;
        for i in 1..70 {
            let h = i as f64 * 0.01;
            let v = find_level(&analytic_defect_levels(&l, &FieldVariant::Mirrored { h }).unwrap(), "strip");
            assert!(v < prev);
            prev = v;
        }
        let limit = PI * PI / (16.0 * 0.49);
        assert!((prev - limit).abs() < 0.02 * limit);
    }

    #[test]
    fn ordering_failures_are_signalled() {
        let l = lattice();
        assert!(matches!(
            analytic_defect_levels(&l, &FieldVariant::Mirrored { h: 0.0 }),
            Err(WaveguideError::Ordering(_))
        ));
        assert!(matches!(
            analytic_defect_levels(&l, &FieldVariant::XDefect { h1: 0.0, h2: 0.0 }),
            Err(WaveguideError::Ordering(_))
        ));
        assert!(analytic_defect_levels(&l, &FieldVariant::Periodic).is_err());
    }

    #[test]
    fn geometric_decay_rate() {
        let n = 6;
        let raw: Vec<f64> = (0..=2 * n).map(|i| 4f64.powi(-(i as i32 - n as i32).abs())).collect();
        let total: f64 = raw.iter().sum();
        let report = LocalizationReport::from_fractions(raw.iter().map(|e| e / total).collect(), n);
        let rate = report.rate.unwrap();
        assert!((rate - 4f64.ln()).abs() < 0.01 * 4f64.ln());
        assert!((report.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_vector_fractions_follow_column_widths() {
        let edges = column_edges(1.05, 1.4, 4);
        let mesh = StructuredMesh::from_coordinates(
            {
                let mut xs = Vec::new();
                for w in edges.windows(2) {
                    for s in 0..7 {
                        xs.push(w[0] + (w[1] - w[0]) * s as f64 / 7.0);
                    }
                }
                xs.push(*edges.last().unwrap());
                xs
            },
            vec![-0.5, -0.1, 0.2, 0.5],
        )
        .unwrap();
        let nodal = vec![c64::new(0.3, -0.4); mesh.node_count()];
        let report = localization_measure(&mesh, &nodal, 0, &edges, 4);
        let width = edges.last().unwrap() - edges[0];
        assert!((report.total() - 1.0).abs() < 1e-12);
        assert!((report.fractions[4] - 2.1 / width).abs() < 1e-12);
        assert!((report.fractions[0] - 1.4 / width).abs() < 1e-12);
        assert!((report.far_fraction - 4.0 * 1.4 / width).abs() < 1e-12);
    }

    #[test]
    fn column_edges_layout() {
        let e = column_edges(1.05, 1.4, 2);
        let expected = [-3.85, -2.45, -1.05, 1.05, 2.45, 3.85];
        assert_eq!(e.len(), expected.len());
        for (a, b) in e.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn strip_config_checks() {
        let field = ContrastField::periodic(0.7, 0.5, 0.04, 0.75).unwrap();
        assert!(StripConfig::new(field, 6, 0.0).is_err());
        let mirrored = field.with_variant(FieldVariant::Mirrored { h: 0.35 }).unwrap();
        let cfg = StripConfig::new(mirrored, 6, 0.0).unwrap();
        let d = cfg.domain();
        assert!((d.x1[1] - (0.7 + 0.35 + 12.0 * 0.7)).abs() < 1e-12);
        let other = ContrastField::periodic(0.7, 0.4, 0.04, 0.75)
            .unwrap()
            .with_variant(FieldVariant::Mirrored { h: 0.35 })
            .unwrap();
        assert!(StripConfig::new(other, 6, 0.0).is_err());
    }
}
