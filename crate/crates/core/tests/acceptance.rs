//! End-to-end acceptance suite. Runs every criterion at its stated tolerance
//! and prints one PASS/FAIL line each; exits nonzero if any fails.
//!
//! Expect tens of minutes on a single core.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use bands_core::bands::{asymptotic_check, cell_bands, cell_mesh, cell_problem, gap_detect, limit_spectrum, BandTable, Discretization};
use bands_core::coeff::{ContrastField, FieldVariant, Lattice};
use bands_core::eig::{self, Method, SolverOptions};
use bands_core::fem::{assemble, constant_coefficient_oracle, BoundarySpec, StructuredMesh};
use bands_core::waveguide::{
    analytic_defect_levels, interface_band, strip_bulk_consistency, x_defect_eigenvalue, zeta_grid, InterfaceBand,
    LocalizationThresholds, WaveguideError,
};
use num_complex::Complex64 as c64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const L1: f64 = 0.7;
const L2: f64 = 0.5;
const GAMMA: f64 = 0.75;
const H: f64 = 0.35;
const COLUMNS: usize = 6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Run = Result<Outcome, String>;

fn field(eps: f64) -> ContrastField {
    ContrastField::periodic(L1, L2, eps, GAMMA).expect("default parameters are valid")
}

fn uniform_cell_mesh(n1: usize, n2: usize) -> StructuredMesh {
    let line = |half: f64, n: usize| (0..=n).map(|i| -half + 2.0 * half * i as f64 / n as f64).collect();
    StructuredMesh::from_coordinates(line(L1, n1), line(L2, n2)).unwrap()
}

fn oracle_errors(mesh: &StructuredMesh, phase: [f64; 2], lattice: &Lattice) -> Result<(f64, f64), String> {
    let uniform = field(0.04).with_variant(FieldVariant::Uniform).unwrap();
    let problem = assemble(mesh, &uniform, &BoundarySpec::bloch(phase[0], phase[1])).map_err(|e| e.to_string())?;
    let result = eig::solve_smallest(&problem.pencil(), 5, &SolverOptions::default()).map_err(|e| e.to_string())?;
    let exact = constant_coefficient_oracle(lattice, phase, 5);
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    for (d, e) in result.values.iter().zip(&exact) {
        max_abs = max_abs.max((d - e).abs());
        if *e > 1e-12 {
            max_rel = max_rel.max((d - e).abs() / e);
        } else {
            max_rel = max_rel.max((d - e).abs());
        }
    }
    Ok((max_abs, max_rel))
}

/// Discretization oracle on the contrast-free cell.
fn criterion_1() -> Run {
    let lattice = Lattice::new(L1, L2).unwrap();
    // eps/3 at eps = 0.04 over the cell: 105 x 75 elements.
    let coarse = uniform_cell_mesh(105, 75);
    let fine = coarse.refined();
    let mut pass = true;
    let mut parts = Vec::new();
    for phase in [[0.0, 0.0], [PI, 0.0], [PI, PI]] {
        let (a0, r0) = oracle_errors(&coarse, phase, &lattice)?;
        let (a1, _) = oracle_errors(&fine, phase, &lattice)?;
        let ratio = a0 / a1;
        pass &= r0 < 0.01 && (3.5..=4.5).contains(&ratio);
        parts.push(format!("phi=({:.3},{:.3}) rel {r0:.2e} ratio {ratio:.3}", phase[0], phase[1]));
    }
    Ok(outcome(pass, parts.join("; ")))
}

struct Bands {
    tables: Vec<(f64, BandTable)>,
}

impl Bands {
    fn at(&self, eps: f64) -> &BandTable {
        &self.tables.iter().find(|(e, _)| *e == eps).unwrap().1
    }
}

fn sweep_bands() -> Result<Bands, String> {
    let disc = Discretization::default();
    let mut tables = Vec::new();
    for eps in [0.08, 0.04, 0.02] {
        let t = Instant::now();
        let table = cell_bands(&field(eps), &disc, 6, 9).map_err(|e| e.to_string())?;
        eprintln!("  bands at eps = {eps}: {:.1?}, {} phases", t.elapsed(), table.samples.len());
        tables.push((eps, table));
    }
    Ok(Bands { tables })
}

/// Band functions approach the limit levels as eps decreases.
fn criterion_2(bands: &Bands) -> Run {
    let lattice = Lattice::new(L1, L2).unwrap();
    let limit = limit_spectrum(&lattice, 6);
    let mut pass = true;
    let mut parts = Vec::new();
    for n in [2usize, 3] {
        let errors: Vec<(f64, f64)> = bands.tables.iter().map(|(eps, t)| (*eps, t.max_deviation(n, &limit))).collect();
        match asymptotic_check(&errors, GAMMA) {
            Ok(fit) => {
                pass &= fit.pass && fit.slope >= 0.10;
                parts.push(format!(
                    "n={n} errors {:?} slope {:.3}",
                    errors.iter().map(|e| format!("{:.4}", e.1)).collect::<Vec<_>>(),
                    fit.slope
                ));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("n={n} {e}"));
            }
        }
    }
    Ok(outcome(pass, parts.join("; ")))
}

/// At least two open gaps below mu_4 at eps = 0.02.
fn criterion_3(bands: &Bands) -> Run {
    let lattice = Lattice::new(L1, L2).unwrap();
    let mu4 = limit_spectrum(&lattice, 4).mu(4);
    let report = gap_detect(&[bands.at(0.02)]);
    let count = report.components_below(mu4);
    Ok(outcome(count >= 3, format!("{count} components below mu_4 = {mu4:.4}, gaps {:?}", report.gaps)))
}

fn strip_level() -> f64 {
    let lattice = Lattice::new(L1, L2).unwrap();
    let levels = analytic_defect_levels(&lattice, &FieldVariant::Mirrored { h: H }).unwrap();
    levels.iter().find(|l| l.label == "strip").unwrap().level
}

fn strip_band(bands: &Bands, eps: f64, h: f64, recheck: bool) -> Result<Result<InterfaceBand, WaveguideError>, String> {
    let target = strip_level();
    let gap = gap_detect(&[bands.at(eps)])
        .gap_containing(target)
        .ok_or_else(|| format!("no gap contains {target:.4} at eps = {eps}"))?;
    let mirrored = field(eps).with_variant(FieldVariant::Mirrored { h }).map_err(|e| e.to_string())?;
    let t = Instant::now();
    let band = interface_band(
        &mirrored,
        COLUMNS,
        &zeta_grid(9),
        &Discretization::default(),
        gap,
        target,
        &LocalizationThresholds::default(),
        recheck,
    );
    eprintln!("  strip eps = {eps}, h = {h}: {:.1?}", t.elapsed());
    Ok(band)
}

struct Strips {
    main: InterfaceBand,
    finer_eps: Option<InterfaceBand>,
    control: Result<InterfaceBand, WaveguideError>,
}

fn max_dev(band: &InterfaceBand, center: f64) -> f64 {
    band.samples.iter().map(|s| (s.lambda - center).abs()).fold(0.0, f64::max)
}

/// Interface branch near the strip level, closer at smaller eps.
fn criterion_4(strips: &Strips) -> Run {
    let center = 2.2382;
    let d04 = max_dev(&strips.main, center);
    let Some(finer) = &strips.finer_eps else {
        return Ok(outcome(false, format!("max dev {d04:.4} at eps=0.04; no localized branch at eps=0.02")));
    };
    let d02 = max_dev(finer, center);
    Ok(outcome(
        d04 <= 0.5 && d02 < d04,
        format!("max |L - {center}| = {d04:.4} (eps=0.04), {d02:.4} (eps=0.02)"),
    ))
}

/// Interface band strictly inside the gap; h = 0 control has no such mode.
fn criterion_5(strips: &Strips) -> Run {
    let band = &strips.main;
    let slack = band.truncation_error.unwrap_or(f64::INFINITY);
    let inside = band.interval[0] > band.gap[0] && band.interval[1] < band.gap[1];
    let margin = band.gap_margin();
    let control_ok = matches!(strips.control, Err(WaveguideError::NoLocalizedMode { .. }));
    let control = match &strips.control {
        Ok(b) => format!("control found {:?}", b.interval),
        Err(e) => format!("control: {e}"),
    };
    Ok(outcome(
        inside && margin > 10.0 * slack && control_ok,
        format!(
            "band [{:.5}, {:.5}] in gap ({:.5}, {:.5}), margin {margin:.3e}, truncation {slack:.3e}; {control}",
            band.interval[0], band.interval[1], band.gap[0], band.gap[1]
        ),
    ))
}

/// Localized interface mode, decay rate stable under N -> N + 2.
fn criterion_6(strips: &Strips) -> Run {
    let band = &strips.main;
    let th = LocalizationThresholds::default();
    let mut pass = band.recheck.len() == band.samples.len();
    let mut worst_far: f64 = 0.0;
    let mut min_rate = f64::INFINITY;
    let mut worst_change: f64 = 0.0;
    for (a, b) in band.samples.iter().zip(&band.recheck) {
        worst_far = worst_far.max(a.far_fraction);
        let ra = a.loc_rate.unwrap_or(f64::INFINITY);
        min_rate = min_rate.min(ra);
        pass &= a.far_fraction < th.max_far_fraction && ra > th.min_rate;
        match (a.loc_rate, b.loc_rate) {
            (Some(x), Some(y)) => worst_change = worst_change.max((y - x).abs() / x),
            (None, None) => {}
            _ => worst_change = f64::INFINITY,
        }
    }
    pass &= worst_change <= 0.2;
    Ok(outcome(
        pass,
        format!("max f3 {worst_far:.3e}, min rate {min_rate:.3}, max rate change N={COLUMNS}->{} {:.2}%", COLUMNS + 2, 100.0 * worst_change),
    ))
}

/// Strip eigenvalues other than the tracked branch sit inside the bulk bands.
fn criterion_7(strips: &Strips, bands: &Bands) -> Run {
    let band = &strips.main;
    let report = strip_bulk_consistency(&band.spectra, Some(&band.tracked), bands.at(0.04), band.gap[1]);
    Ok(outcome(
        report.violations.is_empty(),
        format!("{} strip eigenvalues checked, violations {:?}", report.checked, report.violations),
    ))
}

/// Trapped eigenvalue at the crossing of two defect lines.
fn crossing(eps: f64) -> Run {
    let lattice = Lattice::new(L1, L2).unwrap();
    let variant = FieldVariant::XDefect { h1: 0.5, h2: 0.45 };
    let levels = analytic_defect_levels(&lattice, &variant).map_err(|e| e.to_string())?;
    let target = levels.iter().find(|l| l.label == "crossing").unwrap().level;
    let xfield = field(eps).with_variant(variant).map_err(|e| e.to_string())?;
    let t = Instant::now();
    let result = x_defect_eigenvalue(&xfield, [4, 4], &Discretization::default(), &LocalizationThresholds::default(), false);
    eprintln!("  crossing patch eps = {eps}: {:.1?}", t.elapsed());
    match result {
        Ok(r) => {
            let pass = r.lambda > r.window[0] && r.lambda < r.window[1] && (r.lambda - target).abs() <= 0.6;
            Ok(outcome(
                pass,
                format!(
                    "lambda {:.5} (target {target:.4}), f3 = ({:.2e}, {:.2e}), rate = ({:?}, {:?})",
                    r.lambda, r.reports[0].far_fraction, r.reports[1].far_fraction, r.reports[0].rate, r.reports[1].rate
                ),
            ))
        }
        Err(WaveguideError::NoLocalizedMode { .. }) => Ok(outcome(
            false,
            format!("no eigenvalue in ({:.4}, {:.4}) is localized in both directions", levels[2].level, levels[4].level),
        )),
        Err(e) => Err(e.to_string()),
    }
}

/// Quick structural invariants: Hermitian/definite pencils, conjugation
/// symmetry, mass fractions, mirror symmetry, dense-vs-iterative agreement.
fn criterion_9(strips: Option<&Strips>) -> Run {
    let mut parts = Vec::new();
    let mut pass = true;
    let f = field(0.04);
    let mesh = cell_mesh(&f, 0.1).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    let phase = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
    let p = cell_problem(&f, &mesh, phase).map_err(|e| e.to_string())?;
    let herm = p.stiffness.hermitian_defect().max(p.mass.hermitian_defect());
    let min_mass = (0..20)
        .map(|_| {
            let x: Vec<c64> = (0..p.dim()).map(|_| c64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
            p.mass.quadratic_form(&x).re / x.iter().map(|v| v.norm_sqr()).sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min);
    pass &= herm <= 1e-12 && min_mass > 0.0;
    parts.push(format!("hermitian defect {herm:.1e}, min Rayleigh(M) {min_mass:.2e}"));

    let conj = cell_problem(&f, &mesh, [2.0 * PI - phase[0], 2.0 * PI - phase[1]]).map_err(|e| e.to_string())?;
    let opts = SolverOptions::default();
    let a = eig::solve_smallest(&p.pencil(), 6, &opts).map_err(|e| e.to_string())?;
    let b = eig::solve_smallest(&conj.pencil(), 6, &opts).map_err(|e| e.to_string())?;
    let sym = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs() / x.abs().max(1.0)).fold(0.0, f64::max);
    pass &= sym <= 1e-8;
    parts.push(format!("conjugation {sym:.1e}"));

    let dense = eig::solve_smallest(&p.pencil(), 6, &SolverOptions { method: Method::Dense, ..opts }).map_err(|e| e.to_string())?;
    let iter = eig::solve_smallest(&p.pencil(), 6, &SolverOptions { method: Method::Iterative, ..opts }).map_err(|e| e.to_string())?;
    let agree = dense.values.iter().zip(&iter.values).map(|(x, y)| (x - y).abs() / x.abs().max(1.0)).fold(0.0, f64::max);
    pass &= p.dim() <= 2000 && agree <= 1e-8;
    parts.push(format!("dense vs iterative {agree:.1e} at dim {}", p.dim()));

    if let Some(s) = strips {
        let mirror = s.main.spectra.iter().zip(&s.main.tracked).map(|(sp, &k)| sp.mirror[k]).fold(0.0, f64::max);
        pass &= mirror <= 1e-6;
        parts.push(format!("mirror defect {mirror:.1e}"));
    }
    // Mass fractions of a random field on a strip mesh.
    let mirrored = f.with_variant(FieldVariant::Mirrored { h: H }).unwrap();
    let cfg = bands_core::waveguide::StripConfig::new(mirrored, 4, 0.3).map_err(|e| e.to_string())?;
    let sp = cfg.assemble(&Discretization { target_h: 0.1, ..Discretization::default() }).map_err(|e| e.to_string())?;
    let u: Vec<c64> = (0..sp.dim()).map(|_| c64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
    let nodal = sp.expand(&u);
    let report = bands_core::waveguide::localization_measure(&sp.mesh, &nodal, 0, &cfg.column_edges(), 4);
    let total_err = (report.total() - 1.0).abs();
    pass &= total_err <= 1e-9;
    parts.push(format!("mass fractions sum to 1 within {total_err:.1e}"));
    Ok(outcome(pass, parts.join("; ")))
}

fn need(r: &Result<Bands, String>) -> Result<&Bands, String> {
    r.as_ref().map_err(|e| e.clone())
}

fn report(lines: &mut Vec<(String, bool)>, id: usize, name: &str, run: Run) {
    let (pass, detail) = match run {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    let line = format!("criterion {id} [{name}]: {} - {detail}", if pass { "PASS" } else { "FAIL" });
    println!("{line}");
    lines.push((line, pass));
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut lines = Vec::new();
    report(&mut lines, 1, "discretization oracle", criterion_1());

    let bands = sweep_bands();
    let strips = match &bands {
        Ok(b) => (|| -> Result<Strips, String> {
            let main = strip_band(b, 0.04, H, true)?.map_err(|e| e.to_string())?;
            let finer_eps = strip_band(b, 0.02, H, false)?.ok();
            let control = strip_band(b, 0.04, 0.0, false)?;
            Ok(Strips { main, finer_eps, control })
        })(),
        Err(e) => Err(e.clone()),
    };
    report(&mut lines, 2, "band convergence to limit levels", need(&bands).and_then(criterion_2));
    report(&mut lines, 3, "gap opening", need(&bands).and_then(criterion_3));
    let s = strips.as_ref().map_err(|e| e.clone());
    report(&mut lines, 4, "interface eigenvalue near strip level", s.clone().and_then(criterion_4));
    report(&mut lines, 5, "interface band inside the gap", s.clone().and_then(criterion_5));
    report(&mut lines, 6, "interface mode localization", s.clone().and_then(criterion_6));
    report(
        &mut lines,
        7,
        "strip spectrum inside bulk bands",
        s.clone().and_then(|st| need(&bands).and_then(|b| criterion_7(st, b))),
    );
    report(&mut lines, 8, "crossing eigenvalue", crossing(0.04));
    match crossing(0.02) {
        Ok(o) => println!("info: crossing patch at eps = 0.02: {}", o.detail),
        Err(e) => println!("info: crossing patch at eps = 0.02: error {e}"),
    }
    report(&mut lines, 9, "structural invariants", criterion_9(strips.as_ref().ok()));

    let passed = lines.iter().filter(|l| l.1).count();
    println!("acceptance: {passed}/{} criteria passed in {:.0?}", lines.len(), started.elapsed());
    if passed == lines.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
