//! Run configuration, stage orchestration and artifact emission for the
//! `bands-tool` binary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::bands::{
    asymptotic_check, cell_bands, dirichlet_spectrum, gap_detect, limit_spectrum, BandTable, Discretization,
    GapReport, PhaseSample,
};
use crate::coeff::{ContrastField, ContrastProfile, FieldVariant, Lattice};
use crate::eig::SolverOptions;
use crate::waveguide::{
    analytic_defect_levels, interface_band, strip_bulk_consistency, x_defect_eigenvalue, zeta_grid, InterfaceBand,
    LocalizationThresholds, WaveguideError, XDefectResult,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage}: {message}")]
    Stage { stage: Stage, message: String },
    #[error("io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Limit,
    Bands,
    Gaps,
    Interface,
    Xdefect,
    Verify,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Limit, Stage::Bands, Stage::Gaps, Stage::Interface, Stage::Xdefect, Stage::Verify];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Limit => "limit",
            Stage::Bands => "bands",
            Stage::Gaps => "gaps",
            Stage::Interface => "interface",
            Stage::Xdefect => "xdefect",
            Stage::Verify => "verify",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

/// Parses `all` or a comma-separated stage list.
pub fn parse_stages(spec: &str) -> Result<Vec<Stage>, String> {
    if spec == "all" {
        return Ok(Stage::ALL.to_vec());
    }
    let mut stages = spec.split(',').map(|s| s.trim().parse()).collect::<Result<Vec<Stage>, _>>()?;
    stages.sort();
    stages.dedup();
    Ok(stages)
}

fn default_eps() -> Vec<f64> {
    vec![0.08, 0.04, 0.02]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub l1: f64,
    pub l2: f64,
    #[serde(default = "default_eps")]
    pub eps: Vec<f64>,
    pub gamma: f64,
    /// Shift of the mirrored strip.
    pub h: f64,
    pub h1: f64,
    pub h2: f64,
    /// `false` replaces the coefficient by `a = 1` in the band stages.
    pub contrast: bool,
    pub target_h: f64,
    pub bands: usize,
    pub phase_grid: usize,
    pub zeta_count: usize,
    /// `eps` used by the strip and crossing stages; must be in `eps`.
    pub defect_eps: f64,
    pub columns_per_side: usize,
    pub patch_cells: [usize; 2],
    pub truncation_recheck: bool,
    pub tol: f64,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            l1: 0.7,
            l2: 0.5,
            eps: default_eps(),
            gamma: 0.75,
            h: 0.35,
            h1: 0.5,
            h2: 0.45,
            contrast: true,
            target_h: 0.05,
            bands: 6,
            phase_grid: 9,
            zeta_count: 9,
            defect_eps: 0.04,
            columns_per_side: 6,
            patch_cells: [4, 4],
            truncation_recheck: true,
            tol: 1e-8,
            seed: SolverOptions::default().seed,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let config: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn lattice(&self) -> Result<Lattice, CliError> {
        Lattice::new(self.l1, self.l2).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Field used by the band stages at `eps`.
    pub fn bulk_field(&self, eps: f64) -> Result<ContrastField, CliError> {
        let variant = if self.contrast { FieldVariant::Periodic } else { FieldVariant::Uniform };
        self.field(eps, variant)
    }

    pub fn field(&self, eps: f64, variant: FieldVariant) -> Result<ContrastField, CliError> {
        let lattice = self.lattice()?;
        let profile = ContrastProfile::new(&lattice, eps, self.gamma).map_err(|e| CliError::Config(e.to_string()))?;
        ContrastField::new(lattice, profile, variant).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn strip_field(&self) -> Result<ContrastField, CliError> {
        self.field(self.defect_eps, FieldVariant::Mirrored { h: self.h })
    }

    pub fn crossing_field(&self) -> Result<ContrastField, CliError> {
        self.field(self.defect_eps, FieldVariant::XDefect { h1: self.h1, h2: self.h2 })
    }

    pub fn discretization(&self) -> Discretization {
        Discretization {
            target_h: self.target_h,
            solver: SolverOptions { tol: self.tol, seed: self.seed, ..SolverOptions::default() },
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.eps.is_empty() {
            return bad("eps list is empty".into());
        }
        for &eps in &self.eps {
            self.bulk_field(eps)?;
        }
        if !self.eps.contains(&self.defect_eps) {
            return bad(format!("defect_eps {} is not in the eps list", self.defect_eps));
        }
        self.strip_field()?;
        self.crossing_field()?;
        if !(self.target_h > 0.0 && self.target_h.is_finite()) {
            return bad(format!("target_h must be positive, got {}", self.target_h));
        }
        if self.bands == 0 {
            return bad("bands must be positive".into());
        }
        if self.phase_grid < 2 {
            return bad("phase_grid must be at least 2".into());
        }
        if self.zeta_count < 2 {
            return bad("zeta_count must be at least 2".into());
        }
        if self.columns_per_side == 0 || self.patch_cells.contains(&0) {
            return bad("supercells need at least one cell per side".into());
        }
        if (self.l2 - 0.5).abs() > 1e-12 {
            return bad(format!("the strip cross-section needs l2 = 0.5, got {}", self.l2));
        }
        if !(self.tol > 0.0) {
            return bad("tol must be positive".into());
        }
        Ok(())
    }

    /// Parameter echo written into every artifact.
    pub fn echo(&self, eps: Option<f64>) -> serde_json::Value {
        json!({
            "l1": self.l1,
            "l2": self.l2,
            "eps": eps.map_or_else(|| json!(self.eps), |e| json!(e)),
            "gamma": self.gamma,
            "h": self.h,
            "h1": self.h1,
            "h2": self.h2,
            "contrast": self.contrast,
            "target_h": self.target_h,
            "tol": self.tol,
            "bands": self.bands,
            "phase_grid": self.phase_grid,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOutcome {
    pub verdicts: Vec<Verdict>,
    pub artifacts: Vec<PathBuf>,
}

impl PipelineOutcome {
    /// 0 when every verdict passes, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.verdicts.iter().all(|v| v.pass) {
            0
        } else {
            2
        }
    }
}

pub fn bands_file_name(eps: f64) -> String {
    format!("bands_eps{eps}.csv")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, contents: &str, outcome: &mut PipelineOutcome) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))?;
    outcome.artifacts.push(path.to_path_buf());
    Ok(())
}

fn echo_line(echo: &serde_json::Value) -> String {
    format!("# {}", serde_json::to_string(echo).expect("echo serializes"))
}

/// CSV `phi1,phi2,k,lambda` preceded by a `#` parameter line.
pub fn band_table_csv(table: &BandTable, echo: &serde_json::Value) -> String {
    let mut s = echo_line(echo);
    s.push_str("\nphi1,phi2,k,lambda\n");
    for sample in &table.samples {
        for (k, v) in sample.values.iter().enumerate() {
            let _ = writeln!(s, "{:e},{:e},{},{:e}", sample.phase[0], sample.phase[1], k + 1, v);
        }
    }
    s
}

/// Reads a band CSV back if its parameter line matches `echo`.
pub fn read_band_csv(
    path: &Path,
    echo: &serde_json::Value,
    field: ContrastField,
    target_h: f64,
    grid: usize,
    bands: usize,
) -> Option<BandTable> {
    let file = fs::File::open(path).ok()?;
    let mut lines = BufReader::new(file).lines();
    if lines.next()?.ok()? != echo_line(echo) {
        return None;
    }
    if lines.next()?.ok()? != "phi1,phi2,k,lambda" {
        return None;
    }
    let mut grouped: BTreeMap<(u64, u64), Vec<f64>> = BTreeMap::new();
    for line in lines {
        let line = line.ok()?;
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return None;
        }
        let p1: f64 = parts[0].parse().ok()?;
        let p2: f64 = parts[1].parse().ok()?;
        let v: f64 = parts[3].parse().ok()?;
        grouped.entry((p1.to_bits(), p2.to_bits())).or_default().push(v);
    }
    let samples: Vec<PhaseSample> = grouped
        .into_iter()
        .map(|((a, b), values)| PhaseSample { phase: [f64::from_bits(a), f64::from_bits(b)], values })
        .collect();
    if samples.is_empty() || samples.iter().any(|s| s.values.len() != bands) {
        return None;
    }
    Some(BandTable::from_samples(field, target_h, grid, bands, samples))
}

fn read_cached_json(path: &Path, echo: &serde_json::Value) -> Option<serde_json::Value> {
    let text = fs::read_to_string(path).ok()?;
    let value: serde_json::Value = serde_json::from_str(&text).ok()?;
    (value.get("params")? == echo).then_some(value)
}

/// Deterministic SVG of band intervals along the loop
/// `(0,0) -> (pi,0) -> (pi,pi) -> (0,pi) -> (0,0)`.
///
/// Bulk bands are shaded strips, the interface branch is drawn as a
/// function of the transverse phase `phi2` along the loop, and reference
/// levels are dashed lines.
pub fn emit_band_diagram(
    tables: &[&BandTable],
    gaps: Option<&GapReport>,
    interface: Option<&InterfaceBand>,
    levels: &[(String, f64)],
) -> String {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const M: f64 = 50.0;
    let top = tables
        .iter()
        .flat_map(|t| t.intervals.iter().map(|iv| iv[1]))
        .chain(levels.iter().map(|l| l.1))
        .fold(1.0, f64::max)
        * 1.05;
    let y = |v: f64| H - M - (v / top) * (H - 2.0 * M);
    let x = |t: f64| M + t / 4.0 * (W - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    );
    let _ = writeln!(s, "<rect x=\"0\" y=\"0\" width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    for (i, table) in tables.iter().enumerate() {
        for iv in &table.intervals {
            let _ = writeln!(
                s,
                "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"steelblue\" fill-opacity=\"{:.3}\"/>",
                x(0.0),
                y(iv[1]),
                x(4.0) - x(0.0),
                (y(iv[0]) - y(iv[1])).max(0.5),
                0.25 + 0.15 * i as f64
            );
        }
    }
    if let Some(g) = gaps {
        for gap in &g.gaps {
            let _ = writeln!(
                s,
                "<!-- gap {:e} {:e} -->",
                gap[0], gap[1]
            );
        }
    }
    for (label, v) in levels {
        let _ = writeln!(
            s,
            "<line x1=\"{:.3}\" y1=\"{:.3}\" x2=\"{:.3}\" y2=\"{:.3}\" stroke=\"black\" stroke-dasharray=\"6,4\"/>",
            x(0.0),
            y(*v),
            x(4.0),
            y(*v)
        );
        let _ = writeln!(s, "<text x=\"{:.3}\" y=\"{:.3}\" font-size=\"11\">{label}</text>", x(4.0) + 4.0, y(*v) + 4.0);
    }
    if let Some(band) = interface {
        let branch: Vec<(f64, f64)> = band.samples.iter().map(|p| (p.zeta, p.lambda)).collect();
        let at = |zeta: f64| -> f64 {
            if branch.len() == 1 {
                return branch[0].1;
            }
            let k = branch.partition_point(|p| p.0 <= zeta).clamp(1, branch.len() - 1);
            let (a, b) = (branch[k - 1], branch[k]);
            if b.0 == a.0 {
                a.1
            } else {
                a.1 + (b.1 - a.1) * (zeta - a.0) / (b.0 - a.0)
            }
        };
        let mut d = String::new();
        let steps = 200;
        for i in 0..=steps {
            let t = 4.0 * i as f64 / steps as f64;
            let phi2 = match t {
                t if t <= 1.0 => 0.0,
                t if t <= 2.0 => (t - 1.0) * std::f64::consts::PI,
                t if t <= 3.0 => std::f64::consts::PI,
                t => (4.0 - t) * std::f64::consts::PI,
            };
            let _ = write!(d, "{}{:.3},{:.3}", if i == 0 { "M" } else { " L" }, x(t), y(at(phi2)));
        }
        let _ = writeln!(s, "<path d=\"{d}\" fill=\"none\" stroke=\"crimson\" stroke-width=\"2\"/>");
    }
    let _ = writeln!(
        s,
        "<line x1=\"{:.3}\" y1=\"{:.3}\" x2=\"{:.3}\" y2=\"{:.3}\" stroke=\"black\"/>",
        x(0.0),
        y(0.0),
        x(4.0),
        y(0.0)
    );
    for (i, label) in ["(0,0)", "(pi,0)", "(pi,pi)", "(0,pi)", "(0,0)"].iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{:.3}\" y=\"{:.3}\" font-size=\"11\" text-anchor=\"middle\">{label}</text>",
            x(i as f64),
            H - M + 16.0
        );
    }
    s.push_str("</svg>\n");
    s
}

struct Pipeline<'a> {
    config: &'a RunConfig,
    out: PathBuf,
    outcome: PipelineOutcome,
    tables: BTreeMap<u64, BandTable>,
    gaps: Option<GapReport>,
    interface: Option<Result<InterfaceBand, String>>,
    xdefect: Option<Result<XDefectResult, String>>,
}

impl<'a> Pipeline<'a> {
    fn fail(stage: Stage, message: impl Into<String>) -> CliError {
        CliError::Stage { stage, message: message.into() }
    }

    fn limit(&mut self) -> Result<(), CliError> {
        let lattice = self.config.lattice()?;
        let spectrum = limit_spectrum(&lattice, 8);
        let doc = json!({
            "params": self.config.echo(None),
            "levels": spectrum.entries,
            "dirichlet": dirichlet_spectrum(&lattice, 8),
            "near_degenerate": lattice.near_degenerate_levels(),
        });
        let path = self.out.join("limit.json");
        write_file(&path, &pretty(&doc), &mut self.outcome)
    }

    fn table(&mut self, eps: f64) -> Result<&BandTable, CliError> {
        let key = eps.to_bits();
        if !self.tables.contains_key(&key) {
            let field = self.config.bulk_field(eps)?;
            let echo = self.config.echo(Some(eps));
            let path = self.out.join(bands_file_name(eps));
            let cfg = self.config;
            let table = match read_band_csv(&path, &echo, field, cfg.target_h, cfg.phase_grid, cfg.bands) {
                Some(t) => {
                    log::info!("reusing {}", path.display());
                    t
                }
                None => {
                    log::info!("band sweep at eps = {eps}");
                    let t = cell_bands(&field, &cfg.discretization(), cfg.bands, cfg.phase_grid)
                        .map_err(|e| Self::fail(Stage::Bands, format!("eps = {eps}: {e}")))?;
                    write_file(&path, &band_table_csv(&t, &echo), &mut self.outcome)?;
                    t
                }
            };
            self.tables.insert(key, table);
        }
        Ok(&self.tables[&key])
    }

    fn bands(&mut self) -> Result<(), CliError> {
        for eps in self.config.eps.clone() {
            self.table(eps)?;
        }
        Ok(())
    }

    fn gaps(&mut self) -> Result<GapReport, CliError> {
        if let Some(g) = &self.gaps {
            return Ok(g.clone());
        }
        let mut by_eps = Vec::new();
        for eps in self.config.eps.clone() {
            let report = gap_detect(&[self.table(eps)?]);
            by_eps.push(json!({ "eps": eps, "bands": report.bands, "gaps": report.gaps }));
        }
        let main = gap_detect(&[self.table(self.config.defect_eps)?]);
        let doc = json!({
            "params": self.config.echo(None),
            "eps": self.config.defect_eps,
            "bands": main.bands,
            "gaps": main.gaps,
            "by_eps": by_eps,
        });
        let path = self.out.join("gaps.json");
        write_file(&path, &pretty(&doc), &mut self.outcome)?;
        self.gaps = Some(main.clone());
        Ok(main)
    }

    fn strip_level(&self) -> Result<f64, CliError> {
        let lattice = self.config.lattice()?;
        let levels = analytic_defect_levels(&lattice, &FieldVariant::Mirrored { h: self.config.h })
            .map_err(|e| Self::fail(Stage::Interface, e.to_string()))?;
        Ok(levels.iter().find(|l| l.label == "strip").map(|l| l.level).unwrap_or(f64::NAN))
    }

    fn interface_echo(&self) -> serde_json::Value {
        let mut echo = self.config.echo(Some(self.config.defect_eps));
        echo["columns_per_side"] = json!(self.config.columns_per_side);
        echo["zeta_count"] = json!(self.config.zeta_count);
        echo["truncation_recheck"] = json!(self.config.truncation_recheck);
        echo
    }

    fn interface(&mut self) -> Result<(), CliError> {
        if self.interface.is_some() {
            return Ok(());
        }
        let echo = self.interface_echo();
        let json_path = self.out.join("interface.json");
        if let Some(cached) = read_cached_json(&json_path, &echo) {
            if let Some(band) = cached.get("band").and_then(|b| serde_json::from_value(b.clone()).ok()) {
                self.interface = Some(Ok(band));
                return Ok(());
            }
            if let Some(err) = cached.get("error").and_then(|e| e.as_str()) {
                self.interface = Some(Err(err.to_string()));
                return Ok(());
            }
        }
        let target = self.strip_level()?;
        let gaps = self.gaps()?;
        let Some(gap) = gaps.gap_containing(target) else {
            let msg = format!("no open gap contains the strip level {target}");
            self.interface = Some(Err(msg.clone()));
            let doc = json!({ "params": echo, "error": msg });
            return write_file(&json_path, &pretty(&doc), &mut self.outcome);
        };
        let cfg = self.config;
        let result = interface_band(
            &cfg.strip_field()?,
            cfg.columns_per_side,
            &zeta_grid(cfg.zeta_count),
            &cfg.discretization(),
            gap,
            target,
            &LocalizationThresholds::default(),
            cfg.truncation_recheck,
        );
        let doc = match &result {
            Ok(band) => {
                let csv_path = self.out.join("interface.csv");
                let mut csv = Vec::new();
                band.write_csv(&mut csv, &serde_json::to_string(&echo).unwrap()).map_err(io_err(&csv_path))?;
                write_file(&csv_path, &String::from_utf8(csv).expect("utf8"), &mut self.outcome)?;
                json!({ "params": echo, "band": band })
            }
            Err(e @ WaveguideError::NoLocalizedMode { .. }) => json!({ "params": echo, "error": e.to_string() }),
            Err(e) => return Err(Self::fail(Stage::Interface, e.to_string())),
        };
        write_file(&json_path, &pretty(&doc), &mut self.outcome)?;
        self.interface = Some(result.map_err(|e| e.to_string()));
        Ok(())
    }

    fn xdefect(&mut self) -> Result<(), CliError> {
        if self.xdefect.is_some() {
            return Ok(());
        }
        let mut echo = self.config.echo(Some(self.config.defect_eps));
        echo["patch_cells"] = json!(self.config.patch_cells);
        echo["truncation_recheck"] = json!(self.config.truncation_recheck);
        let path = self.out.join("xdefect.json");
        if let Some(cached) = read_cached_json(&path, &echo) {
            if let Some(r) = cached.get("result").and_then(|b| serde_json::from_value(b.clone()).ok()) {
                self.xdefect = Some(Ok(r));
                return Ok(());
            }
            if let Some(err) = cached.get("error").and_then(|e| e.as_str()) {
                self.xdefect = Some(Err(err.to_string()));
                return Ok(());
            }
        }
        let cfg = self.config;
        let result = x_defect_eigenvalue(
            &cfg.crossing_field()?,
            cfg.patch_cells,
            &cfg.discretization(),
            &LocalizationThresholds::default(),
            cfg.truncation_recheck,
        );
        let doc = match &result {
            Ok(r) => json!({ "params": echo, "result": r }),
            Err(e @ WaveguideError::NoLocalizedMode { .. }) => json!({ "params": echo, "error": e.to_string() }),
            Err(e) => return Err(Self::fail(Stage::Xdefect, e.to_string())),
        };
        write_file(&path, &pretty(&doc), &mut self.outcome)?;
        self.xdefect = Some(result.map_err(|e| e.to_string()));
        Ok(())
    }

    fn verdict(&mut self, name: &str, pass: bool, detail: String) {
        self.outcome.verdicts.push(Verdict { name: name.into(), pass, detail });
    }

    fn verify(&mut self) -> Result<(), CliError> {
        let cfg = self.config;
        let lattice = cfg.lattice()?;
        let limit = limit_spectrum(&lattice, cfg.bands.max(4));

        if cfg.eps.len() >= 3 && cfg.contrast {
            let mut eps_sorted = cfg.eps.clone();
            eps_sorted.sort_by(|a, b| b.total_cmp(a));
            for n in [2usize, 3] {
                if n > cfg.bands {
                    continue;
                }
                let mut errors = Vec::new();
                for &eps in &eps_sorted {
                    errors.push((eps, self.table(eps)?.max_deviation(n, &limit)));
                }
                let (pass, detail) = match asymptotic_check(&errors, cfg.gamma) {
                    Ok(fit) => (fit.pass, format!("errors {errors:?}, slope {:.4}, required {:.4}", fit.slope, fit.required_slope)),
                    Err(e) => (false, e.to_string()),
                };
                self.verdict(&format!("band_{n}_converges_to_limit"), pass, detail);
            }
        }

        let gaps = self.gaps()?;
        let mu4 = limit.mu(4);
        let below = gaps.components_below(mu4);
        self.verdict(
            "gaps_below_mu4",
            below >= 3,
            format!("{below} merged components below {mu4:.4} at eps = {}", cfg.defect_eps),
        );

        let strip = self.strip_level()?;
        self.interface()?;
        let table = self.table(cfg.defect_eps)?.clone();
        match self.interface.clone().expect("interface stage ran") {
            Ok(band) => {
                let inside = band.interval[0] > band.gap[0] && band.interval[1] < band.gap[1];
                let slack = band.truncation_error.unwrap_or(0.0);
                self.verdict(
                    "interface_band_in_gap",
                    inside && band.gap_margin() > 10.0 * slack,
                    format!(
                        "band [{:.6}, {:.6}] in gap ({:.6}, {:.6}), margin {:.3e}, truncation {:.3e}",
                        band.interval[0], band.interval[1], band.gap[0], band.gap[1], band.gap_margin(), slack
                    ),
                );
                let dev = band.samples.iter().map(|s| (s.lambda - strip).abs()).fold(0.0, f64::max);
                self.verdict("interface_near_strip_level", dev <= 0.5, format!("max |lambda - {strip:.4}| = {dev:.4}"));
                let loc_ok = band
                    .samples
                    .iter()
                    .all(|s| s.far_fraction < 0.05 && s.loc_rate.is_none_or(|r| r > 0.2));
                self.verdict(
                    "interface_localized",
                    loc_ok,
                    format!(
                        "max far fraction {:.3e}",
                        band.samples.iter().map(|s| s.far_fraction).fold(0.0, f64::max)
                    ),
                );
                if let Some(e) = band.truncation_error {
                    self.verdict(
                        "interface_truncation",
                        e <= band.truncation_limit(),
                        format!("|L(N) - L(N+2)| = {e:.3e}, limit {:.3e}", band.truncation_limit()),
                    );
                }
                let report = strip_bulk_consistency(&band.spectra, Some(&band.tracked), &table, band.gap[1]);
                self.verdict(
                    "strip_bulk_consistency",
                    report.violations.is_empty(),
                    format!("{} checked, violations {:?}", report.checked, report.violations),
                );
            }
            Err(msg) => self.verdict("interface_band_in_gap", false, msg),
        }

        self.xdefect()?;
        match self.xdefect.clone().expect("xdefect stage ran") {
            Ok(r) => {
                let inside = r.lambda > r.window[0] && r.lambda < r.window[1];
                self.verdict(
                    "crossing_eigenvalue",
                    inside && (r.lambda - r.target).abs() <= 0.6,
                    format!("lambda {:.6}, target {:.4}, window ({:.4}, {:.4})", r.lambda, r.target, r.window[0], r.window[1]),
                );
            }
            Err(msg) => self.verdict("crossing_eigenvalue", false, msg),
        }

        let doc = json!({
            "params": cfg.echo(None),
            "gap": gaps.gap_containing(strip),
            "strip_level": strip,
            "interface_interval": self.interface.as_ref().and_then(|r| r.as_ref().ok()).map(|b| b.interval),
            "crossing_eigenvalue": self.xdefect.as_ref().and_then(|r| r.as_ref().ok()).map(|r| r.lambda),
            "verdicts": self.outcome.verdicts,
            "notes": [
                "Defect levels use the half-length convention (pi^2/4)(l + h)^-2 for every enlarged cell; the crossing window is checked in that convention only."
            ],
        });
        let path = self.out.join("summary.json");
        write_file(&path, &pretty(&doc), &mut self.outcome)?;

        let mut levels: Vec<(String, f64)> =
            (1..=4.min(limit.entries.len())).map(|n| (format!("mu{n}"), limit.mu(n))).collect();
        levels.push(("strip".into(), strip));
        let interface = self.interface.as_ref().and_then(|r| r.as_ref().ok());
        let svg = emit_band_diagram(&[&table], Some(&gaps), interface, &levels);
        let path = self.out.join("diagram.svg");
        write_file(&path, &svg, &mut self.outcome)
    }
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    s
}

/// Runs `stages` in dependency order, writing artifacts under `out`.
pub fn run_pipeline(config: &RunConfig, stages: &[Stage], out: &Path) -> Result<PipelineOutcome, CliError> {
    config.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut p = Pipeline {
        config,
        out: out.to_path_buf(),
        outcome: PipelineOutcome::default(),
        tables: BTreeMap::new(),
        gaps: None,
        interface: None,
        xdefect: None,
    };
    let mut ordered = stages.to_vec();
    ordered.sort();
    ordered.dedup();
    for stage in ordered {
        log::info!("stage {stage}");
        match stage {
            Stage::Limit => p.limit()?,
            Stage::Bands => p.bands()?,
            Stage::Gaps => {
                p.gaps()?;
            }
            Stage::Interface => {
                p.interface()?;
                if let Some(Err(msg)) = &p.interface {
                    let msg = msg.clone();
                    p.verdict("interface_band_in_gap", false, msg);
                }
            }
            Stage::Xdefect => {
                p.xdefect()?;
                if let Some(Err(msg)) = &p.xdefect {
                    let msg = msg.clone();
                    p.verdict("crossing_eigenvalue", false, msg);
                }
            }
            Stage::Verify => {
                p.outcome.verdicts.retain(|_| false);
                p.verify()?
            }
        }
    }
    Ok(p.outcome)
}
