//! Run configuration files and all on-disk artifacts: metrics and field
//! CSVs, plain-PGM heatmaps with scale sidecars, dispersion and sweep tables.
//!
//! # Config format
//!
//! Line based, UTF-8. `# comment` runs to end of line. A `[section]` header
//! opens one of `model`, `grid`, `scheme`, `seed`, `output`; `key = value`
//! lines before the first header may only set `scenario`.
//!
//! ```text
//! scenario = RegimeII_FeedbackSaturated
//!
//! [model]
//! chi_S_prime = 0.5    # any parameter by its external name
//!
//! [grid]
//! n = 51               # or nx / ny separately; h defaults to 1/(nx-1)
//! dt = 0.01
//! t_final = 50
//!
//! [scheme]
//! diffusion_solver = spectral-cosine   # or iterative
//! iterative_tolerance = 1e-10
//! taxis_mode = saturated               # none | linear | saturated
//! truncate_negative = true
//! exact_stroma = false
//! breakdown_factor = 1e6
//!
//! [seed]
//! seed = 20240611
//! epsilon = 1e-3
//!
//! [output]
//! dir = out
//! snapshot_every = 250
//! ```
//!
//! Unknown sections or keys, malformed values and invalid parameters are
//! rejected with the offending line number.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiments::{MetricsSeries, ScenarioKind, SeedSpec, SweepRow};
use crate::model::{Field2D, ModelParams, PARAM_KEYS};
use crate::pde::{DiffusionSolver, GridSpec, SchemeConfig, TaxisMode};
use crate::spectral::DispersionReport;

/// Parsed config document; scenario-dependent defaults are filled in by
/// [`RunConfig::resolve`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub scenario: Option<ScenarioKind>,
    pub params: ModelParams,
    pub nx: Option<usize>,
    pub ny: Option<usize>,
    pub h: Option<f64>,
    pub dt: Option<f64>,
    pub t_final: Option<f64>,
    pub diffusion_solver: Option<DiffusionSolver>,
    pub iterative_tolerance: Option<f64>,
    pub max_iterations: Option<usize>,
    pub taxis_mode: Option<TaxisMode>,
    pub truncate_negative: Option<bool>,
    pub exact_stroma: Option<bool>,
    pub breakdown_factor: Option<f64>,
    pub seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub out_dir: Option<PathBuf>,
    pub snapshot_every: Option<usize>,
}

/// Fully specified run.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedRun {
    pub scenario: ScenarioKind,
    pub params: ModelParams,
    pub grid: GridSpec,
    pub scheme: SchemeConfig,
    pub seed: SeedSpec,
    pub out_dir: Option<PathBuf>,
    pub snapshot_every: usize,
}

impl RunConfig {
    pub fn resolve(&self) -> Result<ResolvedRun> {
        let scenario = self
            .scenario
            .ok_or_else(|| Error::Config("no scenario given (set `scenario = ...` or pass --scenario)".into()))?;
        let params = self.params.validated()?;
        let nx = self.nx.unwrap_or(51);
        let ny = self.ny.unwrap_or(nx);
        let grid = GridSpec {
            nx,
            ny,
            h: self.h.unwrap_or(1.0 / (nx.max(2) - 1) as f64),
            dt: self.dt.unwrap_or(1e-2),
            t_final: self.t_final.unwrap_or(scenario.t_final()),
        };
        grid.validate()?;
        let base = scenario.default_scheme();
        let scheme = SchemeConfig {
            diffusion_solver: self.diffusion_solver.unwrap_or(base.diffusion_solver),
            iterative_tolerance: self.iterative_tolerance.unwrap_or(base.iterative_tolerance),
            max_iterations: self.max_iterations.unwrap_or(base.max_iterations),
            taxis_mode: self.taxis_mode.unwrap_or(base.taxis_mode),
            alpha_c: params.alpha_c,
            truncate_negative: self.truncate_negative.unwrap_or(base.truncate_negative),
            exact_stroma: self.exact_stroma.unwrap_or(base.exact_stroma),
            breakdown_factor: self.breakdown_factor.unwrap_or(base.breakdown_factor),
        };
        scheme.validate()?;
        let seed = SeedSpec {
            seed: self.seed.unwrap_or(SeedSpec::default().seed),
            epsilon: self.epsilon.unwrap_or(SeedSpec::default().epsilon),
        };
        if !(seed.epsilon >= 0.0) || !seed.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", seed.epsilon)));
        }
        Ok(ResolvedRun {
            scenario,
            params,
            grid,
            scheme,
            seed,
            out_dir: self.out_dir.clone(),
            snapshot_every: self.snapshot_every.unwrap_or(scenario.snapshot_every()).max(1),
        })
    }
}

fn line_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {msg}"))
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| line_err(line, format!("malformed value for {key}: '{v}'")))
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(line_err(line, format!("malformed boolean for {key}: '{v}'"))),
    }
}

pub fn parse_taxis_mode(v: &str) -> Option<TaxisMode> {
    match v {
        "none" => Some(TaxisMode::None),
        "linear" => Some(TaxisMode::Linear),
        "saturated" => Some(TaxisMode::Saturated),
        _ => None,
    }
}

pub fn parse_solver(v: &str) -> Option<DiffusionSolver> {
    match v {
        "spectral-cosine" | "spectral" => Some(DiffusionSolver::SpectralCosine),
        "iterative" => Some(DiffusionSolver::Iterative),
        _ => None,
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut section: Option<String> = None;
    let mut model_lines: HashMap<&'static str, usize> = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| line_err(line, "unterminated section header"))?
                .trim();
            match name {
                "model" | "grid" | "scheme" | "seed" | "output" => section = Some(name.to_string()),
                _ => return Err(line_err(line, format!("unknown section [{name}]"))),
            }
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| line_err(line, format!("expected `key = value`, got '{content}'")))?;
        let (key, value) = (key.trim(), value.trim());
        let unknown = || line_err(line, format!("unknown key '{key}'"));
        match section.as_deref() {
            None => match key {
                "scenario" => cfg.scenario = Some(value.parse().map_err(|e: Error| line_err(line, e))?),
                _ => return Err(unknown()),
            },
            Some("model") => {
                let name = PARAM_KEYS
                    .iter()
                    .map(|(n, _)| *n)
                    .find(|n| *n == key)
                    .ok_or_else(unknown)?;
                let v: f64 = parse_num(line, key, value)?;
                cfg.params.set(name, v);
                model_lines.insert(name, line);
            }
            Some("grid") => match key {
                "n" => {
                    let n = parse_num(line, key, value)?;
                    cfg.nx = Some(n);
                    cfg.ny = Some(n);
                }
                "nx" => cfg.nx = Some(parse_num(line, key, value)?),
                "ny" => cfg.ny = Some(parse_num(line, key, value)?),
                "h" => cfg.h = Some(parse_num(line, key, value)?),
                "dt" => cfg.dt = Some(parse_num(line, key, value)?),
                "t_final" => cfg.t_final = Some(parse_num(line, key, value)?),
                _ => return Err(unknown()),
            },
            Some("scheme") => match key {
                "diffusion_solver" => {
                    cfg.diffusion_solver = Some(
                        parse_solver(value)
                            .ok_or_else(|| line_err(line, format!("unknown solver '{value}'")))?,
                    )
                }
                "iterative_tolerance" => cfg.iterative_tolerance = Some(parse_num(line, key, value)?),
                "max_iterations" => cfg.max_iterations = Some(parse_num(line, key, value)?),
                "taxis_mode" => {
                    cfg.taxis_mode = Some(
                        parse_taxis_mode(value)
                            .ok_or_else(|| line_err(line, format!("unknown taxis mode '{value}'")))?,
                    )
                }
                "truncate_negative" => cfg.truncate_negative = Some(parse_bool(line, key, value)?),
                "exact_stroma" => cfg.exact_stroma = Some(parse_bool(line, key, value)?),
                "breakdown_factor" => cfg.breakdown_factor = Some(parse_num(line, key, value)?),
                _ => return Err(unknown()),
            },
            Some("seed") => match key {
                "seed" => cfg.seed = Some(parse_num(line, key, value)?),
                "epsilon" => cfg.epsilon = Some(parse_num(line, key, value)?),
                _ => return Err(unknown()),
            },
            Some("output") => match key {
                "dir" => cfg.out_dir = Some(PathBuf::from(value)),
                "snapshot_every" => cfg.snapshot_every = Some(parse_num(line, key, value)?),
                _ => return Err(unknown()),
            },
            Some(_) => unreachable!("section names are checked on entry"),
        }
    }
    if let Some(v) = cfg.params.validate().into_iter().next() {
        let at = model_lines
            .get(v.field)
            .map(|l| format!("line {l}: "))
            .unwrap_or_default();
        return Err(Error::Config(format!("{at}invalid parameter: {}", v.constraint)));
    }
    Ok(cfg)
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Config(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_err(path, e))
}

fn finish(path: &Path, mut w: impl Write) -> Result<()> {
    w.flush().map_err(|e| io_err(path, e))
}

/// Full-precision, locale-independent float formatting (17 significant digits).
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

pub const METRICS_HEADER: &str = "t,E_S,E_R,E_I,spatial_std_S,max_S,max_c,conservation_error";

pub fn write_metrics(w: &mut impl Write, m: &MetricsSeries) -> std::io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for k in 0..m.len() {
        let row = [
            m.times[k],
            m.e_s[k],
            m.e_r[k],
            m.e_i[k],
            m.spatial_std_s[k],
            m.max_s[k],
            m.max_c[k],
            m.conservation_error[k],
        ];
        let cells: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

pub fn write_metrics_csv(path: &Path, m: &MetricsSeries) -> Result<()> {
    let mut w = create(path)?;
    write_metrics(&mut w, m).map_err(|e| io_err(path, e))?;
    finish(path, w)
}

/// One row per `i` (x index), `ny` comma-separated values.
pub fn write_field(w: &mut impl Write, f: &Field2D) -> std::io::Result<()> {
    for i in 0..f.nx() {
        let row: Vec<String> = (0..f.ny()).map(|j| fmt_f64(f.at(i, j))).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Inverse of [`write_field`]; the grid spacing is taken as `h`.
pub fn parse_field(text: &str, h: f64) -> Result<Field2D> {
    let mut values = Vec::new();
    let mut nx = 0;
    let mut ny = None;
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|_| line_err(idx + 1, format!("malformed value '{c}'")))
            })
            .collect::<Result<_>>()?;
        match ny {
            None => ny = Some(row.len()),
            Some(n) if n != row.len() => {
                return Err(line_err(idx + 1, format!("expected {n} values, got {}", row.len())))
            }
            _ => {}
        }
        values.extend(row);
        nx += 1;
    }
    Field2D::with_spacing(nx, ny.unwrap_or(0), h, values)
}

pub fn snapshot_stem(name: &str, step: usize) -> String {
    format!("field_{name}_t{step}")
}

/// Plain PGM (`P2`, maxval 255) of `f`, min-max scaled; returns the bounds.
/// Rows are the `i` index, columns the `j` index.
pub fn write_pgm(w: &mut impl Write, f: &Field2D) -> std::io::Result<(f64, f64)> {
    let (lo, hi) = (f.min(), f.max());
    let span = hi - lo;
    writeln!(w, "P2")?;
    writeln!(w, "{} {}", f.ny(), f.nx())?;
    writeln!(w, "255")?;
    for i in 0..f.nx() {
        let mut line = String::new();
        for j in 0..f.ny() {
            let v = f.at(i, j);
            let level = if span > 0.0 && span.is_finite() && v.is_finite() {
                ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            };
            let cell = level.to_string();
            // plain PGM lines must stay under 70 characters
            if !line.is_empty() && line.len() + 1 + cell.len() > 69 {
                writeln!(w, "{line}")?;
                line.clear();
            }
            if !line.is_empty() {
                line.push(' ');
            }
            line.push_str(&cell);
        }
        writeln!(w, "{line}")?;
    }
    Ok((lo, hi))
}

/// Writes `<stem>.csv`, `<stem>.pgm` and `<stem>.scale.txt` into `dir`.
pub fn write_snapshot(dir: &Path, name: &str, step: usize, t: f64, f: &Field2D) -> Result<()> {
    let stem = snapshot_stem(name, step);
    let csv = dir.join(format!("{stem}.csv"));
    let mut w = create(&csv)?;
    write_field(&mut w, f).map_err(|e| io_err(&csv, e))?;
    finish(&csv, w)?;

    let pgm = dir.join(format!("{stem}.pgm"));
    let mut w = create(&pgm)?;
    let (lo, hi) = write_pgm(&mut w, f).map_err(|e| io_err(&pgm, e))?;
    finish(&pgm, w)?;

    let side = dir.join(format!("{stem}.scale.txt"));
    let text = format!(
        "field = {name}\nstep = {step}\nt = {}\nmin = {}\nmax = {}\n# gray level g maps to min + g / 255 * (max - min)\n",
        fmt_f64(t),
        fmt_f64(lo),
        fmt_f64(hi)
    );
    fs::write(&side, text).map_err(|e| io_err(&side, e))
}

pub fn write_dispersion(w: &mut impl Write, r: &DispersionReport) -> std::io::Result<()> {
    writeln!(w, "mu,growth,trA,detA")?;
    for k in 0..r.mu_grid.len() {
        writeln!(
            w,
            "{},{},{},{}",
            fmt_f64(r.mu_grid[k]),
            fmt_f64(r.growth_rates[k]),
            fmt_f64(r.trace_curve[k]),
            fmt_f64(r.det_curve[k])
        )?;
    }
    Ok(())
}

pub fn write_dispersion_csv(path: &Path, r: &DispersionReport) -> Result<()> {
    let mut w = create(path)?;
    write_dispersion(&mut w, r).map_err(|e| io_err(path, e))?;
    finish(path, w)
}

fn fmt_threshold(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6e}")
    } else {
        "none (no self-coupling)".into()
    }
}

/// Human-readable classification summary.
pub fn dispersion_summary(r: &DispersionReport, thresholds: Option<(f64, f64)>) -> String {
    let (lo, hi) = r.parabolicity.sym_eigenvalues;
    let mut out = String::new();
    out.push_str(&format!("regime: {}\n", r.regime));
    out.push_str(&format!("kinetically stable: {}\n", r.kinetically_stable));
    out.push_str(&format!("sym(M) eigenvalues: {lo:.6e}, {hi:.6e}\n"));
    out.push_str(&format!(
        "strongly parabolic: {}{}\n",
        r.parabolicity.holds,
        if r.parabolicity.marginal {
            " (marginal: smallest eigenvalue within 1e-12 of zero)"
        } else {
            ""
        }
    ));
    match r.unstable_band {
        Some((a, b)) if b.is_finite() => out.push_str(&format!("unstable band: mu in ({a:.6e}, {b:.6e})\n")),
        Some((a, _)) => out.push_str(&format!("unstable band: mu > {a:.6e} (up to the end of the scan)\n")),
        None => out.push_str("unstable band: none\n"),
    }
    out.push_str(&format!(
        "max growth rate on scan: {:.6e} over mu in [0, {:.6e}] ({} samples)\n",
        r.max_growth(),
        r.mu_max(),
        r.mu_grid.len()
    ));
    out.push_str(&format!("growth decays beyond band: {}\n", r.tail_decays));
    if let Some((cs, cr)) = thresholds {
        out.push_str(&format!("taxis threshold chi_S^c: {}\n", fmt_threshold(cs)));
        out.push_str(&format!("taxis threshold chi_R^c: {}\n", fmt_threshold(cr)));
    }
    out
}

pub fn write_sweep(w: &mut impl Write, key: &str, rows: &[SweepRow]) -> std::io::Result<()> {
    writeln!(w, "{key},outcome,regime,agreement")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", fmt_f64(r.value), r.outcome, r.regime, r.agreement)?;
    }
    Ok(())
}

pub fn write_sweep_csv(path: &Path, key: &str, rows: &[SweepRow]) -> Result<()> {
    let mut w = create(path)?;
    write_sweep(&mut w, key, rows).map_err(|e| io_err(path, e))?;
    finish(path, w)
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_needs_scenario() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.params, ModelParams::default());
        assert!(matches!(cfg.resolve(), Err(Error::Config(_))));
    }

    #[test]
    fn model_override() {
        let cfg = parse_config("[model]\nchi_S_prime = 0.25\n").unwrap();
        assert_eq!(cfg.params.chi_s_prime, 0.25);
        assert_eq!(
            ModelParams {
                chi_s_prime: 0.5,
                ..cfg.params
            },
            ModelParams::default()
        );
    }

    #[test]
    fn invalid_parameter_cites_line_and_rule() {
        let err = parse_config("# header\n[model]\nK = -1\n").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("K > 0"), "{err}");
    }

    #[test]
    fn unknown_keys_and_sections() {
        for (text, line) in [
            ("[model]\nfoo = 1\n", "line 2"),
            ("[colors]\n", "line 1"),
            ("[grid]\n\nnx = abc\n", "line 3"),
            ("nx = 3\n", "line 1"),
            ("[scheme]\ntaxis_mode = quadratic\n", "line 2"),
            ("[seed]\nseed 5\n", "line 2"),
        ] {
            let err = parse_config(text).unwrap_err().to_string();
            assert!(err.contains(line), "{text:?} -> {err}");
        }
    }

    #[test]
    fn full_config_resolves() {
        let text = "scenario = RegimeII_FeedbackSaturated  # pattern run\n\
                    [grid]\nn = 21\ndt = 0.005\n\
                    [scheme]\ndiffusion_solver = iterative\niterative_tolerance = 1e-11\n\
                    [seed]\nseed = 7\nepsilon = 2e-3\n\
                    [output]\ndir = out/x\nsnapshot_every = 10\n";
        let run = parse_config(text).unwrap().resolve().unwrap();
        assert_eq!(run.scenario, ScenarioKind::RegimeIIFeedbackSaturated);
        assert_eq!(run.grid.nx, 21);
        assert_eq!(run.grid.h, 0.05);
        assert_eq!(run.grid.t_final, 50.0);
        assert_eq!(run.scheme.taxis_mode, TaxisMode::Saturated);
        assert_eq!(run.scheme.diffusion_solver, DiffusionSolver::Iterative);
        assert_eq!(run.seed, SeedSpec::new(7, 2e-3));
        assert_eq!(run.snapshot_every, 10);
        assert_eq!(run.out_dir, Some(PathBuf::from("out/x")));
    }

    #[test]
    fn loose_iterative_tolerance_rejected() {
        let cfg = parse_config(
            "scenario = RegimeI_Base\n[scheme]\ndiffusion_solver = iterative\niterative_tolerance = 1e-6\n",
        )
        .unwrap();
        assert!(cfg.resolve().is_err());
    }

    #[test]
    fn field_csv_round_trips() {
        let f = Field2D::from_fn(7, 7, |x, y| (x * 3.1).sin() / 7.0 + y * 1e-9 + 1.0 / 3.0).unwrap();
        let mut buf = Vec::new();
        write_field(&mut buf, &f).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(!text.contains('\r'));
        let g = parse_field(&text, f.h()).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn pgm_is_plain_and_scaled() {
        let f = Field2D::from_fn(40, 40, |x, y| x + y).unwrap();
        let mut buf = Vec::new();
        let (lo, hi) = write_pgm(&mut buf, &f).unwrap();
        assert_eq!((lo, hi), (0.0, 2.0));
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("P2"));
        assert_eq!(lines.next(), Some("40 40"));
        assert_eq!(lines.next(), Some("255"));
        let levels: Vec<u32> = lines
            .inspect(|l| assert!(l.len() < 70))
            .flat_map(|l| l.split_whitespace().map(|v| v.parse::<u32>().unwrap()).collect::<Vec<_>>())
            .collect();
        assert_eq!(levels.len(), 1600);
        assert_eq!(levels[0], 0);
        assert_eq!(levels[1599], 255);
    }

    #[test]
    fn metrics_header_and_rows() {
        let mut m = MetricsSeries::default();
        m.times.push(0.0);
        for v in [
            &mut m.e_s,
            &mut m.e_r,
            &mut m.e_i,
            &mut m.spatial_std_s,
            &mut m.max_s,
            &mut m.max_c,
            &mut m.conservation_error,
        ] {
            v.push(0.5);
        }
        let mut buf = Vec::new();
        write_metrics(&mut buf, &m).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(METRICS_HEADER));
        assert_eq!(lines.next().unwrap().split(',').count(), 8);
    }
}
