use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tumorstroma::experiments::{run_regime_observed, sweep_param};
use tumorstroma::io::{self, ResolvedRun, RunConfig};
use tumorstroma::kinetics::{jacobian_reduced, JacobianSR};
use tumorstroma::pde::Coupling;
use tumorstroma::ModelParams;
use tumorstroma::spectral::{classify_regime, Mobility2x2, QuasiStaticFeedback, ScanConfig};

#[derive(Parser)]
#[command(name = "tumorstroma", version, about = "Tumor-stroma reaction-diffusion-taxis simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file (sectioned `key = value` format).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `[output] dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed of the initial perturbation; overrides `[seed] seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Scenario tag, e.g. RegimeI_Base; overrides the config.
    #[arg(long)]
    scenario: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write metrics and snapshots.
    Run(Common),
    /// Linear-stability classification of a (J, M) pair.
    Classify(ClassifyArgs),
    /// Run a scenario over a list of parameter values.
    Sweep(SweepArgs),
    /// Parse and resolve a config without running anything.
    Validate(Common),
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Reduction {
    /// Kinetic Jacobian with plain diffusion, `M = diag(d_S, d_R)`.
    Base,
    /// Quasi-static signal closure of the feedback model.
    Feedback,
}

#[derive(Args)]
struct ClassifyArgs {
    #[command(flatten)]
    common: Common,
    /// Explicit Jacobian entries `a,b,c,d` (row-major).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    jacobian: Option<Vec<f64>>,
    /// Explicit mobility entries `m11,m12,m21,m22`; defaults to `diag(d_S, d_R)`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    mobility: Option<Vec<f64>>,
    /// Model-derived reduction when no explicit Jacobian is given.
    #[arg(long, value_enum)]
    reduction: Option<Reduction>,
    #[arg(long)]
    mu_max: Option<f64>,
    #[arg(long, default_value_t = tumorstroma::spectral::DEFAULT_SAMPLES)]
    samples: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Parameter to sweep, by its config name (e.g. chi_S_prime).
    #[arg(long, default_value = "chi_S_prime")]
    param: String,
    /// Comma-separated monotone list of values.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    values: Vec<f64>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long)]
    jobs: Option<usize>,
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => io::read_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(tag) = &common.scenario {
        cfg.scenario = Some(tag.parse()?);
    }
    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
    }
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn out_dir(run: &ResolvedRun) -> PathBuf {
    run.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn cmd_run(common: &Common) -> Result<ExitCode> {
    let run = load(common)?.resolve()?;
    let dir = out_dir(&run);
    io::ensure_dir(&dir)?;

    let mut write_error = None;
    let result = run_regime_observed(
        run.scenario,
        &run.params,
        &run.grid,
        &run.scheme,
        &run.seed,
        run.snapshot_every,
        |step, state| {
            if write_error.is_some() {
                return;
            }
            for (name, field) in state.fields() {
                if let Err(e) = io::write_snapshot(&dir, name, step, state.t, field) {
                    write_error = Some(e);
                    return;
                }
            }
        },
    )?;
    if let Some(e) = write_error {
        return Err(e.into());
    }
    io::write_metrics_csv(&dir.join("metrics.csv"), &result.metrics)?;
    let mut summary = result.verdict.summary();
    if let Some(t) = result.metrics.breakdown_time {
        summary.push_str(&format!("breakdown_time = {t}\n"));
    }
    std::fs::write(dir.join("verdict.txt"), &summary)
        .with_context(|| format!("writing {}", dir.join("verdict.txt").display()))?;
    print!("{summary}");
    Ok(ExitCode::from(result.verdict.exit_code() as u8))
}

fn matrix_arg(name: &str, v: &[f64]) -> Result<[f64; 4]> {
    match v {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        _ => bail!("--{name} needs exactly 4 comma-separated values, got {}", v.len()),
    }
}

fn mobility_or_diffusion(args: &ClassifyArgs, params: &ModelParams) -> Result<Mobility2x2> {
    Ok(match &args.mobility {
        Some(m) => {
            let [m11, m12, m21, m22] = matrix_arg("mobility", m)?;
            Mobility2x2::new(m11, m12, m21, m22)
        }
        None => Mobility2x2::diagonal(params.d_s, params.d_r),
    })
}

fn cmd_classify(args: &ClassifyArgs) -> Result<ExitCode> {
    let cfg = load(&args.common)?;
    let params = cfg.params.validated()?;
    let scan = ScanConfig {
        mu_max: args.mu_max,
        n_samples: args.samples,
    };

    let (jacobian, mobility, thresholds): (JacobianSR, Mobility2x2, Option<(f64, f64)>) =
        if let Some(j) = &args.jacobian {
            let [a, b, c, d] = matrix_arg("jacobian", j)?;
            (JacobianSR::from_entries(a, b, c, d), mobility_or_diffusion(args, &params)?, None)
        } else {
            let reduction = args.reduction.unwrap_or(match cfg.scenario.map(|s| s.coupling()) {
                Some(Coupling::Feedback) => Reduction::Feedback,
                _ => Reduction::Base,
            });
            match reduction {
                Reduction::Base => {
                    (jacobian_reduced(&params)?, mobility_or_diffusion(args, &params)?, None)
                }
                Reduction::Feedback => {
                    let q = QuasiStaticFeedback::from_params(&params)?;
                    (q.jacobian, q.mobility, Some(q.thresholds))
                }
            }
        };

    let report = classify_regime(&jacobian, &mobility, scan)?;

    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    io::ensure_dir(&dir)?;
    io::write_dispersion_csv(&dir.join("dispersion.csv"), &report)?;
    let mut text = format!(
        "J = [[{}, {}], [{}, {}]]\nM = [[{}, {}], [{}, {}]]\n",
        jacobian.a, jacobian.b, jacobian.c, jacobian.d, mobility.m11, mobility.m12, mobility.m21, mobility.m22
    );
    text.push_str(&io::dispersion_summary(&report, thresholds));
    write_text(&dir.join("report.txt"), &text)?;
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_sweep(args: &SweepArgs) -> Result<ExitCode> {
    if args.values.is_empty() {
        bail!("--values needs at least one value");
    }
    let run = load(&args.common)?.resolve()?;
    if run.params.get(&args.param).is_none() {
        bail!("'{}' is not a sweepable parameter", args.param);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.unwrap_or(0))
        .build()?;
    let rows = pool.install(|| {
        sweep_param(
            run.scenario,
            &args.param,
            &args.values,
            &run.params,
            &run.grid,
            &run.scheme,
            &run.seed,
        )
    })?;
    let dir = out_dir(&run);
    io::ensure_dir(&dir)?;
    io::write_sweep_csv(&dir.join("sweep.csv"), &args.param, &rows)?;
    let mut buf = Vec::new();
    io::write_sweep(&mut buf, &args.param, &rows)?;
    print!("{}", String::from_utf8_lossy(&buf));
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(common: &Common) -> Result<ExitCode> {
    let run = load(common)?.resolve()?;
    println!("scenario = {}", run.scenario);
    println!(
        "grid = {} x {}, h = {}, dt = {}, t_final = {} ({} steps)",
        run.grid.nx,
        run.grid.ny,
        run.grid.h,
        run.grid.dt,
        run.grid.t_final,
        run.grid.n_steps()
    );
    println!(
        "scheme = {:?}, taxis = {}, alpha_c = {}",
        run.scheme.diffusion_solver, run.scheme.taxis_mode, run.scheme.alpha_c
    );
    println!("seed = {}, epsilon = {}", run.seed.seed, run.seed.epsilon);
    for (name, _) in tumorstroma::model::PARAM_KEYS {
        println!("{name} = {}", run.params.get(name).unwrap_or(f64::NAN));
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    // exit code 2 is reserved for the expected breakdown verdict
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Run(c) => cmd_run(c),
        Command::Classify(a) => cmd_classify(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Validate(c) => cmd_validate(c),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use tumorstroma::experiments::ScenarioKind;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn scenario_flag_overrides_config() {
        let common = Common {
            config: None,
            out: Some(PathBuf::from("x")),
            seed: Some(5),
            scenario: Some("RegimeII_FeedbackSaturated".into()),
        };
        let cfg = load(&common).unwrap();
        assert_eq!(cfg.scenario, Some(ScenarioKind::RegimeIIFeedbackSaturated));
        assert_eq!(cfg.seed, Some(5));
        assert_eq!(cfg.out_dir, Some(PathBuf::from("x")));
    }
}
