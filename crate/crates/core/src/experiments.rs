//! Scenario definitions, seeded initial data, deviation metrics and
//! regime verdicts.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kinetics::{coexistence_equilibrium, jacobian_reduced};
use crate::model::{Field2D, HybridState, ModelParams};
use crate::pde::{run_simulation, Coupling, GridSpec, SchemeConfig, TaxisMode};
use crate::spectral::{classify_regime, Mobility2x2, QuasiStaticFeedback, Regime, ScanConfig};

pub const DEFAULT_SEED: u64 = 20240611;
pub const DEFAULT_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScenarioKind {
    RegimeIBase,
    RegimeIprimeUnidirectional,
    RegimeIIFeedbackSaturated,
    RegimeIIIFeedbackLinear,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::RegimeIBase,
        ScenarioKind::RegimeIprimeUnidirectional,
        ScenarioKind::RegimeIIFeedbackSaturated,
        ScenarioKind::RegimeIIIFeedbackLinear,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            ScenarioKind::RegimeIBase => "RegimeI_Base",
            ScenarioKind::RegimeIprimeUnidirectional => "RegimeIprime_Unidirectional",
            ScenarioKind::RegimeIIFeedbackSaturated => "RegimeII_FeedbackSaturated",
            ScenarioKind::RegimeIIIFeedbackLinear => "RegimeIII_FeedbackLinear",
        }
    }

    pub fn t_final(&self) -> f64 {
        match self {
            ScenarioKind::RegimeIBase | ScenarioKind::RegimeIprimeUnidirectional => 5.0,
            _ => 50.0,
        }
    }

    pub fn coupling(&self) -> Coupling {
        match self {
            ScenarioKind::RegimeIBase => Coupling::Base,
            ScenarioKind::RegimeIprimeUnidirectional => Coupling::Unidirectional,
            _ => Coupling::Feedback,
        }
    }

    pub fn taxis_mode(&self) -> TaxisMode {
        match self {
            ScenarioKind::RegimeIBase => TaxisMode::None,
            ScenarioKind::RegimeIIFeedbackSaturated => TaxisMode::Saturated,
            _ => TaxisMode::Linear,
        }
    }

    /// Default grid: 51 x 51 on the unit square, `dt = 1e-2`.
    pub fn default_grid(&self) -> GridSpec {
        GridSpec::unit_square(51, 1e-2, self.t_final())
    }

    pub fn default_scheme(&self) -> SchemeConfig {
        SchemeConfig {
            taxis_mode: self.taxis_mode(),
            alpha_c: 100.0,
            ..Default::default()
        }
    }

    /// Snapshot cadence in steps: 50 for the short horizon, 250 for the long.
    pub fn snapshot_every(&self) -> usize {
        if self.t_final() <= 5.0 {
            50
        } else {
            250
        }
    }

    pub fn check_scheme(&self, cfg: &SchemeConfig) -> Result<()> {
        let want = self.taxis_mode();
        if cfg.taxis_mode != want {
            return Err(Error::Config(format!(
                "{} requires taxis_mode = {want}, got {}",
                self.tag(),
                cfg.taxis_mode
            )));
        }
        Ok(())
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                let tags: Vec<_> = Self::ALL.iter().map(|k| k.tag()).collect();
                Error::Config(format!("unknown scenario '{s}', expected one of {}", tags.join(", ")))
            })
    }
}

/// splitmix64 stream.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform on `[0, 1)` from the top 53 bits.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[-1, 1)`.
    pub fn next_symmetric(&mut self) -> f64 {
        2.0 * self.next_unit() - 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedSpec {
    pub seed: u64,
    pub epsilon: f64,
}

impl Default for SeedSpec {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl SeedSpec {
    pub fn new(seed: u64, epsilon: f64) -> Self {
        Self { seed, epsilon }
    }
}

/// Homogeneous equilibrium targeted by a scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Equilibrium {
    pub s: f64,
    pub r: f64,
    pub i: f64,
    pub p: f64,
    pub fa: f64,
    pub c: Option<f64>,
}

impl Equilibrium {
    pub fn for_scenario(scenario: ScenarioKind, p: &ModelParams) -> Result<Self> {
        let eq = coexistence_equilibrium(p)?;
        let c = match scenario.coupling() {
            Coupling::Base => None,
            Coupling::Unidirectional => Some(0.0),
            Coupling::Feedback => {
                if !(p.rho_c > 0.0) {
                    return Err(Error::Domain(format!("rho_c must be > 0, got {}", p.rho_c)));
                }
                Some(p.kappa_c / p.rho_c * eq.s)
            }
        };
        Ok(Self {
            s: eq.s,
            r: eq.r,
            i: 0.0,
            p: p.p_total,
            fa: 0.0,
            c,
        })
    }
}

/// Equilibrium plus i.i.d. `epsilon * U(-1, 1)` noise on every diffusing
/// component. Draws fill `S`, then `R`, then `I`, then `c`, each in
/// row-major node order. Negative values are truncated.
pub fn initial_condition(
    scenario: ScenarioKind,
    p: &ModelParams,
    grid: &GridSpec,
    seed: &SeedSpec,
) -> Result<HybridState> {
    grid.validate()?;
    let eq = Equilibrium::for_scenario(scenario, p)?;
    let mut rng = SplitMix64::new(seed.seed);
    let n = grid.nx * grid.ny;
    let mut perturbed = |centre: f64| -> Result<Field2D> {
        let values = (0..n)
            .map(|_| (centre + seed.epsilon * rng.next_symmetric()).max(0.0))
            .collect();
        Field2D::with_spacing(grid.nx, grid.ny, grid.h, values)
    };
    let s = perturbed(eq.s)?;
    let r = perturbed(eq.r)?;
    let i = perturbed(eq.i)?;
    let c = eq.c.map(&mut perturbed).transpose()?;
    HybridState::new(s, r, i, grid.constant(eq.p)?, grid.constant(eq.fa)?, c, 0.0)
}

/// Trapezoid-weighted `L2` norm of `w - w_star`.
pub fn l2_deviation(w: &Field2D, w_star: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..w.nx() {
        for j in 0..w.ny() {
            let e = w.at(i, j) - w_star;
            acc += w.weight(i, j) * e * e;
        }
    }
    acc.sqrt()
}

/// Trapezoid-weighted standard deviation about the spatial mean.
pub fn spatial_std(w: &Field2D) -> f64 {
    let mean = w.integral() / w.area();
    l2_deviation(w, mean) / w.area().sqrt()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsSeries {
    pub times: Vec<f64>,
    pub e_s: Vec<f64>,
    pub e_r: Vec<f64>,
    pub e_i: Vec<f64>,
    pub spatial_std_s: Vec<f64>,
    pub max_s: Vec<f64>,
    /// NaN when the scenario has no signal.
    pub max_c: Vec<f64>,
    pub conservation_error: Vec<f64>,
    pub breakdown_time: Option<f64>,
}

impl MetricsSeries {
    pub fn record(&mut self, state: &HybridState, eq: &Equilibrium, p_total: f64) {
        self.times.push(state.t);
        self.e_s.push(l2_deviation(&state.s, eq.s));
        self.e_r.push(l2_deviation(&state.r, eq.r));
        self.e_i.push(l2_deviation(&state.i, eq.i));
        self.spatial_std_s.push(spatial_std(&state.s));
        self.max_s.push(state.s.max());
        self.max_c.push(state.c.as_ref().map_or(f64::NAN, Field2D::max));
        self.conservation_error.push(state.pool_error(p_total));
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn max_conservation_error(&self) -> f64 {
        self.conservation_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Least-squares slope of `ln y` against `t` over samples with `t >= t_from`.
pub fn log_slope(times: &[f64], values: &[f64], t_from: f64) -> f64 {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(t, v)| **t >= t_from - 1e-12 && **v > 0.0)
        .map(|(t, v)| (*t, v.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt) * (p.0 - mt)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub scenario: ScenarioKind,
    pub passed: bool,
    pub checks: Vec<Check>,
    /// Regime I': whether `max E_S >= 1.02 E_S(0)`. Informational.
    pub transient_rise: Option<bool>,
}

impl Verdict {
    fn new(scenario: ScenarioKind, checks: Vec<Check>, transient_rise: Option<bool>) -> Self {
        Self {
            scenario,
            passed: checks.iter().all(|c| c.passed),
            checks,
            transient_rise,
        }
    }

    /// 0 on pass, 2 for the expected breakdown of the linear-flux feedback
    /// run, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match (self.passed, self.scenario) {
            (true, ScenarioKind::RegimeIIIFeedbackLinear) => 2,
            (true, _) => 0,
            (false, _) => 1,
        }
    }

    pub fn summary(&self) -> String {
        let mut out = format!(
            "{}: {}\n",
            self.scenario,
            if self.passed { "PASS" } else { "FAIL" }
        );
        for c in &self.checks {
            out.push_str(&format!(
                "  [{}] {}: {}\n",
                if c.passed { "ok" } else { "FAIL" },
                c.name,
                c.detail
            ));
        }
        if let Some(rise) = self.transient_rise {
            out.push_str(&format!(
                "  transient rise: {}\n",
                if rise { "observed" } else { "no-transient" }
            ));
        }
        out
    }
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

/// Maximum tolerated stromal pool drift over a run.
pub const CONSERVATION_TOL: f64 = 1e-9;

pub fn evaluate(
    scenario: ScenarioKind,
    m: &MetricsSeries,
    eq: &Equilibrium,
    p: &ModelParams,
    seed: &SeedSpec,
    t_final: f64,
    final_state: &HybridState,
) -> Verdict {
    let e0 = m.e_s.first().copied().unwrap_or(f64::NAN);
    let e_end = m.e_s.last().copied().unwrap_or(f64::NAN);
    let cons = m.max_conservation_error();
    let conservation = check(
        "stromal pool conserved",
        cons <= CONSERVATION_TOL,
        format!("max |P+Fa-P_T| = {cons:.3e}"),
    );
    let no_breakdown = check(
        "no breakdown",
        m.breakdown_time.is_none(),
        match m.breakdown_time {
            Some(t) => format!("broke down at t = {t}"),
            None => "reached final time".into(),
        },
    );
    let decays = check(
        "E_S(T) < E_S(0)",
        e_end < e0,
        format!("E_S(0) = {e0:.6e}, E_S(T) = {e_end:.6e}"),
    );
    match scenario {
        ScenarioKind::RegimeIBase => {
            let t_half = 0.5 * t_final;
            let slope = log_slope(&m.times, &m.e_s, t_half);
            let std_end = m.spatial_std_s.last().copied().unwrap_or(f64::NAN);
            let tail: Vec<f64> = m
                .times
                .iter()
                .zip(&m.e_s)
                .filter(|(t, _)| **t >= t_half - 1e-12)
                .map(|(_, e)| *e)
                .collect();
            let monotone = tail.windows(2).all(|w| w[1] <= w[0] + 1e-12);
            Verdict::new(
                scenario,
                vec![
                    no_breakdown,
                    decays,
                    check(
                        "log E_S slope on final half < 0",
                        slope < 0.0,
                        format!("slope = {slope:.6e}"),
                    ),
                    check(
                        "final spatial std of S < 1e-3 S*",
                        std_end < 1e-3 * eq.s,
                        format!("std = {std_end:.3e}, bound = {:.3e}", 1e-3 * eq.s),
                    ),
                    check(
                        "E_S nonincreasing on final half",
                        monotone,
                        format!("{} samples", tail.len()),
                    ),
                    conservation,
                ],
                None,
            )
        }
        ScenarioKind::RegimeIprimeUnidirectional => {
            let peak = m.e_s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Verdict::new(
                scenario,
                vec![no_breakdown, decays, conservation],
                Some(peak >= 1.02 * e0),
            )
        }
        ScenarioKind::RegimeIIFeedbackSaturated => {
            let std_end = m.spatial_std_s.last().copied().unwrap_or(f64::NAN);
            let bound = 10.0 * p.k;
            let run_max = m.max_s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let field_max = final_state
                .fields()
                .iter()
                .map(|(_, f)| f.max())
                .fold(f64::NEG_INFINITY, f64::max);
            let field_min = final_state
                .fields()
                .iter()
                .map(|(_, f)| f.min())
                .fold(f64::INFINITY, f64::min);
            Verdict::new(
                scenario,
                vec![
                    no_breakdown,
                    check(
                        "pattern present: spatial std of S >= 10 epsilon",
                        std_end >= 10.0 * seed.epsilon,
                        format!("std = {std_end:.4e}, bound = {:.1e}", 10.0 * seed.epsilon),
                    ),
                    check(
                        "fields within [0, 10 K]",
                        run_max <= bound && field_max <= bound && field_min >= 0.0,
                        format!("max S over run = {run_max:.4}, final range [{field_min:.4}, {field_max:.4}]"),
                    ),
                    conservation,
                ],
                None,
            )
        }
        ScenarioKind::RegimeIIIFeedbackLinear => {
            let broke = m.breakdown_time.is_some_and(|t| t < t_final);
            Verdict::new(
                scenario,
                vec![
                    check(
                        "breakdown before final time",
                        broke,
                        match m.breakdown_time {
                            Some(t) => format!("breakdown at t = {t}"),
                            None => "no breakdown".into(),
                        },
                    ),
                    conservation,
                ],
                None,
            )
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegimeRun {
    pub metrics: MetricsSeries,
    pub verdict: Verdict,
    pub final_state: HybridState,
    pub equilibrium: Equilibrium,
    pub steps_taken: usize,
}

pub fn run_regime(
    scenario: ScenarioKind,
    p: &ModelParams,
    grid: &GridSpec,
    cfg: &SchemeConfig,
    seed: &SeedSpec,
) -> Result<RegimeRun> {
    run_regime_observed(scenario, p, grid, cfg, seed, usize::MAX, |_, _| {})
}

/// Like [`run_regime`], additionally passing every `snapshot_every`-th
/// state (and the initial and final states) to `snapshot`.
pub fn run_regime_observed(
    scenario: ScenarioKind,
    p: &ModelParams,
    grid: &GridSpec,
    cfg: &SchemeConfig,
    seed: &SeedSpec,
    snapshot_every: usize,
    mut snapshot: impl FnMut(usize, &HybridState),
) -> Result<RegimeRun> {
    let p = (*p).validated()?;
    scenario.check_scheme(cfg)?;
    let eq = Equilibrium::for_scenario(scenario, &p)?;
    let initial = initial_condition(scenario, &p, grid, seed)?;
    let n_steps = grid.n_steps();
    let mut metrics = MetricsSeries::default();
    let summary = run_simulation(&initial, &p, grid, cfg, scenario.coupling(), 1, |step, state| {
        metrics.record(state, &eq, p.p_total);
        if step % snapshot_every.max(1) == 0 || step == n_steps {
            snapshot(step, state);
        }
    })?;
    metrics.breakdown_time = summary.breakdown_time;
    let verdict = evaluate(
        scenario,
        &metrics,
        &eq,
        &p,
        seed,
        n_steps as f64 * grid.dt,
        &summary.outcome.state,
    );
    Ok(RegimeRun {
        metrics,
        verdict,
        final_state: summary.outcome.state,
        equilibrium: eq,
        steps_taken: summary.steps_taken,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimOutcome {
    Homogenized,
    Patterned,
    Breakdown,
}

impl fmt::Display for SimOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimOutcome::Homogenized => "homogenized",
            SimOutcome::Patterned => "patterned",
            SimOutcome::Breakdown => "breakdown",
        })
    }
}

impl SimOutcome {
    pub fn of_run(m: &MetricsSeries, epsilon: f64) -> Self {
        if m.breakdown_time.is_some() {
            SimOutcome::Breakdown
        } else if m.spatial_std_s.last().is_some_and(|s| *s >= 10.0 * epsilon) {
            SimOutcome::Patterned
        } else {
            SimOutcome::Homogenized
        }
    }

    /// Outcome the linear classification predicts for a regime.
    pub fn predicted_by(regime: Regime) -> Self {
        match regime {
            Regime::Stable => SimOutcome::Homogenized,
            Regime::FiniteBand => SimOutcome::Patterned,
            Regime::IllPosed => SimOutcome::Breakdown,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub outcome: SimOutcome,
    pub regime: Regime,
    pub agreement: bool,
}

/// Linear-stability label of a scenario's homogeneous state: the
/// quasi-static feedback reduction for feedback scenarios, plain diffusion
/// otherwise.
pub fn predicted_regime(scenario: ScenarioKind, p: &ModelParams) -> Result<Regime> {
    let report = match scenario.coupling() {
        Coupling::Feedback => QuasiStaticFeedback::from_params(p)?.classify(ScanConfig::default())?,
        _ => classify_regime(
            &jacobian_reduced(p)?,
            &Mobility2x2::diagonal(p.d_s, p.d_r),
            ScanConfig::default(),
        )?,
    };
    Ok(report.regime)
}

/// Runs the scenario once per value of parameter `key`, in parallel, and
/// pairs each simulated outcome with the predicted regime.
pub fn sweep_param(
    scenario: ScenarioKind,
    key: &str,
    values: &[f64],
    p: &ModelParams,
    grid: &GridSpec,
    cfg: &SchemeConfig,
    seed: &SeedSpec,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    if p.get(key).is_none() {
        return Err(Error::Config(format!("'{key}' is not a sweepable parameter")));
    }
    let increasing = values.windows(2).all(|w| w[0] <= w[1]);
    let decreasing = values.windows(2).all(|w| w[0] >= w[1]);
    if !(increasing || decreasing) {
        return Err(Error::Config("sweep values must be monotone".into()));
    }
    scenario.check_scheme(cfg)?;
    values
        .par_iter()
        .map(|&value| {
            let mut q = *p;
            q.set(key, value);
            let q = q.validated()?;
            let run = run_regime(scenario, &q, grid, cfg, seed)?;
            let outcome = SimOutcome::of_run(&run.metrics, seed.epsilon);
            let regime = predicted_regime(scenario, &q)?;
            Ok(SweepRow {
                value,
                outcome,
                regime,
                agreement: SimOutcome::predicted_by(regime) == outcome,
            })
        })
        .collect()
}

/// Sweep of the feedback taxis sensitivity `chi_S'`.
pub fn sweep_chi(
    scenario: ScenarioKind,
    chi_values: &[f64],
    p: &ModelParams,
    grid: &GridSpec,
    cfg: &SchemeConfig,
    seed: &SeedSpec,
) -> Result<Vec<SweepRow>> {
    sweep_param(scenario, "chi_S_prime", chi_values, p, grid, cfg, seed)
}
