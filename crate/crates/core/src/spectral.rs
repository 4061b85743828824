//! Mode-wise linear stability of homogeneous equilibria.
//!
//! For a Neumann Laplacian eigenvalue `mu`, perturbations of the `(S, R)`
//! pair evolve under the dispersion matrix `A(mu) = J - mu M`, where `J` is
//! the kinetic Jacobian and `M = diag(d_S, d_R) - H` the effective mobility
//! (diffusion minus linearized taxis feedback). The regime of a parameter
//! point follows from the symmetric part of `M` and from the sign pattern of
//! `tr A(mu)` and `det A(mu)`:
//!
//! * `sym(M)` has a negative eigenvalue: ill-posed / aggregation.
//! * `sym(M)` positive definite and some `mu > 0` has `tr A > 0` or
//!   `det A < 0`: finite-band (Turing-type) instability.
//! * otherwise: stable.

use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::kinetics::{coexistence_equilibrium, jacobian_general, jacobian_reduced, EvalPoint, JacobianSR, ReducedState};
use crate::linalg::Mat2;
use crate::model::ModelParams;

/// `|lambda_min(sym M)|` below this is treated as marginal parabolicity.
pub const MARGINAL_PARABOLICITY: f64 = 1e-12;

/// Relative tolerance for band endpoint refinement.
pub const BAND_RTOL: f64 = 1e-6;

pub const DEFAULT_SAMPLES: usize = 2048;

/// Effective mobility `M = diag(d_S, d_R) - H`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mobility2x2 {
    pub m11: f64,
    pub m12: f64,
    pub m21: f64,
    pub m22: f64,
}

impl Mobility2x2 {
    pub fn new(m11: f64, m12: f64, m21: f64, m22: f64) -> Self {
        Self { m11, m12, m21, m22 }
    }

    pub fn diagonal(d_s: f64, d_r: f64) -> Self {
        Self::new(d_s, 0.0, 0.0, d_r)
    }

    pub fn matrix(&self) -> Mat2 {
        Mat2::new(self.m11, self.m12, self.m21, self.m22)
    }
}

impl From<Mat2> for Mobility2x2 {
    fn from(m: Mat2) -> Self {
        Self::new(m.a11, m.a12, m.a21, m.a22)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Stable,
    FiniteBand,
    IllPosed,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Stable => "Stable",
            Regime::FiniteBand => "FiniteBand",
            Regime::IllPosed => "IllPosed",
        })
    }
}

/// Strong-parabolicity verdict with the eigenvalues of `sym(M)` (ascending).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Parabolicity {
    pub holds: bool,
    pub sym_eigenvalues: (f64, f64),
    /// Smallest eigenvalue within [`MARGINAL_PARABOLICITY`] of zero.
    pub marginal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispersionReport {
    pub mu_grid: Vec<f64>,
    pub growth_rates: Vec<f64>,
    pub trace_curve: Vec<f64>,
    pub det_curve: Vec<f64>,
    pub regime: Regime,
    /// Refined `(mu_lo, mu_hi)` of the unstable set; `mu_hi` is infinite
    /// when growth persists up to the end of the scan.
    pub unstable_band: Option<(f64, f64)>,
    pub parabolicity: Parabolicity,
    pub kinetically_stable: bool,
    /// Growth is negative at every sample above the band.
    pub tail_decays: bool,
}

impl DispersionReport {
    pub fn mu_max(&self) -> f64 {
        *self.mu_grid.last().unwrap_or(&0.0)
    }

    pub fn max_growth(&self) -> f64 {
        self.growth_rates.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Scan range and resolution. `mu_max = None` picks the default range
/// `1e4 * max(|J|_inf / min diag(M), pi^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanConfig {
    pub mu_max: Option<f64>,
    pub n_samples: usize,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            mu_max: None,
            n_samples: DEFAULT_SAMPLES,
        }
    }
}

impl ScanConfig {
    pub fn new(mu_max: f64, n_samples: usize) -> Self {
        Self {
            mu_max: Some(mu_max),
            n_samples,
        }
    }
}

/// Neumann Laplacian eigenvalues `pi^2 (m^2/Lx^2 + n^2/Ly^2)` of a rectangle,
/// ascending with duplicates kept.
pub fn neumann_eigenvalues(lx: f64, ly: f64, m_max: usize, n_max: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((m_max + 1) * (n_max + 1));
    for m in 0..=m_max {
        for n in 0..=n_max {
            let (m, n) = (m as f64, n as f64);
            out.push(PI * PI * (m * m / (lx * lx) + n * n / (ly * ly)));
        }
    }
    out.sort_by(f64::total_cmp);
    out
}

/// Linearized taxis feedback
/// `H = [[chi_S g_S S*, chi_S g_R S*], [chi_R g_S R*, chi_R g_R R*]]`.
pub fn feedback_matrix(u_star: ReducedState, g_partials: (f64, f64), chi: (f64, f64)) -> Mat2 {
    let (g_s, g_r) = g_partials;
    let (chi_s, chi_r) = chi;
    Mat2::new(
        chi_s * g_s * u_star.s,
        chi_s * g_r * u_star.s,
        chi_r * g_s * u_star.r,
        chi_r * g_r * u_star.r,
    )
}

pub fn effective_mobility(d: (f64, f64), h: &Mat2) -> Mobility2x2 {
    Mat2::diag(d.0, d.1).sub(h).into()
}

pub fn is_strongly_parabolic(m: &Mobility2x2) -> Parabolicity {
    let (lo, hi) = m.matrix().sym_eigenvalues();
    Parabolicity {
        holds: lo > 0.0 && hi > 0.0,
        sym_eigenvalues: (lo, hi),
        marginal: lo.abs() <= MARGINAL_PARABOLICITY,
    }
}

/// `A(mu) = J - mu M`.
pub fn dispersion_matrix(j: &JacobianSR, m: &Mobility2x2, mu: f64) -> Result<Mat2> {
    if mu.is_nan() || mu < 0.0 {
        return Err(Error::Domain(format!("mu must be >= 0, got {mu}")));
    }
    Ok(dispersion_unchecked(j, m, mu))
}

#[inline]
fn dispersion_unchecked(j: &JacobianSR, m: &Mobility2x2, mu: f64) -> Mat2 {
    j.matrix().sub(&m.matrix().scale(mu))
}

/// Largest real part of the eigenvalues of a 2x2 matrix.
pub fn growth_rate(a: &Mat2) -> f64 {
    a.spectral_abscissa()
}

/// Verdict of the sufficient no-pattern conditions for open-loop taxis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OneWayStability {
    /// `d d_S + a d_R < 0`.
    ByLinearTerm,
    /// `4 det(J) d_S d_R > (d d_S + a d_R)^2`.
    ByDiscriminant,
    Both,
    /// Neither sufficient condition holds; instability is not implied.
    Undetermined,
}

pub fn unidirectional_stability(j: &JacobianSR, d: (f64, f64)) -> Result<OneWayStability> {
    j.require_kinetic_stability()?;
    let (d_s, d_r) = d;
    let linear = j.d * d_s + j.a * d_r;
    let by_linear = linear < 0.0;
    let by_disc = 4.0 * j.det() * d_s * d_r > linear * linear;
    Ok(match (by_linear, by_disc) {
        (true, true) => OneWayStability::Both,
        (true, false) => OneWayStability::ByLinearTerm,
        (false, true) => OneWayStability::ByDiscriminant,
        (false, false) => OneWayStability::Undetermined,
    })
}

/// Dispersion scan of the classical reaction-diffusion linearization
/// (`M = diag(d_S, d_R)`). Unlike [`classify_regime`] this does not reject
/// unstable kinetics; the report records them.
pub fn turing_scan(j: &JacobianSR, d: (f64, f64), scan: ScanConfig) -> DispersionReport {
    scan_dispersion(j, &Mobility2x2::diagonal(d.0, d.1), scan)
}

/// Three-regime classification of a closed-loop feedback linearization.
pub fn classify_regime(j: &JacobianSR, m: &Mobility2x2, scan: ScanConfig) -> Result<DispersionReport> {
    j.require_kinetic_stability()?;
    Ok(scan_dispersion(j, m, scan))
}

/// Critical taxis sensitivities `d_S / (g_S S*)` and `d_R / (g_R R*)`;
/// `+inf` where the self-coupling vanishes or has the wrong sign.
pub fn chemotaxis_thresholds(d: (f64, f64), g_partials: (f64, f64), u_star: ReducedState) -> (f64, f64) {
    let thr = |diff: f64, slope: f64| if slope > 0.0 { diff / slope } else { f64::INFINITY };
    (thr(d.0, g_partials.0 * u_star.s), thr(d.1, g_partials.1 * u_star.r))
}

/// Spatially homogeneous equilibrium of the full six-field open-loop model.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FullEquilibrium {
    pub s: f64,
    pub r: f64,
    pub i: f64,
    pub p: f64,
    pub fa: f64,
    pub c: f64,
}

impl FullEquilibrium {
    /// Washout branch `(S*, R*, 0, P_T, 0, 0)`.
    pub fn washout(p: &ModelParams) -> Result<Self> {
        let eq = coexistence_equilibrium(p)?;
        Ok(Self {
            s: eq.s,
            r: eq.r,
            i: 0.0,
            p: p.p_total,
            fa: 0.0,
            c: 0.0,
        })
    }
}

/// Per-block eigenvalues of the block-triangular six-field linearization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockSpectrum {
    pub signal: f64,
    pub drug: f64,
    /// `[0, -(theta phi* + beta (1 - phi*))]`.
    pub stromal: [f64; 2],
    pub tumor: [Complex64; 2],
}

impl BlockSpectrum {
    pub fn eigenvalues(&self) -> [Complex64; 6] {
        let re = |x: f64| Complex64::new(x, 0.0);
        [
            re(self.signal),
            re(self.drug),
            re(self.stromal[0]),
            re(self.stromal[1]),
            self.tumor[0],
            self.tumor[1],
        ]
    }

    /// Largest real part excluding the conserved-pool zero mode.
    pub fn max_nonstructural(&self) -> f64 {
        [self.signal, self.drug, self.stromal[1], self.tumor[0].re, self.tumor[1].re]
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn block_spectrum(mu: f64, p: &ModelParams, eq: &FullEquilibrium, q_prime_c: f64) -> Result<BlockSpectrum> {
    if !(q_prime_c < 0.0) {
        return Err(Error::NonRelaxingSignal(q_prime_c));
    }
    if mu.is_nan() || mu < 0.0 {
        return Err(Error::Domain(format!("mu must be >= 0, got {mu}")));
    }
    let phi = p.phi_of_i(eq.i)?;
    let j = jacobian_general(
        EvalPoint {
            s: eq.s,
            r: eq.r,
            i: eq.i,
            fa: eq.fa,
        },
        p,
    )?;
    let a_sr = dispersion_unchecked(&j, &Mobility2x2::diagonal(p.d_s, p.d_r), mu);
    Ok(BlockSpectrum {
        signal: q_prime_c - p.d_c * mu,
        drug: -(p.gamma_i + p.d_i * mu),
        stromal: [0.0, -(p.theta * phi + p.beta * (1.0 - phi))],
        tumor: a_sr.eigenvalues(),
    })
}

/// Quasi-static closure of the explicit feedback model: the signal is
/// slaved to `c = (kappa_c / rho_c) S`, only `S` is chemotactic with
/// sensitivity `chi_S'`, and the kinetics are those of the washout branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuasiStaticFeedback {
    pub u_star: ReducedState,
    pub c_star: f64,
    pub g_partials: (f64, f64),
    pub jacobian: JacobianSR,
    pub feedback: Mat2,
    pub mobility: Mobility2x2,
    pub thresholds: (f64, f64),
}

impl QuasiStaticFeedback {
    pub fn from_params(p: &ModelParams) -> Result<Self> {
        if !(p.rho_c > 0.0) {
            return Err(Error::Domain(format!("rho_c must be > 0, got {}", p.rho_c)));
        }
        let u_star = coexistence_equilibrium(p)?;
        let g_partials = (p.kappa_c / p.rho_c, 0.0);
        let feedback = feedback_matrix(u_star, g_partials, (p.chi_s_prime, 0.0));
        Ok(Self {
            u_star,
            c_star: g_partials.0 * u_star.s,
            g_partials,
            jacobian: jacobian_reduced(p)?,
            feedback,
            mobility: effective_mobility((p.d_s, p.d_r), &feedback),
            thresholds: chemotaxis_thresholds((p.d_s, p.d_r), g_partials, u_star),
        })
    }

    pub fn classify(&self, scan: ScanConfig) -> Result<DispersionReport> {
        classify_regime(&self.jacobian, &self.mobility, scan)
    }
}

/// Default scan range for a `(J, M)` pair.
pub fn default_mu_max(j: &JacobianSR, m: &Mobility2x2) -> f64 {
    let min_diag = m.m11.min(m.m22);
    let scale = if min_diag > 0.0 {
        min_diag
    } else {
        let fallback = m.m11.abs().max(m.m22.abs());
        if fallback > 0.0 {
            fallback
        } else {
            1.0
        }
    };
    1e4 * (j.matrix().norm_inf() / scale).max(PI * PI)
}

/// `det A(mu) = det(M) mu^2 - B mu + det(J)`; returns `(det M, B, det J)`.
fn det_quadratic(j: &JacobianSR, m: &Mobility2x2) -> (f64, f64, f64) {
    let mm = m.matrix();
    let b = j.a * m.m22 + j.d * m.m11 - j.b * m.m21 - j.c * m.m12;
    (mm.det(), b, j.det())
}

/// Analytically special points of the dispersion curves: the vertex and
/// roots of `det A`, and the root of `tr A`.
fn critical_mus(j: &JacobianSR, m: &Mobility2x2) -> Vec<f64> {
    let mut out = Vec::new();
    let (qa, qb, qc) = det_quadratic(j, m);
    if qa != 0.0 {
        out.push(qb / (2.0 * qa));
        let disc = qb * qb - 4.0 * qa * qc;
        if disc >= 0.0 {
            let r = disc.sqrt();
            out.push((qb - r) / (2.0 * qa));
            out.push((qb + r) / (2.0 * qa));
        }
    } else if qb != 0.0 {
        out.push(qc / qb);
    }
    let tr_m = m.m11 + m.m22;
    if tr_m != 0.0 {
        out.push(j.trace() / tr_m);
    }
    out.retain(|x| x.is_finite() && *x > 0.0);
    out
}

/// Hybrid linear + geometric grid on `[0, mu_max]` with extra points merged.
pub fn mu_grid(mu_max: f64, n_samples: usize, extra: &[f64]) -> Vec<f64> {
    let n_samples = n_samples.max(4);
    let n_lin = n_samples / 2;
    let n_geo = n_samples - n_lin;
    let mut grid = Vec::with_capacity(n_samples + extra.len() + 1);
    grid.push(0.0);
    for k in 1..=n_lin {
        grid.push(mu_max * k as f64 / n_lin as f64);
    }
    let lo = mu_max * 1e-8;
    let ratio = (mu_max / lo).ln() / (n_geo - 1) as f64;
    for k in 0..n_geo {
        grid.push(lo * (ratio * k as f64).exp());
    }
    grid.extend(extra.iter().copied().filter(|x| *x > 0.0 && *x < mu_max));
    for v in grid.iter_mut() {
        *v = v.min(mu_max);
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

fn scan_dispersion(j: &JacobianSR, m: &Mobility2x2, scan: ScanConfig) -> DispersionReport {
    let mu_max = scan.mu_max.unwrap_or_else(|| default_mu_max(j, m));
    let grid = mu_grid(mu_max, scan.n_samples, &critical_mus(j, m));

    let mut growth = Vec::with_capacity(grid.len());
    let mut trace = Vec::with_capacity(grid.len());
    let mut det = Vec::with_capacity(grid.len());
    for &mu in &grid {
        let a = dispersion_unchecked(j, m, mu);
        growth.push(growth_rate(&a));
        trace.push(a.trace());
        det.push(a.det());
    }

    let parabolicity = is_strongly_parabolic(m);
    let sampled_instability = grid
        .iter()
        .zip(trace.iter().zip(&det))
        .any(|(&mu, (&t, &d))| mu > 0.0 && (t > 0.0 || d < 0.0));

    let regime = if parabolicity.sym_eigenvalues.0 < 0.0 || parabolicity.marginal {
        Regime::IllPosed
    } else if sampled_instability {
        Regime::FiniteBand
    } else {
        Regime::Stable
    };

    let unstable_band = locate_band(j, m, &grid, &trace, &det);
    let tail_decays = match unstable_band {
        Some((_, hi)) if hi.is_finite() => grid
            .iter()
            .zip(&growth)
            .filter(|(mu, _)| **mu > hi)
            .all(|(_, g)| *g < 0.0),
        Some(_) => false,
        None => growth.last().is_none_or(|g| *g < 0.0),
    };

    DispersionReport {
        mu_grid: grid,
        growth_rates: growth,
        trace_curve: trace,
        det_curve: det,
        regime,
        unstable_band,
        parabolicity,
        kinetically_stable: j.is_kinetically_stable(),
        tail_decays,
    }
}

#[inline]
fn unstable_at(j: &JacobianSR, m: &Mobility2x2, mu: f64) -> bool {
    let a = dispersion_unchecked(j, m, mu);
    a.trace() > 0.0 || a.det() < 0.0
}

/// Bisection for the stability switch between `stable` and `unstable`.
fn refine_edge(j: &JacobianSR, m: &Mobility2x2, mut stable: f64, mut unstable: f64) -> f64 {
    for _ in 0..200 {
        let width = (unstable - stable).abs();
        if width <= BAND_RTOL * stable.abs().max(unstable.abs()) || width == 0.0 {
            break;
        }
        let mid = 0.5 * (stable + unstable);
        if unstable_at(j, m, mid) {
            unstable = mid;
        } else {
            stable = mid;
        }
    }
    unstable
}

fn locate_band(j: &JacobianSR, m: &Mobility2x2, grid: &[f64], trace: &[f64], det: &[f64]) -> Option<(f64, f64)> {
    let flags: Vec<bool> = trace.iter().zip(det).map(|(t, d)| *t > 0.0 || *d < 0.0).collect();
    let first = flags.iter().position(|f| *f)?;
    let last = flags.iter().rposition(|f| *f)?;
    let lo = if first == 0 {
        grid[0]
    } else {
        refine_edge(j, m, grid[first - 1], grid[first])
    };
    let hi = if last + 1 == grid.len() {
        f64::INFINITY
    } else {
        refine_edge(j, m, grid[last + 1], grid[last])
    };
    Some((lo, hi))
}
