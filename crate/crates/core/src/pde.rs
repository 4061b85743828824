//! Time stepping of the hybrid system on a uniform node-centred grid with
//! homogeneous Neumann boundaries.
//!
//! One step assembles reaction and taxis terms explicitly, advances every
//! diffusing field with a Crank-Nicolson diffusion solve, updates the
//! stromal pair pointwise, truncates negative densities and scans for
//! breakdown.

use std::fmt;
use std::sync::Arc;

use rustdct::{Dct1, DctPlanner};

use crate::error::{Error, Result};
use crate::kinetics::{reaction_unchecked, PointState};
use crate::model::{Field2D, HybridState, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub h: f64,
    pub dt: f64,
    pub t_final: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::unit_square(51, 1e-2, 5.0)
    }
}

impl GridSpec {
    /// `n x n` nodes on the unit square.
    pub fn unit_square(n: usize, dt: f64, t_final: f64) -> Self {
        Self {
            nx: n,
            ny: n,
            h: 1.0 / (n.max(2) - 1) as f64,
            dt,
            t_final,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 3 || self.ny < 3 {
            return Err(Error::GridMismatch(format!(
                "need nx, ny >= 3, got {} x {}",
                self.nx, self.ny
            )));
        }
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(Error::Config(format!("h must be > 0, got {}", self.h)));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.t_final >= self.dt) {
            return Err(Error::Config(format!(
                "t_final must be >= dt, got {} < {}",
                self.t_final, self.dt
            )));
        }
        Ok(())
    }

    /// Number of steps to reach `t_final`, rounded to the nearest integer.
    pub fn n_steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    pub fn matches(&self, f: &Field2D) -> bool {
        f.nx() == self.nx && f.ny() == self.ny && f.h() == self.h
    }

    pub fn constant(&self, value: f64) -> Result<Field2D> {
        Field2D::with_spacing(self.nx, self.ny, self.h, vec![value; self.nx * self.ny])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffusionSolver {
    /// Exact solve in the discrete cosine basis.
    SpectralCosine,
    /// Conjugate gradients in the trapezoid-weighted inner product.
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaxisMode {
    None,
    Linear,
    Saturated,
}

impl fmt::Display for TaxisMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaxisMode::None => "none",
            TaxisMode::Linear => "linear",
            TaxisMode::Saturated => "saturated",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeConfig {
    pub diffusion_solver: DiffusionSolver,
    pub iterative_tolerance: f64,
    pub max_iterations: usize,
    pub taxis_mode: TaxisMode,
    pub alpha_c: f64,
    pub truncate_negative: bool,
    /// Advance `(P, Fa)` with the exact exponential of the frozen-drug
    /// conversion instead of explicit Euler.
    pub exact_stroma: bool,
    /// Breakdown when any field exceeds `breakdown_factor * K`.
    pub breakdown_factor: f64,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            diffusion_solver: DiffusionSolver::SpectralCosine,
            iterative_tolerance: 1e-10,
            max_iterations: 10_000,
            taxis_mode: TaxisMode::None,
            alpha_c: 100.0,
            truncate_negative: true,
            exact_stroma: false,
            breakdown_factor: 1e6,
        }
    }
}

impl SchemeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.diffusion_solver == DiffusionSolver::Iterative && !(self.iterative_tolerance <= 1e-8) {
            return Err(Error::Config(format!(
                "iterative_tolerance must be <= 1e-8, got {}",
                self.iterative_tolerance
            )));
        }
        if self.taxis_mode == TaxisMode::Saturated && !(self.alpha_c >= 0.0) {
            return Err(Error::Config(format!("alpha_c must be >= 0, got {}", self.alpha_c)));
        }
        if !(self.breakdown_factor > 0.0) {
            return Err(Error::Config(format!(
                "breakdown_factor must be > 0, got {}",
                self.breakdown_factor
            )));
        }
        Ok(())
    }
}

/// Which signal equation and taxis terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    /// `S, R, I` diffuse; no signal.
    Base,
    /// Relaxing signal `c_t = d_c Lc - rho_c c`; `S` and `R` drift up `c`.
    Unidirectional,
    /// Produced signal `c_t = d_c Lc + kappa_c S - rho_c c`; only `S` drifts.
    Feedback,
}

impl Coupling {
    pub fn has_signal(&self) -> bool {
        !matches!(self, Coupling::Base)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BreakdownReason {
    Nan,
    Overflow,
    MaxExceeded,
}

impl fmt::Display for BreakdownReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BreakdownReason::Nan => "nan",
            BreakdownReason::Overflow => "overflow",
            BreakdownReason::MaxExceeded => "max-exceeded",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: HybridState,
    pub broke_down: bool,
    pub breakdown_reason: Option<BreakdownReason>,
    /// `max |P + Fa - P_T|`.
    pub conservation_error: f64,
}

/// Five-point Laplacian with mirrored ghost nodes.
pub fn laplacian_neumann(f: &Field2D) -> Field2D {
    let mut out = f.zeros_like();
    apply_laplacian(f.values(), out.values_mut(), f.nx(), f.ny(), f.h());
    out
}

fn apply_laplacian(f: &[f64], out: &mut [f64], nx: usize, ny: usize, h: f64) {
    let inv_h2 = 1.0 / (h * h);
    for i in 0..nx {
        let im = if i == 0 { 1 } else { i - 1 };
        let ip = if i == nx - 1 { nx - 2 } else { i + 1 };
        for j in 0..ny {
            let jm = if j == 0 { 1 } else { j - 1 };
            let jp = if j == ny - 1 { ny - 2 } else { j + 1 };
            let c = f[i * ny + j];
            out[i * ny + j] =
                (f[im * ny + j] + f[ip * ny + j] + f[i * ny + jm] + f[i * ny + jp] - 4.0 * c) * inv_h2;
        }
    }
}

/// Trapezoid weights without the `h^2` factor.
fn trapezoid_weights(nx: usize, ny: usize) -> Vec<f64> {
    let mut w = vec![1.0; nx * ny];
    for i in 0..nx {
        for j in 0..ny {
            let wx = if i == 0 || i == nx - 1 { 0.5 } else { 1.0 };
            let wy = if j == 0 || j == ny - 1 { 0.5 } else { 1.0 };
            w[i * ny + j] = wx * wy;
        }
    }
    w
}

/// Taxis fluxes on cell faces. `x[f * ny + j]` is the flux through the face
/// between nodes `(f - 1, j)` and `(f, j)`, for `f` in `0..=nx`; faces `0`
/// and `nx` lie on the boundary. `y` is laid out as `i * (ny + 1) + f`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceFluxes {
    pub nx: usize,
    pub ny: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl FaceFluxes {
    /// Largest absolute flux on a boundary face.
    pub fn max_boundary_flux(&self) -> f64 {
        let (nx, ny) = (self.nx, self.ny);
        let mut m = 0.0f64;
        for j in 0..ny {
            m = m.max(self.x[j].abs()).max(self.x[nx * ny + j].abs());
        }
        for i in 0..nx {
            m = m.max(self.y[i * (ny + 1)].abs()).max(self.y[i * (ny + 1) + ny].abs());
        }
        m
    }

    /// Discrete divergence with half control volumes on boundary nodes.
    pub fn divergence(&self, h: f64) -> Vec<f64> {
        let (nx, ny) = (self.nx, self.ny);
        let mut out = vec![0.0; nx * ny];
        for i in 0..nx {
            let vx = if i == 0 || i == nx - 1 { 0.5 * h } else { h };
            for j in 0..ny {
                let vy = if j == 0 || j == ny - 1 { 0.5 * h } else { h };
                let dx = (self.x[(i + 1) * ny + j] - self.x[i * ny + j]) / vx;
                let dy = (self.y[i * (ny + 1) + j + 1] - self.y[i * (ny + 1) + j]) / vy;
                out[i * ny + j] = dx + dy;
            }
        }
        out
    }
}

/// Face fluxes of `chi W grad c`, optionally divided by `1 + alpha_c |grad c|`.
///
/// The normal gradient on a face is the two-point difference; the
/// tangential component used in `|grad c|` averages the centred
/// differences at the two adjacent nodes (zero on boundary rows, matching
/// the mirrored ghost nodes).
pub fn taxis_face_fluxes(w: &Field2D, c: &Field2D, chi: f64, mode: TaxisMode, alpha_c: f64) -> Result<FaceFluxes> {
    w.ensure_same_grid(c)?;
    let (nx, ny, h) = (w.nx(), w.ny(), w.h());
    let mut x = vec![0.0; (nx + 1) * ny];
    let mut y = vec![0.0; nx * (ny + 1)];
    if mode == TaxisMode::None || chi == 0.0 {
        return Ok(FaceFluxes { nx, ny, x, y });
    }
    let (wv, cv) = (w.values(), c.values());
    let inv_2h = 0.5 / h;
    // centred nodal derivatives, zero on the mirrored boundary rows
    let grad_x = |i: usize, j: usize| {
        if i == 0 || i == nx - 1 {
            0.0
        } else {
            (cv[(i + 1) * ny + j] - cv[(i - 1) * ny + j]) * inv_2h
        }
    };
    let grad_y = |i: usize, j: usize| {
        if j == 0 || j == ny - 1 {
            0.0
        } else {
            (cv[i * ny + j + 1] - cv[i * ny + j - 1]) * inv_2h
        }
    };
    let limiter = |normal: f64, tangential: f64| match mode {
        TaxisMode::Saturated => 1.0 / (1.0 + alpha_c * normal.hypot(tangential)),
        _ => 1.0,
    };
    for f in 1..nx {
        for j in 0..ny {
            let (a, b) = ((f - 1) * ny + j, f * ny + j);
            let g = (cv[b] - cv[a]) / h;
            let tangential = 0.5 * (grad_y(f - 1, j) + grad_y(f, j));
            x[f * ny + j] = chi * 0.5 * (wv[a] + wv[b]) * g * limiter(g, tangential);
        }
    }
    for i in 0..nx {
        for f in 1..ny {
            let (a, b) = (i * ny + f - 1, i * ny + f);
            let g = (cv[b] - cv[a]) / h;
            let tangential = 0.5 * (grad_x(i, f - 1) + grad_x(i, f));
            y[i * (ny + 1) + f] = chi * 0.5 * (wv[a] + wv[b]) * g * limiter(g, tangential);
        }
    }
    Ok(FaceFluxes { nx, ny, x, y })
}

/// `div(chi W grad c)` (or its saturated variant) in conservative form. The
/// taxis term of the `W` equation is the negative of this.
pub fn taxis_divergence(w: &Field2D, c: &Field2D, chi: f64, mode: TaxisMode, alpha_c: f64) -> Result<Field2D> {
    let fluxes = taxis_face_fluxes(w, c, chi, mode, alpha_c)?;
    Field2D::with_spacing(w.nx(), w.ny(), w.h(), fluxes.divergence(w.h()))
}

/// Reusable Crank-Nicolson diffusion solver for one grid.
pub struct DiffusionSolverCache {
    nx: usize,
    ny: usize,
    h: f64,
    dct_x: Arc<dyn Dct1<f64>>,
    dct_y: Arc<dyn Dct1<f64>>,
    eig_x: Vec<f64>,
    eig_y: Vec<f64>,
    weights: Vec<f64>,
    scratch: Vec<f64>,
    column: Vec<f64>,
}

impl fmt::Debug for DiffusionSolverCache {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionSolverCache")
            .field("nx", &self.nx)
            .field("ny", &self.ny)
            .field("h", &self.h)
            .finish()
    }
}

/// Eigenvalues of the 1D mirrored-ghost Laplacian, `-(2 - 2 cos(pi k / (n-1))) / h^2`.
pub fn neumann_stencil_eigenvalues(n: usize, h: f64) -> Vec<f64> {
    (0..n)
        .map(|k| -(2.0 - 2.0 * (std::f64::consts::PI * k as f64 / (n - 1) as f64).cos()) / (h * h))
        .collect()
}

impl DiffusionSolverCache {
    pub fn new(nx: usize, ny: usize, h: f64) -> Self {
        let mut planner = DctPlanner::new();
        Self {
            nx,
            ny,
            h,
            dct_x: planner.plan_dct1(nx),
            dct_y: planner.plan_dct1(ny),
            eig_x: neumann_stencil_eigenvalues(nx, h),
            eig_y: neumann_stencil_eigenvalues(ny, h),
            weights: trapezoid_weights(nx, ny),
            scratch: vec![0.0; nx * ny],
            column: vec![0.0; nx],
        }
    }

    pub fn for_grid(grid: &GridSpec) -> Self {
        Self::new(grid.nx, grid.ny, grid.h)
    }

    /// In-place 2D DCT-I (unnormalized).
    fn dct2(&mut self, data: &mut [f64]) {
        let (nx, ny) = (self.nx, self.ny);
        for row in data.chunks_exact_mut(ny) {
            self.dct_y.process_dct1(row);
        }
        for j in 0..ny {
            for i in 0..nx {
                self.column[i] = data[i * ny + j];
            }
            self.dct_x.process_dct1(&mut self.column);
            for i in 0..nx {
                data[i * ny + j] = self.column[i];
            }
        }
    }

    /// Solves `(I - dt d/2 L) f_new = (I + dt d/2 L) f + dt explicit` in place.
    pub fn solve(
        &mut self,
        f: &mut [f64],
        d: f64,
        dt: f64,
        explicit: &[f64],
        cfg: &SchemeConfig,
    ) -> Result<()> {
        let n = self.nx * self.ny;
        debug_assert_eq!(f.len(), n);
        debug_assert_eq!(explicit.len(), n);
        if d == 0.0 {
            for (v, e) in f.iter_mut().zip(explicit) {
                *v += dt * e;
            }
            return Ok(());
        }
        let half = 0.5 * dt * d;
        let mut rhs = std::mem::take(&mut self.scratch);
        apply_laplacian(f, &mut rhs, self.nx, self.ny, self.h);
        for k in 0..n {
            rhs[k] = f[k] + half * rhs[k] + dt * explicit[k];
        }
        let result = match cfg.diffusion_solver {
            DiffusionSolver::SpectralCosine => {
                self.solve_spectral(&mut rhs, half);
                f.copy_from_slice(&rhs);
                Ok(())
            }
            DiffusionSolver::Iterative => self.solve_cg(f, &rhs, half, cfg),
        };
        self.scratch = rhs;
        result
    }

    fn solve_spectral(&mut self, rhs: &mut [f64], half: f64) {
        let (nx, ny) = (self.nx, self.ny);
        self.dct2(rhs);
        for i in 0..nx {
            for j in 0..ny {
                rhs[i * ny + j] /= 1.0 - half * (self.eig_x[i] + self.eig_y[j]);
            }
        }
        self.dct2(rhs);
        let scale = 4.0 / ((nx - 1) * (ny - 1)) as f64;
        for v in rhs.iter_mut() {
            *v *= scale;
        }
    }

    /// CG on `A = I - half L`, which is self-adjoint in the trapezoid inner
    /// product. `x` holds the initial guess and receives the solution.
    fn solve_cg(&self, x: &mut [f64], b: &[f64], half: f64, cfg: &SchemeConfig) -> Result<()> {
        let (nx, ny, h) = (self.nx, self.ny, self.h);
        let n = nx * ny;
        let w = &self.weights;
        let dot = |u: &[f64], v: &[f64]| -> f64 { (0..n).map(|k| w[k] * u[k] * v[k]).sum() };
        let apply = |u: &[f64], out: &mut [f64]| {
            apply_laplacian(u, out, nx, ny, h);
            for k in 0..n {
                out[k] = u[k] - half * out[k];
            }
        };
        let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let tol = cfg.iterative_tolerance * max_abs(b).max(1.0);

        let mut ax = vec![0.0; n];
        apply(x, &mut ax);
        let mut r: Vec<f64> = (0..n).map(|k| b[k] - ax[k]).collect();
        let mut p = r.clone();
        let mut rr = dot(&r, &r);
        let mut ap = vec![0.0; n];
        for it in 0..=cfg.max_iterations {
            let res = max_abs(&r);
            if res <= tol {
                return Ok(());
            }
            if it == cfg.max_iterations || !res.is_finite() {
                return Err(Error::SolverDiverged {
                    residual: res,
                    iterations: it,
                });
            }
            apply(&p, &mut ap);
            let alpha = rr / dot(&p, &ap);
            for k in 0..n {
                x[k] += alpha * p[k];
                r[k] -= alpha * ap[k];
            }
            let rr_new = dot(&r, &r);
            let beta = rr_new / rr;
            rr = rr_new;
            for k in 0..n {
                p[k] = r[k] + beta * p[k];
            }
        }
        unreachable!("loop returns on its final iteration")
    }
}

/// Stand-alone Crank-Nicolson diffusion step.
pub fn diffusion_step_cn(f: &Field2D, d: f64, dt: f64, cfg: &SchemeConfig, explicit: &Field2D) -> Result<Field2D> {
    if d.is_nan() || d < 0.0 {
        return Err(Error::Domain(format!("diffusivity must be >= 0, got {d}")));
    }
    f.ensure_same_grid(explicit)?;
    let mut cache = DiffusionSolverCache::new(f.nx(), f.ny(), f.h());
    let mut out = f.clone();
    cache.solve(out.values_mut(), d, dt, explicit.values(), cfg)?;
    Ok(out)
}

/// Advances a state step by step while reusing transform plans and buffers.
#[derive(Debug)]
pub struct Stepper {
    grid: GridSpec,
    cfg: SchemeConfig,
    coupling: Coupling,
    solver: DiffusionSolverCache,
    rhs: [Vec<f64>; 4],
}

impl Stepper {
    pub fn new(grid: GridSpec, cfg: SchemeConfig, coupling: Coupling) -> Result<Self> {
        grid.validate()?;
        cfg.validate()?;
        let n = grid.nx * grid.ny;
        Ok(Self {
            grid,
            cfg,
            coupling,
            solver: DiffusionSolverCache::for_grid(&grid),
            rhs: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    fn check_state(&self, state: &HybridState) -> Result<()> {
        for (name, f) in state.fields() {
            if !self.grid.matches(f) {
                return Err(Error::GridMismatch(format!(
                    "field {name} is {}x{} (h={}), grid is {}x{} (h={})",
                    f.nx(),
                    f.ny(),
                    f.h(),
                    self.grid.nx,
                    self.grid.ny,
                    self.grid.h
                )));
            }
        }
        if self.coupling.has_signal() && state.c.is_none() {
            return Err(Error::Config("scenario needs a signal field c".into()));
        }
        Ok(())
    }

    /// One time step in place. Returns the breakdown reason if the state
    /// became non-finite or exceeded the growth guard.
    pub fn advance(&mut self, state: &mut HybridState, p: &ModelParams) -> Result<Option<BreakdownReason>> {
        self.check_state(state)?;
        let n = self.grid.nx * self.grid.ny;
        let dt = self.grid.dt;
        let [es, er, ei, ec] = &mut self.rhs;

        // explicit reaction terms
        let mut conversion = vec![0.0; n];
        {
            let (s, r, i, pp, fa) = (
                state.s.values(),
                state.r.values(),
                state.i.values(),
                state.p.values(),
                state.fa.values(),
            );
            for k in 0..n {
                let g = reaction_unchecked(
                    PointState {
                        s: s[k],
                        r: r[k],
                        i: i[k],
                        p: pp[k],
                        fa: fa[k],
                    },
                    p,
                );
                es[k] = g.g_s;
                er[k] = g.g_r;
                ei[k] = g.g_i;
                conversion[k] = g.g_p;
            }
        }

        // signal source and taxis
        if let Some(c) = &state.c {
            let cv = c.values();
            let sv = state.s.values();
            for k in 0..n {
                ec[k] = -p.rho_c * cv[k];
                if self.coupling == Coupling::Feedback {
                    ec[k] += p.kappa_c * sv[k];
                }
            }
            let mode = self.cfg.taxis_mode;
            let alpha_c = self.cfg.alpha_c;
            let (chi_s, chi_r) = match self.coupling {
                Coupling::Base => (0.0, 0.0),
                Coupling::Unidirectional => (p.chi_s, p.chi_r),
                Coupling::Feedback => (p.chi_s_prime, 0.0),
            };
            if mode != TaxisMode::None {
                if chi_s != 0.0 {
                    let div = taxis_face_fluxes(&state.s, c, chi_s, mode, alpha_c)?.divergence(self.grid.h);
                    for k in 0..n {
                        es[k] -= div[k];
                    }
                }
                if chi_r != 0.0 {
                    let div = taxis_face_fluxes(&state.r, c, chi_r, mode, alpha_c)?.divergence(self.grid.h);
                    for k in 0..n {
                        er[k] -= div[k];
                    }
                }
            }
        }

        // stromal pair, from the pre-step drug level
        if self.cfg.exact_stroma {
            let iv = state.i.values();
            let pv = state.p.values_mut();
            let fv = state.fa.values_mut();
            for k in 0..n {
                let phi = p.phi_unchecked(iv[k]);
                let (on, off) = (p.theta * phi, p.beta * (1.0 - phi));
                let rate = on + off;
                let total = pv[k] + fv[k];
                if rate > 0.0 {
                    let fa_eq = on * total / rate;
                    fv[k] = fa_eq + (fv[k] - fa_eq) * (-rate * dt).exp();
                    pv[k] = total - fv[k];
                }
            }
        } else {
            let pv = state.p.values_mut();
            for k in 0..n {
                pv[k] += dt * conversion[k];
            }
            let fv = state.fa.values_mut();
            for k in 0..n {
                fv[k] -= dt * conversion[k];
            }
        }

        // diffusion
        let cfg = self.cfg;
        self.solver.solve(state.s.values_mut(), p.d_s, dt, es, &cfg)?;
        self.solver.solve(state.r.values_mut(), p.d_r, dt, er, &cfg)?;
        self.solver.solve(state.i.values_mut(), p.d_i, dt, ei, &cfg)?;
        if let Some(c) = &mut state.c {
            self.solver.solve(c.values_mut(), p.d_c, dt, ec, &cfg)?;
        }

        if self.cfg.truncate_negative {
            state.s.clamp_nonnegative();
            state.r.clamp_nonnegative();
            state.i.clamp_nonnegative();
            if let Some(c) = &mut state.c {
                c.clamp_nonnegative();
            }
        }
        state.t += dt;
        Ok(scan_breakdown(state, self.cfg.breakdown_factor * p.k))
    }

    /// Applies one step to a copy of `state`.
    pub fn step(&mut self, state: &HybridState, p: &ModelParams) -> Result<StepOutcome> {
        let mut next = state.clone();
        let reason = self.advance(&mut next, p)?;
        Ok(StepOutcome {
            conservation_error: next.pool_error(p.p_total),
            state: next,
            broke_down: reason.is_some(),
            breakdown_reason: reason,
        })
    }
}

/// NaN anywhere, then infinities, then the finite growth guard.
pub fn scan_breakdown(state: &HybridState, threshold: f64) -> Option<BreakdownReason> {
    let fields = state.fields();
    if fields.iter().any(|(_, f)| f.values().iter().any(|v| v.is_nan())) {
        return Some(BreakdownReason::Nan);
    }
    if fields.iter().any(|(_, f)| f.values().iter().any(|v| v.is_infinite())) {
        return Some(BreakdownReason::Overflow);
    }
    if fields.iter().any(|(_, f)| f.max() > threshold) {
        return Some(BreakdownReason::MaxExceeded);
    }
    None
}

/// Single step with a freshly planned solver. Prefer [`Stepper`] in loops.
pub fn step_hybrid(
    state: &HybridState,
    p: &ModelParams,
    grid: &GridSpec,
    cfg: &SchemeConfig,
    coupling: Coupling,
) -> Result<StepOutcome> {
    Stepper::new(*grid, *cfg, coupling)?.step(state, p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub outcome: StepOutcome,
    pub steps_taken: usize,
    pub breakdown_time: Option<f64>,
}

/// Iterates to `grid.t_final` or breakdown. `observe(step, state)` is called
/// for step 0, every `every` steps and for the final state; it is not called
/// for a state that broke down.
pub fn run_simulation(
    initial: &HybridState,
    p: &ModelParams,
    grid: &GridSpec,
    cfg: &SchemeConfig,
    coupling: Coupling,
    every: usize,
    mut observe: impl FnMut(usize, &HybridState),
) -> Result<RunSummary> {
    let mut stepper = Stepper::new(*grid, *cfg, coupling)?;
    let n_steps = grid.n_steps();
    let every = every.max(1);
    let mut state = initial.clone();
    observe(0, &state);
    let mut reason = None;
    let mut steps_taken = 0;
    for step in 1..=n_steps {
        reason = stepper.advance(&mut state, p)?;
        state.t = initial.t + step as f64 * grid.dt;
        steps_taken = step;
        if reason.is_some() {
            break;
        }
        if step % every == 0 || step == n_steps {
            observe(step, &state);
        }
    }
    Ok(RunSummary {
        breakdown_time: reason.map(|_| state.t),
        outcome: StepOutcome {
            conservation_error: state.pool_error(p.p_total),
            state,
            broke_down: reason.is_some(),
            breakdown_reason: reason,
        },
        steps_taken,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn field(n: usize, f: impl Fn(f64, f64) -> f64) -> Field2D {
        Field2D::from_fn(n, n, f).unwrap()
    }

    fn weighted_sum(f: &Field2D) -> f64 {
        f.integral()
    }

    #[test]
    fn laplacian_of_constant_vanishes() {
        let l = laplacian_neumann(&field(11, |_, _| 3.7));
        assert!(l.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn laplacian_of_cosine_mode() {
        let mut prev = f64::NAN;
        for n in [51, 101, 201] {
            let l = laplacian_neumann(&field(n, |x, _| (PI * x).cos()));
            let exact = field(n, |x, _| -PI * PI * (PI * x).cos());
            let err = l
                .values()
                .iter()
                .zip(exact.values())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 2.0 * PI.powi(4) / 12.0 / ((n - 1) * (n - 1)) as f64);
            if prev.is_finite() {
                assert!((prev / err).log2() > 1.9);
            }
            prev = err;
        }
    }

    #[test]
    fn laplacian_checkerboard_and_mass() {
        let f = field(9, |x, y| if ((x * 8.0).round() as i64 + (y * 8.0).round() as i64) % 2 == 0 { 1.0 } else { -1.0 });
        let l = laplacian_neumann(&f);
        for i in 0..9 {
            for j in 0..9 {
                assert_eq!(l.at(i, j).signum(), -f.at(i, j).signum());
            }
        }
        let g = field(17, |x, y| (3.0 * x).sin() + x * y * y + (y * 5.0).exp());
        let lg = laplacian_neumann(&g);
        let scale = lg.values().iter().fold(0.0f64, |m, v| m.max(v.abs())) * lg.area();
        assert!(weighted_sum(&lg).abs() < 1e-12 * scale);
    }

    #[test]
    fn stencil_eigenvalues_match_cosine_vectors() {
        let n = 13;
        let h = 1.0 / 12.0;
        let eig = neumann_stencil_eigenvalues(n, h);
        for (k, lam) in eig.iter().enumerate() {
            let v = Field2D::from_fn(n, n, |x, _| (PI * k as f64 * x).cos()).unwrap();
            let lv = laplacian_neumann(&v);
            for idx in 0..n * n {
                assert!((lv.values()[idx] - lam * v.values()[idx]).abs() < 1e-9 * lam.abs().max(1.0));
            }
        }
    }

    #[test]
    fn cn_without_diffusion_is_forward_euler() {
        let f = field(9, |x, y| x + y);
        let e = field(9, |x, _| x * x);
        let out = diffusion_step_cn(&f, 0.0, 0.1, &SchemeConfig::default(), &e).unwrap();
        for k in 0..81 {
            assert_eq!(out.values()[k], f.values()[k] + 0.1 * e.values()[k]);
        }
    }

    #[test]
    fn cn_keeps_constants() {
        let f = field(21, |_, _| 0.8);
        for solver in [DiffusionSolver::SpectralCosine, DiffusionSolver::Iterative] {
            let cfg = SchemeConfig {
                diffusion_solver: solver,
                ..Default::default()
            };
            let out = diffusion_step_cn(&f, 5.0, 1e-2, &cfg, &f.zeros_like()).unwrap();
            for v in out.values() {
                assert!((v - 0.8).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn cn_uniform_decay_step() {
        let f = field(11, |_, _| 1.0);
        let e = field(11, |_, _| -1.0);
        let out = diffusion_step_cn(&f, 5.0, 1e-2, &SchemeConfig::default(), &e).unwrap();
        for v in out.values() {
            assert!((v - 0.99).abs() < 1e-14);
        }
    }

    #[test]
    fn spectral_and_iterative_agree() {
        let f = field(33, |x, y| (7.0 * x).sin() * (y * 3.0).cos() + x * x);
        let e = field(33, |x, y| x - y);
        let spectral = diffusion_step_cn(&f, 2.0, 1e-2, &SchemeConfig::default(), &e).unwrap();
        let cfg = SchemeConfig {
            diffusion_solver: DiffusionSolver::Iterative,
            iterative_tolerance: 1e-12,
            ..Default::default()
        };
        let iter = diffusion_step_cn(&f, 2.0, 1e-2, &cfg, &e).unwrap();
        for (a, b) in spectral.values().iter().zip(iter.values()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn spectral_solution_has_small_residual() {
        let n = 21;
        let f = field(n, |x, y| (x * 9.0).cos() + y.powi(3));
        let e = field(n, |x, y| x * y);
        let (d, dt) = (5.0, 1e-2);
        let out = diffusion_step_cn(&f, d, dt, &SchemeConfig::default(), &e).unwrap();
        let lf = laplacian_neumann(&f);
        let lo = laplacian_neumann(&out);
        for k in 0..n * n {
            let lhs = out.values()[k] - 0.5 * dt * d * lo.values()[k];
            let rhs = f.values()[k] + 0.5 * dt * d * lf.values()[k] + dt * e.values()[k];
            assert!((lhs - rhs).abs() < 1e-11);
        }
    }

    #[test]
    fn iterative_reports_divergence() {
        let f = field(21, |x, _| (x * 9.0).cos());
        let cfg = SchemeConfig {
            diffusion_solver: DiffusionSolver::Iterative,
            max_iterations: 2,
            ..Default::default()
        };
        let err = diffusion_step_cn(&f, 5.0, 1e-2, &cfg, &f.zeros_like()).unwrap_err();
        assert!(matches!(err, Error::SolverDiverged { iterations: 2, .. }));
    }

    #[test]
    fn taxis_constant_signal_is_zero() {
        let w = field(11, |x, y| 1.0 + x * y);
        let c = field(11, |_, _| 0.4);
        let d = taxis_divergence(&w, &c, 0.5, TaxisMode::Linear, 0.0).unwrap();
        assert!(d.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn taxis_linear_ramp() {
        let n = 11;
        let h = 0.1;
        let w = field(n, |_, _| 1.0);
        let c = field(n, |x, _| x);
        let d = taxis_divergence(&w, &c, 1.0, TaxisMode::Linear, 0.0).unwrap();
        for i in 0..n {
            for j in 0..n {
                let v = d.at(i, j);
                if i == 0 {
                    assert!((v - 1.0 / (0.5 * h)).abs() < 1e-9);
                } else if i == n - 1 {
                    assert!((v + 1.0 / (0.5 * h)).abs() < 1e-9);
                } else {
                    assert!(v.abs() < 1e-9);
                }
            }
        }
        assert!(d.integral().abs() < 1e-12);
    }

    #[test]
    fn taxis_with_unit_weights_is_the_laplacian() {
        let w = field(15, |_, _| 1.0);
        let c = field(15, |x, y| (x * 4.0).sin() * y);
        let d = taxis_divergence(&w, &c, 1.0, TaxisMode::Linear, 0.0).unwrap();
        let l = laplacian_neumann(&c);
        for (a, b) in d.values().iter().zip(l.values()) {
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn saturation_divides_flux() {
        let w = field(11, |_, _| 2.0);
        let c = field(11, |x, _| x);
        let lin = taxis_face_fluxes(&w, &c, 0.5, TaxisMode::Linear, 100.0).unwrap();
        let sat = taxis_face_fluxes(&w, &c, 0.5, TaxisMode::Saturated, 100.0).unwrap();
        for (a, b) in lin.x.iter().zip(&sat.x) {
            if *a != 0.0 {
                assert!((b / a - 1.0 / 101.0).abs() < 1e-12);
            }
        }
        assert_eq!(sat.max_boundary_flux(), 0.0);
    }

    #[test]
    fn taxis_is_mass_neutral() {
        let w = field(19, |x, y| 1.0 + (x * 13.0).sin() * (y * 7.0).cos());
        let c = field(19, |x, y| (x * y * 11.0).cos() + x);
        for mode in [TaxisMode::Linear, TaxisMode::Saturated] {
            let fl = taxis_face_fluxes(&w, &c, 0.7, mode, 100.0).unwrap();
            assert_eq!(fl.max_boundary_flux(), 0.0);
            let d = taxis_divergence(&w, &c, 0.7, mode, 100.0).unwrap();
            let scale = d.values().iter().fold(0.0f64, |m, v| m.max(v.abs())) * d.area();
            assert!(d.integral().abs() <= 1e-12 * scale);
        }
    }

    fn base_state(n: usize, s: f64, r: f64, i: f64) -> HybridState {
        HybridState::uniform(n, n, s, r, i, 1.0, 0.0, None).unwrap()
    }

    #[test]
    fn equilibrium_is_fixed() {
        let p = ModelParams::default();
        let grid = GridSpec::unit_square(11, 1e-2, 1.0);
        let st = base_state(11, 1.0, 1.0, 0.0);
        let out = step_hybrid(&st, &p, &grid, &SchemeConfig::default(), Coupling::Base).unwrap();
        assert!(!out.broke_down);
        for (a, b) in out.state.fields().iter().zip(st.fields()) {
            for (x, y) in a.1.values().iter().zip(b.1.values()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn feedback_equilibrium_is_fixed() {
        let p = ModelParams::default();
        let grid = GridSpec::unit_square(11, 1e-2, 1.0);
        let st = HybridState::uniform(11, 11, 1.0, 1.0, 0.0, 1.0, 0.0, Some(0.5)).unwrap();
        let cfg = SchemeConfig {
            taxis_mode: TaxisMode::Linear,
            ..Default::default()
        };
        let out = step_hybrid(&st, &p, &grid, &cfg, Coupling::Feedback).unwrap();
        let c = out.state.c.unwrap();
        assert!(c.values().iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn uniform_drug_decay() {
        let p = ModelParams::default();
        let grid = GridSpec::unit_square(11, 1e-2, 1.0);
        let st = base_state(11, 1.0, 1.0, 1.0);
        let run = run_simulation(&st, &p, &grid, &SchemeConfig::default(), Coupling::Base, 1, |_, _| {}).unwrap();
        let i = run.outcome.state.i.max();
        assert!((i - 0.99f64.powi(100)).abs() < 1e-12);
        assert!((i - (-1.0f64).exp()).abs() < 2e-3);
        assert_eq!(run.steps_taken, 100);
        assert!((run.outcome.state.t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_stroma_keeps_pool() {
        let p = ModelParams::default();
        let grid = GridSpec::unit_square(9, 1e-2, 1.0);
        let st = base_state(9, 1.0, 1.0, 2.0);
        let cfg = SchemeConfig {
            exact_stroma: true,
            ..Default::default()
        };
        let run = run_simulation(&st, &p, &grid, &cfg, Coupling::Base, 10, |_, _| {}).unwrap();
        assert!(run.outcome.conservation_error < 1e-14);
        assert!(run.outcome.state.fa.max() > 0.1);
    }

    #[test]
    fn observer_cadence() {
        let p = ModelParams::default();
        let grid = GridSpec::unit_square(9, 1e-2, 0.25);
        let st = base_state(9, 1.0, 1.0, 0.0);
        let mut seen = Vec::new();
        run_simulation(&st, &p, &grid, &SchemeConfig::default(), Coupling::Base, 10, |k, _| seen.push(k)).unwrap();
        assert_eq!(seen, vec![0, 10, 20, 25]);
    }

    #[test]
    fn breakdown_is_reported_not_raised() {
        let p = ModelParams::default();
        let grid = GridSpec::unit_square(9, 1e-2, 1.0);
        let mut st = base_state(9, 1.0, 1.0, 0.0);
        st.s.values_mut()[5] = f64::NAN;
        let out = step_hybrid(&st, &p, &grid, &SchemeConfig::default(), Coupling::Base).unwrap();
        assert!(out.broke_down);
        assert_eq!(out.breakdown_reason, Some(BreakdownReason::Nan));
        st.s.values_mut()[5] = 1.0;
        st.p.values_mut()[5] = 1e7;
        let out = step_hybrid(&st, &p, &grid, &SchemeConfig::default(), Coupling::Base).unwrap();
        assert_eq!(out.breakdown_reason, Some(BreakdownReason::MaxExceeded));
    }

    #[test]
    fn grid_mismatch_and_missing_signal() {
        let p = ModelParams::default();
        let grid = GridSpec::unit_square(9, 1e-2, 1.0);
        let st = base_state(11, 1.0, 1.0, 0.0);
        assert!(step_hybrid(&st, &p, &grid, &SchemeConfig::default(), Coupling::Base).is_err());
        let st = base_state(9, 1.0, 1.0, 0.0);
        assert!(step_hybrid(&st, &p, &grid, &SchemeConfig::default(), Coupling::Feedback).is_err());
    }
}
