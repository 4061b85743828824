//! Parameter sets, drug response functions and the field/state containers
//! shared by the kinetics, spectral and PDE layers.
//!
//! All quantities are nondimensional and the spatial domain is a square of
//! side `(n - 1) * h` (the unit square for the default grid).

use std::fmt;

use crate::error::{Error, Result};

/// Every rate and coefficient of the hybrid model and its chemotaxis
/// extensions. Fields that a scenario does not use are simply ignored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub d_s: f64,
    pub d_r: f64,
    pub d_i: f64,
    pub d_c: f64,
    pub lambda_s: f64,
    pub lambda_r: f64,
    /// Shared carrying capacity of `S + R`.
    pub k: f64,
    /// Switching rate S -> R.
    pub alpha: f64,
    /// Switching rate R -> S (drug-off switch).
    pub xi: f64,
    /// Promotion of R by activated stroma.
    pub eta: f64,
    pub theta: f64,
    pub beta: f64,
    pub gamma_i: f64,
    pub delta_0: f64,
    pub k_i: f64,
    pub kappa_phi: f64,
    /// Unidirectional taxis sensitivities.
    pub chi_s: f64,
    pub chi_r: f64,
    /// Taxis sensitivity of S in the explicit feedback model.
    pub chi_s_prime: f64,
    pub kappa_c: f64,
    pub rho_c: f64,
    /// Flux-saturation strength in `grad c / (1 + alpha_c |grad c|)`.
    pub alpha_c: f64,
    /// Total stromal pool `P + F_a`.
    pub p_total: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            d_s: 1e-3,
            d_r: 1e-3,
            d_i: 5.0,
            d_c: 5e-3,
            lambda_s: 0.5,
            lambda_r: 0.5,
            k: 2.0,
            alpha: 0.1,
            xi: 0.1,
            eta: 0.2,
            theta: 1.0,
            beta: 0.5,
            gamma_i: 1.0,
            delta_0: 0.5,
            k_i: 0.5,
            kappa_phi: 5.0,
            chi_s: 0.5,
            chi_r: 0.5,
            chi_s_prime: 0.5,
            kappa_c: 0.8,
            rho_c: 1.6,
            alpha_c: 100.0,
            p_total: 1.0,
        }
    }
}

type Accessor = fn(&mut ModelParams) -> &mut f64;

/// External names of the parameters, as used in config files, sweeps and
/// violation messages.
pub const PARAM_KEYS: &[(&str, Accessor)] = &[
    ("d_S", |p| &mut p.d_s),
    ("d_R", |p| &mut p.d_r),
    ("d_I", |p| &mut p.d_i),
    ("d_c", |p| &mut p.d_c),
    ("lambda_S", |p| &mut p.lambda_s),
    ("lambda_R", |p| &mut p.lambda_r),
    ("K", |p| &mut p.k),
    ("alpha", |p| &mut p.alpha),
    ("xi", |p| &mut p.xi),
    ("eta", |p| &mut p.eta),
    ("theta", |p| &mut p.theta),
    ("beta", |p| &mut p.beta),
    ("gamma_I", |p| &mut p.gamma_i),
    ("delta_0", |p| &mut p.delta_0),
    ("K_I", |p| &mut p.k_i),
    ("kappa_phi", |p| &mut p.kappa_phi),
    ("chi_S", |p| &mut p.chi_s),
    ("chi_R", |p| &mut p.chi_r),
    ("chi_S_prime", |p| &mut p.chi_s_prime),
    ("kappa_c", |p| &mut p.kappa_c),
    ("rho_c", |p| &mut p.rho_c),
    ("alpha_c", |p| &mut p.alpha_c),
    ("P_T", |p| &mut p.p_total),
];

/// A single failed invariant of [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: &'static str,
    pub constraint: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.constraint)
    }
}

impl ModelParams {
    pub fn get(&self, key: &str) -> Option<f64> {
        let mut copy = *self;
        PARAM_KEYS
            .iter()
            .find(|(name, _)| *name == key)
            .map(|(_, acc)| *acc(&mut copy))
    }

    /// Sets a parameter by its external name. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: f64) -> bool {
        match PARAM_KEYS.iter().find(|(name, _)| *name == key) {
            Some((_, acc)) => {
                *acc(self) = value;
                true
            }
            None => false,
        }
    }

    /// Lists every violated invariant; empty iff the parameter set is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut copy = *self;
        for (name, acc) in PARAM_KEYS {
            let v = *acc(&mut copy);
            if !v.is_finite() {
                out.push(Violation {
                    field: name,
                    constraint: format!("{name} must be finite"),
                });
            } else if v < 0.0 && *name != "K" && *name != "K_I" {
                out.push(Violation {
                    field: name,
                    constraint: format!("{name} >= 0"),
                });
            }
        }
        if !(self.k > 0.0) {
            out.push(Violation {
                field: "K",
                constraint: "K > 0".into(),
            });
        }
        if !(self.k_i > 0.0) {
            out.push(Violation {
                field: "K_I",
                constraint: "K_I > 0".into(),
            });
        }
        if !(self.alpha + self.xi > 0.0) {
            out.push(Violation {
                field: "alpha",
                constraint: "alpha + xi > 0".into(),
            });
        }
        out
    }

    pub fn validated(self) -> Result<Self> {
        let v = self.validate();
        if v.is_empty() {
            Ok(self)
        } else {
            let msg: Vec<String> = v.iter().map(|x| x.constraint.clone()).collect();
            Err(Error::InvalidParams(msg.join("; ")))
        }
    }

    /// Michaelis-Menten inhibition `delta_0 I / (I + K_I)`.
    pub fn delta_of_i(&self, i: f64) -> Result<f64> {
        check_concentration(i)?;
        Ok(self.delta_unchecked(i))
    }

    /// Stromal activation switch `tanh(kappa_phi I)`.
    pub fn phi_of_i(&self, i: f64) -> Result<f64> {
        check_concentration(i)?;
        Ok(self.phi_unchecked(i))
    }

    #[inline]
    pub(crate) fn delta_unchecked(&self, i: f64) -> f64 {
        if i.is_infinite() {
            return self.delta_0;
        }
        self.delta_0 * i / (i + self.k_i)
    }

    #[inline]
    pub(crate) fn phi_unchecked(&self, i: f64) -> f64 {
        (self.kappa_phi * i).tanh()
    }
}

fn check_concentration(i: f64) -> Result<()> {
    if i.is_nan() || i < 0.0 {
        Err(Error::Domain(format!("concentration must be >= 0, got {i}")))
    } else {
        Ok(())
    }
}

/// Scalar field on a uniform node-centred grid. Node `(i, j)` sits at
/// `(i h, j h)` and is stored at `values[i * ny + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field2D {
    nx: usize,
    ny: usize,
    h: f64,
    values: Vec<f64>,
}

impl Field2D {
    /// Field on the unit-square grid, `h = 1 / (nx - 1)`.
    pub fn new(nx: usize, ny: usize, values: Vec<f64>) -> Result<Self> {
        if nx < 3 {
            return Err(Error::GridMismatch(format!("need nx >= 3, got {nx}")));
        }
        Self::with_spacing(nx, ny, 1.0 / (nx - 1) as f64, values)
    }

    pub fn with_spacing(nx: usize, ny: usize, h: f64, values: Vec<f64>) -> Result<Self> {
        if nx < 3 || ny < 3 {
            return Err(Error::GridMismatch(format!(
                "need nx, ny >= 3, got {nx} x {ny}"
            )));
        }
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::GridMismatch(format!("mesh size must be > 0, got {h}")));
        }
        if values.len() != nx * ny {
            return Err(Error::GridMismatch(format!(
                "expected {} values for a {nx} x {ny} grid, got {}",
                nx * ny,
                values.len()
            )));
        }
        Ok(Self { nx, ny, h, values })
    }

    pub fn constant(nx: usize, ny: usize, value: f64) -> Result<Self> {
        Self::new(nx, ny, vec![value; nx * ny])
    }

    /// Samples `f(x, y)` at the grid nodes.
    pub fn from_fn(nx: usize, ny: usize, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let mut field = Self::constant(nx, ny, 0.0)?;
        let h = field.h;
        for i in 0..nx {
            for j in 0..ny {
                field.values[i * ny + j] = f(i as f64 * h, j as f64 * h);
            }
        }
        Ok(field)
    }

    /// Zero field with the same geometry.
    pub fn zeros_like(&self) -> Self {
        Self {
            nx: self.nx,
            ny: self.ny,
            h: self.h,
            values: vec![0.0; self.values.len()],
        }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.ny + j
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.ny + j]
    }

    pub fn same_grid(&self, other: &Field2D) -> bool {
        self.nx == other.nx && self.ny == other.ny && self.h == other.h
    }

    pub fn ensure_same_grid(&self, other: &Field2D) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{}x{} (h={}) vs {}x{} (h={})",
                self.nx, self.ny, self.h, other.nx, other.ny, other.h
            )))
        }
    }

    /// Trapezoidal quadrature weight of node `(i, j)`, including the `h^2`
    /// cell area.
    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let wx = if i == 0 || i == self.nx - 1 { 0.5 } else { 1.0 };
        let wy = if j == 0 || j == self.ny - 1 { 0.5 } else { 1.0 };
        wx * wy * self.h * self.h
    }

    /// Trapezoidal integral over the domain, summed in row-major order.
    pub fn integral(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.nx {
            for j in 0..self.ny {
                acc += self.weight(i, j) * self.at(i, j);
            }
        }
        acc
    }

    pub fn area(&self) -> f64 {
        (self.nx - 1) as f64 * (self.ny - 1) as f64 * self.h * self.h
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn clamp_nonnegative(&mut self) {
        for v in &mut self.values {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

/// Full model state `(S, R, I, P, F_a)` plus the optional chemoattractant.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridState {
    pub s: Field2D,
    pub r: Field2D,
    pub i: Field2D,
    pub p: Field2D,
    pub fa: Field2D,
    pub c: Option<Field2D>,
    pub t: f64,
}

impl HybridState {
    pub fn new(
        s: Field2D,
        r: Field2D,
        i: Field2D,
        p: Field2D,
        fa: Field2D,
        c: Option<Field2D>,
        t: f64,
    ) -> Result<Self> {
        for other in [&r, &i, &p, &fa].into_iter().chain(c.as_ref()) {
            s.ensure_same_grid(other)?;
        }
        Ok(Self { s, r, i, p, fa, c, t })
    }

    /// Spatially uniform state.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(
        nx: usize,
        ny: usize,
        s: f64,
        r: f64,
        i: f64,
        p: f64,
        fa: f64,
        c: Option<f64>,
    ) -> Result<Self> {
        let f = |v| Field2D::constant(nx, ny, v);
        Self::new(f(s)?, f(r)?, f(i)?, f(p)?, f(fa)?, c.map(f).transpose()?, 0.0)
    }

    /// Named fields in output order.
    pub fn fields(&self) -> Vec<(&'static str, &Field2D)> {
        let mut out = vec![
            ("S", &self.s),
            ("R", &self.r),
            ("I", &self.i),
            ("P", &self.p),
            ("Fa", &self.fa),
        ];
        if let Some(c) = &self.c {
            out.push(("c", c));
        }
        out
    }

    /// `max |P + F_a - p_total|` over the grid.
    pub fn pool_error(&self, p_total: f64) -> f64 {
        self.p
            .values()
            .iter()
            .zip(self.fa.values())
            .map(|(p, fa)| (p + fa - p_total).abs())
            .fold(0.0, f64::max)
    }
}
