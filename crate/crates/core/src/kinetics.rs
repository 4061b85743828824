//! Pointwise reaction terms, the post-washout reduced `(S, R)` system,
//! its coexistence equilibrium, Jacobians and Lyapunov function.

use crate::error::{Error, Result};
use crate::linalg::Mat2;
use crate::model::ModelParams;

/// One spatial point of the full base model.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PointState {
    pub s: f64,
    pub r: f64,
    pub i: f64,
    pub p: f64,
    pub fa: f64,
}

/// Reaction values `(G1, ..., G5)` at a point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Reaction {
    pub g_s: f64,
    pub g_r: f64,
    pub g_i: f64,
    pub g_p: f64,
    pub g_fa: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ReducedState {
    pub s: f64,
    pub r: f64,
}

impl ReducedState {
    pub fn new(s: f64, r: f64) -> Self {
        Self { s, r }
    }
}

/// Point at which a Jacobian was evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalPoint {
    pub s: f64,
    pub r: f64,
    pub i: f64,
    pub fa: f64,
}

/// Jacobian `[[a, b], [c, d]]` of the `(S, R)` kinetics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobianSR {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub at: EvalPoint,
}

impl JacobianSR {
    /// Jacobian not tied to a model evaluation point.
    pub fn from_entries(a: f64, b: f64, c: f64, d: f64) -> Self {
        Self {
            a,
            b,
            c,
            d,
            at: EvalPoint::default(),
        }
    }

    pub fn matrix(&self) -> Mat2 {
        Mat2::new(self.a, self.b, self.c, self.d)
    }

    pub fn trace(&self) -> f64 {
        self.a + self.d
    }

    pub fn det(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    pub fn is_kinetically_stable(&self) -> bool {
        self.trace() < 0.0 && self.det() > 0.0
    }

    pub fn require_kinetic_stability(&self) -> Result<()> {
        if self.is_kinetically_stable() {
            Ok(())
        } else {
            Err(Error::KineticInstability {
                trace: self.trace(),
                det: self.det(),
            })
        }
    }
}

/// Reaction map of the base system. `G4 + G5 = 0` by construction.
pub fn reaction_rhs(u: PointState, p: &ModelParams) -> Result<Reaction> {
    for (name, v) in [("S", u.s), ("R", u.r), ("I", u.i), ("P", u.p), ("Fa", u.fa)] {
        if v.is_nan() || v < 0.0 {
            return Err(Error::Domain(format!("{name} must be >= 0, got {v}")));
        }
    }
    Ok(reaction_unchecked(u, p))
}

#[inline]
pub(crate) fn reaction_unchecked(u: PointState, p: &ModelParams) -> Reaction {
    let phi = p.phi_unchecked(u.i);
    let delta = p.delta_unchecked(u.i);
    let crowd = 1.0 - (u.s + u.r) / p.k;
    let back_switch = p.xi * (1.0 - phi) * u.r;
    let conversion = -p.theta * phi * u.p + p.beta * (1.0 - phi) * u.fa;
    Reaction {
        g_s: p.lambda_s * u.s * crowd - p.alpha * u.s - delta * u.s + back_switch,
        g_r: p.lambda_r * u.r * crowd + p.alpha * u.s + p.eta * phi * u.fa * u.r - back_switch,
        g_i: -p.gamma_i * u.i,
        g_p: conversion,
        g_fa: -conversion,
    }
}

/// Right-hand side `(f_S, f_R)` of the reduced drug-free system.
pub fn reduced_rhs(s: ReducedState, p: &ModelParams) -> (f64, f64) {
    let crowd = 1.0 - (s.s + s.r) / p.k;
    (
        p.lambda_s * s.s * crowd - p.alpha * s.s + p.xi * s.r,
        p.lambda_r * s.r * crowd + p.alpha * s.s - p.xi * s.r,
    )
}

/// Interior coexistence equilibrium `(xi K, alpha K) / (alpha + xi)`.
pub fn coexistence_equilibrium(p: &ModelParams) -> Result<ReducedState> {
    let total = p.alpha + p.xi;
    if !(total > 0.0) {
        return Err(Error::DegenerateSwitching);
    }
    Ok(ReducedState::new(p.xi * p.k / total, p.alpha * p.k / total))
}

/// `xi / alpha`, equal to `S* / R*`.
pub fn diagnostic_ratio(p: &ModelParams) -> Result<f64> {
    if !(p.alpha > 0.0) {
        return Err(Error::RFreeRegime);
    }
    Ok(p.xi / p.alpha)
}

/// Lyapunov function `V = (S + R - K)^2` and its time derivative along the
/// reduced flow.
pub fn lyapunov_v(s: ReducedState, p: &ModelParams) -> (f64, f64) {
    let excess = s.s + s.r - p.k;
    let v = excess * excess;
    let dv = -2.0 / p.k * v * (p.lambda_s * s.s + p.lambda_r * s.r);
    (v, dv)
}

/// Jacobian of the reduced system at the coexistence equilibrium.
pub fn jacobian_reduced(p: &ModelParams) -> Result<JacobianSR> {
    let eq = coexistence_equilibrium(p)?;
    let (s, r, k) = (eq.s, eq.r, p.k);
    Ok(JacobianSR {
        a: p.lambda_s * (1.0 - (2.0 * s + r) / k) - p.alpha,
        b: -p.lambda_s * s / k + p.xi,
        c: p.alpha - p.lambda_r * r / k,
        d: p.lambda_r * (1.0 - (s + 2.0 * r) / k) - p.xi,
        at: EvalPoint {
            s,
            r,
            i: 0.0,
            fa: 0.0,
        },
    })
}

/// Jacobian of the `(S, R)` kinetics with the drug and activated stroma
/// frozen at `(I*, Fa*)`.
pub fn jacobian_general(at: EvalPoint, p: &ModelParams) -> Result<JacobianSR> {
    if at.i.is_nan() || at.i < 0.0 {
        return Err(Error::Domain(format!("I* must be >= 0, got {}", at.i)));
    }
    let phi = p.phi_unchecked(at.i);
    let delta = p.delta_unchecked(at.i);
    let sigma = p.xi * (1.0 - phi);
    let zeta = p.eta * phi * at.fa;
    let (s, r, k) = (at.s, at.r, p.k);
    Ok(JacobianSR {
        a: p.lambda_s * (1.0 - (2.0 * s + r) / k) - p.alpha - delta,
        b: -p.lambda_s / k * s + sigma,
        c: p.alpha - p.lambda_r / k * r,
        d: p.lambda_r * (1.0 - (s + 2.0 * r) / k) + zeta - sigma,
        at,
    })
}

/// Classical fourth-order Runge-Kutta integration of the reduced system.
/// Returns `(t, state)` samples including both endpoints.
pub fn integrate_reduced(
    s0: ReducedState,
    p: &ModelParams,
    dt: f64,
    t_final: f64,
) -> Result<Vec<(f64, ReducedState)>> {
    if !(dt > 0.0) || !(t_final >= dt) {
        return Err(Error::Domain(format!(
            "need dt > 0 and T >= dt, got dt = {dt}, T = {t_final}"
        )));
    }
    let steps = (t_final / dt).round() as usize;
    let f = |x: ReducedState| {
        let (a, b) = reduced_rhs(x, p);
        ReducedState::new(a, b)
    };
    let axpy = |x: ReducedState, k: ReducedState, w: f64| ReducedState::new(x.s + w * k.s, x.r + w * k.r);

    let mut out = Vec::with_capacity(steps + 1);
    let mut x = s0;
    out.push((0.0, x));
    for n in 1..=steps {
        let k1 = f(x);
        let k2 = f(axpy(x, k1, 0.5 * dt));
        let k3 = f(axpy(x, k2, 0.5 * dt));
        let k4 = f(axpy(x, k3, dt));
        x = ReducedState::new(
            x.s + dt / 6.0 * (k1.s + 2.0 * k2.s + 2.0 * k3.s + k4.s),
            x.r + dt / 6.0 * (k1.r + 2.0 * k2.r + 2.0 * k3.r + k4.r),
        );
        let t = n as f64 * dt;
        if !x.s.is_finite() || !x.r.is_finite() {
            return Err(Error::NonFinite {
                t,
                what: format!("reduced state ({}, {})", x.s, x.r),
            });
        }
        out.push((t, x));
    }
    Ok(out)
}
