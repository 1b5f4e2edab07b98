//! Forward propagation of the value function κ(t, q, γ) in log-odds
//! coordinates `q = log(π₂ / π₁)` and chart coordinate γ.
//!
//! κ solves
//!
//! ```text
//! ∂_t κ = −(b̃ + φ̃ Ẏ) ∂_q κ − (ε/2) (∂_γ κ)² + f̃₀ + ψ̃ Ẏ,    κ(0) = g̃
//! ```
//!
//! where `f̃ = f̃₀ + u² / (2ε)`. Two representations are provided: a
//! quadratic ansatz `κ ≈ c + ½ (z − ẑ)ᵀ P (z − ẑ)` stepped as a rough
//! differential equation in `(c, ẑ, P)`, and a semi-Lagrangian grid scheme
//! built on the dynamic programming principle.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{logistic, ChartFamily, ParamChart, WonhamCoefficients};
use crate::penalty::{penalty_beta, Cost, PenaltySpec};
use crate::rde::{solve_backward, SolveOptions};
use crate::rough_path::{SampledPath, SampledRoughPath};

pub const DEFAULT_EIGEN_FLOOR: f64 = 1e-8;

/// Scalar-observation dynamics in `(q, γ)` with state-independent `φ̃`.
///
/// Hessians are returned as `[∂qq, ∂qγ, ∂γγ]`.
pub trait ValueDynamics: Sync {
    fn drift(&self, q: f64, g: f64) -> f64;
    fn drift_grad(&self, q: f64, g: f64) -> [f64; 2];
    fn diffusion(&self, g: f64) -> f64;
    fn diffusion_derivative(&self, g: f64) -> f64;
    fn integrand(&self, q: f64, g: f64) -> f64;
    fn integrand_grad(&self, q: f64, g: f64) -> [f64; 2];
    fn integrand_hessian(&self, q: f64, g: f64) -> [f64; 3];
    /// Control-free part `f̃₀` of the running cost.
    fn cost(&self, q: f64, g: f64) -> f64;
    fn cost_grad(&self, q: f64, g: f64) -> [f64; 2];
    fn cost_hessian(&self, q: f64, g: f64) -> [f64; 3];
    /// `ε` in the control cost `u² / (2ε)`.
    fn eps(&self) -> f64;
    /// `g̃`, a quadratic centred at the origin.
    fn initial_cost(&self, q: f64, g: f64) -> f64;
    fn initial_curvature(&self) -> [f64; 3];

    fn running_cost(&self, q: f64, g: f64, u: f64) -> f64 {
        self.cost(q, g) + u * u / (2.0 * self.eps())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Family {
    Rate { nu: f64, alpha: f64 },
    Observation { lambda: f64, mu: f64, nu1: f64, nu2: f64 },
}

/// Log-odds form of the two built-in chart families together with the
/// quadratic penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedDynamics {
    family: Family,
    spec: PenaltySpec,
}

pub fn transform_dynamics(chart: &dyn ParamChart, spec: &PenaltySpec) -> Result<TransformedDynamics> {
    spec.validate()?;
    let family = match chart.family() {
        ChartFamily::RateUncertain { nu, alpha } => Family::Rate { nu, alpha },
        ChartFamily::ObservationUncertain { lambda, mu, nu1, nu2 } => Family::Observation { lambda, mu, nu1, nu2 },
        ChartFamily::Other => {
            return Err(Error::Unsupported(
                "log-odds dynamics exist only for the two-state rate and signal families".into(),
            ))
        }
    };
    Ok(TransformedDynamics {
        family,
        spec: spec.clone(),
    })
}

impl TransformedDynamics {
    pub fn spec(&self) -> &PenaltySpec {
        &self.spec
    }

    /// Chart parameter (`λ` or `α`) at coordinate `g`.
    pub fn parameter(&self, g: f64) -> f64 {
        match self.family {
            Family::Rate { nu, .. } => nu * logistic(g),
            Family::Observation { .. } => self.signal(g)[0],
        }
    }

    /// `"lambda"` or `"alpha"`.
    pub fn parameter_name(&self) -> &'static str {
        match self.family {
            Family::Rate { .. } => "lambda",
            Family::Observation { .. } => "alpha",
        }
    }

    /// `[α, α', α'']` at `g`.
    fn signal(&self, g: f64) -> [f64; 3] {
        match self.family {
            Family::Rate { alpha, .. } => [alpha, 0.0, 0.0],
            Family::Observation { nu1, nu2, .. } => {
                let s = logistic(g);
                let w = nu2 - nu1;
                let s1 = s * (1.0 - s);
                [nu1 + w * s, w * s1, w * s1 * (1.0 - 2.0 * s)]
            }
        }
    }
}

impl ValueDynamics for TransformedDynamics {
    fn drift(&self, q: f64, g: f64) -> f64 {
        let (ep, em) = (q.exp(), (-q).exp());
        match self.family {
            Family::Rate { nu, .. } => nu * logistic(g) * (2.0 + ep + em) - nu * (1.0 + ep),
            Family::Observation { lambda, mu, .. } => lambda * (1.0 + em) - mu * (1.0 + ep),
        }
    }

    fn drift_grad(&self, q: f64, g: f64) -> [f64; 2] {
        let (ep, em) = (q.exp(), (-q).exp());
        match self.family {
            Family::Rate { nu, .. } => {
                let s = logistic(g);
                let lambda = nu * s;
                [lambda * (ep - em) - nu * ep, nu * s * (1.0 - s) * (2.0 + ep + em)]
            }
            Family::Observation { lambda, mu, .. } => [-lambda * em - mu * ep, 0.0],
        }
    }

    fn diffusion(&self, g: f64) -> f64 {
        2.0 * self.signal(g)[0]
    }

    fn diffusion_derivative(&self, g: f64) -> f64 {
        2.0 * self.signal(g)[1]
    }

    fn integrand(&self, q: f64, g: f64) -> f64 {
        self.signal(g)[0] * (1.0 - 2.0 * logistic(q))
    }

    fn integrand_grad(&self, q: f64, g: f64) -> [f64; 2] {
        let [a, a1, _] = self.signal(g);
        let s = logistic(q);
        [-2.0 * a * s * (1.0 - s), a1 * (1.0 - 2.0 * s)]
    }

    fn integrand_hessian(&self, q: f64, g: f64) -> [f64; 3] {
        let [a, a1, a2] = self.signal(g);
        let s = logistic(q);
        let s1 = s * (1.0 - s);
        [-2.0 * a * s1 * (1.0 - 2.0 * s), -2.0 * a1 * s1, a2 * (1.0 - 2.0 * s)]
    }

    fn cost(&self, q: f64, g: f64) -> f64 {
        let sp = &self.spec;
        let a = self.signal(g)[0];
        let m = 2.0 * logistic(q) - 1.0;
        0.5 * sp.tau * (q - sp.q_anchor).powi(2)
            + 0.5 * sp.delta * (g - sp.gamma_anchor).powi(2)
            + 0.5 * a * a * (m * m + 1.0)
            + sp.constant
    }

    fn cost_grad(&self, q: f64, g: f64) -> [f64; 2] {
        let sp = &self.spec;
        let [a, a1, _] = self.signal(g);
        let s = logistic(q);
        let m = 2.0 * s - 1.0;
        [
            sp.tau * (q - sp.q_anchor) + 2.0 * a * a * m * s * (1.0 - s),
            sp.delta * (g - sp.gamma_anchor) + a * a1 * (m * m + 1.0),
        ]
    }

    fn cost_hessian(&self, q: f64, g: f64) -> [f64; 3] {
        let sp = &self.spec;
        let [a, a1, a2] = self.signal(g);
        let s = logistic(q);
        let s1 = s * (1.0 - s);
        let m = 2.0 * s - 1.0;
        [
            sp.tau + 2.0 * a * a * s1 * (2.0 * s1 - m * m),
            4.0 * a * a1 * m * s1,
            sp.delta + (a1 * a1 + a * a2) * (m * m + 1.0),
        ]
    }

    fn eps(&self) -> f64 {
        self.spec.eps
    }

    fn initial_cost(&self, q: f64, g: f64) -> f64 {
        0.5 * (self.spec.initial_q_weight * q * q + self.spec.initial_gamma_weight * g * g)
    }

    fn initial_curvature(&self) -> [f64; 3] {
        [self.spec.initial_q_weight, 0.0, self.spec.initial_gamma_weight]
    }
}

/// Quadratic representation `κ(q, γ) = c + ½ (z − ẑ)ᵀ P (z − ẑ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticValue {
    pub z_hat: Vector2<f64>,
    pub p: Matrix2<f64>,
    pub c: f64,
}

impl QuadraticValue {
    pub fn new(z_hat: Vector2<f64>, p: Matrix2<f64>, c: f64) -> Result<Self> {
        if (p[(0, 1)] - p[(1, 0)]).abs() > 1e-10 * (1.0 + p.amax()) {
            return Err(Error::domain("curvature matrix is not symmetric"));
        }
        let (lo, _) = eigenvalues(p[(0, 0)], p[(0, 1)], p[(1, 1)]);
        if !(lo > 0.0) {
            return Err(Error::domain(format!("curvature matrix is not positive definite ({lo:.3e})")));
        }
        Ok(Self { z_hat, p, c })
    }

    /// `κ(0) = g̃` for a quadratic initial cost centred at the origin.
    pub fn initial<D: ValueDynamics + ?Sized>(dynamics: &D) -> Self {
        let [a, b, d] = dynamics.initial_curvature();
        Self {
            z_hat: Vector2::zeros(),
            p: Matrix2::new(a, b, b, d),
            c: 0.0,
        }
    }

    pub fn eval(&self, q: f64, g: f64) -> f64 {
        let w = Vector2::new(q, g) - self.z_hat;
        self.c + 0.5 * w.dot(&(self.p * w))
    }

    pub fn shifted(&self) -> Self {
        Self { c: 0.0, ..*self }
    }

    fn pack(&self) -> [f64; 6] {
        [self.c, self.z_hat[0], self.z_hat[1], self.p[(0, 0)], self.p[(0, 1)], self.p[(1, 1)]]
    }
}

fn eigenvalues(a: f64, b: f64, d: f64) -> (f64, f64) {
    let mean = 0.5 * (a + d);
    let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    (mean - rad, mean + rad)
}

/// Raises eigenvalues below `floor` to `floor`, keeping eigenvectors.
fn floor_eigenvalues(a: f64, b: f64, d: f64, floor: f64) -> [f64; 3] {
    let (lo, hi) = eigenvalues(a, b, d);
    if lo >= floor {
        return [a, b, d];
    }
    let theta = 0.5 * (2.0 * b).atan2(a - d);
    let (c, s) = (theta.cos(), theta.sin());
    let (l1, l2) = (hi.max(floor), lo.max(floor));
    // Eigenvector (c, s) carries the larger eigenvalue.
    [l1 * c * c + l2 * s * s, (l1 - l2) * c * s, l1 * s * s + l2 * c * c]
}

fn solve_sym(pqq: f64, pqg: f64, pgg: f64, r: [f64; 2]) -> [f64; 2] {
    let det = pqq * pgg - pqg * pqg;
    [(pgg * r[0] - pqg * r[1]) / det, (pqq * r[1] - pqg * r[0]) / det]
}

/// `−(MᵀP + PM)` for `M = [[m00, m01], [0, 0]]`, packed.
fn transport_term(m00: f64, m01: f64, pqq: f64, pqg: f64) -> [f64; 3] {
    // PM = [[pqq m00, pqq m01], [pqg m00, pqg m01]]
    let pm00 = pqq * m00;
    let pm01 = pqq * m01;
    let pm10 = pqg * m00;
    let pm11 = pqg * m01;
    [-2.0 * pm00, -(pm01 + pm10), -2.0 * pm11]
}

fn lq_drift<D: ValueDynamics + ?Sized>(dynamics: &D, s: &[f64; 6]) -> [f64; 6] {
    let [_, zq, zg, pqq, pqg, pgg] = *s;
    let fg = dynamics.cost_grad(zq, zg);
    let fh = dynamics.cost_hessian(zq, zg);
    let bg = dynamics.drift_grad(zq, zg);
    let shift = solve_sym(pqq, pqg, pgg, fg);
    let t = transport_term(bg[0], bg[1], pqq, pqg);
    let eps = dynamics.eps();
    [
        dynamics.cost(zq, zg),
        dynamics.drift(zq, zg) - shift[0],
        -shift[1],
        t[0] - eps * pqg * pqg + fh[0],
        t[1] - eps * pqg * pgg + fh[1],
        t[2] - eps * pgg * pgg + fh[2],
    ]
}

fn lq_diffusion<D: ValueDynamics + ?Sized>(dynamics: &D, s: &[f64; 6]) -> [f64; 6] {
    let [_, zq, zg, pqq, pqg, pgg] = *s;
    let pg = dynamics.integrand_grad(zq, zg);
    let ph = dynamics.integrand_hessian(zq, zg);
    let shift = solve_sym(pqq, pqg, pgg, pg);
    let t = transport_term(0.0, dynamics.diffusion_derivative(zg), pqq, pqg);
    [
        dynamics.integrand(zq, zg),
        dynamics.diffusion(zg) - shift[0],
        -shift[1],
        t[0] + ph[0],
        t[1] + ph[1],
        t[2] + ph[2],
    ]
}

/// `exp(−M)` for `M = [[a, b], [0, 0]]`.
fn transport_flow(a: f64, b: f64) -> Matrix2<f64> {
    let off = if a.abs() < 1e-12 { -b * (1.0 - 0.5 * a) } else { b * (-a).exp_m1() / a };
    Matrix2::new((-a).exp(), off, 0.0, 1.0)
}

/// One step of the quadratic-ansatz coefficient system
///
/// ```text
/// dc = f̃₀(ẑ) dt + ψ̃(ẑ) dY
/// dẑ = ((b̃, 0) − P⁻¹∇f̃₀) dt + ((φ̃, 0) − P⁻¹∇ψ̃) dY
/// dP = (−(VᵀP + PV) − ε P e_γ e_γᵀ P + ∇²f̃₀) dt + (−(WᵀP + PW) + ∇²ψ̃) dY
/// ```
///
/// with `V = ∇(b̃, 0)` and `W = ∇(φ̃, 0)`, all evaluated at ẑ.
///
/// `(c, ẑ)` are stepped like an RDE, `S + B Δt + Σ ΔY + (DΣ · Σ) ΔYY`, the
/// last term by a central difference along Σ. `P` is split: half of
/// `∇²ψ̃ ΔY`, the congruence `ΦᵀPΦ` with `Φ = exp(−(VΔt + WΔY))`, the
/// control term as the exact update `(P⁻¹ + εΔt e_γe_γᵀ)⁻¹`, then the other
/// half of `∇²ψ̃ ΔY` and `∇²f̃₀ Δt`. The coefficients of the `P` step are
/// taken at the midpoint of the old and new ẑ. A non-positive eigenvalue of
/// the new `P` is a conditioning error; eigenvalues in `(0, floor)` are
/// raised to `floor`.
pub fn lq_step<D: ValueDynamics + ?Sized>(
    v: &QuadraticValue,
    dynamics: &D,
    dy: f64,
    dyy: f64,
    dt: f64,
    eigen_floor: f64,
) -> Result<QuadraticValue> {
    let s = v.pack();
    let b = lq_drift(dynamics, &s);
    let sig = lq_diffusion(dynamics, &s);
    let mut next = [0.0; 3];
    for r in 0..3 {
        next[r] = s[r] + b[r] * dt + sig[r] * dy;
    }
    if dyy != 0.0 {
        let scale = sig[1..].iter().map(|x| x * x).sum::<f64>().sqrt();
        if scale > 0.0 {
            let size = s[1..].iter().fold(1.0f64, |m, x| m.max(x.abs()));
            let h = 1e-6 * size / scale;
            let mut up = s;
            let mut dn = s;
            for r in 0..6 {
                up[r] += h * sig[r];
                dn[r] -= h * sig[r];
            }
            let (su, sd) = (lq_diffusion(dynamics, &up), lq_diffusion(dynamics, &dn));
            for r in 0..3 {
                next[r] += (su[r] - sd[r]) / (2.0 * h) * dyy;
            }
        }
    }
    let (zq, zg) = (0.5 * (s[1] + next[1]), 0.5 * (s[2] + next[2]));
    let fh = dynamics.cost_hessian(zq, zg);
    let ph = dynamics.integrand_hessian(zq, zg);
    let bg = dynamics.drift_grad(zq, zg);
    let half_noise = Matrix2::new(ph[0], ph[1], ph[1], ph[2]) * (0.5 * dy);
    let flow = transport_flow(bg[0] * dt, bg[1] * dt + dynamics.diffusion_derivative(zg) * dy);
    let mut p = flow.transpose() * (v.p + half_noise) * flow;
    let pe = p.column(1).into_owned();
    p -= pe * pe.transpose() * (dynamics.eps() * dt / (1.0 + dynamics.eps() * dt * pe[1]));
    p += half_noise + Matrix2::new(fh[0], fh[1], fh[1], fh[2]) * dt;
    let (pqq, pqg, pgg) = (p[(0, 0)], 0.5 * (p[(0, 1)] + p[(1, 0)]), p[(1, 1)]);
    if next.iter().chain([pqq, pqg, pgg].iter()).any(|x| !x.is_finite()) {
        return Err(Error::Diverged {
            step: 0,
            reason: "non-finite quadratic coefficients".into(),
        });
    }
    let (lo, _) = eigenvalues(pqq, pqg, pgg);
    if !(lo > 0.0) {
        return Err(Error::Conditioning { step: 0, eigenvalue: lo });
    }
    let [a, bq, d] = floor_eigenvalues(pqq, pqg, pgg, eigen_floor);
    Ok(QuadraticValue {
        z_hat: Vector2::new(next[1], next[2]),
        p: Matrix2::new(a, bq, bq, d),
        c: next[0],
    })
}

/// Uniform axis `min + i (max − min) / (n − 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, n: usize) -> Result<Self> {
        let axis = Self { min, max, n };
        axis.validate()?;
        Ok(axis)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || !(self.max > self.min) || !self.min.is_finite() || !self.max.is_finite() {
            return Err(Error::Config(format!("invalid axis {self:?}")));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.max - self.min) / (self.n - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        self.min + i as f64 * self.step()
    }

    /// Cell index and fractional position, or `None` outside the axis.
    fn locate(&self, x: f64) -> Option<(usize, f64)> {
        let h = self.step();
        let pos = (x - self.min) / h;
        let last = (self.n - 1) as f64;
        if !(pos >= -1e-9 && pos <= last + 1e-9) {
            return None;
        }
        let pos = pos.clamp(0.0, last);
        let i = (pos.floor() as usize).min(self.n - 2);
        Some((i, pos - i as f64))
    }
}

/// Range over `x ∈ [lo, hi]` of `c + b x + a x²`.
fn quadratic_range(a: f64, b: f64, c: f64, lo: f64, hi: f64) -> (f64, f64) {
    let f = |x: f64| c + b * x + a * x * x;
    let (mut min, mut max) = (f(lo).min(f(hi)), f(lo).max(f(hi)));
    if a != 0.0 {
        let x = -b / (2.0 * a);
        if x > lo && x < hi {
            min = min.min(f(x));
            max = max.max(f(x));
        }
    }
    (min, max)
}

/// Keys cubic between `p[1]` and `p[2]` at fraction `t`, clamped to the
/// range that both interpolating parabolas (through `p[0..3]` and through
/// `p[1..4]`) take on the cell.
fn cubic_limited(p: [f64; 4], t: f64) -> f64 {
    let (t2, t3) = (t * t, t * t * t);
    let w = [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ];
    let c = w[0] * p[0] + w[1] * p[1] + w[2] * p[2] + w[3] * p[3];
    let left = quadratic_range(0.5 * (p[0] - 2.0 * p[1] + p[2]), 0.5 * (p[2] - p[0]), p[1], 0.0, 1.0);
    let right = quadratic_range(0.5 * (p[1] - 2.0 * p[2] + p[3]), 0.5 * (p[3] - p[1]), p[2], -1.0, 0.0);
    let (lo, hi) = (left.0.max(right.0), left.1.min(right.1));
    if lo > hi {
        return c.clamp(p[1].min(p[2]), p[1].max(p[2]));
    }
    c.clamp(lo, hi)
}

/// κ sampled on a `(q, γ)` grid; `+∞` marks implausible nodes. Values are
/// stored with the γ index varying fastest. Each γ-column may be shifted in
/// `q` by its own offset, so node `(i, j)` sits at
/// `(q_axis[i] + offset[j], g_axis[j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridValue {
    q_axis: Axis,
    g_axis: Axis,
    values: Vec<f64>,
    q_offsets: Vec<f64>,
}

/// Least-squares quadratic fitted around a grid node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticFit {
    pub hessian: Matrix2<f64>,
    pub minimizer: Vector2<f64>,
}

impl GridValue {
    pub fn new(q_axis: Axis, g_axis: Axis, values: Vec<f64>) -> Result<Self> {
        q_axis.validate()?;
        g_axis.validate()?;
        if values.len() != q_axis.n * g_axis.n {
            return Err(Error::domain("grid values do not match the axes"));
        }
        if values.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
            return Err(Error::domain("grid values must be finite or +inf"));
        }
        let q_offsets = vec![0.0; g_axis.n];
        Ok(Self {
            q_axis,
            g_axis,
            values,
            q_offsets,
        })
    }

    /// Replaces the per-column `q` offsets; each must lie within one `q` step.
    pub fn with_q_offsets(mut self, offsets: Vec<f64>) -> Result<Self> {
        if offsets.len() != self.g_axis.n {
            return Err(Error::domain("one q offset per γ node is required"));
        }
        let h = self.q_axis.step();
        if offsets.iter().any(|o| !(o.abs() <= h)) {
            return Err(Error::domain("q offsets must lie within one grid step"));
        }
        self.q_offsets = offsets;
        Ok(self)
    }

    pub fn q_offsets(&self) -> &[f64] {
        &self.q_offsets
    }

    pub fn from_fn(q_axis: Axis, g_axis: Axis, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(q_axis.n * g_axis.n);
        for i in 0..q_axis.n {
            for j in 0..g_axis.n {
                values.push(f(q_axis.point(i), g_axis.point(j)));
            }
        }
        Self::new(q_axis, g_axis, values)
    }

    pub fn from_quadratic(v: &QuadraticValue, q_axis: Axis, g_axis: Axis) -> Result<Self> {
        Self::from_fn(q_axis, g_axis, |q, g| v.eval(q, g))
    }

    pub fn q_axis(&self) -> Axis {
        self.q_axis
    }

    pub fn g_axis(&self) -> Axis {
        self.g_axis
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, iq: usize, ig: usize) -> f64 {
        self.values[iq * self.g_axis.n + ig]
    }

    pub fn node(&self, iq: usize, ig: usize) -> (f64, f64) {
        (self.q_axis.point(iq) + self.q_offsets[ig], self.g_axis.point(ig))
    }

    pub fn finite_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_finite()).count()
    }

    /// Tensor-product cubic convolution (Keys, `a = −½`), first along each
    /// column in `q`, then across columns in γ. It is exact for polynomials of
    /// degree two in each coordinate. Each one-dimensional pass is clamped to
    /// the values the neighbouring parabolas reach on the cell, which stops
    /// overshoot next to steep walls. Stencils touching the edge or a `+∞`
    /// node fall back to [`GridValue::interpolate_bilinear`].
    pub fn interpolate(&self, q: f64, g: f64) -> f64 {
        let Some((j, fg)) = self.g_axis.locate(g) else {
            return f64::INFINITY;
        };
        if fg == 0.0 {
            return self
                .column_cubic(j, q)
                .unwrap_or_else(|| self.interpolate_bilinear(q, g));
        }
        if j == 0 || j + 2 >= self.g_axis.n {
            return self.interpolate_bilinear(q, g);
        }
        let mut cols = [0.0; 4];
        for (k, col) in cols.iter_mut().enumerate() {
            match self.column_cubic(j + k - 1, q) {
                Some(v) => *col = v,
                None => return self.interpolate_bilinear(q, g),
            }
        }
        cubic_limited(cols, fg)
    }

    /// Cubic in `q` along one column, `None` without a finite interior stencil.
    fn column_cubic(&self, c: usize, q: f64) -> Option<f64> {
        let (i, fq) = self.q_axis.locate(q - self.q_offsets[c])?;
        if i == 0 || i + 2 >= self.q_axis.n {
            return None;
        }
        let p = [
            self.value(i - 1, c),
            self.value(i, c),
            self.value(i + 1, c),
            self.value(i + 2, c),
        ];
        p.iter().all(|v| v.is_finite()).then(|| cubic_limited(p, fq))
    }

    /// Whether every node within `margin` of the cubic stencil at `(q, g)`
    /// exists and lies below `ceiling`.
    pub fn stencil_below(&self, q: f64, g: f64, margin: f64, ceiling: f64) -> bool {
        let Some((j, _)) = self.g_axis.locate(g) else {
            return false;
        };
        let reach_g = 1 + (margin / self.g_axis.step()).ceil() as usize;
        let reach_q = 1 + (margin / self.q_axis.step()).ceil() as usize;
        if j < reach_g || j + 1 + reach_g >= self.g_axis.n {
            return false;
        }
        (j - reach_g..=j + 1 + reach_g).all(|c| {
            let Some((i, _)) = self.q_axis.locate(q - self.q_offsets[c]) else {
                return false;
            };
            i >= reach_q
                && i + 1 + reach_q < self.q_axis.n
                && (i - reach_q..=i + 1 + reach_q).all(|r| self.value(r, c) < ceiling)
        })
    }

    /// Bilinear interpolation. Outside the grid the value is `+∞`. Corners at
    /// `+∞` are dropped and the remaining weights renormalized, unless they
    /// carry at least half of the weight, in which case the result is `+∞`.
    pub fn interpolate_bilinear(&self, q: f64, g: f64) -> f64 {
        let Some((j, fg)) = self.g_axis.locate(g) else {
            return f64::INFINITY;
        };
        let (mut acc, mut weight, mut lost) = (0.0, 0.0, 0.0);
        for (c, wc) in [(j, 1.0 - fg), (j + 1, fg)] {
            if wc == 0.0 {
                continue;
            }
            let Some((i, fq)) = self.q_axis.locate(q - self.q_offsets[c]) else {
                lost += wc;
                continue;
            };
            for (a, w) in [(i, wc * (1.0 - fq)), (i + 1, wc * fq)] {
                if w == 0.0 {
                    continue;
                }
                let v = self.value(a, c);
                if v.is_finite() {
                    acc += w * v;
                    weight += w;
                } else {
                    lost += w;
                }
            }
        }
        if lost >= 0.5 || weight == 0.0 {
            f64::INFINITY
        } else {
            acc / weight
        }
    }

    /// Smallest value, `+∞` when every node is implausible.
    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// First node in storage order attaining the minimum.
    pub fn argmin(&self) -> Option<(usize, usize)> {
        let mut best: Option<(usize, f64)> = None;
        for (k, v) in self.values.iter().enumerate() {
            if v.is_finite() && best.is_none_or(|(_, b)| *v < b) {
                best = Some((k, *v));
            }
        }
        best.map(|(k, _)| (k / self.g_axis.n, k % self.g_axis.n))
    }

    /// Subtracts the minimum from every finite node and returns it.
    pub fn shift_to_zero(&mut self) -> Result<f64> {
        let m = self.min_value();
        if !m.is_finite() {
            return Err(Error::NoPlausiblePosterior);
        }
        self.values.iter_mut().filter(|v| v.is_finite()).for_each(|v| *v -= m);
        Ok(m)
    }

    pub fn add_constant(&mut self, c: f64) {
        self.values.iter_mut().for_each(|v| *v += c);
    }

    /// Quadratic least-squares fit over the finite nodes of the 3×3 window
    /// centred at `(iq, ig)`, clipped to the grid; widens to 5×5 when the
    /// small window is degenerate.
    pub fn curvature_fit(&self, iq: usize, ig: usize) -> Option<QuadraticFit> {
        self.fit_window(iq, ig, 1).or_else(|| self.fit_window(iq, ig, 2))
    }

    fn fit_window(&self, iq: usize, ig: usize, radius: usize) -> Option<QuadraticFit> {
        let (q0, g0) = self.node(iq, ig);
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for a in iq.saturating_sub(radius)..(iq + radius + 1).min(self.q_axis.n) {
            for b in ig.saturating_sub(radius)..(ig + radius + 1).min(self.g_axis.n) {
                let v = self.value(a, b);
                if !v.is_finite() {
                    continue;
                }
                let (q, g) = self.node(a, b);
                let (x, y) = (q - q0, g - g0);
                rows.extend_from_slice(&[1.0, x, y, 0.5 * x * x, x * y, 0.5 * y * y]);
                rhs.push(v);
            }
        }
        if rhs.len() < 6 {
            return None;
        }
        let a = DMatrix::from_row_slice(rhs.len(), 6, &rows);
        let sol = a.svd(true, true).solve(&DVector::from_vec(rhs), 1e-12).ok()?;
        let hessian = Matrix2::new(sol[3], sol[4], sol[4], sol[5]);
        let grad = Vector2::new(sol[1], sol[2]);
        let step = hessian.try_inverse()? * grad;
        Some(QuadraticFit {
            hessian,
            minimizer: Vector2::new(q0, g0) - step,
        })
    }
}

/// One backward Euler step from a destination node with control `u`:
/// the source point and the cost accrued along the step.
fn backward_step<D: ValueDynamics + ?Sized>(dynamics: &D, q: f64, g: f64, u: f64, dy: f64, dyy: f64, dt: f64) -> (f64, f64, f64) {
    let phi = dynamics.diffusion(g);
    let qs = q - dynamics.drift(q, g) * dt - phi * dy;
    let gs = g - u * dt;
    let psi_q = dynamics.integrand_grad(qs, gs)[0];
    let phi_s = dynamics.diffusion(gs);
    let cost = dynamics.running_cost(qs, gs, u) * dt + dynamics.integrand(qs, gs) * dy + psi_q * phi_s * dyy;
    (qs, gs, cost)
}

fn check_controls(controls: &[f64]) -> Result<()> {
    if controls.is_empty() || !controls.contains(&0.0) {
        return Err(Error::domain("control set must contain 0"));
    }
    let symmetric = controls.iter().all(|u| controls.iter().any(|w| (w + u).abs() <= 1e-12 * (1.0 + u.abs())));
    if !symmetric {
        return Err(Error::domain("control set must be symmetric about 0"));
    }
    Ok(())
}

/// Semi-Lagrangian dynamic programming step
///
/// ```text
/// κ(t + dt, z) = min_u { κ(t, z′) + f̃(z′, u) dt + ψ̃(z′) dY + ∂_qψ̃ φ̃(z′) dYY }
/// ```
///
/// where `z′` is the backward Euler source of `z` under control `u`. Column
/// offsets advance by `φ̃(γ) dY`, wrapped to within half a step, so that the
/// observation shift of the uncontrolled source lands on the old nodes.
pub fn grid_dp_step<D: ValueDynamics + ?Sized>(
    gv: &GridValue,
    dynamics: &D,
    dy: f64,
    dyy: f64,
    dt: f64,
    controls: &[f64],
) -> Result<GridValue> {
    check_controls(controls)?;
    let ng = gv.g_axis.n;
    let h = gv.q_axis.step();
    let q_offsets: Vec<f64> = (0..ng)
        .map(|j| {
            let o = gv.q_offsets[j] + dynamics.diffusion(gv.g_axis.point(j)) * dy;
            o - h * (o / h).round()
        })
        .collect();
    let mut values = vec![0.0; gv.values.len()];
    values.par_iter_mut().enumerate().for_each(|(k, out)| {
        let (iq, ig) = (k / ng, k % ng);
        let (q, g) = (gv.q_axis.point(iq) + q_offsets[ig], gv.g_axis.point(ig));
        let mut best = f64::INFINITY;
        for &u in controls {
            let (qs, gs, cost) = backward_step(dynamics, q, g, u, dy, dyy, dt);
            let prev = gv.interpolate(qs, gs);
            if prev.is_finite() {
                best = best.min(prev + cost);
            }
        }
        *out = best;
    });
    Ok(GridValue {
        q_axis: gv.q_axis,
        g_axis: gv.g_axis,
        values,
        q_offsets,
    })
}

const MAX_DPP_SEQUENCES: usize = 200_000;

/// Height above the minimum beyond which κ counts as part of a front.
pub const FRONT_LEVEL: f64 = 10.0;

/// Distance in `(q, γ)` around an interpolation stencil checked for fronts.
pub const FRONT_MARGIN: f64 = 0.2;

/// Largest gaps between `kappa_t` and the best control sequence over the
/// steps of a window, composed exactly and closed with `kappa_r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DppResidual {
    /// Over every node where both sides are finite.
    pub finite: f64,
    /// Over front-free nodes only: every control sequence that could still
    /// beat the best one ends where `kappa_r`, within [`FRONT_MARGIN`] of the
    /// interpolation stencil, stays within [`FRONT_LEVEL`] of its minimum.
    /// Next to a `+∞` front κ jumps by orders of magnitude within a cell, and
    /// interpolation there is not consistent at any order.
    pub front_free: f64,
    pub front_free_nodes: usize,
}

pub fn dpp_residual<D: ValueDynamics + ?Sized>(
    kappa_t: &GridValue,
    kappa_r: &GridValue,
    dynamics: &D,
    window: Range<usize>,
    drive: &SampledRoughPath,
    controls: &[f64],
) -> Result<DppResidual> {
    check_controls(controls)?;
    if window.start >= window.end || window.end > drive.steps() {
        return Err(Error::domain("window must be a nonempty range of drive steps"));
    }
    if drive.dim() != 1 {
        return Err(Error::domain("value dynamics take a scalar drive"));
    }
    let len = window.end - window.start;
    let count = controls.len().checked_pow(len as u32).unwrap_or(usize::MAX);
    if count > MAX_DPP_SEQUENCES {
        return Err(Error::domain(format!("window of {len} steps needs {count} control sequences")));
    }
    let times = drive.times();
    let steps: Vec<(f64, f64, f64)> = window
        .clone()
        .map(|i| (drive.step_increment(i)[0], drive.step_area(i)[0], times[i + 1] - times[i]))
        .collect();
    let floor = kappa_r.min_value();
    let ng = kappa_t.g_axis.n;
    let per_node: Vec<Option<(f64, bool)>> = (0..kappa_t.values.len())
        .into_par_iter()
        .map(|k| {
            let target = kappa_t.values[k];
            if !target.is_finite() {
                return None;
            }
            let (q, g) = kappa_t.node(k / ng, k % ng);
            let mut leaves = Vec::with_capacity(count);
            collect_leaves(dynamics, &steps, controls, q, g, 0.0, &mut leaves);
            let best = leaves
                .iter()
                .map(|&(qs, gs, acc)| kappa_r.interpolate(qs, gs) + acc)
                .fold(f64::INFINITY, f64::min);
            if !best.is_finite() {
                return None;
            }
            let clear = leaves
                .iter()
                .filter(|(_, _, acc)| acc + floor <= best)
                .all(|&(qs, gs, _)| kappa_r.stencil_below(qs, gs, FRONT_MARGIN, floor + FRONT_LEVEL));
            Some(((target - best).abs(), clear))
        })
        .collect();
    let mut out = DppResidual {
        finite: 0.0,
        front_free: 0.0,
        front_free_nodes: 0,
    };
    for (gap, clear) in per_node.into_iter().flatten() {
        out.finite = out.finite.max(gap);
        if clear {
            out.front_free = out.front_free.max(gap);
            out.front_free_nodes += 1;
        }
    }
    Ok(out)
}

/// Source points and accrued costs of every control sequence, walking the
/// steps backward from `(q, g)`.
fn collect_leaves<D: ValueDynamics + ?Sized>(
    dynamics: &D,
    steps: &[(f64, f64, f64)],
    controls: &[f64],
    q: f64,
    g: f64,
    acc: f64,
    leaves: &mut Vec<(f64, f64, f64)>,
) {
    let Some((&(dy, dyy, dt), rest)) = steps.split_last() else {
        leaves.push((q, g, acc));
        return;
    };
    for &u in controls {
        let (qs, gs, cost) = backward_step(dynamics, q, g, u, dy, dyy, dt);
        collect_leaves(dynamics, rest, controls, qs, gs, acc + cost, leaves);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Lq,
    Grid,
}

/// `n` controls evenly spaced over `[−u_max, u_max]`; `n` must be odd.
pub fn uniform_controls(n: usize, u_max: f64) -> Result<Vec<f64>> {
    if n % 2 == 0 || !(u_max >= 0.0) {
        return Err(Error::Config(format!("need an odd control count and u_max >= 0, got {n}, {u_max}")));
    }
    if n == 1 {
        return Ok(vec![0.0]);
    }
    let half = (n / 2) as f64;
    Ok((0..n).map(|i| (i as f64 - half) / half * u_max).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub q_axis: Axis,
    pub g_axis: Axis,
    pub controls: Vec<f64>,
}

impl Default for GridConfig {
    /// 101×101 nodes over `[−8, 8]²` with 21 controls in `[−50, 50]`.
    fn default() -> Self {
        let axis = Axis {
            min: -8.0,
            max: 8.0,
            n: 101,
        };
        Self {
            q_axis: axis,
            g_axis: axis,
            controls: uniform_controls(21, 50.0).expect("odd count"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagateOptions {
    pub eigen_floor: f64,
    pub grid: GridConfig,
    /// Keep a grid snapshot every this many steps (grid mode).
    pub snapshot_every: Option<usize>,
}

impl Default for PropagateOptions {
    fn default() -> Self {
        Self {
            eigen_floor: DEFAULT_EIGEN_FLOOR,
            grid: GridConfig::default(),
            snapshot_every: None,
        }
    }
}

/// Per-step record of a propagation run. Index 0 is the initial condition.
#[derive(Debug)]
pub struct ValueTrack {
    pub mode: Mode,
    pub times: Vec<f64>,
    /// Minimizer `(q, γ)`; grid mode reports the argmin node.
    pub minimizers: Vec<[f64; 2]>,
    /// `[P_qq, P_qγ, P_γγ]`; grid mode reports the local quadratic fit.
    pub curvatures: Vec<[f64; 3]>,
    /// Minimum of κ before each shift to zero.
    pub pre_shift_minima: Vec<f64>,
    /// Shifted quadratic values (LQ mode).
    pub quadratics: Vec<QuadraticValue>,
    /// `(step, shifted grid)` pairs (grid mode).
    pub snapshots: Vec<(usize, GridValue)>,
    /// Last shifted grid (grid mode).
    pub final_grid: Option<GridValue>,
    /// Error that stopped the run early, with all records up to it kept.
    pub failure: Option<Error>,
}

impl ValueTrack {
    fn new(mode: Mode) -> Self {
        Self {
            mode,
            times: Vec::new(),
            minimizers: Vec::new(),
            curvatures: Vec::new(),
            pre_shift_minima: Vec::new(),
            quadratics: Vec::new(),
            snapshots: Vec::new(),
            final_grid: None,
            failure: None,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Running sum of the recorded minima: the unshifted minimum of κ.
    pub fn cumulative_minima(&self) -> Vec<f64> {
        self.pre_shift_minima
            .iter()
            .scan(0.0, |acc, m| {
                *acc += m;
                Some(*acc)
            })
            .collect()
    }
}

fn with_step(err: Error, step: usize) -> Error {
    match err {
        Error::Conditioning { eigenvalue, .. } => Error::Conditioning { step, eigenvalue },
        Error::Diverged { reason, .. } => Error::Diverged { step, reason },
        other => other,
    }
}

/// Propagates κ from `κ(0) = g̃` along the drive, shifting to zero after every step.
pub fn propagate<D: ValueDynamics + ?Sized>(
    drive: &SampledRoughPath,
    dynamics: &D,
    mode: Mode,
    opts: &PropagateOptions,
) -> Result<ValueTrack> {
    if drive.dim() != 1 {
        return Err(Error::domain("value dynamics take a scalar drive"));
    }
    match mode {
        Mode::Lq => Ok(propagate_lq(drive, dynamics, opts)),
        Mode::Grid => propagate_grid(drive, dynamics, opts),
    }
}

fn propagate_lq<D: ValueDynamics + ?Sized>(drive: &SampledRoughPath, dynamics: &D, opts: &PropagateOptions) -> ValueTrack {
    let mut track = ValueTrack::new(Mode::Lq);
    let times = drive.times();
    let mut v = QuadraticValue::initial(dynamics);
    let record = |track: &mut ValueTrack, t: f64, v: &QuadraticValue, level: f64| {
        track.times.push(t);
        track.minimizers.push([v.z_hat[0], v.z_hat[1]]);
        track.curvatures.push([v.p[(0, 0)], v.p[(0, 1)], v.p[(1, 1)]]);
        track.pre_shift_minima.push(level);
        track.quadratics.push(*v);
    };
    record(&mut track, times[0], &v, v.c);
    for i in 0..drive.steps() {
        let dy = drive.step_increment(i)[0];
        let dyy = drive.step_area(i)[0];
        match lq_step(&v, dynamics, dy, dyy, times[i + 1] - times[i], opts.eigen_floor) {
            Ok(next) => {
                let level = next.c;
                v = next.shifted();
                record(&mut track, times[i + 1], &v, level);
            }
            Err(e) => {
                track.failure = Some(with_step(e, i));
                break;
            }
        }
    }
    track
}

fn propagate_grid<D: ValueDynamics + ?Sized>(
    drive: &SampledRoughPath,
    dynamics: &D,
    opts: &PropagateOptions,
) -> Result<ValueTrack> {
    let cfg = &opts.grid;
    check_controls(&cfg.controls)?;
    let mut track = ValueTrack::new(Mode::Grid);
    let times = drive.times();
    let mut gv = GridValue::from_fn(cfg.q_axis, cfg.g_axis, |q, g| dynamics.initial_cost(q, g))?;
    let level = gv.shift_to_zero()?;
    record_grid(&mut track, times[0], &gv, level);
    if opts.snapshot_every.is_some() {
        track.snapshots.push((0, gv.clone()));
    }
    for i in 0..drive.steps() {
        let dy = drive.step_increment(i)[0];
        let dyy = drive.step_area(i)[0];
        let mut next = grid_dp_step(&gv, dynamics, dy, dyy, times[i + 1] - times[i], &cfg.controls)?;
        let level = match next.shift_to_zero() {
            Ok(level) => level,
            Err(e) => {
                track.failure = Some(e);
                break;
            }
        };
        gv = next;
        record_grid(&mut track, times[i + 1], &gv, level);
        if let Some(every) = opts.snapshot_every {
            if every > 0 && (i + 1) % every == 0 {
                track.snapshots.push((i + 1, gv.clone()));
            }
        }
    }
    track.final_grid = Some(gv);
    Ok(track)
}

fn record_grid(track: &mut ValueTrack, t: f64, gv: &GridValue, level: f64) {
    let (iq, ig) = gv.argmin().expect("shifted grid has a finite node");
    let (q, g) = gv.node(iq, ig);
    let curv = gv
        .curvature_fit(iq, ig)
        .map(|f| [f.hessian[(0, 0)], f.hessian[(0, 1)], f.hessian[(1, 1)]])
        .unwrap_or([f64::NAN; 3]);
    track.times.push(t);
    track.minimizers.push([q, g]);
    track.curvatures.push(curv);
    track.pre_shift_minima.push(level);
}

/// Outcome of solving the filter backward from a terminal posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardPenalty {
    /// Initial posterior reached, or `None` if the trajectory left the simplex.
    pub initial: Option<Vec<f64>>,
    pub beta: Cost,
}

/// Solves the unprojected filter backward from `terminal` along a parameter
/// path and evaluates β for the resulting initial posterior. Trajectories
/// leaving the open simplex have no physical initial value and cost `+∞`.
pub fn backward_penalty(
    chart: &dyn ParamChart,
    gamma: &SampledPath,
    terminal: &[f64],
    drive: &SampledRoughPath,
    spec: &PenaltySpec,
) -> Result<BackwardPenalty> {
    let sol = solve_backward(
        &WonhamCoefficients::unprojected(chart),
        terminal,
        gamma,
        drive,
        &SolveOptions::default(),
    )?;
    let left = (0..sol.len()).any(|i| sol.state(i).iter().any(|p| !(*p > 0.0 && *p < 1.0)));
    if left {
        return Ok(BackwardPenalty {
            initial: None,
            beta: Cost::Implausible,
        });
    }
    let pi0 = sol.initial().to_vec();
    let beta = penalty_beta(gamma, &pi0, drive, chart, spec)?.total;
    Ok(BackwardPenalty {
        initial: Some(pi0),
        beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::{
        constant_parameter, filter_rough, ObservationUncertainChart, RateUncertainChart, SimplexState,
    };
    use crate::penalty::{observation_integrand_psi, running_cost_f};
    use crate::rough_path::canonical_lift;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn ex61() -> (RateUncertainChart, TransformedDynamics) {
        let chart = RateUncertainChart::new(1.0, 1.0).unwrap();
        let spec = PenaltySpec::new(0.05, 0.05, 1e-3).unwrap();
        let dynamics = transform_dynamics(&chart, &spec).unwrap();
        (chart, dynamics)
    }

    fn ex62() -> (ObservationUncertainChart, TransformedDynamics) {
        let chart = ObservationUncertainChart::new(0.05, 0.05, 0.2, 1.8).unwrap();
        let spec = PenaltySpec::new(0.01, 0.01, 1e-3).unwrap();
        let dynamics = transform_dynamics(&chart, &spec).unwrap();
        (chart, dynamics)
    }

    fn brownian(n: usize, dt: f64, seed: u64) -> SampledPath {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y = vec![0.0];
        for _ in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            y.push(y.last().unwrap() + dt.sqrt() * z);
        }
        SampledPath::uniform(0.0, dt, 1, y).unwrap()
    }

    #[test]
    fn origin_values_of_rate_family() {
        let (_, d) = ex61();
        assert_relative_eq!(d.drift(0.0, 0.0), 0.0, epsilon = 1e-15);
        let lambda: f64 = 0.3;
        let g = (lambda / (1.0 - lambda)).ln();
        assert_relative_eq!(d.drift(0.0, g), 4.0 * (lambda - 0.5), epsilon = 1e-12);
        assert_relative_eq!(d.drift_grad(0.0, 0.0)[0], -1.0, epsilon = 1e-15);
        assert_relative_eq!(d.drift_grad(0.0, 0.0)[1], 1.0, epsilon = 1e-15);
        for q in [-3.0, 0.0, 2.0] {
            assert_eq!(d.diffusion(q), 2.0);
        }
        let h = d.cost_hessian(0.0, 0.0);
        assert_relative_eq!(h[0], 0.05 + 0.25, epsilon = 1e-15);
        assert_relative_eq!(h[2], 0.05, epsilon = 1e-15);
    }

    #[test]
    fn unsupported_chart_is_rejected() {
        let chart = crate::hmm::FixedChart::new(nalgebra::DMatrix::zeros(2, 2), nalgebra::DMatrix::zeros(2, 1)).unwrap();
        let spec = PenaltySpec::new(0.05, 0.05, 1e-3).unwrap();
        assert!(matches!(transform_dynamics(&chart, &spec), Err(Error::Unsupported(_))));
    }

    #[test]
    fn transformed_coefficients_agree_with_filter_coefficients() {
        use crate::rde::RdeCoefficients;
        for (chart, d) in [
            (Box::new(ex61().0) as Box<dyn ParamChart>, ex61().1),
            (Box::new(ex62().0) as Box<dyn ParamChart>, ex62().1),
        ] {
            let coeffs = WonhamCoefficients::new(chart.as_ref());
            for (q, g) in [(-2.0, 0.5), (0.3, -1.0), (1.5, 2.0)] {
                let s = logistic(q);
                let pi = [1.0 - s, s];
                let mut b = [0.0; 2];
                let mut phi = [0.0; 2];
                coeffs.drift(&pi, &[g], &mut b);
                coeffs.diffusion(&pi, &[g], &mut phi);
                // dq = dπ₂ / (π₂(1 − π₂)); the Stratonovich chain rule has no extra term.
                assert_relative_eq!(d.drift(q, g), b[1] / (s * (1.0 - s)), max_relative = 1e-10);
                assert_relative_eq!(d.diffusion(g), phi[1] / (s * (1.0 - s)), max_relative = 1e-10);
                let psi = observation_integrand_psi(&pi, &[g], chart.as_ref()).value[0];
                assert_relative_eq!(d.integrand(q, g), psi, max_relative = 1e-12, epsilon = 1e-14);
                let f = running_cost_f(&pi, &[g], &[0.3], chart.as_ref(), d.spec());
                assert_relative_eq!(d.running_cost(q, g, 0.3), f, max_relative = 1e-12);
            }
        }
    }

    fn fd_grad(f: impl Fn(f64, f64) -> f64, q: f64, g: f64) -> [f64; 2] {
        let h = 1e-5;
        [(f(q + h, g) - f(q - h, g)) / (2.0 * h), (f(q, g + h) - f(q, g - h)) / (2.0 * h)]
    }

    #[test]
    fn derivatives_match_central_differences() {
        for d in [ex61().1, ex62().1] {
            for (q, g) in [(-1.2, 0.4), (0.0, 0.0), (2.1, -0.7)] {
                let checks: [(Box<dyn Fn(f64, f64) -> f64>, [f64; 2]); 3] = [
                    (Box::new(|q, g| d.drift(q, g)), d.drift_grad(q, g)),
                    (Box::new(|q, g| d.cost(q, g)), d.cost_grad(q, g)),
                    (Box::new(|q, g| d.integrand(q, g)), d.integrand_grad(q, g)),
                ];
                for (f, an) in checks.iter() {
                    let fd = fd_grad(f, q, g);
                    for c in 0..2 {
                        assert!((fd[c] - an[c]).abs() < 1e-6 * (1.0 + an[c].abs()), "{fd:?} vs {an:?}");
                    }
                }
                for (grad, hess) in [
                    (
                        Box::new(|q, g| d.cost_grad(q, g)) as Box<dyn Fn(f64, f64) -> [f64; 2]>,
                        d.cost_hessian(q, g),
                    ),
                    (Box::new(|q, g| d.integrand_grad(q, g)), d.integrand_hessian(q, g)),
                ] {
                    let dq = fd_grad(|q, g| grad(q, g)[0], q, g);
                    let dg = fd_grad(|q, g| grad(q, g)[1], q, g);
                    let fd = [dq[0], dq[1], dg[1]];
                    for c in 0..3 {
                        assert!((fd[c] - hess[c]).abs() < 1e-6 * (1.0 + hess[c].abs()), "{fd:?} vs {hess:?}");
                    }
                }
                let h = 1e-5;
                let fd = (d.diffusion(g + h) - d.diffusion(g - h)) / (2.0 * h);
                assert!((fd - d.diffusion_derivative(g)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn log_odds_flow_matches_rough_filter() {
        let (chart, d) = ex61();
        let a = chart.coordinate(0.3).unwrap();
        let mut errs = Vec::new();
        for dt in [4e-3, 1e-3] {
            let n = (5.0 / dt) as usize;
            let y = brownian(n, dt, 17);
            let drive = canonical_lift(&y).unwrap();
            let g = constant_parameter(drive.times(), &[a]).unwrap();
            let pi0 = SimplexState::new(vec![0.6, 0.4]).unwrap();
            let sol = filter_rough(&chart, &g, &pi0, &drive).unwrap();
            let mut q = (0.4f64 / 0.6).ln();
            let mut worst = 0.0f64;
            for i in 0..n {
                q += d.drift(q, a) * dt + d.diffusion(a) * drive.step_increment(i)[0];
                worst = worst.max((logistic(q) - sol.state(i + 1)[1]).abs());
            }
            errs.push(worst);
        }
        assert!(errs[1] < 0.02, "{errs:?}");
        assert!(errs[1] < errs[0], "{errs:?}");
    }

    /// Linear drift and quadratic costs, for exact hand checks.
    struct Toy {
        drift: [f64; 3],
        diffusion: f64,
        cost_level: f64,
        cost_curv: [f64; 3],
        psi: [f64; 2],
        eps: f64,
    }

    impl Toy {
        fn inert() -> Self {
            Self {
                drift: [0.0; 3],
                diffusion: 0.0,
                cost_level: 0.0,
                cost_curv: [0.0; 3],
                psi: [0.0; 2],
                eps: 1.0,
            }
        }
    }

    impl ValueDynamics for Toy {
        fn drift(&self, q: f64, g: f64) -> f64 {
            self.drift[0] + self.drift[1] * q + self.drift[2] * g
        }
        fn drift_grad(&self, _q: f64, _g: f64) -> [f64; 2] {
            [self.drift[1], self.drift[2]]
        }
        fn diffusion(&self, _g: f64) -> f64 {
            self.diffusion
        }
        fn diffusion_derivative(&self, _g: f64) -> f64 {
            0.0
        }
        fn integrand(&self, q: f64, g: f64) -> f64 {
            self.psi[0] * q + self.psi[1] * g
        }
        fn integrand_grad(&self, _q: f64, _g: f64) -> [f64; 2] {
            self.psi
        }
        fn integrand_hessian(&self, _q: f64, _g: f64) -> [f64; 3] {
            [0.0; 3]
        }
        fn cost(&self, q: f64, g: f64) -> f64 {
            let [a, b, c] = self.cost_curv;
            self.cost_level + 0.5 * (a * q * q + 2.0 * b * q * g + c * g * g)
        }
        fn cost_grad(&self, q: f64, g: f64) -> [f64; 2] {
            let [a, b, c] = self.cost_curv;
            [a * q + b * g, b * q + c * g]
        }
        fn cost_hessian(&self, _q: f64, _g: f64) -> [f64; 3] {
            self.cost_curv
        }
        fn eps(&self) -> f64 {
            self.eps
        }
        fn initial_cost(&self, q: f64, g: f64) -> f64 {
            0.5 * (q * q + g * g)
        }
        fn initial_curvature(&self) -> [f64; 3] {
            [1.0, 0.0, 1.0]
        }
    }

    #[test]
    fn lq_step_with_constant_cost_only_raises_level() {
        let toy = Toy {
            cost_level: 0.7,
            eps: 1e-12,
            ..Toy::inert()
        };
        let v = QuadraticValue::new(Vector2::new(0.3, -0.2), Matrix2::new(2.0, 0.5, 0.5, 1.0), 0.0).unwrap();
        let next = lq_step(&v, &toy, 0.0, 0.0, 0.01, DEFAULT_EIGEN_FLOOR).unwrap();
        assert_relative_eq!(next.c, 0.007, epsilon = 1e-15);
        assert_eq!(next.z_hat, v.z_hat);
        assert!((next.p - v.p).amax() < 1e-13);
    }

    #[test]
    fn lq_step_tiny_eps_freezes_parameter_without_coupling() {
        // No γ-gradient in the costs and diagonal P: ẑ_γ has nothing to follow.
        let toy = Toy {
            drift: [0.5, -1.0, 0.0],
            diffusion: 2.0,
            cost_curv: [0.3, 0.0, 0.0],
            psi: [-0.5, 0.0],
            eps: 1e-12,
            ..Toy::inert()
        };
        let v = QuadraticValue::new(Vector2::new(0.4, 1.1), Matrix2::new(1.0, 0.0, 0.0, 2.0), 0.0).unwrap();
        let next = lq_step(&v, &toy, 0.05, 0.5 * 0.05 * 0.05, 0.01, DEFAULT_EIGEN_FLOOR).unwrap();
        assert_eq!(next.z_hat[1], 1.1);
        assert!((next.p[(1, 1)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lq_step_reports_lost_definiteness() {
        let toy = Toy {
            cost_curv: [-100.0, 0.0, 0.0],
            ..Toy::inert()
        };
        let v = QuadraticValue::initial(&toy);
        assert!(matches!(lq_step(&v, &toy, 0.0, 0.0, 0.1, DEFAULT_EIGEN_FLOOR), Err(Error::Conditioning { .. })));
    }

    #[test]
    fn eigenvalue_floor_keeps_eigenvectors() {
        let [a, b, d] = floor_eigenvalues(1.0, 0.999_999_99, 1.0, 0.01);
        let (lo, hi) = eigenvalues(a, b, d);
        assert_relative_eq!(lo, 0.01, epsilon = 1e-12);
        assert_relative_eq!(hi, 1.999_999_99, epsilon = 1e-12);
        assert_relative_eq!(a, d, epsilon = 1e-12);
    }

    fn axis(min: f64, max: f64, n: usize) -> Axis {
        Axis::new(min, max, n).unwrap()
    }

    #[test]
    fn inert_grid_step_is_identity() {
        let gv = GridValue::from_fn(axis(-1.0, 1.0, 11), axis(-1.0, 1.0, 11), |q, g| q * q + 0.5 * g * g).unwrap();
        let next = grid_dp_step(&gv, &Toy::inert(), 0.0, 0.0, 0.1, &[0.0]).unwrap();
        for (a, b) in gv.values().iter().zip(next.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn grid_step_hand_check_on_three_by_three() {
        // Drift b = 1, controls {−10, 0, 10}, dt = 0.1, no noise.
        // Node (q, γ) pulls from (q − 0.1, γ − u/10) with cost f̃ dt = u²/20 · 0.1 / ε (ε = 1) plus the level.
        let toy = Toy {
            drift: [1.0, 0.0, 0.0],
            cost_level: 0.2,
            ..Toy::inert()
        };
        let ax = axis(-1.0, 1.0, 3);
        let gv = GridValue::from_fn(ax, ax, |q, g| q + 2.0 * g + 3.0).unwrap();
        let next = grid_dp_step(&gv, &toy, 0.0, 0.0, 0.1, &[-10.0, 0.0, 10.0]).unwrap();
        for (iq, ig) in [(1, 1), (2, 0), (2, 2), (1, 2)] {
            let (q, g) = next.node(iq, ig);
            let mut best = f64::INFINITY;
            for u in [-10.0f64, 0.0, 10.0] {
                let (qs, gs) = (q - 0.1, g - 0.1 * u);
                if (-1.0..=1.0).contains(&qs) && (-1.0..=1.0).contains(&gs) {
                    best = best.min(qs + 2.0 * gs + 3.0 + (0.2 + u * u / 2.0) * 0.1);
                }
            }
            assert_relative_eq!(next.value(iq, ig), best, epsilon = 1e-12);
        }
    }

    #[test]
    fn richer_control_sets_lower_the_step() {
        let (_, d) = ex61();
        let ax = axis(-2.0, 2.0, 21);
        let gv = GridValue::from_fn(ax, ax, |q, g| d.initial_cost(q, g)).unwrap();
        let coarse = grid_dp_step(&gv, &d, 0.03, 0.00045, 0.01, &uniform_controls(3, 20.0).unwrap()).unwrap();
        let fine = grid_dp_step(&gv, &d, 0.03, 0.00045, 0.01, &uniform_controls(9, 20.0).unwrap()).unwrap();
        for (c, f) in coarse.values().iter().zip(fine.values()) {
            assert!(f <= c);
        }
    }

    #[test]
    fn cubic_interpolation_is_exact_on_quadratics() {
        let ax = axis(-2.0, 2.0, 9);
        let f = |q: f64, g: f64| 1.5 * q * q - 0.7 * q * g + 0.4 * g * g + 0.3 * q - g + 2.0;
        let gv = GridValue::from_fn(ax, ax, f).unwrap();
        for (q, g) in [(0.13, -0.61), (-1.2, 1.37), (0.5, 0.5), (-0.01, 0.99)] {
            assert_relative_eq!(gv.interpolate(q, g), f(q, g), epsilon = 1e-12);
        }
    }

    #[test]
    fn cubic_interpolation_does_not_overshoot_walls() {
        let ax = axis(0.0, 3.0, 4);
        let gv = GridValue::from_fn(ax, ax, |q, _| if q > 2.5 { 1e4 } else { 0.0 }).unwrap();
        for k in 0..=10 {
            let v = gv.interpolate(1.0 + 0.1 * k as f64, 1.5);
            assert!(v.abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn interpolation_infinity_rules() {
        let ax = axis(0.0, 1.0, 2);
        let gv = GridValue::new(ax, ax, vec![1.0, 2.0, 3.0, f64::INFINITY]).unwrap();
        assert_eq!(gv.interpolate(1.5, 0.5), f64::INFINITY);
        assert_eq!(gv.interpolate(0.2, 0.2), gv.interpolate_bilinear(0.2, 0.2));
        assert_relative_eq!(gv.interpolate(0.0, 0.5), 1.5);
        // Infinite corner weight 0.04 is dropped.
        let v = gv.interpolate(0.2, 0.2);
        let expected = (0.64 * 1.0 + 0.16 * 2.0 + 0.16 * 3.0) / 0.96;
        assert_relative_eq!(v, expected, epsilon = 1e-14);
        assert_eq!(gv.interpolate(0.9, 0.9), f64::INFINITY);
    }

    #[test]
    fn argmin_breaks_ties_by_lowest_index() {
        let ax = axis(0.0, 1.0, 2);
        let gv = GridValue::new(ax, ax, vec![1.0, 0.5, 0.5, 2.0]).unwrap();
        assert_eq!(gv.argmin(), Some((0, 1)));
        let all_inf = GridValue::new(ax, ax, vec![f64::INFINITY; 4]).unwrap();
        assert_eq!(all_inf.argmin(), None);
        assert!(matches!(all_inf.clone().shift_to_zero(), Err(Error::NoPlausiblePosterior)));
    }

    #[test]
    fn curvature_fit_recovers_quadratic() {
        let v = QuadraticValue::new(Vector2::new(0.13, -0.21), Matrix2::new(1.7, 0.4, 0.4, 0.6), 2.0).unwrap();
        let gv = GridValue::from_quadratic(&v, axis(-1.0, 1.0, 21), axis(-1.0, 1.0, 21)).unwrap();
        let (iq, ig) = gv.argmin().unwrap();
        let fit = gv.curvature_fit(iq, ig).unwrap();
        assert!((fit.hessian - v.p).amax() < 1e-9);
        assert!((fit.minimizer - v.z_hat).amax() < 1e-9);
    }

    #[test]
    fn initial_quadratic_matches_initial_cost() {
        let (_, d) = ex61();
        let v = QuadraticValue::initial(&d);
        assert_eq!(v.z_hat, Vector2::zeros());
        assert_eq!(v.p, Matrix2::identity());
        assert_eq!(v.c, 0.0);
        assert_relative_eq!(v.eval(3.0, -4.0), d.initial_cost(3.0, -4.0));
    }

    #[test]
    fn quiet_minimizer_follows_drift_flow() {
        // Drift b = 1 − q, no observation, no running cost.
        let toy = Toy {
            drift: [1.0, -1.0, 0.0],
            ..Toy::inert()
        };
        let dt = 0.01;
        let drive = canonical_lift(&SampledPath::uniform(0.0, dt, 1, vec![0.0; 101]).unwrap()).unwrap();
        let track = propagate(&drive, &toy, Mode::Lq, &PropagateOptions::default()).unwrap();
        let mut q = 0.0;
        for i in 0..100 {
            q += (1.0 - q) * dt;
            assert_relative_eq!(track.minimizers[i + 1][0], q, epsilon = 1e-12);
        }
        assert!(track.failure.is_none());
    }

    #[test]
    fn one_step_window_has_zero_residual() {
        let (_, d) = ex61();
        let ax = axis(-2.0, 2.0, 21);
        let gv = GridValue::from_fn(ax, ax, |q, g| d.initial_cost(q, g)).unwrap();
        let y = brownian(4, 0.01, 3);
        let drive = canonical_lift(&y).unwrap();
        let controls = uniform_controls(5, 20.0).unwrap();
        let next = grid_dp_step(&gv, &d, drive.step_increment(0)[0], drive.step_area(0)[0], 0.01, &controls).unwrap();
        let r = dpp_residual(&next, &gv, &d, 0..1, &drive, &controls).unwrap();
        assert!(r.finite < 1e-12, "{r:?}");
        assert!(r.front_free <= r.finite);
        assert!(r.front_free_nodes > 0);
    }

    #[test]
    fn domain_exit_is_implausible() {
        // A = [[−λ, μ], [λ, −μ]], h = (−α, α); terminal posterior near e_1.
        let chart = ObservationUncertainChart::new(0.5, 0.5, 0.5, 1.5).unwrap();
        let spec = PenaltySpec::new(0.05, 0.05, 1e-3).unwrap();
        let dt = 0.01;
        let drive = canonical_lift(&SampledPath::uniform(0.0, dt, 1, vec![0.0; 201]).unwrap()).unwrap();
        let gamma = constant_parameter(drive.times(), &[0.0]).unwrap();
        let out = backward_penalty(&chart, &gamma, &[1.0 - 1e-4, 1e-4], &drive, &spec).unwrap();
        assert_eq!(out.beta, Cost::Implausible);
        assert!(out.initial.is_none());
        let inside = backward_penalty(&chart, &gamma, &[0.5, 0.5], &drive, &spec).unwrap();
        assert!(inside.beta.is_finite());
    }
}
