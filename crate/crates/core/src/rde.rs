//! Controlled rough differential equations
//!
//! ```text
//! dX = b(X, γ) dt + φ(X, γ) dY
//! ```
//!
//! stepped with the second-order (Davie) scheme
//!
//! ```text
//! X_{i+1} = X_i + b Δt + φ Y_{i,i+1} + (D_xφ · φ) YY_{i,i+1}
//! ```
//!
//! The parameter path γ is treated as a bounded-variation path with zero
//! Gubinelli derivative, so no cross area between γ and Y enters. An optional
//! integrand ψ is integrated along the solution with the compensated sum
//! `ψ Y_{i,i+1} + (D_xψ · φ) YY_{i,i+1}`.

use crate::error::{Error, Result};
use crate::rough_path::{SampledPath, SampledRoughPath};

/// Coefficients of a controlled RDE. Matrices are row-major.
pub trait RdeCoefficients: Sync {
    /// `m`.
    fn state_dim(&self) -> usize;
    /// `d`.
    fn drive_dim(&self) -> usize;
    /// `k`; zero when the coefficients ignore γ.
    fn param_dim(&self) -> usize;
    /// `l`; zero when no integrand is attached.
    fn integrand_dim(&self) -> usize {
        0
    }

    fn drift(&self, x: &[f64], gamma: &[f64], out: &mut [f64]);

    /// `out[i * d + k] = φ_{ik}(x, γ)`.
    fn diffusion(&self, x: &[f64], gamma: &[f64], out: &mut [f64]);

    /// `out[(i * d + k) * m + l] = ∂φ_{ik} / ∂x_l`.
    fn diffusion_jacobian(&self, x: &[f64], gamma: &[f64], out: &mut [f64]);

    /// `out[i * d + k] = ψ_{ik}(x, γ)`.
    fn integrand(&self, _x: &[f64], _gamma: &[f64], _out: &mut [f64]) {}

    /// `out[(i * d + k) * m + l] = ∂ψ_{ik} / ∂x_l`.
    fn integrand_jacobian(&self, _x: &[f64], _gamma: &[f64], _out: &mut [f64]) {}

    /// Optional projection applied after every step. Returns `true` when the
    /// projection had to clamp the state.
    fn project(&self, _x: &mut [f64]) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// States whose Euclidean norm exceeds this abort the solve.
    pub divergence_bound: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            divergence_bound: 1e12,
        }
    }
}

/// Solution on the drive grid, with its Gubinelli derivative `φ(X_t, γ_t)`.
#[derive(Debug, Clone)]
pub struct ControlledSolution {
    times: Vec<f64>,
    state_dim: usize,
    drive_dim: usize,
    integrand_dim: usize,
    states: Vec<f64>,
    gubinelli: Vec<f64>,
    integrals: Option<Vec<f64>>,
    clamp_flags: Vec<bool>,
}

impl ControlledSolution {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn initial(&self) -> &[f64] {
        self.state(0)
    }

    pub fn terminal(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// `φ(X_{t_i}, γ_{t_i})` as an `m×d` row-major block.
    pub fn gubinelli_derivative(&self, i: usize) -> &[f64] {
        let w = self.state_dim * self.drive_dim;
        &self.gubinelli[i * w..(i + 1) * w]
    }

    /// Running integral `∫_0^{t_i} ψ dY` when an integrand was supplied.
    pub fn integral(&self, i: usize) -> Option<&[f64]> {
        let l = self.integrand_dim;
        self.integrals.as_ref().map(|v| &v[i * l..(i + 1) * l])
    }

    /// Whether the projection clamped the state at grid point `i`.
    pub fn clamped(&self, i: usize) -> bool {
        self.clamp_flags[i]
    }

    pub fn clamp_count(&self) -> usize {
        self.clamp_flags.iter().filter(|c| **c).count()
    }

    /// Longest run of consecutive clamped grid points.
    pub fn longest_clamp_streak(&self) -> usize {
        let mut best = 0;
        let mut run = 0;
        for &c in &self.clamp_flags {
            run = if c { run + 1 } else { 0 };
            best = best.max(run);
        }
        best
    }

    pub fn state_path(&self) -> Result<SampledPath> {
        SampledPath::new(self.times.clone(), self.state_dim, self.states.clone())
    }

    pub fn integral_path(&self) -> Option<Result<SampledPath>> {
        self.integrals
            .as_ref()
            .map(|v| SampledPath::new(self.times.clone(), self.integrand_dim, v.clone()))
    }
}

fn check_inputs<C: RdeCoefficients + ?Sized>(
    coeffs: &C,
    x0: &[f64],
    gamma: &SampledPath,
    drive: &SampledRoughPath,
) -> Result<()> {
    if x0.len() != coeffs.state_dim() {
        return Err(Error::domain(format!(
            "initial state has dimension {}, coefficients expect {}",
            x0.len(),
            coeffs.state_dim()
        )));
    }
    if drive.dim() != coeffs.drive_dim() {
        return Err(Error::domain(format!(
            "drive has dimension {}, coefficients expect {}",
            drive.dim(),
            coeffs.drive_dim()
        )));
    }
    if coeffs.param_dim() > 0 && gamma.dim() != coeffs.param_dim() {
        return Err(Error::domain(format!(
            "parameter path has dimension {}, coefficients expect {}",
            gamma.dim(),
            coeffs.param_dim()
        )));
    }
    if gamma.len() != drive.len() {
        return Err(Error::domain("parameter path and drive must share the grid"));
    }
    Ok(())
}

/// Davie stepping from `x0` along the drive grid.
pub fn solve_forward<C: RdeCoefficients + ?Sized>(
    coeffs: &C,
    x0: &[f64],
    gamma: &SampledPath,
    drive: &SampledRoughPath,
    opts: &SolveOptions,
) -> Result<ControlledSolution> {
    check_inputs(coeffs, x0, gamma, drive)?;
    let m = coeffs.state_dim();
    let d = coeffs.drive_dim();
    let l = coeffs.integrand_dim();
    let n = drive.len();
    let param = |i: usize| -> &[f64] {
        if coeffs.param_dim() == 0 {
            &[]
        } else {
            gamma.point(i)
        }
    };

    let mut states = Vec::with_capacity(n * m);
    let mut gubinelli = Vec::with_capacity(n * m * d);
    let mut integrals = (l > 0).then(|| Vec::with_capacity(n * l));
    let mut clamp_flags = Vec::with_capacity(n);

    let mut x = x0.to_vec();
    let mut b = vec![0.0; m];
    let mut phi = vec![0.0; m * d];
    let mut dphi = vec![0.0; m * d * m];
    let mut psi = vec![0.0; l * d];
    let mut dpsi = vec![0.0; l * d * m];
    let mut running = vec![0.0; l];
    let mut next = vec![0.0; m];

    states.extend_from_slice(&x);
    coeffs.diffusion(&x, param(0), &mut phi);
    gubinelli.extend_from_slice(&phi);
    if let Some(acc) = integrals.as_mut() {
        acc.extend_from_slice(&running);
    }
    clamp_flags.push(false);

    let times = drive.times();
    for i in 0..n - 1 {
        let g = param(i);
        let dt = times[i + 1] - times[i];
        let dy = drive.step_increment(i);
        let area = drive.step_area(i);

        coeffs.drift(&x, g, &mut b);
        coeffs.diffusion(&x, g, &mut phi);
        coeffs.diffusion_jacobian(&x, g, &mut dphi);

        for r in 0..m {
            let mut v = x[r] + b[r] * dt;
            for k in 0..d {
                v += phi[r * d + k] * dy[k];
            }
            v += davie_correction(&dphi, &phi, area, r, m, d);
            next[r] = v;
        }

        if l > 0 {
            coeffs.integrand(&x, g, &mut psi);
            coeffs.integrand_jacobian(&x, g, &mut dpsi);
            for r in 0..l {
                let mut v = 0.0;
                for k in 0..d {
                    v += psi[r * d + k] * dy[k];
                }
                v += davie_correction(&dpsi, &phi, area, r, m, d);
                running[r] += v;
            }
        }

        let magnitude = next.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !magnitude.is_finite() || magnitude > opts.divergence_bound {
            return Err(Error::Diverged {
                step: i,
                reason: format!("state norm {magnitude:.3e}"),
            });
        }
        std::mem::swap(&mut x, &mut next);
        let clamped = coeffs.project(&mut x);

        states.extend_from_slice(&x);
        coeffs.diffusion(&x, param(i + 1), &mut phi);
        gubinelli.extend_from_slice(&phi);
        if let Some(acc) = integrals.as_mut() {
            acc.extend_from_slice(&running);
        }
        clamp_flags.push(clamped);
    }

    Ok(ControlledSolution {
        times: times.to_vec(),
        state_dim: m,
        drive_dim: d,
        integrand_dim: l,
        states,
        gubinelli,
        integrals,
        clamp_flags,
    })
}

/// `Σ_{j,k} Σ_l ∂_l F_{rk} φ_{lj} YY^{jk}` for row `r` of a coefficient `F`.
fn davie_correction(jac: &[f64], phi: &[f64], area: &[f64], r: usize, m: usize, d: usize) -> f64 {
    let mut acc = 0.0;
    for k in 0..d {
        let row = &jac[(r * d + k) * m..(r * d + k + 1) * m];
        for j in 0..d {
            let mut dir = 0.0;
            for (l, dl) in row.iter().enumerate() {
                dir += dl * phi[l * d + j];
            }
            acc += dir * area[j * d + k];
        }
    }
    acc
}

/// Negates the drift so that forward stepping along a reversed drive runs the
/// original equation backwards in time.
struct Reversed<'a, C: ?Sized>(&'a C);

impl<C: RdeCoefficients + ?Sized> RdeCoefficients for Reversed<'_, C> {
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }
    fn drive_dim(&self) -> usize {
        self.0.drive_dim()
    }
    fn param_dim(&self) -> usize {
        self.0.param_dim()
    }
    fn integrand_dim(&self) -> usize {
        self.0.integrand_dim()
    }
    fn drift(&self, x: &[f64], gamma: &[f64], out: &mut [f64]) {
        self.0.drift(x, gamma, out);
        out.iter_mut().for_each(|v| *v = -*v);
    }
    fn diffusion(&self, x: &[f64], gamma: &[f64], out: &mut [f64]) {
        self.0.diffusion(x, gamma, out)
    }
    fn diffusion_jacobian(&self, x: &[f64], gamma: &[f64], out: &mut [f64]) {
        self.0.diffusion_jacobian(x, gamma, out)
    }
    fn integrand(&self, x: &[f64], gamma: &[f64], out: &mut [f64]) {
        self.0.integrand(x, gamma, out)
    }
    fn integrand_jacobian(&self, x: &[f64], gamma: &[f64], out: &mut [f64]) {
        self.0.integrand_jacobian(x, gamma, out)
    }
    fn project(&self, x: &mut [f64]) -> bool {
        self.0.project(x)
    }
}

/// Solves from a terminal value by stepping forward along the time-reversed
/// drive and parameter path, then reversing the result.
///
/// The running integral of the output is expressed on the original clock,
/// `∫_0^t ψ dY`, and vanishes at the initial time.
pub fn solve_backward<C: RdeCoefficients + ?Sized>(
    coeffs: &C,
    x_terminal: &[f64],
    gamma: &SampledPath,
    drive: &SampledRoughPath,
    opts: &SolveOptions,
) -> Result<ControlledSolution> {
    check_inputs(coeffs, x_terminal, gamma, drive)?;
    let rev_drive = drive.time_reverse();
    let rev_gamma = gamma.reversed();
    let sol = solve_forward(&Reversed(coeffs), x_terminal, &rev_gamma, &rev_drive, opts)?;

    let n = sol.len();
    let m = sol.state_dim;
    let w = m * sol.drive_dim;
    let l = sol.integrand_dim;
    let mut states = Vec::with_capacity(sol.states.len());
    let mut gubinelli = Vec::with_capacity(sol.gubinelli.len());
    let mut clamp_flags = Vec::with_capacity(n);
    for i in (0..n).rev() {
        states.extend_from_slice(&sol.states[i * m..(i + 1) * m]);
        gubinelli.extend_from_slice(&sol.gubinelli[i * w..(i + 1) * w]);
        clamp_flags.push(sol.clamp_flags[i]);
    }
    // Reversed run accumulates J^rev(τ) = -∫_{T-τ}^T ψ dY, hence
    // ∫_0^t ψ dY = J^rev(T - t) - J^rev(T).
    let integrals = sol.integrals.as_ref().map(|rev| {
        let total = &rev[(n - 1) * l..n * l];
        let mut out = Vec::with_capacity(rev.len());
        for i in (0..n).rev() {
            for r in 0..l {
                out.push(rev[i * l + r] - total[r]);
            }
        }
        out
    });
    Ok(ControlledSolution {
        times: drive.times().to_vec(),
        state_dim: m,
        drive_dim: sol.drive_dim,
        integrand_dim: l,
        states,
        gubinelli,
        integrals,
        clamp_flags,
    })
}

/// Configuration of the growth-bound regression guard.
#[derive(Debug, Clone, Copy)]
pub struct StabilityConfig {
    /// User-chosen constant `C`; the bound's constant is existential.
    pub constant: f64,
    /// Exponent applied to `‖γ‖_{p/2}`; `None` selects `(p - 1) / 2`.
    pub gamma_exponent: Option<f64>,
    /// Include the `T^{(p-1)/p}` term.
    pub include_time_term: bool,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            constant: 1.0,
            gamma_exponent: None,
            include_time_term: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityReport {
    /// `‖∫ψ dY‖_p` of the running integral.
    pub lhs: f64,
    /// `C (1 + T^{(p-1)/p} + ‖γ‖_{p/2}^q) (‖Y‖_p + ‖YY‖_{p/2})`.
    pub rhs: f64,
    /// `lhs / rhs`, defined as 0 when both sides vanish.
    pub ratio: f64,
}

/// Evaluates both sides of the rough-integral growth bound.
pub fn stability_check(
    solution: &ControlledSolution,
    drive: &SampledRoughPath,
    gamma: &SampledPath,
    p: f64,
    cfg: &StabilityConfig,
) -> Result<StabilityReport> {
    if !(2.0..3.0).contains(&p) {
        return Err(Error::domain(format!("p = {p} outside [2, 3)")));
    }
    let integral = solution
        .integral_path()
        .ok_or_else(|| Error::domain("solution carries no running integral"))??;
    let last = drive.len() - 1;
    let lhs = integral.p_variation(p, 0..=last)?.value;
    let rough = drive.rough_norm(p)?;
    let q = cfg.gamma_exponent.unwrap_or((p - 1.0) / 2.0);
    let gamma_norm = gamma.p_variation(p / 2.0, 0..=last)?.value;
    let mut factor = 1.0 + gamma_norm.powf(q);
    if cfg.include_time_term {
        factor += drive.base().horizon().powf((p - 1.0) / p);
    }
    let rhs = cfg.constant * factor * rough;
    let ratio = if lhs == 0.0 && rhs == 0.0 { 0.0 } else { lhs / rhs };
    Ok(StabilityReport { lhs, rhs, ratio })
}
