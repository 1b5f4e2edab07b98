//! Penalty functional
//!
//! ```text
//! β_t(γ, π₀ | Y) = ∫_0^t f(π_s, γ_s, γ̇_s) ds + ∫_0^t ψ(π_s, γ_s) dY_s + g(π₀, γ₀)
//! ```
//!
//! with `f = 𝔣 + ½ Σ_i (h^i)ᵀ H^i π` and `ψ^i = −(h^i)ᵀ π`. The prior part 𝔣
//! is the quadratic family
//!
//! ```text
//! 𝔣 = τ/2 |q − q̂|² + δ/2 |γ − γ̂|² + |u|² / (2ε) + ½ Σ_i |(h^i)ᵀ π|² + c
//! ```
//!
//! in log-odds coordinates `q_j = log(π_j / π_0)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{ParamChart, WonhamCoefficients};
use crate::rde::{solve_forward, SolveOptions};
use crate::rough_path::{SampledPath, SampledRoughPath};

/// A penalty value or the sentinel for implausible trajectories.
///
/// `Implausible` orders above every finite value and absorbs addition.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub enum Cost {
    Finite(f64),
    Implausible,
}

impl Cost {
    pub fn is_finite(self) -> bool {
        matches!(self, Cost::Finite(_))
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Cost::Finite(v) => Some(v),
            Cost::Implausible => None,
        }
    }

    /// `+∞` for the sentinel.
    pub fn to_f64(self) -> f64 {
        self.value().unwrap_or(f64::INFINITY)
    }

    pub fn from_f64(v: f64) -> Self {
        if v.is_finite() {
            Cost::Finite(v)
        } else {
            Cost::Implausible
        }
    }

    pub fn plus(self, other: Cost) -> Cost {
        match (self, other) {
            (Cost::Finite(a), Cost::Finite(b)) => Cost::Finite(a + b),
            _ => Cost::Implausible,
        }
    }
}

fn default_one() -> f64 {
    1.0
}

fn default_streak() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySpec {
    pub tau: f64,
    pub delta: f64,
    pub eps: f64,
    #[serde(default)]
    pub q_anchor: f64,
    #[serde(default)]
    pub gamma_anchor: f64,
    /// Weight of `q₀²` in `g`.
    #[serde(default = "default_one")]
    pub initial_q_weight: f64,
    /// Weight of `|γ₀|²` in `g`.
    #[serde(default = "default_one")]
    pub initial_gamma_weight: f64,
    /// Additive constant in `𝔣`.
    #[serde(default)]
    pub constant: f64,
    /// Consecutive clamped filter steps after which a trajectory is implausible.
    #[serde(default = "default_streak")]
    pub clamp_streak_limit: usize,
}

impl PenaltySpec {
    pub fn new(tau: f64, delta: f64, eps: f64) -> Result<Self> {
        let spec = Self {
            tau,
            delta,
            eps,
            q_anchor: 0.0,
            gamma_anchor: 0.0,
            initial_q_weight: 1.0,
            initial_gamma_weight: 1.0,
            constant: 0.0,
            clamp_streak_limit: default_streak(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tau", self.tau),
            ("delta", self.delta),
            ("eps", self.eps),
            ("initial_q_weight", self.initial_q_weight),
            ("initial_gamma_weight", self.initial_gamma_weight),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        for (name, v) in [
            ("q_anchor", self.q_anchor),
            ("gamma_anchor", self.gamma_anchor),
            ("constant", self.constant),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        Ok(())
    }

    /// Every term of `f` except the constant is nonnegative.
    pub fn running_cost_lower_bound(&self) -> f64 {
        self.constant
    }
}

/// Log-odds of each component against the first.
pub fn log_odds(pi: &[f64]) -> Vec<f64> {
    pi[1..].iter().map(|p| (p / pi[0]).ln()).collect()
}

/// Running cost `f(π, γ, u)`.
pub fn running_cost_f(pi: &[f64], gamma: &[f64], u: &[f64], chart: &dyn ParamChart, spec: &PenaltySpec) -> f64 {
    let h = chart.map(gamma).observation;
    let mut likelihood = 0.0;
    for c in 0..h.ncols() {
        let mean: f64 = pi.iter().enumerate().map(|(j, p)| h[(j, c)] * p).sum();
        let second: f64 = pi.iter().enumerate().map(|(j, p)| h[(j, c)] * h[(j, c)] * p).sum();
        likelihood += 0.5 * mean * mean + 0.5 * second;
    }
    let q_term: f64 = log_odds(pi).iter().map(|q| (q - spec.q_anchor).powi(2)).sum();
    let g_term: f64 = gamma.iter().map(|g| (g - spec.gamma_anchor).powi(2)).sum();
    let u_term: f64 = u.iter().map(|v| v * v).sum();
    0.5 * spec.tau * q_term + 0.5 * spec.delta * g_term + u_term / (2.0 * spec.eps) + likelihood + spec.constant
}

/// `ψ(π, γ)` and its derivatives, all row-major with one row per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegrandValue {
    pub value: Vec<f64>,
    /// `d×m`.
    pub jacobian_pi: Vec<f64>,
    /// `d×k`.
    pub jacobian_gamma: Vec<f64>,
}

pub fn observation_integrand_psi(pi: &[f64], gamma: &[f64], chart: &dyn ParamChart) -> IntegrandValue {
    let h = chart.map(gamma).observation;
    let dh = chart.jacobian(gamma);
    let (m, d, k) = (pi.len(), h.ncols(), gamma.len());
    let mut value = vec![0.0; d];
    let mut jacobian_pi = vec![0.0; d * m];
    let mut jacobian_gamma = vec![0.0; d * k];
    for c in 0..d {
        for j in 0..m {
            value[c] -= h[(j, c)] * pi[j];
            jacobian_pi[c * m + j] = -h[(j, c)];
        }
        for (a, dv) in dh.iter().enumerate() {
            jacobian_gamma[c * k + a] = -(0..m).map(|j| dv.observation[(j, c)] * pi[j]).sum::<f64>();
        }
    }
    IntegrandValue {
        value,
        jacobian_pi,
        jacobian_gamma,
    }
}

/// `g(π₀, γ₀) = ½ (w_q |q₀|² + w_γ |γ₀|²)`; implausible on the simplex boundary.
pub fn initial_cost_g(pi0: &[f64], gamma0: &[f64], spec: &PenaltySpec) -> Cost {
    if pi0.iter().any(|p| !(*p > 0.0 && *p < 1.0)) && pi0.len() > 1 {
        return Cost::Implausible;
    }
    let q: f64 = log_odds(pi0).iter().map(|v| v * v).sum();
    let g: f64 = gamma0.iter().map(|v| v * v).sum();
    Cost::Finite(0.5 * (spec.initial_q_weight * q + spec.initial_gamma_weight * g))
}

/// The three pieces of β and their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyBreakdown {
    pub running: f64,
    pub observation: f64,
    pub initial: Cost,
    pub total: Cost,
}

/// Evaluates β along a candidate parameter path.
///
/// `u` is recovered by forward differences and `f` integrated by the left
/// Riemann sum. The ψ integral is the compensated rough integral from the
/// filter solve. A clamp streak longer than the configured limit marks the
/// trajectory implausible.
pub fn penalty_beta(
    gamma_path: &SampledPath,
    pi0: &[f64],
    drive: &SampledRoughPath,
    chart: &dyn ParamChart,
    spec: &PenaltySpec,
) -> Result<PenaltyBreakdown> {
    let initial = initial_cost_g(pi0, gamma_path.point(0), spec);
    if !initial.is_finite() {
        return Ok(PenaltyBreakdown {
            running: 0.0,
            observation: 0.0,
            initial,
            total: Cost::Implausible,
        });
    }
    let sol = solve_forward(
        &WonhamCoefficients::new(chart),
        pi0,
        gamma_path,
        drive,
        &SolveOptions::default(),
    )?;
    let times = drive.times();
    let k = chart.param_dim();
    let mut running = 0.0;
    let mut u = vec![0.0; k];
    for i in 0..times.len() - 1 {
        let dt = times[i + 1] - times[i];
        let g0 = gamma_path.point(i);
        let g1 = gamma_path.point(i + 1);
        for c in 0..k {
            u[c] = (g1[c] - g0[c]) / dt;
        }
        running += running_cost_f(sol.state(i), g0, &u, chart, spec) * dt;
    }
    let observation = sol.integral(sol.len() - 1).map(|v| v[0]).unwrap_or(0.0);
    let total = if sol.longest_clamp_streak() > spec.clamp_streak_limit {
        Cost::Implausible
    } else {
        Cost::Finite(running + observation).plus(initial)
    };
    Ok(PenaltyBreakdown {
        running,
        observation,
        initial,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::{
        constant_parameter, filter_ito, logistic, simulate_chain, simulate_observation, RateUncertainChart,
        SimplexState,
    };
    use crate::rough_path::canonical_lift;
    use approx::assert_relative_eq;

    fn ex61_spec() -> PenaltySpec {
        PenaltySpec::new(0.05, 0.05, 1e-3).unwrap()
    }

    #[test]
    fn running_cost_at_anchor_is_constant_part() {
        let chart = RateUncertainChart::new(1.0, 1.0).unwrap();
        let f = running_cost_f(&[0.5, 0.5], &[0.0], &[0.0], &chart, &ex61_spec());
        assert_relative_eq!(f, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn running_cost_u_scaling() {
        let chart = RateUncertainChart::new(1.0, 1.0).unwrap();
        let spec = ex61_spec();
        let pi = [0.3, 0.7];
        let u = 0.37;
        let diff = running_cost_f(&pi, &[0.4], &[2.0 * u], &chart, &spec) - running_cost_f(&pi, &[0.4], &[u], &chart, &spec);
        assert_relative_eq!(diff, 3.0 * u * u / (2.0 * spec.eps), max_relative = 1e-12);
    }

    #[test]
    fn running_cost_generic_point() {
        let chart = RateUncertainChart::new(1.0, 1.0).unwrap();
        let p2 = logistic(1.0);
        let f = running_cost_f(&[1.0 - p2, p2], &[0.0], &[0.1], &chart, &ex61_spec());
        let expected = 0.025 * 1.0 + 0.0 + 0.01 / 2e-3 + 0.5 * (2.0 * p2 - 1.0).powi(2) + 0.5;
        assert_relative_eq!(f, expected, max_relative = 1e-12);
    }

    #[test]
    fn running_cost_is_coercive_and_bounded_below() {
        let chart = RateUncertainChart::new(1.0, 1.0).unwrap();
        let spec = ex61_spec();
        for q in [-8.0, -1.0, 0.0, 2.5, 8.0] {
            for g in [-8.0, 0.0, 3.0] {
                let p2 = logistic(q);
                let pi = [1.0 - p2, p2];
                assert!(running_cost_f(&pi, &[g], &[0.0], &chart, &spec) >= spec.running_cost_lower_bound());
                let ratios: Vec<f64> = [1e1, 1e2, 1e3, 1e4]
                    .iter()
                    .map(|u| running_cost_f(&pi, &[g], &[*u], &chart, &spec) / u)
                    .collect();
                assert!(ratios.windows(2).all(|w| w[1] > w[0]), "{ratios:?}");
                assert!(ratios[3] > 1e6);
            }
        }
    }

    #[test]
    fn psi_values() {
        let chart = RateUncertainChart::new(1.0, 0.7).unwrap();
        assert_eq!(observation_integrand_psi(&[0.5, 0.5], &[0.0], &chart).value, vec![0.0]);
        assert_relative_eq!(observation_integrand_psi(&[1.0, 0.0], &[0.0], &chart).value[0], 0.7);
        let pi = [0.2, 0.8];
        assert_relative_eq!(
            observation_integrand_psi(&pi, &[0.0], &chart).value[0],
            0.7 * (1.0 - 2.0 * 0.8),
            epsilon = 1e-15
        );
    }

    #[test]
    fn psi_jacobians_match_central_differences() {
        let chart = crate::hmm::ObservationUncertainChart::new(0.05, 0.05, 0.2, 1.8).unwrap();
        let pi = [0.35, 0.65];
        let g = [0.3];
        let v = observation_integrand_psi(&pi, &g, &chart);
        let h = 1e-6;
        for j in 0..2 {
            let mut up = pi;
            let mut dn = pi;
            up[j] += h;
            dn[j] -= h;
            let fd = (observation_integrand_psi(&up, &g, &chart).value[0] - observation_integrand_psi(&dn, &g, &chart).value[0]) / (2.0 * h);
            assert!((fd - v.jacobian_pi[j]).abs() < 1e-6);
        }
        let fd = (observation_integrand_psi(&pi, &[g[0] + h], &chart).value[0]
            - observation_integrand_psi(&pi, &[g[0] - h], &chart).value[0])
            / (2.0 * h);
        assert!((fd - v.jacobian_gamma[0]).abs() < 1e-6);
    }

    #[test]
    fn initial_cost_values() {
        let spec = ex61_spec();
        assert_eq!(initial_cost_g(&[0.5, 0.5], &[0.0], &spec), Cost::Finite(0.0));
        let p2 = logistic(3.0);
        assert_relative_eq!(initial_cost_g(&[1.0 - p2, p2], &[-4.0], &spec).value().unwrap(), 12.5, epsilon = 1e-12);
        let small: f64 = 1e-6;
        let expected = 0.5 * (small / (1.0 - small)).ln().powi(2);
        assert_relative_eq!(initial_cost_g(&[1.0 - small, small], &[0.0], &spec).value().unwrap(), expected, max_relative = 1e-9);
        assert_eq!(initial_cost_g(&[1.0, 0.0], &[0.0], &spec), Cost::Implausible);
    }

    #[test]
    fn cost_sentinel_orders_above_finite() {
        assert!(Cost::Implausible > Cost::Finite(1e300));
        assert_eq!(Cost::Finite(1.0).plus(Cost::Implausible), Cost::Implausible);
        assert_eq!(Cost::from_f64(f64::INFINITY), Cost::Implausible);
    }

    fn zero_drive(n: usize, dt: f64) -> SampledRoughPath {
        canonical_lift(&SampledPath::uniform(0.0, dt, 1, vec![0.0; n + 1]).unwrap()).unwrap()
    }

    #[test]
    fn zero_drive_beta_is_time_times_running_cost() {
        // With ν = 1 and λ = ½ (γ = 0), π = (½, ½) is stationary, f is minimal
        // in q and γ there, and ψ vanishes.
        let chart = RateUncertainChart::new(1.0, 1.0).unwrap();
        let spec = ex61_spec();
        let (n, dt) = (500, 0.01);
        let drive = zero_drive(n, dt);
        let gamma = constant_parameter(drive.times(), &[0.0]).unwrap();
        let b = penalty_beta(&gamma, &[0.5, 0.5], &drive, &chart, &spec).unwrap();
        let f_min = running_cost_f(&[0.5, 0.5], &[0.0], &[0.0], &chart, &spec);
        assert_relative_eq!(b.total.value().unwrap(), n as f64 * dt * f_min, max_relative = 1e-12);
        assert_eq!(b.observation, 0.0);
    }

    #[test]
    fn beta_is_sum_of_pieces_and_shifts_with_constant() {
        let chart = RateUncertainChart::new(1.0, 1.0).unwrap();
        let mut spec = ex61_spec();
        let dt = 0.01;
        let y: Vec<f64> = (0..=300).map(|i| (i as f64 * 0.05).sin() * 0.3).collect();
        let drive = canonical_lift(&SampledPath::uniform(0.0, dt, 1, y).unwrap()).unwrap();
        let gvals: Vec<f64> = (0..=300).map(|i| 0.2 * (i as f64 * 0.02).cos()).collect();
        let gamma = SampledPath::uniform(0.0, dt, 1, gvals).unwrap();
        let b = penalty_beta(&gamma, &[0.4, 0.6], &drive, &chart, &spec).unwrap();
        let sum = b.running + b.observation + b.initial.value().unwrap();
        assert_eq!(b.total.value().unwrap(), sum);
        spec.constant = 0.25;
        let shifted = penalty_beta(&gamma, &[0.4, 0.6], &drive, &chart, &spec).unwrap();
        assert_relative_eq!(shifted.total.value().unwrap() - sum, 0.25 * 3.0, max_relative = 1e-9);
    }

    #[test]
    fn boundary_start_is_implausible() {
        let chart = RateUncertainChart::new(1.0, 1.0).unwrap();
        let drive = zero_drive(10, 0.01);
        let gamma = constant_parameter(drive.times(), &[0.0]).unwrap();
        let b = penalty_beta(&gamma, &[1.0, 0.0], &drive, &chart, &ex61_spec()).unwrap();
        assert_eq!(b.total, Cost::Implausible);
    }

    #[test]
    fn ito_and_stratonovich_likelihoods_differ_by_bracket() {
        // Itô: −Σ hᵀπ_i ΔY; Stratonovich: −Σ hᵀ(π_i + π_{i+1})/2 ΔY.
        // Their gap converges to ½∫ hᵀ(H − hᵀπ I)π ds.
        let chart = RateUncertainChart::new(1.0, 1.0).unwrap();
        let a = chart.coordinate(0.3).unwrap();
        let horizon: f64 = 20.0;
        let mut rel = Vec::new();
        for dt in [4e-3, 1e-3, 2.5e-4] {
            let n = (horizon / dt).round() as usize;
            let times: Vec<f64> = (0..=n).map(|i| i as f64 * dt).collect();
            let g = constant_parameter(&times, &[a]).unwrap();
            let pi0 = SimplexState::uniform(2).unwrap();
            let chain = simulate_chain(&chart, &g, &pi0, horizon, dt, 4).unwrap();
            let y = simulate_observation(&chain, &chart, &g, horizon, dt, 4).unwrap();
            let pi = filter_ito(&chart, &g, &pi0, &y).unwrap().path;
            let mean = |i: usize| -pi.point(i)[0] + pi.point(i)[1];
            let (mut ito, mut strat, mut bracket) = (0.0, 0.0, 0.0);
            for i in 0..n {
                let dy = y.point(i + 1)[0] - y.point(i)[0];
                ito -= mean(i) * dy;
                strat -= 0.5 * (mean(i) + mean(i + 1)) * dy;
                // hᵀ(H − hᵀπ I)π = α²(1 − (hᵀπ)²) for h = (−α, α).
                bracket += 0.5 * (1.0 - mean(i) * mean(i)) * dt;
            }
            rel.push(((ito - strat) - bracket).abs() / bracket);
        }
        assert!(rel[2] < 0.05, "{rel:?}");
        assert!(rel[2] < rel[0], "{rel:?}");
    }
}
