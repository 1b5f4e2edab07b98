//! Hidden Markov model simulation and the Wonham filter.
//!
//! The chain lives on the standard basis `e_0, …, e_{m-1}` (zero-based here;
//! CSV exports are one-based). The rate matrix `A` acts on column vectors, so
//! `A[(i, j)]` is the jump rate from state `j` to state `i` and columns sum to
//! zero. The observation matrix `h` is `m×d`; column `i` is `h^i`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rde::{solve_forward, ControlledSolution, RdeCoefficients, SolveOptions};
use crate::rough_path::{SampledPath, SampledRoughPath};

/// Distance from the simplex boundary enforced by [`project_simplex`].
pub const SIMPLEX_CLAMP: f64 = 1e-12;

/// Post-step component value treated as gross instability.
const INSTABILITY_THRESHOLD: f64 = -0.1;

pub(crate) const CHAIN_STREAM: u64 = 0;
pub(crate) const OBSERVATION_STREAM: u64 = 1;

/// Divides by the component sum and clamps into `[SIMPLEX_CLAMP, 1 - SIMPLEX_CLAMP]`.
/// Returns `true` when a component had to be clamped.
pub fn project_simplex(x: &mut [f64]) -> bool {
    let mut clamped = false;
    for v in x.iter_mut() {
        if !(*v >= 0.0) || !v.is_finite() {
            *v = 0.0;
            clamped = true;
        }
    }
    let sum: f64 = x.iter().sum();
    if !(sum > 0.0) {
        let u = 1.0 / x.len() as f64;
        x.iter_mut().for_each(|v| *v = u);
        return true;
    }
    x.iter_mut().for_each(|v| *v /= sum);
    if x.len() == 1 {
        return clamped;
    }
    // Raise small components to the clamp and take the mass proportionally
    // from the rest; repeat until no free component falls below the clamp.
    let mut pinned = vec![false; x.len()];
    loop {
        let mut changed = false;
        for (v, p) in x.iter().zip(pinned.iter_mut()) {
            if !*p && *v < SIMPLEX_CLAMP {
                *p = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        clamped = true;
        let n_pinned = pinned.iter().filter(|p| **p).count() as f64;
        let free: f64 = x.iter().zip(&pinned).filter(|(_, p)| !**p).map(|(v, _)| v).sum();
        let scale = (1.0 - n_pinned * SIMPLEX_CLAMP) / free;
        for (v, p) in x.iter_mut().zip(&pinned) {
            *v = if *p { SIMPLEX_CLAMP } else { *v * scale };
        }
    }
    clamped
}

/// A point of the open probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexState(Vec<f64>);

impl SimplexState {
    /// Normalizes nonnegative weights onto the simplex.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::domain("simplex state needs at least one component"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::domain("simplex weights must be finite and nonnegative"));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::domain("simplex weights sum to zero"));
        }
        let mut w = weights;
        project_simplex(&mut w);
        Ok(Self(w))
    }

    pub fn uniform(m: usize) -> Result<Self> {
        Self::new(vec![1.0; m])
    }

    /// Two-state point with log-odds `q = log(π₂ / π₁)`.
    pub fn from_log_odds(q: f64) -> Self {
        let p2 = logistic(q);
        let mut w = vec![1.0 - p2, p2];
        project_simplex(&mut w);
        Self(w)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rate and observation matrices at one parameter value, or their derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartValue {
    pub rates: DMatrix<f64>,
    pub observation: DMatrix<f64>,
}

/// Built-in two-state families with closed-form log-odds dynamics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChartFamily {
    /// Unknown switching intensity `λ = ν σ(a)`, known total rate `ν` and signal `α`.
    RateUncertain { nu: f64, alpha: f64 },
    /// Unknown signal `α = ν₁ + (ν₂ − ν₁) σ(a)`, known rates `λ`, `μ`.
    ObservationUncertain { lambda: f64, mu: f64, nu1: f64, nu2: f64 },
    Other,
}

/// Smooth map from parameter coordinates to (rate matrix, observation matrix).
pub trait ParamChart: Send + Sync + std::fmt::Debug {
    fn states(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn map(&self, a: &[f64]) -> ChartValue;
    /// Derivative of [`ParamChart::map`] along each parameter coordinate.
    fn jacobian(&self, a: &[f64]) -> Vec<ChartValue>;
    fn family(&self) -> ChartFamily {
        ChartFamily::Other
    }
}

fn two_state_rates(up: f64, down: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[-up, down, up, -down])
}

fn antipodal_signal(alpha: f64) -> DMatrix<f64> {
    DMatrix::from_column_slice(2, 1, &[-alpha, alpha])
}

/// `a ↦ λ = ν / (1 + e^{-a})`; the chain jumps `e_0 → e_1` at rate `λ` and back at `ν − λ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateUncertainChart {
    pub nu: f64,
    pub alpha: f64,
}

impl RateUncertainChart {
    pub fn new(nu: f64, alpha: f64) -> Result<Self> {
        if !(nu > 0.0 && nu.is_finite()) || !alpha.is_finite() {
            return Err(Error::Config(format!("rate chart needs nu > 0 and finite alpha, got nu={nu}, alpha={alpha}")));
        }
        Ok(Self { nu, alpha })
    }

    pub fn intensity(&self, a: f64) -> f64 {
        self.nu * logistic(a)
    }

    /// Inverse of [`Self::intensity`].
    pub fn coordinate(&self, lambda: f64) -> Result<f64> {
        if !(lambda > 0.0 && lambda < self.nu) {
            return Err(Error::domain(format!("lambda = {lambda} outside (0, {})", self.nu)));
        }
        Ok(logit(lambda / self.nu))
    }
}

impl ParamChart for RateUncertainChart {
    fn states(&self) -> usize {
        2
    }
    fn obs_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn map(&self, a: &[f64]) -> ChartValue {
        let lambda = self.intensity(a[0]);
        ChartValue {
            rates: two_state_rates(lambda, self.nu - lambda),
            observation: antipodal_signal(self.alpha),
        }
    }
    fn jacobian(&self, a: &[f64]) -> Vec<ChartValue> {
        let s = logistic(a[0]);
        let dl = self.nu * s * (1.0 - s);
        vec![ChartValue {
            rates: DMatrix::from_row_slice(2, 2, &[-dl, -dl, dl, dl]),
            observation: DMatrix::zeros(2, 1),
        }]
    }
    fn family(&self) -> ChartFamily {
        ChartFamily::RateUncertain {
            nu: self.nu,
            alpha: self.alpha,
        }
    }
}

/// `a ↦ α = (ν₂ + ν₁ e^{-a}) / (1 + e^{-a})` with known rates `λ` (`e_0 → e_1`) and `μ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationUncertainChart {
    pub lambda: f64,
    pub mu: f64,
    pub nu1: f64,
    pub nu2: f64,
}

impl ObservationUncertainChart {
    pub fn new(lambda: f64, mu: f64, nu1: f64, nu2: f64) -> Result<Self> {
        if !(lambda >= 0.0 && mu >= 0.0 && nu1 < nu2 && nu1.is_finite() && nu2.is_finite()) {
            return Err(Error::Config(format!(
                "observation chart needs lambda, mu >= 0 and nu1 < nu2, got {lambda}, {mu}, {nu1}, {nu2}"
            )));
        }
        Ok(Self { lambda, mu, nu1, nu2 })
    }

    pub fn signal(&self, a: f64) -> f64 {
        self.nu1 + (self.nu2 - self.nu1) * logistic(a)
    }

    pub fn signal_derivative(&self, a: f64) -> f64 {
        let s = logistic(a);
        (self.nu2 - self.nu1) * s * (1.0 - s)
    }

    /// Inverse of [`Self::signal`].
    pub fn coordinate(&self, alpha: f64) -> Result<f64> {
        if !(alpha > self.nu1 && alpha < self.nu2) {
            return Err(Error::domain(format!("alpha = {alpha} outside ({}, {})", self.nu1, self.nu2)));
        }
        Ok(((alpha - self.nu1) / (self.nu2 - alpha)).ln())
    }
}

impl ParamChart for ObservationUncertainChart {
    fn states(&self) -> usize {
        2
    }
    fn obs_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn map(&self, a: &[f64]) -> ChartValue {
        ChartValue {
            rates: two_state_rates(self.lambda, self.mu),
            observation: antipodal_signal(self.signal(a[0])),
        }
    }
    fn jacobian(&self, a: &[f64]) -> Vec<ChartValue> {
        vec![ChartValue {
            rates: DMatrix::zeros(2, 2),
            observation: antipodal_signal(self.signal_derivative(a[0])),
        }]
    }
    fn family(&self) -> ChartFamily {
        ChartFamily::ObservationUncertain {
            lambda: self.lambda,
            mu: self.mu,
            nu1: self.nu1,
            nu2: self.nu2,
        }
    }
}

/// A chart with no free parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedChart {
    value: ChartValue,
}

impl FixedChart {
    pub fn new(rates: DMatrix<f64>, observation: DMatrix<f64>) -> Result<Self> {
        let m = rates.nrows();
        if rates.ncols() != m || observation.nrows() != m {
            return Err(Error::Config("rate matrix must be m×m and observation matrix m×d".into()));
        }
        check_rate_matrix(&rates)?;
        Ok(Self {
            value: ChartValue { rates, observation },
        })
    }
}

impl ParamChart for FixedChart {
    fn states(&self) -> usize {
        self.value.rates.nrows()
    }
    fn obs_dim(&self) -> usize {
        self.value.observation.ncols()
    }
    fn param_dim(&self) -> usize {
        0
    }
    fn map(&self, _a: &[f64]) -> ChartValue {
        self.value.clone()
    }
    fn jacobian(&self, _a: &[f64]) -> Vec<ChartValue> {
        Vec::new()
    }
}

fn check_rate_matrix(a: &DMatrix<f64>) -> Result<()> {
    let scale = a.iter().fold(1.0f64, |s, v| s.max(v.abs()));
    for j in 0..a.ncols() {
        let mut col = 0.0;
        for i in 0..a.nrows() {
            let v = a[(i, j)];
            if !v.is_finite() {
                return Err(Error::Config("rate matrix has non-finite entries".into()));
            }
            if i != j && v < 0.0 {
                return Err(Error::Config(format!("negative off-diagonal rate at ({i}, {j})")));
            }
            col += v;
        }
        if col.abs() > 1e-12 * scale {
            return Err(Error::Config(format!("rate matrix column {j} sums to {col}")));
        }
    }
    Ok(())
}

/// Checks a chart at the probe points: rate-matrix structure, finite values,
/// and agreement of the jacobian with central differences.
pub fn validate_chart(chart: &dyn ParamChart, probes: &[Vec<f64>]) -> Result<()> {
    let k = chart.param_dim();
    for a in probes {
        if a.len() != k {
            return Err(Error::domain("probe has the wrong dimension"));
        }
        let v = chart.map(a);
        check_rate_matrix(&v.rates)?;
        if v.observation.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("observation matrix has non-finite entries".into()));
        }
        let jac = chart.jacobian(a);
        if jac.len() != k {
            return Err(Error::Config("chart jacobian has the wrong length".into()));
        }
        for (c, d) in jac.iter().enumerate() {
            let h = 1e-5 * (1.0 + a[c].abs());
            let mut up = a.clone();
            let mut dn = a.clone();
            up[c] += h;
            dn[c] -= h;
            let (vu, vd) = (chart.map(&up), chart.map(&dn));
            let fd_rates = (vu.rates - vd.rates) / (2.0 * h);
            let fd_obs = (vu.observation - vd.observation) / (2.0 * h);
            let err = (fd_rates - &d.rates).amax().max((fd_obs - &d.observation).amax());
            let scale = 1.0 + d.rates.amax().max(d.observation.amax());
            if err > 1e-6 * scale {
                return Err(Error::Config(format!("chart jacobian mismatch {err:.3e} along coordinate {c}")));
            }
        }
    }
    Ok(())
}

/// Piecewise-constant lookup of a parameter path at time `t`.
pub(crate) fn param_at<'a>(gamma: &'a SampledPath, k: usize, t: f64) -> &'a [f64] {
    if k == 0 {
        return &[];
    }
    let times = gamma.times();
    let idx = times.partition_point(|s| *s <= t + 1e-9 * (1.0 + t.abs())).max(1) - 1;
    gamma.point(idx.min(gamma.len() - 1))
}

/// Constant parameter path on the given grid.
pub fn constant_parameter(times: &[f64], a: &[f64]) -> Result<SampledPath> {
    let values = times.iter().flat_map(|_| a.iter().copied()).collect();
    SampledPath::new(times.to_vec(), a.len(), values)
}

/// Simulated chain trajectory: `states[0]` holds on `[0, jump_times[0])`,
/// `states[i + 1]` from `jump_times[i]` on.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPath {
    jump_times: Vec<f64>,
    states: Vec<usize>,
    horizon: f64,
}

impl ChainPath {
    pub fn new(jump_times: Vec<f64>, states: Vec<usize>, horizon: f64, m: usize) -> Result<Self> {
        if states.len() != jump_times.len() + 1 {
            return Err(Error::domain("chain path needs one more state than jump times"));
        }
        if states.iter().any(|s| *s >= m) {
            return Err(Error::domain("chain state index out of range"));
        }
        if jump_times.windows(2).any(|w| w[1] <= w[0]) || jump_times.iter().any(|t| *t < 0.0 || *t > horizon) {
            return Err(Error::domain("jump times must increase within [0, T]"));
        }
        Ok(Self {
            jump_times,
            states,
            horizon,
        })
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn state_at(&self, t: f64) -> usize {
        let n = self.jump_times.partition_point(|s| *s <= t + 1e-9 * (1.0 + t.abs()));
        self.states[n]
    }

    /// Fraction of `[0, T]` spent in each state.
    pub fn occupancy(&self, m: usize) -> Vec<f64> {
        let mut occ = vec![0.0; m];
        let mut start = 0.0;
        for (i, &s) in self.states.iter().enumerate() {
            let end = self.jump_times.get(i).copied().unwrap_or(self.horizon);
            occ[s] += end - start;
            start = end;
        }
        occ.iter_mut().for_each(|o| *o /= self.horizon);
        occ
    }
}

fn grid_len(horizon: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && horizon > 0.0 && dt.is_finite() && horizon.is_finite()) {
        return Err(Error::Config(format!("need T > 0 and dt > 0, got T={horizon}, dt={dt}")));
    }
    let n = (horizon / dt).round();
    if (n * dt - horizon).abs() > 1e-9 * horizon {
        return Err(Error::Config(format!("T = {horizon} is not a multiple of dt = {dt}")));
    }
    Ok(n as usize)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sample_index<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Per-step thinning on the grid `t_i = i·dt`. Jumps land on grid times.
pub fn simulate_chain(
    chart: &dyn ParamChart,
    gamma: &SampledPath,
    pi0: &SimplexState,
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<ChainPath> {
    let m = chart.states();
    if pi0.dim() != m {
        return Err(Error::Config("initial distribution dimension does not match the chart".into()));
    }
    let n = grid_len(horizon, dt)?;
    let k = chart.param_dim();
    let mut rng = stream_rng(seed, CHAIN_STREAM);
    let mut state = sample_index(&mut rng, pi0.probs());
    let mut states = vec![state];
    let mut jumps = Vec::new();
    let mut weights = vec![0.0; m];
    for i in 0..n {
        let t = i as f64 * dt;
        let rates = chart.map(param_at(gamma, k, t)).rates;
        let exit = -rates[(state, state)];
        if exit * dt >= 1.0 {
            return Err(Error::Config(format!("exit rate {exit} times dt {dt} is at least 1")));
        }
        if rng.random::<f64>() < exit * dt {
            for (j, w) in weights.iter_mut().enumerate() {
                *w = if j == state { 0.0 } else { rates[(j, state)] };
            }
            state = sample_index(&mut rng, &weights);
            states.push(state);
            jumps.push((i + 1) as f64 * dt);
        }
    }
    ChainPath::new(jumps, states, n as f64 * dt, m)
}

/// Euler–Maruyama observation `dY = hᵀX dt + dB`, `Y_0 = 0`, on the grid `i·dt`.
pub fn simulate_observation(
    chain: &ChainPath,
    chart: &dyn ParamChart,
    gamma: &SampledPath,
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<SampledPath> {
    let n = grid_len(horizon, dt)?;
    if (chain.horizon() - horizon).abs() > 1e-9 * horizon {
        return Err(Error::Config("chain and observation horizons differ".into()));
    }
    let d = chart.obs_dim();
    let k = chart.param_dim();
    let mut rng = stream_rng(seed, OBSERVATION_STREAM);
    let sd = dt.sqrt();
    let mut values = vec![0.0; (n + 1) * d];
    for i in 0..n {
        let t = i as f64 * dt;
        let h = chart.map(param_at(gamma, k, t)).observation;
        let x = chain.state_at(t);
        for c in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            values[(i + 1) * d + c] = values[i * d + c] + h[(x, c)] * dt + sd * z;
        }
    }
    let times = (0..=n).map(|i| i as f64 * dt).collect();
    SampledPath::new(times, d, values)
}

/// Result of one projected filter step.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterStep {
    pub state: SimplexState,
    pub clamped: bool,
}

/// Explicit Euler–Maruyama step of the Itô Wonham equation, then projection.
pub fn wonham_ito_step(
    pi: &SimplexState,
    rates: &DMatrix<f64>,
    observation: &DMatrix<f64>,
    dy: &[f64],
    dt: f64,
) -> Result<FilterStep> {
    let p = pi.probs();
    let m = p.len();
    let d = observation.ncols();
    if rates.nrows() != m || observation.nrows() != m || dy.len() != d {
        return Err(Error::domain("filter step dimensions disagree"));
    }
    let mut next = p.to_vec();
    for (i, nx) in next.iter_mut().enumerate() {
        for (j, pj) in p.iter().enumerate() {
            *nx += rates[(i, j)] * pj * dt;
        }
    }
    for c in 0..d {
        let mean: f64 = (0..m).map(|j| observation[(j, c)] * p[j]).sum();
        let innovation = dy[c] - mean * dt;
        for j in 0..m {
            next[j] += (observation[(j, c)] - mean) * p[j] * innovation;
        }
    }
    if let Some((component, value)) = next
        .iter()
        .copied()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || *v <= INSTABILITY_THRESHOLD)
    {
        return Err(Error::StepSize { component, value });
    }
    let clamped = project_simplex(&mut next);
    Ok(FilterStep {
        state: SimplexState(next),
        clamped,
    })
}

/// Filter trajectory on the observation grid.
#[derive(Debug, Clone)]
pub struct FilterTrajectory {
    pub path: SampledPath,
    pub clamp_count: usize,
}

/// Runs [`wonham_ito_step`] along a sampled observation path.
pub fn filter_ito(
    chart: &dyn ParamChart,
    gamma: &SampledPath,
    pi0: &SimplexState,
    observation: &SampledPath,
) -> Result<FilterTrajectory> {
    let k = chart.param_dim();
    let times = observation.times();
    let mut pi = pi0.clone();
    let mut values = Vec::with_capacity(times.len() * pi.dim());
    values.extend_from_slice(pi.probs());
    let mut clamp_count = 0;
    for i in 0..times.len() - 1 {
        let v = chart.map(param_at(gamma, k, times[i]));
        let dy = observation.increment(i, i + 1);
        let step = wonham_ito_step(&pi, &v.rates, &v.observation, &dy, times[i + 1] - times[i])?;
        clamp_count += usize::from(step.clamped);
        pi = step.state;
        values.extend_from_slice(pi.probs());
    }
    Ok(FilterTrajectory {
        path: SampledPath::new(times.to_vec(), pi0.dim(), values)?,
        clamp_count,
    })
}

/// Stratonovich Wonham coefficients with `ψ^i = −(h^i)ᵀπ` as the attached integrand.
#[derive(Debug, Clone)]
pub struct WonhamCoefficients<'a> {
    chart: &'a dyn ParamChart,
    project: bool,
}

impl<'a> WonhamCoefficients<'a> {
    /// Coefficients that project onto the simplex after each step.
    pub fn new(chart: &'a dyn ParamChart) -> Self {
        Self { chart, project: true }
    }

    /// Coefficients without projection, so that simplex exits stay visible.
    pub fn unprojected(chart: &'a dyn ParamChart) -> Self {
        Self { chart, project: false }
    }
}

/// Builds the Stratonovich filter coefficients for a chart.
pub fn wonham_strat_coeffs(chart: &dyn ParamChart) -> WonhamCoefficients<'_> {
    WonhamCoefficients::new(chart)
}

impl RdeCoefficients for WonhamCoefficients<'_> {
    fn state_dim(&self) -> usize {
        self.chart.states()
    }
    fn drive_dim(&self) -> usize {
        self.chart.obs_dim()
    }
    fn param_dim(&self) -> usize {
        self.chart.param_dim()
    }
    fn integrand_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &[f64], gamma: &[f64], out: &mut [f64]) {
        let v = self.chart.map(gamma);
        let (a, h) = (&v.rates, &v.observation);
        let m = x.len();
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..m).map(|j| a[(i, j)] * x[j]).sum();
        }
        for c in 0..h.ncols() {
            let second: f64 = (0..m).map(|l| h[(l, c)] * h[(l, c)] * x[l]).sum();
            for (j, o) in out.iter_mut().enumerate() {
                *o += 0.5 * (second - h[(j, c)] * h[(j, c)]) * x[j];
            }
        }
    }

    fn diffusion(&self, x: &[f64], gamma: &[f64], out: &mut [f64]) {
        let h = self.chart.map(gamma).observation;
        let d = h.ncols();
        for c in 0..d {
            let mean: f64 = x.iter().enumerate().map(|(l, xl)| h[(l, c)] * xl).sum();
            for (j, xj) in x.iter().enumerate() {
                out[j * d + c] = (h[(j, c)] - mean) * xj;
            }
        }
    }

    fn diffusion_jacobian(&self, x: &[f64], gamma: &[f64], out: &mut [f64]) {
        let h = self.chart.map(gamma).observation;
        let m = x.len();
        let d = h.ncols();
        for c in 0..d {
            let mean: f64 = x.iter().enumerate().map(|(l, xl)| h[(l, c)] * xl).sum();
            for j in 0..m {
                let row = &mut out[(j * d + c) * m..(j * d + c + 1) * m];
                for (l, r) in row.iter_mut().enumerate() {
                    *r = -h[(l, c)] * x[j];
                }
                row[j] += h[(j, c)] - mean;
            }
        }
    }

    fn integrand(&self, x: &[f64], gamma: &[f64], out: &mut [f64]) {
        let h = self.chart.map(gamma).observation;
        for (c, o) in out.iter_mut().enumerate() {
            *o = -x.iter().enumerate().map(|(l, xl)| h[(l, c)] * xl).sum::<f64>();
        }
    }

    fn integrand_jacobian(&self, x: &[f64], gamma: &[f64], out: &mut [f64]) {
        let h = self.chart.map(gamma).observation;
        let m = x.len();
        for c in 0..h.ncols() {
            for l in 0..m {
                out[c * m + l] = -h[(l, c)];
            }
        }
    }

    fn project(&self, x: &mut [f64]) -> bool {
        self.project && project_simplex(x)
    }
}

/// Rough Wonham filter: Davie stepping of the Stratonovich coefficients with
/// per-step projection onto the simplex.
pub fn filter_rough(
    chart: &dyn ParamChart,
    gamma: &SampledPath,
    pi0: &SimplexState,
    drive: &SampledRoughPath,
) -> Result<ControlledSolution> {
    solve_forward(
        &wonham_strat_coeffs(chart),
        pi0.probs(),
        gamma,
        drive,
        &SolveOptions::default(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rough_path::canonical_lift;
    use approx::assert_relative_eq;

    fn times(n: usize, dt: f64) -> Vec<f64> {
        (0..=n).map(|i| i as f64 * dt).collect()
    }

    fn zero_gamma(n: usize, dt: f64) -> SampledPath {
        constant_parameter(&times(n, dt), &[0.0]).unwrap()
    }

    #[test]
    fn projection_keeps_sum_and_bounds() {
        let mut x = vec![-0.01, 0.4, 0.8];
        assert!(project_simplex(&mut x));
        assert!((x.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(x.iter().all(|v| *v >= SIMPLEX_CLAMP && *v <= 1.0 - SIMPLEX_CLAMP));
        let mut y = vec![0.25, 0.75];
        assert!(!project_simplex(&mut y));
        assert_eq!(y, vec![0.25, 0.75]);
    }

    #[test]
    fn simplex_state_rejects_bad_weights() {
        assert!(SimplexState::new(vec![]).is_err());
        assert!(SimplexState::new(vec![-1.0, 2.0]).is_err());
        assert!(SimplexState::new(vec![0.0, 0.0]).is_err());
        assert_eq!(SimplexState::new(vec![1.0, 3.0]).unwrap().probs(), &[0.25, 0.75]);
        assert_relative_eq!(SimplexState::from_log_odds(0.0).probs()[1], 0.5);
    }

    #[test]
    fn builtin_charts_are_valid() {
        let probes: Vec<Vec<f64>> = [-6.0, -1.3, 0.0, 0.4, 5.0].iter().map(|a| vec![*a]).collect();
        validate_chart(&RateUncertainChart::new(1.0, 1.0).unwrap(), &probes).unwrap();
        validate_chart(&ObservationUncertainChart::new(0.05, 0.05, 0.2, 1.8).unwrap(), &probes).unwrap();
        let c = RateUncertainChart::new(1.0, 1.0).unwrap();
        assert_relative_eq!(c.intensity(c.coordinate(0.3).unwrap()), 0.3, epsilon = 1e-14);
        let o = ObservationUncertainChart::new(0.05, 0.05, 0.2, 1.8).unwrap();
        assert_relative_eq!(o.signal(o.coordinate(0.4).unwrap()), 0.4, epsilon = 1e-14);
        // (ν₂ + ν₁e^{-a}) / (1 + e^{-a}) at a = 0.7
        let e = (-0.7f64).exp();
        assert_relative_eq!(o.signal(0.7), (1.8 + 0.2 * e) / (1.0 + e), epsilon = 1e-14);
    }

    #[test]
    fn fixed_chart_rejects_bad_rates() {
        let bad = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 1.0, -0.4]);
        assert!(FixedChart::new(bad, DMatrix::zeros(2, 1)).is_err());
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -1.0, -0.5]);
        assert!(FixedChart::new(neg, DMatrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn zero_rates_never_jump() {
        let chart = FixedChart::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 1)).unwrap();
        let g = zero_gamma(1000, 0.01);
        let path = simulate_chain(&chart, &g, &SimplexState::uniform(2).unwrap(), 10.0, 0.01, 3).unwrap();
        assert!(path.jump_times().is_empty());
    }

    #[test]
    fn excessive_rate_is_config_error() {
        let chart = RateUncertainChart::new(200.0, 1.0).unwrap();
        let g = zero_gamma(10, 0.01);
        let r = simulate_chain(&chart, &g, &SimplexState::uniform(2).unwrap(), 0.1, 0.01, 3);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn symmetric_chain_occupancy_is_balanced() {
        // λ = μ = 0.5 gives stationary law (½, ½). With switching rate 1 the
        // occupancy of a path of length T has variance about 1 / (4T).
        let chart = RateUncertainChart::new(1.0, 1.0).unwrap();
        let (horizon, dt) = (4000.0, 0.01);
        let g = zero_gamma(400_000, dt);
        let path = simulate_chain(&chart, &g, &SimplexState::uniform(2).unwrap(), horizon, dt, 11).unwrap();
        let occ = path.occupancy(2);
        let sigma = (1.0f64 / (4.0 * horizon)).sqrt();
        assert!((occ[1] - 0.5).abs() < 3.0 * sigma, "occupancy {occ:?}");
    }

    #[test]
    fn observation_drift_in_frozen_state() {
        let chart = RateUncertainChart::new(1.0, 1.0).unwrap();
        let chain = ChainPath::new(vec![], vec![1], 100.0, 2).unwrap();
        let dt = 0.01;
        let g = zero_gamma(10_000, dt);
        let y = simulate_observation(&chain, &chart, &g, 100.0, dt, 5).unwrap();
        let drift = y.point(y.len() - 1)[0] / 100.0;
        // Y_T / T ~ N(α, 1/T).
        assert!((drift - 1.0).abs() < 3.0 * 0.1, "drift {drift}");
        let again = simulate_observation(&chain, &chart, &g, 100.0, dt, 5).unwrap();
        assert_eq!(y, again);
    }

    #[test]
    fn pure_noise_increment_variance() {
        let chart = FixedChart::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 1)).unwrap();
        let chain = ChainPath::new(vec![], vec![0], 10.0, 2).unwrap();
        let dt = 1e-3;
        let g = zero_gamma(10_000, dt);
        let y = simulate_observation(&chain, &chart, &g, 10.0, dt, 9).unwrap();
        let n = y.len() - 1;
        let var = (0..n).map(|i| y.increment(i, i + 1)[0].powi(2)).sum::<f64>() / n as f64;
        // Sample variance of n Gaussians has relative sd √(2/n).
        assert!((var / dt - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn ito_step_without_signal_is_kolmogorov_euler() {
        let a = DMatrix::from_row_slice(2, 2, &[-0.3, 0.7, 0.3, -0.7]);
        let pi = SimplexState::new(vec![0.6, 0.4]).unwrap();
        let step = wonham_ito_step(&pi, &a, &DMatrix::zeros(2, 1), &[0.5], 0.01).unwrap();
        assert_relative_eq!(step.state.probs()[1], 0.4 + 0.01 * (0.3 * 0.6 - 0.7 * 0.4), epsilon = 1e-15);
        let same = wonham_ito_step(&pi, &DMatrix::zeros(2, 2), &DMatrix::zeros(2, 1), &[0.5], 0.01).unwrap();
        assert_eq!(same.state, pi);
    }

    #[test]
    fn ito_step_detects_instability() {
        let pi = SimplexState::new(vec![0.5, 0.5]).unwrap();
        let h = DMatrix::from_column_slice(2, 1, &[-1.0, 1.0]);
        let r = wonham_ito_step(&pi, &DMatrix::zeros(2, 2), &h, &[5.0], 0.01);
        assert!(matches!(r, Err(Error::StepSize { .. })));
    }

    fn central_jacobian(coeffs: &WonhamCoefficients<'_>, x: &[f64], g: &[f64], diffusion: bool) -> Vec<f64> {
        let m = x.len();
        let w = if diffusion { m * coeffs.drive_dim() } else { coeffs.drive_dim() };
        let mut out = vec![0.0; w * m];
        let h = 1e-6;
        let (mut up, mut dn) = (vec![0.0; w], vec![0.0; w]);
        for l in 0..m {
            let mut xu = x.to_vec();
            let mut xd = x.to_vec();
            xu[l] += h;
            xd[l] -= h;
            if diffusion {
                coeffs.diffusion(&xu, g, &mut up);
                coeffs.diffusion(&xd, g, &mut dn);
            } else {
                coeffs.integrand(&xu, g, &mut up);
                coeffs.integrand(&xd, g, &mut dn);
            }
            for r in 0..w {
                out[r * m + l] = (up[r] - dn[r]) / (2.0 * h);
            }
        }
        out
    }

    #[test]
    fn wonham_jacobians_match_central_differences() {
        let a = DMatrix::from_row_slice(3, 3, &[-0.5, 0.2, 0.1, 0.3, -0.2, 0.4, 0.2, 0.0, -0.5]);
        let h = DMatrix::from_row_slice(3, 2, &[0.3, -1.0, 1.2, 0.5, -0.7, 0.8]);
        let chart = FixedChart::new(a, h).unwrap();
        let coeffs = WonhamCoefficients::new(&chart);
        for x in [[0.2, 0.3, 0.5], [0.9, 0.05, 0.05], [0.1, 0.6, 0.3]] {
            let mut analytic = vec![0.0; 3 * 2 * 3];
            coeffs.diffusion_jacobian(&x, &[], &mut analytic);
            let fd = central_jacobian(&coeffs, &x, &[], true);
            for (an, f) in analytic.iter().zip(&fd) {
                assert!((an - f).abs() <= 1e-6 * (1.0 + an.abs()), "{an} vs {f}");
            }
            let mut analytic = vec![0.0; 2 * 3];
            coeffs.integrand_jacobian(&x, &[], &mut analytic);
            let fd = central_jacobian(&coeffs, &x, &[], false);
            for (an, f) in analytic.iter().zip(&fd) {
                assert!((an - f).abs() <= 1e-6 * (1.0 + an.abs()));
            }
        }
    }

    #[test]
    fn two_state_diffusion_matches_log_odds_form() {
        let chart = RateUncertainChart::new(1.0, 0.8).unwrap();
        let coeffs = wonham_strat_coeffs(&chart);
        let x = [0.3, 0.7];
        let mut phi = [0.0; 2];
        coeffs.diffusion(&x, &[0.2], &mut phi);
        assert_relative_eq!(phi[1], 2.0 * 0.8 * 0.7 * 0.3, epsilon = 1e-15);
        // With h = (−α, α) the Stratonovich correction vanishes.
        let mut b = [0.0; 2];
        coeffs.drift(&x, &[0.2], &mut b);
        let lambda = chart.intensity(0.2);
        assert_relative_eq!(b[1], lambda - 0.7, epsilon = 1e-15);
        let mut psi = [0.0];
        coeffs.integrand(&[1.0, 0.0], &[0.2], &mut psi);
        assert_relative_eq!(psi[0], 0.8);
    }

    #[test]
    fn rough_filter_without_signal_follows_kolmogorov() {
        let chart = RateUncertainChart::new(1.0, 0.0).unwrap();
        let a = chart.coordinate(0.3).unwrap();
        let dt = 1e-3;
        let n = 5000;
        let y = SampledPath::uniform(0.0, dt, 1, (0..=n).map(|i| (i as f64 * 0.01).sin()).collect()).unwrap();
        let drive = canonical_lift(&y).unwrap();
        let g = constant_parameter(drive.times(), &[a]).unwrap();
        let pi0 = SimplexState::new(vec![0.9, 0.1]).unwrap();
        let sol = filter_rough(&chart, &g, &pi0, &drive).unwrap();
        for i in (0..=n).step_by(500) {
            let t = i as f64 * dt;
            let exact = 0.3 + (0.1 - 0.3) * (-t).exp();
            assert!((sol.state(i)[1] - exact).abs() < dt, "t={t}");
        }
    }

    #[test]
    fn filter_is_informative() {
        let chart = RateUncertainChart::new(1.0, 1.0).unwrap();
        let a = chart.coordinate(0.1).unwrap();
        let (horizon, dt) = (200.0, 2e-3);
        let g = constant_parameter(&times(100_000, dt), &[a]).unwrap();
        let pi0 = SimplexState::uniform(2).unwrap();
        let chain = simulate_chain(&chart, &g, &pi0, horizon, dt, 21).unwrap();
        let y = simulate_observation(&chain, &chart, &g, horizon, dt, 21).unwrap();
        let traj = filter_ito(&chart, &g, &pi0, &y).unwrap();
        let n = traj.path.len();
        let hit: f64 = (0..n)
            .map(|i| traj.path.point(i)[chain.state_at(traj.path.times()[i])])
            .sum::<f64>()
            / n as f64;
        assert!(hit > 0.5, "mean posterior on the true state {hit}");
    }
}
