//! Pinned-seed verification suites with machine-readable pass/fail lines.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::hmm::{filter_ito, filter_rough, simulate_chain, simulate_observation, constant_parameter, SimplexState, RateUncertainChart};
use crate::rde::{solve_forward, stability_check, RdeCoefficients, SolveOptions, StabilityConfig};
use crate::rough_path::{
    canonical_lift, sharpness_fixture, piecewise_linear_integral, stratonovich_lift, SampledPath, SampledRoughPath,
};
use crate::value::{dpp_residual, grid_dp_step, DppResidual, uniform_controls, Axis, GridValue, ValueDynamics};

pub const VERIFY_SEED: u64 = 0x5eed_2024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Chen,
    Sharpness,
    Dpp,
    Consistency,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 5] = ["chen", "sharpness", "dpp", "consistency", "all"];

    fn expand(self) -> Vec<Suite> {
        match self {
            Suite::All => vec![Suite::Chen, Suite::Sharpness, Suite::Dpp, Suite::Consistency],
            s => vec![s],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Suite::Chen => "chen",
            Suite::Sharpness => "sharpness",
            Suite::Dpp => "dpp",
            Suite::Consistency => "consistency",
            Suite::All => "all",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chen" => Ok(Suite::Chen),
            "sharpness" => Ok(Suite::Sharpness),
            "dpp" => Ok(Suite::Dpp),
            "consistency" => Ok(Suite::Consistency),
            "all" => Ok(Suite::All),
            other => Err(Error::Config(format!(
                "unknown suite {other:?}; expected one of {}",
                Suite::NAMES.join(", ")
            ))),
        }
    }
}

/// One measured quantity against its limit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
}

impl Check {
    fn below(suite: &'static str, name: impl Into<String>, value: f64, limit: f64) -> Self {
        Check {
            suite,
            name: name.into(),
            value,
            limit,
            passed: value < limit,
        }
    }

    fn at_least(suite: &'static str, name: impl Into<String>, value: f64, limit: f64) -> Self {
        Check {
            suite,
            name: name.into(),
            value,
            limit,
            passed: value >= limit,
        }
    }

    fn flag(suite: &'static str, name: impl Into<String>, ok: bool) -> Self {
        Check {
            suite,
            name: name.into(),
            value: f64::from(u8::from(ok)),
            limit: 1.0,
            passed: ok,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{} value={:.6e} limit={:.6e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.value,
            self.limit
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&c.to_string());
            out.push('\n');
        }
        let failed = self.failures().count();
        out.push_str(&format!("{} checks, {failed} failed\n", self.checks.len()));
        out
    }

    /// `suite, check, value, limit, pass`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(["suite", "check", "value", "limit", "pass"])?;
        for c in &self.checks {
            w.write_record([
                c.suite.to_string(),
                c.name.clone(),
                format!("{}", c.value),
                format!("{}", c.limit),
                c.passed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn run(suite: Suite) -> Result<Report> {
    let mut report = Report::default();
    for s in suite.expand() {
        let checks = match s {
            Suite::Chen => chen_suite(VERIFY_SEED)?,
            Suite::Sharpness => sharpness_suite()?,
            Suite::Dpp => dpp_suite(VERIFY_SEED)?,
            Suite::Consistency => consistency_suite(VERIFY_SEED)?,
            Suite::All => unreachable!(),
        };
        report.checks.extend(checks);
    }
    Ok(report)
}

fn brownian(rng: &mut ChaCha8Rng, n: usize, dt: f64, d: usize) -> Result<SampledPath> {
    let mut values = vec![0.0; (n + 1) * d];
    for i in 1..=n {
        for c in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            values[i * d + c] = values[(i - 1) * d + c] + dt.sqrt() * z;
        }
    }
    SampledPath::uniform(0.0, dt, d, values)
}

/// Worst Chen and symmetric-part defects, relative to `1 + ‖Y‖²_∞`, over
/// random canonical and Stratonovich lifts.
pub fn chen_suite(seed: u64) -> Result<Vec<Check>> {
    const LIFTS: usize = 50;
    const STEPS: usize = 1000;
    const TRIPLES: usize = 100;
    const FINE: usize = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut chen, mut sym): (f64, f64) = (0.0, 0.0);
    for k in 0..LIFTS {
        let d = 1 + k % 2;
        let lift: SampledRoughPath = if k % 4 < 2 {
            canonical_lift(&brownian(&mut rng, STEPS, 1e-3, d)?)?
        } else {
            stratonovich_lift(&brownian(&mut rng, STEPS * FINE, 1e-4, d)?, FINE)?
        };
        let scale = 1.0 + lift.base().sup_norm().powi(2);
        for _ in 0..TRIPLES {
            let mut idx = [
                rng.random_range(0..=STEPS),
                rng.random_range(0..=STEPS),
                rng.random_range(0..=STEPS),
            ];
            idx.sort_unstable();
            let [s, r, t] = idx;
            let defect = lift.chen_defect(s, r, t)?;
            chen = chen.max(defect.iter().fold(0.0_f64, |m, v| m.max(v.abs())) / scale);
            sym = sym.max(lift.symmetric_defect(s, t) / scale);
        }
    }
    Ok(vec![
        Check::below("chen", "chen_defect", chen, 1e-9),
        Check::below("chen", "symmetric_defect", sym, 1e-9),
    ])
}

/// `dI = γ dY`, integrand only.
struct GammaIntegral;

impl RdeCoefficients for GammaIntegral {
    fn state_dim(&self) -> usize {
        1
    }
    fn drive_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn integrand_dim(&self) -> usize {
        1
    }
    fn drift(&self, _x: &[f64], _g: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn diffusion(&self, _x: &[f64], _g: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn diffusion_jacobian(&self, _x: &[f64], _g: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn integrand(&self, _x: &[f64], g: &[f64], out: &mut [f64]) {
        out[0] = g[0];
    }
    fn integrand_jacobian(&self, _x: &[f64], _g: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
}

pub const SHARPNESS_PS: [f64; 3] = [2.1, 2.5, 2.9];
pub const SHARPNESS_EPS: f64 = 0.1;
pub const SHARPNESS_MAX_LOG2_N: u32 = 10;

/// Quadrature, growth slope and bound-ratio growth on the sharpness family.
pub fn sharpness_suite() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for p in SHARPNESS_PS {
        let eps = SHARPNESS_EPS;
        let mut worst_rel: f64 = 0.0;
        let mut logs = Vec::new();
        let mut ratios = Vec::new();
        let cfg = StabilityConfig {
            constant: 1.0,
            gamma_exponent: Some((p - 1.0) / 2.0 - 0.1),
            include_time_term: true,
        };
        for k in 0..=SHARPNESS_MAX_LOG2_N {
            let n = 1usize << k;
            let fx = sharpness_fixture(n, p, eps)?;
            let integral = piecewise_linear_integral(&fx.gamma, fx.drive.base())?;
            worst_rel = worst_rel.max((integral / fx.expected_integral - 1.0).abs());
            logs.push(((n as f64).ln(), integral.ln()));
            let sol = solve_forward(&GammaIntegral, &[0.0], &fx.gamma, &fx.drive, &SolveOptions::default())?;
            ratios.push(stability_check(&sol, &fx.drive, &fx.gamma, p, &cfg)?.ratio);
        }
        let slope = least_squares_slope(&logs);
        let target = 1.0 - 1.0 / p - eps;
        let increasing = ratios.windows(2).all(|w| w[1] > w[0]);
        checks.push(Check::below("sharpness", format!("p={p}/quadrature_rel_error"), worst_rel, 1e-10));
        checks.push(Check::below("sharpness", format!("p={p}/slope_error"), (slope - target).abs(), 1e-6));
        checks.push(Check::flag("sharpness", format!("p={p}/ratio_increasing"), increasing));
    }
    Ok(checks)
}

fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Mini DPP instance: largest two-step residual along a short propagation.
pub struct DppInstance {
    pub half_width: f64,
    pub nodes: usize,
    pub controls: usize,
    pub u_max: f64,
    pub horizon: f64,
    pub dt: f64,
}

impl Default for DppInstance {
    fn default() -> Self {
        Self {
            half_width: 2.0,
            nodes: 41,
            controls: 11,
            u_max: 50.0,
            horizon: 0.2,
            dt: 0.01,
        }
    }
}

impl DppInstance {
    /// Propagates the initial cost along a pinned Brownian drive and returns
    /// the worst residuals over all two-step windows, with the smallest
    /// front-free node count seen.
    pub fn max_residual(&self, seed: u64) -> Result<DppResidual> {
        let dynamics = ExperimentConfig::ex61().dynamics()?;
        let steps = (self.horizon / self.dt).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let drive = canonical_lift(&brownian(&mut rng, steps, self.dt, 1)?)?;
        let axis = Axis::new(-self.half_width, self.half_width, self.nodes)?;
        let controls = uniform_controls(self.controls, self.u_max)?;
        let mut kappa = vec![GridValue::from_fn(axis, axis, |q, g| dynamics.initial_cost(q, g))?];
        for i in 0..steps {
            let next = grid_dp_step(
                &kappa[i],
                &dynamics,
                drive.step_increment(i)[0],
                drive.step_area(i)[0],
                self.dt,
                &controls,
            )?;
            kappa.push(next);
        }
        let mut worst = DppResidual {
            finite: 0.0,
            front_free: 0.0,
            front_free_nodes: usize::MAX,
        };
        for r in 0..steps - 1 {
            let res = dpp_residual(&kappa[r + 2], &kappa[r], &dynamics, r..r + 2, &drive, &controls)?;
            worst.finite = worst.finite.max(res.finite);
            worst.front_free = worst.front_free.max(res.front_free);
            worst.front_free_nodes = worst.front_free_nodes.min(res.front_free_nodes);
        }
        Ok(worst)
    }
}

pub fn dpp_suite(seed: u64) -> Result<Vec<Check>> {
    let coarse = DppInstance::default();
    let fine = DppInstance {
        nodes: 2 * coarse.nodes - 1,
        ..DppInstance::default()
    };
    let r_coarse = coarse.max_residual(seed)?;
    let r_fine = fine.max_residual(seed)?;
    let info = |name: &str, value: f64| Check {
        suite: "dpp",
        name: name.into(),
        value,
        limit: f64::INFINITY,
        passed: true,
    };
    Ok(vec![
        info("residual_all_finite_41", r_coarse.finite),
        info("front_free_nodes_41", r_coarse.front_free_nodes as f64),
        Check::below("dpp", "residual_41", r_coarse.front_free, 5e-3),
        Check::at_least("dpp", "refinement_ratio", r_coarse.front_free / r_fine.front_free, 2.0),
    ])
}

pub const CONSISTENCY_DTS: [f64; 3] = [4e-3, 2e-3, 1e-3];

/// Sup-distance between the Itô Euler–Maruyama filter and the rough filter
/// on one Brownian sample of the rate-uncertain model, for each step size.
pub fn consistency_distances(seed: u64, horizon: f64) -> Result<Vec<f64>> {
    const FINE_DT: f64 = 1e-4;
    let chart = RateUncertainChart::new(1.0, 1.0)?;
    let gamma_value = chart.coordinate(0.1)?;
    let n_fine = (horizon / FINE_DT).round() as usize;
    let fine_times: Vec<f64> = (0..=n_fine).map(|i| i as f64 * FINE_DT).collect();
    let fine_gamma = constant_parameter(&fine_times, &[gamma_value])?;
    let pi0 = SimplexState::uniform(2)?;
    let chain = simulate_chain(&chart, &fine_gamma, &pi0, horizon, FINE_DT, seed)?;
    let fine_obs = simulate_observation(&chain, &chart, &fine_gamma, horizon, FINE_DT, seed)?;
    CONSISTENCY_DTS
        .iter()
        .map(|&dt| {
            let factor = (dt / FINE_DT).round() as usize;
            let drive = stratonovich_lift(&fine_obs, factor)?;
            let gamma = constant_parameter(drive.times(), &[gamma_value])?;
            let ito = filter_ito(&chart, &gamma, &pi0, drive.base())?;
            let rough = filter_rough(&chart, &gamma, &pi0, &drive)?;
            let mut worst: f64 = 0.0;
            for i in 0..drive.len() {
                let a = ito.path.point(i);
                let b = rough.state(i);
                worst = a.iter().zip(b).fold(worst, |m, (x, y)| m.max((x - y).abs()));
            }
            Ok(worst)
        })
        .collect()
}

pub fn consistency_suite(seed: u64) -> Result<Vec<Check>> {
    let d = consistency_distances(seed, 10.0)?;
    let decreasing = d.windows(2).all(|w| w[1] < w[0]);
    let mut checks: Vec<Check> = CONSISTENCY_DTS
        .iter()
        .zip(&d)
        .map(|(dt, v)| Check {
            suite: "consistency",
            name: format!("sup_distance_dt={dt}"),
            value: *v,
            limit: f64::INFINITY,
            passed: true,
        })
        .collect();
    checks.push(Check::flag("consistency", "decreasing_in_dt", decreasing));
    checks.push(Check::below("consistency", "sup_distance_finest", d[d.len() - 1], 0.02));
    Ok(checks)
}
