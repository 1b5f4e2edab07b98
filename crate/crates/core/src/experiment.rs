//! End-to-end experiment pipeline: simulate, filter, robust filter.

use std::fs;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::hmm::{filter_ito, simulate_chain, simulate_observation, ChainPath, FilterTrajectory, SimplexState};
use crate::io;
use crate::robust::RobustEstimate;
use crate::rough_path::{canonical_lift, stratonovich_lift, SampledPath, SampledRoughPath};
use crate::value::{propagate, TransformedDynamics, ValueTrack};

/// Simulated signal and observation on the filter grid.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub chain: ChainPath,
    /// True chart coordinate on the filter grid.
    pub truth: SampledPath,
    pub observation: SampledPath,
    /// Stratonovich lift of the observation built from the fine samples.
    pub drive: SampledRoughPath,
}

/// Chart coordinate of the scheduled parameter on `t_i = i·dt`, `i ≤ n`.
pub fn truth_path(cfg: &ExperimentConfig, dt: f64, n: usize) -> Result<SampledPath> {
    let times: Vec<f64> = (0..=n).map(|i| i as f64 * dt).collect();
    let values = times
        .iter()
        .map(|t| cfg.coordinate(cfg.schedule.value_at(*t)))
        .collect::<Result<Vec<_>>>()?;
    SampledPath::scalar(times, values)
}

/// Simulates on a grid `fine_factor` times finer than `dt` and lifts the
/// observation back onto the `dt` grid.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Simulation> {
    cfg.validate()?;
    let chart = cfg.build_chart()?;
    let n = cfg.steps();
    let fine_dt = cfg.dt / cfg.fine_factor as f64;
    let fine_truth = truth_path(cfg, fine_dt, n * cfg.fine_factor)?;
    let pi0 = SimplexState::new(cfg.initial_distribution.clone())?;
    let chain = simulate_chain(chart.as_ref(), &fine_truth, &pi0, cfg.horizon, fine_dt, cfg.seed)?;
    let fine_obs = simulate_observation(&chain, chart.as_ref(), &fine_truth, cfg.horizon, fine_dt, cfg.seed)?;
    let drive = stratonovich_lift(&fine_obs, cfg.fine_factor)?;
    Ok(Simulation {
        chain,
        truth: truth_path(cfg, cfg.dt, n)?,
        observation: drive.base().clone(),
        drive,
    })
}

/// Plain Wonham filter run with the true parameter schedule.
pub fn filter(cfg: &ExperimentConfig, observation: &SampledPath) -> Result<FilterTrajectory> {
    let chart = cfg.build_chart()?;
    let n = observation.len() - 1;
    let truth = truth_path(cfg, cfg.dt, n)?;
    let pi0 = SimplexState::new(cfg.initial_distribution.clone())?;
    filter_ito(chart.as_ref(), &truth, &pi0, observation)
}

#[derive(Debug)]
pub struct RobustRun {
    pub dynamics: TransformedDynamics,
    pub track: ValueTrack,
    /// One estimate per track record.
    pub estimates: Vec<RobustEstimate>,
}

impl RobustRun {
    pub fn failure(&self) -> Option<&Error> {
        self.track.failure.as_ref()
    }

    pub fn terminal(&self) -> Option<&RobustEstimate> {
        self.estimates.last()
    }
}

/// Estimates read off a track; `kappa_min` is the unshifted minimum of κ.
pub fn estimates_from_track(track: &ValueTrack, dynamics: &TransformedDynamics) -> Vec<RobustEstimate> {
    let minima = track.cumulative_minima();
    track
        .times
        .iter()
        .zip(&track.minimizers)
        .zip(minima)
        .map(|((t, [q, g]), kappa_min)| RobustEstimate {
            t: *t,
            a_star: vec![*g],
            parameter: dynamics.parameter(*g),
            x_star: SimplexState::from_log_odds(*q),
            kappa_min,
        })
        .collect()
}

/// Propagates κ along the drive in the configured mode. Numerical failures
/// are kept in the track with everything recorded before them.
pub fn robust_filter(cfg: &ExperimentConfig, drive: &SampledRoughPath) -> Result<RobustRun> {
    let dynamics = cfg.dynamics()?;
    let track = propagate(drive, &dynamics, cfg.mode, &cfg.propagate_options()?)?;
    let estimates = estimates_from_track(&track, &dynamics);
    Ok(RobustRun {
        dynamics,
        track,
        estimates,
    })
}

/// Posterior weight put on the true state, averaged over the given times.
pub fn posterior_hit_rate(state_at: impl Fn(f64) -> usize, posterior: &[(f64, SimplexState)]) -> f64 {
    if posterior.is_empty() {
        return f64::NAN;
    }
    let total: f64 = posterior.iter().map(|(t, x)| x.probs()[state_at(*t)]).sum();
    total / posterior.len() as f64
}

/// Piecewise-constant state lookup over `(t, state)` samples: each sample
/// holds until the next one.
pub fn sampled_states(rows: Vec<(f64, usize)>) -> impl Fn(f64) -> usize {
    move |t| {
        let i = rows.partition_point(|r| r.0 <= t + 1e-12).max(1) - 1;
        rows[i].1
    }
}

pub const CHAIN_FILE: &str = "chain.csv";
pub const OBSERVATION_FILE: &str = "observation.csv";
pub const ROUGH_FILE: &str = "rough.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const FILTER_FILE: &str = "filter.csv";
pub const KAPPA_FILE: &str = "kappa_track.csv";
pub const ESTIMATES_FILE: &str = "estimates.csv";

/// Writes chain, observation, rough and truth CSVs, one row per grid time.
pub fn write_simulation(dir: &Path, cfg: &ExperimentConfig, sim: &Simulation) -> Result<()> {
    fs::create_dir_all(dir)?;
    io::write_chain_file(&dir.join(CHAIN_FILE), &sim.chain, sim.observation.times())?;
    io::write_path_file(&dir.join(OBSERVATION_FILE), &sim.observation)?;
    io::write_rough_path_file(&dir.join(ROUGH_FILE), &sim.drive)?;
    let dynamics = cfg.dynamics()?;
    let values = sim.truth.values().iter().map(|g| dynamics.parameter(*g)).collect();
    let truth = SampledPath::scalar(sim.truth.times().to_vec(), values)?;
    io::write_path_file(&dir.join(TRUTH_FILE), &truth)?;
    Ok(())
}

pub fn write_filter(dir: &Path, trajectory: &FilterTrajectory) -> Result<()> {
    fs::create_dir_all(dir)?;
    io::write_filter_file(&dir.join(FILTER_FILE), &trajectory.path)
}

/// Writes the κ track, the estimate series and any grid snapshots.
pub fn write_robust(dir: &Path, cfg: &ExperimentConfig, run: &RobustRun) -> Result<()> {
    fs::create_dir_all(dir)?;
    let every = cfg.output.record_every;
    io::write_kappa_track_file(&dir.join(KAPPA_FILE), &run.track, every)?;
    let kept: Vec<RobustEstimate> = io::recorded(run.estimates.len(), every)
        .map(|i| run.estimates[i].clone())
        .collect();
    io::write_estimates_file(&dir.join(ESTIMATES_FILE), &kept, run.dynamics.parameter_name())?;
    for (step, gv) in &run.track.snapshots {
        io::write_grid_file(&dir.join(format!("grid_{step:07}.csv")), gv)?;
    }
    if let Some(gv) = &run.track.final_grid {
        io::write_grid_file(&dir.join("grid_final.csv"), gv)?;
    }
    Ok(())
}

/// Reads `rough.csv` from a directory, or lifts `observation.csv` canonically
/// when no rough path was stored. A scalar path has only one geometric lift,
/// so both agree for scalar observations.
pub fn load_drive(dir: &Path) -> Result<SampledRoughPath> {
    let rough = dir.join(ROUGH_FILE);
    if rough.exists() {
        return io::read_rough_path_file(&rough);
    }
    let obs = dir.join(OBSERVATION_FILE);
    if obs.exists() {
        return canonical_lift(&io::read_path_file(&obs)?);
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("no {ROUGH_FILE} or {OBSERVATION_FILE} in {}", dir.display()),
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::ex61();
        cfg.horizon = 2.0;
        cfg.schedule.breakpoints = vec![0.0, 1.0];
        cfg.seed = seed;
        cfg
    }

    #[test]
    fn simulation_is_deterministic_and_sized() {
        let cfg = small(3);
        let a = simulate(&cfg).unwrap();
        let b = simulate(&cfg).unwrap();
        assert_eq!(a.observation, b.observation);
        assert_eq!(a.drive, b.drive);
        assert_eq!(a.observation.len(), cfg.steps() + 1);
        assert_eq!(a.truth.len(), cfg.steps() + 1);
        let c = simulate(&small(4)).unwrap();
        assert_ne!(a.observation, c.observation);
    }

    #[test]
    fn scalar_drive_area_is_half_square() {
        let sim = simulate(&small(5)).unwrap();
        for i in 0..sim.drive.steps() {
            let dy = sim.drive.step_increment(i)[0];
            assert!((sim.drive.step_area(i)[0] - 0.5 * dy * dy).abs() < 1e-12);
        }
    }

    #[test]
    fn robust_filter_records_every_step() {
        let cfg = small(6);
        let sim = simulate(&cfg).unwrap();
        let run = robust_filter(&cfg, &sim.drive).unwrap();
        assert!(run.failure().is_none());
        assert_eq!(run.estimates.len(), cfg.steps() + 1);
        let lam = run.terminal().unwrap().parameter;
        assert!(lam > 0.0 && lam < 1.0);
    }

    #[test]
    fn write_and_reload_drive() {
        let cfg = small(7);
        let sim = simulate(&cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("rough-filter-exp-{}", std::process::id()));
        write_simulation(&dir, &cfg, &sim).unwrap();
        let back = load_drive(&dir).unwrap();
        assert_eq!(back, sim.drive);
        let rows = fs::read_to_string(dir.join(CHAIN_FILE)).unwrap().lines().count();
        assert_eq!(rows, cfg.steps() + 2);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn hit_rate_of_certain_posteriors() {
        let rows = vec![(0.0, 0), (0.5, 1)];
        let lookup = sampled_states(rows);
        assert_eq!(lookup(0.25), 0);
        assert_eq!(lookup(0.5), 1);
        let sure = |p: f64| SimplexState::new(vec![1.0 - p, p]).unwrap();
        let post = vec![(0.0, sure(0.0)), (0.4, sure(0.5)), (0.6, sure(1.0)), (0.9, sure(0.0))];
        // Weights on the true state: 1, ½, 1, 0, each up to the 1e-12 clamp.
        assert!((posterior_hit_rate(&lookup, &post) - 0.625).abs() < 1e-11);
        assert!(posterior_hit_rate(&lookup, &[]).is_nan());
    }
}
