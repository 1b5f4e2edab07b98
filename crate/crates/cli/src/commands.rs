use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use rough_filter::config::ExperimentConfig;
use rough_filter::experiment::{self, posterior_hit_rate, sampled_states, CHAIN_FILE};
use rough_filter::hmm::SimplexState;
use rough_filter::io;
use rough_filter::rough_path::{piecewise_linear_integral, sharpness_fixture, SampledRoughPath};
use rough_filter::verify::{self, Suite};
use serde_json::json;

use crate::error::CliError;
use crate::gnuplot;
use crate::manifest::{sha256_hex, Manifest};

pub const CONFIG_FILE: &str = "config.toml";

/// One seed replicate: its configuration and output directory.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
    /// Directory holding stored observation artifacts, if any.
    pub input: Option<PathBuf>,
}

/// Seeds `seed, seed + 1, …`; with more than one replicate each gets its own
/// `rep-<seed>` directory, under the input directory too when it has them.
pub fn replicates(cfg: &ExperimentConfig, count: usize, input: Option<&Path>) -> Vec<Replicate> {
    let base = cfg.output.dir.clone();
    if count <= 1 {
        return vec![Replicate {
            config: cfg.clone(),
            dir: base,
            input: input.map(Path::to_path_buf),
        }];
    }
    (0..count as u64)
        .map(|r| {
            let mut config = cfg.clone();
            config.seed = cfg.seed + r;
            let sub = format!("rep-{}", config.seed);
            let dir = base.join(&sub);
            config.output.dir = dir.clone();
            let input = input.map(|i| if i.join(&sub).is_dir() { i.join(&sub) } else { i.to_path_buf() });
            Replicate { config, dir, input }
        })
        .collect()
}

/// Runs every replicate in parallel; prints one summary line per replicate
/// in seed order and returns the first failure.
pub fn run_all(
    command: &'static str,
    reps: &[Replicate],
    emit_gnuplot: bool,
    job: impl Fn(&Replicate, &mut Manifest) -> Result<(), CliError> + Sync,
) -> Result<(), CliError> {
    let results: Vec<(Result<(), CliError>, serde_json::Value)> = reps
        .par_iter()
        .map(|rep| {
            let mut manifest = Manifest::new(command);
            let result = start(rep, &mut manifest).and_then(|()| job(rep, &mut manifest));
            if let Err(e) = &result {
                manifest.status = "failed";
                manifest.failure = Some(e.to_string());
            }
            if emit_gnuplot && result.is_ok() {
                if let Err(e) = gnuplot::write(command, &rep.dir) {
                    return (Err(e), manifest.summary.clone());
                }
                manifest.outputs.push(gnuplot::SCRIPT_FILE.into());
            }
            let written = if rep.dir.is_dir() { manifest.write(&rep.dir) } else { Ok(()) };
            (result.and(written), manifest.summary.clone())
        })
        .collect();
    for (rep, (result, summary)) in reps.iter().zip(&results) {
        let status = if result.is_ok() { "ok" } else { "failed" };
        println!("seed {} {status} {} {}", rep.config.seed, rep.dir.display(), summary);
    }
    if reps.len() > 1 {
        let mut top = Manifest::new(command);
        top.seeds = reps.iter().map(|r| r.config.seed).collect();
        top.outputs = reps.iter().map(|r| r.dir.display().to_string()).collect();
        if results.iter().any(|r| r.0.is_err()) {
            top.status = "failed";
        }
        top.summary = serde_json::Value::Array(results.iter().map(|r| r.1.clone()).collect());
        if let Some(base) = reps[0].dir.parent() {
            fs::create_dir_all(base)?;
            top.write(base)?;
        }
    }
    results.into_iter().map(|r| r.0).find(Result::is_err).unwrap_or(Ok(()))
}

/// Creates the output directory and stores the effective configuration.
fn start(rep: &Replicate, manifest: &mut Manifest) -> Result<(), CliError> {
    fs::create_dir_all(&rep.dir)?;
    let text = rep.config.to_toml()?;
    fs::write(rep.dir.join(CONFIG_FILE), &text)?;
    manifest.config_sha256 = Some(sha256_hex(text.as_bytes()));
    manifest.seeds = vec![rep.config.seed];
    manifest.outputs.push(CONFIG_FILE.into());
    Ok(())
}

fn simulation_outputs(manifest: &mut Manifest) {
    for f in [
        experiment::CHAIN_FILE,
        experiment::OBSERVATION_FILE,
        experiment::ROUGH_FILE,
        experiment::TRUTH_FILE,
    ] {
        manifest.outputs.push(f.into());
    }
}

pub fn simulate(rep: &Replicate, manifest: &mut Manifest) -> Result<(), CliError> {
    let sim = experiment::simulate(&rep.config)?;
    experiment::write_simulation(&rep.dir, &rep.config, &sim)?;
    simulation_outputs(manifest);
    let horizon = rep.config.horizon;
    manifest.summary = json!({
        "steps": rep.config.steps(),
        "jumps": sim.chain.jump_times().len(),
        "occupancy": sim.chain.occupancy(2).iter().map(|t| t / horizon).collect::<Vec<_>>(),
    });
    Ok(())
}

/// Observation data and, when known, the true chain states.
struct Data {
    drive: SampledRoughPath,
    states: Option<Vec<(f64, usize)>>,
}

/// Loads stored artifacts from the input directory, or simulates and stores
/// them next to the outputs.
fn data(rep: &Replicate, manifest: &mut Manifest) -> Result<Data, CliError> {
    if let Some(input) = &rep.input {
        let drive = experiment::load_drive(input)?;
        let chain = input.join(CHAIN_FILE);
        let states = if chain.exists() {
            Some(io::read_chain_file(&chain)?)
        } else {
            None
        };
        return Ok(Data { drive, states });
    }
    let sim = experiment::simulate(&rep.config)?;
    experiment::write_simulation(&rep.dir, &rep.config, &sim)?;
    simulation_outputs(manifest);
    let states = sim
        .observation
        .times()
        .iter()
        .map(|t| (*t, sim.chain.state_at(*t)))
        .collect();
    Ok(Data {
        drive: sim.drive,
        states: Some(states),
    })
}

fn hit_rate(states: Option<Vec<(f64, usize)>>, posterior: &[(f64, SimplexState)]) -> Option<f64> {
    states.map(|rows| posterior_hit_rate(sampled_states(rows), posterior))
}

pub fn filter(rep: &Replicate, manifest: &mut Manifest) -> Result<(), CliError> {
    let data = data(rep, manifest)?;
    let trajectory = experiment::filter(&rep.config, data.drive.base())?;
    experiment::write_filter(&rep.dir, &trajectory)?;
    manifest.outputs.push(experiment::FILTER_FILE.into());
    let path = &trajectory.path;
    let posterior = (0..path.len())
        .map(|i| Ok((path.times()[i], SimplexState::new(path.point(i).to_vec())?)))
        .collect::<Result<Vec<_>, rough_filter::Error>>()?;
    manifest.summary = json!({
        "clamp_events": trajectory.clamp_count,
        "posterior_hit_rate": hit_rate(data.states, &posterior),
    });
    Ok(())
}

pub fn robust_filter(rep: &Replicate, manifest: &mut Manifest) -> Result<(), CliError> {
    let data = data(rep, manifest)?;
    let run = experiment::robust_filter(&rep.config, &data.drive)?;
    experiment::write_robust(&rep.dir, &rep.config, &run)?;
    manifest.outputs.push(experiment::KAPPA_FILE.into());
    manifest.outputs.push(experiment::ESTIMATES_FILE.into());
    if run.track.final_grid.is_some() {
        manifest.outputs.push("grid_final.csv".into());
    }
    let posterior: Vec<(f64, SimplexState)> = run.estimates.iter().map(|e| (e.t, e.x_star.clone())).collect();
    let name = run.dynamics.parameter_name();
    manifest.summary = match run.terminal() {
        Some(last) => {
            let truth = rep.config.schedule.value_at(last.t);
            json!({
                "t": last.t,
                "estimate": last.parameter,
                "truth": truth,
                "abs_error": (last.parameter - truth).abs(),
                "parameter": name,
                "posterior_hit_rate": hit_rate(data.states, &posterior),
            })
        }
        None => serde_json::Value::Null,
    };
    if let Some(e) = run.track.failure {
        return Err(CliError::Partial {
            dir: rep.dir.display().to_string(),
            source: e,
        });
    }
    Ok(())
}

pub fn verify(suite: Suite, out: Option<&Path>) -> Result<(), CliError> {
    let report = verify::run(suite)?;
    print!("{}", report.to_text());
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("verify_report.txt"), report.to_text())?;
        report.write_csv(fs::File::create(dir.join("verify_report.csv"))?)?;
        let mut manifest = Manifest::new("verify");
        manifest.seeds = vec![verify::VERIFY_SEED];
        manifest.outputs = vec!["verify_report.txt".into(), "verify_report.csv".into()];
        manifest.summary = json!({ "suite": suite.name(), "checks": report.checks });
        if !report.passed() {
            manifest.status = "failed";
        }
        manifest.write(dir)?;
    }
    let failed = report.failures().count();
    if failed > 0 {
        return Err(CliError::Verification(failed));
    }
    Ok(())
}

pub fn fixture(n: usize, p: f64, eps: f64, out: &Path) -> Result<(), CliError> {
    let fx = sharpness_fixture(n, p, eps)?;
    fs::create_dir_all(out)?;
    io::write_rough_path_file(&out.join("fixture_drive.csv"), &fx.drive)?;
    io::write_path_file(&out.join("fixture_gamma.csv"), &fx.gamma)?;
    let quadrature = piecewise_linear_integral(&fx.gamma, fx.drive.base())?;
    let last = fx.drive.len() - 1;
    let summary = json!({
        "n": n,
        "p": p,
        "eps": eps,
        "expected_integral": fx.expected_integral,
        "quadrature": quadrature,
        "drive_p_variation": fx.drive.base().p_variation(p, 0..=last)?.value,
        "gamma_sup": fx.gamma.sup_norm(),
    });
    println!("{summary}");
    let mut manifest = Manifest::new("fixture");
    manifest.outputs = vec!["fixture_drive.csv".into(), "fixture_gamma.csv".into()];
    manifest.summary = summary;
    manifest.write(out)?;
    Ok(())
}
