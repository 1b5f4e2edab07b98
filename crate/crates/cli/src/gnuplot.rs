use std::fs;
use std::path::Path;

use rough_filter::experiment::{CHAIN_FILE, ESTIMATES_FILE, FILTER_FILE, OBSERVATION_FILE, TRUTH_FILE};

use crate::error::CliError;

pub const SCRIPT_FILE: &str = "plot.gp";

/// Writes a gnuplot script that plots the outputs of `command` in `dir`.
/// Paths in the script are relative to `dir`; series whose file is absent
/// (data read from another directory) are left out.
pub fn write(command: &str, dir: &Path) -> Result<(), CliError> {
    let series = |items: &[(&str, &str)]| -> String {
        let kept: Vec<String> = items
            .iter()
            .filter(|(file, _)| dir.join(file).exists())
            .map(|(file, spec)| format!("'{file}' {spec}"))
            .collect();
        format!("plot {}\n", kept.join(", \\\n     "))
    };
    let body = match command {
        "simulate" => [
            "set multiplot layout 2,1\n".to_string(),
            series(&[(OBSERVATION_FILE, "using 1:2 with lines title 'observation'")]),
            series(&[
                (CHAIN_FILE, "using 1:2 with steps title 'state'"),
                (TRUTH_FILE, "using 1:2 with lines title 'parameter'"),
            ]),
            "unset multiplot\n".to_string(),
        ]
        .concat(),
        "filter" => [
            "set yrange [0:1]\n".to_string(),
            series(&[
                (FILTER_FILE, "using 1:2 with lines title 'P(state 1)'"),
                (CHAIN_FILE, "using 1:(2 - $2) with steps title 'state 1'"),
            ]),
        ]
        .concat(),
        "robust-filter" => [
            "set multiplot layout 2,1\n".to_string(),
            series(&[
                (ESTIMATES_FILE, "using 1:3 with lines title 'estimate'"),
                (TRUTH_FILE, "using 1:2 with lines title 'truth'"),
            ]),
            series(&[
                (ESTIMATES_FILE, "using 1:4 with lines title 'x* state 1'"),
                (CHAIN_FILE, "using 1:(2 - $2) with steps title 'state 1'"),
            ]),
            "unset multiplot\n".to_string(),
        ]
        .concat(),
        other => return Err(CliError::Config(format!("no plot for command {other}"))),
    };
    let script = format!("set datafile separator ','\nset key autotitle columnhead\nset xlabel 't'\n{body}");
    fs::write(dir.join(SCRIPT_FILE), script)?;
    Ok(())
}
