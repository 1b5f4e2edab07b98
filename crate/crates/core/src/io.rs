//! CSV import and export. Every file has a header row; floats use the
//! shortest representation that parses back to the same value.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::hmm::ChainPath;
use crate::robust::RobustEstimate;
use crate::rough_path::{SampledPath, SampledRoughPath};
use crate::value::{GridValue, ValueTrack};

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(File::create(path)?)))
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn parse(field: &str, line: u64) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: bad number {field:?}")))
}

/// `t, y1..yd`.
pub fn write_path<W: Write>(out: W, path: &SampledPath) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let d = path.dim();
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|c| format!("y{c}")));
    w.write_record(&header)?;
    for (i, t) in path.times().iter().enumerate() {
        let mut row = vec![fmt(*t)];
        row.extend(path.point(i).iter().map(|v| fmt(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_path_file(file: &Path, path: &SampledPath) -> Result<()> {
    write_path(BufWriter::new(File::create(file)?), path)
}

/// Reads `t, y1..yd`; the dimension comes from the header.
pub fn read_path<R: Read>(input: R) -> Result<SampledPath> {
    let mut r = csv::Reader::from_reader(input);
    let width = r.headers()?.len();
    if width < 2 {
        return Err(Error::Parse("path CSV needs a time column and at least one value column".into()));
    }
    let d = width - 1;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        times.push(parse(&rec[0], line)?);
        for c in 1..=d {
            values.push(parse(&rec[c], line)?);
        }
    }
    SampledPath::new(times, d, values).map_err(|e| Error::Parse(e.to_string()))
}

pub fn read_path_file(file: &Path) -> Result<SampledPath> {
    read_path(File::open(file)?)
}

/// `t, y1..yd, a11..add`: row `i` carries the area of the step ending at
/// `t_i`, zero on the first row.
pub fn write_rough_path<W: Write>(out: W, path: &SampledRoughPath) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let d = path.dim();
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|c| format!("y{c}")));
    for a in 1..=d {
        header.extend((1..=d).map(|b| format!("a{a}{b}")));
    }
    w.write_record(&header)?;
    let base = path.base();
    for (i, t) in path.times().iter().enumerate() {
        let mut row = vec![fmt(*t)];
        row.extend(base.point(i).iter().map(|v| fmt(*v)));
        if i == 0 {
            row.extend(std::iter::repeat_n("0".to_string(), d * d));
        } else {
            row.extend(path.step_area(i - 1).iter().map(|v| fmt(*v)));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rough_path_file(file: &Path, path: &SampledRoughPath) -> Result<()> {
    write_rough_path(BufWriter::new(File::create(file)?), path)
}

pub fn read_rough_path<R: Read>(input: R) -> Result<SampledRoughPath> {
    let mut r = csv::Reader::from_reader(input);
    let width = r.headers()?.len();
    // width = 1 + d + d²
    let d = (1..=width).find(|d| 1 + d + d * d == width).ok_or_else(|| {
        Error::Parse(format!("{width} columns do not describe a rough path"))
    })?;
    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut areas = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        times.push(parse(&rec[0], line)?);
        for c in 1..=d {
            values.push(parse(&rec[c], line)?);
        }
        if i > 0 {
            for c in 1 + d..width {
                areas.push(parse(&rec[c], line)?);
            }
        }
    }
    let base = SampledPath::new(times, d, values).map_err(|e| Error::Parse(e.to_string()))?;
    SampledRoughPath::new(base, areas).map_err(|e| Error::Parse(e.to_string()))
}

pub fn read_rough_path_file(file: &Path) -> Result<SampledRoughPath> {
    read_rough_path(File::open(file)?)
}

/// `t, state` on the given grid with states numbered from 1.
pub fn write_chain_file(file: &Path, chain: &ChainPath, times: &[f64]) -> Result<()> {
    let mut w = writer(file)?;
    w.write_record(["t", "state"])?;
    for t in times {
        w.write_record([fmt(*t), (chain.state_at(*t) + 1).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `t, state` rows back as times and 0-based states.
pub fn read_chain_file(file: &Path) -> Result<Vec<(f64, usize)>> {
    let mut r = csv::Reader::from_reader(File::open(file)?);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 2 {
            return Err(Error::Parse(format!("line {line}: expected t,state")));
        }
        let state: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("line {line}: bad state {:?}", &rec[1])))?;
        if state == 0 {
            return Err(Error::Parse(format!("line {line}: states are numbered from 1")));
        }
        rows.push((parse(&rec[0], line)?, state - 1));
    }
    Ok(rows)
}

/// `t, pi1..pim`.
pub fn write_filter_file(file: &Path, path: &SampledPath) -> Result<()> {
    let mut w = writer(file)?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=path.dim()).map(|c| format!("pi{c}")));
    w.write_record(&header)?;
    for (i, t) in path.times().iter().enumerate() {
        let mut row = vec![fmt(*t)];
        row.extend(path.point(i).iter().map(|v| fmt(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `t, z_q, z_gamma, p_qq, p_qgamma, p_gammagamma, pre_shift_min` for every
/// `every`-th record plus the last one.
pub fn write_kappa_track_file(file: &Path, track: &ValueTrack, every: usize) -> Result<()> {
    let mut w = writer(file)?;
    w.write_record(["t", "z_q", "z_gamma", "p_qq", "p_qgamma", "p_gammagamma", "pre_shift_min"])?;
    for i in recorded(track.len(), every) {
        let [q, g] = track.minimizers[i];
        let [a, b, c] = track.curvatures[i];
        w.write_record([track.times[i], q, g, a, b, c, track.pre_shift_minima[i]].map(fmt))?;
    }
    w.flush()?;
    Ok(())
}

/// `t, a_star1..a_stark, <parameter>, x_star1..x_starm, kappa_min`.
pub fn write_estimates_file(file: &Path, estimates: &[RobustEstimate], parameter_name: &str) -> Result<()> {
    let mut w = writer(file)?;
    let Some(first) = estimates.first() else {
        w.write_record(["t"])?;
        w.flush()?;
        return Ok(());
    };
    let mut header = vec!["t".to_string()];
    header.extend((1..=first.a_star.len()).map(|c| format!("a_star{c}")));
    header.push(parameter_name.to_string());
    header.extend((1..=first.x_star.dim()).map(|c| format!("x_star{c}")));
    header.push("kappa_min".into());
    w.write_record(&header)?;
    for e in estimates {
        let mut row = vec![fmt(e.t)];
        row.extend(e.a_star.iter().map(|v| fmt(*v)));
        row.push(fmt(e.parameter));
        row.extend(e.x_star.probs().iter().map(|v| fmt(*v)));
        row.push(fmt(e.kappa_min));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Dense `q, gamma, kappa` dump, γ varying fastest.
pub fn write_grid_file(file: &Path, gv: &GridValue) -> Result<()> {
    let mut w = writer(file)?;
    w.write_record(["q", "gamma", "kappa"])?;
    for iq in 0..gv.q_axis().n {
        for ig in 0..gv.g_axis().n {
            let (q, g) = gv.node(iq, ig);
            w.write_record([q, g, gv.value(iq, ig)].map(fmt))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Indices `0, every, 2·every, …` and always the last one.
pub fn recorded(len: usize, every: usize) -> impl Iterator<Item = usize> {
    let every = every.max(1);
    (0..len).filter(move |i| i % every == 0 || *i + 1 == len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rough_path::stratonovich_lift;

    #[test]
    fn path_round_trip_is_exact() {
        let p = SampledPath::uniform(0.0, 0.1, 2, vec![0.0, 1.0, 1.0 / 3.0, -2.5e-17, 7.0, 1e300]).unwrap();
        let mut buf = Vec::new();
        write_path(&mut buf, &p).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,y1,y2\n"));
        assert_eq!(read_path(buf.as_slice()).unwrap(), p);
    }

    #[test]
    fn rough_round_trip_is_exact() {
        let vals: Vec<f64> = (0..41).map(|i| ((i as f64) * 0.37).sin()).collect();
        let fine = SampledPath::uniform(0.0, 0.025, 1, vals).unwrap();
        let rough = stratonovich_lift(&fine, 4).unwrap();
        let mut buf = Vec::new();
        write_rough_path(&mut buf, &rough).unwrap();
        assert_eq!(String::from_utf8_lossy(&buf).lines().count(), rough.len() + 1);
        assert_eq!(read_rough_path(buf.as_slice()).unwrap(), rough);
    }

    #[test]
    fn malformed_input_is_a_parse_error() {
        let bad = "t,y1\n0,0\n0.1,abc\n";
        assert!(matches!(read_path(bad.as_bytes()), Err(Error::Parse(_))));
        let bad = "t,y1,a11,a12\n0,0,0,0\n";
        assert!(read_rough_path(bad.as_bytes()).is_err());
    }

    #[test]
    fn chain_round_trip() {
        let chain = ChainPath::new(vec![0.25], vec![0, 1], 0.5, 2).unwrap();
        let times = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
        let file = std::env::temp_dir().join(format!("rough-filter-chain-{}.csv", std::process::id()));
        write_chain_file(&file, &chain, &times).unwrap();
        let back = read_chain_file(&file).unwrap();
        std::fs::remove_file(&file).unwrap();
        let states: Vec<usize> = back.iter().map(|r| r.1).collect();
        assert_eq!(states, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(back[3].0, 0.3);
    }

    #[test]
    fn recorded_keeps_last() {
        assert_eq!(recorded(7, 3).collect::<Vec<_>>(), vec![0, 3, 6]);
        assert_eq!(recorded(8, 3).collect::<Vec<_>>(), vec![0, 3, 6, 7]);
        assert_eq!(recorded(1, 5).collect::<Vec<_>>(), vec![0]);
    }
}
