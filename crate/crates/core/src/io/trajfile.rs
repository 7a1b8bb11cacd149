//! Trajectory CSV files.
//!
//! Header `trial,t,s_1,...,s_n,a1_1,...,a1_m1,...,aN_1,...,aN_mN`, one row
//! per trial and time step, rows sorted by `(trial, t)` with `t = 1..T`
//! inside every trial. Floats are written with 17 significant digits so a
//! write/read cycle is lossless.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::game::{GameSpec, Trajectory, TrajectoryBatch};

pub fn header(state_dim: usize, action_dims: &[usize]) -> Vec<String> {
    let mut h = vec!["trial".to_string(), "t".to_string()];
    h.extend((1..=state_dim).map(|k| format!("s_{k}")));
    for (i, &m) in action_dims.iter().enumerate() {
        h.extend((1..=m).map(|k| format!("a{}_{k}", i + 1)));
    }
    h
}

pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Recovers `(n, [m^i])` from a header, rejecting anything but the exact
/// column layout.
pub fn parse_header(fields: &[String]) -> Result<(usize, Vec<usize>)> {
    let bad = |msg: String| Error::Parse { line: 1, message: msg };
    if fields.len() < 2 || fields[0] != "trial" || fields[1] != "t" {
        return Err(bad("header must start with trial,t".into()));
    }
    let n = fields[2..].iter().take_while(|f| f.starts_with("s_")).count();
    let mut dims: Vec<usize> = Vec::new();
    for f in &fields[2 + n..] {
        let agent = f
            .strip_prefix('a')
            .and_then(|r| r.split_once('_'))
            .and_then(|(i, _)| i.parse::<usize>().ok())
            .filter(|&i| i >= 1)
            .ok_or_else(|| bad(format!("unexpected column `{f}`")))?;
        if agent == dims.len() + 1 {
            dims.push(0);
        }
        if agent != dims.len() {
            return Err(bad(format!("column `{f}` is out of order")));
        }
        *dims.last_mut().unwrap() += 1;
    }
    if fields != header(n, &dims).as_slice() {
        return Err(bad(format!("header does not follow the expected layout: {}", fields.join(","))));
    }
    Ok((n, dims))
}

pub fn write_batch<W: Write>(out: W, batch: &TrajectoryBatch) -> Result<()> {
    batch.validate()?;
    let mut w = csv::WriterBuilder::new().from_writer(out);
    let Some(first) = batch.trajectories.first() else {
        return Err(Error::EmptyBatch);
    };
    w.write_record(header(first.state_dim(), &first.action_dims())).map_err(csv_err)?;
    for traj in batch.iter() {
        for (k, (s, a)) in traj.states.iter().zip(&traj.actions).enumerate() {
            let mut row = vec![traj.trial.to_string(), (k + 1).to_string()];
            row.extend(s.iter().map(|x| format_float(*x)));
            row.extend(a.iter().flat_map(|x| x.iter()).map(|x| format_float(*x)));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_batch(path: &Path, batch: &TrajectoryBatch) -> Result<()> {
    let mut buf = Vec::new();
    write_batch(&mut buf, batch)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse { line, message: format!("{kind:?}") },
    }
}

/// Parses a trajectory file and checks every layout invariant.
pub fn read_batch<R: Read>(input: R) -> Result<TrajectoryBatch> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let fields: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let (n, dims) = parse_header(&fields)?;
    let width = 2 + n + dims.iter().sum::<usize>();

    let mut trajectories: Vec<Trajectory> = Vec::new();
    for record in r.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::Parse { line, message };
        if record.len() != width {
            return Err(bad(format!("expected {width} columns, found {}", record.len())));
        }
        let trial: u64 = record[0].trim().parse().map_err(|_| bad(format!("bad trial `{}`", &record[0])))?;
        let t: usize = record[1].trim().parse().map_err(|_| bad(format!("bad time step `{}`", &record[1])))?;
        let values = record
            .iter()
            .skip(2)
            .zip(&fields[2..])
            .map(|(v, name)| {
                v.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| bad(format!("column {name}: `{v}` is not a finite number")))
            })
            .collect::<Result<Vec<f64>>>()?;

        let continues = trajectories.last().is_some_and(|tr| tr.trial == trial);
        if continues {
            let expected = trajectories.last().unwrap().states.len() + 1;
            if t != expected {
                return Err(bad(format!("trial {trial}: expected t = {expected}, found {t}")));
            }
        } else {
            if let Some(prev) = trajectories.last() {
                if trial <= prev.trial {
                    return Err(bad(format!("trial {trial} follows trial {}; rows must be sorted", prev.trial)));
                }
                if prev.states.len() != trajectories[0].states.len() {
                    return Err(bad(format!("trial {} has {} steps, expected {}", prev.trial, prev.states.len(), trajectories[0].states.len())));
                }
            }
            if t != 1 {
                return Err(bad(format!("trial {trial} must start at t = 1, found {t}")));
            }
            trajectories.push(Trajectory { trial, states: Vec::new(), actions: Vec::new() });
        }
        let traj = trajectories.last_mut().unwrap();
        traj.states.push(DVector::from_column_slice(&values[..n]));
        let mut o = n;
        traj.actions.push(
            dims.iter()
                .map(|&m| {
                    let a = DVector::from_column_slice(&values[o..o + m]);
                    o += m;
                    a
                })
                .collect(),
        );
    }
    if trajectories.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let horizon = trajectories[0].states.len();
    if let Some(last) = trajectories.last().filter(|t| t.states.len() != horizon) {
        return Err(Error::Parse {
            line: 0,
            message: format!("trial {} has {} steps, expected {horizon}", last.trial, last.states.len()),
        });
    }
    TrajectoryBatch::new(trajectories)
}

pub fn load_batch(path: &Path) -> Result<TrajectoryBatch> {
    read_batch(std::fs::File::open(path)?)
}

/// Checks that a batch fits a game, naming expected and found columns.
pub fn check_batch_against(batch: &TrajectoryBatch, game: &GameSpec) -> Result<()> {
    let Some(first) = batch.trajectories.first() else {
        return Err(Error::EmptyBatch);
    };
    let found = header(first.state_dim(), &first.action_dims());
    let expected = header(game.state_dim(), game.action_dims());
    if found != expected {
        return Err(Error::shape(format!(
            "trajectory columns [{}] do not match the scenario's [{}]",
            found.join(","),
            expected.join(",")
        )));
    }
    if first.horizon() != game.horizon {
        return Err(Error::shape(format!("trajectories have {} steps, scenario horizon is {}", first.horizon(), game.horizon)));
    }
    Ok(())
}
