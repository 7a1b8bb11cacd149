//! CSV tables: solver and learner traces, metrics, and learned weights.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::DistanceStats;
use crate::features::{FeatureBasis, WeightVector};
use crate::ilq::IterationTrace;
use crate::io::trajfile::format_float;
use crate::irl::LearnTrace;

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Config(format!("writing {}: {e}", path.display()));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    let buf = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

/// `iteration,max_deviation,step_size,projected_hessians,cost_1..cost_N`.
pub fn write_iteration_trace(path: &Path, trace: &IterationTrace, num_agents: usize) -> Result<()> {
    let mut header = strings(&["iteration", "max_deviation", "step_size", "projected_hessians"]);
    header.extend((1..=num_agents).map(|i| format!("cost_{i}")));
    let rows: Vec<Vec<String>> = trace
        .records
        .iter()
        .map(|r| {
            let mut row = vec![
                r.iteration.to_string(),
                format_float(r.max_deviation),
                format_float(r.step_size),
                r.projected_hessians.to_string(),
            ];
            row.extend(r.costs.iter().map(|c| format_float(*c)));
            row
        })
        .collect();
    write_csv(path, &header, &rows)
}

/// Long format: `iteration,agent,feature,weight,gap,residual,solver_iterations,effort_floored`.
pub fn write_learn_trace(path: &Path, trace: &LearnTrace, basis: &FeatureBasis) -> Result<()> {
    let header = strings(&["iteration", "agent", "feature", "weight", "gap", "residual", "solver_iterations", "effort_floored"]);
    let mut rows = Vec::new();
    for r in &trace.records {
        for (k, name) in basis.feature_names(r.agent).into_iter().enumerate() {
            rows.push(vec![
                r.iteration.to_string(),
                (r.agent + 1).to_string(),
                name,
                format_float(r.weights[k]),
                format_float(r.gap[k]),
                format_float(r.residual),
                r.solver_iterations.to_string(),
                r.effort_floored.to_string(),
            ]);
        }
    }
    write_csv(path, &header, &rows)
}

/// `agent,feature,kl` with `kl = KL(demo ‖ model)`.
pub fn write_kl(path: &Path, kl: &[Vec<f64>], basis: &FeatureBasis) -> Result<()> {
    let rows: Vec<Vec<String>> = kl
        .iter()
        .enumerate()
        .flat_map(|(i, row)| {
            basis
                .feature_names(i)
                .into_iter()
                .zip(row)
                .map(move |(name, v)| vec![(i + 1).to_string(), name, format_float(*v)])
        })
        .collect();
    write_csv(path, &strings(&["agent", "feature", "kl"]), &rows)
}

/// `agent,mean_dist,std_dist`.
pub fn write_goal_distances(path: &Path, stats: &[DistanceStats]) -> Result<()> {
    let rows: Vec<Vec<String>> = stats
        .iter()
        .enumerate()
        .map(|(i, s)| vec![(i + 1).to_string(), format_float(s.mean), format_float(s.std)])
        .collect();
    write_csv(path, &strings(&["agent", "mean_dist", "std_dist"]), &rows)
}

/// `t,rmse`.
pub fn write_rmse(path: &Path, rmse: &[f64]) -> Result<()> {
    let rows: Vec<Vec<String>> = rmse.iter().enumerate().map(|(k, v)| vec![(k + 1).to_string(), format_float(*v)]).collect();
    write_csv(path, &strings(&["t", "rmse"]), &rows)
}

/// Reads a table back as its header and string rows.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let header = r.headers().map_err(|e| Error::Config(e.to_string()))?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| {
            rec.map(|x| x.iter().map(String::from).collect())
                .map_err(|e| Error::Parse { line: e.position().map_or(0, |p| p.line()), message: e.to_string() })
        })
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

/// Learned (or true) weights with their feature names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsFile {
    pub feature_names: Vec<Vec<String>>,
    pub weights: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<usize>,
}

impl WeightsFile {
    pub fn new(basis: &FeatureBasis, weights: &WeightVector) -> Self {
        Self {
            feature_names: (0..basis.num_agents()).map(|i| basis.feature_names(i)).collect(),
            weights: weights.to_nested(),
            converged: None,
            iteration: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Loads weights and checks they fit `basis`.
    pub fn load(path: &Path, basis: &FeatureBasis) -> Result<WeightVector> {
        let file: WeightsFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let names: Vec<Vec<String>> = (0..basis.num_agents()).map(|i| basis.feature_names(i)).collect();
        if file.feature_names != names {
            return Err(Error::Config(format!(
                "weight file features {:?} do not match the scenario's {:?}",
                file.feature_names, names
            )));
        }
        let w = WeightVector::from_nested(&file.weights);
        w.check(basis)?;
        Ok(w)
    }
}
