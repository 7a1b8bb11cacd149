//! Experiment metrics: histogram KL divergence of per-trajectory feature
//! sums, final distance to goal, position RMSE and simple task statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{eval_features, FeatureBasis};
use crate::game::{Trajectory, TrajectoryBatch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistogramSpec {
    pub bins: usize,
    /// Mass added to every bin before normalization.
    pub smoothing: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self { bins: 20, smoothing: 1e-3 }
    }
}

impl HistogramSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 || !(self.smoothing > 0.0) {
            return Err(Error::Config("histograms need at least 2 bins and positive smoothing".into()));
        }
        Ok(())
    }
}

/// `Σ_k p_k ln(p_k / q_k)`; bins with `p_k = 0` contribute nothing.
pub fn kl_from_masses(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pk, _)| **pk > 0.0)
        .map(|(pk, qk)| pk * (pk / qk).ln())
        .sum()
}

/// Smoothed, normalized histograms of two samples on shared bins spanning
/// their pooled range. `None` when every value in both samples is equal.
pub fn shared_histograms(a: &[f64], b: &[f64], bins: usize, smoothing: f64) -> Option<(Vec<f64>, Vec<f64>)> {
    let (lo, hi) = a
        .iter()
        .chain(b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if !(hi > lo) {
        return None;
    }
    let width = (hi - lo) / bins as f64;
    let masses = |xs: &[f64]| {
        let mut h = vec![0.0; bins];
        for &x in xs {
            let k = (((x - lo) / width) as usize).min(bins - 1);
            h[k] += 1.0;
        }
        let n = xs.len().max(1) as f64;
        let h: Vec<f64> = h.into_iter().map(|c| c / n + smoothing).collect();
        let total: f64 = h.iter().sum();
        h.into_iter().map(|x| x / total).collect::<Vec<_>>()
    };
    Some((masses(a), masses(b)))
}

/// Histogram estimate of `KL(a ‖ b)`.
pub fn kl_divergence_samples(a: &[f64], b: &[f64], spec: &HistogramSpec) -> f64 {
    match shared_histograms(a, b, spec.bins, spec.smoothing) {
        Some((p, q)) => kl_from_masses(&p, &q),
        None => 0.0,
    }
}

/// `samples[i][k]` lists feature `k` of agent `i` summed over each trajectory.
pub fn feature_samples(basis: &FeatureBasis, batch: &TrajectoryBatch) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out: Vec<Vec<Vec<f64>>> = (0..basis.num_agents())
        .map(|i| vec![Vec::with_capacity(batch.len()); basis.num_features(i)])
        .collect();
    for traj in batch.iter() {
        for (i, sums) in eval_features(basis, traj)?.into_iter().enumerate() {
            for (k, v) in sums.iter().enumerate() {
                out[i][k].push(*v);
            }
        }
    }
    Ok(out)
}

/// `KL(demo ‖ model)` for every agent and feature.
pub fn kl_divergence_per_feature(
    demo: &TrajectoryBatch,
    model: &TrajectoryBatch,
    basis: &FeatureBasis,
    spec: &HistogramSpec,
) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    if demo.is_empty() || model.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let d = feature_samples(basis, demo)?;
    let m = feature_samples(basis, model)?;
    Ok(d.iter()
        .zip(&m)
        .map(|(da, ma)| da.iter().zip(ma).map(|(x, y)| kl_divergence_samples(x, y, spec)).collect())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceStats {
    pub mean: f64,
    /// Sample standard deviation (zero for a single trajectory).
    pub std: f64,
}

fn mean_std(xs: &[f64]) -> DistanceStats {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    DistanceStats { mean, std }
}

fn check_indices(indices: &[usize], n: usize) -> Result<()> {
    match indices.iter().find(|&&i| i >= n) {
        Some(i) => Err(Error::Config(format!("state index {i} out of range for dimension {n}"))),
        None => Ok(()),
    }
}

/// Distance from each agent's final position to its goal.
pub fn goal_distance_stats(batch: &TrajectoryBatch, positions: &[Vec<usize>], goals: &[Vec<f64>]) -> Result<Vec<DistanceStats>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if positions.len() != goals.len() {
        return Err(Error::shape("one goal per agent required"));
    }
    let n = batch.trajectories[0].state_dim();
    positions
        .iter()
        .zip(goals)
        .map(|(pos, goal)| {
            check_indices(pos, n)?;
            if pos.len() != goal.len() {
                return Err(Error::shape("goal dimension differs from position dimension"));
            }
            let d: Vec<f64> = batch
                .iter()
                .map(|traj| {
                    let s = traj.states.last().expect("non-empty trajectory");
                    pos.iter().zip(goal).map(|(&p, g)| (s[p] - g).powi(2)).sum::<f64>().sqrt()
                })
                .collect();
            Ok(mean_std(&d))
        })
        .collect()
}

/// Per-step root mean squared position error against `reference`, pooled
/// over rollouts and agents, for `t = 1..=horizon_cut`.
pub fn trajectory_rmse(
    reference: &Trajectory,
    rollouts: &TrajectoryBatch,
    positions: &[Vec<usize>],
    horizon_cut: usize,
) -> Result<Vec<f64>> {
    if rollouts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if horizon_cut > reference.horizon() || rollouts.iter().any(|r| r.horizon() < horizon_cut) {
        return Err(Error::shape("horizon cut exceeds trajectory length"));
    }
    for p in positions {
        check_indices(p, reference.state_dim())?;
    }
    let count = (rollouts.len() * positions.len()) as f64;
    Ok((0..horizon_cut)
        .map(|k| {
            let total: f64 = rollouts
                .iter()
                .flat_map(|r| {
                    positions.iter().map(move |pos| {
                        pos.iter().map(|&p| (r.states[k][p] - reference.states[k][p]).powi(2)).sum::<f64>()
                    })
                })
                .sum();
            (total / count).sqrt()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskStatsConfig {
    /// Name → velocity components whose Euclidean norm is a speed.
    #[serde(default)]
    pub speeds: BTreeMap<String, Vec<usize>>,
    /// Name → two position index lists whose separation is averaged.
    #[serde(default)]
    pub distances: BTreeMap<String, (Vec<usize>, Vec<usize>)>,
}

/// Averages over time and trajectories of the configured speeds and
/// pairwise distances, keyed `speed_<name>` / `distance_<name>`.
pub fn task_statistics(batch: &TrajectoryBatch, cfg: &TaskStatsConfig) -> Result<BTreeMap<String, f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = batch.trajectories[0].state_dim();
    for idx in cfg.speeds.values() {
        check_indices(idx, n)?;
    }
    for (a, b) in cfg.distances.values() {
        check_indices(a, n)?;
        check_indices(b, n)?;
        if a.len() != b.len() {
            return Err(Error::Config("distance pair has mismatched dimensions".into()));
        }
    }
    let average = |f: &dyn Fn(&nalgebra::DVector<f64>) -> f64| {
        let (sum, count) = batch
            .iter()
            .flat_map(|t| t.states.iter())
            .fold((0.0, 0usize), |(s, c), x| (s + f(x), c + 1));
        sum / count as f64
    };
    let mut out = BTreeMap::new();
    for (name, idx) in &cfg.speeds {
        out.insert(format!("speed_{name}"), average(&|s| idx.iter().map(|&i| s[i] * s[i]).sum::<f64>().sqrt()));
    }
    for (name, (a, b)) in &cfg.distances {
        out.insert(
            format!("distance_{name}"),
            average(&|s| a.iter().zip(b).map(|(&i, &j)| (s[i] - s[j]).powi(2)).sum::<f64>().sqrt()),
        );
    }
    Ok(out)
}
