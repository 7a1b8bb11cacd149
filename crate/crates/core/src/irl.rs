//! Multi-agent inverse learning by feature-expectation matching.
//!
//! Weights are updated one agent at a time with
//! `w^i ← w^i − γ (E_demo φ^i − E_model φ^i)`, where the model expectation
//! is a Monte-Carlo average over rollouts of the current equilibrium.

use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{eval_features, make_cost_model, Feature, FeatureBasis, WeightVector};
use crate::game::{derive_seed, sample_batch, AffineGaussianPolicySet, GameSpec, TrajectoryBatch};
use crate::ilq::{solve_ece_with_replay, ActionReplay, SolverConfig};

/// Lower bound on every control-effort weight.
pub const EFFORT_FLOOR: f64 = 1e-3;
const STANDARDIZE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LearnMode {
    /// All agents' equilibrium is re-solved under the current weights.
    #[default]
    Joint,
    /// Each agent is learned alone while the others replay the mean
    /// demonstrated actions open-loop.
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnConfig {
    pub learning_rate: f64,
    pub samples: usize,
    pub max_iterations: usize,
    /// Converged once every agent's relative residual is below this.
    pub tolerance: f64,
    pub mode: LearnMode,
    pub seed: u64,
    /// Divide each feature gap by the demo mean's magnitude before stepping.
    pub standardize: bool,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            samples: 50,
            max_iterations: 200,
            tolerance: 0.05,
            mode: LearnMode::Joint,
            seed: 0,
            standardize: true,
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("at least one sample per expectation is required".into()));
        }
        if self.max_iterations == 0 || !(self.tolerance > 0.0) {
            return Err(Error::Config("max_iterations and tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// One per-agent update of the outer loop.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnRecord {
    pub iteration: usize,
    pub agent: usize,
    /// Weights of this agent after the update.
    pub weights: DVector<f64>,
    /// `E_demo φ^i − E_model φ^i` before the update.
    pub gap: DVector<f64>,
    pub residual: f64,
    pub solver_iterations: usize,
    pub effort_floored: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LearnTrace {
    pub records: Vec<LearnRecord>,
}

impl LearnTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Largest per-agent residual of each outer iteration.
    pub fn sweep_residuals(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for r in &self.records {
            if out.len() < r.iteration {
                out.resize(r.iteration, 0.0);
            }
            out[r.iteration - 1] = out[r.iteration - 1].max(r.residual);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnOutcome {
    pub weights: WeightVector,
    pub trace: LearnTrace,
    pub converged: bool,
    /// Outer iteration whose weights were returned.
    pub iteration: usize,
}

/// Mean of the per-trajectory feature sums.
pub fn empirical_feature_mean(basis: &FeatureBasis, demos: &TrajectoryBatch) -> Result<Vec<DVector<f64>>> {
    if demos.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut acc: Vec<DVector<f64>> = (0..basis.num_agents()).map(|i| DVector::zeros(basis.num_features(i))).collect();
    for traj in demos.iter() {
        for (a, f) in acc.iter_mut().zip(eval_features(basis, traj)?) {
            *a += f;
        }
    }
    let k = demos.len() as f64;
    Ok(acc.into_iter().map(|a| a / k).collect())
}

/// Model feature expectation together with the equilibrium it came from.
#[derive(Debug, Clone)]
pub struct Expectation {
    pub means: Vec<DVector<f64>>,
    pub policies: AffineGaussianPolicySet,
    pub solver_iterations: usize,
}

/// Solves the equilibrium under `weights` and averages the feature sums of
/// `samples` stochastic rollouts drawn with base seed `seed`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_feature_expectation(
    game: &GameSpec,
    basis: &Arc<FeatureBasis>,
    weights: &WeightVector,
    solver: &SolverConfig,
    samples: usize,
    seed: u64,
    warm_start: Option<&AffineGaussianPolicySet>,
    replay: &ActionReplay,
) -> Result<Expectation> {
    let wrap = |e: Error| Error::WeightedSolve { weights: weights.to_nested(), source: Box::new(e) };
    let costs = make_cost_model(basis, weights, game.action_dims())?;
    let game = game.with_costs(costs)?;
    let solution = solve_ece_with_replay(&game, warm_start, solver, replay).map_err(wrap)?;
    let batch = sample_batch(&game, &solution.policies, samples, seed).map_err(wrap)?;
    Ok(Expectation {
        means: empirical_feature_mean(basis, &batch)?,
        policies: solution.policies,
        solver_iterations: solution.trace.len(),
    })
}

/// `w − γ·gap`, with `gap` optionally divided elementwise by `scale`.
pub fn update_weights(
    w: &DVector<f64>,
    demo_mean: &DVector<f64>,
    model_mean: &DVector<f64>,
    learning_rate: f64,
    scale: Option<&DVector<f64>>,
) -> DVector<f64> {
    let gap = demo_mean - model_mean;
    let step = match scale {
        Some(s) => gap.component_div(s),
        None => gap,
    };
    w - step * learning_rate
}

fn floor_effort(basis: &FeatureBasis, i: usize, w: &mut DVector<f64>) -> bool {
    let mut floored = false;
    for (f, wk) in basis.agent(i).features.iter().zip(w.iter_mut()) {
        if matches!(f, Feature::ControlEffort) && *wk < EFFORT_FLOOR {
            *wk = EFFORT_FLOOR;
            floored = true;
        }
    }
    floored
}

/// Root mean square over features of `(demo_k − model_k) / |demo_k|`, so
/// every feature counts equally whatever its magnitude.
pub fn relative_residual(demo: &DVector<f64>, model: &DVector<f64>) -> f64 {
    if demo.is_empty() {
        return 0.0;
    }
    let sq: f64 = demo
        .iter()
        .zip(model.iter())
        .map(|(d, m)| ((d - m) / (d.abs() + STANDARDIZE_EPS)).powi(2))
        .sum();
    (sq / demo.len() as f64).sqrt()
}

/// Block-coordinate feature matching over all agents.
///
/// Each outer iteration visits the agents in order; agent `i`'s expectation
/// is estimated under the current full weight set (including updates made
/// earlier in the same sweep) with seed `derive_seed(seed, [iteration, i])`.
/// If no sweep reaches the tolerance, the weights after the sweep with the
/// smallest worst-agent residual are returned with `converged = false`.
pub fn run_mairl(
    game: &GameSpec,
    basis: &Arc<FeatureBasis>,
    demos: &TrajectoryBatch,
    init: &WeightVector,
    cfg: &LearnConfig,
    solver: &SolverConfig,
) -> Result<LearnOutcome> {
    cfg.validate()?;
    init.check(basis)?;
    if basis.num_agents() != game.num_agents() {
        return Err(Error::shape("feature basis and game disagree on the number of agents"));
    }
    for (i, w) in init.agents.iter().enumerate() {
        let effort: Vec<f64> = basis
            .agent(i)
            .features
            .iter()
            .zip(w.iter())
            .filter(|(f, _)| matches!(f, Feature::ControlEffort))
            .map(|(_, x)| *x)
            .collect();
        if effort.iter().any(|&x| x < EFFORT_FLOOR) {
            return Err(Error::InvalidWeight(format!("agent {i}: initial effort weight below {EFFORT_FLOOR}")));
        }
    }
    for traj in demos.iter() {
        traj.check_game(game)?;
    }
    let demo_means = empirical_feature_mean(basis, demos)?;
    let scales: Vec<DVector<f64>> = demo_means.iter().map(|m| m.map(|x| x.abs() + STANDARDIZE_EPS)).collect();

    let big_n = game.num_agents();
    let replays: Vec<ActionReplay> = match cfg.mode {
        LearnMode::Joint => vec![ActionReplay::none(big_n); big_n],
        LearnMode::Independent => {
            let mean = demos.mean_trajectory()?;
            (0..big_n)
                .map(|i| ActionReplay {
                    fixed: (0..big_n)
                        .map(|j| (j != i).then(|| mean.actions.iter().map(|a| a[j].clone()).collect()))
                        .collect(),
                })
                .collect()
        }
    };
    // Every solve starts near the demonstrated play, so the learner tracks
    // the local equilibrium the demonstrations came from. Joint mode shares
    // one warm start; independent mode keeps one per agent.
    let start = AffineGaussianPolicySet::along(&demos.mean_trajectory()?);
    let mut warm: Vec<AffineGaussianPolicySet> = vec![start.clone(); big_n];
    let warm_slot = |i: usize| match cfg.mode {
        LearnMode::Joint => 0,
        LearnMode::Independent => i,
    };

    let mut weights = init.clone();
    let mut trace = LearnTrace::default();
    let mut best: Option<(f64, WeightVector, usize)> = None;

    for iteration in 1..=cfg.max_iterations {
        let mut worst: f64 = 0.0;
        for i in 0..big_n {
            let seed = derive_seed(cfg.seed, &[iteration as u64, i as u64]);
            let slot = warm_slot(i);
            let estimate = |init: &AffineGaussianPolicySet| {
                estimate_feature_expectation(game, basis, &weights, solver, cfg.samples, seed, Some(init), &replays[i])
            };
            // A stale warm start can strand the line search; fall back to the demo start.
            let est = estimate(&warm[slot]).or_else(|_| estimate(&start))?;
            warm[slot] = est.policies.clone();
            let model = &est.means[i];
            let residual = relative_residual(&demo_means[i], model);
            worst = worst.max(residual);
            let scale = cfg.standardize.then_some(&scales[i]);
            let mut w = update_weights(&weights.agents[i], &demo_means[i], model, cfg.learning_rate, scale);
            let effort_floored = floor_effort(basis, i, &mut w);
            if !w.iter().all(|x| x.is_finite()) {
                return Err(Error::InvalidWeight(format!("agent {i}: update produced non-finite weights")));
            }
            weights.agents[i] = w.clone();
            trace.records.push(LearnRecord {
                iteration,
                agent: i,
                weights: w,
                gap: &demo_means[i] - model,
                residual,
                solver_iterations: est.solver_iterations,
                effort_floored,
            });
        }
        if worst < cfg.tolerance {
            return Ok(LearnOutcome { weights, trace, converged: true, iteration });
        }
        if best.as_ref().is_none_or(|(r, _, _)| worst < *r) {
            best = Some((worst, weights.clone(), iteration));
        }
    }
    let (_, weights, iteration) = best.expect("at least one iteration ran");
    Ok(LearnOutcome { weights, trace, converged: false, iteration })
}
