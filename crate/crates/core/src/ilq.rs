//! Approximate entropic cost equilibria of nonlinear games by repeated
//! linearization, quadratization and LQ solves around a nominal trajectory.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{evaluate_cost, simulate_mean, AffineGaussianPolicySet, GameSpec, StagePolicy, Trajectory};
use crate::linalg;
use crate::lq::{self, LinearStage, LqOptions, LqStageGame, QuadraticStage, StageSolveReport, ValueRecursion};

/// Eigenvalue floor used when a state-cost Hessian is indefinite.
pub const HESSIAN_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Converged when successive mean state trajectories differ by less
    /// than this in max-over-time Euclidean norm.
    pub convergence_tol: f64,
    /// Line-search acceptance bound on the same deviation measure.
    pub max_step_deviation: f64,
    pub min_step: f64,
    pub strict_paper: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            convergence_tol: 1e-4,
            max_step_deviation: 10.0,
            min_step: 1.0 / 64.0,
            strict_paper: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iterations > 0
            && self.convergence_tol > 0.0
            && self.max_step_deviation > 0.0
            && self.min_step > 0.0
            && self.min_step <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("solver settings must be positive and min_step <= 1".into()))
        }
    }

    fn lq_options(&self) -> LqOptions {
        LqOptions { strict_paper: self.strict_paper }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub max_deviation: f64,
    pub step_size: f64,
    pub costs: Vec<f64>,
    pub projected_hessians: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }
}

/// Agents whose actions are fixed open-loop sequences instead of being
/// optimized. `fixed[i][k]` is agent `i`'s action at `t = k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionReplay {
    pub fixed: Vec<Option<Vec<DVector<f64>>>>,
}

impl ActionReplay {
    pub fn none(num_agents: usize) -> Self {
        Self { fixed: vec![None; num_agents] }
    }

    fn free_agents(&self) -> Vec<usize> {
        (0..self.fixed.len()).filter(|&i| self.fixed[i].is_none()).collect()
    }

    fn check(&self, game: &GameSpec) -> Result<()> {
        if self.fixed.len() != game.num_agents() {
            return Err(Error::shape("replay needs one entry per agent"));
        }
        for (i, f) in self.fixed.iter().enumerate() {
            if let Some(seq) = f {
                if seq.len() != game.horizon || seq.iter().any(|a| a.len() != game.action_dims()[i]) {
                    return Err(Error::shape(format!("replayed actions of agent {i} have wrong shape")));
                }
            }
        }
        if self.free_agents().is_empty() {
            return Err(Error::Config("at least one agent must be optimized".into()));
        }
        Ok(())
    }

    fn pin(&self, policies: &mut AffineGaussianPolicySet) {
        for (i, f) in self.fixed.iter().enumerate() {
            let Some(seq) = f else { continue };
            policies.open_loop[i] = true;
            for (k, a) in seq.iter().enumerate() {
                let stage = &mut policies.stages[k][i];
                stage.gain.fill(0.0);
                stage.offset.fill(0.0);
                policies.nominal_actions[k][i] = a.clone();
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct EceSolution {
    pub policies: AffineGaussianPolicySet,
    pub trajectory: Trajectory,
    pub trace: IterationTrace,
    /// Value coefficients of the final LQ approximation (optimized agents only).
    pub values: ValueRecursion,
    pub report: StageSolveReport,
}

/// Dynamics Jacobians along the nominal for `t = 1..T-1`.
pub fn linearize(game: &GameSpec, nominal: &Trajectory) -> Result<Vec<LinearStage>> {
    nominal.check_game(game)?;
    (0..game.horizon.saturating_sub(1))
        .map(|k| {
            let (a, b) = game.dynamics.jacobians(k + 1, &nominal.states[k], &nominal.actions[k]);
            if !linalg::is_finite_matrix(&a) || !b.iter().all(linalg::is_finite_matrix) {
                return Err(Error::NonFinite { what: "dynamics Jacobian", t: k + 1 });
            }
            Ok(LinearStage { a, b })
        })
        .collect()
}

/// Second-order expansion of every agent's cost around the nominal, in the
/// LQ solver's convention (`½ δaᵀ R δa`, hence `R_lq = 2 R^{ij}`).
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratization {
    pub costs: Vec<Vec<QuadraticStage>>,
    pub action_costs: Vec<Vec<DMatrix<f64>>>,
    /// Number of `(t, i)` Hessians that needed PSD projection.
    pub projected: usize,
}

pub fn quadratize(game: &GameSpec, nominal: &Trajectory, strict_paper: bool) -> Result<Quadratization> {
    nominal.check_game(game)?;
    let big_n = game.num_agents();
    let action_costs: Vec<Vec<DMatrix<f64>>> = game
        .costs
        .iter()
        .map(|c| (0..big_n).map(|j| linalg::symmetrize(c.action_cost(j)) * 2.0).collect())
        .collect();
    let mut projected = 0;
    let mut costs = Vec::with_capacity(game.horizon);
    for k in 0..game.horizon {
        let s = &nominal.states[k];
        let mut stage = Vec::with_capacity(big_n);
        for (i, cost) in game.costs.iter().enumerate() {
            let h = cost.state_hessian(k + 1, s);
            let l = cost.state_gradient(k + 1, s);
            if !linalg::is_finite_matrix(&h) || !linalg::is_finite_vector(&l) {
                return Err(Error::NonFinite { what: "cost Hessian", t: k + 1 });
            }
            let (q, changed) = linalg::project_psd(&h, HESSIAN_FLOOR);
            projected += changed as usize;
            let r = (0..big_n)
                .map(|j| {
                    if strict_paper {
                        DVector::zeros(game.action_dims()[j])
                    } else {
                        &action_costs[i][j] * &nominal.actions[k][j]
                    }
                })
                .collect();
            stage.push(QuadraticStage { q, l, r });
        }
        costs.push(stage);
    }
    Ok(Quadratization { costs, action_costs, projected })
}

fn restrict(
    lin: Vec<LinearStage>,
    quad: Quadratization,
    dims: &[usize],
    free: &[usize],
) -> LqStageGame {
    let pick = |v: &[DVector<f64>]| free.iter().map(|&j| v[j].clone()).collect::<Vec<_>>();
    LqStageGame {
        action_dims: free.iter().map(|&j| dims[j]).collect(),
        dynamics: lin
            .into_iter()
            .map(|s| LinearStage { a: s.a, b: free.iter().map(|&j| s.b[j].clone()).collect() })
            .collect(),
        costs: quad
            .costs
            .iter()
            .map(|stage| {
                free.iter()
                    .map(|&i| QuadraticStage { q: stage[i].q.clone(), l: stage[i].l.clone(), r: pick(&stage[i].r) })
                    .collect()
            })
            .collect(),
        action_costs: free
            .iter()
            .map(|&i| free.iter().map(|&j| quad.action_costs[i][j].clone()).collect())
            .collect(),
    }
}

/// Candidate policy around `nominal` with the LQ offsets scaled by `step`.
/// Largest gap between a rollout and the same policy run on the linearized
/// dynamics. Near zero means the local model is exact along the step.
fn model_error(lin: &[LinearStage], nominal: &Trajectory, policy: &AffineGaussianPolicySet, rollout: &Trajectory) -> f64 {
    let mut ds = DVector::zeros(nominal.states[0].len());
    let mut worst: f64 = 0.0;
    for (k, stage) in lin.iter().enumerate() {
        let s = &nominal.states[k] + &ds;
        let mut next = &stage.a * &ds;
        for (j, b) in stage.b.iter().enumerate() {
            next += b * (policy.mean_action(k, j, &s) - &nominal.actions[k][j]);
        }
        ds = next;
        worst = worst.max((&rollout.states[k + 1] - &nominal.states[k + 1] - &ds).amax());
    }
    worst
}

fn candidate(
    base: &AffineGaussianPolicySet,
    nominal: &Trajectory,
    lq_policy: &AffineGaussianPolicySet,
    free: &[usize],
    step: f64,
) -> AffineGaussianPolicySet {
    let mut out = base.clone();
    out.nominal_states = nominal.states.clone();
    out.nominal_actions = nominal.actions.clone();
    for (k, stage) in lq_policy.stages.iter().enumerate() {
        for (local, &i) in free.iter().enumerate() {
            let src = &stage[local];
            out.stages[k][i] = StagePolicy {
                gain: src.gain.clone(),
                offset: &src.offset * step,
                covariance: src.covariance.clone(),
            };
        }
    }
    out
}

/// Solves for approximate equilibrium policies of a general game.
pub fn solve_ece(
    game: &GameSpec,
    init: Option<&AffineGaussianPolicySet>,
    cfg: &SolverConfig,
) -> Result<EceSolution> {
    solve_ece_with_replay(game, init, cfg, &ActionReplay::none(game.num_agents()))
}

/// As [`solve_ece`], with some agents replaying fixed action sequences.
pub fn solve_ece_with_replay(
    game: &GameSpec,
    init: Option<&AffineGaussianPolicySet>,
    cfg: &SolverConfig,
    replay: &ActionReplay,
) -> Result<EceSolution> {
    cfg.validate()?;
    replay.check(game)?;
    let free = replay.free_agents();
    let temperatures: Vec<f64> = free.iter().map(|&i| game.temperatures[i]).collect();
    let s1 = game.initial_state.mean().clone();

    let mut policy = match init {
        Some(p) => {
            p.check_game(game)?;
            p.clone()
        }
        None => AffineGaussianPolicySet::zeros(game.horizon, game.state_dim(), game.action_dims()),
    };
    replay.pin(&mut policy);
    let mut nominal = simulate_mean(game, &policy, &s1)?;
    let mut trace = IterationTrace::default();

    for iteration in 1..=cfg.max_iterations {
        let lin = linearize(game, &nominal)?;
        let quad = quadratize(game, &nominal, cfg.strict_paper)?;
        let projected = quad.projected;
        let lq_game = restrict(lin.clone(), quad, game.action_dims(), &free);
        let (lq_policy, values, report) = lq::solve_lq_ece(&lq_game, &temperatures, cfg.lq_options())?;

        let mut step = 1.0;
        let (accepted, next, deviation) = loop {
            let cand = candidate(&policy, &nominal, &lq_policy, &free, step);
            let attempt = simulate_mean(game, &cand, &s1);
            let deviation = match &attempt {
                Ok(traj) => traj.max_state_deviation(&nominal),
                Err(_) => f64::INFINITY,
            };
            let exact = attempt.as_ref().is_ok_and(|t| model_error(&lin, &nominal, &cand, t) < cfg.convergence_tol);
            if deviation <= cfg.max_step_deviation || exact {
                break (cand, attempt?, deviation);
            }
            step *= 0.5;
            if step < cfg.min_step {
                return Err(Error::LineSearch { iteration, deviation });
            }
        };

        trace.records.push(IterationRecord {
            iteration,
            max_deviation: deviation,
            step_size: step,
            costs: evaluate_cost(game, &next)?,
            projected_hessians: projected,
        });

        if deviation < cfg.convergence_tol {
            // Re-express around the converged trajectory: same means, zero offsets.
            let mut policies = accepted;
            policies.nominal_states = next.states.clone();
            policies.nominal_actions = next.actions.clone();
            for stage in &mut policies.stages {
                for p in stage.iter_mut() {
                    p.offset.fill(0.0);
                }
            }
            return Ok(EceSolution { policies, trajectory: next, trace, values, report });
        }
        policy = accepted;
        nominal = next;
    }
    Err(Error::NonConvergence { trace })
}
