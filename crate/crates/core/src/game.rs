//! Games, trajectories and affine-Gaussian policies, plus forward simulation.
//!
//! Time is 1-based at every model callback (`t = 1..=T`). Internally,
//! per-step vectors are stored 0-based, so `states[k]` holds `s_{k+1}`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;

/// Discrete-time drift `s_{t+1} = f(t, s_t, a_t^1, ..., a_t^N)`.
pub trait DynamicsModel: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;

    fn action_dims(&self) -> &[usize];

    fn step(&self, t: usize, state: &DVector<f64>, actions: &[DVector<f64>]) -> DVector<f64>;

    /// Returns `(D_s f, [D_{a^j} f])` at `(t, s, a)`.
    fn jacobians(
        &self,
        t: usize,
        state: &DVector<f64>,
        actions: &[DVector<f64>],
    ) -> (DMatrix<f64>, Vec<DMatrix<f64>>);
}

/// Separable stage cost `c^i = v_t^i(s) + Σ_j a^jᵀ R^{ij} a^j`.
pub trait CostModel: Send + Sync + fmt::Debug {
    fn state_cost(&self, t: usize, state: &DVector<f64>) -> f64;

    fn state_gradient(&self, t: usize, state: &DVector<f64>) -> DVector<f64>;

    fn state_hessian(&self, t: usize, state: &DVector<f64>) -> DMatrix<f64>;

    /// `R^{ij}` for the owning agent `i` and acting agent `j`.
    fn action_cost(&self, j: usize) -> &DMatrix<f64>;

    fn stage_cost(&self, t: usize, state: &DVector<f64>, actions: &[DVector<f64>]) -> f64 {
        let mut c = self.state_cost(t, state);
        for (j, a) in actions.iter().enumerate() {
            c += a.dot(&(self.action_cost(j) * a));
        }
        c
    }
}

/// Quadratic state cost `½ sᵀQs + lᵀs` with constant action weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub q: DMatrix<f64>,
    pub l: DVector<f64>,
    pub r: Vec<DMatrix<f64>>,
}

impl CostModel for QuadraticCost {
    fn state_cost(&self, _t: usize, s: &DVector<f64>) -> f64 {
        0.5 * s.dot(&(&self.q * s)) + self.l.dot(s)
    }

    fn state_gradient(&self, _t: usize, s: &DVector<f64>) -> DVector<f64> {
        linalg::symmetrize(&self.q) * s + &self.l
    }

    fn state_hessian(&self, _t: usize, _s: &DVector<f64>) -> DMatrix<f64> {
        linalg::symmetrize(&self.q)
    }

    fn action_cost(&self, j: usize) -> &DMatrix<f64> {
        &self.r[j]
    }
}

/// Additive process noise `G w_t`, `w_t ~ N(0, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    gain: DMatrix<f64>,
    covariance: DMatrix<f64>,
    // G · W^{1/2}
    factor: DMatrix<f64>,
}

impl NoiseModel {
    pub fn new(gain: DMatrix<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != covariance.ncols() || gain.ncols() != covariance.nrows() {
            return Err(Error::shape("noise gain/covariance dimensions disagree"));
        }
        if linalg::max_abs_asymmetry(&covariance) > 1e-12 {
            return Err(Error::Config("noise covariance is not symmetric".into()));
        }
        let min_eig = nalgebra::SymmetricEigen::new(covariance.clone())
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-12 {
            return Err(Error::Config("noise covariance is not positive semi-definite".into()));
        }
        let factor = &gain * linalg::psd_factor(&covariance);
        Ok(Self { gain, covariance, factor })
    }

    pub fn identity(n: usize) -> Self {
        Self::new(DMatrix::identity(n, n), DMatrix::identity(n, n)).expect("identity noise")
    }

    pub fn none(n: usize) -> Self {
        Self::new(DMatrix::identity(n, n), DMatrix::zeros(n, n)).expect("zero noise")
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn is_zero(&self) -> bool {
        self.factor.iter().all(|x| *x == 0.0)
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let z = DVector::from_fn(self.factor.ncols(), |_, _| StandardNormal.sample(rng));
        &self.factor * z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    Fixed(DVector<f64>),
    Gaussian {
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
    },
}

impl InitialState {
    pub fn mean(&self) -> &DVector<f64> {
        match self {
            InitialState::Fixed(s) => s,
            InitialState::Gaussian { mean, .. } => mean,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean().len()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        match self {
            InitialState::Fixed(s) => s.clone(),
            InitialState::Gaussian { mean, covariance } => {
                let l = linalg::psd_factor(covariance);
                let z = DVector::from_fn(mean.len(), |_, _| StandardNormal.sample(rng));
                mean + l * z
            }
        }
    }
}

/// A fully specified finite-horizon stochastic game.
#[derive(Debug, Clone)]
pub struct GameSpec {
    pub horizon: usize,
    pub dynamics: Arc<dyn DynamicsModel>,
    pub noise: NoiseModel,
    pub initial_state: InitialState,
    pub costs: Vec<Arc<dyn CostModel>>,
    pub temperatures: Vec<f64>,
}

impl GameSpec {
    pub fn new(
        horizon: usize,
        dynamics: Arc<dyn DynamicsModel>,
        noise: NoiseModel,
        initial_state: InitialState,
        costs: Vec<Arc<dyn CostModel>>,
    ) -> Result<Self> {
        let n_agents = dynamics.action_dims().len();
        let game = Self {
            horizon,
            dynamics,
            noise,
            initial_state,
            costs,
            temperatures: vec![1.0; n_agents],
        };
        game.validate()?;
        Ok(game)
    }

    pub fn with_temperatures(mut self, temperatures: Vec<f64>) -> Result<Self> {
        self.temperatures = temperatures;
        self.validate()?;
        Ok(self)
    }

    pub fn with_costs(&self, costs: Vec<Arc<dyn CostModel>>) -> Result<Self> {
        let mut g = self.clone();
        g.costs = costs;
        g.validate()?;
        Ok(g)
    }

    pub fn num_agents(&self) -> usize {
        self.dynamics.action_dims().len()
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn action_dims(&self) -> &[usize] {
        self.dynamics.action_dims()
    }

    fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let dims = self.action_dims();
        if dims.is_empty() {
            return Err(Error::Config("a game needs at least one agent".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.costs.len() != dims.len() {
            return Err(Error::shape(format!(
                "{} cost models for {} agents",
                self.costs.len(),
                dims.len()
            )));
        }
        if self.temperatures.len() != dims.len()
            || self.temperatures.iter().any(|g| !(g.is_finite() && *g > 0.0))
        {
            return Err(Error::Config("temperatures must be positive, one per agent".into()));
        }
        if self.noise.gain().nrows() != n {
            return Err(Error::shape("noise gain rows differ from state dimension"));
        }
        if self.initial_state.dim() != n {
            return Err(Error::shape("initial state dimension differs from state dimension"));
        }
        for (i, cost) in self.costs.iter().enumerate() {
            for (j, &m) in dims.iter().enumerate() {
                let r = cost.action_cost(j);
                if r.nrows() != m || r.ncols() != m {
                    return Err(Error::shape(format!("R^{{{i}{j}}} is not {m}x{m}")));
                }
            }
        }
        Ok(())
    }
}

/// One joint rollout: `states[k] = s_{k+1}`, `actions[k][i] = a_{k+1}^i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub trial: u64,
    pub states: Vec<DVector<f64>>,
    pub actions: Vec<Vec<DVector<f64>>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.states.len()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    pub fn action_dims(&self) -> Vec<usize> {
        self.actions
            .first()
            .map(|a| a.iter().map(|x| x.len()).collect())
            .unwrap_or_default()
    }

    pub fn is_finite(&self) -> bool {
        self.states.iter().all(linalg::is_finite_vector)
            && self.actions.iter().flatten().all(linalg::is_finite_vector)
    }

    /// Max over t of the Euclidean norm of the state difference.
    pub fn max_state_deviation(&self, other: &Trajectory) -> f64 {
        self.states
            .iter()
            .zip(&other.states)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn check_game(&self, game: &GameSpec) -> Result<()> {
        if self.horizon() != game.horizon
            || self.states.iter().any(|s| s.len() != game.state_dim())
            || self.actions.len() != game.horizon
            || self.actions.iter().any(|a| {
                a.len() != game.num_agents()
                    || a.iter().zip(game.action_dims()).any(|(x, &m)| x.len() != m)
            })
        {
            return Err(Error::shape("trajectory does not match game dimensions"));
        }
        Ok(())
    }
}

/// A set of rollouts sharing dimensions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryBatch {
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryBatch {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        let batch = Self { trajectories };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Trajectory> {
        self.trajectories.iter()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.trajectories.first() else {
            return Ok(());
        };
        let (t, n, m) = (first.horizon(), first.state_dim(), first.action_dims());
        for traj in &self.trajectories {
            if traj.horizon() != t || traj.actions.len() != t {
                return Err(Error::shape(format!("trial {} has a different horizon", traj.trial)));
            }
            if traj.states.iter().any(|s| s.len() != n)
                || traj.actions.iter().any(|a| a.iter().map(|x| x.len()).ne(m.iter().copied()))
            {
                return Err(Error::shape(format!("trial {} has different dimensions", traj.trial)));
            }
            if !traj.is_finite() {
                return Err(Error::NonFinite { what: "trajectory", t: 0 });
            }
        }
        Ok(())
    }

    /// Per-time mean state and per-agent mean actions.
    pub fn mean_trajectory(&self) -> Result<Trajectory> {
        let first = self.trajectories.first().ok_or(Error::EmptyBatch)?;
        let k = self.len() as f64;
        let mut mean = first.clone();
        mean.trial = 0;
        for (t, s) in mean.states.iter_mut().enumerate() {
            *s = self.trajectories.iter().map(|x| &x.states[t]).sum::<DVector<f64>>() / k;
        }
        for (t, acts) in mean.actions.iter_mut().enumerate() {
            for (i, a) in acts.iter_mut().enumerate() {
                *a = self
                    .trajectories
                    .iter()
                    .map(|x| &x.actions[t][i])
                    .sum::<DVector<f64>>()
                    / k;
            }
        }
        Ok(mean)
    }
}

/// Policy of one agent at one time step: `a ~ N(ā − P(s − s̄) − α, Σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePolicy {
    pub gain: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// Affine-Gaussian feedback policies for all agents and time steps,
/// expressed around a nominal trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGaussianPolicySet {
    pub nominal_states: Vec<DVector<f64>>,
    pub nominal_actions: Vec<Vec<DVector<f64>>>,
    /// `stages[k][i]` is agent `i`'s policy at `t = k + 1`.
    pub stages: Vec<Vec<StagePolicy>>,
    /// Agents whose actions are replayed open-loop and never sampled.
    pub open_loop: Vec<bool>,
}

impl AffineGaussianPolicySet {
    /// All-zero gains and offsets around a zero nominal, unit covariances.
    pub fn zeros(horizon: usize, state_dim: usize, action_dims: &[usize]) -> Self {
        let stage: Vec<StagePolicy> = action_dims
            .iter()
            .map(|&m| StagePolicy {
                gain: DMatrix::zeros(m, state_dim),
                offset: DVector::zeros(m),
                covariance: DMatrix::identity(m, m),
            })
            .collect();
        Self {
            nominal_states: vec![DVector::zeros(state_dim); horizon],
            nominal_actions: vec![action_dims.iter().map(|&m| DVector::zeros(m)).collect(); horizon],
            stages: vec![stage; horizon],
            open_loop: vec![false; action_dims.len()],
        }
    }

    /// Zero gains and offsets around `trajectory`: the means replay its
    /// actions open-loop. Useful for starting a solve near observed play.
    pub fn along(trajectory: &Trajectory) -> Self {
        let mut p = Self::zeros(trajectory.horizon(), trajectory.state_dim(), &trajectory.action_dims());
        p.nominal_states = trajectory.states.clone();
        p.nominal_actions = trajectory.actions.clone();
        p
    }

    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn num_agents(&self) -> usize {
        self.open_loop.len()
    }

    pub fn mean_action(&self, k: usize, agent: usize, state: &DVector<f64>) -> DVector<f64> {
        let p = &self.stages[k][agent];
        &self.nominal_actions[k][agent] - &p.gain * (state - &self.nominal_states[k]) - &p.offset
    }

    /// Offsets re-expressed for a zero nominal: `mean = −P s − α_abs`.
    pub fn absolute_offsets(&self) -> Vec<Vec<DVector<f64>>> {
        self.stages
            .iter()
            .enumerate()
            .map(|(k, stage)| {
                stage
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        &p.offset - &self.nominal_actions[k][i] - &p.gain * &self.nominal_states[k]
                    })
                    .collect()
            })
            .collect()
    }

    pub fn check_game(&self, game: &GameSpec) -> Result<()> {
        let n = game.state_dim();
        let ok = self.horizon() == game.horizon
            && self.nominal_states.len() == game.horizon
            && self.nominal_actions.len() == game.horizon
            && self.open_loop.len() == game.num_agents()
            && self.nominal_states.iter().all(|s| s.len() == n)
            && self.stages.iter().zip(&self.nominal_actions).all(|(stage, nom)| {
                stage.len() == game.num_agents()
                    && stage.iter().zip(nom).zip(game.action_dims()).all(|((p, a), &m)| {
                        p.gain.shape() == (m, n)
                            && p.offset.len() == m
                            && p.covariance.shape() == (m, m)
                            && a.len() == m
                    })
            });
        if ok {
            Ok(())
        } else {
            Err(Error::shape("policy set does not match game dimensions"))
        }
    }
}

fn check_start(game: &GameSpec, policies: &AffineGaussianPolicySet, s1: &DVector<f64>) -> Result<()> {
    policies.check_game(game)?;
    if s1.len() != game.state_dim() {
        return Err(Error::shape("initial state has the wrong dimension"));
    }
    Ok(())
}

/// Deterministic rollout of the policy means with no process noise.
pub fn simulate_mean(
    game: &GameSpec,
    policies: &AffineGaussianPolicySet,
    s1: &DVector<f64>,
) -> Result<Trajectory> {
    check_start(game, policies, s1)?;
    let horizon = game.horizon;
    let mut states = Vec::with_capacity(horizon);
    let mut actions = Vec::with_capacity(horizon);
    let mut s = s1.clone();
    for k in 0..horizon {
        if !linalg::is_finite_vector(&s) {
            return Err(Error::Divergence { t: k + 1 });
        }
        let a: Vec<DVector<f64>> =
            (0..game.num_agents()).map(|i| policies.mean_action(k, i, &s)).collect();
        if !a.iter().all(linalg::is_finite_vector) {
            return Err(Error::Divergence { t: k + 1 });
        }
        let next = (k + 1 < horizon).then(|| game.dynamics.step(k + 1, &s, &a));
        states.push(s);
        actions.push(a);
        if let Some(next) = next {
            s = next;
        } else {
            break;
        }
    }
    Ok(Trajectory { trial: 0, states, actions })
}

/// Stochastic rollout: actions drawn from each agent's Gaussian policy,
/// process noise added to every transition. Same seed, same trajectory.
pub fn simulate_stochastic(
    game: &GameSpec,
    policies: &AffineGaussianPolicySet,
    s1: &DVector<f64>,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    simulate_with_rng(game, policies, s1, &mut rng)
}

fn simulate_with_rng(
    game: &GameSpec,
    policies: &AffineGaussianPolicySet,
    s1: &DVector<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    check_start(game, policies, s1)?;
    let horizon = game.horizon;
    let mut factors = Vec::with_capacity(horizon);
    for (k, stage) in policies.stages.iter().enumerate() {
        let mut per_agent = Vec::with_capacity(stage.len());
        for (i, p) in stage.iter().enumerate() {
            if policies.open_loop[i] {
                per_agent.push(None);
                continue;
            }
            let chol = nalgebra::Cholesky::new(linalg::symmetrize(&p.covariance))
                .ok_or(Error::Covariance { agent: i, t: k + 1 })?;
            per_agent.push(Some(chol.l()));
        }
        factors.push(per_agent);
    }

    let mut states = Vec::with_capacity(horizon);
    let mut actions = Vec::with_capacity(horizon);
    let mut s = s1.clone();
    for k in 0..horizon {
        if !linalg::is_finite_vector(&s) {
            return Err(Error::Divergence { t: k + 1 });
        }
        let a: Vec<DVector<f64>> = (0..game.num_agents())
            .map(|i| {
                let mean = policies.mean_action(k, i, &s);
                match &factors[k][i] {
                    Some(l) => {
                        let z = DVector::from_fn(mean.len(), |_, _| StandardNormal.sample(rng));
                        mean + l * z
                    }
                    None => mean,
                }
            })
            .collect();
        let next = (k + 1 < horizon).then(|| game.dynamics.step(k + 1, &s, &a) + game.noise.sample(rng));
        states.push(s);
        actions.push(a);
        match next {
            Some(next) => s = next,
            None => break,
        }
    }
    Ok(Trajectory { trial: 0, states, actions })
}

/// Draws `trials` rollouts. Trial `k` uses seed `base_seed + k` for both its
/// initial state (drawn from the game's `p_1`) and its action and process
/// noise, so the batch does not depend on thread scheduling.
pub fn sample_batch(
    game: &GameSpec,
    policies: &AffineGaussianPolicySet,
    trials: usize,
    base_seed: u64,
) -> Result<TrajectoryBatch> {
    let trajectories = (0..trials as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(k));
            let s1 = game.initial_state.sample(&mut rng);
            let mut traj = simulate_with_rng(game, policies, &s1, &mut rng)?;
            traj.trial = k;
            Ok(traj)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryBatch { trajectories })
}

/// Per-agent cumulative raw stage cost (no entropy term).
pub fn evaluate_cost(game: &GameSpec, trajectory: &Trajectory) -> Result<Vec<f64>> {
    trajectory.check_game(game)?;
    Ok(game
        .costs
        .iter()
        .map(|c| {
            trajectory
                .states
                .iter()
                .zip(&trajectory.actions)
                .enumerate()
                .map(|(k, (s, a))| c.stage_cost(k + 1, s, a))
                .sum()
        })
        .collect())
}

/// Mixes a base seed with a list of indices (splitmix64 finalizer).
pub fn derive_seed(base: u64, indices: &[u64]) -> u64 {
    let mut x = base;
    for &i in indices {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(i);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}
