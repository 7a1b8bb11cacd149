//! Cost features for collision-avoidance scenes and the linear cost
//! `c^i = w^iᵀ φ^i` they induce.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{CostModel, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Feature {
    /// `‖p_t − ref_t‖²` with `ref_t` moving at constant speed from `start`
    /// (t = 1) to `goal` (t = T).
    ReferenceTracking { start: Vec<f64>, goal: Vec<f64> },
    /// `‖a^i‖²`.
    ControlEffort,
    /// `exp(−‖p^i − p^j‖² / 2σ²)`.
    GaussianProximity { target: usize, sigma: f64 },
}

impl Feature {
    pub fn name(&self) -> String {
        match self {
            Feature::ReferenceTracking { .. } => "tracking".into(),
            Feature::ControlEffort => "control".into(),
            Feature::GaussianProximity { target, .. } => format!("proximity_{}", target + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentFeatures {
    /// Indices of this agent's position within the joint state.
    pub position: Vec<usize>,
    pub features: Vec<Feature>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBasis {
    horizon: usize,
    state_dim: usize,
    agents: Vec<AgentFeatures>,
}

impl FeatureBasis {
    pub fn new(horizon: usize, state_dim: usize, agents: Vec<AgentFeatures>) -> Result<Self> {
        let big_n = agents.len();
        for (i, agent) in agents.iter().enumerate() {
            if agent.position.is_empty() || agent.position.iter().any(|&p| p >= state_dim) {
                return Err(Error::Config(format!("agent {i} has invalid position indices")));
            }
            for f in &agent.features {
                match f {
                    Feature::ReferenceTracking { start, goal } => {
                        if start.len() != agent.position.len() || goal.len() != agent.position.len() {
                            return Err(Error::Config(format!("agent {i}: reference endpoints have wrong dimension")));
                        }
                    }
                    Feature::ControlEffort => {}
                    Feature::GaussianProximity { target, sigma } => {
                        if *target >= big_n || *target == i {
                            return Err(Error::Config(format!("agent {i}: invalid proximity target {target}")));
                        }
                        if agents[*target].position.len() != agent.position.len() {
                            return Err(Error::Config(format!("agent {i}: position dimensions of proximity pair differ")));
                        }
                        if !(sigma.is_finite() && *sigma > 0.0) {
                            return Err(Error::Config(format!("agent {i}: proximity sigma must be positive")));
                        }
                    }
                }
            }
        }
        Ok(Self { horizon, state_dim, agents })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn agent(&self, i: usize) -> &AgentFeatures {
        &self.agents[i]
    }

    pub fn num_features(&self, i: usize) -> usize {
        self.agents[i].features.len()
    }

    pub fn feature_names(&self, i: usize) -> Vec<String> {
        self.agents[i].features.iter().map(Feature::name).collect()
    }

    /// Goal of the agent's first tracking feature, if any.
    pub fn goal(&self, i: usize) -> Option<&[f64]> {
        self.agents[i].features.iter().find_map(|f| match f {
            Feature::ReferenceTracking { goal, .. } => Some(goal.as_slice()),
            _ => None,
        })
    }

    pub fn position(&self, i: usize, s: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.agents[i].position.len(), self.agents[i].position.iter().map(|&p| s[p]))
    }

    fn reference(&self, t: usize, start: &[f64], goal: &[f64]) -> DVector<f64> {
        let frac = if self.horizon > 1 { (t - 1) as f64 / (self.horizon - 1) as f64 } else { 0.0 };
        DVector::from_iterator(start.len(), start.iter().zip(goal).map(|(s, g)| s + frac * (g - s)))
    }

    /// `φ^i(s_t, a_t)`.
    pub fn values(&self, i: usize, t: usize, s: &DVector<f64>, actions: &[DVector<f64>]) -> DVector<f64> {
        let p = self.position(i, s);
        DVector::from_iterator(
            self.agents[i].features.len(),
            self.agents[i].features.iter().map(|f| match f {
                Feature::ReferenceTracking { start, goal } => (&p - self.reference(t, start, goal)).norm_squared(),
                Feature::ControlEffort => actions[i].norm_squared(),
                Feature::GaussianProximity { target, sigma } => {
                    let d = &p - self.position(*target, s);
                    (-d.norm_squared() / (2.0 * sigma * sigma)).exp()
                }
            }),
        )
    }

    /// Gradient and Hessian of `Σ_k w_k φ_k` over the state-dependent features.
    fn state_derivatives(&self, i: usize, t: usize, s: &DVector<f64>, w: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.state_dim;
        let mut grad = DVector::zeros(n);
        let mut hess = DMatrix::zeros(n, n);
        let me = &self.agents[i].position;
        let p = self.position(i, s);
        for (f, &wk) in self.agents[i].features.iter().zip(w.iter()) {
            match f {
                Feature::ReferenceTracking { start, goal } => {
                    let e = &p - self.reference(t, start, goal);
                    for (a, &ia) in me.iter().enumerate() {
                        grad[ia] += wk * 2.0 * e[a];
                        hess[(ia, ia)] += wk * 2.0;
                    }
                }
                Feature::ControlEffort => {}
                Feature::GaussianProximity { target, sigma } => {
                    let other = &self.agents[*target].position;
                    let d = &p - self.position(*target, s);
                    let s2 = sigma * sigma;
                    let phi = (-d.norm_squared() / (2.0 * s2)).exp();
                    let g = &d * (-phi / s2);
                    let h = (&d * d.transpose() / (s2 * s2) - DMatrix::identity(d.len(), d.len()) / s2) * phi;
                    for a in 0..d.len() {
                        grad[me[a]] += wk * g[a];
                        grad[other[a]] -= wk * g[a];
                        for b in 0..d.len() {
                            let v = wk * h[(a, b)];
                            hess[(me[a], me[b])] += v;
                            hess[(other[a], other[b])] += v;
                            hess[(me[a], other[b])] -= v;
                            hess[(other[a], me[b])] -= v;
                        }
                    }
                }
            }
        }
        (grad, hess)
    }
}

/// Per-agent weights, aligned with the basis.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub agents: Vec<DVector<f64>>,
}

impl WeightVector {
    pub fn new(agents: Vec<DVector<f64>>) -> Self {
        Self { agents }
    }

    pub fn ones(basis: &FeatureBasis) -> Self {
        Self { agents: (0..basis.num_agents()).map(|i| DVector::from_element(basis.num_features(i), 1.0)).collect() }
    }

    pub fn to_nested(&self) -> Vec<Vec<f64>> {
        self.agents.iter().map(|w| w.iter().copied().collect()).collect()
    }

    pub fn from_nested(rows: &[Vec<f64>]) -> Self {
        Self { agents: rows.iter().map(|r| DVector::from_column_slice(r)).collect() }
    }

    pub fn check(&self, basis: &FeatureBasis) -> Result<()> {
        if self.agents.len() != basis.num_agents() {
            return Err(Error::shape("one weight vector per agent required"));
        }
        for (i, w) in self.agents.iter().enumerate() {
            if w.len() != basis.num_features(i) {
                return Err(Error::shape(format!("agent {i} has {} weights for {} features", w.len(), basis.num_features(i))));
            }
            if !w.iter().all(|x| x.is_finite()) {
                return Err(Error::InvalidWeight(format!("agent {i} has non-finite weights")));
            }
        }
        Ok(())
    }
}

/// Summed effort weight of agent `i`.
pub fn effort_weight(basis: &FeatureBasis, i: usize, w: &DVector<f64>) -> f64 {
    basis.agents[i]
        .features
        .iter()
        .zip(w.iter())
        .filter(|(f, _)| matches!(f, Feature::ControlEffort))
        .map(|(_, wk)| *wk)
        .sum()
}

/// `Σ_t φ^i(s_t, a_t)` for every agent.
pub fn eval_features(basis: &FeatureBasis, trajectory: &Trajectory) -> Result<Vec<DVector<f64>>> {
    if trajectory.horizon() != basis.horizon || trajectory.state_dim() != basis.state_dim {
        return Err(Error::shape("trajectory does not match the feature basis"));
    }
    if trajectory.actions.iter().any(|a| a.len() != basis.num_agents()) {
        return Err(Error::shape("trajectory has the wrong number of agents"));
    }
    Ok((0..basis.num_agents())
        .map(|i| {
            trajectory
                .states
                .iter()
                .zip(&trajectory.actions)
                .enumerate()
                .map(|(k, (s, a))| basis.values(i, k + 1, s, a))
                .fold(DVector::zeros(basis.num_features(i)), |acc, v| acc + v)
        })
        .collect())
}

/// Cost `w^iᵀ φ^i` of one agent.
#[derive(Debug, Clone)]
pub struct FeatureCost {
    basis: Arc<FeatureBasis>,
    agent: usize,
    weights: DVector<f64>,
    state_weights: DVector<f64>,
    action_costs: Vec<DMatrix<f64>>,
}

impl FeatureCost {
    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }
}

impl CostModel for FeatureCost {
    fn state_cost(&self, t: usize, s: &DVector<f64>) -> f64 {
        let idle: Vec<DVector<f64>> = self.action_costs.iter().map(|r| DVector::zeros(r.nrows())).collect();
        self.basis.values(self.agent, t, s, &idle).dot(&self.state_weights)
    }

    fn state_gradient(&self, t: usize, s: &DVector<f64>) -> DVector<f64> {
        self.basis.state_derivatives(self.agent, t, s, &self.state_weights).0
    }

    fn state_hessian(&self, t: usize, s: &DVector<f64>) -> DMatrix<f64> {
        self.basis.state_derivatives(self.agent, t, s, &self.state_weights).1
    }

    fn action_cost(&self, j: usize) -> &DMatrix<f64> {
        &self.action_costs[j]
    }

    fn stage_cost(&self, t: usize, s: &DVector<f64>, actions: &[DVector<f64>]) -> f64 {
        self.basis.values(self.agent, t, s, actions).dot(&self.weights)
    }
}

/// Builds each agent's cost. `R^{ii}` is the effort weight times identity
/// and must be positive; `R^{ij} = 0` for `j ≠ i`.
pub fn make_cost_model(
    basis: &Arc<FeatureBasis>,
    weights: &WeightVector,
    action_dims: &[usize],
) -> Result<Vec<Arc<dyn CostModel>>> {
    weights.check(basis)?;
    if action_dims.len() != basis.num_agents() {
        return Err(Error::shape("action dimensions do not match the basis"));
    }
    let mut out: Vec<Arc<dyn CostModel>> = Vec::with_capacity(basis.num_agents());
    for (i, w) in weights.agents.iter().enumerate() {
        let effort = effort_weight(basis, i, w);
        if !(effort > 0.0) {
            return Err(Error::InvalidWeight(format!("agent {i}: effort weight {effort} must be positive")));
        }
        let action_costs = action_dims
            .iter()
            .enumerate()
            .map(|(j, &m)| if j == i { DMatrix::identity(m, m) * effort } else { DMatrix::zeros(m, m) })
            .collect();
        let state_weights = DVector::from_iterator(
            w.len(),
            basis.agents[i]
                .features
                .iter()
                .zip(w.iter())
                .map(|(f, wk)| if matches!(f, Feature::ControlEffort) { 0.0 } else { *wk }),
        );
        out.push(Arc::new(FeatureCost {
            basis: Arc::clone(basis),
            agent: i,
            weights: w.clone(),
            state_weights,
            action_costs,
        }));
    }
    Ok(out)
}
