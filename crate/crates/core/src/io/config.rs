//! JSON scenario files.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "num_agents": 2,
//!   "horizon": 30,
//!   "dt": 0.1,
//!   "dynamics": { "kind": "point_mass", "dims": 2 },
//!   "noise": { "covariance": [[...]] },
//!   "initial_state": { "kind": "fixed", "state": [...] },
//!   "agents": [ { "cost": { "kind": "features", "features": [...], "weights": [...] } } ],
//!   "solver": { ... },
//!   "learner": { ... }
//! }
//! ```
//!
//! Matrices are arrays of rows. Unknown keys are rejected at every level.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{LinearDynamics, PointMass, Unicycle};
use crate::error::{Error, Result};
use crate::eval::HistogramSpec;
use crate::features::{make_cost_model, AgentFeatures, Feature, FeatureBasis, WeightVector};
use crate::game::{CostModel, DynamicsModel, GameSpec, InitialState, NoiseModel, QuadraticCost};
use crate::ilq::SolverConfig;
use crate::irl::LearnConfig;

pub const SCHEMA_VERSION: u32 = 1;

pub type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DynamicsConfig {
    /// `s' = A s + Σ_j B^j a^j`; `dt` is not used.
    Linear { a: Rows, b: Vec<Rows> },
    /// Double integrators with `dims` spatial dimensions per agent.
    PointMass { dims: usize },
    Unicycle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Defaults to the identity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain: Option<Rows>,
    pub covariance: Rows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialStateConfig {
    Fixed { state: Vec<f64> },
    Gaussian { mean: Vec<f64>, covariance: Rows },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostConfig {
    Features {
        features: Vec<Feature>,
        /// True weights, needed to generate demonstrations or solve.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
    },
    /// `½ sᵀQs + lᵀs + Σ_j a^jᵀ R^{ij} a^j`.
    Quadratic { q: Rows, l: Vec<f64>, r: Vec<Rows> },
}

fn one() -> f64 {
    1.0
}

fn is_one(x: &f64) -> bool {
    *x == 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Position indices in the joint state. Derived from the dynamics for
    /// point masses and unicycles; required for feature costs on linear
    /// dynamics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<Vec<usize>>,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub temperature: f64,
    pub cost: CostConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub num_agents: usize,
    pub horizon: usize,
    /// Time step in seconds.
    pub dt: f64,
    pub dynamics: DynamicsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseConfig>,
    pub initial_state: InitialStateConfig,
    pub agents: Vec<AgentConfig>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub learner: LearnConfig,
    #[serde(default)]
    pub histogram: HistogramSpec,
}

pub fn matrix(rows: &Rows, what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config(format!("{what}: rows have different lengths")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn rows(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// A parsed scenario, ready to build games for any weight vector.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub dynamics: Arc<dyn DynamicsModel>,
    pub noise: NoiseModel,
    pub initial_state: InitialState,
    pub positions: Vec<Vec<usize>>,
    /// Present when every agent uses feature costs.
    pub basis: Option<Arc<FeatureBasis>>,
    pub true_weights: Option<WeightVector>,
    quadratic: Option<Vec<Arc<dyn CostModel>>>,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn build(&self) -> Result<Scenario> {
        Scenario::new(self.clone())
    }
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        let big_n = config.num_agents;
        if big_n == 0 || config.agents.len() != big_n {
            return Err(Error::Config(format!(
                "num_agents is {big_n} but {} agent entries are given",
                config.agents.len()
            )));
        }
        if !(config.dt.is_finite() && config.dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        config.solver.validate()?;
        config.learner.validate()?;
        config.histogram.validate()?;

        let (dynamics, default_positions): (Arc<dyn DynamicsModel>, Option<Vec<Vec<usize>>>) = match &config.dynamics {
            DynamicsConfig::Linear { a, b } => {
                if b.len() != big_n {
                    return Err(Error::Config("linear dynamics need one B matrix per agent".into()));
                }
                let bs = b.iter().map(|m| matrix(m, "B")).collect::<Result<Vec<_>>>()?;
                (Arc::new(LinearDynamics::new(matrix(a, "A")?, bs)?), None)
            }
            DynamicsConfig::PointMass { dims } => {
                let pm = PointMass::new(big_n, *dims, config.dt)?;
                let pos = (0..big_n).map(|i| pm.position_indices(i)).collect();
                (Arc::new(pm), Some(pos))
            }
            DynamicsConfig::Unicycle => {
                let u = Unicycle::new(big_n, config.dt)?;
                let pos = (0..big_n).map(|i| u.position_indices(i)).collect();
                (Arc::new(u), Some(pos))
            }
        };
        let n = dynamics.state_dim();
        let action_dims = dynamics.action_dims().to_vec();

        let noise = match &config.noise {
            None => NoiseModel::identity(n),
            Some(nc) => {
                let cov = matrix(&nc.covariance, "noise covariance")?;
                let gain = match &nc.gain {
                    Some(g) => matrix(g, "noise gain")?,
                    None => DMatrix::identity(n, cov.nrows()),
                };
                if gain.nrows() != n {
                    return Err(Error::Config(format!("noise gain needs {n} rows")));
                }
                NoiseModel::new(gain, cov)?
            }
        };
        let initial_state = match &config.initial_state {
            InitialStateConfig::Fixed { state } => InitialState::Fixed(DVector::from_column_slice(state)),
            InitialStateConfig::Gaussian { mean, covariance } => {
                let cov = matrix(covariance, "initial covariance")?;
                if cov.shape() != (mean.len(), mean.len()) {
                    return Err(Error::Config("initial covariance does not match the mean".into()));
                }
                InitialState::Gaussian { mean: DVector::from_column_slice(mean), covariance: cov }
            }
        };
        if initial_state.dim() != n {
            return Err(Error::Config(format!("initial state has dimension {} but the state has {n}", initial_state.dim())));
        }

        let positions: Vec<Vec<usize>> = config
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| match (&a.position, &default_positions) {
                (Some(p), _) => Ok(p.clone()),
                (None, Some(d)) => Ok(d[i].clone()),
                (None, None) if matches!(a.cost, CostConfig::Quadratic { .. }) => Ok(Vec::new()),
                (None, None) => Err(Error::Config(format!("agent {i} needs position indices"))),
            })
            .collect::<Result<_>>()?;

        let all_features = config.agents.iter().all(|a| matches!(a.cost, CostConfig::Features { .. }));
        let all_quadratic = config.agents.iter().all(|a| matches!(a.cost, CostConfig::Quadratic { .. }));
        let (basis, true_weights, quadratic) = if all_features {
            let agents = config
                .agents
                .iter()
                .zip(&positions)
                .map(|(a, p)| match &a.cost {
                    CostConfig::Features { features, .. } => AgentFeatures { position: p.clone(), features: features.clone() },
                    CostConfig::Quadratic { .. } => unreachable!(),
                })
                .collect();
            let basis = Arc::new(FeatureBasis::new(config.horizon, n, agents)?);
            let given: Vec<Option<&Vec<f64>>> = config
                .agents
                .iter()
                .map(|a| match &a.cost {
                    CostConfig::Features { weights, .. } => weights.as_ref(),
                    CostConfig::Quadratic { .. } => None,
                })
                .collect();
            let weights = if given.iter().all(Option::is_some) {
                let w = WeightVector::from_nested(&given.iter().map(|w| w.unwrap().clone()).collect::<Vec<_>>());
                make_cost_model(&basis, &w, &action_dims)?;
                Some(w)
            } else if given.iter().any(Option::is_some) {
                return Err(Error::Config("either all agents or none must give true weights".into()));
            } else {
                None
            };
            (Some(basis), weights, None)
        } else if all_quadratic {
            let costs = config
                .agents
                .iter()
                .map(|a| match &a.cost {
                    CostConfig::Quadratic { q, l, r } => {
                        let cost = QuadraticCost {
                            q: matrix(q, "Q")?,
                            l: DVector::from_column_slice(l),
                            r: r.iter().map(|m| matrix(m, "R")).collect::<Result<_>>()?,
                        };
                        if cost.q.shape() != (n, n) || cost.l.len() != n || cost.r.len() != big_n {
                            return Err(Error::Config("quadratic cost has wrong dimensions".into()));
                        }
                        if cost.r.iter().zip(&action_dims).any(|(r, &m)| r.shape() != (m, m)) {
                            return Err(Error::Config("action cost matrices have wrong dimensions".into()));
                        }
                        Ok(Arc::new(cost) as Arc<dyn CostModel>)
                    }
                    CostConfig::Features { .. } => unreachable!(),
                })
                .collect::<Result<Vec<_>>>()?;
            (None, None, Some(costs))
        } else {
            return Err(Error::Config("agents must all use feature costs or all use quadratic costs".into()));
        };

        let scenario = Self { config, dynamics, noise, initial_state, positions, basis, true_weights, quadratic };
        // Surface dimension and temperature errors at load time.
        let costs = match (&scenario.quadratic, &scenario.basis) {
            (Some(q), _) => q.clone(),
            (None, Some(b)) => make_cost_model(b, &WeightVector::ones(b), &action_dims)?,
            (None, None) => unreachable!(),
        };
        scenario.game_with_costs(costs)?;
        Ok(scenario)
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn temperatures(&self) -> Vec<f64> {
        self.config.agents.iter().map(|a| a.temperature).collect()
    }

    pub fn game_with_costs(&self, costs: Vec<Arc<dyn CostModel>>) -> Result<GameSpec> {
        GameSpec::new(self.config.horizon, Arc::clone(&self.dynamics), self.noise.clone(), self.initial_state.clone(), costs)?
            .with_temperatures(self.temperatures())
    }

    pub fn require_basis(&self) -> Result<&Arc<FeatureBasis>> {
        self.basis.as_ref().ok_or_else(|| Error::Config("scenario has no feature costs".into()))
    }

    pub fn game_with_weights(&self, weights: &WeightVector) -> Result<GameSpec> {
        let basis = self.require_basis()?;
        self.game_with_costs(make_cost_model(basis, weights, self.dynamics.action_dims())?)
    }

    /// A game with the scenario's dimensions, using unit weights when no
    /// true weights are configured.
    pub fn shape_game(&self) -> Result<GameSpec> {
        match (&self.basis, &self.true_weights) {
            (Some(b), None) => self.game_with_weights(&WeightVector::ones(b)),
            _ => self.game(),
        }
    }

    /// The game under the configured costs: quadratic costs or true weights.
    pub fn game(&self) -> Result<GameSpec> {
        match (&self.quadratic, &self.true_weights) {
            (Some(q), _) => self.game_with_costs(q.clone()),
            (None, Some(w)) => self.game_with_weights(w),
            (None, None) => Err(Error::Config("scenario has feature costs but no true weights".into())),
        }
    }
}
