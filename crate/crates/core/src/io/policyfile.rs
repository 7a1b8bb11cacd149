//! Policy files: JSON with per-time, per-agent matrices stored row-major
//! alongside their dimensions.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{AffineGaussianPolicySet, StagePolicy};

pub const POLICY_FORMAT: &str = "ece-policy/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixData {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self { rows: m.nrows(), cols: m.ncols(), data: m.transpose().iter().copied().collect() }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Config(format!(
                "matrix declares {}x{} but holds {} values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentStage {
    pub nominal_action: Vec<f64>,
    pub gain: MatrixData,
    pub offset: Vec<f64>,
    pub covariance: MatrixData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageData {
    pub t: usize,
    pub nominal_state: Vec<f64>,
    pub agents: Vec<AgentStage>,
}

/// Action mean `ā − P(s − s̄) − α`, action covariance `Σ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFile {
    pub format: String,
    pub horizon: usize,
    pub state_dim: usize,
    pub action_dims: Vec<usize>,
    pub open_loop: Vec<bool>,
    pub stages: Vec<StageData>,
}

impl PolicyFile {
    pub fn from_policies(p: &AffineGaussianPolicySet) -> Self {
        Self {
            format: POLICY_FORMAT.into(),
            horizon: p.horizon(),
            state_dim: p.nominal_states.first().map_or(0, |s| s.len()),
            action_dims: p.nominal_actions.first().map(|a| a.iter().map(|x| x.len()).collect()).unwrap_or_default(),
            open_loop: p.open_loop.clone(),
            stages: p
                .stages
                .iter()
                .enumerate()
                .map(|(k, stage)| StageData {
                    t: k + 1,
                    nominal_state: p.nominal_states[k].iter().copied().collect(),
                    agents: stage
                        .iter()
                        .zip(&p.nominal_actions[k])
                        .map(|(sp, a)| AgentStage {
                            nominal_action: a.iter().copied().collect(),
                            gain: MatrixData::from_matrix(&sp.gain),
                            offset: sp.offset.iter().copied().collect(),
                            covariance: MatrixData::from_matrix(&sp.covariance),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn to_policies(&self) -> Result<AffineGaussianPolicySet> {
        if self.format != POLICY_FORMAT {
            return Err(Error::Config(format!("unknown policy format `{}`", self.format)));
        }
        if self.stages.len() != self.horizon || self.open_loop.len() != self.action_dims.len() {
            return Err(Error::Config("policy file is inconsistent with its declared sizes".into()));
        }
        let mut out = AffineGaussianPolicySet {
            nominal_states: Vec::with_capacity(self.horizon),
            nominal_actions: Vec::with_capacity(self.horizon),
            stages: Vec::with_capacity(self.horizon),
            open_loop: self.open_loop.clone(),
        };
        for (k, st) in self.stages.iter().enumerate() {
            if st.t != k + 1 || st.nominal_state.len() != self.state_dim || st.agents.len() != self.action_dims.len() {
                return Err(Error::Config(format!("policy stage {} is malformed", k + 1)));
            }
            out.nominal_states.push(DVector::from_column_slice(&st.nominal_state));
            let mut actions = Vec::new();
            let mut stage = Vec::new();
            for (a, &m) in st.agents.iter().zip(&self.action_dims) {
                let gain = a.gain.to_matrix()?;
                let covariance = a.covariance.to_matrix()?;
                if a.nominal_action.len() != m || a.offset.len() != m || gain.shape() != (m, self.state_dim) || covariance.shape() != (m, m) {
                    return Err(Error::Config(format!("policy stage {} has wrong agent dimensions", k + 1)));
                }
                actions.push(DVector::from_column_slice(&a.nominal_action));
                stage.push(StagePolicy { gain, offset: DVector::from_column_slice(&a.offset), covariance });
            }
            out.nominal_actions.push(actions);
            out.stages.push(stage);
        }
        Ok(out)
    }
}

pub fn save_policies(path: &Path, p: &AffineGaussianPolicySet) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&PolicyFile::from_policies(p))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_policies(path: &Path) -> Result<AffineGaussianPolicySet> {
    let file: PolicyFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    file.to_policies()
}
