//! Exact entropic cost equilibria of linear-quadratic-Gaussian games.
//!
//! Agent `i` pays, at every step `t = 1..=T`,
//!
//! ```text
//! ½ sᵀ Q_t^i s + l_t^iᵀ s + Σ_j ( ½ a^jᵀ R^{ij} a^j + r_t^{ij}ᵀ a^j )
//! ```
//!
//! and the state evolves as `s_{t+1} = A_t s_t + Σ_j B_t^j a_t^j + w_t`.
//! The equilibrium policy of every agent is Gaussian with an affine mean
//! `−P_t^i s − α_t^i`. The gains are found by a backward recursion on the
//! quadratic value coefficients `(Z_t^i, ξ_t^i)`, solving one coupled linear
//! system per stage for all agents at once.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::game::{AffineGaussianPolicySet, StagePolicy};
use crate::linalg::{self, offsets};

const SINGULAR_CONDITION: f64 = 1e12;
const REGULARIZATION_START: f64 = 1e-8;
const REGULARIZATION_MAX: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearStage {
    pub a: DMatrix<f64>,
    pub b: Vec<DMatrix<f64>>,
}

/// Quadratic stage cost of one agent. `r[j]` is the linear term on agent
/// `j`'s action.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticStage {
    pub q: DMatrix<f64>,
    pub l: DVector<f64>,
    pub r: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqStageGame {
    pub action_dims: Vec<usize>,
    /// Transitions for `t = 1..T-1`.
    pub dynamics: Vec<LinearStage>,
    /// `costs[k][i]` is agent `i`'s cost at `t = k + 1`, for `t = 1..=T`.
    pub costs: Vec<Vec<QuadraticStage>>,
    /// `action_costs[i][j] = R^{ij}`, constant over time.
    pub action_costs: Vec<Vec<DMatrix<f64>>>,
}

impl LqStageGame {
    /// Time-invariant game with no linear action terms.
    pub fn time_invariant(
        horizon: usize,
        a: DMatrix<f64>,
        b: Vec<DMatrix<f64>>,
        q: Vec<DMatrix<f64>>,
        l: Vec<DVector<f64>>,
        action_costs: Vec<Vec<DMatrix<f64>>>,
    ) -> Result<Self> {
        let action_dims: Vec<usize> = b.iter().map(|x| x.ncols()).collect();
        let stage_costs: Vec<QuadraticStage> = q
            .into_iter()
            .zip(l)
            .map(|(q, l)| QuadraticStage {
                q,
                l,
                r: action_dims.iter().map(|&m| DVector::zeros(m)).collect(),
            })
            .collect();
        let game = Self {
            dynamics: vec![LinearStage { a, b }; horizon.saturating_sub(1)],
            costs: vec![stage_costs; horizon],
            action_costs,
            action_dims,
        };
        game.validate()?;
        Ok(game)
    }

    pub fn horizon(&self) -> usize {
        self.costs.len()
    }

    pub fn num_agents(&self) -> usize {
        self.action_dims.len()
    }

    pub fn state_dim(&self) -> usize {
        self.costs.first().and_then(|c| c.first()).map_or(0, |c| c.q.nrows())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let big_n = self.num_agents();
        let horizon = self.horizon();
        if horizon == 0 || big_n == 0 {
            return Err(Error::shape("LQ game needs a horizon and agents"));
        }
        if self.dynamics.len() != horizon - 1 {
            return Err(Error::shape("LQ game needs T-1 transitions"));
        }
        for stage in &self.dynamics {
            if stage.a.shape() != (n, n)
                || stage.b.len() != big_n
                || stage.b.iter().zip(&self.action_dims).any(|(b, &m)| b.shape() != (n, m))
            {
                return Err(Error::shape("transition matrices have inconsistent shapes"));
            }
        }
        for stage in &self.costs {
            if stage.len() != big_n {
                return Err(Error::shape("one stage cost per agent required"));
            }
            for c in stage {
                if c.q.shape() != (n, n)
                    || c.l.len() != n
                    || c.r.len() != big_n
                    || c.r.iter().zip(&self.action_dims).any(|(r, &m)| r.len() != m)
                {
                    return Err(Error::shape("stage cost has inconsistent shapes"));
                }
            }
        }
        if self.action_costs.len() != big_n {
            return Err(Error::shape("one row of action costs per agent required"));
        }
        for (i, row) in self.action_costs.iter().enumerate() {
            if row.len() != big_n
                || row.iter().zip(&self.action_dims).any(|(r, &m)| r.shape() != (m, m))
            {
                return Err(Error::shape(format!("action costs of agent {i} have wrong shapes")));
            }
            if nalgebra::Cholesky::new(linalg::symmetrize(&row[i])).is_none() {
                return Err(Error::Config(format!("R^{{{i}{i}}} is not positive definite")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LqOptions {
    /// Drop the intermediate-stage `l_t` term from the `ξ` update and ignore
    /// every linear action term, reproducing the printed recursion verbatim.
    pub strict_paper: bool,
}

/// Quadratic value coefficients: `V_t^i(s) = ½ sᵀ Z_t^i s + ξ_t^iᵀ s + const`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueRecursion {
    /// `z[k][i]` is `Z_{k+1}^i`.
    pub z: Vec<Vec<DMatrix<f64>>>,
    pub xi: Vec<Vec<DVector<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageSolveReport {
    /// 1-norm condition estimate of the coupled matrix for `t = 1..T-1`.
    pub condition: Vec<f64>,
    /// Diagonal shift applied at each stage, if any.
    pub regularization: Vec<Option<f64>>,
}

impl StageSolveReport {
    pub fn regularized(&self) -> bool {
        self.regularization.iter().any(Option::is_some)
    }
}

/// Output of one coupled stage solve.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSolution {
    pub gains: Vec<DMatrix<f64>>,
    pub offsets: Vec<DVector<f64>>,
    /// Diagonal blocks `R^{ii} + B^iᵀ Z_{t+1}^i B^i` (including any shift).
    pub diagonal_blocks: Vec<DMatrix<f64>>,
    pub condition: f64,
    pub regularization: Option<f64>,
}

fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    match m.clone().lu().try_inverse() {
        Some(inv) if linalg::is_finite_matrix(&inv) => linalg::norm_one(m) * linalg::norm_one(&inv),
        _ => f64::INFINITY,
    }
}

/// Solves the coupled equilibrium conditions of one stage for every agent's
/// gain `P_t^i` and offset `α_t^i`, sharing one LU factorization between the
/// two right-hand sides.
#[allow(clippy::too_many_arguments)]
pub fn solve_stage_coupled(
    t: usize,
    z_next: &[DMatrix<f64>],
    xi_next: &[DVector<f64>],
    transition: &LinearStage,
    costs: &[QuadraticStage],
    action_costs: &[Vec<DMatrix<f64>>],
    options: LqOptions,
) -> Result<StageSolution> {
    let dims: Vec<usize> = transition.b.iter().map(|b| b.ncols()).collect();
    let offs = offsets(&dims);
    let total: usize = dims.iter().sum();
    let n = transition.a.nrows();
    let big_n = dims.len();

    let mut m = DMatrix::zeros(total, total);
    let mut rhs = DMatrix::zeros(total, n + 1);
    for i in 0..big_n {
        let bt_z = transition.b[i].transpose() * &z_next[i];
        for j in 0..big_n {
            let mut block = &bt_z * &transition.b[j];
            if i == j {
                block += &action_costs[i][i];
            }
            m.view_mut((offs[i], offs[j]), (dims[i], dims[j])).copy_from(&block);
        }
        rhs.view_mut((offs[i], 0), (dims[i], n)).copy_from(&(&bt_z * &transition.a));
        let mut alpha_rhs = transition.b[i].transpose() * &xi_next[i];
        if !options.strict_paper {
            alpha_rhs += &costs[i].r[i];
        }
        rhs.view_mut((offs[i], n), (dims[i], 1)).copy_from(&alpha_rhs);
    }

    let mut condition = condition_estimate(&m);
    let mut regularization = None;
    if !(condition <= SINGULAR_CONDITION) {
        let mut lambda = REGULARIZATION_START;
        let mut accepted = None;
        while lambda <= REGULARIZATION_MAX {
            let shifted = &m + DMatrix::identity(total, total) * lambda;
            let c = condition_estimate(&shifted);
            if c <= SINGULAR_CONDITION {
                accepted = Some((shifted, c));
                break;
            }
            lambda *= 2.0;
        }
        match accepted {
            Some((shifted, c)) => {
                m = shifted;
                condition = c;
                regularization = Some(lambda);
            }
            None => return Err(Error::StageSingular { t, condition }),
        }
    }

    let sol = m
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or(Error::StageSingular { t, condition })?;
    if !linalg::is_finite_matrix(&sol) {
        return Err(Error::NonFinite { what: "stage solution", t });
    }
    let gains = (0..big_n).map(|i| sol.view((offs[i], 0), (dims[i], n)).into_owned()).collect();
    let offsets_out = (0..big_n)
        .map(|i| sol.view((offs[i], n), (dims[i], 1)).column(0).into_owned())
        .collect();
    let diagonal_blocks = (0..big_n)
        .map(|i| m.view((offs[i], offs[i]), (dims[i], dims[i])).into_owned())
        .collect();
    Ok(StageSolution { gains, offsets: offsets_out, diagonal_blocks, condition, regularization })
}

/// Propagates `(Z, ξ)` one step backward given the stage's gains and
/// offsets. `Z_t^i` is symmetrized after the update.
#[allow(clippy::too_many_arguments)]
pub fn backward_value_update(
    gains: &[DMatrix<f64>],
    offsets: &[DVector<f64>],
    z_next: &[DMatrix<f64>],
    xi_next: &[DVector<f64>],
    transition: &LinearStage,
    costs: &[QuadraticStage],
    action_costs: &[Vec<DMatrix<f64>>],
    options: LqOptions,
) -> (Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
    let n = transition.a.nrows();
    let mut f = transition.a.clone();
    let mut beta = DVector::zeros(n);
    for ((b, p), alpha) in transition.b.iter().zip(gains).zip(offsets) {
        f -= b * p;
        beta -= b * alpha;
    }
    let ft = f.transpose();

    let mut z_out = Vec::with_capacity(z_next.len());
    let mut xi_out = Vec::with_capacity(z_next.len());
    for (i, cost) in costs.iter().enumerate() {
        let mut z = &ft * &z_next[i] * &f + &cost.q;
        let mut xi = &ft * (&xi_next[i] + &z_next[i] * &beta);
        for (j, (p, alpha)) in gains.iter().zip(offsets).enumerate() {
            let pt_r = p.transpose() * &action_costs[i][j];
            z += &pt_r * p;
            xi += &pt_r * alpha;
            if !options.strict_paper {
                xi -= p.transpose() * &cost.r[j];
            }
        }
        if !options.strict_paper {
            xi += &cost.l;
        }
        z_out.push(linalg::symmetrize(&z));
        xi_out.push(xi);
    }
    (z_out, xi_out)
}

fn checked_covariance(block: &DMatrix<f64>, temperature: f64, agent: usize, t: usize) -> Result<DMatrix<f64>> {
    let inv = block
        .clone()
        .try_inverse()
        .ok_or(Error::Covariance { agent, t })?;
    let sigma = linalg::symmetrize(&inv) * temperature;
    if !linalg::is_finite_matrix(&sigma) || nalgebra::Cholesky::new(sigma.clone()).is_none() {
        return Err(Error::Covariance { agent, t });
    }
    Ok(sigma)
}

/// Solves a linear-quadratic-Gaussian game for its entropic cost
/// equilibrium. Returned policies use a zero nominal trajectory.
pub fn solve_lq_ece(
    lq: &LqStageGame,
    temperatures: &[f64],
    options: LqOptions,
) -> Result<(AffineGaussianPolicySet, ValueRecursion, StageSolveReport)> {
    lq.validate()?;
    let horizon = lq.horizon();
    let big_n = lq.num_agents();
    let n = lq.state_dim();
    if temperatures.len() != big_n || temperatures.iter().any(|g| !(*g > 0.0)) {
        return Err(Error::Config("temperatures must be positive, one per agent".into()));
    }

    let mut policies = AffineGaussianPolicySet::zeros(horizon, n, &lq.action_dims);
    let mut z = vec![Vec::new(); horizon];
    let mut xi = vec![Vec::new(); horizon];
    let mut report = StageSolveReport {
        condition: vec![0.0; horizon - 1],
        regularization: vec![None; horizon - 1],
    };

    let terminal = &lq.costs[horizon - 1];
    z[horizon - 1] = terminal.iter().map(|c| linalg::symmetrize(&c.q)).collect();
    xi[horizon - 1] = terminal.iter().map(|c| c.l.clone()).collect();
    for i in 0..big_n {
        let r_ii = &lq.action_costs[i][i];
        let offset = if options.strict_paper {
            DVector::zeros(lq.action_dims[i])
        } else {
            r_ii.clone().lu().solve(&terminal[i].r[i]).ok_or(Error::Covariance { agent: i, t: horizon })?
        };
        policies.stages[horizon - 1][i] = StagePolicy {
            gain: DMatrix::zeros(lq.action_dims[i], n),
            offset,
            covariance: checked_covariance(r_ii, temperatures[i], i, horizon)?,
        };
    }

    for k in (0..horizon - 1).rev() {
        let t = k + 1;
        let transition = &lq.dynamics[k];
        let stage = solve_stage_coupled(
            t,
            &z[k + 1],
            &xi[k + 1],
            transition,
            &lq.costs[k],
            &lq.action_costs,
            options,
        )?;
        report.condition[k] = stage.condition;
        report.regularization[k] = stage.regularization;
        let (z_t, xi_t) = backward_value_update(
            &stage.gains,
            &stage.offsets,
            &z[k + 1],
            &xi[k + 1],
            transition,
            &lq.costs[k],
            &lq.action_costs,
            options,
        );
        if z_t.iter().any(|m| !linalg::is_finite_matrix(m)) || xi_t.iter().any(|v| !linalg::is_finite_vector(v)) {
            return Err(Error::NonFinite { what: "value recursion", t });
        }
        for i in 0..big_n {
            policies.stages[k][i] = StagePolicy {
                gain: stage.gains[i].clone(),
                offset: stage.offsets[i].clone(),
                covariance: checked_covariance(&stage.diagonal_blocks[i], temperatures[i], i, t)?,
            };
        }
        z[k] = z_t;
        xi[k] = xi_t;
    }

    Ok((policies, ValueRecursion { z, xi }, report))
}
