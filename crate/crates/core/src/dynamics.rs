//! Dynamics models: time-invariant linear, planar point masses, unicycles.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::game::DynamicsModel;

/// `s_{t+1} = A s_t + Σ_j B^j a_t^j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics {
    a: DMatrix<f64>,
    b: Vec<DMatrix<f64>>,
    action_dims: Vec<usize>,
}

impl LinearDynamics {
    pub fn new(a: DMatrix<f64>, b: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::shape("A must be square"));
        }
        if b.iter().any(|bj| bj.nrows() != n) {
            return Err(Error::shape("every B^j needs n rows"));
        }
        let action_dims = b.iter().map(|bj| bj.ncols()).collect();
        Ok(Self { a, b, action_dims })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &[DMatrix<f64>] {
        &self.b
    }
}

impl DynamicsModel for LinearDynamics {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn action_dims(&self) -> &[usize] {
        &self.action_dims
    }

    fn step(&self, _t: usize, s: &DVector<f64>, actions: &[DVector<f64>]) -> DVector<f64> {
        let mut next = &self.a * s;
        for (bj, aj) in self.b.iter().zip(actions) {
            next += bj * aj;
        }
        next
    }

    fn jacobians(
        &self,
        _t: usize,
        _s: &DVector<f64>,
        _actions: &[DVector<f64>],
    ) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        (self.a.clone(), self.b.clone())
    }
}

/// Independent double integrators. Agent `i` owns the state block
/// `[p^i (dims), v^i (dims)]` and accelerates with `a^i ∈ R^dims`:
/// `p' = p + dt·v`, `v' = v + dt·a`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMass {
    num_agents: usize,
    dims: usize,
    dt: f64,
    action_dims: Vec<usize>,
    inner: LinearDynamics,
}

impl PointMass {
    pub fn new(num_agents: usize, dims: usize, dt: f64) -> Result<Self> {
        if num_agents == 0 || dims == 0 || !(dt > 0.0) {
            return Err(Error::Config("point mass needs agents, dims > 0 and dt > 0".into()));
        }
        let block = 2 * dims;
        let n = num_agents * block;
        let mut a = DMatrix::identity(n, n);
        let mut b = Vec::with_capacity(num_agents);
        for i in 0..num_agents {
            let o = i * block;
            let mut bi = DMatrix::zeros(n, dims);
            for d in 0..dims {
                a[(o + d, o + dims + d)] = dt;
                bi[(o + dims + d, d)] = dt;
            }
            b.push(bi);
        }
        Ok(Self {
            num_agents,
            dims,
            dt,
            action_dims: vec![dims; num_agents],
            inner: LinearDynamics::new(a, b)?,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn position_indices(&self, agent: usize) -> Vec<usize> {
        let o = agent * 2 * self.dims;
        (o..o + self.dims).collect()
    }

    pub fn velocity_indices(&self, agent: usize) -> Vec<usize> {
        let o = agent * 2 * self.dims + self.dims;
        (o..o + self.dims).collect()
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }
}

impl DynamicsModel for PointMass {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    fn action_dims(&self) -> &[usize] {
        &self.action_dims
    }

    fn step(&self, t: usize, s: &DVector<f64>, actions: &[DVector<f64>]) -> DVector<f64> {
        self.inner.step(t, s, actions)
    }

    fn jacobians(
        &self,
        t: usize,
        s: &DVector<f64>,
        actions: &[DVector<f64>],
    ) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        self.inner.jacobians(t, s, actions)
    }
}

/// Euler-discretized unicycles: agent state `(x, y, θ)`, action `(v, ω)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Unicycle {
    num_agents: usize,
    dt: f64,
    action_dims: Vec<usize>,
}

impl Unicycle {
    pub fn new(num_agents: usize, dt: f64) -> Result<Self> {
        if num_agents == 0 || !(dt > 0.0) {
            return Err(Error::Config("unicycle needs agents and dt > 0".into()));
        }
        Ok(Self { num_agents, dt, action_dims: vec![2; num_agents] })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn position_indices(&self, agent: usize) -> Vec<usize> {
        vec![3 * agent, 3 * agent + 1]
    }
}

impl DynamicsModel for Unicycle {
    fn state_dim(&self) -> usize {
        3 * self.num_agents
    }

    fn action_dims(&self) -> &[usize] {
        &self.action_dims
    }

    fn step(&self, _t: usize, s: &DVector<f64>, actions: &[DVector<f64>]) -> DVector<f64> {
        let mut next = s.clone();
        for (i, a) in actions.iter().enumerate() {
            let o = 3 * i;
            let theta = s[o + 2];
            next[o] += self.dt * a[0] * theta.cos();
            next[o + 1] += self.dt * a[0] * theta.sin();
            next[o + 2] += self.dt * a[1];
        }
        next
    }

    fn jacobians(
        &self,
        _t: usize,
        s: &DVector<f64>,
        actions: &[DVector<f64>],
    ) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let n = self.state_dim();
        let mut a_mat = DMatrix::identity(n, n);
        let mut bs = Vec::with_capacity(self.num_agents);
        for (i, a) in actions.iter().enumerate() {
            let o = 3 * i;
            let (sin, cos) = s[o + 2].sin_cos();
            a_mat[(o, o + 2)] = -self.dt * a[0] * sin;
            a_mat[(o + 1, o + 2)] = self.dt * a[0] * cos;
            let mut b = DMatrix::zeros(n, 2);
            b[(o, 0)] = self.dt * cos;
            b[(o + 1, 0)] = self.dt * sin;
            b[(o + 2, 1)] = self.dt;
            bs.push(b);
        }
        (a_mat, bs)
    }
}
