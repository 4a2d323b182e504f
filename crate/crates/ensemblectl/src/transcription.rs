//! Transcription of ensemble optimal control problems into nonlinear
//! programs.
//!
//! States are interpolated on an LGL time grid and sampled on a tensor
//! product of LGL parameter grids. The dynamics are collocated at every
//! (time node, parameter sample) pair, the cost integrals are replaced by
//! Gauss-Lobatto quadrature, and the result is a dense decision vector
//! with structured objective, equality, and inequality evaluators exposing
//! analytic gradients and Jacobian-transpose products.

use crate::solver::SolveReport;
use crate::spectral::{self, SpectralError};
use crate::{AffineMap, LglGrid};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TranscriptionError {
    #[error("time order must be at least 2, got {0}")]
    TimeOrderTooSmall(usize),
    #[error("expected {expected} parameter orders, got {got}")]
    ParamOrderMismatch { expected: usize, got: usize },
    #[error("parameter order must be at least 1, got {0}")]
    ParamOrderTooSmall(usize),
    #[error("decision vector has length {got}, expected {expected}")]
    DecisionLength { expected: usize, got: usize },
    #[error("non-finite {what} evaluation at the supplied point")]
    NonFinite { what: &'static str },
    #[error("state simulation blew up while building the initial guess")]
    GuessBlowUp,
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

/// Dynamics callback: writes F(t, s, x, u) into `out`.
pub type DynamicsFn = Arc<dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Optional analytic dynamics Jacobians: writes ∂F/∂x (n×n, row-major) and
/// ∂F/∂u (n×m, row-major).
pub type DynamicsJacFn =
    Arc<dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64], &mut [f64]) + Send + Sync>;
/// Initial state x_0(s), written into `out`.
pub type InitialStateFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Terminal cost φ(T, x(T, s)).
pub type TerminalCostFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// Running cost placement. A control-only cost is shared across the
/// ensemble and integrated over time alone; a state-dependent cost is in
/// addition integrated over the parameter box.
#[derive(Clone)]
pub enum RunningCost {
    None,
    ControlOnly(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
    StateDependent(Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>),
}

/// Vector-valued constraint with a declared residual count.
#[derive(Clone)]
pub struct ConstraintFn {
    pub count: usize,
    pub eval: Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Horizon {
    Fixed(f64),
    Free { min: f64, max: f64 },
}

/// Full description of an ensemble optimal control problem.
#[derive(Clone)]
pub struct EnsembleProblem {
    pub state_dim: usize,
    pub control_dim: usize,
    /// Closed parameter intervals; empty means a single system.
    pub param_dims: Vec<(f64, f64)>,
    pub dynamics: DynamicsFn,
    pub dynamics_jacobian: Option<DynamicsJacFn>,
    pub initial_state: InitialStateFn,
    pub terminal_cost: TerminalCostFn,
    pub running_cost: RunningCost,
    /// e(x(0,s), x(T,s)) = 0, imposed at every parameter sample.
    pub endpoint_constraints: Option<ConstraintFn>,
    /// g(x, u) ≤ 0 at every (time node, parameter sample).
    pub path_constraints: Option<ConstraintFn>,
    /// Maximum control norm A.
    pub control_bound: f64,
    pub horizon: Horizon,
}

/// Collocation grid: an LGL time grid plus a tensor-product parameter grid.
#[derive(Debug, Clone)]
pub struct CollocationGrid {
    pub time: LglGrid,
    pub param_grids: Vec<LglGrid>,
    pub param_maps: Vec<AffineMap>,
    /// Flattened tensor of parameter samples; the last dimension varies
    /// fastest.
    pub param_samples: Vec<Vec<f64>>,
    /// Product quadrature weights matching `param_samples`.
    pub param_weights: Vec<f64>,
}

impl CollocationGrid {
    pub fn num_samples(&self) -> usize {
        self.param_samples.len().max(1)
    }

    pub fn time_order(&self) -> usize {
        self.time.order()
    }
}

/// Build the collocation grid for a problem: order-N time grid and LGL
/// parameter grids of the given orders.
pub fn build_grid(
    problem: &EnsembleProblem,
    n: usize,
    param_orders: &[usize],
) -> Result<CollocationGrid, TranscriptionError> {
    if n < 2 {
        return Err(TranscriptionError::TimeOrderTooSmall(n));
    }
    if param_orders.len() != problem.param_dims.len() {
        return Err(TranscriptionError::ParamOrderMismatch {
            expected: problem.param_dims.len(),
            got: param_orders.len(),
        });
    }
    let time = LglGrid::new(n)?;
    let mut param_grids = Vec::new();
    let mut param_maps = Vec::new();
    for (&order, &(a, b)) in param_orders.iter().zip(problem.param_dims.iter()) {
        if order < 1 {
            return Err(TranscriptionError::ParamOrderTooSmall(order));
        }
        param_grids.push(LglGrid::new(order)?);
        param_maps.push(AffineMap::new(a, b)?);
    }

    // Tensor product of nodes and weights, last dimension fastest.
    let mut param_samples = vec![Vec::new()];
    let mut param_weights = vec![1.0];
    for (grid, map) in param_grids.iter().zip(param_maps.iter()) {
        let mut next_samples = Vec::new();
        let mut next_weights = Vec::new();
        for (s, w) in param_samples.iter().zip(param_weights.iter()) {
            for (node, wk) in grid.nodes().iter().zip(grid.weights().iter()) {
                let mut sample = s.clone();
                sample.push(map.to_interval(*node));
                next_samples.push(sample);
                next_weights.push(w * wk * map.half_length());
            }
        }
        param_samples = next_samples;
        param_weights = next_weights;
    }

    Ok(CollocationGrid {
        time,
        param_grids,
        param_maps,
        param_samples,
        param_weights,
    })
}

/// Index map over the flat decision vector.
#[derive(Debug, Clone, Copy)]
pub struct NlpLayout {
    pub num_nodes: usize,
    pub num_samples: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    pub free_horizon: bool,
}

impl NlpLayout {
    #[inline]
    pub fn state(&self, node: usize, sample: usize, comp: usize) -> usize {
        (sample * self.num_nodes + node) * self.state_dim + comp
    }

    #[inline]
    pub fn state_block(&self, node: usize, sample: usize) -> std::ops::Range<usize> {
        let start = (sample * self.num_nodes + node) * self.state_dim;
        start..start + self.state_dim
    }

    #[inline]
    pub fn control_offset(&self) -> usize {
        self.num_samples * self.num_nodes * self.state_dim
    }

    #[inline]
    pub fn control(&self, node: usize, comp: usize) -> usize {
        self.control_offset() + node * self.control_dim + comp
    }

    #[inline]
    pub fn control_block(&self, node: usize) -> std::ops::Range<usize> {
        let start = self.control_offset() + node * self.control_dim;
        start..start + self.control_dim
    }

    pub fn num_vars(&self) -> usize {
        self.control_offset()
            + self.num_nodes * self.control_dim
            + usize::from(self.free_horizon)
    }

    pub fn horizon(&self) -> Option<usize> {
        self.free_horizon.then(|| self.num_vars() - 1)
    }
}

/// Interface the solver optimizes against. Evaluators must be pure in the
/// decision vector; all accumulation orders are fixed so repeated
/// evaluations are bitwise identical.
pub trait NlpProblem: Send + Sync {
    fn num_vars(&self) -> usize;
    fn objective(&self, z: &[f64]) -> f64;
    fn gradient(&self, z: &[f64], grad: &mut [f64]);
    fn num_eq(&self) -> usize;
    fn eq(&self, z: &[f64], out: &mut [f64]);
    /// Accumulate Jᵀy of the equality constraints into `out`.
    fn eq_jtv(&self, z: &[f64], y: &[f64], out: &mut [f64]);
    fn num_ineq(&self) -> usize;
    fn ineq(&self, z: &[f64], out: &mut [f64]);
    /// Accumulate Jᵀy of the inequality constraints into `out`.
    fn ineq_jtv(&self, z: &[f64], y: &[f64], out: &mut [f64]);
}

const FD_STEP: f64 = 1e-7;

/// The transcribed NLP for one ensemble problem.
pub struct Transcription {
    problem: EnsembleProblem,
    grid: CollocationGrid,
    layout: NlpLayout,
    /// Initial states per parameter sample.
    x0: Vec<Vec<f64>>,
    /// Impose x̄_0 = x_0(s) equalities (disabled for chained stages).
    impose_initial: bool,
}

/// Transcribe the problem on the given grid.
pub fn transcribe(
    problem: &EnsembleProblem,
    grid: &CollocationGrid,
) -> Result<Transcription, TranscriptionError> {
    Transcription::new(problem.clone(), grid.clone(), true)
}

impl Transcription {
    pub fn new(
        problem: EnsembleProblem,
        grid: CollocationGrid,
        impose_initial: bool,
    ) -> Result<Self, TranscriptionError> {
        let layout = NlpLayout {
            num_nodes: grid.time.num_nodes(),
            num_samples: grid.num_samples(),
            state_dim: problem.state_dim,
            control_dim: problem.control_dim,
            free_horizon: matches!(problem.horizon, Horizon::Free { .. }),
        };
        let mut x0 = Vec::with_capacity(layout.num_samples);
        for j in 0..layout.num_samples {
            let mut x = vec![0.0; problem.state_dim];
            (problem.initial_state)(sample_or_empty(&grid, j), &mut x);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(TranscriptionError::NonFinite {
                    what: "initial state",
                });
            }
            x0.push(x);
        }
        Ok(Self {
            problem,
            grid,
            layout,
            x0,
            impose_initial,
        })
    }

    pub fn layout(&self) -> &NlpLayout {
        &self.layout
    }

    pub fn grid(&self) -> &CollocationGrid {
        &self.grid
    }

    pub fn problem(&self) -> &EnsembleProblem {
        &self.problem
    }

    pub fn horizon_value(&self, z: &[f64]) -> f64 {
        match self.problem.horizon {
            Horizon::Fixed(t) => t,
            Horizon::Free { .. } => z[self.layout.num_vars() - 1],
        }
    }

    /// Mapped time of node k for horizon T.
    #[inline]
    pub fn node_time(&self, k: usize, t_final: f64) -> f64 {
        (self.grid.time.nodes()[k] + 1.0) * 0.5 * t_final
    }

    fn endpoint_count(&self) -> usize {
        self.problem
            .endpoint_constraints
            .as_ref()
            .map_or(0, |c| c.count)
    }

    fn path_count(&self) -> usize {
        self.problem
            .path_constraints
            .as_ref()
            .map_or(0, |c| c.count)
    }

    fn colloc_rows(&self) -> usize {
        self.layout.num_samples * self.layout.num_nodes * self.layout.state_dim
    }

    fn initial_rows(&self) -> usize {
        if self.impose_initial {
            self.layout.num_samples * self.layout.state_dim
        } else {
            0
        }
    }

    /// Dynamics at one (node, sample) point.
    fn dyn_at(&self, z: &[f64], node: usize, sample: usize, t_final: f64, out: &mut [f64]) {
        let t = self.node_time(node, t_final);
        let s = sample_or_empty(&self.grid, sample);
        let x = &z[self.layout.state_block(node, sample)];
        let u = &z[self.layout.control_block(node)];
        (self.problem.dynamics)(t, s, x, u, out);
    }

    fn dyn_jac_at(
        &self,
        z: &[f64],
        node: usize,
        sample: usize,
        t_final: f64,
        jx: &mut [f64],
        ju: &mut [f64],
    ) {
        let n = self.layout.state_dim;
        let m = self.layout.control_dim;
        let t = self.node_time(node, t_final);
        let s = sample_or_empty(&self.grid, sample);
        let x = &z[self.layout.state_block(node, sample)];
        let u = &z[self.layout.control_block(node)];
        if let Some(jac) = &self.problem.dynamics_jacobian {
            jac(t, s, x, u, jx, ju);
            return;
        }
        // Finite-difference fallback on the (small) dynamics callback.
        let mut xp = x.to_vec();
        let mut up = u.to_vec();
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        for c in 0..n {
            let h = FD_STEP * (1.0 + x[c].abs());
            xp[c] = x[c] + h;
            (self.problem.dynamics)(t, s, &xp, u, &mut fp);
            xp[c] = x[c] - h;
            (self.problem.dynamics)(t, s, &xp, u, &mut fm);
            xp[c] = x[c];
            for r in 0..n {
                jx[r * n + c] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        for e in 0..m {
            let h = FD_STEP * (1.0 + u[e].abs());
            up[e] = u[e] + h;
            (self.problem.dynamics)(t, s, x, &up, &mut fp);
            up[e] = u[e] - h;
            (self.problem.dynamics)(t, s, x, &up, &mut fm);
            up[e] = u[e];
            for r in 0..n {
                ju[r * m + e] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
    }

    /// Time-derivative of the dynamics, needed for free-horizon rows.
    fn dyn_dt_at(&self, z: &[f64], node: usize, sample: usize, t_final: f64, out: &mut [f64]) {
        let n = self.layout.state_dim;
        let t = self.node_time(node, t_final);
        let s = sample_or_empty(&self.grid, sample);
        let x = &z[self.layout.state_block(node, sample)];
        let u = &z[self.layout.control_block(node)];
        let h = FD_STEP * (1.0 + t.abs());
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        (self.problem.dynamics)(t + h, s, x, u, &mut fp);
        (self.problem.dynamics)(t - h, s, x, u, &mut fm);
        for r in 0..n {
            out[r] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }

    /// Verify all user callbacks are finite at the given point.
    pub fn check_finite_at(&self, z: &[f64]) -> Result<(), TranscriptionError> {
        if z.len() != self.layout.num_vars() {
            return Err(TranscriptionError::DecisionLength {
                expected: self.layout.num_vars(),
                got: z.len(),
            });
        }
        if !self.objective(z).is_finite() {
            return Err(TranscriptionError::NonFinite { what: "objective" });
        }
        let mut eq = vec![0.0; self.num_eq()];
        self.eq(z, &mut eq);
        if eq.iter().any(|v| !v.is_finite()) {
            return Err(TranscriptionError::NonFinite {
                what: "equality constraint",
            });
        }
        let mut ineq = vec![0.0; self.num_ineq()];
        self.ineq(z, &mut ineq);
        if ineq.iter().any(|v| !v.is_finite()) {
            return Err(TranscriptionError::NonFinite {
                what: "inequality constraint",
            });
        }
        Ok(())
    }

    /// Discrete ‖D x̄ − (T/2) f‖_N residual per parameter sample (the
    /// diagnostic form of the relaxed-dynamics bound), maximum over samples.
    pub fn dynamics_residual(&self, z: &[f64]) -> f64 {
        let mut eq = vec![0.0; self.num_eq()];
        self.eq(z, &mut eq);
        let l = &self.layout;
        let w = self.grid.time.weights();
        let mut worst: f64 = 0.0;
        for j in 0..l.num_samples {
            let mut acc = 0.0;
            for i in 0..l.num_nodes {
                for c in 0..l.state_dim {
                    let r = eq[(j * l.num_nodes + i) * l.state_dim + c] / w[i];
                    acc += r * r * w[i];
                }
            }
            worst = worst.max(acc.sqrt());
        }
        worst
    }

    /// Unpack a decision vector into a pulse solution with interpolants and
    /// diagnostics. Node controls are projected onto the amplitude ball.
    pub fn extract_solution(&self, z: &[f64], report: Option<SolveReport>) -> PulseSolution {
        let l = self.layout;
        let t_final = self.horizon_value(z);
        let a = self.problem.control_bound;
        let mut controls = Vec::with_capacity(l.num_nodes);
        for k in 0..l.num_nodes {
            let mut u = z[l.control_block(k)].to_vec();
            let norm = u.iter().map(|c| c * c).sum::<f64>().sqrt();
            if norm > a {
                for c in u.iter_mut() {
                    *c *= a / norm;
                }
            }
            controls.push(u);
        }
        let mut zc = z.to_vec();
        for k in 0..l.num_nodes {
            zc[l.control_block(k)].copy_from_slice(&controls[k]);
        }

        let objective_value = self.objective(&zc);
        let terminal_cost = self.terminal_term(&zc);
        let running_cost = objective_value - terminal_cost;
        let dynamics_residual = self.dynamics_residual(&zc);

        let states_len = l.num_samples * l.num_nodes * l.state_dim;
        PulseSolution {
            layout: l,
            time_grid: self.grid.time.clone(),
            param_samples: self.grid.param_samples.clone(),
            horizon: t_final,
            times: (0..l.num_nodes)
                .map(|k| self.node_time(k, t_final))
                .collect(),
            controls,
            states: zc[..states_len].to_vec(),
            objective_value,
            terminal_cost,
            running_cost,
            dynamics_residual,
            solver_stats: report,
        }
    }

    fn terminal_term(&self, z: &[f64]) -> f64 {
        let l = &self.layout;
        let t_final = self.horizon_value(z);
        let mut acc = 0.0;
        for j in 0..l.num_samples {
            let x = &z[l.state_block(l.num_nodes - 1, j)];
            acc += self.param_weight(j) * (self.problem.terminal_cost)(t_final, x);
        }
        acc
    }

    #[inline]
    fn param_weight(&self, j: usize) -> f64 {
        if self.grid.param_weights.is_empty() {
            1.0
        } else {
            self.grid.param_weights[j]
        }
    }
}

fn sample_or_empty(grid: &CollocationGrid, j: usize) -> &[f64] {
    grid.param_samples.get(j).map_or(&[], |s| s.as_slice())
}

impl NlpProblem for Transcription {
    fn num_vars(&self) -> usize {
        self.layout.num_vars()
    }

    fn objective(&self, z: &[f64]) -> f64 {
        let l = &self.layout;
        let t_final = self.horizon_value(z);
        let mut acc = self.terminal_term(z);
        let tw = self.grid.time.weights();
        match &self.problem.running_cost {
            RunningCost::None => {}
            RunningCost::ControlOnly(cost) => {
                let mut run = 0.0;
                for i in 0..l.num_nodes {
                    run += tw[i] * cost(&z[l.control_block(i)]);
                }
                acc += 0.5 * t_final * run;
            }
            RunningCost::StateDependent(cost) => {
                for j in 0..l.num_samples {
                    let mut run = 0.0;
                    for i in 0..l.num_nodes {
                        run += tw[i] * cost(&z[l.state_block(i, j)], &z[l.control_block(i)]);
                    }
                    acc += self.param_weight(j) * 0.5 * t_final * run;
                }
            }
        }
        acc
    }

    fn gradient(&self, z: &[f64], grad: &mut [f64]) {
        let l = self.layout;
        let n = l.state_dim;
        let t_final = self.horizon_value(z);
        grad.fill(0.0);

        // Terminal cost: FD over the (small) terminal state per sample.
        let phi = &self.problem.terminal_cost;
        for j in 0..l.num_samples {
            let wj = self.param_weight(j);
            let block = l.state_block(l.num_nodes - 1, j);
            let x = &z[block.clone()];
            let mut xp = x.to_vec();
            for c in 0..n {
                let h = FD_STEP * (1.0 + x[c].abs());
                xp[c] = x[c] + h;
                let fp = phi(t_final, &xp);
                xp[c] = x[c] - h;
                let fm = phi(t_final, &xp);
                xp[c] = x[c];
                grad[block.start + c] += wj * (fp - fm) / (2.0 * h);
            }
            if let Some(ti) = l.horizon() {
                let h = FD_STEP * (1.0 + t_final.abs());
                grad[ti] += wj * (phi(t_final + h, x) - phi(t_final - h, x)) / (2.0 * h);
            }
        }

        let tw = self.grid.time.weights();
        match &self.problem.running_cost {
            RunningCost::None => {}
            RunningCost::ControlOnly(cost) => {
                let m = l.control_dim;
                let mut total = 0.0;
                for i in 0..l.num_nodes {
                    let block = l.control_block(i);
                    let u = &z[block.clone()];
                    let base = cost(u);
                    total += tw[i] * base;
                    let mut up = u.to_vec();
                    for e in 0..m {
                        let h = FD_STEP * (1.0 + u[e].abs());
                        up[e] = u[e] + h;
                        let fp = cost(&up);
                        up[e] = u[e] - h;
                        let fm = cost(&up);
                        up[e] = u[e];
                        grad[block.start + e] += 0.5 * t_final * tw[i] * (fp - fm) / (2.0 * h);
                    }
                }
                if let Some(ti) = l.horizon() {
                    grad[ti] += 0.5 * total;
                }
            }
            RunningCost::StateDependent(cost) => {
                let m = l.control_dim;
                for j in 0..l.num_samples {
                    let wj = self.param_weight(j);
                    for i in 0..l.num_nodes {
                        let xb = l.state_block(i, j);
                        let ub = l.control_block(i);
                        let x = &z[xb.clone()];
                        let u = &z[ub.clone()];
                        let scale = wj * 0.5 * t_final * tw[i];
                        let mut xp = x.to_vec();
                        for c in 0..n {
                            let h = FD_STEP * (1.0 + x[c].abs());
                            xp[c] = x[c] + h;
                            let fp = cost(&xp, u);
                            xp[c] = x[c] - h;
                            let fm = cost(&xp, u);
                            xp[c] = x[c];
                            grad[xb.start + c] += scale * (fp - fm) / (2.0 * h);
                        }
                        let mut up = u.to_vec();
                        for e in 0..m {
                            let h = FD_STEP * (1.0 + u[e].abs());
                            up[e] = u[e] + h;
                            let fp = cost(x, &up);
                            up[e] = u[e] - h;
                            let fm = cost(x, &up);
                            up[e] = u[e];
                            grad[ub.start + e] += scale * (fp - fm) / (2.0 * h);
                        }
                        if let Some(ti) = l.horizon() {
                            grad[ti] += wj * 0.5 * tw[i] * cost(x, u);
                        }
                    }
                }
            }
        }
    }

    fn num_eq(&self) -> usize {
        self.colloc_rows() + self.initial_rows() + self.layout.num_samples * self.endpoint_count()
    }

    fn eq(&self, z: &[f64], out: &mut [f64]) {
        let l = self.layout;
        let n = l.state_dim;
        let n1 = l.num_nodes;
        let t_final = self.horizon_value(z);
        let half_t = 0.5 * t_final;

        // Collocation residuals w_i (D x̄ − (T/2) F) at every (node, sample);
        // the quadrature-weight scaling keeps the constraint Jacobian O(1)
        // in the time order, which the quasi-Newton inner solver needs.
        let tw = self.grid.time.weights();
        let mut f = vec![0.0; n];
        for j in 0..l.num_samples {
            let base = j * n1 * n;
            let states = &z[base..base + n1 * n];
            for i in 0..n1 {
                let row = self.grid.time.diff_row(i);
                let out_row = &mut out[base + i * n..base + (i + 1) * n];
                for c in 0..n {
                    let mut acc = 0.0;
                    for k in 0..n1 {
                        acc += row[k] * states[k * n + c];
                    }
                    out_row[c] = acc;
                }
                self.dyn_at(z, i, j, t_final, &mut f);
                for c in 0..n {
                    out_row[c] = tw[i] * (out_row[c] - half_t * f[c]);
                }
            }
        }

        let mut row = self.colloc_rows();
        if self.impose_initial {
            for j in 0..l.num_samples {
                let x = &z[l.state_block(0, j)];
                for c in 0..n {
                    out[row] = x[c] - self.x0[j][c];
                    row += 1;
                }
            }
        }
        if let Some(ep) = &self.problem.endpoint_constraints {
            for j in 0..l.num_samples {
                let x0 = &z[l.state_block(0, j)];
                let xt = &z[l.state_block(n1 - 1, j)];
                (ep.eval)(x0, xt, &mut out[row..row + ep.count]);
                row += ep.count;
            }
        }
    }

    fn eq_jtv(&self, z: &[f64], y: &[f64], out: &mut [f64]) {
        let l = self.layout;
        let n = l.state_dim;
        let m = l.control_dim;
        let n1 = l.num_nodes;
        let t_final = self.horizon_value(z);
        let half_t = 0.5 * t_final;
        let mut jx = vec![0.0; n * n];
        let mut ju = vec![0.0; n * m];
        let mut f = vec![0.0; n];
        let mut df_dt = vec![0.0; n];

        // Collocation multipliers scaled by the row weights, matching `eq`.
        let tw = self.grid.time.weights();
        let mut ys = vec![0.0; self.colloc_rows()];
        for j in 0..l.num_samples {
            let base = j * n1 * n;
            for i in 0..n1 {
                for c in 0..n {
                    ys[base + i * n + c] = tw[i] * y[base + i * n + c];
                }
            }
        }
        let y_colloc = &ys;

        for j in 0..l.num_samples {
            let base = j * n1 * n;
            // Dᵀ part: out[x(k,j,c)] += Σ_i D_ik w_i y[row(i,j,c)].
            for k in 0..n1 {
                for i in 0..n1 {
                    let d = self.grid.time.diff_entry(i, k);
                    for c in 0..n {
                        out[base + k * n + c] += d * y_colloc[base + i * n + c];
                    }
                }
            }
            // Dynamics Jacobian parts.
            for i in 0..n1 {
                self.dyn_jac_at(z, i, j, t_final, &mut jx, &mut ju);
                let yrow = &y_colloc[base + i * n..base + (i + 1) * n];
                for d in 0..n {
                    let mut acc = 0.0;
                    for c in 0..n {
                        acc += jx[c * n + d] * yrow[c];
                    }
                    out[base + i * n + d] -= half_t * acc;
                }
                for e in 0..m {
                    let mut acc = 0.0;
                    for c in 0..n {
                        acc += ju[c * m + e] * yrow[c];
                    }
                    out[l.control(i, e)] -= half_t * acc;
                }
                if let Some(ti) = l.horizon() {
                    self.dyn_at(z, i, j, t_final, &mut f);
                    self.dyn_dt_at(z, i, j, t_final, &mut df_dt);
                    let dt_dtf = 0.5 * (self.grid.time.nodes()[i] + 1.0);
                    let mut acc = 0.0;
                    for c in 0..n {
                        acc += yrow[c] * (-0.5 * f[c] - half_t * df_dt[c] * dt_dtf);
                    }
                    out[ti] += acc;
                }
            }
        }

        let mut row = self.colloc_rows();
        if self.impose_initial {
            for j in 0..l.num_samples {
                for c in 0..n {
                    out[l.state(0, j, c)] += y[row];
                    row += 1;
                }
            }
        }
        if let Some(ep) = &self.problem.endpoint_constraints {
            let mut rp = vec![0.0; ep.count];
            let mut rm = vec![0.0; ep.count];
            for j in 0..l.num_samples {
                let b0 = l.state_block(0, j);
                let bt = l.state_block(n1 - 1, j);
                let x0 = z[b0.clone()].to_vec();
                let xt = z[bt.clone()].to_vec();
                let mut x0p = x0.clone();
                let mut xtp = xt.clone();
                for c in 0..n {
                    let h = FD_STEP * (1.0 + x0[c].abs());
                    x0p[c] = x0[c] + h;
                    (ep.eval)(&x0p, &xt, &mut rp);
                    x0p[c] = x0[c] - h;
                    (ep.eval)(&x0p, &xt, &mut rm);
                    x0p[c] = x0[c];
                    let mut acc = 0.0;
                    for q in 0..ep.count {
                        acc += y[row + q] * (rp[q] - rm[q]) / (2.0 * h);
                    }
                    out[b0.start + c] += acc;
                }
                for c in 0..n {
                    let h = FD_STEP * (1.0 + xt[c].abs());
                    xtp[c] = xt[c] + h;
                    (ep.eval)(&x0, &xtp, &mut rp);
                    xtp[c] = xt[c] - h;
                    (ep.eval)(&x0, &xtp, &mut rm);
                    xtp[c] = xt[c];
                    let mut acc = 0.0;
                    for q in 0..ep.count {
                        acc += y[row + q] * (rp[q] - rm[q]) / (2.0 * h);
                    }
                    out[bt.start + c] += acc;
                }
                row += ep.count;
            }
        }
    }

    fn num_ineq(&self) -> usize {
        let l = &self.layout;
        l.num_nodes
            + l.num_samples * l.num_nodes * self.path_count()
            + if l.free_horizon { 2 } else { 0 }
    }

    fn ineq(&self, z: &[f64], out: &mut [f64]) {
        let l = self.layout;
        let a2 = self.problem.control_bound * self.problem.control_bound;
        let mut row = 0;
        for i in 0..l.num_nodes {
            let u = &z[l.control_block(i)];
            out[row] = u.iter().map(|c| c * c).sum::<f64>() - a2;
            row += 1;
        }
        if let Some(pc) = &self.problem.path_constraints {
            for j in 0..l.num_samples {
                for i in 0..l.num_nodes {
                    let x = &z[l.state_block(i, j)];
                    let u = &z[l.control_block(i)];
                    (pc.eval)(x, u, &mut out[row..row + pc.count]);
                    row += pc.count;
                }
            }
        }
        if let Horizon::Free { min, max } = self.problem.horizon {
            let t = z[l.num_vars() - 1];
            out[row] = t - max;
            out[row + 1] = min - t;
        }
    }

    fn ineq_jtv(&self, z: &[f64], y: &[f64], out: &mut [f64]) {
        let l = self.layout;
        let n = l.state_dim;
        let m = l.control_dim;
        let mut row = 0;
        for i in 0..l.num_nodes {
            let block = l.control_block(i);
            for e in 0..m {
                out[block.start + e] += 2.0 * z[block.start + e] * y[row];
            }
            row += 1;
        }
        if let Some(pc) = &self.problem.path_constraints {
            let mut rp = vec![0.0; pc.count];
            let mut rm = vec![0.0; pc.count];
            for j in 0..l.num_samples {
                for i in 0..l.num_nodes {
                    let xb = l.state_block(i, j);
                    let ub = l.control_block(i);
                    let x = z[xb.clone()].to_vec();
                    let u = z[ub.clone()].to_vec();
                    let mut xp = x.clone();
                    for c in 0..n {
                        let h = FD_STEP * (1.0 + x[c].abs());
                        xp[c] = x[c] + h;
                        (pc.eval)(&xp, &u, &mut rp);
                        xp[c] = x[c] - h;
                        (pc.eval)(&xp, &u, &mut rm);
                        xp[c] = x[c];
                        let mut acc = 0.0;
                        for q in 0..pc.count {
                            acc += y[row + q] * (rp[q] - rm[q]) / (2.0 * h);
                        }
                        out[xb.start + c] += acc;
                    }
                    let mut up = u.clone();
                    for e in 0..m {
                        let h = FD_STEP * (1.0 + u[e].abs());
                        up[e] = u[e] + h;
                        (pc.eval)(&x, &up, &mut rp);
                        up[e] = u[e] - h;
                        (pc.eval)(&x, &up, &mut rm);
                        up[e] = u[e];
                        let mut acc = 0.0;
                        for q in 0..pc.count {
                            acc += y[row + q] * (rp[q] - rm[q]) / (2.0 * h);
                        }
                        out[ub.start + e] += acc;
                    }
                    row += pc.count;
                }
            }
        }
        if let Horizon::Free { .. } = self.problem.horizon {
            let ti = l.num_vars() - 1;
            out[ti] += y[row] - y[row + 1];
        }
    }
}

/// Initial-guess strategies for the decision vector.
pub enum GuessStrategy {
    /// u ≡ 0; states from forward RK4 under zero control.
    ZeroControls,
    /// States from forward RK4 under the supplied control interpolant.
    GivenControls(Arc<dyn Fn(f64) -> Vec<f64> + Send + Sync>),
    /// States linearly interpolating initial → target, controls zero.
    LinearState { target: Vec<f64> },
}

/// Build an initial decision vector for the transcription.
pub fn initial_guess(
    tr: &Transcription,
    strategy: &GuessStrategy,
) -> Result<Vec<f64>, TranscriptionError> {
    let l = *tr.layout();
    let mut z = vec![0.0; l.num_vars()];
    let t_final = match tr.problem().horizon {
        Horizon::Fixed(t) => t,
        Horizon::Free { min, max } => {
            let t = 0.5 * (min + max);
            z[l.num_vars() - 1] = t;
            t
        }
    };

    let controls: Arc<dyn Fn(f64) -> Vec<f64> + Send + Sync> = match strategy {
        GuessStrategy::ZeroControls | GuessStrategy::LinearState { .. } => {
            let m = l.control_dim;
            Arc::new(move |_t| vec![0.0; m])
        }
        GuessStrategy::GivenControls(f) => f.clone(),
    };
    for k in 0..l.num_nodes {
        let u = controls(tr.node_time(k, t_final));
        z[l.control_block(k)].copy_from_slice(&u);
    }

    match strategy {
        GuessStrategy::LinearState { target } => {
            for j in 0..l.num_samples {
                let x0 = &tr.x0[j];
                for k in 0..l.num_nodes {
                    let frac = (tr.grid().time.nodes()[k] + 1.0) * 0.5;
                    let block = l.state_block(k, j);
                    for c in 0..l.state_dim {
                        z[block.start + c] = x0[c] + frac * (target[c] - x0[c]);
                    }
                }
            }
        }
        _ => {
            // Forward RK4 through the node intervals, recording node states.
            let n = l.state_dim;
            let substeps = (2000 / l.num_nodes.max(1)).max(20);
            let mut f = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
            for j in 0..l.num_samples {
                let s = sample_or_empty(tr.grid(), j);
                let mut x = tr.x0[j].clone();
                z[l.state_block(0, j)].copy_from_slice(&x);
                for k in 1..l.num_nodes {
                    let t_a = tr.node_time(k - 1, t_final);
                    let t_b = tr.node_time(k, t_final);
                    let h = (t_b - t_a) / substeps as f64;
                    for step in 0..substeps {
                        let t = t_a + step as f64 * h;
                        let rhs = |t: f64, x: &[f64], out: &mut [f64]| {
                            let u = controls(t);
                            (tr.problem().dynamics)(t, s, x, &u, out);
                        };
                        let mut tmp = vec![0.0; n];
                        rhs(t, &x, &mut f[0]);
                        for c in 0..n {
                            tmp[c] = x[c] + 0.5 * h * f[0][c];
                        }
                        rhs(t + 0.5 * h, &tmp, &mut f[1]);
                        for c in 0..n {
                            tmp[c] = x[c] + 0.5 * h * f[1][c];
                        }
                        rhs(t + 0.5 * h, &tmp, &mut f[2]);
                        for c in 0..n {
                            tmp[c] = x[c] + h * f[2][c];
                        }
                        rhs(t + h, &tmp, &mut f[3]);
                        for c in 0..n {
                            x[c] += h / 6.0 * (f[0][c] + 2.0 * f[1][c] + 2.0 * f[2][c] + f[3][c]);
                        }
                    }
                    if x.iter().any(|v| !v.is_finite()) {
                        return Err(TranscriptionError::GuessBlowUp);
                    }
                    z[l.state_block(k, j)].copy_from_slice(&x);
                }
            }
        }
    }
    Ok(z)
}

/// Optimized pulse: node controls and states, interpolants, and solve
/// diagnostics.
#[derive(Debug, Clone)]
pub struct PulseSolution {
    pub layout: NlpLayout,
    time_grid: LglGrid,
    pub param_samples: Vec<Vec<f64>>,
    pub horizon: f64,
    /// Mapped node times on [0, T].
    pub times: Vec<f64>,
    /// (N+1)×m control samples at the nodes.
    pub controls: Vec<Vec<f64>>,
    /// Flat state tensor in layout order.
    pub states: Vec<f64>,
    pub objective_value: f64,
    pub terminal_cost: f64,
    pub running_cost: f64,
    /// max-over-samples discrete norm of the collocation residual.
    pub dynamics_residual: f64,
    pub solver_stats: Option<SolveReport>,
}

impl PulseSolution {
    /// Barycentric control interpolant at time t ∈ [0, T].
    pub fn control_at(&self, t: f64) -> Vec<f64> {
        let tau = 2.0 * t / self.horizon - 1.0;
        let tau = tau.clamp(-1.0, 1.0);
        (0..self.layout.control_dim)
            .map(|e| {
                let vals: Vec<f64> = self.controls.iter().map(|u| u[e]).collect();
                spectral::barycentric(&vals, &self.time_grid, tau)
            })
            .collect()
    }

    /// Barycentric state interpolant for a parameter sample.
    pub fn state_at(&self, t: f64, sample: usize) -> Vec<f64> {
        let l = &self.layout;
        let tau = (2.0 * t / self.horizon - 1.0).clamp(-1.0, 1.0);
        (0..l.state_dim)
            .map(|c| {
                let vals: Vec<f64> = (0..l.num_nodes)
                    .map(|k| self.states[l.state(k, sample, c)])
                    .collect();
                spectral::barycentric(&vals, &self.time_grid, tau)
            })
            .collect()
    }

    /// Node state block for (node, sample).
    pub fn state_block(&self, node: usize, sample: usize) -> &[f64] {
        &self.states[self.layout.state_block(node, sample)]
    }

    /// Node samples as (t, u, v) triples; only valid for 2-control pulses.
    pub fn node_samples(&self) -> Vec<(f64, f64, f64)> {
        assert_eq!(self.layout.control_dim, 2);
        self.times
            .iter()
            .zip(self.controls.iter())
            .map(|(&t, u)| (t, u[0], u[1]))
            .collect()
    }

    /// Control energy ∫‖u‖² dt by LGL quadrature of the node controls.
    pub fn energy(&self) -> f64 {
        let w = self.time_grid.weights();
        let sum: f64 = self
            .controls
            .iter()
            .zip(w.iter())
            .map(|(u, wi)| wi * u.iter().map(|c| c * c).sum::<f64>())
            .sum();
        0.5 * self.horizon * sum
    }

    /// Largest control norm of the interpolant on a uniform grid with
    /// `oversample` points per node.
    pub fn max_interpolated_amplitude(&self, oversample: usize) -> f64 {
        let count = self.layout.num_nodes * oversample.max(1);
        (0..=count)
            .map(|i| {
                let t = self.horizon * i as f64 / count as f64;
                self.control_at(t).iter().map(|c| c * c).sum::<f64>().sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Dimensionless pulse CSV: header `t,u,v`, 12 significant digits.
    pub fn to_pulse_csv(&self) -> String {
        let mut out = String::from("t,u,v\n");
        for (t, u, v) in self.node_samples() {
            out.push_str(&format!("{:.11e},{:.11e},{:.11e}\n", t, u, v));
        }
        out
    }
}
