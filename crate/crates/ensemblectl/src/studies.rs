//! The four pulse-design studies: robust inversion (broadband π pulse),
//! the three-stage initial-condition-robust sequence, π/2 pulses under a
//! time-varying frequency with three running-cost choices, and the
//! empirical convergence sweep over grid orders.
//!
//! Every reported score comes from the independent RK4 validator in
//! [`crate::bloch`]; collocation states are never used for scoring.

use crate::bloch::{self, BlochError, BlochParams};
use crate::solver::{self, SolveReport, SolveStatus, SolverConfig};
use crate::transcription::{
    self, build_grid, initial_guess, transcribe, EnsembleProblem, GuessStrategy,
    Horizon, NlpProblem, PulseSolution, RunningCost, Transcription, TranscriptionError,
};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::Arc;
use thiserror::Error;

/// Dimensionless broadband-inversion duration: 2π · 10 kHz · 120 µs.
pub const INVERSION_DURATION: f64 = 7.5398;

/// Solver settings sized for the study-scale collocation programs.
///
/// The library-wide [`SolverConfig::default`] targets small programs. The
/// studies transcribe to thousands of variables, where the first-order inner
/// minimizer needs a larger iteration budget, and max-norm feasibility below
/// ~1e-5 is not reachable in reasonable time (the augmented-Lagrangian outer
/// loop otherwise escalates the penalty without progress). The relaxed
/// tolerances stay three orders of magnitude below every reported score's
/// tolerance.
pub fn recommended_solver() -> SolverConfig {
    SolverConfig {
        feasibility_tol: 1e-5,
        optimality_tol: 1e-4,
        max_inner: 3000,
        ..SolverConfig::default()
    }
}

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("study spec invalid: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Bloch(#[from] BlochError),
    #[error(transparent)]
    Transcription(#[from] TranscriptionError),
    #[error("solver finished with status {status:?} (constraint violation {violation:.3e})")]
    SolverFailed {
        status: SolveStatus,
        violation: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyName {
    RobustPi,
    ThreeStage,
    TimeVarying,
    Convergence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreeStageMode {
    Concatenated,
    Simultaneous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostChoice {
    TerminalOnly,
    Energy,
    Time,
}

/// One stage of a pulse sequence: nominal initial state, target state, and
/// the fraction of the total duration it occupies.
#[derive(Debug, Clone, Serialize)]
pub struct Stage {
    pub initial: [f64; 3],
    pub target: [f64; 3],
    pub fraction: f64,
    /// Rotation angle about the x-axis used for the nominal initial guess.
    pub guess_angle: f64,
}

/// Sweep axes for the convergence study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sweep {
    pub time_orders: Vec<usize>,
    pub omega_orders: Vec<usize>,
}

#[derive(Clone)]
pub struct StudySpec {
    pub name: StudyName,
    pub bloch: BlochParams,
    /// (N, N_ω, N_ε) collocation orders.
    pub orders: (usize, usize, usize),
    /// (terminal_weight, energy_weight, time_weight).
    pub cost_weights: (f64, f64, f64),
    pub stages: Option<Vec<Stage>>,
    pub sweep: Option<Sweep>,
    /// Validation lattice sizes (ω points, ε points).
    pub validation_grid: (usize, usize),
    pub rk4_steps: usize,
}

impl StudySpec {
    /// Broadband inversion over ω ∈ [−1, 1], ε ∈ [0.9, 1.1].
    ///
    /// The energy weight is much smaller than the terminal weight: with the
    /// raw integrals weighted equally the pulse energy (order π²/T for a
    /// bare π rotation) dwarfs the reachable terminal improvement (at most
    /// 0.8 over the 0.4-area parameter box) and the zero pulse becomes
    /// optimal, so a small weight is needed for the reported inversion
    /// quality to be attainable.
    pub fn robust_pi() -> Self {
        Self {
            name: StudyName::RobustPi,
            bloch: BlochParams {
                b: 1.0,
                delta: 0.1,
                amplitude_bound: 2.0,
                duration: INVERSION_DURATION,
                frequency_profile: None,
            },
            orders: (32, 10, 4),
            cost_weights: (1.0, 0.001, 0.0),
            stages: None,
            sweep: None,
            validation_grid: (41, 9),
            rk4_steps: bloch::DEFAULT_RK4_STEPS,
        }
    }

    /// Three-stage z → y → −y → z sequence robust to frequency dispersion and
    /// to the initial-condition variation it induces at stage boundaries.
    pub fn three_stage() -> Self {
        Self {
            name: StudyName::ThreeStage,
            bloch: BlochParams {
                b: 1.0,
                delta: 0.0,
                amplitude_bound: 2.0,
                duration: 18.0,
                frequency_profile: None,
            },
            orders: (16, 8, 0),
            cost_weights: (1.0, 0.002, 0.0),
            stages: Some(vec![
                Stage {
                    initial: [0.0, 0.0, 1.0],
                    target: [0.0, 1.0, 0.0],
                    fraction: 1.0 / 3.0,
                    guess_angle: -FRAC_PI_2,
                },
                Stage {
                    initial: [0.0, 1.0, 0.0],
                    target: [0.0, -1.0, 0.0],
                    fraction: 1.0 / 3.0,
                    guess_angle: PI,
                },
                Stage {
                    initial: [0.0, -1.0, 0.0],
                    target: [0.0, 0.0, 1.0],
                    fraction: 1.0 / 3.0,
                    guess_angle: -FRAC_PI_2,
                },
            ]),
            sweep: None,
            validation_grid: (41, 1),
            rk4_steps: bloch::DEFAULT_RK4_STEPS,
        }
    }

    /// Single-system z → x transfer under ω(t) = sin(t), free
    /// horizon on [0.05, 1].
    pub fn time_varying() -> Self {
        Self {
            name: StudyName::TimeVarying,
            bloch: BlochParams {
                b: 0.0,
                delta: 0.0,
                amplitude_bound: 10.0,
                duration: 1.0,
                frequency_profile: Some(Arc::new(f64::sin)),
            },
            orders: (24, 0, 0),
            cost_weights: (1.0, 0.01, 0.1),
            stages: None,
            sweep: None,
            validation_grid: (1, 1),
            rk4_steps: bloch::DEFAULT_RK4_STEPS,
        }
    }

    /// Convergence sweep: π/2 transfer M(0,ω,1) = z → M(T,ω,1) = x with
    /// B = 1, T = 4, swept over time and frequency grid orders.
    ///
    /// The amplitude bound is deliberately tight (time-bandwidth barely
    /// sufficient for a broadband π/2): with generous control authority
    /// even the coarsest grids reach near-unity transfer and the sweep
    /// shows nothing but optimizer noise.
    pub fn convergence() -> Self {
        Self {
            name: StudyName::Convergence,
            bloch: BlochParams {
                b: 1.0,
                delta: 0.0,
                amplitude_bound: 2.0,
                duration: 4.0,
                frequency_profile: None,
            },
            orders: (32, 8, 0),
            // Small energy weight: keeps the per-cell optimum unique so the
            // sweep compares resolutions rather than arbitrary minimizers.
            cost_weights: (1.0, 1e-3, 0.0),
            stages: None,
            sweep: Some(Sweep {
                time_orders: vec![8, 16, 24, 32, 40],
                omega_orders: vec![2, 4, 8, 12],
            }),
            validation_grid: (41, 1),
            rk4_steps: bloch::DEFAULT_RK4_STEPS,
        }
    }

    pub fn validate(&self) -> Result<(), StudyError> {
        self.bloch.validate()?;
        if self.orders.0 < 2 {
            return Err(StudyError::InvalidSpec(format!(
                "orders.N must be at least 2, got {}",
                self.orders.0
            )));
        }
        let (wt, we, wti) = self.cost_weights;
        if wt < 0.0 || we < 0.0 || wti < 0.0 {
            return Err(StudyError::InvalidSpec(
                "cost_weights must be non-negative".into(),
            ));
        }
        if wt == 0.0 && we == 0.0 && wti == 0.0 {
            return Err(StudyError::InvalidSpec(
                "cost_weights must not all be zero".into(),
            ));
        }
        if self.bloch.b > 0.0 && self.orders.1 < 1 {
            return Err(StudyError::InvalidSpec(
                "orders.N_omega must be at least 1 when B > 0".into(),
            ));
        }
        if self.bloch.delta > 0.0 && self.orders.2 < 1 {
            return Err(StudyError::InvalidSpec(
                "orders.N_epsilon must be at least 1 when delta > 0".into(),
            ));
        }
        if let Some(stages) = &self.stages {
            if stages.is_empty() {
                return Err(StudyError::InvalidSpec("stages must be nonempty".into()));
            }
            let total: f64 = stages.iter().map(|s| s.fraction).sum();
            if stages.iter().any(|s| s.fraction <= 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(StudyError::InvalidSpec(
                    "stage fractions must be positive and sum to 1".into(),
                ));
            }
        }
        if self.name == StudyName::Convergence {
            let sweep = self
                .sweep
                .as_ref()
                .ok_or_else(|| StudyError::InvalidSpec("convergence requires a sweep".into()))?;
            if sweep.time_orders.is_empty() || sweep.omega_orders.is_empty() {
                return Err(StudyError::InvalidSpec("sweep lists must be nonempty".into()));
            }
            if sweep.time_orders.iter().any(|&n| n < 2) {
                return Err(StudyError::InvalidSpec("sweep N values must be ≥ 2".into()));
            }
            if sweep.omega_orders.iter().any(|&n| n < 1) {
                return Err(StudyError::InvalidSpec(
                    "sweep N_omega values must be ≥ 1".into(),
                ));
            }
        }
        Ok(())
    }

    /// Parameter orders matching the parameter dimensions implied by
    /// (B, δ): [N_ω]? ++ [N_ε]?.
    fn param_orders(&self) -> Vec<usize> {
        let mut orders = Vec::new();
        if self.bloch.b > 0.0 {
            orders.push(self.orders.1);
        }
        if self.bloch.delta > 0.0 {
            orders.push(self.orders.2);
        }
        orders
    }

    /// Validation lattice must be strictly denser per parameter dimension
    /// than the collocation grid.
    fn check_validation_density(&self) -> Result<(), StudyError> {
        if self.bloch.b > 0.0 && self.validation_grid.0 <= self.orders.1 + 1 {
            return Err(StudyError::InvalidSpec(format!(
                "validation grid ({} omega points) must be denser than the \
                 collocation grid ({} nodes)",
                self.validation_grid.0,
                self.orders.1 + 1
            )));
        }
        if self.bloch.delta > 0.0 && self.validation_grid.1 <= self.orders.2 + 1 {
            return Err(StudyError::InvalidSpec(format!(
                "validation grid ({} epsilon points) must be denser than the \
                 collocation grid ({} nodes)",
                self.validation_grid.1,
                self.orders.2 + 1
            )));
        }
        Ok(())
    }

    /// Declarative echo of the spec for the run manifest.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::json!({
            "name": self.name,
            "bloch": {
                "b": self.bloch.b,
                "delta": self.bloch.delta,
                "amplitude_bound": self.bloch.amplitude_bound,
                "duration": self.bloch.duration,
                "time_varying_frequency": self.bloch.frequency_profile.is_some(),
            },
            "orders": { "n": self.orders.0, "n_omega": self.orders.1, "n_epsilon": self.orders.2 },
            "cost_weights": {
                "terminal": self.cost_weights.0,
                "energy": self.cost_weights.1,
                "time": self.cost_weights.2,
            },
            "stages": self.stages,
            "sweep": self.sweep,
            "validation_grid": { "omega": self.validation_grid.0, "epsilon": self.validation_grid.1 },
            "rk4_steps": self.rk4_steps,
        })
    }
}

/// Scores of a pulse on a dense (ω, ε) validation lattice. The score of a
/// lattice point is the dot product of the RK4 terminal state with the
/// target unit vector.
#[derive(Debug, Clone, Serialize)]
pub struct RobustnessReport {
    pub omegas: Vec<f64>,
    pub epsilons: Vec<f64>,
    /// Row-major over (ω, ε).
    pub scores: Vec<f64>,
    pub average: f64,
    pub worst: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl RobustnessReport {
    fn from_finals(
        omegas: Vec<f64>,
        epsilons: Vec<f64>,
        finals: &[[f64; 3]],
        target: [f64; 3],
        threshold: f64,
    ) -> Self {
        let scores: Vec<f64> = finals
            .iter()
            .map(|m| m[0] * target[0] + m[1] * target[1] + m[2] * target[2])
            .collect();
        let average = scores.iter().sum::<f64>() / scores.len() as f64;
        let worst = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let passed = average >= threshold;
        Self {
            omegas,
            epsilons,
            scores,
            average,
            worst,
            threshold,
            passed,
        }
    }

    /// CSV with header `omega,epsilon,score`, 12 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("omega,epsilon,score\n");
        for (i, &omega) in self.omegas.iter().enumerate() {
            for (k, &eps) in self.epsilons.iter().enumerate() {
                let score = self.scores[i * self.epsilons.len() + k];
                out.push_str(&format!("{:.11e},{:.11e},{:.11e}\n", omega, eps, score));
            }
        }
        out
    }
}

/// One cell of the convergence sweep; `avg_mx` is None when the solve
/// failed.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceCell {
    pub time_order: usize,
    pub omega_order: usize,
    pub avg_mx: Option<f64>,
}

/// CSV with header `N,N_omega,avg_Mx`; failed cells serialize as `nan`.
pub fn convergence_csv(cells: &[ConvergenceCell]) -> String {
    let mut out = String::from("N,N_omega,avg_Mx\n");
    for cell in cells {
        match cell.avg_mx {
            Some(v) => out.push_str(&format!(
                "{},{},{:.11e}\n",
                cell.time_order, cell.omega_order, v
            )),
            None => out.push_str(&format!("{},{},nan\n", cell.time_order, cell.omega_order)),
        }
    }
    out
}

fn linspace(a: f64, b: f64, count: usize) -> Vec<f64> {
    if count <= 1 || a == b {
        return vec![0.5 * (a + b)];
    }
    (0..count)
        .map(|i| a + (b - a) * i as f64 / (count - 1) as f64)
        .collect()
}

/// Validation lattice axes for the parameters of `params`.
fn validation_axes(params: &BlochParams, grid: (usize, usize)) -> (Vec<f64>, Vec<f64>) {
    let omegas = if params.b > 0.0 {
        linspace(-params.b, params.b, grid.0)
    } else {
        vec![0.0]
    };
    let epsilons = if params.delta > 0.0 {
        linspace(1.0 - params.delta, 1.0 + params.delta, grid.1)
    } else {
        vec![1.0]
    };
    (omegas, epsilons)
}

fn lattice(omegas: &[f64], epsilons: &[f64]) -> Vec<(f64, f64)> {
    let mut samples = Vec::with_capacity(omegas.len() * epsilons.len());
    for &omega in omegas {
        for &eps in epsilons {
            samples.push((omega, eps));
        }
    }
    samples
}

/// Score a pulse on a dense lattice with a uniform initial state.
pub fn validate_pulse(
    params: &BlochParams,
    controls: &(dyn Fn(f64) -> (f64, f64) + Sync),
    initial: [f64; 3],
    target: [f64; 3],
    grid: (usize, usize),
    threshold: f64,
    rk4_steps: usize,
) -> Result<RobustnessReport, StudyError> {
    let (omegas, epsilons) = validation_axes(params, grid);
    let samples = lattice(&omegas, &epsilons);
    let finals = bloch::simulate(params, controls, initial, &samples, rk4_steps)?;
    Ok(RobustnessReport::from_finals(
        omegas, epsilons, &finals, target, threshold,
    ))
}

/// Build the ensemble problem for a Bloch transfer toward `target`. All
/// parameter samples share one initial state; chained stages receive their
/// true initial states through continuity rows instead.
fn bloch_ensemble(
    params: &BlochParams,
    weights: (f64, f64, f64),
    target: [f64; 3],
    initial: [f64; 3],
    horizon: Horizon,
) -> EnsembleProblem {
    let mut param_dims = Vec::new();
    if params.b > 0.0 {
        param_dims.push((-params.b, params.b));
    }
    if params.delta > 0.0 {
        param_dims.push((1.0 - params.delta, 1.0 + params.delta));
    }
    let has_omega = params.b > 0.0;
    let split = move |s: &[f64]| -> (f64, f64) {
        let mut it = s.iter();
        let omega = if has_omega { *it.next().unwrap() } else { 0.0 };
        let eps = *it.next().unwrap_or(&1.0);
        (omega, eps)
    };
    let profile = params.frequency_profile.clone();
    let eff = move |t: f64, omega: f64| -> f64 {
        match &profile {
            Some(p) => omega + p(t),
            None => omega,
        }
    };
    let eff_dyn = eff.clone();
    let eff_jac = eff;

    let initial_state: transcription::InitialStateFn =
        Arc::new(move |_s, out| out.copy_from_slice(&initial));

    let (wt, we, wti) = weights;
    let running = if we > 0.0 || wti > 0.0 {
        RunningCost::ControlOnly(Arc::new(move |u: &[f64]| {
            we * (u[0] * u[0] + u[1] * u[1]) + wti
        }))
    } else {
        RunningCost::None
    };

    EnsembleProblem {
        state_dim: 3,
        control_dim: 2,
        param_dims,
        dynamics: Arc::new(move |t, s, x, u, out| {
            let (omega, eps) = split(s);
            let m = [x[0], x[1], x[2]];
            out.copy_from_slice(&bloch::bloch_rhs(eff_dyn(t, omega), eps, &m, u[0], u[1]));
        }),
        dynamics_jacobian: Some(Arc::new(move |t, s, x, u, jx, ju| {
            let (omega, eps) = split(s);
            let j = bloch::bloch_state_jacobian(eff_jac(t, omega), eps, u[0], u[1]);
            for r in 0..3 {
                jx[r * 3..r * 3 + 3].copy_from_slice(&j[r]);
            }
            let m = [x[0], x[1], x[2]];
            let jc = bloch::bloch_control_jacobian(eps, &m);
            for r in 0..3 {
                ju[r * 2..r * 2 + 2].copy_from_slice(&jc[r]);
            }
        })),
        initial_state,
        terminal_cost: Arc::new(move |_t, x| {
            -wt * (target[0] * x[0] + target[1] * x[1] + target[2] * x[2])
        }),
        running_cost: running,
        endpoint_constraints: None,
        path_constraints: None,
        control_bound: params.amplitude_bound,
        horizon,
    }
}

fn ensure_solved(report: &SolveReport) -> Result<(), StudyError> {
    match report.status {
        SolveStatus::Optimal | SolveStatus::FeasibleStalled => Ok(()),
        status => Err(StudyError::SolverFailed {
            status,
            violation: report.constraint_violation,
        }),
    }
}

fn constant_control_guess(u: f64, v: f64) -> GuessStrategy {
    GuessStrategy::GivenControls(Arc::new(move |_t| vec![u, v]))
}

fn control_interp(sol: &PulseSolution) -> impl Fn(f64) -> (f64, f64) + Sync + '_ {
    move |t| {
        let u = sol.control_at(t);
        (u[0], u[1])
    }
}

/// Robust inversion study: minimize the ensemble-averaged
/// M_z(T) plus weighted pulse energy, then score −M_z(T) on a dense grid.
pub fn run_robust_pi(
    spec: &StudySpec,
    solver_config: &SolverConfig,
) -> Result<(PulseSolution, RobustnessReport), StudyError> {
    spec.validate()?;
    spec.check_validation_density()?;
    let params = &spec.bloch;
    let target = [0.0, 0.0, -1.0];
    let problem = bloch_ensemble(
        params,
        (spec.cost_weights.0, spec.cost_weights.1, 0.0),
        target,
        [0.0, 0.0, 1.0],
        Horizon::Fixed(params.duration),
    );
    let grid = build_grid(&problem, spec.orders.0, &spec.param_orders())?;
    let tr = transcribe(&problem, &grid)?;
    // Start from a linear-chirp adiabatic passage sweeping the frequency
    // band: it inverts the whole ensemble approximately, which puts the
    // solver in a broadband basin (a constant π rotation only inverts the
    // on-resonance slice and optimizes into a narrowband optimum).
    let duration = params.duration;
    let sweep = params.b + 1.0;
    let amp = 0.9 * params.amplitude_bound;
    let guess = GuessStrategy::GivenControls(Arc::new(move |t: f64| {
        let phase = sweep * (t * t / duration - t);
        vec![amp * phase.cos(), amp * phase.sin()]
    }));
    let z0 = initial_guess(&tr, &guess)?;
    tr.check_finite_at(&z0)?;
    let (z, report) = solver::solve(&tr, &z0, solver_config);
    ensure_solved(&report)?;
    let sol = tr.extract_solution(&z, Some(report));

    let robustness = validate_pulse(
        params,
        &control_interp(&sol),
        [0.0, 0.0, 1.0],
        target,
        spec.validation_grid,
        0.98,
        spec.rk4_steps,
    )?;
    Ok((sol, robustness))
}

/// Chain of per-stage transcriptions sharing one parameter grid, with
/// state-continuity equalities across stage boundaries.
struct ChainedNlp {
    stages: Vec<Transcription>,
    var_off: Vec<usize>,
    eq_off: Vec<usize>,
    ineq_off: Vec<usize>,
    num_samples: usize,
}

impl ChainedNlp {
    fn new(stages: Vec<Transcription>) -> Self {
        let num_samples = stages[0].layout().num_samples;
        assert!(stages
            .iter()
            .all(|s| s.layout().num_samples == num_samples));
        let mut var_off = vec![0];
        let mut eq_off = vec![0];
        let mut ineq_off = vec![0];
        for s in &stages {
            var_off.push(var_off.last().unwrap() + s.num_vars());
            eq_off.push(eq_off.last().unwrap() + s.num_eq());
            ineq_off.push(ineq_off.last().unwrap() + s.num_ineq());
        }
        Self {
            stages,
            var_off,
            eq_off,
            ineq_off,
            num_samples,
        }
    }

    fn continuity_rows(&self) -> usize {
        (self.stages.len() - 1) * self.num_samples * 3
    }

    fn stage_vars<'a>(&self, z: &'a [f64], i: usize) -> &'a [f64] {
        &z[self.var_off[i]..self.var_off[i + 1]]
    }
}

impl NlpProblem for ChainedNlp {
    fn num_vars(&self) -> usize {
        *self.var_off.last().unwrap()
    }

    fn objective(&self, z: &[f64]) -> f64 {
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| s.objective(self.stage_vars(z, i)))
            .sum()
    }

    fn gradient(&self, z: &[f64], grad: &mut [f64]) {
        for (i, s) in self.stages.iter().enumerate() {
            s.gradient(
                self.stage_vars(z, i),
                &mut grad[self.var_off[i]..self.var_off[i + 1]],
            );
        }
    }

    fn num_eq(&self) -> usize {
        *self.eq_off.last().unwrap() + self.continuity_rows()
    }

    fn eq(&self, z: &[f64], out: &mut [f64]) {
        for (i, s) in self.stages.iter().enumerate() {
            s.eq(
                self.stage_vars(z, i),
                &mut out[self.eq_off[i]..self.eq_off[i + 1]],
            );
        }
        let mut row = *self.eq_off.last().unwrap();
        for b in 0..self.stages.len() - 1 {
            let prev = self.stages[b].layout();
            let next = self.stages[b + 1].layout();
            let zp = self.stage_vars(z, b);
            let zn = self.stage_vars(z, b + 1);
            for j in 0..self.num_samples {
                for c in 0..3 {
                    out[row] = zn[next.state(0, j, c)] - zp[prev.state(prev.num_nodes - 1, j, c)];
                    row += 1;
                }
            }
        }
    }

    fn eq_jtv(&self, z: &[f64], y: &[f64], out: &mut [f64]) {
        for (i, s) in self.stages.iter().enumerate() {
            s.eq_jtv(
                self.stage_vars(z, i),
                &y[self.eq_off[i]..self.eq_off[i + 1]],
                &mut out[self.var_off[i]..self.var_off[i + 1]],
            );
        }
        let mut row = *self.eq_off.last().unwrap();
        for b in 0..self.stages.len() - 1 {
            let prev = self.stages[b].layout();
            let next = self.stages[b + 1].layout();
            for j in 0..self.num_samples {
                for c in 0..3 {
                    out[self.var_off[b + 1] + next.state(0, j, c)] += y[row];
                    out[self.var_off[b] + prev.state(prev.num_nodes - 1, j, c)] -= y[row];
                    row += 1;
                }
            }
        }
    }

    fn num_ineq(&self) -> usize {
        *self.ineq_off.last().unwrap()
    }

    fn ineq(&self, z: &[f64], out: &mut [f64]) {
        for (i, s) in self.stages.iter().enumerate() {
            s.ineq(
                self.stage_vars(z, i),
                &mut out[self.ineq_off[i]..self.ineq_off[i + 1]],
            );
        }
    }

    fn ineq_jtv(&self, z: &[f64], y: &[f64], out: &mut [f64]) {
        for (i, s) in self.stages.iter().enumerate() {
            s.ineq_jtv(
                self.stage_vars(z, i),
                &y[self.ineq_off[i]..self.ineq_off[i + 1]],
                &mut out[self.var_off[i]..self.var_off[i + 1]],
            );
        }
    }
}

/// Three-stage sequence study. Concatenated mode optimizes each
/// stage against its nominal uniform initial state and only chains the
/// realized states for scoring; simultaneous mode solves one NLP with
/// state continuity across stage boundaries.
pub fn run_three_stage(
    spec: &StudySpec,
    solver_config: &SolverConfig,
    mode: ThreeStageMode,
) -> Result<(Vec<PulseSolution>, Vec<RobustnessReport>), StudyError> {
    spec.validate()?;
    spec.check_validation_density()?;
    let stages = spec
        .stages
        .as_ref()
        .ok_or_else(|| StudyError::InvalidSpec("three_stage requires stages".into()))?;
    let params = &spec.bloch;

    let stage_params: Vec<BlochParams> = stages
        .iter()
        .map(|st| BlochParams {
            duration: params.duration * st.fraction,
            ..params.clone()
        })
        .collect();

    // Both the per-stage programs and the continuity-coupled joint program
    // stall with a max-norm feasibility floor just above 1e-5 for the
    // first-order inner method: past that the outer loop only escalates the
    // penalty and random-walks. Accept one decade more for this study; the
    // reported scores come from the RK4 validator either way.
    let solver_config = &SolverConfig {
        feasibility_tol: solver_config.feasibility_tol.max(1e-4),
        ..solver_config.clone()
    };

    let mut solutions = Vec::new();
    match mode {
        ThreeStageMode::Concatenated => {
            for (st, sp) in stages.iter().zip(stage_params.iter()) {
                let problem = bloch_ensemble(
                    sp,
                    (spec.cost_weights.0, spec.cost_weights.1, 0.0),
                    st.target,
                    st.initial,
                    Horizon::Fixed(sp.duration),
                );
                let grid = build_grid(&problem, spec.orders.0, &spec.param_orders())?;
                let tr = transcribe(&problem, &grid)?;
                let z0 =
                    initial_guess(&tr, &constant_control_guess(0.0, st.guess_angle / sp.duration))?;
                let (z, report) = solver::solve(&tr, &z0, solver_config);
                ensure_solved(&report)?;
                solutions.push(tr.extract_solution(&z, Some(report)));
            }
        }
        ThreeStageMode::Simultaneous => {
            let mut transcriptions = Vec::new();
            let mut guess = Vec::new();
            for (i, (st, sp)) in stages.iter().zip(stage_params.iter()).enumerate() {
                let problem = bloch_ensemble(
                    sp,
                    (spec.cost_weights.0, spec.cost_weights.1, 0.0),
                    st.target,
                    st.initial,
                    Horizon::Fixed(sp.duration),
                );
                let grid = build_grid(&problem, spec.orders.0, &spec.param_orders())?;
                // Pre-solve each stage alone against its nominal initial
                // state: the stage targets chain into the next stage's
                // nominal initial, so the joint solve starts near-feasible
                // in the continuity rows instead of fighting them from a
                // constant-rotation guess.
                let solo = transcribe(&problem, &grid)?;
                let z0 = initial_guess(
                    &solo,
                    &constant_control_guess(0.0, st.guess_angle / sp.duration),
                )?;
                let (z_stage, _) = solver::solve(&solo, &z0, solver_config);
                // Only the first stage pins its initial states; later stages
                // get theirs from the continuity rows.
                let tr = Transcription::new(problem, grid, i == 0)?;
                guess.extend_from_slice(&z_stage);
                transcriptions.push(tr);
            }
            let chained = ChainedNlp::new(transcriptions);
            let (z, report) = solver::solve(&chained, &guess, solver_config);
            ensure_solved(&report)?;
            for (i, tr) in chained.stages.iter().enumerate() {
                solutions.push(tr.extract_solution(chained.stage_vars(&z, i), None));
            }
            if let Some(first) = solutions.first_mut() {
                first.solver_stats = Some(report);
            }
        }
    }

    // Score every stage boundary by chaining RK4 through the realized
    // pulses, starting from the uniform equilibrium state.
    let (omegas, epsilons) = validation_axes(params, spec.validation_grid);
    let samples = lattice(&omegas, &epsilons);
    let mut states = vec![stages[0].initial; samples.len()];
    let mut reports = Vec::new();
    for ((st, sp), sol) in stages.iter().zip(stage_params.iter()).zip(solutions.iter()) {
        states = bloch::simulate_from(
            sp,
            &control_interp(sol),
            &states,
            &samples,
            spec.rk4_steps,
        )?;
        reports.push(RobustnessReport::from_finals(
            omegas.clone(),
            epsilons.clone(),
            &states,
            st.target,
            0.98,
        ));
    }
    Ok((solutions, reports))
}

/// Time-varying-frequency study: single system, ω(t) = sin(t),
/// free horizon, terminal cost −M_x(T) plus the chosen running cost.
pub fn run_time_varying(
    spec: &StudySpec,
    solver_config: &SolverConfig,
    cost_choice: CostChoice,
) -> Result<PulseSolution, StudyError> {
    spec.validate()?;
    let params = &spec.bloch;
    // A terminal-only (or time-only) cost leaves the control polynomial
    // underdetermined between nodes, so a vanishing energy term is kept in
    // every variant to select the smooth representative of the optimum.
    let smoothing = 1e-3;
    let weights = match cost_choice {
        CostChoice::TerminalOnly => (spec.cost_weights.0, smoothing, 0.0),
        CostChoice::Energy => (spec.cost_weights.0, spec.cost_weights.1, 0.0),
        CostChoice::Time => (spec.cost_weights.0, smoothing, spec.cost_weights.2),
    };
    let horizon = Horizon::Free {
        min: 0.05,
        max: params.duration,
    };
    let problem = bloch_ensemble(
        params,
        weights,
        [1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0],
        horizon,
    );
    let grid = build_grid(&problem, spec.orders.0, &spec.param_orders())?;
    let tr = transcribe(&problem, &grid)?;
    let t0 = 0.5 * (0.05 + params.duration);
    let z0 = initial_guess(&tr, &constant_control_guess(FRAC_PI_2 / t0, 0.0))?;
    let (z, report) = solver::solve(&tr, &z0, solver_config);
    ensure_solved(&report)?;
    Ok(tr.extract_solution(&z, Some(report)))
}

/// Convergence sweep: π/2 transfer with ε fixed at 1, solved at
/// every (N, N_ω) cell; failures are recorded, not propagated.
pub fn run_convergence(
    spec: &StudySpec,
    solver_config: &SolverConfig,
) -> Result<Vec<ConvergenceCell>, StudyError> {
    spec.validate()?;
    let sweep = spec.sweep.as_ref().unwrap();
    let params = &spec.bloch;
    let target = [1.0, 0.0, 0.0];
    let mut cells = Vec::new();
    // Continuation across cells: each solve warm-starts from the last
    // successful cell's pulse. Large-order cells started cold from the
    // constant rotation stall far from the optimum, which would measure
    // the optimizer's reach instead of the discretization error.
    let mut warm: Option<PulseSolution> = None;
    for &n in &sweep.time_orders {
        for &n_omega in &sweep.omega_orders {
            let guess = match &warm {
                Some(prev) => {
                    let prev = prev.clone();
                    GuessStrategy::GivenControls(Arc::new(move |t| prev.control_at(t)))
                }
                None => constant_control_guess(FRAC_PI_2 / params.duration, 0.0),
            };
            let avg = solve_convergence_cell(
                spec,
                solver_config,
                n,
                n_omega,
                params,
                target,
                &guess,
            )
            .ok()
            .map(|(sol, report)| {
                warm = Some(sol);
                report.average
            });
            cells.push(ConvergenceCell {
                time_order: n,
                omega_order: n_omega,
                avg_mx: avg,
            });
        }
    }
    Ok(cells)
}

fn solve_convergence_cell(
    spec: &StudySpec,
    solver_config: &SolverConfig,
    n: usize,
    n_omega: usize,
    params: &BlochParams,
    target: [f64; 3],
    guess: &GuessStrategy,
) -> Result<(PulseSolution, RobustnessReport), StudyError> {
    let problem = bloch_ensemble(
        params,
        (spec.cost_weights.0, spec.cost_weights.1, 0.0),
        target,
        [0.0, 0.0, 1.0],
        Horizon::Fixed(params.duration),
    );
    let grid = build_grid(&problem, n, &[n_omega])?;
    let tr = transcribe(&problem, &grid)?;
    let z0 = initial_guess(&tr, guess)?;
    // Same max-norm feasibility floor as the sequence study: cells stall
    // just above 1e-5 and would be dropped as solver failures even though
    // their RK4-validated scores are the quantity under study.
    let solver_config = &SolverConfig {
        feasibility_tol: solver_config.feasibility_tol.max(1e-4),
        ..solver_config.clone()
    };
    let (z, report) = solver::solve(&tr, &z0, solver_config);
    ensure_solved(&report)?;
    let sol = tr.extract_solution(&z, Some(report));
    let robustness = validate_pulse(
        params,
        &control_interp(&sol),
        [0.0, 0.0, 1.0],
        target,
        (spec.validation_grid.0, 1),
        0.99,
        spec.rk4_steps,
    )?;
    Ok((sol, robustness))
}
