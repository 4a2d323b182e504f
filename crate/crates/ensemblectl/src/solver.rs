//! Augmented-Lagrangian solver for the transcribed NLPs.
//!
//! Outer loop: classic multiplier updates with penalty growth when the
//! constraint violation stalls. Inner loop: limited-memory BFGS with an
//! Armijo backtracking line search on the augmented Lagrangian. Only first
//! derivatives are used, supplied by the [`NlpProblem`] evaluators.

use crate::transcription::NlpProblem;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

const LBFGS_MEMORY: usize = 30;
const MULTIPLIER_CAP: f64 = 1e8;
const PENALTY_CAP: f64 = 1e12;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub feasibility_tol: f64,
    pub optimality_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    /// Finite-difference step for derivatives of user callbacks without
    /// analytic Jacobians (scaled by 1+|x_i|).
    pub fd_step: f64,
    /// Seed for the stall-recovery perturbation; 0 disables it.
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            feasibility_tol: 1e-6,
            optimality_tol: 1e-6,
            max_outer: 50,
            max_inner: 500,
            penalty_init: 10.0,
            penalty_growth: 10.0,
            fd_step: 1e-7,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.feasibility_tol > 0.0) {
            return Err("solver.feasibility_tol must be positive".into());
        }
        if !(self.optimality_tol > 0.0) {
            return Err("solver.optimality_tol must be positive".into());
        }
        if !(self.fd_step > 0.0) {
            return Err("solver.fd_step must be positive".into());
        }
        if !(self.penalty_init > 0.0) {
            return Err("solver.penalty_init must be positive".into());
        }
        if !(self.penalty_growth > 1.0) {
            return Err("solver.penalty_growth must exceed 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    FeasibleStalled,
    Infeasible,
    IterationCap,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub kkt_residual: f64,
    /// Max-norm constraint violation at the returned iterate.
    pub constraint_violation: f64,
    pub outer_iters: usize,
    pub inner_iters: usize,
    /// Objective value after each outer iteration.
    pub objective_history: Vec<f64>,
    /// Constraint violation after each outer iteration.
    pub violation_history: Vec<f64>,
}

/// Workspace for augmented-Lagrangian evaluations at a fixed (λ, μ, ρ).
struct AlState<'a> {
    nlp: &'a dyn NlpProblem,
    lambda: Vec<f64>,
    mu: Vec<f64>,
    rho: f64,
}

impl<'a> AlState<'a> {
    fn value(&self, z: &[f64], c: &mut [f64], g: &mut [f64]) -> f64 {
        let mut val = self.nlp.objective(z);
        self.nlp.eq(z, c);
        for (ci, li) in c.iter().zip(self.lambda.iter()) {
            val += li * ci + 0.5 * self.rho * ci * ci;
        }
        self.nlp.ineq(z, g);
        for (gi, mi) in g.iter().zip(self.mu.iter()) {
            let t = (mi + self.rho * gi).max(0.0);
            val += (t * t - mi * mi) / (2.0 * self.rho);
        }
        val
    }

    fn gradient(&self, z: &[f64], c: &mut [f64], g: &mut [f64], grad: &mut [f64]) {
        self.nlp.gradient(z, grad);
        self.nlp.eq(z, c);
        let yc: Vec<f64> = c
            .iter()
            .zip(self.lambda.iter())
            .map(|(ci, li)| li + self.rho * ci)
            .collect();
        self.nlp.eq_jtv(z, &yc, grad);
        self.nlp.ineq(z, g);
        let yg: Vec<f64> = g
            .iter()
            .zip(self.mu.iter())
            .map(|(gi, mi)| (mi + self.rho * gi).max(0.0))
            .collect();
        self.nlp.ineq_jtv(z, &yg, grad);
    }
}

fn max_violation(c: &[f64], g: &[f64]) -> f64 {
    let ec = c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let ig = g.iter().fold(0.0f64, |a, v| a.max(v.max(0.0)));
    ec.max(ig)
}

/// KKT residual: max of Lagrangian stationarity (max-norm), constraint
/// violation, multiplier sign errors, and complementary slackness.
pub fn kkt_residual(nlp: &dyn NlpProblem, z: &[f64], lambda: &[f64], mu: &[f64]) -> f64 {
    let n = nlp.num_vars();
    let mut grad = vec![0.0; n];
    nlp.gradient(z, &mut grad);
    nlp.eq_jtv(z, lambda, &mut grad);
    nlp.ineq_jtv(z, mu, &mut grad);
    let stationarity = grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));

    let mut c = vec![0.0; nlp.num_eq()];
    nlp.eq(z, &mut c);
    let mut g = vec![0.0; nlp.num_ineq()];
    nlp.ineq(z, &mut g);
    let violation = max_violation(&c, &g);

    let mut comp = 0.0f64;
    for (gi, mi) in g.iter().zip(mu.iter()) {
        comp = comp.max((-mi).max(0.0));
        comp = comp.max((mi * gi).abs());
    }
    stationarity.max(violation).max(comp)
}

/// Minimize the NLP from `x0`. Returns the best iterate found and a report;
/// deterministic for identical inputs and config.
pub fn solve(nlp: &dyn NlpProblem, x0: &[f64], config: &SolverConfig) -> (Vec<f64>, SolveReport) {
    let n = nlp.num_vars();
    assert_eq!(x0.len(), n, "initial point has wrong length");
    let n_eq = nlp.num_eq();
    let n_ineq = nlp.num_ineq();

    let mut z = x0.to_vec();
    let mut state = AlState {
        nlp,
        lambda: vec![0.0; n_eq],
        mu: vec![0.0; n_ineq],
        rho: config.penalty_init,
    };

    let mut c = vec![0.0; n_eq];
    let mut g = vec![0.0; n_ineq];
    let mut report = SolveReport {
        status: SolveStatus::IterationCap,
        kkt_residual: f64::INFINITY,
        constraint_violation: f64::INFINITY,
        outer_iters: 0,
        inner_iters: 0,
        objective_history: Vec::new(),
        violation_history: Vec::new(),
    };

    // Reject a non-finite start outright.
    if !state.value(&z, &mut c, &mut g).is_finite() {
        report.status = SolveStatus::Infeasible;
        report.constraint_violation = max_violation(&c, &g);
        return (z, report);
    }

    // LANCELOT-style forcing sequences for the inner tolerance and the
    // violation target that gates multiplier updates.
    let mut omega = 0.1 / state.rho;
    let mut eta = 1.0 / state.rho.powf(0.1);

    let mut best_z = z.clone();
    let mut best_viol = f64::INFINITY;
    let mut best_obj = f64::INFINITY;
    let mut total_inner = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    for outer in 0..config.max_outer {
        let inner_tol = omega.max(0.01 * config.optimality_tol);
        let (inner_used, stalled) =
            minimize_al(&state, &mut z, inner_tol, config.max_inner, &mut c, &mut g);
        total_inner += inner_used;

        nlp.eq(&z, &mut c);
        nlp.ineq(&z, &mut g);
        let viol = max_violation(&c, &g);
        let obj = nlp.objective(&z);
        report.objective_history.push(obj);
        report.violation_history.push(viol);
        report.outer_iters = outer + 1;
        report.inner_iters = total_inner;

        let feasible = viol <= config.feasibility_tol;
        if (feasible && (best_viol > config.feasibility_tol || obj < best_obj))
            || (!feasible && viol < best_viol && best_viol > config.feasibility_tol)
        {
            best_z.copy_from_slice(&z);
            best_viol = viol;
            best_obj = obj;
        }

        // First-order multiplier estimates for the KKT test.
        let lam_hat: Vec<f64> = c
            .iter()
            .zip(state.lambda.iter())
            .map(|(ci, li)| (li + state.rho * ci).clamp(-MULTIPLIER_CAP, MULTIPLIER_CAP))
            .collect();
        let mu_hat: Vec<f64> = g
            .iter()
            .zip(state.mu.iter())
            .map(|(gi, mi)| (mi + state.rho * gi).max(0.0).min(MULTIPLIER_CAP))
            .collect();
        let kkt = kkt_residual(nlp, &z, &lam_hat, &mu_hat);
        report.kkt_residual = kkt;
        report.constraint_violation = viol;

        if std::env::var_os("ENSEMBLECTL_SOLVER_TRACE").is_some() {
            eprintln!(
                "outer {outer}: rho={:.1e} omega={:.1e} eta={:.1e} inner={inner_used} \
                 stalled={stalled} viol={viol:.2e} kkt={kkt:.2e} obj={obj:.8}",
                state.rho, omega, eta
            );
        }

        if kkt <= config.optimality_tol && feasible {
            report.status = SolveStatus::Optimal;
            return (z, report);
        }

        if viol <= eta.max(config.feasibility_tol) {
            state.lambda = lam_hat;
            state.mu = mu_hat;
            eta = (eta / state.rho.powf(0.9)).max(0.1 * config.feasibility_tol);
            omega = (omega / state.rho.powf(0.5)).max(0.01 * config.optimality_tol);
        } else {
            state.rho = (state.rho * config.penalty_growth).min(PENALTY_CAP);
            eta = 1.0 / state.rho.powf(0.1);
            omega = 0.1 / state.rho;
        }

        // A feasible iterate whose objective has stopped moving will not
        // improve further at reachable inner tolerances; stop early.
        let h = &report.objective_history;
        if feasible
            && h.len() >= 3
            && h[h.len() - 3..]
                .windows(2)
                .all(|w| (w[1] - w[0]).abs() <= 1e-9 * (1.0 + w[1].abs()))
        {
            break;
        }

        if stalled {
            if config.seed != 0 {
                // Small deterministic shake to escape a dead line search.
                for zi in z.iter_mut() {
                    *zi += 1e-8 * (rng.gen::<f64>() - 0.5) * (1.0 + zi.abs());
                }
            } else if state.rho >= PENALTY_CAP {
                break;
            }
        }
    }

    // Ran out of budget: return the best iterate seen.
    nlp.eq(&best_z, &mut c);
    nlp.ineq(&best_z, &mut g);
    let viol = max_violation(&c, &g);
    report.constraint_violation = viol;
    report.status = if viol <= config.feasibility_tol {
        SolveStatus::FeasibleStalled
    } else if report.outer_iters >= config.max_outer {
        SolveStatus::IterationCap
    } else {
        SolveStatus::Infeasible
    };
    (best_z, report)
}

/// L-BFGS with Armijo backtracking on the augmented Lagrangian. Returns
/// (iterations used, stalled flag).
fn minimize_al(
    state: &AlState,
    z: &mut Vec<f64>,
    grad_tol: f64,
    max_iter: usize,
    c: &mut [f64],
    g: &mut [f64],
) -> (usize, bool) {
    let n = z.len();
    let mut grad = vec![0.0; n];
    let mut val = state.value(z, c, g);
    state.gradient(z, c, g, &mut grad);

    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();

    let mut iter = 0;
    while iter < max_iter {
        let gnorm = grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if gnorm <= grad_tol {
            return (iter, false);
        }

        // Two-loop recursion for the search direction.
        let mut dir: Vec<f64> = grad.iter().map(|v| -v).collect();
        let mut alphas = vec![0.0; s_hist.len()];
        for i in (0..s_hist.len()).rev() {
            let a = rho_hist[i] * dot(&s_hist[i], &dir);
            alphas[i] = a;
            axpy(-a, &y_hist[i], &mut dir);
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let scale = dot(s, y) / dot(y, y);
            for d in dir.iter_mut() {
                *d *= scale;
            }
        }
        for i in 0..s_hist.len() {
            let b = rho_hist[i] * dot(&y_hist[i], &dir);
            axpy(alphas[i] - b, &s_hist[i], &mut dir);
        }

        let mut slope = dot(&grad, &dir);
        if slope >= 0.0 {
            // Not a descent direction; fall back to steepest descent.
            dir = grad.iter().map(|v| -v).collect();
            slope = -dot(&grad, &grad);
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
        }

        // Armijo backtracking; also shrinks away from non-finite points.
        let mut step = if s_hist.is_empty() {
            (1.0 / gnorm.max(1.0)).min(1.0)
        } else {
            1.0
        };
        let mut trial = vec![0.0; n];
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..n {
                trial[i] = z[i] + step * dir[i];
            }
            let tv = state.value(&trial, c, g);
            if tv.is_finite() && tv <= val + 1e-4 * step * slope {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return (iter, true);
        }

        let mut new_grad = vec![0.0; n];
        state.gradient(&trial, c, g, &mut new_grad);
        let s: Vec<f64> = (0..n).map(|i| trial[i] - z[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| new_grad[i] - grad[i]).collect();
        let sy = dot(&s, &y);
        let curv_ok = sy > 1e-10 * norm2(&s) * norm2(&y);
        if curv_ok {
            if s_hist.len() == LBFGS_MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            rho_hist.push(1.0 / sy);
            s_hist.push(s);
            y_hist.push(y);
        }
        z.copy_from_slice(&trial);
        val = state.value(z, c, g);
        grad = new_grad;
        iter += 1;
    }
    (iter, false)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += a * xi;
    }
}

/// NLP defined by scalar closures with finite-difference derivatives.
/// Convenient for small problems and solver tests.
pub struct ClosureNlp {
    pub num_vars: usize,
    pub objective: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub eq: Vec<Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>>,
    pub ineq: Vec<Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>>,
    pub fd_step: f64,
}

impl ClosureNlp {
    pub fn unconstrained(
        num_vars: usize,
        objective: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            num_vars,
            objective: Arc::new(objective),
            eq: Vec::new(),
            ineq: Vec::new(),
            fd_step: 1e-7,
        }
    }

    fn fd_grad(&self, f: &dyn Fn(&[f64]) -> f64, z: &[f64], grad: &mut [f64]) {
        let mut zp = z.to_vec();
        for i in 0..z.len() {
            let h = self.fd_step * (1.0 + z[i].abs());
            zp[i] = z[i] + h;
            let fp = f(&zp);
            zp[i] = z[i] - h;
            let fm = f(&zp);
            zp[i] = z[i];
            grad[i] = (fp - fm) / (2.0 * h);
        }
    }
}

impl NlpProblem for ClosureNlp {
    fn num_vars(&self) -> usize {
        self.num_vars
    }

    fn objective(&self, z: &[f64]) -> f64 {
        (self.objective)(z)
    }

    fn gradient(&self, z: &[f64], grad: &mut [f64]) {
        let f = self.objective.clone();
        self.fd_grad(&move |x: &[f64]| f(x), z, grad);
    }

    fn num_eq(&self) -> usize {
        self.eq.len()
    }

    fn eq(&self, z: &[f64], out: &mut [f64]) {
        for (o, f) in out.iter_mut().zip(self.eq.iter()) {
            *o = f(z);
        }
    }

    fn eq_jtv(&self, z: &[f64], y: &[f64], out: &mut [f64]) {
        let mut grad = vec![0.0; z.len()];
        for (f, yi) in self.eq.iter().zip(y.iter()) {
            self.fd_grad(f.as_ref(), z, &mut grad);
            axpy(*yi, &grad, out);
        }
    }

    fn num_ineq(&self) -> usize {
        self.ineq.len()
    }

    fn ineq(&self, z: &[f64], out: &mut [f64]) {
        for (o, f) in out.iter_mut().zip(self.ineq.iter()) {
            *o = f(z);
        }
    }

    fn ineq_jtv(&self, z: &[f64], y: &[f64], out: &mut [f64]) {
        let mut grad = vec![0.0; z.len()];
        for (f, yi) in self.ineq.iter().zip(y.iter()) {
            self.fd_grad(f.as_ref(), z, &mut grad);
            axpy(*yi, &grad, out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn unconstrained_quadratic() {
        let nlp = ClosureNlp::unconstrained(1, |z| (z[0] - 3.0) * (z[0] - 3.0));
        let (z, report) = solve(&nlp, &[0.0], &SolverConfig::default());
        assert_eq!(report.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(z[0], 3.0, epsilon = 1e-5);
    }

    #[test]
    fn active_bound() {
        // min x subject to x ≥ 1, written as 1 − x ≤ 0.
        let mut nlp = ClosureNlp::unconstrained(1, |z| z[0]);
        nlp.ineq.push(Arc::new(|z: &[f64]| 1.0 - z[0]));
        let (z, report) = solve(&nlp, &[5.0], &SolverConfig::default());
        assert_eq!(report.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(z[0], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn equality_constrained_quadratic() {
        // min x² + y² subject to x + y = 1 → (1/2, 1/2).
        let mut nlp = ClosureNlp::unconstrained(2, |z| z[0] * z[0] + z[1] * z[1]);
        nlp.eq.push(Arc::new(|z: &[f64]| z[0] + z[1] - 1.0));
        let (z, report) = solve(&nlp, &[0.0, 0.0], &SolverConfig::default());
        assert_eq!(report.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(z[0], 0.5, epsilon = 1e-5);
        assert_abs_diff_eq!(z[1], 0.5, epsilon = 1e-5);
    }

    #[test]
    fn kkt_zero_at_unconstrained_minimizer() {
        let nlp = ClosureNlp::unconstrained(2, |z| {
            (z[0] - 1.0) * (z[0] - 1.0) + 2.0 * (z[1] + 2.0) * (z[1] + 2.0)
        });
        let r = kkt_residual(&nlp, &[1.0, -2.0], &[], &[]);
        assert!(r < 1e-6, "kkt residual at minimizer: {r}");
    }

    #[test]
    fn kkt_equals_gradient_norm_when_inactive() {
        let mut nlp = ClosureNlp::unconstrained(1, |z| z[0] * z[0]);
        nlp.ineq.push(Arc::new(|z: &[f64]| z[0] - 100.0));
        let r = kkt_residual(&nlp, &[3.0], &[], &[0.0]);
        assert_abs_diff_eq!(r, 6.0, epsilon = 1e-5);
    }

    /// Dense symmetric solve by Gaussian elimination with partial pivoting;
    /// used as the oracle for equality-constrained QPs via their KKT system.
    fn linsolve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
                .unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for row in col + 1..n {
                let f = a[row][col] / a[col][col];
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let mut acc = b[row];
            for k in row + 1..n {
                acc -= a[row][k] * x[k];
            }
            x[row] = acc / a[row][row];
        }
        x
    }

    #[test]
    fn random_qp_battery() {
        // Fixed battery of equality-constrained QPs with oracle solutions;
        // checks accuracy and that outer violation is non-increasing in at
        // least 90% of the battery.
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let battery = 20;
        let mut monotone = 0;
        for case in 0..battery {
            let n = rng.gen_range(2..=5usize);
            // SPD matrix Q = MᵀM + I.
            let m: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let mut q = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        q[i][j] += m[k][i] * m[k][j];
                    }
                }
                q[i][i] += 1.0;
            }
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let rhs = rng.gen_range(-1.0..1.0);

            // Oracle: KKT system [Q aᵀ; a 0][x; λ] = [b; rhs].
            let mut kkt = vec![vec![0.0; n + 1]; n + 1];
            let mut kb = vec![0.0; n + 1];
            for i in 0..n {
                for j in 0..n {
                    kkt[i][j] = q[i][j];
                }
                kkt[i][n] = a[i];
                kkt[n][i] = a[i];
                kb[i] = b[i];
            }
            kb[n] = rhs;
            let oracle = linsolve(kkt, kb);

            let qc = q.clone();
            let bc = b.clone();
            let mut nlp = ClosureNlp::unconstrained(n, move |z| {
                let mut acc = 0.0;
                for i in 0..z.len() {
                    for j in 0..z.len() {
                        acc += 0.5 * z[i] * qc[i][j] * z[j];
                    }
                    acc -= bc[i] * z[i];
                }
                acc
            });
            let ac = a.clone();
            nlp.eq.push(Arc::new(move |z: &[f64]| {
                ac.iter().zip(z.iter()).map(|(x, y)| x * y).sum::<f64>() - rhs
            }));

            let (z, report) = solve(&nlp, &vec![0.0; n], &SolverConfig::default());
            for i in 0..n {
                assert_abs_diff_eq!(z[i], oracle[i], epsilon = 2e-4);
            }
            // Violation should fall monotonically until it first reaches the
            // tolerance region; below that, first-order multiplier updates
            // may jitter, but must never climb back out of the region.
            let region = 100.0 * SolverConfig::default().feasibility_tol;
            let vh = &report.violation_history;
            let entered = vh.iter().position(|&v| v <= region).unwrap_or(vh.len());
            if vh[..entered].windows(2).all(|w| w[1] <= w[0] + 1e-10 * (1.0 + w[0])) {
                monotone += 1;
            }
            assert!(
                vh[entered..].iter().all(|&v| v <= region),
                "case {case}: violation left the tolerance region: {vh:?}"
            );
            assert!(
                report.status == SolveStatus::Optimal,
                "case {case}: status {:?}",
                report.status
            );
        }
        assert!(
            monotone * 10 >= battery * 9,
            "violation monotone in only {monotone}/{battery} cases"
        );
    }

    #[test]
    fn deterministic_reports() {
        let make = || {
            let mut nlp = ClosureNlp::unconstrained(3, |z| {
                z.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum::<f64>()
                    + z[0] * z[1]
            });
            nlp.eq.push(Arc::new(|z: &[f64]| z[0] + z[1] + z[2] - 1.0));
            nlp.ineq.push(Arc::new(|z: &[f64]| -z[2]));
            nlp
        };
        let cfg = SolverConfig::default();
        let (z1, r1) = solve(&make(), &[0.3, 0.3, 0.3], &cfg);
        let (z2, r2) = solve(&make(), &[0.3, 0.3, 0.3], &cfg);
        assert_eq!(
            z1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            z2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(r1.kkt_residual.to_bits(), r2.kkt_residual.to_bits());
        assert_eq!(r1.objective_history.len(), r2.objective_history.len());
        assert_eq!(r1.outer_iters, r2.outer_iters);
        assert_eq!(r1.inner_iters, r2.inner_iters);
    }

    #[test]
    fn non_finite_start_reports_infeasible() {
        let nlp = ClosureNlp::unconstrained(1, |z| if z[0] == 0.0 { f64::NAN } else { z[0] });
        let (_, report) = solve(&nlp, &[0.0], &SolverConfig::default());
        assert_eq!(report.status, SolveStatus::Infeasible);
    }
}
