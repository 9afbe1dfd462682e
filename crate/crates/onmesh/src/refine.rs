//! Local error estimation and the mesh-refinement loop.
//!
//! The error estimator re-integrates the dynamics across each interval with
//! an adaptive embedded Runge-Kutta pair, starting from the interval's left
//! interpolated state and driving the integration with the control
//! interpolant, then compares against the state interpolant on a sample
//! grid. Constraint violation is sampled on the same grid and includes
//! rate-bound violation of the interpolant (reported, but never added as
//! constraint rows).

use crate::collocation::{Mesh, Scheme};
use crate::error::{RefineError, SolveError};
use crate::interp::{interpolate, Trajectory};
use crate::ocp::{PointArgs, RateMode, ValidatedSpec};
use crate::solver::{solve, SolverOptions};
use crate::transcription::{default_guess, transcribe, NlpProblem, NlpSolution};

/// Refinement criteria and budget.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Tolerances {
    /// Per-state absolute local error tolerance.
    pub eta: Vec<f64>,
    /// Absolute constraint-violation tolerance.
    pub eps: f64,
    pub max_rounds: usize,
    pub max_collocation_points: usize,
    /// Radau intervals raise their order up to this cap before bisecting.
    pub lgr_order_cap: usize,
}

impl Tolerances {
    pub fn uniform(n_states: usize, eta: f64, eps: f64) -> Tolerances {
        Tolerances {
            eta: vec![eta; n_states],
            eps,
            max_rounds: 12,
            max_collocation_points: 4000,
            lgr_order_cap: 8,
        }
    }

    pub fn check(&self) -> Result<(), RefineError> {
        if self.eta.iter().any(|&v| !(v > 0.0)) || !(self.eps > 0.0) {
            return Err(RefineError::BadTolerances(
                "tolerances must be positive".into(),
            ));
        }
        if self.max_rounds == 0 || self.max_collocation_points == 0 {
            return Err(RefineError::BadTolerances("budgets must be positive".into()));
        }
        Ok(())
    }
}

/// Per-interval local error and constraint violation.
#[derive(Debug, Clone)]
pub struct ErrorEstimate {
    /// `eta[interval][state]`
    pub eta: Vec<Vec<f64>>,
    /// `eps[interval]`
    pub eps: Vec<f64>,
}

impl ErrorEstimate {
    pub fn max_eta(&self) -> Vec<f64> {
        let nx = self.eta.first().map_or(0, |e| e.len());
        (0..nx)
            .map(|s| self.eta.iter().fold(0.0f64, |a, e| a.max(e[s])))
            .collect()
    }

    pub fn max_eps(&self) -> f64 {
        self.eps.iter().fold(0.0f64, |a, &v| a.max(v))
    }

    pub fn violating(&self, tol: &Tolerances) -> Vec<usize> {
        (0..self.eta.len())
            .filter(|&k| {
                self.eta[k].iter().zip(&tol.eta).any(|(e, t)| e > t) || self.eps[k] > tol.eps
            })
            .collect()
    }

    pub fn compliant(&self, tol: &Tolerances) -> bool {
        self.violating(tol).is_empty()
    }
}

/// Dormand-Prince 5(4) step integration to a sequence of target times.
/// Returns the state at each target.
pub(crate) fn rk45_to_targets(
    f: &dyn Fn(f64, &[f64], &mut [f64]),
    x0: &[f64],
    t0: f64,
    targets: &[f64],
    rtol: f64,
    atol: f64,
) -> Result<Vec<Vec<f64>>, String> {
    const A: [[f64; 6]; 6] = [
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
            0.0,
            0.0,
        ],
        [
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
            0.0,
        ],
        [
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ];
    const C: [f64; 6] = [0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
    const E: [f64; 7] = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];

    let n = x0.len();
    let mut x = x0.to_vec();
    let mut t = t0;
    let mut out = Vec::with_capacity(targets.len());
    let mut k = vec![vec![0.0; n]; 7];
    f(t, &x, &mut k[0]);

    for &target in targets {
        if target < t - 1e-14 {
            return Err("targets must be nondecreasing".into());
        }
        let mut h = (target - t).max(1e-14).min(0.1 * (target - t0 + 1e-14).max(1e-14));
        if h <= 0.0 {
            out.push(x.clone());
            continue;
        }
        let mut steps = 0usize;
        while t < target - 1e-13 {
            steps += 1;
            if steps > 100_000 {
                return Err("step budget exhausted".into());
            }
            h = h.min(target - t);
            let mut xs = vec![0.0; n];
            for stage in 0..6 {
                for (i, v) in xs.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (j, kj) in k.iter().enumerate().take(stage + 1) {
                        acc += A[stage][j] * kj[i];
                    }
                    *v = x[i] + h * acc;
                }
                f(t + C[stage] * h, &xs, &mut k[stage + 1]);
            }
            // 5th-order solution is the last stage evaluation point
            let x5 = xs;
            let mut err_norm = 0.0f64;
            for i in 0..n {
                let mut e = 0.0;
                for (j, kj) in k.iter().enumerate() {
                    e += E[j] * kj[i];
                }
                e *= h;
                let scale = atol + rtol * x[i].abs().max(x5[i].abs());
                err_norm = err_norm.max((e / scale).abs());
            }
            if !err_norm.is_finite() {
                return Err("non-finite integration error".into());
            }
            if err_norm <= 1.0 {
                t += h;
                x = x5;
                k[0] = k[6].clone(); // FSAL
            }
            let factor = if err_norm > 0.0 {
                (0.9 * err_norm.powf(-0.2)).clamp(0.2, 5.0)
            } else {
                5.0
            };
            h *= factor;
            if h < 1e-14 {
                return Err("step size underflow".into());
            }
        }
        t = target;
        out.push(x.clone());
    }
    Ok(out)
}

/// Estimates the per-interval local error and constraint violation of a
/// trajectory against the problem it solves.
pub fn estimate_error(
    traj: &Trajectory,
    problem: &NlpProblem,
    tol: &Tolerances,
) -> Result<ErrorEstimate, RefineError> {
    tol.check()?;
    let spec = problem.spec().spec();
    let nx = traj.nx();
    let p = traj.params().to_vec();
    let min_eta = tol.eta.iter().cloned().fold(f64::INFINITY, f64::min);
    let rk_tol = 1e-2 * min_eta;
    let samples_per_interval = 10usize;

    let mut eta = Vec::with_capacity(traj.n_intervals());
    let mut eps = Vec::with_capacity(traj.n_intervals());
    for k in 0..traj.n_intervals() {
        let (t_lo, t_hi) = traj.interval_span(k);
        let targets: Vec<f64> = (1..=samples_per_interval)
            .map(|i| t_lo + (t_hi - t_lo) * i as f64 / samples_per_interval as f64)
            .collect();
        let x_lo = traj.state_in(k, t_lo);
        let f = |t: f64, x: &[f64], out: &mut [f64]| {
            let u = traj.input_in(k, t);
            (spec.dynamics.eval)(
                PointArgs {
                    x,
                    u: &u,
                    t,
                    p: &p,
                },
                out,
            );
        };
        let integrated = rk45_to_targets(&f, &x_lo, t_lo, &targets, rk_tol, rk_tol)
            .map_err(|reason| RefineError::IntegrationFailure {
                interval: k,
                reason,
            })?;
        let mut eta_k: Vec<f64> = vec![0.0; nx];
        for (xi, &ti) in integrated.iter().zip(&targets) {
            let xt = traj.state_in(k, ti);
            for s in 0..nx {
                eta_k[s] = eta_k[s].max((xi[s] - xt[s]).abs());
            }
        }

        // constraint violation on the sample grid (plus the left endpoint)
        let mut eps_k = 0.0f64;
        let mut check_at = |t: f64| {
            let x = traj.state_in(k, t);
            let u = traj.input_in(k, t);
            if let Some(c) = &spec.path {
                let mut vals = vec![0.0; c.fns.n_out];
                (c.fns.eval)(
                    PointArgs {
                        x: &x,
                        u: &u,
                        t,
                        p: &p,
                    },
                    &mut vals,
                );
                for (q, &v) in vals.iter().enumerate() {
                    eps_k = eps_k.max(c.lower[q] - v).max(v - c.upper[q]);
                }
            }
            let dx = traj.state_deriv_in(k, t);
            for (j, r) in spec.x_rate.iter().enumerate() {
                if let Some((lo, hi)) = r {
                    eps_k = eps_k.max(lo - dx[j]).max(dx[j] - hi);
                }
            }
            if spec.u_rate.iter().any(|r| r.is_some()) {
                let du = traj.input_deriv_in(k, t);
                for (j, r) in spec.u_rate.iter().enumerate() {
                    if let Some((lo, hi)) = r {
                        eps_k = eps_k.max(lo - du[j]).max(du[j] - hi);
                    }
                }
            }
        };
        check_at(t_lo);
        for &ti in &targets {
            check_at(ti);
        }
        eta.push(eta_k);
        eps.push(eps_k.max(0.0));
    }
    Ok(ErrorEstimate { eta, eps })
}

/// Refines every violating interval: bisection for the h-schemes, order
/// increment (then bisection at the cap) for Radau meshes. Returns the input
/// mesh unchanged when everything complies.
pub fn refine(mesh: &Mesh, estimate: &ErrorEstimate, tol: &Tolerances) -> Result<Mesh, RefineError> {
    tol.check()?;
    let violating = estimate.violating(tol);
    if violating.is_empty() {
        return Ok(mesh.clone());
    }
    let mut out = mesh.clone();
    // walk backwards so earlier indices stay valid across insertions
    for &k in violating.iter().rev() {
        match mesh.scheme() {
            Scheme::Trapezoidal | Scheme::HermiteSimpson => out.bisect(k),
            Scheme::Lgr => {
                if out.order(k) < tol.lgr_order_cap {
                    out.raise_order(k);
                } else {
                    out.bisect(k);
                }
            }
        }
    }
    if out.collocation_points() > tol.max_collocation_points {
        return Err(RefineError::MeshBudgetExceeded {
            rounds: 0,
            collocation_points: out.collocation_points(),
        });
    }
    Ok(out)
}

/// Initial guess sampled from a previous round's trajectory.
pub fn guess_from_trajectory(problem: &NlpProblem, traj: &Trajectory) -> Vec<f64> {
    let layout = problem.layout();
    let mut z = default_guess(problem);
    let times = layout.grid_times(&z);
    for (i, &t) in times.iter().enumerate() {
        let x = traj.state(t);
        for j in 0..layout.nx {
            z[layout.x_index(i, j)] = x[j];
        }
        if layout.grid().points()[i].has_control {
            let u = traj.input(t);
            for j in 0..layout.nu {
                z[layout.u_index(i, j).unwrap()] = u[j];
            }
        }
    }
    for (j, &v) in traj.params().iter().enumerate() {
        z[layout.p_index(j)] = v;
    }
    if let Some(i) = layout.t0_index {
        z[i] = traj.t0();
    }
    if let Some(i) = layout.tf_index {
        z[i] = traj.tf();
    }
    z
}

/// One refinement round's record.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub intervals: usize,
    pub collocation_points: usize,
    pub solver_iterations: usize,
    pub objective: f64,
    pub max_eta: Vec<f64>,
    pub max_eps: f64,
    pub solve_seconds: f64,
    pub compliant: bool,
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct RefinementHistory {
    pub rounds: Vec<RoundRecord>,
}

pub struct RefinementOutcome {
    pub problem: NlpProblem,
    pub solution: NlpSolution,
    pub trajectory: Trajectory,
    pub mesh: Mesh,
    pub estimate: ErrorEstimate,
    pub history: RefinementHistory,
}

/// Solve / interpolate / estimate / refine until every tolerance holds or a
/// budget is exhausted. Each round warm-starts from the previous trajectory.
pub fn solve_with_refinement(
    spec: &ValidatedSpec,
    mesh0: &Mesh,
    tol: &Tolerances,
    mode: RateMode,
    options: &SolverOptions,
) -> Result<RefinementOutcome, RefineError> {
    tol.check()?;
    let mut mesh = mesh0.clone();
    let mut history = RefinementHistory::default();
    let mut prev_traj: Option<Trajectory> = None;

    for round in 0..tol.max_rounds {
        let problem = transcribe(spec, &mesh, mode)?;
        let guess = match &prev_traj {
            Some(t) => guess_from_trajectory(&problem, t),
            None => default_guess(&problem),
        };
        let start = std::time::Instant::now();
        let solution = solve(&problem, &guess, options)
            .map_err(|source| RefineError::Solver { round, source })?;
        let solve_seconds = start.elapsed().as_secs_f64();
        let trajectory = interpolate(&solution, &problem)?;
        let estimate = estimate_error(&trajectory, &problem, tol)?;
        let compliant = estimate.compliant(tol);
        history.rounds.push(RoundRecord {
            round,
            intervals: mesh.intervals(),
            collocation_points: mesh.collocation_points(),
            solver_iterations: solution.iterations,
            objective: solution.objective,
            max_eta: estimate.max_eta(),
            max_eps: estimate.max_eps(),
            solve_seconds,
            compliant,
        });
        if compliant {
            return Ok(RefinementOutcome {
                problem,
                solution,
                trajectory,
                mesh,
                estimate,
                history,
            });
        }
        if round + 1 == tol.max_rounds {
            break;
        }
        mesh = refine(&mesh, &estimate, tol).map_err(|e| match e {
            RefineError::MeshBudgetExceeded {
                collocation_points, ..
            } => RefineError::MeshBudgetExceeded {
                rounds: round + 1,
                collocation_points,
            },
            other => other,
        })?;
        prev_traj = Some(trajectory);
    }
    Err(RefineError::MeshBudgetExceeded {
        rounds: history.rounds.len(),
        collocation_points: mesh.collocation_points(),
    })
}

/// Convenience for a solver error buried in a refinement failure.
impl RefineError {
    pub fn solver_source(&self) -> Option<&SolveError> {
        match self {
            RefineError::Solver { source, .. } => Some(source),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rk45_integrates_exponential_decay() {
        let f = |_t: f64, x: &[f64], out: &mut [f64]| out[0] = -x[0];
        let targets = [0.5, 1.0, 2.0];
        let xs = rk45_to_targets(&f, &[1.0], 0.0, &targets, 1e-10, 1e-10).unwrap();
        for (x, &t) in xs.iter().zip(&targets) {
            assert_abs_diff_eq!(x[0], (-t).exp(), epsilon = 1e-8);
        }
    }

    #[test]
    fn rk45_handles_forced_oscillator() {
        let f = |t: f64, x: &[f64], out: &mut [f64]| {
            out[0] = x[1];
            out[1] = -x[0] + t.sin();
        };
        let xs = rk45_to_targets(&f, &[1.0, 0.0], 0.0, &[3.0], 1e-10, 1e-10).unwrap();
        // closed form: x = cos t + (sin t - t cos t)/2
        let t = 3.0f64;
        let exact = t.cos() + 0.5 * (t.sin() - t * t.cos());
        assert_abs_diff_eq!(xs[0][0], exact, epsilon = 1e-7);
    }

    #[test]
    fn tolerances_validate() {
        assert!(Tolerances::uniform(2, 1e-4, 1e-4).check().is_ok());
        assert!(Tolerances::uniform(2, 0.0, 1e-4).check().is_err());
        let mut t = Tolerances::uniform(1, 1e-4, 1e-4);
        t.max_rounds = 0;
        assert!(t.check().is_err());
    }

    #[test]
    fn refine_is_identity_on_compliant_meshes() {
        let mesh = Mesh::uniform(Scheme::Trapezoidal, 5).unwrap();
        let est = ErrorEstimate {
            eta: vec![vec![1e-9]; 4],
            eps: vec![0.0; 4],
        };
        let tol = Tolerances::uniform(1, 1e-4, 1e-4);
        let out = refine(&mesh, &est, &tol).unwrap();
        assert_eq!(out, mesh);
    }

    #[test]
    fn refine_bisects_single_violating_interval() {
        let mesh = Mesh::uniform(Scheme::HermiteSimpson, 5).unwrap();
        let mut est = ErrorEstimate {
            eta: vec![vec![1e-9]; 4],
            eps: vec![0.0; 4],
        };
        est.eta[2][0] = 1.0;
        let tol = Tolerances::uniform(1, 1e-4, 1e-4);
        let out = refine(&mesh, &est, &tol).unwrap();
        assert_eq!(out.intervals(), mesh.intervals() + 1);
    }

    #[test]
    fn refine_raises_lgr_order_then_bisects() {
        let mesh = Mesh::uniform_lgr(3, 3).unwrap();
        let est = ErrorEstimate {
            eta: vec![vec![1.0], vec![1e-9]],
            eps: vec![0.0; 2],
        };
        let mut tol = Tolerances::uniform(1, 1e-4, 1e-4);
        tol.lgr_order_cap = 4;
        let out = refine(&mesh, &est, &tol).unwrap();
        assert_eq!(out.order(0), 4);
        assert_eq!(out.intervals(), 2);
        let out2 = refine(&out, &est, &tol).unwrap();
        assert_eq!(out2.intervals(), 3);
        assert_eq!(out2.order(0), 4);
    }
}
