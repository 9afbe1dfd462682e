//! Primal-dual interior-point solver for the transcribed sparse NLPs.
//!
//! Inequality rows get slack variables; bounds are handled by a log barrier
//! with a monotone barrier-parameter schedule. The KKT systems are solved by
//! a sparse LDL^T factorization with inertia-driven primal regularization.
//! Rows flagged constant by the model keep their Jacobian values from the
//! first evaluation (the linear-row fast path).

use std::time::Instant;

use crate::error::{SolveDiagnostics, SolveError};
use crate::sparse::LdlSymbolic;
use crate::transcription::{
    EvalOut, EvalRequest, IterRecord, NlpModel, NlpProblem, NlpSolution, SolveStatus,
};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Convergence tolerance on the unscaled KKT residuals.
    pub tol: f64,
    pub mu_init: f64,
    /// Linear barrier reduction factor.
    pub mu_linear_factor: f64,
    /// Superlinear barrier exponent for the final phase.
    pub mu_superlinear_power: f64,
    pub tau_min: f64,
    /// Relative push of the initial iterate off its bounds.
    pub bound_push: f64,
    /// Relaxation applied to equal lower/upper variable bounds.
    pub bound_relax: f64,
    pub armijo_c1: f64,
    pub max_line_search: usize,
    /// Reuse the constant-row Jacobian values across iterations.
    pub exploit_linear_rows: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iterations: 300,
            tol: 1e-8,
            mu_init: 0.1,
            mu_linear_factor: 0.2,
            mu_superlinear_power: 1.5,
            tau_min: 0.99,
            bound_push: 1e-2,
            bound_relax: 1e-9,
            armijo_c1: 1e-4,
            max_line_search: 30,
            exploit_linear_rows: true,
        }
    }
}

impl SolverOptions {
    fn check(&self) -> Result<(), SolveError> {
        if self.max_iterations == 0 {
            return Err(SolveError::BadOptions("max_iterations must be >= 1".into()));
        }
        for (name, v) in [
            ("tol", self.tol),
            ("mu_init", self.mu_init),
            ("bound_push", self.bound_push),
        ] {
            if !(v > 0.0) {
                return Err(SolveError::BadOptions(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Independent KKT residual recomputation at a returned solution.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.feasibility).max(self.complementarity)
    }
}

/// Solves a transcribed problem from an initial primal guess.
pub fn solve(
    problem: &NlpProblem,
    guess: &[f64],
    options: &SolverOptions,
) -> Result<NlpSolution, SolveError> {
    solve_model(problem, guess, options)
}

/// Recomputes the KKT residuals of a solution directly from the problem
/// functions, independent of solver internals.
pub fn kkt_residuals(problem: &NlpProblem, solution: &NlpSolution) -> KktResiduals {
    kkt_residuals_model(problem, solution)
}

struct Bounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

/// Internal slack bookkeeping: one entry per model row.
#[derive(Clone, Copy)]
enum RowKind {
    /// `g(z) = b`
    Equality(f64),
    /// `g(z) - s = 0`, with bounds on slack index
    Slack(usize),
}

pub fn solve_model<M: NlpModel>(
    model: &M,
    guess: &[f64],
    options: &SolverOptions,
) -> Result<NlpSolution, SolveError> {
    options.check()?;
    let n_z = model.n_vars();
    let m = model.n_rows();
    if guess.len() != n_z {
        return Err(SolveError::BadGuessLength {
            expected: n_z,
            got: guess.len(),
        });
    }

    // ---- internal variable vector w = (z, s) ------------------------------
    let (rl, ru) = model.row_bounds();
    let mut row_kind = Vec::with_capacity(m);
    let mut n_s = 0usize;
    for r in 0..m {
        if rl[r] == ru[r] {
            row_kind.push(RowKind::Equality(rl[r]));
        } else {
            row_kind.push(RowKind::Slack(n_s));
            n_s += 1;
        }
    }
    let n_w = n_z + n_s;

    let mut wb = {
        let (zl, zu) = model.var_bounds();
        let mut lower = Vec::with_capacity(n_w);
        let mut upper = Vec::with_capacity(n_w);
        for i in 0..n_z {
            if zl[i] == zu[i] {
                let relax = options.bound_relax * (1.0 + zl[i].abs());
                lower.push(zl[i] - relax);
                upper.push(zu[i] + relax);
            } else {
                lower.push(zl[i]);
                upper.push(zu[i]);
            }
        }
        for r in 0..m {
            if let RowKind::Slack(_) = row_kind[r] {
                lower.push(rl[r]);
                upper.push(ru[r]);
            }
        }
        Bounds { lower, upper }
    };
    // guard against inverted row bounds slipping through
    for i in 0..n_w {
        if wb.lower[i] > wb.upper[i] {
            let mid = 0.5 * (wb.lower[i] + wb.upper[i]);
            wb.lower[i] = mid;
            wb.upper[i] = mid;
        }
    }

    let push_interior = |v: f64, lo: f64, hi: f64, kappa: f64| -> f64 {
        let (mut plo, mut phi) = (f64::NEG_INFINITY, f64::INFINITY);
        if lo.is_finite() {
            let p = if hi.is_finite() {
                kappa * (hi - lo).min(kappa.max(1.0) * (1.0 + lo.abs()))
            } else {
                kappa * (1.0 + lo.abs())
            };
            plo = lo + p.max(f64::MIN_POSITIVE);
        }
        if hi.is_finite() {
            let p = if lo.is_finite() {
                kappa * (hi - lo).min(kappa.max(1.0) * (1.0 + hi.abs()))
            } else {
                kappa * (1.0 + hi.abs())
            };
            phi = hi - p.max(f64::MIN_POSITIVE);
        }
        if plo > phi {
            0.5 * (lo + hi)
        } else {
            v.clamp(plo, phi)
        }
    };

    let mut w = vec![0.0; n_w];
    w[..n_z].copy_from_slice(guess);
    for i in 0..n_z {
        w[i] = push_interior(w[i], wb.lower[i], wb.upper[i], options.bound_push);
    }

    // first evaluation seeds the slacks
    let mut out = EvalOut::sized_for(model);
    let (evals_before, rate_refreshes_before) = model.counters();
    model.eval(
        &w[..n_z],
        EvalRequest {
            want_grad: false,
            want_jac: false,
            hess: None,
            skip_constant_jac: false,
        },
        &mut out,
    )?;
    for r in 0..m {
        if let RowKind::Slack(si) = row_kind[r] {
            let i = n_z + si;
            w[i] = push_interior(out.rows[r], wb.lower[i], wb.upper[i], options.bound_push);
        }
    }

    // ---- dual initialization ----------------------------------------------
    let mut mu = options.mu_init;
    let mut y = vec![0.0; m];
    let mut zl_mult = vec![0.0; n_w];
    let mut zu_mult = vec![0.0; n_w];
    for i in 0..n_w {
        if wb.lower[i].is_finite() {
            zl_mult[i] = (mu / (w[i] - wb.lower[i])).clamp(1e-12, 1e12);
        }
        if wb.upper[i].is_finite() {
            zu_mult[i] = (mu / (wb.upper[i] - w[i])).clamp(1e-12, 1e12);
        }
    }

    // ---- KKT structure ------------------------------------------------------
    let hess_pat = model.hess_pattern().clone();
    let jac_pat = model.jac_pattern().clone();
    let dim = n_w + m;
    let mut entries: Vec<(usize, usize)> = Vec::new();
    for r in 0..hess_pat.n_rows {
        for &c in hess_pat.row(r) {
            entries.push((r, c));
        }
    }
    let sigma_base = entries.len();
    for i in 0..n_w {
        entries.push((i, i));
    }
    let jac_base = entries.len();
    for r in 0..m {
        for &c in jac_pat.row(r) {
            entries.push((n_w + r, c));
        }
    }
    let link_base = entries.len();
    for r in 0..m {
        if let RowKind::Slack(si) = row_kind[r] {
            entries.push((n_w + r, n_z + si));
        }
    }
    let dual_base = entries.len();
    for r in 0..m {
        entries.push((n_w + r, n_w + r));
    }
    let symbolic = LdlSymbolic::analyze(dim, &entries, true);
    let mut kkt_values = vec![0.0; entries.len()];

    // ---- main loop ------------------------------------------------------------
    let mut iters: Vec<IterRecord> = Vec::new();
    let mut delta_last = 0.0f64;
    let mut nu_merit = 1e-6;
    let mut first_deriv_eval = true;

    let finish = |status: SolveStatus,
                  w: &[f64],
                  y: &[f64],
                  zl_mult: &[f64],
                  zu_mult: &[f64],
                  objective: f64,
                  iters: Vec<IterRecord>| {
        let (evals_after, refreshes_after) = model.counters();
        NlpSolution {
            primal: w[..n_z].to_vec(),
            row_multipliers: y.to_vec(),
            bound_lower_multipliers: zl_mult[..n_z].to_vec(),
            bound_upper_multipliers: zu_mult[..n_z].to_vec(),
            status,
            iterations: iters.len(),
            objective,
            iters,
            rate_jacobian_refreshes: refreshes_after.saturating_sub(rate_refreshes_before),
            eval_calls: evals_after.saturating_sub(evals_before),
        }
    };

    let diag = |iters: &Vec<IterRecord>, mu: f64| -> SolveDiagnostics {
        let last = iters.last();
        SolveDiagnostics {
            iterations: iters.len(),
            mu,
            stationarity: last.map_or(f64::NAN, |r| r.stationarity),
            feasibility: last.map_or(f64::NAN, |r| r.feasibility),
            complementarity: last.map_or(f64::NAN, |r| r.complementarity),
        }
    };

    loop {
        let iter_start = Instant::now();
        let mut eval_seconds = 0.0;
        let mut factor_seconds = 0.0;

        // derivatives at the current iterate
        let t = Instant::now();
        model.eval(
            &w[..n_z],
            EvalRequest {
                want_grad: true,
                want_jac: true,
                hess: Some((1.0, &y)),
                skip_constant_jac: options.exploit_linear_rows && !first_deriv_eval,
            },
            &mut out,
        )?;
        eval_seconds += t.elapsed().as_secs_f64();
        first_deriv_eval = false;
        if !out.objective.is_finite() || out.rows.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::Eval(
                crate::error::TranscribeError::NonFiniteValue {
                    what: "objective or constraints at an accepted iterate".into(),
                },
            ));
        }

        // residuals
        let c_res: Vec<f64> = (0..m)
            .map(|r| match row_kind[r] {
                RowKind::Equality(b) => out.rows[r] - b,
                RowKind::Slack(si) => out.rows[r] - w[n_z + si],
            })
            .collect();
        let mut jty = vec![0.0; n_w];
        for r in 0..m {
            let yr = y[r];
            if yr != 0.0 {
                let lo = jac_pat.row_ptr[r];
                let hi = jac_pat.row_ptr[r + 1];
                for (k, &c) in jac_pat.col_idx[lo..hi].iter().enumerate() {
                    jty[c] += out.jac_values[lo + k] * yr;
                }
                if let RowKind::Slack(si) = row_kind[r] {
                    jty[n_z + si] -= yr;
                }
            }
        }
        let mut dual = vec![0.0; n_w];
        for i in 0..n_w {
            let g = if i < n_z { out.grad[i] } else { 0.0 };
            dual[i] = g + jty[i] + zu_mult[i] - zl_mult[i];
        }
        let stationarity = dual.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let feasibility = c_res.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let comp_err = |mu_ref: f64| -> f64 {
            let mut e = 0.0f64;
            for i in 0..n_w {
                if wb.lower[i].is_finite() {
                    e = e.max((zl_mult[i] * (w[i] - wb.lower[i]) - mu_ref).abs());
                }
                if wb.upper[i].is_finite() {
                    e = e.max((zu_mult[i] * (wb.upper[i] - w[i]) - mu_ref).abs());
                }
            }
            e
        };
        let complementarity = comp_err(0.0);

        if stationarity.max(feasibility).max(complementarity) <= options.tol {
            return Ok(finish(
                SolveStatus::Converged,
                &w,
                &y,
                &zl_mult,
                &zu_mult,
                out.objective,
                iters,
            ));
        }
        if iters.len() >= options.max_iterations {
            return Err(SolveError::MaxIterations(diag(&iters, mu)));
        }

        // barrier update when the subproblem is solved well enough
        if stationarity.max(feasibility).max(comp_err(mu)) <= 10.0 * mu && mu > options.tol / 10.0 {
            mu = (options.tol / 11.0).max(
                (options.mu_linear_factor * mu).min(mu.powf(options.mu_superlinear_power)),
            );
        }
        let tau = options.tau_min.max(1.0 - mu);

        // ---- assemble and factor the KKT matrix ---------------------------
        let mut sigma = vec![0.0; n_w];
        for i in 0..n_w {
            if wb.lower[i].is_finite() {
                sigma[i] += zl_mult[i] / (w[i] - wb.lower[i]);
            }
            if wb.upper[i].is_finite() {
                sigma[i] += zu_mult[i] / (wb.upper[i] - w[i]);
            }
        }
        let delta_c = 1e-8;
        kkt_values[..hess_pat.nnz()].copy_from_slice(&out.hess_values);
        for r in 0..m {
            let lo = jac_pat.row_ptr[r];
            let hi = jac_pat.row_ptr[r + 1];
            kkt_values[jac_base + lo..jac_base + hi]
                .copy_from_slice(&out.jac_values[lo..hi]);
        }
        let mut link_k = 0;
        for r in 0..m {
            if let RowKind::Slack(_) = row_kind[r] {
                kkt_values[link_base + link_k] = -1.0;
                link_k += 1;
            }
        }
        for r in 0..m {
            kkt_values[dual_base + r] = -delta_c;
        }

        let mut delta_w = 0.0f64;
        let factor = loop {
            for i in 0..n_w {
                kkt_values[sigma_base + i] = sigma[i] + delta_w;
            }
            let t = Instant::now();
            let attempt = symbolic.factor(&kkt_values);
            factor_seconds += t.elapsed().as_secs_f64();
            let ok = match &attempt {
                Ok(f) => f.inertia() == (n_w, m, 0),
                Err(_) => false,
            };
            if ok {
                break attempt.unwrap();
            }
            delta_w = if delta_w == 0.0 {
                if delta_last == 0.0 {
                    1e-4
                } else {
                    (delta_last / 3.0).max(1e-10)
                }
            } else {
                delta_w * 10.0
            };
            if delta_w > 1e40 {
                return Err(SolveError::SingularKkt(diag(&iters, mu)));
            }
        };
        if delta_w > 0.0 {
            delta_last = delta_w;
        }

        // ---- Newton step -----------------------------------------------------
        let mut rhs = vec![0.0; dim];
        let mut grad_phi = vec![0.0; n_w];
        grad_phi[..n_z].copy_from_slice(&out.grad);
        for i in 0..n_w {
            if wb.lower[i].is_finite() {
                grad_phi[i] -= mu / (w[i] - wb.lower[i]);
            }
            if wb.upper[i].is_finite() {
                grad_phi[i] += mu / (wb.upper[i] - w[i]);
            }
        }
        for i in 0..n_w {
            rhs[i] = -(grad_phi[i] + jty[i]);
        }
        for r in 0..m {
            rhs[n_w + r] = -c_res[r];
        }
        factor.solve(&mut rhs);
        let dw = &rhs[..n_w];
        let dy = &rhs[n_w..];

        // bound-multiplier steps
        let mut dzl = vec![0.0; n_w];
        let mut dzu = vec![0.0; n_w];
        for i in 0..n_w {
            if wb.lower[i].is_finite() {
                dzl[i] = (mu - zl_mult[i] * dw[i]) / (w[i] - wb.lower[i]) - zl_mult[i];
            }
            if wb.upper[i].is_finite() {
                dzu[i] = (mu + zu_mult[i] * dw[i]) / (wb.upper[i] - w[i]) - zu_mult[i];
            }
        }

        // fraction-to-boundary limits
        let mut alpha_max = 1.0f64;
        for i in 0..n_w {
            if wb.lower[i].is_finite() && dw[i] < 0.0 {
                alpha_max = alpha_max.min(-tau * (w[i] - wb.lower[i]) / dw[i]);
            }
            if wb.upper[i].is_finite() && dw[i] > 0.0 {
                alpha_max = alpha_max.min(tau * (wb.upper[i] - w[i]) / dw[i]);
            }
        }
        let mut alpha_dual = 1.0f64;
        for i in 0..n_w {
            if zl_mult[i] > 0.0 && dzl[i] < 0.0 {
                alpha_dual = alpha_dual.min(-tau * zl_mult[i] / dzl[i]);
            }
            if zu_mult[i] > 0.0 && dzu[i] < 0.0 {
                alpha_dual = alpha_dual.min(-tau * zu_mult[i] / dzu[i]);
            }
        }

        // ---- line search on the l1 merit function --------------------------
        let barrier = |w_trial: &[f64], f_trial: f64| -> f64 {
            let mut phi = f_trial;
            for i in 0..n_w {
                if wb.lower[i].is_finite() {
                    phi -= mu * (w_trial[i] - wb.lower[i]).ln();
                }
                if wb.upper[i].is_finite() {
                    phi -= mu * (wb.upper[i] - w_trial[i]).ln();
                }
            }
            phi
        };
        let c_norm1: f64 = c_res.iter().map(|v| v.abs()).sum();
        let dphi_dir: f64 = grad_phi.iter().zip(dw).map(|(g, d)| g * d).sum();
        if c_norm1 > 1e-14 {
            let nu_req = dphi_dir.abs() / (0.5 * c_norm1) + 1.0;
            if nu_req > nu_merit {
                nu_merit = nu_req;
            }
        }
        let merit0 = barrier(&w, out.objective) + nu_merit * c_norm1;
        let descent = dphi_dir - nu_merit * c_norm1;

        let mut alpha = alpha_max;
        let mut w_trial = w.clone();
        let mut accepted = descent >= 0.0; // degenerate direction: take the full step
        let mut trial_obj = out.objective;
        if !accepted {
            for _ in 0..options.max_line_search {
                for i in 0..n_w {
                    w_trial[i] = w[i] + alpha * dw[i];
                }
                let t = Instant::now();
                let eval_ok = model
                    .eval(
                        &w_trial[..n_z],
                        EvalRequest {
                            want_grad: false,
                            want_jac: false,
                            hess: None,
                            skip_constant_jac: true,
                        },
                        &mut out,
                    )
                    .is_ok();
                eval_seconds += t.elapsed().as_secs_f64();
                if eval_ok && out.objective.is_finite() {
                    let c1: f64 = (0..m)
                        .map(|r| match row_kind[r] {
                            RowKind::Equality(b) => (out.rows[r] - b).abs(),
                            RowKind::Slack(si) => (out.rows[r] - w_trial[n_z + si]).abs(),
                        })
                        .sum();
                    let merit = barrier(&w_trial, out.objective) + nu_merit * c1;
                    if merit.is_finite()
                        && merit <= merit0 + options.armijo_c1 * alpha * descent
                    {
                        accepted = true;
                        trial_obj = out.objective;
                        break;
                    }
                }
                alpha *= 0.5;
            }
        } else {
            for i in 0..n_w {
                w_trial[i] = w[i] + alpha * dw[i];
            }
        }
        if !accepted {
            return Err(SolveError::LineSearchFailure(diag(&iters, mu)));
        }

        // ---- apply the step ---------------------------------------------------
        w.copy_from_slice(&w_trial);
        for r in 0..m {
            y[r] += alpha * dy[r];
        }
        let kappa_sigma = 1e10;
        for i in 0..n_w {
            if wb.lower[i].is_finite() {
                zl_mult[i] = (zl_mult[i] + alpha_dual * dzl[i]).max(f64::MIN_POSITIVE);
                let center = mu / (w[i] - wb.lower[i]);
                zl_mult[i] = zl_mult[i].clamp(center / kappa_sigma, center * kappa_sigma);
            }
            if wb.upper[i].is_finite() {
                zu_mult[i] = (zu_mult[i] + alpha_dual * dzu[i]).max(f64::MIN_POSITIVE);
                let center = mu / (wb.upper[i] - w[i]);
                zu_mult[i] = zu_mult[i].clamp(center / kappa_sigma, center * kappa_sigma);
            }
        }

        let total = iter_start.elapsed().as_secs_f64();
        iters.push(IterRecord {
            iter: iters.len(),
            mu,
            stationarity,
            feasibility,
            complementarity,
            alpha_primal: alpha,
            alpha_dual,
            regularization: delta_w,
            eval_seconds,
            factor_seconds,
            other_seconds: (total - eval_seconds - factor_seconds).max(0.0),
        });
        let _ = trial_obj;
    }
}

pub fn kkt_residuals_model<M: NlpModel>(
    model: &M,
    solution: &NlpSolution,
) -> KktResiduals {
    let n_z = model.n_vars();
    let m = model.n_rows();
    let mut out = EvalOut::sized_for(model);
    model
        .eval(
            &solution.primal,
            EvalRequest {
                want_grad: true,
                want_jac: true,
                hess: None,
                skip_constant_jac: false,
            },
            &mut out,
        )
        .expect("evaluation at the solution");
    let jac_pat = model.jac_pattern().clone();
    let (zl, zu) = model.var_bounds();
    let (rl, ru) = model.row_bounds();

    let mut stat = vec![0.0; n_z];
    stat.copy_from_slice(&out.grad);
    for r in 0..m {
        let yr = solution.row_multipliers[r];
        if yr != 0.0 {
            let lo = jac_pat.row_ptr[r];
            let hi = jac_pat.row_ptr[r + 1];
            for (k, &c) in jac_pat.col_idx[lo..hi].iter().enumerate() {
                stat[c] += out.jac_values[lo + k] * yr;
            }
        }
    }
    for i in 0..n_z {
        stat[i] += solution.bound_upper_multipliers[i] - solution.bound_lower_multipliers[i];
    }
    let stationarity = stat.iter().fold(0.0f64, |a, v| a.max(v.abs()));

    let mut feasibility = 0.0f64;
    for r in 0..m {
        let g = out.rows[r];
        if rl[r].is_finite() {
            feasibility = feasibility.max(rl[r] - g);
        }
        if ru[r].is_finite() {
            feasibility = feasibility.max(g - ru[r]);
        }
    }
    for i in 0..n_z {
        let z = solution.primal[i];
        if zl[i].is_finite() {
            feasibility = feasibility.max(zl[i] - z);
        }
        if zu[i].is_finite() {
            feasibility = feasibility.max(z - zu[i]);
        }
    }
    feasibility = feasibility.max(0.0);

    let mut comp = 0.0f64;
    for i in 0..n_z {
        let z = solution.primal[i];
        if zl[i].is_finite() {
            comp = comp.max((solution.bound_lower_multipliers[i] * (z - zl[i])).abs());
        }
        if zu[i].is_finite() {
            comp = comp.max((solution.bound_upper_multipliers[i] * (zu[i] - z)).abs());
        }
    }
    for r in 0..m {
        if rl[r] == ru[r] {
            continue;
        }
        let g = out.rows[r];
        let yr = solution.row_multipliers[r];
        if ru[r].is_finite() && yr > 0.0 {
            comp = comp.max(yr * (ru[r] - g).abs());
        }
        if rl[r].is_finite() && yr < 0.0 {
            comp = comp.max(-yr * (g - rl[r]).abs());
        }
    }

    KktResiduals {
        stationarity,
        feasibility,
        complementarity: comp,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{PatternBuilder, SparsityPattern};
    use std::sync::Arc;

    /// Tiny dense test model built from closures.
    struct ToyModel {
        n: usize,
        zl: Vec<f64>,
        zu: Vec<f64>,
        rl: Vec<f64>,
        ru: Vec<f64>,
        jac: Arc<SparsityPattern>,
        hess: Arc<SparsityPattern>,
        objective: fn(&[f64]) -> (f64, Vec<f64>),
        rows: fn(&[f64]) -> (Vec<f64>, Vec<f64>),
        hess_fn: fn(&[f64], f64, &[f64]) -> Vec<f64>,
    }

    impl ToyModel {
        fn new(
            n: usize,
            m: usize,
            zl: Vec<f64>,
            zu: Vec<f64>,
            rl: Vec<f64>,
            ru: Vec<f64>,
            objective: fn(&[f64]) -> (f64, Vec<f64>),
            rows: fn(&[f64]) -> (Vec<f64>, Vec<f64>),
            hess_fn: fn(&[f64], f64, &[f64]) -> Vec<f64>,
        ) -> ToyModel {
            let mut jb = PatternBuilder::new();
            for r in 0..m {
                for c in 0..n {
                    jb.push(r, c);
                }
            }
            let (jac, _) = jb.build(m, n);
            let mut hb = PatternBuilder::new();
            for r in 0..n {
                for c in 0..=r {
                    hb.push(r, c);
                }
            }
            let (hess, _) = hb.build(n, n);
            ToyModel {
                n,
                zl,
                zu,
                rl,
                ru,
                jac: Arc::new(jac),
                hess: Arc::new(hess),
                objective,
                rows,
                hess_fn,
            }
        }
    }

    impl NlpModel for ToyModel {
        fn n_vars(&self) -> usize {
            self.n
        }
        fn n_rows(&self) -> usize {
            self.rl.len()
        }
        fn var_bounds(&self) -> (&[f64], &[f64]) {
            (&self.zl, &self.zu)
        }
        fn row_bounds(&self) -> (&[f64], &[f64]) {
            (&self.rl, &self.ru)
        }
        fn jac_pattern(&self) -> &Arc<SparsityPattern> {
            &self.jac
        }
        fn hess_pattern(&self) -> &Arc<SparsityPattern> {
            &self.hess
        }
        fn eval(
            &self,
            z: &[f64],
            req: EvalRequest<'_>,
            out: &mut EvalOut,
        ) -> Result<(), crate::error::TranscribeError> {
            let (f, g) = (self.objective)(z);
            out.objective = f;
            if req.want_grad {
                out.grad = g;
            }
            let (rows, jac) = (self.rows)(z);
            out.rows = rows;
            if req.want_jac {
                out.jac_values = jac;
            }
            if let Some((sigma, y)) = req.hess {
                out.hess_values = (self.hess_fn)(z, sigma, y);
            }
            Ok(())
        }
    }

    #[test]
    fn qp_with_active_lower_bound() {
        // min x^2 s.t. x >= 1: x* = 1, row multiplier magnitude 2
        let model = ToyModel::new(
            1,
            1,
            vec![f64::NEG_INFINITY],
            vec![f64::INFINITY],
            vec![1.0],
            vec![f64::INFINITY],
            |z| (z[0] * z[0], vec![2.0 * z[0]]),
            |z| (vec![z[0]], vec![1.0]),
            |_, sigma, _| vec![2.0 * sigma],
        );
        let sol = solve_model(&model, &[3.0], &SolverOptions::default()).unwrap();
        assert!(sol.converged());
        assert!((sol.primal[0] - 1.0).abs() < 1e-7, "x = {}", sol.primal[0]);
        // lower-side activity carries a negative row multiplier
        assert!((sol.row_multipliers[0] + 2.0).abs() < 1e-6);
        let res = kkt_residuals_model(&model, &sol);
        assert!(res.max() <= 1e-8, "{res:?}");
    }

    #[test]
    fn equality_constrained_quadratic() {
        // min ||z||^2 s.t. z1 + z2 = 1 -> (1/2, 1/2)
        let model = ToyModel::new(
            2,
            1,
            vec![f64::NEG_INFINITY; 2],
            vec![f64::INFINITY; 2],
            vec![1.0],
            vec![1.0],
            |z| {
                (
                    z[0] * z[0] + z[1] * z[1],
                    vec![2.0 * z[0], 2.0 * z[1]],
                )
            },
            |z| (vec![z[0] + z[1]], vec![1.0, 1.0]),
            |_, sigma, _| vec![2.0 * sigma, 0.0, 2.0 * sigma],
        );
        let sol = solve_model(&model, &[5.0, -3.0], &SolverOptions::default()).unwrap();
        assert!(sol.converged());
        assert!((sol.primal[0] - 0.5).abs() < 1e-7);
        assert!((sol.primal[1] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn rejects_bad_options() {
        let model = ToyModel::new(
            1,
            0,
            vec![f64::NEG_INFINITY],
            vec![f64::INFINITY],
            vec![],
            vec![],
            |z| (z[0] * z[0], vec![2.0 * z[0]]),
            |_| (vec![], vec![]),
            |_, sigma, _| vec![2.0 * sigma],
        );
        let opts = SolverOptions {
            max_iterations: 0,
            ..Default::default()
        };
        assert!(matches!(
            solve_model(&model, &[1.0], &opts),
            Err(SolveError::BadOptions(_))
        ));
    }

    #[test]
    fn deterministic_iterate_sequence() {
        let run = || {
            let model = ToyModel::new(
                2,
                1,
                vec![-10.0, -10.0],
                vec![10.0, 10.0],
                vec![1.0],
                vec![f64::INFINITY],
                |z| {
                    (
                        (z[0] - 2.0).powi(2) + z[1] * z[1],
                        vec![2.0 * (z[0] - 2.0), 2.0 * z[1]],
                    )
                },
                |z| (vec![z[0] * z[0] + z[1]], vec![2.0 * z[0], 1.0]),
                |z, sigma, y| {
                    let _ = z;
                    vec![2.0 * sigma + 2.0 * y[0], 0.0, 2.0 * sigma]
                },
            );
            solve_model(&model, &[0.5, 0.5], &SolverOptions::default()).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.primal, b.primal);
        for (ra, rb) in a.iters.iter().zip(&b.iters) {
            assert_eq!(ra.mu, rb.mu);
            assert_eq!(ra.alpha_primal, rb.alpha_primal);
            assert_eq!(ra.stationarity, rb.stationarity);
        }
    }
}
