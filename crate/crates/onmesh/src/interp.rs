//! Continuous-time trajectory reconstruction from discrete solutions, per
//! discretization scheme: linear (trapezoidal), cubic Hermite with quadratic
//! controls (Hermite-Simpson), and interval-local Lagrange polynomials
//! (Radau).

use crate::collocation::{bary, Scheme};
use crate::error::RefineError;
use crate::ocp::PointArgs;
use crate::transcription::{NlpProblem, NlpSolution};

enum IntervalInterp {
    /// Piecewise-linear states and inputs.
    Linear,
    /// Cubic Hermite states (endpoint values and slopes), quadratic inputs.
    Hermite {
        f0: Vec<f64>,
        f1: Vec<f64>,
    },
    /// Barycentric Lagrange data on the interval-local nodes.
    Lagrange {
        /// local state nodes in [-1, 1] (collocation plus the endpoint)
        xi_x: Vec<f64>,
        bw_x: Vec<f64>,
        /// local control nodes (collocation only)
        xi_u: Vec<f64>,
        bw_u: Vec<f64>,
        /// nx rows of node values and differentiated node values
        x_vals: Vec<Vec<f64>>,
        dx_vals: Vec<Vec<f64>>,
        u_vals: Vec<Vec<f64>>,
        du_vals: Vec<Vec<f64>>,
    },
}

struct Interval {
    t_lo: f64,
    t_hi: f64,
    /// grid point indices of this interval
    points: Vec<usize>,
    interp: IntervalInterp,
}

/// Continuous-time interpolant of a converged discrete solution.
pub struct Trajectory {
    scheme: Scheme,
    nx: usize,
    nu: usize,
    t0: f64,
    tf: f64,
    params: Vec<f64>,
    grid_times: Vec<f64>,
    grid_x: Vec<Vec<f64>>,
    grid_u: Vec<Option<Vec<f64>>>,
    intervals: Vec<Interval>,
}

/// Reconstructs the scheme-consistent interpolant of a converged solution.
pub fn interpolate(
    solution: &NlpSolution,
    problem: &NlpProblem,
) -> Result<Trajectory, RefineError> {
    if !solution.converged() {
        return Err(RefineError::UnconvergedSolution);
    }
    let z = &solution.primal;
    let layout = problem.layout();
    let grid = layout.grid();
    let (nx, nu) = (layout.nx, layout.nu);
    let times = layout.grid_times(z);
    let t0 = layout.t0_of(z);
    let tf = layout.tf_of(z);
    let p = layout.params_of(z).to_vec();

    let grid_x: Vec<Vec<f64>> = (0..grid.n_points())
        .map(|i| layout.state_at(z, i).to_vec())
        .collect();
    let grid_u: Vec<Option<Vec<f64>>> = (0..grid.n_points())
        .map(|i| {
            grid.points()[i]
                .has_control
                .then(|| layout.input_at(z, i).to_vec())
        })
        .collect();

    let dynamics = |pt: usize| -> Vec<f64> {
        let mut f = vec![0.0; nx];
        (problem.spec().spec().dynamics.eval)(
            PointArgs {
                x: &grid_x[pt],
                u: grid_u[pt].as_deref().unwrap_or(&[]),
                t: times[pt],
                p: &p,
            },
            &mut f,
        );
        f
    };

    let mesh = problem.mesh();
    let mut intervals = Vec::with_capacity(mesh.intervals());
    for k in 0..mesh.intervals() {
        let pts: Vec<usize> = grid.interval_points(k).to_vec();
        let t_lo = times[pts[0]];
        let t_hi = times[*pts.last().unwrap()];
        let interp = match mesh.scheme() {
            Scheme::Trapezoidal => IntervalInterp::Linear,
            Scheme::HermiteSimpson => IntervalInterp::Hermite {
                f0: dynamics(pts[0]),
                f1: dynamics(pts[2]),
            },
            Scheme::Lgr => {
                let n = mesh.order(k);
                let rule = crate::collocation::lgr_points(n).expect("validated order");
                let mut xi_x = rule.nodes.clone();
                xi_x.push(1.0);
                let bw_x = bary::weights(&xi_x);
                let xi_u = rule.nodes.clone();
                let bw_u = bary::weights(&xi_u);
                let dmat_x = bary::diff_matrix(&xi_x, &bw_x);
                let dmat_u = bary::diff_matrix(&xi_u, &bw_u);
                let mut x_vals = vec![vec![0.0; n + 1]; nx];
                for (j, &pt) in pts.iter().enumerate() {
                    for r in 0..nx {
                        x_vals[r][j] = grid_x[pt][r];
                    }
                }
                let mut u_vals = vec![vec![0.0; n]; nu];
                for (j, &pt) in pts[..n].iter().enumerate() {
                    let u = grid_u[pt].as_ref().expect("collocation point control");
                    for r in 0..nu {
                        u_vals[r][j] = u[r];
                    }
                }
                let apply = |mat: &Vec<Vec<f64>>, vals: &Vec<f64>| -> Vec<f64> {
                    mat.iter()
                        .map(|row| row.iter().zip(vals).map(|(m, v)| m * v).sum())
                        .collect()
                };
                let dx_vals = x_vals.iter().map(|v| apply(&dmat_x, v)).collect();
                let du_vals = u_vals.iter().map(|v| apply(&dmat_u, v)).collect();
                IntervalInterp::Lagrange {
                    xi_x,
                    bw_x,
                    xi_u,
                    bw_u,
                    x_vals,
                    dx_vals,
                    u_vals,
                    du_vals,
                }
            }
        };
        intervals.push(Interval {
            t_lo,
            t_hi,
            points: pts,
            interp,
        });
    }

    Ok(Trajectory {
        scheme: mesh.scheme(),
        nx,
        nu,
        t0,
        tf,
        params: p,
        grid_times: times,
        grid_x,
        grid_u,
        intervals,
    })
}

impl Trajectory {
    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nu(&self) -> usize {
        self.nu
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn tf(&self) -> f64 {
        self.tf
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn n_intervals(&self) -> usize {
        self.intervals.len()
    }

    pub fn grid_times(&self) -> &[f64] {
        &self.grid_times
    }

    pub fn grid_state(&self, point: usize) -> &[f64] {
        &self.grid_x[point]
    }

    pub fn grid_input(&self, point: usize) -> Option<&[f64]> {
        self.grid_u[point].as_deref()
    }

    pub fn interval_span(&self, k: usize) -> (f64, f64) {
        (self.intervals[k].t_lo, self.intervals[k].t_hi)
    }

    pub fn interval_grid_points(&self, k: usize) -> &[usize] {
        &self.intervals[k].points
    }

    /// Interval containing `t` (clamped to the trajectory span).
    pub fn locate(&self, t: f64) -> usize {
        if t <= self.intervals[0].t_hi {
            return 0;
        }
        let last = self.intervals.len() - 1;
        if t >= self.intervals[last].t_lo {
            return last;
        }
        let mut lo = 0;
        let mut hi = last;
        while lo < hi {
            let mid = (lo + hi) / 2;
            if t > self.intervals[mid].t_hi {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    }

    pub fn state(&self, t: f64) -> Vec<f64> {
        self.state_in(self.locate(t), t)
    }

    pub fn state_deriv(&self, t: f64) -> Vec<f64> {
        self.state_deriv_in(self.locate(t), t)
    }

    pub fn input(&self, t: f64) -> Vec<f64> {
        self.input_in(self.locate(t), t)
    }

    pub fn input_deriv(&self, t: f64) -> Vec<f64> {
        self.input_deriv_in(self.locate(t), t)
    }

    /// State evaluated with the interpolant of a specific interval.
    pub fn state_in(&self, k: usize, t: f64) -> Vec<f64> {
        let iv = &self.intervals[k];
        let h = iv.t_hi - iv.t_lo;
        let s = ((t - iv.t_lo) / h).clamp(0.0, 1.0);
        match &iv.interp {
            IntervalInterp::Linear => {
                let x0 = &self.grid_x[iv.points[0]];
                let x1 = &self.grid_x[iv.points[1]];
                (0..self.nx).map(|r| x0[r] + s * (x1[r] - x0[r])).collect()
            }
            IntervalInterp::Hermite { f0, f1 } => {
                let x0 = &self.grid_x[iv.points[0]];
                let x1 = &self.grid_x[iv.points[2]];
                let (s2, s3) = (s * s, s * s * s);
                let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
                let h10 = s3 - 2.0 * s2 + s;
                let h01 = -2.0 * s3 + 3.0 * s2;
                let h11 = s3 - s2;
                (0..self.nx)
                    .map(|r| h00 * x0[r] + h10 * h * f0[r] + h01 * x1[r] + h11 * h * f1[r])
                    .collect()
            }
            IntervalInterp::Lagrange {
                xi_x, bw_x, x_vals, ..
            } => {
                let xi = 2.0 * s - 1.0;
                (0..self.nx)
                    .map(|r| bary::eval(xi_x, bw_x, &x_vals[r], xi))
                    .collect()
            }
        }
    }

    pub fn state_deriv_in(&self, k: usize, t: f64) -> Vec<f64> {
        let iv = &self.intervals[k];
        let h = iv.t_hi - iv.t_lo;
        let s = ((t - iv.t_lo) / h).clamp(0.0, 1.0);
        match &iv.interp {
            IntervalInterp::Linear => {
                let x0 = &self.grid_x[iv.points[0]];
                let x1 = &self.grid_x[iv.points[1]];
                (0..self.nx).map(|r| (x1[r] - x0[r]) / h).collect()
            }
            IntervalInterp::Hermite { f0, f1 } => {
                let x0 = &self.grid_x[iv.points[0]];
                let x1 = &self.grid_x[iv.points[2]];
                let s2 = s * s;
                let d00 = 6.0 * s2 - 6.0 * s;
                let d10 = 3.0 * s2 - 4.0 * s + 1.0;
                let d01 = -6.0 * s2 + 6.0 * s;
                let d11 = 3.0 * s2 - 2.0 * s;
                (0..self.nx)
                    .map(|r| {
                        (d00 * x0[r] + d10 * h * f0[r] + d01 * x1[r] + d11 * h * f1[r]) / h
                    })
                    .collect()
            }
            IntervalInterp::Lagrange {
                xi_x,
                bw_x,
                dx_vals,
                ..
            } => {
                let xi = 2.0 * s - 1.0;
                (0..self.nx)
                    .map(|r| bary::eval(xi_x, bw_x, &dx_vals[r], xi) * 2.0 / h)
                    .collect()
            }
        }
    }

    pub fn input_in(&self, k: usize, t: f64) -> Vec<f64> {
        let iv = &self.intervals[k];
        let h = iv.t_hi - iv.t_lo;
        let s = ((t - iv.t_lo) / h).clamp(0.0, 1.0);
        match &iv.interp {
            IntervalInterp::Linear => {
                let u0 = self.grid_u[iv.points[0]].as_ref().unwrap();
                let u1 = self.grid_u[iv.points[1]].as_ref().unwrap();
                (0..self.nu).map(|r| u0[r] + s * (u1[r] - u0[r])).collect()
            }
            IntervalInterp::Hermite { .. } => {
                let u0 = self.grid_u[iv.points[0]].as_ref().unwrap();
                let um = self.grid_u[iv.points[1]].as_ref().unwrap();
                let u1 = self.grid_u[iv.points[2]].as_ref().unwrap();
                let l0 = 2.0 * s * s - 3.0 * s + 1.0;
                let lm = -4.0 * s * s + 4.0 * s;
                let l1 = 2.0 * s * s - s;
                (0..self.nu)
                    .map(|r| l0 * u0[r] + lm * um[r] + l1 * u1[r])
                    .collect()
            }
            IntervalInterp::Lagrange {
                xi_u, bw_u, u_vals, ..
            } => {
                let xi = 2.0 * s - 1.0;
                (0..self.nu)
                    .map(|r| bary::eval(xi_u, bw_u, &u_vals[r], xi))
                    .collect()
            }
        }
    }

    pub fn input_deriv_in(&self, k: usize, t: f64) -> Vec<f64> {
        let iv = &self.intervals[k];
        let h = iv.t_hi - iv.t_lo;
        let s = ((t - iv.t_lo) / h).clamp(0.0, 1.0);
        match &iv.interp {
            IntervalInterp::Linear => {
                let u0 = self.grid_u[iv.points[0]].as_ref().unwrap();
                let u1 = self.grid_u[iv.points[1]].as_ref().unwrap();
                (0..self.nu).map(|r| (u1[r] - u0[r]) / h).collect()
            }
            IntervalInterp::Hermite { .. } => {
                let u0 = self.grid_u[iv.points[0]].as_ref().unwrap();
                let um = self.grid_u[iv.points[1]].as_ref().unwrap();
                let u1 = self.grid_u[iv.points[2]].as_ref().unwrap();
                let d0 = 4.0 * s - 3.0;
                let dm = -8.0 * s + 4.0;
                let d1 = 4.0 * s - 1.0;
                (0..self.nu)
                    .map(|r| (d0 * u0[r] + dm * um[r] + d1 * u1[r]) / h)
                    .collect()
            }
            IntervalInterp::Lagrange {
                xi_u,
                bw_u,
                du_vals,
                ..
            } => {
                let xi = 2.0 * s - 1.0;
                (0..self.nu)
                    .map(|r| bary::eval(xi_u, bw_u, &du_vals[r], xi) * 2.0 / h)
                    .collect()
            }
        }
    }

    /// Sample times covering every interval: its boundaries plus
    /// `per_interval` interior points.
    pub fn sample_times(&self, per_interval: usize) -> Vec<f64> {
        let mut ts = Vec::new();
        for iv in &self.intervals {
            for i in 0..=per_interval {
                ts.push(iv.t_lo + (iv.t_hi - iv.t_lo) * i as f64 / (per_interval + 1) as f64);
            }
        }
        ts.push(self.tf);
        ts
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transcription::{IterRecord, SolveStatus};

    fn fake_unconverged() -> NlpSolution {
        NlpSolution {
            primal: vec![],
            row_multipliers: vec![],
            bound_lower_multipliers: vec![],
            bound_upper_multipliers: vec![],
            status: SolveStatus::MaxIterations,
            iterations: 1,
            objective: 0.0,
            iters: Vec::<IterRecord>::new(),
            rate_jacobian_refreshes: 0,
            eval_calls: 0,
        }
    }

    #[test]
    fn interpolate_requires_convergence() {
        let spec = crate::ocp::validate(crate::registry::get("sosr").unwrap().build()).unwrap();
        let mesh = crate::collocation::Mesh::uniform(Scheme::HermiteSimpson, 5).unwrap();
        let p = crate::transcription::transcribe(&spec, &mesh, crate::ocp::RateMode::OnMesh)
            .unwrap();
        let sol = fake_unconverged();
        assert!(matches!(
            interpolate(&sol, &p),
            Err(RefineError::UnconvergedSolution)
        ));
    }
}
