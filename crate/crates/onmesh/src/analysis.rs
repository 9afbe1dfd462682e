//! Singular-arc diagnostics (costates, switching function, fluctuation
//! metrics), regularization sweeps, and cross-mode benchmarking.

use sha2::{Digest, Sha256};

use crate::collocation::{lgr_points, Mesh, Scheme};
use crate::error::AnalysisError;
use crate::interp::{interpolate, Trajectory};
use crate::ocp::{apply_regularization, augment_add_state, PointArgs, RateMode, RegNorm, ValidatedSpec};
use crate::solver::{solve, SolverOptions};
use crate::transcription::{default_guess, transcribe, DefectKind, NlpProblem, NlpSolution};

/// Costate estimates at every grid point, from the defect multipliers.
///
/// The multiplier convention is `L = f + y^T c`; with the integrated defect
/// forms of the h-schemes the interval multipliers approximate `-lambda` on
/// the interval, and with the Radau differential form the collocation
/// multipliers scale by the local quadrature weights. The resulting sign
/// satisfies `lambda_dot = -dH/dx` numerically.
pub fn estimate_costates(
    solution: &NlpSolution,
    problem: &NlpProblem,
) -> Result<Vec<Vec<f64>>, AnalysisError> {
    let parts = problem.partitions();
    if parts.defect.len() == 0 || solution.row_multipliers.len() < parts.defect.end {
        return Err(AnalysisError::MissingMultipliers);
    }
    let layout = problem.layout();
    let grid = layout.grid();
    let nx = layout.nx;
    let y = &solution.row_multipliers;
    let mesh = problem.mesh();
    let dt = layout.tf_of(&solution.primal) - layout.t0_of(&solution.primal);
    let h: Vec<f64> = mesh.fractions().iter().map(|f| f * dt).collect();
    let blocks = problem.defect_blocks();
    let mut lambda = vec![vec![0.0; nx]; grid.n_points()];

    match mesh.scheme() {
        Scheme::Trapezoidal => {
            // mu[k] lives on interval k; lambda at interior nodes is the
            // length-weighted average of the adjacent interval values
            let mu = |k: usize, r: usize| y[parts.defect.start + blocks[k].row_base + r];
            let k_last = mesh.intervals() - 1;
            for r in 0..nx {
                lambda[0][r] = -mu(0, r);
                lambda[grid.n_points() - 1][r] = -mu(k_last, r);
            }
            for i in 1..grid.n_points() - 1 {
                for r in 0..nx {
                    let num = h[i - 1] * mu(i - 1, r) + h[i] * mu(i, r);
                    lambda[i][r] = -num / (h[i - 1] + h[i]);
                }
            }
        }
        Scheme::HermiteSimpson => {
            // Simpson-row multipliers carry the costate; Hermite rows hold
            // the interior reconstruction and are not needed here
            let simpson: Vec<usize> = blocks
                .iter()
                .enumerate()
                .filter(|(_, b)| b.kind == DefectKind::Simpson)
                .map(|(i, _)| i)
                .collect();
            let mu = |k: usize, r: usize| {
                y[parts.defect.start + blocks[simpson[k]].row_base + r]
            };
            let k_total = mesh.intervals();
            for r in 0..nx {
                lambda[0][r] = -mu(0, r);
                lambda[2 * k_total][r] = -mu(k_total - 1, r);
            }
            for k in 0..k_total {
                for r in 0..nx {
                    lambda[2 * k + 1][r] = -mu(k, r);
                }
            }
            for k in 1..k_total {
                for r in 0..nx {
                    let num = h[k - 1] * mu(k - 1, r) + h[k] * mu(k, r);
                    lambda[2 * k][r] = -num / (h[k - 1] + h[k]);
                }
            }
        }
        Scheme::Lgr => {
            // lambda at a collocation point is -mu / w_local; the
            // non-collocated endpoint extrapolates the last interval
            for k in 0..mesh.intervals() {
                let rule = lgr_points(mesh.order(k)).expect("validated order");
                let pts = grid.interval_points(k);
                for (i, &pt) in pts.iter().take(mesh.order(k)).enumerate() {
                    let block = blocks
                        .iter()
                        .find(|b| {
                            b.interval == k && b.kind == DefectKind::Lgr { local: i }
                        })
                        .expect("defect block per collocation point");
                    for r in 0..nx {
                        let mu = y[parts.defect.start + block.row_base + r];
                        lambda[pt][r] = -mu / rule.weights[i];
                    }
                }
            }
            // endpoint by barycentric extrapolation over the last interval
            let k = mesh.intervals() - 1;
            let n = mesh.order(k);
            let rule = lgr_points(n).unwrap();
            let w = crate::collocation::bary::weights(&rule.nodes);
            let ew = crate::collocation::bary::eval_weights(&rule.nodes, &w, 1.0);
            let pts = grid.interval_points(k);
            let last = grid.n_points() - 1;
            for r in 0..nx {
                lambda[last][r] = pts
                    .iter()
                    .take(n)
                    .zip(&ew)
                    .map(|(&pt, &wi)| wi * lambda[pt][r])
                    .sum();
            }
        }
    }
    Ok(lambda)
}

/// Pointwise classification against the switching function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ArcClass {
    UpperBang,
    LowerBang,
    Singular,
}

/// A contiguous singular window (two or more consecutive grid points).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ArcWindow {
    pub start_index: usize,
    pub end_index: usize,
    pub start_time: f64,
    pub end_time: f64,
    /// Discrete total variation of the rate input over the window.
    pub tv_rate_input: f64,
}

/// Switching-function diagnostic of an add-state-mode solution.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ArcReport {
    pub times: Vec<f64>,
    /// Costate of the promoted state (the switching function).
    pub switching: Vec<f64>,
    /// Value of the rate input at each grid point.
    pub rate_input: Vec<f64>,
    pub classes: Vec<ArcClass>,
    pub band: f64,
    pub windows: Vec<ArcWindow>,
}

impl ArcReport {
    /// Sign switches of the switching function between consecutive
    /// non-singular points.
    pub fn sign_switches(&self) -> usize {
        let mut last: Option<ArcClass> = None;
        let mut switches = 0;
        for &c in &self.classes {
            if c == ArcClass::Singular {
                continue;
            }
            if let Some(prev) = last {
                if prev != c {
                    switches += 1;
                }
            }
            last = Some(c);
        }
        switches
    }

    pub fn longest_window(&self) -> Option<&ArcWindow> {
        self.windows
            .iter()
            .max_by(|a, b| {
                (a.end_time - a.start_time)
                    .partial_cmp(&(b.end_time - b.start_time))
                    .unwrap()
            })
    }
}

/// Classifies each grid point by the sign of the promoted input's switching
/// function. `band_rel` scales the zero band relative to the switching
/// function's sup-norm (default 1e-3).
pub fn switching_report(
    solution: &NlpSolution,
    problem: &NlpProblem,
    band_rel: Option<f64>,
) -> Result<ArcReport, AnalysisError> {
    let info = problem
        .spec()
        .add_state
        .as_ref()
        .ok_or(AnalysisError::NotAddStateMode)?;
    let pair = &info.pairs[0];
    let lambda = estimate_costates(solution, problem)?;
    let layout = problem.layout();
    let times = layout.grid_times(&solution.primal);

    let switching: Vec<f64> = lambda.iter().map(|l| l[pair.state_index]).collect();
    let rate_input: Vec<f64> = (0..layout.grid().n_points())
        .map(|i| {
            layout
                .u_index(i, pair.input_slot)
                .map_or(f64::NAN, |idx| solution.primal[idx])
        })
        .collect();
    let sup = switching.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let band = band_rel.unwrap_or(1e-3) * sup;

    let classes: Vec<ArcClass> = switching
        .iter()
        .map(|&s| {
            if s.abs() <= band {
                ArcClass::Singular
            } else if s < 0.0 {
                ArcClass::UpperBang
            } else {
                ArcClass::LowerBang
            }
        })
        .collect();

    let mut windows = Vec::new();
    let mut start: Option<usize> = None;
    for i in 0..=classes.len() {
        let singular = i < classes.len() && classes[i] == ArcClass::Singular;
        match (singular, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                // a single isolated point is a crossing, not a window
                if i - s >= 2 {
                    let tv = rate_input[s..i]
                        .windows(2)
                        .map(|w| (w[1] - w[0]).abs())
                        .filter(|v| v.is_finite())
                        .sum();
                    windows.push(ArcWindow {
                        start_index: s,
                        end_index: i - 1,
                        start_time: times[s],
                        end_time: times[i - 1],
                        tv_rate_input: tv,
                    });
                }
                start = None;
            }
            _ => {}
        }
    }

    Ok(ArcReport {
        times,
        switching,
        rate_input,
        classes,
        band,
        windows,
    })
}

/// Which trajectory quantity plays the role of the bounded rate.
#[derive(Debug, Clone, Copy)]
pub enum RateQuantity {
    /// An input holding the rate directly (the add-state rate input).
    InputValue(usize),
    /// The time derivative of an input interpolant (on-mesh solutions).
    InputDerivative(usize),
}

impl RateQuantity {
    fn eval(&self, traj: &Trajectory, k: usize, t: f64) -> f64 {
        match *self {
            RateQuantity::InputValue(j) => traj.input_in(k, t)[j],
            RateQuantity::InputDerivative(j) => traj.input_deriv_in(k, t)[j],
        }
    }
}

/// Max deviation `|rate(t) - x1(t)|` over a window, sampled at ten points
/// per interval. For the regulator family the optimal singular arc satisfies
/// `rate = x1` exactly.
pub fn singular_arc_deviation(
    traj: &Trajectory,
    window: (f64, f64),
    rate: RateQuantity,
) -> Result<f64, AnalysisError> {
    let (lo, hi) = window;
    if !(hi > lo) {
        return Err(AnalysisError::EmptyWindow);
    }
    let mut dev = f64::NAN;
    let mut any = false;
    for k in 0..traj.n_intervals() {
        let (t_lo, t_hi) = traj.interval_span(k);
        if t_hi < lo || t_lo > hi {
            continue;
        }
        for i in 0..=10 {
            let t = t_lo + (t_hi - t_lo) * i as f64 / 10.0;
            if t < lo || t > hi {
                continue;
            }
            let r = rate.eval(traj, k, t);
            let x1 = traj.state_in(k, t)[0];
            let d = (r - x1).abs();
            if !any || d > dev {
                dev = d;
                any = true;
            }
        }
    }
    if any {
        Ok(dev)
    } else {
        Err(AnalysisError::EmptyWindow)
    }
}

/// Discrete total variation of input `j`'s grid values inside a window.
pub fn discrete_input_tv(traj: &Trajectory, j: usize, window: (f64, f64)) -> f64 {
    let mut prev: Option<f64> = None;
    let mut tv = 0.0;
    for (i, &t) in traj.grid_times().iter().enumerate() {
        if t < window.0 || t > window.1 {
            continue;
        }
        if let Some(u) = traj.grid_input(i) {
            if let Some(p) = prev {
                tv += (u[j] - p).abs();
            }
            prev = Some(u[j]);
        }
    }
    tv
}

/// Discrete total variation of the rate of input `j` (interval-local
/// interpolant derivatives at the interval's grid points) inside a window.
pub fn discrete_input_rate_tv(traj: &Trajectory, j: usize, window: (f64, f64)) -> f64 {
    let mut seq = Vec::new();
    for k in 0..traj.n_intervals() {
        let times = traj.grid_times();
        for &pt in traj.interval_grid_points(k) {
            let t = times[pt];
            if t < window.0 || t > window.1 {
                continue;
            }
            seq.push(traj.input_deriv_in(k, t)[j]);
        }
    }
    seq.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

// ---------------------------------------------------------------------------
// Benchmarking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BenchCell {
    pub mode: RateMode,
    pub scheme: Scheme,
    pub mesh_nodes: usize,
    pub collocation_points: usize,
    pub n_vars: usize,
    pub n_rows: usize,
    pub iterations: usize,
    pub mean_iter_seconds: f64,
    pub min_iter_seconds: f64,
    pub mean_eval_seconds: f64,
    pub mean_factor_seconds: f64,
    pub mean_other_seconds: f64,
    pub total_seconds: f64,
    pub objective: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BenchReport {
    pub problem: String,
    pub repeats: usize,
    /// Hash of everything shared across cells: meshes, options and the
    /// initial-guess rule, proving the comparison ran on identical inputs.
    pub config_hash: String,
    pub cells: Vec<BenchCell>,
}

impl BenchReport {
    /// Mean per-iteration seconds for a (mode, mesh nodes) cell.
    pub fn mean_iter_seconds(&self, mode: RateMode, nodes: usize) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.mode == mode && c.mesh_nodes == nodes && c.error.is_none())
            .map(|c| c.mean_iter_seconds)
    }

    /// Human-readable aligned table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "problem {}  repeats {}  config {}\n",
            self.problem, self.repeats, &self.config_hash[..12.min(self.config_hash.len())]
        ));
        s.push_str(&format!(
            "{:<10} {:>6} {:>8} {:>8} {:>7} {:>12} {:>12} {:>12} {:>12}\n",
            "mode", "nodes", "vars", "rows", "iters", "iter[ms]", "eval[ms]", "factor[ms]", "total[s]"
        ));
        for c in &self.cells {
            if let Some(err) = &c.error {
                s.push_str(&format!(
                    "{:<10} {:>6} failed: {}\n",
                    c.mode.as_str(),
                    c.mesh_nodes,
                    err
                ));
                continue;
            }
            s.push_str(&format!(
                "{:<10} {:>6} {:>8} {:>8} {:>7} {:>12.4} {:>12.4} {:>12.4} {:>12.4}\n",
                c.mode.as_str(),
                c.mesh_nodes,
                c.n_vars,
                c.n_rows,
                c.iterations,
                1e3 * c.mean_iter_seconds,
                1e3 * c.mean_eval_seconds,
                1e3 * c.mean_factor_seconds,
                c.total_seconds,
            ));
        }
        s
    }
}

fn hash_config(
    problem: &str,
    modes: &[RateMode],
    meshes: &[Mesh],
    options: &SolverOptions,
) -> String {
    let mut hasher = Sha256::new();
    hasher.update(problem.as_bytes());
    hasher.update(b"|guess=linear-endpoint-interpolation|");
    hasher.update(serde_json::to_vec(modes).unwrap());
    hasher.update(serde_json::to_vec(meshes).unwrap());
    hasher.update(serde_json::to_vec(options).unwrap());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs every (mode, mesh) cell `repeats` times sequentially with the same
/// cold initial guess and solver options, and reports per-iteration wall
/// time split by phase. Solver failures are recorded per cell.
pub fn benchmark(
    spec: &ValidatedSpec,
    problem_name: &str,
    modes: &[RateMode],
    meshes: &[Mesh],
    repeats: usize,
    options: &SolverOptions,
) -> Result<BenchReport, AnalysisError> {
    if repeats == 0 {
        return Err(AnalysisError::BadRequest("repeats must be >= 1".into()));
    }
    if modes.is_empty() || meshes.is_empty() {
        return Err(AnalysisError::BadRequest(
            "at least one mode and one mesh are required".into(),
        ));
    }
    let config_hash = hash_config(problem_name, modes, meshes, options);
    let mut cells = Vec::new();
    for mesh in meshes {
        for &mode in modes {
            let cell = bench_cell(spec, mesh, mode, repeats, options);
            cells.push(cell);
        }
    }
    Ok(BenchReport {
        problem: problem_name.to_string(),
        repeats,
        config_hash,
        cells,
    })
}

fn bench_cell(
    spec: &ValidatedSpec,
    mesh: &Mesh,
    mode: RateMode,
    repeats: usize,
    options: &SolverOptions,
) -> BenchCell {
    let mut cell = BenchCell {
        mode,
        scheme: mesh.scheme(),
        mesh_nodes: mesh.nodes(),
        collocation_points: mesh.collocation_points(),
        n_vars: 0,
        n_rows: 0,
        iterations: 0,
        mean_iter_seconds: 0.0,
        min_iter_seconds: 0.0,
        mean_eval_seconds: 0.0,
        mean_factor_seconds: 0.0,
        mean_other_seconds: 0.0,
        total_seconds: 0.0,
        objective: None,
        error: None,
    };
    let problem = match transcribe(spec, mesh, mode) {
        Ok(p) => p,
        Err(e) => {
            cell.error = Some(e.to_string());
            return cell;
        }
    };
    use crate::transcription::NlpModel;
    cell.n_vars = problem.n_vars();
    cell.n_rows = problem.n_rows();
    let guess = default_guess(&problem);

    let mut total = 0.0;
    let mut total_eval = 0.0;
    let mut total_factor = 0.0;
    let mut total_other = 0.0;
    let mut n_iters = 0usize;
    let mut min_iter = f64::INFINITY;
    for _ in 0..repeats {
        match solve(&problem, &guess, options) {
            Ok(sol) => {
                cell.iterations = sol.iterations;
                cell.objective = Some(sol.objective);
                for r in &sol.iters {
                    let t = r.total_seconds();
                    total += t;
                    total_eval += r.eval_seconds;
                    total_factor += r.factor_seconds;
                    total_other += r.other_seconds;
                    min_iter = min_iter.min(t);
                    n_iters += 1;
                }
            }
            Err(e) => {
                cell.error = Some(e.to_string());
                return cell;
            }
        }
    }
    if n_iters > 0 {
        cell.mean_iter_seconds = total / n_iters as f64;
        cell.mean_eval_seconds = total_eval / n_iters as f64;
        cell.mean_factor_seconds = total_factor / n_iters as f64;
        cell.mean_other_seconds = total_other / n_iters as f64;
        cell.min_iter_seconds = min_iter;
        cell.total_seconds = total / repeats as f64;
    }
    cell
}

// ---------------------------------------------------------------------------
// Regularization sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SweepRow {
    pub rho: f64,
    /// L2 distance of the achieved rate from the dense reference rate,
    /// by quadrature on the solve mesh.
    pub rate_l2: f64,
    /// Discrete total variation of the rate input over the horizon.
    pub tv: f64,
    /// Objective without the penalty term.
    pub base_objective: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Same metric for the on-mesh solve on the identical mesh.
    pub onmesh_rate_l2: f64,
    pub onmesh_rate_tv: f64,
    pub mesh_nodes: usize,
    pub reference_nodes: usize,
}

/// Quadrature of `(rate(t) - reference_rate(t))^2` over the horizon on the
/// solve mesh's collocation grid.
fn rate_l2(
    problem: &NlpProblem,
    traj: &Trajectory,
    rate: RateQuantity,
    reference: &Trajectory,
    ref_input: usize,
) -> f64 {
    let grid = problem.layout().grid();
    let dt = traj.tf() - traj.t0();
    let times = traj.grid_times();
    let mut acc = 0.0;
    for &pt in grid.collocation_points() {
        let gp = grid.points()[pt];
        let t = times[pt];
        let k = traj.locate(t);
        let r = rate.eval(traj, k, t);
        let r_ref = reference.input_deriv(t)[ref_input];
        acc += gp.quad_w * dt * (r - r_ref) * (r - r_ref);
    }
    acc.sqrt()
}

/// Evaluates the unregularized running cost of a trajectory by quadrature.
fn base_objective(problem: &NlpProblem, base: &ValidatedSpec, traj: &Trajectory) -> f64 {
    let grid = problem.layout().grid();
    let times = traj.grid_times();
    let dt = traj.tf() - traj.t0();
    let spec = base.spec();
    let mut obj = 0.0;
    if let Some(l) = &spec.lagrange {
        for &pt in grid.collocation_points() {
            let t = times[pt];
            let x = traj.state(t);
            let u = traj.input(t);
            let mut v = [0.0];
            (l.eval)(
                PointArgs {
                    x: &x,
                    u: &u,
                    t,
                    p: traj.params(),
                },
                &mut v,
            );
            obj += grid.points()[pt].quad_w * dt * v[0];
        }
    }
    obj
}

/// Sweeps the penalty weight of the regularized add-state formulation and
/// reports rate accuracy (against a dense reference), rate total variation
/// and the base objective, together with the on-mesh values on the same
/// mesh.
pub fn regularization_sweep(
    spec: &ValidatedSpec,
    rho_list: &[f64],
    mesh: &Mesh,
    norm: RegNorm,
    options: &SolverOptions,
    reference: &Trajectory,
    reference_nodes: usize,
) -> Result<SweepReport, AnalysisError> {
    if rho_list.is_empty() {
        return Err(AnalysisError::BadRequest("empty rho list".into()));
    }
    let add_state =
        augment_add_state(spec).map_err(|e| AnalysisError::BadRequest(e.to_string()))?;
    let info = add_state.add_state.clone().expect("add-state info");
    let pair = info.pairs[0].clone();

    // on-mesh baseline on the same mesh
    let onmesh_problem = transcribe(spec, mesh, RateMode::OnMesh)?;
    let onmesh_sol = solve(&onmesh_problem, &default_guess(&onmesh_problem), options)?;
    let onmesh_traj = interpolate(&onmesh_sol, &onmesh_problem)?;
    let j_orig = spec.rate_bounded_inputs()[0];
    let onmesh_rate_l2 = rate_l2(
        &onmesh_problem,
        &onmesh_traj,
        RateQuantity::InputDerivative(j_orig),
        reference,
        j_orig,
    );
    let onmesh_rate_tv = discrete_input_rate_tv(
        &onmesh_traj,
        j_orig,
        (onmesh_traj.t0(), onmesh_traj.tf()),
    );

    let mut rows = Vec::new();
    for &rho in rho_list {
        let row = (|| -> Result<SweepRow, AnalysisError> {
            let reg = apply_regularization(&add_state, rho, norm)
                .map_err(|e| AnalysisError::BadRequest(e.to_string()))?;
            let problem = transcribe(&reg, mesh, RateMode::OnMesh)?;
            let sol = solve(&problem, &default_guess(&problem), options)?;
            let traj = interpolate(&sol, &problem)?;
            let l2 = rate_l2(
                &problem,
                &traj,
                RateQuantity::InputValue(pair.input_slot),
                reference,
                j_orig,
            );
            let tv = discrete_input_tv(&traj, pair.input_slot, (traj.t0(), traj.tf()));
            let base = base_objective(&problem, &add_state, &traj);
            Ok(SweepRow {
                rho,
                rate_l2: l2,
                tv,
                base_objective: base,
                error: None,
            })
        })();
        rows.push(match row {
            Ok(r) => r,
            Err(e) => SweepRow {
                rho,
                rate_l2: f64::NAN,
                tv: f64::NAN,
                base_objective: f64::NAN,
                error: Some(e.to_string()),
            },
        });
    }
    Ok(SweepReport {
        rows,
        onmesh_rate_l2,
        onmesh_rate_tv,
        mesh_nodes: mesh.nodes(),
        reference_nodes,
    })
}

/// Dense-mesh on-mesh reference solve and interpolation.
pub fn dense_reference(
    spec: &ValidatedSpec,
    scheme: Scheme,
    nodes: usize,
    options: &SolverOptions,
) -> Result<Trajectory, AnalysisError> {
    let mesh = match scheme {
        Scheme::Lgr => Mesh::uniform_lgr(nodes, 4),
        _ => Mesh::uniform(scheme, nodes),
    }
    .map_err(|e| AnalysisError::ReferenceFailed(e.to_string()))?;
    let problem = transcribe(spec, &mesh, RateMode::OnMesh)
        .map_err(|e| AnalysisError::ReferenceFailed(e.to_string()))?;
    let sol = solve(&problem, &default_guess(&problem), options)
        .map_err(|e| AnalysisError::ReferenceFailed(e.to_string()))?;
    interpolate(&sol, &problem).map_err(|e| AnalysisError::ReferenceFailed(e.to_string()))
}
