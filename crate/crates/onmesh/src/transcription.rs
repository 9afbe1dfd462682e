//! Transcription of a validated problem on a mesh into a sparse NLP with
//! partitioned constraints (defect, path, boundary, linear rate rows) and
//! exact sparsity structure.
//!
//! Pattern construction and numeric assembly share one traversal: the
//! recording pass registers every (row, col) emission in order, and the
//! writing pass replays the identical sequence against the slot map, so the
//! two can never drift apart.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::collocation::{
    lgr_diff_matrix, lgr_points, quadrature_weights, DiffOperator, Mesh, Scheme, TimeMap,
};
use crate::error::TranscribeError;
use crate::ocp::{
    augment_add_path, augment_add_state, BoundaryArgs, BoundaryKit, JacClass, PointArgs, PointKit,
    RateMode, ValidatedSpec,
};
use crate::rate::{build_onmesh, RateBlock, RateTarget, VarKind};
use crate::sparse::{PatternBuilder, SparseMatrix, SparsityPattern};

/// One grid point of the transcription.
#[derive(Debug, Clone, Copy)]
pub struct GridPoint {
    pub interval: usize,
    pub tau: f64,
    pub has_control: bool,
    pub collocated: bool,
    /// Normalized quadrature weight (zero at non-collocated points).
    pub quad_w: f64,
}

/// Grid points of the mesh in time order, with per-interval membership.
#[derive(Debug, Clone)]
pub struct GridPlan {
    pub scheme: Scheme,
    points: Vec<GridPoint>,
    interval_points: Vec<Vec<usize>>,
    colloc_pts: Vec<usize>,
    colloc_of_point: Vec<Option<usize>>,
    lgr_ops: Vec<Option<Arc<DiffOperator>>>,
}

impl GridPlan {
    pub fn build(mesh: &Mesh) -> Result<GridPlan, TranscribeError> {
        let boundaries = mesh.boundaries();
        let k_total = mesh.intervals();
        let mut points = Vec::new();
        let mut interval_points = vec![Vec::new(); k_total];
        let mut lgr_ops = vec![None; k_total];
        match mesh.scheme() {
            Scheme::Trapezoidal => {
                for (i, &tau) in boundaries.iter().enumerate() {
                    points.push(GridPoint {
                        interval: i.min(k_total - 1),
                        tau,
                        has_control: true,
                        collocated: true,
                        quad_w: 0.0,
                    });
                }
                for (k, ips) in interval_points.iter_mut().enumerate() {
                    *ips = vec![k, k + 1];
                }
            }
            Scheme::HermiteSimpson => {
                points.push(GridPoint {
                    interval: 0,
                    tau: 0.0,
                    has_control: true,
                    collocated: true,
                    quad_w: 0.0,
                });
                for (k, ips) in interval_points.iter_mut().enumerate() {
                    let (lo, hi) = (boundaries[k], boundaries[k + 1]);
                    points.push(GridPoint {
                        interval: k,
                        tau: 0.5 * (lo + hi),
                        has_control: true,
                        collocated: true,
                        quad_w: 0.0,
                    });
                    points.push(GridPoint {
                        interval: k,
                        tau: hi,
                        has_control: true,
                        collocated: true,
                        quad_w: 0.0,
                    });
                    *ips = vec![2 * k, 2 * k + 1, 2 * k + 2];
                }
            }
            Scheme::Lgr => {
                for k in 0..k_total {
                    let (lo, hi) = (boundaries[k], boundaries[k + 1]);
                    let n = mesh.order(k);
                    let rule = lgr_points(n).map_err(TranscribeError::Mesh)?;
                    let base = points.len();
                    for &xi in &rule.nodes {
                        points.push(GridPoint {
                            interval: k,
                            tau: TimeMap::radau_to_tau(lo, hi, xi),
                            has_control: true,
                            collocated: true,
                            quad_w: 0.0,
                        });
                    }
                    interval_points[k] = (base..base + n + 1).collect();
                    lgr_ops[k] =
                        Some(Arc::new(lgr_diff_matrix(n).map_err(TranscribeError::Mesh)?));
                }
                points.push(GridPoint {
                    interval: k_total - 1,
                    tau: 1.0,
                    has_control: false,
                    collocated: false,
                    quad_w: 0.0,
                });
            }
        }

        let weights = quadrature_weights(mesh);
        let mut colloc_pts = Vec::new();
        let mut colloc_of_point = vec![None; points.len()];
        let mut wi = 0;
        for (i, pt) in points.iter_mut().enumerate() {
            if pt.collocated {
                pt.quad_w = weights[wi];
                wi += 1;
                colloc_of_point[i] = Some(colloc_pts.len());
                colloc_pts.push(i);
            }
        }
        debug_assert_eq!(wi, weights.len());

        Ok(GridPlan {
            scheme: mesh.scheme(),
            points,
            interval_points,
            colloc_pts,
            colloc_of_point,
            lgr_ops,
        })
    }

    pub fn points(&self) -> &[GridPoint] {
        &self.points
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn n_collocation(&self) -> usize {
        self.colloc_pts.len()
    }

    pub fn interval_points(&self, k: usize) -> &[usize] {
        &self.interval_points[k]
    }

    pub fn collocation_points(&self) -> &[usize] {
        &self.colloc_pts
    }

    pub fn collocation_index(&self, point: usize) -> Option<usize> {
        self.colloc_of_point[point]
    }

    pub fn lgr_op(&self, k: usize) -> Option<&DiffOperator> {
        self.lgr_ops[k].as_deref()
    }

    /// Grid points carrying control decision values.
    pub fn control_points(&self) -> usize {
        self.points.iter().filter(|p| p.has_control).count()
    }
}

/// Fixed or decision-backed time horizon of a layout.
#[derive(Debug, Clone, Copy)]
pub enum TimeInfo {
    Fixed(f64),
    Free {
        t0_index: Option<usize>,
        t0_fixed: f64,
        tf_index: Option<usize>,
        tf_fixed: f64,
    },
}

/// Decision-vector layout: grid-major variable blocks `[x_i, u_i]` per grid
/// point, then parameters, then any free time scalars.
#[derive(Debug, Clone)]
pub struct Layout {
    pub nx: usize,
    pub nu: usize,
    pub np: usize,
    grid: GridPlan,
    point_base: Vec<usize>,
    pub p_base: usize,
    pub t0_index: Option<usize>,
    pub tf_index: Option<usize>,
    pub n_vars: usize,
    t0_fixed: f64,
    tf_fixed: f64,
}

impl Layout {
    fn build(spec: &ValidatedSpec, grid: GridPlan) -> Layout {
        let (nx, nu, np) = (spec.n_states(), spec.n_inputs(), spec.n_params());
        let mut point_base = Vec::with_capacity(grid.n_points());
        let mut offset = 0;
        for pt in grid.points() {
            point_base.push(offset);
            offset += nx + if pt.has_control { nu } else { 0 };
        }
        let p_base = offset;
        offset += np;
        let time = spec.spec().time;
        let t0_index = (!time.t0.is_fixed()).then(|| {
            offset += 1;
            offset - 1
        });
        let tf_index = (!time.tf.is_fixed()).then(|| {
            offset += 1;
            offset - 1
        });
        Layout {
            nx,
            nu,
            np,
            grid,
            point_base,
            p_base,
            t0_index,
            tf_index,
            n_vars: offset,
            t0_fixed: time.t0.lower,
            tf_fixed: time.tf.lower,
        }
    }

    pub fn grid(&self) -> &GridPlan {
        &self.grid
    }

    pub fn point_base(&self, point: usize) -> usize {
        self.point_base[point]
    }

    pub fn x_index(&self, point: usize, j: usize) -> usize {
        debug_assert!(j < self.nx);
        self.point_base[point] + j
    }

    pub fn u_index(&self, point: usize, j: usize) -> Option<usize> {
        self.grid.points()[point]
            .has_control
            .then(|| self.point_base[point] + self.nx + j)
    }

    pub fn p_index(&self, j: usize) -> usize {
        self.p_base + j
    }

    pub fn time_info(&self) -> TimeInfo {
        if self.t0_index.is_none() && self.tf_index.is_none() {
            TimeInfo::Fixed(self.tf_fixed - self.t0_fixed)
        } else {
            TimeInfo::Free {
                t0_index: self.t0_index,
                t0_fixed: self.t0_fixed,
                tf_index: self.tf_index,
                tf_fixed: self.tf_fixed,
            }
        }
    }

    pub fn free_time(&self) -> bool {
        self.t0_index.is_some() || self.tf_index.is_some()
    }

    pub fn t0_of(&self, z: &[f64]) -> f64 {
        self.t0_index.map_or(self.t0_fixed, |i| z[i])
    }

    pub fn tf_of(&self, z: &[f64]) -> f64 {
        self.tf_index.map_or(self.tf_fixed, |i| z[i])
    }

    /// Physical grid times for a primal vector.
    pub fn grid_times(&self, z: &[f64]) -> Vec<f64> {
        let map = TimeMap::new(self.t0_of(z), self.tf_of(z));
        self.grid
            .points()
            .iter()
            .map(|p| map.to_physical(p.tau))
            .collect()
    }

    /// Last grid point carrying a control.
    pub fn last_control_point(&self) -> usize {
        (0..self.grid.n_points())
            .rev()
            .find(|&i| self.grid.points()[i].has_control)
            .expect("at least one control point")
    }

    pub fn state_at<'z>(&self, z: &'z [f64], point: usize) -> &'z [f64] {
        let base = self.point_base[point];
        &z[base..base + self.nx]
    }

    pub fn input_at<'z>(&self, z: &'z [f64], point: usize) -> &'z [f64] {
        let base = self.point_base[point] + self.nx;
        if self.grid.points()[point].has_control {
            &z[base..base + self.nu]
        } else {
            &z[base..base]
        }
    }

    pub fn params_of<'z>(&self, z: &'z [f64]) -> &'z [f64] {
        &z[self.p_base..self.p_base + self.np]
    }
}

/// Constraint partition ranges, in row order.
#[derive(Debug, Clone)]
pub struct Partitions {
    pub defect: Range<usize>,
    pub path: Range<usize>,
    pub boundary: Range<usize>,
    pub rate_linear: Range<usize>,
}

impl Partitions {
    pub fn n_rows(&self) -> usize {
        self.rate_linear.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefectKind {
    Trapezoidal,
    HermiteInterp,
    Simpson,
    Lgr { local: usize },
}

/// One block of `nx` defect rows.
#[derive(Debug, Clone, Copy)]
pub struct DefectBlock {
    pub interval: usize,
    pub kind: DefectKind,
    pub row_base: usize,
}

/// Per-variable constraint-count contribution of each rate implementation.
/// Two-sided rows count as two: the add-state column counts bounded
/// rate-input values, the add-path and on-mesh columns count one-sided
/// inequalities.
pub fn count_constraints(
    mesh: &Mesh,
    mode: RateMode,
    n_rate_vars: usize,
    kind: VarKind,
) -> Result<usize, TranscribeError> {
    let k = mesh.intervals();
    let nodes = mesh.nodes();
    let lgr_pts: usize = match mesh.scheme() {
        Scheme::Lgr => mesh.orders().iter().sum(),
        _ => 0,
    };
    let per_var = match (mode, kind) {
        (RateMode::AddState, VarKind::Input) => match mesh.scheme() {
            Scheme::Trapezoidal => nodes,
            Scheme::HermiteSimpson => 2 * nodes - 1,
            Scheme::Lgr => lgr_pts,
        },
        (RateMode::AddPathConstraint, VarKind::State) => match mesh.scheme() {
            Scheme::Trapezoidal => 2 * nodes,
            Scheme::HermiteSimpson => 2 * (2 * nodes - 1),
            Scheme::Lgr => 2 * lgr_pts,
        },
        (RateMode::OnMesh, VarKind::Input) => match mesh.scheme() {
            Scheme::Trapezoidal => 2 * nodes,
            Scheme::HermiteSimpson => 4 * k,
            Scheme::Lgr => 2 * lgr_pts,
        },
        (RateMode::OnMesh, VarKind::State) => match mesh.scheme() {
            Scheme::Trapezoidal => 2 * nodes,
            Scheme::HermiteSimpson => 6 * k,
            Scheme::Lgr => 2 * lgr_pts,
        },
        (mode, kind) => {
            return Err(TranscribeError::IncompatibleMode {
                mode: mode.to_string(),
                reason: format!("{kind:?} rate bounds are not handled by this mode"),
            })
        }
    };
    Ok(per_var * n_rate_vars)
}

struct FTerm {
    /// collocation index of the point whose dynamics enter the row block
    colloc: usize,
    /// coefficient per unit of dt (full coefficient is `dt * coeff`)
    coeff: f64,
}

struct DefectRowPlan {
    block: DefectBlock,
    /// (grid point, state coefficient) pairs
    state_terms: Vec<(usize, f64)>,
    f_terms: Vec<FTerm>,
}

/// What to compute in one evaluation.
#[derive(Clone, Copy, Default)]
pub struct EvalRequest<'a> {
    pub want_grad: bool,
    pub want_jac: bool,
    /// `(sigma, row multipliers)` for the Hessian of `sigma f + y^T c`.
    pub hess: Option<(f64, &'a [f64])>,
    /// Leave the constant rate-row Jacobian values untouched.
    pub skip_constant_jac: bool,
}

/// Output buffers of one evaluation, reusable across calls.
#[derive(Debug, Clone, Default)]
pub struct EvalOut {
    pub objective: f64,
    pub grad: Vec<f64>,
    pub rows: Vec<f64>,
    pub jac_values: Vec<f64>,
    pub hess_values: Vec<f64>,
}

impl EvalOut {
    pub fn sized_for(model: &dyn NlpModel) -> EvalOut {
        EvalOut {
            objective: 0.0,
            grad: vec![0.0; model.n_vars()],
            rows: vec![0.0; model.n_rows()],
            jac_values: vec![0.0; model.jac_pattern().nnz()],
            hess_values: vec![0.0; model.hess_pattern().nnz()],
        }
    }
}

/// Solver-facing problem interface.
pub trait NlpModel: Sync {
    fn n_vars(&self) -> usize;
    fn n_rows(&self) -> usize;
    fn var_bounds(&self) -> (&[f64], &[f64]);
    fn row_bounds(&self) -> (&[f64], &[f64]);
    fn jac_pattern(&self) -> &Arc<SparsityPattern>;
    fn hess_pattern(&self) -> &Arc<SparsityPattern>;
    /// Rows whose Jacobian values never change between iterations.
    fn constant_rows(&self) -> Range<usize> {
        0..0
    }
    /// `(evaluation calls, constant-row Jacobian refreshes)` so far.
    fn counters(&self) -> (u64, u64) {
        (0, 0)
    }
    fn eval(&self, z: &[f64], req: EvalRequest<'_>, out: &mut EvalOut)
        -> Result<(), TranscribeError>;
}

/// Solver outcome classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    LineSearchFailure,
    SingularKkt,
}

/// Per-iteration record: residuals, steps and wall-time split.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub mu: f64,
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
    pub alpha_primal: f64,
    pub alpha_dual: f64,
    pub regularization: f64,
    pub eval_seconds: f64,
    pub factor_seconds: f64,
    pub other_seconds: f64,
}

impl IterRecord {
    pub fn total_seconds(&self) -> f64 {
        self.eval_seconds + self.factor_seconds + self.other_seconds
    }
}

/// Primal-dual solution of a transcribed problem.
#[derive(Debug, Clone)]
pub struct NlpSolution {
    pub primal: Vec<f64>,
    pub row_multipliers: Vec<f64>,
    pub bound_lower_multipliers: Vec<f64>,
    pub bound_upper_multipliers: Vec<f64>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub objective: f64,
    pub iters: Vec<IterRecord>,
    /// Times the rate-row Jacobian values were rewritten during the solve.
    pub rate_jacobian_refreshes: u64,
    pub eval_calls: u64,
}

impl NlpSolution {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    pub fn multipliers_of(&self, range: &Range<usize>) -> &[f64] {
        &self.row_multipliers[range.clone()]
    }
}

/// Transcribed sparse NLP.
pub struct NlpProblem {
    spec: ValidatedSpec,
    mesh: Mesh,
    mode: RateMode,
    layout: Layout,
    z_lower: Vec<f64>,
    z_upper: Vec<f64>,
    row_lower: Vec<f64>,
    row_upper: Vec<f64>,
    partitions: Partitions,
    defect_rows: Vec<DefectRowPlan>,
    jac_pattern: Arc<SparsityPattern>,
    jac_slots: Vec<usize>,
    rate_value_start: usize,
    hess_pattern: Arc<SparsityPattern>,
    hess_slots: Vec<usize>,
    rate_block: Option<RateBlock>,
    path_row_linear: Vec<bool>,
    point_hess_pairs: Vec<(usize, usize)>,
    endpoint_hess_pairs: Vec<(usize, usize)>,
    evals: AtomicU64,
    rate_jac_refreshes: AtomicU64,
}

/// Assembles the finite-dimensional problem for a mesh and rate mode,
/// applying the conventional rewrites first where requested.
pub fn transcribe(
    spec: &ValidatedSpec,
    mesh: &Mesh,
    mode: RateMode,
) -> Result<NlpProblem, TranscribeError> {
    if mesh.intervals() == 0 {
        return Err(TranscribeError::Mesh(crate::error::MeshError::EmptyMesh));
    }
    let incompatible = |reason: String| TranscribeError::IncompatibleMode {
        mode: mode.to_string(),
        reason,
    };
    let working = match mode {
        RateMode::AddState => {
            if !spec.rate_bounded_states().is_empty() {
                return Err(incompatible(
                    "state rate bounds cannot be promoted; use onmesh or addpath".into(),
                ));
            }
            augment_add_state(spec).map_err(|e| incompatible(e.to_string()))?
        }
        RateMode::AddPathConstraint => {
            if !spec.rate_bounded_inputs().is_empty() {
                return Err(incompatible(
                    "input rate bounds have no dynamics row; use onmesh or addstate".into(),
                ));
            }
            augment_add_path(spec).map_err(|e| incompatible(e.to_string()))?
        }
        RateMode::OnMesh => spec.clone(),
    };

    let grid = GridPlan::build(mesh)?;
    let layout = Layout::build(&working, grid);
    NlpProblem::assemble(working, mesh.clone(), mode, layout)
}

impl NlpProblem {
    fn assemble(
        spec: ValidatedSpec,
        mesh: Mesh,
        mode: RateMode,
        layout: Layout,
    ) -> Result<NlpProblem, TranscribeError> {
        let (nx, nu, np) = (layout.nx, layout.nu, layout.np);
        let s = spec.spec();

        // ---- variable bounds ------------------------------------------
        let mut z_lower = vec![f64::NEG_INFINITY; layout.n_vars];
        let mut z_upper = vec![f64::INFINITY; layout.n_vars];
        for (i, pt) in layout.grid().points().iter().enumerate() {
            for j in 0..nx {
                let b = s.x_bounds[j];
                z_lower[layout.x_index(i, j)] = b.lower;
                z_upper[layout.x_index(i, j)] = b.upper;
            }
            if pt.has_control {
                for j in 0..nu {
                    let b = s.u_bounds[j];
                    let idx = layout.u_index(i, j).unwrap();
                    z_lower[idx] = b.lower;
                    z_upper[idx] = b.upper;
                }
            }
        }
        for j in 0..np {
            z_lower[layout.p_index(j)] = s.p_bounds[j].lower;
            z_upper[layout.p_index(j)] = s.p_bounds[j].upper;
        }
        if let Some(i) = layout.t0_index {
            z_lower[i] = s.time.t0.lower;
            z_upper[i] = s.time.t0.upper;
        }
        if let Some(i) = layout.tf_index {
            z_lower[i] = s.time.tf.lower;
            z_upper[i] = s.time.tf.upper;
        }
        let last_u_pt = layout.last_control_point();
        for j in 0..nu {
            if let Some(v) = s.u_initial[j] {
                let idx = layout.u_index(0, j).unwrap();
                z_lower[idx] = v;
                z_upper[idx] = v;
            }
            if let Some(v) = s.u_terminal[j] {
                let idx = layout.u_index(last_u_pt, j).unwrap();
                z_lower[idx] = v;
                z_upper[idx] = v;
            }
        }

        // ---- defect row plans ------------------------------------------
        let fracs = mesh.fractions().to_vec();
        let grid = layout.grid();
        let mut defect_rows: Vec<DefectRowPlan> = Vec::new();
        let mut row = 0usize;
        let colloc = |pt: usize| grid.collocation_index(pt).expect("collocated point");
        match mesh.scheme() {
            Scheme::Trapezoidal => {
                for k in 0..mesh.intervals() {
                    let c = -fracs[k] / 2.0;
                    defect_rows.push(DefectRowPlan {
                        block: DefectBlock {
                            interval: k,
                            kind: DefectKind::Trapezoidal,
                            row_base: row,
                        },
                        state_terms: vec![(k, -1.0), (k + 1, 1.0)],
                        f_terms: vec![
                            FTerm {
                                colloc: colloc(k),
                                coeff: c,
                            },
                            FTerm {
                                colloc: colloc(k + 1),
                                coeff: c,
                            },
                        ],
                    });
                    row += nx;
                }
            }
            Scheme::HermiteSimpson => {
                for k in 0..mesh.intervals() {
                    let (l, m, r) = (2 * k, 2 * k + 1, 2 * k + 2);
                    let d = fracs[k];
                    defect_rows.push(DefectRowPlan {
                        block: DefectBlock {
                            interval: k,
                            kind: DefectKind::HermiteInterp,
                            row_base: row,
                        },
                        state_terms: vec![(m, 1.0), (l, -0.5), (r, -0.5)],
                        f_terms: vec![
                            FTerm {
                                colloc: colloc(l),
                                coeff: -d / 8.0,
                            },
                            FTerm {
                                colloc: colloc(r),
                                coeff: d / 8.0,
                            },
                        ],
                    });
                    row += nx;
                    defect_rows.push(DefectRowPlan {
                        block: DefectBlock {
                            interval: k,
                            kind: DefectKind::Simpson,
                            row_base: row,
                        },
                        state_terms: vec![(r, 1.0), (l, -1.0)],
                        f_terms: vec![
                            FTerm {
                                colloc: colloc(l),
                                coeff: -d / 6.0,
                            },
                            FTerm {
                                colloc: colloc(m),
                                coeff: -4.0 * d / 6.0,
                            },
                            FTerm {
                                colloc: colloc(r),
                                coeff: -d / 6.0,
                            },
                        ],
                    });
                    row += nx;
                }
            }
            Scheme::Lgr => {
                for k in 0..mesh.intervals() {
                    let pts: Vec<usize> = grid.interval_points(k).to_vec();
                    let op = grid.lgr_op(k).unwrap().clone();
                    let n = mesh.order(k);
                    for i in 0..n {
                        let state_terms: Vec<(usize, f64)> =
                            op.row(i).iter().map(|&(j, v)| (pts[j], v)).collect();
                        defect_rows.push(DefectRowPlan {
                            block: DefectBlock {
                                interval: k,
                                kind: DefectKind::Lgr { local: i },
                                row_base: row,
                            },
                            state_terms,
                            f_terms: vec![FTerm {
                                colloc: colloc(pts[i]),
                                coeff: -fracs[k] / 2.0,
                            }],
                        });
                        row += nx;
                    }
                }
            }
        }
        let n_defect = row;

        // ---- partitions --------------------------------------------------
        let nc = s.path.as_ref().map_or(0, |c| c.fns.n_out);
        let n_path = nc * grid.n_collocation();
        let nb = s.boundary.as_ref().map_or(0, |b| b.n_out);

        let rate_block = if mode == RateMode::OnMesh {
            let mut targets = Vec::new();
            for j in spec.rate_bounded_states() {
                let (lo, hi) = s.x_rate[j].unwrap();
                targets.push(RateTarget {
                    kind: VarKind::State,
                    index: j,
                    lower: lo,
                    upper: hi,
                });
            }
            for j in spec.rate_bounded_inputs() {
                let (lo, hi) = s.u_rate[j].unwrap();
                targets.push(RateTarget {
                    kind: VarKind::Input,
                    index: j,
                    lower: lo,
                    upper: hi,
                });
            }
            if targets.is_empty() {
                None
            } else {
                if layout.free_time() {
                    log::warn!(
                        "free-time problem: on-mesh rate rows stay linear but the \
                         precomputed-Jacobian fast path is disabled"
                    );
                }
                Some(build_onmesh(&mesh, &layout, &targets, false).map_err(|e| {
                    TranscribeError::IncompatibleMode {
                        mode: mode.to_string(),
                        reason: e.to_string(),
                    }
                })?)
            }
        } else {
            None
        };
        let n_rate = rate_block.as_ref().map_or(0, |b| b.n_rows());

        let partitions = Partitions {
            defect: 0..n_defect,
            path: n_defect..n_defect + n_path,
            boundary: n_defect + n_path..n_defect + n_path + nb,
            rate_linear: n_defect + n_path + nb..n_defect + n_path + nb + n_rate,
        };
        let n_rows = partitions.n_rows();

        // ---- row bounds ---------------------------------------------------
        let mut row_lower = vec![0.0; n_rows];
        let mut row_upper = vec![0.0; n_rows];
        if let Some(c) = &s.path {
            for ci in 0..grid.n_collocation() {
                for q in 0..nc {
                    row_lower[partitions.path.start + ci * nc + q] = c.lower[q];
                    row_upper[partitions.path.start + ci * nc + q] = c.upper[q];
                }
            }
        }
        if let Some(b) = &rate_block {
            let (lo, hi) = b.bounds();
            row_lower[partitions.rate_linear.clone()].copy_from_slice(lo);
            row_upper[partitions.rate_linear.clone()].copy_from_slice(hi);
        }

        // ---- Hessian masks -----------------------------------------------
        let st = &spec.structure;
        let nh_pt = nx + nu + np;
        let mut point_mask = vec![false; nh_pt * nh_pt];
        let or_mask = |mask: &mut Vec<bool>, m: &Vec<bool>| {
            for (dst, src) in mask.iter_mut().zip(m) {
                *dst |= *src;
            }
        };
        or_mask(&mut point_mask, &st.dynamics.hess_mask);
        if let Some(l) = &st.lagrange {
            or_mask(&mut point_mask, &l.hess_mask);
        }
        if let Some(c) = &st.path {
            or_mask(&mut point_mask, &c.hess_mask);
        }
        let mut point_hess_pairs = Vec::new();
        for a in 0..nh_pt {
            for b in 0..=a {
                if point_mask[a * nh_pt + b] || point_mask[b * nh_pt + a] {
                    point_hess_pairs.push((a, b));
                }
            }
        }
        let nh_b = 2 * nx + np;
        let mut endpoint_mask = vec![false; nh_b * nh_b];
        for m in [&st.mayer, &st.boundary].into_iter().flatten() {
            or_mask(&mut endpoint_mask, &m.hess_mask);
        }
        let mut endpoint_hess_pairs = Vec::new();
        for a in 0..nh_b {
            for b in 0..=a {
                if endpoint_mask[a * nh_b + b] || endpoint_mask[b * nh_b + a] {
                    endpoint_hess_pairs.push((a, b));
                }
            }
        }

        let path_row_linear = st
            .path
            .as_ref()
            .map(|c| (0..c.n_out).map(|r| c.row_is_linear(r)).collect())
            .unwrap_or_default();

        let mut problem = NlpProblem {
            spec,
            mesh,
            mode,
            layout,
            z_lower,
            z_upper,
            row_lower,
            row_upper,
            partitions,
            defect_rows,
            jac_pattern: Arc::new(SparsityPattern::empty(0, 0)),
            jac_slots: Vec::new(),
            rate_value_start: 0,
            hess_pattern: Arc::new(SparsityPattern::empty(0, 0)),
            hess_slots: Vec::new(),
            rate_block,
            path_row_linear,
            point_hess_pairs,
            endpoint_hess_pairs,
            evals: AtomicU64::new(0),
            rate_jac_refreshes: AtomicU64::new(0),
        };

        // ---- record sparsity patterns --------------------------------------
        let mut builder = PatternBuilder::new();
        problem.jac_pass(None, &mut |_, r, c, _| {
            builder.push(r, c);
        });
        let (jac_pattern, jac_slots) = builder.build(n_rows, problem.layout.n_vars);
        problem.rate_value_start = jac_pattern.row_ptr[problem.partitions.rate_linear.start];
        problem.jac_pattern = Arc::new(jac_pattern);
        problem.jac_slots = jac_slots;

        let mut builder = PatternBuilder::new();
        problem.hess_pass(None, &mut |r, c, _| {
            builder.push(r, c);
        });
        let (hess_pattern, hess_slots) =
            builder.build(problem.layout.n_vars, problem.layout.n_vars);
        problem.hess_pattern = Arc::new(hess_pattern);
        problem.hess_slots = hess_slots;

        Ok(problem)
    }

    pub fn spec(&self) -> &ValidatedSpec {
        &self.spec
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn mode(&self) -> RateMode {
        self.mode
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn partitions(&self) -> &Partitions {
        &self.partitions
    }

    pub fn rate_block(&self) -> Option<&RateBlock> {
        self.rate_block.as_ref()
    }

    /// Per path-constraint-row linearity labels from structure probing.
    pub fn path_row_linearity(&self) -> &[bool] {
        &self.path_row_linear
    }

    pub fn defect_blocks(&self) -> Vec<DefectBlock> {
        self.defect_rows.iter().map(|p| p.block).collect()
    }

    pub fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn rate_jacobian_refreshes(&self) -> u64 {
        self.rate_jac_refreshes.load(Ordering::Relaxed)
    }

    /// Objective, constraint values, Jacobian and Lagrangian Hessian at one
    /// point, with finiteness checks.
    pub fn eval_all(
        &self,
        z: &[f64],
        sigma: f64,
        multipliers: &[f64],
    ) -> Result<(f64, Vec<f64>, SparseMatrix, SparseMatrix), TranscribeError> {
        if z.len() != self.layout.n_vars {
            return Err(TranscribeError::BadPointLength {
                expected: self.layout.n_vars,
                got: z.len(),
            });
        }
        let mut out = EvalOut::sized_for(self);
        self.eval_impl(
            z,
            EvalRequest {
                want_grad: true,
                want_jac: true,
                hess: Some((sigma, multipliers)),
                skip_constant_jac: false,
            },
            &mut out,
        )?;
        if !out.objective.is_finite() || out.rows.iter().any(|v| !v.is_finite()) {
            return Err(TranscribeError::CallbackFailure {
                what: "objective or constraint values".into(),
            });
        }
        if out.jac_values.iter().any(|v| !v.is_finite())
            || out.hess_values.iter().any(|v| !v.is_finite())
        {
            return Err(TranscribeError::NonFiniteValue {
                what: "derivative values".into(),
            });
        }
        let jac = SparseMatrix {
            pattern: self.jac_pattern.clone(),
            values: out.jac_values,
        };
        let hess = SparseMatrix {
            pattern: self.hess_pattern.clone(),
            values: out.hess_values,
        };
        Ok((out.objective, out.rows, jac, hess))
    }
}

#[derive(PartialEq, Eq, Clone, Copy)]
enum EmitPhase {
    Main,
    Rate,
}

/// Per-evaluation data shared by the value, Jacobian and Hessian passes.
struct EvalData<'z> {
    z: &'z [f64],
    t0: f64,
    dt: f64,
    nj: usize,
    f: Vec<f64>,
    jf: Vec<f64>,
    l: Vec<f64>,
    jl: Vec<f64>,
    c: Vec<f64>,
    jc: Vec<f64>,
    jf_t: Vec<f64>,
    jl_t: Vec<f64>,
    jc_t: Vec<f64>,
    phi: Vec<f64>,
    jphi: Vec<f64>,
    mayer: f64,
    jmayer: Vec<f64>,
}

impl NlpProblem {
    fn kits(&self) -> (PointKit<'_>, Option<PointKit<'_>>, Option<PointKit<'_>>) {
        let s = self.spec.spec();
        let (nx, nu, np) = (self.layout.nx, self.layout.nu, self.layout.np);
        (
            PointKit::new(&s.dynamics, nx, nu, np),
            s.lagrange.as_ref().map(|l| PointKit::new(l, nx, nu, np)),
            s.path.as_ref().map(|c| PointKit::new(&c.fns, nx, nu, np)),
        )
    }

    /// Maps a point-Jacobian column (excluding time) to a decision index.
    fn point_col(&self, pt: usize, c: usize) -> usize {
        let (nx, nu) = (self.layout.nx, self.layout.nu);
        if c < nx {
            self.layout.x_index(pt, c)
        } else if c < nx + nu {
            self.layout.u_index(pt, c - nx).expect("control present")
        } else {
            self.layout.p_index(c - nx - nu - 1)
        }
    }

    /// Maps a point-Hessian variable to a decision index.
    fn point_hess_col(&self, pt: usize, a: usize) -> usize {
        let (nx, nu) = (self.layout.nx, self.layout.nu);
        if a < nx + nu {
            self.point_col(pt, a)
        } else {
            self.layout.p_index(a - nx - nu)
        }
    }

    /// Maps an endpoint-Hessian variable ([x0, xf, p]) to a decision index.
    fn endpoint_hess_col(&self, a: usize) -> usize {
        let nx = self.layout.nx;
        let last = self.layout.grid().n_points() - 1;
        if a < nx {
            self.layout.x_index(0, a)
        } else if a < 2 * nx {
            self.layout.x_index(last, a - nx)
        } else {
            self.layout.p_index(a - 2 * nx)
        }
    }

    /// Maps an endpoint-Jacobian column to a decision index; fixed time
    /// columns map to None.
    fn endpoint_col(&self, c: usize) -> Option<usize> {
        let nx = self.layout.nx;
        let last = self.layout.grid().n_points() - 1;
        if c < nx {
            Some(self.layout.x_index(0, c))
        } else if c == nx {
            self.layout.t0_index
        } else if c < 2 * nx + 1 {
            Some(self.layout.x_index(last, c - nx - 1))
        } else if c == 2 * nx + 1 {
            self.layout.tf_index
        } else {
            Some(self.layout.p_index(c - 2 * nx - 2))
        }
    }

    fn compute_data<'z>(&self, z: &'z [f64], req: &EvalRequest<'_>) -> EvalData<'z> {
        let (dyn_kit, lag_kit, path_kit) = self.kits();
        let layout = &self.layout;
        let s = self.spec.spec();
        let grid = layout.grid();
        let (nx, np) = (layout.nx, layout.np);
        let nc = s.path.as_ref().map_or(0, |c| c.fns.n_out);
        let nb = s.boundary.as_ref().map_or(0, |b| b.n_out);
        let n_colloc = grid.n_collocation();
        let nj = dyn_kit.nj();
        let free = layout.free_time();
        let t0 = layout.t0_of(z);
        let tf = layout.tf_of(z);
        let dt = tf - t0;
        let map = TimeMap::new(t0, tf);

        let want_hess = req.hess.is_some();
        let need_point_jacs = req.want_jac || (want_hess && free);
        let need_grad_jacs = req.want_grad || (want_hess && free);
        let need_tderivs = want_hess && free;
        let has_lag = lag_kit.is_some();

        let mut data = EvalData {
            z,
            t0,
            dt,
            nj,
            f: vec![0.0; n_colloc * nx],
            jf: if need_point_jacs {
                vec![0.0; n_colloc * nx * nj]
            } else {
                Vec::new()
            },
            l: vec![0.0; n_colloc],
            jl: if need_grad_jacs && has_lag {
                vec![0.0; n_colloc * nj]
            } else {
                Vec::new()
            },
            c: vec![0.0; n_colloc * nc],
            jc: if need_point_jacs && nc > 0 {
                vec![0.0; n_colloc * nc * nj]
            } else {
                Vec::new()
            },
            jf_t: if need_tderivs {
                vec![0.0; n_colloc * nx * nj]
            } else {
                Vec::new()
            },
            jl_t: if need_tderivs && has_lag {
                vec![0.0; n_colloc * nj]
            } else {
                Vec::new()
            },
            jc_t: if need_tderivs && nc > 0 {
                vec![0.0; n_colloc * nc * nj]
            } else {
                Vec::new()
            },
            phi: vec![0.0; nb],
            jphi: Vec::new(),
            mayer: 0.0,
            jmayer: Vec::new(),
        };

        let p = layout.params_of(z);
        for (ci, &pt) in grid.collocation_points().iter().enumerate() {
            let x = layout.state_at(z, pt);
            let u = layout.input_at(z, pt);
            let t = map.to_physical(grid.points()[pt].tau);
            let args = PointArgs { x, u, t, p };
            dyn_kit.eval(args, &mut data.f[ci * nx..(ci + 1) * nx]);
            if need_point_jacs {
                dyn_kit.jac(args, &mut data.jf[ci * nx * nj..(ci + 1) * nx * nj]);
            }
            if need_tderivs {
                dyn_kit.jac_t_deriv(args, &mut data.jf_t[ci * nx * nj..(ci + 1) * nx * nj]);
            }
            if let Some(lag) = &lag_kit {
                let mut l1 = [0.0];
                lag.eval(args, &mut l1);
                data.l[ci] = l1[0];
                if !data.jl.is_empty() {
                    lag.jac(args, &mut data.jl[ci * nj..(ci + 1) * nj]);
                }
                if !data.jl_t.is_empty() {
                    lag.jac_t_deriv(args, &mut data.jl_t[ci * nj..(ci + 1) * nj]);
                }
            }
            if let Some(pk) = &path_kit {
                pk.eval(args, &mut data.c[ci * nc..(ci + 1) * nc]);
                if !data.jc.is_empty() {
                    pk.jac(args, &mut data.jc[ci * nc * nj..(ci + 1) * nc * nj]);
                }
                if !data.jc_t.is_empty() {
                    pk.jac_t_deriv(args, &mut data.jc_t[ci * nc * nj..(ci + 1) * nc * nj]);
                }
            }
        }

        let last = grid.n_points() - 1;
        let bargs = BoundaryArgs {
            x0: layout.state_at(z, 0),
            t0,
            xf: layout.state_at(z, last),
            tf,
            p,
        };
        if let Some(b) = &s.boundary {
            let kit = BoundaryKit::new(b, nx, np);
            kit.eval(bargs, &mut data.phi);
            if req.want_jac {
                data.jphi = vec![0.0; nb * kit.nj()];
                kit.jac(bargs, &mut data.jphi);
            }
        }
        if let Some(m) = &s.mayer {
            let kit = BoundaryKit::new(m, nx, np);
            let mut v = [0.0];
            kit.eval(bargs, &mut v);
            data.mayer = v[0];
            if req.want_grad {
                data.jmayer = vec![0.0; kit.nj()];
                kit.jac(bargs, &mut data.jmayer);
            }
        }
        data
    }

    fn eval_impl(
        &self,
        z: &[f64],
        req: EvalRequest<'_>,
        out: &mut EvalOut,
    ) -> Result<(), TranscribeError> {
        if z.len() != self.layout.n_vars {
            return Err(TranscribeError::BadPointLength {
                expected: self.layout.n_vars,
                got: z.len(),
            });
        }
        self.evals.fetch_add(1, Ordering::Relaxed);
        let data = self.compute_data(z, &req);
        let layout = &self.layout;
        let grid = layout.grid();
        let (nx, nu, np) = (layout.nx, layout.nu, layout.np);
        let nj = data.nj;
        let t_col = nx + nu;
        let free = layout.free_time();
        let st = &self.spec.structure;

        // ---- objective -------------------------------------------------
        let mut obj = data.mayer;
        for (ci, &pt) in grid.collocation_points().iter().enumerate() {
            obj += grid.points()[pt].quad_w * data.dt * data.l[ci];
        }
        out.objective = obj;

        // ---- gradient ----------------------------------------------------
        if req.want_grad {
            out.grad.resize(layout.n_vars, 0.0);
            out.grad.fill(0.0);
            if let Some(lst) = &st.lagrange {
                for (ci, &pt) in grid.collocation_points().iter().enumerate() {
                    let w = grid.points()[pt].quad_w;
                    if data.jl.is_empty() {
                        break;
                    }
                    let jl = &data.jl[ci * nj..(ci + 1) * nj];
                    for c in 0..nj {
                        if c == t_col || lst.jac_class[c] == JacClass::Zero {
                            continue;
                        }
                        out.grad[self.point_col(pt, c)] += w * data.dt * jl[c];
                    }
                    if free {
                        let tau = grid.points()[pt].tau;
                        let lt = jl[t_col];
                        if let Some(i) = layout.tf_index {
                            out.grad[i] += w * (data.l[ci] + data.dt * tau * lt);
                        }
                        if let Some(i) = layout.t0_index {
                            out.grad[i] += w * (-data.l[ci] + data.dt * (1.0 - tau) * lt);
                        }
                    }
                }
            }
            if let Some(mst) = &st.mayer {
                let njb = 2 * nx + 2 + np;
                for c in 0..njb {
                    if mst.jac_class[c] == JacClass::Zero {
                        continue;
                    }
                    if let Some(col) = self.endpoint_col(c) {
                        out.grad[col] += data.jmayer[c];
                    }
                }
            }
        }

        // ---- constraint rows ----------------------------------------------
        out.rows.resize(self.partitions.n_rows(), 0.0);
        for plan in &self.defect_rows {
            for r in 0..nx {
                let row = self.partitions.defect.start + plan.block.row_base + r;
                let mut v = 0.0;
                for &(pt, coeff) in &plan.state_terms {
                    v += coeff * z[layout.x_index(pt, r)];
                }
                for term in &plan.f_terms {
                    v += data.dt * term.coeff * data.f[term.colloc * nx + r];
                }
                out.rows[row] = v;
            }
        }
        if self.partitions.path.len() > 0 {
            out.rows[self.partitions.path.clone()].copy_from_slice(&data.c);
        }
        if self.partitions.boundary.len() > 0 {
            out.rows[self.partitions.boundary.clone()].copy_from_slice(&data.phi);
        }
        if let Some(block) = &self.rate_block {
            block.apply(z, &mut out.rows[self.partitions.rate_linear.clone()]);
        }

        // ---- Jacobian -------------------------------------------------------
        if req.want_jac {
            out.jac_values.resize(self.jac_pattern.nnz(), 0.0);
            let write_rate = !req.skip_constant_jac;
            out.jac_values[..self.rate_value_start].fill(0.0);
            if write_rate {
                out.jac_values[self.rate_value_start..].fill(0.0);
                if self
                    .rate_block
                    .as_ref()
                    .map_or(false, |b| b.n_rows() > 0)
                {
                    self.rate_jac_refreshes.fetch_add(1, Ordering::Relaxed);
                }
            }
            let slots = &self.jac_slots;
            let values = &mut out.jac_values;
            let mut cursor = 0usize;
            self.jac_pass(Some(&data), &mut |phase, _r, _c, v| {
                if phase == EmitPhase::Main || write_rate {
                    values[slots[cursor]] += v;
                }
                cursor += 1;
            });
            debug_assert_eq!(cursor, slots.len());
        }

        // ---- Hessian ---------------------------------------------------------
        if let Some((sigma, y)) = req.hess {
            out.hess_values.resize(self.hess_pattern.nnz(), 0.0);
            out.hess_values.fill(0.0);
            let slots = &self.hess_slots;
            let values = &mut out.hess_values;
            let mut cursor = 0usize;
            self.hess_pass(Some((&data, sigma, y)), &mut |_r, _c, v| {
                values[slots[cursor]] += v;
                cursor += 1;
            });
            debug_assert_eq!(cursor, slots.len());
        }
        Ok(())
    }

    /// Jacobian traversal. With `data = None` only the entry sequence is
    /// produced (pattern recording); the sequence is identical in both
    /// passes by construction.
    fn jac_pass(
        &self,
        data: Option<&EvalData<'_>>,
        sink: &mut dyn FnMut(EmitPhase, usize, usize, f64),
    ) {
        let layout = &self.layout;
        let grid = layout.grid();
        let st = &self.spec.structure;
        let (nx, nu, np) = (layout.nx, layout.nu, layout.np);
        let nj = nx + nu + 1 + np;
        let t_col = nx + nu;
        let free = layout.free_time();
        let dt = data.map_or(1.0, |d| d.dt);

        for plan in &self.defect_rows {
            for r in 0..nx {
                let row = self.partitions.defect.start + plan.block.row_base + r;
                for &(pt, coeff) in &plan.state_terms {
                    sink(EmitPhase::Main, row, layout.x_index(pt, r), coeff);
                }
                for term in &plan.f_terms {
                    let pt = grid.collocation_points()[term.colloc];
                    for c in 0..nj {
                        if c == t_col || st.dynamics.jac_class[r * nj + c] == JacClass::Zero {
                            continue;
                        }
                        let v = data.map_or(0.0, |d| {
                            dt * term.coeff * d.jf[term.colloc * nx * nj + r * nj + c]
                        });
                        sink(EmitPhase::Main, row, self.point_col(pt, c), v);
                    }
                }
                if free {
                    let mut v_tf = 0.0;
                    let mut v_t0 = 0.0;
                    if let Some(d) = data {
                        for term in &plan.f_terms {
                            let pt = grid.collocation_points()[term.colloc];
                            let tau = grid.points()[pt].tau;
                            let fv = d.f[term.colloc * nx + r];
                            let ft = d.jf[term.colloc * nx * nj + r * nj + t_col];
                            v_tf += term.coeff * fv + dt * term.coeff * tau * ft;
                            v_t0 += -term.coeff * fv + dt * term.coeff * (1.0 - tau) * ft;
                        }
                    }
                    if let Some(i) = layout.tf_index {
                        sink(EmitPhase::Main, row, i, v_tf);
                    }
                    if let Some(i) = layout.t0_index {
                        sink(EmitPhase::Main, row, i, v_t0);
                    }
                }
            }
        }

        if let Some(cst) = &st.path {
            let nc = cst.n_out;
            for (ci, &pt) in grid.collocation_points().iter().enumerate() {
                let tau = grid.points()[pt].tau;
                for q in 0..nc {
                    let row = self.partitions.path.start + ci * nc + q;
                    for c in 0..nj {
                        if c == t_col || cst.jac_class[q * nj + c] == JacClass::Zero {
                            continue;
                        }
                        let v = data.map_or(0.0, |d| d.jc[ci * nc * nj + q * nj + c]);
                        sink(EmitPhase::Main, row, self.point_col(pt, c), v);
                    }
                    if free {
                        let ct = data.map_or(0.0, |d| d.jc[ci * nc * nj + q * nj + t_col]);
                        if let Some(i) = layout.tf_index {
                            sink(EmitPhase::Main, row, i, tau * ct);
                        }
                        if let Some(i) = layout.t0_index {
                            sink(EmitPhase::Main, row, i, (1.0 - tau) * ct);
                        }
                    }
                }
            }
        }

        if let Some(bst) = &st.boundary {
            let njb = 2 * nx + 2 + np;
            for r in 0..bst.n_out {
                let row = self.partitions.boundary.start + r;
                for c in 0..njb {
                    if bst.jac_class[r * njb + c] == JacClass::Zero {
                        continue;
                    }
                    let Some(col) = self.endpoint_col(c) else {
                        continue;
                    };
                    let v = data.map_or(0.0, |d| d.jphi[r * njb + c]);
                    sink(EmitPhase::Main, row, col, v);
                }
            }
        }

        if let Some(block) = &self.rate_block {
            for (i, rrow) in block.rows().iter().enumerate() {
                let row = self.partitions.rate_linear.start + i;
                for &(col, v) in rrow {
                    sink(EmitPhase::Rate, row, col, v);
                }
            }
        }
    }

    /// Hessian traversal (lower triangle), two-pass like `jac_pass`.
    fn hess_pass(
        &self,
        data: Option<(&EvalData<'_>, f64, &[f64])>,
        sink: &mut dyn FnMut(usize, usize, f64),
    ) {
        let layout = &self.layout;
        let grid = layout.grid();
        let s = self.spec.spec();
        let (nx, nu, np) = (layout.nx, layout.nu, layout.np);
        let nh = nx + nu + np;
        let nj = nx + nu + 1 + np;
        let t_col = nx + nu;
        let nc = s.path.as_ref().map_or(0, |c| c.fns.n_out);
        let free = layout.free_time();
        let (dyn_kit, lag_kit, path_kit) = self.kits();

        // per-point dynamics weights from the defect multipliers
        let w_dyn: Option<Vec<f64>> = data.map(|(d, _, y)| {
            let mut w = vec![0.0; grid.n_collocation() * nx];
            for plan in &self.defect_rows {
                for term in &plan.f_terms {
                    for r in 0..nx {
                        let row = self.partitions.defect.start + plan.block.row_base + r;
                        w[term.colloc * nx + r] += y[row] * d.dt * term.coeff;
                    }
                }
            }
            w
        });

        let mut scratch = vec![0.0; nh * nh];
        let mut acc = vec![0.0; nh * nh];
        let mut h_tftf = 0.0;
        let mut h_tft0 = 0.0;
        let mut h_t0t0 = 0.0;

        for (ci, &pt) in grid.collocation_points().iter().enumerate() {
            if let Some((d, sigma, y)) = data {
                acc.fill(0.0);
                let wd = &w_dyn.as_ref().unwrap()[ci * nx..(ci + 1) * nx];
                let args = PointArgs {
                    x: layout.state_at(d.z, pt),
                    u: layout.input_at(d.z, pt),
                    t: d.t0 + grid.points()[pt].tau * d.dt,
                    p: layout.params_of(d.z),
                };
                if wd.iter().any(|&v| v != 0.0) {
                    dyn_kit.hess(args, wd, &mut scratch);
                    for (a, sv) in acc.iter_mut().zip(&scratch) {
                        *a += sv;
                    }
                }
                if let Some(lag) = &lag_kit {
                    let w_l = sigma * grid.points()[pt].quad_w * d.dt;
                    if w_l != 0.0 {
                        lag.hess(args, &[w_l], &mut scratch);
                        for (a, sv) in acc.iter_mut().zip(&scratch) {
                            *a += sv;
                        }
                    }
                }
                if let Some(pk) = &path_kit {
                    let base = self.partitions.path.start + ci * nc;
                    let wp = &y[base..base + nc];
                    if wp.iter().any(|&v| v != 0.0) {
                        pk.hess(args, wp, &mut scratch);
                        for (a, sv) in acc.iter_mut().zip(&scratch) {
                            *a += sv;
                        }
                    }
                }
                for &(a, b) in &self.point_hess_pairs {
                    sink(
                        self.point_hess_col(pt, a),
                        self.point_hess_col(pt, b),
                        acc[a * nh + b],
                    );
                }
            } else {
                for &(a, b) in &self.point_hess_pairs {
                    sink(self.point_hess_col(pt, a), self.point_hess_col(pt, b), 0.0);
                }
            }

            if free {
                let tau = grid.points()[pt].tau;
                let mut cross_tf = vec![0.0; nh];
                let mut cross_t0 = vec![0.0; nh];
                if let Some((d, sigma, y)) = data {
                    let wd = &w_dyn.as_ref().unwrap()[ci * nx..(ci + 1) * nx];
                    let w_l = sigma * grid.points()[pt].quad_w;
                    let jac_col = |a: usize| if a < nx + nu { a } else { a + 1 };
                    for a in 0..nh {
                        let col = jac_col(a);
                        let mut v_tf = 0.0;
                        let mut v_t0 = 0.0;
                        for r in 0..nx {
                            let kappa = wd[r] / d.dt;
                            let g_z = d.jf[ci * nx * nj + r * nj + col];
                            let g_zt = d.jf_t[ci * nx * nj + r * nj + col];
                            v_tf += kappa * (g_z + d.dt * tau * g_zt);
                            v_t0 += kappa * (-g_z + d.dt * (1.0 - tau) * g_zt);
                        }
                        if !d.jl.is_empty() {
                            let g_z = d.jl[ci * nj + col];
                            let g_zt = d.jl_t[ci * nj + col];
                            v_tf += w_l * (g_z + d.dt * tau * g_zt);
                            v_t0 += w_l * (-g_z + d.dt * (1.0 - tau) * g_zt);
                        }
                        for q in 0..nc {
                            let yq = y[self.partitions.path.start + ci * nc + q];
                            let g_zt = d.jc_t[ci * nc * nj + q * nj + col];
                            v_tf += yq * tau * g_zt;
                            v_t0 += yq * (1.0 - tau) * g_zt;
                        }
                        cross_tf[a] = v_tf;
                        cross_t0[a] = v_t0;
                    }
                    let mut g_t = 0.0;
                    let mut g_tt = 0.0;
                    let mut p_tt = 0.0;
                    for r in 0..nx {
                        let kappa = wd[r] / d.dt;
                        g_t += kappa * d.jf[ci * nx * nj + r * nj + t_col];
                        g_tt += kappa * d.jf_t[ci * nx * nj + r * nj + t_col];
                    }
                    if !d.jl.is_empty() {
                        g_t += w_l * d.jl[ci * nj + t_col];
                        g_tt += w_l * d.jl_t[ci * nj + t_col];
                    }
                    for q in 0..nc {
                        let yq = y[self.partitions.path.start + ci * nc + q];
                        p_tt += yq * d.jc_t[ci * nc * nj + q * nj + t_col];
                    }
                    h_tftf += 2.0 * tau * g_t + d.dt * tau * tau * g_tt + tau * tau * p_tt;
                    h_tft0 += (1.0 - 2.0 * tau) * g_t
                        + d.dt * tau * (1.0 - tau) * g_tt
                        + tau * (1.0 - tau) * p_tt;
                    h_t0t0 += -2.0 * (1.0 - tau) * g_t
                        + d.dt * (1.0 - tau) * (1.0 - tau) * g_tt
                        + (1.0 - tau) * (1.0 - tau) * p_tt;
                }
                for a in 0..nh {
                    if let Some(i) = layout.tf_index {
                        sink(i, self.point_hess_col(pt, a), cross_tf[a]);
                    }
                    if let Some(i) = layout.t0_index {
                        sink(i, self.point_hess_col(pt, a), cross_t0[a]);
                    }
                }
            }
        }

        if !self.endpoint_hess_pairs.is_empty() {
            let nh_b = 2 * nx + np;
            let mut acc_b = vec![0.0; nh_b * nh_b];
            if let Some((d, sigma, y)) = data {
                let mut scratch_b = vec![0.0; nh_b * nh_b];
                let last = grid.n_points() - 1;
                let bargs = BoundaryArgs {
                    x0: layout.state_at(d.z, 0),
                    t0: d.t0,
                    xf: layout.state_at(d.z, last),
                    tf: d.t0 + d.dt,
                    p: layout.params_of(d.z),
                };
                if let Some(m) = &s.mayer {
                    let kit = BoundaryKit::new(m, nx, np);
                    kit.hess(bargs, &[sigma], &mut scratch_b);
                    for (a, v) in acc_b.iter_mut().zip(&scratch_b) {
                        *a += v;
                    }
                }
                if let Some(b) = &s.boundary {
                    let kit = BoundaryKit::new(b, nx, np);
                    let wb = &y[self.partitions.boundary.clone()];
                    if wb.iter().any(|&v| v != 0.0) {
                        kit.hess(bargs, wb, &mut scratch_b);
                        for (a, v) in acc_b.iter_mut().zip(&scratch_b) {
                            *a += v;
                        }
                    }
                }
            }
            for &(a, b) in &self.endpoint_hess_pairs {
                let (ca, cb) = (self.endpoint_hess_col(a), self.endpoint_hess_col(b));
                let (row, col) = if ca >= cb { (ca, cb) } else { (cb, ca) };
                sink(row, col, acc_b[a * nh_b + b]);
            }
        }

        if free {
            match (layout.t0_index, layout.tf_index) {
                (Some(i0), Some(i1)) => {
                    sink(i0, i0, h_t0t0);
                    sink(i1, i0, h_tft0);
                    sink(i1, i1, h_tftf);
                }
                (Some(i0), None) => sink(i0, i0, h_t0t0),
                (None, Some(i1)) => sink(i1, i1, h_tftf),
                (None, None) => {}
            }
        }
    }
}

impl NlpModel for NlpProblem {
    fn n_vars(&self) -> usize {
        self.layout.n_vars
    }

    fn n_rows(&self) -> usize {
        self.partitions.n_rows()
    }

    fn var_bounds(&self) -> (&[f64], &[f64]) {
        (&self.z_lower, &self.z_upper)
    }

    fn row_bounds(&self) -> (&[f64], &[f64]) {
        (&self.row_lower, &self.row_upper)
    }

    fn jac_pattern(&self) -> &Arc<SparsityPattern> {
        &self.jac_pattern
    }

    fn hess_pattern(&self) -> &Arc<SparsityPattern> {
        &self.hess_pattern
    }

    fn constant_rows(&self) -> Range<usize> {
        match &self.rate_block {
            Some(b) if b.fixed_time() => self.partitions.rate_linear.clone(),
            _ => 0..0,
        }
    }

    fn counters(&self) -> (u64, u64) {
        (self.eval_count(), self.rate_jacobian_refreshes())
    }

    fn eval(
        &self,
        z: &[f64],
        req: EvalRequest<'_>,
        out: &mut EvalOut,
    ) -> Result<(), TranscribeError> {
        self.eval_impl(z, req, out)
    }
}

/// Default cold-start guess: states interpolate linearly between the guess
/// endpoints, inputs hold their initial guess (pinned values exactly), free
/// times start at their bound midpoints.
pub fn default_guess(problem: &NlpProblem) -> Vec<f64> {
    let layout = problem.layout();
    let s = problem.spec().spec();
    let mut z = vec![0.0; layout.n_vars];
    let x0 = &s.guess.x_t0;
    let xf = s.guess.x_tf.as_ref().unwrap_or(x0);
    for (i, pt) in layout.grid().points().iter().enumerate() {
        for j in 0..layout.nx {
            z[layout.x_index(i, j)] = x0[j] + pt.tau * (xf[j] - x0[j]);
        }
        if pt.has_control {
            for j in 0..layout.nu {
                z[layout.u_index(i, j).unwrap()] = s.guess.u_t0[j];
            }
        }
    }
    for j in 0..layout.np {
        z[layout.p_index(j)] = s.guess.p[j];
    }
    if let Some(i) = layout.t0_index {
        z[i] = s.time.t0.midpoint();
    }
    if let Some(i) = layout.tf_index {
        z[i] = s.time.tf.midpoint();
    }
    let last = layout.last_control_point();
    for j in 0..layout.nu {
        if let Some(v) = s.u_initial[j] {
            z[layout.u_index(0, j).unwrap()] = v;
        }
        if let Some(v) = s.u_terminal[j] {
            z[layout.u_index(last, j).unwrap()] = v;
        }
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry;

    fn validated(name: &str) -> ValidatedSpec {
        crate::ocp::validate(registry::get(name).unwrap().build()).unwrap()
    }

    #[test]
    fn hs_grid_has_199_collocation_points_for_100_nodes() {
        let mesh = Mesh::uniform(Scheme::HermiteSimpson, 100).unwrap();
        let grid = GridPlan::build(&mesh).unwrap();
        assert_eq!(grid.n_collocation(), 199);
        assert_eq!(grid.n_points(), 199);
    }

    #[test]
    fn lgr_grid_shares_interval_endpoints() {
        let mesh = Mesh::uniform_lgr(4, 3).unwrap();
        let grid = GridPlan::build(&mesh).unwrap();
        assert_eq!(grid.n_collocation(), 9);
        assert_eq!(grid.n_points(), 10);
        assert_eq!(grid.interval_points(0), &[0, 1, 2, 3]);
        assert_eq!(grid.interval_points(1), &[3, 4, 5, 6]);
        assert!(!grid.points()[9].has_control);
    }

    #[test]
    fn count_constraints_table_values() {
        for &n in &[5usize, 10, 50] {
            let trap = Mesh::uniform(Scheme::Trapezoidal, n).unwrap();
            let hs = Mesh::uniform(Scheme::HermiteSimpson, n).unwrap();
            assert_eq!(
                count_constraints(&trap, RateMode::AddState, 1, VarKind::Input).unwrap(),
                n
            );
            assert_eq!(
                count_constraints(&hs, RateMode::AddState, 1, VarKind::Input).unwrap(),
                2 * n - 1
            );
            assert_eq!(
                count_constraints(&trap, RateMode::OnMesh, 1, VarKind::Input).unwrap(),
                2 * n
            );
            assert_eq!(
                count_constraints(&hs, RateMode::OnMesh, 1, VarKind::Input).unwrap(),
                4 * n - 4
            );
            assert_eq!(
                count_constraints(&hs, RateMode::OnMesh, 1, VarKind::State).unwrap(),
                6 * n - 6
            );
            assert_eq!(
                count_constraints(&trap, RateMode::AddPathConstraint, 1, VarKind::State).unwrap(),
                2 * n
            );
            assert_eq!(
                count_constraints(&hs, RateMode::AddPathConstraint, 1, VarKind::State).unwrap(),
                2 * (2 * n - 1)
            );
            for &p in &[3usize, 5] {
                let lgr = Mesh::uniform_lgr(n, p).unwrap();
                assert_eq!(
                    count_constraints(&lgr, RateMode::AddState, 1, VarKind::Input).unwrap(),
                    p * (n - 1)
                );
                assert_eq!(
                    count_constraints(&lgr, RateMode::OnMesh, 1, VarKind::Input).unwrap(),
                    2 * p * (n - 1)
                );
                assert_eq!(
                    count_constraints(&lgr, RateMode::OnMesh, 1, VarKind::State).unwrap(),
                    2 * p * (n - 1)
                );
                assert_eq!(
                    count_constraints(&lgr, RateMode::AddPathConstraint, 1, VarKind::State)
                        .unwrap(),
                    2 * p * (n - 1)
                );
            }
        }
        let trap = Mesh::uniform(Scheme::Trapezoidal, 10).unwrap();
        assert!(count_constraints(&trap, RateMode::AddState, 1, VarKind::State).is_err());
        assert!(count_constraints(&trap, RateMode::AddPathConstraint, 1, VarKind::Input).is_err());
    }

    #[test]
    fn transcribe_rejects_incompatible_modes() {
        let sosr = validated("sosr");
        let mesh = Mesh::uniform(Scheme::HermiteSimpson, 10).unwrap();
        assert!(matches!(
            transcribe(&sosr, &mesh, RateMode::AddPathConstraint),
            Err(TranscribeError::IncompatibleMode { .. })
        ));
        let di = validated("di-staterate");
        assert!(matches!(
            transcribe(&di, &mesh, RateMode::AddState),
            Err(TranscribeError::IncompatibleMode { .. })
        ));
    }

    #[test]
    fn partition_rows_are_disjoint_and_complete() {
        let spec = validated("di-staterate");
        let mesh = Mesh::uniform(Scheme::HermiteSimpson, 10).unwrap();
        let p = transcribe(&spec, &mesh, RateMode::OnMesh).unwrap();
        let parts = p.partitions();
        assert_eq!(parts.defect.end, parts.path.start);
        assert_eq!(parts.path.end, parts.boundary.start);
        assert_eq!(parts.boundary.end, parts.rate_linear.start);
        assert_eq!(parts.n_rows(), p.n_rows());
        // three two-sided stencil rows per interval on the velocity state
        assert_eq!(parts.rate_linear.len(), 3 * 9);
    }

    #[test]
    fn zero_dynamics_defects_pin_states_constant() {
        use crate::ocp::{OcpSpec, PointFns};
        // f = 0 with x(0) pinned: defect rows vanish exactly when all grid
        // states are equal, and are nonzero otherwise
        let spec = OcpSpec::builder(1, 1)
            .dynamics(PointFns::new(1, |_, out| out[0] = 0.0))
            .lagrange(PointFns::new(1, |a, out| out[0] = a.u[0] * a.u[0]))
            .fixed_time(0.0, 1.0)
            .build();
        let v = crate::ocp::validate(spec).unwrap();
        let mesh = Mesh::uniform(Scheme::Trapezoidal, 5).unwrap();
        let p = transcribe(&v, &mesh, RateMode::OnMesh).unwrap();
        let mut z = default_guess(&p);
        for i in 0..p.layout().grid().n_points() {
            z[p.layout().x_index(i, 0)] = 3.25;
        }
        let (_, rows, _, _) = p.eval_all(&z, 1.0, &vec![0.0; p.n_rows()]).unwrap();
        for &r in &rows[p.partitions().defect.clone()] {
            assert!(r.abs() < 1e-14);
        }
        z[p.layout().x_index(2, 0)] = 4.0;
        let (_, rows, _, _) = p.eval_all(&z, 1.0, &vec![0.0; p.n_rows()]).unwrap();
        assert!(rows[p.partitions().defect.clone()]
            .iter()
            .any(|r| r.abs() > 0.1));
    }

    #[test]
    fn eval_is_pure() {
        let spec = validated("sosr");
        let mesh = Mesh::uniform(Scheme::HermiteSimpson, 8).unwrap();
        let p = transcribe(&spec, &mesh, RateMode::OnMesh).unwrap();
        let z = default_guess(&p);
        let y = vec![0.3; p.n_rows()];
        let (o1, r1, j1, h1) = p.eval_all(&z, 1.0, &y).unwrap();
        let (o2, r2, j2, h2) = p.eval_all(&z, 1.0, &y).unwrap();
        assert_eq!(o1, o2);
        assert_eq!(r1, r2);
        assert_eq!(j1.values, j2.values);
        assert_eq!(h1.values, h2.values);
    }
}
