//! Continuous-time optimal control problems in Bolza form, their validation,
//! and the conventional rate-constraint rewrites (add-state and
//! add-path-constraint) plus regularization of add-state inputs.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::OcpError;

const SQRT_EPS: f64 = 1.4901161193847656e-8;
const CBRT_EPS: f64 = 6.055454452393343e-6;

/// Arguments of a point function `g(x, u, t, p)`.
#[derive(Clone, Copy)]
pub struct PointArgs<'a> {
    pub x: &'a [f64],
    pub u: &'a [f64],
    pub t: f64,
    pub p: &'a [f64],
}

/// Arguments of an endpoint function `g(x0, t0, xf, tf, p)`.
#[derive(Clone, Copy)]
pub struct BoundaryArgs<'a> {
    pub x0: &'a [f64],
    pub t0: f64,
    pub xf: &'a [f64],
    pub tf: f64,
    pub p: &'a [f64],
}

pub type PointEval = Arc<dyn Fn(PointArgs, &mut [f64]) + Send + Sync>;
/// Dense Jacobian, row-major `n_out x (nx + nu + 1 + np)`, columns ordered
/// `[x, u, t, p]`.
pub type PointJac = Arc<dyn Fn(PointArgs, &mut [f64]) + Send + Sync>;
/// Weighted Hessian `sum_i w_i hess(g_i)`: full symmetric square over
/// `[x, u, p]` (time excluded), row-major `(nx + nu + np)^2`.
pub type PointHess = Arc<dyn Fn(PointArgs, &[f64], &mut [f64]) + Send + Sync>;

pub type BoundaryEval = Arc<dyn Fn(BoundaryArgs, &mut [f64]) + Send + Sync>;
/// Dense Jacobian over columns `[x0, t0, xf, tf, p]`.
pub type BoundaryJac = Arc<dyn Fn(BoundaryArgs, &mut [f64]) + Send + Sync>;
/// Weighted Hessian over `[x0, xf, p]`, full symmetric square.
pub type BoundaryHess = Arc<dyn Fn(BoundaryArgs, &[f64], &mut [f64]) + Send + Sync>;

/// A vector-valued point function with optional analytic derivatives.
/// Missing derivatives fall back to finite differences (forward for
/// Jacobians with step `sqrt(eps) * (1 + |z|)`).
#[derive(Clone)]
pub struct PointFns {
    pub n_out: usize,
    pub eval: PointEval,
    pub jac: Option<PointJac>,
    pub hess: Option<PointHess>,
}

impl PointFns {
    pub fn new(n_out: usize, eval: impl Fn(PointArgs, &mut [f64]) + Send + Sync + 'static) -> Self {
        PointFns {
            n_out,
            eval: Arc::new(eval),
            jac: None,
            hess: None,
        }
    }

    pub fn with_jac(mut self, jac: impl Fn(PointArgs, &mut [f64]) + Send + Sync + 'static) -> Self {
        self.jac = Some(Arc::new(jac));
        self
    }

    pub fn with_hess(
        mut self,
        hess: impl Fn(PointArgs, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.hess = Some(Arc::new(hess));
        self
    }
}

/// A vector-valued endpoint function with optional analytic derivatives.
#[derive(Clone)]
pub struct BoundaryFns {
    pub n_out: usize,
    pub eval: BoundaryEval,
    pub jac: Option<BoundaryJac>,
    pub hess: Option<BoundaryHess>,
}

impl BoundaryFns {
    pub fn new(
        n_out: usize,
        eval: impl Fn(BoundaryArgs, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        BoundaryFns {
            n_out,
            eval: Arc::new(eval),
            jac: None,
            hess: None,
        }
    }

    pub fn with_jac(
        mut self,
        jac: impl Fn(BoundaryArgs, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.jac = Some(Arc::new(jac));
        self
    }

    pub fn with_hess(
        mut self,
        hess: impl Fn(BoundaryArgs, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.hess = Some(Arc::new(hess));
        self
    }
}

/// Two-sided bound; `lower == upper` fixes the value.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Bound {
    pub lower: f64,
    pub upper: f64,
}

impl Bound {
    pub fn fixed(v: f64) -> Self {
        Bound { lower: v, upper: v }
    }

    pub fn between(lower: f64, upper: f64) -> Self {
        Bound { lower, upper }
    }

    pub fn free() -> Self {
        Bound {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        }
    }

    pub fn is_fixed(&self) -> bool {
        self.lower == self.upper
    }

    pub fn midpoint(&self) -> f64 {
        match (self.lower.is_finite(), self.upper.is_finite()) {
            (true, true) => 0.5 * (self.lower + self.upper),
            (true, false) => self.lower + 1.0,
            (false, true) => self.upper - 1.0,
            (false, false) => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TimeBounds {
    pub t0: Bound,
    pub tf: Bound,
}

impl TimeBounds {
    pub fn fixed(t0: f64, tf: f64) -> Self {
        TimeBounds {
            t0: Bound::fixed(t0),
            tf: Bound::fixed(tf),
        }
    }

    pub fn free_time(&self) -> bool {
        !self.t0.is_fixed() || !self.tf.is_fixed()
    }
}

/// How rate bounds enter the transcribed problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RateMode {
    /// Promote each rate-bounded input to a state driven by a new input.
    /// Applies to input rate bounds only.
    AddState,
    /// Append `rate_L <= f_j <= rate_U` path rows. Applies to state rate
    /// bounds only.
    AddPathConstraint,
    /// Linear finite-difference rows on the grid values, for both kinds.
    OnMesh,
}

impl RateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RateMode::AddState => "addstate",
            RateMode::AddPathConstraint => "addpath",
            RateMode::OnMesh => "onmesh",
        }
    }
}

impl std::fmt::Display for RateMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Path constraint block `lower <= c(x, u, t, p) <= upper`.
#[derive(Clone)]
pub struct PathConstraints {
    pub fns: PointFns,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Hints used to build default (linear interpolation) initial guesses and to
/// seed promoted states.
#[derive(Debug, Clone, PartialEq)]
pub struct GuessHints {
    pub x_t0: Vec<f64>,
    pub x_tf: Option<Vec<f64>>,
    pub u_t0: Vec<f64>,
    pub p: Vec<f64>,
}

/// A continuous-time optimal control problem in Bolza form.
#[derive(Clone)]
pub struct OcpSpec {
    pub n_states: usize,
    pub n_inputs: usize,
    pub n_params: usize,
    pub dynamics: PointFns,
    pub lagrange: Option<PointFns>,
    pub mayer: Option<BoundaryFns>,
    pub path: Option<PathConstraints>,
    /// Equality boundary conditions `phi(x0, t0, xf, tf, p) = 0`.
    pub boundary: Option<BoundaryFns>,
    pub x_bounds: Vec<Bound>,
    pub u_bounds: Vec<Bound>,
    pub p_bounds: Vec<Bound>,
    pub time: TimeBounds,
    /// Per-state rate bounds; one-sided bounds use infinity sentinels.
    pub x_rate: Vec<Option<(f64, f64)>>,
    /// Per-input rate bounds.
    pub u_rate: Vec<Option<(f64, f64)>>,
    /// Optional fixed initial input values (enforced at the first control
    /// grid point; mapped to boundary rows by the add-state rewrite).
    pub u_initial: Vec<Option<f64>>,
    /// Optional fixed terminal input values.
    pub u_terminal: Vec<Option<f64>>,
    pub guess: GuessHints,
}

impl OcpSpec {
    pub fn builder(n_states: usize, n_inputs: usize) -> OcpBuilder {
        OcpBuilder::new(n_states, n_inputs)
    }
}

pub struct OcpBuilder {
    spec: OcpSpec,
}

impl OcpBuilder {
    pub fn new(n_states: usize, n_inputs: usize) -> Self {
        let dynamics = PointFns::new(n_states, |_, out| out.fill(0.0));
        OcpBuilder {
            spec: OcpSpec {
                n_states,
                n_inputs,
                n_params: 0,
                dynamics,
                lagrange: None,
                mayer: None,
                path: None,
                boundary: None,
                x_bounds: vec![Bound::free(); n_states],
                u_bounds: vec![Bound::free(); n_inputs],
                p_bounds: Vec::new(),
                time: TimeBounds::fixed(0.0, 1.0),
                x_rate: vec![None; n_states],
                u_rate: vec![None; n_inputs],
                u_initial: vec![None; n_inputs],
                u_terminal: vec![None; n_inputs],
                guess: GuessHints {
                    x_t0: vec![0.0; n_states],
                    x_tf: None,
                    u_t0: vec![0.0; n_inputs],
                    p: Vec::new(),
                },
            },
        }
    }

    pub fn params(mut self, n: usize) -> Self {
        self.spec.n_params = n;
        self.spec.p_bounds = vec![Bound::free(); n];
        self.spec.guess.p = vec![0.0; n];
        self
    }

    pub fn dynamics(mut self, fns: PointFns) -> Self {
        self.spec.dynamics = fns;
        self
    }

    pub fn lagrange(mut self, fns: PointFns) -> Self {
        self.spec.lagrange = Some(fns);
        self
    }

    pub fn mayer(mut self, fns: BoundaryFns) -> Self {
        self.spec.mayer = Some(fns);
        self
    }

    pub fn path(mut self, fns: PointFns, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.spec.path = Some(PathConstraints { fns, lower, upper });
        self
    }

    pub fn boundary(mut self, fns: BoundaryFns) -> Self {
        self.spec.boundary = Some(fns);
        self
    }

    pub fn x_bounds(mut self, bounds: Vec<Bound>) -> Self {
        self.spec.x_bounds = bounds;
        self
    }

    pub fn u_bounds(mut self, bounds: Vec<Bound>) -> Self {
        self.spec.u_bounds = bounds;
        self
    }

    pub fn p_bounds(mut self, bounds: Vec<Bound>) -> Self {
        self.spec.p_bounds = bounds;
        self
    }

    pub fn time(mut self, time: TimeBounds) -> Self {
        self.spec.time = time;
        self
    }

    pub fn fixed_time(mut self, t0: f64, tf: f64) -> Self {
        self.spec.time = TimeBounds::fixed(t0, tf);
        self
    }

    pub fn x_rate_bound(mut self, index: usize, lower: f64, upper: f64) -> Self {
        self.spec.x_rate[index] = Some((lower, upper));
        self
    }

    pub fn u_rate_bound(mut self, index: usize, lower: f64, upper: f64) -> Self {
        self.spec.u_rate[index] = Some((lower, upper));
        self
    }

    pub fn u_initial(mut self, index: usize, value: f64) -> Self {
        self.spec.u_initial[index] = Some(value);
        self
    }

    pub fn u_terminal(mut self, index: usize, value: f64) -> Self {
        self.spec.u_terminal[index] = Some(value);
        self
    }

    pub fn guess_x(mut self, x_t0: Vec<f64>, x_tf: Option<Vec<f64>>) -> Self {
        self.spec.guess.x_t0 = x_t0;
        self.spec.guess.x_tf = x_tf;
        self
    }

    pub fn guess_u(mut self, u_t0: Vec<f64>) -> Self {
        self.spec.guess.u_t0 = u_t0;
        self
    }

    pub fn build(self) -> OcpSpec {
        self.spec
    }
}

/// Classification of a Jacobian entry across probe points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacClass {
    Zero,
    Constant,
    Varying,
}

/// Probed derivative structure of one callback.
#[derive(Debug, Clone, PartialEq)]
pub struct FnStructure {
    pub n_out: usize,
    /// Jacobian columns.
    pub nj: usize,
    /// Hessian variables.
    pub nh: usize,
    pub jac_class: Vec<JacClass>,
    pub hess_mask: Vec<bool>,
}

impl FnStructure {
    /// A row is linear when every Jacobian entry of the row is constant or
    /// structurally zero across the probe points.
    pub fn row_is_linear(&self, row: usize) -> bool {
        self.jac_class[row * self.nj..(row + 1) * self.nj]
            .iter()
            .all(|c| *c != JacClass::Varying)
    }

    pub fn hess_nonzero(&self) -> bool {
        self.hess_mask.iter().any(|&m| m)
    }
}

/// Probed structure of every callback of a validated problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Structure {
    pub dynamics: FnStructure,
    pub lagrange: Option<FnStructure>,
    pub path: Option<FnStructure>,
    pub mayer: Option<FnStructure>,
    pub boundary: Option<FnStructure>,
}

/// Bookkeeping left behind by the add-state rewrite.
#[derive(Debug, Clone, PartialEq)]
pub struct AddStatePair {
    /// Input slot now carrying the rate input (the promoted input's old slot).
    pub input_slot: usize,
    /// State index of the promoted input.
    pub state_index: usize,
    /// Original rate bounds, now simple bounds on the rate input.
    pub rate: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AddStateInfo {
    pub pairs: Vec<AddStatePair>,
}

/// An immutable, dimension-checked problem safe to share across solves.
/// Callbacks must be reentrant.
#[derive(Clone)]
pub struct ValidatedSpec {
    spec: Arc<OcpSpec>,
    pub structure: Structure,
    pub add_state: Option<AddStateInfo>,
}

impl ValidatedSpec {
    pub fn spec(&self) -> &OcpSpec {
        &self.spec
    }

    pub fn n_states(&self) -> usize {
        self.spec.n_states
    }

    pub fn n_inputs(&self) -> usize {
        self.spec.n_inputs
    }

    pub fn n_params(&self) -> usize {
        self.spec.n_params
    }

    pub fn free_time(&self) -> bool {
        self.spec.time.free_time()
    }

    pub fn rate_bounded_inputs(&self) -> Vec<usize> {
        self.spec
            .u_rate
            .iter()
            .enumerate()
            .filter_map(|(j, r)| r.map(|_| j))
            .collect()
    }

    pub fn rate_bounded_states(&self) -> Vec<usize> {
        self.spec
            .x_rate
            .iter()
            .enumerate()
            .filter_map(|(j, r)| r.map(|_| j))
            .collect()
    }

    pub fn has_rate_bounds(&self) -> bool {
        !self.rate_bounded_inputs().is_empty() || !self.rate_bounded_states().is_empty()
    }
}

fn check_bound_vec(what: &str, bounds: &[Bound]) -> Result<(), OcpError> {
    for (i, b) in bounds.iter().enumerate() {
        if b.lower > b.upper {
            return Err(OcpError::InvertedBounds {
                what: format!("{what} {i}"),
                lower: b.lower,
                upper: b.upper,
            });
        }
    }
    Ok(())
}

/// Validates dimensions, bound ordering and callback evaluability, probing
/// the derivative structure at deterministic sample points.
pub fn validate(spec: OcpSpec) -> Result<ValidatedSpec, OcpError> {
    if spec.lagrange.is_none() && spec.mayer.is_none() {
        return Err(OcpError::MissingObjective);
    }
    let dim = |what: &str, got: usize, expected: usize| -> Result<(), OcpError> {
        if got == expected {
            Ok(())
        } else {
            Err(OcpError::DimensionMismatch {
                what: what.to_string(),
                expected,
                got,
            })
        }
    };
    dim("dynamics output", spec.dynamics.n_out, spec.n_states)?;
    dim("x bounds", spec.x_bounds.len(), spec.n_states)?;
    dim("u bounds", spec.u_bounds.len(), spec.n_inputs)?;
    dim("p bounds", spec.p_bounds.len(), spec.n_params)?;
    dim("state rate bounds", spec.x_rate.len(), spec.n_states)?;
    dim("input rate bounds", spec.u_rate.len(), spec.n_inputs)?;
    dim("initial input pins", spec.u_initial.len(), spec.n_inputs)?;
    dim("terminal input pins", spec.u_terminal.len(), spec.n_inputs)?;
    dim("guess x(t0)", spec.guess.x_t0.len(), spec.n_states)?;
    dim("guess u(t0)", spec.guess.u_t0.len(), spec.n_inputs)?;
    if let Some(l) = &spec.lagrange {
        dim("lagrange output", l.n_out, 1)?;
    }
    if let Some(m) = &spec.mayer {
        dim("mayer output", m.n_out, 1)?;
    }
    if let Some(path) = &spec.path {
        dim("path lower bounds", path.lower.len(), path.fns.n_out)?;
        dim("path upper bounds", path.upper.len(), path.fns.n_out)?;
        for (i, (&lo, &hi)) in path.lower.iter().zip(&path.upper).enumerate() {
            if lo > hi {
                return Err(OcpError::InvertedBounds {
                    what: format!("path row {i}"),
                    lower: lo,
                    upper: hi,
                });
            }
        }
    }
    check_bound_vec("state", &spec.x_bounds)?;
    check_bound_vec("input", &spec.u_bounds)?;
    check_bound_vec("parameter", &spec.p_bounds)?;
    check_bound_vec("time", &[spec.time.t0, spec.time.tf])?;
    for (i, r) in spec.x_rate.iter().enumerate() {
        if let Some((lo, hi)) = r {
            if lo > hi {
                return Err(OcpError::InvertedBounds {
                    what: format!("state {i} rate"),
                    lower: *lo,
                    upper: *hi,
                });
            }
        }
    }
    for (i, r) in spec.u_rate.iter().enumerate() {
        if let Some((lo, hi)) = r {
            if lo > hi {
                return Err(OcpError::InvertedBounds {
                    what: format!("input {i} rate"),
                    lower: *lo,
                    upper: *hi,
                });
            }
        }
    }

    let structure = probe_structure(&spec)?;
    Ok(ValidatedSpec {
        spec: Arc::new(spec),
        structure,
        add_state: None,
    })
}

// ---------------------------------------------------------------------------
// Derivative completion (analytic callbacks or finite differences)
// ---------------------------------------------------------------------------

/// Evaluation and derivative access for a point function, with
/// finite-difference fallback. Shared by validation probing, transcription
/// and the rewrites.
pub(crate) struct PointKit<'a> {
    pub fns: &'a PointFns,
    pub nx: usize,
    pub nu: usize,
    pub np: usize,
}

impl<'a> PointKit<'a> {
    pub fn new(fns: &'a PointFns, nx: usize, nu: usize, np: usize) -> Self {
        PointKit { fns, nx, nu, np }
    }

    pub fn nj(&self) -> usize {
        self.nx + self.nu + 1 + self.np
    }

    pub fn nh(&self) -> usize {
        self.nx + self.nu + self.np
    }

    pub fn eval(&self, args: PointArgs, out: &mut [f64]) {
        (self.fns.eval)(args, out);
    }

    /// Jacobian over `[x, u, t, p]`; forward differences when no analytic
    /// callback is present.
    pub fn jac(&self, args: PointArgs, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.fns.n_out * self.nj());
        if let Some(jac) = &self.fns.jac {
            out.fill(0.0);
            jac(args, out);
            return;
        }
        let n_out = self.fns.n_out;
        let nj = self.nj();
        let mut base = vec![0.0; n_out];
        (self.fns.eval)(args, &mut base);
        let mut xb = args.x.to_vec();
        let mut ub = args.u.to_vec();
        let mut pb = args.p.to_vec();
        let mut pert = vec![0.0; n_out];
        for c in 0..nj {
            let (slot, old) = {
                if c < self.nx {
                    (0, xb[c])
                } else if c < self.nx + self.nu {
                    (1, ub[c - self.nx])
                } else if c == self.nx + self.nu {
                    (2, args.t)
                } else {
                    (3, pb[c - self.nx - self.nu - 1])
                }
            };
            let h = SQRT_EPS * (1.0 + old.abs());
            let mut t = args.t;
            match slot {
                0 => xb[c] = old + h,
                1 => ub[c - self.nx] = old + h,
                2 => t = old + h,
                _ => pb[c - self.nx - self.nu - 1] = old + h,
            }
            (self.fns.eval)(
                PointArgs {
                    x: &xb,
                    u: &ub,
                    t,
                    p: &pb,
                },
                &mut pert,
            );
            for r in 0..n_out {
                out[r * nj + c] = (pert[r] - base[r]) / h;
            }
            match slot {
                0 => xb[c] = old,
                1 => ub[c - self.nx] = old,
                2 => {}
                _ => pb[c - self.nx - self.nu - 1] = old,
            }
        }
    }

    /// Weighted Hessian over `[x, u, p]`. Falls back to central differences
    /// of the Jacobian (or of the values when the Jacobian is itself
    /// differenced).
    pub fn hess(&self, args: PointArgs, w: &[f64], out: &mut [f64]) {
        let nh = self.nh();
        debug_assert_eq!(out.len(), nh * nh);
        if let Some(hess) = &self.fns.hess {
            out.fill(0.0);
            hess(args, w, out);
            return;
        }
        if self.fns.jac.is_some() {
            self.fd_hess_from_jac(args, w, out);
        } else {
            self.fd_hess_from_eval(args, w, out);
        }
    }

    /// d(Jacobian)/dt by central differences; used to complete free-time
    /// second derivatives.
    pub fn jac_t_deriv(&self, args: PointArgs, out: &mut [f64]) {
        let n = self.fns.n_out * self.nj();
        debug_assert_eq!(out.len(), n);
        let h = CBRT_EPS * (1.0 + args.t.abs());
        let mut plus = vec![0.0; n];
        let mut minus = vec![0.0; n];
        self.jac(PointArgs { t: args.t + h, ..args }, &mut plus);
        self.jac(PointArgs { t: args.t - h, ..args }, &mut minus);
        for i in 0..n {
            out[i] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }

    fn hess_var(&self, args: PointArgs, k: usize) -> (usize, f64) {
        if k < self.nx {
            (0, args.x[k])
        } else if k < self.nx + self.nu {
            (1, args.u[k - self.nx])
        } else {
            (3, args.p[k - self.nx - self.nu])
        }
    }

    fn jac_col_of_hess_var(&self, k: usize) -> usize {
        if k < self.nx + self.nu {
            k
        } else {
            k + 1 // skip the time column
        }
    }

    fn fd_hess_from_jac(&self, args: PointArgs, w: &[f64], out: &mut [f64]) {
        let nh = self.nh();
        let nj = self.nj();
        let n_out = self.fns.n_out;
        let mut xb = args.x.to_vec();
        let mut ub = args.u.to_vec();
        let mut pb = args.p.to_vec();
        let mut jp = vec![0.0; n_out * nj];
        let mut jm = vec![0.0; n_out * nj];
        out.fill(0.0);
        for b in 0..nh {
            let (slot, old) = self.hess_var(args, b);
            let h = CBRT_EPS * (1.0 + old.abs());
            let set = |xb: &mut [f64], ub: &mut [f64], pb: &mut [f64], v: f64| match slot {
                0 => xb[b] = v,
                1 => ub[b - self.nx] = v,
                _ => pb[b - self.nx - self.nu] = v,
            };
            set(&mut xb, &mut ub, &mut pb, old + h);
            self.jac(
                PointArgs {
                    x: &xb,
                    u: &ub,
                    t: args.t,
                    p: &pb,
                },
                &mut jp,
            );
            set(&mut xb, &mut ub, &mut pb, old - h);
            self.jac(
                PointArgs {
                    x: &xb,
                    u: &ub,
                    t: args.t,
                    p: &pb,
                },
                &mut jm,
            );
            set(&mut xb, &mut ub, &mut pb, old);
            for a in 0..nh {
                let col = self.jac_col_of_hess_var(a);
                let mut acc = 0.0;
                for r in 0..n_out {
                    acc += w[r] * (jp[r * nj + col] - jm[r * nj + col]);
                }
                out[a * nh + b] += acc / (2.0 * h);
            }
        }
        // symmetrize
        for a in 0..nh {
            for b in (a + 1)..nh {
                let v = 0.5 * (out[a * nh + b] + out[b * nh + a]);
                out[a * nh + b] = v;
                out[b * nh + a] = v;
            }
        }
    }

    fn fd_hess_from_eval(&self, args: PointArgs, w: &[f64], out: &mut [f64]) {
        let nh = self.nh();
        let n_out = self.fns.n_out;
        let mut xb = args.x.to_vec();
        let mut ub = args.u.to_vec();
        let mut pb = args.p.to_vec();
        let mut buf = vec![0.0; n_out];
        let step = |old: f64| 1e-4 * (1.0 + old.abs());
        let mut weighted = |xb: &mut Vec<f64>, ub: &mut Vec<f64>, pb: &mut Vec<f64>| -> f64 {
            (self.fns.eval)(
                PointArgs {
                    x: xb,
                    u: ub,
                    t: args.t,
                    p: pb,
                },
                &mut buf,
            );
            buf.iter().zip(w).map(|(v, wi)| v * wi).sum()
        };
        let set = |kit: &PointKit, xb: &mut [f64], ub: &mut [f64], pb: &mut [f64], k: usize, v: f64| {
            if k < kit.nx {
                xb[k] = v;
            } else if k < kit.nx + kit.nu {
                ub[k - kit.nx] = v;
            } else {
                pb[k - kit.nx - kit.nu] = v;
            }
        };
        for a in 0..nh {
            let (_, va) = self.hess_var(args, a);
            let ha = step(va);
            for b in 0..=a {
                let (_, vb) = self.hess_var(args, b);
                let hb = step(vb);
                let mut quad = [0.0; 4];
                for (q, (sa, sb)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
                    .into_iter()
                    .enumerate()
                {
                    set(self, &mut xb, &mut ub, &mut pb, a, va + sa * ha);
                    set(self, &mut xb, &mut ub, &mut pb, b, {
                        let base = if a == b { va + sa * ha } else { vb };
                        base + sb * hb
                    });
                    quad[q] = weighted(&mut xb, &mut ub, &mut pb);
                    set(self, &mut xb, &mut ub, &mut pb, b, vb);
                    set(self, &mut xb, &mut ub, &mut pb, a, va);
                }
                let v = (quad[0] - quad[1] - quad[2] + quad[3]) / (4.0 * ha * hb);
                out[a * nh + b] = v;
                out[b * nh + a] = v;
            }
        }
    }
}

/// Evaluation and derivative access for an endpoint function.
pub(crate) struct BoundaryKit<'a> {
    pub fns: &'a BoundaryFns,
    pub nx: usize,
    pub np: usize,
}

impl<'a> BoundaryKit<'a> {
    pub fn new(fns: &'a BoundaryFns, nx: usize, np: usize) -> Self {
        BoundaryKit { fns, nx, np }
    }

    pub fn nj(&self) -> usize {
        2 * self.nx + 2 + self.np
    }

    pub fn nh(&self) -> usize {
        2 * self.nx + self.np
    }

    pub fn eval(&self, args: BoundaryArgs, out: &mut [f64]) {
        (self.fns.eval)(args, out);
    }

    pub fn jac(&self, args: BoundaryArgs, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.fns.n_out * self.nj());
        if let Some(jac) = &self.fns.jac {
            out.fill(0.0);
            jac(args, out);
            return;
        }
        let n_out = self.fns.n_out;
        let nj = self.nj();
        let mut base = vec![0.0; n_out];
        (self.fns.eval)(args, &mut base);
        let mut x0 = args.x0.to_vec();
        let mut xf = args.xf.to_vec();
        let mut pb = args.p.to_vec();
        let mut pert = vec![0.0; n_out];
        for c in 0..nj {
            let old = self.get_col(&x0, args.t0, &xf, args.tf, &pb, c);
            let h = SQRT_EPS * (1.0 + old.abs());
            let (mut t0, mut tf) = (args.t0, args.tf);
            self.set_col(&mut x0, &mut t0, &mut xf, &mut tf, &mut pb, c, old + h);
            (self.fns.eval)(
                BoundaryArgs {
                    x0: &x0,
                    t0,
                    xf: &xf,
                    tf,
                    p: &pb,
                },
                &mut pert,
            );
            for r in 0..n_out {
                out[r * nj + c] = (pert[r] - base[r]) / h;
            }
            self.set_col(&mut x0, &mut t0, &mut xf, &mut tf, &mut pb, c, old);
        }
    }

    fn get_col(&self, x0: &[f64], t0: f64, xf: &[f64], tf: f64, p: &[f64], c: usize) -> f64 {
        let nx = self.nx;
        if c < nx {
            x0[c]
        } else if c == nx {
            t0
        } else if c < 2 * nx + 1 {
            xf[c - nx - 1]
        } else if c == 2 * nx + 1 {
            tf
        } else {
            p[c - 2 * nx - 2]
        }
    }

    fn set_col(
        &self,
        x0: &mut [f64],
        t0: &mut f64,
        xf: &mut [f64],
        tf: &mut f64,
        p: &mut [f64],
        c: usize,
        v: f64,
    ) {
        let nx = self.nx;
        if c < nx {
            x0[c] = v;
        } else if c == nx {
            *t0 = v;
        } else if c < 2 * nx + 1 {
            xf[c - nx - 1] = v;
        } else if c == 2 * nx + 1 {
            *tf = v;
        } else {
            p[c - 2 * nx - 2] = v;
        }
    }

    /// Weighted Hessian over `[x0, xf, p]`.
    pub fn hess(&self, args: BoundaryArgs, w: &[f64], out: &mut [f64]) {
        let nh = self.nh();
        debug_assert_eq!(out.len(), nh * nh);
        if let Some(hess) = &self.fns.hess {
            out.fill(0.0);
            hess(args, w, out);
            return;
        }
        // central differences of the Jacobian over [x0, xf, p]
        let nj = self.nj();
        let n_out = self.fns.n_out;
        let mut x0 = args.x0.to_vec();
        let mut xf = args.xf.to_vec();
        let mut pb = args.p.to_vec();
        let mut jp = vec![0.0; n_out * nj];
        let mut jm = vec![0.0; n_out * nj];
        out.fill(0.0);
        let jac_col = |k: usize| -> usize {
            let nx = self.nx;
            if k < nx {
                k
            } else if k < 2 * nx {
                k + 1
            } else {
                k + 2
            }
        };
        for b in 0..nh {
            let col_b = jac_col(b);
            let old = self.get_col(&x0, args.t0, &xf, args.tf, &pb, col_b);
            let h = CBRT_EPS * (1.0 + old.abs());
            let (mut t0, mut tf) = (args.t0, args.tf);
            self.set_col(&mut x0, &mut t0, &mut xf, &mut tf, &mut pb, col_b, old + h);
            self.jac(
                BoundaryArgs {
                    x0: &x0,
                    t0,
                    xf: &xf,
                    tf,
                    p: &pb,
                },
                &mut jp,
            );
            self.set_col(&mut x0, &mut t0, &mut xf, &mut tf, &mut pb, col_b, old - h);
            self.jac(
                BoundaryArgs {
                    x0: &x0,
                    t0,
                    xf: &xf,
                    tf,
                    p: &pb,
                },
                &mut jm,
            );
            self.set_col(&mut x0, &mut t0, &mut xf, &mut tf, &mut pb, col_b, old);
            for a in 0..nh {
                let col_a = jac_col(a);
                let mut acc = 0.0;
                for r in 0..n_out {
                    acc += w[r] * (jp[r * nj + col_a] - jm[r * nj + col_a]);
                }
                out[a * nh + b] += acc / (2.0 * h);
            }
        }
        for a in 0..nh {
            for b in (a + 1)..nh {
                let v = 0.5 * (out[a * nh + b] + out[b * nh + a]);
                out[a * nh + b] = v;
                out[b * nh + a] = v;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Structure probing
// ---------------------------------------------------------------------------

fn sample_bound(rng: &mut ChaCha8Rng, b: Bound) -> f64 {
    match (b.lower.is_finite(), b.upper.is_finite()) {
        (true, true) => {
            if b.is_fixed() {
                b.lower
            } else {
                b.lower + (0.05 + 0.9 * rng.gen::<f64>()) * (b.upper - b.lower)
            }
        }
        (true, false) => b.lower + 0.1 + rng.gen::<f64>(),
        (false, true) => b.upper - 0.1 - rng.gen::<f64>(),
        (false, false) => 2.0 * rng.gen::<f64>() - 1.0,
    }
}

struct ProbePoint {
    x: Vec<f64>,
    u: Vec<f64>,
    t: f64,
    p: Vec<f64>,
}

fn probe_points(spec: &OcpSpec, count: usize) -> Vec<ProbePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6f6d6573);
    let t_lo = spec.time.t0.midpoint();
    let t_hi = spec.time.tf.midpoint();
    (0..count)
        .map(|_| ProbePoint {
            x: spec.x_bounds.iter().map(|&b| sample_bound(&mut rng, b)).collect(),
            u: spec.u_bounds.iter().map(|&b| sample_bound(&mut rng, b)).collect(),
            t: t_lo + (0.1 + 0.8 * rng.gen::<f64>()) * (t_hi - t_lo),
            p: spec.p_bounds.iter().map(|&b| sample_bound(&mut rng, b)).collect(),
        })
        .collect()
}

fn classify(samples: &[Vec<f64>], idx: usize) -> JacClass {
    let tol = 1e-10;
    let v0 = samples[0][idx];
    if samples.iter().all(|s| s[idx].abs() < tol) {
        JacClass::Zero
    } else if samples
        .iter()
        .all(|s| (s[idx] - v0).abs() <= tol * (1.0 + v0.abs()))
    {
        JacClass::Constant
    } else {
        JacClass::Varying
    }
}

fn probe_point_fn(
    spec: &OcpSpec,
    fns: &PointFns,
    points: &[ProbePoint],
    what: &str,
) -> Result<FnStructure, OcpError> {
    let kit = PointKit::new(fns, spec.n_states, spec.n_inputs, spec.n_params);
    let (nj, nh) = (kit.nj(), kit.nh());
    let mut rng = ChaCha8Rng::seed_from_u64(0x77656967);
    let mut jacs = Vec::new();
    let mut mask = vec![false; nh * nh];
    let mut vals = vec![0.0; fns.n_out];
    for pt in points {
        let args = PointArgs {
            x: &pt.x,
            u: &pt.u,
            t: pt.t,
            p: &pt.p,
        };
        kit.eval(args, &mut vals);
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(OcpError::CallbackFailure {
                what: what.to_string(),
            });
        }
        let mut j = vec![0.0; fns.n_out * nj];
        kit.jac(args, &mut j);
        jacs.push(j);
        let w: Vec<f64> = (0..fns.n_out)
            .map(|_| 0.5 + rng.gen::<f64>())
            .collect();
        let mut h = vec![0.0; nh * nh];
        kit.hess(args, &w, &mut h);
        for (i, &v) in h.iter().enumerate() {
            if v.abs() > 1e-8 {
                mask[i] = true;
            }
        }
    }
    let jac_class = (0..fns.n_out * nj).map(|i| classify(&jacs, i)).collect();
    Ok(FnStructure {
        n_out: fns.n_out,
        nj,
        nh,
        jac_class,
        hess_mask: mask,
    })
}

fn probe_boundary_fn(
    spec: &OcpSpec,
    fns: &BoundaryFns,
    points: &[ProbePoint],
    what: &str,
) -> Result<FnStructure, OcpError> {
    let kit = BoundaryKit::new(fns, spec.n_states, spec.n_params);
    let (nj, nh) = (kit.nj(), kit.nh());
    let mut rng = ChaCha8Rng::seed_from_u64(0x626f756e);
    let mut jacs = Vec::new();
    let mut mask = vec![false; nh * nh];
    let mut vals = vec![0.0; fns.n_out];
    let t0 = spec.time.t0.midpoint();
    let tf = spec.time.tf.midpoint();
    for w in points.windows(2) {
        let args = BoundaryArgs {
            x0: &w[0].x,
            t0,
            xf: &w[1].x,
            tf,
            p: &w[0].p,
        };
        kit.eval(args, &mut vals);
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(OcpError::CallbackFailure {
                what: what.to_string(),
            });
        }
        let mut j = vec![0.0; fns.n_out * nj];
        kit.jac(args, &mut j);
        jacs.push(j);
        let wts: Vec<f64> = (0..fns.n_out)
            .map(|_| 0.5 + rng.gen::<f64>())
            .collect();
        let mut h = vec![0.0; nh * nh];
        kit.hess(args, &wts, &mut h);
        for (i, &v) in h.iter().enumerate() {
            if v.abs() > 1e-8 {
                mask[i] = true;
            }
        }
    }
    let jac_class = (0..fns.n_out * nj).map(|i| classify(&jacs, i)).collect();
    Ok(FnStructure {
        n_out: fns.n_out,
        nj,
        nh,
        jac_class,
        hess_mask: mask,
    })
}

fn probe_structure(spec: &OcpSpec) -> Result<Structure, OcpError> {
    let points = probe_points(spec, 4);
    Ok(Structure {
        dynamics: probe_point_fn(spec, &spec.dynamics, &points, "dynamics")?,
        lagrange: spec
            .lagrange
            .as_ref()
            .map(|l| probe_point_fn(spec, l, &points, "lagrange cost"))
            .transpose()?,
        path: spec
            .path
            .as_ref()
            .map(|c| probe_point_fn(spec, &c.fns, &points, "path constraints"))
            .transpose()?,
        mayer: spec
            .mayer
            .as_ref()
            .map(|m| probe_boundary_fn(spec, m, &points, "mayer cost"))
            .transpose()?,
        boundary: spec
            .boundary
            .as_ref()
            .map(|b| probe_boundary_fn(spec, b, &points, "boundary conditions"))
            .transpose()?,
    })
}

// ---------------------------------------------------------------------------
// Rewrites
// ---------------------------------------------------------------------------

struct AddStateMaps {
    nx_old: usize,
    nu: usize,
    np: usize,
    promoted: Vec<usize>,
    /// promoted input slot -> new state index
    state_of_input: Vec<Option<usize>>,
}

impl AddStateMaps {
    fn nx_new(&self) -> usize {
        self.nx_old + self.promoted.len()
    }

    /// Builds (x_old view copied, u_old) from new coordinates.
    fn inner_point<'a>(
        &self,
        x: &'a [f64],
        u: &[f64],
        u_old: &'a mut Vec<f64>,
    ) -> (&'a [f64], &'a [f64]) {
        u_old.clear();
        u_old.extend_from_slice(u);
        for (idx, &j) in self.promoted.iter().enumerate() {
            u_old[j] = x[self.nx_old + idx];
        }
        (&x[..self.nx_old], &u_old[..])
    }

    /// Maps an inner point-Jacobian column to the new column index.
    fn map_jac_col(&self, c: usize) -> usize {
        let nx_new = self.nx_new();
        if c < self.nx_old {
            c
        } else if c < self.nx_old + self.nu {
            let j = c - self.nx_old;
            match self.state_of_input[j] {
                Some(s) => s,
                None => nx_new + j,
            }
        } else {
            // t and p shift by the added states
            c + self.promoted.len()
        }
    }

    /// Maps an inner Hessian variable ([x, u, p]) to the new variable index.
    fn map_hess_var(&self, k: usize) -> usize {
        let nx_new = self.nx_new();
        if k < self.nx_old {
            k
        } else if k < self.nx_old + self.nu {
            let j = k - self.nx_old;
            match self.state_of_input[j] {
                Some(s) => s,
                None => nx_new + j,
            }
        } else {
            k + self.promoted.len()
        }
    }
}

fn wrap_point_fns(fns: &PointFns, maps: &Arc<AddStateMaps>) -> PointFns {
    let nx_new = maps.nx_new();
    let nj_old = maps.nx_old + maps.nu + 1 + maps.np;
    let nj_new = nx_new + maps.nu + 1 + maps.np;
    let nh_old = maps.nx_old + maps.nu + maps.np;
    let nh_new = nx_new + maps.nu + maps.np;

    let eval = {
        let inner = fns.eval.clone();
        let maps = maps.clone();
        Arc::new(move |args: PointArgs, out: &mut [f64]| {
            let mut u_old = Vec::new();
            let (x, u) = maps.inner_point(args.x, args.u, &mut u_old);
            inner(
                PointArgs {
                    x,
                    u,
                    t: args.t,
                    p: args.p,
                },
                out,
            );
        }) as PointEval
    };

    let jac = fns.jac.as_ref().map(|inner_jac| {
        let inner_jac = inner_jac.clone();
        let maps = maps.clone();
        let n_out = fns.n_out;
        Arc::new(move |args: PointArgs, out: &mut [f64]| {
            let mut u_old = Vec::new();
            let (x, u) = maps.inner_point(args.x, args.u, &mut u_old);
            let mut scratch = vec![0.0; n_out * nj_old];
            inner_jac(
                PointArgs {
                    x,
                    u,
                    t: args.t,
                    p: args.p,
                },
                &mut scratch,
            );
            for r in 0..n_out {
                for c in 0..nj_old {
                    let v = scratch[r * nj_old + c];
                    if v != 0.0 {
                        out[r * nj_new + maps.map_jac_col(c)] += v;
                    }
                }
            }
        }) as PointJac
    });

    let hess = fns.hess.as_ref().map(|inner_hess| {
        let inner_hess = inner_hess.clone();
        let maps = maps.clone();
        Arc::new(move |args: PointArgs, w: &[f64], out: &mut [f64]| {
            let mut u_old = Vec::new();
            let (x, u) = maps.inner_point(args.x, args.u, &mut u_old);
            let mut scratch = vec![0.0; nh_old * nh_old];
            inner_hess(
                PointArgs {
                    x,
                    u,
                    t: args.t,
                    p: args.p,
                },
                w,
                &mut scratch,
            );
            for a in 0..nh_old {
                let na = maps.map_hess_var(a);
                for b in 0..nh_old {
                    let v = scratch[a * nh_old + b];
                    if v != 0.0 {
                        out[na * nh_new + maps.map_hess_var(b)] += v;
                    }
                }
            }
        }) as PointHess
    });

    PointFns {
        n_out: fns.n_out,
        eval,
        jac,
        hess,
    }
}

fn wrap_boundary_fns(
    fns: &BoundaryFns,
    maps: &Arc<AddStateMaps>,
    extra_rows: Vec<(bool, usize, f64)>, // (at_terminal, new state index, pinned value)
) -> BoundaryFns {
    let nx_old = maps.nx_old;
    let nx_new = maps.nx_new();
    let np = maps.np;
    let nj_old = 2 * nx_old + 2 + np;
    let nj_new = 2 * nx_new + 2 + np;
    let nh_old = 2 * nx_old + np;
    let nh_new = 2 * nx_new + np;
    let n_inner = fns.n_out;
    let n_out = n_inner + extra_rows.len();

    let map_jac_col = move |c: usize| -> usize {
        if c < nx_old {
            c
        } else if c == nx_old {
            nx_new // t0
        } else if c < 2 * nx_old + 1 {
            nx_new + 1 + (c - nx_old - 1)
        } else if c == 2 * nx_old + 1 {
            2 * nx_new + 1 // tf
        } else {
            c + 2 * (nx_new - nx_old)
        }
    };
    let map_hess_var = move |k: usize| -> usize {
        if k < nx_old {
            k
        } else if k < 2 * nx_old {
            nx_new + (k - nx_old)
        } else {
            k + 2 * (nx_new - nx_old)
        }
    };

    let eval = {
        let inner = fns.eval.clone();
        let rows = extra_rows.clone();
        Arc::new(move |args: BoundaryArgs, out: &mut [f64]| {
            inner(
                BoundaryArgs {
                    x0: &args.x0[..nx_old],
                    t0: args.t0,
                    xf: &args.xf[..nx_old],
                    tf: args.tf,
                    p: args.p,
                },
                &mut out[..n_inner],
            );
            for (i, &(terminal, s, v)) in rows.iter().enumerate() {
                out[n_inner + i] = if terminal { args.xf[s] } else { args.x0[s] } - v;
            }
        }) as BoundaryEval
    };

    let jac = fns.jac.as_ref().map(|inner_jac| {
        let inner_jac = inner_jac.clone();
        let rows = extra_rows.clone();
        Arc::new(move |args: BoundaryArgs, out: &mut [f64]| {
            let mut scratch = vec![0.0; n_inner * nj_old];
            inner_jac(
                BoundaryArgs {
                    x0: &args.x0[..nx_old],
                    t0: args.t0,
                    xf: &args.xf[..nx_old],
                    tf: args.tf,
                    p: args.p,
                },
                &mut scratch,
            );
            for r in 0..n_inner {
                for c in 0..nj_old {
                    let v = scratch[r * nj_old + c];
                    if v != 0.0 {
                        out[r * nj_new + map_jac_col(c)] += v;
                    }
                }
            }
            for (i, &(terminal, s, _)) in rows.iter().enumerate() {
                let col = if terminal { nx_new + 1 + s } else { s };
                out[(n_inner + i) * nj_new + col] = 1.0;
            }
        }) as BoundaryJac
    });

    let hess = fns.hess.as_ref().map(|inner_hess| {
        let inner_hess = inner_hess.clone();
        Arc::new(move |args: BoundaryArgs, w: &[f64], out: &mut [f64]| {
            let mut scratch = vec![0.0; nh_old * nh_old];
            inner_hess(
                BoundaryArgs {
                    x0: &args.x0[..nx_old],
                    t0: args.t0,
                    xf: &args.xf[..nx_old],
                    tf: args.tf,
                    p: args.p,
                },
                &w[..n_inner],
                &mut scratch,
            );
            for a in 0..nh_old {
                let na = map_hess_var(a);
                for b in 0..nh_old {
                    let v = scratch[a * nh_old + b];
                    if v != 0.0 {
                        out[na * nh_new + map_hess_var(b)] += v;
                    }
                }
            }
        }) as BoundaryHess
    });

    BoundaryFns {
        n_out,
        eval,
        jac,
        hess,
    }
}

/// Promotes every rate-bounded input to a state driven by a new rate input.
/// The promoted input's simple bounds move to its state entry, the rate
/// bounds become simple bounds on the new input, and initial/terminal input
/// pins become boundary rows. The input rate bounds are consumed.
pub fn augment_add_state(v: &ValidatedSpec) -> Result<ValidatedSpec, OcpError> {
    let spec = v.spec();
    let promoted: Vec<usize> = spec
        .u_rate
        .iter()
        .enumerate()
        .filter_map(|(j, r)| r.map(|_| j))
        .collect();
    if promoted.is_empty() {
        return Err(OcpError::NoInputRateBounds);
    }
    let mut state_of_input = vec![None; spec.n_inputs];
    for (idx, &j) in promoted.iter().enumerate() {
        state_of_input[j] = Some(spec.n_states + idx);
    }
    let maps = Arc::new(AddStateMaps {
        nx_old: spec.n_states,
        nu: spec.n_inputs,
        np: spec.n_params,
        promoted: promoted.clone(),
        state_of_input,
    });

    let nx_new = maps.nx_new();
    let nu = spec.n_inputs;
    let np = spec.n_params;
    let r = promoted.len();

    // dynamics: original rows rewired, plus xdot_new = nu_input rows
    let inner = wrap_point_fns(&spec.dynamics, &maps);
    let nj_new = nx_new + nu + 1 + np;
    let nh_new = nx_new + nu + np;
    let dyn_eval = {
        let inner_eval = inner.eval.clone();
        let promoted = promoted.clone();
        let nx_old = spec.n_states;
        Arc::new(move |args: PointArgs, out: &mut [f64]| {
            inner_eval(args, &mut out[..nx_old]);
            for (idx, &j) in promoted.iter().enumerate() {
                out[nx_old + idx] = args.u[j];
            }
        }) as PointEval
    };
    let dyn_jac = inner.jac.as_ref().map(|inner_jac| {
        let inner_jac = inner_jac.clone();
        let promoted = promoted.clone();
        let nx_old = spec.n_states;
        Arc::new(move |args: PointArgs, out: &mut [f64]| {
            inner_jac(args, &mut out[..nx_old * nj_new]);
            for (idx, &j) in promoted.iter().enumerate() {
                out[(nx_old + idx) * nj_new + nx_new + j] = 1.0;
            }
        }) as PointJac
    });
    let dyn_hess = inner.hess.as_ref().map(|inner_hess| {
        let inner_hess = inner_hess.clone();
        let nx_old = spec.n_states;
        Arc::new(move |args: PointArgs, w: &[f64], out: &mut [f64]| {
            // rate rows are linear: only the original rows contribute
            inner_hess(args, &w[..nx_old], out);
            let _ = nh_new;
        }) as PointHess
    });
    let dynamics = PointFns {
        n_out: nx_new,
        eval: dyn_eval,
        jac: dyn_jac,
        hess: dyn_hess,
    };

    let lagrange = spec.lagrange.as_ref().map(|l| wrap_point_fns(l, &maps));
    let path = spec.path.as_ref().map(|c| PathConstraints {
        fns: wrap_point_fns(&c.fns, &maps),
        lower: c.lower.clone(),
        upper: c.upper.clone(),
    });

    // Boundary rows for pinned initial/terminal values of promoted inputs.
    let mut extra_rows = Vec::new();
    for (idx, &j) in promoted.iter().enumerate() {
        if let Some(v0) = spec.u_initial[j] {
            extra_rows.push((false, spec.n_states + idx, v0));
        }
        if let Some(vf) = spec.u_terminal[j] {
            extra_rows.push((true, spec.n_states + idx, vf));
        }
    }
    let boundary = match &spec.boundary {
        Some(b) => Some(wrap_boundary_fns(b, &maps, extra_rows)),
        None if !extra_rows.is_empty() => {
            let empty = BoundaryFns::new(0, |_, _| {})
                .with_jac(|_, _| {})
                .with_hess(|_, _, _| {});
            Some(wrap_boundary_fns(&empty, &maps, extra_rows))
        }
        None => None,
    };
    let mayer = spec
        .mayer
        .as_ref()
        .map(|m| wrap_boundary_fns(m, &maps, Vec::new()));

    let mut x_bounds = spec.x_bounds.clone();
    let mut u_bounds = spec.u_bounds.clone();
    let mut x_rate = spec.x_rate.clone();
    let mut u_initial = spec.u_initial.clone();
    let mut u_terminal = spec.u_terminal.clone();
    let mut guess = spec.guess.clone();
    let mut pairs = Vec::new();
    for (idx, &j) in promoted.iter().enumerate() {
        let rate = spec.u_rate[j].expect("promoted input has a rate bound");
        x_bounds.push(spec.u_bounds[j]);
        u_bounds[j] = Bound::between(rate.0, rate.1);
        x_rate.push(None);
        u_initial[j] = None;
        u_terminal[j] = None;
        guess.x_t0.push(spec.guess.u_t0[j]);
        if let Some(xtf) = guess.x_tf.as_mut() {
            xtf.push(spec.u_terminal[j].unwrap_or(spec.guess.u_t0[j]));
        }
        guess.u_t0[j] = 0.0;
        pairs.push(AddStatePair {
            input_slot: j,
            state_index: spec.n_states + idx,
            rate,
        });
        let _ = r;
    }

    let new_spec = OcpSpec {
        n_states: nx_new,
        n_inputs: nu,
        n_params: np,
        dynamics,
        lagrange,
        mayer,
        path,
        boundary,
        x_bounds,
        u_bounds,
        p_bounds: spec.p_bounds.clone(),
        time: spec.time,
        x_rate,
        u_rate: vec![None; nu],
        u_initial,
        u_terminal,
        guess,
    };
    let mut validated = validate(new_spec)?;
    validated.add_state = Some(AddStateInfo { pairs });
    Ok(validated)
}

/// Appends `rate_L <= f_j(x, u, t, p) <= rate_U` path rows for every
/// rate-bounded state. Dynamics and objective are untouched; the state rate
/// bounds are consumed.
pub fn augment_add_path(v: &ValidatedSpec) -> Result<ValidatedSpec, OcpError> {
    let spec = v.spec();
    let targets: Vec<usize> = spec
        .x_rate
        .iter()
        .enumerate()
        .filter_map(|(j, r)| r.map(|_| j))
        .collect();
    if targets.is_empty() {
        return Err(OcpError::NoStateRateBounds);
    }

    let (nx, nu, np) = (spec.n_states, spec.n_inputs, spec.n_params);
    let nj = nx + nu + 1 + np;
    let nh = nx + nu + np;
    let old = spec.path.clone();
    let n_old = old.as_ref().map_or(0, |c| c.fns.n_out);
    let n_out = n_old + targets.len();

    let dyn_fns = spec.dynamics.clone();
    let eval = {
        let old_eval = old.as_ref().map(|c| c.fns.eval.clone());
        let dyn_eval = dyn_fns.eval.clone();
        let targets = targets.clone();
        Arc::new(move |args: PointArgs, out: &mut [f64]| {
            if let Some(oe) = &old_eval {
                oe(args, &mut out[..n_old]);
            }
            let mut f = vec![0.0; nx];
            dyn_eval(args, &mut f);
            for (i, &j) in targets.iter().enumerate() {
                out[n_old + i] = f[j];
            }
        }) as PointEval
    };
    let have_jacs = dyn_fns.jac.is_some() && (n_old == 0 || old.as_ref().unwrap().fns.jac.is_some());
    let jac = have_jacs.then(|| {
        let old_jac = old.as_ref().and_then(|c| c.fns.jac.clone());
        let dyn_jac = dyn_fns.jac.clone().unwrap();
        let targets = targets.clone();
        Arc::new(move |args: PointArgs, out: &mut [f64]| {
            if let Some(oj) = &old_jac {
                oj(args, &mut out[..n_old * nj]);
            }
            let mut scratch = vec![0.0; nx * nj];
            dyn_jac(args, &mut scratch);
            for (i, &j) in targets.iter().enumerate() {
                out[(n_old + i) * nj..(n_old + i + 1) * nj]
                    .copy_from_slice(&scratch[j * nj..(j + 1) * nj]);
            }
        }) as PointJac
    });
    let have_hess =
        dyn_fns.hess.is_some() && (n_old == 0 || old.as_ref().unwrap().fns.hess.is_some());
    let hess = have_hess.then(|| {
        let old_hess = old.as_ref().and_then(|c| c.fns.hess.clone());
        let dyn_hess = dyn_fns.hess.clone().unwrap();
        let targets = targets.clone();
        Arc::new(move |args: PointArgs, w: &[f64], out: &mut [f64]| {
            if let Some(oh) = &old_hess {
                oh(args, &w[..n_old], out);
            }
            let mut w_dyn = vec![0.0; nx];
            for (i, &j) in targets.iter().enumerate() {
                w_dyn[j] = w[n_old + i];
            }
            let mut scratch = vec![0.0; nh * nh];
            dyn_hess(args, &w_dyn, &mut scratch);
            for (o, s) in out.iter_mut().zip(&scratch) {
                *o += s;
            }
        }) as PointHess
    });

    let mut lower: Vec<f64> = old.as_ref().map(|c| c.lower.clone()).unwrap_or_default();
    let mut upper: Vec<f64> = old.as_ref().map(|c| c.upper.clone()).unwrap_or_default();
    for &j in &targets {
        let (lo, hi) = spec.x_rate[j].unwrap();
        lower.push(lo);
        upper.push(hi);
    }

    let mut new_spec = spec.clone();
    new_spec.path = Some(PathConstraints {
        fns: PointFns {
            n_out,
            eval,
            jac,
            hess,
        },
        lower,
        upper,
    });
    new_spec.x_rate = vec![None; nx];

    let mut validated = validate(new_spec)?;
    validated.add_state = v.add_state.clone();
    Ok(validated)
}

/// Penalty norm for [`apply_regularization`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RegNorm {
    /// Smoothed absolute value `sqrt(v^2 + 1e-16)`.
    L1,
    /// Squared two-norm.
    L2Sq,
}

/// Adds `rho * ||nu||` to the Lagrange cost of an add-state-form problem,
/// where `nu` ranges over the rate inputs introduced by the rewrite.
pub fn apply_regularization(
    v: &ValidatedSpec,
    rho: f64,
    norm: RegNorm,
) -> Result<ValidatedSpec, OcpError> {
    assert!(rho >= 0.0 && rho.is_finite(), "rho must be finite and >= 0");
    let info = v.add_state.clone().ok_or(OcpError::NotAddStateForm)?;
    let spec = v.spec();
    let slots: Vec<usize> = info.pairs.iter().map(|p| p.input_slot).collect();
    let (nx, nu, np) = (spec.n_states, spec.n_inputs, spec.n_params);
    let nj = nx + nu + 1 + np;
    let nh = nx + nu + np;

    const L1_EPS2: f64 = 1e-16;
    let pen = move |v: f64| match norm {
        RegNorm::L2Sq => v * v,
        RegNorm::L1 => (v * v + L1_EPS2).sqrt(),
    };
    let dpen = move |v: f64| match norm {
        RegNorm::L2Sq => 2.0 * v,
        RegNorm::L1 => v / (v * v + L1_EPS2).sqrt(),
    };
    let d2pen = move |v: f64| match norm {
        RegNorm::L2Sq => 2.0,
        RegNorm::L1 => {
            let s = (v * v + L1_EPS2).sqrt();
            L1_EPS2 / (s * s * s)
        }
    };

    let old = spec.lagrange.clone();
    let eval = {
        let old_eval = old.as_ref().map(|l| l.eval.clone());
        let slots = slots.clone();
        Arc::new(move |args: PointArgs, out: &mut [f64]| {
            let mut base = [0.0];
            if let Some(oe) = &old_eval {
                oe(args, &mut base);
            }
            out[0] = base[0] + rho * slots.iter().map(|&j| pen(args.u[j])).sum::<f64>();
        }) as PointEval
    };
    let jac = (old.is_none() || old.as_ref().unwrap().jac.is_some()).then(|| {
        let old_jac = old.as_ref().and_then(|l| l.jac.clone());
        let slots = slots.clone();
        Arc::new(move |args: PointArgs, out: &mut [f64]| {
            if let Some(oj) = &old_jac {
                oj(args, out);
            }
            for &j in &slots {
                out[nx + j] += rho * dpen(args.u[j]);
            }
            let _ = nj;
        }) as PointJac
    });
    let hess = (old.is_none() || old.as_ref().unwrap().hess.is_some()).then(|| {
        let old_hess = old.as_ref().and_then(|l| l.hess.clone());
        let slots = slots.clone();
        Arc::new(move |args: PointArgs, w: &[f64], out: &mut [f64]| {
            if let Some(oh) = &old_hess {
                oh(args, w, out);
            }
            for &j in &slots {
                let k = nx + j;
                out[k * nh + k] += w[0] * rho * d2pen(args.u[j]);
            }
        }) as PointHess
    });

    let mut new_spec = spec.clone();
    new_spec.lagrange = Some(PointFns {
        n_out: 1,
        eval,
        jac,
        hess,
    });

    let mut validated = validate(new_spec)?;
    validated.add_state = Some(info);
    Ok(validated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry;

    #[test]
    fn validate_accepts_the_regulator() {
        let spec = registry::get("sosr").unwrap().build();
        let v = validate(spec).expect("valid");
        assert_eq!(v.n_states(), 1);
        assert_eq!(v.n_inputs(), 1);
        assert_eq!(v.rate_bounded_inputs(), vec![0]);
    }

    #[test]
    fn validate_rejects_inverted_rate_bounds() {
        let spec = OcpSpec::builder(1, 1)
            .dynamics(PointFns::new(1, |a, out| out[0] = a.u[0]))
            .lagrange(PointFns::new(1, |a, out| out[0] = a.x[0] * a.x[0]))
            .u_rate_bound(0, 1.0, -1.0)
            .fixed_time(0.0, 1.0)
            .build();
        assert!(matches!(
            validate(spec),
            Err(OcpError::InvertedBounds { .. })
        ));
    }

    #[test]
    fn validate_rejects_missing_objective() {
        let spec = OcpSpec::builder(1, 1)
            .dynamics(PointFns::new(1, |a, out| out[0] = a.u[0]))
            .fixed_time(0.0, 1.0)
            .build();
        assert!(matches!(validate(spec), Err(OcpError::MissingObjective)));
    }

    #[test]
    fn validate_is_pure() {
        let v1 = validate(registry::get("sosr").unwrap().build()).unwrap();
        let v2 = validate(registry::get("sosr").unwrap().build()).unwrap();
        assert_eq!(v1.structure, v2.structure);
    }

    #[test]
    fn add_state_bookkeeping() {
        let v = validate(registry::get("sosr").unwrap().build()).unwrap();
        let a = augment_add_state(&v).unwrap();
        assert_eq!(a.n_states(), 2);
        assert_eq!(a.n_inputs(), 1);
        let info = a.add_state.as_ref().unwrap();
        assert_eq!(info.pairs.len(), 1);
        assert_eq!(info.pairs[0].state_index, 1);
        // rate bounds became simple bounds on the rate input
        assert_eq!(a.spec().u_bounds[0], Bound::between(-1.0, 1.0));
        // second application has nothing left to promote
        assert!(matches!(
            augment_add_state(&a),
            Err(OcpError::NoInputRateBounds)
        ));
    }

    #[test]
    fn add_state_matches_hand_written_regulator() {
        // the promoted problem must reproduce the classic two-state form
        let v = validate(registry::get("sosr").unwrap().build()).unwrap();
        let a = augment_add_state(&v).unwrap();
        let x = [0.3, -0.7];
        let u = [0.5];
        let args = PointArgs {
            x: &x,
            u: &u,
            t: 1.0,
            p: &[],
        };
        let mut f = [0.0; 2];
        (a.spec().dynamics.eval)(args, &mut f);
        assert_eq!(f, [-0.7, 0.5]); // xdot1 = x2, xdot2 = nu
        let mut l = [0.0];
        (a.spec().lagrange.as_ref().unwrap().eval)(args, &mut l);
        assert!((l[0] - (0.3f64.powi(2) + 0.7f64.powi(2))).abs() < 1e-14);
        // boundary now pins x1(0) = 0 and the promoted x2(0) = 1
        let b = a.spec().boundary.as_ref().unwrap();
        assert_eq!(b.n_out, 2);
        let mut phi = [0.0; 2];
        (b.eval)(
            BoundaryArgs {
                x0: &[0.0, 1.0],
                t0: 0.0,
                xf: &[0.1, 0.2],
                tf: 5.0,
                p: &[],
            },
            &mut phi,
        );
        assert_eq!(phi, [0.0, 0.0]);
    }

    #[test]
    fn add_path_appends_rate_rows_only() {
        let v = validate(registry::get("di-staterate").unwrap().build()).unwrap();
        let n_path_before = v.spec().path.as_ref().map_or(0, |c| c.fns.n_out);
        let a = augment_add_path(&v).unwrap();
        let path = a.spec().path.as_ref().unwrap();
        assert_eq!(path.fns.n_out, n_path_before + 1);
        assert_eq!(a.n_states(), v.n_states());
        assert!(a.rate_bounded_states().is_empty());
        assert!(matches!(
            augment_add_path(&a),
            Err(OcpError::NoStateRateBounds)
        ));
    }

    #[test]
    fn add_path_row_linearity_follows_dynamics() {
        // double integrator: appended row on xdot1 = x2 is linear
        let lin = OcpSpec::builder(2, 1)
            .dynamics(
                PointFns::new(2, |a, out| {
                    out[0] = a.x[1];
                    out[1] = a.u[0];
                })
                .with_jac(|_, j| {
                    // cols [x1 x2 u t]
                    j[1] = 1.0;
                    j[4 + 2] = 1.0;
                })
                .with_hess(|_, _, _| {}),
            )
            .lagrange(PointFns::new(1, |a, out| out[0] = a.x[0] * a.x[0]))
            .x_rate_bound(0, -1.0, 1.0)
            .fixed_time(0.0, 1.0)
            .build();
        let a = augment_add_path(&validate(lin).unwrap()).unwrap();
        let st = a.structure.path.as_ref().unwrap();
        assert!(st.row_is_linear(0));
        assert!(!st.hess_nonzero());

        // nonlinear dynamics produce a nonlinear appended row
        let v = validate(registry::get("di-staterate").unwrap().build()).unwrap();
        let a = augment_add_path(&v).unwrap();
        let st = a.structure.path.as_ref().unwrap();
        assert!(!st.row_is_linear(0));
        assert!(st.hess_nonzero());
    }

    #[test]
    fn regularization_requires_add_state_form() {
        let v = validate(registry::get("sosr").unwrap().build()).unwrap();
        assert!(matches!(
            apply_regularization(&v, 0.1, RegNorm::L2Sq),
            Err(OcpError::NotAddStateForm)
        ));
        let a = augment_add_state(&v).unwrap();
        let reg = apply_regularization(&a, 0.0, RegNorm::L2Sq).unwrap();
        // rho = 0 leaves the running cost unchanged
        let args_x = [0.4, -0.2];
        let args = PointArgs {
            x: &args_x,
            u: &[0.9],
            t: 2.0,
            p: &[],
        };
        let mut l0 = [0.0];
        let mut l1 = [0.0];
        (a.spec().lagrange.as_ref().unwrap().eval)(args, &mut l0);
        (reg.spec().lagrange.as_ref().unwrap().eval)(args, &mut l1);
        assert_eq!(l0, l1);
        // rho > 0 adds the penalty
        let reg = apply_regularization(&a, 0.5, RegNorm::L2Sq).unwrap();
        (reg.spec().lagrange.as_ref().unwrap().eval)(args, &mut l1);
        assert!((l1[0] - (l0[0] + 0.5 * 0.81)).abs() < 1e-12);
    }

    #[test]
    fn fd_jacobian_matches_analytic() {
        let v = validate(registry::get("di-staterate").unwrap().build()).unwrap();
        let spec = v.spec();
        let kit = PointKit::new(&spec.dynamics, 2, 1, 0);
        let no_jac = PointFns::new(2, {
            let eval = spec.dynamics.eval.clone();
            move |a, out| eval(a, out)
        });
        let kit_fd = PointKit::new(&no_jac, 2, 1, 0);
        let x = [0.3, -1.2];
        let u = [0.7];
        let args = PointArgs {
            x: &x,
            u: &u,
            t: 0.5,
            p: &[],
        };
        let mut ja = vec![0.0; 2 * 4];
        let mut jf = vec![0.0; 2 * 4];
        kit.jac(args, &mut ja);
        kit_fd.jac(args, &mut jf);
        for (a, f) in ja.iter().zip(&jf) {
            assert!((a - f).abs() < 1e-6, "{a} vs {f}");
        }
    }
}
