//! Meshes, collocation schemes, quadrature weights and numerical
//! differentiation stencils, including Legendre-Gauss-Radau points and
//! differentiation matrices.
//!
//! Normalized time lives on `[0, 1]`; Radau intervals are mapped affinely
//! from `[-1, 1]` with the left endpoint collocated. All conversions go
//! through [`TimeMap`].

use crate::error::MeshError;

/// Discretization family for a mesh interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Scheme {
    Trapezoidal,
    HermiteSimpson,
    Lgr,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Trapezoidal => "trapezoidal",
            Scheme::HermiteSimpson => "hermite-simpson",
            Scheme::Lgr => "lgr",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Partition of normalized time `[0, 1]` into `K` intervals with a scheme
/// and, for Radau meshes, a per-interval polynomial order.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Mesh {
    scheme: Scheme,
    fractions: Vec<f64>,
    orders: Vec<usize>,
}

impl Mesh {
    /// Uniform h-scheme mesh with the given number of mesh nodes
    /// (`nodes - 1` intervals).
    pub fn uniform(scheme: Scheme, nodes: usize) -> Result<Mesh, MeshError> {
        if nodes < 2 {
            return Err(MeshError::EmptyMesh);
        }
        let k = nodes - 1;
        let orders = match scheme {
            Scheme::Lgr => vec![3; k],
            _ => Vec::new(),
        };
        Mesh::with_fractions(scheme, vec![1.0 / k as f64; k], orders)
    }

    /// Uniform Radau mesh: `nodes - 1` intervals of the given order.
    pub fn uniform_lgr(nodes: usize, order: usize) -> Result<Mesh, MeshError> {
        if nodes < 2 {
            return Err(MeshError::EmptyMesh);
        }
        let k = nodes - 1;
        Mesh::with_fractions(Scheme::Lgr, vec![1.0 / k as f64; k], vec![order; k])
    }

    pub fn with_fractions(
        scheme: Scheme,
        fractions: Vec<f64>,
        orders: Vec<usize>,
    ) -> Result<Mesh, MeshError> {
        if fractions.is_empty() {
            return Err(MeshError::EmptyMesh);
        }
        let mut sum = 0.0;
        for (i, &f) in fractions.iter().enumerate() {
            if !(f > 0.0) || !f.is_finite() {
                return Err(MeshError::BadFraction { index: i, value: f });
            }
            sum += f;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MeshError::BadFraction {
                index: fractions.len() - 1,
                value: sum,
            });
        }
        let orders = match scheme {
            Scheme::Lgr => {
                if orders.len() != fractions.len() {
                    return Err(MeshError::OrderTooSmall {
                        order: orders.len(),
                        min: fractions.len(),
                    });
                }
                for &n in &orders {
                    if n < 2 {
                        return Err(MeshError::OrderTooSmall { order: n, min: 2 });
                    }
                }
                orders
            }
            _ => Vec::new(),
        };
        Ok(Mesh {
            scheme,
            fractions,
            orders,
        })
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn intervals(&self) -> usize {
        self.fractions.len()
    }

    /// Mesh nodes (interval boundaries), `K + 1`.
    pub fn nodes(&self) -> usize {
        self.fractions.len() + 1
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    pub fn order(&self, interval: usize) -> usize {
        match self.scheme {
            Scheme::Lgr => self.orders[interval],
            Scheme::Trapezoidal => 2,
            Scheme::HermiteSimpson => 3,
        }
    }

    pub fn orders(&self) -> &[usize] {
        &self.orders
    }

    /// Normalized boundaries `0 = tau_0 < ... < tau_K = 1`.
    pub fn boundaries(&self) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.fractions.len() + 1);
        b.push(0.0);
        let mut acc = 0.0;
        for &f in &self.fractions {
            acc += f;
            b.push(acc);
        }
        *b.last_mut().unwrap() = 1.0;
        b
    }

    /// Total collocation points.
    pub fn collocation_points(&self) -> usize {
        match self.scheme {
            Scheme::Trapezoidal => self.nodes(),
            Scheme::HermiteSimpson => 2 * self.intervals() + 1,
            Scheme::Lgr => self.orders.iter().sum(),
        }
    }

    /// Splits interval `k` in half, preserving its order.
    pub fn bisect(&mut self, k: usize) {
        let f = self.fractions[k] / 2.0;
        self.fractions[k] = f;
        self.fractions.insert(k, f);
        if self.scheme == Scheme::Lgr {
            let n = self.orders[k];
            self.orders.insert(k, n);
        }
    }

    /// Raises the order of a Radau interval by one.
    pub fn raise_order(&mut self, k: usize) {
        debug_assert_eq!(self.scheme, Scheme::Lgr);
        self.orders[k] += 1;
    }
}

/// Affine map between normalized time `tau in [0, 1]` and physical time.
#[derive(Debug, Clone, Copy)]
pub struct TimeMap {
    pub t0: f64,
    pub tf: f64,
}

impl TimeMap {
    pub fn new(t0: f64, tf: f64) -> Self {
        TimeMap { t0, tf }
    }

    pub fn dt(&self) -> f64 {
        self.tf - self.t0
    }

    pub fn to_physical(&self, tau: f64) -> f64 {
        self.t0 + tau * self.dt()
    }

    pub fn to_normalized(&self, t: f64) -> f64 {
        (t - self.t0) / self.dt()
    }

    /// Maps a Radau-local coordinate in `[-1, 1]` within `[tau_lo, tau_hi]`
    /// to global normalized time.
    pub fn radau_to_tau(tau_lo: f64, tau_hi: f64, xi: f64) -> f64 {
        tau_lo + (xi + 1.0) * 0.5 * (tau_hi - tau_lo)
    }
}

fn check_steps(dtau: f64, dt: f64) -> Result<(), MeshError> {
    if dtau > 0.0 && dt > 0.0 {
        Ok(())
    } else {
        Err(MeshError::NonpositiveStep { dtau, dt })
    }
}

/// Forward-difference rate over one trapezoidal interval, in physical time.
pub fn trapezoidal_diff(z0: f64, z1: f64, dtau: f64, dt: f64) -> Result<f64, MeshError> {
    check_steps(dtau, dt)?;
    Ok((z1 - z0) / (dt * dtau))
}

/// Three-point rates at the left, mid- and right points of a
/// Hermite-Simpson interval, in physical time.
pub fn hs_diff(
    z0: f64,
    z_mid: f64,
    z1: f64,
    dtau: f64,
    dt: f64,
) -> Result<(f64, f64, f64), MeshError> {
    check_steps(dtau, dt)?;
    let h = dt * dtau;
    Ok((
        (-3.0 * z0 + 4.0 * z_mid - z1) / h,
        (z1 - z0) / h,
        (z0 - 4.0 * z_mid + 3.0 * z1) / h,
    ))
}

/// Stencil coefficients shared by the defect builders, the rate-row
/// builders and the standalone difference helpers above.
pub(crate) mod stencil {
    /// Trapezoidal forward difference: coefficients on (z_i, z_{i+1}).
    pub fn trap(dtau: f64, dt: f64) -> [f64; 2] {
        let h = dt * dtau;
        [-1.0 / h, 1.0 / h]
    }

    /// Hermite-Simpson left/mid/right rates: coefficients on
    /// (z_i, z_mid, z_{i+1}).
    pub fn hs_left(dtau: f64, dt: f64) -> [f64; 3] {
        let h = dt * dtau;
        [-3.0 / h, 4.0 / h, -1.0 / h]
    }

    pub fn hs_mid(dtau: f64, dt: f64) -> [f64; 3] {
        let h = dt * dtau;
        [-1.0 / h, 0.0, 1.0 / h]
    }

    pub fn hs_right(dtau: f64, dt: f64) -> [f64; 3] {
        let h = dt * dtau;
        [1.0 / h, -4.0 / h, 3.0 / h]
    }
}

/// Legendre polynomial value and first derivative at `x`.
pub(crate) fn legendre(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let mut p_prev = 1.0;
    let mut p = x;
    for k in 1..n {
        let kf = k as f64;
        let p_next = ((2.0 * kf + 1.0) * x * p - kf * p_prev) / (kf + 1.0);
        p_prev = p;
        p = p_next;
    }
    // derivative from the standard relation; endpoints via the closed form
    let dp = if (x * x - 1.0).abs() < 1e-14 {
        let nf = n as f64;
        0.5 * nf * (nf + 1.0) * if x > 0.0 { 1.0 } else { (-1.0f64).powi(n as i32 + 1) }
    } else {
        (n as f64) * (x * p - p_prev) / (x * x - 1.0)
    };
    (p, dp)
}

/// A quadrature rule: nodes and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LgrRule {
    /// Flipped-Radau nodes on `[-1, 1)`; the first node is exactly `-1`.
    pub nodes: Vec<f64>,
    /// Positive weights summing to 2.
    pub weights: Vec<f64>,
}

/// Legendre-Gauss-Radau points and weights on `[-1, 1)` with the left
/// endpoint included. Interior nodes come from the Jacobi-matrix eigenvalue
/// problem for the (0, 1) weight, polished by Newton iteration on
/// `P_{n-1} + P_n` to ~1e-14.
pub fn lgr_points(n: usize) -> Result<LgrRule, MeshError> {
    if n < 2 {
        return Err(MeshError::OrderTooSmall { order: n, min: 2 });
    }
    let m = n - 1; // interior nodes
    let mut interior = jacobi01_nodes(m);
    // Newton polish on q = P_{n-1} + P_n
    for x in interior.iter_mut() {
        for _ in 0..50 {
            let (p1, dp1) = legendre(n - 1, *x);
            let (p2, dp2) = legendre(n, *x);
            let q = p1 + p2;
            let dq = dp1 + dp2;
            let step = q / dq;
            *x -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
    }
    interior.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());

    let nf = n as f64;
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    nodes.push(-1.0);
    weights.push(2.0 / (nf * nf));
    for &x in &interior {
        let (p, _) = legendre(n - 1, x);
        nodes.push(x);
        weights.push((1.0 - x) / (nf * nf * p * p));
    }
    Ok(LgrRule { nodes, weights })
}

/// Eigenvalues of the symmetric Jacobi matrix for the weight
/// `(1 - x)^0 (1 + x)^1`: the interior flipped-Radau nodes.
fn jacobi01_nodes(m: usize) -> Vec<f64> {
    if m == 0 {
        return Vec::new();
    }
    let (alpha, beta) = (0.0f64, 1.0f64);
    let mut diag = vec![0.0; m];
    let mut off = vec![0.0; m.saturating_sub(1)];
    for (k, d) in diag.iter_mut().enumerate() {
        let kf = k as f64;
        *d = if k == 0 {
            (beta - alpha) / (alpha + beta + 2.0)
        } else {
            (beta * beta - alpha * alpha)
                / ((2.0 * kf + alpha + beta) * (2.0 * kf + alpha + beta + 2.0))
        };
    }
    for (k, o) in off.iter_mut().enumerate() {
        let kf = (k + 1) as f64;
        let num = 4.0 * kf * (kf + alpha) * (kf + beta) * (kf + alpha + beta);
        let den = (2.0 * kf + alpha + beta).powi(2)
            * (2.0 * kf + alpha + beta + 1.0)
            * (2.0 * kf + alpha + beta - 1.0);
        *o = (num / den).sqrt();
    }
    let mut a = nalgebra::DMatrix::<f64>::zeros(m, m);
    for k in 0..m {
        a[(k, k)] = diag[k];
        if k + 1 < m {
            a[(k, k + 1)] = off[k];
            a[(k + 1, k)] = off[k];
        }
    }
    let eig = a.symmetric_eigen();
    let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    nodes.sort_unstable_by(|x, y| x.partial_cmp(y).unwrap());
    nodes
}

/// Barycentric Lagrange interpolation helpers.
pub(crate) mod bary {
    /// Barycentric weights for distinct nodes.
    pub fn weights(nodes: &[f64]) -> Vec<f64> {
        let n = nodes.len();
        let mut w = vec![1.0; n];
        for j in 0..n {
            for k in 0..n {
                if k != j {
                    w[j] /= nodes[j] - nodes[k];
                }
            }
        }
        w
    }

    /// Evaluates the interpolant of `values` at `x`.
    pub fn eval(nodes: &[f64], w: &[f64], values: &[f64], x: f64) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..nodes.len() {
            let dx = x - nodes[j];
            if dx.abs() < 1e-14 {
                return values[j];
            }
            let c = w[j] / dx;
            num += c * values[j];
            den += c;
        }
        num / den
    }

    /// Row of interpolation weights: `eval(values, x) = sum_j row[j] values[j]`.
    pub fn eval_weights(nodes: &[f64], w: &[f64], x: f64) -> Vec<f64> {
        let n = nodes.len();
        let mut row = vec![0.0; n];
        for j in 0..n {
            if (x - nodes[j]).abs() < 1e-14 {
                row[j] = 1.0;
                return row;
            }
        }
        let mut den = 0.0;
        for j in 0..n {
            let c = w[j] / (x - nodes[j]);
            row[j] = c;
            den += c;
        }
        for r in row.iter_mut() {
            *r /= den;
        }
        row
    }

    /// Dense first-derivative matrix of the Lagrange basis at the nodes.
    pub fn diff_matrix(nodes: &[f64], w: &[f64]) -> Vec<Vec<f64>> {
        let n = nodes.len();
        let mut d = vec![vec![0.0; n]; n];
        for i in 0..n {
            let mut diag = 0.0;
            for j in 0..n {
                if i != j {
                    let v = (w[j] / w[i]) / (nodes[i] - nodes[j]);
                    d[i][j] = v;
                    diag -= v;
                }
            }
            d[i][i] = diag;
        }
        d
    }
}

/// Sparse first-derivative operator on a set of grid values. Rows may carry
/// arbitrary stencils; every row of a well-formed operator sums to zero.
#[derive(Debug, Clone)]
pub struct DiffOperator {
    pub n_in: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl DiffOperator {
    pub fn new(n_in: usize) -> Self {
        DiffOperator {
            n_in,
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, entries: Vec<(usize, f64)>) {
        debug_assert!(entries.iter().all(|&(c, _)| c < self.n_in));
        self.rows.push(entries);
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        debug_assert_eq!(z.len(), self.n_in);
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(c, v)| v * z[c]).sum())
            .collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(_, v)| v).sum())
            .collect()
    }

    /// Returns a copy with every coefficient multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> DiffOperator {
        DiffOperator {
            n_in: self.n_in,
            rows: self
                .rows
                .iter()
                .map(|row| row.iter().map(|&(c, v)| (c, v * factor)).collect())
                .collect(),
        }
    }
}

/// Radau differentiation matrix over the `n` collocation nodes plus the
/// non-collocated endpoint `+1`, on local coordinates `[-1, 1]`. The
/// operator has `n + 1` rows; physical-time rates are `(2 / dt_k) A z`.
pub fn lgr_diff_matrix(n: usize) -> Result<DiffOperator, MeshError> {
    let rule = lgr_points(n)?;
    let mut nodes = rule.nodes.clone();
    nodes.push(1.0);
    let w = bary::weights(&nodes);
    let dense = bary::diff_matrix(&nodes, &w);
    let mut op = DiffOperator::new(n + 1);
    for row in dense {
        op.push_row(row.into_iter().enumerate().collect());
    }
    Ok(op)
}

/// Normalized quadrature weights, one per collocation point, summing to 1.
/// Integrals in physical time scale by `tf - t0`.
pub fn quadrature_weights(mesh: &Mesh) -> Vec<f64> {
    let mut w = Vec::with_capacity(mesh.collocation_points());
    match mesh.scheme() {
        Scheme::Trapezoidal => {
            w.resize(mesh.nodes(), 0.0);
            for (k, &f) in mesh.fractions().iter().enumerate() {
                w[k] += 0.5 * f;
                w[k + 1] += 0.5 * f;
            }
        }
        Scheme::HermiteSimpson => {
            w.resize(2 * mesh.intervals() + 1, 0.0);
            for (k, &f) in mesh.fractions().iter().enumerate() {
                w[2 * k] += f / 6.0;
                w[2 * k + 1] += 4.0 * f / 6.0;
                w[2 * k + 2] += f / 6.0;
            }
        }
        Scheme::Lgr => {
            for (k, &f) in mesh.fractions().iter().enumerate() {
                let rule = lgr_points(mesh.order(k)).expect("validated order");
                for &wi in &rule.weights {
                    // local weights sum to 2 over [-1, 1]
                    w.push(wi * f / 2.0);
                }
            }
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn trapezoidal_diff_direct_values() {
        assert_abs_diff_eq!(trapezoidal_diff(0.0, 1.0, 0.1, 5.0).unwrap(), 2.0);
        assert_abs_diff_eq!(trapezoidal_diff(3.7, 3.7, 0.3, 2.0).unwrap(), 0.0);
        // z(t) = 3 t sampled on any step differentiates exactly
        let (dtau, dt) = (0.25, 4.0);
        let (t0, t1) = (1.0, 1.0 + dtau * dt);
        assert_abs_diff_eq!(
            trapezoidal_diff(3.0 * t0, 3.0 * t1, dtau, dt).unwrap(),
            3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn trapezoidal_diff_rejects_bad_steps() {
        assert!(matches!(
            trapezoidal_diff(0.0, 1.0, 0.0, 1.0),
            Err(MeshError::NonpositiveStep { .. })
        ));
        assert!(matches!(
            trapezoidal_diff(0.0, 1.0, 0.5, -1.0),
            Err(MeshError::NonpositiveStep { .. })
        ));
    }

    #[test]
    fn hs_diff_exact_on_quadratics() {
        // z(tau) = tau^2 on [0, 1]
        let (l, m, r) = hs_diff(0.0, 0.25, 1.0, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(l, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(m, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(r, 2.0, epsilon = 1e-14);

        let (l, m, r) = hs_diff(5.0, 5.0, 5.0, 0.2, 3.0).unwrap();
        assert_abs_diff_eq!(l, 0.0);
        assert_abs_diff_eq!(m, 0.0);
        assert_abs_diff_eq!(r, 0.0);
    }

    #[test]
    fn hs_diff_midpoint_error_is_second_order() {
        // z(t) = t^3: midpoint rate error should shrink ~4x when the step halves
        let err = |h: f64| {
            let z = |t: f64| t * t * t;
            let (_, m, _) = hs_diff(z(0.0), z(h / 2.0), z(h), h, 1.0).unwrap();
            (m - 3.0 * (h / 2.0).powi(2)).abs()
        };
        let ratio = err(0.2) / err(0.1);
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn lgr_two_point_rule_is_analytic() {
        let rule = lgr_points(2).unwrap();
        assert_abs_diff_eq!(rule.nodes[0], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rule.nodes[1], 1.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(rule.weights[0], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(rule.weights[1], 1.5, epsilon = 1e-14);
    }

    #[test]
    fn lgr_rules_integrate_monomials_exactly() {
        for n in 2..=16 {
            let rule = lgr_points(n).unwrap();
            assert_eq!(rule.nodes[0], -1.0);
            assert!(rule.nodes.windows(2).all(|w| w[0] < w[1]));
            assert!(rule.weights.iter().all(|&w| w > 0.0));
            let sum: f64 = rule.weights.iter().sum();
            assert_abs_diff_eq!(sum, 2.0, epsilon = 1e-12);
            // exact for polynomials of degree <= 2n - 2
            for d in 0..=(2 * n - 2) {
                let quad: f64 = rule
                    .nodes
                    .iter()
                    .zip(&rule.weights)
                    .map(|(&x, &w)| w * x.powi(d as i32))
                    .sum();
                let exact = if d % 2 == 0 {
                    2.0 / (d as f64 + 1.0)
                } else {
                    0.0
                };
                assert_abs_diff_eq!(quad, exact, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn lgr_points_rejects_small_orders() {
        assert!(matches!(
            lgr_points(1),
            Err(MeshError::OrderTooSmall { .. })
        ));
    }

    #[test]
    fn lgr_diff_matrix_differentiates_polynomials() {
        for n in [2usize, 4, 8, 16] {
            let op = lgr_diff_matrix(n).unwrap();
            let rule = lgr_points(n).unwrap();
            let mut nodes = rule.nodes.clone();
            nodes.push(1.0);
            for sum in op.row_sums() {
                assert_abs_diff_eq!(sum, 0.0, epsilon = 1e-12);
            }
            // exact through degree n at every grid point
            for d in 0..=n {
                let z: Vec<f64> = nodes.iter().map(|&x| x.powi(d as i32)).collect();
                let dz = op.apply(&z);
                for (i, &x) in nodes.iter().enumerate() {
                    let exact = if d == 0 {
                        0.0
                    } else {
                        d as f64 * x.powi(d as i32 - 1)
                    };
                    assert_abs_diff_eq!(dz[i], exact, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn lgr_diff_matrix_scales_to_physical_time() {
        // z(tau) = tau has constant physical rate 2 / dt
        let dt = 5.0;
        let op = lgr_diff_matrix(3).unwrap().scaled(2.0 / dt);
        let rule = lgr_points(3).unwrap();
        let mut nodes = rule.nodes.clone();
        nodes.push(1.0);
        let dz = op.apply(&nodes);
        for v in dz {
            assert_abs_diff_eq!(v, 2.0 / dt, epsilon = 1e-12);
        }
    }

    #[test]
    fn quadrature_weights_match_hand_values() {
        let mesh = Mesh::uniform(Scheme::Trapezoidal, 11).unwrap();
        let w = quadrature_weights(&mesh);
        assert_abs_diff_eq!(w[0], 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(w[10], 0.05, epsilon = 1e-15);
        for &wi in &w[1..10] {
            assert_abs_diff_eq!(wi, 0.1, epsilon = 1e-15);
        }

        let hs = Mesh::uniform(Scheme::HermiteSimpson, 2).unwrap();
        let w = quadrature_weights(&hs);
        assert_abs_diff_eq!(w[0], 1.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 4.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[2], 1.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn quadrature_weights_form_a_partition_of_unity() {
        let meshes = [
            Mesh::uniform(Scheme::Trapezoidal, 7).unwrap(),
            Mesh::uniform(Scheme::HermiteSimpson, 5).unwrap(),
            Mesh::with_fractions(
                Scheme::Lgr,
                vec![0.2, 0.5, 0.3],
                vec![2, 5, 3],
            )
            .unwrap(),
            Mesh::with_fractions(Scheme::Trapezoidal, vec![0.1, 0.6, 0.3], vec![]).unwrap(),
        ];
        for mesh in &meshes {
            let w = quadrature_weights(mesh);
            assert_eq!(w.len(), mesh.collocation_points());
            assert!(w.iter().all(|&wi| wi > 0.0));
            let sum: f64 = w.iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn mesh_validation_errors() {
        assert!(matches!(
            Mesh::with_fractions(Scheme::Trapezoidal, vec![], vec![]),
            Err(MeshError::EmptyMesh)
        ));
        assert!(matches!(
            Mesh::with_fractions(Scheme::Trapezoidal, vec![0.5, -0.5, 1.0], vec![]),
            Err(MeshError::BadFraction { .. })
        ));
        assert!(matches!(
            Mesh::with_fractions(Scheme::Lgr, vec![0.5, 0.5], vec![3, 1]),
            Err(MeshError::OrderTooSmall { .. })
        ));
    }

    #[test]
    fn bisect_preserves_total_length() {
        let mut mesh = Mesh::uniform(Scheme::HermiteSimpson, 4).unwrap();
        mesh.bisect(1);
        assert_eq!(mesh.intervals(), 4);
        let sum: f64 = mesh.fractions().iter().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
    }
}
