//! On-mesh rate constraints: linear finite-difference rows on the decision
//! grid, with constant coefficients (and a reusable precomputed Jacobian)
//! whenever the time horizon is fixed.

use std::sync::Arc;

use crate::collocation::{bary, lgr_diff_matrix, lgr_points, stencil, Mesh, Scheme};
use crate::error::RateError;
use crate::sparse::{PatternBuilder, SparseMatrix};
use crate::transcription::{Layout, TimeInfo};

/// Which variable a rate bound targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum VarKind {
    State,
    Input,
}

/// One rate-bounded variable.
#[derive(Debug, Clone, Copy)]
pub struct RateTarget {
    pub kind: VarKind,
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
}

/// Provenance of one rate row.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RowTag {
    pub interval: usize,
    /// Grid point the rate is attributed to.
    pub point: usize,
    /// Index into the target list.
    pub target: usize,
}

/// Linear rate-constraint rows over the decision vector.
///
/// For fixed-time problems each row is the physical-time rate of one target
/// at one stencil location, bounded by the declared rate bounds, and every
/// coefficient is determined by the mesh alone. For free-time problems the
/// bounds are multiplied through by `tf - t0`, which keeps every row linear
/// (grid coefficients plus a constant coefficient on the free time
/// variables) but disables the reusable-Jacobian handle.
#[derive(Debug, Clone)]
pub struct RateBlock {
    rows: Vec<Vec<(usize, f64)>>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    tags: Vec<RowTag>,
    n_vars: usize,
    fixed_time: bool,
    precomputed: Option<Arc<SparseMatrix>>,
}

impl RateBlock {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn bounds(&self) -> (&[f64], &[f64]) {
        (&self.lower, &self.upper)
    }

    pub fn tags(&self) -> &[RowTag] {
        &self.tags
    }

    pub fn fixed_time(&self) -> bool {
        self.fixed_time
    }

    pub fn apply(&self, z: &[f64], out: &mut [f64]) {
        debug_assert_eq!(z.len(), self.n_vars);
        debug_assert_eq!(out.len(), self.rows.len());
        for (o, row) in out.iter_mut().zip(&self.rows) {
            *o = row.iter().map(|&(c, v)| v * z[c]).sum();
        }
    }

    /// The constant Jacobian handle, shared by every retrieval. Only
    /// available for fixed-time blocks.
    pub fn precomputed_jacobian(&self) -> Result<Arc<SparseMatrix>, RateError> {
        self.precomputed.clone().ok_or(RateError::FreeTimeBlock)
    }
}

/// Extrapolates interval-local Radau control samples (values at the `n`
/// collocation nodes) to the non-collocated endpoint `+1`. The result is a
/// dependent quantity, not a new decision value.
pub fn lgr_endpoint_control(values: &[f64]) -> f64 {
    let w = lgr_endpoint_weights(values.len());
    values.iter().zip(&w).map(|(v, wi)| v * wi).sum()
}

/// Lagrange extrapolation weights from the `n` Radau nodes to `+1`.
pub fn lgr_endpoint_weights(n: usize) -> Vec<f64> {
    let rule = lgr_points(n).expect("order checked by caller");
    let bw = bary::weights(&rule.nodes);
    bary::eval_weights(&rule.nodes, &bw, 1.0)
}

/// Builds the on-mesh rows for all targets.
///
/// Row placement per scheme and target kind:
/// - trapezoidal: the forward stencil at every node, with the final node
///   reusing the last interval's stencil backwards (one row per grid point);
/// - Hermite-Simpson states: left, mid and right stencils per interval;
/// - Hermite-Simpson inputs: midpoint rows dropped (the rate of a quadratic
///   control is linear in time, so its extremes sit at the interval ends);
/// - Radau: the differentiation-matrix rows at the collocation points;
///   `include_endpoint_rows` additionally enforces the row at each
///   interval's non-collocated endpoint. Control values at that endpoint
///   are interval-local Lagrange extrapolations.
pub fn build_onmesh(
    mesh: &Mesh,
    layout: &Layout,
    targets: &[RateTarget],
    include_endpoint_rows: bool,
) -> Result<RateBlock, RateError> {
    if targets.is_empty() {
        return Err(RateError::EmptyTargets);
    }
    let time = layout.time_info();
    let fixed_dt = match time {
        TimeInfo::Fixed(dt) => Some(dt),
        TimeInfo::Free { .. } => None,
    };

    let mut block = RateBlock {
        rows: Vec::new(),
        lower: Vec::new(),
        upper: Vec::new(),
        tags: Vec::new(),
        n_vars: layout.n_vars,
        fixed_time: fixed_dt.is_some(),
        precomputed: None,
    };

    for (t_idx, target) in targets.iter().enumerate() {
        emit_target_rows(
            mesh,
            layout,
            target,
            t_idx,
            include_endpoint_rows,
            fixed_dt,
            &time,
            &mut block,
        );
    }

    if block.fixed_time {
        let mut builder = PatternBuilder::new();
        for (r, row) in block.rows.iter().enumerate() {
            for &(c, _) in row {
                builder.push(r, c);
            }
        }
        let (pattern, slots) = builder.build(block.rows.len(), layout.n_vars);
        let mut mat = SparseMatrix::zeros(Arc::new(pattern));
        let mut k = 0;
        for row in &block.rows {
            for &(_, v) in row {
                mat.values[slots[k]] += v;
                k += 1;
            }
        }
        block.precomputed = Some(Arc::new(mat));
    }

    Ok(block)
}

#[allow(clippy::too_many_arguments)]
fn emit_target_rows(
    mesh: &Mesh,
    layout: &Layout,
    target: &RateTarget,
    t_idx: usize,
    include_endpoint_rows: bool,
    fixed_dt: Option<f64>,
    time: &TimeInfo,
    block: &mut RateBlock,
) {
    // Column of the target variable at a grid point (None where a control
    // does not exist).
    let col_at = |pt: usize| -> Option<usize> {
        match target.kind {
            VarKind::State => Some(layout.x_index(pt, target.index)),
            VarKind::Input => layout.u_index(pt, target.index),
        }
    };
    let fracs = mesh.fractions();

    let mut push = |stencil_tau: Vec<(usize, f64)>, interval: usize, point: usize| {
        // stencil_tau returns the normalized-time rate d z / d tau; the
        // physical rate divides by dt.
        match fixed_dt {
            Some(dt) => {
                let row = stencil_tau
                    .iter()
                    .map(|&(c, v)| (c, v / dt))
                    .collect::<Vec<_>>();
                block.rows.push(row);
                block.lower.push(target.lower);
                block.upper.push(target.upper);
                block.tags.push(RowTag {
                    interval,
                    point,
                    target: t_idx,
                });
            }
            None => {
                // bound * dt moved onto the row: stencil - bound * (tf - t0)
                let TimeInfo::Free {
                    t0_index,
                    t0_fixed,
                    tf_index,
                    tf_fixed,
                } = *time
                else {
                    unreachable!()
                };
                let mut emit_side = |bound: f64, upper_side: bool| {
                    if !bound.is_finite() {
                        return;
                    }
                    // upper side:  stencil - ub * dt <= 0
                    // lower side: -stencil + lb * dt <= 0
                    let sign = if upper_side { 1.0 } else { -1.0 };
                    let mut row: Vec<(usize, f64)> =
                        stencil_tau.iter().map(|&(c, v)| (c, sign * v)).collect();
                    let mut ub = 0.0;
                    match tf_index {
                        Some(i) => row.push((i, -sign * bound)),
                        None => ub += sign * bound * tf_fixed,
                    }
                    match t0_index {
                        Some(i) => row.push((i, sign * bound)),
                        None => ub -= sign * bound * t0_fixed,
                    }
                    block.rows.push(row);
                    block.lower.push(f64::NEG_INFINITY);
                    block.upper.push(ub);
                    block.tags.push(RowTag {
                        interval,
                        point,
                        target: t_idx,
                    });
                };
                emit_side(target.upper, true);
                emit_side(target.lower, false);
            }
        }
    };

    match mesh.scheme() {
        Scheme::Trapezoidal => {
            let k_last = mesh.intervals() - 1;
            for k in 0..mesh.intervals() {
                let c = stencil::trap(fracs[k], 1.0);
                let cols = [col_at(k).unwrap(), col_at(k + 1).unwrap()];
                push(vec![(cols[0], c[0]), (cols[1], c[1])], k, k);
            }
            // backward difference at the final node, reusing the last stencil
            let c = stencil::trap(fracs[k_last], 1.0);
            let cols = [col_at(k_last).unwrap(), col_at(k_last + 1).unwrap()];
            push(
                vec![(cols[0], c[0]), (cols[1], c[1])],
                k_last,
                k_last + 1,
            );
        }
        Scheme::HermiteSimpson => {
            for k in 0..mesh.intervals() {
                let pts = [2 * k, 2 * k + 1, 2 * k + 2];
                let cols = [
                    col_at(pts[0]).unwrap(),
                    col_at(pts[1]).unwrap(),
                    col_at(pts[2]).unwrap(),
                ];
                let left = stencil::hs_left(fracs[k], 1.0);
                push(
                    vec![(cols[0], left[0]), (cols[1], left[1]), (cols[2], left[2])],
                    k,
                    pts[0],
                );
                if target.kind == VarKind::State {
                    let mid = stencil::hs_mid(fracs[k], 1.0);
                    push(vec![(cols[0], mid[0]), (cols[2], mid[2])], k, pts[1]);
                }
                let right = stencil::hs_right(fracs[k], 1.0);
                push(
                    vec![
                        (cols[0], right[0]),
                        (cols[1], right[1]),
                        (cols[2], right[2]),
                    ],
                    k,
                    pts[2],
                );
            }
        }
        Scheme::Lgr => {
            for k in 0..mesh.intervals() {
                let n = mesh.order(k);
                let diff = lgr_diff_matrix(n).expect("validated order");
                let pts = layout.grid().interval_points(k);
                debug_assert_eq!(pts.len(), n + 1);
                // local factor: d tau_local / d tau_global = 2 / frac
                let scale = 2.0 / fracs[k];
                let endpoint_col = col_at(pts[n]);
                let extrap = if target.kind == VarKind::Input && endpoint_col.is_none() {
                    Some(lgr_endpoint_weights(n))
                } else {
                    None
                };
                let n_rows = if include_endpoint_rows { n + 1 } else { n };
                for i in 0..n_rows {
                    let mut coeffs = vec![0.0; n + 1];
                    for &(j, v) in diff.row(i) {
                        coeffs[j] = v * scale;
                    }
                    let mut row: Vec<(usize, f64)> = Vec::with_capacity(n + 1);
                    for (j, &cv) in coeffs.iter().enumerate().take(n) {
                        if cv != 0.0 {
                            row.push((col_at(pts[j]).unwrap(), cv));
                        }
                    }
                    // the +1 grid value: a state decision value, or the
                    // extrapolated control
                    let ce = coeffs[n];
                    if ce != 0.0 {
                        match (endpoint_col, &extrap) {
                            (Some(col), _) => row.push((col, ce)),
                            (None, Some(wts)) => {
                                for (j, &wj) in wts.iter().enumerate() {
                                    if wj != 0.0 {
                                        row.push((col_at(pts[j]).unwrap(), ce * wj));
                                    }
                                }
                            }
                            (None, None) => unreachable!(),
                        }
                    }
                    // merge duplicate columns from the extrapolation
                    row.sort_by_key(|&(c, _)| c);
                    row.dedup_by(|b, a| {
                        if a.0 == b.0 {
                            a.1 += b.1;
                            true
                        } else {
                            false
                        }
                    });
                    push(row, k, pts[i.min(n)]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn endpoint_control_extrapolation() {
        // constants extrapolate exactly
        assert_abs_diff_eq!(lgr_endpoint_control(&[2.5, 2.5, 2.5]), 2.5, epsilon = 1e-12);
        // u(tau) = tau with n = 3 is degree <= n - 1: exact value 1 at +1
        let rule = lgr_points(3).unwrap();
        let vals: Vec<f64> = rule.nodes.clone();
        assert_abs_diff_eq!(lgr_endpoint_control(&vals), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn endpoint_extrapolation_remainder_for_cubic() {
        // u(tau) = tau^3 interpolated at the 3 Radau nodes: the remainder at
        // +1 is prod(1 - tau_i) = 4/5, so the extrapolation returns 1 - 4/5.
        let rule = lgr_points(3).unwrap();
        let vals: Vec<f64> = rule.nodes.iter().map(|&x| x * x * x).collect();
        let got = lgr_endpoint_control(&vals);
        let remainder: f64 = rule.nodes.iter().map(|&x| 1.0 - x).product();
        assert_abs_diff_eq!(remainder, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(1.0 - got, remainder, epsilon = 1e-12);
    }
}
