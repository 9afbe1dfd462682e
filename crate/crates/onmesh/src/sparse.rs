//! Sparse matrix building blocks: CSR patterns with slot-mapped assembly,
//! reverse Cuthill-McKee ordering, and a simplicial LDL^T factorization for
//! symmetric quasi-definite KKT systems.

use std::sync::Arc;

/// Compressed sparse row pattern with sorted, deduplicated column indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityPattern {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
}

impl SparsityPattern {
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    pub fn empty(n_rows: usize, n_cols: usize) -> Self {
        SparsityPattern {
            n_rows,
            n_cols,
            row_ptr: vec![0; n_rows + 1],
            col_idx: Vec::new(),
        }
    }
}

/// Collects (row, col) entries in insertion order, then compiles a dedup'd
/// CSR pattern plus a slot map so values can be scattered without re-sorting.
#[derive(Debug, Default)]
pub struct PatternBuilder {
    entries: Vec<(usize, usize)>,
}

impl PatternBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records an entry and returns its index in insertion order.
    pub fn push(&mut self, row: usize, col: usize) -> usize {
        self.entries.push((row, col));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Compiles to a pattern and the slot of every pushed entry. Duplicate
    /// (row, col) pairs share one slot; assembly must accumulate.
    pub fn build(&self, n_rows: usize, n_cols: usize) -> (SparsityPattern, Vec<usize>) {
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        order.sort_unstable_by_key(|&k| self.entries[k]);

        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut col_idx = Vec::with_capacity(self.entries.len());
        let mut slots = vec![0usize; self.entries.len()];
        let mut last: Option<(usize, usize)> = None;
        for &k in &order {
            let (r, c) = self.entries[k];
            debug_assert!(r < n_rows && c < n_cols, "entry ({r},{c}) out of range");
            if last != Some((r, c)) {
                col_idx.push(c);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
            slots[k] = col_idx.len() - 1;
        }
        for r in 0..n_rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        (
            SparsityPattern {
                n_rows,
                n_cols,
                row_ptr,
                col_idx,
            },
            slots,
        )
    }
}

/// CSR matrix with a shared pattern and per-instance values.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    pub pattern: Arc<SparsityPattern>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(pattern: Arc<SparsityPattern>) -> Self {
        let values = vec![0.0; pattern.nnz()];
        SparseMatrix { pattern, values }
    }

    pub fn n_rows(&self) -> usize {
        self.pattern.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.pattern.n_cols
    }

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.pattern.row_ptr[r];
        let hi = self.pattern.row_ptr[r + 1];
        self.pattern.col_idx[lo..hi]
            .iter()
            .zip(&self.values[lo..hi])
            .map(|(&c, &v)| (c, v))
    }

    /// y = A x
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_cols());
        debug_assert_eq!(y.len(), self.n_rows());
        for r in 0..self.n_rows() {
            let mut acc = 0.0;
            for (c, v) in self.row_entries(r) {
                acc += v * x[c];
            }
            y[r] = acc;
        }
    }

    /// y += A^T x
    pub fn mul_transpose_add(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_rows());
        debug_assert_eq!(y.len(), self.n_cols());
        for r in 0..self.n_rows() {
            let xr = x[r];
            if xr != 0.0 {
                for (c, v) in self.row_entries(r) {
                    y[c] += v * xr;
                }
            }
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n_cols()]; self.n_rows()];
        for r in 0..self.n_rows() {
            for (c, v) in self.row_entries(r) {
                out[r][c] += v;
            }
        }
        out
    }
}

/// Reverse Cuthill-McKee ordering of a symmetric pattern given as triplet
/// end-points. Returns `perm` with `perm[new] = old`.
pub fn rcm_order(n: usize, edges: impl Iterator<Item = (usize, usize)>) -> Vec<usize> {
    let mut adj = vec![Vec::new(); n];
    for (i, j) in edges {
        if i != j {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for a in adj.iter_mut() {
        a.sort_unstable();
        a.dedup();
    }

    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut frontier = std::collections::VecDeque::new();
    loop {
        // lowest-degree unvisited vertex seeds the next component
        let start = (0..n)
            .filter(|&v| !visited[v])
            .min_by_key(|&v| adj[v].len());
        let Some(start) = start else { break };
        visited[start] = true;
        frontier.push_back(start);
        while let Some(v) = frontier.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_unstable_by_key(|&w| adj[w].len());
            for w in next {
                visited[w] = true;
                frontier.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Symbolic data for an LDL^T factorization of a permuted symmetric matrix.
///
/// Entries are supplied once as (row, col) pairs over the full symmetric
/// matrix (either triangle, duplicates allowed); numeric refactorizations
/// reuse the analysis with a value slice aligned to the original entry order.
pub struct LdlSymbolic {
    n: usize,
    /// perm[new] = old
    perm: Vec<usize>,
    // upper-triangular CSC of the permuted matrix
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    /// slot in the CSC value array for each input entry
    entry_slot: Vec<usize>,
    // elimination tree and column counts of L
    parent: Vec<isize>,
    l_col_ptr: Vec<usize>,
}

pub struct LdlNumeric {
    n: usize,
    perm: Vec<usize>,
    l_col_ptr: Vec<usize>,
    l_row_idx: Vec<usize>,
    l_values: Vec<f64>,
    d: Vec<f64>,
}

impl LdlSymbolic {
    /// Analyzes the pattern. `entries` may contain duplicates and either
    /// triangle; `use_rcm` enables bandwidth-reducing preordering.
    pub fn analyze(n: usize, entries: &[(usize, usize)], use_rcm: bool) -> Self {
        let perm = if use_rcm {
            rcm_order(n, entries.iter().copied())
        } else {
            (0..n).collect()
        };
        let mut iperm = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }

        // Map entries into the upper triangle of the permuted matrix.
        let mapped: Vec<(usize, usize)> = entries
            .iter()
            .map(|&(i, j)| {
                let (pi, pj) = (iperm[i], iperm[j]);
                if pi <= pj {
                    (pi, pj)
                } else {
                    (pj, pi)
                }
            })
            .collect();

        // Column-major dedup'd CSC build with slot map.
        let mut order: Vec<usize> = (0..mapped.len()).collect();
        order.sort_unstable_by_key(|&k| (mapped[k].1, mapped[k].0));
        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::with_capacity(mapped.len());
        let mut entry_slot = vec![0usize; mapped.len()];
        let mut last = None;
        for &k in &order {
            let (r, c) = mapped[k];
            if last != Some((r, c)) {
                row_idx.push(r);
                col_ptr[c + 1] += 1;
                last = Some((r, c));
            }
            entry_slot[k] = row_idx.len() - 1;
        }
        for c in 0..n {
            col_ptr[c + 1] += col_ptr[c];
        }

        // Elimination tree and column counts (Davis, LDL).
        let mut parent = vec![-1isize; n];
        let mut lnz = vec![0usize; n];
        let mut flag = vec![usize::MAX; n];
        for k in 0..n {
            flag[k] = k;
            for p in col_ptr[k]..col_ptr[k + 1] {
                let mut i = row_idx[p];
                if i < k {
                    while flag[i] != k {
                        if parent[i] == -1 {
                            parent[i] = k as isize;
                        }
                        lnz[i] += 1;
                        flag[i] = k;
                        i = parent[i] as usize;
                    }
                }
            }
        }
        let mut l_col_ptr = vec![0usize; n + 1];
        for k in 0..n {
            l_col_ptr[k + 1] = l_col_ptr[k] + lnz[k];
        }

        LdlSymbolic {
            n,
            perm,
            col_ptr,
            row_idx,
            entry_slot,
            parent,
            l_col_ptr,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Numeric factorization. `values` is aligned with the entry order given
    /// to [`LdlSymbolic::analyze`]; duplicates accumulate. Off-diagonal
    /// entries supplied on both triangles must appear only once per pair.
    ///
    /// Returns `Err(k)` if a zero pivot arises at column `k`.
    pub fn factor(&self, values: &[f64]) -> Result<LdlNumeric, usize> {
        assert_eq!(values.len(), self.entry_slot.len());
        let n = self.n;
        let mut ax = vec![0.0; self.row_idx.len()];
        for (k, &slot) in self.entry_slot.iter().enumerate() {
            ax[slot] += values[k];
        }

        let mut l_values = vec![0.0; self.l_col_ptr[n]];
        let mut l_row_idx = vec![0usize; self.l_col_ptr[n]];
        let mut d = vec![0.0; n];
        let mut y = vec![0.0; n];
        let mut pattern = vec![0usize; n];
        let mut stack = vec![0usize; n];
        let mut flag = vec![usize::MAX; n];
        let mut lnz_cur = vec![0usize; n];

        for k in 0..n {
            let mut top = n;
            flag[k] = k;
            y[k] = 0.0;
            for p in self.col_ptr[k]..self.col_ptr[k + 1] {
                let i = self.row_idx[p];
                y[i] += ax[p];
                let mut len = 0;
                let mut ii = i;
                while flag[ii] != k {
                    stack[len] = ii;
                    len += 1;
                    flag[ii] = k;
                    ii = self.parent[ii] as usize;
                }
                while len > 0 {
                    len -= 1;
                    top -= 1;
                    pattern[top] = stack[len];
                }
            }
            d[k] = y[k];
            y[k] = 0.0;
            for s in top..n {
                let i = pattern[s];
                let yi = y[i];
                y[i] = 0.0;
                let p2 = self.l_col_ptr[i] + lnz_cur[i];
                for p in self.l_col_ptr[i]..p2 {
                    y[l_row_idx[p]] -= l_values[p] * yi;
                }
                let l_ki = yi / d[i];
                d[k] -= l_ki * yi;
                l_row_idx[p2] = k;
                l_values[p2] = l_ki;
                lnz_cur[i] += 1;
            }
            if d[k] == 0.0 || !d[k].is_finite() {
                return Err(k);
            }
        }

        Ok(LdlNumeric {
            n,
            perm: self.perm.clone(),
            l_col_ptr: self.l_col_ptr.clone(),
            l_row_idx,
            l_values,
            d,
        })
    }
}

impl LdlNumeric {
    /// Solves A x = b in place (b is in the original, unpermuted ordering).
    pub fn solve(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        let mut x = vec![0.0; n];
        for new in 0..n {
            x[new] = b[self.perm[new]];
        }
        // L y = x
        for j in 0..n {
            let xj = x[j];
            if xj != 0.0 {
                for p in self.l_col_ptr[j]..self.l_col_ptr[j + 1] {
                    x[self.l_row_idx[p]] -= self.l_values[p] * xj;
                }
            }
        }
        for j in 0..n {
            x[j] /= self.d[j];
        }
        // L^T z = y
        for j in (0..n).rev() {
            let mut acc = x[j];
            for p in self.l_col_ptr[j]..self.l_col_ptr[j + 1] {
                acc -= self.l_values[p] * x[self.l_row_idx[p]];
            }
            x[j] = acc;
        }
        for new in 0..n {
            b[self.perm[new]] = x[new];
        }
    }

    /// (positive, negative, zero) counts of the diagonal of D.
    pub fn inertia(&self) -> (usize, usize, usize) {
        let mut pos = 0;
        let mut neg = 0;
        let mut zero = 0;
        for &v in &self.d {
            if v > 0.0 {
                pos += 1;
            } else if v < 0.0 {
                neg += 1;
            } else {
                zero += 1;
            }
        }
        (pos, neg, zero)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut m: Vec<Vec<f64>> = a.iter().cloned().collect();
        let mut x = b.to_vec();
        for k in 0..n {
            let piv = (k..n)
                .max_by(|&i, &j| m[i][k].abs().partial_cmp(&m[j][k].abs()).unwrap())
                .unwrap();
            m.swap(k, piv);
            x.swap(k, piv);
            let d = m[k][k];
            for i in k + 1..n {
                let f = m[i][k] / d;
                for j in k..n {
                    m[i][j] -= f * m[k][j];
                }
                x[i] -= f * x[k];
            }
        }
        for k in (0..n).rev() {
            for j in k + 1..n {
                let t = m[k][j] * x[j];
                x[k] -= t;
            }
            x[k] /= m[k][k];
        }
        x
    }

    fn random_kkt(n: usize, m: usize, seed: u64) -> (Vec<(usize, usize)>, Vec<f64>) {
        // H = B^T B + I on the leading block, -delta I trailing, plus a
        // random sparse J coupling block: a quasi-definite KKT matrix.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        let mut values = Vec::new();
        for i in 0..n {
            entries.push((i, i));
            values.push(2.0 + rng.gen::<f64>());
            if i + 1 < n && rng.gen::<f64>() < 0.6 {
                entries.push((i + 1, i));
                values.push(rng.gen::<f64>() - 0.5);
            }
        }
        for r in 0..m {
            entries.push((n + r, n + r));
            values.push(-1e-2);
            for _ in 0..3 {
                let c = rng.gen_range(0..n);
                entries.push((n + r, c));
                values.push(rng.gen::<f64>() - 0.5);
            }
        }
        (entries, values)
    }

    fn to_dense(dim: usize, entries: &[(usize, usize)], values: &[f64]) -> Vec<Vec<f64>> {
        let mut a = vec![vec![0.0; dim]; dim];
        for (&(i, j), &v) in entries.iter().zip(values) {
            a[i][j] += v;
            if i != j {
                a[j][i] += v;
            }
        }
        a
    }

    #[test]
    fn ldl_matches_dense_solve() {
        for seed in 0..5 {
            let (n, m) = (14, 6);
            let dim = n + m;
            let (entries, values) = random_kkt(n, m, seed);
            let sym = LdlSymbolic::analyze(dim, &entries, true);
            let num = sym.factor(&values).expect("factorizable");
            let b: Vec<f64> = (0..dim).map(|i| (i as f64 * 0.37).sin()).collect();
            let mut x = b.clone();
            num.solve(&mut x);
            let a = to_dense(dim, &entries, &values);
            let x_ref = dense_solve(&a, &b);
            for (xi, ri) in x.iter().zip(&x_ref) {
                assert!((xi - ri).abs() < 1e-9, "{xi} vs {ri}");
            }
        }
    }

    #[test]
    fn ldl_inertia_of_quasi_definite_kkt() {
        let (n, m) = (10, 5);
        let (entries, values) = random_kkt(n, m, 7);
        let sym = LdlSymbolic::analyze(n + m, &entries, true);
        let num = sym.factor(&values).unwrap();
        assert_eq!(num.inertia(), (n, m, 0));
    }

    #[test]
    fn pattern_builder_dedups_and_sorts() {
        let mut b = PatternBuilder::new();
        let s0 = b.push(1, 2);
        let s1 = b.push(0, 0);
        let s2 = b.push(1, 2);
        let (pat, slots) = b.build(2, 3);
        assert_eq!(pat.nnz(), 2);
        assert_eq!(slots[s0], slots[s2]);
        assert_ne!(slots[s0], slots[s1]);
        assert_eq!(pat.row(1), &[2]);
        let _ = s1;
    }

    #[test]
    fn rcm_is_a_permutation() {
        let edges = vec![(0, 3), (3, 5), (1, 2), (2, 4), (4, 5)];
        let p = rcm_order(6, edges.into_iter());
        let mut seen = vec![false; 6];
        for &v in &p {
            assert!(!seen[v]);
            seen[v] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
