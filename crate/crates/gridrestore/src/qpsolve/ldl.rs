//! Sparse LDL^T factorization for the symmetric quasi-definite KKT systems
//! assembled by the interior-point solver, plus a reverse Cuthill-McKee
//! ordering to keep fill-in low on network-structured patterns.
//!
//! The matrix is stored as the upper triangle in compressed-sparse-column
//! form. The pattern is fixed over a solve, so the elimination tree and
//! column counts are computed once and only the numeric factorization is
//! repeated per interior-point iteration.

use std::collections::VecDeque;

/// Reverse Cuthill-McKee ordering of an undirected graph given as sorted
/// adjacency lists. Returns `order` where `order[k]` is the original index
/// placed at position `k`. Deterministic: ties break on vertex index.
pub fn reverse_cuthill_mckee(n: usize, adj: &[Vec<usize>]) -> Vec<usize> {
    let mut order = Vec::with_capacity(n);
    let mut visited = vec![false; n];
    let degree: Vec<usize> = adj.iter().map(|a| a.len()).collect();
    let mut queue = VecDeque::new();
    let mut scan_from = 0usize;
    loop {
        // next unvisited vertex of minimum degree
        let mut start = None;
        let mut best = usize::MAX;
        for v in scan_from..n {
            if !visited[v] && degree[v] < best {
                best = degree[v];
                start = Some(v);
                if best == 0 {
                    break;
                }
            }
        }
        let start = match start {
            Some(s) => s,
            None => break,
        };
        while scan_from < n && visited[scan_from] {
            scan_from += 1;
        }
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = adj[v].iter().copied().filter(|&u| !visited[u]).collect();
            nbrs.sort_by_key(|&u| degree[u]);
            for u in nbrs {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    order
}

/// LDL^T factorization with a fixed pattern. `expected_sign[k]` gives the
/// sign the k-th pivot must have (+1 for the primal block, -1 for the
/// equality block); pivots that collapse toward zero are nudged back to
/// `pivot_floor` with that sign so the factorization never breaks down on
/// a quasi-definite matrix.
pub struct LdlFactor {
    n: usize,
    // upper-triangular pattern of the permuted matrix
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    // elimination tree and column counts
    parent: Vec<isize>,
    l_col_ptr: Vec<usize>,
    l_row_idx: Vec<usize>,
    l_vals: Vec<f64>,
    d: Vec<f64>,
    expected_sign: Vec<i8>,
    pivot_floor: f64,
    // workspaces
    y: Vec<f64>,
    pattern: Vec<usize>,
    flag: Vec<usize>,
    lnz_fill: Vec<usize>,
}

impl LdlFactor {
    /// Symbolic setup from the upper-triangular pattern (diagonal included,
    /// rows sorted within each column).
    pub fn new(
        n: usize,
        col_ptr: Vec<usize>,
        row_idx: Vec<usize>,
        expected_sign: Vec<i8>,
        pivot_floor: f64,
    ) -> Self {
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
        let total = l_col_ptr[n];
        LdlFactor {
            n,
            col_ptr,
            row_idx,
            parent,
            l_col_ptr,
            l_row_idx: vec![0; total],
            l_vals: vec![0.0; total],
            d: vec![0.0; n],
            expected_sign,
            pivot_floor,
            y: vec![0.0; n],
            pattern: vec![0; n],
            flag: vec![usize::MAX; n],
            lnz_fill: vec![0; n],
        }
    }

    /// Numeric factorization of the values laid out like the pattern given
    /// to [`LdlFactor::new`].
    pub fn factor(&mut self, vals: &[f64]) {
        let n = self.n;
        for k in 0..n {
            self.flag[k] = usize::MAX;
            self.lnz_fill[k] = 0;
            self.y[k] = 0.0;
        }
        for k in 0..n {
            let mut top = n;
            self.flag[k] = k;
            for p in self.col_ptr[k]..self.col_ptr[k + 1] {
                let mut i = self.row_idx[p];
                if i <= k {
                    self.y[i] += vals[p];
                    let mut len = 0usize;
                    while self.flag[i] != k {
                        self.pattern[len] = i;
                        len += 1;
                        self.flag[i] = k;
                        i = self.parent[i] as usize;
                    }
                    while len > 0 {
                        len -= 1;
                        top -= 1;
                        self.pattern[top] = self.pattern[len];
                    }
                }
            }
            let mut dk = self.y[k];
            self.y[k] = 0.0;
            for t in top..n {
                let i = self.pattern[t];
                let yi = self.y[i];
                self.y[i] = 0.0;
                let p2 = self.l_col_ptr[i] + self.lnz_fill[i];
                for p in self.l_col_ptr[i]..p2 {
                    self.y[self.l_row_idx[p]] -= self.l_vals[p] * yi;
                }
                let l_ki = yi / self.d[i];
                dk -= l_ki * yi;
                self.l_row_idx[p2] = k;
                self.l_vals[p2] = l_ki;
                self.lnz_fill[i] += 1;
            }
            // quasi-definite guard: keep the pivot away from zero with the
            // sign this row is supposed to carry
            if self.expected_sign[k] >= 0 {
                if dk < self.pivot_floor {
                    dk = self.pivot_floor;
                }
            } else if dk > -self.pivot_floor {
                dk = -self.pivot_floor;
            }
            self.d[k] = dk;
        }
    }

    /// Solve `A x = b` in place using the current factorization.
    pub fn solve(&self, x: &mut [f64]) {
        let n = self.n;
        for j in 0..n {
            let xj = x[j];
            for p in self.l_col_ptr[j]..self.l_col_ptr[j + 1] {
                x[self.l_row_idx[p]] -= self.l_vals[p] * xj;
            }
        }
        for j in 0..n {
            x[j] /= self.d[j];
        }
        for j in (0..n).rev() {
            let mut xj = x[j];
            for p in self.l_col_ptr[j]..self.l_col_ptr[j + 1] {
                xj -= self.l_vals[p] * x[self.l_row_idx[p]];
            }
            x[j] = xj;
        }
    }
}

/// Symmetric matrix-vector product from the upper-triangular CSC storage.
pub fn sym_mat_vec(
    n: usize,
    col_ptr: &[usize],
    row_idx: &[usize],
    vals: &[f64],
    x: &[f64],
    y: &mut [f64],
) {
    y[..n].fill(0.0);
    for j in 0..n {
        let xj = x[j];
        let mut acc = 0.0;
        for p in col_ptr[j]..col_ptr[j + 1] {
            let i = row_idx[p];
            let v = vals[p];
            if i == j {
                acc += v * xj;
            } else {
                y[i] += v * xj;
                acc += v * x[i];
            }
        }
        y[j] += acc;
    }
}
