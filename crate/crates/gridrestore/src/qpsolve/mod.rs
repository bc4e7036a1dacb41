//! Convex quadratic programming.
//!
//! `solve_qp` runs a primal-dual interior-point method with Mehrotra
//! predictor-corrector steps on the reduced KKT system
//! `[Q + G^T W G, E^T; E, -r I]`. Before iterating, the instance is
//! presolved (variables whose bounds pin them, e.g. flows on unavailable
//! lines, are substituted out) and split into independent blocks, which are
//! solved separately; dispatch instances decompose into one block per time
//! step, and islanded parts of the network split further.
//!
//! A tiny diagonal regularization keeps every block strictly convex so the
//! minimizer is unique and repeated solves are bit-identical.

mod ldl;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use ldl::{reverse_cuthill_mckee, sym_mat_vec, LdlFactor};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 200;

/// Diagonal regularization applied to variables with no quadratic cost.
const QUAD_REG: f64 = 1e-8;
/// Regularization of the equality block of the KKT matrix.
const EQ_REG: f64 = 1e-10;
/// Bounds closer than this are treated as fixing the variable.
const FIX_TOL: f64 = 1e-12;
/// Feasibility slack allowed when presolve checks constant rows.
const PRESOLVE_FEAS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("malformed instance: {0}")]
    BadInstance(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    IterationLimit,
}

/// Sparse rows stored in compressed form.
#[derive(Clone, Debug, Default)]
pub struct RowMatrix {
    starts: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl RowMatrix {
    pub fn new() -> Self {
        RowMatrix {
            starts: vec![0],
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn push_row(&mut self, cols: &[usize], vals: &[f64]) {
        debug_assert_eq!(cols.len(), vals.len());
        self.cols.extend_from_slice(cols);
        self.vals.extend_from_slice(vals);
        self.starts.push(self.cols.len());
    }

    pub fn n_rows(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.starts[r], self.starts[r + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }
}

/// One continuous dispatch problem with integers already fixed: quadratic
/// objective, linear equalities and inequalities, and variable bounds.
#[derive(Clone, Debug)]
pub struct QpInstance {
    pub num_vars: usize,
    /// Lower-triangle triplets (i >= j) of the symmetric quadratic matrix.
    pub quad: Vec<(usize, usize, f64)>,
    pub linear: Vec<f64>,
    pub constant: f64,
    pub eq_rows: RowMatrix,
    pub eq_rhs: Vec<f64>,
    pub ineq_rows: RowMatrix,
    pub ineq_rhs: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl QpInstance {
    pub fn new(num_vars: usize) -> Self {
        QpInstance {
            num_vars,
            quad: Vec::new(),
            linear: vec![0.0; num_vars],
            constant: 0.0,
            eq_rows: RowMatrix::new(),
            eq_rhs: Vec::new(),
            ineq_rows: RowMatrix::new(),
            ineq_rhs: Vec::new(),
            lower: vec![f64::NEG_INFINITY; num_vars],
            upper: vec![f64::INFINITY; num_vars],
        }
    }

    pub fn add_quad_diag(&mut self, i: usize, v: f64) {
        self.quad.push((i, i, v));
    }

    pub fn add_quad(&mut self, i: usize, j: usize, v: f64) {
        if i >= j {
            self.quad.push((i, j, v));
        } else {
            self.quad.push((j, i, v));
        }
    }

    pub fn add_eq(&mut self, cols: &[usize], vals: &[f64], rhs: f64) {
        self.eq_rows.push_row(cols, vals);
        self.eq_rhs.push(rhs);
    }

    /// Adds `cols . vals <= rhs`.
    pub fn add_ineq(&mut self, cols: &[usize], vals: &[f64], rhs: f64) {
        self.ineq_rows.push_row(cols, vals);
        self.ineq_rhs.push(rhs);
    }

    pub fn set_bounds(&mut self, i: usize, lower: f64, upper: f64) {
        self.lower[i] = lower;
        self.upper[i] = upper;
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        let mut obj = self.constant;
        for (i, &ci) in self.linear.iter().enumerate() {
            obj += ci * x[i];
        }
        for &(i, j, v) in &self.quad {
            if i == j {
                obj += 0.5 * v * x[i] * x[i];
            } else {
                obj += v * x[i] * x[j];
            }
        }
        obj
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.num_vars;
        if self.linear.len() != n || self.lower.len() != n || self.upper.len() != n {
            return Err(QpError::DimensionMismatch(
                "linear/bounds length != num_vars".into(),
            ));
        }
        if self.eq_rows.n_rows() != self.eq_rhs.len() || self.ineq_rows.n_rows() != self.ineq_rhs.len()
        {
            return Err(QpError::DimensionMismatch("row/rhs count mismatch".into()));
        }
        for &(i, j, v) in &self.quad {
            if i >= n || j >= n {
                return Err(QpError::BadInstance("quad index out of range".into()));
            }
            if j > i {
                return Err(QpError::BadInstance(
                    "quad triplets must be lower-triangular".into(),
                ));
            }
            if i == j && v < 0.0 {
                return Err(QpError::BadInstance(
                    "negative diagonal quadratic entry".into(),
                ));
            }
            if !v.is_finite() {
                return Err(QpError::BadInstance("non-finite quad entry".into()));
            }
        }
        for &c in self.eq_rows.cols.iter().chain(self.ineq_rows.cols.iter()) {
            if c >= n {
                return Err(QpError::BadInstance("row index out of range".into()));
            }
        }
        for v in self
            .linear
            .iter()
            .chain(self.eq_rhs.iter())
            .chain(self.ineq_rhs.iter())
            .chain(self.eq_rows.vals.iter())
            .chain(self.ineq_rows.vals.iter())
        {
            if !v.is_finite() {
                return Err(QpError::BadInstance("non-finite coefficient".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub eq_duals: Vec<f64>,
    pub ineq_duals: Vec<f64>,
    pub lower_duals: Vec<f64>,
    pub upper_duals: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

// ---------------------------------------------------------------------------
// presolve
// ---------------------------------------------------------------------------

struct Reduced {
    infeasible: bool,
    free: Vec<usize>,
    old_to_new: Vec<Option<usize>>,
    x_fixed: Vec<f64>,
    quad: Vec<(usize, usize, f64)>,
    linear: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    // (original row id, cols, vals, rhs) in reduced indexing
    eq: Vec<(usize, Vec<usize>, Vec<f64>, f64)>,
    ineq: Vec<(usize, Vec<usize>, Vec<f64>, f64)>,
}

fn presolve(inst: &QpInstance) -> Reduced {
    let n = inst.num_vars;
    let mut is_fixed = vec![false; n];
    let mut x_fixed = vec![0.0; n];
    let mut infeasible = false;
    for i in 0..n {
        if inst.lower[i] > inst.upper[i] + PRESOLVE_FEAS {
            infeasible = true;
        }
        if inst.upper[i] - inst.lower[i] <= FIX_TOL && inst.lower[i].is_finite() {
            is_fixed[i] = true;
            x_fixed[i] = 0.5 * (inst.lower[i] + inst.upper[i]);
        }
    }
    let mut old_to_new = vec![None; n];
    let mut free = Vec::new();
    for i in 0..n {
        if !is_fixed[i] {
            old_to_new[i] = Some(free.len());
            free.push(i);
        }
    }
    let nf = free.len();
    let mut linear = vec![0.0; nf];
    let mut lower = vec![0.0; nf];
    let mut upper = vec![0.0; nf];
    for (k, &i) in free.iter().enumerate() {
        linear[k] = inst.linear[i];
        lower[k] = inst.lower[i];
        upper[k] = inst.upper[i];
    }
    let mut quad = Vec::new();
    for &(i, j, v) in &inst.quad {
        match (old_to_new[i], old_to_new[j]) {
            (Some(a), Some(b)) => quad.push((a.max(b), a.min(b), v)),
            (Some(a), None) => linear[a] += v * x_fixed[j],
            (None, Some(b)) => linear[b] += v * x_fixed[i],
            (None, None) => {}
        }
    }
    let mut reduce_rows = |rows: &RowMatrix, rhs: &[f64], is_eq: bool| {
        let mut out = Vec::new();
        for r in 0..rows.n_rows() {
            let (cols, vals) = rows.row(r);
            let mut rcols = Vec::new();
            let mut rvals = Vec::new();
            let mut b = rhs[r];
            for (&c, &v) in cols.iter().zip(vals) {
                match old_to_new[c] {
                    Some(nc) => {
                        rcols.push(nc);
                        rvals.push(v);
                    }
                    None => b -= v * x_fixed[c],
                }
            }
            if rcols.is_empty() {
                if is_eq && b.abs() > PRESOLVE_FEAS {
                    infeasible = true;
                }
                if !is_eq && b < -PRESOLVE_FEAS {
                    infeasible = true;
                }
            } else {
                out.push((r, rcols, rvals, b));
            }
        }
        out
    };
    let eq = reduce_rows(&inst.eq_rows, &inst.eq_rhs, true);
    let ineq = reduce_rows(&inst.ineq_rows, &inst.ineq_rhs, false);
    Reduced {
        infeasible,
        free,
        old_to_new,
        x_fixed,
        quad,
        linear,
        lower,
        upper,
        eq,
        ineq,
    }
}

// ---------------------------------------------------------------------------
// independent blocks
// ---------------------------------------------------------------------------

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }
    fn find(&mut self, mut a: usize) -> usize {
        while self.parent[a] != a {
            self.parent[a] = self.parent[self.parent[a]];
            a = self.parent[a];
        }
        a
    }
    fn join(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

enum GSrc {
    Ineq(usize),
    Upper(usize),
    Lower(usize),
}

struct Block {
    n: usize,
    vars: Vec<usize>, // reduced-space var ids
    q_diag: Vec<f64>,
    q_off: Vec<(usize, usize, f64)>,
    c: Vec<f64>,
    eq_cols: Vec<Vec<usize>>,
    eq_vals: Vec<Vec<f64>>,
    eq_rhs: Vec<f64>,
    eq_src: Vec<usize>,
    g_cols: Vec<Vec<usize>>,
    g_vals: Vec<Vec<f64>>,
    g_rhs: Vec<f64>,
    g_src: Vec<GSrc>,
    x0: Vec<f64>,
}

struct BlockOut {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    status: SolveStatus,
    iterations: usize,
}

fn build_blocks(red: &Reduced) -> Vec<Block> {
    let nf = red.free.len();
    let mut uf = UnionFind::new(nf);
    for &(i, j, _) in &red.quad {
        if i != j {
            uf.join(i, j);
        }
    }
    for (_, cols, _, _) in red.eq.iter().chain(red.ineq.iter()) {
        for w in cols.windows(2) {
            uf.join(w[0], w[1]);
        }
        if cols.len() > 1 {
            uf.join(cols[0], cols[cols.len() - 1]);
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut root_to_group: HashMap<usize, usize> = HashMap::new();
    for v in 0..nf {
        let r = uf.find(v);
        let g = *root_to_group.entry(r).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(v);
    }
    let mut var_group = vec![0usize; nf];
    let mut var_local = vec![0usize; nf];
    for (g, vars) in groups.iter().enumerate() {
        for (loc, &v) in vars.iter().enumerate() {
            var_group[v] = g;
            var_local[v] = loc;
        }
    }
    let mut blocks: Vec<Block> = groups
        .iter()
        .map(|vars| {
            let n = vars.len();
            let mut b = Block {
                n,
                vars: vars.clone(),
                q_diag: vec![0.0; n],
                q_off: Vec::new(),
                c: vec![0.0; n],
                eq_cols: Vec::new(),
                eq_vals: Vec::new(),
                eq_rhs: Vec::new(),
                eq_src: Vec::new(),
                g_cols: Vec::new(),
                g_vals: Vec::new(),
                g_rhs: Vec::new(),
                g_src: Vec::new(),
                x0: vec![0.0; n],
            };
            for (loc, &v) in vars.iter().enumerate() {
                b.c[loc] = red.linear[v];
                let (lo, hi) = (red.lower[v], red.upper[v]);
                b.x0[loc] = if lo.is_finite() && hi.is_finite() {
                    0.5 * (lo + hi)
                } else if lo.is_finite() {
                    lo + 1.0
                } else if hi.is_finite() {
                    hi - 1.0
                } else {
                    0.0
                };
                if hi.is_finite() {
                    b.g_cols.push(vec![loc]);
                    b.g_vals.push(vec![1.0]);
                    b.g_rhs.push(hi);
                    b.g_src.push(GSrc::Upper(red.free[v]));
                }
                if lo.is_finite() {
                    b.g_cols.push(vec![loc]);
                    b.g_vals.push(vec![-1.0]);
                    b.g_rhs.push(-lo);
                    b.g_src.push(GSrc::Lower(red.free[v]));
                }
            }
            b
        })
        .collect();
    for &(i, j, v) in &red.quad {
        let g = var_group[i];
        if i == j {
            blocks[g].q_diag[var_local[i]] += v;
        } else {
            let (a, b) = (var_local[i], var_local[j]);
            blocks[g].q_off.push((a.max(b), a.min(b), v));
        }
    }
    for (orig, cols, vals, rhs) in &red.eq {
        let g = var_group[cols[0]];
        let lcols: Vec<usize> = cols.iter().map(|&c| var_local[c]).collect();
        blocks[g].eq_cols.push(lcols);
        blocks[g].eq_vals.push(vals.clone());
        blocks[g].eq_rhs.push(*rhs);
        blocks[g].eq_src.push(*orig);
    }
    for (orig, cols, vals, rhs) in &red.ineq {
        let g = var_group[cols[0]];
        let lcols: Vec<usize> = cols.iter().map(|&c| var_local[c]).collect();
        blocks[g].g_cols.push(lcols);
        blocks[g].g_vals.push(vals.clone());
        blocks[g].g_rhs.push(*rhs);
        blocks[g].g_src.push(GSrc::Ineq(*orig));
    }
    blocks
}

// ---------------------------------------------------------------------------
// interior-point method on one block
// ---------------------------------------------------------------------------

struct KktSystem {
    dim: usize,
    order: Vec<usize>,   // order[k] = original kkt index at permuted position k
    perm_of: Vec<usize>, // original -> permuted
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    base_vals: Vec<f64>,
    vals: Vec<f64>,
    diag_primal: Vec<usize>,
    diag_eq: Vec<usize>,
    // per G row: list of (slot, coefficient product)
    row_slots: Vec<Vec<(usize, f64)>>,
    factor: LdlFactor,
    work: Vec<f64>,
    work2: Vec<f64>,
}

impl KktSystem {
    fn build(b: &Block) -> KktSystem {
        let n = b.n;
        let me = b.eq_rhs.len();
        let dim = n + me;
        // collect pattern keys in original coordinates (upper: i <= j)
        let mut keys: Vec<(usize, usize)> = (0..dim).map(|i| (i, i)).collect();
        for &(i, j, _) in &b.q_off {
            keys.push((j, i)); // j < i, store (min,max)
        }
        for (r, cols) in b.eq_cols.iter().enumerate() {
            for &c in cols {
                keys.push((c, n + r));
            }
        }
        for cols in &b.g_cols {
            for a in 0..cols.len() {
                for bidx in a..cols.len() {
                    let (x, y) = (cols[a].min(cols[bidx]), cols[a].max(cols[bidx]));
                    keys.push((x, y));
                }
            }
        }
        keys.sort_unstable();
        keys.dedup();
        // adjacency for ordering
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); dim];
        for &(i, j) in &keys {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
        for a in adj.iter_mut() {
            a.sort_unstable();
            a.dedup();
        }
        let order = reverse_cuthill_mckee(dim, &adj);
        let mut perm_of = vec![0usize; dim];
        for (k, &v) in order.iter().enumerate() {
            perm_of[v] = k;
        }
        // permuted upper pattern
        let mut pkeys: Vec<(usize, usize)> = keys
            .iter()
            .map(|&(i, j)| {
                let (a, bb) = (perm_of[i], perm_of[j]);
                (a.max(bb), a.min(bb)) // (col, row) with row <= col
            })
            .collect();
        pkeys.sort_unstable();
        pkeys.dedup();
        let mut col_ptr = vec![0usize; dim + 1];
        let mut row_idx = Vec::with_capacity(pkeys.len());
        let mut slot_of: HashMap<(usize, usize), usize> = HashMap::with_capacity(pkeys.len());
        {
            let mut k = 0usize;
            for col in 0..dim {
                while k < pkeys.len() && pkeys[k].0 == col {
                    slot_of.insert((pkeys[k].1, col), row_idx.len());
                    row_idx.push(pkeys[k].1);
                    k += 1;
                }
                col_ptr[col + 1] = row_idx.len();
            }
        }
        let slot = |i: usize, j: usize| -> usize {
            let (a, bb) = (perm_of[i], perm_of[j]);
            slot_of[&(a.min(bb), a.max(bb))]
        };
        // static part: Q + regularization, E, -r I
        let mut base_vals = vec![0.0; row_idx.len()];
        let mut diag_primal = Vec::with_capacity(n);
        let mut diag_eq = Vec::with_capacity(me);
        for i in 0..n {
            let qd = b.q_diag[i];
            base_vals[slot(i, i)] += qd + if qd < QUAD_REG { QUAD_REG } else { 0.0 };
            diag_primal.push(slot(i, i));
        }
        for &(i, j, v) in &b.q_off {
            base_vals[slot(i, j)] += v;
        }
        for (r, (cols, vals)) in b.eq_cols.iter().zip(&b.eq_vals).enumerate() {
            for (&c, &v) in cols.iter().zip(vals) {
                base_vals[slot(c, n + r)] += v;
            }
            base_vals[slot(n + r, n + r)] -= EQ_REG;
            diag_eq.push(slot(n + r, n + r));
        }
        // dynamic slots for G^T W G
        let mut row_slots = Vec::with_capacity(b.g_cols.len());
        for (cols, vals) in b.g_cols.iter().zip(&b.g_vals) {
            let mut list = Vec::new();
            for a in 0..cols.len() {
                for bidx in a..cols.len() {
                    list.push((slot(cols[a], cols[bidx]), vals[a] * vals[bidx]));
                }
            }
            row_slots.push(list);
        }
        let expected_sign: Vec<i8> = order.iter().map(|&v| if v < n { 1 } else { -1 }).collect();
        let scale = base_vals
            .iter()
            .fold(1.0f64, |acc, v| acc.max(v.abs()));
        let factor = LdlFactor::new(
            dim,
            col_ptr.clone(),
            row_idx.clone(),
            expected_sign,
            1e-13 * scale,
        );
        KktSystem {
            dim,
            order,
            perm_of,
            col_ptr,
            row_idx,
            vals: vec![0.0; base_vals.len()],
            base_vals,
            diag_primal,
            diag_eq,
            row_slots,
            factor,
            work: vec![0.0; dim],
            work2: vec![0.0; dim],
        }
    }

    /// Reassemble and factor with the current barrier weights. `boost`
    /// strengthens the quasi-definite regularization when a previous
    /// factorization went numerically bad.
    fn refactor(&mut self, w: &[f64], boost: f64) {
        self.vals.copy_from_slice(&self.base_vals);
        for (r, list) in self.row_slots.iter().enumerate() {
            let wr = w[r];
            for &(slot, prod) in list {
                self.vals[slot] += wr * prod;
            }
        }
        if boost > 0.0 {
            for &s in &self.diag_primal {
                self.vals[s] += boost;
            }
            for &s in &self.diag_eq {
                self.vals[s] -= boost;
            }
        }
        self.factor.factor(&self.vals);
    }

    /// Solve the KKT system for `rhs` (original ordering) with one step of
    /// iterative refinement; the solution overwrites `rhs`.
    fn solve(&mut self, rhs: &mut [f64]) {
        let dim = self.dim;
        for i in 0..dim {
            self.work[self.perm_of[i]] = rhs[i];
        }
        let perm_rhs = self.work.clone();
        self.factor.solve(&mut self.work);
        // one refinement pass
        sym_mat_vec(
            dim,
            &self.col_ptr,
            &self.row_idx,
            &self.vals,
            &self.work,
            &mut self.work2,
        );
        for i in 0..dim {
            self.work2[i] = perm_rhs[i] - self.work2[i];
        }
        self.factor.solve(&mut self.work2);
        for i in 0..dim {
            self.work[i] += self.work2[i];
        }
        for k in 0..dim {
            rhs[self.order[k]] = self.work[k];
        }
    }
}

/// NaN-safe infinity norm: any non-finite component makes the norm
/// infinite so convergence checks can never pass on corrupted iterates.
fn inf_norm(v: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for x in v {
        if !x.is_finite() {
            return f64::INFINITY;
        }
        worst = worst.max(x.abs());
    }
    worst
}

fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    let mut a = f64::INFINITY;
    for (x, dx) in v.iter().zip(dv) {
        if *dx < 0.0 {
            a = a.min(-x / dx);
        }
    }
    a
}

fn solve_block(b: &Block, tol: f64, max_iter: usize) -> BlockOut {
    let n = b.n;
    let me = b.eq_rhs.len();
    let mg = b.g_rhs.len();
    let mut kkt = KktSystem::build(b);
    let dim = n + me;

    let mut x = b.x0.clone();
    let mut y = vec![0.0; me];
    let mut z = vec![1.0; mg];
    let mut s = vec![1.0; mg];
    let g_times = |x: &[f64], out: &mut [f64]| {
        for r in 0..mg {
            let mut acc = 0.0;
            for (&c, &v) in b.g_cols[r].iter().zip(&b.g_vals[r]) {
                acc += v * x[c];
            }
            out[r] = acc;
        }
    };
    let mut gx = vec![0.0; mg];
    g_times(&x, &mut gx);
    for r in 0..mg {
        s[r] = (b.g_rhs[r] - gx[r]).max(0.01);
    }

    let scale_d = 1.0 + inf_norm(&b.c);
    let mut rd = vec![0.0; n];
    let mut rp = vec![0.0; me];
    let mut rg = vec![0.0; mg];
    let mut rhs = vec![0.0; dim];
    let mut dz = vec![0.0; mg];
    let mut ds = vec![0.0; mg];
    let mut dz_c = vec![0.0; mg];
    let mut ds_c = vec![0.0; mg];
    let mut w = vec![0.0; mg];
    let mut t = vec![0.0; mg];
    let mut boost = 0.0f64;

    for iter in 1..=max_iter {
        // residuals
        for i in 0..n {
            rd[i] = b.c[i] + b.q_diag[i] * x[i];
        }
        for &(i, j, v) in &b.q_off {
            rd[i] += v * x[j];
            rd[j] += v * x[i];
        }
        for r in 0..me {
            let mut acc = 0.0;
            for (&c, &v) in b.eq_cols[r].iter().zip(&b.eq_vals[r]) {
                acc += v * x[c];
                rd[c] += v * y[r];
            }
            rp[r] = acc - b.eq_rhs[r];
        }
        g_times(&x, &mut gx);
        for r in 0..mg {
            rg[r] = gx[r] + s[r] - b.g_rhs[r];
            let zr = z[r];
            for (&c, &v) in b.g_cols[r].iter().zip(&b.g_vals[r]) {
                rd[c] += v * zr;
            }
        }
        let mu = if mg > 0 {
            s.iter().zip(&z).map(|(a, c)| a * c).sum::<f64>() / mg as f64
        } else {
            0.0
        };
        if std::env::var_os("GRIDRESTORE_QP_TRACE").is_some() {
            eprintln!(
                "iter {iter}: rd {:e} rp {:e} rg {:e} mu {:e} smin {:e} zmin {:e} smax {:e} zmax {:e} finite_x {}",
                inf_norm(&rd),
                inf_norm(&rp),
                inf_norm(&rg),
                mu,
                s.iter().cloned().fold(f64::INFINITY, f64::min),
                z.iter().cloned().fold(f64::INFINITY, f64::min),
                s.iter().cloned().fold(0.0f64, f64::max),
                z.iter().cloned().fold(0.0f64, f64::max),
                x.iter().all(|v| v.is_finite())
            );
        }
        if inf_norm(&rd) <= tol * scale_d
            && inf_norm(&rp) <= tol
            && inf_norm(&rg) <= tol
            && mu <= tol
        {
            return BlockOut {
                x,
                y,
                z,
                status: SolveStatus::Optimal,
                iterations: iter - 1,
            };
        }

        for r in 0..mg {
            w[r] = z[r] / s[r];
        }
        // factor and solve for the search direction; when a near-singular
        // pivot corrupts the factorization, strengthen the quasi-definite
        // regularization and refactor (the boost stays for later iterations)
        let mut have_direction = false;
        for _attempt in 0..4 {
            kkt.refactor(&w, boost);
            // predictor: affine direction with rc = -s.z
            for i in 0..n {
                rhs[i] = -rd[i];
            }
            for r in 0..mg {
                t[r] = (z[r] * rg[r] - s[r] * z[r]) / s[r];
            }
            for r in 0..mg {
                for (&c, &v) in b.g_cols[r].iter().zip(&b.g_vals[r]) {
                    rhs[c] -= v * t[r];
                }
            }
            for r in 0..me {
                rhs[n + r] = -rp[r];
            }
            kkt.solve(&mut rhs);
            if !rhs.iter().all(|v| v.is_finite()) {
                boost = if boost == 0.0 { 1e-8 } else { boost * 100.0 };
                continue;
            }
            {
                let (dx_a, _) = rhs.split_at(n);
                for r in 0..mg {
                    let mut gd = 0.0;
                    for (&c, &v) in b.g_cols[r].iter().zip(&b.g_vals[r]) {
                        gd += v * dx_a[c];
                    }
                    dz[r] = w[r] * (gd + rg[r]) - z[r];
                    ds[r] = -rg[r] - gd;
                }
            }
            let mu_target = if mg > 0 {
                let alpha_aff = max_step(&s, &ds).min(max_step(&z, &dz)).min(1.0);
                let mut mu_aff = 0.0;
                for r in 0..mg {
                    mu_aff += (s[r] + alpha_aff * ds[r]) * (z[r] + alpha_aff * dz[r]);
                }
                mu_aff /= mg as f64;
                (mu_aff / mu).powi(3).clamp(0.0, 1.0) * mu
            } else {
                0.0
            };

            // corrector: rc = sigma*mu - s.z - ds_aff.dz_aff, and the
            // reduced right-hand side carries G^T (w rg + rc/s) since
            // dz = w (G dx + rg) + rc/s
            for i in 0..n {
                rhs[i] = -rd[i];
            }
            for r in 0..mg {
                let rc = mu_target - s[r] * z[r] - ds[r] * dz[r];
                t[r] = (z[r] * rg[r] + rc) / s[r];
            }
            for r in 0..mg {
                for (&c, &v) in b.g_cols[r].iter().zip(&b.g_vals[r]) {
                    rhs[c] -= v * t[r];
                }
            }
            for r in 0..me {
                rhs[n + r] = -rp[r];
            }
            kkt.solve(&mut rhs);
            if !rhs.iter().all(|v| v.is_finite()) {
                boost = if boost == 0.0 { 1e-8 } else { boost * 100.0 };
                continue;
            }
            let (dx, _) = rhs.split_at(n);
            for r in 0..mg {
                let mut gd = 0.0;
                for (&c, &v) in b.g_cols[r].iter().zip(&b.g_vals[r]) {
                    gd += v * dx[c];
                }
                let rc = mu_target - s[r] * z[r] - ds[r] * dz[r];
                dz_c[r] = w[r] * (gd + rg[r]) + rc / s[r];
                ds_c[r] = -rg[r] - gd;
            }
            if dz_c.iter().chain(ds_c.iter()).all(|v| v.is_finite()) {
                have_direction = true;
                break;
            }
            boost = if boost == 0.0 { 1e-8 } else { boost * 100.0 };
        }
        if !have_direction {
            break;
        }
        let (dx, dy) = rhs.split_at(n);
        let alpha = if mg > 0 {
            (0.995 * max_step(&s, &ds_c).min(max_step(&z, &dz_c))).min(1.0)
        } else {
            1.0
        };
        for i in 0..n {
            x[i] += alpha * dx[i];
        }
        for r in 0..me {
            y[r] += alpha * dy[r];
        }
        for r in 0..mg {
            s[r] += alpha * ds_c[r];
            z[r] += alpha * dz_c[r];
        }
    }
    // did not converge; classify stalled primal infeasibility
    let mu = if mg > 0 {
        s.iter().zip(&z).map(|(a, c)| a * c).sum::<f64>() / mg as f64
    } else {
        0.0
    };
    let status = if inf_norm(&rp).max(inf_norm(&rg)) > 1e3 * tol && mu < tol * tol {
        SolveStatus::Infeasible
    } else {
        SolveStatus::IterationLimit
    };
    BlockOut {
        x,
        y,
        z,
        status,
        iterations: max_iter,
    }
}

/// Analytic solution for a single bounded variable with diagonal quadratic
/// cost and no coupling rows.
fn solve_singleton(q: f64, c: f64, lo: f64, hi: f64) -> (f64, f64, f64) {
    let qq = q.max(QUAD_REG);
    let mut x = -c / qq;
    if x < lo {
        x = lo;
    }
    if x > hi {
        x = hi;
    }
    let grad = q * x + c;
    let (mut zl, mut zu) = (0.0, 0.0);
    if lo.is_finite() && (x - lo).abs() <= 1e-12 && grad > 0.0 {
        zl = grad;
    }
    if hi.is_finite() && (x - hi).abs() <= 1e-12 && grad < 0.0 {
        zu = -grad;
    }
    (x, zl, zu)
}

// ---------------------------------------------------------------------------
// public entry points
// ---------------------------------------------------------------------------

pub fn solve_qp(inst: &QpInstance, tol: f64, max_iter: usize) -> Result<QpSolution, QpError> {
    inst.validate()?;
    let n = inst.num_vars;
    let mut sol = QpSolution {
        x: vec![0.0; n],
        eq_duals: vec![0.0; inst.eq_rhs.len()],
        ineq_duals: vec![0.0; inst.ineq_rhs.len()],
        lower_duals: vec![0.0; n],
        upper_duals: vec![0.0; n],
        objective: 0.0,
        status: SolveStatus::Optimal,
        iterations: 0,
    };
    let red = presolve(inst);
    if red.infeasible {
        sol.status = SolveStatus::Infeasible;
        sol.x = red.x_fixed;
        sol.objective = inst.objective_value(&sol.x);
        return Ok(sol);
    }
    for (i, fixed) in red.old_to_new.iter().enumerate() {
        if fixed.is_none() {
            sol.x[i] = red.x_fixed[i];
        }
    }
    let blocks = build_blocks(&red);
    for blk in &blocks {
        if blk.n == 1 && blk.eq_rhs.is_empty() && blk.g_src.len() <= 2 && blk.q_off.is_empty() {
            // bounds only: closed form
            let orig = red.free[blk.vars[0]];
            let (x, zl, zu) = solve_singleton(
                blk.q_diag[0],
                blk.c[0],
                inst.lower[orig],
                inst.upper[orig],
            );
            sol.x[orig] = x;
            sol.lower_duals[orig] = zl;
            sol.upper_duals[orig] = zu;
            continue;
        }
        let out = solve_block(blk, tol, max_iter);
        match out.status {
            SolveStatus::Optimal => {}
            s => {
                if sol.status == SolveStatus::Optimal {
                    sol.status = s;
                }
            }
        }
        sol.iterations = sol.iterations.max(out.iterations);
        for (loc, &v) in blk.vars.iter().enumerate() {
            sol.x[red.free[v]] = out.x[loc];
        }
        for (r, &orig) in blk.eq_src.iter().enumerate() {
            sol.eq_duals[orig] = out.y[r];
        }
        for (r, src) in blk.g_src.iter().enumerate() {
            match *src {
                GSrc::Ineq(row) => sol.ineq_duals[row] = out.z[r],
                GSrc::Upper(var) => sol.upper_duals[var] = out.z[r],
                GSrc::Lower(var) => sol.lower_duals[var] = out.z[r],
            }
        }
    }
    // duals for presolved-out (fixed) variables, chosen to close stationarity
    let mut grad = gradient_with_duals(inst, &sol);
    for (i, mapped) in red.old_to_new.iter().enumerate() {
        if mapped.is_none() {
            let r = grad[i];
            if r > 0.0 {
                sol.lower_duals[i] = r;
            } else {
                sol.upper_duals[i] = -r;
            }
            grad[i] = 0.0;
        }
    }
    sol.objective = inst.objective_value(&sol.x);
    Ok(sol)
}

/// Gradient of the Lagrangian without the bound-dual terms.
fn gradient_with_duals(inst: &QpInstance, sol: &QpSolution) -> Vec<f64> {
    let mut g = inst.linear.clone();
    for &(i, j, v) in &inst.quad {
        g[i] += v * sol.x[j];
        if i != j {
            g[j] += v * sol.x[i];
        }
    }
    for r in 0..inst.eq_rows.n_rows() {
        let (cols, vals) = inst.eq_rows.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            g[c] += v * sol.eq_duals[r];
        }
    }
    for r in 0..inst.ineq_rows.n_rows() {
        let (cols, vals) = inst.ineq_rows.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            g[c] += v * sol.ineq_duals[r];
        }
    }
    g
}

/// KKT residual norms of a primal-dual point for `inst`: stationarity,
/// primal feasibility, and complementarity, all in the infinity norm.
pub fn kkt_residuals(inst: &QpInstance, sol: &QpSolution) -> Result<KktResiduals, QpError> {
    inst.validate()?;
    let n = inst.num_vars;
    if sol.x.len() != n
        || sol.eq_duals.len() != inst.eq_rhs.len()
        || sol.ineq_duals.len() != inst.ineq_rhs.len()
        || sol.lower_duals.len() != n
        || sol.upper_duals.len() != n
    {
        return Err(QpError::DimensionMismatch(
            "solution does not match instance".into(),
        ));
    }
    let mut grad = gradient_with_duals(inst, sol);
    for i in 0..n {
        grad[i] += sol.upper_duals[i] - sol.lower_duals[i];
    }
    let stationarity = inf_norm(&grad);
    let mut primal = 0.0f64;
    let mut compl = 0.0f64;
    for r in 0..inst.eq_rows.n_rows() {
        let (cols, vals) = inst.eq_rows.row(r);
        let acc: f64 = cols.iter().zip(vals).map(|(&c, &v)| v * sol.x[c]).sum();
        primal = primal.max((acc - inst.eq_rhs[r]).abs());
    }
    for r in 0..inst.ineq_rows.n_rows() {
        let (cols, vals) = inst.ineq_rows.row(r);
        let acc: f64 = cols.iter().zip(vals).map(|(&c, &v)| v * sol.x[c]).sum();
        let slack = inst.ineq_rhs[r] - acc;
        primal = primal.max(-slack);
        compl = compl.max((sol.ineq_duals[r] * slack).abs());
    }
    for i in 0..n {
        if inst.lower[i].is_finite() {
            primal = primal.max(inst.lower[i] - sol.x[i]);
            compl = compl.max((sol.lower_duals[i] * (sol.x[i] - inst.lower[i])).abs());
        }
        if inst.upper[i].is_finite() {
            primal = primal.max(sol.x[i] - inst.upper[i]);
            compl = compl.max((sol.upper_duals[i] * (inst.upper[i] - sol.x[i])).abs());
        }
    }
    Ok(KktResiduals {
        stationarity,
        primal: primal.max(0.0),
        complementarity: compl,
    })
}
