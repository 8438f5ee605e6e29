//! Bounded-variable primal simplex with a dense basis inverse.
//!
//! Columns are the structural variables followed by one slack per row
//! (`<=` rows get slack in [0, inf), `>=` in (-inf, 0], `=` in [0, 0]).
//! Phase 1 drives the sum of basic bound violations to zero with composite
//! costs (+1 above upper, -1 below lower) and per-row relaxed ratio-test
//! bounds; phase 2 is the textbook bounded simplex with Dantzig pricing,
//! bound flips, and a Bland fallback under prolonged degeneracy.

use crate::milp::Sense;

pub(crate) const PIVOT_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub(crate) struct LpData {
    pub n_struct: usize,
    pub m: usize,
    /// CSC over structural columns.
    col_ptr: Vec<u32>,
    row_idx: Vec<u32>,
    val: Vec<f64>,
    pub b: Vec<f64>,
    pub cost: Vec<f64>,
    pub slack_lo: Vec<f64>,
    pub slack_hi: Vec<f64>,
}

impl LpData {
    /// Build from rows expressed over `n_struct` columns.
    pub fn new(
        n_struct: usize,
        rows: &[(Vec<(f64, u32)>, Sense, f64)],
        cost: &[f64],
    ) -> LpData {
        let m = rows.len();
        let mut entries: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n_struct];
        let mut b = Vec::with_capacity(m);
        let mut slack_lo = Vec::with_capacity(m);
        let mut slack_hi = Vec::with_capacity(m);
        for (i, (terms, sense, rhs)) in rows.iter().enumerate() {
            for &(c, j) in terms {
                entries[j as usize].push((i as u32, c));
            }
            b.push(*rhs);
            let (lo, hi) = match sense {
                Sense::Le => (0.0, f64::INFINITY),
                Sense::Ge => (f64::NEG_INFINITY, 0.0),
                Sense::Eq => (0.0, 0.0),
            };
            slack_lo.push(lo);
            slack_hi.push(hi);
        }
        let mut col_ptr = Vec::with_capacity(n_struct + 1);
        let mut row_idx = Vec::new();
        let mut val = Vec::new();
        col_ptr.push(0);
        for colv in &entries {
            for &(i, c) in colv {
                row_idx.push(i);
                val.push(c);
            }
            col_ptr.push(row_idx.len() as u32);
        }
        LpData {
            n_struct,
            m,
            col_ptr,
            row_idx,
            val,
            b,
            cost: cost.to_vec(),
            slack_lo,
            slack_hi,
        }
    }

    pub fn n_total(&self) -> usize {
        self.n_struct + self.m
    }

    #[inline]
    fn col(&self, j: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.col_ptr[j] as usize, self.col_ptr[j + 1] as usize);
        (&self.row_idx[a..b], &self.val[a..b])
    }

    /// lo/hi vectors over all columns for the given structural bounds.
    pub fn full_bounds(&self, lo_struct: &[f64], hi_struct: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut lo = Vec::with_capacity(self.n_total());
        let mut hi = Vec::with_capacity(self.n_total());
        lo.extend_from_slice(lo_struct);
        hi.extend_from_slice(hi_struct);
        lo.extend_from_slice(&self.slack_lo);
        hi.extend_from_slice(&self.slack_hi);
        (lo, hi)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Basis {
    /// Basic column per row slot.
    pub cols: Vec<u32>,
    /// For nonbasic columns: parked at the upper bound?
    pub at_upper: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    Numerical,
}

#[derive(Clone, Debug)]
pub(crate) struct LpOutcome {
    pub status: LpStatus,
    pub obj: f64,
    /// Values for every column (structural + slack).
    pub x: Vec<f64>,
    pub basis: Basis,
    pub iterations: usize,
}

/// Dense basis inverse cached across warm-started solves.
pub(crate) struct Workspace {
    m: usize,
    binv: Vec<f64>,
    basis: Vec<u32>,
    valid: bool,
}

impl Workspace {
    pub fn new() -> Workspace {
        Workspace {
            m: 0,
            binv: Vec::new(),
            basis: Vec::new(),
            valid: false,
        }
    }

    pub fn invalidate(&mut self) {
        self.valid = false;
    }
}

struct Simplex<'a> {
    data: &'a LpData,
    lo: &'a [f64],
    hi: &'a [f64],
    feas_tol: f64,
    basis: Vec<u32>,
    /// row slot per column, or -1 when nonbasic
    in_basis: Vec<i32>,
    at_upper: Vec<bool>,
    binv: Vec<f64>,
    xb: Vec<f64>,
    d: Vec<f64>,
    costs: Vec<f64>,
    /// phase-1 relaxed ratio-test bounds per row slot
    row_lo: Vec<f64>,
    row_hi: Vec<f64>,
    bland: bool,
    /// once set, Bland's rule stays on for the rest of the solve
    force_bland: bool,
    degenerate_run: usize,
    iterations: usize,
}

enum Step {
    Moved,
    Unbounded,
}

impl<'a> Simplex<'a> {
    fn nonbasic_value(&self, j: usize) -> f64 {
        if self.at_upper[j] {
            self.hi[j]
        } else {
            self.lo[j]
        }
    }

    /// xb = binv * (b - N x_N)
    fn recompute_xb(&mut self) {
        let m = self.data.m;
        let mut btilde = self.data.b.clone();
        for j in 0..self.data.n_total() {
            if self.in_basis[j] >= 0 {
                continue;
            }
            let xj = self.nonbasic_value(j);
            if xj == 0.0 {
                continue;
            }
            if j < self.data.n_struct {
                let (rows, vals) = self.data.col(j);
                for (&i, &a) in rows.iter().zip(vals) {
                    btilde[i as usize] -= a * xj;
                }
            } else {
                btilde[j - self.data.n_struct] -= xj;
            }
        }
        for r in 0..m {
            let row = &self.binv[r * m..(r + 1) * m];
            self.xb[r] = row.iter().zip(&btilde).map(|(a, b)| a * b).sum();
        }
    }

    /// w = binv * A_q
    fn ftran(&self, q: usize, w: &mut [f64]) {
        let m = self.data.m;
        if q < self.data.n_struct {
            let (rows, vals) = self.data.col(q);
            for r in 0..m {
                let row = &self.binv[r * m..(r + 1) * m];
                let mut acc = 0.0;
                for (&i, &a) in rows.iter().zip(vals) {
                    acc += a * row[i as usize];
                }
                w[r] = acc;
            }
        } else {
            let i = q - self.data.n_struct;
            for r in 0..m {
                w[r] = self.binv[r * m + i];
            }
        }
    }

    /// d = c - c_B binv A  (full recompute)
    fn recompute_duals(&mut self) {
        let m = self.data.m;
        let mut y = vec![0.0; m];
        for r in 0..m {
            let cb = self.costs[self.basis[r] as usize];
            if cb == 0.0 {
                continue;
            }
            let row = &self.binv[r * m..(r + 1) * m];
            for (yk, &a) in y.iter_mut().zip(row) {
                *yk += cb * a;
            }
        }
        for j in 0..self.data.n_struct {
            let (rows, vals) = self.data.col(j);
            let mut acc = self.costs[j];
            for (&i, &a) in rows.iter().zip(vals) {
                acc -= a * y[i as usize];
            }
            self.d[j] = acc;
        }
        for i in 0..m {
            self.d[self.data.n_struct + i] = self.costs[self.data.n_struct + i] - y[i];
        }
    }

    fn dual_tol(&self) -> f64 {
        let cmax = self
            .costs
            .iter()
            .fold(0.0f64, |acc, &c| acc.max(c.abs()));
        1e-9 * (1.0 + cmax)
    }

    fn price(&self) -> Option<(usize, f64)> {
        let dtol = self.dual_tol();
        let mut best: Option<(usize, f64, f64)> = None; // (col, dir, score)
        for j in 0..self.data.n_total() {
            if self.in_basis[j] >= 0 || self.lo[j] == self.hi[j] {
                continue;
            }
            let dj = self.d[j];
            let dir = if !self.at_upper[j] && dj < -dtol {
                1.0
            } else if self.at_upper[j] && dj > dtol {
                -1.0
            } else {
                continue;
            };
            if self.bland {
                return Some((j, dir));
            }
            let score = dj.abs();
            if best.map_or(true, |(_, _, s)| score > s) {
                best = Some((j, dir, score));
            }
        }
        best.map(|(j, dir, _)| (j, dir))
    }

    /// One simplex step with entering column q moving in direction `dir`.
    fn step(&mut self, q: usize, dir: f64, w: &mut [f64]) -> Step {
        let m = self.data.m;
        self.ftran(q, w);

        // two-pass Harris ratio test. Pass 1 finds the smallest step at
        // which some blocking variable would exceed its bound by more than
        // its own feasibility slack; pass 2 picks the most stable pivot
        // (largest |w|) among rows blocking at or before that step, so any
        // overshoot of another row is bounded by its slack in value units.
        let flip_t = self.hi[q] - self.lo[q]; // may be +inf
        let mut t_relax = f64::INFINITY;
        let mut candidates: Vec<(usize, f64)> = Vec::new(); // (row, exact t)
        for r in 0..m {
            let wr = w[r];
            if wr.abs() <= PIVOT_TOL {
                continue;
            }
            let rate = -dir * wr; // d xb_r / dt
            let (t, bound_scale) = if rate < 0.0 {
                let lo = self.row_lo[r];
                if lo == f64::NEG_INFINITY {
                    continue;
                }
                ((self.xb[r] - lo) / -rate, lo.abs())
            } else {
                let hi = self.row_hi[r];
                if hi == f64::INFINITY {
                    continue;
                }
                ((hi - self.xb[r]) / rate, hi.abs())
            };
            let t = t.max(0.0);
            let slack = self.feas_tol * (1.0 + bound_scale);
            t_relax = t_relax.min(t + slack / wr.abs());
            candidates.push((r, t));
        }

        if flip_t <= t_relax {
            if flip_t == f64::INFINITY {
                return Step::Unbounded;
            }
            // bound flip, no basis change
            for r in 0..m {
                if w[r] != 0.0 {
                    self.xb[r] -= dir * flip_t * w[r];
                }
            }
            self.at_upper[q] = !self.at_upper[q];
            self.track_degeneracy(flip_t);
            return Step::Moved;
        }
        if t_relax == f64::INFINITY {
            return Step::Unbounded;
        }

        let mut leave = usize::MAX;
        let mut best_w = 0.0;
        let mut best_col = u32::MAX;
        for &(r, t) in &candidates {
            if t > t_relax {
                continue;
            }
            if self.bland {
                let col = self.basis[r];
                if col < best_col {
                    best_col = col;
                    leave = r;
                }
            } else {
                let a = w[r].abs();
                if a > best_w {
                    best_w = a;
                    leave = r;
                }
            }
        }
        let r = leave;
        let wr = w[r];
        let t = {
            // recompute the exact ratio for the chosen row
            let rate = -dir * wr;
            let t = if rate < 0.0 {
                (self.xb[r] - self.row_lo[r]) / -rate
            } else {
                (self.row_hi[r] - self.xb[r]) / rate
            };
            t.max(0.0)
        };

        // update basic values and swap basis
        for i in 0..m {
            if i != r && w[i] != 0.0 {
                self.xb[i] -= dir * t * w[i];
            }
        }
        let entering_value = self.nonbasic_value(q) + dir * t;
        let leaving = self.basis[r] as usize;
        // the leaving variable lands on the effective bound it blocked at,
        // which is always one of its true bounds; park it on that side
        let rate = -dir * wr;
        let landed = if rate < 0.0 { self.row_lo[r] } else { self.row_hi[r] };
        self.at_upper[leaving] =
            (landed - self.hi[leaving]).abs() <= (landed - self.lo[leaving]).abs();
        self.in_basis[leaving] = -1;
        self.in_basis[q] = r as i32;
        self.basis[r] = q as u32;
        self.xb[r] = entering_value;
        // the slot now tracks the entering variable's bounds (the entering
        // column is feasible, so its effective bounds are its true bounds)
        self.row_lo[r] = self.lo[q];
        self.row_hi[r] = self.hi[q];

        // binv := E binv
        let inv_piv = 1.0 / wr;
        {
            let (head, tail) = self.binv.split_at_mut(r * m);
            let (prow, rest) = tail.split_at_mut(m);
            for a in prow.iter_mut() {
                *a *= inv_piv;
            }
            for (i, chunk) in head.chunks_exact_mut(m).enumerate() {
                let f = w[i];
                if f != 0.0 {
                    for (c, &p) in chunk.iter_mut().zip(prow.iter()) {
                        *c -= f * p;
                    }
                }
            }
            for (k, chunk) in rest.chunks_exact_mut(m).enumerate() {
                let f = w[r + 1 + k];
                if f != 0.0 {
                    for (c, &p) in chunk.iter_mut().zip(prow.iter()) {
                        *c -= f * p;
                    }
                }
            }
        }

        // reduced costs: d_j -= d_q * (binv_new[r] . A_j)
        let dq = self.d[q];
        if dq != 0.0 {
            let prow = &self.binv[r * m..(r + 1) * m];
            for j in 0..self.data.n_struct {
                if self.in_basis[j] >= 0 && j != q {
                    continue;
                }
                let (rows, vals) = self.data.col(j);
                let mut acc = 0.0;
                for (&i, &a) in rows.iter().zip(vals) {
                    acc += a * prow[i as usize];
                }
                if acc != 0.0 {
                    self.d[j] -= dq * acc;
                }
            }
            for i in 0..m {
                let j = self.data.n_struct + i;
                if self.in_basis[j] >= 0 && j != q {
                    continue;
                }
                let acc = prow[i];
                if acc != 0.0 {
                    self.d[j] -= dq * acc;
                }
            }
        }
        self.d[q] = 0.0;
        self.track_degeneracy(t);
        Step::Moved
    }

    fn track_degeneracy(&mut self, t: f64) {
        if t <= 1e-12 {
            self.degenerate_run += 1;
            if self.degenerate_run > 60 {
                self.bland = true;
            }
        } else {
            self.degenerate_run = 0;
            self.bland = self.force_bland;
        }
    }

    fn violation(&self, r: usize) -> f64 {
        let j = self.basis[r] as usize;
        let x = self.xb[r];
        let tol = self.feas_tol * (1.0 + self.lo[j].abs().min(self.hi[j].abs()));
        if x < self.lo[j] - tol {
            x - self.lo[j]
        } else if x > self.hi[j] + tol {
            x - self.hi[j]
        } else {
            0.0
        }
    }

    /// Phase-1 costs and relaxed per-row ratio bounds from the current
    /// infeasible set. Returns the number of infeasible rows.
    fn set_phase1_state(&mut self) -> usize {
        for c in self.costs.iter_mut() {
            *c = 0.0;
        }
        let mut count = 0;
        for r in 0..self.data.m {
            let j = self.basis[r] as usize;
            let v = self.violation(r);
            if v > 0.0 {
                self.costs[j] = 1.0;
                self.row_lo[r] = self.hi[j];
                self.row_hi[r] = f64::INFINITY;
                count += 1;
            } else if v < 0.0 {
                self.costs[j] = -1.0;
                self.row_lo[r] = f64::NEG_INFINITY;
                self.row_hi[r] = self.lo[j];
                count += 1;
            } else {
                self.row_lo[r] = self.lo[j];
                self.row_hi[r] = self.hi[j];
            }
        }
        count
    }

    fn set_phase2_state(&mut self) {
        for j in 0..self.data.n_total() {
            self.costs[j] = if j < self.data.n_struct {
                self.data.cost[j]
            } else {
                0.0
            };
        }
        for r in 0..self.data.m {
            let j = self.basis[r] as usize;
            self.row_lo[r] = self.lo[j];
            self.row_hi[r] = self.hi[j];
        }
    }

    fn objective(&self) -> f64 {
        let mut obj = 0.0;
        for j in 0..self.data.n_struct {
            let c = self.data.cost[j];
            if c == 0.0 {
                continue;
            }
            let x = if self.in_basis[j] >= 0 {
                self.xb[self.in_basis[j] as usize]
            } else {
                self.nonbasic_value(j)
            };
            obj += c * x;
        }
        obj
    }

    fn extract(&self, status: LpStatus) -> LpOutcome {
        let mut x = vec![0.0; self.data.n_total()];
        for (j, v) in x.iter_mut().enumerate() {
            *v = if self.in_basis[j] >= 0 {
                self.xb[self.in_basis[j] as usize]
            } else {
                self.nonbasic_value(j)
            };
        }
        LpOutcome {
            status,
            obj: self.objective(),
            x,
            basis: Basis {
                cols: self.basis.clone(),
                at_upper: self.at_upper.clone(),
            },
            iterations: self.iterations,
        }
    }
}

/// Rebuild the dense inverse for `target` inside the workspace, repairing
/// the cached inverse column-by-column when it is close, or refactorizing
/// from scratch. Returns false on a singular basis.
fn ensure_binv(ws: &mut Workspace, data: &LpData, target: &[u32]) -> bool {
    let m = data.m;
    if ws.valid && ws.m == m && ws.basis == target {
        return true;
    }
    if ws.valid && ws.m == m {
        let mut pending: Vec<usize> = (0..m).filter(|&r| ws.basis[r] != target[r]).collect();
        if pending.len() <= m / 3 {
            let mut w = vec![0.0; m];
            let mut progress = true;
            while !pending.is_empty() && progress {
                progress = false;
                let mut idx = 0;
                while idx < pending.len() {
                    let r = pending[idx];
                    let q = target[r] as usize;
                    ftran_raw(data, &ws.binv, q, &mut w);
                    if w[r].abs() > 1e-7 {
                        pivot_binv(&mut ws.binv, m, r, &w);
                        ws.basis[r] = target[r];
                        pending.swap_remove(idx);
                        progress = true;
                    } else {
                        idx += 1;
                    }
                }
            }
            if pending.is_empty() {
                return true;
            }
        }
    }
    // full refactorization via Gauss-Jordan with partial pivoting
    let mut bmat = vec![0.0; m * m]; // column j of basis in bmat[.., j]
    for (slot, &colid) in target.iter().enumerate() {
        let j = colid as usize;
        if j < data.n_struct {
            let (rows, vals) = data.col(j);
            for (&i, &a) in rows.iter().zip(vals) {
                bmat[i as usize * m + slot] = a;
            }
        } else {
            bmat[(j - data.n_struct) * m + slot] = 1.0;
        }
    }
    let mut inv = vec![0.0; m * m];
    for r in 0..m {
        inv[r * m + r] = 1.0;
    }
    for k in 0..m {
        let mut piv_row = k;
        let mut piv_val = bmat[k * m + k].abs();
        for r in k + 1..m {
            let v = bmat[r * m + k].abs();
            if v > piv_val {
                piv_val = v;
                piv_row = r;
            }
        }
        if piv_val < 1e-12 {
            ws.valid = false;
            return false;
        }
        if piv_row != k {
            for c in 0..m {
                bmat.swap(k * m + c, piv_row * m + c);
                inv.swap(k * m + c, piv_row * m + c);
            }
        }
        let p = bmat[k * m + k];
        let invp = 1.0 / p;
        for c in 0..m {
            bmat[k * m + c] *= invp;
            inv[k * m + c] *= invp;
        }
        for r in 0..m {
            if r == k {
                continue;
            }
            let f = bmat[r * m + k];
            if f != 0.0 {
                for c in 0..m {
                    bmat[r * m + c] -= f * bmat[k * m + c];
                    inv[r * m + c] -= f * inv[k * m + c];
                }
            }
        }
    }
    ws.m = m;
    ws.binv = inv;
    ws.basis = target.to_vec();
    ws.valid = true;
    true
}

fn ftran_raw(data: &LpData, binv: &[f64], q: usize, w: &mut [f64]) {
    let m = data.m;
    if q < data.n_struct {
        let (rows, vals) = data.col(q);
        for r in 0..m {
            let row = &binv[r * m..(r + 1) * m];
            let mut acc = 0.0;
            for (&i, &a) in rows.iter().zip(vals) {
                acc += a * row[i as usize];
            }
            w[r] = acc;
        }
    } else {
        let i = q - data.n_struct;
        for r in 0..m {
            w[r] = binv[r * m + i];
        }
    }
}

fn pivot_binv(binv: &mut [f64], m: usize, r: usize, w: &[f64]) {
    let inv_piv = 1.0 / w[r];
    let (head, tail) = binv.split_at_mut(r * m);
    let (prow, rest) = tail.split_at_mut(m);
    for a in prow.iter_mut() {
        *a *= inv_piv;
    }
    for (i, chunk) in head.chunks_exact_mut(m).enumerate() {
        let f = w[i];
        if f != 0.0 {
            for (c, &p) in chunk.iter_mut().zip(prow.iter()) {
                *c -= f * p;
            }
        }
    }
    for (k, chunk) in rest.chunks_exact_mut(m).enumerate() {
        let f = w[r + 1 + k];
        if f != 0.0 {
            for (c, &p) in chunk.iter_mut().zip(prow.iter()) {
                *c -= f * p;
            }
        }
    }
}

/// Solve an LP over the given bounds. `start` warm-starts from a previous
/// basis; `objective_floor` allows early exit at a proven lower bound.
pub(crate) fn solve_lp(
    data: &LpData,
    lo: &[f64],
    hi: &[f64],
    start: Option<&Basis>,
    ws: &mut Workspace,
    feas_tol: f64,
    objective_floor: Option<f64>,
) -> LpOutcome {
    let m = data.m;
    let n_total = data.n_total();

    let (basis_cols, mut at_upper) = match start {
        Some(b) if b.cols.len() == m && b.at_upper.len() == n_total => {
            (b.cols.clone(), b.at_upper.clone())
        }
        _ => {
            let cols: Vec<u32> = (0..m).map(|i| (data.n_struct + i) as u32).collect();
            (cols, vec![false; n_total])
        }
    };
    if !ensure_binv(ws, data, &basis_cols) {
        // singular warm basis: fall back to the slack basis
        let cols: Vec<u32> = (0..m).map(|i| (data.n_struct + i) as u32).collect();
        at_upper = vec![false; n_total];
        if !ensure_binv(ws, data, &cols) {
            return LpOutcome {
                status: LpStatus::Numerical,
                obj: f64::INFINITY,
                x: vec![0.0; n_total],
                basis: Basis {
                    cols,
                    at_upper,
                },
                iterations: 0,
            };
        }
    }
    let basis_cols = ws.basis.clone();

    let mut in_basis = vec![-1i32; n_total];
    for (r, &c) in basis_cols.iter().enumerate() {
        in_basis[c as usize] = r as i32;
    }
    // nonbasic columns must rest on a finite bound
    for j in 0..n_total {
        if in_basis[j] >= 0 {
            continue;
        }
        if at_upper[j] && hi[j] == f64::INFINITY {
            at_upper[j] = false;
        }
        if !at_upper[j] && lo[j] == f64::NEG_INFINITY {
            at_upper[j] = true;
        }
        // prefer the bound with the smaller magnitude on cold starts
        if start.is_none() && lo[j].is_finite() && hi[j].is_finite() {
            at_upper[j] = hi[j].abs() < lo[j].abs();
        }
    }

    let mut s = Simplex {
        data,
        lo,
        hi,
        feas_tol,
        basis: basis_cols,
        in_basis,
        at_upper,
        binv: std::mem::take(&mut ws.binv),
        xb: vec![0.0; m],
        d: vec![0.0; n_total],
        costs: vec![0.0; n_total],
        row_lo: vec![0.0; m],
        row_hi: vec![0.0; m],
        bland: false,
        force_bland: false,
        degenerate_run: 0,
        iterations: 0,
    };
    s.recompute_xb();

    // a stalled solve (cycling through degenerate pivots) falls back to
    // Bland's rule permanently, trading speed for guaranteed termination
    let stall_threshold = 2_000 + 4 * (m + n_total);

    let max_iterations = 5_000 + 15 * (m + n_total);
    let mut w = vec![0.0; m];
    let mut outcome_status;
    let mut repair_rounds = 0;

    'rounds: loop {
        // ---- phase 1 ----
        let mut infeasible = s.set_phase1_state();
        if infeasible > 0 {
            s.recompute_duals();
        }
        loop {
            if infeasible == 0 {
                outcome_status = LpStatus::Optimal;
                break;
            }
            if s.iterations >= max_iterations {
                outcome_status = LpStatus::Numerical;
                break;
            }
            match s.price() {
                None => {
                    outcome_status = LpStatus::Infeasible;
                    break;
                }
                Some((q, dir)) => {
                    s.iterations += 1;
                    if s.iterations > stall_threshold && !s.force_bland {
                        s.force_bland = true;
                        s.bland = true;
                    }
                    match s.step(q, dir, &mut w) {
                        Step::Unbounded => {
                            // phase-1 objective is bounded below; treat as numerical
                            outcome_status = LpStatus::Numerical;
                            break;
                        }
                        Step::Moved => {}
                    }
                    let now = s.set_phase1_state();
                    if now != infeasible || now == 0 {
                        infeasible = now;
                        if now > 0 {
                            s.recompute_duals();
                        }
                    } else if s.iterations % 128 == 0 {
                        s.recompute_xb();
                        s.recompute_duals();
                        infeasible = s.set_phase1_state();
                        if infeasible > 0 {
                            s.recompute_duals();
                        }
                    }
                }
            }
        }

        if outcome_status != LpStatus::Optimal {
            break 'rounds;
        }

        // ---- phase 2 ----
        s.set_phase2_state();
        s.recompute_duals();
        loop {
            if let Some(floor) = objective_floor {
                if s.objective() <= floor + 1e-9 * (1.0 + floor.abs()) {
                    outcome_status = LpStatus::Optimal;
                    break;
                }
            }
            if s.iterations >= max_iterations {
                outcome_status = LpStatus::Numerical;
                break;
            }
            match s.price() {
                None => {
                    outcome_status = LpStatus::Optimal;
                    break;
                }
                Some((q, dir)) => {
                    s.iterations += 1;
                    if s.iterations > stall_threshold && !s.force_bland {
                        s.force_bland = true;
                        s.bland = true;
                    }
                    if let Step::Unbounded = s.step(q, dir, &mut w) {
                        outcome_status = LpStatus::Unbounded;
                        break;
                    }
                    if s.iterations % 256 == 0 {
                        s.recompute_xb();
                        s.recompute_duals();
                    }
                }
            }
        }

        if outcome_status != LpStatus::Optimal {
            break 'rounds;
        }

        // flush drift and audit feasibility; when the basis wandered outside
        // a bound, refactorize and re-enter phase 1 from the current basis
        s.recompute_xb();
        let worst = (0..m).map(|r| s.violation(r).abs()).fold(0.0f64, f64::max);
        if worst <= feas_tol * 100.0 {
            break 'rounds;
        }
        let target = s.basis.clone();
        let mut fresh = Workspace::new();
        if ensure_binv(&mut fresh, data, &target) {
            s.binv = fresh.binv;
            s.recompute_xb();
        }
        let worst = (0..m).map(|r| s.violation(r).abs()).fold(0.0f64, f64::max);
        if worst <= feas_tol * 1e3 {
            break 'rounds;
        }
        repair_rounds += 1;
        if repair_rounds > 3 {
            outcome_status = LpStatus::Numerical;
            break 'rounds;
        }
    }

    let out = s.extract(outcome_status);
    ws.binv = std::mem::take(&mut s.binv);
    ws.basis = s.basis.clone();
    ws.m = m;
    ws.valid = outcome_status != LpStatus::Numerical;
    out
}
