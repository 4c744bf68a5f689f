//! Solver-agnostic linear matrix inequalities.
//!
//! A problem is a set of named matrix decision variables plus constraints of
//! the form `F(x) <= 0` or `F(x) >= 0` (semidefinite order), where `F` is an
//! affine symmetric matrix expression of the variables' free scalar slots.
//! Structured variables (symmetric, diagonal, block-replicated) expose only
//! their free parameters to the solver.
//!
//! Assembly keeps everything exactly symmetric by construction: lower-triangle
//! blocks are mirrored as transposes, never symmetrized numerically.

mod assemble;

pub use assemble::{
    add_containment, assemble_l2, assemble_origin_variant, assemble_synthesis,
    assemble_theorem1, SynthesisAssembly, Theorem1Params,
};

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Definiteness margin required of shape variables (`Y >= eps I`, diagonal
/// scaling entries `>= eps`); keeps solver output robustly verifiable.
pub const SPD_MARGIN: f64 = 1e-6;

/// Post-solve eigenvalue tolerance: a returned solution must satisfy every
/// constraint to this accuracy when re-evaluated independently.
pub const VERIFY_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    /// Full symmetric matrix; slots are the upper triangle, column-major.
    Symmetric,
    /// Dense rectangular matrix; slots are column-major entries.
    Rectangular,
    /// Diagonal matrix; slots are the diagonal.
    Diagonal,
    Scalar,
}

/// A named matrix decision variable occupying a contiguous slot range.
#[derive(Debug, Clone)]
pub struct DecisionVariable {
    pub name: String,
    pub kind: VarKind,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl DecisionVariable {
    pub fn n_slots(&self) -> usize {
        match self.kind {
            VarKind::Symmetric => self.rows * (self.rows + 1) / 2,
            VarKind::Rectangular => self.rows * self.cols,
            VarKind::Diagonal => self.rows,
            VarKind::Scalar => 1,
        }
    }

    /// Entries of the basis matrix for local slot `k` as `(row, col, value)`.
    fn basis_entries(&self, k: usize) -> Vec<(usize, usize, f64)> {
        match self.kind {
            VarKind::Symmetric => {
                let (i, j) = sym_slot_to_ij(k);
                if i == j {
                    vec![(i, i, 1.0)]
                } else {
                    vec![(i, j, 1.0), (j, i, 1.0)]
                }
            }
            VarKind::Rectangular => {
                let j = k / self.rows;
                let i = k % self.rows;
                vec![(i, j, 1.0)]
            }
            VarKind::Diagonal => vec![(k, k, 1.0)],
            VarKind::Scalar => vec![(0, 0, 1.0)],
        }
    }

    /// Reconstructs the matrix value from the full slot vector.
    pub fn unpack(&self, slots: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for k in 0..self.n_slots() {
            let v = slots[self.offset + k];
            for (i, j, c) in self.basis_entries(k) {
                m[(i, j)] = c * v;
            }
        }
        m
    }
}

/// Local slot index -> (i, j) with i <= j, column-major upper triangle.
fn sym_slot_to_ij(k: usize) -> (usize, usize) {
    let mut j = 0usize;
    let mut acc = 0usize;
    loop {
        if k < acc + j + 1 {
            return (k - acc, j);
        }
        acc += j + 1;
        j += 1;
    }
}

/// Lightweight copyable reference to a declared variable.
#[derive(Debug, Clone, Copy)]
pub struct VarHandle {
    pub id: usize,
    pub kind: VarKind,
    pub rows: usize,
    pub cols: usize,
}

/// One affine term `scale * L * V * R` (or `L * V' * R`).
#[derive(Debug, Clone)]
struct Term {
    scale: f64,
    left: DMatrix<f64>,
    var: VarHandle,
    transposed: bool,
    right: DMatrix<f64>,
}

/// Affine matrix expression: a constant plus a sum of [`Term`]s.
#[derive(Debug, Clone)]
pub struct MatExpr {
    rows: usize,
    cols: usize,
    constant: DMatrix<f64>,
    terms: Vec<Term>,
}

impl MatExpr {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            constant: DMatrix::zeros(rows, cols),
            terms: Vec::new(),
        }
    }

    pub fn constant(m: DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            constant: m,
            terms: Vec::new(),
        }
    }

    pub fn var(v: VarHandle) -> Self {
        Self {
            rows: v.rows,
            cols: v.cols,
            constant: DMatrix::zeros(v.rows, v.cols),
            terms: vec![Term {
                scale: 1.0,
                left: DMatrix::identity(v.rows, v.rows),
                var: v,
                transposed: false,
                right: DMatrix::identity(v.cols, v.cols),
            }],
        }
    }

    /// `outer x (lfac * V)` for a variable `V`; `outer[i][j]` places a copy of
    /// `lfac * V` at block `(i, j)`. Covers block-replicated structures like
    /// `I x F` and Kronecker factors like `(L W) x K`.
    pub fn kron_outer_var(outer: &DMatrix<f64>, lfac: &DMatrix<f64>, v: VarHandle) -> Self {
        assert_eq!(lfac.ncols(), v.rows, "kron_outer_var inner dimensions");
        let (br, bc) = (lfac.nrows(), v.cols);
        let rows = outer.nrows() * br;
        let cols = outer.ncols() * bc;
        let mut terms = Vec::new();
        for i in 0..outer.nrows() {
            for j in 0..outer.ncols() {
                let w = outer[(i, j)];
                if w == 0.0 {
                    continue;
                }
                // left = e_i x lfac, right = e_j' x I.
                let mut left = DMatrix::zeros(rows, lfac.ncols());
                left.view_mut((i * br, 0), (br, lfac.ncols())).copy_from(lfac);
                let mut right = DMatrix::zeros(bc, cols);
                right
                    .view_mut((0, j * bc), (bc, bc))
                    .copy_from(&DMatrix::identity(bc, bc));
                terms.push(Term {
                    scale: w,
                    left,
                    var: v,
                    transposed: false,
                    right,
                });
            }
        }
        Self {
            rows,
            cols,
            constant: DMatrix::zeros(rows, cols),
            terms,
        }
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn left_mul(mut self, l: &DMatrix<f64>) -> Self {
        assert_eq!(l.ncols(), self.rows, "left_mul dimensions");
        self.constant = l * &self.constant;
        for t in &mut self.terms {
            t.left = l * &t.left;
        }
        self.rows = l.nrows();
        self
    }

    pub fn right_mul(mut self, r: &DMatrix<f64>) -> Self {
        assert_eq!(self.cols, r.nrows(), "right_mul dimensions");
        self.constant = &self.constant * r;
        for t in &mut self.terms {
            t.right = &t.right * r;
        }
        self.cols = r.ncols();
        self
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.constant *= s;
        for t in &mut self.terms {
            t.scale *= s;
        }
        self
    }

    pub fn transpose(&self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            constant: self.constant.transpose(),
            terms: self
                .terms
                .iter()
                .map(|t| Term {
                    scale: t.scale,
                    left: t.right.transpose(),
                    var: t.var,
                    transposed: !t.transposed,
                    right: t.left.transpose(),
                })
                .collect(),
        }
    }

    /// `self + self'` for square expressions.
    pub fn he(self) -> Self {
        assert_eq!(self.rows, self.cols, "he() needs a square expression");
        let t = self.transpose();
        self + t
    }

    /// Numeric value at the given full slot vector.
    pub fn eval(&self, vars: &[DecisionVariable], slots: &[f64]) -> DMatrix<f64> {
        let mut out = self.constant.clone();
        for t in &self.terms {
            let v = vars[t.var.id].unpack(slots);
            let v = if t.transposed { v.transpose() } else { v };
            out += &t.left * v * &t.right * t.scale;
        }
        out
    }

    /// Scalarization: constant matrix plus per-slot coefficient matrices
    /// (global slot indices). Only slots actually touched appear.
    pub fn coefficients(
        &self,
        vars: &[DecisionVariable],
    ) -> (DMatrix<f64>, BTreeMap<usize, DMatrix<f64>>) {
        let mut coeffs: BTreeMap<usize, DMatrix<f64>> = BTreeMap::new();
        for t in &self.terms {
            let dv = &vars[t.var.id];
            for k in 0..dv.n_slots() {
                let mut add = DMatrix::zeros(self.rows, self.cols);
                for (bi, bj, c) in dv.basis_entries(k) {
                    let (bi, bj) = if t.transposed { (bj, bi) } else { (bi, bj) };
                    // L * (c e_bi e_bj') * R = c * L[:, bi] * R[bj, :].
                    let lcol = t.left.column(bi);
                    let rrow = t.right.row(bj);
                    for r in 0..self.rows {
                        for cc in 0..self.cols {
                            add[(r, cc)] += c * lcol[r] * rrow[cc];
                        }
                    }
                }
                if add.amax() == 0.0 {
                    continue;
                }
                let entry = coeffs
                    .entry(dv.offset + k)
                    .or_insert_with(|| DMatrix::zeros(self.rows, self.cols));
                *entry += add * t.scale;
            }
        }
        (self.constant.clone(), coeffs)
    }
}

impl std::ops::Add for MatExpr {
    type Output = MatExpr;
    fn add(mut self, rhs: MatExpr) -> MatExpr {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "add dimensions");
        self.constant += rhs.constant;
        self.terms.extend(rhs.terms);
        self
    }
}

impl std::ops::Sub for MatExpr {
    type Output = MatExpr;
    fn sub(self, rhs: MatExpr) -> MatExpr {
        self + rhs.scaled(-1.0)
    }
}

impl std::ops::Neg for MatExpr {
    type Output = MatExpr;
    fn neg(self) -> MatExpr {
        self.scaled(-1.0)
    }
}

/// Symmetric block matrix builder: set blocks on or below the diagonal, the
/// mirror image is filled with exact transposes.
pub struct SymBlock {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    blocks: Vec<Option<MatExpr>>,
}

impl SymBlock {
    pub fn new(dims: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(dims.len());
        let mut acc = 0;
        for &d in &dims {
            offsets.push(acc);
            acc += d;
        }
        let n = dims.len();
        Self {
            dims,
            offsets,
            blocks: vec![None; n * n],
        }
    }

    /// Sets block `(i, j)` with `i >= j` (lower triangle).
    pub fn set(&mut self, i: usize, j: usize, expr: MatExpr) {
        assert!(i >= j, "set lower-triangle blocks only");
        assert_eq!(expr.nrows(), self.dims[i], "block ({i},{j}) row dim");
        assert_eq!(expr.ncols(), self.dims[j], "block ({i},{j}) col dim");
        self.blocks[i * self.dims.len() + j] = Some(expr);
    }

    /// Flattens to a single square expression, mirroring the lower triangle.
    pub fn flatten(self) -> MatExpr {
        let total: usize = self.dims.iter().sum();
        let n = self.dims.len();
        let mut out = MatExpr::zeros(total, total);
        for i in 0..n {
            for j in 0..=i {
                let Some(expr) = self.blocks[i * n + j].clone() else {
                    continue;
                };
                out = out + embed(&expr, total, self.offsets[i], self.offsets[j]);
                if i != j {
                    out = out + embed(&expr.transpose(), total, self.offsets[j], self.offsets[i]);
                }
            }
        }
        out
    }
}

/// Places `expr` into a `total x total` expression at `(row_off, col_off)`.
fn embed(expr: &MatExpr, total: usize, row_off: usize, col_off: usize) -> MatExpr {
    let mut lift = DMatrix::zeros(total, expr.nrows());
    lift.view_mut((row_off, 0), (expr.nrows(), expr.nrows()))
        .copy_from(&DMatrix::identity(expr.nrows(), expr.nrows()));
    let mut drop = DMatrix::zeros(expr.ncols(), total);
    drop.view_mut((0, col_off), (expr.ncols(), expr.ncols()))
        .copy_from(&DMatrix::identity(expr.ncols(), expr.ncols()));
    expr.clone().left_mul(&lift).right_mul(&drop)
}

/// Required semidefinite sense of a constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    /// `F(x) <= 0`.
    NegSemidef,
    /// `F(x) >= 0`.
    PosSemidef,
}

#[derive(Debug, Clone)]
pub struct Constraint {
    pub label: String,
    pub expr: MatExpr,
    pub sense: Sense,
}

/// An assembled LMI feasibility/optimization problem.
#[derive(Debug, Clone, Default)]
pub struct LmiProblem {
    vars: Vec<DecisionVariable>,
    n_slots: usize,
    constraints: Vec<Constraint>,
    /// Scalar bounds `slot >= value` (solver-side linear rows).
    slot_lower_bounds: Vec<(usize, f64)>,
    /// Linear objective `min sum coeff * slot`; empty means pure feasibility.
    objective: Vec<(usize, f64)>,
    pub description: String,
    /// Named scalar parameters recorded at assembly time.
    pub meta: BTreeMap<String, f64>,
}

impl LmiProblem {
    pub fn new(description: impl Into<String>) -> Self {
        Self {
            description: description.into(),
            ..Self::default()
        }
    }

    fn add_var(&mut self, name: String, kind: VarKind, rows: usize, cols: usize) -> VarHandle {
        let offset = self.n_slots;
        let dv = DecisionVariable {
            name,
            kind,
            rows,
            cols,
            offset,
        };
        self.n_slots += dv.n_slots();
        let id = self.vars.len();
        self.vars.push(dv);
        VarHandle {
            id,
            kind,
            rows,
            cols,
        }
    }

    pub fn add_symmetric(&mut self, name: impl Into<String>, n: usize) -> VarHandle {
        self.add_var(name.into(), VarKind::Symmetric, n, n)
    }

    pub fn add_rectangular(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> VarHandle {
        self.add_var(name.into(), VarKind::Rectangular, rows, cols)
    }

    pub fn add_diagonal(&mut self, name: impl Into<String>, n: usize) -> VarHandle {
        self.add_var(name.into(), VarKind::Diagonal, n, n)
    }

    pub fn add_scalar(&mut self, name: impl Into<String>) -> VarHandle {
        self.add_var(name.into(), VarKind::Scalar, 1, 1)
    }

    pub fn constrain(&mut self, label: impl Into<String>, expr: MatExpr, sense: Sense) {
        assert_eq!(expr.nrows(), expr.ncols(), "constraints must be square");
        self.constraints.push(Constraint {
            label: label.into(),
            expr,
            sense,
        });
    }

    /// `V >= margin I` for a symmetric variable.
    pub fn require_spd(&mut self, v: VarHandle, margin: f64) {
        let name = &self.vars[v.id].name;
        let label = format!("spd[{name}]");
        let expr = MatExpr::var(v)
            - MatExpr::constant(DMatrix::identity(v.rows, v.rows) * margin);
        self.constrain(label, expr, Sense::PosSemidef);
    }

    /// Elementwise lower bound on a diagonal variable's entries.
    pub fn require_diag_lower(&mut self, v: VarHandle, bound: f64) {
        assert_eq!(self.vars[v.id].kind, VarKind::Diagonal);
        for k in 0..self.vars[v.id].n_slots() {
            self.slot_lower_bounds
                .push((self.vars[v.id].offset + k, bound));
        }
    }

    /// `min trace(V)` for a symmetric variable.
    pub fn set_objective_min_trace(&mut self, v: VarHandle) {
        assert_eq!(self.vars[v.id].kind, VarKind::Symmetric);
        let dv = &self.vars[v.id];
        let mut obj = Vec::new();
        for k in 0..dv.n_slots() {
            let (i, j) = sym_slot_to_ij(k);
            if i == j {
                obj.push((dv.offset + k, 1.0));
            }
        }
        self.objective = obj;
    }

    pub fn vars(&self) -> &[DecisionVariable] {
        &self.vars
    }

    pub fn n_slots(&self) -> usize {
        self.n_slots
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn slot_lower_bounds(&self) -> &[(usize, f64)] {
        &self.slot_lower_bounds
    }

    pub fn objective(&self) -> &[(usize, f64)] {
        &self.objective
    }

    pub fn var_by_name(&self, name: &str) -> Option<&DecisionVariable> {
        self.vars.iter().find(|v| v.name == name)
    }

    /// Matrix values of every variable at the given slot vector.
    pub fn unpack_all(&self, slots: &[f64]) -> BTreeMap<String, DMatrix<f64>> {
        self.vars
            .iter()
            .map(|v| (v.name.clone(), v.unpack(slots)))
            .collect()
    }

    /// Human-readable structure dump: variables, slots, constraint blocks.
    pub fn debug_dump(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let _ = writeln!(s, "problem: {}", self.description);
        for (k, v) in &self.meta {
            let _ = writeln!(s, "  param {k} = {v}");
        }
        let _ = writeln!(s, "  slots: {}", self.n_slots);
        for v in &self.vars {
            let _ = writeln!(
                s,
                "  var {} {:?} {}x{} @ {}..{}",
                v.name,
                v.kind,
                v.rows,
                v.cols,
                v.offset,
                v.offset + v.n_slots()
            );
        }
        for c in &self.constraints {
            let _ = writeln!(
                s,
                "  constraint {} ({}x{}) {}",
                c.label,
                c.expr.nrows(),
                c.expr.ncols(),
                match c.sense {
                    Sense::NegSemidef => "<= 0",
                    Sense::PosSemidef => ">= 0",
                }
            );
        }
        s
    }
}

/// Which block of a 2x2 symmetric block matrix is eliminated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchurPivot {
    /// Eliminate the leading `head x head` block.
    Head,
    /// Eliminate the trailing block.
    Tail,
}

/// Numeric Schur complement of a symmetric 2x2 block matrix split after row
/// `head`. With `pivot = Tail` returns `M11 - M12 M22^{-1} M12'`; used as a
/// verification oracle, never in assembly.
pub fn schur_reduce(m: &DMatrix<f64>, head: usize, pivot: SchurPivot) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if m.ncols() != n || head == 0 || head >= n {
        return Err(Error::dimension(format!(
            "schur_reduce: invalid split {head} of a {n}x{} matrix",
            m.ncols()
        )));
    }
    let tail = n - head;
    let m11 = m.view((0, 0), (head, head)).into_owned();
    let m12 = m.view((0, head), (head, tail)).into_owned();
    let m22 = m.view((head, head), (tail, tail)).into_owned();
    match pivot {
        SchurPivot::Tail => {
            let inv = invert_definite(&m22, "trailing pivot block")?;
            Ok(&m11 - &m12 * inv * m12.transpose())
        }
        SchurPivot::Head => {
            let inv = invert_definite(&m11, "leading pivot block")?;
            Ok(&m22 - m12.transpose() * inv * &m12)
        }
    }
}

fn invert_definite(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let scale = eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |a, &l| a.max(l.abs()))
        .max(1.0);
    if eig.eigenvalues.iter().any(|&l| l.abs() <= 1e-12 * scale) {
        return Err(Error::Solver(format!("schur_reduce: singular {what}")));
    }
    let inv_vals = eig.eigenvalues.map(|l| 1.0 / l);
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose())
}
