//! Small semidefinite-programming front end.
//!
//! Problems are written in terms of matrix-valued decision variables, affine matrix
//! expressions `C + Σ Lᵢ Vᵢ Rᵢ`, symmetric block constraints required to be PSD, linear
//! equalities and a linear objective. [`solve`] vectorizes the free entries of every variable,
//! hands the conic program to Clarabel and re-checks the returned point before reporting it
//! as optimal.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::linalg;

// Clarabel's SDP support needs a BLAS/LAPACK; the system OpenBLAS is linked through this crate.
extern crate openblas_src;

/// Default duality-gap tolerance.
pub const DEFAULT_TOL: f64 = 1e-8;
/// Default interior-point iteration cap.
pub const DEFAULT_MAX_ITER: u32 = 200;
/// Relative eigenvalue slack accepted when re-checking PSD blocks.
pub const PSD_SLACK: f64 = 1e-7;
/// Residual accepted when re-checking equalities.
pub const EQ_SLACK: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmiError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("unknown variable id {0}")]
    UnknownVar(usize),
    #[error("solver setup failed: {0}")]
    Setup(String),
    #[error("singular input: {0}")]
    Singular(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarShape {
    Scalar,
    Diagonal(usize),
    Symmetric(usize),
    Full(usize, usize),
}

impl VarShape {
    pub fn rows(&self) -> usize {
        match *self {
            Self::Scalar => 1,
            Self::Diagonal(n) | Self::Symmetric(n) => n,
            Self::Full(r, _) => r,
        }
    }

    pub fn cols(&self) -> usize {
        match *self {
            Self::Scalar => 1,
            Self::Diagonal(n) | Self::Symmetric(n) => n,
            Self::Full(_, c) => c,
        }
    }

    /// Number of free scalar entries.
    pub fn n_free(&self) -> usize {
        match *self {
            Self::Scalar => 1,
            Self::Diagonal(n) => n,
            Self::Symmetric(n) => n * (n + 1) / 2,
            Self::Full(r, c) => r * c,
        }
    }

    /// Matrix positions set to one by the `k`-th free entry.
    fn basis(&self, k: usize) -> Vec<(usize, usize)> {
        match *self {
            Self::Scalar => vec![(0, 0)],
            Self::Diagonal(_) => vec![(k, k)],
            Self::Symmetric(_) => {
                let (i, j) = upper_index(k);
                if i == j {
                    vec![(i, i)]
                } else {
                    vec![(i, j), (j, i)]
                }
            }
            Self::Full(r, _) => vec![(k % r, k / r)],
        }
    }

    /// Free-entry index of matrix position `(i, j)` and whether that position is free.
    #[cfg(test)]
    fn free_index(&self, i: usize, j: usize) -> Option<usize> {
        match *self {
            Self::Scalar => Some(0),
            Self::Diagonal(_) => (i == j).then_some(i),
            Self::Symmetric(_) => {
                let (a, b) = if i <= j { (i, j) } else { (j, i) };
                Some(b * (b + 1) / 2 + a)
            }
            Self::Full(r, _) => Some(j * r + i),
        }
    }
}

/// `(row, col)` of the `k`-th upper-triangular entry in column-major order.
fn upper_index(k: usize) -> (usize, usize) {
    let mut j = 0;
    while (j + 1) * (j + 2) / 2 <= k {
        j += 1;
    }
    (k - j * (j + 1) / 2, j)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixVar {
    pub name: String,
    pub shape: VarShape,
    offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct VarId(pub usize);

#[derive(Debug, Clone)]
enum Term {
    /// `L · V · R` with absent factors meaning identity.
    Product { var: VarId, left: Option<DMatrix<f64>>, right: Option<DMatrix<f64>> },
    /// `v · A` for a scalar variable.
    Scaled { var: VarId, coeff: DMatrix<f64> },
}

/// Affine matrix expression `constant + Σ terms`.
#[derive(Debug, Clone)]
pub struct AffineExpr {
    rows: usize,
    cols: usize,
    constant: DMatrix<f64>,
    terms: Vec<Term>,
}

impl AffineExpr {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, constant: DMatrix::zeros(rows, cols), terms: Vec::new() }
    }

    pub fn constant(c: DMatrix<f64>) -> Self {
        Self { rows: c.nrows(), cols: c.ncols(), constant: c, terms: Vec::new() }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn add_constant(mut self, c: &DMatrix<f64>) -> Self {
        assert_eq!(c.shape(), (self.rows, self.cols), "constant shape");
        self.constant += c;
        self
    }

    /// Adds `left · var · right`; `None` stands for an identity factor.
    pub fn add_product(mut self, var: VarId, left: Option<DMatrix<f64>>, right: Option<DMatrix<f64>>) -> Self {
        self.terms.push(Term::Product { var, left, right });
        self
    }

    pub fn add_var(self, var: VarId) -> Self {
        self.add_product(var, None, None)
    }

    /// Adds `var · coeff` for a scalar variable.
    pub fn add_scaled(mut self, var: VarId, coeff: DMatrix<f64>) -> Self {
        assert_eq!(coeff.shape(), (self.rows, self.cols), "coefficient shape");
        self.terms.push(Term::Scaled { var, coeff });
        self
    }
}

/// Symmetric block matrix `[Bᵢⱼ]` required to be PSD. Only blocks with `i ≤ j` are given;
/// lower blocks are the transposes and diagonal blocks are symmetrized.
#[derive(Debug, Clone)]
pub struct BlockLmi {
    sizes: Vec<usize>,
    blocks: Vec<((usize, usize), AffineExpr)>,
    pub label: String,
}

impl BlockLmi {
    pub fn new(label: impl Into<String>, sizes: &[usize]) -> Self {
        Self { sizes: sizes.to_vec(), blocks: Vec::new(), label: label.into() }
    }

    pub fn dim(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn set(mut self, i: usize, j: usize, expr: AffineExpr) -> Self {
        assert!(i <= j, "give upper blocks only");
        assert_eq!(expr.shape(), (self.sizes[i], self.sizes[j]), "block ({i},{j}) shape");
        self.blocks.push(((i, j), expr));
        self
    }

    fn offset(&self, i: usize) -> usize {
        self.sizes[..i].iter().sum()
    }
}

/// Scalar linear form `Σ ⟨Wᵥ, V⟩ + c` (entrywise inner products).
#[derive(Debug, Clone, Default)]
pub struct LinearForm {
    terms: Vec<(VarId, DMatrix<f64>)>,
    pub constant: f64,
}

impl LinearForm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(mut self, var: VarId, weight: DMatrix<f64>) -> Self {
        self.terms.push((var, weight));
        self
    }

    pub fn with_constant(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone)]
pub struct LmiProblem {
    vars: Vec<MatrixVar>,
    psd: Vec<BlockLmi>,
    nonneg: Vec<(String, LinearForm)>,
    eqs: Vec<(String, LinearForm)>,
    objective: LinearForm,
    sense: Sense,
}

impl Default for LmiProblem {
    fn default() -> Self {
        Self::new()
    }
}

impl LmiProblem {
    pub fn new() -> Self {
        Self {
            vars: Vec::new(),
            psd: Vec::new(),
            nonneg: Vec::new(),
            eqs: Vec::new(),
            objective: LinearForm::new(),
            sense: Sense::Minimize,
        }
    }

    pub fn add_var(&mut self, name: impl Into<String>, shape: VarShape) -> VarId {
        let offset = self.vars.last().map_or(0, |v| v.offset + v.shape.n_free());
        self.vars.push(MatrixVar { name: name.into(), shape, offset });
        VarId(self.vars.len() - 1)
    }

    pub fn var(&self, id: VarId) -> &MatrixVar {
        &self.vars[id.0]
    }

    pub fn n_free(&self) -> usize {
        self.vars.last().map_or(0, |v| v.offset + v.shape.n_free())
    }

    pub fn add_psd(&mut self, c: BlockLmi) {
        self.psd.push(c);
    }

    /// Requires `form ≥ 0`.
    pub fn add_nonneg(&mut self, label: impl Into<String>, form: LinearForm) {
        self.nonneg.push((label.into(), form));
    }

    /// Requires `form = 0`.
    pub fn add_eq(&mut self, label: impl Into<String>, form: LinearForm) {
        self.eqs.push((label.into(), form));
    }

    /// Requires every entry of `expr` to vanish. With `symmetric` set only the upper triangle
    /// is constrained, for expressions that are symmetric by construction.
    pub fn add_matrix_eq(&mut self, label: &str, expr: &AffineExpr, symmetric: bool) -> Result<(), LmiError> {
        let coeffs = self.expr_coefficients(expr)?;
        for j in 0..expr.cols {
            let last = if symmetric { (j + 1).min(expr.rows) } else { expr.rows };
            for i in 0..last {
                let mut form = LinearForm::new().with_constant(expr.constant[(i, j)]);
                for (&(v, k), m) in &coeffs {
                    let c = m[(i, j)];
                    if c != 0.0 {
                        let var = &self.vars[v];
                        let mut w = DMatrix::zeros(var.shape.rows(), var.shape.cols());
                        let (a, b) = var.shape.basis(k)[0];
                        w[(a, b)] = c;
                        form = form.add(VarId(v), w);
                    }
                }
                self.eqs.push((format!("{label}[{i},{j}]"), form));
            }
        }
        Ok(())
    }

    pub fn set_objective(&mut self, sense: Sense, form: LinearForm) {
        self.sense = sense;
        self.objective = form;
    }

    fn check_var(&self, id: VarId) -> Result<&MatrixVar, LmiError> {
        self.vars.get(id.0).ok_or(LmiError::UnknownVar(id.0))
    }

    /// Coefficient matrix of every free entry `(var, k)` appearing in `expr`.
    fn expr_coefficients(&self, expr: &AffineExpr) -> Result<BTreeMap<(usize, usize), DMatrix<f64>>, LmiError> {
        let mut out: BTreeMap<(usize, usize), DMatrix<f64>> = BTreeMap::new();
        for t in &expr.terms {
            match t {
                Term::Scaled { var, coeff } => {
                    let v = self.check_var(*var)?;
                    if v.shape != VarShape::Scalar {
                        return Err(LmiError::Dimension(format!("{} is not scalar", v.name)));
                    }
                    *out.entry((var.0, 0)).or_insert_with(|| DMatrix::zeros(expr.rows, expr.cols)) += coeff;
                }
                Term::Product { var, left, right } => {
                    let v = self.check_var(*var)?;
                    let (vr, vc) = (v.shape.rows(), v.shape.cols());
                    let lrows = left.as_ref().map_or(vr, |l| l.nrows());
                    let rcols = right.as_ref().map_or(vc, |r| r.ncols());
                    let ok = lrows == expr.rows
                        && rcols == expr.cols
                        && left.as_ref().is_none_or(|l| l.ncols() == vr)
                        && right.as_ref().is_none_or(|r| r.nrows() == vc);
                    if !ok {
                        return Err(LmiError::Dimension(format!(
                            "term with {} ({vr}×{vc}) does not fit a {}×{} expression",
                            v.name, expr.rows, expr.cols
                        )));
                    }
                    for k in 0..v.shape.n_free() {
                        let mut m = DMatrix::zeros(expr.rows, expr.cols);
                        for (i, j) in v.shape.basis(k) {
                            let lcol: DVector<f64> = match left {
                                Some(l) => l.column(i).into_owned(),
                                None => unit(expr.rows, i),
                            };
                            let rrow: DVector<f64> = match right {
                                Some(r) => r.row(j).transpose(),
                                None => unit(expr.cols, j),
                            };
                            m += &lcol * rrow.transpose();
                        }
                        if m.iter().any(|&x| x != 0.0) {
                            *out.entry((var.0, k)).or_insert_with(|| DMatrix::zeros(expr.rows, expr.cols)) += m;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Constant and per-entry coefficients of a full block constraint.
    fn block_coefficients(&self, c: &BlockLmi) -> Result<(DMatrix<f64>, BTreeMap<(usize, usize), DMatrix<f64>>), LmiError> {
        let n = c.dim();
        let mut constant = DMatrix::zeros(n, n);
        let mut coeffs: BTreeMap<(usize, usize), DMatrix<f64>> = BTreeMap::new();
        let place = |target: &mut DMatrix<f64>, i: usize, j: usize, m: &DMatrix<f64>| {
            let (oi, oj) = (c.offset(i), c.offset(j));
            if i == j {
                let s = linalg::symmetrize(m);
                let mut v = target.view_mut((oi, oi), (m.nrows(), m.ncols()));
                v += s;
            } else {
                {
                    let mut v = target.view_mut((oi, oj), (m.nrows(), m.ncols()));
                    v += m;
                }
                let mut v = target.view_mut((oj, oi), (m.ncols(), m.nrows()));
                v += m.transpose();
            }
        };
        for ((i, j), expr) in &c.blocks {
            place(&mut constant, *i, *j, &expr.constant);
            for (key, m) in self.expr_coefficients(expr)? {
                let entry = coeffs.entry(key).or_insert_with(|| DMatrix::zeros(n, n));
                place(entry, *i, *j, &m);
            }
        }
        Ok((constant, coeffs))
    }

    fn form_coefficients(&self, f: &LinearForm) -> Result<BTreeMap<usize, f64>, LmiError> {
        let mut out = BTreeMap::new();
        for (id, w) in &f.terms {
            let v = self.check_var(*id)?;
            if w.shape() != (v.shape.rows(), v.shape.cols()) {
                return Err(LmiError::Dimension(format!(
                    "weight {:?} for {} of shape {:?}",
                    w.shape(),
                    v.name,
                    v.shape
                )));
            }
            for k in 0..v.shape.n_free() {
                let c: f64 = v.shape.basis(k).iter().map(|&(i, j)| w[(i, j)]).sum();
                if c != 0.0 {
                    *out.entry(v.offset + k).or_insert(0.0) += c;
                }
            }
        }
        Ok(out)
    }

    fn values_from(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        self.vars
            .iter()
            .map(|v| {
                let mut m = DMatrix::zeros(v.shape.rows(), v.shape.cols());
                for k in 0..v.shape.n_free() {
                    for (i, j) in v.shape.basis(k) {
                        m[(i, j)] = x[v.offset + k];
                    }
                }
                m
            })
            .collect()
    }

    fn eval_form(&self, f: &LinearForm, values: &[DMatrix<f64>]) -> f64 {
        f.constant + f.terms.iter().map(|(id, w)| w.component_mul(&values[id.0]).sum()).sum::<f64>()
    }

    /// Value of a PSD block constraint at the given variable values.
    pub fn eval_block(&self, c: &BlockLmi, values: &[DMatrix<f64>]) -> Result<DMatrix<f64>, LmiError> {
        let (mut m, coeffs) = self.block_coefficients(c)?;
        for ((v, k), a) in coeffs {
            let (i, j) = self.vars[v].shape.basis(k)[0];
            m += a * values[v][(i, j)];
        }
        Ok(m)
    }

    /// Plain-text sparse dump: one line per nonzero `constraint var row col coeff`, where
    /// `var` is `name[i,j]` for a free entry or `const`, and `row col` index the constraint
    /// matrix (1×1 for scalar constraints; upper triangle only for PSD blocks).
    pub fn dump(&self) -> Result<String, LmiError> {
        let mut s = String::new();
        let _ = writeln!(s, "# constraint var row col coeff");
        let entry_name = |v: usize, k: usize| {
            let var = &self.vars[v];
            let (i, j) = var.shape.basis(k)[0];
            format!("{}[{i},{j}]", var.name)
        };
        for (ci, c) in self.psd.iter().enumerate() {
            let (constant, coeffs) = self.block_coefficients(c)?;
            let id = format!("psd{ci}:{}", c.label);
            write_upper(&mut s, &id, "const", &constant);
            for ((v, k), a) in &coeffs {
                write_upper(&mut s, &id, &entry_name(*v, *k), a);
            }
        }
        for (kind, list) in [("nonneg", &self.nonneg), ("eq", &self.eqs)] {
            for (ci, (label, f)) in list.iter().enumerate() {
                let id = format!("{kind}{ci}:{label}");
                if f.constant != 0.0 {
                    let _ = writeln!(s, "{id} const 0 0 {:.16e}", f.constant);
                }
                for (x, c) in self.form_coefficients(f)? {
                    let (v, k) = self.locate(x);
                    let _ = writeln!(s, "{id} {} 0 0 {c:.16e}", entry_name(v, k));
                }
            }
        }
        for (x, c) in self.form_coefficients(&self.objective)? {
            let (v, k) = self.locate(x);
            let _ = writeln!(s, "objective {} 0 0 {c:.16e}", entry_name(v, k));
        }
        Ok(s)
    }

    fn locate(&self, x: usize) -> (usize, usize) {
        let v = self.vars.iter().rposition(|v| v.offset <= x).unwrap_or(0);
        (v, x - self.vars[v].offset)
    }
}

fn write_upper(s: &mut String, id: &str, var: &str, m: &DMatrix<f64>) {
    for j in 0..m.ncols() {
        for i in 0..=j {
            let c = m[(i, j)];
            if c != 0.0 {
                let _ = writeln!(s, "{id} {var} {i} {j} {c:.16e}");
            }
        }
    }
}

fn unit(n: usize, i: usize) -> DVector<f64> {
    let mut v = DVector::zeros(n);
    v[i] = 1.0;
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LmiStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
    MaxIter,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SolverStats {
    pub iterations: u32,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub gap: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub solve_time_s: f64,
    /// Smallest scaled eigenvalue margin over PSD blocks at the returned point.
    pub worst_psd_margin: f64,
    pub worst_eq_residual: f64,
    pub reduced_accuracy: bool,
    pub solver_status: String,
}

#[derive(Debug, Clone)]
pub struct LmiSolution {
    pub status: LmiStatus,
    pub values: Vec<DMatrix<f64>>,
    pub names: Vec<String>,
    pub objective_value: f64,
    pub stats: SolverStats,
}

impl LmiSolution {
    pub fn value(&self, id: VarId) -> &DMatrix<f64> {
        &self.values[id.0]
    }

    pub fn scalar(&self, id: VarId) -> f64 {
        self.values[id.0][(0, 0)]
    }

    pub fn is_optimal(&self) -> bool {
        self.status == LmiStatus::Optimal
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: u32,
    pub verbose: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: DEFAULT_TOL, max_iter: DEFAULT_MAX_ITER, verbose: false }
    }
}

/// Solves the problem and certifies the returned point.
///
/// Scalar (1×1) constraints are passed as nonnegative-cone rows and larger blocks as
/// scaled upper-triangle PSD cones. A solver-reported solution is downgraded to
/// `NumericalFailure` if any PSD block has an eigenvalue below `−PSD_SLACK·(1 + ‖block‖)`
/// or any equality residual exceeds `EQ_SLACK·(1 + scale)`.
pub fn solve(p: &LmiProblem, opts: &SolveOptions) -> Result<LmiSolution, LmiError> {
    let nx = p.n_free();
    let mut rows_i = Vec::new();
    let mut cols_j = Vec::new();
    let mut vals = Vec::new();
    let mut b = Vec::new();
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();

    let mut push_row = |b: &mut Vec<f64>, coeffs: &BTreeMap<usize, f64>, constant: f64| {
        // s = b − A x with s = constant + Σ c x
        let r = b.len();
        b.push(constant);
        for (&x, &c) in coeffs {
            rows_i.push(r);
            cols_j.push(x);
            vals.push(-c);
        }
    };

    if !p.eqs.is_empty() {
        for (_, f) in &p.eqs {
            push_row(&mut b, &p.form_coefficients(f)?, f.constant);
        }
        cones.push(SupportedConeT::ZeroConeT(p.eqs.len()));
    }
    let mut scalar_rows = 0;
    for (_, f) in &p.nonneg {
        push_row(&mut b, &p.form_coefficients(f)?, f.constant);
        scalar_rows += 1;
    }
    let mut block_data = Vec::new();
    for c in &p.psd {
        let (constant, coeffs) = p.block_coefficients(c)?;
        if c.dim() == 1 {
            let map: BTreeMap<usize, f64> =
                coeffs.iter().map(|((v, k), a)| (p.vars[*v].offset + k, a[(0, 0)])).collect();
            push_row(&mut b, &map, constant[(0, 0)]);
            scalar_rows += 1;
        } else {
            block_data.push((constant, coeffs, c.dim()));
        }
    }
    if scalar_rows > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(scalar_rows));
    }
    for (constant, coeffs, n) in &block_data {
        let base = b.len();
        let mut idx = 0;
        for j in 0..*n {
            for i in 0..=j {
                let scale = if i == j { 1.0 } else { std::f64::consts::SQRT_2 };
                b.push(constant[(i, j)] * scale);
                for ((v, k), a) in coeffs {
                    let c = a[(i, j)];
                    if c != 0.0 {
                        rows_i.push(base + idx);
                        cols_j.push(p.vars[*v].offset + k);
                        vals.push(-c * scale);
                    }
                }
                idx += 1;
            }
        }
        cones.push(SupportedConeT::PSDTriangleConeT(*n));
    }

    let obj = p.form_coefficients(&p.objective)?;
    let sign = match p.sense {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };
    let mut q = vec![0.0; nx];
    for (x, c) in obj {
        q[x] = sign * c;
    }
    let a = CscMatrix::new_from_triplets(b.len(), nx, rows_i, cols_j, vals);
    let pmat = CscMatrix::zeros((nx, nx));
    let settings = DefaultSettingsBuilder::default()
        .verbose(opts.verbose)
        .max_iter(opts.max_iter)
        .tol_gap_abs(opts.tol)
        .tol_gap_rel(opts.tol)
        .build()
        .map_err(|e| LmiError::Setup(format!("{e:?}")))?;
    let mut solver =
        DefaultSolver::new(&pmat, &q, &a, &b, &cones, settings).map_err(|e| LmiError::Setup(format!("{e:?}")))?;
    solver.solve();
    let sol = &solver.solution;
    let values = p.values_from(&sol.x);
    let mut stats = SolverStats {
        iterations: sol.iterations,
        primal_objective: sign * sol.obj_val,
        dual_objective: sign * sol.obj_val_dual,
        gap: (sol.obj_val - sol.obj_val_dual).abs(),
        primal_residual: sol.r_prim,
        dual_residual: sol.r_dual,
        solve_time_s: sol.solve_time,
        reduced_accuracy: matches!(sol.status, SolverStatus::AlmostSolved),
        solver_status: format!("{:?}", sol.status),
        ..SolverStats::default()
    };
    let mut status = match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => LmiStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => LmiStatus::Infeasible,
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => LmiStatus::Unbounded,
        SolverStatus::MaxIterations | SolverStatus::MaxTime => LmiStatus::MaxIter,
        _ => LmiStatus::NumericalFailure,
    };
    let (margin, eq_res) = certify(p, &values)?;
    stats.worst_psd_margin = margin;
    stats.worst_eq_residual = eq_res;
    if status == LmiStatus::Optimal && (margin < -PSD_SLACK || eq_res > EQ_SLACK) {
        status = LmiStatus::NumericalFailure;
    }
    let objective_value = p.eval_form(&p.objective, &values);
    Ok(LmiSolution {
        status,
        values,
        names: p.vars.iter().map(|v| v.name.clone()).collect(),
        objective_value,
        stats,
    })
}

/// Worst scaled PSD margin `λmin/(1 + ‖block‖)` over blocks and scalar constraints, and worst
/// scaled equality residual.
fn certify(p: &LmiProblem, values: &[DMatrix<f64>]) -> Result<(f64, f64), LmiError> {
    let mut margin = f64::INFINITY;
    for c in &p.psd {
        let m = p.eval_block(c, values)?;
        let scale = 1.0 + linalg::max_abs(&m);
        margin = margin.min(linalg::min_eigenvalue(&m) / scale);
    }
    for (_, f) in &p.nonneg {
        let v = p.eval_form(f, values);
        margin = margin.min(v / (1.0 + form_scale(f, values)));
    }
    let mut eq_res: f64 = 0.0;
    for (_, f) in &p.eqs {
        let v = p.eval_form(f, values);
        eq_res = eq_res.max(v.abs() / (1.0 + form_scale(f, values)));
    }
    Ok((margin, eq_res))
}

fn form_scale(f: &LinearForm, values: &[DMatrix<f64>]) -> f64 {
    f.constant.abs() + f.terms.iter().map(|(id, w)| w.component_mul(&values[id.0]).abs().sum()).sum::<f64>()
}

/// Schur-complement lemma check used as a test oracle: returns the block test
/// `[A, B; Bᵀ, C] ⪰ 0` and the reduced test `C ≻ 0 ∧ A − B C⁻¹ Bᵀ ⪰ 0`.
pub fn schur_lemma_check(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, tol: f64) -> (bool, bool) {
    let (n, m) = (a.nrows(), c.nrows());
    let mut block = DMatrix::zeros(n + m, n + m);
    block.view_mut((0, 0), (n, n)).copy_from(a);
    block.view_mut((0, n), (n, m)).copy_from(b);
    block.view_mut((n, 0), (m, n)).copy_from(&b.transpose());
    block.view_mut((n, n), (m, m)).copy_from(c);
    let scale = 1.0 + linalg::max_abs(&block);
    let full = linalg::min_eigenvalue(&block) >= -tol * scale;
    let reduced = match c.clone().cholesky() {
        Some(ch) => {
            let s = a - b * ch.solve(&b.transpose());
            linalg::min_eigenvalue(&s) >= -tol * scale
        }
        None => false,
    };
    (full, reduced)
}

/// Both sides of the inversion identity `(Z + R)⁻¹ = Z⁻¹ − (Z + Z R⁻¹ Z)⁻¹`.
pub fn hua_identity(z: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), LmiError> {
    let inv = |m: &DMatrix<f64>, what: &str| {
        m.clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| LmiError::Singular(format!("{what} is not positive definite")))
    };
    let lhs = inv(&(z + r), "Z + R")?;
    let zi = inv(z, "Z")?;
    let ri = inv(r, "R")?;
    let rhs = &zi - inv(&(z + z * ri * z), "Z + Z R⁻¹ Z")?;
    Ok((linalg::symmetrize(&lhs), linalg::symmetrize(&rhs)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn trace_of_psd_variable_is_zero_at_optimum() {
        let mut p = LmiProblem::new();
        let s = p.add_var("S", VarShape::Symmetric(1));
        p.add_psd(BlockLmi::new("S", &[1]).set(0, 0, AffineExpr::zeros(1, 1).add_var(s)));
        p.set_objective(Sense::Minimize, LinearForm::new().add(s, one(1.0)));
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        assert!(sol.is_optimal());
        assert!(sol.objective_value.abs() < 1e-7);
    }

    #[test]
    fn two_by_two_lmi() {
        let mut p = LmiProblem::new();
        let t = p.add_var("t", VarShape::Scalar);
        let expr = AffineExpr::constant(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]))
            .add_scaled(t, DMatrix::identity(2, 2));
        p.add_psd(BlockLmi::new("tI", &[2]).set(0, 0, expr));
        p.set_objective(Sense::Minimize, LinearForm::new().add(t, one(1.0)));
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        assert!(sol.is_optimal());
        assert_relative_eq!(sol.scalar(t), 1.0, epsilon = 1e-6);
        assert!(sol.stats.gap <= 1e-6);
    }

    #[test]
    fn contradictory_constraints_are_infeasible() {
        let mut p = LmiProblem::new();
        let s = p.add_var("S", VarShape::Symmetric(2));
        p.add_psd(BlockLmi::new("S", &[2]).set(0, 0, AffineExpr::zeros(2, 2).add_var(s)));
        let neg = AffineExpr::constant(-DMatrix::identity(2, 2)).add_product(s, Some(-DMatrix::identity(2, 2)), None);
        p.add_psd(BlockLmi::new("-S-I", &[2]).set(0, 0, neg));
        p.set_objective(Sense::Minimize, LinearForm::new().add(s, DMatrix::identity(2, 2)));
        assert_eq!(solve(&p, &SolveOptions::default()).unwrap().status, LmiStatus::Infeasible);
    }

    #[test]
    fn maximize_with_equality_and_blocks() {
        // max x + y  s.t. [1, x; x, 1] ⪰ 0, y = 2 x  →  x = 1, y = 2
        let mut p = LmiProblem::new();
        let x = p.add_var("x", VarShape::Scalar);
        let y = p.add_var("y", VarShape::Scalar);
        let blk = BlockLmi::new("c", &[1, 1])
            .set(0, 0, AffineExpr::constant(one(1.0)))
            .set(0, 1, AffineExpr::zeros(1, 1).add_var(x))
            .set(1, 1, AffineExpr::constant(one(1.0)));
        p.add_psd(blk);
        p.add_eq("y=2x", LinearForm::new().add(y, one(1.0)).add(x, one(-2.0)));
        p.set_objective(Sense::Maximize, LinearForm::new().add(x, one(1.0)).add(y, one(1.0)));
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        assert!(sol.is_optimal());
        assert_relative_eq!(sol.scalar(x), 1.0, epsilon = 1e-6);
        assert_relative_eq!(sol.objective_value, 3.0, epsilon = 1e-6);
        let dump = p.dump().unwrap();
        assert!(dump.contains("psd0:c x[0,0] 0 1 1.0"));
        assert!(dump.contains("eq0:y=2x x[0,0] 0 0 -2.0"));
    }

    #[test]
    fn diagonal_and_full_variables_in_products() {
        // min tr(D) s.t. [D, K; Kᵀ, I] ⪰ 0 with K fixed by equality to A: D ⪰ diag(A Aᵀ) min at
        // D = diag of row norms² when D is diagonal and A has orthogonal rows.
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, -2.0]);
        let mut p = LmiProblem::new();
        let d = p.add_var("D", VarShape::Diagonal(2));
        let k = p.add_var("K", VarShape::Full(2, 2));
        p.add_psd(
            BlockLmi::new("c", &[2, 2])
                .set(0, 0, AffineExpr::zeros(2, 2).add_var(d))
                .set(0, 1, AffineExpr::zeros(2, 2).add_var(k))
                .set(1, 1, AffineExpr::constant(DMatrix::identity(2, 2))),
        );
        p.add_matrix_eq("K=A", &AffineExpr::constant(-a.clone()).add_var(k), false).unwrap();
        p.set_objective(Sense::Minimize, LinearForm::new().add(d, DMatrix::identity(2, 2)));
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        assert!(sol.is_optimal(), "{:?}", sol.stats);
        assert_relative_eq!(sol.value(k), &a, epsilon = 1e-6);
        assert_relative_eq!(sol.value(d)[(0, 0)], 2.0, epsilon = 1e-5);
        assert_relative_eq!(sol.value(d)[(1, 1)], 8.0, epsilon = 1e-5);
    }

    #[test]
    fn upper_index_enumeration() {
        let got: Vec<(usize, usize)> = (0..6).map(upper_index).collect();
        assert_eq!(got, vec![(0, 0), (0, 1), (1, 1), (0, 2), (1, 2), (2, 2)]);
        let s = VarShape::Symmetric(3);
        for k in 0..6 {
            let (i, j) = upper_index(k);
            assert_eq!(s.free_index(i, j), Some(k));
            assert_eq!(s.free_index(j, i), Some(k));
        }
    }

    #[test]
    fn schur_examples() {
        assert_eq!(schur_lemma_check(&one(2.0), &one(1.0), &one(1.0), 1e-12), (true, true));
        assert_eq!(schur_lemma_check(&one(0.5), &one(1.0), &one(1.0), 1e-12), (false, false));
        assert_eq!(schur_lemma_check(&one(-0.5), &one(0.0), &one(1.0), 1e-12), (false, false));
    }

    #[test]
    fn hua_examples() {
        let (l, r) = hua_identity(&one(1.0), &one(1.0)).unwrap();
        assert_relative_eq!(l[(0, 0)], 0.5);
        assert_relative_eq!(r[(0, 0)], 0.5, epsilon = 1e-15);
        let z = DMatrix::identity(2, 2) * 2.0;
        let rr = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0]));
        let (l, r) = hua_identity(&z, &rr).unwrap();
        assert_relative_eq!(l, r, epsilon = 1e-12);
        assert!(hua_identity(&DMatrix::zeros(2, 2), &rr).is_err());
    }
}
