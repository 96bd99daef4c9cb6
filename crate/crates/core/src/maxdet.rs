//! Determinant-maximization programs over a symmetric block `H` and a
//! strictly lower-triangular block `B`:
//!
//! ```text
//! maximize    (1/2n) log2 det G(theta) - c0
//! subject to  p(theta) <= budget
//!             M_k(theta) >= 0        k = 1..K
//! ```
//!
//! with `G`, `M_k` affine symmetric-matrix maps and `p` an affine functional.
//! Maps are supplied as closures and compiled into sparse coefficient form by
//! probing; [`validate`] checks that the probes are consistent with an affine
//! map of the declared order.
//!
//! The solver is a primal path-following barrier method: for increasing `t`
//! it minimizes `-t ln det G - sum_k ln det M_k - ln(budget - p)` with damped
//! Newton steps. Each centered point yields a dual feasible point whose
//! duality gap certifies the reported rate.

use std::f64::consts::LN_2;
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{chol_logdet2, eigh, pd_floor, Cholesky, StrictLowerTri, SymMatrix};

pub type MatrixFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Layout of the decision vector `theta`: the lower triangle of `H` row by row,
/// then the free entries of `B` (in the order given by `b_slots`).
#[derive(Clone, Debug, PartialEq)]
pub struct VarLayout {
    n: usize,
    b_frozen: bool,
    /// `b_slots[k]` is the canonical (row-major strictly lower) index of the
    /// `B` entry stored in slot `k` of the `B` segment.
    b_slots: Vec<usize>,
}

impl VarLayout {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "block length must be at least 1");
        VarLayout { n, b_frozen: false, b_slots: (0..StrictLowerTri::free_len(n)).collect() }
    }

    /// `B` fixed at zero; only `H` is free.
    pub fn b_frozen(n: usize) -> Self {
        assert!(n >= 1, "block length must be at least 1");
        VarLayout { n, b_frozen: true, b_slots: Vec::new() }
    }

    /// Stores the `B` entries in a permuted order. `perm` must be a
    /// permutation of `0..n(n-1)/2`.
    pub fn with_b_permutation(mut self, perm: Vec<usize>) -> Result<Self> {
        let len = StrictLowerTri::free_len(self.n);
        let mut seen = vec![false; len];
        if self.b_frozen || perm.len() != len || perm.iter().any(|&k| k >= len || std::mem::replace(&mut seen[k], true)) {
            return Err(Error::MalformedInstance("B permutation is not a permutation of the free entries".into()));
        }
        self.b_slots = perm;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_b_frozen(&self) -> bool {
        self.b_frozen
    }

    pub fn num_h(&self) -> usize {
        self.n * (self.n + 1) / 2
    }

    pub fn num_b(&self) -> usize {
        self.b_slots.len()
    }

    pub fn dim(&self) -> usize {
        self.num_h() + self.num_b()
    }

    fn h_positions(&self) -> impl Iterator<Item = (usize, usize)> {
        let n = self.n;
        (0..n).flat_map(|i| (0..=i).map(move |j| (i, j)))
    }

    pub fn h_matrix(&self, theta: &[f64]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.n, self.n);
        for ((i, j), v) in self.h_positions().zip(theta) {
            h[(i, j)] = *v;
            h[(j, i)] = *v;
        }
        h
    }

    pub fn b_matrix(&self, theta: &[f64]) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.n, self.n);
        if self.b_slots.is_empty() {
            return b;
        }
        let pos: Vec<(usize, usize)> = StrictLowerTri::positions(self.n).collect();
        for (slot, &canon) in self.b_slots.iter().enumerate() {
            let (i, j) = pos[canon];
            b[(i, j)] = theta[self.num_h() + slot];
        }
        b
    }

    pub fn b_tri(&self, theta: &[f64]) -> StrictLowerTri {
        StrictLowerTri::from_matrix(&self.b_matrix(theta)).expect("square by construction")
    }

    /// Inverse of `h_matrix` / `b_matrix`. `B` is ignored when frozen.
    pub fn pack(&self, h: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
        let mut theta: Vec<f64> = self.h_positions().map(|(i, j)| h[(i, j)]).collect();
        let pos: Vec<(usize, usize)> = StrictLowerTri::positions(self.n).collect();
        theta.extend(self.b_slots.iter().map(|&canon| b[pos[canon]]));
        theta
    }
}

/// An affine symmetric-matrix map of a declared order.
#[derive(Clone)]
pub struct AffineMatrixMap {
    pub order: usize,
    pub eval: MatrixFn,
}

impl AffineMatrixMap {
    pub fn new(order: usize, f: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        AffineMatrixMap { order, eval: Arc::new(f) }
    }
}

impl fmt::Debug for AffineMatrixMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AffineMatrixMap(order {})", self.order)
    }
}

/// A determinant-maximization program.
#[derive(Clone)]
pub struct MaxDetInstance {
    pub layout: VarLayout,
    pub objective: AffineMatrixMap,
    pub objective_offset: f64,
    pub power: ScalarFn,
    pub power_budget: f64,
    pub lmis: Vec<AffineMatrixMap>,
    /// Strictly feasible starting point, if the builder knows one.
    pub start_hint: Option<Vec<f64>>,
}

impl fmt::Debug for MaxDetInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MaxDetInstance")
            .field("layout", &self.layout)
            .field("objective", &self.objective)
            .field("objective_offset", &self.objective_offset)
            .field("power_budget", &self.power_budget)
            .field("lmis", &self.lmis)
            .finish()
    }
}

impl MaxDetInstance {
    pub fn n(&self) -> usize {
        self.layout.n()
    }

    /// `(1/2n) log2 det G(theta) - c0`, straight from the closure.
    pub fn objective_value(&self, theta: &[f64]) -> Result<f64> {
        let g = SymMatrix::symmetrized((self.objective.eval)(theta));
        Ok(chol_logdet2(&g)? / (2.0 * self.n() as f64) - self.objective_offset)
    }

    /// Total barrier parameter: sum of LMI orders plus one for the power slack.
    pub fn constraint_dim(&self) -> usize {
        self.lmis.iter().map(|m| m.order).sum::<usize>() + 1
    }

    /// Bits-per-use scale of `ln det G`.
    fn bits_scale(&self) -> f64 {
        1.0 / (2.0 * self.n() as f64 * LN_2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveOptions {
    /// Certified optimality gap, bits per use.
    pub tol_gap: f64,
    /// Relative feasibility tolerance.
    pub tol_feas: f64,
    /// Newton steps, summed over all centerings.
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol_gap: 1e-6, tol_feas: 1e-8, max_iter: 500 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    MaxIterations,
    Infeasible,
    NumericalFailure,
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SolveStatus::Optimal => "Optimal",
            SolveStatus::MaxIterations => "MaxIterations",
            SolveStatus::Infeasible => "Infeasible",
            SolveStatus::NumericalFailure => "NumericalFailure",
        };
        f.write_str(s)
    }
}

/// Dual point in objective (bits per use) units: `lmi[k]` pairs with `M_k`,
/// `power` with the budget constraint.
#[derive(Clone, Debug)]
pub struct DualPoint {
    pub lmi: Vec<DMatrix<f64>>,
    pub power: f64,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub rate: f64,
    pub theta: Vec<f64>,
    pub h_opt: SymMatrix,
    pub b_opt: StrictLowerTri,
    /// Duality gap of the final dual point, bits per use.
    pub gap: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub outer_iterations: usize,
    pub wall_time: Duration,
    /// Objective after each centering.
    pub history: Vec<f64>,
    pub duals: Option<DualPoint>,
    pub detail: String,
}

// ---------------------------------------------------------------------------
// Compiled sparse form

#[derive(Clone, Debug)]
struct CompiledMap {
    order: usize,
    constant: DMatrix<f64>,
    /// Full (both triangles) nonzero entries of each coefficient matrix.
    coeffs: Vec<Vec<(usize, usize, f64)>>,
}

impl CompiledMap {
    fn compile(map: &AffineMatrixMap, dim: usize) -> CompiledMap {
        let mut theta = vec![0.0; dim];
        let constant = (map.eval)(&theta);
        let coeffs = (0..dim)
            .map(|i| {
                theta[i] = 1.0;
                let d = (map.eval)(&theta) - &constant;
                theta[i] = 0.0;
                let mut e = Vec::new();
                for c in 0..d.ncols() {
                    for r in 0..d.nrows() {
                        let v = 0.5 * (d[(r, c)] + d[(c, r)]);
                        if v != 0.0 {
                            e.push((r, c, v));
                        }
                    }
                }
                e
            })
            .collect();
        CompiledMap { order: map.order, constant, coeffs }
    }

    /// The linear part applied to `d`.
    fn linear(&self, d: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.order, self.order);
        for (coef, &x) in self.coeffs.iter().zip(d) {
            if x != 0.0 {
                for &(r, c, v) in coef {
                    m[(r, c)] += v * x;
                }
            }
        }
        m
    }

    fn eval(&self, theta: &[f64]) -> DMatrix<f64> {
        let mut m = self.constant.clone();
        for (coef, &x) in self.coeffs.iter().zip(theta) {
            if x != 0.0 {
                for &(r, c, v) in coef {
                    m[(r, c)] += v * x;
                }
            }
        }
        m
    }
}

#[derive(Clone, Debug)]
struct Compiled {
    dim: usize,
    objective: CompiledMap,
    lmis: Vec<CompiledMap>,
    power_const: f64,
    power_grad: Vec<f64>,
    budget: f64,
    bits: f64,
    offset: f64,
    n: usize,
}

impl Compiled {
    fn new(inst: &MaxDetInstance) -> Compiled {
        let dim = inst.layout.dim();
        let mut theta = vec![0.0; dim];
        let power_const = (inst.power)(&theta);
        let power_grad = (0..dim)
            .map(|i| {
                theta[i] = 1.0;
                let v = (inst.power)(&theta) - power_const;
                theta[i] = 0.0;
                v
            })
            .collect();
        Compiled {
            dim,
            objective: CompiledMap::compile(&inst.objective, dim),
            lmis: inst.lmis.iter().map(|m| CompiledMap::compile(m, dim)).collect(),
            power_const,
            power_grad,
            budget: inst.power_budget,
            bits: inst.bits_scale(),
            offset: inst.objective_offset,
            n: inst.n(),
        }
    }

    fn power(&self, theta: &[f64]) -> f64 {
        self.power_const + self.power_grad.iter().zip(theta).map(|(a, x)| a * x).sum::<f64>()
    }

    fn constraint_dim(&self) -> usize {
        self.lmis.iter().map(|m| m.order).sum::<usize>() + 1
    }
}

/// Factorizations of every matrix at one point.
struct PointState {
    g: Cholesky,
    lmis: Vec<Cholesky>,
    slack: f64,
}

impl PointState {
    /// `None` when the point is outside the barrier domain.
    fn at(c: &Compiled, theta: &[f64]) -> Option<PointState> {
        let slack = c.budget - c.power(theta);
        if !(slack > 0.0) {
            return None;
        }
        let g = Cholesky::with_floor(&c.objective.eval(theta), 0.0).ok()?;
        let lmis = c.lmis.iter().map(|m| Cholesky::with_floor(&m.eval(theta), 0.0).ok()).collect::<Option<Vec<_>>>()?;
        Some(PointState { g, lmis, slack })
    }

    fn objective_bits(&self, c: &Compiled) -> f64 {
        self.g.logdet2() / (2.0 * c.n as f64) - c.offset
    }
}

/// The barrier along `theta + s d` relative to its value at `s = 0`. With
/// `M = L L^T` and `mu` the eigenvalues of `L^-1 M_lin(d) L^-T`,
/// `ln det M(theta + s d) - ln det M(theta) = sum ln(1 + s mu)`, which keeps
/// full relative accuracy even when the barrier itself is huge.
struct LineModel {
    terms: Vec<(f64, Vec<f64>)>,
    /// Relative decrease of the power slack per unit step.
    slack_rate: f64,
}

impl LineModel {
    fn new(c: &Compiled, st: &PointState, dir: &[f64], t: f64) -> Option<LineModel> {
        let spectrum = |map: &CompiledMap, chol: &Cholesky| -> Option<Vec<f64>> {
            let l = chol.l();
            let y = l.solve_lower_triangular(&map.linear(dir))?;
            let x = l.solve_lower_triangular(&y.transpose())?;
            let x = (&x + x.transpose()) * 0.5;
            Some(x.symmetric_eigenvalues().iter().copied().collect())
        };
        let mut terms = vec![(t, spectrum(&c.objective, &st.g)?)];
        for (map, chol) in c.lmis.iter().zip(&st.lmis) {
            terms.push((1.0, spectrum(map, chol)?));
        }
        let dp: f64 = c.power_grad.iter().zip(dir).map(|(a, d)| a * d).sum();
        Some(LineModel { terms, slack_rate: dp / st.slack })
    }

    /// `phi(theta + s d) - phi(theta)`; `+inf` outside the domain.
    fn delta(&self, s: f64) -> f64 {
        let mut total = 0.0;
        for (w, mu) in &self.terms {
            for &m in mu {
                let arg = s * m;
                if !(arg > -1.0) {
                    return f64::INFINITY;
                }
                total -= w * arg.ln_1p();
            }
        }
        let arg = -s * self.slack_rate;
        if !(arg > -1.0) {
            return f64::INFINITY;
        }
        total - arg.ln_1p()
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = m[(i, j)];
        }
    }
    out
}

/// Adds `w * tr(S F_i)` to `grad` and `w * tr(S F_i S F_j)` to `hess`.
fn accumulate_logdet_terms(map: &CompiledMap, inv: &DMatrix<f64>, w: f64, grad: &mut [f64], hess: Option<&mut DMatrix<f64>>) {
    let m = map.order;
    let s = row_major(inv);
    for (g, coef) in grad.iter_mut().zip(&map.coeffs) {
        *g += w * coef.iter().map(|&(r, c, v)| v * s[r * m + c]).sum::<f64>();
    }
    let Some(hess) = hess else { return };
    let dim = map.coeffs.len();
    let active: Vec<usize> = (0..dim).filter(|&i| !map.coeffs[i].is_empty()).collect();
    for (ai, &i) in active.iter().enumerate() {
        let fi = &map.coeffs[i];
        for &j in &active[ai..] {
            let fj = &map.coeffs[j];
            let mut acc = 0.0;
            for &(a, b, ci) in fi {
                for &(p, q, dj) in fj {
                    acc += ci * dj * s[b * m + p] * s[q * m + a];
                }
            }
            hess[(i, j)] += w * acc;
        }
    }
}

/// Gradient and Hessian of the barrier function at parameter `t`.
fn barrier_derivatives(c: &Compiled, st: &PointState, t: f64) -> (DVector<f64>, DMatrix<f64>) {
    let dim = c.dim;
    let mut grad = vec![0.0; dim];
    let mut hess = DMatrix::zeros(dim, dim);
    accumulate_logdet_terms(&c.objective, &st.g.inverse(), t, &mut grad, Some(&mut hess));
    for (map, chol) in c.lmis.iter().zip(&st.lmis) {
        accumulate_logdet_terms(map, &chol.inverse(), 1.0, &mut grad, Some(&mut hess));
    }
    // The log-det terms enter with a minus sign; their Hessian with a plus.
    for g in grad.iter_mut() {
        *g = -*g;
    }
    let inv_s = 1.0 / st.slack;
    for i in 0..dim {
        grad[i] += c.power_grad[i] * inv_s;
        let ai = c.power_grad[i] * inv_s;
        if ai != 0.0 {
            for j in i..dim {
                hess[(i, j)] += ai * c.power_grad[j] * inv_s;
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            hess[(i, j)] = hess[(j, i)];
        }
    }
    (DVector::from_vec(grad), hess)
}

/// Analytic gradient of `(1/2n) log2 det G(theta)` computed from the compiled
/// sparse form (the solver's own path).
pub fn objective_gradient(inst: &MaxDetInstance, theta: &[f64]) -> Result<Vec<f64>> {
    let c = Compiled::new(inst);
    let g = Cholesky::with_floor(&c.objective.eval(theta), 0.0)?;
    let mut grad = vec![0.0; c.dim];
    accumulate_logdet_terms(&c.objective, &g.inverse(), c.bits, &mut grad, None);
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Validation and starting point

const PROBES: usize = 3;
const AFFINE_RTOL: f64 = 1e-9;

fn probe_points(dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_a1f1);
    (0..2 * PROBES).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn check_matrix_map(name: &str, map: &AffineMatrixMap, dim: usize, probes: &[Vec<f64>]) -> Result<()> {
    let zero = vec![0.0; dim];
    let f0 = (map.eval)(&zero);
    if f0.nrows() != map.order || f0.ncols() != map.order {
        return Err(Error::MalformedInstance(format!(
            "{name}: declared order {} but map returns {}x{}",
            map.order,
            f0.nrows(),
            f0.ncols()
        )));
    }
    for pair in probes.chunks(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
        let (fa, fb, fab) = ((map.eval)(a), (map.eval)(b), (map.eval)(&ab));
        for m in [&fa, &fb, &fab] {
            if m.nrows() != map.order || m.ncols() != map.order {
                return Err(Error::MalformedInstance(format!("{name}: map changes shape between probes")));
            }
            let asym = (m - m.transpose()).norm();
            if asym > AFFINE_RTOL * (1.0 + m.norm()) {
                return Err(Error::MalformedInstance(format!("{name}: map output is not symmetric (asymmetry {asym:.3e})")));
            }
        }
        let second = (&fab - &fa - &fb + &f0).norm();
        let scale = 1.0 + fa.norm() + fb.norm() + fab.norm() + f0.norm();
        if second > AFFINE_RTOL * scale {
            return Err(Error::MalformedInstance(format!(
                "{name}: second difference {second:.3e} on an affineness probe; map is not affine"
            )));
        }
    }
    Ok(())
}

/// Checks dimensions and probes every map for affineness.
pub fn validate(inst: &MaxDetInstance) -> Result<()> {
    let dim = inst.layout.dim();
    if inst.objective.order == 0 || inst.lmis.iter().any(|m| m.order == 0) {
        return Err(Error::MalformedInstance("matrix maps must have positive order".into()));
    }
    if !inst.power_budget.is_finite() || !inst.objective_offset.is_finite() {
        return Err(Error::MalformedInstance("non-finite budget or objective offset".into()));
    }
    if let Some(h) = &inst.start_hint {
        if h.len() != dim {
            return Err(Error::MalformedInstance(format!("start hint has length {}, layout needs {dim}", h.len())));
        }
    }
    let probes = probe_points(dim);
    check_matrix_map("objective", &inst.objective, dim, &probes)?;
    for (k, m) in inst.lmis.iter().enumerate() {
        check_matrix_map(&format!("LMI {k}"), m, dim, &probes)?;
    }
    let zero = vec![0.0; dim];
    let p0 = (inst.power)(&zero);
    for pair in probes.chunks(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
        let (pa, pb, pab) = ((inst.power)(a), (inst.power)(b), (inst.power)(&ab));
        let second = (pab - pa - pb + p0).abs();
        if second > AFFINE_RTOL * (1.0 + pa.abs() + pb.abs() + pab.abs() + p0.abs()) {
            return Err(Error::MalformedInstance(format!("power functional: second difference {second:.3e}; not affine")));
        }
    }
    Ok(())
}

/// Unit-diagonal congruence `D M D`, `D = diag(m_ii^{-1/2})`. Definiteness is
/// unchanged but blocks living on very different scales become comparable.
fn equilibrated(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let d: Vec<f64> = m.diagonal().iter().map(|&x| if x > 0.0 { 1.0 / x.sqrt() } else { f64::NAN }).collect();
    if d.iter().any(|x| !x.is_finite()) {
        return None;
    }
    Some(DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * d[i] * d[j]))
}

fn strictly_pd(m: &DMatrix<f64>) -> std::result::Result<(), String> {
    let e = equilibrated(m).ok_or_else(|| "non-positive diagonal entry".to_string())?;
    Cholesky::with_floor(&e, pd_floor(&e)).map(|_| ()).map_err(|e| e.to_string())
}

/// Whether `theta` is strictly inside every constraint, using the pivot floor
/// on the diagonally equilibrated matrices.
fn strictly_feasible(inst: &MaxDetInstance, theta: &[f64]) -> std::result::Result<(), String> {
    let p = (inst.power)(theta);
    let margin = 1e-12 * (1.0 + inst.power_budget.abs() + p.abs());
    if !(inst.power_budget - p > margin) {
        return Err(format!("power {p} is not strictly below budget {}", inst.power_budget));
    }
    let g = (inst.objective.eval)(theta);
    strictly_pd(&g).map_err(|e| format!("objective matrix: {e}"))?;
    for (k, m) in inst.lmis.iter().enumerate() {
        strictly_pd(&(m.eval)(theta)).map_err(|e| format!("LMI {k}: {e}"))?;
    }
    Ok(())
}

/// A strictly feasible starting point: the instance's hint, checked.
pub fn feasible_start(inst: &MaxDetInstance) -> Result<Vec<f64>> {
    let hint = inst
        .start_hint
        .clone()
        .ok_or_else(|| Error::NoStrictInterior("instance carries no starting point".into()))?;
    if hint.len() != inst.layout.dim() {
        return Err(Error::MalformedInstance("start hint has the wrong length".into()));
    }
    strictly_feasible(inst, &hint).map_err(Error::NoStrictInterior)?;
    Ok(hint)
}

// ---------------------------------------------------------------------------
// Solver

const INNER_TOL: f64 = 1e-8;
/// Inner tolerance for the last centering, whose dual point is reported.
const POLISH_TOL: f64 = 1e-14;
const ROUNDING_DECREMENT: f64 = 1e-6;
const MU: f64 = 10.0;
const T0: f64 = 1.0;
const LS_ALPHA: f64 = 0.01;
const LS_BETA: f64 = 0.5;
const LS_MIN_STEP: f64 = 1e-14;
const REG_RETRIES: usize = 3;

enum Centering {
    Centered,
    OutOfIterations,
    Failed(String),
}

struct Solver<'a> {
    c: &'a Compiled,
    opts: SolveOptions,
    iterations: usize,
}

impl Solver<'_> {
    /// Solves `hess * dir = -grad` on the Jacobi-equilibrated system (unit
    /// diagonal), with one step of iterative refinement. Barrier Hessians mix
    /// curvatures many orders of magnitude apart late in the path.
    fn newton_direction(&self, grad: &DVector<f64>, hess: &DMatrix<f64>) -> Option<DVector<f64>> {
        let dim = grad.len();
        let d = DVector::from_iterator(dim, hess.diagonal().iter().map(|&h| if h > 0.0 { 1.0 / h.sqrt() } else { 1.0 }));
        let scaled = DMatrix::from_fn(dim, dim, |i, j| hess[(i, j)] * d[i] * d[j]);
        let rhs = -grad.component_mul(&d);
        let mut reg = 0.0;
        for attempt in 0..=REG_RETRIES {
            let mut h = scaled.clone();
            if reg > 0.0 {
                for i in 0..dim {
                    h[(i, i)] += reg;
                }
            }
            if let Some(chol) = nalgebra::linalg::Cholesky::new(h) {
                let mut y = chol.solve(&rhs);
                let resid = &rhs - &scaled * &y;
                y += chol.solve(&resid);
                let dir = y.component_mul(&d);
                if dir.iter().all(|v| v.is_finite()) {
                    return Some(dir);
                }
            }
            // The equilibrated diagonal is 1, so this is relative to the Hessian scale.
            reg = 1e-10 * 10f64.powi(attempt as i32);
        }
        None
    }

    /// Minimizes the barrier function for fixed `t` starting from `theta`.
    fn center(&mut self, theta: &mut Vec<f64>, t: f64, tol: f64) -> Centering {
        let mut st = match PointState::at(self.c, theta) {
            Some(st) => st,
            None => return Centering::Failed("iterate left the barrier domain".into()),
        };
        let mut prev_decrement_sq = f64::INFINITY;
        loop {
            if self.iterations >= self.opts.max_iter {
                return Centering::OutOfIterations;
            }
            let (grad, hess) = barrier_derivatives(self.c, &st, t);
            let Some(dir) = self.newton_direction(&grad, &hess) else {
                return Centering::Failed("Newton system is singular after regularization".into());
            };
            let slope = grad.dot(&dir);
            let decrement_sq = -slope;
            if decrement_sq / 2.0 <= tol {
                return Centering::Centered;
            }
            // Newton converges quadratically; a decrement that stops shrinking
            // inside the rounding regime has hit the precision floor.
            if decrement_sq / 2.0 <= ROUNDING_DECREMENT && decrement_sq > 0.25 * prev_decrement_sq {
                return Centering::Centered;
            }
            prev_decrement_sq = decrement_sq;
            self.iterations += 1;
            let Some(line) = LineModel::new(self.c, &st, dir.as_slice(), t) else {
                return Centering::Failed("line model factorization failed".into());
            };
            let mut step = 1.0;
            let mut next = None;
            while step >= LS_MIN_STEP {
                if line.delta(step) <= LS_ALPHA * step * slope {
                    let trial: Vec<f64> = theta.iter().zip(dir.iter()).map(|(x, d)| x + step * d).collect();
                    if let Some(tst) = PointState::at(self.c, &trial) {
                        next = Some((trial, tst));
                        break;
                    }
                }
                step *= LS_BETA;
            }
            // Near the center a full step is always acceptable in exact
            // arithmetic, so a shortened step there means rounding dominates
            // the decrease test.
            let rounding_bound = decrement_sq / 2.0 <= ROUNDING_DECREMENT;
            match next {
                Some((trial, tst)) => {
                    *theta = trial;
                    st = tst;
                    if step < 1.0 && rounding_bound {
                        return Centering::Centered;
                    }
                }
                None if rounding_bound => return Centering::Centered,
                None => return Centering::Failed(format!("line search stalled (decrement^2 {decrement_sq:.3e})")),
            }
        }
    }

    /// Dual point implied by a centered iterate: `Z_k = c M_k^{-1} / t`,
    /// `lambda = c / (t s)` with `c` the bits scale.
    fn dual_point(&self, st: &PointState, t: f64) -> DualPoint {
        let w = self.c.bits / t;
        DualPoint { lmi: st.lmis.iter().map(|l| l.inverse() * w).collect(), power: w / st.slack }
    }
}

/// Solves `inst`. Errors only on a malformed instance; infeasible starts and
/// solver trouble are reported through [`SolveReport::status`].
pub fn solve(inst: &MaxDetInstance, opts: &SolveOptions) -> Result<SolveReport> {
    let started = Instant::now();
    validate(inst)?;
    let layout = &inst.layout;

    let mut theta = match feasible_start(inst) {
        Ok(t) => t,
        Err(Error::NoStrictInterior(detail)) => {
            let theta = inst.start_hint.clone().unwrap_or_else(|| vec![0.0; layout.dim()]);
            return Ok(SolveReport {
                status: SolveStatus::Infeasible,
                rate: f64::NAN,
                h_opt: SymMatrix::symmetrized(layout.h_matrix(&theta)),
                b_opt: layout.b_tri(&theta),
                theta,
                gap: f64::NAN,
                kkt_residual: f64::NAN,
                iterations: 0,
                outer_iterations: 0,
                wall_time: started.elapsed(),
                history: Vec::new(),
                duals: None,
                detail,
            });
        }
        Err(e) => return Err(e),
    };

    let compiled = Compiled::new(inst);
    let m = compiled.constraint_dim() as f64;
    let mut solver = Solver { c: &compiled, opts: *opts, iterations: 0 };
    let mut t = T0;
    let mut history = Vec::new();
    let mut best: Option<(Vec<f64>, DualPoint)> = None;
    let mut status;
    let mut detail = String::new();
    let mut outer = 0;

    loop {
        let last = compiled.bits * m / t <= opts.tol_gap;
        let outcome = solver.center(&mut theta, t, if last { POLISH_TOL } else { INNER_TOL });
        match outcome {
            Centering::Centered => {
                outer += 1;
                let st = PointState::at(&compiled, &theta).expect("centered iterate is interior");
                let obj = st.objective_bits(&compiled);
                history.push(obj);
                best = Some((theta.clone(), solver.dual_point(&st, t)));
                if last {
                    status = SolveStatus::Optimal;
                    break;
                }
                t *= MU;
            }
            Centering::OutOfIterations => {
                status = SolveStatus::MaxIterations;
                detail = format!("stopped after {} Newton steps at t = {t:.3e}", solver.iterations);
                break;
            }
            Centering::Failed(msg) => {
                status = SolveStatus::NumericalFailure;
                detail = msg;
                break;
            }
        }
    }

    // Fall back to the current iterate when no centering finished.
    let (theta, duals) = match best {
        Some((th, d)) => (th, Some(d)),
        None => (theta, None),
    };
    let cert = certify(inst, &theta, duals.as_ref());
    let rate = inst.objective_value(&theta).unwrap_or(f64::NAN);
    let gap = cert.duality_gap.unwrap_or(f64::INFINITY);
    let kkt = cert.kkt_residual.unwrap_or(f64::NAN);
    if status == SolveStatus::Optimal {
        let scale = 1.0 + inst.power_budget.abs();
        let feasible = cert.power_slack >= -opts.tol_feas * scale
            && cert.lmi_min_eigs.iter().zip(&cert.lmi_scales).all(|(&e, &s)| e >= -opts.tol_feas * s);
        if !feasible || gap > opts.tol_gap {
            status = SolveStatus::NumericalFailure;
            detail = format!("certificate rejected: gap {gap:.3e}, power slack {:.3e}", cert.power_slack);
        }
    }

    Ok(SolveReport {
        status,
        rate,
        h_opt: SymMatrix::symmetrized(layout.h_matrix(&theta)),
        b_opt: layout.b_tri(&theta),
        theta,
        gap,
        kkt_residual: kkt,
        iterations: solver.iterations,
        outer_iterations: outer,
        wall_time: started.elapsed(),
        history,
        duals,
        detail,
    })
}

// ---------------------------------------------------------------------------
// Certification

/// Feasibility and optimality quantities recomputed from the instance's
/// closures, independent of the solver's compiled state.
#[derive(Clone, Debug)]
pub struct Certificate {
    pub objective_min_eig: f64,
    pub lmi_min_eigs: Vec<f64>,
    /// Largest absolute entry of each LMI matrix; eigenvalues are only
    /// meaningful to about machine precision times this.
    pub lmi_scales: Vec<f64>,
    /// `budget - p(theta)`.
    pub power_slack: f64,
    /// Relative stationarity residual of the Lagrangian (needs a dual point).
    pub kkt_residual: Option<f64>,
    /// `lambda * slack + sum_k <Z_k, M_k(theta)>`, bits per use.
    pub duality_gap: Option<f64>,
    /// Whether the dual point is dual feasible (`Z_k >= 0`, `lambda >= 0`).
    pub dual_feasible: Option<bool>,
}

fn min_eig_or_neg_inf(m: DMatrix<f64>) -> f64 {
    eigh(&SymMatrix::symmetrized(m)).map(|e| e.values[0]).unwrap_or(f64::NEG_INFINITY)
}

pub fn certify(inst: &MaxDetInstance, theta: &[f64], duals: Option<&DualPoint>) -> Certificate {
    let dim = theta.len();
    let g = (inst.objective.eval)(theta);
    let lmi_vals: Vec<DMatrix<f64>> = inst.lmis.iter().map(|m| (m.eval)(theta)).collect();
    let power_slack = inst.power_budget - (inst.power)(theta);
    let objective_min_eig = min_eig_or_neg_inf(g.clone());
    let lmi_min_eigs = lmi_vals.iter().map(|m| min_eig_or_neg_inf(m.clone())).collect();
    let lmi_scales = lmi_vals.iter().map(|m| m.amax()).collect();

    let (mut kkt_residual, mut duality_gap, mut dual_feasible) = (None, None, None);
    if let Some(d) = duals {
        if d.lmi.len() == inst.lmis.len() {
            let g_inv = nalgebra::linalg::Cholesky::new(SymMatrix::symmetrized(g).into_matrix()).map(|c| c.inverse());
            if let Some(g_inv) = g_inv {
                let bits = inst.bits_scale();
                let zero = vec![0.0; dim];
                let g0 = (inst.objective.eval)(&zero);
                let m0: Vec<DMatrix<f64>> = inst.lmis.iter().map(|m| (m.eval)(&zero)).collect();
                let p0 = (inst.power)(&zero);
                let mut e = zero.clone();
                let mut worst: f64 = 0.0;
                let mut grad_norm: f64 = 0.0;
                for i in 0..dim {
                    e[i] = 1.0;
                    let dg = (inst.objective.eval)(&e) - &g0;
                    let grad_obj = bits * g_inv.dot(&dg);
                    let dp = (inst.power)(&e) - p0;
                    let adj: f64 = inst.lmis.iter().zip(&m0).zip(&d.lmi).map(|((m, m0), z)| z.dot(&((m.eval)(&e) - m0))).sum();
                    e[i] = 0.0;
                    worst = worst.max((grad_obj - d.power * dp + adj).abs());
                    grad_norm = grad_norm.max(grad_obj.abs());
                }
                kkt_residual = Some(worst / grad_norm.max(1.0));
                duality_gap = Some(d.power * power_slack + d.lmi.iter().zip(&lmi_vals).map(|(z, m)| z.dot(m)).sum::<f64>());
                dual_feasible = Some(d.power >= 0.0 && d.lmi.iter().all(|z| min_eig_or_neg_inf(z.clone()) >= -1e-12 * (1.0 + z.norm())));
            }
        }
    }
    Certificate { objective_min_eig, lmi_min_eigs, lmi_scales, power_slack, kkt_residual, duality_gap, dual_feasible }
}
