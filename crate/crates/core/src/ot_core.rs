//! Dense entropic optimal transport.
//!
//! The solver works on dual potentials in the log domain so that very small
//! regularization weights (down to `1e-3` on unit-scale costs) neither
//! underflow nor overflow. Every reduction (row/column log-sum-exp and the
//! marginal residual sums) is evaluated in a value-sorted order, which makes
//! the result independent of the order in which samples are presented:
//! permuting the rows of the cost and the source marginal permutes the plan
//! rows bit-for-bit.

use itertools::Itertools;
use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest instance accepted by [`exact_ot_oracle`] (8! = 40320 couplings).
pub const MAX_ORACLE_N: usize = 8;

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 10_000;
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Which side of a transport problem a set of rows or columns comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    Target,
    Prototype,
    #[default]
    Unspecified,
}

/// Probability mass per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginal {
    weights: Vec<f64>,
}

impl Marginal {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Empty("marginal"));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("marginal"));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidArgument("marginal has negative mass".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "marginal sums to {total}, expected 1"
            )));
        }
        Ok(Self { weights })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("marginal"));
        }
        Ok(Self {
            weights: vec![1.0 / n as f64; n],
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Dense matrix of finite, nonnegative pairwise transport costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    values: Array2<f64>,
    pub row_domain: DomainTag,
    pub col_domain: DomainTag,
}

impl CostMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        Self::with_domains(values, DomainTag::Unspecified, DomainTag::Unspecified)
    }

    pub fn with_domains(
        values: Array2<f64>,
        row_domain: DomainTag,
        col_domain: DomainTag,
    ) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cost matrix"));
        }
        if values.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(
                "cost matrix has negative entries".into(),
            ));
        }
        Ok(Self {
            values,
            row_domain,
            col_domain,
        })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let m = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::DimensionMismatch("ragged cost rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let values = Array2::from_shape_vec((rows.len(), m), flat)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        Self::new(values)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// How a [`TransportPlan`] was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanSolver {
    Sinkhorn,
    /// Permutation coupling found by exhaustive enumeration (unregularized).
    ExactPermutation,
    /// Unregularized plan between uniform marginals from a slot assignment.
    Assignment,
    /// Unregularized transport requested on an instance too large for the
    /// exact solvers; solved with Sinkhorn at [`SURROGATE_LAMBDA`].
    SmallLambdaSurrogate,
}

/// Regularization used in place of `lambda = 0` when no exact solver applies.
pub const SURROGATE_LAMBDA: f64 = 1e-3;

/// Nonnegative coupling between two marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub coupling: Array2<f64>,
    pub lambda: f64,
    pub iterations_used: usize,
    /// Max-norm residual of row and column sums against the marginals.
    pub marginal_violation: f64,
    pub solver: PlanSolver,
}

impl TransportPlan {
    pub fn dim(&self) -> (usize, usize) {
        self.coupling.dim()
    }

    pub fn converged(&self, tol: f64) -> bool {
        self.marginal_violation <= tol
    }
}

/// Solver settings bundled for callers that thread them through configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

impl SinkhornConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn solve(&self, cost: &CostMatrix, u1: &Marginal, u2: &Marginal) -> Result<TransportPlan> {
        sinkhorn(cost, u1, u2, self.lambda, self.tol, self.max_iter)
    }
}

/// Sum after sorting by value, so the result does not depend on input order.
fn ordered_sum(buf: &mut [f64]) -> f64 {
    buf.sort_unstable_by(f64::total_cmp);
    buf.iter().sum()
}

/// `log(sum(exp(x)))` with an order-independent reduction. `buf` is scratch.
fn ordered_logsumexp(buf: &mut [f64]) -> f64 {
    let max = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    for v in buf.iter_mut() {
        *v = (*v - max).exp();
    }
    max + ordered_sum(buf).ln()
}

/// Entropic-regularized transport: minimizes `<C, γ> + λ Σ γ log γ` over the
/// couplings of `u1` and `u2`.
///
/// Iterates until the max-norm marginal residual is at most `tol` or
/// `max_iter` sweeps have run. A plan that did not converge is still returned;
/// its residual is in [`TransportPlan::marginal_violation`].
///
/// Small `lambda` relative to the cost range is handled by annealing the
/// regularization geometrically from the cost range down to `lambda`, warm
/// starting the potentials at each stage. The fixed point is unchanged.
pub fn sinkhorn(
    cost: &CostMatrix,
    u1: &Marginal,
    u2: &Marginal,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<TransportPlan> {
    let (n, m) = cost.dim();
    if n != u1.len() || m != u2.len() {
        return Err(Error::DimensionMismatch(format!(
            "cost is {n}x{m}, marginals are {} and {}",
            u1.len(),
            u2.len()
        )));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tol must be positive, got {tol}"
        )));
    }
    if max_iter == 0 {
        return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
    }

    let mut solver = LogSinkhorn::new(cost.values(), u1.weights(), u2.weights());
    let range = cost.values().iter().copied().fold(0.0, f64::max);
    let mut iterations = 0;

    // Annealing stages: each stops at a loose residual or a small sweep budget.
    let anneal_budget = max_iter / 2;
    let mut stage = range;
    while stage > 4.0 * lambda && iterations < anneal_budget {
        let budget = STAGE_SWEEPS.min(anneal_budget - iterations);
        iterations += solver.run(stage, STAGE_TOL.max(tol), budget);
        stage *= 0.25;
    }
    // Near-degenerate plans make plain sweeps crawl; small problems switch to
    // Newton steps once a short sweep budget is spent, and fall back to
    // sweeps if Newton stops making progress.
    let polish = n <= NEWTON_MAX_ROWS && u1.weights().iter().chain(u2.weights()).all(|&w| w > 0.0);
    let first = if polish { STAGE_SWEEPS.min(max_iter - iterations) } else { max_iter - iterations };
    iterations += solver.run(lambda, tol, first);
    if polish && solver.worst > tol && iterations < max_iter {
        iterations += solver.newton(lambda, tol, max_iter - iterations);
    }
    if solver.worst > tol && iterations < max_iter {
        iterations += solver.run(lambda, tol, max_iter - iterations);
    }

    let coupling = solver.plan(lambda);
    let marginal_violation = solver.residual(&coupling);
    Ok(TransportPlan {
        coupling,
        lambda,
        iterations_used: iterations,
        marginal_violation,
        solver: PlanSolver::Sinkhorn,
    })
}

const STAGE_SWEEPS: usize = 200;
const STAGE_TOL: f64 = 1e-3;
/// Largest source size for the dense Newton phase.
pub const NEWTON_MAX_ROWS: usize = 256;
const LINE_SEARCH_HALVINGS: usize = 30;

struct LogSinkhorn<'a> {
    cost: &'a Array2<f64>,
    a: &'a [f64],
    b: &'a [f64],
    log_a: Vec<f64>,
    log_b: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    row_buf: Vec<f64>,
    col_buf: Vec<f64>,
    lse_rows: Vec<f64>,
    started: bool,
    /// Row residual of the current potentials, valid once `started`.
    worst: f64,
}

impl<'a> LogSinkhorn<'a> {
    fn new(cost: &'a Array2<f64>, a: &'a [f64], b: &'a [f64]) -> Self {
        let (n, m) = cost.dim();
        Self {
            cost,
            a,
            b,
            log_a: a.iter().map(|w| w.ln()).collect(),
            log_b: b.iter().map(|w| w.ln()).collect(),
            f: vec![0.0; n],
            g: vec![0.0; m],
            row_buf: vec![0.0; m],
            col_buf: vec![0.0; n],
            lse_rows: vec![0.0; n],
            started: false,
            worst: f64::INFINITY,
        }
    }

    /// Fills `lse_rows` for the current potentials and returns the max-norm
    /// row residual. Columns are exact after [`Self::update_g`], so this is
    /// the full marginal residual.
    fn row_pass(&mut self, lambda: f64) -> f64 {
        let (n, m) = self.cost.dim();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            if self.log_a[i] == f64::NEG_INFINITY {
                self.lse_rows[i] = f64::NEG_INFINITY;
                continue;
            }
            let row = self.cost.row(i);
            for j in 0..m {
                self.row_buf[j] = (self.g[j] - row[j]) / lambda;
            }
            let lse = ordered_logsumexp(&mut self.row_buf);
            self.lse_rows[i] = lse;
            worst = worst.max(((self.f[i] / lambda + lse).exp() - self.a[i]).abs());
        }
        worst
    }

    fn update_g(&mut self, lambda: f64) {
        let (n, m) = self.cost.dim();
        for j in 0..m {
            if self.log_b[j] == f64::NEG_INFINITY {
                self.g[j] = f64::NEG_INFINITY;
                continue;
            }
            let col = self.cost.column(j);
            for i in 0..n {
                self.col_buf[i] = (self.f[i] - col[i]) / lambda;
            }
            self.g[j] = lambda * (self.log_b[j] - ordered_logsumexp(&mut self.col_buf));
        }
    }

    /// Runs sweeps at regularization `lambda`; returns the number performed.
    ///
    /// The row residual of the current plan is read off the log-sum-exp the
    /// next f-update needs, so no separate pass is spent on it.
    fn run(&mut self, lambda: f64, tol: f64, max_sweeps: usize) -> usize {
        let n = self.cost.nrows();
        for sweep in 0..=max_sweeps {
            let worst = self.row_pass(lambda);
            if self.started {
                self.worst = worst;
                if worst <= tol {
                    return sweep;
                }
            }
            if sweep == max_sweeps {
                return sweep;
            }
            for i in 0..n {
                self.f[i] = if self.log_a[i] == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    lambda * (self.log_a[i] - self.lse_rows[i])
                };
            }
            self.update_g(lambda);
            self.started = true;
        }
        max_sweeps
    }

    /// Damped Newton on f with g eliminated (columns kept exact). Needs
    /// strictly positive marginals and a started solver. Returns the number
    /// of steps taken; stops early at `tol` or when a step cannot reduce the
    /// residual.
    ///
    /// With row sums r and plan γ, the Jacobian of r in f is
    /// `(diag(r) - γ diag(1/b) γᵀ) / λ`: symmetric, positive semidefinite,
    /// null along the all-ones vector. Steps solve it by conjugate gradients.
    fn newton(&mut self, lambda: f64, tol: f64, max_steps: usize) -> usize {
        let (n, m) = self.cost.dim();
        let mut scratch = vec![0.0; n];
        for step in 0..max_steps {
            let plan = self.plan(lambda);
            let rows: Vec<f64> = plan.rows().into_iter().map(|r| r.sum()).collect();
            let rhs: Vec<f64> = (0..n).map(|i| lambda * (self.a[i] - rows[i])).collect();
            let hess = |v: &[f64], out: &mut [f64], scratch: &mut [f64]| {
                let w: Vec<f64> = (0..m)
                    .map(|j| {
                        for i in 0..n {
                            scratch[i] = plan[[i, j]] * v[i];
                        }
                        ordered_sum(scratch) / self.b[j]
                    })
                    .collect();
                for i in 0..n {
                    let cross: f64 = (0..m).map(|j| plan[[i, j]] * w[j]).sum();
                    out[i] = rows[i] * v[i] - cross;
                }
            };
            let delta = conjugate_gradient(hess, &rhs, &mut scratch);

            let f0 = self.f.clone();
            let g0 = self.g.clone();
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..LINE_SEARCH_HALVINGS {
                for i in 0..n {
                    self.f[i] = f0[i] + t * delta[i];
                }
                self.update_g(lambda);
                let worst = self.row_pass(lambda);
                if worst < self.worst {
                    self.worst = worst;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                self.f = f0;
                self.g = g0;
                return step;
            }
            if self.worst <= tol {
                return step + 1;
            }
        }
        max_steps
    }

    fn entry(&self, i: usize, j: usize, lambda: f64) -> f64 {
        let v = (self.f[i] + self.g[j] - self.cost[[i, j]]) / lambda;
        if v.is_nan() {
            0.0
        } else {
            v.exp()
        }
    }

    fn plan(&self, lambda: f64) -> Array2<f64> {
        let (n, m) = self.cost.dim();
        Array2::from_shape_fn((n, m), |(i, j)| self.entry(i, j, lambda))
    }

    fn residual(&self, plan: &Array2<f64>) -> f64 {
        marginal_residual(plan, self.a, self.b)
    }
}

/// Order-independent dot product. `scratch` must have the slices' length.
fn ordered_dot(x: &[f64], y: &[f64], scratch: &mut [f64]) -> f64 {
    for ((s, a), b) in scratch.iter_mut().zip(x).zip(y) {
        *s = a * b;
    }
    ordered_sum(scratch)
}

/// Solves `H x = rhs` for a symmetric positive semidefinite `H` given as a
/// product; `rhs` must lie in the range of `H`.
fn conjugate_gradient(
    hess: impl Fn(&[f64], &mut [f64], &mut [f64]),
    rhs: &[f64],
    scratch: &mut [f64],
) -> Vec<f64> {
    let n = rhs.len();
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut hp = vec![0.0; n];
    let mut rr = ordered_dot(&r, &r, scratch);
    let stop = rr * 1e-28;
    for _ in 0..2 * n {
        if !(rr > stop) {
            break;
        }
        let mut tmp = vec![0.0; n];
        hess(&p, &mut hp, &mut tmp);
        let php = ordered_dot(&p, &hp, scratch);
        if !(php > 0.0) {
            break;
        }
        let alpha = rr / php;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * hp[i];
        }
        let next = ordered_dot(&r, &r, scratch);
        let beta = next / rr;
        rr = next;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    x
}

/// Max-norm violation of `plan`'s row and column sums against `a` and `b`.
pub fn marginal_residual(plan: &Array2<f64>, a: &[f64], b: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for (row, &w) in plan.axis_iter(Axis(0)).zip(a) {
        let mut buf = row.to_vec();
        worst = worst.max((ordered_sum(&mut buf) - w).abs());
    }
    for (col, &w) in plan.axis_iter(Axis(1)).zip(b) {
        let mut buf = col.to_vec();
        worst = worst.max((ordered_sum(&mut buf) - w).abs());
    }
    worst
}

/// Exact unregularized transport between two uniform marginals of equal size,
/// by enumerating all permutation couplings (the extreme points of the
/// Birkhoff polytope).
///
/// Returns the optimal cost `(1/n) Σ C[i, π(i)]` and `π`. Ties resolve to the
/// lexicographically smallest permutation.
pub fn exact_ot_oracle(cost: &CostMatrix) -> Result<(f64, Vec<usize>)> {
    let (n, m) = cost.dim();
    if n != m {
        return Err(Error::DimensionMismatch(format!(
            "oracle needs a square cost, got {n}x{m}"
        )));
    }
    if n == 0 {
        return Err(Error::Empty("cost matrix"));
    }
    if n > MAX_ORACLE_N {
        return Err(Error::TooLarge {
            n,
            max: MAX_ORACLE_N,
        });
    }
    let c = cost.values();
    let mut best = f64::INFINITY;
    let mut best_perm = Vec::new();
    for perm in (0..n).permutations(n) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum();
        if total < best {
            best = total;
            best_perm = perm;
        }
    }
    Ok((best / n as f64, best_perm))
}

/// The permutation coupling `γ[i, π(i)] = 1/n` as a plan.
pub fn permutation_plan(perm: &[usize]) -> TransportPlan {
    let n = perm.len();
    let mut coupling = Array2::zeros((n, n));
    for (i, &j) in perm.iter().enumerate() {
        coupling[[i, j]] = 1.0 / n as f64;
    }
    TransportPlan {
        coupling,
        lambda: 0.0,
        iterations_used: 0,
        marginal_violation: 0.0,
        solver: PlanSolver::ExactPermutation,
    }
}

/// Largest slot count `lcm(n, m)` accepted by [`exact_uniform_plan`].
pub const MAX_ASSIGNMENT_SLOTS: usize = 1024;

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Exact unregularized plan between uniform marginals of any sizes.
///
/// With `L = lcm(n, m)`, row `i` is split into `L / n` slots and column `j`
/// into `L / m`; an optimal slot matching (Hungarian method) is an optimal
/// vertex of the transport polytope. Costs are quantized to `2^-40` of their
/// range for the integer solver, so near-ties may resolve either way.
pub fn exact_uniform_plan(cost: &CostMatrix) -> Result<TransportPlan> {
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return Err(Error::Empty("cost matrix"));
    }
    let slots = n / gcd(n, m) * m;
    if slots > MAX_ASSIGNMENT_SLOTS {
        return Err(Error::TooLarge {
            n: slots,
            max: MAX_ASSIGNMENT_SLOTS,
        });
    }
    let (rn, rm) = (slots / n, slots / m);
    let c = cost.values();
    let range = c.iter().copied().fold(0.0, f64::max);
    let scale = if range > 0.0 {
        (1u64 << 40) as f64 / range
    } else {
        0.0
    };
    let weights = pathfinding::matrix::Matrix::from_fn(slots, slots, |(a, b)| {
        (c[[a / rn, b / rm]] * scale).round() as i64
    });
    let (_, assignment) = pathfinding::kuhn_munkres::kuhn_munkres_min(&weights);
    let mut coupling = Array2::zeros((n, m));
    let unit = 1.0 / slots as f64;
    for (a, &b) in assignment.iter().enumerate() {
        coupling[[a / rn, b / rm]] += unit;
    }
    let a = vec![1.0 / n as f64; n];
    let b = vec![1.0 / m as f64; m];
    let marginal_violation = marginal_residual(&coupling, &a, &b);
    Ok(TransportPlan {
        coupling,
        lambda: 0.0,
        iterations_used: 0,
        marginal_violation,
        solver: PlanSolver::Assignment,
    })
}

/// `<C, γ>`.
pub fn transport_cost(plan: &TransportPlan, cost: &CostMatrix) -> Result<f64> {
    if plan.dim() != cost.dim() {
        return Err(Error::DimensionMismatch(format!(
            "plan is {:?}, cost is {:?}",
            plan.dim(),
            cost.dim()
        )));
    }
    Ok(frobenius_inner(&plan.coupling, cost.values()))
}

pub(crate) fn frobenius_inner(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `Σ γ log γ` with `0 log 0 = 0`. Returns NaN if the plan holds NaN.
pub fn plan_entropy(plan: &TransportPlan) -> f64 {
    plan.coupling
        .iter()
        .map(|&g| {
            if g > 0.0 {
                g * g.ln()
            } else if g.is_nan() {
                f64::NAN
            } else {
                0.0
            }
        })
        .sum()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, &v) in row.iter().enumerate() {
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn swap_cost() -> CostMatrix {
        CostMatrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap()
    }

    fn random_cost(rng: &mut ChaCha8Rng, n: usize) -> CostMatrix {
        CostMatrix::new(Array2::from_shape_fn((n, n), |_| rng.gen::<f64>())).unwrap()
    }

    fn u(n: usize) -> Marginal {
        Marginal::uniform(n).unwrap()
    }

    #[test]
    fn assignment_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in 1..=6 {
            for _ in 0..20 {
                let c = random_cost(&mut rng, n);
                let plan = exact_uniform_plan(&c).unwrap();
                let (best, _) = exact_ot_oracle(&c).unwrap();
                assert!((transport_cost(&plan, &c).unwrap() - best).abs() < 1e-9);
                assert!(plan.marginal_violation < 1e-12);
            }
        }
    }

    #[test]
    fn assignment_handles_rectangular_uniform() {
        // Two rows, four columns: each row takes the two columns it prefers.
        let c = CostMatrix::from_rows(&[&[0.0, 1.0, 0.0, 1.0], &[1.0, 0.0, 1.0, 0.0]]).unwrap();
        let plan = exact_uniform_plan(&c).unwrap();
        assert_abs_diff_eq!(
            plan.coupling,
            array![[0.25, 0.0, 0.25, 0.0], [0.0, 0.25, 0.0, 0.25]],
            epsilon = 1e-15
        );
        // Entropic plans approach the exact value from above.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = CostMatrix::new(Array2::from_shape_fn((6, 4), |_| rng.gen::<f64>())).unwrap();
        let exact = transport_cost(&exact_uniform_plan(&c).unwrap(), &c).unwrap();
        let reg = sinkhorn(&c, &u(6), &u(4), 0.005, 1e-9, 10_000).unwrap();
        let v = transport_cost(&reg, &c).unwrap();
        assert!(v >= exact - 1e-9 && v - exact < 0.01, "{v} vs {exact}");
        let big = CostMatrix::new(Array2::zeros((1000, 999))).unwrap();
        assert!(exact_uniform_plan(&big).is_err());
    }

    #[test]
    fn marginal_validation() {
        assert!(Marginal::new(vec![0.5, 0.5]).is_ok());
        assert!(Marginal::new(vec![0.5, 0.6]).is_err());
        assert!(Marginal::new(vec![-0.5, 1.5]).is_err());
        assert!(Marginal::new(vec![]).is_err());
        assert!(Marginal::new(vec![f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn cost_validation() {
        assert!(CostMatrix::new(array![[0.0, f64::INFINITY]]).is_err());
        assert!(CostMatrix::new(array![[0.0, -1.0]]).is_err());
    }

    #[test]
    fn sinkhorn_small_lambda_recovers_identity() {
        let plan = sinkhorn(&swap_cost(), &u(2), &u(2), 0.01, 1e-6, 10_000).unwrap();
        assert_abs_diff_eq!(
            plan.coupling,
            array![[0.5, 0.0], [0.0, 0.5]],
            epsilon = 1e-6
        );
        assert!(transport_cost(&plan, &swap_cost()).unwrap() <= 1e-3);
        assert!(plan.marginal_violation <= 1e-6);
    }

    #[test]
    fn sinkhorn_large_lambda_is_product() {
        let plan = sinkhorn(&swap_cost(), &u(2), &u(2), 100.0, 1e-6, 10_000).unwrap();
        // Exact deviation from the product is 0.25 * tanh(1 / 200) = 1.25e-3.
        let expected = 0.25 * (1.0 + (0.5f64 / 100.0).tanh());
        assert_abs_diff_eq!(plan.coupling[[0, 0]], expected, epsilon = 1e-9);
        assert_abs_diff_eq!(
            plan.coupling,
            Array2::from_elem((2, 2), 0.25),
            epsilon = 2e-3
        );
    }

    #[test]
    fn sinkhorn_random_5x5_near_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cost = random_cost(&mut rng, 5);
        let plan = sinkhorn(&cost, &u(5), &u(5), 0.01, 1e-6, 10_000).unwrap();
        let (opt, _) = exact_ot_oracle(&cost).unwrap();
        let got = transport_cost(&plan, &cost).unwrap();
        assert!((got - opt).abs() / opt.max(1e-6) <= 0.01, "{got} vs {opt}");
    }

    #[test]
    fn sinkhorn_rejects_bad_input() {
        let c = swap_cost();
        assert!(matches!(
            sinkhorn(&c, &u(3), &u(2), 0.1, 1e-6, 10),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(sinkhorn(&c, &u(2), &u(2), 0.1, 0.0, 10).is_err());
        assert!(sinkhorn(&c, &u(2), &u(2), 0.0, 1e-6, 10).is_err());
    }

    #[test]
    fn sinkhorn_reports_nonconvergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cost = random_cost(&mut rng, 6);
        let plan = sinkhorn(&cost, &u(6), &u(6), 0.001, 1e-14, 1).unwrap();
        assert_eq!(plan.iterations_used, 1);
        assert!(plan.marginal_violation > 1e-14);
    }

    #[test]
    fn sinkhorn_handles_zero_mass() {
        let cost = CostMatrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0], &[0.5, 0.5]]).unwrap();
        let a = Marginal::new(vec![0.5, 0.5, 0.0]).unwrap();
        let plan = sinkhorn(&cost, &a, &u(2), 0.05, 1e-9, 10_000).unwrap();
        assert_eq!(plan.coupling.row(2).sum(), 0.0);
        assert!(plan.marginal_violation <= 1e-9);
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(exact_ot_oracle(&swap_cost()).unwrap(), (0.0, vec![0, 1]));
        let anti = CostMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert_eq!(exact_ot_oracle(&anti).unwrap(), (0.0, vec![1, 0]));
    }

    #[test]
    fn oracle_4x4_matches_hand_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let cost = random_cost(&mut rng, 4);
        let c = cost.values();
        // Nested loops over all 24 permutations.
        let mut best = f64::INFINITY;
        for a in 0..4 {
            for b in 0..4 {
                for d in 0..4 {
                    for e in 0..4 {
                        let p = [a, b, d, e];
                        let mut seen = [false; 4];
                        p.iter().for_each(|&x| seen[x] = true);
                        if seen.iter().all(|&s| s) {
                            let v = (0..4).map(|i| c[[i, p[i]]]).sum::<f64>() / 4.0;
                            best = best.min(v);
                        }
                    }
                }
            }
        }
        let (opt, perm) = exact_ot_oracle(&cost).unwrap();
        assert_eq!(opt, best);
        let direct: f64 = perm
            .iter()
            .enumerate()
            .map(|(i, &j)| c[[i, j]])
            .sum::<f64>()
            / 4.0;
        assert_eq!(direct, opt);
    }

    #[test]
    fn oracle_rejects_large_and_rectangular() {
        let big = CostMatrix::new(Array2::zeros((9, 9))).unwrap();
        assert!(matches!(
            exact_ot_oracle(&big),
            Err(Error::TooLarge { n: 9, .. })
        ));
        let rect = CostMatrix::new(Array2::zeros((2, 3))).unwrap();
        assert!(exact_ot_oracle(&rect).is_err());
    }

    fn plan_of(coupling: Array2<f64>) -> TransportPlan {
        TransportPlan {
            coupling,
            lambda: 0.0,
            iterations_used: 0,
            marginal_violation: 0.0,
            solver: PlanSolver::Sinkhorn,
        }
    }

    #[test]
    fn transport_cost_examples() {
        let zero = CostMatrix::new(Array2::zeros((2, 2))).unwrap();
        assert_eq!(
            transport_cost(&plan_of(Array2::from_elem((2, 2), 0.25)), &zero).unwrap(),
            0.0
        );
        let diag = plan_of(array![[0.5, 0.0], [0.0, 0.5]]);
        assert_eq!(transport_cost(&diag, &swap_cost()).unwrap(), 0.0);
        let product = plan_of(Array2::from_elem((2, 2), 0.25));
        assert_eq!(transport_cost(&product, &swap_cost()).unwrap(), 0.5);
        assert!(
            transport_cost(&product, &CostMatrix::new(Array2::zeros((3, 2))).unwrap()).is_err()
        );
    }

    #[test]
    fn entropy_examples() {
        let product = plan_of(Array2::from_elem((2, 2), 0.25));
        assert_abs_diff_eq!(
            plan_entropy(&product),
            4.0 * 0.25 * 0.25f64.ln(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(plan_entropy(&product), -1.3863, epsilon = 1e-4);
        let diag = plan_of(array![[0.5, 0.0], [0.0, 0.5]]);
        assert_abs_diff_eq!(plan_entropy(&diag), -0.6931, epsilon = 1e-4);
        let point = plan_of(array![[1.0, 0.0], [0.0, 0.0]]);
        assert_eq!(plan_entropy(&point), 0.0);
    }

    #[test]
    fn permutation_equivariance_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cost = Array2::from_shape_fn((5, 4), |_| rng.gen::<f64>());
        let a = Marginal::new(vec![0.1, 0.3, 0.2, 0.25, 0.15]).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let permuted = Array2::from_shape_fn((5, 4), |(i, j)| cost[[perm[i], j]]);
        let pa = Marginal::new(perm.iter().map(|&i| a.weights()[i]).collect()).unwrap();
        let p1 = sinkhorn(
            &CostMatrix::new(cost).unwrap(),
            &a,
            &u(4),
            0.05,
            1e-9,
            10_000,
        )
        .unwrap();
        let p2 = sinkhorn(
            &CostMatrix::new(permuted).unwrap(),
            &pa,
            &u(4),
            0.05,
            1e-9,
            10_000,
        )
        .unwrap();
        for (i, &src) in perm.iter().enumerate() {
            for j in 0..4 {
                assert_eq!(
                    p2.coupling[[i, j]].to_bits(),
                    p1.coupling[[src, j]].to_bits()
                );
            }
        }
    }

    fn near_tie_cost() -> Array2<f64> {
        array![
            [0.8583, 0.2314, 0.4772, 0.6471, 0.9138],
            [0.3903, 0.8209, 0.8766, 0.2032, 0.3481],
            [0.2210, 0.0838, 0.7168, 0.8099, 0.8684],
            [0.7814, 0.2394, 0.1932, 0.7174, 0.8615],
            [0.7797, 0.4459, 0.0885, 0.2333, 0.6035]
        ]
    }

    #[test]
    fn near_tie_converges_and_stays_equivariant() {
        let cost = near_tie_cost();
        // Plain sweeps alone leave a residual near 1e-5 after 10 000 sweeps here.
        let p1 = sinkhorn(&CostMatrix::new(cost.clone()).unwrap(), &u(5), &u(5), 0.01, 1e-12, 10_000).unwrap();
        assert!(p1.marginal_violation <= 1e-12, "{:e}", p1.marginal_violation);
        assert!(p1.iterations_used < 1_000);

        let perm = [4, 2, 0, 3, 1];
        let permuted = Array2::from_shape_fn((5, 5), |(i, j)| cost[[perm[i], j]]);
        let p2 = sinkhorn(&CostMatrix::new(permuted).unwrap(), &u(5), &u(5), 0.01, 1e-12, 10_000).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            for j in 0..5 {
                assert_eq!(p2.coupling[[i, j]].to_bits(), p1.coupling[[src, j]].to_bits());
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn small_lambda_meets_tolerance(
            n in 1usize..=6,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost = Array2::from_shape_fn((n, n), |_| rng.gen::<f64>());
            let plan = SinkhornConfig::with_lambda(0.01)
                .solve(&CostMatrix::new(cost).unwrap(), &u(n), &u(n))
                .unwrap();
            prop_assert!(plan.marginal_violation <= DEFAULT_TOL);
        }
    }
}
