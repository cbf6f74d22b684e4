//! Coefficient step: with the curves fixed, the objective is a convex
//! quadratic in the weights, minimized over the nonnegative orthant.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{normalization, Curve};
use crate::problem::Problem;

pub const DEFAULT_KKT_TOL: f64 = 1e-9;

/// `c -> 1/2 c^T gram c + linear^T c` (plus the constant `M0`).
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    pub gram: DMatrix<f64>,
    pub linear: DVector<f64>,
}

impl QuadraticProgram {
    pub fn new(gram: DMatrix<f64>, linear: DVector<f64>) -> Result<Self> {
        let n = linear.len();
        if gram.nrows() != n || gram.ncols() != n {
            return Err(Error::invalid("gram matrix and linear term sizes differ"));
        }
        if gram.iter().chain(linear.iter()).any(|v| !v.is_finite()) {
            return Err(Error::non_finite(
                "quadratic program",
                "non-finite coefficient",
            ));
        }
        let scale = gram.amax().max(1.0);
        for j in 0..n {
            for k in 0..j {
                if (gram[(j, k)] - gram[(k, j)]).abs() > 1e-12 * scale {
                    return Err(Error::invalid("gram matrix is not symmetric"));
                }
            }
        }
        Ok(Self { gram, linear })
    }

    pub fn len(&self) -> usize {
        self.linear.len()
    }

    pub fn is_empty(&self) -> bool {
        self.linear.is_empty()
    }

    pub fn value(&self, c: &DVector<f64>) -> f64 {
        0.5 * c.dot(&(&self.gram * c)) + self.linear.dot(c)
    }

    pub fn gradient(&self, c: &DVector<f64>) -> DVector<f64> {
        &self.gram * c + &self.linear
    }

    /// Largest violation of `c >= 0`, `g >= 0`, `c_j g_j = 0`.
    pub fn kkt_residual(&self, c: &DVector<f64>) -> f64 {
        let g = self.gradient(c);
        c.iter()
            .zip(g.iter())
            .map(|(&cj, &gj)| (-cj).max(-gj).max((cj * gj).abs()).max(0.0))
            .fold(0.0, f64::max)
    }
}

/// Gram matrix and linear term of the objective restricted to conic
/// combinations of the atoms of `curves`.
pub fn assemble_qp(curves: &[Curve], problem: &Problem) -> Result<QuadraticProgram> {
    if curves.is_empty() {
        return Err(Error::invalid(
            "cannot assemble a quadratic program without curves",
        ));
    }
    for c in curves {
        c.check_grid(problem.grid())?;
    }
    let n = curves.len();
    let times = problem.grid().num_nodes();
    let op = problem.operator();
    let a: Vec<f64> = curves
        .iter()
        .map(|c| normalization(c, problem.params()))
        .collect();
    let mut gram = DMatrix::zeros(n, n);
    let mut linear = DVector::zeros(n);
    for j in 0..n {
        for k in j..n {
            let s: f64 = (0..times)
                .map(|i| op.kernel_inner(i, curves[j].node(i), curves[k].node(i)))
                .sum();
            let v = a[j] * a[k] * s / times as f64;
            gram[(j, k)] = v;
            gram[(k, j)] = v;
        }
        let s: f64 = (0..times)
            .map(|i| op.preadjoint_value(problem.data().at(i), i, curves[j].node(i)))
            .sum();
        linear[j] = 1.0 - a[j] * s / times as f64;
    }
    QuadraticProgram::new(gram, linear)
}

const PG_ITERATIONS: usize = 500;
const MAX_ACTIVE_SET_ROUNDS: usize = 500;

/// Minimizes the program over `c >= 0` to KKT residual `tol`: projected
/// gradient with Barzilai-Borwein steps to find the support, then an exact
/// active-set polish.
pub fn solve_nnqp(qp: &QuadraticProgram, tol: f64) -> Result<DVector<f64>> {
    solve_nnqp_from(qp, None, tol)
}

/// As [`solve_nnqp`], warm-started from `start` (negative entries are clipped).
pub fn solve_nnqp_from(
    qp: &QuadraticProgram,
    start: Option<&DVector<f64>>,
    tol: f64,
) -> Result<DVector<f64>> {
    let n = qp.len();
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    let mut c = match start {
        Some(s) if s.len() == n => s.map(|v| v.max(0.0)),
        _ => DVector::zeros(n),
    };
    projected_gradient(qp, &mut c);
    let polished = active_set(qp, &c, tol);
    let best = match polished {
        Some(p) if qp.kkt_residual(&p) <= qp.kkt_residual(&c) => p,
        _ => c,
    };
    let residual = qp.kkt_residual(&best);
    if residual <= tol {
        Ok(best)
    } else {
        Err(Error::QpBudget {
            iterations: PG_ITERATIONS + MAX_ACTIVE_SET_ROUNDS,
            residual,
            best: best.iter().copied().collect(),
        })
    }
}

fn projected_gradient(qp: &QuadraticProgram, c: &mut DVector<f64>) {
    let lmax = qp.gram.diagonal().sum().max(1e-300);
    let mut step = 1.0 / lmax;
    let mut g = qp.gradient(c);
    for _ in 0..PG_ITERATIONS {
        let next = (&*c - &g * step).map(|v| v.max(0.0));
        let gn = qp.gradient(&next);
        let s = &next - &*c;
        let y = &gn - &g;
        let ss = s.dot(&s);
        if ss == 0.0 {
            break;
        }
        let sy = s.dot(&y);
        step = if sy > 0.0 { ss / sy } else { 1.0 / lmax };
        // keep the iteration monotone
        if qp.value(&next) > qp.value(c) {
            step = 1.0 / lmax;
            let safe = (&*c - &g * step).map(|v| v.max(0.0));
            g = qp.gradient(&safe);
            *c = safe;
            continue;
        }
        *c = next;
        g = gn;
    }
}

/// Least-squares solution of `gram_PP z = -linear_P` on the index set `set`.
fn solve_on_support(qp: &QuadraticProgram, set: &[usize]) -> Option<Vec<f64>> {
    let m = set.len();
    let sub = DMatrix::from_fn(m, m, |r, s| qp.gram[(set[r], set[s])]);
    let rhs = DVector::from_fn(m, |r, _| -qp.linear[set[r]]);
    if let Some(chol) = sub.clone().cholesky() {
        let z = chol.solve(&rhs);
        if z.iter().all(|v| v.is_finite()) {
            let res = (&sub * &z - &rhs).amax();
            if res <= 1e-12 * (1.0 + rhs.amax()) {
                return Some(z.iter().copied().collect());
            }
        }
    }
    let svd = sub.svd(true, true);
    let eps = svd.singular_values.max() * 1e-13;
    svd.solve(&rhs, eps)
        .ok()
        .map(|z| z.iter().copied().collect())
}

fn active_set(qp: &QuadraticProgram, start: &DVector<f64>, tol: f64) -> Option<DVector<f64>> {
    let n = qp.len();
    let mut x = start.clone();
    let mut in_set: Vec<bool> = x.iter().map(|&v| v > 0.0).collect();
    let threshold = (1e-13 * (1.0 + qp.linear.amax())).min(tol);
    for _ in 0..MAX_ACTIVE_SET_ROUNDS {
        // inner loop: move to the unconstrained minimizer on the support,
        // dropping coordinates that would turn negative
        loop {
            let set: Vec<usize> = (0..n).filter(|&j| in_set[j]).collect();
            if set.is_empty() {
                x.fill(0.0);
                break;
            }
            let z = solve_on_support(qp, &set)?;
            if z.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (&j, &v) in set.iter().zip(&z) {
                    x[j] = v;
                }
                break;
            }
            let mut alpha = 1.0f64;
            for (&j, &v) in set.iter().zip(&z) {
                if v <= 0.0 {
                    let d = x[j] - v;
                    if d > 0.0 {
                        alpha = alpha.min(x[j] / d);
                    }
                }
            }
            for (&j, &v) in set.iter().zip(&z) {
                x[j] += alpha * (v - x[j]);
            }
            let mut removed = false;
            for (&j, &v) in set.iter().zip(&z) {
                if v <= 0.0 && x[j] <= 1e-15 * (1.0 + x.amax()) {
                    x[j] = 0.0;
                    in_set[j] = false;
                    removed = true;
                }
            }
            if !removed {
                // numerical stall: drop the most negative candidate
                let (k, _) = set
                    .iter()
                    .zip(&z)
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(&j, &v)| (j, v))?;
                x[k] = 0.0;
                in_set[k] = false;
            }
        }
        let g = qp.gradient(&x);
        let entering = (0..n)
            .filter(|&j| !in_set[j])
            .min_by(|&a, &b| g[a].total_cmp(&g[b]));
        match entering {
            Some(j) if g[j] < -threshold => in_set[j] = true,
            _ => return Some(x),
        }
    }
    Some(x)
}
