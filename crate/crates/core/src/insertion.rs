//! Insertion step: minimize `F(curve) = W(curve) / L(curve)` with
//! `W = -1/(T+1) sum_i w_i(curve(t_i))` over piecewise-linear curves.
//!
//! Stationary points are found by projected gradient descent with Armijo
//! backtracking from many starts: the curves of the current iterate, random
//! curves sampled where the dual variable is large, and crossovers of
//! stationary curves found so far.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{curve_cost, Curve, ExtendedCurve, Point, TimeGrid};
use crate::problem::{positivity_test, DualVariable};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DescentConfig {
    pub max_iterations: usize,
    pub armijo_shrink: f64,
    pub armijo_slope: f64,
    pub initial_step: f64,
    pub stationarity_tol: f64,
    pub max_backtracks: usize,
    /// Precondition the gradient with `(I - Laplacian)^-1` along each curve.
    pub h1_preconditioner: bool,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            max_iterations: 3000,
            armijo_shrink: 0.5,
            armijo_slope: 1e-4,
            initial_step: 1.0,
            stationarity_tol: 1e-6,
            max_backtracks: 40,
            h1_preconditioner: false,
        }
    }
}

impl DescentConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !(unit(self.armijo_shrink)
            && unit(self.armijo_slope)
            && self.initial_step > 0.0
            && self.stationarity_tol > 0.0
            && self.max_iterations > 0
            && self.max_backtracks > 0)
        {
            return Err(Error::invalid(format!(
                "invalid descent configuration {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultistartConfig {
    /// Restart budget `N_max` beyond the descents of the known curves.
    pub restarts: usize,
    pub crossover_eps: f64,
    pub crossover_delta: f64,
    /// Sampling density is proportional to `max(w, 0)^q_power`.
    pub q_power: f64,
    pub dedup_tol: f64,
    /// Random starts fix nodes every `anchor_stride` sample times.
    pub anchor_stride: usize,
    pub positivity_resolution: usize,
}

impl Default for MultistartConfig {
    fn default() -> Self {
        Self {
            restarts: 5,
            crossover_eps: 0.05,
            crossover_delta: 0.5,
            q_power: 2.0,
            dedup_tol: 1e-3,
            anchor_stride: 5,
            positivity_resolution: 64,
        }
    }
}

impl MultistartConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.crossover_eps > 0.0
            && self.crossover_delta > 0.0
            && self.crossover_delta < 1.0
            && self.q_power >= 0.0
            && self.dedup_tol > 0.0
            && self.anchor_stride > 0
            && self.positivity_resolution >= 2)
        {
            return Err(Error::invalid(format!(
                "invalid multistart configuration {self:?}"
            )));
        }
        Ok(())
    }
}

/// `F(curve) = W(curve) / L(curve)`.
pub fn insertion_value(curve: &Curve, w: &DualVariable) -> f64 {
    -w.time_average(curve) / curve_cost(curve, w.params())
}

/// `F` and its gradient with respect to the curve nodes.
pub fn insertion_value_grad(curve: &Curve, w: &DualVariable) -> (f64, Vec<Point>) {
    let n = curve.num_nodes();
    let t = (n - 1) as f64;
    let beta = w.params().beta;
    let l = curve_cost(curve, w.params());
    let mut wsum = 0.0;
    let mut grad_w = Vec::with_capacity(n);
    for i in 0..n {
        let (v, g) = w.eval_grad(i, curve.node(i));
        wsum += v;
        grad_w.push([-g[0] / n as f64, -g[1] / n as f64]);
    }
    let f = -wsum / n as f64 / l;
    let nodes = curve.nodes();
    let grad = (0..n)
        .map(|i| {
            let mut lap = [0.0; 2];
            for d in 0..2 {
                if i > 0 {
                    lap[d] += nodes[i][d] - nodes[i - 1][d];
                }
                if i + 1 < n {
                    lap[d] += nodes[i][d] - nodes[i + 1][d];
                }
            }
            let dl = [beta * t * lap[0], beta * t * lap[1]];
            [
                (grad_w[i][0] - f * dl[0]) / l,
                (grad_w[i][1] - f * dl[1]) / l,
            ]
        })
        .collect();
    (f, grad)
}

pub fn insertion_gradient(curve: &Curve, w: &DualVariable) -> Vec<Point> {
    insertion_value_grad(curve, w).1
}

/// Euclidean norm of the gradient after zeroing components that push a node
/// out of the unit square.
pub(crate) fn projected_norm(x: &[Point], g: &[Point]) -> f64 {
    let mut s = 0.0;
    for (p, d) in x.iter().zip(g) {
        for k in 0..2 {
            let blocked = (p[k] <= 0.0 && d[k] > 0.0) || (p[k] >= 1.0 && d[k] < 0.0);
            if !blocked {
                s += d[k] * d[k];
            }
        }
    }
    s.sqrt()
}

/// Solves `(I + T * Lap) v = g` per coordinate for a chain of `n` nodes with
/// free ends.
fn h1_smooth(g: &mut [Point]) {
    let n = g.len();
    if n < 2 {
        return;
    }
    let k = (n - 1) as f64;
    for d in 0..2 {
        // tridiagonal: diag 1 + k*deg, off -k
        let mut c = vec![0.0; n];
        let mut r: Vec<f64> = g.iter().map(|p| p[d]).collect();
        let diag = |i: usize| 1.0 + k * if i == 0 || i == n - 1 { 1.0 } else { 2.0 };
        let mut b = diag(0);
        c[0] = -k / b;
        r[0] /= b;
        for i in 1..n {
            b = diag(i) + k * c[i - 1];
            c[i] = -k / b;
            r[i] = (r[i] + k * r[i - 1]) / b;
        }
        for i in (0..n - 1).rev() {
            r[i] -= c[i] * r[i + 1];
        }
        for (p, v) in g.iter_mut().zip(r) {
            p[d] = v;
        }
    }
}

/// Result of a projected Armijo run on stacked node coordinates.
#[derive(Debug, Clone)]
pub(crate) struct ArmijoRun {
    pub x: Vec<Point>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub stationary: bool,
}

/// Projected gradient descent on `[0,1]^2` nodes with Barzilai-Borwein trial
/// steps and Armijo backtracking. `eval` returns value and gradient, `value`
/// only the value. `block` is the curve length used by the preconditioner.
pub(crate) fn projected_armijo<E, V>(
    mut x: Vec<Point>,
    eval: E,
    value: V,
    cfg: &DescentConfig,
    max_iterations: usize,
    block: usize,
) -> Result<ArmijoRun>
where
    E: Fn(&[Point]) -> (f64, Vec<Point>),
    V: Fn(&[Point]) -> f64,
{
    let check = |f: f64, g: &[Point], it: usize| -> Result<()> {
        if !f.is_finite() || g.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(
                "gradient descent",
                format!("value {f} at iteration {it}"),
            ));
        }
        Ok(())
    };
    let (mut f, mut g) = eval(&x);
    check(f, &g, 0)?;
    let mut prev: Option<(Vec<Point>, Vec<Point>)> = None;
    let mut iterations = 0;
    let mut grad_norm = projected_norm(&x, &g);
    let mut stationary = grad_norm < cfg.stationarity_tol;
    while !stationary && iterations < max_iterations {
        let mut dir = g.clone();
        if cfg.h1_preconditioner {
            for chunk in dir.chunks_mut(block.max(1)) {
                h1_smooth(chunk);
            }
        }
        let mut step = cfg.initial_step;
        if let Some((px, pg)) = &prev {
            let (mut ss, mut sy) = (0.0, 0.0);
            for i in 0..x.len() {
                for k in 0..2 {
                    let s = x[i][k] - px[i][k];
                    ss += s * s;
                    sy += s * (g[i][k] - pg[i][k]);
                }
            }
            if sy > 0.0 && ss > 0.0 {
                let bb = ss / sy;
                if bb.is_finite() {
                    step = bb.clamp(1e-10, 1e6);
                }
            }
        }
        let mut accepted = None;
        for _ in 0..cfg.max_backtracks {
            let trial: Vec<Point> = x
                .iter()
                .zip(&dir)
                .map(|(p, d)| {
                    [
                        (p[0] - step * d[0]).clamp(0.0, 1.0),
                        (p[1] - step * d[1]).clamp(0.0, 1.0),
                    ]
                })
                .collect();
            let decrease: f64 = x
                .iter()
                .zip(&trial)
                .zip(&g)
                .map(|((p, q), d)| d[0] * (p[0] - q[0]) + d[1] * (p[1] - q[1]))
                .sum();
            if decrease <= 0.0 {
                break;
            }
            let ft = value(&trial);
            if ft.is_finite() && ft <= f - cfg.armijo_slope * decrease {
                accepted = Some(trial);
                break;
            }
            step *= cfg.armijo_shrink;
        }
        let Some(next) = accepted else {
            // no admissible step: stationary to working precision
            break;
        };
        iterations += 1;
        let (fn_, gn) = eval(&next);
        check(fn_, &gn, iterations)?;
        prev = Some((
            std::mem::replace(&mut x, next),
            std::mem::replace(&mut g, gn),
        ));
        f = fn_;
        grad_norm = projected_norm(&x, &g);
        stationary = grad_norm < cfg.stationarity_tol;
    }
    Ok(ArmijoRun {
        x,
        value: f,
        grad_norm,
        iterations,
        stationary,
    })
}

/// Outcome of one descent from a start curve.
#[derive(Debug, Clone)]
pub struct Descent {
    pub curve: ExtendedCurve,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// Whether the gradient norm went below the tolerance; `false` means the
    /// budget ran out or no Armijo step could be found.
    pub stationary: bool,
}

/// Descends `F` from `start`. Returns the point at infinity when
/// `F(start) >= 0`.
pub fn descend(start: &Curve, w: &DualVariable, cfg: &DescentConfig) -> Result<Descent> {
    cfg.validate()?;
    if start.num_nodes() != w.num_times() {
        return Err(Error::invalid(
            "start curve and dual variable use different grids",
        ));
    }
    let f0 = insertion_value(start, w);
    if !f0.is_finite() {
        return Err(Error::non_finite(
            "insertion value",
            format!("{f0} at start"),
        ));
    }
    if f0 >= 0.0 {
        return Ok(Descent {
            curve: ExtendedCurve::Infinity,
            value: 0.0,
            grad_norm: 0.0,
            iterations: 0,
            stationary: true,
        });
    }
    let as_curve = |x: &[Point]| Curve::clamped(x.to_vec()).expect("finite clamped nodes");
    let run = projected_armijo(
        start.nodes().to_vec(),
        |x| insertion_value_grad(&as_curve(x), w),
        |x| insertion_value(&as_curve(x), w),
        cfg,
        cfg.max_iterations,
        start.num_nodes(),
    )?;
    Ok(Descent {
        curve: ExtendedCurve::Finite(Curve::clamped(run.x)?),
        value: run.value,
        grad_norm: run.grad_norm,
        iterations: run.iterations,
        stationary: run.stationary,
    })
}

const E_LO: f64 = 0.05;
const E_HI: f64 = 0.95;
const MAX_PROPOSALS: usize = 100_000;
const BOUND_GRID: usize = 32;

/// Rejection sampler for random start curves with node density
/// proportional to `max(w_i, 0)^q` on `[0.05, 0.95]^2` at anchor times.
pub struct StartSampler<'w, 'a> {
    w: &'w DualVariable<'a>,
    anchors: Vec<usize>,
    bounds: Vec<f64>,
    q_power: f64,
}

impl<'w, 'a> StartSampler<'w, 'a> {
    pub fn new(
        w: &'w DualVariable<'a>,
        grid: &TimeGrid,
        anchor_stride: usize,
        q_power: f64,
    ) -> Result<Self> {
        if anchor_stride == 0 || q_power < 0.0 {
            return Err(Error::invalid(
                "anchor stride must be positive and q_power nonnegative",
            ));
        }
        if grid.num_nodes() != w.num_times() {
            return Err(Error::invalid(
                "grid and dual variable use different time grids",
            ));
        }
        let last = grid.intervals();
        let mut anchors: Vec<usize> = (0..=last).step_by(anchor_stride).collect();
        if *anchors.last().unwrap() != last {
            anchors.push(last);
        }
        let q = |v: f64| v.max(0.0).powf(q_power);
        let bounds = anchors
            .par_iter()
            .map(|&i| {
                let mut m = 0.0f64;
                for a in 0..=BOUND_GRID {
                    for b in 0..=BOUND_GRID {
                        let x = [
                            E_LO + (E_HI - E_LO) * a as f64 / BOUND_GRID as f64,
                            E_LO + (E_HI - E_LO) * b as f64 / BOUND_GRID as f64,
                        ];
                        m = m.max(q(w.eval(i, x)));
                    }
                }
                // grid maxima underestimate the true maximum slightly
                1.25 * m
            })
            .collect();
        Ok(Self {
            w,
            anchors,
            bounds,
            q_power,
        })
    }

    fn density(&self, i: usize, x: Point) -> f64 {
        self.w.eval(i, x).max(0.0).powf(self.q_power)
    }

    fn sample_node<R: Rng>(&self, k: usize, rng: &mut R) -> Point {
        let i = self.anchors[k];
        let bound = self.bounds[k];
        let uniform = |rng: &mut R| [rng.random_range(E_LO..=E_HI), rng.random_range(E_LO..=E_HI)];
        if bound > 0.0 {
            for _ in 0..MAX_PROPOSALS {
                let x = uniform(rng);
                if rng.random::<f64>() * bound < self.density(i, x) {
                    return x;
                }
            }
        }
        uniform(rng)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Curve {
        let pts: Vec<Point> = (0..self.anchors.len())
            .map(|k| self.sample_node(k, rng))
            .collect();
        let n = self.w.num_times();
        let mut nodes = Vec::with_capacity(n);
        let mut k = 0;
        for i in 0..n {
            while k + 2 < self.anchors.len() && i > self.anchors[k + 1] {
                k += 1;
            }
            let (a, b) = (self.anchors[k], self.anchors[k + 1]);
            let s = (i - a) as f64 / (b - a) as f64;
            let (p, q) = (pts[k], pts[k + 1]);
            nodes.push([p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1])]);
        }
        Curve::new(nodes).expect("interpolated nodes stay in the sampling box")
    }
}

/// One random start curve drawn with its own seeded generator.
pub fn sample_start(w: &DualVariable, grid: &TimeGrid, q_power: f64, seed: u64) -> Result<Curve> {
    let sampler = StartSampler::new(w, grid, MultistartConfig::default().anchor_stride, q_power)?;
    Ok(sampler.sample(&mut ChaCha8Rng::seed_from_u64(seed)))
}

/// Swaps the tails of two curves wherever they come within `eps` of each
/// other, bridging linearly over the middle `delta` fraction of each
/// closeness interval. Returns two curves per interval.
pub fn crossover(a: &Curve, b: &Curve, eps: f64, delta: f64) -> Result<Vec<Curve>> {
    if a.num_nodes() != b.num_nodes() {
        return Err(Error::invalid("crossover needs curves on the same grid"));
    }
    if !(eps > 0.0 && delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(
            "crossover needs eps > 0 and delta in (0, 1)",
        ));
    }
    let n = a.num_nodes();
    let t_of = |i: usize| i as f64 / (n - 1) as f64;
    let close: Vec<bool> = (0..n)
        .map(|i| crate::geometry::dist(a.node(i), b.node(i)) < eps)
        .collect();
    let mut components = Vec::new();
    let mut i = 0;
    while i < n {
        if close[i] {
            let start = i;
            while i + 1 < n && close[i + 1] {
                i += 1;
            }
            components.push((start, i));
        }
        i += 1;
    }
    if components.len() == 1 && components[0] == (0, n - 1) {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(2 * components.len());
    for (s, e) in components {
        let mid = 0.5 * (t_of(s) + t_of(e));
        let half = 0.5 * (t_of(e) - t_of(s));
        let lo = mid - delta * half;
        let hi = mid + delta * half;
        for (first, second) in [(a, b), (b, a)] {
            let p = first.eval(lo);
            let q = second.eval(hi);
            let nodes = (0..n)
                .map(|i| {
                    let t = t_of(i);
                    if t <= lo {
                        first.node(i)
                    } else if t >= hi {
                        second.node(i)
                    } else {
                        let s = (t - lo) / (hi - lo);
                        [p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1])]
                    }
                })
                .collect();
            let c = Curve::clamped(nodes)?;
            if c.nodes() != a.nodes() && c.nodes() != b.nodes() {
                out.push(c);
            }
        }
    }
    Ok(out)
}

/// A stationary curve of `F` together with its value.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub curve: Curve,
    pub value: f64,
    pub grad_norm: f64,
    pub stationary: bool,
}

/// Generator of the `k`-th random start in insertion round `round`.
pub(crate) fn restart_rng(seed: u64, round: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((round << 32) ^ k);
    rng
}

/// Multistart gradient descent. Every curve in `known` is descended first;
/// then `restarts` further descents start from pending crossovers or, when
/// none are pending, from random samples. Returns the distinct finite
/// results sorted by increasing `F`.
pub fn multistart(
    known: &[Curve],
    w: &DualVariable,
    mcfg: &MultistartConfig,
    dcfg: &DescentConfig,
    seed: u64,
    round: u64,
) -> Result<Vec<Candidate>> {
    mcfg.validate()?;
    dcfg.validate()?;
    if known.is_empty() && positivity_test(w, mcfg.positivity_resolution)? <= 0.0 {
        return Ok(Vec::new());
    }
    let grid = TimeGrid::new(w.num_times() - 1)?;
    let mut found: Vec<Candidate> = Vec::new();
    let mut pending: VecDeque<Curve> = VecDeque::new();

    let admit =
        |d: Descent, found: &mut Vec<Candidate>, pending: &mut VecDeque<Curve>| -> Result<()> {
            let Descent {
                curve,
                value,
                grad_norm,
                stationary,
                ..
            } = d;
            let Some(curve) = curve.finite() else {
                return Ok(());
            };
            if value >= 0.0
                || found
                    .iter()
                    .any(|c| c.curve.max_node_distance(&curve) < mcfg.dedup_tol)
            {
                return Ok(());
            }
            for other in found.iter() {
                pending.extend(crossover(
                    &curve,
                    &other.curve,
                    mcfg.crossover_eps,
                    mcfg.crossover_delta,
                )?);
            }
            found.push(Candidate {
                curve,
                value,
                grad_norm,
                stationary,
            });
            Ok(())
        };

    let seeded: Vec<Result<Descent>> = known.par_iter().map(|c| descend(c, w, dcfg)).collect();
    for d in seeded {
        admit(d?, &mut found, &mut pending)?;
    }

    let mut sampler = None;
    for k in 0..mcfg.restarts {
        let start = match pending.pop_front() {
            Some(c) => c,
            None => {
                if sampler.is_none() {
                    sampler = Some(StartSampler::new(
                        w,
                        &grid,
                        mcfg.anchor_stride,
                        mcfg.q_power,
                    )?);
                }
                let mut rng = restart_rng(seed, round, k as u64);
                sampler.as_ref().unwrap().sample(&mut rng)
            }
        };
        admit(descend(&start, w, dcfg)?, &mut found, &mut pending)?;
    }
    found.sort_by(|a, b| {
        a.value.total_cmp(&b.value).then_with(|| {
            let (x, y) = (a.curve.nodes(), b.curve.nodes());
            x.iter()
                .flatten()
                .zip(y.iter().flatten())
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    Ok(found)
}
