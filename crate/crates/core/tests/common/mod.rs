#![allow(dead_code)]

use dgcg::forward::{FrequencySchedule, Measurements};
use dgcg::geometry::{Curve, Point, RegParams, SparseMeasure, TimeGrid};
use dgcg::Problem;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

pub fn random_point(rng: &mut impl Rng, lo: f64, hi: f64) -> Point {
    [rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

/// Random curve with nodes in `[lo, hi]^2`.
pub fn random_curve(rng: &mut impl Rng, grid: &TimeGrid, lo: f64, hi: f64) -> Curve {
    Curve::new(
        (0..grid.num_nodes())
            .map(|_| random_point(rng, lo, hi))
            .collect(),
    )
    .unwrap()
}

/// Random smooth curve: a line plus one sine mode, inside `[0.15, 0.85]^2`.
pub fn random_smooth_curve(rng: &mut impl Rng, grid: &TimeGrid) -> Curve {
    let p = random_point(rng, 0.3, 0.7);
    let v = random_point(rng, -0.3, 0.3);
    let amp = random_point(rng, -0.1, 0.1);
    Curve::from_fn(grid, |t| {
        let s = (std::f64::consts::PI * t).sin();
        [
            p[0] + v[0] * (t - 0.5) + amp[0] * s,
            p[1] + v[1] * (t - 0.5) + amp[1] * s,
        ]
    })
    .unwrap()
}

pub fn random_measure(
    rng: &mut impl Rng,
    grid: &TimeGrid,
    params: RegParams,
    n: usize,
) -> SparseMeasure {
    let curves = (0..n).map(|_| random_smooth_curve(rng, grid)).collect();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    SparseMeasure::from_parts(params, curves, &w).unwrap()
}

pub fn random_measurements(rng: &mut impl Rng, schedule: &FrequencySchedule) -> Measurements {
    let mut m = Measurements::zeros(schedule);
    for v in &mut m.0 {
        for z in &mut v.0 {
            *z = Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        }
    }
    m
}

pub fn small_spiral(grid: &TimeGrid) -> FrequencySchedule {
    FrequencySchedule::spiral(12, std::f64::consts::TAU / 10.0, 6.0, grid).unwrap()
}

/// Problem with random Gaussian data on a small spiral schedule.
pub fn random_problem(rng: &mut impl Rng, intervals: usize, params: RegParams) -> Problem {
    let grid = TimeGrid::new(intervals).unwrap();
    let schedule = small_spiral(&grid);
    let data = random_measurements(rng, &schedule);
    Problem::new(grid, schedule, data, params).unwrap()
}

/// Symmetric positive definite matrix `A^T A` with `A` Gaussian, plus a
/// Gaussian linear term.
pub fn random_pd(rng: &mut impl Rng, n: usize) -> (DMatrix<f64>, DVector<f64>) {
    let a = DMatrix::from_fn(n + 3, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let g = a.transpose() * a;
    let b = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    (g, b)
}

/// Exhaustive minimizer of `1/2 c^T G c + b^T c` over `c >= 0` for positive
/// definite `G`: every support is tried and the best KKT point is kept.
pub fn brute_force_nnqp(g: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = b.len();
    let value = |c: &DVector<f64>| 0.5 * c.dot(&(g * c)) + b.dot(c);
    let mut best = DVector::zeros(n);
    let mut best_value = 0.0;
    for mask in 1u32..(1 << n) {
        let idx: Vec<usize> = (0..n).filter(|j| mask & (1 << j) != 0).collect();
        let gs = DMatrix::from_fn(idx.len(), idx.len(), |r, c| g[(idx[r], idx[c])]);
        let bs = DVector::from_fn(idx.len(), |r, _| -b[idx[r]]);
        let Some(cs) = gs.lu().solve(&bs) else {
            continue;
        };
        if cs.iter().any(|&v| v < 0.0) {
            continue;
        }
        let mut c = DVector::zeros(n);
        for (k, &j) in idx.iter().enumerate() {
            c[j] = cs[k];
        }
        let v = value(&c);
        if v < best_value {
            best_value = v;
            best = c;
        }
    }
    best
}
