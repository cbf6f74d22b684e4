//! The time-discrete variational problem: data, objective, dual variable and
//! the quantities the stopping rule is built from.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ForwardOperator, FrequencySchedule, MeasurementVector, Measurements};
use crate::geometry::{
    normalization, regularizer, Curve, Point, RegParams, SparseMeasure, TimeGrid,
};

/// Data, operator and regularization parameters of one reconstruction.
#[derive(Debug, Clone)]
pub struct Problem {
    grid: TimeGrid,
    op: ForwardOperator,
    data: Measurements,
    params: RegParams,
    m0: f64,
}

impl Problem {
    pub fn new(
        grid: TimeGrid,
        schedule: FrequencySchedule,
        data: Measurements,
        params: RegParams,
    ) -> Result<Self> {
        schedule.check_grid(&grid)?;
        data.check_schedule(&schedule)?;
        if data.0.iter().flat_map(|v| &v.0).any(|z| !z.is_finite()) {
            return Err(Error::non_finite(
                "problem data",
                "data contains NaN or infinity",
            ));
        }
        let m0 = 0.5 * data.total_norm_sq() / grid.num_nodes() as f64;
        Ok(Self {
            grid,
            op: ForwardOperator::new(schedule),
            data,
            params,
            m0,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn operator(&self) -> &ForwardOperator {
        &self.op
    }

    pub fn schedule(&self) -> &FrequencySchedule {
        self.op.schedule()
    }

    pub fn data(&self) -> &Measurements {
        &self.data
    }

    pub fn params(&self) -> RegParams {
        self.params
    }

    /// Objective of the zero measure.
    pub fn m0(&self) -> f64 {
        self.m0
    }

    pub fn with_params(&self, params: RegParams) -> Self {
        Self {
            params,
            ..self.clone()
        }
    }

    pub(crate) fn check_measure(&self, mu: &SparseMeasure) -> Result<()> {
        for a in mu.atoms() {
            a.curve.check_grid(&self.grid)?;
        }
        Ok(())
    }

    /// `K* rho - f` at every sample time.
    pub fn residual(&self, mu: &SparseMeasure) -> Measurements {
        Measurements(
            (0..self.grid.num_nodes())
                .map(|i| self.op.apply_forward(mu, i).sub(self.data.at(i)))
                .collect(),
        )
    }

    /// Fidelity and regularizer of `mu`.
    pub fn objective(&self, mu: &SparseMeasure) -> Result<Objective> {
        self.check_measure(mu)?;
        let r = self.residual(mu);
        let fidelity = 0.5 * r.total_norm_sq() / self.grid.num_nodes() as f64;
        let reg = regularizer(mu);
        if !(fidelity.is_finite() && reg.is_finite()) {
            return Err(Error::non_finite(
                "objective",
                format!("fidelity={fidelity}, regularizer={reg}"),
            ));
        }
        Ok(Objective {
            fidelity,
            regularizer: reg,
        })
    }

    pub fn dual_variable(&self, mu: &SparseMeasure) -> Result<DualVariable<'_>> {
        self.check_measure(mu)?;
        let r = self.residual(mu);
        Ok(DualVariable::from_residual(&self.op, self.params, &r))
    }

    /// `sqrt(sum ||K* rho - f||^2) / sqrt(sum ||f||^2)`.
    pub fn relative_residual(&self, mu: &SparseMeasure) -> Result<f64> {
        let fid = self.objective(mu)?.fidelity;
        let norm = self.data.total_norm_sq();
        if norm == 0.0 {
            return Ok(0.0);
        }
        Ok((2.0 * self.grid.num_nodes() as f64 * fid / norm).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub fidelity: f64,
    pub regularizer: f64,
}

impl Objective {
    pub fn total(&self) -> f64 {
        self.fidelity + self.regularizer
    }
}

/// `f_i = K*_{t_i} rho_{t_i}` for a ground-truth measure.
pub fn synthesize(ground_truth: &SparseMeasure, op: &ForwardOperator) -> Result<Measurements> {
    for a in ground_truth.atoms() {
        if a.curve.num_nodes() != op.num_times() {
            return Err(Error::invalid(
                "ground-truth curves and schedule use different time grids",
            ));
        }
    }
    Ok(op.apply_forward_all(ground_truth))
}

/// Adds complex Gaussian noise scaled so that `||f_eps - f|| / ||f|| = eps`.
pub fn add_noise(f: &Measurements, eps: f64, seed: u64) -> Result<Measurements> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!(
            "noise level must be >= 0, got {eps}"
        )));
    }
    if eps == 0.0 {
        return Ok(f.clone());
    }
    let fnorm = f.total_norm_sq();
    if fnorm == 0.0 {
        return Err(Error::invalid(
            "cannot scale noise to identically zero data",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nu = Measurements(
        f.0.iter()
            .map(|v| {
                MeasurementVector(
                    (0..v.len())
                        .map(|_| {
                            let re: f64 = StandardNormal.sample(&mut rng);
                            let im: f64 = StandardNormal.sample(&mut rng);
                            Complex64::new(re, im)
                        })
                        .collect(),
                )
            })
            .collect(),
    );
    let scale = eps * (fnorm / nu.total_norm_sq()).sqrt();
    let mut out = f.clone();
    for (o, n) in out.0.iter_mut().zip(&nu.0) {
        o.axpy(scale, n);
    }
    Ok(out)
}

/// `w_{t_i} = -K_{t_i}(K*_{t_i} rho_{t_i} - f_{t_i})`, evaluated pointwise.
#[derive(Debug, Clone)]
pub struct DualVariable<'a> {
    op: &'a ForwardOperator,
    params: RegParams,
    // negated residual, so that w_i = K_i(neg_residual_i)
    neg_residual: Measurements,
}

impl<'a> DualVariable<'a> {
    pub fn from_residual(
        op: &'a ForwardOperator,
        params: RegParams,
        residual: &Measurements,
    ) -> Self {
        Self {
            op,
            params,
            neg_residual: residual.scaled(-1.0),
        }
    }

    /// `w_i = K_i f_i`, the dual variable of the zero measure.
    pub fn backprojection(op: &'a ForwardOperator, params: RegParams, data: &Measurements) -> Self {
        Self {
            op,
            params,
            neg_residual: data.clone(),
        }
    }

    pub fn residual(&self) -> Measurements {
        self.neg_residual.scaled(-1.0)
    }

    pub fn params(&self) -> RegParams {
        self.params
    }

    pub fn operator(&self) -> &ForwardOperator {
        self.op
    }

    pub fn num_times(&self) -> usize {
        self.neg_residual.num_times()
    }

    pub fn eval(&self, i: usize, x: Point) -> f64 {
        self.op.preadjoint_value(self.neg_residual.at(i), i, x)
    }

    pub fn eval_grad(&self, i: usize, x: Point) -> (f64, Point) {
        self.op.preadjoint_value_grad(self.neg_residual.at(i), i, x)
    }

    /// `1/(T+1) sum_i w_i(curve(t_i))`.
    pub fn time_average(&self, curve: &Curve) -> f64 {
        let n = curve.num_nodes();
        (0..n).map(|i| self.eval(i, curve.node(i))).sum::<f64>() / n as f64
    }

    /// Negates the dual variable.
    pub fn negated(&self) -> Self {
        Self {
            op: self.op,
            params: self.params,
            neg_residual: self.neg_residual.scaled(-1.0),
        }
    }
}

/// `<rho_curve, w> = a_curve / (T+1) sum_i w_i(curve(t_i))`.
pub fn pairing(curve: &Curve, w: &DualVariable) -> f64 {
    normalization(curve, w.params()) * w.time_average(curve)
}

/// `Lambda(t) = 0` for `t <= 1` and `m0/2 (t^2 - 1)` beyond.
pub fn dual_gap(pairing_value: f64, m0: f64) -> f64 {
    if pairing_value <= 1.0 {
        0.0
    } else {
        0.5 * m0 * (pairing_value * pairing_value - 1.0)
    }
}

/// `T(mu^n) - T(mu^N)` for every logged iterate against the final one.
pub fn numerical_residuals(objectives: &[f64]) -> Vec<f64> {
    match objectives.last() {
        Some(&last) => objectives.iter().map(|o| o - last).collect(),
        None => Vec::new(),
    }
}

const ASCENT_STEPS: usize = 20;

/// Maximum of `w_i` over the closed square, by grid search and a short
/// projected ascent from the best cell.
pub fn spatial_max(w: &DualVariable, i: usize, resolution: usize) -> (f64, Point) {
    let h = 1.0 / (resolution - 1) as f64;
    let mut best = (f64::NEG_INFINITY, [0.5, 0.5]);
    for a in 0..resolution {
        for b in 0..resolution {
            let x = [a as f64 * h, b as f64 * h];
            let v = w.eval(i, x);
            if v > best.0 {
                best = (v, x);
            }
        }
    }
    let (mut val, mut x) = best;
    let mut step = h;
    for _ in 0..ASCENT_STEPS {
        let (_, g) = w.eval_grad(i, x);
        let gn = g[0].hypot(g[1]);
        if gn == 0.0 {
            break;
        }
        let mut moved = false;
        while step > 1e-12 {
            let y = [
                (x[0] + step * g[0] / gn).clamp(0.0, 1.0),
                (x[1] + step * g[1] / gn).clamp(0.0, 1.0),
            ];
            let vy = w.eval(i, y);
            if vy > val {
                val = vy;
                x = y;
                moved = true;
                step *= 1.5;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    (val, x)
}

/// `P(w) = 1/(T+1) sum_i max_x w_i(x)`. `P <= 0` certifies that the zero
/// measure is optimal.
pub fn positivity_test(w: &DualVariable, resolution: usize) -> Result<f64> {
    if resolution < 2 {
        return Err(Error::invalid(
            "positivity test needs a grid resolution >= 2",
        ));
    }
    let n = w.num_times();
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| spatial_max(w, i, resolution).0)
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(total / n as f64)
}

/// 8-bit grayscale image, row-major, row 0 at the top (`x_2 = 1`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub resolution: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn pixel(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.resolution + col]
    }

    /// Spatial centre of a pixel.
    pub fn center(resolution: usize, row: usize, col: usize) -> Point {
        let h = 1.0 / resolution as f64;
        [(col as f64 + 0.5) * h, 1.0 - (row as f64 + 0.5) * h]
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.resolution, self.resolution).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm())?;
        Ok(())
    }
}

/// Samples `K_{t_i} f_{t_i}` on pixel centres and min-max normalizes to 0..255.
pub fn backprojection_raster(
    op: &ForwardOperator,
    f: &Measurements,
    i: usize,
    resolution: usize,
) -> Result<Raster> {
    if resolution == 0 {
        return Err(Error::invalid("raster resolution must be positive"));
    }
    if i >= f.num_times() || i >= op.num_times() {
        return Err(Error::invalid(format!("time index {i} out of range")));
    }
    let h = f.at(i);
    let mut values = Vec::with_capacity(resolution * resolution);
    for row in 0..resolution {
        for col in 0..resolution {
            values.push(op.apply_preadjoint(h, i, Raster::center(resolution, row, col))?);
        }
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pixels = values
        .iter()
        .map(|v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    Ok(Raster { resolution, pixels })
}

/// One row of the convergence log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub objective: f64,
    pub fidelity: f64,
    pub regularizer: f64,
    /// `Lambda` at the best insertion candidate for this iterate; NaN when the
    /// insertion step was not run.
    pub gap: f64,
    pub n_atoms: usize,
    pub wallclock_s: f64,
}

pub fn write_convergence_csv<W: Write>(history: &[IterationRecord], mut out: W) -> Result<()> {
    writeln!(
        out,
        "iter,objective,fidelity,regularizer,gap,n_atoms,wallclock_s"
    )?;
    for r in history {
        writeln!(
            out,
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{},{:.6}",
            r.iter, r.objective, r.fidelity, r.regularizer, r.gap, r.n_atoms, r.wallclock_s
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::cutoff;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn params(a: f64) -> RegParams {
        RegParams::new(a, a).unwrap()
    }

    fn exp1_line(grid: &TimeGrid) -> Curve {
        Curve::line([0.2, 0.2], [0.6, 0.6], grid).unwrap()
    }

    fn spiral_problem(truth: &SparseMeasure, grid: &TimeGrid) -> Problem {
        let s = FrequencySchedule::spiral(20, 0.6283, 10.0, grid).unwrap();
        let op = ForwardOperator::new(s.clone());
        let f = synthesize(truth, &op).unwrap();
        Problem::new(*grid, s, f, truth.params()).unwrap()
    }

    #[test]
    fn synthesize_zero_frequency_closed_form() {
        let grid = TimeGrid::new(10).unwrap();
        let p = params(0.1);
        let curve = Curve::line([0.02, 0.5], [0.9, 0.45], &grid).unwrap();
        let truth = SparseMeasure::from_intensities(p, [(1.0, curve.clone())]).unwrap();
        let op =
            ForwardOperator::new(FrequencySchedule::constant(vec![[0.0, 0.0]], &grid).unwrap());
        let f = synthesize(&truth, &op).unwrap();
        for i in 0..=10 {
            let x = curve.node(i);
            let z = f.at(i).0[0];
            assert_relative_eq!(z.re, cutoff(x[0]) * cutoff(x[1]), epsilon = 1e-14);
            assert_eq!(z.im, 0.0);
        }
        let empty = synthesize(&SparseMeasure::empty(p), &op).unwrap();
        assert_eq!(empty.total_norm_sq(), 0.0);
    }

    #[test]
    fn noise_scaling_identity() {
        let grid = TimeGrid::new(5).unwrap();
        let truth =
            SparseMeasure::from_intensities(params(0.1), [(1.0, exp1_line(&grid))]).unwrap();
        let p = spiral_problem(&truth, &grid);
        let f = p.data();
        for eps in [0.2, 0.6, 1e-3] {
            let g = add_noise(f, eps, 11).unwrap();
            let rel = (g.sub(f).total_norm_sq() / f.total_norm_sq()).sqrt();
            assert!((rel - eps).abs() < 1e-12 * eps.max(1.0));
        }
        assert_eq!(add_noise(f, 0.0, 3).unwrap(), *f);
        assert_eq!(add_noise(f, 0.3, 3).unwrap(), add_noise(f, 0.3, 3).unwrap());
        assert_ne!(add_noise(f, 0.3, 3).unwrap(), add_noise(f, 0.3, 4).unwrap());
        let zero = Measurements::zeros(p.schedule());
        assert!(add_noise(&zero, 0.1, 1).is_err());
        assert!(add_noise(f, -0.1, 1).is_err());
    }

    #[test]
    fn objective_of_empty_and_truth() {
        let grid = TimeGrid::new(8).unwrap();
        let truth =
            SparseMeasure::from_intensities(params(0.1), [(1.0, exp1_line(&grid))]).unwrap();
        let p = spiral_problem(&truth, &grid);
        let o = p.objective(&SparseMeasure::empty(truth.params())).unwrap();
        assert_eq!(o.regularizer, 0.0);
        assert_relative_eq!(
            o.fidelity,
            p.data().total_norm_sq() / 18.0,
            max_relative = 1e-14
        );
        assert_relative_eq!(o.total(), p.m0(), max_relative = 1e-14);
        let o = p.objective(&truth).unwrap();
        assert!(o.fidelity < 1e-28);
        assert_relative_eq!(o.regularizer, truth.weights()[0]);
    }

    #[test]
    fn dual_variable_cases() {
        let grid = TimeGrid::new(6).unwrap();
        let truth =
            SparseMeasure::from_intensities(params(0.2), [(1.0, exp1_line(&grid))]).unwrap();
        let p = spiral_problem(&truth, &grid);
        let w0 = p
            .dual_variable(&SparseMeasure::empty(truth.params()))
            .unwrap();
        let bp = DualVariable::backprojection(p.operator(), p.params(), p.data());
        let wt = p.dual_variable(&truth).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let i = rng.random_range(0..=6);
            let x = [rng.random_range(-0.2..1.2), rng.random_range(-0.2..1.2)];
            assert_relative_eq!(w0.eval(i, x), bp.eval(i, x), epsilon = 1e-14);
            assert!(wt.eval(i, x).abs() < 1e-12);
            if !(0.0..=1.0).contains(&x[0]) || !(0.0..=1.0).contains(&x[1]) {
                assert_eq!(w0.eval(i, x), 0.0);
            }
        }
    }

    #[test]
    fn dual_variable_gradient_fd() {
        let grid = TimeGrid::new(4).unwrap();
        let truth =
            SparseMeasure::from_intensities(params(0.2), [(1.0, exp1_line(&grid))]).unwrap();
        let p = spiral_problem(&truth, &grid);
        let other = SparseMeasure::from_intensities(
            truth.params(),
            [(0.7, Curve::line([0.3, 0.6], [0.4, -0.2], &grid).unwrap())],
        )
        .unwrap();
        let w = p.dual_variable(&other).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..100 {
            let i = rng.random_range(0..=4);
            let x = [rng.random_range(0.01..0.99), rng.random_range(0.01..0.99)];
            let (v, g) = w.eval_grad(i, x);
            assert_relative_eq!(v, w.eval(i, x), epsilon = 1e-14);
            let scale = g[0].hypot(g[1]).max(1e-3);
            for d in 0..2 {
                let (mut a, mut b) = (x, x);
                a[d] += h;
                b[d] -= h;
                let fd = (w.eval(i, a) - w.eval(i, b)) / (2.0 * h);
                assert!((fd - g[d]).abs() / scale < 1e-6);
            }
        }
    }

    #[test]
    fn pairing_examples() {
        let grid = TimeGrid::new(4).unwrap();
        let pr = params(0.25);
        let op =
            ForwardOperator::new(FrequencySchedule::constant(vec![[0.0, 0.0]], &grid).unwrap());
        // constant data kappa=0.8 at zero frequency gives w = 0.8 on the flat region
        let f = Measurements(vec![MeasurementVector(vec![Complex64::new(0.8, 0.0)]); 5]);
        let w = DualVariable::backprojection(&op, pr, &f);
        let c = Curve::constant([0.4, 0.6], &grid).unwrap();
        assert_relative_eq!(pairing(&c, &w), 0.8 / 0.25, max_relative = 1e-14);
        let z = DualVariable::from_residual(&op, pr, &Measurements::zeros(op.schedule()));
        assert_eq!(pairing(&c, &z), 0.0);
    }

    #[test]
    fn gap_values() {
        assert_eq!(dual_gap(1.0, 3.0), 0.0);
        assert_eq!(dual_gap(0.3, 3.0), 0.0);
        assert_relative_eq!(dual_gap(2.0, 1.0), 1.5);
        assert_relative_eq!(dual_gap(2.0, 4.0), 6.0);
    }

    #[test]
    fn positivity_signs() {
        let grid = TimeGrid::new(3).unwrap();
        let truth =
            SparseMeasure::from_intensities(params(0.1), [(1.0, exp1_line(&grid))]).unwrap();
        let p = spiral_problem(&truth, &grid);
        let w = p.dual_variable(&SparseMeasure::empty(p.params())).unwrap();
        assert!(positivity_test(&w, 64).unwrap() > 0.0);
        let z = DualVariable::from_residual(
            p.operator(),
            p.params(),
            &Measurements::zeros(p.schedule()),
        );
        assert_eq!(positivity_test(&z, 64).unwrap(), 0.0);
        assert!(positivity_test(&w, 1).is_err());
        // zero frequency only: w = kappa chi chi >= 0, so its negation is <= 0
        let op =
            ForwardOperator::new(FrequencySchedule::constant(vec![[0.0, 0.0]], &grid).unwrap());
        let f = Measurements(vec![MeasurementVector(vec![Complex64::new(0.8, 0.0)]); 4]);
        let pos = DualVariable::backprojection(&op, p.params(), &f);
        assert!(positivity_test(&pos, 64).unwrap() > 0.79);
        assert!(positivity_test(&pos.negated(), 64).unwrap() <= 0.0);
    }

    #[test]
    fn raster_peaks_at_static_source() {
        let grid = TimeGrid::new(2).unwrap();
        let src = [0.3, 0.7];
        let truth = SparseMeasure::from_intensities(
            params(0.1),
            [(1.0, Curve::constant(src, &grid).unwrap())],
        )
        .unwrap();
        let p = spiral_problem(&truth, &grid);
        let r = backprojection_raster(p.operator(), p.data(), 1, 50).unwrap();
        let (mut best, mut at) = (0u8, (0, 0));
        for row in 0..50 {
            for col in 0..50 {
                if r.pixel(row, col) > best {
                    best = r.pixel(row, col);
                    at = (row, col);
                }
            }
        }
        let c = Raster::center(50, at.0, at.1);
        assert!(
            (c[0] - src[0]).abs() <= 0.02 && (c[1] - src[1]).abs() <= 0.02,
            "{c:?}"
        );
        assert_eq!(
            r,
            backprojection_raster(p.operator(), p.data(), 1, 50).unwrap()
        );
        let pgm = r.to_pgm();
        assert!(pgm.starts_with(b"P5\n50 50\n255\n"));
        assert_eq!(pgm.len(), 13 + 2500);

        let zero = Measurements::zeros(p.schedule());
        let r0 = backprojection_raster(p.operator(), &zero, 0, 8).unwrap();
        assert!(r0.pixels.iter().all(|&v| v == r0.pixels[0]));
    }

    #[test]
    fn convergence_csv_header() {
        let rec = IterationRecord {
            iter: 0,
            objective: 1.0,
            fidelity: 1.0,
            regularizer: 0.0,
            gap: f64::NAN,
            n_atoms: 0,
            wallclock_s: 0.0,
        };
        let mut buf = Vec::new();
        write_convergence_csv(&[rec], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("iter,objective,fidelity,regularizer,gap,n_atoms,wallclock_s\n0,"));
    }
}
