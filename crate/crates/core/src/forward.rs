//! Undersampled Fourier measurements with a smooth spatial cutoff.
//!
//! At sample time `t_i` a point source at `x` is measured through the kernel
//! `psi_i(x)_k = exp(-2 pi i x . S_{i,k}) chi(x_1) chi(x_2)`, `k = 1..n_i`. The
//! data space is `C^{n_i}` viewed as a real Hilbert space with inner product
//! `<u, v> = Re(sum_k u_k conj(v_k)) / n_i`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, SparseMeasure, TimeGrid};

const RAMP: f64 = 0.1;

#[inline]
fn smoothstep(u: f64) -> f64 {
    u * u * u * (10.0 + u * (-15.0 + 6.0 * u))
}

#[inline]
fn smoothstep_deriv(u: f64) -> f64 {
    30.0 * u * u * (1.0 + u * (-2.0 + u))
}

/// Quintic cutoff: rises from 0 at `z = 0` to 1 at `z = 0.1`, equals 1 on
/// `[0.1, 0.9]`, falls back to 0 at `z = 1`. Zero outside `[0, 1]`.
pub fn cutoff(z: f64) -> f64 {
    if !(0.0..=1.0).contains(&z) {
        0.0
    } else if z < RAMP {
        smoothstep(z / RAMP)
    } else if z <= 1.0 - RAMP {
        1.0
    } else {
        smoothstep((1.0 - z) / RAMP)
    }
}

pub fn cutoff_deriv(z: f64) -> f64 {
    if !(0.0..=1.0).contains(&z) {
        0.0
    } else if z < RAMP {
        smoothstep_deriv(z / RAMP) / RAMP
    } else if z <= 1.0 - RAMP {
        0.0
    } else {
        -smoothstep_deriv((1.0 - z) / RAMP) / RAMP
    }
}

/// Per-sample-time frequency lists `S_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrequencySchedule {
    freqs: Vec<Vec<Point>>,
}

impl FrequencySchedule {
    pub fn new(freqs: Vec<Vec<Point>>) -> Result<Self> {
        if freqs.is_empty() {
            return Err(Error::invalid("frequency schedule has no sample times"));
        }
        for (i, s) in freqs.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::invalid(format!("no frequencies at time index {i}")));
            }
            if s.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "non-finite frequency at time index {i}"
                )));
            }
        }
        Ok(Self { freqs })
    }

    /// The same frequency list at every sample time.
    pub fn constant(freqs: Vec<Point>, grid: &TimeGrid) -> Result<Self> {
        Self::new(vec![freqs; grid.num_nodes()])
    }

    /// Time-constant samples on an Archimedean spiral `r = c * theta`:
    /// sample `k = 0..n` sits at angle `k * angular_step` and radius
    /// `max_radius * k / (n - 1)`, so the first sample is the zero frequency.
    pub fn spiral(n: usize, angular_step: f64, max_radius: f64, grid: &TimeGrid) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("spiral needs at least one frequency"));
        }
        let denom = (n.max(2) - 1) as f64;
        let freqs = (0..n)
            .map(|k| {
                let theta = k as f64 * angular_step;
                let r = max_radius * k as f64 / denom;
                [r * theta.cos(), r * theta.sin()]
            })
            .collect();
        Self::constant(freqs, grid)
    }

    /// Frequencies on `lines` rotating lines through the origin: at time `i`
    /// the rotation by `theta_i = i pi / lines` applied to `(h (k - (n+1)/2), 0)`
    /// for `k = 1..=n`, with the rotation matrix `[[cos, sin], [-sin, cos]]`.
    pub fn rotating_lines(
        lines: usize,
        spacing: f64,
        count: usize,
        grid: &TimeGrid,
    ) -> Result<Self> {
        if lines == 0 || count == 0 || spacing.is_nan() || spacing <= 0.0 {
            return Err(Error::invalid(
                "rotating lines need lines >= 1, count >= 1 and spacing > 0",
            ));
        }
        let freqs = (0..grid.num_nodes())
            .map(|i| {
                let theta = i as f64 * PI / lines as f64;
                let (s, c) = theta.sin_cos();
                (1..=count)
                    .map(|k| {
                        let v = spacing * (k as f64 - (count as f64 + 1.0) / 2.0);
                        [c * v, -s * v]
                    })
                    .collect()
            })
            .collect();
        Self::new(freqs)
    }

    pub fn num_times(&self) -> usize {
        self.freqs.len()
    }

    pub fn at(&self, i: usize) -> &[Point] {
        &self.freqs[i]
    }

    pub fn count(&self, i: usize) -> usize {
        self.freqs[i].len()
    }

    pub fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if self.freqs.len() != grid.num_nodes() {
            return Err(Error::invalid(format!(
                "schedule has {} sample times but the grid has {}",
                self.freqs.len(),
                grid.num_nodes()
            )));
        }
        Ok(())
    }
}

/// One data vector in `H_{t_i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementVector(pub Vec<Complex64>);

impl MeasurementVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![Complex64::new(0.0, 0.0); n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `Re <u, v>_{C^n} / n`.
    pub fn inner(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        let s: f64 = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(u, v)| u.re * v.re + u.im * v.im)
            .sum();
        s / self.len() as f64
    }

    pub fn norm_sq(&self) -> f64 {
        self.inner(self)
    }

    pub fn axpy(&mut self, a: f64, x: &Self) {
        for (y, x) in self.0.iter_mut().zip(&x.0) {
            *y += x * a;
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }
}

/// One [`MeasurementVector`] per sample time.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurements(pub Vec<MeasurementVector>);

impl Measurements {
    pub fn zeros(schedule: &FrequencySchedule) -> Self {
        Self(
            (0..schedule.num_times())
                .map(|i| MeasurementVector::zeros(schedule.count(i)))
                .collect(),
        )
    }

    pub fn num_times(&self) -> usize {
        self.0.len()
    }

    pub fn at(&self, i: usize) -> &MeasurementVector {
        &self.0[i]
    }

    /// `sum_i ||v_i||^2_{H_{t_i}}`.
    pub fn total_norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v.norm_sq()).sum()
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a.sub(b)).collect())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(
            self.0
                .iter()
                .map(|v| MeasurementVector(v.0.iter().map(|z| z * s).collect()))
                .collect(),
        )
    }

    pub fn check_schedule(&self, schedule: &FrequencySchedule) -> Result<()> {
        if self.0.len() != schedule.num_times() {
            return Err(Error::invalid(format!(
                "data has {} sample times, schedule has {}",
                self.0.len(),
                schedule.num_times()
            )));
        }
        for (i, v) in self.0.iter().enumerate() {
            if v.len() != schedule.count(i) {
                return Err(Error::invalid(format!(
                    "data at time {i} has length {}, schedule expects {}",
                    v.len(),
                    schedule.count(i)
                )));
            }
        }
        Ok(())
    }

    /// JSON form: per time, a list of `[re, im]` pairs.
    pub fn to_pairs(&self) -> Vec<Vec<[f64; 2]>> {
        self.0
            .iter()
            .map(|v| v.0.iter().map(|z| [z.re, z.im]).collect())
            .collect()
    }

    pub fn from_pairs(pairs: &[Vec<[f64; 2]>]) -> Self {
        Self(
            pairs
                .iter()
                .map(|v| MeasurementVector(v.iter().map(|p| Complex64::new(p[0], p[1])).collect()))
                .collect(),
        )
    }
}

impl Serialize for Measurements {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_pairs().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Measurements {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let pairs = Vec::<Vec<[f64; 2]>>::deserialize(d)?;
        Ok(Self::from_pairs(&pairs))
    }
}

/// Cut-off Fourier sampling operator `K*_{t_i}` and its pre-adjoint `K_{t_i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOperator {
    schedule: FrequencySchedule,
}

impl ForwardOperator {
    pub fn new(schedule: FrequencySchedule) -> Self {
        Self { schedule }
    }

    pub fn schedule(&self) -> &FrequencySchedule {
        &self.schedule
    }

    pub fn num_times(&self) -> usize {
        self.schedule.num_times()
    }

    /// `psi_i(x)`.
    pub fn kernel(&self, i: usize, x: Point) -> MeasurementVector {
        let mut out = MeasurementVector::zeros(self.schedule.count(i));
        self.add_kernel(i, x, 1.0, &mut out);
        out
    }

    /// `(d psi_i / dx_1, d psi_i / dx_2)` at `x`.
    pub fn kernel_grad(&self, i: usize, x: Point) -> [MeasurementVector; 2] {
        let (c1, c2) = (cutoff(x[0]), cutoff(x[1]));
        let (d1, d2) = (cutoff_deriv(x[0]), cutoff_deriv(x[1]));
        let mut gx = Vec::with_capacity(self.schedule.count(i));
        let mut gy = Vec::with_capacity(self.schedule.count(i));
        for s in self.schedule.at(i) {
            let phase = -2.0 * PI * (x[0] * s[0] + x[1] * s[1]);
            let e = Complex64::from_polar(1.0, phase);
            // d/dx_j exp(-2 pi i x.s) = -2 pi i s_j exp(..)
            let de = Complex64::new(0.0, -2.0 * PI) * e;
            gx.push(e * (d1 * c2) + de * (s[0] * c1 * c2));
            gy.push(e * (c1 * d2) + de * (s[1] * c1 * c2));
        }
        [MeasurementVector(gx), MeasurementVector(gy)]
    }

    /// `out += scale * psi_i(x)`.
    pub(crate) fn add_kernel(&self, i: usize, x: Point, scale: f64, out: &mut MeasurementVector) {
        let amp = scale * cutoff(x[0]) * cutoff(x[1]);
        if amp == 0.0 {
            return;
        }
        for (o, s) in out.0.iter_mut().zip(self.schedule.at(i)) {
            let phase = -2.0 * PI * (x[0] * s[0] + x[1] * s[1]);
            let (sn, cs) = phase.sin_cos();
            o.re += amp * cs;
            o.im += amp * sn;
        }
    }

    /// `K*_{t_i} rho_{t_i}` for a sparse measure: `sum_j c_j a_j psi_i(curve_j(t_i))`.
    pub fn apply_forward(&self, measure: &SparseMeasure, i: usize) -> MeasurementVector {
        let mut out = MeasurementVector::zeros(self.schedule.count(i));
        for (a, amp) in measure.atoms().iter().zip(measure.intensities()) {
            self.add_kernel(i, a.curve.node(i), amp, &mut out);
        }
        out
    }

    pub fn apply_forward_all(&self, measure: &SparseMeasure) -> Measurements {
        Measurements(
            (0..self.num_times())
                .map(|i| self.apply_forward(measure, i))
                .collect(),
        )
    }

    /// `(K_{t_i} h)(x) = <psi_i(x), h>_{H_{t_i}}`.
    pub fn apply_preadjoint(&self, h: &MeasurementVector, i: usize, x: Point) -> Result<f64> {
        self.check_len(h, i)?;
        Ok(self.preadjoint_value_grad(h, i, x).0)
    }

    /// `(K_{t_i} h)(x)` together with its spatial gradient.
    pub fn apply_preadjoint_grad(
        &self,
        h: &MeasurementVector,
        i: usize,
        x: Point,
    ) -> Result<(f64, Point)> {
        self.check_len(h, i)?;
        Ok(self.preadjoint_value_grad(h, i, x))
    }

    fn check_len(&self, h: &MeasurementVector, i: usize) -> Result<()> {
        if i >= self.num_times() {
            return Err(Error::invalid(format!("time index {i} out of range")));
        }
        if h.len() != self.schedule.count(i) {
            return Err(Error::invalid(format!(
                "measurement length {} does not match {} frequencies at time {i}",
                h.len(),
                self.schedule.count(i)
            )));
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn preadjoint_value(&self, h: &MeasurementVector, i: usize, x: Point) -> f64 {
        let chi = cutoff(x[0]) * cutoff(x[1]);
        if chi == 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for (z, s) in h.0.iter().zip(self.schedule.at(i)) {
            let phase = -2.0 * PI * (x[0] * s[0] + x[1] * s[1]);
            let (sn, cs) = phase.sin_cos();
            // Re(e^{i phase} conj(z))
            acc += cs * z.re + sn * z.im;
        }
        chi * acc / h.len() as f64
    }

    #[inline]
    pub(crate) fn preadjoint_value_grad(
        &self,
        h: &MeasurementVector,
        i: usize,
        x: Point,
    ) -> (f64, Point) {
        let (c1, c2) = (cutoff(x[0]), cutoff(x[1]));
        if c1 == 0.0 || c2 == 0.0 {
            // both cutoffs and their derivatives vanish on the boundary and outside
            let (d1, d2) = (cutoff_deriv(x[0]), cutoff_deriv(x[1]));
            if (c1 == 0.0 && d1 == 0.0) || (c2 == 0.0 && d2 == 0.0) {
                return (0.0, [0.0, 0.0]);
            }
        }
        let (d1, d2) = (cutoff_deriv(x[0]), cutoff_deriv(x[1]));
        let mut re = 0.0;
        let mut bx = 0.0;
        let mut by = 0.0;
        for (z, s) in h.0.iter().zip(self.schedule.at(i)) {
            let phase = -2.0 * PI * (x[0] * s[0] + x[1] * s[1]);
            let (sn, cs) = phase.sin_cos();
            re += cs * z.re + sn * z.im;
            // Im(e^{i phase} conj(z))
            let im = sn * z.re - cs * z.im;
            bx += im * s[0];
            by += im * s[1];
        }
        let n = h.len() as f64;
        let chi = c1 * c2;
        let value = chi * re / n;
        let gx = (d1 * c2 * re + chi * 2.0 * PI * bx) / n;
        let gy = (c1 * d2 * re + chi * 2.0 * PI * by) / n;
        (value, [gx, gy])
    }

    /// `<psi_i(x), psi_i(y)>_{H_{t_i}}`.
    pub fn kernel_inner(&self, i: usize, x: Point, y: Point) -> f64 {
        let amp = cutoff(x[0]) * cutoff(x[1]) * cutoff(y[0]) * cutoff(y[1]);
        if amp == 0.0 {
            return 0.0;
        }
        let d = [x[0] - y[0], x[1] - y[1]];
        let freqs = self.schedule.at(i);
        let s: f64 = freqs
            .iter()
            .map(|s| (2.0 * PI * (d[0] * s[0] + d[1] * s[1])).cos())
            .sum();
        amp * s / freqs.len() as f64
    }
}
