//! Curves, atoms and sparse dynamic measures.
//!
//! A curve is stored by its positions at the uniform sample times
//! `t_i = i / T`; between samples it is the linear interpolant. An atom pairs
//! a curve with the normalization `a = 1 / L` where
//! `L = beta/2 * int |curve'|^2 dt + alpha`, so that every atom carries unit
//! regularizer value and a conic combination `sum c_j atom_j` costs `sum c_j`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point of the plane.
pub type Point = [f64; 2];

/// Node distance below which two curves are considered the same curve.
pub const CURVE_EQ_TOL: f64 = 1e-6;

/// Weights at or below this value are treated as zero and their atoms dropped.
pub const WEIGHT_EPS: f64 = 1e-10;

#[inline]
pub(crate) fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[inline]
pub(crate) fn dist2(a: Point, b: Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

#[inline]
pub(crate) fn clamp_unit(p: Point) -> Point {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

/// Uniform time grid `t_i = i / T`, `i = 0..=T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    intervals: usize,
}

impl TimeGrid {
    pub fn new(intervals: usize) -> Result<Self> {
        if intervals == 0 {
            return Err(Error::invalid("time grid needs at least one interval"));
        }
        Ok(Self { intervals })
    }

    /// Number of intervals `T`.
    pub fn intervals(&self) -> usize {
        self.intervals
    }

    /// Number of sample times `T + 1`.
    pub fn num_nodes(&self) -> usize {
        self.intervals + 1
    }

    pub fn node(&self, i: usize) -> f64 {
        i as f64 / self.intervals as f64
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.num_nodes()).map(|i| self.node(i))
    }

    pub fn step(&self) -> f64 {
        1.0 / self.intervals as f64
    }
}

/// Regularization parameters `alpha` (mass) and `beta` (kinetic energy).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegParams {
    pub alpha: f64,
    pub beta: f64,
}

impl RegParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite() && beta > 0.0 && beta.is_finite()) {
            return Err(Error::invalid(format!(
                "regularization parameters must be positive and finite (alpha={alpha}, beta={beta})"
            )));
        }
        Ok(Self { alpha, beta })
    }
}

/// Piecewise-linear trajectory in the closed unit square, one node per sample time.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    nodes: Vec<Point>,
}

impl Curve {
    pub fn new(nodes: Vec<Point>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::invalid("a curve needs at least two nodes"));
        }
        for (i, p) in nodes.iter().enumerate() {
            let inside = p.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v));
            if !inside {
                return Err(Error::invalid(format!(
                    "curve node {i} = ({}, {}) lies outside the unit square",
                    p[0], p[1]
                )));
            }
        }
        Ok(Self { nodes })
    }

    /// Builds a curve from arbitrary coordinates, clamping each node into the unit square.
    pub fn clamped(nodes: Vec<Point>) -> Result<Self> {
        if nodes
            .iter()
            .any(|p| !(p[0].is_finite() && p[1].is_finite()))
        {
            return Err(Error::non_finite("curve construction", "non-finite node"));
        }
        Self::new(nodes.into_iter().map(clamp_unit).collect())
    }

    pub fn constant(p: Point, grid: &TimeGrid) -> Result<Self> {
        Self::new(vec![p; grid.num_nodes()])
    }

    /// Samples `t -> start + t * velocity` at the grid nodes.
    pub fn line(start: Point, velocity: Point, grid: &TimeGrid) -> Result<Self> {
        Self::new(
            grid.nodes()
                .map(|t| [start[0] + t * velocity[0], start[1] + t * velocity[1]])
                .collect(),
        )
    }

    /// Samples an arbitrary parametrization at the grid nodes.
    pub fn from_fn(grid: &TimeGrid, f: impl Fn(f64) -> Point) -> Result<Self> {
        Self::new(grid.nodes().map(f).collect())
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn intervals(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn node(&self, i: usize) -> Point {
        self.nodes[i]
    }

    pub fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if self.nodes.len() != grid.num_nodes() {
            return Err(Error::invalid(format!(
                "curve has {} nodes but the time grid has {}",
                self.nodes.len(),
                grid.num_nodes()
            )));
        }
        Ok(())
    }

    /// Position at time `t in [0, 1]` of the linear interpolant.
    pub fn eval(&self, t: f64) -> Point {
        let n = self.intervals();
        let s = (t.clamp(0.0, 1.0) * n as f64).min(n as f64);
        let i = (s.floor() as usize).min(n - 1);
        let u = s - i as f64;
        let a = self.nodes[i];
        let b = self.nodes[i + 1];
        [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])]
    }

    /// Resamples the interpolant onto a grid `factor` times finer.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("refinement factor must be positive"));
        }
        let n = self.intervals() * factor;
        Self::new((0..=n).map(|i| self.eval(i as f64 / n as f64)).collect())
    }

    /// Largest distance between corresponding nodes.
    pub fn max_node_distance(&self, other: &Curve) -> f64 {
        self.nodes
            .iter()
            .zip(&other.nodes)
            .map(|(a, b)| dist(*a, *b))
            .fold(0.0, f64::max)
    }

    pub fn same_as(&self, other: &Curve, tol: f64) -> bool {
        self.nodes.len() == other.nodes.len() && self.max_node_distance(other) <= tol
    }

    /// `int_0^1 |curve'(t)|^2 dt` of the interpolant, `T * sum |x_{i+1} - x_i|^2`.
    pub(crate) fn dirichlet_energy(&self) -> f64 {
        let t = self.intervals() as f64;
        t * self
            .nodes
            .windows(2)
            .map(|w| dist2(w[0], w[1]))
            .sum::<f64>()
    }

    /// CSV row: `index,x_0,y_0,...,x_T,y_T`.
    pub fn to_csv_row(&self, index: usize) -> String {
        let mut row = index.to_string();
        for p in &self.nodes {
            row.push_str(&format!(",{},{}", p[0], p[1]));
        }
        row
    }

    /// Parses a row written by [`Curve::to_csv_row`], returning the index and the curve.
    pub fn from_csv_row(row: &str) -> Result<(usize, Self)> {
        let mut fields = row.trim().split(',');
        let index = fields
            .next()
            .and_then(|s| s.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::invalid("curve row must start with an integer index"))?;
        let values: Vec<f64> = fields
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::invalid(format!("bad coordinate {s:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if !values.len().is_multiple_of(2) {
            return Err(Error::invalid("curve row has an odd number of coordinates"));
        }
        let nodes = values.chunks(2).map(|c| [c[0], c[1]]).collect();
        Ok((index, Self::new(nodes)?))
    }
}

/// `int_0^1 |curve'|^2 dt` for the piecewise-linear curve.
pub fn kinetic_energy(curve: &Curve, grid: &TimeGrid) -> Result<f64> {
    curve.check_grid(grid)?;
    Ok(curve.dirichlet_energy())
}

/// `L(curve) = beta/2 * int |curve'|^2 + alpha`, the reciprocal of the atom normalization.
pub fn curve_cost(curve: &Curve, params: RegParams) -> f64 {
    0.5 * params.beta * curve.dirichlet_energy() + params.alpha
}

/// Atom normalization `a = 1 / L(curve)`.
pub fn normalization(curve: &Curve, params: RegParams) -> f64 {
    1.0 / curve_cost(curve, params)
}

/// Per-time amplitude `c * a` of an atom with weight `c`.
pub fn intensity(weight: f64, curve: &Curve, params: RegParams) -> f64 {
    weight * normalization(curve, params)
}

/// Either a proper curve or the point at infinity of the curve space, whose
/// atom is the zero measure.
#[derive(Debug, Clone, PartialEq)]
pub enum ExtendedCurve {
    Finite(Curve),
    Infinity,
}

impl ExtendedCurve {
    pub fn normalization(&self, params: RegParams) -> f64 {
        match self {
            ExtendedCurve::Finite(c) => normalization(c, params),
            ExtendedCurve::Infinity => 0.0,
        }
    }

    pub fn is_infinity(&self) -> bool {
        matches!(self, ExtendedCurve::Infinity)
    }

    pub fn finite(self) -> Option<Curve> {
        match self {
            ExtendedCurve::Finite(c) => Some(c),
            ExtendedCurve::Infinity => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub weight: f64,
    pub curve: Curve,
}

/// Finite conic combination `sum_j c_j atom(curve_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMeasure {
    params: RegParams,
    atoms: Vec<Atom>,
}

impl SparseMeasure {
    pub fn empty(params: RegParams) -> Self {
        Self {
            params,
            atoms: Vec::new(),
        }
    }

    pub fn new(params: RegParams, atoms: Vec<Atom>) -> Result<Self> {
        let mut m = Self::empty(params);
        for a in atoms {
            m.push(a.weight, a.curve)?;
        }
        Ok(m)
    }

    /// Builds the measure whose atoms have the given per-time intensities.
    pub fn from_intensities(
        params: RegParams,
        atoms: impl IntoIterator<Item = (f64, Curve)>,
    ) -> Result<Self> {
        let mut m = Self::empty(params);
        for (i, c) in atoms {
            let w = i * curve_cost(&c, params);
            m.push(w, c)?;
        }
        Ok(m)
    }

    pub fn push(&mut self, weight: f64, curve: Curve) -> Result<()> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::invalid(format!(
                "atom weights must be positive, got {weight}"
            )));
        }
        if let Some(first) = self.atoms.first() {
            if first.curve.num_nodes() != curve.num_nodes() {
                return Err(Error::invalid("all atoms must live on the same time grid"));
            }
        }
        if self.atoms.iter().any(|a| a.curve.nodes() == curve.nodes()) {
            return Err(Error::invalid("duplicate atom curve"));
        }
        self.atoms.push(Atom { weight, curve });
        Ok(())
    }

    pub fn params(&self) -> RegParams {
        self.params
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn curves(&self) -> Vec<Curve> {
        self.atoms.iter().map(|a| a.curve.clone()).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.weight).collect()
    }

    pub fn intensities(&self) -> Vec<f64> {
        self.atoms
            .iter()
            .map(|a| intensity(a.weight, &a.curve, self.params))
            .collect()
    }

    /// Total spatial mass at each sample time. Every entry is the same number.
    pub fn per_time_mass(&self) -> Vec<f64> {
        let total: f64 = self.intensities().iter().sum();
        let n = self.atoms.first().map_or(0, |a| a.curve.num_nodes());
        vec![total; n]
    }

    /// Multiplies every weight by `s > 0`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(
            self.params,
            self.atoms
                .iter()
                .map(|a| Atom {
                    weight: a.weight * s,
                    curve: a.curve.clone(),
                })
                .collect(),
        )
    }

    /// Rebuilds the measure from curves and weights, dropping atoms with
    /// weight at or below [`WEIGHT_EPS`].
    pub fn from_parts(params: RegParams, curves: Vec<Curve>, weights: &[f64]) -> Result<Self> {
        if curves.len() != weights.len() {
            return Err(Error::invalid("curve and weight counts differ"));
        }
        let mut m = Self::empty(params);
        for (c, &w) in curves.into_iter().zip(weights) {
            if w > WEIGHT_EPS {
                m.push(w, c)?;
            }
        }
        Ok(m)
    }

    pub fn to_json(&self) -> MeasureJson {
        MeasureJson {
            alpha: self.params.alpha,
            beta: self.params.beta,
            atoms: self
                .atoms
                .iter()
                .map(|a| AtomJson {
                    weight: a.weight,
                    intensity: intensity(a.weight, &a.curve, self.params),
                    nodes: a.curve.nodes().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_json(json: &MeasureJson) -> Result<Self> {
        let params = RegParams::new(json.alpha, json.beta)?;
        let mut m = Self::empty(params);
        for a in &json.atoms {
            m.push(a.weight, Curve::new(a.nodes.clone())?)?;
        }
        Ok(m)
    }
}

/// `J(sum c_j atom_j) = sum c_j`.
pub fn regularizer(measure: &SparseMeasure) -> f64 {
    measure.atoms.iter().map(|a| a.weight).sum()
}

/// Serialized form of a [`SparseMeasure`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureJson {
    pub alpha: f64,
    pub beta: f64,
    pub atoms: Vec<AtomJson>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomJson {
    pub weight: f64,
    pub intensity: f64,
    pub nodes: Vec<Point>,
}
