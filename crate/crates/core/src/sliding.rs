//! Sliding step: move all atom curves jointly down the objective while the
//! weights stay fixed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::Measurements;
use crate::geometry::{curve_cost, Curve, Point, SparseMeasure};
use crate::insertion::{insertion_value_grad, projected_armijo, DescentConfig};
use crate::problem::{DualVariable, Problem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlideConfig {
    pub inner_steps: usize,
    pub armijo: DescentConfig,
}

impl Default for SlideConfig {
    fn default() -> Self {
        Self {
            inner_steps: 100,
            armijo: DescentConfig::default(),
        }
    }
}

/// Result of one sliding pass.
#[derive(Debug, Clone)]
pub struct Slide {
    pub measure: SparseMeasure,
    pub objective_before: f64,
    pub objective_after: f64,
    pub iterations: usize,
}

fn split(nodes: &[Point], n: usize) -> Vec<Curve> {
    nodes
        .chunks(n)
        .map(|c| Curve::clamped(c.to_vec()).expect("finite clamped nodes"))
        .collect()
}

fn residual(problem: &Problem, weights: &[f64], curves: &[Curve]) -> Measurements {
    let op = problem.operator();
    let params = problem.params();
    let amps: Vec<f64> = weights
        .iter()
        .zip(curves)
        .map(|(c, g)| c / curve_cost(g, params))
        .collect();
    Measurements(
        (0..problem.grid().num_nodes())
            .map(|i| {
                let mut v = problem.data().at(i).clone();
                for z in v.0.iter_mut() {
                    *z = -*z;
                }
                for (amp, g) in amps.iter().zip(curves) {
                    op.add_kernel(i, g.node(i), *amp, &mut v);
                }
                v
            })
            .collect(),
    )
}

fn fixed_weight_value(problem: &Problem, weights: &[f64], curves: &[Curve]) -> f64 {
    let r = residual(problem, weights, curves);
    0.5 * r.total_norm_sq() / problem.grid().num_nodes() as f64 + weights.iter().sum::<f64>()
}

fn fixed_weight_grad(
    problem: &Problem,
    weights: &[f64],
    curves: &[Curve],
) -> (f64, Vec<Vec<Point>>) {
    let r = residual(problem, weights, curves);
    let value =
        0.5 * r.total_norm_sq() / problem.grid().num_nodes() as f64 + weights.iter().sum::<f64>();
    let w = DualVariable::from_residual(problem.operator(), problem.params(), &r);
    let grads = curves
        .par_iter()
        .zip(weights)
        .map(|(g, &c)| {
            insertion_value_grad(g, &w)
                .1
                .into_iter()
                .map(|p| [c * p[0], c * p[1]])
                .collect()
        })
        .collect();
    (value, grads)
}

/// Gradient of `(curve_1, .., curve_N) -> objective(sum c_j atom(curve_j))`
/// at fixed weights, one node array per atom.
pub fn slide_gradient(mu: &SparseMeasure, problem: &Problem) -> Result<Vec<Vec<Point>>> {
    problem.check_measure(mu)?;
    Ok(fixed_weight_grad(problem, &mu.weights(), &mu.curves()).1)
}

/// Runs at most `inner_steps` projected Armijo steps of the fixed-weight
/// objective over all curve nodes.
pub fn slide(mu: &SparseMeasure, problem: &Problem, cfg: &SlideConfig) -> Result<Slide> {
    problem.check_measure(mu)?;
    let before = problem.objective(mu)?.total();
    if mu.is_empty() || cfg.inner_steps == 0 {
        return Ok(Slide {
            measure: mu.clone(),
            objective_before: before,
            objective_after: before,
            iterations: 0,
        });
    }
    cfg.armijo.validate()?;
    let weights = mu.weights();
    let n = problem.grid().num_nodes();
    let start: Vec<Point> = mu
        .atoms()
        .iter()
        .flat_map(|a| a.curve.nodes().to_vec())
        .collect();
    let run = projected_armijo(
        start,
        |x| {
            let (v, g) = fixed_weight_grad(problem, &weights, &split(x, n));
            (v, g.into_iter().flatten().collect())
        },
        |x| fixed_weight_value(problem, &weights, &split(x, n)),
        &cfg.armijo,
        cfg.inner_steps,
        n,
    )?;
    let curves = split(&run.x, n);
    let mut measure = SparseMeasure::empty(problem.params());
    for (c, w) in curves.into_iter().zip(weights) {
        if measure.atoms().iter().any(|a| a.curve.nodes() == c.nodes()) {
            // two curves slid onto the same nodes: keep the input measure
            return Ok(Slide {
                measure: mu.clone(),
                objective_before: before,
                objective_after: before,
                iterations: 0,
            });
        }
        measure.push(w, c)?;
    }
    let after = problem.objective(&measure)?.total();
    if !after.is_finite() {
        return Err(Error::non_finite("sliding", format!("objective {after}")));
    }
    Ok(Slide {
        measure,
        objective_before: before,
        objective_after: after,
        iterations: run.iterations,
    })
}

/// Merges atoms whose curves stay within `tol` of each other at every time,
/// summing their intensities on the curve of the heavier atom. A merge is
/// kept only when it does not increase the objective.
pub fn merge_collisions(mu: &SparseMeasure, problem: &Problem, tol: f64) -> Result<SparseMeasure> {
    let mut current = mu.clone();
    let mut value = problem.objective(&current)?.total();
    'outer: loop {
        let atoms = current.atoms();
        for j in 0..atoms.len() {
            for k in j + 1..atoms.len() {
                if atoms[j].curve.max_node_distance(&atoms[k].curve) >= tol {
                    continue;
                }
                let (keep, drop) = if atoms[j].weight >= atoms[k].weight {
                    (j, k)
                } else {
                    (k, j)
                };
                let intensities = current.intensities();
                let total = intensities[keep] + intensities[drop];
                let params = current.params();
                let mut merged = SparseMeasure::empty(params);
                for (i, a) in atoms.iter().enumerate() {
                    if i == drop {
                        continue;
                    }
                    let w = if i == keep {
                        total * curve_cost(&a.curve, params)
                    } else {
                        a.weight
                    };
                    merged.push(w, a.curve.clone())?;
                }
                let v = problem.objective(&merged)?.total();
                if v <= value {
                    current = merged;
                    value = v;
                    continue 'outer;
                }
            }
        }
        return Ok(current);
    }
}
