//! Outer loop: insertion, coefficient optimization and sliding until the
//! dual gap certificate drops below tolerance.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Curve, SparseMeasure, CURVE_EQ_TOL};
use crate::insertion::{multistart, DescentConfig, MultistartConfig};
use crate::problem::{dual_gap, numerical_residuals, pairing, IterationRecord, Problem};
use crate::sliding::{merge_collisions, slide, SlideConfig};
use crate::weights::{assemble_qp, solve_nnqp_from, DEFAULT_KKT_TOL};

/// Objective increase tolerated between iterates before the run is aborted.
pub const MONOTONICITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One atom per iteration and a single coefficient solve.
    Core,
    /// Every stationary curve is inserted, then alternating coefficient
    /// solves and sliding.
    Full,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "core" => Ok(Mode::Core),
            "full" => Ok(Mode::Full),
            other => Err(Error::invalid(format!(
                "unknown mode {other:?} (expected core or full)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub mode: Mode,
    pub tol: f64,
    pub max_outer_iterations: usize,
    pub multistart: MultistartConfig,
    pub descent: DescentConfig,
    pub slide: SlideConfig,
    pub k_max: usize,
    pub qp_tol: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            tol: 1e-10,
            max_outer_iterations: 40,
            multistart: MultistartConfig::default(),
            descent: DescentConfig::default(),
            slide: SlideConfig::default(),
            k_max: 2,
            qp_tol: DEFAULT_KKT_TOL,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.qp_tol > 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        self.multistart.validate()?;
        self.descent.validate()?;
        self.slide.armijo.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// The best insertion candidate pairs to at most 1 with the dual variable.
    Converged,
    GapBelowTol,
    /// No candidate with negative insertion value at the zero measure.
    EmptyInsertion,
    Budget,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::GapBelowTol => "gap_below_TOL",
            Termination::EmptyInsertion => "empty_insertion",
            Termination::Budget => "budget",
        }
    }

    /// Process exit status for this outcome.
    pub fn exit_code(&self) -> i32 {
        match self {
            Termination::Budget => 2,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub measure: SparseMeasure,
    /// One record per iterate, starting with the zero measure.
    pub history: Vec<IterationRecord>,
    pub termination: Termination,
    /// `max_j |<rho_j, w> - 1|` over the atoms after each coefficient solve.
    pub first_order_violations: Vec<f64>,
    /// Number of candidates returned by each insertion step.
    pub candidates: Vec<usize>,
}

impl SolveReport {
    pub fn iterations(&self) -> usize {
        self.history.len() - 1
    }

    pub fn final_objective(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |r| r.objective)
    }

    pub fn final_gap(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |r| r.gap)
    }

    /// `T(mu^n) - T(mu^N)` per iterate.
    pub fn numerical_residuals(&self) -> Vec<f64> {
        numerical_residuals(&self.history.iter().map(|r| r.objective).collect::<Vec<_>>())
    }

    /// Fraction of iterates whose numerical residual is at most the gap.
    pub fn residual_below_gap_fraction(&self) -> f64 {
        let r = self.numerical_residuals();
        let logged: Vec<(f64, f64)> = r
            .iter()
            .zip(&self.history)
            .filter(|(_, h)| h.gap.is_finite())
            .map(|(&r, h)| (r, h.gap))
            .collect();
        if logged.is_empty() {
            return 1.0;
        }
        logged.iter().filter(|(r, g)| r <= g).count() as f64 / logged.len() as f64
    }

    pub fn max_first_order_violation(&self) -> f64 {
        self.first_order_violations
            .iter()
            .cloned()
            .fold(0.0, f64::max)
    }
}

fn at(iteration: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Invariant { .. } | Error::AtIteration { .. } => e,
        other => Error::AtIteration {
            iteration,
            source: Box::new(other),
        },
    }
}

/// Coefficient solve on the given curves, warm-started from `weights`;
/// atoms whose weight vanishes are dropped.
fn coefficient_step(
    problem: &Problem,
    curves: Vec<Curve>,
    weights: &[f64],
    tol: f64,
) -> Result<SparseMeasure> {
    let qp = assemble_qp(&curves, problem)?;
    let start = DVector::from_column_slice(weights);
    let c = solve_nnqp_from(&qp, Some(&start), tol)?;
    SparseMeasure::from_parts(problem.params(), curves, c.as_slice())
}

fn first_order_violation(problem: &Problem, mu: &SparseMeasure) -> Result<f64> {
    let w = problem.dual_variable(mu)?;
    Ok(mu
        .atoms()
        .iter()
        .map(|a| (pairing(&a.curve, &w) - 1.0).abs())
        .fold(0.0, f64::max))
}

pub fn solve(problem: &Problem, cfg: &SolverConfig) -> Result<SolveReport> {
    cfg.validate()?;
    let clock = Instant::now();
    let m0 = problem.m0();
    let mut mu = SparseMeasure::empty(problem.params());
    let record = |iter: usize, mu: &SparseMeasure| -> Result<IterationRecord> {
        let o = problem.objective(mu)?;
        Ok(IterationRecord {
            iter,
            objective: o.total(),
            fidelity: o.fidelity,
            regularizer: o.regularizer,
            gap: f64::NAN,
            n_atoms: mu.len(),
            wallclock_s: clock.elapsed().as_secs_f64(),
        })
    };
    let mut history = vec![record(0, &mu)?];
    let mut violations = Vec::new();
    let mut candidates = Vec::new();
    let mut n = 0;
    let termination = loop {
        let w = problem.dual_variable(&mu).map_err(at(n))?;
        let found = multistart(
            &mu.curves(),
            &w,
            &cfg.multistart,
            &cfg.descent,
            cfg.seed,
            n as u64,
        )
        .map_err(at(n))?;
        candidates.push(found.len());
        if found.is_empty() {
            if !mu.is_empty() {
                return Err(Error::Invariant {
                    iteration: n,
                    detail: "insertion returned no stationary curve for a nonzero iterate".into(),
                });
            }
            history[n].gap = 0.0;
            break Termination::EmptyInsertion;
        }
        let best = -found[0].value;
        let gap = dual_gap(best, m0);
        history[n].gap = gap;
        if best <= 1.0 {
            break Termination::Converged;
        }
        if gap < cfg.tol {
            break Termination::GapBelowTol;
        }
        if n == cfg.max_outer_iterations {
            break Termination::Budget;
        }

        let mut curves = mu.curves();
        let mut weights = mu.weights();
        let inserted: Vec<&Curve> = match cfg.mode {
            Mode::Core => vec![&found[0].curve],
            Mode::Full => found.iter().map(|c| &c.curve).collect(),
        };
        for c in inserted {
            if !curves.iter().any(|k| k.max_node_distance(c) < CURVE_EQ_TOL) {
                curves.push(c.clone());
                weights.push(0.0);
            }
        }

        let step = |curves: Vec<Curve>, weights: &[f64]| -> Result<SparseMeasure> {
            coefficient_step(problem, curves, weights, cfg.qp_tol)
        };
        let next = match cfg.mode {
            Mode::Core => {
                let m = step(curves, &weights).map_err(at(n))?;
                violations.push(first_order_violation(problem, &m).map_err(at(n))?);
                m
            }
            Mode::Full => {
                let mut m = step(curves, &weights).map_err(at(n))?;
                violations.push(first_order_violation(problem, &m).map_err(at(n))?);
                for round in 0..cfg.k_max {
                    if round > 0 {
                        m = step(m.curves(), &m.weights()).map_err(at(n))?;
                        violations.push(first_order_violation(problem, &m).map_err(at(n))?);
                    }
                    if m.is_empty() {
                        break;
                    }
                    m = slide(&m, problem, &cfg.slide).map_err(at(n))?.measure;
                    m = merge_collisions(&m, problem, cfg.multistart.dedup_tol).map_err(at(n))?;
                }
                if cfg.k_max > 0 && !m.is_empty() {
                    m = step(m.curves(), &m.weights()).map_err(at(n))?;
                    violations.push(first_order_violation(problem, &m).map_err(at(n))?);
                }
                m
            }
        };

        n += 1;
        let rec = record(n, &next)?;
        let prev = history[n - 1].objective;
        if rec.objective > prev + MONOTONICITY_TOL {
            return Err(Error::Invariant {
                iteration: n,
                detail: format!("objective increased from {prev} to {}", rec.objective),
            });
        }
        history.push(rec);
        mu = next;
    };
    Ok(SolveReport {
        measure: mu,
        history,
        termination,
        first_order_violations: violations,
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{ForwardOperator, FrequencySchedule, Measurements};
    use crate::geometry::{RegParams, TimeGrid};
    use crate::problem::synthesize;

    fn exp1_problem(t: usize, a: f64) -> Problem {
        let grid = TimeGrid::new(t).unwrap();
        let p = RegParams::new(a, a).unwrap();
        let truth = SparseMeasure::from_intensities(
            p,
            [(1.0, Curve::line([0.2, 0.2], [0.6, 0.6], &grid).unwrap())],
        )
        .unwrap();
        let s =
            FrequencySchedule::spiral(20, 4.0 * std::f64::consts::PI / 20.0, 10.0, &grid).unwrap();
        let f = synthesize(&truth, &ForwardOperator::new(s.clone())).unwrap();
        Problem::new(grid, s, f, p).unwrap()
    }

    #[test]
    fn zero_data_stops_immediately() {
        let grid = TimeGrid::new(5).unwrap();
        let s = FrequencySchedule::spiral(10, 0.6, 8.0, &grid).unwrap();
        let f = Measurements::zeros(&s);
        let p = Problem::new(grid, s, f, RegParams::new(0.1, 0.1).unwrap()).unwrap();
        let r = solve(&p, &SolverConfig::default()).unwrap();
        assert_eq!(r.termination, Termination::EmptyInsertion);
        assert!(r.measure.is_empty());
        assert_eq!(r.history.len(), 1);
    }

    #[test]
    fn small_run_is_monotone_and_reproducible() {
        let p = exp1_problem(10, 0.1);
        let cfg = SolverConfig {
            max_outer_iterations: 6,
            ..SolverConfig::default()
        };
        let a = solve(&p, &cfg).unwrap();
        for pair in a.history.windows(2) {
            assert!(pair[1].objective <= pair[0].objective + MONOTONICITY_TOL);
        }
        assert!(
            a.max_first_order_violation() < 1e-6,
            "{:?}",
            a.first_order_violations
        );
        assert_eq!(a.history.len(), a.iterations() + 1);
        let b = solve(&p, &cfg).unwrap();
        assert_eq!(a.measure, b.measure);
        let strip = |r: &SolveReport| {
            r.history
                .iter()
                .map(|h| (h.objective.to_bits(), h.gap.to_bits(), h.n_atoms))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn core_mode_runs() {
        let p = exp1_problem(6, 0.2);
        let cfg = SolverConfig {
            mode: Mode::Core,
            max_outer_iterations: 4,
            ..SolverConfig::default()
        };
        let r = solve(&p, &cfg).unwrap();
        assert!(r.history.len() >= 2);
        assert!(r.final_objective() < p.m0());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("core".parse::<Mode>().unwrap(), Mode::Core);
        assert_eq!("full".parse::<Mode>().unwrap(), Mode::Full);
        assert!("fast".parse::<Mode>().is_err());
        assert_eq!(Termination::GapBelowTol.as_str(), "gap_below_TOL");
        assert_eq!(Termination::Budget.exit_code(), 2);
    }
}
