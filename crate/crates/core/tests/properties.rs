mod common;

use approx::assert_relative_eq;
use dgcg::forward::FrequencySchedule;
use dgcg::geometry::{kinetic_energy, regularizer, Curve, RegParams, SparseMeasure, TimeGrid};
use dgcg::insertion::insertion_value;
use dgcg::problem::{add_noise, dual_gap, pairing, synthesize};
use dgcg::weights::{assemble_qp, solve_nnqp, QuadraticProgram, DEFAULT_KKT_TOL};
use dgcg::{DualVariable, ForwardOperator};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;

use common::*;

fn params() -> impl Strategy<Value = RegParams> {
    (0.01f64..1.0, 0.01f64..1.0).prop_map(|(a, b)| RegParams::new(a, b).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn regularizer_is_linear_on_conic_combinations(seed in any::<u64>(), p in params(), n in 1usize..6, s in 0.1f64..10.0) {
        let mut rng = rng(seed);
        let grid = TimeGrid::new(8).unwrap();
        let mu = random_measure(&mut rng, &grid, p, n);
        let total: f64 = mu.weights().iter().sum();
        assert_relative_eq!(regularizer(&mu), total, max_relative = 1e-12);
        assert_relative_eq!(regularizer(&mu.scaled(s).unwrap()), s * total, max_relative = 1e-12);
    }

    #[test]
    fn kinetic_energy_survives_refinement(seed in any::<u64>(), intervals in 1usize..20, factor in 2usize..5) {
        let mut rng = rng(seed);
        let grid = TimeGrid::new(intervals).unwrap();
        let curve = random_curve(&mut rng, &grid, 0.0, 1.0);
        let fine = curve.refine(factor).unwrap();
        let fine_grid = TimeGrid::new(intervals * factor).unwrap();
        let coarse = kinetic_energy(&curve, &grid).unwrap();
        assert_relative_eq!(kinetic_energy(&fine, &fine_grid).unwrap(), coarse, max_relative = 1e-12);
    }

    #[test]
    fn insertion_value_is_negated_pairing(seed in any::<u64>(), p in params()) {
        let mut rng = rng(seed);
        let grid = TimeGrid::new(6).unwrap();
        let schedule = small_spiral(&grid);
        let op = ForwardOperator::new(schedule.clone());
        let w = DualVariable::from_residual(&op, p, &random_measurements(&mut rng, &schedule));
        let curve = random_curve(&mut rng, &grid, 0.0, 1.0);
        assert_relative_eq!(insertion_value(&curve, &w), -pairing(&curve, &w), max_relative = 1e-12);
    }

    #[test]
    fn forward_and_preadjoint_are_adjoint(seed in any::<u64>(), p in params(), n in 1usize..5) {
        let mut rng = rng(seed);
        let grid = TimeGrid::new(5).unwrap();
        let schedule = FrequencySchedule::rotating_lines(3, 1.0, 7, &grid).unwrap();
        let op = ForwardOperator::new(schedule.clone());
        let mu = random_measure(&mut rng, &grid, p, n);
        let h = random_measurements(&mut rng, &schedule);
        for i in 0..grid.num_nodes() {
            let lhs = op.apply_forward(&mu, i).inner(h.at(i));
            let rhs: f64 = mu
                .atoms()
                .iter()
                .zip(mu.intensities())
                .map(|(a, c)| c * op.apply_preadjoint(h.at(i), i, a.curve.node(i)).unwrap())
                .sum();
            assert_relative_eq!(lhs, rhs, max_relative = 1e-12, epsilon = 1e-14);
        }
    }

    #[test]
    fn noise_has_requested_relative_level(seed in any::<u64>(), eps in 0.001f64..2.0) {
        let mut rng = rng(seed);
        let grid = TimeGrid::new(4).unwrap();
        let p = RegParams::new(0.1, 0.1).unwrap();
        let op = ForwardOperator::new(small_spiral(&grid));
        let f = synthesize(&random_measure(&mut rng, &grid, p, 2), &op).unwrap();
        let noisy = add_noise(&f, eps, seed).unwrap();
        let ratio = (noisy.sub(&f).total_norm_sq() / f.total_norm_sq()).sqrt();
        assert_relative_eq!(ratio, eps, max_relative = 1e-12);
    }

    #[test]
    fn gap_vanishes_below_one_and_grows_quadratically(m0 in 0.0f64..10.0, t in 0.0f64..5.0) {
        let g = dual_gap(t, m0);
        if t <= 1.0 {
            prop_assert_eq!(g, 0.0);
        } else {
            assert_relative_eq!(g, 0.5 * m0 * (t * t - 1.0), max_relative = 1e-12);
        }
    }

    #[test]
    fn nnqp_matches_exhaustive_search(seed in any::<u64>(), n in 1usize..7) {
        let mut rng = rng(seed);
        let (g, b) = random_pd(&mut rng, n);
        let oracle = brute_force_nnqp(&g, &b);
        let qp = QuadraticProgram::new(g, b).unwrap();
        let c = solve_nnqp(&qp, DEFAULT_KKT_TOL).unwrap();
        prop_assert!((&c - &oracle).amax() <= 1e-8, "solver {c} vs oracle {oracle}");
        prop_assert!(qp.kkt_residual(&c) <= DEFAULT_KKT_TOL);
    }

    #[test]
    fn quadratic_form_reproduces_objective(seed in any::<u64>(), p in params(), n in 1usize..5) {
        let mut rng = rng(seed);
        let problem = random_problem(&mut rng, 6, p);
        let curves: Vec<Curve> = (0..n).map(|_| random_smooth_curve(&mut rng, problem.grid())).collect();
        let qp = assemble_qp(&curves, &problem).unwrap();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let mu = SparseMeasure::from_parts(p, curves, &c).unwrap();
        let direct = problem.objective(&mu).unwrap().total();
        assert_relative_eq!(qp.value(&DVector::from_vec(c)) + problem.m0(), direct, max_relative = 1e-10);
    }
}
