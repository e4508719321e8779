//! Program assembly and solver properties.

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use safeguard_core::backup_flow::{ConstraintData, ConstraintRow, RowKind};
use safeguard_core::robustness::{mr_parameters, RowLipschitz};
use safeguard_core::safety_filters::{assemble, solve_1d, solve_general, split_row};
use safeguard_core::{ConeRow, ConicProgram, FilterKind, LipschitzBundle, RowLabel, SolveStatus};

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

fn random_program(rng: &mut ChaCha8Rng) -> ConicProgram {
    let n_rows = (rng.next_u64() % 5) as usize;
    let rows = (0..n_rows)
        .map(|i| ConeRow {
            constant: uniform(rng, -30.0, 30.0),
            linear: vec![uniform(rng, -5.0, 5.0)],
            cone_coeff: if rng.next_u64() % 2 == 0 { 0.0 } else { uniform(rng, 0.0, 2.0) },
            label: RowLabel::Custom(i),
        })
        .collect();
    ConicProgram { u_desired: vec![uniform(rng, -25.0, 25.0)], rows, torque_limit: 20.0, slack_weight: 1e4 }
}

fn constraint_data(values: &[(f64, f64, f64)]) -> ConstraintData {
    let n = values.len();
    let rows = values
        .iter()
        .enumerate()
        .map(|(i, &(value, lie_f, lie_g))| ConstraintRow {
            kind: if i + 1 == n { RowKind::Terminal } else { RowKind::Trajectory { index: i, tau: i as f64 / 3.0 } },
            value,
            gradient: Default::default(),
            lie_f,
            lie_g,
        })
        .collect();
    ConstraintData { rows }
}

fn bundle(rows: &[(f64, f64, f64)], alpha: f64) -> LipschitzBundle {
    LipschitzBundle {
        rows: rows.iter().map(|&(value, lie_f, lie_g)| RowLipschitz { value, lie_f, lie_g }).collect(),
        alpha,
        h: 1.0,
    }
}

/// Dyadic values keep every product and sum exact, so the split can be
/// compared with the cone row without tolerance.
fn dyadic() -> impl Strategy<Value = f64> {
    (-4096i32..=4096).prop_map(|k| f64::from(k) / 64.0)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100_000, ..ProptestConfig::default() })]

    #[test]
    fn scalar_split_is_exact(c in dyadic(), l in dyadic(), b in (0i32..=4096).prop_map(|k| f64::from(k) / 64.0), u in dyadic()) {
        let row = ConeRow { constant: c, linear: vec![l], cone_coeff: b, label: RowLabel::Custom(0) };
        let cone = row.residual(&[u]) >= 0.0;
        let split = split_row(&row).iter().all(|(ci, di)| ci + di * u >= 0.0);
        prop_assert_eq!(cone, split);
    }
}

proptest! {
    #[test]
    fn mr_parameters_are_homogeneous(
        rows in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0, 0.0f64..10.0), 2..8),
        alpha in 0.0f64..10.0,
        eps in 0.0f64..2.0,
    ) {
        let b = bundle(&rows, alpha);
        let once = mr_parameters(&b, eps);
        let twice = mr_parameters(&b, 2.0 * eps);
        for ((a1, b1), (a2, b2)) in once.iter().zip(&twice) {
            prop_assert_eq!(2.0 * a1, *a2);
            prop_assert_eq!(2.0 * b1, *b2);
        }
    }

    #[test]
    fn larger_epsilon_never_widens_a_row(
        rows in prop::collection::vec((-5.0f64..5.0, -20.0f64..20.0, -10.0f64..10.0), 2..6),
        lips in prop::collection::vec((0.0f64..3.0, 0.0f64..3.0, 0.0f64..3.0), 6),
        ud in -25.0f64..25.0,
        e1 in 0.0f64..0.5,
        de in 0.0f64..0.5,
    ) {
        let cd = constraint_data(&rows);
        let b = bundle(&lips[..rows.len()], 5.0);
        let build = |eps: f64| {
            assemble(FilterKind::MrBsOp, &cd, 0.1, &mr_parameters(&b, eps), 5.0, ud, 20.0, 1e4).unwrap()
        };
        let (p1, p2) = (build(e1), build(e1 + de));
        for (r1, r2) in p1.rows.iter().zip(&p2.rows) {
            let interval = |r: &ConeRow| {
                let (mut lo, mut hi) = (-20.0f64, 20.0f64);
                for (c, d) in split_row(r) {
                    if d > 0.0 { lo = lo.max(-c / d) } else if d < 0.0 { hi = hi.min(c / -d) } else if c < 0.0 { return (1.0, -1.0) }
                }
                (lo, hi)
            };
            let (lo1, hi1) = interval(r1);
            let (lo2, hi2) = interval(r2);
            if lo2 <= hi2 {
                prop_assert!(lo2 >= lo1 - 1e-9 && hi2 <= hi1 + 1e-9);
            }
        }
        let s1 = solve_1d(&p1).unwrap();
        let s2 = solve_1d(&p2).unwrap();
        if s1.status == SolveStatus::Optimal && s2.status == SolveStatus::Optimal {
            prop_assert!((s2.u[0] - ud).abs() >= (s1.u[0] - ud).abs() - 1e-9);
        }
    }
}

#[test]
fn scalar_solver_beats_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let grid: Vec<f64> = (0..=400_000).map(|k| -20.0 + 1e-4 * k as f64).collect();
    for _ in 0..200 {
        let p = random_program(&mut rng);
        let s = solve_1d(&p).unwrap();
        let best = grid
            .iter()
            .filter(|u| p.min_residual(&[**u]) >= 0.0)
            .map(|u| p.objective(&[*u]))
            .fold(f64::INFINITY, f64::min);
        if s.status == SolveStatus::Optimal {
            assert!(s.kkt_residual <= 1e-12);
            assert!(p.min_residual(&s.u) >= -1e-9);
            assert!(best >= p.objective(&s.u) - 1e-3);
        } else {
            assert!(best.is_infinite(), "grid found a feasible point for a relaxed program");
        }
    }
}

#[test]
fn general_solver_matches_scalar_on_embedded_programs() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut compared = 0;
    while compared < 200 {
        let p1 = random_program(&mut rng);
        let s1 = solve_1d(&p1).unwrap();
        if s1.status != SolveStatus::Optimal {
            continue;
        }
        let mut p2 = p1.clone();
        p2.u_desired.push(0.0);
        for r in &mut p2.rows {
            r.linear.push(0.0);
        }
        let s2 = solve_general(&p2, 1e-10).unwrap();
        assert_eq!(s2.status, SolveStatus::Optimal);
        assert!(s2.kkt_residual <= 1e-10);
        assert_abs_diff_eq!(p1.objective(&s1.u), p2.objective(&s2.u), epsilon = 1e-6);
        compared += 1;
    }
}

#[test]
fn assembly_examples() {
    let cd = constraint_data(&[(2.0, 0.0, -1.0), (1.5, 0.1, -0.5), (1.0, 0.2, -0.2), (0.8, 0.3, -0.1), (0.05, -0.1, 0.01)]);
    let b = bundle(&[(1.2, 0.5, 0.3); 5], 5.0);
    let bs = assemble(FilterKind::BsQp, &cd, 0.1, &[], 5.0, 1.0, 20.0, 1e4).unwrap();
    let mr = assemble(FilterKind::MrBsOp, &cd, 0.1, &mr_parameters(&b, 0.0), 5.0, 1.0, 20.0, 1e4).unwrap();
    assert_eq!(bs, mr);
    assert_eq!(bs.rows.len(), 5);
    assert_eq!(bs.rows.iter().filter(|r| matches!(r.label, RowLabel::Trajectory(_))).count(), 4);
    assert_eq!(bs.rows[4].label, RowLabel::Terminal);
    // terminal row is not tightened
    assert_eq!(bs.rows[4].constant, -0.1 + 5.0 * 0.05);
    assert_eq!(bs.rows[1].constant, 0.1 + 5.0 * (1.5 - 0.1));

    let mr = assemble(FilterKind::MrBsOp, &cd, 0.1, &mr_parameters(&b, 0.4), 5.0, 1.0, 20.0, 1e4).unwrap();
    assert_abs_diff_eq!(mr.rows[0].constant, 5.0 * 1.9 - (0.5 + 5.0 * 1.2) * 0.4, epsilon = 1e-12);
    assert_abs_diff_eq!(mr.rows[0].cone_coeff, 0.3 * 0.4, epsilon = 1e-15);

    let cbf = assemble(FilterKind::CbfQp, &cd, 0.0, &[], 5.0, 1.0, 20.0, 1e4).unwrap();
    assert_eq!(cbf.rows.len(), 1);
    assert_eq!(cbf.rows[0].constant, 2.0 * 5.0);
    assert!(assemble(FilterKind::CbfQp, &cd, 0.1, &[], 5.0, 1.0, 20.0, 1e4).is_err());
}

#[test]
fn general_solver_examples() {
    let free = ConicProgram { u_desired: vec![1.0, 2.0], rows: vec![], torque_limit: 20.0, slack_weight: 1e4 };
    let s = solve_general(&free, 1e-9).unwrap();
    assert_abs_diff_eq!(s.u[0], 1.0, epsilon = 1e-6);
    assert_abs_diff_eq!(s.u[1], 2.0, epsilon = 1e-6);

    let half = ConicProgram {
        u_desired: vec![0.0, 0.0],
        rows: vec![ConeRow::linear(-1.0, vec![1.0, 0.0], RowLabel::Custom(0))],
        torque_limit: 20.0,
        slack_weight: 1e4,
    };
    let s = solve_general(&half, 1e-9).unwrap();
    assert_eq!(s.status, SolveStatus::Optimal);
    assert_abs_diff_eq!(s.u[0], 1.0, epsilon = 1e-6);
    assert_abs_diff_eq!(s.u[1], 0.0, epsilon = 1e-6);
}
