//! Branch-and-bound against exhaustive enumeration.

use proptest::prelude::*;
use stochvsl::milp::{branch_and_bound, solve_lp_relaxation, LinearProgram, Sense, SolveOptions, SolveStatus, VarId};

#[derive(Debug, Clone)]
struct Toy {
    objective: Vec<f64>,
    rows: Vec<(Vec<f64>, Sense, f64)>,
}

fn toy() -> impl Strategy<Value = Toy> {
    (2usize..=12).prop_flat_map(|n| {
        let row = (
            prop::collection::vec(-5i32..=9, n),
            prop_oneof![Just(Sense::Le), Just(Sense::Ge), Just(Sense::Le)],
            -4i32..=20,
        )
            .prop_map(|(a, s, b)| (a.into_iter().map(f64::from).collect(), s, f64::from(b)));
        (prop::collection::vec(-6i32..=10, n), prop::collection::vec(row, 1..=4))
            .prop_map(|(c, rows)| Toy { objective: c.into_iter().map(f64::from).collect(), rows })
    })
}

fn build(t: &Toy) -> (LinearProgram, Vec<VarId>) {
    let mut lp = LinearProgram::new();
    let x: Vec<VarId> = (0..t.objective.len()).map(|i| lp.add_binary(format!("x{i}"))).collect();
    for (v, c) in x.iter().zip(&t.objective) {
        lp.set_objective(*v, *c);
    }
    for (i, (a, s, b)) in t.rows.iter().enumerate() {
        let terms: Vec<(VarId, f64)> = x.iter().copied().zip(a.iter().copied()).collect();
        lp.add_constraint(format!("r{i}"), &terms, *s, *b);
    }
    (lp, x)
}

fn enumerate(t: &Toy) -> Option<f64> {
    let n = t.objective.len();
    let mut best: Option<f64> = None;
    for mask in 0u32..(1 << n) {
        let x: Vec<f64> = (0..n).map(|i| f64::from((mask >> i) & 1)).collect();
        let ok = t.rows.iter().all(|(a, s, b)| {
            let lhs: f64 = a.iter().zip(&x).map(|(a, x)| a * x).sum();
            match s {
                Sense::Le => lhs <= b + 1e-9,
                Sense::Ge => lhs >= b - 1e-9,
                Sense::Eq => (lhs - b).abs() <= 1e-9,
            }
        });
        if ok {
            let v: f64 = t.objective.iter().zip(&x).map(|(c, x)| c * x).sum();
            best = Some(best.map_or(v, |b: f64| b.max(v)));
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_enumeration(t in toy()) {
        let (lp, _) = build(&t);
        let sol = branch_and_bound(&lp, &SolveOptions { relative_gap: 0.0, ..Default::default() }).unwrap();
        match enumerate(&t) {
            None => prop_assert_eq!(sol.status, SolveStatus::Infeasible),
            Some(best) => {
                prop_assert_eq!(sol.status, SolveStatus::Optimal);
                prop_assert!((sol.objective - best).abs() < 1e-6, "bb {} vs enumeration {}", sol.objective, best);
                prop_assert!(lp.max_violation(&sol.values).0 < 1e-6);
                prop_assert!(sol.root_bound >= sol.objective - 1e-6);
            }
        }
    }

    #[test]
    fn hints_and_priorities_do_not_change_the_optimum(t in toy(), seed in any::<u64>()) {
        let (lp, x) = build(&t);
        let hint: Vec<(VarId, f64)> = x.iter().enumerate().map(|(i, &v)| (v, ((seed >> (i % 64)) & 1) as f64)).collect();
        let priority: Vec<(VarId, u32)> = x.iter().enumerate().map(|(i, &v)| (v, ((seed >> (i % 61)) & 3) as u32)).collect();
        let opts = SolveOptions { relative_gap: 0.0, hint, priority, ..Default::default() };
        let sol = branch_and_bound(&lp, &opts).unwrap();
        match enumerate(&t) {
            None => prop_assert_eq!(sol.status, SolveStatus::Infeasible),
            Some(best) => prop_assert!((sol.objective - best).abs() < 1e-6),
        }
    }
}

#[test]
fn knapsack_with_continuous_slack() {
    // max 5a + 4b + 3c + y  s.t.  2a + 3b + c + y <= 4,  y <= 1.5
    let mut lp = LinearProgram::new();
    let a = lp.add_binary("a");
    let b = lp.add_binary("b");
    let c = lp.add_binary("c");
    let y = lp.add_continuous("y", 0.0, 1.5);
    for (v, w) in [(a, 5.0), (b, 4.0), (c, 3.0), (y, 1.0)] {
        lp.set_objective(v, w);
    }
    lp.add_constraint("cap", &[(a, 2.0), (b, 3.0), (c, 1.0), (y, 1.0)], Sense::Le, 4.0);
    let sol = branch_and_bound(&lp, &SolveOptions::default()).unwrap();
    // a + c uses 3, leaving 1 for y: 5 + 3 + 1 = 9.
    assert!((sol.objective - 9.0).abs() < 1e-9);
    let relaxed = solve_lp_relaxation(&lp).unwrap();
    assert!(relaxed.objective >= sol.objective - 1e-9);
}

#[test]
fn node_limit_reports_a_bound() {
    let t = Toy {
        objective: (0..12).map(|i| f64::from(i % 5 + 1)).collect(),
        rows: vec![((0..12).map(|i| f64::from(i % 4 + 2)).collect(), Sense::Le, 13.5)],
    };
    let (lp, _) = build(&t);
    let sol =
        branch_and_bound(&lp, &SolveOptions { node_limit: Some(2), relative_gap: 0.0, ..Default::default() }).unwrap();
    assert!(sol.bound >= enumerate(&t).unwrap() - 1e-9);
}
