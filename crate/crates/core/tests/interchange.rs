use proptest::prelude::*;
use stochvsl::experiment::case_study_corridor;
use stochvsl::milp::{
    branch_and_bound, export_model, format_number, import_model, to_lp_string, to_mps_string, LinearProgram,
    ModelFormat, SolveOptions, VarKind,
};
use stochvsl::stochastic::{build_deterministic_equivalent, DemandDistribution, HorizonState, ObjectiveWeights};

fn case_model() -> LinearProgram {
    let c = case_study_corridor();
    let mut state = HorizonState::empty(&c, 8, 20.0);
    state.entry_queue = 0.35;
    state.densities.insert(4, vec![0.2, 0.31]);
    let dist = DemandDistribution::new(vec![1.0, 1.5, 2.0], vec![0.4, 0.2, 0.4]).unwrap();
    build_deterministic_equivalent(&c, &state, &dist, &ObjectiveWeights::default()).unwrap().lp
}

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-11 * a.abs().max(b.abs())
}

fn assert_same(a: &LinearProgram, b: &LinearProgram) {
    assert_eq!(a.num_variables(), b.num_variables());
    assert_eq!(a.num_constraints(), b.num_constraints());
    assert!(close(a.objective_constant(), b.objective_constant()));
    for (i, (x, y)) in a.variables().iter().zip(b.variables()).enumerate() {
        assert_eq!(x.kind, y.kind, "variable {i}");
        assert!(close(x.lower, y.lower) && close(x.upper, y.upper), "bounds of {i}");
        assert!(close(a.objective()[i], b.objective()[i]), "objective of {i}");
    }
    for (r, (x, y)) in a.constraints().iter().zip(b.constraints()).enumerate() {
        assert_eq!(x.sense, y.sense, "row {r}");
        assert!(close(x.rhs, y.rhs), "rhs of row {r}");
        let mut tx = x.terms.clone();
        let mut ty = y.terms.clone();
        tx.sort_by_key(|t| t.0);
        ty.sort_by_key(|t| t.0);
        assert_eq!(tx.len(), ty.len(), "row {r}");
        for (p, q) in tx.iter().zip(&ty) {
            assert!(p.0 == q.0 && close(p.1, q.1), "row {r}: {p:?} vs {q:?}");
        }
    }
}

#[test]
fn case_model_round_trips_through_both_formats() {
    let lp = case_model();
    let dir = tempfile::tempdir().unwrap();
    let reference = branch_and_bound(&lp, &SolveOptions::default()).unwrap();
    for (format, file) in [(ModelFormat::Lp, "window.lp"), (ModelFormat::Mps, "window.mps")] {
        let path = dir.path().join(file);
        assert_eq!(ModelFormat::from_extension(&path), Some(format));
        export_model(&lp, &path, format).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let text = String::from_utf8(bytes).expect("utf-8");
        assert!(!text.contains('\r'));
        assert!(text.ends_with('\n'));

        let back = import_model(&path, format).unwrap();
        assert_same(&lp, &back);
        let sol = branch_and_bound(&back, &SolveOptions::default()).unwrap();
        assert!((sol.objective - reference.objective).abs() < 1e-6);
    }
}

#[test]
fn names_follow_kind() {
    let lp = case_model();
    let text = to_lp_string(&lp);
    for (i, v) in lp.variables().iter().enumerate() {
        let want = match v.kind {
            VarKind::Binary => format!("b{i}"),
            VarKind::Continuous => format!("x{i}"),
        };
        assert_eq!(lp.var_name(stochvsl::milp::VarId(i)), want);
    }
    for section in ["Maximize", "Subject To", "Bounds", "Binaries", "End"] {
        assert!(text.lines().any(|l| l == section), "missing {section}");
    }
    let mps = to_mps_string(&lp);
    assert!(mps.starts_with("NAME"));
    assert!(mps.ends_with("ENDATA\n"));
}

#[test]
fn numbers_keep_twelve_significant_digits() {
    assert_eq!(format_number(1.0 / 3.0), "0.333333333333");
    assert_eq!(format_number(-4.884), "-4.884");
    assert_eq!(format_number(2.0 / 3.0 * 1e20), "6.66666666667e19");
    assert_eq!(format_number(1e-7), "1e-7");
    assert_eq!(format_number(0.0), "0");
}

proptest! {
    #[test]
    fn formatted_numbers_parse_back_within_twelve_digits(v in prop::num::f64::NORMAL) {
        let s = format_number(v);
        let back: f64 = s.parse().unwrap();
        prop_assert!((back - v).abs() <= 5e-12 * v.abs(), "{v} -> {s}");
        let digits = s.split('e').next().unwrap().chars().filter(|c| c.is_ascii_digit()).collect::<String>();
        prop_assert!(digits.trim_start_matches('0').len() <= 12, "{s}");
    }
}
