//! Symbolic link model against the numeric Lax-Hopf engine.

use proptest::prelude::*;
use stochvsl::link::{
    build_compatibility, build_demand_supply, build_vsl_linearization, compatibility_violation, LinkSpec,
    LinkVariables, MinEncoding, VslSets, Window,
};
use stochvsl::lwr::{realize_boundary_flows, LaxHopf, LinkGeometry, TriangularFd, ValueConditions};
use stochvsl::milp::{branch_and_bound, LinearProgram, SolveOptions};

const T: f64 = 20.0;
const STEPS: usize = 8;

fn case_fd() -> TriangularFd {
    TriangularFd::from_critical_density(30.0, 0.07, 0.5).unwrap()
}

fn plain(fd: TriangularFd) -> LinkSpec {
    LinkSpec { id: 1, geometry: LinkGeometry::new(0.0, 1200.0, 2, 4).unwrap(), fd, vsl: None }
}

fn vsl() -> LinkSpec {
    let fd = case_fd();
    LinkSpec {
        id: 1,
        geometry: LinkGeometry::new(0.0, 1200.0, 2, 4).unwrap(),
        fd,
        vsl: Some(VslSets::from_speeds(&fd, &[10.0, 15.0, 20.0, 25.0, 30.0]).unwrap()),
    }
}

fn flows() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(0.0..0.5f64, 2),
        prop::collection::vec(0.0..2.1f64, STEPS),
        prop::collection::vec(0.0..2.1f64, STEPS),
    )
}

/// Smallest `component - condition` over all components and both ends,
/// scanned on a dense time grid.
fn scanned_violation(lh: &LaxHopf, samples: usize) -> f64 {
    let g = lh.geometry();
    let horizon = STEPS as f64 * T;
    let mut worst: f64 = 0.0;
    for i in 1..=samples {
        let t = horizon * i as f64 / samples as f64;
        for (x, cond) in [(g.xi(), lh.upstream_condition(t)), (g.chi(), lh.downstream_condition(t))] {
            for c in lh.components() {
                if let Some(v) = lh.component(c, t, x).get() {
                    worst = worst.max(cond - v);
                }
            }
        }
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symbolic_components_match_lax_hopf((rho, qin, qout) in flows(), ti in 1usize..=160, at_end in any::<bool>()) {
        let fd = case_fd();
        let link = plain(fd);
        let vc = ValueConditions::new(rho.clone(), qin.clone(), qout.clone(), T);
        let lh = LaxHopf::new(&fd, &link.geometry, &vc);
        let w = Window { fd: &fd, geometry: &link.geometry, initial_density: &rho, step: T, steps: STEPS };
        let t = ti as f64;
        let x = if at_end { link.geometry.chi() } else { link.geometry.xi() };
        for c in lh.components() {
            let numeric = lh.component(c, t, x).get();
            let symbolic = w.component(c, t, x).map(|e| e.eval(&qin, &qout, fd.vf()));
            match (numeric, symbolic) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-6, "{c:?} at ({t}, {x}): {a} vs {b}"),
                (None, None) => {}
                (a, b) => prop_assert!(false, "{c:?} at ({t}, {x}): finiteness differs, {a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn rows_never_miss_a_scanned_violation((rho, qin, qout) in flows()) {
        let fd = case_fd();
        let link = plain(fd);
        let rows = compatibility_violation(&link, &fd, &rho, &qin, &qout, T).unwrap();
        let vc = ValueConditions::new(rho, qin, qout, T);
        let scanned = scanned_violation(&LaxHopf::new(&fd, &link.geometry, &vc), 640);
        prop_assert!(rows + 1e-7 >= scanned, "rows {rows} < scanned {scanned}");
    }

    #[test]
    fn engine_realized_flows_are_certified((rho, qin, qout) in flows()) {
        let fd = case_fd();
        let link = plain(fd);
        let vc = realize_boundary_flows(&fd, &link.geometry, rho.clone(), &qin, &qout, T);
        let v = compatibility_violation(&link, &fd, &rho, &vc.inflow, &vc.outflow, T).unwrap();
        prop_assert!(v < 1e-6, "violation {v}");
    }
}

/// Single-link model: reward weighted outflow, cap the inflow.
fn single_link_model(
    link: &LinkSpec,
    rho: &[f64],
    cap_in: f64,
    fix_speed: Option<usize>,
) -> (LinearProgram, LinkVariables) {
    let mut lp = LinearProgram::new();
    let vars = LinkVariables::new(&mut lp, link, STEPS, "");
    if link.is_vsl() {
        build_vsl_linearization(&mut lp, link, &vars).unwrap();
    }
    build_compatibility(&mut lp, link, &vars, rho, T).unwrap();
    build_demand_supply(&mut lp, link, &vars, rho, T, MinEncoding::Envelope).unwrap();
    for n in 0..STEPS {
        lp.set_bounds(vars.inflow[n], 0.0, cap_in);
        lp.add_objective(vars.outflow[n], (STEPS - n) as f64);
        lp.add_objective(vars.inflow[n], 0.01);
    }
    if let (Some(s), Some(v)) = (fix_speed, &vars.vsl) {
        for (i, &d) in v.select.iter().enumerate() {
            lp.fix(d, if i == s { 1.0 } else { 0.0 });
        }
    }
    (lp, vars)
}

#[test]
fn fixed_speed_matches_plain_link() {
    let link = vsl();
    for rho in [[0.0, 0.0], [0.1, 0.3], [0.45, 0.02]] {
        for s in 0..5 {
            let (lp, _) = single_link_model(&link, &rho, 1.8, Some(s));
            let a = branch_and_bound(&lp, &SolveOptions::default()).unwrap();
            let fixed = plain(link.fd_for(s));
            let (lp2, _) = single_link_model(&fixed, &rho, 1.8, None);
            let b = branch_and_bound(&lp2, &SolveOptions::default()).unwrap();
            assert!(a.status.has_solution() && b.status.has_solution());
            assert!(
                (a.objective - b.objective).abs() < 1e-6,
                "rho {rho:?} speed {s}: {} vs {}",
                a.objective,
                b.objective
            );
        }
    }
}

#[test]
fn solved_flows_respect_engine_demand_and_supply() {
    for link in [plain(case_fd()), vsl()] {
        for rho in [[0.0, 0.0], [0.2, 0.4], [0.05, 0.1]] {
            let (lp, vars) = single_link_model(&link, &rho, 2.1, None);
            let sol = branch_and_bound(&lp, &SolveOptions::default()).unwrap();
            let fd = vars
                .vsl
                .as_ref()
                .map(|v| link.fd_for((0..v.select.len()).find(|&i| sol.values[v.select[i].0] > 0.5).unwrap()))
                .unwrap_or(link.fd);
            let qin: Vec<f64> = vars.inflow.iter().map(|v| sol.values[v.0]).collect();
            let qout: Vec<f64> = vars.outflow.iter().map(|v| sol.values[v.0]).collect();
            assert!(compatibility_violation(&link, &fd, &rho, &qin, &qout, T).unwrap() < 1e-6);
            for n in 0..STEPS {
                let vc = ValueConditions::new(rho.to_vec(), qin[..n].to_vec(), qout[..n].to_vec(), T);
                let lh = LaxHopf::new(&fd, &link.geometry, &vc);
                assert!(
                    qout[n] <= lh.sending_flow(n) + 1e-6,
                    "step {n}: outflow {} > sending {}",
                    qout[n],
                    lh.sending_flow(n)
                );
                assert!(
                    qin[n] <= lh.receiving_flow(n) + 1e-6,
                    "step {n}: inflow {} > receiving {}",
                    qin[n],
                    lh.receiving_flow(n)
                );
            }
        }
    }
}

#[test]
fn empty_link_outflow_starts_after_free_flow_travel() {
    let link = plain(case_fd());
    let (lp, vars) = single_link_model(&link, &[0.0, 0.0], 2.1, None);
    let sol = branch_and_bound(&lp, &SolveOptions::default()).unwrap();
    // 1200 m at 30 m/s: nothing can leave during the first two steps.
    assert!(sol.values[vars.outflow[0].0] < 1e-9 && sol.values[vars.outflow[1].0] < 1e-9);
    assert!((sol.values[vars.outflow[2].0] - 2.1).abs() < 1e-6);
}
