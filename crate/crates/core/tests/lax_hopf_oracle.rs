//! Closed-form Moskowitz components against a brute-force evaluation of the
//! Lax-Hopf formula, and the full solution against a Godunov scheme.

mod common;

use common::{density_discrepancy, random_conditions};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stochvsl::lwr::{godunov_oracle, Component, LaxHopf, LinkGeometry, TriangularFd, ValueConditions};

fn case_fd() -> TriangularFd {
    TriangularFd::from_critical_density(30.0, 0.07, 0.5).unwrap()
}

/// `sup_rho [psi(rho) - u rho]` for `u` in `[w, vf]`; the supremum of a
/// concave piecewise-linear function is attained at a vertex.
fn conjugate(fd: &TriangularFd, u: f64) -> Option<f64> {
    if u < fd.w() - 1e-12 || u > fd.vf() + 1e-12 {
        return None;
    }
    let vertices = [0.0, fd.rho_c(), fd.rho_m()];
    vertices
        .iter()
        .map(|&r| fd.flux(r).unwrap() - u * r)
        .fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.max(v))))
}

fn sample(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..=n).map(move |i| lo + (hi - lo) * i as f64 / n as f64)
}

/// Infimum of `c(t', y) + (t - t') R((x - y) / (t - t'))` over the domain of
/// one value condition, by dense sampling plus the feasibility boundaries.
fn brute_force(lh: &LaxHopf, comp: Component, t: f64, x: f64) -> f64 {
    let fd = lh.fd();
    let g = lh.geometry();
    let vc = lh.conditions();
    let mut best = f64::INFINITY;
    let mut consider = |tp: f64, y: f64, c: f64| {
        let dt = t - tp;
        if dt < -1e-12 {
            return;
        }
        let v = if dt <= 1e-12 {
            if (x - y).abs() < 1e-9 {
                Some(c)
            } else {
                None
            }
        } else {
            conjugate(fd, (x - y) / dt).map(|r| c + dt * r)
        };
        if let Some(v) = v {
            best = best.min(v);
        }
    };
    match comp {
        Component::Initial(k) => {
            let a = g.segment_start(k);
            let b = a + g.segment_length();
            let mut ys: Vec<f64> = sample(a, b, 4000).collect();
            for y in [x - fd.vf() * t, x - fd.w() * t] {
                if y >= a && y <= b {
                    ys.push(y);
                }
            }
            for y in ys {
                consider(0.0, y, lh.initial_condition(k, y));
            }
        }
        Component::Upstream(n) => {
            let t0 = n as f64 * vc.step;
            let mut ts: Vec<f64> = sample(t0, t0 + vc.step, 4000).collect();
            ts.push(t - (x - g.xi()) / fd.vf());
            for tp in ts.into_iter().filter(|tp| *tp >= t0 && *tp <= t0 + vc.step) {
                consider(tp, g.xi(), lh.upstream_condition(tp.min(t0 + vc.step - 1e-12)));
            }
        }
        Component::Downstream(n) => {
            let t0 = n as f64 * vc.step;
            let mut ts: Vec<f64> = sample(t0, t0 + vc.step, 4000).collect();
            ts.push(t - (x - g.chi()) / fd.w());
            for tp in ts.into_iter().filter(|tp| *tp >= t0 && *tp <= t0 + vc.step) {
                consider(tp, g.chi(), lh.downstream_condition(tp.min(t0 + vc.step - 1e-12)));
            }
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn closed_form_matches_lax_hopf_formula(
        seed in 0u64..10_000,
        t in 0.0f64..200.0,
        frac in 0.0f64..=1.0,
    ) {
        let fd = case_fd();
        let g = LinkGeometry::new(0.0, 1200.0, 2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init: Vec<f64> = (0..2).map(|_| rng.gen_range(0.0..0.5)).collect();
        let qin: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..2.1)).collect();
        let qout: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..2.1)).collect();
        let vc = ValueConditions::new(init, qin, qout, 20.0);
        let lh = LaxHopf::new(&fd, &g, &vc);
        let x = frac * 1200.0;
        for comp in lh.components().collect::<Vec<_>>() {
            let closed = lh.component(comp, t, x).value();
            let brute = brute_force(&lh, comp, t, x);
            if closed.is_finite() || brute.is_finite() {
                // Sampling resolution of 4000 points over at most 600 m / 20 s.
                prop_assert!((closed - brute).abs() < 1e-2 * (1.0 + closed.abs().min(1e6)),
                    "{comp:?} t={t} x={x}: closed {closed} brute {brute}");
            }
        }
    }

    #[test]
    fn inf_morphism_lower_bound_and_monotonicity(seed in 0u64..10_000) {
        let fd = case_fd();
        let g = LinkGeometry::new(0.0, 1200.0, 2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vc = random_conditions(&mut rng, &fd, &g, 8);
        let lh = LaxHopf::new(&fd, &g, &vc);
        let times: Vec<f64> = sample(0.0, 160.0, 16).collect();
        let xs: Vec<f64> = sample(0.0, 1200.0, 12).collect();
        for &t in &times {
            let mut prev = f64::INFINITY;
            for &x in &xs {
                let m = lh.moskowitz(t, x);
                prop_assert!(m.is_finite(), "no component applies at ({t}, {x})");
                for c in lh.components() {
                    prop_assert!(m.value() <= lh.component(c, t, x).value());
                }
                prop_assert!(m.value() <= prev + 1e-9, "M increasing in x at t={t}");
                prev = m.value();
                let rho = lh.density(t, x).unwrap();
                prop_assert!((0.0..=fd.rho_m()).contains(&rho));
            }
        }
        for &x in &xs {
            let mut prev = f64::NEG_INFINITY;
            for &t in &times {
                let m = lh.moskowitz(t, x).value();
                prop_assert!(m >= prev - 1e-9, "M decreasing in t at x={x}");
                prev = m;
            }
        }
    }

    #[test]
    fn boundary_values_are_attained(seed in 0u64..10_000) {
        // Compatible conditions are reproduced on their own domains.
        let fd = case_fd();
        let g = LinkGeometry::new(0.0, 1200.0, 2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vc = random_conditions(&mut rng, &fd, &g, 8);
        let lh = LaxHopf::new(&fd, &g, &vc);
        for t in sample(0.0, 160.0, 32) {
            prop_assert!((lh.moskowitz(t, 0.0).value() - lh.upstream_condition(t)).abs() < 1e-7);
            prop_assert!((lh.moskowitz(t, 1200.0).value() - lh.downstream_condition(t)).abs() < 1e-7);
        }
    }
}

#[test]
fn godunov_converges_to_lax_hopf() {
    let fd = case_fd();
    let g = LinkGeometry::new(0.0, 1200.0, 2, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);
    for instance in 0..6 {
        let vc = random_conditions(&mut rng, &fd, &g, 8);
        let lh = LaxHopf::new(&fd, &g, &vc);
        let mut errs = Vec::new();
        for refine in [8.0, 16.0, 32.0] {
            let dx = g.segment_length() / refine;
            let f = godunov_oracle(&vc, &fd, &g, dx / fd.vf(), dx).unwrap();
            let (dens, count, _) = density_discrepancy(&lh, &f, 8);
            if refine == 8.0 {
                assert!(dens <= 0.15 * fd.rho_m(), "instance {instance}: density gap {dens}");
            }
            errs.push(count);
        }
        assert!(errs[2] < errs[0], "instance {instance}: count errors {errs:?} do not shrink");
    }
}
