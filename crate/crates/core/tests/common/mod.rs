use rand::Rng;
use rand_chacha::ChaCha8Rng;
use stochvsl::lwr::{realize_boundary_flows, GodunovField, LaxHopf, LinkGeometry, TriangularFd, ValueConditions};

/// Maximum density discrepancy between exact cell averages and Godunov cells
/// at the end of every step, skipping cells within two cells of a jump in the
/// exact solution.
/// Returns the worst density gap away from jumps, the worst count gap, and
/// how many cells entered the density comparison.
pub fn density_discrepancy(lh: &LaxHopf, f: &GodunovField, steps: usize) -> (f64, f64, usize) {
    let g = lh.geometry();
    let cells = f.density[0].len();
    let per_step = (lh.conditions().step / f.dt).round() as usize;
    let mut worst = 0.0f64;
    let mut count_err = 0.0f64;
    let mut compared = 0;
    for n in 1..=steps {
        let level = n * per_step;
        let t = level as f64 * f.dt;
        let edges: Vec<f64> = (0..=cells).map(|i| lh.moskowitz(t, g.xi() + i as f64 * f.dx).value()).collect();
        let exact: Vec<f64> = edges.windows(2).map(|w| (w[0] - w[1]) / f.dx).collect();
        for (i, e) in edges.iter().enumerate() {
            count_err = count_err.max((e - f.cumulative_count(level, i)).abs());
        }
        // Point densities on a fine sub-grid locate discontinuities.
        let sub = 8;
        let point: Vec<f64> =
            (0..cells * sub).map(|j| lh.density(t, g.xi() + (j as f64 + 0.5) * f.dx / sub as f64).unwrap()).collect();
        let jump_in_cell: Vec<bool> = (0..cells)
            .map(|i| {
                let s = &point[i * sub..(i + 1) * sub];
                let (lo, hi) = s.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
                hi - lo > 1e-6 || (i + 1 < cells && (point[(i + 1) * sub] - point[(i + 1) * sub - 1]).abs() > 1e-6)
            })
            .collect();
        for i in 0..cells {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(cells - 1);
            if (lo..=hi).any(|j| jump_in_cell[j]) {
                continue;
            }
            worst = worst.max((exact[i] - f.density[level][i]).abs());
            compared += 1;
        }
    }
    (worst, count_err, compared)
}

/// Random compatible conditions: random requests, realized by the engine.
pub fn random_conditions(rng: &mut ChaCha8Rng, fd: &TriangularFd, g: &LinkGeometry, steps: usize) -> ValueConditions {
    let init: Vec<f64> = (0..g.segments()).map(|_| rng.gen_range(0.0..fd.rho_m())).collect();
    let req_in: Vec<f64> = (0..steps).map(|_| rng.gen_range(0.0..fd.capacity())).collect();
    let req_out: Vec<f64> = (0..steps).map(|_| rng.gen_range(0.0..fd.capacity())).collect();
    realize_boundary_flows(fd, g, init, &req_in, &req_out, 20.0)
}
