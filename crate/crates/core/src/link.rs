//! One link's physics as linear constraints over its boundary flows.
//!
//! Inside a planning window the case of every Moskowitz branch depends only
//! on the evaluation point, the fundamental diagram and the (fixed) initial
//! densities, never on the flows. Each component evaluated at a boundary
//! point is therefore an affine function of the inflows and outflows,
//! represented by [`FlowExpr`]. Compatibility rows compare such a component
//! with the boundary condition it must not undercut.
//!
//! For a link with a variable speed limit the rows are generated once per
//! candidate speed. Rows whose flow coefficients agree across speeds (after
//! moving `q_in / vf` terms onto the auxiliary `k_in` variables) become one
//! shared row with a speed-weighted constant; the rest are emitted per speed
//! and switched off by the speed's selection binary.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lwr::{Component, LaxHopf, LinkGeometry, LwrError, TriangularFd, ValueConditions, GUARD_TOL};
use crate::milp::{LinearProgram, Sense, VarId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinkModelError {
    #[error("link {0} has no speed-limit candidates")]
    NotVsl(usize),
    #[error("link {link}: speed-limit candidate {index} inconsistent: {msg}")]
    InconsistentVsl { link: usize, index: usize, msg: String },
    #[error("link {link}: initial density {rho} of segment {segment} outside [0, {rho_m}]")]
    InvalidDensity { link: usize, segment: usize, rho: f64, rho_m: f64 },
    #[error("link {link}: initial state violates its own compatibility by {violation}")]
    IncompatibleInitialState { link: usize, violation: f64 },
    #[error("exact demand encoding is only available for fixed-speed links (link {0})")]
    UnsupportedEncoding(usize),
    #[error(transparent)]
    Lwr(#[from] LwrError),
}

/// Candidate speed limits with their critical densities and capacities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VslSets {
    pub speeds: Vec<f64>,
    pub critical_densities: Vec<f64>,
    pub capacities: Vec<f64>,
}

impl VslSets {
    /// Derives critical densities and capacities for each speed keeping the
    /// base diagram's `w` and `rho_m`.
    pub fn from_speeds(base: &TriangularFd, speeds: &[f64]) -> Result<Self, LwrError> {
        let fds: Vec<TriangularFd> = speeds.iter().map(|&v| base.with_free_flow_speed(v)).collect::<Result<_, _>>()?;
        Ok(Self {
            speeds: speeds.to_vec(),
            critical_densities: fds.iter().map(|f| f.rho_c()).collect(),
            capacities: fds.iter().map(|f| f.capacity()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.speeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speeds.is_empty()
    }

    pub fn max_capacity(&self) -> f64 {
        self.capacities.iter().copied().fold(0.0, f64::max)
    }

    /// Index of the fastest candidate.
    pub fn fastest(&self) -> usize {
        (0..self.speeds.len()).max_by(|&a, &b| self.speeds[a].total_cmp(&self.speeds[b])).unwrap_or(0)
    }

    pub fn index_of(&self, speed: f64) -> Option<usize> {
        self.speeds.iter().position(|&v| (v - speed).abs() < 1e-9)
    }

    pub fn fd(&self, base: &TriangularFd, s: usize) -> TriangularFd {
        TriangularFd::from_parts(self.speeds[s], base.w(), base.rho_m(), self.critical_densities[s], self.capacities[s])
    }

    /// Checks the critical density / capacity of every candidate against the
    /// triangular relation with the base `w` and `rho_m`.
    pub fn check(&self, base: &TriangularFd) -> Result<(), (usize, String)> {
        if self.speeds.is_empty()
            || self.critical_densities.len() != self.speeds.len()
            || self.capacities.len() != self.speeds.len()
        {
            return Err((0, "candidate lists are empty or of different lengths".into()));
        }
        for s in 0..self.speeds.len() {
            if let Some(msg) = self.fd(base, s).consistency_error() {
                return Err((s, msg));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub id: usize,
    pub geometry: LinkGeometry,
    pub fd: TriangularFd,
    pub vsl: Option<VslSets>,
}

impl LinkSpec {
    pub fn is_vsl(&self) -> bool {
        self.vsl.is_some()
    }

    pub fn max_capacity(&self) -> f64 {
        self.vsl.as_ref().map_or(self.fd.capacity(), |v| v.max_capacity())
    }

    /// Diagram in force under candidate `s` (the base diagram for fixed links).
    pub fn fd_for(&self, s: usize) -> TriangularFd {
        match &self.vsl {
            Some(v) => v.fd(&self.fd, s),
            None => self.fd,
        }
    }

    fn check_densities(&self, rho: &[f64]) -> Result<(), LinkModelError> {
        for (k, &r) in rho.iter().enumerate() {
            if !(0.0..=self.fd.rho_m() + 1e-12).contains(&r) {
                return Err(LinkModelError::InvalidDensity {
                    link: self.id,
                    segment: k,
                    rho: r,
                    rho_m: self.fd.rho_m(),
                });
            }
        }
        Ok(())
    }
}

/// Affine function of a link's step flows:
/// `constant + sum_i inflow[i] q_in(i) + outflow[i] q_out(i) + inflow_over_vf[i] q_in(i) / vf`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowExpr {
    pub constant: f64,
    pub inflow: Vec<f64>,
    pub outflow: Vec<f64>,
    pub inflow_over_vf: Vec<f64>,
}

impl FlowExpr {
    pub fn constant(c: f64, steps: usize) -> Self {
        Self { constant: c, inflow: vec![0.0; steps], outflow: vec![0.0; steps], inflow_over_vf: vec![0.0; steps] }
    }

    pub fn eval(&self, inflow: &[f64], outflow: &[f64], vf: f64) -> f64 {
        let mut v = self.constant;
        for i in 0..self.inflow.len() {
            v += (self.inflow[i] + self.inflow_over_vf[i] / vf) * inflow[i] + self.outflow[i] * outflow[i];
        }
        v
    }

    pub fn minus(&self, other: &FlowExpr) -> FlowExpr {
        let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect();
        FlowExpr {
            constant: self.constant - other.constant,
            inflow: sub(&self.inflow, &other.inflow),
            outflow: sub(&self.outflow, &other.outflow),
            inflow_over_vf: sub(&self.inflow_over_vf, &other.inflow_over_vf),
        }
    }

    pub fn is_constant(&self) -> bool {
        self.inflow.iter().chain(&self.outflow).chain(&self.inflow_over_vf).all(|c| *c == 0.0)
    }

    /// Same flow coefficients (constants may differ).
    fn same_slopes(&self, other: &FlowExpr) -> bool {
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        close(&self.inflow, &other.inflow)
            && close(&self.outflow, &other.outflow)
            && close(&self.inflow_over_vf, &other.inflow_over_vf)
    }

    /// Coefficients with the `q_in / vf` part folded in for a known speed.
    fn folded_inflow(&self, vf: f64) -> Vec<f64> {
        self.inflow.iter().zip(&self.inflow_over_vf).map(|(a, k)| a + k / vf).collect()
    }
}

/// Step containing `t`, counting a grid time as the end of the previous step.
fn step_of(t: f64, step: f64, steps: usize) -> usize {
    (((t - GUARD_TOL) / step).floor().max(0.0) as usize).min(steps - 1)
}

/// Upstream boundary condition `gamma(t)` as an expression.
pub fn upstream_target(step: f64, steps: usize, t: f64) -> FlowExpr {
    let mut e = FlowExpr::constant(0.0, steps);
    let p = step_of(t, step, steps);
    e.inflow[..p].fill(step);
    e.inflow[p] = t - p as f64 * step;
    e
}

/// Downstream boundary condition `beta(t)` as an expression.
pub fn downstream_target(initial_vehicles: f64, step: f64, steps: usize, t: f64) -> FlowExpr {
    let mut e = FlowExpr::constant(-initial_vehicles, steps);
    let p = step_of(t, step, steps);
    e.outflow[..p].fill(step);
    e.outflow[p] = t - p as f64 * step;
    e
}

/// Window description shared by the symbolic evaluators.
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    pub fd: &'a TriangularFd,
    pub geometry: &'a LinkGeometry,
    pub initial_density: &'a [f64],
    pub step: f64,
    pub steps: usize,
}

impl Window<'_> {
    pub fn initial_vehicles(&self) -> f64 {
        self.initial_density.iter().sum::<f64>() * self.geometry.segment_length()
    }

    /// Component value at `(t, x)` as an expression in the flows; `None`
    /// where the component is infinite.
    pub fn component(&self, c: Component, t: f64, x: f64) -> Option<FlowExpr> {
        let fd = self.fd;
        let steps = self.steps;
        let step = self.step;
        match c {
            Component::Initial(k) => {
                let vc = ValueConditions::new(self.initial_density.to_vec(), Vec::new(), Vec::new(), step);
                LaxHopf::new(fd, self.geometry, &vc).initial_branch(k, t, x).map(|b| FlowExpr::constant(b.value, steps))
            }
            Component::Upstream(n) => {
                let d = x - self.geometry.xi();
                let tau = t - d / fd.vf();
                let start = n as f64 * step;
                let end = start + step;
                if n >= steps || tau < start - GUARD_TOL {
                    return None;
                }
                let mut e = FlowExpr::constant(0.0, steps);
                e.inflow[..n].fill(step);
                if tau <= end + GUARD_TOL {
                    e.inflow[n] = t - start;
                    e.inflow_over_vf[n] = -d;
                } else {
                    e.inflow[n] = step;
                    e.constant = fd.capacity() * (t - end) - fd.rho_c() * d;
                }
                Some(e)
            }
            Component::Downstream(n) => {
                let z = x - self.geometry.chi();
                let tau = t - z / fd.w();
                let start = n as f64 * step;
                let end = start + step;
                if n >= steps || tau < start - GUARD_TOL {
                    return None;
                }
                let mut e = FlowExpr::constant(-self.initial_vehicles(), steps);
                e.outflow[..n].fill(step);
                if tau < end - GUARD_TOL {
                    e.outflow[n] = tau - start;
                    e.constant -= fd.rho_m() * z;
                } else {
                    e.outflow[n] = step;
                    e.constant += fd.capacity() * (t - end) - fd.rho_c() * z;
                }
                Some(e)
            }
        }
    }

    fn components(&self) -> impl Iterator<Item = Component> + '_ {
        (0..self.geometry.segments())
            .map(Component::Initial)
            .chain((0..self.steps).map(Component::Upstream))
            .chain((0..self.steps).map(Component::Downstream))
    }
}

/// Which value condition is checked, at which boundary and at what kind of
/// time point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RowFamily {
    InitialAtDownstreamGrid,
    InitialAtDownstreamArrival,
    InitialAtUpstreamGrid,
    InitialAtUpstreamArrival,
    UpstreamAtUpstreamGrid,
    UpstreamAtDownstreamGrid,
    UpstreamAtDownstreamArrival,
    DownstreamAtUpstreamGrid,
    DownstreamAtUpstreamArrival,
    DownstreamAtDownstreamGrid,
}

/// One compatibility inequality `lhs >= 0`, where `lhs` is the component
/// value minus the boundary condition at `time`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompatRow {
    pub family: RowFamily,
    pub component: Component,
    /// Grid index `m` (time `mT`) or arrival-point index (0 or 1).
    pub point: usize,
    pub time: f64,
    pub lhs: FlowExpr,
}

impl CompatRow {
    fn key(&self) -> (RowFamily, Component, usize) {
        (self.family, self.component, self.point)
    }
}

/// All compatibility inequalities of one link over `steps` steps, for one
/// fundamental diagram. Rows whose component is infinite at the checked
/// point are skipped; rows without flow terms are checked and dropped.
pub fn compatibility_rows(w: &Window, link_id: usize) -> Result<Vec<CompatRow>, LinkModelError> {
    let g = w.geometry;
    let fd = w.fd;
    let horizon = w.steps as f64 * w.step;
    let n0 = w.initial_vehicles();
    let on_grid = |t: f64| ((t / w.step).round() * w.step - t).abs() < GUARD_TOL;
    let mut rows = Vec::new();
    let push = |family,
                component,
                point,
                time: f64,
                target: FlowExpr,
                rows: &mut Vec<CompatRow>|
     -> Result<(), LinkModelError> {
        let x = match family {
            RowFamily::InitialAtDownstreamGrid
            | RowFamily::InitialAtDownstreamArrival
            | RowFamily::UpstreamAtDownstreamGrid
            | RowFamily::UpstreamAtDownstreamArrival
            | RowFamily::DownstreamAtDownstreamGrid => g.chi(),
            _ => g.xi(),
        };
        let Some(value) = w.component(component, time, x) else { return Ok(()) };
        let lhs = value.minus(&target);
        if lhs.is_constant() {
            if lhs.constant < -1e-7 * (1.0 + n0) {
                return Err(LinkModelError::IncompatibleInitialState { link: link_id, violation: -lhs.constant });
            }
            return Ok(());
        }
        rows.push(CompatRow { family, component, point, time, lhs });
        Ok(())
    };
    let beta = |t: f64| downstream_target(n0, w.step, w.steps, t);
    let gamma = |t: f64| upstream_target(w.step, w.steps, t);

    for comp in w.components() {
        for m in 1..=w.steps {
            let t = m as f64 * w.step;
            let (at_chi, at_xi) = match comp {
                Component::Initial(_) => (RowFamily::InitialAtDownstreamGrid, RowFamily::InitialAtUpstreamGrid),
                Component::Upstream(_) => (RowFamily::UpstreamAtDownstreamGrid, RowFamily::UpstreamAtUpstreamGrid),
                Component::Downstream(_) => {
                    (RowFamily::DownstreamAtDownstreamGrid, RowFamily::DownstreamAtUpstreamGrid)
                }
            };
            push(at_chi, comp, m, t, beta(t), &mut rows)?;
            push(at_xi, comp, m, t, gamma(t), &mut rows)?;
        }
        // Kinks of the component at the opposite boundary.
        let arrivals: Vec<(RowFamily, f64, bool)> = match comp {
            Component::Initial(k) => {
                let (a, b) = (g.segment_start(k), g.segment_start(k + 1));
                vec![
                    (RowFamily::InitialAtDownstreamArrival, (g.chi() - b) / fd.vf(), true),
                    (RowFamily::InitialAtDownstreamArrival, (g.chi() - a) / fd.vf(), true),
                    (RowFamily::InitialAtUpstreamArrival, (g.xi() - a) / fd.w(), false),
                    (RowFamily::InitialAtUpstreamArrival, (g.xi() - b) / fd.w(), false),
                ]
            }
            Component::Upstream(n) => {
                vec![(RowFamily::UpstreamAtDownstreamArrival, n as f64 * w.step + g.length() / fd.vf(), true)]
            }
            Component::Downstream(n) => {
                vec![(RowFamily::DownstreamAtUpstreamArrival, n as f64 * w.step - g.length() / fd.w(), false)]
            }
        };
        for (i, (family, t, downstream)) in arrivals.into_iter().enumerate() {
            if t <= GUARD_TOL || t > horizon + GUARD_TOL || on_grid(t) {
                continue;
            }
            let target = if downstream { beta(t) } else { gamma(t) };
            push(family, comp, i % 2, t, target, &mut rows)?;
        }
    }
    Ok(rows)
}

/// Decision variables of one link over a planning window.
#[derive(Debug, Clone)]
pub struct LinkVariables {
    pub link: usize,
    pub inflow: Vec<VarId>,
    pub outflow: Vec<VarId>,
    pub vsl: Option<VslVariables>,
    /// Maximum exit flow of each step with unlimited downstream space.
    pub demand: Vec<VarId>,
    /// Maximum entry flow of each step with unlimited upstream arrivals.
    pub supply: Vec<VarId>,
    /// Maximum cumulative exits by the end of each step.
    pub exit_bound: Vec<VarId>,
    /// Maximum cumulative entries by the end of each step.
    pub entry_bound: Vec<VarId>,
}

#[derive(Debug, Clone)]
pub struct VslVariables {
    /// Speed selection, one binary per candidate.
    pub select: Vec<VarId>,
    /// `k_a[s][i]`: equals `q_in(i) / v_s` when candidate `s` is selected.
    pub k_a: Vec<Vec<VarId>>,
    /// `k_in[i] = q_in(i) / vf` of the selected speed.
    pub k_in: Vec<VarId>,
    /// Capacity of the selected speed.
    pub capacity: VarId,
}

impl LinkVariables {
    pub fn new(lp: &mut LinearProgram, link: &LinkSpec, steps: usize, prefix: &str) -> Self {
        let qmax = link.max_capacity();
        let series = |lp: &mut LinearProgram, name: &str, lo: f64, hi: f64| -> Vec<VarId> {
            (0..steps).map(|n| lp.add_continuous(format!("{prefix}l{}.{name}[{n}]", link.id), lo, hi)).collect()
        };
        let inflow = series(lp, "q_in", 0.0, qmax);
        let outflow = series(lp, "q_out", 0.0, qmax);
        let demand = series(lp, "demand", 0.0, qmax);
        let supply = series(lp, "supply", 0.0, qmax);
        let exit_bound = series(lp, "exit_bound", f64::NEG_INFINITY, f64::INFINITY);
        let entry_bound = series(lp, "entry_bound", f64::NEG_INFINITY, f64::INFINITY);
        let vsl = link.vsl.as_ref().map(|sets| {
            let select = (0..sets.len()).map(|s| lp.add_binary(format!("{prefix}l{}.vsl[{s}]", link.id))).collect();
            let k_a = (0..sets.len())
                .map(|s| {
                    let hi = sets.capacities[s] / sets.speeds[s];
                    (0..steps)
                        .map(|i| lp.add_continuous(format!("{prefix}l{}.k_a[{s}][{i}]", link.id), 0.0, hi))
                        .collect()
                })
                .collect();
            let vmin = sets.speeds.iter().copied().fold(f64::INFINITY, f64::min);
            let k_in = (0..steps)
                .map(|i| lp.add_continuous(format!("{prefix}l{}.k_in[{i}]", link.id), 0.0, qmax / vmin))
                .collect();
            let cmin = sets.capacities.iter().copied().fold(f64::INFINITY, f64::min);
            let capacity = lp.add_continuous(format!("{prefix}l{}.capacity", link.id), cmin, qmax);
            VslVariables { select, k_a, k_in, capacity }
        });
        Self { link: link.id, inflow, outflow, vsl, demand, supply, exit_bound, entry_bound }
    }

    pub fn steps(&self) -> usize {
        self.inflow.len()
    }

    /// Terms of a fixed-speed expression.
    fn terms(&self, inflow: &[f64], outflow: &[f64]) -> Vec<(VarId, f64)> {
        let mut t: Vec<(VarId, f64)> = Vec::new();
        for i in 0..self.inflow.len() {
            t.push((self.inflow[i], inflow[i]));
            t.push((self.outflow[i], outflow[i]));
        }
        t
    }
}

/// Lower bound of `sum terms` over the variables' boxes.
fn box_minimum(lp: &LinearProgram, terms: &[(VarId, f64)]) -> f64 {
    terms
        .iter()
        .map(|&(v, c)| {
            let var = lp.variable(v);
            if c > 0.0 {
                c * var.lower
            } else if c < 0.0 {
                c * var.upper
            } else {
                0.0
            }
        })
        .sum()
}

/// Adds `terms + constant >= 0` unless the variable bounds already imply it.
/// Returns whether a row was added.
fn add_ge_zero(lp: &mut LinearProgram, label: String, terms: Vec<(VarId, f64)>, constant: f64) -> bool {
    if box_minimum(lp, &terms) + constant >= -1e-9 {
        return false;
    }
    lp.add_constraint(label, &terms, Sense::Ge, -constant);
    true
}

/// Adds the compatibility inequalities of `link` for the given initial
/// densities. Speed-limited links need their linearization variables and
/// rows from [`build_vsl_linearization`]. Returns the number of rows added.
pub fn build_compatibility(
    lp: &mut LinearProgram,
    link: &LinkSpec,
    vars: &LinkVariables,
    initial_density: &[f64],
    step: f64,
) -> Result<usize, LinkModelError> {
    link.check_densities(initial_density)?;
    let steps = vars.steps();
    let window = |fd| Window { fd, geometry: &link.geometry, initial_density, step, steps };
    let mut added = 0;
    match (&link.vsl, &vars.vsl) {
        (None, _) => {
            for row in compatibility_rows(&window(&link.fd), link.id)? {
                let terms = vars.terms(&row.lhs.folded_inflow(link.fd.vf()), &row.lhs.outflow);
                let label = format!("l{}.compat.{:?}.{:?}.{}", link.id, row.family, row.component, row.point);
                added += add_ge_zero(lp, label, terms, row.lhs.constant) as usize;
            }
        }
        (Some(sets), Some(vv)) => {
            let fds: Vec<TriangularFd> = (0..sets.len()).map(|s| link.fd_for(s)).collect();
            let per_speed: Vec<Vec<CompatRow>> =
                fds.iter().map(|fd| compatibility_rows(&window(fd), link.id)).collect::<Result<_, _>>()?;
            added += add_speed_rows(lp, link, vars, vv, &per_speed, "compat");
        }
        (Some(_), None) => return Err(LinkModelError::NotVsl(link.id)),
    }
    Ok(added)
}

/// Emits rows given per candidate speed: shared rows where the flow slopes
/// agree across all speeds, otherwise per-speed rows relaxed by
/// `M (1 - select_s)` with `M` the row's worst case over the variable boxes.
fn add_speed_rows(
    lp: &mut LinearProgram,
    link: &LinkSpec,
    vars: &LinkVariables,
    vv: &VslVariables,
    per_speed: &[Vec<CompatRow>],
    tag: &str,
) -> usize {
    use std::collections::BTreeMap;
    let sets = link.vsl.as_ref().expect("speed-limited link");
    let mut grouped: BTreeMap<(RowFamily, Component, usize), Vec<Option<&CompatRow>>> = BTreeMap::new();
    for (s, rows) in per_speed.iter().enumerate() {
        for r in rows {
            grouped.entry(r.key()).or_insert_with(|| vec![None; sets.len()])[s] = Some(r);
        }
    }
    let mut added = 0;
    for (key, rows) in grouped {
        let label = format!("l{}.{tag}.{:?}.{:?}.{}", link.id, key.0, key.1, key.2);
        let first = rows[0];
        let shared = first.is_some() && rows.iter().all(|r| r.is_some_and(|r| r.lhs.same_slopes(&first.unwrap().lhs)));
        if shared {
            let lhs = &first.unwrap().lhs;
            let mut terms = vars.terms(&lhs.inflow, &lhs.outflow);
            for i in 0..vars.steps() {
                terms.push((vv.k_in[i], lhs.inflow_over_vf[i]));
            }
            for (s, r) in rows.iter().enumerate() {
                terms.push((vv.select[s], r.unwrap().lhs.constant));
            }
            added += add_ge_zero(lp, label, terms, 0.0) as usize;
            continue;
        }
        for (s, r) in rows.iter().enumerate() {
            let Some(r) = r else { continue };
            let terms = vars.terms(&r.lhs.folded_inflow(sets.speeds[s]), &r.lhs.outflow);
            let worst = box_minimum(lp, &terms) + r.lhs.constant;
            if worst >= -1e-9 {
                continue;
            }
            let mut terms = terms;
            // lhs + M (1 - select_s) >= 0
            terms.push((vv.select[s], worst));
            added += add_ge_zero(lp, format!("{label}.s{s}"), terms, r.lhs.constant - worst) as usize;
        }
    }
    added
}

/// Speed-selection rows: one candidate selected, the selected capacity
/// bounding every flow, and the `k_in = q_in / vf` linearization.
pub fn build_vsl_linearization(
    lp: &mut LinearProgram,
    link: &LinkSpec,
    vars: &LinkVariables,
) -> Result<usize, LinkModelError> {
    let (Some(sets), Some(vv)) = (&link.vsl, &vars.vsl) else {
        return Err(LinkModelError::NotVsl(link.id));
    };
    let id = link.id;
    let before = lp.num_constraints();
    let qmax = sets.max_capacity();
    let ones: Vec<(VarId, f64)> = vv.select.iter().map(|&d| (d, 1.0)).collect();
    lp.add_constraint(format!("l{id}.vsl.one"), &ones, Sense::Eq, 1.0);
    let mut cap: Vec<(VarId, f64)> = vv.select.iter().zip(&sets.capacities).map(|(&d, &q)| (d, q)).collect();
    cap.push((vv.capacity, -1.0));
    lp.add_constraint(format!("l{id}.vsl.capacity"), &cap, Sense::Eq, 0.0);
    for i in 0..vars.steps() {
        for q in [vars.inflow[i], vars.outflow[i]] {
            lp.add_constraint(format!("l{id}.vsl.flow_cap[{i}]"), &[(q, 1.0), (vv.capacity, -1.0)], Sense::Le, 0.0);
        }
        for s in 0..sets.len() {
            let v = sets.speeds[s];
            let ka = vv.k_a[s][i];
            lp.add_constraint(
                format!("l{id}.vsl.k_a_sel[{s}][{i}]"),
                &[(ka, 1.0), (vv.select[s], -sets.capacities[s] / v)],
                Sense::Le,
                0.0,
            );
            lp.add_constraint(
                format!("l{id}.vsl.k_a_hi[{s}][{i}]"),
                &[(ka, 1.0), (vars.inflow[i], -1.0 / v)],
                Sense::Le,
                0.0,
            );
            lp.add_constraint(
                format!("l{id}.vsl.k_a_lo[{s}][{i}]"),
                &[(ka, 1.0), (vars.inflow[i], -1.0 / v), (vv.select[s], -qmax / v)],
                Sense::Ge,
                -qmax / v,
            );
        }
        let mut sum: Vec<(VarId, f64)> = (0..sets.len()).map(|s| (vv.k_a[s][i], 1.0)).collect();
        sum.push((vv.k_in[i], -1.0));
        lp.add_constraint(format!("l{id}.vsl.k_in[{i}]"), &sum, Sense::Eq, 0.0);
    }
    Ok(lp.num_constraints() - before)
}

/// How the minimum over components defining the demand and supply counts
/// is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MinEncoding {
    /// Count bounded above by every component. Exact for the flows, since
    /// the counts only ever bound flows from above.
    Envelope,
    /// Count equal to the smallest component, selected by binaries.
    Selection,
}

/// Demand and supply of each step.
///
/// The maximum cumulative exit count by the end of step `n` is the minimum
/// of the initial and upstream components at the downstream end; demand is
/// that count minus the exits so far, per unit time. Supply mirrors this at
/// the upstream end with the initial and downstream components. Both also
/// bound the actual outflow and inflow of the step.
pub fn build_demand_supply(
    lp: &mut LinearProgram,
    link: &LinkSpec,
    vars: &LinkVariables,
    initial_density: &[f64],
    step: f64,
    encoding: MinEncoding,
) -> Result<usize, LinkModelError> {
    link.check_densities(initial_density)?;
    if encoding == MinEncoding::Selection && link.is_vsl() {
        return Err(LinkModelError::UnsupportedEncoding(link.id));
    }
    let steps = vars.steps();
    let g = &link.geometry;
    let before = lp.num_constraints();
    let n0: f64 = initial_density.iter().sum::<f64>() * g.segment_length();
    let qmax = link.max_capacity();
    let big_m = link.fd.rho_m() * g.length() + qmax * steps as f64 * step;
    let id = link.id;

    for n in 0..steps {
        let t = (n + 1) as f64 * step;
        // D_n T = L_n - exits so far; S_n T = U_n - entries so far.
        let mut d_row = vec![(vars.demand[n], step), (vars.exit_bound[n], -1.0)];
        let mut s_row = vec![(vars.supply[n], step), (vars.entry_bound[n], -1.0)];
        for i in 0..n {
            d_row.push((vars.outflow[i], step));
            s_row.push((vars.inflow[i], step));
        }
        lp.add_constraint(format!("l{id}.demand[{n}]"), &d_row, Sense::Eq, 0.0);
        lp.add_constraint(format!("l{id}.supply[{n}]"), &s_row, Sense::Eq, 0.0);
        lp.add_constraint(
            format!("l{id}.out_le_demand[{n}]"),
            &[(vars.outflow[n], 1.0), (vars.demand[n], -1.0)],
            Sense::Le,
            0.0,
        );
        lp.add_constraint(
            format!("l{id}.in_le_supply[{n}]"),
            &[(vars.inflow[n], 1.0), (vars.supply[n], -1.0)],
            Sense::Le,
            0.0,
        );

        for (bound, at, upstream_side) in [(vars.exit_bound[n], g.chi(), true), (vars.entry_bound[n], g.xi(), false)] {
            let comps: Vec<Component> = (0..g.segments())
                .map(Component::Initial)
                .chain((0..steps).map(if upstream_side { Component::Upstream } else { Component::Downstream }))
                .collect();
            // Exit counts are measured from the start of the window.
            let shift = if upstream_side { n0 } else { 0.0 };
            let per_speed: Vec<Vec<(Component, FlowExpr)>> = (0..link.vsl.as_ref().map_or(1, |v| v.len()))
                .map(|s| {
                    let fd = link.fd_for(s);
                    let w = Window { fd: &fd, geometry: g, initial_density, step, steps };
                    comps.iter().filter_map(|&c| w.component(c, t, at).map(|e| (c, e))).collect()
                })
                .collect();
            let side = if upstream_side { "exit" } else { "entry" };
            match (&link.vsl, &vars.vsl) {
                (Some(sets), Some(vv)) => {
                    for (s, list) in per_speed.iter().enumerate() {
                        for (c, e) in list {
                            // bound <= comp + shift + M (1 - select_s)
                            let mut terms = vars.terms(&e.folded_inflow(sets.speeds[s]), &e.outflow);
                            terms.push((bound, -1.0));
                            terms.push((vv.select[s], -big_m));
                            lp.add_constraint(
                                format!("l{id}.{side}_bound[{n}].{c:?}.s{s}"),
                                &terms,
                                Sense::Ge,
                                -(e.constant + shift) - big_m,
                            );
                        }
                    }
                }
                _ => {
                    let list = &per_speed[0];
                    let mut selectors = Vec::new();
                    for (c, e) in list {
                        let mut terms = vars.terms(&e.folded_inflow(link.fd.vf()), &e.outflow);
                        terms.push((bound, -1.0));
                        lp.add_constraint(
                            format!("l{id}.{side}_bound[{n}].{c:?}"),
                            &terms,
                            Sense::Ge,
                            -(e.constant + shift),
                        );
                        if encoding == MinEncoding::Selection {
                            let y = lp.add_binary(format!("l{id}.{side}_select[{n}].{c:?}"));
                            // bound >= comp + shift - M (1 - y)
                            let mut terms = vars.terms(&e.folded_inflow(link.fd.vf()), &e.outflow);
                            terms.iter_mut().for_each(|t| t.1 = -t.1);
                            terms.push((bound, 1.0));
                            terms.push((y, -big_m));
                            lp.add_constraint(
                                format!("l{id}.{side}_select_lo[{n}].{c:?}"),
                                &terms,
                                Sense::Ge,
                                e.constant + shift - big_m,
                            );
                            selectors.push((y, 1.0));
                        }
                    }
                    if !selectors.is_empty() {
                        lp.add_constraint(format!("l{id}.{side}_select_one[{n}]"), &selectors, Sense::Eq, 1.0);
                    }
                }
            }
        }
    }
    Ok(lp.num_constraints() - before)
}

/// Per-segment densities at `t_boundary` for the next period: exact
/// segment averages from count differences, so vehicles are conserved.
pub fn chain_initial_densities(
    link: &LinkSpec,
    fd: &TriangularFd,
    solved: &ValueConditions,
    t_boundary: f64,
) -> Vec<f64> {
    if t_boundary <= 0.0 {
        return solved.initial_density.clone();
    }
    LaxHopf::new(fd, &link.geometry, solved).segment_densities(t_boundary)
}

/// Re-evaluates every compatibility inequality for concrete flows and
/// returns the largest violation (0 when all hold).
pub fn compatibility_violation(
    link: &LinkSpec,
    fd: &TriangularFd,
    initial_density: &[f64],
    inflow: &[f64],
    outflow: &[f64],
    step: f64,
) -> Result<f64, LinkModelError> {
    let w = Window { fd, geometry: &link.geometry, initial_density, step, steps: inflow.len() };
    Ok(compatibility_rows(&w, link.id)?.iter().map(|r| -r.lhs.eval(inflow, outflow, fd.vf())).fold(0.0, f64::max))
}
