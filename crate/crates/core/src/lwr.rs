//! Closed-form Lax-Hopf solutions of the LWR model on a single link.
//!
//! The link `[xi, chi]` is split into `segments` cells of length `X` with a
//! constant initial density per cell, and time is split into steps of length
//! `T` with a constant boundary flow per step. Each of these value conditions
//! produces its own Moskowitz function (cumulative vehicle count); the
//! solution on the link is the pointwise minimum over all of them.
//!
//! Indices are zero-based: segment `k` covers `[xi + kX, xi + (k+1)X]` and
//! step `n` covers `[nT, (n+1)T]`.
//!
//! ```
//! use stochvsl::lwr::{LinkGeometry, TriangularFd, ValueConditions, LaxHopf};
//!
//! let fd = TriangularFd::new(30.0, -4.9, 0.5).unwrap();
//! let geom = LinkGeometry::new(0.0, 1200.0, 2, 4).unwrap();
//! let vc = ValueConditions::new(vec![0.0, 0.0], vec![2.1; 8], vec![0.0; 8], 20.0);
//! let lh = LaxHopf::new(&fd, &geom, &vc);
//! // Forty seconds in, the free-flow front has travelled 1200 m.
//! assert!((lh.moskowitz(40.0, 600.0).value() - 42.0).abs() < 1e-9);
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance (seconds / metres) used in the case guards.
pub const GUARD_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LwrError {
    #[error("invalid fundamental diagram parameter: {0}")]
    InvalidParameter(String),
    #[error("density {rho} outside [0, {rho_m}]")]
    DensityOutOfRange { rho: f64, rho_m: f64 },
    #[error("invalid link geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid value conditions: {0}")]
    InvalidValueConditions(String),
    #[error("CFL condition violated: dt = {dt} > dx / vf = {limit}")]
    Cfl { dt: f64, limit: f64 },
}

/// Critical density of a triangular diagram, `-rho_m * w / (vf - w)`.
pub fn critical_density(vf: f64, w: f64, rho_m: f64) -> Result<f64, LwrError> {
    if !(vf > 0.0 && vf.is_finite()) {
        return Err(LwrError::InvalidParameter(format!("free-flow speed {vf} must be > 0")));
    }
    if !(w < 0.0 && w.is_finite()) {
        return Err(LwrError::InvalidParameter(format!("congestion wave speed {w} must be < 0")));
    }
    if !(rho_m > 0.0 && rho_m.is_finite()) {
        return Err(LwrError::InvalidParameter(format!("jam density {rho_m} must be > 0")));
    }
    Ok(-rho_m * w / (vf - w))
}

/// Triangular flux law `psi(rho) = max(vf rho, w (rho - rho_m))`.
///
/// Densities and flows are per link (summed over lanes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriangularFd {
    vf: f64,
    w: f64,
    rho_m: f64,
    rho_c: f64,
    capacity: f64,
}

impl TriangularFd {
    pub fn new(vf: f64, w: f64, rho_m: f64) -> Result<Self, LwrError> {
        let rho_c = critical_density(vf, w, rho_m)?;
        Ok(Self { vf, w, rho_m, rho_c, capacity: vf * rho_c })
    }

    /// Diagram with a prescribed critical density; the congestion wave speed
    /// is derived as `-vf rho_c / (rho_m - rho_c)`.
    pub fn from_critical_density(vf: f64, rho_c: f64, rho_m: f64) -> Result<Self, LwrError> {
        if !(rho_c > 0.0 && rho_c < rho_m) {
            return Err(LwrError::InvalidParameter(format!("critical density {rho_c} must lie in (0, {rho_m})")));
        }
        Self::new(vf, -vf * rho_c / (rho_m - rho_c), rho_m)
    }

    /// Builds a diagram from externally supplied parameters without deriving
    /// `rho_c` or the capacity. Use [`TriangularFd::consistency_error`] to
    /// check such a diagram.
    pub fn from_parts(vf: f64, w: f64, rho_m: f64, rho_c: f64, capacity: f64) -> Self {
        Self { vf, w, rho_m, rho_c, capacity }
    }

    /// Same jam density and wave speed, different free-flow speed.
    pub fn with_free_flow_speed(&self, vf: f64) -> Result<Self, LwrError> {
        Self::new(vf, self.w, self.rho_m)
    }

    /// Returns a description of the first violated invariant, if any.
    pub fn consistency_error(&self) -> Option<String> {
        let rho_c = match critical_density(self.vf, self.w, self.rho_m) {
            Ok(r) => r,
            Err(e) => return Some(e.to_string()),
        };
        let tol = 1e-6 * self.rho_m.max(1.0);
        if (rho_c - self.rho_c).abs() > tol {
            return Some(format!("critical density {} differs from derived {}", self.rho_c, rho_c));
        }
        let q_free = self.vf * self.rho_c;
        let q_cong = self.w * (self.rho_c - self.rho_m);
        let qtol = 1e-6 * q_free.abs().max(1.0);
        if (q_free - self.capacity).abs() > qtol || (q_cong - self.capacity).abs() > qtol {
            return Some(format!("capacity {} inconsistent with apex flows {q_free} / {q_cong}", self.capacity));
        }
        None
    }

    pub fn vf(&self) -> f64 {
        self.vf
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn rho_m(&self) -> f64 {
        self.rho_m
    }
    pub fn rho_c(&self) -> f64 {
        self.rho_c
    }
    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn flux(&self, rho: f64) -> Result<f64, LwrError> {
        self.check_density(rho)?;
        Ok(self.flux_unchecked(rho))
    }

    /// Sending flow (link demand) of a cell with density `rho`.
    pub fn sending(&self, rho: f64) -> f64 {
        self.vf * rho.clamp(0.0, self.rho_c)
    }

    /// Receiving flow (link supply) of a cell with density `rho`.
    pub fn receiving(&self, rho: f64) -> f64 {
        if rho <= self.rho_c {
            self.capacity
        } else {
            (self.w * (rho.min(self.rho_m) - self.rho_m)).max(0.0)
        }
    }

    fn flux_unchecked(&self, rho: f64) -> f64 {
        (self.vf * rho).min(self.w * (rho - self.rho_m)).max(0.0)
    }

    fn check_density(&self, rho: f64) -> Result<(), LwrError> {
        if rho < -1e-12 || rho > self.rho_m + 1e-12 || rho.is_nan() {
            return Err(LwrError::DensityOutOfRange { rho, rho_m: self.rho_m });
        }
        Ok(())
    }
}

/// Spatial layout of a link: `[xi, chi]` split into equal segments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkGeometry {
    xi: f64,
    chi: f64,
    segment_length: f64,
    segments: usize,
    lanes: u32,
}

impl LinkGeometry {
    pub fn new(xi: f64, chi: f64, segments: usize, lanes: u32) -> Result<Self, LwrError> {
        if segments == 0 {
            return Err(LwrError::InvalidGeometry("at least one segment required".into()));
        }
        if !(chi > xi) {
            return Err(LwrError::InvalidGeometry(format!("chi {chi} must exceed xi {xi}")));
        }
        Ok(Self { xi, chi, segment_length: (chi - xi) / segments as f64, segments, lanes })
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }
    pub fn chi(&self) -> f64 {
        self.chi
    }
    pub fn length(&self) -> f64 {
        self.chi - self.xi
    }
    pub fn segment_length(&self) -> f64 {
        self.segment_length
    }
    pub fn segments(&self) -> usize {
        self.segments
    }
    pub fn lanes(&self) -> u32 {
        self.lanes
    }

    /// Absolute position of the upstream end of segment `k`.
    pub fn segment_start(&self, k: usize) -> f64 {
        self.xi + k as f64 * self.segment_length
    }
}

/// Piecewise-constant initial densities and per-step boundary flows.
///
/// The inflow and outflow histories may have different lengths; a step with
/// no recorded flow simply contributes no boundary component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueConditions {
    pub initial_density: Vec<f64>,
    pub inflow: Vec<f64>,
    pub outflow: Vec<f64>,
    pub step: f64,
}

impl ValueConditions {
    pub fn new(initial_density: Vec<f64>, inflow: Vec<f64>, outflow: Vec<f64>, step: f64) -> Self {
        Self { initial_density, inflow, outflow, step }
    }

    pub fn validate(&self, fd: &TriangularFd, geom: &LinkGeometry) -> Result<(), LwrError> {
        if self.initial_density.len() != geom.segments() {
            return Err(LwrError::InvalidValueConditions(format!(
                "{} initial densities for {} segments",
                self.initial_density.len(),
                geom.segments()
            )));
        }
        if !(self.step > 0.0) {
            return Err(LwrError::InvalidValueConditions("step size must be positive".into()));
        }
        for &rho in &self.initial_density {
            fd.check_density(rho)?;
        }
        let cap = fd.capacity() * (1.0 + 1e-9) + 1e-12;
        for &q in self.inflow.iter().chain(&self.outflow) {
            if !(q >= -1e-12 && q <= cap) {
                return Err(LwrError::InvalidValueConditions(format!(
                    "boundary flow {q} outside [0, {}]",
                    fd.capacity()
                )));
            }
        }
        Ok(())
    }

    /// Vehicles initially on the link.
    pub fn initial_vehicles(&self, segment_length: f64) -> f64 {
        self.initial_density.iter().sum::<f64>() * segment_length
    }
}

/// Extended-real Moskowitz value; `+inf` marks points outside a component's
/// domain of influence.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Moskowitz(f64);

impl Moskowitz {
    pub const INFINITY: Moskowitz = Moskowitz(f64::INFINITY);

    pub fn finite(v: f64) -> Self {
        debug_assert!(v.is_finite());
        Moskowitz(v)
    }
    pub fn is_finite(self) -> bool {
        self.0.is_finite()
    }
    /// Raw value, `f64::INFINITY` when undefined.
    pub fn value(self) -> f64 {
        self.0
    }
    pub fn get(self) -> Option<f64> {
        self.is_finite().then_some(self.0)
    }
    pub fn min(self, other: Moskowitz) -> Moskowitz {
        if other.0 < self.0 {
            other
        } else {
            self
        }
    }
}

impl From<Option<Branch>> for Moskowitz {
    fn from(b: Option<Branch>) -> Self {
        b.map_or(Moskowitz::INFINITY, |b| Moskowitz::finite(b.value))
    }
}

/// One value condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Initial(usize),
    Upstream(usize),
    Downstream(usize),
}

/// Value of one component at a point together with `-dM/dx` of the active
/// affine branch (downstream-side branch at kinks).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Branch {
    pub value: f64,
    pub density: f64,
}

/// Lax-Hopf evaluator for one link and one set of value conditions.
#[derive(Debug, Clone)]
pub struct LaxHopf<'a> {
    fd: &'a TriangularFd,
    geom: &'a LinkGeometry,
    vc: &'a ValueConditions,
    // init_prefix[k] = sum_{i<k} rho(i) X
    init_prefix: Vec<f64>,
    // in_prefix[n] = sum_{i<n} q_in(i) T
    in_prefix: Vec<f64>,
    out_prefix: Vec<f64>,
}

fn prefix(values: &[f64], scale: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len() + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for v in values {
        acc += v * scale;
        out.push(acc);
    }
    out
}

impl<'a> LaxHopf<'a> {
    pub fn new(fd: &'a TriangularFd, geom: &'a LinkGeometry, vc: &'a ValueConditions) -> Self {
        assert_eq!(vc.initial_density.len(), geom.segments(), "one initial density per segment");
        Self {
            fd,
            geom,
            vc,
            init_prefix: prefix(&vc.initial_density, geom.segment_length()),
            in_prefix: prefix(&vc.inflow, vc.step),
            out_prefix: prefix(&vc.outflow, vc.step),
        }
    }

    pub fn fd(&self) -> &TriangularFd {
        self.fd
    }
    pub fn geometry(&self) -> &LinkGeometry {
        self.geom
    }
    pub fn conditions(&self) -> &ValueConditions {
        self.vc
    }

    /// Vehicles on the link at `t = 0`.
    pub fn initial_vehicles(&self) -> f64 {
        *self.init_prefix.last().unwrap()
    }

    /// Cumulative inflow count `sum_{i<n} q_in(i) T`.
    pub fn cumulative_inflow(&self, n: usize) -> f64 {
        self.in_prefix[n.min(self.vc.inflow.len())]
    }

    pub fn cumulative_outflow(&self, n: usize) -> f64 {
        self.out_prefix[n.min(self.vc.outflow.len())]
    }

    /// Upstream boundary condition `gamma(t)` on its own domain.
    pub fn upstream_condition(&self, t: f64) -> f64 {
        boundary_condition(&self.vc.inflow, &self.in_prefix, self.vc.step, t)
    }

    /// Downstream boundary condition `beta(t)` on its own domain.
    pub fn downstream_condition(&self, t: f64) -> f64 {
        boundary_condition(&self.vc.outflow, &self.out_prefix, self.vc.step, t) - self.initial_vehicles()
    }

    /// Initial condition `M_k(0, x)` on segment `k`.
    pub fn initial_condition(&self, k: usize, x: f64) -> f64 {
        let a = k as f64 * self.geom.segment_length();
        -self.init_prefix[k] - self.vc.initial_density[k] * (x - self.geom.xi() - a)
    }

    /// Moskowitz solution generated by the initial density of segment `k`.
    pub fn initial_branch(&self, k: usize, t: f64, x: f64) -> Option<Branch> {
        let fd = self.fd;
        let (vf, w, rho_m, rho_c) = (fd.vf(), fd.w(), fd.rho_m(), fd.rho_c());
        let seg = self.geom.segment_length();
        let y = x - self.geom.xi();
        let a = k as f64 * seg;
        let b = a + seg;
        let rho = self.vc.initial_density[k];
        if y < a + t * w - GUARD_TOL || y > b + vf * t + GUARD_TOL {
            return None;
        }
        let base = -self.init_prefix[k];
        if rho <= rho_c {
            if y >= a + vf * t - GUARD_TOL {
                Some(Branch { value: base + rho * (t * vf + a - y), density: rho })
            } else {
                Some(Branch { value: base + rho_c * (t * vf + a - y), density: rho_c })
            }
        } else if y < b + t * w - GUARD_TOL {
            Some(Branch { value: base + rho * (t * w + a - y) - rho_m * t * w, density: rho })
        } else {
            Some(Branch { value: -self.init_prefix[k + 1] + rho_c * (t * w + b - y) - rho_m * t * w, density: rho_c })
        }
    }

    /// Moskowitz solution generated by the inflow of step `n`.
    pub fn upstream_branch(&self, n: usize, t: f64, x: f64) -> Option<Branch> {
        let q = *self.vc.inflow.get(n)?;
        let fd = self.fd;
        let step = self.vc.step;
        let tau = t - (x - self.geom.xi()) / fd.vf();
        let start = n as f64 * step;
        let end = start + step;
        if tau < start - GUARD_TOL {
            return None;
        }
        if tau <= end + GUARD_TOL {
            Some(Branch { value: self.in_prefix[n] + q * (tau - start), density: q / fd.vf() })
        } else {
            Some(Branch { value: self.in_prefix[n + 1] + fd.capacity() * (tau - end), density: fd.rho_c() })
        }
    }

    /// Moskowitz solution generated by the outflow of step `n`.
    pub fn downstream_branch(&self, n: usize, t: f64, x: f64) -> Option<Branch> {
        let q = *self.vc.outflow.get(n)?;
        let fd = self.fd;
        let step = self.vc.step;
        let z = x - self.geom.chi();
        let tau = t - z / fd.w();
        let start = n as f64 * step;
        let end = start + step;
        if tau < start - GUARD_TOL {
            return None;
        }
        let base = -self.initial_vehicles();
        if tau < end - GUARD_TOL {
            Some(Branch {
                value: base + self.out_prefix[n] + q * (tau - start) - fd.rho_m() * z,
                density: fd.rho_m() + q / fd.w(),
            })
        } else {
            Some(Branch {
                value: base + self.out_prefix[n + 1] + fd.capacity() * (t - end) - fd.rho_c() * z,
                density: fd.rho_c(),
            })
        }
    }

    pub fn branch(&self, c: Component, t: f64, x: f64) -> Option<Branch> {
        match c {
            Component::Initial(k) => self.initial_branch(k, t, x),
            Component::Upstream(n) => self.upstream_branch(n, t, x),
            Component::Downstream(n) => self.downstream_branch(n, t, x),
        }
    }

    pub fn component(&self, c: Component, t: f64, x: f64) -> Moskowitz {
        self.branch(c, t, x).into()
    }

    /// All components present in the value conditions.
    pub fn components(&self) -> impl Iterator<Item = Component> + '_ {
        (0..self.geom.segments())
            .map(Component::Initial)
            .chain((0..self.vc.inflow.len()).map(Component::Upstream))
            .chain((0..self.vc.outflow.len()).map(Component::Downstream))
    }

    /// Pointwise minimum over all components (inf-morphism).
    pub fn moskowitz(&self, t: f64, x: f64) -> Moskowitz {
        self.components().map(|c| self.component(c, t, x)).fold(Moskowitz::INFINITY, Moskowitz::min)
    }

    /// Minimum over a subset of components.
    pub fn envelope<I>(&self, comps: I, t: f64, x: f64) -> Moskowitz
    where
        I: IntoIterator<Item = Component>,
    {
        comps.into_iter().map(|c| self.component(c, t, x)).fold(Moskowitz::INFINITY, Moskowitz::min)
    }

    /// `-dM/dx` at `(t, x)` from the minimizing component. At kinks the
    /// branch that is minimal just downstream of `x` wins.
    pub fn density(&self, t: f64, x: f64) -> Option<f64> {
        let h = 1e-6 * self.geom.length();
        // At chi there is no downstream side; fall back to the upstream one.
        let right = x + h <= self.geom.chi();
        let probe = if right { x + h } else { x - h };
        let branches: Vec<Branch> = self.components().filter_map(|c| self.branch(c, t, probe)).collect();
        let min = branches.iter().map(|b| b.value).fold(f64::INFINITY, f64::min);
        if !min.is_finite() {
            return None;
        }
        let tol = 1e-9 * (1.0 + min.abs());
        branches
            .iter()
            .filter(|b| b.value <= min + tol)
            .map(|b| b.density)
            .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| if right { a.max(d) } else { a.min(d) })))
            .map(|d| d.clamp(0.0, self.fd.rho_m()))
    }

    /// Times at which component `c`, seen at fixed `x`, changes branch or
    /// enters its domain.
    pub fn breakpoints(&self, c: Component, x: f64) -> Vec<f64> {
        let fd = self.fd;
        let step = self.vc.step;
        match c {
            Component::Initial(k) => {
                let seg = self.geom.segment_length();
                let y = x - self.geom.xi();
                let a = k as f64 * seg;
                let b = a + seg;
                vec![(y - a) / fd.vf(), (y - b) / fd.vf(), (y - a) / fd.w(), (y - b) / fd.w()]
            }
            Component::Upstream(n) => {
                let lag = (x - self.geom.xi()) / fd.vf();
                vec![n as f64 * step + lag, (n + 1) as f64 * step + lag]
            }
            Component::Downstream(n) => {
                let lag = (x - self.geom.chi()) / fd.w();
                vec![n as f64 * step + lag, (n + 1) as f64 * step + lag]
            }
        }
        .into_iter()
        .filter(|t| *t >= 0.0)
        .collect()
    }

    /// Largest constant flow over `[t0, t1]` keeping the boundary count at `x`
    /// (starting from `count0` at `t0`) below the envelope of `comps`.
    pub fn max_boundary_flow(&self, comps: &[Component], x: f64, t0: f64, t1: f64, count0: f64) -> f64 {
        let span = t1 - t0;
        let min_gap = 1e-6 * span;
        let mut candidates = vec![t1];
        for &c in comps {
            candidates.extend(self.breakpoints(c, x).into_iter().filter(|&t| t > t0 + min_gap && t < t1));
        }
        let mut best = f64::INFINITY;
        for t in candidates {
            let env = self.envelope(comps.iter().copied(), t, x);
            if let Some(v) = env.get() {
                best = best.min((v - count0) / (t - t0));
            }
        }
        best.clamp(0.0, self.fd.capacity())
    }

    /// Maximum outflow of step `n` assuming infinite downstream supply.
    pub fn sending_flow(&self, n: usize) -> f64 {
        let comps: Vec<Component> = (0..self.geom.segments())
            .map(Component::Initial)
            .chain((0..self.vc.inflow.len()).map(Component::Upstream))
            .collect();
        let t0 = n as f64 * self.vc.step;
        let count0 = self.cumulative_outflow(n) - self.initial_vehicles();
        self.max_boundary_flow(&comps, self.geom.chi(), t0, t0 + self.vc.step, count0)
    }

    /// Maximum inflow of step `n` assuming infinite upstream demand.
    pub fn receiving_flow(&self, n: usize) -> f64 {
        let comps: Vec<Component> = (0..self.geom.segments())
            .map(Component::Initial)
            .chain((0..self.vc.outflow.len()).map(Component::Downstream))
            .collect();
        let t0 = n as f64 * self.vc.step;
        let count0 = self.cumulative_inflow(n);
        self.max_boundary_flow(&comps, self.geom.xi(), t0, t0 + self.vc.step, count0)
    }

    /// Average density over each segment at time `t`, from exact count
    /// differences at the segment ends.
    pub fn segment_densities(&self, t: f64) -> Vec<f64> {
        let seg = self.geom.segment_length();
        let counts: Vec<f64> =
            (0..=self.geom.segments()).map(|k| self.moskowitz(t, self.geom.segment_start(k)).value()).collect();
        counts.windows(2).map(|w| ((w[0] - w[1]) / seg).clamp(0.0, self.fd.rho_m())).collect()
    }
}

/// Clips requested boundary flows step by step to the link's receiving and
/// sending flows, which yields value conditions that are compatible by
/// construction. Requires the link to be at least one step long in both
/// wave directions so a step's own flows cannot reach the opposite end.
pub fn realize_boundary_flows(
    fd: &TriangularFd,
    geom: &LinkGeometry,
    initial_density: Vec<f64>,
    requested_in: &[f64],
    requested_out: &[f64],
    step: f64,
) -> ValueConditions {
    assert_eq!(requested_in.len(), requested_out.len());
    let mut vc = ValueConditions::new(initial_density, Vec::new(), Vec::new(), step);
    for n in 0..requested_in.len() {
        let (supply, demand) = {
            let lh = LaxHopf::new(fd, geom, &vc);
            (lh.receiving_flow(n), lh.sending_flow(n))
        };
        vc.inflow.push(requested_in[n].clamp(0.0, supply));
        vc.outflow.push(requested_out[n].clamp(0.0, demand));
    }
    vc
}

fn boundary_condition(flows: &[f64], prefix: &[f64], step: f64, t: f64) -> f64 {
    if flows.is_empty() {
        return 0.0;
    }
    let n = ((t / step).floor() as usize).min(flows.len() - 1);
    prefix[n] + flows[n] * (t - n as f64 * step)
}

pub fn m_initial(vc: &ValueConditions, fd: &TriangularFd, geom: &LinkGeometry, k: usize, t: f64, x: f64) -> Moskowitz {
    LaxHopf::new(fd, geom, vc).component(Component::Initial(k), t, x)
}

pub fn m_upstream(vc: &ValueConditions, fd: &TriangularFd, geom: &LinkGeometry, n: usize, t: f64, x: f64) -> Moskowitz {
    LaxHopf::new(fd, geom, vc).component(Component::Upstream(n), t, x)
}

pub fn m_downstream(
    vc: &ValueConditions,
    fd: &TriangularFd,
    geom: &LinkGeometry,
    n: usize,
    t: f64,
    x: f64,
) -> Moskowitz {
    LaxHopf::new(fd, geom, vc).component(Component::Downstream(n), t, x)
}

pub fn moskowitz(vc: &ValueConditions, fd: &TriangularFd, geom: &LinkGeometry, t: f64, x: f64) -> Moskowitz {
    LaxHopf::new(fd, geom, vc).moskowitz(t, x)
}

pub fn density_profile(
    vc: &ValueConditions,
    fd: &TriangularFd,
    geom: &LinkGeometry,
    t: f64,
    positions: &[f64],
) -> Vec<f64> {
    let lh = LaxHopf::new(fd, geom, vc);
    positions.iter().map(|&x| lh.density(t, x).unwrap_or(0.0)).collect()
}

/// First-order finite-volume solution on a uniform grid.
#[derive(Debug, Clone)]
pub struct GodunovField {
    pub dx: f64,
    pub dt: f64,
    pub xi: f64,
    /// `density[level][cell]`, level 0 is `t = 0`.
    pub density: Vec<Vec<f64>>,
    /// Cumulative vehicles that entered at `xi` by each level.
    pub cumulative_in: Vec<f64>,
    pub cumulative_out: Vec<f64>,
}

impl GodunovField {
    pub fn time(&self, level: usize) -> f64 {
        level as f64 * self.dt
    }

    pub fn cell_center(&self, cell: usize) -> f64 {
        self.xi + (cell as f64 + 0.5) * self.dx
    }

    /// Cumulative count at cell boundary `edge` (0 = `xi`) on `level`,
    /// labelled like the Moskowitz function.
    pub fn cumulative_count(&self, level: usize, edge: usize) -> f64 {
        self.cumulative_in[level] - self.density[level][..edge].iter().sum::<f64>() * self.dx
    }
}

/// Cell-transmission discretisation of the link with the boundary flows of
/// `vc` treated as requested flows (clipped by supply at `xi` and by demand at
/// `chi`). `dx` is rounded so the link holds an integer number of cells.
pub fn godunov_oracle(
    vc: &ValueConditions,
    fd: &TriangularFd,
    geom: &LinkGeometry,
    dt: f64,
    dx: f64,
) -> Result<GodunovField, LwrError> {
    vc.validate(fd, geom)?;
    let cells = (geom.length() / dx).round().max(1.0) as usize;
    let dx = geom.length() / cells as f64;
    let limit = dx / fd.vf().max(-fd.w());
    if dt > limit * (1.0 + 1e-12) {
        return Err(LwrError::Cfl { dt, limit });
    }
    let horizon = vc.step * vc.inflow.len().max(vc.outflow.len()) as f64;
    let levels = (horizon / dt).round() as usize;

    let mut rho: Vec<f64> = (0..cells)
        .map(|i| {
            let center = (i as f64 + 0.5) * dx;
            let k = ((center / geom.segment_length()) as usize).min(geom.segments() - 1);
            vc.initial_density[k]
        })
        .collect();
    let mut field = GodunovField {
        dx,
        dt,
        xi: geom.xi(),
        density: vec![rho.clone()],
        cumulative_in: vec![0.0],
        cumulative_out: vec![0.0],
    };
    let mut flux = vec![0.0; cells + 1];
    for level in 0..levels {
        let mid = (level as f64 + 0.5) * dt;
        let n = (mid / vc.step) as usize;
        let q_in = vc.inflow.get(n).copied().unwrap_or(0.0);
        let q_out = vc.outflow.get(n).copied().unwrap_or(0.0);
        flux[0] = q_in.min(fd.receiving(rho[0]));
        for i in 1..cells {
            flux[i] = fd.sending(rho[i - 1]).min(fd.receiving(rho[i]));
        }
        flux[cells] = q_out.min(fd.sending(rho[cells - 1]));
        for i in 0..cells {
            rho[i] = (rho[i] + dt / dx * (flux[i] - flux[i + 1])).clamp(0.0, fd.rho_m());
        }
        let cin = field.cumulative_in[level] + flux[0] * dt;
        let cout = field.cumulative_out[level] + flux[cells] * dt;
        field.cumulative_in.push(cin);
        field.cumulative_out.push(cout);
        field.density.push(rho.clone());
    }
    Ok(field)
}
