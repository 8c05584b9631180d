//! Mixed-integer linear programs with binary variables: model container,
//! LP relaxation, branch-and-bound and plain-text interchange formats.
//!
//! Every model is a maximization. Variables are numbered densely from zero
//! and exported as `x<id>` (continuous) or `b<id>` (binary).
//!
//! ```
//! use stochvsl::milp::{branch_and_bound, LinearProgram, Sense, SolveOptions, SolveStatus};
//!
//! let mut lp = LinearProgram::new();
//! let x = lp.add_continuous("x", 0.0, 10.0);
//! let b = lp.add_binary("open");
//! lp.add_constraint("link", &[(x, 1.0), (b, -4.0)], Sense::Le, 0.5);
//! lp.set_objective(x, 1.0);
//! lp.set_objective(b, -1.0);
//!
//! let sol = branch_and_bound(&lp, &SolveOptions::default()).unwrap();
//! assert_eq!(sol.status, SolveStatus::Optimal);
//! assert!((sol.objective - 3.5).abs() < 1e-9);
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;
use std::time::{Duration, Instant};

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MilpError {
    #[error("constraint {row} references unknown variable {var}")]
    UnknownVariable { row: usize, var: usize },
    #[error("variable {var}: invalid bounds [{lower}, {upper}]")]
    InvalidBounds { var: usize, lower: f64, upper: f64 },
    #[error("non-finite coefficient in {0}")]
    NonFinite(String),
    #[error("numerical failure in the simplex solver: {0}")]
    Numerical(String),
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(pub usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub kind: VarKind,
    pub lower: f64,
    pub upper: f64,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Le,
    Ge,
    Eq,
}

impl Sense {
    fn symbol(self) -> &'static str {
        match self {
            Sense::Le => "<=",
            Sense::Ge => ">=",
            Sense::Eq => "=",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub terms: Vec<(VarId, f64)>,
    pub sense: Sense,
    pub rhs: f64,
    pub label: String,
}

impl Constraint {
    pub fn activity(&self, values: &[f64]) -> f64 {
        self.terms.iter().map(|(v, c)| c * values[v.0]).sum()
    }

    /// Amount by which `values` violate this row (0 when satisfied).
    pub fn violation(&self, values: &[f64]) -> f64 {
        let a = self.activity(values);
        match self.sense {
            Sense::Le => (a - self.rhs).max(0.0),
            Sense::Ge => (self.rhs - a).max(0.0),
            Sense::Eq => (a - self.rhs).abs(),
        }
    }
}

/// A maximization problem over continuous and binary variables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinearProgram {
    variables: Vec<Variable>,
    constraints: Vec<Constraint>,
    objective: Vec<f64>,
    objective_constant: f64,
}

impl LinearProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_continuous(&mut self, label: impl Into<String>, lower: f64, upper: f64) -> VarId {
        self.push_var(VarKind::Continuous, lower, upper, label.into())
    }

    pub fn add_binary(&mut self, label: impl Into<String>) -> VarId {
        self.push_var(VarKind::Binary, 0.0, 1.0, label.into())
    }

    fn push_var(&mut self, kind: VarKind, lower: f64, upper: f64, label: String) -> VarId {
        self.variables.push(Variable { kind, lower, upper, label });
        self.objective.push(0.0);
        VarId(self.variables.len() - 1)
    }

    /// Adds a row. Repeated variables are merged and zero coefficients dropped.
    pub fn add_constraint(
        &mut self,
        label: impl Into<String>,
        terms: &[(VarId, f64)],
        sense: Sense,
        rhs: f64,
    ) -> usize {
        let mut merged: BTreeMap<VarId, f64> = BTreeMap::new();
        for &(v, c) in terms {
            *merged.entry(v).or_insert(0.0) += c;
        }
        let terms = merged.into_iter().filter(|(_, c)| *c != 0.0).collect();
        self.constraints.push(Constraint { terms, sense, rhs, label: label.into() });
        self.constraints.len() - 1
    }

    pub fn set_objective(&mut self, var: VarId, coefficient: f64) {
        self.objective[var.0] = coefficient;
    }

    pub fn add_objective(&mut self, var: VarId, coefficient: f64) {
        self.objective[var.0] += coefficient;
    }

    pub fn set_objective_constant(&mut self, c: f64) {
        self.objective_constant = c;
    }

    pub fn objective_constant(&self) -> f64 {
        self.objective_constant
    }

    pub fn set_bounds(&mut self, var: VarId, lower: f64, upper: f64) {
        let v = &mut self.variables[var.0];
        v.lower = lower;
        v.upper = upper;
    }

    /// Pins a variable to a value through its bounds.
    pub fn fix(&mut self, var: VarId, value: f64) {
        self.set_bounds(var, value, value);
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn variable(&self, var: VarId) -> &Variable {
        &self.variables[var.0]
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn objective(&self) -> &[f64] {
        &self.objective
    }

    pub fn num_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn binaries(&self) -> impl Iterator<Item = VarId> + '_ {
        self.variables.iter().enumerate().filter(|(_, v)| v.kind == VarKind::Binary).map(|(i, _)| VarId(i))
    }

    pub fn num_binaries(&self) -> usize {
        self.binaries().count()
    }

    pub fn evaluate_objective(&self, values: &[f64]) -> f64 {
        self.objective_constant + self.objective.iter().zip(values).map(|(c, x)| c * x).sum::<f64>()
    }

    /// Largest bound, row or integrality violation of `values`, with the
    /// offending row index when it is a row.
    pub fn max_violation(&self, values: &[f64]) -> (f64, Option<usize>) {
        let mut worst = (0.0, None);
        for (i, v) in self.variables.iter().enumerate() {
            let x = values[i];
            let mut e = (v.lower - x).max(x - v.upper).max(0.0);
            if v.kind == VarKind::Binary {
                e = e.max((x - x.round()).abs());
            }
            if e > worst.0 {
                worst = (e, None);
            }
        }
        for (r, c) in self.constraints.iter().enumerate() {
            let e = c.violation(values);
            if e > worst.0 {
                worst = (e, Some(r));
            }
        }
        worst
    }

    /// Structural checks: known variable ids, finite coefficients, sane bounds.
    pub fn validate(&self) -> Result<(), MilpError> {
        for (i, v) in self.variables.iter().enumerate() {
            let bad = v.lower.is_nan()
                || v.upper.is_nan()
                || v.lower > v.upper
                || v.lower == f64::INFINITY
                || v.upper == f64::NEG_INFINITY
                || (v.kind == VarKind::Binary && (v.lower < 0.0 || v.upper > 1.0));
            if bad {
                return Err(MilpError::InvalidBounds { var: i, lower: v.lower, upper: v.upper });
            }
        }
        for (r, c) in self.constraints.iter().enumerate() {
            if !c.rhs.is_finite() {
                return Err(MilpError::NonFinite(format!("rhs of row {r}")));
            }
            for &(v, a) in &c.terms {
                if v.0 >= self.variables.len() {
                    return Err(MilpError::UnknownVariable { row: r, var: v.0 });
                }
                if !a.is_finite() {
                    return Err(MilpError::NonFinite(format!("row {r}")));
                }
            }
        }
        if let Some(i) = self.objective.iter().position(|c| !c.is_finite()) {
            return Err(MilpError::NonFinite(format!("objective coefficient {i}")));
        }
        Ok(())
    }

    /// Exported name of a variable.
    pub fn var_name(&self, var: VarId) -> String {
        match self.variables[var.0].kind {
            VarKind::Continuous => format!("x{}", var.0),
            VarKind::Binary => format!("b{}", var.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub feasibility_tol: f64,
    pub integrality_tol: f64,
    /// Relative gap `(bound - incumbent) / max(1, |incumbent|)` at which a
    /// node is pruned.
    pub relative_gap: f64,
    pub node_limit: Option<usize>,
    pub time_limit: Option<Duration>,
    /// Binary values tried first as an incumbent (for example the previous
    /// horizon's speed selection).
    pub hint: Vec<(VarId, f64)>,
    /// Branching priorities; fractional binaries of a higher class are
    /// branched on first. Unlisted binaries have priority 0.
    pub priority: Vec<(VarId, u32)>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            feasibility_tol: 1e-6,
            integrality_tol: 1e-6,
            relative_gap: 1e-4,
            node_limit: None,
            time_limit: None,
            hint: Vec::new(),
            priority: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    GapLimit,
    Infeasible,
    Unbounded,
    NodeLimit,
    TimeLimit,
}

impl SolveStatus {
    /// Whether `values` hold a feasible assignment.
    pub fn has_solution(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::GapLimit)
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    /// Empty when no feasible point is known.
    pub values: Vec<f64>,
    pub objective: f64,
    /// Proven upper bound on the optimum.
    pub bound: f64,
    /// Value of the root relaxation.
    pub root_bound: f64,
    pub status: SolveStatus,
    pub nodes: usize,
}

impl Solution {
    fn without_point(status: SolveStatus, bound: f64, nodes: usize) -> Self {
        Self { values: Vec::new(), objective: f64::NEG_INFINITY, bound, root_bound: bound, status, nodes }
    }

    pub fn value(&self, var: VarId) -> f64 {
        self.values[var.0]
    }
}

fn build_problem(lp: &LinearProgram, fixings: &[(usize, f64)]) -> (Problem, Vec<microlp::Variable>) {
    let mut p = Problem::new(OptimizationDirection::Maximize);
    let mut bounds: Vec<(f64, f64)> = lp.variables.iter().map(|v| (v.lower, v.upper)).collect();
    for &(i, val) in fixings {
        bounds[i] = (val, val);
    }
    let vars: Vec<_> = bounds.iter().zip(&lp.objective).map(|(&b, &c)| p.add_var(c, b)).collect();
    for c in &lp.constraints {
        let expr: Vec<_> = c.terms.iter().map(|(v, a)| (vars[v.0], *a)).collect();
        let op = match c.sense {
            Sense::Le => ComparisonOp::Le,
            Sense::Ge => ComparisonOp::Ge,
            Sense::Eq => ComparisonOp::Eq,
        };
        p.add_constraint(expr.as_slice(), op, c.rhs);
    }
    (p, vars)
}

enum LpOutcome {
    Solved(microlp::Solution),
    Infeasible,
    Unbounded,
}

fn lp_outcome(r: Result<microlp::SolveOutcome, microlp::Error>) -> Result<LpOutcome, MilpError> {
    match r {
        Ok(outcome) => match outcome.into_solution() {
            Ok(s) => Ok(LpOutcome::Solved(s)),
            Err(i) => Err(MilpError::Numerical(format!("interrupted: {i:?}"))),
        },
        Err(microlp::Error::Infeasible) => Ok(LpOutcome::Infeasible),
        Err(microlp::Error::Unbounded) => Ok(LpOutcome::Unbounded),
        Err(e) => Err(MilpError::Numerical(e.to_string())),
    }
}

fn extract(lp: &LinearProgram, vars: &[microlp::Variable], s: &microlp::Solution) -> Vec<f64> {
    vars.iter()
        .enumerate()
        .map(|(i, v)| {
            let x = s.var_value_raw(*v);
            let var = &lp.variables[i];
            x.clamp(var.lower, var.upper)
        })
        .collect()
}

/// Solves the continuous relaxation (binaries relaxed to their bounds in `[0, 1]`).
pub fn solve_lp_relaxation(lp: &LinearProgram) -> Result<Solution, MilpError> {
    lp.validate()?;
    let (p, vars) = build_problem(lp, &[]);
    Ok(match lp_outcome(p.solve())? {
        LpOutcome::Solved(s) => {
            let values = extract(lp, &vars, &s);
            let objective = lp.evaluate_objective(&values);
            Solution {
                values,
                objective,
                bound: objective,
                root_bound: objective,
                status: SolveStatus::Optimal,
                nodes: 1,
            }
        }
        LpOutcome::Infeasible => Solution::without_point(SolveStatus::Infeasible, f64::NEG_INFINITY, 1),
        LpOutcome::Unbounded => Solution::without_point(SolveStatus::Unbounded, f64::INFINITY, 1),
    })
}

/// Open nodes allowed to keep their parent's simplex state for a warm
/// start; the rest are re-solved from scratch when popped.
const WARM_NODES: usize = 600;

struct Node {
    /// Relaxation value of the parent, an upper bound for this node.
    bound: f64,
    parent: Option<Rc<microlp::Solution>>,
    fixings: Vec<(usize, f64)>,
    seq: usize,
}

struct Search<'a> {
    lp: &'a LinearProgram,
    opts: &'a SolveOptions,
    vars: Vec<microlp::Variable>,
    priority: Vec<u32>,
    incumbent: Option<(f64, Vec<f64>)>,
    /// Largest bound among nodes discarded only because of the gap tolerance.
    gap_pruned: f64,
    nodes: usize,
    seq: usize,
}

impl Search<'_> {
    fn prune_margin(&self, inc: f64) -> f64 {
        self.opts.relative_gap * inc.abs().max(1.0)
    }

    /// True when a node with this bound cannot improve the incumbent enough.
    fn prunable(&mut self, bound: f64) -> bool {
        let Some((inc, _)) = &self.incumbent else { return false };
        let inc = *inc;
        if bound <= inc + 1e-9 * inc.abs().max(1.0) {
            return true;
        }
        if bound <= inc + self.prune_margin(inc) {
            self.gap_pruned = self.gap_pruned.max(bound);
            return true;
        }
        false
    }

    /// Re-solves a node: warm start from the parent, falling back to a cold
    /// solve with all fixings applied as bounds.
    fn evaluate(&mut self, node: &Node) -> Result<LpOutcome, MilpError> {
        self.nodes += 1;
        let &(var, val) = node.fixings.last().expect("child nodes carry a fixing");
        let Some(parent) = &node.parent else {
            let (p, _) = build_problem(self.lp, &node.fixings);
            return lp_outcome(p.solve());
        };
        let warm = (**parent).clone().fix_var(self.vars[var], val);
        match lp_outcome(warm) {
            Ok(o) => Ok(o),
            Err(e) => {
                log::debug!("warm re-solve failed ({e}); solving node from scratch");
                let (p, _) = build_problem(self.lp, &node.fixings);
                lp_outcome(p.solve())
            }
        }
    }

    /// Most fractional free binary of the highest priority class, ties to
    /// the lowest id.
    fn branching_variable(&self, values: &[f64], fixings: &[(usize, f64)]) -> Option<(usize, f64)> {
        let mut best: Option<(usize, u32, f64)> = None;
        for v in self.lp.binaries() {
            let x = values[v.0];
            let frac = (x - x.floor()).min(x.ceil() - x);
            if frac <= self.opts.integrality_tol || fixings.iter().any(|f| f.0 == v.0) {
                continue;
            }
            let prio = self.priority[v.0];
            let better = match best {
                None => true,
                Some((_, p, f)) => prio > p || (prio == p && frac > f + 1e-12),
            };
            if better {
                best = Some((v.0, prio, frac));
            }
        }
        best.map(|(i, _, _)| (i, values[i]))
    }

    /// Rounds binaries and certifies the point; polishes the continuous part
    /// with all binaries fixed when rounding leaves a residual violation.
    fn accept(&mut self, mut values: Vec<f64>) -> Result<bool, MilpError> {
        let bins: Vec<VarId> = self.lp.binaries().collect();
        for v in &bins {
            values[v.0] = values[v.0].round();
        }
        if self.lp.max_violation(&values).0 > self.opts.feasibility_tol {
            let fixings: Vec<(usize, f64)> = bins.iter().map(|v| (v.0, values[v.0])).collect();
            let (p, vars) = build_problem(self.lp, &fixings);
            match lp_outcome(p.solve())? {
                LpOutcome::Solved(s) => values = extract(self.lp, &vars, &s),
                _ => return Ok(false),
            }
            let (err, row) = self.lp.max_violation(&values);
            if err > self.opts.feasibility_tol {
                log::warn!("discarding integer point violating row {row:?} by {err:e}");
                return Ok(false);
            }
        }
        let obj = self.lp.evaluate_objective(&values);
        if self.incumbent.as_ref().map_or(true, |(inc, _)| obj > *inc) {
            self.incumbent = Some((obj, values));
            return Ok(true);
        }
        Ok(false)
    }

    /// Fixes the hinted binaries and dives by rounding until an integer
    /// point or infeasibility.
    fn try_hint(&mut self, root: &microlp::Solution) -> Result<(), MilpError> {
        let mut sol = root.clone();
        let mut fixings: Vec<(usize, f64)> = Vec::new();
        for &(v, val) in &self.opts.hint {
            match lp_outcome(sol.fix_var(self.vars[v.0], val))? {
                LpOutcome::Solved(s) => sol = s,
                _ => return Ok(()),
            }
            fixings.push((v.0, val));
        }
        loop {
            let values = extract(self.lp, &self.vars, &sol);
            match self.branching_variable(&values, &fixings) {
                None => {
                    self.accept(values)?;
                    return Ok(());
                }
                Some((v, x)) => {
                    let val = x.round();
                    fixings.push((v, val));
                    match lp_outcome(sol.fix_var(self.vars[v], val))? {
                        LpOutcome::Solved(s) => sol = s,
                        _ => return Ok(()),
                    }
                }
            }
        }
    }
}

/// Branch-and-bound over the binaries of `lp`.
///
/// Branches on the most fractional binary (ties to the lowest id), dives
/// depth-first into the child nearest the relaxation value and restarts
/// from the best-bound open node whenever a dive ends.
pub fn branch_and_bound(lp: &LinearProgram, opts: &SolveOptions) -> Result<Solution, MilpError> {
    lp.validate()?;
    let start = Instant::now();
    let (p, vars) = build_problem(lp, &[]);
    let root = match lp_outcome(p.solve())? {
        LpOutcome::Solved(s) => s,
        LpOutcome::Infeasible => return Ok(Solution::without_point(SolveStatus::Infeasible, f64::NEG_INFINITY, 1)),
        LpOutcome::Unbounded => return Ok(Solution::without_point(SolveStatus::Unbounded, f64::INFINITY, 1)),
    };
    let root_values = extract(lp, &vars, &root);
    let root_bound = lp.evaluate_objective(&root_values);
    let mut priority = vec![0; lp.num_variables()];
    for &(v, p) in &opts.priority {
        if let Some(slot) = priority.get_mut(v.0) {
            *slot = p;
        }
    }
    let mut search =
        Search { lp, opts, vars, priority, incumbent: None, gap_pruned: f64::NEG_INFINITY, nodes: 1, seq: 0 };
    if !opts.hint.is_empty() {
        search.try_hint(&root)?;
    }

    let mut open: Vec<Node> = Vec::new();
    let mut current: Option<(Rc<microlp::Solution>, Vec<f64>, Vec<(usize, f64)>, f64)> =
        Some((Rc::new(root), root_values, Vec::new(), root_bound));
    let mut limit: Option<SolveStatus> = None;
    let mut next_report = 0;

    loop {
        if let Some((sol, values, fixings, bound)) = current.take() {
            if search.prunable(bound) {
                continue;
            }
            match search.branching_variable(&values, &fixings) {
                None => {
                    search.accept(values)?;
                }
                Some((v, x)) => {
                    let first =
                        opts.hint.iter().find(|h| h.0 .0 == v).map_or(if x >= 0.5 { 1.0 } else { 0.0 }, |h| h.1);
                    let mut children = Vec::with_capacity(2);
                    for val in [first, 1.0 - first] {
                        let mut f = fixings.clone();
                        f.push((v, val));
                        search.seq += 1;
                        children.push(Node { bound, parent: Some(Rc::clone(&sol)), fixings: f, seq: search.seq });
                    }
                    let dive = children.remove(0);
                    open.extend(children);
                    shed_warm_starts(&mut open);
                    current = search.dive_into(dive)?;
                }
            }
            continue;
        }
        if let Some(n) = opts.node_limit {
            if search.nodes >= n {
                limit = Some(SolveStatus::NodeLimit);
                break;
            }
        }
        if let Some(t) = opts.time_limit {
            if start.elapsed() >= t {
                limit = Some(SolveStatus::TimeLimit);
                break;
            }
        }
        // Best-bound restart, ties to the oldest node.
        open.retain(|n| !search.prunable_quiet(n.bound));
        if log::log_enabled!(log::Level::Trace) && search.nodes >= next_report {
            next_report = search.nodes + 1000;
            let best = open.iter().map(|n| n.bound).fold(f64::NEG_INFINITY, f64::max);
            log::trace!(
                "{} nodes, {} open, incumbent {:?}, best open bound {best}",
                search.nodes,
                open.len(),
                search.incumbent.as_ref().map(|i| i.0)
            );
        }
        let Some(idx) = (0..open.len())
            .max_by(|&a, &b| open[a].bound.total_cmp(&open[b].bound).then(open[b].seq.cmp(&open[a].seq)))
        else {
            break;
        };
        let node = open.swap_remove(idx);
        if search.prunable(node.bound) {
            continue;
        }
        current = search.dive_into(node)?;
    }

    let open_bound = open.iter().map(|n| n.bound).fold(f64::NEG_INFINITY, f64::max);
    let nodes = search.nodes;
    let margin = search.incumbent.as_ref().map_or(0.0, |(inc, _)| search.prune_margin(*inc));
    match search.incumbent {
        None => {
            let status = limit.unwrap_or(SolveStatus::Infeasible);
            let bound = if limit.is_some() { root_bound } else { f64::NEG_INFINITY };
            Ok(Solution { root_bound, ..Solution::without_point(status, bound, nodes) })
        }
        Some((objective, values)) => {
            let bound = objective.max(search.gap_pruned).max(open_bound);
            let status = match limit {
                Some(l) if open_bound > objective + margin => l,
                _ if bound > objective + 1e-9 * objective.abs().max(1.0) => SolveStatus::GapLimit,
                _ => SolveStatus::Optimal,
            };
            Ok(Solution { values, objective, bound, root_bound, status, nodes })
        }
    }
}

/// Drops the simplex state of the weakest open nodes beyond `WARM_NODES`.
fn shed_warm_starts(open: &mut [Node]) {
    let warm = open.iter().filter(|n| n.parent.is_some()).count();
    if warm <= WARM_NODES {
        return;
    }
    let mut idx: Vec<usize> = (0..open.len()).filter(|&i| open[i].parent.is_some()).collect();
    // Restarts take the best bound, ties to the oldest; shed the opposite end.
    idx.sort_by(|&a, &b| open[a].bound.total_cmp(&open[b].bound).then(open[b].seq.cmp(&open[a].seq)));
    for &i in idx.iter().take(warm - WARM_NODES) {
        open[i].parent = None;
    }
}

impl Search<'_> {
    fn prunable_quiet(&self, bound: f64) -> bool {
        match &self.incumbent {
            Some((inc, _)) => bound <= inc + 1e-9 * inc.abs().max(1.0),
            None => false,
        }
    }

    #[allow(clippy::type_complexity)]
    fn dive_into(
        &mut self,
        node: Node,
    ) -> Result<Option<(Rc<microlp::Solution>, Vec<f64>, Vec<(usize, f64)>, f64)>, MilpError> {
        Ok(match self.evaluate(&node)? {
            LpOutcome::Solved(s) => {
                let values = extract(self.lp, &self.vars, &s);
                let bound = self.lp.evaluate_objective(&values).min(node.bound);
                Some((Rc::new(s), values, node.fixings, bound))
            }
            LpOutcome::Infeasible => None,
            LpOutcome::Unbounded => return Err(MilpError::Numerical("unbounded node below a bounded root".into())),
        })
    }
}

/// Interchange file flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelFormat {
    Lp,
    Mps,
}

impl ModelFormat {
    pub fn from_extension(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "lp" => Some(ModelFormat::Lp),
            "mps" => Some(ModelFormat::Mps),
            _ => None,
        }
    }
}

/// Formats a number with 12 significant digits, shortest form.
pub fn format_number(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if v == f64::INFINITY {
        return "+inf".into();
    }
    if v == f64::NEG_INFINITY {
        return "-inf".into();
    }
    let sci = format!("{v:.11e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        let s = format!("{:.*}", decimals, mantissa.parse::<f64>().unwrap() * 10f64.powi(exp));
        trim_zeros(&s)
    } else {
        format!("{}e{}", trim_zeros(mantissa), exp)
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

const TERMS_PER_LINE: usize = 6;

fn write_terms(out: &mut String, lp: &LinearProgram, terms: &[(VarId, f64)]) {
    if terms.is_empty() {
        out.push_str(" 0 x0");
        return;
    }
    for (i, (v, c)) in terms.iter().enumerate() {
        if i > 0 && i % TERMS_PER_LINE == 0 {
            out.push_str("\n   ");
        }
        let sign = if *c < 0.0 { '-' } else { '+' };
        if i == 0 && sign == '+' {
            let _ = write!(out, " {} {}", format_number(c.abs()), lp.var_name(*v));
        } else {
            let _ = write!(out, " {sign} {} {}", format_number(c.abs()), lp.var_name(*v));
        }
    }
}

/// Renders the model as CPLEX-style LP text.
pub fn to_lp_string(lp: &LinearProgram) -> String {
    let mut out = String::from("\\ stochvsl linear program\n");
    if lp.objective_constant != 0.0 {
        let _ = writeln!(out, "\\ objective constant {}", format_number(lp.objective_constant));
    }
    out.push_str("Maximize\n obj:");
    let obj: Vec<(VarId, f64)> =
        lp.objective.iter().enumerate().filter(|(_, c)| **c != 0.0).map(|(i, c)| (VarId(i), *c)).collect();
    write_terms(&mut out, lp, &obj);
    out.push_str("\nSubject To\n");
    for (r, c) in lp.constraints.iter().enumerate() {
        let _ = write!(out, " c{r}:");
        write_terms(&mut out, lp, &c.terms);
        let _ = writeln!(out, " {} {}", c.sense.symbol(), format_number(c.rhs));
    }
    out.push_str("Bounds\n");
    for (i, v) in lp.variables.iter().enumerate() {
        let name = lp.var_name(VarId(i));
        if v.kind == VarKind::Binary && v.lower == 0.0 && v.upper == 1.0 {
            continue;
        }
        if v.lower == v.upper {
            let _ = writeln!(out, " {name} = {}", format_number(v.lower));
        } else if v.lower == f64::NEG_INFINITY && v.upper == f64::INFINITY {
            let _ = writeln!(out, " {name} free");
        } else {
            let _ = writeln!(out, " {} <= {name} <= {}", format_number(v.lower), format_number(v.upper));
        }
    }
    let bins: Vec<String> = lp.binaries().map(|v| lp.var_name(v)).collect();
    if !bins.is_empty() {
        out.push_str("Binaries\n");
        for chunk in bins.chunks(10) {
            let _ = writeln!(out, " {}", chunk.join(" "));
        }
    }
    out.push_str("End\n");
    out
}

/// Renders the model as free-format MPS text.
pub fn to_mps_string(lp: &LinearProgram) -> String {
    let mut out = String::from("NAME stochvsl\nOBJSENSE\n    MAX\nROWS\n N obj\n");
    for (r, c) in lp.constraints.iter().enumerate() {
        let t = match c.sense {
            Sense::Le => 'L',
            Sense::Ge => 'G',
            Sense::Eq => 'E',
        };
        let _ = writeln!(out, " {t} c{r}");
    }
    let mut columns: Vec<Vec<(usize, f64)>> = vec![Vec::new(); lp.variables.len()];
    for (r, c) in lp.constraints.iter().enumerate() {
        for &(v, a) in &c.terms {
            columns[v.0].push((r, a));
        }
    }
    out.push_str("COLUMNS\n");
    let mut in_int = false;
    for (i, col) in columns.iter().enumerate() {
        let binary = lp.variables[i].kind == VarKind::Binary;
        if binary != in_int {
            let tag = if binary { "INTORG" } else { "INTEND" };
            let _ = writeln!(out, "    MARKER 'MARKER' '{tag}'");
            in_int = binary;
        }
        let name = lp.var_name(VarId(i));
        if lp.objective[i] != 0.0 || col.is_empty() {
            let _ = writeln!(out, "    {name} obj {}", format_number(lp.objective[i]));
        }
        for &(r, a) in col {
            let _ = writeln!(out, "    {name} c{r} {}", format_number(a));
        }
    }
    if in_int {
        out.push_str("    MARKER 'MARKER' 'INTEND'\n");
    }
    out.push_str("RHS\n");
    if lp.objective_constant != 0.0 {
        let _ = writeln!(out, "    RHS obj {}", format_number(-lp.objective_constant));
    }
    for (r, c) in lp.constraints.iter().enumerate() {
        if c.rhs != 0.0 {
            let _ = writeln!(out, "    RHS c{r} {}", format_number(c.rhs));
        }
    }
    out.push_str("BOUNDS\n");
    for (i, v) in lp.variables.iter().enumerate() {
        let name = lp.var_name(VarId(i));
        if v.kind == VarKind::Binary && v.lower == 0.0 && v.upper == 1.0 {
            let _ = writeln!(out, " BV BND {name}");
        } else if v.lower == v.upper {
            let _ = writeln!(out, " FX BND {name} {}", format_number(v.lower));
        } else if v.lower == f64::NEG_INFINITY && v.upper == f64::INFINITY {
            let _ = writeln!(out, " FR BND {name}");
        } else {
            if v.lower == f64::NEG_INFINITY {
                let _ = writeln!(out, " MI BND {name}");
            } else if v.lower != 0.0 || v.kind == VarKind::Binary {
                let _ = writeln!(out, " LO BND {name} {}", format_number(v.lower));
            }
            if v.upper != f64::INFINITY {
                let _ = writeln!(out, " UP BND {name} {}", format_number(v.upper));
            }
        }
    }
    out.push_str("ENDATA\n");
    out
}

pub fn export_model(lp: &LinearProgram, path: &Path, format: ModelFormat) -> Result<(), MilpError> {
    let text = match format {
        ModelFormat::Lp => to_lp_string(lp),
        ModelFormat::Mps => to_mps_string(lp),
    };
    std::fs::write(path, text)?;
    Ok(())
}

pub fn import_model(path: &Path, format: ModelFormat) -> Result<LinearProgram, MilpError> {
    let text = std::fs::read_to_string(path)?;
    match format {
        ModelFormat::Lp => parse_lp(&text),
        ModelFormat::Mps => parse_mps(&text),
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> MilpError {
    MilpError::Parse { line, msg: msg.into() }
}

fn parse_num(tok: &str, line: usize) -> Result<f64, MilpError> {
    match tok {
        "+inf" | "inf" | "+infinity" | "infinity" => Ok(f64::INFINITY),
        "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
        _ => tok.parse().map_err(|_| parse_err(line, format!("bad number {tok:?}"))),
    }
}

/// Parses `x<id>` / `b<id>` into an index and kind.
fn parse_name(tok: &str, line: usize) -> Result<(usize, VarKind), MilpError> {
    let kind = match tok.as_bytes().first() {
        Some(b'x') => VarKind::Continuous,
        Some(b'b') => VarKind::Binary,
        _ => return Err(parse_err(line, format!("unexpected variable name {tok:?}"))),
    };
    let id = tok[1..].parse().map_err(|_| parse_err(line, format!("bad variable name {tok:?}")))?;
    Ok((id, kind))
}

/// Incrementally collects variables met while parsing.
#[derive(Default)]
struct VarTable {
    kinds: BTreeMap<usize, VarKind>,
    bounds: BTreeMap<usize, (f64, f64)>,
}

impl VarTable {
    fn see(&mut self, id: usize, kind: VarKind, line: usize) -> Result<(), MilpError> {
        match self.kinds.insert(id, kind) {
            Some(k) if k != kind => Err(parse_err(line, format!("variable {id} used with two kinds"))),
            _ => Ok(()),
        }
    }

    fn finish(
        self,
        objective: Vec<(usize, f64)>,
        objective_constant: f64,
        rows: Vec<(Vec<(VarId, f64)>, Sense, f64)>,
    ) -> Result<LinearProgram, MilpError> {
        let n = self.kinds.keys().next_back().map_or(0, |m| m + 1);
        if self.kinds.len() != n {
            return Err(parse_err(0, "variable ids are not contiguous"));
        }
        let mut lp = LinearProgram::new();
        for (id, kind) in &self.kinds {
            let default = match kind {
                VarKind::Binary => (0.0, 1.0),
                VarKind::Continuous => (0.0, f64::INFINITY),
            };
            let (lo, hi) = self.bounds.get(id).copied().unwrap_or(default);
            lp.push_var(*kind, lo, hi, String::new());
        }
        for (v, c) in objective {
            lp.add_objective(VarId(v), c);
        }
        lp.objective_constant = objective_constant;
        for (r, (terms, sense, rhs)) in rows.into_iter().enumerate() {
            lp.add_constraint(format!("c{r}"), &terms, sense, rhs);
        }
        lp.validate()?;
        Ok(lp)
    }
}

fn parse_lp(text: &str) -> Result<LinearProgram, MilpError> {
    #[derive(PartialEq)]
    enum Section {
        Head,
        Objective,
        Rows,
        Bounds,
        Binaries,
        End,
    }
    let mut section = Section::Head;
    let mut table = VarTable::default();
    let mut objective_constant = 0.0;
    let mut objective: Vec<(usize, f64)> = Vec::new();
    // Raw rows: tokens accumulated across continuation lines.
    let mut raw_rows: Vec<(usize, Vec<String>)> = Vec::new();
    let mut obj_tokens: Vec<String> = Vec::new();

    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let trimmed = line.trim();
        if let Some(c) = trimmed.strip_prefix('\\') {
            if let Some(v) = c.trim().strip_prefix("objective constant ") {
                objective_constant = parse_num(v.trim(), ln)?;
            }
            continue;
        }
        if trimmed.is_empty() {
            continue;
        }
        match trimmed.to_ascii_lowercase().as_str() {
            "maximize" | "maximise" | "max" => {
                section = Section::Objective;
                continue;
            }
            "minimize" | "minimise" | "min" => return Err(parse_err(ln, "only maximization models are supported")),
            "subject to" | "st" | "s.t." => {
                section = Section::Rows;
                continue;
            }
            "bounds" => {
                section = Section::Bounds;
                continue;
            }
            "binaries" | "binary" => {
                section = Section::Binaries;
                continue;
            }
            "end" => {
                section = Section::End;
                continue;
            }
            _ => {}
        }
        match section {
            Section::Head | Section::End => return Err(parse_err(ln, "content outside a section")),
            Section::Objective => {
                let body = trimmed.split_once(':').map_or(trimmed, |(_, b)| b);
                obj_tokens.extend(body.split_whitespace().map(String::from));
            }
            Section::Rows => {
                if let Some((_, body)) = trimmed.split_once(':') {
                    raw_rows.push((ln, body.split_whitespace().map(String::from).collect()));
                } else {
                    let last = raw_rows.last_mut().ok_or_else(|| parse_err(ln, "continuation before any row"))?;
                    last.1.extend(trimmed.split_whitespace().map(String::from));
                }
            }
            Section::Bounds => {
                let t: Vec<&str> = trimmed.split_whitespace().collect();
                let (name, lo, hi) = match t.as_slice() {
                    [name, "free"] => (*name, f64::NEG_INFINITY, f64::INFINITY),
                    [name, "=", v] => (*name, parse_num(v, ln)?, parse_num(v, ln)?),
                    [lo, "<=", name, "<=", hi] => (*name, parse_num(lo, ln)?, parse_num(hi, ln)?),
                    _ => return Err(parse_err(ln, format!("unsupported bound {trimmed:?}"))),
                };
                let (id, kind) = parse_name(name, ln)?;
                table.see(id, kind, ln)?;
                table.bounds.insert(id, (lo, hi));
            }
            Section::Binaries => {
                for name in trimmed.split_whitespace() {
                    let (id, kind) = parse_name(name, ln)?;
                    if kind != VarKind::Binary {
                        return Err(parse_err(ln, format!("{name} listed as binary")));
                    }
                    table.see(id, kind, ln)?;
                }
            }
        }
    }
    if section != Section::End {
        return Err(parse_err(text.lines().count(), "missing End"));
    }

    let linear = |tokens: &[String], ln: usize, table: &mut VarTable| -> Result<Vec<(usize, f64)>, MilpError> {
        let mut terms = Vec::new();
        let mut sign = 1.0;
        let mut coef: Option<f64> = None;
        for tok in tokens {
            match tok.as_str() {
                "+" => sign = 1.0,
                "-" => sign = -1.0,
                t if t.starts_with(['x', 'b']) => {
                    let (id, kind) = parse_name(t, ln)?;
                    table.see(id, kind, ln)?;
                    terms.push((id, sign * coef.take().unwrap_or(1.0)));
                    sign = 1.0;
                }
                t => coef = Some(parse_num(t, ln)?),
            }
        }
        Ok(terms)
    };
    objective.extend(linear(&obj_tokens, 0, &mut table)?);
    let mut rows = Vec::with_capacity(raw_rows.len());
    for (ln, tokens) in raw_rows {
        let pos = tokens
            .iter()
            .position(|t| matches!(t.as_str(), "<=" | ">=" | "=" | "=<" | "=>"))
            .ok_or_else(|| parse_err(ln, "row without a sense"))?;
        let sense = match tokens[pos].as_str() {
            "<=" | "=<" => Sense::Le,
            ">=" | "=>" => Sense::Ge,
            _ => Sense::Eq,
        };
        let rhs = parse_num(tokens.get(pos + 1).ok_or_else(|| parse_err(ln, "missing rhs"))?, ln)?;
        let terms = linear(&tokens[..pos], ln, &mut table)?;
        rows.push((terms.into_iter().map(|(v, c)| (VarId(v), c)).collect(), sense, rhs));
    }
    table.finish(objective, objective_constant, rows)
}

fn parse_mps(text: &str) -> Result<LinearProgram, MilpError> {
    let mut section = String::new();
    let mut table = VarTable::default();
    let mut row_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut rows: Vec<(Vec<(VarId, f64)>, Sense, f64)> = Vec::new();
    let mut objective: Vec<(usize, f64)> = Vec::new();
    let mut objective_constant = 0.0;
    let mut in_int = false;
    let mut ended = false;

    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        if line.trim().is_empty() || line.starts_with('*') {
            continue;
        }
        let t: Vec<&str> = line.split_whitespace().collect();
        if !line.starts_with(' ') {
            section = t[0].to_string();
            if section == "ENDATA" {
                ended = true;
            }
            continue;
        }
        match section.as_str() {
            "OBJSENSE" => {
                if !matches!(t[0], "MAX" | "MAXIMIZE") {
                    return Err(parse_err(ln, "only maximization models are supported"));
                }
            }
            "ROWS" => {
                let sense = match t[0] {
                    "N" => continue,
                    "L" => Sense::Le,
                    "G" => Sense::Ge,
                    "E" => Sense::Eq,
                    s => return Err(parse_err(ln, format!("unknown row type {s}"))),
                };
                row_index.insert(t[1].to_string(), rows.len());
                rows.push((Vec::new(), sense, 0.0));
            }
            "COLUMNS" => {
                if t.get(1) == Some(&"'MARKER'") {
                    in_int = t.get(2) == Some(&"'INTORG'");
                    continue;
                }
                let (id, kind) = parse_name(t[0], ln)?;
                let expected = if in_int { VarKind::Binary } else { VarKind::Continuous };
                if kind != expected {
                    return Err(parse_err(ln, format!("{} outside its marker block", t[0])));
                }
                table.see(id, kind, ln)?;
                for pair in t[1..].chunks(2) {
                    let [row, val] = pair else { return Err(parse_err(ln, "dangling column entry")) };
                    let val = parse_num(val, ln)?;
                    if *row == "obj" {
                        objective.push((id, val));
                    } else {
                        let r = *row_index.get(*row).ok_or_else(|| parse_err(ln, format!("unknown row {row}")))?;
                        rows[r].0.push((VarId(id), val));
                    }
                }
            }
            "RHS" => {
                for pair in t[1..].chunks(2) {
                    let [row, val] = pair else { return Err(parse_err(ln, "dangling rhs entry")) };
                    let val = parse_num(val, ln)?;
                    if *row == "obj" {
                        objective_constant = -val;
                    } else {
                        let r = *row_index.get(*row).ok_or_else(|| parse_err(ln, format!("unknown row {row}")))?;
                        rows[r].2 = val;
                    }
                }
            }
            "BOUNDS" => {
                let (id, kind) = parse_name(t[2], ln)?;
                table.see(id, kind, ln)?;
                let default = match kind {
                    VarKind::Binary => (0.0, 1.0),
                    VarKind::Continuous => (0.0, f64::INFINITY),
                };
                let b = table.bounds.entry(id).or_insert(default);
                let val =
                    || t.get(3).ok_or_else(|| parse_err(ln, "missing bound value")).and_then(|v| parse_num(v, ln));
                match t[0] {
                    "BV" => *b = (0.0, 1.0),
                    "FX" => {
                        let v = val()?;
                        *b = (v, v);
                    }
                    "FR" => *b = (f64::NEG_INFINITY, f64::INFINITY),
                    "MI" => b.0 = f64::NEG_INFINITY,
                    "PL" => b.1 = f64::INFINITY,
                    "LO" => b.0 = val()?,
                    "UP" => b.1 = val()?,
                    s => return Err(parse_err(ln, format!("unknown bound type {s}"))),
                }
            }
            s => return Err(parse_err(ln, format!("content in unsupported section {s:?}"))),
        }
    }
    if !ended {
        return Err(parse_err(text.lines().count(), "missing ENDATA"));
    }
    table.finish(objective, objective_constant, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relaxation_of_single_bound() {
        let mut lp = LinearProgram::new();
        let x = lp.add_continuous("x", 0.0, f64::INFINITY);
        lp.add_constraint("cap", &[(x, 1.0)], Sense::Le, 2.1);
        lp.set_objective(x, 1.0);
        let s = solve_lp_relaxation(&lp).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.value(x) - 2.1).abs() < 1e-12);
    }

    #[test]
    fn infeasible_pair() {
        let mut lp = LinearProgram::new();
        let x = lp.add_continuous("x", f64::NEG_INFINITY, f64::INFINITY);
        lp.add_constraint("a", &[(x, 1.0)], Sense::Le, 0.0);
        lp.add_constraint("b", &[(x, 1.0)], Sense::Ge, 1.0);
        assert_eq!(solve_lp_relaxation(&lp).unwrap().status, SolveStatus::Infeasible);
        assert_eq!(branch_and_bound(&lp, &SolveOptions::default()).unwrap().status, SolveStatus::Infeasible);
    }

    #[test]
    fn unknown_variable_rejected() {
        let mut lp = LinearProgram::new();
        lp.add_continuous("x", 0.0, 1.0);
        lp.add_constraint("bad", &[(VarId(3), 1.0)], Sense::Le, 1.0);
        assert!(matches!(lp.validate(), Err(MilpError::UnknownVariable { var: 3, .. })));
    }

    #[test]
    fn numbers_have_twelve_significant_digits() {
        assert_eq!(format_number(2.1), "2.1");
        assert_eq!(format_number(-4.0), "-4");
        assert_eq!(format_number(1.0 / 3.0), "0.333333333333");
        assert_eq!(format_number(123456789012345.0), "1.23456789012e14");
        assert_eq!(format_number(1e-7), "1e-7");
        assert_eq!(format_number(0.07), "0.07");
    }

    #[test]
    fn duplicate_terms_are_merged() {
        let mut lp = LinearProgram::new();
        let x = lp.add_continuous("x", 0.0, 1.0);
        let y = lp.add_continuous("y", 0.0, 1.0);
        lp.add_constraint("r", &[(y, 1.0), (x, 2.0), (y, -1.0)], Sense::Le, 1.0);
        assert_eq!(lp.constraints()[0].terms, vec![(x, 2.0)]);
    }
}
