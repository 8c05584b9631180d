//! Extensive-form two-stage model over one planning window, and the
//! single-scenario deterministic baselines.
//!
//! The first stage chooses the entry metering rate `q'_in` for every step.
//! Each demand scenario gets its own copy of the link, junction and speed
//! variables; the scenario's entry inflow is the largest value allowed by
//! both the metering rate and the cumulative demand.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::link::{
    build_compatibility, build_demand_supply, build_vsl_linearization, LinkModelError, LinkVariables, MinEncoding,
};
use crate::milp::{LinearProgram, Sense, VarId};
use crate::network::{build_node_constraints, Corridor, NetworkError, RampVariables};
use crate::rolling::{apply_queue_update, init_demand_matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StochasticError {
    #[error("invalid demand distribution: {0}")]
    Distribution(String),
    #[error("invalid horizon state: {0}")]
    State(String),
    #[error(transparent)]
    Link(#[from] LinkModelError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Discrete distribution of the (horizon-constant) entry demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandDistribution {
    pub levels: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl DemandDistribution {
    pub fn new(levels: Vec<f64>, probabilities: Vec<f64>) -> Result<Self, StochasticError> {
        let d = Self { levels, probabilities };
        d.validate()?;
        Ok(d)
    }

    pub fn point(level: f64) -> Self {
        Self { levels: vec![level], probabilities: vec![1.0] }
    }

    /// `{p, 1 - 2p, p}` over `levels`.
    pub fn symmetric(levels: [f64; 3], p: f64) -> Result<Self, StochasticError> {
        Self::new(levels.to_vec(), vec![p, 1.0 - 2.0 * p, p])
    }

    pub fn validate(&self) -> Result<(), StochasticError> {
        if self.levels.is_empty() || self.levels.len() != self.probabilities.len() {
            return Err(StochasticError::Distribution(
                "levels and probabilities must be non-empty and of equal length".into(),
            ));
        }
        if self.levels.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(StochasticError::Distribution("demand levels must be finite and non-negative".into()));
        }
        if self.probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(StochasticError::Distribution("probabilities must lie in [0, 1]".into()));
        }
        let total: f64 = self.probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(StochasticError::Distribution(format!("probabilities sum to {total}")));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.levels.iter().zip(&self.probabilities).map(|(l, p)| l * p).sum()
    }

    pub fn std_dev(&self) -> f64 {
        let m = self.mean();
        self.levels.iter().zip(&self.probabilities).map(|(l, p)| p * (l - m).powi(2)).sum::<f64>().sqrt()
    }

    pub fn min(&self) -> f64 {
        self.support().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.support().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Levels with positive probability.
    pub fn support(&self) -> impl Iterator<Item = f64> + '_ {
        self.levels.iter().zip(&self.probabilities).filter(|(_, p)| **p > 0.0).map(|(l, _)| *l)
    }

    pub fn contains(&self, level: f64) -> bool {
        self.support().any(|l| (l - level).abs() < 1e-9)
    }
}

/// Objective multipliers. Scalars shared by every link of a kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    /// Metering-rate reward (first stage).
    pub control: f64,
    /// Inflow penalty on speed-limited links.
    pub vsl_inflow: f64,
    /// Inflow penalty on entry links.
    pub entry_inflow: f64,
    /// Block penalty on the cumulative demand shortfall.
    pub block: f64,
    /// Penalty on step-to-step entry inflow changes.
    pub fluctuation: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self { control: 1e-4, vsl_inflow: 0.01, entry_inflow: 0.02, block: 0.003, fluctuation: 10.0 }
    }
}

/// Traffic state at the start of a planning window.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonState {
    /// Per-segment densities of every link.
    pub densities: BTreeMap<usize, Vec<f64>>,
    /// Entry backlog in flow units (queued vehicles / step length).
    pub entry_queue: f64,
    /// Vehicles waiting on each ramp.
    pub ramp_queues: BTreeMap<usize, f64>,
    pub steps: usize,
    pub step: f64,
    /// Absolute time of the window start, seconds.
    pub start_time: f64,
    /// Entry inflow of the step just before the window, when it belongs to
    /// the same demand period.
    pub previous_inflow: Option<f64>,
}

impl HorizonState {
    /// Empty corridor at `t = 0`.
    pub fn empty(corridor: &Corridor, steps: usize, step: f64) -> Self {
        Self {
            densities: corridor.links.iter().map(|l| (l.id, vec![0.0; l.geometry.segments()])).collect(),
            entry_queue: 0.0,
            ramp_queues: corridor.ramps.iter().map(|r| (r.id, 0.0)).collect(),
            steps,
            step,
            start_time: 0.0,
            previous_inflow: None,
        }
    }

    fn validate(&self, corridor: &Corridor) -> Result<(), StochasticError> {
        if self.steps == 0 || !(self.step > 0.0) {
            return Err(StochasticError::State("window needs at least one step of positive length".into()));
        }
        if !(self.entry_queue >= 0.0) {
            return Err(StochasticError::State(format!("entry queue {} is negative", self.entry_queue)));
        }
        for l in &corridor.links {
            let rho = self
                .densities
                .get(&l.id)
                .ok_or_else(|| StochasticError::State(format!("no densities for link {}", l.id)))?;
            if rho.len() != l.geometry.segments() {
                return Err(StochasticError::State(format!("link {} needs {} densities", l.id, l.geometry.segments())));
            }
            if let Some(r) = rho.iter().find(|r| !(0.0..=l.fd.rho_m() + 1e-12).contains(*r)) {
                return Err(StochasticError::State(format!("density {r} on link {} outside [0, rho_m]", l.id)));
            }
        }
        Ok(())
    }
}

/// One demand scenario: probability and demand per step (queue included).
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub probability: f64,
    pub demand: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ScenarioBlock {
    pub probability: f64,
    pub demand: Vec<f64>,
    pub links: BTreeMap<usize, LinkVariables>,
    pub ramps: BTreeMap<usize, RampVariables>,
    /// Binary per step: 1 when the cumulative demand is fully admitted,
    /// 0 when the inflow equals the metering rate.
    pub admit: Vec<VarId>,
    /// Epigraph variables of `|q_in(n) - q_in(n+1)|`.
    pub fluctuation: Vec<VarId>,
    /// Epigraph of the jump from the previous window's last inflow.
    pub carried_fluctuation: Option<VarId>,
}

#[derive(Debug, Clone)]
pub struct HorizonModel {
    pub lp: LinearProgram,
    /// First-stage metering rate per step.
    pub control: Vec<VarId>,
    pub scenarios: Vec<ScenarioBlock>,
    pub entry_link: usize,
    pub entry_queue: f64,
    pub steps: usize,
    pub step: f64,
}

impl HorizonModel {
    pub fn entry_inflow(&self, scenario: usize) -> &[VarId] {
        &self.scenarios[scenario].links[&self.entry_link].inflow
    }

    /// Selected candidate index on a speed-limited link.
    pub fn selected_speed(&self, values: &[f64], scenario: usize, link: usize) -> Option<usize> {
        let vv = self.scenarios[scenario].links.get(&link)?.vsl.as_ref()?;
        (0..vv.select.len()).max_by(|&a, &b| values[vv.select[a].0].total_cmp(&values[vv.select[b].0]))
    }

    /// Branching hint selecting candidate `s` on `link` in every scenario.
    pub fn speed_hint(&self, link: usize, s: usize) -> Vec<(VarId, f64)> {
        let mut hint = Vec::new();
        for b in &self.scenarios {
            if let Some(vv) = b.links.get(&link).and_then(|l| l.vsl.as_ref()) {
                for (i, &d) in vv.select.iter().enumerate() {
                    hint.push((d, if i == s { 1.0 } else { 0.0 }));
                }
            }
        }
        hint
    }

    /// Speed selections branch first, then entry admission. Ramp binaries
    /// come last: with an empty ramp queue or an idle mainline they are
    /// often free, and branching on them early only multiplies ties.
    pub fn branching_priority(&self) -> Vec<(VarId, u32)> {
        let mut out = Vec::new();
        for b in &self.scenarios {
            for l in b.links.values() {
                if let Some(v) = &l.vsl {
                    out.extend(v.select.iter().map(|&d| (d, 2)));
                }
            }
            out.extend(b.admit.iter().map(|&a| (a, 1)));
        }
        out
    }

    /// Number of variables owned by the first stage.
    pub fn first_stage_size(&self) -> usize {
        self.control.len()
    }
}

/// Builds the model for explicit scenarios (demand columns already include
/// the queue update).
pub fn build_scenario_model(
    corridor: &Corridor,
    state: &HorizonState,
    scenarios: &[Scenario],
    weights: &ObjectiveWeights,
) -> Result<HorizonModel, StochasticError> {
    state.validate(corridor)?;
    let steps = state.steps;
    let step = state.step;
    let entry_id =
        *corridor.entry_links.first().ok_or_else(|| StochasticError::State("corridor has no entry link".into()))?;
    let entry =
        corridor.link(entry_id).ok_or_else(|| StochasticError::State(format!("unknown entry link {entry_id}")))?;
    let q_entry = entry.max_capacity();
    if scenarios.iter().any(|s| s.demand.len() != steps) {
        return Err(StochasticError::Distribution("every demand column needs one value per step".into()));
    }

    let mut lp = LinearProgram::new();
    let control: Vec<VarId> = (0..steps).map(|n| lp.add_continuous(format!("control[{n}]"), 0.0, q_entry)).collect();
    for &c in &control {
        lp.add_objective(c, weights.control);
    }
    let e = state.entry_queue;
    let mut objective_constant = 0.0;
    let mut blocks = Vec::with_capacity(scenarios.len());

    for (j, sc) in scenarios.iter().enumerate() {
        let prefix = format!("s{j}.");
        let p = sc.probability;
        let mut links = BTreeMap::new();
        for l in &corridor.links {
            let vars = LinkVariables::new(&mut lp, l, steps, &prefix);
            let rho = &state.densities[&l.id];
            if l.is_vsl() {
                build_vsl_linearization(&mut lp, l, &vars)?;
            }
            build_compatibility(&mut lp, l, &vars, rho, step)?;
            build_demand_supply(&mut lp, l, &vars, rho, step, MinEncoding::Envelope)?;
            for n in 0..steps {
                if let Some(cap) = corridor.exit_capacity(l.id, state.start_time + n as f64 * step) {
                    let v = lp.variable(vars.outflow[n]).upper.min(cap);
                    lp.set_bounds(vars.outflow[n], 0.0, v);
                }
            }
            links.insert(l.id, vars);
        }
        let mut ramps = BTreeMap::new();
        for r in &corridor.ramps {
            let queue = state.ramp_queues.get(&r.id).copied().unwrap_or(0.0);
            ramps.insert(r.id, RampVariables::new(&mut lp, r, steps, q_entry, queue, &prefix));
        }
        for jn in &corridor.junctions {
            build_node_constraints(&mut lp, jn, &links, &ramps, step)?;
        }

        // Entry recourse: inflow is the largest value allowed by the
        // metering rate and the cumulative demand.
        let q_in = links[&entry_id].inflow.clone();
        let mut admit = Vec::with_capacity(steps);
        let mut cum_d = 0.0;
        for n in 0..steps {
            cum_d += sc.demand[n];
            let a = lp.add_binary(format!("{prefix}admit[{n}]"));
            admit.push(a);
            let cum: Vec<(VarId, f64)> = q_in[..=n].iter().map(|&v| (v, 1.0)).collect();
            lp.add_constraint(
                format!("{prefix}in_le_control[{n}]"),
                &[(q_in[n], 1.0), (control[n], -1.0)],
                Sense::Le,
                0.0,
            );
            lp.add_constraint(format!("{prefix}cum_in_le_demand[{n}]"), &cum, Sense::Le, cum_d);
            lp.add_constraint(
                format!("{prefix}in_reaches_control[{n}]"),
                &[(q_in[n], 1.0), (a, q_entry), (control[n], -1.0)],
                Sense::Ge,
                0.0,
            );
            let mut reach = cum.clone();
            reach.push((a, -cum_d));
            lp.add_constraint(format!("{prefix}in_reaches_demand[{n}]"), &reach, Sense::Ge, 0.0);
        }

        // Fluctuation epigraphs.
        let mut fluctuation = Vec::new();
        for n in 0..steps.saturating_sub(1) {
            let u = lp.add_continuous(format!("{prefix}fluct[{n}]"), 0.0, f64::INFINITY);
            lp.add_constraint(
                format!("{prefix}fluct_up[{n}]"),
                &[(u, 1.0), (q_in[n], -1.0), (q_in[n + 1], 1.0)],
                Sense::Ge,
                0.0,
            );
            lp.add_constraint(
                format!("{prefix}fluct_dn[{n}]"),
                &[(u, 1.0), (q_in[n], 1.0), (q_in[n + 1], -1.0)],
                Sense::Ge,
                0.0,
            );
            lp.add_objective(u, -p * weights.fluctuation);
            fluctuation.push(u);
        }
        let carried_fluctuation = state.previous_inflow.map(|prev| {
            let u = lp.add_continuous(format!("{prefix}fluct_prev"), 0.0, f64::INFINITY);
            lp.add_constraint(format!("{prefix}fluct_prev_up"), &[(u, 1.0), (q_in[0], 1.0)], Sense::Ge, prev);
            lp.add_constraint(format!("{prefix}fluct_prev_dn"), &[(u, 1.0), (q_in[0], -1.0)], Sense::Ge, -prev);
            lp.add_objective(u, -p * weights.fluctuation);
            u
        });

        // Weighted exit outflow, inflow penalties, block penalty.
        for &x in &corridor.exit_links {
            for (n, &v) in links[&x].outflow.iter().enumerate() {
                lp.add_objective(v, p * (steps - n) as f64);
            }
        }
        for l in corridor.vsl_links() {
            for &v in &links[&l.id].inflow {
                lp.add_objective(v, -p * weights.vsl_inflow);
            }
        }
        let block = weights.block * (1.0 + e);
        let mut cum = 0.0;
        for (n, &v) in q_in.iter().enumerate() {
            lp.add_objective(v, -p * weights.entry_inflow + p * block * (steps - n) as f64);
            cum += sc.demand[n];
            objective_constant -= p * block * cum;
        }
        blocks.push(ScenarioBlock {
            probability: p,
            demand: sc.demand.clone(),
            links,
            ramps,
            admit,
            fluctuation,
            carried_fluctuation,
        });
    }
    lp.set_objective_constant(objective_constant);
    Ok(HorizonModel { lp, control, scenarios: blocks, entry_link: entry_id, entry_queue: e, steps, step })
}

/// Demand columns of a distribution after the queue update.
pub fn scenario_columns(dist: &DemandDistribution, state: &HorizonState, capacity: f64) -> Vec<Scenario> {
    let matrix = init_demand_matrix(dist, state.steps);
    let (updated, _) = apply_queue_update(&matrix, state.entry_queue, capacity);
    (0..dist.levels.len())
        .filter(|&j| dist.probabilities[j] > 0.0)
        .map(|j| Scenario { probability: dist.probabilities[j], demand: updated.iter().map(|row| row[j]).collect() })
        .collect()
}

fn entry_capacity(corridor: &Corridor) -> Result<f64, StochasticError> {
    corridor
        .entry_links
        .first()
        .and_then(|&id| corridor.link(id))
        .map(|l| l.max_capacity())
        .ok_or_else(|| StochasticError::State("corridor has no entry link".into()))
}

/// Two-stage model with one scenario per demand level.
pub fn build_deterministic_equivalent(
    corridor: &Corridor,
    state: &HorizonState,
    dist: &DemandDistribution,
    weights: &ObjectiveWeights,
) -> Result<HorizonModel, StochasticError> {
    dist.validate()?;
    let columns = scenario_columns(dist, state, entry_capacity(corridor)?);
    build_scenario_model(corridor, state, &columns, weights)
}

/// Single-scenario model assuming the demand equals `fixed_demand`.
pub fn build_deterministic_baseline(
    corridor: &Corridor,
    state: &HorizonState,
    fixed_demand: f64,
    weights: &ObjectiveWeights,
) -> Result<HorizonModel, StochasticError> {
    if !(fixed_demand >= 0.0) {
        return Err(StochasticError::Distribution(format!("fixed demand {fixed_demand} is negative")));
    }
    build_deterministic_equivalent(corridor, state, &DemandDistribution::point(fixed_demand), weights)
}

/// Objective terms of one scenario, each as a non-negative magnitude.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScenarioTerms {
    pub weighted_outflow: f64,
    pub vsl_inflow: f64,
    pub entry_inflow: f64,
    pub block: f64,
    pub fluctuation: f64,
}

impl ScenarioTerms {
    /// `outflow - vsl - entry - block - fluctuation`.
    pub fn value(&self) -> f64 {
        self.weighted_outflow - self.vsl_inflow - self.entry_inflow - self.block - self.fluctuation
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveBreakdown {
    pub first_stage: f64,
    pub scenarios: Vec<ScenarioTerms>,
    pub total: f64,
}

/// Recomputes every objective term from a solution, using absolute values
/// of the inflow differences rather than the epigraph variables.
pub fn objective_breakdown(
    model: &HorizonModel,
    values: &[f64],
    corridor: &Corridor,
    weights: &ObjectiveWeights,
) -> ObjectiveBreakdown {
    let steps = model.steps;
    let first_stage = weights.control * model.control.iter().map(|v| values[v.0]).sum::<f64>();
    let mut total = first_stage;
    let mut terms = Vec::new();
    for b in &model.scenarios {
        let q: Vec<f64> = b.links[&model.entry_link].inflow.iter().map(|v| values[v.0]).collect();
        let mut t = ScenarioTerms::default();
        for &x in &corridor.exit_links {
            for (n, v) in b.links[&x].outflow.iter().enumerate() {
                t.weighted_outflow += values[v.0] * (steps - n) as f64;
            }
        }
        for l in corridor.vsl_links() {
            t.vsl_inflow += weights.vsl_inflow * b.links[&l.id].inflow.iter().map(|v| values[v.0]).sum::<f64>();
        }
        t.entry_inflow = weights.entry_inflow * q.iter().sum::<f64>();
        let (mut cd, mut cq) = (0.0, 0.0);
        for n in 0..steps {
            cd += b.demand[n];
            cq += q[n];
            t.block += weights.block * (cd - cq) * (1.0 + model.entry_queue);
        }
        t.fluctuation = weights.fluctuation * q.windows(2).map(|w| (w[0] - w[1]).abs()).sum::<f64>();
        if let Some(u) = b.carried_fluctuation {
            // The carried jump is measured against a constant, so the
            // epigraph value is exact at any optimum.
            t.fluctuation += weights.fluctuation * values[u.0];
        }
        total += b.probability * t.value();
        terms.push(t);
    }
    ObjectiveBreakdown { first_stage, scenarios: terms, total }
}

/// Largest compatibility violation of the solved flows over every link and
/// scenario, re-evaluated with the selected speed on limited links.
pub fn compatibility_residual(
    model: &HorizonModel,
    values: &[f64],
    corridor: &Corridor,
    state: &HorizonState,
) -> Result<f64, StochasticError> {
    let mut worst: f64 = 0.0;
    for (j, b) in model.scenarios.iter().enumerate() {
        for l in &corridor.links {
            let vars = &b.links[&l.id];
            let fd = match model.selected_speed(values, j, l.id) {
                Some(s) => l.fd_for(s),
                None => l.fd,
            };
            let qin: Vec<f64> = vars.inflow.iter().map(|v| values[v.0]).collect();
            let qout: Vec<f64> = vars.outflow.iter().map(|v| values[v.0]).collect();
            let v = crate::link::compatibility_violation(l, &fd, &state.densities[&l.id], &qin, &qout, state.step)?;
            worst = worst.max(v);
        }
    }
    Ok(worst)
}
