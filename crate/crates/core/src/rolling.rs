//! Rolling-horizon closed loop: demand matrices, the true-traffic simulator
//! and the controller loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lwr::{LaxHopf, LwrError, TriangularFd, ValueConditions};
use crate::milp::{branch_and_bound, MilpError, SolveOptions, SolveStatus};
use crate::network::{Corridor, JunctionKind};
use crate::stochastic::{
    build_deterministic_equivalent, build_scenario_model, compatibility_residual, DemandDistribution, HorizonModel,
    HorizonState, ObjectiveWeights, Scenario, StochasticError,
};

/// Window lengths of the rolling scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonConfig {
    /// Steps per planning window.
    pub project_steps: usize,
    /// Steps implemented before the window advances.
    pub rolling_steps: usize,
    /// Step length, seconds.
    pub step: f64,
}

impl Default for HorizonConfig {
    fn default() -> Self {
        Self { project_steps: 8, rolling_steps: 4, step: 20.0 }
    }
}

/// `steps x levels` matrix; column `j` is constant at level `j`.
pub fn init_demand_matrix(dist: &DemandDistribution, steps: usize) -> Vec<Vec<f64>> {
    vec![dist.levels.clone(); steps]
}

/// Tops each column up toward `capacity`, first row first, until the
/// backlog `e` (flow units) is spent. Returns the updated matrix and the
/// leftover backlog per column.
pub fn apply_queue_update(matrix: &[Vec<f64>], e: f64, capacity: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut out = matrix.to_vec();
    let cols = matrix.first().map_or(0, Vec::len);
    let mut residual = vec![e.max(0.0); cols];
    for (j, left) in residual.iter_mut().enumerate() {
        for row in out.iter_mut() {
            if *left <= 0.0 {
                break;
            }
            let add = (capacity - row[j]).max(0.0).min(*left);
            row[j] += add;
            *left -= add;
        }
    }
    (out, residual)
}

/// Demand column after observing the realized level: the observed level
/// over the first `project - rolling` steps, the mean afterwards, then the
/// queue update.
pub fn observed_demand_vector(
    observed: f64,
    dist: &DemandDistribution,
    cfg: &HorizonConfig,
    e: f64,
    capacity: f64,
) -> Vec<f64> {
    let known = cfg.project_steps.saturating_sub(cfg.rolling_steps);
    let mean = dist.mean();
    let column: Vec<Vec<f64>> = (0..cfg.project_steps).map(|n| vec![if n < known { observed } else { mean }]).collect();
    apply_queue_update(&column, e, capacity).0.into_iter().map(|r| r[0]).collect()
}

/// Entry inflow under metering: each step admits `min(control, demand +
/// backlog)`. `queue` and the returned backlog are vehicles.
pub fn compute_realized_inflow(control: &[f64], demand: &[f64], queue: f64, step: f64) -> (Vec<f64>, f64) {
    let mut q = queue.max(0.0);
    let inflow = control
        .iter()
        .zip(demand)
        .map(|(&c, &d)| {
            let f = c.max(0.0).min(d.max(0.0) + q / step);
            q = (q + (d.max(0.0) - f) * step).max(0.0);
            f
        })
        .collect();
    (inflow, q)
}

#[derive(Debug, Error)]
pub enum ClosedLoopError {
    #[error("horizon {horizon}: {source}")]
    Model { horizon: usize, source: StochasticError },
    #[error("horizon {horizon}: {source}")]
    Solver { horizon: usize, source: MilpError },
    #[error("horizon {horizon}: no feasible control ({status:?})")]
    NoSolution { horizon: usize, status: SolveStatus },
    #[error("demand level {level} of horizon {horizon} is not in the demand support")]
    UnknownLevel { horizon: usize, level: f64 },
    #[error("invalid horizon configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Lwr(#[from] LwrError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Which demand the controller plans against at the start of a period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    TwoStage,
    DMin,
    DMean,
    DMax,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 4] =
        [ControllerKind::TwoStage, ControllerKind::DMin, ControllerKind::DMean, ControllerKind::DMax];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::TwoStage => "two-stage",
            ControllerKind::DMin => "d-min",
            ControllerKind::DMean => "d-mean",
            ControllerKind::DMax => "d-max",
        }
    }

    /// Distribution used by the planning solve.
    pub fn planning_distribution(self, dist: &DemandDistribution) -> DemandDistribution {
        match self {
            ControllerKind::TwoStage => dist.clone(),
            ControllerKind::DMin => DemandDistribution::point(dist.min()),
            ControllerKind::DMean => DemandDistribution::point(dist.mean()),
            ControllerKind::DMax => DemandDistribution::point(dist.max()),
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        ControllerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown controller `{s}` (expected two-stage, d-min, d-mean or d-max)"))
    }
}

/// Branch-and-bound settings used inside the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub relative_gap: f64,
    pub node_limit: Option<usize>,
    pub time_limit_secs: Option<f64>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { relative_gap: 1e-6, node_limit: Some(200_000), time_limit_secs: None }
    }
}

impl SolverSettings {
    fn options(&self) -> SolveOptions {
        SolveOptions {
            relative_gap: self.relative_gap,
            node_limit: self.node_limit,
            time_limit: self.time_limit_secs.map(Duration::from_secs_f64),
            ..SolveOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopConfig {
    pub horizon: HorizonConfig,
    pub weights: ObjectiveWeights,
    pub demand: DemandDistribution,
    pub solver: SolverSettings,
}

/// Flows realized over one simulated step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFlows {
    pub entry_inflow: f64,
    pub exit_outflow: f64,
    pub ramp_flows: BTreeMap<usize, f64>,
    pub inflow: BTreeMap<usize, f64>,
    pub outflow: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone)]
struct LinkRun {
    fd: TriangularFd,
    vc: ValueConditions,
}

/// True-traffic simulator: Lax-Hopf per link, restarted at every period
/// boundary from exact segment averages, with junction flows resolved
/// greedily from sending and receiving flows.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    corridor: &'a Corridor,
    step: f64,
    links: BTreeMap<usize, LinkRun>,
    speeds: BTreeMap<usize, usize>,
    /// Absolute step index.
    now: usize,
    /// Vehicles waiting at the entry.
    pub entry_queue: f64,
    pub ramp_queues: BTreeMap<usize, f64>,
    pub arrived: f64,
    pub exited: f64,
}

impl<'a> Simulator<'a> {
    /// Starts from the given densities with every speed-limited link at its
    /// fastest candidate.
    pub fn new(corridor: &'a Corridor, densities: &BTreeMap<usize, Vec<f64>>, step: f64) -> Result<Self, LwrError> {
        let mut links = BTreeMap::new();
        let mut speeds = BTreeMap::new();
        for l in &corridor.links {
            let rho = densities.get(&l.id).cloned().unwrap_or_else(|| vec![0.0; l.geometry.segments()]);
            let fd = match &l.vsl {
                Some(v) => {
                    speeds.insert(l.id, v.fastest());
                    l.fd_for(v.fastest())
                }
                None => l.fd,
            };
            let vc = ValueConditions::new(rho, Vec::new(), Vec::new(), step);
            vc.validate(&fd, &l.geometry)?;
            links.insert(l.id, LinkRun { fd, vc });
        }
        let vehicles: f64 =
            corridor.links.iter().map(|l| links[&l.id].vc.initial_vehicles(l.geometry.segment_length())).sum();
        Ok(Self {
            corridor,
            step,
            links,
            speeds,
            now: 0,
            entry_queue: 0.0,
            ramp_queues: corridor.ramps.iter().map(|r| (r.id, 0.0)).collect(),
            arrived: vehicles,
            exited: 0.0,
        })
    }

    pub fn now(&self) -> usize {
        self.now
    }

    pub fn speeds(&self) -> &BTreeMap<usize, usize> {
        &self.speeds
    }

    fn elapsed(run: &LinkRun) -> usize {
        run.vc.inflow.len()
    }

    /// Current per-segment densities.
    pub fn densities(&self) -> BTreeMap<usize, Vec<f64>> {
        self.corridor
            .links
            .iter()
            .map(|l| {
                let run = &self.links[&l.id];
                let t = Self::elapsed(run) as f64 * self.step;
                (l.id, LaxHopf::new(&run.fd, &l.geometry, &run.vc).segment_densities(t))
            })
            .collect()
    }

    /// Vehicles currently on the links.
    pub fn stored(&self) -> f64 {
        self.corridor
            .links
            .iter()
            .map(|l| {
                let run = &self.links[&l.id];
                let n = Self::elapsed(run);
                let lh = LaxHopf::new(&run.fd, &l.geometry, &run.vc);
                lh.initial_vehicles() + lh.cumulative_inflow(n) - lh.cumulative_outflow(n)
            })
            .sum()
    }

    /// `arrived - exited - stored - queues`; zero up to rounding.
    pub fn conservation_error(&self) -> f64 {
        let queued = self.entry_queue + self.ramp_queues.values().sum::<f64>();
        self.arrived - self.exited - self.stored() - queued
    }

    /// Ends the current period: densities become the new initial state and
    /// the given speeds take effect.
    pub fn restart(&mut self, speeds: &BTreeMap<usize, usize>) -> Result<(), LwrError> {
        let densities = self.densities();
        for l in &self.corridor.links {
            let fd = match (&l.vsl, speeds.get(&l.id).or(self.speeds.get(&l.id))) {
                (Some(_), Some(&s)) => {
                    self.speeds.insert(l.id, s);
                    l.fd_for(s)
                }
                _ => l.fd,
            };
            let vc = ValueConditions::new(densities[&l.id].clone(), Vec::new(), Vec::new(), self.step);
            vc.validate(&fd, &l.geometry)?;
            self.links.insert(l.id, LinkRun { fd, vc });
        }
        Ok(())
    }

    /// Simulates one step with metering rate `control` and entry demand
    /// `demand` (veh/s).
    pub fn advance(&mut self, control: f64, demand: f64) -> StepFlows {
        let c = self.corridor;
        let t = self.step;
        let mut sending = BTreeMap::new();
        let mut receiving = BTreeMap::new();
        for l in &c.links {
            let run = &self.links[&l.id];
            let lh = LaxHopf::new(&run.fd, &l.geometry, &run.vc);
            let n = Self::elapsed(run);
            sending.insert(l.id, lh.sending_flow(n));
            receiving.insert(l.id, lh.receiving_flow(n));
        }
        let mut inflow = BTreeMap::new();
        let mut outflow = BTreeMap::new();
        let mut ramp_flows = BTreeMap::new();

        let entry = c.entry_links[0];
        let entry_inflow = control.max(0.0).min(demand + self.entry_queue / t).min(receiving[&entry]);
        inflow.insert(entry, entry_inflow);
        for j in &c.junctions {
            match j.kind {
                JunctionKind::Serial => {
                    let (up, down) = (j.incoming[0], j.outgoing[0]);
                    let f = sending[&up].min(receiving[&down]);
                    outflow.insert(up, f);
                    inflow.insert(down, f);
                }
                JunctionKind::Merge => {
                    let (main, ramp, down) = (j.incoming[0], j.incoming[1], j.outgoing[0]);
                    let r = c.ramp(ramp).expect("validated corridor");
                    let available = self.ramp_queues[&ramp] / t + r.demand;
                    let rf = available.min(receiving[&down]);
                    let mf = sending[&main].min(receiving[&down] - rf).max(0.0);
                    ramp_flows.insert(ramp, rf);
                    outflow.insert(main, mf);
                    inflow.insert(down, mf + rf);
                }
            }
        }
        let exit = c.exit_links[0];
        let time = self.now as f64 * t;
        let cap = c.exit_capacity(exit, time).unwrap_or(f64::INFINITY);
        outflow.insert(exit, sending[&exit].min(cap));

        for l in &c.links {
            let run = self.links.get_mut(&l.id).expect("link state");
            run.vc.inflow.push(inflow[&l.id]);
            run.vc.outflow.push(outflow[&l.id]);
        }
        self.entry_queue = (self.entry_queue + (demand - entry_inflow) * t).max(0.0);
        self.arrived += demand * t;
        for r in &c.ramps {
            let q = self.ramp_queues.get_mut(&r.id).expect("ramp queue");
            let f = ramp_flows.get(&r.id).copied().unwrap_or(0.0);
            *q = (*q + (r.demand - f) * t).max(0.0);
            self.arrived += r.demand * t;
        }
        let exit_outflow = outflow[&exit];
        self.exited += exit_outflow * t;
        self.now += 1;
        StepFlows { entry_inflow, exit_outflow, ramp_flows, inflow, outflow }
    }
}

/// One simulated step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub horizon: usize,
    pub control: f64,
    pub demand: f64,
    pub flows: StepFlows,
    /// Entry queue (vehicles) at the end of the step.
    pub entry_queue: f64,
    pub ramp_queues: BTreeMap<usize, f64>,
    /// Densities at the end of the step.
    pub densities: BTreeMap<usize, Vec<f64>>,
    /// Active speed limit (m/s) per speed-limited link.
    pub speed_limits: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolvePhase {
    /// Start of a demand period, before the demand is known.
    Plan,
    /// After the demand has been observed.
    Revise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveRecord {
    pub horizon: usize,
    pub phase: SolvePhase,
    pub step: usize,
    pub status: SolveStatus,
    pub objective: f64,
    pub bound: f64,
    pub root_bound: f64,
    pub nodes: usize,
    pub seconds: f64,
    pub compatibility_violation: f64,
    /// Initial entry backlog of the window, flow units.
    pub entry_backlog: f64,
}

/// Demand-period summary used by the metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodRecord {
    pub horizon: usize,
    pub level: f64,
    /// Entry backlog at the period start, flow units.
    pub backlog: f64,
    /// Demand column after the queue update.
    pub updated_demand: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub controller: ControllerKind,
    pub step: f64,
    pub project_steps: usize,
    pub steps: Vec<StepRecord>,
    pub solves: Vec<SolveRecord>,
    pub periods: Vec<PeriodRecord>,
    /// Largest conservation error observed at any step, vehicles.
    pub conservation_error: f64,
    /// Vehicles that arrived (initially present plus all demand).
    pub arrived: f64,
}

impl Trajectory {
    /// Planning state at the end of the recorded steps (the empty corridor
    /// when nothing was simulated).
    pub fn final_state(&self, corridor: &Corridor) -> HorizonState {
        let mut state = HorizonState::empty(corridor, self.project_steps, self.step);
        if let Some(last) = self.steps.last() {
            state.densities = last.densities.clone();
            state.entry_queue = last.entry_queue / self.step;
            state.ramp_queues = last.ramp_queues.clone();
            state.start_time = self.steps.len() as f64 * self.step;
        }
        state
    }

    pub fn entry_inflows(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.flows.entry_inflow).collect()
    }

    /// Vehicles leaving through the exit links.
    pub fn throughput(&self) -> f64 {
        self.exit_outflows().iter().sum::<f64>() * self.step
    }

    pub fn exit_outflows(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.flows.exit_outflow).collect()
    }

    /// One row per step and link.
    pub fn write_links_csv<W: Write>(&self, w: W) -> Result<(), ClosedLoopError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "time", "horizon", "link", "inflow", "outflow", "densities", "speed_limit"])?;
        for s in &self.steps {
            for (&id, &q) in &s.flows.inflow {
                let rho: Vec<String> = s.densities[&id].iter().map(|r| format!("{r:.9}")).collect();
                let speed = s.speed_limits.get(&id).map(|v| v.to_string()).unwrap_or_default();
                out.write_record([
                    s.step.to_string(),
                    format!("{}", (s.step + 1) as f64 * self.step),
                    s.horizon.to_string(),
                    id.to_string(),
                    format!("{q:.9}"),
                    format!("{:.9}", s.flows.outflow[&id]),
                    rho.join(";"),
                    speed,
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// One row per step with the boundary quantities.
    pub fn write_boundary_csv<W: Write>(&self, w: W) -> Result<(), ClosedLoopError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "step",
            "horizon",
            "control",
            "demand",
            "entry_inflow",
            "entry_queue",
            "ramp_flow",
            "ramp_queue",
            "exit_outflow",
        ])?;
        let exits = self.exit_outflows();
        for (s, exit) in self.steps.iter().zip(exits) {
            out.write_record([
                s.step.to_string(),
                s.horizon.to_string(),
                format!("{:.9}", s.control),
                format!("{:.9}", s.demand),
                format!("{:.9}", s.flows.entry_inflow),
                format!("{:.9}", s.entry_queue),
                format!("{:.9}", s.flows.ramp_flows.values().sum::<f64>()),
                format!("{:.9}", s.ramp_queues.values().sum::<f64>()),
                format!("{exit:.9}"),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// One row per solve.
    pub fn write_solves_csv<W: Write>(&self, w: W) -> Result<(), ClosedLoopError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "horizon",
            "phase",
            "step",
            "status",
            "objective",
            "bound",
            "root_bound",
            "nodes",
            "seconds",
            "compat_violation",
        ])?;
        for s in &self.solves {
            out.write_record([
                s.horizon.to_string(),
                format!("{:?}", s.phase).to_lowercase(),
                s.step.to_string(),
                format!("{:?}", s.status),
                format!("{:.9}", s.objective),
                format!("{:.9}", s.bound),
                format!("{:.9}", s.root_bound),
                s.nodes.to_string(),
                format!("{:.3}", s.seconds),
                format!("{:e}", s.compatibility_violation),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn solve_window(
    corridor: &Corridor,
    model: &HorizonModel,
    state: &HorizonState,
    speeds: &BTreeMap<usize, usize>,
    settings: &SolverSettings,
    horizon: usize,
    phase: SolvePhase,
    step: usize,
) -> Result<(Vec<f64>, SolveRecord), ClosedLoopError> {
    let mut opts = settings.options();
    opts.priority = model.branching_priority();
    for (&link, &s) in speeds {
        opts.hint.extend(model.speed_hint(link, s));
    }
    let start = Instant::now();
    let sol = branch_and_bound(&model.lp, &opts).map_err(|source| ClosedLoopError::Solver { horizon, source })?;
    let seconds = start.elapsed().as_secs_f64();
    log::debug!("horizon {horizon} {phase:?}: {:?} after {} nodes in {seconds:.2} s", sol.status, sol.nodes);
    if !sol.status.has_solution() {
        return Err(ClosedLoopError::NoSolution { horizon, status: sol.status });
    }
    if !matches!(sol.status, SolveStatus::Optimal | SolveStatus::GapLimit) {
        log::warn!("horizon {horizon} {phase:?}: solver stopped with {:?}", sol.status);
    }
    let violation = compatibility_residual(model, &sol.values, corridor, state)
        .map_err(|source| ClosedLoopError::Model { horizon, source })?;
    let record = SolveRecord {
        horizon,
        phase,
        step,
        status: sol.status,
        objective: sol.objective,
        bound: sol.bound,
        root_bound: sol.root_bound,
        nodes: sol.nodes,
        seconds,
        compatibility_violation: violation,
        entry_backlog: state.entry_queue,
    };
    Ok((sol.values, record))
}

/// Runs the rolling-horizon loop over `demand_stream` (one realized level
/// per demand period of `project_steps` steps) from an empty corridor.
///
/// Each period starts with a planning solve against the controller's
/// demand assumption; its metering rates are applied for `rolling_steps`
/// steps. The level is then observed and a single-scenario revision solve
/// sets the speed limits and the metering rates of the next
/// `rolling_steps` steps, and so on until the period ends.
pub fn run_closed_loop(
    corridor: &Corridor,
    demand_stream: &[f64],
    kind: ControllerKind,
    cfg: &ClosedLoopConfig,
) -> Result<Trajectory, ClosedLoopError> {
    let h = cfg.horizon;
    if h.rolling_steps == 0 || h.rolling_steps > h.project_steps || !(h.step > 0.0) {
        return Err(ClosedLoopError::Config(format!(
            "need 0 < rolling steps ({}) <= project steps ({}) and a positive step",
            h.rolling_steps, h.project_steps
        )));
    }
    let dist = &cfg.demand;
    let planning = kind.planning_distribution(dist);
    let capacity = corridor
        .entry_links
        .first()
        .and_then(|&id| corridor.link(id))
        .map(|l| l.max_capacity())
        .ok_or_else(|| ClosedLoopError::Config("corridor has no entry link".into()))?;
    let empty = HorizonState::empty(corridor, h.project_steps, h.step);
    let mut sim = Simulator::new(corridor, &empty.densities, h.step)?;
    let mut traj = Trajectory {
        controller: kind,
        step: h.step,
        project_steps: h.project_steps,
        steps: Vec::new(),
        solves: Vec::new(),
        periods: Vec::new(),
        conservation_error: 0.0,
        arrived: 0.0,
    };

    for (horizon, &level) in demand_stream.iter().enumerate() {
        if !dist.contains(level) {
            return Err(ClosedLoopError::UnknownLevel { horizon, level });
        }
        let backlog = sim.entry_queue / h.step;
        let column = vec![vec![level]; h.project_steps];
        traj.periods.push(PeriodRecord {
            horizon,
            level,
            backlog,
            updated_demand: apply_queue_update(&column, backlog, capacity).0.into_iter().map(|r| r[0]).collect(),
        });
        let mut offset = 0;
        while offset < h.project_steps {
            let phase = if offset == 0 { SolvePhase::Plan } else { SolvePhase::Revise };
            let state = HorizonState {
                densities: sim.densities(),
                entry_queue: sim.entry_queue / h.step,
                ramp_queues: sim.ramp_queues.clone(),
                steps: h.project_steps,
                step: h.step,
                start_time: sim.now() as f64 * h.step,
                previous_inflow: traj.steps.last().filter(|_| offset > 0).map(|s| s.flows.entry_inflow),
            };
            let model = match phase {
                SolvePhase::Plan => build_deterministic_equivalent(corridor, &state, &planning, &cfg.weights),
                SolvePhase::Revise => {
                    let observed = HorizonConfig { rolling_steps: offset, ..h };
                    let demand = observed_demand_vector(level, dist, &observed, state.entry_queue, capacity);
                    build_scenario_model(corridor, &state, &[Scenario { probability: 1.0, demand }], &cfg.weights)
                }
            }
            .map_err(|source| ClosedLoopError::Model { horizon, source })?;
            let speeds_now = sim.speeds().clone();
            let (values, record) =
                solve_window(corridor, &model, &state, &speeds_now, &cfg.solver, horizon, phase, sim.now())?;
            traj.solves.push(record);
            if phase == SolvePhase::Revise {
                let speeds: BTreeMap<usize, usize> = corridor
                    .vsl_links()
                    .filter_map(|l| model.selected_speed(&values, 0, l.id).map(|s| (l.id, s)))
                    .collect();
                sim.restart(&speeds)?;
            } else {
                sim.restart(&BTreeMap::new())?;
            }
            let n_apply = h.rolling_steps.min(h.project_steps - offset);
            for k in 0..n_apply {
                let control = values[model.control[k].0];
                let flows = sim.advance(control, level);
                let speed_limits = corridor
                    .vsl_links()
                    .filter_map(|l| {
                        let s = *sim.speeds().get(&l.id)?;
                        Some((l.id, l.vsl.as_ref()?.speeds[s]))
                    })
                    .collect();
                traj.conservation_error = traj.conservation_error.max(sim.conservation_error().abs());
                traj.steps.push(StepRecord {
                    step: sim.now() - 1,
                    horizon,
                    control,
                    demand: level,
                    flows,
                    entry_queue: sim.entry_queue,
                    ramp_queues: sim.ramp_queues.clone(),
                    densities: sim.densities(),
                    speed_limits,
                });
            }
            offset += n_apply;
        }
    }
    traj.arrived = sim.arrived;
    Ok(traj)
}
