//! Experiment configuration, demand streams, metrics, the controller
//! comparison and the demand-variation sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::link::{LinkSpec, VslSets};
use crate::lwr::{LinkGeometry, LwrError, TriangularFd};
use crate::network::{validate_topology, CapacityDrop, Corridor, Junction, Ramp, TopologyError};
use crate::rolling::{
    run_closed_loop, ClosedLoopConfig, ClosedLoopError, ControllerKind, HorizonConfig, SolverSettings, Trajectory,
};
use crate::stochastic::{DemandDistribution, ObjectiveWeights, StochasticError};

/// The shipped case-study preset.
pub const CASE_STUDY_TOML: &str = include_str!("../presets/case_study.toml");

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot parse configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid corridor: {}", join(.0))]
    Topology(Vec<TopologyError>),
    #[error(transparent)]
    Lwr(#[from] LwrError),
    #[error(transparent)]
    Demand(#[from] StochasticError),
    #[error("seed {seed}, {controller}: {source}")]
    Run { seed: u64, controller: &'static str, source: ClosedLoopError },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn join(errors: &[TopologyError]) -> String {
    errors.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; ")
}

/// Fundamental diagram shared by all links, densities per lane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    pub free_flow_speed: f64,
    pub critical_density: f64,
    pub jam_density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub id: usize,
    pub length: f64,
    pub segments: usize,
    pub lanes: u32,
    #[serde(default)]
    pub speed_limited: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Probability `p` of both extreme levels in `{p, 1 - 2p, p}`.
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: usize,
    pub first_seed: u64,
    /// Demand periods per run.
    pub horizons: usize,
    pub speed_limits: Vec<f64>,
    pub entry_links: Vec<usize>,
    pub exit_links: Vec<usize>,
    pub fd: FdConfig,
    pub links: Vec<LinkConfig>,
    #[serde(default)]
    pub ramps: Vec<Ramp>,
    pub junctions: Vec<Junction>,
    pub capacity_drop: Option<CapacityDrop>,
    pub demand: DemandDistribution,
    pub weights: ObjectiveWeights,
    pub horizon: HorizonConfig,
    #[serde(default)]
    pub solver: SolverSettings,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn case_study() -> Self {
        Self::from_toml_str(CASE_STUDY_TOML).expect("the shipped preset is valid")
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Named preset or a path to a TOML file.
    pub fn load(spec: &str) -> Result<Self, ExperimentError> {
        match spec {
            "case_study" => Ok(Self::case_study()),
            path => Self::from_path(Path::new(path)),
        }
    }

    pub fn to_toml_string(&self) -> Result<String, ExperimentError> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of the canonical TOML serialization, hex encoded.
    pub fn config_hash(&self) -> Result<String, ExperimentError> {
        let digest = Sha256::digest(self.to_toml_string()?.as_bytes());
        Ok(digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        }))
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.demand.validate()?;
        let h = &self.horizon;
        if h.rolling_steps == 0 || h.rolling_steps > h.project_steps || !(h.step > 0.0) {
            return Err(ExperimentError::Config(
                "horizon needs 0 < rolling_steps <= project_steps and step > 0".into(),
            ));
        }
        if self.sweep.probabilities.iter().any(|p| !(0.0..=0.5).contains(p)) {
            return Err(ExperimentError::Config("sweep probabilities must lie in [0, 0.5]".into()));
        }
        if self.demand.levels.len() != 3 && !self.sweep.probabilities.is_empty() {
            return Err(ExperimentError::Config("the sweep needs exactly three demand levels".into()));
        }
        self.corridor().map(|_| ())
    }

    fn link_fd(&self, lanes: u32) -> Result<TriangularFd, LwrError> {
        let f = &self.fd;
        let lanes = f64::from(lanes);
        TriangularFd::from_critical_density(f.free_flow_speed, f.critical_density * lanes, f.jam_density * lanes)
    }

    /// Builds and validates the corridor.
    pub fn corridor(&self) -> Result<Corridor, ExperimentError> {
        let mut links = Vec::with_capacity(self.links.len());
        for l in &self.links {
            let fd = self.link_fd(l.lanes)?;
            let vsl = if l.speed_limited { Some(VslSets::from_speeds(&fd, &self.speed_limits)?) } else { None };
            links.push(LinkSpec {
                id: l.id,
                geometry: LinkGeometry::new(0.0, l.length, l.segments, l.lanes)?,
                fd,
                vsl,
            });
        }
        let corridor = Corridor {
            links,
            ramps: self.ramps.clone(),
            junctions: self.junctions.clone(),
            entry_links: self.entry_links.clone(),
            exit_links: self.exit_links.clone(),
            capacity_drop: self.capacity_drop.clone(),
        };
        validate_topology(&corridor).map_err(ExperimentError::Topology)?;
        Ok(corridor)
    }

    pub fn closed_loop(&self) -> ClosedLoopConfig {
        ClosedLoopConfig {
            horizon: self.horizon,
            weights: self.weights,
            demand: self.demand.clone(),
            solver: self.solver.clone(),
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.first_seed + i).collect()
    }
}

/// The case-study corridor.
pub fn case_study_corridor() -> Corridor {
    ExperimentConfig::case_study().corridor().expect("the shipped preset is valid")
}

/// One level per demand period, drawn with ChaCha8 seeded by `seed`.
pub fn sample_demand_stream(dist: &DemandDistribution, horizons: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = WeightedIndex::new(&dist.probabilities).expect("validated distribution");
    (0..horizons).map(|_| dist.levels[pick.sample(&mut rng)]).collect()
}

/// Closed-loop performance of one controller on one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub controller: ControllerKind,
    pub seed: u64,
    /// Block penalty summed over periods.
    pub block: f64,
    /// Fluctuation penalty summed over periods (within-period changes only).
    pub fluctuation: f64,
    pub throughput: f64,
    /// Signed within-period inflow changes `q(n+1) - q(n)`.
    pub inflow_changes: Vec<f64>,
    /// Entry queue (vehicles) after every step.
    pub queue: Vec<f64>,
}

impl MetricsReport {
    pub fn combined(&self) -> f64 {
        self.block + self.fluctuation
    }
}

/// Block penalty and fluctuation penalty of a trajectory, evaluated with
/// the realized inflows against each period's queue-updated demand.
pub fn compute_metrics(traj: &Trajectory, weights: &ObjectiveWeights, seed: u64) -> MetricsReport {
    let n = traj.project_steps;
    let inflows = traj.entry_inflows();
    let mut block = 0.0;
    let mut changes = Vec::new();
    for (period, q) in traj.periods.iter().zip(inflows.chunks(n)) {
        let (mut cd, mut cq) = (0.0, 0.0);
        for (d, f) in period.updated_demand.iter().zip(q) {
            cd += d;
            cq += f;
            block += weights.block * (cd - cq).max(0.0) * (1.0 + period.backlog);
        }
        changes.extend(q.windows(2).map(|w| w[1] - w[0]));
    }
    let fluctuation = weights.fluctuation * changes.iter().map(|c| c.abs()).sum::<f64>();
    MetricsReport {
        controller: traj.controller,
        seed,
        block,
        fluctuation,
        throughput: traj.throughput(),
        inflow_changes: changes,
        queue: traj.steps.iter().map(|s| s.entry_queue).collect(),
    }
}

/// Runs `jobs` on all available cores and returns results in job order.
fn run_parallel<J: Sync, T: Send>(jobs: &[J], f: impl Fn(&J) -> T + Sync) -> Vec<T> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<T>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                results.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    results.into_inner().expect("no poisoned workers").into_iter().map(|r| r.expect("every job ran")).collect()
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub stream: Vec<f64>,
    pub metrics: MetricsReport,
    pub trajectory: Trajectory,
}

/// Per-controller totals over all seeds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Totals {
    pub block: f64,
    pub fluctuation: f64,
    pub throughput: f64,
}

impl Totals {
    pub fn combined(&self) -> f64 {
        self.block + self.fluctuation
    }
}

#[derive(Debug, Clone)]
pub struct Comparison {
    /// Ordered by seed, then controller.
    pub runs: Vec<RunResult>,
}

impl Comparison {
    pub fn totals(&self) -> BTreeMap<ControllerKind, Totals> {
        let mut out: BTreeMap<ControllerKind, Totals> = BTreeMap::new();
        for r in &self.runs {
            let t = out.entry(r.metrics.controller).or_default();
            t.block += r.metrics.block;
            t.fluctuation += r.metrics.fluctuation;
            t.throughput += r.metrics.throughput;
        }
        out
    }

    /// Relative reduction of the two-stage combined metric against `other`.
    pub fn reduction_vs(&self, other: ControllerKind) -> Option<f64> {
        let t = self.totals();
        let base = t.get(&other)?.combined();
        let ours = t.get(&ControllerKind::TwoStage)?.combined();
        (base > 0.0).then(|| 1.0 - ours / base)
    }

    pub fn run(&self, seed: u64, controller: ControllerKind) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.seed == seed && r.metrics.controller == controller)
    }

    pub fn write_metrics_csv<W: Write>(&self, w: W) -> Result<(), ExperimentError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["seed", "controller", "block", "fluctuation", "combined", "throughput"])?;
        for r in &self.runs {
            let m = &r.metrics;
            out.write_record([
                m.seed.to_string(),
                m.controller.name().to_string(),
                format!("{:.9}", m.block),
                format!("{:.9}", m.fluctuation),
                format!("{:.9}", m.combined()),
                format!("{:.6}", m.throughput),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Signed within-period inflow changes, one row per change.
    pub fn write_fluctuations_csv<W: Write>(&self, w: W) -> Result<(), ExperimentError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["seed", "controller", "index", "change"])?;
        for r in &self.runs {
            for (i, c) in r.metrics.inflow_changes.iter().enumerate() {
                out.write_record([
                    r.seed.to_string(),
                    r.metrics.controller.name().to_string(),
                    i.to_string(),
                    format!("{c:.9}"),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Entry queue per step for every run.
    pub fn write_queues_csv<W: Write>(&self, w: W) -> Result<(), ExperimentError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["seed", "controller", "step", "queue"])?;
        for r in &self.runs {
            for (i, q) in r.metrics.queue.iter().enumerate() {
                out.write_record([
                    r.seed.to_string(),
                    r.metrics.controller.name().to_string(),
                    i.to_string(),
                    format!("{q:.6}"),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// One closed-loop run.
pub fn run_single(
    cfg: &ExperimentConfig,
    corridor: &Corridor,
    controller: ControllerKind,
    seed: u64,
) -> Result<RunResult, ExperimentError> {
    let stream = sample_demand_stream(&cfg.demand, cfg.horizons, seed);
    let trajectory = run_closed_loop(corridor, &stream, controller, &cfg.closed_loop())
        .map_err(|source| ExperimentError::Run { seed, controller: controller.name(), source })?;
    let metrics = compute_metrics(&trajectory, &cfg.weights, seed);
    Ok(RunResult { seed, stream, metrics, trajectory })
}

/// All four controllers on the same streams.
pub fn run_comparison(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    controllers: &[ControllerKind],
) -> Result<Comparison, ExperimentError> {
    let corridor = cfg.corridor()?;
    let jobs: Vec<(u64, ControllerKind)> =
        seeds.iter().flat_map(|&s| controllers.iter().map(move |&c| (s, c))).collect();
    let runs = run_parallel(&jobs, |&(seed, c)| {
        log::info!("seed {seed}: {}", c.name());
        run_single(cfg, &corridor, c, seed)
    });
    Ok(Comparison { runs: runs.into_iter().collect::<Result<_, _>>()? })
}

/// Standard deviation of `{p, 1 - 2p, p}` over the configured levels.
pub fn symmetric_sd(cfg: &ExperimentConfig, p: f64) -> Result<f64, ExperimentError> {
    Ok(symmetric_distribution(cfg, p)?.std_dev())
}

fn symmetric_distribution(cfg: &ExperimentConfig, p: f64) -> Result<DemandDistribution, ExperimentError> {
    let l = &cfg.demand.levels;
    if l.len() != 3 {
        return Err(ExperimentError::Config("the sweep needs exactly three demand levels".into()));
    }
    Ok(DemandDistribution::symmetric([l[0], l[1], l[2]], p)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub p: f64,
    pub sd: f64,
    pub controller: ControllerKind,
    /// Sums over seeds.
    pub totals: Totals,
    pub per_seed: Vec<MetricsReport>,
}

/// Comparison repeated for each symmetric distribution of the grid.
pub fn run_sd_sweep(
    cfg: &ExperimentConfig,
    probabilities: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>, ExperimentError> {
    let mut rows = Vec::new();
    for &p in probabilities {
        let mut point = cfg.clone();
        point.demand = symmetric_distribution(cfg, p)?;
        let sd = point.demand.std_dev();
        let cmp = run_comparison(&point, seeds, &ControllerKind::ALL)?;
        let totals = cmp.totals();
        for c in ControllerKind::ALL {
            rows.push(SweepRow {
                p,
                sd,
                controller: c,
                totals: totals.get(&c).copied().unwrap_or_default(),
                per_seed: cmp.runs.iter().filter(|r| r.metrics.controller == c).map(|r| r.metrics.clone()).collect(),
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<(), ExperimentError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["p", "sd", "controller", "block", "fluctuation", "combined", "throughput"])?;
    for r in rows {
        out.write_record([
            format!("{}", r.p),
            format!("{:.6}", r.sd),
            r.controller.name().to_string(),
            format!("{:.9}", r.totals.block),
            format!("{:.9}", r.totals.fluctuation),
            format!("{:.9}", r.totals.combined()),
            format!("{:.6}", r.totals.throughput),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Reproducibility record written next to every set of outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_name: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub controllers: Vec<ControllerKind>,
    pub package_version: String,
    pub lp_backend: String,
    pub rng: String,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn new(
        command: &str,
        cfg: &ExperimentConfig,
        seeds: &[u64],
        controllers: &[ControllerKind],
    ) -> Result<Self, ExperimentError> {
        Ok(Self {
            command: command.to_string(),
            config_name: cfg.name.clone(),
            config_hash: cfg.config_hash()?,
            seeds: seeds.to_vec(),
            controllers: controllers.to_vec(),
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            lp_backend: "microlp 0.6".to_string(),
            rng: "ChaCha8 (rand_chacha 0.3), seed_from_u64".to_string(),
            files: Vec::new(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), ExperimentError> {
        std::fs::write(path, toml::to_string(self)?)?;
        Ok(())
    }
}
