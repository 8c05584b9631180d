use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use stochvsl::experiment::{
    run_comparison, run_sd_sweep, run_single, write_sweep_csv, Comparison, ExperimentConfig, Manifest, RunResult,
};
use stochvsl::milp::{export_model, ModelFormat};
use stochvsl::rolling::{run_closed_loop, ControllerKind};
use stochvsl::stochastic::{build_deterministic_equivalent, DemandDistribution};

#[derive(Parser)]
#[command(name = "stochvsl", version, about = "Two-stage boundary-flow and speed-limit control on a freeway corridor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one controller on one seeded demand stream.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "two-stage")]
        controller: ControllerKind,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run all four controllers on every seed and tabulate the metrics.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seeds: SeedArgs,
    },
    /// Repeat the comparison over symmetric demand distributions.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seeds: SeedArgs,
        /// Probabilities of the extreme levels (default: the config's grid).
        #[arg(long, value_delimiter = ',')]
        p: Vec<f64>,
    },
    /// Write one planning model as an LP or MPS file.
    ExportMilp {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "two-stage")]
        controller: ControllerKind,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Number of demand periods simulated before the exported window.
        #[arg(long, default_value_t = 0)]
        period: usize,
        /// Output file; the format follows the extension (.lp or .mps).
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// `case_study` or a path to a TOML file.
    #[arg(long, default_value = "case_study")]
    config: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the number of demand periods.
    #[arg(long)]
    horizons: Option<usize>,
    #[arg(long)]
    gap: Option<f64>,
    #[arg(long)]
    node_limit: Option<usize>,
    /// Seconds per solve.
    #[arg(long)]
    time_limit: Option<f64>,
}

#[derive(Args)]
struct SeedArgs {
    /// Number of seeds (default: the config's).
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    first_seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config).with_context(|| format!("loading {}", self.config))?;
        if let Some(h) = self.horizons {
            cfg.horizons = h;
        }
        if let Some(g) = self.gap {
            cfg.solver.relative_gap = g;
        }
        if let Some(n) = self.node_limit {
            cfg.solver.node_limit = Some(n);
        }
        if let Some(t) = self.time_limit {
            cfg.solver.time_limit_secs = Some(t);
        }
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

impl SeedArgs {
    fn resolve(&self, cfg: &mut ExperimentConfig) -> Vec<u64> {
        if let Some(n) = self.seeds {
            cfg.seeds = n;
        }
        if let Some(s) = self.first_seed {
            cfg.first_seed = s;
        }
        cfg.seed_list()
    }
}

fn create(dir: &Path, name: &str, manifest: &mut Manifest) -> Result<BufWriter<File>> {
    manifest.files.push(name.to_string());
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn simulate(common: &Common, controller: ControllerKind, seed: u64) -> Result<()> {
    let cfg = common.load()?;
    let dir = common.out_dir()?;
    let corridor = cfg.corridor()?;
    let run: RunResult = run_single(&cfg, &corridor, controller, seed)?;
    let mut manifest = Manifest::new("simulate", &cfg, &[seed], &[controller])?;
    run.trajectory.write_links_csv(create(dir, "links.csv", &mut manifest)?)?;
    run.trajectory.write_boundary_csv(create(dir, "boundary.csv", &mut manifest)?)?;
    run.trajectory.write_solves_csv(create(dir, "solves.csv", &mut manifest)?)?;
    let cmp = Comparison { runs: vec![run] };
    cmp.write_metrics_csv(create(dir, "metrics.csv", &mut manifest)?)?;
    manifest.write(&dir.join("manifest.toml"))?;
    let m = &cmp.runs[0].metrics;
    println!(
        "{} seed {}: block {:.4}  fluctuation {:.4}  combined {:.4}  throughput {:.1} veh",
        controller.name(),
        seed,
        m.block,
        m.fluctuation,
        m.combined(),
        m.throughput
    );
    Ok(())
}

fn compare(common: &Common, seeds: &SeedArgs) -> Result<()> {
    let mut cfg = common.load()?;
    let seeds = seeds.resolve(&mut cfg);
    let dir = common.out_dir()?;
    let cmp = run_comparison(&cfg, &seeds, &ControllerKind::ALL)?;
    let mut manifest = Manifest::new("compare", &cfg, &seeds, &ControllerKind::ALL)?;
    cmp.write_metrics_csv(create(dir, "metrics.csv", &mut manifest)?)?;
    cmp.write_fluctuations_csv(create(dir, "fluctuations.csv", &mut manifest)?)?;
    cmp.write_queues_csv(create(dir, "queues.csv", &mut manifest)?)?;
    manifest.write(&dir.join("manifest.toml"))?;
    println!("{:<10} {:>12} {:>12} {:>12} {:>14}", "controller", "block", "fluctuation", "combined", "throughput");
    for (k, t) in cmp.totals() {
        println!(
            "{:<10} {:>12.4} {:>12.4} {:>12.4} {:>14.1}",
            k.name(),
            t.block,
            t.fluctuation,
            t.combined(),
            t.throughput
        );
    }
    for k in [ControllerKind::DMin, ControllerKind::DMean, ControllerKind::DMax] {
        if let Some(r) = cmp.reduction_vs(k) {
            println!("two-stage vs {}: {:.1}% lower combined metric", k.name(), 100.0 * r);
        }
    }
    Ok(())
}

fn sweep(common: &Common, seeds: &SeedArgs, p: &[f64]) -> Result<()> {
    let mut cfg = common.load()?;
    let seeds = seeds.resolve(&mut cfg);
    let grid = if p.is_empty() { cfg.sweep.probabilities.clone() } else { p.to_vec() };
    if let Some(bad) = grid.iter().find(|p| !(0.0..=0.5).contains(*p)) {
        bail!("sweep probability {bad} outside [0, 0.5]");
    }
    let dir = common.out_dir()?;
    let rows = run_sd_sweep(&cfg, &grid, &seeds)?;
    let mut manifest = Manifest::new("sweep", &cfg, &seeds, &ControllerKind::ALL)?;
    write_sweep_csv(&rows, create(dir, "sweep.csv", &mut manifest)?)?;
    manifest.write(&dir.join("manifest.toml"))?;
    println!("{:>5} {:>7} {:<10} {:>12} {:>12} {:>12}", "p", "sd", "controller", "block", "fluctuation", "combined");
    for r in &rows {
        println!(
            "{:>5} {:>7.3} {:<10} {:>12.4} {:>12.4} {:>12.4}",
            r.p,
            r.sd,
            r.controller.name(),
            r.totals.block,
            r.totals.fluctuation,
            r.totals.combined()
        );
    }
    Ok(())
}

fn export(common: &Common, controller: ControllerKind, seed: u64, period: usize, output: &Path) -> Result<()> {
    let mut cfg = common.load()?;
    let format = ModelFormat::from_extension(output).context("output must end in .lp or .mps")?;
    let corridor = cfg.corridor()?;
    cfg.horizons = period;
    let stream = stochvsl::experiment::sample_demand_stream(&cfg.demand, period, seed);
    let traj = run_closed_loop(&corridor, &stream, controller, &cfg.closed_loop())?;
    let state = traj.final_state(&corridor);
    let dist: DemandDistribution = controller.planning_distribution(&cfg.demand);
    let model = build_deterministic_equivalent(&corridor, &state, &dist, &cfg.weights)?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    export_model(&model.lp, output, format)?;
    println!(
        "wrote {} ({} variables, {} binaries, {} rows)",
        output.display(),
        model.lp.num_variables(),
        model.lp.num_binaries(),
        model.lp.num_constraints()
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Simulate { common, controller, seed } => simulate(common, *controller, *seed),
        Command::Compare { common, seeds } => compare(common, seeds),
        Command::Sweep { common, seeds, p } => sweep(common, seeds, p),
        Command::ExportMilp { common, controller, seed, period, output } => {
            export(common, *controller, *seed, *period, output)
        }
    }
}
