use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use swarmfield::config::MissionConfig;
use swarmfield::grid::{normalize, ScalarField};
use swarmfield::mission::{
    export, export_series, multiplicative_injector, run_density_loop, run_mission, DensityLoopConfig, ErrorPattern,
    MissionLog, Outcome,
};
use swarmfield::planner::{grg_solve, ReferenceTrajectory};

#[derive(Parser)]
#[command(name = "swarmfield", version, about = "Swarm field-mapping simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Mission config file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: `paper` or `fast`.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<MissionConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => MissionConfig::load(path)?,
            (None, Some(name)) => MissionConfig::preset(name).with_context(|| format!("unknown preset `{name}`"))?,
            (None, None) => bail!("pass --config <file> or --preset <name>"),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EpsMode {
    Smooth,
    Wave,
    Constant,
}

impl From<EpsMode> for ErrorPattern {
    fn from(m: EpsMode) -> Self {
        match m {
            EpsMode::Smooth => ErrorPattern::Smooth,
            EpsMode::Wave => ErrorPattern::Wave,
            EpsMode::Constant => ErrorPattern::Constant,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a full mission and write its artifacts.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Solve one planning problem between two density files (field CSV).
    Plan {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        p0: PathBuf,
        #[arg(long)]
        pf: PathBuf,
        /// Planning horizon; defaults to the config period.
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long, default_value = "plan")]
        out: PathBuf,
    },
    /// Density-level closed loop toward the uniform density, with an injected
    /// multiplicative estimation error.
    Track {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0.0)]
        eps_mag: f64,
        #[arg(long, value_enum, default_value = "smooth")]
        eps_mode: EpsMode,
        /// Relative amplitude of the initial cosine perturbation.
        #[arg(long, default_value_t = 0.3)]
        amplitude: f64,
        #[arg(long, default_value_t = 100.0)]
        horizon: f64,
        #[arg(long, default_value = "track")]
        out: PathBuf,
    },
    /// Regenerate the CSV series from a mission.json.
    ExportPlots {
        #[arg(long)]
        mission: PathBuf,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

fn read_field(path: &Path) -> anyhow::Result<ScalarField> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(normalize(&ScalarField::from_csv(&text)?)?)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = config.load()?;
            info!("config hash {}", cfg.canonical_hash());
            let run = run_mission(&cfg)?;
            export(&run, &out)?;
            let log = &run.log;
            println!(
                "{:?} after {} outer periods; sup uncertainty {:.4}; prediction error {:.4}",
                log.outcome,
                log.outer_periods,
                log.periods.last().map_or(f64::NAN, |p| p.sup_uncertainty),
                log.periods.last().map_or(f64::NAN, |p| p.prediction_error),
            );
            Ok(match log.outcome {
                Outcome::Success => ExitCode::SUCCESS,
                Outcome::Cap => ExitCode::from(2),
                Outcome::Incomplete => {
                    eprintln!("error: {}", log.error.as_deref().unwrap_or("unknown"));
                    ExitCode::from(1)
                }
            })
        }
        Command::Plan { config, p0, pf, horizon, out } => {
            let cfg = config.load()?;
            let p0 = read_field(&p0)?;
            let pf = read_field(&pf)?;
            let plan = grg_solve(&p0, &pf, 0.0, horizon.unwrap_or(cfg.period), &cfg.planner_config())?;
            let planner = cfg.planner_config();
            plan.export_dir(&out, &cfg.canonical_hash(), &planner.weights)?;
            println!("J = {:.6e} after {} iterations ({:?})", plan.cost, plan.history.len(), plan.stop);
            Ok(ExitCode::SUCCESS)
        }
        Command::Track { config, eps_mag, eps_mode, amplitude, horizon, out } => {
            let cfg = config.load()?;
            let grid = cfg.grid();
            let p_r = ScalarField::uniform_density(grid);
            let shape = ErrorPattern::Smooth.field(grid, amplitude);
            let p0 = normalize(&shape.map(|v| 1.0 + v))?;
            let reference = ReferenceTrajectory::stationary(p_r, 0.0, horizon)?;
            let mut loop_cfg = DensityLoopConfig {
                controller: cfg.controller_config(),
                cfl_target: cfg.pde.cfl_target,
                dt_pde: cfg.pde.dt_pde,
                checkpoints: Some((1..=200).map(|k| horizon * k as f64 / 200.0).collect()),
            };
            loop_cfg.controller.v_max = None;
            let mut inject = multiplicative_injector(ErrorPattern::from(eps_mode).field(grid, eps_mag));
            let series = run_density_loop(&p0, &reference, &loop_cfg, Some(&mut inject))?;
            fs::create_dir_all(&out)?;
            let mut csv = String::from("t,phi_norm,lyapunov\n");
            for ((t, n), v) in series.times.iter().zip(&series.phi_norm).zip(&series.lyapunov) {
                csv.push_str(&format!("{t:?},{n:?},{v:?}\n"));
            }
            fs::write(out.join("track.csv"), csv)?;
            println!(
                "|Phi| {:.4e} -> {:.4e}",
                series.phi_norm[0],
                series.phi_norm.last().copied().unwrap_or(f64::NAN)
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::ExportPlots { mission, out } => {
            let log = MissionLog::load(&mission)?;
            export_series(&log, &out)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
