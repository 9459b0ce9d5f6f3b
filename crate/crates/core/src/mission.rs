//! The deployment loop. Outer level: regress the field, turn the predictive
//! uncertainty into a target density and plan a reference toward it. Inner level:
//! every `dt`, estimate the swarm density, command the feedback velocity, move the
//! agents and record their measurements. Also the density-level harness used to
//! check the closed loop without agents.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{trajectory_csv, Dataset, GroundTruth, SwarmState};
use crate::controller::{estimated_feedback, ControllerConfig};
use crate::density::estimate_density;
use crate::error::{Error, Result};
use crate::gp::{stratified_subsample, sup_uncertainty, target_density, GpPosterior};
use crate::grid::{integrate, Grid, ScalarField, VectorField};
use crate::pde::{solve_fokker_planck, Feedback, PdeRunConfig, Trajectory};
use crate::planner::{grg_solve, symmetric_kl, ReferenceTrajectory, StopReason};
use crate::rng::derive_seed;

pub use crate::config::MissionConfig;

const SEED_AGENTS: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Sup uncertainty fell to `gamma` or below.
    Success,
    /// `max_outer` periods ran without reaching `gamma`.
    Cap,
    /// An error aborted the run; the log holds everything up to it.
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub period: usize,
    /// First 16 hex digits of SHA-256 over the agent positions.
    pub positions_digest: String,
    /// Mean and max of `|v|` over the grid.
    pub v_mean: f64,
    pub v_max: f64,
    /// `||p_hat - p_r||_L2`
    pub tracking_error: f64,
    /// `0.5 int (p_hat - p_r)^2`
    pub lyapunov: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub t_start: f64,
    pub cost_history: Vec<f64>,
    pub grad_history: Vec<f64>,
    pub stop: StopReason,
    pub residual: f64,
    /// Symmetric KL between the planned end density and the target.
    pub terminal_kl: f64,
    /// Directory of the exported reference, relative to the mission output.
    pub reference_dir: String,
}

/// State after a GP refit. Entry 0 is the initial batch, entry `k` closes period `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodRecord {
    pub period: usize,
    pub t: f64,
    pub dataset_size: usize,
    /// Records actually used by the GP after subsampling.
    pub gp_points: usize,
    pub gp_jitter: f64,
    /// Sup of the configured statistic; this is what `gamma` is compared with.
    pub sup_uncertainty: f64,
    pub sup_variance: f64,
    pub sup_std: f64,
    pub prediction_error: f64,
    pub plan: Option<PlanRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionLog {
    pub config_hash: String,
    pub seed: u64,
    pub config: MissionConfig,
    pub outcome: Outcome,
    pub error: Option<String>,
    pub outer_periods: usize,
    pub periods: Vec<PeriodRecord>,
    pub steps: Vec<StepRecord>,
}

impl MissionLog {
    pub fn sup_uncertainty_series(&self) -> Vec<f64> {
        self.periods.iter().map(|p| p.sup_uncertainty).collect()
    }

    pub fn prediction_error_series(&self) -> Vec<f64> {
        self.periods.iter().map(|p| p.prediction_error).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mission log serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse("mission.json", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// The four field rows plotted per period, plus the commanded velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub period: usize,
    pub t: f64,
    pub p_hat: ScalarField,
    pub p_r: ScalarField,
    pub gp_mean: ScalarField,
    pub uncertainty: ScalarField,
    pub velocity: VectorField,
}

/// Bulk outputs kept out of `mission.json`.
#[derive(Debug, Clone, Default)]
pub struct MissionArtifacts {
    pub snapshots: Vec<Snapshot>,
    /// One reference per period, density thinned to the interval boundaries.
    pub references: Vec<ReferenceTrajectory>,
    pub dataset: Dataset,
    pub positions: Vec<(f64, Vec<[f64; 2]>)>,
}

#[derive(Debug, Clone)]
pub struct MissionRun {
    pub log: MissionLog,
    pub artifacts: MissionArtifacts,
}

/// `||f - mean||_L2` with the truth sampled at cell centers.
pub fn prediction_error(gp_mean: &ScalarField, truth: &GroundTruth) -> f64 {
    let f = ScalarField::from_fn(*gp_mean.grid(), |x| truth.eval(x));
    let d = f.sub(gp_mean).expect("same grid");
    integrate(&d.mul(&d).expect("same grid")).sqrt()
}

fn positions_digest(positions: &[[f64; 2]]) -> String {
    let mut h = Sha256::new();
    for p in positions {
        h.update(p[0].to_le_bytes());
        h.update(p[1].to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

struct Regression {
    mean: ScalarField,
    uncertainty: ScalarField,
    record: PeriodRecord,
}

struct Mission<'a> {
    cfg: &'a MissionConfig,
    grid: Grid,
    ctrl: ControllerConfig,
    swarm: SwarmState,
    log: MissionLog,
    art: MissionArtifacts,
}

impl<'a> Mission<'a> {
    fn regress(&self, period: usize) -> Result<Regression> {
        let data = &self.art.dataset;
        let positions = data.positions();
        let keep = stratified_subsample(&positions, self.cfg.gp.cap, &self.grid, self.cfg.gp.strata);
        let inputs: Vec<[f64; 2]> = keep.iter().map(|&i| positions[i]).collect();
        let targets: Vec<f64> = keep.iter().map(|&i| data.records[i].y).collect();
        let gp = GpPosterior::fit(inputs, targets, self.cfg.gp_hyper())?;
        let (mean, variance) = gp.predict(&self.grid);
        let uncertainty = self.cfg.uncertainty.apply(&variance);
        let record = PeriodRecord {
            period,
            t: self.swarm.time(),
            dataset_size: data.len(),
            gp_points: gp.len(),
            gp_jitter: gp.jitter(),
            sup_uncertainty: sup_uncertainty(&uncertainty),
            sup_variance: sup_uncertainty(&variance),
            sup_std: sup_uncertainty(&variance).max(0.0).sqrt(),
            prediction_error: prediction_error(&mean, &self.cfg.truth),
            plan: None,
        };
        Ok(Regression {
            mean,
            uncertainty,
            record,
        })
    }

    fn measure(&mut self) -> Result<()> {
        let batch = self.swarm.measure(&self.cfg.truth, self.cfg.noise_var)?;
        self.art.dataset.extend(batch);
        Ok(())
    }

    fn run(&mut self) -> Result<()> {
        let cfg = self.cfg;
        self.art.positions.push((self.swarm.time(), self.swarm.positions().to_vec()));
        self.measure()?;
        let mut reg = self.regress(0)?;
        let p_hat = estimate_density(self.swarm.positions(), &cfg.kde_config(), &self.grid)?;
        self.art.snapshots.push(Snapshot {
            period: 0,
            t: self.swarm.time(),
            p_r: p_hat.clone(),
            p_hat,
            gp_mean: reg.mean.clone(),
            uncertainty: reg.uncertainty.clone(),
            velocity: VectorField::zeros(self.grid),
        });
        let mut sup = reg.record.sup_uncertainty;
        self.log.periods.push(reg.record.clone());
        info!("initial batch: sup uncertainty {sup:.4}, prediction error {:.4}", reg.record.prediction_error);

        let steps = cfg.steps_per_period();
        let planner = cfg.planner_config();
        let sigma = self.ctrl.sigma.clone();
        while sup > cfg.gamma && self.log.outer_periods < cfg.max_outer {
            let period = self.log.outer_periods + 1;
            let t_c = self.swarm.time();
            let p_f = target_density(&reg.uncertainty, cfg.eta);
            let p0 = estimate_density(self.swarm.positions(), &cfg.kde_config(), &self.grid)?;
            let plan = grg_solve(&p0, &p_f, t_c, cfg.period, &planner)?;
            if plan.line_search_stalled() {
                warn!("period {period}: planner line search stalled at J = {:.4e}", plan.cost);
            }
            let terminal_kl = symmetric_kl(plan.p_r.last(), &p_f, planner.weights.kl_floor_rel / self.grid.area())?;
            let schedule = plan.velocity.schedule(&self.grid);
            let plan_record = PlanRecord {
                t_start: t_c,
                cost_history: plan.history.iter().map(|h| h.cost).collect(),
                grad_history: plan.history.iter().map(|h| h.grad_norm).collect(),
                stop: plan.stop,
                residual: plan.residual,
                terminal_kl,
                reference_dir: format!("plans/period_{period:03}"),
            };

            let mut velocity = VectorField::zeros(self.grid);
            let mut p_r_end = plan.p_r.last().clone();
            for s in 0..steps {
                let t = t_c + s as f64 * cfg.dt;
                let p_hat = estimate_density(self.swarm.positions(), &cfg.kde_config(), &self.grid)?;
                let p_r = plan.density_at(t);
                let v_r = schedule.at(t);
                velocity = estimated_feedback(&p_hat, p_r, v_r, &self.ctrl)?;
                let phi = p_hat.sub(p_r)?;
                let speed = velocity.magnitude();
                self.log.steps.push(StepRecord {
                    t,
                    period,
                    positions_digest: positions_digest(self.swarm.positions()),
                    v_mean: integrate(&speed) / self.grid.area(),
                    v_max: speed.max(),
                    tracking_error: phi.l2_norm(),
                    lyapunov: 0.5 * integrate(&phi.mul(&phi)?),
                });
                self.swarm.step(&velocity, &sigma, cfg.dt)?;
                self.measure()?;
                self.art.positions.push((self.swarm.time(), self.swarm.positions().to_vec()));
                p_r_end = plan.density_at(t + cfg.dt).clone();
            }

            reg = self.regress(period)?;
            reg.record.plan = Some(plan_record);
            sup = reg.record.sup_uncertainty;
            info!(
                "period {period}: {} records, sup uncertainty {sup:.4}, prediction error {:.4}",
                reg.record.dataset_size, reg.record.prediction_error
            );
            self.log.periods.push(reg.record.clone());
            self.log.outer_periods = period;
            self.art.snapshots.push(Snapshot {
                period,
                t: self.swarm.time(),
                p_hat: estimate_density(self.swarm.positions(), &cfg.kde_config(), &self.grid)?,
                p_r: p_r_end,
                gp_mean: reg.mean.clone(),
                uncertainty: reg.uncertainty.clone(),
                velocity,
            });
            let mut kept = plan;
            kept.p_r = kept.p_r.thinned(&kept.velocity.breaks);
            self.art.references.push(kept);
        }
        self.log.outcome = if sup <= cfg.gamma { Outcome::Success } else { Outcome::Cap };
        Ok(())
    }
}

/// Runs the full mission. Errors do not propagate: they end the run and are
/// recorded in the log, whose outcome is then [`Outcome::Incomplete`].
pub fn run_mission(cfg: &MissionConfig) -> Result<MissionRun> {
    cfg.validate()?;
    let grid = cfg.grid();
    let swarm = SwarmState::init_uniform(&grid, cfg.init_region, cfg.n, derive_seed(cfg.seed, SEED_AGENTS))?;
    let mut mission = Mission {
        cfg,
        grid,
        ctrl: cfg.controller_config(),
        swarm,
        log: MissionLog {
            config_hash: cfg.canonical_hash(),
            seed: cfg.seed,
            config: cfg.clone(),
            outcome: Outcome::Incomplete,
            error: None,
            outer_periods: 0,
            periods: Vec::new(),
            steps: Vec::new(),
        },
        art: MissionArtifacts {
            dataset: Dataset::new(cfg.noise_var),
            ..MissionArtifacts::default()
        },
    };
    if let Err(e) = mission.run() {
        warn!("mission aborted: {e}");
        mission.log.outcome = Outcome::Incomplete;
        mission.log.error = Some(e.to_string());
    }
    Ok(MissionRun {
        log: mission.log,
        artifacts: mission.art,
    })
}

/// Options of the density-level closed loop.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityLoopConfig {
    pub controller: ControllerConfig,
    pub cfl_target: f64,
    pub dt_pde: Option<f64>,
    /// Output times; `None` records every solver step.
    pub checkpoints: Option<Vec<f64>>,
}

impl Default for DensityLoopConfig {
    fn default() -> Self {
        DensityLoopConfig {
            controller: ControllerConfig::default(),
            cfl_target: 0.5,
            dt_pde: None,
            checkpoints: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityLoopSeries {
    pub times: Vec<f64>,
    /// `||p - p_r||_L2`
    pub phi_norm: Vec<f64>,
    /// `0.5 int (p - p_r)^2`
    pub lyapunov: Vec<f64>,
    pub densities: Trajectory,
}

/// Maps the true density to the estimate the controller sees.
pub type Injector<'a> = &'a mut dyn FnMut(&ScalarField, f64) -> ScalarField;

/// Fokker–Planck dynamics under the feedback law, bypassing agents and KDE. The
/// injector (identity when `None`) supplies the density estimate at each step.
pub fn run_density_loop(
    p0: &ScalarField,
    reference: &ReferenceTrajectory,
    cfg: &DensityLoopConfig,
    injector: Option<Injector<'_>>,
) -> Result<DensityLoopSeries> {
    cfg.controller.validate()?;
    let grid = *p0.grid();
    grid.check_same(reference.p_r.grid())?;
    let schedule = reference.velocity.schedule(&grid);
    let ctrl = &cfg.controller;
    let mut inject = injector;
    let mut provider = Feedback(
        |p: &ScalarField, t: f64| {
            let p_hat = match inject.as_mut() {
                Some(f) => f(p, t),
                None => p.clone(),
            };
            estimated_feedback(&p_hat, reference.density_at(t), schedule.at(t), ctrl)
        },
        ctrl.alpha.max(),
    );
    let run = PdeRunConfig {
        cfl_target: cfg.cfl_target,
        dt_pde: cfg.dt_pde,
        t_start: reference.velocity.t_start(),
        t_end: reference.velocity.t_end(),
        checkpoints: cfg.checkpoints.clone(),
    };
    let densities = solve_fokker_planck(p0, &mut provider, &ctrl.sigma, &run)?;
    let mut phi_norm = Vec::with_capacity(densities.len());
    let mut lyapunov = Vec::with_capacity(densities.len());
    for (t, p) in densities.times.iter().zip(&densities.fields) {
        let phi = p.sub(reference.density_at(*t))?;
        phi_norm.push(phi.l2_norm());
        lyapunov.push(0.5 * integrate(&phi.mul(&phi)?));
    }
    Ok(DensityLoopSeries {
        times: densities.times.clone(),
        phi_norm,
        lyapunov,
        densities,
    })
}

/// Shape of an injected multiplicative estimation error `p_hat = p (1 + eps)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorPattern {
    /// `cos(pi x1 / b) cos(pi x2 / c)`
    Smooth,
    /// `sin(2 pi x1 / b) sin(pi x2 / c)`
    Wave,
    Constant,
}

impl ErrorPattern {
    /// The pattern scaled so its largest cell value in magnitude is `magnitude`.
    pub fn field(&self, grid: Grid, magnitude: f64) -> ScalarField {
        use std::f64::consts::PI;
        let shape = match self {
            ErrorPattern::Smooth => ScalarField::from_fn(grid, |x| (PI * x[0] / grid.b).cos() * (PI * x[1] / grid.c).cos()),
            ErrorPattern::Wave => {
                ScalarField::from_fn(grid, |x| (2.0 * PI * x[0] / grid.b).sin() * (PI * x[1] / grid.c).sin())
            }
            ErrorPattern::Constant => ScalarField::constant(grid, 1.0),
        };
        let m = shape.max_abs();
        shape.map(|v| magnitude * v / m)
    }
}

/// Injector returning `p (1 + eps)`.
pub fn multiplicative_injector(eps: ScalarField) -> impl FnMut(&ScalarField, f64) -> ScalarField {
    move |p, _t| p.zip_map(&eps, |a, e| a * (1.0 + e)).expect("same grid")
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// `prediction_error.csv` and `tracking_error.csv` from the log alone.
pub fn export_series(log: &MissionLog, out_dir: &Path) -> Result<()> {
    create_dir(out_dir)?;
    let mut pe = String::from("period,t,dataset_size,prediction_error,sup_uncertainty,sup_variance,sup_std\n");
    for p in &log.periods {
        pe.push_str(&format!(
            "{},{:?},{},{:?},{:?},{:?},{:?}\n",
            p.period, p.t, p.dataset_size, p.prediction_error, p.sup_uncertainty, p.sup_variance, p.sup_std
        ));
    }
    write(out_dir.join("prediction_error.csv"), &pe)?;
    let mut te = String::from("t,period,tracking_error,lyapunov,v_mean,v_max\n");
    for s in &log.steps {
        te.push_str(&format!(
            "{:?},{},{:?},{:?},{:?},{:?}\n",
            s.t, s.period, s.tracking_error, s.lyapunov, s.v_mean, s.v_max
        ));
    }
    write(out_dir.join("tracking_error.csv"), &te)
}

/// Writes `mission.json`, the CSV series, per-period field snapshots, the agent
/// trajectory, the measurements and every planned reference.
pub fn export(run: &MissionRun, out_dir: &Path) -> Result<()> {
    create_dir(out_dir)?;
    write(out_dir.join("mission.json"), &run.log.to_json())?;
    export_series(&run.log, out_dir)?;
    write(out_dir.join("measurements.csv"), &run.artifacts.dataset.to_csv())?;
    write(out_dir.join("trajectory.csv"), &trajectory_csv(&run.artifacts.positions))?;
    for snap in &run.artifacts.snapshots {
        let dir = out_dir.join("snapshots").join(format!("period_{:03}", snap.period));
        create_dir(&dir)?;
        write(dir.join("p_hat.csv"), &snap.p_hat.to_csv())?;
        write(dir.join("p_r.csv"), &snap.p_r.to_csv())?;
        write(dir.join("gp_mean.csv"), &snap.gp_mean.to_csv())?;
        write(dir.join("uncertainty.csv"), &snap.uncertainty.to_csv())?;
        write(dir.join("velocity.csv"), &snap.velocity.to_csv())?;
    }
    let weights = run.log.config.planner_config().weights;
    for (k, reference) in run.artifacts.references.iter().enumerate() {
        let dir = out_dir.join("plans").join(format!("period_{:03}", k + 1));
        reference.export_dir(&dir, &run.log.config_hash, &weights)?;
    }
    Ok(())
}
