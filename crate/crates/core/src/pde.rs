//! Explicit finite-volume solvers on the cell-centered grid.
//!
//! * [`solve_transport`]: `dp/dt = -div(v p)` with zero flux through the walls.
//! * [`solve_fokker_planck`]: `dp/dt = -div(v p) + lap(sigma p)`, reflecting walls,
//!   with `v` either a time schedule or a feedback of the current density.
//! * [`solve_costate`]: the backward co-state equation `dl/dt = dL/dp - grad(l).v`,
//!   discretized as the exact transpose of the transport step.
//! * [`solve_diffusion`]: `dphi/dt = div(alpha grad phi)` with zero normal flux.
//!
//! All fluxes live on interior faces; a face velocity is the mean of the two adjacent
//! cell velocities and advection is first-order upwind. Every update is a telescoping
//! sum of face fluxes, so mass changes only by round-off.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{integrate, Coefficient, Grid, ScalarField, VectorField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeRunConfig {
    /// Fraction of the stability limit used when the step is chosen automatically.
    pub cfl_target: f64,
    /// Forced maximum step; rejected if it exceeds the stability limit.
    pub dt_pde: Option<f64>,
    pub t_start: f64,
    pub t_end: f64,
    /// Output times besides `t_start` and `t_end`; `None` records every step.
    pub checkpoints: Option<Vec<f64>>,
}

impl PdeRunConfig {
    pub fn new(t_start: f64, t_end: f64) -> Self {
        PdeRunConfig {
            cfl_target: 0.5,
            dt_pde: None,
            t_start,
            t_end,
            checkpoints: None,
        }
    }

    pub fn with_checkpoints(mut self, times: Vec<f64>) -> Self {
        self.checkpoints = Some(times);
        self
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt_pde = Some(dt);
        self
    }

    pub fn with_cfl(mut self, cfl: f64) -> Self {
        self.cfl_target = cfl;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cfl_target > 0.0 && self.cfl_target <= 0.9) {
            return Err(Error::validation("pde.cfl_target", "must satisfy 0 < cfl_target <= 0.9"));
        }
        if let Some(dt) = self.dt_pde {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::validation("pde.dt_pde", "must be > 0"));
            }
        }
        if !(self.t_end >= self.t_start && self.t_start.is_finite() && self.t_end.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "horizon [{}, {}] is not ordered",
                self.t_start, self.t_end
            )));
        }
        Ok(())
    }

    fn output_times(&self) -> Vec<f64> {
        let mut times: Vec<f64> = self
            .checkpoints
            .iter()
            .flatten()
            .copied()
            .filter(|&t| t > self.t_start && t < self.t_end)
            .collect();
        times.push(self.t_end);
        times.sort_by(f64::total_cmp);
        times.dedup();
        times
    }
}

/// Fields sampled at increasing times.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub fields: Vec<ScalarField>,
}

/// A trajectory whose entries are probability densities.
pub type DensityTrajectory = Trajectory;

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn grid(&self) -> &Grid {
        self.fields[0].grid()
    }

    pub fn last(&self) -> &ScalarField {
        self.fields.last().expect("trajectory is never empty")
    }

    /// Latest stored field at or before `t` (the first field for earlier times).
    pub fn at_or_before(&self, t: f64) -> &ScalarField {
        let idx = self.times.partition_point(|&s| s <= t + 1e-9 * (1.0 + t.abs()));
        &self.fields[idx.saturating_sub(1)]
    }

    /// Nearest stored time to `t`.
    pub fn nearest(&self, t: f64) -> (f64, &ScalarField) {
        let k = self
            .times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map(|(k, _)| k)
            .expect("trajectory is never empty");
        (self.times[k], &self.fields[k])
    }

    /// Keeps only entries whose time is (within 1e-9) one of `times`.
    pub fn thinned(&self, times: &[f64]) -> Trajectory {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&k| times.iter().any(|&t| (self.times[k] - t).abs() <= 1e-9 * (1.0 + t.abs())))
            .collect();
        Trajectory {
            times: keep.iter().map(|&k| self.times[k]).collect(),
            fields: keep.iter().map(|&k| self.fields[k].clone()).collect(),
        }
    }

    /// Writes `field_NNNNN.csv` files plus `manifest.json` into `dir`.
    pub fn export_dir(&self, dir: &Path, config_hash: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::with_capacity(self.len());
        for (k, f) in self.fields.iter().enumerate() {
            let name = format!("field_{k:05}.csv");
            let path = dir.join(&name);
            fs::write(&path, f.to_csv()).map_err(|e| Error::io(&path, e))?;
            files.push(name);
        }
        let manifest = TrajectoryManifest {
            times: self.times.clone(),
            grid: *self.grid(),
            config_hash: config_hash.to_string(),
            files,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: &Path) -> Result<(Trajectory, String)> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: TrajectoryManifest =
            serde_json::from_str(&text).map_err(|e| Error::parse("trajectory manifest", e))?;
        let mut fields = Vec::with_capacity(manifest.files.len());
        for name in &manifest.files {
            let path = dir.join(name);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let f = ScalarField::from_csv(&text)?;
            manifest.grid.check_same(f.grid())?;
            fields.push(f);
        }
        if fields.len() != manifest.times.len() || fields.is_empty() {
            return Err(Error::parse("trajectory manifest", "times and files disagree"));
        }
        Ok((
            Trajectory {
                times: manifest.times,
                fields,
            },
            manifest.config_hash,
        ))
    }
}

#[derive(Serialize, Deserialize)]
struct TrajectoryManifest {
    times: Vec<f64>,
    grid: Grid,
    config_hash: String,
    files: Vec<String>,
}

/// Piecewise-constant-in-time velocity: `fields[l]` acts on `[breaks[l], breaks[l+1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocitySchedule {
    pub breaks: Vec<f64>,
    pub fields: Vec<VectorField>,
}

impl VelocitySchedule {
    pub fn new(breaks: Vec<f64>, fields: Vec<VectorField>) -> Result<Self> {
        if fields.is_empty() || breaks.len() != fields.len() + 1 {
            return Err(Error::ShapeMismatch(format!(
                "{} breaks for {} velocity fields",
                breaks.len(),
                fields.len()
            )));
        }
        if breaks.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("velocity breaks must increase".into()));
        }
        let grid = *fields[0].grid();
        for f in &fields {
            grid.check_same(f.grid())?;
            if !f.is_finite() {
                return Err(Error::InvalidArgument("velocity schedule is not finite".into()));
            }
        }
        Ok(VelocitySchedule { breaks, fields })
    }

    pub fn constant(field: VectorField, t0: f64, t1: f64) -> Result<Self> {
        Self::new(vec![t0, t1], vec![field])
    }

    pub fn grid(&self) -> &Grid {
        self.fields[0].grid()
    }

    pub fn segment(&self, t: f64) -> usize {
        let idx = self.breaks.partition_point(|&b| b <= t);
        idx.saturating_sub(1).min(self.fields.len() - 1)
    }

    pub fn at(&self, t: f64) -> &VectorField {
        &self.fields[self.segment(t)]
    }
}

/// Source of the advecting velocity for [`solve_fokker_planck`].
pub trait VelocityProvider {
    /// Velocity acting from time `t` given the current density `p`.
    fn velocity(&mut self, p: &ScalarField, t: f64) -> Result<VectorField>;

    /// Open-loop providers expose their schedule so steps can align with its breaks.
    fn schedule(&self) -> Option<&VelocitySchedule> {
        None
    }

    /// Diffusivity the closed loop effectively adds (a density feedback law with gain
    /// `alpha` acts like explicit diffusion); enters the stable step bound.
    fn loop_diffusivity(&self) -> f64 {
        0.0
    }
}

impl VelocityProvider for VelocitySchedule {
    fn velocity(&mut self, _p: &ScalarField, t: f64) -> Result<VectorField> {
        Ok(self.at(t).clone())
    }

    fn schedule(&self) -> Option<&VelocitySchedule> {
        Some(self)
    }
}

/// Closed-loop provider: the velocity is recomputed from the density every step.
/// The second field is the loop diffusivity reported to the step bound.
pub struct Feedback<F>(pub F, pub f64);

impl<F> VelocityProvider for Feedback<F>
where
    F: FnMut(&ScalarField, f64) -> Result<VectorField>,
{
    fn velocity(&mut self, p: &ScalarField, t: f64) -> Result<VectorField> {
        (self.0)(p, t)
    }

    fn loop_diffusivity(&self) -> f64 {
        self.1
    }
}

/// Velocities on interior faces: `ux` has `(nx-1) * ny` entries, `uy` has `nx * (ny-1)`.
#[derive(Debug, Clone)]
pub(crate) struct FaceVelocity {
    pub ux: Vec<f64>,
    pub uy: Vec<f64>,
}

impl FaceVelocity {
    pub fn from_cells(v: &VectorField) -> Self {
        let g = *v.grid();
        let (vx, vy) = (v.x.values(), v.y.values());
        let mut ux = Vec::with_capacity((g.nx - 1) * g.ny);
        for j in 0..g.ny {
            for i in 0..g.nx - 1 {
                let k = g.idx(i, j);
                ux.push(0.5 * (vx[k] + vx[k + 1]));
            }
        }
        let mut uy = Vec::with_capacity(g.nx * (g.ny - 1));
        for j in 0..g.ny - 1 {
            for i in 0..g.nx {
                let k = g.idx(i, j);
                uy.push(0.5 * (vy[k] + vy[k + g.nx]));
            }
        }
        FaceVelocity { ux, uy }
    }

    fn max_abs(&self) -> [f64; 2] {
        let m = |v: &[f64]| v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        [m(&self.ux), m(&self.uy)]
    }
}

/// Largest stable step for explicit upwind advection plus diffusion.
///
/// A cell can lose mass through all four faces at once, so the bound uses the sum
/// of the outflow rates: `dt * (2|u|/hx + 2|v|/hy + 2 s (1/hx^2 + 1/hy^2)) <= cfl`.
/// Any `cfl <= 1` keeps the update a non-negative combination of old values.
pub(crate) fn stable_dt(grid: &Grid, faces: &FaceVelocity, diff_max: f64, cfl: f64) -> f64 {
    let [u, v] = faces.max_abs();
    let (hx, hy) = (grid.hx(), grid.hy());
    let rate = 2.0 * u / hx
        + 2.0 * v / hy
        + 2.0 * diff_max.max(0.0) * (1.0 / (hx * hx) + 1.0 / (hy * hy));
    if rate > 0.0 {
        cfl / rate
    } else {
        f64::INFINITY
    }
}

/// Stability limit of the advection-diffusion step for a cell-centered velocity.
pub fn cfl_bound(v: &VectorField, sigma: &Coefficient, cfl: f64) -> f64 {
    stable_dt(v.grid(), &FaceVelocity::from_cells(v), sigma.max(), cfl)
}

/// One explicit step of `dp/dt = -div(u p) + lap(s p)` with zero wall flux.
pub(crate) fn advect_diffuse_step(
    grid: &Grid,
    p: &[f64],
    faces: &FaceVelocity,
    sigma: &Coefficient,
    dt: f64,
) -> Vec<f64> {
    let (nx, ny) = (grid.nx, grid.ny);
    let (hx, hy) = (grid.hx(), grid.hy());
    let sp: Vec<f64> = p.iter().enumerate().map(|(k, &v)| sigma.at_cell(k) * v).collect();
    let (cx, cy) = (dt / hx, dt / hy);
    let mut out = p.to_vec();
    for j in 0..ny {
        for i in 0..nx - 1 {
            let k = grid.idx(i, j);
            let u = faces.ux[j * (nx - 1) + i];
            let up = if u > 0.0 { p[k] } else { p[k + 1] };
            let flux = u * up - (sp[k + 1] - sp[k]) / hx;
            out[k] -= cx * flux;
            out[k + 1] += cx * flux;
        }
    }
    for j in 0..ny - 1 {
        for i in 0..nx {
            let k = grid.idx(i, j);
            let u = faces.uy[j * nx + i];
            let up = if u > 0.0 { p[k] } else { p[k + nx] };
            let flux = u * up - (sp[k + nx] - sp[k]) / hy;
            out[k] -= cy * flux;
            out[k + nx] += cy * flux;
        }
    }
    out
}

/// Transpose of the upwind transport step applied to `lambda`.
pub(crate) fn transport_adjoint_step(grid: &Grid, lambda: &[f64], faces: &FaceVelocity, dt: f64) -> Vec<f64> {
    let (nx, ny) = (grid.nx, grid.ny);
    let (cx, cy) = (dt / grid.hx(), dt / grid.hy());
    let mut out = lambda.to_vec();
    for j in 0..ny {
        for i in 0..nx - 1 {
            let k = grid.idx(i, j);
            let u = faces.ux[j * (nx - 1) + i];
            let jump = cx * u * (lambda[k + 1] - lambda[k]);
            if u > 0.0 {
                out[k] += jump;
            } else {
                out[k + 1] += jump;
            }
        }
    }
    for j in 0..ny - 1 {
        for i in 0..nx {
            let k = grid.idx(i, j);
            let u = faces.uy[j * nx + i];
            let jump = cy * u * (lambda[k + nx] - lambda[k]);
            if u > 0.0 {
                out[k] += jump;
            } else {
                out[k + nx] += jump;
            }
        }
    }
    out
}

fn clip_output(grid: Grid, p: &[f64]) -> ScalarField {
    ScalarField::from_vec_unchecked(grid, p.iter().map(|&v| v.max(0.0)).collect())
}

fn check_density_input(p0: &ScalarField) -> Result<()> {
    if !p0.is_finite() || p0.min() < 0.0 {
        return Err(Error::InvalidArgument("initial density must be finite and non-negative".into()));
    }
    Ok(())
}

/// Splits `[t0, t1]` at the given interior times.
fn partition(t0: f64, t1: f64, cuts: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut pts: Vec<f64> = cuts.into_iter().filter(|&t| t > t0 && t < t1).collect();
    pts.push(t0);
    pts.push(t1);
    pts.sort_by(f64::total_cmp);
    pts.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));
    pts
}

/// Pure transport under a time schedule.
pub fn solve_transport(p0: &ScalarField, v: &VelocitySchedule, cfg: &PdeRunConfig) -> Result<DensityTrajectory> {
    solve_fokker_planck(p0, &mut v.clone(), &Coefficient::Constant(0.0), cfg)
}

/// Controlled Fokker–Planck equation. With a schedule, each constant-velocity window
/// between breaks and checkpoints is divided into equal steps; with a feedback
/// provider the velocity (and the stable step) is re-evaluated every step.
pub fn solve_fokker_planck(
    p0: &ScalarField,
    v: &mut dyn VelocityProvider,
    sigma: &Coefficient,
    cfg: &PdeRunConfig,
) -> Result<DensityTrajectory> {
    cfg.validate()?;
    check_density_input(p0)?;
    if !sigma.is_finite() || sigma.min() < 0.0 {
        return Err(Error::InvalidArgument("sigma must be finite and non-negative".into()));
    }
    let grid = *p0.grid();
    let outputs = cfg.output_times();
    let record_all = cfg.checkpoints.is_none();
    let mut times = vec![cfg.t_start];
    let mut fields = vec![clip_output(grid, p0.values())];
    let mut p = p0.values().to_vec();

    if let Some(schedule) = v.schedule() {
        grid.check_same(schedule.grid())?;
        let windows = partition(
            cfg.t_start,
            cfg.t_end,
            schedule.breaks.iter().copied().chain(outputs.iter().copied()),
        );
        let mut cache: Option<(usize, FaceVelocity)> = None;
        for w in windows.windows(2) {
            let (a, b) = (w[0], w[1]);
            let seg = schedule.segment(0.5 * (a + b));
            if cache.as_ref().is_none_or(|(s, _)| *s != seg) {
                cache = Some((seg, FaceVelocity::from_cells(&schedule.fields[seg])));
            }
            let faces = &cache.as_ref().expect("just set").1;
            let bound = stable_dt(&grid, faces, sigma.max(), cfg.cfl_target);
            let target = cfg.dt_pde.unwrap_or(bound);
            let steps = ((b - a) / target).ceil().max(1.0) as usize;
            let dt = (b - a) / steps as f64;
            if cfg.dt_pde.is_some() && dt > bound * (1.0 + 1e-12) {
                return Err(Error::CflViolation { dt, bound });
            }
            for s in 0..steps {
                p = advect_diffuse_step(&grid, &p, faces, sigma, dt);
                let t = if s + 1 == steps { b } else { a + (s + 1) as f64 * dt };
                if record_all || (s + 1 == steps && outputs.contains(&b)) {
                    times.push(t);
                    fields.push(clip_output(grid, &p));
                }
            }
        }
    } else {
        let mut t = cfg.t_start;
        let mut next_out = 0;
        while next_out < outputs.len() {
            let target = outputs[next_out];
            let current = ScalarField::from_vec_unchecked(grid, p.clone());
            let vel = v.velocity(&current, t)?;
            grid.check_same(vel.grid())?;
            if !vel.is_finite() {
                return Err(Error::NonFiniteFeedback { t });
            }
            let faces = FaceVelocity::from_cells(&vel);
            let bound = stable_dt(&grid, &faces, sigma.max().max(v.loop_diffusivity()), cfg.cfl_target);
            let dt_max = match cfg.dt_pde {
                Some(dt) if dt > bound * (1.0 + 1e-12) => {
                    return Err(Error::CflViolation { dt, bound });
                }
                Some(dt) => dt,
                None => bound,
            };
            let remaining = target - t;
            let (dt, lands) = if dt_max >= remaining * (1.0 - 1e-12) {
                (remaining, true)
            } else {
                (dt_max, false)
            };
            p = advect_diffuse_step(&grid, &p, &faces, sigma, dt);
            t = if lands { target } else { t + dt };
            if lands {
                next_out += 1;
            }
            if record_all || lands {
                times.push(t);
                fields.push(clip_output(grid, &p));
            }
        }
    }
    Ok(Trajectory { times, fields })
}

/// Source term `dL/dp` of the co-state equation.
pub trait RunningCostGradient {
    fn dl_dp(&self, p: &ScalarField) -> ScalarField;
}

impl<F: Fn(&ScalarField) -> ScalarField> RunningCostGradient for F {
    fn dl_dp(&self, p: &ScalarField) -> ScalarField {
        self(p)
    }
}

/// Wall treatment of the co-state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostateBoundary {
    /// No face flux through the walls: the exact discrete adjoint of the zero-flux
    /// transport step, so the resulting gradient is exact for the discrete cost.
    #[default]
    ZeroFlux,
    /// Boundary cells pinned to zero at every stored time.
    Dirichlet,
}

/// Integrates `dl/dt = dL/dp - grad(l).v` backward from `lambda_f` at `p_traj`'s final
/// time. The step is the transpose of the forward transport step on the same time
/// levels, i.e. upwinding follows `-v` in reversed time. `p_traj` must hold every
/// forward step (record-all mode).
pub fn solve_costate(
    lambda_f: &ScalarField,
    v: &VelocitySchedule,
    p_traj: &DensityTrajectory,
    source: &dyn RunningCostGradient,
    boundary: CostateBoundary,
    cfg: &PdeRunConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    let grid = *lambda_f.grid();
    grid.check_same(p_traj.grid())?;
    grid.check_same(v.grid())?;
    let n = p_traj.len();
    let pin = |vals: &mut Vec<f64>| {
        if boundary == CostateBoundary::Dirichlet {
            for j in 0..grid.ny {
                for i in 0..grid.nx {
                    if grid.is_boundary(i, j) {
                        vals[grid.idx(i, j)] = 0.0;
                    }
                }
            }
        }
    };
    let mut lam = lambda_f.values().to_vec();
    pin(&mut lam);
    let mut fields = vec![ScalarField::from_vec_unchecked(grid, lam.clone())];
    let mut cache: Option<(usize, FaceVelocity)> = None;
    for s in (0..n - 1).rev() {
        let (t0, t1) = (p_traj.times[s], p_traj.times[s + 1]);
        let dt = t1 - t0;
        let seg = v.segment(0.5 * (t0 + t1));
        if cache.as_ref().is_none_or(|(c, _)| *c != seg) {
            cache = Some((seg, FaceVelocity::from_cells(&v.fields[seg])));
        }
        let faces = &cache.as_ref().expect("just set").1;
        let bound = stable_dt(&grid, faces, 0.0, 1.0);
        if dt > bound * (1.0 + 1e-9) {
            return Err(Error::CflViolation { dt, bound });
        }
        let src = source.dl_dp(&p_traj.fields[s]);
        let mut next = transport_adjoint_step(&grid, &lam, faces, dt);
        for (l, g) in next.iter_mut().zip(src.values()) {
            *l -= dt * g;
        }
        pin(&mut next);
        lam = next;
        fields.push(ScalarField::from_vec_unchecked(grid, lam.clone()));
    }
    fields.reverse();
    if boundary == CostateBoundary::Dirichlet && grid.nx > 2 && grid.ny > 2 {
        // pinned walls next to a free interior leave a jump one cell in
        let f = &fields[0];
        let ring = (1..grid.ny - 1)
            .flat_map(|j| (1..grid.nx - 1).map(move |i| (i, j)))
            .filter(|&(i, j)| i == 1 || j == 1 || i == grid.nx - 2 || j == grid.ny - 2)
            .map(|(i, j)| f.at(i, j).abs())
            .fold(0.0, f64::max);
        log::debug!("co-state boundary layer: max |lambda| next to pinned walls = {ring:.3e}");
    }
    Ok(Trajectory {
        times: p_traj.times.clone(),
        fields,
    })
}

/// `dphi/dt = div(alpha grad phi)` with zero normal flux; face diffusivity is the
/// mean of the adjacent cells.
pub fn solve_diffusion(phi0: &ScalarField, alpha: &Coefficient, cfg: &PdeRunConfig) -> Result<Trajectory> {
    cfg.validate()?;
    if !alpha.is_finite() || alpha.min() < 0.0 {
        return Err(Error::InvalidArgument("alpha must be finite and non-negative".into()));
    }
    let grid = *phi0.grid();
    let alpha_field = alpha.to_field(grid)?;
    let (hx, hy) = (grid.hx(), grid.hy());
    let rate = 2.0 * alpha.max() * (1.0 / (hx * hx) + 1.0 / (hy * hy));
    let bound = if rate > 0.0 { cfg.cfl_target / rate } else { f64::INFINITY };
    let target = match cfg.dt_pde {
        Some(dt) if dt > bound * (1.0 + 1e-12) => return Err(Error::CflViolation { dt, bound }),
        Some(dt) => dt,
        None => bound,
    };
    let outputs = cfg.output_times();
    let record_all = cfg.checkpoints.is_none();
    let windows = partition(cfg.t_start, cfg.t_end, outputs.iter().copied());
    let a = alpha_field.values();
    let (nx, ny) = (grid.nx, grid.ny);
    let mut phi = phi0.values().to_vec();
    let mut times = vec![cfg.t_start];
    let mut fields = vec![phi0.clone()];
    for w in windows.windows(2) {
        let steps = ((w[1] - w[0]) / target).ceil().max(1.0) as usize;
        let dt = (w[1] - w[0]) / steps as f64;
        let (cx, cy) = (dt / (hx * hx), dt / (hy * hy));
        for s in 0..steps {
            let mut out = phi.clone();
            for j in 0..ny {
                for i in 0..nx - 1 {
                    let k = grid.idx(i, j);
                    let flux = 0.5 * (a[k] + a[k + 1]) * (phi[k + 1] - phi[k]);
                    out[k] += cx * flux;
                    out[k + 1] -= cx * flux;
                }
            }
            for j in 0..ny - 1 {
                for i in 0..nx {
                    let k = grid.idx(i, j);
                    let flux = 0.5 * (a[k] + a[k + nx]) * (phi[k + nx] - phi[k]);
                    out[k] += cy * flux;
                    out[k + nx] -= cy * flux;
                }
            }
            phi = out;
            if record_all || s + 1 == steps {
                times.push(if s + 1 == steps { w[1] } else { w[0] + (s + 1) as f64 * dt });
                fields.push(ScalarField::from_vec_unchecked(grid, phi.clone()));
            }
        }
    }
    Ok(Trajectory { times, fields })
}

/// Largest per-step change of total mass along a trajectory.
pub fn max_mass_drift(traj: &Trajectory) -> f64 {
    traj.fields
        .windows(2)
        .map(|w| (integrate(&w[1]) - integrate(&w[0])).abs())
        .fold(0.0, f64::max)
}
