//! Reference-trajectory planning: a transport-constrained optimal control problem over
//! a Fourier-sine velocity basis, solved by forward state / backward co-state sweeps
//! and gradient steps on the basis coefficients.
//!
//! The velocity on interval `l` is
//! `v_l(x) = sum_{i<=I, j<=J} sin(i pi x1 / b) sin(j pi x2 / c) a_ijl`,
//! which vanishes on the walls. The cost is
//! `J = w_f KLs(p(t_f), p_f) + int_t [ w_p KLs(p, p_f) + w_v int |v|^2 ] dt`
//! with `KLs(p, q) = int (p - q) log(p / q)` (densities floored inside the log).

use std::fs;
use std::path::Path;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{integrate, Grid, ScalarField, VectorField};
use crate::pde::{
    self, solve_costate, solve_transport, CostateBoundary, DensityTrajectory, FaceVelocity,
    PdeRunConfig, RunningCostGradient, Trajectory, VelocitySchedule,
};

/// Sine-series velocity, piecewise constant over `N` equal time intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierVelocity {
    pub modes_x: usize,
    pub modes_y: usize,
    pub b: f64,
    pub c: f64,
    /// `N + 1` interval boundaries.
    pub breaks: Vec<f64>,
    /// `a[l][i][j]` flattened as `(l * modes_x + i) * modes_y + j`, mode numbers from 1.
    pub coeffs: Vec<[f64; 2]>,
}

impl FourierVelocity {
    pub fn zeros(modes_x: usize, modes_y: usize, intervals: usize, t_start: f64, horizon: f64, b: f64, c: f64) -> Result<Self> {
        if modes_x == 0 || modes_y == 0 || intervals == 0 {
            return Err(Error::InvalidArgument("mode and interval counts must be >= 1".into()));
        }
        if !(horizon > 0.0) {
            return Err(Error::InvalidArgument(format!("horizon must be > 0, got {horizon}")));
        }
        let breaks = (0..=intervals)
            .map(|l| if l == intervals { t_start + horizon } else { t_start + horizon * l as f64 / intervals as f64 })
            .collect();
        Ok(FourierVelocity {
            modes_x,
            modes_y,
            b,
            c,
            breaks,
            coeffs: vec![[0.0; 2]; modes_x * modes_y * intervals],
        })
    }

    pub fn intervals(&self) -> usize {
        self.breaks.len() - 1
    }

    pub fn t_start(&self) -> f64 {
        self.breaks[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.breaks.last().expect("at least two breaks")
    }

    #[inline]
    pub fn index(&self, l: usize, i: usize, j: usize) -> usize {
        (l * self.modes_x + i) * self.modes_y + j
    }

    pub fn coeff(&self, l: usize, i: usize, j: usize) -> [f64; 2] {
        self.coeffs[self.index(l, i, j)]
    }

    pub fn set_coeff(&mut self, l: usize, i: usize, j: usize, a: [f64; 2]) {
        let k = self.index(l, i, j);
        self.coeffs[k] = a;
    }

    pub fn interval_of(&self, t: f64) -> usize {
        let idx = self.breaks.partition_point(|&b| b <= t);
        idx.saturating_sub(1).min(self.intervals() - 1)
    }

    /// Velocity of interval `l` at the cell centers of `grid`.
    pub fn eval_interval(&self, l: usize, grid: &Grid) -> VectorField {
        let basis = SineBasis::new(grid, self.modes_x, self.modes_y);
        let mut vx = vec![0.0; grid.len()];
        let mut vy = vec![0.0; grid.len()];
        for i in 0..self.modes_x {
            for j in 0..self.modes_y {
                let a = self.coeff(l, i, j);
                if a == [0.0, 0.0] {
                    continue;
                }
                for jj in 0..grid.ny {
                    let sy = basis.y[j][jj];
                    for ii in 0..grid.nx {
                        let w = basis.x[i][ii] * sy;
                        let k = grid.idx(ii, jj);
                        vx[k] += a[0] * w;
                        vy[k] += a[1] * w;
                    }
                }
            }
        }
        VectorField {
            x: ScalarField::from_vec_unchecked(*grid, vx),
            y: ScalarField::from_vec_unchecked(*grid, vy),
        }
    }

    /// Velocity acting at time `t`.
    pub fn eval(&self, t: f64, grid: &Grid) -> VectorField {
        self.eval_interval(self.interval_of(t), grid)
    }

    pub fn schedule(&self, grid: &Grid) -> VelocitySchedule {
        let fields = (0..self.intervals()).map(|l| self.eval_interval(l, grid)).collect();
        VelocitySchedule::new(self.breaks.clone(), fields).expect("breaks increase and fields are finite")
    }

    fn axpy(&self, step: f64, dir: &[[f64; 2]]) -> Self {
        let mut out = self.clone();
        for (a, d) in out.coeffs.iter_mut().zip(dir) {
            a[0] += step * d[0];
            a[1] += step * d[1];
        }
        out
    }
}

/// Sine modes sampled at cell centers (`x`, `y`) and averaged onto faces (`xf`, `yf`).
struct SineBasis {
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    xf: Vec<Vec<f64>>,
    yf: Vec<Vec<f64>>,
}

impl SineBasis {
    fn new(grid: &Grid, modes_x: usize, modes_y: usize) -> Self {
        let sample = |modes: usize, n: usize, len: f64, center: &dyn Fn(usize) -> f64| -> Vec<Vec<f64>> {
            (1..=modes)
                .map(|m| (0..n).map(|i| (m as f64 * std::f64::consts::PI * center(i) / len).sin()).collect())
                .collect()
        };
        let x = sample(modes_x, grid.nx, grid.b, &|i| grid.x_center(i));
        let y = sample(modes_y, grid.ny, grid.c, &|j| grid.y_center(j));
        let avg = |rows: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            rows.iter().map(|r| r.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()).collect()
        };
        let xf = avg(&x);
        let yf = avg(&y);
        SineBasis { x, y, xf, yf }
    }
}

/// `int (p - q) log(p / q)` with both densities floored at `floor`.
pub fn symmetric_kl(p: &ScalarField, q: &ScalarField, floor: f64) -> Result<f64> {
    Ok(integrate(&p.zip_map(q, |a, b| {
        let (a, b) = (a.max(floor), b.max(floor));
        (a - b) * (a / b).ln()
    })?))
}

/// Pointwise derivative of the symmetric KL integrand in `p`; zero where `p` sits
/// below the floor.
fn symmetric_kl_grad(p: &ScalarField, q: &ScalarField, floor: f64, weight: f64) -> ScalarField {
    p.zip_map(q, |a, b| {
        if a <= floor {
            0.0
        } else {
            let b = b.max(floor);
            weight * ((a / b).ln() + 1.0 - b / a)
        }
    })
    .expect("cost densities share the grid")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub w_f: f64,
    pub w_p: f64,
    pub w_v: f64,
    /// Floor inside the logarithms, as a multiple of the uniform density `1/(b c)`.
    pub kl_floor_rel: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            w_f: 10.0,
            w_p: 1.0,
            w_v: 0.1,
            kl_floor_rel: 1e-8,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, w) in [("planner.w_f", self.w_f), ("planner.w_p", self.w_p), ("planner.w_v", self.w_v)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::validation(key, "must be >= 0"));
            }
        }
        if self.w_f + self.w_p + self.w_v <= 0.0 {
            return Err(Error::validation("planner.w_f", "weights must not all be zero"));
        }
        if !(self.kl_floor_rel > 0.0 && self.kl_floor_rel.is_finite()) {
            return Err(Error::validation("planner.kl_floor_rel", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostFunctional {
    pub w_f: f64,
    pub w_p: f64,
    pub w_v: f64,
    pub p_f: ScalarField,
    pub kl_floor: f64,
}

impl CostFunctional {
    pub fn new(weights: CostWeights, p_f: ScalarField) -> Result<Self> {
        weights.validate()?;
        let kl_floor = weights.kl_floor_rel / p_f.grid().area();
        Ok(CostFunctional {
            w_f: weights.w_f,
            w_p: weights.w_p,
            w_v: weights.w_v,
            p_f,
            kl_floor,
        })
    }

    /// Terminal cost density integrated: `w_f KLs(p, p_f)`.
    pub fn terminal(&self, p: &ScalarField) -> Result<f64> {
        Ok(self.w_f * symmetric_kl(p, &self.p_f, self.kl_floor)?)
    }

    pub fn dphi_dp(&self, p: &ScalarField) -> ScalarField {
        symmetric_kl_grad(p, &self.p_f, self.kl_floor, self.w_f)
    }
}

impl RunningCostGradient for CostFunctional {
    fn dl_dp(&self, p: &ScalarField) -> ScalarField {
        symmetric_kl_grad(p, &self.p_f, self.kl_floor, self.w_p)
    }
}

/// Discrete cost of a transport trajectory: the running cost uses the left-endpoint
/// rectangle rule over the solver steps, the terminal cost the last stored density.
pub fn evaluate_cost(p_traj: &DensityTrajectory, fv: &FourierVelocity, cost: &CostFunctional) -> Result<f64> {
    let grid = *p_traj.grid();
    let speed2: Vec<f64> = (0..fv.intervals())
        .map(|l| {
            let v = fv.eval_interval(l, &grid);
            integrate(&v.x.mul(&v.x).expect("same grid").add(&v.y.mul(&v.y).expect("same grid")).expect("same grid"))
        })
        .collect();
    let mut running = 0.0;
    for s in 0..p_traj.len() - 1 {
        let (t0, t1) = (p_traj.times[s], p_traj.times[s + 1]);
        let dt = t1 - t0;
        let l = fv.interval_of(0.5 * (t0 + t1));
        let kl = if cost.w_p != 0.0 {
            symmetric_kl(&p_traj.fields[s], &cost.p_f, cost.kl_floor)?
        } else {
            0.0
        };
        running += dt * (cost.w_p * kl + cost.w_v * speed2[l]);
    }
    Ok(cost.terminal(p_traj.last())? + running)
}

/// Gradient of [`evaluate_cost`] with respect to every coefficient, given the
/// co-state from [`solve_costate`] with terminal value `-dphi/dp`. Per interval and
/// mode this is the projection of `2 w_v v - p grad(lambda)` onto the basis function,
/// with `p grad(lambda)` taken on faces exactly as the upwind transport step sees it.
pub fn reduced_gradient(
    p_traj: &DensityTrajectory,
    lambda_traj: &Trajectory,
    fv: &FourierVelocity,
    cost: &CostFunctional,
) -> Result<Vec<[f64; 2]>> {
    let grid = *p_traj.grid();
    grid.check_same(lambda_traj.grid())?;
    if p_traj.times != lambda_traj.times {
        return Err(Error::ShapeMismatch("state and co-state trajectories use different times".into()));
    }
    let (nx, ny) = (grid.nx, grid.ny);
    let (hx, hy) = (grid.hx(), grid.hy());
    let area = grid.cell_area();
    let basis = SineBasis::new(&grid, fv.modes_x, fv.modes_y);
    let n_int = fv.intervals();

    // per-interval accumulated face weights and elapsed time
    let mut wx = vec![vec![0.0; (nx - 1) * ny]; n_int];
    let mut wy = vec![vec![0.0; nx * (ny - 1)]; n_int];
    let mut elapsed = vec![0.0; n_int];
    let fields: Vec<VectorField> = (0..n_int).map(|l| fv.eval_interval(l, &grid)).collect();
    let faces: Vec<FaceVelocity> = fields.iter().map(FaceVelocity::from_cells).collect();

    for s in 0..p_traj.len() - 1 {
        let (t0, t1) = (p_traj.times[s], p_traj.times[s + 1]);
        let dt = t1 - t0;
        let l = fv.interval_of(0.5 * (t0 + t1));
        elapsed[l] += dt;
        let p = p_traj.fields[s].values();
        let lam = lambda_traj.fields[s + 1].values();
        let f = &faces[l];
        for j in 0..ny {
            for i in 0..nx - 1 {
                let k = grid.idx(i, j);
                let fi = j * (nx - 1) + i;
                let up = if f.ux[fi] > 0.0 { p[k] } else { p[k + 1] };
                wx[l][fi] -= dt * area * up * (lam[k + 1] - lam[k]) / hx;
            }
        }
        for j in 0..ny - 1 {
            for i in 0..nx {
                let k = grid.idx(i, j);
                let fi = j * nx + i;
                let up = if f.uy[fi] > 0.0 { p[k] } else { p[k + nx] };
                wy[l][fi] -= dt * area * up * (lam[k + nx] - lam[k]) / hy;
            }
        }
    }

    let mut grad = vec![[0.0; 2]; fv.coeffs.len()];
    for l in 0..n_int {
        let cell_scale = 2.0 * cost.w_v * area * elapsed[l];
        let (vx, vy) = (fields[l].x.values(), fields[l].y.values());
        for i in 0..fv.modes_x {
            // contract the x index first: rows[j] = sum_i w[j][i] * basis(i)
            let mut face_x = vec![0.0; ny];
            let mut face_y = vec![0.0; ny - 1];
            let mut cell_x = vec![0.0; ny];
            let mut cell_y = vec![0.0; ny];
            for jj in 0..ny {
                let row = &wx[l][jj * (nx - 1)..(jj + 1) * (nx - 1)];
                face_x[jj] = row.iter().zip(&basis.xf[i]).map(|(a, b)| a * b).sum();
                let base = jj * nx;
                cell_x[jj] = vx[base..base + nx].iter().zip(&basis.x[i]).map(|(a, b)| a * b).sum();
                cell_y[jj] = vy[base..base + nx].iter().zip(&basis.x[i]).map(|(a, b)| a * b).sum();
                if jj + 1 < ny {
                    let row = &wy[l][jj * nx..(jj + 1) * nx];
                    face_y[jj] = row.iter().zip(&basis.x[i]).map(|(a, b)| a * b).sum();
                }
            }
            for j in 0..fv.modes_y {
                let sy = &basis.y[j];
                let syf = &basis.yf[j];
                let gx: f64 = face_x.iter().zip(sy).map(|(a, b)| a * b).sum::<f64>()
                    + cell_scale * cell_x.iter().zip(sy).map(|(a, b)| a * b).sum::<f64>();
                let gy: f64 = face_y.iter().zip(syf).map(|(a, b)| a * b).sum::<f64>()
                    + cell_scale * cell_y.iter().zip(sy).map(|(a, b)| a * b).sum::<f64>();
                grad[fv.index(l, i, j)] = [gx, gy];
            }
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub modes_x: usize,
    pub modes_y: usize,
    pub intervals: usize,
    pub weights: CostWeights,
    pub max_iters: usize,
    /// Stop when the largest gradient component falls below this.
    pub grad_tol: f64,
    /// Stop when an accepted step lowers J by less than this fraction.
    pub rel_tol: f64,
    pub max_halvings: usize,
    /// Largest coefficient change (velocity units) of the very first trial step.
    pub initial_step: f64,
    pub cfl_target: f64,
    /// Forced solver step; `None` picks it from the stability limit.
    pub dt_pde: Option<f64>,
    pub costate_boundary: CostateBoundary,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            modes_x: 8,
            modes_y: 8,
            intervals: 12,
            weights: CostWeights::default(),
            max_iters: 100,
            grad_tol: 1e-6,
            rel_tol: 1e-5,
            max_halvings: 20,
            initial_step: 0.5,
            cfl_target: 0.5,
            dt_pde: None,
            costate_boundary: CostateBoundary::ZeroFlux,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes_x == 0 || self.modes_y == 0 {
            return Err(Error::validation("planner.modes_x", "mode counts must be >= 1"));
        }
        if self.intervals == 0 {
            return Err(Error::validation("planner.intervals", "must be >= 1"));
        }
        self.weights.validate()?;
        if !(self.grad_tol > 0.0) {
            return Err(Error::validation("planner.grad_tol", "must be > 0"));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(Error::validation("planner.rel_tol", "must be >= 0"));
        }
        if !(self.initial_step > 0.0) {
            return Err(Error::validation("planner.initial_step", "must be > 0"));
        }
        if !(self.cfl_target > 0.0 && self.cfl_target <= 0.9) {
            return Err(Error::validation("planner.cfl_target", "must satisfy 0 < cfl_target <= 0.9"));
        }
        Ok(())
    }

    fn pde(&self, t0: f64, t1: f64) -> PdeRunConfig {
        PdeRunConfig {
            cfl_target: self.cfl_target,
            dt_pde: self.dt_pde,
            t_start: t0,
            t_end: t1,
            checkpoints: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub cost: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    RelativeDecrease,
    MaxIterations,
    LineSearchStalled,
}

/// A planned `(p_r, v_r)` pair on `[t_c, t_c + T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub p_r: DensityTrajectory,
    pub velocity: FourierVelocity,
    pub cost: f64,
    pub history: Vec<IterationRecord>,
    pub stop: StopReason,
    /// Projected optimality residual (max gradient component) at the returned iterate.
    pub residual: f64,
}

impl ReferenceTrajectory {
    /// A reference that stays at `p_r` with zero velocity.
    pub fn stationary(p_r: ScalarField, t_start: f64, t_end: f64) -> Result<Self> {
        let g = *p_r.grid();
        let velocity = FourierVelocity::zeros(1, 1, 1, t_start, t_end - t_start, g.b, g.c)?;
        Ok(ReferenceTrajectory {
            p_r: Trajectory {
                times: vec![t_start, t_end],
                fields: vec![p_r.clone(), p_r],
            },
            velocity,
            cost: 0.0,
            history: Vec::new(),
            stop: StopReason::GradientTolerance,
            residual: 0.0,
        })
    }

    pub fn density_at(&self, t: f64) -> &ScalarField {
        self.p_r.at_or_before(t)
    }

    pub fn velocity_at(&self, t: f64, grid: &Grid) -> VectorField {
        self.velocity.eval(t, grid)
    }

    pub fn line_search_stalled(&self) -> bool {
        self.stop == StopReason::LineSearchStalled
    }

    /// Density directory (thinned to the interval boundaries) plus `coefficients.json`.
    pub fn export_dir(&self, dir: &Path, config_hash: &str, weights: &CostWeights) -> Result<()> {
        self.p_r.thinned(&self.velocity.breaks).export_dir(dir, config_hash)?;
        let dump = CoefficientDump {
            modes_x: self.velocity.modes_x,
            modes_y: self.velocity.modes_y,
            intervals: self.velocity.intervals(),
            velocity: self.velocity.clone(),
            weights: *weights,
            cost: self.cost,
            stop: self.stop,
            residual: self.residual,
            history: self.history.clone(),
        };
        let path = dir.join("coefficients.json");
        let text = serde_json::to_string_pretty(&dump).expect("coefficients serialize");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Reads back the coefficients written by [`ReferenceTrajectory::export_dir`].
    pub fn load_coefficients(dir: &Path) -> Result<FourierVelocity> {
        let path = dir.join("coefficients.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let dump: CoefficientDump = serde_json::from_str(&text).map_err(|e| Error::parse("coefficients.json", e))?;
        Ok(dump.velocity)
    }
}

#[derive(Serialize, Deserialize)]
struct CoefficientDump {
    modes_x: usize,
    modes_y: usize,
    intervals: usize,
    velocity: FourierVelocity,
    weights: CostWeights,
    cost: f64,
    stop: StopReason,
    residual: f64,
    history: Vec<IterationRecord>,
}

struct Evaluated {
    fv: FourierVelocity,
    schedule: VelocitySchedule,
    traj: DensityTrajectory,
    cost: f64,
}

fn evaluate(fv: FourierVelocity, p0: &ScalarField, cost: &CostFunctional, cfg: &PlannerConfig) -> Result<Evaluated> {
    let grid = *p0.grid();
    let schedule = fv.schedule(&grid);
    let traj = solve_transport(p0, &schedule, &cfg.pde(fv.t_start(), fv.t_end()))?;
    let j = evaluate_cost(&traj, &fv, cost)?;
    Ok(Evaluated {
        fv,
        schedule,
        traj,
        cost: j,
    })
}

fn gradient_at(state: &Evaluated, cost: &CostFunctional, cfg: &PlannerConfig) -> Result<Vec<[f64; 2]>> {
    let lambda_f = cost.dphi_dp(state.traj.last()).scale(-1.0);
    let lambda = solve_costate(
        &lambda_f,
        &state.schedule,
        &state.traj,
        cost,
        cfg.costate_boundary,
        &cfg.pde(state.fv.t_start(), state.fv.t_end()),
    )?;
    reduced_gradient(&state.traj, &lambda, &state.fv, cost)
}

/// Cost and gradient at an arbitrary coefficient set (used by the finite-difference
/// checks and by callers that drive their own optimizer).
pub fn cost_and_gradient(
    fv: &FourierVelocity,
    p0: &ScalarField,
    cost: &CostFunctional,
    cfg: &PlannerConfig,
) -> Result<(f64, Vec<[f64; 2]>)> {
    let state = evaluate(fv.clone(), p0, cost, cfg)?;
    let g = gradient_at(&state, cost, cfg)?;
    Ok((state.cost, g))
}

/// Cost alone, from a fresh forward solve.
pub fn cost_of(fv: &FourierVelocity, p0: &ScalarField, cost: &CostFunctional, cfg: &PlannerConfig) -> Result<f64> {
    Ok(evaluate(fv.clone(), p0, cost, cfg)?.cost)
}

fn max_abs(g: &[[f64; 2]]) -> f64 {
    g.iter().fold(0.0f64, |m, a| m.max(a[0].abs()).max(a[1].abs()))
}

/// Gradient descent with backtracking on the coefficients, starting from zero
/// velocity. Each iteration: forward transport, backward co-state, gradient, then a
/// line search that halves the step until J drops. A successful step doubles the
/// next trial step. Returns the best iterate found.
pub fn grg_solve(
    p0: &ScalarField,
    p_f: &ScalarField,
    t_start: f64,
    horizon: f64,
    cfg: &PlannerConfig,
) -> Result<ReferenceTrajectory> {
    cfg.validate()?;
    let grid = *p0.grid();
    grid.check_same(p_f.grid())?;
    if !p0.is_density(1e-6) || !p_f.is_density(1e-6) {
        return Err(Error::InvalidArgument("planner endpoints must be densities".into()));
    }
    let cost = CostFunctional::new(cfg.weights, p_f.clone())?;
    let fv0 = FourierVelocity::zeros(cfg.modes_x, cfg.modes_y, cfg.intervals, t_start, horizon, grid.b, grid.c)?;
    let mut current = evaluate(fv0, p0, &cost, cfg)?;
    let mut history = Vec::new();
    let mut step: Option<f64> = None;
    let mut stop = StopReason::MaxIterations;
    let mut residual;

    let mut iter = 0;
    loop {
        let g = gradient_at(&current, &cost, cfg)?;
        let gnorm = max_abs(&g);
        residual = gnorm;
        history.push(IterationRecord {
            iter,
            cost: current.cost,
            grad_norm: gnorm,
            step: step.unwrap_or(0.0),
        });
        debug!("planner iter {iter}: J = {:.6e}, |g| = {gnorm:.3e}", current.cost);
        if gnorm < cfg.grad_tol {
            stop = StopReason::GradientTolerance;
            break;
        }
        if iter >= cfg.max_iters {
            break;
        }
        let mut trial_step = step.unwrap_or(cfg.initial_step / gnorm);
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let trial = evaluate(current.fv.axpy(-trial_step, &g), p0, &cost, cfg)?;
            if trial.cost < current.cost {
                accepted = Some(trial);
                break;
            }
            trial_step *= 0.5;
        }
        let Some(next) = accepted else {
            stop = StopReason::LineSearchStalled;
            break;
        };
        let decrease = (current.cost - next.cost) / current.cost.abs().max(f64::MIN_POSITIVE);
        current = next;
        step = Some(2.0 * trial_step);
        iter += 1;
        if decrease < cfg.rel_tol {
            let g = gradient_at(&current, &cost, cfg)?;
            residual = max_abs(&g);
            history.push(IterationRecord {
                iter,
                cost: current.cost,
                grad_norm: residual,
                step: trial_step,
            });
            stop = StopReason::RelativeDecrease;
            break;
        }
    }

    Ok(ReferenceTrajectory {
        p_r: current.traj,
        velocity: current.fv,
        cost: current.cost,
        history,
        stop,
        residual,
    })
}

/// Stable step for a velocity field under pure transport (diagnostic helper).
pub fn transport_dt_bound(v: &VectorField, cfl: f64) -> f64 {
    pde::cfl_bound(v, &crate::grid::Coefficient::Constant(0.0), cfl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::normalize;
    use std::f64::consts::PI;

    fn bump(g: Grid, c: [f64; 2], w: f64) -> ScalarField {
        normalize(&ScalarField::from_fn(g, |p| {
            (-((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)) / (2.0 * w * w)).exp()
        }))
        .unwrap()
    }

    #[test]
    fn velocity_basis_evaluation() {
        let g = Grid::square(20.0, 33).unwrap();
        let mut fv = FourierVelocity::zeros(2, 2, 3, 0.0, 7.0, 20.0, 20.0).unwrap();
        assert_eq!(fv.eval(1.0, &g).max_abs(), [0.0, 0.0]);
        fv.set_coeff(0, 0, 0, [1.0, 0.0]);
        let v = fv.eval(0.5, &g);
        // odd cell count puts a center exactly at the domain middle
        assert!((v.x.at(16, 16) - 1.0).abs() < 1e-12);
        assert!((v.x.max() - 1.0).abs() < 1e-12);
        let edge = (PI * (g.hx() / 2.0) / 20.0).sin();
        for k in 0..g.nx {
            assert!(v.x.at(0, k).abs() <= edge + 1e-15);
            assert!(v.x.at(k, g.ny - 1).abs() <= edge + 1e-15);
        }
        // other intervals untouched
        assert_eq!(fv.eval(6.9, &g).max_abs(), [0.0, 0.0]);
        assert_eq!(fv.interval_of(7.0), 2);
    }

    #[test]
    fn cost_vanishes_at_target() {
        let g = Grid::square(20.0, 16).unwrap();
        let p = bump(g, [8.0, 8.0], 2.5);
        let cfg = PlannerConfig { modes_x: 2, modes_y: 2, intervals: 3, ..PlannerConfig::default() };
        let cost = CostFunctional::new(CostWeights { w_v: 3.0, ..CostWeights::default() }, p.clone()).unwrap();
        let fv = FourierVelocity::zeros(2, 2, 3, 0.0, 7.0, 20.0, 20.0).unwrap();
        assert!(cost_of(&fv, &p, &cost, &cfg).unwrap().abs() < 1e-10);
    }

    #[test]
    fn zero_velocity_cost_matches_kl_quadrature() {
        let g = Grid::square(20.0, 16).unwrap();
        let p0 = bump(g, [6.0, 7.0], 2.0);
        let pf = bump(g, [13.0, 12.0], 3.0);
        let w = CostWeights::default();
        let cost = CostFunctional::new(w, pf.clone()).unwrap();
        let cfg = PlannerConfig { modes_x: 2, modes_y: 2, intervals: 3, ..PlannerConfig::default() };
        let fv = FourierVelocity::zeros(2, 2, 3, 0.0, 7.0, 20.0, 20.0).unwrap();
        // standalone quadrature of (p - q) log(p / q)
        let floor = w.kl_floor_rel / 400.0;
        let mut kl = 0.0;
        for (a, b) in p0.values().iter().zip(pf.values()) {
            let (a, b) = (a.max(floor), b.max(floor));
            kl += (a - b) * (a / b).ln();
        }
        kl *= g.cell_area();
        let expected = (w.w_f + w.w_p * 7.0) * kl;
        let j = cost_of(&fv, &p0, &cost, &cfg).unwrap();
        assert!(((j - expected) / expected).abs() < 1e-10, "{j} vs {expected}");
        assert!(symmetric_kl(&p0, &pf, floor).unwrap() >= 0.0);
    }

    #[test]
    fn zero_costate_leaves_velocity_penalty() {
        let g = Grid::square(20.0, 16).unwrap();
        let p = ScalarField::uniform_density(g);
        let cost = CostFunctional::new(CostWeights::default(), p.clone()).unwrap();
        let mut fv = FourierVelocity::zeros(2, 2, 1, 0.0, 2.0, 20.0, 20.0).unwrap();
        fv.set_coeff(0, 1, 0, [0.3, -0.2]);
        let traj = Trajectory { times: vec![0.0, 1.0, 2.0], fields: vec![p.clone(), p.clone(), p.clone()] };
        let lam = Trajectory { times: traj.times.clone(), fields: vec![ScalarField::zeros(g); 3] };
        let grad = reduced_gradient(&traj, &lam, &fv, &cost).unwrap();
        // pure velocity term: 2 w_v T int v B
        let v = fv.eval(0.0, &g);
        let basis = |i: usize, j: usize| {
            ScalarField::from_fn(g, move |x| ((i + 1) as f64 * PI * x[0] / 20.0).sin() * ((j + 1) as f64 * PI * x[1] / 20.0).sin())
        };
        for i in 0..2 {
            for j in 0..2 {
                let bx = integrate(&v.x.mul(&basis(i, j)).unwrap());
                let by = integrate(&v.y.mul(&basis(i, j)).unwrap());
                let gexp = [2.0 * cost.w_v * 2.0 * bx, 2.0 * cost.w_v * 2.0 * by];
                let got = grad[fv.index(0, i, j)];
                assert!((got[0] - gexp[0]).abs() < 1e-10 && (got[1] - gexp[1]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn shape_mismatch_detected() {
        let g = Grid::square(20.0, 8).unwrap();
        let p = ScalarField::uniform_density(g);
        let cost = CostFunctional::new(CostWeights::default(), p.clone()).unwrap();
        let fv = FourierVelocity::zeros(1, 1, 1, 0.0, 1.0, 20.0, 20.0).unwrap();
        let a = Trajectory { times: vec![0.0, 1.0], fields: vec![p.clone(), p.clone()] };
        let b = Trajectory { times: vec![0.0, 0.5], fields: vec![p.clone(), p.clone()] };
        assert!(matches!(reduced_gradient(&a, &b, &fv, &cost), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn gradient_matches_finite_differences_small() {
        let g = Grid::square(20.0, 12).unwrap();
        let p0 = bump(g, [7.0, 8.0], 2.5);
        let pf = bump(g, [12.0, 11.0], 3.0);
        let cfg = PlannerConfig { modes_x: 2, modes_y: 2, intervals: 2, dt_pde: Some(0.05), ..PlannerConfig::default() };
        let cost = CostFunctional::new(cfg.weights, pf).unwrap();
        let mut fv = FourierVelocity::zeros(2, 2, 2, 0.0, 4.0, 20.0, 20.0).unwrap();
        for (k, a) in fv.coeffs.iter_mut().enumerate() {
            *a = [0.3 * ((k as f64) * 1.7).sin(), 0.25 * ((k as f64) * 0.9).cos()];
        }
        let (_, grad) = cost_and_gradient(&fv, &p0, &cost, &cfg).unwrap();
        let h = 1e-6;
        for k in 0..fv.coeffs.len() {
            for d in 0..2 {
                let mut plus = fv.clone();
                plus.coeffs[k][d] += h;
                let mut minus = fv.clone();
                minus.coeffs[k][d] -= h;
                let fd = (cost_of(&plus, &p0, &cost, &cfg).unwrap() - cost_of(&minus, &p0, &cost, &cfg).unwrap()) / (2.0 * h);
                let rel = (grad[k][d] - fd).abs() / fd.abs().max(1e-8);
                assert!(rel < 1e-4, "coeff {k}/{d}: adjoint {} vs fd {fd}", grad[k][d]);
            }
        }
    }

    #[test]
    fn planner_at_target_is_immediately_stationary() {
        let g = Grid::square(20.0, 16).unwrap();
        let p = bump(g, [10.0, 10.0], 3.0);
        let cfg = PlannerConfig { modes_x: 2, modes_y: 2, intervals: 2, ..PlannerConfig::default() };
        let plan = grg_solve(&p, &p, 0.0, 7.0, &cfg).unwrap();
        assert!(plan.cost.abs() < 1e-10);
        assert!(plan.history.len() <= 2);
        assert!(plan.velocity.coeffs.iter().all(|a| *a == [0.0, 0.0]));
        assert_eq!(plan.stop, StopReason::GradientTolerance);
    }
}
