//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero if
//! any fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test --test acceptance -- 4 5`.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use swarmfield::config::MissionConfig;
use swarmfield::density::{kde, kde_at};
use swarmfield::gp::{GpHyper, GpPosterior};
use swarmfield::grid::{integrate, normalize, Coefficient, Grid, ScalarField, VectorField};
use swarmfield::mission::{
    multiplicative_injector, run_density_loop, run_mission, DensityLoopConfig, ErrorPattern, Outcome,
};
use swarmfield::pde::{solve_diffusion, solve_fokker_planck, solve_transport, PdeRunConfig, VelocitySchedule};
use swarmfield::planner::{
    cost_and_gradient, cost_of, grg_solve, symmetric_kl, CostFunctional, FourierVelocity, PlannerConfig,
    ReferenceTrajectory,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn gaussian(g: Grid, c: [f64; 2], sd: f64) -> ScalarField {
    normalize(&ScalarField::from_fn(g, |x| {
        (-((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)) / (2.0 * sd * sd)).exp()
    }))
    .unwrap()
}

// 1 ------------------------------------------------------------------------------

fn kde_oracle(positions: &[[f64; 2]], h: f64, x: [f64; 2]) -> f64 {
    let mut total = 0.0;
    for p in positions {
        let u = [(x[0] - p[0]) / h, (x[1] - p[1]) / h];
        total += (-(u[0] * u[0] + u[1] * u[1]) / 2.0).exp() / (2.0 * PI);
    }
    total / (positions.len() as f64 * h * h)
}

fn criterion_kde() -> Verdict {
    let start = Instant::now();
    let g = Grid::square(20.0, 32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(1..=200);
        let positions: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..20.0), rng.random_range(0.0..20.0)]).collect();
        let h = rng.random_range(0.3..4.0);
        for _ in 0..100 {
            let x = [rng.random_range(0.0..20.0), rng.random_range(0.0..20.0)];
            worst = worst.max((kde_at(&positions, h, x) - kde_oracle(&positions, h, x)).abs());
        }
        let field = kde(&positions, h, &g).unwrap();
        for j in 0..g.ny {
            for i in 0..g.nx {
                worst = worst.max((field.at(i, j) - kde_oracle(&positions, h, g.center(i, j))).abs());
            }
        }
    }
    let t = start.elapsed();
    verdict(worst <= 1e-12 && within(t, 5.0), format!("max abs error {worst:.2e}, {:.2} s", t.as_secs_f64()))
}

// 2 ------------------------------------------------------------------------------

/// Gaussian elimination with partial pivoting.
fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

fn gp_oracle(xs: &[[f64; 2]], ys: &[f64], h: &GpHyper, q: [f64; 2]) -> (f64, f64) {
    let k = |a: [f64; 2], b: [f64; 2]| {
        h.signal_var * (-((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)) / (2.0 * h.lengthscale.powi(2))).exp()
    };
    let n = xs.len();
    let gram: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| k(xs[i], xs[j]) + if i == j { h.noise_var } else { 0.0 }).collect())
        .collect();
    let ks: Vec<f64> = xs.iter().map(|&x| k(x, q)).collect();
    let w = dense_solve(gram.clone(), ys.to_vec());
    let v = dense_solve(gram, ks.clone());
    let mean = ks.iter().zip(&w).map(|(a, b)| a * b).sum();
    let var = k(q, q) - ks.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
    (mean, var.max(0.0))
}

fn criterion_gp() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut worst_mean, mut worst_var, mut worst_datum) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let n = rng.random_range(1..=8);
        let hyper = GpHyper {
            signal_var: rng.random_range(0.5..2.0),
            lengthscale: rng.random_range(1.0..4.0),
            noise_var: rng.random_range(0.01..0.2),
        };
        let xs: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..20.0), rng.random_range(0.0..20.0)]).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..3.0)).collect();
        let gp = GpPosterior::fit(xs.clone(), ys.clone(), hyper).unwrap();
        for _ in 0..20 {
            let q = [rng.random_range(0.0..20.0), rng.random_range(0.0..20.0)];
            let (m, v) = gp.predict_point(q);
            let (mo, vo) = gp_oracle(&xs, &ys, &hyper, q);
            worst_mean = worst_mean.max((m - mo).abs());
            worst_var = worst_var.max((v - vo).abs());
        }
        // noiseless data: the posterior pins every datum
        let exact = GpHyper { noise_var: 1e-12, ..hyper };
        let gp = GpPosterior::fit(xs.clone(), ys.clone(), exact).unwrap();
        for &x in &xs {
            worst_datum = worst_datum.max(gp.predict_point(x).1 / exact.signal_var);
        }
    }
    let t = start.elapsed();
    let pass = worst_mean <= 1e-8 && worst_var <= 1e-8 && worst_datum <= 1e-6 && within(t, 10.0);
    verdict(
        pass,
        format!(
            "mean err {worst_mean:.2e}, variance err {worst_var:.2e}, datum variance/signal {worst_datum:.2e}, {:.2} s",
            t.as_secs_f64()
        ),
    )
}

// 3 ------------------------------------------------------------------------------

fn criterion_conservation() -> Verdict {
    let start = Instant::now();
    let g = Grid::square(20.0, 64).unwrap();
    // eight 7 s periods of a rough planned-style velocity
    let horizon = 56.0;
    let mut fv = FourierVelocity::zeros(8, 8, 96, 0.0, horizon, 20.0, 20.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for a in fv.coeffs.iter_mut() {
        *a = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
    }
    let p0 = normalize(&ScalarField::from_fn(g, |x| if x[0] < 7.0 && x[1] < 7.0 { 1.0 } else { 0.0 })).unwrap();
    let traj = solve_fokker_planck(
        &p0,
        &mut fv.schedule(&g),
        &Coefficient::Constant(0.05),
        &PdeRunConfig::new(0.0, horizon),
    )
    .unwrap();
    let masses: Vec<f64> = traj.fields.iter().map(integrate).collect();
    let drift = masses.iter().fold(0.0f64, |m, v| m.max((v - 1.0).abs()));
    let step = masses.windows(2).fold(0.0f64, |m, w| m.max((w[1] - w[0]).abs()));
    let t = start.elapsed();
    verdict(
        drift <= 1e-6 && step <= 1e-12,
        format!("{} steps, max |mass - 1| {drift:.2e}, max per-step change {step:.2e}, {:.2} s", masses.len() - 1, t.as_secs_f64()),
    )
}

// 4 ------------------------------------------------------------------------------

const ALPHA: f64 = 0.5;

fn reference_density(g: Grid) -> ScalarField {
    ScalarField::uniform_density(g)
}

fn initial_density(g: Grid) -> ScalarField {
    let p_r = reference_density(g);
    let amp = 0.3 / g.area();
    p_r.add(&ScalarField::from_fn(g, |x| amp * (PI * x[0] / g.b).cos() * (PI * x[1] / g.c).cos())).unwrap()
}

fn loop_config(checkpoints: Vec<f64>) -> DensityLoopConfig {
    DensityLoopConfig {
        controller: swarmfield::controller::ControllerConfig {
            alpha: Coefficient::Constant(ALPHA),
            v_max: None,
            sigma: Coefficient::Constant(0.05),
        },
        checkpoints: Some(checkpoints),
        ..DensityLoopConfig::default()
    }
}

fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, sxy * sxy / (sxx * syy))
}

fn criterion_exponential_stability() -> Verdict {
    let start = Instant::now();
    let g = Grid::square(20.0, 64).unwrap();
    let horizon = 150.0;
    let p_r = reference_density(g);
    let p0 = initial_density(g);
    let reference = ReferenceTrajectory::stationary(p_r.clone(), 0.0, horizon).unwrap();
    let times: Vec<f64> = (1..=100).map(|k| horizon * k as f64 / 100.0).collect();
    let series = run_density_loop(&p0, &reference, &loop_config(times), None).unwrap();
    let ratio = series.phi_norm.last().unwrap() / series.phi_norm[0];
    let logs: Vec<f64> = series.phi_norm.iter().map(|v| v.ln()).collect();
    let (slope, r2) = linear_fit(&series.times, &logs);

    let checks = [30.0, 60.0, 90.0, 120.0, 150.0];
    let oracle = solve_diffusion(
        &p0.sub(&p_r).unwrap(),
        &Coefficient::Constant(ALPHA),
        &PdeRunConfig::new(0.0, horizon).with_checkpoints(checks.to_vec()),
    )
    .unwrap();
    let mut worst = 0.0f64;
    for &tc in &checks {
        let k = series.times.iter().position(|&t| (t - tc).abs() < 1e-9).unwrap();
        let phi = series.densities.fields[k].sub(&p_r).unwrap();
        let (_, expected) = oracle.nearest(tc);
        worst = worst.max(phi.l2_distance(expected).unwrap() / expected.l2_norm());
    }
    let t = start.elapsed();
    let pass = ratio <= 0.05 && slope < 0.0 && r2 >= 0.95 && worst <= 0.05 && within(t, 60.0);
    verdict(
        pass,
        format!(
            "|Phi| ratio {ratio:.4}, log slope {slope:.4e}/s (R^2 {r2:.5}), max rel. L2 vs diffusion {worst:.4}, {:.2} s",
            t.as_secs_f64()
        ),
    )
}

// 5 ------------------------------------------------------------------------------

fn criterion_iss() -> Verdict {
    let start = Instant::now();
    let g = Grid::square(20.0, 64).unwrap();
    let horizon = 150.0;
    let p_r = reference_density(g);
    let p0 = initial_density(g);
    let reference = ReferenceTrajectory::stationary(p_r, 0.0, horizon).unwrap();
    let times: Vec<f64> = (1..=100).map(|k| horizon * k as f64 / 100.0).collect();
    let cfg = loop_config(times);
    // steady state: mean |Phi| over the last fifth of the horizon
    let steady = |mag: f64| {
        let mut inject = multiplicative_injector(ErrorPattern::Wave.field(g, mag));
        let s = run_density_loop(&p0, &reference, &cfg, Some(&mut inject)).unwrap();
        let tail: Vec<f64> = s.times.iter().zip(&s.phi_norm).filter(|(t, _)| **t >= 0.8 * horizon).map(|(_, v)| *v).collect();
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    let levels: Vec<f64> = [0.0, 0.05, 0.1, 0.2].iter().map(|&m| steady(m)).collect();
    let t = start.elapsed();
    let finite = levels.iter().all(|v| v.is_finite());
    let monotone = levels[1] <= levels[2] && levels[2] <= levels[3];
    let gap = levels[0] * 2.0 <= levels[1];
    verdict(
        finite && monotone && gap && within(t, 120.0),
        format!(
            "steady |Phi| at eps 0 / 0.05 / 0.1 / 0.2: {:.3e} / {:.3e} / {:.3e} / {:.3e}, {:.2} s",
            levels[0],
            levels[1],
            levels[2],
            levels[3],
            t.as_secs_f64()
        ),
    )
}

// 6 ------------------------------------------------------------------------------

fn criterion_planner() -> Verdict {
    let start = Instant::now();
    // (a) adjoint gradient against central differences
    let g = Grid::square(20.0, 16).unwrap();
    let p0 = gaussian(g, [7.0, 8.0], 2.5);
    let pf = gaussian(g, [12.0, 11.0], 3.0);
    let cfg = PlannerConfig { modes_x: 2, modes_y: 2, intervals: 3, dt_pde: Some(0.05), ..PlannerConfig::default() };
    let cost = CostFunctional::new(cfg.weights, pf).unwrap();
    let mut fv = FourierVelocity::zeros(2, 2, 3, 0.0, 6.0, 20.0, 20.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for a in fv.coeffs.iter_mut() {
        *a = [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)];
    }
    let (_, grad) = cost_and_gradient(&fv, &p0, &cost, &cfg).unwrap();
    let h = 1e-6;
    let mut worst_fd = 0.0f64;
    for k in 0..fv.coeffs.len() {
        for d in 0..2 {
            let mut plus = fv.clone();
            plus.coeffs[k][d] += h;
            let mut minus = fv.clone();
            minus.coeffs[k][d] -= h;
            let fd = (cost_of(&plus, &p0, &cost, &cfg).unwrap() - cost_of(&minus, &p0, &cost, &cfg).unwrap()) / (2.0 * h);
            worst_fd = worst_fd.max((grad[k][d] - fd).abs() / fd.abs());
        }
    }

    // (b), (c) Gaussian to shifted Gaussian
    let g = Grid::square(20.0, 32).unwrap();
    let p0 = gaussian(g, [7.0, 7.0], 2.0);
    let pf = gaussian(g, [12.0, 12.0], 2.0);
    let cfg = PlannerConfig { modes_x: 4, modes_y: 4, intervals: 6, ..PlannerConfig::default() };
    let plan = grg_solve(&p0, &pf, 0.0, 7.0, &cfg).unwrap();
    let costs: Vec<f64> = plan.history.iter().map(|r| r.cost).collect();
    let monotone = costs.windows(2).all(|w| w[1] <= w[0]);
    let floor = cfg.weights.kl_floor_rel / g.area();
    let kl0 = symmetric_kl(&p0, &pf, floor).unwrap();
    let kl1 = symmetric_kl(plan.p_r.last(), &pf, floor).unwrap();
    let t = start.elapsed();
    let pass = worst_fd <= 1e-3 && monotone && kl1 < 0.25 * kl0 && within(t, 600.0);
    verdict(
        pass,
        format!(
            "gradient vs FD max rel. error {worst_fd:.2e}; J {:.4e} -> {:.4e} over {} iterations ({}); KL {kl0:.4} -> {kl1:.4} ({:.1}%), {:.2} s",
            costs[0],
            plan.cost,
            costs.len(),
            if monotone { "non-increasing" } else { "NOT monotone" },
            100.0 * kl1 / kl0,
            t.as_secs_f64()
        ),
    )
}

// 7, 8 ---------------------------------------------------------------------------

struct PaperRuns {
    first_json: Option<String>,
    verdict: Verdict,
}

fn criterion_paper_mission() -> PaperRuns {
    let mut detail = Vec::new();
    let (mut all_success, mut all_error, mut monotone, mut slow) = (true, true, 0, false);
    let mut first_json = None;
    for seed in 1..=5u64 {
        let start = Instant::now();
        let mut cfg = MissionConfig::paper();
        cfg.seed = seed;
        let run = run_mission(&cfg).unwrap();
        let t = start.elapsed();
        slow |= !within(t, 900.0);
        let log = &run.log;
        let success = log.outcome == Outcome::Success && log.outer_periods <= 8;
        let pe = log.prediction_error_series();
        let reduced = pe.last().unwrap() <= &(0.25 * pe[0]);
        let sup = log.sup_uncertainty_series();
        let non_increasing = sup[1..].windows(2).all(|w| w[1] <= w[0]);
        all_success &= success;
        all_error &= reduced;
        monotone += non_increasing as usize;
        detail.push(format!(
            "seed {seed}: {:?} in {} periods, error {:.1}%, sup {}, {:.0} s",
            log.outcome,
            log.outer_periods,
            100.0 * pe.last().unwrap() / pe[0],
            if non_increasing { "non-increasing" } else { "increasing" },
            t.as_secs_f64()
        ));
        if seed == 1 {
            first_json = Some(log.to_json());
        }
    }
    PaperRuns {
        first_json,
        verdict: verdict(all_success && all_error && monotone >= 4 && !slow, detail.join("; ")),
    }
}

fn criterion_determinism(paper_first: Option<String>) -> Verdict {
    let start = Instant::now();
    let mut fast = MissionConfig::fast();
    fast.seed = 9;
    let a = run_mission(&fast).unwrap().log.to_json();
    let b = run_mission(&fast).unwrap().log.to_json();
    let mut same = a == b;
    let mut detail = format!("fast preset identical: {}", a == b);
    let paper = MissionConfig::paper();
    let first = paper_first.unwrap_or_else(|| run_mission(&paper).unwrap().log.to_json());
    let again = run_mission(&paper).unwrap().log.to_json();
    same &= first == again;
    detail.push_str(&format!(", paper preset identical: {}, {:.0} s", first == again, start.elapsed().as_secs_f64()));
    verdict(same, detail)
}

// 9 ------------------------------------------------------------------------------

fn criterion_solver_order() -> Verdict {
    let start = Instant::now();
    let alpha = 0.5;
    let t_end = 5.0;
    let diffusion_error = |n: usize| {
        let g = Grid::square(20.0, n).unwrap();
        let mode = |x: [f64; 2]| (PI * x[0] / 20.0).cos() * (2.0 * PI * x[1] / 20.0).cos();
        let phi0 = ScalarField::from_fn(g, mode);
        let decay = (-alpha * (PI / 20.0).powi(2) * 5.0 * t_end).exp();
        let exact = ScalarField::from_fn(g, |x| decay * mode(x));
        // step shrinks with h^2 so the spatial error dominates
        let cfg = PdeRunConfig::new(0.0, t_end).with_dt(0.02 * g.hx() * g.hx());
        let out = solve_diffusion(&phi0, &Coefficient::Constant(alpha), &cfg).unwrap();
        out.last().l2_distance(&exact).unwrap()
    };
    let transport_error = |n: usize| {
        let g = Grid::square(20.0, n).unwrap();
        let v = [0.6, 0.3];
        let sd = 1.5;
        let p0 = gaussian(g, [7.0, 8.0], sd);
        let t = 8.0;
        let exact = gaussian(g, [7.0 + v[0] * t, 8.0 + v[1] * t], sd);
        let schedule = VelocitySchedule::constant(VectorField::constant(g, v), 0.0, t).unwrap();
        // fixed Courant number
        let cfg = PdeRunConfig::new(0.0, t).with_dt(0.2 * g.hx());
        let out = solve_transport(&p0, &schedule, &cfg).unwrap();
        out.last().sub(&exact).unwrap().map(f64::abs).values().iter().sum::<f64>() * g.cell_area()
    };
    let dr = diffusion_error(32) / diffusion_error(64);
    let tr = transport_error(128) / transport_error(256);
    let t = start.elapsed();
    verdict(
        (3.5..=4.5).contains(&dr) && (1.7..=2.3).contains(&tr) && within(t, 60.0),
        format!("diffusion error ratio {dr:.3}, transport error ratio {tr:.3}, {:.2} s", t.as_secs_f64()),
    )
}

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |k: u32| wanted.is_empty() || wanted.contains(&k);
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut emit = |k: u32, name: &'static str, v: Verdict| {
        println!("criterion {k} [{name}]: {} ({})", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((k, name, v));
    };
    if run(1) {
        emit(1, "kde oracle", criterion_kde());
    }
    if run(2) {
        emit(2, "gp oracle", criterion_gp());
    }
    if run(3) {
        emit(3, "conservation", criterion_conservation());
    }
    if run(4) {
        emit(4, "exponential stability", criterion_exponential_stability());
    }
    if run(5) {
        emit(5, "input-to-state stability", criterion_iss());
    }
    if run(6) {
        emit(6, "planner", criterion_planner());
    }
    let mut paper_json = None;
    if run(7) {
        let runs = criterion_paper_mission();
        paper_json = runs.first_json;
        emit(7, "paper mission", runs.verdict);
    }
    if run(8) {
        emit(8, "determinism", criterion_determinism(paper_json));
    }
    if run(9) {
        emit(9, "solver order", criterion_solver_order());
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
