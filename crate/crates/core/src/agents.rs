//! Particle-level swarm: Euler–Maruyama integration of `dX = v dt + sqrt(2 sigma) dB`
//! with mirror reflection at the walls, and noisy point measurements of the field
//! being mapped.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::{interpolate_vector, Coefficient, Grid, VectorField};
use crate::rng;

/// Axis-aligned rectangle `[x0,x1] x [y0,y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Rect { x0, x1, y0, y1 }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x0, self.x1, self.y0, self.y1]
    }

    fn inside(&self, grid: &Grid) -> bool {
        let ordered = self.x0 <= self.x1 && self.y0 <= self.y1;
        ordered && grid.contains([self.x0, self.y0]) && grid.contains([self.x1, self.y1])
    }
}

/// The field the swarm is sent to map. Only the simulator evaluates it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruth {
    /// `2 + sin(2r)/r` with `r = |x|`, continuous at the origin.
    Sinc,
    Constant(f64),
}

impl GroundTruth {
    pub fn eval(&self, x: [f64; 2]) -> f64 {
        match *self {
            GroundTruth::Sinc => {
                let r = x[0].hypot(x[1]);
                if r < 1e-8 {
                    // sin(2r)/r = 2 - 4r^2/3 + O(r^4)
                    4.0 - 4.0 * r * r / 3.0
                } else {
                    2.0 + (2.0 * r).sin() / r
                }
            }
            GroundTruth::Constant(v) => v,
        }
    }
}

pub fn sinc_truth() -> GroundTruth {
    GroundTruth::Sinc
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwarmState {
    positions: Vec<[f64; 2]>,
    b: f64,
    c: f64,
    seed: u64,
    /// Number of random batches consumed so far; keys the per-agent streams.
    draws: u64,
    /// Inner step counter `k`.
    step: u64,
    t: f64,
}

impl SwarmState {
    /// `n` i.i.d. uniform positions in `region`.
    pub fn init_uniform(grid: &Grid, region: Rect, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("swarm needs at least one agent".into()));
        }
        if !region.inside(grid) {
            return Err(Error::RegionOutsideDomain {
                region: region.as_array(),
                b: grid.b,
                c: grid.c,
            });
        }
        let positions = (0..n)
            .map(|i| {
                let mut r = rng::stream(seed, 0, i as u64);
                let u: f64 = r.random();
                let w: f64 = r.random();
                [
                    region.x0 + (region.x1 - region.x0) * u,
                    region.y0 + (region.y1 - region.y0) * w,
                ]
            })
            .collect();
        Ok(SwarmState {
            positions,
            b: grid.b,
            c: grid.c,
            seed,
            draws: 1,
            step: 0,
            t: 0.0,
        })
    }

    /// Swarm at explicit positions (all must lie in the closed domain).
    pub fn from_positions(grid: &Grid, positions: Vec<[f64; 2]>, seed: u64) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidArgument("swarm needs at least one agent".into()));
        }
        if let Some(p) = positions.iter().find(|p| !grid.contains(**p)) {
            return Err(Error::InvalidArgument(format!("position {p:?} outside the domain")));
        }
        Ok(SwarmState {
            positions,
            b: grid.b,
            c: grid.c,
            seed,
            draws: 1,
            step: 0,
            t: 0.0,
        })
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn n(&self) -> usize {
        self.positions.len()
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    /// One Euler–Maruyama step under the frozen velocity field `v`.
    pub fn step(&mut self, v: &VectorField, sigma: &Coefficient, dt: f64) -> Result<()> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be > 0, got {dt}")));
        }
        let (seed, draws, b, c) = (self.seed, self.draws, self.b, self.c);
        let moved: Result<Vec<[f64; 2]>> = self
            .positions
            .par_iter()
            .enumerate()
            .map(|(i, &x)| {
                let vel = interpolate_vector(v, x);
                let s = sigma.at_point(x);
                if !(vel[0].is_finite() && vel[1].is_finite() && s.is_finite()) {
                    return Err(Error::NonFiniteVelocity { agent: i, position: x });
                }
                let amp = (2.0 * s.max(0.0) * dt).sqrt();
                let mut r = rng::stream(seed, draws, i as u64);
                let xi0: f64 = r.sample(StandardNormal);
                let xi1: f64 = r.sample(StandardNormal);
                Ok([
                    reflect(x[0] + vel[0] * dt + amp * xi0, b),
                    reflect(x[1] + vel[1] * dt + amp * xi1, c),
                ])
            })
            .collect();
        self.positions = moved?;
        self.draws += 1;
        self.step += 1;
        self.t += dt;
        Ok(())
    }

    /// One noisy reading of `truth` per agent, tagged with the current step index.
    pub fn measure(&mut self, truth: &GroundTruth, noise_var: f64) -> Result<Vec<Record>> {
        if !(noise_var >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise variance must be >= 0, got {noise_var}"
            )));
        }
        let sd = noise_var.sqrt();
        let (seed, draws, k) = (self.seed, self.draws, self.step);
        let records = self
            .positions
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let noise: f64 = if sd > 0.0 {
                    sd * rng::stream(seed, draws, i as u64).sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                Record {
                    k,
                    agent: i,
                    position: x,
                    y: truth.eval(x) + noise,
                }
            })
            .collect();
        self.draws += 1;
        Ok(records)
    }
}

/// Mirror a coordinate back into `[0, len]`.
pub fn reflect(mut x: f64, len: f64) -> f64 {
    for _ in 0..8 {
        if x < 0.0 {
            x = -x;
        } else if x > len {
            x = 2.0 * len - x;
        } else {
            return x;
        }
    }
    // far excursions: fold with the triangle wave of period 2 len
    let y = x.rem_euclid(2.0 * len);
    if y > len {
        2.0 * len - y
    } else {
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub k: u64,
    pub agent: usize,
    pub position: [f64; 2],
    pub y: f64,
}

/// All measurements gathered so far.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<Record>,
    /// Variance of the noise used to generate `y`, kept for provenance.
    pub noise_var: f64,
}

impl Dataset {
    pub fn new(noise_var: f64) -> Self {
        Dataset {
            records: Vec::new(),
            noise_var,
        }
    }

    pub fn extend(&mut self, batch: Vec<Record>) {
        self.records.extend(batch);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.records.iter().map(|r| r.position).collect()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.y).collect()
    }

    /// `k,agent_id,x1,x2,y` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,agent_id,x1,x2,y\n");
        for r in &self.records {
            writeln!(out, "{},{},{:?},{:?},{:?}", r.k, r.agent, r.position[0], r.position[1], r.y)
                .expect("write to String");
        }
        out
    }
}

/// `t,agent_id,x1,x2` rows for a sequence of position snapshots.
pub fn trajectory_csv(snapshots: &[(f64, Vec<[f64; 2]>)]) -> String {
    let mut out = String::from("t,agent_id,x1,x2\n");
    for (t, positions) in snapshots {
        for (i, p) in positions.iter().enumerate() {
            writeln!(out, "{t:?},{i},{:?},{:?}", p[0], p[1]).expect("write to String");
        }
    }
    out
}
