//! Gaussian-process regression of the sampled field and the conversion of its
//! predictive variance into a target density for the swarm.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::Dataset;
use crate::error::{Error, Result};
use crate::grid::{integrate, normalize, Grid, ScalarField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub signal_var: f64,
    pub lengthscale: f64,
    pub noise_var: f64,
}

impl Default for GpHyper {
    fn default() -> Self {
        GpHyper {
            signal_var: 1.0,
            lengthscale: 2.0,
            noise_var: 0.04,
        }
    }
}

impl GpHyper {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("gp.signal_var", self.signal_var),
            ("gp.lengthscale", self.lengthscale),
            ("gp.noise_var", self.noise_var),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(key, "must be > 0"));
            }
        }
        Ok(())
    }

    /// Squared-exponential covariance.
    #[inline]
    pub fn kernel(&self, a: [f64; 2], b: [f64; 2]) -> f64 {
        let dx = a[0] - b[0];
        let dy = a[1] - b[1];
        self.signal_var * (-(dx * dx + dy * dy) / (2.0 * self.lengthscale * self.lengthscale)).exp()
    }
}

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

/// A fitted posterior. Immutable once built.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    inputs: Vec<[f64; 2]>,
    targets: Vec<f64>,
    hyper: GpHyper,
    /// Lower Cholesky factor of `K + (noise + jitter) I`, row-major.
    chol: Vec<f64>,
    weights: Vec<f64>,
    jitter: f64,
}

impl GpPosterior {
    /// Factorizes the Gram matrix, escalating diagonal jitter from 1e-10 to 1e-6
    /// when the plain factorization fails. An empty training set gives the prior.
    pub fn fit(inputs: Vec<[f64; 2]>, targets: Vec<f64>, hyper: GpHyper) -> Result<Self> {
        hyper.validate()?;
        if inputs.len() != targets.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        let n = inputs.len();
        let gram = DMatrix::from_fn(n, n, |i, j| {
            let k = hyper.kernel(inputs[i], inputs[j]);
            if i == j {
                k + hyper.noise_var
            } else {
                k
            }
        });
        let mut jitter = JITTER_START;
        let factor = loop {
            let mut m = gram.clone();
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            if let Some(ch) = m.cholesky() {
                break ch;
            }
            if jitter >= JITTER_MAX {
                return Err(Error::SingularGram { jitter });
            }
            jitter *= 10.0;
        };
        let weights = factor.solve(&DVector::from_column_slice(&targets));
        let l = factor.l();
        let mut chol = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                chol[i * n + j] = l[(i, j)];
            }
        }
        Ok(GpPosterior {
            inputs,
            targets,
            hyper,
            chol,
            weights: weights.iter().copied().collect(),
            jitter,
        })
    }

    pub fn fit_dataset(data: &Dataset, hyper: GpHyper) -> Result<Self> {
        Self::fit(data.positions(), data.targets(), hyper)
    }

    pub fn hyper(&self) -> &GpHyper {
        &self.hyper
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Predictive mean and (clamped) variance at one point.
    pub fn predict_point(&self, x: [f64; 2]) -> (f64, f64) {
        let n = self.inputs.len();
        let kstar: Vec<f64> = self.inputs.iter().map(|&xi| self.hyper.kernel(x, xi)).collect();
        let mean: f64 = kstar.iter().zip(&self.weights).map(|(k, w)| k * w).sum();
        // forward substitution v = L^{-1} k*
        let mut v = kstar;
        for i in 0..n {
            let row = &self.chol[i * n..i * n + i];
            let s: f64 = row.iter().zip(&v[..i]).map(|(l, vj)| l * vj).sum();
            v[i] = (v[i] - s) / self.chol[i * n + i];
        }
        let var = self.hyper.signal_var - v.iter().map(|a| a * a).sum::<f64>();
        (mean, var.max(0.0))
    }

    /// Mean and variance fields at every cell center.
    pub fn predict(&self, grid: &Grid) -> (ScalarField, ScalarField) {
        let (mean, var): (Vec<f64>, Vec<f64>) = (0..grid.len())
            .into_par_iter()
            .map(|k| self.predict_point(grid.center(k % grid.nx, k / grid.nx)))
            .unzip();
        (
            ScalarField::from_vec_unchecked(*grid, mean),
            ScalarField::from_vec_unchecked(*grid, var),
        )
    }

    /// Exact log marginal likelihood `-y'a/2 - sum log L_ii - n log(2 pi)/2`.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.inputs.len();
        let fit: f64 = self.targets.iter().zip(&self.weights).map(|(y, a)| y * a).sum();
        let logdet: f64 = (0..n).map(|i| self.chol[i * n + i].ln()).sum();
        -0.5 * fit - logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Candidate with the largest log marginal likelihood; ties keep the earliest.
pub fn tune_hyper(inputs: &[[f64; 2]], targets: &[f64], candidates: &[GpHyper]) -> Result<GpHyper> {
    let mut best: Option<(f64, GpHyper)> = None;
    for cand in candidates {
        let lml = GpPosterior::fit(inputs.to_vec(), targets.to_vec(), *cand)?.log_marginal_likelihood();
        if best.is_none_or(|(b, _)| lml > b) {
            best = Some((lml, *cand));
        }
    }
    best.map(|(_, h)| h)
        .ok_or_else(|| Error::InvalidArgument("no hyperparameter candidates".into()))
}

/// Which statistic of the posterior the termination test compares with `gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyStatistic {
    #[default]
    Variance,
    StdDev,
}

impl UncertaintyStatistic {
    pub fn apply(&self, variance: &ScalarField) -> ScalarField {
        match self {
            UncertaintyStatistic::Variance => variance.clone(),
            UncertaintyStatistic::StdDev => variance.map(f64::sqrt),
        }
    }
}

/// `max(V - eta, 0)` normalized to a density; the uniform density when nothing
/// exceeds `eta`.
pub fn target_density(variance: &ScalarField, eta: f64) -> ScalarField {
    let excess = variance.map(|v| (v - eta).max(0.0));
    if integrate(&excess) > 0.0 {
        normalize(&excess).expect("positive mass")
    } else {
        ScalarField::uniform_density(*variance.grid())
    }
}

/// Largest cell value.
pub fn sup_uncertainty(field: &ScalarField) -> f64 {
    field.max()
}

/// Indices of at most `cap` records, spread over a `bins x bins` partition of the
/// domain: bins are visited round-robin, newest record first within each bin.
/// Returned indices are ascending.
pub fn stratified_subsample(positions: &[[f64; 2]], cap: usize, grid: &Grid, bins: usize) -> Vec<usize> {
    if positions.len() <= cap {
        return (0..positions.len()).collect();
    }
    let bins = bins.max(1);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); bins * bins];
    for (idx, p) in positions.iter().enumerate().rev() {
        let bx = ((p[0] / grid.b * bins as f64) as usize).min(bins - 1);
        let by = ((p[1] / grid.c * bins as f64) as usize).min(bins - 1);
        buckets[by * bins + bx].push(idx);
    }
    let mut chosen = Vec::with_capacity(cap);
    let mut round = 0;
    while chosen.len() < cap {
        for bucket in &buckets {
            if let Some(&idx) = bucket.get(round) {
                chosen.push(idx);
                if chosen.len() == cap {
                    break;
                }
            }
        }
        round += 1;
    }
    chosen.sort_unstable();
    chosen
}
