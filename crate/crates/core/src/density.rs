//! Gaussian kernel density estimate of the swarm density on the grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{integrate, normalize, Grid, ScalarField};

/// Kernel bandwidth: a fixed length, or chosen from the sample spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidth {
    Fixed(f64),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

impl Bandwidth {
    pub const AUTO: Bandwidth = Bandwidth::Auto(AutoTag::Auto);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdeConfig {
    pub bandwidth: Bandwidth,
    /// Fraction of the uniform density added before renormalizing.
    pub floor: f64,
}

impl Default for KdeConfig {
    fn default() -> Self {
        KdeConfig {
            bandwidth: Bandwidth::AUTO,
            floor: 0.01,
        }
    }
}

impl KdeConfig {
    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::validation("kde.bandwidth", "must be > 0 or \"auto\""));
            }
        }
        if !(0.0..1.0).contains(&self.floor) {
            return Err(Error::validation("kde.floor", "must satisfy 0 <= floor < 1"));
        }
        Ok(())
    }

    pub fn resolve_bandwidth(&self, positions: &[[f64; 2]], grid: &Grid) -> f64 {
        match self.bandwidth {
            Bandwidth::Fixed(h) => h,
            Bandwidth::Auto(_) => auto_bandwidth(positions, grid),
        }
    }
}

/// `p(x) = 1/(n h^2) sum_i K((x - X_i)/h)` at every cell center, with the standard
/// bivariate normal kernel. Agents are summed in index order for every cell.
pub fn kde(positions: &[[f64; 2]], h: f64, grid: &Grid) -> Result<ScalarField> {
    if positions.is_empty() {
        return Err(Error::InvalidArgument("KDE needs at least one sample".into()));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("bandwidth must be > 0, got {h}")));
    }
    let norm = 1.0 / (positions.len() as f64 * h * h * 2.0 * std::f64::consts::PI);
    let inv_2h2 = 1.0 / (2.0 * h * h);
    let values: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let x = grid.center(k % grid.nx, k / grid.nx);
            norm * kernel_sum(positions, x, inv_2h2)
        })
        .collect();
    ScalarField::new(*grid, values)
}

/// KDE at a single point, same arithmetic as [`kde`].
pub fn kde_at(positions: &[[f64; 2]], h: f64, x: [f64; 2]) -> f64 {
    let norm = 1.0 / (positions.len() as f64 * h * h * 2.0 * std::f64::consts::PI);
    norm * kernel_sum(positions, x, 1.0 / (2.0 * h * h))
}

#[inline]
fn kernel_sum(positions: &[[f64; 2]], x: [f64; 2], inv_2h2: f64) -> f64 {
    positions
        .iter()
        .map(|p| {
            let dx = x[0] - p[0];
            let dy = x[1] - p[1];
            (-(dx * dx + dy * dy) * inv_2h2).exp()
        })
        .sum()
}

/// Rule-of-thumb bandwidth `sigma * n^(-1/6)` where `sigma` is the mean of the
/// per-axis sample standard deviations, clamped to `[hx, b/4]`.
pub fn auto_bandwidth(positions: &[[f64; 2]], grid: &Grid) -> f64 {
    let n = positions.len();
    let spread = if n < 2 {
        0.0
    } else {
        let sd = |axis: usize| {
            let mean = positions.iter().map(|p| p[axis]).sum::<f64>() / n as f64;
            (positions.iter().map(|p| (p[axis] - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        0.5 * (sd(0) + sd(1))
    };
    silverman(spread, n.max(1)).clamp(grid.hx(), grid.b / 4.0)
}

#[inline]
pub fn silverman(spread: f64, n: usize) -> f64 {
    spread * (n as f64).powf(-1.0 / 6.0)
}

/// Adds `delta` times the uniform density and renormalizes, which bounds the result
/// below by `delta / ((1 + delta) b c)` when the input has unit mass.
pub fn floor_and_renormalize(p: &ScalarField, delta: f64) -> Result<ScalarField> {
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::InvalidArgument(format!("floor must be in [0, 1), got {delta}")));
    }
    if delta == 0.0 && (integrate(p) - 1.0).abs() <= 1e-12 {
        return Ok(p.clone());
    }
    let lift = delta / p.grid().area();
    normalize(&p.map(|v| v + lift))
}

/// KDE followed by the floor correction: the density handed to the controller.
pub fn estimate_density(positions: &[[f64; 2]], cfg: &KdeConfig, grid: &Grid) -> Result<ScalarField> {
    let h = cfg.resolve_bandwidth(positions, grid);
    floor_and_renormalize(&kde(positions, h, grid)?, cfg.floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn single_agent_kernel_values() {
        let g = Grid::square(20.0, 16).unwrap();
        let h = 1.3;
        let x = [7.1, 3.3];
        assert!((kde_at(&[x], h, x) - 1.0 / (2.0 * PI * h * h)).abs() < 1e-15);
        let q = [x[0] + h, x[1] + h]; // distance h * sqrt(2)
        let expected = (-1.0f64).exp() / (2.0 * PI * h * h);
        assert!((kde_at(&[x], h, q) - expected).abs() < 1e-15);

        let field = kde(&[g.center(3, 4)], h, &g).unwrap();
        assert_eq!(field.at(3, 4), kde_at(&[g.center(3, 4)], h, g.center(3, 4)));
    }

    #[test]
    fn bandwidth_rules() {
        let g = Grid::square(20.0, 64).unwrap();
        assert_eq!(auto_bandwidth(&vec![[4.0, 4.0]; 30], &g), g.hx());

        let spread = 2.0;
        let ratio = silverman(spread, 200) / silverman(spread, 100);
        assert!((ratio - 2f64.powf(-1.0 / 6.0)).abs() < 1e-12);

        // x in {2, 4, 6, 8}: sample sd sqrt(20/3); y in {1, 1, 5, 5}: sample sd sqrt(16/3)
        let pts = [[2.0, 1.0], [4.0, 1.0], [6.0, 5.0], [8.0, 5.0]];
        let expect = 0.5 * ((20.0f64 / 3.0).sqrt() + (16.0f64 / 3.0).sqrt()) * 4f64.powf(-1.0 / 6.0);
        assert!((auto_bandwidth(&pts, &g) - expect).abs() < 1e-12);
    }

    #[test]
    fn floor_cases() {
        let g = Grid::square(20.0, 20).unwrap();
        let u = ScalarField::uniform_density(g);
        assert_eq!(floor_and_renormalize(&u, 0.0).unwrap(), u);
        let lifted = floor_and_renormalize(&u, 0.3).unwrap();
        assert!(lifted.values().iter().all(|&v| (v - 1.0 / 400.0).abs() < 1e-16));

        let mut spike = ScalarField::zeros(g);
        spike.values_mut()[123] = 1.0 / g.cell_area();
        let f = floor_and_renormalize(&spike, 0.01).unwrap();
        assert!(f.min() >= 0.01 / (1.01 * 400.0) * (1.0 - 1e-12));
        assert!((integrate(&f) - 1.0).abs() < 1e-12);
    }
}
