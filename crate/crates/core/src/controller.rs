//! Mean-field density feedback:
//! `v = (-alpha grad(p - p_r) + grad(sigma p) + v_r p_r) / p`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{gradient, Coefficient, ScalarField, VectorField};

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    /// Gain on the tracking error gradient (length^2/s).
    pub alpha: Coefficient,
    /// Per-component speed clamp applied to the estimated-density law.
    pub v_max: Option<f64>,
    /// Agent diffusion coefficient; must match the one driving the agents.
    pub sigma: Coefficient,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            alpha: Coefficient::Constant(0.5),
            v_max: None,
            sigma: Coefficient::Constant(0.05),
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || !(self.alpha.min() > 0.0) {
            return Err(Error::validation("controller.alpha", "must be finite and > 0 everywhere"));
        }
        if !self.sigma.is_finite() || self.sigma.min() < 0.0 {
            return Err(Error::validation("controller.sigma", "must be finite and >= 0"));
        }
        if let Some(v) = self.v_max {
            if !(v > 0.0) {
                return Err(Error::validation("controller.v_max", "must be > 0 when set"));
            }
        }
        Ok(())
    }
}

fn feedback_law(p: &ScalarField, p_r: &ScalarField, v_r: &VectorField, cfg: &ControllerConfig) -> Result<VectorField> {
    let grid = *p.grid();
    grid.check_same(p_r.grid())?;
    grid.check_same(v_r.grid())?;
    if let Some((cell, &min)) = p
        .values()
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v > 0.0))
    {
        return Err(Error::NonPositiveDensity { min, cell });
    }
    let phi = p.sub(p_r)?;
    let g_phi = gradient(&phi);
    let sp = ScalarField::from_vec_unchecked(
        grid,
        p.values().iter().enumerate().map(|(k, &v)| cfg.sigma.at_cell(k) * v).collect(),
    );
    let g_sp = gradient(&sp);
    let (pv, prv) = (p.values(), p_r.values());
    let component = |gphi: &[f64], gsp: &[f64], vr: &[f64]| -> Vec<f64> {
        (0..grid.len())
            .map(|k| (-cfg.alpha.at_cell(k) * gphi[k] + gsp[k] + vr[k] * prv[k]) / pv[k])
            .collect()
    };
    let vx = component(g_phi.x.values(), g_sp.x.values(), v_r.x.values());
    let vy = component(g_phi.y.values(), g_sp.y.values(), v_r.y.values());
    Ok(VectorField {
        x: ScalarField::from_vec_unchecked(grid, vx),
        y: ScalarField::from_vec_unchecked(grid, vy),
    })
}

/// Feedback computed from the true density.
pub fn exact_feedback(p: &ScalarField, p_r: &ScalarField, v_r: &VectorField, cfg: &ControllerConfig) -> Result<VectorField> {
    feedback_law(p, p_r, v_r, cfg)
}

/// Feedback computed from an estimate `p_hat`, then clamped to `v_max` if set.
pub fn estimated_feedback(
    p_hat: &ScalarField,
    p_r: &ScalarField,
    v_r: &VectorField,
    cfg: &ControllerConfig,
) -> Result<VectorField> {
    let v = feedback_law(p_hat, p_r, v_r, cfg)?;
    Ok(match cfg.v_max {
        Some(m) => clamp(&v, m),
        None => v,
    })
}

pub fn clamp(v: &VectorField, v_max: f64) -> VectorField {
    VectorField {
        x: v.x.map(|a| a.clamp(-v_max, v_max)),
        y: v.y.map(|a| a.clamp(-v_max, v_max)),
    }
}

/// Multiplicative estimation error and the two disturbance norms that drive the
/// tracking error bound.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationError {
    pub epsilon: ScalarField,
    /// `||eps / (1 + eps)||_L2`
    pub ratio_norm: f64,
    /// `||grad(eps) / (1 + eps)||_L2`
    pub gradient_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceNorms {
    pub ratio_norm: f64,
    pub gradient_norm: f64,
}

/// `eps = p_hat / p - 1` cell-wise.
pub fn error_model(p_hat: &ScalarField, p: &ScalarField) -> Result<EstimationError> {
    p.grid().check_same(p_hat.grid())?;
    if let Some((cell, &min)) = p.values().iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::NonPositiveDensity { min, cell });
    }
    let epsilon = p_hat.zip_map(p, |a, b| a / b - 1.0)?;
    let ratio = epsilon.map(|e| e / (1.0 + e));
    let g = gradient(&epsilon);
    let inv = epsilon.map(|e| 1.0 / (1.0 + e));
    let g_ratio = g.scale_by(&inv)?;
    Ok(EstimationError {
        ratio_norm: ratio.l2_norm(),
        gradient_norm: g_ratio.l2_norm(),
        epsilon,
    })
}

impl EstimationError {
    pub fn norms(&self) -> DisturbanceNorms {
        DisturbanceNorms {
            ratio_norm: self.ratio_norm,
            gradient_norm: self.gradient_norm,
        }
    }
}
