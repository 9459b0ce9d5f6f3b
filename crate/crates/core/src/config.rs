//! Mission configuration: one TOML file with top-level mission keys and a flat
//! section per module. Everything except `n` and `truth` has a default.
//!
//! ```toml
//! n = 100
//! truth = "sinc"
//! dt = 0.875
//! period = 7.0
//!
//! [grid]
//! nx = 64
//! ny = 64
//!
//! [planner]
//! modes_x = 8
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{GroundTruth, Rect};
use crate::controller::ControllerConfig;
use crate::density::KdeConfig;
use crate::error::{Error, Result};
use crate::gp::{GpHyper, UncertaintyStatistic};
use crate::grid::{Coefficient, Grid};
use crate::pde::CostateBoundary;
use crate::planner::{CostWeights, PlannerConfig};

pub const SCHEMA_VERSION: u32 = 1;

pub const PAPER_PRESET: &str = include_str!("../presets/paper.toml");
pub const FAST_PRESET: &str = include_str!("../presets/fast.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissionConfig {
    #[serde(default = "schema_version")]
    pub schema: u32,
    /// Number of agents.
    pub n: usize,
    pub truth: GroundTruth,
    /// Sampling period (s).
    #[serde(default = "defaults::dt")]
    pub dt: f64,
    /// Replanning period `T` (s); an integer multiple of `dt`.
    #[serde(default = "defaults::period")]
    pub period: f64,
    /// Termination threshold on the sup of the uncertainty statistic.
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    /// Uncertainty below this level gets no target mass.
    #[serde(default = "defaults::eta")]
    pub eta: f64,
    #[serde(default = "defaults::max_outer")]
    pub max_outer: usize,
    #[serde(default)]
    pub seed: u64,
    /// Measurement noise variance.
    #[serde(default = "defaults::noise_var")]
    pub noise_var: f64,
    #[serde(default = "defaults::init_region")]
    pub init_region: Rect,
    #[serde(default)]
    pub uncertainty: UncertaintyStatistic,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub agents: AgentsSection,
    #[serde(default)]
    pub kde: KdeSection,
    #[serde(default)]
    pub gp: GpSection,
    #[serde(default)]
    pub planner: PlannerSection,
    #[serde(default)]
    pub controller: ControllerSection,
    #[serde(default)]
    pub pde: PdeSection,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

mod defaults {
    use crate::agents::Rect;

    pub fn dt() -> f64 {
        0.875
    }
    pub fn period() -> f64 {
        7.0
    }
    pub fn gamma() -> f64 {
        0.1
    }
    pub fn eta() -> f64 {
        0.02
    }
    pub fn max_outer() -> usize {
        12
    }
    pub fn noise_var() -> f64 {
        0.04
    }
    pub fn init_region() -> Rect {
        Rect::new(0.0, 7.0, 0.0, 7.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub nx: usize,
    pub ny: usize,
    pub b: f64,
    pub c: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            nx: 64,
            ny: 64,
            b: 20.0,
            c: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentsSection {
    /// Diffusion coefficient of every agent (length^2/s); the controller uses the same value.
    pub sigma: f64,
}

impl Default for AgentsSection {
    fn default() -> Self {
        AgentsSection { sigma: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdeSection {
    /// A length, or `"auto"`.
    pub bandwidth: crate::density::Bandwidth,
    pub floor: f64,
}

impl Default for KdeSection {
    fn default() -> Self {
        let k = KdeConfig::default();
        KdeSection {
            bandwidth: k.bandwidth,
            floor: k.floor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpSection {
    pub signal_var: f64,
    pub lengthscale: f64,
    /// Defaults to the measurement noise variance.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_var: Option<f64>,
    /// Largest dataset handed to the exact GP; larger sets are subsampled.
    pub cap: usize,
    /// Strata per axis for the subsample.
    pub strata: usize,
}

impl Default for GpSection {
    fn default() -> Self {
        let h = GpHyper::default();
        GpSection {
            signal_var: h.signal_var,
            lengthscale: h.lengthscale,
            noise_var: None,
            cap: 2000,
            strata: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerSection {
    pub modes_x: usize,
    pub modes_y: usize,
    pub intervals: usize,
    pub w_f: f64,
    pub w_p: f64,
    pub w_v: f64,
    pub kl_floor_rel: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub rel_tol: f64,
    pub max_halvings: usize,
    pub initial_step: f64,
    pub costate_boundary: CostateBoundary,
}

impl Default for PlannerSection {
    fn default() -> Self {
        let p = PlannerConfig::default();
        PlannerSection {
            modes_x: p.modes_x,
            modes_y: p.modes_y,
            intervals: p.intervals,
            w_f: p.weights.w_f,
            w_p: p.weights.w_p,
            w_v: p.weights.w_v,
            kl_floor_rel: p.weights.kl_floor_rel,
            max_iters: p.max_iters,
            grad_tol: p.grad_tol,
            rel_tol: p.rel_tol,
            max_halvings: p.max_halvings,
            initial_step: p.initial_step,
            costate_boundary: p.costate_boundary,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSection {
    pub alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_max: Option<f64>,
}

impl Default for ControllerSection {
    fn default() -> Self {
        ControllerSection {
            alpha: 0.5,
            v_max: Some(5.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdeSection {
    pub cfl_target: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt_pde: Option<f64>,
}

impl Default for PdeSection {
    fn default() -> Self {
        PdeSection {
            cfl_target: 0.5,
            dt_pde: None,
        }
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(key, "must be > 0"))
    }
}

impl MissionConfig {
    /// A config with only the two required keys set.
    pub fn minimal(n: usize, truth: GroundTruth) -> Self {
        let cfg: MissionConfig =
            serde_json::from_value(serde_json::json!({ "n": n, "truth": truth })).expect("defaults fill the rest");
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: MissionConfig = toml::from_str(text).map_err(|e| Error::parse("config", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: MissionConfig =
            toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn paper() -> Self {
        Self::from_toml_str(PAPER_PRESET).expect("shipped preset is valid")
    }

    pub fn fast() -> Self {
        Self::from_toml_str(FAST_PRESET).expect("shipped preset is valid")
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "fast" => Some(Self::fast()),
            _ => None,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::validation("schema", format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema)));
        }
        if self.n == 0 {
            return Err(Error::validation("n", "must be >= 1"));
        }
        positive("dt", self.dt)?;
        positive("period", self.period)?;
        let ratio = self.period / self.dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) || ratio.round() < 1.0 {
            return Err(Error::validation("period", "must be a positive integer multiple of dt"));
        }
        positive("gamma", self.gamma)?;
        positive("eta", self.eta)?;
        if self.max_outer == 0 {
            return Err(Error::validation("max_outer", "must be >= 1"));
        }
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return Err(Error::validation("noise_var", "must be >= 0"));
        }
        if let GroundTruth::Constant(v) = self.truth {
            if !v.is_finite() {
                return Err(Error::validation("truth", "constant must be finite"));
            }
        }
        if self.grid.nx < 3 {
            return Err(Error::validation("grid.nx", "must be >= 3"));
        }
        if self.grid.ny < 3 {
            return Err(Error::validation("grid.ny", "must be >= 3"));
        }
        positive("grid.b", self.grid.b)?;
        positive("grid.c", self.grid.c)?;
        let r = self.init_region;
        let finite = r.as_array().iter().all(|v| v.is_finite());
        if !finite || r.x0 > r.x1 || r.y0 > r.y1 || r.x0 < 0.0 || r.y0 < 0.0 || r.x1 > self.grid.b || r.y1 > self.grid.c {
            return Err(Error::validation("init_region", "must be an ordered rectangle inside the domain"));
        }
        if !(self.agents.sigma >= 0.0 && self.agents.sigma.is_finite()) {
            return Err(Error::validation("agents.sigma", "must be >= 0"));
        }
        self.kde_config().validate()?;
        self.gp_hyper().validate()?;
        if self.gp.cap == 0 {
            return Err(Error::validation("gp.cap", "must be >= 1"));
        }
        if self.gp.strata == 0 {
            return Err(Error::validation("gp.strata", "must be >= 1"));
        }
        if !(self.pde.cfl_target > 0.0 && self.pde.cfl_target <= 0.9) {
            return Err(Error::validation("pde.cfl_target", "must satisfy 0 < cfl_target <= 0.9"));
        }
        if let Some(dt) = self.pde.dt_pde {
            positive("pde.dt_pde", dt)?;
        }
        self.planner_config().validate()?;
        self.controller_config().validate()?;
        Ok(())
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.grid.b, self.grid.c, self.grid.nx, self.grid.ny).expect("validated grid")
    }

    /// Inner steps per outer period.
    pub fn steps_per_period(&self) -> usize {
        (self.period / self.dt).round() as usize
    }

    pub fn kde_config(&self) -> KdeConfig {
        KdeConfig {
            bandwidth: self.kde.bandwidth,
            floor: self.kde.floor,
        }
    }

    pub fn gp_hyper(&self) -> GpHyper {
        GpHyper {
            signal_var: self.gp.signal_var,
            lengthscale: self.gp.lengthscale,
            noise_var: self.gp.noise_var.unwrap_or(self.noise_var.max(1e-12)),
        }
    }

    pub fn planner_config(&self) -> PlannerConfig {
        let p = &self.planner;
        PlannerConfig {
            modes_x: p.modes_x,
            modes_y: p.modes_y,
            intervals: p.intervals,
            weights: CostWeights {
                w_f: p.w_f,
                w_p: p.w_p,
                w_v: p.w_v,
                kl_floor_rel: p.kl_floor_rel,
            },
            max_iters: p.max_iters,
            grad_tol: p.grad_tol,
            rel_tol: p.rel_tol,
            max_halvings: p.max_halvings,
            initial_step: p.initial_step,
            cfl_target: self.pde.cfl_target,
            dt_pde: self.pde.dt_pde,
            costate_boundary: p.costate_boundary,
        }
    }

    pub fn controller_config(&self) -> ControllerConfig {
        ControllerConfig {
            alpha: Coefficient::Constant(self.controller.alpha),
            v_max: self.controller.v_max,
            sigma: Coefficient::Constant(self.agents.sigma),
        }
    }

    /// SHA-256 over the canonical JSON form (sorted keys), as 64 hex digits.
    pub fn canonical_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_fills_defaults() {
        let cfg = MissionConfig::from_toml_str("n = 40\ntruth = \"sinc\"\n").unwrap();
        assert_eq!(cfg.n, 40);
        assert_eq!(cfg.dt, 0.875);
        assert_eq!(cfg.period, 7.0);
        assert_eq!(cfg.gamma, 0.1);
        assert_eq!(cfg.max_outer, 12);
        assert_eq!(cfg.grid, GridSection::default());
        assert_eq!(cfg.planner, PlannerSection::default());
        assert_eq!(cfg.gp_hyper().noise_var, 0.04);
        assert_eq!(cfg.steps_per_period(), 8);
        assert_eq!(MissionConfig::minimal(40, GroundTruth::Sinc), cfg);
        assert_eq!(MissionConfig::minimal(3, GroundTruth::Constant(2.5)).truth, GroundTruth::Constant(2.5));
    }

    #[test]
    fn validation_names_the_key() {
        let err = MissionConfig::from_toml_str("n = 4\ntruth = \"sinc\"\ndt = 0.0\n").unwrap_err();
        match err {
            Error::Validation { key, reason } => {
                assert_eq!(key, "dt");
                assert_eq!(reason, "must be > 0");
            }
            other => panic!("{other:?}"),
        }
        let cases = [
            ("period = 6.5", "period"),
            ("gamma = -1.0", "gamma"),
            ("max_outer = 0", "max_outer"),
            ("[grid]\nnx = 2", "grid.nx"),
            ("init_region = { x0 = 0.0, x1 = 30.0, y0 = 0.0, y1 = 7.0 }", "init_region"),
            ("[kde]\nfloor = 1.5", "kde.floor"),
            ("[gp]\nlengthscale = 0.0", "gp.lengthscale"),
            ("[planner]\nw_v = -0.1", "planner.w_v"),
            ("[controller]\nalpha = 0.0", "controller.alpha"),
            ("[pde]\ncfl_target = 1.5", "pde.cfl_target"),
        ];
        for (extra, expected) in cases {
            let text = format!("n = 4\ntruth = \"sinc\"\n{extra}\n");
            match MissionConfig::from_toml_str(&text) {
                Err(Error::Validation { key, .. }) => assert_eq!(key, expected, "{extra}"),
                other => panic!("{extra}: {other:?}"),
            }
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(MissionConfig::from_toml_str("n = 4\ntruth = \"sinc\"\nspeed = 3.0\n"), Err(Error::Parse { .. })));
        assert!(matches!(
            MissionConfig::from_toml_str("n = 4\ntruth = \"sinc\"\n[grid]\nnz = 3\n"),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(MissionConfig::from_toml_str("truth = \"sinc\"\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn paper_preset_values() {
        let cfg = MissionConfig::paper();
        assert_eq!(cfg.n, 100);
        assert_eq!(cfg.dt, 0.875);
        assert_eq!(cfg.period, 7.0);
        assert_eq!(cfg.gamma, 0.1);
        assert_eq!(cfg.noise_var, 0.04);
        assert_eq!(cfg.truth, GroundTruth::Sinc);
        assert_eq!(cfg.init_region, Rect::new(0.0, 7.0, 0.0, 7.0));
        assert_eq!((cfg.grid.b, cfg.grid.c), (20.0, 20.0));
        assert_eq!((cfg.planner.intervals, cfg.planner.modes_x, cfg.planner.modes_y), (12, 8, 8));
        let fast = MissionConfig::fast();
        assert_eq!((fast.grid.nx, fast.n), (32, 64));
    }

    #[test]
    fn canonical_round_trip_and_hash() {
        let cfg = MissionConfig::paper();
        let again = MissionConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
        let h = cfg.canonical_hash();
        assert_eq!(h.len(), 64);
        assert!(h.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
        assert_eq!(h, again.canonical_hash());

        let a = MissionConfig::from_toml_str("n = 4\ntruth = \"sinc\"\ngamma = 0.2\ndt = 0.5\nperiod = 2.0\n").unwrap();
        let b = MissionConfig::from_toml_str("period = 2.0\ndt = 0.5\ntruth = \"sinc\"\ngamma = 0.2\nn = 4\n").unwrap();
        assert_eq!(a.canonical_hash(), b.canonical_hash());

        let mut c = a.clone();
        c.eta = 0.03;
        assert_ne!(a.canonical_hash(), c.canonical_hash());
    }
}
