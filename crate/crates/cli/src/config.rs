//! Simulation config file: flat TOML, unknown keys rejected.
//!
//! ```toml
//! n_total0 = 100        # latent studies per replicate
//! gamma1 = -0.6
//! gamma2 = 0.8
//! rho = 0.2
//! tau = 0.5
//! theta = 0.4
//! replicates = 1000
//! seed = 20240101
//! level = 0.95          # optional
//! se_location = 0.25    # optional, s* = |X| with X normal of this mean
//! se_scale = 0.5        # optional, spread of X
//! se_scale_kind = "variance"  # optional, whether se_scale is a "variance" or an "sd"
//! mode = "free-gamma12" # optional, or "fix-gamma12"
//! search = "best"       # optional, or "local" / "global"
//! c_n = 14.0            # optional, defaults to the number of published studies
//! ```

use std::path::Path;

use elmeta::estimation::{FitMode, Search};
use elmeta::simulate::{ScaleKind, SeLaw, SimConfig};
use elmeta::SelectionParams;
use serde::Deserialize;

use crate::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimFile {
    pub n_total0: u64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub rho: f64,
    pub tau: f64,
    pub theta: f64,
    pub replicates: usize,
    pub seed: u64,
    pub level: Option<f64>,
    pub se_location: Option<f64>,
    pub se_scale: Option<f64>,
    pub se_scale_kind: Option<ScaleKind>,
    pub mode: Option<FitMode>,
    pub search: Option<Search>,
    pub c_n: Option<f64>,
}

impl SimFile {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_sim_config(&self) -> CliResult<SimConfig> {
        let gamma0 = SelectionParams {
            gamma1: self.gamma1,
            gamma2: self.gamma2,
            rho: self.rho,
            tau: self.tau,
            theta: self.theta,
        };
        let mut cfg = SimConfig::new(self.n_total0, gamma0, self.replicates, self.seed);
        let law = SeLaw::default();
        cfg.se_law = SeLaw {
            location: self.se_location.unwrap_or(law.location),
            scale: self.se_scale.unwrap_or(law.scale),
            kind: self.se_scale_kind.unwrap_or(law.kind),
        };
        if let Some(l) = self.level {
            cfg.level = l;
        }
        if let Some(m) = self.mode {
            cfg.fit.mode = m;
        }
        if let Some(s) = self.search {
            cfg.fit.search = s;
        }
        cfg.fit.c_n = self.c_n;
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}
