use std::path::Path;

use airfuse::basis::BasisConfig;
use airfuse::calibration::CalibrationConfig;
use airfuse::eval::EvalConfig;
use airfuse::fieldfit::FieldFitConfig;
use airfuse::noise_model::NoiseFitConfig;
use airfuse::sim::{ColocatedConfig, SimConfig};
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

/// Every tunable of the pipeline. Missing keys take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives the simulation, the colocated simulation (seed + 1) and the
    /// evaluation splits.
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub ingest: IngestConfig,
    pub basis: BasisConfig,
    pub fieldfit: FieldFitConfig,
    pub noise: NoiseConfig,
    pub calibration: CalibrationConfig,
    pub predict: PredictConfig,
    pub eval: EvalConfig,
    pub explore: ExploreConfig,
    pub sim: SimConfig,
    pub colocated: ColocatedConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// Hours with fewer sensor values are dropped.
    pub min_airbox: usize,
    /// Hours with fewer reference values are dropped.
    pub min_epa: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            min_airbox: 500,
            min_epa: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Colocated sensors correlating below this with every other sensor are dropped.
    pub min_corr: f64,
    pub fit: NoiseFitConfig,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            min_corr: 0.85,
            fit: NoiseFitConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    /// hidden | airbox | fused
    pub method: String,
    pub sigma_xi2: f64,
    /// Grid spacing in km for prediction and calibration maps.
    pub grid_km: f64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            method: "fused".into(),
            sigma_xi2: 0.0,
            grid_km: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExploreConfig {
    pub radius_km: f64,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        Self { radius_km: 2.0 }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 2020,
            threads: 0,
            ingest: IngestConfig::default(),
            basis: BasisConfig::default(),
            fieldfit: FieldFitConfig::default(),
            noise: NoiseConfig::default(),
            calibration: CalibrationConfig::default(),
            predict: PredictConfig::default(),
            eval: EvalConfig::default(),
            explore: ExploreConfig::default(),
            sim: SimConfig::default(),
            colocated: ColocatedConfig::default(),
        };
        c.apply_seed();
        c
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut c = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("config {}", p.display()))?
            }
            None => Self::default(),
        };
        c.apply_seed();
        Ok(c)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply_seed(&mut self) {
        self.sim.seed = self.seed;
        self.colocated.seed = self.seed.wrapping_add(1);
        self.eval.seed = self.seed;
    }

    /// Writes `config.toml` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), self.to_toml())?;
        Ok(())
    }
}
