//! Synthetic two-network data with known truth.
//!
//! Per hour: `y = φ′α_t + η_t`, sensors see `z = y + ε` with the noise law's
//! variance at `y`, reference stations see `z* = f₀ + f₁·y + ξ`. A fraction
//! of sensor values is replaced by gross outliers.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{build_basis, level_schedule, BasisConfig, BasisSet};
use crate::error::{Error, Result};
use crate::fieldfit::{residuals_of, HourlyParams};
use crate::geom::{HourlyPanel, Location, Sites};
use crate::ingest::PanelSeries;
use crate::noise_model::{ColocatedSeries, NoiseModel};
use crate::predict::CalibrationSurface;
use crate::spatial_cov::ExpCov;

/// 2020-01-01T00:00Z in hours since the epoch.
pub const DEFAULT_START_HOUR: i64 = 438_288;

/// `base + gx·(x/W − ½) + gy·(y/H − ½) + bump·exp(−r²/2ρ²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothField {
    pub base: f64,
    pub grad_x: f64,
    pub grad_y: f64,
    pub bump: f64,
    /// Bump centre as fractions of the domain extent.
    pub bump_x: f64,
    pub bump_y: f64,
    /// Bump radius in km.
    pub bump_radius: f64,
}

impl Default for SmoothField {
    fn default() -> Self {
        Self::constant(0.0)
    }
}

impl SmoothField {
    pub fn constant(c: f64) -> Self {
        Self {
            base: c,
            grad_x: 0.0,
            grad_y: 0.0,
            bump: 0.0,
            bump_x: 0.5,
            bump_y: 0.5,
            bump_radius: 10.0,
        }
    }

    pub fn at(&self, s: &Location, width: f64, height: f64) -> f64 {
        let dx = s.x - self.bump_x * width;
        let dy = s.y - self.bump_y * height;
        let r2 = (dx * dx + dy * dy) / (2.0 * self.bump_radius * self.bump_radius);
        self.base + self.grad_x * (s.x / width - 0.5) + self.grad_y * (s.y / height - 0.5) + self.bump * (-r2).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_airbox: usize,
    pub n_epa: usize,
    pub hours: usize,
    pub start_hour: i64,
    pub width_km: f64,
    pub height_km: f64,
    /// Basis used for the true trend.
    pub basis: BasisConfig,
    /// Mean and hour-to-hour SD of the constant trend coefficient.
    pub level: f64,
    pub level_sd: f64,
    /// SD of the other trend coefficients at the coarsest radial level;
    /// halved at each finer level.
    pub trend_sd: f64,
    pub cov: ExpCov,
    /// Per-hour multiplicative spread: `v²` and `λ` are scaled by
    /// `exp(U(−s, s))` independently. 0 keeps them constant.
    pub cov_spread: f64,
    pub noise: NoiseModel,
    pub f0: SmoothField,
    pub f1: SmoothField,
    pub sigma_xi2: f64,
    pub outlier_frac: f64,
    pub outlier_magnitude: f64,
    pub airbox_missing: f64,
    pub epa_missing: f64,
    /// The first `colocated` reference stations sit on sensor sites.
    pub colocated: usize,
    pub seed: u64,
    /// Largest site count for the dense factorization.
    pub max_dense_sites: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_airbox: 400,
            n_epa: 30,
            hours: 200,
            start_hour: DEFAULT_START_HOUR,
            width_km: 100.0,
            height_km: 160.0,
            basis: BasisConfig::default(),
            level: 30.0,
            level_sd: 8.0,
            trend_sd: 6.0,
            cov: ExpCov { v2: 9.0, lambda: 3.0 },
            cov_spread: 0.0,
            noise: NoiseModel {
                a0: 0.5,
                a1: 0.02,
                a2: 0.5,
                a3: 25.0,
            },
            f0: SmoothField {
                base: 2.0,
                grad_x: 0.0,
                grad_y: -3.0,
                bump: -2.0,
                bump_x: 0.6,
                bump_y: 0.35,
                bump_radius: 20.0,
            },
            f1: SmoothField {
                base: 0.85,
                grad_x: 0.05,
                grad_y: 0.25,
                bump: 0.15,
                bump_x: 0.4,
                bump_y: 0.7,
                bump_radius: 25.0,
            },
            sigma_xi2: 0.0,
            outlier_frac: 0.01,
            outlier_magnitude: 40.0,
            airbox_missing: 0.05,
            epa_missing: 0.05,
            colocated: 0,
            seed: 2020,
            max_dense_sites: 6000,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.n_airbox == 0 || self.n_epa == 0 || self.hours == 0 {
            return bad("site and hour counts must be at least 1".into());
        }
        if !(self.width_km > 0.0 && self.height_km > 0.0) {
            return bad("domain extent must be positive".into());
        }
        if !(0.0..0.5).contains(&self.outlier_frac) {
            return bad(format!("outlier fraction {} not in [0, 0.5)", self.outlier_frac));
        }
        for (name, p) in [("airbox_missing", self.airbox_missing), ("epa_missing", self.epa_missing)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} {p} not in [0, 1)"));
            }
        }
        if !(self.sigma_xi2 >= 0.0 && self.cov_spread >= 0.0 && self.level_sd >= 0.0 && self.trend_sd >= 0.0) {
            return bad("variances and spreads must be non-negative".into());
        }
        if self.colocated > self.n_epa.min(self.n_airbox) {
            return bad("more colocated stations than sites".into());
        }
        ExpCov::new(self.cov.v2, self.cov.lambda)?;
        NoiseModel::new(self.noise.a0, self.noise.a1, self.noise.a2, self.noise.a3)?;
        if self.n_airbox + self.n_epa > self.max_dense_sites {
            return bad(format!(
                "{} sites exceed the dense factorization budget of {}; lower n_airbox/n_epa or raise max_dense_sites",
                self.n_airbox + self.n_epa,
                self.max_dense_sites
            ));
        }
        Ok(())
    }

    /// The true calibration as a surface.
    pub fn calibration(&self) -> TrueCalibration {
        TrueCalibration {
            f0: self.f0,
            f1: self.f1,
            width: self.width_km,
            height: self.height_km,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrueCalibration {
    pub f0: SmoothField,
    pub f1: SmoothField,
    pub width: f64,
    pub height: f64,
}

impl CalibrationSurface for TrueCalibration {
    fn coefficients(&self, s: &Location) -> (f64, f64) {
        (self.f0.at(s, self.width, self.height), self.f1.at(s, self.width, self.height))
    }
}

/// Every latent quantity of one simulated hour.
#[derive(Clone, Debug, PartialEq)]
pub struct HourTruth {
    pub hour: i64,
    pub alpha: Vec<f64>,
    pub cov: ExpCov,
    /// Hidden field at sensor and reference sites.
    pub y_airbox: Vec<f64>,
    pub y_epa: Vec<f64>,
    pub eta_airbox: Vec<f64>,
    pub eta_epa: Vec<f64>,
    pub eps: Vec<f64>,
    pub xi: Vec<f64>,
    /// Replacement value where a sensor reading is an outlier.
    pub outlier: Vec<Option<f64>>,
    pub airbox_missing: Vec<bool>,
    pub epa_missing: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct SimTruth {
    pub config: SimConfig,
    pub basis: BasisSet,
    pub airbox_sites: Sites,
    pub epa_sites: Sites,
    pub hours: Vec<HourTruth>,
}

impl SimTruth {
    /// Per-hour parameters set to the truth, with residuals computed from
    /// the observed panels.
    pub fn true_params(&self, series: &PanelSeries) -> Vec<HourlyParams> {
        series
            .panels
            .iter()
            .zip(&self.hours)
            .map(|(p, h)| {
                let (present, residuals) = residuals_of(p, &self.basis, None, &h.alpha, &[]);
                HourlyParams {
                    hour: h.hour,
                    alpha: h.alpha.clone(),
                    beta: Vec::new(),
                    cov: h.cov,
                    present,
                    residuals,
                    huber_scale: 0.0,
                    converged: true,
                    cov_degenerate: false,
                }
            })
            .collect()
    }

    /// Rebuilds the observations from the latent record.
    pub fn replay(&self) -> Result<PanelSeries> {
        let cal = self.config.calibration();
        let panels = self
            .hours
            .iter()
            .map(|h| {
                let airbox = (0..h.y_airbox.len())
                    .map(|i| (!h.airbox_missing[i]).then(|| h.outlier[i].unwrap_or(h.y_airbox[i] + h.eps[i])))
                    .collect();
                let epa = self
                    .epa_sites
                    .iter()
                    .enumerate()
                    .map(|(j, s)| {
                        let (f0, f1) = cal.coefficients(s);
                        (!h.epa_missing[j]).then(|| f0 + f1 * h.y_epa[j] + h.xi[j])
                    })
                    .collect();
                HourlyPanel::new(h.hour, self.airbox_sites.clone(), self.epa_sites.clone(), airbox, epa)
            })
            .collect::<Result<Vec<_>>>()?;
        PanelSeries::new(self.airbox_sites.clone(), self.epa_sites.clone(), panels)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// One noise draw with the law's variance at `y` (negative variances read as 0).
pub fn noise_draw(model: &NoiseModel, y: f64, rng: &mut ChaCha8Rng) -> f64 {
    model.variance_at(y).max(0.0).sqrt() * normal(rng)
}

fn place_sites(cfg: &SimConfig) -> (Vec<Location>, Vec<Location>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pt = |rng: &mut ChaCha8Rng| (rng.random::<f64>() * cfg.width_km, rng.random::<f64>() * cfg.height_km);
    let airbox: Vec<Location> = (0..cfg.n_airbox)
        .map(|i| {
            let (x, y) = pt(&mut rng);
            Location::at(format!("AB{:04}", i + 1), x, y)
        })
        .collect();
    let epa = (0..cfg.n_epa)
        .map(|j| {
            let id = format!("EPA{:02}", j + 1);
            if j < cfg.colocated {
                // spread colocated stations over the registry
                let a = &airbox[j * cfg.n_airbox / cfg.colocated];
                Location::at(id, a.x, a.y)
            } else {
                let (x, y) = pt(&mut rng);
                Location::at(id, x, y)
            }
        })
        .collect();
    (airbox, epa)
}

/// Distinct locations of the concatenated registry, with each site's slot.
fn unique_locations(sites: &[Location]) -> (Vec<Location>, Vec<usize>) {
    let mut slot = HashMap::new();
    let mut uniq = Vec::new();
    let map = sites
        .iter()
        .map(|s| {
            *slot.entry((s.x.to_bits(), s.y.to_bits())).or_insert_with(|| {
                uniq.push(s.clone());
                uniq.len() - 1
            })
        })
        .collect();
    (uniq, map)
}

fn cov_factor(cov: &ExpCov, sites: &[Location]) -> Result<DMatrix<f64>> {
    let n = sites.len();
    let m = DMatrix::from_fn(n, n, |i, j| cov.at(sites[i].distance(&sites[j])));
    crate::linalg::cholesky_with_jitter(m).map(|(c, _)| c.l())
}

/// Draws a zero-mean field with covariance `cov` at `sites`.
pub fn sample_field(l: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let g = DVector::from_fn(l.nrows(), |_, _| normal(rng));
    (l * g).iter().copied().collect()
}

/// RNG for hour `t` (stream `t + 1` of the seed; stream 0 places sites).
pub fn hour_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(t as u64 + 1);
    r
}

/// Simulates the panel series and returns it with the full truth record.
pub fn simulate(cfg: &SimConfig) -> Result<(PanelSeries, SimTruth)> {
    cfg.validate()?;
    let (airbox, epa) = place_sites(cfg);
    let basis = build_basis(&airbox, &cfg.basis)?;
    let all: Vec<Location> = epa.iter().chain(&airbox).cloned().collect();
    let (uniq, slot) = unique_locations(&all);
    let fixed = if cfg.cov_spread == 0.0 {
        Some(cov_factor(&cfg.cov, &uniq)?)
    } else {
        None
    };
    let sizes = level_schedule(cfg.basis.k);
    let coef_sd: Vec<f64> = sizes
        .iter()
        .enumerate()
        .flat_map(|(lvl, &k)| {
            let sd = if lvl == 0 {
                cfg.level_sd
            } else {
                cfg.trend_sd * 0.5f64.powi(lvl as i32 - 1)
            };
            std::iter::repeat_n(sd, k)
        })
        .collect();
    let phi_a = basis.evaluate(&airbox);
    let phi_e = basis.evaluate(&epa);
    let m = epa.len();
    let n = airbox.len();

    let hours: Vec<HourTruth> = (0..cfg.hours)
        .into_par_iter()
        .map(|t| -> Result<HourTruth> {
            let mut rng = hour_rng(cfg.seed, t);
            let alpha: Vec<f64> = coef_sd
                .iter()
                .enumerate()
                .map(|(k, sd)| if k == 0 { cfg.level } else { 0.0 } + sd * normal(&mut rng))
                .collect();
            let cov = if cfg.cov_spread == 0.0 {
                cfg.cov
            } else {
                let u1: f64 = rng.random_range(-cfg.cov_spread..cfg.cov_spread);
                let u2: f64 = rng.random_range(-cfg.cov_spread..cfg.cov_spread);
                ExpCov::new(cfg.cov.v2 * u1.exp(), cfg.cov.lambda * u2.exp())?
            };
            let own;
            let l = match &fixed {
                Some(l) => l,
                None => {
                    own = cov_factor(&cov, &uniq)?;
                    &own
                }
            };
            let field = sample_field(l, &mut rng);
            let eta: Vec<f64> = slot.iter().map(|&k| field[k]).collect();
            let (eta_epa, eta_airbox) = eta.split_at(m);
            let a = DVector::from_vec(alpha.clone());
            let trend_a = &phi_a * &a;
            let trend_e = &phi_e * &a;
            let y_airbox: Vec<f64> = (0..n).map(|i| trend_a[i] + eta_airbox[i]).collect();
            let y_epa: Vec<f64> = (0..m).map(|j| trend_e[j] + eta_epa[j]).collect();
            let eps: Vec<f64> = y_airbox.iter().map(|y| noise_draw(&cfg.noise, *y, &mut rng)).collect();
            let xi: Vec<f64> = (0..m).map(|_| cfg.sigma_xi2.sqrt() * normal(&mut rng)).collect();
            let outlier: Vec<Option<f64>> = y_airbox
                .iter()
                .map(|y| {
                    let hit = rng.random::<f64>() < cfg.outlier_frac;
                    let u: f64 = rng.random();
                    hit.then(|| y + cfg.outlier_magnitude * (1.0 + u))
                })
                .collect();
            let airbox_missing = (0..n).map(|_| rng.random::<f64>() < cfg.airbox_missing).collect();
            let epa_missing = (0..m).map(|_| rng.random::<f64>() < cfg.epa_missing).collect();
            Ok(HourTruth {
                hour: cfg.start_hour + t as i64,
                alpha,
                cov,
                y_airbox,
                y_epa,
                eta_airbox: eta_airbox.to_vec(),
                eta_epa: eta_epa.to_vec(),
                eps,
                xi,
                outlier,
                airbox_missing,
                epa_missing,
            })
        })
        .collect::<Result<_>>()?;

    let truth = SimTruth {
        config: cfg.clone(),
        basis,
        airbox_sites: airbox.into(),
        epa_sites: epa.into(),
        hours,
    };
    let series = truth.replay()?;
    Ok((series, truth))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColocatedConfig {
    pub sensors: usize,
    pub hours: usize,
    pub noise: NoiseModel,
    /// `y_t` is log-normal with this median and log-SD.
    pub median: f64,
    pub log_sd: f64,
    /// Sensors that never report.
    pub dead: usize,
    /// Sensors reporting independent noise around the series mean.
    pub decorrelated: usize,
    pub seed: u64,
}

impl Default for ColocatedConfig {
    fn default() -> Self {
        Self {
            sensors: 25,
            hours: 5000,
            noise: SimConfig::default().noise,
            median: 25.0,
            log_sd: 0.4,
            dead: 0,
            decorrelated: 0,
            seed: 25,
        }
    }
}

/// Sensors at one location observing a shared latent series.
pub fn colocated_sim(cfg: &ColocatedConfig) -> Result<ColocatedSeries> {
    if cfg.sensors < 2 {
        return Err(Error::InvalidInput("colocated simulation needs at least 2 sensors".into()));
    }
    if cfg.dead + cfg.decorrelated > cfg.sensors {
        return Err(Error::InvalidInput("more faulty sensors than sensors".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let healthy = cfg.sensors - cfg.dead - cfg.decorrelated;
    let values = (0..cfg.hours)
        .map(|_| {
            let y = cfg.median * (cfg.log_sd * normal(&mut rng)).exp();
            (0..cfg.sensors)
                .map(|k| {
                    if k < healthy {
                        Some(y + noise_draw(&cfg.noise, y, &mut rng))
                    } else if k < healthy + cfg.dead {
                        None
                    } else {
                        Some(cfg.median + 5.0 * normal(&mut rng))
                    }
                })
                .collect()
        })
        .collect();
    let names = (0..cfg.sensors).map(|k| format!("S{:02}", k + 1)).collect();
    let hours = (0..cfg.hours as i64).map(|t| DEFAULT_START_HOUR + t).collect();
    ColocatedSeries::new(names, hours, values)
}
