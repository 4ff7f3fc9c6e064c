//! Kriging predictors of the hidden field and of the reference-scale field,
//! their variances, and the standardized residuals used for diagnostics.
//!
//! Every predictor is built on one block system per hour. Rows are ordered
//! reference (EPA) sites first, then the present sensor (AirBox) sites:
//!
//! ```text
//! M = D Σ* D + diag(σ²_ξ I, Σ_ε),   D = diag(F₁, I)
//! ```
//!
//! With no reference rows this is `Σ_η + Σ_ε`, so the sensor-only
//! predictor is the fused one with `m = 0`.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::error::{Error, Result};
use crate::fieldfit::HourlyParams;
use crate::geom::{HourlyPanel, Location};
use crate::linalg::{backward_solve, cholesky_with_jitter, dot, forward_solve};
use crate::noise_model::{site_variances, NoiseModel, PlugIn};
use crate::spatial_cov::ExpCov;

/// Ridge on the reference block when `σ²_ξ = 0`, relative to `v²`.
pub const RIDGE: f64 = 1e-6;

/// A calibration `y* = f₀(s) + f₁(s)·y` that can be evaluated anywhere.
pub trait CalibrationSurface: Sync {
    /// `(f₀(s), f₁(s))`.
    fn coefficients(&self, loc: &Location) -> (f64, f64);
}

/// Spatially constant calibration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub f0: f64,
    pub f1: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { f0: 0.0, f1: 1.0 };
}

impl CalibrationSurface for Affine {
    fn coefficients(&self, _: &Location) -> (f64, f64) {
        (self.f0, self.f1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// EBLP of the hidden field `y`.
    Hidden,
    /// Calibrated prediction of `y*` from sensor data only.
    AirboxOnly,
    /// Calibrated prediction of `y*` from both networks.
    Fused,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Hidden => "hidden",
            Method::AirboxOnly => "airbox_only",
            Method::Fused => "fused",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSurface {
    pub hour: i64,
    pub method: Method,
    pub targets: Vec<Location>,
    /// `f₀(s) + f₁(s)·latent`.
    pub mean: Vec<f64>,
    /// `f₁(s)²·(v² − c*′M⁻¹c*)`, clamped at 0.
    pub variance: Vec<f64>,
    /// Prediction on the hidden scale: trend plus kriged `η`.
    pub latent: Vec<f64>,
    pub f0: Vec<f64>,
    pub f1: Vec<f64>,
    /// Negative variances set to zero.
    pub clamped: usize,
    /// The reference block carried the `σ²_ξ = 0` ridge.
    pub ridge: bool,
    /// The block matrix needed diagonal jitter to factor.
    pub jitter: bool,
}

impl PredictionSurface {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// CSV with columns `id,x,y,mean,variance`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["id", "x", "y", "mean", "variance"])?;
        for ((t, m), v) in self.targets.iter().zip(&self.mean).zip(&self.variance) {
            out.write_record([t.id.clone(), t.x.to_string(), t.y.to_string(), m.to_string(), v.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// How sensor noise variances are obtained for an hour.
#[derive(Clone, Debug, PartialEq)]
pub enum SensorNoise {
    /// From the noise law at the observed values.
    Model { model: NoiseModel, plug: PlugIn, trim: f64 },
    /// Supplied directly, one per present sensor observation.
    Given(Vec<f64>),
}

impl From<&NoiseModel> for SensorNoise {
    fn from(m: &NoiseModel) -> Self {
        SensorNoise::Model {
            model: *m,
            plug: PlugIn::Observed,
            trim: 0.1,
        }
    }
}

/// The factored block system for one hour.
#[derive(Clone, Debug)]
pub struct HourSystem {
    pub hour: i64,
    pub cov: ExpCov,
    /// Reference sites (present rows) followed by sensor sites (present rows).
    pub sites: Vec<Location>,
    /// Number of reference rows.
    pub m: usize,
    /// `f₁` at reference rows, 1 at sensor rows.
    pub scale: Vec<f64>,
    /// Observation minus its prior mean, per row.
    pub resid: Vec<f64>,
    /// Diagonal noise: `σ²_ξ` (plus ridge) then `Σ_ε`.
    pub noise: Vec<f64>,
    /// Present sensor indices into the registry.
    pub airbox_index: Vec<usize>,
    pub ridge: bool,
    pub jitter: bool,
    l: DMatrix<f64>,
    /// `L⁻¹·resid`.
    u: Vec<f64>,
}

/// Reference-side inputs of the fused system.
pub struct ReferenceInput<'a> {
    pub field: &'a dyn CalibrationSurface,
    pub sigma_xi2: f64,
}

impl HourSystem {
    /// Assembles and factors the block matrix. With `reference = None` only
    /// the sensor rows are used.
    pub fn build(
        params: &HourlyParams,
        panel: &HourlyPanel,
        basis: &BasisSet,
        noise: &SensorNoise,
        reference: Option<ReferenceInput<'_>>,
    ) -> Result<Self> {
        if !params.beta.is_empty() {
            return Err(Error::InvalidInput(
                "prediction with covariates needs covariate values at targets; fit with p = 0".into(),
            ));
        }
        let obs = panel.present_airbox();
        if obs.index != params.present || obs.len() != params.residuals.len() {
            return Err(Error::InvalidInput(format!(
                "hour {}: parameters were fitted on different sensor rows",
                panel.hour
            )));
        }
        let sensor_var = match noise {
            SensorNoise::Model { model, plug, trim } => {
                if obs.is_empty() {
                    Vec::new()
                } else {
                    site_variances(model, &obs.values, *plug, *trim)?
                }
            }
            SensorNoise::Given(v) => {
                if v.len() != obs.len() {
                    return Err(Error::InvalidInput(format!(
                        "{} noise variances for {} sensor observations",
                        v.len(),
                        obs.len()
                    )));
                }
                v.clone()
            }
        };
        if sensor_var.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidInput("sensor noise variances must be finite and non-negative".into()));
        }

        let cov = params.cov;
        let mut sites = Vec::new();
        let mut scale = Vec::new();
        let mut resid = Vec::new();
        let mut diag = Vec::new();
        let mut ridge = false;
        if let Some(r) = &reference {
            if !(r.sigma_xi2.is_finite() && r.sigma_xi2 >= 0.0) {
                return Err(Error::InvalidInput("sigma_xi2 must be finite and non-negative".into()));
            }
            let epa = panel.present_epa();
            let extra = if r.sigma_xi2 == 0.0 && !epa.is_empty() {
                ridge = true;
                RIDGE * cov.v2
            } else {
                0.0
            };
            for (s, z) in epa.sites.iter().zip(&epa.values) {
                let (f0, f1) = r.field.coefficients(s);
                if !(f0.is_finite() && f1.is_finite()) {
                    return Err(Error::InvalidInput(format!("calibration is not finite at {}", s.id)));
                }
                resid.push(z - f0 - f1 * basis.trend_at(s, &params.alpha));
                scale.push(f1);
                diag.push(r.sigma_xi2 + extra);
                sites.push(s.clone());
            }
        }
        let m = sites.len();
        sites.extend(obs.sites.iter().cloned());
        scale.extend(std::iter::repeat_n(1.0, obs.len()));
        resid.extend_from_slice(&params.residuals);
        diag.extend_from_slice(&sensor_var);

        let n = sites.len();
        if n == 0 {
            return Err(Error::InvalidInput(format!("hour {}: no observations to predict from", panel.hour)));
        }
        let mat = DMatrix::from_fn(n, n, |i, j| {
            let c = scale[i] * scale[j] * cov.at(sites[i].distance(&sites[j]));
            if i == j {
                c + diag[i]
            } else {
                c
            }
        });
        let (chol, jitter) = cholesky_with_jitter(mat).map_err(|e| e.at_hour(panel.hour))?;
        let l = chol.l();
        let u = forward_solve(&l, &resid);
        Ok(Self {
            hour: panel.hour,
            cov,
            sites,
            m,
            scale,
            resid,
            noise: diag,
            airbox_index: obs.index,
            ridge,
            jitter,
            l,
            u,
        })
    }

    /// `c*(s)`: scaled covariances between the target and every row.
    pub fn cross(&self, s: &Location) -> Vec<f64> {
        self.sites
            .iter()
            .zip(&self.scale)
            .map(|(p, f)| f * self.cov.at(s.distance(p)))
            .collect()
    }

    /// `(c*′M⁻¹r, c*′M⁻¹c*)` at one target.
    pub fn krige(&self, s: &Location) -> (f64, f64) {
        let w = forward_solve(&self.l, &self.cross(s));
        (dot(&w, &self.u), dot(&w, &w))
    }

    /// `M⁻¹r`.
    pub fn weights(&self) -> Vec<f64> {
        backward_solve(&self.l, &self.u)
    }

    /// Diagonal of `M⁻¹`.
    pub fn inverse_diagonal(&self) -> Vec<f64> {
        let n = self.sites.len();
        let linv = self
            .l
            .clone()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .expect("Cholesky factor has a positive diagonal");
        (0..n).map(|i| (i..n).map(|k| linv[(k, i)] * linv[(k, i)]).sum()).collect()
    }

    /// Predicts at `targets`; `field = None` gives the hidden-scale EBLP.
    pub fn predict(
        &self,
        params: &HourlyParams,
        basis: &BasisSet,
        field: Option<&dyn CalibrationSurface>,
        method: Method,
        targets: &[Location],
    ) -> PredictionSurface {
        let rows: Vec<(f64, f64, f64, f64, f64, bool)> = targets
            .par_iter()
            .map(|s| {
                let (h, q) = self.krige(s);
                let latent = basis.trend_at(s, &params.alpha) + h;
                let (f0, f1) = field.map_or((0.0, 1.0), |f| f.coefficients(s));
                let mean = if field.is_some() { f0 + f1 * latent } else { latent };
                let lv = self.cov.v2 - q;
                let var = if field.is_some() { f1 * f1 * lv } else { lv };
                let neg = var < 0.0;
                (mean, var.max(0.0), latent, f0, f1, neg)
            })
            .collect();
        PredictionSurface {
            hour: self.hour,
            method,
            targets: targets.to_vec(),
            mean: rows.iter().map(|r| r.0).collect(),
            variance: rows.iter().map(|r| r.1).collect(),
            latent: rows.iter().map(|r| r.2).collect(),
            f0: rows.iter().map(|r| r.3).collect(),
            f1: rows.iter().map(|r| r.4).collect(),
            clamped: rows.iter().filter(|r| r.5).count(),
            ridge: self.ridge,
            jitter: self.jitter,
        }
    }
}

/// EBLP of the hidden field from sensor data.
pub fn eblp_hidden(
    params: &HourlyParams,
    panel: &HourlyPanel,
    basis: &BasisSet,
    noise: &NoiseModel,
    targets: &[Location],
) -> Result<PredictionSurface> {
    let sys = HourSystem::build(params, panel, basis, &noise.into(), None)?;
    Ok(sys.predict(params, basis, None, Method::Hidden, targets))
}

/// Calibrated predictor of `y*` from sensor data only, with its variance.
pub fn predict_airbox_only(
    params: &HourlyParams,
    panel: &HourlyPanel,
    basis: &BasisSet,
    noise: &NoiseModel,
    field: &dyn CalibrationSurface,
    targets: &[Location],
) -> Result<PredictionSurface> {
    let sys = HourSystem::build(params, panel, basis, &noise.into(), None)?;
    Ok(sys.predict(params, basis, Some(field), Method::AirboxOnly, targets))
}

/// Calibrated predictor of `y*` from both networks, with its variance.
pub fn predict_fused(
    params: &HourlyParams,
    panel: &HourlyPanel,
    basis: &BasisSet,
    noise: &NoiseModel,
    field: &dyn CalibrationSurface,
    sigma_xi2: f64,
    targets: &[Location],
) -> Result<PredictionSurface> {
    let sys = HourSystem::build(
        params,
        panel,
        basis,
        &noise.into(),
        Some(ReferenceInput { field, sigma_xi2 }),
    )?;
    Ok(sys.predict(params, basis, Some(field), Method::Fused, targets))
}

/// Standardized residuals at the present sensor sites.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardizedResiduals {
    pub hour: i64,
    /// Registry indices of the present sensor observations.
    pub index: Vec<usize>,
    /// `None` where the site has zero noise variance.
    pub values: Vec<Option<f64>>,
    pub excluded: usize,
}

/// Standardized residuals from a built fused (or sensor-only) system.
///
/// At a sensor row the prediction error `z − ŷ` equals `σ²_ε·[M⁻¹r]_i`, and
/// its variance is `σ⁴_ε·[M⁻¹]_ii`.
pub fn standardized_from_system(
    sys: &HourSystem,
    field: &dyn CalibrationSurface,
) -> Result<StandardizedResiduals> {
    let n = sys.sites.len() - sys.m;
    for s in &sys.sites[sys.m..] {
        let (_, f1) = field.coefficients(s);
        if f1 == 0.0 {
            return Err(Error::ZeroSlope(s.id.clone()));
        }
    }
    let w = sys.weights();
    let d = sys.inverse_diagonal();
    let mut values = Vec::with_capacity(n);
    let mut excluded = 0;
    for i in 0..n {
        let row = sys.m + i;
        let s2 = sys.noise[row];
        if s2 <= 0.0 {
            values.push(None);
            excluded += 1;
            continue;
        }
        let num = s2 * w[row];
        let sd = (s2 * s2 * d[row]).sqrt();
        values.push(Some(num / sd));
    }
    Ok(StandardizedResiduals {
        hour: sys.hour,
        index: sys.airbox_index.clone(),
        values,
        excluded,
    })
}

pub fn standardized_residuals(
    params: &HourlyParams,
    panel: &HourlyPanel,
    basis: &BasisSet,
    noise: &NoiseModel,
    field: &dyn CalibrationSurface,
    sigma_xi2: f64,
) -> Result<StandardizedResiduals> {
    let sys = HourSystem::build(
        params,
        panel,
        basis,
        &noise.into(),
        Some(ReferenceInput { field, sigma_xi2 }),
    )?;
    standardized_from_system(&sys, field)
}
