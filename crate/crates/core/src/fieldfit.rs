//! Per-hour estimation of the trend coefficients and the covariance of the
//! hidden process: Huber regression on the basis, then a robust binned
//! covariance fit to its residuals.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::error::{Error, Result};
use crate::geom::{HourlyPanel, Location};
use crate::ingest::PanelSeries;
use crate::robust::{huber_regress, mad, HuberConfig};
use crate::spatial_cov::{
    fit_expcov_wls_capped, robust_binned_cov, BinConfig, BinWeighting, ExpCov, LAMBDA_MAX, LAMBDA_MIN,
    V2_FLOOR,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldFitConfig {
    pub huber: HuberConfig,
    pub bins: BinConfig,
    pub weighting: BinWeighting,
    /// Abort the series when more than this fraction of hours fail.
    pub max_fail_frac: f64,
}

impl Default for FieldFitConfig {
    fn default() -> Self {
        Self {
            huber: HuberConfig::default(),
            bins: BinConfig::default(),
            weighting: BinWeighting::Unweighted,
            max_fail_frac: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HourlyParams {
    pub hour: i64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub cov: ExpCov,
    /// Indices (into the sensor registry) of the present observations.
    pub present: Vec<usize>,
    /// `z − Φα − Xβ` on the present rows.
    pub residuals: Vec<f64>,
    pub huber_scale: f64,
    pub converged: bool,
    /// Covariance fit had no usable signal (or hit a range bound).
    pub cov_degenerate: bool,
}

impl HourlyParams {
    /// Trend `φ(s)′α + x(s)′β` at one location.
    pub fn trend_at(&self, basis: &BasisSet, loc: &Location, x: Option<&[f64]>) -> f64 {
        let mut t = basis.trend_at(loc, &self.alpha);
        if let Some(x) = x {
            t += x.iter().zip(&self.beta).map(|(a, b)| a * b).sum::<f64>();
        }
        t
    }
}

fn design(basis: &BasisSet, sites: &[Location], rows: &[usize], cov: Option<&DMatrix<f64>>) -> DMatrix<f64> {
    let phi = basis.evaluate(&rows.iter().map(|&i| sites[i].clone()).collect::<Vec<_>>());
    match cov {
        None => phi,
        Some(x) => {
            let k = phi.ncols();
            let p = x.ncols();
            DMatrix::from_fn(rows.len(), k + p, |i, j| {
                if j < k {
                    phi[(i, j)]
                } else {
                    x[(rows[i], j - k)]
                }
            })
        }
    }
}

/// Residuals `z − Φα − Xβ` for the present rows of a panel.
pub fn residuals_of(
    panel: &HourlyPanel,
    basis: &BasisSet,
    covariates: Option<&DMatrix<f64>>,
    alpha: &[f64],
    beta: &[f64],
) -> (Vec<usize>, Vec<f64>) {
    let obs = panel.present_airbox();
    let res = obs
        .index
        .iter()
        .zip(&obs.values)
        .map(|(&i, z)| {
            let s = &panel.airbox_sites[i];
            let mut t: f64 = basis.row(s.x, s.y).iter().zip(alpha).map(|(a, b)| a * b).sum();
            if let Some(x) = covariates {
                t += (0..x.ncols()).map(|j| x[(i, j)] * beta[j]).sum::<f64>();
            }
            z - t
        })
        .collect();
    (obs.index, res)
}

/// Fits one hour. `covariates` (optional) has one row per registry site.
pub fn fit_hour(
    panel: &HourlyPanel,
    basis: &BasisSet,
    covariates: Option<&DMatrix<f64>>,
    cfg: &FieldFitConfig,
) -> Result<HourlyParams> {
    fit_hour_inner(panel, basis, covariates, cfg).map_err(|e| e.at_hour(panel.hour))
}

fn fit_hour_inner(
    panel: &HourlyPanel,
    basis: &BasisSet,
    covariates: Option<&DMatrix<f64>>,
    cfg: &FieldFitConfig,
) -> Result<HourlyParams> {
    if let Some(x) = covariates {
        if x.nrows() != panel.airbox_sites.len() {
            return Err(Error::InvalidInput(format!(
                "covariates have {} rows for {} sites",
                x.nrows(),
                panel.airbox_sites.len()
            )));
        }
    }
    let obs = panel.present_airbox();
    let x = design(basis, &panel.airbox_sites, &obs.index, covariates);
    let fit = huber_regress(&x, &obs.values, &cfg.huber)?;
    let k = basis.k();
    let alpha = fit.coef[..k].to_vec();
    let beta = fit.coef[k..].to_vec();
    let (present, residuals) = residuals_of(panel, basis, covariates, &alpha, &beta);

    let zmax = obs.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (cov, cov_degenerate) = if fit.scale <= 1e-10 * (1.0 + zmax) {
        (
            ExpCov {
                v2: V2_FLOOR,
                lambda: (LAMBDA_MIN * LAMBDA_MAX).sqrt(),
            },
            true,
        )
    } else {
        let binned = robust_binned_cov(&residuals, &obs.sites, &cfg.bins)?;
        // the sill cannot exceed the variance of the residuals themselves
        let cap = mad(&residuals)?.powi(2).max(V2_FLOOR);
        let w = fit_expcov_wls_capped(&binned, cfg.weighting, cap)?;
        (w.cov, w.degenerate)
    };
    Ok(HourlyParams {
        hour: panel.hour,
        alpha,
        beta,
        cov,
        present,
        residuals,
        huber_scale: fit.scale,
        converged: fit.converged,
        cov_degenerate,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesFit {
    pub params: Vec<HourlyParams>,
    /// (hour, message) for hours that failed.
    pub failures: Vec<(i64, String)>,
}

/// Independent fits of every hour; failed hours are recorded.
pub fn fit_series(
    series: &PanelSeries,
    basis: &BasisSet,
    covariates: Option<&[DMatrix<f64>]>,
    cfg: &FieldFitConfig,
) -> Result<SeriesFit> {
    if let Some(c) = covariates {
        if c.len() != series.panels.len() {
            return Err(Error::InvalidInput("one covariate matrix per hour required".into()));
        }
    }
    let results: Vec<Result<HourlyParams>> = series
        .panels
        .par_iter()
        .enumerate()
        .map(|(t, p)| fit_hour(p, basis, covariates.map(|c| &c[t]), cfg))
        .collect();
    let total = results.len();
    let mut params = Vec::new();
    let mut failures = Vec::new();
    for (p, r) in series.panels.iter().zip(results) {
        match r {
            Ok(h) => params.push(h),
            Err(e) => {
                log::warn!("{e}");
                failures.push((p.hour, e.to_string()));
            }
        }
    }
    if total > 0 && failures.len() as f64 > cfg.max_fail_frac * total as f64 {
        return Err(Error::TooManyFailures {
            failed: failures.len(),
            total,
            first: failures[0].1.clone(),
        });
    }
    Ok(SeriesFit { params, failures })
}

/// Columnar CSV: hour, alpha_1..alpha_K, beta_1..beta_p, v2, lambda,
/// huber_scale, converged, degenerate.
pub fn write_params_csv<W: Write>(params: &[HourlyParams], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let k = params.first().map_or(0, |p| p.alpha.len());
    let p = params.first().map_or(0, |p| p.beta.len());
    let mut header = vec!["hour".to_string()];
    header.extend((1..=k).map(|i| format!("alpha_{i}")));
    header.extend((1..=p).map(|i| format!("beta_{i}")));
    header.extend(["v2", "lambda", "huber_scale", "converged", "degenerate"].map(String::from));
    wr.write_record(&header)?;
    for h in params {
        if h.alpha.len() != k || h.beta.len() != p {
            return Err(Error::InvalidInput("hours disagree on K or p".into()));
        }
        let mut rec = vec![h.hour.to_string()];
        rec.extend(h.alpha.iter().chain(&h.beta).map(|v| v.to_string()));
        rec.push(h.cov.v2.to_string());
        rec.push(h.cov.lambda.to_string());
        rec.push(h.huber_scale.to_string());
        rec.push((h.converged as u8).to_string());
        rec.push((h.cov_degenerate as u8).to_string());
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads parameters back; residuals are recomputed from the panels.
pub fn read_params_csv<R: Read>(
    r: R,
    series: &PanelSeries,
    basis: &BasisSet,
) -> Result<Vec<HourlyParams>> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers()?.clone();
    let k = header.iter().filter(|h| h.starts_with("alpha_")).count();
    let p = header.iter().filter(|h| h.starts_with("beta_")).count();
    if k != basis.k() {
        return Err(Error::Parse(format!(
            "parameter file has K = {k}, basis has K = {}",
            basis.k()
        )));
    }
    if p > 0 {
        return Err(Error::Parse(
            "parameter file carries covariates; supply them through the library API".into(),
        ));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Parse(format!("bad number '{s}'")));
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let hour: i64 = rec[0].parse().map_err(|_| Error::Parse("bad hour".into()))?;
        let alpha = (1..=k).map(|i| num(&rec[i])).collect::<Result<Vec<_>>>()?;
        let v2 = num(&rec[k + 1])?;
        let lambda = num(&rec[k + 2])?;
        let huber_scale = num(&rec[k + 3])?;
        let panel = series
            .panels
            .iter()
            .find(|q| q.hour == hour)
            .ok_or_else(|| Error::Parse(format!("hour {hour} not in the panel series")))?;
        let (present, residuals) = residuals_of(panel, basis, None, &alpha, &[]);
        out.push(HourlyParams {
            hour,
            alpha,
            beta: Vec::new(),
            cov: ExpCov::new(v2, lambda)?,
            present,
            residuals,
            huber_scale,
            converged: &rec[k + 4] == "1",
            cov_degenerate: &rec[k + 5] == "1",
        });
    }
    Ok(out)
}
