//! Calibration of sensor predictions against reference stations: a global
//! line, or per-station lines kriged into smooth `f₀(s)`, `f₁(s)` fields.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::error::{Error, Result};
use crate::fieldfit::HourlyParams;
use crate::geom::Location;
use crate::ingest::PanelSeries;
use crate::linalg::{backward_solve, cholesky_with_jitter, dot, forward_solve};
use crate::noise_model::{NoiseModel, PlugIn};
use crate::predict::{Affine, CalibrationSurface, HourSystem, Method, SensorNoise};
use crate::spatial_cov::{fit_expcov_ml, ExpCov, MlConfig};

/// Floor on anchor standard errors.
pub const SE_FLOOR: f64 = 1e-6;

/// Pooled OLS of reference values on predictions.
pub fn fit_global(pred: &[f64], refv: &[f64]) -> Result<Affine> {
    if pred.len() != refv.len() || pred.is_empty() {
        return Err(Error::InvalidInput("global calibration needs paired, nonempty data".into()));
    }
    let n = pred.len() as f64;
    let ybar = pred.iter().sum::<f64>() / n;
    let zbar = refv.iter().sum::<f64>() / n;
    let sxy: f64 = pred.iter().zip(refv).map(|(y, z)| (y - ybar) * (z - zbar)).sum();
    let sxx: f64 = pred.iter().map(|y| (y - ybar) * (y - ybar)).sum();
    if !(sxx > 0.0) {
        return Err(Error::InvalidInput("predictions have zero variance".into()));
    }
    let f1 = sxy / sxx;
    Ok(Affine { f0: zbar - f1 * ybar, f1 })
}

/// Paired `(ỹ, z*)` values at one reference station.
#[derive(Clone, Debug, PartialEq)]
pub struct StationPairs {
    pub site: Location,
    pub pairs: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationAnchor {
    pub site: Location,
    pub f0_hat: f64,
    pub f1_hat: f64,
    pub se_f0: f64,
    pub se_f1: f64,
    pub n_hours: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnchorReport {
    /// `(station id, reason)`.
    pub skipped: Vec<(String, String)>,
}

/// Per-station OLS lines with classical standard errors.
pub fn fit_anchors(stations: &[StationPairs], min_hours: usize) -> (Vec<StationAnchor>, AnchorReport) {
    let fits: Vec<std::result::Result<StationAnchor, String>> = stations
        .par_iter()
        .map(|st| {
            let n = st.pairs.len();
            if n < min_hours.max(3) {
                return Err(format!("{n} paired hours"));
            }
            let nf = n as f64;
            let xbar = st.pairs.iter().map(|p| p.0).sum::<f64>() / nf;
            let zbar = st.pairs.iter().map(|p| p.1).sum::<f64>() / nf;
            let sxx: f64 = st.pairs.iter().map(|p| (p.0 - xbar).powi(2)).sum();
            let sxy: f64 = st.pairs.iter().map(|p| (p.0 - xbar) * (p.1 - zbar)).sum();
            if !(sxx > 1e-12 * (1.0 + xbar * xbar) * nf) {
                return Err("degenerate predictor variance".into());
            }
            let f1 = sxy / sxx;
            let f0 = zbar - f1 * xbar;
            let rss: f64 = st.pairs.iter().map(|p| (p.1 - f0 - f1 * p.0).powi(2)).sum();
            let s2 = rss / (nf - 2.0);
            Ok(StationAnchor {
                site: st.site.clone(),
                f0_hat: f0,
                f1_hat: f1,
                se_f0: (s2 * (1.0 / nf + xbar * xbar / sxx)).sqrt().max(SE_FLOOR),
                se_f1: (s2 / sxx).sqrt().max(SE_FLOOR),
                n_hours: n,
            })
        })
        .collect();
    let mut anchors = Vec::new();
    let mut report = AnchorReport::default();
    for (st, f) in stations.iter().zip(fits) {
        match f {
            Ok(a) => anchors.push(a),
            Err(why) => report.skipped.push((st.site.id.clone(), why)),
        }
    }
    (anchors, report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coef {
    F0,
    F1,
}

impl Coef {
    fn of(self, a: &StationAnchor) -> (f64, f64) {
        match self {
            Coef::F0 => (a.f0_hat, a.se_f0),
            Coef::F1 => (a.f1_hat, a.se_f1),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Coef::F0 => "f0",
            Coef::F1 => "f1",
        }
    }
}

/// One calibration coefficient as an evaluable surface: ordinary kriging of
/// the anchors with nugget SE², or inverse-distance weighting.
#[derive(Clone, Debug, PartialEq)]
pub struct KrigedCoef {
    pub sites: Vec<Location>,
    pub values: Vec<f64>,
    pub nugget: Vec<f64>,
    /// `None` means the inverse-distance fallback.
    pub cov: Option<ExpCov>,
    pub mean: f64,
    l: DMatrix<f64>,
    u: Vec<f64>,
    /// `1′Σ⁻¹1`.
    a: f64,
}

impl KrigedCoef {
    /// Fits the covariance by ML and prepares the kriging weights.
    /// Falls back to inverse-distance weighting when ML fails.
    pub fn fit(anchors: &[StationAnchor], which: Coef, cfg: &MlConfig) -> Result<Self> {
        if anchors.len() < 5 {
            return Err(Error::InvalidInput(format!(
                "kriging a calibration field needs at least 5 anchors, got {}",
                anchors.len()
            )));
        }
        let sites: Vec<Location> = anchors.iter().map(|a| a.site.clone()).collect();
        let (values, se): (Vec<f64>, Vec<f64>) = anchors.iter().map(|a| which.of(a)).unzip();
        let nugget: Vec<f64> = se.iter().map(|s| s * s).collect();
        match fit_expcov_ml(&values, &sites, &nugget, true, cfg) {
            Ok(fit) => Self::with_cov(sites, values, nugget, Some(fit.cov)),
            Err(e) => {
                log::warn!("{} field: ML failed ({e}); using inverse-distance weighting", which.name());
                Self::with_cov(sites, values, nugget, None)
            }
        }
    }

    /// Builds the surface for a given covariance (or the fallback).
    pub fn with_cov(sites: Vec<Location>, values: Vec<f64>, nugget: Vec<f64>, cov: Option<ExpCov>) -> Result<Self> {
        let n = sites.len();
        if n == 0 || values.len() != n || nugget.len() != n {
            return Err(Error::InvalidInput("calibration anchors are misaligned".into()));
        }
        let Some(c) = cov else {
            return Ok(Self {
                sites,
                values,
                nugget,
                cov: None,
                mean: 0.0,
                l: DMatrix::zeros(0, 0),
                u: Vec::new(),
                a: 0.0,
            });
        };
        let m = DMatrix::from_fn(n, n, |i, j| {
            c.at(sites[i].distance(&sites[j])) + if i == j { nugget[i] } else { 0.0 }
        });
        let (chol, _) = cholesky_with_jitter(m)?;
        let l = chol.l();
        let w1 = forward_solve(&l, &vec![1.0; n]);
        let wz = forward_solve(&l, &values);
        let a = dot(&w1, &w1);
        let mean = dot(&w1, &wz) / a;
        let resid: Vec<f64> = values.iter().map(|v| v - mean).collect();
        let u = backward_solve(&l, &forward_solve(&l, &resid));
        Ok(Self {
            sites,
            values,
            nugget,
            cov: Some(c),
            mean,
            l,
            u,
            a,
        })
    }

    pub fn is_fallback(&self) -> bool {
        self.cov.is_none()
    }

    pub fn value_at(&self, s: &Location) -> f64 {
        match &self.cov {
            Some(c) => {
                let k: Vec<f64> = self.sites.iter().map(|p| c.at(s.distance(p))).collect();
                self.mean + dot(&k, &self.u)
            }
            None => idw(&self.sites, &self.values, s),
        }
    }

    /// Kriging variance (including the mean-estimation term); `None` for
    /// the fallback.
    pub fn variance_at(&self, s: &Location) -> Option<f64> {
        let c = self.cov?;
        let k: Vec<f64> = self.sites.iter().map(|p| c.at(s.distance(p))).collect();
        let w = forward_solve(&self.l, &k);
        let si_k = backward_solve(&self.l, &w);
        let gap = 1.0 - si_k.iter().sum::<f64>();
        Some((c.v2 - dot(&w, &w) + gap * gap / self.a).max(0.0))
    }
}

fn idw(sites: &[Location], values: &[f64], s: &Location) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, v) in sites.iter().zip(values) {
        let d = s.distance(p);
        if d == 0.0 {
            return *v;
        }
        let w = 1.0 / (d * d);
        num += w * v;
        den += w;
    }
    num / den
}

#[derive(Clone, Debug, PartialEq)]
pub struct KrigedValues {
    pub values: Vec<f64>,
    pub variances: Option<Vec<f64>>,
    pub fallback: bool,
}

/// Kriges one coefficient from the anchors to `targets`.
pub fn krige_field(anchors: &[StationAnchor], which: Coef, targets: &[Location], cfg: &MlConfig) -> Result<KrigedValues> {
    let k = KrigedCoef::fit(anchors, which, cfg)?;
    let values = targets.par_iter().map(|t| k.value_at(t)).collect();
    let variances = (!k.is_fallback()).then(|| targets.par_iter().map(|t| k.variance_at(t).unwrap()).collect());
    Ok(KrigedValues {
        values,
        variances,
        fallback: k.is_fallback(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    Global,
    #[default]
    Adaptive,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CalibrationField {
    Global(Affine),
    Adaptive {
        anchors: Vec<StationAnchor>,
        f0: KrigedCoef,
        f1: KrigedCoef,
    },
}

impl CalibrationSurface for CalibrationField {
    fn coefficients(&self, s: &Location) -> (f64, f64) {
        match self {
            CalibrationField::Global(a) => (a.f0, a.f1),
            CalibrationField::Adaptive { f0, f1, .. } => (f0.value_at(s), f1.value_at(s)),
        }
    }
}

impl CalibrationField {
    pub fn mode(&self) -> CalibrationMode {
        match self {
            CalibrationField::Global(_) => CalibrationMode::Global,
            CalibrationField::Adaptive { .. } => CalibrationMode::Adaptive,
        }
    }

    /// Kriges both coefficients from the anchors.
    pub fn adaptive(anchors: Vec<StationAnchor>, cfg: &MlConfig) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::MissingPrerequisite("no calibration anchors".into()));
        }
        let f0 = KrigedCoef::fit(&anchors, Coef::F0, cfg)?;
        let f1 = KrigedCoef::fit(&anchors, Coef::F1, cfg)?;
        Ok(CalibrationField::Adaptive { anchors, f0, f1 })
    }

    /// Header text: mode plus the fitted covariances.
    pub fn to_text(&self) -> String {
        let mut s = String::from("airfuse-calibration 1\n");
        match self {
            CalibrationField::Global(a) => {
                let _ = writeln!(s, "mode global\nf0 {}\nf1 {}", a.f0, a.f1);
            }
            CalibrationField::Adaptive { f0, f1, .. } => {
                s.push_str("mode adaptive\n");
                for (name, k) in [("f0", f0), ("f1", f1)] {
                    match k.cov {
                        Some(c) => {
                            let _ = writeln!(s, "{name} kriging {} {} mean {}", c.v2, c.lambda, k.mean);
                        }
                        None => {
                            let _ = writeln!(s, "{name} idw");
                        }
                    }
                }
            }
        }
        s
    }

    /// Writes `calibration.txt` and, in adaptive mode, `anchors.csv`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("calibration.txt"), self.to_text())?;
        if let CalibrationField::Adaptive { anchors, .. } = self {
            write_anchors(anchors, fs::File::create(dir.join("anchors.csv"))?)?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("calibration.txt"))?;
        let bad = |m: &str| Error::Parse(format!("calibration.txt: {m}"));
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        if lines.next() != Some("airfuse-calibration 1") {
            return Err(bad("missing header"));
        }
        let num = |s: Option<&str>| -> Result<f64> {
            s.ok_or_else(|| bad("missing value"))?
                .parse()
                .map_err(|_| bad("bad number"))
        };
        match lines.next() {
            Some("mode global") => {
                let mut f = [0.0; 2];
                for (k, name) in ["f0", "f1"].iter().enumerate() {
                    let mut t = lines.next().ok_or_else(|| bad("missing coefficient"))?.split_whitespace();
                    if t.next() != Some(name) {
                        return Err(bad("expected f0 then f1"));
                    }
                    f[k] = num(t.next())?;
                }
                Ok(CalibrationField::Global(Affine { f0: f[0], f1: f[1] }))
            }
            Some("mode adaptive") => {
                let anchors = read_anchors(fs::File::open(dir.join("anchors.csv"))?)?;
                let mut coefs = Vec::new();
                for (which, name) in [(Coef::F0, "f0"), (Coef::F1, "f1")] {
                    let mut t = lines.next().ok_or_else(|| bad("missing coefficient"))?.split_whitespace();
                    if t.next() != Some(name) {
                        return Err(bad("expected f0 then f1"));
                    }
                    let cov = match t.next() {
                        Some("kriging") => Some(ExpCov::new(num(t.next())?, num(t.next())?)?),
                        Some("idw") => None,
                        _ => return Err(bad("expected kriging or idw")),
                    };
                    let sites = anchors.iter().map(|a| a.site.clone()).collect();
                    let (values, se): (Vec<f64>, Vec<f64>) = anchors.iter().map(|a| which.of(a)).unzip();
                    coefs.push(KrigedCoef::with_cov(sites, values, se.iter().map(|s| s * s).collect(), cov)?);
                }
                let f1 = coefs.pop().unwrap();
                let f0 = coefs.pop().unwrap();
                Ok(CalibrationField::Adaptive { anchors, f0, f1 })
            }
            _ => Err(bad("unknown mode")),
        }
    }
}

pub fn write_anchors<W: Write>(anchors: &[StationAnchor], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["id", "x", "y", "f0_hat", "f1_hat", "se_f0", "se_f1", "n_hours"])?;
    for a in anchors {
        out.write_record([
            a.site.id.clone(),
            a.site.x.to_string(),
            a.site.y.to_string(),
            a.f0_hat.to_string(),
            a.f1_hat.to_string(),
            a.se_f0.to_string(),
            a.se_f1.to_string(),
            a.n_hours.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_anchors<R: Read>(r: R) -> Result<Vec<StationAnchor>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 8 {
            return Err(Error::Parse(format!("anchors.csv: expected 8 columns, got {}", rec.len())));
        }
        let f = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| Error::Parse(format!("anchors.csv: bad number {:?}", &rec[i])))
        };
        out.push(StationAnchor {
            site: Location::new(&rec[0], f(1)?, f(2)?)?,
            f0_hat: f(3)?,
            f1_hat: f(4)?,
            se_f0: f(5)?,
            se_f1: f(6)?,
            n_hours: rec[7]
                .parse()
                .map_err(|_| Error::Parse(format!("anchors.csv: bad count {:?}", &rec[7])))?,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub mode: CalibrationMode,
    pub min_hours: usize,
    pub plug: PlugIn,
    pub trim: f64,
    pub ml: MlConfig,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            mode: CalibrationMode::Adaptive,
            min_hours: 24,
            plug: PlugIn::Observed,
            trim: 0.1,
            ml: MlConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CalibrationReport {
    /// Window hours without fitted parameters.
    pub hours_skipped: Vec<i64>,
    pub anchors: AnchorReport,
    pub fallback: bool,
}

/// `(ỹ, z*)` pairs per reference station over the window.
pub fn station_pairs(
    series: &PanelSeries,
    params: &[HourlyParams],
    basis: &BasisSet,
    noise: &NoiseModel,
    window: &[i64],
    cfg: &CalibrationConfig,
) -> Result<(Vec<StationPairs>, Vec<i64>)> {
    let by_hour: HashMap<i64, &HourlyParams> = params.iter().map(|p| (p.hour, p)).collect();
    let panels: HashMap<i64, usize> = series.panels.iter().enumerate().map(|(i, p)| (p.hour, i)).collect();
    let mut hours: Vec<i64> = window.to_vec();
    hours.sort_unstable();
    hours.dedup();
    if hours.is_empty() {
        return Err(Error::InvalidInput("calibration window is empty".into()));
    }
    let mut skipped = Vec::new();
    let mut work = Vec::new();
    for h in &hours {
        match (by_hour.get(h), panels.get(h)) {
            (Some(p), Some(&i)) => work.push((*p, &series.panels[i])),
            _ => skipped.push(*h),
        }
    }
    let noise = SensorNoise::Model {
        model: *noise,
        plug: cfg.plug,
        trim: cfg.trim,
    };
    let sites: Vec<Location> = series.epa_sites.to_vec();
    let per_hour: Vec<Result<Vec<(f64, Option<f64>)>>> = work
        .par_iter()
        .map(|(p, panel)| {
            let sys = HourSystem::build(p, panel, basis, &noise, None)?;
            let surf = sys.predict(p, basis, None, Method::Hidden, &sites);
            Ok(surf.mean.into_iter().zip(panel.epa.iter().copied()).collect())
        })
        .collect();
    let mut stations: Vec<StationPairs> = sites
        .iter()
        .map(|s| StationPairs {
            site: s.clone(),
            pairs: Vec::new(),
        })
        .collect();
    for h in per_hour {
        for (j, (y, z)) in h?.into_iter().enumerate() {
            if let Some(z) = z {
                stations[j].pairs.push((y, z));
            }
        }
    }
    Ok((stations, skipped))
}

/// Computes the hidden-field predictions at the reference stations for
/// every window hour and fits the calibration field.
pub fn build_field(
    series: &PanelSeries,
    params: &[HourlyParams],
    basis: &BasisSet,
    noise: &NoiseModel,
    window: &[i64],
    cfg: &CalibrationConfig,
) -> Result<(CalibrationField, CalibrationReport)> {
    let (stations, hours_skipped) = station_pairs(series, params, basis, noise, window, cfg)?;
    let mut report = CalibrationReport {
        hours_skipped,
        ..Default::default()
    };
    let field = match cfg.mode {
        CalibrationMode::Global => {
            let (y, z): (Vec<f64>, Vec<f64>) = stations.iter().flat_map(|s| s.pairs.iter().copied()).unzip();
            CalibrationField::Global(fit_global(&y, &z)?)
        }
        CalibrationMode::Adaptive => {
            let (anchors, skipped) = fit_anchors(&stations, cfg.min_hours);
            report.anchors = skipped;
            let f = CalibrationField::adaptive(anchors, &cfg.ml)?;
            if let CalibrationField::Adaptive { f0, f1, .. } = &f {
                report.fallback = f0.is_fallback() || f1.is_fallback();
            }
            f
        }
    };
    Ok((field, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_trivial_lines() {
        let y = [1.0, 2.0, 5.0, 7.5];
        let a = fit_global(&y, &y).unwrap();
        assert_eq!((a.f0, a.f1), (0.0, 1.0));
        let z: Vec<f64> = y.iter().map(|v| 3.0 + 0.5 * v).collect();
        let a = fit_global(&y, &z).unwrap();
        assert!((a.f0 - 3.0).abs() < 1e-14 && (a.f1 - 0.5).abs() < 1e-14);
        assert!(fit_global(&[2.0, 2.0], &[1.0, 3.0]).is_err());
    }

    #[test]
    fn exact_station_line_hits_se_floor() {
        let st = StationPairs {
            site: Location::at("e", 0.0, 0.0),
            pairs: (0..30).map(|i| (i as f64, 2.0 + 0.25 * i as f64)).collect(),
        };
        let (a, r) = fit_anchors(&[st], 24);
        assert!(r.skipped.is_empty());
        assert!((a[0].f0_hat - 2.0).abs() < 1e-12 && (a[0].f1_hat - 0.25).abs() < 1e-12);
        assert_eq!((a[0].se_f0, a[0].se_f1), (SE_FLOOR, SE_FLOOR));
    }

    #[test]
    fn short_or_flat_stations_are_skipped() {
        let short = StationPairs {
            site: Location::at("s", 0.0, 0.0),
            pairs: (0..10).map(|i| (i as f64, i as f64)).collect(),
        };
        let flat = StationPairs {
            site: Location::at("f", 1.0, 0.0),
            pairs: (0..40).map(|i| (3.0, i as f64)).collect(),
        };
        let (a, r) = fit_anchors(&[short.clone(), flat], 24);
        assert!(a.is_empty());
        assert_eq!(r.skipped.len(), 2);
        let (a, _) = fit_anchors(&[short], usize::MAX);
        assert!(a.is_empty());
        assert!(CalibrationField::adaptive(a, &MlConfig::default()).is_err());
    }

    #[test]
    fn idw_hits_anchor_values() {
        let sites = vec![Location::at("a", 0.0, 0.0), Location::at("b", 2.0, 0.0)];
        let k = KrigedCoef::with_cov(sites.clone(), vec![1.0, 3.0], vec![0.0; 2], None).unwrap();
        assert_eq!(k.value_at(&sites[1]), 3.0);
        assert_eq!(k.value_at(&Location::at("m", 1.0, 0.0)), 2.0);
        assert!(k.variance_at(&sites[0]).is_none());
    }
}
