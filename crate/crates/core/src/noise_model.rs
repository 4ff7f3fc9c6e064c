//! Heteroscedastic measurement-error law
//! `σ²(y) = a0 + a1·y + (a2 − a1)·(y − a3)₊` and its estimation from
//! colocated sensors.

use std::fmt::Write as _;
use std::io::{Read, Write};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::robust::{mad, trimmed_mean};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

impl NoiseModel {
    pub fn new(a0: f64, a1: f64, a2: f64, a3: f64) -> Result<Self> {
        let m = Self { a0, a1, a2, a3 };
        if [a0, a1, a2, a3].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "noise coefficients must be finite and ≥ 0, got {m:?}"
            )));
        }
        Ok(m)
    }

    /// No measurement error at all.
    pub fn zero() -> Self {
        Self {
            a0: 0.0,
            a1: 0.0,
            a2: 0.0,
            a3: 0.0,
        }
    }

    pub fn variance_at(&self, y: f64) -> f64 {
        self.a0 + self.a1 * y + (self.a2 - self.a1) * (y - self.a3).max(0.0)
    }

    pub fn to_text(&self) -> String {
        format!(
            "a0 = {}\na1 = {}\na2 = {}\na3 = {}\n",
            self.a0, self.a1, self.a2, self.a3
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut vals = [None; 4];
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("noise model line '{line}'")))?;
            let idx = match k.trim() {
                "a0" => 0,
                "a1" => 1,
                "a2" => 2,
                "a3" => 3,
                other => return Err(Error::Parse(format!("unknown noise key '{other}'"))),
            };
            vals[idx] = Some(
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad value for {}", k.trim())))?,
            );
        }
        match vals {
            [Some(a0), Some(a1), Some(a2), Some(a3)] => Self::new(a0, a1, a2, a3),
            _ => Err(Error::Parse("noise model needs a0, a1, a2 and a3".into())),
        }
    }
}

/// How an observed sensor value is turned into a noise variance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlugIn {
    /// `variance_at(z)` for each observation.
    #[default]
    Observed,
    /// Linear term from the observation, hinge term from the hour's trimmed
    /// mean of all sensor observations.
    Literal,
}

pub fn predict_site_variance(model: &NoiseModel, z: f64) -> f64 {
    model.variance_at(z)
}

/// Noise variances for one hour of sensor observations.
pub fn site_variances(model: &NoiseModel, z: &[f64], plug: PlugIn, trim: f64) -> Result<Vec<f64>> {
    Ok(match plug {
        PlugIn::Observed => z.iter().map(|v| model.variance_at(*v)).collect(),
        PlugIn::Literal => {
            let zt = trimmed_mean(z, trim)?;
            let hinge = (model.a2 - model.a1) * (zt - model.a3).max(0.0);
            z.iter().map(|v| model.a0 + model.a1 * v + hinge).collect()
        }
    })
}

/// Hourly readings of several sensors at one site: `values[hour][sensor]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColocatedSeries {
    pub sensors: Vec<String>,
    pub hours: Vec<i64>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl ColocatedSeries {
    pub fn new(sensors: Vec<String>, hours: Vec<i64>, values: Vec<Vec<Option<f64>>>) -> Result<Self> {
        if hours.len() != values.len() || values.iter().any(|r| r.len() != sensors.len()) {
            return Err(Error::InvalidInput("colocated series shape mismatch".into()));
        }
        Ok(Self {
            sensors,
            hours,
            values,
        })
    }

    fn column(&self, j: usize) -> Vec<Option<f64>> {
        self.values.iter().map(|r| r[j]).collect()
    }

    fn keep_columns(&self, keep: &[usize]) -> Self {
        Self {
            sensors: keep.iter().map(|&j| self.sensors[j].clone()).collect(),
            hours: self.hours.clone(),
            values: self
                .values
                .iter()
                .map(|r| keep.iter().map(|&j| r[j]).collect())
                .collect(),
        }
    }

    /// CSV with a `hour` column followed by one column per sensor; empty = missing.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["hour".to_string()];
        header.extend(self.sensors.iter().cloned());
        wr.write_record(&header)?;
        for (h, row) in self.hours.iter().zip(&self.values) {
            let mut rec = vec![h.to_string()];
            rec.extend(row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        if header.get(0) != Some("hour") {
            return Err(Error::Parse("colocated CSV must start with an 'hour' column".into()));
        }
        let sensors: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let (mut hours, mut values) = (Vec::new(), Vec::new());
        for rec in rd.records() {
            let rec = rec?;
            hours.push(
                rec[0]
                    .trim()
                    .parse::<i64>()
                    .map_err(|_| Error::Parse(format!("bad hour '{}'", &rec[0])))?,
            );
            let mut row = Vec::with_capacity(sensors.len());
            for cell in rec.iter().skip(1) {
                let c = cell.trim();
                row.push(if c.is_empty() {
                    None
                } else {
                    Some(c.parse::<f64>().map_err(|_| Error::Parse(format!("bad value '{c}'")))?)
                });
            }
            values.push(row);
        }
        Self::new(sensors, hours, values)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScreenReport {
    pub no_records: Vec<String>,
    pub low_correlation: Vec<String>,
}

/// Pearson correlation over hours where both series are present.
fn paired_corr(a: &[Option<f64>], b: &[Option<f64>]) -> f64 {
    let pairs: Vec<(f64, f64)> = a
        .iter()
        .zip(b)
        .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
        .collect();
    let n = pairs.len() as f64;
    if pairs.len() < 3 {
        return f64::NAN;
    }
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in &pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Drops sensors with no records, then sensors whose correlations with
/// every other sensor fall below `min_corr`.
pub fn screen_sensors(series: &ColocatedSeries, min_corr: f64) -> Result<(ColocatedSeries, ScreenReport)> {
    let mut report = ScreenReport::default();
    let cols: Vec<Vec<Option<f64>>> = (0..series.sensors.len()).map(|j| series.column(j)).collect();
    let alive: Vec<usize> = (0..cols.len())
        .filter(|&j| {
            let any = cols[j].iter().any(Option::is_some);
            if !any {
                report.no_records.push(series.sensors[j].clone());
            }
            any
        })
        .collect();
    let keep: Vec<usize> = if min_corr <= -1.0 {
        alive.clone()
    } else {
        alive
            .iter()
            .copied()
            .filter(|&j| {
                let best = alive
                    .iter()
                    .filter(|&&k| k != j)
                    .map(|&k| paired_corr(&cols[j], &cols[k]))
                    .filter(|c| !c.is_nan())
                    .fold(f64::NEG_INFINITY, f64::max);
                let ok = best >= min_corr;
                if !ok {
                    report.low_correlation.push(series.sensors[j].clone());
                }
                ok
            })
            .collect()
    };
    if keep.len() < 2 {
        return Err(Error::TooFewSensors {
            survivors: keep.len(),
        });
    }
    Ok((series.keep_columns(&keep), report))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseFitConfig {
    pub trim: f64,
    pub min_hours: usize,
    /// Number of breakpoint candidates on the quantile grid 0.05…0.95.
    pub grid: usize,
    pub refine: bool,
}

impl Default for NoiseFitConfig {
    fn default() -> Self {
        Self {
            trim: 0.10,
            min_hours: 50,
            grid: 91,
            refine: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseFit {
    pub model: NoiseModel,
    /// Per usable hour: (trimmed mean, squared MAD).
    pub points: Vec<(f64, f64)>,
    pub sse: f64,
    /// No point lies above the chosen breakpoint; the fit is a single line.
    pub single_line: bool,
}

/// Sum of squared errors of a model on (z, σ²) points.
pub fn noise_sse(model: &NoiseModel, points: &[(f64, f64)]) -> f64 {
    points
        .iter()
        .map(|(z, s)| (s - model.variance_at(*z)).powi(2))
        .sum()
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Nonnegative least squares in three unknowns from the normal equations,
/// by checking every support set. Returns (coefficients, SSE).
fn nnls3(g: &Matrix3<f64>, r: &Vector3<f64>, yy: f64) -> (Vector3<f64>, f64) {
    let sse = |b: &Vector3<f64>| (yy - 2.0 * b.dot(r) + b.dot(&(g * b))).max(0.0);
    let mut best = (Vector3::zeros(), yy.max(0.0));
    for mask in 1u8..8 {
        let idx: Vec<usize> = (0..3).filter(|i| mask >> i & 1 == 1).collect();
        let k = idx.len();
        let sub = nalgebra::DMatrix::from_fn(k, k, |i, j| g[(idx[i], idx[j])]);
        let rhs = nalgebra::DVector::from_fn(k, |i, _| r[idx[i]]);
        let scale = (0..k).map(|i| sub[(i, i)]).fold(0.0, f64::max);
        if scale <= 0.0 {
            continue;
        }
        let Some(ch) = sub.clone().cholesky() else {
            continue;
        };
        // reject nearly singular supports (e.g. an all-zero hinge column)
        if (0..k).any(|i| ch.l()[(i, i)].powi(2) <= 1e-12 * sub[(i, i)].max(1e-300)) {
            continue;
        }
        let sol = ch.solve(&rhs);
        if sol.iter().any(|v| *v < 0.0) {
            continue;
        }
        let mut b = Vector3::zeros();
        for (i, &j) in idx.iter().enumerate() {
            b[j] = sol[i];
        }
        let s = sse(&b);
        if s < best.1 {
            best = (b, s);
        }
    }
    best
}

/// Best (a0, a1, a2) for a fixed breakpoint using regressors
/// `[1, min(z, a3), (z − a3)₊]`, which keeps every coefficient of the
/// original parametrisation nonnegative.
fn fit_given_breakpoint(points: &[(f64, f64)], a3: f64) -> (NoiseModel, f64, bool) {
    let mut g = Matrix3::zeros();
    let mut r = Vector3::zeros();
    let mut yy = 0.0;
    let mut above = 0usize;
    for &(z, s) in points {
        let x = Vector3::new(1.0, z.min(a3), (z - a3).max(0.0));
        if z > a3 {
            above += 1;
        }
        g += x * x.transpose();
        r += x * s;
        yy += s * s;
    }
    let (b, _) = nnls3(&g, &r, yy);
    let single = above == 0;
    let model = NoiseModel {
        a0: b[0],
        a1: b[1],
        a2: if single { b[1] } else { b[2] },
        a3,
    };
    // recompute directly for an accurate SSE
    let sse = noise_sse(&model, points);
    (model, sse, single)
}

/// Per-hour (trimmed mean, squared MAD) across the sensors present.
pub fn colocated_points(series: &ColocatedSeries, trim: f64) -> Result<Vec<(f64, f64)>> {
    let mut pts = Vec::new();
    for row in &series.values {
        let w: Vec<f64> = row.iter().flatten().copied().collect();
        if w.len() < 2 {
            continue;
        }
        let s = mad(&w)?;
        pts.push((trimmed_mean(&w, trim)?, s * s));
    }
    Ok(pts)
}

pub fn estimate_noise_model(series: &ColocatedSeries, cfg: &NoiseFitConfig) -> Result<NoiseFit> {
    let points = colocated_points(series, cfg.trim)?;
    if points.len() < cfg.min_hours {
        return Err(Error::InvalidInput(format!(
            "noise fit needs ≥ {} usable hours, got {}",
            cfg.min_hours,
            points.len()
        )));
    }
    fit_noise_points(points, cfg)
}

/// Constrained fit of the variance law to (z, σ²) points.
pub fn fit_noise_points(points: Vec<(f64, f64)>, cfg: &NoiseFitConfig) -> Result<NoiseFit> {
    if points.is_empty() || points.iter().any(|(z, s)| !z.is_finite() || !s.is_finite()) {
        return Err(Error::InvalidInput("noise fit needs finite points".into()));
    }
    // canonical order so the result does not depend on hour order
    let mut sorted = points.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let zs: Vec<f64> = sorted.iter().map(|p| p.0).collect();
    let g = cfg.grid.max(2);
    let cands: Vec<f64> = (0..g)
        .map(|k| quantile_sorted(&zs, 0.05 + 0.90 * k as f64 / (g - 1) as f64).max(0.0))
        .collect();
    let fits: Vec<(NoiseModel, f64, bool)> = cands
        .par_iter()
        .map(|&a3| fit_given_breakpoint(&sorted, a3))
        .collect();
    let mut bi = 0;
    for (i, f) in fits.iter().enumerate() {
        if f.1 < fits[bi].1 {
            bi = i;
        }
    }
    let mut best = fits[bi];
    if cfg.refine {
        let mut lo = cands[bi.saturating_sub(1)];
        let mut hi = cands[(bi + 1).min(g - 1)];
        for _ in 0..200 {
            if hi - lo <= 1e-12 * (1.0 + hi.abs()) {
                break;
            }
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            let f1 = fit_given_breakpoint(&sorted, m1);
            let f2 = fit_given_breakpoint(&sorted, m2);
            for f in [f1, f2] {
                if f.1 < best.1 {
                    best = f;
                }
            }
            if f1.1 <= f2.1 {
                hi = m2;
            } else {
                lo = m1;
            }
        }
    }
    let (model, sse, single_line) = best;
    Ok(NoiseFit {
        model,
        points,
        sse,
        single_line,
    })
}

/// The (z̃, σ̃²) scatter as CSV.
pub fn points_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("z_tilde,sigma2\n");
    for (z, v) in points {
        let _ = writeln!(s, "{z},{v}");
    }
    s
}
