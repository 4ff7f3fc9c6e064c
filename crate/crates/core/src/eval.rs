//! Hold-out evaluation of the six predictors against reference stations,
//! and the exploratory nearest-sensor / neighbourhood-average comparison.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use chrono::{DateTime, Datelike};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::calibration::{fit_anchors, fit_global, CalibrationConfig, CalibrationField, StationPairs};
use crate::error::{Error, Result};
use crate::fieldfit::HourlyParams;
use crate::geom::{HourlyPanel, Location};
use crate::ingest::PanelSeries;
use crate::noise_model::NoiseModel;
use crate::predict::{CalibrationSurface, HourSystem, Method, ReferenceInput, SensorNoise};
use crate::spatial_cov::{fit_expcov_ml_nugget, ordinary_krige, MlConfig};

/// Root mean-squared difference, pooled over all pairs.
pub fn rmspe(pred: &[f64], actual: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != actual.len() {
        return Err(Error::InvalidInput(format!(
            "rmspe needs equal nonempty inputs, got {} and {}",
            pred.len(),
            actual.len()
        )));
    }
    let ss: f64 = pred.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MethodId {
    /// Sensor-only predictor, uncalibrated.
    M1,
    /// Sensor-only, global calibration.
    M2,
    /// Both networks, global calibration.
    M3,
    /// Sensor-only, adaptive calibration.
    M4,
    /// Both networks, adaptive calibration.
    M5,
    /// Ordinary kriging of reference data alone.
    M6,
}

impl MethodId {
    pub const ALL: [MethodId; 6] = [
        MethodId::M1,
        MethodId::M2,
        MethodId::M3,
        MethodId::M4,
        MethodId::M5,
        MethodId::M6,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            MethodId::M1 => "M1",
            MethodId::M2 => "M2",
            MethodId::M3 => "M3",
            MethodId::M4 => "M4",
            MethodId::M5 => "M5",
            MethodId::M6 => "M6",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.tag().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Parse(format!("unknown method '{s}'")))
    }

    fn calibration(self) -> Option<Calib> {
        match self {
            MethodId::M2 | MethodId::M3 => Some(Calib::Global),
            MethodId::M4 | MethodId::M5 => Some(Calib::Adaptive),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Calib {
    Global,
    Adaptive,
}

/// A contiguous set of hours evaluated together.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub label: String,
    pub hours: Vec<i64>,
}

/// One window per calendar month (UTC) present in `hours`.
pub fn monthly_windows(hours: &[i64]) -> Vec<Window> {
    let mut by: BTreeMap<(i32, u32), Vec<i64>> = BTreeMap::new();
    for &h in hours {
        let key = DateTime::from_timestamp(h * 3600, 0).map_or((0, 0), |t| (t.year(), t.month()));
        by.entry(key).or_default().push(h);
    }
    by.into_iter()
        .map(|((y, m), hours)| Window {
            label: format!("{y:04}-{m:02}"),
            hours,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HourSplit {
    pub hour: i64,
    /// Reference-station indices used for fitting.
    pub train: Vec<usize>,
    /// Reference-station indices held out.
    pub test: Vec<usize>,
}

/// Random per-hour division of the present reference values.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitPlan {
    pub rep: usize,
    pub seed: u64,
    pub hours: Vec<HourSplit>,
}

/// Training-set size for `k` present values.
pub fn train_size(k: usize) -> usize {
    (2 * k).div_ceil(3)
}

impl SplitPlan {
    /// Hour `t` of the series draws from stream `t` of a generator keyed by `seed`.
    pub fn new(series: &PanelSeries, rep: usize, seed: u64) -> Self {
        let hours = series
            .panels
            .iter()
            .enumerate()
            .map(|(t, p)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64);
                let mut present: Vec<usize> = (0..p.epa.len()).filter(|&j| p.epa[j].is_some()).collect();
                present.shuffle(&mut rng);
                let k = train_size(present.len());
                let mut train = present[..k].to_vec();
                let mut test = present[k..].to_vec();
                train.sort_unstable();
                test.sort_unstable();
                HourSplit {
                    hour: p.hour,
                    train,
                    test,
                }
            })
            .collect();
        Self { rep, seed, hours }
    }

    pub fn get(&self, hour: i64) -> Option<&HourSplit> {
        self.hours
            .binary_search_by_key(&hour, |h| h.hour)
            .ok()
            .map(|i| &self.hours[i])
    }
}

/// The panel with every reference value outside `train` removed.
pub fn training_panel(panel: &HourlyPanel, split: &HourSplit) -> HourlyPanel {
    let mut epa = vec![None; panel.epa.len()];
    for &j in &split.train {
        epa[j] = panel.epa[j];
    }
    HourlyPanel {
        epa,
        ..panel.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub methods: Vec<MethodId>,
    pub reps: usize,
    pub seed: u64,
    /// Reference-station error variance used by the fused predictors.
    pub sigma_xi2: f64,
    pub calibration: CalibrationConfig,
    /// ML settings for the reference-only kriging.
    pub ml: MlConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            methods: MethodId::ALL.to_vec(),
            reps: 100,
            seed: 2020,
            sigma_xi2: 0.0,
            calibration: CalibrationConfig::default(),
            ml: MlConfig::default(),
        }
    }
}

/// Fitted per-hour inputs shared by every replication. The hidden-scale
/// predictions at the reference sites depend on sensor data only and are
/// computed once.
pub struct Prepared<'a> {
    pub series: &'a PanelSeries,
    pub basis: &'a BasisSet,
    pub noise: SensorNoise,
    params: HashMap<i64, &'a HourlyParams>,
    panel_index: HashMap<i64, usize>,
    hidden: HashMap<i64, Vec<f64>>,
    /// Hours without fitted parameters; they are left out of every window.
    pub skipped: Vec<i64>,
}

impl<'a> Prepared<'a> {
    pub fn new(
        series: &'a PanelSeries,
        params: &'a [HourlyParams],
        basis: &'a BasisSet,
        noise: &NoiseModel,
        cfg: &CalibrationConfig,
    ) -> Result<Self> {
        let noise = SensorNoise::Model {
            model: *noise,
            plug: cfg.plug,
            trim: cfg.trim,
        };
        let by_hour: HashMap<i64, &HourlyParams> = params.iter().map(|p| (p.hour, p)).collect();
        let sites = series.epa_sites.to_vec();
        let work: Vec<(usize, Option<&HourlyParams>)> = series
            .panels
            .iter()
            .enumerate()
            .map(|(i, p)| (i, by_hour.get(&p.hour).copied()))
            .collect();
        let hidden: Vec<Option<Vec<f64>>> = work
            .par_iter()
            .map(|&(i, p)| {
                let Some(p) = p else { return Ok(None) };
                let sys = HourSystem::build(p, &series.panels[i], basis, &noise, None)?;
                Ok(Some(sys.predict(p, basis, None, Method::Hidden, &sites).mean))
            })
            .collect::<Result<_>>()?;
        let mut out = Self {
            series,
            basis,
            noise,
            params: HashMap::new(),
            panel_index: HashMap::new(),
            hidden: HashMap::new(),
            skipped: Vec::new(),
        };
        for ((i, p), h) in work.into_iter().zip(hidden) {
            let hour = series.panels[i].hour;
            match (p, h) {
                (Some(p), Some(h)) => {
                    out.params.insert(hour, p);
                    out.panel_index.insert(hour, i);
                    out.hidden.insert(hour, h);
                }
                _ => out.skipped.push(hour),
            }
        }
        Ok(out)
    }

    fn panel(&self, hour: i64) -> &HourlyPanel {
        &self.series.panels[self.panel_index[&hour]]
    }

    fn usable(&self, window: &Window) -> Vec<i64> {
        window.hours.iter().copied().filter(|h| self.hidden.contains_key(h)).collect()
    }

    /// Calibration field fitted from the training reference values of the window.
    fn calibrate(&self, which: Calib, window: &Window, plan: &SplitPlan, cfg: &CalibrationConfig) -> Result<CalibrationField> {
        let mut stations: Vec<StationPairs> = self
            .series
            .epa_sites
            .iter()
            .map(|s| StationPairs {
                site: s.clone(),
                pairs: Vec::new(),
            })
            .collect();
        for h in self.usable(window) {
            let split = plan
                .get(h)
                .ok_or_else(|| Error::MissingPrerequisite(format!("split plan has no hour {h}")))?;
            let panel = self.panel(h);
            let y = &self.hidden[&h];
            for &j in &split.train {
                if let Some(z) = panel.epa[j] {
                    stations[j].pairs.push((y[j], z));
                }
            }
        }
        match which {
            Calib::Global => {
                let (y, z): (Vec<f64>, Vec<f64>) = stations.iter().flat_map(|s| s.pairs.iter().copied()).unzip();
                if y.len() < 3 {
                    return Err(Error::MissingPrerequisite(format!(
                        "global calibration for window {} needs training reference values",
                        window.label
                    )));
                }
                Ok(CalibrationField::Global(fit_global(&y, &z)?))
            }
            Calib::Adaptive => {
                let (anchors, _) = fit_anchors(&stations, cfg.min_hours);
                CalibrationField::adaptive(anchors, &cfg.ml).map_err(|e| {
                    Error::MissingPrerequisite(format!("adaptive calibration for window {}: {e}", window.label))
                })
            }
        }
    }
}

/// One held-out prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct TestPrediction {
    pub hour: i64,
    pub station: usize,
    pub predicted: f64,
    pub actual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodRun {
    pub method: MethodId,
    pub window: String,
    pub rep: usize,
    pub predictions: Vec<TestPrediction>,
    pub rmspe: f64,
    /// Hours where the reference-only kriging fell back to the training mean.
    pub fallbacks: usize,
}

/// Predictions of one method at the test stations of every hour in `window`.
pub fn run_method(
    id: MethodId,
    window: &Window,
    plan: &SplitPlan,
    prep: &Prepared,
    cfg: &EvalConfig,
) -> Result<MethodRun> {
    let field = id
        .calibration()
        .map(|c| prep.calibrate(c, window, plan, &cfg.calibration))
        .transpose()?;
    run_with_field(id, window, plan, prep, field.as_ref(), cfg)
}

/// As [`run_method`] with a given calibration field for M2–M5.
pub fn run_with_field(
    id: MethodId,
    window: &Window,
    plan: &SplitPlan,
    prep: &Prepared,
    field: Option<&CalibrationField>,
    cfg: &EvalConfig,
) -> Result<MethodRun> {
    if id.calibration().is_some() && field.is_none() {
        return Err(Error::MissingPrerequisite(format!("{} needs a calibration field", id.tag())));
    }
    let sites = &prep.series.epa_sites;
    let hours = prep.usable(window);
    let per_hour: Vec<(Vec<TestPrediction>, bool)> = hours
        .par_iter()
        .map(|&h| -> Result<(Vec<TestPrediction>, bool)> {
            let split = plan
                .get(h)
                .ok_or_else(|| Error::MissingPrerequisite(format!("split plan has no hour {h}")))?;
            if split.test.is_empty() {
                return Ok((Vec::new(), false));
            }
            let panel = prep.panel(h);
            let targets: Vec<Location> = split.test.iter().map(|&j| sites[j].clone()).collect();
            let (pred, fell_back) = match id {
                MethodId::M1 => (split.test.iter().map(|&j| prep.hidden[&h][j]).collect(), false),
                MethodId::M2 | MethodId::M4 => {
                    let f = field.expect("checked above");
                    let y = &prep.hidden[&h];
                    let p = split
                        .test
                        .iter()
                        .zip(&targets)
                        .map(|(&j, s)| {
                            let (f0, f1) = f.coefficients(s);
                            f0 + f1 * y[j]
                        })
                        .collect();
                    (p, false)
                }
                MethodId::M3 | MethodId::M5 => {
                    let f = field.expect("checked above");
                    let params = prep.params[&h];
                    let train = training_panel(panel, split);
                    let sys = HourSystem::build(
                        params,
                        &train,
                        prep.basis,
                        &prep.noise,
                        Some(ReferenceInput {
                            field: f,
                            sigma_xi2: cfg.sigma_xi2,
                        }),
                    )
                    .map_err(|e| e.at_hour(h))?;
                    (sys.predict(params, prep.basis, Some(f), Method::Fused, &targets).mean, false)
                }
                MethodId::M6 => reference_kriging(panel, split, &targets, &cfg.ml),
            };
            let out = split
                .test
                .iter()
                .zip(pred)
                .map(|(&j, p)| TestPrediction {
                    hour: h,
                    station: j,
                    predicted: p,
                    actual: panel.epa[j].expect("test stations are present"),
                })
                .collect();
            Ok((out, fell_back))
        })
        .collect::<Result<_>>()?;
    let fallbacks = per_hour.iter().filter(|h| h.1).count();
    let predictions: Vec<TestPrediction> = per_hour.into_iter().flat_map(|h| h.0).collect();
    if predictions.is_empty() {
        return Err(Error::MissingPrerequisite(format!(
            "window {} has no held-out reference values",
            window.label
        )));
    }
    let (p, a): (Vec<f64>, Vec<f64>) = predictions.iter().map(|t| (t.predicted, t.actual)).unzip();
    Ok(MethodRun {
        method: id,
        window: window.label.clone(),
        rep: plan.rep,
        rmspe: rmspe(&p, &a)?,
        predictions,
        fallbacks,
    })
}

/// Ordinary kriging with a fitted scalar nugget; the training mean when the
/// fit is impossible.
fn reference_kriging(panel: &HourlyPanel, split: &HourSplit, targets: &[Location], ml: &MlConfig) -> (Vec<f64>, bool) {
    let sites: Vec<Location> = split.train.iter().map(|&j| panel.epa_sites[j].clone()).collect();
    let z: Vec<f64> = split.train.iter().filter_map(|&j| panel.epa[j]).collect();
    let krige = || -> Result<Vec<f64>> {
        let fit = fit_expcov_ml_nugget(&z, &sites, ml)?;
        let nug = vec![fit.nugget; z.len()];
        Ok(ordinary_krige(&z, &sites, &nug, &fit.cov, targets)?
            .into_iter()
            .map(|p| p.0)
            .collect())
    };
    match krige() {
        Ok(p) => (p, false),
        Err(e) => {
            log::warn!("hour {}: reference kriging fell back to the mean: {e}", panel.hour);
            let m = if z.is_empty() { f64::NAN } else { z.iter().sum::<f64>() / z.len() as f64 };
            (vec![m; targets.len()], true)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub window: String,
    pub method: MethodId,
    pub rep: usize,
    pub rmspe: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub window: String,
    pub method: MethodId,
    pub reps: usize,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
    /// Total reference-kriging fallbacks.
    pub fallbacks: usize,
}

impl EvalTable {
    pub fn summary(&self) -> Vec<CellSummary> {
        let mut cells: BTreeMap<(String, MethodId), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            cells.entry((r.window.clone(), r.method)).or_default().push(r.rmspe);
        }
        cells
            .into_iter()
            .map(|((window, method), mut v)| {
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let sd = if v.len() > 1 {
                    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                v.sort_by(f64::total_cmp);
                let k = v.len();
                let median = if k % 2 == 1 { v[k / 2] } else { 0.5 * (v[k / 2 - 1] + v[k / 2]) };
                CellSummary {
                    window,
                    method,
                    reps: k,
                    mean,
                    sd,
                    median,
                }
            })
            .collect()
    }

    /// Mean RMSPE of one method over all windows and replications.
    pub fn mean_of(&self, m: MethodId) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.method == m).map(|r| r.rmspe).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// `window,method,rep,rmspe`
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["window", "method", "rep", "rmspe"])?;
        for r in &self.rows {
            out.write_record([
                r.window.clone(),
                r.method.tag().to_string(),
                r.rep.to_string(),
                format!("{:.9}", r.rmspe),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["window", "method", "reps", "mean", "sd", "median"])?;
        for c in self.summary() {
            out.write_record([
                c.window,
                c.method.tag().to_string(),
                c.reps.to_string(),
                format!("{:.9}", c.mean),
                format!("{:.9}", c.sd),
                format!("{:.9}", c.median),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Replication seeds drawn from `seed`.
pub fn rep_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// Every method in every window for `cfg.reps` random splits.
pub fn replicate(prep: &Prepared, windows: &[Window], cfg: &EvalConfig) -> Result<EvalTable> {
    if cfg.reps == 0 {
        return Err(Error::InvalidInput("at least one replication required".into()));
    }
    replicate_with_seeds(prep, windows, &rep_seeds(cfg.seed, cfg.reps), cfg)
}

/// As [`replicate`] with replication `r` split by `seeds[r]`.
pub fn replicate_with_seeds(prep: &Prepared, windows: &[Window], seeds: &[u64], cfg: &EvalConfig) -> Result<EvalTable> {
    let cells: Vec<(usize, usize)> = (0..seeds.len())
        .flat_map(|r| (0..windows.len()).map(move |w| (r, w)))
        .collect();
    let plans: Vec<SplitPlan> = seeds
        .par_iter()
        .enumerate()
        .map(|(r, &s)| SplitPlan::new(prep.series, r, s))
        .collect();
    let results: Vec<Vec<MethodRun>> = cells
        .par_iter()
        .map(|&(r, w)| {
            let (win, plan) = (&windows[w], &plans[r]);
            let need = |c: Calib| cfg.methods.iter().any(|m| m.calibration() == Some(c));
            let global = need(Calib::Global)
                .then(|| prep.calibrate(Calib::Global, win, plan, &cfg.calibration))
                .transpose()?;
            let adaptive = need(Calib::Adaptive)
                .then(|| prep.calibrate(Calib::Adaptive, win, plan, &cfg.calibration))
                .transpose()?;
            cfg.methods
                .iter()
                .map(|&m| {
                    let f = match m.calibration() {
                        Some(Calib::Global) => global.as_ref(),
                        Some(Calib::Adaptive) => adaptive.as_ref(),
                        None => None,
                    };
                    run_with_field(m, win, plan, prep, f, cfg)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut table = EvalTable::default();
    for runs in results {
        for run in runs {
            table.fallbacks += run.fallbacks;
            table.rows.push(EvalRow {
                window: run.window,
                method: run.method,
                rep: run.rep,
                rmspe: run.rmspe,
            });
        }
    }
    Ok(table)
}

/// OLS of the reference value on a sensor-side value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LineFit {
    pub hours: usize,
    pub intercept: f64,
    pub slope: f64,
    pub r2: f64,
}

fn line_fit(pairs: &[(f64, f64)]) -> Option<LineFit> {
    let n = pairs.len();
    if n < 3 {
        return None;
    }
    let nf = n as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some(LineFit {
        hours: n,
        intercept: my - slope * mx,
        slope,
        r2: sxy * sxy / (sxx * syy),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExploreRow {
    pub station: String,
    pub neighbours: usize,
    pub nearest: String,
    pub nearest_km: f64,
    pub vs_nearest: Option<LineFit>,
    pub vs_average: Option<LineFit>,
    /// (sensor, reference) pairs behind the two fits.
    #[serde(skip)]
    pub nearest_pairs: Vec<(f64, f64)>,
    #[serde(skip)]
    pub average_pairs: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExploreReport {
    pub radius_km: f64,
    pub rows: Vec<ExploreRow>,
    /// No station had enough sensors within the radius.
    pub empty: bool,
}

/// Minimum number of sensors within the radius for a station to qualify.
pub const MIN_NEIGHBOURS: usize = 5;

/// Per-station comparison of reference values with the nearest sensor and
/// with the mean of sensors within `radius_km`.
pub fn explore(series: &PanelSeries, radius_km: f64) -> Result<ExploreReport> {
    if !(radius_km > 0.0) {
        return Err(Error::InvalidInput(format!("radius must be positive, got {radius_km}")));
    }
    let ab = &series.airbox_sites;
    let rows: Vec<Option<ExploreRow>> = series
        .epa_sites
        .par_iter()
        .enumerate()
        .map(|(j, s)| {
            let near: Vec<usize> = (0..ab.len()).filter(|&i| ab[i].distance(s) <= radius_km).collect();
            if near.len() < MIN_NEIGHBOURS {
                return None;
            }
            let nearest = *near
                .iter()
                .min_by(|&&a, &&b| ab[a].distance(s).total_cmp(&ab[b].distance(s)).then(a.cmp(&b)))
                .expect("nonempty");
            let mut np = Vec::new();
            let mut ap = Vec::new();
            for p in &series.panels {
                let Some(z) = p.epa[j] else { continue };
                if let Some(v) = p.airbox[nearest] {
                    np.push((v, z));
                }
                let vals: Vec<f64> = near.iter().filter_map(|&i| p.airbox[i]).collect();
                if !vals.is_empty() {
                    ap.push((vals.iter().sum::<f64>() / vals.len() as f64, z));
                }
            }
            Some(ExploreRow {
                station: s.id.clone(),
                neighbours: near.len(),
                nearest: ab[nearest].id.clone(),
                nearest_km: ab[nearest].distance(s),
                vs_nearest: line_fit(&np),
                vs_average: line_fit(&ap),
                nearest_pairs: np,
                average_pairs: ap,
            })
        })
        .collect();
    let rows: Vec<ExploreRow> = rows.into_iter().flatten().collect();
    Ok(ExploreReport {
        radius_km,
        empty: rows.is_empty(),
        rows,
    })
}

impl ExploreReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "station",
            "neighbours",
            "nearest",
            "nearest_km",
            "hours_nearest",
            "intercept_nearest",
            "slope_nearest",
            "r2_nearest",
            "hours_average",
            "intercept_average",
            "slope_average",
            "r2_average",
        ])?;
        let cols = |f: &Option<LineFit>| match f {
            Some(f) => vec![
                f.hours.to_string(),
                format!("{:.6}", f.intercept),
                format!("{:.6}", f.slope),
                format!("{:.6}", f.r2),
            ],
            None => vec!["0".into(), String::new(), String::new(), String::new()],
        };
        for r in &self.rows {
            let mut rec = vec![
                r.station.clone(),
                r.neighbours.to_string(),
                r.nearest.clone(),
                format!("{:.4}", r.nearest_km),
            ];
            rec.extend(cols(&r.vs_nearest));
            rec.extend(cols(&r.vs_average));
            out.write_record(rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmspe_basics() {
        assert_eq!(rmspe(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmspe(&[3.5, 1.5, -2.0], &[1.0, -1.0, -4.5]).unwrap() - 2.5).abs() < 1e-15);
        assert!(rmspe(&[], &[]).is_err());
        assert!(rmspe(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn train_sizes_round_up() {
        assert_eq!(
            (0..8).map(train_size).collect::<Vec<_>>(),
            vec![0, 1, 2, 2, 3, 4, 4, 5]
        );
    }

    #[test]
    fn months_split_on_calendar() {
        let jan31 = 438_288 + 30 * 24 + 23;
        let w = monthly_windows(&[438_288, jan31, jan31 + 1, jan31 + 2]);
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].label, "2020-01");
        assert_eq!(w[0].hours.len(), 2);
        assert_eq!(w[1].label, "2020-02");
    }

    #[test]
    fn methods_parse() {
        for m in MethodId::ALL {
            assert_eq!(MethodId::parse(m.tag()).unwrap(), m);
        }
        assert_eq!(MethodId::parse("m5").unwrap(), MethodId::M5);
        assert!(MethodId::parse("M7").is_err());
    }
}
