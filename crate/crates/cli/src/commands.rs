use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use airfuse::basis::{build_basis, BasisSet};
use airfuse::calibration::{build_field, CalibrationField, CalibrationMode};
use airfuse::eval::{explore, monthly_windows, replicate, MethodId, Prepared};
use airfuse::fieldfit::{fit_series, read_params_csv, write_params_csv, HourlyParams};
use airfuse::ingest::{
    aggregate_hourly, build_series, centroid_projection, clean, filter_hours, format_hour, parse_time,
    read_record_files, PanelSeries,
};
use airfuse::noise_model::{estimate_noise_model, points_csv, screen_sensors, ColocatedSeries, NoiseModel};
use airfuse::predict::{standardized_from_system, Affine, CalibrationSurface, HourSystem, Method, ReferenceInput, SensorNoise};
use airfuse::sim::{colocated_sim, simulate};
use airfuse::svg;
use airfuse::{Error, Location};
use anyhow::{bail, Context, Result};

use crate::config::RunConfig;

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_series(dir: &Path) -> Result<PanelSeries> {
    Ok(PanelSeries::read_dir(dir)?)
}

/// Grid covering every site of both networks; row-major in y.
pub struct Grid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub points: Vec<Location>,
}

pub fn site_grid(series: &PanelSeries, spacing: f64) -> Result<Grid> {
    if !(spacing > 0.0) {
        return Err(Error::InvalidInput(format!("grid spacing must be positive, got {spacing}")).into());
    }
    let all = series.airbox_sites.iter().chain(series.epa_sites.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for s in all {
        x0 = x0.min(s.x);
        x1 = x1.max(s.x);
        y0 = y0.min(s.y);
        y1 = y1.max(s.y);
    }
    if !x0.is_finite() {
        return Err(Error::InvalidInput("no sites to grid".into()).into());
    }
    let axis = |lo: f64, hi: f64| -> Vec<f64> {
        let n = ((hi - lo) / spacing).floor() as usize + 1;
        (0..n).map(|k| lo + k as f64 * spacing).collect()
    };
    let (xs, ys) = (axis(x0, x1), axis(y0, y1));
    let points = ys
        .iter()
        .enumerate()
        .flat_map(|(j, &y)| xs.iter().enumerate().map(move |(i, &x)| Location::at(format!("g{i}_{j}"), x, y)))
        .collect();
    Ok(Grid { xs, ys, points })
}

fn stamp(hour: i64) -> String {
    let s = format_hour(hour);
    s.get(..13).map_or(s.clone(), str::to_string)
}

pub fn ingest(cfg: &RunConfig, airbox: &[PathBuf], epa: &[PathBuf], out: &Path) -> Result<()> {
    let (ab, ab_clean) = clean(read_record_files(airbox)?);
    let (ep, ep_clean) = clean(read_record_files(epa)?);
    let (ab, ep) = (aggregate_hourly(&ab), aggregate_hourly(&ep));
    let proj = centroid_projection(&ab, &ep)?;
    let all = build_series(&ab, &ep, &proj)?;
    let kept = filter_hours(&all, cfg.ingest.min_airbox, cfg.ingest.min_epa)?;
    kept.write_dir(out)?;
    write_text(
        &out.join("ingest_report.txt"),
        &format!(
            "projection_ref_lon {}\nprojection_ref_lat {}\nairbox_records_kept {}\nairbox_records_removed {}\nepa_records_kept {}\nepa_records_removed {}\nairbox_sites {}\nepa_sites {}\nhours_total {}\nhours_kept {}\n",
            proj.ref_lon,
            proj.ref_lat,
            ab_clean.kept,
            ab_clean.removed,
            ep_clean.kept,
            ep_clean.removed,
            kept.airbox_sites.len(),
            kept.epa_sites.len(),
            all.len(),
            kept.len()
        ),
    )?;
    cfg.echo(out)
}

pub fn simulate_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (series, truth) = simulate(&cfg.sim)?;
    series.write_dir(out)?;
    let coloc = colocated_sim(&cfg.colocated)?;
    coloc.write_csv(create(&out.join("colocated.csv"))?)?;
    let tdir = out.join("truth");
    fs::create_dir_all(&tdir)?;
    write_params_csv(&truth.true_params(&series), create(&tdir.join("params.csv"))?)?;
    write_text(&tdir.join("basis.txt"), &truth.basis.to_text())?;
    write_text(&tdir.join("noise.txt"), &cfg.sim.noise.to_text())?;
    let cal = cfg.sim.calibration();
    let grid = site_grid(&series, cfg.predict.grid_km)?;
    let mut w = create(&tdir.join("calibration_grid.csv"))?;
    writeln!(w, "x,y,f0,f1")?;
    for s in &grid.points {
        let (f0, f1) = cal.coefficients(s);
        writeln!(w, "{},{},{f0},{f1}", s.x, s.y)?;
    }
    w.flush()?;
    cfg.echo(out)
}

pub struct Fitted {
    pub basis: BasisSet,
    pub params: Vec<HourlyParams>,
    pub noise: NoiseModel,
}

fn open(dir: &Path, name: &str, hint: &str) -> Result<BufReader<File>> {
    let p = dir.join(name);
    File::open(&p)
        .map(BufReader::new)
        .map_err(|e| Error::MissingPrerequisite(format!("{}: {e}; {hint}", p.display())).into())
}

pub fn load_fit(dir: &Path, series: &PanelSeries) -> Result<Fitted> {
    let hint = "run `airfuse fit` first";
    let basis = BasisSet::from_text(&std::io::read_to_string(open(dir, "basis.txt", hint)?)?)?;
    let noise = NoiseModel::from_text(&std::io::read_to_string(open(dir, "noise.txt", hint)?)?)?;
    let params = read_params_csv(open(dir, "params.csv", hint)?, series, &basis)?;
    Ok(Fitted { basis, params, noise })
}

pub fn fit(cfg: &RunConfig, series_dir: &Path, colocated: Option<&Path>, noise: Option<&Path>, out: &Path) -> Result<()> {
    let noise_model = match (colocated, noise) {
        (Some(_), Some(_)) => bail!(Error::InvalidInput("give either --colocated or --noise, not both".into())),
        (None, None) => bail!(Error::MissingPrerequisite(
            "fit needs a noise law: --colocated <csv> to estimate it or --noise <file> to reuse one".into()
        )),
        (None, Some(p)) => NoiseModel::from_text(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        (Some(p), None) => {
            let raw = ColocatedSeries::read_csv(BufReader::new(
                File::open(p).with_context(|| format!("reading {}", p.display()))?,
            ))?;
            let (kept, report) = screen_sensors(&raw, cfg.noise.min_corr)?;
            fs::create_dir_all(out)?;
            write_text(
                &out.join("screen.txt"),
                &format!(
                    "sensors {}\nkept {}\nno_records {}\nlow_correlation {}\n",
                    raw.sensors.len(),
                    kept.sensors.len(),
                    report.no_records.join(" "),
                    report.low_correlation.join(" ")
                ),
            )?;
            let nf = estimate_noise_model(&kept, &cfg.noise.fit)?;
            write_text(&out.join("noise_points.csv"), &points_csv(&nf.points))?;
            let m = nf.model;
            let (lo, hi) = nf
                .points
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
            let curve: Vec<(f64, f64)> = (0..=50)
                .map(|k| {
                    let z = lo + (hi - lo) * k as f64 / 50.0;
                    (z, m.variance_at(z))
                })
                .collect();
            let svg_text = svg::scatter_curve(&nf.points, &curve, "colocated sensor variance", "trimmed mean (ppm)", "squared MAD");
            write_text(&out.join("noise_points.svg"), &svg_text)?;
            m
        }
    };
    let series = read_series(series_dir)?;
    let basis = build_basis(&series.airbox_sites, &cfg.basis)?;
    let fit = fit_series(&series, &basis, None, &cfg.fieldfit)?;
    fs::create_dir_all(out)?;
    write_text(&out.join("basis.txt"), &basis.to_text())?;
    write_text(&out.join("noise.txt"), &noise_model.to_text())?;
    write_params_csv(&fit.params, create(&out.join("params.csv"))?)?;
    let mut w = create(&out.join("failures.csv"))?;
    writeln!(w, "hour,message")?;
    for (h, msg) in &fit.failures {
        writeln!(w, "{h},\"{}\"", msg.replace('"', "'"))?;
    }
    w.flush()?;
    cfg.echo(out)
}

fn parse_mode(s: &str) -> Result<CalibrationMode> {
    match s.to_ascii_lowercase().as_str() {
        "global" => Ok(CalibrationMode::Global),
        "adaptive" => Ok(CalibrationMode::Adaptive),
        _ => bail!(Error::InvalidInput(format!("unknown calibration mode '{s}' (global | adaptive)"))),
    }
}

pub fn calibrate(cfg: &RunConfig, series_dir: &Path, fit_dir: &Path, mode: Option<&str>, out: &Path) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(m) = mode {
        cfg.calibration.mode = parse_mode(m)?;
    }
    let series = read_series(series_dir)?;
    let fitted = load_fit(fit_dir, &series)?;
    let (field, report) = build_field(
        &series,
        &fitted.params,
        &fitted.basis,
        &fitted.noise,
        &series.hours(),
        &cfg.calibration,
    )?;
    field.write_dir(out)?;
    let grid = site_grid(&series, cfg.predict.grid_km)?;
    let coefs: Vec<(f64, f64)> = grid.points.iter().map(|s| field.coefficients(s)).collect();
    let mut w = create(&out.join("field_grid.csv"))?;
    writeln!(w, "x,y,f0,f1")?;
    for (s, (a, b)) in grid.points.iter().zip(&coefs) {
        writeln!(w, "{},{},{a},{b}", s.x, s.y)?;
    }
    w.flush()?;
    let f0: Vec<f64> = coefs.iter().map(|c| c.0).collect();
    let f1: Vec<f64> = coefs.iter().map(|c| c.1).collect();
    write_text(&out.join("f0.svg"), &svg::heatmap(&grid.xs, &grid.ys, &f0, "calibration intercept f0", "f0"))?;
    write_text(&out.join("f1.svg"), &svg::heatmap(&grid.xs, &grid.ys, &f1, "calibration slope f1", "f1"))?;
    let skipped: Vec<String> = report.anchors.skipped.iter().map(|(id, why)| format!("{id}:{why}")).collect();
    write_text(
        &out.join("report.txt"),
        &format!(
            "hours_skipped {}\nstations_skipped {}\nidw_fallback {}\n",
            report.hours_skipped.len(),
            skipped.join(" "),
            report.fallback
        ),
    )?;
    cfg.echo(out)
}

fn load_calibration(dir: Option<&Path>, what: &str) -> Result<CalibrationField> {
    let Some(dir) = dir else {
        bail!(Error::MissingPrerequisite(format!(
            "{what} needs a calibration artifact: pass --calibration <dir> from `airfuse calibrate`"
        )));
    };
    CalibrationField::read_dir(dir).map_err(|e| match e {
        Error::Io(io) => Error::MissingPrerequisite(format!(
            "{}: {io}; run `airfuse calibrate` first",
            dir.join("calibration.txt").display()
        ))
        .into(),
        other => other.into(),
    })
}

fn parse_method(s: &str) -> Result<Method> {
    match s.to_ascii_lowercase().as_str() {
        "hidden" => Ok(Method::Hidden),
        "airbox" | "airbox_only" | "airbox-only" => Ok(Method::AirboxOnly),
        "fused" => Ok(Method::Fused),
        _ => bail!(Error::InvalidInput(format!("unknown method '{s}' (hidden | airbox | fused)"))),
    }
}

fn parse_hour(s: &str) -> Result<i64> {
    if let Ok(h) = s.trim().parse::<i64>() {
        return Ok(h);
    }
    Ok(parse_time(s)?.div_euclid(3600))
}

pub fn predict(
    cfg: &RunConfig,
    series_dir: &Path,
    fit_dir: &Path,
    cal_dir: Option<&Path>,
    hours: &[String],
    method: Option<&str>,
    out: &Path,
) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(m) = method {
        cfg.predict.method = m.to_string();
    }
    let method = parse_method(&cfg.predict.method)?;
    let field = match method {
        Method::Hidden => None,
        _ => Some(load_calibration(cal_dir, "predict")?),
    };
    let series = read_series(series_dir)?;
    let fitted = load_fit(fit_dir, &series)?;
    let wanted: Vec<i64> = if hours.is_empty() {
        fitted.params.iter().map(|p| p.hour).collect()
    } else {
        hours.iter().map(|h| parse_hour(h)).collect::<Result<_>>()?
    };
    let grid = site_grid(&series, cfg.predict.grid_km)?;
    let noise = SensorNoise::Model {
        model: fitted.noise,
        plug: cfg.calibration.plug,
        trim: cfg.calibration.trim,
    };
    fs::create_dir_all(out)?;
    let mut index = create(&out.join("index.csv"))?;
    writeln!(index, "hour,time,file,clamped,ridge,jitter")?;
    for h in wanted {
        let params = fitted
            .params
            .iter()
            .find(|p| p.hour == h)
            .ok_or_else(|| Error::MissingPrerequisite(format!("no fitted parameters for hour {h} ({})", format_hour(h))))?;
        let panel = series
            .panels
            .iter()
            .find(|p| p.hour == h)
            .ok_or_else(|| Error::InvalidInput(format!("hour {h} is not in the series")))?;
        let f = field.as_ref().map(|f| f as &dyn CalibrationSurface);
        let reference = match method {
            Method::Fused => f.map(|field| ReferenceInput {
                field,
                sigma_xi2: cfg.predict.sigma_xi2,
            }),
            _ => None,
        };
        let sys = HourSystem::build(params, panel, &fitted.basis, &noise, reference)?;
        let surf = sys.predict(params, &fitted.basis, f, method, &grid.points);
        let name = format!("pred_{}", stamp(h));
        surf.write_csv(create(&out.join(format!("{name}.csv")))?)?;
        write_text(
            &out.join(format!("{name}.svg")),
            &svg::heatmap(&grid.xs, &grid.ys, &surf.mean, &format!("{} {}", method.tag(), format_hour(h)), "ppm"),
        )?;
        writeln!(
            index,
            "{h},{},{name}.csv,{},{},{}",
            format_hour(h),
            surf.clamped,
            surf.ridge,
            surf.jitter
        )?;
    }
    index.flush()?;
    cfg.echo(out)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn diagnose(cfg: &RunConfig, series_dir: &Path, fit_dir: &Path, cal_dir: Option<&Path>, out: &Path) -> Result<()> {
    let series = read_series(series_dir)?;
    let fitted = load_fit(fit_dir, &series)?;
    let field = cal_dir.map(|d| load_calibration(Some(d), "diagnose")).transpose()?;
    let noise = SensorNoise::Model {
        model: fitted.noise,
        plug: cfg.calibration.plug,
        trim: cfg.calibration.trim,
    };
    fs::create_dir_all(out)?;
    let mut per_site: Vec<Vec<f64>> = vec![Vec::new(); series.airbox_sites.len()];
    let mut w = create(&out.join("residuals.csv"))?;
    writeln!(w, "hour,site,residual")?;
    let mut excluded = 0;
    for params in &fitted.params {
        let Some(panel) = series.panels.iter().find(|p| p.hour == params.hour) else {
            continue;
        };
        let (sys, surf): (HourSystem, &dyn CalibrationSurface) = match &field {
            Some(f) => (
                HourSystem::build(
                    params,
                    panel,
                    &fitted.basis,
                    &noise,
                    Some(ReferenceInput {
                        field: f,
                        sigma_xi2: cfg.predict.sigma_xi2,
                    }),
                )?,
                f,
            ),
            None => (HourSystem::build(params, panel, &fitted.basis, &noise, None)?, &Affine::IDENTITY),
        };
        let r = standardized_from_system(&sys, surf)?;
        excluded += r.excluded;
        for (&i, v) in r.index.iter().zip(&r.values) {
            if let Some(v) = v {
                writeln!(w, "{},{},{v}", params.hour, series.airbox_sites[i].id)?;
                per_site[i].push(*v);
            }
        }
    }
    w.flush()?;
    let mut s = create(&out.join("site_summary.csv"))?;
    writeln!(s, "site,n,median,mad")?;
    let (mut ok_med, mut ok_mad, mut sites) = (0, 0, 0);
    let mut groups = Vec::new();
    for (i, v) in per_site.iter().enumerate() {
        if v.is_empty() {
            continue;
        }
        let mut a = v.clone();
        let med = median(&mut a);
        let mut dev: Vec<f64> = v.iter().map(|x| (x - med).abs()).collect();
        let mad = median(&mut dev) * 1.482_602_218_505_602;
        writeln!(s, "{},{},{med},{mad}", series.airbox_sites[i].id, v.len())?;
        sites += 1;
        ok_med += usize::from(med.abs() <= 0.1);
        ok_mad += usize::from((0.8..=1.2).contains(&mad));
        if groups.len() < 40 {
            groups.push((series.airbox_sites[i].id.clone(), v.clone()));
        }
    }
    s.flush()?;
    write_text(
        &out.join("residuals.svg"),
        &svg::boxplot(&groups, "standardized residuals by site", "residual"),
    )?;
    write_text(
        &out.join("report.txt"),
        &format!(
            "sites {sites}\nmedian_within_0.1 {ok_med}\nmad_within_0.8_1.2 {ok_mad}\nexcluded_zero_noise {excluded}\nreference_rows {}\n",
            field.is_some()
        ),
    )?;
    cfg.echo(out)
}

fn parse_methods(s: &str) -> Result<Vec<MethodId>> {
    Ok(s.split(',').map(MethodId::parse).collect::<airfuse::Result<_>>()?)
}

pub fn evaluate(
    cfg: &RunConfig,
    series_dir: &Path,
    fit_dir: &Path,
    reps: Option<usize>,
    methods: Option<&str>,
    out: &Path,
) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(r) = reps {
        cfg.eval.reps = r;
    }
    if let Some(m) = methods {
        cfg.eval.methods = parse_methods(m)?;
    }
    let series = read_series(series_dir)?;
    let fitted = load_fit(fit_dir, &series)?;
    let prep = Prepared::new(&series, &fitted.params, &fitted.basis, &fitted.noise, &cfg.eval.calibration)?;
    let windows = monthly_windows(&series.hours());
    let table = replicate(&prep, &windows, &cfg.eval)?;
    fs::create_dir_all(out)?;
    table.write_csv(create(&out.join("results.csv"))?)?;
    table.write_summary_csv(create(&out.join("summary.csv"))?)?;
    for w in &windows {
        let groups: Vec<(String, Vec<f64>)> = cfg
            .eval
            .methods
            .iter()
            .map(|m| {
                (
                    m.tag().to_string(),
                    table
                        .rows
                        .iter()
                        .filter(|r| r.window == w.label && r.method == *m)
                        .map(|r| r.rmspe)
                        .collect(),
                )
            })
            .collect();
        write_text(
            &out.join(format!("boxplot_{}.svg", w.label)),
            &svg::boxplot(&groups, &format!("RMSPE {}", w.label), "RMSPE (ppm)"),
        )?;
    }
    write_text(
        &out.join("report.txt"),
        &format!(
            "windows {}\nreps {}\nhours_without_params {}\nreference_kriging_fallbacks {}\n",
            windows.len(),
            cfg.eval.reps,
            prep.skipped.len(),
            table.fallbacks
        ),
    )?;
    cfg.echo(out)
}

fn safe(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn explore_cmd(cfg: &RunConfig, series_dir: &Path, radius: Option<f64>, out: &Path) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(r) = radius {
        cfg.explore.radius_km = r;
    }
    let series = read_series(series_dir)?;
    let report = explore(&series, cfg.explore.radius_km)?;
    fs::create_dir_all(out)?;
    report.write_csv(create(&out.join("explore.csv"))?)?;
    if report.empty {
        log::warn!(
            "no reference station has {} sensors within {} km",
            airfuse::eval::MIN_NEIGHBOURS,
            cfg.explore.radius_km
        );
    }
    for r in &report.rows {
        for (kind, pairs, fit) in [
            ("nearest", &r.nearest_pairs, r.vs_nearest),
            ("average", &r.average_pairs, r.vs_average),
        ] {
            let title = match fit {
                Some(f) => format!("{} vs {kind} sensor, R2 = {:.3}", r.station, f.r2),
                None => format!("{} vs {kind} sensor", r.station),
            };
            write_text(
                &out.join(format!("scatter_{}_{kind}.svg", safe(&r.station))),
                &svg::scatter(pairs, fit.map(|f| (f.intercept, f.slope)), &title, "sensor (ppm)", "reference (ppm)"),
            )?;
        }
    }
    write_text(
        &out.join("report.txt"),
        &format!("radius_km {}\nstations {}\nempty {}\n", cfg.explore.radius_km, report.rows.len(), report.empty),
    )?;
    cfg.echo(out)
}
