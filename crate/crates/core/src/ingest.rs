//! Raw sensor records to hourly panels, and the panel CSV format.
//!
//! Raw files are comma-delimited with a header naming `device`, `time`,
//! `lon`, `lat` and `pm25` in any order. Times are ISO-8601; a missing
//! offset means UTC. Records timestamped in `[h:00, h+1:00)` belong to hour
//! `h`, counted in whole hours since the Unix epoch.
//!
//! A panel series is stored as four files in one directory:
//! `airbox_sites.csv` / `epa_sites.csv` (`id,x,y` in km) and
//! `airbox_panel.csv` / `epa_panel.csv` (an `hour` column, then one column
//! per site in registry order; an empty cell is a missing value).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, NaiveDateTime};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{HourlyPanel, Location, Projection, Sites};

/// Records outside `[0, MAX_PM25]` are discarded by `clean`.
pub const MAX_PM25: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    pub device: String,
    /// Seconds since the Unix epoch, UTC.
    pub time: i64,
    pub lon: f64,
    pub lat: f64,
    pub pm25: Option<f64>,
}

impl RawRecord {
    pub fn hour(&self) -> i64 {
        self.time.div_euclid(3600)
    }
}

/// Parses an ISO-8601 timestamp to Unix seconds.
pub fn parse_time(s: &str) -> Result<i64> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t.and_utc().timestamp());
        }
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f%z", "%Y-%m-%d %H:%M:%S%.f%z", "%Y-%m-%d %H:%M:%S%.f%:z"] {
        if let Ok(t) = DateTime::parse_from_str(s, fmt) {
            return Ok(t.timestamp());
        }
    }
    Err(Error::Parse(format!("unrecognised timestamp '{s}'")))
}

pub fn format_hour(hour: i64) -> String {
    DateTime::from_timestamp(hour * 3600, 0)
        .map(|t| t.format("%Y-%m-%dT%H:00:00Z").to_string())
        .unwrap_or_else(|| hour.to_string())
}

fn parse_num(field: &str, what: &str, line: u64) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("line {line}: bad {what} '{field}'")))
}

/// Reads raw records from CSV.
pub fn read_records<R: Read>(r: R) -> Result<Vec<RawRecord>> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header = rd.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Parse(format!("missing column '{name}'")))
    };
    let (ci, ct, cx, cy, cv) = (col("device")?, col("time")?, col("lon")?, col("lat")?, col("pm25")?);
    let mut out = Vec::new();
    for (k, rec) in rd.records().enumerate() {
        let rec = rec?;
        let line = k as u64 + 2;
        let pm = rec.get(cv).unwrap_or("").trim();
        let pm25 = if pm.is_empty() || pm.eq_ignore_ascii_case("na") || pm.eq_ignore_ascii_case("nan") {
            None
        } else {
            let v = parse_num(pm, "pm25", line)?;
            v.is_finite().then_some(v)
        };
        out.push(RawRecord {
            device: rec.get(ci).unwrap_or("").to_string(),
            time: parse_time(rec.get(ct).unwrap_or(""))
                .map_err(|e| Error::Parse(format!("line {line}: {e}")))?,
            lon: parse_num(rec.get(cx).unwrap_or(""), "lon", line)?,
            lat: parse_num(rec.get(cy).unwrap_or(""), "lat", line)?,
            pm25,
        });
    }
    Ok(out)
}

/// Reads several raw files in parallel and concatenates them in path order.
pub fn read_record_files<P: AsRef<Path> + Sync>(paths: &[P]) -> Result<Vec<RawRecord>> {
    let parts: Vec<Result<Vec<RawRecord>>> = paths
        .par_iter()
        .map(|p| {
            let f = File::open(p.as_ref())?;
            read_records(BufReader::new(f)).map_err(|e| {
                Error::Parse(format!("{}: {e}", p.as_ref().display()))
            })
        })
        .collect();
    let mut out = Vec::new();
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CleanReport {
    pub kept: usize,
    pub removed: usize,
}

/// Drops records with pm25 < 0 or pm25 > 1000. Missing values pass through.
pub fn clean(records: Vec<RawRecord>) -> (Vec<RawRecord>, CleanReport) {
    let before = records.len();
    let kept: Vec<RawRecord> = records
        .into_iter()
        .filter(|r| r.pm25.is_none_or(|v| (0.0..=MAX_PM25).contains(&v)))
        .collect();
    let report = CleanReport {
        kept: kept.len(),
        removed: before - kept.len(),
    };
    (kept, report)
}

/// One network's hourly means keyed by site.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NetworkHourly {
    /// (id, lon, lat) per site, sorted by id.
    pub sites: Vec<(String, f64, f64)>,
    /// (hour, site index) → mean value.
    pub values: BTreeMap<(i64, usize), f64>,
    /// Number of records that contributed.
    pub records: usize,
}

/// Rounds a coordinate to 1e-4 degrees (about 11 m).
fn round_coord(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

/// Averages records per site and clock hour. A site is a device at a
/// rounded coordinate; a device seen at several coordinates becomes several
/// sites (`device@lon,lat`).
pub fn aggregate_hourly(records: &[RawRecord]) -> NetworkHourly {
    let mut coords: BTreeMap<&str, Vec<(i64, i64)>> = BTreeMap::new();
    let key = |r: &RawRecord| ((r.lon * 1e4).round() as i64, (r.lat * 1e4).round() as i64);
    for r in records {
        let e = coords.entry(r.device.as_str()).or_default();
        let k = key(r);
        if !e.contains(&k) {
            e.push(k);
        }
    }
    let mut sites = Vec::new();
    let mut index: BTreeMap<(&str, (i64, i64)), usize> = BTreeMap::new();
    for (dev, ks) in &mut coords {
        ks.sort_unstable();
        for k in ks.iter() {
            let lon = round_coord(k.0 as f64 / 1e4);
            let lat = round_coord(k.1 as f64 / 1e4);
            let id = if ks.len() == 1 {
                dev.to_string()
            } else {
                format!("{dev}@{lon},{lat}")
            };
            sites.push((id, lon, lat));
        }
    }
    let mut order: Vec<usize> = (0..sites.len()).collect();
    order.sort_by(|&a, &b| sites[a].0.cmp(&sites[b].0));
    let mut pos = vec![0; sites.len()];
    for (new, &old) in order.iter().enumerate() {
        pos[old] = new;
    }
    let mut k = 0;
    for (dev, ks) in &coords {
        for c in ks {
            index.insert((*dev, *c), pos[k]);
            k += 1;
        }
    }
    let sites: Vec<(String, f64, f64)> = order.iter().map(|&i| sites[i].clone()).collect();

    let mut acc: BTreeMap<(i64, usize), (f64, usize)> = BTreeMap::new();
    let mut used = 0;
    for r in records {
        if let Some(v) = r.pm25 {
            let s = index[&(r.device.as_str(), key(r))];
            let e = acc.entry((r.hour(), s)).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
            used += 1;
        }
    }
    NetworkHourly {
        sites,
        values: acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        records: used,
    }
}

/// Hourly panels for both networks over a shared, strictly increasing hour axis.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelSeries {
    pub airbox_sites: Sites,
    pub epa_sites: Sites,
    pub panels: Vec<HourlyPanel>,
}

impl PanelSeries {
    pub fn new(airbox_sites: Sites, epa_sites: Sites, panels: Vec<HourlyPanel>) -> Result<Self> {
        for w in panels.windows(2) {
            if w[0].hour >= w[1].hour {
                return Err(Error::InvalidInput("panel hours must be strictly increasing".into()));
            }
        }
        for p in &panels {
            if !Arc::ptr_eq(&p.airbox_sites, &airbox_sites) && p.airbox_sites != airbox_sites
                || !Arc::ptr_eq(&p.epa_sites, &epa_sites) && p.epa_sites != epa_sites
            {
                return Err(Error::InvalidInput(format!(
                    "hour {} uses a different site registry",
                    p.hour
                )));
            }
        }
        Ok(Self {
            airbox_sites,
            epa_sites,
            panels,
        })
    }

    pub fn hours(&self) -> Vec<i64> {
        self.panels.iter().map(|p| p.hour).collect()
    }

    pub fn len(&self) -> usize {
        self.panels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.panels.is_empty()
    }

    /// Panels whose hour is in `hours` (kept in series order).
    pub fn select(&self, hours: &[i64]) -> Self {
        let set: std::collections::BTreeSet<i64> = hours.iter().copied().collect();
        Self {
            airbox_sites: self.airbox_sites.clone(),
            epa_sites: self.epa_sites.clone(),
            panels: self
                .panels
                .iter()
                .filter(|p| set.contains(&p.hour))
                .cloned()
                .collect(),
        }
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_sites(&self.airbox_sites, BufWriter::new(File::create(dir.join("airbox_sites.csv"))?))?;
        write_sites(&self.epa_sites, BufWriter::new(File::create(dir.join("epa_sites.csv"))?))?;
        let hours = self.hours();
        let ab: Vec<&[Option<f64>]> = self.panels.iter().map(|p| p.airbox.as_slice()).collect();
        let ep: Vec<&[Option<f64>]> = self.panels.iter().map(|p| p.epa.as_slice()).collect();
        write_panel(
            &self.airbox_sites,
            &hours,
            &ab,
            BufWriter::new(File::create(dir.join("airbox_panel.csv"))?),
        )?;
        write_panel(
            &self.epa_sites,
            &hours,
            &ep,
            BufWriter::new(File::create(dir.join("epa_panel.csv"))?),
        )?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let open = |name: &str| -> Result<BufReader<File>> {
            File::open(dir.join(name)).map(BufReader::new).map_err(|e| {
                Error::MissingPrerequisite(format!("{}: {e}", dir.join(name).display()))
            })
        };
        let ab_sites: Sites = read_sites(open("airbox_sites.csv")?)?.into();
        let ep_sites: Sites = read_sites(open("epa_sites.csv")?)?.into();
        let (h1, ab) = read_panel(&ab_sites, open("airbox_panel.csv")?)?;
        let (h2, ep) = read_panel(&ep_sites, open("epa_panel.csv")?)?;
        if h1 != h2 {
            return Err(Error::Parse("network panels disagree on hours".into()));
        }
        let panels = h1
            .into_iter()
            .zip(ab.into_iter().zip(ep))
            .map(|(h, (a, e))| HourlyPanel::new(h, ab_sites.clone(), ep_sites.clone(), a, e))
            .collect::<Result<Vec<_>>>()?;
        Self::new(ab_sites, ep_sites, panels)
    }
}

pub fn write_sites<W: Write>(sites: &[Location], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["id", "x", "y"])?;
    for s in sites {
        wr.write_record([s.id.clone(), s.x.to_string(), s.y.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_sites<R: Read>(r: R) -> Result<Vec<Location>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (k, rec) in rd.records().enumerate() {
        let rec = rec?;
        let line = k as u64 + 2;
        if rec.len() < 3 {
            return Err(Error::Parse(format!("site line {line}: expected id,x,y")));
        }
        let id = rec[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::Parse(format!("duplicate site id '{id}'")));
        }
        out.push(Location::new(
            id,
            parse_num(&rec[1], "x", line)?,
            parse_num(&rec[2], "y", line)?,
        )?);
    }
    Ok(out)
}

pub fn write_panel<W: Write>(
    sites: &[Location],
    hours: &[i64],
    rows: &[&[Option<f64>]],
    w: W,
) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["hour".to_string()];
    header.extend(sites.iter().map(|s| s.id.clone()));
    wr.write_record(&header)?;
    for (h, row) in hours.iter().zip(rows) {
        let mut rec = Vec::with_capacity(row.len() + 1);
        rec.push(h.to_string());
        rec.extend(row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

#[allow(clippy::type_complexity)]
pub fn read_panel<R: Read>(sites: &[Location], r: R) -> Result<(Vec<i64>, Vec<Vec<Option<f64>>>)> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers()?.clone();
    if header.get(0) != Some("hour")
        || header.len() != sites.len() + 1
        || header.iter().skip(1).zip(sites).any(|(h, s)| h != s.id)
    {
        return Err(Error::Parse("panel header does not match the site registry".into()));
    }
    let (mut hours, mut rows) = (Vec::new(), Vec::new());
    for (k, rec) in rd.records().enumerate() {
        let rec = rec?;
        let line = k as u64 + 2;
        hours.push(
            rec[0]
                .parse::<i64>()
                .map_err(|_| Error::Parse(format!("panel line {line}: bad hour")))?,
        );
        let mut row = Vec::with_capacity(sites.len());
        for cell in rec.iter().skip(1) {
            row.push(if cell.is_empty() {
                None
            } else {
                Some(parse_num(cell, "value", line)?)
            });
        }
        rows.push(row);
    }
    Ok((hours, rows))
}

/// Joins both networks' hourly means into a panel series on the union of
/// hours, projecting every site with `proj`.
pub fn build_series(airbox: &NetworkHourly, epa: &NetworkHourly, proj: &Projection) -> Result<PanelSeries> {
    let project = |net: &NetworkHourly| -> Result<Sites> {
        Ok(net
            .sites
            .iter()
            .map(|(id, lon, lat)| proj.project(id.clone(), *lon, *lat))
            .collect::<Result<Vec<_>>>()?
            .into())
    };
    let ab_sites = project(airbox)?;
    let ep_sites = project(epa)?;
    let hours: std::collections::BTreeSet<i64> = airbox
        .values
        .keys()
        .chain(epa.values.keys())
        .map(|k| k.0)
        .collect();
    let mut panels = Vec::with_capacity(hours.len());
    for h in hours {
        let fill = |net: &NetworkHourly, n: usize| -> Vec<Option<f64>> {
            let mut v = vec![None; n];
            for ((_, s), x) in net.values.range((h, 0)..(h + 1, 0)) {
                v[*s] = Some(*x);
            }
            v
        };
        panels.push(HourlyPanel::new(
            h,
            ab_sites.clone(),
            ep_sites.clone(),
            fill(airbox, ab_sites.len()),
            fill(epa, ep_sites.len()),
        )?);
    }
    PanelSeries::new(ab_sites, ep_sites, panels)
}

/// Projection centred on the mean coordinate of every site in both networks.
pub fn centroid_projection(airbox: &NetworkHourly, epa: &NetworkHourly) -> Result<Projection> {
    Projection::centroid(
        airbox
            .sites
            .iter()
            .chain(&epa.sites)
            .map(|(_, lon, lat)| (*lon, *lat)),
    )
}

/// Keeps hours with at least `min_airbox` sensor and `min_epa` reference values.
pub fn filter_hours(series: &PanelSeries, min_airbox: usize, min_epa: usize) -> Result<PanelSeries> {
    let panels: Vec<HourlyPanel> = series
        .panels
        .iter()
        .filter(|p| p.airbox_present_count() >= min_airbox && p.epa_present_count() >= min_epa)
        .cloned()
        .collect();
    if panels.is_empty() {
        return Err(Error::NoHoursRetained {
            min_airbox,
            min_epa,
        });
    }
    Ok(PanelSeries {
        airbox_sites: series.airbox_sites.clone(),
        epa_sites: series.epa_sites.clone(),
        panels,
    })
}
