//! Multi-resolution radial basis for the large-scale trend.
//!
//! Level 1 is the constant function. Every further level holds compactly
//! supported Wendland functions `ψ(r) = (1 − r)³₊ (3r + 1)` centred on
//! k-means centres of the control points. Level sizes follow the schedule
//! 1, 4, 20, 80, 320, … (each level after the third is four times the
//! previous one); the last level is truncated so the total is exactly K.
//! A level's bandwidth is the median nearest-centre distance among its
//! (untruncated) centres, and the support radius is `overlap × bandwidth`.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Location;
use crate::robust::median;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasisConfig {
    pub k: usize,
    /// Support radius in units of the level bandwidth.
    pub overlap: f64,
    pub seed: u64,
    pub kmeans_iters: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            k: 25,
            overlap: 2.5,
            seed: 0xba515,
            kmeans_iters: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadialLevel {
    pub bandwidth: f64,
    pub centers: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasisSet {
    pub overlap: f64,
    /// Radial levels after the leading constant function.
    pub levels: Vec<RadialLevel>,
}

/// Level sizes (including the constant level) summing to `k`.
pub fn level_schedule(k: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut left = k;
    let mut nominal = 1usize;
    let mut level = 0;
    while left > 0 {
        let take = nominal.min(left);
        out.push(take);
        left -= take;
        level += 1;
        nominal = match level {
            1 => 4,
            2 => 20,
            _ => nominal * 4,
        };
    }
    out
}

fn nominal_size(level: usize) -> usize {
    match level {
        0 => 1,
        1 => 4,
        2 => 20,
        l => 20 * 4usize.pow((l - 2) as u32),
    }
}

/// Wendland ψ₂,₁ on [0, 1], zero beyond.
#[inline]
pub fn wendland(r: f64) -> f64 {
    if r >= 1.0 {
        0.0
    } else {
        let a = 1.0 - r;
        a * a * a * (3.0 * r + 1.0)
    }
}

impl BasisSet {
    pub fn k(&self) -> usize {
        1 + self.levels.iter().map(|l| l.centers.len()).sum::<usize>()
    }

    pub fn n_levels(&self) -> usize {
        1 + self.levels.len()
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        std::iter::once(1)
            .chain(self.levels.iter().map(|l| l.centers.len()))
            .collect()
    }

    pub fn bandwidths(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.bandwidth).collect()
    }

    /// φ(s) as a row of length K.
    pub fn row(&self, x: f64, y: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.k());
        out.push(1.0);
        for lvl in &self.levels {
            let radius = self.overlap * lvl.bandwidth;
            for &(cx, cy) in &lvl.centers {
                out.push(wendland((x - cx).hypot(y - cy) / radius));
            }
        }
        out
    }

    /// φ(s)′α at one location.
    pub fn trend_at(&self, loc: &Location, alpha: &[f64]) -> f64 {
        self.row(loc.x, loc.y).iter().zip(alpha).map(|(a, b)| a * b).sum()
    }

    pub fn evaluate(&self, sites: &[Location]) -> DMatrix<f64> {
        let k = self.k();
        let mut m = DMatrix::zeros(sites.len(), k);
        for (i, s) in sites.iter().enumerate() {
            for (j, v) in self.row(s.x, s.y).into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Plain-text form: header, then one block per radial level.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "airfuse-basis 1");
        let _ = writeln!(s, "k {}", self.k());
        let _ = writeln!(s, "overlap {}", self.overlap);
        for lvl in &self.levels {
            let _ = writeln!(s, "level {} {}", lvl.centers.len(), lvl.bandwidth);
            for (x, y) in &lvl.centers {
                let _ = writeln!(s, "{x} {y}");
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Parse(format!("basis file: {m}"));
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        if lines.next() != Some("airfuse-basis 1") {
            return Err(bad("missing header"));
        }
        let num = |line: Option<&str>, key: &str| -> Result<String> {
            let line = line.ok_or_else(|| bad(&format!("missing {key}")))?;
            let mut it = line.split_whitespace();
            if it.next() != Some(key) {
                return Err(bad(&format!("expected {key}")));
            }
            Ok(it.collect::<Vec<_>>().join(" "))
        };
        let k: usize = num(lines.next(), "k")?.parse().map_err(|_| bad("bad k"))?;
        let overlap: f64 = num(lines.next(), "overlap")?
            .parse()
            .map_err(|_| bad("bad overlap"))?;
        let mut levels = Vec::new();
        while let Some(line) = lines.next() {
            let rest = num(Some(line), "level")?;
            let mut it = rest.split_whitespace();
            let count: usize = it
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad("bad level count"))?;
            let bandwidth: f64 = it
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad("bad bandwidth"))?;
            let mut centers = Vec::with_capacity(count);
            for _ in 0..count {
                let l = lines.next().ok_or_else(|| bad("truncated centres"))?;
                let mut p = l.split_whitespace().map(str::parse::<f64>);
                match (p.next(), p.next()) {
                    (Some(Ok(x)), Some(Ok(y))) => centers.push((x, y)),
                    _ => return Err(bad("bad centre line")),
                }
            }
            levels.push(RadialLevel { bandwidth, centers });
        }
        let b = BasisSet { overlap, levels };
        if b.k() != k {
            return Err(bad("K does not match centre count"));
        }
        Ok(b)
    }
}

/// Builds the K-function basis from control points (typically every sensor site).
pub fn build_basis(control_points: &[Location], cfg: &BasisConfig) -> Result<BasisSet> {
    if cfg.k == 0 {
        return Err(Error::InvalidInput("K must be at least 1".into()));
    }
    if !(cfg.overlap > 0.0) {
        return Err(Error::InvalidInput("basis overlap must be positive".into()));
    }
    let mut pts: Vec<(f64, f64)> = control_points.iter().map(|l| (l.x, l.y)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if cfg.k > pts.len() {
        return Err(Error::InvalidInput(format!(
            "K = {} exceeds the {} distinct control points",
            cfg.k,
            pts.len()
        )));
    }

    let schedule = level_schedule(cfg.k);
    let mut levels = Vec::new();
    let mut prev_bw = f64::INFINITY;
    for (l, &size) in schedule.iter().enumerate().skip(1) {
        let clusters = nominal_size(l).min(pts.len()).max(size);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (l as u64).wrapping_mul(0x9e37_79b9));
        let (centers, counts) = kmeans(&pts, clusters, cfg.kmeans_iters, &mut rng);
        let mut bw = bandwidth_of(&centers, &pts)?;
        if !(bw < prev_bw) || !(bw > 0.0) {
            bw = if prev_bw.is_finite() { 0.5 * prev_bw } else { 1.0 };
        }
        prev_bw = bw;
        let mut order: Vec<usize> = (0..centers.len()).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        order.truncate(size);
        order.sort_unstable();
        levels.push(RadialLevel {
            bandwidth: bw,
            centers: order.into_iter().map(|i| centers[i]).collect(),
        });
    }
    Ok(BasisSet {
        overlap: cfg.overlap,
        levels,
    })
}

fn bandwidth_of(centers: &[(f64, f64)], pts: &[(f64, f64)]) -> Result<f64> {
    if centers.len() == 1 {
        let c = centers[0];
        let d: Vec<f64> = pts.iter().map(|p| (p.0 - c.0).hypot(p.1 - c.1)).collect();
        return median(&d);
    }
    let nn: Vec<f64> = centers
        .iter()
        .enumerate()
        .map(|(i, a)| {
            centers
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| (a.0 - b.0).hypot(a.1 - b.1))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    median(&nn)
}

fn sq(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    dx * dx + dy * dy
}

/// Lloyd's k-means with k-means++ seeding. Returns centres and cluster sizes.
fn kmeans(
    pts: &[(f64, f64)],
    k: usize,
    max_iter: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<(f64, f64)>, Vec<usize>) {
    let n = pts.len();
    let mut centers = Vec::with_capacity(k);
    centers.push(pts[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = pts.iter().map(|p| sq(*p, centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.push(pts[pick]);
        for (d, p) in d2.iter_mut().zip(pts) {
            *d = d.min(sq(*p, pts[pick]));
        }
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, p) in pts.iter().enumerate() {
            let best = nearest(&centers, *p);
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (p, &a) in pts.iter().zip(&assign) {
            sums[a].0 += p.0;
            sums[a].1 += p.1;
            sums[a].2 += 1;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s.2 > 0 {
                *c = (s.0 / s.2 as f64, s.1 / s.2 as f64);
            }
        }
        // reseed empty clusters at the point farthest from its centre
        for j in 0..k {
            if sums[j].2 == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq(pts[a], centers[assign[a]])
                            .total_cmp(&sq(pts[b], centers[assign[b]]))
                            .then(b.cmp(&a))
                    })
                    .unwrap_or(0);
                centers[j] = pts[far];
                assign[far] = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut counts = vec![0usize; k];
    for (i, p) in pts.iter().enumerate() {
        let a = nearest(&centers, *p);
        assign[i] = a;
        counts[a] += 1;
    }
    (centers, counts)
}

fn nearest(centers: &[(f64, f64)], p: (f64, f64)) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (j, c) in centers.iter().enumerate() {
        let d = sq(p, *c);
        if d < bd {
            bd = d;
            best = j;
        }
    }
    best
}
