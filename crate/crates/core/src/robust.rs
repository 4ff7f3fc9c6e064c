//! Robust statistical primitives: MAD, trimmed mean, Huber regression by
//! IRLS and a bivariate FastMCD scatter estimator.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dependent_columns, weighted_least_squares};

/// Φ⁻¹(0.75), the standard-normal upper quartile.
pub const NORMAL_Q75: f64 = 0.674_489_750_196_081_7;

/// Median with the average-of-two-middles convention for even lengths.
pub fn median(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::InvalidInput("median of empty slice".into()));
    }
    let mut v = x.to_vec();
    Ok(median_in_place(&mut v))
}

pub(crate) fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (lo, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *m;
    if n % 2 == 1 {
        upper
    } else {
        let lower = lo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Median absolute deviation, scaled to estimate a Gaussian standard deviation.
pub fn mad(x: &[f64]) -> Result<f64> {
    let med = median(x)?;
    let mut dev: Vec<f64> = x.iter().map(|v| (v - med).abs()).collect();
    Ok(median_in_place(&mut dev) / NORMAL_Q75)
}

/// Mean after dropping `floor(frac * n)` values from each tail.
pub fn trimmed_mean(x: &[f64], frac: f64) -> Result<f64> {
    if !(0.0..0.5).contains(&frac) {
        return Err(Error::InvalidInput(format!(
            "trim fraction {frac} outside [0, 0.5)"
        )));
    }
    let n = x.len();
    let k = (frac * n as f64).floor() as usize;
    if n == 0 || 2 * k >= n {
        return Err(Error::InvalidInput("nothing left after trimming".into()));
    }
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let kept = &v[k..n - k];
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// How the residual scale is handled across IRLS iterations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// MAD of the current residuals, recomputed every iteration.
    Iterated,
    /// MAD of the initial least-squares residuals, held fixed.
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HuberConfig {
    pub c: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub scale_mode: ScaleMode,
}

impl Default for HuberConfig {
    fn default() -> Self {
        Self {
            c: 1.345,
            max_iter: 50,
            tol: 1e-8,
            scale_mode: ScaleMode::Iterated,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HuberFit {
    pub coef: Vec<f64>,
    pub scale: f64,
    pub residuals: Vec<f64>,
    pub weights: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Σρ(r/σ) at each iterate, starting with the least-squares start.
    pub objective_trace: Vec<f64>,
}

/// Huber's ρ.
#[inline]
pub fn huber_rho(u: f64, c: f64) -> f64 {
    let a = u.abs();
    if a <= c {
        0.5 * u * u
    } else {
        c * a - 0.5 * c * c
    }
}

fn huber_objective(res: &[f64], scale: f64, c: f64) -> f64 {
    if scale <= 0.0 {
        return 0.0;
    }
    res.iter().map(|r| huber_rho(r / scale, c)).sum()
}

fn residuals(x: &DMatrix<f64>, z: &[f64], coef: &[f64]) -> Vec<f64> {
    let (n, q) = x.shape();
    (0..n)
        .map(|i| {
            let mut fit = 0.0;
            for j in 0..q {
                fit += x[(i, j)] * coef[j];
            }
            z[i] - fit
        })
        .collect()
}

/// Huber M-regression of `z` on the columns of `x` by iteratively
/// reweighted least squares, started from ordinary least squares.
pub fn huber_regress(x: &DMatrix<f64>, z: &[f64], cfg: &HuberConfig) -> Result<HuberFit> {
    let (n, q) = x.shape();
    if z.len() != n {
        return Err(Error::InvalidInput(format!(
            "design has {n} rows but response has {}",
            z.len()
        )));
    }
    if n <= q {
        return Err(Error::InvalidInput(format!(
            "need more observations ({n}) than coefficients ({q})"
        )));
    }
    if !(cfg.c > 0.0) {
        return Err(Error::InvalidInput(format!("Huber constant {} must be > 0", cfg.c)));
    }
    if z.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite regression input".into()));
    }
    let bad = dependent_columns(x);
    if !bad.is_empty() {
        return Err(Error::RankDeficient(bad));
    }

    let mut coef = weighted_least_squares(x, z, None)?;
    let mut res = residuals(x, z, &coef);
    let mut scale = mad(&res)?;
    let fixed_scale = scale;
    // scale below this is an exact fit of at least half the rows
    let tiny = 1e-13 * z.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut trace = vec![huber_objective(&res, scale, cfg.c)];
    let mut weights = vec![1.0; n];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..cfg.max_iter {
        if scale <= tiny {
            converged = true;
            break;
        }
        iterations += 1;
        let cut = cfg.c * scale;
        for (w, r) in weights.iter_mut().zip(&res) {
            let a = r.abs();
            *w = if a <= cut { 1.0 } else { cut / a };
        }
        let next = weighted_least_squares(x, z, Some(&weights))?;
        let diff = next
            .iter()
            .zip(&coef)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm = coef.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        coef = next;
        res = residuals(x, z, &coef);
        scale = match cfg.scale_mode {
            ScaleMode::Iterated => mad(&res)?,
            ScaleMode::Fixed => fixed_scale,
        };
        trace.push(huber_objective(&res, scale, cfg.c));
        if diff / norm < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("Huber IRLS stopped after {iterations} iterations without converging");
    }

    Ok(HuberFit {
        coef,
        scale,
        residuals: res,
        weights,
        iterations,
        converged,
        objective_trace: trace,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McdConfig {
    pub h_frac: f64,
    pub n_trials: usize,
    /// Relative determinant change that ends the C-step iteration.
    pub tol: f64,
    pub max_csteps: usize,
    pub seed: u64,
    /// One-step reweighting of the raw estimate (points inside the 97.5%
    /// tolerance ellipse), skipped when the subset covers every point.
    pub reweight: bool,
}

impl Default for McdConfig {
    fn default() -> Self {
        Self {
            h_frac: 0.75,
            n_trials: 500,
            tol: 1e-9,
            max_csteps: 100,
            seed: 0x5eed_4d43_4400_0001,
            reweight: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McdResult {
    /// Consistency-corrected scatter, row-major 2×2.
    pub cov: [[f64; 2]; 2],
    pub location: [f64; 2],
    /// Indices of the h points with minimal covariance determinant.
    pub support: Vec<usize>,
    /// Multiplier applied to the final (raw or reweighted) moment estimate.
    pub consistency: f64,
    /// The optimal h-subset is degenerate (points on a line).
    pub singular: bool,
}

impl McdResult {
    /// The robust covariance between the two coordinates.
    pub fn cross(&self) -> f64 {
        self.cov[0][1]
    }
}

#[derive(Clone, Copy, Debug)]
struct Moments {
    mean: [f64; 2],
    cov: [f64; 3], // xx, xy, yy
}

impl Moments {
    fn of(xs: &[f64], ys: &[f64], idx: &[usize]) -> Self {
        let k = idx.len() as f64;
        let (mut mx, mut my) = (0.0, 0.0);
        for &i in idx {
            mx += xs[i];
            my += ys[i];
        }
        mx /= k;
        my /= k;
        let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
        for &i in idx {
            let dx = xs[i] - mx;
            let dy = ys[i] - my;
            sxx += dx * dx;
            sxy += dx * dy;
            syy += dy * dy;
        }
        Moments {
            mean: [mx, my],
            cov: [sxx / k, sxy / k, syy / k],
        }
    }

    fn det(&self) -> f64 {
        self.cov[0] * self.cov[2] - self.cov[1] * self.cov[1]
    }

    fn is_singular(&self) -> bool {
        let scale = (self.cov[0] * self.cov[2]).max(0.0);
        self.det() <= 1e-12 * scale || scale == 0.0
    }
}

/// Consistency factor for the raw MCD scatter in two dimensions with
/// coverage `alpha`: `alpha / P(χ²₄ ≤ χ²₂,α)`, in closed form.
pub fn mcd_consistency_2d(alpha: f64) -> f64 {
    if alpha >= 1.0 {
        return 1.0;
    }
    let tail = 1.0 - alpha;
    alpha / (alpha + tail * tail.ln())
}

/// FastMCD for bivariate data.
pub fn fast_mcd_2d(pairs: &[(f64, f64)], cfg: &McdConfig) -> Result<McdResult> {
    let n = pairs.len();
    if n < 10 {
        return Err(Error::InvalidInput(format!("FastMCD needs ≥ 10 pairs, got {n}")));
    }
    if !(0.5..=1.0).contains(&cfg.h_frac) {
        return Err(Error::InvalidInput(format!(
            "h_frac {} outside [0.5, 1]",
            cfg.h_frac
        )));
    }
    if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(Error::InvalidInput("non-finite pair".into()));
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let h = ((cfg.h_frac * n as f64).ceil() as usize).clamp((n + 3) / 2, n);
    let consistency = mcd_consistency_2d(h as f64 / n as f64);

    if h == n {
        let all: Vec<usize> = (0..n).collect();
        let m = Moments::of(&xs, &ys, &all);
        return Ok(finish(m, all, consistency));
    }

    let trials: Vec<(f64, usize, Moments, Vec<usize>)> = (0..cfg.n_trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(t as u64);
            let (m, sup) = initial_subset(&xs, &ys, h, &mut rng);
            let (m, sup) = csteps(&xs, &ys, h, m, sup, 2, 0.0);
            (m.det(), t, m, sup)
        })
        .collect();

    let mut order: Vec<usize> = (0..trials.len()).collect();
    order.sort_by(|&a, &b| {
        trials[a]
            .0
            .total_cmp(&trials[b].0)
            .then(trials[a].1.cmp(&trials[b].1))
    });
    let best = order
        .iter()
        .take(10)
        .map(|&k| {
            let (_, t, m, sup) = &trials[k];
            let (m, sup) = csteps(&xs, &ys, h, *m, sup.clone(), cfg.max_csteps, cfg.tol);
            (m.det(), *t, m, sup)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .expect("at least one trial");
    let (_, _, m, sup) = best;
    if !cfg.reweight || m.is_singular() {
        return Ok(finish(m, sup, consistency));
    }
    let raw = Moments {
        mean: m.mean,
        cov: [consistency * m.cov[0], consistency * m.cov[1], consistency * m.cov[2]],
    };
    let kept = within_ellipse(&xs, &ys, &raw, CHI2_2_975);
    let rw = Moments::of(&xs, &ys, &kept);
    if rw.is_singular() {
        return Ok(finish(m, sup, consistency));
    }
    let mut out = finish(rw, sup, mcd_consistency_2d(0.975));
    out.singular = false;
    Ok(out)
}

/// χ²₂ quantile at 0.975.
const CHI2_2_975: f64 = 7.377_758_908_227_871;

fn within_ellipse(xs: &[f64], ys: &[f64], m: &Moments, cutoff: f64) -> Vec<usize> {
    let det = m.det();
    let (a, b, c) = (m.cov[2] / det, -m.cov[1] / det, m.cov[0] / det);
    (0..xs.len())
        .filter(|&i| {
            let dx = xs[i] - m.mean[0];
            let dy = ys[i] - m.mean[1];
            a * dx * dx + 2.0 * b * dx * dy + c * dy * dy <= cutoff
        })
        .collect()
}

fn finish(m: Moments, mut support: Vec<usize>, consistency: f64) -> McdResult {
    support.sort_unstable();
    let c = consistency;
    McdResult {
        cov: [[c * m.cov[0], c * m.cov[1]], [c * m.cov[1], c * m.cov[2]]],
        location: m.mean,
        support,
        consistency,
        singular: m.is_singular(),
    }
}

/// Random (p+1)-subset, grown until non-singular, then expanded to the h
/// closest points.
fn initial_subset(xs: &[f64], ys: &[f64], h: usize, rng: &mut ChaCha8Rng) -> (Moments, Vec<usize>) {
    let n = xs.len();
    let perm = index::sample(rng, n, n.min(h));
    let mut idx: Vec<usize> = perm.iter().take(3).collect();
    let mut m = Moments::of(xs, ys, &idx);
    let mut next = 3;
    while m.is_singular() && next < perm.len() {
        idx.push(perm.index(next));
        next += 1;
        m = Moments::of(xs, ys, &idx);
    }
    if m.is_singular() {
        // h points on a line: keep them as the (singular) optimum candidate
        let sup: Vec<usize> = perm.iter().collect();
        let m = Moments::of(xs, ys, &sup);
        return (m, sup);
    }
    let sup = closest(xs, ys, &m, h);
    (Moments::of(xs, ys, &sup), sup)
}

fn closest(xs: &[f64], ys: &[f64], m: &Moments, h: usize) -> Vec<usize> {
    let det = m.det();
    let (a, b, c) = (m.cov[2] / det, -m.cov[1] / det, m.cov[0] / det);
    let mut d: Vec<(f64, usize)> = xs
        .iter()
        .zip(ys)
        .enumerate()
        .map(|(i, (x, y))| {
            let dx = x - m.mean[0];
            let dy = y - m.mean[1];
            (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy, i)
        })
        .collect();
    d.select_nth_unstable_by(h - 1, |p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)));
    d.truncate(h);
    d.into_iter().map(|(_, i)| i).collect()
}

fn csteps(
    xs: &[f64],
    ys: &[f64],
    h: usize,
    mut m: Moments,
    mut sup: Vec<usize>,
    max_steps: usize,
    tol: f64,
) -> (Moments, Vec<usize>) {
    for _ in 0..max_steps {
        if m.is_singular() {
            break;
        }
        let cand = closest(xs, ys, &m, h);
        let next = Moments::of(xs, ys, &cand);
        let (d0, d1) = (m.det(), next.det());
        if d1 > d0 {
            break;
        }
        m = next;
        sup = cand;
        if d0 - d1 <= tol * d0 {
            break;
        }
    }
    (m, sup)
}

/// Sample covariance with divisor `n` (test and diagnostic helper).
pub fn classical_cov_2d(pairs: &[(f64, f64)]) -> [[f64; 2]; 2] {
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut s = [0.0; 3];
    for (x, y) in pairs {
        s[0] += (x - mx) * (x - mx);
        s[1] += (x - mx) * (y - my);
        s[2] += (y - my) * (y - my);
    }
    [[s[0] / n, s[1] / n], [s[1] / n, s[2] / n]]
}
