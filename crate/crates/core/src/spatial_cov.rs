//! Isotropic exponential covariance: evaluation, robust binned estimation,
//! least-squares and maximum-likelihood fitting, and ordinary kriging.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{pairwise_distances, DistanceMatrix, Location};
use crate::linalg::{backward_solve, cholesky_with_jitter, dot, forward_solve};
use crate::optim::{golden_section, nelder_mead};
use crate::robust::{fast_mcd_2d, McdConfig};

/// Lower/upper ends of the range search in km.
pub const LAMBDA_MIN: f64 = 0.1;
pub const LAMBDA_MAX: f64 = 500.0;
/// Sill reported when the binned covariances carry no positive signal.
pub const V2_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpCov {
    pub v2: f64,
    pub lambda: f64,
}

impl ExpCov {
    pub fn new(v2: f64, lambda: f64) -> Result<Self> {
        if !(v2 > 0.0 && v2.is_finite() && lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "exponential covariance needs v2 > 0 and lambda > 0, got ({v2}, {lambda})"
            )));
        }
        Ok(Self { v2, lambda })
    }

    #[inline]
    pub fn at(&self, d: f64) -> f64 {
        self.v2 * (-d / self.lambda).exp()
    }
}

pub fn exp_cov(params: &ExpCov, d: &DistanceMatrix) -> DMatrix<f64> {
    d.as_matrix().map(|h| params.at(h))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub h: f64,
    pub tau: f64,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct BinnedCov {
    pub bins: Vec<Bin>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinConfig {
    /// Bin centres in km.
    pub centers: Vec<f64>,
    /// Half-width: a pair at distance d belongs to bin h when h − Δ < d ≤ h + Δ.
    pub delta: f64,
    pub min_pairs: usize,
    pub mcd: McdConfig,
}

impl Default for BinConfig {
    fn default() -> Self {
        Self {
            centers: (1..=49).map(|k| k as f64 / 2.0).collect(),
            delta: 0.5,
            min_pairs: 30,
            mcd: McdConfig::default(),
        }
    }
}

/// Robust covariance of residual pairs per distance bin, from FastMCD.
pub fn robust_binned_cov(
    residuals: &[f64],
    sites: &[Location],
    cfg: &BinConfig,
) -> Result<BinnedCov> {
    if residuals.len() != sites.len() {
        return Err(Error::InvalidInput(format!(
            "{} residuals for {} sites",
            residuals.len(),
            sites.len()
        )));
    }
    if cfg.centers.windows(2).any(|w| !(w[0] < w[1])) || !(cfg.delta > 0.0) {
        return Err(Error::InvalidInput(
            "bin centres must be strictly increasing and delta positive".into(),
        ));
    }
    let lo = cfg.centers.first().copied().unwrap_or(0.0) - cfg.delta;
    let hi = cfg.centers.last().copied().unwrap_or(0.0) + cfg.delta;
    let mut members: Vec<Vec<(f64, f64)>> = vec![Vec::new(); cfg.centers.len()];
    let n = sites.len();
    for i in 0..n {
        for k in i + 1..n {
            let d = sites[i].distance(&sites[k]);
            if d <= lo || d > hi {
                continue;
            }
            let pair = (residuals[i], residuals[k]);
            // first centre with h + Δ ≥ d, then every following centre with h − Δ < d
            let start = cfg.centers.partition_point(|&h| h + cfg.delta < d);
            for (b, &h) in cfg.centers.iter().enumerate().skip(start) {
                if h - cfg.delta >= d {
                    break;
                }
                members[b].push(pair);
            }
        }
    }
    let min_pairs = cfg.min_pairs.max(10);
    let fits: Vec<Option<Result<Bin>>> = members
        .par_iter()
        .zip(cfg.centers.par_iter())
        .map(|(pairs, &h)| {
            if pairs.len() < min_pairs {
                return None;
            }
            Some(fast_mcd_2d(pairs, &cfg.mcd).map(|r| Bin {
                h,
                tau: r.cross(),
                pairs: pairs.len(),
            }))
        })
        .collect();
    let mut bins = Vec::new();
    for f in fits.into_iter().flatten() {
        bins.push(f?);
    }
    if bins.is_empty() {
        return Err(Error::InsufficientBins {
            min_pairs: cfg.min_pairs,
        });
    }
    Ok(BinnedCov { bins })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinWeighting {
    #[default]
    Unweighted,
    PairCount,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WlsFit {
    pub cov: ExpCov,
    pub sse: f64,
    /// No positive covariance signal, or the range ran into a bracket end.
    pub degenerate: bool,
}

fn bin_weights(binned: &BinnedCov, weighting: BinWeighting) -> Vec<f64> {
    match weighting {
        BinWeighting::Unweighted => vec![1.0; binned.bins.len()],
        BinWeighting::PairCount => binned.bins.iter().map(|b| b.pairs as f64).collect(),
    }
}

/// Closed-form sill for a given range, and the resulting weighted SSE.
pub fn profile_sill(binned: &BinnedCov, w: &[f64], lambda: f64) -> (f64, f64) {
    profile_sill_capped(binned, w, lambda, f64::INFINITY)
}

/// As [`profile_sill`] with the sill restricted to `[0, cap]`.
pub fn profile_sill_capped(binned: &BinnedCov, w: &[f64], lambda: f64, cap: f64) -> (f64, f64) {
    let (mut num, mut den) = (0.0, 0.0);
    for (b, wi) in binned.bins.iter().zip(w) {
        let e = (-b.h / lambda).exp();
        num += wi * b.tau * e;
        den += wi * e * e;
    }
    let v2 = if den > 0.0 { (num / den).clamp(0.0, cap) } else { 0.0 };
    (v2, wls_objective(binned, w, v2, lambda))
}

pub fn wls_objective(binned: &BinnedCov, w: &[f64], v2: f64, lambda: f64) -> f64 {
    binned
        .bins
        .iter()
        .zip(w)
        .map(|(b, wi)| {
            let r = b.tau - v2 * (-b.h / lambda).exp();
            wi * r * r
        })
        .sum()
}

/// Least-squares fit of `v² exp(−h/λ)` to binned covariances.
pub fn fit_expcov_wls(binned: &BinnedCov, weighting: BinWeighting) -> Result<WlsFit> {
    fit_expcov_wls_capped(binned, weighting, f64::INFINITY)
}

/// As [`fit_expcov_wls`] with `v² ≤ cap`. A fit whose sill ends on the cap
/// is flagged degenerate.
pub fn fit_expcov_wls_capped(binned: &BinnedCov, weighting: BinWeighting, cap: f64) -> Result<WlsFit> {
    if !(cap > 0.0) {
        return Err(Error::InvalidInput(format!("sill cap must be positive, got {cap}")));
    }
    if binned.bins.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "covariance fit needs ≥ 3 bins, got {}",
            binned.bins.len()
        )));
    }
    let w = bin_weights(binned, weighting);
    if binned.bins.iter().all(|b| b.tau <= 0.0) {
        let lambda = (LAMBDA_MIN * LAMBDA_MAX).sqrt();
        return Ok(WlsFit {
            cov: ExpCov { v2: V2_FLOOR, lambda },
            sse: wls_objective(binned, &w, V2_FLOOR, lambda),
            degenerate: true,
        });
    }
    let (a, b) = (LAMBDA_MIN.ln(), LAMBDA_MAX.ln());
    let grid: usize = 200;
    let step = (b - a) / (grid - 1) as f64;
    let sse_at = |t: f64| profile_sill_capped(binned, &w, t.exp(), cap).1;
    let mut best = 0;
    let mut best_sse = f64::INFINITY;
    for g in 0..grid {
        let s = sse_at(a + g as f64 * step);
        if s < best_sse {
            best_sse = s;
            best = g;
        }
    }
    let lo = a + best.saturating_sub(1) as f64 * step;
    let hi = a + (best + 1).min(grid - 1) as f64 * step;
    let (t, s) = golden_section(sse_at, lo, hi, 1e-12);
    let (t, _) = if s <= best_sse {
        (t, s)
    } else {
        (a + best as f64 * step, best_sse)
    };
    let lambda = t.exp();
    let (v2, sse) = profile_sill_capped(binned, &w, lambda, cap);
    let at_edge = best == 0 || best == grid - 1 || v2 >= cap;
    Ok(WlsFit {
        cov: ExpCov {
            v2: v2.max(V2_FLOOR),
            lambda,
        },
        sse,
        degenerate: at_edge || v2 <= V2_FLOOR,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for MlConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlFit {
    pub cov: ExpCov,
    /// Constant mean (0 when not estimated).
    pub mean: f64,
    /// Per-site nugget variance used in the final fit.
    pub nugget: f64,
    pub loglik: f64,
    /// Sill pushed to its lower limit (pure-noise data).
    pub degenerate: bool,
    /// Best value and optimum reached from each start.
    pub starts: Vec<(f64, ExpCov)>,
}

struct LikTerms {
    loglik: f64,
    mean: f64,
    quad: f64,
    logdet: f64,
}

/// Gaussian log-likelihood with covariance `base` (already assembled),
/// constant mean profiled by GLS when requested.
fn gaussian_loglik(base: DMatrix<f64>, z: &[f64], estimate_mean: bool) -> Option<LikTerms> {
    let n = z.len();
    let (chol, _) = cholesky_with_jitter(base).ok()?;
    let l = chol.l();
    let wz = forward_solve(&l, z);
    let (mean, quad) = if estimate_mean {
        let w1 = forward_solve(&l, &vec![1.0; n]);
        let a = dot(&w1, &w1);
        let mu = dot(&w1, &wz) / a;
        let q: f64 = wz.iter().zip(&w1).map(|(x, o)| (x - mu * o).powi(2)).sum();
        (mu, q)
    } else {
        (0.0, dot(&wz, &wz))
    };
    let logdet = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
    let loglik = -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad);
    loglik.is_finite().then_some(LikTerms {
        loglik,
        mean,
        quad,
        logdet,
    })
}

fn sample_var(z: &[f64]) -> f64 {
    let n = z.len() as f64;
    let m = z.iter().sum::<f64>() / n;
    z.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)
}

fn max_distance(d: &DistanceMatrix) -> f64 {
    d.as_matrix().iter().copied().fold(0.0, f64::max)
}

/// Log-likelihood of `z` under `cov` plus a known per-site nugget.
pub fn expcov_loglik(
    z: &[f64],
    sites: &[Location],
    nugget: &[f64],
    cov: &ExpCov,
    estimate_mean: bool,
) -> Result<f64> {
    let d = pairwise_distances(sites, sites);
    let mut s = exp_cov(cov, &d);
    for (i, g) in nugget.iter().enumerate() {
        s[(i, i)] += g;
    }
    gaussian_loglik(s, z, estimate_mean)
        .map(|t| t.loglik)
        .ok_or_else(|| Error::Likelihood("covariance not positive definite".into()))
}

/// Maximum likelihood for (v², λ) with a known heteroscedastic nugget.
pub fn fit_expcov_ml(
    z: &[f64],
    sites: &[Location],
    nugget: &[f64],
    estimate_mean: bool,
    cfg: &MlConfig,
) -> Result<MlFit> {
    let n = z.len();
    if n < 5 || sites.len() != n || nugget.len() != n {
        return Err(Error::InvalidInput(format!(
            "ML fit needs ≥ 5 aligned observations (z {}, sites {}, nugget {})",
            n,
            sites.len(),
            nugget.len()
        )));
    }
    if nugget.iter().any(|g| !(*g >= 0.0) || !g.is_finite()) || z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("nugget must be finite and ≥ 0; z finite".into()));
    }
    let d = pairwise_distances(sites, sites);
    let dmax = max_distance(&d).max(1e-6);
    let var = sample_var(z).max(1e-12);
    let mean_nug = nugget.iter().sum::<f64>() / n as f64;
    let v_lo = (var * 1e-9).ln();
    let v_hi = (var * 1e4 + mean_nug * 10.0).ln();
    let l_lo = (dmax * 1e-4).ln();
    let l_hi = (dmax * 1e3).ln();
    let objective = |p: &[f64]| -> f64 {
        if p[0] < v_lo || p[0] > v_hi || p[1] < l_lo || p[1] > l_hi {
            return f64::INFINITY;
        }
        let cov = ExpCov {
            v2: p[0].exp(),
            lambda: p[1].exp(),
        };
        let mut s = exp_cov(&cov, &d);
        for (i, g) in nugget.iter().enumerate() {
            s[(i, i)] += g;
        }
        gaussian_loglik(s, z, estimate_mean).map_or(f64::INFINITY, |t| -t.loglik)
    };
    let v0 = (var - mean_nug).max(0.1 * var);
    let starts = [
        (v0, dmax / 10.0),
        (v0 * 0.3, dmax / 30.0),
        (v0 * 3.0, dmax / 3.0),
        (v0 * 0.3, dmax),
        (v0 * 3.0, dmax / 100.0),
    ];
    let results: Vec<_> = starts
        .par_iter()
        .map(|&(v, l)| nelder_mead(objective, &[v.ln(), l.ln()], 0.7, cfg.tol, cfg.max_iter))
        .collect();
    let best = results
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.value.total_cmp(&b.1.value).then(a.0.cmp(&b.0)))
        .map(|(_, r)| r.clone())
        .unwrap();
    if !best.value.is_finite() {
        return Err(Error::Likelihood(
            "likelihood not finite at any start".into(),
        ));
    }
    let cov = ExpCov {
        v2: best.x[0].exp(),
        lambda: best.x[1].exp(),
    };
    let mut s = exp_cov(&cov, &d);
    for (i, g) in nugget.iter().enumerate() {
        s[(i, i)] += g;
    }
    let terms = gaussian_loglik(s, z, estimate_mean)
        .ok_or_else(|| Error::Likelihood("covariance not positive definite at optimum".into()))?;
    let degenerate = best.x[0] <= v_lo + 1.0 || cov.v2 < 1e-6 * mean_nug.max(var * 1e-3);
    Ok(MlFit {
        cov,
        mean: terms.mean,
        nugget: mean_nug,
        loglik: terms.loglik,
        degenerate,
        starts: results
            .iter()
            .map(|r| {
                (
                    -r.value,
                    ExpCov {
                        v2: r.x[0].exp(),
                        lambda: r.x[1].exp(),
                    },
                )
            })
            .collect(),
    })
}

/// Maximum likelihood with a single unknown nugget: covariance
/// `v² (R(λ) + ν I)`, with v² and the constant mean profiled out.
pub fn fit_expcov_ml_nugget(z: &[f64], sites: &[Location], cfg: &MlConfig) -> Result<MlFit> {
    let n = z.len();
    if n < 5 || sites.len() != n {
        return Err(Error::InvalidInput(format!(
            "ML fit needs ≥ 5 aligned observations, got {n}"
        )));
    }
    let d = pairwise_distances(sites, sites);
    let dmax = max_distance(&d).max(1e-6);
    let nf = n as f64;
    let (l_lo, l_hi) = ((dmax * 1e-4).ln(), (dmax * 1e3).ln());
    let (n_lo, n_hi) = (1e-8f64.ln(), 1e4f64.ln());
    let profiled = |p: &[f64]| -> Option<(f64, f64, f64)> {
        let lambda = p[0].exp();
        let nu = p[1].exp();
        let mut r = d.as_matrix().map(|h| (-h / lambda).exp());
        for i in 0..n {
            r[(i, i)] += nu;
        }
        let t = gaussian_loglik(r, z, true)?;
        let v2 = t.quad / nf;
        if !(v2 > 0.0) {
            return None;
        }
        let ll = -0.5 * (nf * (2.0 * std::f64::consts::PI).ln() + nf * v2.ln() + t.logdet + nf);
        Some((ll, v2, t.mean))
    };
    let objective = |p: &[f64]| -> f64 {
        if p[0] < l_lo || p[0] > l_hi || p[1] < n_lo || p[1] > n_hi {
            return f64::INFINITY;
        }
        profiled(p).map_or(f64::INFINITY, |t| -t.0)
    };
    let starts = [
        (dmax / 10.0, 0.1),
        (dmax / 30.0, 1.0),
        (dmax / 3.0, 0.01),
        (dmax, 0.3),
        (dmax / 100.0, 0.03),
    ];
    let results: Vec<_> = starts
        .par_iter()
        .map(|&(l, nu): &(f64, f64)| nelder_mead(objective, &[l.ln(), nu.ln()], 0.7, cfg.tol, cfg.max_iter))
        .collect();
    let best = results
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.value.total_cmp(&b.1.value).then(a.0.cmp(&b.0)))
        .map(|(_, r)| r.clone())
        .unwrap();
    let (ll, v2, mean) = profiled(&best.x)
        .ok_or_else(|| Error::Likelihood("likelihood not finite at any start".into()))?;
    let nu = best.x[1].exp();
    Ok(MlFit {
        cov: ExpCov {
            v2,
            lambda: best.x[0].exp(),
        },
        mean,
        nugget: nu * v2,
        loglik: ll,
        degenerate: nu > 1e3,
        starts: results
            .iter()
            .map(|r| {
                let v = profiled(&r.x).map_or(f64::NAN, |t| t.1);
                (
                    -r.value,
                    ExpCov {
                        v2: v,
                        lambda: r.x[0].exp(),
                    },
                )
            })
            .collect(),
    })
}

/// Ordinary kriging (unknown constant mean) of the noise-free process at
/// `targets`, from data `z` with per-site nugget variances.
/// Returns (prediction, mean-squared prediction error) per target.
pub fn ordinary_krige(
    z: &[f64],
    sites: &[Location],
    nugget: &[f64],
    cov: &ExpCov,
    targets: &[Location],
) -> Result<Vec<(f64, f64)>> {
    let n = z.len();
    if n == 0 || sites.len() != n || nugget.len() != n {
        return Err(Error::InvalidInput("kriging needs aligned, nonempty data".into()));
    }
    let d = pairwise_distances(sites, sites);
    let mut s = exp_cov(cov, &d);
    for (i, g) in nugget.iter().enumerate() {
        s[(i, i)] += g;
    }
    let (chol, _) = cholesky_with_jitter(s)?;
    let l = chol.l();
    let solve = |b: &[f64]| backward_solve(&l, &forward_solve(&l, b));
    let one_si = solve(&vec![1.0; n]);
    let a = one_si.iter().sum::<f64>();
    let z_si = solve(z);
    let mu = z_si.iter().sum::<f64>() / a;
    let resid: Vec<f64> = z.iter().map(|v| v - mu).collect();
    let u = solve(&resid);
    Ok(targets
        .par_iter()
        .map(|t| {
            let c: Vec<f64> = sites.iter().map(|s| cov.at(s.distance(t))).collect();
            let wc = forward_solve(&l, &c);
            let si_c = backward_solve(&l, &wc);
            let mean = mu + dot(&c, &u);
            let gap = 1.0 - si_c.iter().sum::<f64>();
            let var = cov.v2 - dot(&wc, &wc) + gap * gap / a;
            (mean, var.max(0.0))
        })
        .collect())
}

/// Minimum eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Simulates a zero-mean Gaussian vector with the given covariance, using
/// standard-normal draws `e`.
pub fn correlate(cov: &DMatrix<f64>, e: &[f64]) -> Result<Vec<f64>> {
    let (chol, _) = cholesky_with_jitter(cov.clone())?;
    Ok((chol.l() * DVector::from_column_slice(e)).iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_sites(n: usize, side: f64, seed: u64) -> Vec<Location> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                Location::at(
                    i.to_string(),
                    rng.random::<f64>() * side,
                    rng.random::<f64>() * side,
                )
            })
            .collect()
    }

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn draw(cov: &ExpCov, sites: &[Location], seed: u64) -> Vec<f64> {
        let d = pairwise_distances(sites, sites);
        correlate(&exp_cov(cov, &d), &normals(sites.len(), seed)).unwrap()
    }

    fn exact_bins(v2: f64, lambda: f64) -> BinnedCov {
        BinnedCov {
            bins: (1..=49)
                .map(|k| {
                    let h = k as f64 / 2.0;
                    Bin {
                        h,
                        tau: v2 * (-h / lambda).exp(),
                        pairs: 100,
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn exp_cov_small_cases() {
        let c = ExpCov::new(2.5, 4.0).unwrap();
        let sites = vec![Location::at("a", 0.0, 0.0), Location::at("b", 4.0, 0.0)];
        let m = exp_cov(&c, &pairwise_distances(&sites, &sites));
        assert_eq!(m[(0, 0)], 2.5);
        assert!((m[(0, 1)] - 2.5 * (-1.0f64).exp()).abs() < 1e-15);
        assert!(ExpCov::new(0.0, 1.0).is_err());
        assert!(ExpCov::new(1.0, -1.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn exp_cov_is_psd(seed in 0u64..1000, n in 2usize..60, v2 in 0.1..50.0f64, lambda in 0.1..100.0f64) {
            let sites = random_sites(n, 30.0, seed);
            let m = exp_cov(&ExpCov { v2, lambda }, &pairwise_distances(&sites, &sites));
            prop_assert!(min_eigenvalue(&m) >= -1e-8 * v2);
        }

        #[test]
        fn wls_beats_verification_grid(v2 in 0.5..20.0f64, lambda in 0.5..60.0f64, seed in 0u64..500) {
            let mut b = exact_bins(v2, lambda);
            let e = normals(b.bins.len(), seed);
            for (bin, e) in b.bins.iter_mut().zip(e) {
                bin.tau += 0.1 * v2 * e;
            }
            let fit = fit_expcov_wls(&b, BinWeighting::Unweighted).unwrap();
            let w = vec![1.0; b.bins.len()];
            for i in 0..50 {
                for j in 0..50 {
                    let gv = 0.01 + 40.0 * i as f64 / 49.0;
                    let gl = (LAMBDA_MIN.ln() + (LAMBDA_MAX / LAMBDA_MIN).ln() * j as f64 / 49.0).exp();
                    prop_assert!(fit.sse <= wls_objective(&b, &w, gv, gl) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn wls_noiseless_recovery() {
        let fit = fit_expcov_wls(&exact_bins(3.0, 10.0), BinWeighting::Unweighted).unwrap();
        assert!((fit.cov.v2 - 3.0).abs() < 1e-4 * 3.0);
        assert!((fit.cov.lambda - 10.0).abs() < 1e-4 * 10.0);
        assert!(!fit.degenerate);
        let fit = fit_expcov_wls(&exact_bins(3.0, 10.0), BinWeighting::PairCount).unwrap();
        assert!((fit.cov.lambda - 10.0).abs() < 1e-3);
    }

    #[test]
    fn wls_matches_brute_force_grid() {
        let mut b = exact_bins(5.0, 6.0);
        for (bin, e) in b.bins.iter_mut().zip(normals(49, 3)) {
            bin.tau += 0.4 * e;
        }
        let fit = fit_expcov_wls(&b, BinWeighting::Unweighted).unwrap();
        let w = vec![1.0; 49];
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..200 {
            for j in 0..200 {
                let v2 = 2.0 + 6.0 * i as f64 / 199.0;
                let lambda = 2.0 + 12.0 * j as f64 / 199.0;
                let s = wls_objective(&b, &w, v2, lambda);
                if s < best.0 {
                    best = (s, v2, lambda);
                }
            }
        }
        assert!(fit.sse <= best.0 + 1e-12);
        // grid spacing is 0.03 in v2 and 0.06 in lambda
        assert!((fit.cov.v2 - best.1).abs() < 0.1);
        assert!((fit.cov.lambda - best.2).abs() < 0.2);
    }

    #[test]
    fn wls_flat_bins_pin_upper_bracket() {
        let b = BinnedCov {
            bins: (1..=10)
                .map(|k| Bin {
                    h: k as f64,
                    tau: 2.0,
                    pairs: 50,
                })
                .collect(),
        };
        let fit = fit_expcov_wls(&b, BinWeighting::Unweighted).unwrap();
        assert!(fit.degenerate);
        assert!(fit.cov.lambda > 0.99 * LAMBDA_MAX);
    }

    #[test]
    fn wls_sill_cap() {
        // only far lags, decaying faster than their spacing: the free sill explodes
        let b = BinnedCov {
            bins: [8.0, 9.0, 11.0, 14.0]
                .iter()
                .zip([0.4, -0.1, 0.05, 0.0])
                .map(|(&h, tau)| Bin { h, tau, pairs: 40 })
                .collect(),
        };
        let free = fit_expcov_wls(&b, BinWeighting::Unweighted).unwrap();
        assert!(free.cov.v2 > 1e3, "{:?}", free.cov);
        let capped = fit_expcov_wls_capped(&b, BinWeighting::Unweighted, 5.0).unwrap();
        assert!(capped.cov.v2 <= 5.0 && capped.degenerate, "{capped:?}");
        assert!(capped.sse <= wls_objective(&b, &[1.0; 4], 5.0, 2.0) + 1e-12);
        // a cap above the fitted sill changes nothing
        let e = exact_bins(3.0, 10.0);
        let a = fit_expcov_wls(&e, BinWeighting::Unweighted).unwrap();
        assert_eq!(fit_expcov_wls_capped(&e, BinWeighting::Unweighted, 4.0).unwrap(), a);
        assert!(fit_expcov_wls_capped(&e, BinWeighting::Unweighted, 0.0).is_err());
    }

    #[test]
    fn wls_negative_bins_degenerate() {
        let mut b = exact_bins(1.0, 5.0);
        for bin in &mut b.bins {
            bin.tau = -bin.tau;
        }
        let fit = fit_expcov_wls(&b, BinWeighting::Unweighted).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.cov.v2, V2_FLOOR);
        assert!(fit_expcov_wls(&BinnedCov::default(), BinWeighting::Unweighted).is_err());
    }

    fn fast_bins() -> BinConfig {
        BinConfig {
            mcd: McdConfig {
                n_trials: 100,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn binned_cov_recovers_exponential() {
        // one realization scatters by ~30%; average over independent draws
        let truth = ExpCov::new(4.0, 5.0).unwrap();
        let reps = 6;
        let (mut v2, mut lambda) = (0.0, 0.0);
        for rep in 0..reps {
            let sites = random_sites(500, 80.0, 100 + rep);
            let r = draw(&truth, &sites, 200 + rep);
            let b = robust_binned_cov(&r, &sites, &fast_bins()).unwrap();
            assert!(b.bins.windows(2).all(|w| w[0].h < w[1].h));
            assert!(b.bins.iter().all(|x| x.pairs >= 30));
            let fit = fit_expcov_wls(&b, BinWeighting::Unweighted).unwrap();
            v2 += fit.cov.v2 / reps as f64;
            lambda += fit.cov.lambda / reps as f64;
        }
        assert!((v2 / 4.0 - 1.0).abs() < 0.25, "{v2}");
        assert!((lambda / 5.0 - 1.0).abs() < 0.25, "{lambda}");
    }

    #[test]
    fn binned_cov_null_under_permutation() {
        let sites = random_sites(300, 40.0, 21);
        let r = normals(300, 22);
        let cfg = BinConfig {
            centers: vec![2.0, 6.0, 10.0, 14.0],
            delta: 1.0,
            ..fast_bins()
        };
        let obs = robust_binned_cov(&r, &sites, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut null: Vec<Vec<f64>> = vec![Vec::new(); obs.bins.len()];
        for _ in 0..30 {
            let mut p = r.clone();
            for i in (1..p.len()).rev() {
                p.swap(i, rng.random_range(0..=i));
            }
            let b = robust_binned_cov(&p, &sites, &cfg).unwrap();
            for (k, bin) in b.bins.iter().enumerate() {
                null[k].push(bin.tau);
            }
        }
        for (bin, draws) in obs.bins.iter().zip(&null) {
            let m = draws.iter().sum::<f64>() / draws.len() as f64;
            let se = (draws.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (draws.len() - 1) as f64)
                .sqrt();
            assert!(bin.tau.abs() < 3.0 * se, "h = {}: {} vs se {}", bin.h, bin.tau, se);
        }
    }

    #[test]
    fn binned_cov_shift_invariant() {
        let sites = random_sites(200, 30.0, 31);
        let r = draw(&ExpCov::new(2.0, 4.0).unwrap(), &sites, 32);
        let shifted: Vec<f64> = r.iter().map(|v| v + 17.0).collect();
        let cfg = fast_bins();
        let a = robust_binned_cov(&r, &sites, &cfg).unwrap();
        let b = robust_binned_cov(&shifted, &sites, &cfg).unwrap();
        assert_eq!(a.bins.len(), b.bins.len());
        for (x, y) in a.bins.iter().zip(&b.bins) {
            assert!((x.tau - y.tau).abs() < 1e-9 * (1.0 + x.tau.abs()));
        }
    }

    #[test]
    fn sparse_bins_dropped() {
        let sites = vec![
            Location::at("a", 0.0, 0.0),
            Location::at("b", 1.0, 0.0),
            Location::at("c", 50.0, 0.0),
        ];
        let cfg = BinConfig {
            min_pairs: 10,
            ..Default::default()
        };
        assert!(matches!(
            robust_binned_cov(&[1.0, 2.0, 3.0], &sites, &cfg),
            Err(Error::InsufficientBins { .. })
        ));
    }

    #[test]
    fn ml_recovers_simulated_parameters() {
        let sites = random_sites(300, 40.0, 41);
        let truth = ExpCov::new(2.0, 8.0).unwrap();
        let mut z = draw(&truth, &sites, 42);
        let nug = vec![0.2; 300];
        for (v, e) in z.iter_mut().zip(normals(300, 43)) {
            *v += 0.2f64.sqrt() * e + 10.0;
        }
        let fit = fit_expcov_ml(&z, &sites, &nug, true, &MlConfig::default()).unwrap();
        assert!((fit.cov.v2 / 2.0 - 1.0).abs() < 0.3, "{:?}", fit.cov);
        assert!((fit.cov.lambda / 8.0 - 1.0).abs() < 0.3, "{:?}", fit.cov);
        let at_truth = expcov_loglik(&z, &sites, &nug, &truth, true).unwrap();
        assert!(fit.loglik >= at_truth - 2.0);
        assert!(!fit.degenerate);
    }

    #[test]
    fn ml_multistart_agree() {
        let sites = random_sites(60, 30.0, 51);
        let mut z = draw(&ExpCov::new(3.0, 6.0).unwrap(), &sites, 52);
        for (v, e) in z.iter_mut().zip(normals(60, 53)) {
            *v += 0.3 * e;
        }
        let fit = fit_expcov_ml(&z, &sites, &vec![0.09; 60], true, &MlConfig::default()).unwrap();
        for (ll, c) in &fit.starts {
            assert!((ll - fit.loglik).abs() < 1e-5);
            assert!((c.v2 / fit.cov.v2 - 1.0).abs() < 1e-2);
            assert!((c.lambda / fit.cov.lambda - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn ml_pure_noise_is_degenerate() {
        let sites = random_sites(80, 30.0, 61);
        let z: Vec<f64> = normals(80, 62).iter().map(|e| 100.0 * e).collect();
        let fit = fit_expcov_ml(&z, &sites, &vec![1e4; 80], true, &MlConfig::default()).unwrap();
        assert!(fit.degenerate, "{:?}", fit.cov);
    }

    #[test]
    fn ml_nugget_variant() {
        let sites = random_sites(150, 40.0, 71);
        let mut z = draw(&ExpCov::new(4.0, 6.0).unwrap(), &sites, 72);
        for (v, e) in z.iter_mut().zip(normals(150, 73)) {
            *v += e;
        }
        let fit = fit_expcov_ml_nugget(&z, &sites, &MlConfig::default()).unwrap();
        assert!((fit.cov.v2 / 4.0 - 1.0).abs() < 0.4, "{:?}", fit);
        assert!((fit.nugget - 1.0).abs() < 0.5, "{:?}", fit);
        // profiled likelihood equals the known-nugget likelihood at the optimum
        let ll = expcov_loglik(&z, &sites, &vec![fit.nugget; 150], &fit.cov, true).unwrap();
        assert!((ll - fit.loglik).abs() < 1e-6);
    }

    #[test]
    fn kriging_constant_and_interpolation() {
        let sites = random_sites(12, 20.0, 81);
        let cov = ExpCov::new(1.0, 5.0).unwrap();
        let tiny = vec![1e-12; 12];
        let targets = random_sites(7, 20.0, 82);
        for (m, _) in ordinary_krige(&[4.2; 12], &sites, &tiny, &cov, &targets).unwrap() {
            assert!((m - 4.2).abs() < 1e-6);
        }
        let z = normals(12, 83);
        let at = ordinary_krige(&z, &sites, &vec![0.0; 12], &cov, &sites[3..4]).unwrap();
        assert!((at[0].0 - z[3]).abs() < 1e-6);
        assert!(at[0].1 < 1e-6);
        let shifted: Vec<f64> = z.iter().map(|v| v + 2.5).collect();
        let a = ordinary_krige(&z, &sites, &vec![0.1; 12], &cov, &targets).unwrap();
        let b = ordinary_krige(&shifted, &sites, &vec![0.1; 12], &cov, &targets).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((y.0 - x.0 - 2.5).abs() < 1e-9);
            assert!((y.1 - x.1).abs() < 1e-12);
        }
    }

    #[test]
    fn kriging_matches_dense_oracle() {
        let sites = random_sites(8, 15.0, 91);
        let cov = ExpCov::new(2.0, 3.0).unwrap();
        let nug: Vec<f64> = (0..8).map(|i| 0.1 + 0.05 * i as f64).collect();
        let z = normals(8, 92);
        let t = Location::at("t", 7.0, 7.0);
        let got = ordinary_krige(&z, &sites, &nug, &cov, std::slice::from_ref(&t)).unwrap()[0];

        // bordered system [Σ 1; 1ᵀ 0][w; m] = [c; 1]
        let mut a = DMatrix::zeros(9, 9);
        for i in 0..8 {
            for j in 0..8 {
                a[(i, j)] = cov.at(sites[i].distance(&sites[j])) + if i == j { nug[i] } else { 0.0 };
            }
            a[(i, 8)] = 1.0;
            a[(8, i)] = 1.0;
        }
        let mut rhs = DVector::zeros(9);
        for i in 0..8 {
            rhs[i] = cov.at(sites[i].distance(&t));
        }
        rhs[8] = 1.0;
        let sol = a.lu().solve(&rhs).unwrap();
        let mean: f64 = (0..8).map(|i| sol[i] * z[i]).sum();
        let var = cov.v2 - (0..8).map(|i| sol[i] * rhs[i]).sum::<f64>() - sol[8];
        assert!((got.0 - mean).abs() < 1e-10 * (1.0 + mean.abs()));
        assert!((got.1 - var).abs() < 1e-10 * (1.0 + var.abs()));
    }
}
