use airfuse::basis::{build_basis, BasisConfig, BasisSet};
use airfuse::fieldfit::{residuals_of, HourlyParams};
use airfuse::noise_model::NoiseModel;
use airfuse::predict::*;
use airfuse::spatial_cov::{ordinary_krige, ExpCov};
use airfuse::{HourlyPanel, Location};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Field;

impl CalibrationSurface for Field {
    fn coefficients(&self, s: &Location) -> (f64, f64) {
        (1.5 + 0.05 * s.x, 0.8 + 0.01 * s.y)
    }
}

struct Instance {
    panel: HourlyPanel,
    basis: BasisSet,
    params: HourlyParams,
    noise: NoiseModel,
}

fn loc(rng: &mut ChaCha8Rng, p: &str, i: usize, w: f64) -> Location {
    Location::at(format!("{p}{i}"), rng.random::<f64>() * w, rng.random::<f64>() * w)
}

fn instance(n: usize, m: usize, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<Location> = (0..n).map(|i| loc(&mut rng, "a", i, 10.0)).collect();
    let e: Vec<Location> = (0..m).map(|i| loc(&mut rng, "e", i, 10.0)).collect();
    let basis = build_basis(&a, &BasisConfig { k: 3.min(n), ..Default::default() }).unwrap();
    let mut airbox: Vec<Option<f64>> = (0..n).map(|_| Some(20.0 + 8.0 * rng.random::<f64>())).collect();
    if n > 3 {
        airbox[1] = None;
    }
    let epa = (0..m).map(|_| Some(25.0 + 6.0 * rng.random::<f64>())).collect();
    let panel = HourlyPanel::new(7, a.into(), e.into(), airbox, epa).unwrap();
    let alpha: Vec<f64> = (0..basis.k()).map(|j| [22.0, 1.5, -2.0][j]).collect();
    let (present, residuals) = residuals_of(&panel, &basis, None, &alpha, &[]);
    let params = HourlyParams {
        hour: 7,
        alpha,
        beta: vec![],
        cov: ExpCov::new(4.0, 3.0).unwrap(),
        present,
        residuals,
        huber_scale: 1.0,
        converged: true,
        cov_degenerate: false,
    };
    let noise = NoiseModel::new(0.3, 0.02, 0.05, 24.0).unwrap();
    Instance { panel, basis, params, noise }
}

fn targets(k: usize, seed: u64) -> Vec<Location> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k).map(|i| loc(&mut rng, "t", i, 12.0)).collect()
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * (1.0 + b.abs())
}

/// Dense oracle: builds the full block matrix and inverts it.
struct Dense {
    minv: DMatrix<f64>,
    r: DVector<f64>,
    sites: Vec<Location>,
    scale: Vec<f64>,
    noise: Vec<f64>,
    m: usize,
}

fn dense(inst: &Instance, field: Option<&dyn CalibrationSurface>, sigma_xi2: f64, ridge: f64) -> Dense {
    let c = inst.params.cov;
    let mut sites = Vec::new();
    let mut scale = Vec::new();
    let mut r = Vec::new();
    let mut noise = Vec::new();
    if let Some(f) = field {
        for (j, s) in inst.panel.epa_sites.iter().enumerate() {
            if let Some(z) = inst.panel.epa[j] {
                let (f0, f1) = f.coefficients(s);
                let trend = inst.basis.trend_at(s, &inst.params.alpha);
                sites.push(s.clone());
                scale.push(f1);
                r.push(z - f0 - f1 * trend);
                noise.push(sigma_xi2 + ridge);
            }
        }
    }
    let m = sites.len();
    for (i, s) in inst.panel.airbox_sites.iter().enumerate() {
        if let Some(z) = inst.panel.airbox[i] {
            sites.push(s.clone());
            scale.push(1.0);
            r.push(z - inst.basis.trend_at(s, &inst.params.alpha));
            noise.push(inst.noise.variance_at(z));
        }
    }
    let n = sites.len();
    let sigma = DMatrix::from_fn(n, n, |i, j| c.at(sites[i].distance(&sites[j])));
    let d = DMatrix::from_diagonal(&DVector::from_vec(scale.clone()));
    let mm = &d * sigma * &d + DMatrix::from_diagonal(&DVector::from_vec(noise.clone()));
    Dense {
        minv: mm.try_inverse().unwrap(),
        r: DVector::from_vec(r),
        sites,
        scale,
        noise,
        m,
    }
}

impl Dense {
    fn cstar(&self, c: &ExpCov, s: &Location) -> DVector<f64> {
        DVector::from_iterator(
            self.sites.len(),
            self.sites.iter().zip(&self.scale).map(|(p, f)| f * c.at(s.distance(p))),
        )
    }
}

#[test]
fn hidden_matches_dense_oracle() {
    let inst = instance(6, 0, 1);
    let t = targets(5, 2);
    let p = eblp_hidden(&inst.params, &inst.panel, &inst.basis, &inst.noise, &t).unwrap();
    let o = dense(&inst, None, 0.0, 0.0);
    for (k, s) in t.iter().enumerate() {
        let c = o.cstar(&inst.params.cov, s);
        let mean = inst.basis.trend_at(s, &inst.params.alpha) + (c.transpose() * &o.minv * &o.r)[0];
        let var = inst.params.cov.v2 - (c.transpose() * &o.minv * &c)[0];
        assert!(close(p.mean[k], mean, 1e-10), "{} {}", p.mean[k], mean);
        assert!(close(p.variance[k], var, 1e-10), "{} {}", p.variance[k], var);
    }
}

#[test]
fn airbox_only_matches_dense_oracle() {
    let inst = instance(8, 0, 3);
    let t = targets(6, 4);
    let p = predict_airbox_only(&inst.params, &inst.panel, &inst.basis, &inst.noise, &Field, &t).unwrap();
    let o = dense(&inst, None, 0.0, 0.0);
    for (k, s) in t.iter().enumerate() {
        let (f0, f1) = Field.coefficients(s);
        let c = o.cstar(&inst.params.cov, s);
        let y = inst.basis.trend_at(s, &inst.params.alpha) + (c.transpose() * &o.minv * &o.r)[0];
        let var = f1 * f1 * (inst.params.cov.v2 - (c.transpose() * &o.minv * &c)[0]);
        assert!(close(p.mean[k], f0 + f1 * y, 1e-10));
        assert!(close(p.variance[k], var, 1e-10));
    }
}

#[test]
fn fused_matches_dense_oracle() {
    for (n, m, seed) in [(10, 4, 5), (7, 3, 6), (4, 1, 7)] {
        let inst = instance(n, m, seed);
        let t = targets(6, seed + 10);
        for xi in [0.0, 0.4] {
            let p = predict_fused(&inst.params, &inst.panel, &inst.basis, &inst.noise, &Field, xi, &t).unwrap();
            let ridge = if xi == 0.0 { RIDGE * inst.params.cov.v2 } else { 0.0 };
            assert_eq!(p.ridge, xi == 0.0);
            let o = dense(&inst, Some(&Field), xi, ridge);
            for (k, s) in t.iter().enumerate() {
                let (f0, f1) = Field.coefficients(s);
                let c = o.cstar(&inst.params.cov, s);
                let y = inst.basis.trend_at(s, &inst.params.alpha) + (c.transpose() * &o.minv * &o.r)[0];
                let var = f1 * f1 * (inst.params.cov.v2 - (c.transpose() * &o.minv * &c)[0]);
                assert!(close(p.mean[k], f0 + f1 * y, 1e-10), "{} {}", p.mean[k], f0 + f1 * y);
                assert!(close(p.variance[k], var, 1e-10), "{} {}", p.variance[k], var);
            }
        }
    }
}

#[test]
fn identity_calibration_is_the_hidden_predictor() {
    let inst = instance(9, 2, 8);
    let t = targets(20, 9);
    let h = eblp_hidden(&inst.params, &inst.panel, &inst.basis, &inst.noise, &t).unwrap();
    let a = predict_airbox_only(&inst.params, &inst.panel, &inst.basis, &inst.noise, &Affine::IDENTITY, &t).unwrap();
    assert_eq!(h.mean, a.mean);
    assert_eq!(h.variance, a.variance);
}

#[test]
fn fused_without_reference_rows_is_airbox_only() {
    let mut inst = instance(9, 3, 10);
    inst.panel.epa = vec![None; 3];
    let t = targets(15, 11);
    let f = predict_fused(&inst.params, &inst.panel, &inst.basis, &inst.noise, &Field, 0.0, &t).unwrap();
    let a = predict_airbox_only(&inst.params, &inst.panel, &inst.basis, &inst.noise, &Field, &t).unwrap();
    for k in 0..t.len() {
        assert!(close(f.mean[k], a.mean[k], 1e-10));
        assert!(close(f.variance[k], a.variance[k], 1e-10));
    }
    assert!(!f.ridge);
}

#[test]
fn fused_interpolates_noiseless_reference() {
    let inst = instance(10, 4, 12);
    let t: Vec<Location> = inst.panel.epa_sites.to_vec();
    let p = predict_fused(&inst.params, &inst.panel, &inst.basis, &inst.noise, &Field, 0.0, &t).unwrap();
    for (k, z) in inst.panel.epa.iter().enumerate() {
        assert!((p.mean[k] - z.unwrap()).abs() < 1e-3, "{} {:?}", p.mean[k], z);
    }
}

#[test]
fn noiseless_sensors_are_interpolated() {
    let mut inst = instance(8, 0, 13);
    inst.noise = NoiseModel::zero();
    let t: Vec<Location> = inst.panel.airbox_sites.to_vec();
    let p = eblp_hidden(&inst.params, &inst.panel, &inst.basis, &inst.noise, &t).unwrap();
    for (k, z) in inst.panel.airbox.iter().enumerate() {
        if let Some(z) = z {
            assert!((p.mean[k] - z).abs() < 1e-8);
            assert!(p.variance[k] < 1e-8);
        }
    }
}

#[test]
fn huge_noise_returns_the_trend() {
    let mut inst = instance(8, 0, 14);
    inst.noise = NoiseModel::new(1e14, 0.0, 0.0, 10.0).unwrap();
    let t = targets(10, 15);
    let p = eblp_hidden(&inst.params, &inst.panel, &inst.basis, &inst.noise, &t).unwrap();
    for (k, s) in t.iter().enumerate() {
        assert!((p.mean[k] - inst.basis.trend_at(s, &inst.params.alpha)).abs() < 1e-9);
        assert!((p.variance[k] - inst.params.cov.v2).abs() < 1e-9);
    }
}

#[test]
fn far_target_variance_is_scaled_sill() {
    let inst = instance(8, 2, 16);
    let far = [Location::at("far", 5000.0, -4000.0)];
    let p = predict_airbox_only(&inst.params, &inst.panel, &inst.basis, &inst.noise, &Field, &far).unwrap();
    let (_, f1) = Field.coefficients(&far[0]);
    assert!(close(p.variance[0], f1 * f1 * inst.params.cov.v2, 1e-12));
}

struct Scaled<F>(F, f64, f64);

impl<F: CalibrationSurface> CalibrationSurface for Scaled<F> {
    fn coefficients(&self, s: &Location) -> (f64, f64) {
        let (f0, f1) = self.0.coefficients(s);
        (f0 + self.1, f1 * self.2)
    }
}

#[test]
fn calibration_equivariance_is_exact() {
    let inst = instance(9, 3, 17);
    let t = targets(25, 18);
    let base = predict_airbox_only(&inst.params, &inst.panel, &inst.basis, &inst.noise, &Field, &t).unwrap();
    let shifted = predict_airbox_only(&inst.params, &inst.panel, &inst.basis, &inst.noise, &Scaled(Field, 3.25, 1.0), &t).unwrap();
    let doubled = predict_airbox_only(&inst.params, &inst.panel, &inst.basis, &inst.noise, &Scaled(Field, 0.0, 2.0), &t).unwrap();
    assert_eq!(base.latent, shifted.latent);
    assert_eq!(base.latent, doubled.latent);
    for k in 0..t.len() {
        assert_eq!(shifted.mean[k], (base.f0[k] + 3.25) + base.f1[k] * base.latent[k]);
        assert_eq!(doubled.f1[k], 2.0 * base.f1[k]);
        assert_eq!(doubled.mean[k], base.f0[k] + 2.0 * (base.f1[k] * base.latent[k]));
        assert_eq!(doubled.variance[k], 4.0 * base.variance[k]);
        assert!(close(shifted.mean[k] - base.mean[k], 3.25, 1e-12));
    }
}

#[test]
fn reference_data_never_increase_variance() {
    for seed in 20..30 {
        let inst = instance(10, 4, seed);
        let t = targets(40, seed + 100);
        let a = predict_airbox_only(&inst.params, &inst.panel, &inst.basis, &inst.noise, &Field, &t).unwrap();
        let f = predict_fused(&inst.params, &inst.panel, &inst.basis, &inst.noise, &Field, 0.2, &t).unwrap();
        for k in 0..t.len() {
            assert!(f.variance[k] <= a.variance[k] + 1e-12);
        }
    }
}

#[test]
fn reference_only_fused_is_ordinary_kriging() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let e: Vec<Location> = (0..6).map(|i| loc(&mut rng, "e", i, 10.0)).collect();
    let z: Vec<f64> = (0..6).map(|_| 30.0 + 5.0 * rng.random::<f64>()).collect();
    let cov = ExpCov::new(3.0, 4.0).unwrap();
    let (c, xi) = (1.7, 0.3);
    let basis = build_basis(&e, &BasisConfig { k: 1, ..Default::default() }).unwrap();

    // GLS mean of z*/c under Σ + (σ²_ξ/c²) I
    let n = e.len();
    let sig = DMatrix::from_fn(n, n, |i, j| cov.at(e[i].distance(&e[j])) + if i == j { xi / (c * c) } else { 0.0 });
    let si = sig.try_inverse().unwrap();
    let zs = DVector::from_iterator(n, z.iter().map(|v| v / c));
    let one = DVector::from_element(n, 1.0);
    let mu = (one.transpose() * &si * &zs)[0] / (one.transpose() * &si * &one)[0];

    let panel = HourlyPanel::new(0, Vec::new().into(), e.clone().into(), vec![], z.iter().map(|v| Some(*v)).collect()).unwrap();
    let params = HourlyParams {
        hour: 0,
        alpha: vec![mu],
        beta: vec![],
        cov,
        present: vec![],
        residuals: vec![],
        huber_scale: 0.0,
        converged: true,
        cov_degenerate: false,
    };
    let t = targets(8, 32);
    let f = predict_fused(&params, &panel, &basis, &NoiseModel::zero(), &Affine { f0: 0.0, f1: c }, xi, &t).unwrap();
    let ok = ordinary_krige(&zs.as_slice().to_vec(), &e, &vec![xi / (c * c); n], &cov, &t).unwrap();
    for k in 0..t.len() {
        assert!(close(f.mean[k] / c, ok[k].0, 1e-10), "{} {}", f.mean[k] / c, ok[k].0);
    }
}

#[test]
fn single_target_matches_batch_bit_for_bit() {
    let inst = instance(10, 4, 40);
    let mut t = targets(1000, 41);
    t[637] = Location::at("x", 3.3, 4.4);
    let all = predict_fused(&inst.params, &inst.panel, &inst.basis, &inst.noise, &Field, 0.0, &t).unwrap();
    let one = predict_fused(&inst.params, &inst.panel, &inst.basis, &inst.noise, &Field, 0.0, &t[637..638]).unwrap();
    assert_eq!(all.mean[637].to_bits(), one.mean[0].to_bits());
    assert_eq!(all.variance[637].to_bits(), one.variance[0].to_bits());
}

#[test]
fn standardized_residuals_match_dense_oracle() {
    let inst = instance(5, 2, 50);
    let xi = 0.25;
    let r = standardized_residuals(&inst.params, &inst.panel, &inst.basis, &inst.noise, &Field, xi).unwrap();
    let o = dense(&inst, Some(&Field), xi, 0.0);
    let nn = o.sites.len();
    let mut k = 0;
    for (i, z) in inst.panel.airbox.iter().enumerate() {
        let Some(z) = z else { continue };
        let row = o.m + k;
        let s = &inst.panel.airbox_sites[i];
        let (f0, f1) = Field.coefficients(s);
        // y-hat on the sensor scale, written as in the definition
        let c = o.cstar(&inst.params.cov, s);
        let ystar = f0 + f1 * (inst.basis.trend_at(s, &inst.params.alpha) + (c.transpose() * &o.minv * &o.r)[0]);
        let yhat = (-f0 + ystar) / f1;
        let mut g = DVector::zeros(nn);
        g[row] = o.noise[row];
        let var = (g.transpose() * &o.minv * &g)[0];
        let expect = (z - yhat) / var.sqrt();
        assert!(close(r.values[k].unwrap(), expect, 1e-10), "{:?} {}", r.values[k], expect);
        assert_eq!(r.index[k], i);
        k += 1;
    }
    assert_eq!(r.excluded, 0);
}

#[test]
fn standardized_residual_edge_cases() {
    let mut inst = instance(6, 2, 60);
    inst.noise = NoiseModel::zero();
    let r = standardized_residuals(&inst.params, &inst.panel, &inst.basis, &inst.noise, &Field, 0.1).unwrap();
    assert!(r.values.iter().all(|v| v.is_none()));
    assert_eq!(r.excluded, r.values.len());

    let inst = instance(6, 2, 61);
    let err = standardized_residuals(&inst.params, &inst.panel, &inst.basis, &inst.noise, &Affine { f0: 1.0, f1: 0.0 }, 0.1);
    assert!(matches!(err, Err(airfuse::Error::ZeroSlope(_))));
}

#[test]
fn standardized_residuals_are_standard_normal_under_the_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let a: Vec<Location> = (0..25).map(|i| loc(&mut rng, "a", i, 20.0)).collect();
    let e: Vec<Location> = (0..4).map(|i| loc(&mut rng, "e", i, 20.0)).collect();
    let basis = build_basis(&a, &BasisConfig { k: 1, ..Default::default() }).unwrap();
    let cov = ExpCov::new(4.0, 3.0).unwrap();
    let (f0, f1, xi, s2) = (2.0, 1.3, 0.5, 1.5);
    let all: Vec<Location> = e.iter().chain(&a).cloned().collect();
    let n = all.len();
    let l = DMatrix::from_fn(n, n, |i, j| cov.at(all[i].distance(&all[j]))).cholesky().unwrap().l();
    let mut pooled = Vec::new();
    for t in 0..400 {
        let g = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let eta = &l * g;
        let mut noise = |v: f64| v.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal);
        let epa: Vec<Option<f64>> = (0..4).map(|j| Some(f0 + f1 * (20.0 + eta[j]) + noise(xi))).collect();
        let air: Vec<Option<f64>> = (0..25).map(|i| Some(20.0 + eta[4 + i] + noise(s2))).collect();
        let panel = HourlyPanel::new(t, a.clone().into(), e.clone().into(), air, epa).unwrap();
        let (present, residuals) = residuals_of(&panel, &basis, None, &[20.0], &[]);
        let params = HourlyParams {
            hour: t,
            alpha: vec![20.0],
            beta: vec![],
            cov,
            present,
            residuals,
            huber_scale: 1.0,
            converged: true,
            cov_degenerate: false,
        };
        let field = Affine { f0, f1 };
        let sys = HourSystem::build(
            &params,
            &panel,
            &basis,
            &SensorNoise::Given(vec![s2; 25]),
            Some(ReferenceInput { field: &field, sigma_xi2: xi }),
        )
        .unwrap();
        let r = standardized_from_system(&sys, &field).unwrap();
        pooled.extend(r.values.iter().map(|v| v.unwrap()));
    }
    let k = pooled.len() as f64;
    let mean = pooled.iter().sum::<f64>() / k;
    let var = pooled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0);
    // 10^4 draws, correlated within an hour
    assert!(mean.abs() < 0.05, "{mean}");
    assert!((var - 1.0).abs() < 0.06, "{var}");
}

#[test]
fn mismatched_rows_are_rejected() {
    let mut inst = instance(6, 0, 80);
    inst.params.present.pop();
    inst.params.residuals.pop();
    assert!(eblp_hidden(&inst.params, &inst.panel, &inst.basis, &inst.noise, &targets(2, 1)).is_err());
}
