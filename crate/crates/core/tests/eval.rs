use airfuse::basis::BasisConfig;
use airfuse::calibration::{CalibrationConfig, CalibrationField};
use airfuse::eval::*;
use airfuse::fieldfit::HourlyParams;
use airfuse::geom::HourlyPanel;
use airfuse::ingest::PanelSeries;
use airfuse::predict::Affine;
use airfuse::sim::{simulate, SimConfig, SimTruth, SmoothField};
use airfuse::Location;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::sync::Arc;

fn small(seed: u64) -> SimConfig {
    SimConfig {
        n_airbox: 150,
        n_epa: 20,
        hours: 36,
        basis: BasisConfig {
            k: 5,
            ..Default::default()
        },
        outlier_frac: 0.0,
        seed,
        ..Default::default()
    }
}

fn cfg() -> EvalConfig {
    EvalConfig {
        reps: 3,
        calibration: CalibrationConfig {
            min_hours: 10,
            ..Default::default()
        },
        ..Default::default()
    }
}

struct Setup {
    series: PanelSeries,
    truth: SimTruth,
    params: Vec<HourlyParams>,
    noise: airfuse::noise_model::NoiseModel,
}

fn setup(c: SimConfig) -> Setup {
    let (series, truth) = simulate(&c).unwrap();
    let params = truth.true_params(&series);
    Setup {
        series,
        truth,
        params,
        noise: c.noise,
    }
}

impl Setup {
    fn prep(&self) -> Prepared<'_> {
        Prepared::new(&self.series, &self.params, &self.truth.basis, &self.noise, &cfg().calibration).unwrap()
    }
}

fn whole(series: &PanelSeries) -> Window {
    Window {
        label: "all".into(),
        hours: series.hours(),
    }
}

proptest! {
    #[test]
    fn rmspe_matches_loop_and_ignores_order(v in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..60), rot in 0usize..60) {
        let (p, a): (Vec<f64>, Vec<f64>) = v.iter().copied().unzip();
        let mut s = 0.0;
        for i in 0..p.len() {
            s += (p[i] - a[i]) * (p[i] - a[i]);
        }
        let want = (s / p.len() as f64).sqrt();
        let got = rmspe(&p, &a).unwrap();
        prop_assert!((got - want).abs() <= 1e-12 * want.max(1.0));
        let mut w = v.clone();
        w.rotate_left(rot % v.len());
        let (p2, a2): (Vec<f64>, Vec<f64>) = w.into_iter().unzip();
        prop_assert!((rmspe(&p2, &a2).unwrap() - got).abs() <= 1e-12 * got.max(1.0));
    }

    #[test]
    fn constant_offset_gives_its_size(a in prop::collection::vec(-50.0f64..50.0, 1..40), d in -10.0f64..10.0) {
        let p: Vec<f64> = a.iter().map(|x| x + d).collect();
        prop_assert!((rmspe(&p, &a).unwrap() - d.abs()).abs() < 1e-12);
    }
}

#[test]
fn split_partitions_present_reference_values() {
    let s = setup(SimConfig {
        epa_missing: 0.3,
        ..small(1)
    });
    let plan = SplitPlan::new(&s.series, 0, 77);
    for (p, h) in s.series.panels.iter().zip(&plan.hours) {
        let present: Vec<usize> = (0..p.epa.len()).filter(|&j| p.epa[j].is_some()).collect();
        let mut all: Vec<usize> = h.train.iter().chain(&h.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, present);
        assert_eq!(h.train.len(), train_size(present.len()));
        assert!(h.train.iter().all(|j| !h.test.contains(j)));
    }
    assert_eq!(SplitPlan::new(&s.series, 0, 77), plan);
    assert_ne!(SplitPlan::new(&s.series, 0, 78).hours, plan.hours);
}

#[test]
fn identity_global_calibration_reduces_m2_to_m1() {
    let s = setup(small(2));
    let prep = s.prep();
    let plan = SplitPlan::new(&s.series, 0, 5);
    let w = whole(&s.series);
    let id = CalibrationField::Global(Affine::IDENTITY);
    let m1 = run_method(MethodId::M1, &w, &plan, &prep, &cfg()).unwrap();
    let m2 = run_with_field(MethodId::M2, &w, &plan, &prep, Some(&id), &cfg()).unwrap();
    assert_eq!(m1.predictions, m2.predictions);
    assert_eq!(m1.rmspe, m2.rmspe);
    assert!(run_with_field(MethodId::M3, &w, &plan, &prep, None, &cfg()).is_err());
}

#[test]
fn fused_far_from_training_stations_matches_sensor_only() {
    let s = setup(small(3));
    let prep = s.prep();
    let sites = &s.series.epa_sites;
    // hold out the station farthest from all others
    let gap = |j: usize| {
        (0..sites.len())
            .filter(|&k| k != j)
            .map(|k| sites[j].distance(&sites[k]))
            .fold(f64::INFINITY, f64::min)
    };
    let far = (0..sites.len()).max_by(|&a, &b| gap(a).total_cmp(&gap(b))).unwrap();
    assert!(gap(far) > 6.0 * s.truth.config.cov.lambda, "gap {}", gap(far));
    let plan = SplitPlan {
        rep: 0,
        seed: 0,
        hours: s
            .series
            .panels
            .iter()
            .map(|p| HourSplit {
                hour: p.hour,
                train: (0..sites.len()).filter(|&j| j != far && p.epa[j].is_some()).collect(),
                test: p.epa[far].map(|_| vec![far]).unwrap_or_default(),
            })
            .collect(),
    };
    let w = whole(&s.series);
    let f = CalibrationField::Global(Affine { f0: 1.5, f1: 0.9 });
    let m2 = run_with_field(MethodId::M2, &w, &plan, &prep, Some(&f), &cfg()).unwrap();
    let m3 = run_with_field(MethodId::M3, &w, &plan, &prep, Some(&f), &cfg()).unwrap();
    for (a, b) in m2.predictions.iter().zip(&m3.predictions) {
        assert!((a.predicted - b.predicted).abs() < 0.05, "{} {}", a.predicted, b.predicted);
    }
}

#[test]
fn test_values_never_reach_the_fits() {
    let s = setup(SimConfig {
        f0: SimConfig::default().f0,
        f1: SimConfig::default().f1,
        ..small(4)
    });
    let plan = SplitPlan::new(&s.series, 0, 9);
    let mut tainted = s.series.clone();
    let panels: Vec<HourlyPanel> = tainted
        .panels
        .iter()
        .zip(&plan.hours)
        .map(|(p, h)| {
            let mut epa = p.epa.clone();
            for &j in &h.test {
                epa[j] = epa[j].map(|v| v * 7.0 + 500.0);
            }
            HourlyPanel { epa, ..p.clone() }
        })
        .collect();
    tainted.panels = panels;
    let w = whole(&s.series);
    let clean = s.prep();
    let dirty = Prepared::new(&tainted, &s.params, &s.truth.basis, &s.noise, &cfg().calibration).unwrap();
    for m in MethodId::ALL {
        let a = run_method(m, &w, &plan, &clean, &cfg()).unwrap();
        let b = run_method(m, &w, &plan, &dirty, &cfg()).unwrap();
        let pa: Vec<f64> = a.predictions.iter().map(|t| t.predicted).collect();
        let pb: Vec<f64> = b.predictions.iter().map(|t| t.predicted).collect();
        assert_eq!(pa, pb, "{}", m.tag());
        assert_ne!(a.rmspe, b.rmspe);
    }
}

#[test]
fn replication_is_deterministic_and_exchangeable() {
    let s = setup(small(5));
    let prep = s.prep();
    let w = vec![whole(&s.series)];
    let c = EvalConfig {
        methods: vec![MethodId::M1, MethodId::M2, MethodId::M4, MethodId::M6],
        ..cfg()
    };
    let a = replicate(&prep, &w, &c).unwrap();
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap()
        .install(|| replicate(&prep, &w, &c).unwrap());
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 3 * 4);

    let seeds = rep_seeds(11, 3);
    let rev: Vec<u64> = seeds.iter().rev().copied().collect();
    let x = replicate_with_seeds(&prep, &w, &seeds, &c).unwrap();
    let y = replicate_with_seeds(&prep, &w, &rev, &c).unwrap();
    for m in &c.methods {
        let cell = |t: &EvalTable| {
            let mut v: Vec<f64> = t.rows.iter().filter(|r| r.method == *m).map(|r| r.rmspe).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        assert_eq!(cell(&x), cell(&y));
    }

    let one = replicate(&prep, &w, &EvalConfig { reps: 1, ..c.clone() }).unwrap();
    assert_eq!(one.rows.len(), 4);
    assert!(replicate(&prep, &w, &EvalConfig { reps: 0, ..c }).is_err());

    let mut buf = Vec::new();
    a.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("window,method,rep,rmspe\nall,M1,0,"));
    assert_eq!(a.summary().len(), 4);
}

#[test]
fn methods_order_on_varying_calibration() {
    let d = SimConfig::default();
    let s = setup(SimConfig {
        n_airbox: 250,
        n_epa: 30,
        hours: 60,
        f0: d.f0,
        f1: d.f1,
        ..small(6)
    });
    let prep = s.prep();
    let t = replicate(&prep, &[whole(&s.series)], &EvalConfig { reps: 4, ..cfg() }).unwrap();
    let m = |id| t.mean_of(id).unwrap();
    use MethodId::*;
    assert!(m(M1) > m(M2) && m(M2) >= m(M4), "{:?}", t.summary());
    assert!(m(M1) > m(M3) && m(M3) >= m(M5), "{:?}", t.summary());
}

#[test]
fn adaptive_methods_report_missing_anchors() {
    let s = setup(SimConfig {
        n_epa: 4,
        ..small(7)
    });
    let prep = s.prep();
    let plan = SplitPlan::new(&s.series, 0, 1);
    let err = run_method(MethodId::M4, &whole(&s.series), &plan, &prep, &cfg()).unwrap_err();
    assert_eq!(err.kind(), "missing_prerequisite", "{err}");
}

fn explore_series(ab: Vec<Location>, epa: Vec<Location>, hours: usize, f: impl Fn(usize, &mut ChaCha8Rng) -> (Vec<Option<f64>>, Vec<Option<f64>>)) -> PanelSeries {
    let ab: Arc<[Location]> = ab.into();
    let epa: Arc<[Location]> = epa.into();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let panels = (0..hours)
        .map(|t| {
            let (a, e) = f(t, &mut rng);
            HourlyPanel::new(t as i64, ab.clone(), epa.clone(), a, e).unwrap()
        })
        .collect();
    PanelSeries::new(ab, epa, panels).unwrap()
}

fn ring(n: usize, r: f64) -> Vec<Location> {
    (0..n)
        .map(|i| {
            let a = i as f64 * std::f64::consts::TAU / n as f64;
            Location::at(format!("A{i}"), 10.0 + r * a.cos() + 0.01 * i as f64, 10.0 + r * a.sin())
        })
        .collect()
}

#[test]
fn exact_sensor_gives_perfect_line() {
    let mut ab = ring(6, 1.5);
    ab[0] = Location::at("A0", 10.0, 10.0);
    let s = explore_series(ab, vec![Location::at("E", 10.0, 10.0)], 50, |t, rng| {
        let v = 20.0 + t as f64;
        let mut a: Vec<Option<f64>> = (0..6).map(|_| Some(rng.random::<f64>() * 50.0)).collect();
        a[0] = Some(v);
        (a, vec![Some(v)])
    });
    let r = explore(&s, 2.0).unwrap();
    assert_eq!(r.rows.len(), 1);
    let n = r.rows[0].vs_nearest.unwrap();
    assert_eq!(r.rows[0].nearest, "A0");
    assert!((n.r2 - 1.0).abs() < 1e-12 && (n.slope - 1.0).abs() < 1e-12 && n.intercept.abs() < 1e-9);
    assert!(explore(&s, 0.0).is_err());
    assert!(explore(&s, 0.5).unwrap().empty);
}

#[test]
fn noise_sensors_give_no_fit_and_averaging_helps() {
    // independent noise: R² near zero
    let s = explore_series(ring(8, 1.0), vec![Location::at("E", 10.0, 10.0)], 2000, |_, rng| {
        let a = (0..8).map(|_| Some(rng.random::<f64>())).collect();
        (a, vec![Some(rng.random::<f64>())])
    });
    let r = explore(&s, 2.0).unwrap();
    assert!(r.rows[0].vs_nearest.unwrap().r2 < 0.01);

    // shared signal with independent sensor noise: the average tracks better
    let s = explore_series(ring(8, 1.0), vec![Location::at("E", 10.0, 10.0)], 2000, |_, rng| {
        let y = 30.0 + 8.0 * rng.sample::<f64, _>(StandardNormal);
        let a = (0..8).map(|_| Some(y + 6.0 * rng.sample::<f64, _>(StandardNormal))).collect();
        (a, vec![Some(y)])
    });
    let r = explore(&s, 2.0).unwrap();
    let (n, a) = (r.rows[0].vs_nearest.unwrap(), r.rows[0].vs_average.unwrap());
    assert!(a.r2 > n.r2 + 0.1, "{} {}", n.r2, a.r2);
}

#[test]
fn averaging_helps_on_simulated_network() {
    let s = setup(SimConfig {
        n_airbox: 600,
        n_epa: 8,
        width_km: 25.0,
        height_km: 25.0,
        hours: 200,
        f0: SmoothField::constant(0.0),
        f1: SmoothField::constant(1.0),
        noise: airfuse::noise_model::NoiseModel::new(4.0, 0.1, 0.5, 25.0).unwrap(),
        ..small(8)
    });
    let r = explore(&s.series, 2.0).unwrap();
    assert!(!r.empty);
    let better = r
        .rows
        .iter()
        .filter(|x| x.vs_average.unwrap().r2 > x.vs_nearest.unwrap().r2)
        .count();
    assert!(better * 4 >= r.rows.len() * 3, "{better} of {}", r.rows.len());
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), r.rows.len() + 1);
}
