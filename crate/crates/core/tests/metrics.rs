use cohort_lte::bench::BenchSpec;
use cohort_lte::decay::Weighting;
use cohort_lte::estimators::Method;
use cohort_lte::exec::Exec;
use cohort_lte::metrics::{
    analyze_point, bootstrap_report, estimate_delta_erlv, estimate_lte, estimate_ste, AnalysisOptions, BootstrapOptions,
};
use cohort_lte::panel::{aggregate, Arm, Dataset, Observation, PanelMode, UserRecord};
use cohort_lte::simulate::{generate_dataset, true_lte, SimConfig};
use proptest::prelude::*;

fn user(id: &str, arm: Arm, entry: u32, vals: &[f64]) -> UserRecord {
    UserRecord {
        user_id: id.into(),
        arm,
        entry_day: entry,
        observations: vals
            .iter()
            .enumerate()
            .map(|(x, &metric)| Observation {
                day: entry + x as u32,
                metric,
                active: true,
            })
            .collect(),
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (
        mean,
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt(),
    )
}

fn panels(cfg: &SimConfig) -> (Dataset, cohort_lte::panel::CohortPanel, cohort_lte::panel::CohortPanel) {
    let data = generate_dataset(cfg, Exec::Parallel).unwrap();
    let metric = aggregate(&data, PanelMode::Metric, None, Exec::Parallel);
    let presence = aggregate(&data, PanelMode::Presence, None, Exec::Parallel);
    (data, metric, presence)
}

#[test]
fn ste_of_two_constant_users() {
    let records = [
        user("a", Arm::Treatment, 0, &[5.0; 7]),
        user("b", Arm::Control, 0, &[2.0; 7]),
    ];
    let data = Dataset::from_records(&records, 7).unwrap();
    let ste = estimate_ste(&data, 7).unwrap();
    assert_eq!(ste.value, 3.0);
}

#[test]
fn ste_on_identical_arms_covers_zero() {
    let mut covered = 0;
    for seed in 0..20 {
        let cfg = SimConfig {
            seed,
            ..SimConfig::default()
        }
        .null();
        let data = generate_dataset(&cfg, Exec::Parallel).unwrap();
        covered += usize::from(estimate_ste(&data, 7).unwrap().covers(0.0));
    }
    assert!(covered >= 17, "{covered}/20");
}

#[test]
fn null_lte_is_centred() {
    let lte: Vec<f64> = (0..100)
        .map(|seed| {
            let (_, metric, _) = panels(
                &SimConfig {
                    seed,
                    ..SimConfig::default()
                }
                .null(),
            );
            estimate_lte(&metric).unwrap().value
        })
        .collect();
    let (mean, sd) = mean_sd(&lte);
    assert!(mean.abs() <= 4.0 * sd / 10.0, "{mean} ± {sd}");
}

#[test]
fn decaying_effect_lte_mae_at_comparison_ranges() {
    let spec = BenchSpec::comparison();
    let errors: Vec<f64> = (0..100)
        .map(|i| {
            let cfg = spec.sim_config(i);
            let (_, metric, _) = panels(&cfg);
            (estimate_lte(&metric).unwrap().value - true_lte(&cfg)).abs()
        })
        .collect();
    let mae = errors.iter().sum::<f64>() / 100.0;
    assert!(mae <= 0.2, "MAE {mae}");
}

#[test]
fn persistent_effect_is_recovered() {
    let errors: Vec<f64> = (0..100)
        .map(|seed| {
            let cfg = SimConfig {
                seed,
                alpha_eff: 0.1,
                persistent_effect: 0.1,
                ..SimConfig::default()
            };
            let (_, metric, _) = panels(&cfg);
            estimate_lte(&metric).unwrap().value - true_lte(&cfg)
        })
        .collect();
    let (mean, _) = mean_sd(&errors);
    assert!(mean.abs() < 0.05, "mean error {mean}");
}

#[test]
fn without_differential_churn_derlv_follows_the_effect() {
    for (seed, alpha_eff) in [(1, 0.3), (2, -0.3), (3, 0.5), (4, -0.5)] {
        let cfg = SimConfig {
            seed,
            alpha_eff,
            alpha_churn: 0.0,
            ..SimConfig::default()
        };
        let (_, metric, presence) = panels(&cfg);
        let r = estimate_delta_erlv(&metric, &presence, 13, 0, Weighting::InverseVariance).unwrap();
        let f = r.fits;
        let decomposed: f64 = (0..=13)
            .map(|t| {
                let t = f64::from(t);
                let s = 0.5 * (f.survival_t.predict(t) + f.survival_c.predict(t)).clamp(0.0, 2.0);
                s * (f.metric_t.predict(t) - f.metric_c.predict(t))
            })
            .sum();
        assert_eq!(r.value.signum(), alpha_eff.signum(), "{r:?}");
        assert!(
            (r.value - decomposed).abs() <= 0.25 * decomposed.abs(),
            "{} vs {decomposed}",
            r.value
        );
    }
}

#[test]
fn negative_increments_make_derlv_non_increasing_in_horizon() {
    let cfg = SimConfig {
        seed: 9,
        alpha_eff: -0.2,
        alpha_churn: 0.3,
        ..SimConfig::default()
    };
    let (_, metric, presence) = panels(&cfg);
    let fits = estimate_delta_erlv(&metric, &presence, 13, 0, Weighting::InverseVariance)
        .unwrap()
        .fits;
    assert!((0..=13).all(|t| fits.increment(f64::from(t)) < 0.0));
    let sums: Vec<f64> = (0..=13).map(|h| fits.delta_erlv(0, h)).collect();
    assert!(sums.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn single_cohort_methods_agree() {
    for seed in 0..5 {
        let cfg = SimConfig {
            seed,
            staggered_entry: false,
            ..SimConfig::default()
        };
        let data = generate_dataset(&cfg, Exec::Parallel).unwrap();
        let p = analyze_point(&data, None, &AnalysisOptions::default());
        let mc = p.derlv_value(Method::Mc).unwrap();
        for m in [Method::Ccd, Method::Did] {
            let b = p.derlv_value(m).unwrap();
            assert!((mc - b).abs() <= 1e-9, "{m}: {b} vs {mc}");
        }
    }
}

#[test]
fn bootstrap_ste_std_tracks_the_analytic_std() {
    let opts = AnalysisOptions {
        methods: vec![Method::Mc],
        ..AnalysisOptions::default()
    };
    let mut ratios = Vec::new();
    for seed in 0..100 {
        let cfg = SimConfig {
            seed,
            n_users: 2000,
            ..SimConfig::default()
        };
        let data = generate_dataset(&cfg, Exec::Parallel).unwrap();
        let analytic = estimate_ste(&data, 7).unwrap().std;
        let boot = BootstrapOptions {
            replicates: 200,
            seed,
            exec: Exec::Parallel,
        };
        let report = bootstrap_report(&data, &opts, &boot).unwrap();
        let ratio = report.ste.unwrap().std / analytic;
        assert!((0.7..=1.3).contains(&ratio), "seed {seed}: ratio {ratio}");
        ratios.push(ratio);
    }
    let (mean, _) = mean_sd(&ratios);
    assert!((mean - 1.0).abs() < 0.05, "mean ratio {mean}");
}

#[test]
fn one_user_arm_is_unstable() {
    let mut records: Vec<UserRecord> = (0..30)
        .map(|i| {
            user(
                &format!("c{i}"),
                Arm::Control,
                i % 5,
                &vec![1.0 + f64::from(i % 3); (7 - i % 5) as usize],
            )
        })
        .collect();
    records.push(user("t0", Arm::Treatment, 0, &[2.0; 7]));
    let data = Dataset::from_records(&records, 7).unwrap();
    let boot = BootstrapOptions {
        replicates: 50,
        seed: 1,
        exec: Exec::Sequential,
    };
    let report = bootstrap_report(&data, &AnalysisOptions::default(), &boot).unwrap();
    assert!(report.unstable);
    assert!(!report.diagnostics.is_empty());
}

#[test]
fn fixed_seed_gives_identical_reports() {
    let cfg = SimConfig {
        seed: 5,
        n_users: 3000,
        ..SimConfig::default()
    };
    let data = generate_dataset(&cfg, Exec::Parallel).unwrap();
    let run = |exec| {
        let boot = BootstrapOptions {
            replicates: 60,
            seed: 99,
            exec,
        };
        serde_json::to_string(&bootstrap_report(&data, &AnalysisOptions::default(), &boot).unwrap()).unwrap()
    };
    let a = run(Exec::Parallel);
    assert_eq!(a, run(Exec::Parallel));
    assert_eq!(a, run(Exec::Sequential));
}

#[test]
fn too_few_replicates_rejected() {
    let data = generate_dataset(
        &SimConfig {
            n_users: 200,
            ..SimConfig::default()
        },
        Exec::Sequential,
    )
    .unwrap();
    let boot = BootstrapOptions {
        replicates: 49,
        seed: 0,
        exec: Exec::Sequential,
    };
    assert!(bootstrap_report(&data, &AnalysisOptions::default(), &boot).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn report_intervals_contain_their_point(seed in 0u64..1000) {
        let cfg = SimConfig { seed, n_users: 1500, ..SimConfig::default() };
        let data = generate_dataset(&cfg, Exec::Parallel).unwrap();
        let boot = BootstrapOptions { replicates: 50, seed, exec: Exec::Parallel };
        let r = bootstrap_report(&data, &AnalysisOptions::default(), &boot).unwrap();
        let baseline = r.baselines.iter().flat_map(|b| [b.lte.as_ref(), b.derlv.as_ref()]);
        for m in [r.ste.as_ref(), r.lte.as_ref(), r.derlv.as_ref()].into_iter().chain(baseline).flatten() {
            prop_assert!(m.ci95.0 <= m.value && m.value <= m.ci95.1, "{:?}", m);
            prop_assert!(m.std >= 0.0);
        }
    }
}
