use statrs::distribution::{ContinuousCDF, Normal};

use metabias_core::ensemble::WeightFunction;
use metabias_core::simulate::{generate, generate_with_stats, SimConfig};

#[test]
fn standardised_residuals_pass_ks() {
    // one estimate per study keeps the draws independent
    let cfg = SimConfig {
        mu_true: 0.2,
        tau_between: 0.1,
        tau_within: 0.05,
        n_studies: 10_000,
        seed: 17,
        ..Default::default()
    };
    let d = generate(&cfg).unwrap();
    let var_re = 0.1f64.powi(2) + 0.05f64.powi(2);
    let mut z: Vec<f64> = d
        .estimates()
        .iter()
        .map(|e| (e.theta - 0.2) / (e.se * e.se + var_re).sqrt())
        .collect();
    z.sort_by(f64::total_cmp);
    let phi = Normal::standard();
    let n = z.len() as f64;
    let d_stat = z
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = phi.cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    // asymptotic 1% critical value of the one-sample KS statistic
    let crit = 1.628 / n.sqrt();
    assert!(d_stat < crit, "KS D = {d_stat} >= {crit}");
}

#[test]
fn sample_mean_converges() {
    let d = generate(&SimConfig { mu_true: 0.3, n_studies: 20_000, seed: 2, ..Default::default() }).unwrap();
    let t = d.thetas();
    let s = d.ses();
    let m = t.iter().sum::<f64>() / t.len() as f64;
    let se = (s.iter().map(|x| x * x).sum::<f64>()).sqrt() / t.len() as f64;
    assert!((m - 0.3).abs() < 3.0 * se);
}

#[test]
fn retention_follows_weights() {
    let omegas = [1.0, 0.5, 0.2];
    let cfg = SimConfig {
        mu_true: 0.05,
        tau_between: 0.05,
        n_studies: 20_000,
        weightfn: Some(WeightFunction::new(vec![0.05, 0.10], omegas.to_vec()).unwrap()),
        seed: 8,
        ..Default::default()
    };
    let (_, stats) = generate_with_stats(&cfg).unwrap();
    for j in 0..3 {
        let prop = stats.proposed_by_interval[j] as f64;
        let ratio = stats.retained_by_interval[j] as f64 / prop;
        let mc = (omegas[j] * (1.0 - omegas[j]) / prop).sqrt();
        assert!((ratio - omegas[j]).abs() <= 4.0 * mc + 1e-12, "interval {j}: {ratio} vs {}", omegas[j]);
    }
}

#[test]
fn strong_selection_inflates_significant_share() {
    let base = SimConfig { mu_true: 0.02, tau_between: 0.02, n_studies: 3000, seed: 3, ..Default::default() };
    let share = |cfg: &SimConfig| {
        let d = generate(cfg).unwrap();
        d.estimates().iter().filter(|e| e.p_value() < 0.05).count() as f64 / d.len() as f64
    };
    let plain = share(&base);
    let selected = share(&SimConfig {
        weightfn: Some(WeightFunction::new(vec![0.05, 0.10], vec![1.0, 0.01, 0.01]).unwrap()),
        ..base.clone()
    });
    assert!(selected > plain + 0.3, "selected {selected} vs plain {plain}");
}

#[test]
fn config_round_trips_and_reproduces() {
    let mut cfg = SimConfig { mu_true: 0.1, tau_within: 0.02, n_studies: 12, estimates_per_study: [1, 3], seed: 4, ..Default::default() };
    cfg.beta_true.insert("x".into(), 0.3);
    let back = SimConfig::from_json(&cfg.to_json().unwrap()).unwrap();
    assert_eq!(cfg, back);
    let a = generate(&cfg).unwrap();
    let b = generate(&back).unwrap();
    assert_eq!(a.estimates(), b.estimates());
}

#[test]
fn hopeless_selection_hits_budget() {
    let cfg = SimConfig {
        mu_true: 0.0,
        n_studies: 100,
        se_range: [0.2, 0.3],
        weightfn: Some(WeightFunction::new(vec![0.05], vec![1.0, 1e-9]).unwrap()),
        budget_factor: 5.0,
        seed: 1,
        ..Default::default()
    };
    let err = generate(&cfg).unwrap_err();
    assert!(matches!(err, metabias_core::Error::Budget { .. }), "{err}");
}
