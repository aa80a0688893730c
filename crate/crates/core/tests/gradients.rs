//! Analytic gradients against central finite differences.

use metafollower::data::{generate_fleet, FleetConfig};
use metafollower::meta::{inner_adapt, task_meta_gradient, MetaConfig, NetworkObjective, TaskSamples};
use metafollower::nn::ModelParams;
use metafollower::physics::IdmBox;
use metafollower::pidl::{loss_and_grad, make_samples, pidl_loss, sample_loss, FeatureScaler, ModelKind, NetworkSpec};
use metafollower::types::CfEvent;

const H: f64 = 1e-5;

fn events(seed: u64, horizon: f64) -> Vec<CfEvent> {
    let cfg = FleetConfig {
        n_drivers: 1,
        events_per_driver: 2,
        horizon,
        seed,
        ..FleetConfig::default()
    };
    generate_fleet(&cfg).events
}

fn spec(kind: ModelKind, hidden: usize, window: usize, scaler: FeatureScaler) -> NetworkSpec {
    NetworkSpec {
        kind,
        hidden,
        window,
        scaler,
        idm_box: IdmBox::default(),
    }
}

fn central_difference(theta: &ModelParams, f: impl Fn(&ModelParams) -> f64) -> Vec<f64> {
    (0..theta.len())
        .map(|j| {
            let mut p = theta.data.clone();
            p[j] += H;
            let plus = f(&theta.with_data(p.clone()));
            p[j] -= 2.0 * H;
            let minus = f(&theta.with_data(p));
            (plus - minus) / (2.0 * H)
        })
        .collect()
}

/// Largest componentwise error, relative where entries exceed one.
fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

#[test]
fn pidl_loss_gradient_matches_finite_differences() {
    for seed in 0..5u64 {
        let evs = events(100 + seed, 3.0);
        let scaler = FeatureScaler::fit(&evs).unwrap();
        let s = spec(ModelKind::Pidl, 16, 8, scaler);
        let theta = s.init_params(seed);
        let samples = make_samples(&evs, 8, 1, &scaler).unwrap();
        let (loss, g) = loss_and_grad(&s, &theta, &samples).unwrap();
        let plain = pidl_loss(&evs, &theta, &scaler, &s.idm_box, 8).unwrap();
        assert!((loss - plain).abs() <= 1e-12 * plain.abs().max(1.0));
        let fd = central_difference(&theta, |t| pidl_loss(&evs, t, &scaler, &s.idm_box, 8).unwrap());
        let rel = max_rel_error(&g, &fd);
        assert!(rel < 1e-6, "seed {seed}: relative error {rel:e}");
    }
}

#[test]
fn lstm_loss_gradient_matches_finite_differences() {
    for seed in 0..3u64 {
        let evs = events(200 + seed, 2.0);
        let scaler = FeatureScaler::fit(&evs).unwrap();
        let s = spec(ModelKind::Lstm, 8, 5, scaler);
        let theta = s.init_params(seed);
        let samples = make_samples(&evs, 5, 1, &scaler).unwrap();
        let (_, g) = loss_and_grad(&s, &theta, &samples).unwrap();
        let fd = central_difference(&theta, |t| sample_loss(&s, t, &samples).unwrap());
        let rel = max_rel_error(&g, &fd);
        assert!(rel < 1e-6, "seed {seed}: relative error {rel:e}");
    }
}

fn meta_gradient_error(first_order: bool) -> f64 {
    let evs = events(7, 3.0);
    let scaler = FeatureScaler::fit(&evs).unwrap();
    let s = spec(ModelKind::Pidl, 4, 6, scaler);
    let theta = s.init_params(3);
    let task = TaskSamples {
        driver_id: "D001".into(),
        support: make_samples(&evs[..1], 6, 2, &scaler).unwrap(),
        query: make_samples(&evs[1..], 6, 2, &scaler).unwrap(),
    };
    let cfg = MetaConfig {
        alpha: 0.05,
        k_inner: 1,
        first_order,
        ..MetaConfig::default()
    };
    let obj = NetworkObjective { spec: s };
    let (loss, g) = task_meta_gradient(&theta, &task, &cfg, &obj).unwrap();
    let adapted_loss = |t: &ModelParams| {
        let phi = inner_adapt(t, &task, &cfg, &obj).unwrap();
        sample_loss(&s, &phi, &task.query).unwrap()
    };
    assert!((loss - adapted_loss(&theta)).abs() < 1e-12);
    let fd = central_difference(&theta, adapted_loss);
    max_rel_error(&g, &fd)
}

#[test]
fn meta_gradient_through_one_inner_step() {
    let rel = meta_gradient_error(false);
    assert!(rel < 1e-4, "relative error {rel:e}");
}

#[test]
fn first_order_meta_gradient_drops_the_hessian_term() {
    // The first-order variant is only an approximation; it must differ
    // measurably from the exact gradient.
    assert!(meta_gradient_error(true) > 1e-4);
}
