use metafollower::data::{generate_fleet, make_tasks, FleetConfig, SplitSpec};
use metafollower::eval::{evaluate_policy, run_benchmark, spacing_mse, EvalConfig, SuiteEntry, SuiteModel};
use metafollower::ga::{Calibration, PhysicsKind};
use metafollower::rollout::{rollout, AccelerationPolicy, IdmPolicy};
use metafollower::types::{CfEvent, DriverTask, KinematicState};

fn noiseless_fleet(n_drivers: usize, events: usize, seed: u64) -> metafollower::data::Fleet {
    generate_fleet(&FleetConfig {
        n_drivers,
        events_per_driver: events,
        accel_noise_sigma: 0.0,
        drift_volatility: 0.0,
        seed,
        ..FleetConfig::default()
    })
}

#[test]
fn oracle_idm_on_noiseless_driver() {
    let fleet = noiseless_fleet(1, 6, 3);
    let truth = fleet.profiles["D001"].base;
    let task = DriverTask {
        driver_id: "D001".into(),
        support: fleet.events[..2].to_vec(),
        query: fleet.events[2..].to_vec(),
    };
    let suite = [SuiteEntry {
        name: "IDM".into(),
        model: SuiteModel::Physics(Calibration {
            kind: PhysicsKind::Idm,
            params: truth.to_array().to_vec(),
            best_fitness: 0.0,
            history: Vec::new(),
        }),
    }];
    let report = run_benchmark(&[task], &suite, &EvalConfig::default()).unwrap();
    let idm = report.model("IDM").unwrap();
    assert!(idm.mse_spacing < 0.05, "mse {}", idm.mse_spacing);
    assert_eq!(idm.collision_rate_permille, 0.0);
    assert_eq!(idm.total_events, 4);
}

/// Leader cruising at 20 m/s then braking hard to a stop.
fn braking_leader() -> CfEvent {
    let dt = 0.1;
    let mut states = Vec::new();
    let (mut s, mut v_lv, v_fv) = (30.0, 20.0, 20.0);
    for k in 0..200 {
        let a_lv: f64 = if k >= 50 { -6.0 } else { 0.0 };
        let next = (v_lv + a_lv * dt).max(0.0);
        states.push(KinematicState::new(s, v_fv, v_fv - v_lv, 0.0));
        s += 0.5 * (v_lv + next) * dt - v_fv * dt;
        v_lv = next;
    }
    CfEvent::new("X", "X_E001", "X_L001", dt, states)
}

#[test]
fn unstable_model_collides_and_is_listed() {
    let event = braking_leader();
    let task = DriverTask {
        driver_id: "X".into(),
        support: vec![event.clone()],
        query: vec![event.clone(), {
            let mut e = event;
            e.event_id = "X_E002".into();
            e
        }],
    };
    let report = evaluate_policy("constant", std::slice::from_ref(&task), 10, |_, _| {
        Ok(Box::new(|_: &[KinematicState], _: f64| 0.5) as Box<dyn AccelerationPolicy + Send>)
    })
    .unwrap();
    assert_eq!(report.collision_count, 2);
    assert_eq!(report.collision_rate_permille, 1000.0);
    assert_eq!(report.collided_events, vec!["X_E001", "X_E002"]);

    let r = rollout(&task.query[0], &mut |_: &[KinematicState], _: f64| 0.5, 10).unwrap();
    let k = r.collision_index.unwrap();
    assert!(r.simulated.states[k].spacing <= 0.0);
    assert!(r.simulated.states[..k].iter().all(|s| s.spacing > 0.0));
}

#[test]
fn suite_mse_is_event_weighted_mean_of_driver_mse() {
    let fleet = generate_fleet(&FleetConfig {
        n_drivers: 6,
        events_per_driver: 21,
        seed: 11,
        ..FleetConfig::default()
    });
    let spec = SplitSpec {
        n_train_drivers: 2,
        n_test_drivers: 4,
        support_fraction: 0.3,
        seed: 5,
    };
    let (_, test) = make_tasks(&fleet.events, &spec).unwrap();
    let profiles = &fleet.profiles;
    let report = evaluate_policy("oracle-base", &test, 10, |_, t| {
        Ok(Box::new(IdmPolicy(profiles[&t.driver_id].base)) as Box<dyn AccelerationPolicy + Send>)
    })
    .unwrap();
    let n: usize = report.per_driver.iter().map(|d| d.events).sum();
    let weighted: f64 = report
        .per_driver
        .iter()
        .map(|d| d.mse_spacing * d.events as f64)
        .sum::<f64>()
        / n as f64;
    assert_eq!(n, report.total_events);
    assert!((weighted - report.mse_spacing).abs() < 1e-9);
    assert_eq!(
        report.collision_rate_permille,
        1000.0 * report.collision_count as f64 / report.total_events as f64
    );
}

#[test]
fn replaying_the_observation_scores_zero() {
    let fleet = noiseless_fleet(1, 1, 4);
    let e = &fleet.events[0];
    let accels: Vec<f64> = e.states.iter().map(|s| s.a_fv).collect();
    let mut replay = |h: &[KinematicState], _: f64| accels[h.len() - 1];
    let r = rollout(e, &mut replay, 10).unwrap();
    assert!(spacing_mse(&r.simulated, e, 10).unwrap() < 1e-18);
}
